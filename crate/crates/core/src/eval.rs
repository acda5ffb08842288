//! Evaluation: matching accuracy (per-image averaged), the textured-query
//! restriction, cycle-consistent mutual-nearest-neighbor filtering and
//! homography AUC.

use crate::error::{Result, SamError};
use crate::features::QuerySet;
use crate::homography::Homography;
use crate::model::ModelConfig;
use crate::model::ParamStore;
use crate::pipeline::{match_pair, MatchOptions, MatchRecord};
use crate::tensor::{DenseArray, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One query with its prediction and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchEval {
    pub query: (usize, usize),
    pub pred: (f64, f64),
    pub gt: (f64, f64),
}

/// All evaluated matches of one image pair. The optional source image
/// enables the texture mask.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub pair_id: String,
    pub entries: Vec<MatchEval>,
    pub img_s: Option<DenseArray<f32>>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Matching accuracy at threshold `eta`: mean over pairs of the per-pair
/// ratio of predictions within `eta` of ground truth.
pub fn matching_accuracy(pairs: &[EvalPair], eta: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SamError::EmptyInput("no evaluation pairs".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        if pair.entries.is_empty() {
            return Err(SamError::EmptyInput(format!(
                "pair {} has no correspondences",
                pair.pair_id
            )));
        }
        let correct = pair
            .entries
            .iter()
            .filter(|e| dist(e.pred, e.gt) < eta)
            .count();
        total += correct as f64 / pair.entries.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Texture-mask parameters: patch side and grayscale-std threshold on
/// `[0, 1]` images.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TextureMaskParams {
    pub patch: usize,
    pub tau: f64,
}

impl Default for TextureMaskParams {
    fn default() -> Self {
        Self { patch: 8, tau: 0.05 }
    }
}

/// `true` per query iff the grayscale standard deviation of the patch
/// centered (clamped into the frame) at the query is at least `tau`.
pub fn texture_mask(
    img: &DenseArray<f32>,
    queries: &[(usize, usize)],
    params: &TextureMaskParams,
) -> Vec<bool> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let patch = params.patch.min(h).min(w).max(1);
    queries
        .iter()
        .map(|&(qx, qy)| {
            let x0 = (qx.saturating_sub(patch / 2)).min(w - patch);
            let y0 = (qy.saturating_sub(patch / 2)).min(h - patch);
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            let n = (patch * patch) as f64;
            for y in y0..y0 + patch {
                for x in x0..x0 + patch {
                    let g = (0..3).map(|c| img.at3(y, x, c) as f64).sum::<f64>() / 3.0;
                    sum += g;
                    sq += g * g;
                }
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            var.sqrt() >= params.tau
        })
        .collect()
}

/// Matching accuracy over textured queries only. Pairs whose mask removes
/// every query are dropped from the average; the count of dropped pairs is
/// returned alongside.
pub fn matching_accuracy_textured(
    pairs: &[EvalPair],
    eta: f64,
    params: &TextureMaskParams,
) -> Result<(f64, usize)> {
    let mut kept = Vec::new();
    let mut dropped = 0;
    for pair in pairs {
        let img = pair.img_s.as_ref().ok_or_else(|| {
            SamError::InvalidArgument(format!(
                "pair {} lacks a source image for the texture mask",
                pair.pair_id
            ))
        })?;
        let queries: Vec<(usize, usize)> = pair.entries.iter().map(|e| e.query).collect();
        let mask = texture_mask(img, &queries, params);
        let entries: Vec<MatchEval> = pair
            .entries
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(e, _)| e.clone())
            .collect();
        if entries.is_empty() {
            dropped += 1;
            continue;
        }
        kept.push(EvalPair {
            pair_id: pair.pair_id.clone(),
            entries,
            img_s: None,
        });
    }
    if kept.is_empty() {
        return Err(SamError::EmptyInput(
            "texture mask removed every pair".into(),
        ));
    }
    Ok((matching_accuracy(&kept, eta)?, dropped))
}

/// Cycle-consistency filter: re-match target→source from the predictions
/// (rounded onto the stride-8 grid) and keep records whose roundtrip lands
/// within `delta` of the original query. Output preserves input order.
pub fn mnn_filter<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    img_s: &DenseArray<F>,
    img_t: &DenseArray<F>,
    records: &[MatchRecord],
    delta: f64,
    options: &MatchOptions,
) -> Result<Vec<MatchRecord>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let (ht, wt) = (img_t.shape()[0], img_t.shape()[1]);
    let snap = |v: f64, max: usize| -> usize {
        let g = ((v / 8.0).round() * 8.0) as i64;
        let last = ((max - 1) / 8) * 8;
        g.clamp(0, last as i64) as usize
    };
    let back_points: Vec<(usize, usize)> = records
        .iter()
        .map(|r| (snap(r.refined.0, wt), snap(r.refined.1, ht)))
        .collect();
    let back_queries = QuerySet::new(back_points, wt, ht)?;
    let back = match_pair(store, config, img_t, img_s, &back_queries, options)?;
    Ok(records
        .iter()
        .zip(&back)
        .filter(|(r, b)| dist(b.refined, (r.query.0 as f64, r.query.1 as f64)) <= delta)
        .map(|(r, _)| r.clone())
        .collect())
}

/// Mean reprojection error of the four image corners under the estimated
/// vs ground-truth homography.
pub fn corner_reprojection_error(
    est: &Homography,
    gt: &Homography,
    width: usize,
    height: usize,
) -> f64 {
    let (w, h) = (width as f64, height as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut total = 0.0;
    for &(x, y) in &corners {
        match (est.apply(x, y), gt.apply(x, y)) {
            (Some(e), Some(g)) => total += dist(e, g) / 4.0,
            _ => return f64::INFINITY,
        }
    }
    total
}

/// AUC at each threshold: mean over pairs of `max(0, 1 - err/t)`; failed
/// estimations enter as infinite error.
pub fn homography_auc(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if errors.is_empty() {
                return 0.0;
            }
            errors
                .iter()
                .map(|&e| if e.is_finite() { (1.0 - e / t).max(0.0) } else { 0.0 })
                .sum::<f64>()
                / errors.len() as f64
        })
        .collect()
}

/// Versioned metrics report.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub texture: Option<TextureMaskParams>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ma: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ma_text: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub auc: BTreeMap<String, f64>,
    #[serde(default)]
    pub dropped_textureless_pairs: usize,
}

impl PartialEq for TextureMaskParams {
    fn eq(&self, other: &Self) -> bool {
        self.patch == other.patch && self.tau == other.tau
    }
}

pub const REPORT_VERSION: u32 = 1;

/// Standard MA thresholds of the evaluation protocol.
pub const ETA_SET: [f64; 6] = [1.0, 2.0, 3.0, 5.0, 10.0, 20.0];
/// Standard homography AUC thresholds.
pub const AUC_THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];

impl Report {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| SamError::Format(format!("report serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| SamError::Format(format!("report parse: {e}")))
    }
}
