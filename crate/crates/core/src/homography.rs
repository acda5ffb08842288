//! Planar homographies: application, DLT estimation and seeded RANSAC.

use crate::error::{Result, SamError};
use nalgebra::{DMatrix, Matrix3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Row-major 3x3 homography, normalized so `h[8] == 1` where possible.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self([1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0])
    }

    fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.0)
    }

    fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let mut h = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                h[r * 3 + c] = m[(r, c)];
            }
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(SamError::NonFinite("homography entries".into()));
        }
        let mut out = Self(h);
        out.normalize();
        Ok(out)
    }

    /// Scales so the bottom-right entry is 1 (kept as-is if that entry is
    /// numerically zero).
    pub fn normalize(&mut self) {
        let s = self.0[8];
        if s.abs() > 1e-12 {
            for v in &mut self.0 {
                *v /= s;
            }
        }
    }

    /// Maps a source point; `None` for points on the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((
            (h[0] * x + h[1] * y + h[2]) / w,
            (h[3] * x + h[4] * y + h[5]) / w,
        ))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .to_matrix()
            .try_inverse()
            .ok_or_else(|| SamError::Degenerate("non-invertible homography".into()))?;
        Self::from_matrix(&inv)
    }
}

/// One correspondence `(source, target)` in pixels.
pub type PointPair = ((f64, f64), (f64, f64));

/// Hartley normalization: translate centroid to the origin, scale mean
/// distance to sqrt(2).
fn normalizing_transform(points: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (x, y) in points.clone() {
        cx += x / n;
        cy += y / n;
    }
    let mut dist = 0.0;
    for (x, y) in points {
        dist += ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / n;
    }
    let s = if dist > 1e-12 { 2f64.sqrt() / dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Direct linear transform from ≥ 4 correspondences with Hartley
/// normalization; least-squares via SVD when over-determined.
pub fn dlt_homography(pairs: &[PointPair]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(SamError::InvalidArgument(format!(
            "homography needs >= 4 correspondences, got {}",
            pairs.len()
        )));
    }
    let t_src = normalizing_transform(pairs.iter().map(|p| p.0).clone());
    let t_tgt = normalizing_transform(pairs.iter().map(|p| p.1).clone());
    // padded to >= 9 rows so the thin SVD still exposes the null-space
    // right singular vector for minimal 4-point systems
    let mut a = DMatrix::<f64>::zeros((2 * pairs.len()).max(9), 9);
    for (i, &((sx, sy), (tx, ty))) in pairs.iter().enumerate() {
        let xs = t_src * nalgebra::Vector3::new(sx, sy, 1.0);
        let xt = t_tgt * nalgebra::Vector3::new(tx, ty, 1.0);
        let (x, y) = (xs[0], xs[1]);
        let (u, v) = (xt[0], xt[1]);
        let r = 2 * i;
        for (c, val) in [(0, -x), (1, -y), (2, -1.0), (6, u * x), (7, u * y), (8, u)] {
            a[(r, c)] = val;
        }
        for (c, val) in [(3, -x), (4, -y), (5, -1.0), (6, v * x), (7, v * y), (8, v)] {
            a[(r + 1, c)] = val;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| SamError::Degenerate("SVD failed".into()))?;
    // singular vector of the smallest singular value (nalgebra does not
    // guarantee any ordering)
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[a]
            .partial_cmp(&svd.singular_values[b])
            .unwrap()
    });
    let max_sv = svd.singular_values[*order.last().unwrap()];
    // two near-zero singular values mean the solution is not unique
    // (collinear configurations)
    if svd.singular_values[order[1]] < 1e-8 * max_sv.max(1.0) {
        return Err(SamError::Degenerate("collinear correspondences".into()));
    }
    let h = vt.row(order[0]);
    let hn = Matrix3::from_row_slice(h.transpose().as_slice());
    if hn.determinant().abs() < 1e-12 {
        return Err(SamError::Degenerate("collinear correspondences".into()));
    }
    let denorm = t_tgt
        .try_inverse()
        .ok_or_else(|| SamError::Degenerate("normalization singular".into()))?
        * hn
        * t_src;
    Homography::from_matrix(&denorm)
}

fn reprojection_error(h: &Homography, &((sx, sy), (tx, ty)): &PointPair) -> f64 {
    match h.apply(sx, sy) {
        Some((px, py)) => ((px - tx).powi(2) + (py - ty).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

/// Seeded RANSAC over 4-point DLT samples, re-fit on the final inlier set.
/// Returns the homography and the per-correspondence inlier flags.
pub fn estimate_homography(
    pairs: &[PointPair],
    ransac_iters: usize,
    inlier_tol: f64,
    seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    if pairs.len() < 4 {
        return Err(SamError::InvalidArgument(format!(
            "homography needs >= 4 correspondences, got {}",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..ransac_iters {
        let idx = sample(&mut rng, pairs.len(), 4);
        let minimal: Vec<PointPair> = idx.iter().map(|i| pairs[i]).collect();
        let Ok(h) = dlt_homography(&minimal) else {
            continue; // degenerate sample, draw again
        };
        let flags: Vec<bool> = pairs
            .iter()
            .map(|p| reprojection_error(&h, p) <= inlier_tol)
            .collect();
        let count = flags.iter().filter(|&&f| f).count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, flags));
        }
    }
    let (count, flags) = best.ok_or_else(|| {
        SamError::Degenerate("RANSAC found no non-degenerate sample".into())
    })?;
    if count < 4 {
        return Err(SamError::Degenerate(format!(
            "only {count} inliers; cannot re-fit"
        )));
    }
    let inliers: Vec<PointPair> = pairs
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|(p, _)| *p)
        .collect();
    let h = dlt_homography(&inliers)?;
    Ok((h, flags))
}
