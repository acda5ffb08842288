//! End-to-end matcher: latent assembly, cross/self attention stages,
//! correspondence maps, coarse argmax matching, window refinement and query
//! batching.

use crate::attention::{attention_block_core, BlockVariant, BlockVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Result, SamError};
use crate::features::{
    concat_features, extract_coarse_features, extract_fine_features, positional_encoding,
    sample_descriptors, FeatureGrid, QuerySet,
};
use crate::graph::TapeParams;
use crate::model::{ModelConfig, ParamStore, PeMode};
use crate::tensor::{DenseArray, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Half-width of the refinement window (window size 11).
pub const REFINE_RADIUS: i64 = 5;

/// One query's final prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    /// Source pixel `(x, y)`.
    pub query: (usize, usize),
    /// Coarse cell-center prediction `(x, y)` in target pixels.
    pub coarse: (f64, f64),
    /// Refined prediction; equals `coarse` when refinement is off.
    pub refined: (f64, f64),
    /// Correspondence-map value at the argmax.
    pub score: f64,
}

/// Cached per-pair features: assembled coarse grids and, when the refiner is
/// enabled, full-resolution fine grids.
pub struct PreparedPair<F> {
    pub h_s: FeatureGrid<F>,
    pub h_t: FeatureGrid<F>,
    pub fine_s: Option<FeatureGrid<F>>,
    pub fine_t: Option<FeatureGrid<F>>,
}

/// Combines visual features and positional encodings per the configured
/// mode.
pub fn assemble_features<F: Scalar>(
    visual: &FeatureGrid<F>,
    pe: &FeatureGrid<F>,
    mode: PeMode,
) -> Result<FeatureGrid<F>> {
    match mode {
        PeMode::Concat => concat_features(visual, pe),
        PeMode::Add => {
            if visual.channels != pe.channels
                || visual.height != pe.height
                || visual.width != pe.width
            {
                return Err(SamError::ShapeMismatch("add-mode PE shape".into()));
            }
            let mut data = visual.data.clone();
            for (v, p) in data.data_mut().iter_mut().zip(pe.data.data()) {
                *v = *v + *p;
            }
            Ok(FeatureGrid::new(visual.stride, data))
        }
    }
}

/// Runs the siamese extractor once for a pair; everything downstream reuses
/// the result.
pub fn prepare_pair<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    img_s: &DenseArray<F>,
    img_t: &DenseArray<F>,
) -> Result<PreparedPair<F>> {
    let mut grids = Vec::new();
    for img in [img_s, img_t] {
        let vis = extract_coarse_features(store, config, "backbone", img)?;
        let pe = positional_encoding(store, vis.height, vis.width)?;
        grids.push(assemble_features(&vis, &pe, config.pe_mode)?);
    }
    let h_t = grids.pop().expect("two grids");
    let h_s = grids.pop().expect("two grids");
    let (fine_s, fine_t) = if config.with_refiner {
        (
            Some(extract_fine_features(store, config, img_s)?),
            Some(extract_fine_features(store, config, img_t)?),
        )
    } else {
        (None, None)
    };
    Ok(PreparedPair { h_s, h_t, fine_s, fine_t })
}

/// Tape handles produced by the latent stage.
pub struct LatentStageVars {
    /// All `M + L` latents after the self-attention stack.
    pub latents: Var,
    /// The `L` query rows of `latents`.
    pub queries: Var,
    /// Target grid after output cross-attention, `[N_t, D]`.
    pub h_out: Var,
    pub learned_count: usize,
}

/// Latent assembly, input cross-attention, `S` self-attention layers and
/// output cross-attention on the tape. Degenerates gracefully for the
/// ablation configurations (no attention / no learned latents).
pub fn latent_stage_graph<F: Scalar>(
    tape: &mut Tape<F>,
    params: &TapeParams,
    config: &ModelConfig,
    descriptors: Var,
    h_t_flat: Var,
) -> Result<LatentStageVars> {
    if tape.value(h_t_flat).rows() == 0 {
        return Err(SamError::EmptyInput("empty target grid".into()));
    }
    if !config.use_attention {
        return Ok(LatentStageVars {
            latents: descriptors,
            queries: descriptors,
            h_out: h_t_flat,
            learned_count: 0,
        });
    }
    let l = tape.value(descriptors).rows();
    let mut learned_count = 0;
    let mut x = descriptors;
    if config.use_latents_output_ca && config.learned_latents > 0 {
        let learned = params.var("latents")?;
        learned_count = tape.value(learned).rows();
        x = tape.concat_rows(learned, descriptors)?;
    }
    let input_ca = BlockVars::resolve(
        params,
        "input_ca",
        config.heads,
        config.structured,
        BlockVariant::Standard,
    )?;
    x = attention_block_core(tape, &input_ca, x, h_t_flat, BlockVariant::Standard)?;
    for s in 0..config.self_layers {
        let block = BlockVars::resolve(
            params,
            &format!("self{s}"),
            config.heads,
            config.structured,
            BlockVariant::Standard,
        )?;
        x = attention_block_core(tape, &block, x, x, BlockVariant::Standard)?;
    }
    let queries = tape.slice_rows(x, learned_count, learned_count + l)?;
    let h_out = if config.use_latents_output_ca {
        let output_ca = BlockVars::resolve(
            params,
            "output_ca",
            config.heads,
            config.structured,
            BlockVariant::Output,
        )?;
        attention_block_core(tape, &output_ca, h_t_flat, x, BlockVariant::Output)?
    } else {
        h_t_flat
    };
    Ok(LatentStageVars { latents: x, queries, h_out, learned_count })
}

fn run_stage<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    descriptors: &DenseArray<F>,
    h_t_flat: &DenseArray<F>,
) -> Result<(DenseArray<F>, DenseArray<F>, DenseArray<F>)> {
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, store)?;
    let d = tape.constant(descriptors.clone())?;
    let h = tape.constant(h_t_flat.clone())?;
    let stage = latent_stage_graph(&mut tape, &params, config, d, h)?;
    Ok((
        tape.value(stage.latents).clone(),
        tape.value(stage.queries).clone(),
        tape.value(stage.h_out).clone(),
    ))
}

/// Standalone input cross-attention: latents attend over the flattened
/// target grid.
pub fn input_cross_attention<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    latents: &DenseArray<F>,
    h_t_flat: &DenseArray<F>,
) -> Result<DenseArray<F>> {
    if h_t_flat.rows() == 0 {
        return Err(SamError::EmptyInput("empty target grid".into()));
    }
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, store)?;
    let x = tape.constant(latents.clone())?;
    let kv = tape.constant(h_t_flat.clone())?;
    let block = BlockVars::resolve(
        &params,
        "input_ca",
        config.heads,
        config.structured,
        BlockVariant::Standard,
    )?;
    let out = attention_block_core(&mut tape, &block, x, kv, BlockVariant::Standard)?;
    Ok(tape.value(out).clone())
}

/// Standalone self-attention stack (keys = values = queries = all latents).
pub fn self_attention_stack<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    latents: &DenseArray<F>,
) -> Result<DenseArray<F>> {
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, store)?;
    let mut x = tape.constant(latents.clone())?;
    for s in 0..config.self_layers {
        let block = BlockVars::resolve(
            &params,
            &format!("self{s}"),
            config.heads,
            config.structured,
            BlockVariant::Standard,
        )?;
        x = attention_block_core(&mut tape, &block, x, x, BlockVariant::Standard)?;
    }
    Ok(tape.value(x).clone())
}

/// Standalone output cross-attention: grid cells query the latent set.
pub fn output_cross_attention<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    h_t_flat: &DenseArray<F>,
    latents: &DenseArray<F>,
) -> Result<DenseArray<F>> {
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, store)?;
    let q = tape.constant(h_t_flat.clone())?;
    let kv = tape.constant(latents.clone())?;
    let block = BlockVars::resolve(
        &params,
        "output_ca",
        config.heads,
        config.structured,
        BlockVariant::Output,
    )?;
    let out = attention_block_core(&mut tape, &block, q, kv, BlockVariant::Output)?;
    Ok(tape.value(out).clone())
}

/// Dot product of one query vector against every cell of the (flattened)
/// grid, reshaped back to `[h, w]`.
pub fn correspondence_map<F: Scalar>(
    h: &[F],
    grid_flat: &DenseArray<F>,
    h_cells: usize,
    w_cells: usize,
) -> Result<DenseArray<F>> {
    if grid_flat.rows() != h_cells * w_cells || grid_flat.cols() != h.len() {
        return Err(SamError::ShapeMismatch(format!(
            "correspondence map: grid {:?} vs {} cells of dim {}",
            grid_flat.shape(),
            h_cells * w_cells,
            h.len()
        )));
    }
    let mut scores = Vec::with_capacity(h_cells * w_cells);
    for n in 0..grid_flat.rows() {
        let row = grid_flat.row(n);
        scores.push(h.iter().zip(row).map(|(&a, &b)| a * b).sum());
    }
    DenseArray::new(vec![h_cells, w_cells], scores)
}

/// Decomposes a correspondence map into the visio-positional part (upper
/// channel halves) and the positional part (lower halves); the two sum to
/// the full map.
pub fn split_correspondence_maps<F: Scalar>(
    h: &[F],
    grid_flat: &DenseArray<F>,
    h_cells: usize,
    w_cells: usize,
) -> Result<(DenseArray<F>, DenseArray<F>)> {
    let d = h.len();
    if d % 2 != 0 {
        return Err(SamError::InvalidArgument("odd feature dim".into()));
    }
    let half = d / 2;
    let mut vis = Vec::with_capacity(h_cells * w_cells);
    let mut pos = Vec::with_capacity(h_cells * w_cells);
    for n in 0..grid_flat.rows() {
        let row = grid_flat.row(n);
        vis.push(h[..half].iter().zip(&row[..half]).map(|(&a, &b)| a * b).sum());
        pos.push(h[half..].iter().zip(&row[half..]).map(|(&a, &b)| a * b).sum());
    }
    Ok((
        DenseArray::new(vec![h_cells, w_cells], vis)?,
        DenseArray::new(vec![h_cells, w_cells], pos)?,
    ))
}

/// Argmax of a correspondence map as target-pixel coordinates
/// `(4c + 1.5, 4r + 1.5)`; ties break to the row-major first maximum.
pub fn coarse_match<F: Scalar>(map: &DenseArray<F>) -> Result<((f64, f64), f64)> {
    if map.len() == 0 {
        return Err(SamError::EmptyInput("empty correspondence map".into()));
    }
    let (rows, cols) = (map.rows(), map.cols());
    let mut best = (0usize, 0usize);
    let mut best_v = map.at2(0, 0);
    for r in 0..rows {
        for c in 0..cols {
            let v = map.at2(r, c);
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
    }
    Ok((
        (4.0 * best.1 as f64 + 1.5, 4.0 * best.0 as f64 + 1.5),
        best_v.to_f64(),
    ))
}

/// Fine-level refinement: argmax of the query's fine-descriptor dot product
/// over a window of size 11 centered on the rounded coarse prediction,
/// clamped to the image.
pub fn refine<F: Scalar>(
    query: (usize, usize),
    fine_src: &FeatureGrid<F>,
    fine_tgt: &FeatureGrid<F>,
    coarse_pred: (f64, f64),
) -> Result<(f64, f64)> {
    let (qx, qy) = query;
    if qx >= fine_src.width || qy >= fine_src.height {
        return Err(SamError::OutOfBounds(format!(
            "query ({qx},{qy}) outside {}x{} fine grid",
            fine_src.width, fine_src.height
        )));
    }
    if fine_src.channels != fine_tgt.channels {
        return Err(SamError::ShapeMismatch("fine channel mismatch".into()));
    }
    let cx = coarse_pred.0.clamp(0.0, fine_tgt.width as f64 - 1.0);
    let cy = coarse_pred.1.clamp(0.0, fine_tgt.height as f64 - 1.0);
    let r = REFINE_RADIUS as f64;
    // pixels within the refinement radius of the (clamped) coarse
    // prediction, so the displacement bound holds for fractional centers too
    let x_lo = ((cx - r).ceil() as i64).max(0);
    let x_hi = ((cx + r).floor() as i64).min(fine_tgt.width as i64 - 1);
    let y_lo = ((cy - r).ceil() as i64).max(0);
    let y_hi = ((cy + r).floor() as i64).min(fine_tgt.height as i64 - 1);
    let mut best: Option<((usize, usize), f64)> = None;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (x, y) = (x as usize, y as usize);
            let mut dot = 0.0f64;
            for ch in 0..fine_src.channels {
                dot += fine_src.data.at3(qy, qx, ch).to_f64() * fine_tgt.data.at3(y, x, ch).to_f64();
            }
            if best.map_or(true, |(_, b)| dot > b) {
                best = Some(((x, y), dot));
            }
        }
    }
    let ((x, y), _) = best.expect("window never empty after clamping");
    Ok((x as f64, y as f64))
}

/// Matching options; defaults follow the evaluation protocol.
#[derive(Debug, Clone)]
pub struct MatchOptions {
    pub batch_size: usize,
    /// When set, queries are shuffled into batches with this seed. Batch
    /// composition affects predictions whenever `S > 0`.
    pub shuffle_seed: Option<u64>,
    /// Skip fine refinement even when the model carries a refiner.
    pub coarse_only: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self { batch_size: 1024, shuffle_seed: None, coarse_only: false }
    }
}

/// Matches a prepared pair; records come back in input query order.
pub fn match_prepared<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    pair: &PreparedPair<F>,
    queries: &QuerySet,
    options: &MatchOptions,
) -> Result<Vec<MatchRecord>> {
    if queries.is_empty() {
        return Err(SamError::EmptyInput("no queries".into()));
    }
    if options.batch_size == 0 {
        return Err(SamError::InvalidArgument("batch size 0".into()));
    }
    let descriptors = sample_descriptors(&pair.h_s, queries)?;
    let h_t_flat = pair.h_t.flat();
    let (hc, wc) = (pair.h_t.height, pair.h_t.width);

    let mut order: Vec<usize> = (0..queries.len()).collect();
    if let Some(seed) = options.shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    let mut records: Vec<Option<MatchRecord>> = vec![None; queries.len()];
    for chunk in order.chunks(options.batch_size) {
        let rows: Vec<Vec<F>> = chunk.iter().map(|&i| descriptors.row(i).to_vec()).collect();
        let batch_desc = DenseArray::from_rows(&rows)?;
        let (_, queries_s, h_out) = run_stage(store, config, &batch_desc, &h_t_flat)?;
        for (local, &orig) in chunk.iter().enumerate() {
            let map = correspondence_map(queries_s.row(local), &h_out, hc, wc)?;
            let (coarse, score) = coarse_match(&map)?;
            let refined = match (&pair.fine_s, &pair.fine_t) {
                (Some(fs), Some(ft)) if !options.coarse_only => {
                    refine(queries.points[orig], fs, ft, coarse)?
                }
                _ => coarse,
            };
            records[orig] = Some(MatchRecord {
                query: queries.points[orig],
                coarse,
                refined,
                score,
            });
        }
    }
    Ok(records.into_iter().map(|r| r.expect("every query matched")).collect())
}

/// Full pipeline on raw images.
pub fn match_pair<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    img_s: &DenseArray<F>,
    img_t: &DenseArray<F>,
    queries: &QuerySet,
    options: &MatchOptions,
) -> Result<Vec<MatchRecord>> {
    let pair = prepare_pair(store, config, img_s, img_t)?;
    match_prepared(store, config, &pair, queries, options)
}

/// Mean of the learned latents' correspondence maps over the target grid
/// (debug visualization).
pub fn average_latent_map<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    img_s: &DenseArray<F>,
    img_t: &DenseArray<F>,
) -> Result<DenseArray<f64>> {
    if !(config.use_latents_output_ca && config.learned_latents > 0) {
        return Err(SamError::InvalidArgument(
            "model has no learned latent vectors".into(),
        ));
    }
    let pair = prepare_pair(store, config, img_s, img_t)?;
    let queries = QuerySet::grid(
        pair.h_s.width * pair.h_s.stride,
        pair.h_s.height * pair.h_s.stride,
        8,
    );
    let descriptors = sample_descriptors(&pair.h_s, &queries)?;
    let h_t_flat = pair.h_t.flat();
    let (latents, _, h_out) = run_stage(store, config, &descriptors, &h_t_flat)?;
    let (hc, wc) = (pair.h_t.height, pair.h_t.width);
    let mut mean = DenseArray::<f64>::zeros(vec![hc, wc]);
    let m = config.learned_latents;
    for i in 0..m {
        let map = correspondence_map(latents.row(i), &h_out, hc, wc)?;
        for (acc, v) in mean.data_mut().iter_mut().zip(map.data()) {
            *acc += Scalar::to_f64(*v) / m as f64;
        }
    }
    Ok(mean)
}
