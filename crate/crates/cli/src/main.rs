//! `sam` command-line interface: matching, toy training, evaluation,
//! gradient checking, ablations and debug visualizations.

mod files;

use clap::{Args, Parser, Subcommand};
use files::{expect_fields, parse_f64, parse_usize, read_csv, write_csv};
use sam_core::checkpoint::{load_checkpoint, save_checkpoint};
use sam_core::eval::{
    corner_reprojection_error, matching_accuracy, matching_accuracy_textured, EvalPair,
    MatchEval, Report, TextureMaskParams, AUC_THRESHOLDS, ETA_SET, REPORT_VERSION,
};
use sam_core::features::QuerySet;
use sam_core::gradcheck::grad_check;
use sam_core::graph::TapeParams;
use sam_core::homography::{estimate_homography, Homography};
use sam_core::imageio::{load_image, render_overlay, save_gray_map, save_image};
use sam_core::model::{ModelConfig, SamModel};
use sam_core::pipeline::{average_latent_map, match_pair, MatchOptions, MatchRecord};
use sam_core::synth::{gen_synthetic_pair, TextureParams};
use sam_core::train::{
    build_variant, matcher_loss_graph, train_matcher_from, train_refiner_from, AblationVariant,
    TrainConfig,
};
use sam_core::autodiff::Tape;
use sam_core::tensor::DenseArray;
use sam_core::{Result, SamError};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MATCH_HEADER: &str = "pair_id,qx,qy,px,py,score";
pub const GT_HEADER: &str = "pair_id,qx,qy,gx,gy";
pub const LOSS_HEADER: &str = "step,lr,loss";
pub const HOMOGRAPHY_HEADER: &str = "pair_id,h00,h01,h02,h10,h11,h12,h20,h21,h22";

#[derive(Parser)]
#[command(name = "sam", about = "Structured attention matcher", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match a source image against a target image.
    Match(MatchArgs),
    /// Train the matcher (and optionally the refiner) on synthetic pairs.
    Train(TrainArgs),
    /// Evaluate predictions against ground truth.
    Eval(EvalArgs),
    /// Full-pipeline finite-difference gradient check (toy profile).
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the six ablation variants.
    Ablate(AblateArgs),
    /// Generate synthetic homography pairs with ground truth.
    GenData(GenDataArgs),
    /// Render the averaged learned-latent correspondence map.
    LatentMap(LatentMapArgs),
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Identifier written to the pair_id column.
    #[arg(long, default_value = "pair0")]
    pair_id: String,
    /// Query grid stride in source pixels.
    #[arg(long, default_value_t = 8)]
    stride: usize,
    /// Optional query CSV (`qx,qy` per line) instead of the grid.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Emit coarse predictions without fine refinement.
    #[arg(long)]
    coarse_only: bool,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    /// Shuffle queries into batches with this seed.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Optional overlay PNG (requires --gt for coloring).
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Correctness threshold for overlay coloring (px).
    #[arg(long, default_value_t = 2.0)]
    eta: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// toy | paper
    #[arg(long, default_value = "toy")]
    profile: String,
    /// Ablation variant (default: the full model).
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 15)]
    warmup: usize,
    #[arg(long, default_value_t = 6e-3)]
    lr_peak: f64,
    #[arg(long, default_value_t = 2e-3)]
    lr_floor: f64,
    /// Homography corner jitter as a fraction of the image size (max 0.15).
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// matcher | refiner | both
    #[arg(long, default_value = "matcher")]
    stage: String,
    /// Start from an existing checkpoint instead of fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory with `<pair_id>_s.png` source images (enables MA_text).
    #[arg(long)]
    images_dir: Option<PathBuf>,
    /// Ground-truth homography CSV (enables AUC).
    #[arg(long)]
    homography_gt: Option<PathBuf>,
    /// Image side used for AUC corner reprojection.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated MA thresholds.
    #[arg(long)]
    eta: Option<String>,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    /// Coordinates checked per parameter group (0 = all).
    #[arg(long, default_value_t = 4)]
    max_coords: usize,
    /// Central-difference step. Keep small: perturbing a bias shifts every
    /// downstream ReLU pre-activation, and a large step straddles the kinks.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 120)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Held-out evaluation pairs.
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    eta: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Uniform low-contrast patches stamped per image.
    #[arg(long, default_value_t = 0)]
    patches: usize,
}

#[derive(Args)]
struct LatentMapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &SamError) -> i32 {
    match e {
        SamError::Io(_) | SamError::Image(_) => 2,
        SamError::ShapeMismatch(_) | SamError::OutOfBounds(_) => 3,
        SamError::NonFinite(_) | SamError::Degenerate(_) => 4,
        SamError::Format(_) | SamError::InvalidArgument(_) | SamError::EmptyInput(_) => 5,
    }
}

/// `SAM_SEED` overrides any configured seed.
fn effective_seed(cli_seed: u64) -> Result<u64> {
    match std::env::var("SAM_SEED") {
        Ok(s) => s
            .parse()
            .map_err(|_| SamError::Format(format!("bad SAM_SEED `{s}`"))),
        Err(_) => Ok(cli_seed),
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Match(a) => cmd_match(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::LatentMap(a) => cmd_latent_map(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn config_comment(model: &SamModel) -> Result<String> {
    let cfg = serde_json::to_string(&model.config)
        .map_err(|e| SamError::Format(format!("config serialization: {e}")))?;
    Ok(format!("seed={} config={cfg}", model.seed))
}

fn read_queries(path: &Path, width: usize, height: usize) -> Result<QuerySet> {
    let rows = read_csv(path, "qx,qy")?;
    let mut points = Vec::with_capacity(rows.len());
    for row in &rows {
        let f = expect_fields(row, 2, "query row")?;
        points.push((parse_usize(&f[0], "qx")?, parse_usize(&f[1], "qy")?));
    }
    QuerySet::new(points, width, height)
}

fn match_rows(pair_id: &str, records: &[MatchRecord], coarse_only: bool) -> Vec<String> {
    records
        .iter()
        .map(|r| {
            let (px, py) = if coarse_only { r.coarse } else { r.refined };
            format!("{pair_id},{},{},{px},{py},{}", r.query.0, r.query.1, r.score)
        })
        .collect()
}

fn cmd_match(args: MatchArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let img_s = load_image(&args.source)?;
    let img_t = load_image(&args.target)?;
    let (h, w) = (img_s.shape()[0], img_s.shape()[1]);
    let queries = match &args.queries {
        Some(path) => read_queries(path, w, h)?,
        None => QuerySet::grid(w, h, args.stride),
    };
    let options = MatchOptions {
        batch_size: args.batch_size,
        shuffle_seed: args.shuffle_seed,
        coarse_only: args.coarse_only,
    };
    let records = match_pair(&model.store, &model.config, &img_s, &img_t, &queries, &options)?;
    let comments = vec![config_comment(&model)?];
    write_csv(
        &args.out,
        &comments,
        MATCH_HEADER,
        &match_rows(&args.pair_id, &records, args.coarse_only),
    )?;
    if let Some(overlay_path) = &args.overlay {
        let gts: Vec<Option<(f64, f64)>> = match &args.gt {
            Some(gt_path) => {
                let gt = read_gt(gt_path)?;
                let map = gt.get(&args.pair_id).cloned().unwrap_or_default();
                records
                    .iter()
                    .map(|r| map.get(&r.query).copied())
                    .collect()
            }
            None => vec![None; records.len()],
        };
        let overlay = render_overlay(&img_s, &records, &gts, args.eta)?;
        save_image(overlay_path, &overlay)?;
    }
    Ok(())
}

fn base_profile(profile: &str) -> Result<ModelConfig> {
    match profile {
        "toy" => Ok(ModelConfig::toy()),
        "paper" => Ok(ModelConfig::paper()),
        other => Err(SamError::InvalidArgument(format!(
            "unknown profile `{other}` (expected toy|paper)"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let base = base_profile(&args.profile)?;
    let variant = AblationVariant::parse(&args.variant)?;
    let model_cfg = build_variant(variant, &base);
    let cfg = TrainConfig {
        model: model_cfg.clone(),
        steps: args.steps,
        warmup_steps: args.warmup,
        lr_peak: args.lr_peak,
        lr_floor: args.lr_floor,
        seed,
        image_size: args.image_size,
        texture: TextureParams { jitter_frac: args.jitter, ..TextureParams::default() },
    };
    cfg.validate()?;
    let mut model = match &args.init {
        Some(path) => {
            let m = load_checkpoint(path)?;
            if m.config != model_cfg {
                return Err(SamError::InvalidArgument(
                    "checkpoint config does not match the requested profile/variant".into(),
                ));
            }
            m
        }
        None => SamModel::init(model_cfg, seed)?,
    };
    let mut log = Vec::new();
    let (matcher, refiner) = match args.stage.as_str() {
        "matcher" => (true, false),
        "refiner" => (false, true),
        "both" => (true, true),
        other => {
            return Err(SamError::InvalidArgument(format!(
                "unknown stage `{other}` (expected matcher|refiner|both)"
            )))
        }
    };
    if matcher {
        let report = train_matcher_from(&mut model, &cfg)?;
        log.extend(report.log);
    }
    if refiner {
        let report = train_refiner_from(&mut model, &cfg)?;
        log.extend(report.log);
    }
    save_checkpoint(&args.out, &model)?;
    if let Some(log_path) = &args.log {
        let comments = vec![
            config_comment(&model)?,
            format!(
                "steps={} warmup={} lr_peak={} lr_floor={} image_size={} stage={}",
                args.steps, args.warmup, args.lr_peak, args.lr_floor, args.image_size, args.stage
            ),
        ];
        let rows: Vec<String> = log
            .iter()
            .map(|r| format!("{},{},{}", r.step, r.lr, r.loss))
            .collect();
        write_csv(log_path, &comments, LOSS_HEADER, &rows)?;
    }
    Ok(())
}

type GtMap = BTreeMap<String, BTreeMap<(usize, usize), (f64, f64)>>;

fn read_gt(path: &Path) -> Result<GtMap> {
    let rows = read_csv(path, GT_HEADER)?;
    let mut out: GtMap = BTreeMap::new();
    for row in &rows {
        let f = expect_fields(row, 5, "ground-truth row")?;
        let q = (parse_usize(&f[1], "qx")?, parse_usize(&f[2], "qy")?);
        let g = (parse_f64(&f[3], "gx")?, parse_f64(&f[4], "gy")?);
        if out.entry(f[0].clone()).or_default().insert(q, g).is_some() {
            return Err(SamError::Format(format!(
                "duplicate ground-truth query {q:?} in pair {}",
                f[0]
            )));
        }
    }
    Ok(out)
}

type PredMap = BTreeMap<String, Vec<((usize, usize), (f64, f64))>>;

fn read_predictions(path: &Path) -> Result<PredMap> {
    let rows = read_csv(path, MATCH_HEADER)?;
    let mut out: PredMap = BTreeMap::new();
    for row in &rows {
        let f = expect_fields(row, 6, "prediction row")?;
        let q = (parse_usize(&f[1], "qx")?, parse_usize(&f[2], "qy")?);
        let p = (parse_f64(&f[3], "px")?, parse_f64(&f[4], "py")?);
        parse_f64(&f[5], "score")?;
        out.entry(f[0].clone()).or_default().push((q, p));
    }
    Ok(out)
}

fn read_homography_gt(path: &Path) -> Result<BTreeMap<String, Homography>> {
    let rows = read_csv(path, HOMOGRAPHY_HEADER)?;
    let mut out = BTreeMap::new();
    for row in &rows {
        let f = expect_fields(row, 10, "homography row")?;
        let mut h = [0.0; 9];
        for (i, hv) in h.iter_mut().enumerate() {
            *hv = parse_f64(&f[i + 1], "homography entry")?;
        }
        out.insert(f[0].clone(), Homography(h));
    }
    Ok(out)
}

fn parse_eta_list(s: &Option<String>) -> Result<Vec<f64>> {
    match s {
        None => Ok(ETA_SET.to_vec()),
        Some(s) => s
            .split(',')
            .map(|t| parse_f64(t, "eta"))
            .collect(),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let preds = read_predictions(&args.pred)?;
    let gt = read_gt(&args.gt)?;
    let pred_ids: Vec<&String> = preds.keys().collect();
    let gt_ids: Vec<&String> = gt.keys().collect();
    if pred_ids != gt_ids {
        return Err(SamError::Format(format!(
            "pair sets differ: predictions {pred_ids:?} vs ground truth {gt_ids:?}"
        )));
    }
    let mut pairs = Vec::new();
    for (pair_id, entries) in &preds {
        let gt_map = &gt[pair_id];
        if entries.len() != gt_map.len() {
            return Err(SamError::Format(format!(
                "pair {pair_id}: {} predictions vs {} ground-truth rows",
                entries.len(),
                gt_map.len()
            )));
        }
        let mut evals = Vec::with_capacity(entries.len());
        for &(q, p) in entries {
            let g = gt_map.get(&q).ok_or_else(|| {
                SamError::Format(format!("pair {pair_id}: no ground truth for query {q:?}"))
            })?;
            evals.push(MatchEval { query: q, pred: p, gt: *g });
        }
        let img_s = match &args.images_dir {
            Some(dir) => Some(load_image(&dir.join(format!("{pair_id}_s.png")))?),
            None => None,
        };
        pairs.push(EvalPair { pair_id: pair_id.clone(), entries: evals, img_s });
    }

    let texture_params = TextureMaskParams { patch: args.patch, tau: args.tau };
    let etas = parse_eta_list(&args.eta)?;
    let mut report = Report {
        version: REPORT_VERSION,
        seed: Some(seed),
        texture: Some(texture_params),
        ..Default::default()
    };
    for &eta in &etas {
        report.ma.insert(format!("{eta}"), matching_accuracy(&pairs, eta)?);
    }
    if args.images_dir.is_some() {
        for &eta in &etas {
            let (v, dropped) = matching_accuracy_textured(&pairs, eta, &texture_params)?;
            report.ma_text.insert(format!("{eta}"), v);
            report.dropped_textureless_pairs = dropped;
        }
    }
    if let Some(hpath) = &args.homography_gt {
        let hgt = read_homography_gt(hpath)?;
        let mut errors = Vec::new();
        for (idx, pair) in pairs.iter().enumerate() {
            let gt_h = hgt.get(&pair.pair_id).ok_or_else(|| {
                SamError::Format(format!("no ground-truth homography for {}", pair.pair_id))
            })?;
            let corr: Vec<_> = pair
                .entries
                .iter()
                .map(|e| ((e.query.0 as f64, e.query.1 as f64), e.pred))
                .collect();
            let err = match estimate_homography(&corr, 2000, 3.0, seed.wrapping_add(idx as u64)) {
                Ok((est, _)) => {
                    corner_reprojection_error(&est, gt_h, args.image_size, args.image_size)
                }
                Err(_) => f64::INFINITY,
            };
            errors.push(err);
        }
        for (t, v) in AUC_THRESHOLDS.iter().zip(sam_core::eval::homography_auc(
            &errors,
            &AUC_THRESHOLDS,
        )) {
            report.auc.insert(format!("{t}"), v);
        }
    }
    std::fs::write(&args.out, report.to_json()?)?;
    println!("{}", report.to_json()?);
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    // toy profile forced; the refiner has its own loss and is not part of
    // the matcher graph
    let mut cfg = ModelConfig::toy();
    cfg.with_refiner = false;
    let model = SamModel::init(cfg.clone(), seed)?;
    let store64 = model.store.to_f64();
    let names: Vec<String> = store64.iter().map(|p| p.name.clone()).collect();
    let values: Vec<DenseArray<f64>> = store64.iter().map(|p| p.value.clone()).collect();
    let masks: Vec<Option<Vec<bool>>> = store64.iter().map(|p| p.mask.clone()).collect();
    let pair = gen_synthetic_pair(seed.wrapping_add(1), args.image_size, &TextureParams::default())?;
    let img_s = pair.img_s.to_f64();
    let img_t = pair.img_t.to_f64();
    let correspondences = pair.correspondences.clone();

    let run = |params: &[DenseArray<f64>]| -> Result<(f64, Vec<DenseArray<f64>>)> {
        let mut store = store64.clone();
        for (p, v) in store.iter_mut().zip(params) {
            p.value = v.clone();
        }
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &store)?;
        let (loss, _, _) =
            matcher_loss_graph(&mut tape, &tp, &cfg, &img_s, &img_t, &correspondences)?;
        let value = tape.scalar_value(loss);
        let grads = tape.backward(loss)?;
        let mut out = Vec::with_capacity(names.len());
        for (name, v) in names.iter().zip(params) {
            let var = tp.var(name)?;
            out.push(
                tape.grad(&grads, var)
                    .unwrap_or_else(|| DenseArray::zeros(v.shape().to_vec())),
            );
        }
        Ok((value, out))
    };

    let (_, mut analytic) = run(&values)?;
    // fault-injection hook used by the test suite to prove the check can fail
    if std::env::var("SAM_GRADCHECK_FAULT").is_ok() {
        for v in analytic[0].data_mut() {
            *v += 1.0;
        }
    }
    let mut loss_only = |params: &[DenseArray<f64>]| -> Result<f64> { Ok(run(params)?.0) };
    let (max_err, reports) = grad_check(
        &mut loss_only,
        &values,
        &analytic,
        &names,
        &masks,
        args.eps,
        args.max_coords,
        seed,
    )?;
    println!("group,max_rel_err,coords_checked");
    for r in &reports {
        println!("{},{:.3e},{}", r.name, r.max_rel_err, r.coords_checked);
    }
    let pass = max_err < 1e-4;
    println!(
        "gradcheck {}: max relative error {max_err:.3e} (seed {seed}, {} coords/group)",
        if pass { "PASS" } else { "FAIL" },
        args.max_coords
    );
    if !pass {
        return Err(SamError::NonFinite(format!(
            "gradient check failed: max relative error {max_err:.3e} >= 1e-4"
        )));
    }
    Ok(())
}

fn eval_variant_ma_text(
    model: &SamModel,
    seed: u64,
    image_size: usize,
    n_pairs: usize,
    etas: &[f64],
) -> Result<Vec<f64>> {
    let texture = TextureParams { uniform_patches: 2, ..Default::default() };
    let mut pairs = Vec::new();
    for i in 0..n_pairs {
        // held-out seeds, disjoint from the training stream
        let pair = gen_synthetic_pair(seed.wrapping_add(1_000_000 + i as u64), image_size, &texture)?;
        let queries = QuerySet {
            points: pair.correspondences.iter().map(|c| c.0).collect(),
        };
        if queries.is_empty() {
            continue;
        }
        let records = match_pair(
            &model.store,
            &model.config,
            &pair.img_s,
            &pair.img_t,
            &queries,
            &MatchOptions::default(),
        )?;
        let entries = records
            .iter()
            .zip(&pair.correspondences)
            .map(|(r, &(q, gt))| MatchEval { query: q, pred: r.refined, gt })
            .collect();
        pairs.push(EvalPair {
            pair_id: format!("pair{i}"),
            entries,
            img_s: Some(pair.img_s.clone()),
        });
    }
    let params = TextureMaskParams::default();
    etas.iter()
        .map(|&eta| Ok(matching_accuracy_textured(&pairs, eta, &params)?.0))
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let etas = parse_eta_list(&args.eta)?;
    if args.threads == 0 {
        return Err(SamError::InvalidArgument("--threads must be >= 1".into()));
    }
    let variants = AblationVariant::ALL;
    let run_variant = |variant: AblationVariant| -> Result<Vec<f64>> {
        let base = ModelConfig::toy();
        let cfg = TrainConfig {
            steps: args.steps,
            warmup_steps: (args.steps / 6).max(1),
            seed,
            image_size: args.image_size,
            ..TrainConfig::toy(build_variant(variant, &base))
        };
        let mut model = SamModel::init(cfg.model.clone(), seed)?;
        train_matcher_from(&mut model, &cfg)?;
        if model.config.with_refiner {
            train_refiner_from(&mut model, &cfg)?;
        }
        eval_variant_ma_text(&model, seed, args.image_size, args.pairs, &etas)
    };
    // independent variants, fixed per-variant seeds: results do not depend
    // on the thread count
    let mut results: Vec<Option<Result<Vec<f64>>>> = (0..variants.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let workers = args.threads.min(variants.len());
        let chunks: Vec<Vec<usize>> = (0..workers)
            .map(|w| (0..variants.len()).filter(|i| i % workers == w).collect())
            .collect();
        let mut handles = Vec::new();
        for chunk in chunks {
            let run_variant = &run_variant;
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|i| (i, run_variant(variants[i])))
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut rows = Vec::new();
    for (variant, result) in variants.iter().zip(results) {
        let vals = result.expect("all variants assigned")?;
        let cells: Vec<String> = vals.iter().map(|v| format!("{v:.4}")).collect();
        rows.push(format!("{},{}", variant.name(), cells.join(",")));
    }
    let header = format!(
        "variant,{}",
        etas.iter().map(|e| format!("ma_text@{e}")).collect::<Vec<_>>().join(",")
    );
    let comments = vec![format!(
        "seed={seed} steps={} image_size={} pairs={}",
        args.steps, args.image_size, args.pairs
    )];
    write_csv(&args.out, &comments, &header, &rows)?;
    for r in &rows {
        println!("{r}");
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let texture = TextureParams { uniform_patches: args.patches, ..Default::default() };
    let mut gt_rows = Vec::new();
    let mut h_rows = Vec::new();
    for i in 0..args.count {
        let pair = gen_synthetic_pair(seed.wrapping_add(i as u64), args.size, &texture)?;
        let id = format!("pair{i}");
        save_image(&args.out.join(format!("{id}_s.png")), &pair.img_s)?;
        save_image(&args.out.join(format!("{id}_t.png")), &pair.img_t)?;
        for &((qx, qy), (gx, gy)) in &pair.correspondences {
            gt_rows.push(format!("{id},{qx},{qy},{gx},{gy}"));
        }
        let h = pair.h_gt.0;
        h_rows.push(format!(
            "{id},{}",
            h.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        ));
    }
    let comments = vec![format!("seed={seed} size={} count={}", args.size, args.count)];
    write_csv(&args.out.join("gt.csv"), &comments, GT_HEADER, &gt_rows)?;
    write_csv(&args.out.join("h_gt.csv"), &comments, HOMOGRAPHY_HEADER, &h_rows)?;
    Ok(())
}

fn cmd_latent_map(args: LatentMapArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let img_s = load_image(&args.source)?;
    let img_t = load_image(&args.target)?;
    let map = average_latent_map(&model.store, &model.config, &img_s, &img_t)?;
    save_gray_map(&args.out, &map)?;
    // provenance sidecar (PNG carries no metadata)
    let meta = serde_json::json!({
        "seed": model.seed,
        "config": serde_json::to_value(&model.config)
            .map_err(|e| SamError::Format(e.to_string()))?,
    });
    std::fs::write(
        args.out.with_extension("json"),
        serde_json::to_string_pretty(&meta).map_err(|e| SamError::Format(e.to_string()))?,
    )?;
    Ok(())
}
