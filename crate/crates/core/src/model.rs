//! Model configuration, named parameter store and seeded initialization.
//!
//! Structured weight matrices carry a zero-block mask (lower output half
//! reads only the positional input half); masks are enforced at init time
//! and re-applied after every optimizer update.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SamError};
use crate::tensor::{DenseArray, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Four conv blocks, two stride-2 stages. Minutes-scale on CPU.
    Toy,
    /// ResNet-18-style backbone, stride 2 in the first and third layer,
    /// final activation removed.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeMode {
    /// Positional encodings added to the visual features (model dim = C).
    Add,
    /// Positional encodings concatenated (model dim = 2C; channels [0,C)
    /// visual, [C,2C) positional).
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Visual feature channels C (coarse and fine grids).
    pub visual_channels: usize,
    pub heads: usize,
    /// Number of learned latent vectors M.
    pub learned_latents: usize,
    /// Number of self-attention layers S.
    pub self_layers: usize,
    pub pe_mode: PeMode,
    pub use_attention: bool,
    pub use_latents_output_ca: bool,
    pub structured: bool,
    pub with_refiner: bool,
}

impl ModelConfig {
    /// Desk-scale profile: D=32, H=4, M=8, S=2.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneKind::Toy,
            visual_channels: 16,
            heads: 4,
            learned_latents: 8,
            self_layers: 2,
            pe_mode: PeMode::Concat,
            use_attention: true,
            use_latents_output_ca: true,
            structured: true,
            with_refiner: true,
        }
    }

    /// Full-size profile: D=256, H=8, M=128, S=16.
    pub fn paper() -> Self {
        Self {
            backbone: BackboneKind::Paper,
            visual_channels: 128,
            heads: 8,
            learned_latents: 128,
            self_layers: 16,
            pe_mode: PeMode::Concat,
            use_attention: true,
            use_latents_output_ca: true,
            structured: true,
            with_refiner: true,
        }
    }

    /// Model dimension D seen by the attention stack.
    pub fn d_model(&self) -> usize {
        match self.pe_mode {
            PeMode::Add => self.visual_channels,
            PeMode::Concat => 2 * self.visual_channels,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if d % 2 != 0 {
            return Err(SamError::InvalidArgument("D must be even".into()));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(SamError::InvalidArgument(format!(
                "head count {} must divide D={d}",
                self.heads
            )));
        }
        if self.structured {
            if self.pe_mode != PeMode::Concat {
                return Err(SamError::InvalidArgument(
                    "structured attention requires concatenated PE".into(),
                ));
            }
            if self.head_dim() % 2 != 0 {
                return Err(SamError::InvalidArgument("D_H must be even".into()));
            }
        }
        if self.use_latents_output_ca && !self.use_attention {
            return Err(SamError::InvalidArgument(
                "latents/output CA require the attention stage".into(),
            ));
        }
        Ok(())
    }
}

/// One named parameter with an optional enforced-zero mask
/// (`true` entries are held at exactly 0).
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: DenseArray<F>,
    pub mask: Option<Vec<bool>>,
}

/// Ordered, name-indexed parameter container.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: DenseArray<F>, mask: Option<Vec<bool>>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(SamError::InvalidArgument(format!("duplicate param {name}")));
        }
        if let Some(m) = &mask {
            if m.len() != value.len() {
                return Err(SamError::ShapeMismatch(format!("mask size for {name}")));
            }
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            mask,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| SamError::InvalidArgument(format!("unknown param {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(SamError::InvalidArgument(format!("unknown param {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Zero every masked entry, bit-exactly.
    pub fn apply_masks(&mut self) {
        for p in &mut self.params {
            if let Some(mask) = &p.mask {
                for (v, &m) in p.value.data_mut().iter_mut().zip(mask) {
                    if m {
                        *v = F::zero();
                    }
                }
            }
        }
    }

    /// True iff every masked entry is exactly zero.
    pub fn masks_hold(&self) -> bool {
        self.params.iter().all(|p| match &p.mask {
            None => true,
            Some(mask) => p
                .value
                .data()
                .iter()
                .zip(mask)
                .all(|(&v, &m)| !m || v == F::zero()),
        })
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(&p.name, p.value.to_f64(), p.mask.clone()).unwrap();
        }
        out
    }

    pub fn to_f32(&self) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(&p.name, p.value.to_f32(), p.mask.clone()).unwrap();
        }
        out
    }
}

/// Mask for a structured matrix in `[out,in]` layout: rows `[out/2, out)`
/// may only read columns `[in/2, in)`.
pub fn structured_matrix_mask(out_dim: usize, in_dim: usize) -> Vec<bool> {
    let mut mask = vec![false; out_dim * in_dim];
    for r in out_dim / 2..out_dim {
        for c in 0..in_dim / 2 {
            mask[r * in_dim + c] = true;
        }
    }
    mask
}

/// Mask for a structured bias: lower half held at zero.
pub fn structured_bias_mask(out_dim: usize) -> Vec<bool> {
    (0..out_dim).map(|i| i >= out_dim / 2).collect()
}

/// Backbone channel plan plus FPN tap channels, shared by init and forward.
pub struct BackbonePlan {
    /// (name suffix, kh, cin, cout, stride) for each conv in order.
    pub convs: Vec<(&'static str, usize, usize, usize, usize)>,
    /// Indices into `convs` after which the FPN taps full-res / half-res maps.
    pub tap0_channels: usize,
    pub tap1_channels: usize,
}

pub fn backbone_plan(kind: BackboneKind, out_channels: usize) -> BackbonePlan {
    match kind {
        BackboneKind::Toy => BackbonePlan {
            convs: vec![
                ("conv0", 3, 3, 8, 1),
                ("conv1", 3, 8, 12, 2),
                ("conv2", 3, 12, out_channels, 2),
                ("conv3", 3, out_channels, out_channels, 1),
                ("conv4", 3, out_channels, out_channels, 1),
            ],
            tap0_channels: 8,
            tap1_channels: 12,
        },
        // Flattened ResNet-18-style plan: stem + 4 layers of 2 basic blocks.
        // Skip connections are added by the forward pass; `convs` lists every
        // weight-bearing conv including 1x1 projection shortcuts.
        BackboneKind::Paper => {
            let mut convs: Vec<(&'static str, usize, usize, usize, usize)> =
                vec![("stem", 3, 3, 64, 1)];
            let layer_defs: [(&'static str, usize, usize, usize); 4] = [
                ("l1", 64, 64, 2),
                ("l2", 64, 64, 1),
                ("l3", 64, out_channels, 2),
                ("l4", out_channels, out_channels, 1),
            ];
            let names: [[&'static str; 5]; 4] = [
                ["l1b0a", "l1b0b", "l1b0s", "l1b1a", "l1b1b"],
                ["l2b0a", "l2b0b", "l2b0s", "l2b1a", "l2b1b"],
                ["l3b0a", "l3b0b", "l3b0s", "l3b1a", "l3b1b"],
                ["l4b0a", "l4b0b", "l4b0s", "l4b1a", "l4b1b"],
            ];
            for (li, &(_, cin, cout, stride)) in layer_defs.iter().enumerate() {
                let n = names[li];
                convs.push((n[0], 3, cin, cout, stride));
                convs.push((n[1], 3, cout, cout, 1));
                if stride != 1 || cin != cout {
                    convs.push((n[2], 1, cin, cout, stride));
                }
                convs.push((n[3], 3, cout, cout, 1));
                convs.push((n[4], 3, cout, cout, 1));
            }
            BackbonePlan {
                convs,
                tap0_channels: 64,
                tap1_channels: 64,
            }
        }
    }
}

/// Names of the parameters of one attention block; order fixed.
pub struct BlockNames {
    pub prefix: String,
}

impl BlockNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            prefix: prefix.to_string(),
        }
    }
    pub fn wq(&self, h: usize) -> String {
        format!("{}.h{h}.wq", self.prefix)
    }
    pub fn wk(&self, h: usize) -> String {
        format!("{}.h{h}.wk", self.prefix)
    }
    pub fn wv(&self, h: usize) -> String {
        format!("{}.h{h}.wv", self.prefix)
    }
    pub fn wo(&self, h: usize) -> String {
        format!("{}.h{h}.wo", self.prefix)
    }
    pub fn bo(&self) -> String {
        format!("{}.bo", self.prefix)
    }
    pub fn mlp_w(&self, layer: usize) -> String {
        format!("{}.mlp.w{layer}", self.prefix)
    }
    pub fn mlp_b(&self, layer: usize) -> String {
        format!("{}.mlp.b{layer}", self.prefix)
    }
    pub fn ln_gain(&self, ln: usize, half: &str) -> String {
        format!("{}.ln{ln}.{half}.gain", self.prefix)
    }
    pub fn ln_bias(&self, ln: usize, half: &str) -> String {
        format!("{}.ln{ln}.{half}.bias", self.prefix)
    }
}

/// The matcher model: config plus f32 parameters.
#[derive(Debug, Clone)]
pub struct SamModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore<f32>,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> DenseArray<f32> {
    let bound = (1.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    DenseArray::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

fn add_linear(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    structured: bool,
) -> Result<()> {
    let value = uniform_init(rng, vec![out_dim, in_dim], in_dim);
    let mask = structured.then(|| structured_matrix_mask(out_dim, in_dim));
    store.add(name, value, mask)
}

fn add_bias(
    store: &mut ParamStore<f32>,
    name: &str,
    dim: usize,
    structured: bool,
) -> Result<()> {
    let mask = structured.then(|| structured_bias_mask(dim));
    store.add(name, DenseArray::zeros(vec![dim]), mask)
}

fn add_block(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    heads: usize,
    structured: bool,
    with_mlp: bool,
) -> Result<()> {
    let names = BlockNames::new(prefix);
    let dh = d / heads;
    for h in 0..heads {
        add_linear(store, rng, &names.wq(h), dh, d, false)?;
        add_linear(store, rng, &names.wk(h), dh, d, false)?;
        add_linear(store, rng, &names.wv(h), dh, d, structured)?;
        add_linear(store, rng, &names.wo(h), d, dh, structured)?;
    }
    add_bias(store, &names.bo(), d, structured)?;
    let ln_count = if with_mlp { 2 } else { 1 };
    for ln in 1..=ln_count {
        if structured {
            // per-half normalization; the lower-half bias is held at zero so
            // no constant can leak into the positional path
            let half = d / 2;
            store.add(&names.ln_gain(ln, "up"), ones(half), None)?;
            store.add(&names.ln_bias(ln, "up"), DenseArray::zeros(vec![half]), None)?;
            store.add(&names.ln_gain(ln, "low"), ones(half), None)?;
            store.add(
                &names.ln_bias(ln, "low"),
                DenseArray::zeros(vec![half]),
                Some(vec![true; half]),
            )?;
        } else {
            store.add(&names.ln_gain(ln, "full"), ones(d), None)?;
            store.add(&names.ln_bias(ln, "full"), DenseArray::zeros(vec![d]), None)?;
        }
    }
    if with_mlp {
        add_linear(store, rng, &names.mlp_w(1), d, d, structured)?;
        add_bias(store, &names.mlp_b(1), d, structured)?;
        add_linear(store, rng, &names.mlp_w(2), d, d, structured)?;
        add_bias(store, &names.mlp_b(2), d, structured)?;
    }
    Ok(())
}

fn ones(n: usize) -> DenseArray<f32> {
    DenseArray::from_vec(vec![1.0; n])
}

fn add_backbone(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    kind: BackboneKind,
    out_channels: usize,
) -> Result<()> {
    let plan = backbone_plan(kind, out_channels);
    for &(name, k, cin, cout, _) in &plan.convs {
        let w = uniform_init(rng, vec![k, k, cin, cout], k * k * cin);
        store.add(&format!("{prefix}.{name}.w"), w, None)?;
        store.add(&format!("{prefix}.{name}.b"), DenseArray::zeros(vec![cout]), None)?;
    }
    // channel normalization of the coarse output, the siamese stand-in for
    // the reference backbone's batch norms
    store.add(&format!("{prefix}.ln.gain"), ones(out_channels), None)?;
    store.add(&format!("{prefix}.ln.bias"), DenseArray::zeros(vec![out_channels]), None)?;
    Ok(())
}

fn add_fpn(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    kind: BackboneKind,
    out_channels: usize,
) -> Result<()> {
    let plan = backbone_plan(kind, out_channels);
    for (name, cin) in [
        ("proj2", out_channels),
        ("lat1", plan.tap1_channels),
        ("lat0", plan.tap0_channels),
    ] {
        let w = uniform_init(rng, vec![1, 1, cin, out_channels], cin);
        store.add(&format!("{prefix}.{name}.w"), w, None)?;
        store.add(
            &format!("{prefix}.{name}.b"),
            DenseArray::zeros(vec![out_channels]),
            None,
        )?;
    }
    Ok(())
}

fn add_pe_mlp(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    out_channels: usize,
) -> Result<()> {
    add_linear(store, rng, &format!("{prefix}.w1"), 64, 2, false)?;
    store.add(&format!("{prefix}.b1"), DenseArray::zeros(vec![64]), None)?;
    add_linear(store, rng, &format!("{prefix}.w2"), out_channels, 64, false)?;
    store.add(
        &format!("{prefix}.b2"),
        DenseArray::zeros(vec![out_channels]),
        None,
    )?;
    Ok(())
}

impl SamModel {
    /// Deterministic seeded initialization; masked entries start at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.visual_channels;
        let d = config.d_model();

        add_backbone(&mut store, &mut rng, "backbone", config.backbone, c)?;
        add_pe_mlp(&mut store, &mut rng, "pe", c)?;

        if config.use_attention {
            add_block(
                &mut store,
                &mut rng,
                "input_ca",
                d,
                config.heads,
                config.structured,
                true,
            )?;
            for s in 0..config.self_layers {
                add_block(
                    &mut store,
                    &mut rng,
                    &format!("self{s}"),
                    d,
                    config.heads,
                    config.structured,
                    true,
                )?;
            }
        }
        if config.use_latents_output_ca {
            if config.learned_latents > 0 {
                let latents = uniform_init(&mut rng, vec![config.learned_latents, d], d);
                store.add("latents", latents, None)?;
            }
            add_block(
                &mut store,
                &mut rng,
                "output_ca",
                d,
                config.heads,
                config.structured,
                false,
            )?;
        }
        if config.with_refiner {
            add_backbone(&mut store, &mut rng, "refiner.backbone", config.backbone, c)?;
            add_fpn(&mut store, &mut rng, "refiner.fpn", config.backbone, c)?;
        }
        store.apply_masks();
        Ok(Self {
            config,
            seed,
            store,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structured_mask_zero_block_layout() {
        let mask = structured_matrix_mask(4, 6);
        // rows 2..4 x cols 0..3 are the enforced-zero block
        for r in 0..4 {
            for c in 0..6 {
                let expect = r >= 2 && c < 3;
                assert_eq!(mask[r * 6 + c], expect, "({r},{c})");
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_masked() {
        let a = SamModel::init(ModelConfig::toy(), 42).unwrap();
        let b = SamModel::init(ModelConfig::toy(), 42).unwrap();
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data());
        }
        assert!(a.store.masks_hold());
        let c = SamModel::init(ModelConfig::toy(), 43).unwrap();
        let differs = a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|(x, y)| x.value.data() != y.value.data());
        assert!(differs);
    }

    #[test]
    fn paper_config_validates() {
        assert!(ModelConfig::paper().validate().is_ok());
    }

    #[test]
    fn structured_requires_concat() {
        let mut cfg = ModelConfig::toy();
        cfg.pe_mode = PeMode::Add;
        assert!(cfg.validate().is_err());
    }
}
