//! Siamese feature extraction: coarse 1/4-resolution visual features, fine
//! full-resolution features through an FPN, MLP positional encodings,
//! concatenation and integer-location descriptor sampling.

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SamError};
use crate::graph::TapeParams;
use crate::model::{BackboneKind, ModelConfig, ParamStore};
use crate::tensor::{DenseArray, Scalar};

/// Dense grid of feature vectors; `stride` source pixels per cell.
#[derive(Debug, Clone)]
pub struct FeatureGrid<F> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
    /// `[height, width, channels]`
    pub data: DenseArray<F>,
}

impl<F: Scalar> FeatureGrid<F> {
    pub fn new(stride: usize, data: DenseArray<F>) -> Self {
        let s = data.shape();
        Self {
            height: s[0],
            width: s[1],
            channels: s[2],
            stride,
            data,
        }
    }

    /// Flattened `[h*w, channels]` view of the grid.
    pub fn flat(&self) -> DenseArray<F> {
        self.data
            .clone()
            .reshape(vec![self.height * self.width, self.channels])
            .unwrap()
    }
}

/// Integer query pixel locations `(x, y)` in the source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    pub points: Vec<(usize, usize)>,
}

impl QuerySet {
    pub fn new(points: Vec<(usize, usize)>, width: usize, height: usize) -> Result<Self> {
        for &(x, y) in &points {
            if x >= width || y >= height {
                return Err(SamError::OutOfBounds(format!(
                    "query ({x},{y}) outside {width}x{height} image"
                )));
            }
        }
        Ok(Self { points })
    }

    /// Default protocol: source grid locations with the given stride,
    /// row-major order.
    pub fn grid(width: usize, height: usize, stride: usize) -> Self {
        let mut points = Vec::new();
        let mut y = 0;
        while y < height {
            let mut x = 0;
            while x < width {
                points.push((x, y));
                x += stride;
            }
            y += stride;
        }
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % 4 != 0 || w % 4 != 0 {
        return Err(SamError::ShapeMismatch(format!(
            "image dims {w}x{h} not divisible by 4; pad the image to a multiple of 4 first"
        )));
    }
    Ok(())
}

/// Tape-level backbone forward. Returns the coarse 1/4-resolution map and
/// the two FPN taps (full-resolution stem output, half-resolution stage
/// output).
pub fn backbone_graph<F: Scalar>(
    tape: &mut Tape<F>,
    params: &TapeParams,
    prefix: &str,
    kind: BackboneKind,
    image: Var,
) -> Result<(Var, Var, Var)> {
    let conv = |tape: &mut Tape<F>, name: &str, x: Var, stride: usize| -> Result<Var> {
        let w = params.var(&format!("{prefix}.{name}.w"))?;
        let b = params.var(&format!("{prefix}.{name}.b"))?;
        let pad = if tape.value(w).shape()[0] == 1 { 0 } else { 1 };
        tape.conv2d(x, w, Some(b), stride, pad)
    };
    let out_norm = |tape: &mut Tape<F>, x: Var| -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(x, vec![h * w, c])?;
        let n = tape.layer_norm_rows(flat, crate::attention::LN_EPS)?;
        let gain = params.var(&format!("{prefix}.ln.gain"))?;
        let bias = params.var(&format!("{prefix}.ln.bias"))?;
        let n = tape.mul_row(n, gain)?;
        let n = tape.add_row(n, bias)?;
        tape.reshape(n, vec![h, w, c])
    };
    match kind {
        BackboneKind::Toy => {
            let x0 = conv(tape, "conv0", image, 1)?;
            let x0 = tape.relu(x0)?;
            let x1 = conv(tape, "conv1", x0, 2)?;
            let x1 = tape.relu(x1)?;
            let x2 = conv(tape, "conv2", x1, 2)?;
            let x2 = tape.relu(x2)?;
            let x3 = conv(tape, "conv3", x2, 1)?;
            let x3 = tape.relu(x3)?;
            // no activation after the final block
            let x4 = conv(tape, "conv4", x3, 1)?;
            let x4 = out_norm(tape, x4)?;
            Ok((x4, x0, x1))
        }
        BackboneKind::Paper => {
            let stem = conv(tape, "stem", image, 1)?;
            let stem = tape.relu(stem)?;
            let mut x = stem;
            let mut tap1 = stem;
            let layers: [(&str, usize, usize, usize); 4] = [
                ("l1", 64, 64, 2),
                ("l2", 64, 64, 1),
                ("l3", 64, 128, 2),
                ("l4", 128, 128, 1),
            ];
            for (li, &(lname, cin, cout, stride)) in layers.iter().enumerate() {
                for block in 0..2 {
                    let (bs, bst, bcin) = if block == 0 {
                        (stride, stride, cin)
                    } else {
                        (1, 1, cout)
                    };
                    let a = conv(tape, &format!("{lname}b{block}a"), x, bs)?;
                    let a = tape.relu(a)?;
                    let b = conv(tape, &format!("{lname}b{block}b"), a, 1)?;
                    let skip = if bst != 1 || bcin != cout {
                        conv(tape, &format!("{lname}b{block}s"), x, bst)?
                    } else {
                        x
                    };
                    let y = tape.add(b, skip)?;
                    let last = li == 3 && block == 1;
                    x = if last { y } else { tape.relu(y)? };
                }
                if li == 1 {
                    tap1 = x;
                }
            }
            let x = out_norm(tape, x)?;
            Ok((x, stem, tap1))
        }
    }
}

/// Tape-level FPN: merges the coarse map with the two taps into a
/// full-resolution feature map. With zero lateral weights the output equals
/// the 4x-upsampled coarse projection.
pub fn fpn_graph<F: Scalar>(
    tape: &mut Tape<F>,
    params: &TapeParams,
    prefix: &str,
    coarse: Var,
    tap0: Var,
    tap1: Var,
) -> Result<Var> {
    let lateral = |tape: &mut Tape<F>, name: &str, x: Var| -> Result<Var> {
        let w = params.var(&format!("{prefix}.{name}.w"))?;
        let b = params.var(&format!("{prefix}.{name}.b"))?;
        tape.conv2d(x, w, Some(b), 1, 0)
    };
    let p2 = lateral(tape, "proj2", coarse)?;
    let up = tape.upsample2x(p2)?;
    let l1 = lateral(tape, "lat1", tap1)?;
    let p1 = tape.add(up, l1)?;
    let up = tape.upsample2x(p1)?;
    let l0 = lateral(tape, "lat0", tap0)?;
    tape.add(up, l0)
}

/// Tape-level positional-encoding grid: `MLP([x_norm, y_norm])` at every
/// cell center, coordinates normalized to `[-1, 1]` per axis. Returns a
/// `[h*w, C]` matrix.
pub fn pe_graph<F: Scalar>(
    tape: &mut Tape<F>,
    params: &TapeParams,
    prefix: &str,
    h_cells: usize,
    w_cells: usize,
) -> Result<Var> {
    if h_cells == 0 || w_cells == 0 {
        return Err(SamError::EmptyInput("positional encoding grid".into()));
    }
    let mut coords = Vec::with_capacity(h_cells * w_cells * 2);
    for r in 0..h_cells {
        for c in 0..w_cells {
            let xn = 2.0 * (c as f64 + 0.5) / w_cells as f64 - 1.0;
            let yn = 2.0 * (r as f64 + 0.5) / h_cells as f64 - 1.0;
            coords.push(F::from_f64(xn));
            coords.push(F::from_f64(yn));
        }
    }
    let coords = tape.constant(DenseArray::new(vec![h_cells * w_cells, 2], coords)?)?;
    let w1 = params.var(&format!("{prefix}.w1"))?;
    let b1 = params.var(&format!("{prefix}.b1"))?;
    let w2 = params.var(&format!("{prefix}.w2"))?;
    let b2 = params.var(&format!("{prefix}.b2"))?;
    let hidden = tape.linear(coords, w1, Some(b1))?;
    let hidden = tape.tanh(hidden)?;
    tape.linear(hidden, w2, Some(b2))
}

/// Coarse 1/4-resolution, C-channel visual features of one image.
pub fn extract_coarse_features<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    prefix: &str,
    image: &DenseArray<F>,
) -> Result<FeatureGrid<F>> {
    check_divisible(image.shape()[0], image.shape()[1])?;
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, store)?;
    let img = tape.constant(image.clone())?;
    let (coarse, _, _) = backbone_graph(&mut tape, &params, prefix, config.backbone, img)?;
    Ok(FeatureGrid::new(4, tape.value(coarse).clone()))
}

/// Full-resolution, C-channel fine features (refiner backbone + FPN).
pub fn extract_fine_features<F: Scalar>(
    store: &ParamStore<F>,
    config: &ModelConfig,
    image: &DenseArray<F>,
) -> Result<FeatureGrid<F>> {
    check_divisible(image.shape()[0], image.shape()[1])?;
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, store)?;
    let img = tape.constant(image.clone())?;
    let (coarse, tap0, tap1) =
        backbone_graph(&mut tape, &params, "refiner.backbone", config.backbone, img)?;
    let fine = fpn_graph(&mut tape, &params, "refiner.fpn", coarse, tap0, tap1)?;
    Ok(FeatureGrid::new(1, tape.value(fine).clone()))
}

/// Positional-encoding grid as a stride-4 [`FeatureGrid`].
pub fn positional_encoding<F: Scalar>(
    store: &ParamStore<F>,
    h_cells: usize,
    w_cells: usize,
) -> Result<FeatureGrid<F>> {
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, store)?;
    let pe = pe_graph(&mut tape, &params, "pe", h_cells, w_cells)?;
    let c = tape.value(pe).cols();
    Ok(FeatureGrid::new(
        4,
        tape.value(pe).clone().reshape(vec![h_cells, w_cells, c])?,
    ))
}

/// Channel concatenation: `[0,C)` visual, `[C,2C)` positional. This layout
/// is the contract the structured masks rely on.
pub fn concat_features<F: Scalar>(
    visual: &FeatureGrid<F>,
    pe: &FeatureGrid<F>,
) -> Result<FeatureGrid<F>> {
    if visual.height != pe.height || visual.width != pe.width {
        return Err(SamError::ShapeMismatch(format!(
            "concat {}x{} vs {}x{}",
            visual.width, visual.height, pe.width, pe.height
        )));
    }
    let c = visual.channels + pe.channels;
    let mut data = Vec::with_capacity(visual.height * visual.width * c);
    for r in 0..visual.height {
        for col in 0..visual.width {
            for ch in 0..visual.channels {
                data.push(visual.data.at3(r, col, ch));
            }
            for ch in 0..pe.channels {
                data.push(pe.data.at3(r, col, ch));
            }
        }
    }
    Ok(FeatureGrid::new(
        visual.stride,
        DenseArray::new(vec![visual.height, visual.width, c], data)?,
    ))
}

/// Inverse of [`concat_features`]: split into (visual, positional) halves.
pub fn split_features<F: Scalar>(grid: &FeatureGrid<F>) -> (FeatureGrid<F>, FeatureGrid<F>) {
    let half = grid.channels / 2;
    let mut up = Vec::with_capacity(grid.height * grid.width * half);
    let mut low = Vec::with_capacity(grid.height * grid.width * half);
    for r in 0..grid.height {
        for c in 0..grid.width {
            for ch in 0..half {
                up.push(grid.data.at3(r, c, ch));
            }
            for ch in half..grid.channels {
                low.push(grid.data.at3(r, c, ch));
            }
        }
    }
    (
        FeatureGrid::new(
            grid.stride,
            DenseArray::new(vec![grid.height, grid.width, half], up).unwrap(),
        ),
        FeatureGrid::new(
            grid.stride,
            DenseArray::new(vec![grid.height, grid.width, half], low).unwrap(),
        ),
    )
}

/// Cell index of a pixel query in a stride-4 grid.
pub fn query_cell(grid_w: usize, x: usize, y: usize) -> usize {
    (y / 4) * grid_w + x / 4
}

/// Descriptors at integer query locations: row `i` is
/// `grid[floor(y_i/4), floor(x_i/4), :]`.
pub fn sample_descriptors<F: Scalar>(
    grid: &FeatureGrid<F>,
    queries: &QuerySet,
) -> Result<DenseArray<F>> {
    let mut data = Vec::with_capacity(queries.len() * grid.channels);
    for &(x, y) in &queries.points {
        let (cx, cy) = (x / 4, y / 4);
        if cx >= grid.width || cy >= grid.height {
            return Err(SamError::OutOfBounds(format!(
                "query ({x},{y}) maps outside the {}x{} coarse grid",
                grid.width, grid.height
            )));
        }
        for ch in 0..grid.channels {
            data.push(grid.data.at3(cy, cx, ch));
        }
    }
    DenseArray::new(vec![queries.len(), grid.channels], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SamModel};

    fn toy_model() -> SamModel {
        SamModel::init(ModelConfig::toy(), 7).unwrap()
    }

    fn gray_image<F: Scalar>(h: usize, w: usize, v: f64) -> DenseArray<F> {
        DenseArray::new(vec![h, w, 3], vec![F::from_f64(v); h * w * 3]).unwrap()
    }

    #[test]
    fn coarse_shape_contract() {
        let m = toy_model();
        let g = extract_coarse_features(&m.store, &m.config, "backbone", &gray_image::<f32>(32, 32, 0.5)).unwrap();
        assert_eq!((g.height, g.width, g.channels, g.stride), (8, 8, 16, 4));
        let g = extract_coarse_features(&m.store, &m.config, "backbone", &gray_image::<f32>(64, 48, 0.5)).unwrap();
        assert_eq!((g.height, g.width), (16, 12));
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let m = toy_model();
        let err = extract_coarse_features(&m.store, &m.config, "backbone", &gray_image::<f32>(30, 32, 0.5));
        assert!(err.is_err());
    }

    #[test]
    fn siamese_determinism() {
        let m = toy_model();
        let img = gray_image::<f32>(32, 32, 0.3);
        let a = extract_coarse_features(&m.store, &m.config, "backbone", &img).unwrap();
        let b = extract_coarse_features(&m.store, &m.config, "backbone", &img).unwrap();
        assert_eq!(a.data.data(), b.data.data());
        let fa = extract_fine_features(&m.store, &m.config, &img).unwrap();
        let fb = extract_fine_features(&m.store, &m.config, &img).unwrap();
        assert_eq!(fa.data.data(), fb.data.data());
        assert_eq!((fa.height, fa.width, fa.channels, fa.stride), (32, 32, 16, 1));
    }

    #[test]
    fn paper_backbone_shape_contract() {
        let mut cfg = ModelConfig::paper();
        cfg.self_layers = 0;
        cfg.learned_latents = 1;
        let m = SamModel::init(cfg, 1).unwrap();
        let g = extract_coarse_features(&m.store, &m.config, "backbone", &gray_image::<f32>(16, 16, 0.5)).unwrap();
        assert_eq!((g.height, g.width, g.channels), (4, 4, 128));
        let f = extract_fine_features(&m.store, &m.config, &gray_image::<f32>(16, 16, 0.5)).unwrap();
        assert_eq!((f.height, f.width, f.channels), (16, 16, 128));
    }

    #[test]
    fn fpn_zero_laterals_equals_upsampled_projection() {
        let mut m = toy_model();
        for name in ["refiner.fpn.lat0.w", "refiner.fpn.lat0.b", "refiner.fpn.lat1.w", "refiner.fpn.lat1.b"] {
            let p = m.store.get_mut(name).unwrap();
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let img = {
            let mut img = gray_image::<f32>(16, 16, 0.0);
            for (i, v) in img.data_mut().iter_mut().enumerate() {
                *v = ((i * 37) % 97) as f32 / 97.0;
            }
            img
        };
        let fine = extract_fine_features(&m.store, &m.config, &img).unwrap();
        // direct-construction oracle: project the coarse map and upsample 4x
        let coarse =
            extract_coarse_features(&m.store, &m.config, "refiner.backbone", &img).unwrap();
        let pw = m.store.get("refiner.fpn.proj2.w").unwrap().value.clone();
        let pb = m.store.get("refiner.fpn.proj2.b").unwrap().value.clone();
        let projected = crate::kernels::conv2d(&coarse.data, &pw, Some(&pb), 1, 0).unwrap();
        let up = crate::kernels::upsample2x(&crate::kernels::upsample2x(&projected));
        for (a, b) in fine.data.data().iter().zip(up.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pe_single_cell_and_zero_weights() {
        let m = toy_model();
        let a = positional_encoding(&m.store, 1, 1).unwrap();
        let b = positional_encoding(&m.store, 1, 1).unwrap();
        assert_eq!(a.data.data(), b.data.data());

        let mut m2 = toy_model();
        for name in ["pe.w1", "pe.w2", "pe.b1"] {
            let p = m2.store.get_mut(name).unwrap();
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        {
            let p = m2.store.get_mut("pe.b2").unwrap();
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v = i as f32 * 0.5;
            }
        }
        let g = positional_encoding(&m2.store, 3, 3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                for ch in 0..g.channels {
                    assert_eq!(g.data.at3(r, c, ch), ch as f32 * 0.5);
                }
            }
        }
    }

    #[test]
    fn pe_matches_f64_mlp_oracle() {
        let m = toy_model();
        let store64 = m.store.to_f64();
        let g = positional_encoding(&store64, 4, 4).unwrap();
        let w1 = &m.store.get("pe.w1").unwrap().value;
        let b1 = &m.store.get("pe.b1").unwrap().value;
        let w2 = &m.store.get("pe.w2").unwrap().value;
        let b2 = &m.store.get("pe.b2").unwrap().value;
        for r in 0..4 {
            for c in 0..4 {
                let xn = 2.0 * (c as f64 + 0.5) / 4.0 - 1.0;
                let yn = 2.0 * (r as f64 + 0.5) / 4.0 - 1.0;
                let mut hidden = [0.0f64; 64];
                for (i, h) in hidden.iter_mut().enumerate() {
                    *h = (w1.at2(i, 0) as f64 * xn + w1.at2(i, 1) as f64 * yn
                        + b1.data()[i] as f64)
                        .tanh();
                }
                for ch in 0..g.channels {
                    let mut acc = b2.data()[ch] as f64;
                    for (i, h) in hidden.iter().enumerate() {
                        acc += w2.at2(ch, i) as f64 * h;
                    }
                    assert!((g.data.at3(r, c, ch) - acc).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn concat_layout_and_roundtrip() {
        let vis = FeatureGrid::new(4, DenseArray::new(vec![2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap());
        let pe = FeatureGrid::new(4, DenseArray::new(vec![2, 2, 2], (8..16).map(|v| v as f32).collect()).unwrap());
        let h = concat_features(&vis, &pe).unwrap();
        assert_eq!(h.channels, 4);
        assert_eq!(h.data.at3(0, 0, 0), 0.0);
        assert_eq!(h.data.at3(0, 0, 2), 8.0);
        let (v2, p2) = split_features(&h);
        assert_eq!(v2.data.data(), vis.data.data());
        assert_eq!(p2.data.data(), pe.data.data());

        // zero visual half -> lower half equals PE, upper half zero
        let zeros = FeatureGrid::new(4, DenseArray::zeros(vec![2, 2, 2]));
        let h = concat_features(&zeros, &pe).unwrap();
        assert_eq!(h.data.at3(1, 1, 0), 0.0);
        assert_eq!(h.data.at3(1, 1, 3), pe.data.at3(1, 1, 1));
        let h = concat_features(&vis, &zeros).unwrap();
        assert_eq!(h.data.at3(1, 1, 1), vis.data.at3(1, 1, 1));
        assert_eq!(h.data.at3(1, 1, 3), 0.0);

        // dim mismatch
        let small = FeatureGrid::new(4, DenseArray::zeros(vec![1, 2, 2]));
        assert!(concat_features(&vis, &small).is_err());
    }

    #[test]
    fn descriptor_sampling_floors_by_stride() {
        let grid = FeatureGrid::new(
            4,
            DenseArray::new(vec![2, 3, 2], (0..12).map(|v| v as f32).collect()).unwrap(),
        );
        let q = QuerySet::new(vec![(0, 0), (3, 3), (8, 4)], 12, 8).unwrap();
        let d = sample_descriptors(&grid, &q).unwrap();
        // (0,0) and (3,3) hit cell (0,0)
        assert_eq!(d.row(0), d.row(1));
        assert_eq!(d.row(0), &[0.0, 1.0]);
        // (8,4) hits cell (row 1, col 2)
        assert_eq!(d.row(2), &[grid.data.at3(1, 2, 0), grid.data.at3(1, 2, 1)]);

        let oob = QuerySet { points: vec![(100, 0)] };
        assert!(sample_descriptors(&grid, &oob).is_err());
    }
}
