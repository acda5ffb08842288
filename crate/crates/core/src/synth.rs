//! Synthetic homography training pairs: band-limited noise textures warped
//! by a random perspective transform, with exact grid correspondences.

use crate::error::{Result, SamError};
use crate::homography::{dlt_homography, Homography};
use crate::tensor::DenseArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fill value for target pixels that fall outside the source frame.
pub const FILL_GRAY: f32 = 0.5;

#[derive(Debug, Clone)]
pub struct TextureParams {
    /// Box-blur passes applied to the raw noise (band limiting).
    pub smooth_passes: usize,
    /// Number of uniform low-contrast rectangles stamped onto the texture.
    pub uniform_patches: usize,
    /// Patch side as a fraction of the image size.
    pub patch_frac: f64,
    /// Corner jitter of the random homography as a fraction of the image
    /// size; capped at 0.15.
    pub jitter_frac: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self { smooth_passes: 2, uniform_patches: 0, patch_frac: 0.25, jitter_frac: 0.15 }
    }
}

/// A training pair with exact ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    /// `[size, size, 3]`, values in `[0, 1]`.
    pub img_s: DenseArray<f32>,
    pub img_t: DenseArray<f32>,
    pub h_gt: Homography,
    /// Stride-8 grid queries with their exact correspondents; covisible
    /// points only.
    pub correspondences: Vec<((usize, usize), (f64, f64))>,
}

fn box_blur(img: &mut DenseArray<f32>, size: usize) {
    let src = img.clone();
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < size && (ny as usize) < size {
                            acc += src.at3(ny as usize, nx as usize, ch);
                            n += 1.0;
                        }
                    }
                }
                img.data_mut()[(y * size + x) * 3 + ch] = acc / n;
            }
        }
    }
}

fn noise_texture(rng: &mut ChaCha8Rng, size: usize, params: &TextureParams) -> DenseArray<f32> {
    let mut img = DenseArray::new(
        vec![size, size, 3],
        (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    for _ in 0..params.smooth_passes {
        box_blur(&mut img, size);
    }
    let patch = ((size as f64 * params.patch_frac) as usize).max(2);
    for _ in 0..params.uniform_patches {
        let x0 = rng.gen_range(0..size.saturating_sub(patch).max(1));
        let y0 = rng.gen_range(0..size.saturating_sub(patch).max(1));
        let color: [f32; 3] = [rng.gen_range(0.2..0.8); 3];
        for y in y0..(y0 + patch).min(size) {
            for x in x0..(x0 + patch).min(size) {
                for ch in 0..3 {
                    img.data_mut()[(y * size + x) * 3 + ch] = color[ch];
                }
            }
        }
    }
    img
}

fn bilinear(img: &DenseArray<f32>, x: f64, y: f64, ch: usize) -> Option<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let v00 = img.at3(y0, x0, ch) as f64;
    let v01 = img.at3(y0, x1, ch) as f64;
    let v10 = img.at3(y1, x0, ch) as f64;
    let v11 = img.at3(y1, x1, ch) as f64;
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    Some((top * (1.0 - fy) + bot * fy) as f32)
}

/// Warps a source texture by an explicit homography and collects the
/// stride-8 covisible grid correspondences.
pub fn synthesize_with_homography(
    img_s: DenseArray<f32>,
    h_gt: Homography,
) -> Result<SyntheticPair> {
    let size = img_s.shape()[0];
    if img_s.shape()[1] != size {
        return Err(SamError::ShapeMismatch("square images only".into()));
    }
    let inv = h_gt.inverse()?;
    let mut img_t = DenseArray::zeros(vec![size, size, 3]);
    for y in 0..size {
        for x in 0..size {
            let src = inv.apply(x as f64, y as f64);
            for ch in 0..3 {
                let v = src
                    .and_then(|(sx, sy)| bilinear(&img_s, sx, sy, ch))
                    .unwrap_or(FILL_GRAY);
                img_t.data_mut()[(y * size + x) * 3 + ch] = v;
            }
        }
    }
    let mut correspondences = Vec::new();
    let mut y = 0;
    while y < size {
        let mut x = 0;
        while x < size {
            if let Some((tx, ty)) = h_gt.apply(x as f64, y as f64) {
                if tx >= 0.0 && ty >= 0.0 && tx < size as f64 && ty < size as f64 {
                    correspondences.push(((x, y), (tx, ty)));
                }
            }
            x += 8;
        }
        y += 8;
    }
    Ok(SyntheticPair { img_s, img_t, h_gt, correspondences })
}

/// Random perspective jitter: each corner moves uniformly within
/// ±`jitter_frac` (at most 15%) of the image size. Degenerate draws are
/// resampled.
pub fn random_homography(
    rng: &mut ChaCha8Rng,
    size: usize,
    jitter_frac: f64,
) -> Result<Homography> {
    if !(0.0..=0.15).contains(&jitter_frac) {
        return Err(SamError::InvalidArgument(format!(
            "jitter fraction {jitter_frac} outside [0, 0.15]"
        )));
    }
    let s = size as f64;
    let jitter = (jitter_frac * s).max(1e-9);
    let corners = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)];
    for _ in 0..64 {
        let pairs: Vec<_> = corners
            .iter()
            .map(|&(x, y)| {
                (
                    (x, y),
                    (
                        x + rng.gen_range(-jitter..jitter),
                        y + rng.gen_range(-jitter..jitter),
                    ),
                )
            })
            .collect();
        match dlt_homography(&pairs) {
            Ok(h) => {
                if h.inverse().is_ok() {
                    return Ok(h);
                }
            }
            Err(_) => continue,
        }
    }
    Err(SamError::Degenerate("could not sample an invertible homography".into()))
}

/// Seeded synthetic pair: texture + random homography + warp.
pub fn gen_synthetic_pair(
    seed: u64,
    size: usize,
    params: &TextureParams,
) -> Result<SyntheticPair> {
    if size % 4 != 0 {
        return Err(SamError::InvalidArgument(format!(
            "size {size} not divisible by 4"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img_s = noise_texture(&mut rng, size, params);
    let h = random_homography(&mut rng, size, params.jitter_frac)?;
    synthesize_with_homography(img_s, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_homography_reproduces_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = noise_texture(&mut rng, 32, &TextureParams::default());
        let pair = synthesize_with_homography(img.clone(), Homography::identity()).unwrap();
        assert_eq!(pair.img_t.data(), img.data());
        assert_eq!(pair.correspondences.len(), 16);
        for &((x, y), (tx, ty)) in &pair.correspondences {
            assert_eq!((tx, ty), (x as f64, y as f64));
        }
    }

    #[test]
    fn translation_shifts_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = noise_texture(&mut rng, 32, &TextureParams::default());
        let pair =
            synthesize_with_homography(img.clone(), Homography::translation(8.0, 0.0)).unwrap();
        for &((x, y), (tx, ty)) in &pair.correspondences {
            assert_eq!((tx, ty), (x as f64 + 8.0, y as f64));
        }
        // x = 24 maps to 32 (outside): covisible grid loses one column
        assert_eq!(pair.correspondences.len(), 12);
        // warped content shifted right; leftmost strip filled mid-gray
        for y in 0..32 {
            for ch in 0..3 {
                assert_eq!(pair.img_t.at3(y, 0, ch), FILL_GRAY);
                assert_eq!(pair.img_t.at3(y, 20, ch), img.at3(y, 12, ch));
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = gen_synthetic_pair(9, 32, &TextureParams::default()).unwrap();
        let b = gen_synthetic_pair(9, 32, &TextureParams::default()).unwrap();
        assert_eq!(a.img_s.data(), b.img_s.data());
        assert_eq!(a.img_t.data(), b.img_t.data());
        assert_eq!(a.h_gt, b.h_gt);
        assert_eq!(a.correspondences, b.correspondences);
        let c = gen_synthetic_pair(10, 32, &TextureParams::default()).unwrap();
        assert_ne!(a.img_s.data(), c.img_s.data());
    }

    #[test]
    fn correspondences_reproject_exactly() {
        let pair = gen_synthetic_pair(3, 64, &TextureParams::default()).unwrap();
        assert!(!pair.correspondences.is_empty());
        for &((x, y), (tx, ty)) in &pair.correspondences {
            let (px, py) = pair.h_gt.apply(x as f64, y as f64).unwrap();
            assert_eq!((px, py), (tx, ty));
            assert!(tx >= 0.0 && ty >= 0.0 && tx < 64.0 && ty < 64.0);
        }
    }

    #[test]
    fn uniform_patches_lower_local_contrast() {
        let pair = gen_synthetic_pair(
            4,
            64,
            &TextureParams { smooth_passes: 1, uniform_patches: 3, ..TextureParams::default() },
        )
        .unwrap();
        // at least one all-constant 4x4 block exists
        let mut found = false;
        'outer: for y in 0..60 {
            for x in 0..60 {
                let v = pair.img_s.at3(y, x, 0);
                if (0..4).all(|dy| (0..4).all(|dx| pair.img_s.at3(y + dy, x + dx, 0) == v)) {
                    found = true;
                    break 'outer;
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn non_divisible_size_rejected() {
        assert!(gen_synthetic_pair(1, 30, &TextureParams::default()).is_err());
    }
}
