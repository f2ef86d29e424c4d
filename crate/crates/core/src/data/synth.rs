//! Synthetic two-modality scenes for desk-scale runs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{derive_rng, AlignedImagePair, GrayImage};
use crate::error::{Error, Result};
use crate::layers::PATCH_SIZE;

/// Maps modality A onto modality B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityTransform {
    /// `1 − a`.
    Invert,
    /// Sobel gradient magnitude, scaled to a maximum of 1.
    Edge,
    /// Gaussian blur (σ = 2) followed by gamma 0.5.
    BlurGamma,
}

impl fmt::Display for ModalityTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModalityTransform::Invert => "invert",
            ModalityTransform::Edge => "edge",
            ModalityTransform::BlurGamma => "blur+gamma",
        })
    }
}

impl FromStr for ModalityTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "invert" => Ok(ModalityTransform::Invert),
            "edge" => Ok(ModalityTransform::Edge),
            "blur+gamma" | "blur_gamma" | "blurgamma" => Ok(ModalityTransform::BlurGamma),
            _ => Err(Error::config(
                None,
                format!("unknown modality transform `{s}` (expected invert, edge or blur+gamma)"),
            )),
        }
    }
}

/// Standard deviation of the independent noise added to modality B.
pub const NOISE_STD: f64 = 0.05;
const BLUR_SIGMA: f64 = 2.0;
const GAMMA: f64 = 0.5;

const STREAM_TEXTURE: u32 = 10;
const STREAM_NOISE: u32 = 11;

/// `n_images` scenes of `size × size` pixels.
///
/// Modality A is a procedural texture: a random linear gradient plus Gaussian
/// blobs at mixed scales, rescaled to `[0, 1]`. Modality B is `transform(A)`
/// plus independent Gaussian noise, clamped to `[0, 1]`.
pub fn synth_dataset(
    n_images: usize,
    size: usize,
    transform: ModalityTransform,
    seed: u64,
) -> Result<Vec<AlignedImagePair>> {
    if size < PATCH_SIZE {
        return Err(Error::config(
            None,
            format!("synthetic images need at least {PATCH_SIZE} pixels per side, got {size}"),
        ));
    }
    (0..n_images)
        .map(|i| {
            let a = texture(size, &mut derive_rng(seed, STREAM_TEXTURE, i as u32));
            let mut b = apply_transform(&a, transform);
            let noise = Normal::new(0.0, NOISE_STD).expect("valid noise");
            let mut rng = derive_rng(seed, STREAM_NOISE, i as u32);
            for v in &mut b.data {
                *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
            AlignedImagePair::new(format!("synth{i:04}"), a, b)
        })
        .collect()
}

fn texture<R: Rng>(size: usize, rng: &mut R) -> GrayImage {
    let mut img = vec![0.0f64; size * size];
    let (gx, gy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    for y in 0..size {
        for x in 0..size {
            img[y * size + x] = 0.5 * (gx * x as f64 + gy * y as f64) / size as f64;
        }
    }
    // One blob per 16×16 area on average.
    let n_blobs = (size * size) / 256;
    for _ in 0..n_blobs {
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let sigma: f64 = rng.gen_range(2.0..10.0);
        let amp: f64 = rng.gen_range(-1.0..1.0);
        let r = (3.0 * sigma).ceil() as i64;
        let inv = 1.0 / (2.0 * sigma * sigma);
        let (x0, x1) = ((cx as i64 - r).max(0), (cx as i64 + r).min(size as i64 - 1));
        let (y0, y1) = ((cy as i64 - r).max(0), (cy as i64 + r).min(size as i64 - 1));
        for y in y0..=y1 {
            let dy = y as f64 - cy;
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                img[y as usize * size + x as usize] += amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    GrayImage {
        width: size,
        height: size,
        data: img.iter().map(|&v| ((v - lo) / span) as f32).collect(),
    }
}

/// Noise-free modality-B rendering of `a`.
pub fn apply_transform(a: &GrayImage, t: ModalityTransform) -> GrayImage {
    let data = match t {
        ModalityTransform::Invert => a.data.iter().map(|&v| 1.0 - v).collect(),
        ModalityTransform::Edge => {
            let mut mag = Vec::with_capacity(a.data.len());
            let p = |x: i64, y: i64| a.at_reflect(x, y) as f64;
            for y in 0..a.height as i64 {
                for x in 0..a.width as i64 {
                    let gx = (p(x + 1, y - 1) + 2.0 * p(x + 1, y) + p(x + 1, y + 1))
                        - (p(x - 1, y - 1) + 2.0 * p(x - 1, y) + p(x - 1, y + 1));
                    let gy = (p(x - 1, y + 1) + 2.0 * p(x, y + 1) + p(x + 1, y + 1))
                        - (p(x - 1, y - 1) + 2.0 * p(x, y - 1) + p(x + 1, y - 1));
                    mag.push((gx * gx + gy * gy).sqrt());
                }
            }
            let hi = mag.iter().copied().fold(0.0, f64::max);
            let scale = if hi > 0.0 { 1.0 / hi } else { 0.0 };
            mag.iter().map(|&m| (m * scale) as f32).collect()
        }
        ModalityTransform::BlurGamma => blur(a, BLUR_SIGMA)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0).powf(GAMMA) as f32)
            .collect(),
    };
    GrayImage {
        width: a.width,
        height: a.height,
        data,
    }
}

/// Separable Gaussian blur with reflected borders.
fn blur(a: &GrayImage, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let (w, h) = (a.width as i64, a.height as i64);
    let mut tmp = vec![0.0; a.data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = (-r..=r)
                .map(|i| k[(i + r) as usize] * a.at_reflect(x + i, y) as f64)
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; a.data.len()];
    for y in 0..h {
        for x in 0..w {
            out[(y * w + x) as usize] = (-r..=r)
                .map(|i| {
                    let yy = super::reflect(y + i, a.height) as i64;
                    k[(i + r) as usize] * tmp[(yy * w + x) as usize]
                })
                .sum::<f64>()
                / norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_sums_to_one_before_noise() {
        let imgs = synth_dataset(2, 64, ModalityTransform::Invert, 3).unwrap();
        let b = apply_transform(&imgs[0].a, ModalityTransform::Invert);
        assert!(imgs[0]
            .a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| (x + y - 1.0).abs() < 1e-6));
        // With noise, B still tracks 1 − A closely.
        let mse: f64 = imgs[0]
            .a
            .data
            .iter()
            .zip(&imgs[0].b.data)
            .map(|(x, y)| ((x + y - 1.0) as f64).powi(2))
            .sum::<f64>()
            / 4096.0;
        assert!(mse < 0.0035, "{mse}");
    }

    #[test]
    fn values_in_unit_range_and_seeded() {
        for t in [
            ModalityTransform::Invert,
            ModalityTransform::Edge,
            ModalityTransform::BlurGamma,
        ] {
            let imgs = synth_dataset(2, 96, t, 1).unwrap();
            for p in &imgs {
                assert!(p
                    .a
                    .data
                    .iter()
                    .chain(&p.b.data)
                    .all(|v| (0.0..=1.0).contains(v)));
            }
            assert_eq!(imgs, synth_dataset(2, 96, t, 1).unwrap());
            assert_ne!(imgs[0].a, synth_dataset(2, 96, t, 2).unwrap()[0].a);
            assert_ne!(imgs[0].a, imgs[1].a);
        }
    }

    #[test]
    fn transform_names() {
        assert_eq!(
            "edge".parse::<ModalityTransform>().unwrap(),
            ModalityTransform::Edge
        );
        assert_eq!(
            "blur+gamma".parse::<ModalityTransform>().unwrap(),
            ModalityTransform::BlurGamma
        );
        assert!(matches!(
            "sharpen".parse::<ModalityTransform>(),
            Err(Error::Config { .. })
        ));
        assert!(synth_dataset(1, 32, ModalityTransform::Edge, 0).is_err());
    }
}
