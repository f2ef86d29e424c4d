//! Patch-pair pipeline: grid patches from aligned image pairs, positive and
//! negative pairs, affine augmentation, image-level splits and per-modality
//! normalization.

mod io;
mod synth;

pub use io::{
    load_dir, read_pairs, read_splits, write_pairs, write_splits, CACHE_MAGIC, CACHE_VERSION,
};
pub use synth::{apply_transform, synth_dataset, ModalityTransform};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::PATCH_SIZE;

/// Pixels per patch.
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

/// Single-channel image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::contract(format!(
                "{}×{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixel at possibly out-of-range coordinates, mirrored at the borders.
    fn at_reflect(&self, x: i64, y: i64) -> f32 {
        self.at(reflect(x, self.width), reflect(y, self.height))
    }

    /// Bilinear sample at pixel coordinates (pixel centers are integers).
    pub fn bilinear(&self, x: f64, y: f64) -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let p00 = self.at_reflect(x0, y0) as f64;
        let p10 = self.at_reflect(x0 + 1, y0) as f64;
        let p01 = self.at_reflect(x0, y0 + 1) as f64;
        let p11 = self.at_reflect(x0 + 1, y0 + 1) as f64;
        let v = p00 * (1.0 - fx) * (1.0 - fy)
            + p10 * fx * (1.0 - fy)
            + p01 * (1.0 - fx) * fy
            + p11 * fx * fy;
        v as f32
    }

    /// The 64×64 patch whose top-left pixel is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(PATCH_PIXELS);
        for row in y..y + PATCH_SIZE {
            out.extend_from_slice(
                &self.data[row * self.width + x..row * self.width + x + PATCH_SIZE],
            );
        }
        out
    }
}

/// Symmetric reflection of index `i` into `0..n` (edge pixel repeated).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Two pixel-aligned images of one scene, one per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedImagePair {
    pub id: String,
    pub a: GrayImage,
    pub b: GrayImage,
}

impl AlignedImagePair {
    pub fn new(id: impl Into<String>, a: GrayImage, b: GrayImage) -> Result<Self> {
        if (a.width, a.height) != (b.width, b.height) {
            return Err(Error::contract(format!(
                "modalities differ in size: {}×{} vs {}×{}",
                a.width, a.height, b.width, b.height
            )));
        }
        Ok(AlignedImagePair {
            id: id.into(),
            a,
            b,
        })
    }
}

/// Grid cell `(row, col)`; its patch starts at pixel `(64·col, 64·row)`.
pub type Cell = (usize, usize);

/// Non-overlapping 64×64 cells; partial border cells are dropped.
pub fn grid_patches(img: &GrayImage) -> Vec<(Cell, Vec<f32>)> {
    let (rows, cols) = (img.height / PATCH_SIZE, img.width / PATCH_SIZE);
    if rows == 0 || cols == 0 {
        log::warn!(
            "{}×{} image is smaller than one {PATCH_SIZE}×{PATCH_SIZE} cell",
            img.width,
            img.height
        );
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(((r, c), img.crop(c * PATCH_SIZE, r * PATCH_SIZE)));
        }
    }
    out
}

/// Random similarity transform applied to `patch_b` during augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
    /// Which of rotation, translation and scale take effect.
    pub enabled: [bool; 3],
}

pub const ROTATION_RANGE: (f64, f64) = (-12.0, 12.0);
pub const TRANSLATION_RANGE: (f64, f64) = (-5.0, 5.0);
pub const SCALE_RANGE: (f64, f64) = (0.8, 0.99);

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            rotation_deg: 0.0,
            tx: 0.0,
            ty: 0.0,
            scale: 1.0,
            enabled: [false; 3],
        }
    }

    /// Samples every field in its range and a random non-empty subset of the
    /// three transforms.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let rotation_deg = rng.gen_range(ROTATION_RANGE.0..=ROTATION_RANGE.1);
        let tx = rng.gen_range(TRANSLATION_RANGE.0..=TRANSLATION_RANGE.1);
        let ty = rng.gen_range(TRANSLATION_RANGE.0..=TRANSLATION_RANGE.1);
        let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let enabled = loop {
            let m = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
            if m.iter().any(|&b| b) {
                break m;
            }
        };
        AffineParams {
            rotation_deg,
            tx,
            ty,
            scale,
            enabled,
        }
    }

    /// Effective `(angle_rad, tx, ty, scale)` with disabled parts at identity.
    fn effective(&self) -> (f64, f64, f64, f64) {
        let [rot, trans, scale] = self.enabled;
        (
            if rot {
                self.rotation_deg.to_radians()
            } else {
                0.0
            },
            if trans { self.tx } else { 0.0 },
            if trans { self.ty } else { 0.0 },
            if scale { self.scale } else { 1.0 },
        )
    }
}

/// Resamples the 64×64 patch at `cell` of `img` through `params`.
///
/// Output pixel at offset `o` from the cell center reads the parent image at
/// `center + scale·R(θ)·o + t`, bilinearly, reflecting beyond the borders.
pub fn resample(img: &GrayImage, cell: Cell, params: &AffineParams) -> Vec<f32> {
    let (theta, tx, ty, s) = params.effective();
    let (sin, cos) = theta.sin_cos();
    let half = (PATCH_SIZE as f64 - 1.0) / 2.0;
    let cx = (cell.1 * PATCH_SIZE) as f64 + half;
    let cy = (cell.0 * PATCH_SIZE) as f64 + half;
    let mut out = Vec::with_capacity(PATCH_PIXELS);
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let (ox, oy) = (x as f64 - half, y as f64 - half);
            let sx = cx + s * (cos * ox - sin * oy) + tx;
            let sy = cy + s * (sin * ox + cos * oy) + ty;
            out.push(img.bilinear(sx, sy));
        }
    }
    out
}

/// Where a pair's patches came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    /// Index of the image pair supplying `patch_a` (modality A).
    pub image_a: usize,
    /// Index of the image pair supplying `patch_b` (modality B).
    pub image_b: usize,
    pub cell_a: Cell,
    pub cell_b: Cell,
    /// Transform applied to `patch_b`, if augmented.
    pub augment: Option<AffineParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub patch_a: Vec<f32>,
    pub patch_b: Vec<f32>,
    /// 1 for a correspondence, 0 otherwise.
    pub label: u8,
    pub provenance: Option<Provenance>,
}

/// Independent generator for `(purpose, index)` derived from `seed`.
pub fn derive_rng(seed: u64, purpose: u32, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | index as u64);
    rng
}

const STREAM_NEGATIVES: u32 = 1;
const STREAM_AUGMENT: u32 = 2;
const STREAM_KEEP: u32 = 3;
const STREAM_SPLIT: u32 = 4;

/// One positive per grid cell of every image, then as many negatives:
/// `patch_a` of each positive paired with `patch_b` from a uniformly chosen
/// other image at a uniformly chosen cell.
///
/// `images` are indexed by position; `indices` maps them to the dataset-wide
/// ids recorded in provenance, and seeds each image's own generator.
pub fn make_pairs(
    images: &[&AlignedImagePair],
    indices: &[usize],
    seed: u64,
) -> Result<Vec<PatchPair>> {
    if images.len() < 2 {
        return Err(Error::contract(
            "negative pairs need at least two image pairs",
        ));
    }
    debug_assert_eq!(images.len(), indices.len());
    let grids_b: Vec<Vec<(Cell, Vec<f32>)>> = images.iter().map(|p| grid_patches(&p.b)).collect();
    if grids_b.iter().any(|g| g.is_empty()) {
        return Err(Error::contract("every image must hold at least one cell"));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let mut rng = derive_rng(seed, STREAM_NEGATIVES, indices[i] as u32);
        for ((cell, patch_a), (_, patch_b)) in grid_patches(&img.a).into_iter().zip(&grids_b[i]) {
            let mut j = rng.gen_range(0..images.len() - 1);
            if j >= i {
                j += 1;
            }
            let (cell_b, donor) = &grids_b[j][rng.gen_range(0..grids_b[j].len())];
            negatives.push(PatchPair {
                patch_a: patch_a.clone(),
                patch_b: donor.clone(),
                label: 0,
                provenance: Some(Provenance {
                    image_a: indices[i],
                    image_b: indices[j],
                    cell_a: cell,
                    cell_b: *cell_b,
                    augment: None,
                }),
            });
            positives.push(PatchPair {
                patch_a,
                patch_b: patch_b.clone(),
                label: 1,
                provenance: Some(Provenance {
                    image_a: indices[i],
                    image_b: indices[i],
                    cell_a: cell,
                    cell_b: cell,
                    augment: None,
                }),
            });
        }
    }
    positives.extend(negatives);
    Ok(positives)
}

/// The pair followed by three copies whose `patch_b` is resampled from
/// `parent_b` (the modality-B image `patch_b` was cut from) through freshly
/// sampled affine parameters.
pub fn augment<R: Rng + ?Sized>(
    pair: &PatchPair,
    parent_b: &GrayImage,
    rng: &mut R,
) -> Result<Vec<PatchPair>> {
    let prov = pair
        .provenance
        .ok_or_else(|| Error::contract("augmentation needs the pair's provenance"))?;
    let mut out = Vec::with_capacity(4);
    out.push(pair.clone());
    for _ in 0..3 {
        let params = AffineParams::sample(rng);
        out.push(PatchPair {
            patch_a: pair.patch_a.clone(),
            patch_b: resample(parent_b, prov.cell_b, &params),
            label: pair.label,
            provenance: Some(Provenance {
                augment: Some(params),
                ..prov
            }),
        });
    }
    Ok(out)
}

/// Keeps one uniformly chosen pair per augmentation group.
pub fn finalize_eval_split<R: Rng + ?Sized>(
    groups: Vec<Vec<PatchPair>>,
    rng: &mut R,
) -> Result<Vec<PatchPair>> {
    groups
        .into_iter()
        .map(|mut g| {
            if g.len() != 4 {
                return Err(Error::contract(format!(
                    "augmentation groups hold 4 pairs, got {}",
                    g.len()
                )));
            }
            let k = rng.gen_range(0..4);
            Ok(g.swap_remove(k))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Val];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" | "validation" => Ok(Split::Val),
            _ => Err(Error::config(None, format!("unknown split `{s}`"))),
        }
    }
}

/// Fractions of source image pairs per split.
pub const SPLIT_FRACTIONS: [(Split, f64); 3] =
    [(Split::Train, 0.7), (Split::Test, 0.2), (Split::Val, 0.1)];

/// Assigns each image index to a split: a seeded shuffle, then 70% train,
/// 20% test and the remainder validation (counts rounded to nearest).
pub fn assign_splits(n_images: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut derive_rng(seed, STREAM_SPLIT, 0));
    let n_train = (n_images as f64 * 0.7).round() as usize;
    let n_test = ((n_images as f64 * 0.2).round() as usize).min(n_images - n_train);
    let mut out = vec![Split::Val; n_images];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_test {
            Split::Test
        } else {
            Split::Val
        };
    }
    out
}

/// Patch pairs of all three splits, before normalization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitPairs {
    pub train: Vec<PatchPair>,
    pub test: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
    /// Split of every source image, by index into the image list.
    pub assignment: Vec<Split>,
}

impl SplitPairs {
    pub fn get(&self, split: Split) -> &[PatchPair] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Val => &self.val,
        }
    }
}

/// Full pair pipeline: image-level split, pairs within each split, 4×
/// augmentation, and one-of-four selection for test and validation.
pub fn build_pairs(images: &[AlignedImagePair], seed: u64) -> Result<SplitPairs> {
    let assignment = assign_splits(images.len(), seed);
    let mut out = SplitPairs {
        assignment: assignment.clone(),
        ..Default::default()
    };
    for split in Split::ALL {
        let indices: Vec<usize> = (0..images.len())
            .filter(|&i| assignment[i] == split)
            .collect();
        if indices.is_empty() {
            continue;
        }
        let members: Vec<&AlignedImagePair> = indices.iter().map(|&i| &images[i]).collect();
        let pairs = make_pairs(&members, &indices, seed)?;
        let mut groups = Vec::with_capacity(pairs.len());
        let mut rngs: std::collections::BTreeMap<usize, ChaCha8Rng> = indices
            .iter()
            .map(|&i| (i, derive_rng(seed, STREAM_AUGMENT, i as u32)))
            .collect();
        for p in &pairs {
            let prov = p.provenance.expect("pairs carry provenance");
            let rng = rngs.get_mut(&prov.image_a).expect("image of this split");
            groups.push(augment(p, &images[prov.image_b].b, rng)?);
        }
        let kept = match split {
            Split::Train => groups.into_iter().flatten().collect(),
            _ => finalize_eval_split(groups, &mut derive_rng(seed, STREAM_KEEP, split as u32))?,
        };
        match split {
            Split::Train => out.train = kept,
            Split::Test => out.test = kept,
            Split::Val => out.val = kept,
        }
    }
    Ok(out)
}

/// Per-modality mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

/// Floor applied to the standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }
}

impl NormStats {
    /// Statistics of modality A (`patch_a`) and B (`patch_b`) over `pairs`.
    pub fn compute(pairs: &[PatchPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract(
                "normalization statistics need at least one pair",
            ));
        }
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for m in 0..2 {
            let patches = pairs
                .iter()
                .map(|p| if m == 0 { &p.patch_a } else { &p.patch_b });
            let n = (pairs.len() * PATCH_PIXELS) as f64;
            let mu = patches.clone().flatten().map(|&v| v as f64).sum::<f64>() / n;
            let var = patches
                .flatten()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>()
                / n;
            mean[m] = mu;
            std[m] = var.sqrt().max(STD_FLOOR);
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, pair: &mut PatchPair) {
        for (m, patch) in [&mut pair.patch_a, &mut pair.patch_b]
            .into_iter()
            .enumerate()
        {
            let (mu, sd) = (self.mean[m], self.std[m]);
            for v in patch.iter_mut() {
                *v = ((*v as f64 - mu) / sd) as f32;
            }
        }
    }
}

/// Normalizes every pair with `stats`.
pub fn normalize(pairs: &mut [PatchPair], stats: &NormStats) {
    for p in pairs {
        stats.apply(p);
    }
}
