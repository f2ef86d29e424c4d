//! Image ingestion, the binary pair cache and the split manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{AlignedImagePair, GrayImage, PatchPair, Split, PATCH_PIXELS};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"TSPM";
pub const CACHE_VERSION: u16 = 1;
const RECORD_BYTES: usize = 1 + 2 * PATCH_PIXELS * 4;

fn ingestion(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Loads `<root>/<pair-id>/{a,b}.{png,pgm}` for every subdirectory, sorted by id.
pub fn load_dir(root: &Path) -> Result<Vec<AlignedImagePair>> {
    let entries = fs::read_dir(root).map_err(|e| ingestion(root, e.to_string()))?;
    let mut dirs: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| ingestion(root, e.to_string()))?;
    dirs.retain(|p| p.is_dir());
    dirs.sort();
    if dirs.is_empty() {
        return Err(ingestion(root, "no image-pair subdirectories"));
    }
    dirs.iter()
        .map(|dir| {
            let id = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| ingestion(dir, "pair directory name is not UTF-8"))?
                .to_string();
            let a = load_gray(&find_image(dir, "a")?)?;
            let b = load_gray(&find_image(dir, "b")?)?;
            if (a.width, a.height) != (b.width, b.height) {
                return Err(ingestion(
                    dir,
                    format!(
                        "modalities differ in size: {}×{} vs {}×{}",
                        a.width, a.height, b.width, b.height
                    ),
                ));
            }
            AlignedImagePair::new(id, a, b)
        })
        .collect()
}

fn find_image(dir: &Path, stem: &str) -> Result<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| ingestion(&dir.join(format!("{stem}.png")), "missing image"))
}

/// Reads an 8-bit grayscale or RGB(A) image as luminance in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| ingestion(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        image::DynamicImage::ImageRgb8(rgb) => rgb.pixels().map(|p| luminance(p.0)).collect(),
        image::DynamicImage::ImageRgba8(rgba) => rgba
            .pixels()
            .map(|p| luminance([p.0[0], p.0[1], p.0[2]]))
            .collect(),
        other => {
            return Err(ingestion(
                path,
                format!(
                    "unsupported pixel format {:?}; expected 8-bit gray or RGB",
                    other.color()
                ),
            ))
        }
    };
    GrayImage::new(w, h, data).map_err(|e| ingestion(path, e.to_string()))
}

fn luminance([r, g, b]: [u8; 3]) -> f32 {
    ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0) as f32
}

/// Writes pairs in the `TSPM` record format.
pub fn write_pairs(path: &Path, pairs: &[PatchPair]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    for p in pairs {
        w.write_all(&[p.label])?;
        for v in p.patch_a.iter().chain(&p.patch_b) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `TSPM` file. Provenance is not stored, so it comes back `None`.
pub fn read_pairs(path: &Path) -> Result<Vec<PatchPair>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pairs(&bytes)
}

fn parse_pairs(bytes: &[u8]) -> Result<Vec<PatchPair>> {
    if bytes.len() < 6 {
        return Err(Error::integrity(
            bytes.len() as u64,
            "file shorter than the header",
        ));
    }
    if &bytes[..4] != CACHE_MAGIC {
        return Err(Error::integrity(0, "bad magic, not a pair cache"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CACHE_VERSION {
        return Err(Error::integrity(
            4,
            format!("unsupported pair cache version {version}"),
        ));
    }
    let body = &bytes[6..];
    if !body.len().is_multiple_of(RECORD_BYTES) {
        let off = 6 + body.len() / RECORD_BYTES * RECORD_BYTES;
        return Err(Error::integrity(off as u64, "truncated pair record"));
    }
    body.chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let off = (6 + i * RECORD_BYTES) as u64;
            let label = rec[0];
            if label > 1 {
                return Err(Error::integrity(
                    off,
                    format!("label byte {label} is not 0 or 1"),
                ));
            }
            let vals: Vec<f32> = rec[1..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::integrity(off + 1, "non-finite pixel value"));
            }
            let (a, b) = vals.split_at(PATCH_PIXELS);
            Ok(PatchPair {
                patch_a: a.to_vec(),
                patch_b: b.to_vec(),
                label,
                provenance: None,
            })
        })
        .collect()
}

/// Writes the `pair_id<TAB>split` manifest.
pub fn write_splits(path: &Path, rows: &[(String, Split)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "pair_id\tsplit")?;
    for (id, s) in rows {
        writeln!(w, "{id}\t{}", s.name())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_splits(path: &Path) -> Result<Vec<(String, Split)>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once('\t')
            .ok_or_else(|| Error::config(Some(i + 1), "expected `pair_id<TAB>split`"))?;
        let split = split
            .parse()
            .map_err(|_| Error::config(Some(i + 1), format!("unknown split `{split}`")))?;
        out.push((id.to_string(), split));
    }
    Ok(out)
}
