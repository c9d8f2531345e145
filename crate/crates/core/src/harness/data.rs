//! Dataset ingestion, deterministic splits, and the synthetic image
//! generator used for desk-scale runs.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::rng::{rng_derive, RngStream};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Persisted dataset split: ordered by id, assignment decided by a seeded
/// shuffle, undecodable files recorded rather than silently dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub crop: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedFile>,
}

impl SplitManifest {
    pub fn split_paths(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn counts(&self) -> (usize, usize) {
        let train = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .count();
        (train, self.entries.len() - train)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config {
            reason: format!("manifest {}: {e}", path.display()),
        })
    }
}

/// Deterministic split assignment over `n` items: seeded shuffle of indices,
/// first `train_count` to train, next `test_count` to test.
pub fn split_assignment(
    n: usize,
    train_fraction: f64,
    train_count: Option<usize>,
    test_count: Option<usize>,
    seed: u64,
) -> Vec<Split> {
    let train_n = match (train_count, test_count) {
        (Some(t), _) => t.min(n),
        (None, Some(te)) => n.saturating_sub(te),
        (None, None) => ((n as f64) * train_fraction).round() as usize,
    };
    let test_n = match test_count {
        Some(te) => te.min(n - train_n),
        None => n - train_n,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_derive(seed, &[u64::from_le_bytes(*b"split000")]).rng();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        if rank < train_n {
            splits[idx] = Split::Train;
        } else if rank < train_n + test_n {
            splits[idx] = Split::Test;
        } else {
            // Items beyond train+test stay test by default.
            splits[idx] = Split::Test;
        }
    }
    splits
}

/// Scans a directory of images, checks decodability, center-crops/resizes on
/// later loads, and persists a deterministic split manifest.
pub fn ingest(
    dataset_dir: &Path,
    crop: usize,
    seed: u64,
    train_fraction: f64,
    train_count: Option<usize>,
    test_count: Option<usize>,
) -> Result<SplitManifest, HarnessError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dataset_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png" | "jpg" | "jpeg" | "bmp")
                )
        })
        .collect();
    files.sort();

    let mut decodable = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        match image::open(&path) {
            Ok(_) => decodable.push(path),
            Err(e) => skipped.push(SkippedFile {
                path,
                reason: e.to_string(),
            }),
        }
    }
    if decodable.len() < 2 {
        return Err(HarnessError::Dataset {
            reason: format!(
                "need at least 2 decodable images in {}, found {}",
                dataset_dir.display(),
                decodable.len()
            ),
        });
    }

    let splits = split_assignment(
        decodable.len(),
        train_fraction,
        train_count,
        test_count,
        seed,
    );
    let entries = decodable
        .into_iter()
        .zip(splits)
        .map(|(path, split)| ManifestEntry {
            id: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            path,
            split,
        })
        .collect();
    Ok(SplitManifest {
        crop,
        seed,
        entries,
        skipped,
    })
}

/// Loads one manifest entry: decode, resize the shortest side up to `crop`
/// when needed, then center-crop to `crop`x`crop`.
pub fn load_cropped(path: &Path, crop: usize) -> Result<Image, HarnessError> {
    let decoded = image::open(path).map_err(|e| HarnessError::Dataset {
        reason: format!("{}: {e}", path.display()),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w, h, rgb) = if (w as usize) < crop || (h as usize) < crop {
        let scale = (crop as f64 / w.min(h) as f64).max(1.0);
        let nw = (w as f64 * scale).ceil() as u32;
        let nh = (h as f64 * scale).ceil() as u32;
        let resized =
            image::imageops::resize(&rgb, nw, nh, image::imageops::FilterType::Triangle);
        (nw, nh, resized)
    } else {
        (w, h, rgb)
    };
    let x0 = (w as usize - crop) / 2;
    let y0 = (h as usize - crop) / 2;
    let mut data = Vec::with_capacity(crop * crop * 3);
    for i in 0..crop {
        for j in 0..crop {
            let px = rgb.get_pixel((x0 + j) as u32, (y0 + i) as u32);
            data.extend_from_slice(&px.0);
        }
    }
    Image::from_raw(crop, crop, data).map_err(|e| HarnessError::Dataset {
        reason: e.to_string(),
    })
}

/// Loads every entry of a split into memory.
pub fn load_split(
    manifest: &SplitManifest,
    split: Split,
) -> Result<Vec<(String, Image)>, HarnessError> {
    manifest
        .split_paths(split)
        .into_iter()
        .map(|e| Ok((e.id.clone(), load_cropped(&e.path, manifest.crop)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

/// Procedural image with piecewise-smooth regions, edges and textures so the
/// entropy map has genuine spatial variation: gradient background, filled
/// rectangles and discs, one sinusoidal texture patch, mild pixel noise.
pub fn synth_image(size: usize, stream: &RngStream) -> Image {
    let mut rng = stream.rng();
    let mut img = Image::filled(size, size, 0);
    let base: [f64; 3] = [
        rng.random_range(30.0..220.0),
        rng.random_range(30.0..220.0),
        rng.random_range(30.0..220.0),
    ];
    let gx: [f64; 3] = [
        rng.random_range(-60.0..60.0),
        rng.random_range(-60.0..60.0),
        rng.random_range(-60.0..60.0),
    ];
    let gy: [f64; 3] = [
        rng.random_range(-60.0..60.0),
        rng.random_range(-60.0..60.0),
        rng.random_range(-60.0..60.0),
    ];
    for i in 0..size {
        for j in 0..size {
            for c in 0..3 {
                let v = base[c] + gx[c] * (j as f64 / size as f64 - 0.5)
                    + gy[c] * (i as f64 / size as f64 - 0.5);
                img.set(i, j, c, v.clamp(0.0, 255.0) as u8);
            }
        }
    }

    let n_rects = rng.random_range(1..4);
    for _ in 0..n_rects {
        let bi = rng.random_range(0..size);
        let bj = rng.random_range(0..size);
        let bh = rng.random_range(size / 8..size / 2);
        let bw = rng.random_range(size / 8..size / 2);
        let color: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        for i in bi..(bi + bh).min(size) {
            for j in bj..(bj + bw).min(size) {
                for c in 0..3 {
                    img.set(i, j, c, color[c]);
                }
            }
        }
    }

    let n_discs = rng.random_range(1..3);
    for _ in 0..n_discs {
        let ci = rng.random_range(0..size) as f64;
        let cj = rng.random_range(0..size) as f64;
        let radius = rng.random_range(size as f64 / 12.0..size as f64 / 4.0);
        let color: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let r2 = radius * radius;
        for i in 0..size {
            for j in 0..size {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                if d2 <= r2 {
                    for c in 0..3 {
                        img.set(i, j, c, color[c]);
                    }
                }
            }
        }
    }

    // Sinusoidal texture patch: high local entropy region.
    let ti = rng.random_range(0..size / 2);
    let tj = rng.random_range(0..size / 2);
    let th = rng.random_range(size / 6..size / 2);
    let tw = rng.random_range(size / 6..size / 2);
    let freq = rng.random_range(0.4..1.6);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for i in ti..(ti + th).min(size) {
        for j in tj..(tj + tw).min(size) {
            let wave = ((i as f64 * freq + phase).sin() * (j as f64 * freq).cos() + 1.0) / 2.0;
            let v = (wave * 255.0) as u8;
            for c in 0..3 {
                let mixed = (img.get(i, j, c) as u16 + v as u16) / 2;
                img.set(i, j, c, mixed as u8);
            }
        }
    }

    // Mild sensor-like noise.
    for i in 0..size {
        for j in 0..size {
            for c in 0..3 {
                let noise: i16 = rng.random_range(-2..=2);
                let v = (img.get(i, j, c) as i16 + noise).clamp(0, 255);
                img.set(i, j, c, v as u8);
            }
        }
    }
    img
}

/// Writes `count` synthetic PNGs named `img_00000.png`... into `dir`.
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    for idx in 0..count {
        let img = synth_image(size, &rng_derive(seed, &[u64::from_le_bytes(*b"datagen0"), idx as u64]));
        let path = dir.join(format!("img_{idx:05}.png"));
        save_png(&img, &path)?;
    }
    Ok(())
}

pub fn save_png(img: &Image, path: &Path) -> Result<(), HarnessError> {
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        encoder,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| HarnessError::Dataset {
        reason: format!("png encode: {e}"),
    })?;
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_assignment_is_deterministic_and_sized() {
        let a = split_assignment(100, 0.8, None, None, 7);
        let b = split_assignment(100, 0.8, None, None, 7);
        assert_eq!(a, b);
        let train = a.iter().filter(|s| **s == Split::Train).count();
        assert_eq!(train, 80);
        let c = split_assignment(100, 0.8, None, None, 8);
        assert_ne!(a, c, "different seeds give different splits");
    }

    // Paper-protocol counts: 40504 items configured as 40000 train, 504 test.
    #[test]
    fn split_supports_absolute_counts() {
        let splits = split_assignment(40_504, 0.9, Some(40_000), Some(504), 1);
        let train = splits.iter().filter(|s| **s == Split::Train).count();
        let test = splits.len() - train;
        assert_eq!(train, 40_000);
        assert_eq!(test, 504);
    }

    #[test]
    fn ingest_and_reload_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 10, 32, 5).unwrap();
        let manifest = ingest(dir.path(), 32, 7, 0.8, None, None).unwrap();
        assert_eq!(manifest.entries.len(), 10);
        assert_eq!(manifest.counts(), (8, 2));
        assert!(manifest.skipped.is_empty());

        // Identical on re-run.
        let again = ingest(dir.path(), 32, 7, 0.8, None, None).unwrap();
        let ids: Vec<_> = manifest.entries.iter().map(|e| (&e.id, e.split)).collect();
        let ids2: Vec<_> = again.entries.iter().map(|e| (&e.id, e.split)).collect();
        assert_eq!(ids, ids2);

        // Persist and reload.
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        let loaded = SplitManifest::load(&mpath).unwrap();
        assert_eq!(loaded.entries.len(), manifest.entries.len());

        // Load a split into memory at the crop size.
        let train = load_split(&manifest, Split::Train).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(train[0].1.height(), 32);
    }

    #[test]
    fn ingest_skips_undecodable_files_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 3, 16, 2).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let manifest = ingest(dir.path(), 16, 1, 0.5, None, None).unwrap();
        assert_eq!(manifest.entries.len(), 3);
        assert_eq!(manifest.skipped.len(), 1);
        assert!(manifest.skipped[0].path.ends_with("broken.png"));
    }

    #[test]
    fn ingest_requires_two_images() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 1, 16, 3).unwrap();
        assert!(matches!(
            ingest(dir.path(), 16, 1, 0.5, None, None),
            Err(HarnessError::Dataset { .. })
        ));
    }

    #[test]
    fn synth_images_are_deterministic_and_varied() {
        let a = synth_image(32, &rng_derive(9, &[0]));
        let b = synth_image(32, &rng_derive(9, &[0]));
        assert_eq!(a, b);
        let c = synth_image(32, &rng_derive(9, &[1]));
        assert_ne!(a, c);
    }

    #[test]
    fn load_cropped_resizes_small_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = synth_image(24, &rng_derive(1, &[4]));
        let path = dir.path().join("small.png");
        save_png(&img, &path).unwrap();
        let loaded = load_cropped(&path, 32).unwrap();
        assert_eq!((loaded.height(), loaded.width()), (32, 32));
    }
}
