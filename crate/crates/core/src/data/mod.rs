//! Dataset handling: synthetic generation, PPM/PGM raster ingestion,
//! resizing, normalization and deterministic splitting.
//!
//! On-disk layout for directory datasets: `images/<id>.ppm` paired with
//! `masks/<id>.pgm`.

mod pnm;
mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub use pnm::{read_pnm, write_pgm, write_ppm, PnmImage};
pub use synth::{generate_sample, AREA_FRACTION_RANGE};

use crate::error::DataError;
use crate::tensor::bilinear_axis;
use crate::Tensor;

/// One image/mask pair, image `[3,H,W]` in [0,1], mask `[H,W]` in {0,1}.
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Sample count for synthetic sources (directories bring their own).
    pub count: usize,
    pub image_size: usize,
    /// Train fraction; validation gets the rest.
    pub train_fraction: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.image_size < 8 {
            return Err(DataError::InvalidSpec(format!(
                "image size {} is too small",
                self.image_size
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DataError::InvalidSpec(format!(
                "train fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        if matches!(self.source, DataSource::Synthetic) && self.count < 2 {
            return Err(DataError::InvalidSpec(
                "need at least 2 samples so both splits are non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Materializes the dataset a spec describes.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    match &spec.source {
        DataSource::Synthetic => Ok((0..spec.count as u64)
            .map(|i| generate_sample(spec.seed, i, spec.image_size))
            .collect()),
        DataSource::Directory(dir) => load_directory(dir, spec.image_size),
    }
}

/// Seeded shuffle followed by a contiguous cut; the two sides are disjoint,
/// cover the input, and are identical for identical seeds.
pub fn split(
    mut samples: Vec<Sample>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    let n = samples.len();
    if n < 2 {
        return Err(DataError::InvalidSpec(format!(
            "cannot split {n} samples into two non-empty sides"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let val = samples.split_off(n_train);
    Ok((samples, val))
}

/// Loads one image/mask pair, resizing to `target_size` (bilinear for the
/// image, nearest-neighbor then >127 binarization for the mask). A grayscale
/// P5 image is replicated across the three channels.
pub fn load_pair(
    image_path: &Path,
    mask_path: &Path,
    target_size: usize,
) -> Result<Sample, DataError> {
    let image = read_pnm(image_path)?;
    let mask = read_pnm(mask_path)?;
    if mask.channels != 1 {
        return Err(DataError::Format {
            path: mask_path.display().to_string(),
            msg: "mask must be a single-channel P5 PGM".into(),
        });
    }
    if image.width != mask.width || image.height != mask.height {
        return Err(DataError::DimensionMismatch {
            image: image_path.display().to_string(),
            iw: image.width,
            ih: image.height,
            mask: mask_path.display().to_string(),
            mw: mask.width,
            mh: mask.height,
        });
    }

    let planes = rgb_planes(&image);
    let mut image_data = Vec::with_capacity(3 * target_size * target_size);
    for plane in &planes {
        image_data.extend(resize_bilinear_plane(
            plane,
            image.height,
            image.width,
            target_size,
            target_size,
        ));
    }
    let mask_small = resize_nearest(&mask.data, mask.height, mask.width, target_size, target_size);
    let mask_data: Vec<f64> = mask_small
        .iter()
        .map(|&v| if v > 127 { 1.0 } else { 0.0 })
        .collect();

    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into());
    Ok(Sample {
        id,
        image: Tensor::from_vec(image_data, &[3, target_size, target_size])
            .expect("shape matches"),
        mask: Tensor::from_vec(mask_data, &[target_size, target_size]).expect("shape matches"),
    })
}

fn rgb_planes(image: &PnmImage) -> [Vec<f64>; 3] {
    let n = image.width * image.height;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    match image.channels {
        3 => {
            for (c, plane) in planes.iter_mut().enumerate() {
                for (p, slot) in plane.iter_mut().enumerate() {
                    *slot = image.data[p * 3 + c] as f64 / 255.0;
                }
            }
        }
        _ => {
            for plane in planes.iter_mut() {
                for (p, slot) in plane.iter_mut().enumerate() {
                    *slot = image.data[p] as f64 / 255.0;
                }
            }
        }
    }
    planes
}

/// Half-pixel bilinear resampling of one plane (same convention as the
/// tensor op, shared through `bilinear_axis`).
pub fn resize_bilinear_plane(
    data: &[f64],
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<f64> {
    let ys = bilinear_axis(h, th);
    let xs = bilinear_axis(w, tw);
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let top = data[y0 * w + x0] * (1.0 - wx) + data[y0 * w + x1] * wx;
            let bot = data[y1 * w + x0] * (1.0 - wx) + data[y1 * w + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Nearest-neighbor with the corner-sample index map `src = dst·in/out`
/// (integer floor), so constants and downsampled grids stay exact.
pub fn resize_nearest(data: &[u8], h: usize, w: usize, th: usize, tw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = y * h / th;
        for x in 0..tw {
            let sx = x * w / tw;
            out.push(data[sy * w + sx]);
        }
    }
    out
}

/// Writes `images/<id>.ppm` and `masks/<id>.pgm` under `dir`.
pub fn export_dataset(samples: &[Sample], dir: &Path) -> Result<(), DataError> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| DataError::Io {
            path: d.display().to_string(),
            source: e,
        })?;
    }
    for sample in samples {
        let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
        let plane = h * w;
        let values = sample.image.values();
        let mut rgb = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                rgb.push((values[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        drop(values);
        write_ppm(&images.join(format!("{}.ppm", sample.id)), w, h, &rgb)?;
        let mask_bytes: Vec<u8> = sample
            .mask
            .values()
            .iter()
            .map(|&v| if v >= 0.5 { 255 } else { 0 })
            .collect();
        write_pgm(&masks.join(format!("{}.pgm", sample.id)), w, h, &mask_bytes)?;
    }
    Ok(())
}

/// Loads every `images/<id>.ppm` + `masks/<id>.pgm` pair, sorted by id.
pub fn load_directory(dir: &Path, target_size: usize) -> Result<Vec<Sample>, DataError> {
    let images_dir = dir.join("images");
    let entries = std::fs::read_dir(&images_dir).map_err(|e| DataError::Io {
        path: images_dir.display().to_string(),
        source: e,
    })?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let path = e.path();
            if path.extension().is_some_and(|x| x == "ppm") {
                path.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(DataError::InvalidSpec(format!(
            "no .ppm images under {}",
            images_dir.display()
        )));
    }
    ids.iter()
        .map(|id| {
            load_pair(
                &images_dir.join(format!("{id}.ppm")),
                &dir.join("masks").join(format!("{id}.pgm")),
                target_size,
            )
        })
        .collect()
}

/// A batch ready for the model: images `[B,3,H,W]`, masks `[B,H,W]`.
pub struct SampleBatch {
    pub images: Tensor,
    pub masks: Tensor,
    pub ids: Vec<String>,
}

impl SampleBatch {
    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }

    /// Checks the type's invariants: aligned shapes, [0,1] images, strictly
    /// binary masks.
    pub fn validate(&self) -> Result<(), DataError> {
        let is = self.images.shape();
        let ms = self.masks.shape();
        if is.len() != 4 || ms.len() != 3 || is[0] != ms[0] || is[2] != ms[1] || is[3] != ms[2] {
            return Err(DataError::InvalidSpec(format!(
                "misaligned batch: images {is:?} vs masks {ms:?}"
            )));
        }
        if is[0] == 0 {
            return Err(DataError::InvalidSpec("empty batch".into()));
        }
        if self.ids.len() != is[0] {
            return Err(DataError::InvalidSpec("id count mismatch".into()));
        }
        if self.images.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DataError::InvalidSpec("image values outside [0,1]".into()));
        }
        if self.masks.values().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(DataError::InvalidSpec("mask values must be binary".into()));
        }
        Ok(())
    }
}

/// Packs samples into contiguous batches of at most `batch_size`.
pub fn make_batches(samples: &[Sample], batch_size: usize) -> Vec<SampleBatch> {
    assert!(batch_size > 0, "batch size must be positive");
    samples
        .chunks(batch_size)
        .map(|chunk| {
            let b = chunk.len();
            let (h, w) = (chunk[0].image.shape()[1], chunk[0].image.shape()[2]);
            let mut images = Vec::with_capacity(b * 3 * h * w);
            let mut masks = Vec::with_capacity(b * h * w);
            let mut ids = Vec::with_capacity(b);
            for s in chunk {
                images.extend_from_slice(&s.image.values());
                masks.extend_from_slice(&s.mask.values());
                ids.push(s.id.clone());
            }
            SampleBatch {
                images: Tensor::from_vec(images, &[b, 3, h, w]).expect("shape matches"),
                masks: Tensor::from_vec(masks, &[b, h, w]).expect("shape matches"),
                ids,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn sample_digest(sample: &Sample) -> String {
        let mut hasher = Sha256::new();
        for v in sample.image.values().iter() {
            hasher.update(v.to_le_bytes());
        }
        for v in sample.mask.values().iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    #[test]
    fn generator_is_deterministic_per_seed_and_index() {
        let a = generate_sample(7, 3, 32);
        let b = generate_sample(7, 3, 32);
        assert_eq!(a.image.to_vec(), b.image.to_vec());
        assert_eq!(a.mask.to_vec(), b.mask.to_vec());
        let c = generate_sample(7, 4, 32);
        assert_ne!(a.image.to_vec(), c.image.to_vec());
    }

    // Pinned at first implementation; any change to the generator stream is
    // a deliberate, visible break.
    #[test]
    fn generator_reference_digest() {
        let sample = generate_sample(7, 0, 64);
        assert_eq!(
            sample_digest(&sample),
            "fc446458924a71f03dc5c651550a481c1e0036bd2afc4027221d945e555d30e4",
            "seed 7 / index 0 sample changed"
        );
    }

    #[test]
    fn generated_masks_are_binary_and_images_normalized() {
        for index in 0..8 {
            let s = generate_sample(11, index, 48);
            assert!(s.mask.values().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn area_fraction_band_over_1000_samples() {
        let (lo, hi) = AREA_FRACTION_RANGE;
        for index in 0..1000u64 {
            let s = generate_sample(5, index, 64);
            let area: f64 = s.mask.values().iter().sum();
            let fraction = area / (64.0 * 64.0);
            assert!(
                (lo..=hi).contains(&fraction),
                "sample {index}: fraction {fraction}"
            );
        }
    }

    #[test]
    fn split_is_disjoint_covering_and_deterministic() {
        let samples: Vec<Sample> = (0..10).map(|i| generate_sample(1, i, 16)).collect();
        let ids = |v: &[Sample]| {
            let mut out: Vec<String> = v.iter().map(|s| s.id.clone()).collect();
            out.sort();
            out
        };
        let all = ids(&samples);
        let again: Vec<Sample> = (0..10).map(|i| generate_sample(1, i, 16)).collect();

        let (train, val) = split(samples, 0.8, 42).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        let mut union = ids(&train);
        union.extend(ids(&val));
        union.sort();
        assert_eq!(union, all);
        for t in &train {
            assert!(!val.iter().any(|v| v.id == t.id));
        }

        let (train2, val2) = split(again, 0.8, 42).unwrap();
        assert_eq!(ids(&train), ids(&train2));
        assert_eq!(ids(&val), ids(&val2));
    }

    #[test]
    fn split_rejects_tiny_sets() {
        let samples: Vec<Sample> = (0..1).map(|i| generate_sample(1, i, 16)).collect();
        assert!(split(samples, 0.5, 0).is_err());
    }

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ppm = dir.path().join("x.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13 % 251) as u8).collect();
        write_ppm(&ppm, 3, 2, &rgb).unwrap();
        let back = read_pnm(&ppm).unwrap();
        assert_eq!((back.width, back.height, back.channels), (3, 2, 3));
        assert_eq!(back.data, rgb);

        let pgm = dir.path().join("x.pgm");
        let gray: Vec<u8> = (0..6).map(|i| (i * 40) as u8).collect();
        write_pgm(&pgm, 3, 2, &gray).unwrap();
        let back = read_pnm(&pgm).unwrap();
        assert_eq!((back.width, back.height, back.channels), (3, 2, 1));
        assert_eq!(back.data, gray);
    }

    #[test]
    fn pnm_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.ppm");
        std::fs::write(&bad_magic, b"P7\n2 2\n255\nxxxx").unwrap();
        assert!(matches!(read_pnm(&bad_magic), Err(DataError::Format { .. })));

        let truncated = dir.path().join("short.pgm");
        std::fs::write(&truncated, b"P5\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_pnm(&truncated), Err(DataError::Format { .. })));

        let missing = dir.path().join("nope.pgm");
        assert!(matches!(read_pnm(&missing), Err(DataError::Io { .. })));
    }

    #[test]
    fn pnm_reader_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 2\n# another\n255\nabcd").unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!(img.data, b"abcd");
    }

    #[test]
    fn load_pair_resizes_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let image_path = dir.path().join("s.ppm");
        let mask_path = dir.path().join("s.pgm");
        let rgb = vec![128u8; 32 * 32 * 3];
        write_ppm(&image_path, 32, 32, &rgb).unwrap();
        write_pgm(&mask_path, 32, 32, &vec![255u8; 32 * 32]).unwrap();

        let sample = load_pair(&image_path, &mask_path, 64).unwrap();
        assert_eq!(sample.image.shape(), &[3, 64, 64]);
        assert_eq!(sample.mask.shape(), &[64, 64]);
        assert!(sample
            .image
            .values()
            .iter()
            .all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));
        // Constant 255 mask stays all ones at any size.
        assert!(sample.mask.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn nearest_downsample_picks_corner_samples() {
        // 4x4 checkerboard starting with 255 at (0,0); the corner-sample map
        // src = dst*in/out picks indices {0,2}, all of which hold 255.
        let mut board = vec![0u8; 16];
        for y in 0..4 {
            for x in 0..4 {
                if (x + y) % 2 == 0 {
                    board[y * 4 + x] = 255;
                }
            }
        }
        let down = resize_nearest(&board, 4, 4, 2, 2);
        assert_eq!(down, vec![255, 255, 255, 255]);

        // Shifting the board by one column flips every sampled corner.
        let mut shifted = vec![0u8; 16];
        for y in 0..4 {
            for x in 0..4 {
                if (x + y) % 2 == 1 {
                    shifted[y * 4 + x] = 255;
                }
            }
        }
        let down = resize_nearest(&shifted, 4, 4, 2, 2);
        assert_eq!(down, vec![0, 0, 0, 0]);
    }

    #[test]
    fn load_pair_dimension_mismatch_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let image_path = dir.path().join("s.ppm");
        let mask_path = dir.path().join("s.pgm");
        write_ppm(&image_path, 8, 8, &[0u8; 8 * 8 * 3]).unwrap();
        write_pgm(&mask_path, 4, 8, &[0u8; 32]).unwrap();
        assert!(matches!(
            load_pair(&image_path, &mask_path, 8),
            Err(DataError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn load_pair_rejects_rgb_mask() {
        let dir = tempfile::tempdir().unwrap();
        let image_path = dir.path().join("s.ppm");
        let mask_path = dir.path().join("m.ppm");
        write_ppm(&image_path, 4, 4, &[0u8; 48]).unwrap();
        write_ppm(&mask_path, 4, 4, &[0u8; 48]).unwrap();
        assert!(matches!(
            load_pair(&image_path, &mask_path, 4),
            Err(DataError::Format { .. })
        ));
    }

    #[test]
    fn export_then_load_directory_round_trips_masks_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..4).map(|i| generate_sample(9, i, 32)).collect();
        export_dataset(&samples, dir.path()).unwrap();
        let loaded = load_directory(dir.path(), 32).unwrap();
        assert_eq!(loaded.len(), 4);
        for (original, restored) in samples.iter().zip(&loaded) {
            assert_eq!(original.id, restored.id);
            // Masks are {0,1} -> {0,255} -> binarize: exact identity.
            assert_eq!(original.mask.to_vec(), restored.mask.to_vec());
            // Images round through u8 quantization.
            let max_err = original
                .image
                .values()
                .iter()
                .zip(restored.image.values().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-12, "{max_err}");
        }
    }

    #[test]
    fn batches_carry_invariants() {
        let samples: Vec<Sample> = (0..5).map(|i| generate_sample(2, i, 16)).collect();
        let batches = make_batches(&samples, 2);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].batch_size(), 2);
        assert_eq!(batches[2].batch_size(), 1);
        for batch in &batches {
            batch.validate().unwrap();
        }
    }

    #[test]
    fn dataset_spec_validation() {
        let mut spec = DatasetSpec {
            source: DataSource::Synthetic,
            count: 8,
            image_size: 32,
            train_fraction: 0.75,
            seed: 1,
        };
        assert!(spec.validate().is_ok());
        spec.count = 1;
        assert!(spec.validate().is_err());
        spec.count = 8;
        spec.train_fraction = 1.0;
        assert!(spec.validate().is_err());
        spec.train_fraction = 0.5;
        spec.image_size = 4;
        assert!(spec.validate().is_err());
    }
}
