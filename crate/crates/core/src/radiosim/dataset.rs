use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::propagation::{make_radio_image_with, synth_csi_at, CsiFrame};
use super::{Environment, ImageShape, ShiftSpec};
use crate::error::{Error, Result};
use crate::seed;

pub const FORMAT_VERSION: &str = "1";

const META_FILE: &str = "meta.json";
const SAMPLES_FILE: &str = "samples.bin";

/// `K x N x M` magnitudes, row-major with the antenna axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct RadioImage {
    pub shape: ImageShape,
    pub data: Vec<f32>,
}

impl RadioImage {
    pub fn at(&self, k: usize, n: usize, m: usize) -> f32 {
        self.data[(k * self.shape.subcarriers + n) * self.shape.antennas + m]
    }
}

/// Everything the samples were generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub environment: Environment,
    pub shift: ShiftSpec,
    pub seed: u64,
    pub samples_per_rp: usize,
    pub normalized: bool,
    pub off_grid: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Per-image zero mean, unit variance.
    pub normalize: bool,
    /// Measure each sample at a point jittered uniformly within half the
    /// reference-point spacing; the true position is kept per sample.
    pub off_grid: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            off_grid: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintDataset {
    pub shape: ImageShape,
    pub images: Vec<RadioImage>,
    /// Reference-point index per image; absent for an unlabeled domain.
    pub labels: Option<Vec<usize>>,
    /// True measurement positions when they differ from the grid.
    pub positions: Option<Vec<[f64; 2]>>,
    pub rp_coords: Vec<[f64; 2]>,
    pub provenance: Provenance,
}

impl FingerprintDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_rps(&self) -> usize {
        self.rp_coords.len()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// True position of sample `i`, if known.
    pub fn truth(&self, i: usize) -> Option<[f64; 2]> {
        if let Some(p) = &self.positions {
            return p.get(i).copied();
        }
        let label = *self.labels.as_ref()?.get(i)?;
        self.rp_coords.get(label).copied()
    }

    /// The same samples with labels and positions removed.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            positions: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::invalid("dataset", "no images"));
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.shape != self.shape || img.data.len() != self.shape.len() {
                return Err(Error::shape(
                    format!("image {i}"),
                    format!("{:?}", self.shape),
                    format!("{:?} with {} values", img.shape, img.data.len()),
                ));
            }
            if let Some(bad) = img.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "dataset",
                    format!("image {i} holds non-finite value {bad}"),
                ));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.len() {
                return Err(Error::shape(
                    "labels",
                    self.images.len().to_string(),
                    labels.len().to_string(),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_rps()) {
                return Err(Error::invalid(
                    "dataset",
                    format!("label {bad} outside [0, {})", self.num_rps()),
                ));
            }
        }
        if let Some(p) = &self.positions {
            if p.len() != self.images.len() {
                return Err(Error::shape(
                    "positions",
                    self.images.len().to_string(),
                    p.len().to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// `samples_per_rp` images per reference point, reference-point major.
pub fn generate_domain(
    env: &Environment,
    shift: &ShiftSpec,
    samples_per_rp: usize,
    labeled: bool,
    seed: u64,
) -> Result<FingerprintDataset> {
    generate_domain_with(
        env,
        shift,
        samples_per_rp,
        labeled,
        seed,
        GenerateOptions::default(),
    )
}

pub fn generate_domain_with(
    env: &Environment,
    shift: &ShiftSpec,
    samples_per_rp: usize,
    labeled: bool,
    seed: u64,
    options: GenerateOptions,
) -> Result<FingerprintDataset> {
    env.validate()?;
    shift.validate(env)?;
    if samples_per_rp == 0 {
        return Err(Error::invalid("samples per RP", "must be at least 1"));
    }
    let count = env.num_rps() * samples_per_rp;
    let mut images = Vec::with_capacity(count);
    let mut positions = Vec::with_capacity(count);
    let jitter_seed = seed::named(seed, "off-grid");
    for rp in 0..env.num_rps() {
        for s in 0..samples_per_rp {
            let index = (rp * samples_per_rp + s) as u64;
            let mut pos = env.rp_coords[rp];
            if options.off_grid {
                let half = env.rp_spacing / 2.0;
                let mut jitter = seed::rng(seed::mix(jitter_seed, index));
                pos[0] += jitter.gen_range(-half..=half);
                pos[1] += jitter.gen_range(-half..=half);
            }
            let mut rng = seed::rng(seed::mix(seed, index));
            let per_ap = (0..env.ap_coords.len())
                .map(|ap| synth_csi_at(env, rp, ap, pos, shift, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let per_antenna: Vec<CsiFrame> = (0..env.antennas)
                .map(|m| {
                    let frames: Vec<CsiFrame> = per_ap.iter().map(|f| f[m].clone()).collect();
                    CsiFrame::concat_subcarriers(&frames)
                })
                .collect();
            images.push(make_radio_image_with(&per_antenna, options.normalize)?);
            positions.push(pos);
        }
    }
    let labels = labeled.then(|| (0..count).map(|i| i / samples_per_rp).collect());
    let ds = FingerprintDataset {
        shape: env.image_shape(),
        images,
        labels,
        positions: (options.off_grid && labeled).then_some(positions),
        rp_coords: env.rp_coords.clone(),
        provenance: Provenance {
            environment: env.clone(),
            shift: shift.clone(),
            seed,
            samples_per_rp,
            normalized: options.normalize,
            off_grid: options.off_grid,
        },
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format_version: String,
    /// `[K, N, M]`.
    shape: [usize; 3],
    num_samples: usize,
    num_rps: usize,
    rp_coords: Vec<[f64; 2]>,
    labels: Option<Vec<usize>>,
    positions: Option<Vec<[f64; 2]>>,
    provenance: Provenance,
}

pub fn write_dataset(ds: &FingerprintDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        format_version: FORMAT_VERSION.to_string(),
        shape: [ds.shape.frames, ds.shape.subcarriers, ds.shape.antennas],
        num_samples: ds.len(),
        num_rps: ds.num_rps(),
        rp_coords: ds.rp_coords.clone(),
        labels: ds.labels.clone(),
        positions: ds.positions.clone(),
        provenance: ds.provenance.clone(),
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&meta_path, e))?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    let mut blob = Vec::with_capacity(ds.len() * ds.shape.len() * 4);
    for img in &ds.images {
        for v in &img.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let samples_path = dir.join(SAMPLES_FILE);
    fs::write(&samples_path, blob).map_err(|e| Error::io(&samples_path, e))
}

pub fn read_dataset(dir: &Path) -> Result<FingerprintDataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::invalid(
            "dataset",
            format!(
                "format version {} (expected {FORMAT_VERSION})",
                meta.format_version
            ),
        ));
    }
    if meta.rp_coords.len() != meta.num_rps {
        return Err(Error::shape(
            "rp_coords",
            meta.num_rps.to_string(),
            meta.rp_coords.len().to_string(),
        ));
    }
    let shape = ImageShape {
        frames: meta.shape[0],
        subcarriers: meta.shape[1],
        antennas: meta.shape[2],
    };
    let samples_path = dir.join(SAMPLES_FILE);
    let blob = fs::read(&samples_path).map_err(|e| Error::io(&samples_path, e))?;
    let expected = meta.num_samples * shape.len();
    if blob.len() != expected * 4 {
        return Err(Error::shape(
            "samples.bin",
            format!("{expected} elements"),
            format!("{} elements ({} bytes)", blob.len() / 4, blob.len()),
        ));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let images = if shape.is_empty() {
        Vec::new()
    } else {
        values
            .chunks_exact(shape.len())
            .map(|c| RadioImage {
                shape,
                data: c.to_vec(),
            })
            .collect()
    };
    let ds = FingerprintDataset {
        shape,
        images,
        labels: meta.labels,
        positions: meta.positions,
        rp_coords: meta.rp_coords,
        provenance: meta.provenance,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radiosim::{preset_environment, Preset};

    fn small_env() -> Environment {
        let mut env = preset_environment(Preset::Hall, 0.1).unwrap();
        env.rp_coords.truncate(5);
        env.frames = 4;
        env.subcarriers = 6;
        env
    }

    #[test]
    fn labeled_counts_and_shape() {
        let env = small_env();
        let ds = generate_domain(&env, &ShiftSpec::none(1.0), 3, true, 7).unwrap();
        assert_eq!(ds.len(), 15);
        assert_eq!(ds.labels.as_ref().unwrap()[..4], [0, 0, 0, 1]);
        assert_eq!(
            ds.shape,
            ImageShape {
                frames: 4,
                subcarriers: 12,
                antennas: 3
            }
        );
        assert_eq!(ds.truth(4), Some(env.rp_coords[1]));
    }

    #[test]
    fn unlabeled_has_no_labels() {
        let ds = generate_domain(&small_env(), &ShiftSpec::none(1.0), 2, false, 7).unwrap();
        assert!(ds.labels.is_none());
        assert_eq!(ds.truth(0), None);
    }

    #[test]
    fn same_seed_same_dataset() {
        let env = small_env();
        let a = generate_domain(&env, &ShiftSpec::none(1.0), 2, true, 3).unwrap();
        let b = generate_domain(&env, &ShiftSpec::none(1.0), 2, true, 3).unwrap();
        let c = generate_domain(&env, &ShiftSpec::none(1.0), 2, true, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn global_shift_changes_every_sample() {
        let env = small_env();
        let opts = GenerateOptions {
            normalize: false,
            off_grid: false,
        };
        let base = generate_domain_with(&env, &ShiftSpec::none(1.0), 2, true, 3, opts).unwrap();
        let shift = ShiftSpec {
            global_exponent_delta: 0.3,
            ..ShiftSpec::none(1.0)
        };
        let moved = generate_domain_with(&env, &shift, 2, true, 3, opts).unwrap();
        for (a, b) in base.images.iter().zip(&moved.images) {
            assert_ne!(a, b);
        }
    }

    #[test]
    fn off_grid_positions_stay_within_half_spacing() {
        let env = small_env();
        let opts = GenerateOptions {
            normalize: true,
            off_grid: true,
        };
        let ds = generate_domain_with(&env, &ShiftSpec::none(1.0), 4, true, 5, opts).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for (i, &label) in labels.iter().enumerate() {
            let p = ds.truth(i).unwrap();
            let rp = env.rp_coords[label];
            assert!((p[0] - rp[0]).abs() <= 0.4 + 1e-12 && (p[1] - rp[1]).abs() <= 0.4 + 1e-12);
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_domain(&small_env(), &ShiftSpec::none(1.0), 2, true, 1).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn null_labels_read_as_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_domain(&small_env(), &ShiftSpec::none(1.0), 2, false, 1).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        assert!(text.contains("\"labels\": null"));
        assert!(!read_dataset(dir.path()).unwrap().is_labeled());
    }

    #[test]
    fn truncated_blob_names_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_domain(&small_env(), &ShiftSpec::none(1.0), 1, true, 1).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(SAMPLES_FILE);
        let mut blob = fs::read(&path).unwrap();
        blob.truncate(blob.len() - 8);
        fs::write(&path, blob).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        let expected = ds.len() * ds.shape.len();
        assert!(err.contains(&format!("{expected} elements")), "{err}");
        assert!(err.contains(&format!("{} elements", expected - 2)), "{err}");
    }
}
