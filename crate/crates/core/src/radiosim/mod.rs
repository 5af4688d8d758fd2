//! Synthetic CSI fingerprints with controllable domain shift.
//!
//! Received power follows a log-distance path-loss model with static
//! per-link shadowing; small-scale structure comes from a fixed set of
//! multipath taps per (reference point, access point) link. A [`ShiftSpec`]
//! perturbs the environment either everywhere (gain, path-loss exponent)
//! or only at chosen reference points.

mod dataset;
mod presets;
mod propagation;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    generate_domain, generate_domain_with, read_dataset, write_dataset, FingerprintDataset,
    GenerateOptions, Provenance, RadioImage, FORMAT_VERSION,
};
pub use presets::{preset_environment, Preset};
pub use propagation::{
    distance_for_loss, distance_uncertainty, make_radio_image, make_radio_image_with, path_loss_db,
    synth_csi, CsiFrame, FRAME_JITTER_RAD, MAX_EXCESS_DELAY_S, SUBCARRIER_SPACING_HZ, TAP_DECAY,
};

/// Physical layout and radio parameters of one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub name: String,
    /// Reference point coordinates in meters.
    pub rp_coords: Vec<[f64; 2]>,
    /// Access point coordinates in meters.
    pub ap_coords: Vec<[f64; 2]>,
    /// Distance between adjacent reference points, meters.
    pub rp_spacing: f64,
    pub pl_exponent: f64,
    /// Path loss at the reference distance, dB.
    pub pl_ref_db: f64,
    /// Reference distance, meters.
    pub d0: f64,
    pub shadowing_sigma_db: f64,
    pub multipath_taps: usize,
    pub subcarriers: usize,
    pub antennas: usize,
    pub frames: usize,
    /// Seeds the static per-link structure (shadowing, taps).
    pub layout_seed: u64,
}

/// `(frames, subcarriers, antennas)` of a radio image.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub frames: usize,
    pub subcarriers: usize,
    pub antennas: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.frames * self.subcarriers * self.antennas
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Environment {
    pub fn num_rps(&self) -> usize {
        self.rp_coords.len()
    }

    /// Shape of the images generated here: per-AP subcarriers are
    /// concatenated, so the subcarrier axis is `N * num_aps`.
    pub fn image_shape(&self) -> ImageShape {
        ImageShape {
            frames: self.frames,
            subcarriers: self.subcarriers * self.ap_coords.len(),
            antennas: self.antennas,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("environment", reason));
        if self.rp_coords.is_empty() {
            return bad("no reference points".into());
        }
        if self.ap_coords.is_empty() {
            return bad("no access points".into());
        }
        for (i, a) in self.rp_coords.iter().enumerate() {
            if self.rp_coords[..i].contains(a) {
                return bad(format!(
                    "reference point {i} duplicates an earlier one at {a:?}"
                ));
            }
        }
        if self.d0.is_nan() || self.d0 <= 0.0 {
            return bad(format!(
                "reference distance must be positive, got {}",
                self.d0
            ));
        }
        if !(1.5..=6.0).contains(&self.pl_exponent) {
            return bad(format!(
                "path-loss exponent {} outside [1.5, 6]",
                self.pl_exponent
            ));
        }
        if self.shadowing_sigma_db < 0.0 {
            return bad("shadowing sigma must be non-negative".into());
        }
        if self.antennas == 0
            || self.subcarriers == 0
            || self.frames == 0
            || self.multipath_taps == 0
        {
            return bad("frames, subcarriers, antennas and taps must all be at least 1".into());
        }
        Ok(())
    }
}

/// Difference between the training (source) and deployment (target)
/// radio environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Gain applied at every location, dB.
    pub global_gain_db: f64,
    /// Added to the path-loss exponent everywhere.
    pub global_exponent_delta: f64,
    /// Reference points whose channel is locally perturbed.
    pub local_rp_set: Vec<usize>,
    /// Standard deviation of the per-subcarrier perturbation, dB.
    pub local_perturb_db: f64,
    /// Standard deviation of per-measurement log-normal noise, dB.
    pub noise_sigma_db: f64,
    /// Seeds the local perturbation pattern.
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            global_gain_db: 0.0,
            global_exponent_delta: 0.0,
            local_rp_set: Vec::new(),
            local_perturb_db: 0.0,
            noise_sigma_db: 0.0,
            seed: 0,
        }
    }
}

impl ShiftSpec {
    /// No environmental change, only measurement noise.
    pub fn none(noise_sigma_db: f64) -> Self {
        Self {
            noise_sigma_db,
            ..Self::default()
        }
    }

    pub fn is_local(&self, rp: usize) -> bool {
        self.local_perturb_db > 0.0 && self.local_rp_set.contains(&rp)
    }

    /// Picks `round(fraction * num_rps)` distinct reference points with the
    /// shift seed.
    pub fn random_local_set(num_rps: usize, fraction: f64, seed: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let count = ((num_rps as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        let mut idx: Vec<usize> = (0..num_rps).collect();
        idx.shuffle(&mut crate::seed::rng(crate::seed::named(seed, "local-set")));
        let mut chosen: Vec<usize> = idx.into_iter().take(count).collect();
        chosen.sort_unstable();
        chosen
    }

    pub fn validate(&self, env: &Environment) -> Result<()> {
        if let Some(&bad) = self.local_rp_set.iter().find(|&&r| r >= env.num_rps()) {
            return Err(Error::invalid(
                "shift",
                format!("local reference point {bad} outside [0, {})", env.num_rps()),
            ));
        }
        if self.local_perturb_db < 0.0 || self.noise_sigma_db < 0.0 || self.global_gain_db.is_nan()
        {
            return Err(Error::invalid("shift", "scales must be non-negative"));
        }
        let n = env.pl_exponent + self.global_exponent_delta;
        if !(1.0..=7.0).contains(&n) {
            return Err(Error::invalid(
                "shift",
                format!("shifted path-loss exponent {n} is not physical"),
            ));
        }
        Ok(())
    }
}
