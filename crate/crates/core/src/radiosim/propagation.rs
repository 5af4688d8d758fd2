use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use super::dataset::RadioImage;
use super::{Environment, ImageShape, ShiftSpec};
use crate::error::{Error, Result};
use crate::seed;

/// Spacing between reported subcarrier groups (30 groups over ~40 MHz).
pub const SUBCARRIER_SPACING_HZ: f64 = 1.25e6;
/// Largest excess delay of a multipath tap.
pub const MAX_EXCESS_DELAY_S: f64 = 150e-9;
/// Tap `l` carries power proportional to `exp(-TAP_DECAY * l)`.
pub const TAP_DECAY: f64 = 0.5;
/// Standard deviation of the per-frame tap phase jitter.
pub const FRAME_JITTER_RAD: f64 = 0.05;

/// Path loss in dB at distance `d` (clamped to at least `d0 / 10`).
pub fn path_loss_db(env: &Environment, d: f64, shadow_draw: f64) -> f64 {
    loss_with_exponent(env, env.pl_exponent, d, shadow_draw)
}

fn loss_with_exponent(env: &Environment, exponent: f64, d: f64, shadow_draw: f64) -> f64 {
    let d = d.max(env.d0 / 10.0);
    env.pl_ref_db + 10.0 * exponent * (d / env.d0).log10() + env.shadowing_sigma_db * shadow_draw
}

/// Inverts [`path_loss_db`] at zero shadowing.
pub fn distance_for_loss(env: &Environment, loss_db: f64) -> f64 {
    env.d0 * 10f64.powf((loss_db - env.pl_ref_db) / (10.0 * env.pl_exponent))
}

/// Width of the distance interval that a received-strength change of
/// `delta_rss_db` spans at distance `d`.
pub fn distance_uncertainty(env: &Environment, d: f64, delta_rss_db: f64) -> f64 {
    distance_for_loss(env, path_loss_db(env, d, 0.0) + delta_rss_db) - d
}

/// `K x N` complex channel response of one antenna, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiFrame {
    pub frames: usize,
    pub subcarriers: usize,
    pub data: Vec<Complex64>,
}

impl CsiFrame {
    pub fn at(&self, k: usize, n: usize) -> Complex64 {
        self.data[k * self.subcarriers + n]
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).sum::<f64>() / self.data.len() as f64
    }

    /// Appends `other`'s subcarriers to each frame of `self`.
    pub(crate) fn concat_subcarriers(frames: &[CsiFrame]) -> CsiFrame {
        let k = frames[0].frames;
        let n: usize = frames.iter().map(|f| f.subcarriers).sum();
        let mut data = Vec::with_capacity(k * n);
        for row in 0..k {
            for f in frames {
                data.extend_from_slice(&f.data[row * f.subcarriers..(row + 1) * f.subcarriers]);
            }
        }
        CsiFrame {
            frames: k,
            subcarriers: n,
            data,
        }
    }
}

/// Static structure of one (reference point, access point) link.
struct Link {
    shadow: f64,
    amplitudes: Vec<f64>,
    delays: Vec<f64>,
    phases: Vec<f64>,
    sin_aoa: Vec<f64>,
}

impl Link {
    fn new(env: &Environment, rp: usize, ap: usize) -> Self {
        let stream = (rp as u64) << 20 | ap as u64;
        let mut rng = seed::rng(seed::mix(env.layout_seed, stream));
        let shadow: f64 = rng.sample(StandardNormal);
        let taps = env.multipath_taps;
        let powers: Vec<f64> = (0..taps).map(|l| (-TAP_DECAY * l as f64).exp()).collect();
        let total: f64 = powers.iter().sum();
        let amplitudes = powers.iter().map(|p| (p / total).sqrt()).collect();
        let mut delays: Vec<f64> = (0..taps)
            .map(|l| {
                if l == 0 {
                    0.0
                } else {
                    rng.gen_range(0.0..MAX_EXCESS_DELAY_S)
                }
            })
            .collect();
        delays[1..].sort_by(f64::total_cmp);
        let phases = (0..taps).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let sin_aoa = (0..taps)
            .map(|_| rng.gen_range(-PI / 2.0..PI / 2.0).sin())
            .collect();
        Self {
            shadow,
            amplitudes,
            delays,
            phases,
            sin_aoa,
        }
    }
}

/// Per-subcarrier linear gains of a local perturbation, persistent for a
/// given shift seed and link.
fn local_gains(env: &Environment, shift: &ShiftSpec, rp: usize, ap: usize) -> Option<Vec<f64>> {
    if !shift.is_local(rp) {
        return None;
    }
    let stream = (rp as u64) << 20 | ap as u64;
    let mut rng = seed::rng(seed::mix(seed::named(shift.seed, "local"), stream));
    Some(
        (0..env.subcarriers)
            .map(|_| {
                let db: f64 = rng.sample::<f64, _>(StandardNormal) * shift.local_perturb_db;
                10f64.powf(db / 20.0)
            })
            .collect(),
    )
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Simulated CSI of one link: one `K x N` frame per antenna.
///
/// Randomness drawn from `rng` (frame jitter, measurement noise) is the
/// same sequence for every link and shift, so two calls differing only in
/// shift parameters see identical noise.
pub fn synth_csi<R: Rng + ?Sized>(
    env: &Environment,
    rp: usize,
    ap: usize,
    shift: &ShiftSpec,
    rng: &mut R,
) -> Result<Vec<CsiFrame>> {
    let pos = *env.rp_coords.get(rp).ok_or_else(|| {
        Error::invalid(
            "reference point",
            format!("{rp} outside [0, {})", env.num_rps()),
        )
    })?;
    synth_csi_at(env, rp, ap, pos, shift, rng)
}

pub(crate) fn synth_csi_at<R: Rng + ?Sized>(
    env: &Environment,
    rp: usize,
    ap: usize,
    position: [f64; 2],
    shift: &ShiftSpec,
    rng: &mut R,
) -> Result<Vec<CsiFrame>> {
    let ap_pos = *env.ap_coords.get(ap).ok_or_else(|| {
        Error::invalid(
            "access point",
            format!("{ap} outside [0, {})", env.ap_coords.len()),
        )
    })?;
    let link = Link::new(env, rp, ap);
    let d = distance(position, ap_pos);
    let loss = loss_with_exponent(
        env,
        env.pl_exponent + shift.global_exponent_delta,
        d,
        link.shadow,
    ) - shift.global_gain_db;
    let amplitude = 10f64.powf(-loss / 20.0);
    let gains = local_gains(env, shift, rp, ap);

    let (k_frames, n_sub, taps) = (env.frames, env.subcarriers, env.multipath_taps);
    let jitter: Vec<f64> = (0..k_frames * taps)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * FRAME_JITTER_RAD)
        .collect();
    let center = (n_sub as f64 - 1.0) / 2.0;
    // Delay rotation of tap l at subcarrier n, row-major by subcarrier.
    let rotation: Vec<Complex64> = (0..n_sub)
        .flat_map(|n| {
            let f = (n as f64 - center) * SUBCARRIER_SPACING_HZ;
            let link = &link;
            (0..taps).map(move |l| {
                Complex64::from_polar(link.amplitudes[l], -2.0 * PI * f * link.delays[l])
            })
        })
        .collect();

    let mut out = Vec::with_capacity(env.antennas);
    for m in 0..env.antennas {
        let mut data = Vec::with_capacity(k_frames * n_sub);
        for k in 0..k_frames {
            let base: Vec<Complex64> = (0..taps)
                .map(|l| {
                    Complex64::from_polar(
                        1.0,
                        link.phases[l] + jitter[k * taps + l] + PI * m as f64 * link.sin_aoa[l],
                    )
                })
                .collect();
            for n in 0..n_sub {
                let rot = &rotation[n * taps..(n + 1) * taps];
                let h: Complex64 = base.iter().zip(rot).map(|(b, r)| b * r).sum();
                let noise_db: f64 = rng.sample::<f64, _>(StandardNormal) * shift.noise_sigma_db;
                let mut gain = amplitude * 10f64.powf(noise_db / 20.0);
                if let Some(g) = &gains {
                    gain *= g[n];
                }
                data.push(h * gain);
            }
        }
        out.push(CsiFrame {
            frames: k_frames,
            subcarriers: n_sub,
            data,
        });
    }
    Ok(out)
}

/// Stacks per-antenna magnitudes into a `K x N x M` image normalized to
/// zero mean and unit variance.
pub fn make_radio_image(frames: &[CsiFrame]) -> Result<RadioImage> {
    make_radio_image_with(frames, true)
}

pub fn make_radio_image_with(frames: &[CsiFrame], normalize: bool) -> Result<RadioImage> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("radio image", "no antenna frames"))?;
    let (k, n, m) = (first.frames, first.subcarriers, frames.len());
    for (i, f) in frames.iter().enumerate() {
        if f.frames != k || f.subcarriers != n || f.data.len() != k * n {
            return Err(Error::shape(
                format!("antenna frame {i}"),
                format!("{k}x{n}"),
                format!(
                    "{}x{} with {} values",
                    f.frames,
                    f.subcarriers,
                    f.data.len()
                ),
            ));
        }
    }
    let mut mags = vec![0.0f64; k * n * m];
    for (a, f) in frames.iter().enumerate() {
        for (i, c) in f.data.iter().enumerate() {
            mags[i * m + a] = c.norm();
        }
    }
    if normalize {
        let len = mags.len() as f64;
        let mean = mags.iter().sum::<f64>() / len;
        let std = (mags.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt();
        if std <= 1e-9 * mean.abs() || std == 0.0 {
            mags.iter_mut().for_each(|v| *v = 0.0);
        } else {
            mags.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
    }
    Ok(RadioImage {
        shape: ImageShape {
            frames: k,
            subcarriers: n,
            antennas: m,
        },
        data: mags.into_iter().map(|v| v as f32).collect(),
    })
}
