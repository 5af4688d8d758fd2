use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::radiosim::{
    generate_domain, preset_environment, Environment, FingerprintDataset, Preset, ShiftSpec,
};
use crate::seed;

/// Preset scale of the standard benchmark (19 reference points of the hall).
pub const BENCHMARK_SCALE: f64 = 0.1;
pub const SOURCE_SAMPLES_PER_RP: usize = 40;
pub const TARGET_SAMPLES_PER_RP: usize = 40;
pub const QUERY_SAMPLES_PER_RP: usize = 10;
pub const NOISE_DB: f64 = 1.0;
pub const GAIN_DB: f64 = 6.0;
pub const EXPONENT_DELTA: f64 = 0.3;
pub const LOCAL_PERTURB_DB: f64 = 3.0;
pub const LOCAL_FRACTION: f64 = 0.3;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkShift {
    None,
    /// Gain and path-loss exponent change everywhere.
    Global,
    /// Per-subcarrier perturbation at a subset of reference points.
    Local,
    Mixed,
}

impl FromStr for BenchmarkShift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::invalid(
                "shift",
                format!("'{other}' (expected none, global, local or mixed)"),
            )),
        }
    }
}

impl fmt::Display for BenchmarkShift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Global => "global",
            Self::Local => "local",
            Self::Mixed => "mixed",
        })
    }
}

/// Strength of each shift component; a shift kind selects which apply.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ShiftMagnitudes {
    pub gain_db: f64,
    pub exponent_delta: f64,
    pub local_perturb_db: f64,
    /// Fraction of reference points that are locally perturbed.
    pub local_fraction: f64,
    pub noise_db: f64,
}

impl Default for ShiftMagnitudes {
    fn default() -> Self {
        Self {
            gain_db: GAIN_DB,
            exponent_delta: EXPONENT_DELTA,
            local_perturb_db: LOCAL_PERTURB_DB,
            local_fraction: LOCAL_FRACTION,
            noise_db: NOISE_DB,
        }
    }
}

impl BenchmarkShift {
    /// The shift applied to the target environment.
    pub fn spec(self, env: &Environment, shift_seed: u64) -> ShiftSpec {
        self.spec_with(env, shift_seed, &ShiftMagnitudes::default())
    }

    pub fn spec_with(self, env: &Environment, shift_seed: u64, m: &ShiftMagnitudes) -> ShiftSpec {
        let global = matches!(self, Self::Global | Self::Mixed);
        let local = matches!(self, Self::Local | Self::Mixed);
        ShiftSpec {
            global_gain_db: if global { m.gain_db } else { 0.0 },
            global_exponent_delta: if global { m.exponent_delta } else { 0.0 },
            local_rp_set: if local {
                ShiftSpec::random_local_set(env.num_rps(), m.local_fraction, shift_seed)
            } else {
                Vec::new()
            },
            local_perturb_db: if local { m.local_perturb_db } else { 0.0 },
            noise_sigma_db: m.noise_db,
            seed: shift_seed,
        }
    }
}

/// Labeled source, unlabeled target and labeled target queries.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub environment: Environment,
    pub shift: ShiftSpec,
    pub source: FingerprintDataset,
    pub target: FingerprintDataset,
    pub queries: FingerprintDataset,
}

/// The hall preset at scale 0.1 with the given target shift. Every dataset
/// derives from `seed`.
pub fn standard_benchmark(shift: BenchmarkShift, seed: u64) -> Result<Benchmark> {
    benchmark_with(shift, seed, &ShiftMagnitudes::default())
}

pub fn benchmark_with(
    shift: BenchmarkShift,
    seed: u64,
    magnitudes: &ShiftMagnitudes,
) -> Result<Benchmark> {
    let env = preset_environment(Preset::Hall, BENCHMARK_SCALE)?;
    let spec = shift.spec_with(&env, seed::named(seed, "shift"), magnitudes);
    let source = generate_domain(
        &env,
        &ShiftSpec::none(magnitudes.noise_db),
        SOURCE_SAMPLES_PER_RP,
        true,
        seed::named(seed, "source"),
    )?;
    let target = generate_domain(
        &env,
        &spec,
        TARGET_SAMPLES_PER_RP,
        false,
        seed::named(seed, "target"),
    )?;
    let queries = generate_domain(
        &env,
        &spec,
        QUERY_SAMPLES_PER_RP,
        true,
        seed::named(seed, "queries"),
    )?;
    Ok(Benchmark {
        environment: env,
        shift: spec,
        source,
        target,
        queries,
    })
}
