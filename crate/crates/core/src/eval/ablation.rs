use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndcore::Scalar;

use super::{evaluate_model, ErrorStats};
use crate::daan::{pretrain, train, DaanConfig, DaanModel, EpochRecord, MuMode, PredictMode};
use crate::error::{Error, Result};
use crate::radiosim::FingerprintDataset;
use crate::seed;

/// One configuration of the ablation matrix.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Arm {
    /// Supervised source training only (γ = 0, λ = 0).
    SourceOnly,
    Adapt {
        mu: MuMode,
        pus: bool,
    },
}

impl Arm {
    /// Source-only, then {μ = 0, μ = 1, μ = 0.5, dynamic} with and without
    /// uncertainty suppression.
    pub fn all() -> Vec<Arm> {
        let mut arms = vec![Arm::SourceOnly];
        for mu in [
            MuMode::Fixed(0.0),
            MuMode::Fixed(1.0),
            MuMode::Fixed(0.5),
            MuMode::Dynamic,
        ] {
            for pus in [true, false] {
                arms.push(Arm::Adapt { mu, pus });
            }
        }
        arms
    }

    pub fn name(&self) -> String {
        match *self {
            Arm::SourceOnly => "source-only".to_string(),
            Arm::Adapt { mu, pus } => {
                let base = match mu {
                    MuMode::Fixed(0.0) => "gda".to_string(),
                    MuMode::Fixed(1.0) => "lda".to_string(),
                    MuMode::Fixed(0.5) => "jda".to_string(),
                    MuMode::Fixed(v) => format!("fixed{v}"),
                    MuMode::Dynamic => "dynamic".to_string(),
                };
                format!("{base}-{}", if pus { "pus" } else { "nopus" })
            }
        }
    }

    pub fn config(&self, base: &DaanConfig) -> DaanConfig {
        match *self {
            Arm::SourceOnly => base.clone().source_only(),
            Arm::Adapt { mu, pus } => DaanConfig {
                mu_mode: mu,
                pus_enabled: pus,
                ..base.clone()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub stats: ErrorStats,
    pub final_mu: f64,
    pub history: Vec<EpochRecord>,
    /// Mean error with suppression minus without, for the same μ setting.
    pub pus_delta_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, arm: Arm) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,median,p90,rmse,mae,std,final_mu,pus_delta_mae\n");
        for r in &self.rows {
            let s = &r.stats;
            let delta = r.pus_delta_mae.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.arm.name(),
                r.seed,
                s.median,
                s.p90,
                s.rmse,
                s.mae,
                s.std,
                r.final_mu,
                delta
            );
        }
        out
    }
}

pub fn write_summary_csv(table: &AblationTable, path: &Path) -> Result<()> {
    fs::write(path, table.to_csv()).map_err(|e| Error::io(path, e))
}

/// Runs all nine arms.
pub fn ablate<T: Scalar>(
    source: &FingerprintDataset,
    target: &FingerprintDataset,
    queries: &FingerprintDataset,
    base: &DaanConfig,
    seed: u64,
) -> Result<AblationTable> {
    ablate_arms::<T>(
        source,
        target,
        queries,
        base,
        seed,
        &Arm::all(),
        PredictMode::Argmax,
    )
}

/// Trains and evaluates each arm from the same initial weights and batch
/// order, so arms differ only in their configuration. Source pretraining
/// does not depend on the arm, so it runs once and is shared.
pub fn ablate_arms<T: Scalar>(
    source: &FingerprintDataset,
    target: &FingerprintDataset,
    queries: &FingerprintDataset,
    base: &DaanConfig,
    seed: u64,
    arms: &[Arm],
    mode: PredictMode,
) -> Result<AblationTable> {
    let mut initial = DaanModel::<T>::new(base.clone(), source.shape, seed::named(seed, "init"))?;
    let shuffle = seed::named(seed, "shuffle");
    let warmup = pretrain(&mut initial, source, base, seed::named(shuffle, "pretrain"))?;
    let unlabeled;
    let target = if target.is_labeled() {
        unlabeled = target.without_labels();
        &unlabeled
    } else {
        target
    };
    let mut table = AblationTable::default();
    for &arm in arms {
        let mut model = initial.clone();
        let config = DaanConfig {
            pretrain_epochs: 0,
            ..arm.config(base)
        };
        let mut state = train(&mut model, source, target, &config, shuffle)?;
        state.history.splice(0..0, warmup.iter().cloned());
        let stats = evaluate_model(&mut model, queries, mode)?;
        table.rows.push(AblationRow {
            arm,
            seed,
            stats,
            final_mu: state.mu,
            history: state.history,
            pus_delta_mae: None,
        });
    }
    let maes: Vec<(Arm, f64)> = table.rows.iter().map(|r| (r.arm, r.stats.mae)).collect();
    for row in &mut table.rows {
        if let Arm::Adapt { mu, pus: true } = row.arm {
            let off = maes
                .iter()
                .find(|(a, _)| *a == Arm::Adapt { mu, pus: false });
            row.pus_delta_mae = off.map(|(_, mae)| row.stats.mae - mae);
        }
    }
    Ok(table)
}
