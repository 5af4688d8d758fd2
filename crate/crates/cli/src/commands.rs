use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dadloc::daan::{load_checkpoint, save_checkpoint, train, DaanConfig, PredictMode};
use dadloc::eval::{
    ablate, evaluate_model, write_metrics_csv, write_metrics_json, write_summary_csv,
    BenchmarkShift, ShiftMagnitudes,
};
use dadloc::radiosim::{
    generate_domain_with, preset_environment, read_dataset, write_dataset, FingerprintDataset,
    GenerateOptions, Preset, ShiftSpec, FORMAT_VERSION,
};
use dadloc::{seed, DaanModel64};
use ndcore::gradcheck::run_suite;
use ndcore::OpKind;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{parse_section, resolve, Layers, Section};

fn check_version(found: &str) -> Result<()> {
    ensure!(
        found == FORMAT_VERSION,
        "unsupported format_version '{found}' (this build writes '{FORMAT_VERSION}')"
    );
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load(path: &Path, what: &str) -> Result<FingerprintDataset> {
    read_dataset(path).with_context(|| format!("loading {what} dataset from {}", path.display()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub format_version: String,
    pub seed: u64,
    pub out: PathBuf,
    pub preset: Preset,
    pub scale: f64,
    /// Which shift components reach the target: none, global, local or mixed.
    pub shift: BenchmarkShift,
    pub global_gain_db: f64,
    pub global_exponent_delta: f64,
    pub local_fraction: f64,
    pub local_perturb_db: f64,
    pub noise_sigma_db: f64,
    pub source_samples_per_rp: usize,
    pub target_samples_per_rp: usize,
    pub query_samples_per_rp: usize,
    pub normalize: bool,
    pub off_grid: bool,
    // Environment overrides; `null` keeps the preset's value.
    pub pl_exponent: Option<f64>,
    pub pl_ref_db: Option<f64>,
    pub shadowing_sigma_db: Option<f64>,
    pub multipath_taps: Option<usize>,
    pub subcarriers: Option<usize>,
    pub antennas: Option<usize>,
    pub frames: Option<usize>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let m = ShiftMagnitudes::default();
        Self {
            format_version: FORMAT_VERSION.to_string(),
            seed: 42,
            out: PathBuf::from("data"),
            preset: Preset::Hall,
            scale: dadloc::eval::BENCHMARK_SCALE,
            shift: BenchmarkShift::Mixed,
            global_gain_db: m.gain_db,
            global_exponent_delta: m.exponent_delta,
            local_fraction: m.local_fraction,
            local_perturb_db: m.local_perturb_db,
            noise_sigma_db: m.noise_db,
            source_samples_per_rp: dadloc::eval::SOURCE_SAMPLES_PER_RP,
            target_samples_per_rp: dadloc::eval::TARGET_SAMPLES_PER_RP,
            query_samples_per_rp: dadloc::eval::QUERY_SAMPLES_PER_RP,
            normalize: true,
            off_grid: false,
            pl_exponent: None,
            pl_ref_db: None,
            shadowing_sigma_db: None,
            multipath_taps: None,
            subcarriers: None,
            antennas: None,
            frames: None,
        }
    }
}

/// Writes `source/`, `target/` (unlabeled) and `query/` (labeled target
/// samples) under `out`, plus the resolved `config.json`.
pub fn simulate(layers: &Layers) -> Result<()> {
    let mut sections = [Section::of(&SimulateConfig::default())?];
    let [map] = <[Map<String, Value>; 1]>::try_from(resolve(layers, &mut sections, &[])?)
        .expect("one section");
    let cfg: SimulateConfig = parse_section("simulate", map)?;
    check_version(&cfg.format_version)?;

    let mut env = preset_environment(cfg.preset, cfg.scale)?;
    let overrides = [
        (&mut env.pl_exponent, cfg.pl_exponent),
        (&mut env.pl_ref_db, cfg.pl_ref_db),
        (&mut env.shadowing_sigma_db, cfg.shadowing_sigma_db),
    ];
    for (field, value) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    let counts = [
        (&mut env.multipath_taps, cfg.multipath_taps),
        (&mut env.subcarriers, cfg.subcarriers),
        (&mut env.antennas, cfg.antennas),
        (&mut env.frames, cfg.frames),
    ];
    for (field, value) in counts {
        if let Some(v) = value {
            *field = v;
        }
    }
    env.validate()?;

    let data_seed = seed::named(cfg.seed, "data");
    let magnitudes = ShiftMagnitudes {
        gain_db: cfg.global_gain_db,
        exponent_delta: cfg.global_exponent_delta,
        local_perturb_db: cfg.local_perturb_db,
        local_fraction: cfg.local_fraction,
        noise_db: cfg.noise_sigma_db,
    };
    let shift = cfg
        .shift
        .spec_with(&env, seed::named(data_seed, "shift"), &magnitudes);
    let options = GenerateOptions {
        normalize: cfg.normalize,
        off_grid: cfg.off_grid,
    };
    let domains = [
        (
            "source",
            ShiftSpec::none(cfg.noise_sigma_db),
            cfg.source_samples_per_rp,
            true,
        ),
        ("target", shift.clone(), cfg.target_samples_per_rp, false),
        ("query", shift, cfg.query_samples_per_rp, true),
    ];
    create_dir(&cfg.out)?;
    for (name, spec, spr, labeled) in domains {
        let ds = generate_domain_with(
            &env,
            &spec,
            spr,
            labeled,
            seed::named(data_seed, name),
            options,
        )?;
        write_dataset(&ds, &cfg.out.join(name))?;
        println!("{name}: {} images of shape {:?}", ds.len(), ds.shape);
    }
    write_json(&cfg, &cfg.out.join("config.json"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub format_version: String,
    pub seed: u64,
    pub source: PathBuf,
    pub target: PathBuf,
    pub out: PathBuf,
    /// Supervised training only: γ = 0, λ = 0.
    pub source_only: bool,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            seed: 42,
            source: PathBuf::from("data/source"),
            target: PathBuf::from("data/target"),
            out: PathBuf::from("run"),
            source_only: false,
        }
    }
}

const MODEL_ALIASES: &[(&str, &str)] = &[("mu", "mu_mode"), ("pus", "pus_enabled")];

fn model_section() -> Result<Section> {
    Ok(Section::of(&DaanConfig::new(1))?.without("num_rps"))
}

fn model_config(mut map: Map<String, Value>, num_rps: usize) -> Result<DaanConfig> {
    map.insert("num_rps".into(), Value::from(num_rps));
    let cfg: DaanConfig = parse_section("model", map)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one model and writes `checkpoint/`, `history.json` and the
/// resolved `config.json` under `out`.
pub fn train_cmd(layers: &Layers) -> Result<()> {
    let mut sections = [Section::of(&TrainRun::default())?, model_section()?];
    let [run, model] =
        <[Map<String, Value>; 2]>::try_from(resolve(layers, &mut sections, MODEL_ALIASES)?)
            .expect("two");
    let run: TrainRun = parse_section("train", run)?;
    check_version(&run.format_version)?;
    let source = load(&run.source, "source")?;
    let target = load(&run.target, "target")?;
    ensure!(
        source.is_labeled(),
        "source dataset {} has no labels",
        run.source.display()
    );
    let target = if target.is_labeled() {
        target.without_labels()
    } else {
        target
    };
    ensure!(
        source.shape == target.shape,
        "source images {:?} and target images {:?} differ in shape",
        source.shape,
        target.shape
    );
    let mut cfg = model_config(model, source.num_rps())?;
    if run.source_only {
        cfg = cfg.source_only();
    }

    let mut model = DaanModel64::new(cfg.clone(), source.shape, seed::named(run.seed, "init"))?;
    let state = train(
        &mut model,
        &source,
        &target,
        &cfg,
        seed::named(run.seed, "shuffle"),
    )?;
    create_dir(&run.out)?;
    save_checkpoint(&model, &run.out.join("checkpoint"))?;
    write_json(&state.history, &run.out.join("history.json"))?;
    write_json(
        &serde_json::json!({ "run": run, "model": cfg }),
        &run.out.join("config.json"),
    )?;
    if let Some(last) = state.history.last() {
        println!(
            "trained {} epochs: source accuracy {:.3}, final mu {:.4}",
            state.epoch, last.source_accuracy, state.mu
        );
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub format_version: String,
    pub checkpoint: PathBuf,
    pub queries: PathBuf,
    pub out: PathBuf,
    /// argmax or centroid.
    pub mode: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            checkpoint: PathBuf::from("run/checkpoint"),
            queries: PathBuf::from("data/query"),
            out: PathBuf::from("run/eval"),
            mode: PredictMode::Argmax.to_string(),
        }
    }
}

/// Writes `metrics.json` (full statistics and CDF) and `metrics.csv`.
pub fn eval_cmd(layers: &Layers) -> Result<()> {
    let mut sections = [Section::of(&EvalConfig::default())?];
    let [map] = <[Map<String, Value>; 1]>::try_from(resolve(layers, &mut sections, &[])?)
        .expect("one section");
    let cfg: EvalConfig = parse_section("eval", map)?;
    check_version(&cfg.format_version)?;
    let mode: PredictMode = cfg.mode.parse()?;
    let mut model = load_checkpoint::<f64>(&cfg.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cfg.checkpoint.display()))?;
    let queries = load(&cfg.queries, "query")?;
    let stats = evaluate_model(&mut model, &queries, mode)?;
    create_dir(&cfg.out)?;
    write_metrics_json(&stats, &cfg.out.join("metrics.json"))?;
    write_metrics_csv(&stats, &cfg.out.join("metrics.csv"))?;
    println!(
        "{} queries: median {:.3} m, p90 {:.3} m, mean {:.3} m",
        stats.errors.len(),
        stats.median,
        stats.p90,
        stats.mae
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateRun {
    pub format_version: String,
    pub seed: u64,
    pub source: PathBuf,
    pub target: PathBuf,
    pub queries: PathBuf,
    pub out: PathBuf,
}

impl Default for AblateRun {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            seed: 42,
            source: PathBuf::from("data/source"),
            target: PathBuf::from("data/target"),
            queries: PathBuf::from("data/query"),
            out: PathBuf::from("ablation"),
        }
    }
}

/// Runs all nine arms; writes `summary.csv` and per-arm `histories.json`.
pub fn ablate_cmd(layers: &Layers) -> Result<()> {
    let mut sections = [Section::of(&AblateRun::default())?, model_section()?];
    let [run, model] =
        <[Map<String, Value>; 2]>::try_from(resolve(layers, &mut sections, MODEL_ALIASES)?)
            .expect("two");
    let run: AblateRun = parse_section("ablate", run)?;
    check_version(&run.format_version)?;
    let source = load(&run.source, "source")?;
    let target = load(&run.target, "target")?;
    let queries = load(&run.queries, "query")?;
    let base = model_config(model, source.num_rps())?;

    let table = ablate::<f64>(&source, &target, &queries, &base, run.seed)?;
    create_dir(&run.out)?;
    write_summary_csv(&table, &run.out.join("summary.csv"))?;
    let histories: Map<String, Value> = table
        .rows
        .iter()
        .map(|r| Ok((r.arm.name(), serde_json::to_value(&r.history)?)))
        .collect::<Result<_>>()?;
    write_json(&histories, &run.out.join("histories.json"))?;
    print!("{}", table.to_csv());
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Layer whose backward pass is sign-flipped; test builds only.
    pub inject_fault: Option<String>,
}

/// Runs the finite-difference suite; returns whether every layer passed.
pub fn gradcheck_cmd(layers: &Layers) -> Result<bool> {
    let mut sections = [Section::of(&GradcheckConfig {
        seed: 7,
        ..Default::default()
    })?];
    let [map] = <[Map<String, Value>; 1]>::try_from(resolve(layers, &mut sections, &[])?)
        .expect("one section");
    let cfg: GradcheckConfig = parse_section("gradcheck", map)?;
    if let Some(layer) = &cfg.inject_fault {
        let kind: OpKind = layer.parse()?;
        if ndcore::inject_fault(Some(kind)).is_err() {
            bail!("--inject-fault needs a build with the fault-injection feature");
        }
    }
    let report = run_suite(cfg.seed)?;
    for e in &report.entries {
        println!(
            "{} {:<30} max rel error {:.3e} (tolerance {:.0e}, {} values)",
            if e.passed() { "PASS" } else { "FAIL" },
            e.layer,
            e.max_rel_error,
            e.tolerance,
            e.checked
        );
    }
    println!(
        "{} layers checked in {:.2}s, max relative error {:.3e}",
        report.entries.len(),
        report.seconds,
        report.max_rel_error()
    );
    Ok(report.passed())
}
