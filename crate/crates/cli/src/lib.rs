//! Command implementations behind the `cellfree` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use cellfree_core::ap_selection::{self, SelectionInstance};
use cellfree_core::config::{ExperimentConfig, Mode};
use cellfree_core::federation::{self, SyncMessage};
use cellfree_core::linalg::{self, random_gaussian};
use cellfree_core::pipeline::{self, Observer, RunReport, METRICS_HEADER};
use cellfree_core::rsma::Association;
use cellfree_core::selftest::{self, SelftestOptions};
use cellfree_core::Error as CoreError;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const OUT_DIR_ENV: &str = "CELLFREE_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "cellfree", version, about = "Federated DRL precoding for cell-free RSMA downlinks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Overrides the seed list with a single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single worker, fixed ordering; output is byte-reproducible.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, env = OUT_DIR_ENV, default_value = "cellfree-out")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write metrics, summary and associations.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Also write the federation trace of each seed.
        #[arg(long)]
        trace: bool,
    },
    /// Run a parameter sweep and write long-format CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the embedded oracle checks.
    Selftest {
        #[arg(long, hide = true)]
        inject_gradient_fault: bool,
    },
    /// Solve a dumped AP-selection instance (JSON).
    ApSelect {
        #[arg(long)]
        instance: PathBuf,
        /// Also enumerate exhaustively and compare.
        #[arg(long)]
        brute_force: bool,
    },
    /// Check the cross-AP channel estimate against the column-space projection.
    Estimate {
        #[arg(long, default_value_t = 4)]
        m_ap: usize,
        #[arg(long, default_value_t = 2)]
        m_ue: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<CoreError>() {
            Some(CoreError::Config { .. }) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

fn config_failure(e: CoreError) -> Failure {
    Failure { code: 2, error: e.into() }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, common, trace } => cmd_run(&config, &common, trace),
        Command::Sweep { config, common } => cmd_sweep(&config, &common),
        Command::Selftest { inject_gradient_fault } => cmd_selftest(inject_gradient_fault),
        Command::ApSelect { instance, brute_force } => cmd_ap_select(&instance, brute_force),
        Command::Estimate { m_ap, m_ue, trials, seed } => cmd_estimate(m_ap, m_ue, trials, seed),
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml_str(&text).map_err(config_failure)
}

fn workers(common: &Common) -> usize {
    if common.deterministic {
        1
    } else {
        common.workers.max(1)
    }
}

/// Collects what `run` writes besides the metric series.
#[derive(Default)]
struct RunRecorder {
    trace: Option<Vec<SyncMessage>>,
    selections: Vec<SelectionInstance>,
}

impl Observer for RunRecorder {
    fn on_sync(&mut self, _episode: usize, messages: &[SyncMessage]) {
        if let Some(t) = &mut self.trace {
            t.extend_from_slice(messages);
        }
    }

    fn on_selection(&mut self, _round: usize, instance: &SelectionInstance, _assoc: &Association) {
        self.selections.push(instance.clone());
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedSummary>,
    /// Full configuration as TOML; parses back to the configuration used.
    pub config: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_min_rate: f64,
    pub associations: Vec<Association>,
    pub counters: pipeline::RunCounters,
    pub wall_clock_s: f64,
}

/// Mean min-rate over the last `window` episodes.
pub fn final_min_rate(report: &RunReport, window: usize) -> f64 {
    let m = report.min_rates();
    let tail = &m[m.len().saturating_sub(window)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

pub const FINAL_WINDOW: usize = 20;

fn cmd_run(config: &Path, common: &Common, trace: bool) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    let out = &common.out_dir;
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        eprintln!("run: mode {} seed {seed}", cfg.mode);
        let mut rec = RunRecorder { trace: trace.then(Vec::new), ..Default::default() };
        let report = pipeline::run(&cfg, seed, workers(common), &mut rec)?;
        csv.push_str(&report.metrics_rows());
        write_atomic(&out.join(format!("association_seed{seed}.csv")), report.association_csv().as_bytes())?;
        if let Some(inst) = rec.selections.last() {
            write_atomic(
                &out.join(format!("selection_instance_seed{seed}.json")),
                serde_json::to_string_pretty(inst)?.as_bytes(),
            )?;
        }
        if let Some(t) = &rec.trace {
            write_atomic(&out.join(format!("federation_seed{seed}.bin")), &federation::write_trace(t))?;
        }
        runs.push(SeedSummary {
            seed,
            final_min_rate: final_min_rate(&report, FINAL_WINDOW),
            associations: report.associations.clone(),
            counters: report.counters.clone(),
            wall_clock_s: report.wall_clock_s,
        });
    }
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    let summary = RunSummary { mode: cfg.mode, seeds: cfg.seeds.clone(), runs, config: cfg.to_toml_string() };
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    eprintln!("run: wrote {}", out.display());
    Ok(())
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    PMaxDbm,
    TFl,
    NUeMax,
    Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Text(String),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Number(x) => write!(f, "{x}"),
            SweepValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub parameter: SweepParameter,
    pub values: Vec<SweepValue>,
    /// Modes to run for each value; defaults to the base mode.
    #[serde(default)]
    pub modes: Vec<Mode>,
    /// Defaults to the base seeds.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub base: ExperimentConfig,
    pub sweep: SweepAxis,
}

/// One (value, mode, seed) run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub index: usize,
    pub value: SweepValue,
    pub mode: Mode,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl SweepSpec {
    pub fn from_toml_str(s: &str) -> Result<Self, CoreError> {
        let spec: Self = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_string();
            CoreError::Config { field: msg.split('`').nth(1).unwrap_or("sweep").to_string(), reason: msg }
        })?;
        spec.base.validate()?;
        if spec.sweep.values.is_empty() {
            return Err(CoreError::Config { field: "sweep.values".into(), reason: "must not be empty".into() });
        }
        spec.cells()?;
        Ok(spec)
    }

    pub fn cells(&self) -> Result<Vec<SweepCell>, CoreError> {
        let bad = |r: String| CoreError::Config { field: "sweep.values".into(), reason: r };
        let seeds = if self.sweep.seeds.is_empty() { self.base.seeds.clone() } else { self.sweep.seeds.clone() };
        let mut cells = Vec::new();
        for value in &self.sweep.values {
            let modes: Vec<Mode> = match (self.sweep.parameter, value) {
                (SweepParameter::Mode, SweepValue::Text(m)) => vec![m.parse()?],
                (SweepParameter::Mode, v) => return Err(bad(format!("`{v}` is not a mode name"))),
                _ if self.sweep.modes.is_empty() => vec![self.base.mode],
                _ => self.sweep.modes.clone(),
            };
            for mode in modes {
                for &seed in &seeds {
                    let mut config = self.base.clone();
                    config.mode = mode;
                    config.seeds = vec![seed];
                    match (self.sweep.parameter, value) {
                        (SweepParameter::PMaxDbm, SweepValue::Number(x)) => config.p_max_dbm = *x,
                        (SweepParameter::TFl, SweepValue::Number(x)) if *x >= 1.0 && x.fract() == 0.0 => {
                            config.t_fl = *x as usize
                        }
                        (SweepParameter::NUeMax, SweepValue::Number(x)) if *x >= 1.0 && x.fract() == 0.0 => {
                            config.n_ue_max = *x as usize
                        }
                        (SweepParameter::Mode, _) => {}
                        (p, v) => return Err(bad(format!("`{v}` is not a valid value for {p:?}"))),
                    }
                    config.validate()?;
                    cells.push(SweepCell { index: cells.len(), value: value.clone(), mode, seed, config });
                }
            }
        }
        Ok(cells)
    }
}

pub const SWEEP_HEADER: &str = "parameter,value,mode,seed,episode,min_rate,mean_rate,R_c,power_slack";
pub const SWEEP_SUMMARY_HEADER: &str = "parameter,value,mode,seed,final_min_rate,status";

fn parameter_name(p: SweepParameter) -> &'static str {
    match p {
        SweepParameter::PMaxDbm => "p_max_dbm",
        SweepParameter::TFl => "t_fl",
        SweepParameter::NUeMax => "n_ue_max",
        SweepParameter::Mode => "mode",
    }
}

/// Runs every cell; failed cells are reported and skipped, not fatal.
pub fn run_sweep(spec: &SweepSpec, workers: usize, out_dir: &Path) -> anyhow::Result<(String, String)> {
    let cells = spec.cells()?;
    let param = parameter_name(spec.sweep.parameter);
    let run_cell = |cell: &SweepCell| -> (usize, Result<RunReport, String>) {
        eprintln!("sweep: {param}={} mode {} seed {}", cell.value, cell.mode, cell.seed);
        let r = pipeline::run(&cell.config, cell.seed, 1, &mut pipeline::NoObserver).map_err(|e| e.to_string());
        if let Ok(rep) = &r {
            let path = out_dir.join("cells").join(format!("cell{:04}.csv", cell.index));
            if let Err(e) = write_atomic(&path, rep.metrics_csv().as_bytes()) {
                return (cell.index, Err(e.to_string()));
            }
        }
        (cell.index, r)
    };
    let mut results: Vec<(usize, Result<RunReport, String>)> = if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
        pool.install(|| cells.par_iter().map(run_cell).collect())
    } else {
        cells.iter().map(run_cell).collect()
    };
    results.sort_by_key(|r| r.0);
    let mut long = format!("{SWEEP_HEADER}\n");
    let mut summary = format!("{SWEEP_SUMMARY_HEADER}\n");
    for (cell, (_, r)) in cells.iter().zip(&results) {
        let prefix = format!("{param},{},{},{}", cell.value, cell.mode, cell.seed);
        match r {
            Ok(rep) => {
                for e in &rep.records {
                    long.push_str(&format!(
                        "{prefix},{},{},{},{},{}\n",
                        e.episode, e.min_rate, e.mean_rate, e.common_rate, e.power_slack
                    ));
                }
                summary.push_str(&format!("{prefix},{},ok\n", final_min_rate(rep, FINAL_WINDOW)));
            }
            Err(msg) => {
                let msg = msg.replace([',', '\n'], ";");
                summary.push_str(&format!("{prefix},,failed: {msg}\n"));
            }
        }
    }
    write_atomic(&out_dir.join("sweep.csv"), long.as_bytes())?;
    write_atomic(&out_dir.join("sweep_summary.csv"), summary.as_bytes())?;
    Ok((long, summary))
}

fn cmd_sweep(config: &Path, common: &Common) -> Result<(), Failure> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut spec = SweepSpec::from_toml_str(&text).map_err(config_failure)?;
    if let Some(s) = common.seed {
        spec.sweep.seeds = vec![s];
    }
    run_sweep(&spec, workers(common), &common.out_dir)?;
    eprintln!("sweep: wrote {}", common.out_dir.display());
    Ok(())
}

fn cmd_selftest(inject: bool) -> Result<(), Failure> {
    let opts = SelftestOptions { gradient_fault: if inject { 1e-3 } else { 0.0 } };
    let outcomes = selftest::run_all(&opts);
    for c in &outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    match outcomes.iter().find(|c| !c.passed) {
        Some(c) => Err(Failure { code: 1, error: anyhow!("selftest check `{}` failed: {}", c.name, c.detail) }),
        None => Ok(()),
    }
}

fn cmd_ap_select(path: &Path, brute_force: bool) -> Result<(), Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let inst: SelectionInstance = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let g = ap_selection::solve_p3(&inst)?;
    println!("objective,{}", inst.objective(&g));
    println!("k,n,g");
    for k in 0..inst.n_ues {
        for n in 0..inst.n_aps {
            println!("{k},{n},{}", g.get(k, n) as u8);
        }
    }
    if brute_force {
        let b = ap_selection::brute_force_p3(&inst)?;
        let (x, y) = (inst.objective(&g), inst.objective(&b));
        println!("brute_force_objective,{y}");
        if x != y {
            return Err(Failure { code: 1, error: anyhow!("solver objective {x} differs from enumeration {y}") });
        }
    }
    Ok(())
}

/// Largest `‖H̃ − ΠH‖/‖H‖` over random trials.
pub fn estimate_check(m_ap: usize, m_ue: usize, trials: usize, seed: u64) -> anyhow::Result<f64> {
    if m_ap == 0 || m_ue == 0 {
        bail!("antenna counts must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let h = random_gaussian(&mut rng, m_ap, m_ue);
        let p = random_gaussian(&mut rng, m_ap, m_ue);
        let (est, _) = federation::estimate_channel(&(h.adjoint() * &p), &p);
        let target = federation::column_space_projector(&p) * &h;
        worst = worst.max(linalg::frob(&(est - target)) / linalg::frob(&h));
    }
    Ok(worst)
}

fn cmd_estimate(m_ap: usize, m_ue: usize, trials: usize, seed: u64) -> Result<(), Failure> {
    let worst = estimate_check(m_ap, m_ue, trials, seed)?;
    println!("trials,{trials}\nworst_relative_error,{worst:e}");
    if worst > 1e-10 {
        return Err(Failure { code: 1, error: anyhow!("estimate deviates from the projection by {worst:e}") });
    }
    Ok(())
}
