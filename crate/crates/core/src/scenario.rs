//! JSON scenario files and the runner behind the command-line tool.
//!
//! A scenario is a JSON object with a `"kind"` discriminator
//! (`fedft | unlearn | moe | cot | casestudy`), a `seed`, and the
//! kind-specific blocks. Runs write CSV and pretty JSON into an output
//! directory and depend only on the file bytes and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::casestudy::{
    calibrate_casestudy, casestudy_sweep, write_budget_csv, BudgetRow, Calibration, CalibrationGrid, TokenBudgetModel,
    TARGET_REDUCTIONS,
};
use crate::cot::{optimality_gap, placement_cost, solve_exact, solve_local_search, CotInstanceSpec, CotResult};
use crate::error::{Error, Result};
use crate::fedft::{run_fedft, write_rounds_csv, FedFtConfig, FedFtState, SyntheticTask};
use crate::moe::{generate_task_stream, orchestrate, write_trace_csv, ArrivalModel, MoeSystem, TradeoffKnob};
use crate::netsim::DeviceProfile;
use crate::unlearn::{run_unlearn_experiment, write_unlearn_csv, UnlearnConfig, UnlearnExperiment, UnlearnTask};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_infeasible() {
        EXIT_INFEASIBLE
    } else if matches!(err, Error::Io(_)) {
        EXIT_FAILURE
    } else {
        EXIT_CONFIG
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scenario {
    Fedft(FedFtScenario),
    Unlearn(UnlearnScenario),
    Moe(MoeScenario),
    Cot(CotScenario),
    Casestudy(CasestudyScenario),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedFtScenario {
    pub seed: u64,
    pub devices: Vec<DeviceProfile>,
    pub task: SyntheticTask,
    pub config: FedFtConfig,
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnScenario {
    pub seed: u64,
    pub task: UnlearnTask,
    pub pretrain_rounds: usize,
    pub rounds: usize,
    pub opt_out_ids: Vec<u32>,
    pub config: UnlearnConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeScenario {
    pub seed: u64,
    pub system: MoeSystem,
    pub arrivals: ArrivalModel,
    pub slots: usize,
    pub v_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotScenario {
    pub seed: u64,
    pub instance: CotInstanceSpec,
    #[serde(default = "default_iters")]
    pub local_search_iters: usize,
}

fn default_iters() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CasestudyScenario {
    pub seed: u64,
    pub budgets: Vec<usize>,
    /// Fixed model; when absent the model is calibrated to `targets`.
    #[serde(default)]
    pub model: Option<TokenBudgetModel>,
    #[serde(default)]
    pub targets: Option<(f64, f64)>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Scenario::Fedft(_) => "fedft",
            Scenario::Unlearn(_) => "unlearn",
            Scenario::Moe(_) => "moe",
            Scenario::Cot(_) => "cot",
            Scenario::Casestudy(_) => "casestudy",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Scenario::Fedft(s) => s.seed,
            Scenario::Unlearn(s) => s.seed,
            Scenario::Moe(s) => s.seed,
            Scenario::Cot(s) => s.seed,
            Scenario::Casestudy(s) => s.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Scenario::Fedft(s) => s.seed = seed,
            Scenario::Unlearn(s) => s.seed = seed,
            Scenario::Moe(s) => s.seed = seed,
            Scenario::Cot(s) => s.seed = seed,
            Scenario::Casestudy(s) => s.seed = seed,
        }
    }

    /// Checks the kind-specific blocks without running anything heavy.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        match self {
            Scenario::Fedft(s) => {
                if s.devices.is_empty() {
                    return Err(Error::Config("fedft needs at least one device".into()));
                }
                let mut ids: Vec<u32> = s.devices.iter().map(|d| d.id).collect();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() != s.devices.len() {
                    return Err(Error::Config("device ids must be unique".into()));
                }
                s.config.validate().map_err(cfg)?;
                FedFtState::synthetic(&s.task, &s.devices, s.seed).map_err(cfg)?;
            }
            Scenario::Unlearn(s) => {
                s.config.validate().map_err(cfg)?;
                let n = s.task.samples_per_device.len() as u32;
                if s.opt_out_ids.is_empty() || s.opt_out_ids.iter().any(|&id| id >= n) {
                    return Err(Error::Config(format!("opt_out_ids must name devices in 0..{n}")));
                }
                if s.task.classes < 2 || s.task.features < 2 {
                    return Err(Error::Config("unlearn task needs >= 2 classes and >= 2 features".into()));
                }
            }
            Scenario::Moe(s) => {
                s.system.validate().map_err(cfg)?;
                if s.slots == 0 || s.v_values.is_empty() {
                    return Err(Error::Config("moe needs slots >= 1 and at least one V".into()));
                }
                for &v in &s.v_values {
                    TradeoffKnob::new(v).map_err(cfg)?;
                }
                if let ArrivalModel::Bernoulli { prob, .. } = s.arrivals {
                    if !(0.0..=1.0).contains(&prob) {
                        return Err(Error::Config("arrival prob must lie in [0, 1]".into()));
                    }
                }
            }
            Scenario::Cot(s) => {
                if s.local_search_iters == 0 {
                    return Err(Error::Config("local_search_iters must be >= 1".into()));
                }
                s.instance.build().map_err(cfg)?;
            }
            Scenario::Casestudy(s) => {
                if s.budgets.is_empty() {
                    return Err(Error::Config("casestudy needs at least one budget".into()));
                }
                if let Some(m) = &s.model {
                    m.validate().map_err(cfg)?;
                }
            }
        }
        Ok(())
    }
}

/// Files written by a run, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub kind: String,
    pub seed: u64,
    pub files: Vec<String>,
}

struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// Loads, validates and runs the scenario at `path`, writing into `out_dir`.
pub fn run_scenario(path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<RunReport> {
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = seed_override {
        scenario.set_seed(seed);
    }
    run(&scenario, out_dir)
}

pub fn run(scenario: &Scenario, out_dir: &Path) -> Result<RunReport> {
    scenario.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut out = Out { dir: out_dir.to_path_buf(), files: Vec::new() };
    let seed = scenario.seed();
    match scenario {
        Scenario::Fedft(s) => run_fedft_scenario(s, &mut out)?,
        Scenario::Unlearn(s) => run_unlearn_scenario(s, &mut out)?,
        Scenario::Moe(s) => run_moe_scenario(s, &mut out)?,
        Scenario::Cot(s) => run_cot_scenario(s, &mut out)?,
        Scenario::Casestudy(s) => run_casestudy_scenario(s, &mut out)?,
    }
    Ok(RunReport { kind: scenario.kind().to_string(), seed, files: out.files })
}

#[derive(Serialize)]
struct FedFtSummary {
    kind: &'static str,
    seed: u64,
    rounds: usize,
    initial_loss: f64,
    final_loss: f64,
    loss_ratio: f64,
    total_latency_s: f64,
}

fn run_fedft_scenario(s: &FedFtScenario, out: &mut Out) -> Result<()> {
    let state = FedFtState::synthetic(&s.task, &s.devices, s.seed)?;
    let run = run_fedft(state, &s.devices, &s.config, s.rounds)?;
    let mut csv = Vec::new();
    write_rounds_csv(&mut csv, &run.records)?;
    out.write("rounds.csv", &csv)?;
    let final_loss = run.records.last().map_or(run.initial_loss, |r| r.global_loss);
    out.json(
        "summary.json",
        &FedFtSummary {
            kind: "fedft",
            seed: s.seed,
            rounds: s.rounds,
            initial_loss: run.initial_loss,
            final_loss,
            loss_ratio: final_loss / run.initial_loss,
            total_latency_s: run.records.iter().map(|r| r.round_latency_s).sum(),
        },
    )
}

#[derive(Serialize)]
struct UnlearnSummary {
    kind: &'static str,
    seed: u64,
    pre_forget_loss: f64,
    final_forget_loss: f64,
    forget_ratio: f64,
    pre_retained_loss: f64,
    final_retained_loss: f64,
    baseline_retained_loss: f64,
    retained_gap: f64,
    max_overlap: f64,
}

fn run_unlearn_scenario(s: &UnlearnScenario, out: &mut Out) -> Result<()> {
    let exp = UnlearnExperiment {
        task: s.task.clone(),
        pretrain_rounds: s.pretrain_rounds,
        rounds: s.rounds,
        opt_out_ids: s.opt_out_ids.clone(),
        config: s.config.clone(),
    };
    let o = run_unlearn_experiment(&exp, s.seed)?;
    let mut csv = Vec::new();
    write_unlearn_csv(&mut csv, &o.records)?;
    out.write("unlearn.csv", &csv)?;
    out.json(
        "summary.json",
        &UnlearnSummary {
            kind: "unlearn",
            seed: s.seed,
            pre_forget_loss: o.pre_forget_loss,
            final_forget_loss: o.final_forget_loss,
            forget_ratio: o.forget_ratio(),
            pre_retained_loss: o.pre_retained_loss,
            final_retained_loss: o.final_retained_loss,
            baseline_retained_loss: o.baseline_retained_loss,
            retained_gap: o.retained_gap(),
            max_overlap: o.max_overlap(),
        },
    )
}

#[derive(Serialize)]
struct MoeRunSummary {
    v: f64,
    time_avg_cost: f64,
    time_avg_backlog: f64,
    max_device_backlog: f64,
    trace: String,
}

#[derive(Serialize)]
struct MoeSummary {
    kind: &'static str,
    seed: u64,
    slots: usize,
    runs: Vec<MoeRunSummary>,
}

fn run_moe_scenario(s: &MoeScenario, out: &mut Out) -> Result<()> {
    let stream = generate_task_stream(&s.system, &s.arrivals, s.slots, s.seed)?;
    let mut runs = Vec::with_capacity(s.v_values.len());
    for (i, &v) in s.v_values.iter().enumerate() {
        let trace = orchestrate(&s.system, &stream, TradeoffKnob::new(v)?)?;
        let name = format!("trace_{i}.csv");
        let mut csv = Vec::new();
        write_trace_csv(&mut csv, &s.system, &trace)?;
        out.write(&name, &csv)?;
        runs.push(MoeRunSummary {
            v,
            time_avg_cost: trace.time_avg_cost,
            time_avg_backlog: trace.time_avg_backlog,
            max_device_backlog: trace.max_device_backlog,
            trace: name,
        });
    }
    out.json("summary.json", &MoeSummary { kind: "moe", seed: s.seed, slots: s.slots, runs })
}

#[derive(Serialize)]
struct CotSummary {
    kind: &'static str,
    seed: u64,
    results: Vec<CotResult>,
}

fn run_cot_scenario(s: &CotScenario, out: &mut Out) -> Result<()> {
    let inst = s.instance.build()?;
    let ids = |p: &[usize]| -> Vec<u32> { p.iter().map(|&d| inst.devices[d].id).collect() };
    let exact = match solve_exact(&inst) {
        Ok(p) => Some(p),
        Err(Error::Size(_)) => None,
        Err(e) => return Err(e),
    };
    let exact_cost = exact.as_ref().map(|p| placement_cost(&inst, p)).transpose()?;
    let ls = solve_local_search(&inst, s.seed, s.local_search_iters)?;
    let ls_cost = placement_cost(&inst, &ls)?;
    let mut results = Vec::new();
    if let (Some(p), Some(c)) = (&exact, exact_cost) {
        results.push(CotResult { solver: "exact".into(), placement: ids(&p.0), cost_s: c, gap_to_exact: Some(0.0) });
    }
    results.push(CotResult {
        solver: "local_search".into(),
        placement: ids(&ls.0),
        cost_s: ls_cost,
        gap_to_exact: exact_cost.map(|c| optimality_gap(ls_cost, c)),
    });
    let mut csv = String::from("solver,placement,cost_s,gap_to_exact\n");
    for r in &results {
        let placement: Vec<String> = r.placement.iter().map(u32::to_string).collect();
        let gap = r.gap_to_exact.map(|g| g.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{}\n", r.solver, placement.join(";"), r.cost_s, gap));
    }
    out.write("placements.csv", csv.as_bytes())?;
    out.json("result.json", &CotSummary { kind: "cot", seed: s.seed, results })
}

#[derive(Serialize)]
struct CasestudySummary {
    kind: &'static str,
    seed: u64,
    model: TokenBudgetModel,
    calibration: Option<Calibration>,
    rows: Vec<BudgetRow>,
}

/// Result of the case-study command: the model used, its calibration (if
/// any) and the sweep over the requested budgets.
pub struct CasestudyRun {
    pub model: TokenBudgetModel,
    pub calibration: Option<Calibration>,
    pub rows: Vec<BudgetRow>,
}

/// Calibrates (unless a model is given) and sweeps `budgets`. A calibration
/// that misses its tolerance is reported as infeasible.
pub fn casestudy_run(
    budgets: &[usize],
    model: Option<TokenBudgetModel>,
    targets: Option<(f64, f64)>,
) -> Result<CasestudyRun> {
    let (model, calibration) = match model {
        Some(m) => (m, None),
        None => {
            let targets = targets.unwrap_or(TARGET_REDUCTIONS);
            let cal = calibrate_casestudy(targets, &CalibrationGrid::default())?
                .ok_or_else(|| Error::Infeasible("no admissible calibration grid point".into()))?;
            (cal.model.clone(), Some(cal))
        }
    };
    let rows = casestudy_sweep(&model, budgets)?;
    Ok(CasestudyRun { model, calibration, rows })
}

fn run_casestudy_scenario(s: &CasestudyScenario, out: &mut Out) -> Result<()> {
    let run = casestudy_run(&s.budgets, s.model.clone(), s.targets)?;
    let mut csv = Vec::new();
    write_budget_csv(&mut csv, &run.rows)?;
    out.write("budgets.csv", &csv)?;
    out.json(
        "summary.json",
        &CasestudySummary {
            kind: "casestudy",
            seed: s.seed,
            model: run.model,
            calibration: run.calibration,
            rows: run.rows,
        },
    )
}
