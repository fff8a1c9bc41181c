//! Metrics, the signed-rank test and experiment orchestration.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;
use web_time::Instant;

use crate::heuristics::{adaptive_fixing, relax_and_fix, HeuristicStatus};
use crate::instances::{Family, GenConfig, Instance};
use crate::milp::{build_model, SolveStatus};
use crate::pipeline::{
    decision_accuracy, predopt_solve, ItemwisePredictor, NeuralPredictor, PipelineError, PredOptConfig, Predictor,
};
use crate::solver::{MipSolver, SolverError, SolverOptions, TracePoint};

/// Clamp applied to zero solve times.
pub const TIME_RESOLUTION: f64 = 1e-3;
/// Largest sample handled by exact enumeration.
pub const EXACT_WILCOXON_MAX_N: usize = 25;
/// Default wall-clock limit of the baseline solve, in seconds.
pub const DEFAULT_BASELINE_TIME_LIMIT: f64 = 7200.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("optimality gap is undefined for a zero reference objective")]
    UndefinedGap,
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `|zHat − zRef| / |zRef| · 100`.
pub fn opt_gap(z_ref: f64, z_hat: f64) -> Result<f64, EvalError> {
    if z_ref == 0.0 {
        return Err(EvalError::UndefinedGap);
    }
    Ok((z_hat - z_ref).abs() / z_ref.abs() * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRatio {
    pub factor: f64,
    /// `tNew` was below [`TIME_RESOLUTION`] and got clamped.
    pub clamped: bool,
}

pub fn time_improvement(t_base: f64, t_new: f64) -> TimeRatio {
    let clamped = t_new < TIME_RESOLUTION;
    TimeRatio {
        factor: t_base / t_new.max(TIME_RESOLUTION),
        clamped,
    }
}

/// Percentage of positions where `predicted` equals `reference`.
pub fn accuracy(predicted: &[bool], reference: &[bool]) -> Result<f64, EvalError> {
    if predicted.len() != reference.len() || predicted.is_empty() {
        return Err(EvalError::Usage(format!(
            "accuracy needs equal non-empty index sets, got {} and {}",
            predicted.len(),
            reference.len()
        )));
    }
    let hits = predicted.iter().zip(reference).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences.
    pub n: usize,
    pub w_plus: f64,
    /// `P(W⁺ ≥ w⁺)` under the null.
    pub p_value: f64,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Average ranks of `values` (1-based), ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One-sided signed-rank test of `H₁: median(diffs) > 0`.
pub fn wilcoxon_one_sided(diffs: &[f64]) -> Result<WilcoxonResult, EvalError> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(EvalError::Usage("differences must be finite".into()));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n: 0,
            w_plus: 0.0,
            p_value: 1.0,
            exact: true,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&nonzero).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    let (p_value, exact) = if n <= EXACT_WILCOXON_MAX_N {
        (exact_upper_tail(&ranks, w_plus), true)
    } else {
        (normal_upper_tail(&abs, &ranks, w_plus), false)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_value,
        exact,
        degenerate: false,
    })
}

/// Counts sign patterns by subset sums of doubled ranks, which are integers
/// even with averaged ties.
fn exact_upper_tail(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let target = (2.0 * w_plus).round() as usize;
    let tail: f64 = counts[target..].iter().sum();
    tail / 2f64.powi(ranks.len() as i32)
}

fn normal_upper_tail(abs: &[f64], ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus - mean - 0.5) / var.sqrt();
    Normal::standard().cdf(-z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemwiseSettings {
    pub sub_items: usize,
    #[serde(default = "default_delta")]
    pub delta: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_delta() -> usize {
    10
}

/// One experiment: a test set, a predictor and the methods to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Test instances use seeds `generator.seed + k`.
    pub generator: GenConfig,
    pub count: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the family defaults.
    #[serde(default)]
    pub predopt: Option<PredOptConfig>,
    #[serde(default = "default_baseline")]
    pub baseline: SolverOptions,
    /// Run relax-and-fix (lot sizing) or adaptive fixing (knapsack).
    #[serde(default = "default_true")]
    pub heuristic: bool,
    #[serde(default)]
    pub itemwise: Option<ItemwiseSettings>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_baseline() -> SolverOptions {
    SolverOptions::default().with_time_limit(DEFAULT_BASELINE_TIME_LIMIT)
}
fn default_true() -> bool {
    true
}
fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn new(generator: GenConfig, count: usize) -> Self {
        Self {
            name: default_name(),
            generator,
            count,
            checkpoint: None,
            predopt: None,
            baseline: default_baseline(),
            heuristic: true,
            itemwise: None,
            workers: 1,
        }
    }

    pub fn predopt_config(&self) -> PredOptConfig {
        self.predopt
            .clone()
            .unwrap_or_else(|| PredOptConfig::for_family(self.generator.family))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))
    }

    pub fn instances(&self) -> Result<Vec<Instance>, EvalError> {
        (0..self.count as u64)
            .map(|k| Ok(self.generator.with_seed(self.generator.seed + k).generate()?))
            .collect::<Result<_, PipelineError>>()
            .map_err(EvalError::from)
    }

    /// Short heuristic label used in column names.
    pub fn heuristic_label(&self) -> &'static str {
        heuristic_label(self.generator.family)
    }
}

fn heuristic_label(family: Family) -> &'static str {
    match family {
        Family::Mclsp => "RF",
        Family::Msmk => "AF",
    }
}

/// Loads the checkpoint named by `config` and checks it against the test
/// dimensions before anything is solved.
pub fn load_predictor(config: &ExperimentConfig) -> Result<NeuralPredictor, EvalError> {
    let path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| EvalError::Config("no model checkpoint given".into()))?;
    let predictor = NeuralPredictor::load(path).map_err(|e| EvalError::Config(e.to_string()))?;
    let mut probe = config.generator.with_seed(config.generator.seed);
    if let Some(iw) = &config.itemwise {
        probe.items = iw.sub_items;
    }
    let inst = probe.generate().map_err(|e| EvalError::Config(e.to_string()))?;
    predictor.check_dims(&inst).map_err(|e| EvalError::Config(e.to_string()))?;
    Ok(predictor)
}

/// One row of the per-instance CSV. Missing values are left empty: `objPredOpt`
/// when PredOpt failed, `objHeur` when the heuristic failed or was disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    #[serde(rename = "instanceId")]
    pub instance_id: String,
    #[serde(rename = "timeCPX")]
    pub time_cpx: f64,
    #[serde(rename = "timePredOpt")]
    pub time_predopt: f64,
    #[serde(rename = "timeRF_or_AF")]
    pub time_heur: Option<f64>,
    #[serde(rename = "objCPX")]
    pub obj_cpx: Option<f64>,
    #[serde(rename = "objPredOpt")]
    pub obj_predopt: Option<f64>,
    #[serde(rename = "objHeur")]
    pub obj_heur: Option<f64>,
    /// Fraction in `[0, 1]`; empty without a baseline solution.
    pub accuracy: Option<f64>,
    #[serde(rename = "finalPredLevel")]
    pub final_pred_level: Option<f64>,
    #[serde(rename = "loop1Iters")]
    pub loop1_iters: usize,
    #[serde(rename = "loop2Iters")]
    pub loop2_iters: usize,
}

pub fn write_records_csv<W: Write>(records: &[InstanceRecord], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<InstanceRecord>, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub name: String,
    pub family: Family,
    pub generator: GenConfig,
    pub count: usize,
    pub predopt: PredOptConfig,
    pub baseline: SolverOptions,
    pub itemwise: Option<ItemwiseSettings>,
    pub backend: String,
    pub predictor: String,
}

/// Aggregates over one test set. Means skip missing entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub instances: usize,
    pub time_cpx: f64,
    pub time_predopt: f64,
    /// Mean of per-instance factors.
    pub time_imp_predopt: f64,
    pub time_imp_predopt_ratio_of_means: f64,
    pub time_heur: Option<f64>,
    pub time_imp_heur: Option<f64>,
    pub time_imp_heur_ratio_of_means: Option<f64>,
    /// Test on `timeHeur − timePredOpt`.
    pub wilcoxon: Option<WilcoxonResult>,
    pub accuracy_pct: Option<f64>,
    pub opt_gap_predopt_pct: Option<f64>,
    pub opt_gap_heur_pct: Option<f64>,
    pub predopt_infeasible: usize,
    pub heuristic_failures: usize,
    pub clamped_times: usize,
    pub undefined_gaps: usize,
    /// Status of each baseline solve; gaps are measured against its best
    /// known objective.
    pub baseline_status: Vec<SolveStatus>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl ExperimentReport {
    /// Computes every aggregate from the per-instance records.
    pub fn from_records(
        provenance: Provenance,
        records: &[InstanceRecord],
        baseline_status: Vec<SolveStatus>,
    ) -> Result<Self, EvalError> {
        let n = records.len();
        let mut clamped = 0;
        let mut undefined_gaps = 0;
        let mut imp = |base: f64, new: f64| {
            let r = time_improvement(base, new);
            clamped += r.clamped as usize;
            r.factor
        };
        let imp_predopt: Vec<f64> = records.iter().map(|r| imp(r.time_cpx, r.time_predopt)).collect();
        let imp_heur: Vec<f64> = records
            .iter()
            .filter_map(|r| r.time_heur.map(|t| imp(r.time_cpx, t)))
            .collect();
        let mut gap = |z_ref: Option<f64>, z: Option<f64>| match (z_ref, z) {
            (Some(a), Some(b)) => match opt_gap(a, b) {
                Ok(g) => Some(g),
                Err(_) => {
                    undefined_gaps += 1;
                    None
                }
            },
            _ => None,
        };
        let gaps_predopt: Vec<f64> = records.iter().filter_map(|r| gap(r.obj_cpx, r.obj_predopt)).collect();
        let gaps_heur: Vec<f64> = records.iter().filter_map(|r| gap(r.obj_cpx, r.obj_heur)).collect();
        let time_cpx = mean(records.iter().map(|r| r.time_cpx)).unwrap_or(0.0);
        let time_predopt = mean(records.iter().map(|r| r.time_predopt)).unwrap_or(0.0);
        let time_heur = mean(records.iter().filter_map(|r| r.time_heur));
        let diffs: Vec<f64> = records
            .iter()
            .filter_map(|r| r.time_heur.map(|t| t - r.time_predopt))
            .collect();
        let wilcoxon = if diffs.is_empty() {
            None
        } else {
            Some(wilcoxon_one_sided(&diffs)?)
        };
        Ok(Self {
            provenance,
            instances: n,
            time_cpx,
            time_predopt,
            time_imp_predopt: mean(imp_predopt).unwrap_or(0.0),
            time_imp_predopt_ratio_of_means: time_improvement(time_cpx, time_predopt).factor,
            time_heur,
            time_imp_heur: mean(imp_heur),
            time_imp_heur_ratio_of_means: time_heur.map(|t| time_improvement(time_cpx, t).factor),
            wilcoxon,
            accuracy_pct: mean(records.iter().filter_map(|r| r.accuracy)).map(|a| a * 100.0),
            opt_gap_predopt_pct: mean(gaps_predopt),
            opt_gap_heur_pct: mean(gaps_heur),
            predopt_infeasible: records.iter().filter(|r| r.obj_predopt.is_none()).count(),
            heuristic_failures: records
                .iter()
                .filter(|r| r.time_heur.is_some() && r.obj_heur.is_none())
                .count(),
            clamped_times: clamped,
            undefined_gaps,
            baseline_status,
        })
    }

    /// Label/value rows in table order.
    pub fn rows(&self) -> Vec<(String, String)> {
        let h = heuristic_label(self.provenance.family);
        let f = |v: f64| format!("{v:.4}");
        let o = |v: Option<f64>| v.map_or_else(|| "-".to_string(), f);
        let hit_limit = self
            .baseline_status
            .iter()
            .filter(|s| **s != SolveStatus::Optimal)
            .count();
        vec![
            ("instances".into(), self.instances.to_string()),
            ("timeCPX".into(), f(self.time_cpx)),
            ("timePredOpt".into(), f(self.time_predopt)),
            (format!("time{h}"), o(self.time_heur)),
            ("timeImpPredOpt".into(), f(self.time_imp_predopt)),
            ("timeImpPredOpt(ratioOfMeans)".into(), f(self.time_imp_predopt_ratio_of_means)),
            (format!("timeImp{h}"), o(self.time_imp_heur)),
            (format!("timeImp{h}(ratioOfMeans)"), o(self.time_imp_heur_ratio_of_means)),
            ("p-value".into(), o(self.wilcoxon.map(|w| w.p_value))),
            ("accuracy(%)".into(), o(self.accuracy_pct)),
            ("optGapPredOpt(%)".into(), o(self.opt_gap_predopt_pct)),
            (format!("optGap{h}(%)"), o(self.opt_gap_heur_pct)),
            ("infeasiblePredOpt".into(), self.predopt_infeasible.to_string()),
            (format!("failures{h}"), self.heuristic_failures.to_string()),
            ("baselineNotOptimal".into(), hit_limit.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
        let mut s = format!("{} ({:?}, {} instances)\n", self.provenance.name, self.provenance.family, self.instances);
        for (label, value) in rows {
            let _ = writeln!(s, "{label:<width$}  {value:>14}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (label, value) in self.rows() {
            let _ = writeln!(s, "{label},{value}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub records: Vec<InstanceRecord>,
    /// Baseline incumbent traces by instance id.
    pub traces: Vec<(String, Vec<TracePoint>)>,
}

impl ExperimentOutput {
    /// Writes `report.json`, `report.txt`, `report.csv`, `instances.csv` and
    /// `traces/<id>.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir.join("traces"))?;
        let json = serde_json::to_string_pretty(&self.report).expect("report serializes");
        std::fs::write(dir.join("report.json"), json)?;
        std::fs::write(dir.join("report.txt"), self.report.to_text())?;
        std::fs::write(dir.join("report.csv"), self.report.to_csv())?;
        write_records_csv(&self.records, std::fs::File::create(dir.join("instances.csv"))?)?;
        for (id, trace) in &self.traces {
            let file = std::fs::File::create(dir.join("traces").join(format!("{id}.csv")))?;
            crate::solver::write_trace_csv(trace, std::io::BufWriter::new(file))?;
        }
        Ok(())
    }
}

struct Evaluated {
    record: InstanceRecord,
    status: SolveStatus,
    trace: Vec<TracePoint>,
}

fn evaluate_instance(
    id: String,
    inst: &Instance,
    predictor: &dyn Predictor,
    config: &ExperimentConfig,
    predopt: &PredOptConfig,
    solver: &dyn MipSolver,
) -> Result<Evaluated, EvalError> {
    let baseline = solver.solve(&build_model(inst), &config.baseline)?;
    let reference = baseline.solution.has_values().then_some(&baseline.solution);

    let start = Instant::now();
    let outcome = match predopt_solve(inst, predictor, predopt, solver) {
        Ok(r) => Some(r),
        Err(PipelineError::Infeasible | PipelineError::Verification(_) | PipelineError::Numerical { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let time_predopt = outcome.as_ref().map_or_else(|| start.elapsed().as_secs_f64(), |r| r.total_time());

    let accuracy = match reference {
        Some(sol) => Some(decision_accuracy(&predictor.predict(inst)?, sol)? / 100.0),
        None => None,
    };

    let heuristic = if config.heuristic {
        Some(match inst {
            Instance::Mclsp(m) => relax_and_fix(m, solver, &config.baseline)?,
            Instance::Msmk(k) => adaptive_fixing(k, solver, &config.baseline)?,
        })
    } else {
        None
    };

    Ok(Evaluated {
        record: InstanceRecord {
            instance_id: id,
            time_cpx: baseline.wall_time,
            time_predopt,
            time_heur: heuristic.as_ref().map(|h| h.wall_time),
            obj_cpx: reference.map(|s| s.objective),
            obj_predopt: outcome.as_ref().map(|r| r.solution.objective),
            obj_heur: heuristic
                .as_ref()
                .filter(|h| h.status == HeuristicStatus::Feasible)
                .map(|h| h.solution.objective),
            accuracy,
            final_pred_level: outcome.as_ref().map(|r| r.final_pred_level),
            loop1_iters: outcome.as_ref().map_or(0, |r| r.feasibility_iterations),
            loop2_iters: outcome.as_ref().map_or(0, |r| r.resolution_iterations),
        },
        status: baseline.solution.status,
        trace: baseline.trace,
    })
}

/// Runs the baseline, PredOpt and the family heuristic on every test
/// instance. Instances are spread over `config.workers` threads, each running
/// one solve at a time; results keep instance order.
pub fn run_experiment(
    config: &ExperimentConfig,
    predictor: &dyn Predictor,
    predictor_name: &str,
    solver: &dyn MipSolver,
) -> Result<ExperimentOutput, EvalError> {
    if config.count == 0 {
        return Err(EvalError::Config("the test set is empty".into()));
    }
    if config.workers == 0 {
        return Err(EvalError::Config("at least one worker is required".into()));
    }
    config.baseline.validate()?;
    let predopt = config.predopt_config();
    predopt.validate()?;
    let instances = config.instances()?;

    let itemwise;
    let predictor: &dyn Predictor = match &config.itemwise {
        Some(iw) => {
            itemwise = ItemwisePredictor {
                inner: predictor,
                sub_items: iw.sub_items,
                delta: iw.delta,
                seed: iw.seed,
            };
            &itemwise
        }
        None => predictor,
    };
    // fail on dimension mismatches before the first solve
    predictor
        .predict(&instances[0])
        .map_err(|e| EvalError::Config(format!("predictor rejects the test instances: {e}")))?;

    let ids: Vec<String> = (0..config.count as u64)
        .map(|k| format!("{}-{}", config.name, config.generator.seed + k))
        .collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Evaluated, EvalError>>>> =
        Mutex::new((0..instances.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(instances.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= instances.len() {
                    break;
                }
                let out = evaluate_instance(ids[k].clone(), &instances[k], predictor, config, &predopt, solver);
                let failed = out.is_err();
                slots.lock().expect("worker panicked")[k] = Some(out);
                if failed {
                    next.store(instances.len(), Ordering::SeqCst);
                }
            });
        }
    });

    let mut records = Vec::with_capacity(instances.len());
    let mut statuses = Vec::with_capacity(instances.len());
    let mut traces = Vec::with_capacity(instances.len());
    for slot in slots.into_inner().expect("worker panicked") {
        let Some(ev) = slot else { continue };
        let ev = ev?;
        traces.push((ev.record.instance_id.clone(), ev.trace));
        statuses.push(ev.status);
        records.push(ev.record);
    }
    let provenance = Provenance {
        name: config.name.clone(),
        family: config.generator.family,
        generator: config.generator.clone(),
        count: config.count,
        predopt,
        baseline: config.baseline.clone(),
        itemwise: config.itemwise.clone(),
        backend: solver.name().to_string(),
        predictor: predictor_name.to_string(),
    };
    let report = ExperimentReport::from_records(provenance, &records, statuses)?;
    Ok(ExperimentOutput { report, records, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{OraclePredictor, RandomPredictor};
    use crate::solver::BundledSolver;

    #[test]
    fn gap_examples() {
        assert!((opt_gap(100.0, 100.02).unwrap() - 0.02).abs() < 1e-9);
        assert_eq!(opt_gap(7.0, 7.0).unwrap(), 0.0);
        assert!((opt_gap(100.0, 99.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(opt_gap(0.0, 1.0), Err(EvalError::UndefinedGap)));
    }

    #[test]
    fn time_examples() {
        let r = time_improvement(659.2, 3.4);
        assert!((r.factor - 193.882_352_9).abs() < 1e-6 && !r.clamped);
        assert_eq!(time_improvement(2.0, 2.0).factor, 1.0);
        let z = time_improvement(1.0, 0.0);
        assert!(z.clamped);
        assert_eq!(z.factor, 1000.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[true, false], &[true, false]).unwrap(), 100.0);
        assert_eq!(accuracy(&[true, true], &[true, false]).unwrap(), 50.0);
        assert!(accuracy(&[true], &[true, false]).is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        let w = wilcoxon_one_sided(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(w.p_value, 1.0 / 32.0);
        assert!(w.exact);
        let w = wilcoxon_one_sided(&[2.0, -1.0]).unwrap();
        assert_eq!((w.w_plus, w.p_value), (2.0, 0.5));
        let w = wilcoxon_one_sided(&[0.0, 0.0]).unwrap();
        assert!(w.degenerate && w.p_value == 1.0);
    }

    #[test]
    fn all_negative_diffs_give_no_evidence() {
        // W⁺ = 0 and every pattern has W⁺ ≥ 0
        let w = wilcoxon_one_sided(&[-1.0, -2.0, -3.0]).unwrap();
        assert_eq!(w.w_plus, 0.0);
        assert_eq!(w.p_value, 1.0);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn normal_approximation_is_close_to_exact_near_the_switch() {
        let diffs: Vec<f64> = (1..=26).map(|k| if k % 3 == 0 { -(k as f64) } else { k as f64 }).collect();
        let approx = wilcoxon_one_sided(&diffs).unwrap();
        assert!(!approx.exact);
        let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        let exact = exact_upper_tail(&average_ranks(&abs), approx.w_plus);
        assert!((approx.p_value - exact).abs() < 5e-3, "{} vs {exact}", approx.p_value);
    }

    fn small_config(family: Family) -> ExperimentConfig {
        let generator = match family {
            Family::Mclsp => GenConfig::mclsp(40, 2, 4, 10.0),
            Family::Msmk => GenConfig::msmk(40, 3, 3, 2),
        };
        ExperimentConfig::new(generator, 3)
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let mut c = small_config(Family::Mclsp);
        c.count = 0;
        let r = run_experiment(&c, &RandomPredictor { seed: 0 }, "random", &BundledSolver);
        assert!(matches!(r, Err(EvalError::Config(_))));
    }

    #[test]
    fn oracle_experiment_matches_the_baseline() {
        for family in [Family::Mclsp, Family::Msmk] {
            let c = small_config(family);
            let oracle = OraclePredictor {
                solver: BundledSolver,
                options: SolverOptions::default(),
                eta: 0.95,
            };
            let out = run_experiment(&c, &oracle, "oracle", &BundledSolver).unwrap();
            assert_eq!(out.records.len(), 3);
            assert_eq!(out.report.accuracy_pct, Some(100.0));
            assert!(out.report.opt_gap_predopt_pct.unwrap() < 1e-6);
            assert_eq!(out.report.predopt_infeasible, 0);
            assert!(out.report.wilcoxon.is_some());
        }
    }

    #[test]
    fn report_is_recomputable_from_csv() {
        let c = small_config(Family::Mclsp);
        let out = run_experiment(&c, &RandomPredictor { seed: 4 }, "random", &BundledSolver).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&out.records, &mut buf).unwrap();
        let header = String::from_utf8_lossy(&buf).lines().next().unwrap().to_string();
        assert_eq!(
            header,
            "instanceId,timeCPX,timePredOpt,timeRF_or_AF,objCPX,objPredOpt,objHeur,accuracy,finalPredLevel,loop1Iters,loop2Iters"
        );
        let back = read_records_csv(buf.as_slice()).unwrap();
        assert_eq!(back, out.records);
        let again =
            ExperimentReport::from_records(out.report.provenance.clone(), &back, out.report.baseline_status.clone())
                .unwrap();
        assert_eq!(again, out.report);
        let text = out.report.to_text();
        for label in ["timeCPX", "timeImpPredOpt", "p-value", "accuracy(%)", "optGapPredOpt(%)", "optGapRF(%)"] {
            assert!(text.contains(label), "{label}");
        }
    }

    #[test]
    fn workers_do_not_change_results() {
        let mut c = small_config(Family::Msmk);
        let a = run_experiment(&c, &RandomPredictor { seed: 2 }, "random", &BundledSolver).unwrap();
        c.workers = 2;
        let b = run_experiment(&c, &RandomPredictor { seed: 2 }, "random", &BundledSolver).unwrap();
        let strip = |o: &ExperimentOutput| {
            o.records
                .iter()
                .map(|r| (r.instance_id.clone(), r.obj_cpx, r.obj_predopt, r.obj_heur, r.accuracy, r.final_pred_level))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn writes_all_artifacts() {
        let c = small_config(Family::Mclsp);
        let out = run_experiment(&c, &RandomPredictor { seed: 1 }, "random", &BundledSolver).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write_to(dir.path()).unwrap();
        for f in ["report.json", "report.txt", "report.csv", "instances.csv", "traces/experiment-40.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let trace = std::fs::read_to_string(dir.path().join("traces/experiment-40.csv")).unwrap();
        assert!(trace.starts_with("elapsed_s,incumbent\n"));
    }
}
