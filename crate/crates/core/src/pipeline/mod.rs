//! Feature and label encoding, predictors, and the two-loop fix-and-solve
//! procedure.

mod dataset;
mod itemwise;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use web_time::Instant;

use crate::instances::{Family, Instance, InstanceError};
use crate::milp::{
    build_model, build_relaxation, fix_variables, label_tight, ConstraintTag, MilpError, Solution, SolveStatus,
    TightLabels, VarId,
};
use crate::nn::{self, NnError, Seq2SeqModel, Tensor};
use crate::solver::{MipSolver, SolverError, SolverOptions};

pub use dataset::{
    build_dataset, default_lr, read_dataset, train_predictor, write_dataset, Dataset, DatasetHeader, DatasetRecord,
    TrainSettings,
};
pub use itemwise::{itemwise_predict, sub_instance, ItemwiseOutput, ItemwisePredictor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Milp(#[from] MilpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("{0}")]
    Usage(String),
    #[error("solver reported a numerical failure in {stage}")]
    Numerical { stage: &'static str },
    #[error("the original model is infeasible")]
    Infeasible,
    #[error("returned solution violates the original model: {0}")]
    Verification(String),
    #[error("{path}: {detail}")]
    Data { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBounds {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// Min-max bounds per input channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub family: Family,
    pub channels: Vec<ChannelBounds>,
}

fn chan(name: &str, lo: f64, hi: f64) -> ChannelBounds {
    ChannelBounds {
        name: name.to_string(),
        lo,
        hi,
    }
}

impl FeatureNorm {
    /// Generator ranges of the lot-sizing family for a capacity ratio and a
    /// setup-to-holding ratio.
    pub fn mclsp(cap_ratio: f64, setup_to_hold: f64) -> Self {
        Self {
            family: Family::Mclsp,
            channels: vec![
                chan("demand", 500.0, 1500.0),
                chan("prod_cost", 1.0, 200.0),
                chan("setup_cost", 0.9 * setup_to_hold, 1.1 * setup_to_hold * 100.0),
                chan("hold_cost", 1.0, 100.0),
                chan("capacity", 0.8 * cap_ratio * 500.0, 1.2 * cap_ratio * 1500.0),
            ],
        }
    }

    /// Generator ranges of the knapsack family with `items` items.
    pub fn msmk(items: usize) -> Self {
        let n = items as f64;
        Self {
            family: Family::Msmk,
            channels: vec![
                chan("profit", 1.0, 1000.0),
                chan("bonus", 1.0, 1000.0),
                chan("weight", 1.0, 1000.0),
                chan("capacity", 0.5 * n, 0.8 * 1000.0 * n),
            ],
        }
    }

    pub fn for_config(config: &crate::instances::GenConfig) -> Self {
        match config.family {
            Family::Mclsp => Self::mclsp(config.cap_ratio, config.setup_to_hold),
            Family::Msmk => Self::msmk(config.items),
        }
    }
}

/// Raw per-period values tagged with their channel index. `None` marks
/// padding that encodes as 0.
fn raw_rows(inst: &Instance) -> Vec<Vec<(usize, Option<f64>)>> {
    match inst {
        Instance::Mclsp(m) => (0..m.periods)
            .map(|t| {
                let mut row = Vec::with_capacity(4 * m.items + 1);
                for (ch, src) in [&m.demand, &m.prod_cost, &m.setup_cost, &m.hold_cost].into_iter().enumerate() {
                    row.extend(src.iter().map(|r| (ch, Some(r[t] as f64))));
                }
                row.push((4, Some(m.capacity[t] as f64)));
                row
            })
            .collect(),
        Instance::Msmk(k) => (0..k.periods)
            .map(|t| {
                let mut row = Vec::with_capacity(2 * k.items + k.items * k.resources + k.resources);
                row.extend(k.profit.iter().map(|r| (0, Some(r[t] as f64))));
                row.extend(k.bonus.iter().map(|r| (1, r.get(t).map(|&b| b as f64))));
                for w in &k.weight {
                    row.extend(w.iter().map(|wj| (2, Some(wj[t] as f64))));
                }
                row.extend(k.capacity.iter().map(|c| (3, Some(c[t] as f64))));
                row
            })
            .collect(),
    }
}

/// Normalized network input, `T×features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeq {
    pub data: Tensor,
    pub norm: FeatureNorm,
    /// Some value fell outside the bounds and was clamped to [0, 1].
    pub clamped: bool,
    /// No bounds were supplied; observed min/max were used instead.
    pub observed_bounds: bool,
}

pub fn feature_width(family: Family, items: usize, resources: usize) -> usize {
    match family {
        Family::Mclsp => 4 * items + 1,
        Family::Msmk => 2 * items + items * resources + resources,
    }
}

pub fn label_width(family: Family, items: usize, resources: usize) -> usize {
    match family {
        Family::Mclsp => 2 * items + 1,
        Family::Msmk => items + resources,
    }
}

/// Encodes an instance. Without `norm` the observed per-channel min/max are
/// used and `observed_bounds` is set.
pub fn encode_features(inst: &Instance, norm: Option<&FeatureNorm>) -> Result<FeatureSeq, PipelineError> {
    inst.validate()?;
    let rows = raw_rows(inst);
    let (norm, observed) = match norm {
        Some(n) => {
            if n.family != inst.family() {
                return Err(PipelineError::Dims(format!(
                    "normalization is for {}, instance is {}",
                    n.family,
                    inst.family()
                )));
            }
            (n.clone(), false)
        }
        None => {
            let base = match inst {
                Instance::Mclsp(_) => FeatureNorm::mclsp(1.0, 1.0),
                Instance::Msmk(_) => FeatureNorm::msmk(1),
            };
            let mut channels: Vec<ChannelBounds> = base
                .channels
                .into_iter()
                .map(|c| chan(&c.name, f64::INFINITY, f64::NEG_INFINITY))
                .collect();
            for &(ch, v) in rows.iter().flatten() {
                if let Some(v) = v {
                    channels[ch].lo = channels[ch].lo.min(v);
                    channels[ch].hi = channels[ch].hi.max(v);
                }
            }
            (
                FeatureNorm {
                    family: inst.family(),
                    channels,
                },
                true,
            )
        }
    };
    let width = feature_width(inst.family(), inst.items(), inst.resources());
    let mut data = Tensor::zeros(rows.len(), width);
    let mut clamped = false;
    for (t, row) in rows.iter().enumerate() {
        for (k, &(ch, v)) in row.iter().enumerate() {
            let Some(v) = v else { continue };
            let ChannelBounds { lo, hi, .. } = norm.channels[ch];
            let z = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            if !(0.0..=1.0).contains(&z) {
                clamped = true;
            }
            data.data[t * width + k] = z.clamp(0.0, 1.0);
        }
    }
    Ok(FeatureSeq {
        data,
        norm,
        clamped,
        observed_bounds: observed,
    })
}

/// Binary targets, `T×labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSeq {
    pub data: Tensor,
}

/// Column of each label in a label row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelLayout {
    pub family: Family,
    pub items: usize,
    pub resources: usize,
}

impl LabelLayout {
    pub fn of(inst: &Instance) -> Self {
        Self {
            family: inst.family(),
            items: inst.items(),
            resources: inst.resources(),
        }
    }

    pub fn width(&self) -> usize {
        label_width(self.family, self.items, self.resources)
    }

    /// Tags of the tight block of period `t`, in column order.
    pub fn tight_tags(&self, t: usize) -> Vec<ConstraintTag> {
        match self.family {
            Family::Mclsp => (0..self.items)
                .map(|i| ConstraintTag::SetupLink { item: i, period: t })
                .chain([ConstraintTag::Capacity { period: t }])
                .collect(),
            Family::Msmk => (0..self.resources)
                .map(|j| ConstraintTag::Knapsack { resource: j, period: t })
                .collect(),
        }
    }
}

/// Labels of an optimal solution: decision binaries then tight flags.
pub fn extract_labels(inst: &Instance, optimal: &Solution, eta: f64) -> Result<LabelSeq, PipelineError> {
    let model = build_model(inst);
    let tight = label_tight(&model, optimal, eta)?;
    let layout = LabelLayout::of(inst);
    let (ni, nt) = (inst.items(), inst.periods());
    let width = layout.width();
    let mut data = Tensor::zeros(nt, width);
    for t in 0..nt {
        for i in 0..ni {
            data.data[t * width + i] = if optimal.bit(i * nt + t) { 1.0 } else { 0.0 };
        }
        for (k, tag) in layout.tight_tags(t).iter().enumerate() {
            let flag = tight.is_tight(tag).ok_or(MilpError::MissingLabel(*tag))?;
            data.data[t * width + ni + k] = if flag { 1.0 } else { 0.0 };
        }
    }
    Ok(LabelSeq { data })
}

/// Predicted probabilities in the label layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub layout: LabelLayout,
    pub probs: Tensor,
}

impl PredictionSet {
    pub fn periods(&self) -> usize {
        self.probs.rows
    }

    /// Decision probabilities in variable order (`i·T + t`).
    pub fn decision_probs(&self) -> Vec<f64> {
        let (ni, nt) = (self.layout.items, self.periods());
        let mut out = vec![0.0; ni * nt];
        for t in 0..nt {
            for i in 0..ni {
                out[i * nt + t] = self.probs.get(t, i);
            }
        }
        out
    }

    /// Tight probabilities keyed by constraint.
    pub fn tight_probs(&self) -> BTreeMap<ConstraintTag, f64> {
        let ni = self.layout.items;
        let mut out = BTreeMap::new();
        for t in 0..self.periods() {
            for (k, tag) in self.layout.tight_tags(t).into_iter().enumerate() {
                out.insert(tag, self.probs.get(t, ni + k));
            }
        }
        out
    }

    /// Tight labels from probabilities at or above `threshold`.
    pub fn tight_labels(&self, threshold: f64, eta: f64) -> TightLabels {
        TightLabels {
            eta,
            labels: self.tight_probs().into_iter().map(|(k, p)| (k, p >= threshold)).collect(),
        }
    }

    fn check(&self, inst: &Instance) -> Result<(), PipelineError> {
        if self.layout != LabelLayout::of(inst) || self.periods() != inst.periods() {
            return Err(PipelineError::Dims(format!(
                "predictions for {:?} with {} periods do not fit the instance",
                self.layout,
                self.periods()
            )));
        }
        Ok(())
    }
}

/// Number of fixed variables at `level` out of `n`.
pub fn fix_count(level: f64, n: usize) -> usize {
    ((level * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Fixes the `⌊level·N⌋` most confident decisions to their rounded values.
/// Confidence is `max(p, 1−p)`; ties go to the lower index; 0.5 rounds up.
pub fn rank_and_fix(decision_probs: &[f64], level: f64) -> BTreeMap<VarId, bool> {
    let mut order: Vec<usize> = (0..decision_probs.len()).collect();
    let conf = |p: f64| p.max(1.0 - p);
    order.sort_by(|&a, &b| conf(decision_probs[b]).total_cmp(&conf(decision_probs[a])).then(a.cmp(&b)));
    order
        .into_iter()
        .take(fix_count(level, decision_probs.len()))
        .map(|v| (v, decision_probs[v] >= 0.5))
        .collect()
}

pub trait Predictor: Sync {
    fn predict(&self, inst: &Instance) -> Result<PredictionSet, PipelineError>;
}

/// What a trained network needs besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub family: Family,
    pub items: usize,
    pub resources: usize,
    pub norm: FeatureNorm,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPredictor {
    pub model: Seq2SeqModel,
    pub meta: ModelMeta,
}

impl NeuralPredictor {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let meta = serde_json::to_value(&self.meta).expect("metadata serializes");
        nn::save_checkpoint(&self.model, &meta, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let (model, meta) = nn::load_checkpoint(path)?;
        let meta: ModelMeta = serde_json::from_value(meta).map_err(|e| PipelineError::Data {
            path: path.display().to_string(),
            detail: format!("bad model metadata: {e}"),
        })?;
        let want_in = feature_width(meta.family, meta.items, meta.resources);
        let want_out = label_width(meta.family, meta.items, meta.resources);
        if model.config.input_dim != want_in || model.config.output_dim != want_out {
            return Err(PipelineError::Data {
                path: path.display().to_string(),
                detail: "network widths disagree with the stored dimensions".into(),
            });
        }
        Ok(Self { model, meta })
    }

    pub fn check_dims(&self, inst: &Instance) -> Result<(), PipelineError> {
        if inst.family() != self.meta.family || inst.items() != self.meta.items || inst.resources() != self.meta.resources
        {
            return Err(PipelineError::Dims(format!(
                "model expects {} with I={} J={}, instance is {} with I={} J={}",
                self.meta.family,
                self.meta.items,
                self.meta.resources,
                inst.family(),
                inst.items(),
                inst.resources()
            )));
        }
        Ok(())
    }
}

impl Predictor for NeuralPredictor {
    fn predict(&self, inst: &Instance) -> Result<PredictionSet, PipelineError> {
        self.check_dims(inst)?;
        let features = encode_features(inst, Some(&self.meta.norm))?;
        let probs = nn::predict(&self.model, &features.data)?;
        Ok(PredictionSet {
            layout: LabelLayout::of(inst),
            probs,
        })
    }
}

/// Emits the exact labels of an optimal solution, as probabilities `1−ε` / `ε`.
#[derive(Debug, Clone)]
pub struct OraclePredictor<S> {
    pub solver: S,
    pub options: SolverOptions,
    pub eta: f64,
}

pub const ORACLE_MARGIN: f64 = 1e-6;

impl<S: MipSolver> Predictor for OraclePredictor<S> {
    fn predict(&self, inst: &Instance) -> Result<PredictionSet, PipelineError> {
        let model = build_model(inst);
        let res = self.solver.solve(&model, &self.options)?;
        if res.solution.status != SolveStatus::Optimal {
            return Err(PipelineError::Usage(format!(
                "oracle needs an optimal solution, solver returned {:?}",
                res.solution.status
            )));
        }
        let labels = extract_labels(inst, &res.solution, self.eta)?;
        let probs = labels
            .data
            .data
            .iter()
            .map(|&y| if y > 0.5 { 1.0 - ORACLE_MARGIN } else { ORACLE_MARGIN })
            .collect();
        Ok(PredictionSet {
            layout: LabelLayout::of(inst),
            probs: Tensor::from_vec(labels.data.rows, labels.data.cols, probs),
        })
    }
}

/// A fixed prediction, for tests and replays.
#[derive(Debug, Clone)]
pub struct FixedPredictor(pub PredictionSet);

impl Predictor for FixedPredictor {
    fn predict(&self, inst: &Instance) -> Result<PredictionSet, PipelineError> {
        self.0.check(inst)?;
        Ok(self.0.clone())
    }
}

/// Uniform probabilities in (0, 1), seeded by `seed` and the instance content.
#[derive(Debug, Clone, Copy)]
pub struct RandomPredictor {
    pub seed: u64,
}

/// FNV-1a over the instance JSON; stable across runs and platforms.
pub fn instance_fingerprint(inst: &Instance) -> u64 {
    inst.to_json()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Predictor for RandomPredictor {
    fn predict(&self, inst: &Instance) -> Result<PredictionSet, PipelineError> {
        let layout = LabelLayout::of(inst);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ instance_fingerprint(inst));
        let n = inst.periods() * layout.width();
        let probs = (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
        Ok(PredictionSet {
            layout,
            probs: Tensor::from_vec(inst.periods(), layout.width(), probs),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredOptConfig {
    pub init_level: f64,
    pub reduce_level: f64,
    pub eta: f64,
    pub tight_threshold: f64,
    /// Options of the feasibility checks; feasibility-only mode is forced.
    pub feasibility: SolverOptions,
    pub resolve: SolverOptions,
}

impl PredOptConfig {
    /// Starting level 0.80 for lot sizing and 0.60 for the knapsack family.
    pub fn for_family(family: Family) -> Self {
        Self {
            init_level: match family {
                Family::Mclsp => 0.80,
                Family::Msmk => 0.60,
            },
            reduce_level: 0.05,
            eta: 0.95,
            tight_threshold: 0.5,
            feasibility: SolverOptions::default().feasibility(),
            resolve: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.init_level) {
            return Err(PipelineError::Usage(format!("initial level {} outside [0, 1]", self.init_level)));
        }
        if !(self.reduce_level > 0.0 && self.reduce_level <= 1.0) {
            return Err(PipelineError::Usage(format!("reduce level {} outside (0, 1]", self.reduce_level)));
        }
        if !(0.0..=1.0).contains(&self.eta) || !(0.0..=1.0).contains(&self.tight_threshold) {
            return Err(PipelineError::Usage("eta and tight threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Level after `k` reductions.
    pub fn level(&self, k: usize) -> f64 {
        (self.init_level - k as f64 * self.reduce_level).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredOptResult {
    pub final_pred_level: f64,
    pub feasibility_level: f64,
    pub feasibility_iterations: usize,
    pub resolution_iterations: usize,
    pub solution: Solution,
    pub prediction_time: f64,
    pub feasibility_time: f64,
    pub resolve_time: f64,
    /// Rows kept in the relaxation used by the feasibility loop.
    pub relaxation_rows: usize,
}

impl PredOptResult {
    pub fn total_time(&self) -> f64 {
        self.prediction_time + self.feasibility_time + self.resolve_time
    }
}

/// Predict, then search for a fixing level that is feasible first in the
/// relaxation built from the tight predictions and then in the original model.
pub fn predopt_solve(
    inst: &Instance,
    predictor: &dyn Predictor,
    config: &PredOptConfig,
    solver: &dyn MipSolver,
) -> Result<PredOptResult, PipelineError> {
    config.validate()?;
    inst.validate()?;
    let start = Instant::now();
    let pred = predictor.predict(inst)?;
    pred.check(inst)?;
    let prediction_time = start.elapsed().as_secs_f64();
    let original = build_model(inst);
    let decision = pred.decision_probs();

    let start = Instant::now();
    let relaxed = build_relaxation(&original, &pred.tight_labels(config.tight_threshold, config.eta))?;
    let feas_opts = SolverOptions {
        feasibility_only: true,
        ..config.feasibility.clone()
    };
    let mut k = 0;
    let mut loop1 = 0;
    loop {
        loop1 += 1;
        let level = config.level(k);
        let fixed = fix_variables(&relaxed, &rank_and_fix(&decision, level))?;
        let res = solver.solve(&fixed, &feas_opts)?;
        match res.solution.status {
            SolveStatus::NumericalFailure => return Err(PipelineError::Numerical { stage: "feasibility check" }),
            _ if res.solution.has_values() => break,
            _ if level == 0.0 => break,
            _ => k += 1,
        }
    }
    let feasibility_level = config.level(k);
    let feasibility_time = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut loop2 = 0;
    let solution = loop {
        loop2 += 1;
        let level = config.level(k);
        let fixed = fix_variables(&original, &rank_and_fix(&decision, level))?;
        let res = solver.solve(&fixed, &config.resolve)?;
        match res.solution.status {
            SolveStatus::NumericalFailure => return Err(PipelineError::Numerical { stage: "resolution" }),
            SolveStatus::Unbounded => return Err(PipelineError::Usage("model is unbounded".into())),
            _ if res.solution.has_values() => break res.solution,
            SolveStatus::Infeasible if level == 0.0 => return Err(PipelineError::Infeasible),
            _ if level == 0.0 => break res.solution,
            _ => k += 1,
        }
    };
    let resolve_time = start.elapsed().as_secs_f64();
    if solution.has_values() && !original.is_feasible(&solution.values) {
        return Err(PipelineError::Verification(original.max_violation(&solution.values).1));
    }
    Ok(PredOptResult {
        final_pred_level: config.level(k),
        feasibility_level,
        feasibility_iterations: loop1,
        resolution_iterations: loop2,
        solution,
        prediction_time,
        feasibility_time,
        resolve_time,
        relaxation_rows: relaxed.constraints.len(),
    })
}

/// Percentage of decision binaries whose rounded prediction matches `reference`.
pub fn decision_accuracy(pred: &PredictionSet, reference: &Solution) -> Result<f64, PipelineError> {
    let probs = pred.decision_probs();
    if reference.values.len() < probs.len() {
        return Err(PipelineError::Dims(format!(
            "reference has {} values, predictions cover {} decisions",
            reference.values.len(),
            probs.len()
        )));
    }
    let hits = probs
        .iter()
        .enumerate()
        .filter(|&(v, &p)| (p >= 0.5) == reference.bit(v))
        .count();
    Ok(100.0 * hits as f64 / probs.len().max(1) as f64)
}
