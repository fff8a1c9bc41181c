//! Browser bindings: solve a generated instance, run PredOpt with a noisy
//! oracle, and inspect decoder attention. Every call returns a JSON string.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use predopt::heuristics::{adaptive_fixing, relax_and_fix};
use predopt::instances::{Family, GenConfig, Instance};
use predopt::milp::build_model;
use predopt::nn::{attention_window, decoder_attend_predict, encoder_forward, DecoderState, Seq2SeqConfig, Seq2SeqModel};
use predopt::pipeline::{
    decision_accuracy, encode_features, feature_width, label_width, predopt_solve, OraclePredictor, PipelineError,
    PredOptConfig, PredictionSet, Predictor,
};
use predopt::solver::{BundledSolver, MipSolver, SolverOptions};

const MAX_ITEMS: usize = 4;
const MAX_PERIODS: usize = 12;
const SOLVE_SECONDS: f64 = 20.0;

fn family(name: &str) -> Result<Family, String> {
    match name {
        "mclsp" => Ok(Family::Mclsp),
        "msmk" => Ok(Family::Msmk),
        other => Err(format!("unknown family `{other}`")),
    }
}

fn generate(fam: Family, items: usize, periods: usize, seed: u64) -> Result<Instance, String> {
    if !(1..=MAX_ITEMS).contains(&items) || !(1..=MAX_PERIODS).contains(&periods) {
        return Err(format!("the demo supports 1..={MAX_ITEMS} items and 1..={MAX_PERIODS} periods"));
    }
    let config = match fam {
        Family::Mclsp => GenConfig::mclsp(seed, items, periods, 10.0 * items as f64),
        Family::Msmk => GenConfig::msmk(seed, items, periods, 2),
    };
    config.generate().map_err(|e| e.to_string())
}

fn options() -> SolverOptions {
    SolverOptions::default().with_time_limit(SOLVE_SECONDS)
}

/// Decision bits as an items × periods grid.
fn plan(inst: &Instance, values: &[f64]) -> Vec<Vec<u8>> {
    let nt = inst.periods();
    (0..inst.items())
        .map(|i| (0..nt).map(|t| (values[i * nt + t] > 0.5) as u8).collect())
        .collect()
}

pub fn solve_json(family_name: &str, items: usize, periods: usize, seed: u64) -> Result<Value, String> {
    let inst = generate(family(family_name)?, items, periods, seed)?;
    let exact = BundledSolver
        .solve(&build_model(&inst), &options())
        .map_err(|e| e.to_string())?;
    let heur = match &inst {
        Instance::Mclsp(m) => relax_and_fix(m, &BundledSolver, &options()),
        Instance::Msmk(k) => adaptive_fixing(k, &BundledSolver, &options()),
    }
    .map_err(|e| e.to_string())?;
    Ok(json!({
        "instance": inst,
        "exact": {
            "status": exact.solution.status,
            "objective": exact.solution.objective,
            "nodes": exact.nodes,
            "seconds": exact.wall_time,
            "plan": exact.solution.has_values().then(|| plan(&inst, &exact.solution.values)),
        },
        "heuristic": {
            "name": if inst.family() == Family::Mclsp { "relax-and-fix" } else { "adaptive fixing" },
            "status": heur.status,
            "objective": heur.solution.objective,
            "seconds": heur.wall_time,
            "plan": heur.solution.has_values().then(|| plan(&inst, &heur.solution.values)),
        },
    }))
}

/// Oracle predictions whose decision entries are each replaced, with
/// probability `noise`, by a confident wrong guess.
struct NoisyOracle {
    oracle: OraclePredictor<BundledSolver>,
    noise: f64,
    seed: u64,
}

impl Predictor for NoisyOracle {
    fn predict(&self, inst: &Instance) -> Result<PredictionSet, PipelineError> {
        let mut pred = self.oracle.predict(inst)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (rows, cols) = (pred.probs.rows, pred.probs.cols);
        for t in 0..rows {
            for i in 0..inst.items() {
                let p = &mut pred.probs.data[t * cols + i];
                let truth = *p > 0.5;
                let conf: f64 = rng.gen_range(0.5..1.0);
                let flip = rng.gen_bool(self.noise);
                *p = if truth != flip { conf } else { 1.0 - conf };
            }
        }
        Ok(pred)
    }
}

pub fn predopt_json(
    family_name: &str,
    items: usize,
    periods: usize,
    seed: u64,
    init_level: f64,
    noise: f64,
) -> Result<Value, String> {
    if !(0.0..=1.0).contains(&noise) {
        return Err("noise must lie in [0, 1]".into());
    }
    let inst = generate(family(family_name)?, items, periods, seed)?;
    let mut config = PredOptConfig::for_family(inst.family());
    config.init_level = init_level;
    config.resolve = options();
    let predictor = NoisyOracle {
        oracle: OraclePredictor {
            solver: BundledSolver,
            options: options(),
            eta: config.eta,
        },
        noise,
        seed,
    };
    let exact = BundledSolver
        .solve(&build_model(&inst), &options())
        .map_err(|e| e.to_string())?;
    let pred = predictor.predict(&inst).map_err(|e| e.to_string())?;
    let result = predopt_solve(&inst, &predictor, &config, &BundledSolver).map_err(|e| e.to_string())?;
    let accuracy = decision_accuracy(&pred, &exact.solution).map_err(|e| e.to_string())?;
    let gap = (result.solution.objective - exact.solution.objective).abs() / exact.solution.objective.abs().max(1e-12);
    Ok(json!({
        "accuracy": accuracy,
        "probabilities": (0..inst.items())
            .map(|i| (0..inst.periods()).map(|t| pred.probs.get(t, i)).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
        "optimum": exact.solution.objective,
        "objective": result.solution.objective,
        "gap_pct": 100.0 * gap,
        "final_level": result.final_pred_level,
        "feasibility_level": result.feasibility_level,
        "loop1": result.feasibility_iterations,
        "loop2": result.resolution_iterations,
        "seconds": result.total_time(),
        "baseline_seconds": exact.wall_time,
        "plan": plan(&inst, &result.solution.values),
    }))
}

#[derive(Serialize)]
struct AttentionRow {
    step: usize,
    start: usize,
    weights: Vec<f64>,
}

/// Local attention of an untrained network over one lot-sizing instance.
pub fn attention_json(periods: usize, window: usize, seed: u64) -> Result<Value, String> {
    let inst = generate(Family::Mclsp, 2, periods, seed)?;
    let config = Seq2SeqConfig {
        encoder_hidden: 8,
        layers: 1,
        window,
        ..Seq2SeqConfig::new(feature_width(Family::Mclsp, 2, 0), label_width(Family::Mclsp, 2, 0))
    };
    let model = Seq2SeqModel::new(config, seed).map_err(|e| e.to_string())?;
    let features = encode_features(&inst, None).map_err(|e| e.to_string())?;
    let enc = encoder_forward(&model, &features.data).map_err(|e| e.to_string())?;
    let mut state = DecoderState::zeros(&model.config);
    let mut y_prev = vec![0.0; model.config.output_dim];
    let mut rows = Vec::with_capacity(periods);
    for t in 0..periods {
        let step = decoder_attend_predict(&model, &y_prev, &state, &enc, t).map_err(|e| e.to_string())?;
        debug_assert_eq!(step.window, attention_window(t, periods, window));
        rows.push(AttentionRow {
            step: t,
            start: step.window.start,
            weights: step.attention.clone(),
        });
        y_prev = step.probabilities.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
        state = step.state;
    }
    Ok(json!({ "periods": periods, "window": window, "rows": rows }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn solve(family: &str, items: usize, periods: usize, seed: u32) -> Result<String, JsValue> {
    to_js(solve_json(family, items, periods, seed as u64))
}

#[wasm_bindgen]
pub fn run_predopt(
    family: &str,
    items: usize,
    periods: usize,
    seed: u32,
    init_level: f64,
    noise: f64,
) -> Result<String, JsValue> {
    to_js(predopt_json(family, items, periods, seed as u64, init_level, noise))
}

#[wasm_bindgen]
pub fn attention(periods: usize, window: usize, seed: u32) -> Result<String, JsValue> {
    to_js(attention_json(periods, window, seed as u64))
}
