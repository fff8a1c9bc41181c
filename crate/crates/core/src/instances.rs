//! Problem instances for the two sequential families: multi-item capacitated
//! lot sizing and multi-stage multi-dimensional knapsack.
//!
//! Instances are generated from a seeded ChaCha stream so that a
//! [`GenConfig`] fully determines the output, and are stored as a JSON
//! document with a `family` discriminator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Attempts before MCLSP generation gives up on the cumulative-capacity check.
pub const MAX_GEN_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("invalid instance: {field}: {detail}")]
    Validation { field: String, detail: String },
    #[error("cumulative capacity never covered cumulative demand after {attempts} draws (cap ratio {cap_ratio})")]
    CapacityUnsatisfiable { attempts: usize, cap_ratio: f64 },
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: impl Into<String>, detail: impl Into<String>) -> InstanceError {
    InstanceError::Validation {
        field: field.into(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mclsp,
    Msmk,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Mclsp => f.write_str("mclsp"),
            Family::Msmk => f.write_str("msmk"),
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mclsp" => Ok(Family::Mclsp),
            "msmk" => Ok(Family::Msmk),
            other => Err(format!("unknown family `{other}` (expected mclsp or msmk)")),
        }
    }
}

/// Multi-item capacitated lot-sizing data. Matrices are indexed `[item][period]`.
/// Initial inventory is zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LotSizingInstance {
    #[serde(rename = "I")]
    pub items: usize,
    #[serde(rename = "T")]
    pub periods: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub demand: Vec<Vec<i64>>,
    pub prod_cost: Vec<Vec<i64>>,
    pub setup_cost: Vec<Vec<i64>>,
    pub hold_cost: Vec<Vec<i64>>,
    pub capacity: Vec<i64>,
}

/// Multi-stage multi-dimensional knapsack data.
///
/// `profit[i][t]`, `bonus[i][t]` for `t < T-1`, `weight[i][j][t]` and
/// `capacity[j][t]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnapsackInstance {
    #[serde(rename = "I")]
    pub items: usize,
    #[serde(rename = "T")]
    pub periods: usize,
    #[serde(rename = "J")]
    pub resources: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub profit: Vec<Vec<i64>>,
    pub bonus: Vec<Vec<i64>>,
    pub weight: Vec<Vec<Vec<i64>>>,
    pub capacity: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Instance {
    Mclsp(LotSizingInstance),
    Msmk(KnapsackInstance),
}

impl From<LotSizingInstance> for Instance {
    fn from(value: LotSizingInstance) -> Self {
        Instance::Mclsp(value)
    }
}

impl From<KnapsackInstance> for Instance {
    fn from(value: KnapsackInstance) -> Self {
        Instance::Msmk(value)
    }
}

fn check_matrix(name: &str, m: &[Vec<i64>], rows: usize, cols: usize) -> Result<(), InstanceError> {
    if m.len() != rows {
        return Err(invalid(name, format!("expected {rows} rows, found {}", m.len())));
    }
    for (r, row) in m.iter().enumerate() {
        if row.len() != cols {
            return Err(invalid(
                format!("{name}[{r}]"),
                format!("expected {cols} columns, found {}", row.len()),
            ));
        }
        if let Some((c, v)) = row.iter().enumerate().find(|(_, v)| **v < 0) {
            return Err(invalid(format!("{name}[{r}][{c}]"), format!("negative value {v}")));
        }
    }
    Ok(())
}

impl LotSizingInstance {
    pub fn validate(&self) -> Result<(), InstanceError> {
        if self.items == 0 {
            return Err(invalid("I", "must be at least 1"));
        }
        if self.periods == 0 {
            return Err(invalid("T", "must be at least 1"));
        }
        let (i, t) = (self.items, self.periods);
        check_matrix("demand", &self.demand, i, t)?;
        check_matrix("prod_cost", &self.prod_cost, i, t)?;
        check_matrix("setup_cost", &self.setup_cost, i, t)?;
        check_matrix("hold_cost", &self.hold_cost, i, t)?;
        check_matrix("capacity", std::slice::from_ref(&self.capacity), 1, t)?;
        if let Some(t) = self.first_capacity_shortfall() {
            return Err(invalid(
                "capacity",
                format!("cumulative capacity below cumulative demand in period {t}"),
            ));
        }
        Ok(())
    }

    /// First period (0-based) at which cumulative capacity falls short of
    /// cumulative demand, if any.
    pub fn first_capacity_shortfall(&self) -> Option<usize> {
        let mut cap = 0i64;
        let mut dem = 0i64;
        for t in 0..self.periods {
            cap += self.capacity[t];
            dem += (0..self.items).map(|i| self.demand[i][t]).sum::<i64>();
            if cap < dem {
                return Some(t);
            }
        }
        None
    }

    pub fn period_demand(&self, t: usize) -> i64 {
        (0..self.items).map(|i| self.demand[i][t]).sum()
    }
}

impl KnapsackInstance {
    pub fn validate(&self) -> Result<(), InstanceError> {
        if self.items == 0 {
            return Err(invalid("I", "must be at least 1"));
        }
        if self.periods == 0 {
            return Err(invalid("T", "must be at least 1"));
        }
        if self.resources == 0 {
            return Err(invalid("J", "must be at least 1"));
        }
        let (i, t, j) = (self.items, self.periods, self.resources);
        check_matrix("profit", &self.profit, i, t)?;
        check_matrix("bonus", &self.bonus, i, t - 1)?;
        if self.weight.len() != i {
            return Err(invalid("weight", format!("expected {i} items, found {}", self.weight.len())));
        }
        for (item, w) in self.weight.iter().enumerate() {
            check_matrix(&format!("weight[{item}]"), w, j, t)?;
        }
        check_matrix("capacity", &self.capacity, j, t)?;
        Ok(())
    }

    /// Column weight sum `Σ_i w[i][j][t]`.
    pub fn weight_sum(&self, j: usize, t: usize) -> i64 {
        self.weight.iter().map(|w| w[j][t]).sum()
    }
}

impl Instance {
    pub fn family(&self) -> Family {
        match self {
            Instance::Mclsp(_) => Family::Mclsp,
            Instance::Msmk(_) => Family::Msmk,
        }
    }

    pub fn items(&self) -> usize {
        match self {
            Instance::Mclsp(x) => x.items,
            Instance::Msmk(x) => x.items,
        }
    }

    pub fn periods(&self) -> usize {
        match self {
            Instance::Mclsp(x) => x.periods,
            Instance::Msmk(x) => x.periods,
        }
    }

    /// Number of resources; 0 for lot sizing.
    pub fn resources(&self) -> usize {
        match self {
            Instance::Mclsp(_) => 0,
            Instance::Msmk(x) => x.resources,
        }
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        match self {
            Instance::Mclsp(x) => x.validate(),
            Instance::Msmk(x) => x.validate(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serialization is infallible")
    }

    /// Parses and validates an instance document.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, InstanceError> {
        let inst: Instance = serde_json::from_str(text).map_err(|e| InstanceError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<(), InstanceError> {
        fs::write(path, self.to_json()).map_err(|source| InstanceError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, InstanceError> {
        let text = fs::read_to_string(path).map_err(|source| InstanceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// Generator parameters. `cap_ratio` and `setup_to_hold` only affect lot sizing;
/// `resources` only affects the knapsack family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub family: Family,
    pub items: usize,
    pub periods: usize,
    #[serde(default = "default_resources")]
    pub resources: usize,
    #[serde(default = "default_cap_ratio")]
    pub cap_ratio: f64,
    #[serde(default = "default_setup_to_hold")]
    pub setup_to_hold: f64,
}

fn default_resources() -> usize {
    5
}
fn default_cap_ratio() -> f64 {
    10.0
}
fn default_setup_to_hold() -> f64 {
    1000.0
}

impl GenConfig {
    pub fn mclsp(seed: u64, items: usize, periods: usize, cap_ratio: f64) -> Self {
        Self {
            seed,
            family: Family::Mclsp,
            items,
            periods,
            resources: 0,
            cap_ratio,
            setup_to_hold: default_setup_to_hold(),
        }
    }

    pub fn msmk(seed: u64, items: usize, periods: usize, resources: usize) -> Self {
        Self {
            seed,
            family: Family::Msmk,
            items,
            periods,
            resources,
            cap_ratio: default_cap_ratio(),
            setup_to_hold: default_setup_to_hold(),
        }
    }

    /// Same dimensions with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn generate(&self) -> Result<Instance, InstanceError> {
        match self.family {
            Family::Mclsp => gen_mclsp(self).map(Instance::Mclsp),
            Family::Msmk => gen_msmk(self).map(Instance::Msmk),
        }
    }
}

/// Integer uniform on the integers inside the real interval `[lo, hi]`.
/// Collapses to the nearest integer when the interval holds none.
fn uniform_real_bounds(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> i64 {
    let a = lo.ceil() as i64;
    let b = hi.floor() as i64;
    if a > b {
        ((lo + hi) / 2.0).round() as i64
    } else {
        rng.gen_range(a..=b)
    }
}

fn sample_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: i64, hi: i64) -> Vec<Vec<i64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(lo..=hi)).collect())
        .collect()
}

pub fn gen_mclsp(config: &GenConfig) -> Result<LotSizingInstance, InstanceError> {
    if config.family != Family::Mclsp {
        return Err(invalid("family", "gen_mclsp requires family mclsp"));
    }
    if config.items == 0 || config.periods == 0 {
        return Err(invalid("dims", "items and periods must be at least 1"));
    }
    if !(config.cap_ratio > 0.0) {
        return Err(invalid("cap_ratio", "must be positive"));
    }
    if !(config.setup_to_hold >= 0.0) {
        return Err(invalid("setup_to_hold", "must be nonnegative"));
    }
    let (ni, nt) = (config.items, config.periods);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..MAX_GEN_ATTEMPTS {
        let demand = sample_matrix(&mut rng, ni, nt, 500, 1500);
        let prod_cost = sample_matrix(&mut rng, ni, nt, 1, 200);
        let hold_cost = sample_matrix(&mut rng, ni, nt, 1, 100);
        let cells = (ni * nt) as f64;
        let mean_demand = demand.iter().flatten().sum::<i64>() as f64 / cells;
        let mean_hold = hold_cost.iter().flatten().sum::<i64>() as f64 / cells;
        let c = config.cap_ratio;
        let capacity: Vec<i64> = (0..nt)
            .map(|_| uniform_real_bounds(&mut rng, 0.8 * c * mean_demand, 1.2 * c * mean_demand))
            .collect();
        let f = config.setup_to_hold;
        let setup_cost = (0..ni)
            .map(|_| {
                (0..nt)
                    .map(|_| uniform_real_bounds(&mut rng, 0.9 * f * mean_hold, 1.1 * f * mean_hold))
                    .collect()
            })
            .collect();
        let inst = LotSizingInstance {
            items: ni,
            periods: nt,
            seed: Some(config.seed),
            demand,
            prod_cost,
            setup_cost,
            hold_cost,
            capacity,
        };
        if inst.first_capacity_shortfall().is_none() {
            return Ok(inst);
        }
    }
    Err(InstanceError::CapacityUnsatisfiable {
        attempts: MAX_GEN_ATTEMPTS,
        cap_ratio: config.cap_ratio,
    })
}

pub fn gen_msmk(config: &GenConfig) -> Result<KnapsackInstance, InstanceError> {
    if config.family != Family::Msmk {
        return Err(invalid("family", "gen_msmk requires family msmk"));
    }
    if config.items == 0 || config.periods == 0 || config.resources == 0 {
        return Err(invalid("dims", "items, periods and resources must be at least 1"));
    }
    let (ni, nt, nj) = (config.items, config.periods, config.resources);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let profit = sample_matrix(&mut rng, ni, nt, 1, 1000);
    let bonus = sample_matrix(&mut rng, ni, nt - 1, 1, 1000);
    let weight: Vec<Vec<Vec<i64>>> = (0..ni).map(|_| sample_matrix(&mut rng, nj, nt, 1, 1000)).collect();
    let capacity = (0..nj)
        .map(|j| {
            (0..nt)
                .map(|t| {
                    let sum = weight.iter().map(|w| w[j][t]).sum::<i64>() as f64;
                    uniform_real_bounds(&mut rng, 0.5 * sum, 0.8 * sum)
                })
                .collect()
        })
        .collect();
    Ok(KnapsackInstance {
        items: ni,
        periods: nt,
        resources: nj,
        seed: Some(config.seed),
        profit,
        bonus,
        weight,
        capacity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mclsp_sampling_ranges() {
        let inst = gen_mclsp(&GenConfig::mclsp(1, 8, 40, 10.0)).unwrap();
        assert!(inst.demand.iter().flatten().all(|d| (500..=1500).contains(d)));
        assert!(inst.prod_cost.iter().flatten().all(|p| (1..=200).contains(p)));
        assert!(inst.hold_cost.iter().flatten().all(|h| (1..=100).contains(h)));
        let n = 320.0;
        let dbar = inst.demand.iter().flatten().sum::<i64>() as f64 / n;
        let hbar = inst.hold_cost.iter().flatten().sum::<i64>() as f64 / n;
        for &c in &inst.capacity {
            assert!(c as f64 >= 8.0 * dbar - 1e-9 && c as f64 <= 12.0 * dbar + 1e-9);
        }
        for &f in inst.setup_cost.iter().flatten() {
            assert!(f as f64 >= 900.0 * hbar - 1e-9 && f as f64 <= 1100.0 * hbar + 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::mclsp(1, 8, 40, 10.0);
        assert_eq!(cfg.generate().unwrap().to_json(), cfg.generate().unwrap().to_json());
        let cfg = GenConfig::msmk(7, 8, 30, 5);
        assert_eq!(cfg.generate().unwrap(), cfg.generate().unwrap());
        assert_ne!(cfg.generate().unwrap(), cfg.with_seed(8).generate().unwrap());
    }

    #[test]
    fn msmk_capacity_within_weight_band() {
        let inst = gen_msmk(&GenConfig::msmk(7, 8, 30, 5)).unwrap();
        assert!(inst.weight.iter().flatten().flatten().all(|w| (1..=1000).contains(w)));
        assert_eq!(inst.bonus[0].len(), 29);
        for j in 0..5 {
            for t in 0..30 {
                let s = inst.weight_sum(j, t) as f64;
                let c = inst.capacity[j][t] as f64;
                assert!(c >= 0.5 * s && c <= 0.8 * s, "cap {c} vs sum {s}");
            }
        }
    }

    #[test]
    fn single_item_knapsack_never_fits_whole_weight() {
        for seed in 0..50 {
            let inst = gen_msmk(&GenConfig::msmk(seed, 1, 4, 1)).unwrap();
            for t in 0..4 {
                assert!(inst.capacity[0][t] < inst.weight[0][0][t]);
            }
        }
    }

    #[test]
    fn tiny_cap_ratio_is_reported() {
        let err = gen_mclsp(&GenConfig::mclsp(3, 4, 10, 0.05)).unwrap_err();
        assert!(matches!(err, InstanceError::CapacityUnsatisfiable { attempts: 1000, .. }));
    }

    #[test]
    fn rejects_bad_files() {
        let mut inst = gen_mclsp(&GenConfig::mclsp(2, 2, 3, 10.0)).unwrap();
        inst.demand[1][2] = -4;
        let text = Instance::Mclsp(inst).to_json();
        let err = Instance::from_json(&text, "neg.json").unwrap_err();
        assert!(matches!(err, InstanceError::Validation { ref field, .. } if field == "demand[1][2]"));

        let zero = r#"{"family":"mclsp","I":1,"T":0,"demand":[[]],"prod_cost":[[]],
            "setup_cost":[[]],"hold_cost":[[]],"capacity":[]}"#;
        assert!(matches!(
            Instance::from_json(zero, "t0.json").unwrap_err(),
            InstanceError::Validation { ref field, .. } if field == "T"
        ));

        let broken = "{\n  \"family\": \"mclsp\",\n  \"I\": oops\n}";
        match Instance::from_json(broken, "broken.json").unwrap_err() {
            InstanceError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_validation_error() {
        let mut inst = gen_msmk(&GenConfig::msmk(1, 2, 3, 2)).unwrap();
        inst.capacity[1].pop();
        assert!(matches!(
            Instance::Msmk(inst).validate(),
            Err(InstanceError::Validation { .. })
        ));
    }
}
