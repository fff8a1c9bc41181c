//! JSON-lines training sets: one header line, then one record per instance.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    encode_features, extract_labels, feature_width, label_width, FeatureNorm, ModelMeta, NeuralPredictor,
    PipelineError,
};
use crate::instances::{Family, GenConfig};
use crate::milp::{build_model, SolveStatus};
use crate::nn::{self, AdamState, Example, Seq2SeqConfig, Seq2SeqModel, Tensor, TrainOptions};
use crate::solver::{MipSolver, SolverOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub family: Family,
    pub items: usize,
    pub resources: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub eta: f64,
    pub norm: FeatureNorm,
    pub generator: GenConfig,
    /// Instances dropped because the solver did not prove optimality.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seed: u64,
    pub objective: f64,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(DatasetHeader),
    Record(DatasetRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

fn tensor(rows: &[Vec<f64>], width: usize) -> Option<Tensor> {
    if rows.iter().any(|r| r.len() != width) {
        return None;
    }
    Some(Tensor::from_vec(rows.len(), width, rows.concat()))
}

impl Dataset {
    pub fn examples(&self) -> Vec<Example> {
        self.records
            .iter()
            .map(|r| Example {
                inputs: tensor(&r.features, self.header.input_dim).expect("validated on load"),
                labels: tensor(&r.labels, self.header.output_dim).expect("validated on load"),
            })
            .collect()
    }
}

/// Generates `count` instances with seeds `generator.seed + k`, solves each to
/// optimality and records features and labels.
pub fn build_dataset(
    generator: &GenConfig,
    count: usize,
    eta: f64,
    solver: &dyn MipSolver,
    options: &SolverOptions,
) -> Result<Dataset, PipelineError> {
    let norm = FeatureNorm::for_config(generator);
    let mut records = Vec::with_capacity(count);
    let mut skipped = 0;
    for k in 0..count as u64 {
        let seed = generator.seed + k;
        let inst = generator.with_seed(seed).generate()?;
        let res = solver.solve(&build_model(&inst), options)?;
        if res.solution.status != SolveStatus::Optimal {
            skipped += 1;
            continue;
        }
        let features = encode_features(&inst, Some(&norm))?;
        let labels = extract_labels(&inst, &res.solution, eta)?;
        records.push(DatasetRecord {
            seed,
            objective: res.solution.objective,
            features: rows(&features.data),
            labels: rows(&labels.data),
        });
    }
    let (family, items, resources) = (generator.family, generator.items, match generator.family {
        Family::Mclsp => 0,
        Family::Msmk => generator.resources,
    });
    Ok(Dataset {
        header: DatasetHeader {
            family,
            items,
            resources,
            input_dim: feature_width(family, items, resources),
            output_dim: label_width(family, items, resources),
            eta,
            norm,
            generator: generator.clone(),
            skipped,
        },
        records,
    })
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Line::Header(data.header.clone());
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for r in &data.records {
        let line = Line::Record(r.clone());
        writeln!(out, "{}", serde_json::to_string(&line).expect("record serializes"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, PipelineError> {
    let bad = |line: usize, detail: String| PipelineError::Data {
        path: format!("{}:{line}", path.display()),
        detail,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut header: Option<DatasetHeader> = None;
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(&line).map_err(|e| bad(n + 1, e.to_string()))? {
            Line::Header(h) if header.is_none() && n == 0 => header = Some(h),
            Line::Header(_) => return Err(bad(n + 1, "unexpected second header".into())),
            Line::Record(r) => {
                let h = header.as_ref().ok_or_else(|| bad(n + 1, "record before header".into()))?;
                if r.features.len() != r.labels.len()
                    || tensor(&r.features, h.input_dim).is_none()
                    || tensor(&r.labels, h.output_dim).is_none()
                {
                    return Err(bad(n + 1, "record widths disagree with the header".into()));
                }
                records.push(r);
            }
        }
    }
    let header = header.ok_or_else(|| bad(1, "missing header".into()))?;
    Ok(Dataset { header, records })
}

/// Network shape and optimizer settings for [`train_predictor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub encoder_hidden: usize,
    pub layers: usize,
    pub window: usize,
    pub dropout: f64,
    pub label_smooth: f64,
    /// Adam step size; `None` picks 0.01 for lot sizing and 0.001 for knapsack.
    pub lr: Option<f64>,
    pub init_seed: u64,
    pub options: TrainOptions,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let c = Seq2SeqConfig::new(1, 1);
        Self {
            encoder_hidden: c.encoder_hidden,
            layers: c.layers,
            window: c.window,
            dropout: c.dropout,
            label_smooth: c.label_smooth,
            lr: None,
            init_seed: 0,
            options: TrainOptions::default(),
        }
    }
}

pub fn default_lr(family: Family) -> f64 {
    match family {
        Family::Mclsp => 0.01,
        Family::Msmk => 0.001,
    }
}

/// Trains a fresh network on `data`; returns it with the per-epoch mean losses.
pub fn train_predictor(
    data: &Dataset,
    settings: &TrainSettings,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(NeuralPredictor, Vec<f64>), PipelineError> {
    let h = &data.header;
    let config = Seq2SeqConfig {
        encoder_hidden: settings.encoder_hidden,
        layers: settings.layers,
        window: settings.window,
        dropout: settings.dropout,
        label_smooth: settings.label_smooth,
        ..Seq2SeqConfig::new(h.input_dim, h.output_dim)
    };
    let mut model = Seq2SeqModel::new(config, settings.init_seed)?;
    let mut adam = AdamState::new(&model, settings.lr.unwrap_or_else(|| default_lr(h.family)));
    let losses = nn::train_with(&mut model, &data.examples(), &settings.options, &mut adam, on_epoch)?;
    let meta = ModelMeta {
        family: h.family,
        items: h.items,
        resources: h.resources,
        norm: h.norm.clone(),
        eta: h.eta,
    };
    Ok((NeuralPredictor { model, meta }, losses))
}
