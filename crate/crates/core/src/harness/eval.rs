use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{normalize, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::harness::Checkpoint;
use crate::model::{ForwardMode, Model};
use crate::perturb::Perturbation;

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 250;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub perturbation: Perturbation,
    pub correct: usize,
    pub n: usize,
    /// Master seed from which per-image noise seeds are derived.
    pub seed: u64,
}

impl EvalCell {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub cells: Vec<EvalCell>,
    pub clean_accuracy: f64,
    /// RFC 3339, UTC.
    pub timestamp: String,
    /// Hex digest over the model spec, training seed, grid and evaluation seed.
    pub config_hash: String,
}

impl EvalReport {
    /// Accuracy of the cell for `p`, if the grid contained it.
    pub fn accuracy_of(&self, p: &Perturbation) -> Option<f64> {
        self.cells.iter().find(|c| &c.perturbation == p).map(EvalCell::accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Parses `none;gaussian:0,0.1,0.2;poisson:0.5,1,2`. Kinds are separated by
/// `;`, parameter values by `,`; `none` takes no values.
pub fn parse_grid(text: &str) -> Result<Vec<Perturbation>> {
    let mut grid = Vec::new();
    for group in text.split(';').map(str::trim).filter(|g| !g.is_empty()) {
        let (kind, values) = match group.split_once(':') {
            Some((k, v)) => (k.trim(), Some(v)),
            None => (group, None),
        };
        match values {
            None if kind == "none" => grid.push(Perturbation::None),
            None => return Err(Error::Config(format!("grid entry '{kind}' needs values, e.g. {kind}:0.1,0.2"))),
            Some(values) => {
                for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
                    let param: f64 = v
                        .parse()
                        .map_err(|_| Error::Config(format!("grid value '{v}' for {kind} is not a number")))?;
                    grid.push(Perturbation::from_kind(kind, param)?);
                }
            }
        }
    }
    Ok(grid)
}

/// Formats a grid in the syntax accepted by [`parse_grid`].
pub fn format_grid(grid: &[Perturbation]) -> String {
    let mut groups: Vec<(&str, Vec<String>)> = Vec::new();
    for p in grid {
        let value = (p.kind() != "none").then(|| p.param().to_string());
        match groups.last_mut() {
            Some((kind, values)) if *kind == p.kind() => values.extend(value),
            _ => groups.push((p.kind(), value.into_iter().collect())),
        }
    }
    groups
        .into_iter()
        .map(|(k, v)| if v.is_empty() { k.to_string() } else { format!("{k}:{}", v.join(",")) })
        .collect::<Vec<_>>()
        .join(";")
}

fn count_correct(model: &mut Model<f32>, data: &Dataset) -> Result<usize> {
    let mut correct = 0;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let logits = model.forward(&data.images.slice_batch(start, end)?, ForwardMode::Eval)?;
        correct += logits
            .argmax_rows()?
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct)
}

fn config_hash(model: &Model<f32>, train_seed: u64, grid: &[Perturbation], seed: u64) -> Result<String> {
    let spec = serde_json::to_string(model.spec()).map_err(|e| Error::Serde(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(spec.as_bytes());
    h.update(train_seed.to_le_bytes());
    h.update(format_grid(grid).as_bytes());
    h.update(seed.to_le_bytes());
    Ok(h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Evaluates `model` on `test` (clean images in `[0, 1]`) under every grid
/// cell: perturb each image with its derived seed, normalize, classify.
pub fn evaluate(
    model: &mut Model<f32>,
    train_seed: u64,
    norm: &Normalization,
    grid: &[Perturbation],
    test: &Dataset,
    seed: u64,
) -> Result<EvalReport> {
    if test.item_shape() != model.spec().input_shape {
        return Err(Error::shape(
            "evaluate",
            format!(
                "test images are {:?} but {} expects {:?}",
                test.item_shape(),
                model.spec().id(),
                model.spec().input_shape
            ),
        ));
    }
    if test.class_count != model.spec().num_classes {
        return Err(Error::shape(
            "evaluate",
            format!("{} has {} classes, model has {}", test.name, test.class_count, model.spec().num_classes),
        ));
    }
    let n = test.len();
    let clean = count_correct(model, &normalize(test, norm)?)?;
    let mut cells = Vec::with_capacity(grid.len());
    for p in grid {
        let correct = match p {
            Perturbation::None => clean,
            _ => count_correct(model, &normalize(&test.perturb(p, seed)?, norm)?)?,
        };
        cells.push(EvalCell {
            perturbation: *p,
            correct,
            n,
            seed,
        });
    }
    Ok(EvalReport {
        model_id: model.spec().id(),
        cells,
        clean_accuracy: clean as f64 / n as f64,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        config_hash: config_hash(model, train_seed, grid, seed)?,
    })
}

pub fn evaluate_checkpoint(ck: &Checkpoint, grid: &[Perturbation], test: &Dataset, seed: u64) -> Result<EvalReport> {
    let mut model = ck.to_model()?;
    evaluate(&mut model, ck.seed, &ck.normalization, grid, test, seed)
}
