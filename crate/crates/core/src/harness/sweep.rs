use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::report::round4;
use crate::harness::{evaluate, train_on, EvalReport, TrainConfig};
use crate::model::FirstLayer;
use crate::perturb::Perturbation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the baseline without push-pull.
    pub upsample: Option<f64>,
    pub alpha: Option<f64>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub grid: Vec<Perturbation>,
    pub rows: Vec<SweepRow>,
}

/// Sorted, deduplicated `(h, alpha)` pairs of the cartesian product.
pub fn sweep_pairs(h_values: &[f64], alpha_values: &[f64]) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = h_values
        .iter()
        .flat_map(|&h| alpha_values.iter().map(move |&a| (h, a)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs.dedup();
    pairs
}

/// Trains the baseline (plain first layer) and one push-pull model per
/// `(h, alpha)` pair from `base`, then evaluates all of them on `grid`.
pub fn sensitivity_sweep(
    base: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    h_values: &[f64],
    alpha_values: &[f64],
    grid: &[Perturbation],
    eval_seed: u64,
) -> Result<SweepTable> {
    let pairs = sweep_pairs(h_values, alpha_values);
    if pairs.is_empty() {
        return Err(Error::Config("sweep needs at least one h and one alpha value".into()));
    }
    let norm = base.dataset.normalization();
    let mut rows = Vec::with_capacity(pairs.len() + 1);
    let settings = std::iter::once(None).chain(pairs.into_iter().map(Some));
    for setting in settings {
        let mut cfg = base.clone();
        cfg.model = match setting {
            None => base.model.with_first_layer(FirstLayer::Conv),
            Some((h, a)) => base.model.with_pushpull(h, a),
        };
        info!("sweep: training {} at {:?}", cfg.model.id(), setting);
        let outcome = train_on(&cfg, train)?;
        let mut model = outcome.checkpoint.to_model()?;
        if let (Some((h, _)), Some(pp)) = (setting, model.pushpull()) {
            if h == 1.0 {
                let push = pp.kernel.value();
                if pp.pull_kernel()? != push.scale(-1.0) {
                    return Err(Error::domain("sensitivity_sweep", "pull kernel differs from the negated push kernel at h=1"));
                }
            }
        }
        let report = evaluate(&mut model, cfg.seed, &norm, grid, test, eval_seed)?;
        rows.push(SweepRow {
            upsample: setting.map(|s| s.0),
            alpha: setting.map(|s| s.1),
            report,
        });
    }
    Ok(SweepTable {
        grid: grid.to_vec(),
        rows,
    })
}

impl SweepTable {
    /// One row per model, one accuracy column per grid cell.
    pub fn matrix_csv(&self) -> Result<String> {
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string(), "h".into(), "alpha".into()];
        header.extend(self.grid.iter().map(|p| p.to_string()));
        w.write_record(&header).map_err(ser)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            let mut rec = vec![row.report.model_id.clone(), opt(row.upsample), opt(row.alpha)];
            for p in &self.grid {
                let acc = row
                    .report
                    .accuracy_of(p)
                    .ok_or_else(|| Error::Config(format!("report lacks cell {p}")))?;
                rec.push(format!("{:.4}", round4(acc)));
            }
            w.write_record(&rec).map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write_matrix_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.matrix_csv()?).map_err(|e| Error::io(path, e))
    }
}
