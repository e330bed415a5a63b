//! Mixed per-channel / per-group quantization plans.
//!
//! Layers picked by the selection rule are quantized per-group; every other
//! layer stays per-channel. A group size that does not divide a layer's input
//! dimension falls back to the largest divisor below it, and the plan records
//! the requested size next to the one used.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyzer::{layer_rmse, profile_model, LayerMetrics, ProfileOptions};
use crate::error::{Error, Result};
use crate::quantizer::{largest_divisor_at_most, quantize_weight, GroupingScheme, QuantParams};
use crate::store::{to_sorted_json, write_atomic, FpModel, QuantizedModel};

pub const PLAN_VERSION: u32 = 1;
pub const DEFAULT_GROUP_SIZE: usize = 1024;
pub const DEFAULT_MAX_ABS_THRESHOLD: f64 = 2.0;

/// Which layers get per-group quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Layers with `max_abs > τ`.
    MaxAbsThreshold(f64),
    /// The `k` highest-RMSE layers; ties go to the lower layer index.
    TopK(usize),
    Explicit(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    pub selection: Selection,
    pub group_size: usize,
    pub params: QuantParams,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            selection: Selection::MaxAbsThreshold(DEFAULT_MAX_ABS_THRESHOLD),
            group_size: DEFAULT_GROUP_SIZE,
            params: QuantParams::int8(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    #[serde(flatten)]
    pub grouping: GroupingScheme,
    /// Set when the configured group size did not divide the layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested_group_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPlan {
    pub version: u32,
    pub group_size: usize,
    pub bits: QuantParams,
    pub selection: Selection,
    pub assignments: BTreeMap<String, Assignment>,
    pub per_group_fraction: f64,
}

impl QuantPlan {
    pub fn per_group_layers(&self) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(|(_, a)| a.grouping.is_per_group())
            .map(|(n, _)| n.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PLAN_VERSION {
            return Err(Error::validation(format!("unsupported plan version {}", self.version)));
        }
        if self.assignments.is_empty() {
            return Err(Error::validation("plan has no assignments"));
        }
        let selected = self.per_group_layers().count();
        let fraction = selected as f64 / self.assignments.len() as f64;
        if (fraction - self.per_group_fraction).abs() > 1e-12 {
            return Err(Error::validation(format!(
                "per_group_fraction {} disagrees with {selected}/{} per-group layers",
                self.per_group_fraction,
                self.assignments.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        to_sorted_json(self)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let plan: QuantPlan = serde_json::from_slice(bytes)
            .map_err(|e| Error::validation(format!("malformed plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let plan: QuantPlan = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Indices into `metrics` chosen by `selection`, ascending.
pub fn select_layers(metrics: &[LayerMetrics], selection: &Selection) -> Result<Vec<usize>> {
    let mut picked: Vec<usize> = match selection {
        Selection::MaxAbsThreshold(tau) => {
            if tau.is_nan() {
                return Err(Error::validation("max_abs threshold is NaN"));
            }
            (0..metrics.len()).filter(|&i| metrics[i].max_abs > *tau).collect()
        }
        Selection::TopK(k) => {
            let mut order: Vec<usize> = (0..metrics.len()).collect();
            order.sort_by(|&a, &b| {
                metrics[b]
                    .rmse
                    .total_cmp(&metrics[a].rmse)
                    .then(metrics[a].layer_index.cmp(&metrics[b].layer_index))
            });
            order.truncate(*k);
            order
        }
        Selection::Explicit(names) => names
            .iter()
            .map(|n| {
                metrics
                    .iter()
                    .position(|m| &m.name == n)
                    .ok_or_else(|| Error::validation(format!("explicit layer `{n}` not in metrics")))
            })
            .collect::<Result<_>>()?,
    };
    picked.sort_unstable();
    picked.dedup();
    Ok(picked)
}

fn fitted_assignment(cols: usize, group_size: usize) -> Assignment {
    let used = largest_divisor_at_most(cols, group_size);
    Assignment {
        grouping: GroupingScheme::PerGroup { group_size: used },
        requested_group_size: (used != group_size).then_some(group_size),
    }
}

/// Builds the mixed plan from per-channel layer metrics.
pub fn build_plan(metrics: &[LayerMetrics], cfg: &PlanConfig) -> Result<QuantPlan> {
    if metrics.is_empty() {
        return Err(Error::validation("no layer metrics to plan over"));
    }
    if cfg.group_size == 0 {
        return Err(Error::validation("group size must be positive"));
    }
    let mut names = BTreeSet::new();
    if let Some(dup) = metrics.iter().find(|m| !names.insert(m.name.as_str())) {
        return Err(Error::validation(format!("duplicate layer `{}` in metrics", dup.name)));
    }

    let selected: BTreeSet<usize> = select_layers(metrics, &cfg.selection)?.into_iter().collect();
    let assignments = metrics
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let a = if selected.contains(&i) {
                fitted_assignment(m.cols, cfg.group_size)
            } else {
                Assignment {
                    grouping: GroupingScheme::PerChannel,
                    requested_group_size: None,
                }
            };
            (m.name.clone(), a)
        })
        .collect();
    Ok(QuantPlan {
        version: PLAN_VERSION,
        group_size: cfg.group_size,
        bits: cfg.params,
        selection: cfg.selection.clone(),
        assignments,
        per_group_fraction: selected.len() as f64 / metrics.len() as f64,
    })
}

/// Quantizes every layer under its assigned grouping.
pub fn apply_plan(model: &FpModel, plan: &QuantPlan) -> Result<QuantizedModel> {
    let model_names: BTreeSet<&str> = model.layers.iter().map(|t| t.name.as_str()).collect();
    let plan_names: BTreeSet<&str> = plan.assignments.keys().map(String::as_str).collect();
    if model_names != plan_names {
        let diff: Vec<&str> = model_names.symmetric_difference(&plan_names).copied().collect();
        return Err(Error::validation(format!(
            "plan and model layer sets differ: {}",
            diff.join(", ")
        )));
    }
    let layers = model
        .layers
        .par_iter()
        .map(|w| quantize_weight(w, plan.assignments[&w.name].grouping, plan.bits))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        blocks: model.blocks,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// Requested size; `None` is the per-channel baseline.
    pub group_size: Option<usize>,
    pub layer_rmse: Vec<f64>,
    /// RMSE pooled over every element of the selected layers.
    pub aggregate_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub layers: Vec<String>,
    pub baseline: SweepRow,
    pub rows: Vec<SweepRow>,
}

/// Sweeps per-group sizes over one fixed selected layer set.
pub fn sweep_group_size(
    model: &FpModel,
    selection: &Selection,
    sizes: &[usize],
    params: QuantParams,
) -> Result<SweepTable> {
    if sizes.is_empty() {
        return Err(Error::validation("no group sizes to sweep"));
    }
    if sizes.contains(&0) {
        return Err(Error::validation("group sizes must be positive"));
    }
    let mut seen = BTreeSet::new();
    let sizes: Vec<usize> = sizes.iter().copied().filter(|g| seen.insert(*g)).collect();

    let opts = ProfileOptions {
        params,
        ..ProfileOptions::default()
    };
    let metrics = profile_model(model, &opts)?;
    let selected = select_layers(&metrics, selection)?;
    let tensors: Vec<_> = selected.iter().map(|&i| &model.layers[i]).collect();

    let row_for = |group_size: Option<usize>| -> Result<SweepRow> {
        let layer_rmse = tensors
            .par_iter()
            .map(|w| {
                let grouping = match group_size {
                    None => GroupingScheme::PerChannel,
                    Some(g) => fitted_assignment(w.cols, g).grouping,
                };
                layer_rmse(w, grouping, params)
            })
            .collect::<Result<Vec<_>>>()?;
        let (sse, n) = tensors.iter().zip(&layer_rmse).fold((0.0, 0usize), |(s, n), (w, r)| {
            (s + r * r * w.data.len() as f64, n + w.data.len())
        });
        Ok(SweepRow {
            group_size,
            layer_rmse,
            aggregate_rmse: if n == 0 { 0.0 } else { (sse / n as f64).sqrt() },
        })
    };

    Ok(SweepTable {
        layers: tensors.iter().map(|t| t.name.clone()).collect(),
        baseline: row_for(None)?,
        rows: sizes.into_iter().map(|g| row_for(Some(g))).collect::<Result<_>>()?,
    })
}

impl SweepTable {
    /// `group_size,aggregate_rmse,<layer>...`; the baseline row reads `per_channel`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let to_err = |e: csv::Error| Error::validation(format!("csv: {e}"));
        let mut header = vec!["group_size".to_string(), "aggregate_rmse".to_string()];
        header.extend(self.layers.iter().cloned());
        w.write_record(&header).map_err(to_err)?;
        for row in std::iter::once(&self.baseline).chain(&self.rows) {
            let mut rec = vec![
                row.group_size.map_or("per_channel".to_string(), |g| g.to_string()),
                row.aggregate_rmse.to_string(),
            ];
            rec.extend(row.layer_rmse.iter().map(|r| r.to_string()));
            w.write_record(&rec).map_err(to_err)?;
        }
        w.into_inner().map_err(|e| Error::validation(format!("csv: {e}")))
    }
}
