//! Per-layer weight profiling: max_abs, quantization RMSE, and outlier walls.
//!
//! A wall is an input column in which at least `ρ·N` entries exceed a magnitude
//! threshold θ. θ is either absolute or `κ` times a robust scale estimate of the
//! tensor (1.4826 · median |w|, which equals σ for Gaussian weights and is not
//! dragged upward by the walls themselves).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{
    dequantize_exact, largest_divisor_at_most, quantize_weight, GroupingScheme, QuantParams,
};
use crate::store::{to_sorted_json, write_atomic, FpModel, LayerId, LayerKind};
use crate::tensor::Tensor;

/// Ratio between the median absolute deviation and σ for a normal distribution.
const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WallThreshold {
    Absolute(f64),
    /// Multiplier over the tensor's robust scale.
    Relative(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallDetectorConfig {
    pub threshold: WallThreshold,
    pub row_fraction: f64,
}

impl Default for WallDetectorConfig {
    fn default() -> Self {
        Self {
            threshold: WallThreshold::Relative(20.0),
            row_fraction: 0.01,
        }
    }
}

impl WallDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let t = match self.threshold {
            WallThreshold::Absolute(t) | WallThreshold::Relative(t) => t,
        };
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::validation(format!("wall threshold must be positive, got {t}")));
        }
        if !(self.row_fraction > 0.0 && self.row_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "wall row fraction must lie in (0, 1], got {}",
                self.row_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer_index: usize,
    pub name: String,
    pub block: usize,
    pub kind: LayerKind,
    pub rows: usize,
    pub cols: usize,
    pub max_abs: f64,
    pub rmse: f64,
    pub grouping: GroupingScheme,
    pub bits: QuantParams,
    pub wall_columns: Vec<usize>,
}

/// Largest |w|.
pub fn layer_max_abs(w: &Tensor) -> Result<f32> {
    w.ensure_finite()?;
    Ok(w.data.iter().fold(0.0f32, |m, v| m.max(v.abs())))
}

/// RMSE between `w` and its quantize→dequantize image, accumulated in fp64.
pub fn layer_rmse(w: &Tensor, grouping: GroupingScheme, params: QuantParams) -> Result<f64> {
    let q = quantize_weight(w, grouping, params)?;
    let d = dequantize_exact(&q);
    let sse: f64 = w
        .data
        .iter()
        .zip(&d.data)
        .map(|(&x, &y)| {
            let e = x as f64 - y;
            e * e
        })
        .sum();
    Ok((sse / w.data.len() as f64).sqrt())
}

/// 1.4826 · median |w|.
pub fn robust_scale(w: &Tensor) -> f64 {
    let mut mags: Vec<f32> = w.data.iter().map(|v| v.abs()).collect();
    let n = mags.len();
    let mid = n / 2;
    let (lower, upper, _) = mags.select_nth_unstable_by(mid, f32::total_cmp);
    let upper = *upper as f64;
    let median = if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f32::MIN, f32::max) as f64;
        0.5 * (lower_max + upper)
    };
    MAD_TO_SIGMA * median
}

/// Columns holding at least `ρ·N` entries above the threshold, ascending.
pub fn detect_walls(w: &Tensor, cfg: &WallDetectorConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    w.ensure_finite()?;
    let theta = match cfg.threshold {
        WallThreshold::Absolute(t) => t,
        WallThreshold::Relative(k) => k * robust_scale(w),
    };
    let needed = cfg.row_fraction * w.rows as f64;
    let mut counts = vec![0usize; w.cols];
    for row in w.data.chunks_exact(w.cols) {
        for (c, v) in counts.iter_mut().zip(row) {
            if v.abs() as f64 > theta {
                *c += 1;
            }
        }
    }
    Ok(counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0 && **c as f64 >= needed)
        .map(|(j, _)| j)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOptions {
    pub grouping: GroupingScheme,
    pub params: QuantParams,
    pub walls: WallDetectorConfig,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            grouping: GroupingScheme::PerChannel,
            params: QuantParams::int8(),
            walls: WallDetectorConfig::default(),
        }
    }
}

fn metrics_for(id: LayerId, w: &Tensor, opts: &ProfileOptions) -> Result<LayerMetrics> {
    Ok(LayerMetrics {
        layer_index: id.index(),
        name: w.name.clone(),
        block: id.block,
        kind: id.kind,
        rows: w.rows,
        cols: w.cols,
        max_abs: layer_max_abs(w)? as f64,
        rmse: layer_rmse(w, opts.grouping, opts.params)?,
        grouping: opts.grouping,
        bits: opts.params,
        wall_columns: detect_walls(w, &opts.walls)?,
    })
}

/// One [`LayerMetrics`] per layer, in layer-index order.
pub fn profile_model(model: &FpModel, opts: &ProfileOptions) -> Result<Vec<LayerMetrics>> {
    opts.walls.validate()?;
    model
        .layers
        .par_iter()
        .enumerate()
        .map(|(i, w)| metrics_for(LayerId::from_index(i), w, opts))
        .collect()
}

/// A per-channel profile row plus RMSE under extra group sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub metrics: LayerMetrics,
    /// `(requested group size, rmse)`; the size actually used is the largest
    /// divisor of the layer's input dimension not above the request.
    pub group_rmse: Vec<(usize, f64)>,
}

/// Per-channel profile with additional per-group RMSE columns.
pub fn profile_table(
    model: &FpModel,
    params: QuantParams,
    walls: WallDetectorConfig,
    group_sizes: &[usize],
) -> Result<Vec<ProfileRow>> {
    if group_sizes.contains(&0) {
        return Err(Error::validation("group sizes must be positive"));
    }
    let opts = ProfileOptions {
        grouping: GroupingScheme::PerChannel,
        params,
        walls,
    };
    let metrics = profile_model(model, &opts)?;
    metrics
        .into_par_iter()
        .zip(model.layers.par_iter())
        .map(|(metrics, w)| {
            let group_rmse = group_sizes
                .iter()
                .map(|&g| {
                    let fitted = GroupingScheme::PerGroup {
                        group_size: largest_divisor_at_most(w.cols, g),
                    };
                    layer_rmse(w, fitted, params).map(|r| (g, r))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ProfileRow { metrics, group_rmse })
        })
        .collect()
}

const FIXED_HEAD: [&str; 6] = ["layer_index", "name", "block", "kind", "max_abs", "rmse_pc"];
const FIXED_TAIL: [&str; 4] = ["wall_count", "rows", "cols", "wall_columns"];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// CSV bytes: `layer_index,name,block,kind,max_abs,rmse_pc,rmse_g{g}...,wall_count,rows,cols,wall_columns`.
/// `wall_columns` is a space-separated index list.
pub fn metrics_csv(rows: &[ProfileRow]) -> Result<Vec<u8>> {
    let sizes: Vec<usize> = rows
        .first()
        .map(|r| r.group_rmse.iter().map(|(g, _)| *g).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = FIXED_HEAD.iter().map(|s| s.to_string()).collect();
    header.extend(sizes.iter().map(|g| format!("rmse_g{g}")));
    header.extend(FIXED_TAIL.iter().map(|s| s.to_string()));

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::validation(format!("csv: {e}"));
    w.write_record(&header).map_err(to_err)?;
    for row in rows {
        let m = &row.metrics;
        let mut rec = vec![
            m.layer_index.to_string(),
            m.name.clone(),
            m.block.to_string(),
            m.kind.to_string(),
            m.max_abs.to_string(),
            m.rmse.to_string(),
        ];
        rec.extend(row.group_rmse.iter().map(|(_, r)| r.to_string()));
        rec.push(m.wall_columns.len().to_string());
        rec.push(m.rows.to_string());
        rec.push(m.cols.to_string());
        rec.push(
            m.wall_columns
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        );
        w.write_record(&rec).map_err(to_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::validation(format!("csv: {e}")))
}

pub fn write_metrics_csv(path: &Path, rows: &[ProfileRow]) -> Result<()> {
    write_atomic(path, &metrics_csv(rows)?)
}

/// Parses a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path, params: QuantParams) -> Result<Vec<ProfileRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    let bad = |msg: String| Error::validation(format!("{}: {msg}", path.display()));

    let n = header.len();
    if n < FIXED_HEAD.len() + FIXED_TAIL.len()
        || header.iter().take(6).ne(FIXED_HEAD.iter().copied())
        || header.iter().skip(n - 4).ne(FIXED_TAIL.iter().copied())
    {
        return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let sizes = header
        .iter()
        .take(n - 4)
        .skip(6)
        .map(|h| {
            h.strip_prefix("rmse_g")
                .and_then(|g| g.parse::<usize>().ok())
                .ok_or_else(|| bad(format!("unexpected column `{h}`")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| bad(format!("row {}: `{}` is not a number", line + 1, field(i))))
        };
        let int = |i: usize| -> Result<usize> {
            field(i)
                .parse()
                .map_err(|_| bad(format!("row {}: `{}` is not an integer", line + 1, field(i))))
        };
        let name = field(1).to_string();
        let id = LayerId::parse(&name).ok_or_else(|| bad(format!("`{name}` is not a layer name")))?;
        let layer_index = int(0)?;
        if id.index() != layer_index || id.block != int(2)? || id.kind.as_str() != field(3) {
            return Err(bad(format!("row {}: layer identity columns disagree", line + 1)));
        }
        let wall_columns = field(n - 1)
            .split_whitespace()
            .map(|c| c.parse().map_err(|_| bad(format!("bad wall column `{c}`"))))
            .collect::<Result<Vec<usize>>>()?;
        if wall_columns.len() != int(n - 4)? {
            return Err(bad(format!("row {}: wall_count disagrees with wall_columns", line + 1)));
        }
        let group_rmse = sizes
            .iter()
            .enumerate()
            .map(|(k, g)| num(6 + k).map(|r| (*g, r)))
            .collect::<Result<Vec<_>>>()?;
        out.push(ProfileRow {
            metrics: LayerMetrics {
                layer_index,
                name,
                block: id.block,
                kind: id.kind,
                rows: int(n - 3)?,
                cols: int(n - 2)?,
                max_abs: num(4)?,
                rmse: num(5)?,
                grouping: GroupingScheme::PerChannel,
                bits: params,
                wall_columns,
            },
            group_rmse,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotData {
    pub x: Vec<usize>,
    pub names: Vec<String>,
    pub series: std::collections::BTreeMap<String, Vec<f64>>,
}

/// Layer-axis series (`max_abs`, `rmse`, `rmse_g{g}`) for plotting.
pub fn plot_data(rows: &[ProfileRow]) -> PlotData {
    let mut series = std::collections::BTreeMap::new();
    series.insert("max_abs".to_string(), rows.iter().map(|r| r.metrics.max_abs).collect());
    series.insert("rmse".to_string(), rows.iter().map(|r| r.metrics.rmse).collect());
    if let Some(first) = rows.first() {
        for (k, (g, _)) in first.group_rmse.iter().enumerate() {
            series.insert(
                format!("rmse_g{g}"),
                rows.iter().map(|r| r.group_rmse[k].1).collect(),
            );
        }
    }
    PlotData {
        x: rows.iter().map(|r| r.metrics.layer_index).collect(),
        names: rows.iter().map(|r| r.metrics.name.clone()).collect(),
        series,
    }
}

pub fn write_plot_json(path: &Path, rows: &[ProfileRow]) -> Result<()> {
    write_atomic(path, &to_sorted_json(&plot_data(rows))?)
}
