//! Symmetric n-bit integer quantization.
//!
//! A group of values shares one scale `s = max_abs / (2^(n-1) - 1)`; each value
//! maps to `round(x / s)` (ties away from zero) clamped to `[-qmax, qmax]`, and
//! dequantizes as `q * s`.
//!
//! Weights (N×M) are grouped along the input dimension of each row: one scale per
//! row for [`GroupingScheme::PerChannel`], or `M / g` contiguous groups per row for
//! [`GroupingScheme::PerGroup`]. Activations (M×P) get one scale per column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix64, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QuantParams {
    bits: u8,
}

impl QuantParams {
    pub const MIN_BITS: u8 = 2;
    pub const MAX_BITS: u8 = 8;

    pub fn new(bits: u8) -> Result<Self> {
        if !(Self::MIN_BITS..=Self::MAX_BITS).contains(&bits) {
            return Err(Error::validation(format!(
                "bit width {bits} outside [{}, {}]",
                Self::MIN_BITS,
                Self::MAX_BITS
            )));
        }
        Ok(Self { bits })
    }

    pub fn int8() -> Self {
        Self { bits: 8 }
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    /// Largest representable magnitude, `2^(n-1) - 1`.
    pub fn qmax(self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }
}

impl Default for QuantParams {
    fn default() -> Self {
        Self::int8()
    }
}

impl TryFrom<u8> for QuantParams {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<QuantParams> for u8 {
    fn from(p: QuantParams) -> u8 {
        p.bits
    }
}

/// How scale factors are shared along the grouped dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GroupingScheme {
    PerChannel,
    PerGroup { group_size: usize },
}

impl GroupingScheme {
    /// Checks that the scheme can partition a dimension of length `len`.
    pub fn validate(self, len: usize) -> Result<()> {
        match self {
            GroupingScheme::PerChannel => Ok(()),
            GroupingScheme::PerGroup { group_size: 0 } => {
                Err(Error::validation("group size must be positive"))
            }
            GroupingScheme::PerGroup { group_size } if len % group_size != 0 => {
                Err(Error::validation(format!(
                    "group size {group_size} does not divide dimension {len}"
                )))
            }
            GroupingScheme::PerGroup { .. } => Ok(()),
        }
    }

    /// Length of one group over a dimension of length `len`.
    pub fn group_len(self, len: usize) -> usize {
        match self {
            GroupingScheme::PerChannel => len,
            GroupingScheme::PerGroup { group_size } => group_size,
        }
    }

    pub fn groups_per_row(self, len: usize) -> usize {
        len / self.group_len(len)
    }

    pub fn is_per_group(self) -> bool {
        matches!(self, GroupingScheme::PerGroup { .. })
    }
}

impl std::fmt::Display for GroupingScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupingScheme::PerChannel => write!(f, "per-channel"),
            GroupingScheme::PerGroup { group_size } => write!(f, "per-group({group_size})"),
        }
    }
}

/// Largest divisor of `len` that does not exceed `requested`.
pub fn largest_divisor_at_most(len: usize, requested: usize) -> usize {
    let cap = requested.min(len).max(1);
    (1..=cap).rev().find(|d| len % d == 0).unwrap_or(1)
}

/// Which dimension the scales run along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Weights: scales indexed by row (and group within the row).
    RowWise,
    /// Activations: one scale per column.
    ColumnWise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i8>,
    /// Row-wise: `rows × groups_per_row`, row-major. Column-wise: length `cols`.
    pub scales: Vec<f32>,
    pub grouping: GroupingScheme,
    pub params: QuantParams,
    pub axis: Axis,
}

impl QuantizedTensor {
    pub fn groups_per_row(&self) -> usize {
        match self.axis {
            Axis::RowWise => self.grouping.groups_per_row(self.cols),
            Axis::ColumnWise => 1,
        }
    }

    pub fn group_len(&self) -> usize {
        self.grouping.group_len(self.cols)
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> i8 {
        self.values[row * self.cols + col]
    }

    /// Scale governing element `(row, col)`.
    #[inline]
    pub fn scale_at(&self, row: usize, col: usize) -> f32 {
        match self.axis {
            Axis::RowWise => self.scales[row * self.groups_per_row() + col / self.group_len()],
            Axis::ColumnWise => self.scales[col],
        }
    }

    /// Checks range, scale positivity, and array lengths.
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.rows * self.cols {
            return Err(Error::validation(format!(
                "quantized tensor `{}` has {} values for shape {}x{}",
                self.name,
                self.values.len(),
                self.rows,
                self.cols
            )));
        }
        let expected_scales = match self.axis {
            Axis::RowWise => {
                self.grouping.validate(self.cols)?;
                self.rows * self.grouping.groups_per_row(self.cols)
            }
            Axis::ColumnWise => self.cols,
        };
        if self.scales.len() != expected_scales {
            return Err(Error::validation(format!(
                "quantized tensor `{}` has {} scales, expected {expected_scales}",
                self.name,
                self.scales.len()
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::validation(format!(
                "quantized tensor `{}` has non-positive scale {s}",
                self.name
            )));
        }
        let qmax = self.params.qmax();
        if let Some(v) = self.values.iter().find(|v| (**v as i32).abs() > qmax) {
            return Err(Error::validation(format!(
                "quantized tensor `{}` has value {v} outside ±{qmax}",
                self.name
            )));
        }
        Ok(())
    }
}

/// `max_abs / qmax`, or 1.0 for an all-zero group.
pub fn scale_factor(max_abs: f32, params: QuantParams) -> Result<f32> {
    if max_abs.is_nan() || max_abs < 0.0 {
        return Err(Error::validation(format!(
            "max_abs must be non-negative, got {max_abs}"
        )));
    }
    if !max_abs.is_finite() {
        return Err(Error::validation("max_abs must be finite"));
    }
    Ok(scale_or_unit(max_abs, params))
}

#[inline]
fn scale_or_unit(max_abs: f32, params: QuantParams) -> f32 {
    if max_abs == 0.0 {
        1.0
    } else {
        max_abs / params.qmax() as f32
    }
}

#[inline]
fn max_abs_of(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Quantizes `values` into `out` with a shared scale; inputs must be finite.
fn quantize_into(values: &[f32], params: QuantParams, out: &mut [i8]) -> f32 {
    let s = scale_or_unit(max_abs_of(values), params);
    let qmax = params.qmax() as f64;
    let inv = s as f64;
    for (q, &v) in out.iter_mut().zip(values) {
        // f64::round is half-away-from-zero.
        *q = (v as f64 / inv).round().clamp(-qmax, qmax) as i8;
    }
    s
}

/// Quantizes one group with a shared scale.
pub fn quantize_group(values: &[f32], params: QuantParams) -> Result<(Vec<i8>, f32)> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite input {v}")));
    }
    let mut q = vec![0i8; values.len()];
    let s = quantize_into(values, params, &mut q);
    Ok((q, s))
}

/// Quantizes an N×M weight row-wise under `grouping`.
pub fn quantize_weight(
    w: &Tensor,
    grouping: GroupingScheme,
    params: QuantParams,
) -> Result<QuantizedTensor> {
    grouping
        .validate(w.cols)
        .map_err(|e| Error::validation(format!("tensor `{}`: {e}", w.name)))?;
    w.ensure_finite()?;
    let group_len = grouping.group_len(w.cols);
    let mut values = vec![0i8; w.data.len()];
    let scales = w
        .data
        .chunks_exact(group_len)
        .zip(values.chunks_exact_mut(group_len))
        .map(|(src, dst)| quantize_into(src, params, dst))
        .collect();
    Ok(QuantizedTensor {
        name: w.name.clone(),
        rows: w.rows,
        cols: w.cols,
        values,
        scales,
        grouping,
        params,
        axis: Axis::RowWise,
    })
}

/// Quantizes an M×P activation with one scale per column.
pub fn quantize_activation(a: &Tensor, params: QuantParams) -> Result<QuantizedTensor> {
    a.ensure_finite()?;
    let mut values = vec![0i8; a.data.len()];
    let mut scales = Vec::with_capacity(a.cols);
    let mut column = vec![0f32; a.rows];
    let mut qcol = vec![0i8; a.rows];
    for j in 0..a.cols {
        for (i, c) in column.iter_mut().enumerate() {
            *c = a.get(i, j);
        }
        scales.push(quantize_into(&column, params, &mut qcol));
        for (i, q) in qcol.iter().enumerate() {
            values[i * a.cols + j] = *q;
        }
    }
    Ok(QuantizedTensor {
        name: a.name.clone(),
        rows: a.rows,
        cols: a.cols,
        values,
        scales,
        grouping: GroupingScheme::PerChannel,
        params,
        axis: Axis::ColumnWise,
    })
}

/// `q · s` per element, rounded to fp32.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = dequantize_iter(q).map(|v| v as f32).collect();
    Tensor {
        name: q.name.clone(),
        rows: q.rows,
        cols: q.cols,
        data,
    }
}

/// `q · s` per element in fp64. An i8 times an f32 fits the f64 mantissa, so
/// every entry is exact.
pub fn dequantize_exact(q: &QuantizedTensor) -> Matrix64 {
    Matrix64 {
        rows: q.rows,
        cols: q.cols,
        data: dequantize_iter(q).collect(),
    }
}

fn dequantize_iter(q: &QuantizedTensor) -> impl Iterator<Item = f64> + '_ {
    (0..q.rows).flat_map(move |i| {
        (0..q.cols).map(move |j| q.value(i, j) as f64 * q.scale_at(i, j) as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p8() -> QuantParams {
        QuantParams::int8()
    }

    #[test]
    fn qmax_per_bit_width() {
        assert_eq!(QuantParams::new(8).unwrap().qmax(), 127);
        assert_eq!(QuantParams::new(4).unwrap().qmax(), 7);
        assert_eq!(QuantParams::new(2).unwrap().qmax(), 1);
        assert!(QuantParams::new(1).is_err());
        assert!(QuantParams::new(9).is_err());
    }

    #[test]
    fn scale_factor_examples() {
        let s = scale_factor(93.0, p8()).unwrap();
        assert!((s as f64 - 93.0 / 127.0).abs() < 1e-6);
        assert!((s - 0.732283).abs() < 1e-6);
        assert_eq!(scale_factor(0.0, p8()).unwrap(), 1.0);
        assert_eq!(scale_factor(127.0, p8()).unwrap(), 1.0);
        assert!(scale_factor(-1.0, p8()).is_err());
        assert!(scale_factor(f32::NAN, p8()).is_err());
    }

    #[test]
    fn quantize_group_tie_rounds_away_from_zero() {
        let (q, s) = quantize_group(&[-1.0, 0.0, 0.5], p8()).unwrap();
        assert_eq!(s, 1.0 / 127.0);
        assert_eq!(q, vec![-127, 0, 64]);
        let (q, _) = quantize_group(&[1.0, -0.5], p8()).unwrap();
        assert_eq!(q, vec![127, -64]);
    }

    #[test]
    fn quantize_group_zero_and_endpoint() {
        let (q, s) = quantize_group(&[0.0; 5], p8()).unwrap();
        assert_eq!(q, vec![0; 5]);
        assert_eq!(s, 1.0);

        let (q, s) = quantize_group(&[3.25], p8()).unwrap();
        assert_eq!(q, vec![127]);
        assert_eq!(q[0] as f32 * s, 3.25);
    }

    #[test]
    fn quantize_group_rejects_non_finite() {
        assert!(quantize_group(&[1.0, f32::NAN], p8()).is_err());
        assert!(quantize_group(&[f32::INFINITY], p8()).is_err());
    }

    fn outlier_row() -> Tensor {
        let mut data = vec![0.01f32; 7];
        data.push(10.0);
        Tensor::new("w", 1, 8, data).unwrap()
    }

    #[test]
    fn per_channel_outlier_row_kills_small_entries() {
        let q = quantize_weight(&outlier_row(), GroupingScheme::PerChannel, p8()).unwrap();
        assert_eq!(q.scales, vec![10.0 / 127.0]);
        assert_eq!(&q.values[..7], &[0; 7]);
        assert_eq!(q.values[7], 127);
        let d = dequantize(&q);
        for j in 0..7 {
            assert_eq!(d.get(0, j), 0.0);
            assert_eq!(w_err(&outlier_row(), &d, j), 0.01);
        }
        assert!((d.get(0, 7) - 10.0).abs() <= q.scales[0] / 2.0);
    }

    fn w_err(w: &Tensor, d: &Tensor, j: usize) -> f32 {
        (w.get(0, j) - d.get(0, j)).abs()
    }

    #[test]
    fn per_group_isolates_outlier() {
        let w = outlier_row();
        let pc = quantize_weight(&w, GroupingScheme::PerChannel, p8()).unwrap();
        let pg = quantize_weight(&w, GroupingScheme::PerGroup { group_size: 4 }, p8()).unwrap();
        assert_eq!(pg.scales.len(), 2);
        assert_eq!(pg.scales[0], 0.01 / 127.0);
        assert_eq!(pg.scales[1], pc.scales[0]);
        let d = dequantize_exact(&pg);
        let s0 = pg.scales[0] as f64;
        for j in 0..4 {
            assert!((d.get(0, j) - 0.01f32 as f64).abs() <= s0 / 2.0);
            assert!((d.get(0, j) - 0.01f32 as f64).abs() < 3.9e-5);
        }
        // the outlier group is quantized exactly as under per-channel
        assert_eq!(&pg.values[4..], &pc.values[4..]);
    }

    #[test]
    fn per_group_full_width_equals_per_channel() {
        let w = Tensor::from_fn("w", 3, 6, |i, j| ((i * 7 + j * 3) % 11) as f32 - 5.5);
        let pc = quantize_weight(&w, GroupingScheme::PerChannel, p8()).unwrap();
        let pg = quantize_weight(&w, GroupingScheme::PerGroup { group_size: 6 }, p8()).unwrap();
        assert_eq!(pc.values, pg.values);
        assert_eq!(pc.scales, pg.scales);
    }

    #[test]
    fn non_dividing_group_size_is_rejected() {
        let w = Tensor::zeros("w", 2, 6);
        let err = quantize_weight(&w, GroupingScheme::PerGroup { group_size: 4 }, p8());
        assert!(matches!(err, Err(Error::Validation(_))));
        assert!(quantize_weight(&w, GroupingScheme::PerGroup { group_size: 0 }, p8()).is_err());
    }

    #[test]
    fn activation_unit_column() {
        let a = Tensor::from_fn("a", 4, 2, |i, j| if i == 2 && j == 1 { 1.0 } else { 0.0 });
        let q = quantize_activation(&a, p8()).unwrap();
        assert_eq!(q.scales, vec![1.0, 1.0 / 127.0]);
        assert_eq!(q.value(2, 1), 127);
        assert_eq!(q.values.iter().filter(|v| **v != 0).count(), 1);
    }

    #[test]
    fn activation_matches_transposed_weight() {
        let a = Tensor::from_fn("a", 5, 3, |i, j| (i as f32 - 2.0) * (j as f32 + 0.5));
        let qa = quantize_activation(&a, p8()).unwrap();
        let qw = quantize_weight(&a.transpose(), GroupingScheme::PerChannel, p8()).unwrap();
        assert_eq!(qa.scales, qw.scales);
        for i in 0..5 {
            for j in 0..3 {
                assert_eq!(qa.value(i, j), qw.value(j, i));
            }
        }
    }

    #[test]
    fn activation_scales_match_column_max_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::from_fn("a", 8, 3, |_, _| rng.random_range(-2.0f32..2.0));
        let q = quantize_activation(&a, p8()).unwrap();
        for j in 0..3 {
            let mut m = 0.0f32;
            for i in 0..8 {
                if a.get(i, j).abs() > m {
                    m = a.get(i, j).abs();
                }
            }
            assert_eq!(q.scales[j], m / 127.0);
        }
    }

    #[test]
    fn dequantize_hand_example() {
        // W = [[1.0, -0.5], [0.25, 0.0]], per-channel int8
        let w = Tensor::new("w", 2, 2, vec![1.0, -0.5, 0.25, 0.0]).unwrap();
        let q = quantize_weight(&w, GroupingScheme::PerChannel, p8()).unwrap();
        assert_eq!(q.values, vec![127, -64, 127, 0]);
        let d = dequantize_exact(&q);
        let s0 = (1.0f32 / 127.0) as f64;
        let s1 = (0.25f32 / 127.0) as f64;
        assert_eq!(d.data, vec![127.0 * s0, -64.0 * s0, 127.0 * s1, 0.0]);
        assert!((d.get(0, 1) + 0.503937).abs() < 1e-6);
    }

    #[test]
    fn dequantize_zero_tensor() {
        let q = quantize_weight(&Tensor::zeros("z", 3, 4), GroupingScheme::PerChannel, p8()).unwrap();
        assert!(dequantize(&q).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn validate_catches_corruption() {
        let w = Tensor::from_fn("w", 2, 4, |i, j| (i + j) as f32);
        let mut q = quantize_weight(&w, GroupingScheme::PerGroup { group_size: 2 }, p8()).unwrap();
        q.validate().unwrap();
        q.scales[0] = 0.0;
        assert!(q.validate().is_err());
        q.scales[0] = 1.0;
        q.scales.pop();
        assert!(q.validate().is_err());
    }

    #[test]
    fn largest_divisor() {
        assert_eq!(largest_divisor_at_most(64, 1024), 64);
        assert_eq!(largest_divisor_at_most(64, 16), 16);
        assert_eq!(largest_divisor_at_most(96, 40), 32);
        assert_eq!(largest_divisor_at_most(7, 5), 1);
    }

    #[test]
    fn grouping_json_shape() {
        let g = GroupingScheme::PerGroup { group_size: 1024 };
        assert_eq!(
            serde_json::to_string(&g).unwrap(),
            r#"{"mode":"per_group","group_size":1024}"#
        );
        assert_eq!(
            serde_json::to_string(&GroupingScheme::PerChannel).unwrap(),
            r#"{"mode":"per_channel"}"#
        );
    }
}
