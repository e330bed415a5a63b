//! Quantized matmul with an exact integer core.
//!
//! `out[i,j] = Σ_k Wq[i,k]·Aq[k,j]` is accumulated in integers. Per-channel
//! weights rescale the whole sum by `s_w[i]·s_a[j]` (the outer product of the
//! two scale vectors). Per-group weights produce one integer partial sum per
//! group; each is scaled by its group scale and the partials are combined in
//! fp64 in ascending group order before the activation scale is applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quantizer::{
    dequantize_exact, quantize_activation, quantize_weight, Axis, GroupingScheme, QuantParams,
    QuantizedTensor,
};
use crate::tensor::{Matrix64, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct MatmulOperands<'a> {
    pub weights: &'a QuantizedTensor,
    pub activations: &'a QuantizedTensor,
}

impl<'a> MatmulOperands<'a> {
    pub fn new(weights: &'a QuantizedTensor, activations: &'a QuantizedTensor) -> Result<Self> {
        if weights.axis != Axis::RowWise {
            return Err(Error::validation("weights must carry row-wise scales"));
        }
        if activations.axis != Axis::ColumnWise {
            return Err(Error::validation("activations must carry column-wise scales"));
        }
        if weights.cols != activations.rows {
            return Err(Error::validation(format!(
                "inner dimensions differ: {}x{} · {}x{}",
                weights.rows, weights.cols, activations.rows, activations.cols
            )));
        }
        weights.validate()?;
        activations.validate()?;
        Ok(Self {
            weights,
            activations,
        })
    }

    /// Whether an i32 accumulator cannot overflow over a full row.
    pub fn fits_i32(&self) -> bool {
        let bound = self.weights.cols as i64
            * self.weights.params.qmax() as i64
            * self.activations.params.qmax() as i64;
        bound <= i32::MAX as i64
    }
}

fn dot_i32(a: &[i8], b: &[i8]) -> i64 {
    a.iter()
        .zip(b)
        .fold(0i32, |acc, (&x, &y)| acc + x as i32 * y as i32) as i64
}

fn dot_i64(a: &[i8], b: &[i8]) -> i64 {
    a.iter()
        .zip(b)
        .fold(0i64, |acc, (&x, &y)| acc + x as i64 * y as i64)
}

/// Activation values transposed to P×M so each column is contiguous.
fn columns(a: &QuantizedTensor) -> Vec<i8> {
    let mut t = vec![0i8; a.values.len()];
    for k in 0..a.rows {
        for j in 0..a.cols {
            t[j * a.rows + k] = a.values[k * a.cols + j];
        }
    }
    t
}

fn run(ops: &MatmulOperands<'_>) -> Matrix64 {
    let w = ops.weights;
    let a = ops.activations;
    let (n, m, p) = (w.rows, w.cols, a.cols);
    let g = w.group_len();
    let groups = w.groups_per_row();
    let dot = if ops.fits_i32() { dot_i32 } else { dot_i64 };
    let a_cols = columns(a);

    let mut out = Matrix64::zeros(n, p);
    out.data
        .par_chunks_mut(p)
        .enumerate()
        .for_each(|(i, out_row)| {
            let w_row = &w.values[i * m..(i + 1) * m];
            let w_scales = &w.scales[i * groups..(i + 1) * groups];
            for (j, out_ij) in out_row.iter_mut().enumerate() {
                let a_col = &a_cols[j * m..(j + 1) * m];
                let mut acc = dot(&w_row[..g], &a_col[..g]) as f64 * w_scales[0] as f64;
                for k in 1..groups {
                    let r = k * g..(k + 1) * g;
                    acc += dot(&w_row[r.clone()], &a_col[r]) as f64 * w_scales[k] as f64;
                }
                *out_ij = acc * a.scales[j] as f64;
            }
        });
    out
}

/// Per-channel weights × per-channel activations.
pub fn matmul_per_channel(ops: &MatmulOperands<'_>) -> Result<Matrix64> {
    if ops.weights.groups_per_row() != 1 {
        return Err(Error::validation(format!(
            "per-channel kernel got {} weights",
            ops.weights.grouping
        )));
    }
    Ok(run(ops))
}

/// Per-group weights × per-channel activations.
pub fn matmul_per_group(ops: &MatmulOperands<'_>) -> Result<Matrix64> {
    Ok(run(ops))
}

/// Picks the kernel matching the weight grouping.
pub fn matmul(ops: &MatmulOperands<'_>) -> Result<Matrix64> {
    match ops.weights.grouping {
        GroupingScheme::PerChannel => matmul_per_channel(ops),
        GroupingScheme::PerGroup { .. } => matmul_per_group(ops),
    }
}

/// fp64 product, row-major `i, j, k` loop order.
pub fn reference_matmul(w: &Matrix64, a: &Matrix64) -> Result<Matrix64> {
    if w.cols != a.rows {
        return Err(Error::validation(format!(
            "inner dimensions differ: {}x{} · {}x{}",
            w.rows, w.cols, a.rows, a.cols
        )));
    }
    let mut out = Matrix64::zeros(w.rows, a.cols);
    for i in 0..w.rows {
        for j in 0..a.cols {
            let mut acc = 0.0f64;
            for k in 0..w.cols {
                acc += w.get(i, k) * a.get(k, j);
            }
            out.data[i * a.cols + j] = acc;
        }
    }
    Ok(out)
}

/// [`reference_matmul`] on fp32 inputs.
pub fn reference_matmul_fp(w: &Tensor, a: &Tensor) -> Result<Matrix64> {
    reference_matmul(&Matrix64::from_tensor(w), &Matrix64::from_tensor(a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCheck {
    pub instances: usize,
    pub max_rel_per_channel: f64,
    pub max_rel_per_group: f64,
    /// Per-group kernel with `g = M` reproduced the per-channel output bit for bit.
    pub degenerate_group_identical: bool,
}

impl KernelCheck {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_per_channel.max(self.max_rel_per_group)
    }
}

fn divisors(m: usize) -> Vec<usize> {
    (1..=m).filter(|d| m % d == 0).collect()
}

/// Runs both kernels on seeded random operands (up to 64×128 · 128×32) and
/// compares them with the fp64 product of the dequantized operands.
pub fn self_check(seed: u64, instances: usize) -> Result<KernelCheck> {
    let params = QuantParams::int8();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = KernelCheck {
        instances,
        max_rel_per_channel: 0.0,
        max_rel_per_group: 0.0,
        degenerate_group_identical: true,
    };
    for _ in 0..instances {
        let n = rng.random_range(1..=64);
        let m = rng.random_range(1..=128);
        let p = rng.random_range(1..=32);
        let amp_w = rng.random_range(0.01f32..100.0);
        let amp_a = rng.random_range(0.01f32..100.0);
        let w = Tensor::from_fn("w", n, m, |_, _| rng.random_range(-amp_w..=amp_w));
        let a = Tensor::from_fn("a", m, p, |_, _| rng.random_range(-amp_a..=amp_a));
        let divs = divisors(m);
        let g = divs[rng.random_range(0..divs.len())];

        let qa = quantize_activation(&a, params)?;
        let qw_pc = quantize_weight(&w, GroupingScheme::PerChannel, params)?;
        let qw_pg = quantize_weight(&w, GroupingScheme::PerGroup { group_size: g }, params)?;
        let qw_full = quantize_weight(&w, GroupingScheme::PerGroup { group_size: m }, params)?;
        let da = dequantize_exact(&qa);

        let pc = matmul_per_channel(&MatmulOperands::new(&qw_pc, &qa)?)?;
        let reference = reference_matmul(&dequantize_exact(&qw_pc), &da)?;
        check.max_rel_per_channel = check.max_rel_per_channel.max(pc.relative_frobenius_error(&reference));

        let pg = matmul_per_group(&MatmulOperands::new(&qw_pg, &qa)?)?;
        let reference = reference_matmul(&dequantize_exact(&qw_pg), &da)?;
        check.max_rel_per_group = check.max_rel_per_group.max(pg.relative_frobenius_error(&reference));

        let full = matmul_per_group(&MatmulOperands::new(&qw_full, &qa)?)?;
        check.degenerate_group_identical &= full
            .data
            .iter()
            .zip(&pc.data)
            .all(|(x, y)| x.to_bits() == y.to_bits());
    }
    Ok(check)
}
