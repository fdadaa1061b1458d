//! Analytic FLOPs accounting for sparse/dense training, the critical cost
//! factor, learning-rate scaling rules, and Pareto table emission.
//!
//! Training a layer with sparse weights and dense input costs
//! 3 * 2 * I * batch * O * f FLOPs per step: one SpMM forward, one SpMM for
//! the error propagation, and one sparse outer product, 2*I*batch*O*f each.
//! These are the leading-order multiply-add counts, not hardware counters.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions and density of one layer for FLOPs purposes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerFlopsSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub batch: usize,
    /// Density f = 1 - s, in (0, 1].
    pub density: f64,
}

/// FLOPs per training step of one sparse layer: 3 * 2 * I * batch * O * f.
pub fn sparse_train_flops(spec: &LayerFlopsSpec) -> f64 {
    6.0 * spec.input_dim as f64 * spec.batch as f64 * spec.output_dim as f64 * spec.density
}

/// Dense specialization, f = 1: 6 * I * batch * O.
pub fn dense_train_flops(input_dim: usize, output_dim: usize, batch: usize) -> f64 {
    6.0 * input_dim as f64 * batch as f64 * output_dim as f64
}

/// Per-step training FLOPs of a whole model: sparse-eligible layers at their
/// density, dense layers at f = 1. Bias and activation FLOPs excluded.
pub fn model_train_flops(layer_widths: &[usize], densities: &[Option<f64>], batch: usize) -> Result<f64> {
    if layer_widths.len() < 2 || densities.len() != layer_widths.len() - 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} widths vs {} layer densities",
            layer_widths.len(),
            densities.len()
        )));
    }
    let mut total = 0.0;
    for l in 0..densities.len() {
        total += sparse_train_flops(&LayerFlopsSpec {
            input_dim: layer_widths[l],
            output_dim: layer_widths[l + 1],
            batch,
            density: densities[l].unwrap_or(1.0),
        });
    }
    Ok(total)
}

/// Maximum per-FLOP slowdown a sparse implementation may incur while still
/// winning on time-to-train: F_dense / F_sparse.
pub fn epsilon_critical(flops_dense: f64, flops_sparse: f64) -> Result<f64> {
    if flops_sparse == 0.0 {
        return Err(Error::InvalidArgument("F_sparse must be nonzero".into()));
    }
    Ok(flops_dense / flops_sparse)
}

/// Fitted optimal learning rate of a static-sparse model:
/// exp(1.969 s^2 + 0.2905 s - 8.175), natural log fit.
pub fn lr_static_fit(sparsity: f64) -> f64 {
    (1.969 * sparsity * sparsity + 0.2905 * sparsity - 8.175).exp()
}

/// Multiplicative sparse learning-rate rule from a tuned dense rate:
/// lr(s) = lr(0) * exp(1.969 s^2 + 0.2905 s).
pub fn lr_sparse_from_dense(lr_dense: f64, sparsity: f64) -> f64 {
    lr_dense * (1.969 * sparsity * sparsity + 0.2905 * sparsity).exp()
}

/// Fitted optimal learning rate over trainable parameter count:
/// exp(-0.838 ln(N) + 6.13).
pub fn lr_param_fit(num_params: u64) -> f64 {
    (-0.838 * (num_params as f64).ln() + 6.13).exp()
}

/// One point of the loss-vs-FLOPs frontier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub train_flops_per_step: f64,
    pub final_loss: f64,
    pub sparsity: f64,
    pub block_size: usize,
}

/// Write Pareto points as CSV, sorted by FLOPs.
pub fn write_pareto_csv<W: Write>(points: &[ParetoPoint], mut out: W) -> Result<()> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.train_flops_per_step
            .partial_cmp(&b.train_flops_per_step)
            .unwrap()
            .then(a.label.cmp(&b.label))
    });
    writeln!(out, "label,flops,loss,sparsity,block_size")?;
    for p in sorted {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.label, p.train_flops_per_step, p.final_loss, p.sparsity, p.block_size
        )?;
    }
    Ok(())
}

/// JSON summary of the same table.
pub fn write_pareto_json<W: Write>(points: &[ParetoPoint], out: W) -> Result<()> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.train_flops_per_step
            .partial_cmp(&b.train_flops_per_step)
            .unwrap()
            .then(a.label.cmp(&b.label))
    });
    serde_json::to_writer_pretty(out, &sorted)?;
    Ok(())
}
