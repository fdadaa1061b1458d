//! Adam with decoupled weight decay, gradient clipping, the linear
//! warmup/decay schedule, the Group Lasso update adjustment, and
//! mask-aligned moment management for the sparsity updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, LayerWeights, Model};
use crate::tensor::{BlockCoord, BlockSparseMatrix, SparsityMask};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clipping threshold; None disables clipping.
    pub clip_global_norm: Option<f64>,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_global_norm: Some(1.0),
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < 1.0) || !(0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::InvalidArgument("betas must be in (0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be > 0".into()));
        }
        if let Some(c) = self.clip_global_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("clip_global_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Linear warmup to the peak followed by linear decay to zero at
/// `total_steps`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::InvalidArgument("peak_lr must be > 0".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidArgument(
                "warmup_steps must be < total_steps".into(),
            ));
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {} beyond total_steps {}",
            step, schedule.total_steps
        )));
    }
    if step <= schedule.warmup_steps {
        if schedule.warmup_steps == 0 {
            return Ok(schedule.peak_lr);
        }
        return Ok(schedule.peak_lr * step as f64 / schedule.warmup_steps as f64);
    }
    let remain = (schedule.total_steps - step) as f64;
    let span = (schedule.total_steps - schedule.warmup_steps) as f64;
    Ok(schedule.peak_lr * remain / span)
}

/// Decoupled block-L2 shrinkage coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupLassoConfig {
    pub lambda_group: f64,
    pub w_std: f64,
    pub eps_gl: f64,
}

impl Default for GroupLassoConfig {
    fn default() -> Self {
        Self {
            lambda_group: 0.0,
            w_std: 0.02,
            eps_gl: 1e-6,
        }
    }
}

/// First/second Adam moments for one parameter array, aligned entry-for-entry
/// with the values it tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl MomentPair {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Per-layer Adam state plus the global step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub weights: Vec<MomentPair>,
    pub bias: Vec<MomentPair>,
    pub step: u64,
}

impl OptimState {
    pub fn new(model: &Model) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| MomentPair::zeros(l.weights.values().len()))
                .collect(),
            bias: model
                .layers
                .iter()
                .map(|l| MomentPair::zeros(l.bias.len()))
                .collect(),
            step: 0,
        }
    }

    /// Check the entry-for-entry alignment invariants against a model.
    pub fn audit_alignment(&self, model: &Model) -> Result<()> {
        if self.weights.len() != model.layers.len() || self.bias.len() != model.layers.len() {
            return Err(Error::InvalidArgument("state/model layer count mismatch".into()));
        }
        for (l, layer) in model.layers.iter().enumerate() {
            let nw = layer.weights.values().len();
            if self.weights[l].m.len() != nw || self.weights[l].v.len() != nw {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} weight moment length mismatch"
                )));
            }
            if self.bias[l].m.len() != layer.bias.len() || self.bias[l].v.len() != layer.bias.len()
            {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} bias moment length mismatch"
                )));
            }
            if self.weights[l].v.iter().chain(&self.bias[l].v).any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!("layer {l} negative second moment")));
            }
        }
        Ok(())
    }
}

/// Scale all gradients by max_norm / g when the global L2 norm g exceeds
/// max_norm; returns g.
pub fn clip_gradients(grads: &mut Grads, max_norm: f64) -> Result<f64> {
    let mut sumsq = 0.0;
    for lg in &grads.layers {
        for &g in lg.weights.values() {
            sumsq += g * g;
        }
        for &g in &lg.bias {
            sumsq += g * g;
        }
    }
    let norm = sumsq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm = {norm}")));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for lg in &mut grads.layers {
            for g in lg.weights.values_mut() {
                *g *= scale;
            }
            for g in &mut lg.bias {
                *g *= scale;
            }
        }
    }
    Ok(norm)
}

/// Subtract the decoupled Group Lasso shrinkage from an update vector.
///
/// delta[i] -= lr * lambda * w_std * sqrt(B) * w[i] / sqrt(sum_block w^2 + eps),
/// with the block sum taken over the old weight values.
pub fn group_lasso_adjust(
    delta: &mut [f64],
    w: &BlockSparseMatrix,
    cfg: &GroupLassoConfig,
    lr: f64,
) -> Result<()> {
    if delta.len() != w.values.len() {
        return Err(Error::DimensionMismatch(format!(
            "update len {} vs weights len {}",
            delta.len(),
            w.values.len()
        )));
    }
    if cfg.lambda_group == 0.0 {
        return Ok(());
    }
    let b2 = w.block_len();
    let prefactor = lr * cfg.lambda_group * cfg.w_std * (w.mask.block_size as f64).sqrt();
    for blk in 0..w.mask.num_active() {
        let block = &w.values[blk * b2..(blk + 1) * b2];
        let sumsq: f64 = block.iter().map(|x| x * x).sum();
        let denom = (sumsq + cfg.eps_gl).sqrt();
        for i in 0..b2 {
            delta[blk * b2 + i] -= prefactor * block[i] / denom;
        }
    }
    Ok(())
}

fn adam_layer_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut MomentPair,
    frozen: Option<&[bool]>,
    t: u64,
    hyper: &AdamHyper,
    lr: f64,
    weight_decay: f64,
    shrink: Option<(&BlockSparseMatrix, &GroupLassoConfig)>,
) -> Result<()> {
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let mut delta = vec![0.0; params.len()];
    for i in 0..params.len() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let g = grads[i];
        let m = hyper.beta1 * moments.m[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * moments.v[i] + (1.0 - hyper.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        delta[i] = -lr * (m_hat / (v_hat.sqrt() + hyper.eps) + weight_decay * params[i]);
    }
    if let Some((w, cfg)) = shrink {
        // shrinkage uses the pre-update weights; frozen entries keep delta 0
        let mut adjusted = delta.clone();
        group_lasso_adjust(&mut adjusted, w, cfg, lr)?;
        for i in 0..params.len() {
            if !frozen.is_some_and(|f| f[i]) {
                delta[i] = adjusted[i];
            }
        }
    }
    for i in 0..params.len() {
        if delta[i] != 0.0 && !delta[i].is_finite() {
            return Err(Error::Divergence(format!("update[{i}] = {}", delta[i])));
        }
        params[i] += delta[i];
    }
    Ok(())
}

/// One Adam step over every trainable layer, with decoupled weight decay.
///
/// When `group_lasso` is active (lambda > 0) sparse layers receive the block
/// shrinkage instead of per-entry weight decay.
pub fn adam_step(
    model: &mut Model,
    grads: &Grads,
    state: &mut OptimState,
    hyper: &AdamHyper,
    lr: f64,
    group_lasso: Option<&GroupLassoConfig>,
) -> Result<()> {
    if grads.layers.len() != model.layers.len() {
        return Err(Error::DimensionMismatch("grads/model layer count".into()));
    }
    state.step += 1;
    let t = state.step;
    for (l, layer) in model.layers.iter_mut().enumerate() {
        if !layer.trainable {
            continue;
        }
        let frozen = layer.frozen.as_deref();
        let gl_active = group_lasso.filter(|c| c.lambda_group > 0.0);
        match &mut layer.weights {
            LayerWeights::Sparse(w) => {
                let decay = if gl_active.is_some() { 0.0 } else { hyper.weight_decay };
                let w_snapshot = gl_active.map(|_| w.clone());
                adam_layer_step(
                    &mut w.values,
                    grads.layers[l].weights.values(),
                    &mut state.weights[l],
                    frozen,
                    t,
                    hyper,
                    lr,
                    decay,
                    w_snapshot
                        .as_ref()
                        .map(|snap| (snap, gl_active.unwrap())),
                )?;
            }
            LayerWeights::Dense(w) => {
                adam_layer_step(
                    &mut w.values,
                    grads.layers[l].weights.values(),
                    &mut state.weights[l],
                    frozen,
                    t,
                    hyper,
                    lr,
                    hyper.weight_decay,
                    None,
                )?;
            }
        }
        adam_layer_step(
            &mut layer.bias,
            &grads.layers[l].bias,
            &mut state.bias[l],
            None,
            t,
            hyper,
            lr,
            0.0,
            None,
        )?;
    }
    Ok(())
}

/// Zero the moments and parameter values at the given block coordinates.
pub fn reset_moments(
    model: &mut Model,
    state: &mut OptimState,
    layer: usize,
    new_coords: &[BlockCoord],
) -> Result<()> {
    if layer >= model.layers.len() {
        return Err(Error::UnknownLayer(layer));
    }
    let w = match &mut model.layers[layer].weights {
        LayerWeights::Sparse(w) => w,
        LayerWeights::Dense(_) => {
            return Err(Error::InvalidArgument(format!("layer {layer} is dense")))
        }
    };
    let b2 = w.block_len();
    for &coord in new_coords {
        let idx = w
            .mask
            .position(coord)
            .ok_or(Error::CoordNotInMask(coord.0, coord.1))?;
        for i in idx * b2..(idx + 1) * b2 {
            w.values[i] = 0.0;
            state.weights[layer].m[i] = 0.0;
            state.weights[layer].v[i] = 0.0;
        }
    }
    Ok(())
}

/// Re-order values and moments from `old_mask` layout to `new_mask` layout:
/// surviving coordinates keep their entries, grown coordinates start at zero,
/// pruned coordinates are dropped.
pub fn realign_state(
    values: &[f64],
    moments: &MomentPair,
    old_mask: &SparsityMask,
    new_mask: &SparsityMask,
) -> Result<(Vec<f64>, MomentPair)> {
    if old_mask.shape != new_mask.shape || old_mask.block_size != new_mask.block_size {
        return Err(Error::InvalidArgument(
            "masks disagree on shape or block size".into(),
        ));
    }
    let b2 = old_mask.block_size * old_mask.block_size;
    if values.len() != old_mask.num_active() * b2 {
        return Err(Error::DimensionMismatch("values/mask length".into()));
    }
    let n_new = new_mask.num_active() * b2;
    let mut out_values = vec![0.0; n_new];
    let mut out_m = MomentPair::zeros(n_new);
    for (new_idx, &coord) in new_mask.active_blocks.iter().enumerate() {
        if let Some(old_idx) = old_mask.position(coord) {
            let (src, dst) = (old_idx * b2, new_idx * b2);
            out_values[dst..dst + b2].copy_from_slice(&values[src..src + b2]);
            out_m.m[dst..dst + b2].copy_from_slice(&moments.m[src..src + b2]);
            out_m.v[dst..dst + b2].copy_from_slice(&moments.v[src..src + b2]);
        }
    }
    Ok((out_values, out_m))
}
