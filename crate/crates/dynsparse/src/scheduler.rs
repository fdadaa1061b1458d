//! Periodic prune/re-allocate sparsity updates: cosine-decayed pruning
//! ratio, smallest-L^p block pruning, and random or gradient-based
//! re-allocation with zeroed Adam moments on grown blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, LayerWeights, Model};
use crate::optim::{realign_state, reset_moments, OptimState};
use crate::tensor::{block_norm, BlockCoord, BlockSparseMatrix, NormKind, SparsityMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReallocMode {
    /// Uniform re-allocation over inactive blocks; keeps training
    /// always-sparse.
    Random,
    /// RigL-style growth where the dense gradient is largest; requires dense
    /// weight gradients for sparse layers.
    Gradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynSparseConfig {
    /// Requested sparsity ratio s, constant per layer over training.
    pub sparsity: f64,
    /// Update count n; the scheduler performs n - 1 interior updates at
    /// steps floor(j * T / n), j = 1..n-1.
    pub updates: usize,
    /// Maximum pruning ratio p_r, applied at the first update.
    pub max_pruning_ratio: f64,
    pub block_size: usize,
    pub norm: NormKind,
    pub realloc_mode: ReallocMode,
    pub total_steps: u64,
}

impl DynSparseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sparsity && self.sparsity < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sparsity must be in (0, 1), got {}",
                self.sparsity
            )));
        }
        if self.updates == 0 {
            return Err(Error::InvalidArgument("updates must be >= 1".into()));
        }
        if self.total_steps / self.updates as u64 == 0 {
            return Err(Error::InvalidArgument(format!(
                "update interval T/n = {}/{} is below one step",
                self.total_steps, self.updates
            )));
        }
        if !(0.0 <= self.max_pruning_ratio && self.max_pruning_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "max_pruning_ratio must be in [0, 1], got {}",
                self.max_pruning_ratio
            )));
        }
        Ok(())
    }

    /// Interior update instants: (step, update index k) pairs at
    /// floor(j * T / n) for j = 1..n-1; nothing at t = 0 or t = T.
    pub fn update_schedule(&self) -> Vec<(u64, usize)> {
        let n = self.updates as u64;
        (1..n)
            .map(|j| (j * self.total_steps / n, (j - 1) as usize))
            .collect()
    }
}

/// Cosine decay of the pruning ratio over update indices:
/// p_r(k) = p_r * (1 + cos(pi k / n)) / 2.
pub fn pruning_ratio_at(cfg: &DynSparseConfig, k: usize) -> Result<f64> {
    if k >= cfg.updates {
        return Err(Error::InvalidArgument(format!(
            "update index {k} out of range (n = {})",
            cfg.updates
        )));
    }
    let phase = std::f64::consts::PI * k as f64 / cfg.updates as f64;
    Ok(cfg.max_pruning_ratio * 0.5 * (1.0 + phase.cos()))
}

/// Remove the floor(ratio * |active|) blocks of smallest L^p norm.
/// Ties break by coordinate order, so the result is deterministic.
pub fn prune_step(
    w: &BlockSparseMatrix,
    ratio: f64,
    p: NormKind,
) -> Result<(Vec<BlockCoord>, SparsityMask)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} out of [0, 1]")));
    }
    let n_active = w.mask.num_active();
    let count = (ratio * n_active as f64).floor() as usize;
    if count == 0 {
        return Ok((Vec::new(), w.mask.clone()));
    }
    if count >= n_active {
        return Err(Error::DegenerateSparsity(format!(
            "pruning {count} of {n_active} blocks would empty the mask"
        )));
    }
    let mut scored: Vec<(f64, BlockCoord)> = w
        .mask
        .active_blocks
        .iter()
        .enumerate()
        .map(|(idx, &coord)| (block_norm(w.block(idx), p), coord))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut pruned: Vec<BlockCoord> = scored[..count].iter().map(|&(_, c)| c).collect();
    pruned.sort_unstable();
    let surviving: Vec<BlockCoord> = scored[count..].iter().map(|&(_, c)| c).collect();
    let mask = SparsityMask::new(w.mask.shape, w.mask.block_size, surviving)?;
    Ok((pruned, mask))
}

/// Uniform sample without replacement from the inactive blocks.
pub fn grow_random<R: Rng + ?Sized>(
    mask: &SparsityMask,
    count: usize,
    rng: &mut R,
) -> Result<Vec<BlockCoord>> {
    let inactive = mask.inactive_blocks();
    if count > inactive.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot grow {count} blocks, only {} inactive",
            inactive.len()
        )));
    }
    let mut picked: Vec<BlockCoord> = rand::seq::index::sample(rng, inactive.len(), count)
        .into_iter()
        .map(|i| inactive[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Inactive blocks with the largest L1 norm of the dense gradient block.
pub fn grow_gradient(
    mask: &SparsityMask,
    count: usize,
    dense_grad: &crate::tensor::DenseMatrix,
) -> Result<Vec<BlockCoord>> {
    if dense_grad.shape != mask.shape {
        return Err(Error::DimensionMismatch(format!(
            "grad {}x{} vs mask {}x{}",
            dense_grad.shape.rows, dense_grad.shape.cols, mask.shape.rows, mask.shape.cols
        )));
    }
    let inactive = mask.inactive_blocks();
    if count > inactive.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot grow {count} blocks, only {} inactive",
            inactive.len()
        )));
    }
    let b = mask.block_size;
    let mut scored: Vec<(f64, BlockCoord)> = inactive
        .into_iter()
        .map(|(br, bc)| {
            let mut norm = 0.0;
            for r in 0..b {
                for c in 0..b {
                    norm += dense_grad.get(br * b + r, bc * b + c).abs();
                }
            }
            (norm, (br, bc))
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut picked: Vec<BlockCoord> = scored[..count].iter().map(|&(_, c)| c).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Per-layer prune/grow coordinate sets of one sparsity update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerUpdate {
    pub layer: usize,
    pub pruned: Vec<BlockCoord>,
    pub grown: Vec<BlockCoord>,
}

/// Record of one sparsity update across all sparse layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update_index: usize,
    pub step: u64,
    pub pruning_ratio: f64,
    pub layers: Vec<LayerUpdate>,
    /// Blocks pruned now that had been freshly allocated at the previous
    /// update: the numerator of the removed-new ratio.
    pub pruned_previously_new: usize,
    pub pruned_total: usize,
}

/// One Algorithm-1 sparsity update: per sparse layer, prune the lowest-norm
/// fraction, grow the same count (random or gradient-based), realign the
/// optimizer state, and zero values/moments of grown blocks.
#[allow(clippy::too_many_arguments)]
pub fn dynsparse_update<R: Rng + ?Sized>(
    model: &mut Model,
    state: &mut OptimState,
    cfg: &DynSparseConfig,
    k: usize,
    step: u64,
    rng: &mut R,
    grads: Option<&Grads>,
    prev: Option<&UpdateRecord>,
) -> Result<UpdateRecord> {
    let ratio = pruning_ratio_at(cfg, k)?;
    let mut layers = Vec::new();
    let mut pruned_prev_new = 0usize;
    let mut pruned_total = 0usize;

    for l in model.sparse_layer_indices() {
        let w = match &model.layers[l].weights {
            LayerWeights::Sparse(w) => w.clone(),
            LayerWeights::Dense(_) => unreachable!(),
        };
        let (pruned, surviving) = prune_step(&w, ratio, cfg.norm)?;
        if pruned.is_empty() {
            layers.push(LayerUpdate {
                layer: l,
                pruned: Vec::new(),
                grown: Vec::new(),
            });
            continue;
        }
        let grown = match cfg.realloc_mode {
            ReallocMode::Random => grow_random(&surviving, pruned.len(), rng)?,
            ReallocMode::Gradient => {
                let dense = grads
                    .and_then(|g| g.layers[l].dense_weights.as_ref())
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "gradient re-allocation needs dense gradients for layer {l}"
                        ))
                    })?;
                grow_gradient(&surviving, pruned.len(), dense)?
            }
        };

        let mut coords = surviving.active_blocks.clone();
        coords.extend_from_slice(&grown);
        let new_mask = SparsityMask::new(w.mask.shape, w.mask.block_size, coords)?;

        let (new_values, new_moments) =
            realign_state(&w.values, &state.weights[l], &w.mask, &new_mask)?;
        model.layers[l].weights = LayerWeights::Sparse(BlockSparseMatrix {
            mask: new_mask,
            values: new_values,
        });
        state.weights[l] = new_moments;
        reset_moments(model, state, l, &grown)?;

        if let Some(prev_rec) = prev {
            if let Some(prev_layer) = prev_rec.layers.iter().find(|u| u.layer == l) {
                pruned_prev_new += pruned
                    .iter()
                    .filter(|c| prev_layer.grown.binary_search(c).is_ok())
                    .count();
            }
        }
        pruned_total += pruned.len();
        layers.push(LayerUpdate {
            layer: l,
            pruned,
            grown,
        });
    }

    state.audit_alignment(model)?;
    Ok(UpdateRecord {
        update_index: k,
        step,
        pruning_ratio: ratio,
        layers,
        pruned_previously_new: pruned_prev_new,
        pruned_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Activation, ModelConfig};
    use crate::tensor::{DenseMatrix, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg(n: usize, pr: f64) -> DynSparseConfig {
        DynSparseConfig {
            sparsity: 0.75,
            updates: n,
            max_pruning_ratio: pr,
            block_size: 1,
            norm: NormKind::L1,
            realloc_mode: ReallocMode::Random,
            total_steps: 1000,
        }
    }

    #[test]
    fn cosine_decay_values() {
        let c = cfg(160, 0.5);
        assert_eq!(pruning_ratio_at(&c, 0).unwrap(), 0.5);
        assert!((pruning_ratio_at(&c, 80).unwrap() - 0.25).abs() < 1e-15);
        let expect = 0.25 * (1.0 + 2.0f64.sqrt() / 2.0);
        assert!((pruning_ratio_at(&c, 40).unwrap() - expect).abs() < 1e-12);
        assert!(pruning_ratio_at(&c, 160).is_err());
    }

    #[test]
    fn cosine_decay_monotone_and_bounded() {
        let c = cfg(40, 0.7);
        let mut last = f64::INFINITY;
        for k in 0..40 {
            let r = pruning_ratio_at(&c, k).unwrap();
            assert!(r <= 0.7 + 1e-15 && r >= 0.0);
            assert!(r <= last);
            last = r;
        }
    }

    fn line_matrix(values: &[f64]) -> BlockSparseMatrix {
        let shape = Shape::new(1, values.len()).unwrap();
        let mask = SparsityMask::full(shape, 1).unwrap();
        BlockSparseMatrix {
            mask,
            values: values.to_vec(),
        }
    }

    #[test]
    fn prune_step_hand_case() {
        let w = line_matrix(&[5.0, -1.0, 3.0, -4.0]);
        let (pruned, surviving) = prune_step(&w, 0.5, NormKind::L1).unwrap();
        assert_eq!(pruned, vec![(0, 1), (0, 2)]);
        assert_eq!(surviving.active_blocks, vec![(0, 0), (0, 3)]);
    }

    #[test]
    fn prune_step_zero_ratio_and_degenerate() {
        let w = line_matrix(&[1.0, 2.0]);
        let (pruned, surviving) = prune_step(&w, 0.0, NormKind::L1).unwrap();
        assert!(pruned.is_empty());
        assert_eq!(surviving, w.mask);
        assert!(matches!(
            prune_step(&w, 1.0, NormKind::L1),
            Err(Error::DegenerateSparsity(_))
        ));
    }

    #[test]
    fn prune_step_matches_brute_force() {
        // lowest-norm set via exhaustive scoring on a 16-block layer
        let mut r = rng(4);
        for _ in 0..30 {
            let values: Vec<f64> = (0..16).map(|_| r.random_range(-3.0..3.0)).collect();
            let w = line_matrix(&values);
            let ratio: f64 = r.random_range(0.1..0.9);
            let count = (ratio * 16.0).floor() as usize;
            let (pruned, _) = prune_step(&w, ratio, NormKind::L1).unwrap();
            let mut oracle: Vec<(f64, usize)> =
                values.iter().map(|v| v.abs()).zip(0..16).collect();
            oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expect: Vec<BlockCoord> = oracle[..count].iter().map(|&(_, i)| (0, i)).collect();
            expect.sort_unstable();
            assert_eq!(pruned, expect);
        }
    }

    #[test]
    fn grow_random_edges() {
        let shape = Shape::new(2, 2).unwrap();
        let mask = SparsityMask::new(shape, 1, vec![(0, 0), (1, 1)]).unwrap();
        assert!(grow_random(&mask, 0, &mut rng(0)).unwrap().is_empty());
        // forced: complement has exactly `count` blocks
        let grown = grow_random(&mask, 2, &mut rng(1)).unwrap();
        assert_eq!(grown, vec![(0, 1), (1, 0)]);
        assert!(grow_random(&mask, 3, &mut rng(2)).is_err());
    }

    #[test]
    fn grow_random_is_uniform() {
        let shape = Shape::new(4, 4).unwrap();
        let mask = SparsityMask::new(shape, 1, vec![(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        let inactive = mask.inactive_blocks();
        let trials = 10_000;
        let count = 3;
        let mut freq = std::collections::HashMap::new();
        let mut r = rng(5);
        for _ in 0..trials {
            for c in grow_random(&mask, count, &mut r).unwrap() {
                *freq.entry(c).or_insert(0u32) += 1;
            }
        }
        let p = count as f64 / inactive.len() as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in inactive {
            let f = *freq.get(&c).unwrap_or(&0) as f64;
            assert!((f - trials as f64 * p).abs() < 5.0 * sigma, "{c:?}: {f}");
        }
    }

    #[test]
    fn grow_gradient_cases() {
        let shape = Shape::new(2, 2).unwrap();
        let mask = SparsityMask::new(shape, 1, vec![(0, 0), (1, 1)]).unwrap();
        let grad =
            DenseMatrix::from_values(shape, vec![0.0, -9.0, 2.0, 0.0]).unwrap();
        // hand argmax over inactive {(0,1): |-9|, (1,0): |2|}
        assert_eq!(grow_gradient(&mask, 1, &grad).unwrap(), vec![(0, 1)]);
        // all inactive -> full complement regardless of grads
        assert_eq!(grow_gradient(&mask, 2, &grad).unwrap(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn grow_gradient_matches_sort_oracle() {
        let mut r = rng(6);
        let shape = Shape::new(8, 8).unwrap();
        for _ in 0..20 {
            let mask = crate::tensor::random_mask(shape, 2, 0.6, &mut r).unwrap();
            let grad = DenseMatrix::from_values(
                shape,
                (0..64).map(|_| r.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let count = 2;
            let picked = grow_gradient(&mask, count, &grad).unwrap();
            let mut oracle: Vec<(f64, BlockCoord)> = mask
                .inactive_blocks()
                .into_iter()
                .map(|(br, bc)| {
                    let mut s = 0.0;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            s += grad.get(br * 2 + dr, bc * 2 + dc).abs();
                        }
                    }
                    (s, (br, bc))
                })
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expect: Vec<BlockCoord> = oracle[..count].iter().map(|&(_, c)| c).collect();
            expect.sort_unstable();
            assert_eq!(picked, expect);
        }
    }

    fn sparse_model() -> (Model, OptimState) {
        let config = ModelConfig {
            layer_widths: vec![8, 16, 16, 4],
            sparse_layers: [1].into_iter().collect(),
            activation: Activation::Relu,
            init_std: 0.1,
            block_size: 2,
        };
        let model = init_model(&config, 0.75, &mut rng(9)).unwrap();
        let state = OptimState::new(&model);
        (model, state)
    }

    #[test]
    fn update_preserves_cardinality_and_survivors() {
        let (mut model, mut state) = sparse_model();
        for v in &mut state.weights[1].m {
            *v = 0.125;
        }
        let c = DynSparseConfig {
            sparsity: 0.75,
            block_size: 2,
            ..cfg(10, 0.5)
        };
        let before = match &model.layers[1].weights {
            LayerWeights::Sparse(w) => w.clone(),
            _ => unreachable!(),
        };
        let rec =
            dynsparse_update(&mut model, &mut state, &c, 0, 100, &mut rng(2), None, None).unwrap();
        let after = match &model.layers[1].weights {
            LayerWeights::Sparse(w) => w.clone(),
            _ => unreachable!(),
        };
        // |pruned| = |grown|, cardinality constant
        assert_eq!(rec.layers[0].pruned.len(), rec.layers[0].grown.len());
        assert_eq!(before.mask.num_active(), after.mask.num_active());
        // grown blocks start at zero with zero moments
        let b2 = 4;
        for &coord in &rec.layers[0].grown {
            let idx = after.mask.position(coord).unwrap();
            for i in idx * b2..(idx + 1) * b2 {
                assert_eq!(after.values[i], 0.0);
                assert_eq!(state.weights[1].m[i], 0.0);
                assert_eq!(state.weights[1].v[i], 0.0);
            }
        }
        // survivors keep their values bit-exactly
        for (new_idx, &coord) in after.mask.active_blocks.iter().enumerate() {
            if let Some(old_idx) = before.mask.position(coord) {
                if rec.layers[0].grown.binary_search(&coord).is_err() {
                    assert_eq!(
                        &after.values[new_idx * b2..(new_idx + 1) * b2],
                        &before.values[old_idx * b2..(old_idx + 1) * b2]
                    );
                }
            }
        }
        // grown drawn only from blocks inactive after the prune
        for &coord in &rec.layers[0].grown {
            let was_active = before.mask.contains(coord);
            let was_pruned = rec.layers[0].pruned.binary_search(&coord).is_ok();
            assert!(!was_active || was_pruned);
        }
    }

    #[test]
    fn zero_pruning_ratio_is_noop() {
        let (mut model, mut state) = sparse_model();
        let c = DynSparseConfig {
            sparsity: 0.75,
            block_size: 2,
            ..cfg(10, 0.0)
        };
        let before = model.layers[1].weights.values().to_vec();
        let rec =
            dynsparse_update(&mut model, &mut state, &c, 0, 50, &mut rng(3), None, None).unwrap();
        assert!(rec.layers[0].pruned.is_empty());
        assert_eq!(model.layers[1].weights.values(), &before[..]);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = |seed: u64| -> Vec<UpdateRecord> {
            let (mut model, mut state) = sparse_model();
            let c = DynSparseConfig {
                sparsity: 0.75,
                block_size: 2,
                ..cfg(10, 0.5)
            };
            let mut r = rng(seed);
            let mut records = Vec::new();
            let mut prev: Option<UpdateRecord> = None;
            for k in 0..5 {
                let rec = dynsparse_update(
                    &mut model,
                    &mut state,
                    &c,
                    k,
                    (k as u64 + 1) * 100,
                    &mut r,
                    None,
                    prev.as_ref(),
                )
                .unwrap();
                prev = Some(rec.clone());
                records.push(rec);
            }
            records
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn update_schedule_shape() {
        let c = DynSparseConfig {
            total_steps: 1000,
            ..cfg(10, 0.5)
        };
        let sched = c.update_schedule();
        assert_eq!(sched.len(), 9);
        assert_eq!(sched[0], (100, 0));
        assert_eq!(sched[8], (900, 8));
        assert!(sched.iter().all(|&(s, _)| s > 0 && s < 1000));
    }
}
