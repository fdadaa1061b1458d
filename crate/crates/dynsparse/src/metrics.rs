//! Training-dynamics instrumentation: explored degrees of freedom (DOF),
//! time-averaged mask activity, the removed-new ratio, and the metrics CSV
//! contract.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scheduler::UpdateRecord;
use crate::tensor::{BlockCoord, Shape};

#[derive(Debug, Clone)]
struct LayerExploration {
    shape: Shape,
    block_size: usize,
    /// Every block coordinate active at any sampling instant.
    union: BTreeSet<BlockCoord>,
    /// Times each coordinate was active at a sampling instant.
    activity: BTreeMap<BlockCoord, u64>,
}

/// Per-layer union masks and activity counts, sampled at sparsity-update
/// boundaries (masks only change there, so sampling is exact).
#[derive(Debug, Clone)]
pub struct ExplorationState {
    layers: BTreeMap<usize, LayerExploration>,
    pub samples: u64,
}

impl ExplorationState {
    /// Initialize from the t = 0 masks; counts as the first sample.
    pub fn new(model: &Model) -> Self {
        let mut state = Self {
            layers: BTreeMap::new(),
            samples: 0,
        };
        for l in model.sparse_layer_indices() {
            let mask = model.layers[l].mask().unwrap();
            state.layers.insert(
                l,
                LayerExploration {
                    shape: mask.shape,
                    block_size: mask.block_size,
                    union: BTreeSet::new(),
                    activity: BTreeMap::new(),
                },
            );
        }
        state.record_sample(model);
        state
    }

    pub fn record_sample(&mut self, model: &Model) {
        self.samples += 1;
        for (l, entry) in self.layers.iter_mut() {
            let mask = model.layers[*l].mask().expect("sparse layer lost its mask");
            for &coord in &mask.active_blocks {
                entry.union.insert(coord);
                *entry.activity.entry(coord).or_insert(0) += 1;
            }
        }
    }

    pub fn sparse_layers(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    /// Mean DOF over all tracked layers.
    pub fn dof_mean(&self) -> Result<f64> {
        let dofs: Vec<f64> = self
            .layers
            .keys()
            .map(|&l| dof_explored(self, l))
            .collect::<Result<_>>()?;
        layer_mean(&dofs)
    }
}

/// Fraction of the dense weight grid activated at any point so far.
pub fn dof_explored(state: &ExplorationState, layer: usize) -> Result<f64> {
    let entry = state.layers.get(&layer).ok_or(Error::UnknownLayer(layer))?;
    let b2 = (entry.block_size * entry.block_size) as f64;
    Ok(entry.union.len() as f64 * b2 / entry.shape.len() as f64)
}

/// Per-block fraction of sampling instants active, over the full block grid
/// in row-major order.
pub fn activity_average(state: &ExplorationState, layer: usize) -> Result<Vec<f64>> {
    let entry = state.layers.get(&layer).ok_or(Error::UnknownLayer(layer))?;
    if state.samples == 0 {
        return Err(Error::InvalidArgument("no samples recorded".into()));
    }
    let (gr, gc) = entry.shape.block_grid(entry.block_size)?;
    let mut out = vec![0.0; gr * gc];
    for (&(br, bc), &count) in &entry.activity {
        out[br * gc + bc] = count as f64 / state.samples as f64;
    }
    Ok(out)
}

/// |pruned at k intersect grown at k-1| / |pruned at k| for one layer's
/// coordinate sets; 0 when nothing was pruned.
pub fn removed_new_ratio_sets(pruned: &[BlockCoord], prev_grown: &[BlockCoord]) -> f64 {
    if pruned.is_empty() {
        return 0.0;
    }
    let hits = pruned
        .iter()
        .filter(|c| prev_grown.binary_search(c).is_ok())
        .count();
    hits as f64 / pruned.len() as f64
}

/// Removed-new ratio of consecutive updates, averaged over sparse layers.
pub fn removed_new_ratio(record: &UpdateRecord, previous: &UpdateRecord) -> f64 {
    let ratios: Vec<f64> = record
        .layers
        .iter()
        .map(|u| {
            let prev = previous
                .layers
                .iter()
                .find(|p| p.layer == u.layer)
                .map(|p| p.grown.as_slice())
                .unwrap_or(&[]);
            removed_new_ratio_sets(&u.pruned, prev)
        })
        .collect();
    if ratios.is_empty() {
        0.0
    } else {
        layer_mean(&ratios).unwrap()
    }
}

/// Arithmetic mean over layers.
pub fn layer_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("layer_mean of empty slice".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// One logged row of the training time series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub dof_mean: f64,
    pub removed_new_ratio: f64,
    pub pruning_ratio: f64,
    pub flops_cumulative: f64,
    pub dof_per_layer: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    /// Sparse layer indices, fixing the order of the per-layer dof columns.
    pub sparse_layers: Vec<usize>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(sparse_layers: Vec<usize>) -> Self {
        Self {
            sparse_layers,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::InvalidArgument(format!(
                    "steps must strictly increase: {} after {}",
                    row.step, last.step
                )));
            }
        }
        if row.dof_per_layer.len() != self.sparse_layers.len() {
            return Err(Error::DimensionMismatch("dof column count".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Stable column order: step, loss, lr, dof_mean, removed_new_ratio,
    /// pruning_ratio, flops_cumulative, then one dof column per sparse layer.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "step,loss,lr,dof_mean,removed_new_ratio,pruning_ratio,flops_cumulative")?;
        for l in &self.sparse_layers {
            write!(out, ",dof_layer_{l}")?;
        }
        writeln!(out)?;
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                r.loss,
                r.lr,
                r.dof_mean,
                r.removed_new_ratio,
                r.pruning_ratio,
                r.flops_cumulative
            )?;
            for d in &r.dof_per_layer {
                write!(out, ",{d}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}
