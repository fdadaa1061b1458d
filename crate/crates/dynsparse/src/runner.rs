//! Config-driven experiment orchestration: training loops for the dense,
//! static-sparse, DynSparse and ablation modes, deterministic per-purpose
//! RNG streams, and artifact emission (metrics.csv, updates.jsonl,
//! summary.json).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{model_train_flops, ParetoPoint};
use crate::metrics::{removed_new_ratio, ExplorationState, MetricsLog, MetricsRow};
use crate::nn::{
    init_model, loss_and_grads, make_batch, predict, Activation, InputScales, Model, ModelConfig,
    TaskSpec,
};
use crate::optim::{
    adam_step, clip_gradients, lr_at, AdamHyper, GroupLassoConfig, LrSchedule, OptimState,
};
use crate::scheduler::{DynSparseConfig, ReallocMode, UpdateRecord};
use crate::tensor::{DenseMatrix, NormKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dense,
    Static,
    DynsparseRandom,
    DynsparseGradient,
    /// Random subset trainable in the first half, frozen from T/2 on.
    FreezeHalf,
    /// Random subset frozen in the first half, trainable from T/2 on.
    UnfreezeHalf,
    ZeroVsUntrained,
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Treatment {
    /// Masked values pinned to exactly zero.
    Zero,
    /// Masked values frozen at their current (initialized) values.
    Untrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// The subset picked at the first restricted phase, reused afterwards.
    Fixed,
    /// Largest-magnitude weights at each restricted phase start.
    Magnitude,
    /// A fresh random subset at each restricted phase start.
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub layer_widths: Vec<usize>,
    pub sparse_layers: Vec<usize>,
    pub activation: Activation,
    pub init_std: f64,
    pub block_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSection {
    pub input_scales: InputScales,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynSection {
    /// Update count n; n - 1 interior pattern updates are performed.
    pub updates: usize,
    pub max_pruning_ratio: f64,
    pub norm: NormKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeSection {
    /// Fraction of weight entries in the untrainable subset.
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroVsUntrainedSection {
    pub treatment: Treatment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlternatingSection {
    pub selection: Selection,
    pub non_active: Treatment,
    /// Total number of equal-length phases; dense and restricted alternate,
    /// starting dense.
    pub phases: usize,
    pub active_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub model: ModelSection,
    pub task: TaskSection,
    /// Sparsity ratio s for the sparse modes; doubles as the masked fraction
    /// of the zero-vs-untrained ablation.
    pub sparsity: f64,
    pub dynsparse: DynSection,
    pub adam: AdamHyper,
    #[serde(default)]
    pub group_lasso: Option<GroupLassoConfig>,
    pub schedule: ScheduleSection,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub eval_batches: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub freeze: Option<FreezeSection>,
    #[serde(default)]
    pub zero_vs_untrained: Option<ZeroVsUntrainedSection>,
    #[serde(default)]
    pub alternating: Option<AlternatingSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: Mode::DynsparseRandom,
            model: ModelSection {
                layer_widths: vec![32, 64, 64, 16],
                sparse_layers: vec![1],
                activation: Activation::Relu,
                init_std: 0.02,
                block_size: 1,
            },
            task: TaskSection {
                input_scales: InputScales::Ones,
                noise_std: 0.0,
            },
            sparsity: 0.9,
            dynsparse: DynSection {
                updates: 40,
                max_pruning_ratio: 0.5,
                norm: NormKind::L1,
            },
            adam: AdamHyper::default(),
            group_lasso: None,
            schedule: ScheduleSection {
                peak_lr: 0.01,
                warmup_steps: 500,
            },
            steps: 20_000,
            batch_size: 32,
            eval_interval: 500,
            eval_batches: 64,
            seeds: vec![0, 1, 2, 3, 4],
            freeze: None,
            zero_vs_untrained: None,
            alternating: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.adam.validate()?;
        self.lr_schedule().validate()?;
        if self.batch_size == 0 || self.eval_batches == 0 {
            return Err(Error::InvalidArgument("batch sizes must be >= 1".into()));
        }
        if self.eval_interval == 0 || self.eval_interval > self.steps {
            return Err(Error::InvalidArgument("eval_interval out of range".into()));
        }
        let model_cfg = self.model_config();
        match self.mode {
            Mode::Dense => {}
            Mode::Static | Mode::DynsparseRandom | Mode::DynsparseGradient => {
                if self.model.sparse_layers.is_empty() {
                    return Err(Error::InvalidArgument(
                        "sparse modes need at least one sparse layer".into(),
                    ));
                }
                model_cfg.validate()?;
                self.dynsparse_config(ReallocMode::Random)?.validate()?;
            }
            Mode::FreezeHalf | Mode::UnfreezeHalf => {
                let f = self
                    .freeze
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("freeze section required".into()))?;
                if !(0.0..=1.0).contains(&f.fraction) {
                    return Err(Error::InvalidArgument("freeze fraction out of [0, 1]".into()));
                }
            }
            Mode::ZeroVsUntrained => {
                self.zero_vs_untrained.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("zero_vs_untrained section required".into())
                })?;
                if !(0.0..1.0).contains(&self.sparsity) {
                    return Err(Error::InvalidArgument("sparsity out of [0, 1)".into()));
                }
            }
            Mode::Alternating => {
                let a = self.alternating.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("alternating section required".into())
                })?;
                if a.phases == 0 || !(0.0 < a.active_fraction && a.active_fraction <= 1.0) {
                    return Err(Error::InvalidArgument("invalid alternating section".into()));
                }
            }
        }
        // weight decay and Group Lasso are tuned alternatively, never together
        if let Some(gl) = &self.group_lasso {
            if gl.lambda_group > 0.0 && self.adam.weight_decay > 0.0 {
                return Err(Error::InvalidArgument(
                    "group_lasso.lambda_group and adam.weight_decay are mutually exclusive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layer_widths: self.model.layer_widths.clone(),
            sparse_layers: self.model.sparse_layers.iter().copied().collect(),
            activation: self.model.activation,
            init_std: self.model.init_std,
            block_size: self.model.block_size,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.schedule.peak_lr,
            warmup_steps: self.schedule.warmup_steps,
            total_steps: self.steps,
        }
    }

    pub fn dynsparse_config(&self, mode: ReallocMode) -> Result<DynSparseConfig> {
        Ok(DynSparseConfig {
            sparsity: self.sparsity,
            updates: self.dynsparse.updates,
            max_pruning_ratio: self.dynsparse.max_pruning_ratio,
            block_size: self.model.block_size,
            norm: self.dynsparse.norm,
            realloc_mode: mode,
            total_steps: self.steps,
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub status: RunStatus,
    pub final_loss: Option<f64>,
    pub best_loss: Option<f64>,
    pub metrics: MetricsLog,
    pub updates: Vec<UpdateRecord>,
    pub config: ExperimentConfig,
    pub achieved_sparsity: Vec<Option<f64>>,
    pub flops_per_step: f64,
    pub total_flops: f64,
    pub final_dof_mean: Option<f64>,
    pub densify_calls: u64,
    pub wall_clock: Duration,
}

/// Split one experiment seed into independent per-purpose streams so
/// enabling a feature never perturbs another stream.
fn stream_rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer over the combined value
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn eval_loss(model: &Model, eval_set: &[(DenseMatrix, DenseMatrix)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, targets) in eval_set {
        let pred = predict(model, x)?;
        let mut loss = 0.0;
        for (p, t) in pred.values.iter().zip(&targets.values) {
            let e = p - t;
            loss += e * e;
        }
        total += loss / pred.values.len() as f64;
    }
    Ok(total / eval_set.len() as f64)
}

/// Per-layer selection of `count` weight-entry indices, uniform without
/// replacement.
fn sample_entry_subset(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![false; n];
    for i in rand::seq::index::sample(rng, n, count.min(n)) {
        mask[i] = true;
    }
    mask
}

/// Top-`count` entries by magnitude; ties broken by index order.
fn magnitude_subset(values: &[f64], count: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; values.len()];
    for &i in idx.iter().take(count.min(values.len())) {
        mask[i] = true;
    }
    mask
}

struct AblationState {
    /// Per-layer membership of the special subset (freeze / masked / active).
    subsets: Vec<Vec<bool>>,
}

/// Execute one training run for the given mode and seed.
pub fn run(config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    config.validate()?;
    let t0 = Instant::now();
    crate::tensor::counters::reset();

    let realloc_mode = match config.mode {
        Mode::DynsparseGradient => ReallocMode::Gradient,
        _ => ReallocMode::Random,
    };
    let sparse_mode = matches!(
        config.mode,
        Mode::Static | Mode::DynsparseRandom | Mode::DynsparseGradient
    );
    let dyn_mode = matches!(config.mode, Mode::DynsparseRandom | Mode::DynsparseGradient);

    // model
    let mut init_rng = stream_rng(seed, "init");
    let model_cfg = config.model_config();
    let mut model = if sparse_mode {
        init_model(&model_cfg, config.sparsity, &mut init_rng)?
    } else {
        let dense_cfg = ModelConfig {
            sparse_layers: Default::default(),
            ..model_cfg.clone()
        };
        init_model(&dense_cfg, 0.0, &mut init_rng)?
    };
    let mut state = OptimState::new(&model);

    // task and eval set
    let mut task_rng = stream_rng(seed, "task");
    let task = TaskSpec::new(
        &config.model.layer_widths,
        config.model.activation,
        &config.task.input_scales,
        config.task.noise_std,
        &mut task_rng,
    )?;
    let mut eval_rng = stream_rng(seed, "eval");
    let eval_set: Vec<(DenseMatrix, DenseMatrix)> = (0..config.eval_batches)
        .map(|_| make_batch(&task, config.batch_size, &mut eval_rng))
        .collect::<Result<_>>()?;

    let mut batch_rng = stream_rng(seed, "batches");
    let mut realloc_rng = stream_rng(seed, "realloc");
    let mut ablation_rng = stream_rng(seed, "ablation");

    // mode setup
    let dyn_cfg = config.dynsparse_config(realloc_mode)?;
    let boundaries: BTreeMap<u64, usize> = if dyn_mode {
        dyn_cfg.update_schedule().into_iter().collect()
    } else {
        BTreeMap::new()
    };

    // The ablations act on the layers designated for sparsification (the
    // analogue of non-embedding weights); other layers stay fully trainable.
    let target_layers: std::collections::BTreeSet<usize> =
        config.model.sparse_layers.iter().copied().collect();
    let mut ablation = AblationState { subsets: Vec::new() };
    match config.mode {
        Mode::FreezeHalf | Mode::UnfreezeHalf => {
            let fraction = config.freeze.as_ref().unwrap().fraction;
            for (l, layer) in model.layers.iter().enumerate() {
                if !target_layers.contains(&l) {
                    ablation.subsets.push(Vec::new());
                    continue;
                }
                let n = layer.weights.values().len();
                let count = (fraction * n as f64).round() as usize;
                ablation
                    .subsets
                    .push(sample_entry_subset(n, count, &mut ablation_rng));
            }
            if config.mode == Mode::UnfreezeHalf {
                for (l, subset) in ablation.subsets.iter().enumerate() {
                    if !subset.is_empty() {
                        model.layers[l].frozen = Some(subset.clone());
                    }
                }
            }
        }
        Mode::ZeroVsUntrained => {
            let treatment = config.zero_vs_untrained.as_ref().unwrap().treatment;
            for l in 0..model.num_layers() {
                if !target_layers.contains(&l) {
                    ablation.subsets.push(Vec::new());
                    continue;
                }
                let n = model.layers[l].weights.values().len();
                let count = (config.sparsity * n as f64).round() as usize;
                let subset = sample_entry_subset(n, count, &mut ablation_rng);
                if treatment == Treatment::Zero {
                    let values = model.layers[l].weights.values_mut();
                    for (v, &masked) in values.iter_mut().zip(&subset) {
                        if masked {
                            *v = 0.0;
                        }
                    }
                }
                model.layers[l].frozen = Some(subset.clone());
                ablation.subsets.push(subset);
            }
        }
        _ => {}
    }
    // fixed-selection subset of the alternating mode, chosen lazily at the
    // first restricted phase
    let mut alternating_fixed: Option<Vec<Vec<bool>>> = None;

    let mut exploration = if sparse_mode {
        Some(ExplorationState::new(&model))
    } else {
        None
    };
    let sparse_layers = model.sparse_layer_indices();
    let mut metrics = MetricsLog::new(sparse_layers.clone());

    let densities: Vec<Option<f64>> = model
        .layers
        .iter()
        .map(|l| l.mask().map(|m| m.density()))
        .collect();
    let flops_per_step =
        model_train_flops(&config.model.layer_widths, &densities, config.batch_size)?;

    let schedule = config.lr_schedule();
    let mut updates: Vec<UpdateRecord> = Vec::new();
    let mut last_pruning_ratio = 0.0;
    let mut last_rnr = 0.0;
    let mut best_loss: Option<f64> = None;
    let mut final_loss: Option<f64> = None;
    let mut status = RunStatus::Ok;

    let half = config.steps / 2;
    'train: for step in 0..config.steps {
        // freeze-ablation flip at T/2
        if step == half {
            match config.mode {
                Mode::FreezeHalf => {
                    for (l, subset) in ablation.subsets.iter().enumerate() {
                        if !subset.is_empty() {
                            model.layers[l].frozen = Some(subset.clone());
                        }
                    }
                }
                Mode::UnfreezeHalf => model.clear_frozen(),
                _ => {}
            }
        }
        // alternating phase boundaries
        if config.mode == Mode::Alternating {
            let alt = config.alternating.as_ref().unwrap();
            let phase_len = (config.steps / alt.phases as u64).max(1);
            if step % phase_len == 0 {
                let phase = (step / phase_len) as usize;
                if phase.is_multiple_of(2) {
                    model.clear_frozen();
                } else {
                    apply_restricted_phase(
                        &mut model,
                        alt,
                        &target_layers,
                        &mut alternating_fixed,
                        &mut ablation_rng,
                    );
                }
            }
        }

        let lr = lr_at(&schedule, step)?;
        let (x, targets) = make_batch(&task, config.batch_size, &mut batch_rng)?;
        let need_dense = realloc_mode == ReallocMode::Gradient && boundaries.contains_key(&(step + 1));
        let (_, mut grads) = match loss_and_grads(&model, &x, &targets, need_dense) {
            Ok(v) => v,
            Err(Error::Divergence(_)) => {
                status = RunStatus::Diverged;
                break 'train;
            }
            Err(e) => return Err(e),
        };
        if let Some(max_norm) = config.adam.clip_global_norm {
            if let Err(Error::Divergence(_)) = clip_gradients(&mut grads, max_norm) {
                status = RunStatus::Diverged;
                break 'train;
            }
        }
        if let Err(e) = adam_step(
            &mut model,
            &grads,
            &mut state,
            &config.adam,
            lr,
            config.group_lasso.as_ref(),
        ) {
            match e {
                Error::Divergence(_) => {
                    status = RunStatus::Diverged;
                    break 'train;
                }
                other => return Err(other),
            }
        }

        let done = step + 1;
        if let Some(&k) = boundaries.get(&done) {
            let rec = crate::scheduler::dynsparse_update(
                &mut model,
                &mut state,
                &dyn_cfg,
                k,
                done,
                &mut realloc_rng,
                if need_dense { Some(&grads) } else { None },
                updates.last(),
            )?;
            if let Some(expl) = exploration.as_mut() {
                expl.record_sample(&model);
            }
            last_pruning_ratio = rec.pruning_ratio;
            last_rnr = updates
                .last()
                .map(|prev| removed_new_ratio(&rec, prev))
                .unwrap_or(0.0);
            updates.push(rec);
        }

        if done % config.eval_interval == 0 || done == config.steps {
            let loss = eval_loss(&model, &eval_set)?;
            if !loss.is_finite() {
                status = RunStatus::Diverged;
                break 'train;
            }
            let dof_per_layer: Vec<f64> = match &exploration {
                Some(expl) => sparse_layers
                    .iter()
                    .map(|&l| crate::metrics::dof_explored(expl, l))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            let dof_mean = match &exploration {
                Some(expl) => expl.dof_mean()?,
                None => 1.0,
            };
            metrics.push(MetricsRow {
                step: done,
                loss,
                lr,
                dof_mean,
                removed_new_ratio: last_rnr,
                pruning_ratio: last_pruning_ratio,
                flops_cumulative: flops_per_step * done as f64,
                dof_per_layer,
            })?;
            final_loss = Some(loss);
            best_loss = Some(best_loss.map_or(loss, |b: f64| b.min(loss)));
        }
    }

    let final_dof_mean = match &exploration {
        Some(expl) => Some(expl.dof_mean()?),
        None => None,
    };
    Ok(RunResult {
        seed,
        status,
        final_loss,
        best_loss,
        metrics,
        updates,
        config: config.clone(),
        achieved_sparsity: model.achieved_sparsity(),
        flops_per_step,
        total_flops: flops_per_step * config.steps as f64,
        final_dof_mean,
        densify_calls: crate::tensor::counters::densify_calls(),
        wall_clock: t0.elapsed(),
    })
}

fn apply_restricted_phase(
    model: &mut Model,
    alt: &AlternatingSection,
    targets: &std::collections::BTreeSet<usize>,
    fixed: &mut Option<Vec<Vec<bool>>>,
    rng: &mut ChaCha8Rng,
) {
    // per-layer active subsets; empty for layers outside the target set
    let pick = |layer: usize, model: &Model, rng: &mut ChaCha8Rng| -> Vec<bool> {
        if !targets.contains(&layer) {
            return Vec::new();
        }
        let values = model.layers[layer].weights.values();
        let count = (alt.active_fraction * values.len() as f64).round() as usize;
        match alt.selection {
            Selection::Magnitude => magnitude_subset(values, count),
            Selection::Fixed | Selection::Random => {
                sample_entry_subset(values.len(), count, rng)
            }
        }
    };
    let active: Vec<Vec<bool>> = match alt.selection {
        Selection::Fixed => fixed
            .get_or_insert_with(|| (0..model.num_layers()).map(|l| pick(l, model, rng)).collect())
            .clone(),
        Selection::Magnitude | Selection::Random => {
            (0..model.num_layers()).map(|l| pick(l, model, rng)).collect()
        }
    };
    for (l, active_mask) in active.into_iter().enumerate() {
        if active_mask.is_empty() {
            continue;
        }
        let frozen: Vec<bool> = active_mask.iter().map(|&a| !a).collect();
        if alt.non_active == Treatment::Zero {
            let values = model.layers[l].weights.values_mut();
            for (v, &f) in values.iter_mut().zip(&frozen) {
                if f {
                    *v = 0.0;
                }
            }
        }
        model.layers[l].frozen = Some(frozen);
    }
}

/// Freeze/unfreeze ablation: `freeze_first_half` selects whether the random
/// subset is frozen during the first or the second half of training.
pub fn run_freeze_ablation(
    config: &ExperimentConfig,
    seed: u64,
    freeze_first_half: bool,
) -> Result<RunResult> {
    let mut cfg = config.clone();
    cfg.mode = if freeze_first_half {
        Mode::UnfreezeHalf
    } else {
        Mode::FreezeHalf
    };
    if cfg.freeze.is_none() {
        cfg.freeze = Some(FreezeSection { fraction: 0.5 });
    }
    run(&cfg, seed)
}

/// Permanent zero vs. untrained treatment of a random subset of fraction s.
pub fn run_zero_vs_untrained(
    config: &ExperimentConfig,
    seed: u64,
    treatment: Treatment,
) -> Result<RunResult> {
    let mut cfg = config.clone();
    cfg.mode = Mode::ZeroVsUntrained;
    cfg.zero_vs_untrained = Some(ZeroVsUntrainedSection { treatment });
    run(&cfg, seed)
}

/// Alternating dense/restricted training with the given selection rule and
/// non-active treatment.
pub fn run_alternating(
    config: &ExperimentConfig,
    seed: u64,
    selection: Selection,
    non_active: Treatment,
) -> Result<RunResult> {
    let mut cfg = config.clone();
    cfg.mode = Mode::Alternating;
    let section = cfg.alternating.get_or_insert(AlternatingSection {
        selection,
        non_active,
        phases: 8,
        active_fraction: 0.1,
    });
    section.selection = selection;
    section.non_active = non_active;
    run(&cfg, seed)
}

/// Run several seeds of the same config in parallel worker threads.
pub fn run_many(config: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RunResult>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| scope.spawn(move || run(config, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub status: RunStatus,
    pub final_loss: Option<f64>,
    pub best_loss: Option<f64>,
    pub achieved_sparsity: Vec<Option<f64>>,
    pub flops_per_step: f64,
    pub total_flops: f64,
    pub final_dof_mean: Option<f64>,
    pub sparsity: f64,
    pub block_size: usize,
    pub config: ExperimentConfig,
}

/// Write metrics.csv, updates.jsonl and summary.json into `out_dir`.
pub fn write_outputs(result: &RunResult, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut csv = Vec::new();
    result.metrics.write_csv(&mut csv)?;
    fs::write(out_dir.join("metrics.csv"), csv)?;

    let mut jsonl = String::new();
    for rec in &result.updates {
        jsonl.push_str(&serde_json::to_string(rec)?);
        jsonl.push('\n');
    }
    fs::write(out_dir.join("updates.jsonl"), jsonl)?;

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        mode: result.config.mode,
        seed: result.seed,
        status: result.status,
        final_loss: result.final_loss,
        best_loss: result.best_loss,
        achieved_sparsity: result.achieved_sparsity.clone(),
        flops_per_step: result.flops_per_step,
        total_flops: result.total_flops,
        final_dof_mean: result.final_dof_mean,
        sparsity: result.config.sparsity,
        block_size: result.config.model.block_size,
        config: result.config.clone(),
    };
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(out_dir.join("summary.json"), text)?;
    Ok(())
}

/// Join per-run FLOPs with final losses into a Pareto table.
pub fn emit_pareto(results: &[&RunSummary]) -> Result<Vec<ParetoPoint>> {
    if results.len() < 2 {
        return Err(Error::InvalidArgument(
            "pareto table needs at least two results".into(),
        ));
    }
    results
        .iter()
        .map(|s| {
            Ok(ParetoPoint {
                label: format!(
                    "{}_s{}_b{}_seed{}",
                    serde_json::to_value(s.mode)?.as_str().unwrap().to_owned(),
                    s.sparsity,
                    s.block_size,
                    s.seed
                ),
                train_flops_per_step: s.flops_per_step,
                final_loss: s.final_loss.unwrap_or(f64::MAX),
                sparsity: s.sparsity,
                block_size: s.block_size,
            })
        })
        .collect()
}
