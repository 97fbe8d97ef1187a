//! The pruning loop: base training, then score → remove K channels →
//! short fine-tune until the FLOPs target, accuracy floor or iteration cap
//! stops it, then a long fine-tune. Four selection/training pipelines share
//! the loop (see [`Method`]).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{
    count_flops, count_flops_split, count_params, evaluate_accuracy, layer_widths, PruneReport,
};
use crate::autograd::{apply_running_stats, BnMode, Sgd};
use crate::criterion::{
    accumulate_transfer_scores, rank_channels, score_dump_rows, GradReduction, Ranking, ScoreDumpRow,
    ScoreOptions, ScoreTable,
};
use crate::data::{make_batches, Augment, DomainPair, LabeledSet, Normalization, TargetDomain};
use crate::error::{Error, Result};
use crate::graph::{ChannelId, ModelGraph};
use crate::loss::{beta_schedule, uda_objective, MmdConfig, UdaBatch};
use crate::params::ParameterStore;
use crate::surgery::{apply_surgery, plan_surgery, slice_store, validate_structure};
use crate::tensor::Tensor;
use crate::zoo::CHANNEL_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Transfer criterion with the β ramp in both scoring and fine-tuning.
    Tcp,
    /// Same loop with β held at 0.
    TcpNoDa,
    /// Source-only pruning, then a long fine-tune with the MMD term.
    TwoStage,
    /// Uniformly random channels, source-only fine-tuning.
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Tcp, Method::TcpNoDa, Method::TwoStage, Method::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Tcp => "tcp",
            Method::TcpNoDa => "tcp_no_da",
            Method::TwoStage => "two_stage",
            Method::Random => "random",
        }
    }

    /// β applied to the loss and the criterion at pruning iteration `i`.
    pub fn iteration_beta(&self, i: usize, iters: usize) -> Result<f64> {
        match self {
            Method::Tcp => beta_schedule(i, iters),
            _ => Ok(0.0),
        }
    }

    /// β of the closing long fine-tune.
    pub fn final_beta(&self, iters: usize) -> Result<f64> {
        match self {
            Method::Tcp | Method::TwoStage => beta_schedule(iters, iters),
            _ => Ok(0.0),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tcp" => Ok(Method::Tcp),
            "tcp_no_da" => Ok(Method::TcpNoDa),
            "two_stage" => Ok(Method::TwoStage),
            "random" => Ok(Method::Random),
            other => Err(Error::config(format!(
                "unknown method `{other}` (expected tcp, tcp_no_da, two_stage or random)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub method: Method,
    /// Channels removed per iteration.
    pub k: usize,
    /// Maximum pruning iterations; also the denominator of the β schedule.
    pub iters: usize,
    /// Stop once FLOPs ≤ this fraction of the baseline.
    pub flops_target: f64,
    pub accuracy_floor: Option<f64>,
    pub base_epochs: usize,
    pub short_ft_epochs: usize,
    pub long_ft_epochs: usize,
    pub lr_high: f64,
    pub lr_low: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the target domain held out, labeled, for validation.
    pub val_fraction: f64,
    /// β of base-model training.
    pub base_beta: f64,
    pub mmd: MmdConfig,
    /// Batches per scoring pass; `None` is one pass over the shorter domain.
    pub score_batches: Option<usize>,
    pub reduction: GradReduction,
    pub augment: Augment,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            method: Method::Tcp,
            k: 4,
            iters: 32,
            flops_target: 0.7,
            accuracy_floor: None,
            base_epochs: 12,
            short_ft_epochs: 5,
            long_ft_epochs: 10,
            lr_high: 0.01,
            lr_low: 0.0001,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
            val_fraction: 0.2,
            base_beta: 4.0 / (1.0 + (-1.0f64).exp()) - 2.0,
            mmd: MmdConfig::default(),
            score_batches: None,
            reduction: GradReduction::default(),
            augment: Augment::default(),
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.iters == 0 {
            return fail("iters must be at least 1".into());
        }
        if !(self.flops_target > 0.0 && self.flops_target <= 1.0) {
            return fail(format!("flops_target {} outside (0, 1]", self.flops_target));
        }
        if let Some(f) = self.accuracy_floor {
            if !(0.0..=1.0).contains(&f) {
                return fail(format!("accuracy_floor {f} outside [0, 1]"));
            }
        }
        if !(self.lr_low > 0.0 && self.lr_high >= self.lr_low && self.lr_high.is_finite()) {
            return fail(format!(
                "learning-rate endpoints must satisfy 0 < low ≤ high, got {} → {}",
                self.lr_high, self.lr_low
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be nonnegative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.base_beta) {
            return fail(format!("base_beta {} outside [0, 1)", self.base_beta));
        }
        if self.score_batches == Some(0) {
            return fail("score_batches must be at least 1".into());
        }
        self.mmd.validate()
    }
}

/// Learning rate of `epoch` in an `epochs`-long phase: geometric from high to low.
pub fn phase_lr(cfg: &PruneConfig, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return cfg.lr_high;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    cfg.lr_high * (cfg.lr_low / cfg.lr_high).powf(t)
}

/// Normalized tensors for one run. The target training view has no labels.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub source: LabeledSet,
    pub target_train: Tensor<f32>,
    pub validation: LabeledSet,
    /// Whole target domain, labels still behind the audit.
    pub target_full: TargetDomain,
    pub normalization: Normalization,
    pub class_count: usize,
    pub image_shape: [usize; 3],
}

pub fn prepare_data(pair: &DomainPair, cfg: &PruneConfig) -> Result<PreparedData> {
    let norm = Normalization::from_images(&pair.source.images)?;
    let target_full = pair.target.map_images(|t| norm.apply(t));
    let (train, validation) = target_full.split_validation(cfg.val_fraction, cfg.seed ^ 0x5eed_0f_7a)?;
    Ok(PreparedData {
        source: LabeledSet::new(norm.apply(&pair.source.images), pair.source.labels.clone())?,
        target_train: train.images().clone(),
        validation,
        target_full,
        normalization: norm,
        class_count: pair.class_count,
        image_shape: pair.image_shape(),
    })
}

impl PreparedData {
    pub fn validation_accuracy(&self, graph: &ModelGraph, params: &ParameterStore<f32>) -> Result<f64> {
        evaluate_accuracy(graph, params, &self.validation.images, &self.validation.labels)
    }

    /// Accuracy over every target example.
    pub fn target_accuracy(&self, graph: &ModelGraph, params: &ParameterStore<f32>) -> Result<f64> {
        let labels = self.target_full.audited_labels("final target accuracy")?;
        evaluate_accuracy(graph, params, self.target_full.images(), labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub cls: f64,
    pub mmd: f64,
    pub steps: usize,
}

/// One epoch over the source domain. With β > 0 each step stacks a target
/// batch under the source batch (target batches cycle); otherwise the step is
/// source-only.
pub fn train_epoch(
    graph: &ModelGraph,
    params: &mut ParameterStore<f32>,
    sgd: &mut Sgd<f32>,
    data: &PreparedData,
    beta: f64,
    cfg: &PruneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let sb = make_batches(
        &data.source.images,
        Some(&data.source.labels),
        cfg.batch_size,
        rng,
        cfg.augment,
    )?;
    let tb = if beta != 0.0 {
        make_batches(&data.target_train, None, cfg.batch_size, rng, cfg.augment)?
    } else {
        Vec::new()
    };
    let mut stats = EpochStats {
        cls: 0.0,
        mmd: 0.0,
        steps: 0,
    };
    for (k, b) in sb.iter().enumerate() {
        let labels = b.labels.as_deref().expect("source batches carry labels");
        let target = tb.get(k % tb.len().max(1)).map(|t| &t.images);
        let out = uda_objective(
            graph,
            params,
            UdaBatch {
                source: &b.images,
                labels,
                target,
            },
            beta,
            &cfg.mmd,
            BnMode::Train,
            true,
        )?;
        if !out.loss.total.is_finite() {
            return Err(Error::Training(format!(
                "loss became non-finite at step {}: {:?}",
                stats.steps, out.loss
            )));
        }
        let before = params.clone();
        sgd.step(params, out.grads.as_ref().expect("requested"))?;
        apply_running_stats(params, out.bn_updates)?;
        if !params.all_finite() {
            *params = before;
            return Err(Error::Training(format!(
                "parameters became non-finite at step {}; last finite state kept",
                stats.steps
            )));
        }
        stats.cls += out.loss.cls;
        stats.mmd += out.loss.mmd;
        stats.steps += 1;
    }
    let n = stats.steps.max(1) as f64;
    stats.cls /= n;
    stats.mmd /= n;
    Ok(stats)
}

/// Runs `epochs` epochs with the phase learning-rate schedule. With
/// `snapshot`, returns the parameters of the epoch with the best validation
/// accuracy (ties keep the earlier epoch) together with that accuracy.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    graph: &ModelGraph,
    params: &mut ParameterStore<f32>,
    sgd: &mut Sgd<f32>,
    data: &PreparedData,
    epochs: usize,
    beta: f64,
    cfg: &PruneConfig,
    rng: &mut ChaCha8Rng,
    snapshot: bool,
) -> Result<Option<f64>> {
    let mut best: Option<(f64, ParameterStore<f32>)> = None;
    if snapshot && epochs > 0 {
        best = Some((data.validation_accuracy(graph, params)?, params.clone()));
    }
    for e in 0..epochs {
        sgd.set_lr(phase_lr(cfg, e, epochs))?;
        let st = train_epoch(graph, params, sgd, data, beta, cfg, rng)?;
        log::debug!("epoch {e}: cls {:.4} mmd {:.4}", st.cls, st.mmd);
        if snapshot {
            let acc = data.validation_accuracy(graph, params)?;
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, params.clone()));
            }
        }
    }
    Ok(match best {
        Some((acc, p)) => {
            *params = p;
            Some(acc)
        }
        None => None,
    })
}

fn new_sgd(cfg: &PruneConfig) -> Result<Sgd<f32>> {
    Sgd::with_weight_decay(cfg.lr_high, cfg.momentum, cfg.weight_decay)
}

fn phase_rng(seed: u64, phase: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(phase);
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub params: ParameterStore<f32>,
    pub validation_acc: f64,
}

/// Trains the domain-adaptation baseline with `L_cls + base_beta·L_mmd`,
/// keeping the best-on-validation snapshot.
pub fn train_base(
    graph: &ModelGraph,
    params: &ParameterStore<f32>,
    data: &PreparedData,
    cfg: &PruneConfig,
) -> Result<BaseModel> {
    cfg.validate()?;
    let mut p = params.clone();
    let mut sgd = new_sgd(cfg)?;
    let mut rng = phase_rng(cfg.seed, 1);
    let acc = fine_tune(graph, &mut p, &mut sgd, data, cfg.base_epochs, cfg.base_beta, cfg, &mut rng, true)?;
    let validation_acc = match acc {
        Some(a) => a,
        None => data.validation_accuracy(graph, &p)?,
    };
    Ok(BaseModel {
        params: p,
        validation_acc,
    })
}

/// Loop state of one pruning run.
#[derive(Debug, Clone)]
pub struct PruneState {
    pub iteration: usize,
    pub graph: ModelGraph,
    pub params: ParameterStore<f32>,
    pub sgd: Sgd<f32>,
    pub report: PruneReport,
    pub betas: Vec<f64>,
    pub score_dump: Vec<ScoreDumpRow>,
    floor_misses: usize,
    rng: ChaCha8Rng,
}

impl PruneState {
    pub fn new(graph: ModelGraph, params: ParameterStore<f32>, cfg: &PruneConfig, baseline_acc: f64) -> Result<Self> {
        let flops = count_flops(&graph)?;
        let n_params = count_params(&graph, &params)?;
        let mut report = PruneReport::new(cfg.method.as_str(), cfg.seed, "", flops, n_params);
        report.baseline_acc = baseline_acc;
        report.final_flops = count_flops_split(&graph)?;
        report.layer_widths = layer_widths(&graph, &graph);
        Ok(Self {
            iteration: 0,
            graph,
            params,
            sgd: new_sgd(cfg)?,
            report,
            betas: Vec::new(),
            score_dump: Vec::new(),
            floor_misses: 0,
            rng: phase_rng(cfg.seed, 2),
        })
    }

    fn flops_reached(&self, cfg: &PruneConfig) -> Result<bool> {
        Ok(count_flops(&self.graph)? as f64 <= cfg.flops_target * self.report.baseline_flops as f64)
    }
}

/// Scores every prunable channel with one pass of paired batches (no
/// augmentation, fixed order).
pub fn score_channels(
    graph: &ModelGraph,
    params: &ParameterStore<f32>,
    data: &PreparedData,
    beta: f64,
    cfg: &PruneConfig,
) -> Result<ScoreTable> {
    let bs = cfg.batch_size;
    let ns = data.source.len().div_ceil(bs);
    let nt = data.target_train.batch().div_ceil(bs);
    let batches = cfg.score_batches.unwrap_or(usize::MAX).min(ns).min(nt);
    let opts = ScoreOptions {
        beta,
        mmd: cfg.mmd.clone(),
        reduction: cfg.reduction,
    };
    let mut table = ScoreTable::new();
    for b in 0..batches {
        let (s0, s1) = (b * bs, ((b + 1) * bs).min(data.source.len()));
        let (t0, t1) = (b * bs, ((b + 1) * bs).min(data.target_train.batch()));
        accumulate_transfer_scores(
            graph,
            params,
            &data.source.images.slice_rows(s0, s1),
            &data.source.labels[s0..s1],
            &data.target_train.slice_rows(t0, t1),
            &opts,
            &mut table,
        )?;
    }
    Ok(table)
}

/// Up to `k` uniformly random channels, never taking a layer below `floor`.
pub fn random_prune_set(graph: &ModelGraph, k: usize, floor: usize, rng: &mut impl Rng) -> Ranking {
    let mut left: BTreeMap<String, usize> = graph
        .prunable_layers()
        .into_iter()
        .map(|i| (graph.layers[i].id.clone(), graph.layers[i].out_channels))
        .collect();
    let mut pool = graph.prunable_channels();
    let mut prune = Vec::new();
    while prune.len() < k {
        let eligible: Vec<usize> = (0..pool.len()).filter(|&i| left[&pool[i].layer] > floor).collect();
        if eligible.is_empty() {
            break;
        }
        let pick = eligible[rng.random_range(0..eligible.len())];
        let ch: ChannelId = pool.swap_remove(pick);
        *left.get_mut(&ch.layer).expect("known layer") -= 1;
        prune.push(ch);
    }
    prune.sort();
    Ranking {
        truncated: prune.len() < k,
        prune,
        normalized: BTreeMap::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Continue,
    /// Target FLOPs reached.
    FlopsTarget,
    AccuracyFloor,
    IterationCap,
    /// Nothing removable remains.
    Exhausted,
}

/// Scores, removes up to K channels, fine-tunes briefly and records a row.
pub fn prune_iteration(state: &mut PruneState, data: &PreparedData, cfg: &PruneConfig, dump_scores: bool) -> Result<Step> {
    if state.iteration >= cfg.iters {
        return Ok(Step::IterationCap);
    }
    let i = state.iteration;
    let beta = cfg.method.iteration_beta(i, cfg.iters)?;
    let ranking = match cfg.method {
        Method::Random => random_prune_set(&state.graph, cfg.k, CHANNEL_FLOOR, &mut state.rng),
        _ => {
            let table = score_channels(&state.graph, &state.params, data, beta, cfg)?;
            let r = rank_channels(&table, cfg.k, CHANNEL_FLOOR)?;
            if dump_scores {
                state.score_dump.extend(score_dump_rows(i, &table, &r));
            }
            r
        }
    };
    if ranking.prune.is_empty() {
        return Ok(Step::Exhausted);
    }
    if ranking.truncated {
        state.report.truncations.push(format!(
            "iteration {i}: removed {} of {} channels (floor {CHANNEL_FLOOR})",
            ranking.prune.len(),
            cfg.k
        ));
    }
    let plan = plan_surgery(&state.graph, &ranking.prune)?;
    let (graph, params) = apply_surgery(&state.graph, &state.params, &plan)?;
    let velocity = slice_store(&state.graph, state.sgd.velocity(), &plan)?;
    state.sgd.replace_velocity(velocity);
    let violations = validate_structure(&graph, &params);
    if !violations.is_empty() {
        return Err(Error::structural("surgery", violations.join("; ")));
    }
    state.graph = graph;
    state.params = params;
    let mut rng = phase_rng(cfg.seed, 100 + i as u64);
    fine_tune(
        &state.graph,
        &mut state.params,
        &mut state.sgd,
        data,
        cfg.short_ft_epochs,
        beta,
        cfg,
        &mut rng,
        false,
    )?;
    let acc = data.validation_accuracy(&state.graph, &state.params)?;
    let flops = count_flops(&state.graph)?;
    let n_params = count_params(&state.graph, &state.params)?;
    state
        .report
        .push_row(i, flops, n_params, acc, beta, &plan.removed_per_layer())?;
    state.betas.push(beta);
    state.iteration += 1;

    if state.flops_reached(cfg)? {
        return Ok(Step::FlopsTarget);
    }
    if let Some(floor) = cfg.accuracy_floor {
        if acc < floor {
            state.floor_misses += 1;
            if state.floor_misses >= 2 {
                return Ok(Step::AccuracyFloor);
            }
        } else {
            state.floor_misses = 0;
        }
    }
    if state.iteration >= cfg.iters {
        return Ok(Step::IterationCap);
    }
    Ok(Step::Continue)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub graph: ModelGraph,
    pub params: ParameterStore<f32>,
    pub report: PruneReport,
    pub stop: Step,
    pub betas: Vec<f64>,
    pub score_dump: Vec<ScoreDumpRow>,
}

/// Prunes a trained base model with `cfg.method`, then runs the long
/// fine-tune and fills in the final accounting. Accuracies in the report are
/// on the validation split; whole-target accuracy is left to
/// [`PreparedData::target_accuracy`].
pub fn run(
    graph: &ModelGraph,
    base: &BaseModel,
    data: &PreparedData,
    cfg: &PruneConfig,
    dump_scores: bool,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut state = PruneState::new(graph.clone(), base.params.clone(), cfg, base.validation_acc)?;
    let mut stop = if state.flops_reached(cfg)? { Step::FlopsTarget } else { Step::Continue };
    while stop == Step::Continue {
        stop = prune_iteration(&mut state, data, cfg, dump_scores)?;
        log::info!(
            "{} seed {} iteration {}: {:?}",
            cfg.method,
            cfg.seed,
            state.iteration,
            state.report.rows.last().map(|r| (r.flops_down, r.target_acc))
        );
    }
    if state.iteration > 0 {
        let mut rng = phase_rng(cfg.seed, 3);
        let beta = cfg.method.final_beta(cfg.iters)?;
        fine_tune(
            &state.graph,
            &mut state.params,
            &mut state.sgd,
            data,
            cfg.long_ft_epochs,
            beta,
            cfg,
            &mut rng,
            false,
        )?;
    }
    let mut report = state.report;
    report.final_flops = count_flops_split(&state.graph)?;
    report.final_params = count_params(&state.graph, &state.params)?;
    report.layer_widths = layer_widths(graph, &state.graph);
    report.final_acc = Some(data.validation_accuracy(&state.graph, &state.params)?);
    Ok(RunOutput {
        graph: state.graph,
        params: state.params,
        report,
        stop,
        betas: state.betas,
        score_dump: state.score_dump,
    })
}
