//! Transfer channel scoring: first-order Taylor estimates of the loss change
//! from zeroing a channel, combining the source classification term with the
//! β-weighted target MMD term, and the global ranking that picks channels to
//! remove.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::{forward_pass, BnMode, ForwardOptions};
use crate::error::{Error, Result};
use crate::graph::{ChannelId, ModelGraph};
use crate::loss::{cross_entropy_with_grad, mmd_with_grad, representation_node, MmdConfig};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// How the gradient factor of a channel score is reduced over batch and space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradReduction {
    /// `|mean(g)·mean(a)|` per term.
    #[default]
    ProductOfMeans,
    /// `|mean(g·a)|` per term.
    MeanOfProducts,
}

/// Running mean of per-channel scores over evaluation batches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scores: BTreeMap<String, Vec<f64>>,
    pub batches: usize,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one batch's scores into the running mean.
    pub fn add_batch(&mut self, batch: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        if self.batches == 0 {
            self.scores = batch.clone();
            self.batches = 1;
            return Ok(());
        }
        if batch.len() != self.scores.len() {
            return Err(Error::structural("score table", "batch covers a different layer set"));
        }
        self.batches += 1;
        let w = 1.0 / self.batches as f64;
        for (layer, mine) in self.scores.iter_mut() {
            let theirs = batch
                .get(layer)
                .filter(|v| v.len() == mine.len())
                .ok_or_else(|| Error::structural(layer, "batch scores disagree on channels"))?;
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += (t - *m) * w;
            }
        }
        Ok(())
    }

    pub fn get(&self, ch: &ChannelId) -> Option<f64> {
        self.scores.get(&ch.layer).and_then(|v| v.get(ch.channel)).copied()
    }

    pub fn channels(&self) -> impl Iterator<Item = (ChannelId, f64)> + '_ {
        self.scores.iter().flat_map(|(l, v)| {
            v.iter()
                .enumerate()
                .map(move |(c, &s)| (ChannelId::new(l.clone(), c), s))
        })
    }

    /// Scores divided by the L2 norm of their layer's score vector.
    pub fn normalized(&self) -> BTreeMap<String, Vec<f64>> {
        self.scores
            .iter()
            .map(|(l, v)| {
                let norm = v.iter().map(|s| s * s).sum::<f64>().sqrt();
                let n = if norm > 0.0 {
                    v.iter().map(|s| s / norm).collect()
                } else {
                    vec![0.0; v.len()]
                };
                (l.clone(), n)
            })
            .collect()
    }
}

/// Mean of one channel over the batch and spatial positions; `[N, C]`
/// tensors are treated as 1×1 maps.
pub fn channel_activation_mean<T: Scalar>(act: &Tensor<T>, channel: usize) -> Result<f64> {
    let (n, c, hw) = channel_layout(act)?;
    if channel >= c {
        return Err(Error::structural(
            "activation",
            format!("channel {channel} out of range ({c} channels)"),
        ));
    }
    let mut sum = 0.0;
    for i in 0..n {
        let start = (i * c + channel) * hw;
        sum += act.data()[start..start + hw].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
    }
    Ok(sum / (n * hw) as f64)
}

fn channel_layout<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s => Err(Error::structural("activation", format!("unsupported activation shape {s:?}"))),
    }
}

/// Per-channel reduction of an activation and its gradient.
fn channel_terms<T: Scalar>(act: &Tensor<T>, grad: &Tensor<T>, mode: GradReduction) -> Result<Vec<f64>> {
    if act.shape() != grad.shape() {
        return Err(Error::structural("criterion", "activation and gradient shapes differ"));
    }
    let (n, c, hw) = channel_layout(act)?;
    let denom = (n * hw) as f64;
    let mut out = vec![0.0; c];
    for (ch, slot) in out.iter_mut().enumerate() {
        let (mut sa, mut sg, mut sp) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let start = (i * c + ch) * hw;
            for k in start..start + hw {
                let a = act.data()[k].to_f64_lossy();
                let g = grad.data()[k].to_f64_lossy();
                sa += a;
                sg += g;
                sp += a * g;
            }
        }
        *slot = match mode {
            GradReduction::ProductOfMeans => (sg / denom) * (sa / denom),
            GradReduction::MeanOfProducts => sp / denom,
        };
    }
    Ok(out)
}

/// `|∂L/∂a · a|`
pub fn taylor_score(activation_mean: f64, grad_mean: f64) -> f64 {
    (activation_mean * grad_mean).abs()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOptions {
    pub beta: f64,
    pub mmd: MmdConfig,
    pub reduction: GradReduction,
}

/// Signed per-channel terms for one batch: the source classification term
/// and the target MMD term, before β weighting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchTerms {
    pub source: BTreeMap<String, Vec<f64>>,
    pub target: BTreeMap<String, Vec<f64>>,
}

impl BatchTerms {
    pub fn combine(&self, beta: f64) -> BTreeMap<String, Vec<f64>> {
        self.source
            .iter()
            .map(|(l, s)| {
                let t = self.target.get(l);
                let v = s
                    .iter()
                    .enumerate()
                    .map(|(c, &sv)| {
                        let tv = t.map_or(0.0, |t| t[c]);
                        (sv + beta * tv).abs()
                    })
                    .collect();
                (l.clone(), v)
            })
            .collect()
    }
}

/// Source term from `L_cls` over the source trace; target term from
/// `L_mmd` over the target trace with the source representation held fixed.
/// Both traces use running BN statistics. When β is zero the target pass is
/// skipped.
pub fn batch_terms<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    source: &Tensor<T>,
    labels: &[usize],
    target: &Tensor<T>,
    opts: &ScoreOptions,
) -> Result<BatchTerms> {
    let prunable = graph.prunable_layers();
    if prunable.is_empty() {
        return Err(Error::config("graph has no prunable channels"));
    }
    let strace = forward_pass(graph, params, source, ForwardOptions::record(BnMode::Eval))?;
    let (_, dlogits) = cross_entropy_with_grad(strace.output(), labels)?;
    let sgrads = strace.backward_seeded(&[(graph.last_node(), &dlogits)], false)?;
    let mut terms = BatchTerms::default();
    for &l in &prunable {
        let site = graph.activation_site(l);
        let act = strace.activation(site).expect("recorded");
        let g = sgrads
            .activation(site)
            .ok_or_else(|| Error::structural(&graph.layers[l].id, "no gradient reached the channel"))?;
        terms
            .source
            .insert(graph.layers[l].id.clone(), channel_terms(act, g, opts.reduction)?);
    }
    if opts.beta == 0.0 {
        return Ok(terms);
    }
    let repr = representation_node(graph)?;
    let ttrace = forward_pass(graph, params, target, ForwardOptions::record(BnMode::Eval))?;
    let rs = strace.node(repr).expect("recorded");
    let rt = ttrace.node(repr).expect("recorded");
    let mmd = mmd_with_grad(rs, rt, &opts.mmd)?;
    let tgrads = ttrace.backward_seeded(&[(repr, &mmd.grad_target)], false)?;
    for &l in &prunable {
        let site = graph.activation_site(l);
        let act = ttrace.activation(site).expect("recorded");
        let v = match tgrads.activation(site) {
            Some(g) => channel_terms(act, g, opts.reduction)?,
            // channels downstream of the representation see no MMD gradient
            None => vec![0.0; graph.layers[l].out_channels],
        };
        terms.target.insert(graph.layers[l].id.clone(), v);
    }
    Ok(terms)
}

/// Adds one batch's transfer scores to `table`.
pub fn accumulate_transfer_scores<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    source: &Tensor<T>,
    labels: &[usize],
    target: &Tensor<T>,
    opts: &ScoreOptions,
    table: &mut ScoreTable,
) -> Result<()> {
    let terms = batch_terms(graph, params, source, labels, target, opts)?;
    table.add_batch(&terms.combine(opts.beta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub prune: Vec<ChannelId>,
    /// Fewer than `k` channels could be removed without breaching the floor.
    pub truncated: bool,
    pub normalized: BTreeMap<String, Vec<f64>>,
}

/// Per-layer L2 normalization, a global ascending sort with ties broken by
/// `(layer, channel)`, and the first `k` channels whose removal keeps every
/// layer at or above `floor` channels.
pub fn rank_channels(table: &ScoreTable, k: usize, floor: usize) -> Result<Ranking> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if table.scores.is_empty() {
        return Err(Error::config("score table is empty"));
    }
    let normalized = table.normalized();
    let mut order: Vec<(f64, ChannelId)> = normalized
        .iter()
        .flat_map(|(l, v)| {
            v.iter()
                .enumerate()
                .map(move |(c, &s)| (s, ChannelId::new(l.clone(), c)))
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let mut left: BTreeMap<&str, usize> = table.scores.iter().map(|(l, v)| (l.as_str(), v.len())).collect();
    let mut prune = Vec::with_capacity(k);
    for (_, ch) in &order {
        if prune.len() == k {
            break;
        }
        let n = left.get_mut(ch.layer.as_str()).expect("layer from table");
        if *n > floor {
            *n -= 1;
            prune.push(ch.clone());
        }
    }
    let truncated = prune.len() < k;
    if truncated {
        log::warn!("only {} of {k} channels removable above the floor", prune.len());
    }
    Ok(Ranking {
        prune,
        truncated,
        normalized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDumpRow {
    pub iteration: usize,
    pub layer: String,
    pub channel: usize,
    pub raw_score: f64,
    pub normalized_score: f64,
    pub pruned: bool,
}

pub fn score_dump_rows(iteration: usize, table: &ScoreTable, ranking: &Ranking) -> Vec<ScoreDumpRow> {
    let pruned: std::collections::BTreeSet<&ChannelId> = ranking.prune.iter().collect();
    table
        .channels()
        .map(|(ch, raw)| ScoreDumpRow {
            iteration,
            normalized_score: ranking.normalized[&ch.layer][ch.channel],
            pruned: pruned.contains(&ch),
            layer: ch.layer,
            channel: ch.channel,
            raw_score: raw,
        })
        .collect()
}

/// Appends rows as CSV; the header is written only when `header` is set.
pub fn write_score_dump<W: Write>(w: W, rows: &[ScoreDumpRow], header: bool) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(header).from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
