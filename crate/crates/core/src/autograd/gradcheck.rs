//! Central finite differences against the analytic backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::loss::{cross_entropy_with_grad, uda_objective, MmdConfig, UdaBatch};
use crate::params::{ParamKind, ParameterStore};
use crate::tensor::{Scalar, Tensor};

use super::{forward_pass, BnMode, ForwardOptions, GradientSet};

/// Scalar loss attached to the network output for checking.
#[derive(Debug, Clone)]
pub enum LossHead<T> {
    /// `½‖y‖²`
    HalfSquaredNorm,
    CrossEntropy(Vec<usize>),
    /// Source cross-entropy plus `β·MMD` against `target` at the representation.
    Uda {
        labels: Vec<usize>,
        target: Tensor<T>,
        beta: f64,
        mmd: MmdConfig,
    },
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub eps: f64,
    /// Denominator floor of the relative error, so that coordinates whose
    /// true gradient is zero are compared absolutely.
    pub floor: f64,
    /// Checked coordinates per parameter tensor; `None` checks all.
    pub samples_per_param: Option<usize>,
    pub check_input: bool,
    pub mode: BnMode,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-6,
            samples_per_param: Some(24),
            check_input: true,
            mode: BnMode::Eval,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub warnings: Vec<String>,
}

fn eval_loss<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    input: &Tensor<T>,
    head: &LossHead<T>,
    mode: BnMode,
    want_grads: bool,
) -> Result<(f64, Option<GradientSet<T>>)> {
    match head {
        LossHead::Uda {
            labels,
            target,
            beta,
            mmd,
        } => {
            let out = uda_objective(
                graph,
                params,
                UdaBatch {
                    source: input,
                    labels,
                    target: Some(target),
                },
                *beta,
                mmd,
                mode,
                want_grads,
            )?;
            Ok((out.loss.total, out.grads))
        }
        _ => {
            let trace = forward_pass(graph, params, input, ForwardOptions::record(mode))?;
            let y = trace.output();
            let (loss, dy) = match head {
                LossHead::HalfSquaredNorm => {
                    let l: f64 = y.data().iter().map(|v| 0.5 * v.to_f64_lossy().powi(2)).sum();
                    (l, y.clone())
                }
                LossHead::CrossEntropy(labels) => {
                    let (l, g) = cross_entropy_with_grad(y, labels)?;
                    (l.to_f64_lossy(), g)
                }
                LossHead::Uda { .. } => unreachable!(),
            };
            let grads = if want_grads { Some(trace.backward(&dy)?) } else { None };
            Ok((loss, grads))
        }
    }
}

/// Compares analytic gradients of `head ∘ graph` with central differences on
/// sampled coordinates of every trainable parameter (and the input).
///
/// A `Uda` head with a data-dependent bandwidth is frozen to the bandwidth
/// resolved at the unperturbed point, matching the detached analytic gradient.
pub fn finite_diff_check<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    input: &Tensor<T>,
    head: &LossHead<T>,
    opts: &FdOptions,
) -> Result<FdReport> {
    if !(opts.eps > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut report = FdReport::default();
    let machine_eps = T::epsilon().to_f64_lossy();
    if opts.eps < machine_eps.sqrt() {
        let msg = format!(
            "step {} below sqrt(machine epsilon) = {:.3e}; truncation is dominated by rounding",
            opts.eps,
            machine_eps.sqrt()
        );
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    let head = freeze_bandwidth(head, graph, params, input, opts.mode)?;
    let (_, grads) = eval_loss(graph, params, input, &head, opts.mode, true)?;
    let grads = grads.expect("requested");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = T::from_f64_lossy(opts.eps);
    let mut probe = params.clone();

    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match opts.samples_per_param {
            Some(k) if k < len => {
                let mut v = sample(rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    let names: Vec<String> = params
        .names()
        .into_iter()
        .filter(|n| ParamKind::for_name(n) == ParamKind::Trainable)
        .collect();
    for name in names {
        let analytic = grads.param(&name)?.clone();
        for idx in pick(analytic.len(), &mut rng) {
            let orig = probe.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = orig + eps;
            let (lp, _) = eval_loss(graph, &probe, input, &head, opts.mode, false)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig - eps;
            let (lm, _) = eval_loss(graph, &probe, input, &head, opts.mode, false)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * opts.eps);
            record(&mut report, &name, idx, analytic.data()[idx].to_f64_lossy(), numeric, opts.floor);
        }
    }
    if opts.check_input {
        if let Some(gin) = &grads.input {
            let mut x = input.clone();
            for idx in pick(x.len(), &mut rng) {
                let orig = x.data()[idx];
                x.data_mut()[idx] = orig + eps;
                let (lp, _) = eval_loss(graph, params, &x, &head, opts.mode, false)?;
                x.data_mut()[idx] = orig - eps;
                let (lm, _) = eval_loss(graph, params, &x, &head, opts.mode, false)?;
                x.data_mut()[idx] = orig;
                let numeric = (lp - lm) / (2.0 * opts.eps);
                record(&mut report, "input", idx, gin.data()[idx].to_f64_lossy(), numeric, opts.floor);
            }
        }
    }
    Ok(report)
}

fn freeze_bandwidth<T: Scalar>(
    head: &LossHead<T>,
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    input: &Tensor<T>,
    mode: BnMode,
) -> Result<LossHead<T>> {
    let LossHead::Uda {
        labels,
        target,
        beta,
        mmd,
    } = head
    else {
        return Ok(head.clone());
    };
    let out = uda_objective(
        graph,
        params,
        UdaBatch {
            source: input,
            labels,
            target: Some(target),
        },
        *beta,
        mmd,
        mode,
        false,
    )?;
    let sigmas = out
        .bandwidth
        .map(|b| b.sigmas)
        .ok_or_else(|| Error::Usage("objective resolved no bandwidth".into()))?;
    Ok(LossHead::Uda {
        labels: labels.clone(),
        target: target.clone(),
        beta: *beta,
        mmd: MmdConfig::explicit(sigmas),
    })
}

fn record(report: &mut FdReport, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    let rel = (analytic - numeric).abs() / denom;
    report.checked += 1;
    if rel > report.max_rel_error || rel.is_nan() {
        report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
        report.worst = Some((name.to_string(), idx));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerKind;

    #[test]
    fn parameter_free_graph_has_zero_error() {
        let mut g = ModelGraph::new([1, 2, 2], 2);
        g.push("relu", LayerKind::Relu, 1, 1);
        let p = ParameterStore::<f64>::new();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.5, -0.3, 1.2, 0.9]).unwrap();
        let r = finite_diff_check(
            &g,
            &p,
            &x,
            &LossHead::HalfSquaredNorm,
            &FdOptions {
                check_input: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 0);
    }

    #[test]
    fn tiny_step_warns() {
        let g = ModelGraph::new([1, 1, 1], 2);
        let p = ParameterStore::<f64>::new();
        let x = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let r = finite_diff_check(
            &g,
            &p,
            &x,
            &LossHead::HalfSquaredNorm,
            &FdOptions {
                eps: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn fc_layer_matches() {
        let mut g = ModelGraph::new([3, 1, 1], 2);
        g.push("flat", LayerKind::Flatten, 3, 3);
        g.push("fc", LayerKind::Fc { bias: true }, 3, 2);
        let mut p = ParameterStore::<f64>::new();
        p.insert(
            "fc.weight",
            Tensor::new(vec![2, 3], vec![0.3, -0.1, 0.2, 0.5, 0.4, -0.6]).unwrap(),
        );
        p.insert("fc.bias", Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        let x = Tensor::new(vec![2, 3, 1, 1], vec![1.0, 0.5, -0.5, 0.2, -1.0, 0.7]).unwrap();
        let r = finite_diff_check(
            &g,
            &p,
            &x,
            &LossHead::CrossEntropy(vec![0, 1]),
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 6 + 2 + 6);
    }
}
