//! Domain-adaptation loss surface: Gaussian-kernel MMD between domain
//! representations, source cross-entropy, the β schedule, and the combined
//! objective `L = L_cls + β·L_mmd`.

use serde::{Deserialize, Serialize};

use crate::autograd::{forward_pass, BnMode, ForwardOptions, GradientSet};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, NodeRef};
use crate::params::ParameterStore;
use crate::tensor::{gemm_into, Scalar, Tensor};

/// σ multipliers of the five-kernel bandwidth family.
pub const MULTI_KERNEL_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// σ² = median pairwise squared distance over the joint batch / 2.
    Median,
    Fixed(f64),
    /// Median-heuristic σ scaled by each multiplier; the statistic is summed.
    MultiKernel(Vec<f64>),
    /// Already-resolved σ values, summed.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
        }
    }
}

impl MmdConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn multi_kernel() -> Self {
        Self {
            bandwidth: Bandwidth::MultiKernel(MULTI_KERNEL_MULTIPLIERS.to_vec()),
        }
    }

    pub fn explicit(sigmas: Vec<f64>) -> Self {
        Self {
            bandwidth: Bandwidth::Explicit(sigmas),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: &f64| v.is_finite() && *v > 0.0;
        let fine = match &self.bandwidth {
            Bandwidth::Median => true,
            Bandwidth::Fixed(s) => ok(s),
            Bandwidth::MultiKernel(m) | Bandwidth::Explicit(m) => !m.is_empty() && m.iter().all(ok),
        };
        if fine {
            Ok(())
        } else {
            Err(Error::config(format!("bandwidths must be strictly positive: {:?}", self.bandwidth)))
        }
    }

    /// Resolves the concrete σ list for a pair of representation batches.
    pub fn resolve<T: Scalar>(&self, source: &Tensor<T>, target: &Tensor<T>) -> Result<ResolvedBandwidth> {
        self.validate()?;
        let median_sigma = || -> ResolvedBandwidth {
            let med = median_pairwise_sq_dist(source, target);
            if med > 0.0 && med.is_finite() {
                ResolvedBandwidth {
                    sigmas: vec![(med / 2.0).sqrt()],
                    warning: None,
                }
            } else {
                let msg = "median pairwise distance is zero; falling back to sigma = 1".to_string();
                log::warn!("{msg}");
                ResolvedBandwidth {
                    sigmas: vec![1.0],
                    warning: Some(msg),
                }
            }
        };
        Ok(match &self.bandwidth {
            Bandwidth::Median => median_sigma(),
            Bandwidth::Fixed(s) => ResolvedBandwidth {
                sigmas: vec![*s],
                warning: None,
            },
            Bandwidth::MultiKernel(mults) => {
                let base = median_sigma();
                ResolvedBandwidth {
                    sigmas: mults.iter().map(|m| m * base.sigmas[0]).collect(),
                    warning: base.warning,
                }
            }
            Bandwidth::Explicit(s) => ResolvedBandwidth {
                sigmas: s.clone(),
                warning: None,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBandwidth {
    pub sigmas: Vec<f64>,
    pub warning: Option<String>,
}

fn as_rows<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.batch(), t.row_len())
}

/// Median of squared distances over all distinct pairs of the joint batch.
fn median_pairwise_sq_dist<T: Scalar>(source: &Tensor<T>, target: &Tensor<T>) -> f64 {
    let (ns, d) = as_rows(source);
    let (nt, _) = as_rows(target);
    let rows: Vec<&[T]> = source
        .data()
        .chunks_exact(d.max(1))
        .take(ns)
        .chain(target.data().chunks_exact(d.max(1)).take(nt))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| {
                    let diff = a.to_f64_lossy() - b.to_f64_lossy();
                    diff * diff
                })
                .sum();
            dists.push(s);
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let m = dists.len();
    if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    }
}

/// MMD value with gradients for both batches.
#[derive(Debug, Clone)]
pub struct MmdOutput<T> {
    pub value: T,
    pub grad_source: Tensor<T>,
    pub grad_target: Tensor<T>,
    pub bandwidth: ResolvedBandwidth,
}

fn check_pair<T: Scalar>(source: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    let (ns, ds) = as_rows(source);
    let (nt, dt) = as_rows(target);
    if ns == 0 || nt == 0 {
        return Err(Error::structural("mmd", "both batches need at least one row"));
    }
    if ds != dt {
        return Err(Error::structural(
            "mmd",
            format!("feature dimension mismatch: {ds} vs {dt}"),
        ));
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD.
pub fn mmd_loss<T: Scalar>(source: &Tensor<T>, target: &Tensor<T>, cfg: &MmdConfig) -> Result<T> {
    Ok(mmd_with_grad(source, target, cfg)?.value)
}

/// Squared MMD over the joint set `z = [source; target]` with weights
/// `w = (1/n_s, …, −1/n_t, …)`: `L = Σ_σ wᵀ K_σ w`, and
/// `∂L/∂z_a = −(2/σ²)·w_a·Σ_b w_b k_ab (z_a − z_b)`.
pub fn mmd_with_grad<T: Scalar>(source: &Tensor<T>, target: &Tensor<T>, cfg: &MmdConfig) -> Result<MmdOutput<T>> {
    check_pair(source, target)?;
    let bandwidth = cfg.resolve(source, target)?;
    let (ns, d) = as_rows(source);
    let (nt, _) = as_rows(target);
    let n = ns + nt;
    let mut z = Vec::with_capacity(n * d);
    z.extend_from_slice(source.data());
    z.extend_from_slice(target.data());
    let weights: Vec<T> = (0..n)
        .map(|a| {
            if a < ns {
                T::one() / T::from_usize_lossy(ns)
            } else {
                -T::one() / T::from_usize_lossy(nt)
            }
        })
        .collect();

    let mut gram = vec![T::zero(); n * n];
    gemm_into(&z, &z, &mut gram, n, d, n, false, true, false);
    let norms: Vec<T> = (0..n).map(|a| gram[a * n + a]).collect();
    let mut sq = vec![T::zero(); n * n];
    for a in 0..n {
        for b in 0..n {
            sq[a * n + b] = if a == b {
                T::zero()
            } else {
                (norms[a] + norms[b] - gram[a * n + b] - gram[b * n + a]).max(T::zero())
            };
        }
    }

    let mut value = T::zero();
    let mut grad = vec![T::zero(); n * d];
    let mut m = vec![T::zero(); n * n];
    for &sigma in &bandwidth.sigmas {
        let two_s2 = T::from_f64_lossy(2.0 * sigma * sigma);
        let coef = T::from_f64_lossy(-2.0 / (sigma * sigma));
        // m_ab = w_b·k_ab
        for a in 0..n {
            for b in 0..n {
                m[a * n + b] = weights[b] * (-sq[a * n + b] / two_s2).exp();
            }
        }
        // value: Σ_a w_a Σ_b m_ab, grouped into the three block means so that
        // identical domains cancel exactly.
        let block = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| -> T {
            let mut s = T::zero();
            for a in rows {
                for b in cols.clone() {
                    s += (-sq[a * n + b] / two_s2).exp();
                }
            }
            s
        };
        let kss = block(0..ns, 0..ns) / T::from_usize_lossy(ns * ns);
        let ktt = block(ns..n, ns..n) / T::from_usize_lossy(nt * nt);
        let kst = block(0..ns, ns..n) / T::from_usize_lossy(ns * nt);
        value += kss + ktt - (kst + kst);

        let mut mz = vec![T::zero(); n * d];
        gemm_into(&m, &z, &mut mz, n, n, d, false, false, false);
        for a in 0..n {
            let r: T = m[a * n..(a + 1) * n].iter().copied().sum();
            let scale = coef * weights[a];
            for k in 0..d {
                grad[a * d + k] += scale * (r * z[a * d + k] - mz[a * d + k]);
            }
        }
    }
    let grad_target = Tensor::new(target.shape().to_vec(), grad.split_off(ns * d))?;
    let grad_source = Tensor::new(source.shape().to_vec(), grad)?;
    Ok(MmdOutput {
        value: value.max(T::zero()),
        grad_source,
        grad_target,
        bandwidth,
    })
}

/// Mean negative log-softmax probability of the true class, with its gradient
/// `(softmax − onehot)/N` on the logits.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = (logits.batch(), logits.row_len());
    if n == 0 {
        return Err(Error::Data("cross-entropy over an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {} logits rows", labels.len(), n)));
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * c];
    for (i, (row, &y)) in logits.data().chunks_exact(c).zip(labels).enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (k, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad[i * c + k] = (p - if k == y { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::new(logits.shape().to_vec(), grad)?))
}

pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// `β = 4/(1 + e^{−i/ITER}) − 2`.
pub fn beta_schedule(i: usize, iters: usize) -> Result<f64> {
    if iters == 0 {
        return Err(Error::config("ITER must be at least 1"));
    }
    if i > iters {
        return Err(Error::config(format!("iteration {i} beyond ITER = {iters}")));
    }
    Ok(4.0 / (1.0 + (-(i as f64) / iters as f64).exp()) - 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub mmd: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cls: f64, mmd: f64, beta: f64) -> Self {
        Self {
            cls,
            mmd,
            beta,
            total: cls + beta * mmd,
        }
    }
}

/// Node at which the MMD term is attached: the representation layer's
/// post-activation output.
pub fn representation_node(graph: &ModelGraph) -> Result<NodeRef> {
    let idx = graph.representation_index()?;
    Ok(NodeRef::Layer(graph.activation_site(idx)))
}

/// Labeled source rows plus optional unlabeled target rows.
#[derive(Debug, Clone, Copy)]
pub struct UdaBatch<'a, T> {
    pub source: &'a Tensor<T>,
    pub labels: &'a [usize],
    pub target: Option<&'a Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput<T> {
    pub loss: LossBreakdown,
    pub grads: Option<GradientSet<T>>,
    pub bandwidth: Option<ResolvedBandwidth>,
    /// Running-statistic updates from a train-mode pass.
    pub bn_updates: Vec<(String, Vec<T>, Vec<T>)>,
}

/// Evaluates `L_cls + β·L_mmd` with source and target stacked into one forward
/// pass; optionally differentiates it.
pub fn uda_objective<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    batch: UdaBatch<'_, T>,
    beta: f64,
    mmd: &MmdConfig,
    mode: BnMode,
    want_grads: bool,
) -> Result<ObjectiveOutput<T>> {
    let ns = batch.source.batch();
    let joint;
    let input = match batch.target {
        Some(t) => {
            joint = Tensor::concat_rows(&[batch.source, t])?;
            &joint
        }
        None => batch.source,
    };
    let trace = forward_pass(graph, params, input, ForwardOptions::record(mode))?;
    let logits = trace.output();
    let n = logits.batch();
    let src_logits = logits.slice_rows(0, ns);
    let (cls, dlogits_src) = cross_entropy_with_grad(&src_logits, batch.labels)?;

    let mut mmd_val = 0.0;
    let mut bandwidth = None;
    let mut repr_seed = None;
    let repr = if batch.target.is_some() {
        Some(representation_node(graph)?)
    } else {
        None
    };
    if let Some(node) = repr {
        let rep = trace
            .node(node)
            .ok_or_else(|| Error::structural("representation", "not retained by trace"))?;
        let (rs, rt) = (rep.slice_rows(0, ns), rep.slice_rows(ns, n));
        let out = mmd_with_grad(&rs, &rt, mmd)?;
        mmd_val = out.value.to_f64_lossy();
        if want_grads && beta != 0.0 {
            let mut g = Tensor::concat_rows(&[&out.grad_source, &out.grad_target])?;
            g.scale(T::from_f64_lossy(beta));
            repr_seed = Some(g);
        }
        bandwidth = Some(out.bandwidth);
    }
    let loss = LossBreakdown::new(cls.to_f64_lossy(), mmd_val, beta);

    let grads = if want_grads {
        let mut dlogits = Tensor::zeros(logits.shape().to_vec());
        dlogits.data_mut()[..dlogits_src.len()].copy_from_slice(dlogits_src.data());
        let out_node = graph.last_node();
        let mut seeds: Vec<(NodeRef, &Tensor<T>)> = vec![(out_node, &dlogits)];
        if let (Some(node), Some(g)) = (repr, repr_seed.as_ref()) {
            seeds.push((node, g));
        }
        Some(trace.backward_seeded(&seeds, true)?)
    } else {
        None
    };
    let bn_updates = if mode == BnMode::Train {
        trace.running_stat_updates()
    } else {
        Vec::new()
    };
    Ok(ObjectiveOutput {
        loss,
        grads,
        bandwidth,
        bn_updates,
    })
}

/// Loss breakdown for one source/target batch pair at pruning iteration `i`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    source: &Tensor<T>,
    labels: &[usize],
    target: &Tensor<T>,
    i: usize,
    iters: usize,
    cfg: &MmdConfig,
) -> Result<LossBreakdown> {
    let beta = beta_schedule(i, iters)?;
    let out = uda_objective(
        graph,
        params,
        UdaBatch {
            source,
            labels,
            target: Some(target),
        },
        beta,
        cfg,
        BnMode::Eval,
        false,
    )?;
    Ok(out.loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|k| f(k / d, k % d)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_sets_give_zero() {
        let x = rows(5, 3, |i, j| ((i * 7 + j * 3) as f64).sin());
        for cfg in [MmdConfig::default(), MmdConfig::fixed(0.7), MmdConfig::multi_kernel()] {
            assert!(mmd_loss(&x, &x, &cfg).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn two_point_closed_form() {
        // ‖x − y‖² = 2σ² → 2 − 2e^{−1}
        let sigma = 0.8;
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::new(vec![1, 2], vec![sigma, sigma]).unwrap();
        let v = mmd_loss(&x, &y, &MmdConfig::fixed(sigma)).unwrap();
        assert!((v - 1.264_241_117_657_115).abs() < 1e-12, "{v}");
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let x = rows(2, 3, |_, _| 0.0);
        let y = rows(2, 4, |_, _| 0.0);
        assert!(matches!(
            mmd_loss(&x, &y, &MmdConfig::default()),
            Err(Error::Structural { .. })
        ));
    }

    #[test]
    fn coincident_points_fall_back_to_unit_bandwidth() {
        let x = rows(3, 2, |_, _| 1.5);
        let out = mmd_with_grad(&x, &x, &MmdConfig::default()).unwrap();
        assert_eq!(out.bandwidth.sigmas, vec![1.0]);
        assert!(out.bandwidth.warning.is_some());
    }

    #[test]
    fn nonpositive_bandwidth_rejected() {
        assert!(MmdConfig::fixed(0.0).validate().is_err());
        assert!(MmdConfig::explicit(vec![1.0, -2.0]).validate().is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::new(vec![1, 4], vec![0.3; 4]).unwrap();
        assert!((cross_entropy_loss(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let l = Tensor::<f64>::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        assert!((cross_entropy_loss(&l, &[0]).unwrap() - 0.126_928_011_042_972_5).abs() < 1e-12);
        let confident = Tensor::new(vec![1, 2], vec![60.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&confident, &[0]).unwrap() < 1e-20);
        assert!(matches!(cross_entropy_loss(&l, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn beta_endpoints() {
        assert_eq!(beta_schedule(0, 10).unwrap(), 0.0);
        assert!((beta_schedule(10, 10).unwrap() - 0.924_234).abs() < 1e-6);
        assert!((beta_schedule(5, 10).unwrap() - 0.489_837_3).abs() < 1e-6);
        assert!(beta_schedule(0, 0).unwrap_err().is_config());
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::new(1.0, 0.5, 0.4);
        assert!((b.total - 1.2).abs() < 1e-15);
    }
}
