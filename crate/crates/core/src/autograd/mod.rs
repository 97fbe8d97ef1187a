//! Layer-level reverse-mode differentiation over a [`ModelGraph`].
//!
//! A forward pass produces an [`ActivationTrace`] holding every layer output
//! (when recording) plus the per-layer caches needed to run the pass
//! backwards. Gradients may be seeded at any node, which is how losses attached
//! to intermediate layers (the MMD term at the representation layer) enter.

pub mod gradcheck;
pub mod kernels;
pub mod sgd;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{ChannelId, Dims, LayerKind, ModelGraph, NodeRef};
use crate::params::{ParamKind, ParameterStore};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{finite_diff_check, FdReport, LossHead};
pub use sgd::Sgd;

use kernels::{BnCache, ConvGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

/// Channels forced to zero at their activation sites.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelMask {
    sites: BTreeMap<usize, BTreeSet<usize>>,
}

impl ChannelMask {
    pub fn resolve<'a>(
        graph: &ModelGraph,
        channels: impl IntoIterator<Item = &'a ChannelId>,
    ) -> Result<Self> {
        let mut sites: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for ch in channels {
            let idx = graph
                .index_of(&ch.layer)
                .ok_or_else(|| Error::structural(&ch.layer, "masked channel names an unknown layer"))?;
            graph.check_channels([ch])?;
            sites
                .entry(graph.activation_site(idx))
                .or_default()
                .insert(ch.channel);
        }
        Ok(Self { sites })
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    fn at(&self, layer: usize) -> Option<&BTreeSet<usize>> {
        self.sites.get(&layer)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'m> {
    pub mode: BnMode,
    /// Keep every intermediate activation for backward and criterion use.
    pub record: bool,
    pub mask: Option<&'m ChannelMask>,
}

impl ForwardOptions<'static> {
    pub fn eval() -> Self {
        Self {
            mode: BnMode::Eval,
            record: false,
            mask: None,
        }
    }

    pub fn record(mode: BnMode) -> Self {
        Self {
            mode,
            record: true,
            mask: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Bn(BnCache<T>),
    MaxPool(Vec<u32>),
}

/// Forward-pass record: layer outputs plus backward caches.
#[derive(Debug)]
pub struct ActivationTrace<'a, T> {
    graph: &'a ModelGraph,
    params: &'a ParameterStore<T>,
    mode: BnMode,
    recorded: bool,
    input: Tensor<T>,
    outputs: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
    masks: Vec<Option<BTreeSet<usize>>>,
    dims: Vec<Dims>,
}

/// Parameter gradients plus gradients at every layer output.
#[derive(Debug, Clone)]
pub struct GradientSet<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub activations: Vec<Option<Tensor<T>>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::structural(name, "no gradient for parameter"))
    }

    pub fn activation(&self, layer: usize) -> Option<&Tensor<T>> {
        self.activations.get(layer).and_then(Option::as_ref)
    }

    /// Adds another gradient set elementwise (batch accumulation).
    pub fn accumulate(&mut self, other: &GradientSet<T>) {
        for (k, g) in &other.params {
            match self.params.get_mut(k) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.params.insert(k.clone(), g.clone());
                }
            }
        }
    }
}

fn batch_shape_matches(graph: &ModelGraph, input: &Tensor<impl Scalar>) -> bool {
    input.rank() == 4 && input.shape()[1..] == graph.input_shape[..]
}

/// Runs the graph on `input` (`[N, C, H, W]`).
pub fn forward_pass<'a, T: Scalar>(
    graph: &'a ModelGraph,
    params: &'a ParameterStore<T>,
    input: &Tensor<T>,
    opts: ForwardOptions<'_>,
) -> Result<ActivationTrace<'a, T>> {
    if !batch_shape_matches(graph, input) {
        let first = graph.layers.first().map_or("input", |l| l.id.as_str());
        return Err(Error::structural(
            first,
            format!(
                "input shape {:?} does not match declared [N, {:?}]",
                input.shape(),
                graph.input_shape
            ),
        ));
    }
    if !input.is_finite() {
        return Err(Error::Numeric("non-finite value in forward input".into()));
    }
    let dims = graph.infer_dims()?;
    let n = input.batch();
    let nl = graph.layers.len();
    let mut last_use = vec![0usize; nl];
    for (i, l) in graph.layers.iter().enumerate() {
        for r in &l.inputs {
            if let NodeRef::Layer(j) = r {
                last_use[*j] = last_use[*j].max(i);
            }
        }
    }
    let mut outputs: Vec<Option<Tensor<T>>> = vec![None; nl];
    let mut aux = Vec::with_capacity(nl);
    let mut masks = vec![None; nl];
    let train = opts.mode == BnMode::Train;

    for (i, layer) in graph.layers.iter().enumerate() {
        let get = |r: NodeRef| -> &Tensor<T> {
            match r {
                NodeRef::Input => input,
                NodeRef::Layer(j) => outputs[j].as_ref().expect("input freed before last use"),
            }
        };
        let in_dims = match layer.inputs[0] {
            NodeRef::Input => graph.input_dims(),
            NodeRef::Layer(j) => dims[j],
        };
        let x = get(layer.inputs[0]);
        let out_dims = dims[i];
        let (data, a) = match &layer.kind {
            LayerKind::Conv {
                kernel,
                stride,
                padding,
                bias,
            } => {
                let g = ConvGeom {
                    n,
                    c_in: in_dims.c,
                    h: in_dims.h,
                    w: in_dims.w,
                    c_out: layer.out_channels,
                    k: *kernel,
                    stride: *stride,
                    pad: *padding,
                    ho: out_dims.h,
                    wo: out_dims.w,
                };
                let w = params.get(&format!("{}.weight", layer.id))?;
                check_param_shape(&layer.id, w, &[layer.out_channels, in_dims.c, *kernel, *kernel])?;
                let b = if *bias {
                    Some(params.get(&format!("{}.bias", layer.id))?.data())
                } else {
                    None
                };
                (kernels::conv_forward(x.data(), w.data(), b, &g), Aux::None)
            }
            LayerKind::Fc { bias } => {
                let w = params.get(&format!("{}.weight", layer.id))?;
                check_param_shape(&layer.id, w, &[layer.out_channels, in_dims.c])?;
                let b = if *bias {
                    Some(params.get(&format!("{}.bias", layer.id))?.data())
                } else {
                    None
                };
                (
                    kernels::fc_forward(x.data(), w.data(), b, n, in_dims.c, layer.out_channels),
                    Aux::None,
                )
            }
            LayerKind::Bn => {
                let p = |s: &str| params.get(&format!("{}.{s}", layer.id));
                let gamma = p("gamma")?;
                check_param_shape(&layer.id, gamma, &[in_dims.c])?;
                let (y, cache) = kernels::bn_forward(
                    x.data(),
                    n,
                    in_dims.c,
                    in_dims.h * in_dims.w,
                    gamma.data(),
                    p("beta")?.data(),
                    p("running_mean")?.data(),
                    p("running_var")?.data(),
                    train,
                );
                (y, Aux::Bn(cache))
            }
            LayerKind::Relu => (
                x.data().iter().map(|&v| v.max(T::zero())).collect(),
                Aux::None,
            ),
            LayerKind::MaxPool { kernel, stride } => {
                let (y, arg) = kernels::maxpool_forward(
                    x.data(),
                    n,
                    in_dims.c,
                    in_dims.h,
                    in_dims.w,
                    *kernel,
                    *stride,
                    out_dims.h,
                    out_dims.w,
                );
                (y, Aux::MaxPool(arg))
            }
            LayerKind::AvgPool { kernel, stride } => (
                kernels::avgpool_forward(
                    x.data(),
                    n,
                    in_dims.c,
                    in_dims.h,
                    in_dims.w,
                    *kernel,
                    *stride,
                    out_dims.h,
                    out_dims.w,
                ),
                Aux::None,
            ),
            LayerKind::Flatten => (x.data().to_vec(), Aux::None),
            LayerKind::ResidualAdd => {
                let y = get(layer.inputs[1]);
                (
                    x.data().iter().zip(y.data()).map(|(a, b)| *a + *b).collect(),
                    Aux::None,
                )
            }
        };
        let mut out = Tensor::new(out_dims.tensor_shape(n), data)?;
        if let Some(chans) = opts.mask.and_then(|m| m.at(i)) {
            zero_channels(&mut out, out_dims, chans);
            masks[i] = Some(chans.clone());
        }
        outputs[i] = Some(out);
        aux.push(if opts.record { a } else { Aux::None });
        if !opts.record {
            for r in &layer.inputs {
                if let NodeRef::Layer(j) = r {
                    if last_use[*j] == i && *j + 1 != nl {
                        outputs[*j] = None;
                    }
                }
            }
        }
    }
    if let Some(Some(out)) = outputs.last() {
        if !out.is_finite() {
            return Err(Error::Numeric("non-finite value in forward output".into()));
        }
    }
    Ok(ActivationTrace {
        graph,
        params,
        mode: opts.mode,
        recorded: opts.record,
        input: input.clone(),
        outputs,
        aux,
        masks,
        dims,
    })
}

/// [`forward_pass`] with channels zeroed after their BN and ReLU.
pub fn masked_forward<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    input: &Tensor<T>,
    masked: &[ChannelId],
    mode: BnMode,
) -> Result<Tensor<T>> {
    let mask = ChannelMask::resolve(graph, masked)?;
    let trace = forward_pass(
        graph,
        params,
        input,
        ForwardOptions {
            mode,
            record: false,
            mask: Some(&mask),
        },
    )?;
    Ok(trace.output().clone())
}

fn check_param_shape<T: Scalar>(layer: &str, t: &Tensor<T>, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::structural(
            layer,
            format!("parameter shape {:?}, layer expects {:?}", t.shape(), want),
        ));
    }
    Ok(())
}

fn zero_channels<T: Scalar>(t: &mut Tensor<T>, dims: Dims, chans: &BTreeSet<usize>) {
    let n = t.batch();
    let hw = dims.h * dims.w;
    let data = t.data_mut();
    for i in 0..n {
        for &c in chans {
            let start = (i * dims.c + c) * hw;
            data[start..start + hw].iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl<'a, T: Scalar> ActivationTrace<'a, T> {
    pub fn graph(&self) -> &'a ModelGraph {
        self.graph
    }

    pub fn is_recorded(&self) -> bool {
        self.recorded
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn output(&self) -> &Tensor<T> {
        match self.outputs.last() {
            Some(Some(t)) => t,
            _ => &self.input,
        }
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    /// Output of `layer`, when the trace retained it.
    pub fn activation(&self, layer: usize) -> Option<&Tensor<T>> {
        self.outputs.get(layer).and_then(Option::as_ref)
    }

    pub fn node(&self, r: NodeRef) -> Option<&Tensor<T>> {
        match r {
            NodeRef::Input => Some(&self.input),
            NodeRef::Layer(i) => self.activation(i),
        }
    }

    pub fn dims(&self, layer: usize) -> Dims {
        self.dims[layer]
    }

    /// New running statistics for every BN layer of a train-mode pass.
    pub fn running_stat_updates(&self) -> Vec<(String, Vec<T>, Vec<T>)> {
        let mom = T::from_f64_lossy(kernels::BN_MOMENTUM);
        let mut out = Vec::new();
        for (layer, aux) in self.graph.layers.iter().zip(&self.aux) {
            if let Aux::Bn(BnCache {
                batch_stats: Some((mean, var)),
                ..
            }) = aux
            {
                let Ok(rm) = self.params.get(&format!("{}.running_mean", layer.id)) else {
                    continue;
                };
                let Ok(rv) = self.params.get(&format!("{}.running_var", layer.id)) else {
                    continue;
                };
                let new_mean = rm
                    .data()
                    .iter()
                    .zip(mean)
                    .map(|(&r, &m)| (T::one() - mom) * r + mom * m)
                    .collect();
                let new_var = rv
                    .data()
                    .iter()
                    .zip(var)
                    .map(|(&r, &v)| (T::one() - mom) * r + mom * v)
                    .collect();
                out.push((layer.id.clone(), new_mean, new_var));
            }
        }
        out
    }

    /// Backward from a gradient on the final output.
    pub fn backward(&self, loss_grad: &Tensor<T>) -> Result<GradientSet<T>> {
        let out = self.graph.last_node();
        self.backward_seeded(&[(out, loss_grad)], true)
    }

    /// Backward from gradients injected at arbitrary nodes. Gradients reaching a
    /// node from several consumers are summed.
    pub fn backward_seeded(
        &self,
        seeds: &[(NodeRef, &Tensor<T>)],
        want_params: bool,
    ) -> Result<GradientSet<T>> {
        if !self.recorded {
            return Err(Error::Usage("backward on a trace recorded without `record`".into()));
        }
        let graph = self.graph;
        let nl = graph.layers.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nl];
        let mut input_grad: Option<Vec<T>> = None;
        for (node, g) in seeds {
            let target = self
                .node(*node)
                .ok_or_else(|| Error::Usage("seed node missing from trace".into()))?;
            if target.shape() != g.shape() {
                return Err(Error::structural(
                    "backward",
                    format!(
                        "seed gradient shape {:?} vs activation {:?}",
                        g.shape(),
                        target.shape()
                    ),
                ));
            }
            let slot = match node {
                NodeRef::Input => &mut input_grad,
                NodeRef::Layer(i) => &mut grads[*i],
            };
            accumulate(slot, g.data());
        }

        let mut param_grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        if want_params {
            for (name, t) in self.params.iter() {
                if ParamKind::for_name(name) == ParamKind::Trainable {
                    param_grads.insert(name.to_string(), Tensor::zeros(t.shape().to_vec()));
                }
            }
        }
        let mut act_grads: Vec<Option<Tensor<T>>> = vec![None; nl];
        let n = self.input.batch();
        let train = self.mode == BnMode::Train;

        for i in (0..nl).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let layer = &graph.layers[i];
            let out_dims = self.dims[i];
            let mut dy_t = Tensor::new(out_dims.tensor_shape(n), dy)?;
            act_grads[i] = Some(dy_t.clone());
            if let Some(m) = &self.masks[i] {
                // a masked output is constant; nothing flows past it
                zero_channels(&mut dy_t, out_dims, m);
            }
            let dy = dy_t.into_data();
            let in_ref = layer.inputs[0];
            let in_dims = match in_ref {
                NodeRef::Input => graph.input_dims(),
                NodeRef::Layer(j) => self.dims[j],
            };
            let x = self
                .node(in_ref)
                .ok_or_else(|| Error::Usage("trace is missing an input activation".into()))?;
            let mut add_param = |suffix: &str, g: Option<Vec<T>>| {
                if let (Some(g), Some(slot)) = (g, param_grads.get_mut(&format!("{}.{suffix}", layer.id))) {
                    for (a, b) in slot.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
            };
            let dx: Vec<T> = match &layer.kind {
                LayerKind::Conv {
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    let g = ConvGeom {
                        n,
                        c_in: in_dims.c,
                        h: in_dims.h,
                        w: in_dims.w,
                        c_out: layer.out_channels,
                        k: *kernel,
                        stride: *stride,
                        pad: *padding,
                        ho: out_dims.h,
                        wo: out_dims.w,
                    };
                    let w = self.params.get(&format!("{}.weight", layer.id))?;
                    let r = kernels::conv_backward(x.data(), w.data(), &dy, &g, *bias, want_params);
                    add_param("weight", r.dw);
                    add_param("bias", r.db);
                    r.dx
                }
                LayerKind::Fc { bias } => {
                    let w = self.params.get(&format!("{}.weight", layer.id))?;
                    let r = kernels::fc_backward(
                        x.data(),
                        w.data(),
                        &dy,
                        n,
                        in_dims.c,
                        layer.out_channels,
                        *bias,
                        want_params,
                    );
                    add_param("weight", r.dw);
                    add_param("bias", r.db);
                    r.dx
                }
                LayerKind::Bn => {
                    let Aux::Bn(cache) = &self.aux[i] else {
                        return Err(Error::Usage("BN cache missing from trace".into()));
                    };
                    let gamma = self.params.get(&format!("{}.gamma", layer.id))?;
                    let r = kernels::bn_backward(
                        &dy,
                        cache,
                        gamma.data(),
                        n,
                        in_dims.c,
                        in_dims.h * in_dims.w,
                        train,
                    );
                    add_param("gamma", Some(r.dgamma));
                    add_param("beta", Some(r.dbeta));
                    r.dx
                }
                LayerKind::Relu => {
                    let y = self.activation(i).expect("recorded");
                    dy.iter()
                        .zip(y.data())
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect()
                }
                LayerKind::MaxPool { .. } => {
                    let Aux::MaxPool(arg) = &self.aux[i] else {
                        return Err(Error::Usage("max-pool cache missing from trace".into()));
                    };
                    kernels::maxpool_backward(
                        &dy,
                        arg,
                        n * in_dims.c,
                        in_dims.h * in_dims.w,
                        out_dims.h * out_dims.w,
                    )
                }
                LayerKind::AvgPool { kernel, stride } => kernels::avgpool_backward(
                    &dy,
                    n * in_dims.c,
                    in_dims.h,
                    in_dims.w,
                    *kernel,
                    *stride,
                    out_dims.h,
                    out_dims.w,
                ),
                LayerKind::Flatten => dy,
                LayerKind::ResidualAdd => {
                    let other = layer.inputs[1];
                    let slot = match other {
                        NodeRef::Input => &mut input_grad,
                        NodeRef::Layer(j) => &mut grads[j],
                    };
                    accumulate(slot, &dy);
                    dy
                }
            };
            let slot = match in_ref {
                NodeRef::Input => &mut input_grad,
                NodeRef::Layer(j) => &mut grads[j],
            };
            accumulate(slot, &dx);
        }
        let input = input_grad
            .map(|g| Tensor::new(self.input.shape().to_vec(), g))
            .transpose()?;
        Ok(GradientSet {
            params: param_grads,
            activations: act_grads,
            input,
        })
    }

}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += *b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Backward pass from a gradient on the final output.
pub fn backward_pass<T: Scalar>(trace: &ActivationTrace<'_, T>, loss_grad: &Tensor<T>) -> Result<GradientSet<T>> {
    trace.backward(loss_grad)
}

/// Writes new BN running statistics into `params`.
pub fn apply_running_stats<T: Scalar>(
    params: &mut ParameterStore<T>,
    updates: Vec<(String, Vec<T>, Vec<T>)>,
) -> Result<()> {
    for (id, mean, var) in updates {
        params
            .get_mut(&format!("{id}.running_mean"))?
            .data_mut()
            .copy_from_slice(&mean);
        params
            .get_mut(&format!("{id}.running_var"))?
            .data_mut()
            .copy_from_slice(&var);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerKind;

    fn conv_graph(k: usize, pad: usize, c_in: usize, c_out: usize, hw: usize, bias: bool) -> ModelGraph {
        let mut g = ModelGraph::new([c_in, hw, hw], 2);
        g.push(
            "conv",
            LayerKind::Conv {
                kernel: k,
                stride: 1,
                padding: pad,
                bias,
            },
            c_in,
            c_out,
        );
        g
    }

    #[test]
    fn empty_graph_is_identity() {
        let g = ModelGraph::new([1, 2, 2], 2);
        let p = ParameterStore::<f64>::new();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let t = forward_pass(&g, &p, &x, ForwardOptions::eval()).unwrap();
        assert_eq!(t.output(), &x);
    }

    #[test]
    fn zero_conv_gives_zero_output() {
        let g = conv_graph(1, 0, 3, 2, 4, true);
        let mut p = ParameterStore::<f64>::new();
        p.insert("conv.weight", Tensor::zeros(vec![2, 3, 1, 1]));
        p.insert("conv.bias", Tensor::zeros(vec![2]));
        let x = Tensor::full(vec![2, 3, 4, 4], 1.7);
        let t = forward_pass(&g, &p, &x, ForwardOptions::eval()).unwrap();
        assert!(t.output().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_center_and_corner() {
        let g = conv_graph(3, 1, 1, 1, 3, false);
        let mut p = ParameterStore::<f64>::new();
        p.insert("conv.weight", Tensor::full(vec![1, 1, 3, 3], 1.0));
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let t = forward_pass(&g, &p, &x, ForwardOptions::eval()).unwrap();
        assert_eq!(t.output().data()[4], 9.0);
        assert_eq!(t.output().data()[0], 4.0);
    }

    #[test]
    fn wrong_input_shape_names_layer() {
        let g = conv_graph(3, 1, 1, 1, 3, false);
        let mut p = ParameterStore::<f64>::new();
        p.insert("conv.weight", Tensor::full(vec![1, 1, 3, 3], 1.0));
        let x = Tensor::full(vec![1, 2, 3, 3], 1.0);
        match forward_pass(&g, &p, &x, ForwardOptions::eval()) {
            Err(Error::Structural { location, .. }) => assert_eq!(location, "conv"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let g = ModelGraph::new([1, 1, 1], 2);
        let p = ParameterStore::<f64>::new();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![f64::NAN]).unwrap();
        assert!(matches!(
            forward_pass(&g, &p, &x, ForwardOptions::eval()),
            Err(Error::Numeric(_))
        ));
    }

    /// y = w·a with w = 2, a = 3.
    #[test]
    fn single_neuron_gradients() {
        let mut g = ModelGraph::new([1, 1, 1], 2);
        g.push("flat", LayerKind::Flatten, 1, 1);
        g.push("fc", LayerKind::Fc { bias: false }, 1, 1);
        let mut p = ParameterStore::<f64>::new();
        p.insert("fc.weight", Tensor::full(vec![1, 1], 2.0));
        let x = Tensor::full(vec![1, 1, 1, 1], 3.0);
        let t = forward_pass(&g, &p, &x, ForwardOptions::record(BnMode::Eval)).unwrap();
        assert_eq!(t.output().data(), &[6.0]);
        let grads = t.backward(&Tensor::full(vec![1, 1], 1.0)).unwrap();
        assert_eq!(grads.param("fc.weight").unwrap().data(), &[3.0]);
        assert_eq!(grads.input.unwrap().data(), &[2.0]);
    }

    #[test]
    fn relu_blocks_gradient_in_dead_zone() {
        let mut g = ModelGraph::new([1, 1, 2], 2);
        g.push("relu", LayerKind::Relu, 1, 1);
        let p = ParameterStore::<f64>::new();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        let t = forward_pass(&g, &p, &x, ForwardOptions::record(BnMode::Eval)).unwrap();
        let grads = t
            .backward(&Tensor::new(vec![1, 1, 1, 2], vec![5.0, 5.0]).unwrap())
            .unwrap();
        assert_eq!(grads.input.unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn residual_skip_passes_gradient_through() {
        // out = conv(x) + x with a zero conv
        let mut g = conv_graph(1, 0, 2, 2, 2, false);
        g.push_from(
            "add",
            LayerKind::ResidualAdd,
            vec![NodeRef::Layer(0), NodeRef::Input],
            2,
            2,
        );
        let mut p = ParameterStore::<f64>::new();
        p.insert("conv.weight", Tensor::zeros(vec![2, 2, 1, 1]));
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let t = forward_pass(&g, &p, &x, ForwardOptions::record(BnMode::Eval)).unwrap();
        assert_eq!(t.output(), &x);
        let up = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| (v as f64) * 0.5 - 1.0).collect()).unwrap();
        let grads = t.backward(&up).unwrap();
        assert_eq!(grads.input.unwrap().data(), up.data());
    }

    #[test]
    fn backward_requires_recording() {
        let g = conv_graph(1, 0, 1, 1, 1, false);
        let mut p = ParameterStore::<f64>::new();
        p.insert("conv.weight", Tensor::full(vec![1, 1, 1, 1], 1.0));
        let x = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let t = forward_pass(&g, &p, &x, ForwardOptions::eval()).unwrap();
        assert!(matches!(
            t.backward(&Tensor::full(vec![1, 1, 1, 1], 1.0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let g = conv_graph(3, 1, 2, 3, 5, true);
        let mut p = ParameterStore::<f32>::new();
        p.insert(
            "conv.weight",
            Tensor::new(vec![3, 2, 3, 3], (0..54).map(|v| (v as f32).sin()).collect()).unwrap(),
        );
        p.insert("conv.bias", Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
        let x = Tensor::new(vec![2, 2, 5, 5], (0..100).map(|v| (v as f32 * 0.37).cos()).collect()).unwrap();
        let a = forward_pass(&g, &p, &x, ForwardOptions::eval()).unwrap().output().clone();
        let b = forward_pass(&g, &p, &x, ForwardOptions::eval()).unwrap().output().clone();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
