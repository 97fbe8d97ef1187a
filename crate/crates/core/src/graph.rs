//! Layer graphs: ordered layer lists with explicit input edges, channel
//! bookkeeping, and prunability metadata.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRef {
    /// The graph input.
    Input,
    /// Output of the layer at this position.
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Bn,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Fc {
        bias: bool,
    },
    ResidualAdd,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Bn => "bn",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Fc { .. } => "fc",
            LayerKind::ResidualAdd => "residual_add",
        }
    }

    /// Conv and FC layers own output channels that can be scored and removed.
    pub fn has_filters(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    /// Layers that act independently on each channel.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            LayerKind::Bn | LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<NodeRef>,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub prunable: bool,
    #[serde(default)]
    pub is_representation: bool,
}

impl LayerSpec {
    pub fn new(
        id: impl Into<String>,
        kind: LayerKind,
        input: NodeRef,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: vec![input],
            in_channels,
            out_channels,
            prunable: false,
            is_representation: false,
        }
    }

    /// Parameter names and shapes this layer expects in a store.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let id = &self.id;
        match &self.kind {
            LayerKind::Conv { kernel, bias, .. } => {
                let mut v = vec![(
                    format!("{id}.weight"),
                    vec![self.out_channels, self.in_channels, *kernel, *kernel],
                )];
                if *bias {
                    v.push((format!("{id}.bias"), vec![self.out_channels]));
                }
                v
            }
            LayerKind::Fc { bias } => {
                let mut v = vec![(
                    format!("{id}.weight"),
                    vec![self.out_channels, self.in_channels],
                )];
                if *bias {
                    v.push((format!("{id}.bias"), vec![self.out_channels]));
                }
                v
            }
            LayerKind::Bn => ["gamma", "beta", "running_mean", "running_var"]
                .iter()
                .map(|s| (format!("{id}.{s}"), vec![self.out_channels]))
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// One output channel of a prunable layer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub layer: String,
    pub channel: usize,
}

impl ChannelId {
    pub fn new(layer: impl Into<String>, channel: usize) -> Self {
        Self {
            layer: layer.into(),
            channel,
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.layer, self.channel)
    }
}

/// Per-example activation dimensions. Flat activations are `[N, c]` tensors
/// with `h = w = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub flat: bool,
}

impl Dims {
    pub fn spatial(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            flat: false,
        }
    }

    pub fn flat(c: usize) -> Self {
        Self {
            c,
            h: 1,
            w: 1,
            flat: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn tensor_shape(&self, n: usize) -> Vec<usize> {
        if self.flat {
            vec![n, self.c]
        } else {
            vec![n, self.c, self.h, self.w]
        }
    }
}

/// Path from a prunable layer to the single layer consuming its channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelChain {
    pub producer: usize,
    /// Channel-wise layers (and at most one flatten) between producer and consumer.
    pub between: Vec<usize>,
    /// Where the channel activation is read and masked (after BN and ReLU).
    pub site: usize,
    pub consumer: usize,
    /// Input columns per channel at the consumer (`h·w` across a flatten, else 1).
    pub consumer_block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    /// `[C, H, W]` of one input example.
    pub input_shape: [usize; 3],
    pub class_count: usize,
}

impl ModelGraph {
    pub fn new(input_shape: [usize; 3], class_count: usize) -> Self {
        Self {
            layers: Vec::new(),
            input_shape,
            class_count,
        }
    }

    /// Appends a layer fed by the previous layer (or the input) and returns its node.
    pub fn push(
        &mut self,
        id: impl Into<String>,
        kind: LayerKind,
        in_channels: usize,
        out_channels: usize,
    ) -> NodeRef {
        let input = self.last_node();
        self.push_from(id, kind, vec![input], in_channels, out_channels)
    }

    pub fn push_from(
        &mut self,
        id: impl Into<String>,
        kind: LayerKind,
        inputs: Vec<NodeRef>,
        in_channels: usize,
        out_channels: usize,
    ) -> NodeRef {
        let mut spec = LayerSpec::new(id, kind, NodeRef::Input, in_channels, out_channels);
        spec.inputs = inputs;
        self.layers.push(spec);
        NodeRef::Layer(self.layers.len() - 1)
    }

    pub fn last_node(&self) -> NodeRef {
        if self.layers.is_empty() {
            NodeRef::Input
        } else {
            NodeRef::Layer(self.layers.len() - 1)
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Result<&LayerSpec> {
        self.index_of(id)
            .map(|i| &self.layers[i])
            .ok_or_else(|| Error::structural(id, "no such layer"))
    }

    pub fn input_dims(&self) -> Dims {
        let [c, h, w] = self.input_shape;
        Dims::spatial(c, h, w)
    }

    pub fn consumers(&self, node: NodeRef) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.inputs.contains(&node))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.prunable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn representation_index(&self) -> Result<usize> {
        let reps: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_representation)
            .map(|(i, _)| i)
            .collect();
        match reps.as_slice() {
            [one] => Ok(*one),
            [] => Err(Error::structural("graph", "no representation layer")),
            _ => Err(Error::structural(
                "graph",
                format!("{} representation layers, expected one", reps.len()),
            )),
        }
    }

    /// Output dimensions of every layer, in layer order.
    pub fn infer_dims(&self) -> Result<Vec<Dims>> {
        let mut dims: Vec<Dims> = Vec::with_capacity(self.layers.len());
        let input = self.input_dims();
        if input.numel() == 0 {
            return Err(Error::structural("input", "input shape has a zero dimension"));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            let fetch = |r: &NodeRef| -> Result<Dims> {
                match *r {
                    NodeRef::Input => Ok(input),
                    NodeRef::Layer(j) if j < idx => Ok(dims[j]),
                    NodeRef::Layer(j) => Err(Error::structural(
                        &layer.id,
                        format!("input edge to layer {j} is not topologically earlier"),
                    )),
                }
            };
            let expected_inputs = if layer.kind == LayerKind::ResidualAdd { 2 } else { 1 };
            if layer.inputs.len() != expected_inputs {
                return Err(Error::structural(
                    &layer.id,
                    format!("expected {expected_inputs} inputs, found {}", layer.inputs.len()),
                ));
            }
            let x = fetch(&layer.inputs[0])?;
            let fed = if x.flat { x.numel() } else { x.c };
            if matches!(layer.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. } | LayerKind::Bn)
                && layer.in_channels != fed
            {
                return Err(Error::structural(
                    &layer.id,
                    format!("declares {} input channels, receives {fed}", layer.in_channels),
                ));
            }
            if layer.kind == LayerKind::Bn && layer.out_channels != fed {
                return Err(Error::structural(&layer.id, "batch norm must keep its channel count"));
            }
            let out = match &layer.kind {
                LayerKind::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if x.flat {
                        return Err(Error::structural(&layer.id, "conv on flat input"));
                    }
                    let h = conv_out(x.h, *kernel, *stride, *padding)
                        .ok_or_else(|| Error::structural(&layer.id, "kernel larger than input"))?;
                    let w = conv_out(x.w, *kernel, *stride, *padding)
                        .ok_or_else(|| Error::structural(&layer.id, "kernel larger than input"))?;
                    Dims::spatial(layer.out_channels, h, w)
                }
                LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                    if x.flat {
                        return Err(Error::structural(&layer.id, "pooling on flat input"));
                    }
                    let h = conv_out(x.h, *kernel, *stride, 0)
                        .ok_or_else(|| Error::structural(&layer.id, "pool window larger than input"))?;
                    let w = conv_out(x.w, *kernel, *stride, 0)
                        .ok_or_else(|| Error::structural(&layer.id, "pool window larger than input"))?;
                    Dims::spatial(x.c, h, w)
                }
                LayerKind::Bn | LayerKind::Relu => x,
                LayerKind::Flatten => Dims::flat(x.numel()),
                LayerKind::Fc { .. } => {
                    if !x.flat {
                        return Err(Error::structural(&layer.id, "fc on spatial input; flatten first"));
                    }
                    Dims::flat(layer.out_channels)
                }
                LayerKind::ResidualAdd => {
                    let y = fetch(&layer.inputs[1])?;
                    if x != y {
                        return Err(Error::structural(
                            &layer.id,
                            format!("residual operands differ: {x:?} vs {y:?}"),
                        ));
                    }
                    x
                }
            };
            if out.numel() == 0 {
                return Err(Error::structural(&layer.id, "output has a zero dimension"));
            }
            dims.push(out);
        }
        Ok(dims)
    }

    pub fn output_dims(&self) -> Result<Dims> {
        Ok(self
            .infer_dims()?
            .last()
            .copied()
            .unwrap_or_else(|| self.input_dims()))
    }

    /// Follows single-consumer BN/ReLU layers after `layer` to the point where
    /// its channel activation is read.
    pub fn activation_site(&self, layer: usize) -> usize {
        let mut cur = layer;
        loop {
            let cons = self.consumers(NodeRef::Layer(cur));
            match cons.as_slice() {
                [next]
                    if matches!(self.layers[*next].kind, LayerKind::Bn | LayerKind::Relu)
                        && self.layers[*next].inputs.len() == 1 =>
                {
                    cur = *next
                }
                _ => return cur,
            }
        }
    }

    /// Resolves the channel chain of a filter-owning layer. Fails when the
    /// channels fan out, reach a residual add, or are the graph output.
    pub fn channel_chain(&self, layer: usize) -> Result<ChannelChain> {
        let spec = &self.layers[layer];
        if !spec.kind.has_filters() {
            return Err(Error::structural(&spec.id, "layer has no output filters"));
        }
        let dims = self.infer_dims()?;
        let site = self.activation_site(layer);
        let mut between = Vec::new();
        let mut cur = layer;
        let mut block = 1;
        loop {
            let cons = self.consumers(NodeRef::Layer(cur));
            let next = match cons.as_slice() {
                [one] => *one,
                [] => {
                    return Err(Error::structural(
                        &spec.id,
                        "channels reach the graph output",
                    ))
                }
                _ => {
                    return Err(Error::structural(
                        &spec.id,
                        format!("channels fan out to {} consumers", cons.len()),
                    ))
                }
            };
            let nl = &self.layers[next];
            match nl.kind {
                LayerKind::ResidualAdd => {
                    return Err(Error::structural(
                        &spec.id,
                        format!("channels are tied to residual add `{}`", nl.id),
                    ))
                }
                LayerKind::Conv { .. } | LayerKind::Fc { .. } => {
                    return Ok(ChannelChain {
                        producer: layer,
                        between,
                        site,
                        consumer: next,
                        consumer_block: block,
                    })
                }
                LayerKind::Flatten => {
                    let d = dims[cur];
                    block = d.h * d.w;
                }
                _ => {}
            }
            between.push(next);
            cur = next;
        }
    }

    /// All channels currently eligible for scoring.
    pub fn prunable_channels(&self) -> Vec<ChannelId> {
        let mut out = Vec::new();
        for i in self.prunable_layers() {
            let l = &self.layers[i];
            out.extend((0..l.out_channels).map(|c| ChannelId::new(&l.id, c)));
        }
        out
    }

    /// Checks that every channel in `set` exists on a prunable layer.
    pub fn check_channels<'a>(&self, set: impl IntoIterator<Item = &'a ChannelId>) -> Result<()> {
        for ch in set {
            let l = self.layer(&ch.layer)?;
            if !l.prunable {
                return Err(Error::structural(&ch.layer, "layer is not prunable"));
            }
            if ch.channel >= l.out_channels {
                return Err(Error::structural(
                    &ch.layer,
                    format!("channel {} out of range ({} channels)", ch.channel, l.out_channels),
                ));
            }
        }
        Ok(())
    }

    pub fn layer_ids(&self) -> BTreeSet<String> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}
