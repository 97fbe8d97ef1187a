//! Small VGG- and ResNet-style classification graphs with prunability flags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, NodeRef};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Minimum channels any prunable layer keeps.
pub const CHANNEL_FLOOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SmallVgg,
    SmallResnet,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-vgg" => Ok(Self::SmallVgg),
            "small-resnet" => Ok(Self::SmallResnet),
            other => Err(Error::config(format!(
                "unknown architecture `{other}` (expected small-vgg or small-resnet)"
            ))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SmallVgg => "small-vgg",
            Self::SmallResnet => "small-resnet",
        })
    }
}

/// Shape knobs for either architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: Architecture,
    /// Conv widths per VGG block.
    pub channel_plan: Vec<usize>,
    pub fc_widths: Vec<usize>,
    /// `(outer, inner)` per bottleneck.
    pub block_plan: Vec<(usize, usize)>,
}

impl ArchSpec {
    pub fn default_for(arch: Architecture) -> Self {
        Self {
            arch,
            channel_plan: vec![16, 32, 32],
            fc_widths: vec![32, 32],
            block_plan: vec![(16, 8), (32, 16)],
        }
    }

    pub fn build(&self, class_count: usize, input_shape: [usize; 3]) -> Result<ModelGraph> {
        match self.arch {
            Architecture::SmallVgg => {
                build_small_vgg(&self.channel_plan, &self.fc_widths, class_count, input_shape)
            }
            Architecture::SmallResnet => build_small_resnet(&self.block_plan, class_count, input_shape),
        }
    }
}

fn conv(k: usize, pad: usize, bias: bool) -> LayerKind {
    LayerKind::Conv {
        kernel: k,
        stride: 1,
        padding: pad,
        bias,
    }
}

fn check_common(class_count: usize, input_shape: [usize; 3]) -> Result<()> {
    if class_count < 2 {
        return Err(Error::config(format!("class count must be at least 2, got {class_count}")));
    }
    if input_shape.contains(&0) {
        return Err(Error::config("input shape has a zero dimension"));
    }
    Ok(())
}

/// conv3×3 → BN → ReLU → max-pool per plan entry, then the FC stack and a
/// classifier head. Every conv and the first FC are prunable; the second FC
/// is the representation layer.
pub fn build_small_vgg(
    channel_plan: &[usize],
    fc_widths: &[usize],
    class_count: usize,
    input_shape: [usize; 3],
) -> Result<ModelGraph> {
    check_common(class_count, input_shape)?;
    if channel_plan.is_empty() {
        return Err(Error::config("channel plan is empty"));
    }
    if fc_widths.len() < 2 {
        return Err(Error::config("small-vgg needs at least two FC widths"));
    }
    if channel_plan.iter().chain(fc_widths).any(|&c| c < CHANNEL_FLOOR) {
        return Err(Error::config(format!(
            "every layer needs at least {CHANNEL_FLOOR} channels"
        )));
    }
    let mut g = ModelGraph::new(input_shape, class_count);
    let (mut c, mut h, mut w) = (input_shape[0], input_shape[1], input_shape[2]);
    for (i, &out) in channel_plan.iter().enumerate() {
        let b = i + 1;
        g.push(format!("conv{b}"), conv(3, 1, false), c, out);
        let last = g.layers.len() - 1;
        g.layers[last].prunable = true;
        g.push(format!("bn{b}"), LayerKind::Bn, out, out);
        g.push(format!("relu{b}"), LayerKind::Relu, out, out);
        if h >= 2 && w >= 2 {
            g.push(format!("pool{b}"), LayerKind::MaxPool { kernel: 2, stride: 2 }, out, out);
            h /= 2;
            w /= 2;
        }
        c = out;
    }
    let mut width = c * h * w;
    g.push("flatten", LayerKind::Flatten, c, width);
    for (i, &out) in fc_widths.iter().enumerate() {
        let b = i + 1;
        g.push(format!("fc{b}"), LayerKind::Fc { bias: true }, width, out);
        let last = g.layers.len() - 1;
        g.layers[last].prunable = i == 0;
        g.layers[last].is_representation = i == 1;
        g.push(format!("fc{b}_relu"), LayerKind::Relu, out, out);
        width = out;
    }
    g.push("classifier", LayerKind::Fc { bias: true }, width, class_count);
    g.infer_dims()?;
    Ok(g)
}

/// Stem conv → BN → ReLU → max-pool, bottleneck blocks, global average pool
/// and a single FC head (the representation layer). Only the inner 1×1 and
/// 3×3 convs of each block are prunable.
pub fn build_small_resnet(
    block_plan: &[(usize, usize)],
    class_count: usize,
    input_shape: [usize; 3],
) -> Result<ModelGraph> {
    check_common(class_count, input_shape)?;
    if block_plan.is_empty() {
        return Err(Error::config("block plan is empty"));
    }
    if input_shape[1] != input_shape[2] {
        return Err(Error::config("small-resnet expects square inputs"));
    }
    for &(outer, inner) in block_plan {
        if inner < CHANNEL_FLOOR {
            return Err(Error::config(format!(
                "bottleneck inner width {inner} is below the floor of {CHANNEL_FLOOR}"
            )));
        }
        if outer == 0 {
            return Err(Error::config("bottleneck outer width must be positive"));
        }
    }
    let mut g = ModelGraph::new(input_shape, class_count);
    let stem = block_plan[0].0;
    g.push("stem.conv", conv(3, 1, false), input_shape[0], stem);
    g.push("stem.bn", LayerKind::Bn, stem, stem);
    g.push("stem.relu", LayerKind::Relu, stem, stem);
    let mut h = input_shape[1];
    if h >= 2 {
        g.push("stem.pool", LayerKind::MaxPool { kernel: 2, stride: 2 }, stem, stem);
        h /= 2;
    }
    let mut c = stem;
    for (i, &(outer, inner)) in block_plan.iter().enumerate() {
        let p = format!("block{}", i + 1);
        let block_in = g.last_node();
        g.push(format!("{p}.conv1"), conv(1, 0, false), c, inner);
        let l = g.layers.len() - 1;
        g.layers[l].prunable = true;
        g.push(format!("{p}.bn1"), LayerKind::Bn, inner, inner);
        g.push(format!("{p}.relu1"), LayerKind::Relu, inner, inner);
        g.push(format!("{p}.conv2"), conv(3, 1, false), inner, inner);
        let l = g.layers.len() - 1;
        g.layers[l].prunable = true;
        g.push(format!("{p}.bn2"), LayerKind::Bn, inner, inner);
        g.push(format!("{p}.relu2"), LayerKind::Relu, inner, inner);
        g.push(format!("{p}.conv3"), conv(1, 0, false), inner, outer);
        let main = g.push(format!("{p}.bn3"), LayerKind::Bn, outer, outer);
        let skip = if outer == c {
            block_in
        } else {
            g.push_from(format!("{p}.proj"), conv(1, 0, false), vec![block_in], c, outer);
            g.push(format!("{p}.proj_bn"), LayerKind::Bn, outer, outer)
        };
        g.push_from(format!("{p}.add"), LayerKind::ResidualAdd, vec![main, skip], outer, outer);
        g.push(format!("{p}.relu"), LayerKind::Relu, outer, outer);
        c = outer;
    }
    g.push("avgpool", LayerKind::AvgPool { kernel: h, stride: h }, c, c);
    g.push("flatten", LayerKind::Flatten, c, c);
    g.push("fc", LayerKind::Fc { bias: true }, c, class_count);
    let l = g.layers.len() - 1;
    g.layers[l].is_representation = true;
    g.infer_dims()?;
    Ok(g)
}

/// Two prunable convs with ReLU, global average pooling and a linear head
/// (the representation layer). No batch norm, so channel effects are easy to
/// reason about.
pub fn build_two_conv(c1: usize, c2: usize, class_count: usize, input_shape: [usize; 3]) -> Result<ModelGraph> {
    check_common(class_count, input_shape)?;
    if c1 < CHANNEL_FLOOR || c2 < CHANNEL_FLOOR {
        return Err(Error::config("toy conv widths must be at least 2"));
    }
    let mut g = ModelGraph::new(input_shape, class_count);
    g.push("conv1", conv(3, 1, true), input_shape[0], c1);
    g.layers[0].prunable = true;
    g.push("relu1", LayerKind::Relu, c1, c1);
    g.push("conv2", conv(3, 1, true), c1, c2);
    g.layers[2].prunable = true;
    g.push("relu2", LayerKind::Relu, c2, c2);
    let h = input_shape[1].min(input_shape[2]);
    g.push("avgpool", LayerKind::AvgPool { kernel: h, stride: h }, c2, c2);
    let d = g.infer_dims()?;
    let flat = d[4].numel();
    g.push("flatten", LayerKind::Flatten, c2, flat);
    g.push("fc", LayerKind::Fc { bias: true }, flat, class_count);
    g.layers[6].is_representation = true;
    g.infer_dims()?;
    Ok(g)
}

/// Kaiming-normal weights, zero biases, unit BN scale, fresh running stats.
/// Values are drawn in f64 so both numeric profiles start from the same point.
pub fn init_params<T: Scalar>(graph: &ModelGraph, seed: u64) -> Result<ParameterStore<T>> {
    graph.infer_dims()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for layer in &graph.layers {
        for (name, shape) in layer.param_shapes() {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                vec![1.0; len]
            } else {
                vec![0.0; len]
            };
            let t = Tensor::new(shape, data.into_iter().map(T::from_f64_lossy).collect())?;
            store.insert(name, t);
        }
    }
    Ok(store)
}

/// Names of every parameter the graph references that the store lacks, and
/// every store entry the graph does not reference.
pub fn param_mismatches<T: Scalar>(graph: &ModelGraph, params: &ParameterStore<T>) -> Vec<String> {
    let mut out = Vec::new();
    let mut wanted = std::collections::BTreeSet::new();
    for layer in &graph.layers {
        for (name, shape) in layer.param_shapes() {
            match params.get(&name) {
                Ok(t) if t.shape() == shape.as_slice() => {}
                Ok(t) => out.push(format!("{name}: shape {:?}, expected {:?}", t.shape(), shape)),
                Err(_) => out.push(format!("{name}: missing")),
            }
            wanted.insert(name);
        }
    }
    for name in params.names() {
        if !wanted.contains(&name) {
            out.push(format!("{name}: not referenced by the graph"));
        }
    }
    out
}

/// Node feeding `layer`'s first input; convenient for tests.
pub fn input_of(graph: &ModelGraph, layer: &str) -> Result<NodeRef> {
    Ok(graph.layer(layer)?.inputs[0])
}
