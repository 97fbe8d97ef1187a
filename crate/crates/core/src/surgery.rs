//! Physical channel removal. Producer filters, the channel-wise layers after
//! them (BN parameters and running statistics included) and the consumer's
//! input slices are dropped together, so a pruned model computes what the
//! original computes with those channels zeroed at their activation sites.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{ChannelChain, ChannelId, LayerKind, ModelGraph, NodeRef};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::{param_mismatches, CHANNEL_FLOOR};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurgeryPlan {
    pub prune: Vec<ChannelId>,
    /// Old channel index → new index, `None` when removed, per pruned layer.
    pub remaps: BTreeMap<String, Vec<Option<usize>>>,
    /// Layers touched downstream of each pruned layer, consumer last.
    pub affected: BTreeMap<String, Vec<String>>,
    chains: BTreeMap<String, ChannelChain>,
}

impl SurgeryPlan {
    pub fn is_identity(&self) -> bool {
        self.prune.is_empty()
    }

    /// Channels removed per layer.
    pub fn removed_per_layer(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for ch in &self.prune {
            *m.entry(ch.layer.clone()).or_insert(0) += 1;
        }
        m
    }
}

pub fn plan_surgery(graph: &ModelGraph, prune_set: &[ChannelId]) -> Result<SurgeryPlan> {
    graph.check_channels(prune_set)?;
    let mut by_layer: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for ch in prune_set {
        if !by_layer.entry(ch.layer.clone()).or_default().insert(ch.channel) {
            return Err(Error::structural(&ch.layer, format!("channel {} listed twice", ch.channel)));
        }
    }
    let mut plan = SurgeryPlan {
        prune: prune_set.to_vec(),
        ..Default::default()
    };
    plan.prune.sort();
    for (layer, chans) in by_layer {
        let idx = graph.index_of(&layer).expect("checked");
        let chain = graph.channel_chain(idx)?;
        let total = graph.layers[idx].out_channels;
        if total - chans.len() < CHANNEL_FLOOR {
            return Err(Error::structural(
                &layer,
                format!(
                    "removing {} of {total} channels breaches the floor of {CHANNEL_FLOOR}",
                    chans.len()
                ),
            ));
        }
        let mut next = 0;
        let remap = (0..total)
            .map(|c| {
                if chans.contains(&c) {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect();
        let affected = chain
            .between
            .iter()
            .chain([&chain.consumer])
            .map(|&i| graph.layers[i].id.clone())
            .collect();
        plan.remaps.insert(layer.clone(), remap);
        plan.affected.insert(layer.clone(), affected);
        plan.chains.insert(layer, chain);
    }
    Ok(plan)
}

fn kept(remap: &[Option<usize>]) -> Vec<usize> {
    remap
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|_| i))
        .collect()
}

/// Keeps slices `keep` along `axis`; each kept index covers `block`
/// consecutive positions of that axis.
fn select_axis<T: Scalar>(t: &Tensor<T>, axis: usize, keep: &[usize], block: usize) -> Result<Tensor<T>> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut data = Vec::with_capacity(outer * keep.len() * block * inner);
    for o in 0..outer {
        for &k in keep {
            for b in 0..block {
                let start = (o * len + k * block + b) * inner;
                data.extend_from_slice(&t.data()[start..start + inner]);
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len() * block;
    Tensor::new(new_shape, data)
}

fn check_plan(graph: &ModelGraph, plan: &SurgeryPlan) -> Result<()> {
    for (layer, remap) in &plan.remaps {
        let idx = graph
            .index_of(layer)
            .ok_or_else(|| Error::structural(layer, "plan names a layer absent from the graph"))?;
        if graph.layers[idx].out_channels != remap.len() {
            return Err(Error::structural(
                layer,
                format!(
                    "plan was made for {} channels, graph has {}",
                    remap.len(),
                    graph.layers[idx].out_channels
                ),
            ));
        }
        if graph.channel_chain(idx)? != plan.chains[layer] {
            return Err(Error::structural(layer, "plan's channel chain does not match the graph"));
        }
    }
    Ok(())
}

/// Slices every entry of `store` named after an affected layer. Entries the
/// store lacks (momentum buffers never stepped) are skipped.
pub fn slice_store<T: Scalar>(graph: &ModelGraph, store: &ParameterStore<T>, plan: &SurgeryPlan) -> Result<ParameterStore<T>> {
    check_plan(graph, plan)?;
    let mut out = store.clone();
    for (layer, remap) in &plan.remaps {
        let keep = kept(remap);
        let chain = &plan.chains[layer];
        let mut edit = |name: String, axis: usize, block: usize| -> Result<()> {
            if let Some(t) = out.remove(&name) {
                out.insert(name, select_axis(&t, axis, &keep, block)?);
            }
            Ok(())
        };
        edit(format!("{layer}.weight"), 0, 1)?;
        edit(format!("{layer}.bias"), 0, 1)?;
        for &i in &chain.between {
            let id = &graph.layers[i].id;
            if graph.layers[i].kind == LayerKind::Bn {
                for s in ["gamma", "beta", "running_mean", "running_var"] {
                    edit(format!("{id}.{s}"), 0, 1)?;
                }
            }
        }
        let consumer = &graph.layers[chain.consumer].id;
        edit(format!("{consumer}.weight"), 1, chain.consumer_block)?;
    }
    Ok(out)
}

/// New graph and parameters with the planned channels removed.
pub fn apply_surgery<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    plan: &SurgeryPlan,
) -> Result<(ModelGraph, ParameterStore<T>)> {
    let new_params = slice_store(graph, params, plan)?;
    let mut g = graph.clone();
    for (layer, remap) in &plan.remaps {
        let n = kept(remap).len();
        let chain = &plan.chains[layer];
        g.layers[chain.producer].out_channels = n;
        for &i in &chain.between {
            let l = &mut g.layers[i];
            if l.kind == LayerKind::Flatten {
                l.in_channels = n;
                l.out_channels = n * chain.consumer_block;
            } else {
                l.in_channels = n;
                l.out_channels = n;
            }
        }
        let width = n * chain.consumer_block;
        g.layers[chain.consumer].in_channels = width;
    }
    Ok((g, new_params))
}

/// Channel-chain consistency, representation uniqueness and parameter-shape
/// agreement. Violations are returned, not raised.
pub fn validate_structure<T: Scalar>(graph: &ModelGraph, params: &ParameterStore<T>) -> Vec<String> {
    let mut v = Vec::new();
    // channels each node produces, propagated from declared widths
    let mut produced: Vec<usize> = Vec::with_capacity(graph.layers.len());
    let src = |r: NodeRef, produced: &[usize]| -> Option<usize> {
        match r {
            NodeRef::Input => Some(graph.input_shape[0]),
            NodeRef::Layer(j) => produced.get(j).copied(),
        }
    };
    for (i, l) in graph.layers.iter().enumerate() {
        let from = |r: &NodeRef| match r {
            NodeRef::Input => "input".to_string(),
            NodeRef::Layer(j) => graph.layers.get(*j).map_or("?".into(), |x| x.id.clone()),
        };
        let Some(&first) = l.inputs.first() else {
            v.push(format!("{}: no inputs", l.id));
            produced.push(l.out_channels);
            continue;
        };
        if let NodeRef::Layer(j) = first {
            if j >= i {
                v.push(format!("{}: input edge is not topologically earlier", l.id));
                produced.push(l.out_channels);
                continue;
            }
        }
        let got = src(first, &produced).unwrap_or(0);
        let out = match l.kind {
            LayerKind::Conv { .. } | LayerKind::Fc { .. } | LayerKind::Bn | LayerKind::Flatten => {
                if l.in_channels != got {
                    v.push(format!(
                        "{} -> {}: producer gives {got} channels, consumer expects {}",
                        from(&first),
                        l.id,
                        l.in_channels
                    ));
                }
                if l.kind == LayerKind::Bn && l.out_channels != l.in_channels {
                    v.push(format!("{}: batch norm changes channel count", l.id));
                }
                l.out_channels
            }
            LayerKind::ResidualAdd => {
                match l.inputs.get(1).and_then(|r| src(*r, &produced)) {
                    Some(other) if other == got => {}
                    Some(other) => v.push(format!(
                        "{} + {} -> {}: operands have {got} and {other} channels",
                        from(&first),
                        from(&l.inputs[1]),
                        l.id
                    )),
                    None => v.push(format!("{}: residual add needs two inputs", l.id)),
                }
                got
            }
            _ => got,
        };
        produced.push(out);
    }
    if let Err(e) = graph.representation_index() {
        v.push(e.to_string());
    }
    v.extend(param_mismatches(graph, params));
    if v.is_empty() {
        if let Err(e) = graph.infer_dims() {
            v.push(e.to_string());
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_small_vgg, init_params};

    fn two_convs() -> ModelGraph {
        let mut g = ModelGraph::new([3, 4, 4], 2);
        g.push(
            "a",
            LayerKind::Conv {
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: true,
            },
            3,
            8,
        );
        g.layers[0].prunable = true;
        g.push("a_bn", LayerKind::Bn, 8, 8);
        g.push(
            "b",
            LayerKind::Conv {
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: true,
            },
            8,
            4,
        );
        g.push("flat", LayerKind::Flatten, 4, 64);
        g.push("fc", LayerKind::Fc { bias: true }, 64, 2);
        g.layers[4].is_representation = true;
        g
    }

    #[test]
    fn empty_plan_is_identity() {
        let g = two_convs();
        let p = init_params::<f64>(&g, 0).unwrap();
        let plan = plan_surgery(&g, &[]).unwrap();
        assert!(plan.is_identity());
        let (g2, p2) = apply_surgery(&g, &p, &plan).unwrap();
        assert_eq!(g, g2);
        assert_eq!(p, p2);
    }

    #[test]
    fn conv_to_conv_bookkeeping() {
        let g = two_convs();
        let p = init_params::<f64>(&g, 0).unwrap();
        let plan = plan_surgery(&g, &[ChannelId::new("a", 3)]).unwrap();
        assert_eq!(plan.affected["a"], vec!["a_bn", "b"]);
        let (g2, p2) = apply_surgery(&g, &p, &plan).unwrap();
        assert_eq!(g2.layer("a").unwrap().out_channels, 7);
        assert_eq!(g2.layer("b").unwrap().in_channels, 7);
        assert_eq!(p2.get("a_bn.running_var").unwrap().len(), 7);
        assert_eq!(p2.get("b.weight").unwrap().shape(), &[4, 7, 3, 3]);
        assert_eq!(
            p2.get("a.weight").unwrap().data()[..27 * 3],
            p.get("a.weight").unwrap().data()[..27 * 3]
        );
        assert_eq!(
            p2.get("a.weight").unwrap().data()[27 * 3..],
            p.get("a.weight").unwrap().data()[27 * 4..]
        );
        assert!(validate_structure(&g2, &p2).is_empty());
    }

    #[test]
    fn flatten_drops_block_of_columns() {
        let mut g = ModelGraph::new([1, 2, 2], 2);
        g.push(
            "c",
            LayerKind::Conv {
                kernel: 1,
                stride: 1,
                padding: 0,
                bias: true,
            },
            1,
            4,
        );
        g.layers[0].prunable = true;
        g.push("flat", LayerKind::Flatten, 4, 16);
        g.push("fc", LayerKind::Fc { bias: true }, 16, 3);
        g.layers[2].is_representation = true;
        let p = init_params::<f64>(&g, 0).unwrap();
        let plan = plan_surgery(&g, &[ChannelId::new("c", 1)]).unwrap();
        let (g2, p2) = apply_surgery(&g, &p, &plan).unwrap();
        assert_eq!(g2.layer("fc").unwrap().in_channels, 12);
        let w = p.get("fc.weight").unwrap().data();
        let w2 = p2.get("fc.weight").unwrap().data();
        assert_eq!(&w2[..4], &w[..4]);
        assert_eq!(&w2[4..12], &w[8..16]);
    }

    #[test]
    fn residual_outer_channels_rejected() {
        let g = crate::zoo::build_small_resnet(&[(8, 4)], 2, [3, 8, 8]).unwrap();
        let mut g2 = g.clone();
        let i = g2.index_of("block1.conv3").unwrap();
        g2.layers[i].prunable = true;
        assert!(matches!(
            plan_surgery(&g2, &[ChannelId::new("block1.conv3", 0)]),
            Err(Error::Structural { .. })
        ));
    }

    #[test]
    fn floor_is_enforced() {
        let g = two_convs();
        let set: Vec<_> = (0..7).map(|c| ChannelId::new("a", c)).collect();
        assert!(plan_surgery(&g, &set).is_err());
    }

    #[test]
    fn stale_plan_rejected() {
        let g = two_convs();
        let p = init_params::<f64>(&g, 0).unwrap();
        let plan = plan_surgery(&g, &[ChannelId::new("a", 0)]).unwrap();
        let (g2, p2) = apply_surgery(&g, &p, &plan).unwrap();
        assert!(apply_surgery(&g2, &p2, &plan).is_err());
    }

    #[test]
    fn corrupted_in_channels_reported() {
        let mut g = build_small_vgg(&[8, 8], &[8, 8], 2, [3, 8, 8]).unwrap();
        let p = init_params::<f64>(&g, 0).unwrap();
        assert!(validate_structure(&g, &p).is_empty());
        let i = g.index_of("conv2").unwrap();
        g.layers[i].in_channels = 7;
        let v = validate_structure(&g, &p);
        assert!(v.iter().any(|m| m.contains("relu1 -> conv2") || m.contains("pool1 -> conv2")), "{v:?}");
    }
}
