//! FLOPs and parameter counting, accuracy evaluation, and report files.
//!
//! A multiply-accumulate counts as one FLOP. Conv layers contribute
//! `H_out·W_out·C_in·K²·C_out` (bias ignored), FC layers `in·out`; BN, ReLU
//! and pooling are free. FC FLOPs are kept separately in [`FlopCount`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{forward_pass, ForwardOptions};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, NodeRef};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopCount {
    pub conv: u64,
    pub fc: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.conv + self.fc
    }
}

pub fn count_flops_split(graph: &ModelGraph) -> Result<FlopCount> {
    let dims = graph.infer_dims()?;
    let mut out = FlopCount::default();
    for (i, l) in graph.layers.iter().enumerate() {
        let input = match l.inputs[0] {
            NodeRef::Input => graph.input_dims(),
            NodeRef::Layer(j) => dims[j],
        };
        match l.kind {
            LayerKind::Conv { kernel, .. } => {
                let d = dims[i];
                out.conv += (d.h * d.w * input.c * kernel * kernel * d.c) as u64;
            }
            LayerKind::Fc { .. } => out.fc += (input.c * dims[i].c) as u64,
            _ => {}
        }
    }
    Ok(out)
}

/// Conv plus FC FLOPs.
pub fn count_flops(graph: &ModelGraph) -> Result<u64> {
    Ok(count_flops_split(graph)?.total())
}

/// Conv/FC weights and biases plus BN scale and shift; running statistics
/// are buffers and not counted.
pub fn count_params<T: Scalar>(graph: &ModelGraph, params: &ParameterStore<T>) -> Result<u64> {
    let mut n = 0u64;
    for l in &graph.layers {
        for (name, shape) in l.param_shapes() {
            if name.ends_with(".running_mean") || name.ends_with(".running_var") {
                continue;
            }
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::structural(
                    &l.id,
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            n += t.len() as u64;
        }
    }
    Ok(n)
}

/// Argmax accuracy with running BN statistics, evaluated in chunks.
pub fn evaluate_accuracy<T: Scalar>(
    graph: &ModelGraph,
    params: &ParameterStore<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::config("accuracy over an empty split"));
    }
    if images.batch() != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.batch(),
            labels.len()
        )));
    }
    let preds = predict(graph, params, images)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn predict<T: Scalar>(graph: &ModelGraph, params: &ParameterStore<T>, images: &Tensor<T>) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let n = images.batch();
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = images.slice_rows(start, end);
        let trace = forward_pass(graph, params, &x, ForwardOptions::eval())?;
        let logits = trace.output();
        let c = logits.row_len();
        for row in logits.data().chunks_exact(c) {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            preds.push(best);
        }
        start = end;
    }
    Ok(preds)
}

/// One CSV row per pruning iteration; iteration 0 may describe the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub iteration: usize,
    pub flops: u64,
    pub flops_down: f64,
    pub params: u64,
    pub params_down: f64,
    pub target_acc: f64,
    pub beta: f64,
    /// JSON object mapping layer id to channels removed in this iteration.
    pub removed_json: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWidth {
    pub layer: String,
    pub baseline: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub baseline_flops: u64,
    pub baseline_params: u64,
    pub baseline_acc: f64,
    pub rows: Vec<ReportRow>,
    /// Accuracy on the target validation split after the long fine-tune.
    pub final_acc: Option<f64>,
    pub final_flops: FlopCount,
    pub final_params: u64,
    pub layer_widths: Vec<LayerWidth>,
    /// Channel-floor truncations, one line each.
    pub truncations: Vec<String>,
}

impl PruneReport {
    pub fn new(method: &str, seed: u64, config_hash: &str, baseline_flops: u64, baseline_params: u64) -> Self {
        Self {
            method: method.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            baseline_flops,
            baseline_params,
            baseline_acc: f64::NAN,
            rows: Vec::new(),
            final_acc: None,
            final_flops: FlopCount::default(),
            final_params: baseline_params,
            layer_widths: Vec::new(),
            truncations: Vec::new(),
        }
    }

    /// Appends a row with reductions computed against the stored baselines.
    pub fn push_row(
        &mut self,
        iteration: usize,
        flops: u64,
        params: u64,
        target_acc: f64,
        beta: f64,
        removed: &BTreeMap<String, usize>,
    ) -> Result<()> {
        self.rows.push(ReportRow {
            iteration,
            flops,
            flops_down: reduction(flops, self.baseline_flops),
            params,
            params_down: reduction(params, self.baseline_params),
            target_acc,
            beta,
            removed_json: serde_json::to_string(removed)?,
        });
        Ok(())
    }

    pub fn final_flops_down(&self) -> f64 {
        reduction(self.final_flops.total(), self.baseline_flops)
    }

    pub fn final_params_down(&self) -> f64 {
        reduction(self.final_params, self.baseline_params)
    }
}

/// `1 − current/baseline`.
pub fn reduction(current: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - current as f64 / baseline as f64
    }
}

pub fn layer_widths(baseline: &ModelGraph, current: &ModelGraph) -> Vec<LayerWidth> {
    baseline
        .prunable_layers()
        .into_iter()
        .map(|i| {
            let l = &baseline.layers[i];
            LayerWidth {
                layer: l.id.clone(),
                baseline: l.out_channels,
                remaining: current.layer(&l.id).map_or(0, |c| c.out_channels),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportFormats {
    pub csv: bool,
    pub json: bool,
    pub plot: bool,
}

impl ReportFormats {
    pub fn all() -> Self {
        Self {
            csv: true,
            json: true,
            plot: true,
        }
    }
}

/// Full-scale reference point shipped as a non-reproduced annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAnnotation {
    pub setting: String,
    pub baseline_acc: f64,
    pub flops_down: f64,
    pub acc: f64,
    pub params_down: f64,
    pub reproduced: bool,
}

pub fn reference_annotation() -> ReferenceAnnotation {
    ReferenceAnnotation {
        setting: "VGG16-based, A->W, full scale".into(),
        baseline_acc: 0.740,
        flops_down: 0.26,
        acc: 0.761,
        params_down: 0.368,
        reproduced: false,
    }
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    method: &'a str,
    seed: u64,
    config_hash: &'a str,
    iterations: usize,
    baseline_flops: u64,
    baseline_params: u64,
    baseline_acc: f64,
    final_flops: u64,
    final_conv_flops: u64,
    final_fc_flops: u64,
    final_params: u64,
    flops_down: f64,
    params_down: f64,
    final_acc: Option<f64>,
    flops_convention: &'static str,
    layer_widths: &'a [LayerWidth],
    truncations: &'a [String],
    reference: ReferenceAnnotation,
}

#[derive(Debug, Serialize)]
struct PlotPoint {
    series: &'static str,
    x: String,
    y: f64,
}

pub fn write_report_csv<W: std::io::Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record([
        "iteration",
        "flops",
        "flops_down",
        "params",
        "params_down",
        "target_acc",
        "beta",
        "removed_json",
    ])?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_report_csv<R: std::io::Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| Ok(row?)).collect()
}

/// Writes `report.csv`, `summary.json` and `plot.csv` (accuracy against
/// FLOPs reduction, then surviving channels per layer) into `dir`.
pub fn emit_report(report: &PruneReport, dir: impl AsRef<Path>, formats: ReportFormats) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.csv {
        let p = dir.join("report.csv");
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &report.rows)?;
        fs::write(&p, buf)?;
        written.push(p);
    }
    if formats.json {
        let p = dir.join("summary.json");
        let s = Summary {
            method: &report.method,
            seed: report.seed,
            config_hash: &report.config_hash,
            iterations: report.rows.iter().filter(|r| r.iteration > 0).count(),
            baseline_flops: report.baseline_flops,
            baseline_params: report.baseline_params,
            baseline_acc: report.baseline_acc,
            final_flops: report.final_flops.total(),
            final_conv_flops: report.final_flops.conv,
            final_fc_flops: report.final_flops.fc,
            final_params: report.final_params,
            flops_down: report.final_flops_down(),
            params_down: report.final_params_down(),
            final_acc: report.final_acc,
            flops_convention: "one multiply-accumulate = one FLOP; conv and FC layers included",
            layer_widths: &report.layer_widths,
            truncations: &report.truncations,
            reference: reference_annotation(),
        };
        fs::write(&p, serde_json::to_string_pretty(&s)?)?;
        written.push(p);
    }
    if formats.plot {
        let p = dir.join("plot.csv");
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for r in &report.rows {
            wtr.serialize(PlotPoint {
                series: "accuracy_vs_flops_down",
                x: format!("{}", r.flops_down),
                y: r.target_acc,
            })?;
        }
        for lw in &report.layer_widths {
            wtr.serialize(PlotPoint {
                series: "surviving_channels",
                x: lw.layer.clone(),
                y: lw.remaining as f64,
            })?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        fs::write(&p, bytes)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_small_vgg, init_params};

    fn one_conv(bias: bool) -> ModelGraph {
        let mut g = ModelGraph::new([3, 8, 8], 2);
        g.push(
            "conv",
            LayerKind::Conv {
                kernel: 3,
                stride: 1,
                padding: 1,
                bias,
            },
            3,
            16,
        );
        g
    }

    #[test]
    fn documented_conv_flops() {
        assert_eq!(count_flops(&one_conv(true)).unwrap(), 27_648);
    }

    #[test]
    fn documented_conv_params() {
        let g = one_conv(true);
        let p = init_params::<f32>(&g, 0).unwrap();
        assert_eq!(count_params(&g, &p).unwrap(), 448);
    }

    #[test]
    fn no_conv_or_fc_means_zero() {
        let mut g = ModelGraph::new([3, 8, 8], 2);
        g.push("relu", LayerKind::Relu, 3, 3);
        assert_eq!(count_flops(&g).unwrap(), 0);
        let empty = ModelGraph::new([3, 8, 8], 2);
        assert_eq!(count_params(&empty, &ParameterStore::<f32>::new()).unwrap(), 0);
    }

    #[test]
    fn missing_parameter_is_structural() {
        let g = one_conv(true);
        assert!(matches!(
            count_params(&g, &ParameterStore::<f32>::new()),
            Err(Error::Structural { .. })
        ));
    }

    #[test]
    fn constant_predictor_on_balanced_split() {
        let g = build_small_vgg(&[4], &[4, 4], 4, [1, 4, 4]).unwrap();
        let mut p = init_params::<f32>(&g, 0).unwrap();
        for (name, t) in p.iter_mut() {
            if name.starts_with("classifier") {
                t.data_mut().fill(0.0);
            }
        }
        p.get_mut("classifier.bias").unwrap().data_mut()[2] = 1.0;
        let x = Tensor::full(vec![8, 1, 4, 4], 0.5);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        assert_eq!(evaluate_accuracy(&g, &p, &x, &labels).unwrap(), 0.25);
        assert!(evaluate_accuracy(&g, &p, &x.slice_rows(0, 0), &[]).unwrap_err().is_config());
    }

    #[test]
    fn csv_round_trip_and_single_row() {
        let mut r = PruneReport::new("tcp", 1, "abc", 1000, 100);
        r.push_row(1, 900, 95, 0.5, 0.1, &[("conv1".to_string(), 2)].into()).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &r.rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("iteration,flops,flops_down,params,params_down,target_acc,beta,removed_json"));
        assert_eq!(read_report_csv(&buf[..]).unwrap(), r.rows);
        assert!((r.rows[0].flops_down - 0.1).abs() < 1e-15);
    }

    #[test]
    fn empty_report_writes_header_only() {
        let r = PruneReport::new("random", 0, "", 10, 10);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&r, dir.path(), ReportFormats::all()).unwrap();
        assert_eq!(files.len(), 3);
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }

    #[test]
    fn reference_annotation_values() {
        let a = reference_annotation();
        assert_eq!((a.baseline_acc, a.acc, a.flops_down, a.params_down), (0.740, 0.761, 0.26, 0.368));
        assert!(!a.reproduced);
    }
}
