//! Synthetic domain pairs, the `TCPT` tensor file format, and batching with
//! augmentation.
//!
//! Target labels live behind [`TargetDomain::audited_labels`]; training and
//! scoring code only ever sees [`TargetDomain::images`].

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ByteCursor;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"TCPT";
pub const TENSOR_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Covariate shift applied to the target domain. All zeros (and unit gains)
/// is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftParams {
    /// Added to every pixel, in [-0.5, 0.5].
    pub brightness: f64,
    /// Multiplies deviations from 0.5, in [0.25, 4].
    pub contrast: f64,
    /// Per-channel gains, each in [0.25, 4].
    pub color_gain: [f64; 3],
    /// Orientation offset in degrees, in [-45, 45].
    pub rotation_deg: f64,
    /// Standard deviation of extra Gaussian pixel noise, in [0, 1].
    pub noise: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftParams {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            color_gain: [1.0; 3],
            rotation_deg: 0.0,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64, lo: f64, hi: f64| -> Result<()> {
            if !(lo..=hi).contains(&v) {
                Err(Error::config(format!("shift {what} = {v} outside [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        bad("brightness", self.brightness, -0.5, 0.5)?;
        bad("contrast", self.contrast, 0.25, 4.0)?;
        for g in self.color_gain {
            bad("color gain", g, 0.25, 4.0)?;
        }
        bad("rotation", self.rotation_deg, -45.0, 45.0)?;
        bad("noise", self.noise, 0.0, 1.0)
    }
}

/// Parameters of the oriented-grating generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_source: usize,
    pub n_target: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub shift: ShiftParams,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_source: 2000,
            n_target: 2000,
            classes: 4,
            channels: 3,
            size: 16,
            shift: ShiftParams {
                brightness: 0.15,
                contrast: 0.6,
                color_gain: [1.3, 0.7, 1.0],
                rotation_deg: 8.0,
                noise: 0.15,
            },
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.n_source == 0 || self.n_target == 0 || self.size == 0 {
            return Err(Error::config("synthetic domain sizes must be positive"));
        }
        if !(1..=3).contains(&self.channels) {
            return Err(Error::config("synthetic images have 1 to 3 channels"));
        }
        self.shift.validate()
    }

    /// Parses `key=value` pairs separated by commas, e.g.
    /// `classes=4,n_source=500,size=16,rotation=10,seed=3`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = Self::default();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("generator spec entry `{part}` lacks `=`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::config(format!("generator spec `{k}`: `{v}` is not a number")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| Error::config(format!("generator spec `{k}`: `{v}` is not an integer")))
            };
            match k {
                "n_source" => spec.n_source = int(v)?,
                "n_target" => spec.n_target = int(v)?,
                "n" => {
                    spec.n_source = int(v)?;
                    spec.n_target = spec.n_source;
                }
                "classes" => spec.classes = int(v)?,
                "channels" => spec.channels = int(v)?,
                "size" => spec.size = int(v)?,
                "seed" => spec.seed = int(v)? as u64,
                "brightness" => spec.shift.brightness = num(v)?,
                "contrast" => spec.shift.contrast = num(v)?,
                "rotation" => spec.shift.rotation_deg = num(v)?,
                "noise" => spec.shift.noise = num(v)?,
                "gain_r" => spec.shift.color_gain[0] = num(v)?,
                "gain_g" => spec.shift.color_gain[1] = num(v)?,
                "gain_b" => spec.shift.color_gain[2] = num(v)?,
                "shift" if v == "none" => spec.shift = ShiftParams::identity(),
                _ => return Err(Error::config(format!("unknown generator spec key `{k}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Images with labels visible to training code.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

static LABEL_READS: AtomicUsize = AtomicUsize::new(0);

/// Number of audited target-label reads in this process.
pub fn audited_label_reads() -> usize {
    LABEL_READS.load(Ordering::Relaxed)
}

/// Target images whose labels are only reachable through an audited call.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDomain {
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
}

impl TargetDomain {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            LabeledSet::new(images.clone(), l.clone())?;
        }
        Ok(Self { images, labels })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Ground-truth labels for evaluation; every call is logged and counted.
    pub fn audited_labels(&self, purpose: &str) -> Result<&[usize]> {
        LABEL_READS.fetch_add(1, Ordering::Relaxed);
        log::info!("target labels read for {purpose}");
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data("target domain carries no evaluation labels".into()))
    }

    /// Splits off a labeled validation subset (`fraction` of the examples,
    /// chosen by `seed`); the remainder stays unlabeled for training.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(TargetDomain, LabeledSet)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::config(format!("validation fraction {fraction} outside (0, 1)")));
        }
        let labels = self.audited_labels("validation split")?;
        let n = self.len();
        let k = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val, rest) = idx.split_at(k);
        let (mut val, mut rest) = (val.to_vec(), rest.to_vec());
        val.sort_unstable();
        rest.sort_unstable();
        let train = TargetDomain {
            images: self.images.select_rows(&rest),
            labels: None,
        };
        let vset = LabeledSet::new(
            self.images.select_rows(&val),
            val.iter().map(|&i| labels[i]).collect(),
        )?;
        Ok((train, vset))
    }

    /// Copy whose images went through `f`; labels carried along.
    pub fn map_images(&self, f: impl FnOnce(&Tensor<f32>) -> Tensor<f32>) -> Self {
        Self {
            images: f(&self.images),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: LabeledSet,
    pub target: TargetDomain,
    pub class_count: usize,
    pub provenance: String,
}

impl DomainPair {
    pub fn new(source: LabeledSet, target: TargetDomain, class_count: usize, provenance: String) -> Result<Self> {
        if source.images.shape()[1..] != target.images.shape()[1..] {
            return Err(Error::Data(format!(
                "source images {:?} and target images {:?} differ in shape",
                &source.images.shape()[1..],
                &target.images.shape()[1..]
            )));
        }
        if class_count < 2 {
            return Err(Error::config("a domain pair needs at least 2 classes"));
        }
        if let Some(&bad) = source.labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("source label {bad} out of range")));
        }
        Ok(Self {
            source,
            target,
            class_count,
            provenance,
        })
    }

    /// `[C, H, W]` of one example.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.source.images.shape();
        [s[1], s[2], s[3]]
    }
}

fn grating(
    rng: &mut ChaCha8Rng,
    label: usize,
    spec: &SyntheticSpec,
    shift: &ShiftParams,
    out: &mut Vec<f32>,
) {
    let n = spec.size;
    // unsigned orientation with a random sign, so mirror images share a class
    let spread = if spec.classes > 1 { (spec.classes - 1) as f64 } else { 1.0 };
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let theta = sign * (0.5 * PI * label as f64 / spread + rng.random_range(-0.06..0.06))
        + shift.rotation_deg.to_radians();
    let period = rng.random_range(3.5..6.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
    let base_noise = Normal::new(0.0, 0.04).expect("valid");
    let extra = Normal::new(0.0, shift.noise.max(1e-12)).expect("valid");
    let (s, c) = theta.sin_cos();
    let mid = (n as f64 - 1.0) / 2.0;
    let start = out.len();
    out.resize(start + spec.channels * n * n, 0.0);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - mid, y as f64 - mid);
            // distance across the stripes
            let v = -dx * s + dy * c;
            let t = 0.5 + 0.5 * (2.0 * PI * v / period + phase).cos();
            for ch in 0..spec.channels {
                let mut p = bg[ch] + (fg[ch] - bg[ch]) * t;
                p = 0.5 + (p - 0.5) * shift.contrast;
                p = p * shift.color_gain[ch] + shift.brightness;
                p += base_noise.sample(rng);
                if shift.noise > 0.0 {
                    p += extra.sample(rng);
                }
                out[start + (ch * n + y) * n + x] = p as f32;
            }
        }
    }
}

fn generate_domain(spec: &SyntheticSpec, n: usize, shift: &ShiftParams, stream: u64) -> Result<LabeledSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut data = Vec::with_capacity(n * spec.channels * spec.size * spec.size);
    let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    for &l in &labels {
        grating(&mut rng, l, spec, shift, &mut data);
    }
    LabeledSet::new(
        Tensor::new(vec![n, spec.channels, spec.size, spec.size], data)?,
        labels,
    )
}

/// Oriented gratings whose orientation encodes the class. The target domain
/// applies `spec.shift` on top of the same label-conditional geometry.
pub fn generate_synthetic_domains(spec: &SyntheticSpec) -> Result<DomainPair> {
    spec.validate()?;
    let source = generate_domain(spec, spec.n_source, &ShiftParams::identity(), 1)?;
    let target = generate_domain(spec, spec.n_target, &spec.shift, 2)?;
    let provenance = format!(
        "synthetic:gratings seed={} classes={} n_source={} n_target={} size={}",
        spec.seed, spec.classes, spec.n_source, spec.n_target, spec.size
    );
    DomainPair::new(
        source,
        TargetDomain::new(target.images, Some(target.labels))?,
        spec.classes,
        provenance,
    )
}

/// Serializes a tensor in the `TCPT` layout.
pub fn write_tensor<W: Write>(mut w: W, t: &Tensor<f32>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Data("tensor rank exceeds 255".into()));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cur = ByteCursor::new(bytes);
    if cur.take(4)? != TENSOR_MAGIC {
        return Err(Error::format(0, "bad magic, expected TCPT"));
    }
    let version = cur.u16()?;
    if version != TENSOR_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dtype = cur.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(6, format!("unsupported dtype {dtype}")));
    }
    let rank = cur.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = cur.offset();
        let d = usize::try_from(cur.u64()?).map_err(|_| Error::format(at, "dimension exceeds usize"))?;
        dims.push(d);
    }
    let header_end = cur.offset();
    let bytes_needed = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(header_end, "dimension product overflows"))?;
    if bytes_needed != cur.remaining() {
        return Err(Error::format(
            header_end,
            format!(
                "payload length mismatch: expected {bytes_needed} bytes, found {}",
                cur.remaining()
            ),
        ));
    }
    let raw = cur.take(bytes_needed)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn save_tensor_file(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_tensor(&fs::read(path)?)
}

pub fn save_label_file(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut buf = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        let v = u32::try_from(l).map_err(|_| Error::Data(format!("label {l} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_label_file(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            (bytes.len() / 4 * 4) as u64,
            format!("label file length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

/// Tensor plus companion labels (`<stem>.labels` next to `<stem>.tcpt`).
pub fn load_labeled_tensor(path: impl AsRef<Path>) -> Result<(Tensor<f32>, Option<Vec<usize>>)> {
    let path = path.as_ref();
    let t = load_tensor_file(path)?;
    let lp = path.with_extension("labels");
    let labels = if lp.exists() { Some(load_label_file(lp)?) } else { None };
    Ok((t, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    class_count: usize,
    provenance: String,
}

pub const SOURCE_FILE: &str = "source.tcpt";
pub const TARGET_FILE: &str = "target.tcpt";
const META_FILE: &str = "meta.json";

/// Writes `source.tcpt`, `target.tcpt`, their `.labels` companions and
/// `meta.json` into `dir`.
pub fn save_domain_pair(dir: impl AsRef<Path>, pair: &DomainPair) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let files = vec![
        dir.join(SOURCE_FILE),
        dir.join("source.labels"),
        dir.join(TARGET_FILE),
        dir.join("target.labels"),
        dir.join(META_FILE),
    ];
    save_tensor_file(&files[0], &pair.source.images)?;
    save_label_file(&files[1], &pair.source.labels)?;
    save_tensor_file(&files[2], pair.target.images())?;
    if pair.target.has_labels() {
        save_label_file(&files[3], pair.target.audited_labels("dataset export")?)?;
    }
    let meta = DatasetMeta {
        class_count: pair.class_count,
        provenance: pair.provenance.clone(),
    };
    fs::write(&files[4], serde_json::to_string_pretty(&meta)?)?;
    Ok(files)
}

pub fn load_domain_pair(dir: impl AsRef<Path>) -> Result<DomainPair> {
    let dir = dir.as_ref();
    let (src, src_labels) = load_labeled_tensor(dir.join(SOURCE_FILE))?;
    let src_labels = src_labels.ok_or_else(|| Error::Data("source labels missing".into()))?;
    let (tgt, tgt_labels) = load_labeled_tensor(dir.join(TARGET_FILE))?;
    let meta: DatasetMeta = match fs::read_to_string(dir.join(META_FILE)) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => DatasetMeta {
            class_count: src_labels.iter().max().map_or(0, |m| m + 1),
            provenance: String::new(),
        },
    };
    let provenance = if meta.provenance.is_empty() {
        format!("files:{}", dir.display())
    } else {
        meta.provenance
    };
    DomainPair::new(
        LabeledSet::new(src, src_labels)?,
        TargetDomain::new(tgt, tgt_labels)?,
        meta.class_count,
        provenance,
    )
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn from_images(images: &Tensor<f32>) -> Result<Self> {
        let [n, c, h, w] = images.shape() else {
            return Err(Error::Data("normalization needs N×C×H×W images".into()));
        };
        let (n, c, hw) = (*n, *c, h * w);
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for i in 0..n {
                let start = (i * c + ch) * hw;
                for &v in &images.data()[start..start + hw] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            let m = s / (n * hw) as f64;
            let var = (s2 / (n * hw) as f64 - m * m).max(0.0);
            mean[ch] = m as f32;
            std[ch] = if var > 0.0 { var.sqrt() as f32 } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, images: &Tensor<f32>) -> Tensor<f32> {
        let s = images.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut out = images.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (k / hw) % c;
            *v = ((*v as f64 - self.mean[ch] as f64) / self.std[ch] as f64) as f32;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    pub hflip: bool,
    /// Zero padding for random crops back to the original size; 0 disables.
    pub crop_padding: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            hflip: true,
            crop_padding: 2,
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self {
            hflip: false,
            crop_padding: 0,
        }
    }
}

/// Mirrors one `C×H×W` image left to right in place.
pub fn hflip(img: &mut [f32], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Shifts one image by `(dy, dx)` filling with zeros; equivalent to padding
/// then cropping.
fn shift_image(img: &mut [f32], c: usize, h: usize, w: usize, dy: isize, dx: isize) {
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (y + dy, x + dx);
                let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
                img[(ch * h + y as usize) * w + x as usize] = v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    /// Present for labeled sources only.
    pub labels: Option<Vec<usize>>,
    pub indices: Vec<usize>,
}

/// One epoch of shuffled batches. The final batch may be smaller. A batch
/// size above the dataset size yields a single batch and a warning.
pub fn make_batches(
    images: &Tensor<f32>,
    labels: Option<&[usize]>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    augment: Augment,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let n = images.batch();
    if n == 0 {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    if batch_size > n {
        log::warn!("batch size {batch_size} exceeds dataset size {n}; using one batch of {n}");
    }
    let s = images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(n.div_ceil(batch_size));
    for idx in order.chunks(batch_size) {
        let mut imgs = images.select_rows(idx);
        for img in imgs.data_mut().chunks_exact_mut(c * h * w) {
            if augment.hflip && rng.random_bool(0.5) {
                hflip(img, c, h, w);
            }
            if augment.crop_padding > 0 {
                let p = augment.crop_padding as i64;
                let dy = rng.random_range(-p..=p) as isize;
                let dx = rng.random_range(-p..=p) as isize;
                if dy != 0 || dx != 0 {
                    shift_image(img, c, h, w, dy, dx);
                }
            }
        }
        out.push(Batch {
            images: imgs,
            labels: labels.map(|l| idx.iter().map(|&i| l[i]).collect()),
            indices: idx.to_vec(),
        });
    }
    Ok(out)
}
