//! Run configuration: defaults, overlaid by a TOML file (or a manifest),
//! overlaid by flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tcprune_core::data::{generate_synthetic_domains, load_domain_pair, write_tensor, DomainPair, SyntheticSpec};
use tcprune_core::driver::{Method, PruneConfig};
use tcprune_core::graph::ModelGraph;
use tcprune_core::loss::MmdConfig;
use tcprune_core::zoo::{ArchSpec, Architecture};
use tcprune_core::{Error, Result};

/// Data given as a synthetic-generator spec instead of a directory.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Architecture,
    pub channel_plan: Vec<usize>,
    pub fc_widths: Vec<usize>,
    pub block_plan: Vec<(usize, usize)>,
    /// A dataset directory, `synthetic`, or `key=value,...` generator overrides.
    pub data: String,
    pub score_dump: bool,
    pub prune: PruneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ArchSpec::default_for(Architecture::SmallVgg);
        Self {
            arch: spec.arch,
            channel_plan: spec.channel_plan,
            fc_widths: spec.fc_widths,
            block_plan: spec.block_plan,
            data: SYNTHETIC.to_string(),
            score_dump: false,
            prune: PruneConfig::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the lower layer alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub k: Option<usize>,
    pub iters: Option<usize>,
    pub flops_target: Option<f64>,
    pub arch: Option<String>,
    pub data: Option<String>,
    pub mmd: Option<String>,
    pub score_dump: bool,
}

/// Parses `median`, `fixed:<σ>` or `multi`.
pub fn parse_mmd(s: &str) -> Result<MmdConfig> {
    let cfg = match s {
        "median" => MmdConfig::default(),
        "multi" => MmdConfig::multi_kernel(),
        _ => match s.strip_prefix("fixed:") {
            Some(v) => MmdConfig::fixed(
                v.parse()
                    .map_err(|_| Error::config(format!("--mmd fixed:<σ> needs a number, got `{v}`")))?,
            ),
            None => {
                return Err(Error::config(format!(
                    "--mmd expects median, fixed:<σ> or multi, got `{s}`"
                )))
            }
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config does not serialize: {e}")))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.prune.seed = s;
        }
        if let Some(m) = &o.method {
            self.prune.method = m.parse::<Method>()?;
        }
        if let Some(k) = o.k {
            self.prune.k = k;
        }
        if let Some(i) = o.iters {
            self.prune.iters = i;
        }
        if let Some(f) = o.flops_target {
            self.prune.flops_target = f;
        }
        if let Some(a) = &o.arch {
            self.arch = a.parse()?;
        }
        if let Some(d) = &o.data {
            self.data = d.clone();
        }
        if let Some(m) = &o.mmd {
            self.prune.mmd = parse_mmd(m)?;
        }
        if o.score_dump {
            self.score_dump = true;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.prune.validate()?;
        if self.arch == Architecture::SmallVgg && (self.channel_plan.is_empty() || self.fc_widths.len() < 2) {
            return Err(Error::config("small-vgg needs a channel plan and at least two fc widths"));
        }
        if self.arch == Architecture::SmallResnet && self.block_plan.is_empty() {
            return Err(Error::config("small-resnet needs a block plan"));
        }
        Ok(())
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            arch: self.arch,
            channel_plan: self.channel_plan.clone(),
            fc_widths: self.fc_widths.clone(),
            block_plan: self.block_plan.clone(),
        }
    }

    pub fn build_graph(&self, pair: &DomainPair) -> Result<ModelGraph> {
        self.arch_spec().build(pair.class_count, pair.image_shape())
    }

    /// Short stable digest of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes())[..16].to_string())
    }
}

/// Where a run's domain pair comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Dir(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DataSource {
    /// Directories win; otherwise the string is a generator spec whose seed
    /// defaults to `seed`.
    pub fn resolve(s: &str, seed: u64) -> Result<Self> {
        let path = Path::new(s);
        if path.is_dir() {
            return Ok(Self::Dir(path.to_path_buf()));
        }
        let body = s.strip_prefix(SYNTHETIC).map(|r| r.trim_start_matches(':'));
        let body = match body {
            Some(b) => b,
            None if s.contains('=') => s,
            None => return Err(Error::config(format!("data `{s}` is neither a directory nor a generator spec"))),
        };
        let mut spec = SyntheticSpec::parse(body)?;
        if !body.split(',').any(|p| p.trim().starts_with("seed=")) {
            spec.seed = seed;
        }
        Ok(Self::Synthetic(spec))
    }

    /// Canonical string: re-resolving it yields the same source.
    pub fn canonical(&self) -> String {
        match self {
            Self::Dir(p) => p.display().to_string(),
            Self::Synthetic(s) => {
                let g = s.shift.color_gain;
                format!(
                    "{SYNTHETIC}:n_source={},n_target={},classes={},channels={},size={},seed={},\
                     brightness={},contrast={},rotation={},noise={},gain_r={},gain_g={},gain_b={}",
                    s.n_source,
                    s.n_target,
                    s.classes,
                    s.channels,
                    s.size,
                    s.seed,
                    s.shift.brightness,
                    s.shift.contrast,
                    s.shift.rotation_deg,
                    s.shift.noise,
                    g[0],
                    g[1],
                    g[2]
                )
            }
        }
    }

    pub fn load(&self) -> Result<DomainPair> {
        match self {
            Self::Dir(p) => load_domain_pair(p),
            Self::Synthetic(s) => generate_synthetic_domains(s),
        }
    }

    /// Digests of the inputs: every regular file of a directory, or the
    /// generated image tensors.
    pub fn hashes(&self, pair: &DomainPair) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        match self {
            Self::Dir(p) => {
                let mut entries: Vec<_> = fs::read_dir(p)?.collect::<std::io::Result<_>>()?;
                entries.sort_by_key(|e| e.file_name());
                for e in entries {
                    if e.file_type()?.is_file() {
                        let name = format!("data/{}", e.file_name().to_string_lossy());
                        out.insert(name, sha256_hex(&fs::read(e.path())?));
                    }
                }
            }
            Self::Synthetic(_) => {
                let mut buf = Vec::new();
                write_tensor(&mut buf, &pair.source.images)?;
                out.insert("data/source.tcpt".into(), sha256_hex(&buf));
                buf.clear();
                write_tensor(&mut buf, pair.target.images())?;
                out.insert("data/target.tcpt".into(), sha256_hex(&buf));
            }
        }
        Ok(out)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.prune.accuracy_floor = Some(0.5);
        c.prune.mmd = MmdConfig::fixed(2.0);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let mut c = RunConfig::from_toml("[prune]\nk = 9\niters = 7\n").unwrap();
        assert_eq!((c.prune.k, c.prune.iters, c.prune.batch_size), (9, 7, 32));
        c.apply(&Overrides {
            k: Some(3),
            ..Default::default()
        })
        .unwrap();
        assert_eq!((c.prune.k, c.prune.iters), (3, 7));
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(RunConfig::from_toml("[prune]\nkk = 1\n").unwrap_err().is_config());
        assert!(parse_mmd("fixed:abc").unwrap_err().is_config());
        assert!(parse_mmd("fixed:-1").unwrap_err().is_config());
        assert!(parse_mmd("gauss").unwrap_err().is_config());
        let mut c = RunConfig::default();
        let o = Overrides {
            method: Some("svd".into()),
            ..Default::default()
        };
        assert!(c.apply(&o).unwrap_err().is_config());
    }

    #[test]
    fn mmd_flag_forms() {
        assert_eq!(parse_mmd("median").unwrap(), MmdConfig::default());
        assert_eq!(parse_mmd("fixed:1.5").unwrap(), MmdConfig::fixed(1.5));
        assert_eq!(parse_mmd("multi").unwrap(), MmdConfig::multi_kernel());
    }

    #[test]
    fn synthetic_sources_canonicalize() {
        let a = DataSource::resolve("synthetic", 4).unwrap();
        let DataSource::Synthetic(s) = &a else { panic!() };
        assert_eq!(s.seed, 4);
        let b = DataSource::resolve(&a.canonical(), 99).unwrap();
        assert_eq!(a, b);
        let c = DataSource::resolve("classes=3,seed=1", 4).unwrap();
        let DataSource::Synthetic(s) = &c else { panic!() };
        assert_eq!((s.classes, s.seed), (3, 1));
        assert!(DataSource::resolve("/no/such/dir", 0).unwrap_err().is_config());
    }
}
