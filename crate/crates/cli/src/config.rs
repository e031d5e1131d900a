//! Experiment configs: TOML files that may `include` preset files.
//!
//! Tables from included files are merged key by key; the including file
//! wins. Errors point at the file and line that supplied the bad key.

use std::fmt;
use std::path::{Path, PathBuf};

use moepipe::{
    BandwidthMode, HardwareProfile, KvPolicy, LoadModel, ModelSpec, OffloadMode, PlacementOptions,
    QuantConfig, ScheduleConfig, Skew, Variant,
};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub file: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{l}: {}", self.file.display(), self.message),
            None => write!(f, "{}: {}", self.file.display(), self.message),
        }
    }
}

impl std::error::Error for Diagnostic {}

/// Batch count: a fixed number or `"auto"` to ask the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchCount {
    Auto,
    Fixed(usize),
}

impl Serialize for BatchCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BatchCount::Auto => s.serialize_str("auto"),
            BatchCount::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(BatchCount::Fixed(n)),
            Raw::Word(w) if w == "auto" => Ok(BatchCount::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a batch count or \"auto\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    /// Planner placement: resident weights fill spare VRAM.
    #[default]
    Auto,
    /// Every weight and the KV cache stream from host memory.
    Streamed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetcherKind {
    /// Correlation table built from a warm-up trace.
    #[default]
    Table,
    /// Ground-truth top-K of each layer.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadModelKind {
    Best,
    #[default]
    Measured,
    Worst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub skew: Skew,
    pub seed: u64,
    #[serde(default)]
    pub routing_seed: u64,
    /// Seed of the warm-up trace for the correlation table; `seed + 1000`
    /// when unset.
    #[serde(default)]
    pub warmup_seed: Option<u64>,
    pub batch_size: usize,
    pub n: BatchCount,
    pub prompt_len: usize,
    pub gen_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variants: Vec<Variant>,
    pub k: usize,
    #[serde(default)]
    pub offload: OffloadMode,
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub kv_policy: KvPolicy,
    #[serde(default)]
    pub load_model: LoadModelKind,
    #[serde(default)]
    pub placement: PlacementMode,
    #[serde(default)]
    pub prefetcher: PrefetcherKind,
    #[serde(default)]
    pub online_update: bool,
    #[serde(default)]
    pub bandwidth: BandwidthMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelSpec,
    pub hardware: HardwareProfile,
    pub workload: WorkloadConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn schedule_config(&self, variant: Variant) -> ScheduleConfig {
        ScheduleConfig {
            variant,
            offload: self.run.offload,
            k: self.run.k,
            quant: self.run.quant,
            kv_policy: self.run.kv_policy,
        }
    }

    pub fn placement_options(&self, variant: Variant) -> PlacementOptions {
        let streamed = self.run.placement == PlacementMode::Streamed;
        PlacementOptions {
            kv_policy: self.run.kv_policy,
            quant: self.run.quant,
            fill_vram: !streamed,
            kv_offload: streamed,
            expert_slots: Some(self.schedule_config(variant).expert_slots(&self.model)),
            ..PlacementOptions::default()
        }
    }

    pub fn load_model(&self, hot_share: f64) -> LoadModel {
        match self.run.load_model {
            LoadModelKind::Best => LoadModel::Best,
            LoadModelKind::Measured => LoadModel::Measured { hot_share },
            LoadModelKind::Worst => LoadModel::Worst,
        }
    }

    pub fn warmup_seed(&self) -> u64 {
        self.workload
            .warmup_seed
            .unwrap_or(self.workload.seed + 1000)
    }
}

/// One file that contributed to a config, kept for error locations.
#[derive(Debug, Clone)]
struct Source {
    path: PathBuf,
    text: String,
}

fn read_source(path: &Path) -> Result<(Source, Table), Diagnostic> {
    let text = std::fs::read_to_string(path).map_err(|e| Diagnostic {
        file: path.to_path_buf(),
        line: None,
        message: e.to_string(),
    })?;
    let table: Table = toml::from_str(&text).map_err(|e| Diagnostic {
        file: path.to_path_buf(),
        line: e.span().map(|s| line_of(&text, s.start)),
        message: e.message().to_string(),
    })?;
    Ok((
        Source {
            path: path.to_path_buf(),
            text,
        },
        table,
    ))
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Deep merge: values in `top` replace those in `base`, tables merge.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn load_tree(
    path: &Path,
    stack: &mut Vec<PathBuf>,
    sources: &mut Vec<Source>,
) -> Result<Table, Diagnostic> {
    let canon = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    if stack.contains(&canon) {
        return Err(Diagnostic {
            file: path.to_path_buf(),
            line: None,
            message: "include cycle".into(),
        });
    }
    let (src, mut table) = read_source(path)?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(Value::Array(items)) => items,
        Some(_) => {
            return Err(Diagnostic {
                file: path.to_path_buf(),
                line: find_key(&src.text, &[], "include"),
                message: "include must be an array of paths".into(),
            })
        }
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    stack.push(canon);
    let mut merged = Table::new();
    for inc in includes {
        let Value::String(rel) = inc else {
            return Err(Diagnostic {
                file: path.to_path_buf(),
                line: find_key(&src.text, &[], "include"),
                message: "include entries must be strings".into(),
            });
        };
        let sub = load_tree(&dir.join(&rel), stack, sources).map_err(|mut d| {
            if d.file == dir.join(&rel) && d.message.contains("No such file") {
                d = Diagnostic {
                    file: path.to_path_buf(),
                    line: find_key(&src.text, &[], "include"),
                    message: format!("cannot read included file {rel}"),
                };
            }
            d
        })?;
        merge(&mut merged, sub);
    }
    stack.pop();
    merge(&mut merged, table);
    sources.push(src);
    Ok(merged)
}

/// Line of `key` inside table `path` (e.g. `["workload"]`) of a TOML text.
fn find_key(text: &str, path: &[&str], key: &str) -> Option<usize> {
    let header = path.join(".");
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            if key.is_empty() && current == header {
                return Some(i + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else {
            continue;
        };
        let k = k.trim();
        let full = if current.is_empty() {
            k.to_string()
        } else {
            format!("{current}.{k}")
        };
        let want = if header.is_empty() {
            key.to_string()
        } else {
            format!("{header}.{key}")
        };
        if full == want {
            return Some(i + 1);
        }
    }
    None
}

/// Key path at a byte offset of a TOML text: enclosing table plus the key on
/// that line.
fn key_at(text: &str, offset: usize) -> (Vec<String>, String) {
    let target = line_of(text, offset);
    let mut table = Vec::new();
    let mut key = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            table = h.trim().split('.').map(|s| s.trim().to_string()).collect();
            key.clear();
        } else if let Some((k, _)) = line.split_once('=') {
            key = k.trim().to_string();
        }
        if i + 1 == target {
            break;
        }
    }
    (table, key)
}

fn locate(sources: &[Source], table: &[String], key: &str) -> (PathBuf, Option<usize>) {
    let path: Vec<&str> = table.iter().map(String::as_str).collect();
    // the including file comes last and wins merges, so search it first
    for s in sources.iter().rev() {
        if let Some(l) = find_key(&s.text, &path, key) {
            return (s.path.clone(), Some(l));
        }
    }
    let main = sources.last().map(|s| s.path.clone()).unwrap_or_default();
    (main, None)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, Diagnostic> {
    let mut sources = Vec::new();
    let merged = load_tree(path, &mut Vec::new(), &mut sources)?;
    let text = toml::to_string(&merged).map_err(|e| Diagnostic {
        file: path.to_path_buf(),
        line: None,
        message: e.to_string(),
    })?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| {
        let (table, key) = e.span().map(|s| key_at(&text, s.start)).unwrap_or_default();
        let (file, line) = locate(&sources, &table, &key);
        Diagnostic {
            file,
            line,
            message: e.message().to_string(),
        }
    })?;
    validate(&cfg, &sources)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig, sources: &[Source]) -> Result<(), Diagnostic> {
    let fail = |table: &str, key: &str, message: String| {
        let (file, line) = locate(sources, &[table.to_string()], key);
        Err(Diagnostic {
            file,
            line,
            message,
        })
    };
    if let Err(e) = cfg.model.validate() {
        return fail("model", "", e.to_string());
    }
    if let Err(e) = cfg.hardware.validate() {
        return fail("hardware", "", e.to_string());
    }
    if let Err(e) = cfg.workload.skew.validate() {
        return fail("workload", "skew", e.to_string());
    }
    let w = &cfg.workload;
    for (key, v) in [
        ("batch_size", w.batch_size),
        ("prompt_len", w.prompt_len),
        ("gen_len", w.gen_len),
    ] {
        if v == 0 {
            return fail("workload", key, format!("{key} must be at least 1"));
        }
    }
    if w.n == BatchCount::Fixed(0) {
        return fail("workload", "n", "n must be at least 1 or \"auto\"".into());
    }
    if cfg.run.variants.is_empty() {
        return fail("run", "variants", "at least one variant is required".into());
    }
    if cfg.run.k == 0 || cfg.run.k > cfg.model.n_experts_per_layer {
        return fail(
            "run",
            "k",
            format!(
                "k must be in 1..={}, got {}",
                cfg.model.n_experts_per_layer, cfg.run.k
            ),
        );
    }
    if let Some(q) = &cfg.run.quant {
        if let Err(e) = q.validate() {
            return fail("run", "quant", e.to_string());
        }
    }
    if let Some(s) = &cfg.sweep {
        if s.n.is_empty() || s.n.contains(&0) {
            return fail("sweep", "n", "sweep.n must list batch counts >= 1".into());
        }
    }
    Ok(())
}
