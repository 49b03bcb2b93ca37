//! Offline run orchestration: configuration presets, on-disk artifact
//! formats, and the stage graph world → agents → encode → tokenize → locate
//! → train-dllm → fill → train-ranker → eval → report.
//!
//! Every stage reads and writes plain files under one run directory and
//! records a manifest of its input hashes. A rerun skips stages whose
//! manifests still match and cascades over every stage downstream of one
//! that actually ran, so deleting a single artifact reruns exactly its
//! stage and that stage's descendants.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{run_agents, AgentsOutput, HttpClient, HttpLlmConfig, MockAgent, PromptCache};
use crate::baseline::CoocModel;
use crate::dllm::{
    infer_fill, init_dllm_params, train_dllm, CompletedSeq, DllmConfig, DllmTracePoint,
};
use crate::embedding::{encode_item, hash_encoder, ItemRep, RepTable};
use crate::error::{Error, Result};
use crate::locator::{
    build_token_sequences, locate, location_metrics, tau_time_percentile, LocationReport,
    LocatorConfig, TokenSeq, TokenSlot,
};
use crate::metrics::{
    auc, gauc, hr_at_k, render_table, sm_hr_at_k, MetricReport, RetrievalCase, UserOutcomes,
};
use crate::nn::ParamStore;
use crate::ranker::{
    init_ranker_params, score_impressions, train_ctr, CtrTracePoint, Impression as RankImpression,
    RankInputs, RankerConfig, ScoredImpression,
};
use crate::rng::derive_seed;
use crate::tokenizer::{train_rqvae, RqVaeConfig, RqVaeStats};
use crate::types::{ItemId, UserId};
use crate::worldgen::{generate_world, World, WorldConfig};

pub const WORLD_FILE: &str = "world.json";
pub const KNOWLEDGE_FILE: &str = "knowledge.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const EMBEDDING_IDS_FILE: &str = "embeddings.bin.ids";
pub const SIDS_FILE: &str = "sids.json";
pub const RQVAE_CKPT_FILE: &str = "rqvae.ckpt";
pub const RQVAE_STATS_FILE: &str = "rqvae_stats.json";
pub const LOCATED_FILE: &str = "located.json";
pub const TOKENS_FILE: &str = "tokens.json";
pub const LOCATION_REPORT_FILE: &str = "location_report.json";
pub const DLLM_CKPT_FILE: &str = "dllm.ckpt";
pub const DLLM_TRACE_FILE: &str = "dllm_trace.json";
pub const COMPLETED_FILE: &str = "completed.json";
pub const RANKER_CKPT_FILE: &str = "ranker.ckpt";
pub const RANKER_TRACE_FILE: &str = "ranker_trace.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.txt";

const EMB_MAGIC: &[u8; 8] = b"RSEQEMB1";
const CKPT_MAGIC: &[u8; 8] = b"RSEQCKPT";
const CKPT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Embedding file: magic, row count (u64 LE), dim (u32 LE), row-major f32 LE
// body, plus a text sidecar listing one item id per row.

/// Appends `.ids` to a path's file name.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".ids");
    PathBuf::from(name)
}

/// Writes a representation table and its id sidecar; all rows must agree on
/// width. Zero rows is a valid table.
pub fn write_embeddings(path: &Path, reps: &[ItemRep]) -> Result<()> {
    let dim = reps.first().map_or(0, |r| r.vector.len());
    let mut bytes = Vec::with_capacity(20 + reps.len() * dim * 4);
    bytes.extend_from_slice(EMB_MAGIC);
    bytes.extend_from_slice(&(reps.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    let mut ids = String::new();
    for rep in reps {
        if rep.vector.len() != dim {
            return Err(Error::data(format!(
                "item {} is {}-dim, table is {dim}-dim",
                rep.item_id,
                rep.vector.len()
            )));
        }
        for v in &rep.vector {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        ids.push_str(&format!("{}\n", rep.item_id));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = ids_path(path);
    fs::write(&sidecar, ids).map_err(|e| Error::io(sidecar, e))
}

/// Reads a representation table written by [`write_embeddings`], bit-exact.
pub fn read_embeddings(path: &Path) -> Result<Vec<ItemRep>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(path, &bytes);
    let magic = r.take(8, "magic")?;
    if magic != EMB_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic at offset 0: expected {EMB_MAGIC:?}, found {magic:?}"),
        ));
    }
    let rows = r.u64("row count")? as usize;
    let dim = r.u32("dim")? as usize;
    let mut vectors = Vec::with_capacity(rows);
    for row in 0..rows {
        vectors.push(r.f32s(dim, &format!("row {row}"))?);
    }
    r.finish()?;

    let sidecar = ids_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let ids: Vec<ItemId> = text
        .lines()
        .enumerate()
        .map(|(n, line)| {
            line.trim().parse().map_err(|_| {
                Error::format(&sidecar, format!("line {}: bad item id {line:?}", n + 1))
            })
        })
        .collect::<Result<_>>()?;
    if ids.len() != rows {
        return Err(Error::format(
            &sidecar,
            format!("{} ids for {rows} rows", ids.len()),
        ));
    }
    Ok(ids
        .into_iter()
        .zip(vectors)
        .map(|(item_id, vector)| ItemRep { item_id, vector })
        .collect())
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic, version, tensor count, then per tensor the name,
// the shape, and raw f32 LE data.

/// Writes every named tensor of a store; the roundtrip through
/// [`load_checkpoint`] is bit-identical.
pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params.iter() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(path, &bytes);
    let magic = r.take(8, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic at offset 0: expected {CKPT_MAGIC:?}, found {magic:?}"),
        ));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}, expected {CKPT_VERSION}"),
        ));
    }
    let count = r.u64("tensor count")? as usize;
    let mut values = BTreeMap::new();
    for i in 0..count {
        let what = format!("tensor {i}");
        let name_len = r.u32(&format!("{what} name length"))? as usize;
        let name = String::from_utf8(r.take(name_len, &format!("{what} name"))?.to_vec())
            .map_err(|_| Error::format(path, format!("{what}: name is not utf-8")))?;
        let ndim = r.u32(&format!("{name} rank"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(&format!("{name} shape"))? as usize);
        }
        let len = shape.iter().product::<usize>();
        let data = r.f32s(len, &name)?;
        let tensor = crate::nn::Tensor::new(shape, data)
            .map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        if values.insert(name.clone(), tensor).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;
    Ok(ParamStore::from_value_map(values))
}

/// Refuses a loaded checkpoint whose tensor names or shapes differ from a
/// reference store, listing every offender.
pub fn check_schema(path: &Path, loaded: &ParamStore, expected: &ParamStore) -> Result<()> {
    let missing: Vec<&str> = expected
        .names()
        .filter(|n| !loaded.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::format(
            path,
            format!("missing tensors: {}", missing.join(", ")),
        ));
    }
    let unexpected: Vec<&str> = loaded
        .names()
        .filter(|n| !expected.contains(n))
        .collect();
    if !unexpected.is_empty() {
        return Err(Error::format(
            path,
            format!("unexpected tensors: {}", unexpected.join(", ")),
        ));
    }
    let mut mismatched = Vec::new();
    for (name, tensor) in expected.iter() {
        let found = loaded.get(name)?;
        if found.shape() != tensor.shape() {
            mismatched.push(format!(
                "{name} is {:?}, expected {:?}",
                found.shape(),
                tensor.shape()
            ));
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::format(
            path,
            format!("shape mismatch: {}", mismatched.join("; ")),
        ));
    }
    Ok(())
}

struct ByteReader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        ByteReader { path, buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated: {what} needs {n} bytes at offset {}, {} remain",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes at offset {}", self.buf.len() - self.pos, self.pos),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run configuration.

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Minutes on one machine: 32-wide representations, the default world.
    Desk,
    /// Full-size training constants; far beyond desk budgets.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!(
                "unknown preset {other:?}; expected desk or paper"
            ))),
        }
    }
}

/// How the agents stage talks to a language model. Without an endpoint the
/// deterministic built-in agent answers from the world's own synonym table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSettings {
    pub endpoint: Option<String>,
    pub model: String,
    /// Cache live-endpoint replies under `<run dir>/prompt-cache`.
    pub cache: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocateSettings {
    /// Quantile of observed inter-event gaps that sets `tau_time`;
    /// 0 keeps the configured value.
    pub tau_time_quantile: f64,
    pub cooc_window: usize,
    pub cooc_lambda: f64,
    pub cooc_alpha: f64,
    pub locator: LocatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub hr_k: usize,
    pub sm_hr_k: usize,
}

/// One file drives the whole run. Stage seeds derive from `seed` by stage
/// name; the seed fields inside stage configs are overridden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    /// Stage names to run; empty means the full graph.
    #[serde(default)]
    pub stages: Vec<String>,
    /// Width of the hashed text representations; must match the RQ-VAE and
    /// DLLM input widths and the ranker fill width.
    pub encode_dim: usize,
    /// Every n-th token sequence is held out from DLLM training.
    pub dllm_holdout_stride: usize,
    pub world: WorldConfig,
    pub agents: AgentSettings,
    pub rqvae: RqVaeConfig,
    pub locate: LocateSettings,
    pub dllm: DllmConfig,
    pub ranker: RankerConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn desk() -> Self {
        let rqvae = RqVaeConfig::default();
        RunConfig {
            seed: 17,
            preset: Preset::Desk,
            stages: Vec::new(),
            encode_dim: rqvae.input_dim,
            world: WorldConfig::default(),
            agents: AgentSettings {
                endpoint: None,
                model: "default".to_string(),
                cache: true,
            },
            locate: LocateSettings {
                tau_time_quantile: 0.95,
                cooc_window: 5,
                cooc_lambda: 0.8,
                cooc_alpha: 1.0,
                locator: LocatorConfig {
                    n_rank: 20,
                    ..LocatorConfig::default()
                },
            },
            dllm: DllmConfig::default(),
            dllm_holdout_stride: 10,
            ranker: RankerConfig {
                // Codes are 1-based, so the embedding tables carry one spare row.
                sid_codebook: rqvae.codebook_size + 1,
                sid_levels: rqvae.levels,
                fill_dim: rqvae.input_dim,
                ..RankerConfig::default()
            },
            rqvae,
            eval: EvalSettings { hr_k: 10, sm_hr_k: 10 },
        }
    }

    /// Full-size training constants on top of the desk world.
    pub fn paper() -> Self {
        let desk = Self::desk();
        let dllm = DllmConfig::paper();
        RunConfig {
            preset: Preset::Paper,
            encode_dim: dllm.input_dim,
            rqvae: RqVaeConfig {
                input_dim: dllm.input_dim,
                ..desk.rqvae
            },
            ranker: RankerConfig {
                fill_dim: dllm.input_dim,
                ..desk.ranker
            },
            dllm,
            ..desk
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let mut value = toml::Value::try_from(self)
            .map_err(|e| Error::config(format!("config render error: {e}")))?;
        snap_floats(&mut value);
        toml::to_string_pretty(&value)
            .map_err(|e| Error::config(format!("config render error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.rqvae.validate()?;
        self.locate.locator.validate()?;
        self.dllm.validate()?;
        self.ranker.validate()?;
        let dims = [
            ("rqvae.input_dim", self.rqvae.input_dim),
            ("dllm.input_dim", self.dllm.input_dim),
            ("ranker.fill_dim", self.ranker.fill_dim),
        ];
        for (name, dim) in dims {
            if dim != self.encode_dim {
                return Err(Error::config(format!(
                    "{name} is {dim} but encode_dim is {}; the stages share one \
                     representation space",
                    self.encode_dim
                )));
            }
        }
        if self.ranker.sid_levels != self.rqvae.levels {
            return Err(Error::config(format!(
                "ranker.sid_levels {} != rqvae.levels {}",
                self.ranker.sid_levels, self.rqvae.levels
            )));
        }
        if self.ranker.sid_codebook != self.rqvae.codebook_size + 1 {
            return Err(Error::config(format!(
                "ranker.sid_codebook must be rqvae.codebook_size + 1 = {} (codes are \
                 1-based), found {}",
                self.rqvae.codebook_size + 1,
                self.ranker.sid_codebook
            )));
        }
        if !(0.0..1.0).contains(&self.locate.tau_time_quantile) {
            return Err(Error::config(
                "tau_time_quantile must lie in [0, 1); 0 disables the estimate",
            ));
        }
        if self.locate.cooc_window == 0 {
            return Err(Error::config("cooc_window must be positive"));
        }
        if self.dllm_holdout_stride < 2 {
            return Err(Error::config(
                "dllm_holdout_stride must be at least 2 to leave training sequences",
            ));
        }
        if self.eval.hr_k == 0 || self.eval.sm_hr_k == 0 {
            return Err(Error::config("evaluation k values must be positive"));
        }
        for name in &self.stages {
            Stage::parse(name)?;
        }
        Ok(())
    }
}

/// Single-precision fields widen to f64 with noise digits under TOML
/// serialization; any float that is exactly a widened f32 is snapped back to
/// its shortest decimal form so the dump echoes `0.07`, not `0.0700000002…`.
fn snap_floats(value: &mut toml::Value) {
    match value {
        toml::Value::Float(f) => {
            if (*f as f32) as f64 == *f {
                *f = format!("{}", *f as f32).parse().unwrap();
            }
        }
        toml::Value::Array(items) => items.iter_mut().for_each(snap_floats),
        toml::Value::Table(table) => table.iter_mut().for_each(|(_, v)| snap_floats(v)),
        _ => {}
    }
}

// ---------------------------------------------------------------------------
// Stage graph.

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    World,
    Agents,
    Encode,
    Tokenize,
    Locate,
    TrainDllm,
    Fill,
    TrainRanker,
    Eval,
    Report,
}

impl Stage {
    /// Dependency order; every stage's inputs come from earlier entries.
    pub const ALL: [Stage; 10] = [
        Stage::World,
        Stage::Agents,
        Stage::Encode,
        Stage::Tokenize,
        Stage::Locate,
        Stage::TrainDllm,
        Stage::Fill,
        Stage::TrainRanker,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::World => "world",
            Stage::Agents => "agents",
            Stage::Encode => "encode",
            Stage::Tokenize => "tokenize",
            Stage::Locate => "locate",
            Stage::TrainDllm => "train-dllm",
            Stage::Fill => "fill",
            Stage::TrainRanker => "train-ranker",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        match name {
            "world" | "gen-world" => Ok(Stage::World),
            "agents" => Ok(Stage::Agents),
            "encode" => Ok(Stage::Encode),
            "tokenize" => Ok(Stage::Tokenize),
            "locate" => Ok(Stage::Locate),
            "train-dllm" => Ok(Stage::TrainDllm),
            "fill" => Ok(Stage::Fill),
            "train-ranker" => Ok(Stage::TrainRanker),
            "eval" => Ok(Stage::Eval),
            "report" => Ok(Stage::Report),
            other => Err(Error::config(format!("unknown stage {other:?}"))),
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::World => &[],
            Stage::Agents => &[Stage::World],
            Stage::Encode => &[Stage::World, Stage::Agents],
            Stage::Tokenize => &[Stage::Encode],
            Stage::Locate => &[Stage::World],
            Stage::TrainDllm => &[Stage::Encode, Stage::Locate],
            Stage::Fill => &[Stage::Encode, Stage::Locate, Stage::TrainDllm],
            Stage::TrainRanker => &[Stage::World, Stage::Encode, Stage::Tokenize, Stage::Fill],
            Stage::Eval => &[
                Stage::World,
                Stage::Encode,
                Stage::Tokenize,
                Stage::Fill,
                Stage::TrainRanker,
            ],
            Stage::Report => &[
                Stage::Tokenize,
                Stage::Locate,
                Stage::TrainDllm,
                Stage::TrainRanker,
                Stage::Eval,
            ],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::World => &[WORLD_FILE],
            Stage::Agents => &[KNOWLEDGE_FILE],
            Stage::Encode => &[EMBEDDINGS_FILE, EMBEDDING_IDS_FILE],
            Stage::Tokenize => &[SIDS_FILE, RQVAE_CKPT_FILE, RQVAE_STATS_FILE],
            Stage::Locate => &[LOCATED_FILE, TOKENS_FILE, LOCATION_REPORT_FILE],
            Stage::TrainDllm => &[DLLM_CKPT_FILE, DLLM_TRACE_FILE],
            Stage::Fill => &[COMPLETED_FILE],
            Stage::TrainRanker => &[RANKER_CKPT_FILE, RANKER_TRACE_FILE],
            Stage::Eval => &[SCORES_FILE, METRICS_FILE],
            Stage::Report => &[REPORT_FILE],
        }
    }

    fn version(self) -> u32 {
        1
    }
}

/// What a stage saw when it last ran. A stage is skipped when its recorded
/// manifest matches the current inputs and every output still hashes clean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// Dependency artifact name -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Produced artifact name -> content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub ran: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub outcomes: Vec<StageOutcome>,
}

impl RunSummary {
    pub fn ran(&self, stage: &str) -> bool {
        self.outcomes.iter().any(|o| o.stage == stage && o.ran)
    }
}

fn manifest_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("manifest.{}.json", stage.name()))
}

fn stage_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    derive_seed(cfg.seed, &format!("stage/{}", stage.name()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

fn hash_artifact(out: &Path, name: &str) -> Result<String> {
    let path = out.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of the configuration slice a stage actually reads, so unrelated
/// config edits never dirty it.
fn config_fingerprint(cfg: &RunConfig, stage: Stage) -> Result<String> {
    let json = match stage {
        Stage::World => serde_json::to_vec(&cfg.world)?,
        Stage::Agents => serde_json::to_vec(&cfg.agents)?,
        Stage::Encode => serde_json::to_vec(&cfg.encode_dim)?,
        Stage::Tokenize => serde_json::to_vec(&cfg.rqvae)?,
        Stage::Locate => serde_json::to_vec(&cfg.locate)?,
        Stage::TrainDllm => serde_json::to_vec(&(&cfg.dllm, cfg.dllm_holdout_stride))?,
        Stage::Fill => serde_json::to_vec(&cfg.dllm)?,
        Stage::TrainRanker => serde_json::to_vec(&cfg.ranker)?,
        Stage::Eval => serde_json::to_vec(&(&cfg.ranker, &cfg.eval))?,
        Stage::Report => serde_json::to_vec(cfg)?,
    };
    Ok(sha256_hex(&json))
}

/// Runs the configured stage selection (everything when empty) in dependency
/// order, skipping stages whose manifests still match.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let selected: BTreeSet<Stage> = if cfg.stages.is_empty() {
        Stage::ALL.into_iter().collect()
    } else {
        cfg.stages
            .iter()
            .map(|s| Stage::parse(s))
            .collect::<Result<_>>()?
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut dirty: BTreeSet<Stage> = BTreeSet::new();
    let mut summary = RunSummary::default();
    for stage in Stage::ALL {
        if !selected.contains(&stage) {
            continue;
        }
        let outcome = run_one(cfg, out_dir, stage, &dirty)?;
        if outcome.ran {
            dirty.insert(stage);
        }
        summary.outcomes.push(outcome);
    }
    Ok(summary)
}

fn run_one(cfg: &RunConfig, out: &Path, stage: Stage, dirty: &BTreeSet<Stage>) -> Result<StageOutcome> {
    for dep in stage.deps() {
        for artifact in dep.outputs() {
            if !out.join(artifact).exists() {
                return Err(Error::data(format!(
                    "missing artifact '{artifact}'; run stage '{}' first",
                    dep.name()
                ))
                .in_stage(stage.name()));
            }
        }
    }
    let mut inputs = BTreeMap::new();
    for dep in stage.deps() {
        for artifact in dep.outputs() {
            inputs.insert(artifact.to_string(), hash_artifact(out, artifact)?);
        }
    }
    let seed = stage_seed(cfg, stage);
    let config_hash = config_fingerprint(cfg, stage)?;
    let force = stage.deps().iter().any(|d| dirty.contains(d));
    if !force && manifest_clean(out, stage, seed, &config_hash, &inputs)? {
        log::info!("stage {} is up to date", stage.name());
        return Ok(StageOutcome { stage: stage.name(), ran: false });
    }

    log::info!("running stage {}", stage.name());
    execute(cfg, out, stage).map_err(|e| e.in_stage(stage.name()))?;

    let mut outputs = BTreeMap::new();
    for artifact in stage.outputs() {
        outputs.insert(artifact.to_string(), hash_artifact(out, artifact)?);
    }
    let manifest = StageManifest {
        stage: stage.name().to_string(),
        version: stage.version(),
        seed,
        config_hash,
        inputs,
        outputs,
    };
    write_json(&manifest_path(out, stage), &manifest)?;
    Ok(StageOutcome { stage: stage.name(), ran: true })
}

fn manifest_clean(
    out: &Path,
    stage: Stage,
    seed: u64,
    config_hash: &str,
    inputs: &BTreeMap<String, String>,
) -> Result<bool> {
    let path = manifest_path(out, stage);
    if !path.exists() {
        return Ok(false);
    }
    let recorded: StageManifest = read_json(&path)?;
    if recorded.stage != stage.name()
        || recorded.version != stage.version()
        || recorded.seed != seed
        || recorded.config_hash != config_hash
        || recorded.inputs != *inputs
    {
        return Ok(false);
    }
    for (artifact, hash) in &recorded.outputs {
        if !out.join(artifact).exists() || hash_artifact(out, artifact)? != *hash {
            return Ok(false);
        }
    }
    Ok(true)
}

fn execute(cfg: &RunConfig, out: &Path, stage: Stage) -> Result<()> {
    match stage {
        Stage::World => stage_world(cfg, out),
        Stage::Agents => stage_agents(cfg, out),
        Stage::Encode => stage_encode(cfg, out),
        Stage::Tokenize => stage_tokenize(cfg, out),
        Stage::Locate => stage_locate(cfg, out),
        Stage::TrainDllm => stage_train_dllm(cfg, out),
        Stage::Fill => stage_fill(cfg, out),
        Stage::TrainRanker => stage_train_ranker(cfg, out),
        Stage::Eval => stage_eval(cfg, out),
        Stage::Report => stage_report(cfg, out),
    }
}

// ---------------------------------------------------------------------------
// Stage bodies. Each reads only files named in its dependencies and writes
// only its declared outputs.

fn stage_world(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world = generate_world(&cfg.world, stage_seed(cfg, Stage::World))?;
    write_json(&out.join(WORLD_FILE), &world)
}

fn stage_agents(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world: World = read_json(&out.join(WORLD_FILE))?;
    let output = match &cfg.agents.endpoint {
        None => {
            let agent = MockAgent::for_world(&world);
            run_agents(&agent, None, &world)?
        }
        Some(endpoint) => {
            let client = HttpClient::new(HttpLlmConfig {
                endpoint: endpoint.clone(),
                model: cfg.agents.model.clone(),
                ..HttpLlmConfig::default()
            });
            let cache = if cfg.agents.cache {
                Some(PromptCache::new(out.join("prompt-cache"))?)
            } else {
                None
            };
            run_agents(&client, cache.as_ref(), &world)?
        }
    };
    write_json(&out.join(KNOWLEDGE_FILE), &output)
}

fn stage_encode(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world: World = read_json(&out.join(WORLD_FILE))?;
    let agents: AgentsOutput = read_json(&out.join(KNOWLEDGE_FILE))?;
    let encoder = hash_encoder(cfg.encode_dim, stage_seed(cfg, Stage::Encode));
    let mut reps = Vec::with_capacity(world.catalog.len());
    for item in &world.catalog {
        let knowledge = agents.knowledge.get(&item.item_id).ok_or_else(|| {
            Error::data(format!("no knowledge for item {}", item.item_id))
        })?;
        reps.push(encode_item(item.item_id, knowledge, &encoder));
    }
    write_embeddings(&out.join(EMBEDDINGS_FILE), &reps)
}

fn load_reps(out: &Path) -> Result<RepTable> {
    RepTable::from_reps(read_embeddings(&out.join(EMBEDDINGS_FILE))?)
}

fn stage_tokenize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let reps = load_reps(out)?;
    let (rqvae, stats) = train_rqvae(&reps, &cfg.rqvae, stage_seed(cfg, Stage::Tokenize))?;
    write_json(&out.join(SIDS_FILE), &rqvae.extract_sids(&reps)?)?;
    save_checkpoint(&out.join(RQVAE_CKPT_FILE), &rqvae.params)?;
    write_json(&out.join(RQVAE_STATS_FILE), &stats)
}

fn stage_locate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world: World = read_json(&out.join(WORLD_FILE))?;
    let settings = &cfg.locate;
    let mut locator = settings.locator.clone();
    if settings.tau_time_quantile > 0.0 {
        locator.tau_time = tau_time_percentile(&world.observed, settings.tau_time_quantile)?;
    }
    let categories: BTreeMap<ItemId, String> = world
        .catalog
        .iter()
        .map(|i| (i.item_id, i.category_path.0.clone()))
        .collect();
    let histories: Vec<Vec<ItemId>> = world
        .observed
        .iter()
        .map(|s| s.events.iter().map(|e| e.item_id).collect())
        .collect();
    let vocab: Vec<ItemId> = world.catalog.iter().map(|i| i.item_id).collect();
    let model = CoocModel::fit(
        &histories,
        settings.cooc_window,
        settings.cooc_lambda,
        settings.cooc_alpha,
        vocab,
    )?;
    let located = locate(&world.observed, &categories, &model, &locator)?;
    let tokens = build_token_sequences(&world.observed, &located)?;
    let report = location_metrics(&located, &world.truth);
    write_json(&out.join(LOCATED_FILE), &located)?;
    write_json(&out.join(TOKENS_FILE), &tokens)?;
    write_json(&out.join(LOCATION_REPORT_FILE), &report)
}

fn dllm_config(cfg: &RunConfig) -> DllmConfig {
    DllmConfig {
        seed: stage_seed(cfg, Stage::TrainDllm),
        ..cfg.dllm.clone()
    }
}

fn split_holdout(tokens: Vec<TokenSeq>, stride: usize) -> (Vec<TokenSeq>, Vec<TokenSeq>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, seq) in tokens.into_iter().enumerate() {
        if i % stride == 0 {
            eval.push(seq);
        } else {
            train.push(seq);
        }
    }
    (train, eval)
}

fn stage_train_dllm(cfg: &RunConfig, out: &Path) -> Result<()> {
    let reps = load_reps(out)?;
    let tokens: Vec<TokenSeq> = read_json(&out.join(TOKENS_FILE))?;
    let (train, eval) = split_holdout(tokens, cfg.dllm_holdout_stride);
    if eval.len() < 2 {
        return Err(Error::data(format!(
            "holdout stride {} leaves {} evaluation sequences; need at least 2",
            cfg.dllm_holdout_stride,
            eval.len()
        )));
    }
    let trained = train_dllm(&dllm_config(cfg), &reps, &train, &eval)?;
    save_checkpoint(&out.join(DLLM_CKPT_FILE), &trained.params)?;
    write_json(&out.join(DLLM_TRACE_FILE), &trained.trace)
}

fn stage_fill(cfg: &RunConfig, out: &Path) -> Result<()> {
    let reps = load_reps(out)?;
    let tokens: Vec<TokenSeq> = read_json(&out.join(TOKENS_FILE))?;
    let dcfg = dllm_config(cfg);
    let params = load_checkpoint(&out.join(DLLM_CKPT_FILE))?;
    check_schema(&out.join(DLLM_CKPT_FILE), &params, &init_dllm_params(&dcfg))?;
    let mut completed = Vec::with_capacity(tokens.len());
    for seq in &tokens {
        // Maskable slots are training scaffolding; at fill time they are
        // ordinary observations.
        let inference = TokenSeq {
            user_id: seq.user_id,
            slots: seq
                .slots
                .iter()
                .map(|slot| match slot {
                    TokenSlot::Mask { item_id } => TokenSlot::Obs { item_id: *item_id },
                    other => other.clone(),
                })
                .collect(),
        };
        completed.push(infer_fill(&params, &dcfg, &reps, &inference)?);
    }
    write_json(&out.join(COMPLETED_FILE), &completed)
}

fn ranker_config(cfg: &RunConfig) -> RankerConfig {
    RankerConfig {
        seed: stage_seed(cfg, Stage::TrainRanker),
        ..cfg.ranker.clone()
    }
}

fn rank_impressions(raw: &[crate::worldgen::Impression]) -> Vec<RankImpression> {
    raw.iter()
        .map(|imp| RankImpression {
            user_id: imp.user_id,
            item_id: imp.item_id,
            f_u: imp.f_u.clone(),
            f_c: imp.f_c.clone(),
            label: imp.label,
        })
        .collect()
}

fn item_features(world: &World) -> BTreeMap<ItemId, Vec<f32>> {
    world
        .catalog
        .iter()
        .map(|i| (i.item_id, i.features.clone()))
        .collect()
}

fn stage_train_ranker(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world: World = read_json(&out.join(WORLD_FILE))?;
    let reps = load_reps(out)?;
    let sids: BTreeMap<ItemId, Vec<u32>> = read_json(&out.join(SIDS_FILE))?;
    let completed: Vec<CompletedSeq> = read_json(&out.join(COMPLETED_FILE))?;
    let feats = item_features(&world);
    let inputs = RankInputs {
        reps: &reps,
        sids: &sids,
        feats: &feats,
        histories: &completed,
    };
    let trained = train_ctr(
        &ranker_config(cfg),
        &inputs,
        &rank_impressions(&world.impressions_train),
        &rank_impressions(&world.impressions_test),
    )?;
    save_checkpoint(&out.join(RANKER_CKPT_FILE), &trained.params)?;
    write_json(&out.join(RANKER_TRACE_FILE), &trained.trace)
}

fn stage_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world: World = read_json(&out.join(WORLD_FILE))?;
    let reps = load_reps(out)?;
    let sids: BTreeMap<ItemId, Vec<u32>> = read_json(&out.join(SIDS_FILE))?;
    let completed: Vec<CompletedSeq> = read_json(&out.join(COMPLETED_FILE))?;
    let rcfg = ranker_config(cfg);
    let params = load_checkpoint(&out.join(RANKER_CKPT_FILE))?;
    check_schema(&out.join(RANKER_CKPT_FILE), &params, &init_ranker_params(&rcfg))?;
    let feats = item_features(&world);
    let inputs = RankInputs {
        reps: &reps,
        sids: &sids,
        feats: &feats,
        histories: &completed,
    };
    let test = rank_impressions(&world.impressions_test);
    let scores = score_impressions(&params, &rcfg, &inputs, &test)?;

    let mut lines = String::new();
    for (imp, &score) in test.iter().zip(&scores) {
        let scored = ScoredImpression {
            user_id: imp.user_id,
            item_id: imp.item_id,
            score,
        };
        lines.push_str(&serde_json::to_string(&scored)?);
        lines.push('\n');
    }
    let scores_path = out.join(SCORES_FILE);
    fs::write(&scores_path, lines).map_err(|e| Error::io(scores_path, e))?;

    let labels: Vec<bool> = test.iter().map(|i| i.label).collect();
    let mut by_user: BTreeMap<UserId, UserOutcomes> = BTreeMap::new();
    for (imp, &score) in test.iter().zip(&scores) {
        let entry = by_user.entry(imp.user_id).or_insert_with(|| UserOutcomes {
            scores: Vec::new(),
            labels: Vec::new(),
        });
        entry.scores.push(score);
        entry.labels.push(imp.label);
    }
    let users: Vec<UserOutcomes> = by_user.into_values().collect();
    let mut rows = Vec::new();
    rows.push(MetricReport {
        name: "ranker".to_string(),
        values: BTreeMap::from([
            ("auc".to_string(), auc(&scores, &labels)?),
            ("gauc".to_string(), gauc(&users)?),
        ]),
        counts: BTreeMap::from([
            ("impressions".to_string(), test.len() as u64),
            ("users".to_string(), users.len() as u64),
        ]),
    });

    let observed: BTreeMap<UserId, Vec<ItemId>> = world
        .observed
        .iter()
        .map(|s| (s.user_id, s.events.iter().map(|e| e.item_id).collect()))
        .collect();
    let cases: Vec<RetrievalCase> = test
        .iter()
        .filter(|imp| imp.label)
        .filter_map(|imp| {
            observed.get(&imp.user_id).map(|history| RetrievalCase {
                history: history.clone(),
                target: imp.item_id,
            })
        })
        .collect();
    let mut values = BTreeMap::new();
    let mut counts = BTreeMap::from([("cases".to_string(), cases.len() as u64)]);
    if !cases.is_empty() {
        values.insert(
            format!("hr@{}", cfg.eval.hr_k),
            hr_at_k(&cases, &reps, cfg.eval.hr_k)?,
        );
    }
    let spus: BTreeMap<ItemId, u64> = world.catalog.iter().map(|i| (i.item_id, i.spu_id)).collect();
    let sm = sm_hr_at_k(&spus, &reps, cfg.eval.sm_hr_k)?;
    if let Some(rate) = sm.hit_rate {
        values.insert(format!("sm_hr@{}", cfg.eval.sm_hr_k), rate);
    }
    counts.insert("sm_evaluated".to_string(), sm.evaluated as u64);
    counts.insert("sm_singletons".to_string(), sm.singletons as u64);
    rows.push(MetricReport {
        name: "retrieval".to_string(),
        values,
        counts,
    });
    write_json(&out.join(METRICS_FILE), &rows)
}

fn stage_report(cfg: &RunConfig, out: &Path) -> Result<()> {
    let location: LocationReport = read_json(&out.join(LOCATION_REPORT_FILE))?;
    let stats: RqVaeStats = read_json(&out.join(RQVAE_STATS_FILE))?;
    let dllm_trace: Vec<DllmTracePoint> = read_json(&out.join(DLLM_TRACE_FILE))?;
    let ranker_trace: Vec<CtrTracePoint> = read_json(&out.join(RANKER_TRACE_FILE))?;
    let metrics: Vec<MetricReport> = read_json(&out.join(METRICS_FILE))?;

    let mut rows = Vec::new();
    rows.push(MetricReport {
        name: "location".to_string(),
        values: BTreeMap::from([
            ("precision".to_string(), location.precision),
            ("recall".to_string(), location.recall),
        ]),
        counts: BTreeMap::from([
            ("flagged".to_string(), location.flagged as u64),
            ("hits".to_string(), location.hits as u64),
            ("truth_gaps".to_string(), location.truth_gaps as u64),
        ]),
    });
    rows.push(MetricReport {
        name: "rqvae".to_string(),
        values: BTreeMap::from([
            ("initial_recon".to_string(), stats.initial_recon),
            ("final_recon".to_string(), stats.final_recon),
            ("final_loss".to_string(), stats.final_loss),
        ]),
        counts: BTreeMap::from([("reseeded".to_string(), stats.reseeded as u64)]),
    });
    let mut dllm_values = BTreeMap::new();
    if let Some(last) = dllm_trace.last() {
        dllm_values.insert("loss".to_string(), last.loss);
    }
    if let Some(point) = dllm_trace.iter().rev().find(|p| p.ib_mask.is_some()) {
        let ib = point.ib_mask.as_ref().unwrap();
        dllm_values.insert("ib_mask_ppl".to_string(), ib.ppl);
        dllm_values.insert("ib_mask_acc".to_string(), ib.acc);
    }
    rows.push(MetricReport {
        name: "dllm".to_string(),
        values: dllm_values,
        counts: BTreeMap::from([("steps".to_string(), dllm_trace.len() as u64)]),
    });
    let mut ranker_values = BTreeMap::new();
    if let Some(last) = ranker_trace.last() {
        ranker_values.insert("loss".to_string(), last.loss);
    }
    rows.push(MetricReport {
        name: "ranker-train".to_string(),
        values: ranker_values,
        counts: BTreeMap::from([("steps".to_string(), ranker_trace.len() as u64)]),
    });
    rows.extend(metrics);

    let mut text = String::new();
    text.push_str("reaseq run\n==========\n\n");
    text.push_str(&render_table(&rows));
    text.push_str("\nconfiguration\n=============\n\n");
    text.push_str(&cfg.to_toml_string()?);
    let path = out.join(REPORT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
