//! Multi-agent knowledge extraction over an LLM client.
//!
//! Three layers, each a prompt round-trip with schema validation and one
//! repair attempt:
//!
//! 1. demand mining: user queries for a category -> demand dimensions;
//! 2. attribute mining: merchant attribute keys for a scope -> canonical
//!    product dimensions with synonym merges and provenance against the
//!    parent scope's dimensions;
//! 3. knowledge generation: one item plus the mined taxonomy -> structured
//!    knowledge entries from both the demand and the product perspective.
//!
//! Replies are cached on disk keyed by a hash of the prompt, so reruns cost
//! zero client calls. [`MockAgent`] answers every prompt deterministically
//! from the structured input block each prompt embeds, which keeps the whole
//! pipeline runnable offline.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::collections::VecDeque;
use std::path::PathBuf;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{ItemKnowledge, KnowledgeEntry};
use crate::error::{Error, Result};
use crate::types::ItemId;
use crate::worldgen::World;

pub const MAX_LABEL_CHARS: usize = 15;

pub trait LlmClient {
    fn complete(&self, prompt: &str) -> Result<String>;
}

// ---------------------------------------------------------------------------
// Prompts. Each embeds exactly one fenced JSON input block.

const DEMAND_PROMPT: &str = "TASK: demand-dimensions\n\
You study what shoppers are trying to accomplish. Below are a product \
category and a sample of user queries from that category. Identify the \
distinct demand dimensions the queries express, i.e. the kinds of need a \
shopper wants satisfied. Use short lowercase labels. Reply with JSON only, \
shaped as {\"dimensions\": [\"label\"]}.\n\n```json\n{INPUT}\n```\n";

const ATTR_PROMPT: &str = "TASK: attribute-dimensions\n\
You curate a product attribute taxonomy. Below are a catalog scope, the \
attribute dimensions its parent scope already defines, and the raw attribute \
keys merchants used inside the scope. Group keys that mean the same thing \
under one canonical dimension, keep a dimension's name stable when the \
parent already defines it, and add genuinely new dimensions when no parent \
dimension fits. Reply with JSON only, shaped as {\"dimensions\": [{\"name\": \
\"label\", \"merged_keys\": [\"raw\"], \"provenance\": \"inherited\" | \
\"new\"}]}.\n\n```json\n{INPUT}\n```\n";

const KNOWLEDGE_PROMPT: &str = "TASK: item-knowledge\n\
You write structured shopping knowledge for one item. Below are the item's \
listing facts, its merchant attribute table, and the dimension systems for \
its category: demand dimensions (what a shopper wants) and product \
dimensions (what the item is). For every dimension you can ground in the \
facts, produce one entry with a one-sentence analysis and up to three short \
keywords a retrieval system could match. Reply with JSON only, shaped as \
{\"user_demand\": [{\"dimension\": \"...\", \"analysis\": \"...\", \
\"keywords\": [\"...\"]}], \"product_attribute\": [...]}.\n\n\
```json\n{INPUT}\n```\n";

const REPAIR_PROMPT: &str = "TASK: repair\n\
Your previous reply could not be used: {ERROR}\n\
Answer the original request below again. Reply with valid JSON only, no \
prose, no code fences.\n---\n{ORIGINAL}";

fn fill(template: &str, input: &serde_json::Value) -> String {
    template.replace(
        "{INPUT}",
        &serde_json::to_string_pretty(input).expect("input serializes"),
    )
}

/// The structured input block a prompt carries.
fn input_block(prompt: &str) -> Result<serde_json::Value> {
    let start = prompt
        .find("```json\n")
        .ok_or_else(|| Error::agent("prompt", "prompt has no input block"))?;
    let rest = &prompt[start + 8..];
    let end = rest
        .find("\n```")
        .ok_or_else(|| Error::agent("prompt", "prompt input block is unterminated"))?;
    Ok(serde_json::from_str(&rest[..end])?)
}

// ---------------------------------------------------------------------------
// Reply schemas.

#[derive(Debug, Deserialize)]
struct DemandReply {
    dimensions: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Inherited,
    New,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrDim {
    pub name: String,
    pub merged_keys: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Deserialize)]
struct AttrReply {
    dimensions: Vec<AttrDim>,
}

fn strip_fences(reply: &str) -> &str {
    let t = reply.trim();
    let Some(t) = t.strip_prefix("```") else {
        return t;
    };
    let t = t.trim_start_matches("json");
    let t = t.strip_suffix("```").unwrap_or(t);
    t.trim()
}

fn parse_reply<T: DeserializeOwned>(reply: &str) -> Result<T> {
    serde_json::from_str(strip_fences(reply))
        .map_err(|e| Error::agent("schema", format!("reply is not valid JSON for the schema: {e}")))
}

/// Labels stay short enough to act as dimension keys downstream.
fn normalize_label(raw: &str) -> String {
    let label = raw.trim();
    if label.chars().count() > MAX_LABEL_CHARS {
        let cut: String = label.chars().take(MAX_LABEL_CHARS).collect();
        log::warn!("truncating dimension label {label:?} to {cut:?}");
        cut
    } else {
        label.to_string()
    }
}

fn check_demand(reply: &DemandReply) -> Result<()> {
    if reply.dimensions.is_empty() {
        return Err(Error::agent("schema", "no demand dimensions returned"));
    }
    if reply.dimensions.iter().any(|d| d.trim().is_empty()) {
        return Err(Error::agent("schema", "empty demand dimension label"));
    }
    Ok(())
}

fn check_attrs(reply: &AttrReply) -> Result<()> {
    if reply.dimensions.is_empty() {
        return Err(Error::agent("schema", "no attribute dimensions returned"));
    }
    for dim in &reply.dimensions {
        if dim.name.trim().is_empty() {
            return Err(Error::agent("schema", "empty attribute dimension name"));
        }
        if dim.merged_keys.is_empty() {
            return Err(Error::agent("schema", format!("dimension '{}' merged no keys", dim.name)));
        }
    }
    Ok(())
}

fn check_knowledge(k: &ItemKnowledge) -> Result<()> {
    let entries = k.user_demand.iter().chain(&k.product_attribute);
    let mut any = false;
    for entry in entries {
        any = true;
        if entry.dimension.trim().is_empty() {
            return Err(Error::agent("schema", "knowledge entry has an empty dimension"));
        }
        if entry.keywords.is_empty() || entry.keywords.len() > 5 {
            return Err(Error::agent(
                "schema",
                format!("dimension '{}' must carry 1..=5 keywords", entry.dimension),
            ));
        }
        if entry.keywords.iter().any(|k| k.trim().is_empty()) {
            return Err(Error::agent("schema", "empty keyword"));
        }
    }
    if !any {
        return Err(Error::agent("schema", "knowledge has no entries"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Prompt cache.

pub struct PromptCache {
    dir: PathBuf,
}

impl PromptCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(PromptCache { dir })
    }

    fn path_for(&self, prompt: &str) -> PathBuf {
        let mut h = Sha256::new();
        h.update(prompt.as_bytes());
        let key: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, prompt: &str) -> Option<String> {
        std::fs::read_to_string(self.path_for(prompt)).ok()
    }

    /// Atomic: a crash mid-write never leaves a truncated entry.
    pub fn put(&self, prompt: &str, reply: &str) -> Result<()> {
        let path = self.path_for(prompt);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, reply).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

/// One validated round-trip: cache, ask, repair once, fail.
fn ask<T: DeserializeOwned>(
    client: &dyn LlmClient,
    cache: Option<&PromptCache>,
    prompt: &str,
    check: impl Fn(&T) -> Result<()>,
) -> Result<T> {
    if let Some(cache) = cache {
        if let Some(reply) = cache.get(prompt) {
            if let Ok(parsed) = parse_reply::<T>(&reply).and_then(|p| check(&p).map(|_| p)) {
                return Ok(parsed);
            }
            // Stale or corrupt cache entries fall through to a fresh ask.
        }
    }
    let reply = client.complete(prompt)?;
    let outcome = parse_reply::<T>(&reply).and_then(|p| check(&p).map(|_| p));
    let (reply, parsed) = match outcome {
        Ok(parsed) => (reply, parsed),
        Err(first_err) => {
            let repair = REPAIR_PROMPT
                .replace("{ERROR}", &first_err.to_string())
                .replace("{ORIGINAL}", prompt);
            let retry = client.complete(&repair)?;
            let parsed = parse_reply::<T>(&retry)
                .and_then(|p| check(&p).map(|_| p))
                .map_err(|e| {
                    Error::agent("schema", format!("reply failed validation twice: {first_err}; then {e}"))
                })?;
            (retry, parsed)
        }
    };
    if let Some(cache) = cache {
        cache.put(prompt, &reply)?;
    }
    Ok(parsed)
}

// ---------------------------------------------------------------------------
// The three layers.

pub fn mine_demand_dims(
    client: &dyn LlmClient,
    cache: Option<&PromptCache>,
    category: &str,
    queries: &[String],
) -> Result<Vec<String>> {
    let input = serde_json::json!({ "category": category, "queries": queries });
    let reply: DemandReply = ask(client, cache, &fill(DEMAND_PROMPT, &input), check_demand)?;
    let set: BTreeSet<String> = reply.dimensions.iter().map(|d| normalize_label(d)).collect();
    Ok(set.into_iter().collect())
}

pub fn mine_attr_dims(
    client: &dyn LlmClient,
    cache: Option<&PromptCache>,
    scope: &str,
    parent_dims: &[String],
    raw_keys: &[String],
) -> Result<Vec<AttrDim>> {
    if raw_keys.is_empty() {
        return Ok(Vec::new());
    }
    let input = serde_json::json!({
        "scope": scope,
        "parent_dimensions": parent_dims,
        "attribute_keys": raw_keys,
    });
    let reply: AttrReply = ask(client, cache, &fill(ATTR_PROMPT, &input), check_attrs)?;
    let mut dims: Vec<AttrDim> = reply
        .dimensions
        .into_iter()
        .map(|mut d| {
            d.name = normalize_label(&d.name);
            d.merged_keys.sort();
            d.merged_keys.dedup();
            d
        })
        .collect();
    dims.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(dims)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_knowledge(
    client: &dyn LlmClient,
    cache: Option<&PromptCache>,
    item_id: ItemId,
    category: &str,
    subcategory: &str,
    spu_id: u64,
    facts: &BTreeMap<String, String>,
    merchant_attributes: &BTreeMap<String, String>,
    demand_dims: &[String],
    product_dims: &[String],
) -> Result<ItemKnowledge> {
    let input = serde_json::json!({
        "item_id": item_id,
        "category": category,
        "subcategory": subcategory,
        "spu_id": spu_id,
        "facts": facts,
        "merchant_attributes": merchant_attributes,
        "demand_dimensions": demand_dims,
        "product_dimensions": product_dims,
    });
    ask(client, cache, &fill(KNOWLEDGE_PROMPT, &input), check_knowledge)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentsOutput {
    /// Top category -> demand dimensions.
    pub demand: BTreeMap<String, Vec<String>>,
    /// Scope (top category or subcategory) -> product dimensions.
    pub product: BTreeMap<String, Vec<AttrDim>>,
    pub knowledge: BTreeMap<ItemId, ItemKnowledge>,
}

/// Full pass over a world: taxonomy per category, then knowledge per item.
pub fn run_agents(
    client: &dyn LlmClient,
    cache: Option<&PromptCache>,
    world: &World,
) -> Result<AgentsOutput> {
    let mut demand = BTreeMap::new();
    for (cat, queries) in &world.queries {
        let texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
        demand.insert(cat.clone(), mine_demand_dims(client, cache, cat, &texts)?);
    }

    // Raw merchant keys per top category and per subcategory.
    let mut cat_keys: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut sub_keys: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for item in &world.catalog {
        let (cat, sub) = &item.category_path;
        for key in item.raw_attributes.keys() {
            cat_keys.entry(cat.clone()).or_default().insert(key.clone());
            sub_keys.entry(sub.clone()).or_default().insert(key.clone());
        }
    }

    let mut product: BTreeMap<String, Vec<AttrDim>> = BTreeMap::new();
    for (cat, keys) in &cat_keys {
        let keys: Vec<String> = keys.iter().cloned().collect();
        product.insert(cat.clone(), mine_attr_dims(client, cache, cat, &[], &keys)?);
    }
    for (sub, keys) in &sub_keys {
        let cat = sub.split('/').next().unwrap_or(sub).to_string();
        let parent: Vec<String> = product
            .get(&cat)
            .map(|dims| dims.iter().map(|d| d.name.clone()).collect())
            .unwrap_or_default();
        let keys: Vec<String> = keys.iter().cloned().collect();
        product.insert(sub.clone(), mine_attr_dims(client, cache, sub, &parent, &keys)?);
    }

    let mut knowledge = BTreeMap::new();
    for item in &world.catalog {
        let (cat, sub) = &item.category_path;
        let demand_dims = demand.get(cat).cloned().unwrap_or_default();
        let product_dims: Vec<String> = product
            .get(sub)
            .map(|dims| dims.iter().map(|d| d.name.clone()).collect())
            .unwrap_or_default();
        let k = generate_knowledge(
            client,
            cache,
            item.item_id,
            cat,
            sub,
            item.spu_id,
            &item.attributes,
            &item.raw_attributes,
            &demand_dims,
            &product_dims,
        )?;
        knowledge.insert(item.item_id, k);
    }

    Ok(AgentsOutput {
        demand,
        product,
        knowledge,
    })
}

// ---------------------------------------------------------------------------
// Clients.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HttpLlmConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f32,
    pub timeout_secs: u64,
}

impl Default for HttpLlmConfig {
    fn default() -> Self {
        HttpLlmConfig {
            endpoint: "http://localhost:8000/v1/chat/completions".to_string(),
            model: "default".to_string(),
            api_key_env: "LLM_API_KEY".to_string(),
            temperature: 0.0,
            timeout_secs: 120,
        }
    }
}

/// Chat-completions client for any OpenAI-compatible endpoint.
pub struct HttpClient {
    config: HttpLlmConfig,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(config: HttpLlmConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        HttpClient { config, agent }
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let key = std::env::var(&self.config.api_key_env).map_err(|_| {
            Error::config(format!(
                "environment variable {} is not set",
                self.config.api_key_env
            ))
        })?;
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let response = self
            .agent
            .post(&self.config.endpoint)
            .set("Authorization", &format!("Bearer {key}"))
            .send_json(body)
            .map_err(|e| match e {
                ureq::Error::Status(code, resp) => Error::agent(
                    code.to_string(),
                    resp.into_string().unwrap_or_else(|_| "unreadable body".into()),
                ),
                ureq::Error::Transport(t) => Error::agent("transport", t.to_string()),
            })?;
        let parsed: serde_json::Value = response.into_json().map_err(|e| Error::agent("protocol", e.to_string()))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::agent("protocol", "response carries no message content"))
    }
}

/// Deterministic offline agent: answers from the structured input block each
/// prompt embeds, resolving merchant keys through a synonym table.
pub struct MockAgent {
    synonyms: BTreeMap<String, String>,
}

impl MockAgent {
    pub fn new(synonyms: BTreeMap<String, String>) -> Self {
        MockAgent { synonyms }
    }

    pub fn for_world(world: &World) -> Self {
        MockAgent::new(world.synonyms.clone())
    }

    fn canonical(&self, raw: &str) -> String {
        self.synonyms.get(raw).cloned().unwrap_or_else(|| raw.to_string())
    }

    fn answer_demand(&self, input: &serde_json::Value) -> String {
        let mut dims = BTreeSet::new();
        if let Some(queries) = input["queries"].as_array() {
            for q in queries.iter().filter_map(|q| q.as_str()) {
                // Planted queries carry their dimension as kw-<dim>-... tokens.
                for token in q.split_whitespace() {
                    if let Some(rest) = token.strip_prefix("kw-") {
                        if let Some(dim) = rest.split('-').next() {
                            dims.insert(dim.to_string());
                        }
                    }
                }
            }
        }
        if dims.is_empty() {
            dims.insert("general".to_string());
        }
        serde_json::json!({ "dimensions": dims.into_iter().collect::<Vec<_>>() }).to_string()
    }

    fn answer_attrs(&self, input: &serde_json::Value) -> String {
        let parents: BTreeSet<String> = input["parent_dimensions"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
            .unwrap_or_default();
        let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        if let Some(keys) = input["attribute_keys"].as_array() {
            for key in keys.iter().filter_map(|k| k.as_str()) {
                groups.entry(self.canonical(key)).or_default().insert(key.to_string());
            }
        }
        let dims: Vec<serde_json::Value> = groups
            .into_iter()
            .map(|(name, merged)| {
                let provenance = if parents.contains(&name) { "inherited" } else { "new" };
                serde_json::json!({
                    "name": name,
                    "merged_keys": merged.into_iter().collect::<Vec<_>>(),
                    "provenance": provenance,
                })
            })
            .collect();
        serde_json::json!({ "dimensions": dims }).to_string()
    }

    fn answer_knowledge(&self, input: &serde_json::Value) -> String {
        let topic: String = input["category"]
            .as_str()
            .unwrap_or("")
            .chars()
            .filter(|c| c.is_ascii_digit())
            .collect();
        let fam = format!("fam-t{topic}");
        let spu = format!("spu-{}", input["spu_id"].as_u64().unwrap_or(0));
        let lookup = |dim: &str| -> Option<String> {
            if let Some(v) = input["facts"][dim].as_str() {
                return Some(v.to_string());
            }
            // Fall back to the merchant table, resolving synonyms.
            input["merchant_attributes"].as_object().and_then(|m| {
                m.iter()
                    .find(|(k, _)| self.canonical(k) == dim)
                    .and_then(|(_, v)| v.as_str().map(String::from))
            })
        };
        let entries = |dims_key: &str| -> Vec<KnowledgeEntry> {
            input[dims_key]
                .as_array()
                .map(|dims| {
                    dims.iter()
                        .filter_map(|d| d.as_str())
                        .filter_map(|dim| {
                            lookup(dim).map(|kw| KnowledgeEntry {
                                dimension: dim.to_string(),
                                analysis: format!("{dim} grounded in {kw}"),
                                keywords: vec![kw, fam.clone(), spu.clone()],
                            })
                        })
                        .collect()
                })
                .unwrap_or_default()
        };
        let knowledge = ItemKnowledge {
            user_demand: entries("demand_dimensions"),
            product_attribute: entries("product_dimensions"),
        };
        serde_json::to_string(&knowledge).expect("knowledge serializes")
    }
}

impl LlmClient for MockAgent {
    fn complete(&self, prompt: &str) -> Result<String> {
        if let Some(rest) = prompt.strip_prefix("TASK: repair\n") {
            let original = rest
                .split_once("---\n")
                .map(|(_, orig)| orig)
                .ok_or_else(|| Error::agent("prompt", "repair prompt lacks the original request"))?;
            return self.complete(original);
        }
        let input = input_block(prompt)?;
        if prompt.starts_with("TASK: demand-dimensions") {
            Ok(self.answer_demand(&input))
        } else if prompt.starts_with("TASK: attribute-dimensions") {
            Ok(self.answer_attrs(&input))
        } else if prompt.starts_with("TASK: item-knowledge") {
            Ok(self.answer_knowledge(&input))
        } else {
            Err(Error::agent("prompt", "unrecognized task header"))
        }
    }
}

/// Test helper: counts calls and optionally garbles the first few replies.
pub struct CountingClient<'a> {
    inner: &'a dyn LlmClient,
    pub calls: Cell<usize>,
    garble_first: Cell<usize>,
}

impl<'a> CountingClient<'a> {
    pub fn new(inner: &'a dyn LlmClient) -> Self {
        CountingClient {
            inner,
            calls: Cell::new(0),
            garble_first: Cell::new(0),
        }
    }

    pub fn garbling(inner: &'a dyn LlmClient, n: usize) -> Self {
        let c = CountingClient::new(inner);
        c.garble_first.set(n);
        c
    }
}

impl LlmClient for CountingClient<'_> {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.calls.set(self.calls.get() + 1);
        if self.garble_first.get() > 0 {
            self.garble_first.set(self.garble_first.get() - 1);
            return Ok("sorry, here is some prose instead of JSON".to_string());
        }
        self.inner.complete(prompt)
    }
}

/// Test helper: replays a fixed list of replies.
pub struct ScriptedClient {
    replies: RefCell<VecDeque<String>>,
}

impl ScriptedClient {
    pub fn new(replies: Vec<&str>) -> Self {
        ScriptedClient {
            replies: RefCell::new(replies.into_iter().map(String::from).collect()),
        }
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, _prompt: &str) -> Result<String> {
        self.replies
            .borrow_mut()
            .pop_front()
            .ok_or_else(|| Error::agent("script", "script exhausted"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_world, WorldConfig, DEMAND_DIMS, PRODUCT_DIMS};

    fn mock() -> MockAgent {
        let mut syn = BTreeMap::new();
        for (raw, canon) in [
            ("material", "material"),
            ("fabric", "material"),
            ("function", "function"),
            ("use", "function"),
            ("quality", "quality"),
            ("grade", "quality"),
        ] {
            syn.insert(raw.to_string(), canon.to_string());
        }
        MockAgent::new(syn)
    }

    #[test]
    fn demand_mining_recovers_planted_dimensions() {
        let queries = vec![
            "looking for kw-comfort-t0-v1 options in cat0".to_string(),
            "need something kw-style-t0-v2 please".to_string(),
            "more kw-comfort-t0-v0 ideas".to_string(),
        ];
        let dims = mine_demand_dims(&mock(), None, "cat0", &queries).unwrap();
        assert_eq!(dims, vec!["comfort".to_string(), "style".to_string()]);
    }

    #[test]
    fn synonym_keys_merge_into_one_inherited_dimension() {
        let keys = vec!["material".to_string(), "fabric".to_string()];
        let parent = vec!["material".to_string()];
        let dims = mine_attr_dims(&mock(), None, "cat0/sub0", &parent, &keys).unwrap();
        assert_eq!(dims.len(), 1);
        assert_eq!(dims[0].name, "material");
        assert_eq!(dims[0].merged_keys, vec!["fabric", "material"]);
        assert_eq!(dims[0].provenance, Provenance::Inherited);
    }

    #[test]
    fn unknown_key_becomes_new_dimension() {
        let keys = vec!["fabric".to_string(), "edition".to_string()];
        let parent = vec!["material".to_string()];
        let dims = mine_attr_dims(&mock(), None, "cat0/sub0", &parent, &keys).unwrap();
        assert_eq!(dims.len(), 2);
        assert_eq!(dims[0].name, "edition");
        assert_eq!(dims[0].provenance, Provenance::New);
        assert_eq!(dims[1].name, "material");
        assert_eq!(dims[1].provenance, Provenance::Inherited);
    }

    #[test]
    fn long_labels_truncate() {
        let client = ScriptedClient::new(vec![
            r#"{"dimensions": ["a-very-long-dimension-label-indeed"]}"#,
        ]);
        let dims = mine_demand_dims(&client, None, "cat0", &["q".to_string()]).unwrap();
        assert_eq!(dims, vec!["a-very-long-dim".to_string()]);
        assert_eq!(dims[0].chars().count(), MAX_LABEL_CHARS);
    }

    #[test]
    fn one_repair_round_recovers_from_garbage() {
        let inner = mock();
        let client = CountingClient::garbling(&inner, 1);
        let dims = mine_demand_dims(
            &client,
            None,
            "cat0",
            &["kw-style-t0-v0 please".to_string()],
        )
        .unwrap();
        assert_eq!(dims, vec!["style".to_string()]);
        assert_eq!(client.calls.get(), 2);
    }

    #[test]
    fn two_bad_replies_fail_with_agent_error() {
        let client = ScriptedClient::new(vec!["not json", "still not json"]);
        let err = mine_demand_dims(&client, None, "cat0", &["q".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Agent { .. }), "{err}");
        assert!(err.to_string().contains("twice"));
    }

    #[test]
    fn fenced_replies_parse() {
        let client = ScriptedClient::new(vec!["```json\n{\"dimensions\": [\"fit\"]}\n```"]);
        let dims = mine_demand_dims(&client, None, "cat0", &["q".to_string()]).unwrap();
        assert_eq!(dims, vec!["fit".to_string()]);
    }

    #[test]
    fn cache_makes_reruns_free() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = PromptCache::new(tmp.path()).unwrap();
        let inner = mock();
        let queries = vec!["kw-comfort-t0-v0 please".to_string()];

        let first = CountingClient::new(&inner);
        mine_demand_dims(&first, Some(&cache), "cat0", &queries).unwrap();
        assert_eq!(first.calls.get(), 1);

        let second = CountingClient::new(&inner);
        let dims = mine_demand_dims(&second, Some(&cache), "cat0", &queries).unwrap();
        assert_eq!(second.calls.get(), 0);
        assert_eq!(dims, vec!["comfort".to_string()]);
    }

    #[test]
    fn corrupt_cache_entries_refetch() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = PromptCache::new(tmp.path()).unwrap();
        let queries = vec!["kw-comfort-t0-v0 please".to_string()];
        let prompt = fill(
            DEMAND_PROMPT,
            &serde_json::json!({ "category": "cat0", "queries": queries }),
        );
        cache.put(&prompt, "garbage").unwrap();

        let inner = mock();
        let client = CountingClient::new(&inner);
        let dims = mine_demand_dims(&client, Some(&cache), "cat0", &queries).unwrap();
        assert_eq!(client.calls.get(), 1);
        assert_eq!(dims, vec!["comfort".to_string()]);
        // And the bad entry was replaced.
        assert_eq!(cache.get(&prompt).unwrap().contains("comfort"), true);
    }

    #[test]
    fn knowledge_closes_the_loop_against_the_catalog() {
        let cfg = WorldConfig {
            n_items: 32,
            n_categories: 4,
            n_spu_groups: 8,
            n_users: 4,
            extra_dim_prob: 0.0,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg, 5).unwrap();
        let agent = MockAgent::for_world(&world);
        let item = &world.catalog[9];
        let k = generate_knowledge(
            &agent,
            None,
            item.item_id,
            &item.category_path.0,
            &item.category_path.1,
            item.spu_id,
            &item.attributes,
            &item.raw_attributes,
            &DEMAND_DIMS.map(String::from),
            &PRODUCT_DIMS.map(String::from),
        )
        .unwrap();
        assert_eq!(k, item.knowledge);
    }

    #[test]
    fn full_run_recovers_taxonomy_and_knowledge() {
        let cfg = WorldConfig {
            n_items: 48,
            n_categories: 4,
            n_spu_groups: 12,
            n_users: 6,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg, 8).unwrap();
        let agent = MockAgent::for_world(&world);
        let out = run_agents(&agent, None, &world).unwrap();

        let want: Vec<String> = {
            let mut d: Vec<String> = DEMAND_DIMS.iter().map(|s| s.to_string()).collect();
            d.sort();
            d
        };
        for dims in out.demand.values() {
            assert_eq!(dims, &want);
        }
        for (scope, dims) in &out.product {
            let names: BTreeSet<&str> = dims.iter().map(|d| d.name.as_str()).collect();
            for dim in &PRODUCT_DIMS {
                assert!(names.contains(dim), "{scope} is missing {dim}");
            }
        }
        assert_eq!(out.knowledge.len(), world.catalog.len());
        for item in world.catalog.iter().step_by(5) {
            let got = &out.knowledge[&item.item_id];
            // Planted dims reproduce the catalog (mined taxonomy is sorted,
            // so order-insensitive); the novel dimension may add entries.
            let mut want = item.knowledge.user_demand.clone();
            want.sort_by(|a, b| a.dimension.cmp(&b.dimension));
            let mut have = got.user_demand.clone();
            have.sort_by(|a, b| a.dimension.cmp(&b.dimension));
            assert_eq!(have, want);
            for entry in &item.knowledge.product_attribute {
                assert!(got.product_attribute.contains(entry));
            }
        }
    }

    #[test]
    fn http_client_requires_api_key_env() {
        let client = HttpClient::new(HttpLlmConfig {
            api_key_env: "REASEQ_TEST_KEY_THAT_IS_NOT_SET".to_string(),
            ..HttpLlmConfig::default()
        });
        let err = client.complete("hello").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
