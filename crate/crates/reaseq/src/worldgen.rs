//! Seeded synthetic world with planted ground truth.
//!
//! The generator builds a catalog organized by latent topic, users whose
//! interests are archetype mixtures over those topics, topic-Markov sessions
//! with realistic time gaps, and click-labeled impressions driven by
//! user-item affinity. A configurable share of behavior is then censored to
//! an external channel: whole sessions removed at boundaries where the
//! category changes (detectable in principle), plus short in-session runs
//! with small gaps and no category change (undetectable by design). The
//! planted `HiddenTruth` is exact: splicing hidden runs back after their gap
//! indices reconstructs the full sequence.
//!
//! Every draw comes from a named stream of the root seed, keyed by item,
//! user, or stage, so growing the world leaves existing entities untouched.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{ItemKnowledge, KnowledgeEntry};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::types::{CategoryPath, ItemId, UserId};

pub const DEMAND_DIMS: [&str; 3] = ["scenario", "comfort", "style"];
pub const PRODUCT_DIMS: [&str; 3] = ["material", "function", "quality"];
/// Rare merchant-specific attribute that no parent taxonomy covers.
pub const NOVEL_DIM: &str = "edition";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_items: usize,
    /// One top-level category per latent topic.
    pub n_categories: usize,
    pub n_spu_groups: usize,
    pub latent_dim: usize,
    pub n_users: usize,
    pub interests_per_user: usize,
    pub sessions_per_user: (u32, u32),
    pub session_len: (u32, u32),
    /// Seconds between events inside a session.
    pub gap_within: (u64, u64),
    /// Seconds between sessions; must dwarf `gap_within`.
    pub gap_between: (u64, u64),
    pub topic_switch_prob: f32,
    /// Probability that an eligible episode is censored.
    pub hide_prob: f32,
    /// Share of censored episodes planted as detectable (session-boundary,
    /// category-changing); the rest are undetectable in-session runs.
    pub detectable_fraction: f32,
    /// Length range of undetectable in-session hidden runs.
    pub hidden_run_len: (u32, u32),
    pub impressions_per_user: u32,
    /// Probability a candidate is drawn from the user's own topics.
    pub in_topic_candidate_prob: f32,
    /// Temperature of the click model; lower means labels follow affinity sign.
    pub label_noise: f32,
    pub click_bias: f32,
    /// Spread of item latents around their topic center.
    pub item_noise: f32,
    /// Probability an item carries the novel merchant attribute.
    pub extra_dim_prob: f32,
    pub queries_per_dim: u32,
    /// Probability a raw attribute key uses a merchant synonym.
    pub synonym_prob: f32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_items: 400,
            n_categories: 8,
            n_spu_groups: 120,
            latent_dim: 16,
            n_users: 300,
            interests_per_user: 3,
            sessions_per_user: (6, 10),
            session_len: (4, 9),
            gap_within: (10, 300),
            gap_between: (7200, 86400),
            topic_switch_prob: 0.15,
            hide_prob: 0.3,
            detectable_fraction: 0.8,
            hidden_run_len: (1, 2),
            impressions_per_user: 40,
            in_topic_candidate_prob: 0.5,
            label_noise: 0.18,
            click_bias: 0.35,
            item_noise: 0.25,
            extra_dim_prob: 0.05,
            queries_per_dim: 4,
            synonym_prob: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 || self.n_items < 2 * self.n_categories {
            return Err(Error::config(
                "need at least two items per category (n_items >= 2 * n_categories)",
            ));
        }
        if self.latent_dim < 2 {
            return Err(Error::config("latent_dim must be at least 2"));
        }
        if self.n_users == 0 {
            return Err(Error::config("n_users must be positive"));
        }
        if self.interests_per_user == 0 || self.interests_per_user > self.n_categories {
            return Err(Error::config(
                "interests_per_user must be in 1..=n_categories",
            ));
        }
        for (name, (lo, hi)) in [
            ("sessions_per_user", self.sessions_per_user),
            ("session_len", self.session_len),
            ("hidden_run_len", self.hidden_run_len),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        for (name, (lo, hi)) in [("gap_within", self.gap_within), ("gap_between", self.gap_between)] {
            if lo == 0 || lo > hi {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.gap_between.0 <= self.gap_within.1 {
            return Err(Error::config(
                "gap_between must start above gap_within's maximum",
            ));
        }
        for (name, p) in [
            ("topic_switch_prob", self.topic_switch_prob),
            ("hide_prob", self.hide_prob),
            ("detectable_fraction", self.detectable_fraction),
            ("in_topic_candidate_prob", self.in_topic_candidate_prob),
            ("extra_dim_prob", self.extra_dim_prob),
            ("synonym_prob", self.synonym_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.label_noise < 0.0 {
            return Err(Error::config("label_noise must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthItem {
    pub item_id: ItemId,
    pub topic: usize,
    pub category_path: CategoryPath,
    pub spu_id: u64,
    pub latent: Vec<f32>,
    /// Canonical dimension -> keyword; the ground truth behind all knowledge.
    pub attributes: BTreeMap<String, String>,
    /// Merchant-style attribute table; keys may be synonyms of canonical
    /// dimensions, and may include the novel dimension.
    pub raw_attributes: BTreeMap<String, String>,
    /// Side features consumed by the ranker (no label signal).
    pub features: Vec<f32>,
    pub knowledge: ItemKnowledge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthUser {
    pub user_id: UserId,
    pub topics: Vec<usize>,
    /// Mixture weights over `topics`, descending.
    pub weights: Vec<f32>,
    pub latent: Vec<f32>,
    /// Coarse profile features f_u: activity shape only, no interest leak.
    pub features: Vec<f32>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Platform,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: ItemId,
    pub ts: u64,
    pub channel: Channel,
    pub session: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: UserId,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapTruth {
    /// The gap sits after this index of the observed sequence.
    pub after_index: usize,
    pub hidden_item_ids: Vec<ItemId>,
    /// True when planted at a session boundary with a category change.
    pub detectable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenTruth {
    pub user_id: UserId,
    pub gaps: Vec<GapTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub label: bool,
    /// Generator-side truth, for Bayes-level checks only; never a feature.
    pub affinity: f32,
    pub f_u: Vec<f32>,
    pub f_c: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggedQuery {
    pub text: String,
    /// Latent demand dimension the query expresses.
    pub dimension: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub catalog: Vec<SynthItem>,
    pub users: Vec<SynthUser>,
    /// Per top-level category: user queries tagged with their demand dimension.
    pub queries: BTreeMap<String, Vec<TaggedQuery>>,
    /// Raw attribute key -> canonical dimension (identities included).
    pub synonyms: BTreeMap<String, String>,
    pub full_sequences: Vec<UserSequence>,
    pub observed: Vec<UserSequence>,
    pub truth: Vec<HiddenTruth>,
    pub impressions_train: Vec<Impression>,
    pub impressions_test: Vec<Impression>,
}

impl World {
    pub fn items_by_topic(&self) -> Vec<Vec<usize>> {
        let mut by_topic = vec![Vec::new(); self.config.n_categories];
        for (idx, item) in self.catalog.iter().enumerate() {
            by_topic[item.topic].push(idx);
        }
        by_topic
    }

    pub fn item(&self, id: ItemId) -> Result<&SynthItem> {
        // Item ids are 1-based and dense.
        self.catalog
            .get((id as usize).wrapping_sub(1))
            .filter(|it| it.item_id == id)
            .ok_or_else(|| Error::data(format!("unknown item id {id}")))
    }
}

fn sample_range_u64(rng: &mut impl Rng, (lo, hi): (u64, u64)) -> u64 {
    rng.gen_range(lo..=hi)
}

fn sample_range_u32(rng: &mut impl Rng, (lo, hi): (u32, u32)) -> u32 {
    rng.gen_range(lo..=hi)
}

fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 1e-12 {
        for x in v {
            *x /= norm;
        }
    }
}

fn unit_gaussian_ish(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    // Sum of uniforms is close enough to Gaussian for topic geometry.
    let mut v: Vec<f32> = (0..dim)
        .map(|_| (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).sum::<f32>())
        .collect();
    normalize(&mut v);
    v
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let centers = topic_centers(config, seed);
    let catalog = build_catalog(config, seed, &centers)?;
    let users = build_users(config, seed, &centers);
    let queries = build_queries(config, seed);
    let synonyms = synonym_table();

    let mut by_topic = vec![Vec::new(); config.n_categories];
    for item in &catalog {
        by_topic[item.topic].push(item.item_id);
    }

    let mut full_sequences = Vec::with_capacity(config.n_users);
    let mut observed = Vec::with_capacity(config.n_users);
    let mut truth = Vec::with_capacity(config.n_users);
    let mut users = users;
    for user in &mut users {
        let history = build_user_history(config, seed, user, &by_topic);
        user.features = history.profile_features.clone();
        full_sequences.push(UserSequence {
            user_id: user.user_id,
            events: history.full,
        });
        observed.push(UserSequence {
            user_id: user.user_id,
            events: history.observed,
        });
        truth.push(HiddenTruth {
            user_id: user.user_id,
            gaps: history.gaps,
        });
    }

    let mut impressions_train = Vec::new();
    let mut impressions_test = Vec::new();
    for user in &users {
        let (train, test) = build_impressions(config, seed, user, &catalog, &by_topic);
        impressions_train.extend(train);
        impressions_test.extend(test);
    }

    Ok(World {
        seed,
        config: config.clone(),
        catalog,
        users,
        queries,
        synonyms,
        full_sequences,
        observed,
        truth,
        impressions_train,
        impressions_test,
    })
}

fn topic_centers(config: &WorldConfig, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = stream_rng(seed, "world/topics");
    (0..config.n_categories)
        .map(|_| unit_gaussian_ish(&mut rng, config.latent_dim))
        .collect()
}

fn keyword(dim: &str, topic: usize, variant: u32) -> String {
    format!("kw-{dim}-t{topic}-v{variant}")
}

fn build_catalog(config: &WorldConfig, seed: u64, centers: &[Vec<f32>]) -> Result<Vec<SynthItem>> {
    let t = config.n_categories;
    // Consecutive in-topic items chunk into SPU groups of at least two.
    let spu_chunk = (config.n_items / config.n_spu_groups.max(1)).max(2);
    let mut items = Vec::with_capacity(config.n_items);
    let mut spu_variant_cache: BTreeMap<u64, BTreeMap<String, String>> = BTreeMap::new();
    for i in 0..config.n_items {
        let item_id = (i + 1) as ItemId;
        let topic = i % t;
        let within = i / t; // index of this item inside its topic
        let items_in_topic = (config.n_items - topic).div_ceil(t);
        let full_groups = (items_in_topic / spu_chunk).max(1);
        let group = (within / spu_chunk).min(full_groups - 1);
        let spu_id = (topic * 100_000 + group) as u64;

        let mut rng = stream_rng(seed, &format!("world/item/{item_id}"));
        let mut latent = centers[topic].clone();
        let jitter = unit_gaussian_ish(&mut rng, config.latent_dim);
        for (l, j) in latent.iter_mut().zip(&jitter) {
            *l += config.item_noise * j;
        }
        normalize(&mut latent);

        // SPU-level attribute variants: shared by the whole group.
        let spu_variants = spu_variant_cache.entry(spu_id).or_insert_with(|| {
            let mut srng = stream_rng(seed, &format!("world/spu/{spu_id}"));
            let mut m = BTreeMap::new();
            for dim in DEMAND_DIMS.iter().chain(&PRODUCT_DIMS) {
                if *dim == "quality" {
                    continue; // per-item, keeps SPU-mates from being identical
                }
                m.insert(dim.to_string(), keyword(dim, topic, srng.gen_range(0..3)));
            }
            m
        });
        let mut attributes = spu_variants.clone();
        attributes.insert(
            "quality".to_string(),
            keyword("quality", topic, rng.gen_range(0..3)),
        );

        let fam = format!("fam-t{topic}");
        let spu_kw = format!("spu-{spu_id}");
        let entry = |dim: &str| KnowledgeEntry {
            dimension: dim.to_string(),
            analysis: format!("{dim} grounded in {}", attributes[dim]),
            keywords: vec![attributes[dim].clone(), fam.clone(), spu_kw.clone()],
        };
        let knowledge = ItemKnowledge {
            user_demand: DEMAND_DIMS.iter().map(|d| entry(d)).collect(),
            product_attribute: PRODUCT_DIMS.iter().map(|d| entry(d)).collect(),
        };

        // Merchant table: product dims under possibly-synonymous keys.
        let mut raw_attributes = BTreeMap::new();
        for dim in &PRODUCT_DIMS {
            let key = if rng.gen::<f32>() < config.synonym_prob {
                merchant_synonym(dim).to_string()
            } else {
                dim.to_string()
            };
            raw_attributes.insert(key, attributes[*dim].clone());
        }
        if rng.gen::<f32>() < config.extra_dim_prob {
            raw_attributes.insert(NOVEL_DIM.to_string(), format!("limited-run-t{topic}"));
        }

        let sub = within % 2;
        let features = vec![
            rng.gen_range(0.0f32..1.0), // price, normalized
            rng.gen_range(0.0f32..1.0), // popularity prior
            sub as f32,
            1.0,
        ];

        items.push(SynthItem {
            item_id,
            topic,
            category_path: (format!("cat{topic}"), format!("cat{topic}/sub{sub}")),
            spu_id,
            latent,
            attributes,
            raw_attributes,
            features,
            knowledge,
        });
    }
    Ok(items)
}

fn merchant_synonym(dim: &str) -> &'static str {
    match dim {
        "material" => "fabric",
        "function" => "use",
        "quality" => "grade",
        _ => "alias",
    }
}

fn synonym_table() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    for dim in &PRODUCT_DIMS {
        m.insert(dim.to_string(), dim.to_string());
        m.insert(merchant_synonym(dim).to_string(), dim.to_string());
    }
    m
}

fn build_users(config: &WorldConfig, seed: u64, centers: &[Vec<f32>]) -> Vec<SynthUser> {
    let t = config.n_categories;
    let k = config.interests_per_user;
    (0..config.n_users)
        .map(|u| {
            let user_id = (u + 1) as UserId;
            let mut rng = stream_rng(seed, &format!("world/user/{user_id}/profile"));
            // Archetype: k consecutive topics starting at a random anchor.
            let anchor = rng.gen_range(0..t);
            let topics: Vec<usize> = (0..k).map(|j| (anchor + j) % t).collect();
            let mut weights: Vec<f32> = (0..k).map(|j| 0.5f32.powi(j as i32)).collect();
            let total: f32 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            let mut latent = vec![0.0f32; config.latent_dim];
            for (topic, w) in topics.iter().zip(&weights) {
                for (l, c) in latent.iter_mut().zip(&centers[*topic]) {
                    *l += *w * *c;
                }
            }
            normalize(&mut latent);
            SynthUser {
                user_id,
                topics,
                weights,
                latent,
                features: Vec::new(), // filled from history stats
            }
        })
        .collect()
}

fn build_queries(config: &WorldConfig, seed: u64) -> BTreeMap<String, Vec<TaggedQuery>> {
    let mut queries = BTreeMap::new();
    for topic in 0..config.n_categories {
        let cat = format!("cat{topic}");
        let mut rng = stream_rng(seed, &format!("world/queries/{cat}"));
        let mut list = Vec::new();
        for dim in &DEMAND_DIMS {
            for _ in 0..config.queries_per_dim {
                let v = rng.gen_range(0..3);
                list.push(TaggedQuery {
                    text: format!("looking for {} options in {cat}", keyword(dim, topic, v)),
                    dimension: dim.to_string(),
                });
            }
        }
        queries.insert(cat, list);
    }
    queries
}

struct UserHistory {
    full: Vec<Event>,
    observed: Vec<Event>,
    gaps: Vec<GapTruth>,
    profile_features: Vec<f32>,
}

#[derive(Copy, Clone, PartialEq)]
enum HidePlan {
    Keep,
    WholeSession,
    InSession,
}

fn build_user_history(
    config: &WorldConfig,
    seed: u64,
    user: &SynthUser,
    by_topic: &[Vec<ItemId>],
) -> UserHistory {
    let mut rng = stream_rng(seed, &format!("world/user/{}/history", user.user_id));
    let n_sessions = sample_range_u32(&mut rng, config.sessions_per_user) as usize;

    // 1. Session topics from the interest mixture.
    let mut session_topics: Vec<usize> = (0..n_sessions)
        .map(|_| sample_topic(&mut rng, user))
        .collect();

    // 2. Hide plan. Whole-session hides first: interior sessions with a free
    //    (not hidden) predecessor. The in-session budget then follows from
    //    the realized whole-session count, so the detectable share of gaps
    //    tracks `detectable_fraction` by construction.
    let mut plan = vec![HidePlan::Keep; n_sessions];
    let mut n_whole = 0usize;
    if user.topics.len() > 1 {
        for s in 1..n_sessions.saturating_sub(1) {
            if plan[s - 1] != HidePlan::Keep
                || rng.gen::<f32>() >= config.hide_prob * config.detectable_fraction
            {
                continue;
            }
            plan[s] = HidePlan::WholeSession;
            n_whole += 1;
            // Plant the category change: the next session must open on a
            // different topic than the previous session closed on.
            if session_topics[s + 1] == session_topics[s - 1] {
                let alt = user
                    .topics
                    .iter()
                    .copied()
                    .find(|t| *t != session_topics[s - 1])
                    .unwrap();
                session_topics[s + 1] = alt;
            }
        }
    }
    let f = config.detectable_fraction.clamp(1e-6, 1.0);
    let target = if config.detectable_fraction == 0.0 {
        // Degenerate config: no boundary gaps wanted, fall back to raw draws.
        (0..n_sessions)
            .filter(|_| rng.gen::<f32>() < config.hide_prob)
            .count() as f32
    } else {
        n_whole as f32 * (1.0 - f) / f
    };
    let mut budget = target.floor() as usize;
    if rng.gen::<f32>() < target.fract() {
        budget += 1;
    }
    let free: Vec<usize> = (0..n_sessions)
        .filter(|&s| plan[s] == HidePlan::Keep)
        .collect();
    let mut budget = budget.min(free.len());
    let mut remaining = free.len();
    for &s in &free {
        // Sequential sampling: exactly `budget` sessions, no replacement.
        if budget > 0 && rng.gen_range(0..remaining) < budget {
            plan[s] = HidePlan::InSession;
            budget -= 1;
        }
        remaining -= 1;
    }

    // 3. Materialize events. In-session topic drift would defeat the planted
    //    boundary signal, so a session that closes against a whole-session
    //    gap keeps its topic fixed.
    let mut ts = 1_000_000 + user.user_id * 977;
    let mut full = Vec::new();
    for (s, &topic0) in session_topics.iter().enumerate() {
        if s > 0 {
            ts += sample_range_u64(&mut rng, config.gap_between);
        }
        let closes_gap = s + 1 < n_sessions && plan[s + 1] == HidePlan::WholeSession;
        let len = sample_range_u32(&mut rng, config.session_len) as usize;
        let mut topic = topic0;
        for e in 0..len {
            if e > 0 {
                ts += sample_range_u64(&mut rng, config.gap_within);
                if !closes_gap && user.topics.len() > 1 && rng.gen::<f32>() < config.topic_switch_prob {
                    let offset = rng.gen_range(1..user.topics.len());
                    let pos = user.topics.iter().position(|t| *t == topic).unwrap_or(0);
                    topic = user.topics[(pos + offset) % user.topics.len()];
                }
            }
            let pool = &by_topic[topic];
            let item_id = pool[rng.gen_range(0..pool.len())];
            full.push(Event {
                item_id,
                ts,
                channel: Channel::Platform,
                session: s as u32,
            });
        }
    }

    // 4. Apply the hide plan on the materialized stream.
    for (s, p) in plan.iter().enumerate() {
        match p {
            HidePlan::Keep => {}
            HidePlan::WholeSession => {
                for ev in full.iter_mut().filter(|ev| ev.session == s as u32) {
                    ev.channel = Channel::External;
                }
            }
            HidePlan::InSession => {
                let idx: Vec<usize> = full
                    .iter()
                    .enumerate()
                    .filter(|(_, ev)| ev.session == s as u32)
                    .map(|(i, _)| i)
                    .collect();
                if idx.len() < 3 {
                    continue;
                }
                let max_run = (idx.len() - 2) as u32;
                let run = sample_range_u32(&mut rng, config.hidden_run_len).min(max_run) as usize;
                let start = rng.gen_range(1..idx.len() - run);
                for &i in &idx[start..start + run] {
                    full[i].channel = Channel::External;
                }
            }
        }
    }

    // 5. Observed view plus gap truth from maximal external runs.
    let mut observed = Vec::new();
    let mut gaps: Vec<GapTruth> = Vec::new();
    let mut i = 0;
    while i < full.len() {
        if full[i].channel == Channel::Platform {
            observed.push(full[i].clone());
            i += 1;
            continue;
        }
        let mut hidden_item_ids = Vec::new();
        let session = full[i].session;
        let whole = plan[session as usize] == HidePlan::WholeSession;
        while i < full.len() && full[i].channel == Channel::External {
            hidden_item_ids.push(full[i].item_id);
            i += 1;
        }
        debug_assert!(!observed.is_empty(), "hidden run at sequence start");
        gaps.push(GapTruth {
            after_index: observed.len() - 1,
            hidden_item_ids,
            detectable: whole,
        });
    }

    let n_obs = observed.len().max(1) as f32;
    let profile_features = vec![
        n_sessions as f32 / 12.0,
        n_obs / (n_sessions.max(1) as f32 * 10.0),
        (1.0 + n_obs).ln() / 5.0,
        1.0,
    ];

    UserHistory {
        full,
        observed,
        gaps,
        profile_features,
    }
}

fn sample_topic(rng: &mut impl Rng, user: &SynthUser) -> usize {
    let r: f32 = rng.gen();
    let mut acc = 0.0;
    for (topic, w) in user.topics.iter().zip(&user.weights) {
        acc += w;
        if r < acc {
            return *topic;
        }
    }
    *user.topics.last().unwrap()
}

fn build_impressions(
    config: &WorldConfig,
    seed: u64,
    user: &SynthUser,
    catalog: &[SynthItem],
    by_topic: &[Vec<ItemId>],
) -> (Vec<Impression>, Vec<Impression>) {
    let mut rng = stream_rng(seed, &format!("world/user/{}/impressions", user.user_id));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..config.impressions_per_user {
        let item_id = if rng.gen::<f32>() < config.in_topic_candidate_prob {
            let topic = sample_topic(&mut rng, user);
            by_topic[topic][rng.gen_range(0..by_topic[topic].len())]
        } else {
            catalog[rng.gen_range(0..catalog.len())].item_id
        };
        let item = &catalog[(item_id - 1) as usize];
        let affinity: f32 = user
            .latent
            .iter()
            .zip(&item.latent)
            .map(|(a, b)| a * b)
            .sum();
        let p = if config.label_noise == 0.0 {
            if affinity > config.click_bias {
                1.0
            } else {
                0.0
            }
        } else {
            crate::nn::stable_sigmoid((affinity - config.click_bias) / config.label_noise)
        };
        let label = rng.gen::<f32>() < p;
        let imp = Impression {
            user_id: user.user_id,
            item_id,
            label,
            affinity,
            f_u: user.features.clone(),
            f_c: vec![rng.gen_range(0.0f32..1.0), rng.gen_range(0.0f32..1.0)],
        };
        if k % 5 == 4 {
            test.push(imp);
        } else {
            train.push(imp);
        }
    }
    (train, test)
}
