//! Topic–emotion preferences: LLM extraction, the `prefs.jsonl` cache,
//! majority/minority summaries and pseudo-label rendering.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegaError};

/// Posts per user sent to the language model.
pub const POSTS_PER_USER: usize = 10;

pub const LLM_ENDPOINT_VAR: &str = "SEGA_LLM_ENDPOINT";
pub const LLM_API_KEY_VAR: &str = "SEGA_LLM_API_KEY";

pub const INSTRUCTION_PROMPT: &str = "Please classify each tweet into the topics and corresponding emotions for the following ten posts. The available topics are arts & culture, business & finance, careers, entertainment, fashion & beauty, food, gaming, hobbies & interests, movies & TV, music, news, outdoors, science, sports, technology, and travel. The emotions to consider are joy, sadness, anger, fear, trust, disgust, surprise, and anticipation. Please provide the classification for each post in the format 'topic - emotion'. Limit the response to less than 100 words. Following are the ten tweets numbered with '#'.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Topic {
    ArtsCulture,
    BusinessFinance,
    Careers,
    Entertainment,
    FashionBeauty,
    Food,
    Gaming,
    HobbiesInterests,
    MoviesTv,
    Music,
    News,
    Outdoors,
    Science,
    Sports,
    Technology,
    Travel,
    Others,
}

impl Topic {
    pub const ALL: [Topic; 17] = [
        Topic::ArtsCulture,
        Topic::BusinessFinance,
        Topic::Careers,
        Topic::Entertainment,
        Topic::FashionBeauty,
        Topic::Food,
        Topic::Gaming,
        Topic::HobbiesInterests,
        Topic::MoviesTv,
        Topic::Music,
        Topic::News,
        Topic::Outdoors,
        Topic::Science,
        Topic::Sports,
        Topic::Technology,
        Topic::Travel,
        Topic::Others,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::ArtsCulture => "arts & culture",
            Topic::BusinessFinance => "business & finance",
            Topic::Careers => "careers",
            Topic::Entertainment => "entertainment",
            Topic::FashionBeauty => "fashion & beauty",
            Topic::Food => "food",
            Topic::Gaming => "gaming",
            Topic::HobbiesInterests => "hobbies & interests",
            Topic::MoviesTv => "movies & TV",
            Topic::Music => "music",
            Topic::News => "news",
            Topic::Outdoors => "outdoors",
            Topic::Science => "science",
            Topic::Sports => "sports",
            Topic::Technology => "technology",
            Topic::Travel => "travel",
            Topic::Others => "others",
        }
    }

    /// Case-insensitive; anything unrecognized is `Others`.
    pub fn parse(s: &str) -> Self {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .unwrap_or(Topic::Others)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Emotion {
    Joy,
    Sadness,
    Anger,
    Fear,
    Trust,
    Disgust,
    Surprise,
    Anticipation,
    Others,
}

impl Emotion {
    pub const ALL: [Emotion; 9] = [
        Emotion::Joy,
        Emotion::Sadness,
        Emotion::Anger,
        Emotion::Fear,
        Emotion::Trust,
        Emotion::Disgust,
        Emotion::Surprise,
        Emotion::Anticipation,
        Emotion::Others,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Joy => "joy",
            Emotion::Sadness => "sadness",
            Emotion::Anger => "anger",
            Emotion::Fear => "fear",
            Emotion::Trust => "trust",
            Emotion::Disgust => "disgust",
            Emotion::Surprise => "surprise",
            Emotion::Anticipation => "anticipation",
            Emotion::Others => "others",
        }
    }

    pub fn parse(s: &str) -> Self {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s))
            .unwrap_or(Emotion::Others)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

macro_rules! serde_by_name {
    ($t:ty, $what:literal) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                <$t>::ALL
                    .into_iter()
                    .find(|x| x.as_str().eq_ignore_ascii_case(s.trim()))
                    .ok_or_else(|| serde::de::Error::custom(format!("unknown {} `{s}`", $what)))
            }
        }
    };
}

serde_by_name!(Topic, "topic");
serde_by_name!(Emotion, "emotion");

pub type Pair = (Topic, Emotion);

/// Number of distinct topic–emotion pairs.
pub const PAIR_SPACE: usize = Topic::ALL.len() * Emotion::ALL.len();

pub fn pair_index((t, e): Pair) -> usize {
    t.index() * Emotion::ALL.len() + e.index()
}

pub fn pair_from_index(i: usize) -> Option<Pair> {
    let t = *Topic::ALL.get(i / Emotion::ALL.len())?;
    Some((t, Emotion::ALL[i % Emotion::ALL.len()]))
}

fn line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+\s*[:.]?\s*(.+?)\s*-\s*(.+?)\s*$").unwrap())
}

/// One pair per numbered `topic - emotion` line; other lines are skipped.
pub fn parse_llm_response(text: &str) -> Vec<Pair> {
    text.lines()
        .filter_map(|line| line_pattern().captures(line))
        .map(|c| (Topic::parse(&c[1]), Emotion::parse(&c[2])))
        .collect()
}

/// The posts used for extraction: the last `POSTS_PER_USER` in stored order.
pub fn recent_posts(tweets: &[String]) -> &[String] {
    &tweets[tweets.len().saturating_sub(POSTS_PER_USER)..]
}

/// Full request text for one user's recent posts.
pub fn instruction_for(tweets: &[String]) -> String {
    let mut out = String::from(INSTRUCTION_PROMPT);
    out.push('\n');
    for (i, t) in recent_posts(tweets).iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("#{} {}", i + 1, t));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PreferenceProfile {
    pub user_id: String,
    pub counts: BTreeMap<Pair, u32>,
}

/// Highest count first, then enum order; the last element is the minority.
fn ranked<K: Ord + Copy>(counts: &BTreeMap<K, u32>) -> Option<(K, K)> {
    let mut v: Vec<(K, u32)> = counts.iter().map(|(k, c)| (*k, *c)).filter(|(_, c)| *c > 0).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Some((v.first()?.0, v.last()?.0))
}

impl PreferenceProfile {
    pub fn from_pairs(user_id: impl Into<String>, pairs: &[Pair]) -> Self {
        let mut counts = BTreeMap::new();
        for p in pairs {
            *counts.entry(*p).or_insert(0) += 1;
        }
        Self {
            user_id: user_id.into(),
            counts,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn topic_counts(&self) -> BTreeMap<Topic, u32> {
        let mut m = BTreeMap::new();
        for ((t, _), c) in &self.counts {
            *m.entry(*t).or_insert(0) += c;
        }
        m
    }

    pub fn emotion_counts(&self) -> BTreeMap<Emotion, u32> {
        let mut m = BTreeMap::new();
        for ((_, e), c) in &self.counts {
            *m.entry(*e).or_insert(0) += c;
        }
        m
    }

    /// 153-wide multi-hot vector of present pairs.
    pub fn multi_hot(&self) -> Vec<f32> {
        let mut v = vec![0.0; PAIR_SPACE];
        for p in self.counts.keys() {
            v[pair_index(*p)] = 1.0;
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Summary {
    pub max: Pair,
    pub min: Pair,
    pub max_topic: Topic,
    pub min_topic: Topic,
    pub max_emotion: Emotion,
    pub min_emotion: Emotion,
}

/// Majority and minority pairs, plus the independent topic and emotion
/// marginals used by the single-attribute templates.
pub fn preference_summary(profile: &PreferenceProfile) -> Result<Summary> {
    let empty = || SegaError::Invalid(format!("empty preference profile for `{}`", profile.user_id));
    let (max, min) = ranked(&profile.counts).ok_or_else(empty)?;
    let (max_topic, min_topic) = ranked(&profile.topic_counts()).ok_or_else(empty)?;
    let (max_emotion, min_emotion) = ranked(&profile.emotion_counts()).ok_or_else(empty)?;
    Ok(Summary {
        max,
        min,
        max_topic,
        min_topic,
        max_emotion,
        min_emotion,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    #[default]
    Default,
    Short,
    Topic,
    Emotion,
    Tandem,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::Default,
        TemplateKind::Short,
        TemplateKind::Topic,
        TemplateKind::Emotion,
        TemplateKind::Tandem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Default => "default",
            TemplateKind::Short => "short",
            TemplateKind::Topic => "topic",
            TemplateKind::Emotion => "emotion",
            TemplateKind::Tandem => "tandem",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub kind: TemplateKind,
    pub text: String,
    pub max_pair: Pair,
    pub min_pair: Pair,
}

fn single_attribute(max: &str, min: &str) -> String {
    format!("The majority of the posts express {max}, while a minority of them express {min}.")
}

pub fn render_prompt(summary: &Summary, kind: TemplateKind) -> PseudoLabel {
    let (tmax, emax) = summary.max;
    let (tmin, emin) = summary.min;
    let topic = || single_attribute(summary.max_topic.as_str(), summary.min_topic.as_str());
    let emotion = || single_attribute(summary.max_emotion.as_str(), summary.min_emotion.as_str());
    let text = match kind {
        TemplateKind::Default => format!(
            "The majority of the posts express {} with {} emotion, while a minority of them express {} with {}.",
            tmax.as_str(),
            emax.as_str(),
            tmin.as_str(),
            emin.as_str()
        ),
        TemplateKind::Short => format!(
            "Majority: {} - {}, minority: {} - {}.",
            tmax.as_str(),
            emax.as_str(),
            tmin.as_str(),
            emin.as_str()
        ),
        TemplateKind::Topic => topic(),
        TemplateKind::Emotion => emotion(),
        TemplateKind::Tandem => format!("{} {}", topic(), emotion()),
    };
    PseudoLabel {
        kind,
        text,
        max_pair: summary.max,
        min_pair: summary.min,
    }
}

/// Text completion service.
pub trait LlmBackend {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// POSTs `{"prompt": ...}` and reads the `text` field of the reply.
pub struct HttpLlm {
    endpoint: String,
    api_key: Option<String>,
    temperature: f64,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct LlmRequest<'a> {
    prompt: &'a str,
    temperature: f64,
}

#[derive(Deserialize)]
struct LlmReply {
    text: String,
}

impl HttpLlm {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, temperature: f64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            temperature,
            agent,
        }
    }

    /// Reads the endpoint and key from the environment; `None` when no endpoint is set.
    pub fn from_env(temperature: f64) -> Option<Self> {
        let endpoint = std::env::var(LLM_ENDPOINT_VAR).ok().filter(|s| !s.is_empty())?;
        Some(Self::new(endpoint, std::env::var(LLM_API_KEY_VAR).ok(), temperature))
    }
}

impl LlmBackend for HttpLlm {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: LlmReply = req
            .send_json(LlmRequest {
                prompt,
                temperature: self.temperature,
            })
            .map_err(|e| SegaError::Llm(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| SegaError::Llm(e.to_string()))?;
        Ok(reply.text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheLine {
    id: String,
    pairs: Vec<(String, String)>,
}

/// Parsed pairs per user id, persisted as `prefs.jsonl`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PreferenceCache {
    entries: BTreeMap<String, Vec<Pair>>,
}

impl PreferenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| SegaError::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| SegaError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CacheLine = serde_json::from_str(&line).map_err(|e| SegaError::Parse {
                file: path.to_path_buf(),
                line: i as u64 + 1,
                msg: e.to_string(),
            })?;
            let pairs = parsed
                .pairs
                .iter()
                .map(|(t, e)| (Topic::parse(t), Emotion::parse(e)))
                .collect();
            entries.insert(parsed.id, pairs);
        }
        Ok(Self { entries })
    }

    /// Loads `path` if it exists, otherwise starts empty.
    pub fn load_or_empty(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (id, pairs) in &self.entries {
            let line = CacheLine {
                id: id.clone(),
                pairs: pairs
                    .iter()
                    .map(|(t, e)| (t.as_str().to_string(), e.as_str().to_string()))
                    .collect(),
            };
            serde_json::to_writer(&mut out, &line).expect("in-memory JSON serialization");
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| SegaError::io(path, e))?;
        f.write_all(&self.to_jsonl()).map_err(|e| SegaError::io(path, e))
    }

    pub fn get(&self, id: &str) -> Option<&[Pair]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: impl Into<String>, pairs: Vec<Pair>) {
        self.entries.insert(id.into(), pairs);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Pair])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Cache-first pair extraction with an optional LLM fallback.
pub struct Extractor<'a> {
    pub cache: PreferenceCache,
    backend: Option<&'a dyn LlmBackend>,
    calls: Cell<usize>,
}

impl<'a> Extractor<'a> {
    pub fn new(cache: PreferenceCache, backend: Option<&'a dyn LlmBackend>) -> Self {
        Self {
            cache,
            backend,
            calls: Cell::new(0),
        }
    }

    /// Requests sent to the backend so far.
    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn extract(&mut self, user_id: &str, tweets: &[String]) -> Result<PreferenceProfile> {
        if let Some(pairs) = self.cache.get(user_id) {
            return Ok(PreferenceProfile::from_pairs(user_id, pairs));
        }
        let posts = recent_posts(tweets);
        if posts.is_empty() {
            return Err(SegaError::NoPosts(user_id.to_string()));
        }
        let backend = self
            .backend
            .ok_or_else(|| SegaError::Llm(format!("no cached preferences for `{user_id}` and no model endpoint")))?;
        self.calls.set(self.calls.get() + 1);
        let mut pairs = parse_llm_response(&backend.complete(&instruction_for(posts))?);
        pairs.truncate(posts.len());
        self.cache.insert(user_id, pairs.clone());
        Ok(PreferenceProfile::from_pairs(user_id, &pairs))
    }
}

/// Pseudo-labels for every user whose profile is non-empty, keyed by user id.
pub fn pseudo_labels(cache: &PreferenceCache, kind: TemplateKind) -> HashMap<String, PseudoLabel> {
    cache
        .iter()
        .filter_map(|(id, pairs)| {
            let profile = PreferenceProfile::from_pairs(id, pairs);
            let summary = preference_summary(&profile).ok()?;
            Some((id.to_string(), render_prompt(&summary, kind)))
        })
        .collect()
}
