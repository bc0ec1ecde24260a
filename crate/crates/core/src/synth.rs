//! Synthetic user/list graphs with planted preference signal.
//!
//! Normal users and trolls share one metadata distribution; bots have their
//! own. Each tweet is tagged with a topic–emotion pair drawn from the
//! author's class profile (or, with the remaining probability, uniformly),
//! and its text is either one of a few canonical phrasings of that pair or
//! unique noise. The pairs of each user's ten most recent tweets are written
//! to `prefs.jsonl`, standing in for language-model annotations.
//!
//! Lists carry a class theme. Owners, members and followers are drawn from
//! the theme class with probability `list_homophily`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::save_dataset;
use crate::error::{Result, SegaError};
use crate::graph::{Edge, HeteroGraph, Label, ListRecord, NodeAttrs, Relation, Split, UserRecord, MAX_TWEETS};
use crate::prefs::{recent_posts, Emotion, Pair, PreferenceCache, Topic};

pub const PREFS_FILE: &str = "prefs.jsonl";

/// Tweet-level preference profile of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignal {
    /// Pairs favored by the class; empty means all non-`others` pairs.
    pub pairs: Vec<Pair>,
    /// Probability a tweet's pair comes from `pairs` rather than uniformly.
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub normal: usize,
    pub bot: usize,
    pub troll: usize,
    pub lists: usize,
    /// Mean number of accounts each user follows.
    pub follow_degree: f64,
    /// Probability a followed account has the follower's class.
    pub follow_homophily: f64,
    /// Mean members per list.
    pub list_members: f64,
    /// Mean followers per list.
    pub list_followers: f64,
    pub list_homophily: f64,
    /// Share of lists themed on the bot and troll classes.
    pub bot_list_share: f64,
    pub troll_list_share: f64,
    pub tweets_min: usize,
    pub tweets_max: usize,
    /// Probability a tweet uses a canonical phrasing of its pair.
    pub canonical_rate: f64,
    /// Canonical phrasings per pair.
    pub canonical_pool: usize,
    pub normal_signal: ClassSignal,
    pub bot_signal: ClassSignal,
    pub troll_signal: ClassSignal,
    /// Train and validation fractions per class; the rest is test.
    pub train_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            normal: 250,
            bot: 30,
            troll: 20,
            lists: 40,
            follow_degree: 6.0,
            follow_homophily: 0.5,
            list_members: 8.0,
            list_followers: 3.0,
            list_homophily: 0.5,
            bot_list_share: 0.15,
            troll_list_share: 0.15,
            tweets_min: 8,
            tweets_max: MAX_TWEETS,
            canonical_rate: 0.7,
            canonical_pool: 4,
            normal_signal: ClassSignal {
                pairs: Vec::new(),
                strength: 1.0,
            },
            bot_signal: ClassSignal {
                pairs: vec![
                    (Topic::BusinessFinance, Emotion::Anticipation),
                    (Topic::Technology, Emotion::Joy),
                    (Topic::Gaming, Emotion::Joy),
                ],
                strength: 0.8,
            },
            troll_signal: ClassSignal {
                pairs: vec![
                    (Topic::News, Emotion::Anger),
                    (Topic::News, Emotion::Disgust),
                    (Topic::News, Emotion::Fear),
                ],
                strength: 0.6,
            },
            train_fraction: 0.4,
            valid_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    /// Weaker tweet signal with class-homophilous lists, so part of the
    /// class information only reaches users through list membership.
    pub fn list_routed(seed: u64) -> Self {
        let base = Self::default();
        Self {
            seed,
            list_homophily: 0.9,
            list_members: 10.0,
            bot_list_share: 0.2,
            troll_list_share: 0.2,
            follow_homophily: 0.2,
            bot_signal: ClassSignal {
                strength: 0.3,
                ..base.bot_signal.clone()
            },
            troll_signal: ClassSignal {
                strength: 0.2,
                ..base.troll_signal.clone()
            },
            ..base
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.normal + self.bot + self.troll == 0 {
            return Err(SegaError::Config("synthetic graph needs at least one user".into()));
        }
        let probs = [
            self.follow_homophily,
            self.list_homophily,
            self.bot_list_share,
            self.troll_list_share,
            self.canonical_rate,
            self.normal_signal.strength,
            self.bot_signal.strength,
            self.troll_signal.strength,
            self.train_fraction,
            self.valid_fraction,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SegaError::Config("probabilities and fractions must lie in [0, 1]".into()));
        }
        if self.bot_list_share + self.troll_list_share > 1.0 || self.train_fraction + self.valid_fraction > 1.0 {
            return Err(SegaError::Config("shares and split fractions must sum to at most 1".into()));
        }
        let rates = [self.follow_degree, self.list_members, self.list_followers];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(SegaError::Config("mean degrees must be finite and non-negative".into()));
        }
        if self.tweets_min > self.tweets_max || self.tweets_max > MAX_TWEETS {
            return Err(SegaError::Config(format!("tweet counts must satisfy min <= max <= {MAX_TWEETS}")));
        }
        if self.canonical_pool == 0 {
            return Err(SegaError::Config("canonical pool must be positive".into()));
        }
        Ok(())
    }

    fn signal(&self, label: Label) -> &ClassSignal {
        match label {
            Label::Normal => &self.normal_signal,
            Label::Bot => &self.bot_signal,
            Label::Troll => &self.troll_signal,
        }
    }
}

/// Generated graph plus the planted pair annotations.
pub struct SynthOutput {
    pub graph: HeteroGraph,
    pub prefs: PreferenceCache,
}

const WORDS: &[&str] = &[
    "today", "really", "think", "people", "morning", "great", "always", "never", "again", "world", "new", "best",
    "week", "time", "love", "hate", "look", "here", "there", "every", "little", "big", "maybe", "still", "just",
    "going", "right", "wrong", "friends", "city", "home", "work", "night", "game", "story", "photo", "thread",
    "update", "watch", "read", "listen", "share", "please", "thanks", "wow", "finally", "soon", "later",
];

fn real_pairs() -> Vec<Pair> {
    let mut v = Vec::new();
    for t in Topic::ALL.into_iter().filter(|t| *t != Topic::Others) {
        for e in Emotion::ALL.into_iter().filter(|e| *e != Emotion::Others) {
            v.push((t, e));
        }
    }
    v
}

fn draw_pair(signal: &ClassSignal, all: &[Pair], rng: &mut ChaCha8Rng) -> Pair {
    if !signal.pairs.is_empty() && rng.random_bool(signal.strength) {
        *signal.pairs.choose(rng).expect("non-empty")
    } else {
        *all.choose(rng).expect("non-empty")
    }
}

fn tweet_text(pair: Pair, config: &SynthConfig, serial: &mut usize, rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(config.canonical_rate) {
        let k = rng.random_range(0..config.canonical_pool);
        format!("{} feels like {} ({})", pair.0.as_str(), pair.1.as_str(), k + 1)
    } else {
        *serial += 1;
        let words: Vec<&str> = (0..8).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
        format!("{} {}", words.join(" "), serial)
    }
}

struct Meta {
    indicators: [f64; 3],
    created: (f64, f64),
    name_len: (usize, usize),
    followers: (f64, f64),
    followings: (f64, f64),
    tweets: (f64, f64),
}

const HUMAN: Meta = Meta {
    indicators: [0.9, 0.1, 0.05],
    created: (1.20e9, 1.60e9),
    name_len: (4, 16),
    followers: (5.0, 1.5),
    followings: (5.5, 1.0),
    tweets: (7.0, 1.5),
};

const AUTOMATED: Meta = Meta {
    indicators: [0.45, 0.02, 0.0],
    created: (1.50e9, 1.65e9),
    name_len: (8, 16),
    followers: (3.0, 1.0),
    followings: (7.0, 0.8),
    tweets: (9.0, 1.0),
};

fn user_metadata(meta: &Meta, rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<f64>) {
    let indicators = meta.indicators.iter().map(|&p| rng.random_bool(p)).collect();
    let ln = |(mu, sigma): (f64, f64), rng: &mut ChaCha8Rng| LogNormal::new(mu, sigma).expect("valid").sample(rng).round();
    let numericals = vec![
        rng.random_range(meta.created.0..meta.created.1).round(),
        rng.random_range(meta.name_len.0..=meta.name_len.1) as f64,
        ln(meta.followers, rng),
        ln(meta.followings, rng),
        ln(meta.tweets, rng),
    ];
    (indicators, numericals)
}

const HUMAN_BIOS: &[&str] = &[
    "coffee first, opinions later",
    "dad, runner, amateur photographer",
    "views are my own",
    "teacher and lifelong learner",
    "just here for the memes",
    "writer in progress",
    "proud dog parent",
    "engineer by day, gamer by night",
];

const BOT_BIOS: &[&str] = &[
    "automated updates every hour",
    "best deals posted daily, follow for more",
    "crypto signals and market alerts",
];

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Picks a user of `class` with probability `homophily`, otherwise any user.
fn pick_user(by_class: &[Vec<usize>; 3], total: usize, class: Label, homophily: f64, rng: &mut ChaCha8Rng) -> usize {
    let pool = &by_class[class.index()];
    if !pool.is_empty() && rng.random_bool(homophily) {
        *pool.choose(rng).expect("non-empty")
    } else {
        rng.random_range(0..total)
    }
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let all_pairs = real_pairs();
    let total = config.normal + config.bot + config.troll;

    let mut classes: Vec<Label> = std::iter::repeat_n(Label::Normal, config.normal)
        .chain(std::iter::repeat_n(Label::Bot, config.bot))
        .chain(std::iter::repeat_n(Label::Troll, config.troll))
        .collect();
    classes.shuffle(&mut rng);
    let width = total.to_string().len().max(4);
    let user_ids: Vec<String> = (0..total).map(|i| format!("u{:0width$}", i + 1)).collect();
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, c) in classes.iter().enumerate() {
        by_class[c.index()].push(i);
    }

    let mut splits = vec![Split::Test; total];
    for members in &by_class {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        let n_train = (m.len() as f64 * config.train_fraction).round() as usize;
        let n_valid = ((m.len() as f64 * config.valid_fraction).round() as usize).min(m.len() - n_train);
        for (k, &u) in m.iter().enumerate() {
            splits[u] = if k < n_train {
                Split::Train
            } else if k < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
    }

    let mut serial = 0usize;
    let mut users = Vec::with_capacity(total);
    let mut prefs = PreferenceCache::new();
    for i in 0..total {
        let class = classes[i];
        let meta = if class == Label::Bot { &AUTOMATED } else { &HUMAN };
        let (indicators, numericals) = user_metadata(meta, &mut rng);
        let bios = if class == Label::Bot && rng.random_bool(0.7) {
            BOT_BIOS
        } else {
            HUMAN_BIOS
        };
        let description = if rng.random_bool(0.8) {
            bios.choose(&mut rng).expect("non-empty").to_string()
        } else {
            String::new()
        };
        let n_tweets = rng.random_range(config.tweets_min..=config.tweets_max);
        let mut pairs = Vec::with_capacity(n_tweets);
        let mut tweets = Vec::with_capacity(n_tweets);
        for _ in 0..n_tweets {
            let pair = draw_pair(config.signal(class), &all_pairs, &mut rng);
            tweets.push(tweet_text(pair, config, &mut serial, &mut rng));
            pairs.push(pair);
        }
        let recent = recent_posts(&tweets).len();
        if recent > 0 {
            prefs.insert(user_ids[i].clone(), pairs[pairs.len() - recent..].to_vec());
        }
        users.push(UserRecord {
            id: user_ids[i].clone(),
            attrs: NodeAttrs {
                indicators,
                numericals,
                description,
                tweets,
            },
            label: Some(class),
            split: Some(splits[i]),
        });
    }

    let mut edges = BTreeSet::new();
    for i in 0..total {
        if total < 2 {
            break;
        }
        for _ in 0..poisson(config.follow_degree, &mut rng) {
            let j = pick_user(&by_class, total, classes[i], config.follow_homophily, &mut rng);
            if j != i {
                edges.insert(Edge::new(user_ids[i].clone(), Relation::Following, user_ids[j].clone()));
                edges.insert(Edge::new(user_ids[j].clone(), Relation::Followers, user_ids[i].clone()));
            }
        }
    }

    let list_width = config.lists.to_string().len().max(3);
    let n_bot_lists = (config.lists as f64 * config.bot_list_share).round() as usize;
    let n_troll_lists = ((config.lists as f64 * config.troll_list_share).round() as usize).min(config.lists - n_bot_lists.min(config.lists));
    let mut themes: Vec<Label> = std::iter::repeat_n(Label::Bot, n_bot_lists.min(config.lists))
        .chain(std::iter::repeat_n(Label::Troll, n_troll_lists))
        .collect();
    themes.resize(config.lists, Label::Normal);
    themes.shuffle(&mut rng);

    let mut lists = Vec::with_capacity(config.lists);
    for (k, &theme) in themes.iter().enumerate() {
        let id = format!("l{:0list_width$}", k + 1);
        let topic = draw_pair(config.signal(theme), &all_pairs, &mut rng);
        let description = format!(
            "accounts on {} that feel {}, vol. {}",
            topic.0.as_str(),
            topic.1.as_str(),
            rng.random_range(1..=2)
        );
        let owner = pick_user(&by_class, total, theme, config.list_homophily, &mut rng);
        edges.insert(Edge::new(user_ids[owner].clone(), Relation::Own, id.clone()));
        let mut members = BTreeSet::new();
        for _ in 0..poisson(config.list_members, &mut rng) {
            members.insert(pick_user(&by_class, total, theme, config.list_homophily, &mut rng));
        }
        for &m in &members {
            edges.insert(Edge::new(id.clone(), Relation::Membership, user_ids[m].clone()));
        }
        let mut followers = 0usize;
        for _ in 0..poisson(config.list_followers, &mut rng) {
            let f = pick_user(&by_class, total, theme, config.list_homophily, &mut rng);
            if edges.insert(Edge::new(user_ids[f].clone(), Relation::Followed, id.clone())) {
                followers += 1;
            }
        }
        let n_tweets = rng.random_range(0..=5);
        let tweets = (0..n_tweets)
            .map(|_| {
                let pair = draw_pair(config.signal(theme), &all_pairs, &mut rng);
                tweet_text(pair, config, &mut serial, &mut rng)
            })
            .collect();
        lists.push(ListRecord {
            id,
            attrs: NodeAttrs {
                indicators: vec![rng.random_bool(0.1)],
                numericals: vec![
                    rng.random_range(1.30e9..1.65e9f64).round(),
                    rng.random_range(4..=25) as f64,
                    followers as f64,
                    members.len() as f64,
                ],
                description,
                tweets,
            },
        });
    }

    let graph = HeteroGraph::new(users, lists, edges.into_iter().collect());
    graph.validate().map_err(SegaError::InvalidGraph)?;
    Ok(SynthOutput { graph, prefs })
}

/// Generates a dataset directory including `prefs.jsonl`.
pub fn synth_to_dir(config: &SynthConfig, dir: &Path) -> Result<SynthOutput> {
    let out = synth_generate(config)?;
    save_dataset(&out.graph, dir)?;
    out.prefs.save(&dir.join(PREFS_FILE))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let out = synth_generate(&SynthConfig::default()).unwrap();
        let s = out.graph.stats();
        assert_eq!((s.users, s.lists), (300, 40));
        assert_eq!(s.per_label, [250, 30, 20]);
        assert_eq!(out.prefs.len(), 300);
        assert!(out.prefs.iter().all(|(_, p)| p.len() <= 10 && !p.is_empty()));
    }

    #[test]
    fn zero_users_is_an_error() {
        let cfg = SynthConfig {
            normal: 0,
            bot: 0,
            troll: 0,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn no_lists_means_no_list_edges() {
        let cfg = SynthConfig {
            lists: 0,
            ..SynthConfig::default()
        };
        let g = synth_generate(&cfg).unwrap().graph;
        assert!(g.lists().is_empty());
        assert!(g.edges().iter().all(|e| !e.relation.touches_lists()));
    }

    #[test]
    fn trolls_share_normal_metadata_ranges() {
        let g = synth_generate(&SynthConfig::default()).unwrap().graph;
        let created = |label: Label| -> f64 {
            let v: Vec<f64> = g
                .users()
                .iter()
                .filter(|u| u.label == Some(label))
                .map(|u| u.attrs.numericals[0])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((created(Label::Troll) - created(Label::Normal)).abs() < 0.1e9);
        assert!(created(Label::Bot) > created(Label::Normal));
    }
}
