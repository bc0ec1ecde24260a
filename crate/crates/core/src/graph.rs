//! Typed user/list information network.
//!
//! Edge directions are fixed per relation: `following` and `followers` link
//! users to users, `own` and `followed` point from a user to a list, and
//! `membership` points from a list to a member user.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegaError};

pub const USER_INDICATORS: usize = 3;
pub const USER_NUMERICALS: usize = 5;
pub const LIST_INDICATORS: usize = 1;
pub const LIST_NUMERICALS: usize = 4;
/// Tweets kept per node; older ones are dropped at load time.
pub const MAX_TWEETS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    List,
}

impl NodeKind {
    pub fn indicator_count(self) -> usize {
        match self {
            NodeKind::User => USER_INDICATORS,
            NodeKind::List => LIST_INDICATORS,
        }
    }

    pub fn numerical_count(self) -> usize {
        match self {
            NodeKind::User => USER_NUMERICALS,
            NodeKind::List => LIST_NUMERICALS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::User => "user",
            NodeKind::List => "list",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Following,
    Followers,
    Membership,
    Followed,
    Own,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::Following,
        Relation::Followers,
        Relation::Membership,
        Relation::Followed,
        Relation::Own,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Following => "following",
            Relation::Followers => "followers",
            Relation::Membership => "membership",
            Relation::Followed => "followed",
            Relation::Own => "own",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }

    /// Required `(source, destination)` node kinds.
    pub fn endpoints(self) -> (NodeKind, NodeKind) {
        match self {
            Relation::Following | Relation::Followers => (NodeKind::User, NodeKind::User),
            Relation::Own | Relation::Followed => (NodeKind::User, NodeKind::List),
            Relation::Membership => (NodeKind::List, NodeKind::User),
        }
    }

    pub fn touches_lists(self) -> bool {
        let (s, d) = self.endpoints();
        s == NodeKind::List || d == NodeKind::List
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Detection classes, in logit order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Bot,
    Troll,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Normal, Label::Bot, Label::Troll];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Bot => "bot",
            Label::Troll => "troll",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

/// Raw features shared by users and lists.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NodeAttrs {
    pub indicators: Vec<bool>,
    pub numericals: Vec<f64>,
    pub description: String,
    /// Oldest first; the most recent tweet is last.
    pub tweets: Vec<String>,
}

impl NodeAttrs {
    /// Keeps only the `MAX_TWEETS` most recent tweets.
    pub fn truncate_tweets(&mut self) {
        if self.tweets.len() > MAX_TWEETS {
            self.tweets.drain(..self.tweets.len() - MAX_TWEETS);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserRecord {
    pub id: String,
    pub attrs: NodeAttrs,
    pub label: Option<Label>,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ListRecord {
    pub id: String,
    pub attrs: NodeAttrs,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: String,
    pub relation: Relation,
    pub dst: String,
}

impl Edge {
    pub fn new(src: impl Into<String>, relation: Relation, dst: impl Into<String>) -> Self {
        Self {
            src: src.into(),
            relation,
            dst: dst.into(),
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.src, self.relation, self.dst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub index: usize,
}

/// A broken graph invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateNode(String),
    DanglingEndpoint { edge: Edge, missing: String },
    KindConstraint { edge: Edge, src: NodeKind, dst: NodeKind },
    DuplicateEdge(Edge),
    Arity { id: String, field: &'static str, expected: usize, found: usize },
    NonFinite { id: String },
    TooManyTweets { id: String, count: usize },
    MissingLabel { id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNode(id) => write!(f, "duplicate node id `{id}`"),
            Violation::DanglingEndpoint { edge, missing } => {
                write!(f, "edge {edge} references missing node `{missing}`")
            }
            Violation::KindConstraint { edge, src, dst } => write!(
                f,
                "edge {edge} connects {} -> {} but {} requires {} -> {}",
                src.as_str(),
                dst.as_str(),
                edge.relation,
                edge.relation.endpoints().0.as_str(),
                edge.relation.endpoints().1.as_str()
            ),
            Violation::DuplicateEdge(edge) => write!(f, "duplicate edge {edge}"),
            Violation::Arity {
                id,
                field,
                expected,
                found,
            } => write!(f, "node `{id}` has {found} {field}, expected {expected}"),
            Violation::NonFinite { id } => write!(f, "node `{id}` has a non-finite numerical feature"),
            Violation::TooManyTweets { id, count } => {
                write!(f, "node `{id}` has {count} tweets, more than {MAX_TWEETS}")
            }
            Violation::MissingLabel { id } => write!(f, "user `{id}` is in a split but has no label"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct GraphStats {
    pub users: usize,
    pub lists: usize,
    pub edges: usize,
    pub per_relation: [usize; 5],
    pub per_label: [usize; 3],
    pub per_split: [usize; 3],
}

/// Heterogeneous graph of users and lists.
///
/// Nodes and edges are kept in canonical order (sorted by id), so two graphs
/// built from the same content compare equal regardless of input order.
#[derive(Clone, Debug)]
pub struct HeteroGraph {
    users: Vec<UserRecord>,
    lists: Vec<ListRecord>,
    edges: Vec<Edge>,
    index: HashMap<String, NodeRef>,
}

impl PartialEq for HeteroGraph {
    fn eq(&self, other: &Self) -> bool {
        self.users == other.users && self.lists == other.lists && self.edges == other.edges
    }
}

impl HeteroGraph {
    /// Builds a graph in canonical order without validating it.
    pub fn new(mut users: Vec<UserRecord>, mut lists: Vec<ListRecord>, mut edges: Vec<Edge>) -> Self {
        users.sort_by(|a, b| a.id.cmp(&b.id));
        lists.sort_by(|a, b| a.id.cmp(&b.id));
        edges.sort();
        Self::with_order(users, lists, edges)
    }

    /// Builds a graph keeping the caller's node order. Node indices follow
    /// the given order; everything observable by id is unaffected.
    pub fn with_order(users: Vec<UserRecord>, lists: Vec<ListRecord>, edges: Vec<Edge>) -> Self {
        let mut index = HashMap::new();
        for (i, u) in users.iter().enumerate() {
            index.entry(u.id.clone()).or_insert(NodeRef {
                kind: NodeKind::User,
                index: i,
            });
        }
        for (i, l) in lists.iter().enumerate() {
            index.entry(l.id.clone()).or_insert(NodeRef {
                kind: NodeKind::List,
                index: i,
            });
        }
        Self {
            users,
            lists,
            edges,
            index,
        }
    }

    pub fn users(&self) -> &[UserRecord] {
        &self.users
    }

    pub fn lists(&self) -> &[ListRecord] {
        &self.lists
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Option<NodeRef> {
        self.index.get(id).copied()
    }

    pub fn node_id(&self, node: NodeRef) -> &str {
        match node.kind {
            NodeKind::User => &self.users[node.index].id,
            NodeKind::List => &self.lists[node.index].id,
        }
    }

    pub fn attrs(&self, node: NodeRef) -> &NodeAttrs {
        match node.kind {
            NodeKind::User => &self.users[node.index].attrs,
            NodeKind::List => &self.lists[node.index].attrs,
        }
    }

    pub fn user(&self, id: &str) -> Option<&UserRecord> {
        match self.node(id)? {
            NodeRef {
                kind: NodeKind::User,
                index,
            } => Some(&self.users[index]),
            _ => None,
        }
    }

    /// Out-neighbors of `id` under `relation`, sorted by id.
    pub fn neighbors(&self, id: &str, relation: Relation) -> Result<Vec<&str>> {
        if !self.index.contains_key(id) {
            return Err(SegaError::UnknownNode(id.to_string()));
        }
        let mut out: Vec<&str> = self
            .edges
            .iter()
            .filter(|e| e.relation == relation && e.src == id)
            .map(|e| e.dst.as_str())
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Every invariant violation, in a deterministic order.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let nodes = self
            .users
            .iter()
            .map(|u| (&u.id, NodeKind::User, &u.attrs))
            .chain(self.lists.iter().map(|l| (&l.id, NodeKind::List, &l.attrs)));
        for (id, kind, attrs) in nodes {
            if !seen.insert(id.as_str()) {
                out.push(Violation::DuplicateNode(id.clone()));
            }
            if attrs.indicators.len() != kind.indicator_count() {
                out.push(Violation::Arity {
                    id: id.clone(),
                    field: "indicators",
                    expected: kind.indicator_count(),
                    found: attrs.indicators.len(),
                });
            }
            if attrs.numericals.len() != kind.numerical_count() {
                out.push(Violation::Arity {
                    id: id.clone(),
                    field: "numericals",
                    expected: kind.numerical_count(),
                    found: attrs.numericals.len(),
                });
            }
            if attrs.numericals.iter().any(|v| !v.is_finite()) {
                out.push(Violation::NonFinite { id: id.clone() });
            }
            if attrs.tweets.len() > MAX_TWEETS {
                out.push(Violation::TooManyTweets {
                    id: id.clone(),
                    count: attrs.tweets.len(),
                });
            }
        }
        for u in &self.users {
            if u.split.is_some() && u.label.is_none() {
                out.push(Violation::MissingLabel { id: u.id.clone() });
            }
        }

        let mut seen_edges = HashSet::new();
        for e in &self.edges {
            if !seen_edges.insert(e) {
                out.push(Violation::DuplicateEdge(e.clone()));
                continue;
            }
            let (src, dst) = (self.node(&e.src), self.node(&e.dst));
            for (end, id) in [(src, &e.src), (dst, &e.dst)] {
                if end.is_none() {
                    out.push(Violation::DanglingEndpoint {
                        edge: e.clone(),
                        missing: id.clone(),
                    });
                }
            }
            if let (Some(s), Some(d)) = (src, dst) {
                if (s.kind, d.kind) != e.relation.endpoints() {
                    out.push(Violation::KindConstraint {
                        edge: e.clone(),
                        src: s.kind,
                        dst: d.kind,
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    pub fn stats(&self) -> GraphStats {
        let mut s = GraphStats {
            users: self.users.len(),
            lists: self.lists.len(),
            edges: self.edges.len(),
            ..GraphStats::default()
        };
        for e in &self.edges {
            s.per_relation[e.relation.index()] += 1;
        }
        for u in &self.users {
            if let Some(l) = u.label {
                s.per_label[l.index()] += 1;
            }
            if let Some(sp) = u.split {
                s.per_split[sp as usize] += 1;
            }
        }
        s
    }

    /// Copy with every list node and every list-touching edge removed.
    pub fn without_lists(&self) -> Self {
        let edges = self
            .edges
            .iter()
            .filter(|e| !e.relation.touches_lists())
            .cloned()
            .collect();
        Self::with_order(self.users.clone(), Vec::new(), edges)
    }

    /// Users carrying both a label and the given split, in graph order.
    pub fn split_users(&self, split: Split) -> Vec<usize> {
        self.users
            .iter()
            .enumerate()
            .filter(|(_, u)| u.split == Some(split) && u.label.is_some())
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod fixture {
    use super::*;

    pub fn user(id: &str, label: Label, split: Split) -> UserRecord {
        UserRecord {
            id: id.into(),
            attrs: NodeAttrs {
                indicators: vec![true, false, label == Label::Bot],
                numericals: vec![1.6e9, id.len() as f64, 10.0, 20.0, 300.0],
                description: format!("about {id}"),
                tweets: vec![format!("{id} says hi"), format!("{id} says bye")],
            },
            label: Some(label),
            split: Some(split),
        }
    }

    pub fn list(id: &str) -> ListRecord {
        ListRecord {
            id: id.into(),
            attrs: NodeAttrs {
                indicators: vec![false],
                numericals: vec![1.5e9, 8.0, 4.0, 12.0],
                description: format!("list {id}"),
                tweets: vec![format!("{id} collected tweet")],
            },
        }
    }

    /// Three users per class, three lists, one edge per relation.
    pub fn twelve_nodes() -> HeteroGraph {
        let splits = [Split::Train, Split::Valid, Split::Test];
        let mut users = Vec::new();
        for (c, label) in Label::ALL.into_iter().enumerate() {
            for (k, split) in splits.into_iter().enumerate() {
                users.push(user(&format!("u{}", c * 3 + k + 1), label, split));
            }
        }
        let lists = vec![list("l1"), list("l2"), list("l3")];
        let edges = vec![
            Edge::new("u1", Relation::Following, "u2"),
            Edge::new("u2", Relation::Followers, "u3"),
            Edge::new("l2", Relation::Membership, "u4"),
            Edge::new("u5", Relation::Followed, "l3"),
            Edge::new("u1", Relation::Own, "l1"),
        ];
        HeteroGraph::new(users, lists, edges)
    }
}

#[cfg(test)]
mod tests {
    use super::fixture::*;
    use super::*;

    #[test]
    fn fixture_is_valid_and_counts_match() {
        let g = twelve_nodes();
        assert_eq!(g.validate(), Ok(()));
        let s = g.stats();
        assert_eq!((s.users, s.lists, s.edges), (9, 3, 5));
        assert_eq!(s.per_relation, [1; 5]);
        assert_eq!(s.per_label, [3, 3, 3]);
        assert_eq!(Relation::ALL.len(), 5);
        assert_eq!(Label::ALL.len(), 3);
    }

    #[test]
    fn neighbors_follow_relation_and_sort() {
        let g = twelve_nodes();
        assert_eq!(g.neighbors("u1", Relation::Own).unwrap(), vec!["l1"]);
        assert_eq!(g.neighbors("u1", Relation::Following).unwrap(), vec!["u2"]);
        assert!(g.neighbors("u9", Relation::Following).unwrap().is_empty());
        assert!(matches!(g.neighbors("nobody", Relation::Own), Err(SegaError::UnknownNode(_))));

        let users = vec![
            user("a", Label::Normal, Split::Train),
            user("c", Label::Normal, Split::Train),
            user("b", Label::Normal, Split::Train),
        ];
        let edges = vec![Edge::new("a", Relation::Following, "c"), Edge::new("a", Relation::Following, "b")];
        let g = HeteroGraph::new(users, vec![], edges);
        assert_eq!(g.neighbors("a", Relation::Following).unwrap(), vec!["b", "c"]);
    }

    #[test]
    fn dangling_edge_is_one_violation() {
        let g = twelve_nodes();
        let mut edges = g.edges().to_vec();
        edges.push(Edge::new("u1", Relation::Following, "ghost"));
        let g = HeteroGraph::new(g.users().to_vec(), g.lists().to_vec(), edges);
        let v = g.violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("(u1, following, ghost)"), "{}", v[0]);
    }

    #[test]
    fn membership_between_users_breaks_kind_constraint() {
        let g = twelve_nodes();
        let mut edges = g.edges().to_vec();
        edges.push(Edge::new("u1", Relation::Membership, "u2"));
        let g = HeteroGraph::new(g.users().to_vec(), g.lists().to_vec(), edges);
        let v = g.violations();
        assert_eq!(
            v,
            vec![Violation::KindConstraint {
                edge: Edge::new("u1", Relation::Membership, "u2"),
                src: NodeKind::User,
                dst: NodeKind::User,
            }]
        );
    }

    #[test]
    fn reports_every_violation() {
        let mut users = vec![user("a", Label::Normal, Split::Train), user("a", Label::Bot, Split::Test)];
        users[1].attrs.indicators.pop();
        users[0].label = None;
        let edges = vec![
            Edge::new("a", Relation::Following, "a"),
            Edge::new("a", Relation::Following, "a"),
            Edge::new("a", Relation::Own, "zz"),
        ];
        let g = HeteroGraph::new(users, vec![], edges);
        let v = g.violations();
        assert!(v.contains(&Violation::DuplicateNode("a".into())));
        assert!(v.iter().any(|x| matches!(x, Violation::Arity { field: "indicators", .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::MissingLabel { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::DuplicateEdge(_))));
        assert!(v.iter().any(|x| matches!(x, Violation::DanglingEndpoint { .. })));
    }

    #[test]
    fn dropping_lists_removes_list_edges() {
        let g = twelve_nodes().without_lists();
        assert!(g.lists().is_empty());
        assert!(g.edges().iter().all(|e| !e.relation.touches_lists()));
        assert_eq!(g.edges().len(), 2);
        assert_eq!(g.validate(), Ok(()));
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let mut a = NodeAttrs {
            tweets: (0..25).map(|i| i.to_string()).collect(),
            ..NodeAttrs::default()
        };
        a.truncate_tweets();
        assert_eq!(a.tweets.len(), MAX_TWEETS);
        assert_eq!(a.tweets[0], "5");
        assert_eq!(a.tweets.last().unwrap(), "24");
    }
}
