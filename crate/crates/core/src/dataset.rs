//! On-disk dataset directory.
//!
//! ```text
//! nodes.jsonl   {"id", "kind": "user"|"list", "indicators", "numericals", "description"}
//! tweets.jsonl  {"id", "tweets": [...]}            (most recent last)
//! edges.csv     src,relation,dst
//! labels.csv    id,label                           (normal | bot | troll)
//! splits.csv    id,split                           (train | valid | test)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegaError};
use crate::graph::{Edge, HeteroGraph, Label, ListRecord, NodeAttrs, NodeKind, Relation, Split, UserRecord};

pub const NODES_FILE: &str = "nodes.jsonl";
pub const TWEETS_FILE: &str = "tweets.jsonl";
pub const EDGES_FILE: &str = "edges.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.csv";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeLine {
    id: String,
    kind: NodeKind,
    indicators: Vec<bool>,
    numericals: Vec<f64>,
    description: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TweetLine {
    id: String,
    tweets: Vec<String>,
}

fn parse_err(file: &Path, line: u64, msg: impl Into<String>) -> SegaError {
    SegaError::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(u64, T)>> {
    let f = fs::File::open(path).map_err(|e| SegaError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| SegaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        out.push((line_no, v));
    }
    Ok(out)
}

/// Rows of a two- or three-column CSV with an exact header.
fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(u64, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    // An entirely empty file has no header; treat it as zero rows.
    if found.is_empty() || (found.len() == 1 && found[0].is_empty()) {
        return Ok(Vec::new());
    }
    if found != header {
        return Err(parse_err(path, 1, format!("expected header `{}`, found `{}`", header.join(","), found.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<HeteroGraph> {
    let nodes_path = dir.join(NODES_FILE);
    let mut users: Vec<UserRecord> = Vec::new();
    let mut lists: Vec<ListRecord> = Vec::new();
    let mut where_is: HashMap<String, (NodeKind, usize)> = HashMap::new();
    for (line, n) in read_jsonl::<NodeLine>(&nodes_path)? {
        if where_is.contains_key(&n.id) {
            return Err(parse_err(&nodes_path, line, format!("duplicate node id `{}`", n.id)));
        }
        let attrs = NodeAttrs {
            indicators: n.indicators,
            numericals: n.numericals,
            description: n.description,
            tweets: Vec::new(),
        };
        match n.kind {
            NodeKind::User => {
                where_is.insert(n.id.clone(), (NodeKind::User, users.len()));
                users.push(UserRecord {
                    id: n.id,
                    attrs,
                    label: None,
                    split: None,
                });
            }
            NodeKind::List => {
                where_is.insert(n.id.clone(), (NodeKind::List, lists.len()));
                lists.push(ListRecord { id: n.id, attrs });
            }
        }
    }

    let tweets_path = dir.join(TWEETS_FILE);
    if tweets_path.exists() {
        for (line, t) in read_jsonl::<TweetLine>(&tweets_path)? {
            let attrs = match where_is.get(&t.id) {
                Some((NodeKind::User, i)) => &mut users[*i].attrs,
                Some((NodeKind::List, i)) => &mut lists[*i].attrs,
                None => return Err(parse_err(&tweets_path, line, format!("tweets for unknown node `{}`", t.id))),
            };
            attrs.tweets.extend(t.tweets);
            attrs.truncate_tweets();
        }
    }

    let edges_path = dir.join(EDGES_FILE);
    let mut edges = Vec::new();
    for (line, row) in read_csv(&edges_path, &["src", "relation", "dst"])? {
        let relation = Relation::parse(&row[1])
            .ok_or_else(|| parse_err(&edges_path, line, format!("unknown relation `{}`", row[1])))?;
        for id in [&row[0], &row[2]] {
            if !where_is.contains_key(id) {
                return Err(parse_err(&edges_path, line, format!("dangling edge endpoint `{id}`")));
            }
        }
        edges.push(Edge::new(row[0].clone(), relation, row[2].clone()));
    }

    let user_slot = |path: &Path, line: u64, id: &str| -> Result<usize> {
        match where_is.get(id) {
            Some((NodeKind::User, i)) => Ok(*i),
            Some((NodeKind::List, _)) => Err(parse_err(path, line, format!("`{id}` is a list, not a user"))),
            None => Err(parse_err(path, line, format!("unknown user `{id}`"))),
        }
    };

    let labels_path = dir.join(LABELS_FILE);
    if labels_path.exists() {
        for (line, row) in read_csv(&labels_path, &["id", "label"])? {
            let i = user_slot(&labels_path, line, &row[0])?;
            let label = Label::parse(&row[1])
                .ok_or_else(|| parse_err(&labels_path, line, format!("unknown label `{}`", row[1])))?;
            users[i].label = Some(label);
        }
    }
    let splits_path = dir.join(SPLITS_FILE);
    if splits_path.exists() {
        for (line, row) in read_csv(&splits_path, &["id", "split"])? {
            let i = user_slot(&splits_path, line, &row[0])?;
            let split = Split::parse(&row[1])
                .ok_or_else(|| parse_err(&splits_path, line, format!("unknown split `{}`", row[1])))?;
            users[i].split = Some(split);
        }
    }

    let graph = HeteroGraph::new(users, lists, edges);
    graph.validate().map_err(SegaError::InvalidGraph)?;
    Ok(graph)
}

fn write_file(path: PathBuf, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(&path).map_err(|e| SegaError::io(&path, e))?;
    f.write_all(contents).map_err(|e| SegaError::io(&path, e))
}

fn json_line<T: Serialize>(out: &mut Vec<u8>, value: &T) {
    serde_json::to_writer(&mut *out, value).expect("in-memory JSON serialization");
    out.push(b'\n');
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| SegaError::Invalid(e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| SegaError::Invalid(e.to_string()))
}

/// Writes `graph` in canonical order. The directory is created if needed.
pub fn save_dataset(graph: &HeteroGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SegaError::io(dir, e))?;
    let nodes = graph
        .users()
        .iter()
        .map(|u| (&u.id, NodeKind::User, &u.attrs))
        .chain(graph.lists().iter().map(|l| (&l.id, NodeKind::List, &l.attrs)));

    let mut node_bytes = Vec::new();
    let mut tweet_bytes = Vec::new();
    for (id, kind, attrs) in nodes {
        json_line(
            &mut node_bytes,
            &NodeLine {
                id: id.clone(),
                kind,
                indicators: attrs.indicators.clone(),
                numericals: attrs.numericals.clone(),
                description: attrs.description.clone(),
            },
        );
        json_line(
            &mut tweet_bytes,
            &TweetLine {
                id: id.clone(),
                tweets: attrs.tweets.clone(),
            },
        );
    }
    write_file(dir.join(NODES_FILE), &node_bytes)?;
    write_file(dir.join(TWEETS_FILE), &tweet_bytes)?;

    let edges = csv_bytes(
        &["src", "relation", "dst"],
        graph
            .edges()
            .iter()
            .map(|e| vec![e.src.clone(), e.relation.as_str().to_string(), e.dst.clone()]),
    )?;
    write_file(dir.join(EDGES_FILE), &edges)?;
    let labels = csv_bytes(
        &["id", "label"],
        graph
            .users()
            .iter()
            .filter_map(|u| u.label.map(|l| vec![u.id.clone(), l.as_str().to_string()])),
    )?;
    write_file(dir.join(LABELS_FILE), &labels)?;
    let splits = csv_bytes(
        &["id", "split"],
        graph
            .users()
            .iter()
            .filter_map(|u| u.split.map(|s| vec![u.id.clone(), s.as_str().to_string()])),
    )?;
    write_file(dir.join(SPLITS_FILE), &splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixture::twelve_nodes;

    #[test]
    fn fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = twelve_nodes();
        save_dataset(&g, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, g);
        let s = back.stats();
        assert_eq!((s.users, s.lists, s.edges), (9, 3, 5));
    }

    #[test]
    fn empty_edges_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let g = twelve_nodes();
        save_dataset(&g, dir.path()).unwrap();
        fs::write(dir.path().join(EDGES_FILE), "").unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap().edges().len(), 0);
        fs::write(dir.path().join(EDGES_FILE), "src,relation,dst\n").unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap().edges().len(), 0);
    }

    fn saved() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&twelve_nodes(), dir.path()).unwrap();
        dir
    }

    fn append(dir: &Path, file: &str, text: &str) {
        let mut s = fs::read_to_string(dir.join(file)).unwrap();
        s.push_str(text);
        fs::write(dir.join(file), s).unwrap();
    }

    #[test]
    fn errors_carry_file_and_line() {
        let dir = saved();
        append(dir.path(), EDGES_FILE, "u1,following,ghost\n");
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("edges.csv:7") && msg.contains("ghost"), "{msg}");

        let dir = saved();
        append(dir.path(), EDGES_FILE, "u1,retweets,u2\n");
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("unknown relation `retweets`"), "{msg}");

        let dir = saved();
        append(
            dir.path(),
            NODES_FILE,
            r#"{"id":"u1","kind":"user","indicators":[true,true,true],"numericals":[1,2,3,4,5],"description":""}"#,
        );
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("nodes.jsonl:13") && msg.contains("duplicate"), "{msg}");

        let dir = saved();
        append(dir.path(), NODES_FILE, "{not json\n");
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("nodes.jsonl:13"), "{msg}");
    }

    #[test]
    fn kind_violations_fail_the_load() {
        let dir = saved();
        append(dir.path(), EDGES_FILE, "u1,membership,u2\n");
        assert!(matches!(load_dataset(dir.path()), Err(SegaError::InvalidGraph(_))));
    }

    #[test]
    fn loading_keeps_recent_tweets_and_ignores_line_order() {
        let dir = saved();
        let tweets: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
        let nodes = fs::read_to_string(dir.path().join(NODES_FILE)).unwrap();
        let mut lines: Vec<&str> = nodes.lines().collect();
        lines.reverse();
        fs::write(dir.path().join(NODES_FILE), lines.join("\n")).unwrap();
        append(
            dir.path(),
            TWEETS_FILE,
            &format!("{}\n", serde_json::json!({"id": "u2", "tweets": tweets})),
        );
        let g = load_dataset(dir.path()).unwrap();
        let u2 = g.user("u2").unwrap();
        assert_eq!(u2.attrs.tweets.len(), 20);
        assert_eq!(u2.attrs.tweets.last().unwrap(), "t29");
        assert_eq!(g.users()[0].id, "u1");
    }
}
