//! Deterministic match engine: applies a parse tree to raw lines with no
//! model in the loop.
//!
//! Matching is a depth-first search over the tree. Constants must match
//! byte-exactly at the current offset; variables try candidate end offsets
//! longest-first (greedy), bounded by the next constant literal when one
//! follows. A line matches a template only when it is consumed completely;
//! a template covering a strict prefix of the line does not match. When
//! several leaves match, the leaf with the greatest total constant-literal
//! byte count wins, then the smallest leaf id.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Bundle, Capture, NodeId, ParseTree, StructuredRecord, Token};

/// Outcome of matching one line. `NoMatch` is a value, not an error.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchOutcome {
    Matched {
        leaf: NodeId,
        /// Variable node id with the captured byte range's value, in path
        /// order.
        captures: Vec<(NodeId, Vec<u8>)>,
        candidates_considered: usize,
    },
    NoMatch {
        candidates_considered: usize,
    },
}

impl MatchOutcome {
    pub fn leaf(&self) -> Option<NodeId> {
        match self {
            MatchOutcome::Matched { leaf, .. } => Some(*leaf),
            MatchOutcome::NoMatch { .. } => None,
        }
    }

    pub fn is_match(&self) -> bool {
        self.leaf().is_some()
    }
}

/// Compiled full-segment regexes are process-global: guard re-verification
/// and candidate scoring rebuild matchers constantly, and recompiling the
/// same patterns would dominate their runtime.
fn full_regex(pattern: &str) -> Result<Arc<regex::bytes::Regex>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<regex::bytes::Regex>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut cache = cache.lock().expect("regex cache poisoned");
    if let Some(re) = cache.get(pattern) {
        return Ok(Arc::clone(re));
    }
    let compiled = regex::bytes::Regex::new(&format!(r"\A(?:{pattern})\z")).map_err(|e| {
        Error::Compile {
            index: 0,
            message: e.to_string(),
        }
    })?;
    let arc = Arc::new(compiled);
    cache.insert(pattern.to_string(), Arc::clone(&arc));
    Ok(arc)
}

/// Read-only matcher over a tree. Cheap to build (compiled patterns are
/// cached process-wide) and safe to share across threads.
pub struct Matcher<'t> {
    tree: &'t ParseTree,
    vars: HashMap<NodeId, Arc<regex::bytes::Regex>>,
    const_bytes: HashMap<NodeId, usize>,
}

struct Search<'a> {
    line: &'a [u8],
    caps: Vec<(NodeId, usize, usize)>,
    hits: Vec<(NodeId, Vec<(NodeId, usize, usize)>)>,
    hit_leaves: BTreeSet<NodeId>,
    considered: usize,
}

impl<'t> Matcher<'t> {
    pub fn new(tree: &'t ParseTree) -> Result<Self> {
        let mut vars = HashMap::new();
        for id in tree.node_ids().collect::<Vec<_>>() {
            if let Some(pat) = tree.node(id)?.token.pattern() {
                vars.insert(id, full_regex(pat)?);
            }
        }
        let mut const_bytes = HashMap::new();
        for t in tree.templates() {
            const_bytes.insert(t.leaf, t.constant_bytes());
        }
        Ok(Matcher {
            tree,
            vars,
            const_bytes,
        })
    }

    pub fn tree(&self) -> &ParseTree {
        self.tree
    }

    pub fn match_line(&self, line: &[u8]) -> MatchOutcome {
        let mut search = Search {
            line,
            caps: Vec::new(),
            hits: Vec::new(),
            hit_leaves: BTreeSet::new(),
            considered: 0,
        };
        for &root in self.tree.roots() {
            self.walk(root, 0, &mut search);
        }
        let considered = search.considered;
        let best = search.hits.into_iter().max_by(|(a, _), (b, _)| {
            let ka = (self.const_bytes[a], std::cmp::Reverse(*a));
            let kb = (self.const_bytes[b], std::cmp::Reverse(*b));
            ka.cmp(&kb)
        });
        match best {
            Some((leaf, ranges)) => MatchOutcome::Matched {
                leaf,
                captures: ranges
                    .into_iter()
                    .map(|(id, s, e)| (id, line[s..e].to_vec()))
                    .collect(),
                candidates_considered: considered,
            },
            None => MatchOutcome::NoMatch {
                candidates_considered: considered,
            },
        }
    }

    /// Every leaf that fully matches the line, ascending.
    pub fn matching_leaves(&self, line: &[u8]) -> Vec<NodeId> {
        let mut search = Search {
            line,
            caps: Vec::new(),
            hits: Vec::new(),
            hit_leaves: BTreeSet::new(),
            considered: 0,
        };
        for &root in self.tree.roots() {
            self.walk(root, 0, &mut search);
        }
        search.hit_leaves.into_iter().collect()
    }

    fn record_hit(&self, leaf: NodeId, search: &mut Search) {
        if search.hit_leaves.insert(leaf) {
            search.hits.push((leaf, search.caps.clone()));
        }
    }

    fn walk(&self, id: NodeId, pos: usize, search: &mut Search) {
        let node = self.tree.node(id).expect("walk visits existing nodes");
        match &node.token {
            Token::Constant { literal, sep } => {
                let line = search.line;
                if !line[pos..].starts_with(literal.as_bytes()) {
                    return;
                }
                let after = pos + literal.len();
                if !line[after..].starts_with(sep.as_bytes()) {
                    return;
                }
                let next = after + sep.len();
                if self.tree.is_leaf(id) {
                    search.considered += 1;
                    if next == line.len() {
                        self.record_hit(id, search);
                    }
                }
                for &child in &node.children {
                    self.walk(child, next, search);
                }
            }
            Token::Variable { sep, .. } => {
                let full = Arc::clone(&self.vars[&id]);
                let sep_b = sep.as_bytes();
                let line = search.line;
                if self.tree.is_leaf(id) {
                    search.considered += 1;
                    if line.len() >= pos + sep_b.len() {
                        let end = line.len() - sep_b.len();
                        if &line[end..] == sep_b && full.is_match(&line[pos..end]) {
                            search.caps.push((id, pos, end));
                            self.record_hit(id, search);
                            search.caps.pop();
                        }
                    }
                }
                for &child in &node.children {
                    let child_tok = &self.tree.node(child).expect("child exists").token;
                    match child_tok.literal() {
                        Some(lit) => {
                            // Bounded by the next constant: candidate ends are
                            // the occurrences of sep + literal, longest value
                            // first.
                            let mut needle = sep.as_bytes().to_vec();
                            needle.extend_from_slice(lit.as_bytes());
                            for end in occurrences(&search.line[pos..], &needle).into_iter().rev()
                            {
                                let end = pos + end;
                                if full.is_match(&search.line[pos..end]) {
                                    search.caps.push((id, pos, end));
                                    self.walk(child, end + sep_b.len(), search);
                                    search.caps.pop();
                                }
                            }
                        }
                        None => {
                            // Next token is another variable: try every end
                            // offset, longest first.
                            if search.line.len() < pos + sep_b.len() {
                                continue;
                            }
                            for end in (pos..=search.line.len() - sep_b.len()).rev() {
                                if &search.line[end..end + sep_b.len()] != sep_b {
                                    continue;
                                }
                                if full.is_match(&search.line[pos..end]) {
                                    search.caps.push((id, pos, end));
                                    self.walk(child, end + sep_b.len(), search);
                                    search.caps.pop();
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Builds the full record for one line.
    pub fn record(&self, line_number: u64, line: &[u8]) -> StructuredRecord {
        match self.match_line(line) {
            MatchOutcome::NoMatch { .. } => StructuredRecord::no_match(line_number, line.to_vec()),
            MatchOutcome::Matched { leaf, captures, .. } => {
                let values: HashMap<NodeId, &Vec<u8>> =
                    captures.iter().map(|(id, v)| (*id, v)).collect();
                let path = self.tree.path(leaf).expect("matched leaf has a path");
                let mut caps = Vec::new();
                for id in path {
                    let node = self.tree.node(id).expect("path node exists");
                    match &node.token {
                        Token::Variable { .. } => {
                            let key = node
                                .field_name
                                .clone()
                                .unwrap_or_else(|| format!("${id}"));
                            caps.push(Capture {
                                node: id,
                                key,
                                value: values[&id].clone(),
                            });
                        }
                        Token::Constant { literal, .. } => {
                            // Constants flagged with a field name are
                            // semantically relevant and queryable.
                            if let Some(name) = &node.field_name {
                                caps.push(Capture {
                                    node: id,
                                    key: name.clone(),
                                    value: literal.as_bytes().to_vec(),
                                });
                            }
                        }
                    }
                }
                let description = self
                    .tree
                    .node(leaf)
                    .expect("leaf exists")
                    .description
                    .clone();
                StructuredRecord {
                    line_number,
                    template_id: Some(leaf),
                    description,
                    captures: caps,
                    raw: line.to_vec(),
                }
            }
        }
    }

    /// Greedy, non-backtracking walk used for coarse clustering: the deepest
    /// node path whose tokens consume a prefix of the line.
    pub fn longest_prefix(&self, line: &[u8]) -> Vec<NodeId> {
        let mut path = Vec::new();
        let mut pos = 0;
        let mut siblings: Vec<NodeId> = self.tree.roots().to_vec();
        'outer: loop {
            for &cand in &siblings {
                let node = self.tree.node(cand).expect("sibling exists");
                match &node.token {
                    Token::Constant { literal, sep } => {
                        if line[pos..].starts_with(literal.as_bytes())
                            && line[pos + literal.len()..].starts_with(sep.as_bytes())
                        {
                            pos += literal.len() + sep.len();
                            path.push(cand);
                            siblings = node.children.clone();
                            continue 'outer;
                        }
                    }
                    Token::Variable { sep, .. } => {
                        let full = &self.vars[&cand];
                        let sep_b = sep.as_bytes();
                        if line.len() < pos + sep_b.len() {
                            continue;
                        }
                        let found = (pos..=line.len() - sep_b.len()).rev().find(|&end| {
                            &line[end..end + sep_b.len()] == sep_b
                                && full.is_match(&line[pos..end])
                        });
                        if let Some(end) = found {
                            pos = end + sep_b.len();
                            path.push(cand);
                            siblings = node.children.clone();
                            continue 'outer;
                        }
                    }
                }
            }
            return path;
        }
    }
}

/// All start offsets of `needle` in `hay`, ascending, overlaps included.
fn occurrences(hay: &[u8], needle: &[u8]) -> Vec<usize> {
    if needle.is_empty() {
        return (0..=hay.len()).collect();
    }
    if hay.len() < needle.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len())
        .filter(|&i| hay[i..].starts_with(needle))
        .collect()
}

/// One-shot convenience wrapper around [`Matcher`].
pub fn match_line(tree: &ParseTree, line: &[u8]) -> Result<MatchOutcome> {
    Ok(Matcher::new(tree)?.match_line(line))
}

/// Rebuilds the raw line of a matched record from the tree and its captures.
pub fn reconstruct(tree: &ParseTree, record: &StructuredRecord) -> Result<Vec<u8>> {
    let leaf = record
        .template_id
        .ok_or_else(|| Error::Input("cannot reconstruct an unmatched line".into()))?;
    let values: HashMap<NodeId, &Capture> =
        record.captures.iter().map(|c| (c.node, c)).collect();
    let mut out = Vec::new();
    for id in tree.path(leaf)? {
        let node = tree.node(id)?;
        match &node.token {
            Token::Constant { literal, sep } => {
                if let Some(cap) = values.get(&id) {
                    if cap.value != literal.as_bytes() {
                        return Err(Error::Integrity(format!(
                            "capture for constant node {id} disagrees with its literal"
                        )));
                    }
                }
                out.extend_from_slice(literal.as_bytes());
                out.extend_from_slice(sep.as_bytes());
            }
            Token::Variable { pattern, sep } => {
                let cap = values.get(&id).ok_or_else(|| {
                    Error::Integrity(format!("record is missing a capture for node {id}"))
                })?;
                if !full_regex(pattern)?.is_match(&cap.value) {
                    return Err(Error::Integrity(format!(
                        "capture for node {id} violates pattern {pattern:?}"
                    )));
                }
                out.extend_from_slice(&cap.value);
                out.extend_from_slice(sep.as_bytes());
            }
        }
    }
    Ok(out)
}

/// Splits raw log bytes into lines, stripping only the trailing newline.
pub fn split_lines(data: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &b) in data.iter().enumerate() {
        if b == b'\n' {
            out.push(data[start..i].to_vec());
            start = i + 1;
        }
    }
    if start < data.len() {
        out.push(data[start..].to_vec());
    }
    out
}

pub fn read_log_file(path: &std::path::Path) -> Result<Vec<Vec<u8>>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_lines(&data))
}

/// Matches many lines in parallel against the shared read-only tree; output
/// order follows input order. Line numbers are 1-based.
pub fn ingest_lines(tree: &ParseTree, lines: &[Vec<u8>]) -> Result<Vec<StructuredRecord>> {
    let matcher = Matcher::new(tree)?;
    Ok(lines
        .par_iter()
        .enumerate()
        .map(|(i, line)| matcher.record(i as u64 + 1, line))
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub lines: u64,
    pub matched: u64,
}

/// Streams reader to writer as line-delimited JSON records, matching in
/// parallel chunks.
pub fn ingest_to_writer(
    bundle: &Bundle,
    mut reader: impl BufRead,
    mut writer: impl Write,
    taxonomy_view: bool,
) -> Result<IngestStats> {
    const CHUNK: usize = 8192;
    let matcher = Matcher::new(&bundle.tree)?;
    let mut stats = IngestStats::default();
    let stdin_path = std::path::Path::new("<input>");
    let mut buf = Vec::new();
    let mut chunk: Vec<Vec<u8>> = Vec::with_capacity(CHUNK);
    let mut next_number = 1u64;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io(stdin_path, e))?;
        let eof = n == 0;
        if !eof {
            let mut line = buf.clone();
            if line.last() == Some(&b'\n') {
                line.pop();
            }
            chunk.push(line);
        }
        if chunk.len() == CHUNK || (eof && !chunk.is_empty()) {
            let base = next_number;
            let records: Vec<StructuredRecord> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, line)| matcher.record(base + i as u64, line))
                .collect();
            next_number += chunk.len() as u64;
            stats.lines += chunk.len() as u64;
            for rec in &records {
                if rec.template_id.is_some() {
                    stats.matched += 1;
                }
                let json = record_to_json(bundle, rec, taxonomy_view);
                serde_json::to_writer(&mut writer, &json)
                    .map_err(|e| Error::Parse(format!("record serialization: {e}")))?;
                writer.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
            }
            chunk.clear();
        }
        if eof {
            break;
        }
    }
    Ok(stats)
}

/// Lossy string view of captured bytes for JSON output.
fn display_bytes(v: &[u8]) -> String {
    String::from_utf8_lossy(v).into_owned()
}

pub fn record_to_json(
    bundle: &Bundle,
    record: &StructuredRecord,
    taxonomy_view: bool,
) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    obj.insert("line_number".into(), record.line_number.into());
    obj.insert(
        "template_id".into(),
        match record.template_id {
            Some(id) => id.into(),
            None => serde_json::Value::Null,
        },
    );
    obj.insert(
        "description".into(),
        match &record.description {
            Some(d) => d.clone().into(),
            None => serde_json::Value::Null,
        },
    );
    let mut caps = serde_json::Map::new();
    for c in &record.captures {
        caps.insert(c.key.clone(), display_bytes(&c.value).into());
    }
    obj.insert("captures".into(), caps.into());
    if taxonomy_view {
        let mut tax = serde_json::Map::new();
        for c in &record.captures {
            if let Some(attrs) = bundle.mappings.get(&c.key) {
                for a in attrs {
                    tax.insert(a.clone(), display_bytes(&c.value).into());
                }
            }
        }
        obj.insert("taxonomy".into(), tax.into());
    }
    obj.insert("raw".into(), display_bytes(&record.raw).into());
    obj.into()
}

/// Reads one record back from its JSON form. Capture node ids are recovered
/// by zipping the captured keys against the template path in order.
pub fn record_from_json(bundle: &Bundle, value: &serde_json::Value) -> Result<StructuredRecord> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Parse("record is not a JSON object".into()))?;
    let line_number = obj
        .get("line_number")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse("record lacks line_number".into()))?;
    let raw = obj
        .get("raw")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .as_bytes()
        .to_vec();
    let template_id = match obj.get("template_id") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| Error::Parse("template_id is not an integer".into()))?
                as NodeId,
        ),
    };
    let description = obj
        .get("description")
        .and_then(|v| v.as_str())
        .map(String::from);
    let mut captures = Vec::new();
    if let Some(leaf) = template_id {
        let caps_obj = obj
            .get("captures")
            .and_then(|v| v.as_object())
            .ok_or_else(|| Error::Parse("matched record lacks captures".into()))?;
        let mut entries = caps_obj.iter();
        for id in bundle.tree.path(leaf)? {
            let node = bundle.tree.node(id)?;
            let expected_key = match (&node.token, &node.field_name) {
                (Token::Variable { .. }, Some(name)) => name.clone(),
                (Token::Variable { .. }, None) => format!("${id}"),
                (Token::Constant { .. }, Some(name)) => name.clone(),
                (Token::Constant { .. }, None) => continue,
            };
            let (key, val) = entries.next().ok_or_else(|| {
                Error::Parse(format!("record is missing capture {expected_key:?}"))
            })?;
            if key != &expected_key {
                return Err(Error::Parse(format!(
                    "capture {key:?} does not align with template (expected {expected_key:?})"
                )));
            }
            let val = val
                .as_str()
                .ok_or_else(|| Error::Parse(format!("capture {key:?} is not a string")))?;
            captures.push(Capture {
                node: id,
                key: key.clone(),
                value: val.as_bytes().to_vec(),
            });
        }
    }
    Ok(StructuredRecord {
        line_number,
        template_id,
        description,
        captures,
        raw,
    })
}
