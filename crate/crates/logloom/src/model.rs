//! Core data model: the token parse tree, templates, the field schema, and
//! the serialized parser bundle.
//!
//! A parser is a prefix-sharing tree of tokens. Every root-to-leaf path is
//! one template; a virtual root lets several top-level formats coexist.
//! Tokens record their trailing separator bytes explicitly so a matched
//! line can be reconstructed byte-exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

pub const WILDCARD: &str = "<*>";

/// Current parser bundle document version.
pub const BUNDLE_VERSION: u32 = 1;

/// One token of a template: an exact byte constant or a regex-shaped
/// variable, each with an explicit trailing separator.
///
/// Token equality (kind, text, separator) is the identity used when merging
/// template prefixes; field names and descriptions live on tree nodes and do
/// not affect merging.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Token {
    Constant {
        literal: String,
        #[serde(default)]
        sep: String,
    },
    Variable {
        pattern: String,
        #[serde(default)]
        sep: String,
    },
}

impl Token {
    pub fn constant(literal: impl Into<String>, sep: impl Into<String>) -> Self {
        Token::Constant {
            literal: literal.into(),
            sep: sep.into(),
        }
    }

    pub fn variable(pattern: impl Into<String>, sep: impl Into<String>) -> Self {
        Token::Variable {
            pattern: pattern.into(),
            sep: sep.into(),
        }
    }

    pub fn sep(&self) -> &str {
        match self {
            Token::Constant { sep, .. } | Token::Variable { sep, .. } => sep,
        }
    }

    pub fn is_variable(&self) -> bool {
        matches!(self, Token::Variable { .. })
    }

    /// Constant literal, if this token is a constant.
    pub fn literal(&self) -> Option<&str> {
        match self {
            Token::Constant { literal, .. } => Some(literal),
            Token::Variable { .. } => None,
        }
    }

    /// Variable pattern, if this token is a variable.
    pub fn pattern(&self) -> Option<&str> {
        match self {
            Token::Variable { pattern, .. } => Some(pattern),
            Token::Constant { .. } => None,
        }
    }

    /// Checks the token is representable: constants are non-empty and never
    /// contain the wildcard marker (which would make wildcard forms
    /// ambiguous); variable patterns compile in the supported regex dialect.
    pub fn validate(&self, index: usize) -> Result<()> {
        match self {
            Token::Constant { literal, .. } => {
                if literal.is_empty() {
                    return Err(Error::Compile {
                        index,
                        message: "constant literal is empty".into(),
                    });
                }
                if literal.contains(WILDCARD) {
                    return Err(Error::Compile {
                        index,
                        message: format!("constant literal may not contain {WILDCARD:?}"),
                    });
                }
                Ok(())
            }
            Token::Variable { pattern, .. } => {
                if pattern.is_empty() {
                    return Err(Error::Compile {
                        index,
                        message: "variable pattern is empty".into(),
                    });
                }
                match compile_check(pattern) {
                    None => Ok(()),
                    Some(msg) => Err(Error::Compile {
                        index,
                        message: msg,
                    }),
                }
            }
        }
    }
}

/// Compile-checks a pattern, memoizing results: guard re-verification after
/// every edit command would otherwise recompile the same patterns thousands
/// of times.
fn compile_check(pattern: &str) -> Option<String> {
    static CACHE: OnceLock<Mutex<HashMap<String, Option<String>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut cache = cache.lock().expect("compile cache poisoned");
    cache
        .entry(pattern.to_string())
        .or_insert_with(|| regex::bytes::Regex::new(pattern).err().map(|e| e.to_string()))
        .clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenNode {
    pub id: NodeId,
    pub token: Token,
    pub children: Vec<NodeId>,
    /// Semantic field name; set on variables during naming, and on constants
    /// flagged as semantically relevant.
    pub field_name: Option<String>,
    pub description: Option<String>,
    /// A sample value seen for this token during induction.
    pub example: Option<String>,
}

/// One root-to-leaf path of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub leaf: NodeId,
    pub node_ids: Vec<NodeId>,
    pub tokens: Vec<Token>,
    pub description: Option<String>,
}

impl Template {
    /// Renders constants verbatim and every variable as `<*>`, joined by the
    /// recorded separators.
    pub fn wildcard_form(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            match tok {
                Token::Constant { literal, sep } => {
                    out.push_str(literal);
                    out.push_str(sep);
                }
                Token::Variable { sep, .. } => {
                    out.push_str(WILDCARD);
                    out.push_str(sep);
                }
            }
        }
        out
    }

    /// Total byte count of constant literals; the match tie-break key.
    pub fn constant_bytes(&self) -> usize {
        self.tokens
            .iter()
            .filter_map(|t| t.literal().map(str::len))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertOutcome {
    pub leaf: NodeId,
    /// Nodes created by this insert; zero when the template already existed
    /// or was a strict prefix of an existing path.
    pub created: usize,
}

/// Prefix-sharing token tree. Node ids are stable: they are assigned from a
/// monotone counter and survive serialization round-trips.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseTree {
    nodes: BTreeMap<NodeId, TokenNode>,
    roots: Vec<NodeId>,
    leaves: BTreeSet<NodeId>,
    parent: BTreeMap<NodeId, NodeId>,
    next_id: NodeId,
}

impl ParseTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.leaves.iter().copied()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.leaves.contains(&id)
    }

    pub fn node(&self, id: NodeId) -> Result<&TokenNode> {
        self.nodes
            .get(&id)
            .ok_or_else(|| Error::UnknownId(format!("node {id}")))
    }

    pub fn parent_of(&self, id: NodeId) -> Option<NodeId> {
        self.parent.get(&id).copied()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    fn sibling_list(&self, parent: Option<NodeId>) -> &[NodeId] {
        match parent {
            None => &self.roots,
            Some(p) => &self.nodes[&p].children,
        }
    }

    fn sibling_list_mut(&mut self, parent: Option<NodeId>) -> &mut Vec<NodeId> {
        match parent {
            None => &mut self.roots,
            Some(p) => &mut self.nodes.get_mut(&p).expect("parent exists").children,
        }
    }

    fn alloc(&mut self, token: Token) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(
            id,
            TokenNode {
                id,
                token,
                children: Vec::new(),
                field_name: None,
                description: None,
                example: None,
            },
        );
        id
    }

    /// Inserts a template, merging along the longest existing prefix of
    /// identical tokens. Idempotent: re-inserting an existing template (or a
    /// strict prefix of one) creates no nodes and only marks a leaf.
    pub fn insert_template(&mut self, tokens: &[Token]) -> Result<InsertOutcome> {
        if tokens.is_empty() {
            return Err(Error::Input("cannot insert an empty template".into()));
        }
        for (i, tok) in tokens.iter().enumerate() {
            tok.validate(i)?;
        }

        let mut parent: Option<NodeId> = None;
        let mut at = 0;
        'walk: while at < tokens.len() {
            for &child in self.sibling_list(parent) {
                if self.nodes[&child].token == tokens[at] {
                    parent = Some(child);
                    at += 1;
                    continue 'walk;
                }
            }
            break;
        }

        let mut created = 0;
        for tok in &tokens[at..] {
            let id = self.alloc(tok.clone());
            if let Some(p) = parent {
                self.parent.insert(id, p);
            }
            self.sibling_list_mut(parent).push(id);
            parent = Some(id);
            created += 1;
        }

        let leaf = parent.expect("non-empty template always lands on a node");
        self.leaves.insert(leaf);
        Ok(InsertOutcome { leaf, created })
    }

    /// Root-to-leaf node ids for any node (not just leaves).
    pub fn path(&self, id: NodeId) -> Result<Vec<NodeId>> {
        self.node(id)?;
        let mut rev = vec![id];
        let mut cur = id;
        while let Some(p) = self.parent.get(&cur) {
            rev.push(*p);
            cur = *p;
        }
        rev.reverse();
        Ok(rev)
    }

    pub fn template(&self, leaf: NodeId) -> Result<Template> {
        if !self.leaves.contains(&leaf) {
            return Err(Error::UnknownId(format!("leaf {leaf}")));
        }
        let node_ids = self.path(leaf)?;
        let tokens = node_ids
            .iter()
            .map(|id| self.nodes[id].token.clone())
            .collect();
        Ok(Template {
            leaf,
            node_ids,
            tokens,
            description: self.nodes[&leaf].description.clone(),
        })
    }

    /// All templates, ordered by leaf id.
    pub fn templates(&self) -> Vec<Template> {
        self.leaves
            .iter()
            .map(|&leaf| self.template(leaf).expect("leaf is valid"))
            .collect()
    }

    pub fn set_field_name(&mut self, id: NodeId, name: Option<String>) -> Result<()> {
        self.node(id)?;
        self.nodes.get_mut(&id).unwrap().field_name = name;
        Ok(())
    }

    pub fn set_description(&mut self, id: NodeId, text: Option<String>) -> Result<()> {
        self.node(id)?;
        self.nodes.get_mut(&id).unwrap().description = text;
        Ok(())
    }

    pub fn set_example(&mut self, id: NodeId, example: Option<String>) -> Result<()> {
        self.node(id)?;
        self.nodes.get_mut(&id).unwrap().example = example;
        Ok(())
    }

    pub fn set_leaf(&mut self, id: NodeId, is_leaf: bool) -> Result<()> {
        self.node(id)?;
        if is_leaf {
            self.leaves.insert(id);
        } else {
            self.leaves.remove(&id);
        }
        Ok(())
    }

    /// Adds a single node under `parent` (`None` = top level) at `position`
    /// (appended when omitted).
    pub fn add_node(
        &mut self,
        parent: Option<NodeId>,
        position: Option<usize>,
        token: Token,
        leaf: bool,
    ) -> Result<NodeId> {
        token.validate(0)?;
        if let Some(p) = parent {
            self.node(p)?;
        }
        let siblings = self.sibling_list(parent).len();
        let pos = position.unwrap_or(siblings);
        if pos > siblings {
            return Err(Error::Input(format!(
                "position {pos} out of range (siblings: {siblings})"
            )));
        }
        let id = self.alloc(token);
        if let Some(p) = parent {
            self.parent.insert(id, p);
        }
        self.sibling_list_mut(parent).insert(pos, id);
        if leaf {
            self.leaves.insert(id);
        }
        Ok(id)
    }

    /// Removes exactly one node. Its children are left in place, dangling;
    /// structural verification catches any orphan this creates.
    pub fn remove_node(&mut self, id: NodeId) -> Result<()> {
        self.node(id)?;
        let parent = self.parent.remove(&id);
        self.sibling_list_mut(parent).retain(|&c| c != id);
        // Children keep their parent link so re-verification sees them as
        // unreachable rather than silently promoting them to roots.
        self.nodes.remove(&id);
        self.leaves.remove(&id);
        Ok(())
    }

    /// Retires a whole template: unmarks the leaf, then deletes every path
    /// node that no other template still needs (childless and not itself a
    /// leaf), walking from the leaf toward the root. Shared prefixes
    /// survive untouched.
    pub fn remove_template(&mut self, leaf: NodeId) -> Result<()> {
        if !self.leaves.contains(&leaf) {
            return Err(Error::UnknownId(format!("leaf {leaf}")));
        }
        self.leaves.remove(&leaf);
        let mut cur = Some(leaf);
        while let Some(id) = cur {
            let node = self.node(id)?;
            if !node.children.is_empty() || self.leaves.contains(&id) {
                break;
            }
            let parent = self.parent.remove(&id);
            self.sibling_list_mut(parent).retain(|&c| c != id);
            self.nodes.remove(&id);
            cur = parent;
        }
        Ok(())
    }

    /// Re-parents a subtree. Moving a node under its own descendant leaves
    /// the subtree unreachable, which verification reports.
    pub fn move_node(
        &mut self,
        id: NodeId,
        new_parent: Option<NodeId>,
        position: Option<usize>,
    ) -> Result<()> {
        self.node(id)?;
        if let Some(p) = new_parent {
            self.node(p)?;
            if p == id {
                return Err(Error::Input(format!("cannot move node {id} under itself")));
            }
        }
        let old_parent = self.parent.remove(&id);
        self.sibling_list_mut(old_parent).retain(|&c| c != id);
        let siblings = self.sibling_list(new_parent).len();
        let pos = position.unwrap_or(siblings).min(siblings);
        self.sibling_list_mut(new_parent).insert(pos, id);
        if let Some(p) = new_parent {
            self.parent.insert(id, p);
        }
        Ok(())
    }

    /// Replaces sibling nodes with a single variable node, recursively
    /// merging their subtrees along identical tokens. Leaf markers are
    /// unioned; field names survive only when uniform across the merged
    /// nodes.
    pub fn merge_siblings(&mut self, ids: &[NodeId], token: Token) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Input("merge requires at least one node".into()));
        }
        let mut seen = BTreeSet::new();
        for &id in ids {
            self.node(id)?;
            if !seen.insert(id) {
                return Err(Error::Input(format!("node {id} listed twice in merge")));
            }
        }
        token.validate(0)?;
        let parent = self.parent.get(&ids[0]).copied();
        for &id in &ids[1..] {
            if self.parent.get(&id).copied() != parent {
                return Err(Error::Input(
                    "merged nodes must share a single parent".into(),
                ));
            }
        }

        let position = self
            .sibling_list(parent)
            .iter()
            .position(|c| ids.contains(c))
            .expect("ids are children of parent");

        let merged = self.alloc(token);
        if let Some(p) = parent {
            self.parent.insert(merged, p);
        }
        self.sibling_list_mut(parent).insert(position, merged);

        let fields: BTreeSet<_> = ids
            .iter()
            .map(|id| self.nodes[id].field_name.clone())
            .collect();
        if fields.len() == 1 {
            self.nodes.get_mut(&merged).unwrap().field_name =
                fields.into_iter().next().unwrap();
        }

        for &id in ids {
            self.fold_into(merged, id);
        }
        Ok(merged)
    }

    /// Folds `src` (and its subtree) into `dst`: children with identical
    /// tokens merge recursively, the rest are re-parented, and `src` is
    /// dropped.
    fn fold_into(&mut self, dst: NodeId, src: NodeId) {
        if self.leaves.remove(&src) {
            self.leaves.insert(dst);
        }
        if self.nodes[&dst].description.is_none() {
            let d = self.nodes[&src].description.clone();
            self.nodes.get_mut(&dst).unwrap().description = d;
        }
        if self.nodes[&dst].example.is_none() {
            let e = self.nodes[&src].example.clone();
            self.nodes.get_mut(&dst).unwrap().example = e;
        }

        let children = self.nodes[&src].children.clone();
        for child in children {
            let tok = self.nodes[&child].token.clone();
            let existing = self.nodes[&dst]
                .children
                .iter()
                .copied()
                .find(|c| self.nodes[c].token == tok);
            match existing {
                Some(into) => self.fold_into(into, child),
                None => {
                    self.nodes.get_mut(&dst).unwrap().children.push(child);
                    self.parent.insert(child, dst);
                }
            }
        }

        let parent = self.parent.remove(&src);
        self.sibling_list_mut(parent).retain(|&c| c != src);
        self.nodes.remove(&src);
    }

    pub fn descendants(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            out.push(n);
            if let Some(node) = self.nodes.get(&n) {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }

    pub fn leaves_under(&self, id: NodeId) -> Vec<NodeId> {
        self.descendants(id)
            .into_iter()
            .filter(|n| self.leaves.contains(n))
            .collect()
    }

    /// Structural guard: the node graph must be a tree with valid tokens,
    /// every childless node marked as a leaf, and every template reachable
    /// and unique.
    pub fn verify_structure(&self) -> Result<()> {
        let mut visited = BTreeSet::new();
        let mut stack: Vec<NodeId> = Vec::new();
        for &r in &self.roots {
            if !self.nodes.contains_key(&r) {
                return Err(Error::Integrity(format!("root {r} does not exist")));
            }
            if self.parent.contains_key(&r) {
                return Err(Error::Integrity(format!("root {r} also has a parent")));
            }
            stack.push(r);
        }
        while let Some(n) = stack.pop() {
            if !visited.insert(n) {
                return Err(Error::Integrity(format!(
                    "node {n} is referenced by two parents"
                )));
            }
            let node = &self.nodes[&n];
            node.token.validate(0).map_err(|e| {
                Error::Integrity(format!("node {n} carries an invalid token: {e}"))
            })?;
            if node.children.is_empty() && !self.leaves.contains(&n) {
                return Err(Error::Integrity(format!(
                    "node {n} has no children but is not a leaf"
                )));
            }
            for &c in &node.children {
                if !self.nodes.contains_key(&c) {
                    return Err(Error::Integrity(format!(
                        "node {n} references missing child {c}"
                    )));
                }
                if self.parent.get(&c) != Some(&n) {
                    return Err(Error::Integrity(format!(
                        "child {c} has inconsistent parent link"
                    )));
                }
                stack.push(c);
            }
        }
        if visited.len() != self.nodes.len() {
            let orphan = self
                .nodes
                .keys()
                .find(|id| !visited.contains(id))
                .expect("some node is unvisited");
            return Err(Error::Integrity(format!(
                "node {orphan} is unreachable from the roots"
            )));
        }
        for &leaf in &self.leaves {
            if !self.nodes.contains_key(&leaf) {
                return Err(Error::Integrity(format!("leaf {leaf} does not exist")));
            }
        }
        if let Some(max) = self.nodes.keys().max() {
            if self.next_id <= *max {
                return Err(Error::Integrity(
                    "node id counter lags behind existing ids".into(),
                ));
            }
        }
        let mut seen_templates = BTreeSet::new();
        for &leaf in &self.leaves {
            let toks: Vec<Token> = self
                .path(leaf)?
                .iter()
                .map(|id| self.nodes[id].token.clone())
                .collect();
            if !seen_templates.insert(toks) {
                return Err(Error::Integrity(format!(
                    "leaf {leaf} duplicates another template's token sequence"
                )));
            }
        }
        Ok(())
    }
}

/// Lowercases, maps non-alphanumerics to underscores, and collapses runs.
pub fn normalize_field_name(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut last_us = true;
    for ch in raw.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
            last_us = false;
        } else if !last_us {
            out.push('_');
            last_us = true;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaField {
    pub name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub example_values: Vec<String>,
}

/// Field inventory, ordered by registration. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schema {
    fields: Vec<SchemaField>,
}

impl Schema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fields(&self) -> &[SchemaField] {
        &self.fields
    }

    pub fn get(&self, name: &str) -> Option<&SchemaField> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Registers a field under its normalized name. Re-registering the same
    /// name with the same description is a no-op; the same name with a
    /// different description is a collision the caller must reconcile.
    /// Returns the normalized name and whether the field is new.
    pub fn register(&mut self, name: &str, description: &str) -> Result<(String, bool)> {
        let name = normalize_field_name(name);
        if name.is_empty() {
            return Err(Error::Input(format!(
                "field name {:?} is empty after normalization",
                name
            )));
        }
        if let Some(existing) = self.get(&name) {
            if existing.description == description {
                return Ok((name, false));
            }
            return Err(Error::NameCollision { name });
        }
        self.fields.push(SchemaField {
            name: name.clone(),
            description: description.to_string(),
            example_values: Vec::new(),
        });
        Ok((name, true))
    }

    pub fn add_examples(&mut self, name: &str, values: impl IntoIterator<Item = String>) {
        if let Some(f) = self.fields.iter_mut().find(|f| f.name == name) {
            for v in values {
                if !f.example_values.contains(&v) && f.example_values.len() < 3 {
                    f.example_values.push(v);
                }
            }
        }
    }

    pub fn set_description(&mut self, name: &str, description: &str) -> Result<()> {
        match self.fields.iter_mut().find(|f| f.name == name) {
            Some(f) => {
                f.description = description.to_string();
                Ok(())
            }
            None => Err(Error::UnknownId(format!("field {name:?}"))),
        }
    }

    /// Drops a field from the inventory. Returns whether it existed.
    pub fn remove(&mut self, name: &str) -> bool {
        let before = self.fields.len();
        self.fields.retain(|f| f.name != name);
        self.fields.len() != before
    }
}

/// One captured token of a matched line. `key` is the node's field name, or
/// `$<node id>` for unnamed variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub node: NodeId,
    pub key: String,
    pub value: Vec<u8>,
}

/// A parsed (or unparsed) log line. Concatenating, in path order, each
/// constant's literal and each variable's captured value together with the
/// recorded separators reproduces `raw` byte-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredRecord {
    pub line_number: u64,
    pub template_id: Option<NodeId>,
    pub description: Option<String>,
    pub captures: Vec<Capture>,
    pub raw: Vec<u8>,
}

impl StructuredRecord {
    pub fn no_match(line_number: u64, raw: Vec<u8>) -> Self {
        StructuredRecord {
            line_number,
            template_id: None,
            description: None,
            captures: Vec::new(),
            raw,
        }
    }

    pub fn values(&self, key: &str) -> impl Iterator<Item = &[u8]> + '_ {
        let key = key.to_string();
        self.captures
            .iter()
            .filter(move |c| c.key == key)
            .map(|c| c.value.as_slice())
    }
}

/// Everything needed to run a parser: tree, schema, field-to-attribute
/// mappings, and the taxonomy attribute paths those mappings may cite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub tree: ParseTree,
    pub schema: Schema,
    pub mappings: BTreeMap<String, Vec<String>>,
    /// Attribute paths of the taxonomy the mappings were induced against;
    /// empty when no mapping stage has run.
    pub taxonomy_attrs: BTreeSet<String>,
    /// Maximum attributes one field may map to.
    pub mapping_cap: usize,
}

impl Bundle {
    pub fn new(tree: ParseTree) -> Self {
        Bundle {
            tree,
            schema: Schema::new(),
            mappings: BTreeMap::new(),
            taxonomy_attrs: BTreeSet::new(),
            mapping_cap: 1,
        }
    }

    /// Referential and structural checks across the whole bundle.
    pub fn verify(&self) -> Result<()> {
        self.tree.verify_structure()?;
        if self.mapping_cap == 0 {
            return Err(Error::Integrity("mapping cap must be positive".into()));
        }
        let mut names = BTreeSet::new();
        for f in self.schema.fields() {
            if f.name != normalize_field_name(&f.name) || f.name.is_empty() {
                return Err(Error::Integrity(format!(
                    "field name {:?} is not normalized",
                    f.name
                )));
            }
            if !names.insert(&f.name) {
                return Err(Error::Integrity(format!(
                    "field name {:?} is registered twice",
                    f.name
                )));
            }
        }
        for id in self.tree.node_ids().collect::<Vec<_>>() {
            if let Some(name) = &self.tree.node(id)?.field_name {
                if !self.schema.contains(name) {
                    return Err(Error::Integrity(format!(
                        "node {id} names field {name:?} which is not in the schema"
                    )));
                }
            }
        }
        for (field, attrs) in &self.mappings {
            if !self.schema.contains(field) {
                return Err(Error::Integrity(format!(
                    "mapping cites unknown field {field:?}"
                )));
            }
            if attrs.len() > self.mapping_cap {
                return Err(Error::Integrity(format!(
                    "field {field:?} maps {} attributes, cap is {}",
                    attrs.len(),
                    self.mapping_cap
                )));
            }
            for a in attrs {
                if !self.taxonomy_attrs.contains(a) {
                    return Err(Error::Integrity(format!(
                        "mapping for field {field:?} cites attribute {a:?} absent from the taxonomy"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Removes schema fields no tree node references anymore, along with
    /// their mappings. Field merges leave these husks behind.
    pub fn prune_unused_fields(&mut self) -> Vec<String> {
        let used = self.field_occurrences();
        let dead: Vec<String> = self
            .schema
            .fields()
            .iter()
            .map(|f| f.name.clone())
            .filter(|n| !used.contains_key(n))
            .collect();
        for name in &dead {
            self.schema.remove(name);
            self.mappings.remove(name);
        }
        dead
    }

    /// How many templates reference each field. A node shared by several
    /// template prefixes counts once per template that walks through it.
    pub fn field_occurrences(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for template in self.tree.templates() {
            for id in &template.node_ids {
                if let Some(name) =
                    &self.tree.node(*id).expect("path id exists").field_name
                {
                    *counts.entry(name.clone()).or_default() += 1;
                }
            }
        }
        counts
    }

    /// Serializes to the versioned, diff-friendly bundle document.
    pub fn to_document(&self) -> String {
        let doc = BundleDoc::from(self);
        serde_json::to_string_pretty(&doc).expect("bundle serializes") + "\n"
    }

    /// Parses and fully validates a bundle document.
    pub fn from_document(text: &str) -> Result<Bundle> {
        let doc: BundleDoc = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("bundle document: {e}")))?;
        if doc.format != BUNDLE_FORMAT {
            return Err(Error::Parse(format!(
                "unexpected document format {:?}",
                doc.format
            )));
        }
        if doc.version != BUNDLE_VERSION {
            return Err(Error::Parse(format!(
                "unsupported bundle version {} (expected {BUNDLE_VERSION})",
                doc.version
            )));
        }
        let bundle = doc.into_bundle()?;
        bundle.verify()?;
        Ok(bundle)
    }
}

const BUNDLE_FORMAT: &str = "parser-bundle";

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: NodeId,
    #[serde(flatten)]
    token: Token,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    example: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TreeDoc {
    roots: Vec<NodeId>,
    leaves: Vec<NodeId>,
    next_id: NodeId,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
struct BundleDoc {
    format: String,
    version: u32,
    mapping_cap: usize,
    tree: TreeDoc,
    schema: Vec<SchemaField>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    mappings: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    taxonomy_attrs: BTreeSet<String>,
}

impl From<&Bundle> for BundleDoc {
    fn from(b: &Bundle) -> Self {
        let nodes = b
            .tree
            .nodes
            .values()
            .map(|n| NodeDoc {
                id: n.id,
                token: n.token.clone(),
                children: n.children.clone(),
                field: n.field_name.clone(),
                description: n.description.clone(),
                example: n.example.clone(),
            })
            .collect();
        BundleDoc {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            mapping_cap: b.mapping_cap,
            tree: TreeDoc {
                roots: b.tree.roots.clone(),
                leaves: b.tree.leaves.iter().copied().collect(),
                next_id: b.tree.next_id,
                nodes,
            },
            schema: b.schema.fields.clone(),
            mappings: b.mappings.clone(),
            taxonomy_attrs: b.taxonomy_attrs.clone(),
        }
    }
}

impl BundleDoc {
    fn into_bundle(self) -> Result<Bundle> {
        let mut tree = ParseTree::new();
        for nd in self.tree.nodes {
            if tree
                .nodes
                .insert(
                    nd.id,
                    TokenNode {
                        id: nd.id,
                        token: nd.token,
                        children: nd.children,
                        field_name: nd.field,
                        description: nd.description,
                        example: nd.example,
                    },
                )
                .is_some()
            {
                return Err(Error::Integrity(format!("node {} listed twice", nd.id)));
            }
        }
        tree.roots = self.tree.roots;
        tree.leaves = self.tree.leaves.into_iter().collect();
        tree.next_id = self.tree.next_id;
        let links: Vec<(NodeId, Vec<NodeId>)> = tree
            .nodes
            .values()
            .map(|n| (n.id, n.children.clone()))
            .collect();
        for (p, children) in links {
            for c in children {
                if tree.parent.insert(c, p).is_some() {
                    return Err(Error::Integrity(format!(
                        "node {c} is referenced by two parents"
                    )));
                }
            }
        }

        let mut schema = Schema::new();
        for f in self.schema {
            if schema.get(&f.name).is_some() {
                return Err(Error::Integrity(format!(
                    "field name {:?} is registered twice",
                    f.name
                )));
            }
            schema.fields.push(f);
        }

        Ok(Bundle {
            tree,
            schema,
            mappings: self.mappings,
            taxonomy_attrs: self.taxonomy_attrs,
            mapping_cap: self.mapping_cap,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn insert_builds_single_branch() {
        let mut tree = ParseTree::new();
        let out = tree.insert_template(&accepted_conn_tokens()).unwrap();
        assert_eq!(out.created, 18);
        assert_eq!(tree.node_count(), 18);
        assert_eq!(tree.leaf_count(), 1);
        assert_eq!(tree.template(out.leaf).unwrap().tokens.len(), 18);
        tree.verify_structure().unwrap();
    }

    #[test]
    fn insert_merges_shared_prefix() {
        let mut tree = ParseTree::new();
        let first = tree.insert_template(&accepted_conn_tokens()).unwrap();
        let second = tree.insert_template(&failed_auth_tokens()).unwrap();
        assert_eq!(second.created, 5);
        assert_eq!(tree.node_count(), 23);
        assert_eq!(tree.leaf_count(), 2);
        // Both templates share exactly the first six node ids.
        let p1 = tree.path(first.leaf).unwrap();
        let p2 = tree.path(second.leaf).unwrap();
        assert_eq!(p1[..6], p2[..6]);
        assert_ne!(p1[6], p2[6]);
        tree.verify_structure().unwrap();
    }

    #[test]
    fn insert_is_idempotent() {
        let mut tree = ParseTree::new();
        let a = tree.insert_template(&accepted_conn_tokens()).unwrap();
        let b = tree.insert_template(&accepted_conn_tokens()).unwrap();
        assert_eq!(a.leaf, b.leaf);
        assert_eq!(b.created, 0);
        assert_eq!(tree.node_count(), 18);
        assert_eq!(tree.leaf_count(), 1);
    }

    #[test]
    fn strict_prefix_insert_marks_interior_leaf() {
        let mut tree = ParseTree::new();
        tree.insert_template(&accepted_conn_tokens()).unwrap();
        let prefix = &accepted_conn_tokens()[..6];
        let out = tree.insert_template(prefix).unwrap();
        assert_eq!(out.created, 0);
        assert_eq!(tree.leaf_count(), 2);
        assert!(tree.is_leaf(out.leaf));
        assert!(!tree.node(out.leaf).unwrap().children.is_empty());
        tree.verify_structure().unwrap();
    }

    #[test]
    fn bad_pattern_reports_token_index() {
        let mut tree = ParseTree::new();
        let toks = vec![
            Token::constant("ok", " "),
            Token::variable(r"\d+(", " "),
        ];
        match tree.insert_template(&toks) {
            Err(Error::Compile { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected compile error, got {other:?}"),
        }
        assert!(tree.is_empty());
    }

    #[test]
    fn empty_literal_and_wildcard_literal_rejected() {
        assert!(Token::constant("", " ").validate(0).is_err());
        assert!(Token::constant("a<*>b", " ").validate(0).is_err());
        assert!(Token::variable("", " ").validate(0).is_err());
    }

    #[test]
    fn wildcard_form_matches_expected_rendering() {
        let mut tree = ParseTree::new();
        let out = tree.insert_template(&accepted_conn_tokens()).unwrap();
        let t = tree.template(out.leaf).unwrap();
        assert_eq!(
            t.wildcard_form(),
            "<*> <*> sshd[<*>]: Accepted conn user:<*> <*> src={ip=<*> port=<*>}"
        );
    }

    #[test]
    fn constant_bytes_counts_literals_only() {
        let mut tree = ParseTree::new();
        let out = tree.insert_template(&accepted_conn_tokens()).unwrap();
        let t = tree.template(out.leaf).unwrap();
        let expected: usize = ["sshd", "[", "]:", "Accepted", "conn", "user:", "src=", "{", "ip=", "port=", "}"]
            .iter()
            .map(|s| s.len())
            .sum();
        assert_eq!(t.constant_bytes(), expected);
    }

    #[test]
    fn equal_wildcard_forms_have_equal_skeletons() {
        // Randomized templates over a wildcard-free alphabet: equal rendered
        // forms imply identical constants in identical positions.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let lits = ["alpha", "beta", "g", "dd"];
        let pats = [r"\d+", r"\S+"];
        let mut render = Vec::new();
        for _ in 0..500 {
            let n = rng.random_range(1..6);
            let toks: Vec<Token> = (0..n)
                .map(|_| {
                    let sep = if rng.random_bool(0.5) { " " } else { "" };
                    if rng.random_bool(0.5) {
                        Token::constant(lits[rng.random_range(0..lits.len())], sep)
                    } else {
                        Token::variable(pats[rng.random_range(0..pats.len())], sep)
                    }
                })
                .collect();
            let t = Template {
                leaf: 0,
                node_ids: vec![],
                tokens: toks.clone(),
                description: None,
            };
            render.push((t.wildcard_form(), toks));
        }
        for (fa, ta) in &render {
            for (fb, tb) in &render {
                if fa == fb {
                    let ka: Vec<_> = ta.iter().filter_map(|t| t.literal()).collect();
                    let kb: Vec<_> = tb.iter().filter_map(|t| t.literal()).collect();
                    assert_eq!(ka, kb, "equal wildcard forms {fa:?} disagree on constants");
                }
            }
        }
    }

    #[test]
    fn remove_node_orphaning_subtree_fails_verification() {
        let mut tree = ParseTree::new();
        let out = tree.insert_template(&accepted_conn_tokens()).unwrap();
        let mid = tree.path(out.leaf).unwrap()[5];
        tree.remove_node(mid).unwrap();
        assert!(matches!(
            tree.verify_structure(),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn remove_template_preserves_shared_prefix() {
        let mut tree = ParseTree::new();
        let a = tree.insert_template(&accepted_conn_tokens()).unwrap().leaf;
        let b = tree.insert_template(&failed_auth_tokens()).unwrap().leaf;
        let before = tree.node_count();
        tree.remove_template(a).unwrap();
        tree.verify_structure().unwrap();
        // The accepted branch had 12 private nodes past the shared prefix.
        assert_eq!(tree.node_count(), before - 12);
        assert_eq!(tree.template(b).unwrap().tokens.len(), 11);
        assert!(tree.template(a).is_err());
        // Removing the survivor leaves an empty tree.
        tree.remove_template(b).unwrap();
        tree.verify_structure().unwrap();
        assert_eq!(tree.node_count(), 0);
        assert!(tree.remove_template(b).is_err());
    }

    #[test]
    fn remove_template_keeps_interior_leaf_prefix() {
        // A template that is a strict prefix of another: removing the longer
        // one must not delete nodes the prefix leaf still owns.
        let mut tree = ParseTree::new();
        let long = tree.insert_template(&accepted_conn_tokens()).unwrap().leaf;
        let short_tokens: Vec<Token> = accepted_conn_tokens()[..6].to_vec();
        let short = tree.insert_template(&short_tokens).unwrap().leaf;
        tree.remove_template(long).unwrap();
        tree.verify_structure().unwrap();
        assert_eq!(tree.node_count(), 6);
        assert_eq!(tree.template(short).unwrap().tokens.len(), 6);
    }

    #[test]
    fn merge_siblings_unions_subtrees_and_leaves() {
        // a -> (x -> c leaf, y -> c leaf): merging x and y into one variable
        // must leave a single child with one leaf below it.
        let mut tree = ParseTree::new();
        let a = Token::constant("a", " ");
        let c = Token::constant("c", "");
        let x = Token::constant("x", " ");
        let y = Token::constant("y", " ");
        tree.insert_template(&[a.clone(), x.clone(), c.clone()]).unwrap();
        tree.insert_template(&[a.clone(), y.clone(), c.clone()]).unwrap();
        let root = tree.roots()[0];
        let kids = tree.node(root).unwrap().children.clone();
        assert_eq!(kids.len(), 2);
        let merged = tree
            .merge_siblings(&kids, Token::variable(r"\S+", " "))
            .unwrap();
        tree.verify_structure().unwrap();
        assert_eq!(tree.node(root).unwrap().children, vec![merged]);
        assert_eq!(tree.node(merged).unwrap().children.len(), 1);
        assert_eq!(tree.leaf_count(), 1);
    }

    #[test]
    fn merge_keeps_uniform_field_name_only() {
        let mut tree = ParseTree::new();
        let a = Token::constant("a", " ");
        tree.insert_template(&[a.clone(), Token::constant("x", "")]).unwrap();
        tree.insert_template(&[a.clone(), Token::constant("y", "")]).unwrap();
        let root = tree.roots()[0];
        let kids = tree.node(root).unwrap().children.clone();
        tree.set_field_name(kids[0], Some("auth".into())).unwrap();
        tree.set_field_name(kids[1], Some("auth".into())).unwrap();
        let merged = tree.merge_siblings(&kids, Token::variable(r"\S+", "")).unwrap();
        assert_eq!(tree.node(merged).unwrap().field_name.as_deref(), Some("auth"));
    }

    #[test]
    fn schema_register_semantics() {
        let mut schema = Schema::new();
        let (name, fresh) = schema.register("Source_IP", "origin address").unwrap();
        assert_eq!(name, "source_ip");
        assert!(fresh);
        let (_, again) = schema.register("source_ip", "origin address").unwrap();
        assert!(!again);
        assert!(matches!(
            schema.register("source_ip", "something else"),
            Err(Error::NameCollision { .. })
        ));
        assert_eq!(schema.len(), 1);
    }

    #[test]
    fn field_name_normalization() {
        assert_eq!(normalize_field_name("Remote IP"), "remote_ip");
        assert_eq!(normalize_field_name("__weird--Name__"), "weird_name");
        assert_eq!(normalize_field_name("auth.method"), "auth_method");
        assert_eq!(normalize_field_name("***"), "");
    }

    #[test]
    fn bundle_document_round_trip_is_structural_identity() {
        let mut tree = ParseTree::new();
        tree.insert_template(&accepted_conn_tokens()).unwrap();
        tree.insert_template(&failed_auth_tokens()).unwrap();
        tree.insert_template(&[Token::constant("ping", "")]).unwrap();
        let mut bundle = Bundle::new(tree);
        bundle.schema.register("user_name", "the user").unwrap();
        bundle.taxonomy_attrs.insert("actor.user.name".into());
        bundle
            .mappings
            .insert("user_name".into(), vec!["actor.user.name".into()]);
        let doc = bundle.to_document();
        let back = Bundle::from_document(&doc).unwrap();
        assert_eq!(back, bundle);
        // Serialization is deterministic.
        assert_eq!(back.to_document(), doc);
    }

    #[test]
    fn document_with_unknown_mapped_attribute_is_rejected() {
        let mut tree = ParseTree::new();
        tree.insert_template(&[Token::constant("x", "")]).unwrap();
        let mut bundle = Bundle::new(tree);
        bundle.schema.register("f", "field").unwrap();
        bundle.mappings.insert("f".into(), vec!["ghost.attr".into()]);
        let doc = bundle.to_document();
        match Bundle::from_document(&doc) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("ghost.attr")),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn document_with_two_parents_is_rejected() {
        let mut tree = ParseTree::new();
        let out = tree.insert_template(&[
            Token::constant("a", " "),
            Token::constant("b", ""),
        ]).unwrap();
        let bundle = Bundle::new(tree);
        let mut doc: serde_json::Value = serde_json::from_str(&bundle.to_document()).unwrap();
        // Point the leaf's id into a second parent's children list.
        let leaf = out.leaf;
        let nodes = doc["tree"]["nodes"].as_array_mut().unwrap();
        nodes.push(serde_json::json!({
            "id": 9, "kind": "constant", "literal": "c", "sep": "",
            "children": [leaf]
        }));
        doc["tree"]["roots"].as_array_mut().unwrap().push(9.into());
        doc["tree"]["leaves"].as_array_mut().unwrap().push(9.into());
        doc["tree"]["next_id"] = 10.into();
        let text = serde_json::to_string(&doc).unwrap();
        match Bundle::from_document(&text) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("two parents"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_template_documents_are_rejected() {
        // Hand-craft two identical single-token branches under the root.
        let doc = serde_json::json!({
            "format": "parser-bundle", "version": 1, "mapping_cap": 1,
            "tree": {
                "roots": [0, 1], "leaves": [0, 1], "next_id": 2,
                "nodes": [
                    {"id": 0, "kind": "constant", "literal": "x", "sep": ""},
                    {"id": 1, "kind": "constant", "literal": "x", "sep": ""},
                ],
            },
            "schema": [],
        });
        match Bundle::from_document(&doc.to_string()) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("duplicates"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }
}
