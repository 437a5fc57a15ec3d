//! Rolling-batch consistency repair. The model reviews recently generated
//! templates, fields, or mappings next to a read-only window of already
//! validated ones and emits a small edit script in a closed command
//! language. The interpreter applies each command to a scratch bundle and
//! re-checks every guard after every command: the graph stays a tree, the
//! matched line set over the retained corpus is unchanged, field names stay
//! unique, mappings cite real attributes within the per-field cap, and
//! nothing outside the batch's mutable set moves. Any violation aborts the
//! whole script; the live bundle only changes when a script survives.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Guard, Result};
use crate::gateway::{
    extract_json, feedback_block, majority_vote, repair_loop, Gateway, SamplingSpec,
};
use crate::matcher::Matcher;
use crate::model::{Bundle, NodeId, ParseTree, Token};

/// How a script names a node: a raw id, a `"@label"` minted earlier in the
/// same script, or the unique node carrying a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeRef {
    Id(NodeId),
    Label(String),
    Field { field: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditCommand {
    AddNode {
        #[serde(default)]
        parent: Option<NodeRef>,
        #[serde(default)]
        position: Option<usize>,
        kind: String,
        #[serde(default)]
        literal: Option<String>,
        #[serde(default)]
        pattern: Option<String>,
        #[serde(default)]
        sep: String,
        #[serde(default)]
        leaf: bool,
        #[serde(default)]
        label: Option<String>,
    },
    /// Removes the node and its whole subtree.
    DeleteNode { node: NodeRef },
    MoveNode {
        node: NodeRef,
        #[serde(default)]
        new_parent: Option<NodeRef>,
        #[serde(default)]
        position: Option<usize>,
    },
    /// Replaces sibling nodes with one variable node, folding their
    /// subtrees together.
    MergeNodes {
        nodes: Vec<NodeRef>,
        pattern: String,
        #[serde(default)]
        sep: String,
        #[serde(default)]
        label: Option<String>,
    },
    CreateField { name: String, description: String },
    AssignField {
        node: NodeRef,
        field: Option<String>,
    },
    SetDescription {
        #[serde(default)]
        field: Option<String>,
        #[serde(default)]
        node: Option<NodeRef>,
        text: String,
    },
    AssignMapping {
        field: String,
        attributes: Vec<String>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct EditScript {
    pub rationale: String,
    pub commands: Vec<EditCommand>,
}

pub fn parse_script(response: &str) -> Result<EditScript> {
    let value = extract_json(response)
        .ok_or_else(|| Error::Parse("edit script contains no JSON".into()))?;
    let rationale = value
        .get("rationale")
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .trim()
        .to_string();
    let commands = serde_json::from_value(
        value
            .get("commands")
            .cloned()
            .ok_or_else(|| Error::Parse("edit script lacks \"commands\"".into()))?,
    )
    .map_err(|e| Error::Parse(format!("malformed commands: {e}")))?;
    Ok(EditScript { rationale, commands })
}

/// What the current batch is allowed to touch. `None` means unrestricted
/// (manual CLI use); batch validation always pins both sets.
#[derive(Debug, Clone, Default)]
pub struct ValidationScope {
    pub mutable_leaves: Option<BTreeSet<NodeId>>,
    pub mutable_fields: Option<BTreeSet<String>>,
}

impl ValidationScope {
    fn node_mutable(&self, tree: &ParseTree, id: NodeId) -> bool {
        match &self.mutable_leaves {
            None => true,
            Some(set) => {
                let leaves = tree.leaves_under(id);
                // A node no template runs through yet (mid-script scaffold)
                // belongs to the script that made it.
                leaves.is_empty() || leaves.iter().all(|l| set.contains(l))
            }
        }
    }

    fn field_mutable(&self, name: &str) -> bool {
        self.mutable_fields
            .as_ref()
            .is_none_or(|set| set.contains(name))
    }
}

fn frozen(guard_msg: String) -> Error {
    Error::GuardViolation {
        command: 0,
        guard: Guard::Frozen,
        message: guard_msg,
    }
}

fn resolve(
    tree: &ParseTree,
    labels: &BTreeMap<String, NodeId>,
    r: &NodeRef,
) -> Result<NodeId> {
    match r {
        NodeRef::Id(id) => {
            tree.node(*id)?;
            Ok(*id)
        }
        NodeRef::Label(text) => {
            let name = text
                .strip_prefix('@')
                .ok_or_else(|| Error::UnknownId(format!("node ref {text:?} (labels start with @)")))?;
            labels
                .get(name)
                .copied()
                .ok_or_else(|| Error::UnknownId(format!("label @{name} was never defined")))
        }
        NodeRef::Field { field } => {
            let ids: Vec<NodeId> = tree
                .node_ids()
                .filter(|id| {
                    tree.node(*id)
                        .map(|n| n.field_name.as_deref() == Some(field))
                        .unwrap_or(false)
                })
                .collect();
            match ids.as_slice() {
                [one] => Ok(*one),
                [] => Err(Error::UnknownId(format!("no node carries field {field:?}"))),
                many => Err(Error::UnknownId(format!(
                    "field {field:?} is carried by {} nodes; use a node id",
                    many.len()
                ))),
            }
        }
    }
}

fn mint_label(
    labels: &mut BTreeMap<String, NodeId>,
    label: &Option<String>,
    id: NodeId,
) -> Result<()> {
    if let Some(l) = label {
        let key = l.trim_start_matches('@').to_string();
        if key.is_empty() {
            return Err(Error::Parse("empty label".into()));
        }
        if labels.insert(key.clone(), id).is_some() {
            return Err(Error::Parse(format!("label @{key} defined twice")));
        }
    }
    Ok(())
}

fn apply_command(
    bundle: &mut Bundle,
    cmd: &EditCommand,
    labels: &mut BTreeMap<String, NodeId>,
    scope: &ValidationScope,
) -> Result<()> {
    match cmd {
        EditCommand::AddNode {
            parent,
            position,
            kind,
            literal,
            pattern,
            sep,
            leaf,
            label,
        } => {
            let token = match kind.as_str() {
                "constant" => Token::constant(
                    literal
                        .as_deref()
                        .ok_or_else(|| Error::Parse("add_node constant lacks literal".into()))?,
                    sep.as_str(),
                ),
                "variable" => Token::variable(
                    pattern
                        .as_deref()
                        .ok_or_else(|| Error::Parse("add_node variable lacks pattern".into()))?,
                    sep.as_str(),
                ),
                other => return Err(Error::Parse(format!("add_node kind {other:?}"))),
            };
            let parent_id = parent
                .as_ref()
                .map(|r| resolve(&bundle.tree, labels, r))
                .transpose()?;
            let id = bundle.tree.add_node(parent_id, *position, token, *leaf)?;
            mint_label(labels, label, id)
        }
        EditCommand::DeleteNode { node } => {
            let id = resolve(&bundle.tree, labels, node)?;
            if !scope.node_mutable(&bundle.tree, id) {
                return Err(frozen(format!("node {id} belongs to a read-only template")));
            }
            for victim in bundle.tree.descendants(id).into_iter().rev() {
                bundle.tree.remove_node(victim)?;
            }
            Ok(())
        }
        EditCommand::MoveNode {
            node,
            new_parent,
            position,
        } => {
            let id = resolve(&bundle.tree, labels, node)?;
            if !scope.node_mutable(&bundle.tree, id) {
                return Err(frozen(format!("node {id} belongs to a read-only template")));
            }
            let parent_id = new_parent
                .as_ref()
                .map(|r| resolve(&bundle.tree, labels, r))
                .transpose()?;
            bundle.tree.move_node(id, parent_id, *position)
        }
        EditCommand::MergeNodes {
            nodes,
            pattern,
            sep,
            label,
        } => {
            let ids: Vec<NodeId> = nodes
                .iter()
                .map(|r| resolve(&bundle.tree, labels, r))
                .collect::<Result<_>>()?;
            for id in &ids {
                if !scope.node_mutable(&bundle.tree, *id) {
                    return Err(frozen(format!(
                        "node {id} belongs to a read-only template"
                    )));
                }
            }
            let merged = bundle
                .tree
                .merge_siblings(&ids, Token::variable(pattern.as_str(), sep.as_str()))?;
            mint_label(labels, label, merged)
        }
        EditCommand::CreateField { name, description } => {
            match bundle.schema.register(name, description) {
                Ok(_) => Ok(()),
                Err(Error::NameCollision { name }) => Err(Error::GuardViolation {
                    command: 0,
                    guard: Guard::FieldUnique,
                    message: format!(
                        "field {name:?} already exists with a different description"
                    ),
                }),
                Err(e) => Err(e),
            }
        }
        EditCommand::AssignField { node, field } => {
            let id = resolve(&bundle.tree, labels, node)?;
            if !scope.node_mutable(&bundle.tree, id) {
                return Err(frozen(format!("node {id} belongs to a read-only template")));
            }
            if let Some(name) = field {
                if !bundle.schema.contains(name) {
                    return Err(Error::UnknownId(format!(
                        "field {name:?} does not exist; create_field first"
                    )));
                }
            }
            bundle.tree.set_field_name(id, field.clone())
        }
        EditCommand::SetDescription { field, node, text } => match (field, node) {
            (Some(name), None) => {
                if !scope.field_mutable(name) {
                    return Err(frozen(format!("field {name:?} is read-only")));
                }
                bundle.schema.set_description(name, text)
            }
            (None, Some(r)) => {
                let id = resolve(&bundle.tree, labels, r)?;
                if !scope.node_mutable(&bundle.tree, id) {
                    return Err(frozen(format!(
                        "node {id} belongs to a read-only template"
                    )));
                }
                bundle.tree.set_description(id, Some(text.clone()))
            }
            _ => Err(Error::Parse(
                "set_description takes exactly one of \"field\" or \"node\"".into(),
            )),
        },
        EditCommand::AssignMapping { field, attributes } => {
            if !bundle.schema.contains(field) {
                return Err(Error::UnknownId(format!("field {field:?} does not exist")));
            }
            if !scope.field_mutable(field) {
                return Err(frozen(format!("field {field:?} is read-only")));
            }
            if attributes.is_empty() {
                bundle.mappings.remove(field);
            } else {
                bundle.mappings.insert(field.clone(), attributes.clone());
            }
            Ok(())
        }
    }
}

/// Ordinal set of corpus lines the tree matches.
fn matched_set(tree: &ParseTree, corpus: &[Vec<u8>]) -> Result<BTreeSet<usize>> {
    let matcher = Matcher::new(tree)?;
    Ok(corpus
        .par_iter()
        .enumerate()
        .filter(|(_, line)| matcher.match_line(line).is_match())
        .map(|(i, _)| i + 1)
        .collect())
}

fn violation(command: usize, guard: Guard, message: String) -> Error {
    Error::GuardViolation {
        command,
        guard,
        message,
    }
}

fn check_guards(
    bundle: &Bundle,
    corpus: &[Vec<u8>],
    baseline: &BTreeSet<usize>,
    command: usize,
) -> Result<()> {
    if let Err(e) = bundle.tree.verify_structure() {
        return Err(violation(command, Guard::Tree, e.to_string()));
    }
    // Field names must exist in the schema and appear at most once per
    // template path.
    for template in bundle.tree.templates() {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for id in &template.node_ids {
            let node = bundle.tree.node(*id).expect("path id exists");
            if let Some(name) = node.field_name.as_deref() {
                if !bundle.schema.contains(name) {
                    return Err(violation(
                        command,
                        Guard::FieldUnique,
                        format!("node {id} references unregistered field {name:?}"),
                    ));
                }
                if !seen.insert(name) {
                    return Err(violation(
                        command,
                        Guard::FieldUnique,
                        format!(
                            "field {name:?} appears twice on the template at leaf {}",
                            template.leaf
                        ),
                    ));
                }
            }
        }
    }
    for (field, attrs) in &bundle.mappings {
        if !bundle.schema.contains(field) {
            return Err(violation(
                command,
                Guard::FieldUnique,
                format!("mapping references unknown field {field:?}"),
            ));
        }
        if attrs.len() > bundle.mapping_cap {
            return Err(violation(
                command,
                Guard::MappingCap,
                format!(
                    "field {field:?} maps to {} attributes (cap {})",
                    attrs.len(),
                    bundle.mapping_cap
                ),
            ));
        }
        for a in attrs {
            if !bundle.taxonomy_attrs.contains(a) {
                return Err(violation(
                    command,
                    Guard::AttributeExists,
                    format!("attribute {a:?} is not in the taxonomy"),
                ));
            }
        }
    }
    let now = matched_set(&bundle.tree, corpus)?;
    if &now != baseline {
        let lost: Vec<usize> = baseline.difference(&now).take(5).copied().collect();
        let gained: Vec<usize> = now.difference(baseline).take(5).copied().collect();
        return Err(violation(
            command,
            Guard::MatchSet,
            format!("matched line set changed (lost {lost:?}, gained {gained:?})"),
        ));
    }
    Ok(())
}

fn at_command(index: usize, e: Error) -> Error {
    match e {
        Error::GuardViolation {
            guard, message, ..
        } => Error::GuardViolation {
            command: index,
            guard,
            message,
        },
        Error::UnknownId(m) => Error::UnknownId(format!("command {index}: {m}")),
        Error::Parse(m) => Error::Parse(format!("command {index}: {m}")),
        // Tree surgery rejections are script mistakes, hence repairable.
        Error::Input(m) => Error::Parse(format!("command {index}: {m}")),
        Error::Compile { index: ti, message } => Error::Parse(format!(
            "command {index}: token {ti}: {message}"
        )),
        other => other,
    }
}

/// Runs a script against a scratch copy under full guard checks. The input
/// bundle is untouched; the transformed bundle is returned only if every
/// command and the final state pass every guard.
pub fn execute_script(
    bundle: &Bundle,
    script: &EditScript,
    corpus: &[Vec<u8>],
    scope: &ValidationScope,
) -> Result<Bundle> {
    let baseline = matched_set(&bundle.tree, corpus)?;
    let mut work = bundle.clone();
    let mut labels: BTreeMap<String, NodeId> = BTreeMap::new();
    for (i, cmd) in script.commands.iter().enumerate() {
        apply_command(&mut work, cmd, &mut labels, scope).map_err(|e| at_command(i, e))?;
        check_guards(&work, corpus, &baseline, i)?;
    }
    check_guards(&work, corpus, &baseline, script.commands.len().saturating_sub(1))?;
    Ok(work)
}

/// One unit of rolling validation: read-only context plus the items under
/// review.
#[derive(Debug, Clone)]
pub struct ValidationBatch<T> {
    pub frozen: Vec<T>,
    pub mutable: Vec<T>,
}

/// Splits ordered items into consecutive windows; each window sees the tail
/// of the previous one (at most `frozen_cap` items) as read-only context.
pub fn plan_batches<T: Clone>(
    items: &[T],
    window: usize,
    frozen_cap: usize,
) -> Result<Vec<ValidationBatch<T>>> {
    if window == 0 {
        return Err(Error::Config("validation window must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut frozen: Vec<T> = Vec::new();
    for chunk in items.chunks(window) {
        out.push(ValidationBatch {
            frozen: frozen.clone(),
            mutable: chunk.to_vec(),
        });
        let start = chunk.len().saturating_sub(frozen_cap);
        frozen = chunk[start..].to_vec();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Syntax,
    Schema,
    Mapping,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Syntax => "syntax",
            Stage::Schema => "schema",
            Stage::Mapping => "mapping",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "syntax" => Ok(Stage::Syntax),
            "schema" => Ok(Stage::Schema),
            "mapping" => Ok(Stage::Mapping),
            other => Err(Error::Config(format!(
                "unknown stage {other:?} (syntax, schema, mapping)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchItem {
    Template(NodeId),
    Field(String),
}

#[derive(Debug, Clone)]
pub struct ValidationConfig {
    pub window: usize,
    pub frozen_cap: usize,
    /// Full passes over the item list.
    pub passes: usize,
    pub sampling: SamplingSpec,
    pub max_repairs: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            window: 8,
            frozen_cap: 8,
            passes: 1,
            sampling: SamplingSpec::single(),
            max_repairs: 3,
        }
    }
}

/// Audit record for one batch, suitable for a JSONL log.
#[derive(Debug, Clone, Serialize)]
pub struct AuditRow {
    pub stage: String,
    pub batch: usize,
    /// "applied", "empty", or "skipped".
    pub outcome: String,
    pub rationale: String,
    pub commands: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

fn render_template(bundle: &Bundle, leaf: NodeId) -> String {
    let template = bundle.tree.template(leaf).expect("listed leaf exists");
    let mut out = format!("Template (leaf node {leaf}): {}\n", template.wildcard_form());
    if let Some(d) = &template.description {
        out.push_str(&format!("  description: {d}\n"));
    }
    for (id, token) in template.node_ids.iter().zip(&template.tokens) {
        let node = bundle.tree.node(*id).expect("path id exists");
        let mut line = match token {
            Token::Constant { literal, sep } => {
                format!("  node {id}: constant literal={literal:?} sep={sep:?}")
            }
            Token::Variable { pattern, sep } => {
                format!("  node {id}: variable pattern={pattern:?} sep={sep:?}")
            }
        };
        if let Some(f) = &node.field_name {
            line.push_str(&format!(" field={f}"));
        }
        if let Some(e) = &node.example {
            line.push_str(&format!(" example={e:?}"));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn render_field(bundle: &Bundle, name: &str) -> String {
    let mut out = String::new();
    if let Some(f) = bundle.schema.get(name) {
        out.push_str(&format!("Field {}: {}\n", f.name, f.description));
        if !f.example_values.is_empty() {
            out.push_str(&format!("  examples: {:?}\n", f.example_values));
        }
    }
    match bundle.mappings.get(name) {
        Some(attrs) => out.push_str(&format!("  mapped to: {attrs:?}\n")),
        None => out.push_str("  mapped to: (nothing)\n"),
    }
    out
}

fn render_items(bundle: &Bundle, items: &[BatchItem]) -> String {
    let mut out = String::new();
    for item in items {
        match item {
            BatchItem::Template(leaf) => out.push_str(&render_template(bundle, *leaf)),
            BatchItem::Field(name) => out.push_str(&render_field(bundle, name)),
        }
    }
    out
}

fn scope_for(batch: &ValidationBatch<BatchItem>, stage: Stage) -> ValidationScope {
    let leaves: BTreeSet<NodeId> = batch
        .mutable
        .iter()
        .filter_map(|i| match i {
            BatchItem::Template(l) => Some(*l),
            BatchItem::Field(_) => None,
        })
        .collect();
    let fields: BTreeSet<String> = batch
        .mutable
        .iter()
        .filter_map(|i| match i {
            BatchItem::Field(f) => Some(f.clone()),
            BatchItem::Template(_) => None,
        })
        .collect();
    match stage {
        // Tree edits stay inside the batch; field-level edits are free
        // because renames must be able to land on a shared canonical field.
        Stage::Syntax | Stage::Schema => ValidationScope {
            mutable_leaves: Some(leaves),
            mutable_fields: None,
        },
        // Mapping validation may not touch the tree at all.
        Stage::Mapping => ValidationScope {
            mutable_leaves: Some(BTreeSet::new()),
            mutable_fields: Some(fields),
        },
    }
}

const COMMAND_DOC: &str = r#"Commands (JSON objects; "op" selects):
- {"op":"add_node","parent":<node-ref or null>,"position":<int, optional>,"kind":"constant"|"variable","literal":"...","pattern":"...","sep":"...","leaf":<bool>,"label":"name"}
- {"op":"delete_node","node":<node-ref>}  (removes the whole subtree)
- {"op":"move_node","node":<node-ref>,"new_parent":<node-ref or null>,"position":<int, optional>}
- {"op":"merge_nodes","nodes":[<node-ref>,...],"pattern":"...","sep":"...","label":"name"}  (sibling nodes collapse into one variable)
- {"op":"create_field","name":"...","description":"..."}
- {"op":"assign_field","node":<node-ref>,"field":"name" or null}
- {"op":"set_description","field":"name","text":"..."}  or  {"op":"set_description","node":<node-ref>,"text":"..."}
- {"op":"assign_mapping","field":"name","attributes":["path.in.taxonomy",...]}  (empty list unmaps)
Node refs: an integer node id, "@label" for a node created earlier in this script, or {"field":"field_name"} for the unique node carrying that field."#;

/// Asks the model to reconcile one batch. Guard violations feed the repair
/// loop; exhaustion leaves the bundle untouched and is reported, not
/// raised.
pub fn validate_batch(
    gateway: &Gateway,
    bundle: &mut Bundle,
    batch: &ValidationBatch<BatchItem>,
    batch_index: usize,
    stage: Stage,
    corpus: &[Vec<u8>],
    cfg: &ValidationConfig,
) -> Result<AuditRow> {
    let scope = scope_for(batch, stage);
    let frozen_block = if batch.frozen.is_empty() {
        String::from("(none)\n")
    } else {
        render_items(bundle, &batch.frozen)
    };
    let base = format!(
        "## TASK: validate-batch\nStage: {}\n\
         Review the NEW items next to the READ-ONLY context. If they are mutually \
         consistent (same concepts share one field name, no spurious constant \
         branches, mappings agree), answer {{\"rationale\": \"...\", \"commands\": []}}. \
         Otherwise emit an edit script that repairs the NEW items.\n{COMMAND_DOC}\n\
         Rules: only NEW items may change; the tree must stay a tree; the set of \
         matched corpus lines must not change; field names are unique within a \
         template; mappings cite existing attributes, at most {} per field.\n\n\
         ## READ-ONLY\n{frozen_block}\n## NEW\n{}",
        stage.name(),
        bundle.mapping_cap,
        render_items(bundle, &batch.mutable),
    );
    let result = repair_loop(
        cfg.max_repairs,
        |diags| {
            let prompt = format!("{base}{}", feedback_block(diags));
            let samples = gateway.complete(&prompt, &cfg.sampling)?;
            let mut parsed: Vec<EditScript> = Vec::new();
            let mut last_err: Option<Error> = None;
            for s in &samples {
                match parse_script(s) {
                    Ok(p) => parsed.push(p),
                    Err(e) => last_err = Some(e),
                }
            }
            if parsed.is_empty() {
                return Err(last_err.expect("all samples failed"));
            }
            let winner = majority_vote(&parsed, |s| {
                serde_json::to_string(&s.commands).expect("commands serialize")
            })?;
            let next = execute_script(bundle, winner, corpus, &scope)?;
            Ok((winner.clone(), next))
        },
        |_| Ok(()),
    );
    match result {
        Ok((script, next)) => {
            let outcome = if script.commands.is_empty() {
                "empty"
            } else {
                "applied"
            };
            *bundle = next;
            Ok(AuditRow {
                stage: stage.name().to_string(),
                batch: batch_index,
                outcome: outcome.to_string(),
                rationale: script.rationale.clone(),
                commands: serde_json::to_value(&script.commands).expect("commands serialize"),
                diagnostics: None,
            })
        }
        Err(Error::RepairExhausted { iters, last }) => Ok(AuditRow {
            stage: stage.name().to_string(),
            batch: batch_index,
            outcome: "skipped".to_string(),
            rationale: String::new(),
            commands: serde_json::Value::Array(Vec::new()),
            diagnostics: Some(format!("gave up after {iters} attempts: {last}")),
        }),
        Err(e) => Err(e),
    }
}

/// Runs one validation stage over the whole bundle in rolling batches.
/// After a schema pass, fields that no node references anymore (merge
/// leftovers) are pruned together with their mappings.
pub fn validate_stage(
    gateway: &Gateway,
    bundle: &mut Bundle,
    stage: Stage,
    corpus: &[Vec<u8>],
    cfg: &ValidationConfig,
) -> Result<Vec<AuditRow>> {
    let mut audits = Vec::new();
    for _ in 0..cfg.passes.max(1) {
        let items: Vec<BatchItem> = match stage {
            Stage::Syntax | Stage::Schema => bundle
                .tree
                .templates()
                .iter()
                .map(|t| BatchItem::Template(t.leaf))
                .collect(),
            Stage::Mapping => bundle
                .schema
                .fields()
                .iter()
                .map(|f| BatchItem::Field(f.name.clone()))
                .collect(),
        };
        if items.is_empty() {
            break;
        }
        let batches = plan_batches(&items, cfg.window, cfg.frozen_cap)?;
        for (i, batch) in batches.iter().enumerate() {
            // Leaves can disappear mid-stage (merges); stale items are
            // dropped rather than re-planned so batch numbering stays
            // stable within the pass.
            let live = ValidationBatch {
                frozen: retain_live(bundle, &batch.frozen),
                mutable: retain_live(bundle, &batch.mutable),
            };
            if live.mutable.is_empty() {
                continue;
            }
            audits.push(validate_batch(
                gateway, bundle, &live, i, stage, corpus, cfg,
            )?);
        }
    }
    if stage == Stage::Schema {
        bundle.prune_unused_fields();
    }
    bundle.verify()?;
    Ok(audits)
}

fn retain_live(bundle: &Bundle, items: &[BatchItem]) -> Vec<BatchItem> {
    items
        .iter()
        .filter(|i| match i {
            BatchItem::Template(leaf) => bundle.tree.template(*leaf).is_ok(),
            BatchItem::Field(name) => bundle.schema.contains(name),
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockProvider;
    use rand::{Rng, SeedableRng};

    fn gateway(dir: &std::path::Path, entries: Vec<serde_json::Value>) -> Gateway {
        let mock = MockProvider::from_json(
            &serde_json::json!({ "entries": entries }).to_string(),
        )
        .unwrap();
        Gateway::new(Box::new(mock), dir).unwrap()
    }

    /// Three templates that differ only in a constant auth token, the
    /// paper-style merge target.
    fn auth_bundle() -> (Bundle, Vec<Vec<u8>>) {
        let mut tree = ParseTree::new();
        for method in ["pw", "pka", "mfa"] {
            tree.insert_template(&[
                Token::constant("auth", " "),
                Token::constant(method, " "),
                Token::constant("user", " "),
                Token::variable("\\S+", ""),
            ])
            .unwrap();
        }
        let mut bundle = Bundle::new(tree);
        bundle.schema.register("user_name", "Who logged in.").unwrap();
        for leaf in bundle.tree.templates().iter().map(|t| t.leaf).collect::<Vec<_>>() {
            let path = bundle.tree.path(leaf).unwrap();
            bundle
                .tree
                .set_field_name(*path.last().unwrap(), Some("user_name".into()))
                .unwrap();
        }
        let corpus = vec![
            b"auth pw bob".to_vec(),
            b"auth pka alice".to_vec(),
            b"auth mfa eve".to_vec(),
            b"other line".to_vec(),
        ];
        (bundle, corpus)
    }

    fn find_constant(tree: &ParseTree, literal: &str) -> NodeId {
        tree.node_ids()
            .find(|id| match &tree.node(*id).unwrap().token {
                Token::Constant { literal: l, .. } => l == literal,
                _ => false,
            })
            .unwrap_or_else(|| panic!("no constant {literal:?}"))
    }

    #[test]
    fn plan_batches_windows_and_context() {
        let items: Vec<u32> = (0..10).collect();
        let plan = plan_batches(&items, 4, 8).unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan[0].mutable, vec![0, 1, 2, 3]);
        assert!(plan[0].frozen.is_empty());
        assert_eq!(plan[1].frozen, vec![0, 1, 2, 3]);
        assert_eq!(plan[2].mutable, vec![8, 9]);
        assert_eq!(plan[2].frozen, vec![4, 5, 6, 7]);
        // Context is bounded.
        let tight = plan_batches(&items, 4, 2).unwrap();
        assert_eq!(tight[1].frozen, vec![2, 3]);
        // Window at least as large as the items: one batch.
        assert_eq!(plan_batches(&items, 100, 8).unwrap().len(), 1);
        let empty: Vec<u32> = Vec::new();
        assert!(plan_batches(&empty, 4, 8).unwrap().is_empty());
        assert!(plan_batches(&items, 0, 8).is_err());
    }

    #[test]
    fn merge_collapses_constant_branches_same_match_set() {
        let (bundle, corpus) = auth_bundle();
        assert_eq!(bundle.tree.templates().len(), 3);
        let ids = vec![
            NodeRef::Id(find_constant(&bundle.tree, "pw")),
            NodeRef::Id(find_constant(&bundle.tree, "pka")),
            NodeRef::Id(find_constant(&bundle.tree, "mfa")),
        ];
        let script = EditScript {
            rationale: "pw/pka/mfa vary per line; one variable".into(),
            commands: vec![
                EditCommand::MergeNodes {
                    nodes: ids,
                    pattern: "\\S+".into(),
                    sep: " ".into(),
                    label: Some("auth".into()),
                },
                EditCommand::CreateField {
                    name: "auth_method".into(),
                    description: "Authentication method used.".into(),
                },
                EditCommand::AssignField {
                    node: NodeRef::Label("@auth".into()),
                    field: Some("auth_method".into()),
                },
            ],
        };
        let next =
            execute_script(&bundle, &script, &corpus, &ValidationScope::default()).unwrap();
        assert_eq!(next.tree.templates().len(), 1);
        assert!(next.schema.contains("auth_method"));
        assert_eq!(
            matched_set(&next.tree, &corpus).unwrap(),
            matched_set(&bundle.tree, &corpus).unwrap()
        );
        // The original is untouched.
        assert_eq!(bundle.tree.templates().len(), 3);
    }

    #[test]
    fn orphaning_delete_trips_tree_guard_with_index() {
        let mut tree = ParseTree::new();
        tree.insert_template(&[
            Token::constant("a", " "),
            Token::constant("b", ""),
        ])
        .unwrap();
        let bundle = Bundle::new(tree);
        let leaf = bundle.tree.templates()[0].leaf;
        let script = EditScript {
            rationale: String::new(),
            commands: vec![
                EditCommand::SetDescription {
                    field: None,
                    node: Some(NodeRef::Id(leaf)),
                    text: "fine".into(),
                },
                EditCommand::DeleteNode {
                    node: NodeRef::Id(leaf),
                },
            ],
        };
        let err = execute_script(&bundle, &script, &[], &ValidationScope::default())
            .unwrap_err();
        match err {
            Error::GuardViolation { command, guard, .. } => {
                assert_eq!(command, 1);
                assert_eq!(guard, Guard::Tree);
            }
            other => panic!("expected tree violation, got {other:?}"),
        }
    }

    #[test]
    fn match_set_guard_rejects_coverage_changes() {
        let (bundle, corpus) = auth_bundle();
        // A new template that swallows the previously unmatched line.
        let script = EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::AddNode {
                parent: None,
                position: None,
                kind: "variable".into(),
                literal: None,
                pattern: Some(".+".into()),
                sep: String::new(),
                leaf: true,
                label: None,
            }],
        };
        let err = execute_script(&bundle, &script, &corpus, &ValidationScope::default())
            .unwrap_err();
        assert!(matches!(
            err,
            Error::GuardViolation { guard: Guard::MatchSet, command: 0, .. }
        ));
        // Deleting a live template loses lines.
        let leaf = bundle.tree.templates()[0].leaf;
        let script = EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::DeleteNode { node: NodeRef::Id(leaf) }],
        };
        let err = execute_script(&bundle, &script, &corpus, &ValidationScope::default())
            .unwrap_err();
        assert!(matches!(
            err,
            Error::GuardViolation { guard: Guard::MatchSet, .. } | Error::GuardViolation { guard: Guard::Tree, .. }
        ));
    }

    #[test]
    fn field_guards_catch_collisions_dangling_and_duplicates() {
        let (bundle, _corpus) = auth_bundle();
        // Existing name, different description.
        let script = EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::CreateField {
                name: "user_name".into(),
                description: "Something else entirely.".into(),
            }],
        };
        let err = execute_script(&bundle, &script, &[], &ValidationScope::default())
            .unwrap_err();
        assert!(matches!(
            err,
            Error::GuardViolation { guard: Guard::FieldUnique, command: 0, .. }
        ));
        // Assigning a field that was never created dangles.
        let node = find_constant(&bundle.tree, "auth");
        let script = EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::AssignField {
                node: NodeRef::Id(node),
                field: Some("ghost".into()),
            }],
        };
        match execute_script(&bundle, &script, &[], &ValidationScope::default()) {
            Err(Error::UnknownId(m)) => assert!(m.contains("command 0"), "{m}"),
            other => panic!("expected UnknownId, got {other:?}"),
        }
        // Two nodes on one path sharing a name.
        let script = EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::AssignField {
                node: NodeRef::Id(node),
                field: Some("user_name".into()),
            }],
        };
        let err = execute_script(&bundle, &script, &[], &ValidationScope::default())
            .unwrap_err();
        assert!(matches!(
            err,
            Error::GuardViolation { guard: Guard::FieldUnique, .. }
        ));
    }

    #[test]
    fn mapping_guards_enforce_existence_and_cap() {
        let (mut bundle, _) = auth_bundle();
        bundle.taxonomy_attrs =
            ["actor.user.name", "src_endpoint.ip"].iter().map(|s| s.to_string()).collect();
        bundle.mapping_cap = 1;
        let assign = |attrs: Vec<&str>| EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::AssignMapping {
                field: "user_name".into(),
                attributes: attrs.into_iter().map(String::from).collect(),
            }],
        };
        let ok = execute_script(&bundle, &assign(vec!["actor.user.name"]), &[], &ValidationScope::default()).unwrap();
        assert_eq!(ok.mappings["user_name"], vec!["actor.user.name"]);
        let err = execute_script(&bundle, &assign(vec!["made.up"]), &[], &ValidationScope::default()).unwrap_err();
        assert!(matches!(err, Error::GuardViolation { guard: Guard::AttributeExists, .. }));
        let err = execute_script(
            &bundle,
            &assign(vec!["actor.user.name", "src_endpoint.ip"]),
            &[],
            &ValidationScope::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::GuardViolation { guard: Guard::MappingCap, .. }));
        let err = execute_script(
            &bundle,
            &EditScript {
                rationale: String::new(),
                commands: vec![EditCommand::AssignMapping {
                    field: "ghost".into(),
                    attributes: vec![],
                }],
            },
            &[],
            &ValidationScope::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownId(_)));
    }

    #[test]
    fn frozen_scope_blocks_out_of_batch_edits() {
        let (bundle, corpus) = auth_bundle();
        let leaves: Vec<NodeId> = bundle.tree.templates().iter().map(|t| t.leaf).collect();
        // Only the last template is mutable.
        let scope = ValidationScope {
            mutable_leaves: Some([leaves[2]].into_iter().collect()),
            mutable_fields: None,
        };
        let frozen_node = find_constant(&bundle.tree, "pw");
        let script = EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::DeleteNode {
                node: NodeRef::Id(frozen_node),
            }],
        };
        let err = execute_script(&bundle, &script, &corpus, &scope).unwrap_err();
        assert!(matches!(
            err,
            Error::GuardViolation { guard: Guard::Frozen, command: 0, .. }
        ));
        // The shared "auth" root is frozen too: a frozen leaf sits below it.
        let script = EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::AssignField {
                node: NodeRef::Id(find_constant(&bundle.tree, "auth")),
                field: None,
            }],
        };
        assert!(matches!(
            execute_script(&bundle, &script, &corpus, &scope).unwrap_err(),
            Error::GuardViolation { guard: Guard::Frozen, .. }
        ));
    }

    #[test]
    fn field_node_ref_resolves_unique_carrier() {
        let mut tree = ParseTree::new();
        tree.insert_template(&[Token::constant("x", " "), Token::variable("\\d+", "")])
            .unwrap();
        let mut bundle = Bundle::new(tree);
        bundle.schema.register("count", "A number.").unwrap();
        let leaf = bundle.tree.templates()[0].leaf;
        bundle.tree.set_field_name(leaf, Some("count".into())).unwrap();
        let script = EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::SetDescription {
                field: None,
                node: Some(NodeRef::Field { field: "count".into() }),
                text: "How many.".into(),
            }],
        };
        let next = execute_script(&bundle, &script, &[], &ValidationScope::default()).unwrap();
        assert_eq!(
            next.tree.node(leaf).unwrap().description.as_deref(),
            Some("How many.")
        );
        // Unknown field in a node ref names the command.
        let script = EditScript {
            rationale: String::new(),
            commands: vec![EditCommand::DeleteNode {
                node: NodeRef::Field { field: "nope".into() },
            }],
        };
        match execute_script(&bundle, &script, &[], &ValidationScope::default()) {
            Err(Error::UnknownId(m)) => assert!(m.contains("command 0")),
            other => panic!("expected UnknownId, got {other:?}"),
        }
    }

    #[test]
    fn validate_batch_repairs_frozen_touch_then_applies() {
        let dir = tempfile::tempdir().unwrap();
        let (mut bundle, corpus) = auth_bundle();
        let leaves: Vec<NodeId> = bundle.tree.templates().iter().map(|t| t.leaf).collect();
        let pw = find_constant(&bundle.tree, "pw");
        let mfa_leaf_path = bundle.tree.path(leaves[2]).unwrap();
        let gw = gateway(
            dir.path(),
            vec![
                // First try: deletes a frozen template's node.
                serde_json::json!({
                    "match": ["TASK: validate-batch"],
                    "response_json": {
                        "rationale": "drop pw branch",
                        "commands": [{"op": "delete_node", "node": pw}]
                    }
                }),
                // After feedback: a legal edit inside the batch.
                serde_json::json!({
                    "match": ["TASK: validate-batch", "FEEDBACK", "frozen"],
                    "response_json": {
                        "rationale": "describe the mfa user node",
                        "commands": [{"op": "set_description", "node": mfa_leaf_path[3], "text": "Account name."}]
                    },
                    "sticky": true
                }),
            ],
        );
        let batch = ValidationBatch {
            frozen: vec![BatchItem::Template(leaves[0]), BatchItem::Template(leaves[1])],
            mutable: vec![BatchItem::Template(leaves[2])],
        };
        let cfg = ValidationConfig::default();
        let row =
            validate_batch(&gw, &mut bundle, &batch, 0, Stage::Syntax, &corpus, &cfg).unwrap();
        assert_eq!(row.outcome, "applied");
        assert_eq!(
            bundle.tree.node(mfa_leaf_path[3]).unwrap().description.as_deref(),
            Some("Account name.")
        );
        // The frozen templates survived.
        assert_eq!(bundle.tree.templates().len(), 3);
    }

    #[test]
    fn validate_batch_exhaustion_is_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let (mut bundle, corpus) = auth_bundle();
        let before = bundle.to_document();
        let gw = gateway(
            dir.path(),
            vec![serde_json::json!({
                "match": ["TASK: validate-batch"],
                "response": "I cannot produce JSON today.",
                "sticky": true
            })],
        );
        let leaves: Vec<NodeId> = bundle.tree.templates().iter().map(|t| t.leaf).collect();
        let batch = ValidationBatch {
            frozen: vec![],
            mutable: leaves.into_iter().map(BatchItem::Template).collect(),
        };
        let cfg = ValidationConfig::default();
        let row =
            validate_batch(&gw, &mut bundle, &batch, 0, Stage::Syntax, &corpus, &cfg).unwrap();
        assert_eq!(row.outcome, "skipped");
        assert!(row.diagnostics.unwrap().contains("gave up"));
        assert_eq!(bundle.to_document(), before);
    }

    #[test]
    fn schema_stage_merges_synonym_fields_and_prunes() {
        let dir = tempfile::tempdir().unwrap();
        // Two templates, one names its directory variable cwd, the other
        // current_working_directory.
        let mut tree = ParseTree::new();
        tree.insert_template(&[
            Token::constant("chdir", " "),
            Token::variable("\\S+", ""),
        ])
        .unwrap();
        tree.insert_template(&[
            Token::constant("session", " "),
            Token::variable("\\S+", ""),
        ])
        .unwrap();
        let mut bundle = Bundle::new(tree);
        bundle.schema.register("cwd", "Working directory.").unwrap();
        bundle
            .schema
            .register("current_working_directory", "Working directory.")
            .unwrap();
        let leaves: Vec<NodeId> = bundle.tree.templates().iter().map(|t| t.leaf).collect();
        bundle.tree.set_field_name(leaves[0], Some("cwd".into())).unwrap();
        bundle
            .tree
            .set_field_name(leaves[1], Some("current_working_directory".into()))
            .unwrap();
        let corpus = vec![b"chdir /tmp".to_vec(), b"session /home".to_vec()];
        let gw = gateway(
            dir.path(),
            vec![serde_json::json!({
                "match": ["TASK: validate-batch", "cwd"],
                "response_json": {
                    "rationale": "cwd abbreviates current_working_directory",
                    "commands": [
                        {"op": "assign_field", "node": leaves[0], "field": "current_working_directory"}
                    ]
                },
                "sticky": true
            })],
        );
        let cfg = ValidationConfig::default();
        let audits =
            validate_stage(&gw, &mut bundle, Stage::Schema, &corpus, &cfg).unwrap();
        assert_eq!(audits.len(), 1);
        assert_eq!(audits[0].outcome, "applied");
        // One canonical field remains; the husk was pruned.
        assert!(!bundle.schema.contains("cwd"));
        assert!(bundle.schema.contains("current_working_directory"));
        assert_eq!(bundle.field_occurrences()["current_working_directory"], 2);
    }

    #[test]
    fn random_scripts_never_leave_inconsistent_state() {
        use rand_chacha::ChaCha8Rng;
        let (mut bundle, corpus) = auth_bundle();
        bundle.taxonomy_attrs = ["actor.user.name", "src_endpoint.ip", "time_dt"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let baseline = matched_set(&bundle.tree, &corpus).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x10adc0de);
        let node_pool: Vec<NodeId> = bundle.tree.node_ids().collect();
        for _ in 0..300 {
            let n_cmds = rng.random_range(1..=4);
            let commands: Vec<EditCommand> = (0..n_cmds)
                .map(|_| random_command(&mut rng, &node_pool))
                .collect();
            let script = EditScript { rationale: String::new(), commands };
            match execute_script(&bundle, &script, &corpus, &ValidationScope::default()) {
                Ok(next) => {
                    next.tree.verify_structure().unwrap();
                    next.verify().unwrap();
                    assert_eq!(matched_set(&next.tree, &corpus).unwrap(), baseline);
                }
                Err(
                    Error::GuardViolation { .. }
                    | Error::UnknownId(_)
                    | Error::Parse(_)
                    | Error::NameCollision { .. },
                ) => {}
                Err(other) => panic!("unexpected error class: {other:?}"),
            }
        }
    }

    fn random_command(rng: &mut impl Rng, pool: &[NodeId]) -> EditCommand {
        let pick = |rng: &mut dyn rand::RngCore| NodeRef::Id(pool[rng.random_range(0..pool.len())]);
        match rng.random_range(0..8) {
            0 => EditCommand::AddNode {
                parent: if rng.random_bool(0.5) { Some(pick(rng)) } else { None },
                position: None,
                kind: if rng.random_bool(0.5) { "constant".into() } else { "variable".into() },
                literal: Some("lit".into()),
                pattern: Some("\\d+".into()),
                sep: " ".into(),
                leaf: rng.random_bool(0.3),
                label: None,
            },
            1 => EditCommand::DeleteNode { node: pick(rng) },
            2 => EditCommand::MoveNode {
                node: pick(rng),
                new_parent: if rng.random_bool(0.5) { Some(pick(rng)) } else { None },
                position: None,
            },
            3 => EditCommand::MergeNodes {
                nodes: vec![pick(rng), pick(rng)],
                pattern: "\\S+".into(),
                sep: " ".into(),
                label: None,
            },
            4 => EditCommand::CreateField {
                name: format!("f{}", rng.random_range(0..4)),
                description: format!("d{}", rng.random_range(0..2)),
            },
            5 => EditCommand::AssignField {
                node: pick(rng),
                field: if rng.random_bool(0.5) {
                    Some(format!("f{}", rng.random_range(0..4)))
                } else {
                    None
                },
            },
            6 => EditCommand::SetDescription {
                field: Some("user_name".into()),
                node: None,
                text: "d".into(),
            },
            _ => EditCommand::AssignMapping {
                field: if rng.random_bool(0.7) { "user_name".into() } else { "ghost".into() },
                attributes: match rng.random_range(0..3) {
                    0 => vec![],
                    1 => vec!["actor.user.name".into()],
                    _ => vec!["actor.user.name".into(), "bogus.path".into()],
                },
            },
        }
    }
}
