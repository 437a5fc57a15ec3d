//! Field naming. Each template's variables (and any constant the model
//! flags as meaningful, like a process name) get a snake_case field name
//! and a one-sentence description. Templates share tree prefixes, so the
//! prompt pins the names already fixed on shared nodes and the repair loop
//! enforces their exact reuse; consistency across unrelated templates comes
//! from few-shot examples retrieved by template-description embeddings.
//!
//! Naming is atomic per template: the schema and tree are only touched once
//! a response has passed every check.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gateway::{
    examples_block, extract_json, feedback_block, majority_vote, repair_loop, ExampleStore,
    Gateway, SamplingSpec, StoredExample,
};
use crate::model::{normalize_field_name, Bundle, NodeId, ParseTree, Schema, Token};

#[derive(Debug, Clone)]
pub struct NamingConfig {
    pub sampling: SamplingSpec,
    pub max_repairs: usize,
    pub fewshot_k: usize,
    pub use_fewshot: bool,
}

impl Default for NamingConfig {
    fn default() -> Self {
        NamingConfig {
            sampling: SamplingSpec::new(3, 0.7).expect("static spec is valid"),
            max_repairs: 3,
            fewshot_k: 5,
            use_fewshot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedToken {
    pub node: NodeId,
    pub name: String,
    pub description: String,
}

/// A validated naming for one template: the template's own description plus
/// every named token on its path, inherited names included.
#[derive(Debug, Clone)]
pub struct NamingAssignment {
    pub leaf: NodeId,
    pub template_description: String,
    pub named: Vec<NamedToken>,
}

fn token_line(
    index: usize,
    token: &Token,
    example: Option<&str>,
    fixed: Option<(&str, Option<&str>)>,
) -> String {
    let mut line = match token {
        Token::Constant { literal, sep } => {
            format!("{index}. constant literal={literal:?} sep={sep:?}")
        }
        Token::Variable { pattern, sep } => {
            format!("{index}. variable pattern={pattern:?} sep={sep:?}")
        }
    };
    if let Some(e) = example {
        line.push_str(&format!(" example={e:?}"));
    }
    if let Some((name, desc)) = fixed {
        line.push_str(&format!(" FIXED name={name}"));
        if let Some(d) = desc {
            line.push_str(&format!(" description={d:?}"));
        }
    }
    line.push('\n');
    line
}

/// Canonical field description: the schema owns it; leaf nodes fall back to
/// it because their node slot holds the template description instead.
fn field_description<'s>(schema: &'s Schema, tree: &'s ParseTree, id: NodeId) -> Option<&'s str> {
    let node = tree.node(id).ok()?;
    let name = node.field_name.as_deref()?;
    if let Some(f) = schema.get(name) {
        return Some(&f.description);
    }
    node.description.as_deref()
}

#[derive(Debug, serde::Deserialize)]
struct NameDoc {
    name: String,
    description: String,
}

fn parse_naming(
    response: &str,
    path: &[NodeId],
) -> Result<(String, BTreeMap<usize, (String, String)>)> {
    let value = extract_json(response)
        .ok_or_else(|| Error::Parse("naming answer contains no JSON".into()))?;
    let template_description = value
        .get("template_description")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Parse("naming answer lacks \"template_description\"".into()))?
        .trim()
        .to_string();
    if template_description.is_empty() {
        return Err(Error::Parse("template_description is empty".into()));
    }
    let names_obj = value
        .get("names")
        .and_then(|v| v.as_object())
        .ok_or_else(|| Error::Parse("naming answer lacks a \"names\" object".into()))?;
    let mut names = BTreeMap::new();
    for (key, v) in names_obj {
        let index: usize = key
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("names key {key:?} is not a token index")))?;
        if index >= path.len() {
            return Err(Error::Parse(format!(
                "token index {index} outside 0..{}; name only listed tokens",
                path.len()
            )));
        }
        let doc: NameDoc = serde_json::from_value(v.clone())
            .map_err(|e| Error::Parse(format!("names[{key}]: {e}")))?;
        let name = normalize_field_name(&doc.name);
        if name.is_empty() {
            return Err(Error::Parse(format!(
                "names[{key}] normalizes to an empty identifier"
            )));
        }
        let description = doc.description.trim().to_string();
        if description.is_empty() {
            return Err(Error::Parse(format!("names[{key}] has an empty description")));
        }
        names.insert(index, (name, description));
    }
    Ok((template_description, names))
}

/// Rejects a parsed naming that breaks the contract: unnamed variables,
/// renamed inherited tokens, intra-template duplicates, or a name that
/// collides with a differently-described schema field.
fn check_naming(
    tree: &ParseTree,
    schema: &Schema,
    path: &[NodeId],
    tokens: &[Token],
    names: &BTreeMap<usize, (String, String)>,
) -> std::result::Result<(), String> {
    let mut missing = Vec::new();
    for (i, (id, token)) in path.iter().zip(tokens).enumerate() {
        let fixed = tree.node(*id).ok().and_then(|n| n.field_name.clone());
        match (names.get(&i), fixed, token.is_variable()) {
            (None, None, true) => missing.push(i.to_string()),
            (Some((name, _)), Some(fixed), _) if *name != fixed => {
                return Err(format!(
                    "token {i} is already named; it must be named exactly {fixed:?}, not {name:?}"
                ));
            }
            _ => {}
        }
    }
    if !missing.is_empty() {
        return Err(format!(
            "every variable needs a name; missing entries for token(s) {}",
            missing.join(", ")
        ));
    }
    let mut scratch = schema.clone();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (name, description)) in names {
        if let Some(prev) = seen.insert(name.as_str(), *i) {
            return Err(format!(
                "tokens {prev} and {i} both named {name:?}; fields must be unique within a template"
            ));
        }
        // Inherited tokens keep their original registration.
        let inherited = tree
            .node(path[*i])
            .ok()
            .and_then(|n| n.field_name.clone())
            .is_some();
        if inherited {
            continue;
        }
        match scratch.register(name, description) {
            Ok(_) => {}
            Err(Error::NameCollision { .. }) => {
                let existing = scratch.get(name).expect("collision implies presence");
                return Err(format!(
                    "field {name:?} already exists with description {:?}; reuse that \
                     description verbatim or choose a different name",
                    existing.description
                ));
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(())
}

/// Names one template's tokens. The prompt shows every token with its
/// pattern, separator, observed example, and any name fixed by a shared
/// prefix; the response is sampled, majority-voted, validated, and repaired
/// until it honors the contract. Nothing is written on failure.
pub fn name_template(
    gateway: &Gateway,
    tree: &mut ParseTree,
    schema: &mut Schema,
    leaf: NodeId,
    store: &mut ExampleStore,
    cfg: &NamingConfig,
) -> Result<NamingAssignment> {
    let template = tree.template(leaf)?;
    let path = template.node_ids.clone();
    let tokens = template.tokens.clone();
    let mut listing = String::new();
    for (i, (id, token)) in path.iter().zip(&tokens).enumerate() {
        let node = tree.node(*id)?;
        let fixed = node
            .field_name
            .as_deref()
            .map(|n| (n, field_description(schema, tree, *id)));
        listing.push_str(&token_line(i, token, node.example.as_deref(), fixed));
    }
    let wildcard = template.wildcard_form();
    let summary = gateway.describe("template", &wildcard)?;
    let summary_embedding = gateway.embed(&summary)?;
    let fewshot = if cfg.use_fewshot {
        examples_block(&store.nearest(&summary_embedding, cfg.fewshot_k))
    } else {
        String::new()
    };
    let base = format!(
        "## TASK: name-template\n\
         Name every variable token of this log template with a lowercase snake_case \
         field name and a one-sentence description. Also name any constant token that \
         is semantically relevant (it identifies the event source or kind, like a \
         process name); leave punctuation and filler constants unnamed. Tokens marked \
         FIXED already have names from templates sharing this prefix: reuse those \
         names exactly. Finish with a one-sentence description of the whole template.\n\
         Template: {wildcard}\nTokens:\n{listing}\
         Answer with JSON {{\"template_description\": \"...\", \"names\": \
         {{\"<token index>\": {{\"name\": \"...\", \"description\": \"...\"}}}}}}.\
         \n{fewshot}"
    );
    let (template_description, names) = repair_loop(
        cfg.max_repairs,
        |diags| {
            let prompt = format!("{base}{}", feedback_block(diags));
            let samples = gateway.complete(&prompt, &cfg.sampling)?;
            let mut parsed = Vec::new();
            let mut last_err: Option<Error> = None;
            for s in &samples {
                match parse_naming(s, &path) {
                    Ok(p) => parsed.push(p),
                    Err(e) => last_err = Some(e),
                }
            }
            if parsed.is_empty() {
                return Err(last_err.expect("all samples failed"));
            }
            let winner = majority_vote(&parsed, |(desc, names)| {
                let mut key = desc.clone();
                for (i, (n, d)) in names {
                    key.push_str(&format!("\u{1f}{i}\u{1f}{n}\u{1f}{d}"));
                }
                key
            })?;
            Ok(winner.clone())
        },
        |(_, names)| check_naming(tree, schema, &path, &tokens, names),
    )?;
    // Checks passed: commit schema first, then tree, then the few-shot
    // store. None of these steps can fail halfway.
    let mut named = Vec::new();
    for (i, (name, description)) in &names {
        let id = path[*i];
        let inherited = tree.node(id)?.field_name.is_some();
        if !inherited {
            schema.register(name, description)?;
            tree.set_field_name(id, Some(name.clone()))?;
            if id != leaf {
                tree.set_description(id, Some(description.clone()))?;
            }
        }
        if let Some(example) = tree.node(id)?.example.clone() {
            schema.add_examples(name, [example]);
        }
        named.push(NamedToken {
            node: id,
            name: name.clone(),
            description: description.clone(),
        });
    }
    tree.set_description(leaf, Some(template_description.clone()))?;
    if cfg.use_fewshot {
        let output = serde_json::json!({
            "template_description": template_description,
            "names": names
                .iter()
                .map(|(i, (n, d))| {
                    (i.to_string(), serde_json::json!({"name": n, "description": d}))
                })
                .collect::<serde_json::Map<String, serde_json::Value>>(),
        });
        store.insert(StoredExample {
            description: summary,
            embedding: summary_embedding,
            prompt: format!("name-template {wildcard}"),
            output: output.to_string(),
        })?;
    }
    Ok(NamingAssignment {
        leaf,
        template_description,
        named,
    })
}

/// One line of the field inventory report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FieldInventoryRow {
    pub name: String,
    pub description: String,
    pub occurrences: usize,
}

#[derive(Debug, Default)]
pub struct NamingReport {
    pub named: Vec<NamingAssignment>,
    /// Leaves whose naming ran out of repairs; they stay unnamed and wait
    /// for the validation pass.
    pub queued: Vec<NodeId>,
}

/// Field inventory across the whole bundle: every schema field with its
/// description and the number of templates it appears in.
pub fn field_inventory(bundle: &Bundle) -> Vec<FieldInventoryRow> {
    let occurrences = bundle.field_occurrences();
    bundle
        .schema
        .fields()
        .iter()
        .map(|f| FieldInventoryRow {
            name: f.name.clone(),
            description: f.description.clone(),
            occurrences: occurrences.get(&f.name).copied().unwrap_or(0),
        })
        .collect()
}

fn fully_named(tree: &ParseTree, leaf: NodeId) -> Result<bool> {
    let template = tree.template(leaf)?;
    if template.description.is_none() {
        return Ok(false);
    }
    for (id, token) in template.node_ids.iter().zip(&template.tokens) {
        if token.is_variable() && tree.node(*id)?.field_name.is_none() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Names every template in the bundle, earliest leaf first so later
/// templates inherit prefix names and few-shot context from earlier ones.
/// Already-complete templates are skipped, which makes reruns cheap and
/// resumable.
pub fn name_bundle(
    gateway: &Gateway,
    bundle: &mut Bundle,
    store: &mut ExampleStore,
    cfg: &NamingConfig,
) -> Result<NamingReport> {
    let leaves: Vec<NodeId> = bundle.tree.templates().iter().map(|t| t.leaf).collect();
    let mut report = NamingReport::default();
    for leaf in leaves {
        if fully_named(&bundle.tree, leaf)? {
            continue;
        }
        match name_template(gateway, &mut bundle.tree, &mut bundle.schema, leaf, store, cfg) {
            Ok(assignment) => report.named.push(assignment),
            Err(Error::RepairExhausted { .. }) => report.queued.push(leaf),
            Err(e) => return Err(e),
        }
    }
    bundle.verify()?;
    Ok(report)
}
