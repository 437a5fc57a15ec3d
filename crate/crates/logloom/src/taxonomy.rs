//! Mapping induced schema fields onto a shared attribute taxonomy. The
//! taxonomy is flattened to leaf attributes, described and embedded once
//! into a reusable index; each field then gets a similarity shortlist
//! (plus siblings of attributes already assigned to fields it co-occurs
//! with) and the model picks at most `max_attrs` of them. Paths the model
//! invents are rejected and repaired, so every surviving mapping points
//! into the index.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gateway::{
    cosine_similarity, examples_block, extract_json, feedback_block, majority_vote, repair_loop,
    ExampleStore, Gateway, SamplingSpec, StoredExample,
};
use crate::model::Bundle;

pub const DEFAULT_SHORTLIST: usize = 50;
pub const DEFAULT_MAX_ATTRS: usize = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyAttribute {
    pub path: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub type_tag: Option<String>,
    pub embedding: Vec<f32>,
}

impl TaxonomyAttribute {
    /// Path minus the last segment; empty for top-level attributes.
    pub fn parent(&self) -> &str {
        self.path.rsplit_once('.').map(|(p, _)| p).unwrap_or("")
    }
}

const INDEX_FORMAT: &str = "attribute-index";

/// Described and embedded taxonomy, built once per taxonomy version and
/// shared by every parser run against it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeIndex {
    format: String,
    pub taxonomy_version: String,
    pub type_tags: BTreeSet<String>,
    pub attributes: Vec<TaxonomyAttribute>,
}

#[derive(Debug, Deserialize)]
struct RawAttribute {
    path: String,
    #[serde(default)]
    description: Option<String>,
    #[serde(default, rename = "type")]
    type_tag: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawTaxonomy {
    version: String,
    #[serde(default)]
    types: Vec<String>,
    attributes: Vec<RawAttribute>,
}

fn parse_taxonomy(text: &str) -> Result<RawTaxonomy> {
    let raw: RawTaxonomy =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("taxonomy: {e}")))?;
    if raw.attributes.is_empty() {
        return Err(Error::Parse("taxonomy declares no attributes".into()));
    }
    let mut seen = BTreeSet::new();
    let declared: BTreeSet<&str> = raw.types.iter().map(String::as_str).collect();
    for a in &raw.attributes {
        if a.path.is_empty() {
            return Err(Error::Parse("taxonomy attribute with empty path".into()));
        }
        if !seen.insert(a.path.as_str()) {
            return Err(Error::Parse(format!("duplicate attribute path {:?}", a.path)));
        }
        if let Some(tag) = &a.type_tag {
            if !declared.is_empty() && !declared.contains(tag.as_str()) {
                return Err(Error::Parse(format!(
                    "attribute {:?} uses undeclared type {tag:?}",
                    a.path
                )));
            }
        }
    }
    Ok(raw)
}

/// Describes and embeds every leaf attribute. Reruns on an unchanged
/// taxonomy replay entirely from the gateway cache.
pub fn preprocess_taxonomy(gateway: &Gateway, taxonomy_text: &str) -> Result<AttributeIndex> {
    let raw = parse_taxonomy(taxonomy_text)?;
    let mut type_tags: BTreeSet<String> = raw.types.iter().cloned().collect();
    if type_tags.is_empty() {
        type_tags = raw
            .attributes
            .iter()
            .filter_map(|a| a.type_tag.clone())
            .collect();
    }
    let attributes: Vec<TaxonomyAttribute> = raw
        .attributes
        .par_iter()
        .map(|a| {
            let mut prompt = format!(
                "## TASK: describe-attribute\n\
                 In one short sentence, describe what log values belong in this taxonomy \
                 attribute.\nPath: {}\n",
                a.path
            );
            if let Some(official) = &a.description {
                prompt.push_str(&format!("Official description: {official}\n"));
            }
            let written = gateway.complete_one(&prompt)?.trim().to_string();
            // The official text stays authoritative; the model's sentence
            // augments it for the embedding.
            let description = match &a.description {
                Some(official) => format!("{official} {written}"),
                None => written,
            };
            let embedding = gateway.embed(&description)?;
            Ok(TaxonomyAttribute {
                path: a.path.clone(),
                description,
                type_tag: a.type_tag.clone(),
                embedding,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AttributeIndex {
        format: INDEX_FORMAT.into(),
        taxonomy_version: raw.version,
        type_tags,
        attributes,
    })
}

impl AttributeIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("index serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: AttributeIndex =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("index: {e}")))?;
        if index.format != INDEX_FORMAT {
            return Err(Error::Parse(format!(
                "expected {INDEX_FORMAT:?} document, found {:?}",
                index.format
            )));
        }
        let mut seen = BTreeSet::new();
        let dim = index.attributes.first().map(|a| a.embedding.len()).unwrap_or(0);
        for a in &index.attributes {
            if !seen.insert(a.path.as_str()) {
                return Err(Error::Parse(format!("duplicate attribute path {:?}", a.path)));
            }
            if a.embedding.is_empty() || a.embedding.len() != dim {
                return Err(Error::Parse(format!(
                    "attribute {:?} has a malformed embedding",
                    a.path
                )));
            }
        }
        Ok(index)
    }

    pub fn get(&self, path: &str) -> Option<&TaxonomyAttribute> {
        self.attributes.iter().find(|a| a.path == path)
    }

    pub fn paths(&self) -> BTreeSet<String> {
        self.attributes.iter().map(|a| a.path.clone()).collect()
    }
}

/// Top-k attributes by description similarity, then every sibling of the
/// already-assigned attributes appended (deduplicated, taxonomy order).
/// Deterministic given the index and assignment state.
pub fn shortlist<'i>(
    index: &'i AttributeIndex,
    field_embedding: &[f32],
    assigned_nearby: &BTreeSet<String>,
    k: usize,
) -> Vec<&'i TaxonomyAttribute> {
    let mut scored: Vec<(f64, usize)> = index
        .attributes
        .iter()
        .enumerate()
        .map(|(i, a)| (cosine_similarity(field_embedding, &a.embedding), i))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let mut out: Vec<&TaxonomyAttribute> = Vec::new();
    let mut chosen: BTreeSet<&str> = BTreeSet::new();
    for (_, i) in scored.iter().take(k) {
        let a = &index.attributes[*i];
        if chosen.insert(&a.path) {
            out.push(a);
        }
    }
    let parents: BTreeSet<&str> = index
        .attributes
        .iter()
        .filter(|a| assigned_nearby.contains(&a.path))
        .map(|a| a.parent())
        .collect();
    for a in &index.attributes {
        if parents.contains(a.parent()) && chosen.insert(&a.path) {
            out.push(a);
        }
    }
    out
}

/// Drops candidates whose declared type contradicts the field's tag;
/// untagged attributes always survive.
pub fn prune_by_type<'i>(
    candidates: Vec<&'i TaxonomyAttribute>,
    tag: &str,
) -> Vec<&'i TaxonomyAttribute> {
    candidates
        .into_iter()
        .filter(|a| a.type_tag.as_deref().map(|t| t == tag).unwrap_or(true))
        .collect()
}

/// Asks the model for the field's type, repaired until the answer is one of
/// the taxonomy's declared tags.
pub fn assign_type(
    gateway: &Gateway,
    index: &AttributeIndex,
    field_name: &str,
    field_description: &str,
    sampling: &SamplingSpec,
    max_repairs: usize,
) -> Result<String> {
    if index.type_tags.is_empty() {
        return Err(Error::Input("taxonomy declares no type tags".into()));
    }
    let tags: Vec<&str> = index.type_tags.iter().map(String::as_str).collect();
    let base = format!(
        "## TASK: assign-type\n\
         Declared types: {}\n\
         Field: {field_name}\nDescription: {field_description}\n\
         Answer with exactly one declared type, nothing else.\n",
        tags.join(", ")
    );
    repair_loop(
        max_repairs,
        |diags| {
            let prompt = format!("{base}{}", feedback_block(diags));
            let samples = gateway.complete(&prompt, sampling)?;
            let answers: Vec<String> =
                samples.iter().map(|s| s.trim().to_lowercase()).collect();
            Ok(majority_vote(&answers, |a| a.clone())?.clone())
        },
        |tag| {
            if index.type_tags.contains(tag) {
                Ok(())
            } else {
                Err(format!(
                    "{tag:?} is not a declared type; declared: {}",
                    tags.join(", ")
                ))
            }
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMapping {
    pub field: String,
    pub attributes: Vec<String>,
    /// Set when the model proposed more than the cap allowed and the tail
    /// was dropped.
    pub truncated: Vec<String>,
}

fn parse_mapping_response(response: &str) -> Result<Vec<String>> {
    if response.trim().eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let value: Value = extract_json(response)
        .ok_or_else(|| Error::Parse("mapping answer contains no JSON".into()))?;
    let arr = value
        .get("attributes")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("mapping answer lacks an \"attributes\" list".into()))?;
    arr.iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Parse("attribute entry is not a string".into()))
        })
        .collect()
}

/// Chooses 0..max_attrs attributes for one field, strictly from the
/// candidate list. Returns the surviving mapping; hallucinated paths are
/// fed back as diagnostics until the model stays inside the list.
pub fn map_field(
    gateway: &Gateway,
    field_name: &str,
    field_description: &str,
    example_values: &[String],
    candidates: &[&TaxonomyAttribute],
    max_attrs: usize,
    fewshot: &str,
    sampling: &SamplingSpec,
    max_repairs: usize,
) -> Result<FieldMapping> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no candidate attributes for field {field_name:?}"
        )));
    }
    let candidate_paths: BTreeSet<&str> = candidates.iter().map(|a| a.path.as_str()).collect();
    let mut listing = String::new();
    for (i, a) in candidates.iter().enumerate() {
        listing.push_str(&format!("{}. {}: {}\n", i + 1, a.path, a.description));
    }
    let base = format!(
        "## TASK: map-field\n\
         Field: {field_name}\nDescription: {field_description}\n\
         Example values: {}\n\
         Candidate attributes:\n{listing}\
         Select the taxonomy attributes this field populates, at most {max_attrs}. \
         Only candidates listed above are valid. Answer with JSON \
         {{\"attributes\": [\"path\"]}} or {{\"attributes\": []}} if none apply.\n{fewshot}",
        example_values.join(", "),
    );
    let chosen = repair_loop(
        max_repairs,
        |diags| {
            let prompt = format!("{base}{}", feedback_block(diags));
            let samples = gateway.complete(&prompt, sampling)?;
            let mut parsed: Vec<Vec<String>> = Vec::new();
            let mut last_err = None;
            for s in &samples {
                match parse_mapping_response(s) {
                    Ok(attrs) => parsed.push(attrs),
                    Err(e) => last_err = Some(e),
                }
            }
            if parsed.is_empty() {
                return Err(last_err.expect("at least one sample failed"));
            }
            Ok(majority_vote(&parsed, |attrs| {
                let mut k = attrs.clone();
                k.sort();
                k.join("\u{1f}")
            })?
            .clone())
        },
        |attrs: &Vec<String>| {
            let unknown: Vec<&String> = attrs
                .iter()
                .filter(|a| !candidate_paths.contains(a.as_str()))
                .collect();
            if unknown.is_empty() {
                return Ok(());
            }
            let mut valid: Vec<&str> = candidate_paths.iter().copied().collect();
            valid.sort_unstable();
            Err(format!(
                "not in the candidate list: {}; valid candidates: {}",
                unknown
                    .iter()
                    .map(|s| format!("{s:?}"))
                    .collect::<Vec<_>>()
                    .join(", "),
                valid.join(", ")
            ))
        },
    )?;
    let mut attributes = chosen;
    let truncated = if attributes.len() > max_attrs {
        attributes.split_off(max_attrs)
    } else {
        Vec::new()
    };
    Ok(FieldMapping {
        field: field_name.to_string(),
        attributes,
        truncated,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldReport {
    pub field: String,
    pub description: String,
    /// Leading shortlist candidates with similarities, for audit.
    pub shortlist: Vec<(String, f64)>,
    pub chosen: Vec<String>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MappingReport {
    pub fields: Vec<FieldReport>,
}

#[derive(Debug, Clone)]
pub struct MapperConfig {
    pub max_attrs: usize,
    pub shortlist_k: usize,
    pub use_types: bool,
    pub fewshot_k: usize,
    pub sampling: SamplingSpec,
    pub max_repairs: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            max_attrs: DEFAULT_MAX_ATTRS,
            shortlist_k: DEFAULT_SHORTLIST,
            use_types: false,
            fewshot_k: 5,
            sampling: SamplingSpec::single(),
            max_repairs: 3,
        }
    }
}

/// Fields that share a template with `field`.
fn co_occurring_fields(bundle: &Bundle, field: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for t in bundle.tree.templates() {
        let names: Vec<&String> = t
            .node_ids
            .iter()
            .filter_map(|id| bundle.tree.node(*id).ok())
            .filter_map(|n| n.field_name.as_ref())
            .collect();
        if names.iter().any(|n| n.as_str() == field) {
            out.extend(names.into_iter().cloned());
        }
    }
    out.remove(field);
    out
}

/// Maps every schema field in order, threading assignment context so later
/// fields see siblings of what their template neighbours already got.
/// A field whose repair budget runs out is left unmapped and flagged.
pub fn map_schema(
    gateway: &Gateway,
    bundle: &mut Bundle,
    index: &AttributeIndex,
    store: &mut ExampleStore,
    cfg: &MapperConfig,
) -> Result<MappingReport> {
    let mut report = MappingReport::default();
    let fields: Vec<(String, String, Vec<String>)> = bundle
        .schema
        .fields()
        .iter()
        .map(|f| {
            let desc = if f.description.is_empty() {
                f.name.clone()
            } else {
                f.description.clone()
            };
            (f.name.clone(), desc, f.example_values.clone())
        })
        .collect();
    for (name, description, examples) in fields {
        let mut flags = Vec::new();
        let embedding = gateway.embed(&description)?;
        let assigned_nearby: BTreeSet<String> = co_occurring_fields(bundle, &name)
            .iter()
            .filter_map(|f| bundle.mappings.get(f))
            .flatten()
            .cloned()
            .collect();
        let mut candidates = shortlist(index, &embedding, &assigned_nearby, cfg.shortlist_k);
        if cfg.use_types && !index.type_tags.is_empty() {
            let tag = assign_type(
                gateway,
                index,
                &name,
                &description,
                &cfg.sampling,
                cfg.max_repairs,
            )?;
            let pruned = prune_by_type(candidates.clone(), &tag);
            if pruned.is_empty() {
                flags.push(format!("type {tag:?} pruned every candidate; kept full list"));
            } else {
                candidates = pruned;
            }
        }
        let shortlist_head: Vec<(String, f64)> = candidates
            .iter()
            .take(5)
            .map(|a| (a.path.clone(), cosine_similarity(&embedding, &a.embedding)))
            .collect();
        let fewshot = examples_block(&store.nearest(&embedding, cfg.fewshot_k));
        let outcome = map_field(
            gateway,
            &name,
            &description,
            &examples,
            &candidates,
            cfg.max_attrs,
            &fewshot,
            &cfg.sampling,
            cfg.max_repairs,
        );
        let chosen = match outcome {
            Ok(mapping) => {
                if !mapping.truncated.is_empty() {
                    flags.push(format!(
                        "proposal exceeded cap {}; dropped: {}",
                        cfg.max_attrs,
                        mapping.truncated.join(", ")
                    ));
                }
                mapping.attributes
            }
            Err(Error::RepairExhausted { iters, last }) => {
                flags.push(format!(
                    "left unmapped: repairs exhausted after {iters} rounds ({last})"
                ));
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        if chosen.is_empty() {
            bundle.mappings.remove(&name);
        } else {
            bundle.mappings.insert(name.clone(), chosen.clone());
        }
        store.insert(StoredExample {
            description: description.clone(),
            embedding,
            prompt: format!("map-field {name}"),
            output: serde_json::json!({ "attributes": chosen }).to_string(),
        })?;
        report.fields.push(FieldReport {
            field: name,
            description,
            shortlist: shortlist_head,
            chosen,
            flags,
        });
    }
    bundle.taxonomy_attrs = index.paths();
    bundle.mapping_cap = cfg.max_attrs;
    bundle.verify()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockProvider;
    use crate::model::{fixtures, ParseTree};

    fn taxonomy_doc() -> String {
        serde_json::json!({
            "version": "tax-test-1",
            "types": ["ip_address", "port", "username", "hostname"],
            "attributes": [
                {"path": "src_endpoint.ip", "description": "Source IP address", "type": "ip_address"},
                {"path": "src_endpoint.port", "description": "Source port", "type": "port"},
                {"path": "src_endpoint.hostname", "description": "Source host name", "type": "hostname"},
                {"path": "actor.user.name", "description": "Acting user", "type": "username"},
                {"path": "time_dt", "description": "Event time"}
            ]
        })
        .to_string()
    }

    fn sticky_describe_entries() -> Vec<serde_json::Value> {
        ["src_endpoint.ip", "src_endpoint.port", "src_endpoint.hostname", "actor.user.name", "time_dt"]
            .iter()
            .map(|p| {
                serde_json::json!({
                    "match": ["TASK: describe-attribute", format!("Path: {p}")],
                    "response": format!("Values for {p}."),
                    "sticky": true
                })
            })
            .collect()
    }

    fn gateway_with(
        dir: &std::path::Path,
        extra: Vec<serde_json::Value>,
    ) -> Gateway {
        let mut entries = sticky_describe_entries();
        entries.extend(extra);
        let mock = MockProvider::from_json(
            &serde_json::json!({ "entries": entries }).to_string(),
        )
        .unwrap();
        Gateway::new(Box::new(mock), dir).unwrap()
    }

    fn built_index(gateway: &Gateway) -> AttributeIndex {
        preprocess_taxonomy(gateway, &taxonomy_doc()).unwrap()
    }

    #[test]
    fn preprocess_builds_described_embedded_index() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway_with(dir.path(), vec![]);
        let index = built_index(&gw);
        assert_eq!(index.attributes.len(), 5);
        assert_eq!(index.taxonomy_version, "tax-test-1");
        let ip = index.get("src_endpoint.ip").unwrap();
        // Official text survives, model sentence appended.
        assert!(ip.description.starts_with("Source IP address"));
        assert!(ip.description.contains("Values for src_endpoint.ip"));
        assert_eq!(ip.embedding.len(), 16);
        assert_eq!(ip.parent(), "src_endpoint");
        assert_eq!(index.get("time_dt").unwrap().parent(), "");
        assert_eq!(index.type_tags.len(), 4);
    }

    #[test]
    fn rerun_costs_zero_model_calls() {
        let dir = tempfile::tempdir().unwrap();
        let first_calls;
        {
            let gw = gateway_with(dir.path(), vec![]);
            built_index(&gw);
            first_calls = gw.provider_calls();
            assert!(first_calls > 0);
        }
        let gw = gateway_with(dir.path(), vec![]);
        let index = built_index(&gw);
        assert_eq!(gw.provider_calls(), 0);
        assert_eq!(index.attributes.len(), 5);
    }

    #[test]
    fn malformed_taxonomies_are_parse_errors() {
        for doc in [
            r#"{"version": "v", "attributes": []}"#,
            r#"{"version": "v", "attributes": [{"path": "a"}, {"path": "a"}]}"#,
            r#"{"version": "v", "types": ["x"], "attributes": [{"path": "a", "type": "y"}]}"#,
            "not json",
        ] {
            assert!(matches!(parse_taxonomy(doc), Err(Error::Parse(_))), "accepted {doc}");
        }
    }

    #[test]
    fn index_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway_with(dir.path(), vec![]);
        let index = built_index(&gw);
        let path = dir.path().join("index.json");
        index.save(&path).unwrap();
        let loaded = AttributeIndex::load(&path).unwrap();
        assert_eq!(loaded.attributes.len(), index.attributes.len());
        assert_eq!(loaded.get("src_endpoint.port").unwrap().type_tag.as_deref(), Some("port"));
        std::fs::write(&path, "{\"format\": \"something-else\"}").unwrap();
        assert!(AttributeIndex::load(&path).is_err());
    }

    #[test]
    fn shortlist_clamps_orders_and_injects_siblings() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway_with(dir.path(), vec![]);
        let index = built_index(&gw);
        // Query with an attribute's own embedding: that attribute comes first.
        let port = index.get("src_endpoint.port").unwrap().embedding.clone();
        let all = shortlist(&index, &port, &BTreeSet::new(), 50);
        assert_eq!(all.len(), 5);
        assert_eq!(all[0].path, "src_endpoint.port");
        // k=1 without context: only the top hit.
        let narrow = shortlist(&index, &index.get("time_dt").unwrap().embedding.clone(), &BTreeSet::new(), 1);
        assert_eq!(narrow.len(), 1);
        assert_eq!(narrow[0].path, "time_dt");
        // Same k=1 with src_endpoint.ip assigned nearby: its siblings are
        // appended even though they miss the top-k.
        let assigned: BTreeSet<String> = ["src_endpoint.ip".to_string()].into();
        let with_siblings = shortlist(
            &index,
            &index.get("time_dt").unwrap().embedding.clone(),
            &assigned,
            1,
        );
        let paths: Vec<&str> = with_siblings.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths[0], "time_dt");
        assert!(paths.contains(&"src_endpoint.port"));
        assert!(paths.contains(&"src_endpoint.hostname"));
        // Deterministic.
        let again = shortlist(
            &index,
            &index.get("time_dt").unwrap().embedding.clone(),
            &assigned,
            1,
        );
        assert_eq!(
            paths,
            again.iter().map(|a| a.path.as_str()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn type_pruning_keeps_matching_and_untagged() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway_with(dir.path(), vec![]);
        let index = built_index(&gw);
        let all: Vec<&TaxonomyAttribute> = index.attributes.iter().collect();
        let pruned = prune_by_type(all, "port");
        let paths: Vec<&str> = pruned.iter().map(|a| a.path.as_str()).collect();
        // time_dt is untagged and survives.
        assert_eq!(paths, vec!["src_endpoint.port", "time_dt"]);
    }

    #[test]
    fn assign_type_repairs_undeclared_tags() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway_with(
            dir.path(),
            vec![
                serde_json::json!({
                    "match": ["TASK: assign-type", "Field: user"],
                    "response": "banana"
                }),
                serde_json::json!({
                    "match": ["TASK: assign-type", "Field: user", "FEEDBACK"],
                    "response": "username",
                    "sticky": true
                }),
            ],
        );
        let index = built_index(&gw);
        let tag = assign_type(&gw, &index, "user", "the login name", &SamplingSpec::single(), 3)
            .unwrap();
        assert_eq!(tag, "username");
    }

    #[test]
    fn map_field_rejects_hallucinated_paths() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway_with(
            dir.path(),
            vec![
                serde_json::json!({
                    "match": ["TASK: map-field", "Field: remote_ip"],
                    "response_json": {"attributes": ["src.ip"]}
                }),
                serde_json::json!({
                    "match": ["TASK: map-field", "Field: remote_ip", "FEEDBACK", "src.ip"],
                    "response_json": {"attributes": ["src_endpoint.ip"]},
                    "sticky": true
                }),
            ],
        );
        let index = built_index(&gw);
        let candidates: Vec<&TaxonomyAttribute> = index.attributes.iter().collect();
        let mapping = map_field(
            &gw,
            "remote_ip",
            "the peer address",
            &["10.0.0.1".into()],
            &candidates,
            1,
            "",
            &SamplingSpec::single(),
            3,
        )
        .unwrap();
        assert_eq!(mapping.attributes, vec!["src_endpoint.ip".to_string()]);
        assert!(mapping.truncated.is_empty());
    }

    #[test]
    fn map_field_honors_none_and_cap() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway_with(
            dir.path(),
            vec![
                serde_json::json!({
                    "match": ["TASK: map-field", "Field: auth_method"],
                    "response": "none",
                    "sticky": true
                }),
                serde_json::json!({
                    "match": ["TASK: map-field", "Field: remote_ip"],
                    "response_json": {"attributes": ["src_endpoint.ip", "src_endpoint.hostname"]},
                    "sticky": true
                }),
            ],
        );
        let index = built_index(&gw);
        let candidates: Vec<&TaxonomyAttribute> = index.attributes.iter().collect();
        let empty = map_field(
            &gw, "auth_method", "how the login authenticated", &[], &candidates, 1, "",
            &SamplingSpec::single(), 3,
        )
        .unwrap();
        assert!(empty.attributes.is_empty());
        let capped = map_field(
            &gw, "remote_ip", "the peer address", &[], &candidates, 1, "",
            &SamplingSpec::single(), 3,
        )
        .unwrap();
        assert_eq!(capped.attributes, vec!["src_endpoint.ip".to_string()]);
        assert_eq!(capped.truncated, vec!["src_endpoint.hostname".to_string()]);
        assert!(map_field(
            &gw, "x", "d", &[], &[], 1, "", &SamplingSpec::single(), 3
        )
        .is_err());
    }

    #[test]
    fn map_schema_threads_context_and_flags_exhaustion() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway_with(
            dir.path(),
            vec![
                serde_json::json!({
                    "match": ["TASK: map-field", "Field: remote_ip"],
                    "response_json": {"attributes": ["src_endpoint.ip"]},
                    "sticky": true
                }),
                // remote_port answers only when sibling injection put
                // src_endpoint.port into a k=1 shortlist.
                serde_json::json!({
                    "match": ["TASK: map-field", "Field: remote_port", "src_endpoint.port"],
                    "response_json": {"attributes": ["src_endpoint.port"]},
                    "sticky": true
                }),
                // user_name insists on a path outside the list forever.
                serde_json::json!({
                    "match": ["TASK: map-field", "Field: user_name"],
                    "response_json": {"attributes": ["made.up.path"]},
                    "sticky": true
                }),
            ],
        );
        let index = built_index(&gw);

        let mut tree = ParseTree::new();
        let leaf = tree.insert_template(&fixtures::accepted_conn_tokens()).unwrap().leaf;
        let template = tree.template(leaf).unwrap();
        let vars: Vec<u32> = template
            .node_ids
            .iter()
            .zip(&template.tokens)
            .filter(|(_, t)| t.is_variable())
            .map(|(id, _)| *id)
            .collect();
        tree.set_field_name(vars[3], Some("user_name".into())).unwrap();
        tree.set_field_name(vars[5], Some("remote_ip".into())).unwrap();
        tree.set_field_name(vars[6], Some("remote_port".into())).unwrap();
        let mut bundle = Bundle::new(tree);
        // Descriptions copied verbatim from index attributes pin the
        // similarity top-1 (identical text embeds identically): remote_ip's
        // shortlist of one is src_endpoint.ip, remote_port's is time_dt, so
        // src_endpoint.port can only arrive by sibling injection.
        bundle
            .schema
            .register("remote_ip", "Source IP address Values for src_endpoint.ip.")
            .unwrap();
        bundle
            .schema
            .register("remote_port", "Event time Values for time_dt.")
            .unwrap();
        bundle.schema.register("user_name", "login user").unwrap();

        let mut store = ExampleStore::new();
        let cfg = MapperConfig { shortlist_k: 1, max_repairs: 2, ..MapperConfig::default() };
        let report = map_schema(&gw, &mut bundle, &index, &mut store, &cfg).unwrap();

        assert_eq!(
            bundle.mappings.get("remote_ip"),
            Some(&vec!["src_endpoint.ip".to_string()])
        );
        assert_eq!(
            bundle.mappings.get("remote_port"),
            Some(&vec!["src_endpoint.port".to_string()])
        );
        assert!(!bundle.mappings.contains_key("user_name"));
        let user_report = report.fields.iter().find(|f| f.field == "user_name").unwrap();
        assert!(user_report.flags.iter().any(|f| f.contains("repairs exhausted")));
        assert_eq!(store.len(), 3);
        assert_eq!(bundle.taxonomy_attrs.len(), 5);
        bundle.verify().unwrap();
    }
}
