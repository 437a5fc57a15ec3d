//! Query execution over ingested records: a boolean tree of typed
//! predicates in either the parser's own field namespace or the shared
//! taxonomy namespace, plus the naive substring pipeline used as a baseline.
//!
//! All field references are validated against the bundle before any record
//! is touched.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Bundle, StructuredRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryForm {
    /// Bare field names resolve to the bundle's own schema.
    Custom,
    /// Bare field names resolve to taxonomy attribute paths.
    Standardized,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldRef {
    Custom(String),
    Taxonomy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Exists { field: FieldRef },
    Eq { field: FieldRef, value: String },
    /// True only when the field is present and no value equals; absence is
    /// not inequality.
    Ne { field: FieldRef, value: String },
    Contains { field: FieldRef, value: String },
    /// False for values that do not parse as numbers.
    Num { field: FieldRef, op: CmpOp, value: f64 },
    /// Bytewise comparison; how syslog-style timestamps are range-filtered.
    Lex { field: FieldRef, op: CmpOp, value: String },
    /// Substring over the matched template's wildcard form.
    TemplateContains { value: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryNode {
    And(Vec<QueryNode>),
    Or(Vec<QueryNode>),
    Pred(Predicate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub form: QueryForm,
    pub root: QueryNode,
}

fn parse_field(raw: &str, form: QueryForm) -> FieldRef {
    if let Some(rest) = raw.strip_prefix("custom:") {
        FieldRef::Custom(rest.to_string())
    } else if let Some(rest) = raw.strip_prefix("tax:") {
        FieldRef::Taxonomy(rest.to_string())
    } else {
        match form {
            QueryForm::Custom => FieldRef::Custom(raw.to_string()),
            QueryForm::Standardized => FieldRef::Taxonomy(raw.to_string()),
        }
    }
}

fn want_str<'v>(obj: &'v serde_json::Map<String, Value>, key: &str) -> Result<&'v str> {
    obj.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Query(format!("predicate lacks string {key:?}")))
}

fn want_value_string(obj: &serde_json::Map<String, Value>) -> Result<String> {
    match obj.get("value") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(Error::Query("predicate lacks a string value".into())),
    }
}

fn want_value_number(obj: &serde_json::Map<String, Value>) -> Result<f64> {
    match obj.get("value") {
        Some(Value::Number(n)) => n
            .as_f64()
            .ok_or_else(|| Error::Query("numeric value out of range".into())),
        Some(Value::String(s)) => s
            .parse::<f64>()
            .map_err(|_| Error::Query(format!("value {s:?} is not numeric"))),
        _ => Err(Error::Query("predicate lacks a numeric value".into())),
    }
}

fn parse_node(v: &Value, form: QueryForm) -> Result<QueryNode> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Query("query node must be an object".into()))?;
    if let Some(children) = obj.get("and") {
        let arr = children
            .as_array()
            .ok_or_else(|| Error::Query("\"and\" takes a list".into()))?;
        if arr.is_empty() {
            return Err(Error::Query("\"and\" over zero clauses".into()));
        }
        return Ok(QueryNode::And(
            arr.iter().map(|c| parse_node(c, form)).collect::<Result<_>>()?,
        ));
    }
    if let Some(children) = obj.get("or") {
        let arr = children
            .as_array()
            .ok_or_else(|| Error::Query("\"or\" takes a list".into()))?;
        if arr.is_empty() {
            return Err(Error::Query("\"or\" over zero clauses".into()));
        }
        return Ok(QueryNode::Or(
            arr.iter().map(|c| parse_node(c, form)).collect::<Result<_>>()?,
        ));
    }
    let op = want_str(obj, "op")?;
    if op == "template_contains" {
        return Ok(QueryNode::Pred(Predicate::TemplateContains {
            value: want_value_string(obj)?,
        }));
    }
    let field = parse_field(want_str(obj, "field")?, form);
    let pred = match op {
        "exists" => Predicate::Exists { field },
        "eq" => Predicate::Eq { field, value: want_value_string(obj)? },
        "ne" => Predicate::Ne { field, value: want_value_string(obj)? },
        "contains" => Predicate::Contains { field, value: want_value_string(obj)? },
        "num_lt" | "num_le" | "num_gt" | "num_ge" => Predicate::Num {
            field,
            op: cmp_of(op),
            value: want_value_number(obj)?,
        },
        "lex_lt" | "lex_le" | "lex_gt" | "lex_ge" => Predicate::Lex {
            field,
            op: cmp_of(op),
            value: want_value_string(obj)?,
        },
        other => return Err(Error::Query(format!("unknown predicate op {other:?}"))),
    };
    Ok(QueryNode::Pred(pred))
}

fn cmp_of(op: &str) -> CmpOp {
    match &op[op.len() - 2..] {
        "lt" => CmpOp::Lt,
        "le" => CmpOp::Le,
        "gt" => CmpOp::Gt,
        _ => CmpOp::Ge,
    }
}

impl QuerySpec {
    pub fn parse(text: &str) -> Result<QuerySpec> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| Error::Query(format!("query JSON: {e}")))?;
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::Query("query document must be an object".into()))?;
        let form = match obj.get("form").and_then(Value::as_str) {
            Some("custom") | None => QueryForm::Custom,
            Some("standardized") => QueryForm::Standardized,
            Some(other) => return Err(Error::Query(format!("unknown form {other:?}"))),
        };
        let root = obj
            .get("where")
            .ok_or_else(|| Error::Query("query document lacks \"where\"".into()))?;
        Ok(QuerySpec {
            form,
            root: parse_node(root, form)?,
        })
    }

    fn field_refs<'s>(&'s self) -> Vec<&'s FieldRef> {
        fn walk<'s>(node: &'s QueryNode, out: &mut Vec<&'s FieldRef>) {
            match node {
                QueryNode::And(cs) | QueryNode::Or(cs) => {
                    cs.iter().for_each(|c| walk(c, out))
                }
                QueryNode::Pred(p) => match p {
                    Predicate::Exists { field }
                    | Predicate::Eq { field, .. }
                    | Predicate::Ne { field, .. }
                    | Predicate::Contains { field, .. }
                    | Predicate::Num { field, .. }
                    | Predicate::Lex { field, .. } => out.push(field),
                    Predicate::TemplateContains { .. } => {}
                },
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// Every referenced field must exist in the bundle's schema, every
    /// attribute in the taxonomy the bundle was mapped against.
    pub fn validate(&self, bundle: &Bundle) -> Result<()> {
        for field in self.field_refs() {
            match field {
                FieldRef::Custom(name) => {
                    if !bundle.schema.contains(name) {
                        return Err(Error::Query(format!("unknown field {name:?}")));
                    }
                }
                FieldRef::Taxonomy(path) => {
                    if !bundle.taxonomy_attrs.contains(path) {
                        return Err(Error::Query(format!("unknown attribute {path:?}")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn contains_bytes(hay: &[u8], needle: &[u8]) -> bool {
    if needle.is_empty() {
        return true;
    }
    hay.windows(needle.len()).any(|w| w == needle)
}

fn cmp_holds(ord: std::cmp::Ordering, op: CmpOp) -> bool {
    use std::cmp::Ordering::*;
    match op {
        CmpOp::Lt => ord == Less,
        CmpOp::Le => ord != Greater,
        CmpOp::Gt => ord == Greater,
        CmpOp::Ge => ord != Less,
    }
}

struct Resolved<'b> {
    /// Attribute path to the fields mapped onto it.
    attr_fields: BTreeMap<&'b str, Vec<&'b str>>,
    /// Wildcard form per leaf, for template predicates.
    forms: BTreeMap<u32, String>,
}

impl<'b> Resolved<'b> {
    fn new(bundle: &'b Bundle) -> Self {
        let mut attr_fields: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (field, attrs) in &bundle.mappings {
            for a in attrs {
                attr_fields.entry(a).or_default().push(field);
            }
        }
        let forms = bundle
            .tree
            .templates()
            .into_iter()
            .map(|t| (t.leaf, t.wildcard_form()))
            .collect();
        Resolved { attr_fields, forms }
    }

    /// Captured values visible through a field reference. Taxonomy
    /// references see the values of every field mapped to the attribute.
    fn values<'r>(&self, record: &'r StructuredRecord, field: &FieldRef) -> Vec<&'r [u8]> {
        match field {
            FieldRef::Custom(name) => record.values(name).collect(),
            FieldRef::Taxonomy(path) => self
                .attr_fields
                .get(path.as_str())
                .map(|fields| {
                    fields
                        .iter()
                        .flat_map(|f| record.values(f))
                        .collect::<Vec<_>>()
                })
                .unwrap_or_default(),
        }
    }

    fn eval_pred(&self, record: &StructuredRecord, pred: &Predicate) -> bool {
        match pred {
            Predicate::Exists { field } => !self.values(record, field).is_empty(),
            Predicate::Eq { field, value } => self
                .values(record, field)
                .iter()
                .any(|v| *v == value.as_bytes()),
            Predicate::Ne { field, value } => {
                let vals = self.values(record, field);
                !vals.is_empty() && vals.iter().all(|v| *v != value.as_bytes())
            }
            Predicate::Contains { field, value } => self
                .values(record, field)
                .iter()
                .any(|v| contains_bytes(v, value.as_bytes())),
            Predicate::Num { field, op, value } => {
                self.values(record, field).iter().any(|v| {
                    std::str::from_utf8(v)
                        .ok()
                        .and_then(|s| s.trim().parse::<f64>().ok())
                        .and_then(|n| n.partial_cmp(value))
                        .map(|ord| cmp_holds(ord, *op))
                        .unwrap_or(false)
                })
            }
            Predicate::Lex { field, op, value } => self
                .values(record, field)
                .iter()
                .any(|v| cmp_holds(v.iter().copied().cmp(value.bytes()), *op)),
            Predicate::TemplateContains { value } => match record.template_id {
                Some(leaf) => self
                    .forms
                    .get(&leaf)
                    .map(|f| f.contains(value.as_str()))
                    .unwrap_or(false),
                None => false,
            },
        }
    }

    fn eval(&self, record: &StructuredRecord, node: &QueryNode) -> bool {
        match node {
            QueryNode::And(cs) => cs.iter().all(|c| self.eval(record, c)),
            QueryNode::Or(cs) => cs.iter().any(|c| self.eval(record, c)),
            QueryNode::Pred(p) => self.eval_pred(record, p),
        }
    }
}

/// Runs a validated query, returning matching line ordinals.
pub fn run_query(
    bundle: &Bundle,
    records: &[StructuredRecord],
    spec: &QuerySpec,
) -> Result<BTreeSet<u64>> {
    spec.validate(bundle)?;
    let resolved = Resolved::new(bundle);
    Ok(records
        .par_iter()
        .filter(|r| resolved.eval(r, &spec.root))
        .map(|r| r.line_number)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Include(String),
    Exclude(String),
}

/// The fgrep-chain baseline: raw lines filtered stage by stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstringPipeline {
    pub stages: Vec<Stage>,
}

impl SubstringPipeline {
    pub fn parse(text: &str) -> Result<SubstringPipeline> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| Error::Query(format!("pipeline JSON: {e}")))?;
        let arr = doc
            .get("pipeline")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Query("pipeline document lacks \"pipeline\" list".into()))?;
        if arr.is_empty() {
            return Err(Error::Query("pipeline needs at least one stage".into()));
        }
        let mut stages = Vec::with_capacity(arr.len());
        for (i, stage) in arr.iter().enumerate() {
            let obj = stage
                .as_object()
                .ok_or_else(|| Error::Query(format!("stage {i} must be an object")))?;
            match (obj.get("include"), obj.get("exclude")) {
                (Some(Value::String(s)), None) => stages.push(Stage::Include(s.clone())),
                (None, Some(Value::String(s))) => stages.push(Stage::Exclude(s.clone())),
                _ => {
                    return Err(Error::Query(format!(
                        "stage {i} needs exactly one of include/exclude"
                    )))
                }
            }
        }
        Ok(SubstringPipeline { stages })
    }

    /// Ordinals are 1-based line numbers, matching ingest.
    pub fn run(&self, lines: &[Vec<u8>]) -> BTreeSet<u64> {
        let mut alive: Vec<u64> = (1..=lines.len() as u64).collect();
        for stage in &self.stages {
            alive.retain(|ord| {
                let line = &lines[(ord - 1) as usize];
                match stage {
                    Stage::Include(s) => contains_bytes(line, s.as_bytes()),
                    Stage::Exclude(s) => !contains_bytes(line, s.as_bytes()),
                }
            });
        }
        alive.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryScore {
    pub precision: f64,
    pub recall: f64,
    /// Set when the query returned nothing while the golden set is
    /// nonempty; the 0.0 precision is then a convention, not a measurement.
    pub empty_prediction: bool,
}

pub fn score(predicted: &BTreeSet<u64>, golden: &BTreeSet<u64>) -> QueryScore {
    let hit = predicted.intersection(golden).count() as f64;
    let precision = if predicted.is_empty() {
        if golden.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        hit / predicted.len() as f64
    };
    let recall = if golden.is_empty() {
        1.0
    } else {
        hit / golden.len() as f64
    };
    QueryScore {
        precision,
        recall,
        empty_prediction: predicted.is_empty() && !golden.is_empty(),
    }
}
