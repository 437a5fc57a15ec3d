//! Scoring a predicted parser against ground truth. Grouping metrics (PGS,
//! GA, PA) work on how lines were bucketed into templates, TS compares
//! template skeletons, SGS compares field naming over aligned variable
//! occurrences, and mapping accuracy compares taxonomy assignments.
//!
//! Lines the predicted parser fails to match score 0 on every grouping
//! metric. Ground truth must cover every line.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::model::{Bundle, ParseTree, StructuredRecord};

/// Character-level edit distance, iterative two-row DP.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// 1 − edit distance / max length, over wildcard-form template strings.
pub fn template_similarity(pred: &str, gt: &str) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Input(
            "template similarity requires nonempty templates".into(),
        ));
    }
    let max = pred.chars().count().max(gt.chars().count());
    Ok(1.0 - levenshtein(pred, gt) as f64 / max as f64)
}

/// How a parser bucketed a corpus: each line ordinal belongs to one group
/// (or none, when the parser failed on it), and each group carries its
/// template's wildcard form as label.
#[derive(Debug, Clone, Default)]
pub struct Grouping {
    lines: BTreeMap<u64, Option<u32>>,
    labels: BTreeMap<u32, String>,
    members: BTreeMap<u32, BTreeSet<u64>>,
    ids: HashMap<String, u32>,
}

impl Grouping {
    pub fn new() -> Self {
        Self::default()
    }

    /// Group identity is `group`; `label` is the template string shown to
    /// label-sensitive metrics. Two groups may share a label but one group
    /// cannot have two.
    pub fn assign(&mut self, ordinal: u64, group: &str, label: &str) -> Result<()> {
        if self.lines.contains_key(&ordinal) {
            return Err(Error::Input(format!("line {ordinal} assigned twice")));
        }
        let next = self.ids.len() as u32;
        let gid = *self.ids.entry(group.to_string()).or_insert(next);
        match self.labels.get(&gid) {
            Some(existing) if existing != label => {
                return Err(Error::Input(format!(
                    "group {group:?} labeled both {existing:?} and {label:?}"
                )))
            }
            None => {
                self.labels.insert(gid, label.to_string());
            }
            _ => {}
        }
        self.lines.insert(ordinal, Some(gid));
        self.members.entry(gid).or_default().insert(ordinal);
        Ok(())
    }

    /// The parser produced nothing for this line.
    pub fn assign_unmatched(&mut self, ordinal: u64) -> Result<()> {
        if self.lines.contains_key(&ordinal) {
            return Err(Error::Input(format!("line {ordinal} assigned twice")));
        }
        self.lines.insert(ordinal, None);
        Ok(())
    }

    /// Builds the grouping a parse produced: group identity is the matched
    /// leaf, label its wildcard form.
    pub fn from_records(tree: &ParseTree, records: &[StructuredRecord]) -> Result<Self> {
        let mut g = Grouping::new();
        let mut forms: HashMap<u32, String> = HashMap::new();
        for r in records {
            match r.template_id {
                Some(leaf) => {
                    let form = match forms.entry(leaf) {
                        std::collections::hash_map::Entry::Occupied(e) => e.get().clone(),
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(tree.template(leaf)?.wildcard_form()).clone()
                        }
                    };
                    g.assign(r.line_number, &leaf.to_string(), &form)?;
                }
                None => g.assign_unmatched(r.line_number)?,
            }
        }
        Ok(g)
    }

    pub fn universe(&self) -> BTreeSet<u64> {
        self.lines.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    fn label_of(&self, gid: u32) -> &str {
        &self.labels[&gid]
    }
}

fn check_universes(pred: &Grouping, gt: &Grouping) -> Result<()> {
    if pred.lines.is_empty() {
        return Err(Error::EmptyInput("grouping metrics over zero lines".into()));
    }
    if pred.universe() != gt.universe() {
        return Err(Error::Input(
            "predicted and ground-truth groupings cover different lines".into(),
        ));
    }
    if let Some((ord, _)) = gt.lines.iter().find(|(_, g)| g.is_none()) {
        return Err(Error::Input(format!(
            "ground truth has no group for line {ord}"
        )));
    }
    Ok(())
}

/// Per-line partial credit for grouping. A predicted group that mixes two
/// ground-truth formats scores 0 for all its lines; a pure subgroup scores
/// its size over the true group's size.
pub fn parser_group_similarity(pred: &Grouping, gt: &Grouping) -> Result<f64> {
    check_universes(pred, gt)?;
    // Verdict per predicted group: None = mixed, Some(size ratio numerator).
    let mut verdict: HashMap<u32, Option<f64>> = HashMap::new();
    for (gid, members) in &pred.members {
        let mut gt_groups: BTreeSet<u32> = BTreeSet::new();
        for ord in members {
            gt_groups.insert(gt.lines[ord].expect("gt is total"));
        }
        let v = if gt_groups.len() >= 2 {
            None
        } else {
            Some(members.len() as f64)
        };
        verdict.insert(*gid, v);
    }
    let mut total = 0.0;
    for (ord, pg) in &pred.lines {
        if let Some(gid) = pg {
            if let Some(size) = verdict[gid] {
                let gt_gid = gt.lines[ord].expect("gt is total");
                total += size / gt.members[&gt_gid].len() as f64;
            }
        }
    }
    Ok(total / pred.lines.len() as f64)
}

/// Strict grouping: a line counts only when its predicted group equals its
/// true group exactly, as a set of lines.
pub fn group_accuracy(pred: &Grouping, gt: &Grouping) -> Result<f64> {
    check_universes(pred, gt)?;
    let mut verdict: HashMap<u32, bool> = HashMap::new();
    let mut correct = 0usize;
    for (ord, pg) in &pred.lines {
        if let Some(gid) = pg {
            let ok = *verdict.entry(*gid).or_insert_with(|| {
                let gt_gid = gt.lines[ord].expect("gt is total");
                pred.members[gid] == gt.members[&gt_gid]
            });
            correct += usize::from(ok);
        }
    }
    Ok(correct as f64 / pred.lines.len() as f64)
}

/// Strict template identity: a line counts only when its predicted wildcard
/// form equals the true one character for character.
pub fn parsing_accuracy(pred: &Grouping, gt: &Grouping) -> Result<f64> {
    check_universes(pred, gt)?;
    let mut correct = 0usize;
    for (ord, pg) in &pred.lines {
        if let Some(gid) = pg {
            let gt_gid = gt.lines[ord].expect("gt is total");
            correct += usize::from(pred.label_of(*gid) == gt.label_of(gt_gid));
        }
    }
    Ok(correct as f64 / pred.lines.len() as f64)
}

/// Mean per-line template similarity, 0 for unmatched lines. Pairs are
/// memoized per (predicted group, true group).
pub fn mean_template_similarity(pred: &Grouping, gt: &Grouping) -> Result<f64> {
    check_universes(pred, gt)?;
    let mut memo: HashMap<(u32, u32), f64> = HashMap::new();
    let mut total = 0.0;
    for (ord, pg) in &pred.lines {
        if let Some(gid) = pg {
            let gt_gid = gt.lines[ord].expect("gt is total");
            let ts = match memo.entry((*gid, gt_gid)) {
                std::collections::hash_map::Entry::Occupied(e) => *e.get(),
                std::collections::hash_map::Entry::Vacant(e) => *e.insert(template_similarity(
                    pred.label_of(*gid),
                    gt.label_of(gt_gid),
                )?),
            };
            total += ts;
        }
    }
    Ok(total / pred.lines.len() as f64)
}

/// One template variable under both namings, weighted by how many lines
/// flow through it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccurrenceAssignment {
    pub pred_field: String,
    pub gt_field: String,
    pub weight: u64,
}

/// Field-naming analogue of PGS: occurrences sharing a predicted name form
/// a schema group; merging two true fields scores 0, a pure split scores
/// the weighted size ratio. Mean is weighted by occurrence frequency.
pub fn schema_group_similarity(occurrences: &[OccurrenceAssignment]) -> Result<f64> {
    if occurrences.is_empty() {
        return Err(Error::EmptyInput("schema similarity over zero occurrences".into()));
    }
    let mut pred_weight: BTreeMap<&str, u64> = BTreeMap::new();
    let mut gt_weight: BTreeMap<&str, u64> = BTreeMap::new();
    let mut pred_spans: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for o in occurrences {
        if o.weight == 0 {
            return Err(Error::Input(format!(
                "occurrence {}/{} has zero weight",
                o.pred_field, o.gt_field
            )));
        }
        *pred_weight.entry(&o.pred_field).or_insert(0) += o.weight;
        *gt_weight.entry(&o.gt_field).or_insert(0) += o.weight;
        pred_spans
            .entry(&o.pred_field)
            .or_default()
            .insert(&o.gt_field);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for o in occurrences {
        let w = o.weight as f64;
        let score = if pred_spans[o.pred_field.as_str()].len() >= 2 {
            0.0
        } else {
            pred_weight[o.pred_field.as_str()] as f64 / gt_weight[o.gt_field.as_str()] as f64
        };
        num += w * score;
        den += w;
    }
    Ok(num / den)
}

/// Aligns variable occurrences between two parsers that were built over the
/// same template skeletons: templates pair by wildcard form, variables pair
/// positionally. `leaf_weight` gives per ground-truth leaf how many lines it
/// matched; zero-weight templates are skipped.
pub fn align_occurrences(
    pred: &Bundle,
    gt: &Bundle,
    leaf_weight: &BTreeMap<u32, u64>,
) -> Result<Vec<OccurrenceAssignment>> {
    let mut by_form: HashMap<String, crate::model::Template> = HashMap::new();
    for t in pred.tree.templates() {
        by_form.insert(t.wildcard_form(), t);
    }
    let mut out = Vec::new();
    for gt_t in gt.tree.templates() {
        let weight = leaf_weight.get(&gt_t.leaf).copied().unwrap_or(0);
        if weight == 0 {
            continue;
        }
        let form = gt_t.wildcard_form();
        let pred_t = by_form.get(&form).ok_or_else(|| {
            Error::Input(format!("no predicted template aligns with {form:?}"))
        })?;
        let pred_vars: Vec<u32> = pred_t
            .node_ids
            .iter()
            .zip(&pred_t.tokens)
            .filter(|(_, tok)| tok.is_variable())
            .map(|(id, _)| *id)
            .collect();
        let gt_vars: Vec<u32> = gt_t
            .node_ids
            .iter()
            .zip(&gt_t.tokens)
            .filter(|(_, tok)| tok.is_variable())
            .map(|(id, _)| *id)
            .collect();
        if pred_vars.len() != gt_vars.len() {
            return Err(Error::Input(format!(
                "variable counts differ for template {form:?}"
            )));
        }
        for (p, g) in pred_vars.iter().zip(&gt_vars) {
            let name = |tree: &ParseTree, id: u32| -> String {
                tree.node(id)
                    .ok()
                    .and_then(|n| n.field_name.clone())
                    .unwrap_or_else(|| format!("${id}"))
            };
            out.push(OccurrenceAssignment {
                pred_field: name(&pred.tree, *p),
                gt_field: name(&gt.tree, *g),
                weight,
            });
        }
    }
    Ok(out)
}

/// Fraction of assigned attributes that ground truth also assigns, per
/// field, weighted by field occurrence frequency. Fields both sides leave
/// unmapped count as correct.
pub fn mapping_accuracy(
    pred: &BTreeMap<String, BTreeSet<String>>,
    gt: &BTreeMap<String, BTreeSet<String>>,
    weights: &BTreeMap<String, u64>,
) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("mapping accuracy over zero fields".into()));
    }
    let pred_fields: BTreeSet<&String> = pred.keys().collect();
    let gt_fields: BTreeSet<&String> = gt.keys().collect();
    if pred_fields != gt_fields {
        return Err(Error::Input(
            "mapping accuracy requires identical field inventories".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (field, pred_attrs) in pred {
        let w = *weights
            .get(field)
            .ok_or_else(|| Error::Input(format!("no weight for field {field:?}")))?
            as f64;
        let gt_attrs = &gt[field];
        let score = if pred_attrs.is_empty() && gt_attrs.is_empty() {
            1.0
        } else if pred_attrs.is_empty() {
            0.0
        } else {
            pred_attrs.intersection(gt_attrs).count() as f64 / pred_attrs.len() as f64
        };
        num += w * score;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::Input("all field weights are zero".into()));
    }
    Ok(num / den)
}
