//! Naive reference implementations of every scoring formula, written
//! independently of the library (different algorithms, different data
//! layout). The acceptance suite checks the production metrics against
//! these on exhaustively generated small instances.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

/// Plain memoized recursion; the library uses an iterative row DP.
pub fn oracle_levenshtein(a: &[char], b: &[char]) -> usize {
    fn go(
        a: &[char],
        b: &[char],
        i: usize,
        j: usize,
        memo: &mut BTreeMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            let del = go(a, b, i + 1, j, memo);
            let ins = go(a, b, i, j + 1, memo);
            let sub = go(a, b, i + 1, j + 1, memo);
            1 + del.min(ins).min(sub)
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut BTreeMap::new())
}

pub fn oracle_template_similarity(pred: &str, gt: &str) -> f64 {
    let a: Vec<char> = pred.chars().collect();
    let b: Vec<char> = gt.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    1.0 - oracle_levenshtein(&a, &b) as f64 / a.len().max(b.len()) as f64
}

/// One scored line: which predicted group it fell into (None = the parser
/// failed on it), which ground-truth group it belongs to, and both labels.
#[derive(Debug, Clone)]
pub struct OracleLine {
    pub ordinal: u64,
    pub pred_group: Option<String>,
    pub pred_label: Option<String>,
    pub gt_group: String,
    pub gt_label: String,
}

fn group_members<'a>(
    lines: &'a [OracleLine],
    side: impl Fn(&OracleLine) -> Option<&str> + 'a,
) -> BTreeMap<String, BTreeSet<u64>> {
    let mut out: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
    for l in lines {
        if let Some(g) = side(l) {
            out.entry(g.to_string()).or_default().insert(l.ordinal);
        }
    }
    out
}

pub fn oracle_pgs(lines: &[OracleLine]) -> f64 {
    let pred = group_members(lines, |l| l.pred_group.as_deref());
    let gt = group_members(lines, |l| Some(&l.gt_group));
    let mut total = 0.0;
    for l in lines {
        let score = match &l.pred_group {
            None => 0.0,
            Some(pg) => {
                let members = &pred[pg];
                let mut gt_groups_hit = BTreeSet::new();
                for other in lines {
                    if members.contains(&other.ordinal) {
                        gt_groups_hit.insert(other.gt_group.clone());
                    }
                }
                if gt_groups_hit.len() >= 2 {
                    0.0
                } else {
                    members.len() as f64 / gt[&l.gt_group].len() as f64
                }
            }
        };
        total += score;
    }
    total / lines.len() as f64
}

pub fn oracle_ga(lines: &[OracleLine]) -> f64 {
    let pred = group_members(lines, |l| l.pred_group.as_deref());
    let gt = group_members(lines, |l| Some(&l.gt_group));
    let mut correct = 0usize;
    for l in lines {
        if let Some(pg) = &l.pred_group {
            if pred[pg] == gt[&l.gt_group] {
                correct += 1;
            }
        }
    }
    correct as f64 / lines.len() as f64
}

pub fn oracle_pa(lines: &[OracleLine]) -> f64 {
    let mut correct = 0usize;
    for l in lines {
        if l.pred_label.as_deref() == Some(&l.gt_label) {
            correct += 1;
        }
    }
    correct as f64 / lines.len() as f64
}

/// One template variable occurrence with its per-line frequency.
#[derive(Debug, Clone)]
pub struct OracleOccurrence {
    pub pred_field: String,
    pub gt_field: String,
    pub weight: u64,
}

/// Unrolls occurrences into per-line instances and scores them exactly like
/// line grouping. This is the "weighted by frequency" reading made literal.
pub fn oracle_sgs(occ: &[OracleOccurrence]) -> f64 {
    let mut instances: Vec<OracleLine> = Vec::new();
    let mut ordinal = 0u64;
    for (idx, o) in occ.iter().enumerate() {
        for _ in 0..o.weight {
            instances.push(OracleLine {
                ordinal,
                pred_group: Some(o.pred_field.clone()),
                pred_label: Some(o.pred_field.clone()),
                gt_group: o.gt_field.clone(),
                gt_label: o.gt_field.clone(),
            });
            ordinal += 1;
        }
        let _ = idx;
    }
    let pred = group_members(&instances, |l| l.pred_group.as_deref());
    let gt = group_members(&instances, |l| Some(&l.gt_group));
    let mut total = 0.0;
    for l in &instances {
        let pg = l.pred_group.as_ref().expect("instances always named");
        let members = &pred[pg];
        let mut gt_hit = BTreeSet::new();
        for other in &instances {
            if members.contains(&other.ordinal) {
                gt_hit.insert(other.gt_group.clone());
            }
        }
        let score = if gt_hit.len() >= 2 {
            0.0
        } else {
            members.len() as f64 / gt[&l.gt_group].len() as f64
        };
        total += score;
    }
    total / instances.len() as f64
}

/// Per-field mapping score, weighted by how often the field occurs.
pub fn oracle_mapping_accuracy(
    pred: &BTreeMap<String, BTreeSet<String>>,
    gt: &BTreeMap<String, BTreeSet<String>>,
    weights: &BTreeMap<String, u64>,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (field, pred_attrs) in pred {
        let gt_attrs = &gt[field];
        let w = weights[field] as f64;
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
    num / den
}
