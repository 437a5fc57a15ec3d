//! Learning the parse tree from raw lines. Unmatched lines are buffered,
//! clustered in two passes (shared tree prefix, then density over
//! description embeddings), and the densest cluster is confirmed and turned
//! into a template proposal. Proposals are scored by corpus evidence
//! (coverage of the cluster, spillover onto already-parsed lines), overlap
//! is resolved by replacement or narrowing, and every accepted template
//! immediately drains the lines it matches from the buffer.
//!
//! Rounds are strictly sequential: each accepted template becomes few-shot
//! context for the next proposal.

mod dbscan;

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::gateway::{
    cosine_distance, examples_block, extract_json, feedback_block, majority_vote, repair_loop,
    ExampleStore, Gateway, SamplingSpec, StoredExample,
};
use crate::matcher::Matcher;
use crate::model::{NodeId, ParseTree, Token};

pub const DEFAULT_BUFFER_CAP: usize = 2500;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_MIN_SAMPLES: usize = 2;

/// Lines shown verbatim inside a proposal prompt; scoring always uses the
/// whole cluster.
const PROMPT_SAMPLE_CAP: usize = 12;

#[derive(Debug, Clone)]
pub struct InductionConfig {
    pub buffer_cap: usize,
    pub epsilon: f64,
    pub min_samples: usize,
    pub sampling: SamplingSpec,
    /// Repair budget for confirmation, comparison, and narrowing loops.
    pub max_repairs: usize,
    /// Proposal attempts per cluster before it is deferred.
    pub proposal_rounds: usize,
    /// Overlapping lines shown when asking whether two formats are the same.
    pub overlap_sample: usize,
    pub fewshot_k: usize,
    pub use_fewshot: bool,
}

impl Default for InductionConfig {
    fn default() -> Self {
        InductionConfig {
            buffer_cap: DEFAULT_BUFFER_CAP,
            epsilon: DEFAULT_EPSILON,
            min_samples: DEFAULT_MIN_SAMPLES,
            sampling: SamplingSpec::new(3, 0.7).expect("static spec is valid"),
            max_repairs: 3,
            proposal_rounds: 3,
            overlap_sample: 5,
            fewshot_k: 5,
            use_fewshot: true,
        }
    }
}

/// The raw corpus with the current match assignment. Ordinals are 1-based
/// line numbers.
#[derive(Debug, Clone)]
pub struct Corpus {
    lines: Vec<(u64, Vec<u8>)>,
    assigned: BTreeMap<u64, NodeId>,
}

impl Corpus {
    pub fn new(lines: &[Vec<u8>]) -> Self {
        Corpus {
            lines: lines
                .iter()
                .enumerate()
                .map(|(i, l)| (i as u64 + 1, l.clone()))
                .collect(),
            assigned: BTreeMap::new(),
        }
    }

    /// Recomputes the full line-to-leaf assignment under `tree`.
    pub fn rescan(&mut self, tree: &ParseTree) -> Result<()> {
        let matcher = Matcher::new(tree)?;
        self.assigned.clear();
        for (ord, line) in &self.lines {
            if let Some(leaf) = matcher.match_line(line).leaf() {
                self.assigned.insert(*ord, leaf);
            }
        }
        Ok(())
    }

    pub fn matched_count(&self) -> usize {
        self.assigned.len()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn assigned(&self) -> &BTreeMap<u64, NodeId> {
        &self.assigned
    }

    pub fn line(&self, ordinal: u64) -> &[u8] {
        &self.lines[(ordinal - 1) as usize].1
    }

    fn unmatched(&self) -> impl Iterator<Item = &(u64, Vec<u8>)> {
        self.lines
            .iter()
            .filter(|(ord, line)| !self.assigned.contains_key(ord) && !line.is_empty())
    }
}

/// Window of unmatched lines awaiting induction.
#[derive(Debug, Clone)]
pub struct LineBuffer {
    cap: usize,
    lines: Vec<(u64, Vec<u8>)>,
}

impl LineBuffer {
    pub fn new(cap: usize) -> Self {
        LineBuffer { cap, lines: Vec::new() }
    }

    /// Rebuilds the window from the corpus: the first `cap` unmatched
    /// nonempty lines in ordinal order.
    pub fn fill(&mut self, corpus: &Corpus) {
        self.lines.clear();
        self.lines
            .extend(corpus.unmatched().take(self.cap).cloned());
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn lines(&self) -> &[(u64, Vec<u8>)] {
        &self.lines
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    /// Member ordinals, ascending.
    pub members: Vec<u64>,
    /// Deepest tree path every member walks before diverging.
    pub anchor: Vec<NodeId>,
    pub centroid: Vec<f32>,
    pub mean_pairwise: f64,
}

impl Cluster {
    /// Stable identity across rounds: the smallest member ordinal.
    pub fn key(&self) -> u64 {
        self.members[0]
    }

    pub fn density(&self) -> f64 {
        if self.mean_pairwise == 0.0 {
            f64::INFINITY
        } else {
            self.members.len() as f64 / self.mean_pairwise
        }
    }
}

fn build_cluster(members: Vec<u64>, anchor: Vec<NodeId>, embeddings: &[(u64, Vec<f32>)]) -> Cluster {
    let vecs: Vec<&Vec<f32>> = members
        .iter()
        .map(|ord| {
            &embeddings
                .iter()
                .find(|(o, _)| o == ord)
                .expect("member was embedded")
                .1
        })
        .collect();
    let dim = vecs[0].len();
    let mut centroid = vec![0.0f32; dim];
    for v in &vecs {
        for (c, x) in centroid.iter_mut().zip(v.iter()) {
            *c += x;
        }
    }
    for c in &mut centroid {
        *c /= vecs.len() as f32;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            total += cosine_distance(vecs[i], vecs[j]);
            pairs += 1;
        }
    }
    Cluster {
        members,
        anchor,
        centroid,
        mean_pairwise: if pairs == 0 { 0.0 } else { total / pairs as f64 },
    }
}

/// Two-pass clustering: lines first split by the longest tree prefix they
/// share with existing templates, then density-clustered over description
/// embeddings within each prefix group. Noise becomes singletons.
pub fn cluster_buffer(
    gateway: &Gateway,
    tree: &ParseTree,
    buffer: &LineBuffer,
    epsilon: f64,
    min_samples: usize,
) -> Result<Vec<Cluster>> {
    if buffer.is_empty() {
        return Err(Error::EmptyInput("clustering an empty buffer".into()));
    }
    let matcher = Matcher::new(tree)?;
    // Descriptions and embeddings are cached by line text, so repeated
    // rounds over the same buffer cost no new model calls.
    let mut embeddings: Vec<(u64, Vec<f32>)> = Vec::with_capacity(buffer.len());
    let mut coarse: BTreeMap<Vec<NodeId>, Vec<u64>> = BTreeMap::new();
    for (ord, line) in buffer.lines() {
        let text = String::from_utf8_lossy(line);
        let description = gateway.describe("line", &text)?;
        embeddings.push((*ord, gateway.embed(&description)?));
        coarse
            .entry(matcher.longest_prefix(line))
            .or_default()
            .push(*ord);
    }
    let mut clusters = Vec::new();
    for (anchor, members) in coarse {
        let vecs: Vec<&Vec<f32>> = members
            .iter()
            .map(|ord| {
                &embeddings
                    .iter()
                    .find(|(o, _)| o == ord)
                    .expect("member was embedded")
                    .1
            })
            .collect();
        let labels = dbscan::dbscan(members.len(), epsilon, min_samples, |i, j| {
            cosine_distance(vecs[i], vecs[j])
        });
        let mut groups: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        let mut noise: Vec<u64> = Vec::new();
        for (idx, label) in labels.iter().enumerate() {
            match label {
                Some(c) => groups.entry(*c).or_default().push(members[idx]),
                None => noise.push(members[idx]),
            }
        }
        for (_, group) in groups {
            clusters.push(build_cluster(group, anchor.clone(), &embeddings));
        }
        for ord in noise {
            clusters.push(build_cluster(vec![ord], anchor.clone(), &embeddings));
        }
    }
    clusters.sort_by_key(|c| c.key());
    Ok(clusters)
}

/// Densest cluster first; zero mean distance counts as maximal density.
/// Ties fall to the larger cluster, then the earliest ordinal.
pub fn select_cluster(clusters: &[Cluster]) -> Result<&Cluster> {
    let refs: Vec<&Cluster> = clusters.iter().collect();
    select_cluster_ref(&refs)
}

fn numbered_lines(lines: &[(u64, Vec<u8>)], cap: usize) -> String {
    let mut out = String::new();
    for (i, (_, line)) in lines.iter().take(cap).enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, String::from_utf8_lossy(line)));
    }
    out
}

/// Asks whether the cluster really is one format. Returns the confirmed
/// member ordinals: everything on "ALL", a validated nonempty subset
/// otherwise.
pub fn confirm_cluster(
    gateway: &Gateway,
    lines: &[(u64, Vec<u8>)],
    cfg: &InductionConfig,
) -> Result<Vec<u64>> {
    if lines.is_empty() {
        return Err(Error::EmptyInput("confirming an empty cluster".into()));
    }
    let base = format!(
        "## TASK: confirm-cluster\n\
         These log lines were grouped as one format. If a single template can parse \
         them all, answer exactly ALL. Otherwise answer SUBSET: followed by the \
         positions that do share one format, comma-separated (example: SUBSET: 1,3,4).\n{}",
        numbered_lines(lines, lines.len())
    );
    let positions = repair_loop(
        cfg.max_repairs,
        |diags| {
            let prompt = format!("{base}{}", feedback_block(diags));
            let samples = gateway.complete(&prompt, &cfg.sampling)?;
            let mut parsed: Vec<Vec<usize>> = Vec::new();
            let mut last_err: Option<Error> = None;
            for s in &samples {
                match parse_confirmation(s, lines.len()) {
                    Ok(p) => parsed.push(p),
                    Err(e) => last_err = Some(e),
                }
            }
            if parsed.is_empty() {
                return Err(last_err.expect("all samples failed"));
            }
            let winner = majority_vote(&parsed, |p| {
                p.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            })?;
            Ok(winner.clone())
        },
        |positions: &Vec<usize>| {
            if positions.is_empty() {
                Err("the confirmed subset is empty; name at least one position".into())
            } else {
                Ok(())
            }
        },
    )?;
    Ok(positions.iter().map(|p| lines[p - 1].0).collect())
}

fn parse_confirmation(response: &str, len: usize) -> Result<Vec<usize>> {
    let text = response.trim();
    if text.eq_ignore_ascii_case("all") {
        return Ok((1..=len).collect());
    }
    let rest = text
        .strip_prefix("SUBSET:")
        .or_else(|| text.strip_prefix("subset:"))
        .ok_or_else(|| Error::Parse(format!("expected ALL or SUBSET:, got {text:?}")))?;
    let mut out = BTreeSet::new();
    for part in rest.split(',') {
        let p: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad position {part:?}")))?;
        if p == 0 || p > len {
            return Err(Error::Parse(format!(
                "position {p} outside 1..={len}; only listed lines may be named"
            )));
        }
        out.insert(p);
    }
    Ok(out.into_iter().collect())
}

/// A scored proposal: the token sequence, one observed example value per
/// token, and its corpus evidence.
#[derive(Debug, Clone)]
pub struct CandidateTemplate {
    pub tokens: Vec<Token>,
    pub examples: Vec<Option<String>>,
    /// Cluster lines the template parses.
    pub coverage: usize,
    pub covered: Vec<u64>,
    /// Already-parsed lines the template also matches. Assignment may not
    /// actually move (the tie-break favours constant bytes), but any overlap
    /// means the proposal blurs into an existing format and must be resolved.
    pub spillover: usize,
    pub overlapped: Vec<(u64, NodeId)>,
}

#[derive(Debug, Deserialize)]
struct TokenDoc {
    kind: String,
    #[serde(default)]
    literal: Option<String>,
    #[serde(default)]
    pattern: Option<String>,
    #[serde(default)]
    sep: String,
    #[serde(default)]
    example: Option<String>,
}

fn parse_tokens(response: &str) -> Result<(Vec<Token>, Vec<Option<String>>)> {
    let value = extract_json(response)
        .ok_or_else(|| Error::Parse("template answer contains no JSON".into()))?;
    let docs: Vec<TokenDoc> = serde_json::from_value(
        value
            .get("tokens")
            .cloned()
            .ok_or_else(|| Error::Parse("template answer lacks \"tokens\"".into()))?,
    )
    .map_err(|e| Error::Parse(format!("malformed token list: {e}")))?;
    if docs.is_empty() {
        return Err(Error::Parse("template answer has zero tokens".into()));
    }
    let mut tokens = Vec::with_capacity(docs.len());
    let mut examples = Vec::with_capacity(docs.len());
    for (i, d) in docs.into_iter().enumerate() {
        let token = match d.kind.as_str() {
            "constant" => {
                let literal = d.literal.as_deref().ok_or_else(|| {
                    Error::Parse(format!("token {i}: constant lacks literal"))
                })?;
                Token::constant(literal, d.sep.as_str())
            }
            "variable" => {
                let pattern = d.pattern.as_deref().ok_or_else(|| {
                    Error::Parse(format!("token {i}: variable lacks pattern"))
                })?;
                Token::variable(pattern, d.sep.as_str())
            }
            other => return Err(Error::Parse(format!("token {i}: unknown kind {other:?}"))),
        };
        token.validate(i)?;
        examples.push(d.example.filter(|_| token.is_variable()));
        tokens.push(token);
    }
    Ok((tokens, examples))
}

/// Evidence for one token sequence: how many cluster lines it parses and
/// which already-assigned lines it also matches. The candidate is tested in
/// isolation so that overlap is visible even when the assignment tie-break
/// would keep every line on its current leaf.
pub fn score_candidate(
    corpus: &Corpus,
    cluster: &[(u64, Vec<u8>)],
    tokens: Vec<Token>,
    examples: Vec<Option<String>>,
) -> Result<CandidateTemplate> {
    let mut solo = ParseTree::new();
    solo.insert_template(&tokens)?;
    let matcher = Matcher::new(&solo)?;
    let mut covered = Vec::new();
    for (ord, line) in cluster {
        if matcher.match_line(line).is_match() {
            covered.push(*ord);
        }
    }
    let mut overlapped = Vec::new();
    for (ord, old_leaf) in corpus.assigned() {
        if matcher.match_line(corpus.line(*ord)).is_match() {
            overlapped.push((*ord, *old_leaf));
        }
    }
    Ok(CandidateTemplate {
        tokens,
        examples,
        coverage: covered.len(),
        covered,
        spillover: overlapped.len(),
        overlapped,
    })
}

const REGEX_RULES: &str = "Variables carry a regex in \"pattern\" (character classes, \
escapes, quantifiers, alternation, and non-capturing groups only; no backreferences, \
no lookaround) plus one observed \"example\" value. Constants carry the exact \
\"literal\". Every token carries its trailing separator bytes in \"sep\".";

/// Proposes a template for a confirmed cluster. Each round draws
/// self-consistency samples, scores every parseable one against the corpus,
/// and keeps the best (coverage desc, spillover asc, earliest sample).
/// Rounds repeat with feedback until a sample covers at least one line.
pub fn propose_template(
    gateway: &Gateway,
    corpus: &Corpus,
    cluster: &[(u64, Vec<u8>)],
    fewshot: &str,
    cfg: &InductionConfig,
) -> Result<CandidateTemplate> {
    if cluster.is_empty() {
        return Err(Error::EmptyInput("proposing for an empty cluster".into()));
    }
    let base = format!(
        "## TASK: propose-template\n\
         Write one template that parses every sample line as a token sequence of \
         constants and variables. {REGEX_RULES}\n\
         Answer with JSON {{\"tokens\": [{{\"kind\": \"constant\", \"literal\": \"...\", \
         \"sep\": \" \"}}, {{\"kind\": \"variable\", \"pattern\": \"...\", \"sep\": \"\", \
         \"example\": \"...\"}}]}}.\nSamples:\n{}{fewshot}",
        numbered_lines(cluster, PROMPT_SAMPLE_CAP)
    );
    let result = repair_loop(
        cfg.proposal_rounds,
        |diags| {
            let prompt = format!("{base}{}", feedback_block(diags));
            let samples = gateway.complete(&prompt, &cfg.sampling)?;
            let mut best: Option<CandidateTemplate> = None;
            let mut last_err: Option<Error> = None;
            for s in &samples {
                let candidate = parse_tokens(s).and_then(|(tokens, examples)| {
                    score_candidate(corpus, cluster, tokens, examples)
                });
                match candidate {
                    Ok(c) => {
                        let better = match &best {
                            None => true,
                            Some(b) => {
                                (c.coverage, std::cmp::Reverse(c.spillover))
                                    > (b.coverage, std::cmp::Reverse(b.spillover))
                            }
                        };
                        if better {
                            best = Some(c);
                        }
                    }
                    Err(e) if e.is_repairable() => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            match best {
                Some(c) if c.coverage > 0 => Ok(c),
                Some(_) => Err(Error::ZeroCoverage(format!(
                    "no proposed template matched any of the {} cluster lines",
                    cluster.len()
                ))),
                None => Err(last_err.expect("all samples failed to parse")),
            }
        },
        |_c| Ok(()),
    );
    match result {
        Err(Error::RepairExhausted { last, .. }) if last.contains("matched any of the") => {
            Err(Error::ZeroCoverage(last))
        }
        other => other,
    }
}

/// What to do with a candidate that steals lines from existing templates.
#[derive(Debug, Clone)]
pub enum Resolution {
    /// No overlap; insert as-is.
    Accept(CandidateTemplate),
    /// The old templates are redundant specializations: retire them, then
    /// insert the candidate. Verified to never shrink the matched set.
    ReplaceOld {
        candidate: CandidateTemplate,
        removed: Vec<NodeId>,
    },
    /// The formats differ; the candidate was narrowed until it no longer
    /// touches other templates' lines.
    Narrowed(CandidateTemplate),
}

fn wildcard_of(tokens: &[Token]) -> String {
    let mut tree = ParseTree::new();
    let leaf = tree
        .insert_template(tokens)
        .expect("candidate tokens validated earlier")
        .leaf;
    tree.template(leaf).expect("leaf exists").wildcard_form()
}

/// Checks whether retiring `removed` and inserting the candidate keeps
/// every currently-assigned line matched.
fn replacement_keeps_matches(
    tree: &ParseTree,
    corpus: &Corpus,
    candidate: &CandidateTemplate,
    removed: &[NodeId],
) -> Result<bool> {
    let mut next = tree.clone();
    for leaf in removed {
        next.remove_template(*leaf)?;
    }
    next.insert_template(&candidate.tokens)?;
    let matcher = Matcher::new(&next)?;
    for ord in corpus.assigned().keys() {
        if !matcher.match_line(corpus.line(*ord)).is_match() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Decides the fate of an overlapping candidate: ask the model whether the
/// stolen lines are really the same format (replace the old leaves) or not
/// (narrow the candidate until spillover reaches zero).
pub fn resolve_overlap(
    gateway: &Gateway,
    tree: &ParseTree,
    corpus: &Corpus,
    candidate: CandidateTemplate,
    cluster: &[(u64, Vec<u8>)],
    cfg: &InductionConfig,
) -> Result<Resolution> {
    if candidate.spillover == 0 {
        return Ok(Resolution::Accept(candidate));
    }
    let old_leaves: BTreeSet<NodeId> = candidate.overlapped.iter().map(|(_, l)| *l).collect();
    let mut old_forms = String::new();
    for leaf in &old_leaves {
        old_forms.push_str(&format!("- {}\n", tree.template(*leaf)?.wildcard_form()));
    }
    let sample: Vec<(u64, Vec<u8>)> = candidate
        .overlapped
        .iter()
        .take(cfg.overlap_sample)
        .map(|(ord, _)| (*ord, corpus.line(*ord).to_vec()))
        .collect();
    let base = format!(
        "## TASK: compare-formats\n\
         A new template would also capture lines currently parsed by existing \
         templates.\nNew template: {}\nExisting templates:\n{old_forms}\
         Overlapping lines:\n{}\
         If the new template describes the same log format and the existing ones are \
         redundant specializations of it, answer exactly SAME. If these are genuinely \
         different formats, answer exactly DIFFERENT.\n",
        wildcard_of(&candidate.tokens),
        numbered_lines(&sample, sample.len()),
    );
    let verdict = repair_loop(
        cfg.max_repairs,
        |diags| {
            let prompt = format!("{base}{}", feedback_block(diags));
            let samples = gateway.complete(&prompt, &cfg.sampling)?;
            let answers: Vec<String> = samples.iter().map(|s| s.trim().to_uppercase()).collect();
            Ok(majority_vote(&answers, |a| a.clone())?.clone())
        },
        |answer: &String| match answer.as_str() {
            "SAME" | "DIFFERENT" => Ok(()),
            other => Err(format!("answer SAME or DIFFERENT, not {other:?}")),
        },
    )?;
    if verdict == "SAME" {
        let removed: Vec<NodeId> = old_leaves.iter().copied().collect();
        if replacement_keeps_matches(tree, corpus, &candidate, &removed)? {
            return Ok(Resolution::ReplaceOld { candidate, removed });
        }
        // The generalization claim failed the evidence check: narrowing is
        // the safe fallback.
    }
    let narrowed = narrow_candidate(gateway, corpus, &candidate, cluster, cfg)?;
    Ok(Resolution::Narrowed(narrowed))
}

fn narrow_candidate(
    gateway: &Gateway,
    corpus: &Corpus,
    candidate: &CandidateTemplate,
    cluster: &[(u64, Vec<u8>)],
    cfg: &InductionConfig,
) -> Result<CandidateTemplate> {
    let must: Vec<(u64, Vec<u8>)> = cluster
        .iter()
        .filter(|(ord, _)| candidate.covered.contains(ord))
        .cloned()
        .collect();
    let must_not: Vec<(u64, Vec<u8>)> = candidate
        .overlapped
        .iter()
        .take(cfg.overlap_sample)
        .map(|(ord, _)| (*ord, corpus.line(*ord).to_vec()))
        .collect();
    let tokens_json =
        serde_json::to_string(&candidate.tokens).expect("tokens serialize");
    let base = format!(
        "## TASK: narrow-template\n\
         This template also captures lines that belong to a different format. \
         Narrow its variable patterns so it still parses every MUST line and none \
         of the MUST NOT lines. {REGEX_RULES}\n\
         Current tokens: {tokens_json}\n\
         MUST match:\n{}MUST NOT match:\n{}\
         Answer with the full corrected JSON {{\"tokens\": [...]}}.\n",
        numbered_lines(&must, PROMPT_SAMPLE_CAP),
        numbered_lines(&must_not, PROMPT_SAMPLE_CAP),
    );
    repair_loop(
        cfg.max_repairs,
        |diags| {
            let prompt = format!("{base}{}", feedback_block(diags));
            let samples = gateway.complete(&prompt, &cfg.sampling)?;
            let mut best: Option<CandidateTemplate> = None;
            let mut last_err: Option<Error> = None;
            for s in &samples {
                match parse_tokens(s).and_then(|(tokens, examples)| {
                    score_candidate(corpus, cluster, tokens, examples)
                }) {
                    Ok(c) => {
                        let better = match &best {
                            None => true,
                            Some(b) => {
                                (std::cmp::Reverse(c.spillover), c.coverage)
                                    > (std::cmp::Reverse(b.spillover), b.coverage)
                            }
                        };
                        if better {
                            best = Some(c);
                        }
                    }
                    Err(e) if e.is_repairable() => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            best.ok_or_else(|| last_err.expect("all samples failed to parse"))
        },
        |c: &CandidateTemplate| {
            if c.spillover > 0 {
                Err(format!(
                    "still captures {} lines from other formats",
                    c.spillover
                ))
            } else if c.coverage == 0 {
                Err("no longer matches any cluster line".into())
            } else {
                Ok(())
            }
        },
    )
}

#[derive(Debug)]
pub struct InductionOutcome {
    pub tree: ParseTree,
    /// Cluster keys that ran out of proposal budget; their lines stay
    /// unparsed.
    pub deferred: Vec<u64>,
    pub rounds: usize,
    pub replaced: usize,
    pub narrowed: usize,
}

fn commit_candidate(tree: &mut ParseTree, candidate: &CandidateTemplate) -> Result<NodeId> {
    let leaf = tree.insert_template(&candidate.tokens)?.leaf;
    let path = tree.path(leaf)?;
    for (id, example) in path.iter().zip(&candidate.examples) {
        if let Some(e) = example {
            if tree.node(*id)?.example.is_none() {
                tree.set_example(*id, Some(e.clone()))?;
            }
        }
    }
    Ok(leaf)
}

/// Full induction over a corpus: rounds of cluster, confirm, propose,
/// resolve, commit, drain; `checkpoint` runs after every accepted template
/// so an interrupted run can resume from the last good tree.
pub fn induce(
    gateway: &Gateway,
    lines: &[Vec<u8>],
    cfg: &InductionConfig,
    store: &mut ExampleStore,
    checkpoint: impl FnMut(&ParseTree) -> Result<()>,
) -> Result<InductionOutcome> {
    induce_from(gateway, ParseTree::new(), lines, cfg, store, checkpoint)
}

/// Resumes induction from a checkpointed tree: lines it already matches
/// count as assigned and only the remainder is clustered.
pub fn induce_from(
    gateway: &Gateway,
    mut tree: ParseTree,
    lines: &[Vec<u8>],
    cfg: &InductionConfig,
    store: &mut ExampleStore,
    mut checkpoint: impl FnMut(&ParseTree) -> Result<()>,
) -> Result<InductionOutcome> {
    let mut corpus = Corpus::new(lines);
    corpus.rescan(&tree)?;
    let mut buffer = LineBuffer::new(cfg.buffer_cap);
    let mut deferred: BTreeSet<u64> = BTreeSet::new();
    let mut rounds = 0usize;
    let mut replaced = 0usize;
    let mut narrowed = 0usize;
    let round_cap = lines.len() * 2 + 16;
    loop {
        rounds += 1;
        if rounds > round_cap {
            return Err(Error::Integrity(format!(
                "induction exceeded {round_cap} rounds without converging"
            )));
        }
        buffer.fill(&corpus);
        if buffer.is_empty() {
            break;
        }
        let clusters = cluster_buffer(gateway, &tree, &buffer, cfg.epsilon, cfg.min_samples)?;
        let eligible: Vec<&Cluster> = clusters
            .iter()
            .filter(|c| !deferred.contains(&c.key()))
            .collect();
        if eligible.is_empty() {
            break;
        }
        let chosen = select_cluster_ref(&eligible)?;
        let key = chosen.key();
        let member_lines: Vec<(u64, Vec<u8>)> = chosen
            .members
            .iter()
            .map(|ord| (*ord, corpus.line(*ord).to_vec()))
            .collect();
        let confirmed_ords = match confirm_cluster(gateway, &member_lines, cfg) {
            Ok(c) => c,
            Err(Error::RepairExhausted { .. }) => {
                deferred.insert(key);
                continue;
            }
            Err(e) => return Err(e),
        };
        let confirmed: Vec<(u64, Vec<u8>)> = member_lines
            .iter()
            .filter(|(ord, _)| confirmed_ords.contains(ord))
            .cloned()
            .collect();
        // Few-shot context keys on the first confirmed line's description.
        let anchor_text = String::from_utf8_lossy(&confirmed[0].1).to_string();
        let anchor_desc = gateway.describe("line", &anchor_text)?;
        let anchor_embedding = gateway.embed(&anchor_desc)?;
        let fewshot = if cfg.use_fewshot {
            examples_block(&store.nearest(&anchor_embedding, cfg.fewshot_k))
        } else {
            String::new()
        };
        let candidate =
            match propose_template(gateway, &corpus, &confirmed, &fewshot, cfg) {
                Ok(c) => c,
                Err(Error::RepairExhausted { .. }) | Err(Error::ZeroCoverage(_)) => {
                    deferred.insert(key);
                    continue;
                }
                Err(e) => return Err(e),
            };
        let resolution =
            match resolve_overlap(gateway, &tree, &corpus, candidate, &confirmed, cfg) {
                Ok(r) => r,
                Err(Error::RepairExhausted { .. }) => {
                    deferred.insert(key);
                    continue;
                }
                Err(e) => return Err(e),
            };
        let accepted = match resolution {
            Resolution::Accept(c) => c,
            Resolution::ReplaceOld { candidate, removed } => {
                for leaf in removed {
                    tree.remove_template(leaf)?;
                }
                replaced += 1;
                candidate
            }
            Resolution::Narrowed(c) => {
                narrowed += 1;
                c
            }
        };
        let before = corpus.matched_count();
        commit_candidate(&mut tree, &accepted)?;
        tree.verify_structure()?;
        corpus.rescan(&tree)?;
        if corpus.matched_count() < before {
            return Err(Error::Integrity(format!(
                "matched lines fell from {before} to {} after commit",
                corpus.matched_count()
            )));
        }
        if cfg.use_fewshot {
            store.insert(StoredExample {
                description: anchor_desc,
                embedding: anchor_embedding,
                prompt: String::new(),
                output: serde_json::json!({
                    "tokens": serde_json::from_str::<serde_json::Value>(
                        &serde_json::to_string(&accepted.tokens).expect("tokens serialize")
                    )
                    .expect("round trip")
                })
                .to_string(),
            })?;
        }
        checkpoint(&tree)?;
    }
    Ok(InductionOutcome {
        tree,
        deferred: deferred.into_iter().collect(),
        rounds,
        replaced,
        narrowed,
    })
}

fn select_cluster_ref<'c>(clusters: &[&'c Cluster]) -> Result<&'c Cluster> {
    clusters
        .iter()
        .max_by(|a, b| {
            a.density()
                .partial_cmp(&b.density())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.members.len().cmp(&b.members.len()))
                .then(b.key().cmp(&a.key()))
        })
        .copied()
        .ok_or_else(|| Error::EmptyInput("selecting from zero clusters".into()))
}
