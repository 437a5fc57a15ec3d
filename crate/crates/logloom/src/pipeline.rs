//! End-to-end orchestration: syntax induction, schema naming, taxonomy
//! mapping, each followed by a validation pass, in that fixed order. Every
//! stage boundary (and every accepted template inside induction) writes a
//! checkpoint, so an interrupted run resumes instead of restarting. The
//! orchestrator is single-threaded; stages parallelize internally.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ExampleStore, Gateway, MockProvider, SamplingSpec};
use crate::induce::{induce_from, InductionConfig};
use crate::model::{Bundle, ParseTree};
use crate::naming::{name_bundle, NamingConfig};
use crate::taxonomy::{map_schema, AttributeIndex, MapperConfig};
use crate::validate::{validate_stage, AuditRow, Stage, ValidationConfig};

fn default_buffer_cap() -> usize {
    2500
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_min_samples() -> usize {
    2
}
fn default_fewshot_k() -> usize {
    5
}
fn default_n_samples() -> usize {
    3
}
fn default_temperature() -> f32 {
    0.7
}
fn default_max_repairs() -> usize {
    3
}
fn default_proposal_rounds() -> usize {
    3
}
fn default_overlap_sample() -> usize {
    5
}
fn default_shortlist_k() -> usize {
    50
}
fn default_max_attrs() -> usize {
    1
}
fn default_window() -> usize {
    8
}
fn default_frozen_cap() -> usize {
    8
}
fn default_passes() -> usize {
    1
}
fn default_api_key_env() -> String {
    "LOGLOOM_API_KEY".into()
}
fn default_embedding_dim() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    /// "mock" replays a transcript; "http" talks to an API endpoint.
    pub kind: String,
    pub endpoint: String,
    pub completion_model: String,
    pub embedding_model: String,
    /// Environment variable holding the API key; never stored in config.
    pub api_key_env: String,
    pub embedding_dim: usize,
    pub mock_transcript: Option<PathBuf>,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            kind: "http".into(),
            endpoint: "https://api.openai.com".into(),
            completion_model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-large".into(),
            api_key_env: default_api_key_env(),
            embedding_dim: default_embedding_dim(),
            mock_transcript: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    /// Completion/embedding cache directory; default lives next to the
    /// bundle.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InductionSection {
    pub buffer_cap: usize,
    pub epsilon: f64,
    pub min_samples: usize,
    pub fewshot_k: usize,
    pub n_samples: usize,
    pub temperature: f32,
    pub max_repairs: usize,
    pub proposal_rounds: usize,
    pub overlap_sample: usize,
}

impl Default for InductionSection {
    fn default() -> Self {
        InductionSection {
            buffer_cap: default_buffer_cap(),
            epsilon: default_epsilon(),
            min_samples: default_min_samples(),
            fewshot_k: default_fewshot_k(),
            n_samples: default_n_samples(),
            temperature: default_temperature(),
            max_repairs: default_max_repairs(),
            proposal_rounds: default_proposal_rounds(),
            overlap_sample: default_overlap_sample(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
    pub shortlist_k: usize,
    pub max_attrs: usize,
    pub use_types: bool,
}

impl Default for MappingSection {
    fn default() -> Self {
        MappingSection {
            shortlist_k: default_shortlist_k(),
            max_attrs: default_max_attrs(),
            use_types: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSection {
    pub window: usize,
    pub frozen_cap: usize,
    pub passes: usize,
}

impl Default for ValidationSection {
    fn default() -> Self {
        ValidationSection {
            window: default_window(),
            frozen_cap: default_frozen_cap(),
            passes: default_passes(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub provider: ProviderSection,
    pub cache: CacheSection,
    pub induction: InductionSection,
    pub mapping: MappingSection,
    pub validation: ValidationSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Every numeric knob must be positive; zero silently disables
    /// machinery and is always a mistake in a config file.
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("induction.buffer_cap", self.induction.buffer_cap),
            ("induction.min_samples", self.induction.min_samples),
            ("induction.n_samples", self.induction.n_samples),
            ("induction.max_repairs", self.induction.max_repairs),
            ("induction.proposal_rounds", self.induction.proposal_rounds),
            ("mapping.shortlist_k", self.mapping.shortlist_k),
            ("mapping.max_attrs", self.mapping.max_attrs),
            ("validation.window", self.validation.window),
            ("validation.passes", self.validation.passes),
            ("provider.embedding_dim", self.provider.embedding_dim),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.induction.epsilon > 0.0) {
            return Err(Error::Config("induction.epsilon must be positive".into()));
        }
        if self.induction.temperature < 0.0 {
            return Err(Error::Config(
                "induction.temperature must not be negative".into(),
            ));
        }
        Ok(())
    }

    pub fn sampling(&self) -> Result<SamplingSpec> {
        SamplingSpec::new(self.induction.n_samples, self.induction.temperature)
    }

    pub fn induction_config(&self) -> Result<InductionConfig> {
        Ok(InductionConfig {
            buffer_cap: self.induction.buffer_cap,
            epsilon: self.induction.epsilon,
            min_samples: self.induction.min_samples,
            sampling: self.sampling()?,
            max_repairs: self.induction.max_repairs,
            proposal_rounds: self.induction.proposal_rounds,
            overlap_sample: self.induction.overlap_sample,
            fewshot_k: self.induction.fewshot_k,
            use_fewshot: true,
        })
    }

    pub fn naming_config(&self) -> Result<NamingConfig> {
        Ok(NamingConfig {
            sampling: self.sampling()?,
            max_repairs: self.induction.max_repairs,
            fewshot_k: self.induction.fewshot_k,
            use_fewshot: true,
        })
    }

    pub fn mapper_config(&self) -> Result<MapperConfig> {
        Ok(MapperConfig {
            max_attrs: self.mapping.max_attrs,
            shortlist_k: self.mapping.shortlist_k,
            use_types: self.mapping.use_types,
            fewshot_k: self.induction.fewshot_k,
            sampling: self.sampling()?,
            max_repairs: self.induction.max_repairs,
        })
    }

    pub fn validation_config(&self) -> ValidationConfig {
        ValidationConfig {
            window: self.validation.window,
            frozen_cap: self.validation.frozen_cap,
            passes: self.validation.passes,
            sampling: SamplingSpec::single(),
            max_repairs: self.induction.max_repairs,
        }
    }
}

/// Builds the provider and cache from config plus CLI overrides. A missing
/// API key fails here, before any corpus work starts.
pub fn build_gateway(
    cfg: &RunConfig,
    mock_override: Option<&Path>,
    cache_override: Option<&Path>,
) -> Result<Gateway> {
    let transcript = mock_override.or(cfg.provider.mock_transcript.as_deref());
    let provider: Box<dyn crate::gateway::Provider> = match transcript {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Box::new(MockProvider::from_json(&text)?)
        }
        None => match cfg.provider.kind.as_str() {
            "mock" => {
                return Err(Error::Config(
                    "provider.kind = \"mock\" needs a mock_transcript path".into(),
                ))
            }
            "http" => {
                let key = std::env::var(&cfg.provider.api_key_env).map_err(|_| {
                    Error::Config(format!(
                        "environment variable {} is not set (API key)",
                        cfg.provider.api_key_env
                    ))
                })?;
                Box::new(crate::gateway::HttpProvider::new(
                    cfg.provider.endpoint.clone(),
                    cfg.provider.completion_model.clone(),
                    cfg.provider.embedding_model.clone(),
                    key,
                    cfg.provider.embedding_dim,
                )?)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown provider.kind {other:?} (mock, http)"
                )))
            }
        },
    };
    let cache_dir = cache_override
        .map(Path::to_path_buf)
        .or_else(|| cfg.cache.dir.clone())
        .unwrap_or_else(|| PathBuf::from(".logloom-cache"));
    Gateway::new(provider, &cache_dir)
}

/// The six pipeline stages in their fixed execution order.
pub const STAGE_ORDER: [&str; 6] = [
    "syntax-gen",
    "syntax-validate",
    "schema-gen",
    "schema-validate",
    "map-gen",
    "map-validate",
];

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Skip the three validation stages (ablation).
    pub skip_validation: bool,
    /// Disable few-shot example retrieval (ablation).
    pub no_fewshot: bool,
    /// Continue from the checkpoint next to the bundle path.
    pub resume: bool,
}

/// On-disk resume state: completed stages, the bundle so far, and the
/// few-shot stores that seed later prompts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub completed: Vec<String>,
    pub bundle: serde_json::Value,
    pub induction_store: ExampleStore,
    pub naming_store: ExampleStore,
    pub mapping_store: ExampleStore,
}

impl Checkpoint {
    pub fn fresh() -> Self {
        Checkpoint {
            version: 1,
            ..Checkpoint::default()
        }
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("checkpoint {}: {e}", path.display())))?;
        if ckpt.version != 1 {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Write-then-rename so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn bundle(&self) -> Result<Bundle> {
        if self.bundle.is_null() {
            return Ok(Bundle::new(ParseTree::new()));
        }
        Bundle::from_document(
            &serde_json::to_string(&self.bundle).expect("checkpoint bundle serializes"),
        )
    }

    pub fn set_bundle(&mut self, bundle: &Bundle) {
        self.bundle = serde_json::from_str(&bundle.to_document())
            .expect("bundle document round-trips");
    }
}

/// What a finished run reports back: the bundle plus per-stage summaries
/// and the validation audit trail.
#[derive(Debug)]
pub struct PipelineReport {
    pub bundle: Bundle,
    pub stages_run: Vec<String>,
    pub skipped_resume: Vec<String>,
    pub summary: Vec<String>,
    pub audits: Vec<AuditRow>,
}

fn tag(stage: &str, e: Error) -> Error {
    match e {
        already @ Error::Stage { .. } => already,
        other => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(other),
        },
    }
}

/// Runs the full pipeline over raw lines. `checkpoint_path`, when given,
/// receives a checkpoint at every stage boundary and on every accepted
/// template during induction; with `options.resume` the run continues from
/// it. The returned bundle has passed full verification.
pub fn run_pipeline(
    gateway: &Gateway,
    cfg: &RunConfig,
    lines: &[Vec<u8>],
    index: &AttributeIndex,
    options: RunOptions,
    checkpoint_path: Option<&Path>,
) -> Result<PipelineReport> {
    cfg.check()?;
    let mut state = match (options.resume, checkpoint_path) {
        (true, Some(path)) if path.exists() => Checkpoint::load(path)?,
        _ => Checkpoint::fresh(),
    };
    let mut bundle = state.bundle()?;
    let mut report = PipelineReport {
        bundle: Bundle::new(ParseTree::new()),
        stages_run: Vec::new(),
        skipped_resume: Vec::new(),
        summary: Vec::new(),
        audits: Vec::new(),
    };
    let stages: Vec<&str> = STAGE_ORDER
        .iter()
        .copied()
        .filter(|s| !(options.skip_validation && s.ends_with("-validate")))
        .collect();
    let vcfg = cfg.validation_config();

    for stage in stages {
        if state.completed.iter().any(|s| s == stage) {
            report.skipped_resume.push(stage.to_string());
            continue;
        }
        match stage {
            "syntax-gen" => {
                let mut icfg = cfg.induction_config().map_err(|e| tag(stage, e))?;
                icfg.use_fewshot = !options.no_fewshot;
                // Resume continues from the checkpointed partial tree.
                let start = std::mem::replace(&mut bundle, Bundle::new(ParseTree::new())).tree;
                let mut store = state.induction_store.clone();
                let outcome = induce_from(gateway, start, lines, &icfg, &mut store, |t| {
                    if let Some(path) = checkpoint_path {
                        let mut partial = state.clone();
                        partial.set_bundle(&Bundle::new(t.clone()));
                        partial.save(path)?;
                    }
                    Ok(())
                })
                .map_err(|e| tag(stage, e))?;
                state.induction_store = store;
                bundle = Bundle::new(outcome.tree);
                report.summary.push(format!(
                    "{stage}: {} templates in {} rounds ({} deferred, {} replaced, {} narrowed)",
                    bundle.tree.templates().len(),
                    outcome.rounds,
                    outcome.deferred.len(),
                    outcome.replaced,
                    outcome.narrowed,
                ));
            }
            "syntax-validate" => {
                let audits = validate_stage(gateway, &mut bundle, Stage::Syntax, lines, &vcfg)
                    .map_err(|e| tag(stage, e))?;
                report.summary.push(stage_summary(stage, &audits));
                report.audits.extend(audits);
            }
            "schema-gen" => {
                let mut ncfg = cfg.naming_config().map_err(|e| tag(stage, e))?;
                ncfg.use_fewshot = !options.no_fewshot;
                let mut store = state.naming_store.clone();
                let naming = name_bundle(gateway, &mut bundle, &mut store, &ncfg)
                    .map_err(|e| tag(stage, e))?;
                state.naming_store = store;
                report.summary.push(format!(
                    "{stage}: {} templates named, {} queued for validation, {} fields",
                    naming.named.len(),
                    naming.queued.len(),
                    bundle.schema.fields().len(),
                ));
            }
            "schema-validate" => {
                let audits = validate_stage(gateway, &mut bundle, Stage::Schema, lines, &vcfg)
                    .map_err(|e| tag(stage, e))?;
                report.summary.push(stage_summary(stage, &audits));
                report.audits.extend(audits);
            }
            "map-gen" => {
                let mut mcfg = cfg.mapper_config().map_err(|e| tag(stage, e))?;
                if options.no_fewshot {
                    mcfg.fewshot_k = 0;
                }
                let mut store = state.mapping_store.clone();
                let mapping = map_schema(gateway, &mut bundle, index, &mut store, &mcfg)
                    .map_err(|e| tag(stage, e))?;
                state.mapping_store = store;
                let mapped = mapping.fields.iter().filter(|f| !f.chosen.is_empty()).count();
                report.summary.push(format!(
                    "{stage}: {mapped}/{} fields mapped",
                    mapping.fields.len()
                ));
            }
            "map-validate" => {
                let audits = validate_stage(gateway, &mut bundle, Stage::Mapping, lines, &vcfg)
                    .map_err(|e| tag(stage, e))?;
                report.summary.push(stage_summary(stage, &audits));
                report.audits.extend(audits);
            }
            other => unreachable!("unplanned stage {other}"),
        }
        report.stages_run.push(stage.to_string());
        state.completed.push(stage.to_string());
        state.set_bundle(&bundle);
        if let Some(path) = checkpoint_path {
            state.save(path)?;
        }
    }

    bundle.verify()?;
    report.bundle = bundle;
    Ok(report)
}

fn stage_summary(stage: &str, audits: &[AuditRow]) -> String {
    let mut applied = 0;
    let mut empty = 0;
    let mut skipped = 0;
    for a in audits {
        match a.outcome.as_str() {
            "applied" => applied += 1,
            "empty" => empty += 1,
            _ => skipped += 1,
        }
    }
    format!("{stage}: {applied} batches edited, {empty} clean, {skipped} skipped")
}

/// Splits raw text into lines without the trailing newline bytes. Blank
/// lines are kept so ordinals equal file line numbers.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<u8>>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_lines(&raw))
}

pub fn split_lines(raw: &[u8]) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = raw
        .split(|b| *b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l).to_vec())
        .collect();
    if out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_match_documented_knobs() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.induction.buffer_cap, 2500);
        assert_eq!(cfg.induction.epsilon, 0.05);
        assert_eq!(cfg.induction.min_samples, 2);
        assert_eq!(cfg.induction.fewshot_k, 5);
        assert_eq!(cfg.induction.n_samples, 3);
        assert_eq!(cfg.mapping.shortlist_k, 50);
        assert_eq!(cfg.mapping.max_attrs, 1);
        assert_eq!(cfg.validation.window, 8);
        assert_eq!(cfg.validation.frozen_cap, 8);
        assert_eq!(cfg.validation.passes, 1);
        cfg.check().unwrap();
    }

    #[test]
    fn config_rejects_zero_knobs_and_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.induction.buffer_cap = 0;
        assert!(matches!(cfg.check(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.induction.epsilon = 0.0;
        assert!(cfg.check().is_err());
        let parsed: std::result::Result<RunConfig, _> =
            toml::from_str("[induction]\nbufer_cap = 10\n");
        assert!(parsed.is_err());
        let cfg: RunConfig = toml::from_str("[induction]\nbuffer_cap = 10\n").unwrap();
        assert_eq!(cfg.induction.buffer_cap, 10);
        assert_eq!(cfg.induction.epsilon, 0.05);
    }

    #[test]
    fn missing_api_key_fails_before_any_work() {
        let mut cfg = RunConfig::default();
        cfg.provider.api_key_env = "LOGLOOM_TEST_KEY_THAT_IS_NEVER_SET".into();
        match build_gateway(&cfg, None, Some(Path::new("/tmp/nocache"))) {
            Err(Error::Config(m)) => assert!(m.contains("LOGLOOM_TEST_KEY_THAT_IS_NEVER_SET")),
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("expected config error"),
        }
        cfg.provider.kind = "mock".into();
        assert!(matches!(
            build_gateway(&cfg, None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trips_bundle_and_stores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let mut ckpt = Checkpoint::fresh();
        let mut tree = ParseTree::new();
        tree.insert_template(&[crate::model::Token::constant("x", "")])
            .unwrap();
        ckpt.set_bundle(&Bundle::new(tree));
        ckpt.completed.push("syntax-gen".into());
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.completed, vec!["syntax-gen"]);
        assert_eq!(back.bundle()
            .unwrap()
            .tree
            .templates()
            .len(), 1);
        // A fresh checkpoint holds an empty bundle.
        assert_eq!(Checkpoint::fresh().bundle().unwrap().tree.templates().len(), 0);
    }

    #[test]
    fn split_lines_handles_crlf_and_final_newline() {
        assert_eq!(
            split_lines(b"a\r\nb\nc"),
            vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec()]
        );
        assert_eq!(split_lines(b"a\n"), vec![b"a".to_vec()]);
        assert_eq!(split_lines(b""), Vec::<Vec<u8>>::new());
        // Interior blank lines keep their ordinal slot.
        assert_eq!(split_lines(b"a\n\nb\n").len(), 3);
    }

    #[test]
    fn stage_order_is_fixed_and_skip_drops_validation() {
        assert_eq!(
            STAGE_ORDER,
            [
                "syntax-gen",
                "syntax-validate",
                "schema-gen",
                "schema-validate",
                "map-gen",
                "map-validate"
            ]
        );
        let filtered: Vec<&str> = STAGE_ORDER
            .iter()
            .copied()
            .filter(|s| !s.ends_with("-validate"))
            .collect();
        assert_eq!(filtered, ["syntax-gen", "schema-gen", "map-gen"]);
    }
}
