//! Thin command-line front end over the library: each subcommand loads
//! files, calls one library entry point, and writes results back. Ingest,
//! query, and eval never construct a provider, so they stay offline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use logloom::error::{Error, Result};
use logloom::gateway::{ExampleStore, Gateway};
use logloom::induce::induce_from;
use logloom::matcher::{ingest_lines, ingest_to_writer};
use logloom::metrics;
use logloom::metrics::Grouping;
use logloom::model::{Bundle, ParseTree};
use logloom::naming::{field_inventory, name_bundle};
use logloom::pipeline::{
    build_gateway, read_lines, run_pipeline, RunConfig, RunOptions,
};
use logloom::query::{run_query, score, QuerySpec, SubstringPipeline};
use logloom::taxonomy::{map_schema, preprocess_taxonomy, AttributeIndex};
use logloom::validate::{validate_stage, AuditRow, Stage};

#[derive(Parser)]
#[command(name = "logloom", version, about = "Log parser induction, ingestion, and evaluation")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replay this transcript instead of calling a live provider.
    #[arg(long, global = true)]
    mock_transcript: Option<PathBuf>,
    /// Completion and embedding cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed and index a taxonomy document for attribute shortlisting.
    PreprocessTaxonomy {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        index: PathBuf,
    },
    /// Induce a parse tree from raw log lines.
    Induce {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Only read the first M lines.
        #[arg(long)]
        max_lines: Option<usize>,
        /// Continue from an existing bundle instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Name template fields and descriptions; prints the field inventory.
    Name {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Map schema fields onto taxonomy attributes.
    Map {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Cap on attributes per field.
        #[arg(long)]
        max_attrs: Option<usize>,
        /// Prune shortlists by predicted value type.
        #[arg(long)]
        use_types: bool,
    },
    /// Run consistency validation; prints an audit log of applied scripts.
    Validate {
        #[arg(long)]
        bundle: PathBuf,
        /// Raw lines whose matched set must stay fixed.
        #[arg(long)]
        corpus: PathBuf,
        /// syntax, schema, or mapping; all three in order when omitted.
        #[arg(long)]
        stage: Option<String>,
        /// Write the audit log here instead of stdout.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Parse raw lines from stdin (or --input) into structured records.
    Ingest {
        #[arg(long)]
        bundle: PathBuf,
        /// Add a taxonomy{attribute: value} object per record.
        #[arg(long)]
        taxonomy_view: bool,
        /// Read from this file instead of stdin.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Execute a query document over a log and print matching ordinals.
    Query {
        #[arg(long)]
        bundle: PathBuf,
        /// Raw log file the query runs over.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Golden line ordinals; enables precision/recall scoring.
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Score a predicted bundle against ground truth over a log.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Raw log both parsers ingest for grouping-based metrics.
        #[arg(long)]
        input: PathBuf,
        /// Comma list from ts,pgs,sgs,ga,pa,map.
        #[arg(long, default_value = "ts,pgs,sgs,ga,pa,map")]
        metrics: String,
    },
    /// Full pipeline: induce, name, map, each followed by validation.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Ablation: skip all three validation passes.
        #[arg(long)]
        skip_validation: bool,
        /// Ablation: disable few-shot example retrieval.
        #[arg(long)]
        no_fewshot: bool,
        /// Continue from the checkpoint next to the bundle.
        #[arg(long)]
        resume: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn gateway_for(cli_config: Option<&Path>, mock: Option<&Path>, cache: Option<&Path>) -> Result<(RunConfig, Gateway)> {
    let cfg = load_config(cli_config)?;
    let gw = build_gateway(&cfg, mock, cache)?;
    Ok((cfg, gw))
}

fn load_bundle(path: &Path) -> Result<Bundle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Bundle::from_document(&text)
}

fn save_bundle(path: &Path, bundle: &Bundle) -> Result<()> {
    fs::write(path, bundle.to_document()).map_err(|e| Error::io(path, e))
}

fn write_audit(rows: &[AuditRow], path: Option<&Path>) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("audit row serializes"));
        text.push('\n');
    }
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_golden(path: &Path) -> Result<BTreeSet<u64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trimmed = text.trim();
    if trimmed.starts_with('[') || trimmed.starts_with('{') {
        let value: serde_json::Value = serde_json::from_str(trimmed)
            .map_err(|e| Error::Parse(format!("golden set: {e}")))?;
        let arr = value
            .as_array()
            .or_else(|| value.get("lines").and_then(|l| l.as_array()))
            .ok_or_else(|| Error::Parse("golden set: expected a list of ordinals".into()))?;
        arr.iter()
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| Error::Parse(format!("golden ordinal {v} is not an integer")))
            })
            .collect()
    } else {
        trimmed
            .split_whitespace()
            .map(|t| {
                t.parse::<u64>()
                    .map_err(|e| Error::Parse(format!("golden ordinal {t:?}: {e}")))
            })
            .collect()
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    let mock = cli.mock_transcript.as_deref();
    let cache = cli.cache_dir.as_deref();
    match cli.command {
        Command::PreprocessTaxonomy { input, index } => {
            let (_, gw) = gateway_for(config, mock, cache)?;
            let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let idx = preprocess_taxonomy(&gw, &text)?;
            idx.save(&index)?;
            println!(
                "indexed {} attributes ({} type tags) -> {}",
                idx.attributes.len(),
                idx.type_tags.len(),
                index.display()
            );
            Ok(())
        }
        Command::Induce {
            input,
            bundle,
            max_lines,
            resume,
        } => {
            let (cfg, gw) = gateway_for(config, mock, cache)?;
            let mut lines = read_lines(&input)?;
            if let Some(m) = max_lines {
                lines.truncate(m);
            }
            let start = if resume && bundle.exists() {
                load_bundle(&bundle)?.tree
            } else {
                ParseTree::new()
            };
            let mut store = ExampleStore::new();
            let icfg = cfg.induction_config()?;
            let bundle_path = bundle.clone();
            let outcome = induce_from(&gw, start, &lines, &icfg, &mut store, |tree| {
                save_bundle(&bundle_path, &Bundle::new(tree.clone()))
            })?;
            let matched = {
                let records = ingest_lines(&outcome.tree, &lines)?;
                records.iter().filter(|r| r.template_id.is_some()).count()
            };
            save_bundle(&bundle, &Bundle::new(outcome.tree.clone()))?;
            println!(
                "{} templates over {} lines ({} matched, {} clusters deferred, {} rounds)",
                outcome.tree.templates().len(),
                lines.len(),
                matched,
                outcome.deferred.len(),
                outcome.rounds,
            );
            Ok(())
        }
        Command::Name { bundle } => {
            let (cfg, gw) = gateway_for(config, mock, cache)?;
            let mut b = load_bundle(&bundle)?;
            let mut store = ExampleStore::new();
            let report = name_bundle(&gw, &mut b, &mut store, &cfg.naming_config()?)?;
            save_bundle(&bundle, &b)?;
            println!(
                "named {} templates ({} queued for validation)",
                report.named.len(),
                report.queued.len()
            );
            println!("{:<28} {:>6}  description", "field", "count");
            for row in field_inventory(&b) {
                println!("{:<28} {:>6}  {}", row.name, row.occurrences, row.description);
            }
            Ok(())
        }
        Command::Map {
            bundle,
            index,
            max_attrs,
            use_types,
        } => {
            let (cfg, gw) = gateway_for(config, mock, cache)?;
            let mut b = load_bundle(&bundle)?;
            let idx = AttributeIndex::load(&index)?;
            let mut mcfg = cfg.mapper_config()?;
            if let Some(n) = max_attrs {
                mcfg.max_attrs = n;
            }
            mcfg.use_types = use_types;
            let mut store = ExampleStore::new();
            let report = map_schema(&gw, &mut b, &idx, &mut store, &mcfg)?;
            save_bundle(&bundle, &b)?;
            for f in &report.fields {
                let chosen = if f.chosen.is_empty() {
                    "(unmapped)".to_string()
                } else {
                    f.chosen.join(", ")
                };
                println!("{:<28} -> {chosen}", f.field);
                for flag in &f.flags {
                    println!("{:<28}    note: {flag}", "");
                }
            }
            Ok(())
        }
        Command::Validate {
            bundle,
            corpus,
            stage,
            audit,
        } => {
            let (cfg, gw) = gateway_for(config, mock, cache)?;
            let mut b = load_bundle(&bundle)?;
            let lines = read_lines(&corpus)?;
            let stages: Vec<Stage> = match stage {
                Some(s) => vec![s.parse()?],
                None => vec![Stage::Syntax, Stage::Schema, Stage::Mapping],
            };
            let vcfg = cfg.validation_config();
            let mut rows = Vec::new();
            for s in stages {
                rows.extend(validate_stage(&gw, &mut b, s, &lines, &vcfg)?);
            }
            save_bundle(&bundle, &b)?;
            write_audit(&rows, audit.as_deref())?;
            eprintln!(
                "{} batches: {} edited, {} clean, {} skipped",
                rows.len(),
                rows.iter().filter(|r| r.outcome == "applied").count(),
                rows.iter().filter(|r| r.outcome == "empty").count(),
                rows.iter().filter(|r| r.outcome == "skipped").count(),
            );
            Ok(())
        }
        Command::Ingest {
            bundle,
            taxonomy_view,
            input,
        } => {
            let b = load_bundle(&bundle)?;
            let stdout = std::io::stdout().lock();
            let writer = std::io::BufWriter::new(stdout);
            let stats = match input {
                Some(path) => {
                    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                    ingest_to_writer(&b, std::io::BufReader::new(file), writer, taxonomy_view)?
                }
                None => {
                    let stdin = std::io::stdin().lock();
                    ingest_to_writer(&b, stdin, writer, taxonomy_view)?
                }
            };
            eprintln!(
                "{} lines, {} matched, {} unmatched",
                stats.lines,
                stats.matched,
                stats.lines - stats.matched
            );
            Ok(())
        }
        Command::Query {
            bundle,
            records,
            query,
            golden,
        } => {
            let b = load_bundle(&bundle)?;
            let lines = read_lines(&records)?;
            let text = fs::read_to_string(&query).map_err(|e| Error::io(&query, e))?;
            let doc: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Query(format!("query document: {e}")))?;
            let hits: BTreeSet<u64> = if doc.get("pipeline").is_some() {
                SubstringPipeline::parse(&text)?.run(&lines)
            } else {
                let spec = QuerySpec::parse(&text)?;
                let recs = ingest_lines(&b.tree, &lines)?;
                run_query(&b, &recs, &spec)?
            };
            let stdout = std::io::stdout().lock();
            let mut out = std::io::BufWriter::new(stdout);
            for ord in &hits {
                writeln!(out, "{ord}").map_err(|e| Error::io("<stdout>", e))?;
            }
            out.flush().map_err(|e| Error::io("<stdout>", e))?;
            if let Some(g) = golden {
                let gold = parse_golden(&g)?;
                let s = score(&hits, &gold);
                eprintln!(
                    "matched {} lines; precision {:.4} recall {:.4}{}",
                    hits.len(),
                    s.precision,
                    s.recall,
                    if s.empty_prediction { " (empty prediction)" } else { "" }
                );
            } else {
                eprintln!("matched {} lines", hits.len());
            }
            Ok(())
        }
        Command::Eval {
            pred,
            gt,
            input,
            metrics: wanted,
        } => {
            let pred_bundle = load_bundle(&pred)?;
            let gt_bundle = load_bundle(&gt)?;
            let lines = read_lines(&input)?;
            print_eval(&pred_bundle, &gt_bundle, &lines, &wanted)
        }
        Command::Run {
            input,
            index,
            bundle,
            skip_validation,
            no_fewshot,
            resume,
        } => {
            let (cfg, gw) = gateway_for(config, mock, cache)?;
            let lines = read_lines(&input)?;
            let idx = AttributeIndex::load(&index)?;
            let options = RunOptions {
                skip_validation,
                no_fewshot,
                resume,
            };
            let ckpt = bundle.with_extension("ckpt");
            let report = run_pipeline(&gw, &cfg, &lines, &idx, options, Some(&ckpt))?;
            save_bundle(&bundle, &report.bundle)?;
            if !report.audits.is_empty() {
                write_audit(&report.audits, Some(&bundle.with_extension("audit.jsonl")))?;
            }
            for skipped in &report.skipped_resume {
                println!("{skipped}: already complete, skipped");
            }
            for line in &report.summary {
                println!("{line}");
            }
            println!("bundle -> {}", bundle.display());
            Ok(())
        }
    }
}

fn print_eval(pred: &Bundle, gt: &Bundle, lines: &[Vec<u8>], wanted: &str) -> Result<()> {
    let pred_records = ingest_lines(&pred.tree, lines)?;
    let gt_records = ingest_lines(&gt.tree, lines)?;
    let pred_grouping = Grouping::from_records(&pred.tree, &pred_records)?;
    let gt_grouping = Grouping::from_records(&gt.tree, &gt_records)?;
    println!("{:<8} {:>8}", "metric", "value");
    for name in wanted.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let value = match name {
            "ts" => metrics::mean_template_similarity(&pred_grouping, &gt_grouping)?,
            "pgs" => metrics::parser_group_similarity(&pred_grouping, &gt_grouping)?,
            "ga" => metrics::group_accuracy(&pred_grouping, &gt_grouping)?,
            "pa" => metrics::parsing_accuracy(&pred_grouping, &gt_grouping)?,
            "sgs" => {
                let weights = leaf_weights(&gt_records);
                let occs = metrics::align_occurrences(pred, gt, &weights)?;
                metrics::schema_group_similarity(&occs)?
            }
            "map" => {
                let weights = field_weights(gt, &gt_records);
                metrics::mapping_accuracy(
                    &mapping_sets(pred),
                    &mapping_sets(gt),
                    &weights,
                )?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown metric {other:?} (ts, pgs, sgs, ga, pa, map)"
                )))
            }
        };
        println!("{name:<8} {value:>8.4}");
    }
    Ok(())
}

fn leaf_weights(records: &[logloom::model::StructuredRecord]) -> BTreeMap<u32, u64> {
    let mut weights: BTreeMap<u32, u64> = BTreeMap::new();
    for r in records {
        if let Some(leaf) = r.template_id {
            *weights.entry(leaf).or_insert(0) += 1;
        }
    }
    weights
}

/// Field weight = how many ingested lines carry a capture for it. All
/// schema fields appear, floored at weight 1 so unseen fields still count.
fn field_weights(
    bundle: &Bundle,
    records: &[logloom::model::StructuredRecord],
) -> BTreeMap<String, u64> {
    let mut weights: BTreeMap<String, u64> = bundle
        .schema
        .fields()
        .iter()
        .map(|f| (f.name.clone(), 1))
        .collect();
    for r in records {
        for c in &r.captures {
            if let Some(w) = weights.get_mut(&c.key) {
                *w += 1;
            }
        }
    }
    weights
}

/// Every schema field appears as a key; unmapped fields map to the empty
/// set, which is how the accuracy metric recognizes "both unmapped".
fn mapping_sets(bundle: &Bundle) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = bundle
        .schema
        .fields()
        .iter()
        .map(|f| (f.name.clone(), BTreeSet::new()))
        .collect();
    for (field, attrs) in &bundle.mappings {
        out.insert(field.clone(), attrs.iter().cloned().collect());
    }
    out
}
