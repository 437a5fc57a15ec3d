//! Runs the full induction pipeline once, then ingests the corpus into
//! structured JSON records.
//!
//! Ingest is a pure tree walk: no model, no network, deterministic output.
//! The `--taxonomy-view` analogue here prints both the per-source schema and
//! the taxonomy translation for the same record.

use std::path::Path;

use logloom::matcher::{ingest_lines, read_log_file, record_to_json};
use logloom::pipeline::{build_gateway, run_pipeline, RunConfig, RunOptions};
use logloom::taxonomy::preprocess_taxonomy;

fn main() -> logloom::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let cache = tempfile::tempdir().expect("tempdir");
    let cfg = RunConfig::default();
    let gateway = build_gateway(
        &cfg,
        Some(&fixtures.join("ssh_transcript.json")),
        Some(cache.path()),
    )?;
    let taxonomy = std::fs::read_to_string(fixtures.join("taxonomy.json"))
        .map_err(|e| logloom::Error::io(&fixtures.join("taxonomy.json"), e))?;
    let index = preprocess_taxonomy(&gateway, &taxonomy)?;
    let lines = read_log_file(&fixtures.join("ssh.log"))?;
    let report = run_pipeline(&gateway, &cfg, &lines, &index, RunOptions::default(), None)?;
    let bundle = report.bundle;

    let records = ingest_lines(&bundle.tree, &lines)?;
    let matched = records.iter().filter(|r| r.template_id.is_some()).count();
    println!("{} lines, {} matched", records.len(), matched);

    println!("\nfirst three records, source schema:");
    for r in records.iter().take(3) {
        println!("{}", record_to_json(&bundle, r, false));
    }
    println!("\nsame records, taxonomy view:");
    for r in records.iter().take(3) {
        println!("{}", record_to_json(&bundle, r, true));
    }
    Ok(())
}
