//! Runs the same analyst question in three query forms and compares their
//! accuracy against a hand-labeled golden set.
//!
//! The question: accepted ssh connections that used password auth from one
//! address. The source-schema form can say `auth_method = "pw"`; the
//! taxonomy form lost that field (nothing in the taxonomy holds it); the
//! substring form drags in every line that happens to contain the address.

use std::collections::BTreeSet;
use std::path::Path;

use logloom::matcher::{ingest_lines, read_log_file};
use logloom::pipeline::{build_gateway, run_pipeline, RunConfig, RunOptions};
use logloom::query::{run_query, score, QuerySpec, SubstringPipeline};
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
    let bundle = run_pipeline(&gateway, &cfg, &lines, &index, RunOptions::default(), None)?.bundle;
    let records = ingest_lines(&bundle.tree, &lines)?;

    let golden: BTreeSet<u64> = std::fs::read_to_string(fixtures.join("queries/accepted_pw.golden"))
        .expect("golden file")
        .split_whitespace()
        .map(|t| t.parse().expect("ordinal"))
        .collect();

    println!("{:<14} {:>5} {:>10} {:>8} {:>8}", "form", "hits", "precision", "recall", "f1");
    for form in ["custom", "standardized"] {
        let path = fixtures.join(format!("queries/accepted_pw_{form}.json"));
        let spec = QuerySpec::parse(&std::fs::read_to_string(&path).expect("query file"))?;
        let hits = run_query(&bundle, &records, &spec)?;
        report(form, hits.len(), &hits, &golden);
    }
    let naive_path = fixtures.join("queries/accepted_pw_naive.json");
    let pipeline = SubstringPipeline::parse(&std::fs::read_to_string(&naive_path).expect("query file"))?;
    let hits = pipeline.run(&lines);
    report("naive", hits.len(), &hits, &golden);
    Ok(())
}

fn report(form: &str, n: usize, hits: &BTreeSet<u64>, golden: &BTreeSet<u64>) {
    let s = score(hits, golden);
    let f1 = if s.precision + s.recall == 0.0 {
        0.0
    } else {
        2.0 * s.precision * s.recall / (s.precision + s.recall)
    };
    println!("{form:<14} {n:>5} {:>10.4} {:>8.4} {f1:>8.4}", s.precision, s.recall);
}
