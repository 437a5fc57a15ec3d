//! Learns a parser from raw log lines.
//!
//! The model conversation is replayed from the checked-in transcript, so
//! this runs offline and always produces the same tree. Swap the transcript
//! for a live provider config to induce over a new log source.

use std::path::Path;

use logloom::matcher::read_log_file;
use logloom::gateway::ExampleStore;
use logloom::induce::induce;
use logloom::pipeline::{build_gateway, RunConfig};

fn main() -> logloom::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let cache = tempfile::tempdir().expect("tempdir");
    let cfg = RunConfig::default();
    let gateway = build_gateway(
        &cfg,
        Some(&fixtures.join("ssh_transcript.json")),
        Some(cache.path()),
    )?;

    let lines = read_log_file(&fixtures.join("ssh.log"))?;
    let mut store = ExampleStore::new();
    let outcome = induce(&gateway, &lines, &cfg.induction_config()?, &mut store, |_| Ok(()))?;

    println!(
        "learned {} templates from {} lines in {} proposal rounds",
        outcome.tree.templates().len(),
        lines.len(),
        outcome.rounds
    );
    for t in outcome.tree.templates() {
        println!("  leaf {:>3}  {}", t.leaf, t.wildcard_form());
    }
    if !outcome.deferred.is_empty() {
        println!("deferred clusters: {}", outcome.deferred.len());
    }
    println!(
        "provider calls {} (cache hits {})",
        gateway.provider_calls(),
        gateway.cache_hits()
    );
    Ok(())
}
