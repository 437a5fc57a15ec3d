//! Names the variable tokens of an induced parser and maps the resulting
//! fields onto a shared taxonomy.
//!
//! Naming turns `<*>` slots into a schema of described fields; mapping ties
//! each field to at most one taxonomy attribute so records from different
//! sources can be queried with one vocabulary.

use std::path::Path;

use logloom::gateway::ExampleStore;
use logloom::induce::induce;
use logloom::matcher::read_log_file;
use logloom::model::Bundle;
use logloom::naming::name_bundle;
use logloom::pipeline::{build_gateway, RunConfig};
use logloom::taxonomy::{map_schema, preprocess_taxonomy};

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
    let mut bundle = Bundle::new(outcome.tree);

    let mut naming_store = ExampleStore::new();
    let report = name_bundle(&gateway, &mut bundle, &mut naming_store, &cfg.naming_config()?)?;
    println!("named {} templates; schema:", report.named.len());
    for field in bundle.schema.fields() {
        println!("  {:<28} {}", field.name, field.description);
    }

    let taxonomy = std::fs::read_to_string(fixtures.join("taxonomy.json"))
        .map_err(|e| logloom::Error::io(&fixtures.join("taxonomy.json"), e))?;
    let index = preprocess_taxonomy(&gateway, &taxonomy)?;
    let mut map_store = ExampleStore::new();
    map_schema(&gateway, &mut bundle, &index, &mut map_store, &cfg.mapper_config()?)?;

    println!("\nmappings (cap {}):", bundle.mapping_cap);
    for field in bundle.schema.fields() {
        match bundle.mappings.get(&field.name) {
            Some(attrs) => println!("  {:<28} -> {}", field.name, attrs.join(", ")),
            None => println!("  {:<28} -> (unmapped)", field.name),
        }
    }
    Ok(())
}
