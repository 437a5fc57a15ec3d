//! Applies reviewed edits to a parser bundle through the guarded command
//! language.
//!
//! Every command in a script is checked against structural, schema, mapping,
//! and match-set guards; a script either applies in full or not at all. The
//! match-set guard is what makes edits safe on live parsers: whatever the
//! script rearranges, the set of corpus lines that parse must not change.

use logloom::model::{Bundle, ParseTree, Token};
use logloom::validate::{execute_script, parse_script, ValidationScope};

fn main() -> logloom::Result<()> {
    // Three near-duplicate templates that differ only in an auth-method
    // constant, the shape over-segmentation leaves behind.
    let mut tree = ParseTree::new();
    let mut method_nodes = Vec::new();
    for method in ["pw", "pka", "mfa"] {
        let tokens = [
            Token::constant("auth", " "),
            Token::constant(method, " "),
            Token::constant("user", " "),
            Token::variable(r"\S+", ""),
        ];
        let leaf = tree.insert_template(&tokens)?.leaf;
        method_nodes.push(tree.template(leaf)?.node_ids[1]);
    }
    let bundle = Bundle::new(tree);
    let corpus: Vec<Vec<u8>> = ["pw", "pka", "mfa"]
        .iter()
        .flat_map(|m| {
            ["kermit", "piggy"].iter().map(move |u| format!("auth {m} user {u}").into_bytes())
        })
        .collect();

    println!("before:");
    for t in bundle.tree.templates() {
        println!("  {}", t.wildcard_form());
    }

    let merge = serde_json::json!({
        "rationale": "the three method constants are one variable slot",
        "commands": [
            {"op": "merge_nodes", "nodes": method_nodes, "pattern": r"\S+", "sep": " ", "label": "@m"},
            {"op": "create_field", "name": "auth_method",
             "description": "Authentication method used for the attempt."},
            {"op": "assign_field", "node": "@m", "field": "auth_method"},
        ],
    });
    let script = parse_script(&merge.to_string())?;
    let merged = execute_script(&bundle, &script, &corpus, &ValidationScope::default())?;
    println!("after the merge script:");
    for t in merged.tree.templates() {
        println!("  {}", t.wildcard_form());
    }

    // A script that would orphan lines is refused outright and the input
    // bundle stays untouched.
    let destructive = serde_json::json!({
        "rationale": "drop the user variable",
        "commands": [
            {"op": "delete_node", "node": merged.tree.templates()[0].leaf},
        ],
    });
    let script = parse_script(&destructive.to_string())?;
    match execute_script(&merged, &script, &corpus, &ValidationScope::default()) {
        Ok(_) => println!("unexpectedly applied"),
        Err(e) => println!("destructive script rejected: {e}"),
    }
    Ok(())
}
