//! Scores a predicted parser against a reference parser over one corpus.
//!
//! The degraded parser merges two formats into one template and splits a
//! third, which is exactly what the grouping metrics are built to punish:
//! over-capture zeroes a group, under-capture earns partial credit.

use std::collections::BTreeMap;

use logloom::matcher::ingest_lines;
use logloom::metrics::{
    group_accuracy, mean_template_similarity, parser_group_similarity, parsing_accuracy, Grouping,
};
use logloom::model::{Bundle, ParseTree, Token};

fn tokens(event: &str, tail_var: &str) -> Vec<Token> {
    vec![
        Token::constant("app", " "),
        Token::constant(event, " "),
        Token::variable(tail_var, ""),
    ]
}

fn main() -> logloom::Result<()> {
    let mut gt_tree = ParseTree::new();
    for event in ["login", "logout", "purge"] {
        gt_tree.insert_template(&tokens(event, r"\S+"))?;
    }
    let gt = Bundle::new(gt_tree);

    // The degraded parser: one template absorbs login and logout lines
    // (the event word becomes a variable), purge survives unchanged.
    let mut pred_tree = ParseTree::new();
    pred_tree.insert_template(&[
        Token::constant("app", " "),
        Token::variable(r"log\S+", " "),
        Token::variable(r"\S+", ""),
    ])?;
    pred_tree.insert_template(&tokens("purge", r"\S+"))?;
    let pred = Bundle::new(pred_tree);

    let mut lines = Vec::new();
    for event in ["login", "login", "login", "logout", "purge", "purge"] {
        lines.push(format!("app {event} u{}", lines.len()).into_bytes());
    }

    let gt_grouping = Grouping::from_records(&gt.tree, &ingest_lines(&gt.tree, &lines)?)?;
    let pred_grouping = Grouping::from_records(&pred.tree, &ingest_lines(&pred.tree, &lines)?)?;

    let mut table = BTreeMap::new();
    table.insert("template similarity", mean_template_similarity(&pred_grouping, &gt_grouping)?);
    table.insert("parser group similarity", parser_group_similarity(&pred_grouping, &gt_grouping)?);
    table.insert("group accuracy", group_accuracy(&pred_grouping, &gt_grouping)?);
    table.insert("parsing accuracy", parsing_accuracy(&pred_grouping, &gt_grouping)?);

    println!("degraded parser vs reference over {} lines:", lines.len());
    for (metric, value) in table {
        println!("  {metric:<26} {value:.4}");
    }
    println!("\nper-line grouping (predicted <- true):");
    for (line, (p, g)) in lines.iter().zip(
        ingest_lines(&pred.tree, &lines)?
            .iter()
            .zip(ingest_lines(&gt.tree, &lines)?.iter())
            .map(|(p, g)| (p.template_id, g.template_id)),
    ) {
        println!("  {:?} <- {:?}  {}", p, g, String::from_utf8_lossy(line));
    }
    Ok(())
}
