//! Assembles a parse tree by hand and matches raw lines against it.
//!
//! Templates that share leading tokens share tree nodes, so a parser over
//! many formats of one log source stays compact and the shared fields keep
//! one identity across formats.

use logloom::matcher::Matcher;
use logloom::model::{ParseTree, Token};

fn main() -> logloom::Result<()> {
    let prefix = [
        Token::variable(r"\S+\s+\d+\s+\d+:\d+:\d+", " "),
        Token::variable(r"\S+", " "),
        Token::constant("sshd", ""),
        Token::constant("[", ""),
        Token::variable(r"\d+", ""),
        Token::constant("]:", " "),
    ];
    let mut tree = ParseTree::new();
    let mut failed = prefix.to_vec();
    failed.extend([
        Token::constant("Failed", " "),
        Token::variable(r"\S+", " "),
        Token::constant("for", " "),
        Token::constant("user", " "),
        Token::variable(r"\S+", ""),
    ]);
    let mut closed = prefix.to_vec();
    closed.extend([
        Token::constant("Connection", " "),
        Token::constant("closed", " "),
        Token::constant("by", " "),
        Token::variable(r"\d+\.\d+\.\d+\.\d+", ""),
    ]);
    let mut invalid = prefix.to_vec();
    invalid.extend([
        Token::constant("Invalid", " "),
        Token::constant("user", " "),
        Token::variable(r"\S+", ""),
    ]);
    let mut token_total = 0;
    for tokens in [&failed, &closed, &invalid] {
        tree.insert_template(tokens)?;
        token_total += tokens.len();
    }

    println!("templates:");
    for t in tree.templates() {
        println!("  leaf {:>3}  {}", t.leaf, t.wildcard_form());
    }
    println!(
        "prefix sharing: {} tokens inserted, {} nodes stored",
        token_total,
        tree.node_count()
    );

    let matcher = Matcher::new(&tree)?;
    let lines = [
        "Mar  9 23:46:06 puma25 sshd[17002]: Failed password for user root",
        "Mar  9 23:46:09 puma25 sshd[17003]: Connection closed by 10.35.161.71",
        "Mar  9 23:46:12 puma25 sshd[17004]: Invalid user guest",
        "Mar  9 23:46:15 puma25 sshd[17005]: Accepted publickey for kermit",
    ];
    println!("\nmatches:");
    for line in lines {
        match matcher.match_line(line.as_bytes()).leaf() {
            Some(leaf) => println!("  leaf {leaf:>3}  {line}"),
            None => println!("  no match  {line}"),
        }
    }
    Ok(())
}
