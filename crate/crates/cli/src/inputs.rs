//! Parsers for the anchors and order files accepted by `generate`.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use pmlm::corpus::Vocabulary;
use pmlm::TokenId;

fn parse_token(text: &str, vocab: Option<&Vocabulary>) -> Option<TokenId> {
    match vocab {
        Some(v) => v.parse_token(text),
        None => text.trim().strip_prefix('#').unwrap_or(text.trim()).parse().ok(),
    }
}

/// Lines of `<position>:<token>` with 1-based positions. The token is taken
/// verbatim after the first `:` (so a space or `:` is a valid char token);
/// `#<id>` names a token by id. Blank lines are skipped.
pub fn parse_anchors(text: &str, vocab: Option<&Vocabulary>) -> Result<BTreeMap<usize, TokenId>> {
    let mut anchors = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let Some((pos, tok)) = line.split_once(':') else {
            bail!("anchors line {line_no}: expected `<position>:<token>`, got {line:?}");
        };
        let pos: usize = pos
            .trim()
            .parse()
            .ok()
            .filter(|&p| p >= 1)
            .with_context(|| format!("anchors line {line_no}: position {:?} is not a positive integer", pos.trim()))?;
        let id = parse_token(tok, vocab)
            .with_context(|| format!("anchors line {line_no}: unknown token {tok:?}"))?;
        if anchors.insert(pos - 1, id).is_some() {
            bail!("anchors line {line_no}: position {pos} is anchored twice");
        }
    }
    Ok(anchors)
}

/// 1-based positions separated by whitespace, commas or `->`/`→`.
pub fn parse_order(text: &str) -> Result<Vec<usize>> {
    let cleaned = text.replace("->", " ").replace('→', " ").replace(',', " ");
    cleaned
        .split_whitespace()
        .map(|t| match t.parse::<usize>() {
            Ok(p) if p >= 1 => Ok(p - 1),
            _ => bail!("order file: {t:?} is not a positive position"),
        })
        .collect()
}
