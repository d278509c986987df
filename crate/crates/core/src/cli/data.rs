//! Reading corpora, tokenizers and grammars named on the command line.

use std::fs;
use std::path::Path;

use crate::error::{LmError, Result};
use crate::grammar::Grammar;
use crate::text::{build_vocab, Tokenizer, Vocab};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LmError::Data(format!("{}: no such file", path.display())),
        std::io::ErrorKind::InvalidData => LmError::Data(format!("{}: not valid UTF-8", path.display())),
        _ => LmError::Io(e),
    })
}

/// `whitespace`, `char`, or `subword:<merges file>`.
pub fn tokenizer(spec: &str) -> Result<Tokenizer> {
    match spec {
        "whitespace" => Ok(Tokenizer::whitespace()),
        "char" | "character" => Ok(Tokenizer::character()),
        s => match s.strip_prefix("subword:") {
            Some(path) => Tokenizer::merges_from_text(&read_text(Path::new(path))?),
            None => Err(LmError::Config(format!(
                "unknown tokenizer {s:?} (whitespace, char, subword:<merges file>)"
            ))),
        },
    }
}

/// Splits a corpus file into token strings; an empty corpus is a data error.
pub fn corpus_tokens(path: &Path, tok: &Tokenizer) -> Result<Vec<String>> {
    let pieces = tok.split(&read_text(path)?);
    if pieces.is_empty() {
        return Err(LmError::Data(format!("{}: empty corpus", path.display())));
    }
    Ok(pieces)
}

/// Vocabulary of every distinct token (or the `max_size` most frequent).
pub fn corpus_vocab(pieces: &[String], max_size: Option<usize>) -> Result<Vocab> {
    let distinct = pieces.iter().collect::<std::collections::BTreeSet<_>>().len();
    build_vocab(pieces, max_size.unwrap_or(distinct + 3).max(4))
}

pub fn ids(pieces: &[String], vocab: &Vocab) -> Vec<usize> {
    pieces.iter().map(|t| vocab.id(t)).collect()
}

/// A built-in grammar name or a path to a grammar file.
pub fn grammar(name: &str, uniform: bool) -> Result<Grammar> {
    let g = match Grammar::builtin(name) {
        Ok(g) => g,
        Err(_) if Path::new(name).exists() => Grammar::parse(&read_text(Path::new(name))?, name)?,
        Err(_) => {
            return Err(LmError::Config(format!(
                "grammar {name:?} is neither a built-in (fig3, fig3-pcfg) nor a file"
            )))
        }
    };
    Ok(if uniform { g.with_uniform_probabilities() } else { g })
}
