//! Vocabulary construction and tokenization (whitespace, character and greedy
//! pair-merge subwords).
//!
//! Line formats: a vocab file holds one token per line and a merges file one
//! `left right` pair per line; the 1-based line number is the rank (vocab id
//! is `line - 1`). Backslash, space, tab, CR and LF inside tokens are written
//! as `\\`, `\s`, `\t`, `\r` and `\n`.

use std::collections::{BTreeMap, HashMap};

use crate::error::{LmError, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const SPECIAL_TOKENS: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Word-start marker used by the subword tokenizer (U+2581).
pub const WORD_MARKER: char = '\u{2581}';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_of: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `tokens` in order. Duplicates are an error.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut token_of: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        token_of.extend(tokens.into_iter().map(Into::into));
        Vocab::from_full_list(token_of)
    }

    fn from_full_list(token_of: Vec<String>) -> Result<Vocab> {
        let mut id_of = HashMap::with_capacity(token_of.len());
        for (i, t) in token_of.iter().enumerate() {
            if id_of.insert(t.clone(), i).is_some() {
                return Err(LmError::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        if token_of.len() < 4 {
            return Err(LmError::Data("vocabulary needs at least one non-special token".into()));
        }
        Ok(Vocab { token_of, id_of })
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    /// Id of `token`, or `UNK` when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.token_of[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.token_of {
            s.push_str(&escape(t));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let token_of: Vec<String> = text.lines().map(unescape).collect::<Result<_>>()?;
        if token_of.len() < 3 || token_of[..3] != SPECIAL_TOKENS {
            return Err(LmError::Data("vocab file must start with <bos>, <eos>, <unk>".into()));
        }
        Vocab::from_full_list(token_of)
    }
}

/// The `max_size - 3` most frequent tokens, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(LmError::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    if max_size < 4 {
        return Err(LmError::Config(format!("max_size {max_size} < 4 (three specials + one token)")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in corpus {
        let t = t.as_ref();
        if SPECIAL_TOKENS.contains(&t) {
            continue;
        }
        *counts.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - 3);
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerMode {
    Whitespace,
    Character,
    Subword,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl Tokenizer {
    pub fn whitespace() -> Self {
        Self::with_mode(TokenizerMode::Whitespace, Vec::new())
    }

    pub fn character() -> Self {
        Self::with_mode(TokenizerMode::Character, Vec::new())
    }

    pub fn subword(merges: Vec<(String, String)>) -> Self {
        Self::with_mode(TokenizerMode::Subword, merges)
    }

    fn with_mode(mode: TokenizerMode, merges: Vec<(String, String)>) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Tokenizer { mode, merges, ranks }
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Splits text into token strings.
    ///
    /// Whitespace mode keeps every whitespace run as its own token except a
    /// single space between two words, which `join` re-inserts; this makes
    /// `join(split(s)) == s` for every string.
    pub fn split(&self, text: &str) -> Vec<String> {
        match self.mode {
            TokenizerMode::Character => text.chars().map(String::from).collect(),
            TokenizerMode::Whitespace => split_whitespace_lossless(text),
            TokenizerMode::Subword => text
                .split_whitespace()
                .flat_map(|w| self.split_word(w))
                .collect(),
        }
    }

    fn split_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = std::iter::once(WORD_MARKER)
            .chain(word.chars())
            .map(String::from)
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            symbols = merge_pair(&symbols, a, b);
        }
        symbols
    }

    pub fn join<S: AsRef<str>>(&self, pieces: &[S]) -> String {
        match self.mode {
            TokenizerMode::Character => pieces.iter().map(AsRef::as_ref).collect(),
            TokenizerMode::Whitespace => {
                let mut out = String::new();
                let mut prev_word = false;
                for p in pieces {
                    let p = p.as_ref();
                    let is_word = !p.starts_with(char::is_whitespace);
                    if is_word && prev_word {
                        out.push(' ');
                    }
                    out.push_str(p);
                    prev_word = is_word;
                }
                out
            }
            TokenizerMode::Subword => {
                let joined: String = pieces.iter().map(AsRef::as_ref).collect();
                let spaced = joined.replace(WORD_MARKER, " ");
                spaced.strip_prefix(' ').unwrap_or(&spaced).to_string()
            }
        }
    }

    /// Vocabulary for a subword tokenizer: every base symbol seen while
    /// learning followed by every merge product, in merge order.
    pub fn subword_vocab(&self, base_symbols: &[String]) -> Result<Vocab> {
        let mut seen = std::collections::HashSet::new();
        let mut list = Vec::new();
        for s in base_symbols
            .iter()
            .cloned()
            .chain(self.merges.iter().map(|(a, b)| format!("{a}{b}")))
        {
            if seen.insert(s.clone()) {
                list.push(s);
            }
        }
        Vocab::from_tokens(list)
    }

    pub fn merges_to_text(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.merges {
            s.push_str(&escape(a));
            s.push(' ');
            s.push_str(&escape(b));
            s.push('\n');
        }
        s
    }

    pub fn merges_from_text(text: &str) -> Result<Tokenizer> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((unescape(a)?, unescape(b)?));
                }
                _ => {
                    return Err(LmError::Parse {
                        source_name: "merges".into(),
                        line: i + 1,
                        message: "expected `left right`".into(),
                    })
                }
            }
        }
        Ok(Tokenizer::subword(merges))
    }
}

fn split_whitespace_lossless(text: &str) -> Vec<String> {
    let mut runs: Vec<(bool, String)> = Vec::new();
    for c in text.chars() {
        let ws = c.is_whitespace();
        match runs.last_mut() {
            Some((kind, s)) if *kind == ws => s.push(c),
            _ => runs.push((ws, c.to_string())),
        }
    }
    let n = runs.len();
    let mut out = Vec::with_capacity(n);
    for (i, (ws, s)) in runs.into_iter().enumerate() {
        if ws && s == " " && i > 0 && i + 1 < n {
            continue;
        }
        out.push(s);
    }
    out
}

fn merge_pair(symbols: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Result of merge learning: the tokenizer and the base symbols it started
/// from (needed to build the matching vocabulary).
#[derive(Clone, Debug)]
pub struct LearnedSubwords {
    pub tokenizer: Tokenizer,
    pub base_symbols: Vec<String>,
}

impl LearnedSubwords {
    pub fn vocab(&self) -> Result<Vocab> {
        self.tokenizer.subword_vocab(&self.base_symbols)
    }
}

/// Greedy pair merging: repeatedly fuse the most frequent adjacent symbol
/// pair (ties to the lexicographically smallest pair) until `n_merges` rules
/// exist or no pair remains.
pub fn learn_subword_merges(corpus: &str, n_merges: usize) -> Result<LearnedSubwords> {
    if corpus.trim().is_empty() {
        return Err(LmError::Data("cannot learn merges from an empty corpus".into()));
    }
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in corpus.split_whitespace() {
        *word_counts.entry(w).or_default() += 1;
    }
    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .into_iter()
        .map(|(w, c)| {
            let syms = std::iter::once(WORD_MARKER).chain(w.chars()).map(String::from).collect();
            (syms, c)
        })
        .collect();
    let mut base: Vec<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    base.sort();
    base.dedup();

    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let mut best: Option<((&str, &str), usize)> = None;
        for (pair, c) in pair_counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        for (syms, _) in &mut words {
            *syms = merge_pair(syms, &a, &b);
        }
        merges.push((a, b));
    }
    Ok(LearnedSubwords {
        tokenizer: Tokenizer::subword(merges),
        base_symbols: base,
    })
}

pub fn tokenize(text: &str, tokenizer: &Tokenizer, vocab: &Vocab) -> Vec<usize> {
    tokenizer.split(text).iter().map(|t| vocab.id(t)).collect()
}

pub fn detokenize(ids: &[usize], tokenizer: &Tokenizer, vocab: &Vocab) -> String {
    let pieces: Vec<&str> = ids.iter().map(|&i| vocab.token(i)).collect();
    tokenizer.join(&pieces)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('n') => out.push('\n'),
            other => return Err(LmError::Data(format!("bad escape \\{other:?} in {s:?}"))),
        }
    }
    Ok(out)
}
