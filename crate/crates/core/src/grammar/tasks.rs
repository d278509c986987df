//! Synthetic supervised tasks: modular addition and induction sequences.
//!
//! Token layouts (ids):
//! - modular addition: the three specials, residues `"0".."m-1"` at
//!   `3..3+m`, then `"+"` and `"="`. A prompt is `a + b =`.
//! - induction: the three specials, then content tokens `"t0".."t{V-1}"`.
//!   A prompt is filler with one `A B` bigram, ending in `A`; the answer is
//!   `B`. Filler never contains `A` or `B`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{LmError, Result};
use crate::rng::Rng;
use crate::text::{Vocab, SPECIAL_TOKENS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub prompt: Vec<usize>,
    pub answer: usize,
}

#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub vocab: Vocab,
    pub train: Vec<TaskItem>,
    pub test: Vec<TaskItem>,
}

impl TaskDataset {
    /// JSON lines `{"prompt":[...],"answer":n}`.
    pub fn to_jsonl(items: &[TaskItem]) -> String {
        let mut s = String::new();
        for it in items {
            s.push_str(&serde_json::to_string(it).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<TaskItem>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| LmError::Parse {
                    source_name: "task jsonl".into(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModularAddParams {
    pub modulus: usize,
    /// Fraction of items placed in the training split.
    pub train_fraction: f64,
    /// `None` enumerates all `m^2` pairs; `Some(n)` samples `n` pairs.
    pub samples: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InductionParams {
    /// Number of content tokens.
    pub vocab: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of ordered `(A, B)` pairs reserved for the test split.
    pub heldout_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskKind {
    ModularAdd(ModularAddParams),
    Induction(InductionParams),
}

pub fn synth_task(kind: TaskKind, rng: &mut Rng) -> Result<TaskDataset> {
    match kind {
        TaskKind::ModularAdd(p) => modular_add_task(p, rng),
        TaskKind::Induction(p) => induction_task(p, rng),
    }
}

pub fn modular_vocab(m: usize) -> Result<Vocab> {
    let mut toks: Vec<String> = (0..m).map(|i| i.to_string()).collect();
    toks.push("+".into());
    toks.push("=".into());
    Vocab::from_tokens(toks)
}

/// Prompt ids for `a + b =` under the modular layout.
pub fn modular_prompt(m: usize, a: usize, b: usize) -> Vec<usize> {
    let base = SPECIAL_TOKENS.len();
    vec![base + a, base + m, base + b, base + m + 1]
}

pub fn modular_add_task(p: ModularAddParams, rng: &mut Rng) -> Result<TaskDataset> {
    let m = p.modulus;
    if m < 2 {
        return Err(LmError::Config(format!("modulus must be at least 2, got {m}")));
    }
    if !(0.0..=1.0).contains(&p.train_fraction) {
        return Err(LmError::Config(format!("train fraction {} outside [0, 1]", p.train_fraction)));
    }
    let base = SPECIAL_TOKENS.len();
    let mut pairs: Vec<(usize, usize)> = match p.samples {
        None => (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).collect(),
        Some(n) => (0..n).map(|_| (rng.random_range(0..m), rng.random_range(0..m))).collect(),
    };
    pairs.shuffle(rng);
    let items: Vec<TaskItem> = pairs
        .into_iter()
        .map(|(a, b)| TaskItem {
            prompt: modular_prompt(m, a, b),
            answer: base + (a + b) % m,
        })
        .collect();
    let n_train = (p.train_fraction * items.len() as f64).round() as usize;
    let mut train = items;
    let test = train.split_off(n_train);
    Ok(TaskDataset {
        vocab: modular_vocab(m)?,
        train,
        test,
    })
}

pub fn induction_vocab(v: usize) -> Result<Vocab> {
    Vocab::from_tokens((0..v).map(|i| format!("t{i}")))
}

pub fn induction_task(p: InductionParams, rng: &mut Rng) -> Result<TaskDataset> {
    if p.vocab < 4 {
        return Err(LmError::Config(format!("induction needs at least 4 content tokens, got {}", p.vocab)));
    }
    if p.seq_len < 3 {
        return Err(LmError::Config(format!("induction prompts need length >= 3, got {}", p.seq_len)));
    }
    if !(p.heldout_fraction > 0.0 && p.heldout_fraction < 1.0) {
        return Err(LmError::Config(format!(
            "held-out pair fraction {} must lie strictly between 0 and 1",
            p.heldout_fraction
        )));
    }
    let base = SPECIAL_TOKENS.len();
    let mut pairs: Vec<(usize, usize)> = (0..p.vocab)
        .flat_map(|a| (0..p.vocab).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(rng);
    let n_held = ((p.heldout_fraction * pairs.len() as f64).round() as usize).clamp(1, pairs.len() - 1);
    let held: BTreeSet<(usize, usize)> = pairs[..n_held].iter().copied().collect();
    let (test_pairs, train_pairs) = pairs.split_at(n_held);
    let make = |pool: &[(usize, usize)], n: usize, rng: &mut Rng| -> Vec<TaskItem> {
        (0..n)
            .map(|_| {
                let (a, b) = pool[rng.random_range(0..pool.len())];
                let filler: Vec<usize> = (0..p.vocab).filter(|&t| t != a && t != b).collect();
                let mut seq: Vec<usize> =
                    (0..p.seq_len).map(|_| filler[rng.random_range(0..filler.len())]).collect();
                let at = rng.random_range(0..p.seq_len - 2);
                seq[at] = a;
                seq[at + 1] = b;
                seq[p.seq_len - 1] = a;
                TaskItem {
                    prompt: seq.into_iter().map(|t| base + t).collect(),
                    answer: base + b,
                }
            })
            .collect()
    };
    let train = make(train_pairs, p.n_train, rng);
    let test = make(test_pairs, p.n_test, rng);
    debug_assert!(test.iter().all(|it| held.contains(&(it.prompt[p.seq_len - 1] - base, it.answer - base))));
    Ok(TaskDataset {
        vocab: induction_vocab(p.vocab)?,
        train,
        test,
    })
}

/// `(A, B)` of an induction item.
pub fn induction_pair(item: &TaskItem) -> (usize, usize) {
    (*item.prompt.last().expect("non-empty prompt"), item.answer)
}

/// Position of the first occurrence of the final token of the prompt.
pub fn induction_first_occurrence(item: &TaskItem) -> Option<usize> {
    let a = *item.prompt.last()?;
    item.prompt.iter().position(|&t| t == a).filter(|&i| i + 1 < item.prompt.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn mod5_three_plus_four() {
        let d = modular_add_task(
            ModularAddParams {
                modulus: 5,
                train_fraction: 1.0,
                samples: None,
            },
            &mut seeded(0),
        )
        .unwrap();
        let it = d.train.iter().find(|it| it.prompt == modular_prompt(5, 3, 4)).unwrap();
        assert_eq!(d.vocab.token(it.answer), "2");
        let text: Vec<&str> = it.prompt.iter().map(|&i| d.vocab.token(i)).collect();
        assert_eq!(text, ["3", "+", "4", "="]);
    }

    #[test]
    fn exhaustive_has_m_squared_items() {
        for m in [2, 7, 13] {
            let d = modular_add_task(
                ModularAddParams {
                    modulus: m,
                    train_fraction: 0.3,
                    samples: None,
                },
                &mut seeded(1),
            )
            .unwrap();
            assert_eq!(d.train.len() + d.test.len(), m * m);
            let all: BTreeSet<Vec<usize>> = d.train.iter().chain(&d.test).map(|i| i.prompt.clone()).collect();
            assert_eq!(all.len(), m * m);
        }
    }

    #[test]
    fn modulus_one_rejected() {
        let p = ModularAddParams {
            modulus: 1,
            train_fraction: 0.5,
            samples: None,
        };
        assert!(matches!(modular_add_task(p, &mut seeded(0)), Err(LmError::Config(_))));
    }

    fn induction() -> TaskDataset {
        induction_task(
            InductionParams {
                vocab: 8,
                seq_len: 10,
                n_train: 300,
                n_test: 100,
                heldout_fraction: 0.25,
            },
            &mut seeded(2),
        )
        .unwrap()
    }

    #[test]
    fn induction_answer_follows_first_occurrence() {
        let d = induction();
        for it in d.train.iter().chain(&d.test) {
            let first = induction_first_occurrence(it).unwrap();
            assert!(first + 1 < it.prompt.len() - 1);
            assert_eq!(it.prompt[first + 1], it.answer);
            let a = *it.prompt.last().unwrap();
            assert_eq!(it.prompt.iter().filter(|&&t| t == a).count(), 2);
        }
    }

    #[test]
    fn induction_pairs_disjoint() {
        let d = induction();
        let tr: BTreeSet<_> = d.train.iter().map(induction_pair).collect();
        let te: BTreeSet<_> = d.test.iter().map(induction_pair).collect();
        assert!(tr.is_disjoint(&te));
        assert!(!te.is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let d = induction();
        let s = TaskDataset::to_jsonl(&d.test);
        assert!(s.lines().next().unwrap().starts_with("{\"prompt\":["));
        assert_eq!(TaskDataset::from_jsonl(&s).unwrap(), d.test);
    }
}
