use rand::Rng as _;
use rayon::prelude::*;

use super::{inside_logprob, to_cnf, Grammar, ParseTree, Symbol};
use crate::error::{LmError, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    /// Rule applications allowed before a derivation is abandoned.
    pub max_expansions: usize,
    /// Abandoned derivations allowed before giving up.
    pub max_restarts: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_expansions: 10_000,
            max_restarts: 1_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub tree: ParseTree,
    /// Sum of the log-probabilities of the rules used.
    pub log_prob: f64,
    /// Derivations discarded for exceeding the expansion budget.
    pub restarts: usize,
}

/// Samples a string by leftmost derivation, choosing each rule with its
/// probability.
pub fn generate(g: &Grammar, rng: &mut Rng, opts: GenerateOptions) -> Result<Generated> {
    if !g.is_probabilistic() {
        return Err(LmError::Config(
            "generation needs rule probabilities (try uniform probabilities)".into(),
        ));
    }
    let mut by_lhs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); g.nonterminals().len()];
    for (i, r) in g.rules().iter().enumerate() {
        by_lhs[r.lhs].push((i, r.prob.expect("probabilistic")));
    }
    let mut restarts = 0;
    'attempt: loop {
        // Preorder list of rules; the stack holds pending nonterminals with
        // the leftmost one on top.
        let mut used = Vec::new();
        let mut stack = vec![g.start()];
        while let Some(a) = stack.pop() {
            if used.len() == opts.max_expansions {
                restarts += 1;
                if restarts > opts.max_restarts {
                    return Err(LmError::Config(format!(
                        "generation gave up after {restarts} derivations exceeded {} expansions; \
                         the grammar is probably too recursive",
                        opts.max_expansions
                    )));
                }
                continue 'attempt;
            }
            let u: f64 = rng.random();
            let choices = &by_lhs[a];
            let mut acc = 0.0;
            let mut pick = choices[choices.len() - 1].0;
            for &(ri, p) in choices {
                acc += p;
                if u < acc {
                    pick = ri;
                    break;
                }
            }
            used.push(pick);
            for s in g.rules()[pick].rhs.iter().rev() {
                if let Symbol::N(b) = s {
                    stack.push(*b);
                }
            }
        }
        let mut pos = 0;
        let mut it = used.iter().copied();
        let tree = build(g, &mut it, &mut pos);
        let log_prob = used.iter().map(|&r| g.rules()[r].log_prob()).sum();
        return Ok(Generated {
            tokens: tree.leaves(),
            tree,
            log_prob,
            restarts,
        });
    }
}

fn build(g: &Grammar, rules: &mut impl Iterator<Item = usize>, pos: &mut usize) -> ParseTree {
    let ri = rules.next().expect("derivation is complete");
    let rule = &g.rules()[ri];
    let start = *pos;
    let children = rule
        .rhs
        .iter()
        .map(|s| match *s {
            Symbol::T(t) => {
                *pos += 1;
                ParseTree::Leaf {
                    terminal: t,
                    position: *pos - 1,
                }
            }
            Symbol::N(_) => build(g, rules, pos),
        })
        .collect();
    ParseTree::Node {
        lhs: rule.lhs,
        rule: ri,
        span: (start, *pos),
        children,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyEstimate {
    pub nats_per_token: f64,
    pub std_error: f64,
    pub samples: usize,
    pub mean_length: f64,
    /// Mean `-ln P(string)` per sample.
    pub mean_nll: f64,
    pub restarts: usize,
}

/// Monte Carlo estimate of `E[-ln P(s)] / E[len(s)]` with a delta-method
/// standard error. With `count_terminator` each string contributes one extra
/// token, for corpora that separate strings with an end marker.
pub fn grammar_entropy_floor(
    g: &Grammar,
    n_samples: usize,
    rng: &mut Rng,
    opts: GenerateOptions,
    count_terminator: bool,
) -> Result<EntropyEstimate> {
    if n_samples < 2 {
        return Err(LmError::Config("entropy estimate needs at least 2 samples".into()));
    }
    let cnf = to_cnf(g)?;
    let mut samples = Vec::with_capacity(n_samples);
    let mut restarts = 0;
    for _ in 0..n_samples {
        let s = generate(g, rng, opts)?;
        restarts += s.restarts;
        samples.push(s.tokens);
    }
    let nll: Vec<f64> = samples
        .par_iter()
        .map(|s| inside_logprob(cnf.grammar(), s).map(|lp| 0.0 - lp))
        .collect::<Result<_>>()?;
    let len: Vec<f64> = samples
        .iter()
        .map(|s| (s.len() + usize::from(count_terminator)) as f64)
        .collect();
    let n = n_samples as f64;
    let mx = nll.iter().sum::<f64>() / n;
    let my = len.iter().sum::<f64>() / n;
    let r = mx / my;
    let var = nll
        .iter()
        .zip(&len)
        .map(|(x, y)| (x - r * y).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    Ok(EntropyEstimate {
        nats_per_token: r + 0.0,
        std_error: (var / n).sqrt() / my,
        samples: n_samples,
        mean_length: my,
        mean_nll: mx,
        restarts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::cyk_parse;
    use crate::rng::seeded;

    #[test]
    fn deterministic_grammar() {
        let g = Grammar::parse("S -> a [1.0]\n", "t").unwrap();
        let mut rng = seeded(1);
        for _ in 0..10 {
            let s = generate(&g, &mut rng, GenerateOptions::default()).unwrap();
            assert_eq!(s.tokens, vec![0]);
        }
        let e = grammar_entropy_floor(&g, 100, &mut rng, GenerateOptions::default(), false).unwrap();
        assert_eq!(e.nats_per_token, 0.0);
        assert!(e.nats_per_token.is_sign_positive());
    }

    #[test]
    fn fair_coin() {
        let g = Grammar::parse("S -> a [0.5]\nS -> b [0.5]\n", "t").unwrap();
        let e = grammar_entropy_floor(&g, 200, &mut seeded(2), GenerateOptions::default(), false).unwrap();
        assert!((e.nats_per_token - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tree_probability_is_rule_product() {
        let g = Grammar::builtin("fig3-pcfg").unwrap();
        let mut rng = seeded(3);
        for _ in 0..50 {
            let s = generate(&g, &mut rng, GenerateOptions::default()).unwrap();
            s.tree.validate(&g).unwrap();
            assert_eq!(s.tree.leaves(), s.tokens);
            assert!((s.tree.log_prob(&g) - s.log_prob).abs() < 1e-12);
            assert_eq!(s.tree.span(), (0, s.tokens.len()));
        }
    }

    fn mean_and_sigma(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn branching_process_sizes() {
        // Offspring mean m = 2 * 0.1, so the expected number of S nodes is
        // 1 / (1 - m) = 1.25; each S node is a leaf with probability 0.9,
        // so the expected string length is 0.9 * 1.25 = 1.125.
        let g = Grammar::parse("S -> a [0.9]\nS -> S S [0.1]\n", "t").unwrap();
        let mut rng = seeded(4);
        let samples: Vec<Generated> = (0..10_000)
            .map(|_| generate(&g, &mut rng, GenerateOptions::default()).unwrap())
            .collect();
        let nodes: Vec<f64> = samples.iter().map(|s| s.tree.rules_used().len() as f64).collect();
        let (mean, sigma) = mean_and_sigma(&nodes);
        assert!((mean - 1.25).abs() < 3.0 * sigma, "nodes: mean {mean} sigma {sigma}");
        let lens: Vec<f64> = samples.iter().map(|s| s.tokens.len() as f64).collect();
        let (mean, sigma) = mean_and_sigma(&lens);
        assert!((mean - 1.125).abs() < 3.0 * sigma, "length: mean {mean} sigma {sigma}");
    }

    #[test]
    fn uniform_arithmetic_strings_parse() {
        let g = Grammar::builtin("fig3").unwrap().with_uniform_probabilities();
        let cnf = to_cnf(&g).unwrap();
        let mut rng = seeded(5);
        // uniform rule choice is supercritical here, so keep derivations short
        let opts = GenerateOptions {
            max_expansions: 200,
            max_restarts: 100_000,
        };
        for _ in 0..200 {
            let s = generate(&g, &mut rng, opts).unwrap();
            assert!(cyk_parse(cnf.grammar(), &s.tokens).unwrap().is_some());
        }
    }

    #[test]
    fn too_recursive_grammar_reports() {
        let g = Grammar::parse("S -> S S [0.9]\nS -> a [0.1]\n", "t").unwrap();
        let opts = GenerateOptions {
            max_expansions: 50,
            max_restarts: 5,
        };
        let e = generate(&g, &mut seeded(6), opts).unwrap_err();
        assert!(e.to_string().contains("too recursive"), "{e}");
    }

    #[test]
    fn non_probabilistic_rejected() {
        let g = Grammar::builtin("fig3").unwrap();
        assert!(generate(&g, &mut seeded(0), GenerateOptions::default()).is_err());
    }
}
