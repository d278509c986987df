//! Span dynamic programs over CNF grammars: Viterbi CYK, inside and outside.

use super::{CnfGrammar, Grammar, ParseTree, Symbol};
use crate::error::{LmError, Result};

/// Inside log-probabilities indexed by span and nonterminal.
#[derive(Clone, Debug)]
pub struct Chart {
    n: usize,
    nts: usize,
    cells: Vec<f64>,
}

impl Chart {
    fn new(n: usize, nts: usize) -> Chart {
        Chart {
            n,
            nts,
            cells: vec![f64::NEG_INFINITY; (n + 1) * (n + 1) * nts],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, a: usize) -> usize {
        (i * (self.n + 1) + j) * self.nts + a
    }

    /// Log-probability that nonterminal `a` derives `tokens[i..j]`.
    pub fn get(&self, i: usize, j: usize, a: usize) -> f64 {
        self.cells[self.idx(i, j, a)]
    }

    fn add(&mut self, i: usize, j: usize, a: usize, v: f64) {
        let k = self.idx(i, j, a);
        self.cells[k] = log_add(self.cells[k], v);
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Indexed {
    /// (rule, lhs, B, C)
    binary: Vec<(usize, usize, usize, usize)>,
    /// per terminal: (rule, lhs)
    lexical: Vec<Vec<(usize, usize)>>,
    logp: Vec<f64>,
}

fn index(g: &Grammar, tokens: &[usize]) -> Result<Indexed> {
    if !g.is_cnf() {
        return Err(LmError::Config(
            "grammar is not in Chomsky normal form; convert it with to_cnf first".into(),
        ));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= g.terminals().len()) {
        return Err(LmError::Data(format!("unknown terminal id {t}")));
    }
    let mut binary = Vec::new();
    let mut lexical = vec![Vec::new(); g.terminals().len()];
    for (ri, r) in g.rules().iter().enumerate() {
        match r.rhs[..] {
            [Symbol::N(b), Symbol::N(c)] => binary.push((ri, r.lhs, b, c)),
            [Symbol::T(t)] => lexical[t].push((ri, r.lhs)),
            _ => unreachable!("checked CNF"),
        }
    }
    Ok(Indexed {
        binary,
        lexical,
        logp: g.rules().iter().map(|r| r.log_prob()).collect(),
    })
}

/// Best parse of `tokens`, or `None` when the string is not in the language.
///
/// With probabilities this is the Viterbi tree; ties go to the lowest rule
/// index, then to the leftmost split point.
pub fn cyk_parse(g: &Grammar, tokens: &[usize]) -> Result<Option<ParseTree>> {
    let ix = index(g, tokens)?;
    let n = tokens.len();
    if n == 0 {
        return Ok(None);
    }
    let nts = g.nonterminals().len();
    let cell = |i: usize, j: usize, a: usize| (i * (n + 1) + j) * nts + a;
    // best score and back-pointer (rule, split)
    let mut best = vec![f64::NEG_INFINITY; (n + 1) * (n + 1) * nts];
    let mut back = vec![(usize::MAX, 0usize); (n + 1) * (n + 1) * nts];
    for (i, &t) in tokens.iter().enumerate() {
        for &(ri, a) in &ix.lexical[t] {
            let k = cell(i, i + 1, a);
            if ix.logp[ri] > best[k] || back[k].0 == usize::MAX {
                best[k] = ix.logp[ri];
                back[k] = (ri, i + 1);
            }
        }
    }
    for len in 2..=n {
        for i in 0..=n - len {
            let j = i + len;
            for &(ri, a, b, c) in &ix.binary {
                for s in i + 1..j {
                    let (lb, lc) = (cell(i, s, b), cell(s, j, c));
                    if back[lb].0 == usize::MAX || back[lc].0 == usize::MAX {
                        continue;
                    }
                    let v = ix.logp[ri] + best[lb] + best[lc];
                    let k = cell(i, j, a);
                    if back[k].0 == usize::MAX || v > best[k] {
                        best[k] = v;
                        back[k] = (ri, s);
                    }
                }
            }
        }
    }
    let root = cell(0, n, g.start());
    if back[root].0 == usize::MAX {
        return Ok(None);
    }
    fn build(
        g: &Grammar,
        tokens: &[usize],
        back: &[(usize, usize)],
        cell: &dyn Fn(usize, usize, usize) -> usize,
        i: usize,
        j: usize,
        a: usize,
    ) -> ParseTree {
        let (ri, s) = back[cell(i, j, a)];
        let children = match g.rules()[ri].rhs[..] {
            [Symbol::T(t)] => vec![ParseTree::Leaf {
                terminal: t,
                position: i,
            }],
            [Symbol::N(b), Symbol::N(c)] => vec![
                build(g, tokens, back, cell, i, s, b),
                build(g, tokens, back, cell, s, j, c),
            ],
            _ => unreachable!(),
        };
        debug_assert!(j > i && tokens.len() >= j);
        ParseTree::Node {
            lhs: a,
            rule: ri,
            span: (i, j),
            children,
        }
    }
    Ok(Some(build(g, tokens, &back, &cell, 0, n, g.start())))
}

/// Inside chart of a CNF grammar over `tokens`.
pub fn inside_chart(g: &Grammar, tokens: &[usize]) -> Result<Chart> {
    let ix = index(g, tokens)?;
    let n = tokens.len();
    let mut ch = Chart::new(n, g.nonterminals().len());
    for (i, &t) in tokens.iter().enumerate() {
        for &(ri, a) in &ix.lexical[t] {
            ch.add(i, i + 1, a, ix.logp[ri]);
        }
    }
    for len in 2..=n {
        for i in 0..=n - len {
            let j = i + len;
            for &(ri, a, b, c) in &ix.binary {
                for s in i + 1..j {
                    let (lb, lc) = (ch.get(i, s, b), ch.get(s, j, c));
                    if lb == f64::NEG_INFINITY || lc == f64::NEG_INFINITY {
                        continue;
                    }
                    ch.add(i, j, a, ix.logp[ri] + lb + lc);
                }
            }
        }
    }
    Ok(ch)
}

/// `ln P(tokens)` summed over all parse trees. A string outside the language
/// yields `-inf` (an `Ok` value, unlike malformed input which is an error).
/// Without rule probabilities every rule counts as probability 1, so the
/// result is the log of the number of parses.
pub fn inside_logprob(g: &Grammar, tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let ch = inside_chart(g, tokens)?;
    Ok(ch.get(0, tokens.len(), g.start()))
}

/// Expected number of uses of each CNF rule in a parse of `tokens`, from the
/// inside and outside charts. Zero everywhere if the string is rejected.
pub fn rule_posteriors(g: &Grammar, tokens: &[usize]) -> Result<Vec<f64>> {
    let ix = index(g, tokens)?;
    let n = tokens.len();
    let mut out = vec![0.0; g.rules().len()];
    if n == 0 {
        return Ok(out);
    }
    let inside = inside_chart(g, tokens)?;
    let z = inside.get(0, n, g.start());
    if z == f64::NEG_INFINITY {
        return Ok(out);
    }
    let mut outside = Chart::new(n, g.nonterminals().len());
    outside.add(0, n, g.start(), 0.0);
    for len in (2..=n).rev() {
        for i in 0..=n - len {
            let j = i + len;
            for &(ri, a, b, c) in &ix.binary {
                let oa = outside.get(i, j, a);
                if oa == f64::NEG_INFINITY {
                    continue;
                }
                for s in i + 1..j {
                    let (lb, lc) = (inside.get(i, s, b), inside.get(s, j, c));
                    if lb == f64::NEG_INFINITY || lc == f64::NEG_INFINITY {
                        continue;
                    }
                    let base = oa + ix.logp[ri];
                    outside.add(i, s, b, base + lc);
                    outside.add(s, j, c, base + lb);
                    out[ri] += (base + lb + lc - z).exp();
                }
            }
        }
    }
    for (i, &t) in tokens.iter().enumerate() {
        for &(ri, a) in &ix.lexical[t] {
            out[ri] += (outside.get(i, i + 1, a) + ix.logp[ri] - z).exp();
        }
    }
    Ok(out)
}

/// One expectation-maximization step: re-estimates the source grammar's
/// rule probabilities from expected rule counts over `corpus`. Rules of a
/// nonterminal that is never used keep their old probabilities.
pub fn reestimate(cnf: &CnfGrammar, corpus: &[Vec<usize>]) -> Result<Grammar> {
    let src = cnf.source();
    if !src.is_probabilistic() {
        return Err(LmError::Config("re-estimation needs a probabilistic grammar".into()));
    }
    let mut counts = vec![0.0; src.rules().len()];
    for s in corpus {
        let post = rule_posteriors(cnf.grammar(), s)?;
        for (c, p) in counts.iter_mut().zip(cnf.source_rule_counts(&post)) {
            *c += p;
        }
    }
    let mut totals = vec![0.0; src.nonterminals().len()];
    for (r, c) in src.rules().iter().zip(&counts) {
        totals[r.lhs] += c;
    }
    let rules = src
        .rules()
        .iter()
        .zip(&counts)
        .map(|(r, &c)| {
            let mut r = r.clone();
            if totals[r.lhs] > 0.0 {
                // keep probabilities strictly positive so the grammar stays valid
                r.prob = Some((c / totals[r.lhs]).max(f64::MIN_POSITIVE));
            }
            r
        })
        .collect::<Vec<_>>();
    let mut sums = vec![0.0; src.nonterminals().len()];
    for r in &rules {
        sums[r.lhs] += r.prob.unwrap_or(0.0);
    }
    let rules = rules
        .into_iter()
        .map(|mut r| {
            r.prob = r.prob.map(|p| p / sums[r.lhs]);
            r
        })
        .collect();
    Grammar::from_parts(src.nonterminals().to_vec(), src.terminals().to_vec(), src.start(), rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::to_cnf;

    fn toks(g: &Grammar, s: &str) -> Vec<usize> {
        g.tokens_from_str(s).unwrap()
    }

    #[test]
    fn ambiguous_pair_probability() {
        let g = Grammar::parse("S -> S S [0.4]\nS -> a [0.6]\n", "t").unwrap();
        let lp = inside_logprob(&g, &toks(&g, "a a")).unwrap();
        assert!((lp.exp() - 0.144).abs() < 1e-15);
    }

    #[test]
    fn catalan_many_parses() {
        // S -> S S | a without probabilities: log of the number of binary
        // trees over n leaves, i.e. the Catalan number C_{n-1}.
        let g = Grammar::parse("S -> S S\nS -> a\n", "t").unwrap();
        let catalan = [1.0, 1.0, 2.0, 5.0, 14.0, 42.0, 132.0];
        for n in 1..=7 {
            let lp = inside_logprob(&g, &vec![0; n]).unwrap();
            assert!((lp.exp() - catalan[n - 1]).abs() < 1e-9, "n = {n}");
        }
    }

    #[test]
    fn unambiguous_inside_equals_tree() {
        let g = Grammar::builtin("fig3-pcfg").unwrap();
        let c = to_cnf(&g).unwrap();
        let s = toks(&g, "x * ( y + 1 )");
        let t = cyk_parse(c.grammar(), &s).unwrap().unwrap();
        let inside = inside_logprob(c.grammar(), &s).unwrap();
        assert!((inside - t.log_prob(c.grammar())).abs() < 1e-12);
    }

    #[test]
    fn reject_ungrammatical() {
        let g = Grammar::builtin("fig3").unwrap();
        let c = to_cnf(&g).unwrap();
        assert!(cyk_parse(c.grammar(), &toks(&g, "y + +")).unwrap().is_none());
        assert_eq!(inside_logprob(c.grammar(), &toks(&g, "y + +")).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn non_cnf_rejected() {
        let g = Grammar::builtin("fig3").unwrap();
        assert!(matches!(cyk_parse(&g, &[0]), Err(LmError::Config(_))));
    }

    #[test]
    fn posteriors_of_unambiguous_string_are_counts() {
        let g = Grammar::builtin("fig3-pcfg").unwrap();
        let c = to_cnf(&g).unwrap();
        let s = toks(&g, "y + 1 * x");
        let post = rule_posteriors(c.grammar(), &s).unwrap();
        let src = c.source_rule_counts(&post);
        let tree = c.to_source_tree(&cyk_parse(c.grammar(), &s).unwrap().unwrap()).unwrap();
        let mut expect = vec![0.0; g.rules().len()];
        for r in tree.rules_used() {
            expect[r] += 1.0;
        }
        for (a, b) in src.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{src:?} vs {expect:?}");
        }
    }

    #[test]
    fn posteriors_split_ambiguity() {
        // "a a a" has two trees, each uses S -> S S twice and S -> a three times
        let g = Grammar::parse("S -> S S [0.4]\nS -> a [0.6]\n", "t").unwrap();
        let post = rule_posteriors(&g, &[0, 0, 0]).unwrap();
        assert!((post[0] - 2.0).abs() < 1e-12);
        assert!((post[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn em_moves_toward_data() {
        let g = Grammar::parse("S -> S S [0.5]\nS -> a [0.5]\n", "t").unwrap();
        let c = to_cnf(&g).unwrap();
        let corpus = vec![vec![0], vec![0], vec![0], vec![0, 0]];
        let g2 = reestimate(&c, &corpus).unwrap();
        // one binary use, five leaves
        assert!((g2.rules()[0].prob.unwrap() - 1.0 / 6.0).abs() < 1e-12);
    }
}
