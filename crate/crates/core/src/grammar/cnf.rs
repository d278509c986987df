//! Chomsky normal form conversion that keeps a one-to-one correspondence
//! between derivations, so string probabilities survive exactly and CNF
//! parses can be mapped back onto the source grammar.

use std::collections::{BTreeMap, HashSet};

use super::{Grammar, ParseTree, Rule, Symbol};
use crate::error::{LmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum RuleOrigin {
    /// `chain` is the sequence of unit rules applied before `rule`; the CNF
    /// rule is the head of the (possibly binarized) image of `rule`.
    Source { chain: Vec<usize>, rule: usize },
    /// Right spine of a binarized rule, probability 1.
    Continuation,
    /// `T_t -> t`, probability 1.
    TerminalWrap,
}

#[derive(Clone, Debug)]
pub struct CnfGrammar {
    grammar: Grammar,
    source: Grammar,
    origins: Vec<RuleOrigin>,
}

impl CnfGrammar {
    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn source(&self) -> &Grammar {
        &self.source
    }

    pub fn origins(&self) -> &[RuleOrigin] {
        &self.origins
    }

    /// Undo binarization, terminal wrapping and unit-chain collapsing.
    pub fn to_source_tree(&self, t: &ParseTree) -> Result<ParseTree> {
        let ParseTree::Node { rule, span, .. } = t else {
            return Err(LmError::Contract("a CNF tree must have a rule at its root".into()));
        };
        let RuleOrigin::Source { chain, rule: src } = &self.origins[*rule] else {
            return Err(LmError::Contract(format!(
                "CNF rule {rule} is not the image of a source rule"
            )));
        };
        // Collect the flattened children by walking the continuation spine.
        let mut flat: Vec<&ParseTree> = Vec::new();
        let mut cur = t;
        loop {
            let kids = cur.children();
            match kids {
                [a, b] if self.is_continuation(b) => {
                    flat.push(a);
                    cur = b;
                }
                _ => {
                    flat.extend(kids.iter());
                    break;
                }
            }
        }
        let children = flat
            .into_iter()
            .map(|c| match c {
                ParseTree::Leaf { .. } => Ok(c.clone()),
                ParseTree::Node { rule, children, .. }
                    if self.origins[*rule] == RuleOrigin::TerminalWrap =>
                {
                    Ok(children[0].clone())
                }
                _ => self.to_source_tree(c),
            })
            .collect::<Result<Vec<_>>>()?;
        let rules = self.source.rules();
        let mut node = ParseTree::Node {
            lhs: rules[*src].lhs,
            rule: *src,
            span: *span,
            children,
        };
        for &u in chain.iter().rev() {
            node = ParseTree::Node {
                lhs: rules[u].lhs,
                rule: u,
                span: *span,
                children: vec![node],
            };
        }
        Ok(node)
    }

    fn is_continuation(&self, t: &ParseTree) -> bool {
        matches!(t, ParseTree::Node { rule, .. } if self.origins[*rule] == RuleOrigin::Continuation)
    }

    /// Expected source-rule counts from expected CNF-rule counts.
    pub fn source_rule_counts(&self, cnf_counts: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.source.rules().len()];
        for (c, origin) in cnf_counts.iter().zip(&self.origins) {
            if let RuleOrigin::Source { chain, rule } = origin {
                for &u in chain {
                    out[u] += c;
                }
                out[*rule] += c;
            }
        }
        out
    }
}

/// Converts to CNF: unit chains are folded into the rules they end in,
/// terminals inside long right hand sides get a `T_t -> t` wrapper, and long
/// right hand sides are binarized with fresh nonterminals per rule.
pub fn to_cnf(g: &Grammar) -> Result<CnfGrammar> {
    let src_rules = g.rules();
    let mut names: Vec<String> = g.nonterminals().to_vec();
    let mut taken: HashSet<String> = names.iter().chain(g.terminals()).cloned().collect();
    let mut fresh = |base: String, names: &mut Vec<String>| -> usize {
        let mut name = base;
        while taken.contains(&name) {
            name.push('\'');
        }
        taken.insert(name.clone());
        names.push(name);
        names.len() - 1
    };

    let mut by_lhs: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
    for (i, r) in src_rules.iter().enumerate() {
        by_lhs[r.lhs].push(i);
    }
    // Every unit chain from each nonterminal (the unit graph is acyclic).
    fn chains(a: usize, g: &Grammar, by_lhs: &[Vec<usize>], path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(path.clone());
        for &ri in &by_lhs[a] {
            if let [Symbol::N(b)] = g.rules()[ri].rhs.as_slice() {
                path.push(ri);
                chains(*b, g, by_lhs, path, out);
                path.pop();
            }
        }
    }

    let mut rules: Vec<Rule> = Vec::new();
    let mut origins: Vec<RuleOrigin> = Vec::new();
    let mut wraps: BTreeMap<usize, usize> = BTreeMap::new();
    let mut wrap_rules: Vec<(usize, usize)> = Vec::new();
    let prob_mode = g.is_probabilistic();

    for a in 0..g.nonterminals().len() {
        let mut all = Vec::new();
        chains(a, g, &by_lhs, &mut Vec::new(), &mut all);
        for chain in all {
            let end = chain.last().map_or(a, |&u| match src_rules[u].rhs[0] {
                Symbol::N(b) => b,
                Symbol::T(_) => unreachable!("unit rules have a nonterminal rhs"),
            });
            let chain_p: f64 = chain.iter().map(|&u| src_rules[u].prob.unwrap_or(1.0)).product();
            for &ri in &by_lhs[end] {
                let r = &src_rules[ri];
                if r.is_unit() {
                    continue;
                }
                let prob = prob_mode.then(|| chain_p * r.prob.unwrap_or(1.0));
                let origin = RuleOrigin::Source {
                    chain: chain.clone(),
                    rule: ri,
                };
                if let [t @ Symbol::T(_)] = r.rhs.as_slice() {
                    rules.push(Rule {
                        lhs: a,
                        rhs: vec![*t],
                        prob,
                    });
                    origins.push(origin);
                    continue;
                }
                let syms: Vec<Symbol> = r
                    .rhs
                    .iter()
                    .map(|s| match *s {
                        Symbol::N(_) => *s,
                        Symbol::T(t) => {
                            let id = *wraps.entry(t).or_insert_with(|| {
                                let id = fresh(format!("T_{}", g.terminals()[t]), &mut names);
                                wrap_rules.push((id, t));
                                id
                            });
                            Symbol::N(id)
                        }
                    })
                    .collect();
                // A -> X1 C1, C1 -> X2 C2, ..., C_{k-2} -> X_{k-1} X_k
                let k = syms.len();
                let mut lhs = a;
                let mut head = true;
                for (i, s) in syms.iter().enumerate().take(k - 2) {
                    let c = fresh(format!("{}_{}_{}", g.nonterminals()[r.lhs], ri, i + 1), &mut names);
                    rules.push(Rule {
                        lhs,
                        rhs: vec![*s, Symbol::N(c)],
                        prob: if head { prob } else { prob_mode.then_some(1.0) },
                    });
                    origins.push(if head { origin.clone() } else { RuleOrigin::Continuation });
                    head = false;
                    lhs = c;
                }
                rules.push(Rule {
                    lhs,
                    rhs: vec![syms[k - 2], syms[k - 1]],
                    prob: if head { prob } else { prob_mode.then_some(1.0) },
                });
                origins.push(if head { origin } else { RuleOrigin::Continuation });
            }
        }
    }
    for (id, t) in wrap_rules {
        rules.push(Rule {
            lhs: id,
            rhs: vec![Symbol::T(t)],
            prob: prob_mode.then_some(1.0),
        });
        origins.push(RuleOrigin::TerminalWrap);
    }
    let grammar = Grammar::from_parts(names, g.terminals().to_vec(), g.start(), rules)?;
    debug_assert!(grammar.is_cnf());
    Ok(CnfGrammar {
        grammar,
        source: g.clone(),
        origins,
    })
}
