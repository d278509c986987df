//! Context-free grammars, optionally probabilistic.
//!
//! Grammar files hold one rule per line, `LHS -> sym sym ... [p]`, with `#`
//! starting a comment. A symbol is a nonterminal iff it appears on some left
//! hand side (or in a `%nonterminals` directive); every other symbol is a
//! terminal. `%start NAME` picks the start symbol, which otherwise is the lhs
//! of the first rule. Either every rule carries a bracketed probability or
//! none does.

mod cnf;
mod generate;
mod parse;
mod tasks;
mod tree;

pub use cnf::{to_cnf, CnfGrammar, RuleOrigin};
pub use generate::{generate, grammar_entropy_floor, EntropyEstimate, GenerateOptions, Generated};
pub use parse::{cyk_parse, inside_chart, inside_logprob, reestimate, rule_posteriors, Chart};
pub use tasks::{
    induction_first_occurrence, induction_pair, induction_task, induction_vocab, modular_add_task,
    modular_prompt, modular_vocab, synth_task, InductionParams, ModularAddParams, TaskDataset, TaskItem,
    TaskKind,
};
pub use tree::{tree_distance_matrix, ParseTree};

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{LmError, Result};

pub const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    N(usize),
    T(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub lhs: usize,
    pub rhs: Vec<Symbol>,
    pub prob: Option<f64>,
}

impl Rule {
    pub fn is_unit(&self) -> bool {
        matches!(self.rhs.as_slice(), [Symbol::N(_)])
    }

    pub fn log_prob(&self) -> f64 {
        self.prob.map_or(0.0, f64::ln)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    nonterminals: Vec<String>,
    terminals: Vec<String>,
    start: usize,
    rules: Vec<Rule>,
}

const FIG3_RULES: &str = "\
# Arithmetic expressions
EXPR -> TERM + EXPR
EXPR -> ( EXPR )
EXPR -> TERM
TERM -> VALUE * TERM
TERM -> ( EXPR )
TERM -> VALUE
VALUE -> x
VALUE -> y
VALUE -> 1
";

const FIG3_PCFG: &str = "\
# Arithmetic expressions; a VALUE is a number 75% of the time
EXPR -> TERM + EXPR [0.3]
EXPR -> ( EXPR ) [0.1]
EXPR -> TERM [0.6]
TERM -> VALUE * TERM [0.3]
TERM -> ( EXPR ) [0.1]
TERM -> VALUE [0.6]
VALUE -> x [0.125]
VALUE -> y [0.125]
VALUE -> 1 [0.75]
";

/// Names accepted by [`Grammar::builtin`].
pub const BUILTIN_GRAMMARS: [&str; 2] = ["fig3", "fig3-pcfg"];

impl Grammar {
    pub fn builtin(name: &str) -> Result<Grammar> {
        match name {
            "fig3" | "arith" => Grammar::parse(FIG3_RULES, "fig3"),
            "fig3-pcfg" | "arith-pcfg" => Grammar::parse(FIG3_PCFG, "fig3-pcfg"),
            other => Err(LmError::Config(format!(
                "unknown built-in grammar {other:?} (known: {})",
                BUILTIN_GRAMMARS.join(", ")
            ))),
        }
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Grammar> {
        let err = |line: usize, message: String| LmError::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        struct RawRule {
            line: usize,
            lhs: String,
            rhs: Vec<String>,
            prob: Option<f64>,
        }
        let mut raw = Vec::new();
        let mut declared: Option<(usize, Vec<String>)> = None;
        let mut start_name: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("%start") {
                start_name = Some(rest.trim().to_string());
                continue;
            }
            if let Some(rest) = line.strip_prefix("%nonterminals") {
                declared = Some((lineno, rest.split_whitespace().map(String::from).collect()));
                continue;
            }
            let (lhs, rhs) = line
                .split_once("->")
                .ok_or_else(|| err(lineno, "expected `LHS -> symbols`".into()))?;
            let lhs = lhs.trim();
            if lhs.is_empty() || lhs.contains(char::is_whitespace) {
                return Err(err(lineno, format!("left hand side must be a single symbol, got {lhs:?}")));
            }
            let mut syms: Vec<String> = rhs.split_whitespace().map(String::from).collect();
            let mut prob = None;
            if let Some(last) = syms.last() {
                if last.starts_with('[') && last.ends_with(']') && last.len() > 2 {
                    let p: f64 = last[1..last.len() - 1]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad probability {last}")))?;
                    if !(p > 0.0 && p <= 1.0 + PROB_TOLERANCE) {
                        return Err(err(lineno, format!("probability {p} outside (0, 1]")));
                    }
                    prob = Some(p);
                    syms.pop();
                }
            }
            if syms.is_empty() {
                return Err(err(lineno, "empty right hand side (epsilon rules are not supported)".into()));
            }
            raw.push(RawRule {
                line: lineno,
                lhs: lhs.to_string(),
                rhs: syms,
                prob,
            });
        }
        if raw.is_empty() {
            return Err(err(0, "grammar has no rules".into()));
        }

        let mut nonterminals: Vec<String> = Vec::new();
        let mut nt_index: HashMap<String, usize> = HashMap::new();
        if let Some((_, names)) = &declared {
            for n in names {
                if !nt_index.contains_key(n) {
                    nt_index.insert(n.clone(), nonterminals.len());
                    nonterminals.push(n.clone());
                }
            }
        }
        for r in &raw {
            if !nt_index.contains_key(&r.lhs) {
                if declared.is_some() {
                    return Err(err(r.line, format!("unknown symbol {:?} on left hand side", r.lhs)));
                }
                nt_index.insert(r.lhs.clone(), nonterminals.len());
                nonterminals.push(r.lhs.clone());
            }
        }
        let mut terminals: Vec<String> = Vec::new();
        let mut t_index: HashMap<String, usize> = HashMap::new();
        let mut rules = Vec::with_capacity(raw.len());
        let mut seen: HashSet<(usize, Vec<Symbol>)> = HashSet::new();
        for r in &raw {
            let lhs = nt_index[&r.lhs];
            let rhs: Vec<Symbol> = r
                .rhs
                .iter()
                .map(|s| match nt_index.get(s) {
                    Some(&n) => Symbol::N(n),
                    None => {
                        let next = terminals.len();
                        let id = *t_index.entry(s.clone()).or_insert_with(|| {
                            terminals.push(s.clone());
                            next
                        });
                        Symbol::T(id)
                    }
                })
                .collect();
            if !seen.insert((lhs, rhs.clone())) {
                return Err(err(r.line, format!("duplicate rule for {}", r.lhs)));
            }
            rules.push(Rule {
                lhs,
                rhs,
                prob: r.prob,
            });
        }
        let with_prob = raw.iter().filter(|r| r.prob.is_some()).count();
        if with_prob != 0 && with_prob != raw.len() {
            let line = raw.iter().find(|r| r.prob.is_none()).map_or(0, |r| r.line);
            return Err(err(line, "either every rule or no rule must carry a probability".into()));
        }
        let start = match start_name {
            Some(s) => *nt_index
                .get(&s)
                .ok_or_else(|| err(0, format!("start symbol {s:?} has no rules")))?,
            None => nt_index[&raw[0].lhs],
        };
        let mut g = Grammar {
            nonterminals,
            terminals,
            start,
            rules,
        };
        if with_prob != 0 {
            for (nt, sum) in g.prob_sums() {
                if (sum - 1.0).abs() > PROB_TOLERANCE {
                    let line = raw.iter().find(|r| nt_index[&r.lhs] == nt).map_or(0, |r| r.line);
                    return Err(err(
                        line,
                        format!("probabilities for {} sum to {sum}, not 1", g.nonterminals[nt]),
                    ));
                }
            }
            g.normalize();
        }
        g.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(g)
    }

    /// Assembles a grammar from parts, checking the same invariants as
    /// [`Grammar::parse`] except duplicate rules.
    pub fn from_parts(
        nonterminals: Vec<String>,
        terminals: Vec<String>,
        start: usize,
        rules: Vec<Rule>,
    ) -> Result<Grammar> {
        let g = Grammar {
            nonterminals,
            terminals,
            start,
            rules,
        };
        g.validate()?;
        Ok(g)
    }

    fn prob_sums(&self) -> Vec<(usize, f64)> {
        let mut sums = vec![0.0; self.nonterminals.len()];
        for r in &self.rules {
            sums[r.lhs] += r.prob.unwrap_or(0.0);
        }
        sums.into_iter().enumerate().collect()
    }

    fn normalize(&mut self) {
        let sums = self.prob_sums();
        for r in &mut self.rules {
            if let Some(p) = r.prob.as_mut() {
                *p /= sums[r.lhs].1;
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.start >= self.nonterminals.len() {
            return Err(LmError::Data("start symbol out of range".into()));
        }
        for r in &self.rules {
            if r.lhs >= self.nonterminals.len() {
                return Err(LmError::Data(format!("rule lhs {} is not a nonterminal", r.lhs)));
            }
            if r.rhs.is_empty() {
                return Err(LmError::Unsupported("epsilon rules are not supported".into()));
            }
            for s in &r.rhs {
                let ok = match *s {
                    Symbol::N(n) => n < self.nonterminals.len(),
                    Symbol::T(t) => t < self.terminals.len(),
                };
                if !ok {
                    return Err(LmError::Data(format!("rule references unknown symbol {s:?}")));
                }
            }
        }
        let has_rules: HashSet<usize> = self.rules.iter().map(|r| r.lhs).collect();
        if let Some(n) = (0..self.nonterminals.len()).find(|n| !has_rules.contains(n)) {
            return Err(LmError::Data(format!("nonterminal {} has no rules", self.nonterminals[n])));
        }
        if self.is_probabilistic() {
            for (nt, sum) in self.prob_sums() {
                if (sum - 1.0).abs() > PROB_TOLERANCE {
                    return Err(LmError::Data(format!(
                        "probabilities for {} sum to {sum}",
                        self.nonterminals[nt]
                    )));
                }
            }
        }
        self.check_unit_cycles()
    }

    fn check_unit_cycles(&self) -> Result<()> {
        let n = self.nonterminals.len();
        let mut edges = vec![Vec::new(); n];
        for r in &self.rules {
            if let [Symbol::N(b)] = r.rhs.as_slice() {
                edges[r.lhs].push(*b);
            }
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        fn visit(v: usize, edges: &[Vec<usize>], state: &mut [u8]) -> bool {
            state[v] = 1;
            for &w in &edges[v] {
                if state[w] == 1 || (state[w] == 0 && visit(w, edges, state)) {
                    return true;
                }
            }
            state[v] = 2;
            false
        }
        for v in 0..n {
            if state[v] == 0 && visit(v, &edges, &mut state) {
                return Err(LmError::Unsupported(format!(
                    "cyclic unit-rule chain through {}",
                    self.nonterminals[v]
                )));
            }
        }
        Ok(())
    }

    pub fn is_probabilistic(&self) -> bool {
        self.rules.first().is_some_and(|r| r.prob.is_some())
    }

    /// Same rules with equal probability for every rule of each lhs.
    pub fn with_uniform_probabilities(&self) -> Grammar {
        let mut counts = vec![0usize; self.nonterminals.len()];
        for r in &self.rules {
            counts[r.lhs] += 1;
        }
        let mut g = self.clone();
        for r in &mut g.rules {
            r.prob = Some(1.0 / counts[r.lhs] as f64);
        }
        g
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn nonterminal_id(&self, name: &str) -> Option<usize> {
        self.nonterminals.iter().position(|n| n == name)
    }

    pub fn terminal_id(&self, name: &str) -> Option<usize> {
        self.terminals.iter().position(|n| n == name)
    }

    pub fn symbol_name(&self, s: Symbol) -> &str {
        match s {
            Symbol::N(n) => &self.nonterminals[n],
            Symbol::T(t) => &self.terminals[t],
        }
    }

    /// Whitespace-separated terminal names to ids.
    pub fn tokens_from_str(&self, input: &str) -> Result<Vec<usize>> {
        input
            .split_whitespace()
            .map(|t| {
                self.terminal_id(t)
                    .ok_or_else(|| LmError::Data(format!("unknown terminal {t:?}")))
            })
            .collect()
    }

    pub fn tokens_to_string(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.terminals[t].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn is_cnf(&self) -> bool {
        self.rules.iter().all(|r| {
            matches!(r.rhs.as_slice(), [Symbol::T(_)] | [Symbol::N(_), Symbol::N(_)])
        })
    }

    pub fn rule_to_string(&self, r: &Rule) -> String {
        let mut s = format!("{} ->", self.nonterminals[r.lhs]);
        for sym in &r.rhs {
            s.push(' ');
            s.push_str(self.symbol_name(*sym));
        }
        if let Some(p) = r.prob {
            write!(s, " [{p}]").expect("String write");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("%start {}\n", self.nonterminals[self.start]);
        for r in &self.rules {
            s.push_str(&self.rule_to_string(r));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_fixture_shape() {
        let g = Grammar::builtin("fig3").unwrap();
        assert_eq!(g.rules().len(), 9);
        assert_eq!(g.nonterminals(), &["EXPR", "TERM", "VALUE"]);
        let mut t: Vec<&str> = g.terminals().iter().map(String::as_str).collect();
        t.sort();
        let mut expected = vec!["+", "*", "(", ")", "x", "y", "1"];
        expected.sort();
        assert_eq!(t, expected);
        assert!(!g.is_probabilistic());
    }

    #[test]
    fn value_is_a_number_three_quarters_of_the_time() {
        let g = Grammar::builtin("fig3-pcfg").unwrap();
        let value = g.nonterminal_id("VALUE").unwrap();
        let one = g.terminal_id("1").unwrap();
        let number: f64 = g
            .rules()
            .iter()
            .filter(|r| r.lhs == value && r.rhs == [Symbol::T(one)])
            .map(|r| r.prob.unwrap())
            .sum();
        assert_eq!(number, 0.75);
        let variable: f64 = g
            .rules()
            .iter()
            .filter(|r| r.lhs == value && r.rhs != [Symbol::T(one)])
            .map(|r| r.prob.unwrap())
            .sum();
        assert_eq!(variable, 0.25);
    }

    #[test]
    fn duplicate_rule_rejected() {
        let e = Grammar::parse("S -> a\nS -> a\n", "t").unwrap_err();
        assert!(matches!(e, LmError::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn bad_probability_sum_rejected_with_line() {
        let e = Grammar::parse("S -> a [0.5]\nS -> b [0.4]\n", "t").unwrap_err();
        assert!(matches!(e, LmError::Parse { line: 1, .. }), "{e}");
    }

    #[test]
    fn empty_rhs_rejected() {
        let e = Grammar::parse("S -> a\nS ->\n", "t").unwrap_err();
        assert!(matches!(e, LmError::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn undeclared_lhs_rejected() {
        let e = Grammar::parse("%nonterminals S\nS -> A\nA -> a\n", "t").unwrap_err();
        assert!(matches!(e, LmError::Parse { line: 3, .. }), "{e}");
    }

    #[test]
    fn unit_cycle_rejected() {
        assert!(Grammar::parse("S -> A\nA -> S\nA -> a\n", "t").is_err());
    }

    #[test]
    fn mixed_probabilities_rejected() {
        assert!(Grammar::parse("S -> a [1.0]\nT -> b\n", "t").is_err());
    }

    #[test]
    fn near_one_sums_are_normalized() {
        let g = Grammar::parse("S -> a [0.3333333333333]\nS -> b [0.6666666666667]\n", "t").unwrap();
        let s: f64 = g.rules().iter().map(|r| r.prob.unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip() {
        let g = Grammar::builtin("fig3-pcfg").unwrap();
        let back = Grammar::parse(&g.to_text(), "rt").unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn unknown_terminal_named() {
        let g = Grammar::builtin("fig3").unwrap();
        let e = g.tokens_from_str("x + z").unwrap_err().to_string();
        assert!(e.contains("\"z\""), "{e}");
    }
}
