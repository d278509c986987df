use super::{Grammar, Symbol};
use crate::error::{LmError, Result};

/// A derivation tree. Spans are half-open `[start, end)` token positions.
#[derive(Clone, Debug, PartialEq)]
pub enum ParseTree {
    Leaf {
        terminal: usize,
        position: usize,
    },
    Node {
        lhs: usize,
        rule: usize,
        span: (usize, usize),
        children: Vec<ParseTree>,
    },
}

impl ParseTree {
    pub fn span(&self) -> (usize, usize) {
        match self {
            ParseTree::Leaf { position, .. } => (*position, position + 1),
            ParseTree::Node { span, .. } => *span,
        }
    }

    pub fn symbol(&self) -> Symbol {
        match self {
            ParseTree::Leaf { terminal, .. } => Symbol::T(*terminal),
            ParseTree::Node { lhs, .. } => Symbol::N(*lhs),
        }
    }

    pub fn children(&self) -> &[ParseTree] {
        match self {
            ParseTree::Leaf { .. } => &[],
            ParseTree::Node { children, .. } => children,
        }
    }

    /// Terminal ids left to right.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |t, _| out.push(t));
        out
    }

    fn visit_leaves(&self, f: &mut impl FnMut(usize, usize)) {
        match self {
            ParseTree::Leaf { terminal, position } => f(*terminal, *position),
            ParseTree::Node { children, .. } => children.iter().for_each(|c| c.visit_leaves(f)),
        }
    }

    /// Rule indices in leftmost-derivation (pre-)order.
    pub fn rules_used(&self) -> Vec<usize> {
        let mut out = Vec::new();
        fn go(t: &ParseTree, out: &mut Vec<usize>) {
            if let ParseTree::Node { rule, children, .. } = t {
                out.push(*rule);
                children.iter().for_each(|c| go(c, out));
            }
        }
        go(self, &mut out);
        out
    }

    /// Sum of log rule probabilities; 0 for a non-probabilistic grammar.
    pub fn log_prob(&self, g: &Grammar) -> f64 {
        self.rules_used().iter().map(|&r| g.rules()[r].log_prob()).sum()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(ParseTree::node_count).sum::<usize>()
    }

    /// Checks that every node matches its rule and that spans tile the leaves.
    pub fn validate(&self, g: &Grammar) -> Result<()> {
        match self {
            ParseTree::Leaf { terminal, .. } => {
                if *terminal >= g.terminals().len() {
                    return Err(LmError::Data(format!("leaf terminal {terminal} out of range")));
                }
            }
            ParseTree::Node {
                lhs,
                rule,
                span,
                children,
            } => {
                let r = g
                    .rules()
                    .get(*rule)
                    .ok_or_else(|| LmError::Data(format!("rule index {rule} out of range")))?;
                let syms: Vec<Symbol> = children.iter().map(ParseTree::symbol).collect();
                if r.lhs != *lhs || r.rhs != syms {
                    return Err(LmError::Data(format!(
                        "node does not match rule {}",
                        g.rule_to_string(r)
                    )));
                }
                let mut at = span.0;
                for c in children {
                    let (s, e) = c.span();
                    if s != at {
                        return Err(LmError::Data(format!("child span starts at {s}, expected {at}")));
                    }
                    at = e;
                    c.validate(g)?;
                }
                if at != span.1 {
                    return Err(LmError::Data(format!("children end at {at}, span ends at {}", span.1)));
                }
            }
        }
        Ok(())
    }

    /// Bracketed form, e.g. `(EXPR (TERM (VALUE y)) + (EXPR ...))`.
    pub fn render(&self, g: &Grammar) -> String {
        match self {
            ParseTree::Leaf { terminal, .. } => g.terminals()[*terminal].clone(),
            ParseTree::Node { lhs, children, .. } => {
                let mut s = format!("({}", g.nonterminals()[*lhs]);
                for c in children {
                    s.push(' ');
                    s.push_str(&c.render(g));
                }
                s.push(')');
                s
            }
        }
    }

    /// Indented one-node-per-line rendering.
    pub fn render_indented(&self, g: &Grammar) -> String {
        let mut out = String::new();
        fn go(t: &ParseTree, g: &Grammar, depth: usize, out: &mut String) {
            for _ in 0..depth {
                out.push_str("  ");
            }
            match t {
                ParseTree::Leaf { terminal, .. } => {
                    out.push_str(&g.terminals()[*terminal]);
                    out.push('\n');
                }
                ParseTree::Node {
                    lhs, span, children, ..
                } => {
                    out.push_str(&format!("{} [{}, {})\n", g.nonterminals()[*lhs], span.0, span.1));
                    children.iter().for_each(|c| go(c, g, depth + 1, out));
                }
            }
        }
        go(self, g, 0, &mut out);
        out
    }
}

/// Number of edges between every pair of leaves.
pub fn tree_distance_matrix(t: &ParseTree) -> Vec<Vec<usize>> {
    // Root-to-leaf paths as sequences of child indices; the distance is the
    // sum of the two depths below the deepest common ancestor.
    let mut paths: Vec<Vec<usize>> = Vec::new();
    fn go(t: &ParseTree, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        match t {
            ParseTree::Leaf { .. } => out.push(path.clone()),
            ParseTree::Node { children, .. } => {
                for (i, c) in children.iter().enumerate() {
                    path.push(i);
                    go(c, path, out);
                    path.pop();
                }
            }
        }
    }
    go(t, &mut Vec::new(), &mut paths);
    let n = paths.len();
    let mut d = vec![vec![0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let common = paths[i].iter().zip(&paths[j]).take_while(|(a, b)| a == b).count();
            let v = paths[i].len() + paths[j].len() - 2 * common;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}
