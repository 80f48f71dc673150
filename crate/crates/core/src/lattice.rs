//! Prefix-tree hypothesis lattice shared between the two passes.
//!
//! Every non-root node has exactly one incoming arc. A node is terminal when
//! some hypothesis ends there; terminals carry a final weight holding the part
//! of the hypothesis score that is not attributed to individual tokens (blank
//! emissions in the first pass, the end-of-sequence symbol in the second).

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub type NodeId = usize;
pub type ArcId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub parent: Option<NodeId>,
    pub depth: usize,
    /// Outgoing arcs, ordered by token id.
    pub children: Vec<ArcId>,
    pub final_weight: Option<FinalWeight>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinalWeight {
    pub rnnt: f64,
    pub las: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeArc {
    pub from: NodeId,
    pub to: NodeId,
    pub token: TokenId,
    pub rnnt_logp: f64,
    pub las_logp: Option<f64>,
}

/// A first-pass hypothesis: tokens, the log score attributed to each token,
/// and the total log score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub token_logps: Vec<f64>,
    pub score: f64,
}

impl Hypothesis {
    /// Hypothesis whose score is the sum of its token scores.
    pub fn from_tokens(tokens: Vec<TokenId>, token_logps: Vec<f64>) -> Self {
        let score = token_logps.iter().sum();
        Hypothesis {
            tokens,
            token_logps,
            score,
        }
    }
}

/// Interpolation between first- and second-pass scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreWeights {
    pub lambda_las: f64,
}

impl ScoreWeights {
    pub fn new(lambda_las: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_las) {
            return Err(Error::config(format!(
                "lambda_las {lambda_las} outside [0, 1]"
            )));
        }
        Ok(ScoreWeights { lambda_las })
    }

    pub fn first_pass() -> Self {
        ScoreWeights { lambda_las: 0.0 }
    }

    fn combine(&self, rnnt: f64, las: Option<f64>) -> Option<f64> {
        let l = self.lambda_las;
        if l == 0.0 {
            Some(rnnt)
        } else {
            las.map(|s| (1.0 - l) * rnnt + l * s)
        }
    }
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights { lambda_las: 0.5 }
    }
}

/// A root-to-terminal path with its combined score and both pass totals.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPath {
    pub tokens: Vec<TokenId>,
    pub node: NodeId,
    pub score: f64,
    pub rnnt_score: f64,
    pub las_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixTreeLattice {
    nodes: Vec<Node>,
    arcs: Vec<LatticeArc>,
}

impl Default for PrefixTreeLattice {
    fn default() -> Self {
        Self::new()
    }
}

impl PrefixTreeLattice {
    pub const ROOT: NodeId = 0;

    /// Root-only lattice.
    pub fn new() -> Self {
        PrefixTreeLattice {
            nodes: vec![Node {
                parent: None,
                depth: 0,
                children: Vec::new(),
                final_weight: None,
            }],
            arcs: Vec::new(),
        }
    }

    /// Builds the prefix tree of `hyps`. Shared prefixes share arcs; when two
    /// hypotheses disagree on a shared arc's score the first one wins. Duplicate
    /// hypotheses keep the best total score.
    pub fn from_beam_hypotheses(hyps: &[Hypothesis]) -> Result<Self> {
        let mut lat = Self::new();
        for h in hyps {
            if h.tokens.len() != h.token_logps.len() {
                return Err(Error::shape(
                    "hypothesis tokens and scores differ in length",
                ));
            }
            let mut node = Self::ROOT;
            let mut path = 0.0;
            for (&tok, &lp) in h.tokens.iter().zip(&h.token_logps) {
                let arc = match lat.child(node, tok) {
                    Some(a) => a,
                    None => lat.add_arc(node, tok, lp),
                };
                path += lat.arcs[arc].rnnt_logp;
                node = lat.arcs[arc].to;
            }
            let w = h.score - path;
            match &mut lat.nodes[node].final_weight {
                Some(f) if f.rnnt >= w => {}
                slot => *slot = Some(FinalWeight { rnnt: w, las: None }),
            }
        }
        Ok(lat)
    }

    fn add_arc(&mut self, from: NodeId, token: TokenId, rnnt_logp: f64) -> ArcId {
        let to = self.nodes.len();
        let depth = self.nodes[from].depth + 1;
        self.nodes.push(Node {
            parent: Some(from),
            depth,
            children: Vec::new(),
            final_weight: None,
        });
        let id = self.arcs.len();
        self.arcs.push(LatticeArc {
            from,
            to,
            token,
            rnnt_logp,
            las_logp: None,
        });
        let pos = self.nodes[from]
            .children
            .partition_point(|&a| self.arcs[a].token < token);
        self.nodes[from].children.insert(pos, id);
        id
    }

    pub fn child(&self, node: NodeId, token: TokenId) -> Option<ArcId> {
        self.nodes[node]
            .children
            .iter()
            .copied()
            .find(|&a| self.arcs[a].token == token)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn arcs(&self) -> &[LatticeArc] {
        &self.arcs
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn arc(&self, id: ArcId) -> &LatticeArc {
        &self.arcs[id]
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    pub fn terminals(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&n| self.nodes[n].final_weight.is_some())
            .collect()
    }

    /// Arc entering `node`.
    pub fn incoming(&self, node: NodeId) -> Option<ArcId> {
        node.checked_sub(1)
    }

    pub fn path_tokens(&self, node: NodeId) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.nodes[node].depth);
        let mut n = node;
        while let Some(a) = self.incoming(n) {
            out.push(self.arcs[a].token);
            n = self.arcs[a].from;
        }
        out.reverse();
        out
    }

    fn path_arcs(&self, node: NodeId) -> Vec<ArcId> {
        let mut out = Vec::new();
        let mut n = node;
        while let Some(a) = self.incoming(n) {
            out.push(a);
            n = self.arcs[a].from;
        }
        out.reverse();
        out
    }

    /// The hypotheses spelled by terminal paths, in node order.
    pub fn hypotheses(&self) -> Vec<Hypothesis> {
        self.terminals()
            .into_iter()
            .map(|n| {
                let arcs = self.path_arcs(n);
                let logps: Vec<f64> = arcs.iter().map(|&a| self.arcs[a].rnnt_logp).collect();
                let score = logps.iter().sum::<f64>() + self.final_rnnt(n);
                Hypothesis {
                    tokens: arcs.iter().map(|&a| self.arcs[a].token).collect(),
                    token_logps: logps,
                    score,
                }
            })
            .collect()
    }

    fn final_rnnt(&self, node: NodeId) -> f64 {
        self.nodes[node].final_weight.map_or(0.0, |f| f.rnnt)
    }

    pub fn set_las_logp(&mut self, arc: ArcId, value: f64) {
        self.arcs[arc].las_logp = Some(value);
    }

    pub fn set_final_las(&mut self, node: NodeId, value: f64) -> Result<()> {
        match &mut self.nodes[node].final_weight {
            Some(f) => {
                f.las = Some(value);
                Ok(())
            }
            None => Err(Error::contract(format!("node {node} is not terminal"))),
        }
    }

    pub fn clear_las(&mut self) {
        for a in &mut self.arcs {
            a.las_logp = None;
        }
        for n in &mut self.nodes {
            if let Some(f) = &mut n.final_weight {
                f.las = None;
            }
        }
    }

    /// Removes every arc labelled `token`, folding its first-pass score into
    /// the final weight of the hypothesis that used it. Hypotheses that become
    /// identical keep the best score.
    pub fn strip_token(&self, token: TokenId) -> Result<Self> {
        let hyps: Vec<Hypothesis> = self
            .hypotheses()
            .into_iter()
            .map(|h| {
                let (tokens, logps) = h
                    .tokens
                    .iter()
                    .zip(&h.token_logps)
                    .filter(|(&t, _)| t != token)
                    .map(|(&t, &l)| (t, l))
                    .unzip();
                Hypothesis {
                    tokens,
                    token_logps: logps,
                    score: h.score,
                }
            })
            .collect();
        Self::from_beam_hypotheses(&hyps)
    }

    /// All terminal paths that are fully scored under `weights`, best first.
    /// Ties are broken by token sequence.
    pub fn scored_paths(&self, weights: &ScoreWeights) -> Vec<ScoredPath> {
        let mut out = Vec::new();
        for n in self.terminals() {
            let arcs = self.path_arcs(n);
            let fw = self.nodes[n]
                .final_weight
                .expect("terminal has a final weight");
            let mut rnnt = fw.rnnt;
            let mut las = fw.las;
            let mut score = match weights.combine(fw.rnnt, fw.las) {
                Some(s) => s,
                None => continue,
            };
            let mut complete = true;
            for &a in &arcs {
                let arc = &self.arcs[a];
                rnnt += arc.rnnt_logp;
                las = match (las, arc.las_logp) {
                    (Some(x), Some(y)) => Some(x + y),
                    _ => None,
                };
                match weights.combine(arc.rnnt_logp, arc.las_logp) {
                    Some(s) => score += s,
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                out.push(ScoredPath {
                    tokens: arcs.iter().map(|&a| self.arcs[a].token).collect(),
                    node: n,
                    score,
                    rnnt_score: rnnt,
                    las_score: las,
                });
            }
        }
        out.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        out
    }

    /// Highest-scoring terminal path under `weights`.
    pub fn best_path(&self, weights: &ScoreWeights) -> Result<ScoredPath> {
        if self.terminals().is_empty() {
            return Err(Error::contract("lattice has no terminal paths"));
        }
        self.scored_paths(weights)
            .into_iter()
            .next()
            .ok_or(Error::RescoreIncomplete)
    }

    /// Top `n` terminal paths under `weights`.
    pub fn nbest(&self, n: usize, weights: &ScoreWeights) -> Vec<ScoredPath> {
        let mut paths = self.scored_paths(weights);
        paths.truncate(n);
        paths
    }

    /// Human-readable dump; [`PrefixTreeLattice::from_text`] restores it exactly.
    pub fn to_text(&self, utterance: &str, vocab_hash: &str) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |x| x.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "lattice v1");
        let _ = writeln!(s, "utterance {utterance}");
        let _ = writeln!(s, "vocab_hash {vocab_hash}");
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
            let _ = writeln!(s, "{i} {parent} {}", n.depth);
        }
        let _ = writeln!(s, "arcs {}", self.arcs.len());
        for a in &self.arcs {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                a.from,
                a.to,
                a.token,
                a.rnnt_logp,
                opt(a.las_logp)
            );
        }
        let terms = self.terminals();
        let _ = writeln!(s, "terminals {}", terms.len());
        for t in terms {
            let f = self.nodes[t].final_weight.expect("terminal");
            let _ = writeln!(s, "{t} {} {}", f.rnnt, opt(f.las));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<(LatticeHeader, Self)> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::format(format!("missing {what}")))
        };
        if next("header")? != "lattice v1" {
            return Err(Error::format("not a v1 lattice dump"));
        }
        let utterance = field(next("utterance")?, "utterance")?.to_string();
        let vocab_hash = field(next("vocab_hash")?, "vocab_hash")?.to_string();
        let n_nodes: usize = num(field(next("nodes")?, "nodes")?)?;
        if n_nodes == 0 {
            return Err(Error::format("lattice needs a root node"));
        }
        let mut lat = PrefixTreeLattice {
            nodes: Vec::with_capacity(n_nodes),
            arcs: Vec::new(),
        };
        for i in 0..n_nodes {
            let parts = cols(next("node row")?, 3)?;
            if num::<usize>(parts[0])? != i {
                return Err(Error::format("node rows out of order"));
            }
            let parent = if parts[1] == "-" {
                None
            } else {
                Some(num::<usize>(parts[1])?)
            };
            if (i == 0) != parent.is_none() || parent.is_some_and(|p| p >= i) {
                return Err(Error::format(format!("node {i} has an invalid parent")));
            }
            lat.nodes.push(Node {
                parent,
                depth: num(parts[2])?,
                children: Vec::new(),
                final_weight: None,
            });
        }
        let n_arcs: usize = num(field(next("arcs")?, "arcs")?)?;
        if n_arcs + 1 != n_nodes {
            return Err(Error::format("tree needs one arc per non-root node"));
        }
        for k in 0..n_arcs {
            let p = cols(next("arc row")?, 5)?;
            let arc = LatticeArc {
                from: num(p[0])?,
                to: num(p[1])?,
                token: num(p[2])?,
                rnnt_logp: num(p[3])?,
                las_logp: opt_num(p[4])?,
            };
            if arc.to != k + 1 || lat.nodes[arc.to].parent != Some(arc.from) {
                return Err(Error::format(format!(
                    "arc {k} disagrees with the node table"
                )));
            }
            if lat.child(arc.from, arc.token).is_some() {
                return Err(Error::format(format!(
                    "node {} has two arcs for token {}",
                    arc.from, arc.token
                )));
            }
            let pos = lat.nodes[arc.from]
                .children
                .partition_point(|&a| lat.arcs[a].token < arc.token);
            lat.nodes[arc.from].children.insert(pos, k);
            lat.arcs.push(arc);
        }
        let n_terms: usize = num(field(next("terminals")?, "terminals")?)?;
        for _ in 0..n_terms {
            let p = cols(next("terminal row")?, 3)?;
            let node: usize = num(p[0])?;
            if node >= n_nodes {
                return Err(Error::format("terminal refers to a missing node"));
            }
            lat.nodes[node].final_weight = Some(FinalWeight {
                rnnt: num(p[1])?,
                las: opt_num(p[2])?,
            });
        }
        Ok((
            LatticeHeader {
                utterance,
                vocab_hash,
            },
            lat,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatticeHeader {
    pub utterance: String,
    pub vocab_hash: String,
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::format(format!("expected `{key}` line, found {line:?}")))
}

fn cols(line: &str, n: usize) -> Result<Vec<&str>> {
    let parts: Vec<&str> = line.split(' ').collect();
    if parts.len() != n {
        return Err(Error::format(format!("expected {n} fields in {line:?}")));
    }
    Ok(parts)
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(format!("bad number {s:?}")))
}

fn opt_num(s: &str) -> Result<Option<f64>> {
    if s == "null" {
        Ok(None)
    } else {
        num(s).map(Some)
    }
}
