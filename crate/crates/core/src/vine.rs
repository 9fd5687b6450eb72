//! Regular vines whose first tree is a star rooted at the terminal event.
//!
//! Variables are 0-based internally, so the terminal event `J` is index
//! `J - 1`. Labels printed for users are 1-based, e.g. `(1,3|4,5)`.
//! Edge ids are global and ordered by tree: the `J - 1` first-tree edges
//! come first, then the second tree, and so on.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::copulas::{CopulaFamily, CopulaSpec};
use crate::error::{MeticError, Result};
use crate::numeric::clip_prob;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VineStructure {
    Cvine,
    Dvine,
    Custom,
}

/// An edge joins two variables (first tree) or two edges of the previous
/// tree (later trees).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VineEdge {
    pub tree: usize,
    pub ends: (usize, usize),
}

/// Conditioned pair and conditioning set of an edge, sorted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeLabel {
    pub conditioned: (usize, usize),
    pub conditioning: Vec<usize>,
}

impl fmt::Display for EdgeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{}", self.conditioned.0 + 1, self.conditioned.1 + 1)?;
        if !self.conditioning.is_empty() {
            let d: Vec<String> = self.conditioning.iter().map(|v| (v + 1).to_string()).collect();
            write!(f, "|{}", d.join(","))?;
        }
        write!(f, ")")
    }
}

/// Ancestors of an edge: `by_tree[r - 1]` is `Ē_r`, the edges `r` trees below.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeAncestry {
    pub edge: usize,
    pub by_tree: Vec<Vec<usize>>,
    pub nodes: Vec<usize>,
}

impl EdgeAncestry {
    /// The edge itself followed by all its ancestors.
    pub fn closure(&self) -> Vec<usize> {
        let mut all = vec![self.edge];
        for level in &self.by_tree {
            all.extend(level);
        }
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VineGraph {
    j: usize,
    structure: VineStructure,
    edges: Vec<VineEdge>,
    trees: Vec<Vec<usize>>,
}

impl VineGraph {
    /// Builds a graph from first-tree variable pairs and, for each later
    /// tree, pairs of positions in the previous tree. No validation.
    pub fn from_parts(
        j: usize,
        structure: VineStructure,
        first: Vec<(usize, usize)>,
        higher: Vec<Vec<(usize, usize)>>,
    ) -> Self {
        let mut edges = Vec::new();
        let mut trees = Vec::new();
        let mut ids = Vec::new();
        for (a, b) in first {
            ids.push(edges.len());
            edges.push(VineEdge { tree: 1, ends: (a, b) });
        }
        trees.push(ids);
        for (k, level) in higher.into_iter().enumerate() {
            let prev = trees.last().cloned().unwrap_or_default();
            let mut ids = Vec::new();
            for (p, q) in level {
                let map = |x: usize| prev.get(x).copied().unwrap_or(usize::MAX);
                ids.push(edges.len());
                edges.push(VineEdge {
                    tree: k + 2,
                    ends: (map(p), map(q)),
                });
            }
            trees.push(ids);
        }
        Self {
            j,
            structure,
            edges,
            trees,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.j
    }

    pub fn terminal(&self) -> usize {
        self.j - 1
    }

    pub fn structure(&self) -> VineStructure {
        self.structure
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, e: usize) -> &VineEdge {
        &self.edges[e]
    }

    /// Edge ids of tree `k` (1-based).
    pub fn tree(&self, k: usize) -> &[usize] {
        &self.trees[k - 1]
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Variables `𝔫(e)` touched by an edge, sorted.
    pub fn nodes(&self, e: usize) -> Vec<usize> {
        let edge = &self.edges[e];
        let mut out = if edge.tree == 1 {
            vec![edge.ends.0, edge.ends.1]
        } else {
            let mut v = self.nodes(edge.ends.0);
            v.extend(self.nodes(edge.ends.1));
            v
        };
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Label of an edge, or `None` when its parents do not satisfy the
    /// proximity condition.
    pub fn label(&self, e: usize) -> Option<EdgeLabel> {
        let edge = &self.edges[e];
        if edge.tree == 1 {
            let (a, b) = edge.ends;
            return Some(EdgeLabel {
                conditioned: (a.min(b), a.max(b)),
                conditioning: Vec::new(),
            });
        }
        let (p, q) = edge.ends;
        if p >= self.edges.len() || q >= self.edges.len() {
            return None;
        }
        let np = self.nodes(p);
        let nq = self.nodes(q);
        let d: Vec<usize> = np.iter().copied().filter(|v| nq.contains(v)).collect();
        let mut c: Vec<usize> = np
            .iter()
            .chain(&nq)
            .copied()
            .filter(|v| !d.contains(v))
            .collect();
        c.sort_unstable();
        if c.len() != 2 || d.len() != edge.tree - 1 {
            return None;
        }
        Some(EdgeLabel {
            conditioned: (c[0], c[1]),
            conditioning: d,
        })
    }

    pub fn label_string(&self, e: usize) -> String {
        self.label(e)
            .map(|l| l.to_string())
            .unwrap_or_else(|| format!("<edge {e}>"))
    }

    /// Edge id with the given label.
    pub fn find(&self, label: &EdgeLabel) -> Option<usize> {
        (0..self.edges.len()).find(|&e| self.label(e).as_ref() == Some(label))
    }

    /// Parent edges of `e` (empty for first-tree edges).
    pub fn parents(&self, e: usize) -> Vec<usize> {
        let edge = &self.edges[e];
        if edge.tree == 1 {
            Vec::new()
        } else {
            vec![edge.ends.0, edge.ends.1]
        }
    }

    pub fn ancestry(&self, e: usize) -> EdgeAncestry {
        let mut by_tree = Vec::new();
        let mut level = vec![e];
        loop {
            let mut next: Vec<usize> = level.iter().flat_map(|&x| self.parents(x)).collect();
            next.sort_unstable();
            next.dedup();
            if next.is_empty() {
                break;
            }
            by_tree.push(next.clone());
            level = next;
        }
        EdgeAncestry {
            edge: e,
            by_tree,
            nodes: self.nodes(e),
        }
    }

    /// Every violated vine condition, naming the offending edge.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        let j = self.j;
        if j < 3 {
            errs.push(format!("a vine needs J >= 3, got {j}"));
            return Err(errs);
        }
        if self.trees.len() != j - 1 {
            errs.push(format!("expected {} trees, found {}", j - 1, self.trees.len()));
        }
        let root = j - 1;
        let mut seen = vec![false; j];
        for &e in self.trees.first().map(Vec::as_slice).unwrap_or(&[]) {
            let (a, b) = self.edges[e].ends;
            if a >= j || b >= j {
                errs.push(format!("first-tree edge {e} refers to a variable outside 1..{j}"));
                continue;
            }
            if a != root && b != root {
                errs.push(format!(
                    "first tree not rooted at terminal: edge ({},{}) misses node {j}",
                    a + 1,
                    b + 1
                ));
            } else {
                let other = if a == root { b } else { a };
                if other == root || seen[other] {
                    errs.push(format!("first tree: edge ({},{}) repeats a leaf", a + 1, b + 1));
                }
                seen[other] = true;
            }
        }
        for (k, ids) in self.trees.iter().enumerate() {
            let tree = k + 1;
            let expected = j - tree;
            if ids.len() != expected {
                errs.push(format!("tree {tree} has {} edges, expected {expected}", ids.len()));
            }
            // spanning-tree check on the node set of this tree
            let nodes: Vec<usize> = if tree == 1 {
                (0..j).collect()
            } else {
                self.trees[k - 1].clone()
            };
            let mut parent: Vec<usize> = (0..nodes.len()).collect();
            fn find(p: &mut [usize], x: usize) -> usize {
                let mut r = x;
                while p[r] != r {
                    r = p[r];
                }
                p[x] = r;
                r
            }
            for &e in ids {
                let (a, b) = self.edges[e].ends;
                let (Some(ia), Some(ib)) = (
                    nodes.iter().position(|&n| n == a),
                    nodes.iter().position(|&n| n == b),
                ) else {
                    errs.push(format!("tree {tree}: edge {e} joins unknown nodes"));
                    continue;
                };
                let (ra, rb) = (find(&mut parent, ia), find(&mut parent, ib));
                if ra == rb {
                    errs.push(format!("tree {tree}: edge {} closes a cycle", self.label_string(e)));
                } else {
                    parent[ra] = rb;
                }
                if tree >= 2 {
                    let (pa, pb) = (self.edges[a].ends, self.edges[b].ends);
                    let share = [pa.0, pa.1].iter().any(|v| *v == pb.0 || *v == pb.1);
                    if !share {
                        errs.push(format!(
                            "proximity violated in tree {tree}: {} and {} share no node",
                            self.label_string(a),
                            self.label_string(b)
                        ));
                    } else if self.label(e).is_none() {
                        errs.push(format!("tree {tree}: edge {e} has an inconsistent label"));
                    }
                }
            }
            if ids.len() == expected && nodes.len() > 1 {
                let r0 = find(&mut parent, 0);
                if (1..nodes.len()).any(|i| find(&mut parent, i) != r0) {
                    errs.push(format!("tree {tree} is not connected"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Resolves every edge's family and parameter at covariate vector `w`.
    pub fn edge_params(
        &self,
        specs: &BTreeMap<usize, CopulaSpec>,
        w: &[f64],
    ) -> Vec<Option<(CopulaFamily, f64)>> {
        (0..self.edges.len())
            .map(|e| specs.get(&e).map(|s| (s.family, s.alpha(w))))
            .collect()
    }

    /// Order in which variables can be drawn by successive h-inversions,
    /// each with the chain of edges (first tree upwards) linking it to the
    /// variables drawn before it.
    pub fn sampling_plan(&self) -> Result<Vec<(usize, Vec<usize>)>> {
        let labels: Vec<EdgeLabel> = (0..self.edges.len())
            .map(|e| {
                self.label(e)
                    .ok_or_else(|| MeticError::InvalidVine(vec![format!("edge {e} has no label")]))
            })
            .collect::<Result<_>>()?;
        let mut alive: Vec<bool> = vec![true; self.edges.len()];
        let mut remaining: Vec<usize> = (0..self.j).collect();
        let mut peeled = Vec::new();
        while remaining.len() > 1 {
            let top = (0..self.edges.len())
                .filter(|&e| alive[e])
                .max_by_key(|&e| (self.edges[e].tree, std::cmp::Reverse(e)))
                .expect("edges remain while variables remain");
            let (a, b) = labels[top].conditioned;
            let pick = [a, b].into_iter().find(|&x| {
                (0..self.edges.len())
                    .filter(|&e| alive[e])
                    .all(|e| !labels[e].conditioning.contains(&x))
            });
            let x = pick.ok_or_else(|| {
                MeticError::InvalidVine(vec!["no variable can be peeled from the top edge".into()])
            })?;
            let chain: Vec<usize> = (0..self.edges.len())
                .filter(|&e| alive[e] && (labels[e].conditioned.0 == x || labels[e].conditioned.1 == x))
                .collect();
            for &e in &chain {
                alive[e] = false;
            }
            remaining.retain(|&v| v != x);
            peeled.push((x, chain));
        }
        peeled.push((remaining[0], Vec::new()));
        peeled.reverse();
        Ok(peeled)
    }
}

pub fn build_cvine(j: usize) -> Result<VineGraph> {
    build(j, VineStructure::Cvine)
}

pub fn build_dvine(j: usize) -> Result<VineGraph> {
    build(j, VineStructure::Dvine)
}

fn build(j: usize, structure: VineStructure) -> Result<VineGraph> {
    if j < 3 {
        return Err(MeticError::VineSize(j));
    }
    let root = j - 1;
    let first: Vec<(usize, usize)> = (0..root).map(|v| (v, root)).collect();
    let mut higher = Vec::new();
    for k in 2..j {
        let prev_len = j - k + 1;
        let level: Vec<(usize, usize)> = (0..prev_len - 1)
            .map(|i| match structure {
                VineStructure::Dvine => (i, i + 1),
                _ => (i, prev_len - 1),
            })
            .collect();
        higher.push(level);
    }
    Ok(VineGraph::from_parts(j, structure, first, higher))
}

/// Memoized conditional pseudo-observations for one subject.
///
/// `args(e)` are the two arguments fed to edge `e`'s copula, ordered like
/// its conditioned pair: `u_{a|D}` and `u_{b|D}`.
pub struct MarginCache<'a> {
    graph: &'a VineGraph,
    params: &'a [Option<(CopulaFamily, f64)>],
    u: &'a [f64],
    first_outputs: Option<&'a [f64]>,
    labels: Vec<Option<EdgeLabel>>,
    args: Vec<Option<[f64; 2]>>,
}

impl<'a> MarginCache<'a> {
    pub fn new(
        graph: &'a VineGraph,
        params: &'a [Option<(CopulaFamily, f64)>],
        u: &'a [f64],
    ) -> Self {
        Self {
            graph,
            params,
            u,
            first_outputs: None,
            labels: (0..graph.n_edges()).map(|e| graph.label(e)).collect(),
            args: vec![None; graph.n_edges()],
        }
    }

    /// Cache whose first-tree outputs are given directly: `v[x]` stands for
    /// `u_{x|J}`. Only edges above the first tree can be evaluated.
    pub fn conditional(
        graph: &'a VineGraph,
        params: &'a [Option<(CopulaFamily, f64)>],
        v: &'a [f64],
    ) -> Self {
        let mut c = Self::new(graph, params, v);
        c.first_outputs = Some(v);
        c
    }

    fn label(&self, e: usize) -> Result<&EdgeLabel> {
        self.labels[e]
            .as_ref()
            .ok_or_else(|| MeticError::InvalidVine(vec![format!("edge {e} has no label")]))
    }

    pub fn param(&self, e: usize) -> Result<(CopulaFamily, f64)> {
        self.params[e].ok_or_else(|| MeticError::MissingEdge(self.graph.label_string(e)))
    }

    pub fn args(&mut self, e: usize) -> Result<[f64; 2]> {
        if let Some(a) = self.args[e] {
            return Ok(a);
        }
        let (a, b) = self.label(e)?.conditioned;
        let out = if self.graph.edge(e).tree == 1 {
            [self.u[a], self.u[b]]
        } else {
            [self.side(e, a)?, self.side(e, b)?]
        };
        self.args[e] = Some(out);
        Ok(out)
    }

    /// Argument of edge `e` for conditioned variable `x`, computed without
    /// touching the other conditioned variable.
    pub fn input(&mut self, e: usize, x: usize) -> Result<f64> {
        if self.graph.edge(e).tree == 1 {
            Ok(self.u[x])
        } else {
            self.side(e, x)
        }
    }

    /// `u_{x|D}` entering edge `e` for conditioned variable `x`.
    fn side(&mut self, e: usize, x: usize) -> Result<f64> {
        let (p, q) = self.graph.edge(e).ends;
        let parent = if self.graph.nodes(p).contains(&x) { p } else { q };
        self.output(parent, x)
    }

    /// `h_e(u_x | u_other)` for a conditioned variable `x` of edge `e`.
    pub fn output(&mut self, e: usize, x: usize) -> Result<f64> {
        if let (Some(v), 1) = (self.first_outputs, self.graph.edge(e).tree) {
            return Ok(clip_prob(v[x]));
        }
        let (fam, alpha) = self.param(e)?;
        let args = self.args(e)?;
        let (a, _) = self.label(e)?.conditioned;
        let (num, cond) = if x == a { (args[0], args[1]) } else { (args[1], args[0]) };
        let num = clip_prob(num);
        let cond = clip_prob(cond);
        if fam.is_independence(alpha) {
            return Ok(num);
        }
        Ok(clip_prob(fam.h(num, cond, alpha)))
    }

    /// `ln c_e` at the edge's conditional arguments.
    pub fn log_density(&mut self, e: usize) -> Result<f64> {
        let (fam, alpha) = self.param(e)?;
        if fam.is_independence(alpha) {
            return Ok(0.0);
        }
        let [a, b] = self.args(e)?;
        Ok(fam.log_density(clip_prob(a), clip_prob(b), alpha))
    }
}

fn check_interior(u: &[f64]) -> Result<()> {
    match u.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        Some(&v) if (0.0..=1.0).contains(&v) => Err(MeticError::Boundary { value: v }),
        Some(&v) => Err(MeticError::OutOfRange { value: v }),
        None => Ok(()),
    }
}

/// `u_{x|D_e}` for conditioned variable `side` of edge `e`, i.e. the
/// h-function output of that edge. For a first-tree edge this is
/// `h(u_x | u_J)`; the argument *entering* a first-tree edge is `u_x` itself.
pub fn conditional_margin(
    graph: &VineGraph,
    specs: &BTreeMap<usize, CopulaSpec>,
    u: &[f64],
    w: &[f64],
    e: usize,
    side: usize,
) -> Result<f64> {
    check_interior(u)?;
    let params = graph.edge_params(specs, w);
    let mut cache = MarginCache::new(graph, &params, u);
    let label = cache.label(e)?.clone();
    if side != label.conditioned.0 && side != label.conditioned.1 {
        return Err(MeticError::Dimension(format!(
            "variable {} is not conditioned in edge {label}",
            side + 1
        )));
    }
    cache.output(e, side)
}

/// Argument `u_{x|D_e}` entering edge `e` for its conditioned variable `side`.
pub fn conditional_argument(
    graph: &VineGraph,
    specs: &BTreeMap<usize, CopulaSpec>,
    u: &[f64],
    w: &[f64],
    e: usize,
    side: usize,
) -> Result<f64> {
    check_interior(u)?;
    let params = graph.edge_params(specs, w);
    let mut cache = MarginCache::new(graph, &params, u);
    let label = cache.label(e)?.clone();
    let args = cache.args(e)?;
    if side == label.conditioned.0 {
        Ok(args[0])
    } else if side == label.conditioned.1 {
        Ok(args[1])
    } else {
        Err(MeticError::Dimension(format!(
            "variable {} is not conditioned in edge {label}",
            side + 1
        )))
    }
}

/// Log of the full vine copula density at `u`.
pub fn vine_log_density(
    graph: &VineGraph,
    specs: &BTreeMap<usize, CopulaSpec>,
    u: &[f64],
    w: &[f64],
) -> Result<f64> {
    if u.len() != graph.n_vars() {
        return Err(MeticError::Dimension(format!(
            "u has {} entries for a {}-variable vine",
            u.len(),
            graph.n_vars()
        )));
    }
    check_interior(u)?;
    let params = graph.edge_params(specs, w);
    let mut cache = MarginCache::new(graph, &params, u);
    (0..graph.n_edges()).map(|e| cache.log_density(e)).sum()
}

/// Log of the joint copula density of the variables `𝔫(e)`: edge `e`
/// together with all of its ancestors. Only entries of `u` indexed by
/// `𝔫(e)` are read.
pub fn sub_log_density(
    graph: &VineGraph,
    specs: &BTreeMap<usize, CopulaSpec>,
    e: usize,
    u: &[f64],
    w: &[f64],
) -> Result<f64> {
    let anc = graph.ancestry(e);
    let sub: Vec<f64> = anc.nodes.iter().map(|&v| u[v]).collect();
    check_interior(&sub)?;
    let params = graph.edge_params(specs, w);
    let mut cache = MarginCache::new(graph, &params, u);
    anc.closure().into_iter().map(|x| cache.log_density(x)).sum()
}

/// One edge of a vine configuration file. Variables are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub conditioned: [usize; 2],
    #[serde(default)]
    pub conditioning: Vec<usize>,
    pub family: CopulaFamily,
    pub gamma: Vec<f64>,
}

/// Vine JSON: dimension, structure tag and per-edge copulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VineConfig {
    #[serde(rename = "J")]
    pub j: usize,
    pub structure: VineStructure,
    pub edges: Vec<EdgeConfig>,
}

impl EdgeConfig {
    pub fn label(&self) -> Result<EdgeLabel> {
        let bad = |v: usize| v == 0;
        if bad(self.conditioned[0])
            || bad(self.conditioned[1])
            || self.conditioning.iter().any(|&v| bad(v))
        {
            return Err(MeticError::Config("edge labels are 1-based".into()));
        }
        let (a, b) = (self.conditioned[0] - 1, self.conditioned[1] - 1);
        let mut d: Vec<usize> = self.conditioning.iter().map(|v| v - 1).collect();
        d.sort_unstable();
        Ok(EdgeLabel {
            conditioned: (a.min(b), a.max(b)),
            conditioning: d,
        })
    }
}

impl VineConfig {
    /// Graph and per-edge specs. For `custom` the structure is read off the
    /// labels; every edge's parents are the previous-tree edges whose
    /// variable sets are `{a} ∪ D` and `{b} ∪ D`.
    pub fn build(&self) -> Result<(VineGraph, BTreeMap<usize, CopulaSpec>)> {
        let graph = match self.structure {
            VineStructure::Cvine => build_cvine(self.j)?,
            VineStructure::Dvine => build_dvine(self.j)?,
            VineStructure::Custom => self.custom_graph()?,
        };
        graph.validate().map_err(MeticError::InvalidVine)?;
        let mut specs = BTreeMap::new();
        for ec in &self.edges {
            let label = ec.label()?;
            let e = graph.find(&label).ok_or_else(|| {
                MeticError::Config(format!("edge {label} is not part of the {:?} vine", self.structure))
            })?;
            specs.insert(e, CopulaSpec::new(ec.family, ec.gamma.clone()));
        }
        Ok((graph, specs))
    }

    fn custom_graph(&self) -> Result<VineGraph> {
        let j = self.j;
        if j < 3 {
            return Err(MeticError::VineSize(j));
        }
        let labels: Vec<EdgeLabel> = self.edges.iter().map(EdgeConfig::label).collect::<Result<_>>()?;
        let mut by_tree: Vec<Vec<&EdgeLabel>> = vec![Vec::new(); j - 1];
        for l in &labels {
            let k = l.conditioning.len();
            if k >= j - 1 {
                return Err(MeticError::Config(format!("edge {l} has too many conditioning variables")));
            }
            by_tree[k].push(l);
        }
        let set = |l: &EdgeLabel| {
            let mut s = l.conditioning.clone();
            s.push(l.conditioned.0);
            s.push(l.conditioned.1);
            s.sort_unstable();
            s
        };
        let first = by_tree[0].iter().map(|l| l.conditioned).collect();
        let mut higher = Vec::new();
        for k in 1..j - 1 {
            let prev_sets: Vec<Vec<usize>> = by_tree[k - 1].iter().map(|l| set(l)).collect();
            let mut level = Vec::new();
            for l in &by_tree[k] {
                let find = |x: usize| {
                    let mut want = l.conditioning.clone();
                    want.push(x);
                    want.sort_unstable();
                    prev_sets.iter().position(|s| *s == want).ok_or_else(|| {
                        MeticError::InvalidVine(vec![format!(
                            "edge {l}: no parent edge on variables {{{}}}",
                            want.iter().map(|v| (v + 1).to_string()).collect::<Vec<_>>().join(",")
                        )])
                    })
                };
                level.push((find(l.conditioned.0)?, find(l.conditioned.1)?));
            }
            higher.push(level);
        }
        Ok(VineGraph::from_parts(j, VineStructure::Custom, first, higher))
    }

    /// Configuration describing an existing graph and its specs.
    pub fn from_graph(graph: &VineGraph, specs: &BTreeMap<usize, CopulaSpec>) -> Self {
        let edges = specs
            .iter()
            .filter_map(|(&e, s)| {
                graph.label(e).map(|l| EdgeConfig {
                    conditioned: [l.conditioned.0 + 1, l.conditioned.1 + 1],
                    conditioning: l.conditioning.iter().map(|v| v + 1).collect(),
                    family: s.family,
                    gamma: s.gamma.clone(),
                })
            })
            .collect();
        Self {
            j: graph.n_vars(),
            structure: graph.structure(),
            edges,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copulas::{copula_density, h_function};

    fn labels(g: &VineGraph, k: usize) -> Vec<String> {
        g.tree(k).iter().map(|&e| g.label_string(e)).collect()
    }

    #[test]
    fn cvine_five_matches_figure_layout() {
        let g = build_cvine(5).unwrap();
        assert_eq!(labels(&g, 1), ["(1,5)", "(2,5)", "(3,5)", "(4,5)"]);
        assert_eq!(labels(&g, 2), ["(1,4|5)", "(2,4|5)", "(3,4|5)"]);
        assert_eq!(labels(&g, 3), ["(1,3|4,5)", "(2,3|4,5)"]);
        assert_eq!(labels(&g, 4), ["(1,2|3,4,5)"]);
        assert!(g.validate().is_ok());
    }

    #[test]
    fn dvine_five_matches_figure_layout() {
        let g = build_dvine(5).unwrap();
        assert_eq!(labels(&g, 2), ["(1,2|5)", "(2,3|5)", "(3,4|5)"]);
        assert_eq!(labels(&g, 3), ["(1,3|2,5)", "(2,4|3,5)"]);
        assert_eq!(labels(&g, 4), ["(1,4|2,3,5)"]);
        assert!(g.validate().is_ok());
    }

    #[test]
    fn three_variable_vines_coincide() {
        let c = build_cvine(3).unwrap();
        let d = build_dvine(3).unwrap();
        assert_eq!(labels(&c, 1), ["(1,3)", "(2,3)"]);
        assert_eq!(labels(&c, 2), ["(1,2|3)"]);
        assert_eq!(labels(&d, 2), labels(&c, 2));
        assert!(matches!(build_cvine(2), Err(MeticError::VineSize(2))));
    }

    #[test]
    fn validation_reports_violations() {
        let g = VineGraph::from_parts(
            4,
            VineStructure::Custom,
            vec![(0, 1), (0, 2), (0, 3)],
            vec![vec![(0, 1), (1, 2)], vec![(0, 1)]],
        );
        let errs = g.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.contains("first tree not rooted at terminal")), "{errs:?}");

        // (1,5),(2,5) | (3,5),(4,5) in tree 2 are fine; an edge joining two
        // second-tree edges with no common first-tree edge is not.
        let g = VineGraph::from_parts(
            5,
            VineStructure::Custom,
            vec![(0, 4), (1, 4), (2, 4), (3, 4)],
            vec![vec![(0, 1), (2, 3), (1, 2)], vec![(0, 1), (1, 2)], vec![(0, 1)]],
        );
        let errs = g.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.contains("proximity")), "{errs:?}");
    }

    #[test]
    fn ancestry_counts() {
        for g in [build_cvine(6).unwrap(), build_dvine(6).unwrap()] {
            for e in 0..g.n_edges() {
                let a = g.ancestry(e);
                let k = g.edge(e).tree;
                assert_eq!(a.nodes.len(), k + 1);
                for (r, level) in a.by_tree.iter().enumerate() {
                    assert_eq!(level.len(), r + 2);
                }
            }
        }
    }

    fn independent(g: &VineGraph) -> BTreeMap<usize, CopulaSpec> {
        (0..g.n_edges())
            .map(|e| (e, CopulaSpec::new(CopulaFamily::Frank, vec![0.0])))
            .collect()
    }

    #[test]
    fn independence_everywhere() {
        let g = build_cvine(5).unwrap();
        let specs = independent(&g);
        let u = [0.1, 0.3, 0.5, 0.7, 0.9];
        assert_eq!(vine_log_density(&g, &specs, &u, &[1.0]).unwrap(), 0.0);
        for e in 0..g.n_edges() {
            let l = g.label(e).unwrap();
            let x = l.conditioned.0;
            assert_eq!(conditional_margin(&g, &specs, &u, &[1.0], e, x).unwrap(), u[x]);
        }
    }

    #[test]
    fn tree_one_margin_is_clayton_h() {
        let g = build_cvine(3).unwrap();
        let mut specs = independent(&g);
        specs.insert(0, CopulaSpec::constant(CopulaFamily::Clayton, 2.0).unwrap());
        let u = [0.3, 0.6, 0.45];
        let m = conditional_margin(&g, &specs, &u, &[1.0], 0, 0).unwrap();
        let direct = (0.45f64.powf(-3.0)) * (0.3f64.powf(-2.0) + 0.45f64.powf(-2.0) - 1.0).powf(-1.5);
        assert!((m - direct).abs() < 1e-12);
        assert!((m - h_function(CopulaFamily::Clayton, 0.3, 0.45, 2.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn cvine_five_density_equals_hand_product() {
        let g = build_cvine(5).unwrap();
        let fams = [
            CopulaFamily::Clayton,
            CopulaFamily::Gumbel,
            CopulaFamily::Frank,
            CopulaFamily::Gaussian,
        ];
        let alphas = [1.5, 1.8, 3.0, 0.4];
        let specs: BTreeMap<usize, CopulaSpec> = (0..g.n_edges())
            .map(|e| {
                let f = fams[e % 4];
                (e, CopulaSpec::constant(f, alphas[e % 4]).unwrap())
            })
            .collect();
        let u = [0.21, 0.67, 0.43, 0.88, 0.35];
        let p = |lab: &str| {
            let e = (0..g.n_edges()).find(|&e| g.label_string(e) == lab).unwrap();
            (specs[&e].family, specs[&e].alpha(&[1.0]))
        };
        let h = |lab: &str, x: f64, y: f64| {
            let (f, a) = p(lab);
            h_function(f, x, y, a).unwrap()
        };
        let c = |lab: &str, x: f64, y: f64| {
            let (f, a) = p(lab);
            copula_density(f, x, y, a).unwrap().ln()
        };
        let (u1, u2, u3, u4, u5) = (u[0], u[1], u[2], u[3], u[4]);
        let u1_5 = h("(1,5)", u1, u5);
        let u2_5 = h("(2,5)", u2, u5);
        let u3_5 = h("(3,5)", u3, u5);
        let u4_5 = h("(4,5)", u4, u5);
        let u1_45 = h("(1,4|5)", u1_5, u4_5);
        let u2_45 = h("(2,4|5)", u2_5, u4_5);
        let u3_45 = h("(3,4|5)", u3_5, u4_5);
        let u1_345 = h("(1,3|4,5)", u1_45, u3_45);
        let u2_345 = h("(2,3|4,5)", u2_45, u3_45);
        let hand = c("(1,5)", u1, u5)
            + c("(2,5)", u2, u5)
            + c("(3,5)", u3, u5)
            + c("(4,5)", u4, u5)
            + c("(1,4|5)", u1_5, u4_5)
            + c("(2,4|5)", u2_5, u4_5)
            + c("(3,4|5)", u3_5, u4_5)
            + c("(1,3|4,5)", u1_45, u3_45)
            + c("(2,3|4,5)", u2_45, u3_45)
            + c("(1,2|3,4,5)", u1_345, u2_345);
        let v = vine_log_density(&g, &specs, &u, &[1.0]).unwrap();
        assert!((v - hand).abs() < 1e-12, "{v} vs {hand}");

        // conditional margin u_{1|4,5} = h(u_{1|5} | u_{4|5})
        let e = (0..g.n_edges()).find(|&e| g.label_string(e) == "(1,4|5)").unwrap();
        let m = conditional_margin(&g, &specs, &u, &[1.0], e, 0).unwrap();
        assert!((m - u1_45).abs() < 1e-14);

        // sub-density of (1,3|4,5): six factors
        let e = (0..g.n_edges()).find(|&e| g.label_string(e) == "(1,3|4,5)").unwrap();
        let six = c("(1,3|4,5)", u1_45, u3_45)
            + c("(1,4|5)", u1_5, u4_5)
            + c("(3,4|5)", u3_5, u4_5)
            + c("(1,5)", u1, u5)
            + c("(3,5)", u3, u5)
            + c("(4,5)", u4, u5);
        let s = sub_log_density(&g, &specs, e, &u, &[1.0]).unwrap();
        assert!((s - six).abs() < 1e-12);
        assert_eq!(g.ancestry(e).closure().len(), 6);
    }

    #[test]
    fn missing_spec_names_edge() {
        let g = build_cvine(3).unwrap();
        let mut specs = independent(&g);
        specs.remove(&0);
        let e = vine_log_density(&g, &specs, &[0.2, 0.4, 0.6], &[1.0]).unwrap_err();
        assert!(e.to_string().contains("(1,3)"), "{e}");
        let e = vine_log_density(&g, &independent(&g), &[0.0, 0.4, 0.6], &[1.0]).unwrap_err();
        assert!(matches!(e, MeticError::Boundary { .. }));
    }

    #[test]
    fn sampling_plan_for_three() {
        let g = build_cvine(3).unwrap();
        let plan = g.sampling_plan().unwrap();
        let order: Vec<usize> = plan.iter().map(|p| p.0).collect();
        assert_eq!(order, vec![2, 1, 0]);
        assert_eq!(plan[1].1, vec![1]);
        assert_eq!(plan[2].1, vec![0, 2]);
        for g in [build_cvine(6).unwrap(), build_dvine(6).unwrap()] {
            let plan = g.sampling_plan().unwrap();
            for (m, (_, chain)) in plan.iter().enumerate() {
                assert_eq!(chain.len(), m);
            }
        }
    }

    #[test]
    fn config_roundtrip_and_custom() {
        let text = r#"{"J":3,"structure":"custom","edges":[
            {"conditioned":[1,3],"family":"gumbel","gamma":[0.85,1,0.1]},
            {"conditioned":[2,3],"family":"clayton","gamma":[0.29,0.1,1]},
            {"conditioned":[1,2],"conditioning":[3],"family":"frank","gamma":[1.86,1,1]}]}"#;
        let cfg: VineConfig = serde_json::from_str(text).unwrap();
        let (g, specs) = cfg.build().unwrap();
        assert_eq!(specs.len(), 3);
        assert_eq!(g.label_string(2), "(1,2|3)");
        assert_eq!(specs[&2].family, CopulaFamily::Frank);
        let back = VineConfig::from_graph(&g, &specs);
        let json = serde_json::to_string(&back).unwrap();
        assert!(json.contains("\"structure\":\"custom\""));
        let again: VineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(again.build().unwrap().1, specs);
    }
}
