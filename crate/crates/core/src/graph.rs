//! The control graph: stocks, auxiliaries and control inputs linked by
//! direct dependencies, with dashed (non-spanning) edges where a
//! range-restricting function sits between source and target.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ExoClassification, ExoVerdict, TAU_SIG};
use crate::expr::{eval, free_vars, BinOp, Builtin, Expr};
use crate::model::{tarjan_scc, Model, OutOfRange};
use crate::simulator::{expand_delays, initial_state, initial_values, stage_name, Evaluator};

pub const CYCLE_BUDGET: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Stock,
    Aux,
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeStyle {
    Spanning,
    NonSpanning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub hidden: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub style: EdgeStyle,
}

/// Nodes are kept sorted by name and edges by `(from, to)`; parallel edges
/// merge into one that is dashed only if every contributor was dashed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl ControlGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a node; an existing node of the same name is replaced.
    pub fn add_node(&mut self, name: impl Into<String>, kind: NodeKind, hidden: bool) {
        let node = Node { name: name.into(), kind, hidden };
        match self.nodes.binary_search_by(|n| n.name.cmp(&node.name)) {
            Ok(i) => self.nodes[i] = node,
            Err(i) => self.nodes.insert(i, node),
        }
    }

    /// Adds `from → to`. Returns false (and adds nothing) when an endpoint is
    /// missing, the target is an input, or a self-loop is placed on a
    /// non-stock.
    pub fn add_edge(&mut self, from: &str, to: &str, style: EdgeStyle) -> bool {
        let (Some(_), Some(t)) = (self.node(from), self.node(to)) else { return false };
        if t.kind == NodeKind::Input || (from == to && t.kind != NodeKind::Stock) {
            return false;
        }
        match self.edges.binary_search_by(|e| (e.from.as_str(), e.to.as_str()).cmp(&(from, to))) {
            Ok(i) => {
                if style == EdgeStyle::Spanning {
                    self.edges[i].style = EdgeStyle::Spanning;
                }
            }
            Err(i) => self.edges.insert(i, Edge { from: from.into(), to: to.into(), style }),
        }
        true
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.index_of(name).map(|i| &self.nodes[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.binary_search_by(|n| n.name.as_str().cmp(name)).ok()
    }

    pub fn edge(&self, from: &str, to: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.from == from && e.to == to)
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn dashed_count(&self) -> usize {
        self.edges.iter().filter(|e| e.style == EdgeStyle::NonSpanning).count()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Input)
    }

    /// Successor lists by node index, optionally leaving out dashed edges.
    pub fn adjacency(&self, include_dashed: bool) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            if include_dashed || e.style == EdgeStyle::Spanning {
                adj[self.index_of(&e.from).unwrap()].push(self.index_of(&e.to).unwrap());
            }
        }
        adj
    }

    /// Subgraph on `keep` with every edge between kept nodes.
    pub fn induced(&self, keep: &BTreeSet<String>) -> ControlGraph {
        ControlGraph {
            nodes: self.nodes.iter().filter(|n| keep.contains(&n.name)).cloned().collect(),
            edges: self.edges.iter().filter(|e| keep.contains(&e.from) && keep.contains(&e.to)).cloned().collect(),
        }
    }

    pub fn without_dashed(&self) -> ControlGraph {
        ControlGraph {
            nodes: self.nodes.clone(),
            edges: self.edges.iter().filter(|e| e.style == EdgeStyle::Spanning).cloned().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOptions {
    /// Make delay state explicit before building. Turning this off reproduces
    /// the classic mistake of drawing a delay as a plain auxiliary.
    pub expand_delays: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions { expand_delays: true }
    }
}

/// Defining expression per node name, with delay-output aliases renamed to
/// the last hidden stage. Stocks map to `inflow − outflow`.
struct NodeSource {
    model: Model,
    defs: BTreeMap<String, Expr>,
    aliases: BTreeMap<String, String>,
}

impl NodeSource {
    fn new(model: &Model, expand: bool) -> Self {
        let model = if expand { expand_delays(model) } else { model.clone() };
        let aliases: BTreeMap<String, String> = model
            .auxiliaries
            .iter()
            .filter_map(|a| {
                let first = stage_name(&a.name, 1);
                model.stock(&first).filter(|s| s.hidden)?;
                let last = (1..).map(|k| stage_name(&a.name, k)).take_while(|n| model.stock(n).is_some()).last()?;
                Some((a.name.clone(), last))
            })
            .collect();
        let rename: BTreeMap<String, Expr> = aliases.iter().map(|(a, s)| (a.clone(), Expr::var(s))).collect();
        let mut defs = BTreeMap::new();
        for s in &model.stocks {
            let flow = |e: &Option<Expr>| e.clone().unwrap_or(Expr::num(0.0));
            let net = Expr::bin(BinOp::Sub, flow(&s.inflow), flow(&s.outflow));
            defs.insert(s.name.clone(), net.substitute(&rename));
        }
        for a in &model.auxiliaries {
            if !aliases.contains_key(&a.name) {
                defs.insert(a.name.clone(), a.definition.substitute(&rename));
            }
        }
        NodeSource { model, defs, aliases }
    }

    fn for_graph(model: &Model, graph: &ControlGraph) -> Self {
        Self::new(model, graph.nodes.iter().any(|n| n.hidden))
    }

    /// Every variable value at t = 0, aliases included.
    fn baseline_env(&self) -> Option<BTreeMap<String, f64>> {
        if self.model.has_delays() {
            return initial_values(&self.model).ok();
        }
        let state = initial_state(&self.model).ok()?;
        Evaluator::new(&self.model).full_env(&state, &self.model.exo_env()).ok()
    }
}

pub fn build_graph(model: &Model, classifications: &[ExoClassification]) -> ControlGraph {
    build_graph_with(model, classifications, GraphOptions::default())
}

/// Stock, auxiliary and input nodes with an edge `u → v` whenever `u` appears
/// in `v`'s definition (a stock's flows for stocks). All edges start solid;
/// see [`mark_nonspanning`]. Parameters and inert exos are left out;
/// undetermined exos are kept as inputs.
pub fn build_graph_with(model: &Model, classifications: &[ExoClassification], opts: GraphOptions) -> ControlGraph {
    let src = NodeSource::new(model, opts.expand_delays);
    let mut g = ControlGraph::new();
    for s in &src.model.stocks {
        g.add_node(&s.name, NodeKind::Stock, s.hidden);
    }
    for a in &src.model.auxiliaries {
        if !src.aliases.contains_key(&a.name) {
            g.add_node(&a.name, NodeKind::Aux, false);
        }
    }
    for c in classifications {
        if matches!(c.verdict, ExoVerdict::ControlInput | ExoVerdict::Undetermined) && model.exo(&c.exo).is_some() {
            g.add_node(&c.exo, NodeKind::Input, false);
        }
    }
    for (v, def) in &src.defs {
        let hidden = g.node(v).is_some_and(|n| n.hidden);
        for u in free_vars(def) {
            if u == *v && hidden {
                continue;
            }
            g.add_edge(&u, v, EdgeStyle::Spanning);
        }
    }
    g
}

/// Re-styles every edge: `u → v` is dashed iff every occurrence of `u` in
/// `v`'s definition sits under a range-restricting function (MIN, MAX, EXP,
/// ABS, clamped LOOKUP, or a constant even power).
pub fn mark_nonspanning(model: &Model, graph: &ControlGraph) -> ControlGraph {
    let src = NodeSource::for_graph(model, graph);
    let mut out = graph.clone();
    for e in out.edges.iter_mut() {
        let Some(def) = src.defs.get(&e.to) else { continue };
        let occ = occurrences(def, &e.from, false, &src.model);
        e.style = if occ.free || occ.total == 0 { EdgeStyle::Spanning } else { EdgeStyle::NonSpanning };
    }
    out
}

#[derive(Default)]
struct Occurrences {
    total: usize,
    /// Some occurrence reaches the root without passing a restriction.
    free: bool,
}

fn restricts(e: &Expr, model: &Model) -> bool {
    match e {
        Expr::Call(Builtin::Min | Builtin::Max | Builtin::Exp | Builtin::Abs, _) => true,
        Expr::Call(Builtin::Lookup, args) => match args.first() {
            Some(Expr::Var(t)) => {
                model.tables.iter().find(|tb| &tb.name == t).is_none_or(|tb| tb.out_of_range == OutOfRange::Clamp)
            }
            _ => true,
        },
        Expr::Binary(BinOp::Pow, _, exp) => {
            let k = match exp.as_ref() {
                Expr::Number(k) => *k,
                Expr::Neg(inner) => match inner.as_ref() {
                    Expr::Number(k) => -*k,
                    _ => return false,
                },
                _ => return false,
            };
            k.fract() == 0.0 && (k / 2.0).fract() == 0.0 && k != 0.0
        }
        _ => false,
    }
}

fn occurrences(e: &Expr, var: &str, restricted: bool, model: &Model) -> Occurrences {
    let restricted = restricted || restricts(e, model);
    let mut acc = Occurrences::default();
    let mut merge = |o: Occurrences| {
        acc.total += o.total;
        acc.free |= o.free;
    };
    match e {
        Expr::Number(_) => {}
        Expr::Var(v) => {
            if v == var {
                merge(Occurrences { total: 1, free: !restricted });
            }
        }
        Expr::Neg(inner) => merge(occurrences(inner, var, restricted, model)),
        Expr::Binary(_, l, r) => {
            merge(occurrences(l, var, restricted, model));
            merge(occurrences(r, var, restricted, model));
        }
        Expr::Call(Builtin::Lookup, args) => {
            args.iter().skip(1).for_each(|a| merge(occurrences(a, var, restricted, model)));
        }
        Expr::Call(_, args) => args.iter().for_each(|a| merge(occurrences(a, var, restricted, model))),
    }
    acc
}

/// Every auxiliary re-kinded as a stock; edges untouched.
pub fn stockify(graph: &ControlGraph) -> ControlGraph {
    let mut g = graph.clone();
    for n in g.nodes.iter_mut() {
        if n.kind == NodeKind::Aux {
            n.kind = NodeKind::Stock;
        }
    }
    g
}

/// Keeps stock and input nodes; `s → t` whenever some path from `s` to `t`
/// runs through auxiliaries only. The projected edge is dashed iff every such
/// path contains a dashed edge.
pub fn stock_projection(graph: &ControlGraph) -> ControlGraph {
    let mut out = ControlGraph::new();
    for n in graph.nodes.iter().filter(|n| n.kind != NodeKind::Aux) {
        out.add_node(&n.name, n.kind, n.hidden);
    }
    let n = graph.nodes.len();
    let mut succ: Vec<Vec<(usize, bool)>> = vec![Vec::new(); n];
    for e in &graph.edges {
        let (u, v) = (graph.index_of(&e.from).unwrap(), graph.index_of(&e.to).unwrap());
        succ[u].push((v, e.style == EdgeStyle::Spanning));
    }
    for (s, node) in graph.nodes.iter().enumerate() {
        if node.kind == NodeKind::Aux {
            continue;
        }
        // state = (node, all edges so far solid)
        let mut seen = vec![[false; 2]; n];
        let mut queue = VecDeque::from([(s, true)]);
        let mut found: BTreeMap<usize, bool> = BTreeMap::new();
        while let Some((u, clean)) = queue.pop_front() {
            for &(v, solid) in &succ[u] {
                let c = clean && solid;
                if graph.nodes[v].kind == NodeKind::Aux {
                    if !seen[v][c as usize] {
                        seen[v][c as usize] = true;
                        queue.push_back((v, c));
                    }
                } else {
                    *found.entry(v).or_insert(false) |= c;
                }
            }
        }
        for (t, clean) in found {
            let style = if clean { EdgeStyle::Spanning } else { EdgeStyle::NonSpanning };
            out.add_edge(&node.name, &graph.nodes[t].name, style);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Reinforcing,
    Balancing,
    Undetermined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopFinding {
    /// Starts at the lexicographically smallest member.
    pub cycle: Vec<String>,
    pub polarity: Polarity,
    pub contains_delay: bool,
    pub contains_nonspanning: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("more than {limit} simple cycles; enumeration aborted")]
    CycleBudgetExceeded { limit: usize },
}

pub fn find_loops(graph: &ControlGraph, model: &Model) -> Result<Vec<LoopFinding>, GraphError> {
    find_loops_with_budget(graph, model, CYCLE_BUDGET)
}

/// Simple cycles with polarity from the signs of baseline edge gains.
pub fn find_loops_with_budget(graph: &ControlGraph, model: &Model, budget: usize) -> Result<Vec<LoopFinding>, GraphError> {
    let cycles = simple_cycles(&graph.adjacency(true), budget)?;
    let src = NodeSource::for_graph(model, graph);
    let env = src.baseline_env();
    Ok(cycles
        .into_iter()
        .map(|c| {
            let names: Vec<&str> = c.iter().map(|&i| graph.nodes[i].name.as_str()).collect();
            let pairs = || (0..names.len()).map(|k| (names[k], names[(k + 1) % names.len()]));
            let mut sign = Some(1.0);
            for (u, v) in pairs() {
                sign = match (sign, env.as_ref().and_then(|env| edge_gain(&src, env, u, v))) {
                    (Some(s), Some(g)) => Some(s * g.signum()),
                    _ => None,
                };
            }
            LoopFinding {
                cycle: names.iter().map(|s| s.to_string()).collect(),
                polarity: match sign {
                    Some(s) if s > 0.0 => Polarity::Reinforcing,
                    Some(_) => Polarity::Balancing,
                    None => Polarity::Undetermined,
                },
                contains_delay: c.iter().any(|&i| graph.nodes[i].hidden),
                contains_nonspanning: pairs()
                    .any(|(u, v)| graph.edge(u, v).is_some_and(|e| e.style == EdgeStyle::NonSpanning)),
            }
        })
        .collect())
}

/// ∂v/∂u of `v`'s definition at the baseline; `None` on a kink, a failed
/// evaluation, or a gain below 1e-9 in magnitude.
fn edge_gain(src: &NodeSource, env: &BTreeMap<String, f64>, u: &str, v: &str) -> Option<f64> {
    let def = src.defs.get(v)?.strip_delays();
    let x = *env.get(u)?;
    let h = 1e-6 * x.abs().max(1.0);
    let at = |val: f64| {
        let mut e = env.clone();
        e.insert(u.to_string(), val);
        eval(&def, &e, &src.model.tables).ok()
    };
    let (p, m, q) = (at(x + h)?, at(x)?, at(x - h)?);
    let central = (p - q) / (2.0 * h);
    let mismatch = ((p - m) / h - (m - q) / h).abs();
    if mismatch > 10.0 * TAU_SIG * central.abs().max(1.0) || central.abs() < 1e-9 {
        return None;
    }
    Some(central)
}

/// Johnson's algorithm over index-ordered adjacency.
fn simple_cycles(adj: &[Vec<usize>], budget: usize) -> Result<Vec<Vec<usize>>, GraphError> {
    let n = adj.len();
    let mut out = Vec::new();
    for s in 0..n {
        let sub: Vec<Vec<usize>> =
            (0..n).map(|v| if v < s { vec![] } else { adj[v].iter().copied().filter(|&w| w >= s).collect() }).collect();
        let Some(comp) = tarjan_scc(&sub).into_iter().find(|c| c.contains(&s)) else { continue };
        if comp.len() == 1 && !sub[s].contains(&s) {
            continue;
        }
        let mut in_comp = vec![false; n];
        comp.iter().for_each(|&v| in_comp[v] = true);
        let mut state = Johnson {
            adj: &sub,
            in_comp,
            blocked: vec![false; n],
            b: vec![BTreeSet::new(); n],
            stack: Vec::new(),
            out: &mut out,
            budget,
        };
        state.circuit(s, s)?;
    }
    Ok(out)
}

struct Johnson<'a> {
    adj: &'a [Vec<usize>],
    in_comp: Vec<bool>,
    blocked: Vec<bool>,
    b: Vec<BTreeSet<usize>>,
    stack: Vec<usize>,
    out: &'a mut Vec<Vec<usize>>,
    budget: usize,
}

impl Johnson<'_> {
    fn circuit(&mut self, v: usize, s: usize) -> Result<bool, GraphError> {
        let mut found = false;
        self.stack.push(v);
        self.blocked[v] = true;
        for &w in &self.adj[v] {
            if !self.in_comp[w] {
                continue;
            }
            if w == s {
                self.out.push(self.stack.clone());
                if self.out.len() > self.budget {
                    return Err(GraphError::CycleBudgetExceeded { limit: self.budget });
                }
                found = true;
            } else if !self.blocked[w] && self.circuit(w, s)? {
                found = true;
            }
        }
        if found {
            self.unblock(v);
        } else {
            for &w in &self.adj[v] {
                if self.in_comp[w] {
                    self.b[w].insert(v);
                }
            }
        }
        self.stack.pop();
        Ok(found)
    }

    fn unblock(&mut self, u: usize) {
        self.blocked[u] = false;
        for w in std::mem::take(&mut self.b[u]) {
            if self.blocked[w] {
                self.unblock(w);
            }
        }
    }
}

/// Graphviz rendering: stocks filled boxes (hidden ones double-bordered),
/// auxiliaries ellipses, inputs red squares, dashed non-spanning edges.
pub fn to_dot(graph: &ControlGraph) -> String {
    if graph.nodes.is_empty() {
        return "digraph G { }\n".to_string();
    }
    let mut out = String::from("digraph G {\n");
    for n in &graph.nodes {
        let attrs = match (n.kind, n.hidden) {
            (NodeKind::Stock, false) => "shape=box,style=filled",
            (NodeKind::Stock, true) => "shape=box,style=filled,peripheries=2",
            (NodeKind::Aux, _) => "shape=ellipse",
            (NodeKind::Input, _) => "shape=square,color=red",
        };
        let _ = writeln!(out, "  \"{}\" [{attrs}];", n.name);
    }
    for e in &graph.edges {
        let style = if e.style == EdgeStyle::NonSpanning { " [style=dashed]" } else { "" };
        let _ = writeln!(out, "  \"{}\" -> \"{}\"{style};", e.from, e.to);
    }
    out.push_str("}\n");
    out
}

/// Small reference topologies built directly as graphs. Nodes are named
/// `u`, `u2`, ... for inputs and `x1`, `x2`, ... for stocks.
pub mod shapes {
    use super::*;

    fn stocks(g: &mut ControlGraph, n: usize) {
        for i in 1..=n {
            g.add_node(format!("x{i}"), NodeKind::Stock, false);
        }
    }

    fn link(g: &mut ControlGraph, pairs: &[(&str, &str)]) {
        for (a, b) in pairs {
            assert!(g.add_edge(a, b, EdgeStyle::Spanning), "{a} -> {b}");
        }
    }

    pub fn from_edges(inputs: &[&str], stocks_: &[&str], edges: &[(&str, &str)]) -> ControlGraph {
        let mut g = ControlGraph::new();
        inputs.iter().for_each(|u| g.add_node(*u, NodeKind::Input, false));
        stocks_.iter().for_each(|s| g.add_node(*s, NodeKind::Stock, false));
        link(&mut g, edges);
        g
    }

    /// `u → x1 → … → xn`.
    pub fn stem(n: usize) -> ControlGraph {
        let mut g = ControlGraph::new();
        g.add_node("u", NodeKind::Input, false);
        stocks(&mut g, n);
        if n > 0 {
            g.add_edge("u", "x1", EdgeStyle::Spanning);
        }
        for i in 1..n {
            g.add_edge(&format!("x{i}"), &format!("x{}", i + 1), EdgeStyle::Spanning);
        }
        g
    }

    /// `u → x1` and the cycle `x1 → … → xn → x1`.
    pub fn bud(n: usize) -> ControlGraph {
        let mut g = stem(n);
        if n > 0 {
            g.add_edge(&format!("x{n}"), "x1", EdgeStyle::Spanning);
        }
        g
    }

    /// Stem `u → x1 → x2`, bud `x1 → x3 ⇄ x4`, bud `x2 → x5 → x6 → x7 → x5`.
    pub fn cactus() -> ControlGraph {
        let mut g = ControlGraph::new();
        g.add_node("u", NodeKind::Input, false);
        stocks(&mut g, 7);
        link(
            &mut g,
            &[("u", "x1"), ("x1", "x2"), ("x1", "x3"), ("x3", "x4"), ("x4", "x3"), ("x2", "x5"), ("x5", "x6"), ("x6", "x7"), ("x7", "x5")],
        );
        g
    }

    /// `x2` drives itself and `x1`; nothing drives `x2` from outside.
    pub fn dilation() -> ControlGraph {
        let mut g = ControlGraph::new();
        stocks(&mut g, 2);
        link(&mut g, &[("x2", "x1"), ("x2", "x2")]);
        g
    }

    /// Stem `u → x1 → x2 → x3` plus a detached pair `x4 ⇄ x5`.
    pub fn non_accessible() -> ControlGraph {
        let mut g = stem(3);
        stocks(&mut g, 5);
        link(&mut g, &[("x4", "x5"), ("x5", "x4")]);
        g
    }

    /// Auxiliary cycle `a → b → c → a`, optionally fed by an input.
    pub fn aux_triangle(with_input: bool) -> ControlGraph {
        let mut g = ControlGraph::new();
        for n in ["a", "b", "c"] {
            g.add_node(n, NodeKind::Aux, false);
        }
        link(&mut g, &[("a", "b"), ("b", "c"), ("c", "a")]);
        if with_input {
            g.add_node("u", NodeKind::Input, false);
            g.add_edge("u", "a", EdgeStyle::Spanning);
        }
        g
    }
}
