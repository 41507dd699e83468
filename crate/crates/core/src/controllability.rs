//! Steps 4–5: accessibility, spanningness, dilations and the resulting
//! structural controllability verdicts.
//!
//! A stock-only graph is structurally controllable iff every node is
//! reachable from an input and no node set S has fewer in-neighbours T(S)
//! than members (a dilation). Dilations are found as deficiencies of a
//! maximum matching between sources and targets. Graphs with auxiliaries
//! only admit a sufficient test: re-kind the auxiliaries as stocks, or
//! collapse auxiliary paths into stock-to-stock edges, and test that.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{stock_projection, stockify, ControlGraph, NodeKind};

pub const BRUTE_FORCE_LIMIT: usize = 16;
const RANK_TOLERANCE: f64 = 1e-9;

pub const NO_CONCLUSION: &str = "sufficient condition failed; no conclusion";

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("graph has auxiliary nodes; stockify or project it first")]
    AuxNodesPresent,
    #[error("{0} non-input nodes exceed the brute-force limit of {BRUTE_FORCE_LIMIT}")]
    TooLarge(usize),
}

/// How dashed (non-spanning) edges take part in the analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DashedMode {
    /// Dashed edges count as ordinary dependencies.
    Solid,
    /// Dashed edges are dropped.
    Absent,
}

impl DashedMode {
    pub fn apply(self, graph: &ControlGraph) -> ControlGraph {
        match self {
            DashedMode::Solid => graph.clone(),
            DashedMode::Absent => graph.without_dashed(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conclusion {
    Controllable,
    Uncontrollable,
    NoConclusion,
}

/// Which graph produced the verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    /// Stock-only graph, tested as is.
    Direct,
    /// Auxiliaries re-kinded as stocks.
    Stockified,
    /// Auxiliary paths collapsed into stock-to-stock edges.
    Aggregated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlVerdict {
    pub mode: DashedMode,
    pub accessible: BTreeSet<String>,
    pub non_accessible: BTreeSet<String>,
    pub spanning: BTreeSet<String>,
    pub non_spanning: BTreeSet<String>,
    pub dilation_witness: Option<BTreeSet<String>>,
    pub structurally_controllable: bool,
    /// The sufficient test on a transformed graph succeeded.
    pub theorem1_applicable: bool,
    pub conclusion: Conclusion,
    pub route: Route,
    pub notes: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputOutcome {
    /// Controls every model stock alone.
    Full,
    /// Controls a proper, non-empty subset of the model stocks.
    Partial,
    /// Its reachable part is a stock graph shown to be uncontrollable.
    Uncontrollable,
    NotConcluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputAnalysis {
    pub input: String,
    pub mode: DashedMode,
    pub reachable: BTreeSet<String>,
    pub single_input_controllable: bool,
    pub controllable_stock_count: usize,
    pub outcome: InputOutcome,
    pub route: Route,
}

fn reach(graph: &ControlGraph, spanning_only: bool) -> BTreeSet<String> {
    let adj = graph.adjacency(!spanning_only);
    let mut seen = vec![false; graph.nodes.len()];
    let mut queue: VecDeque<usize> =
        (0..graph.nodes.len()).filter(|&i| graph.nodes[i].kind == NodeKind::Input).collect();
    queue.iter().for_each(|&i| seen[i] = true);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    graph
        .nodes
        .iter()
        .zip(seen)
        .filter(|(n, s)| *s && n.kind != NodeKind::Input)
        .map(|(n, _)| n.name.clone())
        .collect()
}

/// Non-input nodes reachable from some input.
pub fn accessible_set(graph: &ControlGraph) -> BTreeSet<String> {
    reach(graph, false)
}

/// Accessible nodes split by whether some all-solid input path reaches them.
pub fn structurally_spanning(graph: &ControlGraph) -> (BTreeSet<String>, BTreeSet<String>) {
    let spanning = reach(graph, true);
    let non_spanning = accessible_set(graph).difference(&spanning).cloned().collect();
    (spanning, non_spanning)
}

/// Maximum matching of the source/target bipartite graph built from the
/// edges (every node is a source, every non-input node a target).
struct Matching {
    /// target index → matched source index
    mate_right: Vec<Option<usize>>,
    /// source index → matched target index
    mate_left: Vec<Option<usize>>,
    /// in-neighbours per target
    preds: Vec<Vec<usize>>,
}

fn hopcroft_karp(graph: &ControlGraph) -> Matching {
    let n = graph.nodes.len();
    let adj = graph.adjacency(true);
    let mut preds = vec![Vec::new(); n];
    for (u, vs) in adj.iter().enumerate() {
        for &v in vs {
            preds[v].push(u);
        }
    }
    let mut mate_left: Vec<Option<usize>> = vec![None; n];
    let mut mate_right: Vec<Option<usize>> = vec![None; n];
    let mut dist = vec![usize::MAX; n];

    loop {
        // BFS layering from free sources
        let mut queue = VecDeque::new();
        for u in 0..n {
            if mate_left[u].is_none() && !adj[u].is_empty() {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = usize::MAX;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                match mate_right[v] {
                    None => found = true,
                    Some(w) if dist[w] == usize::MAX => {
                        dist[w] = dist[u] + 1;
                        queue.push_back(w);
                    }
                    _ => {}
                }
            }
        }
        if !found {
            break;
        }
        for u in 0..n {
            if mate_left[u].is_none() {
                augment(u, &adj, &mut dist, &mut mate_left, &mut mate_right);
            }
        }
    }
    Matching { mate_right, mate_left, preds }
}

fn augment(
    u: usize,
    adj: &[Vec<usize>],
    dist: &mut [usize],
    mate_left: &mut [Option<usize>],
    mate_right: &mut [Option<usize>],
) -> bool {
    for &v in &adj[u] {
        let ok = match mate_right[v] {
            None => true,
            Some(w) => dist[w] == dist[u].wrapping_add(1) && augment(w, adj, dist, mate_left, mate_right),
        };
        if ok {
            mate_left[u] = Some(v);
            mate_right[v] = Some(u);
            return true;
        }
    }
    dist[u] = usize::MAX;
    false
}

/// Maximum-cardinality matching as `(source, target)` pairs, sorted.
pub fn max_matching(graph: &ControlGraph) -> Vec<(String, String)> {
    let m = hopcroft_karp(graph);
    let mut out: Vec<(String, String)> = m
        .mate_right
        .iter()
        .enumerate()
        .filter_map(|(v, u)| u.map(|u| (graph.nodes[u].name.clone(), graph.nodes[v].name.clone())))
        .collect();
    out.sort();
    out
}

/// Node names with fewer distinct in-neighbours than members, or `None` when
/// the matching covers every non-input node.
pub fn has_dilation(graph: &ControlGraph) -> Option<BTreeSet<String>> {
    let m = hopcroft_karp(graph);
    let root = (0..graph.nodes.len())
        .find(|&v| graph.nodes[v].kind != NodeKind::Input && m.mate_right[v].is_none())?;
    // Alternating search: target → its sources → the targets they are matched to.
    let mut in_s = vec![false; graph.nodes.len()];
    let mut in_t = vec![false; graph.nodes.len()];
    in_s[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for &u in &m.preds[v] {
            if in_t[u] {
                continue;
            }
            in_t[u] = true;
            if let Some(w) = m.mate_left[u] {
                if !in_s[w] {
                    in_s[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    Some((0..graph.nodes.len()).filter(|&v| in_s[v]).map(|v| graph.nodes[v].name.clone()).collect())
}

/// In-neighbourhood T(S) of a node set.
pub fn companion_set(graph: &ControlGraph, s: &BTreeSet<String>) -> BTreeSet<String> {
    graph.edges.iter().filter(|e| s.contains(&e.to)).map(|e| e.from.clone()).collect()
}

/// Exhaustive search for the smallest (then lexicographically first) set S of
/// non-input nodes with |T(S)| < |S|.
pub fn brute_force_dilation(graph: &ControlGraph) -> Result<Option<BTreeSet<String>>, ControlError> {
    let targets: Vec<usize> =
        (0..graph.nodes.len()).filter(|&i| graph.nodes[i].kind != NodeKind::Input).collect();
    if targets.len() > BRUTE_FORCE_LIMIT || graph.nodes.len() > 64 {
        return Err(ControlError::TooLarge(targets.len()));
    }
    let n = graph.nodes.len();
    let mut preds = vec![0u64; n];
    for e in &graph.edges {
        preds[graph.index_of(&e.to).unwrap()] |= 1 << graph.index_of(&e.from).unwrap();
    }
    let mut best: Option<Vec<usize>> = None;
    for mask in 1u32..(1u32 << targets.len()) {
        let members: Vec<usize> = (0..targets.len()).filter(|b| mask & (1 << b) != 0).map(|b| targets[b]).collect();
        let t = members.iter().fold(0u64, |acc, &v| acc | preds[v]);
        if (t.count_ones() as usize) < members.len() {
            let better = match &best {
                None => true,
                Some(b) => (members.len(), &members) < (b.len(), b),
            };
            if better {
                best = Some(members);
            }
        }
    }
    Ok(best.map(|b| b.into_iter().map(|i| graph.nodes[i].name.clone()).collect()))
}

/// Accessibility plus dilation test on a stock/input graph.
pub fn theorem0_verdict(graph: &ControlGraph, mode: DashedMode) -> Result<ControlVerdict, ControlError> {
    if graph.count(NodeKind::Aux) > 0 {
        return Err(ControlError::AuxNodesPresent);
    }
    let g = mode.apply(graph);
    let accessible = accessible_set(&g);
    let non_accessible: BTreeSet<String> = g
        .nodes
        .iter()
        .filter(|n| n.kind != NodeKind::Input && !accessible.contains(&n.name))
        .map(|n| n.name.clone())
        .collect();
    let (spanning, non_spanning) = structurally_spanning(&g);
    let dilation_witness = has_dilation(&g);
    let ok = non_accessible.is_empty() && dilation_witness.is_none();
    Ok(ControlVerdict {
        mode,
        accessible,
        non_accessible,
        spanning,
        non_spanning,
        dilation_witness,
        structurally_controllable: ok,
        theorem1_applicable: false,
        conclusion: if ok { Conclusion::Controllable } else { Conclusion::Uncontrollable },
        route: Route::Direct,
        notes: Vec::new(),
    })
}

/// Verdict for a graph that may contain auxiliaries. Stock-only graphs are
/// decided exactly. Otherwise the stockified graph is tried, then the stock
/// projection; success proves controllability, failure proves nothing.
pub fn theorem1_verdict(graph: &ControlGraph, mode: DashedMode) -> ControlVerdict {
    let g = mode.apply(graph);
    let mut verdict = if g.count(NodeKind::Aux) == 0 {
        theorem0_verdict(&g, mode).expect("no auxiliaries")
    } else {
        let mut v = theorem0_verdict(&stockify(&g), mode).expect("stockified");
        v.route = Route::Stockified;
        if !v.structurally_controllable {
            let projected = stock_projection(&g);
            let has_states = projected.nodes.iter().any(|n| n.kind != NodeKind::Input);
            if has_states && theorem0_verdict(&projected, mode).expect("projected").structurally_controllable {
                v.structurally_controllable = true;
                v.route = Route::Aggregated;
                v.dilation_witness = None;
                v.notes.push(
                    "re-kinding auxiliaries as stocks fails, but the graph with auxiliary paths collapsed into stock-to-stock edges is controllable"
                        .to_string(),
                );
            }
        }
        if v.structurally_controllable {
            v.conclusion = Conclusion::Controllable;
            v.theorem1_applicable = true;
        } else {
            v.conclusion = Conclusion::NoConclusion;
            v.notes.push(NO_CONCLUSION.to_string());
        }
        v
    };
    if mode == DashedMode::Absent && graph.dashed_count() > 0 && verdict.conclusion != Conclusion::Controllable {
        verdict.notes.push(format!(
            "without its {} dashed edge(s) the model is at most partially structurally controllable",
            graph.dashed_count()
        ));
    }
    verdict
}

/// One analysis per input (in name order) on the graph with every other
/// input removed.
pub fn per_input_analysis(graph: &ControlGraph, mode: DashedMode) -> Vec<InputAnalysis> {
    let model_stocks: BTreeSet<&str> = graph
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Stock && !n.hidden)
        .map(|n| n.name.as_str())
        .collect();
    graph
        .inputs()
        .map(|input| {
            let keep: BTreeSet<String> = graph
                .nodes
                .iter()
                .filter(|n| n.kind != NodeKind::Input || n.name == input.name)
                .map(|n| n.name.clone())
                .collect();
            let single = mode.apply(&graph.induced(&keep));
            let reachable = accessible_set(&single);
            let mut sub_nodes = reachable.clone();
            sub_nodes.insert(input.name.clone());
            let verdict = theorem1_verdict(&single.induced(&sub_nodes), mode);
            let reached_stocks = reachable.iter().filter(|n| model_stocks.contains(n.as_str())).count();
            let count = if verdict.structurally_controllable { reached_stocks } else { 0 };
            let full = verdict.structurally_controllable && reached_stocks == model_stocks.len() && count > 0;
            InputAnalysis {
                input: input.name.clone(),
                mode,
                reachable,
                single_input_controllable: full,
                controllable_stock_count: count,
                outcome: if full {
                    InputOutcome::Full
                } else if count > 0 {
                    InputOutcome::Partial
                } else if verdict.conclusion == Conclusion::Uncontrollable {
                    InputOutcome::Uncontrollable
                } else {
                    InputOutcome::NotConcluded
                },
                route: verdict.route,
            }
        })
        .collect()
}

/// Fraction of random positive weightings whose controllability matrix
/// `[B, AB, …, A^{N−1}B]` has full rank N. Auxiliaries are treated as stocks.
pub fn kalman_rank_probe(graph: &ControlGraph, trials: usize, seed: u64) -> f64 {
    let g = stockify(graph);
    let states: Vec<usize> = (0..g.nodes.len()).filter(|&i| g.nodes[i].kind != NodeKind::Input).collect();
    let inputs: Vec<usize> = (0..g.nodes.len()).filter(|&i| g.nodes[i].kind == NodeKind::Input).collect();
    let n = states.len();
    if n == 0 {
        return 1.0;
    }
    if trials == 0 {
        return 0.0;
    }
    let pos = |i: usize, list: &[usize]| list.iter().position(|&x| x == i);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut full = 0;
    for _ in 0..trials {
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![vec![0.0; inputs.len()]; n];
        for e in &g.edges {
            let (u, v) = (g.index_of(&e.from).unwrap(), g.index_of(&e.to).unwrap());
            let w: f64 = rng.gen_range(0.5..=1.5);
            let row = pos(v, &states).unwrap();
            match (pos(u, &states), pos(u, &inputs)) {
                (Some(col), _) => a[row][col] = w,
                (None, Some(col)) => b[row][col] = w,
                _ => unreachable!(),
            }
        }
        if matrix_rank(controllability_matrix(&a, &b)) == n {
            full += 1;
        }
    }
    full as f64 / trials as f64
}

/// Columns of `[B, AB, …, A^{N−1}B]`.
fn controllability_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b.first().map_or(0, Vec::len);
    let mut cols: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| b[i][j]).collect()).collect();
    let mut block = cols.clone();
    for _ in 1..n {
        block = block.iter().map(|c| (0..n).map(|i| (0..n).map(|k| a[i][k] * c[k]).sum()).collect()).collect();
        cols.extend(block.iter().cloned());
    }
    cols
}

/// Rank by full-pivot elimination on unit-normalized columns.
fn matrix_rank(mut cols: Vec<Vec<f64>>) -> usize {
    cols.retain_mut(|c| {
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return false;
        }
        c.iter_mut().for_each(|x| *x /= norm);
        true
    });
    let rows = cols.first().map_or(0, Vec::len);
    let mut rank = 0;
    let mut used_rows = vec![false; rows];
    let mut live: Vec<bool> = vec![true; cols.len()];
    loop {
        let mut best = (0.0, 0, 0);
        for (j, c) in cols.iter().enumerate().filter(|(j, _)| live[*j]) {
            for (i, &x) in c.iter().enumerate() {
                if !used_rows[i] && x.abs() > best.0 {
                    best = (x.abs(), j, i);
                }
            }
        }
        let (mag, pj, pi) = best;
        if mag <= RANK_TOLERANCE {
            return rank;
        }
        rank += 1;
        used_rows[pi] = true;
        live[pj] = false;
        let pivot = cols[pj].clone();
        for (j, c) in cols.iter_mut().enumerate() {
            if live[j] {
                let f = c[pi] / pivot[pi];
                c.iter_mut().zip(&pivot).for_each(|(x, p)| *x -= f * p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{shapes, EdgeStyle};

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn accessibility() {
        assert_eq!(accessible_set(&shapes::stem(4)), set(&["x1", "x2", "x3", "x4"]));
        assert!(accessible_set(&shapes::dilation()).is_empty());
        let acc = accessible_set(&shapes::non_accessible());
        assert!(!acc.contains("x4") && !acc.contains("x5"));
    }

    #[test]
    fn spanning_split() {
        let mut g = shapes::stem(2);
        g.add_node("x3", NodeKind::Stock, false);
        g.add_edge("x2", "x3", EdgeStyle::NonSpanning);
        let (s, ns) = structurally_spanning(&g);
        assert_eq!(s, set(&["x1", "x2"]));
        assert_eq!(ns, set(&["x3"]));
    }

    #[test]
    fn matchings() {
        assert_eq!(max_matching(&shapes::stem(3)).len(), 3);
        assert_eq!(max_matching(&shapes::dilation()).len(), 1);
    }

    #[test]
    fn dilation_witnesses() {
        let w = has_dilation(&shapes::dilation()).unwrap();
        assert_eq!(w, set(&["x1", "x2"]));
        assert_eq!(companion_set(&shapes::dilation(), &w), set(&["x2"]));
        assert_eq!(brute_force_dilation(&shapes::dilation()).unwrap(), Some(set(&["x1", "x2"])));

        let three = shapes::from_edges(&["u"], &["x1", "x2", "x3"], &[("u", "x2"), ("x2", "x1"), ("x2", "x3")]);
        assert_eq!(has_dilation(&three).unwrap(), set(&["x1", "x3"]));

        let triangle = shapes::from_edges(&[], &["a", "b", "c"], &[("a", "b"), ("b", "c"), ("c", "a")]);
        assert_eq!(has_dilation(&triangle), None);
        assert_eq!(has_dilation(&shapes::cactus()), None);
    }

    #[test]
    fn figure_shapes() {
        for g in [shapes::stem(4), shapes::bud(3), shapes::cactus()] {
            assert!(theorem0_verdict(&g, DashedMode::Solid).unwrap().structurally_controllable);
        }
        let v = theorem0_verdict(&shapes::dilation(), DashedMode::Solid).unwrap();
        assert!(!v.structurally_controllable && v.dilation_witness.is_some());
        let v = theorem0_verdict(&shapes::non_accessible(), DashedMode::Solid).unwrap();
        assert_eq!(v.non_accessible, set(&["x4", "x5"]));
        assert!(v.dilation_witness.is_none());
        assert_eq!(theorem0_verdict(&shapes::aux_triangle(false), DashedMode::Solid), Err(ControlError::AuxNodesPresent));
    }

    #[test]
    fn aux_triangle_needs_an_input() {
        let v = theorem1_verdict(&shapes::aux_triangle(false), DashedMode::Solid);
        assert_eq!(v.conclusion, Conclusion::NoConclusion);
        assert!(v.notes.iter().any(|n| n == NO_CONCLUSION));
        let v = theorem1_verdict(&shapes::aux_triangle(true), DashedMode::Solid);
        assert_eq!(v.conclusion, Conclusion::Controllable);
        assert!(v.theorem1_applicable);
    }

    #[test]
    fn brute_force_limit() {
        assert_eq!(brute_force_dilation(&shapes::stem(17)), Err(ControlError::TooLarge(17)));
        let complete = shapes::from_edges(
            &["u"],
            &["a", "b", "c"],
            &[("u", "a"), ("a", "b"), ("b", "c"), ("c", "a"), ("a", "c"), ("b", "a"), ("c", "b")],
        );
        assert_eq!(brute_force_dilation(&complete).unwrap(), None);
    }

    #[test]
    fn kalman_probe() {
        assert_eq!(kalman_rank_probe(&shapes::stem(4), 5, 1), 1.0);
        assert_eq!(kalman_rank_probe(&shapes::dilation(), 5, 1), 0.0);
        assert_eq!(kalman_rank_probe(&shapes::stem(1), 5, 1), 1.0);
        assert_eq!(kalman_rank_probe(&shapes::non_accessible(), 5, 1), 0.0);
    }

    #[test]
    fn rank_of_dependent_columns() {
        assert_eq!(matrix_rank(vec![vec![1.0, 2.0], vec![2.0, 4.0]]), 1);
        assert_eq!(matrix_rank(vec![vec![1.0, 0.0], vec![0.0, 1e-3]]), 2);
        assert_eq!(matrix_rank(vec![vec![0.0, 0.0]]), 0);
    }

    #[test]
    fn per_input_on_reachable_part() {
        let mut g = shapes::stem(2);
        g.add_node("v", NodeKind::Input, false);
        g.add_node("y", NodeKind::Stock, false);
        g.add_edge("v", "y", EdgeStyle::Spanning);
        let a = per_input_analysis(&g, DashedMode::Solid);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].input, "u");
        assert_eq!(a[0].reachable, set(&["x1", "x2"]));
        assert_eq!((a[0].outcome, a[0].controllable_stock_count), (InputOutcome::Partial, 2));
        assert_eq!((a[1].outcome, a[1].controllable_stock_count), (InputOutcome::Partial, 1));
    }
}
