//! Stock-and-flow model types and structural validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::expr::{eval, free_vars, Builtin, EvalError, Expr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub name: String,
    pub stocks: Vec<Stock>,
    pub auxiliaries: Vec<Aux>,
    pub exogenous: Vec<Exo>,
    pub tables: Vec<Table>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stock {
    pub name: String,
    pub initial: Expr,
    pub inflow: Option<Expr>,
    pub outflow: Option<Expr>,
    /// Set on stocks introduced by delay expansion.
    pub hidden: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aux {
    pub name: String,
    pub definition: Expr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exo {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutOfRange {
    Clamp,
    Extrapolate,
}

impl OutOfRange {
    pub fn keyword(self) -> &'static str {
        match self {
            OutOfRange::Clamp => "clamp",
            OutOfRange::Extrapolate => "extrapolate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub out_of_range: OutOfRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VarKind {
    Stock,
    Aux,
    Exo,
    Table,
}

impl Stock {
    pub fn new(name: impl Into<String>, initial: f64) -> Stock {
        Stock { name: name.into(), initial: Expr::Number(initial), inflow: None, outflow: None, hidden: false }
    }

    pub fn with_inflow(mut self, e: Expr) -> Stock {
        self.inflow = Some(e);
        self
    }

    pub fn with_outflow(mut self, e: Expr) -> Stock {
        self.outflow = Some(e);
        self
    }

    /// inflow − outflow, with an absent side contributing zero.
    pub fn net_rate(&self) -> Expr {
        match (&self.inflow, &self.outflow) {
            (Some(i), Some(o)) => Expr::bin(crate::expr::BinOp::Sub, i.clone(), o.clone()),
            (Some(i), None) => i.clone(),
            (None, Some(o)) => Expr::neg(o.clone()),
            (None, None) => Expr::Number(0.0),
        }
    }

    /// Variables read by either flow.
    pub fn flow_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for e in self.inflow.iter().chain(self.outflow.iter()) {
            out.extend(free_vars(e));
        }
        out
    }
}

impl Model {
    pub fn new(name: impl Into<String>) -> Model {
        Model { name: name.into(), stocks: vec![], auxiliaries: vec![], exogenous: vec![], tables: vec![] }
    }

    pub fn kind_of(&self, name: &str) -> Option<VarKind> {
        if self.stocks.iter().any(|s| s.name == name) {
            Some(VarKind::Stock)
        } else if self.auxiliaries.iter().any(|a| a.name == name) {
            Some(VarKind::Aux)
        } else if self.exogenous.iter().any(|e| e.name == name) {
            Some(VarKind::Exo)
        } else if self.tables.iter().any(|t| t.name == name) {
            Some(VarKind::Table)
        } else {
            None
        }
    }

    pub fn stock(&self, name: &str) -> Option<&Stock> {
        self.stocks.iter().find(|s| s.name == name)
    }

    pub fn aux(&self, name: &str) -> Option<&Aux> {
        self.auxiliaries.iter().find(|a| a.name == name)
    }

    pub fn exo(&self, name: &str) -> Option<&Exo> {
        self.exogenous.iter().find(|e| e.name == name)
    }

    pub fn exo_env(&self) -> BTreeMap<String, f64> {
        self.exogenous.iter().map(|e| (e.name.clone(), e.value)).collect()
    }

    pub fn has_delays(&self) -> bool {
        self.auxiliaries.iter().any(|a| a.definition.contains_delay())
    }

    /// Evaluates an expression that may only read exogenous constants.
    pub fn eval_constant(&self, expr: &Expr) -> Result<f64, EvalError> {
        let env = self.exo_env();
        let only_exos = |name: &str| env.get(name).copied();
        eval(expr, &only_exos, &self.tables)
    }

    /// Auxiliaries in evaluation order: a deterministic topological sort over
    /// instantaneous aux→aux dependencies (edges into delay auxiliaries are
    /// not instantaneous), ties broken by name. Auxiliaries caught in an
    /// algebraic loop are appended at the end in name order.
    pub fn aux_order(&self) -> Vec<String> {
        let deps = self.instantaneous_aux_deps();
        let mut indegree: BTreeMap<&str, usize> = deps.keys().map(|k| (k.as_str(), 0)).collect();
        let mut users: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (aux, ds) in &deps {
            for d in ds {
                *indegree.get_mut(aux.as_str()).unwrap() += 1;
                users.entry(d.as_str()).or_default().push(aux.as_str());
            }
        }
        let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, &n)| n == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(deps.len());
        while let Some(next) = ready.pop_first() {
            order.push(next.to_string());
            for u in users.get(next).map(Vec::as_slice).unwrap_or(&[]) {
                let n = indegree.get_mut(u).unwrap();
                *n -= 1;
                if *n == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() < deps.len() {
            let placed: BTreeSet<String> = order.iter().cloned().collect();
            order.extend(deps.keys().filter(|k| !placed.contains(*k)).cloned());
        }
        order
    }

    /// aux → set of auxiliaries it reads instantaneously.
    fn instantaneous_aux_deps(&self) -> BTreeMap<String, BTreeSet<String>> {
        let auxes: BTreeSet<&str> = self.auxiliaries.iter().map(|a| a.name.as_str()).collect();
        self.auxiliaries
            .iter()
            .map(|a| {
                let ds = if a.definition.as_delay().is_some() {
                    BTreeSet::new()
                } else {
                    free_vars(&a.definition).into_iter().filter(|v| auxes.contains(v.as_str())).collect()
                };
                (a.name.clone(), ds)
            })
            .collect()
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiagnosticCode {
    InvalidIdentifier,
    ReservedName,
    DuplicateName,
    UnresolvedReference { name: String },
    TableAsVariable { name: String },
    UnknownTable { name: String },
    ArityMismatch { builtin: String, expected: usize, found: usize },
    StockWithoutFlows,
    NonConstantInitial { reason: String },
    MisplacedDelay,
    InvalidDelayTime { reason: String },
    NonFiniteExo,
    InvalidTable { reason: String },
    AlgebraicLoop { members: Vec<String> },
    ConstantAux,
}

impl fmt::Display for DiagnosticCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiagnosticCode::InvalidIdentifier => write!(f, "invalid identifier"),
            DiagnosticCode::ReservedName => write!(f, "name collides with a builtin function"),
            DiagnosticCode::DuplicateName => write!(f, "duplicate variable name"),
            DiagnosticCode::UnresolvedReference { name } => write!(f, "reference to undefined variable `{name}`"),
            DiagnosticCode::TableAsVariable { name } => {
                write!(f, "table `{name}` used outside LOOKUP")
            }
            DiagnosticCode::UnknownTable { name } => write!(f, "LOOKUP of undefined table `{name}`"),
            DiagnosticCode::ArityMismatch { builtin, expected, found } => {
                write!(f, "{builtin} takes {expected} argument(s), found {found}")
            }
            DiagnosticCode::StockWithoutFlows => write!(f, "stock needs an inflow or an outflow"),
            DiagnosticCode::NonConstantInitial { reason } => write!(f, "initial value is not constant: {reason}"),
            DiagnosticCode::MisplacedDelay => {
                write!(f, "delay and smooth calls must form the whole right-hand side of an aux")
            }
            DiagnosticCode::InvalidDelayTime { reason } => write!(f, "invalid delay time: {reason}"),
            DiagnosticCode::NonFiniteExo => write!(f, "exogenous value is not finite"),
            DiagnosticCode::InvalidTable { reason } => write!(f, "invalid table: {reason}"),
            DiagnosticCode::AlgebraicLoop { members } => {
                write!(f, "algebraic loop among auxiliaries {{{}}}", members.join(", "))
            }
            DiagnosticCode::ConstantAux => write!(f, "auxiliary references no variables (candidate exogenous constant)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub variable: String,
    pub code: DiagnosticCode,
}

impl Diagnostic {
    fn error(variable: &str, code: DiagnosticCode) -> Diagnostic {
        Diagnostic { severity: Severity::Error, variable: variable.to_string(), code }
    }

    fn warning(variable: &str, code: DiagnosticCode) -> Diagnostic {
        Diagnostic { severity: Severity::Warning, variable: variable.to_string(), code }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.variable, self.code)
    }
}

/// Checks every structural invariant of a model. An empty result means the
/// model is valid and warning-free.
pub fn validate(model: &Model) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    if !is_identifier(&model.name) {
        out.push(Diagnostic::error(&model.name, DiagnosticCode::InvalidIdentifier));
    }

    let mut kinds: BTreeMap<&str, VarKind> = BTreeMap::new();
    let declared = model
        .stocks
        .iter()
        .map(|s| (s.name.as_str(), VarKind::Stock))
        .chain(model.auxiliaries.iter().map(|a| (a.name.as_str(), VarKind::Aux)))
        .chain(model.exogenous.iter().map(|e| (e.name.as_str(), VarKind::Exo)))
        .chain(model.tables.iter().map(|t| (t.name.as_str(), VarKind::Table)));
    for (name, kind) in declared {
        if !is_identifier(name) {
            out.push(Diagnostic::error(name, DiagnosticCode::InvalidIdentifier));
        } else if Builtin::from_name(name).is_some() {
            out.push(Diagnostic::error(name, DiagnosticCode::ReservedName));
        }
        if kinds.insert(name, kind).is_some() {
            out.push(Diagnostic::error(name, DiagnosticCode::DuplicateName));
        }
    }

    let check = |owner: &str, e: &Expr, out: &mut Vec<Diagnostic>| check_expr(owner, e, &kinds, out);

    for s in &model.stocks {
        if s.inflow.is_none() && s.outflow.is_none() {
            out.push(Diagnostic::error(&s.name, DiagnosticCode::StockWithoutFlows));
        }
        for e in s.inflow.iter().chain(s.outflow.iter()) {
            check(&s.name, e, &mut out);
            if e.contains_delay() {
                out.push(Diagnostic::error(&s.name, DiagnosticCode::MisplacedDelay));
            }
        }
        check(&s.name, &s.initial, &mut out);
        if let Some(reason) = constant_problem(model, &kinds, &s.initial) {
            out.push(Diagnostic::error(&s.name, DiagnosticCode::NonConstantInitial { reason }));
        }
    }

    for a in &model.auxiliaries {
        check(&a.name, &a.definition, &mut out);
        match a.definition.as_delay() {
            Some((_, input, time)) => {
                if input.contains_delay() || time.contains_delay() {
                    out.push(Diagnostic::error(&a.name, DiagnosticCode::MisplacedDelay));
                }
                if let Some(reason) = constant_problem(model, &kinds, time) {
                    out.push(Diagnostic::error(&a.name, DiagnosticCode::InvalidDelayTime { reason }));
                } else if let Ok(t) = model.eval_constant(time) {
                    if t <= 0.0 {
                        out.push(Diagnostic::error(
                            &a.name,
                            DiagnosticCode::InvalidDelayTime { reason: format!("{t} is not positive") },
                        ));
                    }
                }
            }
            None => {
                if a.definition.contains_delay() {
                    out.push(Diagnostic::error(&a.name, DiagnosticCode::MisplacedDelay));
                }
            }
        }
        if free_vars(&a.definition).is_empty() {
            out.push(Diagnostic::warning(&a.name, DiagnosticCode::ConstantAux));
        }
    }

    for e in &model.exogenous {
        if !e.value.is_finite() {
            out.push(Diagnostic::error(&e.name, DiagnosticCode::NonFiniteExo));
        }
    }

    for t in &model.tables {
        if let Some(reason) = table_problem(t) {
            out.push(Diagnostic::error(&t.name, DiagnosticCode::InvalidTable { reason }));
        }
    }

    for members in algebraic_loops(model) {
        let first = members[0].clone();
        out.push(Diagnostic::error(&first, DiagnosticCode::AlgebraicLoop { members }));
    }

    out
}

fn table_problem(t: &Table) -> Option<String> {
    if t.points.len() < 2 {
        return Some("needs at least 2 points".into());
    }
    if t.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Some("non-finite point".into());
    }
    if t.points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Some("x values must be strictly increasing".into());
    }
    None
}

/// Why `expr` is not constant-evaluable (reads only exogenous constants and
/// evaluates to a finite value), or `None` when it is.
fn constant_problem(model: &Model, kinds: &BTreeMap<&str, VarKind>, expr: &Expr) -> Option<String> {
    if let Some(v) = free_vars(expr).into_iter().find(|v| kinds.get(v.as_str()) != Some(&VarKind::Exo)) {
        return Some(format!("reads non-constant `{v}`"));
    }
    if expr.contains_delay() {
        return Some("contains a delay".into());
    }
    model.eval_constant(expr).err().map(|e| e.to_string())
}

fn check_expr(owner: &str, expr: &Expr, kinds: &BTreeMap<&str, VarKind>, out: &mut Vec<Diagnostic>) {
    match expr {
        Expr::Number(_) => {}
        Expr::Var(v) => match kinds.get(v.as_str()) {
            None => out.push(Diagnostic::error(owner, DiagnosticCode::UnresolvedReference { name: v.clone() })),
            Some(VarKind::Table) => {
                out.push(Diagnostic::error(owner, DiagnosticCode::TableAsVariable { name: v.clone() }))
            }
            Some(_) => {}
        },
        Expr::Neg(e) => check_expr(owner, e, kinds, out),
        Expr::Binary(_, l, r) => {
            check_expr(owner, l, kinds, out);
            check_expr(owner, r, kinds, out);
        }
        Expr::Call(b, args) => {
            if args.len() != b.arity() {
                out.push(Diagnostic::error(
                    owner,
                    DiagnosticCode::ArityMismatch { builtin: b.name().into(), expected: b.arity(), found: args.len() },
                ));
            }
            let rest = if *b == Builtin::Lookup {
                match args.first() {
                    Some(Expr::Var(t)) if kinds.get(t.as_str()) == Some(&VarKind::Table) => {}
                    Some(Expr::Var(t)) => {
                        out.push(Diagnostic::error(owner, DiagnosticCode::UnknownTable { name: t.clone() }))
                    }
                    _ => out.push(Diagnostic::error(owner, DiagnosticCode::UnknownTable { name: String::new() })),
                }
                args.get(1..).unwrap_or(&[])
            } else {
                &args[..]
            };
            rest.iter().for_each(|a| check_expr(owner, a, kinds, out));
        }
    }
}

/// Strongly connected components of the instantaneous aux dependency graph
/// that form cycles, each sorted by name.
fn algebraic_loops(model: &Model) -> Vec<Vec<String>> {
    let deps = model.instantaneous_aux_deps();
    let names: Vec<&String> = deps.keys().collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let adj: Vec<Vec<usize>> = names
        .iter()
        .map(|n| deps[*n].iter().filter_map(|d| index.get(d.as_str()).copied()).collect())
        .collect();

    let mut loops = Vec::new();
    for comp in tarjan_scc(&adj) {
        let cyclic = comp.len() > 1 || adj[comp[0]].contains(&comp[0]);
        if cyclic {
            let mut members: Vec<String> = comp.iter().map(|&i| names[i].clone()).collect();
            members.sort();
            loops.push(members);
        }
    }
    loops.sort();
    loops
}

/// Iterative Tarjan; components are returned in reverse topological order.
pub(crate) fn tarjan_scc(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut counter = 0;

    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut next)) = call.last_mut() {
            if *next < adj[v].len() {
                let w = adj[v][*next];
                *next += 1;
                if index[w] == usize::MAX {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comps.push(comp);
                }
            }
        }
    }
    comps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::BinOp;

    fn aux(name: &str, def: Expr) -> Aux {
        Aux { name: name.into(), definition: def }
    }

    #[test]
    fn algebraic_loop_reported_once() {
        let mut m = Model::new("M");
        m.auxiliaries.push(aux("A", Expr::var("B")));
        m.auxiliaries.push(aux("B", Expr::var("A")));
        let d = validate(&m);
        assert_eq!(
            d,
            vec![Diagnostic::error("A", DiagnosticCode::AlgebraicLoop { members: vec!["A".into(), "B".into()] })]
        );
    }

    #[test]
    fn delay_breaks_algebraic_loop() {
        let mut m = Model::new("M");
        m.exogenous.push(Exo { name: "T".into(), value: 2.0 });
        m.auxiliaries.push(aux("A", Expr::call(Builtin::Smth1, vec![Expr::var("B"), Expr::var("T")])));
        m.auxiliaries.push(aux("B", Expr::bin(BinOp::Add, Expr::var("A"), Expr::num(1.0))));
        assert!(validate(&m).is_empty());
    }

    #[test]
    fn constant_aux_warning() {
        let mut m = Model::new("M");
        m.auxiliaries.push(aux("C", Expr::num(3.0)));
        assert_eq!(validate(&m), vec![Diagnostic::warning("C", DiagnosticCode::ConstantAux)]);
    }

    #[test]
    fn stock_needs_a_flow() {
        let mut m = Model::new("M");
        m.stocks.push(Stock::new("S", 1.0));
        assert_eq!(validate(&m), vec![Diagnostic::error("S", DiagnosticCode::StockWithoutFlows)]);
    }

    #[test]
    fn misplaced_delay_and_bad_delay_time() {
        let mut m = Model::new("M");
        m.exogenous.push(Exo { name: "q".into(), value: 1.0 });
        m.auxiliaries.push(aux(
            "A",
            Expr::bin(BinOp::Mul, Expr::num(2.0), Expr::call(Builtin::Delay1, vec![Expr::var("q"), Expr::num(3.0)])),
        ));
        m.auxiliaries.push(aux("B", Expr::call(Builtin::Smth1, vec![Expr::var("q"), Expr::num(0.0)])));
        let codes: Vec<_> = validate(&m).into_iter().map(|d| (d.variable, d.code)).collect();
        assert!(codes.contains(&("A".into(), DiagnosticCode::MisplacedDelay)));
        assert!(codes
            .iter()
            .any(|(v, c)| v == "B" && matches!(c, DiagnosticCode::InvalidDelayTime { .. })));
    }

    #[test]
    fn references_and_tables() {
        let mut m = Model::new("M");
        m.tables.push(Table { name: "t".into(), points: vec![(0.0, 0.0), (0.0, 1.0)], out_of_range: OutOfRange::Clamp });
        m.auxiliaries.push(aux("A", Expr::bin(BinOp::Add, Expr::var("t"), Expr::var("ghost"))));
        m.auxiliaries.push(aux("B", Expr::lookup("nope", Expr::var("A"))));
        let codes: Vec<_> = validate(&m).into_iter().map(|d| d.code).collect();
        assert!(codes.contains(&DiagnosticCode::TableAsVariable { name: "t".into() }));
        assert!(codes.contains(&DiagnosticCode::UnresolvedReference { name: "ghost".into() }));
        assert!(codes.contains(&DiagnosticCode::UnknownTable { name: "nope".into() }));
        assert!(codes.iter().any(|c| matches!(c, DiagnosticCode::InvalidTable { .. })));
    }

    #[test]
    fn duplicate_and_reserved_names() {
        let mut m = Model::new("M");
        m.exogenous.push(Exo { name: "x".into(), value: 1.0 });
        m.exogenous.push(Exo { name: "x".into(), value: 2.0 });
        m.exogenous.push(Exo { name: "MAX".into(), value: 2.0 });
        let codes: Vec<_> = validate(&m).into_iter().map(|d| d.code).collect();
        assert!(codes.contains(&DiagnosticCode::DuplicateName));
        assert!(codes.contains(&DiagnosticCode::ReservedName));
    }

    #[test]
    fn aux_order_is_topological_with_name_ties() {
        let mut m = Model::new("M");
        m.exogenous.push(Exo { name: "e".into(), value: 1.0 });
        m.auxiliaries.push(aux("z", Expr::var("e")));
        m.auxiliaries.push(aux("b", Expr::var("z")));
        m.auxiliaries.push(aux("a", Expr::var("e")));
        assert_eq!(m.aux_order(), vec!["a", "z", "b"]);
    }
}
