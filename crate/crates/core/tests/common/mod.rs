#![allow(dead_code)]

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use sca_core::classifier::ExoVerdict;
use sca_core::expr::{BinOp, Builtin, Expr};
use sca_core::graph::{ControlGraph, EdgeStyle, NodeKind};
use sca_core::model::{Aux, Exo, Model, OutOfRange, Stock, Table};
use sca_core::parser::parse_model;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture(name: &str) -> Model {
    let text = std::fs::read_to_string(fixture_path(name)).unwrap();
    parse_model(&text).unwrap_or_else(|e| panic!("{name}: {e:?}"))
}

pub fn report_line(id: u32, title: &str, outcome: &Result<String, String>) {
    match outcome {
        Ok(detail) => println!("[PASS] criterion {id}: {title} — {detail}"),
        Err(detail) => println!("[FAIL] criterion {id}: {title} — {detail}"),
    }
}

/// Random digraph on `n` nodes: each node is an input with probability
/// `p_input`, each ordered pair (self-loops on non-inputs included) is an
/// edge with probability `p`; inputs receive no edges.
pub fn random_digraph(rng: &mut impl Rng, n: usize, p: f64, p_input: f64) -> ControlGraph {
    let mut g = ControlGraph::new();
    let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    for name in &names {
        let kind = if rng.gen_bool(p_input) { NodeKind::Input } else { NodeKind::Stock };
        g.add_node(name, kind, false);
    }
    for a in &names {
        for b in &names {
            if rng.gen_bool(p) {
                g.add_edge(a, b, EdgeStyle::Spanning);
            }
        }
    }
    g
}

/// Stock/input digraph with at least one input.
pub fn random_stock_graph(rng: &mut impl Rng, max_states: usize) -> ControlGraph {
    let states = rng.gen_range(1..=max_states);
    let inputs = rng.gen_range(1..=2);
    let mut g = ControlGraph::new();
    for i in 0..inputs {
        g.add_node(format!("u{i}"), NodeKind::Input, false);
    }
    for i in 0..states {
        g.add_node(format!("x{i}"), NodeKind::Stock, false);
    }
    let p = rng.gen_range(0.1..0.5);
    let names: Vec<String> = g.nodes.iter().map(|n| n.name.clone()).collect();
    for a in &names {
        for b in &names {
            if rng.gen_bool(p) {
                g.add_edge(a, b, EdgeStyle::Spanning);
            }
        }
    }
    g
}

/// Models with analytically known exogenous roles.
pub struct PorcCase {
    pub name: &'static str,
    pub source: &'static str,
    pub expected: &'static [(&'static str, ExoVerdict)],
}

pub const PORC_SUITE: &[PorcCase] = {
    use ExoVerdict::*;
    &[
        PorcCase {
            name: "additive inflow with drain time",
            source: "model A\nstock x = 3 { inflow: u, outflow: x / tau }\nexo u = 1\nexo tau = 4\n",
            expected: &[("u", ControlInput), ("tau", Parameter)],
        },
        PorcCase {
            name: "fractional rate constant",
            source: "model B\nstock x = 2 { outflow: k * x }\nexo k = 0.3\n",
            expected: &[("k", Parameter)],
        },
        PorcCase {
            name: "goal seeking",
            source: "model C\nstock x = 1 { inflow: (g - x) / T }\nexo g = 5\nexo T = 2\n",
            expected: &[("g", ControlInput), ("T", Parameter)],
        },
        PorcCase {
            name: "unused constant",
            source: "model D\nstock x = 1 { outflow: x / 2 }\nexo spare = 9\n",
            expected: &[("spare", Inert)],
        },
        PorcCase {
            name: "pipeline delay time",
            source: "model E\nstock x = 4 { inflow: u, outflow: P }\naux P = DELAY1(x, d)\nexo u = 1\nexo d = 3\n",
            expected: &[("u", ControlInput), ("d", Parameter)],
        },
        PorcCase {
            name: "third-order smoothing time",
            source: "model F\nstock x = 4 { inflow: u - S / 2 }\naux S = SMTH3(x, T)\nexo u = 1\nexo T = 6\n",
            expected: &[("u", ControlInput), ("T", Parameter)],
        },
        PorcCase {
            name: "input through an auxiliary",
            source: "model G\nstock x = 2 { outflow: x / 4 }\nstock y = 1 { inflow: A, outflow: y / 3 }\naux A = x / 2 + u\nexo u = 0.5\n",
            expected: &[("u", ControlInput)],
        },
        PorcCase {
            name: "coupling coefficient",
            source: "model H\nstock x = 2 { outflow: x / 4 }\nstock y = 1 { inflow: c * x, outflow: y / 3 }\nexo c = 0.7\n",
            expected: &[("c", Parameter)],
        },
        PorcCase {
            name: "guarded goal gap",
            source: "model I\nstock x = 1 { inflow: MAX(0, g - x) + 0.1, outflow: x / 5 }\nexo g = 5\n",
            expected: &[("g", ControlInput)],
        },
        PorcCase {
            name: "nonlinear exponent",
            source: "model J\nstock x = 2 { inflow: 1, outflow: x^a }\nexo a = 1.5\n",
            expected: &[("a", Parameter)],
        },
        PorcCase {
            name: "logistic growth",
            source: "model K\nstock N = 10 { inflow: r * N * (1 - N / K) }\nexo r = 0.2\nexo K = 100\n",
            expected: &[("r", Parameter), ("K", Parameter)],
        },
        PorcCase {
            name: "initial value only",
            source: "model L\nstock x = u0 { outflow: x / 2 }\nexo u0 = 3\n",
            expected: &[("u0", Inert)],
        },
        PorcCase {
            name: "separable table effect",
            source: "model M\nstock x = 1 { inflow: LOOKUP(eff, u), outflow: x / 2 }\nexo u = 0.5\ntable eff : (0, 0) (1, 2) (2, 3) clamp\n",
            expected: &[("u", ControlInput)],
        },
        PorcCase {
            name: "multiplicative input",
            source: "model N\nstock x = 1 { inflow: u * x, outflow: x / 2 }\nexo u = 0.1\n",
            expected: &[("u", Parameter)],
        },
    ]
};

/// The same model with every stock's initial value doubled.
pub fn doubled_initials(m: &Model) -> Model {
    let mut out = m.clone();
    for s in out.stocks.iter_mut() {
        s.initial = Expr::bin(BinOp::Mul, Expr::num(2.0), s.initial.clone());
    }
    out
}

/// Generates valid models: auxiliaries read only earlier auxiliaries, delay
/// calls occupy whole definitions, initial values and delay times are
/// constant.
pub struct ModelGen<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> ModelGen<'_, R> {
    fn number(&mut self) -> f64 {
        match self.rng.gen_range(0..6) {
            0 => self.rng.gen_range(0..100) as f64,
            1 => self.rng.gen_range(0.0..10.0),
            2 => self.rng.gen_range(1e-9..1e-5),
            3 => self.rng.gen_range(1e15..1e20),
            4 => 0.5,
            _ => self.rng.gen_range(0.0..1.0) * 10f64.powi(self.rng.gen_range(-300..300)),
        }
    }

    fn expr(&mut self, vars: &[String], tables: &[String], depth: u32) -> Expr {
        if depth == 0 || self.rng.gen_bool(0.3) {
            return if !vars.is_empty() && self.rng.gen_bool(0.6) {
                Expr::var(vars.choose(self.rng).unwrap())
            } else {
                Expr::num(self.number())
            };
        }
        match self.rng.gen_range(0..8) {
            0 => Expr::neg(self.expr(vars, tables, depth - 1)),
            1..=4 => {
                let op = *[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow].choose(self.rng).unwrap();
                Expr::bin(op, self.expr(vars, tables, depth - 1), self.expr(vars, tables, depth - 1))
            }
            5 => {
                let b = *[Builtin::Min, Builtin::Max].choose(self.rng).unwrap();
                Expr::call(b, vec![self.expr(vars, tables, depth - 1), self.expr(vars, tables, depth - 1)])
            }
            6 if !tables.is_empty() => {
                let t = tables.choose(self.rng).unwrap().clone();
                Expr::lookup(t, self.expr(vars, tables, depth - 1))
            }
            _ => {
                let b = *[Builtin::Exp, Builtin::Ln, Builtin::Abs].choose(self.rng).unwrap();
                Expr::call(b, vec![self.expr(vars, tables, depth - 1)])
            }
        }
    }

    pub fn model(&mut self) -> Model {
        let mut m = Model::new(format!("M{}", self.rng.gen_range(0..1000)));
        let n_stocks = self.rng.gen_range(0..4);
        let n_aux = self.rng.gen_range(0..5);
        let n_exo = self.rng.gen_range(0..4);
        let n_tables = self.rng.gen_range(0..2);

        let stocks: Vec<String> = (0..n_stocks).map(|i| format!("s{i}")).collect();
        let exos: Vec<String> = (0..n_exo).map(|i| format!("e{i}")).collect();
        let tables: Vec<String> = (0..n_tables).map(|i| format!("t{i}")).collect();

        for name in &exos {
            let v = if self.rng.gen_bool(0.3) { -self.number() } else { self.number() };
            m.exogenous.push(Exo { name: name.clone(), value: v });
        }
        for name in &tables {
            let k = self.rng.gen_range(2..5);
            let mut x = -self.rng.gen_range(0.0..5.0);
            let points = (0..k)
                .map(|_| {
                    x += self.rng.gen_range(0.1..3.0);
                    (x, self.rng.gen_range(-10.0..10.0))
                })
                .collect();
            let out_of_range = if self.rng.gen_bool(0.5) { OutOfRange::Clamp } else { OutOfRange::Extrapolate };
            m.tables.push(Table { name: name.clone(), points, out_of_range });
        }

        let mut readable: Vec<String> = stocks.iter().chain(&exos).cloned().collect();
        for i in 0..n_aux {
            let name = format!("a{i}");
            let definition = if self.rng.gen_bool(0.15) {
                let b = *[Builtin::Delay1, Builtin::Delay3, Builtin::Smth1, Builtin::Smth3].choose(self.rng).unwrap();
                let input = self.expr(&readable, &tables, 2);
                Expr::call(b, vec![input, Expr::num(self.rng.gen_range(0.5..10.0))])
            } else {
                self.expr(&readable, &tables, 3)
            };
            m.auxiliaries.push(Aux { name: name.clone(), definition });
            readable.push(name);
        }

        for name in &stocks {
            let initial = match self.rng.gen_range(0..3) {
                0 if !exos.is_empty() => Expr::var(exos.choose(self.rng).unwrap()),
                1 => Expr::neg(Expr::num(self.number())),
                _ => Expr::num(self.number()),
            };
            let mut s = Stock { name: name.clone(), initial, inflow: None, outflow: None, hidden: false };
            let which = self.rng.gen_range(0..3);
            if which != 1 {
                s.inflow = Some(self.expr(&readable, &tables, 3));
            }
            if which != 0 {
                s.outflow = Some(self.expr(&readable, &tables, 3));
            }
            s.hidden = self.rng.gen_bool(0.1);
            m.stocks.push(s);
        }
        m
    }
}
