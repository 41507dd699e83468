//! Delay expansion and fixed-step Euler integration.
//!
//! `DELAYn` and `SMTHn` calls become chains of `n` hidden stocks named
//! `<aux>__d1 .. <aux>__dn`, each stage draining with time constant `T/n`.
//! The smooth output is the last stage level; the delay output is the last
//! stage outflow. The original auxiliary survives as an alias of the output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{eval, free_vars, BinOp, Builtin, EvalError, Expr};
use crate::model::{Aux, Model, Stock};

pub type StateVector = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SimError {
    #[error("evaluating `{variable}`: {source}")]
    Domain {
        variable: String,
        #[source]
        source: EvalError,
    },
    #[error("non-finite value of `{variable}` at t = {t}")]
    NonFiniteAbort { t: f64, variable: String },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("state does not bind stock `{0}`")]
    MissingState(String),
}

/// One delay or smooth call turned into hidden stocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayExpansion {
    pub aux: String,
    pub builtin: Builtin,
    pub hidden_stocks: Vec<String>,
    pub stage_time: Option<f64>,
    /// Initial level given to every stage.
    pub initial_level: f64,
    pub note: Option<String>,
}

pub fn stage_name(aux: &str, k: usize) -> String {
    format!("{aux}__d{k}")
}

/// Replaces delay calls by explicit hidden stocks. Models without delays are
/// returned unchanged.
pub fn expand_delays(model: &Model) -> Model {
    expand_delays_with_record(model).0
}

pub fn expand_delays_with_record(model: &Model) -> (Model, Vec<DelayExpansion>) {
    if !model.has_delays() {
        return (model.clone(), Vec::new());
    }
    let mut out = model.clone();
    let mut records = Vec::new();
    let mut hidden = Vec::new();
    let mut memo = InitialValues::new(model);

    for aux in out.auxiliaries.iter_mut() {
        let Some((builtin, input, time)) = aux.definition.as_delay() else { continue };
        let order = builtin.delay_order().unwrap_or(1);
        let (input, time) = (input.clone(), time.clone());
        let stage_time = if order == 1 { time.clone() } else { Expr::bin(BinOp::Div, time, Expr::num(order as f64)) };
        let names: Vec<String> = (1..=order).map(|k| stage_name(&aux.name, k)).collect();
        let pipeline = matches!(builtin, Builtin::Delay1 | Builtin::Delay3);

        let tau = model.eval_constant(&stage_time).ok();
        let input0 = memo.value_of_expr(&input);
        let (initial_level, note) = match (input0, tau) {
            (Ok(x), Some(tau)) => (if pipeline { x * tau } else { x }, None),
            (Err(e), _) => (0.0, Some(format!("input not evaluable at t=0 ({e}); stages start at 0"))),
            (_, None) => (0.0, Some("stage time not evaluable; stages start at 0".to_string())),
        };

        for (k, name) in names.iter().enumerate() {
            let upstream = if k == 0 {
                if pipeline {
                    input.clone()
                } else {
                    Expr::bin(BinOp::Div, input.clone(), stage_time.clone())
                }
            } else {
                Expr::bin(BinOp::Div, Expr::var(&names[k - 1]), stage_time.clone())
            };
            hidden.push(Stock {
                name: name.clone(),
                initial: Expr::num(initial_level),
                inflow: Some(upstream),
                outflow: Some(Expr::bin(BinOp::Div, Expr::var(name), stage_time.clone())),
                hidden: true,
            });
        }
        let last = Expr::var(names.last().unwrap());
        aux.definition = if pipeline { Expr::bin(BinOp::Div, last, stage_time) } else { last };
        records.push(DelayExpansion {
            aux: aux.name.clone(),
            builtin,
            hidden_stocks: names,
            stage_time: tau,
            initial_level,
            note,
        });
    }
    out.stocks.extend(hidden);
    (out, records)
}

/// Memoized t=0 values of an unexpanded model, reading every delay output as
/// its input (the steady-state initialization convention).
struct InitialValues<'m> {
    model: &'m Model,
    values: BTreeMap<String, f64>,
    visiting: BTreeSet<String>,
}

impl<'m> InitialValues<'m> {
    fn new(model: &'m Model) -> Self {
        let mut values = model.exo_env();
        for s in &model.stocks {
            if let Ok(v) = model.eval_constant(&s.initial) {
                values.insert(s.name.clone(), v);
            }
        }
        InitialValues { model, values, visiting: BTreeSet::new() }
    }

    fn value_of(&mut self, name: &str) -> Result<f64, EvalError> {
        if let Some(v) = self.values.get(name) {
            return Ok(*v);
        }
        let aux = self.model.aux(name).ok_or_else(|| EvalError::UnboundVariable(name.to_string()))?;
        if !self.visiting.insert(name.to_string()) {
            return Err(EvalError::UnboundVariable(name.to_string()));
        }
        let def = aux.definition.strip_delays();
        let v = self.value_of_expr(&def);
        self.visiting.remove(name);
        let v = v?;
        self.values.insert(name.to_string(), v);
        Ok(v)
    }

    fn value_of_expr(&mut self, e: &Expr) -> Result<f64, EvalError> {
        let e = e.strip_delays();
        for v in free_vars(&e) {
            self.value_of(&v)?;
        }
        eval(&e, &self.values, &self.model.tables)
    }
}

/// All variable values at t=0. Delay outputs of an unexpanded model read as
/// their inputs.
pub fn initial_values(model: &Model) -> Result<BTreeMap<String, f64>, SimError> {
    let mut iv = InitialValues::new(model);
    for s in &model.stocks {
        if !iv.values.contains_key(&s.name) {
            let err = model.eval_constant(&s.initial).unwrap_err();
            return Err(SimError::Domain { variable: s.name.clone(), source: err });
        }
    }
    let names: Vec<String> = model.auxiliaries.iter().map(|a| a.name.clone()).collect();
    for name in names {
        iv.value_of(&name).map_err(|source| SimError::Domain { variable: name.clone(), source })?;
    }
    Ok(iv.values)
}

/// Baseline stock levels of an (expanded) model.
pub fn initial_state(model: &Model) -> Result<StateVector, SimError> {
    model
        .stocks
        .iter()
        .map(|s| {
            model
                .eval_constant(&s.initial)
                .map(|v| (s.name.clone(), v))
                .map_err(|source| SimError::Domain { variable: s.name.clone(), source })
        })
        .collect()
}

/// Reusable evaluation plan for an expanded model.
#[derive(Clone, Debug)]
pub struct Evaluator<'m> {
    model: &'m Model,
    order: Vec<&'m Aux>,
}

impl<'m> Evaluator<'m> {
    pub fn new(model: &'m Model) -> Self {
        let order = model.aux_order().iter().filter_map(|n| model.aux(n)).collect();
        Evaluator { model, order }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Environment holding exos, stocks and every auxiliary.
    pub fn full_env(&self, state: &StateVector, exo_env: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>, SimError> {
        let mut env = exo_env.clone();
        for s in &self.model.stocks {
            let v = state.get(&s.name).ok_or_else(|| SimError::MissingState(s.name.clone()))?;
            env.insert(s.name.clone(), *v);
        }
        for a in &self.order {
            let v = eval(&a.definition, &env, &self.model.tables)
                .map_err(|source| SimError::Domain { variable: a.name.clone(), source })?;
            env.insert(a.name.clone(), v);
        }
        Ok(env)
    }

    pub fn derivatives(&self, state: &StateVector, exo_env: &BTreeMap<String, f64>) -> Result<StateVector, SimError> {
        let env = self.full_env(state, exo_env)?;
        self.derivatives_from_env(&env)
    }

    fn derivatives_from_env(&self, env: &BTreeMap<String, f64>) -> Result<StateVector, SimError> {
        let mut out = BTreeMap::new();
        for s in &self.model.stocks {
            let rate = |e: &Option<Expr>| -> Result<f64, SimError> {
                match e {
                    Some(e) => eval(e, env, &self.model.tables)
                        .map_err(|source| SimError::Domain { variable: s.name.clone(), source }),
                    None => Ok(0.0),
                }
            };
            out.insert(s.name.clone(), rate(&s.inflow)? - rate(&s.outflow)?);
        }
        Ok(out)
    }
}

/// inflow − outflow for every stock of an expanded model.
pub fn stock_derivatives(
    model: &Model,
    state: &StateVector,
    exo_env: &BTreeMap<String, f64>,
) -> Result<StateVector, SimError> {
    Evaluator::new(model).derivatives(state, exo_env)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Constant(f64),
    /// `before` until `t0`, `after` from `t0` on.
    Step { t0: f64, before: f64, after: f64 },
}

impl Schedule {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Schedule::Constant(v) => v,
            Schedule::Step { t0, before, after } => {
                if t < t0 {
                    before
                } else {
                    after
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub overrides: BTreeMap<String, Schedule>,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64) -> Self {
        SimConfig { dt, horizon, overrides: BTreeMap::new() }
    }

    pub fn with_override(mut self, exo: impl Into<String>, schedule: Schedule) -> Self {
        self.overrides.insert(exo.into(), schedule);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: BTreeMap<String, Vec<f64>>,
}

impl Trajectory {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.values.get(name).map(Vec::as_slice)
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.values.get(name).and_then(|v| v.last().copied())
    }

    /// `time,<var>,...` header, one row per step, `%.12g` numbers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time");
        for name in self.values.keys() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format_g(*t, 12));
            for series in self.values.values() {
                let _ = write!(out, ",{}", format_g(series[i], 12));
            }
            out.push('\n');
        }
        out
    }
}

/// C-style `%.<precision>g`.
pub fn format_g(v: f64, precision: usize) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let p = precision.max(1);
    let sci = format!("{:.*e}", p - 1, v);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= p as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", strip(mantissa), sign, exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        strip(&format!("{:.*}", decimals, v))
    }
}

/// Fixed-step Euler: `S(t+dt) = S(t) + dt·(inflow − outflow)`. Delay calls are
/// expanded first; overrides are applied before each step.
pub fn simulate(model: &Model, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
        return Err(SimError::InvalidConfig(format!("dt must be positive, got {}", cfg.dt)));
    }
    if !(cfg.horizon >= cfg.dt && cfg.horizon.is_finite()) {
        return Err(SimError::InvalidConfig(format!("horizon {} shorter than dt {}", cfg.horizon, cfg.dt)));
    }
    if let Some(name) = cfg.overrides.keys().find(|n| model.exo(n).is_none()) {
        return Err(SimError::InvalidConfig(format!("override of unknown exogenous `{name}`")));
    }

    let expanded = expand_delays(model);
    let evaluator = Evaluator::new(&expanded);
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let base_exo = expanded.exo_env();
    let mut state = initial_state(&expanded)?;

    let mut times = Vec::with_capacity(steps + 1);
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for i in 0..=steps {
        let t = i as f64 * cfg.dt;
        let mut exo = base_exo.clone();
        for (name, schedule) in &cfg.overrides {
            exo.insert(name.clone(), schedule.at(t));
        }
        let env = evaluator.full_env(&state, &exo).map_err(|e| at_time(e, t))?;
        times.push(t);
        for s in &expanded.stocks {
            values.entry(s.name.clone()).or_default().push(env[&s.name]);
        }
        for a in &expanded.auxiliaries {
            values.entry(a.name.clone()).or_default().push(env[&a.name]);
        }
        if i == steps {
            break;
        }
        let rates = evaluator.derivatives_from_env(&env).map_err(|e| at_time(e, t))?;
        for (name, rate) in rates {
            let level = state.get_mut(&name).unwrap();
            *level += cfg.dt * rate;
            if !level.is_finite() {
                return Err(SimError::NonFiniteAbort { t: t + cfg.dt, variable: name });
            }
        }
    }
    Ok(Trajectory { times, values })
}

fn at_time(e: SimError, t: f64) -> SimError {
    match e {
        SimError::Domain { variable, source: EvalError::Domain(crate::expr::DomainKind::NonFiniteResult) } => {
            SimError::NonFiniteAbort { t, variable }
        }
        other => other,
    }
}
