//! Step 1: split exogenous variables into control inputs and parameters.
//!
//! A control input shifts stock derivatives without changing how they depend
//! on the stocks, so every mixed partial ∂²ẋᵢ/∂z∂xⱼ vanishes. A parameter
//! reshapes the dependency itself. Both partials are estimated by finite
//! differences over a seeded set of sample states.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{free_vars, Expr};
use crate::model::Model;
use crate::simulator::{expand_delays, initial_state, Evaluator, SimError, StateVector};

pub const TAU_ZERO: f64 = 1e-7;
pub const TAU_SIG: f64 = 1e-4;
pub const DEFAULT_SAMPLES: usize = 16;
pub const DEFAULT_SEED: u64 = 42;

const JACOBIAN_EPS: f64 = 1e-6;
/// Inner Jacobian step used under the z-difference. A larger step keeps the
/// roundoff in each entry well below `TAU_ZERO` once divided by `2·h_z`.
const INNER_JACOBIAN_EPS: f64 = 1e-4;
const Z_EPS: f64 = 1e-4;
const KINK_FACTOR: f64 = 10.0;
const RETRY_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ClassifyError {
    #[error("derivative of `{stock}` not evaluable on either side of `{wrt}`")]
    Domain { stock: String, wrt: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("sample {index} sits on a kink of the rate equations")]
    SampleRejected { index: usize },
    #[error("unknown exogenous variable `{0}`")]
    UnknownExo(String),
    #[error("no samples given")]
    NoSamples,
}

/// Dense ∂ẋᵢ/∂xⱼ over the model stocks, rows and columns in stock order.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    pub stocks: Vec<String>,
    pub entries: Vec<Vec<f64>>,
}

impl Jacobian {
    pub fn get(&self, i: &str, j: &str) -> Option<f64> {
        let i = self.stocks.iter().position(|s| s == i)?;
        let j = self.stocks.iter().position(|s| s == j)?;
        Some(self.entries[i][j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: StateVector,
    pub exo_env: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PorcEvidence {
    pub exo: String,
    /// stock → max |∂ẋᵢ/∂z|.
    pub d_xdot_dz: BTreeMap<String, f64>,
    /// stock i → stock j → max |∂²ẋᵢ/∂z∂xⱼ| / max(1, |∂ẋᵢ/∂xⱼ|).
    pub porc_terms: BTreeMap<String, BTreeMap<String, f64>>,
    pub samples_used: usize,
    pub agreement: bool,
}

impl PorcEvidence {
    pub fn max_porc(&self) -> f64 {
        self.porc_terms.values().flat_map(|row| row.values()).fold(0.0, |a, &b| a.max(b))
    }

    pub fn max_d_xdot_dz(&self) -> f64 {
        self.d_xdot_dz.values().fold(0.0, |a, &b| a.max(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExoVerdict {
    ControlInput,
    Parameter,
    Inert,
    Undetermined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExoClassification {
    pub exo: String,
    pub verdict: ExoVerdict,
    pub evidence: PorcEvidence,
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Total sample count K, baseline included.
    pub samples: usize,
    pub seed: u64,
    pub tau_zero: f64,
    pub tau_sig: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { samples: DEFAULT_SAMPLES, seed: DEFAULT_SEED, tau_zero: TAU_ZERO, tau_sig: TAU_SIG }
    }
}

impl ClassifierConfig {
    /// Threshold rule applied to a pair of maxima.
    pub fn verdict(&self, max_porc: f64, max_dz: f64) -> ExoVerdict {
        if max_porc >= self.tau_sig {
            ExoVerdict::Parameter
        } else if max_porc <= self.tau_zero && max_dz >= self.tau_sig {
            ExoVerdict::ControlInput
        } else if max_porc <= self.tau_zero && max_dz <= self.tau_zero {
            ExoVerdict::Inert
        } else {
            ExoVerdict::Undetermined
        }
    }
}

/// Derivative evaluation on dense vectors.
struct Probe<'m> {
    eval: Evaluator<'m>,
    stocks: Vec<String>,
}

struct Diff {
    central: f64,
    kink: bool,
}

impl<'m> Probe<'m> {
    fn new(model: &'m Model) -> Self {
        Probe { eval: Evaluator::new(model), stocks: model.stocks.iter().map(|s| s.name.clone()).collect() }
    }

    fn rates(&self, x: &[f64], env: &BTreeMap<String, f64>) -> Option<Vec<f64>> {
        let state: StateVector = self.stocks.iter().cloned().zip(x.iter().copied()).collect();
        let d = self.eval.derivatives(&state, env).ok()?;
        let v: Vec<f64> = self.stocks.iter().map(|s| d[s]).collect();
        v.iter().all(|r| r.is_finite()).then_some(v)
    }

    fn vector(&self, state: &StateVector) -> Result<Vec<f64>, SimError> {
        self.stocks.iter().map(|s| state.get(s).copied().ok_or_else(|| SimError::MissingState(s.clone()))).collect()
    }

    /// Column-wise Jacobian with a one-sided kink flag per entry.
    fn jacobian(
        &self,
        x: &[f64],
        env: &BTreeMap<String, f64>,
        eps: f64,
        tau_sig: f64,
    ) -> Result<(Vec<Vec<f64>>, bool), (usize, usize)> {
        let n = x.len();
        let f0 = self.rates(x, env);
        let mut jac = vec![vec![0.0; n]; n];
        let mut kink = false;
        for j in 0..n {
            let h = eps * x[j].abs().max(1.0);
            let mut xp = x.to_vec();
            xp[j] += h;
            let mut xm = x.to_vec();
            xm[j] -= h;
            let diffs = difference(self.rates(&xp, env), f0.as_deref(), self.rates(&xm, env), h, tau_sig, n)
                .map_err(|i| (i, j))?;
            for (i, d) in diffs.into_iter().enumerate() {
                jac[i][j] = d.central;
                kink |= d.kink;
            }
        }
        Ok((jac, kink))
    }
}

/// Central difference with one-sided fallback; `Err(i)` when neither side of
/// component `i` evaluates.
fn difference(
    plus: Option<Vec<f64>>,
    mid: Option<&[f64]>,
    minus: Option<Vec<f64>>,
    h: f64,
    tau_sig: f64,
    n: usize,
) -> Result<Vec<Diff>, usize> {
    match (plus, mid, minus) {
        (Some(p), Some(m), Some(q)) => Ok((0..n)
            .map(|i| {
                let central = (p[i] - q[i]) / (2.0 * h);
                let fwd = (p[i] - m[i]) / h;
                let bwd = (m[i] - q[i]) / h;
                Diff { central, kink: (fwd - bwd).abs() > KINK_FACTOR * tau_sig * central.abs().max(1.0) }
            })
            .collect()),
        (Some(p), _, Some(q)) => Ok((0..n).map(|i| Diff { central: (p[i] - q[i]) / (2.0 * h), kink: false }).collect()),
        (Some(p), Some(m), None) => Ok((0..n).map(|i| Diff { central: (p[i] - m[i]) / h, kink: false }).collect()),
        (None, Some(m), Some(q)) => Ok((0..n).map(|i| Diff { central: (m[i] - q[i]) / h, kink: false }).collect()),
        _ => Err(0),
    }
}

fn difference_matrix(
    plus: &[Vec<f64>],
    mid: &[Vec<f64>],
    minus: &[Vec<f64>],
    h: f64,
    tau_sig: f64,
) -> (Vec<Vec<f64>>, bool) {
    let mut kink = false;
    let out = plus
        .iter()
        .zip(mid)
        .zip(minus)
        .map(|((p, m), q)| {
            p.iter()
                .zip(m)
                .zip(q)
                .map(|((p, m), q)| {
                    let central = (p - q) / (2.0 * h);
                    let mismatch = ((p - m) / h - (m - q) / h).abs();
                    kink |= mismatch > KINK_FACTOR * tau_sig * central.abs().max(1.0);
                    central
                })
                .collect()
        })
        .collect();
    (out, kink)
}

/// ∂ẋᵢ/∂xⱼ by central differences with step `1e-6·max(1, |xⱼ|)`.
pub fn jacobian(model: &Model, state: &StateVector, exo_env: &BTreeMap<String, f64>) -> Result<Jacobian, ClassifyError> {
    let probe = Probe::new(model);
    let x = probe.vector(state)?;
    let (entries, _) = probe.jacobian(&x, exo_env, JACOBIAN_EPS, TAU_SIG).map_err(|(i, j)| ClassifyError::Domain {
        stock: probe.stocks[i].clone(),
        wrt: probe.stocks[j].clone(),
    })?;
    Ok(Jacobian { stocks: probe.stocks, entries })
}

/// Per-sample magnitudes: |∂ẋ/∂z| per stock and the normalized mixed partials.
struct SampleEvidence {
    dz: Vec<f64>,
    mixed: Vec<Vec<f64>>,
}

impl SampleEvidence {
    fn maxima(&self) -> (f64, f64) {
        let p = self.mixed.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let d = self.dz.iter().fold(0.0f64, |a, &b| a.max(b));
        (p, d)
    }
}

/// Evidence at one point, or `None` on a kink or evaluation failure.
fn evidence_at(probe: &Probe, x: &[f64], env: &BTreeMap<String, f64>, exo: &str, tau_sig: f64) -> Option<SampleEvidence> {
    let n = x.len();
    let z = env[exo];
    let h = Z_EPS * z.abs().max(1.0);
    let shifted = |dz: f64| {
        let mut e = env.clone();
        e.insert(exo.to_string(), z + dz);
        e
    };
    let (env_p, env_m) = (shifted(h), shifted(-h));

    let f0 = probe.rates(x, env)?;
    let fp = probe.rates(x, &env_p)?;
    let fm = probe.rates(x, &env_m)?;
    let dz = difference(Some(fp), Some(&f0), Some(fm), h, tau_sig, n).ok()?;
    if dz.iter().any(|d| d.kink) {
        return None;
    }

    let (j0, k0) = probe.jacobian(x, env, INNER_JACOBIAN_EPS, tau_sig).ok()?;
    let (jp, kp) = probe.jacobian(x, &env_p, INNER_JACOBIAN_EPS, tau_sig).ok()?;
    let (jm, km) = probe.jacobian(x, &env_m, INNER_JACOBIAN_EPS, tau_sig).ok()?;
    if k0 || kp || km {
        return None;
    }
    let (mixed, kink) = difference_matrix(&jp, &j0, &jm, h, tau_sig);
    if kink {
        return None;
    }
    let mixed = mixed
        .iter()
        .zip(&j0)
        .map(|(row, jrow)| row.iter().zip(jrow).map(|(m, j)| m.abs() / j.abs().max(1.0)).collect())
        .collect();
    Some(SampleEvidence { dz: dz.iter().map(|d| d.central.abs()).collect(), mixed })
}

/// Evidence at a sample, retrying at the state scaled by `1 ± 1e-3` when the
/// probes straddle a kink.
fn sample_evidence(probe: &Probe, x: &[f64], env: &BTreeMap<String, f64>, exo: &str, tau_sig: f64) -> Option<SampleEvidence> {
    evidence_at(probe, x, env, exo, tau_sig).or_else(|| {
        [1.0 + RETRY_SCALE, 1.0 - RETRY_SCALE].iter().find_map(|s| {
            let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
            evidence_at(probe, &scaled, env, exo, tau_sig)
        })
    })
}

fn aggregate(
    probe: &Probe,
    exo: &str,
    per_sample: &[SampleEvidence],
    cfg: &ClassifierConfig,
) -> PorcEvidence {
    let n = probe.stocks.len();
    let mut dz = vec![0.0f64; n];
    let mut mixed = vec![vec![0.0f64; n]; n];
    let mut verdicts = BTreeSet::new();
    for s in per_sample {
        for i in 0..n {
            dz[i] = dz[i].max(s.dz[i]);
            for j in 0..n {
                mixed[i][j] = mixed[i][j].max(s.mixed[i][j]);
            }
        }
        let (p, d) = s.maxima();
        verdicts.insert(cfg.verdict(p, d));
    }
    verdicts.remove(&ExoVerdict::Inert);
    let agreement = verdicts.len() <= 1 && !verdicts.contains(&ExoVerdict::Undetermined);
    PorcEvidence {
        exo: exo.to_string(),
        d_xdot_dz: probe.stocks.iter().cloned().zip(dz).collect(),
        porc_terms: probe
            .stocks
            .iter()
            .cloned()
            .zip(mixed)
            .map(|(i, row)| (i, probe.stocks.iter().cloned().zip(row).collect()))
            .collect(),
        samples_used: per_sample.len(),
        agreement,
    }
}

/// PorC evidence for `exo` over explicit samples of an expanded model.
pub fn porc(model: &Model, exo: &str, samples: &[Sample]) -> Result<PorcEvidence, ClassifyError> {
    if model.exo(exo).is_none() {
        return Err(ClassifyError::UnknownExo(exo.to_string()));
    }
    if samples.is_empty() {
        return Err(ClassifyError::NoSamples);
    }
    let cfg = ClassifierConfig::default();
    let probe = Probe::new(model);
    let mut per_sample = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let x = probe.vector(&s.state)?;
        let ev = sample_evidence(&probe, &x, &s.exo_env, exo, cfg.tau_sig).ok_or(ClassifyError::SampleRejected { index })?;
        per_sample.push(ev);
    }
    Ok(aggregate(&probe, exo, &per_sample, &cfg))
}

pub fn classify_exogenous(model: &Model) -> Vec<ExoClassification> {
    classify_exogenous_with(model, &ClassifierConfig::default())
}

/// Classifies every exogenous variable in declaration order.
pub fn classify_exogenous_with(model: &Model, cfg: &ClassifierConfig) -> Vec<ExoClassification> {
    let expanded = expand_delays(model);
    let probe = Probe::new(&expanded);
    let baseline = initial_state(&expanded).ok().and_then(|s| probe.vector(&s).ok());
    let env = expanded.exo_env();
    let delay_only = delay_time_only_exos(model);
    let k = cfg.samples.max(1);

    model
        .exogenous
        .iter()
        .map(|exo| {
            let mut per_sample = Vec::new();
            if let Some(base) = &baseline {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                for attempt in 0..3 * k {
                    if per_sample.len() == k {
                        break;
                    }
                    let x: Vec<f64> = if attempt == 0 {
                        base.clone()
                    } else {
                        base.iter().map(|v| v * rng.gen_range(0.5..=2.0)).collect()
                    };
                    if let Some(ev) = sample_evidence(&probe, &x, &env, &exo.name, cfg.tau_sig) {
                        per_sample.push(ev);
                    }
                }
            }
            let evidence = aggregate(&probe, &exo.name, &per_sample, cfg);
            let (verdict, note) = if per_sample.len() < k {
                (ExoVerdict::Undetermined, Some(format!("only {} of {k} samples free of kinks", per_sample.len())))
            } else if delay_only.contains(&exo.name) {
                (ExoVerdict::Parameter, Some("appears only as a delay time".to_string()))
            } else if !evidence.agreement {
                (ExoVerdict::Undetermined, Some("samples disagree".to_string()))
            } else {
                (cfg.verdict(evidence.max_porc(), evidence.max_d_xdot_dz()), None)
            };
            ExoClassification { exo: exo.name.clone(), verdict, evidence, note }
        })
        .collect()
}

/// Exos read by some delay-time argument and by nothing else in the dynamics.
fn delay_time_only_exos(model: &Model) -> BTreeSet<String> {
    let mut in_time = BTreeSet::new();
    let mut elsewhere = BTreeSet::new();
    let mut visit = |e: &Expr| match e.as_delay() {
        Some((_, input, time)) => {
            in_time.extend(free_vars(time));
            elsewhere.extend(free_vars(input));
        }
        None => elsewhere.extend(free_vars(e)),
    };
    for a in &model.auxiliaries {
        visit(&a.definition);
    }
    for s in &model.stocks {
        s.inflow.iter().chain(&s.outflow).for_each(&mut visit);
    }
    in_time.retain(|v| !elsewhere.contains(v) && model.exo(v).is_some());
    in_time
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_model;

    fn model(src: &str) -> Model {
        parse_model(src).unwrap_or_else(|e| panic!("{e:?}"))
    }

    fn verdicts(m: &Model) -> BTreeMap<String, ExoVerdict> {
        classify_exogenous(m).into_iter().map(|c| (c.exo, c.verdict)).collect()
    }

    #[test]
    fn linear_outflow_jacobian() {
        let m = model("model M\nstock S = 10 { outflow: S / tau }\nexo tau = 2\n");
        let j = jacobian(&m, &initial_state(&m).unwrap(), &m.exo_env()).unwrap();
        assert!((j.get("S", "S").unwrap() + 0.5).abs() < 1e-6);
    }

    #[test]
    fn chain_jacobian_is_lower_triangular() {
        let m = model("model M\nstock A = 5 { outflow: A / 2 }\nstock B = 1 { inflow: A / 2, outflow: B / 3 }\n");
        let j = jacobian(&m, &initial_state(&m).unwrap(), &m.exo_env()).unwrap();
        assert!((j.get("A", "A").unwrap() + 0.5).abs() < 1e-6);
        assert_eq!(j.get("A", "B").unwrap(), 0.0);
        assert!((j.get("B", "A").unwrap() - 0.5).abs() < 1e-6);
        assert!((j.get("B", "B").unwrap() + 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn max_slopes_on_each_side() {
        let m = model("model M\nstock S = 1 { inflow: MAX(0, S) }\n");
        let at = |x: f64| {
            let st = StateVector::from([("S".to_string(), x)]);
            jacobian(&m, &st, &m.exo_env()).unwrap().get("S", "S").unwrap()
        };
        assert!((at(1.0) - 1.0).abs() < 1e-9);
        assert_eq!(at(-1.0), 0.0);
    }

    #[test]
    fn first_order_with_additive_input() {
        let m = model("model M\nstock x = 3 { inflow: u, outflow: x / tau }\nexo u = 1\nexo tau = 4\n");
        let v = verdicts(&m);
        assert_eq!(v["u"], ExoVerdict::ControlInput);
        assert_eq!(v["tau"], ExoVerdict::Parameter);

        let samples = [Sample { state: initial_state(&m).unwrap(), exo_env: m.exo_env() }];
        let ev = porc(&m, "tau", &samples).unwrap();
        // ∂²ẋ/∂τ∂x = 1/τ²
        assert!((ev.porc_terms["x"]["x"] - 1.0 / 16.0).abs() < 1e-6);
        let ev = porc(&m, "u", &samples).unwrap();
        assert!(ev.max_porc() <= TAU_ZERO);
        assert!((ev.d_xdot_dz["x"] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unused_exo_is_inert() {
        let m = model("model M\nstock x = 3 { outflow: x / 2 }\nexo spare = 7\n");
        assert_eq!(verdicts(&m)["spare"], ExoVerdict::Inert);
    }

    #[test]
    fn multiplicative_coefficient_is_parameter() {
        let m = model("model M\nstock S = 2 { inflow: A }\naux A = z * S\nexo z = 0.3\n");
        assert_eq!(verdicts(&m)["z"], ExoVerdict::Parameter);
    }

    #[test]
    fn delay_time_is_parameter() {
        let m = model("model M\nstock Q = 5 { inflow: u, outflow: P }\naux P = DELAY1(Q, T)\nexo u = 1\nexo T = 2\n");
        let v = verdicts(&m);
        assert_eq!(v["T"], ExoVerdict::Parameter);
        assert_eq!(v["u"], ExoVerdict::ControlInput);
    }

    #[test]
    fn kinked_baseline_is_resampled() {
        // g - S is exactly zero at the baseline.
        let m = model("model M\nstock S = 4 { inflow: MAX(0, g - S) + 1, outflow: S / 4 }\nexo g = 4\n");
        let c = &classify_exogenous(&m)[0];
        assert_eq!(c.evidence.samples_used, DEFAULT_SAMPLES);
        assert_eq!(c.verdict, ExoVerdict::ControlInput);
    }

    #[test]
    fn deterministic() {
        let m = model("model M\nstock x = 3 { inflow: u * x, outflow: x / tau }\nexo u = 1\nexo tau = 4\n");
        assert_eq!(classify_exogenous(&m), classify_exogenous(&m));
    }

    #[test]
    fn porc_rejects_bad_requests() {
        let m = model("model M\nstock x = 3 { outflow: x / 2 }\nexo a = 1\n");
        assert_eq!(porc(&m, "a", &[]), Err(ClassifyError::NoSamples));
        assert!(matches!(porc(&m, "b", &[]), Err(ClassifyError::UnknownExo(_))));
    }
}
