//! End-to-end workflow and report rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{classify_exogenous_with, ClassifierConfig, ExoClassification, ExoVerdict};
use crate::controllability::{per_input_analysis, theorem1_verdict, Conclusion, ControlVerdict, DashedMode, InputAnalysis, InputOutcome, Route};
use crate::graph::{build_graph_with, find_loops, mark_nonspanning, to_dot, ControlGraph, EdgeStyle, GraphOptions, LoopFinding, NodeKind};
use crate::model::{validate, Diagnostic, Model};
use crate::parser::{import_xmile, parse_model, ParseError};
use crate::simulator::{expand_delays_with_record, simulate, DelayExpansion, SimConfig};

pub const SCHEMA_VERSION: u32 = 1;
/// Steps of the baseline finiteness run.
const BASELINE_STEPS: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputFormat {
    Sdm,
    Xmile,
}

impl InputFormat {
    /// `.xmile`, `.stmx` and `.xml` read as XMILE; everything else as `.sdm`.
    pub fn from_path(path: &Path) -> InputFormat {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("xmile" | "stmx" | "xml") => InputFormat::Xmile,
            _ => InputFormat::Sdm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DashedSelection {
    Both,
    Solid,
    Absent,
}

impl DashedSelection {
    pub fn modes(self) -> Vec<DashedMode> {
        match self {
            DashedSelection::Both => vec![DashedMode::Solid, DashedMode::Absent],
            DashedSelection::Solid => vec![DashedMode::Solid],
            DashedSelection::Absent => vec![DashedMode::Absent],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Text,
    Json,
}

/// Analysis knobs independent of where the model comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub dashed: DashedSelection,
    pub dt: f64,
    pub samples: usize,
    pub seed: u64,
    pub expand_delays: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        AnalysisOptions { dashed: DashedSelection::Both, dt: 0.25, samples: c.samples, seed: c.seed, expand_delays: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub input_path: PathBuf,
    /// Inferred from the extension when absent.
    pub format: Option<InputFormat>,
    pub options: AnalysisOptions,
    pub dot_path: Option<PathBuf>,
    pub report_format: ReportFormat,
}

impl RunConfig {
    pub fn new(input_path: impl Into<PathBuf>) -> Self {
        RunConfig {
            input_path: input_path.into(),
            format: None,
            options: AnalysisOptions::default(),
            dot_path: None,
            report_format: ReportFormat::Text,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScaError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{} parse error(s)", .0.len())]
    Parse(Vec<ParseError>),
    #[error("{} validation error(s)", .0.len())]
    Invalid(Vec<Diagnostic>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("analysis failed: {0}")]
    Analysis(String),
}

impl ScaError {
    /// 1 for unreadable or invalid input, 2 for failures past parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScaError::Read { .. } | ScaError::Parse(_) | ScaError::Invalid(_) | ScaError::Config(_) => 1,
            ScaError::Analysis(_) => 2,
        }
    }

    /// One line per underlying problem.
    pub fn details(&self) -> Vec<String> {
        match self {
            ScaError::Parse(errs) => errs.iter().map(|e| e.to_string()).collect(),
            ScaError::Invalid(diags) => diags.iter().map(|d| d.to_string()).collect(),
            other => vec![other.to_string()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub samples: usize,
    pub dt: f64,
    pub expand_delays: bool,
    pub modes: Vec<DashedMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub name: String,
    pub kind: NodeKind,
    pub hidden: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub node_count: usize,
    pub stock_count: usize,
    pub aux_count: usize,
    pub input_count: usize,
    pub hidden_count: usize,
    pub edge_count: usize,
    pub dashed_count: usize,
    pub nodes: Vec<NodeSummary>,
    pub dashed_edges: Vec<(String, String)>,
    pub delay_expansions: Vec<DelayExpansion>,
}

impl GraphSummary {
    fn new(g: &ControlGraph, delay_expansions: Vec<DelayExpansion>) -> Self {
        GraphSummary {
            node_count: g.nodes.len(),
            stock_count: g.count(NodeKind::Stock),
            aux_count: g.count(NodeKind::Aux),
            input_count: g.count(NodeKind::Input),
            hidden_count: g.nodes.iter().filter(|n| n.hidden).count(),
            edge_count: g.edges.len(),
            dashed_count: g.dashed_count(),
            nodes: g.nodes.iter().map(|n| NodeSummary { name: n.name.clone(), kind: n.kind, hidden: n.hidden }).collect(),
            dashed_edges: g
                .edges
                .iter()
                .filter(|e| e.style == EdgeStyle::NonSpanning)
                .map(|e| (e.from.clone(), e.to.clone()))
                .collect(),
            delay_expansions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub dt: f64,
    pub horizon: f64,
    pub finite: bool,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step5 {
    pub verdicts: Vec<ControlVerdict>,
    pub loops: Vec<LoopFinding>,
    pub notes: Vec<String>,
    pub assumptions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaReport {
    pub sca_schema: u32,
    pub model_name: String,
    pub settings: Settings,
    pub warnings: Vec<String>,
    pub baseline_run: BaselineRun,
    pub step1: Vec<ExoClassification>,
    pub step2_3: GraphSummary,
    pub step4: Vec<InputAnalysis>,
    pub step5: Step5,
}

impl ScaReport {
    pub fn verdict(&self, mode: DashedMode) -> Option<&ControlVerdict> {
        self.step5.verdicts.iter().find(|v| v.mode == mode)
    }

    pub fn input(&self, name: &str, mode: DashedMode) -> Option<&InputAnalysis> {
        self.step4.iter().find(|a| a.input == name && a.mode == mode)
    }

    pub fn classification(&self, exo: &str) -> Option<&ExoClassification> {
        self.step1.iter().find(|c| c.exo == exo)
    }
}

/// Reads, parses, analyses, and writes the DOT file when asked.
pub fn run_sca(cfg: &RunConfig) -> Result<ScaReport, ScaError> {
    let text = std::fs::read_to_string(&cfg.input_path)
        .map_err(|source| ScaError::Read { path: cfg.input_path.clone(), source })?;
    let format = cfg.format.unwrap_or_else(|| InputFormat::from_path(&cfg.input_path));
    let model = match format {
        InputFormat::Sdm => parse_model(&text),
        InputFormat::Xmile => import_xmile(&text),
    }
    .map_err(ScaError::Parse)?;
    let (report, graph) = analyze_with_graph(&model, &cfg.options)?;
    if let Some(path) = &cfg.dot_path {
        std::fs::write(path, to_dot(&graph))
            .map_err(|e| ScaError::Analysis(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(report)
}

pub fn analyze_model(model: &Model, opts: &AnalysisOptions) -> Result<ScaReport, ScaError> {
    analyze_with_graph(model, opts).map(|(r, _)| r)
}

/// Runs steps 1–5 on a parsed model; also returns the analysed graph.
pub fn analyze_with_graph(model: &Model, opts: &AnalysisOptions) -> Result<(ScaReport, ControlGraph), ScaError> {
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(ScaError::Config(format!("dt must be positive, got {}", opts.dt)));
    }
    if opts.samples == 0 {
        return Err(ScaError::Config("samples must be at least 1".into()));
    }
    let diagnostics = validate(model);
    let errors: Vec<Diagnostic> = diagnostics.iter().filter(|d| d.is_error()).cloned().collect();
    if !errors.is_empty() {
        return Err(ScaError::Invalid(errors));
    }
    let mut warnings: Vec<String> = diagnostics.iter().map(|d| d.to_string()).collect();

    let horizon = opts.dt * BASELINE_STEPS;
    let baseline_run = match simulate(model, &SimConfig::new(opts.dt, horizon)) {
        Ok(_) => BaselineRun { dt: opts.dt, horizon, finite: true, message: None },
        Err(e) => BaselineRun { dt: opts.dt, horizon, finite: false, message: Some(e.to_string()) },
    };

    let ccfg = ClassifierConfig { samples: opts.samples, seed: opts.seed, ..ClassifierConfig::default() };
    let mut step1 = classify_exogenous_with(model, &ccfg);
    step1.sort_by(|a, b| a.exo.cmp(&b.exo));
    for c in step1.iter().filter(|c| c.verdict == ExoVerdict::Undetermined) {
        warnings.push(format!("{}: undetermined role, kept as a control input", c.exo));
    }

    let graph = build_graph_with(model, &step1, GraphOptions { expand_delays: opts.expand_delays });
    let graph = mark_nonspanning(model, &graph);
    let expansions = if opts.expand_delays { expand_delays_with_record(model).1 } else { Vec::new() };
    let step2_3 = GraphSummary::new(&graph, expansions);

    let modes = opts.dashed.modes();
    let step4: Vec<InputAnalysis> = modes.iter().flat_map(|&m| per_input_analysis(&graph, m)).collect();
    let verdicts: Vec<ControlVerdict> = modes.iter().map(|&m| theorem1_verdict(&graph, m)).collect();

    let mut notes = Vec::new();
    if model.exogenous.is_empty() {
        notes.push("no control inputs: model is fully endogenous".to_string());
    } else if graph.count(NodeKind::Input) == 0 {
        notes.push("no control inputs: every exogenous variable is a parameter or inert".to_string());
    }
    let loops = match find_loops(&graph, model) {
        Ok(mut l) => {
            l.sort_by(|a, b| a.cycle.cmp(&b.cycle));
            l
        }
        Err(e) => {
            notes.push(format!("loop enumeration skipped: {e}"));
            Vec::new()
        }
    };

    let mut assumptions = vec![
        "an edge is dashed only if every occurrence of its source sits under MIN, MAX, EXP, ABS, a clamped LOOKUP or a constant even power".to_string(),
        "an aggregated edge is dashed only if every path it stands for contains a dashed edge".to_string(),
        "spanningness is judged structurally: a node is spanning if an all-solid path from an input reaches it".to_string(),
        "re-kinding auxiliaries as stocks is a sufficient test only; failure gives no conclusion".to_string(),
        format!(
            "exogenous roles from {} sample state(s), seed {}, thresholds {:e} / {:e}",
            ccfg.samples, ccfg.seed, ccfg.tau_zero, ccfg.tau_sig
        ),
    ];
    if !opts.expand_delays {
        assumptions.push("delay expansion disabled: delay state is ignored and the verdicts may be wrong".to_string());
    }

    let report = ScaReport {
        sca_schema: SCHEMA_VERSION,
        model_name: model.name.clone(),
        settings: Settings {
            seed: opts.seed,
            samples: opts.samples,
            dt: opts.dt,
            expand_delays: opts.expand_delays,
            modes,
        },
        warnings,
        baseline_run,
        step1,
        step2_3,
        step4,
        step5: Step5 { verdicts, loops, notes, assumptions },
    };
    Ok((report, graph))
}

fn mode_label(m: DashedMode) -> &'static str {
    match m {
        DashedMode::Solid => "dashed as solid",
        DashedMode::Absent => "dashed removed",
    }
}

fn list(items: impl IntoIterator<Item = impl AsRef<str>>) -> String {
    let v: Vec<String> = items.into_iter().map(|s| s.as_ref().to_string()).collect();
    if v.is_empty() {
        "-".to_string()
    } else {
        v.join(", ")
    }
}

fn route_label(r: Route) -> &'static str {
    match r {
        Route::Direct => "stock graph",
        Route::Stockified => "auxiliaries as stocks",
        Route::Aggregated => "aggregated stock graph",
    }
}

/// Fixed-layout plain-text report.
pub fn render_text(r: &ScaReport) -> String {
    let mut o = String::new();
    let s = &r.settings;
    let _ = writeln!(o, "Structural control analysis: {}", r.model_name);
    let _ = writeln!(
        o,
        "seed {}, samples {}, dt {}, delay expansion {}",
        s.seed,
        s.samples,
        s.dt,
        if s.expand_delays { "on" } else { "off" }
    );
    let run = &r.baseline_run;
    let _ = writeln!(
        o,
        "baseline run to t = {}: {}",
        run.horizon,
        if run.finite { "finite".to_string() } else { format!("failed ({})", run.message.as_deref().unwrap_or("")) }
    );
    for w in &r.warnings {
        let _ = writeln!(o, "warning: {w}");
    }

    o.push_str("\nStep 1. Exogenous roles\n");
    if r.step1.is_empty() {
        o.push_str("  (no exogenous variables)\n");
    }
    for c in &r.step1 {
        let e = &c.evidence;
        let _ = write!(
            o,
            "  {:<16} {:<13} max|dx/dz| {:<10.4e} max PorC {:<10.4e} samples {}",
            c.exo,
            format!("{:?}", c.verdict),
            e.max_d_xdot_dz(),
            e.max_porc(),
            e.samples_used
        );
        if let Some(n) = &c.note {
            let _ = write!(o, "  ({n})");
        }
        o.push('\n');
    }

    let g = &r.step2_3;
    o.push_str("\nStep 2. Control graph\n");
    let _ = writeln!(
        o,
        "  nodes {} ({} stocks, {} auxiliaries, {} inputs), edges {} ({} dashed)",
        g.node_count, g.stock_count, g.aux_count, g.input_count, g.edge_count, g.dashed_count
    );
    let _ = writeln!(o, "  stocks: {}", list(g.nodes.iter().filter(|n| n.kind == NodeKind::Stock).map(|n| &n.name)));
    let _ = writeln!(o, "  auxiliaries: {}", list(g.nodes.iter().filter(|n| n.kind == NodeKind::Aux).map(|n| &n.name)));
    let _ = writeln!(o, "  inputs: {}", list(g.nodes.iter().filter(|n| n.kind == NodeKind::Input).map(|n| &n.name)));
    let _ = writeln!(o, "  dashed: {}", list(g.dashed_edges.iter().map(|(a, b)| format!("{a} -> {b}"))));

    o.push_str("\nStep 3. Delays\n");
    if !s.expand_delays {
        o.push_str("  expansion disabled\n");
    } else if g.delay_expansions.is_empty() {
        o.push_str("  none\n");
    }
    for d in &g.delay_expansions {
        let _ = writeln!(o, "  {} = {}: hidden stocks {}", d.aux, d.builtin, list(&d.hidden_stocks));
    }

    o.push_str("\nStep 4. Per-input control\n");
    if r.step4.is_empty() {
        o.push_str("  (no control inputs)\n");
    }
    for a in &r.step4 {
        let outcome = match a.outcome {
            InputOutcome::Full => "controls every stock",
            InputOutcome::Partial => "controls some stocks",
            InputOutcome::Uncontrollable => "uncontrollable",
            InputOutcome::NotConcluded => "not concluded",
        };
        let _ = writeln!(
            o,
            "  [{}] {}: {}, {} stock(s), via {}; reaches {}",
            mode_label(a.mode),
            a.input,
            outcome,
            a.controllable_stock_count,
            route_label(a.route),
            list(&a.reachable)
        );
    }

    o.push_str("\nStep 5. Structural controllability\n");
    for v in &r.step5.verdicts {
        let c = match v.conclusion {
            Conclusion::Controllable => "structurally controllable",
            Conclusion::Uncontrollable => "structurally uncontrollable",
            Conclusion::NoConclusion => "no conclusion",
        };
        let _ = writeln!(o, "  [{}] {} (via {})", mode_label(v.mode), c, route_label(v.route));
        let _ = writeln!(o, "    non-accessible: {}", list(&v.non_accessible));
        let _ = writeln!(o, "    non-spanning: {}", list(&v.non_spanning));
        if let Some(w) = &v.dilation_witness {
            let _ = writeln!(o, "    dilation: {{{}}}", list(w));
        }
        for n in &v.notes {
            let _ = writeln!(o, "    note: {n}");
        }
    }
    for n in &r.step5.notes {
        let _ = writeln!(o, "  note: {n}");
    }
    let _ = writeln!(o, "  loops: {}", r.step5.loops.len());
    for l in &r.step5.loops {
        let mut flags = Vec::new();
        if l.contains_delay {
            flags.push("delay");
        }
        if l.contains_nonspanning {
            flags.push("dashed");
        }
        let tail = if flags.is_empty() { String::new() } else { format!(" [{}]", flags.join(", ")) };
        let _ = writeln!(o, "    {:?}: {}{}", l.polarity, l.cycle.join(" -> "), tail);
    }
    o.push_str("  assumptions:\n");
    for a in &r.step5.assumptions {
        let _ = writeln!(o, "    - {a}");
    }
    o
}

pub fn render_json(r: &ScaReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_json(text: &str) -> Result<ScaReport, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(src: &str) -> ScaReport {
        analyze_model(&parse_model(src).unwrap(), &AnalysisOptions::default()).unwrap()
    }

    #[test]
    fn endogenous_model_has_all_sections() {
        let r = report("model M\nstock S = 1 { outflow: S / 2 }\n");
        assert!(r.step1.is_empty() && r.step4.is_empty());
        assert!(r.step5.notes.iter().any(|n| n == "no control inputs: model is fully endogenous"));
        let text = render_text(&r);
        for h in ["Step 1.", "Step 2.", "Step 3.", "Step 4.", "Step 5."] {
            assert!(text.contains(h), "{h}");
        }
    }

    #[test]
    fn json_round_trips_and_carries_schema() {
        let r = report(include_str!("../fixtures/stock_management.sdm"));
        let json = render_json(&r);
        assert!(json.contains("\"sca_schema\": 1"));
        assert_eq!(parse_json(&json).unwrap(), r);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["step2_3"]["dashed_count"], 2);
        assert_eq!(v["step2_3"]["dashed_edges"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn undetermined_rendered_with_evidence() {
        let mut r = report("model M\nstock x = 1 { inflow: u, outflow: x / 2 }\nexo u = 1\n");
        r.step1[0].verdict = ExoVerdict::Undetermined;
        let line = render_text(&r).lines().find(|l| l.contains("Undetermined")).unwrap().to_string();
        assert!(line.contains("max|dx/dz| 1.0000e0"), "{line}");
    }

    #[test]
    fn bad_options_rejected() {
        let m = parse_model("model M\nstock S = 1 { outflow: S / 2 }\n").unwrap();
        let opts = AnalysisOptions { dt: 0.0, ..AnalysisOptions::default() };
        assert_eq!(analyze_model(&m, &opts).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn reachable_sets_name_graph_nodes() {
        let r = report(include_str!("../fixtures/stock_management.sdm"));
        let census: Vec<&str> = r.step2_3.nodes.iter().map(|n| n.name.as_str()).collect();
        assert!(r.step4.iter().flat_map(|a| &a.reachable).all(|n| census.contains(&n.as_str())));
    }

    #[test]
    fn extension_picks_format() {
        assert_eq!(InputFormat::from_path(Path::new("a.XMILE")), InputFormat::Xmile);
        assert_eq!(InputFormat::from_path(Path::new("a.sdm")), InputFormat::Sdm);
    }
}
