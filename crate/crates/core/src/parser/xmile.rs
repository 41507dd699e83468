//! Best-effort importer for a small XMILE subset: stocks with named inflows and
//! outflows, flows and auxiliaries (both become auxiliaries), numeric
//! constants (become exogenous variables) and continuous graphical functions
//! (become tables). Everything else is reported as unsupported.

use std::collections::{BTreeMap, BTreeSet};

use roxmltree::{Document, Node};

use super::lexer::lex;
use super::{ExprParser, ParseError, ParseErrorKind, SourceSpan};
use crate::expr::{BinOp, Expr};
use crate::model::{is_identifier, validate, Aux, Exo, Model, OutOfRange, Stock, Table};

/// Child tags that only carry documentation or presentation.
const IGNORED: [&str; 7] = ["units", "doc", "display", "format", "range", "scale", "documentation"];

struct Importer<'a> {
    doc: &'a Document<'a>,
    errors: Vec<ParseError>,
    /// normalized name -> original name, for collision detection
    names: BTreeMap<String, String>,
    spans: BTreeMap<String, SourceSpan>,
}

/// XMILE names become identifiers by turning whitespace runs into `_`.
pub(crate) fn normalize_name(raw: &str) -> String {
    raw.replace("\\n", " ").split_whitespace().collect::<Vec<_>>().join("_")
}

fn element_path(node: Node<'_, '_>) -> String {
    let mut parts: Vec<String> = node
        .ancestors()
        .filter(|n| n.is_element())
        .map(|n| match n.attribute("name") {
            Some(name) => format!("{}[@name='{}']", n.tag_name().name(), name),
            None => n.tag_name().name().to_string(),
        })
        .collect();
    parts.reverse();
    parts.join("/")
}

impl<'a> Importer<'a> {
    fn span(&self, node: Node<'_, '_>) -> SourceSpan {
        let pos = self.doc.text_pos_at(node.range().start);
        SourceSpan::new(pos.row as usize, pos.col as usize, node.tag_name().name().len() + 1)
    }

    fn unsupported(&mut self, node: Node<'_, '_>, feature: &str) {
        self.errors.push(ParseError {
            span: self.span(node),
            expected: "element from the supported XMILE subset".into(),
            found: element_path(node),
            kind: ParseErrorKind::UnsupportedFeature(feature.to_string()),
        });
    }

    fn invalid(&mut self, node: Node<'_, '_>, expected: impl Into<String>) {
        self.errors.push(ParseError {
            span: self.span(node),
            expected: expected.into(),
            found: element_path(node),
            kind: ParseErrorKind::Invalid,
        });
    }

    fn declare(&mut self, node: Node<'_, '_>) -> Option<String> {
        let Some(raw) = node.attribute("name") else {
            self.invalid(node, "`name` attribute");
            return None;
        };
        let name = normalize_name(raw);
        if !is_identifier(&name) {
            self.invalid(node, format!("name convertible to an identifier (got `{name}`)"));
            return None;
        }
        if let Some(prev) = self.names.insert(name.clone(), raw.to_string()) {
            self.invalid(node, format!("unique name after normalization (`{raw}` collides with `{prev}`)"));
            return None;
        }
        self.spans.insert(name.clone(), self.span(node));
        Some(name)
    }

    fn equation(&mut self, owner: Node<'_, '_>, text: &str, call_tables: &BTreeSet<String>) -> Option<Expr> {
        let text = rewrite_quoted(text);
        let tokens = match lex(&text, 1) {
            Ok((t, end)) => (t, end),
            Err(e) => {
                self.invalid(owner, format!("equation: expected {}, found `{}`", e.expected, e.found));
                return None;
            }
        };
        let mut p = ExprParser::new(&tokens.0, tokens.1, true);
        p.call_tables = call_tables.clone();
        match p.expr().and_then(|e| p.finish().map(|_| e)) {
            Ok(e) => Some(e),
            Err(e) => {
                self.invalid(owner, format!("equation: expected {}, found `{}`", e.expected, e.found));
                None
            }
        }
    }

    fn check_children(&mut self, node: Node<'_, '_>, allowed: &[&str]) {
        for child in node.children().filter(|c| c.is_element()) {
            let tag = child.tag_name().name();
            if tag == "dimensions" || tag == "element" {
                self.unsupported(child, "dimensions");
            } else if !allowed.contains(&tag) && !IGNORED.contains(&tag) {
                self.unsupported(child, tag);
            }
        }
    }

    fn graphical_function(&mut self, gf: Node<'_, '_>, name: String) -> Option<Table> {
        let out_of_range = match gf.attribute("type").unwrap_or("continuous") {
            "continuous" => OutOfRange::Clamp,
            "extrapolate" => OutOfRange::Extrapolate,
            "discrete" => {
                self.unsupported(gf, "discrete gf");
                return None;
            }
            other => {
                self.unsupported(gf, &format!("gf type {other}"));
                return None;
            }
        };
        self.check_children(gf, &["xscale", "yscale", "xpts", "ypts"]);
        let pts = |tag: &str| -> Option<Result<Vec<f64>, ()>> {
            let text = gf.children().find(|c| c.has_tag_name(tag))?.text().unwrap_or("");
            Some(
                text.split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|_| ()))
                    .collect(),
            )
        };
        let ys = match pts("ypts") {
            Some(Ok(v)) => v,
            _ => {
                self.invalid(gf, "numeric <ypts>");
                return None;
            }
        };
        let xs = match pts("xpts") {
            Some(Ok(v)) => v,
            Some(Err(())) => {
                self.invalid(gf, "numeric <xpts>");
                return None;
            }
            None => {
                let scale = gf.children().find(|c| c.has_tag_name("xscale"));
                let bound = |attr: &str| scale.and_then(|s| s.attribute(attr)).and_then(|v| v.trim().parse::<f64>().ok());
                match (bound("min"), bound("max")) {
                    (Some(lo), Some(hi)) if ys.len() >= 2 => {
                        let n = ys.len() - 1;
                        (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
                    }
                    _ => {
                        self.invalid(gf, "<xpts> or <xscale min max> with at least 2 <ypts>");
                        return None;
                    }
                }
            }
        };
        if xs.len() != ys.len() {
            self.invalid(gf, "as many <xpts> as <ypts>");
            return None;
        }
        Some(Table { name, points: xs.into_iter().zip(ys).collect(), out_of_range })
    }
}

/// Replaces `"quoted names"` in an equation by their normalized identifiers.
fn rewrite_quoted(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find('"') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        match after.find('"') {
            Some(end) => {
                out.push_str(&normalize_name(&after[..end]));
                rest = &after[end + 1..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn child_text<'a>(node: Node<'a, '_>, tag: &str) -> Option<&'a str> {
    node.children().find(|c| c.has_tag_name(tag)).and_then(|c| c.text())
}

fn sum(names: Vec<String>) -> Option<Expr> {
    names.into_iter().map(Expr::Var).reduce(|acc, e| Expr::bin(BinOp::Add, acc, e))
}

fn constant_value(e: &Expr) -> Option<f64> {
    match e {
        Expr::Number(v) => Some(*v),
        Expr::Neg(inner) => constant_value(inner).map(|v| -v),
        _ => None,
    }
}

/// Imports the supported XMILE subset into a [`Model`].
pub fn import_xmile(xml_text: &str) -> Result<Model, Vec<ParseError>> {
    let doc = match Document::parse(xml_text) {
        Ok(d) => d,
        Err(e) => {
            let pos = e.pos();
            return Err(vec![ParseError::syntax(
                SourceSpan::new(pos.row as usize, pos.col as usize, 1),
                "well-formed XML",
                e.to_string(),
            )]);
        }
    };
    let mut imp = Importer { doc: &doc, errors: Vec::new(), names: BTreeMap::new(), spans: BTreeMap::new() };

    let root = doc.root_element();
    for n in root.descendants().filter(|n| n.is_element()) {
        match n.tag_name().name() {
            "dimensions" => imp.unsupported(n, "dimensions"),
            "macro" => imp.unsupported(n, "macro"),
            "module" => imp.unsupported(n, "module"),
            _ => {}
        }
    }

    let models: Vec<Node> = root.children().filter(|c| c.has_tag_name("model")).collect();
    if models.len() > 1 {
        imp.unsupported(models[1], "multiple models");
    }
    let Some(model_node) = models.first().copied() else {
        imp.invalid(root, "<model> element");
        return Err(imp.errors);
    };

    let raw_name = root
        .children()
        .find(|c| c.has_tag_name("header"))
        .and_then(|h| child_text(h, "name"))
        .or_else(|| model_node.attribute("name"))
        .unwrap_or("xmile_model");
    let mut name = normalize_name(raw_name);
    if !is_identifier(&name) {
        name = "xmile_model".into();
    }
    let mut model = Model::new(name);

    let vars: Vec<Node> = model_node
        .children()
        .find(|c| c.has_tag_name("variables"))
        .map(|v| v.children().filter(|c| c.is_element()).collect())
        .unwrap_or_default();

    // named graphical functions may be called like functions in equations
    let call_tables: BTreeSet<String> = vars
        .iter()
        .filter(|v| v.has_tag_name("gf"))
        .filter_map(|v| v.attribute("name"))
        .map(normalize_name)
        .collect();

    for v in vars {
        match v.tag_name().name() {
            "stock" => {
                imp.check_children(v, &["eqn", "inflow", "outflow", "non_negative"]);
                let Some(name) = imp.declare(v) else { continue };
                let initial = match child_text(v, "eqn") {
                    Some(eqn) => imp.equation(v, eqn, &call_tables),
                    None => {
                        imp.invalid(v, "<eqn> initial value");
                        None
                    }
                };
                let flows = |tag: &str| -> Vec<String> {
                    v.children()
                        .filter(|c| c.has_tag_name(tag))
                        .filter_map(|c| c.text())
                        .map(normalize_name)
                        .collect()
                };
                if let Some(initial) = initial {
                    model.stocks.push(Stock {
                        name,
                        initial,
                        inflow: sum(flows("inflow")),
                        outflow: sum(flows("outflow")),
                        hidden: false,
                    });
                }
            }
            "flow" | "aux" => {
                imp.check_children(v, &["eqn", "gf", "non_negative"]);
                let Some(name) = imp.declare(v) else { continue };
                let Some(eqn) = child_text(v, "eqn") else {
                    imp.invalid(v, "<eqn>");
                    continue;
                };
                let Some(def) = imp.equation(v, eqn, &call_tables) else { continue };
                if let Some(gf) = v.children().find(|c| c.has_tag_name("gf")) {
                    let table_name = format!("{name}_table");
                    if let Some(table) = imp.graphical_function(gf, table_name.clone()) {
                        imp.names.insert(table_name.clone(), table_name.clone());
                        model.tables.push(table);
                        model.auxiliaries.push(Aux { name, definition: Expr::lookup(table_name, def) });
                    }
                } else if let Some(value) = constant_value(&def) {
                    model.exogenous.push(Exo { name, value });
                } else {
                    model.auxiliaries.push(Aux { name, definition: def });
                }
            }
            "gf" => {
                let Some(name) = imp.declare(v) else { continue };
                if let Some(table) = imp.graphical_function(v, name) {
                    model.tables.push(table);
                }
            }
            "dimensions" | "element" => {}
            tag => imp.unsupported(v, tag),
        }
    }

    if !imp.errors.is_empty() {
        return Err(imp.errors);
    }

    let invalid: Vec<ParseError> = validate(&model)
        .into_iter()
        .filter(|d| d.is_error())
        .map(|d| ParseError {
            span: imp.spans.get(&d.variable).copied().unwrap_or(SourceSpan::new(1, 1, 1)),
            expected: d.code.to_string(),
            found: d.variable.clone(),
            kind: ParseErrorKind::Invalid,
        })
        .collect();
    if invalid.is_empty() {
        Ok(model)
    } else {
        Err(invalid)
    }
}
