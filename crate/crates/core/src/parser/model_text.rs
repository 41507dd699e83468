//! Statement-oriented `.sdm` reader. Each non-blank line holds one statement;
//! a bad statement is reported and parsing continues on the next line.

use std::collections::BTreeMap;

use super::lexer::{lex, Tok, Token};
use super::{ExprParser, ParseError, ParseErrorKind, SourceSpan};
use crate::expr::Builtin;
use crate::model::{validate, Aux, Exo, Model, OutOfRange, Stock, Table};

enum Statement {
    Model(String),
    Stock(Stock),
    Aux(Aux),
    Exo(Exo),
    Table(Table),
}

/// Parses native model text. On success the model has passed [`validate`]
/// without errors (warnings are left for the caller to query).
pub fn parse_model(text: &str) -> Result<Model, Vec<ParseError>> {
    let mut errors = Vec::new();
    let mut model_name: Option<(String, SourceSpan)> = None;
    let mut model = Model::new("");
    let mut decl_spans: BTreeMap<String, SourceSpan> = BTreeMap::new();
    let mut reported_order = false;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let (tokens, end) = match lex(line, line_no) {
            Ok(t) => t,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        if tokens.is_empty() {
            continue;
        }
        match statement(&tokens, end) {
            Ok((Statement::Model(name), span)) => {
                if model_name.is_some() {
                    errors.push(ParseError::syntax(span, "a single `model` statement", "second `model`"));
                } else {
                    model_name = Some((name, span));
                }
            }
            Ok((stmt, span)) => {
                if model_name.is_none() && !reported_order {
                    reported_order = true;
                    errors.push(ParseError::syntax(tokens[0].span, "`model` statement first", tokens[0].text.clone()));
                }
                let name = match &stmt {
                    Statement::Stock(s) => s.name.clone(),
                    Statement::Aux(a) => a.name.clone(),
                    Statement::Exo(e) => e.name.clone(),
                    Statement::Table(t) => t.name.clone(),
                    Statement::Model(_) => unreachable!(),
                };
                decl_spans.entry(name).or_insert(span);
                match stmt {
                    Statement::Stock(s) => model.stocks.push(s),
                    Statement::Aux(a) => model.auxiliaries.push(a),
                    Statement::Exo(e) => model.exogenous.push(e),
                    Statement::Table(t) => model.tables.push(t),
                    Statement::Model(_) => unreachable!(),
                }
            }
            Err(e) => errors.push(e),
        }
    }

    match model_name {
        Some((name, _)) => model.name = name,
        None => {
            if !reported_order {
                errors.push(ParseError::syntax(SourceSpan::new(1, 1, 1), "`model <name>` statement", "none"));
            }
        }
    }

    if !errors.is_empty() {
        return Err(errors);
    }

    let invalid: Vec<ParseError> = validate(&model)
        .into_iter()
        .filter(|d| d.is_error())
        .map(|d| ParseError {
            span: decl_spans.get(&d.variable).copied().unwrap_or(SourceSpan::new(1, 1, 1)),
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

fn declared_name(p: &mut ExprParser<'_>) -> Result<(String, SourceSpan), ParseError> {
    let tok = p.ident("identifier")?;
    if Builtin::from_name(&tok.text).is_some() {
        return Err(ParseError::syntax(tok.span, "identifier that is not a builtin name", tok.text.clone()));
    }
    Ok((tok.text.clone(), tok.span))
}

fn statement(tokens: &[Token], end: SourceSpan) -> Result<(Statement, SourceSpan), ParseError> {
    let mut p = ExprParser::new(tokens, end, false);
    let keyword = p.ident("statement keyword (model, stock, aux, exo, table)")?;
    let stmt = match keyword.text.as_str() {
        "model" => {
            let (name, span) = declared_name(&mut p)?;
            (Statement::Model(name), span)
        }
        "stock" => {
            let (name, span) = declared_name(&mut p)?;
            p.expect(Tok::Eq)?;
            let initial = p.expr()?;
            p.expect(Tok::LBrace)?;
            let mut stock = Stock { name, initial, inflow: None, outflow: None, hidden: false };
            while !p.at(&Tok::RBrace) {
                let key = p.ident("`inflow`, `outflow` or `hidden`")?;
                match key.text.as_str() {
                    "inflow" | "outflow" => {
                        p.expect(Tok::Colon)?;
                        let e = p.expr()?;
                        let slot = if key.text == "inflow" { &mut stock.inflow } else { &mut stock.outflow };
                        if slot.is_some() {
                            return Err(ParseError::syntax(key.span, "each flow at most once", key.text.clone()));
                        }
                        *slot = Some(e);
                    }
                    "hidden" => stock.hidden = true,
                    _ => {
                        return Err(ParseError::syntax(key.span, "`inflow`, `outflow` or `hidden`", key.text.clone()))
                    }
                }
                if p.at(&Tok::Comma) {
                    p.bump();
                } else if !p.at(&Tok::RBrace) {
                    return Err(p.error_here("`,` or `}`"));
                }
            }
            p.expect(Tok::RBrace)?;
            (Statement::Stock(stock), span)
        }
        "aux" => {
            let (name, span) = declared_name(&mut p)?;
            p.expect(Tok::Eq)?;
            let definition = p.expr()?;
            (Statement::Aux(Aux { name, definition }), span)
        }
        "exo" => {
            let (name, span) = declared_name(&mut p)?;
            p.expect(Tok::Eq)?;
            let value = p.signed_number()?;
            (Statement::Exo(Exo { name, value }), span)
        }
        "table" => {
            let (name, span) = declared_name(&mut p)?;
            p.expect(Tok::Colon)?;
            let mut points = Vec::new();
            while p.at(&Tok::LParen) {
                p.bump();
                let x = p.signed_number()?;
                p.expect(Tok::Comma)?;
                let y = p.signed_number()?;
                p.expect(Tok::RParen)?;
                points.push((x, y));
            }
            let policy = p.ident("`(x, y)` point or `clamp`/`extrapolate`")?;
            let out_of_range = match policy.text.as_str() {
                "clamp" => OutOfRange::Clamp,
                "extrapolate" => OutOfRange::Extrapolate,
                _ => return Err(ParseError::syntax(policy.span, "`clamp` or `extrapolate`", policy.text.clone())),
            };
            (Statement::Table(Table { name, points, out_of_range }), span)
        }
        other => {
            return Err(ParseError::syntax(
                keyword.span,
                "statement keyword (model, stock, aux, exo, table)",
                other.to_string(),
            ))
        }
    };
    if p.peek().is_some() {
        return Err(p.error_here("end of statement"));
    }
    Ok(stmt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_without_flows_is_rejected() {
        let errs = parse_model("model M\nstock S = 1 {}\n").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].kind, ParseErrorKind::Invalid);
        assert_eq!(errs[0].span, SourceSpan::new(2, 7, 1));
    }

    #[test]
    fn dangling_operator_reports_eof() {
        let errs = parse_model("model M\naux A = 1 + ").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].expected, "expression");
        assert_eq!(errs[0].found, "end of input");
        assert_eq!(errs[0].span.line, 2);
    }

    #[test]
    fn errors_are_collected_per_statement() {
        let text = "model M\naux A = (\nexo = 3\nexo b = 2\ntable t : (0, 1) (1, 2) wrap\n";
        let errs = parse_model(text).unwrap_err();
        let lines: Vec<usize> = errs.iter().map(|e| e.span.line).collect();
        assert_eq!(lines, vec![2, 3, 5]);
    }

    #[test]
    fn reserved_names_rejected() {
        let errs = parse_model("model M\nexo MAX = 1\n").unwrap_err();
        assert_eq!(errs[0].found, "MAX");
    }

    #[test]
    fn hidden_flag_and_signed_values() {
        let m = parse_model(
            "model M\nstock D = 2 { inflow: q, outflow: D / 2, hidden }\nexo q = -1.5\ntable t : (-1, -2) (3, 4e2) extrapolate\n",
        )
        .unwrap();
        assert!(m.stocks[0].hidden);
        assert_eq!(m.exogenous[0].value, -1.5);
        assert_eq!(m.tables[0].points, vec![(-1.0, -2.0), (3.0, 400.0)]);
    }

    #[test]
    fn missing_model_statement() {
        assert!(parse_model("").is_err());
        assert!(parse_model("exo a = 1").is_err());
        assert!(parse_model("model A\nmodel B").is_err());
    }
}
