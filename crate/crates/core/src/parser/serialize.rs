use std::fmt::Write;

use crate::expr::{BinOp, Expr};
use crate::model::Model;

/// Shortest decimal that parses back to the same `f64`.
pub fn format_number(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Binary(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Binary(BinOp::Pow, ..) => 4,
        Expr::Number(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 0,
        Expr::Number(_) | Expr::Var(_) | Expr::Call(..) => 5,
    }
}

/// Renders an expression with the minimum parentheses the grammar needs.
pub fn expr_to_string(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(e, &mut out);
    out
}

fn write_child(child: &Expr, paren: bool, out: &mut String) {
    if paren {
        out.push('(');
        write_expr(child, out);
        out.push(')');
    } else {
        write_expr(child, out);
    }
}

fn write_expr(e: &Expr, out: &mut String) {
    match e {
        Expr::Number(v) => out.push_str(&format_number(*v)),
        Expr::Var(v) => out.push_str(v),
        Expr::Neg(inner) => {
            out.push('-');
            write_child(inner, precedence(inner) < 3, out);
        }
        Expr::Binary(BinOp::Pow, base, exp) => {
            write_child(base, precedence(base) < 5, out);
            out.push('^');
            write_child(exp, precedence(exp) < 3, out);
        }
        Expr::Binary(op, l, r) => {
            let p = precedence(e);
            write_child(l, precedence(l) < p, out);
            let _ = write!(out, " {} ", op.symbol());
            write_child(r, precedence(r) <= p, out);
        }
        Expr::Call(b, args) => {
            out.push_str(b.name());
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(a, out);
            }
            out.push(')');
        }
    }
}

/// Canonical `.sdm` text. Declarations keep their order within each kind.
pub fn serialize_model(model: &Model) -> String {
    let mut out = String::new();
    out.push_str("# generated by sca\n");
    let _ = writeln!(out, "model {}", model.name);
    for s in &model.stocks {
        let mut parts = Vec::new();
        if let Some(i) = &s.inflow {
            parts.push(format!("inflow: {}", expr_to_string(i)));
        }
        if let Some(o) = &s.outflow {
            parts.push(format!("outflow: {}", expr_to_string(o)));
        }
        if s.hidden {
            parts.push("hidden".to_string());
        }
        let body = if parts.is_empty() { "{}".to_string() } else { format!("{{ {} }}", parts.join(", ")) };
        let _ = writeln!(out, "stock {} = {} {}", s.name, expr_to_string(&s.initial), body);
    }
    for a in &model.auxiliaries {
        let _ = writeln!(out, "aux {} = {}", a.name, expr_to_string(&a.definition));
    }
    for e in &model.exogenous {
        let _ = writeln!(out, "exo {} = {}", e.name, format_number(e.value));
    }
    for t in &model.tables {
        let pts: Vec<String> =
            t.points.iter().map(|(x, y)| format!("({}, {})", format_number(*x), format_number(*y))).collect();
        let _ = writeln!(out, "table {} : {} {}", t.name, pts.join(" "), t.out_of_range.keyword());
    }
    out
}
