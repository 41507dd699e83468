//! Native `.sdm` model format, expression grammar, canonical serialization and
//! a best-effort XMILE subset importer.
//!
//! Expression grammar, loosest binding first:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          right associative
//! primary := NUMBER | IDENT | BUILTIN '(' args ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than a leading minus, so `-2^2` is `-(2^2)`.

mod lexer;
mod model_text;
mod serialize;
mod xmile;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::expr::{BinOp, Builtin, Expr};
use lexer::{lex, Tok, Token};

pub use model_text::parse_model;
pub use serialize::{expr_to_string, format_number, serialize_model};
pub use xmile::import_xmile;

const MAX_DEPTH: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceSpan {
    pub line: usize,
    pub column: usize,
    pub length: usize,
}

impl SourceSpan {
    pub fn new(line: usize, column: usize, length: usize) -> SourceSpan {
        SourceSpan { line: line.max(1), column: column.max(1), length: length.max(1) }
    }
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseErrorKind {
    Syntax,
    /// The text parsed but the resulting model violates a model invariant.
    Invalid,
    /// XMILE construct outside the supported subset; carries the tag.
    UnsupportedFeature(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub span: SourceSpan,
    pub expected: String,
    pub found: String,
    pub kind: ParseErrorKind,
}

impl ParseError {
    pub(crate) fn syntax(span: SourceSpan, expected: impl Into<String>, found: impl Into<String>) -> ParseError {
        ParseError { span, expected: expected.into(), found: found.into(), kind: ParseErrorKind::Syntax }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ParseErrorKind::UnsupportedFeature(tag) => {
                write!(f, "{}: unsupported feature `{tag}` at {}", self.span, self.found)
            }
            ParseErrorKind::Invalid => write!(f, "{}: {} ({})", self.span, self.expected, self.found),
            ParseErrorKind::Syntax => write!(f, "{}: expected {}, found `{}`", self.span, self.expected, self.found),
        }
    }
}

impl std::error::Error for ParseError {}

/// Parses a single expression.
pub fn parse_expression(text: &str) -> Result<Expr, ParseError> {
    let (tokens, end) = lex(text, 1)?;
    let mut p = ExprParser::new(&tokens, end, false);
    let e = p.expr()?;
    p.finish()?;
    Ok(e)
}

/// Recursive-descent parser over a token slice.
pub(crate) struct ExprParser<'t> {
    tokens: &'t [Token],
    pos: usize,
    end: SourceSpan,
    depth: usize,
    /// XMILE function names are case-insensitive.
    loose_builtins: bool,
    /// Names that may be called like functions and mean `LOOKUP(name, arg)`.
    pub(crate) call_tables: BTreeSet<String>,
}

impl<'t> ExprParser<'t> {
    pub(crate) fn new(tokens: &'t [Token], end: SourceSpan, loose_builtins: bool) -> Self {
        ExprParser { tokens, pos: 0, end, depth: 0, loose_builtins, call_tables: BTreeSet::new() }
    }

    pub(crate) fn peek(&self) -> Option<&'t Token> {
        self.tokens.get(self.pos)
    }

    pub(crate) fn at(&self, tok: &Tok) -> bool {
        self.peek().is_some_and(|t| &t.tok == tok)
    }

    pub(crate) fn bump(&mut self) -> Option<&'t Token> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    pub(crate) fn error_here(&self, expected: &str) -> ParseError {
        match self.peek() {
            Some(t) => ParseError::syntax(t.span, expected, t.text.clone()),
            None => ParseError::syntax(self.end, expected, "end of input"),
        }
    }

    pub(crate) fn expect(&mut self, tok: Tok) -> Result<&'t Token, ParseError> {
        if self.at(&tok) {
            Ok(self.bump().unwrap())
        } else {
            Err(self.error_here(&format!("`{}`", tok.describe())))
        }
    }

    pub(crate) fn ident(&mut self, what: &str) -> Result<&'t Token, ParseError> {
        match self.peek() {
            Some(t @ Token { tok: Tok::Ident(_), .. }) => {
                self.pos += 1;
                Ok(t)
            }
            _ => Err(self.error_here(what)),
        }
    }

    /// Optionally signed numeric literal, as used by `exo` and `table`.
    pub(crate) fn signed_number(&mut self) -> Result<f64, ParseError> {
        let negative = if self.at(&Tok::Minus) {
            self.bump();
            true
        } else {
            false
        };
        match self.peek() {
            Some(Token { tok: Tok::Number(v), .. }) => {
                self.pos += 1;
                Ok(if negative { -v } else { *v })
            }
            _ => Err(self.error_here("number")),
        }
    }

    pub(crate) fn finish(&self) -> Result<(), ParseError> {
        match self.peek() {
            None => Ok(()),
            Some(_) => Err(self.error_here("end of expression")),
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            Err(self.error_here("shallower nesting"))
        } else {
            Ok(())
        }
    }

    pub(crate) fn expr(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().map(|t| &t.tok) {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().map(|t| &t.tok) {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.at(&Tok::Minus) {
            self.bump();
            self.enter()?;
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::neg(inner));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.at(&Tok::Caret) {
            self.bump();
            self.enter()?;
            let exponent = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::bin(BinOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn builtin(&self, name: &str) -> Option<Builtin> {
        if self.loose_builtins {
            Builtin::from_name(&name.to_ascii_uppercase())
        } else {
            Builtin::from_name(name)
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let Some(tok) = self.peek() else {
            return Err(self.error_here("expression"));
        };
        match &tok.tok {
            Tok::Number(v) => {
                self.bump();
                Ok(Expr::Number(*v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                let called = self.at(&Tok::LParen);
                match (self.builtin(name), called) {
                    (Some(b), true) => self.call(b, tok),
                    (Some(_), false) => Err(self.error_here("`(` after builtin name")),
                    (None, true) if self.call_tables.contains(name) => {
                        self.bump();
                        let arg = self.expr()?;
                        self.expect(Tok::RParen)?;
                        Ok(Expr::lookup(name.clone(), arg))
                    }
                    (None, true) => Err(ParseError::syntax(tok.span, "builtin function name", name.clone())),
                    (None, false) => Ok(Expr::Var(name.clone())),
                }
            }
            _ => Err(self.error_here("expression")),
        }
    }

    fn call(&mut self, b: Builtin, name_tok: &Token) -> Result<Expr, ParseError> {
        self.expect(Tok::LParen)?;
        let mut args = Vec::new();
        if b == Builtin::Lookup {
            let table = self.ident("table name")?;
            args.push(Expr::Var(table.text.clone()));
            self.expect(Tok::Comma)?;
            args.push(self.expr()?);
        } else if !self.at(&Tok::RParen) {
            args.push(self.expr()?);
            while self.at(&Tok::Comma) {
                self.bump();
                args.push(self.expr()?);
            }
        }
        if args.len() != b.arity() {
            if self.at(&Tok::Comma) || args.len() < b.arity() {
                let expected = format!("{} argument(s) for {}", b.arity(), b.name());
                return Err(match self.peek() {
                    Some(t) if t.tok != Tok::RParen => self.error_here(&expected),
                    _ => ParseError::syntax(name_tok.span, expected, format!("{} argument(s)", args.len())),
                });
            }
            return Err(ParseError::syntax(
                name_tok.span,
                format!("{} argument(s) for {}", b.arity(), b.name()),
                format!("{} argument(s)", args.len()),
            ));
        }
        self.expect(Tok::RParen)?;
        Ok(Expr::Call(b, args))
    }
}
