use super::{ParseError, SourceSpan};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Tok {
    Ident(String),
    Number(f64),
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Eq,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => s.clone(),
            Tok::Number(v) => format!("{v}"),
            Tok::LParen => "(".into(),
            Tok::RParen => ")".into(),
            Tok::LBrace => "{".into(),
            Tok::RBrace => "}".into(),
            Tok::Comma => ",".into(),
            Tok::Colon => ":".into(),
            Tok::Eq => "=".into(),
            Tok::Plus => "+".into(),
            Tok::Minus => "-".into(),
            Tok::Star => "*".into(),
            Tok::Slash => "/".into(),
            Tok::Caret => "^".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Token {
    pub tok: Tok,
    pub span: SourceSpan,
    pub text: String,
}

/// Tokenizes `src`, whose first character sits at (`line`, 1). A `#` starts a
/// comment running to the end of its line. Returns the tokens and the span
/// just past the last character (used for end-of-input errors).
pub(crate) fn lex(src: &str, line: usize) -> Result<(Vec<Token>, SourceSpan), ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line = line;
    let mut col = 1;
    let mut in_comment = false;

    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            in_comment = false;
            continue;
        }
        if in_comment || c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            in_comment = true;
            i += 1;
            col += 1;
            continue;
        }
        let start_col = col;
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            ',' => Some(Tok::Comma),
            ':' => Some(Tok::Colon),
            '=' => Some(Tok::Eq),
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token { tok, span: SourceSpan::new(line, start_col, 1), text: c.to_string() });
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let len = i - start;
            col += len;
            out.push(Token { tok: Tok::Ident(text.clone()), span: SourceSpan::new(line, start_col, len), text });
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let len = i - start;
            col += len;
            let span = SourceSpan::new(line, start_col, len);
            let value: f64 = text
                .parse()
                .map_err(|_| ParseError::syntax(span, "number", &text))?;
            if !value.is_finite() {
                return Err(ParseError::syntax(span, "finite number", &text));
            }
            out.push(Token { tok: Tok::Number(value), span, text });
            continue;
        }
        return Err(ParseError::syntax(SourceSpan::new(line, start_col, 1), "token", c.to_string()));
    }
    Ok((out, SourceSpan::new(line, col, 1)))
}
