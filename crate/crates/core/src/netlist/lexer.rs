use super::ast::{Literal, Span};
use super::ParseError;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Tok {
    Ident(String),
    Number(Literal),
    Sym(&'static str),
    Str,
    Directive(String),
    Eof,
}

#[derive(Clone, Debug)]
pub(crate) struct Token {
    pub tok: Tok,
    pub span: Span,
}

const SYMBOLS: [&str; 40] = [
    "===", "!==", "<<<", ">>>", "<=", ">=", "==", "!=", "&&", "||", "<<", ">>", "~&", "~|", "~^", "^~", "**", "(*", "*)",
    "(", ")", "[", "]", "{", "}", ";", ",", ":", ".", "=", "@", "#", "?", "~", "&", "|", "^", "+", "-", "!",
];
const SINGLE_EXTRA: [&str; 5] = ["*", "/", "%", "<", ">"];

pub(crate) fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line, mut line_start) = (0usize, 1usize, 0usize);
    while i < b.len() {
        let c = b[i];
        let span = Span { line, col: i - line_start + 1 };
        if c == b'\n' {
            i += 1;
            line += 1;
            line_start = i;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if src[i..].starts_with("//") {
            i = src[i..].find('\n').map_or(b.len(), |p| i + p);
            continue;
        }
        if src[i..].starts_with("/*") {
            let Some(end) = src[i + 2..].find("*/") else {
                return Err(ParseError::syntax(span, "unterminated block comment"));
            };
            for (k, &ch) in b[i..i + 2 + end + 2].iter().enumerate() {
                if ch == b'\n' {
                    line += 1;
                    line_start = i + k + 1;
                }
            }
            i += 2 + end + 2;
            continue;
        }
        if c == b'`' {
            let start = i + 1;
            i = start;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            let name = src[start..i].to_string();
            if name == "timescale" {
                // Simulation-only; drop the rest of the line.
                i = src[i..].find('\n').map_or(b.len(), |p| i + p);
                continue;
            }
            out.push(Token { tok: Tok::Directive(name), span });
            continue;
        }
        if c == b'"' {
            let Some(end) = src[i + 1..].find('"') else {
                return Err(ParseError::syntax(span, "unterminated string literal"));
            };
            i += end + 2;
            out.push(Token { tok: Tok::Str, span });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' || c == b'$' || c == b'\\' {
            let start = i;
            if c == b'\\' {
                return Err(ParseError::unsupported(span, "escaped identifier"));
            }
            i += 1;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'$') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(src[start..i].to_string()), span });
            continue;
        }
        if c.is_ascii_digit() || c == b'\'' {
            let (lit, next) = lex_number(src, i, span)?;
            i = next;
            out.push(Token { tok: Tok::Number(lit), span });
            continue;
        }
        if let Some(sym) = SYMBOLS.iter().chain(SINGLE_EXTRA.iter()).find(|s| src[i..].starts_with(**s)) {
            i += sym.len();
            out.push(Token { tok: Tok::Sym(sym), span });
            continue;
        }
        let ch = src[i..].chars().next().unwrap_or('?');
        return Err(ParseError::syntax(span, format!("unexpected character `{ch}`")));
    }
    let span = Span { line, col: i - line_start + 1 };
    out.push(Token { tok: Tok::Eof, span });
    Ok(out)
}

fn lex_number(src: &str, mut i: usize, span: Span) -> Result<(Literal, usize), ParseError> {
    let b = src.as_bytes();
    let start = i;
    while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'_') {
        i += 1;
    }
    let size_text: String = src[start..i].chars().filter(|c| *c != '_').collect();
    if i < b.len() && b[i] == b'.' && i + 1 < b.len() && b[i + 1].is_ascii_digit() {
        return Err(ParseError::unsupported(span, "real-valued literal"));
    }
    if i >= b.len() || b[i] != b'\'' {
        let value = size_text.parse::<u128>().ok();
        return Ok((Literal { text: size_text, width: 32, value }, i));
    }
    // Based literal.
    i += 1;
    if i < b.len() && (b[i] == b's' || b[i] == b'S') {
        return Err(ParseError::unsupported(span, "signed literal"));
    }
    let radix = match b.get(i).map(u8::to_ascii_lowercase) {
        Some(b'b') => 2,
        Some(b'o') => 8,
        Some(b'd') => 10,
        Some(b'h') => 16,
        _ => return Err(ParseError::syntax(span, "malformed based literal")),
    };
    let base_char = (b[i] as char).to_ascii_lowercase();
    i += 1;
    let digits_start = i;
    while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'?') {
        i += 1;
    }
    let digits: String = src[digits_start..i].chars().filter(|c| *c != '_').collect();
    if digits.is_empty() {
        return Err(ParseError::syntax(span, "based literal without digits"));
    }
    if digits.chars().any(|c| matches!(c.to_ascii_lowercase(), 'x' | 'z' | '?')) {
        return Err(ParseError::unsupported(span, "four-state literal (x/z digits)"));
    }
    if !digits.chars().all(|c| c.is_digit(radix)) {
        return Err(ParseError::syntax(span, format!("invalid digit in base-{radix} literal")));
    }
    let width = if size_text.is_empty() {
        32
    } else {
        match size_text.parse::<u32>() {
            Ok(0) | Err(_) => return Err(ParseError::syntax(span, "literal size must be a positive integer")),
            Ok(w) => w,
        }
    };
    let value = u128::from_str_radix(&digits, radix).ok().map(|v| if width < 128 { v & ((1u128 << width) - 1) } else { v });
    let text = format!("{size_text}'{base_char}{}", digits.to_ascii_lowercase());
    Ok((Literal { text, width, value }, i))
}
