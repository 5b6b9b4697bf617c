//! The SDL text format: parsing and serialization.
//!
//! SDL is line-oriented: one statement per line, `#` starts a comment.
//!
//! ```text
//! model <ident>
//! time <real> .. <real> step <real>
//! param <ident> = <real>
//! lookup <ident> from "<relative csv path>"
//! lookup <ident> inline { (<t>, <v>), ... }
//! stock <ident> = <real>
//! flow <ident>: [<ident>] -> [<ident>] rate <expr>
//! output <ident> = <expr>
//! ```
//!
//! Expressions use conventional precedence (unary minus, then `*` `/`, then
//! `+` `-`), parentheses, the builtins `exp`, `min`, `max`, lookup
//! application `name(arg)`, and the reserved symbol `time`.
//!
//! The parser recovers per statement and reports name-resolution errors after
//! a full syntactic pass, so one bad line does not hide the rest. Every error
//! carries a 1-based line/column span into the input.

use std::fmt;

use crate::expr::{BinOp, Builtin, Expr};
use crate::lookup::LookupTable;
use crate::model::{Flow, Ident, Item, LookupSource, Model, Stock, TimeSpec};

/// Location of a token or error in SDL source text. Line and column are
/// 1-based; column and length count characters, not bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceSpan {
    pub line: u32,
    pub column: u32,
    pub length: u32,
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorCode {
    Syntax,
    DuplicateIdentifier,
    UnresolvedReference,
    BadNumber,
    BadTimeSpec,
}

impl fmt::Display for ParseErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorCode::Syntax => "SYNTAX",
            ParseErrorCode::DuplicateIdentifier => "DUPLICATE_IDENTIFIER",
            ParseErrorCode::UnresolvedReference => "UNRESOLVED_REFERENCE",
            ParseErrorCode::BadNumber => "BAD_NUMBER",
            ParseErrorCode::BadTimeSpec => "BAD_TIME_SPEC",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub span: SourceSpan,
    pub code: ParseErrorCode,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: error[{}]: {}", self.span, self.code, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Words with grammatical meaning; none may be used as a declared name.
pub const KEYWORDS: &[&str] = &[
    "model", "time", "param", "lookup", "stock", "flow", "output", "rate", "inline", "from",
    "step", "exp", "min", "max",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.contains(&word)
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Number(f64),
    Str(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Eq,
    Colon,
    Arrow,
    DotDot,
    Plus,
    Minus,
    Star,
    Slash,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(name) => format!("'{}'", name),
            Tok::Number(_) => "number".to_string(),
            Tok::Str(_) => "string".to_string(),
            Tok::LParen => "'('".to_string(),
            Tok::RParen => "')'".to_string(),
            Tok::LBrace => "'{'".to_string(),
            Tok::RBrace => "'}'".to_string(),
            Tok::Comma => "','".to_string(),
            Tok::Eq => "'='".to_string(),
            Tok::Colon => "':'".to_string(),
            Tok::Arrow => "'->'".to_string(),
            Tok::DotDot => "'..'".to_string(),
            Tok::Plus => "'+'".to_string(),
            Tok::Minus => "'-'".to_string(),
            Tok::Star => "'*'".to_string(),
            Tok::Slash => "'/'".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub col: u32,
    pub len: u32,
}

/// Splits one line into tokens. Stops at `#`. Columns are 1-based characters.
pub fn lex_line(line: &str, line_no: u32) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = line.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0usize;
    let err = |code, col: usize, len: usize, message: String| ParseError {
        span: SourceSpan {
            line: line_no,
            column: col as u32 + 1,
            length: len.max(1) as u32,
        },
        code,
        message,
    };
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        match c {
            '#' => break,
            c if c.is_whitespace() => {
                i += 1;
            }
            c if c.is_ascii_alphabetic() => {
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                tokens.push(Token {
                    tok: Tok::Ident(word),
                    col: start as u32 + 1,
                    len: (i - start) as u32,
                });
            }
            c if c.is_ascii_digit() => {
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                // Fraction, but not `..`
                if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
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
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                // A number must not run straight into more word characters.
                if i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_')
                    {
                        i += 1;
                    }
                    let blob: String = chars[start..i].iter().collect();
                    return Err(err(
                        ParseErrorCode::BadNumber,
                        start,
                        i - start,
                        format!("malformed number '{}'", blob),
                    ));
                }
                let text: String = chars[start..i].iter().collect();
                let value: f64 = match text.parse() {
                    Ok(v) => v,
                    Err(_) => {
                        return Err(err(
                            ParseErrorCode::BadNumber,
                            start,
                            i - start,
                            format!("cannot parse number '{}'", text),
                        ))
                    }
                };
                if !value.is_finite() {
                    return Err(err(
                        ParseErrorCode::BadNumber,
                        start,
                        i - start,
                        format!("number '{}' is out of range", text),
                    ));
                }
                tokens.push(Token {
                    tok: Tok::Number(value),
                    col: start as u32 + 1,
                    len: (i - start) as u32,
                });
            }
            '"' => {
                i += 1;
                let mut value = String::new();
                let mut closed = false;
                while i < chars.len() {
                    match chars[i] {
                        '"' => {
                            closed = true;
                            i += 1;
                            break;
                        }
                        '\\' if i + 1 < chars.len() => {
                            let escaped = chars[i + 1];
                            if escaped == '"' || escaped == '\\' {
                                value.push(escaped);
                                i += 2;
                            } else {
                                return Err(err(
                                    ParseErrorCode::Syntax,
                                    i,
                                    2,
                                    format!("unknown escape '\\{}'", escaped),
                                ));
                            }
                        }
                        other => {
                            value.push(other);
                            i += 1;
                        }
                    }
                }
                if !closed {
                    return Err(err(
                        ParseErrorCode::Syntax,
                        start,
                        i - start,
                        "unterminated string".to_string(),
                    ));
                }
                tokens.push(Token {
                    tok: Tok::Str(value),
                    col: start as u32 + 1,
                    len: (i - start) as u32,
                });
            }
            '-' => {
                if i + 1 < chars.len() && chars[i + 1] == '>' {
                    tokens.push(Token {
                        tok: Tok::Arrow,
                        col: start as u32 + 1,
                        len: 2,
                    });
                    i += 2;
                } else {
                    tokens.push(Token {
                        tok: Tok::Minus,
                        col: start as u32 + 1,
                        len: 1,
                    });
                    i += 1;
                }
            }
            '.' => {
                if i + 1 < chars.len() && chars[i + 1] == '.' {
                    tokens.push(Token {
                        tok: Tok::DotDot,
                        col: start as u32 + 1,
                        len: 2,
                    });
                    i += 2;
                } else {
                    return Err(err(
                        ParseErrorCode::Syntax,
                        start,
                        1,
                        "unexpected '.'".to_string(),
                    ));
                }
            }
            '(' | ')' | '{' | '}' | ',' | '=' | ':' | '+' | '*' | '/' => {
                let tok = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    ',' => Tok::Comma,
                    '=' => Tok::Eq,
                    ':' => Tok::Colon,
                    '+' => Tok::Plus,
                    '*' => Tok::Star,
                    '/' => Tok::Slash,
                    _ => unreachable!(),
                };
                tokens.push(Token {
                    tok,
                    col: start as u32 + 1,
                    len: 1,
                });
                i += 1;
            }
            other => {
                return Err(err(
                    ParseErrorCode::Syntax,
                    start,
                    1,
                    format!("unexpected character '{}'", other),
                ));
            }
        }
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// Token cursor (shared with the experiment/calibration spec parsers)
// ---------------------------------------------------------------------------

/// Walks a lexed line, producing span-accurate errors at the current token or
/// at end of line.
pub struct Cursor<'a> {
    tokens: &'a [Token],
    pos: usize,
    line_no: u32,
    line_chars: u32,
}

impl<'a> Cursor<'a> {
    pub fn new(tokens: &'a [Token], line_no: u32, line: &str) -> Cursor<'a> {
        Cursor {
            tokens,
            pos: 0,
            line_no,
            line_chars: line.chars().count() as u32,
        }
    }

    pub fn peek(&self) -> Option<&'a Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    pub fn next(&mut self) -> Option<&'a Token> {
        let token = self.tokens.get(self.pos);
        if token.is_some() {
            self.pos += 1;
        }
        token
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.tokens.len()
    }

    /// Span of the current token, or a one-character span just past the line
    /// end when exhausted.
    pub fn here(&self) -> SourceSpan {
        match self.tokens.get(self.pos) {
            Some(token) => SourceSpan {
                line: self.line_no,
                column: token.col,
                length: token.len,
            },
            None => SourceSpan {
                line: self.line_no,
                column: self.line_chars + 1,
                length: 1,
            },
        }
    }

    pub fn error(&self, code: ParseErrorCode, message: impl Into<String>) -> ParseError {
        ParseError {
            span: self.here(),
            code,
            message: message.into(),
        }
    }

    fn describe_here(&self) -> String {
        match self.tokens.get(self.pos) {
            Some(token) => token.tok.describe(),
            None => "end of line".to_string(),
        }
    }

    pub fn expect(&mut self, want: &Tok, what: &str) -> Result<&'a Token, ParseError> {
        match self.tokens.get(self.pos) {
            Some(token) if token.tok == *want => {
                self.pos += 1;
                Ok(token)
            }
            _ => Err(self.error(
                ParseErrorCode::Syntax,
                format!("expected {}, found {}", what, self.describe_here()),
            )),
        }
    }

    /// An identifier in name-declaring position: keywords are rejected.
    pub fn expect_name(&mut self, what: &str) -> Result<(Ident, SourceSpan), ParseError> {
        let span = self.here();
        match self.peek() {
            Some(Tok::Ident(name)) if is_keyword(name) => Err(ParseError {
                span,
                code: ParseErrorCode::Syntax,
                message: format!("'{}' is a reserved word and cannot name a {}", name, what),
            }),
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                Ok((name.clone(), span))
            }
            _ => Err(self.error(
                ParseErrorCode::Syntax,
                format!("expected {} name, found {}", what, self.describe_here()),
            )),
        }
    }

    /// The given keyword, e.g. `rate` inside a flow statement.
    pub fn expect_keyword(&mut self, keyword: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Ident(name)) if name == keyword => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.error(
                ParseErrorCode::Syntax,
                format!("expected '{}', found {}", keyword, self.describe_here()),
            )),
        }
    }

    pub fn match_keyword(&mut self, keyword: &str) -> bool {
        if let Some(Tok::Ident(name)) = self.peek() {
            if name == keyword {
                self.pos += 1;
                return true;
            }
        }
        false
    }

    /// A numeric literal with optional leading minus.
    pub fn expect_signed_number(&mut self, what: &str) -> Result<f64, ParseError> {
        let negative = matches!(self.peek(), Some(Tok::Minus));
        if negative {
            self.pos += 1;
        }
        match self.peek() {
            Some(Tok::Number(value)) => {
                self.pos += 1;
                Ok(if negative { -value } else { *value })
            }
            _ => Err(self.error(
                ParseErrorCode::Syntax,
                format!("expected {}, found {}", what, self.describe_here()),
            )),
        }
    }

    pub fn expect_string(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Str(value)) => {
                self.pos += 1;
                Ok(value.clone())
            }
            _ => Err(self.error(
                ParseErrorCode::Syntax,
                format!("expected {}, found {}", what, self.describe_here()),
            )),
        }
    }

    pub fn expect_end(&mut self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.error(
                ParseErrorCode::Syntax,
                format!("unexpected {} after statement", self.describe_here()),
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Expressions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UseKind {
    Value,
    LookupCallee,
    StockEndpoint,
}

/// An identifier occurrence that must resolve after the syntactic pass.
#[derive(Debug, Clone)]
struct PendingRef {
    name: Ident,
    span: SourceSpan,
    kind: UseKind,
    owner: Ident,
}

const MAX_EXPR_DEPTH: u32 = 200;

struct ExprParser<'a, 'b> {
    cursor: &'b mut Cursor<'a>,
    refs: Vec<(Ident, SourceSpan, UseKind)>,
}

impl<'a, 'b> ExprParser<'a, 'b> {
    fn parse(cursor: &'b mut Cursor<'a>) -> Result<(Expr, Vec<(Ident, SourceSpan, UseKind)>), ParseError> {
        let mut parser = ExprParser {
            cursor,
            refs: Vec::new(),
        };
        let expr = parser.sum(0)?;
        Ok((expr, parser.refs))
    }

    fn sum(&mut self, depth: u32) -> Result<Expr, ParseError> {
        let mut lhs = self.term(depth + 1)?;
        loop {
            let op = match self.cursor.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => break,
            };
            self.cursor.next();
            let rhs = self.term(depth + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self, depth: u32) -> Result<Expr, ParseError> {
        let mut lhs = self.factor(depth + 1)?;
        loop {
            let op = match self.cursor.peek() {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => break,
            };
            self.cursor.next();
            let rhs = self.factor(depth + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn factor(&mut self, depth: u32) -> Result<Expr, ParseError> {
        if depth > MAX_EXPR_DEPTH {
            return Err(self
                .cursor
                .error(ParseErrorCode::Syntax, "expression is nested too deeply"));
        }
        if matches!(self.cursor.peek(), Some(Tok::Minus)) {
            self.cursor.next();
            // A minus directly on a number token is a negative literal;
            // anything else (including a parenthesized literal) stays a
            // negation node.
            if let Some(Tok::Number(value)) = self.cursor.peek() {
                let value = *value;
                self.cursor.next();
                return Ok(Expr::Literal(-value));
            }
            let inner = self.factor(depth + 1)?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.primary(depth + 1)
    }

    fn primary(&mut self, depth: u32) -> Result<Expr, ParseError> {
        let span = self.cursor.here();
        match self.cursor.peek() {
            Some(Tok::Number(value)) => {
                let value = *value;
                self.cursor.next();
                Ok(Expr::Literal(value))
            }
            Some(Tok::LParen) => {
                self.cursor.next();
                let inner = self.sum(depth + 1)?;
                self.cursor.expect(&Tok::RParen, "')'")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                let name = name.clone();
                self.cursor.next();
                match name.as_str() {
                    "time" => {
                        if matches!(self.cursor.peek(), Some(Tok::LParen)) {
                            return Err(self.cursor.error(
                                ParseErrorCode::Syntax,
                                "'time' is a value, not a function",
                            ));
                        }
                        Ok(Expr::Time)
                    }
                    "exp" | "min" | "max" => {
                        let builtin = match name.as_str() {
                            "exp" => Builtin::Exp,
                            "min" => Builtin::Min,
                            _ => Builtin::Max,
                        };
                        self.cursor.expect(&Tok::LParen, "'('")?;
                        let mut args = vec![self.sum(depth + 1)?];
                        while matches!(self.cursor.peek(), Some(Tok::Comma)) {
                            self.cursor.next();
                            args.push(self.sum(depth + 1)?);
                        }
                        self.cursor.expect(&Tok::RParen, "')'")?;
                        if args.len() != builtin.arity() {
                            return Err(ParseError {
                                span,
                                code: ParseErrorCode::Syntax,
                                message: format!(
                                    "{} takes {} argument{}, got {}",
                                    name,
                                    builtin.arity(),
                                    if builtin.arity() == 1 { "" } else { "s" },
                                    args.len()
                                ),
                            });
                        }
                        Ok(Expr::Call(builtin, args))
                    }
                    word if is_keyword(word) => Err(ParseError {
                        span,
                        code: ParseErrorCode::Syntax,
                        message: format!("reserved word '{}' in expression", word),
                    }),
                    _ => {
                        if matches!(self.cursor.peek(), Some(Tok::LParen)) {
                            self.cursor.next();
                            let arg = self.sum(depth + 1)?;
                            self.cursor.expect(&Tok::RParen, "')'")?;
                            self.refs.push((name.clone(), span, UseKind::LookupCallee));
                            Ok(Expr::lookup(name, arg))
                        } else {
                            self.refs.push((name.clone(), span, UseKind::Value));
                            Ok(Expr::reference(name))
                        }
                    }
                }
            }
            _ => Err(self.cursor.error(
                ParseErrorCode::Syntax,
                format!("expected expression, found {}", self.cursor.describe_here()),
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Statement parsing
// ---------------------------------------------------------------------------

struct DraftItem {
    item: Item,
    name_span: SourceSpan,
}

#[derive(Default)]
struct Draft {
    model_name: Option<Ident>,
    time_spec: Option<TimeSpec>,
    items: Vec<DraftItem>,
    refs: Vec<PendingRef>,
}

/// Parses SDL source into a model.
///
/// On success the returned model passes [`crate::validate_model`] with zero
/// diagnostics (file-backed lookups still need their data loaded before a
/// run). On failure, every error carries a span into the input.
pub fn parse_model(text: &str) -> Result<Model, Vec<ParseError>> {
    let mut errors: Vec<ParseError> = Vec::new();
    let mut draft = Draft::default();
    let mut last_line_no = 1u32;

    for (idx, raw_line) in text.split('\n').enumerate() {
        let line_no = idx as u32 + 1;
        last_line_no = line_no;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        let tokens = match lex_line(line, line_no) {
            Ok(tokens) => tokens,
            Err(err) => {
                errors.push(err);
                continue;
            }
        };
        if tokens.is_empty() {
            continue;
        }
        let mut cursor = Cursor::new(&tokens, line_no, line);
        if let Err(err) = parse_statement(&mut cursor, &mut draft) {
            errors.push(err);
        }
    }

    let eof_span = |column: u32| SourceSpan {
        line: last_line_no,
        column,
        length: 1,
    };
    if draft.model_name.is_none() {
        errors.push(ParseError {
            span: eof_span(1),
            code: ParseErrorCode::Syntax,
            message: "missing 'model <name>' declaration".to_string(),
        });
    }
    if draft.time_spec.is_none() {
        errors.push(ParseError {
            span: eof_span(1),
            code: ParseErrorCode::BadTimeSpec,
            message: "missing 'time <start> .. <end> step <step>' declaration".to_string(),
        });
    }

    resolve_names(&draft, &mut errors);

    if !errors.is_empty() {
        return Err(errors);
    }

    let mut model = Model::new(draft.model_name.unwrap(), draft.time_spec.unwrap());
    for draft_item in draft.items {
        model.add_item(draft_item.item);
    }
    debug_assert!(crate::validate::validate_model(&model).is_empty());
    Ok(model)
}

fn parse_statement(cursor: &mut Cursor, draft: &mut Draft) -> Result<(), ParseError> {
    let keyword = match cursor.peek() {
        Some(Tok::Ident(word)) => word.clone(),
        _ => {
            return Err(cursor.error(
                ParseErrorCode::Syntax,
                format!(
                    "expected a statement keyword (model, time, param, lookup, stock, flow, output), found {}",
                    cursor.describe_here()
                ),
            ))
        }
    };
    match keyword.as_str() {
        "model" => {
            let span = cursor.here();
            cursor.next();
            let (name, _) = cursor.expect_name("model")?;
            cursor.expect_end()?;
            if draft.model_name.is_some() {
                return Err(ParseError {
                    span,
                    code: ParseErrorCode::Syntax,
                    message: "duplicate 'model' declaration".to_string(),
                });
            }
            draft.model_name = Some(name);
            Ok(())
        }
        "time" => {
            let span = cursor.here();
            cursor.next();
            let start = cursor.expect_signed_number("start time")?;
            cursor.expect(&Tok::DotDot, "'..'")?;
            let end = cursor.expect_signed_number("end time")?;
            cursor.expect_keyword("step")?;
            let step = cursor.expect_signed_number("step size")?;
            cursor.expect_end()?;
            if draft.time_spec.is_some() {
                return Err(ParseError {
                    span,
                    code: ParseErrorCode::Syntax,
                    message: "duplicate 'time' declaration".to_string(),
                });
            }
            let spec = TimeSpec::new(start, end, step);
            if !spec.is_valid() {
                return Err(ParseError {
                    span,
                    code: ParseErrorCode::BadTimeSpec,
                    message: format!(
                        "invalid time spec {} .. {} step {} (need start < end, 0 < step <= end - start)",
                        start, end, step
                    ),
                });
            }
            draft.time_spec = Some(spec);
            Ok(())
        }
        "param" => {
            cursor.next();
            let (name, name_span) = cursor.expect_name("parameter")?;
            cursor.expect(&Tok::Eq, "'='")?;
            let value = cursor.expect_signed_number("parameter value")?;
            cursor.expect_end()?;
            draft.items.push(DraftItem {
                item: Item::Parameter { name, value },
                name_span,
            });
            Ok(())
        }
        "stock" => {
            cursor.next();
            let (name, name_span) = cursor.expect_name("stock")?;
            cursor.expect(&Tok::Eq, "'='")?;
            let value = cursor.expect_signed_number("initial value")?;
            cursor.expect_end()?;
            draft.items.push(DraftItem {
                item: Item::Stock(Stock {
                    name,
                    initial_value: value,
                }),
                name_span,
            });
            Ok(())
        }
        "lookup" => {
            cursor.next();
            let (name, name_span) = cursor.expect_name("lookup")?;
            let source = if cursor.match_keyword("from") {
                let path = cursor.expect_string("file path string")?;
                LookupSource::File { path }
            } else if cursor.match_keyword("inline") {
                let brace_span = cursor.here();
                cursor.expect(&Tok::LBrace, "'{'")?;
                let mut points: Vec<(f64, f64)> = Vec::new();
                loop {
                    let point_span = cursor.here();
                    cursor.expect(&Tok::LParen, "'('")?;
                    let t = cursor.expect_signed_number("point time")?;
                    cursor.expect(&Tok::Comma, "','")?;
                    let v = cursor.expect_signed_number("point value")?;
                    cursor.expect(&Tok::RParen, "')'")?;
                    if let Some(&(prev, _)) = points.last() {
                        if t <= prev {
                            return Err(ParseError {
                                span: point_span,
                                code: ParseErrorCode::Syntax,
                                message: "lookup point times must be strictly increasing"
                                    .to_string(),
                            });
                        }
                    }
                    points.push((t, v));
                    if matches!(cursor.peek(), Some(Tok::Comma)) {
                        cursor.next();
                        continue;
                    }
                    break;
                }
                cursor.expect(&Tok::RBrace, "'}'")?;
                let table = LookupTable::new(points).map_err(|e| ParseError {
                    span: brace_span,
                    code: ParseErrorCode::Syntax,
                    message: e.to_string(),
                })?;
                LookupSource::Inline(table)
            } else {
                return Err(cursor.error(
                    ParseErrorCode::Syntax,
                    format!("expected 'from' or 'inline', found {}", cursor.describe_here()),
                ));
            };
            cursor.expect_end()?;
            draft.items.push(DraftItem {
                item: Item::Lookup { name, source },
                name_span,
            });
            Ok(())
        }
        "flow" => {
            cursor.next();
            let (name, name_span) = cursor.expect_name("flow")?;
            cursor.expect(&Tok::Colon, "':'")?;
            let endpoint = |cursor: &mut Cursor,
                                refs: &mut Vec<PendingRef>,
                                owner: &Ident|
             -> Result<Option<Ident>, ParseError> {
                match cursor.peek() {
                    Some(Tok::Ident(word)) if word == "rate" => Ok(None),
                    Some(Tok::Ident(word)) if is_keyword(word) => Err(cursor.error(
                        ParseErrorCode::Syntax,
                        format!("reserved word '{}' cannot name a stock", word),
                    )),
                    Some(Tok::Ident(word)) => {
                        let span = cursor.here();
                        let word = word.clone();
                        cursor.next();
                        refs.push(PendingRef {
                            name: word.clone(),
                            span,
                            kind: UseKind::StockEndpoint,
                            owner: owner.clone(),
                        });
                        Ok(Some(word))
                    }
                    _ => Ok(None),
                }
            };
            let source = endpoint(cursor, &mut draft.refs, &name)?;
            cursor.expect(&Tok::Arrow, "'->'")?;
            let sink_span = cursor.here();
            let sink = endpoint(cursor, &mut draft.refs, &name)?;
            if source.is_none() && sink.is_none() {
                return Err(ParseError {
                    span: name_span,
                    code: ParseErrorCode::Syntax,
                    message: format!("flow '{}' needs a source or a sink", name),
                });
            }
            if source.is_some() && source == sink {
                return Err(ParseError {
                    span: sink_span,
                    code: ParseErrorCode::Syntax,
                    message: "flow source and sink must differ".to_string(),
                });
            }
            cursor.expect_keyword("rate")?;
            let (rate, expr_refs) = ExprParser::parse(cursor)?;
            cursor.expect_end()?;
            for (ref_name, span, kind) in expr_refs {
                draft.refs.push(PendingRef {
                    name: ref_name,
                    span,
                    kind,
                    owner: name.clone(),
                });
            }
            draft.items.push(DraftItem {
                item: Item::Flow(Flow {
                    name,
                    source,
                    sink,
                    rate,
                }),
                name_span,
            });
            Ok(())
        }
        "output" => {
            cursor.next();
            let (name, name_span) = cursor.expect_name("output")?;
            cursor.expect(&Tok::Eq, "'='")?;
            let (expr, expr_refs) = ExprParser::parse(cursor)?;
            cursor.expect_end()?;
            for (ref_name, span, kind) in expr_refs {
                draft.refs.push(PendingRef {
                    name: ref_name,
                    span,
                    kind,
                    owner: name.clone(),
                });
            }
            draft.items.push(DraftItem {
                item: Item::Output { name, expr },
                name_span,
            });
            Ok(())
        }
        other => Err(cursor.error(
            ParseErrorCode::Syntax,
            format!(
                "expected a statement keyword (model, time, param, lookup, stock, flow, output), found '{}'",
                other
            ),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NameKind {
    Parameter,
    Lookup,
    Stock,
    Output,
}

impl NameKind {
    fn describe(self) -> &'static str {
        match self {
            NameKind::Parameter => "parameter",
            NameKind::Lookup => "lookup",
            NameKind::Stock => "stock",
            NameKind::Output => "output",
        }
    }
}

/// Second pass: duplicate declarations and reference resolution.
fn resolve_names(draft: &Draft, errors: &mut Vec<ParseError>) {
    use std::collections::HashMap;

    let mut names: HashMap<&str, NameKind> = HashMap::new();
    let mut flow_names: HashMap<&str, ()> = HashMap::new();
    for draft_item in &draft.items {
        let name = draft_item.item.name();
        match &draft_item.item {
            Item::Flow(_) => {
                if flow_names.insert(name.as_str(), ()).is_some() {
                    errors.push(ParseError {
                        span: draft_item.name_span,
                        code: ParseErrorCode::DuplicateIdentifier,
                        message: format!("flow '{}' is declared more than once", name),
                    });
                }
            }
            item => {
                let kind = match item {
                    Item::Parameter { .. } => NameKind::Parameter,
                    Item::Lookup { .. } => NameKind::Lookup,
                    Item::Stock(_) => NameKind::Stock,
                    Item::Output { .. } => NameKind::Output,
                    Item::Flow(_) => unreachable!(),
                };
                if let Some(existing) = names.insert(name.as_str(), kind) {
                    errors.push(ParseError {
                        span: draft_item.name_span,
                        code: ParseErrorCode::DuplicateIdentifier,
                        message: format!(
                            "'{}' is already declared as a {}",
                            name,
                            existing.describe()
                        ),
                    });
                }
            }
        }
    }

    for pending in &draft.refs {
        let found = names.get(pending.name.as_str()).copied();
        let complaint = match (pending.kind, found) {
            (UseKind::Value, Some(NameKind::Parameter | NameKind::Stock)) => None,
            (UseKind::LookupCallee, Some(NameKind::Lookup)) => None,
            (UseKind::StockEndpoint, Some(NameKind::Stock)) => None,
            (UseKind::Value, Some(NameKind::Lookup)) => Some(format!(
                "lookup '{}' must be applied as {}(...)",
                pending.name, pending.name
            )),
            (UseKind::Value, Some(NameKind::Output)) => Some(format!(
                "'{}' is an output; outputs cannot be referenced",
                pending.name
            )),
            (UseKind::LookupCallee, Some(kind)) => Some(format!(
                "'{}' is a {}, not a lookup",
                pending.name,
                kind.describe()
            )),
            (UseKind::StockEndpoint, Some(kind)) => Some(format!(
                "'{}' is a {}, not a stock",
                pending.name,
                kind.describe()
            )),
            (_, None) => Some(format!(
                "undeclared identifier '{}' in '{}'",
                pending.name, pending.owner
            )),
        };
        if let Some(message) = complaint {
            errors.push(ParseError {
                span: pending.span,
                code: ParseErrorCode::UnresolvedReference,
                message,
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn escape_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            other => out.push(other),
        }
    }
    out
}

fn write_expr(out: &mut String, expr: &Expr, parent_prec: u8) {
    let prec = match expr {
        Expr::Binary(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Binary(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        _ => 4,
    };
    let needs_parens = prec < parent_prec;
    if needs_parens {
        out.push('(');
    }
    match expr {
        Expr::Literal(v) => out.push_str(&format!("{}", v)),
        Expr::Ref(name) => out.push_str(name),
        Expr::Time => out.push_str("time"),
        Expr::Lookup(name, arg) => {
            out.push_str(name);
            out.push('(');
            write_expr(out, arg, 0);
            out.push(')');
        }
        Expr::Neg(inner) => {
            out.push('-');
            // Parenthesize a negated literal so it does not re-parse as a
            // plain negative literal.
            if matches!(**inner, Expr::Literal(_)) {
                out.push('(');
                write_expr(out, inner, 0);
                out.push(')');
            } else {
                write_expr(out, inner, 4);
            }
        }
        Expr::Binary(op, lhs, rhs) => {
            let symbol = match op {
                BinOp::Add => " + ",
                BinOp::Sub => " - ",
                BinOp::Mul => " * ",
                BinOp::Div => " / ",
            };
            write_expr(out, lhs, prec);
            out.push_str(symbol);
            write_expr(out, rhs, prec + 1);
        }
        Expr::Call(builtin, args) => {
            out.push_str(builtin.name());
            out.push('(');
            for (i, arg) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(out, arg, 0);
            }
            out.push(')');
        }
    }
    if needs_parens {
        out.push(')');
    }
}

pub fn render_expr(expr: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, expr, 0);
    out
}

/// Renders a model as SDL source. The output parses back to a structurally
/// identical model, declaration order included; numeric literals use Rust's
/// shortest round-trip formatting so values survive bit-exactly.
pub fn serialize_model(model: &Model) -> String {
    let mut out = String::new();
    out.push_str(&format!("model {}\n", model.name));
    out.push_str(&format!(
        "time {} .. {} step {}\n",
        model.time_spec.start, model.time_spec.end, model.time_spec.step
    ));
    for item in model.items() {
        match item {
            Item::Parameter { name, value } => {
                out.push_str(&format!("param {} = {}\n", name, value));
            }
            Item::Lookup { name, source } => match source {
                LookupSource::File { path } => {
                    out.push_str(&format!("lookup {} from \"{}\"\n", name, escape_string(path)));
                }
                LookupSource::Inline(table) => {
                    let points: Vec<String> = table
                        .points()
                        .iter()
                        .map(|(t, v)| format!("({}, {})", t, v))
                        .collect();
                    out.push_str(&format!(
                        "lookup {} inline {{ {} }}\n",
                        name,
                        points.join(", ")
                    ));
                }
            },
            Item::Stock(stock) => {
                out.push_str(&format!("stock {} = {}\n", stock.name, stock.initial_value));
            }
            Item::Flow(flow) => {
                out.push_str(&format!("flow {}:", flow.name));
                if let Some(source) = &flow.source {
                    out.push_str(&format!(" {}", source));
                }
                out.push_str(" ->");
                if let Some(sink) = &flow.sink {
                    out.push_str(&format!(" {}", sink));
                }
                out.push_str(&format!(" rate {}\n", render_expr(&flow.rate)));
            }
            Item::Output { name, expr } => {
                out.push_str(&format!("output {} = {}\n", name, render_expr(expr)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "model m\ntime 0 .. 10 step 1\nstock S = 0\nflow f: -> S rate 1\n";

    fn errs(text: &str) -> Vec<ParseError> {
        parse_model(text).unwrap_err()
    }

    #[test]
    fn minimal_source_parses() {
        let model = parse_model(MINIMAL).unwrap();
        assert_eq!(model.name, "m");
        assert_eq!(model.time_spec, TimeSpec::new(0.0, 10.0, 1.0));
        assert_eq!(model.stocks().count(), 1);
        let flow = model.flows().next().unwrap();
        assert_eq!(flow.source, None);
        assert_eq!(flow.sink.as_deref(), Some("S"));
        assert_eq!(flow.rate, Expr::Literal(1.0));
    }

    #[test]
    fn duplicate_stock_reported_at_second_declaration() {
        let text = "model m\ntime 0 .. 10 step 1\nstock S = 0\nstock S = 0\n";
        let errors = errs(text);
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].code, ParseErrorCode::DuplicateIdentifier);
        assert_eq!(errors[0].span.line, 4);
        assert_eq!(errors[0].span.column, 7);
        assert_eq!(errors[0].span.length, 1);
    }

    #[test]
    fn three_unresolved_references_in_one_flow() {
        let text = "model m\ntime 0 .. 10 step 1\nflow f: A -> B rate k\n";
        let errors = errs(text);
        let unresolved: Vec<_> = errors
            .iter()
            .filter(|e| e.code == ParseErrorCode::UnresolvedReference)
            .collect();
        assert_eq!(unresolved.len(), 3);
        let columns: Vec<u32> = unresolved.iter().map(|e| e.span.column).collect();
        assert_eq!(columns, vec![9, 14, 21]);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# header\nmodel m\n\n   # indented comment\ntime 0 .. 1 step 1 # trailing\nstock S = 0 # also trailing\n";
        assert!(parse_model(text).is_ok());
    }

    #[test]
    fn expression_precedence_and_parentheses() {
        let text = "model m\ntime 0 .. 1 step 1\nparam k = 2\nparam j = 3\noutput o = k + 2 * j - -k\noutput p = (k + 2) * j\noutput q = k / j / 2\n";
        let model = parse_model(text).unwrap();
        let outputs: Vec<_> = model.outputs().collect();
        let o = render_expr(outputs[0].1);
        assert_eq!(o, "k + 2 * j - -k");
        let p = render_expr(outputs[1].1);
        assert_eq!(p, "(k + 2) * j");
        let q = render_expr(outputs[2].1);
        assert_eq!(q, "k / j / 2");
        // Reparse of the rendered forms preserves structure.
        for (_, expr) in &outputs {
            let roundtrip = format!(
                "model m\ntime 0 .. 1 step 1\nparam k = 2\nparam j = 3\noutput z = {}\n",
                render_expr(expr)
            );
            let reparsed = parse_model(&roundtrip).unwrap();
            assert_eq!(reparsed.outputs().next().unwrap().1, *expr);
        }
    }

    #[test]
    fn negative_literals_fold() {
        let text = "model m\ntime -5 .. 10 step 1\nparam k = -0.5\noutput o = -3 + k\n";
        let model = parse_model(text).unwrap();
        assert_eq!(model.time_spec.start, -5.0);
        assert_eq!(model.parameter("k"), Some(-0.5));
        let (_, expr) = model.outputs().next().unwrap();
        assert_eq!(
            *expr,
            Expr::binary(BinOp::Add, Expr::Literal(-3.0), Expr::reference("k"))
        );
    }

    #[test]
    fn reserved_words_cannot_be_declared() {
        for decl in ["param time = 1", "stock exp = 0", "param rate = 1", "output min = 2"] {
            let text = format!("model m\ntime 0 .. 1 step 1\n{}\n", decl);
            let errors = errs(&text);
            assert!(
                errors.iter().any(|e| e.code == ParseErrorCode::Syntax
                    && e.message.contains("reserved word")),
                "{:?}",
                errors
            );
        }
    }

    #[test]
    fn bad_numbers() {
        let text = "model m\ntime 0 .. 1 step 1\nparam k = 1e999\n";
        let errors = errs(text);
        assert_eq!(errors[0].code, ParseErrorCode::BadNumber);
        let text = "model m\ntime 0 .. 1 step 1\nparam k = 12x4\n";
        let errors = errs(text);
        assert_eq!(errors[0].code, ParseErrorCode::BadNumber);
        assert_eq!(errors[0].span.column, 11);
        assert_eq!(errors[0].span.length, 4);
    }

    #[test]
    fn bad_time_specs() {
        for spec in ["time 5 .. 5 step 1", "time 0 .. 10 step 0", "time 0 .. 10 step 11"] {
            let text = format!("model m\n{}\nstock S = 0\n", spec);
            let errors = errs(&text);
            assert!(
                errors.iter().any(|e| e.code == ParseErrorCode::BadTimeSpec),
                "{:?}",
                errors
            );
        }
    }

    #[test]
    fn missing_model_or_time() {
        let errors = errs("stock S = 0");
        assert!(errors.iter().any(|e| e.message.contains("missing 'model")));
        assert!(errors.iter().any(|e| e.code == ParseErrorCode::BadTimeSpec));
        // Spans stay within the single-line input.
        for e in &errors {
            assert_eq!(e.span.line, 1);
        }
    }

    #[test]
    fn inline_lookup_and_file_lookup() {
        let text = "model m\ntime 0 .. 10 step 1\nlookup L inline { (0, 10), (10, 20) }\nlookup F from \"data/f.csv\"\noutput o = L(time) + F(time)\n";
        let model = parse_model(text).unwrap();
        assert_eq!(model.lookup_table("L").unwrap().points(), &[(0.0, 10.0), (10.0, 20.0)]);
        assert_eq!(
            model.unresolved_lookups(),
            vec![(&"F".to_string(), "data/f.csv")]
        );
    }

    #[test]
    fn inline_lookup_must_increase() {
        let text = "model m\ntime 0 .. 1 step 1\nlookup L inline { (5, 1), (5, 2) }\n";
        let errors = errs(text);
        assert_eq!(errors[0].code, ParseErrorCode::Syntax);
        assert!(errors[0].message.contains("strictly increasing"));
    }

    #[test]
    fn flow_endpoint_forms() {
        let text = "model m\ntime 0 .. 1 step 1\nstock A = 1\nstock B = 0\nflow out: A -> rate 1\nflow in: -> B rate 2\nflow both: A -> B rate 3\n";
        let model = parse_model(text).unwrap();
        let flows: Vec<_> = model.flows().collect();
        assert_eq!(flows[0].sink, None);
        assert_eq!(flows[1].source, None);
        assert_eq!(flows[2].source.as_deref(), Some("A"));
        assert_eq!(flows[2].sink.as_deref(), Some("B"));

        let errors = errs("model m\ntime 0 .. 1 step 1\nflow f: -> rate 1\n");
        assert!(errors[0].message.contains("needs a source or a sink"));

        let errors = errs("model m\ntime 0 .. 1 step 1\nstock A = 1\nflow f: A -> A rate 1\n");
        assert!(errors[0].message.contains("must differ"));
    }

    #[test]
    fn parser_recovers_per_statement() {
        let text = "model m\ntime 0 .. 1 step 1\nstok S = 0\nstock T = @\nstock U = 0\nflow f: -> U rate 1\n";
        let errors = errs(text);
        assert_eq!(errors.len(), 2);
        assert_eq!(errors[0].span.line, 3);
        assert_eq!(errors[1].span.line, 4);
    }

    #[test]
    fn lookup_value_misuse_is_unresolved() {
        let text = "model m\ntime 0 .. 1 step 1\nlookup L inline { (0, 1) }\nparam k = 1\noutput a = L\noutput b = k(time)\n";
        let errors = errs(text);
        assert_eq!(errors.len(), 2);
        assert!(errors.iter().all(|e| e.code == ParseErrorCode::UnresolvedReference));
    }

    #[test]
    fn trailing_tokens_are_rejected() {
        let errors = errs("model m extra\ntime 0 .. 1 step 1\n");
        assert!(errors[0].message.contains("unexpected"));
    }

    #[test]
    fn crlf_and_unicode_comments() {
        let text = "model m\r\ntime 0 .. 1 step 1\r\n# caf\u{e9} comment \u{1F600}\r\nstock S = 0\r\n";
        assert!(parse_model(text).is_ok());
    }

    #[test]
    fn string_escapes_round_trip() {
        let path = "di\\r\"quote\".csv";
        let mut model = Model::new("m", TimeSpec::new(0.0, 1.0, 1.0));
        model.add_lookup("L", LookupSource::File { path: path.into() });
        let text = serialize_model(&model);
        let reparsed = parse_model(&text).unwrap();
        assert_eq!(model, reparsed);
    }

    #[test]
    fn serialize_keeps_declaration_order() {
        let text = "model m\ntime 0 .. 10 step 1\nlookup L inline { (0, 1) }\nstock S = 0\nparam k = 0.017\nflow f: -> S rate k * L(time)\n";
        let model = parse_model(text).unwrap();
        let rendered = serialize_model(&model);
        let lookup_pos = rendered.find("lookup L").unwrap();
        let stock_pos = rendered.find("stock S").unwrap();
        let param_pos = rendered.find("param k").unwrap();
        assert!(lookup_pos < stock_pos && stock_pos < param_pos);
        // 0.017 written bit-exactly.
        assert!(rendered.contains("param k = 0.017"));
        assert_eq!(parse_model(&rendered).unwrap(), model);
    }

    #[test]
    fn deep_nesting_errors_instead_of_overflowing() {
        let mut expr = String::new();
        for _ in 0..5000 {
            expr.push('(');
        }
        expr.push('1');
        let text = format!("model m\ntime 0 .. 1 step 1\noutput o = {}\n", expr);
        let errors = errs(&text);
        assert!(errors[0].message.contains("nested too deeply"));
    }
}
