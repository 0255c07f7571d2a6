use std::collections::BTreeSet;

use super::ast::{AtomDef, CompTree, ModelSource, Rho, SeqTerm};

#[derive(Debug, Clone, thiserror::Error)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Float(f64),
    Eq,
    Semi,
    LParen,
    RParen,
    Dot,
    Plus,
    Comma,
    Lt,
    Gt,
    Eof,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_trivia(&mut self) {
        loop {
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos] == b'#' {
                while self.pos < self.src.len() && self.src[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    /// Next token plus its starting byte offset.
    fn next(&mut self) -> Result<(Tok, usize), (usize, String)> {
        self.skip_trivia();
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::Eof, start));
        }
        let c = self.src[self.pos];
        let single = |t| Ok((t, start));
        match c {
            b'=' => {
                self.pos += 1;
                single(Tok::Eq)
            }
            b';' => {
                self.pos += 1;
                single(Tok::Semi)
            }
            b'(' => {
                self.pos += 1;
                single(Tok::LParen)
            }
            b')' => {
                self.pos += 1;
                single(Tok::RParen)
            }
            b'.' => {
                self.pos += 1;
                single(Tok::Dot)
            }
            b'+' => {
                self.pos += 1;
                single(Tok::Plus)
            }
            b',' => {
                self.pos += 1;
                single(Tok::Comma)
            }
            b'<' => {
                self.pos += 1;
                single(Tok::Lt)
            }
            b'>' => {
                self.pos += 1;
                single(Tok::Gt)
            }
            c if c.is_ascii_digit() => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_digit()
                        || self.src[end] == b'.'
                        || self.src[end] == b'e'
                        || self.src[end] == b'E'
                        || ((self.src[end] == b'+' || self.src[end] == b'-')
                            && end > self.pos
                            && (self.src[end - 1] == b'e' || self.src[end - 1] == b'E')))
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let v: f64 = text
                    .parse()
                    .map_err(|_| (start, format!("malformed number `{text}`")))?;
                self.pos = end;
                Ok((Tok::Float(v), start))
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric()
                        || self.src[end] == b'_'
                        || self.src[end] == b'\'')
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end])
                    .unwrap()
                    .to_string();
                self.pos = end;
                Ok((Tok::Ident(text), start))
            }
            other => Err((start, format!("unexpected character `{}`", other as char))),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    lexer: Lexer<'a>,
    tok: Tok,
    tok_offset: usize,
    occ_offsets: Vec<usize>,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, ParseError> {
        let mut lexer = Lexer::new(src);
        let (tok, tok_offset) = lexer.next().map_err(|(off, msg)| err_at(src, off, msg))?;
        Ok(Parser {
            src,
            lexer,
            tok,
            tok_offset,
            occ_offsets: Vec::new(),
        })
    }

    fn bump(&mut self) -> Result<(), ParseError> {
        let (tok, off) = self
            .lexer
            .next()
            .map_err(|(off, msg)| err_at(self.src, off, msg))?;
        self.tok = tok;
        self.tok_offset = off;
        Ok(())
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(err_at(self.src, self.tok_offset, msg.into()))
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        if self.tok == want {
            self.bump()
        } else {
            self.error(format!("expected {what}, found {}", describe(&self.tok)))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match &self.tok {
            Tok::Ident(n) => {
                let n = n.clone();
                self.bump()?;
                Ok(n)
            }
            other => self.error(format!("expected {what}, found {}", describe(other))),
        }
    }

    fn float(&mut self, what: &str) -> Result<f64, ParseError> {
        match self.tok {
            Tok::Float(v) => {
                self.bump()?;
                Ok(v)
            }
            ref other => self.error(format!("expected {what}, found {}", describe(other))),
        }
    }

    /// seq := prefix-level ("+" prefix-level)*
    fn seq(&mut self) -> Result<SeqTerm, ParseError> {
        let mut term = self.prefix_level()?;
        while self.tok == Tok::Plus {
            self.bump()?;
            let rhs = self.prefix_level()?;
            term = SeqTerm::Choice(Box::new(term), Box::new(rhs));
        }
        Ok(term)
    }

    /// prefix-level := "(" IDENT "," FLOAT ")" "." prefix-level
    ///               | "(" seq ")"
    ///               | IDENT
    fn prefix_level(&mut self) -> Result<SeqTerm, ParseError> {
        match &self.tok {
            Tok::Ident(n) => {
                let n = n.clone();
                self.bump()?;
                Ok(SeqTerm::Constant(n))
            }
            Tok::LParen => {
                self.bump()?;
                // Distinguish `(action, rate).` from a parenthesised seq by
                // what follows the first identifier.
                if let Tok::Ident(action) = self.tok.clone() {
                    self.bump()?;
                    if self.tok == Tok::Comma {
                        self.bump()?;
                        let rate_offset = self.tok_offset;
                        let rate = self.float("a rate")?;
                        if !(rate > 0.0) || !rate.is_finite() {
                            return Err(err_at(
                                self.src,
                                rate_offset,
                                format!("rate must be a positive finite number, got {rate}"),
                            ));
                        }
                        self.expect(Tok::RParen, "`)`")?;
                        self.expect(Tok::Dot, "`.` after prefix")?;
                        let cont = self.prefix_level()?;
                        let occ = self.occ_offsets.len();
                        self.occ_offsets.push(rate_offset);
                        return Ok(SeqTerm::Prefix {
                            action,
                            rate,
                            occ,
                            cont: Box::new(cont),
                        });
                    }
                    // `(seq)` whose seq starts with a constant
                    let mut term = SeqTerm::Constant(action);
                    while self.tok == Tok::Plus {
                        self.bump()?;
                        let rhs = self.prefix_level()?;
                        term = SeqTerm::Choice(Box::new(term), Box::new(rhs));
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(term);
                }
                let inner = self.seq()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            other => self.error(format!(
                "expected a process term, found {}",
                describe(other)
            )),
        }
    }

    /// comp := comp-atom ("<" idlist? ">" comp-atom)*   (left-associative)
    fn comp(&mut self) -> Result<CompTree, ParseError> {
        let mut tree = self.comp_atom()?;
        while self.tok == Tok::Lt {
            self.bump()?;
            let mut sync = BTreeSet::new();
            if let Tok::Ident(_) = &self.tok {
                loop {
                    let a = self.ident("an action name")?;
                    sync.insert(a);
                    if self.tok == Tok::Comma {
                        self.bump()?;
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::Gt, "`>`")?;
            let rhs = self.comp_atom()?;
            tree = CompTree::Par {
                left: Box::new(tree),
                right: Box::new(rhs),
                sync,
            };
        }
        Ok(tree)
    }

    fn comp_atom(&mut self) -> Result<CompTree, ParseError> {
        match &self.tok {
            Tok::Ident(n) => {
                let n = n.clone();
                self.bump()?;
                Ok(CompTree::Leaf(n))
            }
            Tok::LParen => {
                self.bump()?;
                let inner = self.comp()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            other => self.error(format!(
                "expected a process name or `(`, found {}",
                describe(other)
            )),
        }
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Ident(n) => format!("`{n}`"),
        Tok::Float(v) => format!("number `{v}`"),
        Tok::Eq => "`=`".into(),
        Tok::Semi => "`;`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::Dot => "`.`".into(),
        Tok::Plus => "`+`".into(),
        Tok::Comma => "`,`".into(),
        Tok::Lt => "`<`".into(),
        Tok::Gt => "`>`".into(),
        Tok::Eof => "end of input".into(),
    }
}

fn err_at(src: &str, offset: usize, msg: impl Into<String>) -> ParseError {
    let mut line = 1;
    let mut col = 1;
    for (i, c) in src.char_indices() {
        if i >= offset {
            break;
        }
        if c == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    ParseError {
        line,
        col,
        msg: msg.into(),
    }
}

/// Parse a model file. Checks performed here: syntax, positive rates,
/// duplicate definitions, references to undefined process names (in bodies,
/// the system line, and init lines), duplicate init lines, and presence of
/// exactly one system line.
pub fn parse_model(src: &str) -> Result<ModelSource, ParseError> {
    let mut p = Parser::new(src)?;
    let mut defs: Vec<AtomDef> = Vec::new();
    let mut system: Option<CompTree> = None;
    let mut inits: Vec<(String, f64)> = Vec::new();
    let mut rho: Option<Rho> = None;

    loop {
        let offset = p.tok_offset;
        match p.tok.clone() {
            Tok::Eof => break,
            Tok::Ident(name) => {
                p.bump()?;
                match name.as_str() {
                    "system" => {
                        p.expect(Tok::Eq, "`=`")?;
                        let tree = p.comp()?;
                        p.expect(Tok::Semi, "`;`")?;
                        if system.replace(tree).is_some() {
                            return Err(err_at(src, offset, "duplicate system line"));
                        }
                    }
                    "init" => {
                        let state = p.ident("a state name")?;
                        p.expect(Tok::Eq, "`=`")?;
                        let v = p.float("a population value")?;
                        p.expect(Tok::Semi, "`;`")?;
                        if !(v >= 0.0) || !v.is_finite() {
                            return Err(err_at(
                                src,
                                offset,
                                format!("initial population must be a finite value >= 0, got {v}"),
                            ));
                        }
                        if inits.iter().any(|(n, _)| *n == state) {
                            return Err(err_at(
                                src,
                                offset,
                                format!("duplicate init for `{state}`"),
                            ));
                        }
                        inits.push((state, v));
                    }
                    "semantics" => {
                        p.expect(Tok::Eq, "`=`")?;
                        let which = p.ident("`min` or `product`")?;
                        p.expect(Tok::Semi, "`;`")?;
                        let parsed: Rho =
                            which.parse().map_err(|e: String| err_at(src, offset, e))?;
                        if rho.replace(parsed).is_some() {
                            return Err(err_at(src, offset, "duplicate semantics line"));
                        }
                    }
                    _ => {
                        p.expect(Tok::Eq, "`=`")?;
                        let body = p.seq()?;
                        p.expect(Tok::Semi, "`;`")?;
                        if defs.iter().any(|d| d.name == name) {
                            return Err(err_at(
                                src,
                                offset,
                                format!("duplicate definition of `{name}`"),
                            ));
                        }
                        defs.push(AtomDef { name, body, offset });
                    }
                }
            }
            _ => return p.error("expected a definition, `system`, `init`, or `semantics` line"),
        }
    }

    let system = match system {
        Some(s) => s,
        None => return Err(err_at(src, src.len(), "missing `system = ...;` line")),
    };

    // Name resolution: every referenced constant must be defined.
    let defined: BTreeSet<&str> = defs.iter().map(|d| d.name.as_str()).collect();
    fn check_body(t: &SeqTerm, defined: &BTreeSet<&str>) -> Result<(), String> {
        match t {
            SeqTerm::Prefix { cont, .. } => check_body(cont, defined),
            SeqTerm::Choice(l, r) => {
                check_body(l, defined)?;
                check_body(r, defined)
            }
            SeqTerm::Constant(n) => {
                if defined.contains(n.as_str()) {
                    Ok(())
                } else {
                    Err(format!("undefined process `{n}`"))
                }
            }
        }
    }
    for d in &defs {
        check_body(&d.body, &defined).map_err(|msg| err_at(src, d.offset, msg))?;
    }
    for leaf in system.leaves() {
        if !defined.contains(leaf) {
            return Err(err_at(
                src,
                src.len(),
                format!("undefined process `{leaf}` in system line"),
            ));
        }
    }
    for (name, _) in &inits {
        if !defined.contains(name.as_str()) {
            return Err(err_at(
                src,
                src.len(),
                format!("init for undefined process `{name}`"),
            ));
        }
    }

    Ok(ModelSource {
        defs,
        system,
        inits,
        rho,
        occ_offsets: p.occ_offsets,
    })
}
