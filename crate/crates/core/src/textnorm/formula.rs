//! Recursive-descent parser and canonical printer for the math formulas found
//! between `$...$` delimiters.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! relation := sum (('=' | '<' | '>') sum)*
//! sum      := product (('+' | '-') product)*
//! product  := signed (('*' | '/' | '\cdot' | '\times' | '\div') signed | implicit)*
//! implicit := power            -- only when the next token is not a number
//! signed   := ('-' | '+') signed | power
//! power    := primary ('^' exponent)?
//! exponent := '-' exponent | power
//! primary  := number | letter | func '(' relation ')' | '(' relation ')' | '{' relation '}'
//!           | '\frac' '{' relation '}' '{' relation '}' | '\sqrt' group | '\sin' arg | ...
//! ```
//!
//! The canonical form parenthesizes every operation and separates tokens with
//! single spaces, e.g. `\frac{x}{2}` prints as `( x / 2 )`. Parentheses and
//! braces in the input only shape the tree; they are not kept as nodes, so
//! printing then re-parsing yields the same tree.
//!
//! No algebraic rewriting happens: `x+1` and `1+x` stay distinct.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sqrt,
    Sin,
    Cos,
    Log,
}

impl Func {
    const ALL: [Func; 4] = [Func::Sqrt, Func::Sin, Func::Cos, Func::Log];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Log => "log",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Eq,
    Lt,
    Gt,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Eq => "=",
            BinOp::Lt => "<",
            BinOp::Gt => ">",
        }
    }
}

/// Parsed formula. Division in any spelling is a [`Formula::Fraction`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    Number(String),
    Symbol(char),
    Neg(Box<Formula>),
    Binary {
        op: BinOp,
        lhs: Box<Formula>,
        rhs: Box<Formula>,
    },
    Fraction {
        num: Box<Formula>,
        den: Box<Formula>,
    },
    Power {
        base: Box<Formula>,
        exponent: Box<Formula>,
    },
    Apply {
        func: Func,
        arg: Box<Formula>,
    },
}

impl Formula {
    pub fn parse(src: &str) -> Result<Self, ParseError> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let f = p.relation()?;
        match p.peek() {
            None => Ok(f),
            Some(t) => Err(p.error(format!("unexpected {t:?}"))),
        }
    }

    /// Canonical spaced serialization.
    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Number(n) => f.write_str(n),
            Formula::Symbol(c) => write!(f, "{c}"),
            Formula::Neg(x) => write!(f, "( - {x} )"),
            Formula::Binary { op, lhs, rhs } => write!(f, "( {lhs} {} {rhs} )", op.symbol()),
            Formula::Fraction { num, den } => write!(f, "( {num} / {den} )"),
            Formula::Power { base, exponent } => write!(f, "( {base} ^ {exponent} )"),
            Formula::Apply { func, arg } => write!(f, "{} ( {arg} )", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "token {}: {}", self.position, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(String),
    Letter(char),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    Eq,
    Lt,
    Gt,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Frac,
    Func(Func),
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |i: usize, m: String| ParseError {
        position: i,
        message: m,
    };
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '0'..='9' => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if i < chars.len() && chars[i] == '.' {
                    if i + 1 < chars.len() && chars[i + 1].is_ascii_digit() {
                        i += 1;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    } else {
                        return Err(err(i, "dangling decimal point".into()));
                    }
                }
                out.push(Token::Number(chars[start..i].iter().collect()));
            }
            c if c.is_ascii_alphabetic() => {
                out.push(Token::Letter(c.to_ascii_lowercase()));
                i += 1;
            }
            '\\' => {
                let start = i + 1;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_alphabetic() {
                    i += 1;
                }
                let name: String = chars[start..i].iter().collect();
                out.push(match name.as_str() {
                    "frac" | "dfrac" | "tfrac" => Token::Frac,
                    "cdot" | "times" => Token::Star,
                    "div" => Token::Slash,
                    other => match Func::from_name(other) {
                        Some(f) => Token::Func(f),
                        None => return Err(err(start - 1, format!("unknown command \\{other}"))),
                    },
                });
            }
            _ => {
                out.push(match c {
                    '+' => Token::Plus,
                    '-' | '\u{2212}' => Token::Minus,
                    '*' | '\u{00d7}' => Token::Star,
                    '/' | '\u{00f7}' => Token::Slash,
                    '^' => Token::Caret,
                    '=' => Token::Eq,
                    '<' => Token::Lt,
                    '>' => Token::Gt,
                    '(' => Token::LParen,
                    ')' => Token::RParen,
                    '{' => Token::LBrace,
                    '}' => Token::RBrace,
                    other => return Err(err(i, format!("unexpected character {other:?}"))),
                });
                i += 1;
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

type PResult = Result<Formula, ParseError>;

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat(&mut self, t: &Token) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: &Token) -> Result<(), ParseError> {
        if self.eat(t) {
            Ok(())
        } else {
            Err(self.error(format!("expected {t:?}, found {:?}", self.peek())))
        }
    }

    fn error(&self, message: String) -> ParseError {
        ParseError {
            position: self.pos,
            message,
        }
    }

    fn relation(&mut self) -> PResult {
        let mut lhs = self.sum()?;
        loop {
            let op = match self.peek() {
                Some(Token::Eq) => BinOp::Eq,
                Some(Token::Lt) => BinOp::Lt,
                Some(Token::Gt) => BinOp::Gt,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.sum()?;
            lhs = binary(op, lhs, rhs);
        }
    }

    fn sum(&mut self) -> PResult {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Some(Token::Plus) => BinOp::Add,
                Some(Token::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.product()?;
            lhs = binary(op, lhs, rhs);
        }
    }

    fn product(&mut self) -> PResult {
        let mut lhs = self.signed()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    let rhs = self.signed()?;
                    lhs = binary(BinOp::Mul, lhs, rhs);
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    let den = self.signed()?;
                    lhs = Formula::Fraction {
                        num: Box::new(lhs),
                        den: Box::new(den),
                    };
                }
                // Juxtaposition: `2m`, `2(x+1)`, `x\sqrt{y}`. A number never
                // starts an implicit factor, so `2 3` is rejected.
                Some(
                    Token::Letter(_) | Token::LParen | Token::LBrace | Token::Frac | Token::Func(_),
                ) => {
                    let rhs = self.power()?;
                    lhs = binary(BinOp::Mul, lhs, rhs);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn signed(&mut self) -> PResult {
        if self.eat(&Token::Minus) {
            return Ok(Formula::Neg(Box::new(self.signed()?)));
        }
        if self.eat(&Token::Plus) {
            return self.signed();
        }
        self.power()
    }

    fn power(&mut self) -> PResult {
        let base = self.primary()?;
        if self.eat(&Token::Caret) {
            let exponent = self.exponent()?;
            return Ok(Formula::Power {
                base: Box::new(base),
                exponent: Box::new(exponent),
            });
        }
        Ok(base)
    }

    fn exponent(&mut self) -> PResult {
        if self.eat(&Token::Minus) {
            return Ok(Formula::Neg(Box::new(self.exponent()?)));
        }
        self.power()
    }

    fn group(&mut self, open: Token, close: Token) -> PResult {
        self.expect(&open)?;
        let inner = self.relation()?;
        self.expect(&close)?;
        Ok(inner)
    }

    fn primary(&mut self) -> PResult {
        if let Some(f) = self.bare_function() {
            let arg = self.group(Token::LParen, Token::RParen)?;
            return Ok(apply(f, arg));
        }
        match self.bump() {
            Some(Token::Number(n)) => Ok(Formula::Number(n)),
            Some(Token::Letter(c)) => Ok(Formula::Symbol(c)),
            Some(Token::LParen) => {
                self.pos -= 1;
                self.group(Token::LParen, Token::RParen)
            }
            Some(Token::LBrace) => {
                self.pos -= 1;
                self.group(Token::LBrace, Token::RBrace)
            }
            Some(Token::Frac) => {
                let num = self.group(Token::LBrace, Token::RBrace)?;
                let den = self.group(Token::LBrace, Token::RBrace)?;
                Ok(Formula::Fraction {
                    num: Box::new(num),
                    den: Box::new(den),
                })
            }
            Some(Token::Func(f)) => {
                let arg = match self.peek() {
                    Some(Token::LBrace) => self.group(Token::LBrace, Token::RBrace)?,
                    Some(Token::LParen) => self.group(Token::LParen, Token::RParen)?,
                    _ => self.power()?,
                };
                Ok(apply(f, arg))
            }
            Some(t) => {
                self.pos -= 1;
                Err(self.error(format!("unexpected {t:?}")))
            }
            None => Err(self.error("unexpected end of formula".into())),
        }
    }

    /// A run of letters spelling a function name directly followed by `(`.
    fn bare_function(&mut self) -> Option<Func> {
        for f in Func::ALL {
            let name = f.name();
            let n = name.len();
            let spelled = name.chars().enumerate().all(
                |(k, c)| matches!(self.tokens.get(self.pos + k), Some(Token::Letter(l)) if *l == c),
            );
            if spelled && self.tokens.get(self.pos + n) == Some(&Token::LParen) {
                self.pos += n;
                return Some(f);
            }
        }
        None
    }
}

fn binary(op: BinOp, lhs: Formula, rhs: Formula) -> Formula {
    Formula::Binary {
        op,
        lhs: Box::new(lhs),
        rhs: Box::new(rhs),
    }
}

fn apply(func: Func, arg: Formula) -> Formula {
    Formula::Apply {
        func,
        arg: Box::new(arg),
    }
}

/// Result of [`normalize_formula`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedFormula {
    pub text: String,
    /// Set when the source did not parse and was split into characters instead.
    pub fallback: bool,
}

/// Canonicalizes a formula, falling back to space-separated characters when it
/// does not parse. Idempotent on both paths.
pub fn normalize_formula(src: &str) -> NormalizedFormula {
    match Formula::parse(src) {
        Ok(f) => NormalizedFormula {
            text: f.canonical(),
            fallback: false,
        },
        Err(e) => {
            log::debug!("formula {src:?} fell back to characters: {e}");
            let chars: Vec<String> = src
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect();
            NormalizedFormula {
                text: chars.join(" "),
                fallback: true,
            }
        }
    }
}
