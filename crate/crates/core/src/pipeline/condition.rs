//! Boolean conditions over a statistical result.
//!
//! Grammar (whitespace-insensitive, keywords lowercase):
//!
//! ```text
//! expr  := conj ("or" conj)*
//! conj  := term ("and" term)*
//! term  := field op number | "(" expr ")"
//! field := "p_value" | "mean_a" | "mean_b" | "effect"
//! op    := "<" | "<=" | ">" | ">=" | "==" | "!="
//! ```
//!
//! `effect` is `mean_b - mean_a`. `and` binds tighter than `or`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::stats::StatResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    PValue,
    MeanA,
    MeanB,
    Effect,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::PValue, Field::MeanA, Field::MeanB, Field::Effect];

    pub fn name(self) -> &'static str {
        match self {
            Field::PValue => "p_value",
            Field::MeanA => "mean_a",
            Field::MeanB => "mean_b",
            Field::Effect => "effect",
        }
    }

    pub fn read(self, result: &StatResult) -> f64 {
        match self {
            Field::PValue => result.p_value,
            Field::MeanA => result.mean_a,
            Field::MeanB => result.mean_b,
            Field::Effect => result.mean_b - result.mean_a,
        }
    }
}

/// Comparison operator shared by rule conditions and split conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    pub fn from_symbol(s: &str) -> Option<CmpOp> {
        Some(match s {
            "<" => CmpOp::Lt,
            "<=" => CmpOp::Le,
            ">" => CmpOp::Gt,
            ">=" => CmpOp::Ge,
            "==" => CmpOp::Eq,
            "!=" => CmpOp::Ne,
            _ => return None,
        })
    }

    pub fn holds<T: PartialOrd>(self, lhs: T, rhs: T) -> bool {
        match self {
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
        }
    }

    /// The operator selecting exactly the complement.
    pub fn negate(self) -> CmpOp {
        match self {
            CmpOp::Lt => CmpOp::Ge,
            CmpOp::Le => CmpOp::Gt,
            CmpOp::Gt => CmpOp::Le,
            CmpOp::Ge => CmpOp::Lt,
            CmpOp::Eq => CmpOp::Ne,
            CmpOp::Ne => CmpOp::Eq,
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Cmp { field: Field, op: CmpOp, value: f64 },
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("condition syntax error at offset {offset}: {message}")]
pub struct ConditionError {
    pub offset: usize,
    pub message: String,
}

impl Condition {
    pub fn parse(src: &str) -> Result<Condition, ConditionError> {
        let tokens = tokenize(src)?;
        let mut parser = Parser { tokens: &tokens, pos: 0, len: src.len() };
        let cond = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(ConditionError {
                offset: tok.offset,
                message: format!("unexpected trailing token `{}`", tok.kind),
            });
        }
        Ok(cond)
    }

    pub fn eval(&self, result: &StatResult) -> bool {
        match self {
            Condition::Cmp { field, op, value } => op.holds(field.read(result), *value),
            Condition::And(l, r) => l.eval(result) && r.eval(result),
            Condition::Or(l, r) => l.eval(result) || r.eval(result),
        }
    }

    /// Logical complement, pushed down to the comparisons.
    pub fn negate(&self) -> Condition {
        match self {
            Condition::Cmp { field, op, value } => Condition::Cmp { field: *field, op: op.negate(), value: *value },
            Condition::And(l, r) => Condition::Or(Box::new(l.negate()), Box::new(r.negate())),
            Condition::Or(l, r) => Condition::And(Box::new(l.negate()), Box::new(r.negate())),
        }
    }

    pub fn and(self, other: Condition) -> Condition {
        Condition::And(Box::new(self), Box::new(other))
    }

    pub fn or(self, other: Condition) -> Condition {
        Condition::Or(Box::new(self), Box::new(other))
    }

    /// Disjunctive normal form: a list of conjunctions of comparisons.
    pub fn dnf(&self) -> Vec<Vec<(Field, CmpOp, f64)>> {
        match self {
            Condition::Cmp { field, op, value } => vec![vec![(*field, *op, *value)]],
            Condition::Or(l, r) => {
                let mut out = l.dnf();
                out.extend(r.dnf());
                out
            }
            Condition::And(l, r) => {
                let left = l.dnf();
                let right = r.dnf();
                let mut out = Vec::with_capacity(left.len() * right.len());
                for a in &left {
                    for b in &right {
                        let mut conj = a.clone();
                        conj.extend(b.iter().copied());
                        out.push(conj);
                    }
                }
                out
            }
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Cmp { field, op, value } => write!(f, "{} {} {}", field.name(), op, value),
            Condition::And(l, r) => {
                write_operand(f, l, true)?;
                f.write_str(" and ")?;
                write_operand(f, r, true)
            }
            Condition::Or(l, r) => {
                write_operand(f, l, false)?;
                f.write_str(" or ")?;
                write_operand(f, r, false)
            }
        }
    }
}

fn write_operand(f: &mut fmt::Formatter<'_>, c: &Condition, in_and: bool) -> fmt::Result {
    match c {
        Condition::Or(..) if in_and => write!(f, "({c})"),
        _ => write!(f, "{c}"),
    }
}

impl Serialize for Condition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Condition::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Field(Field),
    Op(CmpOp),
    Number(f64),
    And,
    Or,
    LParen,
    RParen,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Field(x) => f.write_str(x.name()),
            TokenKind::Op(op) => write!(f, "{op}"),
            TokenKind::Number(n) => write!(f, "{n}"),
            TokenKind::And => f.write_str("and"),
            TokenKind::Or => f.write_str("or"),
            TokenKind::LParen => f.write_str("("),
            TokenKind::RParen => f.write_str(")"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ConditionError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            b'(' => {
                i += 1;
                TokenKind::LParen
            }
            b')' => {
                i += 1;
                TokenKind::RParen
            }
            b'<' | b'>' | b'=' | b'!' => {
                let two = bytes.get(i + 1) == Some(&b'=');
                let sym = if two { &src[i..i + 2] } else { &src[i..i + 1] };
                let op = CmpOp::from_symbol(sym)
                    .ok_or_else(|| ConditionError { offset: start, message: format!("unknown operator `{sym}`") })?;
                i += sym.len();
                TokenKind::Op(op)
            }
            b'0'..=b'9' | b'-' | b'+' | b'.' => {
                i += 1;
                while i < bytes.len() {
                    let d = bytes[i];
                    let exp_sign = (d == b'-' || d == b'+') && matches!(bytes[i - 1], b'e' | b'E');
                    if d.is_ascii_digit() || d == b'.' || d == b'e' || d == b'E' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let text = &src[start..i];
                let value: f64 = text
                    .parse()
                    .map_err(|_| ConditionError { offset: start, message: format!("invalid number `{text}`") })?;
                if !value.is_finite() {
                    return Err(ConditionError { offset: start, message: format!("non-finite number `{text}`") });
                }
                TokenKind::Number(value)
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                match &src[start..i] {
                    "and" => TokenKind::And,
                    "or" => TokenKind::Or,
                    "p_value" => TokenKind::Field(Field::PValue),
                    "mean_a" => TokenKind::Field(Field::MeanA),
                    "mean_b" => TokenKind::Field(Field::MeanB),
                    "effect" => TokenKind::Field(Field::Effect),
                    other => {
                        return Err(ConditionError { offset: start, message: format!("unknown identifier `{other}`") })
                    }
                }
            }
            _ => {
                return Err(ConditionError {
                    offset: start,
                    message: format!("unexpected character `{}`", src[start..].chars().next().unwrap_or('?')),
                })
            }
        };
        out.push(Token { kind, offset: start });
    }
    Ok(out)
}

struct Parser<'t> {
    tokens: &'t [Token],
    pos: usize,
    len: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&Token> {
        let tok = self.tokens.get(self.pos);
        self.pos += 1;
        tok
    }

    fn eof_error(&self, expected: &str) -> ConditionError {
        ConditionError { offset: self.len, message: format!("unexpected end of input, expected {expected}") }
    }

    fn expr(&mut self) -> Result<Condition, ConditionError> {
        let mut lhs = self.conj()?;
        while matches!(self.peek(), Some(Token { kind: TokenKind::Or, .. })) {
            self.pos += 1;
            let rhs = self.conj()?;
            lhs = lhs.or(rhs);
        }
        Ok(lhs)
    }

    fn conj(&mut self) -> Result<Condition, ConditionError> {
        let mut lhs = self.term()?;
        while matches!(self.peek(), Some(Token { kind: TokenKind::And, .. })) {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = lhs.and(rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Condition, ConditionError> {
        let tok = self.next().cloned().ok_or_else(|| self.eof_error("a field or `(`"))?;
        match tok.kind {
            TokenKind::LParen => {
                let inner = self.expr()?;
                match self.next().cloned() {
                    Some(Token { kind: TokenKind::RParen, .. }) => Ok(inner),
                    Some(t) => {
                        Err(ConditionError { offset: t.offset, message: format!("expected `)`, found `{}`", t.kind) })
                    }
                    None => Err(self.eof_error("`)`")),
                }
            }
            TokenKind::Field(field) => {
                let op = match self.next().cloned() {
                    Some(Token { kind: TokenKind::Op(op), .. }) => op,
                    Some(t) => {
                        return Err(ConditionError {
                            offset: t.offset,
                            message: format!("expected operator, found `{}`", t.kind),
                        })
                    }
                    None => return Err(self.eof_error("an operator")),
                };
                let value = match self.next().cloned() {
                    Some(Token { kind: TokenKind::Number(v), .. }) => v,
                    Some(t) => {
                        return Err(ConditionError {
                            offset: t.offset,
                            message: format!("expected number, found `{}`", t.kind),
                        })
                    }
                    None => return Err(self.eof_error("a number")),
                };
                Ok(Condition::Cmp { field, op, value })
            }
            other => {
                Err(ConditionError { offset: tok.offset, message: format!("expected a field or `(`, found `{other}`") })
            }
        }
    }
}

/// Whether some `StatResult` satisfies `cond`.
///
/// Decided exactly over the domain `p_value ∈ [0, 1]`, means unbounded, with the
/// coupling `effect = mean_b - mean_a`.
pub fn satisfiable(cond: &Condition) -> bool {
    cond.dnf().iter().any(|conj| conjunction_satisfiable(conj))
}

/// Whether two conditions can hold for the same result.
pub fn overlaps(a: &Condition, b: &Condition) -> bool {
    satisfiable(&a.clone().and(b.clone()))
}

/// Whether every result satisfies at least one of `conds`.
pub fn covers_everything(conds: &[&Condition]) -> bool {
    let mut iter = conds.iter();
    let Some(first) = iter.next() else { return false };
    let union = iter.fold((*first).clone(), |acc, c| acc.or((*c).clone()));
    !satisfiable(&union.negate())
}

#[derive(Debug, Clone, Copy)]
struct Bound {
    value: f64,
    strict: bool,
}

#[derive(Debug, Clone)]
struct Interval {
    lo: Option<Bound>,
    hi: Option<Bound>,
    excluded: Vec<f64>,
}

impl Interval {
    fn unbounded() -> Self {
        Interval { lo: None, hi: None, excluded: Vec::new() }
    }

    fn tighten_lo(&mut self, value: f64, strict: bool) {
        let replace = match self.lo {
            None => true,
            Some(b) => value > b.value || (value == b.value && strict && !b.strict),
        };
        if replace {
            self.lo = Some(Bound { value, strict });
        }
    }

    fn tighten_hi(&mut self, value: f64, strict: bool) {
        let replace = match self.hi {
            None => true,
            Some(b) => value < b.value || (value == b.value && strict && !b.strict),
        };
        if replace {
            self.hi = Some(Bound { value, strict });
        }
    }

    fn apply(&mut self, op: CmpOp, v: f64) {
        match op {
            CmpOp::Lt => self.tighten_hi(v, true),
            CmpOp::Le => self.tighten_hi(v, false),
            CmpOp::Gt => self.tighten_lo(v, true),
            CmpOp::Ge => self.tighten_lo(v, false),
            CmpOp::Eq => {
                self.tighten_lo(v, false);
                self.tighten_hi(v, false);
            }
            CmpOp::Ne => self.excluded.push(v),
        }
    }

    /// Non-empty after removing the excluded points. A non-degenerate real
    /// interval minus finitely many points is never empty.
    fn nonempty(&self) -> bool {
        match (self.lo, self.hi) {
            (Some(l), Some(h)) => {
                if l.value > h.value {
                    false
                } else if l.value == h.value {
                    !l.strict && !h.strict && !self.excluded.contains(&l.value)
                } else {
                    true
                }
            }
            _ => true,
        }
    }
}

fn conjunction_satisfiable(conj: &[(Field, CmpOp, f64)]) -> bool {
    let mut p = Interval::unbounded();
    p.tighten_lo(0.0, false);
    p.tighten_hi(1.0, false);
    for &(field, op, v) in conj {
        if field == Field::PValue {
            p.apply(op, v);
        }
    }
    if !p.nonempty() {
        return false;
    }
    // The means and the effect are coupled by effect = mean_b - mean_a. Every
    // constraint is a line a = c, b = c or b - a = c in the (mean_a, mean_b)
    // plane, so probing each face of that line arrangement is exact: vertex
    // abscissae, midpoints between them, and the breakpoints along each probe.
    let mut a_consts = Vec::new();
    let mut b_consts = Vec::new();
    let mut e_consts = Vec::new();
    for &(field, _, v) in conj {
        match field {
            Field::MeanA => a_consts.push(v),
            Field::MeanB => b_consts.push(v),
            Field::Effect => e_consts.push(v),
            Field::PValue => {}
        }
    }
    let holds = |a: f64, b: f64| {
        conj.iter().all(|&(field, op, v)| match field {
            Field::PValue => true,
            Field::MeanA => op.holds(a, v),
            Field::MeanB => op.holds(b, v),
            Field::Effect => op.holds(b - a, v),
        })
    };
    let mut xs = a_consts.clone();
    for &b in &b_consts {
        for &e in &e_consts {
            xs.push(b - e);
        }
    }
    for a in probes(xs) {
        let mut ys = b_consts.clone();
        ys.extend(e_consts.iter().map(|e| a + e));
        if probes(ys).into_iter().any(|b| holds(a, b)) {
            return true;
        }
    }
    false
}

/// Breakpoints, the midpoints between consecutive ones, and one point beyond
/// each end.
fn probes(mut points: Vec<f64>) -> Vec<f64> {
    points.sort_by(f64::total_cmp);
    points.dedup();
    if points.is_empty() {
        return vec![0.0];
    }
    let mut out = Vec::with_capacity(points.len() * 2 + 1);
    out.push(points[0] - 1.0);
    for w in points.windows(2) {
        out.push(w[0]);
        out.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    out.push(points[points.len() - 1]);
    out.push(points[points.len() - 1] + 1.0);
    out
}
