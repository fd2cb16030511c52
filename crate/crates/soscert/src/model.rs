//! Hybrid automaton data model and the text format parser.
//!
//! A system is a finite set of locations, each with polynomial dynamics
//! `x' = f_l(x)`, a location invariant (the region where the flow may
//! evolve), and optionally an unsafe region; discrete transitions carry a
//! guard over `x` and a reset relation over `(x, x')`.
//!
//! The input format is line-oriented:
//!
//! ```text
//! system damped_cubic;
//! vars x1 x2;
//! init 1/4 - (x1 - 3/2)^2 - x2^2 >= 0;
//! location l0 {
//!   flow x1' = x2;
//!   flow x2' = -x1 + 1/3*x1^3 - x2;
//!   inv true;
//!   unsafe 4/25 - (x1 + 1)^2 - (x2 + 1)^2 >= 0;
//! }
//! transition l0 -> l1 { guard x1 >= 1; reset x1' = x1; reset x2' = 0; }
//! ```
//!
//! Conjunctions are written with `&&`; atoms `p >= q`, `p <= q`, `p = q` are
//! normalized to `p - q >= 0` / `q - p >= 0` / `p - q = 0`. Strict
//! inequalities are rejected: conditions' strictness is carried by the
//! encoder's slack constants, never by the input sets. Decimal literals are
//! exact (`0.16` becomes `4/25`). The first `location` block is the initial
//! location.

use crate::polyalg::{Poly, Rat, VectorField};
use num_traits::{One, Signed, Zero};
use std::collections::BTreeSet;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}, col {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("non-polynomial expression: {0}")]
    NonPolynomial(String),
    #[error("unknown location `{0}`")]
    UnknownLocation(String),
    #[error("{0}")]
    Structure(String),
}

/// Conjunction of polynomial constraints: every `conjuncts` entry is
/// `p(x) >= 0`, every `equalities` entry is `p(x) = 0`. Both lists empty
/// means the whole space.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SemialgebraicSet {
    pub conjuncts: Vec<Poly<Rat>>,
    pub equalities: Vec<Poly<Rat>>,
}

impl SemialgebraicSet {
    pub fn whole_space() -> Self {
        SemialgebraicSet::default()
    }

    pub fn is_whole_space(&self) -> bool {
        self.conjuncts.is_empty() && self.equalities.is_empty()
    }

    /// Exact membership test.
    pub fn contains(&self, point: &[Rat]) -> bool {
        self.conjuncts
            .iter()
            .all(|p| !p.eval_exact(point).is_negative())
            && self
                .equalities
                .iter()
                .all(|p| p.eval_exact(point).is_zero())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub pre: String,
    pub post: String,
    /// Guard over the `n` system variables.
    pub guard: SemialgebraicSet,
    /// Reset relation over `2n` variables `(x, x')`; assignments
    /// `xi' = p(x)` are stored as equalities `xi' - p(x) = 0`.
    pub reset: SemialgebraicSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Location {
    pub id: String,
    pub flow: VectorField<Rat>,
    pub inv: SemialgebraicSet,
    /// Unsafe regions attached to this location. A disjunctive unsafe set
    /// (a union of pieces) is stored as one entry per piece; the driver
    /// verifies each piece separately.
    pub unsafe_regions: Vec<SemialgebraicSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridSystem {
    pub name: String,
    pub vars: Vec<String>,
    pub init: SemialgebraicSet,
    pub locations: Vec<Location>,
    pub transitions: Vec<Transition>,
    /// Index into `locations` of the initial location (the first block).
    pub init_loc: usize,
}

impl HybridSystem {
    pub fn nvars(&self) -> usize {
        self.vars.len()
    }

    pub fn location(&self, id: &str) -> Option<&Location> {
        self.locations.iter().find(|l| l.id == id)
    }

    pub fn location_index(&self, id: &str) -> Option<usize> {
        self.locations.iter().position(|l| l.id == id)
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number(Rat),
    Sym(&'static str),
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
    toks: Vec<(Tok, usize, usize)>,
}

impl<'a> Lexer<'a> {
    fn run(src: &'a str) -> Result<Vec<(Tok, usize, usize)>, ParseError> {
        let mut lx = Lexer { src: src.as_bytes(), pos: 0, line: 1, col: 1, toks: Vec::new() };
        lx.lex()?;
        Ok(lx.toks)
    }

    fn bump(&mut self) -> u8 {
        let c = self.src[self.pos];
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        c
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError::Syntax { line: self.line, col: self.col, msg: msg.into() }
    }

    fn lex(&mut self) -> Result<(), ParseError> {
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let (line, col) = (self.line, self.col);
            match c {
                b' ' | b'\t' | b'\r' | b'\n' => {
                    self.bump();
                }
                b'#' => {
                    while self.pos < self.src.len() && self.src[self.pos] != b'\n' {
                        self.bump();
                    }
                }
                b'0'..=b'9' => {
                    let r = self.number()?;
                    self.toks.push((Tok::Number(r), line, col));
                }
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                    let mut s = String::new();
                    while self.pos < self.src.len() {
                        let c = self.src[self.pos];
                        if c.is_ascii_alphanumeric() || c == b'_' {
                            s.push(self.bump() as char);
                        } else {
                            break;
                        }
                    }
                    self.toks.push((Tok::Ident(s), line, col));
                }
                _ => {
                    let sym = self.symbol()?;
                    self.toks.push((Tok::Sym(sym), line, col));
                }
            }
        }
        Ok(())
    }

    fn number(&mut self) -> Result<Rat, ParseError> {
        let mut int_part = String::new();
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            int_part.push(self.bump() as char);
        }
        let mut frac_part = String::new();
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.bump();
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                frac_part.push(self.bump() as char);
            }
            if frac_part.is_empty() {
                return Err(self.err("digits expected after decimal point"));
            }
        }
        // Decimal literals become exact rationals: 0.16 = 16/100 = 4/25.
        let digits = format!("{int_part}{frac_part}");
        let num: num_bigint::BigInt = digits
            .parse()
            .map_err(|_| self.err("malformed number"))?;
        let den = num_bigint::BigInt::from(10u32).pow(frac_part.len() as u32);
        Ok(Rat::new(num, den))
    }

    fn symbol(&mut self) -> Result<&'static str, ParseError> {
        let two = |a: u8, b: u8| -> bool {
            self.pos + 1 < self.src.len() && self.src[self.pos] == a && self.src[self.pos + 1] == b
        };
        for (a, b, s) in [
            (b'&', b'&', "&&"),
            (b'>', b'=', ">="),
            (b'<', b'=', "<="),
            (b'=', b'=', "=="),
            (b'-', b'>', "->"),
        ] {
            if two(a, b) {
                self.bump();
                self.bump();
                return Ok(s);
            }
        }
        let c = self.src[self.pos];
        let s = match c {
            b';' => ";",
            b'{' => "{",
            b'}' => "}",
            b'(' => "(",
            b')' => ")",
            b'+' => "+",
            b'-' => "-",
            b'*' => "*",
            b'/' => "/",
            b'^' => "^",
            b'=' => "=",
            b'\'' => "'",
            b'>' => return Err(self.err("strict inequalities are not accepted; use >=")),
            b'<' => return Err(self.err("strict inequalities are not accepted; use <=")),
            _ => return Err(self.err(format!("unexpected character `{}`", c as char))),
        };
        self.bump();
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
    vars: Vec<String>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _, _)| t)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn here(&self) -> (usize, usize) {
        self.toks
            .get(self.pos.min(self.toks.len().saturating_sub(1)))
            .map(|&(_, l, c)| (l, c))
            .unwrap_or((0, 0))
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError::Syntax { line, col, msg: msg.into() }
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), ParseError> {
        match self.next() {
            Some(Tok::Sym(t)) if t == s => Ok(()),
            other => Err(self.err(format!("expected `{s}`, found {other:?}"))),
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            other => Err(self.err(format!("expected identifier, found {other:?}"))),
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.next() {
            Some(Tok::Ident(s)) if s == kw => Ok(()),
            other => Err(self.err(format!("expected `{kw}`, found {other:?}"))),
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(s)) if s == kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(t)) if *t == s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    /// Variable index: plain name in `0..n`, primed name in `n..2n` when
    /// `primed_ok`. Returns `None` for unknown identifiers.
    fn var_index(&self, name: &str, primed: bool, primed_ok: bool) -> Option<usize> {
        let i = self.vars.iter().position(|v| v == name)?;
        if primed {
            if !primed_ok {
                return None;
            }
            Some(self.vars.len() + i)
        } else {
            Some(i)
        }
    }

    // Expression grammar: expr := term (('+'|'-') term)*;
    // term := factor (('*'|'/') factor)*; factor := atom ('^' int)?;
    // atom := number | var ['] | '(' expr ')' | '-' factor.
    fn poly(&mut self, primed_ok: bool) -> Result<Poly<Rat>, ParseError> {
        let nv = if primed_ok { 2 * self.vars.len() } else { self.vars.len() };
        let mut acc = self.term(primed_ok)?;
        loop {
            if self.eat_sym("+") {
                acc = acc.add(&self.term(primed_ok)?);
            } else if self.eat_sym("-") {
                acc = acc.sub(&self.term(primed_ok)?);
            } else {
                break;
            }
        }
        debug_assert_eq!(acc.nvars(), nv);
        Ok(acc)
    }

    fn term(&mut self, primed_ok: bool) -> Result<Poly<Rat>, ParseError> {
        let mut acc = self.factor(primed_ok)?;
        loop {
            if self.eat_sym("*") {
                acc = acc.mul(&self.factor(primed_ok)?);
            } else if self.eat_sym("/") {
                let d = self.factor(primed_ok)?;
                // Division is constant folding only; dividing by a
                // non-constant polynomial is not a polynomial.
                if d.degree() != 0 || d.is_zero() {
                    return Err(ParseError::NonPolynomial(
                        "division by a non-constant polynomial".into(),
                    ));
                }
                let c = d.eval_exact(&vec![Rat::zero(); d.nvars()]);
                acc = acc.scale(&(Rat::one() / c));
            } else {
                break;
            }
        }
        Ok(acc)
    }

    fn factor(&mut self, primed_ok: bool) -> Result<Poly<Rat>, ParseError> {
        let base = self.atom(primed_ok)?;
        if self.eat_sym("^") {
            match self.next() {
                Some(Tok::Number(r)) if r.is_integer() && !r.is_negative() => {
                    let e: u32 = r
                        .to_integer()
                        .try_into()
                        .map_err(|_| self.err("exponent too large"))?;
                    let mut acc = Poly::constant(base.nvars(), Rat::one());
                    for _ in 0..e {
                        acc = acc.mul(&base);
                    }
                    Ok(acc)
                }
                _ => Err(ParseError::NonPolynomial(
                    "exponent must be a non-negative integer".into(),
                )),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self, primed_ok: bool) -> Result<Poly<Rat>, ParseError> {
        let nv = if primed_ok { 2 * self.vars.len() } else { self.vars.len() };
        match self.next() {
            Some(Tok::Number(r)) => Ok(Poly::constant(nv, r)),
            Some(Tok::Ident(name)) => {
                if self.peek() == Some(&Tok::Sym("(")) {
                    return Err(ParseError::NonPolynomial(format!(
                        "`{name}(…)` — function applications are not polynomial"
                    )));
                }
                let primed = self.eat_sym("'");
                match self.var_index(&name, primed, primed_ok) {
                    Some(i) => Ok(Poly::var(nv, i)),
                    None => Err(ParseError::UnknownVariable(if primed {
                        format!("{name}'")
                    } else {
                        name
                    })),
                }
            }
            Some(Tok::Sym("(")) => {
                let inner = self.poly(primed_ok)?;
                self.expect_sym(")")?;
                Ok(inner)
            }
            Some(Tok::Sym("-")) => Ok(self.factor(primed_ok)?.neg()),
            other => Err(self.err(format!("expected a polynomial atom, found {other:?}"))),
        }
    }

    /// `<conj> ::= true | atom ("&&" atom)*` with
    /// `atom ::= poly (>=|<=|=|==) poly`, normalized to `p >= 0` / `p = 0`.
    fn conjunction(&mut self, primed_ok: bool) -> Result<SemialgebraicSet, ParseError> {
        if self.eat_keyword("true") {
            return Ok(SemialgebraicSet::whole_space());
        }
        let mut set = SemialgebraicSet::default();
        loop {
            let lhs = self.poly(primed_ok)?;
            let op = match self.next() {
                Some(Tok::Sym(s)) if s == ">=" || s == "<=" || s == "=" || s == "==" => s,
                other => {
                    return Err(self.err(format!(
                        "expected comparison (>=, <=, =), found {other:?}"
                    )))
                }
            };
            let rhs = self.poly(primed_ok)?;
            match op {
                ">=" => set.conjuncts.push(lhs.sub(&rhs)),
                "<=" => set.conjuncts.push(rhs.sub(&lhs)),
                _ => set.equalities.push(lhs.sub(&rhs)),
            }
            if !self.eat_sym("&&") {
                break;
            }
        }
        Ok(set)
    }
}

/// Parse a model source text into a [`HybridSystem`].
pub fn parse_system(text: &str) -> Result<HybridSystem, ParseError> {
    let toks = Lexer::run(text)?;
    let mut p = Parser { toks, pos: 0, vars: Vec::new() };

    p.expect_keyword("system")?;
    let name = p.expect_ident()?;
    p.expect_sym(";")?;

    p.expect_keyword("vars")?;
    let mut vars = Vec::new();
    loop {
        match p.peek() {
            Some(Tok::Ident(_)) => vars.push(p.expect_ident()?),
            _ => break,
        }
    }
    p.expect_sym(";")?;
    if vars.is_empty() {
        return Err(p.err("at least one variable required"));
    }
    {
        let mut seen = BTreeSet::new();
        for v in &vars {
            if !seen.insert(v.clone()) {
                return Err(ParseError::Structure(format!("duplicate variable `{v}`")));
            }
        }
    }
    p.vars = vars.clone();
    let n = vars.len();

    p.expect_keyword("init")?;
    let init = p.conjunction(false)?;
    p.expect_sym(";")?;

    let mut locations: Vec<Location> = Vec::new();
    let mut transitions: Vec<Transition> = Vec::new();

    loop {
        if p.eat_keyword("location") {
            let id = p.expect_ident()?;
            if locations.iter().any(|l| l.id == id) {
                return Err(ParseError::Structure(format!("duplicate location `{id}`")));
            }
            p.expect_sym("{")?;
            let mut flow: Vec<Option<Poly<Rat>>> = vec![None; n];
            let mut inv = SemialgebraicSet::whole_space();
            let mut unsafe_regions = Vec::new();
            loop {
                if p.eat_sym("}") {
                    break;
                }
                if p.eat_keyword("flow") {
                    let v = p.expect_ident()?;
                    p.expect_sym("'")?;
                    p.expect_sym("=")?;
                    let rhs = p.poly(false)?;
                    p.expect_sym(";")?;
                    let i = vars
                        .iter()
                        .position(|w| *w == v)
                        .ok_or(ParseError::UnknownVariable(v))?;
                    if flow[i].is_some() {
                        return Err(ParseError::Structure(format!(
                            "location `{id}`: duplicate flow for `{}`",
                            vars[i]
                        )));
                    }
                    flow[i] = Some(rhs);
                } else if p.eat_keyword("inv") {
                    inv = p.conjunction(false)?;
                    p.expect_sym(";")?;
                } else if p.eat_keyword("unsafe") {
                    unsafe_regions.push(p.conjunction(false)?);
                    p.expect_sym(";")?;
                } else {
                    return Err(p.err("expected `flow`, `inv`, `unsafe`, or `}`"));
                }
            }
            let flow: Vec<Poly<Rat>> = flow
                .into_iter()
                .enumerate()
                .map(|(i, f)| {
                    f.ok_or_else(|| {
                        ParseError::Structure(format!(
                            "location `{id}`: missing flow for `{}`",
                            vars[i]
                        ))
                    })
                })
                .collect::<Result<_, _>>()?;
            locations.push(Location {
                id,
                flow: VectorField::new(flow),
                inv,
                unsafe_regions,
            });
        } else if p.eat_keyword("transition") {
            let pre = p.expect_ident()?;
            p.expect_sym("->")?;
            let post = p.expect_ident()?;
            p.expect_sym("{")?;
            let mut guard = SemialgebraicSet::whole_space();
            let mut reset = SemialgebraicSet::whole_space();
            loop {
                if p.eat_sym("}") {
                    break;
                }
                if p.eat_keyword("guard") {
                    guard = p.conjunction(false)?;
                    p.expect_sym(";")?;
                } else if p.eat_keyword("reset") {
                    // Either an assignment `xi' = poly` or a general atom
                    // over (x, x').
                    let before = p.pos;
                    if let Some(Tok::Ident(v)) = p.peek().cloned() {
                        p.pos += 1;
                        if p.eat_sym("'") && p.eat_sym("=") {
                            let rhs = p.poly(true)?;
                            p.expect_sym(";")?;
                            let i = vars
                                .iter()
                                .position(|w| *w == v)
                                .ok_or(ParseError::UnknownVariable(v))?;
                            let lhs = Poly::var(2 * n, n + i);
                            reset.equalities.push(lhs.sub(&rhs));
                            continue;
                        }
                        p.pos = before;
                    }
                    let atoms = p.conjunction(true)?;
                    p.expect_sym(";")?;
                    reset.conjuncts.extend(atoms.conjuncts);
                    reset.equalities.extend(atoms.equalities);
                } else {
                    return Err(p.err("expected `guard`, `reset`, or `}`"));
                }
            }
            transitions.push(Transition { pre, post, guard, reset });
        } else if p.peek().is_none() {
            break;
        } else {
            return Err(p.err("expected `location`, `transition`, or end of file"));
        }
    }

    if locations.is_empty() {
        return Err(ParseError::Structure("at least one location required".into()));
    }
    for t in &transitions {
        for id in [&t.pre, &t.post] {
            if !locations.iter().any(|l| l.id == *id) {
                return Err(ParseError::UnknownLocation(id.clone()));
            }
        }
    }

    Ok(HybridSystem {
        name,
        vars,
        init,
        locations,
        transitions,
        init_loc: 0,
    })
}

/// Parse a single polynomial expression over the given variables (the
/// inverse of [`crate::polyalg::render_poly`] on the same name list).
pub fn parse_poly(text: &str, vars: &[String]) -> Result<Poly<Rat>, ParseError> {
    let toks = Lexer::run(text)?;
    let mut p = Parser { toks, pos: 0, vars: vars.to_vec() };
    let poly = p.poly(false)?;
    if p.peek().is_some() {
        return Err(p.err("trailing input after polynomial"));
    }
    Ok(poly)
}

// ---------------------------------------------------------------------------
// Rendering (inverse of the parser, canonical form)
// ---------------------------------------------------------------------------

fn render_conj(set: &SemialgebraicSet, vars: &[String], primed: bool) -> String {
    if set.is_whole_space() {
        return "true".to_string();
    }
    let names: Vec<String> = if primed {
        vars.iter()
            .cloned()
            .chain(vars.iter().map(|v| format!("{v}'")))
            .collect()
    } else {
        vars.to_vec()
    };
    let mut atoms = Vec::new();
    for c in &set.conjuncts {
        atoms.push(format!("{} >= 0", crate::polyalg::render_poly(c, &names)));
    }
    for e in &set.equalities {
        atoms.push(format!("{} = 0", crate::polyalg::render_poly(e, &names)));
    }
    atoms.join(" && ")
}

/// Render a system in the input format; `parse_system(render_system(h)) == h`.
pub fn render_system(h: &HybridSystem) -> String {
    let mut out = String::new();
    writeln!(out, "system {};", h.name).unwrap();
    writeln!(out, "vars {};", h.vars.join(" ")).unwrap();
    writeln!(out, "init {};", render_conj(&h.init, &h.vars, false)).unwrap();
    for l in &h.locations {
        writeln!(out, "location {} {{", l.id).unwrap();
        for (i, f) in l.flow.components.iter().enumerate() {
            writeln!(
                out,
                "  flow {}' = {};",
                h.vars[i],
                crate::polyalg::render_poly(f, &h.vars)
            )
            .unwrap();
        }
        writeln!(out, "  inv {};", render_conj(&l.inv, &h.vars, false)).unwrap();
        for u in &l.unsafe_regions {
            writeln!(out, "  unsafe {};", render_conj(u, &h.vars, false)).unwrap();
        }
        writeln!(out, "}}").unwrap();
    }
    for t in &h.transitions {
        writeln!(out, "transition {} -> {} {{", t.pre, t.post).unwrap();
        writeln!(out, "  guard {};", render_conj(&t.guard, &h.vars, false)).unwrap();
        if !t.reset.is_whole_space() {
            writeln!(out, "  reset {};", render_conj(&t.reset, &h.vars, true)).unwrap();
        }
        writeln!(out, "}}").unwrap();
    }
    out
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

/// Structural checks plus a sampled semantic check that the initial set lies
/// inside the initial location's invariant (reported as a warning — sampling
/// proves presence of a violation, never absence).
pub fn validate_system(h: &HybridSystem, seed: u64) -> Vec<Diagnostic> {
    use rand::{Rng, SeedableRng};
    let mut out = Vec::new();
    let n = h.nvars();
    for l in &h.locations {
        if l.flow.nvars() != n {
            out.push(Diagnostic {
                severity: Severity::Error,
                message: format!("location `{}`: flow dimension mismatch", l.id),
            });
        }
        for p in l
            .inv
            .conjuncts
            .iter()
            .chain(&l.inv.equalities)
            .chain(l.unsafe_regions.iter().flat_map(|u| u.conjuncts.iter().chain(&u.equalities)))
        {
            if p.nvars() != n {
                out.push(Diagnostic {
                    severity: Severity::Error,
                    message: format!("location `{}`: constraint dimension mismatch", l.id),
                });
            }
        }
    }
    if h.init_loc >= h.locations.len() {
        out.push(Diagnostic {
            severity: Severity::Error,
            message: "initial location out of range".into(),
        });
        return out;
    }

    // Sampled check of init ⊆ inv(l0): rejection-sample rational points from
    // a box and test exact membership.
    let inv = &h.locations[h.init_loc].inv;
    if !inv.is_whole_space() && !h.init.is_whole_space() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut tested = 0;
        for _ in 0..20_000 {
            if tested >= 256 {
                break;
            }
            let pt: Vec<Rat> = (0..n)
                .map(|_| Rat::new(rng.gen_range(-4096i64..=4096).into(), 1024.into()))
                .collect();
            if h.init.contains(&pt) {
                tested += 1;
                if !inv.contains(&pt) {
                    out.push(Diagnostic {
                        severity: Severity::Warning,
                        message: format!(
                            "sampled point of the initial set violates the initial location's invariant at ({})",
                            pt.iter().map(crate::polyalg::render_rat).collect::<Vec<_>>().join(", ")
                        ),
                    });
                    break;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyalg::rat;

    const EXAMPLE_DAMPED: &str = "\
system damped_cubic;
vars x1 x2;
init 0.25 - (x1 - 1.5)^2 - x2^2 >= 0;
location l0 {
  flow x1' = x2;
  flow x2' = -x1 + 1/3*x1^3 - x2;
  inv true;
  unsafe 0.16 - (x1 + 1)^2 - (x2 + 1)^2 >= 0;
}
";

    #[test]
    fn single_polynomials_round_trip_through_text() {
        let vars: Vec<String> = vec!["x1".into(), "x2".into()];
        for src in ["-59/50 + 3*x1 - x1^2*x2", "0", "x2^3 - 1/3*x1*x2 + 7"] {
            let p = parse_poly(src, &vars).unwrap();
            let rendered = crate::polyalg::render_poly(&p, &vars);
            assert_eq!(parse_poly(&rendered, &vars).unwrap(), p);
        }
        assert!(parse_poly("x1 + ;", &vars).is_err());
        assert!(parse_poly("x1 x2", &vars).is_err());
    }

    #[test]
    fn parses_single_location_system() {
        let h = parse_system(EXAMPLE_DAMPED).unwrap();
        assert_eq!(h.vars, vec!["x1", "x2"]);
        assert_eq!(h.locations.len(), 1);
        assert_eq!(h.transitions.len(), 0);
        assert_eq!(h.init.conjuncts.len(), 1);
        // Decimal 0.25 is exact: constant term 1/4 - 9/4 = -2.
        let theta = &h.init.conjuncts[0];
        assert_eq!(
            theta.coeff(&crate::polyalg::Monomial::one(2)),
            rat(-2, 1)
        );
        assert_eq!(theta.coeff(&crate::polyalg::Monomial::var(2, 0)), rat(3, 1));
        // 0.16 → 4/25: unsafe constant term 4/25 - 2 = -46/25.
        let zeta = &h.locations[0].unsafe_regions[0].conjuncts[0];
        assert_eq!(zeta.coeff(&crate::polyalg::Monomial::one(2)), rat(-46, 25));
    }

    #[test]
    fn parses_box_invariant_and_equality_init() {
        let src = "\
system planar;
vars x1 x2;
init x1 >= 2.5 && 3 >= x1 && x2 = 0;
location l0 {
  flow x1' = x1 - x2;
  flow x2' = x1 + x2;
  inv x1 >= 0 && 4 - x1 >= 0 && x2 >= 0 && 4 - x2 >= 0;
  unsafe 2 - x1 >= 0;
}
";
        let h = parse_system(src).unwrap();
        assert_eq!(h.locations[0].inv.conjuncts.len(), 4);
        assert_eq!(h.init.conjuncts.len(), 2);
        assert_eq!(h.init.equalities.len(), 1);
    }

    #[test]
    fn rejects_non_polynomial() {
        let src = "system s; vars x1; init true; location l0 { flow x1' = sin(x1); inv true; }";
        match parse_system(src) {
            Err(ParseError::NonPolynomial(_)) | Err(ParseError::UnknownVariable(_)) => {}
            other => panic!("expected non-polynomial error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_strict_inequalities() {
        let src = "system s; vars x1; init x1 > 0; location l0 { flow x1' = x1; inv true; }";
        assert!(parse_system(src).is_err());
    }

    #[test]
    fn transition_reset_assignment_becomes_equality() {
        let src = "\
system two;
vars x1;
init x1 >= 1;
location a { flow x1' = x1; inv true; }
location b { flow x1' = x1; inv true; }
transition a -> b { guard x1 >= 2; reset x1' = x1 + 1; }
";
        let h = parse_system(src).unwrap();
        let t = &h.transitions[0];
        assert_eq!(t.reset.equalities.len(), 1);
        // x1' - (x1 + 1) over (x1, x1').
        let e = &t.reset.equalities[0];
        assert_eq!(e.nvars(), 2);
        assert_eq!(e.coeff(&crate::polyalg::Monomial::var(2, 1)), rat(1, 1));
        assert_eq!(e.coeff(&crate::polyalg::Monomial::var(2, 0)), rat(-1, 1));
    }

    #[test]
    fn render_parse_round_trip() {
        let srcs = [
            EXAMPLE_DAMPED,
            "system two;
vars x1 x2;
init x1 >= 1;
location a { flow x1' = x2; flow x2' = -x1; inv x1 >= 0; unsafe x1 >= 5; unsafe -x1 - 5 >= 0; }
location b { flow x1' = 0; flow x2' = 1; inv true; }
transition a -> b { guard x1 >= 2 && x2 = 0; reset x1' = x1 + 1; reset x2' = 0; }
",
        ];
        for src in srcs {
            let h1 = parse_system(src).unwrap();
            let rendered = render_system(&h1);
            let h2 = parse_system(&rendered).unwrap();
            assert_eq!(h1, h2, "round trip failed for:\n{rendered}");
        }
    }

    #[test]
    fn duplicate_variable_is_structural_error() {
        let src = "system s; vars x1 x1; init true; location l0 { flow x1' = x1; inv true; }";
        assert!(matches!(parse_system(src), Err(ParseError::Structure(_))));
    }

    #[test]
    fn validate_flags_init_outside_invariant() {
        let src = "\
system s;
vars x1;
init x1 >= 1;
location l0 { flow x1' = x1; inv -x1 >= 0; }
";
        let h = parse_system(src).unwrap();
        let diags = validate_system(&h, 0);
        assert!(
            diags.iter().any(|d| d.severity == Severity::Warning),
            "expected a sampled-violation warning, got {diags:?}"
        );
    }

    #[test]
    fn validate_accepts_well_formed_system() {
        let h = parse_system(EXAMPLE_DAMPED).unwrap();
        assert!(validate_system(&h, 0).is_empty());
    }
}
