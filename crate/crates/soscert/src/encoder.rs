//! Compilation of invariant conditions into sum-of-squares programs and
//! their bilinear matrix form.
//!
//! For a location with flow `f`, invariant `Ψ = {ψ_k ≥ 0}`, initial set
//! `Θ = {θ_i ≥ 0}` and unsafe set `X_u = {ζ_j ≥ 0}`, a polynomial template
//! `φ(x) = cᵀT(x)` certifies safety when
//!
//! ```text
//! (i)    φ        = σ0 + Σ σi·θi                      on Θ
//! (ii)   φ'(x')   = λ0 + Σ λi·gi + Σ γu·ρu + η·φ      per transition
//! (iii)  Lie_f φ  = φ0 + Σ φk·ψk + ν·φ + ε1           on Ψ
//! (iv)   −φ       = μ0 + Σ μj·ζj + ε2                 on X_u
//! ```
//!
//! with all multipliers sums of squares except the sign-free `ν` (condition
//! (iii) only needs the consequent where `φ = 0`) and the multipliers
//! attached to equations, and `ε1, ε2` small positive constants enforcing
//! strictness. Writing each SOS multiplier as `m(x)ᵀ·W·m(x)` with `W ⪰ 0`
//! and matching coefficients monomial by monomial turns the system into a
//! feasibility problem over one block-diagonal parametric matrix
//!
//! ```text
//! B(u, v) = A0 + Σ ui·Ai + Σ vj·A_{m+j} + ΣΣ ui·vj·Bij ⪰ 0,
//! ```
//!
//! affine in `u` for fixed `v` and vice versa and free of `u·u`/`v·v`
//! products: `u` collects template coefficients and the Gram entries of
//! multipliers attached to known polynomials, `v` the coefficients of the
//! multipliers (`ν`, `η`, …) that multiply the unknown template itself.
//!
//! [`assemble_bmi`] performs the coefficient matching by exact rational
//! Gaussian elimination, pivoting only on Gram entries so that the template
//! coefficients and the `v`-side multipliers survive as the free variables
//! of the matrix problem.

use crate::polyalg::{monomial_basis, rat, Monomial, Poly, Rat, SymMat};
use num_traits::{One, Zero};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::model::{HybridSystem, SemialgebraicSet};

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("constraint `{constraint}`: no Gram entry available to match monomial {monomial}")]
    InconsistentMatching { constraint: String, monomial: String },
    #[error("{0}")]
    UnsupportedMode(String),
    #[error("{0}")]
    BadModel(String),
    #[error("product would leave the bilinear class: {0}")]
    ForbiddenProduct(String),
}

// ---------------------------------------------------------------------------
// Scalar unknowns
// ---------------------------------------------------------------------------

/// Bilinear class of a scalar unknown: `U` variables may multiply `V`
/// variables, but no two unknowns of the same class are ever multiplied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum VarClass {
    U,
    V,
}

/// Which block an unknown parametrizes (`Remainder` is the multiplier-free
/// SOS block closing each identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BlockId {
    Multiplier(usize),
    Remainder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VarOrigin {
    TemplateCoeff { tpl: usize, idx: usize },
    GramEntry { cons: usize, block: BlockId, i: usize, j: usize },
    FreeCoeff { cons: usize, block: usize, mono: Monomial },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

#[derive(Clone, Debug)]
pub struct VarInfo {
    pub name: String,
    pub class: VarClass,
    pub origin: VarOrigin,
}

#[derive(Clone, Debug, Default)]
pub struct VarRegistry {
    vars: Vec<VarInfo>,
}

impl VarRegistry {
    pub fn fresh(&mut self, name: String, class: VarClass, origin: VarOrigin) -> VarId {
        self.vars.push(VarInfo { name, class, origin });
        VarId(self.vars.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn info(&self, id: VarId) -> &VarInfo {
        &self.vars[id.0]
    }

    pub fn class(&self, id: VarId) -> VarClass {
        self.vars[id.0].class
    }

    pub fn ids(&self) -> impl Iterator<Item = VarId> {
        (0..self.vars.len()).map(VarId)
    }
}

// ---------------------------------------------------------------------------
// Bilinear expressions
// ---------------------------------------------------------------------------

/// `(None, None)` is the constant term, `(Some(x), None)` a linear term in
/// any class, `(Some(u), Some(v))` a bilinear term with `u ∈ U`, `v ∈ V`.
type BmiKey = (Option<VarId>, Option<VarId>);

/// A scalar expression of degree ≤ 1 in each bilinear class:
/// `a + Σ bᵢxᵢ + Σ cᵢⱼ uᵢvⱼ`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BmiExpr {
    terms: BTreeMap<BmiKey, Rat>,
}

impl BmiExpr {
    pub fn zero() -> Self {
        BmiExpr::default()
    }

    pub fn constant(r: Rat) -> Self {
        let mut e = BmiExpr::zero();
        e.add_term((None, None), r);
        e
    }

    pub fn var(id: VarId) -> Self {
        let mut e = BmiExpr::zero();
        e.add_term((Some(id), None), Rat::one());
        e
    }

    fn add_term(&mut self, key: BmiKey, c: Rat) {
        if c.is_zero() {
            return;
        }
        let entry = self.terms.entry(key).or_insert_with(Rat::zero);
        *entry += c;
        if entry.is_zero() {
            self.terms.remove(&key);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn as_constant(&self) -> Option<Rat> {
        if self.terms.is_empty() {
            return Some(Rat::zero());
        }
        if self.terms.len() == 1 {
            if let Some(c) = self.terms.get(&(None, None)) {
                return Some(c.clone());
            }
        }
        None
    }

    pub fn add(&self, other: &BmiExpr) -> BmiExpr {
        let mut out = self.clone();
        for (k, c) in &other.terms {
            out.add_term(*k, c.clone());
        }
        out
    }

    pub fn sub(&self, other: &BmiExpr) -> BmiExpr {
        let mut out = self.clone();
        for (k, c) in &other.terms {
            out.add_term(*k, -c.clone());
        }
        out
    }

    pub fn neg(&self) -> BmiExpr {
        BmiExpr::zero().sub(self)
    }

    pub fn scale(&self, r: &Rat) -> BmiExpr {
        if r.is_zero() {
            return BmiExpr::zero();
        }
        BmiExpr {
            terms: self.terms.iter().map(|(k, c)| (*k, c * r)).collect(),
        }
    }

    /// Coefficient of the linear term in `x`.
    pub fn linear_coeff(&self, x: VarId) -> Rat {
        self.terms
            .get(&(Some(x), None))
            .cloned()
            .unwrap_or_else(Rat::zero)
    }

    /// Every unknown mentioned by the expression.
    pub fn vars(&self) -> BTreeSet<VarId> {
        let mut out = BTreeSet::new();
        for (a, b) in self.terms.keys() {
            if let Some(x) = a {
                out.insert(*x);
            }
            if let Some(x) = b {
                out.insert(*x);
            }
        }
        out
    }

    pub fn has_bilinear(&self) -> bool {
        self.terms.keys().any(|(a, b)| a.is_some() && b.is_some())
    }

    /// Exact product. Errors when the result would contain a `u·u`, `v·v`,
    /// or higher-degree term.
    pub fn mul(&self, other: &BmiExpr, reg: &VarRegistry) -> Result<BmiExpr, EncodeError> {
        let mut out = BmiExpr::zero();
        for ((a1, b1), c1) in &self.terms {
            for ((a2, b2), c2) in &other.terms {
                let mut vars: Vec<VarId> =
                    [a1, b1, a2, b2].into_iter().flatten().copied().collect();
                let c = c1 * c2;
                match vars.len() {
                    0 => out.add_term((None, None), c),
                    1 => out.add_term((Some(vars[0]), None), c),
                    2 => {
                        vars.sort();
                        let (x, y) = (vars[0], vars[1]);
                        match (reg.class(x), reg.class(y)) {
                            (VarClass::U, VarClass::V) => out.add_term((Some(x), Some(y)), c),
                            (VarClass::V, VarClass::U) => out.add_term((Some(y), Some(x)), c),
                            _ => {
                                return Err(EncodeError::ForbiddenProduct(format!(
                                    "{} * {}",
                                    reg.info(x).name,
                                    reg.info(y).name
                                )))
                            }
                        }
                    }
                    _ => {
                        return Err(EncodeError::ForbiddenProduct(
                            "degree > 2 in the unknowns".into(),
                        ))
                    }
                }
            }
        }
        Ok(out)
    }

    /// Substitute `x := e`. `x` must only occur linearly or as the `U` side
    /// of bilinear terms with `e` affine in `U`.
    pub fn subst(&self, x: VarId, e: &BmiExpr, reg: &VarRegistry) -> Result<BmiExpr, EncodeError> {
        let mut out = BmiExpr::zero();
        for ((a, b), c) in &self.terms {
            match (a, b) {
                (Some(y), None) if *y == x => out = out.add(&e.scale(c)),
                (Some(y), Some(w)) if *y == x => {
                    let prod = e.mul(&BmiExpr::var(*w), reg)?;
                    out = out.add(&prod.scale(c));
                }
                (Some(y), Some(w)) if *w == x => {
                    let prod = e.mul(&BmiExpr::var(*y), reg)?;
                    out = out.add(&prod.scale(c));
                }
                _ => out.add_term((*a, *b), c.clone()),
            }
        }
        Ok(out)
    }

    pub fn eval_rat(&self, vals: &[Rat]) -> Rat {
        let mut acc = Rat::zero();
        for ((a, b), c) in &self.terms {
            let mut t = c.clone();
            if let Some(x) = a {
                t *= &vals[x.0];
            }
            if let Some(x) = b {
                t *= &vals[x.0];
            }
            acc += t;
        }
        acc
    }

    pub fn eval_f64(&self, vals: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((a, b), c) in &self.terms {
            let mut t = crate::polyalg::rat_to_f64(c);
            if let Some(x) = a {
                t *= vals[x.0];
            }
            if let Some(x) = b {
                t *= vals[x.0];
            }
            acc += t;
        }
        acc
    }

    /// View the expression as affine in the `active` unknowns with every
    /// other unknown frozen at `fixed`: returns the constant part and the
    /// coefficient of each active unknown (indexed per `active`). Panics if
    /// a bilinear term has both sides active.
    pub fn affine_parts(
        &self,
        active: &BTreeMap<VarId, usize>,
        fixed: &[f64],
    ) -> (f64, Vec<(usize, f64)>) {
        let mut konst = 0.0;
        let mut coefs: BTreeMap<usize, f64> = BTreeMap::new();
        for ((a, b), cr) in &self.terms {
            let c = crate::polyalg::rat_to_f64(cr);
            match (a, b) {
                (None, None) => konst += c,
                (Some(x), None) => match active.get(x) {
                    Some(&i) => *coefs.entry(i).or_insert(0.0) += c,
                    None => konst += c * fixed[x.0],
                },
                (Some(x), Some(y)) => match (active.get(x), active.get(y)) {
                    (None, None) => konst += c * fixed[x.0] * fixed[y.0],
                    (Some(&i), None) => *coefs.entry(i).or_insert(0.0) += c * fixed[y.0],
                    (None, Some(&j)) => *coefs.entry(j).or_insert(0.0) += c * fixed[x.0],
                    (Some(_), Some(_)) => {
                        panic!("bilinear term with both sides active: not an affine view")
                    }
                },
                (None, Some(_)) => unreachable!("non-canonical bilinear key"),
            }
        }
        (konst, coefs.into_iter().collect())
    }

    /// Exact-rational analog of [`BmiExpr::affine_parts`]: every unknown
    /// outside `active` must have a value in `fixed`.
    pub fn affine_parts_rat(
        &self,
        active: &BTreeMap<VarId, usize>,
        fixed: &BTreeMap<VarId, Rat>,
    ) -> (Rat, Vec<(usize, Rat)>) {
        let mut konst = Rat::zero();
        let mut coefs: BTreeMap<usize, Rat> = BTreeMap::new();
        let val = |x: &VarId| -> &Rat { &fixed[x] };
        for ((a, b), c) in &self.terms {
            match (a, b) {
                (None, None) => konst += c,
                (Some(x), None) => match active.get(x) {
                    Some(&i) => *coefs.entry(i).or_insert_with(Rat::zero) += c,
                    None => konst += c * val(x),
                },
                (Some(x), Some(y)) => match (active.get(x), active.get(y)) {
                    (None, None) => konst += c * val(x) * val(y),
                    (Some(&i), None) => {
                        *coefs.entry(i).or_insert_with(Rat::zero) += c * val(y)
                    }
                    (None, Some(&j)) => {
                        *coefs.entry(j).or_insert_with(Rat::zero) += c * val(x)
                    }
                    (Some(_), Some(_)) => {
                        panic!("bilinear term with both sides active: not an affine view")
                    }
                },
                (None, Some(_)) => unreachable!("non-canonical bilinear key"),
            }
        }
        coefs.retain(|_, c| !c.is_zero());
        (konst, coefs.into_iter().collect())
    }

    pub fn render(&self, reg: &VarRegistry) -> String {
        if self.terms.is_empty() {
            return "0".into();
        }
        let mut parts = Vec::new();
        for ((a, b), c) in &self.terms {
            let mut s = crate::polyalg::render_rat(c);
            if let Some(x) = a {
                s.push('*');
                s.push_str(&reg.info(*x).name);
            }
            if let Some(x) = b {
                s.push('*');
                s.push_str(&reg.info(*x).name);
            }
            parts.push(s);
        }
        parts.join(" + ")
    }
}

// ---------------------------------------------------------------------------
// Polynomials with unknown scalar coefficients
// ---------------------------------------------------------------------------

/// A polynomial whose coefficients are [`BmiExpr`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct SymPoly {
    nvars: usize,
    terms: BTreeMap<Monomial, BmiExpr>,
}

impl SymPoly {
    pub fn zero(nvars: usize) -> Self {
        SymPoly { nvars, terms: BTreeMap::new() }
    }

    pub fn from_known(p: &Poly<Rat>) -> Self {
        let mut out = SymPoly::zero(p.nvars());
        for (m, c) in p.terms() {
            out.add_term(m.clone(), BmiExpr::constant(c.clone()));
        }
        out
    }

    /// `Σ coeffs[i] · images[i]` — a template (or multiplier) seen through a
    /// linear map of its basis, e.g. the identity, a Lie derivative, or a
    /// variable renaming.
    pub fn affine(coeffs: &[VarId], images: &[Poly<Rat>]) -> Self {
        assert_eq!(coeffs.len(), images.len());
        let nv = images.first().map(|p| p.nvars()).unwrap_or(1);
        let mut out = SymPoly::zero(nv);
        for (c, img) in coeffs.iter().zip(images) {
            for (m, k) in img.terms() {
                let mut e = BmiExpr::var(*c).scale(k);
                if let Some(prev) = out.terms.get(m) {
                    e = prev.add(&e);
                    out.terms.remove(m);
                }
                out.add_term(m.clone(), e);
            }
        }
        out
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn add_term(&mut self, m: Monomial, e: BmiExpr) {
        if e.is_zero() {
            return;
        }
        debug_assert_eq!(m.nvars(), self.nvars);
        match self.terms.get_mut(&m) {
            Some(prev) => {
                *prev = prev.add(&e);
                if prev.is_zero() {
                    self.terms.remove(&m);
                }
            }
            None => {
                self.terms.insert(m, e);
            }
        }
    }

    pub fn add(&self, other: &SymPoly) -> SymPoly {
        let mut out = self.clone();
        for (m, e) in &other.terms {
            out.add_term(m.clone(), e.clone());
        }
        out
    }

    pub fn sub(&self, other: &SymPoly) -> SymPoly {
        let mut out = self.clone();
        for (m, e) in &other.terms {
            out.add_term(m.clone(), e.neg());
        }
        out
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &BmiExpr)> {
        self.terms.iter()
    }

    pub fn coeff(&self, m: &Monomial) -> BmiExpr {
        self.terms.get(m).cloned().unwrap_or_else(BmiExpr::zero)
    }

    pub fn mul_known(&self, p: &Poly<Rat>) -> SymPoly {
        let mut out = SymPoly::zero(self.nvars);
        for (m1, e) in &self.terms {
            for (m2, c) in p.terms() {
                out.add_term(m1.mul(m2), e.scale(c));
            }
        }
        out
    }

    pub fn mul(&self, other: &SymPoly, reg: &VarRegistry) -> Result<SymPoly, EncodeError> {
        let mut out = SymPoly::zero(self.nvars);
        for (m1, e1) in &self.terms {
            for (m2, e2) in &other.terms {
                out.add_term(m1.mul(m2), e1.mul(e2, reg)?);
            }
        }
        Ok(out)
    }

    /// Evaluate every coefficient at a full unknown assignment.
    pub fn eval_rat(&self, vals: &[Rat]) -> Poly<Rat> {
        let mut out = Poly::zero(self.nvars);
        for (m, e) in &self.terms {
            out.add_term(m.clone(), e.eval_rat(vals));
        }
        out
    }

    pub fn subst(
        &self,
        x: VarId,
        e: &BmiExpr,
        reg: &VarRegistry,
    ) -> Result<SymPoly, EncodeError> {
        let mut out = SymPoly::zero(self.nvars);
        for (m, expr) in &self.terms {
            out.add_term(m.clone(), expr.subst(x, e, reg)?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Templates, constraints, programs
// ---------------------------------------------------------------------------

/// A polynomial invariant ansatz `φ(x) = cᵀ·T(x)` with unknown coefficients.
#[derive(Clone, Debug)]
pub struct InvariantTemplate {
    pub loc: String,
    /// Conjunct index for paired invariants `φ_1 ≥ 0 ∧ φ_2 ≥ 0`; 0 otherwise.
    pub part: usize,
    pub degree: u32,
    pub basis: Vec<Monomial>,
    pub coeffs: Vec<VarId>,
}

impl InvariantTemplate {
    /// The template instantiated at an exact coefficient assignment.
    pub fn poly_at(&self, vals: &[Rat]) -> Poly<Rat> {
        let n = self.basis.first().map(|m| m.nvars()).unwrap_or(1);
        let mut p = Poly::zero(n);
        for (c, m) in self.coeffs.iter().zip(&self.basis) {
            p.add_term(m.clone(), vals[c.0].clone());
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    Init,
    Discrete,
    Continuous,
    UnsafeSeparation,
    ConjunctionSeparation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signedness {
    /// Sum of squares: Gram matrix unknown, PSD block emitted.
    Sos,
    /// Sign-free polynomial: one scalar unknown per monomial, no block.
    Free,
}

/// The known or template polynomial a multiplier is attached to.
#[derive(Clone, Debug)]
pub enum Factor {
    Known(Poly<Rat>),
    /// `images[i]` is the i-th basis monomial of template `tpl` mapped into
    /// the constraint's variable space.
    Template { tpl: usize, images: Vec<Poly<Rat>> },
}

impl Factor {
    fn degree(&self) -> u32 {
        match self {
            Factor::Known(p) => p.degree(),
            Factor::Template { images, .. } => {
                images.iter().map(|p| p.degree()).max().unwrap_or(0)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiplierBlock {
    pub role: String,
    /// Gram basis (`Sos`) or monomial support (`Free`).
    pub basis: Vec<Monomial>,
    pub factor: Factor,
    pub class: VarClass,
    pub signedness: Signedness,
    /// Gram entries in upper-triangle row-major order (`Sos`) or one
    /// coefficient per basis monomial (`Free`).
    pub entries: Vec<VarId>,
}

impl MultiplierBlock {
    /// The multiplier polynomial itself (Gram expansion or plain sum).
    pub fn multiplier_sympoly(&self, nvars: usize) -> SymPoly {
        let mut out = SymPoly::zero(nvars);
        match self.signedness {
            Signedness::Sos => {
                let s = self.basis.len();
                let mut k = 0;
                for i in 0..s {
                    for j in i..s {
                        let w = if i == j { rat(1, 1) } else { rat(2, 1) };
                        out.add_term(
                            self.basis[i].mul(&self.basis[j]),
                            BmiExpr::var(self.entries[k]).scale(&w),
                        );
                        k += 1;
                    }
                }
            }
            Signedness::Free => {
                for (m, t) in self.basis.iter().zip(&self.entries) {
                    out.add_term(m.clone(), BmiExpr::var(*t));
                }
            }
        }
        out
    }

    fn factor_sympoly(&self, templates: &[InvariantTemplate]) -> SymPoly {
        match &self.factor {
            Factor::Known(p) => SymPoly::from_known(p),
            Factor::Template { tpl, images } => SymPoly::affine(&templates[*tpl].coeffs, images),
        }
    }

    /// Multiplier · factor, as a polynomial with bilinear coefficients.
    pub fn product(
        &self,
        templates: &[InvariantTemplate],
        reg: &VarRegistry,
        nvars: usize,
    ) -> Result<SymPoly, EncodeError> {
        self.multiplier_sympoly(nvars)
            .mul(&self.factor_sympoly(templates), reg)
    }
}

#[derive(Clone, Debug)]
pub struct SosConstraint {
    pub name: String,
    pub kind: ConstraintKind,
    pub nvars: usize,
    /// Template-affine left-hand side (before subtracting the slack).
    pub lhs: SymPoly,
    pub multipliers: Vec<MultiplierBlock>,
    pub remainder_basis: Vec<Monomial>,
    pub remainder_entries: Vec<VarId>,
    pub slack: Rat,
    /// Index of the location this condition belongs to.
    pub loc: usize,
    /// Template part the condition constrains (conjunction mode).
    pub part: usize,
    /// Kind-specific index: transition index for jumps, unsafe-region
    /// member index for separations, 0 otherwise.
    pub aux: usize,
}

impl SosConstraint {
    fn remainder_sympoly(&self) -> SymPoly {
        let mut out = SymPoly::zero(self.nvars);
        let s = self.remainder_basis.len();
        let mut k = 0;
        for i in 0..s {
            for j in i..s {
                let w = if i == j { rat(1, 1) } else { rat(2, 1) };
                out.add_term(
                    self.remainder_basis[i].mul(&self.remainder_basis[j]),
                    BmiExpr::var(self.remainder_entries[k]).scale(&w),
                );
                k += 1;
            }
        }
        out
    }

    /// `lhs − slack − Σ multiplier·factor − remainder`: the identity to be
    /// matched to zero coefficient-wise.
    pub fn residual(
        &self,
        templates: &[InvariantTemplate],
        reg: &VarRegistry,
    ) -> Result<SymPoly, EncodeError> {
        let mut res = self.lhs.clone();
        res.add_term(
            Monomial::one(self.nvars),
            BmiExpr::constant(-self.slack.clone()),
        );
        for mb in &self.multipliers {
            res = res.sub(&mb.product(templates, reg, self.nvars)?);
        }
        Ok(res.sub(&self.remainder_sympoly()))
    }

    /// Does any multiplier attach to a template (the bilinear case)?
    pub fn has_template_factor(&self) -> bool {
        self.multipliers
            .iter()
            .any(|m| matches!(m.factor, Factor::Template { .. }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Bmi,
    LmiStrengthened,
    Conjunction,
    Boundary,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "bmi" => Some(Mode::Bmi),
            "lmi" => Some(Mode::LmiStrengthened),
            "conjunction" => Some(Mode::Conjunction),
            "boundary" => Some(Mode::Boundary),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Bmi => "bmi",
            Mode::LmiStrengthened => "lmi",
            Mode::Conjunction => "conjunction",
            Mode::Boundary => "boundary",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncodeOptions {
    /// Strictness slack of the continuous-consecution constraint. `None`
    /// picks the mode default: 1/100, except 0 in the strengthened LMI mode
    /// (whose certificates are checked with the weak inequality anyway; a
    /// positive slack there would wrongly exclude systems with an
    /// equilibrium on the template's zero set).
    pub eps1: Option<Rat>,
    /// Strictness slack of the unsafe-separation constraint (default 1/100).
    pub eps2: Option<Rat>,
    /// Normalization point: templates of the initial location are pinned to
    /// `φ(anchor) = 1`, removing the scale degree of freedom that otherwise
    /// lets a margin-maximizing solver collapse `c → 0`.
    pub anchor: Option<Vec<Rat>>,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { eps1: None, eps2: None, anchor: None }
    }
}

#[derive(Clone, Debug)]
pub struct SosProgram {
    pub templates: Vec<InvariantTemplate>,
    pub constraints: Vec<SosConstraint>,
    pub registry: VarRegistry,
    pub e: u32,
    pub mode: Mode,
    /// Normalization point per template (`φ(point) = 1`), if any.
    pub anchors: Vec<Option<Vec<Rat>>>,
    pub sys_vars: Vec<String>,
}

impl SosProgram {
    pub fn template_for(&self, loc: &str, part: usize) -> Option<usize> {
        self.templates
            .iter()
            .position(|t| t.loc == loc && t.part == part)
    }
}

// ---------------------------------------------------------------------------
// Program construction
// ---------------------------------------------------------------------------

pub fn build_template(
    reg: &mut VarRegistry,
    tpl_index: usize,
    loc: &str,
    part: usize,
    n: usize,
    d: u32,
) -> InvariantTemplate {
    let basis = monomial_basis(n, d);
    let coeffs = basis
        .iter()
        .enumerate()
        .map(|(i, _)| {
            reg.fresh(
                format!("c{tpl_index}_{i}"),
                VarClass::U,
                VarOrigin::TemplateCoeff { tpl: tpl_index, idx: i },
            )
        })
        .collect();
    InvariantTemplate {
        loc: loc.to_string(),
        part,
        degree: d,
        basis,
        coeffs,
    }
}

/// Largest even number ≤ `x` (0 if `x` ≤ 0).
fn even_floor(x: i64) -> u32 {
    if x <= 0 {
        0
    } else {
        (x - (x % 2)) as u32
    }
}

struct ConstraintBuilder<'r> {
    reg: &'r mut VarRegistry,
    cons_index: usize,
    name: String,
    kind: ConstraintKind,
    nvars: usize,
    lhs: SymPoly,
    slack: Rat,
    e: u32,
    /// (role, factor, class, signedness) — bases assigned when finished.
    pending: Vec<(String, Factor, VarClass, Signedness)>,
}

impl<'r> ConstraintBuilder<'r> {
    fn new(
        reg: &'r mut VarRegistry,
        cons_index: usize,
        name: String,
        kind: ConstraintKind,
        lhs: SymPoly,
        slack: Rat,
        e: u32,
    ) -> Self {
        let nvars = lhs.nvars();
        ConstraintBuilder { reg, cons_index, name, kind, nvars, lhs, slack, e, pending: Vec::new() }
    }

    fn sos(&mut self, role: impl Into<String>, factor: Factor, class: VarClass) {
        self.pending.push((role.into(), factor, class, Signedness::Sos));
    }

    fn free(&mut self, role: impl Into<String>, factor: Factor, class: VarClass) {
        self.pending.push((role.into(), factor, class, Signedness::Free));
    }

    /// Attach one multiplier per inequality (SOS) and per equation
    /// (sign-free) of a known constraint set.
    fn set_multipliers(&mut self, set: &SemialgebraicSet, prefix: &str, pad_to: Option<usize>) {
        let embed = |p: &Poly<Rat>| match pad_to {
            Some(nv) => p.pad(nv),
            None => p.clone(),
        };
        for (i, p) in set.conjuncts.iter().enumerate() {
            self.sos(format!("{prefix}{i}"), Factor::Known(embed(p)), VarClass::U);
        }
        for (i, p) in set.equalities.iter().enumerate() {
            self.free(format!("{prefix}_eq{i}"), Factor::Known(embed(p)), VarClass::U);
        }
    }

    /// Balance degrees and mint the unknowns. Every multiplier degree is
    /// capped by both `2e` and the headroom `B − deg(factor)` under the
    /// constraint's matched degree `B = max(deg lhs, max deg factor)`.
    fn finish(self) -> SosConstraint {
        let b_k = self
            .pending
            .iter()
            .map(|(_, f, _, _)| f.degree())
            .chain([self.lhs.degree()])
            .max()
            .unwrap_or(0);
        let mut multipliers = Vec::new();
        for (bi, (role, factor, class, signedness)) in self.pending.into_iter().enumerate() {
            let headroom = b_k as i64 - factor.degree() as i64;
            let cap = (2 * self.e as i64).min(headroom);
            let basis = match signedness {
                Signedness::Sos => monomial_basis(self.nvars, even_floor(cap) / 2),
                Signedness::Free => monomial_basis(self.nvars, cap.max(0) as u32),
            };
            let entries = match signedness {
                Signedness::Sos => {
                    let s = basis.len();
                    let mut es = Vec::with_capacity(s * (s + 1) / 2);
                    for i in 0..s {
                        for j in i..s {
                            es.push(self.reg.fresh(
                                format!("g{}.{}.{}.{}", self.cons_index, bi, i, j),
                                class,
                                VarOrigin::GramEntry {
                                    cons: self.cons_index,
                                    block: BlockId::Multiplier(bi),
                                    i,
                                    j,
                                },
                            ));
                        }
                    }
                    es
                }
                Signedness::Free => basis
                    .iter()
                    .map(|m| {
                        self.reg.fresh(
                            format!("t{}.{}.{}", self.cons_index, bi, m.degree()),
                            class,
                            VarOrigin::FreeCoeff {
                                cons: self.cons_index,
                                block: bi,
                                mono: m.clone(),
                            },
                        )
                    })
                    .collect(),
            };
            multipliers.push(MultiplierBlock { role, basis, factor, class, signedness, entries });
        }
        let remainder_basis = monomial_basis(self.nvars, b_k.div_ceil(2));
        let s = remainder_basis.len();
        let mut remainder_entries = Vec::with_capacity(s * (s + 1) / 2);
        for i in 0..s {
            for j in i..s {
                remainder_entries.push(self.reg.fresh(
                    format!("g{}.r.{}.{}", self.cons_index, i, j),
                    VarClass::U,
                    VarOrigin::GramEntry {
                        cons: self.cons_index,
                        block: BlockId::Remainder,
                        i,
                        j,
                    },
                ));
            }
        }
        SosConstraint {
            name: self.name,
            kind: self.kind,
            nvars: self.nvars,
            lhs: self.lhs,
            multipliers,
            remainder_basis,
            remainder_entries,
            slack: self.slack,
            loc: 0,
            part: 0,
            aux: 0,
        }
    }
}

/// Attach the semantic back-references of a finished constraint.
fn tag(mut c: SosConstraint, loc: usize, part: usize, aux: usize) -> SosConstraint {
    c.loc = loc;
    c.part = part;
    c.aux = aux;
    c
}

fn mono_poly(n: usize, m: &Monomial) -> Poly<Rat> {
    let mut p = Poly::zero(n);
    p.add_term(m.clone(), Rat::one());
    p
}

fn template_images(t: &InvariantTemplate, f: impl Fn(&Monomial) -> Poly<Rat>) -> Vec<Poly<Rat>> {
    t.basis.iter().map(f).collect()
}

fn single_zeta(set: &SemialgebraicSet, what: &str) -> Result<Poly<Rat>, EncodeError> {
    if set.conjuncts.len() != 1 || !set.equalities.is_empty() {
        return Err(EncodeError::BadModel(format!(
            "{what} requires an unsafe region given by a single inequality ζ ≥ 0"
        )));
    }
    Ok(set.conjuncts[0].clone())
}

/// Compile the invariant conditions for `h` at template degree `d` and
/// multiplier degree bound `2e` into an SOS program.
pub fn build_sos_program(
    h: &HybridSystem,
    d: u32,
    e: u32,
    mode: Mode,
    opts: &EncodeOptions,
) -> Result<SosProgram, EncodeError> {
    let n = h.nvars();
    let eps1 = opts.eps1.clone().unwrap_or_else(|| match mode {
        Mode::LmiStrengthened => Rat::zero(),
        _ => rat(1, 100),
    });
    let eps2 = opts.eps2.clone().unwrap_or_else(|| rat(1, 100));

    if mode == Mode::Boundary && (h.locations.len() != 1 || !h.transitions.is_empty()) {
        return Err(EncodeError::UnsupportedMode(
            "boundary separation applies to continuous single-location systems only".into(),
        ));
    }

    let mut reg = VarRegistry::default();
    let parts: usize = if mode == Mode::Conjunction { 2 } else { 1 };
    let mut templates = Vec::new();
    let mut anchors = Vec::new();
    for l in &h.locations {
        for part in 0..parts {
            let idx = templates.len();
            templates.push(build_template(&mut reg, idx, &l.id, part, n, d));
            anchors.push(if l.id == h.locations[h.init_loc].id {
                opts.anchor.clone()
            } else {
                None
            });
        }
    }
    let tpl_of = |loc: &str, part: usize| -> usize {
        templates
            .iter()
            .position(|t: &InvariantTemplate| t.loc == loc && t.part == part)
            .expect("template exists for every location")
    };

    let mut constraints = Vec::new();

    // (i) the initial set lies inside the invariant candidate.
    let l0 = &h.locations[h.init_loc];
    for part in 0..parts {
        let ti = tpl_of(&l0.id, part);
        let lhs = SymPoly::affine(
            &templates[ti].coeffs,
            &template_images(&templates[ti], |m| mono_poly(n, m)),
        );
        let mut cb = ConstraintBuilder::new(
            &mut reg,
            constraints.len(),
            format!("{}/init{}", l0.id, if parts > 1 { format!(".{part}") } else { String::new() }),
            ConstraintKind::Init,
            lhs,
            Rat::zero(),
            e,
        );
        cb.set_multipliers(&h.init, "theta", None);
        constraints.push(tag(cb.finish(), h.init_loc, part, 0));
    }

    // (ii) discrete consecution across each transition, over (x, x').
    for (tix, t) in h.transitions.iter().enumerate() {
        for part in 0..parts {
            let t_post = tpl_of(&t.post, part);
            let lhs = SymPoly::affine(
                &templates[t_post].coeffs,
                &template_images(&templates[t_post], |m| mono_poly(2 * n, &m.lift(true))),
            );
            let mut cb = ConstraintBuilder::new(
                &mut reg,
                constraints.len(),
                format!(
                    "{}->{}/jump{}",
                    t.pre,
                    t.post,
                    if parts > 1 { format!(".{part}") } else { String::new() }
                ),
                ConstraintKind::Discrete,
                lhs,
                Rat::zero(),
                e,
            );
            cb.set_multipliers(&t.guard, "guard", Some(2 * n));
            cb.set_multipliers(&t.reset, "reset", None);
            if mode != Mode::LmiStrengthened {
                for src_part in 0..parts {
                    let t_pre = tpl_of(&t.pre, src_part);
                    let images =
                        template_images(&templates[t_pre], |m| mono_poly(2 * n, &m.lift(false)));
                    cb.sos(
                        if parts > 1 { format!("eta.{src_part}") } else { "eta".into() },
                        Factor::Template { tpl: t_pre, images },
                        VarClass::V,
                    );
                }
            }
            let pre_loc = h
                .locations
                .iter()
                .position(|l| l.id == t.pre)
                .expect("transition source exists");
            constraints.push(tag(cb.finish(), pre_loc, part, tix));
        }
    }

    // (iii) continuous consecution: the flow cannot cross φ = 0 inward.
    for (lix, l) in h.locations.iter().enumerate() {
        for part in 0..parts {
            let ti = tpl_of(&l.id, part);
            let lhs = SymPoly::affine(
                &templates[ti].coeffs,
                &template_images(&templates[ti], |m| {
                    crate::polyalg::lie_derivative(&mono_poly(n, m), &l.flow)
                }),
            );
            let mut cb = ConstraintBuilder::new(
                &mut reg,
                constraints.len(),
                format!("{}/flow{}", l.id, if parts > 1 { format!(".{part}") } else { String::new() }),
                ConstraintKind::Continuous,
                lhs,
                eps1.clone(),
                e,
            );
            cb.set_multipliers(&l.inv, "psi", None);
            if mode != Mode::LmiStrengthened {
                let images = template_images(&templates[ti], |m| mono_poly(n, m));
                cb.free("nu", Factor::Template { tpl: ti, images }, VarClass::V);
            }
            if parts > 1 {
                // The other conjunct is ≥ 0 on the shared zero set.
                let other = tpl_of(&l.id, 1 - part);
                let images = template_images(&templates[other], |m| mono_poly(n, m));
                cb.sos("pair", Factor::Template { tpl: other, images }, VarClass::V);
            }
            constraints.push(tag(cb.finish(), lix, part, 0));
        }
    }

    // (iv)/(v) separation from the unsafe regions.
    for (lix, l) in h.locations.iter().enumerate() {
        for (ui, region) in l.unsafe_regions.iter().enumerate() {
            match mode {
                Mode::Conjunction => {
                    // φ_1 ≥ 0 ∧ φ_2 ≥ 0 must exclude {ζ ≥ 0}: certify
                    // −ζ = μ0 + m1·φ_1 + m2·φ_2 + ε2.
                    let zeta = single_zeta(region, "conjunction separation")?;
                    let lhs = SymPoly::from_known(&zeta.neg());
                    let mut cb = ConstraintBuilder::new(
                        &mut reg,
                        constraints.len(),
                        format!("{}/sep{}", l.id, ui),
                        ConstraintKind::ConjunctionSeparation,
                        lhs,
                        eps2.clone(),
                        e,
                    );
                    for part in 0..parts {
                        let ti = tpl_of(&l.id, part);
                        let images = template_images(&templates[ti], |m| mono_poly(n, m));
                        cb.sos(
                            format!("inv.{part}"),
                            Factor::Template { tpl: ti, images },
                            VarClass::V,
                        );
                    }
                    constraints.push(tag(cb.finish(), lix, 0, ui));
                }
                Mode::Boundary => {
                    // φ < 0 on the boundary {ζ = 0} of {ζ ≥ 0}: the
                    // multiplier is sign-free. (Sound when the initial set
                    // does not meet the unsafe region's interior, which
                    // continuity then extends to all of it.)
                    let zeta = single_zeta(region, "boundary separation")?;
                    let ti = tpl_of(&l.id, 0);
                    let lhs = SymPoly::affine(
                        &templates[ti].coeffs,
                        &template_images(&templates[ti], |m| mono_poly(n, m).neg()),
                    );
                    let mut cb = ConstraintBuilder::new(
                        &mut reg,
                        constraints.len(),
                        format!("{}/boundary{}", l.id, ui),
                        ConstraintKind::UnsafeSeparation,
                        lhs,
                        eps2.clone(),
                        e,
                    );
                    cb.free("zeta", Factor::Known(zeta), VarClass::U);
                    constraints.push(tag(cb.finish(), lix, 0, ui));
                }
                _ => {
                    let ti = tpl_of(&l.id, 0);
                    let lhs = SymPoly::affine(
                        &templates[ti].coeffs,
                        &template_images(&templates[ti], |m| mono_poly(n, m).neg()),
                    );
                    let mut cb = ConstraintBuilder::new(
                        &mut reg,
                        constraints.len(),
                        format!("{}/unsafe{}", l.id, ui),
                        ConstraintKind::UnsafeSeparation,
                        lhs,
                        eps2.clone(),
                        e,
                    );
                    cb.set_multipliers(region, "zeta", None);
                    constraints.push(tag(cb.finish(), lix, 0, ui));
                }
            }
        }
    }

    Ok(SosProgram {
        templates,
        constraints,
        registry: reg,
        e,
        mode,
        anchors,
        sys_vars: h.vars.clone(),
    })
}

// ---------------------------------------------------------------------------
// Matrix assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub cons: usize,
    pub role: BlockId,
    pub mat: SymMat<BmiExpr>,
}

#[derive(Clone, Debug)]
pub struct BmiProblem {
    pub registry: VarRegistry,
    pub blocks: Vec<Block>,
    pub u: Vec<VarId>,
    pub v: Vec<VarId>,
    /// Unknowns eliminated by coefficient matching, with their defining
    /// expressions fully resolved in terms of the free variables.
    pub eliminated: BTreeMap<VarId, BmiExpr>,
    /// Constraints whose identity couples the template bilinearly.
    pub bilinear_constraints: BTreeSet<usize>,
}

impl BmiProblem {
    /// Expand a free-variable assignment to values for every registry
    /// unknown (eliminated ones via their defining expressions).
    pub fn full_assignment(&self, u_vals: &[Rat], v_vals: &[Rat]) -> Vec<Rat> {
        assert_eq!(u_vals.len(), self.u.len());
        assert_eq!(v_vals.len(), self.v.len());
        let mut vals = vec![Rat::zero(); self.registry.len()];
        for (id, x) in self.u.iter().zip(u_vals) {
            vals[id.0] = x.clone();
        }
        for (id, x) in self.v.iter().zip(v_vals) {
            vals[id.0] = x.clone();
        }
        for (id, e) in &self.eliminated {
            vals[id.0] = e.eval_rat(&vals);
        }
        vals
    }

    pub fn full_assignment_f64(&self, u_vals: &[f64], v_vals: &[f64]) -> Vec<f64> {
        let mut vals = vec![0.0; self.registry.len()];
        for (id, x) in self.u.iter().zip(u_vals) {
            vals[id.0] = *x;
        }
        for (id, x) in self.v.iter().zip(v_vals) {
            vals[id.0] = *x;
        }
        for (id, e) in &self.eliminated {
            vals[id.0] = e.eval_f64(&vals);
        }
        vals
    }

    /// Evaluate every block at a full assignment.
    pub fn eval_blocks_f64(&self, vals: &[f64]) -> Vec<nalgebra::DMatrix<f64>> {
        self.blocks
            .iter()
            .map(|b| {
                let s = b.mat.side();
                nalgebra::DMatrix::from_fn(s, s, |i, j| b.mat.get(i, j).eval_f64(vals))
            })
            .collect()
    }

    pub fn eval_blocks_rat(&self, vals: &[Rat]) -> Vec<SymMat<Rat>> {
        self.blocks
            .iter()
            .map(|b| {
                SymMat::from_fn(b.mat.side(), |i, j| b.mat.get(i, j).eval_rat(vals))
            })
            .collect()
    }

    pub fn has_bilinear(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| (0..b.mat.side()).any(|i| (i..b.mat.side()).any(|j| b.mat.get(i, j).has_bilinear())))
    }

    /// Structured-text dump of the parametric matrix, exact rationals.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        writeln!(out, "free u ({}):", self.u.len()).unwrap();
        for id in &self.u {
            writeln!(out, "  {}", self.registry.info(*id).name).unwrap();
        }
        writeln!(out, "free v ({}):", self.v.len()).unwrap();
        for id in &self.v {
            writeln!(out, "  {}", self.registry.info(*id).name).unwrap();
        }
        for b in &self.blocks {
            writeln!(out, "block {} side {}:", b.name, b.mat.side()).unwrap();
            for i in 0..b.mat.side() {
                for j in i..b.mat.side() {
                    let e = b.mat.get(i, j);
                    if !e.is_zero() {
                        writeln!(out, "  [{i},{j}] = {}", e.render(&self.registry)).unwrap();
                    }
                }
            }
        }
        out
    }
}

/// Eliminate the coefficient-matching equalities of a program by exact
/// Gaussian substitution and collect the surviving PSD blocks into one
/// parametric block-diagonal matrix.
pub fn assemble_bmi(prog: &SosProgram) -> Result<BmiProblem, EncodeError> {
    let reg = &prog.registry;
    let mut eliminated: BTreeMap<VarId, BmiExpr> = BTreeMap::new();

    // Normalization: pin anchored templates to φ(x0) = 1 by eliminating the
    // constant coefficient: c0 := 1 − Σ_{i>0} ci·Ti(x0).
    for (t, anchor) in prog.templates.iter().zip(&prog.anchors) {
        if let Some(x0) = anchor {
            let mut expr = BmiExpr::constant(Rat::one());
            let mut c0: Option<VarId> = None;
            for (m, c) in t.basis.iter().zip(&t.coeffs) {
                if m.degree() == 0 {
                    c0 = Some(*c);
                } else {
                    let val = mono_poly(m.nvars(), m).eval_exact(x0);
                    expr = expr.sub(&BmiExpr::var(*c).scale(&val));
                }
            }
            let c0 = c0.expect("template basis contains the constant monomial");
            eliminated.insert(c0, expr);
        }
    }

    fn pivot_rank(
        reg: &VarRegistry,
        eliminated: &BTreeMap<VarId, BmiExpr>,
        id: VarId,
    ) -> Option<u8> {
        if eliminated.contains_key(&id) || reg.class(id) != VarClass::U {
            return None;
        }
        match &reg.info(id).origin {
            VarOrigin::GramEntry { block: BlockId::Remainder, .. } => Some(0),
            VarOrigin::GramEntry { .. } => Some(1),
            VarOrigin::FreeCoeff { .. } => Some(2),
            VarOrigin::TemplateCoeff { .. } => None,
        }
    }

    for (ci, cons) in prog.constraints.iter().enumerate() {
        let mut res = cons.residual(&prog.templates, reg)?;
        for (id, e) in &eliminated {
            res = res.subst(*id, e, reg)?;
        }
        let mut monos: Vec<Monomial> = res.terms().map(|(m, _)| m.clone()).collect();
        monos.sort();
        monos.reverse();
        for m in monos {
            let row = res.coeff(&m);
            if row.is_zero() {
                continue;
            }
            // Best (lowest-rank) pivot class; ties broken towards the
            // highest unknown, i.e. the bottom-right Gram corner.
            let pivot = row
                .vars()
                .into_iter()
                .filter_map(|id| {
                    let a = row.linear_coeff(id);
                    if a.is_zero() {
                        return None;
                    }
                    pivot_rank(reg, &eliminated, id).map(|r| (r, id, a))
                })
                .min_by(|(r1, id1, _), (r2, id2, _)| r1.cmp(r2).then(id2.cmp(id1)));
            let Some((_, pid, a)) = pivot else {
                return Err(EncodeError::InconsistentMatching {
                    constraint: cons.name.clone(),
                    monomial: format!("{m:?}"),
                });
            };
            // row = a·pid + rest = 0  ⇒  pid = −rest / a.
            let mut rest = row.clone();
            rest.add_term((Some(pid), None), -a.clone());
            let expr = rest.scale(&(-Rat::one() / a));
            // Resolve into existing definitions and the remaining rows.
            for e in eliminated.values_mut() {
                *e = e.subst(pid, &expr, reg)?;
            }
            res = res.subst(pid, &expr, reg)?;
            eliminated.insert(pid, expr);
        }
        debug_assert!(res.terms().all(|(_, e)| e.is_zero()), "constraint {ci} not closed");
    }

    // Free variables: everything not eliminated, split by class.
    let mut u = Vec::new();
    let mut v = Vec::new();
    for id in reg.ids() {
        if eliminated.contains_key(&id) {
            continue;
        }
        match reg.class(id) {
            VarClass::U => u.push(id),
            VarClass::V => v.push(id),
        }
    }

    // Collect the PSD blocks, substituting eliminated entries.
    let entry_expr = |id: VarId| -> BmiExpr {
        eliminated
            .get(&id)
            .cloned()
            .unwrap_or_else(|| BmiExpr::var(id))
    };
    let mut blocks = Vec::new();
    let mut bilinear_constraints = BTreeSet::new();
    for (ci, cons) in prog.constraints.iter().enumerate() {
        if cons.has_template_factor() {
            bilinear_constraints.insert(ci);
        }
        for (bi, mb) in cons.multipliers.iter().enumerate() {
            if mb.signedness != Signedness::Sos {
                continue;
            }
            let s = mb.basis.len();
            let mut mat = SymMat::filled(s, BmiExpr::zero());
            let mut k = 0;
            for i in 0..s {
                for j in i..s {
                    mat.set(i, j, entry_expr(mb.entries[k]));
                    k += 1;
                }
            }
            blocks.push(Block {
                name: format!("{}/{}", cons.name, mb.role),
                cons: ci,
                role: BlockId::Multiplier(bi),
                mat,
            });
        }
        let s = cons.remainder_basis.len();
        let mut mat = SymMat::filled(s, BmiExpr::zero());
        let mut k = 0;
        for i in 0..s {
            for j in i..s {
                mat.set(i, j, entry_expr(cons.remainder_entries[k]));
                k += 1;
            }
        }
        blocks.push(Block {
            name: format!("{}/rem", cons.name),
            cons: ci,
            role: BlockId::Remainder,
            mat,
        });
    }

    Ok(BmiProblem {
        registry: reg.clone(),
        blocks,
        u,
        v,
        eliminated,
        bilinear_constraints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_system;
    use crate::polyalg::{rat_int, VectorField};
    use rand::SeedableRng;

    const EX2: &str = "\
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
    fn template_sizes() {
        let mut reg = VarRegistry::default();
        assert_eq!(build_template(&mut reg, 0, "l", 0, 1, 1).coeffs.len(), 2);
        assert_eq!(build_template(&mut reg, 1, "l", 0, 2, 1).coeffs.len(), 3);
        assert_eq!(build_template(&mut reg, 2, "l", 0, 2, 4).coeffs.len(), 15);
    }

    /// One-variable system x' = 2x on the invariant {x² ≤ 1}, linear
    /// template: the classic worked miniature. After matching, the problem
    /// is diag(u2, v1, Q) with Q = [[−u2 − u0·v1, u1 − u1·v1/2],
    /// [u1 − u1·v1/2, u2]].
    #[test]
    fn one_var_miniature_matches_hand_assembly() {
        let mut reg = VarRegistry::default();
        let tpl = build_template(&mut reg, 0, "l0", 0, 1, 1);
        let (u0, u1) = (tpl.coeffs[0], tpl.coeffs[1]);
        let flow = VectorField::new(vec![Poly::var(1, 0).scale(&rat_int(2))]);
        let lhs = SymPoly::affine(
            &tpl.coeffs,
            &template_images(&tpl, |m| crate::polyalg::lie_derivative(&mono_poly(1, m), &flow)),
        );
        let templates = vec![tpl];
        let mut cb = ConstraintBuilder::new(
            &mut reg,
            0,
            "l0/flow".into(),
            ConstraintKind::Continuous,
            lhs,
            Rat::zero(),
            0,
        );
        // 1 − x², scalar SOS multiplier.
        let mut psi = Poly::constant(1, rat_int(1));
        psi = psi.sub(&Poly::var(1, 0).mul(&Poly::var(1, 0)));
        cb.sos("psi0", Factor::Known(psi), VarClass::U);
        let images = template_images(&templates[0], |m| mono_poly(1, m));
        cb.sos("nu", Factor::Template { tpl: 0, images }, VarClass::V);
        let cons = cb.finish();
        assert_eq!(cons.multipliers[0].basis.len(), 1);
        assert_eq!(cons.multipliers[1].basis.len(), 1);
        assert_eq!(cons.remainder_basis.len(), 2);
        let u2 = cons.multipliers[0].entries[0];
        let v1 = cons.multipliers[1].entries[0];

        let prog = SosProgram {
            templates,
            constraints: vec![cons],
            registry: reg,
            e: 0,
            mode: Mode::Bmi,
            anchors: vec![None],
            sys_vars: vec!["x".into()],
        };
        let bmi = assemble_bmi(&prog).unwrap();

        assert_eq!(bmi.u, vec![u0, u1, u2]);
        assert_eq!(bmi.v, vec![v1]);
        assert_eq!(bmi.blocks.len(), 3);
        assert_eq!(bmi.blocks[0].mat.side(), 1);
        assert_eq!(bmi.blocks[0].mat.get(0, 0), BmiExpr::var(u2));
        assert_eq!(bmi.blocks[1].mat.get(0, 0), BmiExpr::var(v1));

        let q = &bmi.blocks[2].mat;
        assert_eq!(q.side(), 2);
        // Q00 = −u2 − u0·v1
        let mut q00 = BmiExpr::zero();
        q00.add_term((Some(u2), None), rat(-1, 1));
        q00.add_term((Some(u0), Some(v1)), rat(-1, 1));
        assert_eq!(q.get(0, 0), q00);
        // Q01 = u1 − u1·v1/2
        let mut q01 = BmiExpr::zero();
        q01.add_term((Some(u1), None), rat(1, 1));
        q01.add_term((Some(u1), Some(v1)), rat(-1, 2));
        assert_eq!(q.get(0, 1), q01);
        // Q11 = u2
        assert_eq!(q.get(1, 1), BmiExpr::var(u2));
    }

    #[test]
    fn planar_program_shape() {
        let h = parse_system(EX2).unwrap();
        let prog = build_sos_program(&h, 2, 1, Mode::Bmi, &EncodeOptions::default()).unwrap();
        assert_eq!(prog.constraints.len(), 3);
        assert_eq!(prog.constraints[0].kind, ConstraintKind::Init);
        assert_eq!(prog.constraints[1].kind, ConstraintKind::Continuous);
        assert_eq!(prog.constraints[2].kind, ConstraintKind::UnsafeSeparation);

        // Initial-set multiplier: degree headroom 0 ⇒ scalar SOS.
        assert_eq!(prog.constraints[0].multipliers[0].basis.len(), 1);
        // Continuous: Lie degree 4; sign-free multiplier of degree ≤ 2 has
        // 6 coefficients; remainder Gram over the 6 monomials of degree ≤ 2.
        let flow_cons = &prog.constraints[1];
        assert_eq!(flow_cons.multipliers.len(), 1);
        assert_eq!(flow_cons.multipliers[0].signedness, Signedness::Free);
        assert_eq!(flow_cons.multipliers[0].class, VarClass::V);
        assert_eq!(flow_cons.multipliers[0].basis.len(), 6);
        assert_eq!(flow_cons.remainder_basis.len(), 6);
        assert_eq!(flow_cons.slack, rat(1, 100));
    }

    #[test]
    fn strengthened_mode_is_linear() {
        let h = parse_system(EX2).unwrap();
        let lmi = build_sos_program(&h, 2, 1, Mode::LmiStrengthened, &EncodeOptions::default())
            .unwrap();
        let bmi = build_sos_program(&h, 2, 1, Mode::Bmi, &EncodeOptions::default()).unwrap();
        let lmi_asm = assemble_bmi(&lmi).unwrap();
        let bmi_asm = assemble_bmi(&bmi).unwrap();
        assert!(!lmi_asm.has_bilinear());
        assert!(lmi_asm.v.is_empty());
        assert!(bmi_asm.has_bilinear());
        // Strengthened continuous constraint carries no slack.
        assert_eq!(lmi.constraints[1].slack, Rat::zero());
    }

    /// Coefficient matching is an identity, not an approximation: at any
    /// rational assignment of the free variables, the constraint residuals
    /// vanish exactly once the eliminated unknowns take their defining
    /// values.
    #[test]
    fn assembly_is_exact_at_random_points() {
        use rand::Rng;
        let h = parse_system(EX2).unwrap();
        for mode in [Mode::Bmi, Mode::LmiStrengthened] {
            let prog = build_sos_program(&h, 2, 1, mode, &EncodeOptions::default()).unwrap();
            let bmi = assemble_bmi(&prog).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            for _ in 0..5 {
                let mut draw = || {
                    rat(rng.gen_range(-50i64..=50), rng.gen_range(1i64..=20))
                };
                let u_vals: Vec<Rat> = (0..bmi.u.len()).map(|_| draw()).collect();
                let v_vals: Vec<Rat> = (0..bmi.v.len()).map(|_| draw()).collect();
                let vals = bmi.full_assignment(&u_vals, &v_vals);
                for cons in &prog.constraints {
                    let res = cons
                        .residual(&prog.templates, &prog.registry)
                        .unwrap()
                        .eval_rat(&vals);
                    assert!(res.is_zero(), "nonzero residual for {}", cons.name);
                }
            }
        }
    }

    #[test]
    fn anchored_template_evaluates_to_one() {
        let h = parse_system(EX2).unwrap();
        let opts = EncodeOptions {
            anchor: Some(vec![rat(3, 2), rat(0, 1)]),
            ..EncodeOptions::default()
        };
        let prog = build_sos_program(&h, 2, 1, Mode::Bmi, &opts).unwrap();
        let bmi = assemble_bmi(&prog).unwrap();
        // The constant coefficient is eliminated, not free.
        let c0 = prog.templates[0].coeffs[0];
        assert!(!bmi.u.contains(&c0));
        assert!(bmi.eliminated.contains_key(&c0));
        let u_vals: Vec<Rat> = (1..=bmi.u.len()).map(|i| rat(i as i64, 7)).collect();
        let v_vals: Vec<Rat> = (1..=bmi.v.len()).map(|i| rat(-(i as i64), 9)).collect();
        let vals = bmi.full_assignment(&u_vals, &v_vals);
        let phi = prog.templates[0].poly_at(&vals);
        assert_eq!(phi.eval_exact(&[rat(3, 2), rat(0, 1)]), rat(1, 1));
    }

    #[test]
    fn overconstrained_matching_is_reported() {
        // lhs = u0 + u1·x with no multipliers and a constant-only remainder:
        // the x-monomial row has no Gram entry to absorb it.
        let mut reg = VarRegistry::default();
        let tpl = build_template(&mut reg, 0, "l0", 0, 1, 1);
        let lhs = SymPoly::affine(&tpl.coeffs, &template_images(&tpl, |m| mono_poly(1, m)));
        let templates = vec![tpl];
        let cb = ConstraintBuilder::new(
            &mut reg,
            0,
            "l0/init".into(),
            ConstraintKind::Init,
            lhs,
            Rat::zero(),
            0,
        );
        let mut cons = cb.finish();
        // Shrink the remainder to the constant monomial only.
        cons.remainder_basis = monomial_basis(1, 0);
        cons.remainder_entries.truncate(1);
        let prog = SosProgram {
            templates,
            constraints: vec![cons],
            registry: reg,
            e: 0,
            mode: Mode::Bmi,
            anchors: vec![None],
            sys_vars: vec!["x".into()],
        };
        match assemble_bmi(&prog) {
            Err(EncodeError::InconsistentMatching { .. }) => {}
            other => panic!("expected InconsistentMatching, got {other:?}"),
        }
    }

    #[test]
    fn v_side_is_exactly_the_template_multipliers() {
        let h = parse_system(EX2).unwrap();
        let prog = build_sos_program(&h, 2, 1, Mode::Bmi, &EncodeOptions::default()).unwrap();
        let bmi = assemble_bmi(&prog).unwrap();
        assert_eq!(bmi.v.len(), 6);
        for id in &bmi.v {
            assert!(matches!(
                prog.registry.info(*id).origin,
                VarOrigin::FreeCoeff { cons: 1, .. }
            ));
        }
        assert_eq!(bmi.bilinear_constraints, BTreeSet::from([1]));
    }

    #[test]
    fn dump_is_deterministic() {
        let h = parse_system(EX2).unwrap();
        let mk = || {
            let prog =
                build_sos_program(&h, 2, 1, Mode::Bmi, &EncodeOptions::default()).unwrap();
            assemble_bmi(&prog).unwrap().dump()
        };
        assert_eq!(mk(), mk());
    }
}
