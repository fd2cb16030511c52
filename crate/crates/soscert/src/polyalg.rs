//! Sparse multivariate polynomials over exact rationals or `f64`.
//!
//! Everything downstream — templates, Lie derivatives, Gram-matrix
//! expansions, certificate identities — is built from the two types here:
//! [`Monomial`] (an exponent vector) and [`Poly`] (a monomial → coefficient
//! map). The coefficient field is a type parameter, so exact-rational and
//! binary64 polynomials are distinct types and cannot be mixed by accident;
//! conversions are explicit ([`Poly::to_f64`]).
//!
//! Monomials are ordered *graded lexicographically* with `x1 > x2 > …`:
//! lower total degree first, ties broken so that for degree 2 in two
//! variables the order is `x1^2, x1*x2, x2^2`. The basis returned by
//! [`monomial_basis`] and the term order of every rendered polynomial follow
//! this single order, and every Gram-matrix index downstream depends on it.

use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Div, Neg, Sub};

/// Exact rational scalar used everywhere on the certified side.
pub type Rat = BigRational;

/// Coefficient field for [`Poly`]: implemented by [`Rat`] and `f64`.
pub trait Coeff:
    Clone
    + PartialEq
    + fmt::Debug
    + Zero
    + One
    + Neg<Output = Self>
    + Sub<Output = Self>
    + Div<Output = Self>
{
}

impl Coeff for Rat {}
impl Coeff for f64 {}

/// Build a rational from an integer pair; panics on zero denominator.
pub fn rat(num: i64, den: i64) -> Rat {
    Rat::new(num.into(), den.into())
}

/// Integer-valued rational.
pub fn rat_int(num: i64) -> Rat {
    Rat::from_integer(num.into())
}

/// A power product `x1^a1 * … * xn^an`, stored as its exponent vector.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Monomial {
    exps: Vec<u32>,
}

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        Monomial { exps }
    }

    /// The constant monomial `1` in `n` variables.
    pub fn one(nvars: usize) -> Self {
        Monomial { exps: vec![0; nvars] }
    }

    /// The monomial `x_i` (0-based index).
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut exps = vec![0; nvars];
        exps[i] = 1;
        Monomial { exps }
    }

    pub fn nvars(&self) -> usize {
        self.exps.len()
    }

    pub fn exps(&self) -> &[u32] {
        &self.exps
    }

    pub fn exp(&self, i: usize) -> u32 {
        self.exps[i]
    }

    /// Total degree `a1 + … + an`.
    pub fn degree(&self) -> u32 {
        self.exps.iter().sum()
    }

    /// Product of two monomials (exponent-wise sum).
    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.exps.len(), other.exps.len());
        Monomial {
            exps: self
                .exps
                .iter()
                .zip(&other.exps)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Extend into `2n` variables, placing this monomial on the primed
    /// (second) block when `primed` is set. Used by discrete-transition
    /// constraints which live over `(x, x')`.
    pub fn lift(&self, primed: bool) -> Monomial {
        let n = self.exps.len();
        let mut exps = vec![0; 2 * n];
        let off = if primed { n } else { 0 };
        exps[off..off + n].copy_from_slice(&self.exps);
        Monomial { exps }
    }

    /// Embed into a larger variable space, keeping the existing variables
    /// first and padding with zero exponents.
    pub fn pad(&self, new_nvars: usize) -> Monomial {
        assert!(new_nvars >= self.exps.len());
        let mut exps = self.exps.clone();
        exps.resize(new_nvars, 0);
        Monomial { exps }
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        // Graded lexicographic with x1 > x2 > …: compare total degree, then
        // the exponent vectors reversed so that (2,0) sorts before (1,1).
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.exps.cmp(&self.exps))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials in `n` variables of total degree at most `d`, in the graded
/// lexicographic order. The result has `C(n + d, n)` entries.
pub fn monomial_basis(n: usize, d: u32) -> Vec<Monomial> {
    assert!(n >= 1, "need at least one variable");
    let mut out = Vec::new();
    let mut stack = vec![0u32; n];
    fn rec(out: &mut Vec<Monomial>, stack: &mut Vec<u32>, pos: usize, left: u32) {
        if pos == stack.len() {
            out.push(Monomial::new(stack.clone()));
            return;
        }
        for e in 0..=left {
            stack[pos] = e;
            rec(out, stack, pos + 1, left - e);
        }
        stack[pos] = 0;
    }
    rec(&mut out, &mut stack, 0, d);
    out.sort();
    out
}

/// Sparse polynomial: monomial → coefficient, zero coefficients never stored.
#[derive(Clone, PartialEq, Debug)]
pub struct Poly<T: Coeff> {
    nvars: usize,
    terms: BTreeMap<Monomial, T>,
}

impl<T: Coeff> Poly<T> {
    pub fn zero(nvars: usize) -> Self {
        Poly { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: T) -> Self {
        let mut p = Poly::zero(nvars);
        p.add_term(Monomial::one(nvars), c);
        p
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        let mut p = Poly::zero(nvars);
        p.add_term(Monomial::var(nvars, i), T::one());
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; the zero polynomial reports degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &T)> {
        self.terms.iter()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeff(&self, m: &Monomial) -> T {
        self.terms.get(m).cloned().unwrap_or_else(T::zero)
    }

    /// Add `c * m` in place, dropping the term if it cancels to zero.
    pub fn add_term(&mut self, m: Monomial, c: T) {
        debug_assert_eq!(m.nvars(), self.nvars);
        if c.is_zero() {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let sum = e.get().clone() + c;
                if sum.is_zero() {
                    e.remove();
                } else {
                    *e.get_mut() = sum;
                }
            }
        }
    }

    pub fn add(&self, other: &Poly<T>) -> Poly<T> {
        assert_eq!(self.nvars, other.nvars, "dimension mismatch");
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Poly<T>) -> Poly<T> {
        assert_eq!(self.nvars, other.nvars, "dimension mismatch");
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), -c.clone());
        }
        out
    }

    pub fn neg(&self) -> Poly<T> {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), -c.clone());
        }
        out
    }

    pub fn scale(&self, s: &T) -> Poly<T> {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c.clone() * s.clone());
        }
        out
    }

    pub fn mul(&self, other: &Poly<T>) -> Poly<T> {
        assert_eq!(self.nvars, other.nvars, "dimension mismatch");
        let mut out = Poly::zero(self.nvars);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.mul(mb), ca.clone() * cb.clone());
            }
        }
        out
    }

    /// Substitute `args[i]` for variable `x_i`. The result lives in the
    /// variable space of the arguments, which must all agree.
    pub fn compose(&self, args: &[Poly<T>]) -> Poly<T> {
        assert_eq!(args.len(), self.nvars, "one argument per variable");
        let out_n = args.first().map(|p| p.nvars()).unwrap_or(0);
        let mut out = Poly::zero(out_n);
        for (m, c) in &self.terms {
            let mut term = Poly::constant(out_n, c.clone());
            for (i, e) in m.exps().iter().enumerate() {
                for _ in 0..*e {
                    term = term.mul(&args[i]);
                }
            }
            out = out.add(&term);
        }
        out
    }

    /// Partial derivative with respect to `x_i`.
    pub fn partial(&self, i: usize) -> Poly<T> {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            let e = m.exp(i);
            if e == 0 {
                continue;
            }
            let mut exps = m.exps().to_vec();
            exps[i] = e - 1;
            // e * c, built by repeated addition so only `Coeff` is required.
            let mut factor = T::zero();
            for _ in 0..e {
                factor = factor + T::one();
            }
            out.add_term(Monomial::new(exps), c.clone() * factor);
        }
        out
    }

    /// Evaluate at a point given as one scalar per variable.
    pub fn eval(&self, point: &[T]) -> T {
        assert_eq!(point.len(), self.nvars, "point has wrong dimension");
        let mut acc = T::zero();
        for (m, c) in &self.terms {
            let mut t = c.clone();
            for (i, &e) in m.exps().iter().enumerate() {
                for _ in 0..e {
                    t = t * point[i].clone();
                }
            }
            acc = acc + t;
        }
        acc
    }

    /// Lift into `2n` variables over the plain or primed block.
    pub fn lift(&self, primed: bool) -> Poly<T> {
        let mut out = Poly::zero(2 * self.nvars);
        for (m, c) in &self.terms {
            out.add_term(m.lift(primed), c.clone());
        }
        out
    }

    /// Embed into a larger variable space (existing variables first).
    pub fn pad(&self, new_nvars: usize) -> Poly<T> {
        let mut out = Poly::zero(new_nvars);
        for (m, c) in &self.terms {
            out.add_term(m.pad(new_nvars), c.clone());
        }
        out
    }

    /// Coefficient vector with respect to an explicit monomial list.
    /// Panics if the polynomial has support outside the list.
    pub fn coeff_vec(&self, basis: &[Monomial]) -> Vec<T> {
        let index: BTreeMap<&Monomial, usize> =
            basis.iter().enumerate().map(|(i, m)| (m, i)).collect();
        let mut v = vec![T::zero(); basis.len()];
        for (m, c) in &self.terms {
            let i = *index
                .get(m)
                .unwrap_or_else(|| panic!("monomial {m:?} outside basis"));
            v[i] = c.clone();
        }
        v
    }
}

impl Poly<Rat> {
    /// Convert to a binary64 polynomial (explicit, lossy).
    pub fn to_f64(&self) -> Poly<f64> {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), rat_to_f64(c));
        }
        out
    }

    /// Exact evaluation at a rational point — no rounding anywhere.
    pub fn eval_exact(&self, point: &[Rat]) -> Rat {
        self.eval(point)
    }
}

pub fn rat_to_f64(r: &Rat) -> f64 {
    // Scale down big numerator/denominator pairs in tandem so the conversion
    // stays finite even when entries come from deep exact eliminations.
    let num = r.numer();
    let den = r.denom();
    let bits = num.bits().max(den.bits());
    if bits <= 52 {
        let n: f64 = num.to_string().parse().unwrap_or(f64::NAN);
        let d: f64 = den.to_string().parse().unwrap_or(f64::NAN);
        return n / d;
    }
    let shift = bits - 52;
    let n = num >> shift;
    let d = den >> shift;
    let nf: f64 = n.to_string().parse().unwrap_or(f64::NAN);
    let df: f64 = d.to_string().parse().unwrap_or(f64::NAN);
    nf / df
}

/// Polynomial vector field `x_i' = f_i(x)`, one component per variable.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T: Coeff> {
    pub components: Vec<Poly<T>>,
}

impl<T: Coeff> VectorField<T> {
    pub fn new(components: Vec<Poly<T>>) -> Self {
        let n = components.len();
        for c in &components {
            assert_eq!(c.nvars(), n, "field component dimension mismatch");
        }
        VectorField { components }
    }

    pub fn nvars(&self) -> usize {
        self.components.len()
    }
}

/// Lie derivative of `p` along `f`: `sum_i (dp/dx_i) * f_i`.
pub fn lie_derivative<T: Coeff>(p: &Poly<T>, f: &VectorField<T>) -> Poly<T> {
    assert_eq!(p.nvars(), f.nvars(), "dimension mismatch");
    let mut out = Poly::zero(p.nvars());
    for i in 0..f.nvars() {
        out = out.add(&p.partial(i).mul(&f.components[i]));
    }
    out
}

/// A polynomial in square-matrix representation: `m(x)^T * W * m(x)` for an
/// ordered monomial basis `m` and a symmetric matrix `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramForm<T: Coeff> {
    pub basis: Vec<Monomial>,
    pub mat: SymMat<T>,
}

impl<T: Coeff> GramForm<T> {
    pub fn new(basis: Vec<Monomial>, mat: SymMat<T>) -> Self {
        assert_eq!(basis.len(), mat.side(), "basis/matrix size mismatch");
        GramForm { basis, mat }
    }
}

/// Expand `m(x)^T W m(x)` and collect like terms.
pub fn gram_expand<T: Coeff>(g: &GramForm<T>) -> Poly<T> {
    let n = g.basis.first().map(|m| m.nvars()).unwrap_or(1);
    let mut out = Poly::zero(n);
    let s = g.basis.len();
    for i in 0..s {
        for j in 0..s {
            out.add_term(g.basis[i].mul(&g.basis[j]), g.mat.get(i, j));
        }
    }
    out
}

/// Dense symmetric matrix; `set` mirrors across the diagonal so the symmetry
/// invariant cannot be violated through the public interface.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMat<T: Clone> {
    side: usize,
    data: Vec<T>,
}

impl<T: Clone> SymMat<T> {
    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                let (a, b) = if i <= j { (i, j) } else { (j, i) };
                data.push(f(a, b));
            }
        }
        SymMat { side, data }
    }

    pub fn filled(side: usize, v: T) -> Self {
        SymMat { side, data: vec![v; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.side + j].clone()
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.side + j] = v.clone();
        self.data[j * self.side + i] = v;
    }

    /// Row-major scan of the upper triangle (i ≤ j), the canonical layout of
    /// symmetric-matrix unknowns ("vech order") used across the crate.
    pub fn vech_indices(side: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(side * (side + 1) / 2);
        for i in 0..side {
            for j in i..side {
                out.push((i, j));
            }
        }
        out
    }
}

/// Canonical text form: terms in basis order, coefficients as `num/den`
/// (`/den` omitted for integers), `*` between coefficient and power product,
/// `^` for exponents. Example: `-151/99 - 62/33*x2 + x1^2`.
pub fn render_poly(p: &Poly<Rat>, vars: &[String]) -> String {
    if p.is_zero() {
        return "0".to_string();
    }
    let mut out = String::new();
    for (idx, (m, c)) in p.terms().enumerate() {
        let neg = c.is_negative();
        let abs = c.abs();
        if idx == 0 {
            if neg {
                out.push('-');
            }
        } else if neg {
            out.push_str(" - ");
        } else {
            out.push_str(" + ");
        }
        let mono = render_monomial(m, vars);
        let coeff_is_one = abs.is_one();
        if mono.is_empty() {
            out.push_str(&render_rat(&abs));
        } else if coeff_is_one {
            out.push_str(&mono);
        } else {
            out.push_str(&render_rat(&abs));
            out.push('*');
            out.push_str(&mono);
        }
    }
    out
}

pub fn render_rat(r: &Rat) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

fn render_monomial(m: &Monomial, vars: &[String]) -> String {
    let mut parts = Vec::new();
    for (i, &e) in m.exps().iter().enumerate() {
        match e {
            0 => {}
            1 => parts.push(vars[i].clone()),
            _ => parts.push(format!("{}^{}", vars[i], e)),
        }
    }
    parts.join("*")
}

impl fmt::Display for Poly<Rat> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vars: Vec<String> = (1..=self.nvars).map(|i| format!("x{i}")).collect();
        write!(f, "{}", render_poly(self, &vars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p_of(terms: &[(&[u32], (i64, i64))]) -> Poly<Rat> {
        let n = terms[0].0.len();
        let mut p = Poly::zero(n);
        for (e, (num, den)) in terms {
            p.add_term(Monomial::new(e.to_vec()), rat(*num, *den));
        }
        p
    }

    #[test]
    fn basis_order_two_vars_degree_two() {
        let b = monomial_basis(2, 2);
        let shown: Vec<Vec<u32>> = b.iter().map(|m| m.exps().to_vec()).collect();
        assert_eq!(
            shown,
            vec![
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![1, 1],
                vec![0, 2]
            ]
        );
    }

    #[test]
    fn basis_sizes_match_binomials() {
        fn binom(n: u64, k: u64) -> u64 {
            let mut r = 1u64;
            for i in 0..k {
                r = r * (n - i) / (i + 1);
            }
            r
        }
        for n in 1..=5usize {
            for d in 0..=6u32 {
                let len = monomial_basis(n, d).len() as u64;
                assert_eq!(len, binom((n as u32 + d) as u64, d as u64), "n={n} d={d}");
            }
        }
        assert_eq!(monomial_basis(1, 1).len(), 2);
        assert_eq!(monomial_basis(3, 2).len(), 10);
    }

    #[test]
    fn lie_derivative_of_rotation_invariant_is_zero() {
        // p = x1^2 + x2^2, f = (x2, -x1): rotational symmetry kills it.
        let p = p_of(&[(&[2, 0], (1, 1)), (&[0, 2], (1, 1))]);
        let f = VectorField::new(vec![
            Poly::var(2, 1),
            Poly::var(2, 0).neg(),
        ]);
        assert!(lie_derivative(&p, &f).is_zero());
    }

    #[test]
    fn lie_derivative_linear_example() {
        // p = u0 + u1*x with fixed numbers u0 = 3, u1 = 5; f = (2x) gives 10x.
        let p = p_of(&[(&[0], (3, 1)), (&[1], (5, 1))]);
        let f = VectorField::new(vec![Poly::var(1, 0).scale(&rat(2, 1))]);
        let d = lie_derivative(&p, &f);
        assert_eq!(d, p_of(&[(&[1], (10, 1))]));
    }

    #[test]
    fn gram_expand_two_by_two() {
        // W = [[a, b], [b, c]], m = (1, x): a + 2bx + cx^2.
        let basis = monomial_basis(1, 1);
        let mut w = SymMat::filled(2, Rat::zero());
        w.set(0, 0, rat(-7, 3));
        w.set(0, 1, rat(1, 2));
        w.set(1, 1, rat(4, 1));
        let p = gram_expand(&GramForm::new(basis, w));
        assert_eq!(
            p,
            p_of(&[(&[0], (-7, 3)), (&[1], (1, 1)), (&[2], (4, 1))])
        );
    }

    #[test]
    fn gram_expand_is_linear_in_matrix() {
        let basis = monomial_basis(2, 1);
        let a = SymMat::from_fn(3, |i, j| rat((i + 2 * j) as i64, 3));
        let b = SymMat::from_fn(3, |i, j| rat(1 + i as i64 - (j as i64), 7));
        let sum = SymMat::from_fn(3, |i, j| a.get(i, j) + b.get(i, j));
        let lhs = gram_expand(&GramForm::new(basis.clone(), sum));
        let rhs = gram_expand(&GramForm::new(basis.clone(), a))
            .add(&gram_expand(&GramForm::new(basis, b)));
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn eval_exact_is_exact() {
        let p = p_of(&[(&[0, 0], (-151, 99)), (&[0, 1], (-62, 33))]);
        let v = p.eval_exact(&[rat(7, 2), rat(-3, 4)]);
        // -151/99 + (-62/33)(-3/4) = -151/99 + 93/66 = -23/198
        assert_eq!(v, rat(-23, 198));
        assert_eq!(Poly::<Rat>::zero(2).eval_exact(&[rat(1, 1), rat(2, 1)]), rat(0, 1));
    }

    #[test]
    fn render_canonical_form() {
        let p = p_of(&[
            (&[0, 0], (-151, 99)),
            (&[0, 1], (-62, 33)),
            (&[2, 0], (1, 1)),
        ]);
        assert_eq!(p.to_string(), "-151/99 - 62/33*x2 + x1^2");
    }

    #[test]
    fn product_rule_for_lie_derivative() {
        let p = p_of(&[(&[1, 1], (2, 1)), (&[0, 1], (-1, 3))]);
        let q = p_of(&[(&[2, 0], (1, 2)), (&[0, 0], (5, 1))]);
        let f = VectorField::new(vec![
            p_of(&[(&[0, 1], (1, 1))]),
            p_of(&[(&[1, 0], (-1, 1)), (&[3, 0], (1, 3)), (&[0, 1], (-1, 1))]),
        ]);
        let lhs = lie_derivative(&p.mul(&q), &f);
        let rhs = lie_derivative(&p, &f).mul(&q).add(&p.mul(&lie_derivative(&q, &f)));
        assert_eq!(lhs, rhs);
    }
}
