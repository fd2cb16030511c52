//! Conversion of refined numeric certificates into exact rational ones.
//!
//! A numeric solution places the template coefficients and Gram matrices
//! *near* the affine set on which the matching identities hold — but
//! floating-point data proves nothing. This module closes the gap with
//! three exact tools:
//!
//! * **Truncated `PLDLᵀPᵀ` rationalization** — factor a numeric symmetric
//!   matrix, clamp negative pivots to zero, round the factors to bounded
//!   denominators, and reassemble. The result is rational and positive
//!   semidefinite *by construction*.
//! * **Simultaneous Diophantine approximation** — round a float vector to
//!   a single common denominator `q ≤ D` minimizing the worst entry error.
//!   Exhaustive over `q` (bounds here are ≤ ~1000), hence deterministic
//!   and exactly optimal.
//! * **Orthogonal projection** — with the bilinear side frozen at rational
//!   values, coefficient matching is an affine system `A·y = b` over the
//!   remaining unknowns. The weighted least-squares projection of the
//!   rationalized numeric point onto that hyperplane is computed in exact
//!   rational arithmetic, so the identities hold bit-exactly afterwards.
//!
//! Positive semidefiniteness of projected Gram blocks is not guaranteed in
//! general, but it is when the numeric block is comfortably nonsingular:
//! if `λ_min(W) > 2·η·κ₂²(A)·τ²` with `η = ‖c‖₂² + ‖W‖_F²` and the
//! refinement residual below `τ`, the projection moves `W` by less than
//! its smallest eigenvalue ([`check_theorem3`]). Singular blocks are the
//! hard case: the recovery first tries Diophantine rounding of the raw
//! entries, then a kernel reduction — rationalize the numeric kernel,
//! substitute `W = B·Z·Bᵀ` over an exact rational complement basis `B`,
//! and project the smaller, now generically nonsingular `Z`. Every path
//! ends at the same gate: the exact checker accepts, or the denominator
//! schedule escalates, or recovery fails.
//!
//! A numeric optimum sometimes trades Gram entries across a positive-
//! semidefiniteness boundary in ways no nearby rational point can mimic —
//! the float data "pays" for one tiny entry with another at residual
//! level. [`recover_snapping_template`] sidesteps this by rounding the
//! invariant template itself to small rationals, re-solving the remaining
//! multiplier problem (linear once the template is data), re-refining, and
//! recovering with the template held exact; the multipliers then join the
//! projection as ordinary unknowns instead of being frozen lossily.

use crate::checker::{psd_exact, verify_certificate};
use crate::encoder::{BmiProblem, Signedness, SosProgram, VarClass, VarId, VarOrigin};
use crate::polyalg::{rat_to_f64, Monomial, Poly, Rat, SymMat};
use crate::refine::{newton_refine_fixed_template, RefineConfig};
use crate::solver::{linearize, solve_lmi, sym_eig_min, LmiBlock, SolveOutcome, SolverConfig};
use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error)]
pub enum RecoverError {
    #[error("no denominator bound in {tried:?} yields an exactly verified certificate")]
    RecoveryFailed { tried: Vec<u64> },
    #[error("matching system inconsistent after freezing: {0}")]
    Inconsistent(String),
    #[error("singular reduced normal system (hyperplane not full row rank)")]
    SingularNormalSystem,
    #[error("no feasible multiplier assignment for the fixed template")]
    TemplateInfeasible,
}

// ---------------------------------------------------------------------------
// Rational rounding
// ---------------------------------------------------------------------------

/// The exact rational value of a finite binary64 number.
pub fn rat_exact(x: f64) -> Rat {
    Rat::from_float(x).expect("finite float")
}

/// Best rational approximation with denominator ≤ `max_den`, by continued
/// fractions with the closing semiconvergent. Ties prefer the smaller
/// denominator.
pub fn rat_approx(x: f64, max_den: u64) -> Rat {
    assert!(max_den >= 1);
    let target = rat_exact(x);
    let bound = BigInt::from(max_den);
    if target.denom() <= &bound {
        return target;
    }
    // Convergents p/q of the continued fraction of |x|.
    let neg = target.is_negative();
    let mut rest = target.abs();
    let (mut p0, mut q0) = (BigInt::one(), BigInt::zero());
    let (mut p1, mut q1) = (rest.floor().to_integer(), BigInt::one());
    rest -= Rat::from_integer(p1.clone());
    loop {
        if rest.is_zero() {
            break;
        }
        rest = rest.recip();
        let a = rest.floor().to_integer();
        rest -= Rat::from_integer(a.clone());
        let p2 = &a * &p1 + &p0;
        let q2 = &a * &q1 + &q0;
        if q2 > bound {
            // Best semiconvergent under the bound, if it beats p1/q1.
            let k = (&bound - &q0) / &q1;
            let pk = &k * &p1 + &p0;
            let qk = &k * &q1 + &q0;
            let conv = Rat::new(p1.clone(), q1.clone());
            let semi = Rat::new(pk, qk.clone());
            let target_abs = target.abs();
            let e_conv = (&target_abs - &conv).abs();
            let e_semi = (&target_abs - &semi).abs();
            if e_semi < e_conv || (e_semi == e_conv && qk < q1) {
                p1 = semi.numer().clone();
                q1 = semi.denom().clone();
            }
            break;
        }
        (p0, q0) = (p1, q1);
        (p1, q1) = (p2, q2);
    }
    let out = Rat::new(p1, q1);
    if neg {
        -out
    } else {
        out
    }
}

/// Best simultaneous rational approximation with one common denominator
/// `q ≤ d_bound`, minimizing `max_i |x_i − p_i/q|`; ties keep the smallest
/// `q`. Exhaustive scan over `q` — exact and deterministic at the bounds
/// used here.
pub fn simultaneous_diophantine(xs: &[f64], d_bound: u64) -> (Vec<Rat>, u64) {
    assert!(d_bound >= 1);
    let targets: Vec<Rat> = xs.iter().map(|&x| rat_exact(x)).collect();
    let half = Rat::new(BigInt::one(), BigInt::from(2));
    let mut best: Option<(Vec<BigInt>, u64, Rat)> = None;
    for q in 1..=d_bound {
        let qr = Rat::from_integer(BigInt::from(q));
        let mut ps = Vec::with_capacity(targets.len());
        let mut err = Rat::zero();
        for x in &targets {
            let p = (x * &qr + &half).floor().to_integer();
            let e = (x - Rat::new(p.clone(), qr.numer().clone())).abs();
            if e > err {
                err = e;
            }
            ps.push(p);
        }
        if best.as_ref().map_or(true, |(_, _, be)| err < *be) {
            let exact = err.is_zero();
            best = Some((ps, q, err));
            if exact {
                break;
            }
        }
    }
    let (ps, q, _) = best.expect("d_bound >= 1");
    let den = BigInt::from(q);
    (ps.into_iter().map(|p| Rat::new(p, den.clone())).collect(), q)
}

// ---------------------------------------------------------------------------
// Truncated PLDL^TP^T rationalization
// ---------------------------------------------------------------------------

/// Round a numeric symmetric matrix to a nearby rational matrix that is
/// positive semidefinite by construction: pivoted `LDLᵀ` in floating
/// point, negative pivots clamped to zero, factors rationalized with
/// denominators ≤ `d_bound`, then reassembled exactly.
pub fn truncate_psd_rational(w: &DMatrix<f64>, d_bound: u64) -> SymMat<Rat> {
    let n = w.nrows();
    let mut a = w.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = DMatrix::<f64>::identity(n, n);
    let mut d = vec![0.0f64; n];
    for k in 0..n {
        let mut piv = k;
        for i in k + 1..n {
            if a[(i, i)] > a[(piv, piv)] {
                piv = i;
            }
        }
        if a[(piv, piv)] <= 0.0 {
            break; // remaining block contributes nothing after clamping
        }
        if piv != k {
            perm.swap(k, piv);
            a.swap_rows(k, piv);
            a.swap_columns(k, piv);
            for col in 0..k {
                let tmp = l[(k, col)];
                l[(k, col)] = l[(piv, col)];
                l[(piv, col)] = tmp;
            }
        }
        let p = a[(k, k)];
        d[k] = p;
        for i in k + 1..n {
            l[(i, k)] = a[(i, k)] / p;
        }
        for i in k + 1..n {
            for j in k + 1..=i {
                let upd = a[(i, k)] * a[(j, k)] / p;
                a[(i, j)] -= upd;
                a[(j, i)] = a[(i, j)];
            }
        }
    }
    let lr: Vec<Vec<Rat>> = (0..n)
        .map(|i| (0..n).map(|j| rat_approx(l[(i, j)], d_bound)).collect())
        .collect();
    let dr: Vec<Rat> = d
        .iter()
        .map(|&x| if x > 0.0 { rat_approx(x, d_bound) } else { Rat::zero() })
        .collect();
    let mut out = SymMat::from_fn(n, |_, _| Rat::zero());
    for i in 0..n {
        for j in i..n {
            let mut s = Rat::zero();
            for k in 0..n {
                if dr[k].is_zero() {
                    continue;
                }
                s += &lr[i][k] * &dr[k] * &lr[j][k];
            }
            // (perm[i], perm[j]) of the output is entry (i, j) of LDL^T.
            out.set(perm[i].min(perm[j]), perm[i].max(perm[j]), s);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// The matching hyperplane A·y = b
// ---------------------------------------------------------------------------

/// The coefficient-matching identities as an affine system over the
/// unknowns left free after freezing (at exact rational values) the
/// bilinear partners and any already-recovered data.
pub struct HyperplaneSystem {
    pub a: Vec<Vec<Rat>>,
    pub b: Vec<Rat>,
    /// Column (coordinate of `y`) to registry unknown.
    pub y_layout: Vec<VarId>,
    /// Row provenance: `(constraint index, matched monomial)`.
    pub row_source: Vec<(usize, Monomial)>,
    /// Exact row rank of `A` (fraction-free elimination).
    pub rank: usize,
    pub full_row_rank: bool,
}

pub fn hyperplane_system(
    prog: &SosProgram,
    frozen: &BTreeMap<VarId, Rat>,
) -> HyperplaneSystem {
    let y_layout: Vec<VarId> = prog
        .registry
        .ids()
        .filter(|id| !frozen.contains_key(id))
        .collect();
    let col_of: BTreeMap<VarId, usize> =
        y_layout.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut row_source = Vec::new();
    for (ci, cons) in prog.constraints.iter().enumerate() {
        let res = cons
            .residual(&prog.templates, &prog.registry)
            .expect("program-built constraint assembles");
        for (mono, expr) in res.terms() {
            let (konst, coefs) = expr.affine_parts_rat(&col_of, frozen);
            if coefs.is_empty() && konst.is_zero() {
                continue;
            }
            let mut row = vec![Rat::zero(); y_layout.len()];
            for (i, c) in coefs {
                row[i] = c;
            }
            a.push(row);
            b.push(-konst);
            row_source.push((ci, mono.clone()));
        }
    }
    let rank = row_rank(&a);
    let full_row_rank = rank == a.len();
    HyperplaneSystem { a, b, y_layout, row_source, rank, full_row_rank }
}

/// Exact row rank by Gaussian elimination over the rationals.
fn row_rank(a: &[Vec<Rat>]) -> usize {
    let zeros = vec![Rat::zero(); a.len()];
    independent_rows(a, &zeros).map(|k| k.len()).unwrap_or(0)
}

/// Indices of a maximal independent subset of rows, scanning in order.
/// Errors if a dependent row is inconsistent with `b`.
fn independent_rows(a: &[Vec<Rat>], b: &[Rat]) -> Result<Vec<usize>, RecoverError> {
    // (pivot column, reduced row with pivot 1, reduced rhs, original index)
    let mut pivots: Vec<(usize, Vec<Rat>, Rat)> = Vec::new();
    let mut kept = Vec::new();
    for (ri, row) in a.iter().enumerate() {
        let mut r = row.clone();
        let mut rb = b[ri].clone();
        for (pc, pr, pb) in &pivots {
            if !r[*pc].is_zero() {
                let f = r[*pc].clone();
                for (x, y) in r.iter_mut().zip(pr.iter()) {
                    if !y.is_zero() {
                        *x -= &f * y;
                    }
                }
                rb -= &f * pb;
            }
        }
        match r.iter().position(|x| !x.is_zero()) {
            Some(pc) => {
                let f = r[pc].clone();
                for x in r.iter_mut() {
                    *x /= &f;
                }
                rb /= &f;
                pivots.push((pc, r, rb));
                kept.push(ri);
            }
            None => {
                if !rb.is_zero() {
                    return Err(RecoverError::Inconsistent(format!(
                        "row {ri} reduces to 0 = {rb}"
                    )));
                }
            }
        }
    }
    Ok(kept)
}

/// Solve a square nonsingular rational system by Gaussian elimination.
fn solve_linear(mut m: Vec<Vec<Rat>>, mut rhs: Vec<Rat>) -> Option<Vec<Rat>> {
    let n = m.len();
    for c in 0..n {
        let piv = (c..n).find(|&r| !m[r][c].is_zero())?;
        m.swap(c, piv);
        rhs.swap(c, piv);
        let p = m[c][c].clone();
        for x in m[c].iter_mut() {
            *x /= &p;
        }
        rhs[c] /= &p;
        for r in 0..n {
            if r == c || m[r][c].is_zero() {
                continue;
            }
            let f = m[r][c].clone();
            let (head, tail) = m.split_at_mut(r.max(c));
            let (src, dst) = if r > c {
                (&head[c], &mut tail[0])
            } else {
                (&tail[0], &mut head[r])
            };
            for (x, y) in dst.iter_mut().zip(src.iter()) {
                if !y.is_zero() {
                    *x -= &f * y;
                }
            }
            let sub = &f * &rhs[c];
            rhs[r] -= sub;
        }
    }
    Some(rhs)
}

/// Exact weighted least-squares projection onto `{y : A·y = b}`:
/// minimize `Σ wᵢ(yᵢ − y0ᵢ)²` subject to the hyperplane. Consistent
/// dependent rows are dropped; the result satisfies every original row
/// bit-exactly and projecting twice is the identity.
pub fn project_orthogonal(
    y0: &[Rat],
    weights: &[Rat],
    hp: &HyperplaneSystem,
) -> Result<Vec<Rat>, RecoverError> {
    project_raw(&hp.a, &hp.b, weights, y0)
}

fn project_raw(
    a: &[Vec<Rat>],
    b: &[Rat],
    weights: &[Rat],
    y0: &[Rat],
) -> Result<Vec<Rat>, RecoverError> {
    let kept = independent_rows(a, b)?;
    let r = kept.len();
    let ncols = y0.len();
    let winv: Vec<Rat> = weights.iter().map(|w| w.recip()).collect();
    // rhs_i = b_i − a_i · y0 ; M_ij = a_i · W⁻¹ · a_j
    let mut m = vec![vec![Rat::zero(); r]; r];
    let mut rhs = Vec::with_capacity(r);
    for (i, &ri) in kept.iter().enumerate() {
        let ai = &a[ri];
        let mut dot = Rat::zero();
        for c in 0..ncols {
            if !ai[c].is_zero() {
                dot += &ai[c] * &y0[c];
            }
        }
        rhs.push(&b[ri] - dot);
        for (j, &rj) in kept.iter().enumerate().take(i + 1) {
            let aj = &a[rj];
            let mut s = Rat::zero();
            for c in 0..ncols {
                if !ai[c].is_zero() && !aj[c].is_zero() {
                    s += &ai[c] * &winv[c] * &aj[c];
                }
            }
            m[i][j] = s.clone();
            m[j][i] = s;
        }
    }
    let mu = solve_linear(m, rhs).ok_or(RecoverError::SingularNormalSystem)?;
    let mut y = y0.to_vec();
    for (i, &ri) in kept.iter().enumerate() {
        if mu[i].is_zero() {
            continue;
        }
        let ai = &a[ri];
        for c in 0..ncols {
            if !ai[c].is_zero() {
                let add = &winv[c] * &ai[c] * &mu[i];
                y[c] += add;
            }
        }
    }
    debug_assert!(a.iter().zip(b).all(|(row, bi)| {
        let mut s = Rat::zero();
        for (x, yi) in row.iter().zip(&y) {
            if !x.is_zero() {
                s += x * yi;
            }
        }
        s == *bi
    }));
    Ok(y)
}

// ---------------------------------------------------------------------------
// Soundness prediction for the projection path
// ---------------------------------------------------------------------------

/// Numeric data deciding whether projection is guaranteed to preserve
/// positive definiteness: the minimal block eigenvalue must dominate the
/// projection's worst-case displacement `2·η·κ₂²(A)·τ²`.
#[derive(Clone, Debug)]
pub struct Theorem3Data {
    /// Smallest eigenvalue across the Gram blocks being projected.
    pub lambda: f64,
    /// `‖c‖₂² + Σ‖W‖_F²` of the numeric certificate.
    pub eta: f64,
    /// Spectral condition number of `A` (power-iteration estimate).
    pub kappa2: f64,
    /// Refinement tolerance: the backward error is below this.
    pub tau: f64,
}

/// Advisory strict inequality `λ > 2ηκ₂²τ²`; the exact decomposition in
/// the checker remains the authority either way.
pub fn check_theorem3(t3: &Theorem3Data) -> bool {
    t3.lambda > 2.0 * t3.eta * t3.kappa2 * t3.kappa2 * t3.tau * t3.tau
}

/// Condition number estimate of a (full-row-rank) matrix via power
/// iteration on `AAᵀ` and on its spectral complement.
pub fn kappa2_estimate(a: &DMatrix<f64>) -> f64 {
    let r = a.nrows();
    if r == 0 {
        return 1.0;
    }
    let m = a * a.transpose();
    let power = |mat: &DMatrix<f64>| -> f64 {
        let mut v = nalgebra::DVector::<f64>::from_element(r, 1.0);
        v /= v.norm();
        let mut lam = 0.0;
        for _ in 0..500 {
            let w = mat * &v;
            let n = w.norm();
            if n == 0.0 {
                return 0.0;
            }
            v = w / n;
            lam = n;
        }
        lam
    };
    let lmax = power(&m);
    if lmax <= 0.0 {
        return f64::INFINITY;
    }
    let shifted = DMatrix::<f64>::identity(r, r) * (lmax * 1.000001) - &m;
    let lmin = lmax * 1.000001 - power(&shifted);
    if lmin <= 0.0 {
        return f64::INFINITY;
    }
    (lmax / lmin).sqrt()
}

// ---------------------------------------------------------------------------
// Full certificate recovery
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RecoveryCase {
    /// All Gram blocks numerically nonsingular: orthogonal projection.
    Projection,
    /// All blocks singular: one joint Diophantine rounding.
    JointDiophantine,
    /// Some blocks singular: Diophantine on those plus the linear
    /// coefficients, projection for the rest.
    MixedDiophantine { singular: usize },
    /// Singular blocks reparametrized over a rationalized kernel
    /// complement, then everything projected jointly.
    KernelReduced { reduced: usize },
}

/// An exactly verified assignment: the matching identities hold bit-exactly
/// and every sum-of-squares block is exactly positive semidefinite.
#[derive(Clone, Debug)]
pub struct RationalCertificate {
    /// Full registry assignment.
    pub vals: Vec<Rat>,
    /// `(location id, part, polynomial)` per invariant template.
    pub invariants: Vec<(String, usize, Poly<Rat>)>,
    pub denominator_bound_used: u64,
    pub case: RecoveryCase,
    /// Populated when at least one block went through projection.
    pub theorem3: Option<Theorem3Data>,
}

struct UBlock {
    entries: Vec<VarId>,
    side: usize,
    singular: bool,
    min_eig: f64,
    fro: f64,
}

fn gram_f64(entries: &[VarId], side: usize, vals: &[f64]) -> DMatrix<f64> {
    let idx = SymMat::<Rat>::vech_indices(side);
    let mut m = DMatrix::zeros(side, side);
    for (k, (i, j)) in idx.into_iter().enumerate() {
        m[(i, j)] = vals[entries[k].0];
        m[(j, i)] = vals[entries[k].0];
    }
    m
}

/// Frobenius weights for a block's upper-triangle entries (off-diagonal
/// entries appear twice in the matrix).
fn vech_weights(side: usize) -> Vec<Rat> {
    SymMat::<Rat>::vech_indices(side)
        .into_iter()
        .map(|(i, j)| if i == j { Rat::one() } else { Rat::from_integer(BigInt::from(2)) })
        .collect()
}

/// The escalating denominator schedule: coarse bounds first (they yield
/// the smallest certificates when the solution is nearby), the caller's
/// bound last.
fn schedule_for(d_bound: u64) -> Vec<u64> {
    let mut s: Vec<u64> = [10u64, 100, d_bound].into_iter().filter(|q| *q <= d_bound).collect();
    s.dedup();
    s
}

/// Recover an exactly verified rational certificate from a refined
/// numeric assignment, escalating the denominator bound over
/// `{10, 100, d_bound}` and trying, per the block singularity pattern:
/// orthogonal projection, literal Diophantine rounding, and kernel-reduced
/// projection. Every candidate must pass the exact checker to be returned.
pub fn recover_certificate(
    prog: &SosProgram,
    vals: &[f64],
    d_bound: u64,
    tau: f64,
) -> Result<RationalCertificate, RecoverError> {
    recover_in(prog, vals, d_bound, tau, None)
}

/// `template = None`: the bilinear side (V class) is frozen at rational
/// values and the template is among the unknowns. `template = Some(map)`:
/// the template coefficients are held at the given exact rationals — the
/// identities are then affine in everything else, so the V-class
/// multipliers become projection unknowns and their Sos blocks ordinary
/// Gram blocks.
fn recover_in(
    prog: &SosProgram,
    vals: &[f64],
    d_bound: u64,
    tau: f64,
    template: Option<&BTreeMap<VarId, Rat>>,
) -> Result<RationalCertificate, RecoverError> {
    let reg = &prog.registry;

    // Freeze the bilinear partner class at rational values. Any sum-of-
    // squares block living on that side is rationalized PSD-preservingly.
    // With a fixed template nothing else needs freezing.
    let mut frozen: BTreeMap<VarId, Rat> = template.cloned().unwrap_or_default();
    if template.is_none() {
        for cons in &prog.constraints {
            for mb in &cons.multipliers {
                if mb.signedness == Signedness::Sos && mb.class == VarClass::V {
                    let side = mb.basis.len();
                    let w =
                        truncate_psd_rational(&gram_f64(&mb.entries, side, vals), d_bound);
                    for (k, (i, j)) in
                        SymMat::<Rat>::vech_indices(side).into_iter().enumerate()
                    {
                        frozen.insert(mb.entries[k], w.get(i, j));
                    }
                }
            }
        }
        for id in reg.ids() {
            if reg.class(id) == VarClass::V && !frozen.contains_key(&id) {
                frozen.insert(id, rat_approx(vals[id.0], d_bound));
            }
        }
    }

    // The unknowns: unfrozen linear coefficients and the live Gram blocks.
    let lin: Vec<VarId> = reg
        .ids()
        .filter(|id| {
            !frozen.contains_key(id)
                && (template.is_some() || reg.class(*id) == VarClass::U)
                && matches!(
                    reg.info(*id).origin,
                    VarOrigin::TemplateCoeff { .. } | VarOrigin::FreeCoeff { .. }
                )
        })
        .collect();
    let mut blocks: Vec<UBlock> = Vec::new();
    let thresh = |fro: f64| tau.sqrt() * (1.0 + fro);
    let push_block = |entries: &[VarId], side: usize, blocks: &mut Vec<UBlock>| {
        let w = gram_f64(entries, side, vals);
        let min_eig = sym_eig_min(&w);
        let fro = w.norm();
        blocks.push(UBlock {
            entries: entries.to_vec(),
            side,
            singular: min_eig < thresh(fro),
            min_eig,
            fro,
        });
    };
    for cons in &prog.constraints {
        for mb in &cons.multipliers {
            if mb.signedness == Signedness::Sos
                && (mb.class == VarClass::U || template.is_some())
            {
                push_block(&mb.entries, mb.basis.len(), &mut blocks);
            }
        }
        push_block(&cons.remainder_entries, cons.remainder_basis.len(), &mut blocks);
    }

    let hp = hyperplane_system(prog, &frozen);
    let n_sing = blocks.iter().filter(|b| b.singular).count();

    // Advisory soundness data for the projection path.
    let theorem3 = {
        let lambda = blocks.iter().map(|b| b.min_eig).fold(f64::INFINITY, f64::min);
        let eta = lin.iter().map(|id| vals[id.0] * vals[id.0]).sum::<f64>()
            + blocks.iter().map(|b| b.fro * b.fro).sum::<f64>();
        let rows = hp.a.len();
        let cols = hp.y_layout.len();
        let mut af = DMatrix::zeros(rows, cols);
        for (i, row) in hp.a.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                af[(i, j)] = rat_to_f64(x);
            }
        }
        Theorem3Data { lambda, eta, kappa2: kappa2_estimate(&af), tau }
    };

    // Per-column weights of the Frobenius/Euclidean objective.
    let weight_of: BTreeMap<VarId, Rat> = {
        let mut w: BTreeMap<VarId, Rat> = lin.iter().map(|id| (*id, Rat::one())).collect();
        for bl in &blocks {
            for (id, wt) in bl.entries.iter().zip(vech_weights(bl.side)) {
                w.insert(*id, wt);
            }
        }
        w
    };

    let schedule = schedule_for(d_bound);

    let accept = |vals_rat: Vec<Rat>, q: u64, case: RecoveryCase| -> Option<RationalCertificate> {
        if !verify_certificate(prog, &vals_rat).ok() {
            return None;
        }
        let invariants = prog
            .templates
            .iter()
            .map(|t| (t.loc.clone(), t.part, t.poly_at(&vals_rat)))
            .collect();
        Some(RationalCertificate {
            vals: vals_rat,
            invariants,
            denominator_bound_used: q,
            case,
            theorem3: Some(theorem3.clone()),
        })
    };
    let merge = |frozen: &BTreeMap<VarId, Rat>, hp: &HyperplaneSystem, y: &[Rat]| -> Vec<Rat> {
        let mut out = vec![Rat::zero(); reg.len()];
        for (id, v) in frozen {
            out[id.0] = v.clone();
        }
        for (id, v) in hp.y_layout.iter().zip(y) {
            out[id.0] = v.clone();
        }
        out
    };

    // Projection starting points: first the schedule's coarse rounding
    // (small output denominators when the solution is nearby), then the
    // exact rational value of the refined floats — whose distance to the
    // hyperplane is the refinement residual, so the projection's
    // displacement cannot push a genuinely positive eigenvalue negative.
    let starts = |q: u64| [Some(q), None];
    let round_at = |x: f64, start: Option<u64>| match start {
        Some(q) => rat_approx(x, q),
        None => rat_exact(x),
    };

    for &q in &schedule {
        if n_sing == 0 {
            // Case 1: project everything.
            for start in starts(q) {
                let y0: Vec<Rat> =
                    hp.y_layout.iter().map(|id| round_at(vals[id.0], start)).collect();
                let w: Vec<Rat> =
                    hp.y_layout.iter().map(|id| weight_of[id].clone()).collect();
                if let Ok(y) = project_orthogonal(&y0, &w, &hp) {
                    if let Some(cert) =
                        accept(merge(&frozen, &hp, &y), q, RecoveryCase::Projection)
                    {
                        return Ok(cert);
                    }
                }
            }
        } else if n_sing == blocks.len() {
            // Case 2.1: one joint Diophantine rounding of every unknown.
            let xs: Vec<f64> = hp.y_layout.iter().map(|id| vals[id.0]).collect();
            let (ys, _) = simultaneous_diophantine(&xs, q);
            if let Some(cert) =
                accept(merge(&frozen, &hp, &ys), q, RecoveryCase::JointDiophantine)
            {
                return Ok(cert);
            }
        } else {
            // Case 2.2: Diophantine on the linear coefficients and the
            // singular blocks together, then project the rest.
            let mut fixed_ids: Vec<VarId> = lin.clone();
            for bl in blocks.iter().filter(|b| b.singular) {
                fixed_ids.extend_from_slice(&bl.entries);
            }
            let xs: Vec<f64> = fixed_ids.iter().map(|id| vals[id.0]).collect();
            let (ys, _) = simultaneous_diophantine(&xs, q);
            let mut frozen2 = frozen.clone();
            for (id, v) in fixed_ids.iter().zip(ys) {
                frozen2.insert(*id, v);
            }
            let rounded_psd = blocks.iter().filter(|b| b.singular).all(|bl| {
                let entries: Vec<Rat> =
                    bl.entries.iter().map(|id| frozen2[id].clone()).collect();
                let idx = SymMat::<Rat>::vech_indices(bl.side);
                let mut m = SymMat::from_fn(bl.side, |_, _| Rat::zero());
                for (k, (i, j)) in idx.into_iter().enumerate() {
                    m.set(i, j, entries[k].clone());
                }
                psd_exact(&m).psd
            });
            if rounded_psd {
                let hp2 = hyperplane_system(prog, &frozen2);
                for start in starts(q) {
                    let y0: Vec<Rat> =
                        hp2.y_layout.iter().map(|id| round_at(vals[id.0], start)).collect();
                    let w: Vec<Rat> =
                        hp2.y_layout.iter().map(|id| weight_of[id].clone()).collect();
                    if let Ok(y) = project_orthogonal(&y0, &w, &hp2) {
                        if let Some(cert) = accept(
                            merge(&frozen2, &hp2, &y),
                            q,
                            RecoveryCase::MixedDiophantine { singular: n_sing },
                        ) {
                            return Ok(cert);
                        }
                    }
                }
            }
        }

        // Kernel-reduction fallback for singular blocks.
        if n_sing > 0 {
            for start in starts(q) {
                let attempt = kernel_reduced_attempt(
                    prog, vals, &frozen, &hp, &lin, &blocks, &weight_of, q, start, tau,
                );
                if let Some(vals_rat) = attempt {
                    if let Some(cert) =
                        accept(vals_rat, q, RecoveryCase::KernelReduced { reduced: n_sing })
                    {
                        return Ok(cert);
                    }
                }
            }
        }
    }
    Err(RecoverError::RecoveryFailed { tried: schedule })
}

/// Derive exactly verified multipliers and Gram blocks for a template
/// held at the given exact rational coefficients: with the template as
/// data the matrix inequality is linear, so one interior-point solve over
/// the remaining unknowns (warm-started from `warm` when available),
/// a refinement pass with the template pinned, and a recovery in which
/// the bilinear side participates as ordinary projection unknowns.
#[allow(clippy::too_many_arguments)]
pub fn certify_fixed_template(
    prog: &SosProgram,
    bmi: &BmiProblem,
    template: &BTreeMap<VarId, Rat>,
    warm: Option<&[f64]>,
    d_bound: u64,
    tau: f64,
    solver_cfg: &SolverConfig,
    refine_cfg: &RefineConfig,
) -> Result<RationalCertificate, RecoverError> {
    let reg = &prog.registry;
    let mut fixed: Vec<f64> =
        warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; reg.len()]);
    for (id, v) in template {
        fixed[id.0] = rat_to_f64(v);
    }
    let active: Vec<VarId> = bmi
        .u
        .iter()
        .chain(&bmi.v)
        .copied()
        .filter(|id| !template.contains_key(id))
        .collect();
    let mut lmi = linearize(bmi, &active, &fixed);
    // The feasible set of the multiplier problem contains recession rays
    // (e.g. ν ↦ ν − s·φ, W ↦ W + s·Gram(φ²) for any s ≥ 0), along which
    // the log-det barrier inflates the iterate without bound. A generous
    // per-coordinate box around the warm start keeps the solve in the
    // region the refinement and recovery can actually use.
    for (k, id) in active.iter().enumerate() {
        let c = fixed[id.0];
        let r = 4.0 * (1.0 + c.abs());
        let scalar = |v: f64| DMatrix::from_element(1, 1, v);
        let mut lo = vec![DMatrix::zeros(1, 1); lmi.nvars];
        lo[k] = scalar(1.0);
        lmi.blocks.push(LmiBlock { c: scalar(r - c), coef: lo });
        let mut hi = vec![DMatrix::zeros(1, 1); lmi.nvars];
        hi[k] = scalar(-1.0);
        lmi.blocks.push(LmiBlock { c: scalar(r + c), coef: hi });
    }
    let sol = match solve_lmi(&lmi, solver_cfg) {
        SolveOutcome::Feasible(s) if s.margin > -1e-4 => s,
        _ => return Err(RecoverError::TemplateInfeasible),
    };
    let pos: BTreeMap<VarId, usize> =
        active.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let at = |id: &VarId| pos.get(id).map_or(fixed[id.0], |&i| sol.x[i]);
    let u_vals: Vec<f64> = bmi.u.iter().map(at).collect();
    let v_vals: Vec<f64> = bmi.v.iter().map(at).collect();
    let full = bmi.full_assignment_f64(&u_vals, &v_vals);

    let pinned: BTreeSet<VarId> = template.keys().copied().collect();
    let refined = newton_refine_fixed_template(prog, &full, refine_cfg, &pinned);
    recover_in(prog, &refined.vals, d_bound, tau, Some(template))
}

/// Fallback recovery when [`recover_certificate`] fails: round the free
/// template coefficients to one small common denominator (escalating over
/// the usual schedule), resolve anchored coefficients exactly from the
/// snapped values, and run [`certify_fixed_template`]. Rounding the
/// template first discards exactly the degenerate float-only trades that
/// block direct recovery, at the price of one extra numeric solve.
pub fn recover_snapping_template(
    prog: &SosProgram,
    bmi: &BmiProblem,
    vals: &[f64],
    d_bound: u64,
    tau: f64,
    solver_cfg: &SolverConfig,
    refine_cfg: &RefineConfig,
) -> Result<RationalCertificate, RecoverError> {
    let reg = &prog.registry;
    let free_tpl: Vec<VarId> = bmi
        .u
        .iter()
        .copied()
        .filter(|id| matches!(reg.info(*id).origin, VarOrigin::TemplateCoeff { .. }))
        .collect();
    if free_tpl.is_empty() {
        return Err(RecoverError::TemplateInfeasible);
    }
    let xs: Vec<f64> = free_tpl.iter().map(|id| vals[id.0]).collect();
    let mut tried = Vec::new();
    for q in schedule_for(d_bound) {
        let (cs, _) = simultaneous_diophantine(&xs, q);
        let mut template: BTreeMap<VarId, Rat> =
            free_tpl.iter().copied().zip(cs).collect();
        // Coefficients eliminated by an anchor depend on the template
        // alone; resolve them exactly at the snapped values.
        let mut full_r = vec![Rat::zero(); reg.len()];
        for (id, v) in &template {
            full_r[id.0] = v.clone();
        }
        for (id, e) in &bmi.eliminated {
            if matches!(reg.info(*id).origin, VarOrigin::TemplateCoeff { .. }) {
                template.insert(*id, e.eval_rat(&full_r));
            }
        }
        tried.push(q);
        if let Ok(cert) = certify_fixed_template(
            prog, bmi, &template, Some(vals), d_bound, tau, solver_cfg, refine_cfg,
        ) {
            return Ok(cert);
        }
    }
    Err(RecoverError::RecoveryFailed { tried })
}

/// Exact unnormalized Gram–Schmidt complement of rational vectors `ker`
/// in dimension `s`: returns mutually orthogonal columns spanning the
/// orthogonal complement of `span(ker)`.
fn orthogonal_complement(ker: &[Vec<Rat>], s: usize) -> Vec<Vec<Rat>> {
    let dot = |u: &[Rat], v: &[Rat]| -> Rat {
        u.iter().zip(v).fold(Rat::zero(), |acc, (a, b)| acc + a * b)
    };
    let mut basis: Vec<Vec<Rat>> = Vec::new(); // kernel part first, then complement
    let orthogonalize = |v: &[Rat], basis: &mut Vec<Vec<Rat>>| -> Option<Vec<Rat>> {
        let mut w = v.to_vec();
        for u in basis.iter() {
            let num = dot(&w, u);
            if num.is_zero() {
                continue;
            }
            let f = num / dot(u, u);
            for (wi, ui) in w.iter_mut().zip(u) {
                *wi -= &f * ui;
            }
        }
        if w.iter().all(|x| x.is_zero()) {
            None
        } else {
            Some(w)
        }
    };
    let mut n_kernel = 0;
    for v in ker {
        if let Some(w) = orthogonalize(v, &mut basis) {
            basis.push(w);
            n_kernel += 1;
        }
    }
    let mut out = Vec::new();
    for i in 0..s {
        let mut e = vec![Rat::zero(); s];
        e[i] = Rat::one();
        if let Some(w) = orthogonalize(&e, &mut basis) {
            basis.push(w.clone());
            out.push(w);
        }
    }
    let _ = n_kernel;
    out
}

#[allow(clippy::too_many_arguments)]
fn kernel_reduced_attempt(
    prog: &SosProgram,
    vals: &[f64],
    frozen: &BTreeMap<VarId, Rat>,
    hp: &HyperplaneSystem,
    _lin: &[VarId],
    blocks: &[UBlock],
    weight_of: &BTreeMap<VarId, Rat>,
    q: u64,
    start: Option<u64>,
    tau: f64,
) -> Option<Vec<Rat>> {
    let reg = &prog.registry;
    let round_at = |x: f64| match start {
        Some(q) => rat_approx(x, q),
        None => rat_exact(x),
    };
    let col_of: BTreeMap<VarId, usize> =
        hp.y_layout.iter().enumerate().map(|(i, v)| (*v, i)).collect();

    // Rationalize each singular block's numeric kernel and build the exact
    // complement basis B with BᵀB diagonal.
    struct Reduced {
        entry_cols: Vec<usize>,
        side: usize,
        b_cols: Vec<Vec<Rat>>,
        dnorm: Vec<Rat>,
        z0: Vec<Rat>,    // vech of the projection's starting point
        z_cols: usize,
    }
    let mut reductions: Vec<Reduced> = Vec::new();
    let mut reduced_cols: Vec<bool> = vec![false; hp.y_layout.len()];
    for bl in blocks.iter().filter(|b| b.singular) {
        let s = bl.side;
        let w = gram_f64(&bl.entries, s, vals);
        let eig = nalgebra::SymmetricEigen::new(w.clone());
        // Only directions at refinement-residual level are treated as true
        // kernel; small-but-genuine eigenvalues (between τ and √τ scales)
        // stay inside the reduced block and survive projection on their own.
        let cutoff = tau * (1.0 + bl.fro);
        let mut ker: Vec<Vec<Rat>> = Vec::new();
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam < cutoff {
                let col: Vec<f64> = (0..s).map(|i| eig.eigenvectors[(i, k)]).collect();
                let (kr, _) = simultaneous_diophantine(&col, q);
                if kr.iter().any(|x| !x.is_zero()) {
                    ker.push(kr);
                }
            }
        }
        let b_cols = orthogonal_complement(&ker, s);
        let m = b_cols.len();
        let dnorm: Vec<Rat> = b_cols
            .iter()
            .map(|c| c.iter().fold(Rat::zero(), |acc, x| acc + x * x))
            .collect();
        // Starting point: Z₀ = D⁻¹ Bᵀ W̃₀ B D⁻¹ from the rationalized block.
        let w0: Vec<Vec<Rat>> = (0..s)
            .map(|i| (0..s).map(|j| round_at(w[(i, j)])).collect())
            .collect();
        let mut z0 = Vec::new();
        for zi in 0..m {
            for zj in zi..m {
                let mut s_acc = Rat::zero();
                for a in 0..s {
                    if b_cols[zi][a].is_zero() {
                        continue;
                    }
                    for bb in 0..s {
                        if !b_cols[zj][bb].is_zero() && !w0[a][bb].is_zero() {
                            s_acc += &b_cols[zi][a] * &w0[a][bb] * &b_cols[zj][bb];
                        }
                    }
                }
                z0.push(s_acc / (&dnorm[zi] * &dnorm[zj]));
            }
        }
        let entry_cols: Vec<usize> = bl.entries.iter().map(|id| col_of[id]).collect();
        for &c in &entry_cols {
            reduced_cols[c] = true;
        }
        reductions.push(Reduced { entry_cols, side: s, b_cols, dnorm, z0, z_cols: m });
    }

    // New column layout: retained original columns, then Z blocks.
    let retained: Vec<usize> =
        (0..hp.y_layout.len()).filter(|c| !reduced_cols[*c]).collect();
    let retained_pos: BTreeMap<usize, usize> =
        retained.iter().enumerate().map(|(new, old)| (*old, new)).collect();
    let mut z_offsets = Vec::new();
    let mut ncols = retained.len();
    for red in &reductions {
        z_offsets.push(ncols);
        ncols += red.z_cols * (red.z_cols + 1) / 2;
    }

    // Transform A: W_ab = Σ_{i≤j} (B_ai B_bj + [i≠j] B_aj B_bi) Z_ij.
    let mut a2: Vec<Vec<Rat>> = Vec::with_capacity(hp.a.len());
    for row in &hp.a {
        let mut r2 = vec![Rat::zero(); ncols];
        for (old, x) in row.iter().enumerate() {
            if x.is_zero() {
                continue;
            }
            if let Some(&new) = retained_pos.get(&old) {
                r2[new] = x.clone();
            }
        }
        for (ri, red) in reductions.iter().enumerate() {
            let idx = SymMat::<Rat>::vech_indices(red.side);
            let mut z_local = 0usize;
            for zi in 0..red.z_cols {
                for zj in zi..red.z_cols {
                    let mut coef = Rat::zero();
                    for (k, (a, b)) in idx.iter().enumerate() {
                        let x = &row[red.entry_cols[k]];
                        if x.is_zero() {
                            continue;
                        }
                        // Coefficient of the Z entry in the single matrix
                        // entry W_ab; the encoding's off-diagonal doubling
                        // is already part of the row coefficient.
                        let mut g = &red.b_cols[zi][*a] * &red.b_cols[zj][*b];
                        if zi != zj {
                            g += &red.b_cols[zj][*a] * &red.b_cols[zi][*b];
                        }
                        if !g.is_zero() {
                            coef += x * g;
                        }
                    }
                    r2[z_offsets[ri] + z_local] = coef;
                    z_local += 1;
                }
            }
        }
        a2.push(r2);
    }

    // Weights and starting point in the reduced coordinates.
    let mut w2 = vec![Rat::zero(); ncols];
    let mut y02 = vec![Rat::zero(); ncols];
    for (&old, &new) in &retained_pos {
        let id = hp.y_layout[old];
        w2[new] = weight_of[&id].clone();
        y02[new] = round_at(vals[id.0]);
    }
    for (ri, red) in reductions.iter().enumerate() {
        let mut z_local = 0usize;
        for zi in 0..red.z_cols {
            for zj in zi..red.z_cols {
                let mut wt = &red.dnorm[zi] * &red.dnorm[zj];
                if zi != zj {
                    wt *= Rat::from_integer(BigInt::from(2));
                }
                w2[z_offsets[ri] + z_local] = wt;
                y02[z_offsets[ri] + z_local] = red.z0[z_local].clone();
                z_local += 1;
            }
        }
    }

    let mut y2 = project_raw(&a2, &hp.b, &w2, &y02).ok()?;

    let z_of = |y: &[Rat], ri: usize, red: &Reduced| -> Vec<Vec<Rat>> {
        let m = red.z_cols;
        let mut z = vec![vec![Rat::zero(); m]; m];
        let mut z_local = 0usize;
        for zi in 0..m {
            for zj in zi..m {
                z[zi][zj] = y[z_offsets[ri] + z_local].clone();
                z[zj][zi] = z[zi][zj].clone();
                z_local += 1;
            }
        }
        z
    };
    let z_psd = |y: &[Rat], ri: usize, red: &Reduced| -> bool {
        let z = z_of(y, ri, red);
        let m = red.z_cols;
        let mut sm = SymMat::from_fn(m, |_, _| Rat::zero());
        for i in 0..m {
            for j in i..m {
                sm.set(i, j, z[i][j].clone());
            }
        }
        psd_exact(&sm).psd
    };

    // The minimal-distance point can sit a hair below the PSD cone when
    // the slice forces entries the numeric block balanced differently.
    // Climb back in: aim at the current bottom eigendirection u, move
    // along the null-space component of vech(u·uᵀ) (so A·y = b is
    // untouched), with a numerically guided exact rational step.
    'climb: for _ in 0..4 {
        let mut worst: Option<(usize, f64, Vec<f64>)> = None;
        for (ri, red) in reductions.iter().enumerate() {
            let z = z_of(&y2, ri, red);
            let m = red.z_cols;
            let zf = DMatrix::<f64>::from_fn(m, m, |i, j| rat_to_f64(&z[i][j]));
            let eig = nalgebra::SymmetricEigen::new(zf);
            let (kmin, lam) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .fold((0usize, f64::INFINITY), |acc, (i, &l)| {
                    if l < acc.1 {
                        (i, l)
                    } else {
                        acc
                    }
                });
            if worst.as_ref().map_or(true, |(_, wl, _)| lam < *wl) {
                let u: Vec<f64> = (0..m).map(|i| eig.eigenvectors[(i, kmin)]).collect();
                worst = Some((ri, lam, u));
            }
        }
        let (ri, lam, u) = worst?;
        if lam > 0.0 && reductions.iter().enumerate().all(|(i, r)| z_psd(&y2, i, r)) {
            break 'climb;
        }
        let red = &reductions[ri];
        let m = red.z_cols;
        let ur: Vec<Rat> = u.iter().map(|&x| rat_approx(x, 1 << 20)).collect();
        let mut v = vec![Rat::zero(); ncols];
        let mut z_local = 0usize;
        for zi in 0..m {
            for zj in zi..m {
                v[z_offsets[ri] + z_local] = &ur[zi] * &ur[zj];
                z_local += 1;
            }
        }
        let zeros = vec![Rat::zero(); a2.len()];
        let d = project_raw(&a2, &zeros, &w2, &v).ok()?;
        if d.iter().all(|x| x.is_zero()) {
            return None;
        }
        // Numeric line search for the step that lifts the bottom of the
        // spectrum the most; the exact PSD gate below remains authoritative.
        let mut best_t: Option<(Rat, f64)> = None;
        for k in [12i32, 10, 8, 7, 6, 5, 4, 3, 2] {
            let t = Rat::new(BigInt::one(), BigInt::from(10u64).pow(k as u32));
            let y_t: Vec<Rat> = y2.iter().zip(&d).map(|(a, b)| a + &t * b).collect();
            let min_eig_after = reductions
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let mm = r.z_cols;
                    let z = z_of(&y_t, i, r);
                    let zf = DMatrix::<f64>::from_fn(mm, mm, |a, b| rat_to_f64(&z[a][b]));
                    sym_eig_min(&zf)
                })
                .fold(f64::INFINITY, f64::min);
            if best_t.as_ref().map_or(true, |(_, b)| min_eig_after > *b) {
                best_t = Some((t, min_eig_after));
            }
        }
        let (t, _) = best_t?;
        y2 = y2.iter().zip(&d).map(|(a, b)| a + &t * b).collect();
    }

    if !reductions.iter().enumerate().all(|(i, r)| z_psd(&y2, i, r)) {
        return None;
    }

    // Reassemble the full assignment.
    let mut out = vec![Rat::zero(); reg.len()];
    for (id, v) in frozen {
        out[id.0] = v.clone();
    }
    for (&old, &new) in &retained_pos {
        out[hp.y_layout[old].0] = y2[new].clone();
    }
    for (ri, red) in reductions.iter().enumerate() {
        let z = z_of(&y2, ri, red);
        let m = red.z_cols;
        let idx = SymMat::<Rat>::vech_indices(red.side);
        for (k2, (a, b)) in idx.into_iter().enumerate() {
            let mut s_acc = Rat::zero();
            for zi in 0..m {
                if red.b_cols[zi][a].is_zero() {
                    continue;
                }
                for zj in 0..m {
                    if !red.b_cols[zj][b].is_zero() && !z[zi][zj].is_zero() {
                        s_acc += &red.b_cols[zi][a] * &z[zi][zj] * &red.b_cols[zj][b];
                    }
                }
            }
            let id = hp.y_layout[red.entry_cols[k2]];
            out[id.0] = s_acc;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::{identity_check, verify_certificate};
    use crate::encoder::{assemble_bmi, build_sos_program, EncodeOptions, Mode};
    use crate::model::parse_system;
    use crate::polyalg::{rat, rat_int};
    use crate::refine::{newton_refine, RefineConfig};
    use crate::solver::{solve_bmi_alternating, SolverConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn best_rational_approximations() {
        assert_eq!(rat_approx(0.5, 2), rat(1, 2));
        assert_eq!(rat_approx(1.0 / 3.0, 10), rat(1, 3));
        assert_eq!(rat_approx(std::f64::consts::PI, 113), rat(355, 113));
        assert_eq!(rat_approx(std::f64::consts::PI, 500), rat(355, 113));
        assert_eq!(rat_approx(-7.0 / 9.0, 100), rat(-7, 9));
        // Already representable: returned exactly.
        assert_eq!(rat_approx(0.375, 1000), rat(3, 8));
    }

    #[test]
    fn diophantine_rounding_recovers_the_intended_fractions() {
        let (v, q) = simultaneous_diophantine(&[0.333333, 0.666667], 10);
        assert_eq!(v, vec![rat(1, 3), rat(2, 3)]);
        assert_eq!(q, 3);

        // Exactly representable input is returned exactly.
        let (v, _) = simultaneous_diophantine(&[0.25, 0.5], 10);
        assert_eq!(v, vec![rat(1, 4), rat(1, 2)]);

        // Decimal renderings of -53/39 and 8/13 land back on them.
        let (v, q) = simultaneous_diophantine(&[-1.358974, 0.615385], 100);
        assert_eq!(v, vec![rat(-53, 39), rat(8, 13)]);
        assert_eq!(q, 39);
    }

    #[test]
    fn diophantine_recovers_planted_vectors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = rng.gen_range(1..=1000u64);
            let planted: Vec<Rat> = (0..4)
                .map(|_| rat(rng.gen_range(-3000..=3000), q as i64))
                .collect();
            let xs: Vec<f64> = planted.iter().map(rat_to_f64).collect();
            let (v, _) = simultaneous_diophantine(&xs, 1000);
            assert_eq!(v, planted, "q = {q}");
        }
    }

    #[test]
    fn truncation_yields_exactly_psd_matrices() {
        let id3 = DMatrix::<f64>::identity(3, 3);
        let t = truncate_psd_rational(&id3, 10);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.get(i, j), if i == j { Rat::one() } else { Rat::zero() });
            }
        }

        let half = DMatrix::<f64>::from_diagonal_element(2, 2, 0.5);
        let t = truncate_psd_rational(&half, 2);
        assert_eq!(t.get(0, 0), rat(1, 2));
        assert_eq!(t.get(1, 1), rat(1, 2));
        assert_eq!(t.get(0, 1), Rat::zero());

        // Numerically PSD with one eigenvalue −1e-12: the result is exactly
        // PSD and within Frobenius distance 1e-6.
        let (c, s) = (0.6f64, 0.8f64);
        let r = DMatrix::<f64>::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let lam = DMatrix::<f64>::from_diagonal(&nalgebra::DVector::from_vec(vec![
            1.0, 2.0, -1e-12,
        ]));
        let w = &r * lam * r.transpose();
        let t = truncate_psd_rational(&w, 10_000_000);
        assert!(psd_exact(&t).psd);
        let mut dist2 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d = rat_to_f64(&t.get(i, j)) - w[(i, j)];
                dist2 += d * d;
            }
        }
        assert!(dist2.sqrt() < 1e-6, "Frobenius distance {}", dist2.sqrt());
    }

    /// The classic one-dimensional flow `ẋ = 2x` on the invariant strip
    /// `1 − x² ≥ 0` with a degree-1 template: the matching row for the
    /// constant monomial must express the remainder Gram corner as
    /// `Q₁₁ = −σ − ν̃·c₀` once the bilinear side is frozen at ν̃.
    #[test]
    fn hyperplane_rows_reproduce_the_hand_computed_gram_matching() {
        const SYS: &str = "\
system expanding_line;
vars x;
init x >= 0;
location l0 {
  flow x' = 2*x;
  inv 1 - x^2 >= 0;
  unsafe x - 10 >= 0;
}
";
        let h = parse_system(SYS).unwrap();
        let opts = EncodeOptions { eps1: Some(Rat::zero()), ..EncodeOptions::default() };
        let prog = build_sos_program(&h, 1, 0, Mode::Bmi, &opts).unwrap();
        let flow = prog
            .constraints
            .iter()
            .position(|c| c.name.contains("flow"))
            .unwrap();
        let cons = &prog.constraints[flow];
        assert_eq!(cons.remainder_basis.len(), 2, "remainder basis {{1, x}}");

        // Freeze every bilinear-side coefficient: the multiplier of the
        // template is 1/2 on its constant monomial and 0 elsewhere.
        let mut frozen = BTreeMap::new();
        for id in prog.registry.ids() {
            if prog.registry.class(id) == VarClass::U {
                continue;
            }
            let constant = match &prog.registry.info(id).origin {
                VarOrigin::FreeCoeff { mono, .. } => mono.degree() == 0,
                _ => false,
            };
            frozen.insert(id, if constant { rat(1, 2) } else { Rat::zero() });
        }
        let hp = hyperplane_system(&prog, &frozen);
        assert!(hp.full_row_rank);

        let row_idx = hp
            .row_source
            .iter()
            .position(|(ci, m)| *ci == flow && m.degree() == 0)
            .expect("constant-monomial row of the flow identity");
        let row = &hp.a[row_idx];
        assert!(hp.b[row_idx].is_zero());

        let col = |id: VarId| hp.y_layout.iter().position(|v| *v == id).unwrap();
        let tpl = &prog.templates[0];
        let c0 = tpl.coeffs[tpl.basis.iter().position(|m| m.degree() == 0).unwrap()];
        let sigma = cons.multipliers[0].entries[0];
        assert_eq!(cons.multipliers[0].basis.len(), 1, "scalar invariant multiplier");
        let q11 = cons.remainder_entries[0];

        assert_eq!(row[col(c0)], rat(-1, 2), "-nu tilde times the constant coefficient");
        assert_eq!(row[col(sigma)], rat(-1, 1));
        assert_eq!(row[col(q11)], rat(-1, 1));
        let nonzero = row.iter().filter(|x| !x.is_zero()).count();
        assert_eq!(nonzero, 3, "no other unknown in the constant row");
    }

    fn planted_hyperplane(
        rng: &mut rand_chacha::ChaCha8Rng,
        rows: usize,
        cols: usize,
    ) -> (Vec<Vec<Rat>>, Vec<Rat>, Vec<Rat>) {
        // [M | I] is always full row rank; y* is a random rational point.
        let mut a = vec![vec![Rat::zero(); cols]; rows];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate().take(cols - rows) {
                *x = rat_int(rng.gen_range(-2..=2));
                let _ = j;
            }
            row[cols - rows + i] = Rat::one();
        }
        let ystar: Vec<Rat> =
            (0..cols).map(|_| rat(rng.gen_range(-20..=20), rng.gen_range(1..=6))).collect();
        let b: Vec<Rat> = a
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&ystar)
                    .fold(Rat::zero(), |acc, (x, y)| acc + x * y)
            })
            .collect();
        (a, b, ystar)
    }

    #[test]
    fn projection_is_exact_and_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (a, b, _) = planted_hyperplane(&mut rng, 3, 9);
            let hp = HyperplaneSystem {
                a: a.clone(),
                b: b.clone(),
                y_layout: (0..9).map(VarId).collect(),
                row_source: vec![],
                rank: 3,
                full_row_rank: true,
            };
            let y0: Vec<Rat> =
                (0..9).map(|_| rat(rng.gen_range(-30..=30), rng.gen_range(1..=5))).collect();
            let weights: Vec<Rat> =
                (0..9).map(|_| rat_int(rng.gen_range(1..=2))).collect();
            let y = project_orthogonal(&y0, &weights, &hp).unwrap();
            for (row, bi) in a.iter().zip(&b) {
                let dot = row
                    .iter()
                    .zip(&y)
                    .fold(Rat::zero(), |acc, (x, yi)| acc + x * yi);
                assert_eq!(dot, *bi);
            }
            let again = project_orthogonal(&y, &weights, &hp).unwrap();
            assert_eq!(again, y);
        }
    }

    #[test]
    fn projection_onto_a_forced_point() {
        // One equation in one unknown: y = 5, whatever the start.
        let hp = HyperplaneSystem {
            a: vec![vec![Rat::one()]],
            b: vec![rat_int(5)],
            y_layout: vec![VarId(0)],
            row_source: vec![],
            rank: 1,
            full_row_rank: true,
        };
        let y = project_orthogonal(&[rat(7, 3)], &[Rat::one()], &hp).unwrap();
        assert_eq!(y, vec![rat_int(5)]);

        // A point already on the hyperplane is returned unchanged.
        let y2 = project_orthogonal(&y, &[Rat::one()], &hp).unwrap();
        assert_eq!(y2, y);
    }

    #[test]
    fn dependent_but_consistent_rows_are_tolerated() {
        // Second row is twice the first; third contradicts.
        let a = vec![
            vec![Rat::one(), Rat::one()],
            vec![rat_int(2), rat_int(2)],
        ];
        let b = vec![rat_int(3), rat_int(6)];
        let hp = HyperplaneSystem {
            a,
            b,
            y_layout: vec![VarId(0), VarId(1)],
            row_source: vec![],
            rank: 1,
            full_row_rank: false,
        };
        let y =
            project_orthogonal(&[Rat::zero(), Rat::zero()], &[Rat::one(), Rat::one()], &hp)
                .unwrap();
        assert_eq!(y, vec![rat(3, 2), rat(3, 2)]);

        let bad = HyperplaneSystem {
            a: vec![vec![Rat::one()], vec![Rat::one()]],
            b: vec![rat_int(1), rat_int(2)],
            y_layout: vec![VarId(0)],
            row_source: vec![],
            rank: 1,
            full_row_rank: false,
        };
        assert!(matches!(
            project_orthogonal(&[Rat::zero()], &[Rat::one()], &bad),
            Err(RecoverError::Inconsistent(_))
        ));
    }

    #[test]
    fn theorem3_gate() {
        let t = Theorem3Data { lambda: 1.0, eta: 1.0, kappa2: 1.0, tau: 1e-10 };
        assert!(check_theorem3(&t));
        let t0 = Theorem3Data { lambda: 0.0, ..t };
        assert!(!check_theorem3(&t0));
    }

    /// Planted full-rank instances: when the nonsingularity margin of
    /// Theorem 3 holds, the projected Gram block is always exactly PSD.
    #[test]
    fn projection_of_comfortably_nonsingular_blocks_is_always_psd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let tau = 1e-10f64;
        for trial in 0..50 {
            // y = (c, vech W) with W = L·Lᵀ + I strictly positive definite.
            let s = 3usize;
            let vech = SymMat::<Rat>::vech_indices(s);
            let c_star: Vec<Rat> = (0..2).map(|_| rat(rng.gen_range(-8..=8), 4)).collect();
            let mut lmat = vec![vec![Rat::zero(); s]; s];
            for i in 0..s {
                for j in 0..=i {
                    lmat[i][j] = rat(rng.gen_range(-2..=2), 1);
                }
            }
            let mut wstar = SymMat::from_fn(s, |_, _| Rat::zero());
            for i in 0..s {
                for j in i..s {
                    let mut acc = if i == j { Rat::one() } else { Rat::zero() };
                    for k in 0..s {
                        acc += &lmat[i][k] * &lmat[j][k];
                    }
                    wstar.set(i, j, acc);
                }
            }
            let ystar: Vec<Rat> = c_star
                .iter()
                .cloned()
                .chain(vech.iter().map(|(i, j)| wstar.get(*i, *j)))
                .collect();
            let cols = ystar.len();
            let rows = 4usize;
            let mut a = vec![vec![Rat::zero(); cols]; rows];
            for (i, row) in a.iter_mut().enumerate() {
                for x in row.iter_mut().take(cols - rows) {
                    *x = rat_int(rng.gen_range(-2..=2));
                }
                row[cols - rows + i] = Rat::one();
            }
            let b: Vec<Rat> = a
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&ystar)
                        .fold(Rat::zero(), |acc, (x, y)| acc + x * y)
                })
                .collect();
            let hp = HyperplaneSystem {
                a: a.clone(),
                b,
                y_layout: (0..cols).map(VarId).collect(),
                row_source: vec![],
                rank: rows,
                full_row_rank: true,
            };

            // Numeric certificate: y* plus refinement-sized noise.
            let ynum: Vec<f64> = ystar
                .iter()
                .map(|x| rat_to_f64(x) + rng.gen_range(-1e-12..1e-12))
                .collect();
            let mut weights = vec![Rat::one(); 2];
            weights.extend(vech.iter().map(|(i, j)| {
                if i == j {
                    Rat::one()
                } else {
                    rat_int(2)
                }
            }));
            let y0: Vec<Rat> = ynum.iter().map(|&x| rat_approx(x, 1000)).collect();
            let y = project_orthogonal(&y0, &weights, &hp).unwrap();

            let mut wtil = SymMat::from_fn(s, |_, _| Rat::zero());
            for (k, (i, j)) in vech.iter().enumerate() {
                wtil.set(*i, *j, y[2 + k].clone());
            }
            assert!(psd_exact(&wtil).psd, "trial {trial}");

            let mut af = DMatrix::zeros(rows, cols);
            for (i, row) in a.iter().enumerate() {
                for (j, x) in row.iter().enumerate() {
                    af[(i, j)] = rat_to_f64(x);
                }
            }
            let wnum = gram_f64(
                &(0..vech.len()).map(|k| VarId(k)).collect::<Vec<_>>(),
                s,
                &ynum[2..].to_vec(),
            );
            let t3 = Theorem3Data {
                lambda: sym_eig_min(&wnum),
                eta: ynum[..2].iter().map(|x| x * x).sum::<f64>()
                    + wnum.norm() * wnum.norm(),
                kappa2: kappa2_estimate(&af),
                tau,
            };
            assert!(check_theorem3(&t3), "trial {trial}: premise must hold");
        }
    }

    pub(super) const EX2: &str = "\
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

    fn ex2_setup() -> (crate::model::HybridSystem, SosProgram, crate::encoder::BmiProblem) {
        let h = parse_system(EX2).unwrap();
        let opts = EncodeOptions {
            anchor: Some(vec![rat(3, 2), Rat::zero()]),
            ..EncodeOptions::default()
        };
        let prog = build_sos_program(&h, 2, 1, Mode::Bmi, &opts).unwrap();
        let bmi = assemble_bmi(&prog).unwrap();
        (h, prog, bmi)
    }

    #[test]
    fn end_to_end_recovery_certifies_the_planar_cubic_system() {
        let (h, prog, bmi) = ex2_setup();
        let sol = solve_bmi_alternating(&bmi, None, &SolverConfig::default())
            .feasible()
            .expect("numeric phase succeeds at degree 2");
        let vals = bmi.full_assignment_f64(&sol.u, &sol.v);
        let refined = newton_refine(&prog, &vals, &RefineConfig::default());
        assert!(refined.theta < 1e-10, "theta = {}", refined.theta);

        let cert = recover_certificate(&prog, &refined.vals, 1000, 1e-10)
            .or_else(|_| {
                recover_snapping_template(
                    &prog,
                    &bmi,
                    &refined.vals,
                    1000,
                    1e-10,
                    &SolverConfig::default(),
                    &RefineConfig::default(),
                )
            })
            .expect("rational recovery succeeds");
        assert!(verify_certificate(&prog, &cert.vals).ok());
        assert!(identity_check(&prog, &cert.vals));

        // The invariant excludes the unsafe disk and covers the initial one.
        let phi = &cert.invariants[0].2;
        assert_eq!(cert.invariants.len(), 1);
        assert!(phi.eval_exact(&[rat(3, 2), Rat::zero()]).is_positive());
        assert!(phi.eval_exact(&[rat_int(-1), rat_int(-1)]).is_negative());

        let report = crate::checker::verify_safety(
            &h,
            &prog,
            &cert.vals,
            &crate::checker::CheckConfig::default(),
        );
        assert_eq!(report.verdict, crate::checker::Verdict::Safe);
    }

    #[test]
    fn no_unverified_certificate_escapes_under_perturbation() {
        let (_h, prog, bmi) = ex2_setup();
        let sol = solve_bmi_alternating(&bmi, None, &SolverConfig::default())
            .feasible()
            .expect("numeric phase succeeds at degree 2");
        let base = bmi.full_assignment_f64(&sol.u, &sol.v);
        let refined = newton_refine(&prog, &base, &RefineConfig::default());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut successes = 0;
        for _ in 0..25 {
            let scale = 10f64.powf(rng.gen_range(-9.0..-2.0));
            let noisy: Vec<f64> = refined
                .vals
                .iter()
                .map(|x| x + rng.gen_range(-scale..scale))
                .collect();
            let attempt = recover_certificate(&prog, &noisy, 1000, 1e-10).or_else(|_| {
                recover_snapping_template(
                    &prog,
                    &bmi,
                    &noisy,
                    1000,
                    1e-10,
                    &SolverConfig::default(),
                    &RefineConfig::default(),
                )
            });
            if let Ok(cert) = attempt {
                successes += 1;
                assert!(
                    verify_certificate(&prog, &cert.vals).ok(),
                    "an unverified certificate escaped"
                );
            }
        }
        // Small perturbations are recoverable; the exact count is not
        // pinned, only that recovery never lies.
        assert!(successes > 0, "recovery never succeeded");
    }
}
