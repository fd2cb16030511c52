//! Exact verification of rational certificates, and a numeric falsifier.
//!
//! Everything on the certification path here is exact rational arithmetic:
//! positive semidefiniteness is decided by a pivoted `P·W·Pᵀ = L·D·Lᵀ`
//! factorization over ℚ, and the matching identities are re-expanded and
//! compared coefficient by coefficient. A certificate is accepted only
//! when every residual polynomial is identically zero and every Gram block
//! is exactly PSD — no tolerance appears anywhere on the SAFE path. The
//! strict inequalities of the barrier conditions (flow progress, negativity
//! on the unsafe set) are carried by the constant slacks fixed at encoding
//! time: identity + PSD + slack > 0 implies strictness.
//!
//! The falsifier is the opposite tool: a deterministic sampling search for
//! a rational point that satisfies a condition's antecedent exactly and
//! violates its consequent exactly. A found point refutes the candidate;
//! absence of one proves nothing.

use crate::encoder::{ConstraintKind, Mode, Signedness, SosProgram, VarId};
use crate::model::{HybridSystem, SemialgebraicSet};
use crate::polyalg::{rat, render_poly, Monomial, Poly, Rat, SymMat};
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};

/// Pivoted rational `L·D·Lᵀ` factorization of a permuted symmetric matrix.
#[derive(Clone, Debug)]
pub struct LdltResult {
    /// Row permutation: entry `i` of the permuted matrix is row `perm[i]`
    /// of the input, i.e. `(P·W·Pᵀ)[i][j] = W[perm[i]][perm[j]]`.
    pub perm: Vec<usize>,
    /// Unit lower triangular factor.
    pub l: Vec<Vec<Rat>>,
    /// Diagonal pivots (zeros for a terminated zero block).
    pub d: Vec<Rat>,
    pub psd: bool,
}

/// Exact positive-semidefiniteness via greedy max-diagonal pivoting.
///
/// A zero pivot is legal only when the entire remaining block is zero: a
/// PSD matrix with a zero diagonal entry must have a zero row there, so a
/// nonzero remainder under an all-nonpositive diagonal refutes PSD-ness.
/// When the decomposition runs to completion (or terminates on a zero
/// block), `P·W·Pᵀ = L·D·Lᵀ` holds bit-exactly.
pub fn psd_exact(w: &SymMat<Rat>) -> LdltResult {
    let n = w.side();
    let mut a: Vec<Vec<Rat>> = (0..n)
        .map(|i| (0..n).map(|j| w.get(i, j)).collect())
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l: Vec<Vec<Rat>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { Rat::one() } else { Rat::zero() }).collect())
        .collect();
    let mut d = vec![Rat::zero(); n];
    let mut psd = true;

    for k in 0..n {
        let mut piv = k;
        for i in k + 1..n {
            if a[i][i] > a[piv][piv] {
                piv = i;
            }
        }
        if !a[piv][piv].is_positive() {
            // The largest remaining diagonal entry is ≤ 0.
            let block_zero = (k..n).all(|i| (k..=i).all(|j| a[i][j].is_zero()));
            psd = block_zero;
            break;
        }
        if piv != k {
            perm.swap(k, piv);
            a.swap(k, piv);
            for row in a.iter_mut() {
                row.swap(k, piv);
            }
            // Previously computed L columns follow their rows.
            for col in 0..k {
                let tmp = l[k][col].clone();
                l[k][col] = l[piv][col].clone();
                l[piv][col] = tmp;
            }
        }
        let p = a[k][k].clone();
        d[k] = p.clone();
        for i in k + 1..n {
            l[i][k] = &a[i][k] / &p;
        }
        for i in k + 1..n {
            let aik = a[i][k].clone();
            for j in k + 1..=i {
                let upd = &aik * &a[j][k] / &p;
                a[i][j] = &a[i][j] - &upd;
                let v = a[i][j].clone();
                a[j][i] = v;
            }
        }
    }

    LdltResult { perm, l, d, psd }
}

/// Gram block of `side` rows read from an upper-triangle row-major entry
/// list at a full rational assignment.
pub fn gram_at(entries: &[VarId], side: usize, vals: &[Rat]) -> SymMat<Rat> {
    let idx = SymMat::<Rat>::vech_indices(side);
    assert_eq!(entries.len(), idx.len());
    let mut m = SymMat::from_fn(side, |_, _| Rat::zero());
    for (k, (i, j)) in idx.into_iter().enumerate() {
        m.set(i, j, vals[entries[k].0].clone());
    }
    m
}

/// Per-constraint matching residuals at an exact assignment. A certificate
/// is identity-exact iff every returned polynomial is zero.
pub fn identity_residuals(prog: &SosProgram, vals: &[Rat]) -> Vec<(String, Poly<Rat>)> {
    prog.constraints
        .iter()
        .map(|c| {
            let sym = c
                .residual(&prog.templates, &prog.registry)
                .expect("program-built constraint assembles");
            (c.name.clone(), sym.eval_rat(vals))
        })
        .collect()
}

pub fn identity_check(prog: &SosProgram, vals: &[Rat]) -> bool {
    identity_residuals(prog, vals).iter().all(|(_, p)| p.is_zero())
}

/// One Gram block's verification record.
#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub constraint: String,
    pub block: String,
    pub psd: bool,
}

/// Exact verification of a full assignment against a program: matching
/// identities hold bit-exactly and every sum-of-squares block is PSD.
pub struct CertificateCheck {
    pub identity_ok: bool,
    /// Constraints whose residual is not identically zero.
    pub bad_residuals: Vec<(String, Poly<Rat>)>,
    pub blocks: Vec<BlockCheck>,
}

impl CertificateCheck {
    pub fn all_psd(&self) -> bool {
        self.blocks.iter().all(|b| b.psd)
    }

    pub fn ok(&self) -> bool {
        self.identity_ok && self.all_psd()
    }
}

pub fn verify_certificate(prog: &SosProgram, vals: &[Rat]) -> CertificateCheck {
    let residuals = identity_residuals(prog, vals);
    let bad_residuals: Vec<_> =
        residuals.into_iter().filter(|(_, p)| !p.is_zero()).collect();
    let mut blocks = Vec::new();
    for c in &prog.constraints {
        for mb in &c.multipliers {
            if mb.signedness == Signedness::Sos {
                blocks.push(BlockCheck {
                    constraint: c.name.clone(),
                    block: mb.role.clone(),
                    psd: psd_exact(&gram_at(&mb.entries, mb.basis.len(), vals)).psd,
                });
            }
        }
        blocks.push(BlockCheck {
            constraint: c.name.clone(),
            block: "remainder".into(),
            psd: psd_exact(&gram_at(&c.remainder_entries, c.remainder_basis.len(), vals)).psd,
        });
    }
    CertificateCheck { identity_ok: bad_residuals.is_empty(), bad_residuals, blocks }
}

// ---------------------------------------------------------------------------
// Falsification
// ---------------------------------------------------------------------------

/// A universally quantified claim `∀x ∈ antecedent: consequent(x) ▷ 0`
/// with `▷` either `>` (strict) or `≥`.
#[derive(Clone, Debug)]
pub struct Implication {
    pub antecedent: SemialgebraicSet,
    pub consequent: Poly<Rat>,
    pub strict: bool,
}

/// Deterministic counterexample search: dyadic grids of increasing depth
/// over `[-4, 4]ⁿ`, swept outward from the origin in max-norm shells, then
/// seeded random rationals with denominator 2¹⁰. Membership and violation
/// are both decided exactly. Returns the first violating point found;
/// `None` proves nothing.
pub fn falsify(imp: &Implication, budget: usize, seed: u64) -> Option<Vec<Rat>> {
    let n = imp.consequent.nvars();
    let violated = |pt: &[Rat]| -> bool {
        if !imp.antecedent.contains(pt) {
            return false;
        }
        let v = imp.consequent.eval_exact(pt);
        if imp.strict { !v.is_positive() } else { v.is_negative() }
    };

    let mut used = 0usize;
    // Dyadic sweep: levels of step 4/2ˡ. Points already visited at a
    // coarser level (all coordinates even) are skipped; within a level,
    // shells of growing max-norm keep small points first.
    for level in 0u32..6 {
        let denom = 1i64 << level;
        let span = 4 * denom;
        for r in 0..=span {
            let mut idx = vec![-r; n];
            loop {
                let on_shell = idx.iter().map(|k| k.abs()).max().unwrap_or(0) == r;
                let fresh = level == 0 || idx.iter().any(|k| k.rem_euclid(2) != 0);
                if on_shell && fresh {
                    let pt: Vec<Rat> = idx.iter().map(|k| rat(*k, denom)).collect();
                    used += 1;
                    if violated(&pt) {
                        return Some(pt);
                    }
                    if used >= budget {
                        return None;
                    }
                }
                // advance the odometer over [-r, r]^n
                let mut c = 0;
                loop {
                    if c == n {
                        break;
                    }
                    idx[c] += 1;
                    if idx[c] <= r {
                        break;
                    }
                    idx[c] = -r;
                    c += 1;
                }
                if c == n {
                    break;
                }
            }
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    while used < budget {
        let pt: Vec<Rat> = (0..n).map(|_| rat(rng.gen_range(-4096..=4096), 1024)).collect();
        used += 1;
        if violated(&pt) {
            return Some(pt);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Safety report
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Safe,
    Unknown,
    Falsified,
}

#[derive(Clone, Debug)]
pub struct ConditionRow {
    pub name: String,
    pub kind: ConstraintKind,
    pub certified: bool,
    pub counterexample: Option<Vec<Rat>>,
    pub note: String,
}

#[derive(Clone, Debug)]
pub struct SafetyReport {
    pub verdict: Verdict,
    /// `(location id, part, polynomial)` per invariant template.
    pub invariants: Vec<(String, usize, Poly<Rat>)>,
    pub rows: Vec<ConditionRow>,
    pub seed: u64,
}

impl SafetyReport {
    pub fn render(&self, vars: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&format!("verdict: {:?}\n", self.verdict));
        for (loc, part, p) in &self.invariants {
            out.push_str(&format!("invariant {loc}.{part}: {}\n", render_poly(p, vars)));
        }
        for row in &self.rows {
            let status = if row.certified {
                "certified".to_string()
            } else if let Some(pt) = &row.counterexample {
                let coords: Vec<String> = pt.iter().map(|r| r.to_string()).collect();
                format!("falsified at ({})", coords.join(", "))
            } else {
                "unknown".to_string()
            };
            out.push_str(&format!("condition {}: {status}", row.name));
            if !row.note.is_empty() {
                out.push_str(&format!("  [{}]", row.note));
            }
            out.push('\n');
        }
        out.push_str(&format!("falsifier seed: {}\n", self.seed));
        out
    }
}

/// Extract the assignment map of a reset whose equalities all have the
/// form `xᵢ' − p(x) = 0`; `None` for relational resets.
fn reset_map(reset: &SemialgebraicSet, n: usize) -> Option<Vec<Poly<Rat>>> {
    let mut map: Vec<Option<Poly<Rat>>> = vec![None; n];
    for q in &reset.equalities {
        // Exactly one primed variable, linearly, with coefficient ±1.
        let mut primed: Option<(usize, Rat)> = None;
        let mut rest = Poly::zero(n);
        for (m, c) in q.terms() {
            let prim: Vec<usize> = (n..2 * n).filter(|i| m.exp(*i) > 0).collect();
            if prim.is_empty() {
                let unlifted = Monomial::new(m.exps()[..n].to_vec());
                rest.add_term(unlifted, c.clone());
            } else if prim.len() == 1 && m.exp(prim[0]) == 1 && m.degree() == 1 {
                if primed.is_some() {
                    return None;
                }
                primed = Some((prim[0] - n, c.clone()));
            } else {
                return None;
            }
        }
        let (i, coef) = primed?;
        if map[i].is_some() {
            return None;
        }
        // coef·xᵢ' + rest = 0  ⇒  xᵢ' = −rest/coef
        map[i] = Some(rest.scale(&(-Rat::one() / coef)));
    }
    if !reset.conjuncts.is_empty() {
        return None;
    }
    map.into_iter().collect()
}

#[derive(Clone, Debug)]
pub struct CheckConfig {
    pub falsify_budget: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { falsify_budget: 20_000, seed: 0 }
    }
}

/// Full safety verdict for an exact assignment: SAFE iff every condition
/// certifies exactly; FALSIFIED if a sampled counterexample refutes one of
/// the falsifiable conditions; UNKNOWN otherwise.
pub fn verify_safety(
    h: &HybridSystem,
    prog: &SosProgram,
    vals: &[Rat],
    cfg: &CheckConfig,
) -> SafetyReport {
    let n = h.vars.len();
    let check = verify_certificate(prog, vals);
    let invariants: Vec<(String, usize, Poly<Rat>)> = prog
        .templates
        .iter()
        .map(|t| (t.loc.clone(), t.part, t.poly_at(vals)))
        .collect();
    let phi_of = |loc: usize, part: usize| -> Poly<Rat> {
        let id = &h.locations[loc].id;
        prog.templates
            .iter()
            .position(|t| &t.loc == id && t.part == part)
            .map(|i| invariants[i].2.clone())
            .expect("template for location")
    };

    let mut rows = Vec::new();
    let mut any_falsified = false;
    for (ci, cons) in prog.constraints.iter().enumerate() {
        let identity_ok = !check.bad_residuals.iter().any(|(nm, _)| nm == &cons.name);
        let blocks_ok = check
            .blocks
            .iter()
            .filter(|b| b.constraint == cons.name)
            .all(|b| b.psd);
        let certified = identity_ok && blocks_ok;
        let _ = ci;

        let mut note = String::new();
        let mut counterexample = None;
        match cons.kind {
            ConstraintKind::Continuous => {
                note = if cons.slack.is_positive() {
                    format!("strict flow progress via slack {}", cons.slack)
                } else {
                    "nonstrict flow condition (strengthened form)".into()
                };
                // The antecedent pins the invariant's zero set — not
                // samplable exactly; no falsification attempted.
            }
            ConstraintKind::Init => {
                if !certified {
                    let imp = Implication {
                        antecedent: h.init.clone(),
                        consequent: phi_of(cons.loc, cons.part),
                        strict: false,
                    };
                    counterexample = falsify(&imp, cfg.falsify_budget, cfg.seed);
                }
            }
            ConstraintKind::UnsafeSeparation => {
                note = format!("strict separation via slack {}", cons.slack);
                if !certified {
                    let region = &h.locations[cons.loc].unsafe_regions[cons.aux];
                    let antecedent = if prog.mode == Mode::Boundary {
                        // The claim holds on the boundary only. For a single
                        // inequality {g >= 0} that boundary is captured by
                        // {g = 0}; skip sampling in richer geometries rather
                        // than risk a point outside the claimed domain.
                        if region.conjuncts.len() == 1 && region.equalities.is_empty() {
                            Some(SemialgebraicSet {
                                conjuncts: vec![],
                                equalities: region.conjuncts.clone(),
                            })
                        } else {
                            note.push_str("; boundary not samplable");
                            None
                        }
                    } else {
                        Some(region.clone())
                    };
                    if let Some(antecedent) = antecedent {
                        let imp = Implication {
                            antecedent,
                            consequent: phi_of(cons.loc, cons.part).neg(),
                            strict: true,
                        };
                        counterexample = falsify(&imp, cfg.falsify_budget, cfg.seed);
                    }
                }
            }
            ConstraintKind::ConjunctionSeparation => {
                note = format!("strict separation via slack {}", cons.slack);
                if !certified {
                    let region = &h.locations[cons.loc].unsafe_regions[cons.aux];
                    let zeta = region.conjuncts[0].clone();
                    let antecedent = SemialgebraicSet {
                        conjuncts: vec![phi_of(cons.loc, 0), phi_of(cons.loc, 1)],
                        equalities: vec![],
                    };
                    let imp =
                        Implication { antecedent, consequent: zeta.neg(), strict: true };
                    counterexample = falsify(&imp, cfg.falsify_budget, cfg.seed);
                }
            }
            ConstraintKind::Discrete => {
                let t = &h.transitions[cons.aux];
                if !certified {
                    if let Some(map) = reset_map(&t.reset, n) {
                        let mut conjuncts = t.guard.conjuncts.clone();
                        let parts = if prog.mode == Mode::Conjunction { 2 } else { 1 };
                        for p in 0..parts {
                            conjuncts.push(phi_of(cons.loc, p));
                        }
                        let antecedent = SemialgebraicSet {
                            conjuncts,
                            equalities: t.guard.equalities.clone(),
                        };
                        let post_loc = h
                            .locations
                            .iter()
                            .position(|l| l.id == t.post)
                            .expect("transition target exists");
                        let imp = Implication {
                            antecedent,
                            consequent: phi_of(post_loc, cons.part).compose(&map),
                            strict: false,
                        };
                        counterexample = falsify(&imp, cfg.falsify_budget, cfg.seed);
                    } else {
                        note = "relational reset: no sampling".into();
                    }
                }
            }
        }
        if counterexample.is_some() {
            any_falsified = true;
        }
        rows.push(ConditionRow {
            name: cons.name.clone(),
            kind: cons.kind,
            certified,
            counterexample,
            note,
        });
    }

    let verdict = if rows.iter().all(|r| r.certified) {
        Verdict::Safe
    } else if any_falsified {
        Verdict::Falsified
    } else {
        Verdict::Unknown
    };
    SafetyReport { verdict, invariants, rows, seed: cfg.seed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{assemble_bmi, build_sos_program, EncodeOptions, Mode};
    use crate::model::parse_system;
    use crate::polyalg::rat_int;

    fn sym(rows: &[&[i64]]) -> SymMat<Rat> {
        let n = rows.len();
        SymMat::from_fn(n, |i, j| rat_int(rows[i][j]))
    }

    #[test]
    fn identity_and_hand_matrices() {
        let id = sym(&[&[1, 0], &[0, 1]]);
        let r = psd_exact(&id);
        assert!(r.psd);
        assert_eq!(r.d, vec![rat_int(1), rat_int(1)]);

        // Indefinite: det = −3.
        assert!(!psd_exact(&sym(&[&[1, 2], &[2, 1]])).psd);

        // PD with pivots 2, 3/2.
        let r = psd_exact(&sym(&[&[2, 1], &[1, 2]]));
        assert!(r.psd);
        assert_eq!(r.d, vec![rat_int(2), rat(3, 2)]);
    }

    #[test]
    fn zero_pivot_rules() {
        // Zero diagonal with nonzero off-diagonal is not PSD.
        assert!(!psd_exact(&sym(&[&[0, 1], &[1, 0]])).psd);
        // The zero matrix is PSD.
        assert!(psd_exact(&sym(&[&[0, 0], &[0, 0]])).psd);
        // Semidefinite with an exactly singular direction.
        assert!(psd_exact(&sym(&[&[1, 1], &[1, 1]])).psd);
    }

    /// Brute force: PSD ⇔ every principal minor is ≥ 0.
    fn psd_minor_oracle(w: &SymMat<Rat>) -> bool {
        let n = w.side();
        for mask in 1u32..(1 << n) {
            let rows: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let k = rows.len();
            let mut m: Vec<Vec<Rat>> = rows
                .iter()
                .map(|&i| rows.iter().map(|&j| w.get(i, j)).collect())
                .collect();
            // exact determinant by fraction-free-ish Gaussian elimination
            let mut det = Rat::one();
            let mut sign = Rat::one();
            for c in 0..k {
                let piv = (c..k).find(|&r| !m[r][c].is_zero());
                let Some(piv) = piv else {
                    det = Rat::zero();
                    break;
                };
                if piv != c {
                    m.swap(c, piv);
                    sign = -sign;
                }
                det = det * m[c][c].clone();
                for r in c + 1..k {
                    let f = &m[r][c] / &m[c][c];
                    for cc in c..k {
                        let upd = &f * &m[c][cc];
                        m[r][cc] = &m[r][cc] - &upd;
                    }
                }
            }
            if (det * sign).is_negative() {
                return false;
            }
        }
        true
    }

    #[test]
    fn ldlt_matches_the_principal_minor_oracle_exhaustively() {
        // Every symmetric matrix up to 3×3 with entries in {0, ±1/2, ±1, ±2}.
        let vals: Vec<Rat> =
            vec![rat_int(0), rat(1, 2), rat(-1, 2), rat_int(1), rat_int(-1), rat_int(2), rat_int(-2)];
        // 1×1 and 2×2: all; 3×3: all (7^6 = 117649).
        for &n in &[1usize, 2, 3] {
            let slots = n * (n + 1) / 2;
            let mut idx = vec![0usize; slots];
            loop {
                let mut m = SymMat::from_fn(n, |_, _| Rat::zero());
                let mut k = 0;
                for i in 0..n {
                    for j in i..n {
                        m.set(i, j, vals[idx[k]].clone());
                        k += 1;
                    }
                }
                assert_eq!(
                    psd_exact(&m).psd,
                    psd_minor_oracle(&m),
                    "disagreement on {m:?}"
                );
                let mut c = 0;
                while c < slots {
                    idx[c] += 1;
                    if idx[c] < vals.len() {
                        break;
                    }
                    idx[c] = 0;
                    c += 1;
                }
                if c == slots {
                    break;
                }
            }
        }
    }

    #[test]
    fn ldlt_matches_the_oracle_on_random_4x4() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..4000 {
            let mut m = SymMat::from_fn(4, |_, _| Rat::zero());
            if trial % 2 == 0 {
                for i in 0..4 {
                    for j in i..4 {
                        m.set(i, j, rat(rng.gen_range(-4..=4), rng.gen_range(1..=2)));
                    }
                }
            } else {
                // Planted PSD: RᵀR for a random rational R (possibly low rank).
                let r: Vec<Vec<Rat>> = (0..rng.gen_range(1..=4))
                    .map(|_| (0..4).map(|_| rat(rng.gen_range(-2..=2), 1)).collect())
                    .collect();
                for i in 0..4 {
                    for j in i..4 {
                        let mut s = Rat::zero();
                        for row in &r {
                            s = s + row[i].clone() * row[j].clone();
                        }
                        m.set(i, j, s);
                    }
                }
            }
            assert_eq!(psd_exact(&m).psd, psd_minor_oracle(&m), "disagreement on {m:?}");
        }
    }

    #[test]
    fn factorization_reconstructs_exactly() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = 5;
            // Planted PSD so the decomposition always completes.
            let r: Vec<Vec<Rat>> = (0..n)
                .map(|_| (0..n).map(|_| rat(rng.gen_range(-3..=3), rng.gen_range(1..=2))).collect())
                .collect();
            let mut m = SymMat::from_fn(n, |_, _| Rat::zero());
            for i in 0..n {
                for j in i..n {
                    let mut s = Rat::zero();
                    for row in &r {
                        s = s + row[i].clone() * row[j].clone();
                    }
                    m.set(i, j, s);
                }
            }
            let res = psd_exact(&m);
            assert!(res.psd);
            for i in 0..n {
                for j in 0..n {
                    let mut s = Rat::zero();
                    for k in 0..n {
                        s = s + res.l[i][k].clone() * res.d[k].clone() * res.l[j][k].clone();
                    }
                    assert_eq!(s, m.get(res.perm[i], res.perm[j]), "entry ({i},{j})");
                }
            }
        }
    }

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
    fn identity_residual_reports_an_exact_offset() {
        let h = parse_system(EX2).unwrap();
        let prog =
            build_sos_program(&h, 2, 1, Mode::Bmi, &EncodeOptions::default()).unwrap();
        let bmi = assemble_bmi(&prog).unwrap();
        // An exact rational assignment from the assembly is identity-exact.
        let u: Vec<Rat> = (0..bmi.u.len()).map(|i| rat(i as i64 % 5 - 2, 7)).collect();
        let v: Vec<Rat> = (0..bmi.v.len()).map(|i| rat(i as i64 % 3 - 1, 5)).collect();
        let mut vals = bmi.full_assignment(&u, &v);
        assert!(identity_check(&prog, &vals));

        // Bump one remainder diagonal entry by 1/88: the residual of that
        // constraint becomes exactly −1/88 times its basis square.
        let cons = &prog.constraints[0];
        let k = cons.remainder_entries[0];
        vals[k.0] = &vals[k.0] + rat(1, 88);
        let residuals = identity_residuals(&prog, &vals);
        let r = &residuals[0].1;
        assert!(!r.is_zero());
        let expected = crate::polyalg::Poly::constant(cons.nvars, rat(-1, 88))
            .mul(&mono_sq(&cons.remainder_basis[0]));
        assert_eq!(r, &expected);
    }

    fn mono_sq(m: &Monomial) -> Poly<Rat> {
        let mut p = Poly::zero(m.nvars());
        p.add_term(m.mul(m), Rat::one());
        p
    }

    #[test]
    fn falsifier_returns_the_origin_for_an_absurd_claim() {
        let h = parse_system(EX2).unwrap();
        let n = h.vars.len();
        // Antecedent: unit ball (contains the origin); consequent: −1 > 0.
        let mut ball = Poly::constant(n, rat_int(1));
        for i in 0..n {
            let xi = Poly::var(n, i);
            ball = ball.sub(&xi.mul(&xi));
        }
        let imp = Implication {
            antecedent: SemialgebraicSet { conjuncts: vec![ball], equalities: vec![] },
            consequent: Poly::constant(n, rat_int(-1)),
            strict: true,
        };
        let pt = falsify(&imp, 10_000, 0).expect("counterexample exists");
        assert!(pt.iter().all(|c| c.is_zero()), "expected the origin, got {pt:?}");
    }

    #[test]
    fn broken_invariant_is_semantically_falsified() {
        // φ ≡ 1 satisfies nothing on the unsafe side: (iv) must be
        // falsified at a sampled unsafe point.
        let h = parse_system(EX2).unwrap();
        let prog =
            build_sos_program(&h, 2, 1, Mode::Bmi, &EncodeOptions::default()).unwrap();
        let mut vals = vec![Rat::zero(); prog.registry.len()];
        // constant coefficient of the template := 1
        let tpl = &prog.templates[0];
        let k = tpl.basis.iter().position(|m| m.degree() == 0).unwrap();
        vals[tpl.coeffs[k].0] = Rat::one();

        let report = verify_safety(&h, &prog, &vals, &CheckConfig::default());
        assert_eq!(report.verdict, Verdict::Falsified);
        let sep = report
            .rows
            .iter()
            .find(|r| r.kind == ConstraintKind::UnsafeSeparation)
            .unwrap();
        let pt = sep.counterexample.as_ref().expect("unsafe point found");
        // The point lies in the unsafe disk, where φ ≡ 1 is not negative.
        assert!(h.locations[0].unsafe_regions[0].contains(pt));
    }

    #[test]
    fn exact_identity_with_indefinite_grams_is_unknown_not_safe() {
        let h = parse_system(EX2).unwrap();
        let prog =
            build_sos_program(&h, 2, 1, Mode::Bmi, &EncodeOptions::default()).unwrap();
        let bmi = assemble_bmi(&prog).unwrap();
        let u: Vec<Rat> = (0..bmi.u.len()).map(|_| rat(1, 3)).collect();
        let v: Vec<Rat> = (0..bmi.v.len()).map(|_| rat(-1, 2)).collect();
        let vals = bmi.full_assignment(&u, &v);
        assert!(identity_check(&prog, &vals));
        let report = verify_safety(&h, &prog, &vals, &CheckConfig::default());
        assert_ne!(report.verdict, Verdict::Safe);
    }

    #[test]
    fn reset_maps_are_extracted_from_assignment_resets() {
        const SYS: &str = "\
system jumps;
vars x y;
init x >= 0;
location a {
  flow x' = 1;
  flow y' = 1;
  inv true;
  unsafe x - 10 >= 0;
}
location b {
  flow x' = 1;
  flow y' = 1;
  inv true;
  unsafe x - 10 >= 0;
}
transition a -> b {
  guard x - 1 >= 0;
  reset x' = x + y^2;
  reset y' = 2*y;
}
";
        let h = parse_system(SYS).unwrap();
        let map = reset_map(&h.transitions[0].reset, 2).expect("assignment reset");
        let vars = vec!["x".to_string(), "y".to_string()];
        assert_eq!(render_poly(&map[0], &vars), "x + y^2");
        assert_eq!(render_poly(&map[1], &vars), "2*y");
    }
}
