//! Gauss–Newton polishing of a numeric certificate.
//!
//! The alternation returns a point where every matching identity holds
//! exactly (by construction of the eliminated unknowns) but the Gram
//! matrices are only positive semidefinite up to the solver's margin. For
//! exact recovery the opposite trade is needed: Grams that are positive
//! semidefinite *by construction* and matching identities that hold to
//! machine precision. This module re-parameterizes every unknown Gram as
//! `W = PᵀP`, freezes the multipliers that multiply the invariant template
//! (the bilinear side) at their numeric values, and minimizes the squared
//! coefficient norm `θ = Σ_k ‖r_k‖²` of the per-constraint matching
//! residuals
//!
//! ```text
//! r_k = lhs_k(c) − slack_k − Σ_b factor_b · (m_bᵀ W_b m_b) − Σ_f factor_f · free_f − m₀ᵀ W₀ m₀
//! ```
//!
//! over the template coefficients `c`, the free multiplier coefficients,
//! and the factors `P_b` jointly. With the bilinear side frozen each
//! residual coefficient is affine in `(c, free)` and quadratic in `P`, so
//! a damped Gauss–Newton iteration with a descent line search converges
//! quadratically near the solution. When a template is anchored
//! (`φ(x₀) = 1`), its constant coefficient stays the affine function of
//! the remaining coefficients that the anchor dictates, which pins the
//! overall scale and keeps the iteration away from the trivial residual
//! zero at `(c, W) = 0`.

use crate::encoder::{Signedness, SosProgram, VarClass, VarId, VarOrigin};
use crate::polyalg::{rat_to_f64, Poly};
use nalgebra::DMatrix;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug)]
pub struct RefineConfig {
    pub max_iters: usize,
    /// Levenberg damping added to the Gauss–Newton normal matrix.
    pub lambda: f64,
    /// Stop once θ falls below this.
    pub target_theta: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { max_iters: 50, lambda: 1e-10, target_theta: 1e-26 }
    }
}

/// A refined certificate: one value per registry unknown (Gram entries
/// rebuilt from their factors, so every Gram block is PSD up to rounding)
/// and the final squared residual norm.
#[derive(Clone, Debug)]
pub struct CertificateNumeric {
    pub vals: Vec<f64>,
    pub theta: f64,
}

/// Matching residuals of the full assignment `vals`, one polynomial per
/// constraint, plus their total squared coefficient norm θ.
pub struct ResidualSet {
    pub residuals: Vec<(String, Poly<f64>)>,
    pub theta: f64,
}

pub fn backward_error(prog: &SosProgram, vals: &[f64]) -> ResidualSet {
    let mut residuals = Vec::new();
    let mut theta = 0.0;
    for cons in &prog.constraints {
        let sym = cons
            .residual(&prog.templates, &prog.registry)
            .expect("program-built constraint assembles");
        let mut poly = Poly::<f64>::zero(cons.nvars);
        for (mono, expr) in sym.terms() {
            let v = expr.eval_f64(vals);
            if v != 0.0 {
                poly.add_term(mono.clone(), v);
            }
        }
        theta += poly.terms().map(|(_, c)| c * c).sum::<f64>();
        residuals.push((cons.name.clone(), poly));
    }
    ResidualSet { residuals, theta }
}

/// One Gram block being refined: its entry unknowns (upper triangle, row
/// major) and the current factor `P` with `W = PᵀP`.
struct GramSlot {
    side: usize,
    entries: Vec<VarId>,
    p: DMatrix<f64>,
}

impl GramSlot {
    fn entry_index(&self, i: usize, j: usize) -> usize {
        // vech order: (0,0),(0,1),..,(0,s-1),(1,1),..
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        a * self.side - a * (a + 1) / 2 + b
    }

    fn w(&self) -> DMatrix<f64> {
        self.p.transpose() * &self.p
    }
}

enum Col {
    /// Free linear unknown (template coefficient or free multiplier coeff).
    Lin(usize),
    /// Gram entry: (slot, i, j) with i ≤ j.
    Gram(usize, usize, usize),
}

/// One residual coefficient as an affine function of the linear unknowns
/// and the Gram entries (the bilinear side is frozen into the constants).
struct Row {
    konst: f64,
    lin: Vec<(usize, f64)>,
    gram: Vec<(usize, usize, usize, f64)>,
}

struct Space {
    lin_vars: Vec<VarId>,
    /// Anchored constant coefficients: var ↦ (const, Σ coef·lin_col).
    anchored: BTreeMap<VarId, (f64, Vec<(usize, f64)>)>,
    grams: Vec<GramSlot>,
    rows: Vec<Row>,
}

fn clip_psd_factor(w: &DMatrix<f64>) -> DMatrix<f64> {
    let s = w.nrows();
    if s == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (w + w.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut p = DMatrix::zeros(s, s);
    for t in 0..s {
        let lam = eig.eigenvalues[t].max(0.0).sqrt();
        for i in 0..s {
            p[(t, i)] = lam * eig.eigenvectors[(i, t)];
        }
    }
    p
}

/// `pinned = None`: refine over the template and the U side with the
/// bilinear (V-class) side frozen at `vals`. `pinned = Some(tpl)`: the
/// template coefficients in `tpl` are constants instead — with the
/// template fixed every identity is affine in the multipliers, so the
/// V-class unknowns join the refinement as ordinary columns.
fn build_space(prog: &SosProgram, vals: &[f64], pinned: Option<&BTreeSet<VarId>>) -> Space {
    let reg = &prog.registry;

    // Anchor substitutions: the constant coefficient of an anchored
    // template equals 1/T₀(x₀) · (1 − Σ_{i≠0} cᵢ Tᵢ(x₀)); with T₀ = 1 the
    // leading factor drops out. A pinned template needs no anchor: its
    // scale is already decided.
    let mut anchored: BTreeMap<VarId, (f64, Vec<(VarId, f64)>)> = BTreeMap::new();
    for (t, tpl) in prog.templates.iter().enumerate() {
        if pinned.is_some_and(|s| tpl.coeffs.iter().any(|c| s.contains(c))) {
            continue;
        }
        if let Some(x0) = &prog.anchors[t] {
            let k = tpl
                .basis
                .iter()
                .position(|m| m.degree() == 0)
                .expect("template basis contains the constant monomial");
            let mut terms = Vec::new();
            for (i, m) in tpl.basis.iter().enumerate() {
                if i != k {
                    let ti: f64 = m
                        .exps()
                        .iter()
                        .zip(x0)
                        .map(|(e, x)| rat_to_f64(x).powi(*e as i32))
                        .product();
                    if ti != 0.0 {
                        terms.push((tpl.coeffs[i], -ti));
                    }
                }
            }
            anchored.insert(tpl.coeffs[k], (1.0, terms));
        }
    }

    // Linear unknowns: every U-class template coefficient (except anchored
    // ones) and every U-class free multiplier coefficient.
    let mut lin_vars = Vec::new();
    let mut grams: Vec<GramSlot> = Vec::new();
    let mut col_of: BTreeMap<VarId, Col> = BTreeMap::new();
    for id in (0..reg.len()).map(VarId) {
        if reg.class(id) == VarClass::V && pinned.is_none() {
            continue;
        }
        if pinned.is_some_and(|s| s.contains(&id)) {
            continue;
        }
        match &reg.info(id).origin {
            VarOrigin::TemplateCoeff { .. } | VarOrigin::FreeCoeff { .. } => {
                if !anchored.contains_key(&id) {
                    col_of.insert(id, Col::Lin(lin_vars.len()));
                    lin_vars.push(id);
                }
            }
            VarOrigin::GramEntry { .. } => {}
        }
    }
    // Gram slots, grouped per (constraint, block) in program order.
    for cons_idx in 0..prog.constraints.len() {
        let cons = &prog.constraints[cons_idx];
        let mut push_block = |entries: &[VarId], basis_len: usize, grams: &mut Vec<GramSlot>| {
            if entries.is_empty() {
                return;
            }
            let slot = grams.len();
            let side = basis_len;
            let g = GramSlot {
                side,
                entries: entries.to_vec(),
                p: DMatrix::zeros(side, side),
            };
            for i in 0..side {
                for j in i..side {
                    col_of.insert(g.entries[g.entry_index(i, j)], Col::Gram(slot, i, j));
                }
            }
            grams.push(g);
        };
        for mb in &cons.multipliers {
            if mb.signedness == Signedness::Sos
                && (mb.class == VarClass::U || pinned.is_some())
            {
                push_block(&mb.entries, mb.basis.len(), &mut grams);
            }
        }
        push_block(&cons.remainder_entries, cons.remainder_basis.len(), &mut grams);
    }
    for g in grams.iter_mut() {
        let mut w = DMatrix::zeros(g.side, g.side);
        for i in 0..g.side {
            for j in i..g.side {
                let v = vals[g.entries[g.entry_index(i, j)].0];
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        g.p = clip_psd_factor(&w);
    }

    // Resolve anchors to column space.
    let anchored: BTreeMap<VarId, (f64, Vec<(usize, f64)>)> = anchored
        .into_iter()
        .map(|(id, (k, terms))| {
            let cols = terms
                .into_iter()
                .map(|(v, a)| match col_of.get(&v) {
                    Some(Col::Lin(c)) => (*c, a),
                    _ => unreachable!("anchor references a non-linear column"),
                })
                .collect();
            (id, (k, cols))
        })
        .collect();

    // Residual rows: affine decomposition of every residual coefficient
    // over the active unknowns, with the frozen side folded into constants.
    let active: BTreeMap<VarId, usize> = col_of
        .keys()
        .chain(anchored.keys())
        .enumerate()
        .map(|(i, v)| (*v, i))
        .collect();
    // Reverse lookup from the dense affine index to the var.
    let mut by_index = vec![VarId(0); active.len()];
    for (v, i) in &active {
        by_index[*i] = *v;
    }

    let mut rows = Vec::new();
    for cons in &prog.constraints {
        let sym = cons
            .residual(&prog.templates, &prog.registry)
            .expect("program-built constraint assembles");
        for (_, expr) in sym.terms() {
            let (konst, parts) = expr.affine_parts(&active, vals);
            let mut row = Row { konst, lin: Vec::new(), gram: Vec::new() };
            for (idx, a) in parts {
                let var = by_index[idx];
                if let Some((k0, terms)) = anchored.get(&var) {
                    row.konst += a * k0;
                    for (c, t) in terms {
                        row.lin.push((*c, a * t));
                    }
                } else {
                    match col_of[&var] {
                        Col::Lin(c) => row.lin.push((c, a)),
                        Col::Gram(s, i, j) => row.gram.push((s, i, j, a)),
                    }
                }
            }
            rows.push(row);
        }
    }

    Space { lin_vars, anchored, grams, rows }
}

impl Space {
    fn n_lin(&self) -> usize {
        self.lin_vars.len()
    }

    fn n_cols(&self) -> usize {
        self.n_lin() + self.grams.iter().map(|g| g.side * g.side).sum::<usize>()
    }

    fn residual(&self, lin: &[f64], ws: &[DMatrix<f64>]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| {
                let mut r = row.konst;
                for (c, a) in &row.lin {
                    r += a * lin[*c];
                }
                for (s, i, j, a) in &row.gram {
                    r += a * ws[*s][(*i, *j)];
                }
                r
            })
            .collect()
    }

    /// Jacobian columns: linear unknowns first, then the entries of each
    /// `P` in row-major order. For `W = PᵀP`, `∂W_ij/∂P_tk = δ_ki P_tj + δ_kj P_ti`.
    fn jacobian(&self) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.rows.len(), self.n_cols());
        let mut gram_base = vec![0usize; self.grams.len()];
        let mut off = self.n_lin();
        for (s, g) in self.grams.iter().enumerate() {
            gram_base[s] = off;
            off += g.side * g.side;
        }
        for (r, row) in self.rows.iter().enumerate() {
            for (c, a) in &row.lin {
                jac[(r, *c)] += a;
            }
            for (s, i, j, a) in &row.gram {
                let g = &self.grams[*s];
                let base = gram_base[*s];
                for t in 0..g.side {
                    // column of P[t, i]: contribution a · P[t, j]
                    jac[(r, base + t * g.side + i)] += a * g.p[(t, *j)];
                    jac[(r, base + t * g.side + j)] += a * g.p[(t, *i)];
                }
            }
        }
        jac
    }
}

/// Damped Gauss–Newton over (linear unknowns, Gram factors). Returns the
/// refined full assignment; Gram entries are written back as `PᵀP`, and
/// anchored coefficients from their anchor relation.
pub fn newton_refine(prog: &SosProgram, vals: &[f64], cfg: &RefineConfig) -> CertificateNumeric {
    refine_in(prog, vals, cfg, None)
}

/// [`newton_refine`] with the template coefficients in `template` held
/// constant at `vals`. The template is then data rather than an unknown,
/// every residual coefficient is affine in the multipliers, and the
/// bilinear-side coefficients are refined alongside the Gram factors
/// instead of being frozen.
pub fn newton_refine_fixed_template(
    prog: &SosProgram,
    vals: &[f64],
    cfg: &RefineConfig,
    template: &BTreeSet<VarId>,
) -> CertificateNumeric {
    refine_in(prog, vals, cfg, Some(template))
}

fn refine_in(
    prog: &SosProgram,
    vals: &[f64],
    cfg: &RefineConfig,
    pinned: Option<&BTreeSet<VarId>>,
) -> CertificateNumeric {
    let mut space = build_space(prog, vals, pinned);
    let mut lin: Vec<f64> = space.lin_vars.iter().map(|v| vals[v.0]).collect();

    let theta_of = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let ws: Vec<DMatrix<f64>> = space.grams.iter().map(|g| g.w()).collect();
    let mut r = space.residual(&lin, &ws);
    let mut theta = theta_of(&r);

    // Adaptive Levenberg–Marquardt: the Jacobian is always rank-deficient
    // along the orthogonal gauge of each factor (P ↦ QP leaves W fixed),
    // so the damping must adapt rather than stay fixed.
    let mut lambda = cfg.lambda;
    'outer: for _ in 0..cfg.max_iters {
        if theta < cfg.target_theta {
            break;
        }
        let jac = space.jacobian();
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let n = jtj.nrows();
        let g = &jt * nalgebra::DVector::from_column_slice(&r);
        loop {
            let mut h = jtj.clone();
            for i in 0..n {
                h[(i, i)] += lambda * (jtj[(i, i)] + 1e-12);
            }
            let step = match nalgebra::Cholesky::new(h) {
                Some(ch) => ch.solve(&-&g),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e10 {
                        break 'outer;
                    }
                    continue;
                }
            };
            let lin_new: Vec<f64> =
                lin.iter().enumerate().map(|(i, x)| x + step[i]).collect();
            let mut grams_new = Vec::with_capacity(space.grams.len());
            let mut off = space.n_lin();
            for g in &space.grams {
                let mut p = g.p.clone();
                for t in 0..g.side {
                    for k in 0..g.side {
                        p[(t, k)] += step[off + t * g.side + k];
                    }
                }
                off += g.side * g.side;
                grams_new.push(p);
            }
            let ws_new: Vec<DMatrix<f64>> =
                grams_new.iter().map(|p| p.transpose() * p).collect();
            let r_new = space.residual(&lin_new, &ws_new);
            let theta_new = theta_of(&r_new);
            if theta_new < theta {
                lin = lin_new;
                for (g, p) in space.grams.iter_mut().zip(grams_new) {
                    g.p = p;
                }
                r = r_new;
                theta = theta_new;
                lambda = (lambda / 3.0).max(1e-15);
                break;
            }
            lambda *= 10.0;
            if lambda > 1e10 {
                break 'outer;
            }
        }
    }

    // Write back the refined assignment.
    let mut out = vals.to_vec();
    for (i, v) in space.lin_vars.iter().enumerate() {
        out[v.0] = lin[i];
    }
    for g in &space.grams {
        let w = g.w();
        for i in 0..g.side {
            for j in i..g.side {
                out[g.entries[g.entry_index(i, j)].0] = w[(i, j)];
            }
        }
    }
    for (id, (k, terms)) in &space.anchored {
        let mut v = *k;
        for (c, a) in terms {
            v += a * lin[*c];
        }
        out[id.0] = v;
    }
    CertificateNumeric { vals: out, theta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{assemble_bmi, build_sos_program, BmiProblem, EncodeOptions, Mode};
    use crate::model::parse_system;
    use crate::polyalg::rat;
    use crate::solver::{solve_bmi_alternating, SolverConfig};
    use rand::{Rng, SeedableRng};

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

    fn ex2_setup() -> (SosProgram, BmiProblem, Vec<f64>) {
        let h = parse_system(EX2).unwrap();
        let opts = EncodeOptions {
            anchor: Some(vec![rat(3, 2), rat(0, 1)]),
            ..EncodeOptions::default()
        };
        let prog = build_sos_program(&h, 2, 1, Mode::Bmi, &opts).unwrap();
        let bmi = assemble_bmi(&prog).unwrap();
        let sol = solve_bmi_alternating(&bmi, None, &SolverConfig::default())
            .feasible()
            .expect("degree-2 point exists");
        let vals = bmi.full_assignment_f64(&sol.u, &sol.v);
        (prog, bmi, vals)
    }

    #[test]
    fn assignments_from_assembly_have_tiny_backward_error() {
        // The eliminated unknowns are resolved exactly in rational
        // arithmetic, so the only residual is f64 evaluation rounding.
        let (prog, _, vals) = ex2_setup();
        let res = backward_error(&prog, &vals);
        assert!(res.theta < 1e-20, "theta = {}", res.theta);
    }

    #[test]
    fn refinement_repairs_a_perturbed_point_with_psd_grams() {
        // Perturb only the side being refined (the frozen multipliers stay
        // clean), so an exact-matching PSD point is known to exist and the
        // iteration must drive θ back to rounding level.
        let (prog, _, vals) = ex2_setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let noisy: Vec<f64> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if prog.registry.class(VarId(i)) == VarClass::U {
                    v + rng.gen_range(-1e-4..1e-4)
                } else {
                    *v
                }
            })
            .collect();
        let theta0 = backward_error(&prog, &noisy).theta;
        assert!(theta0 > 1e-12, "perturbation should be visible");

        let cert = newton_refine(&prog, &noisy, &RefineConfig::default());
        assert!(cert.theta < 1e-20, "theta = {}", cert.theta);
        // Independent check of the reported θ.
        let check = backward_error(&prog, &cert.vals).theta;
        assert!((check - cert.theta).abs() <= 1e-18 + 0.5 * cert.theta.max(check));

        // Every refined Gram block is PSD by construction.
        for cons in &prog.constraints {
            for mb in &cons.multipliers {
                if mb.class == VarClass::U && mb.signedness == Signedness::Sos {
                    assert_gram_psd(&mb.entries, mb.basis.len(), &cert.vals);
                }
            }
            assert_gram_psd(&cons.remainder_entries, cons.remainder_basis.len(), &cert.vals);
        }
    }

    #[test]
    fn refinement_with_corrupted_frozen_side_still_contracts_and_stays_psd() {
        // Perturbing the frozen multipliers too makes exact matching
        // unattainable in the refined unknowns; θ must still contract by
        // orders of magnitude and the Grams stay PSD for the projection
        // step to clean up.
        let (prog, _, vals) = ex2_setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let noisy: Vec<f64> = vals.iter().map(|v| v + rng.gen_range(-1e-4..1e-4)).collect();
        let theta0 = backward_error(&prog, &noisy).theta;
        let cert = newton_refine(&prog, &noisy, &RefineConfig::default());
        assert!(cert.theta < 1e-9 * theta0.max(1e-3), "theta = {}", cert.theta);
        for cons in &prog.constraints {
            assert_gram_psd(&cons.remainder_entries, cons.remainder_basis.len(), &cert.vals);
        }
    }

    fn assert_gram_psd(entries: &[VarId], side: usize, vals: &[f64]) {
        if entries.is_empty() {
            return;
        }
        let mut w = DMatrix::zeros(side, side);
        let mut k = 0;
        for i in 0..side {
            for j in i..side {
                w[(i, j)] = vals[entries[k].0];
                w[(j, i)] = vals[entries[k].0];
                k += 1;
            }
        }
        let min = w.symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        assert!(min >= -1e-12, "gram not PSD: min eig {min}");
    }

    #[test]
    fn anchored_scale_survives_refinement() {
        let (prog, _, vals) = ex2_setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noisy: Vec<f64> = vals.iter().map(|v| v + rng.gen_range(-1e-4..1e-4)).collect();
        let cert = newton_refine(&prog, &noisy, &RefineConfig::default());
        let tpl = &prog.templates[0];
        let x0 = [1.5f64, 0.0];
        let phi_at_anchor: f64 = tpl
            .basis
            .iter()
            .zip(&tpl.coeffs)
            .map(|(m, c)| {
                let v: f64 =
                    m.exps().iter().zip(x0.iter()).map(|(e, x)| x.powi(*e as i32)).product();
                cert.vals[c.0] * v
            })
            .sum();
        assert!((phi_at_anchor - 1.0).abs() < 1e-12, "phi(x0) = {phi_at_anchor}");
    }

    #[test]
    fn refinement_never_increases_theta() {
        let (prog, _, vals) = ex2_setup();
        for seed in 0..4u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<f64> =
                vals.iter().map(|v| v + rng.gen_range(-1e-3..1e-3)).collect();
            let theta0 = backward_error(&prog, &noisy).theta;
            let cert = newton_refine(&prog, &noisy, &RefineConfig::default());
            assert!(cert.theta <= theta0);
        }
    }
}
