//! Numeric feasibility engines.
//!
//! [`solve_lmi`] is a small dense semidefinite feasibility solver: it
//! maximizes the feasibility margin `t` subject to `S_b(x) − t·I ⪰ 0` over
//! every block by a log-det barrier path-following (Newton) method. The
//! margin formulation is always strictly feasible — any `t` below the
//! smallest eigenvalue at the starting point is interior — so no phase-1
//! search is needed, and the barrier's duality gap `μ·ν` gives a sound
//! upper bound on the achievable margin, which certifies infeasibility when
//! it falls below `−δ`.
//!
//! [`solve_bmi_alternating`] is the alternating iteration for bilinear
//! problems: freezing the `u` side makes the blocks affine in `v` and vice
//! versa, so each half-step is an LMI solved by the same engine. Each
//! half-step maximizes the joint margin over a set containing the current
//! iterate, so the best margin never decreases within an epoch; on stall
//! the `v` side is re-seeded from a short deterministic schedule.

use crate::encoder::{BmiProblem, VarId, VarOrigin};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct LmiBlock {
    /// Constant part.
    pub c: DMatrix<f64>,
    /// Coefficient matrix per variable.
    pub coef: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct LmiProblem {
    pub nvars: usize,
    pub blocks: Vec<LmiBlock>,
    /// Optional starting point (any point works — feasibility not required).
    pub warm: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Feasibility tolerance δ: a point is accepted when the smallest block
    /// eigenvalue is ≥ −δ.
    pub delta: f64,
    /// Outer alternation sweeps before giving up.
    pub max_outer_iters: usize,
    /// Total Newton iterations allowed per LMI solve.
    pub lmi_iter_cap: usize,
    /// Sweep-to-sweep margin improvement below this, sustained over
    /// `stall_window` sweeps, triggers a restart.
    pub stall_eps: f64,
    pub stall_window: usize,
    /// Restarts before reporting Unknown.
    pub max_restarts: usize,
    pub seed: u64,
    /// Upper cap on the feasibility margin, keeping the max-margin problem
    /// bounded when the feasible set is unbounded.
    pub margin_cap: f64,
    /// Final barrier parameter.
    pub mu_min: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            delta: 1e-8,
            max_outer_iters: 60,
            lmi_iter_cap: 2000,
            stall_eps: 1e-9,
            stall_window: 3,
            max_restarts: 6,
            seed: 0,
            margin_cap: 1e3,
            mu_min: 1e-13,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SolveOutcome<T> {
    Feasible(T),
    /// Certified: no point reaches margin −δ (dual bound).
    Infeasible,
    /// Budget exhausted without a verdict.
    Unknown,
}

impl<T> SolveOutcome<T> {
    pub fn feasible(self) -> Option<T> {
        match self {
            SolveOutcome::Feasible(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmiSolution {
    pub x: Vec<f64>,
    /// Smallest block eigenvalue at `x`.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NumericSolution {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub min_eig: f64,
}

pub(crate) fn sym_eig_min(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Smallest block eigenvalue of an LMI at `x`.
fn lmi_margin(p: &LmiProblem, x: &[f64]) -> f64 {
    let mut m = f64::INFINITY;
    for b in &p.blocks {
        let mut s = b.c.clone();
        for (k, e) in b.coef.iter().enumerate() {
            if x[k] != 0.0 {
                s += e * x[k];
            }
        }
        m = m.min(sym_eig_min(&s));
    }
    m
}

struct Barrier {
    /// Blocks over the extended variable vector `y = (x, t)`.
    blocks: Vec<LmiBlock>,
    nvars: usize,
    /// Σ block sides — the barrier parameter ν.
    nu: f64,
}

impl Barrier {
    /// Margin formulation: append `−I` as the coefficient of `t` to every
    /// block, plus the scalar cap block `cap − t ⪰ 0`.
    fn new(p: &LmiProblem, cap: f64) -> Barrier {
        let nv = p.nvars + 1;
        let mut blocks = Vec::with_capacity(p.blocks.len() + 1);
        let mut nu = 0.0;
        for b in &p.blocks {
            let s = b.c.nrows();
            let mut coef = b.coef.clone();
            coef.push(-DMatrix::<f64>::identity(s, s));
            blocks.push(LmiBlock { c: b.c.clone(), coef });
            nu += s as f64;
        }
        blocks.push(LmiBlock {
            c: DMatrix::from_element(1, 1, cap),
            coef: {
                let mut v = vec![DMatrix::zeros(1, 1); p.nvars];
                v.push(DMatrix::from_element(1, 1, -1.0));
                v
            },
        });
        nu += 1.0;
        Barrier { blocks, nvars: nv, nu }
    }

    fn block_at(&self, b: &LmiBlock, y: &[f64]) -> DMatrix<f64> {
        let mut s = b.c.clone();
        for (k, e) in b.coef.iter().enumerate() {
            if y[k] != 0.0 {
                s += e * y[k];
            }
        }
        s
    }

    /// `objᵀy − μ Σ logdet S_b(y)`, or None outside the domain.
    fn value(&self, obj: &[f64], mu: f64, y: &[f64]) -> Option<f64> {
        let mut f = obj.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        for b in &self.blocks {
            let s = self.block_at(b, y);
            let chol = nalgebra::Cholesky::new(s)?;
            let logdet: f64 = (0..b.c.nrows())
                .map(|i| chol.l()[(i, i)].max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
                * 2.0;
            f -= mu * logdet;
        }
        Some(f)
    }
}

/// Path-following minimization of `objᵀy` over the blocks, starting from a
/// strictly feasible `y0`. Returns the final iterate and the certified
/// optimality gap bound. `false` when the Newton budget ran out first.
fn barrier_minimize(
    bar: &Barrier,
    obj: &[f64],
    mut y: Vec<f64>,
    cfg: &SolverConfig,
) -> (Vec<f64>, f64, bool) {
    let n = bar.nvars;
    let mut mu = 1.0f64;
    let mut newton_left = cfg.lmi_iter_cap as i64;
    let mut completed = true;
    'outer: loop {
        for _ in 0..60 {
            if newton_left <= 0 {
                completed = false;
                break 'outer;
            }
            newton_left -= 1;

            // Assemble gradient and Hessian from the whitened coefficient
            // matrices Ẽ_k = L⁻¹ E_k L⁻ᵀ of each block.
            let mut g = obj.to_vec();
            let mut h = DMatrix::<f64>::zeros(n, n);
            for b in &bar.blocks {
                let s = self_adjoint(&bar.block_at(b, &y));
                let Some(chol) = nalgebra::Cholesky::new(s) else {
                    // Strict feasibility is maintained by the line search;
                    // a failure here means the iterate is at the boundary
                    // within rounding. Treat as budget exhaustion.
                    completed = false;
                    break 'outer;
                };
                let l = chol.l();
                let tilde: Vec<DMatrix<f64>> = b
                    .coef
                    .iter()
                    .map(|e| {
                        let x1 = l.solve_lower_triangular(e).expect("L invertible");
                        let x2 = l
                            .solve_lower_triangular(&x1.transpose())
                            .expect("L invertible");
                        x2.transpose()
                    })
                    .collect();
                for (k, tk) in tilde.iter().enumerate() {
                    g[k] -= mu * tk.trace();
                }
                for (k, tk) in tilde.iter().enumerate() {
                    for (l2, tl) in tilde.iter().enumerate().skip(k) {
                        let dot = tk.iter().zip(tl.iter()).map(|(a, b)| a * b).sum::<f64>();
                        h[(k, l2)] += mu * dot;
                        if l2 != k {
                            h[(l2, k)] += mu * dot;
                        }
                    }
                }
            }

            // Newton step with a tiny ridge fallback.
            let gvec = nalgebra::DVector::from_column_slice(&g);
            let mut ridge = 0.0;
            let step = loop {
                let hr = &h + DMatrix::identity(n, n) * ridge;
                match nalgebra::Cholesky::new(hr) {
                    Some(ch) => break ch.solve(&-&gvec),
                    None => {
                        ridge = if ridge == 0.0 { 1e-12 * (1.0 + h.trace().abs()) } else { ridge * 10.0 };
                        if ridge > 1e6 {
                            completed = false;
                            break 'outer;
                        }
                    }
                }
            };
            let decrement = -gvec.dot(&step);
            if decrement.abs() / 2.0 < 1e-12 {
                break;
            }

            // Backtracking line search keeping every block strictly PD.
            let f0 = bar.value(obj, mu, &y).expect("current iterate feasible");
            let mut stepped = false;
            let mut alpha = 1.0;
            for _ in 0..60 {
                let cand: Vec<f64> = y
                    .iter()
                    .zip(step.iter())
                    .map(|(a, d)| a + alpha * d)
                    .collect();
                if let Some(f1) = bar.value(obj, mu, &cand) {
                    if f1 < f0 - 1e-16 {
                        y = cand;
                        stepped = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !stepped {
                break;
            }
        }
        if mu <= cfg.mu_min {
            break;
        }
        mu = (mu * 0.2).max(cfg.mu_min * 0.999);
    }
    // The achieved objective is within 2μν of optimal at an (approximate)
    // center; the factor 2 absorbs inexact centering.
    (y, 2.0 * mu * bar.nu, completed)
}

/// Max-margin semidefinite feasibility: returns the margin-maximizing point,
/// `Infeasible` when the dual bound shows the margin cannot reach `−δ`, and
/// `Unknown` on budget exhaustion.
pub fn solve_lmi(p: &LmiProblem, cfg: &SolverConfig) -> SolveOutcome<LmiSolution> {
    if p.blocks.iter().all(|b| b.c.nrows() == 0) {
        return SolveOutcome::Feasible(LmiSolution {
            x: p.warm.clone().unwrap_or_else(|| vec![0.0; p.nvars]),
            margin: f64::INFINITY,
        });
    }
    let bar = Barrier::new(p, cfg.margin_cap);
    let x0 = p.warm.clone().unwrap_or_else(|| vec![0.0; p.nvars]);
    let m0 = lmi_margin(p, &x0);
    let mut y0 = x0;
    y0.push(m0.min(cfg.margin_cap) - 1.0);

    let mut obj = vec![0.0; bar.nvars];
    obj[bar.nvars - 1] = -1.0;

    let (y, gap, completed) = barrier_minimize(&bar, &obj, y0, cfg);
    let x = y[..p.nvars].to_vec();
    let t = y[p.nvars];
    let margin = lmi_margin(p, &x);
    if margin >= -cfg.delta {
        return SolveOutcome::Feasible(LmiSolution { x, margin });
    }
    // t* ≤ t + gap: margin provably below −δ ⇒ infeasible.
    if completed && t + gap < -cfg.delta {
        return SolveOutcome::Infeasible;
    }
    if completed {
        // Converged to a maximizer with −δ-infeasible margin but an
        // inconclusive bound (margin within the gap of −δ).
        return SolveOutcome::Feasible(LmiSolution { x, margin });
    }
    SolveOutcome::Unknown
}

fn self_adjoint(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

// ---------------------------------------------------------------------------
// Alternation
// ---------------------------------------------------------------------------

/// Freeze every unknown outside `active` at `fixed` and view the blocks as
/// an LMI over `active` (in the given order).
pub fn linearize(p: &BmiProblem, active: &[VarId], fixed: &[f64]) -> LmiProblem {
    let index: BTreeMap<VarId, usize> = active.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let blocks = p
        .blocks
        .iter()
        .map(|b| {
            let s = b.mat.side();
            let mut c = DMatrix::zeros(s, s);
            let mut coef = vec![DMatrix::zeros(s, s); active.len()];
            for i in 0..s {
                for j in i..s {
                    let (konst, parts) = b.mat.get(i, j).affine_parts(&index, fixed);
                    c[(i, j)] = konst;
                    c[(j, i)] = konst;
                    for (k, a) in parts {
                        coef[k][(i, j)] = a;
                        coef[k][(j, i)] = a;
                    }
                }
            }
            LmiBlock { c, coef }
        })
        .collect();
    LmiProblem {
        nvars: active.len(),
        blocks,
        warm: Some(active.iter().map(|v| fixed[v.0]).collect()),
    }
}

fn joint_margin(p: &BmiProblem, vals: &[f64]) -> f64 {
    p.eval_blocks_f64(vals)
        .iter()
        .map(sym_eig_min)
        .fold(f64::INFINITY, f64::min)
}

/// The unknowns re-solved in the `v` half-step: the `v` side itself plus
/// the free remainder entries of the bilinearly coupled constraints, which
/// keeps the half-step's feasible set large enough to make progress while
/// still containing the current iterate.
fn v_phase_active(p: &BmiProblem) -> Vec<VarId> {
    let mut active = p.v.clone();
    for id in &p.u {
        if let VarOrigin::GramEntry { cons, block: crate::encoder::BlockId::Remainder, .. } =
            &p.registry.info(*id).origin
        {
            if p.bilinear_constraints.contains(cons) {
                active.push(*id);
            }
        }
    }
    active
}

/// One sweep record: (restart epoch, joint margin after the sweep).
pub type SweepTrace = (usize, f64);

/// Restart seeds for the `v` side: a short deterministic schedule of
/// constant multipliers, then seeded random vectors.
fn restart_v(p: &BmiProblem, epoch: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; p.v.len()];
    match epoch {
        1 => {
            for (i, id) in p.v.iter().enumerate() {
                if let VarOrigin::FreeCoeff { mono, .. } = &p.registry.info(*id).origin {
                    if mono.degree() == 0 {
                        v[i] = -1.0;
                    }
                }
            }
        }
        2 => {}
        3 => {
            for (i, id) in p.v.iter().enumerate() {
                if let VarOrigin::FreeCoeff { mono, .. } = &p.registry.info(*id).origin {
                    if mono.degree() == 0 {
                        v[i] = 1.0;
                    }
                }
            }
        }
        k => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e3779b97f4a7c15));
            for x in v.iter_mut() {
                *x = rng.gen_range(-1.0..=1.0);
            }
        }
    }
    v
}

pub fn solve_bmi_alternating(
    p: &BmiProblem,
    u0: Option<Vec<f64>>,
    cfg: &SolverConfig,
) -> SolveOutcome<NumericSolution> {
    solve_bmi_traced(p, u0, cfg).0
}

pub fn solve_bmi_traced(
    p: &BmiProblem,
    u0: Option<Vec<f64>>,
    cfg: &SolverConfig,
) -> (SolveOutcome<NumericSolution>, Vec<SweepTrace>) {
    let mut u = u0.unwrap_or_else(|| vec![0.0; p.u.len()]);
    let mut v = vec![0.0; p.v.len()];
    let v_active = v_phase_active(p);
    let mut trace = Vec::new();
    let mut best: Option<NumericSolution> = None;

    let mut epoch = 0usize;
    'epochs: loop {
        let mut recent: Vec<f64> = Vec::new();
        for _ in 0..cfg.max_outer_iters {
            // v half-step (skipped when the problem is an LMI already).
            if !v_active.is_empty() {
                let fixed = p.full_assignment_f64(&u, &v);
                let lmi = linearize(p, &v_active, &fixed);
                if let SolveOutcome::Feasible(sol) = solve_lmi(&lmi, cfg) {
                    for (id, val) in v_active.iter().zip(&sol.x) {
                        if let Some(i) = p.v.iter().position(|w| w == id) {
                            v[i] = *val;
                        } else if let Some(i) = p.u.iter().position(|w| w == id) {
                            u[i] = *val;
                        }
                    }
                }
            }
            // u half-step.
            let fixed = p.full_assignment_f64(&u, &v);
            let lmi = linearize(p, &p.u, &fixed);
            if let SolveOutcome::Feasible(sol) = solve_lmi(&lmi, cfg) {
                u.copy_from_slice(&sol.x);
            }

            let vals = p.full_assignment_f64(&u, &v);
            let margin = joint_margin(p, &vals);
            trace.push((epoch, margin));
            if best.as_ref().map_or(true, |b| margin > b.min_eig) {
                best = Some(NumericSolution { u: u.clone(), v: v.clone(), min_eig: margin });
            }
            if margin >= -cfg.delta {
                return (SolveOutcome::Feasible(best.unwrap()), trace);
            }
            if p.v.is_empty() {
                // Pure LMI: one sweep is exact.
                break 'epochs;
            }
            recent.push(margin);
            let w = cfg.stall_window;
            if recent.len() > w {
                let prev = recent[recent.len() - 1 - w];
                let now = recent[recent.len() - 1];
                if now - prev < cfg.stall_eps {
                    break;
                }
            }
        }
        epoch += 1;
        if epoch > cfg.max_restarts || p.v.is_empty() {
            break;
        }
        v = restart_v(p, epoch, cfg.seed);
        u = vec![0.0; p.u.len()];
    }
    (SolveOutcome::Unknown, trace)
}

// ---------------------------------------------------------------------------
// Plain-text exchange of numeric points (for external BMI solvers)
// ---------------------------------------------------------------------------

pub fn uv_to_text(sol: &NumericSolution) -> String {
    let mut out = String::new();
    out.push_str(&format!("u {}\n", sol.u.len()));
    for x in &sol.u {
        out.push_str(&format!("{x:.17e}\n"));
    }
    out.push_str(&format!("v {}\n", sol.v.len()));
    for x in &sol.v {
        out.push_str(&format!("{x:.17e}\n"));
    }
    out
}

pub fn uv_from_text(text: &str) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let read_side = |tag: &str, lines: &mut dyn Iterator<Item = &str>| -> Result<Vec<f64>, String> {
        let head = lines.next().ok_or_else(|| format!("missing `{tag}` header"))?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(format!("expected `{tag} <count>`, found `{head}`"));
        }
        let k: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad count in `{head}`"))?;
        (0..k)
            .map(|_| {
                lines
                    .next()
                    .ok_or_else(|| "truncated vector".to_string())?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| e.to_string())
            })
            .collect()
    };
    let u = read_side("u", &mut lines)?;
    let v = read_side("v", &mut lines)?;
    Ok((u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{assemble_bmi, build_sos_program, EncodeOptions, Mode};
    use crate::model::parse_system;
    use crate::polyalg::rat;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    fn one_by_one(c: f64, coef: Vec<f64>) -> LmiBlock {
        LmiBlock {
            c: DMatrix::from_element(1, 1, c),
            coef: coef.into_iter().map(|a| DMatrix::from_element(1, 1, a)).collect(),
        }
    }

    #[test]
    fn interval_margin_is_maximized_at_the_midpoint() {
        // {x : diag(x, 1−x) ⪰ 0} — the margin-maximizing point is x = 1/2.
        let p = LmiProblem {
            nvars: 1,
            blocks: vec![one_by_one(0.0, vec![1.0]), one_by_one(1.0, vec![-1.0])],
            warm: None,
        };
        let sol = solve_lmi(&p, &cfg()).feasible().expect("feasible");
        assert!((sol.x[0] - 0.5).abs() < 1e-5, "x = {}", sol.x[0]);
        assert!((sol.margin - 0.5).abs() < 1e-5);
    }

    #[test]
    fn constant_negative_block_is_certified_infeasible() {
        let p = LmiProblem { nvars: 0, blocks: vec![one_by_one(-1.0, vec![])], warm: None };
        assert_eq!(solve_lmi(&p, &cfg()), SolveOutcome::Infeasible);
    }

    #[test]
    fn planted_feasible_problems_are_solved() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let s = 5;
            let nv = 4;
            let coef: Vec<DMatrix<f64>> = (0..nv)
                .map(|_| {
                    let a = DMatrix::from_fn(s, s, |_, _| rng.gen_range(-1.0..1.0));
                    (&a + a.transpose()) * 0.5
                })
                .collect();
            let xhat: Vec<f64> = (0..nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = DMatrix::from_fn(s, s, |_, _| rng.gen_range(-1.0..1.0));
            let m = &r * r.transpose() + DMatrix::identity(s, s);
            // c := M − Σ x̂ᵢ Eᵢ, so S(x̂) = M ≻ 0.
            let mut c = m;
            for (e, x) in coef.iter().zip(&xhat) {
                c -= e * *x;
            }
            let p = LmiProblem { nvars: nv, blocks: vec![LmiBlock { c, coef }], warm: None };
            let sol = solve_lmi(&p, &cfg()).feasible().expect("planted problem feasible");
            // Independent eigenvalue check of the returned point.
            assert!(lmi_margin(&p, &sol.x) >= -cfg().delta);
        }
    }

    #[test]
    fn alternation_on_a_pure_lmi_ends_after_one_sweep() {
        let h = parse_system(EX2).unwrap();
        let prog =
            build_sos_program(&h, 2, 1, Mode::LmiStrengthened, &EncodeOptions::default()).unwrap();
        let bmi = assemble_bmi(&prog).unwrap();
        assert!(bmi.v.is_empty());
        let (_, trace) = solve_bmi_traced(&bmi, None, &cfg());
        assert_eq!(trace.len(), 1);
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

    fn ex2_bmi() -> BmiProblem {
        let h = parse_system(EX2).unwrap();
        let opts = EncodeOptions {
            anchor: Some(vec![rat(3, 2), rat(0, 1)]),
            ..EncodeOptions::default()
        };
        let prog = build_sos_program(&h, 2, 1, Mode::Bmi, &opts).unwrap();
        assemble_bmi(&prog).unwrap()
    }

    #[test]
    fn planar_cubic_bilinear_problem_is_feasible_at_degree_two() {
        let bmi = ex2_bmi();
        let sol = solve_bmi_alternating(&bmi, None, &cfg())
            .feasible()
            .expect("degree-2 certificate exists");
        assert!(sol.min_eig >= -cfg().delta, "min_eig = {}", sol.min_eig);
        // Sanity: the template must separate — its value at the unsafe
        // center (−1, −1) must be negative, at the initial center positive.
        let vals = bmi.full_assignment_f64(&sol.u, &sol.v);
        let h = parse_system(EX2).unwrap();
        let prog = build_sos_program(
            &h,
            2,
            1,
            Mode::Bmi,
            &EncodeOptions { anchor: Some(vec![rat(3, 2), rat(0, 1)]), ..EncodeOptions::default() },
        )
        .unwrap();
        let tpl = &prog.templates[0];
        let phi_at = |pt: &[f64]| -> f64 {
            tpl.basis
                .iter()
                .zip(&tpl.coeffs)
                .map(|(m, c)| {
                    let mono: f64 = m
                        .exps()
                        .iter()
                        .zip(pt)
                        .map(|(e, x)| x.powi(*e as i32))
                        .product();
                    vals[c.0] * mono
                })
                .sum()
        };
        assert!(phi_at(&[1.5, 0.0]) > 0.0);
        assert!(phi_at(&[-1.0, -1.0]) < 0.0);
    }

    #[test]
    fn margins_never_decrease_within_an_epoch() {
        let bmi = ex2_bmi();
        let (_, trace) = solve_bmi_traced(&bmi, None, &cfg());
        for w in trace.windows(2) {
            if w[0].0 == w[1].0 {
                assert!(
                    w[1].1 >= w[0].1 - 1e-9,
                    "margin dropped within an epoch: {} -> {}",
                    w[0].1,
                    w[1].1
                );
            }
        }
    }

    #[test]
    fn alternation_is_deterministic() {
        let bmi = ex2_bmi();
        let a = solve_bmi_traced(&bmi, None, &cfg());
        let b = solve_bmi_traced(&bmi, None, &cfg());
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn uv_text_round_trip() {
        let sol = NumericSolution {
            u: vec![1.5, -2.25e-9, 0.0],
            v: vec![std::f64::consts::PI],
            min_eig: 0.0,
        };
        let (u, v) = uv_from_text(&uv_to_text(&sol)).unwrap();
        assert_eq!(u, sol.u);
        assert_eq!(v, sol.v);
    }
}
