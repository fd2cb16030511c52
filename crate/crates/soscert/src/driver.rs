//! Orchestration: from a hybrid-system model to a written, reloadable
//! certificate.
//!
//! A single run walks the library's stages for one unsafe region at one
//! template degree: encode the safety conditions, search for a numeric
//! certificate, polish it with Gauss–Newton, and round it to an exactly
//! verified rational one. The driver wraps that core in two outer loops:
//!
//! * **degree escalation** — try each template degree `d` in the configured
//!   range until one certifies;
//! * **region splitting** — when the whole range fails, bisect the unsafe
//!   region along the widest axis with finite range (derived from the
//!   linear one-variable constraints of the region and the location
//!   invariant) and certify each half separately, up to `split_depth`
//!   levels. The split point is the exact rational midpoint, so the two
//!   halves cover the original region by construction and the overall
//!   verdict is SAFE only if every leaf subregion is certified.
//!
//! The artifact of a run is a plain-text certificate file carrying the
//! rendered model, the configuration, and — per certified subregion — the
//! invariant polynomials, every multiplier polynomial and Gram matrix in
//! exact rational form, and the full assignment of program unknowns.
//! Reloading the file rebuilds the same program deterministically and
//! replays the exact checker, reproducing the verdict. A file that carries
//! only invariant polynomials (no assignment) is also accepted: the
//! multipliers are then re-derived by the fixed-template pipeline, which
//! turns `check` into an independent certifier for externally supplied
//! invariants.

use crate::checker::{gram_at, verify_safety, CheckConfig, SafetyReport, Verdict};
use crate::encoder::{
    assemble_bmi, build_sos_program, BmiProblem, EncodeError, EncodeOptions, Mode, Signedness,
    SosProgram, VarId, VarOrigin,
};
use crate::model::{
    parse_poly, parse_system, render_system, HybridSystem, ParseError, SemialgebraicSet,
};
use crate::polyalg::{render_poly, Monomial, Poly, Rat};
use crate::recover::{
    certify_fixed_template, recover_certificate, recover_snapping_template, RationalCertificate,
};
use crate::refine::{newton_refine, RefineConfig};
use crate::solver::{solve_bmi_alternating, SolveOutcome, SolverConfig};
use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("model: {0}")]
    Model(#[from] ParseError),
    #[error("encode: {0}")]
    Encode(#[from] EncodeError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no variable has a finite range to bisect on")]
    NoBoundedVariable,
    #[error("variable `{0}` has no finite range to bisect on")]
    UnboundedVariable(String),
    #[error("certificate file: {0}")]
    Certificate(String),
    #[error("model digest mismatch: file records {expected}, model text hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Knobs of a verification run. `d_min..=d_max` is the template-degree
/// escalation range; `e` bounds every multiplier and remainder at degree
/// `2e`; `d_bound` and `tau` are handed to the rational recovery; `eps1`,
/// `eps2` and `anchor` override the encoder defaults (`None` keeps them).
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub d_min: u32,
    pub d_max: u32,
    pub e: u32,
    pub d_bound: u64,
    pub tau: f64,
    pub mode: Mode,
    pub split_depth: u32,
    pub seed: u64,
    pub eps1: Option<Rat>,
    pub eps2: Option<Rat>,
    /// Template normalization point; `None` derives one from the initial
    /// set (see [`find_anchor`]).
    pub anchor: Option<Vec<Rat>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_min: 1,
            d_max: 4,
            e: 3,
            d_bound: 1000,
            tau: 1e-10,
            mode: Mode::Bmi,
            split_depth: 0,
            seed: 0,
            eps1: None,
            eps2: None,
            anchor: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DriverError> {
        if self.d_min < 1 {
            return Err(DriverError::Config("degree must be at least 1".into()));
        }
        if self.d_min > self.d_max {
            return Err(DriverError::Config(format!(
                "empty degree range {}..{}",
                self.d_min, self.d_max
            )));
        }
        if self.d_bound < 1 {
            return Err(DriverError::Config("denominator bound must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(DriverError::Config("tolerance must be positive".into()));
        }
        Ok(())
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig { seed: self.seed, ..SolverConfig::default() }
    }

    fn encode_options(&self, anchor: Option<&Vec<Rat>>) -> EncodeOptions {
        EncodeOptions {
            eps1: self.eps1.clone(),
            eps2: self.eps2.clone(),
            anchor: anchor.cloned(),
        }
    }
}

// ---------------------------------------------------------------------------
// Anchor derivation
// ---------------------------------------------------------------------------

/// A rational point of the initial set, used to pin the template scale via
/// `φ(x₀) = 1`. The search scans the dyadic grids with denominators 1, 2, 4
/// over `[-4, 4]^n` and keeps the most interior hit: the point maximizing
/// the least value among the set's inequalities (ties go to the smaller
/// 1-norm, then to scan order). Returns `None` when every grid point
/// misses the set — the caller then encodes without normalization.
pub fn find_anchor(h: &HybridSystem) -> Option<Vec<Rat>> {
    let n = h.nvars();
    let dens: &[i64] = if n <= 3 { &[1, 2, 4] } else { &[1, 2] };
    let mut best: Option<(Rat, Rat, Vec<Rat>)> = None; // (score, l1, point)
    for &den in dens {
        let m = 4 * den;
        let mut idx = vec![-m; n];
        'grid: loop {
            // Skip points already representable at a coarser denominator:
            // they were scanned before and scoring is scan-order stable.
            if den == 1 || idx.iter().any(|k| k.rem_euclid(2) != 0) {
                let point: Vec<Rat> =
                    idx.iter().map(|&k| Rat::new(BigInt::from(k), BigInt::from(den))).collect();
                if h.init.contains(&point) {
                    let score = h
                        .init
                        .conjuncts
                        .iter()
                        .map(|c| c.eval_exact(&point))
                        .min()
                        .unwrap_or_else(Rat::one);
                    let l1: Rat = point.iter().map(|x| x.abs()).sum();
                    let better = match &best {
                        None => true,
                        Some((s, l, _)) => score > *s || (score == *s && l1 < *l),
                    };
                    if better {
                        best = Some((score, l1, point));
                    }
                }
            }
            for i in 0..n {
                idx[i] += 1;
                if idx[i] <= m {
                    continue 'grid;
                }
                idx[i] = -m;
            }
            break;
        }
    }
    best.map(|(_, _, p)| p)
}

// ---------------------------------------------------------------------------
// Region bisection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BisectSplit {
    pub axis: usize,
    pub mid: Rat,
    /// `region ∧ {x_axis ≤ mid}`.
    pub lo: SemialgebraicSet,
    /// `region ∧ {x_axis ≥ mid}`.
    pub hi: SemialgebraicSet,
}

/// `a·x_i + b` recognizer: the interval bounds come only from constraints
/// that are linear in a single variable, the one shape a conjunction of
/// polynomial inequalities pins down without optimization.
fn linear_univariate(p: &Poly<Rat>, n: usize) -> Option<(usize, Rat, Rat)> {
    let mut var: Option<(usize, Rat)> = None;
    let mut cst = Rat::zero();
    for (m, c) in p.terms() {
        if m.degree() == 0 {
            cst = c.clone();
        } else if m.degree() == 1 {
            let i = (0..n).find(|&i| m.exp(i) == 1)?;
            if var.is_some() {
                return None;
            }
            var = Some((i, c.clone()));
        } else {
            return None;
        }
    }
    let (i, a) = var?;
    if a.is_zero() {
        return None;
    }
    Some((i, a, cst))
}

/// Per-variable `[lo, hi]` ranges implied by the linear one-variable
/// constraints of the given sets (an equality clips both sides).
fn linear_ranges(
    sets: &[&SemialgebraicSet],
    n: usize,
) -> Vec<(Option<Rat>, Option<Rat>)> {
    let mut ranges: Vec<(Option<Rat>, Option<Rat>)> = vec![(None, None); n];
    let mut clip = |i: usize, val: Rat, upper: bool| {
        let (lo, hi) = &mut ranges[i];
        if upper {
            if hi.as_ref().map_or(true, |h| val < *h) {
                *hi = Some(val);
            }
        } else if lo.as_ref().map_or(true, |l| val > *l) {
            *lo = Some(val);
        }
    };
    for set in sets {
        for c in &set.conjuncts {
            if let Some((i, a, b)) = linear_univariate(c, n) {
                // a·x + b ≥ 0: bound at -b/a, direction by the sign of a.
                let bound = -&b / &a;
                clip(i, bound, a.is_negative());
            }
        }
        for eq in &set.equalities {
            if let Some((i, a, b)) = linear_univariate(eq, n) {
                let bound = -&b / &a;
                clip(i, bound.clone(), true);
                clip(i, bound, false);
            }
        }
    }
    ranges
}

/// Split an unsafe region in half along one coordinate. With `axis = None`
/// the widest finite range wins (ties go to the lower variable index); the
/// midpoint is exact, so `lo ∪ hi` is the original region. The ranges come
/// from the region's own constraints intersected with the location
/// invariant's, which is why an unconstrained variable is an error rather
/// than a guess.
pub fn bisect_region(
    region: &SemialgebraicSet,
    inv: &SemialgebraicSet,
    vars: &[String],
    axis: Option<usize>,
) -> Result<BisectSplit, DriverError> {
    let n = vars.len();
    let ranges = linear_ranges(&[region, inv], n);
    let width = |i: usize| -> Option<Rat> {
        match &ranges[i] {
            (Some(lo), Some(hi)) if lo <= hi => Some(hi - lo),
            _ => None,
        }
    };
    let axis = match axis {
        Some(i) => {
            if width(i).is_none() {
                return Err(DriverError::UnboundedVariable(vars[i].clone()));
            }
            i
        }
        None => {
            let mut best: Option<(usize, Rat)> = None;
            for i in 0..n {
                if let Some(w) = width(i) {
                    if best.as_ref().map_or(true, |(_, bw)| w > *bw) {
                        best = Some((i, w));
                    }
                }
            }
            best.ok_or(DriverError::NoBoundedVariable)?.0
        }
    };
    let (lo_b, hi_b) = (ranges[axis].0.clone().unwrap(), ranges[axis].1.clone().unwrap());
    let mid = (lo_b + hi_b) / Rat::from(BigInt::from(2));
    let xi = Poly::var(n, axis);
    let mut lo = region.clone();
    lo.conjuncts.push(Poly::constant(n, mid.clone()).sub(&xi));
    let mut hi = region.clone();
    hi.conjuncts.push(xi.sub(&Poly::constant(n, mid.clone())));
    Ok(BisectSplit { axis, mid, lo, hi })
}

// ---------------------------------------------------------------------------
// Single-subregion pipeline
// ---------------------------------------------------------------------------

/// The system restricted to one unsafe piece of one location: all other
/// unsafe regions are dropped, so a certificate for the restriction
/// separates exactly this piece. Splitting appends its half-space
/// conjuncts to the piece.
fn restrict_to_piece(
    h: &HybridSystem,
    loc: usize,
    piece: usize,
    splits: &[Poly<Rat>],
) -> HybridSystem {
    let mut out = h.clone();
    for (i, l) in out.locations.iter_mut().enumerate() {
        if i == loc {
            let mut r = l.unsafe_regions[piece].clone();
            r.conjuncts.extend(splits.iter().cloned());
            l.unsafe_regions = vec![r];
        } else {
            l.unsafe_regions.clear();
        }
    }
    out
}

/// Template-coefficient warm start from the strengthened linear encoding:
/// solve the same system with the bilinear terms dropped and copy the
/// resulting template coefficients into the bilinear problem's layout.
/// The linear relaxation is infeasible exactly when the bilinear form is
/// needed, so a `None` here is the common case, not a failure.
fn lmi_warm_start(
    h: &HybridSystem,
    d: u32,
    cfg: &RunConfig,
    anchor: Option<&Vec<Rat>>,
    target_prog: &SosProgram,
    target: &BmiProblem,
) -> Option<Vec<f64>> {
    let opts = cfg.encode_options(anchor);
    let prog = build_sos_program(h, d, cfg.e, Mode::LmiStrengthened, &opts).ok()?;
    let bmi = assemble_bmi(&prog).ok()?;
    let sol = solve_bmi_alternating(&bmi, None, &cfg.solver_config()).feasible()?;
    let full = bmi.full_assignment_f64(&sol.u, &sol.v);
    let mut u0 = vec![0.0; target.u.len()];
    let mut mapped = false;
    for (k, id) in target.u.iter().enumerate() {
        if let VarOrigin::TemplateCoeff { tpl, idx } = &target_prog.registry.info(*id).origin {
            let t = &target_prog.templates[*tpl];
            if let Some(lt) = prog.template_for(&t.loc, t.part) {
                if let Some(vid) = prog.templates[lt].coeffs.get(*idx) {
                    u0[k] = full[vid.0];
                    mapped = true;
                }
            }
        }
    }
    mapped.then_some(u0)
}

/// One encode → solve → refine → recover pass at a fixed degree. Failures
/// come back as a short human-readable stage note for the report's
/// escalation trail.
fn certify_at(
    h: &HybridSystem,
    d: u32,
    cfg: &RunConfig,
    anchor: Option<&Vec<Rat>>,
) -> Result<(SosProgram, RationalCertificate), String> {
    let opts = cfg.encode_options(anchor);
    let prog =
        build_sos_program(h, d, cfg.e, cfg.mode, &opts).map_err(|e| format!("encode: {e}"))?;
    let bmi = assemble_bmi(&prog).map_err(|e| format!("assemble: {e}"))?;
    let scfg = cfg.solver_config();
    let u0 = if cfg.mode == Mode::Bmi {
        lmi_warm_start(h, d, cfg, anchor, &prog, &bmi)
    } else {
        None
    };
    let sol = match solve_bmi_alternating(&bmi, u0, &scfg) {
        SolveOutcome::Feasible(s) => s,
        _ => return Err("no numeric certificate found by the solver".into()),
    };
    let vals = bmi.full_assignment_f64(&sol.u, &sol.v);
    let rcfg = RefineConfig::default();
    let refined = newton_refine(&prog, &vals, &rcfg);
    let cert = recover_certificate(&prog, &refined.vals, cfg.d_bound, cfg.tau)
        .or_else(|_| {
            recover_snapping_template(
                &prog,
                &bmi,
                &refined.vals,
                cfg.d_bound,
                cfg.tau,
                &scfg,
                &rcfg,
            )
        })
        .map_err(|e| format!("exact recovery failed: {e}"))?;
    Ok((prog, cert))
}

// ---------------------------------------------------------------------------
// Certificate file
// ---------------------------------------------------------------------------

/// One certified (or attempted) unsafe subregion in a certificate file.
#[derive(Clone, Debug)]
pub struct CertSubregion {
    pub id: String,
    /// Location id (stable across reloads, unlike indices).
    pub loc: String,
    /// Index into the location's original unsafe-region list.
    pub piece: usize,
    /// Half-space cuts accumulated by bisection, each meaning `p ≥ 0`.
    pub splits: Vec<Poly<Rat>>,
    pub degree: u32,
    /// `(location id, part, polynomial)` per invariant template.
    pub invariants: Vec<(String, usize, Poly<Rat>)>,
    /// Full assignment of every program unknown, in registry order; absent
    /// in hand-written files that supply only the invariants.
    pub vals: Option<Vec<Rat>>,
    /// Pre-rendered multiplier/Gram sections (informational; not parsed
    /// back).
    pub detail: String,
}

/// The on-disk artifact of a run: everything needed to rebuild the program
/// and replay the exact checker, plus the human-readable multipliers.
#[derive(Clone, Debug)]
pub struct CertificateFile {
    pub verdict: Verdict,
    pub config: RunConfig,
    pub anchor: Option<Vec<Rat>>,
    pub model_sha256: String,
    pub model_text: String,
    pub subregions: Vec<CertSubregion>,
}

pub fn sha256_hex(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

fn render_rat(r: &Rat) -> String {
    r.to_string()
}

fn parse_rat(s: &str) -> Result<Rat, DriverError> {
    let bad = || DriverError::Certificate(format!("malformed rational `{s}`"));
    let (num, den) = match s.split_once('/') {
        Some((a, b)) => (a, b),
        None => (s, "1"),
    };
    let num: BigInt = num.trim().parse().map_err(|_| bad())?;
    let den: BigInt = den.trim().parse().map_err(|_| bad())?;
    if den.is_zero() {
        return Err(bad());
    }
    Ok(Rat::new(num, den))
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Safe => "safe",
        Verdict::Unknown => "unknown",
        Verdict::Falsified => "falsified",
    }
}

fn parse_verdict(s: &str) -> Result<Verdict, DriverError> {
    match s {
        "safe" => Ok(Verdict::Safe),
        "unknown" => Ok(Verdict::Unknown),
        "falsified" => Ok(Verdict::Falsified),
        _ => Err(DriverError::Certificate(format!("unknown verdict `{s}`"))),
    }
}

fn render_config_line(cfg: &RunConfig) -> String {
    let eps = |e: &Option<Rat>| e.as_ref().map_or("default".to_string(), render_rat);
    format!(
        "config: degree={}..{} sos-degree={} denominator-bound={} tolerance={:e} mode={} \
         split-depth={} seed={} eps1={} eps2={}",
        cfg.d_min,
        cfg.d_max,
        cfg.e,
        cfg.d_bound,
        cfg.tau,
        cfg.mode.as_str(),
        cfg.split_depth,
        cfg.seed,
        eps(&cfg.eps1),
        eps(&cfg.eps2),
    )
}

fn parse_config_line(line: &str) -> Result<RunConfig, DriverError> {
    let mut cfg = RunConfig::default();
    for kv in line.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| DriverError::Certificate(format!("malformed config item `{kv}`")))?;
        let bad = |what: &str| DriverError::Certificate(format!("bad {what} `{v}`"));
        match k {
            "degree" => {
                let (a, b) = match v.split_once("..") {
                    Some((a, b)) => (a, b),
                    None => (v, v),
                };
                cfg.d_min = a.parse().map_err(|_| bad("degree"))?;
                cfg.d_max = b.parse().map_err(|_| bad("degree"))?;
            }
            "sos-degree" => cfg.e = v.parse().map_err(|_| bad("sos-degree"))?,
            "denominator-bound" => {
                cfg.d_bound = v.parse().map_err(|_| bad("denominator-bound"))?
            }
            "tolerance" => cfg.tau = v.parse().map_err(|_| bad("tolerance"))?,
            "mode" => {
                cfg.mode = Mode::parse(v).ok_or_else(|| bad("mode"))?;
            }
            "split-depth" => cfg.split_depth = v.parse().map_err(|_| bad("split-depth"))?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad("seed"))?,
            "eps1" => cfg.eps1 = if v == "default" { None } else { Some(parse_rat(v)?) },
            "eps2" => cfg.eps2 = if v == "default" { None } else { Some(parse_rat(v)?) },
            _ => return Err(DriverError::Certificate(format!("unknown config key `{k}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Human-readable multiplier/Gram sections for one certified subregion:
/// each sum-of-squares block as its basis, full row-major Gram matrix and
/// expanded polynomial; each sign-free multiplier as a polynomial.
fn render_detail(prog: &SosProgram, vals: &[Rat]) -> String {
    let vars = &prog.sys_vars;
    let names: Vec<String> = if prog
        .constraints
        .iter()
        .any(|c| c.nvars == 2 * vars.len())
    {
        vars.iter().cloned().chain(vars.iter().map(|v| format!("{v}'"))).collect()
    } else {
        vars.clone()
    };
    let mono_text = |m: &Monomial| -> String {
        let mut p = Poly::zero(m.nvars());
        p.add_term(m.clone(), Rat::one());
        render_poly(&p, &names[..m.nvars().min(names.len())])
    };
    let mut out = String::new();
    let mut gram_block =
        |out: &mut String, cons: &str, role: &str, basis: &[Monomial], entries: &[VarId]| {
            writeln!(out, "begin-gram {cons} {role}").unwrap();
            let b: Vec<String> = basis.iter().map(&mono_text).collect();
            writeln!(out, "basis: {}", b.join(" ")).unwrap();
            let g = gram_at(entries, basis.len(), vals);
            for i in 0..g.side() {
                let row: Vec<String> =
                    (0..g.side()).map(|j| render_rat(&g.get(i, j))).collect();
                writeln!(out, "row: {}", row.join(" ")).unwrap();
            }
            writeln!(out, "end-gram").unwrap();
        };
    for cons in &prog.constraints {
        for mb in &cons.multipliers {
            match mb.signedness {
                Signedness::Sos => {
                    gram_block(&mut out, &cons.name, &mb.role, &mb.basis, &mb.entries);
                }
                Signedness::Free => {
                    let p = mb.multiplier_sympoly(cons.nvars).eval_rat(vals);
                    writeln!(
                        out,
                        "multiplier {} {}: {}",
                        cons.name,
                        mb.role,
                        render_poly(&p, &names[..cons.nvars])
                    )
                    .unwrap();
                }
            }
        }
        gram_block(
            &mut out,
            &cons.name,
            "remainder",
            &cons.remainder_basis,
            &cons.remainder_entries,
        );
    }
    out
}

pub fn render_certificate(file: &CertificateFile) -> String {
    let mut out = String::new();
    writeln!(out, "soscert certificate v1").unwrap();
    writeln!(out, "verdict: {}", verdict_str(file.verdict)).unwrap();
    writeln!(out, "{}", render_config_line(&file.config)).unwrap();
    match &file.anchor {
        Some(p) => {
            let xs: Vec<String> = p.iter().map(render_rat).collect();
            writeln!(out, "anchor: {}", xs.join(" ")).unwrap();
        }
        None => writeln!(out, "anchor: none").unwrap(),
    }
    writeln!(out, "model-sha256: {}", file.model_sha256).unwrap();
    writeln!(out, "begin-model").unwrap();
    out.push_str(&file.model_text);
    if !file.model_text.ends_with('\n') {
        out.push('\n');
    }
    writeln!(out, "end-model").unwrap();
    for sub in &file.subregions {
        writeln!(out, "begin-subregion {}", sub.id).unwrap();
        writeln!(out, "location: {}", sub.loc).unwrap();
        writeln!(out, "piece: {}", sub.piece).unwrap();
        writeln!(out, "degree: {}", sub.degree).unwrap();
        // Splits and invariants are polynomials over the system variables.
        let vars = parse_system(&file.model_text)
            .map(|h| h.vars)
            .unwrap_or_default();
        for s in &sub.splits {
            writeln!(out, "split: {}", render_poly(s, &vars)).unwrap();
        }
        for (loc, part, p) in &sub.invariants {
            writeln!(out, "invariant {loc}.{part}: {}", render_poly(p, &vars)).unwrap();
        }
        out.push_str(&sub.detail);
        if let Some(vals) = &sub.vals {
            writeln!(out, "vals: {}", vals.len()).unwrap();
            for (i, v) in vals.iter().enumerate() {
                writeln!(out, "val: {i} {}", render_rat(v)).unwrap();
            }
        }
        writeln!(out, "end-subregion").unwrap();
    }
    out
}

pub fn parse_certificate(text: &str) -> Result<CertificateFile, DriverError> {
    let mut lines = text.lines().peekable();
    let bad = |msg: &str| DriverError::Certificate(msg.to_string());
    match lines.next() {
        Some("soscert certificate v1") => {}
        _ => return Err(bad("missing `soscert certificate v1` header")),
    }
    let mut verdict = Verdict::Unknown;
    let mut config = RunConfig::default();
    let mut anchor: Option<Vec<Rat>> = None;
    let mut model_sha256 = String::new();
    let mut model_text = String::new();
    let mut subregions: Vec<CertSubregion> = Vec::new();
    let mut vars: Vec<String> = Vec::new();

    while let Some(line) = lines.next() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(v) = line.strip_prefix("verdict: ") {
            verdict = parse_verdict(v)?;
        } else if let Some(c) = line.strip_prefix("config: ") {
            config = parse_config_line(c)?;
        } else if let Some(a) = line.strip_prefix("anchor: ") {
            anchor = if a == "none" {
                None
            } else {
                Some(a.split_whitespace().map(parse_rat).collect::<Result<_, _>>()?)
            };
        } else if let Some(hsh) = line.strip_prefix("model-sha256: ") {
            model_sha256 = hsh.to_string();
        } else if line == "begin-model" {
            let mut buf = String::new();
            loop {
                match lines.next() {
                    Some("end-model") => break,
                    Some(l) => {
                        buf.push_str(l);
                        buf.push('\n');
                    }
                    None => return Err(bad("unterminated model block")),
                }
            }
            vars = parse_system(&buf).map(|h| h.vars).unwrap_or_default();
            model_text = buf;
        } else if let Some(id) = line.strip_prefix("begin-subregion ") {
            if model_text.is_empty() {
                return Err(bad("subregion before model block"));
            }
            let mut sub = CertSubregion {
                id: id.to_string(),
                loc: String::new(),
                piece: 0,
                splits: Vec::new(),
                degree: 0,
                invariants: Vec::new(),
                vals: None,
                detail: String::new(),
            };
            loop {
                let l = match lines.next() {
                    Some(l) => l.trim_end(),
                    None => return Err(bad("unterminated subregion block")),
                };
                if l == "end-subregion" {
                    break;
                } else if let Some(v) = l.strip_prefix("location: ") {
                    sub.loc = v.to_string();
                } else if let Some(v) = l.strip_prefix("piece: ") {
                    sub.piece =
                        v.parse().map_err(|_| bad(&format!("bad piece `{v}`")))?;
                } else if let Some(v) = l.strip_prefix("degree: ") {
                    sub.degree =
                        v.parse().map_err(|_| bad(&format!("bad degree `{v}`")))?;
                } else if let Some(v) = l.strip_prefix("split: ") {
                    sub.splits.push(parse_poly(v, &vars).map_err(DriverError::Model)?);
                } else if let Some(v) = l.strip_prefix("invariant ") {
                    let (head, poly) = v
                        .split_once(": ")
                        .ok_or_else(|| bad("malformed invariant line"))?;
                    let (loc, part) = head
                        .rsplit_once('.')
                        .ok_or_else(|| bad("invariant key must be `<loc>.<part>`"))?;
                    let part: usize =
                        part.parse().map_err(|_| bad("invariant part must be a number"))?;
                    sub.invariants.push((
                        loc.to_string(),
                        part,
                        parse_poly(poly, &vars).map_err(DriverError::Model)?,
                    ));
                } else if let Some(v) = l.strip_prefix("vals: ") {
                    let count: usize =
                        v.parse().map_err(|_| bad(&format!("bad vals count `{v}`")))?;
                    let mut vals = vec![Rat::zero(); count];
                    for _ in 0..count {
                        let vl = lines
                            .next()
                            .ok_or_else(|| bad("truncated vals section"))?
                            .trim_end();
                        let rest = vl
                            .strip_prefix("val: ")
                            .ok_or_else(|| bad("expected `val: <index> <rational>`"))?;
                        let (i, r) = rest
                            .split_once(' ')
                            .ok_or_else(|| bad("expected `val: <index> <rational>`"))?;
                        let i: usize =
                            i.parse().map_err(|_| bad(&format!("bad val index `{i}`")))?;
                        if i >= count {
                            return Err(bad(&format!("val index {i} out of range")));
                        }
                        vals[i] = parse_rat(r)?;
                    }
                    sub.vals = Some(vals);
                } else if l.starts_with("begin-gram ") {
                    // Informational section: skip to its end marker.
                    loop {
                        match lines.next() {
                            Some("end-gram") => break,
                            Some(_) => {}
                            None => return Err(bad("unterminated gram block")),
                        }
                    }
                } else if l.starts_with("multiplier ") || l.starts_with("note: ") {
                    // Informational lines.
                } else {
                    return Err(bad(&format!("unexpected line in subregion: `{l}`")));
                }
            }
            if sub.loc.is_empty() {
                return Err(bad("subregion missing `location:`"));
            }
            if sub.degree == 0 {
                return Err(bad("subregion missing `degree:`"));
            }
            subregions.push(sub);
        } else {
            return Err(bad(&format!("unexpected line: `{line}`")));
        }
    }
    if model_text.is_empty() {
        return Err(bad("missing model block"));
    }
    Ok(CertificateFile { verdict, config, anchor, model_sha256, model_text, subregions })
}

// ---------------------------------------------------------------------------
// Verification run
// ---------------------------------------------------------------------------

/// Outcome of one subregion's escalation loop.
#[derive(Clone, Debug)]
pub enum SubStatus {
    Certified { degree: u32 },
    Exhausted,
}

#[derive(Clone, Debug)]
pub struct SubResult {
    pub id: String,
    pub status: SubStatus,
    /// One line per attempted degree (and any split note).
    pub trail: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub verdict: Verdict,
    pub subregions: Vec<SubResult>,
    pub certificate_text: String,
    pub report_text: String,
    pub exit_code: i32,
}

struct WorkItem {
    id: String,
    loc: usize,
    piece: usize,
    region: SemialgebraicSet,
    splits: Vec<Poly<Rat>>,
    depth: u32,
}

/// Run the full pipeline on a parsed system. The verdict is SAFE exactly
/// when every unsafe piece (after any splitting) carries an exactly
/// verified certificate; otherwise UNKNOWN — this path never claims
/// unsafety, since it only ever fails to find a proof.
pub fn run_verification(h: &HybridSystem, cfg: &RunConfig) -> Result<RunOutcome, DriverError> {
    cfg.validate()?;
    let anchor = cfg.anchor.clone().or_else(|| find_anchor(h));
    let model_text = render_system(h);
    let model_sha256 = sha256_hex(&model_text);

    let mut stack: Vec<WorkItem> = Vec::new();
    for (li, l) in h.locations.iter().enumerate().rev() {
        for (pi, r) in l.unsafe_regions.iter().enumerate().rev() {
            stack.push(WorkItem {
                id: format!("{}/u{}", l.id, pi),
                loc: li,
                piece: pi,
                region: r.clone(),
                splits: Vec::new(),
                depth: 0,
            });
        }
    }
    let no_unsafe = stack.is_empty();

    let mut results: Vec<SubResult> = Vec::new();
    let mut cert_subs: Vec<CertSubregion> = Vec::new();
    let mut reports: Vec<(String, SafetyReport)> = Vec::new();
    let ccfg = CheckConfig { seed: cfg.seed, ..CheckConfig::default() };

    while let Some(item) = stack.pop() {
        let h_sub = restrict_to_piece(h, item.loc, item.piece, &item.splits);
        let mut trail: Vec<String> = Vec::new();
        let mut certified = false;
        for d in cfg.d_min..=cfg.d_max {
            match certify_at(&h_sub, d, cfg, anchor.as_ref()) {
                Ok((prog, cert)) => {
                    let report = verify_safety(&h_sub, &prog, &cert.vals, &ccfg);
                    if report.verdict == Verdict::Safe {
                        trail.push(format!("degree {d}: certified exactly"));
                        cert_subs.push(CertSubregion {
                            id: item.id.clone(),
                            loc: h.locations[item.loc].id.clone(),
                            piece: item.piece,
                            splits: item.splits.clone(),
                            degree: d,
                            invariants: cert.invariants.clone(),
                            vals: Some(cert.vals.clone()),
                            detail: render_detail(&prog, &cert.vals),
                        });
                        reports.push((item.id.clone(), report));
                        results.push(SubResult {
                            id: item.id.clone(),
                            status: SubStatus::Certified { degree: d },
                            trail: trail.clone(),
                        });
                        certified = true;
                        break;
                    }
                    // A recovered certificate that the checker rejects
                    // would be a library bug; treat it as a failed degree
                    // rather than trusting either side.
                    trail.push(format!("degree {d}: recovered assignment failed re-check"));
                }
                Err(note) => trail.push(format!("degree {d}: {note}")),
            }
        }
        if certified {
            continue;
        }
        if item.depth < cfg.split_depth {
            match bisect_region(&item.region, &h.locations[item.loc].inv, &h.vars, None) {
                Ok(split) => {
                    trail.push(format!(
                        "splitting on {} at {}",
                        h.vars[split.axis],
                        render_rat(&split.mid)
                    ));
                    results.push(SubResult {
                        id: item.id.clone(),
                        status: SubStatus::Exhausted,
                        trail,
                    });
                    let mk = |suffix: &str, region: SemialgebraicSet, split_poly: Poly<Rat>| {
                        let mut splits = item.splits.clone();
                        splits.push(split_poly);
                        WorkItem {
                            id: format!("{}.{}", item.id, suffix),
                            loc: item.loc,
                            piece: item.piece,
                            region,
                            splits,
                            depth: item.depth + 1,
                        }
                    };
                    let lo_poly = split.lo.conjuncts.last().unwrap().clone();
                    let hi_poly = split.hi.conjuncts.last().unwrap().clone();
                    // Push hi first so lo is processed first (stack order).
                    stack.push(mk("hi", split.hi.clone(), hi_poly));
                    stack.push(mk("lo", split.lo.clone(), lo_poly));
                    continue;
                }
                Err(e) => trail.push(format!("split unavailable: {e}")),
            }
        }
        trail.push(format!("no exact certificate up to degree {}", cfg.d_max));
        results.push(SubResult { id: item.id.clone(), status: SubStatus::Exhausted, trail });
    }

    // A leaf is a work item that was not split further; the verdict needs
    // every leaf certified. Split parents appear in `results` only for the
    // report trail.
    let all_leaves_ok = results.iter().all(|r| {
        matches!(r.status, SubStatus::Certified { .. })
            || results.iter().any(|c| c.id.starts_with(&format!("{}.", r.id)))
    });
    let verdict = if no_unsafe || all_leaves_ok { Verdict::Safe } else { Verdict::Unknown };

    let file = CertificateFile {
        verdict,
        config: cfg.clone(),
        anchor: anchor.clone(),
        model_sha256: model_sha256.clone(),
        model_text: model_text.clone(),
        subregions: cert_subs,
    };
    let certificate_text = render_certificate(&file);

    let mut report = String::new();
    writeln!(report, "soscert verification report").unwrap();
    writeln!(report, "model: {}", h.name).unwrap();
    writeln!(report, "model-sha256: {model_sha256}").unwrap();
    writeln!(report, "{}", render_config_line(cfg)).unwrap();
    match &anchor {
        Some(p) => {
            let xs: Vec<String> = p.iter().map(render_rat).collect();
            writeln!(report, "anchor: {}", xs.join(" ")).unwrap();
        }
        None => writeln!(report, "anchor: none").unwrap(),
    }
    if no_unsafe {
        writeln!(report, "no unsafe regions declared; nothing to separate").unwrap();
    }
    writeln!(report).unwrap();
    for r in &results {
        writeln!(report, "subregion {}", r.id).unwrap();
        for t in &r.trail {
            writeln!(report, "  {t}").unwrap();
        }
        if let Some((_, rep)) = reports.iter().find(|(id, _)| *id == r.id) {
            for line in rep.render(&h.vars).lines() {
                writeln!(report, "  {line}").unwrap();
            }
        }
        writeln!(report).unwrap();
    }
    match verdict {
        Verdict::Safe => writeln!(report, "verdict: SAFE").unwrap(),
        _ => writeln!(
            report,
            "verdict: UNKNOWN (no exact certificate up to degree {}, split depth {})",
            cfg.d_max, cfg.split_depth
        )
        .unwrap(),
    }

    let exit_code = match verdict {
        Verdict::Safe => 0,
        Verdict::Unknown => 1,
        Verdict::Falsified => 2,
    };
    Ok(RunOutcome {
        verdict,
        subregions: results,
        certificate_text,
        report_text: report,
        exit_code,
    })
}

/// Parse a model text and run verification (the `verify` entry point).
pub fn verify_model_text(text: &str, cfg: &RunConfig) -> Result<RunOutcome, DriverError> {
    let h = parse_system(text)?;
    Ok(run_verification(&h, cfg)?)
}

// ---------------------------------------------------------------------------
// Certificate checking
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub verdict: Verdict,
    pub report_text: String,
    pub exit_code: i32,
}

/// Re-verify a certificate file from scratch. Subregions carrying a full
/// assignment are replayed through the exact checker; subregions carrying
/// only invariant polynomials get their multipliers re-derived by the
/// fixed-template pipeline first. The overall verdict is SAFE only if every
/// subregion certifies; a sampled counterexample to any condition makes it
/// FALSIFIED.
pub fn check_certificate(text: &str) -> Result<CheckOutcome, DriverError> {
    let file = parse_certificate(text)?;
    let h = parse_system(&file.model_text)?;
    let actual = sha256_hex(&file.model_text);
    if !file.model_sha256.is_empty() && file.model_sha256 != actual {
        return Err(DriverError::DigestMismatch {
            expected: file.model_sha256.clone(),
            actual,
        });
    }
    if file.subregions.is_empty() {
        return Err(DriverError::Certificate("no subregions to check".into()));
    }
    let cfg = &file.config;
    let ccfg = CheckConfig { seed: cfg.seed, ..CheckConfig::default() };

    let mut report = String::new();
    writeln!(report, "soscert certificate check").unwrap();
    writeln!(report, "model: {}", h.name).unwrap();
    writeln!(report, "stored verdict: {}", verdict_str(file.verdict)).unwrap();
    writeln!(report).unwrap();

    let mut verdicts: Vec<Verdict> = Vec::new();
    for sub in &file.subregions {
        let loc = h
            .location_index(&sub.loc)
            .ok_or_else(|| DriverError::Certificate(format!("unknown location `{}`", sub.loc)))?;
        if sub.piece >= h.locations[loc].unsafe_regions.len() {
            return Err(DriverError::Certificate(format!(
                "location `{}` has no unsafe piece {}",
                sub.loc, sub.piece
            )));
        }
        let h_sub = restrict_to_piece(&h, loc, sub.piece, &sub.splits);
        let opts = cfg.encode_options(file.anchor.as_ref());
        let prog = build_sos_program(&h_sub, sub.degree, cfg.e, cfg.mode, &opts)?;

        writeln!(report, "subregion {} (degree {})", sub.id, sub.degree).unwrap();
        let rep = match &sub.vals {
            Some(vals) => {
                if vals.len() != prog.registry.len() {
                    return Err(DriverError::Certificate(format!(
                        "subregion {}: {} values for {} program unknowns",
                        sub.id,
                        vals.len(),
                        prog.registry.len()
                    )));
                }
                for (loc_id, part, stored) in &sub.invariants {
                    let ti = prog.template_for(loc_id, *part).ok_or_else(|| {
                        DriverError::Certificate(format!(
                            "no template for location `{loc_id}` part {part}"
                        ))
                    })?;
                    if &prog.templates[ti].poly_at(vals) != stored {
                        return Err(DriverError::Certificate(format!(
                            "subregion {}: stored invariant for `{loc_id}` disagrees with the \
                             assignment",
                            sub.id
                        )));
                    }
                }
                verify_safety(&h_sub, &prog, vals, &ccfg)
            }
            None => {
                // Invariants only: pin the template and re-derive the rest.
                let mut template: BTreeMap<VarId, Rat> = BTreeMap::new();
                for t in &prog.templates {
                    let stored = sub
                        .invariants
                        .iter()
                        .find(|(l, p, _)| *l == t.loc && *p == t.part)
                        .map(|(_, _, poly)| poly.clone())
                        .ok_or_else(|| {
                            DriverError::Certificate(format!(
                                "missing invariant for location `{}` part {}",
                                t.loc, t.part
                            ))
                        })?;
                    for (m, _) in stored.terms() {
                        if !t.basis.contains(m) {
                            return Err(DriverError::Certificate(format!(
                                "invariant for `{}` exceeds degree {}",
                                t.loc, sub.degree
                            )));
                        }
                    }
                    for (i, m) in t.basis.iter().enumerate() {
                        template.insert(t.coeffs[i], stored.coeff(m));
                    }
                }
                let bmi = assemble_bmi(&prog)?;
                match certify_fixed_template(
                    &prog,
                    &bmi,
                    &template,
                    None,
                    cfg.d_bound,
                    cfg.tau,
                    &cfg.solver_config(),
                    &RefineConfig::default(),
                ) {
                    Ok(cert) => {
                        writeln!(report, "  multipliers re-derived for the stored invariants")
                            .unwrap();
                        verify_safety(&h_sub, &prog, &cert.vals, &ccfg)
                    }
                    Err(e) => {
                        writeln!(report, "  could not derive exact multipliers: {e}").unwrap();
                        // Report what the sampler can say about the stored
                        // invariants themselves (identities cannot hold
                        // with the multipliers zeroed, so the verdict can
                        // only be UNKNOWN or FALSIFIED).
                        let vals = prog_vals_from_template(&prog, &template);
                        verify_safety(&h_sub, &prog, &vals, &ccfg)
                    }
                }
            }
        };
        for line in rep.render(&h.vars).lines() {
            writeln!(report, "  {line}").unwrap();
        }
        writeln!(report).unwrap();
        verdicts.push(rep.verdict);
    }
    let verdict = if verdicts.iter().any(|v| *v == Verdict::Falsified) {
        Verdict::Falsified
    } else if verdicts.iter().all(|v| *v == Verdict::Safe) {
        Verdict::Safe
    } else {
        Verdict::Unknown
    };
    writeln!(report, "reproduced verdict: {}", verdict_str(verdict)).unwrap();
    let exit_code = match verdict {
        Verdict::Safe => 0,
        Verdict::Unknown => 1,
        Verdict::Falsified => 2,
    };
    Ok(CheckOutcome { verdict, report_text: report, exit_code })
}

fn prog_vals_from_template(prog: &SosProgram, template: &BTreeMap<VarId, Rat>) -> Vec<Rat> {
    let mut vals = vec![Rat::zero(); prog.registry.len()];
    for (id, v) in template {
        vals[id.0] = v.clone();
    }
    vals
}
