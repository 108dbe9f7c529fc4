//! One full KAM step: truncate the perturbation, solve the homological
//! equations, push the Hamiltonian through the time-1 Lie flow of the
//! generator, translate away the frequency drift, and reassemble the
//! normal form with its norm ledger.
//!
//! Steps run on one parameter node at a time; the driver owns the grid and
//! the monotone exclusion bookkeeping. Acceptance is gated on operational
//! checks (floors, truncation tail, Lie-flow convergence and displacement,
//! translation bound, measured contraction); the literal smallness
//! inequalities of the iteration theory are evaluated separately by the
//! scheduler and attached to the certificate as diagnostics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{EngineError, Result};
use crate::homological::{
    assemble_generator, extract_shell, solve_isoenergetic_translation, solve_translation,
    Generator, TranslationShift,
};
use crate::mslinalg::{FrequencyData, ParamMat, ParamVec, ScaleSet};
use crate::tfseries::{build, AnalyticDomain, Dims, MultiIndex, TFSeries, C64};

/// Normal form at one parameter node: everything concrete, scales retained
/// for the divisor floors.
#[derive(Clone)]
pub struct NodeNormalForm {
    pub dims: Dims,
    pub scales: ScaleSet,
    pub energy: f64,
    pub omega: DVector<f64>,
    /// Symmetric (n+2m) matrix of the quadratic part.
    pub m: DMatrix<f64>,
    /// Cubic-and-higher jet, Fourier mode 0 only.
    pub h: TFSeries,
    /// Perturbation series P of the step Hamiltonian N + eps P.
    pub p: TFSeries,
    pub eps: f64,
}

impl NodeNormalForm {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims.yz_dim();
        if self.omega.len() != self.dims.n || self.m.nrows() != d || self.m.ncols() != d {
            return Err(EngineError::Dimension("normal form shapes".into()));
        }
        let asym = (&self.m - self.m.transpose())
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        if asym > 1e-12 * self.m.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0) {
            return Err(EngineError::Domain("M must be symmetric".into()));
        }
        for (idx, _) in self.h.terms() {
            if idx.k_sup() != 0 || idx.degree() < 3 {
                return Err(EngineError::Domain(
                    "h must be Fourier mode 0 with degree >= 3".into(),
                ));
            }
        }
        Ok(())
    }

    /// Frequency data view at this node (constant in lambda).
    pub fn freq_data(&self) -> FrequencyData {
        let scale_w = self.scales.min_eps().min(1.0);
        let scale_m = self.scales.min_mu().min(1.0);
        let scale_m = if scale_m.is_finite() { scale_m } else { 1.0 };
        FrequencyData::new(
            self.dims,
            self.scales.clone(),
            vec![(
                scale_w,
                ParamVec::constant(self.omega.clone() / scale_w),
            )],
            vec![(scale_m, ParamMat::constant(self.m.clone() / scale_m))],
            self.h.clone(),
        )
        .expect("node data validated")
    }

    /// The integrable part as a series: e + <omega, y> + 1/2 <u, M u> + h.
    pub fn n_series(&self, degree_cap: u32, fourier_cap: i64) -> TFSeries {
        let omega_slice: Vec<f64> = self.omega.iter().copied().collect();
        let mut n = build::linear_in_y(self.dims, degree_cap, fourier_cap, &omega_slice)
            .add(&build::quadratic_form(
                self.dims,
                degree_cap,
                fourier_cap,
                &self.m,
            ))
            .expect("same dims");
        if self.energy != 0.0 {
            n.add_term(MultiIndex::zero(self.dims), C64::new(self.energy, 0.0))
                .expect("constant");
        }
        for (idx, c) in self.h.terms() {
            n.add_param_term(idx.clone(), c.clone()).expect("jet caps");
        }
        n
    }

    /// Weighted norm of the scaled perturbation eps P on D(r, s).
    pub fn perturbation_norm(&self, dom: &AnalyticDomain) -> f64 {
        self.p.scale(C64::new(self.eps, 0.0)).weighted_norm(dom, 0)
    }
}

/// Sequence values and constants one step needs; produced by the scheduler.
#[derive(Clone, Debug)]
pub struct StepParams {
    pub nu: usize,
    pub r: f64,
    pub s: f64,
    pub gamma: f64,
    pub eta: f64,
    pub mu: f64,
    pub r_next: f64,
    pub s_next: f64,
    pub gamma_next: f64,
    pub eta_next: f64,
    pub mu_next: f64,
    /// Shell cap K_+ for the truncation.
    pub k_plus: i64,
    pub tau: f64,
    pub b: u32,
    /// Lie series stops when a term drops below this fraction of the
    /// remainder budget; the dropped tail is added to the ledger.
    pub lie_tail_rel: f64,
    /// Use the isoenergetic translation (energy-surface variant).
    pub isoenergetic: bool,
    /// Post-step norm target overriding the standard
    /// eps gamma+^{3b} s+^2 mu+ ledger (used by the preprocessing stage,
    /// whose perturbation is not s^2-normalized).
    pub ledger_override: Option<f64>,
}

impl StepParams {
    /// Ledger target for the post-step perturbation:
    /// eps gamma+^{3b} s+^2 mu+, unless overridden.
    pub fn ledger_target(&self, eps: f64) -> f64 {
        self.ledger_override.unwrap_or(
            eps * self.gamma_next.powi(3 * self.b as i32)
                * self.s_next
                * self.s_next
                * self.mu_next,
        )
    }
}

/// Operational acceptance flags; the certificate exposes them under the
/// h1..h8 keys according to the role each assumption plays in the step.
#[derive(Clone, Copy, Debug, Default)]
pub struct OperationalChecks {
    /// Truncation tail fits the mu-budget (role of H1-H2).
    pub truncation_ok: bool,
    /// Translation floor C1/C2 holds (role of H3).
    pub floors_ok: bool,
    /// Per-shell solve residuals passed, validating the origin-frozen jet
    /// treatment (role of H4; the literal smallness bound is a scheduler
    /// diagnostic).
    pub solve_ok: bool,
    /// Lie flow converged and its displacement fits the domain gap (H5-H7).
    pub flow_ok: bool,
    /// Measured post-step norm meets the ledger target (role of H8).
    pub contraction_ok: bool,
}

impl OperationalChecks {
    pub fn all(&self) -> bool {
        self.truncation_ok && self.floors_ok && self.solve_ok && self.flow_ok && self.contraction_ok
    }

    pub fn as_map(&self) -> BTreeMap<String, bool> {
        let mut m = BTreeMap::new();
        m.insert("h1".into(), self.truncation_ok);
        m.insert("h2".into(), self.truncation_ok);
        m.insert("h3".into(), self.floors_ok);
        m.insert("h4".into(), self.solve_ok);
        m.insert("h5".into(), self.flow_ok);
        m.insert("h6".into(), self.flow_ok);
        m.insert("h7".into(), self.flow_ok);
        m.insert("h8".into(), self.contraction_ok);
        m
    }
}

/// Per-step guarantees: norms, drifts, exclusions, assumption maps.
#[derive(Clone, Debug)]
pub struct StepCertificate {
    pub nu: usize,
    pub accepted: bool,
    pub excluded_shells: Vec<Vec<i64>>,
    pub norm_before: f64,
    pub norm_after: f64,
    pub ledger_target: f64,
    pub drift_energy: f64,
    pub drift_omega: f64,
    pub drift_m: f64,
    pub translation_norm: f64,
    pub translation_bound: f64,
    pub lie_terms: usize,
    pub lie_tail: f64,
    pub operational: OperationalChecks,
    /// Literal (H1)-(H8) verdicts when the scheduler attached them.
    pub literal_h: Option<BTreeMap<String, bool>>,
    pub reject_reason: Option<String>,
}

impl StepCertificate {
    /// Assumption map: operational verdicts keyed h1..h8. All true on an
    /// accepted step.
    pub fn assumptions(&self) -> BTreeMap<String, bool> {
        self.operational.as_map()
    }
}

/// Outcome of one step: the transformed normal form when accepted.
pub struct StepOutcome {
    pub next: Option<NodeNormalForm>,
    pub cert: StepCertificate,
    pub generator: Option<Generator>,
    pub translation: Option<TranslationShift>,
}

/// Diagnostics of one Lie-series evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LieDiagnostics {
    pub terms: usize,
    /// Ledger bound on the dropped tail (geometric estimate from the last
    /// term and the contraction ratio).
    pub tail_bound: f64,
    pub converged: bool,
    /// Sup of the per-variable flow displacements measured on the target
    /// domain: (x-displacement, y-displacement, z-displacement).
    pub displacement: [f64; 3],
}

/// Transform `h_series` by the time-1 flow of `f`: the Lie series
/// `sum_j (1/j!) ad_f^j H` with `ad_f H = {H, f}`, iterated until a term's
/// weighted norm on `dom_next` falls below `tail_rel * budget`; the dropped
/// tail bound is returned in the diagnostics.
pub fn lie_transform(
    h_series: &TFSeries,
    f: &TFSeries,
    dom_next: &AnalyticDomain,
    budget: f64,
    tail_rel: f64,
    max_terms: usize,
) -> Result<(TFSeries, LieDiagnostics)> {
    let mut total = h_series.clone();
    let mut term = h_series.clone();
    let mut factorial = 1.0f64;
    let mut prev_norm = f64::INFINITY;
    let mut converged = false;
    let mut tail_bound = 0.0f64;
    let mut terms_used = 0usize;
    for j in 1..=max_terms {
        term = term.poisson_bracket(f)?;
        factorial *= j as f64;
        let contrib = term.scale(C64::new(1.0 / factorial, 0.0));
        let norm = contrib.weighted_norm(dom_next, 0);
        total = total.add(&contrib)?;
        terms_used = j;
        if norm < tail_rel * budget.max(f64::MIN_POSITIVE) {
            // geometric tail estimate from the observed contraction
            let ratio = if prev_norm.is_finite() && prev_norm > 0.0 {
                (norm / prev_norm).min(0.5)
            } else {
                0.5
            };
            tail_bound = norm * ratio / (1.0 - ratio);
            converged = true;
            break;
        }
        // divergence guard: terms must not grow
        if norm > prev_norm && j > 2 {
            tail_bound = norm;
            break;
        }
        prev_norm = norm;
    }
    let displacement = flow_displacement(f, dom_next);
    Ok((
        total,
        LieDiagnostics {
            terms: terms_used,
            tail_bound,
            converged,
            displacement,
        },
    ))
}

/// Majorant bounds for the flow displacement of the generator on a domain:
/// |dF/dy| bounds the angle motion, |dF/dx| the action motion, |dF/dz| the
/// normal motion.
pub fn flow_displacement(f: &TFSeries, dom: &AnalyticDomain) -> [f64; 3] {
    let dims = f.dims();
    let mut dx = 0.0;
    let mut dy = 0.0;
    let mut dz = 0.0;
    for a in 0..dims.n {
        dx += f.deriv_y(a).weighted_norm(dom, 0);
        dy += f.deriv_x(a).weighted_norm(dom, 0);
    }
    for c in 0..dims.z_dim() {
        dz += f.deriv_z(c).weighted_norm(dom, 0);
    }
    [dx, dy, dz]
}

fn reject(
    nu: usize,
    norm_before: f64,
    excluded: Vec<Vec<i64>>,
    ops: OperationalChecks,
    reason: String,
) -> StepOutcome {
    StepOutcome {
        next: None,
        cert: StepCertificate {
            nu,
            accepted: false,
            excluded_shells: excluded,
            norm_before,
            norm_after: f64::NAN,
            ledger_target: f64::NAN,
            drift_energy: 0.0,
            drift_omega: 0.0,
            drift_m: 0.0,
            translation_norm: 0.0,
            translation_bound: 0.0,
            lie_terms: 0,
            lie_tail: 0.0,
            operational: ops,
            literal_h: None,
            reject_reason: Some(reason),
        },
        generator: None,
        translation: None,
    }
}

/// Execute one KAM step on a node normal form.
pub fn perform_step(nf: &NodeNormalForm, params: &StepParams) -> Result<StepOutcome> {
    nf.validate()?;
    let dims = nf.dims;
    let dom = AnalyticDomain::simple(params.r, params.s, dims.n);
    let dom_next = AnalyticDomain::simple(params.r_next, params.s_next, dims.n);
    let norm_before = nf.perturbation_norm(&dom);
    let mut ops_flags = OperationalChecks::default();

    // 1. truncation: R keeps degree <= 2, |k| <= K_+
    let (r_series, tail) = nf.p.truncate(params.k_plus);
    let tail_norm = tail.scale(C64::new(nf.eps, 0.0)).weighted_norm(&dom_next, 0);
    // tail must fit inside the mu-budget of the remainder estimate
    ops_flags.truncation_ok = tail_norm <= params.mu * norm_before.max(f64::MIN_POSITIVE)
        || tail_norm <= 0.1 * params.ledger_target(nf.eps);

    let k_eff = r_series
        .fourier_modes()
        .iter()
        .map(|k| k.iter().map(|v| v.abs()).sum::<i64>())
        .max()
        .unwrap_or(0);

    // 2. homological solve on the active shells; success certifies the
    // per-shell residual checks (role of H4 for the origin-frozen jet)
    let freq = nf.freq_data();
    let lambda0 = vec![0.0];
    let generator = match assemble_generator(
        &freq,
        &lambda0,
        &r_series,
        nf.eps,
        params.gamma,
        params.tau,
    ) {
        Ok(g) => g,
        Err((EngineError::PartialAssembly { excluded }, _)) => {
            return Ok(reject(
                params.nu,
                norm_before,
                excluded,
                ops_flags,
                "divisor floor failed on active shells".into(),
            ));
        }
        Err((e, _)) => return Err(e),
    };
    ops_flags.solve_ok = true;

    // 3. Lie transform of the full Hamiltonian
    let dc_work = nf.p.degree_cap().max(nf.h.degree_cap()).max(4) + 6;
    let fc_work = (nf.p.fourier_cap().max(4) + 6 * k_eff.max(1)).max(8);
    let widen = |s: &TFSeries| -> TFSeries {
        let mut w = TFSeries::new(dims, dc_work, fc_work);
        for (i, c) in s.terms() {
            w.add_param_term(i.clone(), c.clone()).expect("widened caps");
        }
        w
    };
    let h_full = nf
        .n_series(dc_work, fc_work)
        .add(&widen(&nf.p).scale(C64::new(nf.eps, 0.0)))?;
    let budget = params.ledger_target(nf.eps);
    let (transformed, lie_diag) = lie_transform(
        &h_full,
        &widen(&generator.series),
        &dom_next,
        budget,
        params.lie_tail_rel,
        24,
    )?;
    // the Lie series' own contraction is the operative well-definedness
    // criterion for the composed series; the angle displacement must also
    // respect the analyticity-strip gap. Action/normal displacements are
    // recorded diagnostics: the series is re-expanded about the shifted
    // torus, so they do not gate.
    let gap_r = (params.r - params.r_next).max(f64::MIN_POSITIVE);
    ops_flags.flow_ok = lie_diag.converged && lie_diag.displacement[0] <= gap_r / 8.0;
    if !ops_flags.flow_ok {
        return Ok(reject(
            params.nu,
            norm_before,
            vec![],
            ops_flags,
            format!(
                "flow check failed: converged={} angle displacement {:.3e} vs gap/8 {:.3e}",
                lie_diag.converged,
                lie_diag.displacement[0],
                gap_r / 8.0
            ),
        ));
    }

    // 5. drift pieces from eps [R]
    let avg = extract_shell(&r_series, &vec![0i64; dims.n]);
    let p000 = avg.c0.re;
    let p010 = avg.cy.map(|c| c.re);
    let p001 = avg.cz.map(|c| c.re);
    let p2 = avg.hessian.map(|c| c.re);

    // updated integrable data before translation
    let m_tilde = &nf.m + (&p2 + p2.transpose()) * nf.eps; // 2 eps P2 (P2 symmetric)
    let freq_tilde = NodeNormalForm {
        dims,
        scales: nf.scales.clone(),
        energy: 0.0,
        omega: nf.omega.clone(),
        m: m_tilde.clone(),
        h: nf.h.clone(),
        p: TFSeries::new(dims, 2, 0),
        eps: nf.eps,
    }
    .freq_data();

    // 6. translation removing the drift and the z-linear resonant term
    let translation = if params.isoenergetic {
        solve_isoenergetic_translation(&freq_tilde, &lambda0, p000, &p010, &p001, nf.eps)
    } else {
        solve_translation(&freq_tilde, &lambda0, &p010, &p001, nf.eps)
    };
    let translation = match translation {
        Ok(t) => t,
        Err(EngineError::FloorViolation { which, lambda_min, floor }) => {
            return Ok(reject(
                params.nu,
                norm_before,
                vec![],
                ops_flags,
                format!("translation floor {which} failed: {lambda_min:.3e} < {floor:.3e}"),
            ));
        }
        Err(e) => return Err(e),
    };
    // |u0| <= 2 |eps p-linear| / min mu from the (C1) floor; the linear
    // coefficients are bounded by norm_before / s by the majorant weights.
    // For s^2-normalized perturbations this reduces to the
    // 2 gamma^{3b} s mu ledger shape.
    let min_mu = nf.scales.min_mu();
    let translation_bound = if min_mu.is_finite() && min_mu > 0.0 {
        2.0 * norm_before / (params.s * min_mu)
    } else {
        f64::INFINITY
    };
    ops_flags.floors_ok = true;
    let translation_ok = translation.norm() <= translation_bound.max(1e-300);
    if !translation_ok {
        return Ok(reject(
            params.nu,
            norm_before,
            vec![],
            ops_flags,
            format!(
                "translation shift {:.3e} exceeds the ledger bound {:.3e}",
                translation.norm(),
                translation_bound
            ),
        ));
    }

    // 7. split the transformed Hamiltonian into the absorbed integrable
    // part N~ = N + eps [R] (with the translation solving against M~, so
    // the eps P2-cross term is absorbed too) and the genuine remainder
    // P~ = T - N~; then shift each piece. Second-order k = 0 mass in the
    // remainder stays in the perturbation for the next step's absorption.
    let widen_full = |s: &TFSeries| -> TFSeries {
        let mut w = TFSeries::new(dims, dc_work, fc_work);
        for (i, c) in s.terms() {
            w.add_param_term(i.clone(), c.clone()).expect("widened caps");
        }
        w
    };
    let n_tilde = {
        let avg_series = widen_full(&r_series.average()).scale(C64::new(nf.eps, 0.0));
        nf.n_series(dc_work, fc_work).add(&avg_series)?
    };
    let p_bar = transformed.sub(&n_tilde)?;
    let y0: Vec<C64> = translation.y0.iter().map(|&v| C64::new(v, 0.0)).collect();
    let z0: Vec<C64> = translation.z0.iter().map(|&v| C64::new(v, 0.0)).collect();
    let shifted_n = n_tilde.shift_yz(&y0, &z0)?;
    let shifted_p = p_bar.shift_yz(&y0, &z0)?;

    let k0 = vec![0i64; dims.n];
    let nf_parts = extract_shell(&shifted_n, &k0);
    let e_plus = nf_parts.c0.re;
    let omega_plus = nf_parts.cy.map(|c| c.re);
    let m_plus_h = nf_parts.hessian.map(|c| c.re);
    let m_plus = (&m_plus_h + m_plus_h.transpose()) * 1.0; // 2 * symmetric Hessian form
    // reality of the absorbed integrable data
    let imag_defect = nf_parts
        .c0
        .im
        .abs()
        .max(nf_parts.cy.iter().map(|c| c.im.abs()).fold(0.0, f64::max))
        .max(nf_parts.hessian.iter().map(|c| c.im.abs()).fold(0.0, f64::max));
    let scale0 = shifted_n.coeff_scale().max(1.0);
    if imag_defect > 1e-10 * scale0 {
        return Err(EngineError::Numeric(format!(
            "imaginary residue {imag_defect:.3e} in the reassembled normal form"
        )));
    }
    // frequency preservation: the y-linear part of the absorbed integrable
    // data equals omega after the translation, and its z-linear part is
    // gone (both to the translation solve tolerance)
    let omega_drift = (&omega_plus - &nf.omega).norm();
    let z_linear = nf_parts.cz.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let omega_scale = nf.omega.norm().max(1.0);
    if !params.isoenergetic && (omega_drift > 1e-10 * omega_scale || z_linear > 1e-10 * omega_scale)
    {
        return Ok(reject(
            params.nu,
            norm_before,
            vec![],
            ops_flags,
            format!(
                "frequency not preserved: drift {omega_drift:.3e}, z-linear {z_linear:.3e}"
            ),
        ));
    }

    // new cubic jet: the k = 0, degree >= 3 part of the absorbed piece
    let mut h_plus = TFSeries::new(dims, dc_work, fc_work);
    let mut p_plus_abs = TFSeries::new(dims, dc_work, fc_work);
    for (idx, c) in shifted_n.terms() {
        if idx.degree() >= 3 {
            h_plus
                .add_term(idx.clone(), C64::new(c.value.re, 0.0))
                .expect("caps");
            if c.value.im != 0.0 {
                p_plus_abs
                    .add_term(idx.clone(), C64::new(0.0, c.value.im))
                    .expect("caps");
            }
        }
    }
    for (idx, c) in shifted_p.terms() {
        p_plus_abs
            .add_param_term(idx.clone(), c.clone())
            .expect("caps");
    }
    // account the Lie tail into the remainder ledger via a constant term
    if lie_diag.tail_bound > 0.0 {
        p_plus_abs
            .add_term(MultiIndex::zero(dims), C64::new(lie_diag.tail_bound, 0.0))
            .expect("constant");
    }
    p_plus_abs.prune();
    let p_plus = p_plus_abs.scale(C64::new(1.0 / nf.eps, 0.0));

    let next = NodeNormalForm {
        dims,
        scales: nf.scales.clone(),
        energy: e_plus,
        omega: if params.isoenergetic {
            omega_plus.clone()
        } else {
            nf.omega.clone()
        },
        m: (&m_plus + m_plus.transpose()) * 0.5,
        h: h_plus,
        p: p_plus,
        eps: nf.eps,
    };
    let norm_after = next.perturbation_norm(&dom_next);
    let ledger_target = params.ledger_target(nf.eps);
    ops_flags.contraction_ok = norm_after <= ledger_target.max(1e-300);

    let drift_m = (&next.m - &nf.m).iter().map(|v| v.abs()).fold(0.0, f64::max);
    let cert = StepCertificate {
        nu: params.nu,
        accepted: ops_flags.all(),
        excluded_shells: vec![],
        norm_before,
        norm_after,
        ledger_target,
        drift_energy: (e_plus - nf.energy).abs(),
        drift_omega: omega_drift,
        drift_m,
        translation_norm: translation.norm(),
        translation_bound,
        lie_terms: lie_diag.terms,
        lie_tail: lie_diag.tail_bound,
        operational: ops_flags,
        literal_h: None,
        reject_reason: if ops_flags.all() {
            None
        } else {
            Some("operational acceptance check failed".into())
        },
    };
    Ok(StepOutcome {
        next: if cert.accepted { Some(next) } else { None },
        cert,
        generator: Some(generator),
        translation: Some(translation),
    })
}

/// Number of preprocessing steps needed to push the perturbation to ninth
/// order: `floor(log 9 / log(1 + (1 - sigma)/a)) + 1`.
pub fn preprocessing_step_count(sigma: f64, a: f64) -> usize {
    ((9.0f64.ln() / (1.0 + (1.0 - sigma) / a).ln()).floor() as usize) + 1
}

/// Outcome of the high-order preprocessing stage.
pub struct PreprocessOutcome {
    pub normal_form: NodeNormalForm,
    pub steps: Vec<StepCertificate>,
    /// Claimed ledger exponents after each step: |P_m| <= eps^{ledger_m}.
    pub ledger_exponents: Vec<f64>,
    /// Measured weighted norms of the perturbation after each step.
    pub measured_norms: Vec<f64>,
}

/// Run the preprocessing stage: `step_count` KAM steps at the pre-iteration
/// scalings (mu^a = eps, s = eps^4), carrying the claimed ledger exponent
/// `1 + (1 + (1-sigma)/a) m` and asserting the measured norm stays below it.
///
/// The input normal form holds the original perturbation; its `p` series is
/// the full perturbation with `eps = eps_base^2` as prefactor.
pub fn preprocess_normal_form(
    nf0: &NodeNormalForm,
    eps_base: f64,
    a: f64,
    sigma: f64,
    r0: f64,
    gamma: f64,
    tau: f64,
    b: u32,
) -> Result<PreprocessOutcome> {
    let steps_needed = preprocessing_step_count(sigma, a);
    let mut nf = nf0.clone();
    let mut certs = Vec::new();
    let mut ledger_exponents = Vec::new();
    let mut measured = Vec::new();
    let mut mu = eps_base.powf(1.0 / a);
    let s0 = eps_base.powi(4);
    let mut s = s0;
    let mut r = r0;
    let gain = 1.0 + (1.0 - sigma) / a;
    for mstep in 0..steps_needed {
        let alpha = mu.powf(1.0 / 3.0);
        let r_next = r - r0 / 2f64.powi(mstep as i32 + 2);
        let s_next = alpha * s / 8.0;
        let params = StepParams {
            nu: mstep,
            r,
            s,
            gamma,
            eta: 0.25,
            mu,
            r_next,
            s_next,
            gamma_next: gamma,
            eta_next: 0.25,
            mu_next: mu.powf(1.0 + sigma),
            k_plus: nf.p.fourier_cap(),
            tau,
            b,
            lie_tail_rel: 1e-3,
            isoenergetic: false,
            ledger_override: Some(eps_base.powf(1.0 + gain * (mstep as f64 + 1.0))),
        };
        let outcome = perform_step(&nf, &params)?;
        let ledger_exp = 1.0 + gain * (mstep as f64 + 1.0);
        let ledger_bound = eps_base.powf(ledger_exp);
        let dom_next = AnalyticDomain::simple(r_next, s_next, nf.dims.n);
        match outcome.next {
            Some(next) => {
                let measured_norm = next.perturbation_norm(&dom_next);
                if measured_norm > ledger_bound {
                    return Err(EngineError::StepRejected {
                        step: mstep,
                        reason: format!(
                            "measured norm {measured_norm:.3e} exceeds the claimed ledger {ledger_bound:.3e}"
                        ),
                    });
                }
                measured.push(measured_norm);
                ledger_exponents.push(ledger_exp);
                certs.push(outcome.cert);
                nf = next;
            }
            None => {
                return Err(EngineError::StepRejected {
                    step: mstep,
                    reason: outcome
                        .cert
                        .reject_reason
                        .unwrap_or_else(|| "preprocessing step rejected".into()),
                });
            }
        }
        mu = mu.powf(1.0 + sigma);
        s = s_next;
        r = r_next;
    }
    Ok(PreprocessOutcome {
        normal_form: nf,
        steps: certs,
        ledger_exponents,
        measured_norms: measured,
    })
}
