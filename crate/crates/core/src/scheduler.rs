//! Iteration sequences, smallness-assumption checks, and the driver loop.
//!
//! The schedule generates the geometric shrink sequences and the
//! super-linear mu recursion in closed form, evaluates the literal
//! smallness inequalities (H1)-(H8) as diagnostics, and drives the KAM
//! iteration until the perturbation norm reaches its target or a step is
//! rejected.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::kamstep::{perform_step, NodeNormalForm, StepCertificate, StepParams};
use crate::tfseries::AnalyticDomain;

/// All iteration constants. `chi` is derived: (b+2) tau + 5 l0 + 10.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KamSchedule {
    pub r0: f64,
    pub s0: f64,
    pub gamma0: f64,
    pub eta0: f64,
    pub mu0: f64,
    /// Diophantine exponent; must exceed n (N + 1) + 1 (the strong form the
    /// measure proof ends with; the lemma statement's n(N+1) - 1 is weaker
    /// and not enforced).
    pub tau: f64,
    pub b: u32,
    pub l0: usize,
    /// Derivative-rank order of the nondegeneracy conditions.
    pub cap_n: usize,
    /// Contraction exponent, 1/12 unless overridden.
    pub sigma: f64,
    /// Free constant in (0,1) of the mu recursion (never pinned upstream).
    pub lambda0: f64,
    /// Intermediate-constant ceiling; measured by a warm-up run or 1.
    pub c0: f64,
    /// Exponent of the shell-cap growth K = (floor(log 1/mu) + 1)^kappa.
    pub kappa: f64,
    pub max_steps: usize,
    /// Relative convergence target: stop once norm <= target_rel * initial.
    pub target_rel: f64,
    /// Gate step acceptance on the literal (H1)-(H8) instead of the
    /// operational checks.
    pub strict_assumptions: bool,
    /// Isoenergetic translation mode.
    pub isoenergetic: bool,
}

impl Default for KamSchedule {
    fn default() -> Self {
        KamSchedule {
            r0: 1.0,
            s0: 5e-3,
            gamma0: 0.1,
            eta0: 0.25,
            mu0: 1e-4,
            tau: 2.5,
            b: 1,
            l0: 1,
            cap_n: 0,
            sigma: 1.0 / 12.0,
            lambda0: 0.5,
            // 64 c0 = 1 keeps the mu-recursion prefactor neutral; measured
            // warm-up constants may override it
            c0: 1.0 / 64.0,
            kappa: 2.5,
            max_steps: 12,
            target_rel: 1e-16,
            strict_assumptions: false,
            isoenergetic: false,
        }
    }
}

impl KamSchedule {
    /// Validate against the tangent dimension n.
    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [
            ("r0", self.r0),
            ("s0", self.s0),
            ("gamma0", self.gamma0),
            ("eta0", self.eta0),
            ("mu0", self.mu0),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(EngineError::Config(format!(
                    "schedule constant {name} = {v} must lie in (0, 1]"
                )));
            }
        }
        let tau_floor = (n * (self.cap_n + 1) + 1) as f64;
        if !(self.tau > tau_floor) {
            return Err(EngineError::Config(format!(
                "tau = {} must exceed n(N+1)+1 = {tau_floor}",
                self.tau
            )));
        }
        if !(self.lambda0 > 0.0 && self.lambda0 < 1.0) {
            return Err(EngineError::Config("lambda0 must lie in (0,1)".into()));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(EngineError::Config("sigma must lie in (0,1)".into()));
        }
        Ok(())
    }

    /// chi = (b + 2) tau + 5 l0 + 10.
    pub fn chi(&self) -> f64 {
        (self.b as f64 + 2.0) * self.tau + 5.0 * self.l0 as f64 + 10.0
    }

    fn geometric(&self, v0: f64, nu: usize) -> f64 {
        // v0 (1 - sum_{i=1}^{nu} 2^{-(i+1)}) -> v0 / 2
        let mut acc = 0.0;
        for i in 1..=nu {
            acc += 0.5f64.powi(i as i32 + 1);
        }
        v0 * (1.0 - acc)
    }

    /// mu_nu in closed form:
    /// (64 c0)^{((1+sigma)^nu - 1)/((1 - lambda0) sigma)} mu0^{(1+sigma)^nu}.
    pub fn mu_at(&self, nu: usize) -> f64 {
        let growth = (1.0 + self.sigma).powi(nu as i32);
        let c_exp = (growth - 1.0) / ((1.0 - self.lambda0) * self.sigma);
        (64.0 * self.c0).powf(c_exp) * self.mu0.powf(growth)
    }

    /// Shell cap used by the step at index nu: (floor(log 1/mu_nu) + 1)^kappa.
    pub fn k_plus_at(&self, nu: usize) -> i64 {
        let mu = self.mu_at(nu);
        let base = (1.0 / mu).ln().floor() + 1.0;
        base.powf(self.kappa).floor().max(1.0) as i64
    }

    /// s_nu by the recursion s_{nu} = alpha_{nu-1} s_{nu-1} / 8.
    pub fn s_at(&self, nu: usize) -> f64 {
        let mut s = self.s0;
        for j in 0..nu {
            s *= self.mu_at(j).powf(1.0 / 3.0) / 8.0;
        }
        s
    }

    /// All sequence values at step nu.
    pub fn sequence_at(&self, nu: usize) -> SequencePoint {
        SequencePoint {
            nu,
            r: self.geometric(self.r0, nu),
            gamma: self.geometric(self.gamma0, nu),
            eta: self.geometric(self.eta0, nu),
            mu: self.mu_at(nu),
            k_plus: self.k_plus_at(nu),
            s: self.s_at(nu),
            alpha: self.mu_at(nu).powf(1.0 / 3.0),
        }
    }

    /// Step parameters for `perform_step` at index nu.
    pub fn step_params(&self, nu: usize) -> StepParams {
        let cur = self.sequence_at(nu);
        let next = self.sequence_at(nu + 1);
        StepParams {
            nu,
            r: cur.r,
            s: cur.s,
            gamma: cur.gamma,
            eta: cur.eta,
            mu: cur.mu,
            r_next: next.r,
            s_next: next.s,
            gamma_next: next.gamma,
            eta_next: next.eta,
            mu_next: next.mu,
            k_plus: cur.k_plus,
            tau: self.tau,
            b: self.b,
            lie_tail_rel: 1e-3,
            isoenergetic: self.isoenergetic,
            ledger_override: None,
        }
    }

    /// Literal evaluation of the smallness assumptions (H1)-(H8) at step nu
    /// for tangent dimension n. (H3) is the translation floor on M and is
    /// checked by the step itself; it is reported as `None` here.
    pub fn check_assumptions(&self, nu: usize, n: usize) -> AssumptionVerdicts {
        let cur = self.sequence_at(nu);
        let next = self.sequence_at(nu + 1);
        let gap = cur.r - next.r;
        let k = cur.k_plus;
        let gamma_sum = gamma_weight_sum(n, self.chi(), k, gap / 8.0);
        let h1 = k as f64 >= 8.0 * (n + self.l0) as f64 / gap;
        let h2 = truncation_tail_integral((n + self.l0) as u32, gap / 8.0, k as f64) <= cur.mu;
        let h4 = cur.s.sqrt() * (k as f64).powf(self.tau + 1.0) <= 0.01 * cur.gamma;
        let h5 = self.c0 * cur.mu * gamma_sum < gap / 8.0;
        let h6 = self.c0 * cur.mu * gamma_sum < cur.alpha / 8.0;
        let h7 = cur.mu < cur.alpha / 8.0;
        let h8 = cur.gamma.powi(3 * self.b as i32)
            * cur.mu.powf(self.sigma)
            * (gamma_sum + cur.gamma.powi(self.b as i32))
            <= next.gamma.powi(3 * self.b as i32);
        AssumptionVerdicts {
            h1,
            h2,
            h3: None,
            h4,
            h5,
            h6,
            h7,
            h8,
            gamma_sum,
        }
    }
}

/// Sequence values at one step index.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SequencePoint {
    pub nu: usize,
    pub r: f64,
    pub gamma: f64,
    pub eta: f64,
    pub mu: f64,
    pub k_plus: i64,
    pub s: f64,
    pub alpha: f64,
}

/// Literal (H1)-(H8) verdicts; (H3) is step-supplied.
#[derive(Clone, Copy, Debug)]
pub struct AssumptionVerdicts {
    pub h1: bool,
    pub h2: bool,
    pub h3: Option<bool>,
    pub h4: bool,
    pub h5: bool,
    pub h6: bool,
    pub h7: bool,
    pub h8: bool,
    /// The weighted divisor sum Gamma(r - r_+) used by H5/H6/H8.
    pub gamma_sum: f64,
}

impl AssumptionVerdicts {
    pub fn as_map(&self) -> BTreeMap<String, bool> {
        let mut m = BTreeMap::new();
        m.insert("h1".into(), self.h1);
        m.insert("h2".into(), self.h2);
        m.insert("h3".into(), self.h3.unwrap_or(true));
        m.insert("h4".into(), self.h4);
        m.insert("h5".into(), self.h5);
        m.insert("h6".into(), self.h6);
        m.insert("h7".into(), self.h7);
        m.insert("h8".into(), self.h8);
        m
    }
}

/// Number of integer points in Z^n with |k|_1 = j (j >= 1):
/// sum_i 2^i C(n,i) C(j-1, i-1).
pub fn l1_shell_count(n: usize, j: i64) -> f64 {
    if j < 1 {
        return if j == 0 { 1.0 } else { 0.0 };
    }
    let mut total = 0.0f64;
    for i in 1..=n.min(j as usize) {
        total += 2f64.powi(i as i32) * binom(n as i64, i as i64) * binom(j - 1, i as i64 - 1);
    }
    return total;

    fn binom(n: i64, k: i64) -> f64 {
        if k < 0 || k > n {
            return 0.0;
        }
        let mut acc = 1.0f64;
        for i in 0..k {
            acc = acc * (n - i) as f64 / (i + 1) as f64;
        }
        acc
    }
}

/// Exact finite sum Gamma(gap) = sum_{0 < |k|_1 <= K} |k|^chi e^{-|k| c}
/// over the integer lattice, grouped by l1 shells. Trailing shells whose
/// terms underflow to zero contribute exactly zero, so huge caps stay
/// computable.
pub fn gamma_weight_sum(n: usize, chi: f64, k_cap: i64, c: f64) -> f64 {
    let mut acc = 0.0f64;
    for j in 1..=k_cap {
        let t = (j as f64).powf(chi) * (-(j as f64) * c).exp();
        let term = l1_shell_count(n, j) * t;
        acc += term;
        // beyond the peak, once terms underflow the remaining tail is zero
        if term == 0.0 && (j as f64) * c > chi * (j as f64).ln() + 700.0 {
            break;
        }
    }
    acc
}

/// Upper incomplete gamma for integer order: Gamma(m, x) =
/// (m-1)! e^{-x} sum_{j<m} x^j / j!.
pub fn upper_gamma_int(m: u32, x: f64) -> f64 {
    let mut fact = 1.0f64;
    for j in 1..m as u64 {
        fact *= j as f64;
    }
    let mut sum = 0.0f64;
    let mut xj = 1.0f64;
    let mut jfact = 1.0f64;
    for j in 0..m {
        if j > 0 {
            xj *= x;
            jfact *= j as f64;
        }
        sum += xj / jfact;
    }
    fact * (-x).exp() * sum
}

/// The truncation-tail integral `int_K^inf lambda^p e^{-c lambda} d lambda`
/// via the incomplete-gamma identity.
pub fn truncation_tail_integral(p: u32, c: f64, k: f64) -> f64 {
    upper_gamma_int(p + 1, c * k) / c.powi(p as i32 + 1)
}

/// Outcome of a driver run on one parameter node.
pub struct RunOutcome {
    pub final_form: NodeNormalForm,
    pub history: Vec<StepCertificate>,
    pub norm_history: Vec<f64>,
    pub converged: bool,
    pub rejected_at: Option<usize>,
}

/// Drive the iteration on one node until the perturbation norm reaches
/// `target_rel * initial`, a step is rejected, or `max_steps` is hit.
pub fn run_node(nf0: &NodeNormalForm, sched: &KamSchedule) -> Result<RunOutcome> {
    sched.validate(nf0.dims.n)?;
    nf0.validate()?;
    let mut nf = nf0.clone();
    let mut history = Vec::new();
    let mut norm_history = Vec::new();
    let dom0 = AnalyticDomain::simple(sched.r0, sched.s0, nf0.dims.n);
    let initial = nf.perturbation_norm(&dom0);
    norm_history.push(initial);
    let target = sched.target_rel * initial;
    if initial <= 0.0 {
        return Ok(RunOutcome {
            final_form: nf,
            history,
            norm_history,
            converged: true,
            rejected_at: None,
        });
    }
    for nu in 0..sched.max_steps {
        let params = sched.step_params(nu);
        let mut outcome = perform_step(&nf, &params)?;
        let mut literal = sched.check_assumptions(nu, nf.dims.n).as_map();
        literal.insert("h3".into(), outcome.cert.operational.floors_ok);
        outcome.cert.literal_h = Some(literal.clone());
        let accepted = if sched.strict_assumptions {
            outcome.next.is_some() && literal.values().all(|&v| v)
        } else {
            outcome.next.is_some()
        };
        if !accepted {
            let nu_rejected = outcome.cert.nu;
            history.push(outcome.cert);
            return Ok(RunOutcome {
                final_form: nf,
                history,
                norm_history,
                converged: false,
                rejected_at: Some(nu_rejected),
            });
        }
        let next = outcome.next.take().expect("accepted step has a successor");
        norm_history.push(outcome.cert.norm_after);
        history.push(outcome.cert);
        nf = next;
        if norm_history.last().copied().unwrap_or(f64::INFINITY) <= target {
            return Ok(RunOutcome {
                final_form: nf,
                history,
                norm_history,
                converged: true,
                rejected_at: None,
            });
        }
    }
    Ok(RunOutcome {
        final_form: nf,
        history,
        norm_history,
        converged: false,
        rejected_at: None,
    })
}

/// Per-node outcome of a grid run.
pub struct GridNodeOutcome {
    pub node: Vec<f64>,
    pub converged: bool,
    /// First excluded shell when the node fell out, with the step index.
    pub excluded: Option<(usize, Vec<Vec<i64>>)>,
    pub norm_history: Vec<f64>,
}

/// Outcome of driving the iteration independently on every grid node, with
/// the monotone exclusion ledger: a node rejected at step nu stays out.
pub struct GridRunOutcome {
    pub nodes: Vec<GridNodeOutcome>,
    pub surviving: Vec<usize>,
}

/// Run the iteration on each parameter node of a grid; `form_at` builds
/// the node normal form. Exclusion is per-node and final (the nested
/// parameter sets shrink monotonically).
pub fn run_grid(
    form_at: impl Fn(&[f64]) -> NodeNormalForm,
    grid_nodes: &[Vec<f64>],
    sched: &KamSchedule,
) -> Result<GridRunOutcome> {
    let mut nodes = Vec::with_capacity(grid_nodes.len());
    let mut surviving = Vec::new();
    for (i, node) in grid_nodes.iter().enumerate() {
        let nf = form_at(node);
        let out = run_node(&nf, sched)?;
        let excluded = out.rejected_at.map(|nu| {
            let shells = out
                .history
                .last()
                .map(|c| c.excluded_shells.clone())
                .unwrap_or_default();
            (nu, shells)
        });
        if excluded.is_none() {
            surviving.push(i);
        }
        nodes.push(GridNodeOutcome {
            node: node.clone(),
            converged: out.converged,
            excluded,
            norm_history: out.norm_history,
        });
    }
    Ok(GridRunOutcome { nodes, surviving })
}
