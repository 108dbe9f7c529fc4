//! Batch configuration, bundled example presets, run orchestration and
//! artifact persistence.
//!
//! Configs are TOML (JSON accepted) with a strict schema: unknown keys are
//! rejected. All randomness flows from the single `seed` recorded in the
//! manifest, and float output uses a fixed 17-significant-digit encoding so
//! identical configs produce byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::kamstep::{preprocess_normal_form, NodeNormalForm};
use crate::mslinalg::{complex_matrix_eigenvalues, j_matrix, to_complex, FrequencyData, ParamMat, ParamVec, ScaleSet};
use crate::nonres::{
    build_nonresonant_set, check_condition, estimate_excluded_measure, ConditionId,
    ConditionReport, LambdaGrid,
};
use crate::resonance::{
    complete_unimodular, detect_resonance, reduce_to_normal_form, verify_s_conditions, ActionFn,
    ManifoldChart, ReduceOptions, ResonantSystem, DEFAULT_DET_FLOOR,
};
use crate::scheduler::{run_node, KamSchedule};
use crate::tfseries::{Dims, MultiIndex, TFSeries, C64};

/// Run modes; the CLI subcommand selects one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Normalize,
    KamRun,
    Measure,
    ReduceResonance,
    CheckConditions,
}

/// Schedule overrides: each field optional, applied over the defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub r0: Option<f64>,
    pub s0: Option<f64>,
    pub gamma0: Option<f64>,
    pub eta0: Option<f64>,
    pub mu0: Option<f64>,
    pub tau: Option<f64>,
    pub b: Option<u32>,
    pub l0: Option<usize>,
    pub cap_n: Option<usize>,
    pub sigma: Option<f64>,
    pub lambda0: Option<f64>,
    pub c0: Option<f64>,
    pub kappa: Option<f64>,
    pub max_steps: Option<usize>,
    pub target_rel: Option<f64>,
    pub strict_assumptions: Option<bool>,
    pub isoenergetic: Option<bool>,
}

impl ScheduleOverrides {
    pub fn apply(&self, base: KamSchedule) -> KamSchedule {
        KamSchedule {
            r0: self.r0.unwrap_or(base.r0),
            s0: self.s0.unwrap_or(base.s0),
            gamma0: self.gamma0.unwrap_or(base.gamma0),
            eta0: self.eta0.unwrap_or(base.eta0),
            mu0: self.mu0.unwrap_or(base.mu0),
            tau: self.tau.unwrap_or(base.tau),
            b: self.b.unwrap_or(base.b),
            l0: self.l0.unwrap_or(base.l0),
            cap_n: self.cap_n.unwrap_or(base.cap_n),
            sigma: self.sigma.unwrap_or(base.sigma),
            lambda0: self.lambda0.unwrap_or(base.lambda0),
            c0: self.c0.unwrap_or(base.c0),
            kappa: self.kappa.unwrap_or(base.kappa),
            max_steps: self.max_steps.unwrap_or(base.max_steps),
            target_rel: self.target_rel.unwrap_or(base.target_rel),
            strict_assumptions: self.strict_assumptions.unwrap_or(base.strict_assumptions),
            isoenergetic: self.isoenergetic.unwrap_or(base.isoenergetic),
        }
    }
}

/// Parameter grid specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub per_dim: Vec<usize>,
    #[serde(default)]
    pub monte_carlo: bool,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default = "default_shell_cap")]
    pub shell_cap: i64,
}

fn default_gammas() -> Vec<f64> {
    vec![0.1, 0.05, 0.025, 0.0125]
}
fn default_shell_cap() -> i64 {
    20
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: vec![1.0, 1.0],
            hi: vec![2.0, 2.0],
            per_dim: vec![100, 100],
            monte_carlo: false,
            gammas: default_gammas(),
            shell_cap: default_shell_cap(),
        }
    }
}

/// Inline Hamiltonian: constant frequency/normal matrix plus a term list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineHamiltonian {
    pub n: usize,
    pub m: usize,
    pub eps: f64,
    pub eps_scales: Vec<f64>,
    pub mu_scales: Vec<f64>,
    pub omega: Vec<f64>,
    /// (n+2m)^2 symmetric matrix, row-major rows.
    pub m_matrix: Vec<Vec<f64>>,
    /// Terms [k, iy, jz, re, im].
    pub p_terms: Vec<(Vec<i64>, Vec<u32>, Vec<u32>, f64, f64)>,
    #[serde(default = "default_degree_cap")]
    pub degree_cap: u32,
    #[serde(default = "default_fourier_cap")]
    pub fourier_cap: i64,
}

fn default_degree_cap() -> u32 {
    4
}
fn default_fourier_cap() -> i64 {
    4
}

/// Inline resonant system: quadratic-plus-linear integrable parts and the
/// perturbation modes at the working action point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineResonant {
    pub d: usize,
    pub eps: f64,
    /// (scale, quadratic matrix rows, linear part).
    pub parts: Vec<(f64, Vec<Vec<f64>>, Vec<f64>)>,
    /// Fourier modes (k, re, im).
    pub p_modes: Vec<(Vec<i64>, f64, f64)>,
    pub y0: Vec<f64>,
}

/// Preprocessing stage parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    #[serde(default = "default_eps_base")]
    pub eps_base: f64,
    #[serde(default = "default_a")]
    pub a: f64,
}

fn default_eps_base() -> f64 {
    1e-2
}
fn default_a() -> f64 {
    2.0
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            eps_base: default_eps_base(),
            a: default_a(),
        }
    }
}

/// The full run configuration (strict schema).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub hamiltonian: Option<InlineHamiltonian>,
    #[serde(default)]
    pub resonant: Option<InlineResonant>,
    #[serde(default)]
    pub preprocess: Option<PreprocessSpec>,
}

fn default_workers() -> usize {
    1
}

/// Load a config file; TOML primary, JSON accepted. Unknown keys are
/// rejected with the offending name.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false)
        || text.trim_start().starts_with('{');
    let cfg: RunConfig = if is_json {
        serde_json::from_str(&text).map_err(|e| EngineError::Config(format!("{e}")))?
    } else {
        toml::from_str(&text).map_err(|e| EngineError::Config(format!("{e}")))?
    };
    validate_config(&cfg)?;
    Ok(cfg)
}

fn validate_config(cfg: &RunConfig) -> Result<()> {
    if let Some(p) = &cfg.preset {
        if !matches!(p.as_str(), "example-6.1" | "example-6.2" | "example-6.3") {
            return Err(EngineError::Config(format!("unknown preset '{p}'")));
        }
    }
    Ok(())
}

/// Emit the resolved config as TOML (the round-trip counterpart of
/// `load_config`).
pub fn emit_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| EngineError::Config(format!("{e}")))
}

/// 17-significant-digit float encoding used in all CSV artifacts.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------

/// Coupled resonant harmonic oscillators brought to the action-angle form:
/// tangent dim 1 with frequency eps*lambda, normal matrix
/// diag(w_1^2, .., w_1^2, ..) on the 2 n1 normal directions. Returns the
/// generic (lambda-dependent) data and the divisor-collision variant
/// (constant frequency).
pub fn example_6_1(w: &[f64], eps: f64) -> Result<(FrequencyData, FrequencyData)> {
    let n1 = w.len();
    let dims = Dims::new(1, n1);
    let zdim = 2 * n1;
    let mut m22 = DMatrix::zeros(zdim, zdim);
    for (i, &wi) in w.iter().enumerate() {
        m22[(i, i)] = wi * wi;
        m22[(n1 + i, n1 + i)] = wi * wi;
    }
    let d = dims.yz_dim();
    let mut m_full = DMatrix::zeros(d, d);
    for r in 0..zdim {
        for c in 0..zdim {
            m_full[(1 + r, 1 + c)] = m22[(r, c)];
        }
    }
    let scales = ScaleSet::with_ceiling(eps * eps, vec![eps], vec![1.0], 1.0)?;
    let generic = FrequencyData::new(
        dims,
        scales.clone(),
        vec![(eps, ParamVec::identity(1))],
        vec![(1.0, ParamMat::constant(m_full.clone()))],
        TFSeries::new(dims, 4, 4),
    )?;
    let collision = FrequencyData::new(
        dims,
        scales,
        vec![(
            eps,
            ParamVec::constant(DVector::from_column_slice(&[1.0])),
        )],
        vec![(1.0, ParamMat::constant(m_full))],
        TFSeries::new(dims, 4, 4),
    )?;
    Ok((generic, collision))
}

/// Properly degenerate two-degree system: H0(y0) resonant at y0 = 1,
/// eps H1(y1) nonresonant, perturbation with one slow and one fast mode.
pub fn example_6_2(eps: f64) -> ResonantSystem {
    let h0 = ActionFn {
        f: Rc::new(|y: &[f64]| 0.5 * (y[0] - 1.0) * (y[0] - 1.0)),
        grad: Rc::new(|y: &[f64]| DVector::from_column_slice(&[y[0] - 1.0, 0.0])),
        hess: Rc::new(|_| {
            let mut h = DMatrix::zeros(2, 2);
            h[(0, 0)] = 1.0;
            h
        }),
    };
    let h1 = ActionFn {
        f: Rc::new(|y: &[f64]| 0.5 * y[1] * y[1]),
        grad: Rc::new(|y: &[f64]| DVector::from_column_slice(&[0.0, y[1]])),
        hess: Rc::new(|_| {
            let mut h = DMatrix::zeros(2, 2);
            h[(1, 1)] = 1.0;
            h
        }),
    };
    ResonantSystem {
        d: 2,
        eps,
        parts: vec![(1.0, h0), (eps, h1)],
        p_modes: vec![
            // slow mode: the averaged potential cos(x1)
            (vec![1, 0], C64::new(0.5, 0.0)),
            (vec![-1, 0], C64::new(0.5, 0.0)),
            // fast mode handled by the generating function
            (vec![0, 1], C64::new(0.25, 0.0)),
            (vec![0, -1], C64::new(0.25, 0.0)),
        ],
    }
}

/// Artificial multi-scale system: omega = eps^2 lambda on a box, normal
/// block [[eps^3 a, w^2], [w^2, eps^3 b]] with w^2 = |lambda|^2, tangent
/// block eps w^2 I_2.
pub fn example_6_3(eps: f64, a: f64, b: f64) -> Result<FrequencyData> {
    let dims = Dims::new(2, 1);
    let scales = ScaleSet::with_ceiling(
        eps.powi(4),
        vec![eps * eps],
        vec![eps, eps.powi(3), 1.0],
        1.0,
    )?;
    // part at scale eps: diag(w^2, w^2, 0, 0)
    let p_eps = ParamMat::from_fn(4, 4, |l: &[f64]| {
        let w2 = l[0] * l[0] + l[1] * l[1];
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 0)] = w2;
        m[(1, 1)] = w2;
        m
    })
    .with_deriv(|l: &[f64], alpha: &[u32]| {
        let total: u32 = alpha.iter().sum();
        let mut m = DMatrix::zeros(4, 4);
        let v = match (total, alpha[0], alpha[1]) {
            (0, _, _) => l[0] * l[0] + l[1] * l[1],
            (1, 1, 0) => 2.0 * l[0],
            (1, 0, 1) => 2.0 * l[1],
            (2, 2, 0) | (2, 0, 2) => 2.0,
            _ => 0.0,
        };
        m[(0, 0)] = v;
        m[(1, 1)] = v;
        m
    });
    // part at scale eps^3: diag(0, 0, a, b)
    let (aa, bb) = (a, b);
    let p_eps3 = ParamMat::constant({
        let mut m = DMatrix::zeros(4, 4);
        m[(2, 2)] = aa;
        m[(3, 3)] = bb;
        m
    });
    // order-one part: antidiagonal w^2 coupling in the normal block
    let p_one = ParamMat::from_fn(4, 4, |l: &[f64]| {
        let w2 = l[0] * l[0] + l[1] * l[1];
        let mut m = DMatrix::zeros(4, 4);
        m[(2, 3)] = w2;
        m[(3, 2)] = w2;
        m
    })
    .with_deriv(|l: &[f64], alpha: &[u32]| {
        let total: u32 = alpha.iter().sum();
        let mut m = DMatrix::zeros(4, 4);
        let v = match (total, alpha[0], alpha[1]) {
            (0, _, _) => l[0] * l[0] + l[1] * l[1],
            (1, 1, 0) => 2.0 * l[0],
            (1, 0, 1) => 2.0 * l[1],
            (2, 2, 0) | (2, 0, 2) => 2.0,
            _ => 0.0,
        };
        m[(2, 3)] = v;
        m[(3, 2)] = v;
        m
    });
    FrequencyData::new(
        dims,
        scales,
        vec![(eps * eps, ParamVec::identity(2))],
        vec![(eps, p_eps), (eps.powi(3), p_eps3), (1.0, p_one)],
        TFSeries::new(dims, 4, 4),
    )
}

/// The (1,1) benchmark normal form: constant frequency, mu1-scaled
/// identity normal matrix, cosine perturbation at the ledger scale.
pub fn model_normal_form(sched: &KamSchedule, mu0: f64) -> NodeNormalForm {
    let dims = Dims::new(1, 1);
    let p_amp = sched.gamma0.powi(3 * sched.b as i32) * sched.s0 * sched.s0 * mu0;
    let mut p = TFSeries::new(dims, 4, 4);
    let mut idx = MultiIndex::zero(dims);
    idx.k = vec![1];
    p.add_term(idx.clone(), C64::new(0.5 * p_amp, 0.0)).unwrap();
    p.add_term(idx.negated_k(), C64::new(0.5 * p_amp, 0.0))
        .unwrap();
    NodeNormalForm {
        dims,
        scales: ScaleSet::new(1e-8, vec![0.1], vec![0.01]).unwrap(),
        energy: 0.0,
        omega: DVector::from_column_slice(&[0.1]),
        m: DMatrix::identity(3, 3) * 0.01,
        h: TFSeries::new(dims, 8, 4),
        p,
        eps: 1.0,
    }
}

/// The preprocessing benchmark: (1,1) form with perturbation eps^2 cos x
/// on the eps^4 action domain.
pub fn preprocessing_model(eps_base: f64) -> NodeNormalForm {
    let dims = Dims::new(1, 1);
    let mut p = TFSeries::new(dims, 4, 4);
    let mut idx = MultiIndex::zero(dims);
    idx.k = vec![1];
    p.add_term(idx.clone(), C64::new(0.5, 0.0)).unwrap();
    p.add_term(idx.negated_k(), C64::new(0.5, 0.0)).unwrap();
    // M-scale chosen off the second-order resonances of omega = 0.1: the
    // lk2 divisors |0.1 k -+ 0.03 -+ 0.03| stay clear of zero on every
    // active shell
    NodeNormalForm {
        dims,
        scales: ScaleSet::new(eps_base.powi(4).min(1e-8), vec![0.1], vec![0.03]).unwrap(),
        energy: 0.0,
        omega: DVector::from_column_slice(&[0.1]),
        m: DMatrix::identity(3, 3) * 0.03,
        h: TFSeries::new(dims, 8, 4),
        p,
        eps: eps_base * eps_base,
    }
}

// ---------------------------------------------------------------------
// execution
// ---------------------------------------------------------------------

/// Artifacts written by a run.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
    /// Exit-style outcome: floors emptied the result set.
    pub excluded_empty: bool,
}

fn write_artifact(out: &Path, name: &str, content: &str, artifacts: &mut Artifacts) -> Result<()> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    fs::write(&path, content)?;
    artifacts.files.push(path);
    Ok(())
}

fn manifest_json(cfg: &RunConfig, sched: &KamSchedule) -> Result<String> {
    let manifest = serde_json::json!({
        "engine": { "name": "mskam", "version": env!("CARGO_PKG_VERSION") },
        "mode": cfg.mode,
        "preset": cfg.preset,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "schedule": sched,
        "grid": cfg.grid,
        "preprocess": cfg.preprocess,
        "config_echo": emit_config(cfg)?,
    });
    serde_json::to_string_pretty(&manifest).map_err(|e| EngineError::Config(format!("{e}")))
}

fn inline_to_normal_form(h: &InlineHamiltonian) -> Result<NodeNormalForm> {
    let dims = Dims::new(h.n, h.m);
    let d = dims.yz_dim();
    if h.omega.len() != h.n || h.m_matrix.len() != d {
        return Err(EngineError::Config("inline hamiltonian shapes".into()));
    }
    let mut m = DMatrix::zeros(d, d);
    for (r, row) in h.m_matrix.iter().enumerate() {
        if row.len() != d {
            return Err(EngineError::Config("inline M row length".into()));
        }
        for (c, &v) in row.iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    let mut p = TFSeries::new(dims, h.degree_cap, h.fourier_cap);
    for (k, iy, jz, re, im) in &h.p_terms {
        p.add_term(
            MultiIndex::new(k.clone(), iy.clone(), jz.clone()),
            C64::new(*re, *im),
        )?;
    }
    let scales = ScaleSet::with_ceiling(h.eps.min(1e-8), h.eps_scales.clone(), h.mu_scales.clone(), 1.0)?;
    let nf = NodeNormalForm {
        dims,
        scales,
        energy: 0.0,
        omega: DVector::from_column_slice(&h.omega),
        m: (&m + m.transpose()) * 0.5,
        h: TFSeries::new(dims, 8, h.fourier_cap),
        p,
        eps: h.eps,
    };
    nf.validate()?;
    Ok(nf)
}

fn inline_to_resonant(r: &InlineResonant) -> Result<ResonantSystem> {
    let d = r.d;
    let mut parts = Vec::new();
    for (scale, q_rows, lin) in &r.parts {
        if q_rows.len() != d || lin.len() != d {
            return Err(EngineError::Config("resonant part shapes".into()));
        }
        let mut q = DMatrix::zeros(d, d);
        for (i, row) in q_rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                q[(i, j)] = v;
            }
        }
        let q = (&q + q.transpose()) * 0.5;
        let l = DVector::from_column_slice(lin);
        let q1 = q.clone();
        let q2 = q.clone();
        let l1 = l.clone();
        parts.push((
            *scale,
            ActionFn {
                f: Rc::new(move |y: &[f64]| {
                    let yv = DVector::from_column_slice(y);
                    0.5 * (yv.transpose() * &q * &yv)[(0, 0)] + l.dot(&yv)
                }),
                grad: Rc::new(move |y: &[f64]| &q1 * DVector::from_column_slice(y) + &l1),
                hess: Rc::new(move |_| q2.clone()),
            },
        ));
    }
    Ok(ResonantSystem {
        d,
        eps: r.eps,
        parts,
        p_modes: r
            .p_modes
            .iter()
            .map(|(k, re, im)| (k.clone(), C64::new(*re, *im)))
            .collect(),
    })
}

fn condition_set(
    freq: &FrequencyData,
    grid_nodes: &[Vec<f64>],
    shells: &[Vec<i64>],
    cap_n: usize,
    which: &[ConditionId],
) -> Result<ConditionReport> {
    let mut report = ConditionReport::default();
    for cond in which {
        let mut all = true;
        let mut worst: Option<crate::nonres::ConditionVerdict> = None;
        for node in grid_nodes {
            for k in shells {
                let v = check_condition(freq, node, k, cap_n, *cond)?;
                if !v.holds {
                    all = false;
                }
                let take = match &worst {
                    None => true,
                    Some(w) => v.witness.sigma_min < w.witness.sigma_min || (!v.holds && w.holds),
                };
                if take {
                    worst = Some(v);
                }
            }
        }
        let mut v = worst.expect("at least one node and shell");
        v.holds = all;
        report.insert(cond.name(), v);
    }
    Ok(report)
}

/// Execute a resolved config, writing artifacts under `out`.
pub fn execute(cfg: &RunConfig, out: &Path) -> Result<Artifacts> {
    let sched = cfg.schedule.apply(KamSchedule::default());
    let mut artifacts = Artifacts::default();
    write_artifact(out, "manifest.json", &manifest_json(cfg, &sched)?, &mut artifacts)?;
    match cfg.mode {
        Mode::KamRun => execute_kam_run(cfg, &sched, out, &mut artifacts)?,
        Mode::Normalize => execute_normalize(cfg, out, &mut artifacts)?,
        Mode::Measure => execute_measure(cfg, out, &mut artifacts)?,
        Mode::CheckConditions => execute_conditions(cfg, out, &mut artifacts)?,
        Mode::ReduceResonance => execute_reduce(cfg, out, &mut artifacts)?,
    }
    Ok(artifacts)
}

const STEPS_HEADER: &str = "nu,r,s,gamma,eta,mu,K,norm_P,norm_P_plus,excluded_shell_count,accepted";

fn execute_kam_run(
    cfg: &RunConfig,
    sched: &KamSchedule,
    out: &Path,
    artifacts: &mut Artifacts,
) -> Result<()> {
    let nf = match (&cfg.hamiltonian, cfg.preset.as_deref()) {
        (Some(h), _) => inline_to_normal_form(h)?,
        (None, Some("example-6.3")) => example_6_3_run_form(sched)?,
        (None, _) => model_normal_form(sched, sched.mu0),
    };
    let run = run_node(&nf, sched)?;
    let mut csv = String::from(STEPS_HEADER);
    csv.push('\n');
    for cert in &run.history {
        let seq = sched.sequence_at(cert.nu);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            cert.nu,
            fmt_f64(seq.r),
            fmt_f64(seq.s),
            fmt_f64(seq.gamma),
            fmt_f64(seq.eta),
            fmt_f64(seq.mu),
            seq.k_plus,
            fmt_f64(cert.norm_before),
            fmt_f64(cert.norm_after),
            cert.excluded_shells.len(),
            cert.accepted,
        ));
    }
    write_artifact(out, "steps.csv", &csv, artifacts)?;
    if run.rejected_at.is_some() {
        artifacts.excluded_empty = true;
    }
    Ok(())
}

/// The artificial example's structure at a nominal node, with the
/// perturbation at the standing ledger scale for a short run.
fn example_6_3_run_form(sched: &KamSchedule) -> Result<NodeNormalForm> {
    let eps = 1e-2f64;
    let freq = example_6_3(eps, 0.7, -0.4)?;
    let lambda = [1.3, 1.6];
    let dims = freq.dims;
    let p_amp = sched.gamma0.powi(3 * sched.b as i32) * sched.s0 * sched.s0 * sched.mu0;
    let mut p = TFSeries::new(dims, 4, 4);
    for k in [vec![1i64, 0], vec![0, 1]] {
        let idx = MultiIndex::new(k, vec![0, 0], vec![0, 0]);
        p.add_term(idx.clone(), C64::new(0.5 * p_amp, 0.0))?;
        p.add_term(idx.negated_k(), C64::new(0.5 * p_amp, 0.0))?;
    }
    Ok(NodeNormalForm {
        dims,
        scales: freq.scales.clone(),
        energy: 0.0,
        omega: freq.omega(&lambda),
        m: freq.m_full(&lambda),
        h: TFSeries::new(dims, 8, 4),
        p,
        eps: 1.0,
    })
}

fn execute_normalize(cfg: &RunConfig, out: &Path, artifacts: &mut Artifacts) -> Result<()> {
    let pp = cfg.preprocess.clone().unwrap_or_default();
    let nf0 = match &cfg.hamiltonian {
        Some(h) => inline_to_normal_form(h)?,
        None => preprocessing_model(pp.eps_base),
    };
    let sigma = cfg.schedule.sigma.unwrap_or(1.0 / 12.0);
    let outcome = preprocess_normal_form(
        &nf0,
        pp.eps_base,
        pp.a,
        sigma,
        cfg.schedule.r0.unwrap_or(1.0),
        cfg.schedule.gamma0.unwrap_or(0.1),
        cfg.schedule.tau.unwrap_or(2.5),
        cfg.schedule.b.unwrap_or(1),
    )?;
    let mut csv = String::from(STEPS_HEADER);
    csv.push('\n');
    for (i, cert) in outcome.steps.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            cert.nu,
            fmt_f64(f64::NAN),
            fmt_f64(f64::NAN),
            fmt_f64(cfg.schedule.gamma0.unwrap_or(0.1)),
            fmt_f64(0.25),
            fmt_f64(f64::NAN),
            0,
            fmt_f64(cert.norm_before),
            fmt_f64(cert.norm_after),
            cert.excluded_shells.len(),
            cert.accepted,
        ));
        let _ = i;
    }
    write_artifact(out, "steps.csv", &csv, artifacts)?;
    let ledger = serde_json::json!({
        "eps_base": pp.eps_base,
        "a": pp.a,
        "step_count": outcome.steps.len(),
        "ledger_exponents": outcome.ledger_exponents,
        "measured_norms": outcome.measured_norms,
    });
    write_artifact(
        out,
        "normalize.json",
        &serde_json::to_string_pretty(&ledger).unwrap(),
        artifacts,
    )?;
    Ok(())
}

fn execute_measure(cfg: &RunConfig, out: &Path, artifacts: &mut Artifacts) -> Result<()> {
    let grid = cfg.grid.clone().unwrap_or_default();
    let freq = match cfg.preset.as_deref() {
        Some("example-6.3") => example_6_3(1e-2, 0.7, -0.4)?,
        _ => measure_calibration_family(grid.lo.len())?,
    };
    let table = if grid.monte_carlo {
        // sampled nodes from the seed; same estimator downstream
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dim = grid.lo.len();
        let total: usize = grid.per_dim.iter().product();
        let mut rows = Vec::new();
        for &g in &grid.gammas {
            let mut lattice = LambdaGrid::lattice(&grid.lo, &grid.hi, &grid.per_dim)?;
            for node in lattice.nodes.iter_mut().take(total) {
                for a in 0..dim {
                    node[a] = rng.gen_range(grid.lo[a]..grid.hi[a]);
                }
            }
            build_nonresonant_set(&freq, &mut lattice, g, 3.5, grid.shell_cap, 0)?;
            rows.push((g, lattice.excluded_fraction()));
        }
        // reuse the deterministic fit by rebuilding a table
        fit_rows(rows)
    } else {
        let t = estimate_excluded_measure(
            &freq,
            &grid.lo,
            &grid.hi,
            &grid.per_dim,
            &grid.gammas,
            3.5,
            grid.shell_cap,
        )?;
        (
            t.rows
                .iter()
                .map(|r| (r.gamma, r.excluded_fraction))
                .collect(),
            t.fitted_slope,
            t.ci_low,
            t.ci_high,
        )
    };
    let (rows, slope, lo_ci, hi_ci) = table;
    let mut csv = String::from("gamma,excluded_fraction,fitted_slope,ci_low,ci_high\n");
    for (g, f) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(*g),
            fmt_f64(*f),
            fmt_f64(slope),
            fmt_f64(lo_ci),
            fmt_f64(hi_ci)
        ));
    }
    write_artifact(out, "measure.csv", &csv, artifacts)?;
    if rows.iter().all(|(_, f)| *f >= 1.0) {
        artifacts.excluded_empty = true;
    }
    Ok(())
}

fn fit_rows(rows: Vec<(f64, f64)>) -> (Vec<(f64, f64)>, f64, f64, f64) {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(_, f)| *f > 0.0)
        .map(|(g, f)| (g.ln(), f.ln()))
        .collect();
    if pts.len() < 2 {
        return (rows, f64::NAN, f64::NAN, f64::NAN);
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (rows, slope, slope, slope)
}

/// The calibration family omega(lambda) = lambda used by the measure law.
pub fn measure_calibration_family(dim: usize) -> Result<FrequencyData> {
    let dims = Dims::new(dim, 0);
    let scales = ScaleSet::new(1e-3, vec![0.05], vec![])?;
    FrequencyData::new(
        dims,
        scales,
        vec![(0.05, ParamVec::identity(dim))],
        vec![],
        TFSeries::new(dims, 4, 4),
    )
}

fn execute_conditions(cfg: &RunConfig, out: &Path, artifacts: &mut Artifacts) -> Result<()> {
    let report = match cfg.preset.as_deref() {
        Some("example-6.1") => conditions_example_6_1()?,
        Some("example-6.3") | None => conditions_example_6_3(cfg)?,
        Some("example-6.2") => {
            // the resonant example's conditions come from the reduced system
            let sys = example_6_2(1e-2);
            let frame = complete_unimodular(&[vec![1, 0]], 2)?;
            let y0 = [1.0, 1.0];
            let red = reduce_to_normal_form(&sys, &frame, &y0, &ReduceOptions::default())?;
            let chart = ManifoldChart::from_system(&sys, &frame, &y0)?;
            let rep = verify_s_conditions(&sys, &frame, &chart, &red, 0, DEFAULT_DET_FLOOR, 2)?;
            serde_json::json!({
                "preset": "example-6.2",
                "reduction": red.to_json(),
                "s_conditions": rep.to_json(),
            })
        }
        Some(p) => return Err(EngineError::Config(format!("unknown preset '{p}'"))),
    };
    write_artifact(
        out,
        "conditions.json",
        &serde_json::to_string_pretty(&report).unwrap(),
        artifacts,
    )?;
    Ok(())
}

fn conditions_example_6_1() -> Result<serde_json::Value> {
    let (generic, collision) = example_6_1(&[1.0, 1.5], 1e-2)?;
    // spectrum of the normal block
    let m22 = generic.m22(&[1.3]);
    let spec = complex_matrix_eigenvalues(&to_complex(&(&m22 * j_matrix(2))));
    let nodes: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0 + 0.2 * i as f64]).collect();
    let shells: Vec<Vec<i64>> = vec![vec![1], vec![2], vec![3]];
    let which = [ConditionId::M1DoublePrime, ConditionId::M2DoublePrime, ConditionId::D];
    let generic_rep = condition_set(&generic, &nodes, &shells, 2, &which)?;
    let collision_rep = condition_set(&collision, &nodes, &shells, 2, &which)?;
    Ok(serde_json::json!({
        "preset": "example-6.1",
        "normal_spectrum": spec.iter().map(|e| [e.re, e.im]).collect::<Vec<_>>(),
        "generic": generic_rep.to_json(),
        "divisor_collision": collision_rep.to_json(),
    }))
}

fn conditions_example_6_3(cfg: &RunConfig) -> Result<serde_json::Value> {
    let freq = example_6_3(1e-2, 0.7, -0.4)?;
    let grid = cfg.grid.clone().unwrap_or_default();
    let lattice = LambdaGrid::lattice(&grid.lo, &grid.hi, &[5, 5])?;
    let shells: Vec<Vec<i64>> = vec![vec![1, 0], vec![0, 1], vec![1, -1], vec![2, 1]];
    let which = [
        ConditionId::D,
        ConditionId::C1,
        ConditionId::M1Prime,
        ConditionId::M2Prime,
    ];
    let rep = condition_set(&freq, &lattice.nodes, &shells, 2, &which)?;
    Ok(serde_json::json!({
        "preset": "example-6.3",
        "conditions": rep.to_json(),
    }))
}

fn execute_reduce(cfg: &RunConfig, out: &Path, artifacts: &mut Artifacts) -> Result<()> {
    let (sys, y0) = match (&cfg.resonant, cfg.preset.as_deref()) {
        (Some(r), _) => (inline_to_resonant(r)?, r.y0.clone()),
        (None, Some("example-6.2")) | (None, None) => (example_6_2(1e-2), vec![1.0, 1.0]),
        (None, Some(p)) => {
            return Err(EngineError::Config(format!(
                "preset '{p}' has no resonant reduction"
            )))
        }
    };
    let omega = sys.omega(&y0);
    let omega_slice: Vec<f64> = omega.iter().copied().collect();
    let tol = 1e-9 * omega.norm().max(1.0);
    let det = detect_resonance(&omega_slice, tol, 10)?;
    if det.m0 == 0 {
        // no resonant sublattice: the reduction's result set is empty
        artifacts.excluded_empty = true;
        return Err(EngineError::FloorViolation {
            which: "resonance lattice is empty within the search cap".into(),
            lambda_min: det.min_nonresonant,
            floor: tol,
        });
    }
    let frame = complete_unimodular(&det.generators, sys.d)?;
    let red = reduce_to_normal_form(&sys, &frame, &y0, &ReduceOptions::default())?;
    let mut doc = red.to_json();
    // nondegeneracy report for the reduced system at each critical point
    if let Ok(chart) = ManifoldChart::from_system(&sys, &frame, &y0) {
        let mut reports = Vec::new();
        for idx in 0..red.per_critical.len() {
            let rep = verify_s_conditions(&sys, &frame, &chart, &red, idx, DEFAULT_DET_FLOOR, 2)?;
            reports.push(rep.to_json());
        }
        doc["s_conditions"] = serde_json::json!(reports);
    }
    write_artifact(
        out,
        "reduction.json",
        &serde_json::to_string_pretty(&doc).unwrap(),
        artifacts,
    )?;
    Ok(())
}

/// Map an engine error to the documented process exit code.
pub fn exit_code_for(err: &EngineError) -> i32 {
    match err {
        EngineError::Config(_) => 2,
        EngineError::SmallDivisor { .. }
        | EngineError::FloorViolation { .. }
        | EngineError::PartialAssembly { .. }
        | EngineError::StepRejected { .. } => 4,
        _ => 3,
    }
}

/// Resolve the output directory: flag > env > config > default.
pub fn resolve_out(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| std::env::var("MSKAM_OUT").ok().map(PathBuf::from))
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("mskam-out"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn config_round_trip() {
        let cfg = RunConfig {
            mode: Mode::CheckConditions,
            preset: Some("example-6.3".into()),
            seed: 42,
            workers: 2,
            out: Some(PathBuf::from("somewhere")),
            schedule: ScheduleOverrides {
                mu0: Some(1e-5),
                tau: Some(3.5),
                ..Default::default()
            },
            grid: Some(GridSpec::default()),
            hamiltonian: None,
            resonant: None,
            preprocess: None,
        };
        let text = emit_config(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, &text).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "mode = \"measure\"\nfoo = 1\n").unwrap();
        match load_config(&path) {
            Err(EngineError::Config(msg)) => assert!(msg.contains("foo"), "{msg}"),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "mode = \"check-conditions\"\npreset = \"example-6.3\"\n").unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.mode, Mode::CheckConditions);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.workers, 1);
        assert!(cfg.grid.is_none());
        // json form accepted too
        let jpath = dir.path().join("cfg.json");
        fs::write(&jpath, "{\"mode\": \"measure\"}").unwrap();
        let jcfg = load_config(&jpath).unwrap();
        assert_eq!(jcfg.mode, Mode::Measure);
    }

    #[test]
    fn example_6_1_spectrum() {
        let (generic, _) = example_6_1(&[1.0, 1.5], 1e-2).unwrap();
        let m22 = generic.m22(&[1.0]);
        let spec = complex_matrix_eigenvalues(&to_complex(&(&m22 * j_matrix(2))));
        let mut ims: Vec<f64> = spec.iter().map(|e| e.im).collect();
        ims.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(ims[0], -2.25, max_relative = 1e-12);
        assert_relative_eq!(ims[1], -1.0, max_relative = 1e-12);
        assert_relative_eq!(ims[2], 1.0, max_relative = 1e-12);
        assert_relative_eq!(ims[3], 2.25, max_relative = 1e-12);
        assert!(spec.iter().all(|e| e.re.abs() <= 1e-12));
    }

    #[test]
    fn example_6_3_c1_floor_as_displayed() {
        let eps = 1e-2f64;
        let freq = example_6_3(eps, 0.7, -0.4).unwrap();
        let v = check_condition(&freq, &[1.3, 1.6], &[1, 0], 2, ConditionId::C1).unwrap();
        assert!(v.holds);
        // the floor is (min mu)^2 = eps^6 exactly as displayed
        let note = v.witness.note.unwrap();
        assert!(note.contains(&format!("{:.6e}", eps.powi(6))), "{note}");
    }

    #[test]
    fn preset_pipelines_write_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        // conditions for the artificial example
        let cfg = RunConfig {
            mode: Mode::CheckConditions,
            preset: Some("example-6.3".into()),
            seed: 0,
            workers: 1,
            out: None,
            schedule: Default::default(),
            grid: None,
            hamiltonian: None,
            resonant: None,
            preprocess: None,
        };
        let art = execute(&cfg, dir.path()).unwrap();
        assert!(art.files.iter().any(|f| f.ends_with("conditions.json")));
        let text = fs::read_to_string(dir.path().join("conditions.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["conditions"]["verdicts"]["D"]["holds"], true);
        assert_eq!(v["conditions"]["verdicts"]["C1"]["holds"], true);
        assert_eq!(v["conditions"]["verdicts"]["M1'"]["holds"], true);
        assert_eq!(v["conditions"]["verdicts"]["M2'"]["holds"], true);
    }

    #[test]
    fn reduce_preset_reports_unimodular_frame() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            mode: Mode::ReduceResonance,
            preset: Some("example-6.2".into()),
            seed: 0,
            workers: 1,
            out: None,
            schedule: Default::default(),
            grid: None,
            hamiltonian: None,
            resonant: None,
            preprocess: None,
        };
        execute(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("reduction.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["frame"]["det_k0"], 1);
        assert!(v["critical_points"].as_array().unwrap().len() >= 2);
    }

    #[test]
    fn kam_run_writes_deterministic_csv() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            mode: Mode::KamRun,
            preset: None,
            seed: 7,
            workers: 1,
            out: None,
            schedule: ScheduleOverrides {
                mu0: Some(1e-6),
                ..Default::default()
            },
            grid: None,
            hamiltonian: None,
            resonant: None,
            preprocess: None,
        };
        execute(&cfg, dir1.path()).unwrap();
        execute(&cfg, dir2.path()).unwrap();
        let a = fs::read(dir1.path().join("steps.csv")).unwrap();
        let b = fs::read(dir2.path().join("steps.csv")).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        let m1 = fs::read(dir1.path().join("manifest.json")).unwrap();
        let m2 = fs::read(dir2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn measure_run_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            mode: Mode::Measure,
            preset: None,
            seed: 0,
            workers: 1,
            out: None,
            schedule: Default::default(),
            grid: Some(GridSpec {
                per_dim: vec![30, 30],
                gammas: vec![0.1, 0.05],
                shell_cap: 8,
                ..Default::default()
            }),
            hamiltonian: None,
            resonant: None,
            preprocess: None,
        };
        execute(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("measure.csv")).unwrap();
        assert!(text.starts_with("gamma,excluded_fraction,fitted_slope,ci_low,ci_high"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn exit_codes_match_error_classes() {
        assert_eq!(exit_code_for(&EngineError::Config("x".into())), 2);
        assert_eq!(
            exit_code_for(&EngineError::SmallDivisor {
                k: vec![1],
                divisor: 0.0,
                floor: 1.0
            }),
            4
        );
        assert_eq!(exit_code_for(&EngineError::Numeric("x".into())), 3);
    }
}
