//! Homological equations: the degree-graded solves that produce the
//! generating Hamiltonian F on the nonresonant set, plus the translation
//! equations that remove the frequency drift and the first-order resonant
//! term.
//!
//! Per Fourier shell k the equation `{N, F} + eps (R - [R]) = 0` splits by
//! Taylor degree. The same-degree action of the quadratic part of N gives
//! the divisor operators; the degree-raising action of the quadratic part
//! and of the cubic jet h couples lower-degree solutions into the
//! right-hand side of the next degree. Solving degree 0, then 1, then 2
//! with those exact coupling corrections makes the assembled residual
//! vanish to roundoff on the truncated range.

use nalgebra::{DMatrix, DVector};

use crate::error::{EngineError, Result};
use crate::mslinalg::{
    hermitian_floor, j_embedded, j_matrix, quad_system_matrix, to_complex, DivisorOperators,
    FrequencyData,
};
use crate::tfseries::{build, AnalyticDomain, Dims, MultiIndex, TFSeries, C64};

/// Per-shell record of divisors, floors and the solve outcome.
#[derive(Clone, Debug)]
pub struct ShellRecord {
    pub k: Vec<i64>,
    pub divisor0: f64,
    pub floor0: f64,
    pub a1_min: f64,
    pub a1_floor: f64,
    pub a2_min: f64,
    pub a2_floor: f64,
    pub solved: bool,
    pub conditioning_warning: bool,
}

/// The generating Hamiltonian assembled over all solved shells, with its
/// shell ledger. Serializes through the series JSON format.
#[derive(Clone, Debug)]
pub struct Generator {
    pub series: TFSeries,
    pub shells: Vec<ShellRecord>,
}

impl Generator {
    pub fn excluded_shells(&self) -> Vec<&ShellRecord> {
        self.shells.iter().filter(|s| !s.solved).collect()
    }

    /// Excluded-shell report as JSON: list of {k, divisor, floor}.
    pub fn exclusion_report(&self) -> serde_json::Value {
        let list: Vec<serde_json::Value> = self
            .shells
            .iter()
            .filter(|s| !s.solved)
            .map(|s| {
                serde_json::json!({
                    "k": s.k,
                    "divisor": s.divisor0,
                    "floor": s.floor0,
                })
            })
            .collect();
        serde_json::json!(list)
    }
}

/// Translation shift removing the frequency drift (and, isoenergetically,
/// rescaling the frequency by 1 + t).
#[derive(Clone, Debug)]
pub struct TranslationShift {
    pub y0: DVector<f64>,
    pub z0: DVector<f64>,
    /// Energy-surface multiplier of the isoenergetic variant.
    pub t: Option<f64>,
    pub residual: f64,
    pub newton_iters: usize,
}

impl TranslationShift {
    pub fn norm(&self) -> f64 {
        (self.y0.norm_squared() + self.z0.norm_squared()).sqrt()
    }
}

/// Degree <= 2 shell coefficients extracted from a series: scalar, linear
/// parts, and the full (n+2m) symmetric Hessian form of the quadratic part.
#[derive(Clone, Debug)]
pub struct ShellCoeffs {
    pub c0: C64,
    pub cy: DVector<C64>,
    pub cz: DVector<C64>,
    pub hessian: DMatrix<C64>,
}

impl ShellCoeffs {
    pub fn zero(dims: Dims) -> Self {
        let d = dims.yz_dim();
        ShellCoeffs {
            c0: C64::new(0.0, 0.0),
            cy: DVector::from_element(dims.n, C64::new(0.0, 0.0)),
            cz: DVector::from_element(dims.z_dim(), C64::new(0.0, 0.0)),
            hessian: DMatrix::from_element(d, d, C64::new(0.0, 0.0)),
        }
    }
}

/// Extract the degree <= 2 coefficients of `series` at Fourier shell `k`.
pub fn extract_shell(series: &TFSeries, k: &[i64]) -> ShellCoeffs {
    let dims = series.dims();
    let n = dims.n;
    let mut out = ShellCoeffs::zero(dims);
    for (idx, c) in series.terms() {
        if idx.k != k {
            continue;
        }
        match idx.degree() {
            0 => out.c0 += c.value,
            1 => {
                if let Some(a) = idx.iy.iter().position(|&p| p == 1) {
                    out.cy[a] += c.value;
                } else if let Some(a) = idx.jz.iter().position(|&p| p == 1) {
                    out.cz[a] += c.value;
                }
            }
            2 => {
                let mut pos = Vec::with_capacity(2);
                for (a, &p) in idx.iy.iter().enumerate() {
                    for _ in 0..p {
                        pos.push(a);
                    }
                }
                for (a, &p) in idx.jz.iter().enumerate() {
                    for _ in 0..p {
                        pos.push(n + a);
                    }
                }
                let (r, s) = (pos[0], pos[1]);
                if r == s {
                    out.hessian[(r, r)] += c.value;
                } else {
                    out.hessian[(r, s)] += c.value * 0.5;
                    out.hessian[(s, r)] += c.value * 0.5;
                }
            }
            _ => {}
        }
    }
    out
}

/// Insert degree <= 2 coefficients at shell `k` into `dst`.
pub fn insert_shell(dst: &mut TFSeries, k: &[i64], co: &ShellCoeffs) -> Result<()> {
    let dims = dst.dims();
    let n = dims.n;
    let zdim = dims.z_dim();
    let mk_idx = |iy: Vec<u32>, jz: Vec<u32>| MultiIndex::new(k.to_vec(), iy, jz);
    if co.c0.norm() != 0.0 {
        dst.add_term(mk_idx(vec![0; n], vec![0; zdim]), co.c0)?;
    }
    for a in 0..n {
        if co.cy[a].norm() != 0.0 {
            let mut iy = vec![0u32; n];
            iy[a] = 1;
            dst.add_term(mk_idx(iy, vec![0; zdim]), co.cy[a])?;
        }
    }
    for a in 0..zdim {
        if co.cz[a].norm() != 0.0 {
            let mut jz = vec![0u32; zdim];
            jz[a] = 1;
            dst.add_term(mk_idx(vec![0; n], jz), co.cz[a])?;
        }
    }
    let d = dims.yz_dim();
    for r in 0..d {
        for s in r..d {
            let v = if r == s {
                co.hessian[(r, r)]
            } else {
                co.hessian[(r, s)] + co.hessian[(s, r)]
            };
            if v.norm() == 0.0 {
                continue;
            }
            let mut iy = vec![0u32; n];
            let mut jz = vec![0u32; zdim];
            for &pos in &[r, s] {
                if pos < n {
                    iy[pos] += 1;
                } else {
                    jz[pos - n] += 1;
                }
            }
            dst.add_term(mk_idx(iy, jz), v)?;
        }
    }
    Ok(())
}

fn small_divisor_err(k: &[i64], divisor: f64, floor: f64) -> EngineError {
    EngineError::SmallDivisor {
        k: k.to_vec(),
        divisor,
        floor,
    }
}

/// Degree-0 solve: `(lk0 + varpi) f = rhs`, guarded by the half-floor
/// `min eps_i * gamma / (2 |k|^tau)`.
pub fn solve_order0(ops: &DivisorOperators, rhs: C64, half_floor: f64) -> Result<C64> {
    let divisor = ops.lk0 + ops.varpi;
    if divisor.norm() < half_floor {
        return Err(small_divisor_err(&ops.k, divisor.norm(), half_floor));
    }
    Ok(rhs / divisor)
}

/// Degree-1 solve through the triangular first-order operator:
/// `lk1 f01 = rhs_z`, then `lk0 f10 = rhs_y + (M21)^T J f01`.
///
/// Returns (f10, f01, conditioning_warning). `rhs` carries eps and any
/// coupling corrections already.
pub fn solve_order1(
    ops: &DivisorOperators,
    m21: &DMatrix<f64>,
    rhs_y: &DVector<C64>,
    rhs_z: &DVector<C64>,
    floor: f64,
) -> Result<(DVector<C64>, DVector<C64>, bool)> {
    let (holds, a1_min) = hermitian_floor(&ops.a1, floor)?;
    if !holds {
        return Err(small_divisor_err(&ops.k, a1_min.max(0.0).sqrt(), floor));
    }
    let n = rhs_y.len();
    let zdim = rhs_z.len();
    let f01 = if zdim > 0 {
        ops.lk1
            .clone()
            .lu()
            .solve(rhs_z)
            .ok_or_else(|| EngineError::Numeric("first-order z-block solve failed".into()))?
    } else {
        DVector::from_element(0, C64::new(0.0, 0.0))
    };
    let coup = if zdim > 0 {
        to_complex(&m21.transpose()) * to_complex(&j_matrix(zdim / 2)) * &f01
    } else {
        DVector::from_element(n, C64::new(0.0, 0.0))
    };
    let f10 = (rhs_y + coup) / ops.lk0;

    // stacked residual check against the block operator
    let mut stacked = DVector::from_element(n + zdim, C64::new(0.0, 0.0));
    let mut rhs_full = stacked.clone();
    for i in 0..n {
        stacked[i] = f10[i];
        rhs_full[i] = rhs_y[i];
    }
    for i in 0..zdim {
        stacked[n + i] = f01[i];
        rhs_full[n + i] = rhs_z[i];
    }
    let res = (&ops.a1 * &stacked - &rhs_full).norm();
    if res > 1e-12 * rhs_full.norm().max(f64::MIN_POSITIVE) && res > 1e-300 {
        return Err(EngineError::Numeric(format!(
            "first-order residual {res:.3e} at k = {:?}",
            ops.k
        )));
    }
    let a_norm = ops.a1.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let conditioning_warning = a1_min > 0.0 && a_norm / a1_min.sqrt() > 1e12;
    Ok((f10, f01, conditioning_warning))
}

/// Degree-2 solve by block back-substitution on the full (n+2m) symmetric
/// Hessian form W of the quadratic part: the zz block first (the
/// lk2-structured system), then the yz block (n column solves with lk1),
/// then the yy block (division by lk0).
///
/// `rhs` is the symmetric Hessian form of the right-hand side (eps and
/// couplings folded in).
pub fn solve_order2(
    ops: &DivisorOperators,
    m_full: &DMatrix<f64>,
    dims: Dims,
    rhs: &DMatrix<C64>,
    floor: f64,
) -> Result<DMatrix<C64>> {
    let n = dims.n;
    let m = dims.m;
    let zdim = 2 * m;
    let d = dims.yz_dim();
    let (holds, a2_min) = hermitian_floor(&ops.a2, floor)?;
    if !holds {
        return Err(small_divisor_err(&ops.k, a2_min.max(0.0).sqrt(), floor));
    }
    let m12: DMatrix<C64> = to_complex(&m_full.view((0, n), (n, zdim)).into());
    let j = to_complex(&j_matrix(m));

    let r_yy: DMatrix<C64> = rhs.view((0, 0), (n, n)).into();
    let r_yz: DMatrix<C64> = rhs.view((0, n), (n, zdim)).into();
    let r_zz: DMatrix<C64> = rhs.view((n, n), (zdim, zdim)).into();

    // zz block: lk2 vec(C) = vec(r_zz), column-major
    let c_blk = if zdim > 0 {
        let vec_rzz = DVector::from_fn(zdim * zdim, |i, _| r_zz[(i % zdim, i / zdim)]);
        let sol = ops
            .lk2
            .clone()
            .lu()
            .solve(&vec_rzz)
            .ok_or_else(|| EngineError::Numeric("zz block solve failed".into()))?;
        DMatrix::from_fn(zdim, zdim, |r, c| sol[c * zdim + r])
    } else {
        DMatrix::from_element(0, 0, C64::new(0.0, 0.0))
    };

    // yz block: lk1 (B^T columns) = (r_yz + M12 J C)^T columns
    let b_blk = if zdim > 0 {
        let rhs_b = (&r_yz + &m12 * &j * &c_blk).transpose();
        let lu = ops.lk1.clone().lu();
        let mut bt = DMatrix::from_element(zdim, n, C64::new(0.0, 0.0));
        for col in 0..n {
            let rhs_col: DVector<C64> = rhs_b.column(col).into();
            let sol = lu
                .solve(&rhs_col)
                .ok_or_else(|| EngineError::Numeric("yz block solve failed".into()))?;
            bt.set_column(col, &sol);
        }
        bt.transpose()
    } else {
        DMatrix::from_element(n, 0, C64::new(0.0, 0.0))
    };

    // yy block: lk0 A = r_yy + 2 sym(M12 J B^T)
    let a_blk = if zdim > 0 {
        let t = &m12 * &j * b_blk.transpose();
        let sym = (&t + t.transpose()) * C64::new(0.5, 0.0);
        (r_yy + sym * C64::new(2.0, 0.0)) / ops.lk0
    } else {
        r_yy / ops.lk0
    };

    let mut w = DMatrix::from_element(d, d, C64::new(0.0, 0.0));
    for r in 0..n {
        for c in 0..n {
            w[(r, c)] = a_blk[(r, c)];
        }
    }
    for r in 0..n {
        for c in 0..zdim {
            w[(r, n + c)] = b_blk[(r, c)];
            w[(n + c, r)] = b_blk[(r, c)];
        }
    }
    for r in 0..zdim {
        for c in 0..zdim {
            w[(n + r, n + c)] = c_blk[(r, c)];
        }
    }

    let res = quad_residual(ops.lk0, m_full, dims, &w, rhs);
    let scale = rhs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if res > 1e-10 * scale.max(f64::MIN_POSITIVE) && res > 1e-300 {
        return Err(EngineError::Numeric(format!(
            "second-order residual {res:.3e} at k = {:?}",
            ops.k
        )));
    }
    Ok(w)
}

/// One-shot dense solve of the (n+2m)^2 full-Hessian system; the oracle
/// route for `solve_order2`.
pub fn solve_order2_dense(
    lk0: C64,
    m_full: &DMatrix<f64>,
    dims: Dims,
    rhs: &DMatrix<C64>,
) -> Result<DMatrix<C64>> {
    let d = dims.yz_dim();
    let g = quad_system_matrix(lk0, m_full, dims.n, dims.m);
    let vec_rhs = DVector::from_fn(d * d, |i, _| rhs[(i % d, i / d)]);
    let sol = g
        .lu()
        .solve(&vec_rhs)
        .ok_or_else(|| EngineError::Numeric("dense quadratic solve failed".into()))?;
    Ok(DMatrix::from_fn(d, d, |r, c| sol[c * d + r]))
}

fn quad_residual(
    lk0: C64,
    m_full: &DMatrix<f64>,
    dims: Dims,
    w: &DMatrix<C64>,
    rhs: &DMatrix<C64>,
) -> f64 {
    let mjt = to_complex(&(m_full * j_embedded(dims.n, dims.m)));
    // i<k,w> W - (M Jt) W - W (M Jt)^T
    let lhs = w * lk0 - &mjt * w - w * mjt.transpose();
    (lhs - rhs).iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Everything `solve_shell` needs about the normal form at one parameter
/// node.
pub struct ShellContext {
    pub dims: Dims,
    pub omega: DVector<f64>,
    pub m_full: DMatrix<f64>,
    /// Quadratic part plus cubic jet of N as a series (k = 0 only), used to
    /// compute the exact degree-raising couplings.
    pub n_rest: TFSeries,
    pub gamma: f64,
    pub tau: f64,
    pub min_eps: f64,
    pub min_all: f64,
}

impl ShellContext {
    pub fn from_frequency_data(freq: &FrequencyData, lambda: &[f64], gamma: f64, tau: f64) -> Self {
        let m_full = freq.m_full(lambda);
        let dims = freq.dims;
        let n_rest = build::quadratic_form(
            dims,
            freq.h.degree_cap().max(2),
            freq.h.fourier_cap(),
            &m_full,
        )
        .add(&freq.h)
        .expect("same dims");
        ShellContext {
            dims,
            omega: freq.omega(lambda),
            m_full,
            n_rest,
            gamma,
            tau,
            min_eps: freq.scales.min_eps(),
            min_all: freq.scales.min_all(),
        }
    }

    pub fn floors(&self, k_l1: i64) -> (f64, f64, f64) {
        let kt = (k_l1 as f64).powf(self.tau);
        (
            self.min_eps * self.gamma / kt,
            self.min_all * self.gamma / kt,
            self.min_all * self.gamma / kt,
        )
    }
}

/// Solve one shell of `{N,F} + eps (R - [R]) = 0` degree by degree with the
/// exact coupling corrections, writing the solution into `f_dst`.
pub fn solve_shell(
    ctx: &ShellContext,
    ops: &DivisorOperators,
    r_series: &TFSeries,
    eps: f64,
    f_dst: &mut TFSeries,
) -> Result<ShellRecord> {
    let dims = ctx.dims;
    let n = dims.n;
    let zdim = dims.z_dim();
    let k = &ops.k;
    let p = extract_shell(r_series, k);
    let k_l1: i64 = k.iter().map(|v| v.abs()).sum();
    let (floor0, floor1, floor2) = ctx.floors(k_l1);

    let mut record = ShellRecord {
        k: k.clone(),
        divisor0: (ops.lk0 + ops.varpi).norm(),
        floor0: 0.5 * floor0,
        a1_min: 0.0,
        a1_floor: floor1,
        a2_min: 0.0,
        a2_floor: floor2,
        solved: false,
        conditioning_warning: false,
    };

    // degree 0
    let f00 = solve_order0(ops, p.c0 * eps, 0.5 * floor0)?;

    // partial generator F^{(<1)} for the degree-1 coupling
    let mut partial = TFSeries::new(
        dims,
        r_series.degree_cap().max(2),
        r_series.fourier_cap(),
    );
    let mut co0 = ShellCoeffs::zero(dims);
    co0.c0 = f00;
    insert_shell(&mut partial, k, &co0)?;

    // degree 1: rhs = eps p1 + degree-1 part of {N2 + h, F^(0)}
    let coup1 = ctx.n_rest.poisson_bracket(&partial)?.degree_part(1);
    let c1 = extract_shell(&coup1, k);
    let rhs_y = p.cy.map(|v| v * eps) + c1.cy;
    let rhs_z = p.cz.map(|v| v * eps) + c1.cz;
    let m21: DMatrix<f64> = ctx.m_full.view((n, 0), (zdim, n)).into();
    let (f10, f01, cond1) = solve_order1(ops, &m21, &rhs_y, &rhs_z, floor1)?;
    record.a1_min = hermitian_floor(&ops.a1, floor1)?.1;

    // degree 2: rhs = eps P2 + degree-2 part of {N2 + h, F^(<2)}
    let mut co1 = ShellCoeffs::zero(dims);
    co1.cy = f10.clone();
    co1.cz = f01.clone();
    insert_shell(&mut partial, k, &co1)?;
    let coup2 = ctx.n_rest.poisson_bracket(&partial)?.degree_part(2);
    let c2 = extract_shell(&coup2, k);
    let rhs2 = p.hessian.map(|v| v * eps) + c2.hessian;
    let w = solve_order2(ops, &ctx.m_full, dims, &rhs2, floor2)?;
    record.a2_min = hermitian_floor(&ops.a2, floor2)?.1;

    let sol = ShellCoeffs {
        c0: f00,
        cy: f10,
        cz: f01,
        hessian: w,
    };
    insert_shell(f_dst, k, &sol)?;
    record.solved = true;
    record.conditioning_warning = cond1;
    Ok(record)
}

/// Assemble the generating Hamiltonian over all shells present in `r`.
/// Floor failures exclude their shells; if any shell was excluded the
/// partial generator rides along with the error.
pub fn assemble_generator(
    freq: &FrequencyData,
    lambda: &[f64],
    r: &TFSeries,
    eps: f64,
    gamma: f64,
    tau: f64,
) -> std::result::Result<Generator, (EngineError, Generator)> {
    let ctx = ShellContext::from_frequency_data(freq, lambda, gamma, tau);
    let mut f = TFSeries::new(r.dims(), r.degree_cap().max(2), r.fourier_cap());
    let mut shells = Vec::new();
    let mut excluded: Vec<Vec<i64>> = Vec::new();
    for k in r.fourier_modes() {
        let ops = match crate::mslinalg::build_operators(freq, &k, lambda, None) {
            Ok(o) => o,
            Err(e) => return Err((e, Generator { series: f, shells })),
        };
        match solve_shell(&ctx, &ops, r, eps, &mut f) {
            Ok(rec) => shells.push(rec),
            Err(EngineError::SmallDivisor {
                k: kk,
                divisor,
                floor,
            }) => {
                excluded.push(kk.clone());
                shells.push(ShellRecord {
                    k: kk,
                    divisor0: divisor,
                    floor0: floor,
                    a1_min: 0.0,
                    a1_floor: floor,
                    a2_min: 0.0,
                    a2_floor: floor,
                    solved: false,
                    conditioning_warning: false,
                });
            }
            Err(e) => return Err((e, Generator { series: f, shells })),
        }
    }
    let gen = Generator { series: f, shells };
    if excluded.is_empty() {
        Ok(gen)
    } else {
        Err((EngineError::PartialAssembly { excluded }, gen))
    }
}

/// Weighted norm of the assembled homological residual
/// `{N, F} + eps (R - [R])` with N rebuilt from the frequency data.
pub fn homological_residual(
    freq: &FrequencyData,
    lambda: &[f64],
    f_gen: &TFSeries,
    r: &TFSeries,
    eps: f64,
    dom: &AnalyticDomain,
) -> Result<f64> {
    let dims = freq.dims;
    let dc = f_gen.degree_cap().max(r.degree_cap()) + 2;
    let fc = f_gen.fourier_cap().max(r.fourier_cap()) * 2;
    let widen = |s: &TFSeries| -> TFSeries {
        let mut w = TFSeries::new(dims, dc, fc);
        for (i, c) in s.terms() {
            w.add_param_term(i.clone(), c.clone()).expect("widened caps");
        }
        w
    };
    let omega = freq.omega(lambda);
    let omega_slice: Vec<f64> = omega.iter().copied().collect();
    let n_series = build::linear_in_y(dims, dc, fc, &omega_slice)
        .add(&build::quadratic_form(dims, dc, fc, &freq.m_full(lambda)))?
        .add(&widen(&freq.h))?;
    let bracket = n_series.poisson_bracket(&widen(f_gen))?;
    let oscillating = widen(r).sub(&widen(&r.average()))?;
    let residual = bracket.add(&oscillating.scale(C64::new(eps, 0.0)))?;
    Ok(residual.weighted_norm(dom, 0))
}

fn grad_h(freq: &FrequencyData, u: &DVector<f64>) -> DVector<f64> {
    let dims = freq.dims;
    let d = dims.yz_dim();
    let x0 = vec![0.0; dims.n];
    let y: Vec<C64> = (0..dims.n).map(|i| C64::new(u[i], 0.0)).collect();
    let z: Vec<C64> = (0..dims.z_dim())
        .map(|i| C64::new(u[dims.n + i], 0.0))
        .collect();
    let mut g = DVector::zeros(d);
    for a in 0..dims.n {
        g[a] = freq.h.deriv_y(a).eval(&x0, &y, &z).re;
    }
    for c in 0..dims.z_dim() {
        g[dims.n + c] = freq.h.deriv_z(c).eval(&x0, &y, &z).re;
    }
    g
}

fn hess_h(freq: &FrequencyData, u: &DVector<f64>) -> DMatrix<f64> {
    let dims = freq.dims;
    let d = dims.yz_dim();
    let x0 = vec![0.0; dims.n];
    let yv: Vec<f64> = (0..dims.n).map(|i| u[i]).collect();
    let zv: Vec<f64> = (0..dims.z_dim()).map(|i| u[dims.n + i]).collect();
    let (h1, h2) = freq.h_gradient_blocks(&yv, &zv);
    let yc: Vec<C64> = yv.iter().map(|&v| C64::new(v, 0.0)).collect();
    let zc: Vec<C64> = zv.iter().map(|&v| C64::new(v, 0.0)).collect();
    let mut hh = DMatrix::zeros(d, d);
    for a in 0..dims.n {
        let da = freq.h.deriv_y(a);
        for b in 0..dims.n {
            hh[(a, b)] = da.deriv_y(b).eval(&x0, &yc, &zc).re;
        }
    }
    for c in 0..dims.z_dim() {
        for a in 0..dims.n {
            hh[(dims.n + c, a)] = h1[(c, a)];
            hh[(a, dims.n + c)] = h1[(c, a)];
        }
        for b in 0..dims.z_dim() {
            hh[(dims.n + c, dims.n + b)] = h2[(c, b)];
        }
    }
    hh
}

/// Solve the frequency-drift translation
/// `M (y0, z0) + grad h (y0, z0) = -eps (p010, p001)` by damped Newton from
/// zero. Requires the (C1) floor `M^T M >= (min mu)^2 I`.
pub fn solve_translation(
    freq: &FrequencyData,
    lambda: &[f64],
    p010: &DVector<f64>,
    p001: &DVector<f64>,
    eps: f64,
) -> Result<TranslationShift> {
    let dims = freq.dims;
    let d = dims.yz_dim();
    let m = freq.m_full(lambda);
    let mtm = m.transpose() * &m;
    let lam_min = mtm
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let floor = freq.scales.min_mu().powi(2);
    if lam_min < floor * (1.0 - 1e-12) {
        return Err(EngineError::FloorViolation {
            which: "C1".into(),
            lambda_min: lam_min,
            floor,
        });
    }
    let mut rhs = DVector::zeros(d);
    for i in 0..dims.n {
        rhs[i] = -eps * p010[i];
    }
    for i in 0..dims.z_dim() {
        rhs[dims.n + i] = -eps * p001[i];
    }
    let residual_of = |u: &DVector<f64>| -> DVector<f64> { &m * u + grad_h(freq, u) - &rhs };
    let mut u = DVector::zeros(d);
    let mut res = residual_of(&u);
    let target = 1e-12 * rhs.norm().max(1.0);
    let mut iters = 0usize;
    while res.norm() > target {
        if iters >= 50 {
            return Err(EngineError::NewtonDiverged {
                residual: res.norm(),
                iters,
            });
        }
        let jac = &m + hess_h(freq, &u);
        let step = jac
            .lu()
            .solve(&res)
            .ok_or_else(|| EngineError::Numeric("translation Jacobian singular".into()))?;
        // damped acceptance: halve until the residual decreases
        let mut sigma = 1.0f64;
        loop {
            let cand = &u - &step * sigma;
            let cres = residual_of(&cand);
            if cres.norm() < res.norm() || sigma < 1e-8 {
                u = cand;
                res = cres;
                break;
            }
            sigma *= 0.5;
        }
        iters += 1;
    }
    Ok(TranslationShift {
        y0: u.rows(0, dims.n).into(),
        z0: u.rows(dims.n, dims.z_dim()).into(),
        t: None,
        residual: res.norm(),
        newton_iters: iters,
    })
}

/// Solve the isoenergetic translation: shift plus multiplier `t` making the
/// transformed frequency proportional to the original on the energy
/// surface. Requires the bordered floor (C2).
pub fn solve_isoenergetic_translation(
    freq: &FrequencyData,
    lambda: &[f64],
    p000: f64,
    p010: &DVector<f64>,
    p001: &DVector<f64>,
    eps: f64,
) -> Result<TranslationShift> {
    let dims = freq.dims;
    let d = dims.yz_dim();
    let m = freq.m_full(lambda);
    let omega = freq.omega(lambda);

    // bordered floor (C2)
    let mut bord = DMatrix::zeros(d + 1, d + 1);
    for r in 0..d {
        for c in 0..d {
            bord[(r, c)] = m[(r, c)];
        }
    }
    for i in 0..dims.n {
        bord[(i, d)] = omega[i];
        bord[(d, i)] = omega[i];
    }
    let btb = bord.transpose() * &bord;
    let lam_min = btb
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let floor = freq.scales.min_all().powi(2);
    if lam_min < floor * (1.0 - 1e-12) {
        return Err(EngineError::FloorViolation {
            which: "C2".into(),
            lambda_min: lam_min,
            floor,
        });
    }

    let x0 = vec![0.0; dims.n];
    let h_at = |u: &DVector<f64>| -> f64 {
        let y: Vec<C64> = (0..dims.n).map(|i| C64::new(u[i], 0.0)).collect();
        let z: Vec<C64> = (0..dims.z_dim())
            .map(|i| C64::new(u[dims.n + i], 0.0))
            .collect();
        freq.h.eval(&x0, &y, &z).re
    };
    let mut drift = DVector::zeros(d);
    for i in 0..dims.n {
        drift[i] = eps * p010[i];
    }
    for i in 0..dims.z_dim() {
        drift[dims.n + i] = eps * p001[i];
    }
    let mut omega_ext = DVector::zeros(d);
    for i in 0..dims.n {
        omega_ext[i] = omega[i];
    }
    let lin_form = &omega_ext + &drift;

    // unknowns v = (u, t): the vector line and the energy line
    let residual_of = |v: &DVector<f64>| -> DVector<f64> {
        let u: DVector<f64> = v.rows(0, d).into();
        let t = v[d];
        let mut r = DVector::zeros(d + 1);
        let vec_eq = &m * &u + grad_h(freq, &u) + &drift + &omega_ext * t;
        for i in 0..d {
            r[i] = vec_eq[i];
        }
        r[d] = 0.5 * (u.transpose() * &m * &u)[(0, 0)] + lin_form.dot(&u) + eps * p000 + h_at(&u);
        r
    };
    let mut v = DVector::zeros(d + 1);
    let mut res = residual_of(&v);
    let target = 1e-11 * (drift.norm() + eps * p000.abs()).max(1e-300);
    let mut iters = 0usize;
    while res.norm() > target {
        if iters >= 50 {
            return Err(EngineError::NewtonDiverged {
                residual: res.norm(),
                iters,
            });
        }
        let u: DVector<f64> = v.rows(0, d).into();
        let mut jac = DMatrix::zeros(d + 1, d + 1);
        let mj = &m + hess_h(freq, &u);
        for r in 0..d {
            for c in 0..d {
                jac[(r, c)] = mj[(r, c)];
            }
            jac[(r, d)] = omega_ext[r];
        }
        let ge = &m * &u + &lin_form + grad_h(freq, &u);
        for c in 0..d {
            jac[(d, c)] = ge[c];
        }
        let step = jac
            .lu()
            .solve(&res)
            .ok_or_else(|| EngineError::Numeric("bordered Jacobian singular".into()))?;
        let mut sigma = 1.0f64;
        loop {
            let cand = &v - &step * sigma;
            let cres = residual_of(&cand);
            if cres.norm() < res.norm() || sigma < 1e-8 {
                v = cand;
                res = cres;
                break;
            }
            sigma *= 0.5;
        }
        iters += 1;
    }
    Ok(TranslationShift {
        y0: v.rows(0, dims.n).into(),
        z0: v.rows(dims.n, dims.z_dim()).into(),
        t: Some(v[d]),
        residual: res.norm(),
        newton_iters: iters,
    })
}
