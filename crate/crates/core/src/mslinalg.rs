//! Small-divisor operators and their multi-scale eigenvalue floors.
//!
//! Builds the scalar, first-order and second-order divisor operators of the
//! homological equations, the perturbed full operator with the jet terms,
//! and the Hermitian floor machinery (dense eigensolves, Weyl perturbation
//! transfer, multi-scale lower bounds). Everything here is pure
//! construction over tiny dense matrices; correctness over speed.

use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::error::{EngineError, Result};
use crate::tfseries::{Dims, TFSeries, C64};

/// The small scales of the system: base scale and the tangent/normal scale
/// vectors. All must sit below the configured ceiling (default 0.1); presets
/// with order-one blocks may widen it explicitly.
#[derive(Clone, Debug)]
pub struct ScaleSet {
    pub eps: f64,
    pub eps_vec: Vec<f64>,
    pub mu_vec: Vec<f64>,
    pub ceiling: f64,
}

impl ScaleSet {
    pub fn new(eps: f64, eps_vec: Vec<f64>, mu_vec: Vec<f64>) -> Result<Self> {
        Self::with_ceiling(eps, eps_vec, mu_vec, 0.1)
    }

    pub fn with_ceiling(
        eps: f64,
        eps_vec: Vec<f64>,
        mu_vec: Vec<f64>,
        ceiling: f64,
    ) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(EngineError::Domain(format!(
                "base scale must be positive, got {eps}"
            )));
        }
        for &v in eps_vec.iter().chain(mu_vec.iter()) {
            if !(v >= eps) {
                return Err(EngineError::Domain(format!(
                    "scale {v} below the base scale {eps}"
                )));
            }
            if !(v <= ceiling) {
                return Err(EngineError::Domain(format!(
                    "scale {v} above the ceiling {ceiling}"
                )));
            }
        }
        Ok(ScaleSet {
            eps,
            eps_vec,
            mu_vec,
            ceiling,
        })
    }

    /// min over the tangent scales.
    pub fn min_eps(&self) -> f64 {
        self.eps_vec.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// min over the normal scales (infinity when m = 0).
    pub fn min_mu(&self) -> f64 {
        self.mu_vec.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// min over all scales (tangent and normal).
    pub fn min_all(&self) -> f64 {
        self.min_eps().min(self.min_mu())
    }
}

/// Divisor floors for one shell: (scalar, first-order, second-order).
pub fn divisor_floors(scales: &ScaleSet, gamma: f64, tau: f64, k_l1: i64) -> (f64, f64, f64) {
    let kt = (k_l1 as f64).powf(tau);
    let f0 = scales.min_eps() * gamma / kt;
    let f12 = scales.min_all() * gamma / kt;
    (f0, f12, f12)
}

/// A lambda-dependent vector with optional closed-form derivatives.
/// Missing derivatives fall back to nested central finite differences.
#[derive(Clone)]
pub struct ParamVec {
    pub dim: usize,
    eval: Rc<dyn Fn(&[f64]) -> DVector<f64>>,
    deriv: Option<Rc<dyn Fn(&[f64], &[u32]) -> DVector<f64>>>,
}

/// A lambda-dependent matrix with optional closed-form derivatives.
#[derive(Clone)]
pub struct ParamMat {
    pub rows: usize,
    pub cols: usize,
    eval: Rc<dyn Fn(&[f64]) -> DMatrix<f64>>,
    deriv: Option<Rc<dyn Fn(&[f64], &[u32]) -> DMatrix<f64>>>,
}

const FD_STEP: f64 = 1e-4;

fn fd_vec(f: &Rc<dyn Fn(&[f64]) -> DVector<f64>>, lambda: &[f64], alpha: &[u32]) -> DVector<f64> {
    // peel one derivative at a time: central difference in the first active axis
    match alpha.iter().position(|&a| a > 0) {
        None => (f)(lambda),
        Some(axis) => {
            let mut lo = lambda.to_vec();
            let mut hi = lambda.to_vec();
            lo[axis] -= FD_STEP;
            hi[axis] += FD_STEP;
            let mut sub = alpha.to_vec();
            sub[axis] -= 1;
            (fd_vec(f, &hi, &sub) - fd_vec(f, &lo, &sub)) / (2.0 * FD_STEP)
        }
    }
}

fn fd_mat(f: &Rc<dyn Fn(&[f64]) -> DMatrix<f64>>, lambda: &[f64], alpha: &[u32]) -> DMatrix<f64> {
    match alpha.iter().position(|&a| a > 0) {
        None => (f)(lambda),
        Some(axis) => {
            let mut lo = lambda.to_vec();
            let mut hi = lambda.to_vec();
            lo[axis] -= FD_STEP;
            hi[axis] += FD_STEP;
            let mut sub = alpha.to_vec();
            sub[axis] -= 1;
            (fd_mat(f, &hi, &sub) - fd_mat(f, &lo, &sub)) / (2.0 * FD_STEP)
        }
    }
}

impl ParamVec {
    pub fn from_fn(dim: usize, f: impl Fn(&[f64]) -> DVector<f64> + 'static) -> Self {
        ParamVec {
            dim,
            eval: Rc::new(f),
            deriv: None,
        }
    }

    pub fn with_deriv(mut self, d: impl Fn(&[f64], &[u32]) -> DVector<f64> + 'static) -> Self {
        self.deriv = Some(Rc::new(d));
        self
    }

    pub fn constant(v: DVector<f64>) -> Self {
        let dim = v.len();
        let v2 = v.clone();
        ParamVec {
            dim,
            eval: Rc::new(move |_| v.clone()),
            deriv: Some(Rc::new(move |_, alpha: &[u32]| {
                if alpha.iter().all(|&a| a == 0) {
                    v2.clone()
                } else {
                    DVector::zeros(v2.len())
                }
            })),
        }
    }

    /// The identity map omega(lambda) = lambda.
    pub fn identity(dim: usize) -> Self {
        ParamVec {
            dim,
            eval: Rc::new(move |l: &[f64]| DVector::from_column_slice(l)),
            deriv: Some(Rc::new(move |l: &[f64], alpha: &[u32]| {
                let total: u32 = alpha.iter().sum();
                match total {
                    0 => DVector::from_column_slice(l),
                    1 => {
                        let axis = alpha.iter().position(|&a| a > 0).unwrap();
                        let mut v = DVector::zeros(l.len());
                        v[axis] = 1.0;
                        v
                    }
                    _ => DVector::zeros(l.len()),
                }
            })),
        }
    }

    pub fn at(&self, lambda: &[f64]) -> DVector<f64> {
        (self.eval)(lambda)
    }

    pub fn deriv_at(&self, lambda: &[f64], alpha: &[u32]) -> DVector<f64> {
        match &self.deriv {
            Some(d) => (d)(lambda, alpha),
            None => fd_vec(&self.eval, lambda, alpha),
        }
    }

    pub fn has_closed_deriv(&self) -> bool {
        self.deriv.is_some()
    }
}

impl ParamMat {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(&[f64]) -> DMatrix<f64> + 'static) -> Self {
        ParamMat {
            rows,
            cols,
            eval: Rc::new(f),
            deriv: None,
        }
    }

    pub fn with_deriv(mut self, d: impl Fn(&[f64], &[u32]) -> DMatrix<f64> + 'static) -> Self {
        self.deriv = Some(Rc::new(d));
        self
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        let (rows, cols) = (m.nrows(), m.ncols());
        let m2 = m.clone();
        ParamMat {
            rows,
            cols,
            eval: Rc::new(move |_| m.clone()),
            deriv: Some(Rc::new(move |_, alpha: &[u32]| {
                if alpha.iter().all(|&a| a == 0) {
                    m2.clone()
                } else {
                    DMatrix::zeros(m2.nrows(), m2.ncols())
                }
            })),
        }
    }

    pub fn at(&self, lambda: &[f64]) -> DMatrix<f64> {
        (self.eval)(lambda)
    }

    pub fn deriv_at(&self, lambda: &[f64], alpha: &[u32]) -> DMatrix<f64> {
        match &self.deriv {
            Some(d) => (d)(lambda, alpha),
            None => fd_mat(&self.eval, lambda, alpha),
        }
    }
}

/// Frequency and normal-matrix data of a normal form: the multi-scale sums
/// `omega = sum eps_i omega_i(lambda)`, `M = sum mu_j M_j(lambda)` and the
/// cubic-and-higher jet `h` (Fourier mode 0 only).
#[derive(Clone)]
pub struct FrequencyData {
    pub dims: Dims,
    pub scales: ScaleSet,
    /// (eps_i, omega_i(lambda)); the scale factor multiplies the part.
    pub omega_parts: Vec<(f64, ParamVec)>,
    /// (mu_j, M_j(lambda)), each an (n+2m) symmetric matrix.
    pub m_parts: Vec<(f64, ParamMat)>,
    /// Cubic-and-higher jet: k = 0 only, degree >= 3.
    pub h: TFSeries,
}

impl FrequencyData {
    pub fn new(
        dims: Dims,
        scales: ScaleSet,
        omega_parts: Vec<(f64, ParamVec)>,
        m_parts: Vec<(f64, ParamMat)>,
        h: TFSeries,
    ) -> Result<Self> {
        let d = dims.yz_dim();
        for (_, p) in &omega_parts {
            if p.dim != dims.n {
                return Err(EngineError::Dimension("omega part dimension".into()));
            }
        }
        for (_, p) in &m_parts {
            if p.rows != d || p.cols != d {
                return Err(EngineError::Dimension("M part shape".into()));
            }
        }
        for (idx, _) in h.terms() {
            if idx.k_sup() != 0 || idx.degree() < 3 {
                return Err(EngineError::Domain(
                    "h must have Fourier mode 0 and degree >= 3 only".into(),
                ));
            }
        }
        Ok(FrequencyData {
            dims,
            scales,
            omega_parts,
            m_parts,
            h,
        })
    }

    pub fn omega(&self, lambda: &[f64]) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dims.n);
        for (s, p) in &self.omega_parts {
            acc += p.at(lambda) * *s;
        }
        acc
    }

    pub fn omega_deriv(&self, lambda: &[f64], alpha: &[u32]) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dims.n);
        for (s, p) in &self.omega_parts {
            acc += p.deriv_at(lambda, alpha) * *s;
        }
        acc
    }

    /// Full symmetric (n+2m) matrix M(lambda); the parts are symmetrized so
    /// M12 = M21^T holds structurally.
    pub fn m_full(&self, lambda: &[f64]) -> DMatrix<f64> {
        let d = self.dims.yz_dim();
        let mut acc = DMatrix::zeros(d, d);
        for (s, p) in &self.m_parts {
            let m = p.at(lambda);
            acc += (&m + m.transpose()) * (0.5 * *s);
        }
        acc
    }

    pub fn m_deriv(&self, lambda: &[f64], alpha: &[u32]) -> DMatrix<f64> {
        let d = self.dims.yz_dim();
        let mut acc = DMatrix::zeros(d, d);
        for (s, p) in &self.m_parts {
            let m = p.deriv_at(lambda, alpha);
            acc += (&m + m.transpose()) * (0.5 * *s);
        }
        acc
    }

    pub fn m11(&self, lambda: &[f64]) -> DMatrix<f64> {
        let n = self.dims.n;
        self.m_full(lambda).view((0, 0), (n, n)).into()
    }

    pub fn m12(&self, lambda: &[f64]) -> DMatrix<f64> {
        let n = self.dims.n;
        let z = self.dims.z_dim();
        self.m_full(lambda).view((0, n), (n, z)).into()
    }

    pub fn m21(&self, lambda: &[f64]) -> DMatrix<f64> {
        let n = self.dims.n;
        let z = self.dims.z_dim();
        self.m_full(lambda).view((n, 0), (z, n)).into()
    }

    pub fn m22(&self, lambda: &[f64]) -> DMatrix<f64> {
        let n = self.dims.n;
        let z = self.dims.z_dim();
        self.m_full(lambda).view((n, n), (z, z)).into()
    }

    /// Gradient shift Delta(y, z) = M11 y + M12 z + d_y h at a real jet point.
    pub fn delta(&self, lambda: &[f64], y: &[f64], z: &[f64]) -> DVector<f64> {
        let n = self.dims.n;
        let x0 = vec![0.0; n];
        let yv = DVector::from_column_slice(y);
        let zv = DVector::from_column_slice(z);
        let mut acc = self.m11(lambda) * yv + self.m12(lambda) * zv;
        let yc: Vec<C64> = y.iter().map(|&v| C64::new(v, 0.0)).collect();
        let zc: Vec<C64> = z.iter().map(|&v| C64::new(v, 0.0)).collect();
        for a in 0..n {
            acc[a] += self.h.deriv_y(a).eval(&x0, &yc, &zc).re;
        }
        acc
    }

    /// Linearization of d_z h at the jet point: (h1, h2) with
    /// d_z h(y0 + y, z0 + z) ~ d_z h(y0, z0) + h1 y + h2 z. Both vanish at
    /// the origin for a cubic-and-higher jet.
    pub fn h_gradient_blocks(&self, y0: &[f64], z0: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.dims.n;
        let zdim = self.dims.z_dim();
        let x0 = vec![0.0; n];
        let yc: Vec<C64> = y0.iter().map(|&v| C64::new(v, 0.0)).collect();
        let zc: Vec<C64> = z0.iter().map(|&v| C64::new(v, 0.0)).collect();
        let mut h1 = DMatrix::zeros(zdim, n);
        let mut h2 = DMatrix::zeros(zdim, zdim);
        for c in 0..zdim {
            let dz = self.h.deriv_z(c);
            for a in 0..n {
                h1[(c, a)] = dz.deriv_y(a).eval(&x0, &yc, &zc).re;
            }
            for b in 0..zdim {
                h2[(c, b)] = dz.deriv_z(b).eval(&x0, &yc, &zc).re;
            }
        }
        (h1, h2)
    }
}

/// The 2m x 2m standard symplectic matrix J = [[0, I_m], [-I_m, 0]].
pub fn j_matrix(m: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        j[(i, i + m)] = 1.0;
        j[(i + m, i)] = -1.0;
    }
    j
}

/// J embedded in the full (y, z) block: zero on y, symplectic on z.
pub fn j_embedded(n: usize, m: usize) -> DMatrix<f64> {
    let d = n + 2 * m;
    let mut jt = DMatrix::zeros(d, d);
    let j = j_matrix(m);
    for r in 0..2 * m {
        for c in 0..2 * m {
            jt[(n + r, n + c)] = j[(r, c)];
        }
    }
    jt
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

fn cident(d: usize) -> DMatrix<C64> {
    DMatrix::identity(d, d)
}

/// Eigenvalues of a complex matrix via its Schur form diagonal.
pub fn complex_matrix_eigenvalues(m: &DMatrix<C64>) -> Vec<C64> {
    let t = m.clone().schur().unpack().1;
    (0..t.nrows()).map(|i| t[(i, i)]).collect()
}

/// All divisor operators for one shell `k` at one parameter point, with the
/// perturbed full operator frozen at a jet point.
#[derive(Clone, Debug)]
pub struct DivisorOperators {
    pub k: Vec<i64>,
    /// i<k, omega>.
    pub lk0: C64,
    /// i<k, omega> I_{2m} - M22 J.
    pub lk1: DMatrix<C64>,
    /// i<k, omega> I_{4m^2} - (M22 J) (x) I_{2m} - I_{2m} (x) (M22 J).
    pub lk2: DMatrix<C64>,
    /// First-order block operator on (n + 2m).
    pub a1: DMatrix<C64>,
    /// Second-order block operator on n^2 + 2mn + 4m^2.
    pub a2: DMatrix<C64>,
    /// a2 with the jet terms: shifted diagonal (varpi) and h-gradient
    /// couplings.
    pub a_full: DMatrix<C64>,
    /// i<k, Delta(jet point)>.
    pub varpi: C64,
}

/// Assemble all operators for shell `k` at `lambda`; `jet_point = None`
/// freezes the jet at the origin where Delta and the h-gradients vanish.
pub fn build_operators(
    freq: &FrequencyData,
    k: &[i64],
    lambda: &[f64],
    jet_point: Option<(&[f64], &[f64])>,
) -> Result<DivisorOperators> {
    let n = freq.dims.n;
    let m = freq.dims.m;
    let zdim = 2 * m;
    if k.len() != n {
        return Err(EngineError::Dimension(format!(
            "shell index has length {}, expected {}",
            k.len(),
            n
        )));
    }
    let omega = freq.omega(lambda);
    let kw: f64 = k
        .iter()
        .zip(omega.iter())
        .map(|(&ki, &wi)| ki as f64 * wi)
        .sum();
    let lk0 = C64::new(0.0, kw);

    let m22 = to_complex(&freq.m22(lambda));
    let m21 = freq.m21(lambda);
    let j = to_complex(&j_matrix(m));
    let m22j = &m22 * &j;

    let lk1 = cident(zdim) * lk0 - &m22j;
    let lk2 = cident(4 * m * m) * lk0 - m22j.kronecker(&cident(zdim))
        - cident(zdim).kronecker(&m22j);

    // coupling block (M21)^T J, n x 2m
    let m21tj = to_complex(&m21.transpose()) * &j;

    // A1 = [[lk0 I_n, -(M21)^T J], [0, lk1]]
    let d1 = n + zdim;
    let mut a1 = DMatrix::<C64>::zeros(d1, d1);
    for i in 0..n {
        a1[(i, i)] = lk0;
    }
    for r in 0..n {
        for c in 0..zdim {
            a1[(r, n + c)] = -m21tj[(r, c)];
        }
    }
    for r in 0..zdim {
        for c in 0..zdim {
            a1[(n + r, n + c)] = lk1[(r, c)];
        }
    }

    // A2 blocks: sizes [n^2, 2mn, 4m^2]
    let s0 = n * n;
    let s1 = zdim * n;
    let s2 = 4 * m * m;
    let d2 = s0 + s1 + s2;
    let mut a2 = DMatrix::<C64>::zeros(d2, d2);
    let blk00 = cident(n) * lk0;
    put_block(&mut a2, 0, 0, &cident(n).kronecker(&blk00));
    if m > 0 {
        put_block(&mut a2, 0, s0, &cident(n).kronecker(&m21tj));
        put_block(&mut a2, s0, s0, &cident(n).kronecker(&lk1));
        put_block(
            &mut a2,
            s0,
            s0 + s1,
            &(m21tj.kronecker(&cident(zdim)) * C64::new(-1.0, 0.0)),
        );
        put_block(&mut a2, s0 + s1, s0 + s1, &lk2);
    }

    // perturbed operator: varpi from the jet point, plus h-gradient blocks
    let (varpi, h1, h2) = match jet_point {
        None => (
            C64::new(0.0, 0.0),
            DMatrix::zeros(zdim, n),
            DMatrix::zeros(zdim, zdim),
        ),
        Some((y0, z0)) => {
            if y0.len() != n || z0.len() != zdim {
                return Err(EngineError::Dimension("jet point lengths".into()));
            }
            let delta = freq.delta(lambda, y0, z0);
            let kd: f64 = k
                .iter()
                .zip(delta.iter())
                .map(|(&ki, &di)| ki as f64 * di)
                .sum();
            let (h1, h2) = freq.h_gradient_blocks(y0, z0);
            (C64::new(0.0, kd), h1, h2)
        }
    };

    // jet coupling ((M21 + h1))^T J: reduces to (M21)^T J at the origin
    let coup = to_complex(&(&m21 + &h1).transpose()) * &j;
    let h2j = to_complex(&h2) * &j;
    let lk1_pert = &lk1 + cident(zdim) * varpi - &h2j;
    let a33 = &lk2 + cident(s2) * varpi
        - h2j.kronecker(&cident(zdim))
        - cident(zdim).kronecker(&h2j);

    let mut a_full = DMatrix::<C64>::zeros(d2, d2);
    let blk00p = cident(n) * (lk0 + varpi);
    put_block(&mut a_full, 0, 0, &cident(n).kronecker(&blk00p));
    if m > 0 {
        put_block(&mut a_full, 0, s0, &cident(n).kronecker(&coup));
        put_block(&mut a_full, s0, s0, &cident(n).kronecker(&lk1_pert));
        put_block(
            &mut a_full,
            s0,
            s0 + s1,
            &(coup.kronecker(&cident(zdim)) * C64::new(-1.0, 0.0)),
        );
        put_block(&mut a_full, s0 + s1, s0 + s1, &a33);
    }

    return Ok(DivisorOperators {
        k: k.to_vec(),
        lk0,
        lk1,
        lk2,
        a1,
        a2,
        a_full,
        varpi,
    });

    fn put_block(dst: &mut DMatrix<C64>, r0: usize, c0: usize, src: &DMatrix<C64>) {
        for r in 0..src.nrows() {
            for c in 0..src.ncols() {
                dst[(r0 + r, c0 + c)] = src[(r, c)];
            }
        }
    }
}

/// Smallest eigenvalue of the Hermitian form A* A, and whether it clears
/// `floor^2`. Comparison carries a 1e-12 relative slack: floors are checked
/// in floating point, not interval arithmetic.
pub fn hermitian_floor(aop: &DMatrix<C64>, floor: f64) -> Result<(bool, f64)> {
    if aop.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(EngineError::Numeric("non-finite entries in operator".into()));
    }
    if aop.nrows() != aop.ncols() {
        return Err(EngineError::Dimension("operator must be square".into()));
    }
    let h = aop.adjoint() * aop;
    let eig = h.symmetric_eigen();
    let lambda_min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let target = floor * floor;
    let holds = lambda_min >= target * (1.0 - 1e-12);
    Ok((holds, lambda_min))
}

/// Outcome of the Weyl perturbation transfer between a base operator and
/// its jet-perturbed version.
#[derive(Clone, Copy, Debug)]
pub struct WeylReport {
    /// lambda_min(base*base + H) >= lambda_min(base*base) + lambda_min(H)
    /// within 1e-12 of scale, for the Hermitian difference H.
    pub inequality_ok: bool,
    /// The perturbed operator keeps half the unperturbed floor (vacuously
    /// true when the premise ||H||_inf <= s <= base/2 does not apply).
    pub half_floor_ok: bool,
    pub base_min: f64,
    pub pert_min: f64,
    pub h_min: f64,
    /// sup-norm of the Hermitian difference (the lemma bounds it by |k| s).
    pub h_sup: f64,
}

impl WeylReport {
    pub fn ok(&self) -> bool {
        self.inequality_ok && self.half_floor_ok
    }
}

/// Check the Weyl eigenvalue transfer for the Hermitian difference
/// `H = A_pert* A_pert - A_base* A_base`; `s` is the premise bound on
/// `||H||_inf` (the |k| factor folded in by the caller).
pub fn weyl_perturbation_check(
    a_base: &DMatrix<C64>,
    a_pert: &DMatrix<C64>,
    s: f64,
) -> Result<WeylReport> {
    if a_base.shape() != a_pert.shape() {
        return Err(EngineError::Dimension("operator shapes differ".into()));
    }
    let hb = a_base.adjoint() * a_base;
    let hp = a_pert.adjoint() * a_pert;
    let diff = &hp - &hb;
    let min_of = |h: &DMatrix<C64>| -> f64 {
        h.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    };
    let base_min = min_of(&hb);
    let pert_min = min_of(&hp);
    let h_min = min_of(&diff);
    let h_sup = diff.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let scale = base_min.abs().max(pert_min.abs()).max(h_min.abs()).max(1.0);
    let inequality_ok = pert_min >= base_min + h_min - 1e-12 * scale;
    let premise = h_sup <= s * (1.0 + 1e-12) && s <= 0.5 * base_min * (1.0 + 1e-12);
    let half_floor_ok = !premise || pert_min >= 0.5 * base_min * (1.0 - 1e-12);
    Ok(WeylReport {
        inequality_ok,
        half_floor_ok,
        base_min,
        pert_min,
        h_min,
        h_sup,
    })
}

/// Certified lower bound for lambda_min(A A*) with A = sum scale_j parts_j.
///
/// Every eigenvalue of the normal matrix cI lies within the Frobenius norm
/// of E = A A* - cI of some eigenvalue of A A*, so with the scalar shift
/// c = tr(A A*)/dim the value c - ||E||_F never exceeds lambda_min; the
/// result is clamped at zero since A A* is positive semidefinite.
pub fn multiscale_eig_lower_bound(parts: &[DMatrix<f64>], scales: &[f64]) -> Result<f64> {
    if parts.is_empty() || parts.len() != scales.len() {
        return Err(EngineError::Dimension(
            "parts and scales must be nonempty and matched".into(),
        ));
    }
    let d = parts[0].nrows();
    let mut a = DMatrix::<f64>::zeros(d, parts[0].ncols());
    for (p, &s) in parts.iter().zip(scales) {
        if p.shape() != parts[0].shape() {
            return Err(EngineError::Dimension("part shapes differ".into()));
        }
        a += p * s;
    }
    if a.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let aat = &a * a.transpose();
    let c = aat.trace() / d as f64;
    let mut e = aat.clone();
    for i in 0..d {
        e[(i, i)] -= c;
    }
    let fro = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((c - fro).max(0.0))
}

/// Verify that the entries of eps^2 D(eps)^{-1} stay bounded along a
/// geometric scale sequence: successive-entry growth ratios must stay below
/// `ratio_bound` (default 10 when None).
pub fn multiscale_inverse_denominator_check(
    d_of_eps: impl Fn(f64) -> DMatrix<f64>,
    eps_seq: &[f64],
    ratio_bound: Option<f64>,
) -> Result<bool> {
    let bound = ratio_bound.unwrap_or(10.0);
    if eps_seq.len() < 2 {
        return Err(EngineError::Domain("need at least two scale samples".into()));
    }
    let mut prev: Option<DMatrix<f64>> = None;
    for &eps in eps_seq {
        let d = d_of_eps(eps);
        let inv = d
            .clone()
            .try_inverse()
            .ok_or_else(|| EngineError::Numeric(format!("matrix singular at scale {eps:.3e}")))?;
        let scaled = inv * (eps * eps);
        if let Some(p) = &prev {
            for (a, b) in p.iter().zip(scaled.iter()) {
                let denom = a.abs().max(1e-300);
                if b.abs() / denom > bound && b.abs() > 1e-12 {
                    return Ok(false);
                }
            }
        }
        prev = Some(scaled);
    }
    Ok(true)
}

/// Dense (n+2m)^2 system matrix of the full-Hessian second-order equation:
/// `i<k,omega> I - I (x) (M Jt) - (M Jt) (x) I` in column-major
/// vectorization. Its spectrum is the union of the lk0, lk1 and lk2
/// divisors, and its one-shot dense solve is the oracle for the
/// back-substitution route.
pub fn quad_system_matrix(lk0: C64, m_full: &DMatrix<f64>, n: usize, m: usize) -> DMatrix<C64> {
    let d = n + 2 * m;
    let mjt = to_complex(&(m_full * j_embedded(n, m)));
    let id = cident(d);
    cident(d * d) * lk0 - id.kronecker(&mjt) - mjt.kronecker(&id)
}

/// Serialize a complex matrix as row-major [re, im] pairs for external
/// auditing.
pub fn matrix_to_json(m: &DMatrix<C64>) -> serde_json::Value {
    let rows: Vec<Vec<[f64; 2]>> = (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect())
        .collect();
    serde_json::json!({ "rows": m.nrows(), "cols": m.ncols(), "data": rows })
}
