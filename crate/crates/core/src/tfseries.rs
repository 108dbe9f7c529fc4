//! Truncated Taylor-Fourier series: the representation every Hamiltonian,
//! generating function and remainder of the engine lives in.
//!
//! A series is a finite sum of monomials
//! `c * y^iy * z^jz * exp(i <k, x>)` with `x` on the n-torus, `y` in R^n,
//! `z` in R^{2m}, and complex coefficients `c` that may carry a jet of
//! lambda-derivatives. Terms are stored in a canonical graded-lexicographic
//! order so iteration, reduction and serialization are deterministic.
//!
//! Norms are majorants: `|P| <= sum |c| e^{|k|_1 r} s^{deg}` bounds the sup
//! norm on the complex strip/polydisc `D(r, s)`, and every cap-violating
//! product term is folded into a scalar overflow ledger so norm bookkeeping
//! stays a true upper bound.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

pub type C64 = Complex64;

/// Tangent/normal dimensions: angles and actions have dim `n`, the normal
/// variable `z` has dim `2m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
}

impl Dims {
    pub fn new(n: usize, m: usize) -> Self {
        Dims { n, m }
    }
    pub fn z_dim(&self) -> usize {
        2 * self.m
    }
    /// Dimension of the combined (y, z) block.
    pub fn yz_dim(&self) -> usize {
        self.n + 2 * self.m
    }
}

/// Exponent record of one monomial: Fourier mode `k`, action powers `iy`,
/// normal powers `jz`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiIndex {
    pub k: Vec<i64>,
    pub iy: Vec<u32>,
    pub jz: Vec<u32>,
}

impl MultiIndex {
    pub fn new(k: Vec<i64>, iy: Vec<u32>, jz: Vec<u32>) -> Self {
        MultiIndex { k, iy, jz }
    }

    pub fn zero(dims: Dims) -> Self {
        MultiIndex {
            k: vec![0; dims.n],
            iy: vec![0; dims.n],
            jz: vec![0; dims.z_dim()],
        }
    }

    /// Sup norm of the Fourier mode (the cap norm).
    pub fn k_sup(&self) -> i64 {
        self.k.iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// l1 norm of the Fourier mode (the norm used by divisor floors and
    /// majorant weights).
    pub fn k_l1(&self) -> i64 {
        self.k.iter().map(|v| v.abs()).sum()
    }

    /// Total Taylor degree |iy| + |jz|.
    pub fn degree(&self) -> u32 {
        self.iy.iter().sum::<u32>() + self.jz.iter().sum::<u32>()
    }

    pub fn negated_k(&self) -> Self {
        MultiIndex {
            k: self.k.iter().map(|v| -v).collect(),
            iy: self.iy.clone(),
            jz: self.jz.clone(),
        }
    }

    fn check_dims(&self, dims: Dims) -> Result<()> {
        if self.k.len() != dims.n || self.iy.len() != dims.n || self.jz.len() != dims.z_dim() {
            return Err(EngineError::Dimension(format!(
                "index shape ({},{},{}) does not match dims (n={}, m={})",
                self.k.len(),
                self.iy.len(),
                self.jz.len(),
                dims.n,
                dims.m
            )));
        }
        Ok(())
    }
}

// Graded lexicographic on (|k|, k, iy, jz): deterministic term order.
impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.k_sup()
            .cmp(&other.k_sup())
            .then_with(|| self.k.cmp(&other.k))
            .then_with(|| self.iy.cmp(&other.iy))
            .then_with(|| self.jz.cmp(&other.jz))
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// All lambda multi-indices with `1 <= |alpha| <= order` over `dim`
/// parameters, in graded-lexicographic order. The jet of a coefficient is
/// stored in this enumeration.
pub fn lambda_multi_indices(dim: usize, order: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 1..=order as u32 {
        let mut idx = vec![0u32; dim];
        fill(&mut out, &mut idx, 0, total);
    }
    return out;

    fn fill(out: &mut Vec<Vec<u32>>, idx: &mut Vec<u32>, pos: usize, remaining: u32) {
        if pos + 1 == idx.len() {
            idx[pos] = remaining;
            out.push(idx.clone());
            idx[pos] = 0;
            return;
        }
        for v in (0..=remaining).rev() {
            idx[pos] = v;
            fill(out, idx, pos + 1, remaining - v);
            idx[pos] = 0;
        }
    }
}

/// Jet of lambda-derivatives attached to a coefficient: `coeffs[i]` is the
/// derivative for `lambda_multi_indices(dim, order)[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaJet {
    pub dim: usize,
    pub order: usize,
    pub coeffs: Vec<C64>,
}

impl LambdaJet {
    pub fn new(dim: usize, order: usize, coeffs: Vec<C64>) -> Result<Self> {
        let want = lambda_multi_indices(dim, order).len();
        if coeffs.len() != want {
            return Err(EngineError::Dimension(format!(
                "jet has {} entries, expected {} for dim {} order {}",
                coeffs.len(),
                want,
                dim,
                order
            )));
        }
        Ok(LambdaJet { dim, order, coeffs })
    }

    pub fn zero(dim: usize, order: usize) -> Self {
        let len = lambda_multi_indices(dim, order).len();
        LambdaJet {
            dim,
            order,
            coeffs: vec![C64::new(0.0, 0.0); len],
        }
    }

    fn position(&self, alpha: &[u32]) -> Option<usize> {
        lambda_multi_indices(self.dim, self.order)
            .iter()
            .position(|a| a == alpha)
    }

    /// Max modulus over derivatives of exact order `l`.
    pub fn sup_at_order(&self, l: usize) -> f64 {
        lambda_multi_indices(self.dim, self.order)
            .iter()
            .zip(&self.coeffs)
            .filter(|(a, _)| a.iter().sum::<u32>() as usize == l)
            .map(|(_, c)| c.norm())
            .fold(0.0, f64::max)
    }
}

/// Coefficient at one parameter node: the value plus an optional jet of
/// lambda-derivatives through the configured order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCoefficient {
    pub value: C64,
    pub jet: Option<LambdaJet>,
}

impl ParamCoefficient {
    pub fn scalar(value: C64) -> Self {
        ParamCoefficient { value, jet: None }
    }

    pub fn with_jet(value: C64, jet: LambdaJet) -> Self {
        ParamCoefficient {
            value,
            jet: Some(jet),
        }
    }

    fn is_zero(&self) -> bool {
        self.value == C64::new(0.0, 0.0) && self.jet.is_none()
    }

    fn add_assign(&mut self, other: &ParamCoefficient) {
        let self_was_exact_zero = self.value == C64::new(0.0, 0.0) && self.jet.is_none();
        self.value += other.value;
        match (&mut self.jet, &other.jet) {
            (Some(a), Some(b)) if a.dim == b.dim && a.order == b.order => {
                for (x, y) in a.coeffs.iter_mut().zip(&b.coeffs) {
                    *x += *y;
                }
            }
            (None, Some(b)) if self_was_exact_zero => {
                // an exact zero has a zero jet: adopt the incoming one
                self.jet = Some(b.clone());
            }
            (Some(_), Some(_)) | (Some(_), None) | (None, Some(_)) => {
                // jets of mismatched shape (or sums with jet-free data)
                // cannot be combined; derivative data is dropped rather
                // than silently wrong
                self.jet = None;
            }
            (None, None) => {}
        }
    }

    /// Scale by a lambda-independent factor: value and jet alike.
    fn scale(&self, f: C64) -> ParamCoefficient {
        ParamCoefficient {
            value: self.value * f,
            jet: self.jet.as_ref().map(|j| LambdaJet {
                dim: j.dim,
                order: j.order,
                coeffs: j.coeffs.iter().map(|c| c * f).collect(),
            }),
        }
    }

    /// Leibniz product of two coefficients (jets truncated to the common
    /// order; absent on shape mismatch).
    fn mul(&self, other: &ParamCoefficient) -> ParamCoefficient {
        let value = self.value * other.value;
        let jet = match (&self.jet, &other.jet) {
            (Some(a), Some(b)) if a.dim == b.dim && a.order == b.order => {
                let indices = lambda_multi_indices(a.dim, a.order);
                let mut coeffs = Vec::with_capacity(indices.len());
                for alpha in &indices {
                    let mut acc = self.value * deriv_of(b, alpha) + deriv_of(a, alpha) * other.value;
                    // strict interior terms 0 < beta < alpha
                    for beta in sub_indices(alpha) {
                        let gamma: Vec<u32> =
                            alpha.iter().zip(&beta).map(|(x, y)| x - y).collect();
                        let coef = multi_binomial(alpha, &beta);
                        acc += coef * deriv_of(a, &beta) * deriv_of(b, &gamma);
                    }
                    coeffs.push(acc);
                }
                Some(LambdaJet {
                    dim: a.dim,
                    order: a.order,
                    coeffs,
                })
            }
            _ => None,
        };
        return ParamCoefficient { value, jet };

        fn deriv_of(j: &LambdaJet, alpha: &[u32]) -> C64 {
            j.position(alpha)
                .map(|p| j.coeffs[p])
                .unwrap_or(C64::new(0.0, 0.0))
        }
        fn sub_indices(alpha: &[u32]) -> Vec<Vec<u32>> {
            // all 0 < beta < alpha componentwise-bounded with |beta| < |alpha|
            let mut out = vec![vec![]];
            for &a in alpha {
                let mut next = Vec::new();
                for prefix in &out {
                    for v in 0..=a {
                        let mut b = prefix.clone();
                        b.push(v);
                        next.push(b);
                    }
                }
                out = next;
            }
            out.retain(|b| {
                let s: u32 = b.iter().sum();
                s > 0 && s < alpha.iter().sum::<u32>()
                    || (s == alpha.iter().sum::<u32>() && b.as_slice() != alpha && s > 0)
            });
            out
        }
        fn multi_binomial(alpha: &[u32], beta: &[u32]) -> f64 {
            alpha
                .iter()
                .zip(beta)
                .map(|(&a, &b)| binomial(a, b))
                .product()
        }
        fn binomial(n: u32, k: u32) -> f64 {
            if k > n {
                return 0.0;
            }
            let mut acc = 1.0f64;
            for i in 0..k {
                acc = acc * (n - i) as f64 / (i + 1) as f64;
            }
            acc
        }
    }
}

/// Parameter box with its Cauchy margin: the closed region and the shrunk
/// region the lambda-derivative estimates live on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Cauchy margin eta; the shrunk box moves every face inward by eta.
    pub margin: f64,
}

impl LambdaBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, margin: f64) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(EngineError::Dimension("lambda box lo/hi length".into()));
        }
        let half_width = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| (b - a) / 2.0)
            .fold(f64::INFINITY, f64::min);
        if !(margin > 0.0) || margin >= half_width {
            return Err(EngineError::Domain(format!(
                "margin {margin} must be positive and below the box half-width {half_width}"
            )));
        }
        Ok(LambdaBox { lo, hi, margin })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }
}

/// Complex domain `D(r, s) = {|Im x| < r, |y| < s, |z| < s}` together with
/// the parameter box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalyticDomain {
    /// Angle strip half-width r.
    pub angle_strip: f64,
    /// Action/normal radius s.
    pub radius: f64,
    pub lambda_box: LambdaBox,
}

impl AnalyticDomain {
    pub fn new(angle_strip: f64, radius: f64, lambda_box: LambdaBox) -> Result<Self> {
        if !(angle_strip > 0.0) || !(radius > 0.0) {
            return Err(EngineError::Domain(format!(
                "domain radii must be positive: r = {angle_strip}, s = {radius}"
            )));
        }
        Ok(AnalyticDomain {
            angle_strip,
            radius,
            lambda_box,
        })
    }

    /// Convenience box for tests and desk runs: unit cube with margin.
    pub fn simple(angle_strip: f64, radius: f64, dim: usize) -> Self {
        AnalyticDomain {
            angle_strip,
            radius,
            lambda_box: LambdaBox {
                lo: vec![-1.0; dim],
                hi: vec![1.0; dim],
                margin: 0.25,
            },
        }
    }
}

/// Mass dropped by cap truncation during products, kept so weighted norms
/// remain upper bounds. Requires s <= 1 at norm time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverflowLedger {
    /// Sum of |coefficient| over dropped terms.
    pub mass: f64,
    /// Largest |k|_1 among dropped terms.
    pub k_max: i64,
    /// Smallest Taylor degree among dropped terms.
    pub deg_min: u32,
}

impl OverflowLedger {
    fn absorb(&mut self, coeff_abs: f64, k_l1: i64, degree: u32) {
        if coeff_abs == 0.0 {
            return;
        }
        if self.mass == 0.0 {
            self.deg_min = degree;
            self.k_max = k_l1;
        } else {
            self.deg_min = self.deg_min.min(degree);
            self.k_max = self.k_max.max(k_l1);
        }
        self.mass += coeff_abs;
    }

    fn merge(&mut self, other: &OverflowLedger) {
        if other.mass == 0.0 {
            return;
        }
        if self.mass == 0.0 {
            *self = *other;
        } else {
            self.mass += other.mass;
            self.k_max = self.k_max.max(other.k_max);
            self.deg_min = self.deg_min.min(other.deg_min);
        }
    }

    /// Majorant weight of the dropped mass on D(r, s); valid bound for s <= 1.
    pub fn weighted(&self, r: f64, s: f64) -> f64 {
        if self.mass == 0.0 {
            return 0.0;
        }
        debug_assert!(s <= 1.0, "overflow weighting requires s <= 1");
        self.mass * (self.k_max as f64 * r).exp() * s.powi(self.deg_min as i32)
    }
}

/// Truncated Taylor-Fourier series with parameter-dependent coefficients.
///
/// Immutable in spirit: all operations return new series, so evaluation is
/// safe to run concurrently across parameter nodes and Fourier shells.
#[derive(Clone, Debug)]
pub struct TFSeries {
    dims: Dims,
    degree_cap: u32,
    fourier_cap: i64,
    terms: BTreeMap<MultiIndex, ParamCoefficient>,
    overflow: OverflowLedger,
}

impl TFSeries {
    pub fn new(dims: Dims, degree_cap: u32, fourier_cap: i64) -> Self {
        TFSeries {
            dims,
            degree_cap,
            fourier_cap,
            terms: BTreeMap::new(),
            overflow: OverflowLedger::default(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn degree_cap(&self) -> u32 {
        self.degree_cap
    }
    pub fn fourier_cap(&self) -> i64 {
        self.fourier_cap
    }
    pub fn overflow(&self) -> OverflowLedger {
        self.overflow
    }
    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty() && self.overflow.mass == 0.0
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, &ParamCoefficient)> {
        self.terms.iter()
    }

    pub fn coeff(&self, idx: &MultiIndex) -> C64 {
        self.terms
            .get(idx)
            .map(|c| c.value)
            .unwrap_or(C64::new(0.0, 0.0))
    }

    /// Insert (accumulate) a term. Cap violations on explicit insertion are
    /// structural errors; only product truncation goes to the overflow ledger.
    pub fn add_term(&mut self, idx: MultiIndex, coeff: C64) -> Result<()> {
        self.add_param_term(idx, ParamCoefficient::scalar(coeff))
    }

    pub fn add_param_term(&mut self, idx: MultiIndex, coeff: ParamCoefficient) -> Result<()> {
        idx.check_dims(self.dims)?;
        if idx.degree() > self.degree_cap || idx.k_sup() > self.fourier_cap {
            return Err(EngineError::Domain(format!(
                "term (|k|={}, deg={}) violates caps (fourier {}, degree {})",
                idx.k_sup(),
                idx.degree(),
                self.fourier_cap,
                self.degree_cap
            )));
        }
        let entry = self
            .terms
            .entry(idx)
            .or_insert_with(|| ParamCoefficient::scalar(C64::new(0.0, 0.0)));
        entry.add_assign(&coeff);
        if entry.is_zero() {
            // keep absent-means-zero exact
        }
        Ok(())
    }

    /// Drop stored terms whose coefficient is exactly zero.
    pub fn prune(&mut self) {
        self.terms.retain(|_, c| !c.is_zero());
    }

    fn check_same_dims(&self, other: &TFSeries) -> Result<()> {
        if self.dims != other.dims {
            return Err(EngineError::Dimension(format!(
                "series dims (n={}, m={}) vs (n={}, m={})",
                self.dims.n, self.dims.m, other.dims.n, other.dims.m
            )));
        }
        Ok(())
    }

    fn merged_caps(&self, other: &TFSeries) -> (u32, i64) {
        (
            self.degree_cap.max(other.degree_cap),
            self.fourier_cap.max(other.fourier_cap),
        )
    }

    pub fn add(&self, other: &TFSeries) -> Result<TFSeries> {
        self.check_same_dims(other)?;
        let (dc, fc) = self.merged_caps(other);
        let mut out = TFSeries::new(self.dims, dc, fc);
        out.overflow = self.overflow;
        out.overflow.merge(&other.overflow);
        for (idx, c) in self.terms.iter().chain(other.terms.iter()) {
            out.add_param_term(idx.clone(), c.clone())?;
        }
        out.prune();
        Ok(out)
    }

    pub fn sub(&self, other: &TFSeries) -> Result<TFSeries> {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, f: C64) -> TFSeries {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c = c.scale(f);
        }
        out.overflow.mass *= f.norm();
        out.prune();
        out
    }

    /// Product with truncation to the merged caps; dropped terms feed the
    /// overflow ledger.
    pub fn mul(&self, other: &TFSeries) -> Result<TFSeries> {
        self.check_same_dims(other)?;
        let (dc, fc) = self.merged_caps(other);
        let mut out = TFSeries::new(self.dims, dc, fc);
        // Overflow of inputs propagates: any prior dropped mass times the
        // other factor's total mass stays a bound. Desk-scale series keep
        // this crude and conservative.
        out.overflow.merge(&self.overflow);
        out.overflow.merge(&other.overflow);
        for (ia, ca) in &self.terms {
            for (ib, cb) in &other.terms {
                let k: Vec<i64> = ia.k.iter().zip(&ib.k).map(|(a, b)| a + b).collect();
                let iy: Vec<u32> = ia.iy.iter().zip(&ib.iy).map(|(a, b)| a + b).collect();
                let jz: Vec<u32> = ia.jz.iter().zip(&ib.jz).map(|(a, b)| a + b).collect();
                let idx = MultiIndex::new(k, iy, jz);
                let c = ca.mul(cb);
                if idx.degree() > dc || idx.k_sup() > fc {
                    out.overflow.absorb(c.value.norm(), idx.k_l1(), idx.degree());
                } else {
                    out.add_param_term(idx, c)?;
                }
            }
        }
        out.prune();
        Ok(out)
    }

    /// d/dx_a: multiplies each term by i * k_a.
    pub fn deriv_x(&self, a: usize) -> TFSeries {
        let mut out = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        out.overflow = self.overflow;
        for (idx, c) in &self.terms {
            let f = C64::new(0.0, idx.k[a] as f64);
            if f.norm() == 0.0 {
                continue;
            }
            out.terms.insert(idx.clone(), c.scale(f));
        }
        out
    }

    /// d/dy_a.
    pub fn deriv_y(&self, a: usize) -> TFSeries {
        let mut out = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        out.overflow = self.overflow;
        for (idx, c) in &self.terms {
            if idx.iy[a] == 0 {
                continue;
            }
            let mut nidx = idx.clone();
            nidx.iy[a] -= 1;
            let f = C64::new(idx.iy[a] as f64, 0.0);
            out.add_param_term(nidx, c.scale(f)).expect("degree shrinks");
        }
        out.prune();
        out
    }

    /// d/dz_c.
    pub fn deriv_z(&self, c_idx: usize) -> TFSeries {
        let mut out = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        out.overflow = self.overflow;
        for (idx, c) in &self.terms {
            if idx.jz[c_idx] == 0 {
                continue;
            }
            let mut nidx = idx.clone();
            nidx.jz[c_idx] -= 1;
            let f = C64::new(idx.jz[c_idx] as f64, 0.0);
            out.add_param_term(nidx, c.scale(f)).expect("degree shrinks");
        }
        out.prune();
        out
    }

    /// Poisson bracket {A, B} = dx A . dy B - dy A . dx B + dz A . J dz B
    /// with the standard symplectic J = [[0, I_m], [-I_m, 0]].
    pub fn poisson_bracket(&self, other: &TFSeries) -> Result<TFSeries> {
        self.check_same_dims(other)?;
        let (dc, fc) = self.merged_caps(other);
        let mut acc = TFSeries::new(self.dims, dc, fc);
        for a in 0..self.dims.n {
            let t1 = self.deriv_x(a).mul(&other.deriv_y(a))?;
            let t2 = self.deriv_y(a).mul(&other.deriv_x(a))?;
            acc = acc.add(&t1)?.sub(&t2)?;
        }
        let m = self.dims.m;
        for c in 0..m {
            let t1 = self.deriv_z(c).mul(&other.deriv_z(c + m))?;
            let t2 = self.deriv_z(c + m).mul(&other.deriv_z(c))?;
            acc = acc.add(&t1)?.sub(&t2)?;
        }
        Ok(acc)
    }

    /// Split into the degree <= 2, |k| <= K_plus truncation and the exact
    /// tail: `self = R + tail`.
    pub fn truncate(&self, k_plus: i64) -> (TFSeries, TFSeries) {
        let mut r = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        let mut tail = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        // Dropped product mass is unresolvable by shell, so it rides with
        // the tail where it keeps remainder norms conservative.
        tail.overflow = self.overflow;
        for (idx, c) in &self.terms {
            if idx.degree() <= 2 && idx.k_sup() <= k_plus {
                r.terms.insert(idx.clone(), c.clone());
            } else {
                tail.terms.insert(idx.clone(), c.clone());
            }
        }
        (r, tail)
    }

    /// Angle average [P]: the k = 0 part. Idempotent.
    pub fn average(&self) -> TFSeries {
        let mut out = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        for (idx, c) in &self.terms {
            if idx.k_sup() == 0 {
                out.terms.insert(idx.clone(), c.clone());
            }
        }
        out
    }

    /// Part with degree exactly `d`.
    pub fn degree_part(&self, d: u32) -> TFSeries {
        let mut out = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        for (idx, c) in &self.terms {
            if idx.degree() == d {
                out.terms.insert(idx.clone(), c.clone());
            }
        }
        out
    }

    /// Part with degree <= `d`.
    pub fn degree_leq(&self, d: u32) -> TFSeries {
        let mut out = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        for (idx, c) in &self.terms {
            if idx.degree() <= d {
                out.terms.insert(idx.clone(), c.clone());
            }
        }
        out
    }

    /// Terms at one Fourier mode `k`.
    pub fn fourier_part(&self, k: &[i64]) -> TFSeries {
        let mut out = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        for (idx, c) in &self.terms {
            if idx.k == k {
                out.terms.insert(idx.clone(), c.clone());
            }
        }
        out
    }

    /// Distinct nonzero Fourier modes present, in canonical order.
    pub fn fourier_modes(&self) -> Vec<Vec<i64>> {
        let mut modes: Vec<Vec<i64>> = Vec::new();
        for idx in self.terms.keys() {
            if idx.k_sup() == 0 {
                continue;
            }
            if modes.last().map(|last| last != &idx.k).unwrap_or(true)
                && !modes.contains(&idx.k)
            {
                modes.push(idx.k.clone());
            }
        }
        modes
    }

    /// Majorant norm: Sigma |c|_{l} e^{|k|_1 r} s^{deg} plus the overflow
    /// weight. For l > 0 the jet sup is used when present; otherwise the
    /// Cauchy bound `norm(0) / eta^l` on the shrunk parameter box.
    pub fn weighted_norm(&self, dom: &AnalyticDomain, l: usize) -> f64 {
        if l == 0 {
            let mut acc = 0.0;
            for (idx, c) in &self.terms {
                acc += c.value.norm()
                    * (idx.k_l1() as f64 * dom.angle_strip).exp()
                    * dom.radius.powi(idx.degree() as i32);
            }
            return acc + self.overflow.weighted(dom.angle_strip, dom.radius);
        }
        let all_jets = !self.terms.is_empty()
            && self
                .terms
                .values()
                .all(|c| c.jet.as_ref().map(|j| j.order >= l).unwrap_or(false));
        if all_jets {
            let mut acc = 0.0;
            for (idx, c) in &self.terms {
                let sup = c.jet.as_ref().unwrap().sup_at_order(l);
                acc += sup
                    * (idx.k_l1() as f64 * dom.angle_strip).exp()
                    * dom.radius.powi(idx.degree() as i32);
            }
            acc + self.overflow.weighted(dom.angle_strip, dom.radius)
        } else {
            self.cauchy_shrink_bound(dom, l).unwrap_or(f64::INFINITY)
        }
    }

    /// Cauchy bound for the order-l lambda-derivative norm on the shrunk
    /// parameter box: `weighted_norm(P, dom, 0) / eta^l`.
    pub fn cauchy_shrink_bound(&self, dom: &AnalyticDomain, l: usize) -> Result<f64> {
        let eta = dom.lambda_box.margin;
        if !(eta > 0.0) {
            return Err(EngineError::Domain(format!(
                "Cauchy margin must be positive, got {eta}"
            )));
        }
        Ok(self.weighted_norm(dom, 0) / eta.powi(l as i32))
    }

    /// Max defect of the reality symmetry `conj c(k) = c(-k)` over stored
    /// terms (missing partners count as zero).
    pub fn reality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (idx, c) in &self.terms {
            let partner = self.coeff(&idx.negated_k());
            worst = worst.max((partner - c.value.conj()).norm());
        }
        worst
    }

    /// Largest coefficient modulus (series scale for tolerance checks).
    pub fn coeff_scale(&self) -> f64 {
        self.terms
            .values()
            .map(|c| c.value.norm())
            .fold(0.0, f64::max)
    }

    /// Evaluate at a real angle point and complex (y, z) points.
    pub fn eval(&self, x: &[f64], y: &[C64], z: &[C64]) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for (idx, c) in &self.terms {
            let phase: f64 = idx.k.iter().zip(x).map(|(&k, &xa)| k as f64 * xa).sum();
            let mut term = c.value * C64::new(0.0, phase).exp();
            for (p, &ya) in idx.iy.iter().zip(y) {
                term *= ya.powi(*p as i32);
            }
            for (p, &zc) in idx.jz.iter().zip(z) {
                term *= zc.powi(*p as i32);
            }
            acc += term;
        }
        acc
    }

    /// Substitute y -> y + y0, z -> z + z0 (binomial re-expansion; degrees
    /// never grow, so no truncation happens).
    pub fn shift_yz(&self, y0: &[C64], z0: &[C64]) -> Result<TFSeries> {
        if y0.len() != self.dims.n || z0.len() != self.dims.z_dim() {
            return Err(EngineError::Dimension("shift vector lengths".into()));
        }
        let mut out = TFSeries::new(self.dims, self.degree_cap, self.fourier_cap);
        out.overflow = self.overflow;
        for (idx, c) in &self.terms {
            // expand prod (y_a + y0_a)^{iy_a} * prod (z_c + z0_c)^{jz_c}
            let mut parts: Vec<(Vec<u32>, Vec<u32>, C64)> =
                vec![(vec![], vec![], C64::new(1.0, 0.0))];
            for (a, &p) in idx.iy.iter().enumerate() {
                let mut next = Vec::new();
                for (py, pz, f) in &parts {
                    for j in 0..=p {
                        let mut py2 = py.clone();
                        py2.push(j);
                        let b = binom(p, j) * y0[a].powi((p - j) as i32);
                        next.push((py2, pz.clone(), f * b));
                    }
                }
                parts = next;
            }
            for (cc, &p) in idx.jz.iter().enumerate() {
                let mut next = Vec::new();
                for (py, pz, f) in &parts {
                    for j in 0..=p {
                        let mut pz2 = pz.clone();
                        pz2.push(j);
                        let b = binom(p, j) * z0[cc].powi((p - j) as i32);
                        next.push((py.clone(), pz2, f * b));
                    }
                }
                parts = next;
            }
            for (py, pz, f) in parts {
                if f.norm() == 0.0 {
                    continue;
                }
                let nidx = MultiIndex::new(idx.k.clone(), py, pz);
                out.add_param_term(nidx, c.scale(f))?;
            }
        }
        out.prune();
        return Ok(out);

        fn binom(n: u32, k: u32) -> C64 {
            let mut acc = 1.0f64;
            for i in 0..k {
                acc = acc * (n - i) as f64 / (i + 1) as f64;
            }
            C64::new(acc, 0.0)
        }
    }

    /// Canonical JSON document: dims, caps, `[k, iy, jz, re, im]` records in
    /// term order. Round-trips bit-exactly (serde_json prints the shortest
    /// decimal that recovers each f64).
    pub fn to_json(&self) -> serde_json::Value {
        let terms: Vec<serde_json::Value> = self
            .terms
            .iter()
            .map(|(idx, c)| {
                serde_json::json!([idx.k, idx.iy, idx.jz, c.value.re, c.value.im])
            })
            .collect();
        serde_json::json!({
            "n": self.dims.n,
            "m": self.dims.m,
            "degree_cap": self.degree_cap,
            "fourier_cap": self.fourier_cap,
            "overflow": self.overflow,
            "terms": terms,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<TFSeries> {
        let bad = |msg: &str| EngineError::Config(format!("series json: {msg}"));
        let n = v["n"].as_u64().ok_or_else(|| bad("missing n"))? as usize;
        let m = v["m"].as_u64().ok_or_else(|| bad("missing m"))? as usize;
        let degree_cap = v["degree_cap"]
            .as_u64()
            .ok_or_else(|| bad("missing degree_cap"))? as u32;
        let fourier_cap = v["fourier_cap"]
            .as_i64()
            .ok_or_else(|| bad("missing fourier_cap"))?;
        let mut out = TFSeries::new(Dims::new(n, m), degree_cap, fourier_cap);
        if let Some(of) = v.get("overflow") {
            out.overflow = serde_json::from_value(of.clone())
                .map_err(|e| bad(&format!("overflow: {e}")))?;
        }
        for t in v["terms"].as_array().ok_or_else(|| bad("terms"))? {
            let rec = t.as_array().ok_or_else(|| bad("term record"))?;
            if rec.len() != 5 {
                return Err(bad("term record must be [k, iy, jz, re, im]"));
            }
            let k: Vec<i64> =
                serde_json::from_value(rec[0].clone()).map_err(|e| bad(&e.to_string()))?;
            let iy: Vec<u32> =
                serde_json::from_value(rec[1].clone()).map_err(|e| bad(&e.to_string()))?;
            let jz: Vec<u32> =
                serde_json::from_value(rec[2].clone()).map_err(|e| bad(&e.to_string()))?;
            let re = rec[3].as_f64().ok_or_else(|| bad("re"))?;
            let im = rec[4].as_f64().ok_or_else(|| bad("im"))?;
            out.add_term(MultiIndex::new(k, iy, jz), C64::new(re, im))?;
        }
        Ok(out)
    }
}

impl fmt::Display for TFSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (idx, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "({:.6e}{:+.6e}i)", c.value.re, c.value.im)?;
            if idx.k_sup() != 0 {
                write!(f, " e^(i<{:?},x>)", idx.k)?;
            }
            for (a, &p) in idx.iy.iter().enumerate() {
                if p > 0 {
                    write!(f, " y{a}^{p}")?;
                }
            }
            for (a, &p) in idx.jz.iter().enumerate() {
                if p > 0 {
                    write!(f, " z{a}^{p}")?;
                }
            }
        }
        Ok(())
    }
}

/// Builders for common series used across tests and presets.
pub mod build {
    use super::*;

    /// `<omega, y>` as a series.
    pub fn linear_in_y(dims: Dims, dc: u32, fc: i64, omega: &[f64]) -> TFSeries {
        let mut s = TFSeries::new(dims, dc, fc);
        for (a, &w) in omega.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut idx = MultiIndex::zero(dims);
            idx.iy[a] = 1;
            s.add_term(idx, C64::new(w, 0.0)).unwrap();
        }
        s
    }

    /// `cos <k, x>` as a series (half weight on +-k).
    pub fn cos_kx(dims: Dims, dc: u32, fc: i64, k: &[i64]) -> TFSeries {
        let mut s = TFSeries::new(dims, dc, fc);
        let mut idx = MultiIndex::zero(dims);
        idx.k = k.to_vec();
        s.add_term(idx.clone(), C64::new(0.5, 0.0)).unwrap();
        s.add_term(idx.negated_k(), C64::new(0.5, 0.0)).unwrap();
        s
    }

    /// `sin <k, x>` as a series.
    pub fn sin_kx(dims: Dims, dc: u32, fc: i64, k: &[i64]) -> TFSeries {
        let mut s = TFSeries::new(dims, dc, fc);
        let mut idx = MultiIndex::zero(dims);
        idx.k = k.to_vec();
        s.add_term(idx.clone(), C64::new(0.0, -0.5)).unwrap();
        s.add_term(idx.negated_k(), C64::new(0.0, 0.5)).unwrap();
        s
    }

    /// Quadratic form `1/2 <(y,z), M (y,z)>` from a symmetric (n+2m) matrix.
    pub fn quadratic_form(dims: Dims, dc: u32, fc: i64, mat: &nalgebra::DMatrix<f64>) -> TFSeries {
        let n = dims.n;
        let d = dims.yz_dim();
        assert_eq!(mat.nrows(), d);
        let mut s = TFSeries::new(dims, dc, fc);
        for r in 0..d {
            for c in 0..d {
                let v = 0.5 * mat[(r, c)];
                if v == 0.0 {
                    continue;
                }
                let mut idx = MultiIndex::zero(dims);
                for &pos in &[r, c] {
                    if pos < n {
                        idx.iy[pos] += 1;
                    } else {
                        idx.jz[pos - n] += 1;
                    }
                }
                s.add_term(idx, C64::new(v, 0.0)).unwrap();
            }
        }
        s.prune();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dims11() -> Dims {
        Dims::new(1, 1)
    }

    fn random_series(rng: &mut ChaCha8Rng, dims: Dims, dc: u32, fc: i64, nterms: usize) -> TFSeries {
        let mut s = TFSeries::new(dims, dc, fc);
        for _ in 0..nterms {
            let k: Vec<i64> = (0..dims.n)
                .map(|_| rng.gen_range(-(fc as i64)..=fc as i64))
                .collect();
            let mut iy = vec![0u32; dims.n];
            let mut jz = vec![0u32; dims.z_dim()];
            let mut budget = rng.gen_range(0..=dc);
            for v in iy.iter_mut().chain(jz.iter_mut()) {
                if budget == 0 {
                    break;
                }
                let take = rng.gen_range(0..=budget);
                *v = take;
                budget -= take;
            }
            let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            s.add_term(MultiIndex::new(k, iy, jz), c).unwrap();
        }
        s.prune();
        s
    }

    /// Reality-symmetric random series (real trig-polynomial data).
    fn random_real_series(
        rng: &mut ChaCha8Rng,
        dims: Dims,
        dc: u32,
        fc: i64,
        nterms: usize,
    ) -> TFSeries {
        let mut s = TFSeries::new(dims, dc, fc);
        for _ in 0..nterms {
            let k: Vec<i64> = (0..dims.n).map(|_| rng.gen_range(-fc..=fc)).collect();
            let mut iy = vec![0u32; dims.n];
            let mut jz = vec![0u32; dims.z_dim()];
            let mut budget = rng.gen_range(0..=dc);
            for v in iy.iter_mut().chain(jz.iter_mut()) {
                if budget == 0 {
                    break;
                }
                let take = rng.gen_range(0..=budget);
                *v = take;
                budget -= take;
            }
            let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let idx = MultiIndex::new(k, iy, jz);
            let neg = idx.negated_k();
            s.add_term(idx, c).unwrap();
            s.add_term(neg, c.conj()).unwrap();
        }
        s.prune();
        s
    }

    #[test]
    fn bracket_linear_generator() {
        // {<omega,y>, e^{ikx}} = -i<k,omega> e^{ikx} under the convention
        // {A,B} = dxA.dyB - dyA.dxB + dzA.J dzB, so that the degree-zero
        // homological relation i<k,omega> f_k = p_k holds with a plus sign.
        let dims = Dims::new(2, 0);
        let omega = [0.3, 0.7];
        let n = build::linear_in_y(dims, 4, 6, &omega);
        let mut e = TFSeries::new(dims, 4, 6);
        let mut idx = MultiIndex::zero(dims);
        idx.k = vec![2, -1];
        e.add_term(idx.clone(), C64::new(1.0, 0.0)).unwrap();
        let b = n.poisson_bracket(&e).unwrap();
        let expect = C64::new(0.0, -(2.0 * 0.3 - 0.7));
        assert_relative_eq!(b.coeff(&idx).re, expect.re, max_relative = 1e-14);
        assert_relative_eq!(b.coeff(&idx).im, expect.im, max_relative = 1e-14);
        assert_eq!(b.num_terms(), 1);
    }

    #[test]
    fn bracket_antisymmetry_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = random_series(&mut rng, dims11(), 3, 3, 12);
            let b = a.poisson_bracket(&a).unwrap();
            assert!(b.coeff_scale() <= 1e-14, "{{A,A}} = {}", b.coeff_scale());
        }
    }

    #[test]
    fn bracket_y2_sin_x() {
        // n=1, m=1: {y^2/2, sin x} = -y cos x
        let dims = dims11();
        let mut a = TFSeries::new(dims, 4, 4);
        let mut idx = MultiIndex::zero(dims);
        idx.iy[0] = 2;
        a.add_term(idx, C64::new(0.5, 0.0)).unwrap();
        let b = build::sin_kx(dims, 4, 4, &[1]);
        let got = a.poisson_bracket(&b).unwrap();
        // expected: -y cos x
        let mut expect = build::cos_kx(dims, 4, 4, &[1]).scale(C64::new(-1.0, 0.0));
        expect = {
            let mut s = TFSeries::new(dims, 4, 4);
            for (i, c) in expect.terms() {
                let mut idx = i.clone();
                idx.iy[0] = 1;
                s.add_term(idx, c.value).unwrap();
            }
            s
        };
        let diff = got.sub(&expect).unwrap();
        assert!(diff.coeff_scale() <= 1e-15);
    }

    /// Independent term-by-term differentiation oracle for monomial pairs.
    /// Computes {A, B} for single monomials directly from the product rule.
    fn bracket_monomial_oracle(
        dims: Dims,
        a: (&MultiIndex, C64),
        b: (&MultiIndex, C64),
    ) -> Vec<(MultiIndex, C64)> {
        let mut out: BTreeMap<MultiIndex, C64> = BTreeMap::new();
        let mut push = |idx: MultiIndex, c: C64| {
            if c.norm() != 0.0 {
                *out.entry(idx).or_insert(C64::new(0.0, 0.0)) += c;
            }
        };
        let (ia, ca) = a;
        let (ib, cb) = b;
        // helper: multiply two monomials
        let merge = |x: &MultiIndex, y: &MultiIndex| {
            MultiIndex::new(
                x.k.iter().zip(&y.k).map(|(p, q)| p + q).collect(),
                x.iy.iter().zip(&y.iy).map(|(p, q)| p + q).collect(),
                x.jz.iter().zip(&y.jz).map(|(p, q)| p + q).collect(),
            )
        };
        for axis in 0..dims.n {
            // dx_a A * dy_a B
            if ib.iy[axis] > 0 {
                let fa = C64::new(0.0, ia.k[axis] as f64) * ca;
                let fb = C64::new(ib.iy[axis] as f64, 0.0) * cb;
                let mut yb = ib.clone();
                yb.iy[axis] -= 1;
                push(merge(ia, &yb), fa * fb);
            }
            // - dy_a A * dx_a B
            if ia.iy[axis] > 0 {
                let fa = C64::new(ia.iy[axis] as f64, 0.0) * ca;
                let fb = C64::new(0.0, ib.k[axis] as f64) * cb;
                let mut ya = ia.clone();
                ya.iy[axis] -= 1;
                push(merge(&ya, ib), -fa * fb);
            }
        }
        for c in 0..dims.m {
            let pairs = [(c, c + dims.m, 1.0), (c + dims.m, c, -1.0)];
            for (ca_idx, cb_idx, sign) in pairs {
                if ia.jz[ca_idx] > 0 && ib.jz[cb_idx] > 0 {
                    let fa = C64::new(ia.jz[ca_idx] as f64, 0.0) * ca;
                    let fb = C64::new(ib.jz[cb_idx] as f64, 0.0) * cb;
                    let mut za = ia.clone();
                    za.jz[ca_idx] -= 1;
                    let mut zb = ib.clone();
                    zb.jz[cb_idx] -= 1;
                    push(merge(&za, &zb), fa * fb * sign);
                }
            }
        }
        out.into_iter().collect()
    }

    #[test]
    fn bracket_matches_monomial_oracle() {
        let dims = dims11();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            // caps wide enough to hold the product of two degree-3 monomials
            let widen = |s: &TFSeries| {
                let mut w = TFSeries::new(dims, 8, 8);
                for (i, cf) in s.terms() {
                    w.add_term(i.clone(), cf.value).unwrap();
                }
                w
            };
            let a = widen(&random_series(&mut rng, dims, 3, 3, 1));
            let b = widen(&random_series(&mut rng, dims, 3, 3, 1));
            if a.num_terms() == 0 || b.num_terms() == 0 {
                continue;
            }
            let (ia, ca) = a.terms().next().unwrap();
            let (ib, cb) = b.terms().next().unwrap();
            let expect = bracket_monomial_oracle(dims, (ia, ca.value), (ib, cb.value));
            let got = a.poisson_bracket(&b).unwrap();
            for (idx, c) in &expect {
                let g = got.coeff(idx);
                assert!((g - c).norm() <= 1e-13 * c.norm().max(1.0));
            }
            // nothing extra on the implementation side either
            for (idx, g) in got.terms() {
                let e = expect
                    .iter()
                    .find(|(i, _)| i == idx)
                    .map(|(_, c)| *c)
                    .unwrap_or(C64::new(0.0, 0.0));
                assert!((g.value - e).norm() <= 1e-13 * e.norm().max(1.0));
            }
        }
    }

    #[test]
    fn bracket_jacobi_identity() {
        let dims = dims11();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            // caps large enough that no truncation occurs for degree-2 inputs
            let a = random_series(&mut rng, dims, 2, 2, 6).scale(C64::new(0.5, 0.0));
            let b = random_series(&mut rng, dims, 2, 2, 6).scale(C64::new(0.5, 0.0));
            let c = random_series(&mut rng, dims, 2, 2, 6).scale(C64::new(0.5, 0.0));
            let widen = |s: &TFSeries| {
                let mut w = TFSeries::new(dims, 8, 8);
                for (i, cf) in s.terms() {
                    w.add_term(i.clone(), cf.value).unwrap();
                }
                w
            };
            let (a, b, c) = (widen(&a), widen(&b), widen(&c));
            let t1 = a.poisson_bracket(&b).unwrap().poisson_bracket(&c).unwrap();
            let t2 = b.poisson_bracket(&c).unwrap().poisson_bracket(&a).unwrap();
            let t3 = c.poisson_bracket(&a).unwrap().poisson_bracket(&b).unwrap();
            let sum = t1.add(&t2).unwrap().add(&t3).unwrap();
            let scale = t1
                .coeff_scale()
                .max(t2.coeff_scale())
                .max(t3.coeff_scale())
                .max(1e-30);
            assert!(
                sum.coeff_scale() / scale <= 1e-10,
                "jacobi defect {}",
                sum.coeff_scale() / scale
            );
        }
    }

    #[test]
    fn truncate_trivial_cases() {
        let dims = dims11();
        let mut p = TFSeries::new(dims, 4, 6);
        p.add_term(MultiIndex::zero(dims), C64::new(2.0, 0.0)).unwrap();
        let (r, tail) = p.truncate(3);
        assert_eq!(r.num_terms(), 1);
        assert!(tail.is_empty());

        let mut q = TFSeries::new(dims, 4, 6);
        let mut idx = MultiIndex::zero(dims);
        idx.k = vec![4]; // k_plus + 1
        q.add_term(idx, C64::new(1.0, 0.0)).unwrap();
        let (r, tail) = q.truncate(3);
        assert!(r.is_empty());
        assert_eq!(tail.num_terms(), 1);
    }

    #[test]
    fn truncate_partitions_terms() {
        let dims = dims11();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_series(&mut rng, dims, 5, 6, 50);
        let (r, tail) = p.truncate(3);
        // exhaustive enumeration: every term of p lands in exactly one side
        for (idx, c) in p.terms() {
            let in_r = idx.degree() <= 2 && idx.k_sup() <= 3;
            let rc = r.coeff(idx);
            let tc = tail.coeff(idx);
            if in_r {
                assert_eq!(rc, c.value);
                assert_eq!(tc, C64::new(0.0, 0.0));
            } else {
                assert_eq!(tc, c.value);
                assert_eq!(rc, C64::new(0.0, 0.0));
            }
        }
        assert_eq!(r.num_terms() + tail.num_terms(), p.num_terms());
        // exact reconstruction
        let back = r.add(&tail).unwrap();
        let diff = back.sub(&p).unwrap();
        assert_eq!(diff.coeff_scale(), 0.0);
    }

    #[test]
    fn average_is_k0_and_idempotent() {
        let dims = dims11();
        // cos<k,x> averages to zero
        let c = build::cos_kx(dims, 2, 3, &[2]);
        assert!(c.average().is_empty());
        // constant + cos -> constant
        let mut p = build::cos_kx(dims, 2, 3, &[2]);
        p.add_term(MultiIndex::zero(dims), C64::new(3.5, 0.0)).unwrap();
        let avg = p.average();
        assert_eq!(avg.num_terms(), 1);
        assert_eq!(avg.coeff(&MultiIndex::zero(dims)), C64::new(3.5, 0.0));
        // idempotence on random series (exact)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_series(&mut rng, dims, 3, 3, 30);
        let a1 = p.average();
        let a2 = a1.average();
        assert_eq!(a1.sub(&a2).unwrap().coeff_scale(), 0.0);
        // truncate is a projection too
        let (r1, _) = p.truncate(2);
        let (r2, tail2) = r1.truncate(2);
        assert_eq!(r1.sub(&r2).unwrap().coeff_scale(), 0.0);
        assert!(tail2.is_empty());
    }

    #[test]
    fn weighted_norm_closed_form() {
        let dims = Dims::new(1, 0);
        let dom = AnalyticDomain::simple(0.5, 0.1, 1);
        assert_eq!(TFSeries::new(dims, 2, 2).weighted_norm(&dom, 0), 0.0);
        let mut s = TFSeries::new(dims, 2, 2);
        let mut idx = MultiIndex::zero(dims);
        idx.k = vec![1];
        s.add_term(idx, C64::new(2.0, 0.0)).unwrap();
        // |c| e^{|k| r} = 2 e^{0.5}
        let expect = 2.0 * (0.5f64).exp();
        assert_relative_eq!(s.weighted_norm(&dom, 0), expect, max_relative = 1e-15);
        assert!((expect - 3.2974425414002564).abs() < 1e-12);
    }

    #[test]
    fn weighted_norm_monotone_in_domain() {
        let dims = dims11();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let p = random_series(&mut rng, dims, 3, 3, 20);
            let (r1, s1) = (rng.gen_range(0.01..0.5), rng.gen_range(0.01..0.5));
            let (r2, s2) = (r1 + rng.gen_range(0.0..0.5), s1 + rng.gen_range(0.0..0.5));
            let d1 = AnalyticDomain::simple(r1, s1, 1);
            let d2 = AnalyticDomain::simple(r2, s2, 1);
            assert!(p.weighted_norm(&d1, 0) <= p.weighted_norm(&d2, 0) * (1.0 + 1e-15));
        }
    }

    #[test]
    fn weighted_norm_subadditive() {
        let dims = dims11();
        let dom = AnalyticDomain::simple(0.3, 0.2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a = random_series(&mut rng, dims, 3, 3, 15);
            let b = random_series(&mut rng, dims, 3, 3, 15);
            let lhs = a.add(&b).unwrap().weighted_norm(&dom, 0);
            let rhs = a.weighted_norm(&dom, 0) + b.weighted_norm(&dom, 0);
            // majorant arithmetic: equality-or-less up to one ulp of rounding
            assert!(lhs <= rhs * (1.0 + 1e-15), "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn cauchy_shrink_bound_cases() {
        let dims = dims11();
        let mut s = TFSeries::new(dims, 2, 2);
        s.add_term(MultiIndex::zero(dims), C64::new(1.0, 0.0)).unwrap();
        let mk = |eta: f64| AnalyticDomain {
            angle_strip: 0.5,
            radius: 0.1,
            lambda_box: LambdaBox {
                lo: vec![-10.0],
                hi: vec![10.0],
                margin: eta,
            },
        };
        // l = 0 equals weighted_norm
        let dom = mk(0.37);
        assert_eq!(
            s.cauchy_shrink_bound(&dom, 0).unwrap(),
            s.weighted_norm(&dom, 0)
        );
        // eta = 1: equal for any l
        let dom1 = mk(1.0);
        assert_eq!(
            s.cauchy_shrink_bound(&dom1, 3).unwrap(),
            s.weighted_norm(&dom1, 0)
        );
        // eta = 0.1, l = 2, norm = 1 -> 100
        let dom2 = mk(0.1);
        assert_relative_eq!(
            s.cauchy_shrink_bound(&dom2, 2).unwrap(),
            100.0,
            max_relative = 1e-12
        );
        // eta <= 0 is a domain error
        let mut bad = dom2.clone();
        bad.lambda_box.margin = 0.0;
        assert!(s.cauchy_shrink_bound(&bad, 1).is_err());
    }

    #[test]
    fn reality_symmetry_on_real_data() {
        let dims = dims11();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_real_series(&mut rng, dims, 3, 3, 25);
        assert!(p.reality_defect() <= 1e-12 * p.coeff_scale().max(1.0));
        // brackets of real series stay real-symmetric
        let q = random_real_series(&mut rng, dims, 3, 3, 25);
        let b = p.poisson_bracket(&q).unwrap();
        assert!(b.reality_defect() <= 1e-12 * b.coeff_scale().max(1.0));
    }

    #[test]
    fn overflow_ledger_bounds_dropped_mass() {
        let dims = Dims::new(1, 0);
        // degree cap 2: squaring a quadratic overflows
        let mut a = TFSeries::new(dims, 2, 2);
        let mut idx = MultiIndex::zero(dims);
        idx.iy[0] = 2;
        a.add_term(idx, C64::new(3.0, 0.0)).unwrap();
        let p = a.mul(&a).unwrap();
        assert_eq!(p.num_terms(), 0);
        assert_eq!(p.overflow().mass, 9.0);
        assert_eq!(p.overflow().deg_min, 4);
        let dom = AnalyticDomain::simple(0.5, 0.5, 1);
        // norm includes 9 * s^4
        assert_relative_eq!(
            p.weighted_norm(&dom, 0),
            9.0 * 0.5f64.powi(4),
            max_relative = 1e-15
        );
    }

    #[test]
    fn json_round_trip_bit_exact() {
        let dims = dims11();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..5 {
            let p = random_series(&mut rng, dims, 4, 5, 30);
            let j = p.to_json();
            let back = TFSeries::from_json(&j).unwrap();
            assert_eq!(p.num_terms(), back.num_terms());
            for (idx, c) in p.terms() {
                let b = back.coeff(idx);
                assert_eq!(c.value.re.to_bits(), b.re.to_bits());
                assert_eq!(c.value.im.to_bits(), b.im.to_bits());
            }
            // serialization is canonical: same document both times
            assert_eq!(
                serde_json::to_string(&j).unwrap(),
                serde_json::to_string(&back.to_json()).unwrap()
            );
        }
    }

    #[test]
    fn eval_and_shift_consistency() {
        let dims = dims11();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let p = random_series(&mut rng, dims, 3, 3, 15);
        let y0 = [C64::new(0.03, 0.0)];
        let z0 = [C64::new(-0.02, 0.0), C64::new(0.05, 0.0)];
        let shifted = p.shift_yz(&y0, &z0).unwrap();
        for _ in 0..5 {
            let x = [rng.gen_range(0.0..6.28)];
            let y = [C64::new(rng.gen_range(-0.1..0.1), 0.0)];
            let z = [
                C64::new(rng.gen_range(-0.1..0.1), 0.0),
                C64::new(rng.gen_range(-0.1..0.1), 0.0),
            ];
            let direct = p.eval(
                &x,
                &[y[0] + y0[0]],
                &[z[0] + z0[0], z[1] + z0[1]],
            );
            let via = shifted.eval(&x, &y, &z);
            assert!((direct - via).norm() <= 1e-13 * direct.norm().max(1.0));
        }
    }

    #[test]
    fn lambda_jet_leibniz_consistent_with_finite_differences() {
        // coefficient family c(lambda) = (2 + sin l1)(1 + l1^2) built two ways
        let f = |l: f64| C64::new((2.0 + l.sin()) * (1.0 + l * l), 0.0);
        let fa = |l: f64| C64::new(2.0 + l.sin(), 0.0);
        let fb = |l: f64| C64::new(1.0 + l * l, 0.0);
        let da = |l: f64| C64::new(l.cos(), 0.0);
        let db = |l: f64| C64::new(2.0 * l, 0.0);
        let l0 = 0.4f64;
        let a = ParamCoefficient::with_jet(fa(l0), LambdaJet::new(1, 1, vec![da(l0)]).unwrap());
        let b = ParamCoefficient::with_jet(fb(l0), LambdaJet::new(1, 1, vec![db(l0)]).unwrap());
        let prod = a.mul(&b);
        assert!((prod.value - f(l0)).norm() < 1e-14);
        // jet derivative vs central finite difference of the product family
        let h = 1e-6;
        let fd = (f(l0 + h) - f(l0 - h)) / C64::new(2.0 * h, 0.0);
        let jet = prod.jet.unwrap();
        assert!((jet.coeffs[0] - fd).norm() < 1e-8, "jet vs fd");
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_series() -> impl Strategy<Value = TFSeries> {
        let dims = Dims::new(1, 1);
        let term = (
            -3i64..=3,
            0u32..=2,
            0u32..=1,
            0u32..=1,
            -1.0f64..1.0,
            -1.0f64..1.0,
        );
        proptest::collection::vec(term, 0..12).prop_map(move |terms| {
            let mut s = TFSeries::new(dims, 4, 3);
            for (k, iy, j1, j2, re, im) in terms {
                if iy + j1 + j2 > 4 {
                    continue;
                }
                s.add_term(
                    MultiIndex::new(vec![k], vec![iy], vec![j1, j2]),
                    C64::new(re, im),
                )
                .unwrap();
            }
            s.prune();
            s
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn json_round_trip_is_bit_exact(s in arb_series()) {
            let back = TFSeries::from_json(&s.to_json()).unwrap();
            prop_assert_eq!(s.num_terms(), back.num_terms());
            for (idx, c) in s.terms() {
                let b = back.coeff(idx);
                prop_assert_eq!(c.value.re.to_bits(), b.re.to_bits());
                prop_assert_eq!(c.value.im.to_bits(), b.im.to_bits());
            }
        }

        #[test]
        fn truncate_partitions_exactly(s in arb_series(), kp in 0i64..4) {
            let (r, tail) = s.truncate(kp);
            // disjoint supports and exact reconstruction
            for (idx, _) in r.terms() {
                prop_assert!(tail.coeff(idx) == C64::new(0.0, 0.0));
            }
            let back = r.add(&tail).unwrap();
            prop_assert_eq!(back.sub(&s).unwrap().coeff_scale(), 0.0);
            // both are projections
            let (r2, t2) = r.truncate(kp);
            prop_assert_eq!(r2.sub(&r).unwrap().coeff_scale(), 0.0);
            prop_assert!(t2.is_empty());
        }

        #[test]
        fn bracket_is_antisymmetric_and_bilinear(a in arb_series(), b in arb_series()) {
            let widen = |s: &TFSeries| {
                let mut w = TFSeries::new(s.dims(), 10, 8);
                for (i, c) in s.terms() {
                    w.add_param_term(i.clone(), c.clone()).unwrap();
                }
                w
            };
            let (a, b) = (widen(&a), widen(&b));
            let ab = a.poisson_bracket(&b).unwrap();
            let ba = b.poisson_bracket(&a).unwrap();
            let anti = ab.add(&ba).unwrap();
            let scale = ab.coeff_scale().max(1.0);
            prop_assert!(anti.coeff_scale() <= 1e-12 * scale);
            // bilinearity in the first slot against a random scalar
            let c = C64::new(0.37, -0.11);
            let lhs = a.scale(c).poisson_bracket(&b).unwrap();
            let rhs = ab.scale(c);
            let diff = lhs.sub(&rhs).unwrap();
            prop_assert!(diff.coeff_scale() <= 1e-12 * rhs.coeff_scale().max(1.0));
        }

        #[test]
        fn norm_subadditive_and_monotone(a in arb_series(), b in arb_series()) {
            let dom = AnalyticDomain::simple(0.3, 0.2, 1);
            let lhs = a.add(&b).unwrap().weighted_norm(&dom, 0);
            let rhs = a.weighted_norm(&dom, 0) + b.weighted_norm(&dom, 0);
            prop_assert!(lhs <= rhs * (1.0 + 1e-15));
            let smaller = AnalyticDomain::simple(0.2, 0.1, 1);
            prop_assert!(
                a.weighted_norm(&smaller, 0) <= a.weighted_norm(&dom, 0) * (1.0 + 1e-15)
            );
        }
    }

    #[test]
    fn jet_weighted_norm_uses_derivative_sup() {
        // coefficients carrying first-order jets: the l = 1 norm sums the
        // jet magnitudes with the same majorant weights
        let dims = Dims::new(1, 0);
        let dom = AnalyticDomain::simple(0.5, 0.1, 1);
        let mut s = TFSeries::new(dims, 2, 2);
        let mut idx = MultiIndex::zero(dims);
        idx.k = vec![1];
        s.add_param_term(
            idx,
            ParamCoefficient::with_jet(
                C64::new(2.0, 0.0),
                LambdaJet::new(1, 1, vec![C64::new(0.25, 0.0)]).unwrap(),
            ),
        )
        .unwrap();
        let n0 = s.weighted_norm(&dom, 0);
        let n1 = s.weighted_norm(&dom, 1);
        let w = (0.5f64).exp();
        assert!((n0 - 2.0 * w).abs() <= 1e-14);
        assert!((n1 - 0.25 * w).abs() <= 1e-14);
        // without jets the l = 1 norm falls back to the Cauchy bound
        let mut s2 = TFSeries::new(dims, 2, 2);
        let mut idx2 = MultiIndex::zero(dims);
        idx2.k = vec![1];
        s2.add_term(idx2, C64::new(2.0, 0.0)).unwrap();
        let eta = dom.lambda_box.margin;
        assert!((s2.weighted_norm(&dom, 1) - 2.0 * w / eta).abs() <= 1e-12);
    }
}
