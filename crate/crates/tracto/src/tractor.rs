//! Tractor algebra in a fixed splitting.
//!
//! Frame convention shared by every module: tensor slots occupy rows/columns
//! `0..n`, the `X`-slot is row/column `n`. A symmetric 2-tractor
//! `H = (ζ, λ, ρ)` is the `(n+1)×(n+1)` matrix `[[ζ, λ], [λᵀ, ρ]]`; a
//! symmetric 2-cotractor `Φ = (τ, η, φ)` is `[[φ, η], [ηᵀ, τ]]`.
//!
//! Determinants carry the ε²-contraction constant for permutation-symbol
//! normalization: `det_weighted(ζ) = n!·det ζ` and the 2-tractor determinant
//! is `(n+1)!·det M(H)`.

use crate::chart::ChartData;
use crate::expr::{EvalError, Expression};
use crate::chart::SymExprs;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum TractorError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("singular 2-tractor: {0} null directions")]
    Singular(usize),
    #[error("adjugate vanishes: rank {rank} < n = {n}")]
    RankDeficient { rank: usize, n: usize },
}

/// Standard tractor `V = (ν^a, ρ)`, both slots of weight −1.
#[derive(Debug, Clone, PartialEq)]
pub struct TractorVec {
    pub nu: DVector<f64>,
    pub rho: f64,
}

/// Cotractor `U = (ξ, μ_a)`, both slots of weight 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CoTractorVec {
    pub xi: f64,
    pub mu: DVector<f64>,
}

impl CoTractorVec {
    /// Frame vector `(μ_1..μ_n, ξ)`.
    pub fn to_frame(&self) -> DVector<f64> {
        let n = self.mu.len();
        DVector::from_fn(n + 1, |i, _| if i < n { self.mu[i] } else { self.xi })
    }

    pub fn from_frame(v: &DVector<f64>) -> CoTractorVec {
        let n = v.len() - 1;
        CoTractorVec {
            xi: v[n],
            mu: v.rows(0, n).into_owned(),
        }
    }
}

/// Invariant pairing `U_A V^A = μ_a ν^a + ξ ρ`.
pub fn pair(u: &CoTractorVec, v: &TractorVec) -> f64 {
    u.mu.dot(&v.nu) + u.xi * v.rho
}

/// Symmetric 2-tractor `H^{AB} = (ζ^{ab}, λ^a, ρ)`, weight −2 slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Tractor2Sym {
    pub zeta: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub rho: f64,
}

impl Tractor2Sym {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn zeros(n: usize) -> Tractor2Sym {
        Tractor2Sym {
            zeta: DMatrix::zeros(n, n),
            lambda: DVector::zeros(n),
            rho: 0.0,
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n + 1, n + 1, |i, j| match (i < n, j < n) {
            (true, true) => self.zeta[(i, j)],
            (true, false) => self.lambda[i],
            (false, true) => self.lambda[j],
            (false, false) => self.rho,
        })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Tractor2Sym {
        let n = m.nrows() - 1;
        Tractor2Sym {
            zeta: m.view((0, 0), (n, n)).into_owned(),
            lambda: DVector::from_fn(n, |i, _| m[(i, n)]),
            rho: m[(n, n)],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.to_matrix().amax()
    }
}

/// Symmetric 2-cotractor `Φ_{AB} = (τ, η_a, φ_{ab})`, weight 2 slots.
#[derive(Debug, Clone, PartialEq)]
pub struct CoTractor2Sym {
    pub tau: f64,
    pub eta: DVector<f64>,
    pub phi: DMatrix<f64>,
}

impl CoTractor2Sym {
    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n + 1, n + 1, |i, j| match (i < n, j < n) {
            (true, true) => self.phi[(i, j)],
            (true, false) => self.eta[i],
            (false, true) => self.eta[j],
            (false, false) => self.tau,
        })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> CoTractor2Sym {
        let n = m.nrows() - 1;
        CoTractor2Sym {
            phi: m.view((0, 0), (n, n)).into_owned(),
            eta: DVector::from_fn(n, |i, _| m[(i, n)]),
            tau: m[(n, n)],
        }
    }
}

/// ε²-contraction constant for the permutation-symbol convention: `k!`.
pub fn kappa(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Weighted determinant of `ζ^{ab}`: the ε²-contraction, i.e. `n!·det ζ`.
/// For `ζ` of weight `m` the result has weight `nm + 2n + 2`.
pub fn det_weighted(zeta: &DMatrix<f64>) -> f64 {
    kappa(zeta.nrows()) * zeta.determinant()
}

/// Determinant, eigenvalues, and signature of a symmetric form.
#[derive(Debug, Clone)]
pub struct Spectral {
    /// ε²-normalized determinant: `k!·det` for a `k×k` form.
    pub det: f64,
    /// Eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    /// Counts of positive, negative, and (within tolerance) zero eigenvalues.
    pub signature: (usize, usize, usize),
}

impl Spectral {
    pub fn rank(&self) -> usize {
        self.signature.0 + self.signature.1
    }
}

pub const SPECTRAL_TOL: f64 = 1e-9;

/// Eigen-analysis of a symmetric matrix. Eigenvalues below
/// `tol · spectral radius` in magnitude count as zero.
pub fn spectral(m: &DMatrix<f64>, tol: f64) -> Spectral {
    let eig = m.clone().symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let radius = ev.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cut = tol * radius;
    let mut sig = (0usize, 0usize, 0usize);
    for &v in &ev {
        if v.abs() <= cut {
            sig.2 += 1;
        } else if v > 0.0 {
            sig.0 += 1;
        } else {
            sig.1 += 1;
        }
    }
    Spectral {
        det: kappa(m.nrows()) * m.determinant(),
        eigenvalues: ev,
        signature: sig,
    }
}

pub fn spectral_t2(h: &Tractor2Sym, tol: f64) -> Spectral {
    spectral(&h.to_matrix(), tol)
}

/// Pointwise inverse `Φ_{AB} = (H^{AB})^{-1}`, unpacked by the block
/// convention. Fails on singular input.
pub fn invert(h: &Tractor2Sym, tol: f64) -> Result<CoTractor2Sym, TractorError> {
    let s = spectral_t2(h, tol);
    if s.signature.2 > 0 {
        return Err(TractorError::Singular(s.signature.2));
    }
    let m = h.to_matrix();
    let mut inv = m
        .clone()
        .try_inverse()
        .ok_or(TractorError::Singular(1))?;
    // One Newton refinement pass keeps the residual at round-off.
    let k = m.nrows();
    let id = DMatrix::identity(k, k);
    inv = &inv * (2.0 * &id - &m * &inv);
    // Re-symmetrize.
    let inv = 0.5 * (&inv + inv.transpose());
    Ok(CoTractor2Sym::from_matrix(&inv))
}

/// Cofactor-transpose adjugate, satisfying `M·adj(M) = det(M)·Id`.
pub fn adjugate(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.nrows();
    let mut adj = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let minor = m.clone().remove_row(i).remove_column(j);
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            // adj = cofactor transpose.
            adj[(j, i)] = sign * minor.determinant();
        }
    }
    adj
}

/// `±adj(M(H))` with the sign fixed to make the matrix positive
/// semidefinite on the rank-`n` branch, where it factors as `I ⊗ I`.
#[derive(Debug, Clone)]
pub struct SignedAdjugate {
    pub matrix: DMatrix<f64>,
    /// Rank-1 factor `I` with `matrix = I Iᵀ`; present only when
    /// `rank(H) = n`. Deterministic sign: first non-negligible frame
    /// component positive.
    pub factor: Option<CoTractorVec>,
    pub sign_flip: bool,
    pub rank: usize,
    /// `max |M(H)·I|`, only meaningful with a factor.
    pub kernel_residual: f64,
}

pub fn signed_adjugate(h: &Tractor2Sym, tol: f64) -> Result<SignedAdjugate, TractorError> {
    let n = h.dim();
    let m = h.to_matrix();
    let s = spectral(&m, tol);
    let rank = s.rank();
    if rank < n {
        return Err(TractorError::RankDeficient { rank, n });
    }
    let adj = adjugate(&m);
    if rank == n + 1 {
        return Ok(SignedAdjugate {
            matrix: adj,
            factor: None,
            sign_flip: false,
            rank,
            kernel_residual: 0.0,
        });
    }
    // Rank n: adj is ±(rank-1 PSD).
    let eig = adj.clone().symmetric_eigen();
    let mut top = 0usize;
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i].abs() > eig.eigenvalues[top].abs() {
            top = i;
        }
    }
    let mu = eig.eigenvalues[top];
    let sign_flip = mu < 0.0;
    let matrix = if sign_flip { -adj } else { adj };
    let mut v = eig.eigenvectors.column(top).into_owned() * mu.abs().sqrt();
    let vmax = v.amax();
    for i in 0..v.len() {
        if v[i].abs() > 1e-7 * vmax {
            if v[i] < 0.0 {
                v = -v;
            }
            break;
        }
    }
    let factor = CoTractorVec::from_frame(&v);
    let kernel_residual = (&m * &v).amax();
    Ok(SignedAdjugate {
        matrix,
        factor: Some(factor),
        sign_flip,
        rank,
        kernel_residual,
    })
}

// ---------------------------------------------------------------------------
// Connection actions on point values. These are the slot formulas with the
// coordinate-derivative part set to zero; field versions add exact jets.
// ---------------------------------------------------------------------------

/// Connection action on `V = (ν, ρ)` in direction `c` (both slots weight −1):
/// `(Γν − Aν + ρδ_c, −Aρ − P_{cb}ν^b)`.
pub fn tvec_action(d: &ChartData, v: &TractorVec, c: usize) -> TractorVec {
    let n = d.n;
    let mut nu = DVector::zeros(n);
    for b in 0..n {
        let mut s = -d.a[c] * v.nu[b];
        for e in 0..n {
            s += d.gamma[b][c][e] * v.nu[e];
        }
        if b == c {
            s += v.rho;
        }
        nu[b] = s;
    }
    let mut rho = -d.a[c] * v.rho;
    for b in 0..n {
        rho -= d.p[c][b] * v.nu[b];
    }
    TractorVec { nu, rho }
}

/// Connection action on `U = (ξ, μ)` in direction `c` (slots weight 1).
pub fn covec_action(d: &ChartData, u: &CoTractorVec, c: usize) -> CoTractorVec {
    let n = d.n;
    let xi = d.a[c] * u.xi - u.mu[c];
    let mut mu = DVector::zeros(n);
    for b in 0..n {
        let mut s = d.a[c] * u.mu[b] + d.p[c][b] * u.xi;
        for e in 0..n {
            s -= d.gamma[e][c][b] * u.mu[e];
        }
        mu[b] = s;
    }
    CoTractorVec { xi, mu }
}

/// Tractor-connection action on `H = (ζ, λ, ρ)` in direction `c`
/// (slots weight −2).
pub fn t2_action(d: &ChartData, h: &Tractor2Sym, c: usize) -> Tractor2Sym {
    let n = d.n;
    let mut zeta = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let mut s = -2.0 * d.a[c] * h.zeta[(a, b)];
            for e in 0..n {
                s += d.gamma[a][c][e] * h.zeta[(e, b)] + d.gamma[b][c][e] * h.zeta[(a, e)];
            }
            if a == c {
                s += h.lambda[b];
            }
            if b == c {
                s += h.lambda[a];
            }
            zeta[(a, b)] = s;
            zeta[(b, a)] = s;
        }
    }
    let mut lambda = DVector::zeros(n);
    for a in 0..n {
        let mut s = -2.0 * d.a[c] * h.lambda[a];
        for e in 0..n {
            s += d.gamma[a][c][e] * h.lambda[e];
            s -= d.p[c][e] * h.zeta[(a, e)];
        }
        if a == c {
            s += h.rho;
        }
        lambda[a] = s;
    }
    let mut rho = -2.0 * d.a[c] * h.rho;
    for a in 0..n {
        rho -= 2.0 * d.p[c][a] * h.lambda[a];
    }
    Tractor2Sym { zeta, lambda, rho }
}

/// Cotractor-connection action on `Φ = (τ, η, φ)` in direction `c`
/// (slots weight 2).
pub fn cot2_action(d: &ChartData, f: &CoTractor2Sym, c: usize) -> CoTractor2Sym {
    let n = d.n;
    let tau = 2.0 * d.a[c] * f.tau - 2.0 * f.eta[c];
    let mut eta = DVector::zeros(n);
    for a in 0..n {
        let mut s = 2.0 * d.a[c] * f.eta[a] + d.p[c][a] * f.tau - f.phi[(c, a)];
        for e in 0..n {
            s -= d.gamma[e][c][a] * f.eta[e];
        }
        eta[a] = s;
    }
    let mut phi = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let mut s = 2.0 * d.a[c] * f.phi[(a, b)]
                + d.p[c][b] * f.eta[a]
                + d.p[c][a] * f.eta[b];
            for e in 0..n {
                s -= d.gamma[e][c][a] * f.phi[(e, b)] + d.gamma[e][c][b] * f.phi[(a, e)];
            }
            phi[(a, b)] = s;
            phi[(b, a)] = s;
        }
    }
    CoTractor2Sym { tau, eta, phi }
}

// ---------------------------------------------------------------------------
// Expression-valued fields and their covariant derivatives.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TractorVecField {
    pub nu: Vec<Expression>,
    pub rho: Expression,
}

#[derive(Debug, Clone)]
pub struct CoTractorVecField {
    pub xi: Expression,
    pub mu: Vec<Expression>,
}

#[derive(Debug, Clone)]
pub struct Tractor2SymField {
    pub zeta: SymExprs,
    pub lambda: Vec<Expression>,
    pub rho: Expression,
}

#[derive(Debug, Clone)]
pub struct CoTractor2SymField {
    pub tau: Expression,
    pub eta: Vec<Expression>,
    pub phi: SymExprs,
}

impl TractorVecField {
    pub fn eval(&self, x: &[f64]) -> Result<TractorVec, EvalError> {
        Ok(TractorVec {
            nu: DVector::from_vec(
                self.nu.iter().map(|e| e.eval(x)).collect::<Result<_, _>>()?,
            ),
            rho: self.rho.eval(x)?,
        })
    }
}

impl CoTractorVecField {
    pub fn eval(&self, x: &[f64]) -> Result<CoTractorVec, EvalError> {
        Ok(CoTractorVec {
            xi: self.xi.eval(x)?,
            mu: DVector::from_vec(
                self.mu.iter().map(|e| e.eval(x)).collect::<Result<_, _>>()?,
            ),
        })
    }
}

impl Tractor2SymField {
    pub fn eval(&self, x: &[f64]) -> Result<Tractor2Sym, EvalError> {
        Ok(Tractor2Sym {
            zeta: self.zeta.eval_matrix(x)?,
            lambda: DVector::from_vec(
                self.lambda
                    .iter()
                    .map(|e| e.eval(x))
                    .collect::<Result<Vec<f64>, _>>()?,
            ),
            rho: self.rho.eval(x)?,
        })
    }

    /// Value and coordinate partials `(H, [∂_c H])`.
    pub fn eval_with_partials(
        &self,
        x: &[f64],
    ) -> Result<(Tractor2Sym, Vec<Tractor2Sym>), EvalError> {
        let n = self.lambda.len();
        let mut value = Tractor2Sym::zeros(n);
        let mut parts = vec![Tractor2Sym::zeros(n); n];
        for a in 0..n {
            for b in a..n {
                let j = self.zeta.get(a, b).eval_jet(x, 1)?;
                value.zeta[(a, b)] = j.value;
                value.zeta[(b, a)] = j.value;
                for c in 0..n {
                    parts[c].zeta[(a, b)] = j.d1(c);
                    parts[c].zeta[(b, a)] = j.d1(c);
                }
            }
            let j = self.lambda[a].eval_jet(x, 1)?;
            value.lambda[a] = j.value;
            for c in 0..n {
                parts[c].lambda[a] = j.d1(c);
            }
        }
        let j = self.rho.eval_jet(x, 1)?;
        value.rho = j.value;
        for c in 0..n {
            parts[c].rho = j.d1(c);
        }
        Ok((value, parts))
    }
}

impl CoTractor2SymField {
    pub fn eval(&self, x: &[f64]) -> Result<CoTractor2Sym, EvalError> {
        Ok(CoTractor2Sym {
            tau: self.tau.eval(x)?,
            eta: DVector::from_vec(
                self.eta
                    .iter()
                    .map(|e| e.eval(x))
                    .collect::<Result<Vec<f64>, _>>()?,
            ),
            phi: self.phi.eval_matrix(x)?,
        })
    }

    pub fn eval_with_partials(
        &self,
        x: &[f64],
    ) -> Result<(CoTractor2Sym, Vec<CoTractor2Sym>), EvalError> {
        let n = self.eta.len();
        let mut value = CoTractor2Sym {
            tau: 0.0,
            eta: DVector::zeros(n),
            phi: DMatrix::zeros(n, n),
        };
        let mut parts = vec![value.clone(); n];
        let j = self.tau.eval_jet(x, 1)?;
        value.tau = j.value;
        for c in 0..n {
            parts[c].tau = j.d1(c);
        }
        for a in 0..n {
            let j = self.eta[a].eval_jet(x, 1)?;
            value.eta[a] = j.value;
            for c in 0..n {
                parts[c].eta[a] = j.d1(c);
            }
            for b in a..n {
                let j = self.phi.get(a, b).eval_jet(x, 1)?;
                value.phi[(a, b)] = j.value;
                value.phi[(b, a)] = j.value;
                for c in 0..n {
                    parts[c].phi[(a, b)] = j.d1(c);
                    parts[c].phi[(b, a)] = j.d1(c);
                }
            }
        }
        Ok((value, parts))
    }
}

// Full covariant derivatives of expression fields, per direction `c`.

pub fn tractor_connect_vec(
    d: &ChartData,
    f: &TractorVecField,
    x: &[f64],
    c: usize,
) -> Result<TractorVec, TractorError> {
    let n = d.n;
    let mut out = tvec_action(d, &f.eval(x)?, c);
    for b in 0..n {
        out.nu[b] += f.nu[b].eval_jet(x, 1)?.d1(c);
    }
    out.rho += f.rho.eval_jet(x, 1)?.d1(c);
    Ok(out)
}

pub fn tractor_connect_covec(
    d: &ChartData,
    f: &CoTractorVecField,
    x: &[f64],
    c: usize,
) -> Result<CoTractorVec, TractorError> {
    let n = d.n;
    let mut out = covec_action(d, &f.eval(x)?, c);
    out.xi += f.xi.eval_jet(x, 1)?.d1(c);
    for b in 0..n {
        out.mu[b] += f.mu[b].eval_jet(x, 1)?.d1(c);
    }
    Ok(out)
}

pub fn tractor_connect_t2(
    d: &ChartData,
    f: &Tractor2SymField,
    x: &[f64],
    c: usize,
) -> Result<Tractor2Sym, TractorError> {
    let (value, parts) = f.eval_with_partials(x)?;
    let act = t2_action(d, &value, c);
    Ok(Tractor2Sym {
        zeta: &parts[c].zeta + &act.zeta,
        lambda: &parts[c].lambda + &act.lambda,
        rho: parts[c].rho + act.rho,
    })
}

pub fn tractor_connect_cot2(
    d: &ChartData,
    f: &CoTractor2SymField,
    x: &[f64],
    c: usize,
) -> Result<CoTractor2Sym, TractorError> {
    let (value, parts) = f.eval_with_partials(x)?;
    let act = cot2_action(d, &value, c);
    Ok(CoTractor2Sym {
        tau: parts[c].tau + act.tau,
        eta: &parts[c].eta + &act.eta,
        phi: &parts[c].phi + &act.phi,
    })
}

/// Thomas D-operator on a weight-`w` scalar density:
/// `D f = (w f, ∇_a f)` with `∇_a f = ∂_a f + w A_a f`.
pub fn thomas_d(
    d: &ChartData,
    f: &Expression,
    w: f64,
    x: &[f64],
) -> Result<CoTractorVec, TractorError> {
    let j = f.eval_jet(x, 1)?;
    let n = d.n;
    Ok(CoTractorVec {
        xi: w * j.value,
        mu: DVector::from_fn(n, |a, _| j.d1(a) + w * d.a[a] * j.value),
    })
}

/// Same operator given a value and gradient directly (for numeric densities).
pub fn thomas_d_values(d: &ChartData, value: f64, grad: &[f64], w: f64) -> CoTractorVec {
    CoTractorVec {
        xi: w * value,
        mu: DVector::from_fn(d.n, |a, _| grad[a] + w * d.a[a] * value),
    }
}

/// Tractor curvature acting on `H`: the slots of `Ω_ab(H)` for one index
/// pair, antisymmetric in `(a, b)` by construction:
/// top `W_ab^c_e ζ^{de} + W_ab^d_e ζ^{ce}`, middle
/// `W_ab^c_d λ^d − Y_abd ζ^{cd}`, bottom `−2 Y_abc λ^c`.
pub fn tractor_curvature_act(
    d: &ChartData,
    h: &Tractor2Sym,
    a: usize,
    b: usize,
) -> Tractor2Sym {
    let n = d.n;
    let mut zeta = DMatrix::zeros(n, n);
    for c in 0..n {
        for dd in 0..n {
            let mut s = 0.0;
            for e in 0..n {
                s += d.w[a][b][c][e] * h.zeta[(dd, e)] + d.w[a][b][dd][e] * h.zeta[(c, e)];
            }
            zeta[(c, dd)] = s;
        }
    }
    let mut lambda = DVector::zeros(n);
    for c in 0..n {
        let mut s = 0.0;
        for dd in 0..n {
            s += d.w[a][b][c][dd] * h.lambda[dd] - d.y[a][b][dd] * h.zeta[(c, dd)];
        }
        lambda[c] = s;
    }
    let mut rho = 0.0;
    for c in 0..n {
        rho -= 2.0 * d.y[a][b][c] * h.lambda[c];
    }
    Tractor2Sym { zeta, lambda, rho }
}

// ---------------------------------------------------------------------------
// Vectorization of S²ℝ^{n+1} in the canonical symmetric basis (entries
// (i ≤ j) of the matrix form). Used by the holonomy solver.
// ---------------------------------------------------------------------------

pub fn sym_dim(k: usize) -> usize {
    k * (k + 1) / 2
}

pub fn sym_to_coords(m: &DMatrix<f64>) -> DVector<f64> {
    let k = m.nrows();
    let mut v = DVector::zeros(sym_dim(k));
    let mut idx = 0;
    for j in 0..k {
        for i in 0..=j {
            v[idx] = m[(i, j)];
            idx += 1;
        }
    }
    v
}

pub fn coords_to_sym(v: &DVector<f64>, k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, k);
    let mut idx = 0;
    for j in 0..k {
        for i in 0..=j {
            m[(i, j)] = v[idx];
            m[(j, i)] = v[idx];
            idx += 1;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::{klein_levi_civita, ChartConnection, Domain};
    use crate::expr::Expression;
    use approx::assert_abs_diff_eq;

    fn flat_data(n: usize, x: &[f64]) -> ChartData {
        ChartConnection::flat(n, Domain::symmetric(1.5, n))
            .data(x)
            .unwrap()
    }

    fn klein_field(n: usize) -> Tractor2SymField {
        // H = (δ − xxᵗ, x, −1): the parallel package of the Klein solution.
        let zeta = SymExprs::from_fn(n, |b, c| {
            Expression::lit(if b == c { 1.0 } else { 0.0 }, n)
                .sub(Expression::var(b, n).mul(Expression::var(c, n)))
        });
        Tractor2SymField {
            zeta,
            lambda: (0..n).map(|a| Expression::var(a, n)).collect(),
            rho: Expression::lit(-1.0, n),
        }
    }

    #[test]
    fn constant_diag_h_is_parallel_on_flat() {
        let d = flat_data(2, &[0.4, -0.2]);
        let h = Tractor2Sym {
            zeta: DMatrix::identity(2, 2),
            lambda: DVector::zeros(2),
            rho: 0.0,
        };
        for c in 0..2 {
            let der = t2_action(&d, &h, c);
            assert_eq!(der.max_abs(), 0.0);
        }
    }

    #[test]
    fn klein_package_is_parallel_on_flat() {
        let f = klein_field(2);
        let flat = ChartConnection::flat(2, Domain::symmetric(1.5, 2));
        for x in flat.domain().sample(25, 2) {
            let d = flat.data(&x).unwrap();
            for c in 0..2 {
                let der = tractor_connect_t2(&d, &f, &x, c).unwrap();
                assert!(der.max_abs() < 1e-13, "at {x:?}: {:?}", der);
            }
        }
    }

    #[test]
    fn constant_cotractor_on_flat() {
        let d = flat_data(2, &[0.1, 0.2]);
        let u = CoTractorVec {
            xi: 1.0,
            mu: DVector::zeros(2),
        };
        for c in 0..2 {
            let der = covec_action(&d, &u, c);
            assert_eq!(der.xi, 0.0);
            assert_eq!(der.mu.amax(), 0.0);
        }
    }

    #[test]
    fn pairing_is_metric_for_the_connection() {
        // d/dx^c (U V) = (∇U) V + U (∇V), checked with exact jets.
        let m = klein_levi_civita(2).unwrap();
        let vf = TractorVecField {
            nu: vec![
                Expression::parse("x1 + x2^2", 2).unwrap(),
                Expression::parse("1 - x1*x2", 2).unwrap(),
            ],
            rho: Expression::parse("x2 - 2*x1", 2).unwrap(),
        };
        let uf = CoTractorVecField {
            xi: Expression::parse("1 + x1*x1", 2).unwrap(),
            mu: vec![
                Expression::parse("x2", 2).unwrap(),
                Expression::parse("x1 - x2", 2).unwrap(),
            ],
        };
        for x in m.chart.domain().sample(10, 4) {
            let d = m.chart.data(&x).unwrap();
            let v = vf.eval(&x).unwrap();
            let u = uf.eval(&x).unwrap();
            for c in 0..2 {
                let dv = tractor_connect_vec(&d, &vf, &x, c).unwrap();
                let du = tractor_connect_covec(&d, &uf, &x, c).unwrap();
                // Exact derivative of the scalar pairing via jets.
                let mut dpair = 0.0;
                for b in 0..2 {
                    let jn = vf.nu[b].eval_jet(&x, 1).unwrap();
                    let jm = uf.mu[b].eval_jet(&x, 1).unwrap();
                    dpair += jm.d1(c) * jn.value + jm.value * jn.d1(c);
                }
                let jr = vf.rho.eval_jet(&x, 1).unwrap();
                let jx = uf.xi.eval_jet(&x, 1).unwrap();
                dpair += jx.d1(c) * jr.value + jx.value * jr.d1(c);
                let lhs = pair(&du, &v) + pair(&u, &dv);
                assert_abs_diff_eq!(lhs, dpair, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn weighted_determinant_constants() {
        assert_eq!(det_weighted(&DMatrix::identity(2, 2)), 2.0);
        assert_eq!(det_weighted(&DMatrix::zeros(2, 2)), 0.0);
        // Klein ζ at radius r: 2!·(1 − r²).
        let x: [f64; 2] = [0.6, 0.3];
        let r2 = 0.45;
        let zeta = DMatrix::from_fn(2, 2, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - x[i] * x[j]
        });
        assert_abs_diff_eq!(det_weighted(&zeta), 2.0 * (1.0 - r2), epsilon = 1e-15);
    }

    #[test]
    fn spectral_of_models() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, -1.0]));
        let s = spectral(&m, SPECTRAL_TOL);
        assert_eq!(s.det, -kappa(3));
        assert_eq!(s.signature, (2, 1, 0));

        // Klein H at any x has det M(H) = −1.
        let f = klein_field(2);
        for x in [[0.0, 0.0], [0.5, 0.2], [1.2, -0.7]] {
            let h = f.eval(&x).unwrap();
            let s = spectral_t2(&h, SPECTRAL_TOL);
            assert_abs_diff_eq!(s.det, -kappa(3), epsilon = 1e-12);
        }

        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let s = spectral(&m, SPECTRAL_TOL);
        assert_eq!(s.signature, (2, 0, 1));
        assert_abs_diff_eq!(s.eigenvalues[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.eigenvalues[1], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.eigenvalues[2], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn inverse_blocks() {
        let h = Tractor2Sym {
            zeta: DMatrix::identity(2, 2),
            lambda: DVector::zeros(2),
            rho: 1.0,
        };
        let f = invert(&h, SPECTRAL_TOL).unwrap();
        assert_eq!(f.tau, 1.0);
        assert_eq!(f.eta.amax(), 0.0);
        assert_eq!(f.phi, DMatrix::identity(2, 2));

        // Klein at the origin: M = diag(1,1,−1), inverse has τ = −1.
        let h = Tractor2Sym {
            zeta: DMatrix::identity(2, 2),
            lambda: DVector::zeros(2),
            rho: -1.0,
        };
        let f = invert(&h, SPECTRAL_TOL).unwrap();
        assert_abs_diff_eq!(f.tau, -1.0, epsilon = 1e-15);

        // Rank-n model is singular.
        let h = Tractor2Sym::from_matrix(&DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        ));
        assert!(matches!(
            invert(&h, SPECTRAL_TOL),
            Err(TractorError::Singular(_))
        ));
    }

    #[test]
    fn signed_adjugate_branches() {
        // Rank-n model: adj = [[1,0,−1],[0,0,0],[−1,0,1]], I = (1,0,−1).
        let h = Tractor2Sym::from_matrix(&DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        ));
        let sa = signed_adjugate(&h, SPECTRAL_TOL).unwrap();
        assert!(!sa.sign_flip);
        assert_eq!(sa.rank, 2);
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0]);
        assert!((sa.matrix.clone() - &expect).amax() < 1e-12);
        let i = sa.factor.unwrap().to_frame();
        assert_abs_diff_eq!(i[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(i[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(i[2], -1.0, epsilon = 1e-12);
        assert!(sa.kernel_residual < 1e-12);
        // I ⊗ I reproduces the matrix.
        let outer = &i * i.transpose();
        assert!((sa.matrix - outer).amax() < 1e-12);

        // Full-rank branch: adjugate of diag(1,1,−1) is diag(−1,−1,1).
        let h = Tractor2Sym {
            zeta: DMatrix::identity(2, 2),
            lambda: DVector::zeros(2),
            rho: -1.0,
        };
        let sa = signed_adjugate(&h, SPECTRAL_TOL).unwrap();
        assert!(sa.factor.is_none());
        let expect =
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -1.0, 1.0]));
        assert!((sa.matrix - expect).amax() < 1e-13);

        // Rank below n cannot be factored.
        let h = Tractor2Sym {
            zeta: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])),
            lambda: DVector::zeros(2),
            rho: 0.0,
        };
        assert!(matches!(
            signed_adjugate(&h, SPECTRAL_TOL),
            Err(TractorError::RankDeficient { .. })
        ));
    }

    #[test]
    fn adjugate_identity() {
        let m = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, -1.0, 0.5, -1.0, 3.0, 0.0, 0.5, 0.0, 1.5],
        );
        let adj = adjugate(&m);
        let prod = &m * &adj;
        let det = m.determinant();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { det } else { 0.0 };
                assert_abs_diff_eq!(prod[(i, j)], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn thomas_d_on_densities() {
        let flat = ChartConnection::flat(2, Domain::symmetric(1.5, 2));
        let d = flat.data(&[0.3, 0.1]).unwrap();
        // σ = 1 constant of weight 1 → (1, 0).
        let one = Expression::lit(1.0, 2);
        let dv = thomas_d(&d, &one, 1.0, &[0.3, 0.1]).unwrap();
        assert_eq!(dv.xi, 1.0);
        assert_eq!(dv.mu.amax(), 0.0);
        // σ = 1 − x1.
        let sig = Expression::parse("1 - x1", 2).unwrap();
        let dv = thomas_d(&d, &sig, 1.0, &[0.3, 0.1]).unwrap();
        assert_abs_diff_eq!(dv.xi, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(dv.mu[0], -1.0, epsilon = 1e-15);
        assert_eq!(dv.mu[1], 0.0);
        // Weight bookkeeping: D(σ²) top slot is 2σ².
        let sig2 = sig.clone().mul(sig);
        let dv2 = thomas_d(&d, &sig2, 2.0, &[0.3, 0.1]).unwrap();
        assert_abs_diff_eq!(dv2.xi, 2.0 * 0.49, epsilon = 1e-15);
    }

    #[test]
    fn sym_coords_round_trip() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let v = sym_to_coords(&m);
        assert_eq!(v.len(), 6);
        let back = coords_to_sym(&v, 3);
        assert_eq!(m, back);
    }
}
