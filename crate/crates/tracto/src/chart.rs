//! Chart connections: a projective structure presented by the Christoffel
//! coefficients of one torsion-free representative on an axis-aligned box.
//!
//! Conventions, used everywhere downstream:
//!
//! * curvature sign: `(∇_a∇_b − ∇_b∇_a) v^c = R_ab^c_d v^d`,
//! * Ricci: `Ric_bd = R_ab^a_d`, and for special (volume-preserving)
//!   connections the Schouten is `P = Ric/(n−1)`,
//! * Weyl: `W_ab^c_d = R_ab^c_d − δ^c_a P_bd + δ^c_b P_ad` (all traces zero),
//! * Cotton: `Y_abc = ∇_a P_bc − ∇_b P_ac`,
//! * densities of weight `w` are trivialized against the coordinate volume;
//!   their covariant derivative picks up `w·Γ^b_bc/(n+1)`, which vanishes in
//!   the normalized scale where `Γ^b_ba = 0`.

use crate::expr::{EvalError, Expression, MAX_DIM};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type T1 = [f64; MAX_DIM];
pub type T2 = [[f64; MAX_DIM]; MAX_DIM];
pub type T3 = [[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM];
pub type T4 = [[[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];

pub const ZERO_T1: T1 = [0.0; MAX_DIM];
pub const ZERO_T2: T2 = [[0.0; MAX_DIM]; MAX_DIM];
pub const ZERO_T3: T3 = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
pub const ZERO_T4: T4 = [[[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];

/// Relative Ricci-asymmetry above which a connection is rejected as
/// non-special (it then preserves no volume density).
const SPECIAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Error)]
pub enum ChartError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("dimension {0} unsupported (2..=4)")]
    Dimension(usize),
    #[error("connection is not special at {x:?}: Ricci asymmetry {asym:.3e}")]
    NotSpecial { x: Vec<f64>, asym: f64 },
    #[error("point {0:?} outside the chart domain")]
    OutOfDomain(Vec<f64>),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("bad model parameters: {0}")]
    BadParams(String),
}

/// Axis-aligned box domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Domain {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(a, b)| a < b), "empty box");
        Domain { lo, hi }
    }

    /// Symmetric box `[-half, half]^n`.
    pub fn symmetric(half: f64, n: usize) -> Domain {
        Domain::new(vec![-half; n], vec![half; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let eps = 1e-12;
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= lo - eps && *v <= hi + eps)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (b - a))
            .collect()
    }

    /// Uniform lattice with `k ≥ 2` points per axis, corners included.
    pub fn lattice(&self, k: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut pts = Vec::with_capacity(k.pow(n as u32));
        let mut idx = vec![0usize; n];
        loop {
            let p: Vec<f64> = (0..n)
                .map(|i| self.lo[i] + (self.hi[i] - self.lo[i]) * idx[i] as f64 / (k - 1) as f64)
                .collect();
            pts.push(p);
            let mut axis = 0;
            loop {
                if axis == n {
                    return pts;
                }
                idx[axis] += 1;
                if idx[axis] < k {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
        }
    }

    /// The same lattice shrunk toward the center by `factor`.
    pub fn interior_lattice(&self, k: usize, factor: f64) -> Vec<Vec<f64>> {
        let c = self.center();
        self.lattice(k)
            .into_iter()
            .map(|p| {
                p.iter()
                    .zip(&c)
                    .map(|(v, cc)| cc + (v - cc) * factor)
                    .collect()
            })
            .collect()
    }

    /// Deterministic points in the box: uniform samples from a seeded stream.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                (0..self.dim())
                    .map(|i| rng.random_range(self.lo[i]..self.hi[i]))
                    .collect()
            })
            .collect()
    }
}

fn tri(b: usize, c: usize) -> usize {
    let (b, c) = if b <= c { (b, c) } else { (c, b) };
    c * (c + 1) / 2 + b
}

fn tri_count(n: usize) -> usize {
    n * (n + 1) / 2
}

/// The 1-form of a projective change of connection.
#[derive(Debug, Clone)]
pub struct Upsilon {
    pub components: Vec<Expression>,
}

impl Upsilon {
    pub fn zero(n: usize) -> Upsilon {
        Upsilon {
            components: (0..n).map(|_| Expression::zero(n)).collect(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.components.iter().map(|e| e.eval(x)).collect()
    }
}

/// A torsion-free connection on a box chart, stored as `Γ^a_{bc}` expressions
/// with the symmetric pair `(b,c)` packed once.
#[derive(Debug, Clone)]
pub struct ChartConnection {
    n: usize,
    domain: Domain,
    gamma: Vec<Expression>,
    is_special: bool,
    /// Every coefficient is the literal zero; geometry evaluation short-
    /// circuits.
    flat_gamma: bool,
}

impl ChartConnection {
    /// Flat connection (`Γ = 0`).
    pub fn flat(n: usize, domain: Domain) -> ChartConnection {
        let gamma = (0..n * tri_count(n)).map(|_| Expression::zero(n)).collect();
        ChartConnection {
            n,
            domain,
            gamma,
            is_special: true,
            flat_gamma: true,
        }
    }

    /// Build from per-index expressions; entries not supplied stay zero.
    /// Indices are zero-based and `(b,c)` is stored symmetrically.
    pub fn from_entries(
        n: usize,
        domain: Domain,
        entries: impl IntoIterator<Item = ((usize, usize, usize), Expression)>,
    ) -> Result<ChartConnection, ChartError> {
        if !(2..=MAX_DIM).contains(&n) {
            return Err(ChartError::Dimension(n));
        }
        assert_eq!(domain.dim(), n);
        let mut gamma: Vec<Expression> =
            (0..n * tri_count(n)).map(|_| Expression::zero(n)).collect();
        for ((a, b, c), e) in entries {
            assert!(a < n && b < n && c < n, "gamma index out of range");
            assert_eq!(e.dim(), n);
            gamma[a * tri_count(n) + tri(b, c)] = e;
        }
        let flat_gamma = gamma.iter().all(Expression::is_literal_zero);
        let mut chart = ChartConnection {
            n,
            domain,
            gamma,
            is_special: false,
            flat_gamma,
        };
        chart.is_special = chart.probe_special()?;
        Ok(chart)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn is_special(&self) -> bool {
        self.is_special
    }

    /// Whether every Christoffel coefficient is the literal zero.
    pub fn is_flat_gamma(&self) -> bool {
        self.flat_gamma
    }

    pub fn gamma_expr(&self, a: usize, b: usize, c: usize) -> &Expression {
        &self.gamma[a * tri_count(self.n) + tri(b, c)]
    }

    /// Γ values only (order-0); cheap path for geodesic tracing.
    pub fn gamma_at(&self, x: &[f64]) -> Result<T3, ChartError> {
        let n = self.n;
        let mut g = ZERO_T3;
        for a in 0..n {
            for b in 0..n {
                for c in b..n {
                    let v = self.gamma_expr(a, b, c).eval(x)?;
                    g[a][b][c] = v;
                    g[a][c][b] = v;
                }
            }
        }
        Ok(g)
    }

    /// Trace `Γ^b_{ba}` at `x`.
    pub fn trace_gamma(&self, x: &[f64]) -> Result<Vec<f64>, ChartError> {
        let g = self.gamma_at(x)?;
        Ok((0..self.n).map(|a| (0..self.n).map(|b| g[b][b][a]).sum()).collect())
    }

    /// `Γ'^a_{bc} = Γ^a_{bc} + Υ_b δ^a_c + Υ_c δ^a_b`.
    pub fn projective_change(&self, ups: &Upsilon) -> Result<ChartConnection, ChartError> {
        assert_eq!(ups.components.len(), self.n);
        let n = self.n;
        let mut entries = Vec::new();
        for a in 0..n {
            for b in 0..n {
                for c in b..n {
                    let mut e = self.gamma_expr(a, b, c).clone();
                    if a == c {
                        e = e.add(ups.components[b].clone());
                    }
                    if a == b {
                        e = e.add(ups.components[c].clone());
                    }
                    entries.push(((a, b, c), e));
                }
            }
        }
        ChartConnection::from_entries(n, self.domain.clone(), entries)
    }

    /// Change to the representative preserving the coordinate volume:
    /// `Υ_a = −Γ^b_{ba}/(n+1)`, after which `Γ'^b_{ba} = 0`.
    pub fn special_normalize(&self) -> Result<(ChartConnection, Upsilon), ChartError> {
        let n = self.n;
        let comps: Vec<Expression> = (0..n)
            .map(|a| {
                Expression::sum(n, (0..n).map(|b| self.gamma_expr(b, b, a).clone()))
                    .scale(-1.0 / (n as f64 + 1.0))
            })
            .collect();
        let ups = Upsilon { components: comps };
        let chart = self.projective_change(&ups)?;
        Ok((chart, ups))
    }

    /// Numerically test Ricci symmetry at a handful of interior points.
    fn probe_special(&self) -> Result<bool, ChartError> {
        for x in self.domain.interior_lattice(3, 0.8) {
            match ChartData::at(self, &x) {
                Ok(_) => {}
                Err(ChartError::NotSpecial { .. }) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
        Ok(true)
    }

    /// Full curvature data at `x`; rejects non-special connections.
    pub fn curvature_suite(&self, x: &[f64]) -> Result<CurvatureSuite, ChartError> {
        let d = ChartData::at(self, x)?;
        Ok(CurvatureSuite {
            n: self.n,
            riemann: d.riemann,
            ric: d.ric,
            p: d.p,
            w: d.w,
            y: d.y,
        })
    }

    pub fn data(&self, x: &[f64]) -> Result<ChartData, ChartError> {
        ChartData::at(self, x)
    }
}

/// Point values of `R`, `Ric`, `P`, `W`, `Y` in chart components.
#[derive(Debug, Clone)]
pub struct CurvatureSuite {
    pub n: usize,
    /// `R_ab^c_d`, indexed `[a][b][c][d]`.
    pub riemann: T4,
    pub ric: T2,
    pub p: T2,
    /// `W_ab^c_d`, indexed `[a][b][c][d]`.
    pub w: T4,
    /// `Y_abc`, indexed `[a][b][c]`.
    pub y: T3,
}

impl CurvatureSuite {
    pub fn p_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.p[i][j])
    }

    /// Largest of the three traces of `W`, for trace-freeness checks.
    pub fn w_max_trace(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut t1 = 0.0; // contract a with c
                let mut t2 = 0.0; // contract b with c
                let mut t3 = 0.0; // contract c with d
                for s in 0..n {
                    t1 += self.w[s][i][s][j];
                    t2 += self.w[i][s][s][j];
                    t3 += self.w[i][j][s][s];
                }
                worst = worst.max(t1.abs()).max(t2.abs()).max(t3.abs());
            }
        }
        worst
    }
}

/// All geometric data of a chart connection evaluated at one point, with the
/// derivatives downstream operators need (`∂Γ`, `∂∂Γ`, Schouten and its
/// derivative, Weyl, Cotton, and the density connection form `A = tr Γ/(n+1)`).
#[derive(Debug, Clone)]
pub struct ChartData {
    pub n: usize,
    pub x: Vec<f64>,
    /// `Γ^a_{bc}` as `[a][b][c]`.
    pub gamma: T3,
    /// `∂_d Γ^a_{bc}` as `[d][a][b][c]`.
    pub dgamma: T4,
    /// Contracted second derivative `Σ_a ∂_c ∂_a Γ^a_{bd}` as `[c][b][d]`;
    /// the only second-derivative combination downstream operators need
    /// besides the trace in `dda`.
    pub ddgamma_div: T3,
    /// Density connection form `A_a = Γ^b_{ba}/(n+1)` and partials.
    pub a: T1,
    /// `∂_b A_a` as `[b][a]`.
    pub da: T2,
    /// `∂_c ∂_b A_a` as `[c][b][a]`.
    pub dda: T3,
    pub riemann: T4,
    pub ric: T2,
    pub p: T2,
    /// Raw partial `∂_c P_{ab}` as `[c][a][b]`.
    pub dp: T3,
    /// `∇_c P_{ab}` as `[c][a][b]`.
    pub covdp: T3,
    pub w: T4,
    pub y: T3,
}

impl ChartData {
    pub fn at(chart: &ChartConnection, x: &[f64]) -> Result<ChartData, ChartError> {
        let n = chart.n;
        if !chart.domain.contains(x) {
            return Err(ChartError::OutOfDomain(x.to_vec()));
        }
        if chart.flat_gamma {
            return Ok(ChartData {
                n,
                x: x.to_vec(),
                gamma: ZERO_T3,
                dgamma: ZERO_T4,
                ddgamma_div: ZERO_T3,
                a: ZERO_T1,
                da: ZERO_T2,
                dda: ZERO_T3,
                riemann: ZERO_T4,
                ric: ZERO_T2,
                p: ZERO_T2,
                dp: ZERO_T3,
                covdp: ZERO_T3,
                w: ZERO_T4,
                y: ZERO_T3,
            });
        }
        let inv = 1.0 / (n as f64 + 1.0);
        let mut gamma = ZERO_T3;
        let mut dgamma = ZERO_T4;
        let mut ddgamma_div = ZERO_T3;
        let mut dda = ZERO_T3;
        for a in 0..n {
            for b in 0..n {
                for c in b..n {
                    let j = chart.gamma_expr(a, b, c).eval_jet(x, 2)?;
                    gamma[a][b][c] = j.value;
                    gamma[a][c][b] = j.value;
                    for d in 0..n {
                        dgamma[d][a][b][c] = j.d1(d);
                        dgamma[d][a][c][b] = j.d1(d);
                    }
                    // Σ_a ∂_e ∂_a Γ^a_{bc}: one derivative index meets the
                    // upper index.
                    for e in 0..n {
                        ddgamma_div[e][b][c] += j.d2(e, a);
                        if b != c {
                            ddgamma_div[e][c][b] += j.d2(e, a);
                        }
                    }
                    // Trace contributions ∂∂ Γ^a_{a·} to dda.
                    if b == a {
                        for d in 0..n {
                            for e in 0..n {
                                dda[d][e][c] += j.d2(d, e) * inv;
                            }
                        }
                    }
                    if c == a && c != b {
                        for d in 0..n {
                            for e in 0..n {
                                dda[d][e][b] += j.d2(d, e) * inv;
                            }
                        }
                    }
                }
            }
        }

        let mut a_form = ZERO_T1;
        let mut da = ZERO_T2;
        for i in 0..n {
            for b in 0..n {
                a_form[i] += gamma[b][b][i] * inv;
                for d in 0..n {
                    da[d][i] += dgamma[d][b][b][i] * inv;
                }
            }
        }

        // R_ab^c_d = ∂_a Γ^c_{bd} − ∂_b Γ^c_{ad} + Γ^c_{ae} Γ^e_{bd} − Γ^c_{be} Γ^e_{ad}
        let mut riemann = ZERO_T4;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        let mut v = dgamma[a][c][b][d] - dgamma[b][c][a][d];
                        for e in 0..n {
                            v += gamma[c][a][e] * gamma[e][b][d] - gamma[c][b][e] * gamma[e][a][d];
                        }
                        riemann[a][b][c][d] = v;
                    }
                }
            }
        }

        let mut ric = ZERO_T2;
        for b in 0..n {
            for d in 0..n {
                ric[b][d] = (0..n).map(|a| riemann[a][b][a][d]).sum();
            }
        }
        let mut scale: f64 = 1.0;
        let mut asym: f64 = 0.0;
        for b in 0..n {
            for d in 0..n {
                scale = scale.max(ric[b][d].abs());
                asym = asym.max((ric[b][d] - ric[d][b]).abs());
            }
        }
        if asym > SPECIAL_TOL * scale {
            return Err(ChartError::NotSpecial {
                x: x.to_vec(),
                asym,
            });
        }

        let pfac = 1.0 / (n as f64 - 1.0);
        let mut p = ZERO_T2;
        for b in 0..n {
            for d in 0..n {
                // Symmetrize away the round-off asymmetry.
                p[b][d] = 0.5 * (ric[b][d] + ric[d][b]) * pfac;
            }
        }

        // ∂_c Ric_{bd}, then ∂_c P_{ab} and ∇_c P_{ab}. The second
        // Γ-derivative enters only through ddgamma_div and the trace dda:
        // Σ_a ∂_c ∂_b Γ^a_{ad} = (n+1) ∂_c ∂_b A_d.
        let mut dp = ZERO_T3;
        let mut covdp = ZERO_T3;
        for c in 0..n {
            let mut dric = ZERO_T2;
            for b in 0..n {
                for d in 0..n {
                    let mut v =
                        ddgamma_div[c][b][d] - (n as f64 + 1.0) * dda[c][b][d];
                    for a in 0..n {
                        for e in 0..n {
                            v += dgamma[c][a][a][e] * gamma[e][b][d]
                                + gamma[a][a][e] * dgamma[c][e][b][d]
                                - dgamma[c][a][b][e] * gamma[e][a][d]
                                - gamma[a][b][e] * dgamma[c][e][a][d];
                        }
                    }
                    dric[b][d] = v;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    dp[c][i][j] = 0.5 * (dric[i][j] + dric[j][i]) * pfac;
                    let mut v = dp[c][i][j];
                    for d in 0..n {
                        v -= gamma[d][c][i] * p[d][j] + gamma[d][c][j] * p[i][d];
                    }
                    covdp[c][i][j] = v;
                }
            }
        }

        let mut w = ZERO_T4;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        let mut v = riemann[a][b][c][d];
                        if c == a {
                            v -= p[b][d];
                        }
                        if c == b {
                            v += p[a][d];
                        }
                        w[a][b][c][d] = v;
                    }
                }
            }
        }

        let mut y = ZERO_T3;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    y[a][b][c] = covdp[a][b][c] - covdp[b][a][c];
                }
            }
        }

        Ok(ChartData {
            n,
            x: x.to_vec(),
            gamma,
            dgamma,
            ddgamma_div,
            a: a_form,
            da,
            dda,
            riemann,
            ric,
            p,
            dp,
            covdp,
            w,
            y,
        })
    }

    /// First-Bianchi residual `max |R_[ab^c_d]|` over antisymmetrization of
    /// `a,b,d`.
    pub fn bianchi_residual(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        let v = self.riemann[a][b][c][d]
                            + self.riemann[b][d][c][a]
                            + self.riemann[d][a][c][b];
                        worst = worst.max(v.abs());
                    }
                }
            }
        }
        worst
    }
}

/// Packed symmetric expression matrix for `ζ^{bc}` fields.
#[derive(Debug, Clone)]
pub struct SymExprs {
    n: usize,
    entries: Vec<Expression>,
}

impl SymExprs {
    pub fn new(n: usize, entries_upper: Vec<Expression>) -> SymExprs {
        assert_eq!(entries_upper.len(), tri_count(n));
        SymExprs {
            n,
            entries: entries_upper,
        }
    }

    pub fn zeros(n: usize) -> SymExprs {
        SymExprs::new(n, (0..tri_count(n)).map(|_| Expression::zero(n)).collect())
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> Expression) -> SymExprs {
        let mut entries = Vec::with_capacity(tri_count(n));
        for c in 0..n {
            for b in 0..=c {
                entries.push(f(b, c));
            }
        }
        // tri(b,c) = c(c+1)/2 + b matches this fill order.
        SymExprs { n, entries }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, b: usize, c: usize) -> &Expression {
        &self.entries[tri(b, c)]
    }

    pub fn set(&mut self, b: usize, c: usize, e: Expression) {
        self.entries[tri(b, c)] = e;
    }

    pub fn eval_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let n = self.n;
        let mut m = DMatrix::zeros(n, n);
        for b in 0..n {
            for c in b..n {
                let v = self.get(b, c).eval(x)?;
                m[(b, c)] = v;
                m[(c, b)] = v;
            }
        }
        Ok(m)
    }
}

/// A model chart plus, when the model carries one, the closed-form solution
/// `ζ^{ab}` it is built around.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub chart: ChartConnection,
    pub solution: Option<SymExprs>,
}

/// Parameters for the model catalogue; only some models read them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub amplitude: f64,
    pub seed: u64,
    /// Base-point tractor data `(ζ₀, λ₀, ρ₀)` for `rank_n_flat`.
    pub h0: Option<(DMatrix<f64>, DVector<f64>, f64)>,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            amplitude: 0.1,
            seed: 1,
            h0: None,
        }
    }
}

fn delta(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

/// Built-in geometries: `flat`, `klein_ball`, `gnomonic_sphere`,
/// `rank_n_flat`, `perturbed_flat`.
pub fn model_chart(name: &str, n: usize, params: &ModelParams) -> Result<Model, ChartError> {
    if !(2..=MAX_DIM).contains(&n) {
        return Err(ChartError::Dimension(n));
    }
    let domain = Domain::symmetric(1.5, n);
    let model = match name {
        "flat" => Model {
            name: name.into(),
            chart: ChartConnection::flat(n, domain),
            solution: Some(SymExprs::from_fn(n, |b, c| Expression::lit(delta(b, c), n))),
        },
        // Hyperbolic space in the projectively flat Klein realization:
        // ζ = δ − x xᵗ solves the flat metrizability equation and carries the
        // Klein-ball metric through g⁻¹ = sgn(τ)τζ on |x| < 1.
        "klein_ball" => Model {
            name: name.into(),
            chart: ChartConnection::flat(n, domain),
            solution: Some(SymExprs::from_fn(n, |b, c| {
                Expression::lit(delta(b, c), n)
                    .sub(Expression::var(b, n).mul(Expression::var(c, n)))
            })),
        },
        // The round sphere under central (gnomonic) projection.
        "gnomonic_sphere" => Model {
            name: name.into(),
            chart: ChartConnection::flat(n, domain),
            solution: Some(SymExprs::from_fn(n, |b, c| {
                Expression::lit(delta(b, c), n)
                    .add(Expression::var(b, n).mul(Expression::var(c, n)))
            })),
        },
        // Flat chart with the parallel transport of constant tractor data
        // (ζ₀, λ₀, ρ₀): ζ(x) = ζ₀ − 2 x^(a λ₀^b) + ρ₀ x^a x^b.
        "rank_n_flat" => {
            let (z0, l0, r0) = params.h0.clone().unwrap_or_else(|| {
                let mut e1 = DVector::zeros(n);
                e1[0] = 1.0;
                (DMatrix::identity(n, n), e1, 1.0)
            });
            if z0.nrows() != n || l0.len() != n {
                return Err(ChartError::BadParams(
                    "h0 blocks must match the chart dimension".into(),
                ));
            }
            let sol = SymExprs::from_fn(n, |b, c| {
                let xb = Expression::var(b, n);
                let xc = Expression::var(c, n);
                Expression::lit(z0[(b, c)], n)
                    .sub(xb.clone().scale(l0[c]))
                    .sub(xc.clone().scale(l0[b]))
                    .add(xb.mul(xc).scale(r0))
            });
            Model {
                name: name.into(),
                chart: ChartConnection::flat(n, domain),
                solution: Some(sol),
            }
        }
        // Seeded random degree-2 Christoffel coefficients; generically
        // non-metrizable.
        "perturbed_flat" => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let amp = params.amplitude;
            let mut entries = Vec::new();
            for a in 0..n {
                for b in 0..n {
                    for c in b..n {
                        let mut e = Expression::lit(rng.random_range(-amp..amp), n);
                        for i in 0..n {
                            e = e.add(Expression::var(i, n).scale(rng.random_range(-amp..amp)));
                        }
                        for i in 0..n {
                            for j in i..n {
                                e = e.add(
                                    Expression::var(i, n)
                                        .mul(Expression::var(j, n))
                                        .scale(rng.random_range(-amp..amp)),
                                );
                            }
                        }
                        entries.push(((a, b, c), e));
                    }
                }
            }
            Model {
                name: name.into(),
                chart: ChartConnection::from_entries(n, domain, entries)?,
                solution: None,
            }
        }
        other => return Err(ChartError::UnknownModel(other.into())),
    };
    Ok(model)
}

/// The Levi-Civita connection of the Klein-ball (Beltrami) metric,
/// `Γ^a_{bc} = (δ^a_b x_c + δ^a_c x_b)/(1 − |x|²)`, on a box inside the unit
/// ball. Special (it preserves the metric volume) but not in the normalized
/// coordinate scale; exercises the density weight terms.
pub fn klein_levi_civita(n: usize) -> Result<Model, ChartError> {
    let half = match n {
        2 => 0.65,
        3 => 0.52,
        _ => 0.45,
    };
    let r2 = Expression::sum(
        n,
        (0..n).map(|i| Expression::var(i, n).clone().powi(2)),
    );
    let denom = Expression::lit(1.0, n).sub(r2);
    let mut entries = Vec::new();
    for a in 0..n {
        for b in 0..n {
            for c in b..n {
                let mut num = Expression::zero(n);
                if a == b {
                    num = num.add(Expression::var(c, n));
                }
                if a == c {
                    num = num.add(Expression::var(b, n));
                }
                entries.push(((a, b, c), num.div(denom.clone())));
            }
        }
    }
    Ok(Model {
        name: "klein_lc".into(),
        chart: ChartConnection::from_entries(n, Domain::symmetric(half, n), entries)?,
        solution: Some(SymExprs::from_fn(n, |b, c| {
            Expression::lit(delta(b, c), n).sub(Expression::var(b, n).mul(Expression::var(c, n)))
        })),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn projective_change_of_flat() {
        let flat = ChartConnection::flat(2, Domain::symmetric(1.0, 2));
        let ups = Upsilon {
            components: vec![Expression::lit(1.0, 2), Expression::zero(2)],
        };
        let c = flat.projective_change(&ups).unwrap();
        let g = c.gamma_at(&[0.3, -0.2]).unwrap();
        assert_eq!(g[0][0][0], 2.0);
        assert_eq!(g[1][0][1], 1.0);
        assert_eq!(g[1][1][0], 1.0);
        assert_eq!(g[0][0][1], 0.0);
        assert_eq!(g[0][1][1], 0.0);
        assert_eq!(g[1][1][1], 0.0);
    }

    #[test]
    fn straight_line_is_pregeodesic_after_change() {
        // For Γ' above, x(t) = (t, 0) must satisfy the pregeodesic equation:
        // acceleration parallel to velocity.
        let flat = ChartConnection::flat(2, Domain::symmetric(1.0, 2));
        let ups = Upsilon {
            components: vec![Expression::lit(1.0, 2), Expression::zero(2)],
        };
        let c = flat.projective_change(&ups).unwrap();
        for t in [-0.5, 0.0, 0.5] {
            let g = c.gamma_at(&[t, 0.0]).unwrap();
            let v = [1.0, 0.0];
            // a^c = −Γ^c_{bd} v^b v^d must be ∥ v, so its second component
            // vanishes.
            let a1: f64 = -(0..2)
                .flat_map(|b| (0..2).map(move |d| (b, d)))
                .map(|(b, d)| g[1][b][d] * v[b] * v[d])
                .sum::<f64>();
            assert_abs_diff_eq!(a1, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn special_normalize_kills_trace() {
        let e = Expression::parse("x2", 2).unwrap();
        let c = ChartConnection::from_entries(
            2,
            Domain::symmetric(1.0, 2),
            [((0, 0, 0), e)],
        )
        .unwrap();
        let (cs, ups) = c.special_normalize().unwrap();
        let u = ups.eval(&[0.4, 0.9]).unwrap();
        assert_abs_diff_eq!(u[0], -0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-15);
        for x in cs.domain().sample(100, 7) {
            for t in cs.trace_gamma(&x).unwrap() {
                assert_abs_diff_eq!(t, 0.0, epsilon = 1e-12);
            }
        }
        // Idempotence: a second normalization is the identity change.
        let (_, ups2) = cs.special_normalize().unwrap();
        for x in cs.domain().sample(20, 8) {
            for v in ups2.eval(&x).unwrap() {
                assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn flat_chart_curvature_vanishes() {
        for n in 2..=3 {
            let c = ChartConnection::flat(n, Domain::symmetric(1.5, n));
            let s = c.curvature_suite(&vec![0.2; n]).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(s.p[i][j], 0.0);
                    for k in 0..n {
                        assert_eq!(s.y[i][j][k], 0.0);
                        for l in 0..n {
                            assert_eq!(s.w[i][j][k][l], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn klein_lc_schouten_is_minus_metric() {
        // Hyperbolic space: P = −g. At the origin g = δ.
        let m = klein_levi_civita(2).unwrap();
        let s = m.chart.curvature_suite(&[0.0, 0.0]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(s.p[i][j], -delta(i, j), epsilon = 1e-12);
            }
        }
        assert!(s.w_max_trace() < 1e-12);
        // Projectively flat: W and Y vanish identically.
        for x in m.chart.domain().sample(40, 3) {
            let s = m.chart.curvature_suite(&x).unwrap();
            let mut wmax: f64 = 0.0;
            let mut ymax: f64 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        ymax = ymax.max(s.y[i][j][k].abs());
                        for l in 0..2 {
                            wmax = wmax.max(s.w[i][j][k][l].abs());
                        }
                    }
                }
            }
            assert!(wmax < 1e-10, "W = {wmax:.3e} at {x:?}");
            assert!(ymax < 1e-9, "Y = {ymax:.3e} at {x:?}");
        }
        // And P matches −g = −(δ/(1−r²) + xxᵗ/(1−r²)²) away from the origin.
        let x = [0.3, -0.4];
        let r2: f64 = 0.25;
        let s = m.chart.curvature_suite(&x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let g = delta(i, j) / (1.0 - r2) + x[i] * x[j] / (1.0 - r2) / (1.0 - r2);
                assert_abs_diff_eq!(s.p[i][j], -g, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn weyl_trace_free_on_random_charts() {
        let m = model_chart("perturbed_flat", 2, &ModelParams::default()).unwrap();
        let (c, _) = m.chart.special_normalize().unwrap();
        for x in c.domain().sample(20, 11) {
            let s = c.curvature_suite(&x).unwrap();
            assert!(s.w_max_trace() < 1e-9, "trace {:.3e} at {x:?}", s.w_max_trace());
        }
    }

    #[test]
    fn bianchi_identity_on_models() {
        for name in ["flat", "perturbed_flat"] {
            let m = model_chart(name, 3, &ModelParams::default()).unwrap();
            let (c, _) = m.chart.special_normalize().unwrap();
            for x in c.domain().sample(10, 5) {
                let d = c.data(&x).unwrap();
                assert!(d.bianchi_residual() < 1e-9);
            }
        }
        let m = klein_levi_civita(2).unwrap();
        for x in m.chart.domain().sample(10, 6) {
            let d = m.chart.data(&x).unwrap();
            assert!(d.bianchi_residual() < 1e-9);
        }
    }

    #[test]
    fn model_solutions_evaluate() {
        let m = model_chart("klein_ball", 2, &ModelParams::default()).unwrap();
        let z = m.solution.as_ref().unwrap();
        let at0 = z.eval_matrix(&[0.0, 0.0]).unwrap();
        assert_eq!(at0, DMatrix::identity(2, 2));
        let at = z.eval_matrix(&[0.6, 0.0]).unwrap();
        assert_abs_diff_eq!(at[(0, 0)], 0.64, epsilon = 1e-15);
        assert_abs_diff_eq!(at[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(at[(1, 1)], 1.0, epsilon = 1e-15);

        let m = model_chart("rank_n_flat", 2, &ModelParams::default()).unwrap();
        let z = m.solution.as_ref().unwrap();
        for x in m.chart.domain().sample(30, 9) {
            let v = z.eval_matrix(&x).unwrap();
            assert_abs_diff_eq!(v[(0, 0)], (1.0 - x[0]) * (1.0 - x[0]), epsilon = 1e-13);
            assert_abs_diff_eq!(v[(0, 1)], x[1] * (x[0] - 1.0), epsilon = 1e-13);
            assert_abs_diff_eq!(v[(1, 1)], 1.0 + x[1] * x[1], epsilon = 1e-13);
            let det = v[(0, 0)] * v[(1, 1)] - v[(0, 1)] * v[(0, 1)];
            assert_abs_diff_eq!(det, (1.0 - x[0]) * (1.0 - x[0]), epsilon = 1e-12);
        }
    }

    #[test]
    fn perturbed_flat_is_seeded_deterministic() {
        let a = model_chart("perturbed_flat", 2, &ModelParams::default()).unwrap();
        let b = model_chart("perturbed_flat", 2, &ModelParams::default()).unwrap();
        let x = [0.7, -0.3];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(
                        a.chart.gamma_at(&x).unwrap()[i][j][k],
                        b.chart.gamma_at(&x).unwrap()[i][j][k]
                    );
                }
            }
        }
    }
}
