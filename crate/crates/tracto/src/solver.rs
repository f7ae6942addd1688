//! Parallel transport for the prolonged connection, loop holonomy on
//! S²ℝ^{n+1}, and the metrizability solution space.
//!
//! Solutions of the metrizability equation correspond to sections parallel
//! for the prolonged connection, so on a simply connected box the solution
//! space at a base point is the intersection of `ker(Hol − Id)` over a
//! spanning family of loops. The intersection is computed by repeated SVD; a
//! cheap curvature obstruction at the base point runs first.

use crate::bgg::em_action;
use crate::chart::{ChartConnection, ChartData, ChartError};

use crate::tractor::{coords_to_sym, sym_dim, sym_to_coords, Tractor2Sym, TractorError};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum SolverError {
    #[error(transparent)]
    Chart(#[from] ChartError),
    #[error(transparent)]
    Tractor(#[from] TractorError),
    #[error("integrator error estimate {est:.3e} exceeds budget {budget:.3e}")]
    Accuracy { est: f64, budget: f64 },
    #[error("loop is not closed: endpoints differ by {0:.3e}")]
    NotClosed(f64),
    #[error("solution rank unstable across tolerance decades: dims {0:?}")]
    RankUnstable(Vec<usize>),
}

/// Piecewise-linear path. Vertices must lie in the chart domain; segments
/// stay inside because the domain is a box.
#[derive(Debug, Clone)]
pub struct CurvePath {
    pub vertices: Vec<Vec<f64>>,
}

impl CurvePath {
    pub fn line(from: &[f64], to: &[f64]) -> CurvePath {
        CurvePath {
            vertices: vec![from.to_vec(), to.to_vec()],
        }
    }

    pub fn polyline(vertices: Vec<Vec<f64>>) -> CurvePath {
        assert!(vertices.len() >= 2);
        CurvePath { vertices }
    }

    /// Based rectangle loop in the `(i, j)` coordinate plane: out from `x0`
    /// to a corner, around, and back, so the holonomy is based at `x0`.
    pub fn based_rectangle(x0: &[f64], i: usize, j: usize, ext_i: f64, ext_j: f64) -> CurvePath {
        let corner = |si: f64, sj: f64| {
            let mut p = x0.to_vec();
            p[i] += si * ext_i;
            p[j] += sj * ext_j;
            p
        };
        let c1 = corner(1.0, 1.0);
        CurvePath {
            vertices: vec![
                x0.to_vec(),
                c1.clone(),
                corner(-1.0, 1.0),
                corner(-1.0, -1.0),
                corner(1.0, -1.0),
                c1,
                x0.to_vec(),
            ],
        }
    }

    pub fn reversed(&self) -> CurvePath {
        let mut v = self.vertices.clone();
        v.reverse();
        CurvePath { vertices: v }
    }

    pub fn length(&self) -> f64 {
        self.vertices
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum()
    }

    pub fn closure_gap(&self) -> f64 {
        self.vertices
            .first()
            .unwrap()
            .iter()
            .zip(self.vertices.last().unwrap())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Fixed-step RK4 options with Richardson step-halving error control.
#[derive(Debug, Clone, Copy)]
pub struct OdeOpts {
    /// Spatial step (default 1e-3).
    pub step: f64,
    /// Run again at half step and compare (default on).
    pub richardson: bool,
    /// Error budget per unit path length (default 1e-9).
    pub err_budget: f64,
}

impl Default for OdeOpts {
    fn default() -> Self {
        OdeOpts {
            step: 1e-3,
            richardson: true,
            err_budget: 1e-9,
        }
    }
}

/// Direction-contracted connection data, shared across all basis columns
/// when assembling a transport matrix. Everything lives on the stack.
struct DirData {
    n: usize,
    /// `Σ_c dir_c Γ^a_{ce}` as `[a][e]`.
    gd: [[f64; 4]; 4],
    /// `Σ_c dir_c A_c`.
    ad: f64,
    /// `Σ_c dir_c P_{ce}` as `[e]`.
    pd: [f64; 4],
    /// `Σ_c dir_c W_{cd}{}^a{}_e` as `[a][d][e]`.
    wd: [[[f64; 4]; 4]; 4],
    /// `Σ_c dir_c Y_{cde}` as `[d][e]`.
    yd: [[f64; 4]; 4],
    dir: [f64; 4],
}

impl DirData {
    fn zero(n: usize, dir: &[f64]) -> DirData {
        let mut out = DirData {
            n,
            gd: [[0.0; 4]; 4],
            ad: 0.0,
            pd: [0.0; 4],
            wd: [[[0.0; 4]; 4]; 4],
            yd: [[0.0; 4]; 4],
            dir: [0.0; 4],
        };
        out.dir[..n].copy_from_slice(&dir[..n]);
        out
    }

    /// Build straight from the chart, skipping the geometry bundle when the
    /// connection coefficients are literal zero.
    fn at(chart: &ChartConnection, x: &[f64], dir: &[f64]) -> Result<DirData, SolverError> {
        if chart.is_flat_gamma() {
            if !chart.domain().contains(x) {
                return Err(SolverError::Chart(ChartError::OutOfDomain(x.to_vec())));
            }
            return Ok(DirData::zero(chart.dim(), dir));
        }
        Ok(DirData::new(&chart.data(x)?, dir))
    }

    fn new(d: &ChartData, dir: &[f64]) -> DirData {
        let n = d.n;
        let mut out = DirData {
            n,
            gd: [[0.0; 4]; 4],
            ad: 0.0,
            pd: [0.0; 4],
            wd: [[[0.0; 4]; 4]; 4],
            yd: [[0.0; 4]; 4],
            dir: [0.0; 4],
        };
        for c in 0..n {
            let dc = dir[c];
            out.dir[c] = dc;
            if dc == 0.0 {
                continue;
            }
            out.ad += dc * d.a[c];
            for e in 0..n {
                out.pd[e] += dc * d.p[c][e];
                for a in 0..n {
                    out.gd[a][e] += dc * d.gamma[a][c][e];
                    out.yd[a][e] += dc * d.y[c][a][e];
                    for f in 0..n {
                        out.wd[a][e][f] += dc * d.w[c][e][a][f];
                    }
                }
            }
        }
        out
    }

    /// Slot action on a symmetric package given as an `(n+1)²` frame matrix;
    /// `with_em` adds the prolonged-connection curvature correction.
    fn apply(&self, m: &[[f64; 5]; 5], with_em: bool, out: &mut [[f64; 5]; 5]) {
        let n = self.n;
        let nf = n as f64;
        for a in 0..n {
            for b in a..n {
                let mut s = -2.0 * self.ad * m[a][b];
                for e in 0..n {
                    s += self.gd[a][e] * m[e][b] + self.gd[b][e] * m[a][e];
                }
                s += self.dir[a] * m[b][n] + self.dir[b] * m[a][n];
                out[a][b] = s;
                out[b][a] = s;
            }
            let mut s = -2.0 * self.ad * m[a][n] + self.dir[a] * m[n][n];
            for e in 0..n {
                s += self.gd[a][e] * m[e][n] - self.pd[e] * m[a][e];
            }
            if with_em {
                let mut w = 0.0;
                for dd in 0..n {
                    for e in 0..n {
                        w += self.wd[a][dd][e] * m[dd][e];
                    }
                }
                s += w / nf;
            }
            out[a][n] = s;
            out[n][a] = s;
        }
        let mut s = -2.0 * self.ad * m[n][n];
        for e in 0..n {
            s -= 2.0 * self.pd[e] * m[e][n];
        }
        if with_em {
            let mut y = 0.0;
            for dd in 0..n {
                for e in 0..n {
                    y += self.yd[dd][e] * m[dd][e];
                }
            }
            s -= 2.0 * y / nf;
        }
        out[n][n] = s;
    }
}

fn dir_matrix_into(dd: &DirData, with_em: bool, g: &mut DMatrix<f64>) {
    let n = dd.n;
    let nn = sym_dim(n + 1);
    debug_assert_eq!(g.nrows(), nn);
    let mut e = [[0.0f64; 5]; 5];
    let mut out = [[0.0f64; 5]; 5];
    let mut col = 0;
    for q in 0..=n {
        for p in 0..=q {
            e[p][q] = 1.0;
            e[q][p] = 1.0;
            dd.apply(&e, with_em, &mut out);
            e[p][q] = 0.0;
            e[q][p] = 0.0;
            let mut row = 0;
            for j in 0..=n {
                for i in 0..=j {
                    g[(row, col)] = out[i][j];
                    row += 1;
                }
            }
            col += 1;
        }
    }
}

fn dir_matrix(d: &ChartData, dir: &[f64], with_em: bool) -> DMatrix<f64> {
    let nn = sym_dim(d.n + 1);
    let mut g = DMatrix::zeros(nn, nn);
    dir_matrix_into(&DirData::new(d, dir), with_em, &mut g);
    g
}

/// Directional prolonged-connection matrix `G(x, dir) = Σ_c dir_c F_c(x)` on
/// symmetric coordinates: the transport ODE is `dv/dt = −G v`.
pub fn em_dir_matrix(d: &ChartData, dir: &[f64]) -> DMatrix<f64> {
    dir_matrix(d, dir, true)
}

/// Plain tractor-connection variant (no curvature correction).
pub fn tractor_dir_matrix(d: &ChartData, dir: &[f64]) -> DMatrix<f64> {
    dir_matrix(d, dir, false)
}

fn rk4_segment(
    chart: &ChartConnection,
    from: &[f64],
    to: &[f64],
    state: &mut DMatrix<f64>,
    step: f64,
    scratch: &mut Rk4Scratch,
) -> Result<(), SolverError> {
    let n = chart.dim();
    let dir: Vec<f64> = to.iter().zip(from).map(|(b, a)| b - a).collect();
    let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if len == 0.0 {
        return Ok(());
    }
    let steps = (len / step).ceil().max(1.0) as usize;
    let h = 1.0 / steps as f64;
    let at = |t: f64| -> Vec<f64> { (0..n).map(|i| from[i] + t * dir[i]).collect() };
    scratch.resize(state.nrows(), state.ncols());
    let s = scratch;
    dir_matrix_into(&DirData::at(chart, from, &dir)?, true, &mut s.g0);
    for step_idx in 0..steps {
        let t = step_idx as f64 * h;
        dir_matrix_into(&DirData::at(chart, &at(t + 0.5 * h), &dir)?, true, &mut s.gm);
        dir_matrix_into(&DirData::at(chart, &at(t + h), &dir)?, true, &mut s.g1);
        // k1 = −G0 v; k2 = −Gm (v + h/2 k1); k3 = −Gm (v + h/2 k2);
        // k4 = −G1 (v + h k3); v += h/6 (k1 + 2k2 + 2k3 + k4).
        neg_mul_into(&mut s.k1, &s.g0, state);
        axpy_into(&mut s.tmp, state, &s.k1, 0.5 * h);
        neg_mul_into(&mut s.k2, &s.gm, &s.tmp);
        axpy_into(&mut s.tmp, state, &s.k2, 0.5 * h);
        neg_mul_into(&mut s.k3, &s.gm, &s.tmp);
        axpy_into(&mut s.tmp, state, &s.k3, h);
        neg_mul_into(&mut s.k4, &s.g1, &s.tmp);
        let (c1, c2) = (h / 6.0, h / 3.0);
        let sv = state.as_mut_slice();
        let (k1, k2, k3, k4) = (
            s.k1.as_slice(),
            s.k2.as_slice(),
            s.k3.as_slice(),
            s.k4.as_slice(),
        );
        for i in 0..sv.len() {
            sv[i] += c1 * (k1[i] + k4[i]) + c2 * (k2[i] + k3[i]);
        }
        std::mem::swap(&mut s.g0, &mut s.g1);
    }
    Ok(())
}

struct Rk4Scratch {
    g0: DMatrix<f64>,
    gm: DMatrix<f64>,
    g1: DMatrix<f64>,
    k1: DMatrix<f64>,
    k2: DMatrix<f64>,
    k3: DMatrix<f64>,
    k4: DMatrix<f64>,
    tmp: DMatrix<f64>,
}

impl Rk4Scratch {
    fn new() -> Rk4Scratch {
        Rk4Scratch {
            g0: DMatrix::zeros(0, 0),
            gm: DMatrix::zeros(0, 0),
            g1: DMatrix::zeros(0, 0),
            k1: DMatrix::zeros(0, 0),
            k2: DMatrix::zeros(0, 0),
            k3: DMatrix::zeros(0, 0),
            k4: DMatrix::zeros(0, 0),
            tmp: DMatrix::zeros(0, 0),
        }
    }

    fn resize(&mut self, nn: usize, cols: usize) {
        if self.g0.nrows() != nn {
            self.g0 = DMatrix::zeros(nn, nn);
            self.gm = DMatrix::zeros(nn, nn);
            self.g1 = DMatrix::zeros(nn, nn);
        }
        if self.k1.nrows() != nn || self.k1.ncols() != cols {
            self.k1 = DMatrix::zeros(nn, cols);
            self.k2 = DMatrix::zeros(nn, cols);
            self.k3 = DMatrix::zeros(nn, cols);
            self.k4 = DMatrix::zeros(nn, cols);
            self.tmp = DMatrix::zeros(nn, cols);
        }
    }
}

/// `out = base + c·k`, elementwise.
fn axpy_into(out: &mut DMatrix<f64>, base: &DMatrix<f64>, k: &DMatrix<f64>, c: f64) {
    let (o, b, kk) = (out.as_mut_slice(), base.as_slice(), k.as_slice());
    for i in 0..o.len() {
        o[i] = b[i] + c * kk[i];
    }
}

/// `out = −g·m` for the small column-major matrices of the transport loop;
/// avoids the general-gemm dispatch overhead.
fn neg_mul_into(out: &mut DMatrix<f64>, g: &DMatrix<f64>, m: &DMatrix<f64>) {
    let nn = g.nrows();
    let cols = m.ncols();
    let gs = g.as_slice();
    let ms = m.as_slice();
    let os = out.as_mut_slice();
    for c in 0..cols {
        let oc = &mut os[c * nn..(c + 1) * nn];
        oc.fill(0.0);
        for j in 0..nn {
            let a = -ms[c * nn + j];
            if a != 0.0 {
                let gcol = &gs[j * nn..(j + 1) * nn];
                for i in 0..nn {
                    oc[i] += a * gcol[i];
                }
            }
        }
    }
}

fn integrate(
    chart: &ChartConnection,
    path: &CurvePath,
    init: &DMatrix<f64>,
    opts: &OdeOpts,
) -> Result<(DMatrix<f64>, f64), SolverError> {
    let run = |step: f64| -> Result<DMatrix<f64>, SolverError> {
        let mut state = init.clone();
        let mut scratch = Rk4Scratch::new();
        for w in path.vertices.windows(2) {
            rk4_segment(chart, &w[0], &w[1], &mut state, step, &mut scratch)?;
        }
        Ok(state)
    };
    let coarse = run(opts.step)?;
    if !opts.richardson {
        return Ok((coarse, f64::NAN));
    }
    let fine = run(0.5 * opts.step)?;
    let est = (&coarse - &fine).amax() / 15.0;
    let budget = opts.err_budget * path.length().max(1.0);
    if est > budget {
        return Err(SolverError::Accuracy { est, budget });
    }
    Ok((fine, est))
}

/// Transport `H0` along `path` with the prolonged connection.
pub fn transport(
    chart: &ChartConnection,
    h0: &Tractor2Sym,
    path: &CurvePath,
    opts: &OdeOpts,
) -> Result<Tractor2Sym, SolverError> {
    let n = chart.dim();
    let v0 = sym_to_coords(&h0.to_matrix());
    let init = DMatrix::from_column_slice(v0.len(), 1, v0.as_slice());
    let (v, _) = integrate(chart, path, &init, opts)?;
    Ok(Tractor2Sym::from_matrix(&coords_to_sym(
        &v.column(0).into_owned(),
        n + 1,
    )))
}

/// Fundamental transport matrix along `path` in the canonical symmetric
/// basis of `S²ℝ^{n+1}`.
pub fn transport_matrix(
    chart: &ChartConnection,
    path: &CurvePath,
    opts: &OdeOpts,
) -> Result<DMatrix<f64>, SolverError> {
    let nn = sym_dim(chart.dim() + 1);
    let (u, _) = integrate(chart, path, &DMatrix::identity(nn, nn), opts)?;
    Ok(u)
}

/// Holonomy of a closed loop based at its first vertex.
pub fn holonomy(
    chart: &ChartConnection,
    lp: &CurvePath,
    opts: &OdeOpts,
) -> Result<DMatrix<f64>, SolverError> {
    let gap = lp.closure_gap();
    if gap > 1e-12 {
        return Err(SolverError::NotClosed(gap));
    }
    transport_matrix(chart, lp, opts)
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    pub ode: OdeOpts,
    /// Relative SVD threshold (`tol_rank`).
    pub tol_rel: f64,
    /// Absolute noise floor under which a stacked obstruction counts as zero.
    pub noise_floor: f64,
    pub loop_seed: u64,
    /// Points per axis of the verification lattice.
    pub verify_grid: usize,
    /// Apply the base-point curvature obstruction before the loops.
    pub curvature_prefilter: bool,
    /// Error out (instead of reporting) when the tolerance sweep disagrees.
    pub strict_rank_sweep: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            ode: OdeOpts::default(),
            tol_rel: 1e-8,
            noise_floor: 1e-7,
            loop_seed: 1,
            verify_grid: 5,
            curvature_prefilter: true,
            strict_rank_sweep: false,
        }
    }
}

/// Singular-value bookkeeping from the kernel intersection. "Retained"
/// singular values were counted nonzero (obstructed directions); "discarded"
/// ones were treated as zero (kernel directions).
#[derive(Debug, Clone)]
pub struct RankReport {
    /// Solution dimension at absolute floors 1e-7 … 1e-11.
    pub dims_per_decade: Vec<(f64, usize)>,
    pub smallest_retained: f64,
    pub largest_discarded: f64,
    pub noise_floor: f64,
}

impl RankReport {
    pub fn stable(&self) -> bool {
        self.dims_per_decade.windows(2).all(|w| w[0].1 == w[1].1)
    }

    /// Separation between the nonzero and zero singular-value clusters; the
    /// denominator falls back to the noise floor when nothing was discarded.
    pub fn gap(&self) -> f64 {
        if self.smallest_retained == f64::INFINITY {
            return f64::INFINITY;
        }
        let den = if self.largest_discarded > 0.0 {
            self.largest_discarded
        } else {
            self.noise_floor
        };
        self.smallest_retained / den
    }
}

/// Basis of prolonged-parallel sections at a base point.
#[derive(Debug, Clone)]
pub struct SolutionBasis {
    pub base_point: Vec<f64>,
    /// Frobenius-orthonormal on the matrix forms.
    pub basis: Vec<Tractor2Sym>,
    pub dim: usize,
    /// Max prolonged-derivative residual over the verification grid.
    pub residual_score: f64,
    pub rank_report: RankReport,
}

/// One intersection pass. Each stage is `(obstruction, floor multiplier)`;
/// a singular value of `O·V` at most `max(tol_rel·σmax, floor·mult)` counts
/// as zero and its right-singular direction survives into the next `V`.
fn intersect_kernels(
    stages: &[(DMatrix<f64>, f64)],
    nn: usize,
    tol_rel: f64,
    floor: f64,
) -> (DMatrix<f64>, f64, f64) {
    let mut v = DMatrix::<f64>::identity(nn, nn);
    let mut smallest_retained = f64::INFINITY;
    let mut largest_discarded: f64 = 0.0;
    for (o, mult) in stages {
        if v.ncols() == 0 {
            break;
        }
        let a = o * &v;
        let svd = a.svd(false, true);
        let svs = &svd.singular_values;
        let smax = svs.iter().fold(0.0f64, |acc, s| acc.max(*s));
        let cut = (tol_rel * smax).max(floor * mult);
        let vt = svd.v_t.as_ref().unwrap();
        let mut null_idx = Vec::new();
        for i in 0..svs.len() {
            if svs[i] <= cut {
                null_idx.push(i);
                largest_discarded = largest_discarded.max(svs[i]);
            } else {
                smallest_retained = smallest_retained.min(svs[i]);
            }
        }
        let mut next = DMatrix::zeros(v.nrows(), null_idx.len());
        for (j, &i) in null_idx.iter().enumerate() {
            next.set_column(j, &(&v * vt.row(i).transpose()));
        }
        v = next;
    }
    (v, smallest_retained, largest_discarded)
}

/// Loop family used by [`solve_space`]: based coordinate-plane rectangles at
/// three scales for every index pair, plus four seeded random quadrilaterals.
pub fn loop_family(chart: &ChartConnection, x0: &[f64], seed: u64) -> Vec<CurvePath> {
    let n = chart.dim();
    let dom = chart.domain();
    let mut loops = Vec::new();
    let margin = |i: usize| -> f64 { (x0[i] - dom.lo[i]).min(dom.hi[i] - x0[i]).max(0.0) };
    for i in 0..n {
        for j in (i + 1)..n {
            for scale in [0.2, 0.5, 0.8] {
                loops.push(CurvePath::based_rectangle(
                    x0,
                    i,
                    j,
                    scale * margin(i),
                    scale * margin(j),
                ));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..4 {
        let mut vertices = vec![x0.to_vec()];
        for _ in 0..3 {
            let p: Vec<f64> = (0..n)
                .map(|i| {
                    let c = 0.5 * (dom.lo[i] + dom.hi[i]);
                    let hw = 0.425 * (dom.hi[i] - dom.lo[i]);
                    c + rng.random_range(-hw..hw)
                })
                .collect();
            vertices.push(p);
        }
        vertices.push(x0.to_vec());
        loops.push(CurvePath::polyline(vertices));
    }
    loops
}

/// Base-point curvature obstruction matrices `K_ij = ∂_i F_j − ∂_j F_i +
/// [F_i, F_j]`; parallel sections lie in every kernel. Finite differences
/// are fourth order and the stage floor is generous (see `solve_space`), so
/// true solution directions cannot be discarded here.
fn curvature_obstructions(
    chart: &ChartConnection,
    x0: &[f64],
) -> Result<Vec<DMatrix<f64>>, SolverError> {
    let n = chart.dim();
    let dom = chart.domain();
    let h = 1e-2
        * dom
            .half_widths()
            .iter()
            .fold(f64::INFINITY, |a, b| a.min(*b));
    for i in 0..n {
        if x0[i] - 2.0 * h < dom.lo[i] || x0[i] + 2.0 * h > dom.hi[i] {
            return Ok(Vec::new());
        }
    }
    let unit = |c: usize| -> Vec<f64> {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        e
    };
    let f_at = |x: &[f64], c: usize| -> Result<DMatrix<f64>, SolverError> {
        Ok(em_dir_matrix(&chart.data(x)?, &unit(c)))
    };
    let mut dfs = Vec::new(); // ∂_i F_j
    for i in 0..n {
        let mut row = Vec::new();
        for j in 0..n {
            let shifted = |k: f64| -> Result<DMatrix<f64>, SolverError> {
                let mut x = x0.to_vec();
                x[i] += k * h;
                f_at(&x, j)
            };
            let m = (-shifted(2.0)? + 8.0 * shifted(1.0)? - 8.0 * shifted(-1.0)?
                + shifted(-2.0)?)
                / (12.0 * h);
            row.push(m);
        }
        dfs.push(row);
    }
    let mut out = Vec::new();
    for i in 0..n {
        let fi = f_at(x0, i)?;
        for j in (i + 1)..n {
            let fj = f_at(x0, j)?;
            out.push(&dfs[i][j] - &dfs[j][i] + &fi * &fj - &fj * &fi);
        }
    }
    Ok(out)
}

/// Determine the space of prolonged-parallel sections at `x0` by holonomy
/// kernel intersection, then verify each basis element over a lattice.
pub fn solve_space(
    chart: &ChartConnection,
    x0: &[f64],
    cfg: &SolveConfig,
) -> Result<SolutionBasis, SolverError> {
    let n = chart.dim();
    let nn = sym_dim(n + 1);

    let mut stages: Vec<(DMatrix<f64>, f64)> = Vec::new();
    if cfg.curvature_prefilter {
        for k in curvature_obstructions(chart, x0)? {
            stages.push((k, 1e2));
        }
    }
    let id = DMatrix::<f64>::identity(nn, nn);
    for lp in loop_family(chart, x0, cfg.loop_seed) {
        let hol = holonomy(chart, &lp, &cfg.ode)?;
        stages.push((hol - &id, 1.0));
    }

    let (v, smallest_retained, largest_discarded) =
        intersect_kernels(&stages, nn, cfg.tol_rel, cfg.noise_floor);
    let dim = v.ncols();

    let mut dims_per_decade = Vec::new();
    for exp in 7..=11 {
        let floor = 10f64.powi(-exp);
        let (vd, _, _) = intersect_kernels(&stages, nn, cfg.tol_rel, floor);
        dims_per_decade.push((floor, vd.ncols()));
    }
    let rank_report = RankReport {
        dims_per_decade,
        smallest_retained,
        largest_discarded,
        noise_floor: cfg.noise_floor,
    };
    if cfg.strict_rank_sweep && !rank_report.stable() {
        return Err(SolverError::RankUnstable(
            rank_report.dims_per_decade.iter().map(|d| d.1).collect(),
        ));
    }

    // Frobenius orthonormalization on the matrix forms.
    let mut basis_mats: Vec<DMatrix<f64>> = Vec::new();
    for k in 0..v.ncols() {
        let mut m = coords_to_sym(&v.column(k).into_owned(), n + 1);
        for b in &basis_mats {
            let proj = m.dot(b);
            m -= proj * b;
        }
        let norm = m.norm();
        if norm > 1e-12 {
            basis_mats.push(m / norm);
        }
    }
    let basis: Vec<Tractor2Sym> = basis_mats.iter().map(Tractor2Sym::from_matrix).collect();

    let residual_score = if basis.is_empty() {
        0.0
    } else {
        verification_residual(chart, x0, &basis, cfg)?
    };

    Ok(SolutionBasis {
        base_point: x0.to_vec(),
        basis,
        dim,
        residual_score,
        rank_report,
    })
}

/// Max prolonged-derivative residual of transported basis elements over the
/// verification lattice. The candidate field is defined by straight-path
/// transport from the base point, so every stencil point is reached along
/// its own path; the fourth-order finite difference then probes genuine
/// path-dependence, which is exactly the failure mode of a non-parallel
/// candidate.
fn verification_residual(
    chart: &ChartConnection,
    x0: &[f64],
    basis: &[Tractor2Sym],
    cfg: &SolveConfig,
) -> Result<f64, SolverError> {
    let n = chart.dim();
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let arm_opts = OdeOpts {
        richardson: false,
        ..cfg.ode
    };
    for g in chart.domain().interior_lattice(cfg.verify_grid, 0.9) {
        let u_g = transport_matrix(chart, &CurvePath::line(x0, &g), &arm_opts)?;
        let d = chart.data(&g)?;
        // Straight-path transports from the base point to each stencil node,
        // shared by every basis element.
        let mut arms = Vec::with_capacity(n);
        for c in 0..n {
            let mut per_offset = Vec::with_capacity(4);
            for off in [-2.0, -1.0, 1.0, 2.0] {
                let mut target = g.clone();
                target[c] += off * h;
                per_offset.push(transport_matrix(
                    chart,
                    &CurvePath::line(x0, &target),
                    &arm_opts,
                )?);
            }
            arms.push(per_offset);
        }
        for b in basis {
            let v0 = sym_to_coords(&b.to_matrix());
            let vg = &u_g * &v0;
            let h_at = Tractor2Sym::from_matrix(&coords_to_sym(&vg, n + 1));
            for c in 0..n {
                let vals: Vec<DVector<f64>> = arms[c].iter().map(|a| a * &v0).collect();
                let deriv =
                    (-&vals[3] + 8.0 * &vals[2] - 8.0 * &vals[1] + &vals[0]) / (12.0 * h);
                let part = Tractor2Sym::from_matrix(&coords_to_sym(&deriv, n + 1));
                let act = em_action(&d, &h_at, c);
                let res = Tractor2Sym {
                    zeta: &part.zeta + &act.zeta,
                    lambda: &part.lambda + &act.lambda,
                    rho: part.rho + act.rho,
                };
                worst = worst.max(res.max_abs());
            }
        }
    }
    Ok(worst)
}

/// Transport a basis element from the base point to `x` along the straight
/// path; returns the full package and its `ζ` slot.
pub fn evaluate_solution(
    chart: &ChartConnection,
    base_point: &[f64],
    elem: &Tractor2Sym,
    x: &[f64],
    opts: &OdeOpts,
) -> Result<(Tractor2Sym, DMatrix<f64>), SolverError> {
    let h = transport(chart, elem, &CurvePath::line(base_point, x), opts)?;
    let zeta = h.zeta.clone();
    Ok((h, zeta))
}

/// Consistency of a transported solution at `x`: rebuild the splitting
/// `L(ζ)` from finite differences of the transported `ζ` field and compare
/// with the transported package itself.
pub fn consistency_residual(
    chart: &ChartConnection,
    base_point: &[f64],
    elem: &Tractor2Sym,
    x: &[f64],
    opts: &OdeOpts,
) -> Result<f64, SolverError> {
    let n = chart.dim();
    let nf = n as f64;
    let h_fd = 1e-2;
    let d = chart.data(x)?;
    let zeta_at = |y: &[f64]| -> Result<DMatrix<f64>, SolverError> {
        Ok(transport(chart, elem, &CurvePath::line(base_point, y), opts)?.zeta)
    };
    let (h_ref, z) = evaluate_solution(chart, base_point, elem, x, opts)?;

    let divergence = |y: &[f64], zy: &DMatrix<f64>, dzy: &[DMatrix<f64>]| -> Result<DVector<f64>, SolverError> {
        let dy = chart.data(y)?;
        let mut sv = DVector::<f64>::zeros(n);
        for a in 0..n {
            let mut v = 0.0;
            for b in 0..n {
                v += dzy[b][(a, b)];
                for e in 0..n {
                    v += dy.gamma[a][b][e] * zy[(e, b)];
                }
            }
            for e in 0..n {
                v += (nf - 1.0) * dy.a[e] * zy[(a, e)];
            }
            sv[a] = v;
        }
        Ok(sv)
    };
    let dzeta = |y: &[f64]| -> Result<Vec<DMatrix<f64>>, SolverError> {
        let mut out = Vec::with_capacity(n);
        for c in 0..n {
            let sample = |k: f64| -> Result<DMatrix<f64>, SolverError> {
                let mut yy = y.to_vec();
                yy[c] += k * h_fd;
                zeta_at(&yy)
            };
            out.push(
                (-sample(2.0)? + 8.0 * sample(1.0)? - 8.0 * sample(-1.0)? + sample(-2.0)?)
                    / (12.0 * h_fd),
            );
        }
        Ok(out)
    };

    let dz = dzeta(x)?;
    let s = divergence(x, &z, &dz)?;
    let lambda = -&s / (nf + 1.0);

    // ∇_a S^a via a second fourth-order stencil on S itself.
    let mut div2 = 0.0;
    for c in 0..n {
        let s_at = |k: f64| -> Result<DVector<f64>, SolverError> {
            let mut y = x.to_vec();
            y[c] += k * h_fd;
            let zy = zeta_at(&y)?;
            let dzy = dzeta(&y)?;
            divergence(&y, &zy, &dzy)
        };
        let col =
            (-s_at(2.0)? + 8.0 * s_at(1.0)? - 8.0 * s_at(-1.0)? + s_at(-2.0)?) / (12.0 * h_fd);
        div2 += col[c];
    }
    for a in 0..n {
        div2 += (nf - 1.0) * d.a[a] * s[a];
    }

    let mut ptrace = 0.0;
    for a in 0..n {
        for b in 0..n {
            ptrace += d.p[b][a] * z[(a, b)];
        }
    }
    let rho = ptrace / nf + div2 / (nf * (nf + 1.0));

    let rebuilt = Tractor2Sym {
        zeta: z,
        lambda,
        rho,
    };
    Ok((rebuilt.to_matrix() - h_ref.to_matrix()).amax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bgg::{flat_parallel_field, quadratic_family_zeta};
    use crate::chart::{klein_levi_civita, model_chart, ChartConnection, Domain, ModelParams};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn flat(n: usize) -> ChartConnection {
        ChartConnection::flat(n, Domain::symmetric(1.5, n))
    }

    #[test]
    fn flat_transport_preserves_constant_solution() {
        let c = flat(2);
        let h0 = Tractor2Sym {
            zeta: DMatrix::identity(2, 2),
            lambda: DVector::zeros(2),
            rho: 0.0,
        };
        let path = CurvePath::line(&[0.0, 0.0], &[1.0, 0.0]);
        let h1 = transport(&c, &h0, &path, &OdeOpts::default()).unwrap();
        assert!((h1.to_matrix() - h0.to_matrix()).amax() < 1e-12);
    }

    #[test]
    fn flat_transport_matches_quadratic_family() {
        let c = flat(2);
        let h0 = Tractor2Sym::from_matrix(&DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        ));
        for t in [[1.2, 0.5], [-0.7, 1.1], [0.3, -1.4]] {
            let path = CurvePath::line(&[0.0, 0.0], &t);
            let h1 = transport(&c, &h0, &path, &OdeOpts::default()).unwrap();
            let expect =
                quadratic_family_zeta(&h0.zeta, &h0.lambda, h0.rho, &[0.0, 0.0], &t);
            assert!(
                (h1.zeta.clone() - expect).amax() < 1e-10,
                "zeta mismatch at {t:?}"
            );
            assert_abs_diff_eq!(
                h1.zeta[(0, 0)],
                (1.0 - t[0]) * (1.0 - t[0]),
                epsilon = 1e-10
            );
            assert_abs_diff_eq!(h1.zeta[(0, 1)], t[1] * (t[0] - 1.0), epsilon = 1e-10);
            assert_abs_diff_eq!(h1.zeta[(1, 1)], 1.0 + t[1] * t[1], epsilon = 1e-10);
        }
    }

    #[test]
    fn transport_reverses() {
        let m = klein_levi_civita(2).unwrap();
        let h0 = Tractor2Sym {
            zeta: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7]),
            lambda: DVector::from_vec(vec![0.1, -0.5]),
            rho: 0.4,
        };
        let fwd = CurvePath::polyline(vec![
            vec![0.0, 0.0],
            vec![0.4, 0.2],
            vec![0.1, -0.45],
        ]);
        let opts = OdeOpts::default();
        let h1 = transport(&m.chart, &h0, &fwd, &opts).unwrap();
        let h2 = transport(&m.chart, &h1, &fwd.reversed(), &opts).unwrap();
        assert!((h2.to_matrix() - h0.to_matrix()).amax() < 1e-9);
    }

    #[test]
    fn flat_holonomy_is_identity() {
        let c = flat(2);
        let lp = CurvePath::based_rectangle(&[0.1, -0.2], 0, 1, 0.5, 0.7);
        let hol = holonomy(&c, &lp, &OdeOpts::default()).unwrap();
        assert!((hol - DMatrix::identity(6, 6)).amax() < 1e-9);
    }

    #[test]
    fn perturbed_holonomy_is_nontrivial_and_groups() {
        let m = model_chart("perturbed_flat", 2, &ModelParams::default()).unwrap();
        let (c, _) = m.chart.special_normalize().unwrap();
        let lp = CurvePath::based_rectangle(&[0.0, 0.0], 0, 1, 0.25, 0.25);
        let opts = OdeOpts::default();
        let hol = holonomy(&c, &lp, &opts).unwrap();
        let dev = (hol.clone() - DMatrix::identity(6, 6)).amax();
        assert!(dev > 1e-4, "holonomy too close to identity: {dev:.3e}");
        // Traversing twice squares the holonomy.
        let mut twice = lp.vertices.clone();
        twice.extend_from_slice(&lp.vertices[1..]);
        let hol2 = holonomy(&c, &CurvePath::polyline(twice), &opts).unwrap();
        assert!((hol2 - &hol * &hol).amax() < 1e-8);
    }

    #[test]
    fn solve_space_flat_dims() {
        let cfg = SolveConfig::default();
        for (n, want) in [(2usize, 6usize), (3, 10)] {
            let c = flat(n);
            let sol = solve_space(&c, &vec![0.0; n], &cfg).unwrap();
            assert_eq!(sol.dim, want, "n = {n}");
            assert!(sol.rank_report.stable());
            assert!(
                sol.residual_score < 1e-7,
                "residual {:.3e}",
                sol.residual_score
            );
            // Each basis element transports along the closed-form family.
            let x = vec![0.9; n];
            for b in &sol.basis {
                let (_, zeta) =
                    evaluate_solution(&c, &sol.base_point, b, &x, &cfg.ode).unwrap();
                let expect =
                    quadratic_family_zeta(&b.zeta, &b.lambda, b.rho, &sol.base_point, &x);
                assert!((zeta - expect).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn solve_space_klein_chart_projectively_flat() {
        let m = klein_levi_civita(2).unwrap();
        let sol = solve_space(&m.chart, &[0.0, 0.0], &SolveConfig::default()).unwrap();
        assert_eq!(sol.dim, 6);
    }

    #[test]
    fn solve_space_perturbed_is_obstructed() {
        let m = model_chart("perturbed_flat", 2, &ModelParams::default()).unwrap();
        let (c, _) = m.chart.special_normalize().unwrap();
        let sol = solve_space(&c, &[0.0, 0.0], &SolveConfig::default()).unwrap();
        assert_eq!(sol.dim, 0);
        assert!(sol.rank_report.stable());
        assert!(
            sol.rank_report.gap() >= 1e4,
            "gap {:.3e}",
            sol.rank_report.gap()
        );
    }

    #[test]
    fn path_independence_for_solutions() {
        let c = flat(2);
        let cfg = SolveConfig::default();
        let sol = solve_space(&c, &[0.0, 0.0], &cfg).unwrap();
        let b = &sol.basis[0];
        let target = [1.1, -0.8];
        let paths = [
            CurvePath::line(&[0.0, 0.0], &target),
            CurvePath::polyline(vec![vec![0.0, 0.0], vec![1.1, 0.0], target.to_vec()]),
            CurvePath::polyline(vec![
                vec![0.0, 0.0],
                vec![-0.5, -1.0],
                vec![0.8, -1.2],
                target.to_vec(),
            ]),
        ];
        let results: Vec<_> = paths
            .iter()
            .map(|p| transport(&c, b, p, &cfg.ode).unwrap().to_matrix())
            .collect();
        for r in &results[1..] {
            assert!((r - &results[0]).amax() < 1e-8);
        }
    }

    #[test]
    fn consistency_of_transported_solutions() {
        let c = flat(2);
        let zeta0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.3]);
        let lambda0 = DVector::from_vec(vec![0.2, -0.3]);
        let f = flat_parallel_field(2, &zeta0, &lambda0, 0.5, &[0.0, 0.0]);
        let h0 = f.eval(&[0.0, 0.0]).unwrap();
        let opts = OdeOpts::default();
        for x in c.domain().sample(10, 13) {
            // Stay away from the boundary so FD stencils remain inside.
            let x: Vec<f64> = x.iter().map(|v| 0.8 * v).collect();
            let r = consistency_residual(&c, &[0.0, 0.0], &h0, &x, &opts).unwrap();
            assert!(r < 1e-6, "consistency {r:.3e} at {x:?}");
        }
    }

    #[test]
    fn solution_dim_invariant_under_projective_change() {
        // Change the flat chart by a closed Υ = df (a different special
        // scale, with nonvanishing density connection form) and by
        // normalization back; the dimension must not move.
        let c = flat(2);
        let ups = crate::chart::Upsilon {
            components: vec![
                crate::expr::Expression::parse("0.4*x2 - 0.6*x1", 2).unwrap(),
                crate::expr::Expression::parse("0.4*x1 + 0.2*x2", 2).unwrap(),
            ],
        };
        let changed = c.projective_change(&ups).unwrap();
        assert!(changed.is_special());
        let cfg = SolveConfig::default();
        let d0 = solve_space(&c, &[0.0, 0.0], &cfg).unwrap().dim;
        let d1 = solve_space(&changed, &[0.0, 0.0], &cfg).unwrap().dim;
        assert_eq!(d0, d1);
        let (renorm, _) = changed.special_normalize().unwrap();
        let d2 = solve_space(&renorm, &[0.0, 0.0], &cfg).unwrap().dim;
        assert_eq!(d0, d2);
    }
}
