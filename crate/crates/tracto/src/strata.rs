//! Pointwise classification of metrizability solutions and the geometry of
//! their degeneracy loci: strata by signature, bisection-located
//! hypersurfaces, reconstructed metrics, totally geodesic boundaries,
//! induced boundary data, and projective compactification order.
//!
//! Branch dispatch follows the rank of `L(ζ)`: rank `n+1` strata are cut out
//! by the sign of `τ = det ζ` (a weight-2 defining density for the locus),
//! rank `n` strata by the sign of the 1-density `σ = ⟨X, I⟩` built from the
//! signed adjugate, with `σ² = ±det ζ`. Points where the rank drops below
//! `n` are reported as outside the hypotheses rather than force-classified.

use crate::bgg::split_metrizability;
use crate::chart::{ChartConnection, ChartError, Domain, SymExprs};
use crate::expr::Expression;
use crate::solver::{transport, CurvePath, OdeOpts, SolverError};
use crate::tractor::{
    det_weighted, kappa, signed_adjugate, spectral, CoTractorVec, Tractor2Sym, TractorError,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum StrataError {
    #[error(transparent)]
    Chart(#[from] ChartError),
    #[error(transparent)]
    Tractor(#[from] TractorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("rank of L(ζ) is {rank} < n = {n} at {x:?}: outside the hypotheses")]
    OutsideHypotheses { rank: usize, n: usize, x: Vec<f64> },
    #[error("rank of L(ζ) varies over the grid: saw {0:?}")]
    RankUnstable(Vec<usize>),
    #[error("gradient of the defining density vanishes at locus point {x:?} (|∇| = {grad:.3e})")]
    DegenerateGradient { x: Vec<f64>, grad: f64 },
    #[error("branch mismatch: operation applies to the rank-{expected} branch, found rank {found}")]
    BranchMismatch { expected: usize, found: usize },
    #[error("empty degeneracy locus")]
    EmptyLocus,
    #[error("rank of L(τ) is {0}, expected 1")]
    NotRankOne(usize),
    #[error("geodesic left the chart domain at {0:?}")]
    GeodesicExit(Vec<f64>),
    #[error("{0}")]
    Other(String),
}

/// A metrizability solution presented as an evaluable field: either a
/// closed-form `ζ` (models), or transported tractor data from a base point.
#[derive(Clone)]
pub enum SolutionField<'a> {
    ClosedForm {
        chart: &'a ChartConnection,
        zeta: &'a SymExprs,
    },
    Transported {
        chart: &'a ChartConnection,
        base_point: Vec<f64>,
        h0: Tractor2Sym,
        ode: OdeOpts,
    },
}

impl<'a> SolutionField<'a> {
    pub fn chart(&self) -> &'a ChartConnection {
        match self {
            SolutionField::ClosedForm { chart, .. } => chart,
            SolutionField::Transported { chart, .. } => chart,
        }
    }

    pub fn dim(&self) -> usize {
        self.chart().dim()
    }

    /// The full prolonged package `H = L(ζ)` at `x`.
    pub fn h_at(&self, x: &[f64]) -> Result<Tractor2Sym, StrataError> {
        match self {
            SolutionField::ClosedForm { chart, zeta } => {
                Ok(split_metrizability(&chart.data(x)?, zeta)?)
            }
            SolutionField::Transported {
                chart,
                base_point,
                h0,
                ode,
            } => Ok(transport(chart, h0, &CurvePath::line(base_point, x), ode)?),
        }
    }

    pub fn zeta_at(&self, x: &[f64]) -> Result<DMatrix<f64>, StrataError> {
        match self {
            SolutionField::ClosedForm { zeta, .. } => {
                Ok(zeta.eval_matrix(x).map_err(ChartError::from)?)
            }
            _ => Ok(self.h_at(x)?.zeta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    Plus,
    Zero,
    Minus,
}

impl Stratum {
    pub fn label(&self) -> &'static str {
        match self {
            Stratum::Plus => "plus",
            Stratum::Zero => "zero",
            Stratum::Minus => "minus",
        }
    }

    fn of(value: f64, tol: f64) -> Stratum {
        if value > tol {
            Stratum::Plus
        } else if value < -tol {
            Stratum::Minus
        } else {
            Stratum::Zero
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `rank L(ζ) = n+1`: order-2 compactification geometry.
    Full,
    /// `rank L(ζ) = n`: scalar-flat, order-1 geometry.
    Corank1,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifyTols {
    /// Relative eigenvalue tolerance for ranks and signatures.
    pub tol_rank: f64,
    /// Absolute tolerance on defining densities for the zero stratum.
    pub tol_zero: f64,
}

impl Default for ClassifyTols {
    fn default() -> Self {
        ClassifyTols {
            tol_rank: 1e-9,
            tol_zero: 1e-10,
        }
    }
}

/// Classification of one point.
#[derive(Debug, Clone)]
pub struct PointClass {
    pub x: Vec<f64>,
    pub rank_l: usize,
    pub sig_l: (usize, usize, usize),
    pub sig_zeta: (usize, usize, usize),
    pub branch: Branch,
    pub stratum: Stratum,
    /// `det ζ`, the weight-2 classification density.
    pub tau: f64,
    /// Sign-harmonized `σ = ⟨X, I⟩` on the rank-n branch.
    pub sigma: Option<f64>,
    /// Signed-adjugate factor `I` (frame components) on the rank-n branch.
    pub adj_factor: Option<DVector<f64>>,
    /// Generalized scalar curvature `det L(ζ)` (ε²-normalized).
    pub s_det: f64,
}

/// Classify a single point. Fails when `rank L(ζ) < n`.
pub fn classify_point(
    field: &SolutionField,
    x: &[f64],
    tols: &ClassifyTols,
) -> Result<PointClass, StrataError> {
    let n = field.dim();
    let h = field.h_at(x)?;
    let m = h.to_matrix();
    let sl = spectral(&m, tols.tol_rank);
    let rank_l = sl.rank();
    if rank_l < n {
        return Err(StrataError::OutsideHypotheses {
            rank: rank_l,
            n,
            x: x.to_vec(),
        });
    }
    let sz = spectral(&h.zeta, tols.tol_rank);
    let tau = h.zeta.determinant();
    let (branch, stratum, sigma, adj_factor) = if rank_l == n + 1 {
        (Branch::Full, Stratum::of(tau, tols.tol_zero), None, None)
    } else {
        let sa = signed_adjugate(&h, tols.tol_rank)?;
        let i = sa
            .factor
            .as_ref()
            .map(CoTractorVec::to_frame)
            .ok_or_else(|| StrataError::Other("missing adjugate factor".into()))?;
        let sigma = i[n];
        (
            Branch::Corank1,
            Stratum::of(sigma, tols.tol_zero),
            Some(sigma),
            Some(i),
        )
    };
    Ok(PointClass {
        x: x.to_vec(),
        rank_l,
        sig_l: sl.signature,
        sig_zeta: sz.signature,
        branch,
        stratum,
        tau,
        sigma,
        adj_factor,
        s_det: sl.det,
    })
}

/// A bisection-refined point of the degeneracy locus.
#[derive(Debug, Clone)]
pub struct LocusPoint {
    pub x: Vec<f64>,
    /// Defining-density value left after bisection.
    pub value: f64,
    /// Finite-difference gradient of the defining density.
    pub grad: Vec<f64>,
    /// Unit conormal estimate.
    pub conormal: Vec<f64>,
}

/// Grid for stratum classification.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub domain: Domain,
    pub res: usize,
}

impl GridSpec {
    pub fn points(&self) -> Vec<Vec<f64>> {
        self.domain.lattice(self.res)
    }
}

#[derive(Debug, Clone)]
pub struct StrataReport {
    pub grid: GridSpec,
    pub classes: Vec<PointClass>,
    pub branch: Branch,
    pub hypersurface_points: Vec<LocusPoint>,
    /// Points the classifier refused (rank < n), kept for the record.
    pub unclassified: Vec<Vec<f64>>,
    /// Named residual maxima accumulated along the way.
    pub diagnostics: Vec<(String, f64)>,
}

/// Sign-aligned defining density for the branch: `τ = det ζ` on the full
/// branch, `σ` aligned against a reference adjugate factor on the corank-1
/// branch.
fn defining_value(
    field: &SolutionField,
    x: &[f64],
    branch: Branch,
    reference: Option<&DVector<f64>>,
    tols: &ClassifyTols,
) -> Result<(f64, Option<DVector<f64>>), StrataError> {
    match branch {
        Branch::Full => Ok((field.zeta_at(x)?.determinant(), None)),
        Branch::Corank1 => {
            let h = field.h_at(x)?;
            let sa = signed_adjugate(&h, tols.tol_rank)?;
            let mut i = sa
                .factor
                .as_ref()
                .map(CoTractorVec::to_frame)
                .ok_or_else(|| StrataError::Other("missing adjugate factor".into()))?;
            if let Some(r) = reference {
                if i.dot(r) < 0.0 {
                    i = -i;
                }
            }
            let n = field.dim();
            Ok((i[n], Some(i)))
        }
    }
}

/// Classify a grid, harmonize signs, and locate the degeneracy locus by
/// bisection along sign-changing grid edges.
pub fn locate_degeneracy(
    field: &SolutionField,
    grid: &GridSpec,
    tols: &ClassifyTols,
) -> Result<StrataReport, StrataError> {
    let n = field.dim();
    let points = grid.points();
    let mut classes = Vec::with_capacity(points.len());
    let mut unclassified = Vec::new();
    for p in &points {
        match classify_point(field, p, tols) {
            Ok(c) => classes.push(c),
            Err(StrataError::OutsideHypotheses { .. }) => unclassified.push(p.clone()),
            Err(e) => return Err(e),
        }
    }
    if classes.is_empty() {
        return Err(StrataError::Other("no classifiable grid points".into()));
    }
    let ranks: Vec<usize> = classes.iter().map(|c| c.rank_l).collect();
    let rank0 = ranks[0];
    if ranks.iter().any(|r| *r != rank0) || !unclassified.is_empty() {
        let mut seen: Vec<usize> = ranks;
        seen.sort_unstable();
        seen.dedup();
        return Err(StrataError::RankUnstable(seen));
    }
    let branch = classes[0].branch;

    // Harmonize the adjugate-factor sign across grid neighbors so σ is a
    // continuous defining density (I = Dσ is smooth; only the per-point
    // normalization flips).
    if branch == Branch::Corank1 {
        let res = grid.res;
        let strides: Vec<usize> = (0..n).map(|a| res.pow(a as u32)).collect();
        for idx in 1..classes.len() {
            let mut prev = None;
            for a in 0..n {
                if (idx / strides[a]) % res > 0 {
                    prev = Some(idx - strides[a]);
                    break;
                }
            }
            if let Some(p) = prev {
                let iref = classes[p].adj_factor.clone().unwrap();
                let icur = classes[idx].adj_factor.clone().unwrap();
                if icur.dot(&iref) < 0.0 {
                    let c = &mut classes[idx];
                    c.adj_factor = Some(-icur);
                    let s = -c.sigma.unwrap();
                    c.sigma = Some(s);
                    c.stratum = Stratum::of(s, tols.tol_zero);
                }
            }
        }
    }

    // Bisection along grid edges with a sign change.
    let res = grid.res;
    let strides: Vec<usize> = (0..n).map(|a| res.pow(a as u32)).collect();
    let value_of = |c: &PointClass| match branch {
        Branch::Full => c.tau,
        Branch::Corank1 => c.sigma.unwrap(),
    };
    let mut hypersurface_points = Vec::new();
    for idx in 0..classes.len() {
        for a in 0..n {
            if (idx / strides[a]) % res + 1 >= res {
                continue;
            }
            let jdx = idx + strides[a];
            let (vi, vj) = (value_of(&classes[idx]), value_of(&classes[jdx]));
            if vi == 0.0 || vi.signum() == vj.signum() {
                continue;
            }
            let reference = classes[idx].adj_factor.clone();
            let mut lo = classes[idx].x.clone();
            let mut hi = classes[jdx].x.clone();
            let mut flo = vi;
            let mut point = lo.clone();
            let mut fmid = vi;
            for _ in 0..200 {
                point = lo
                    .iter()
                    .zip(&hi)
                    .map(|(l, h)| 0.5 * (l + h))
                    .collect::<Vec<f64>>();
                fmid = defining_value(field, &point, branch, reference.as_ref(), tols)?.0;
                if fmid.abs() <= 1e-10 {
                    break;
                }
                if fmid.signum() == flo.signum() {
                    lo = point.clone();
                    flo = fmid;
                } else {
                    hi = point.clone();
                }
            }
            // Gradient and conormal by central differences.
            let hstep = 1e-5;
            let mut gradv = vec![0.0; n];
            for c in 0..n {
                let mut xp = point.clone();
                xp[c] += hstep;
                let mut xm = point.clone();
                xm[c] -= hstep;
                let fp = defining_value(field, &xp, branch, reference.as_ref(), tols)?.0;
                let fm = defining_value(field, &xm, branch, reference.as_ref(), tols)?.0;
                gradv[c] = (fp - fm) / (2.0 * hstep);
            }
            let gnorm = gradv.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm < 1e-6 {
                return Err(StrataError::DegenerateGradient {
                    x: point,
                    grad: gnorm,
                });
            }
            hypersurface_points.push(LocusPoint {
                x: point,
                value: fmid,
                grad: gradv.clone(),
                conormal: gradv.iter().map(|v| v / gnorm).collect(),
            });
        }
    }

    Ok(StrataReport {
        grid: grid.clone(),
        classes,
        branch,
        hypersurface_points,
        unclassified,
        diagnostics: Vec::new(),
    })
}

/// Reconstructed metric data at a point off the degeneracy locus.
#[derive(Debug, Clone)]
pub struct MetricData {
    pub g_inv: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub scalar_curvature: f64,
    /// Generalized scalar curvature `det L(ζ)` (ε²-normalized).
    pub s_det: f64,
    /// How far `Γ^g − Γ` is from the projective-change pattern
    /// `Υ_b δ^a_c + Υ_c δ^a_b`.
    pub upsilon_pattern_residual: f64,
    /// Antisymmetry of the finite-difference derivative of Υ (closedness).
    pub upsilon_closed_residual: f64,
}

fn christoffels_of_g(
    field: &SolutionField,
    x: &[f64],
    fd: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>), StrataError> {
    let n = field.dim();
    let g_at = |y: &[f64]| -> Result<DMatrix<f64>, StrataError> {
        let z = field.zeta_at(y)?;
        let tau = z.determinant();
        let ginv = tau.signum() * tau * z;
        ginv.try_inverse()
            .ok_or_else(|| StrataError::Other(format!("metric inversion failed at {y:?}")))
    };
    let g = g_at(x)?;
    let ginv = g
        .clone()
        .try_inverse()
        .ok_or_else(|| StrataError::Other("metric inversion failed".into()))?;
    let mut dg = Vec::with_capacity(n);
    for c in 0..n {
        let sample = |k: f64| -> Result<DMatrix<f64>, StrataError> {
            let mut y = x.to_vec();
            y[c] += k * fd;
            g_at(&y)
        };
        dg.push(
            (-sample(2.0)? + 8.0 * sample(1.0)? - 8.0 * sample(-1.0)? + sample(-2.0)?)
                / (12.0 * fd),
        );
    }
    let mut gam = vec![DMatrix::<f64>::zeros(n, n); n];
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for l in 0..n {
                    v += 0.5 * ginv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                }
                gam[k][(i, j)] = v;
            }
        }
    }
    Ok((g, ginv, gam))
}

/// Rebuild the metric `g⁻¹ = sgn(τ)·τ·ζ` and its scalar curvature by
/// finite-difference Levi-Civita data; an independent route against
/// `S = det L(ζ)`.
pub fn reconstruct_metric(
    field: &SolutionField,
    x: &[f64],
    tols: &ClassifyTols,
) -> Result<MetricData, StrataError> {
    let n = field.dim();
    let fd = 1e-3;
    let (g, ginv, gam) = christoffels_of_g(field, x, fd)?;

    // ∂Γ^g via nested central stencils.
    let mut dgam = vec![vec![DMatrix::<f64>::zeros(n, n); n]; n];
    for c in 0..n {
        let sample = |k: f64| -> Result<Vec<DMatrix<f64>>, StrataError> {
            let mut y = x.to_vec();
            y[c] += k * fd;
            Ok(christoffels_of_g(field, &y, fd)?.2)
        };
        let p2 = sample(2.0)?;
        let p1 = sample(1.0)?;
        let m1 = sample(-1.0)?;
        let m2 = sample(-2.0)?;
        for k in 0..n {
            dgam[c][k] = (-&p2[k] + 8.0 * &p1[k] - 8.0 * &m1[k] + &m2[k]) / (12.0 * fd);
        }
    }
    // Ric_bd = ∂_a Γ^a_{bd} − ∂_b Γ^a_{ad} + Γ^a_{ae}Γ^e_{bd} − Γ^a_{be}Γ^e_{ad}.
    let mut scalar = 0.0;
    for b in 0..n {
        for d in 0..n {
            let mut ric = 0.0;
            for a in 0..n {
                ric += dgam[a][a][(b, d)] - dgam[b][a][(a, d)];
                for e in 0..n {
                    ric += gam[a][(a, e)] * gam[e][(b, d)] - gam[a][(b, e)] * gam[e][(a, d)];
                }
            }
            scalar += ginv[(b, d)] * ric;
        }
    }

    let h = field.h_at(x)?;
    let s_det = spectral(&h.to_matrix(), tols.tol_rank).det;

    // Γ^g must differ from the chart connection by a projective change with
    // closed Υ.
    let chart_gamma = field.chart().gamma_at(x)?;
    let nf = n as f64;
    let ups_from = |gam_y: &[DMatrix<f64>], cg: &crate::chart::T3| -> Vec<f64> {
        (0..n)
            .map(|c| {
                let mut t = 0.0;
                for a in 0..n {
                    t += gam_y[a][(a, c)] - cg[a][a][c];
                }
                t / (nf + 1.0)
            })
            .collect()
    };
    let ups = ups_from(&gam, &chart_gamma);
    let mut pattern: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let diff = gam[a][(b, c)] - chart_gamma[a][b][c];
                let mut want = 0.0;
                if a == c {
                    want += ups[b];
                }
                if a == b {
                    want += ups[c];
                }
                pattern = pattern.max((diff - want).abs());
            }
        }
    }
    let ups_at = |y: &[f64]| -> Result<Vec<f64>, StrataError> {
        let gam_y = christoffels_of_g(field, y, fd)?.2;
        let cg = field.chart().gamma_at(y)?;
        Ok(ups_from(&gam_y, &cg))
    };
    let mut closed: f64 = 0.0;
    let hstep = 1e-3;
    let mut dups = vec![vec![0.0; n]; n];
    for c in 0..n {
        let mut yp = x.to_vec();
        yp[c] += hstep;
        let mut ym = x.to_vec();
        ym[c] -= hstep;
        let up = ups_at(&yp)?;
        let um = ups_at(&ym)?;
        for b in 0..n {
            dups[c][b] = (up[b] - um[b]) / (2.0 * hstep);
        }
    }
    for c in 0..n {
        for b in 0..n {
            closed = closed.max((dups[c][b] - dups[b][c]).abs());
        }
    }

    Ok(MetricData {
        g_inv: g
            .clone()
            .try_inverse()
            .ok_or_else(|| StrataError::Other("metric inversion failed".into()))?,
        g,
        scalar_curvature: scalar,
        s_det,
        upsilon_pattern_residual: pattern,
        upsilon_closed_residual: closed,
    })
}

/// Totally-geodesic diagnostics along the corank-1 locus.
#[derive(Debug, Clone)]
pub struct TgReport {
    /// max over samples of |σ(x(t))| / t².
    pub max_deviation: f64,
    /// max |σ| at parameter 0.1.
    pub sigma_at_01: f64,
    pub samples: usize,
}

fn tangent_frame(conormal: &[f64]) -> Vec<DVector<f64>> {
    let n = conormal.len();
    let nu = DVector::from_column_slice(conormal);
    let mut frame: Vec<DVector<f64>> = Vec::new();
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        let mut v = &e - &nu * nu.dot(&e);
        for f in &frame {
            let p = f.dot(&v);
            v -= p * f;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            frame.push(v / norm);
        }
        if frame.len() == n - 1 {
            break;
        }
    }
    frame
}

fn geodesic_trace(
    chart: &ChartConnection,
    x0: &[f64],
    v0: &DVector<f64>,
    t_end: f64,
    samples: &[f64],
) -> Result<Vec<Vec<f64>>, StrataError> {
    let n = chart.dim();
    let h = 1e-3;
    let steps = (t_end / h).ceil() as usize;
    let mut x = DVector::from_column_slice(x0);
    let mut v = v0.clone();
    let acc = |x: &DVector<f64>, v: &DVector<f64>| -> Result<DVector<f64>, StrataError> {
        if !chart.domain().contains(x.as_slice()) {
            return Err(StrataError::GeodesicExit(x.as_slice().to_vec()));
        }
        let g = chart.gamma_at(x.as_slice())?;
        let mut a = DVector::zeros(n);
        for k in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s -= g[k][i][j] * v[i] * v[j];
                }
            }
            a[k] = s;
        }
        Ok(a)
    };
    let mut out = Vec::new();
    let mut next_sample = 0usize;
    for s in 0..=steps {
        let t = s as f64 * h;
        while next_sample < samples.len() && t >= samples[next_sample] - 1e-12 {
            out.push(x.as_slice().to_vec());
            next_sample += 1;
        }
        if s == steps {
            break;
        }
        let k1x = v.clone();
        let k1v = acc(&x, &v)?;
        let k2x = &v + (0.5 * h) * &k1v;
        let k2v = acc(&(&x + (0.5 * h) * &k1x), &k2x)?;
        let k3x = &v + (0.5 * h) * &k2v;
        let k3v = acc(&(&x + (0.5 * h) * &k2x), &k3x)?;
        let k4x = &v + h * &k3v;
        let k4v = acc(&(&x + h * &k3x), &k4x)?;
        x += (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    }
    Ok(out)
}

/// Shoot geodesics tangent to the locus and measure how fast `σ` leaves
/// zero; on a totally geodesic locus the deviation stays at integrator
/// noise. Guards on the corank-1 branch.
pub fn totally_geodesic_check(
    field: &SolutionField,
    locus: &[LocusPoint],
    tols: &ClassifyTols,
) -> Result<TgReport, StrataError> {
    if locus.is_empty() {
        return Err(StrataError::EmptyLocus);
    }
    let n = field.dim();
    let probe = classify_point(field, &locus[0].x, tols)?;
    if probe.branch != Branch::Corank1 {
        return Err(StrataError::BranchMismatch {
            expected: n,
            found: probe.rank_l,
        });
    }
    let chart = field.chart();
    let samples = [0.1, 0.2, 0.3];
    let mut max_dev: f64 = 0.0;
    let mut sigma01: f64 = 0.0;
    let mut count = 0usize;
    for lp in locus {
        let reference = classify_point(field, &lp.x, tols)
            .ok()
            .and_then(|c| c.adj_factor);
        for dir in tangent_frame(&lp.conormal) {
            for sign in [1.0, -1.0] {
                let v0 = sign * &dir;
                let pts = match geodesic_trace(chart, &lp.x, &v0, 0.3, &samples) {
                    Ok(p) => p,
                    Err(StrataError::GeodesicExit(_)) => continue,
                    Err(e) => return Err(e),
                };
                for (t, p) in samples.iter().zip(&pts) {
                    let (s, _) =
                        defining_value(field, p, Branch::Corank1, reference.as_ref(), tols)?;
                    max_dev = max_dev.max(s.abs() / (t * t));
                    if (*t - 0.1).abs() < 1e-12 {
                        sigma01 = sigma01.max(s.abs());
                    }
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(StrataError::Other(
            "no geodesic stayed inside the domain".into(),
        ));
    }
    Ok(TgReport {
        max_deviation: max_dev,
        sigma_at_01: sigma01,
        samples: count,
    })
}

/// Newton-project a nearby point back onto the locus along the defining
/// density's gradient.
fn project_to_locus(
    field: &SolutionField,
    start: &[f64],
    branch: Branch,
    reference: Option<&DVector<f64>>,
    tols: &ClassifyTols,
) -> Result<Vec<f64>, StrataError> {
    let n = field.dim();
    let mut y = start.to_vec();
    let fdh = 1e-5;
    for _ in 0..60 {
        let v = defining_value(field, &y, branch, reference, tols)?.0;
        if v.abs() <= 1e-12 {
            return Ok(y);
        }
        let mut grad = vec![0.0; n];
        for c in 0..n {
            let mut yp = y.clone();
            yp[c] += fdh;
            let mut ym = y.clone();
            ym[c] -= fdh;
            grad[c] = (defining_value(field, &yp, branch, reference, tols)?.0
                - defining_value(field, &ym, branch, reference, tols)?.0)
                / (2.0 * fdh);
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 < 1e-16 {
            break;
        }
        for c in 0..n {
            y[c] -= v * grad[c] / g2;
        }
    }
    let v = defining_value(field, &y, branch, reference, tols)?.0;
    if v.abs() <= 1e-9 {
        Ok(y)
    } else {
        Err(StrataError::Other(format!(
            "locus projection failed near {start:?}"
        )))
    }
}

/// Boundary data at a locus point.
#[derive(Debug, Clone)]
pub struct BoundaryData {
    pub x: Vec<f64>,
    pub conormal: Vec<f64>,
    /// Tangent frame used for the restriction.
    pub frame: Vec<DVector<f64>>,
    /// `ζ̂` in the tangent frame.
    pub zeta_hat: DMatrix<f64>,
    /// `max |ζ·n| / ‖ζ‖`.
    pub kernel_residual: f64,
    /// Signature of `ζ̂`.
    pub signature: (usize, usize, usize),
    /// Unit-determinant conformal representative (full branch).
    pub conformal_rep: Option<DMatrix<f64>>,
    /// `max_ξ |n_a ξ^c W_cd^a_e ζ^{de}|` over frame directions.
    pub weyl_tangential_residual: f64,
    /// Induced metrizability residual of `ζ̂` (corank-1 branch).
    pub induced_residual: Option<f64>,
    /// `|I_B Z_E^e Ω_ce^B_F H^{EF}|` contraction residual (corank-1 branch).
    pub lemma_contraction_residual: Option<f64>,
    /// `det ζ̂` (corank-1 branch).
    pub tau_bar: Option<f64>,
    pub sub_stratum: Option<Stratum>,
}

/// Restrict a solution to the degeneracy locus at one refined point and
/// compute the branch diagnostics.
pub fn boundary_restrict(
    field: &SolutionField,
    lp: &LocusPoint,
    tols: &ClassifyTols,
) -> Result<BoundaryData, StrataError> {
    let n = field.dim();
    let x = &lp.x;
    let h = field.h_at(x)?;
    let d = field.chart().data(x)?;
    let m = h.to_matrix();
    let rank = spectral(&m, tols.tol_rank).rank();
    let branch = if rank == n + 1 {
        Branch::Full
    } else if rank == n {
        Branch::Corank1
    } else {
        return Err(StrataError::OutsideHypotheses {
            rank,
            n,
            x: x.clone(),
        });
    };

    let frame = tangent_frame(&lp.conormal);
    let zeta = &h.zeta;
    let nu = DVector::from_column_slice(&lp.conormal);
    let zn = zeta * &nu;
    let scale = zeta.amax().max(1e-300);
    let kernel_residual = zn.amax() / scale;

    let mut zeta_hat = DMatrix::zeros(n - 1, n - 1);
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            zeta_hat[(i, j)] = (frame[i].transpose() * zeta * &frame[j])[(0, 0)];
        }
    }
    let sig = spectral(&zeta_hat, tols.tol_rank);

    // Weyl tangentiality: n_a ξ^c W_cd^a_e ζ^{de}.
    let mut weyl_res: f64 = 0.0;
    for xi in &frame {
        let mut v = 0.0;
        for c in 0..n {
            for dd in 0..n {
                for a in 0..n {
                    for e in 0..n {
                        v += lp.conormal[a] * xi[c] * d.w[c][dd][a][e] * zeta[(dd, e)];
                    }
                }
            }
        }
        weyl_res = weyl_res.max(v.abs());
    }

    let mut conformal_rep = None;
    let mut induced_residual = None;
    let mut lemma_res = None;
    let mut tau_bar = None;
    let mut sub_stratum = None;

    match branch {
        Branch::Full => {
            let det = zeta_hat.determinant();
            if det.abs() > tols.tol_zero {
                conformal_rep =
                    Some(zeta_hat.clone() / det.abs().powf(1.0 / (n as f64 - 1.0)));
            }
        }
        Branch::Corank1 => {
            // Contraction residual: ⟨I, T(c)⟩ with T's slots
            // (W_ce^b_f ζ^{ef}, −Y_cef ζ^{ef}).
            let sa = signed_adjugate(&h, tols.tol_rank)?;
            let i = sa
                .factor
                .as_ref()
                .map(CoTractorVec::to_frame)
                .ok_or_else(|| StrataError::Other("missing adjugate factor".into()))?;
            let mut worst: f64 = 0.0;
            for c in 0..n {
                let mut top = vec![0.0; n];
                let mut bot = 0.0;
                for e in 0..n {
                    for f in 0..n {
                        for b in 0..n {
                            top[b] += d.w[c][e][b][f] * zeta[(e, f)];
                        }
                        bot -= d.y[c][e][f] * zeta[(e, f)];
                    }
                }
                let mut v = i[n] * bot;
                for b in 0..n {
                    v += i[b] * top[b];
                }
                worst = worst.max(v.abs());
            }
            lemma_res = Some(worst);

            tau_bar = Some(zeta_hat.determinant());
            sub_stratum = Some(Stratum::of(zeta_hat.determinant(), tols.tol_zero));

            // Induced metrizability residual: ambient covariant tangential
            // derivative of ζ along locus-projected finite differences,
            // frame-projected, then trace-off in dimension n−1.
            let reference = Some(i.clone());
            let step = 1e-3;
            let mut tangential_dz = Vec::with_capacity(n - 1);
            for e in &frame {
                let mut off_p: Vec<f64> = x.clone();
                let mut off_m: Vec<f64> = x.clone();
                for c in 0..n {
                    off_p[c] += step * e[c];
                    off_m[c] -= step * e[c];
                }
                let pp = project_to_locus(field, &off_p, branch, reference.as_ref(), tols)?;
                let pm = project_to_locus(field, &off_m, branch, reference.as_ref(), tols)?;
                let zp = field.zeta_at(&pp)?;
                let zm = field.zeta_at(&pm)?;
                let mut t = (zp - zm) / (2.0 * step);
                for a in 0..n {
                    for b in 0..n {
                        let mut v = t[(a, b)];
                        for c in 0..n {
                            let dirc = e[c];
                            if dirc == 0.0 {
                                continue;
                            }
                            v -= 2.0 * dirc * d.a[c] * zeta[(a, b)];
                            for f in 0..n {
                                v += dirc
                                    * (d.gamma[a][c][f] * zeta[(f, b)]
                                        + d.gamma[b][c][f] * zeta[(a, f)]);
                            }
                        }
                        t[(a, b)] = v;
                    }
                }
                tangential_dz.push(t);
            }
            let k = n - 1;
            let mut tproj = vec![DMatrix::<f64>::zeros(k, k); k];
            for i2 in 0..k {
                for j in 0..k {
                    for l in 0..k {
                        tproj[i2][(j, l)] =
                            (frame[j].transpose() * &tangential_dz[i2] * &frame[l])[(0, 0)];
                    }
                }
            }
            let kf = k as f64;
            let mut div = vec![0.0; k];
            for a in 0..k {
                for b in 0..k {
                    div[a] += tproj[b][(a, b)];
                }
            }
            let mut worst: f64 = 0.0;
            for c in 0..k {
                for a in 0..k {
                    for b in 0..k {
                        let mut v = tproj[c][(a, b)];
                        if c == a {
                            v -= div[b] / (kf + 1.0);
                        }
                        if c == b {
                            v -= div[a] / (kf + 1.0);
                        }
                        worst = worst.max(v.abs());
                    }
                }
            }
            induced_residual = Some(worst);
        }
    }

    Ok(BoundaryData {
        x: x.clone(),
        conormal: lp.conormal.clone(),
        frame,
        zeta_hat,
        kernel_residual,
        signature: sig.signature,
        conformal_rep,
        weyl_tangential_residual: weyl_res,
        induced_residual,
        lemma_contraction_residual: lemma_res,
        tau_bar,
        sub_stratum,
    })
}

/// Compactification order with numerical evidence: the metric connection
/// must preserve the branch's defining density near the locus.
#[derive(Debug, Clone)]
pub struct CompactificationReport {
    pub order: u8,
    /// `max |∇^g (defining density)|` at offset points near the locus.
    pub evidence: f64,
    pub samples: usize,
}

pub fn compactification_order(
    field: &SolutionField,
    report: &StrataReport,
    tols: &ClassifyTols,
) -> Result<CompactificationReport, StrataError> {
    if report.hypersurface_points.is_empty() {
        return Err(StrataError::EmptyLocus);
    }
    let n = field.dim();
    let (order, weight) = match report.branch {
        Branch::Full => (2u8, 2.0f64),
        Branch::Corank1 => (1u8, 1.0f64),
    };
    let fd = 1e-3;
    let mut worst: f64 = 0.0;
    let mut samples = 0usize;
    let take = report.hypersurface_points.len().min(6);
    for lp in report.hypersurface_points.iter().take(take) {
        let reference = classify_point(field, &lp.x, tols)
            .ok()
            .and_then(|c| c.adj_factor);
        for side in [1.0, -1.0] {
            let y: Vec<f64> = lp
                .x
                .iter()
                .zip(&lp.conormal)
                .map(|(v, c)| v + side * 0.08 * c)
                .collect();
            if !field.chart().domain().contains(&y) {
                continue;
            }
            let dens = |z: &[f64]| -> Result<f64, StrataError> {
                Ok(defining_value(field, z, report.branch, reference.as_ref(), tols)?.0)
            };
            let v0 = dens(&y)?;
            if v0.abs() < 10.0 * tols.tol_zero {
                continue;
            }
            let (_, _, gam) = christoffels_of_g(field, &y, fd)?;
            let nf = n as f64;
            for c in 0..n {
                let mut yp = y.clone();
                yp[c] += fd;
                let mut ym = y.clone();
                ym[c] -= fd;
                let dv = (dens(&yp)? - dens(&ym)?) / (2.0 * fd);
                let mut trace = 0.0;
                for a in 0..n {
                    trace += gam[a][(a, c)];
                }
                let a_g = trace / (nf + 1.0);
                worst = worst.max((dv + weight * a_g * v0).abs());
            }
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(StrataError::Other(
            "no usable off-locus sample for the compactification evidence".into(),
        ));
    }
    Ok(CompactificationReport {
        order,
        evidence: worst,
        samples,
    })
}

/// Analysis of a 2-density with rank-1 splitting: extraction of the square
/// root `σ`, factorization of `L(τ)`, Ricci-flatness off the zero locus, and
/// total geodesy of the locus.
#[derive(Debug, Clone)]
pub struct Rank1DensityReport {
    /// +1 when `σ² = τ`, −1 when `σ² = −τ`.
    pub sign: f64,
    /// `max |σ² ∓ τ|` over the grid.
    pub square_residual: f64,
    /// `max |M(L(τ)) ∓ V Vᵀ|` over the grid.
    pub factor_residual: f64,
    /// `max |V − D σ|` over the grid, away from the locus.
    pub dsigma_residual: f64,
    /// `max |P|` away from the locus.
    pub schouten_off_locus: f64,
    pub locus: Vec<LocusPoint>,
    /// Totally-geodesic deviation of the locus, when nonempty.
    pub tg_deviation: Option<f64>,
}

pub fn analyze_rank1_density(
    chart: &ChartConnection,
    tau: &Expression,
    grid: &GridSpec,
    tols: &ClassifyTols,
) -> Result<Rank1DensityReport, StrataError> {
    let n = chart.dim();
    let points = grid.points();

    let factor_at = |x: &[f64]| -> Result<(DVector<f64>, f64), StrataError> {
        let d = chart.data(x)?;
        let l = crate::bgg::split_density(&d, tau)?;
        let m = l.to_matrix();
        let sp = spectral(&m, tols.tol_rank);
        if sp.rank() != 1 {
            return Err(StrataError::NotRankOne(sp.rank()));
        }
        let eig = m.clone().symmetric_eigen();
        let mut top = 0usize;
        for i in 0..eig.eigenvalues.len() {
            if eig.eigenvalues[i].abs() > eig.eigenvalues[top].abs() {
                top = i;
            }
        }
        let mu = eig.eigenvalues[top];
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
        let outer = &v * v.transpose();
        let res = (m - mu.signum() * outer).amax();
        Ok((v, res))
    };

    // Realized sign of τ from its largest-magnitude sample.
    let mut tau_extreme = 0.0f64;
    for p in &points {
        let t = tau.eval(p).map_err(ChartError::from)?;
        if t.abs() > tau_extreme.abs() {
            tau_extreme = t;
        }
    }
    let sign = if tau_extreme >= 0.0 { 1.0 } else { -1.0 };

    let mut square_residual: f64 = 0.0;
    let mut factor_residual: f64 = 0.0;
    let mut dsigma_residual: f64 = 0.0;
    let mut schouten_off: f64 = 0.0;
    let mut values = Vec::with_capacity(points.len());
    let mut factors = Vec::with_capacity(points.len());
    for p in &points {
        let (v, res) = factor_at(p)?;
        factor_residual = factor_residual.max(res);
        let t = tau.eval(p).map_err(ChartError::from)?;
        let sigma = v[n];
        square_residual = square_residual.max((sigma * sigma - sign * t).abs());
        let d = chart.data(p)?;
        let j = tau.eval_jet(p, 1).map_err(ChartError::from)?;
        if sigma.abs() > 1e-5 {
            // V must agree with D σ: lower slots ∇σ = ∇(±τ)/(2σ).
            for a in 0..n {
                let dtau = sign * (j.d1(a) + 2.0 * d.a[a] * j.value);
                let want = dtau / (2.0 * sigma);
                dsigma_residual = dsigma_residual.max((v[a] - want).abs());
            }
            let mut pmax: f64 = 0.0;
            for a in 0..n {
                for b in 0..n {
                    pmax = pmax.max(d.p[a][b].abs());
                }
            }
            schouten_off = schouten_off.max(pmax);
        }
        values.push(sigma);
        factors.push(v);
    }

    // Harmonize σ's sign across the lattice and bisect for the locus.
    let res = grid.res;
    let strides: Vec<usize> = (0..n).map(|a| res.pow(a as u32)).collect();
    for idx in 1..values.len() {
        let mut prev = None;
        for a in 0..n {
            if (idx / strides[a]) % res > 0 {
                prev = Some(idx - strides[a]);
                break;
            }
        }
        if let Some(pidx) = prev {
            if factors[idx].dot(&factors[pidx]) < 0.0 {
                factors[idx] = -factors[idx].clone();
                values[idx] = -values[idx];
            }
        }
    }
    let mut locus = Vec::new();
    for idx in 0..values.len() {
        for a in 0..n {
            if (idx / strides[a]) % res + 1 >= res {
                continue;
            }
            let jdx = idx + strides[a];
            if values[idx] == 0.0 || values[idx].signum() == values[jdx].signum() {
                continue;
            }
            let sigma_at = |y: &[f64], refv: &DVector<f64>| -> Result<f64, StrataError> {
                let (mut v, _) = factor_at(y)?;
                if v.dot(refv) < 0.0 {
                    v = -v;
                }
                Ok(v[n])
            };
            let refv = factors[idx].clone();
            let mut lo = points[idx].clone();
            let mut hi = points[jdx].clone();
            let mut flo = values[idx];
            let mut point = lo.clone();
            let mut fmid = flo;
            for _ in 0..200 {
                point = lo
                    .iter()
                    .zip(&hi)
                    .map(|(l, h)| 0.5 * (l + h))
                    .collect::<Vec<f64>>();
                fmid = sigma_at(&point, &refv)?;
                if fmid.abs() <= 1e-10 {
                    break;
                }
                if fmid.signum() == flo.signum() {
                    lo = point.clone();
                    flo = fmid;
                } else {
                    hi = point.clone();
                }
            }
            let hstep = 1e-5;
            let mut gradv = vec![0.0; n];
            for c in 0..n {
                let mut xp = point.clone();
                xp[c] += hstep;
                let mut xm = point.clone();
                xm[c] -= hstep;
                gradv[c] = (sigma_at(&xp, &refv)? - sigma_at(&xm, &refv)?) / (2.0 * hstep);
            }
            let gnorm = gradv.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm < 1e-6 {
                return Err(StrataError::DegenerateGradient {
                    x: point,
                    grad: gnorm,
                });
            }
            locus.push(LocusPoint {
                x: point,
                value: fmid,
                grad: gradv.clone(),
                conormal: gradv.iter().map(|v| v / gnorm).collect(),
            });
        }
    }

    let mut tg = None;
    if !locus.is_empty() {
        let mut worst: f64 = 0.0;
        let samples = [0.1, 0.2, 0.3];
        for lp in locus.iter().take(6) {
            let refv = factor_at(&lp.x)?.0;
            for dir in tangent_frame(&lp.conormal) {
                for sgn in [1.0, -1.0] {
                    let v0 = sgn * &dir;
                    match geodesic_trace(chart, &lp.x, &v0, 0.3, &samples) {
                        Ok(pts) => {
                            for (t, p) in samples.iter().zip(&pts) {
                                let (mut v, _) = factor_at(p)?;
                                if v.dot(&refv) < 0.0 {
                                    v = -v;
                                }
                                worst = worst.max(v[n].abs() / (t * t));
                            }
                        }
                        Err(StrataError::GeodesicExit(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        tg = Some(worst);
    }

    Ok(Rank1DensityReport {
        sign,
        square_residual,
        factor_residual,
        dsigma_residual,
        schouten_off_locus: schouten_off,
        locus,
        tg_deviation: tg,
    })
}

/// `det_weighted(ζ)/κ_n`: the plain determinant used as the classification
/// density on the full branch.
pub fn tau_hat(zeta: &DMatrix<f64>) -> f64 {
    det_weighted(zeta) / kappa(zeta.nrows())
}
