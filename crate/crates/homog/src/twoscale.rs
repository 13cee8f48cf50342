//! Oscillatory solves on the unit domain, first-order two-scale
//! reconstructions with periodic-only or defect-corrected correctors, and
//! convergence-rate measurement.
//!
//! The unit grid is chosen so that microscale coordinates
//! `y = (x - center)/eps` land exactly on the cell lattice (and on the
//! defect box lattice), so corrector sampling is node-exact rather than
//! interpolated.

use serde::Serialize;

use crate::cell::CellSolution;
use crate::coeff::CoefficientModel;
use crate::defect::DefectCorrector;
use crate::error::{Error, Result};
use crate::field::{
    gradient, lq_norm_scalar, lq_norm_vector, MatrixField, Region, ScalarField, VectorField,
};
use crate::fit::{fit_loglog, LineFit};
use crate::grid::{GridSpec, NodeWalker};
use crate::mg::Multigrid;
use crate::solver::{pcg, DivFormOp, SolveOpts, SolveReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectorMode {
    PeriodicOnly,
    DefectCorrected,
}

/// Unit grid resolving `eps` with `n_per` cells per period. Validates the
/// resolution floor and that `1/eps` is commensurate with the grid.
pub fn oscillatory_grid(dim: usize, n_per: usize, eps: f64) -> Result<GridSpec> {
    if n_per < 16 {
        return Err(Error::GridMismatch(format!(
            "oscillatory solves need >= 16 cells per period, got {n_per}"
        )));
    }
    let periods = 1.0 / eps;
    let rounded = periods.round();
    if (periods - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::GridMismatch(format!(
            "1/eps = {periods} must be a whole number of periods"
        )));
    }
    GridSpec::unit(dim, n_per * rounded as usize)
}

#[derive(Debug, Clone)]
pub struct OscillatorySolve {
    pub eps: f64,
    pub u: ScalarField,
    pub grad: VectorField,
    pub report: SolveReport,
}

/// Solve `-div(a((x - center)/eps) grad u) = f` on the unit domain with
/// homogeneous Dirichlet data. The default center puts the defect at the
/// domain midpoint for every `eps`.
pub fn solve_oscillatory(
    model: &CoefficientModel,
    eps: f64,
    n_per: usize,
    f: &ScalarField,
    opts: &SolveOpts,
) -> Result<OscillatorySolve> {
    let grid = oscillatory_grid(model.dim, n_per, eps)?;
    grid.require_same(&f.grid, "oscillatory data grid")?;
    let center = vec![0.5; model.dim];
    let a_eps = model.sample_rescaled(&grid, eps, &center)?;
    let op = DivFormOp::new(&a_eps);
    let mg = Multigrid::new(&grid, &a_eps);
    let mut b = f.values.clone();
    grid.mask_boundary(&mut b);
    let (u_vals, report) = pcg(&op, &mg, &b, opts)?;
    let u = ScalarField {
        grid,
        values: u_vals,
    };
    let grad = gradient(&u);
    Ok(OscillatorySolve {
        eps,
        u,
        grad,
        report,
    })
}

/// Solve the constant-coefficient limit problem `-div(a* grad u*) = f` on
/// the same unit grid.
pub fn solve_homogenized(
    dim: usize,
    a_star: &[f64],
    f: &ScalarField,
    opts: &SolveOpts,
) -> Result<OscillatorySolve> {
    let grid = f.grid;
    let mut a = MatrixField::zeros(grid);
    for e in 0..dim * dim {
        a.entries[e].iter_mut().for_each(|v| *v = a_star[e]);
    }
    let op = DivFormOp::new(&a);
    let mg = Multigrid::new(&grid, &a);
    let mut b = f.values.clone();
    grid.mask_boundary(&mut b);
    let (u_vals, report) = pcg(&op, &mg, &b, opts)?;
    let u = ScalarField {
        grid,
        values: u_vals,
    };
    let grad = gradient(&u);
    Ok(OscillatorySolve {
        eps: 0.0,
        u,
        grad,
        report,
    })
}

/// Sample a corrector at microscale coordinates `y = (x - 1/2)/eps`:
/// periodic part wrapped node-exactly, defect part looked up on its box
/// (zero beyond it).
fn corrector_at(
    cell_w: &ScalarField,
    defect_w: Option<&ScalarField>,
    unit_mi: &[usize],
    n_per: usize,
    inv_eps: usize,
) -> f64 {
    let d = unit_mi.len();
    let cell_grid = cell_w.grid;
    let nc = cell_grid.nodes_per_axis();
    let half = (n_per * inv_eps) / 2;
    let mut cmi = vec![0usize; d];
    for ax in 0..d {
        // y lattice index relative to the cell: k - N/2 modulo n
        let rel = unit_mi[ax] as i64 - half as i64;
        cmi[ax] = rel.rem_euclid(nc as i64) as usize;
    }
    let mut v = cell_w.values[cell_grid.flat_index(&cmi)];
    if let Some(wt) = defect_w {
        let bg = wt.grid;
        let mb = bg.nodes_per_axis();
        let mut inside = true;
        let mut bmi = vec![0usize; d];
        for ax in 0..d {
            // box nodes sit at -L + j h with the same micro spacing
            let rel = unit_mi[ax] as i64 - half as i64 + (mb / 2) as i64;
            if rel < 0 || rel >= mb as i64 {
                inside = false;
                break;
            }
            bmi[ax] = rel as usize;
        }
        if inside {
            v += wt.values[bg.flat_index(&bmi)];
        }
    }
    v
}

/// First-order two-scale reconstruction
/// `u1(x) = u*(x) + eps sum_i d_i u*(x) w_i((x - 1/2)/eps)`.
/// Its gradient is taken discretely afterwards, so the reconstruction
/// carries the full product rule including the cross term.
pub fn first_order_approx(
    u_star: &OscillatorySolve,
    cells: &[CellSolution],
    defects: Option<&[DefectCorrector]>,
    eps: f64,
    n_per: usize,
) -> Result<ScalarField> {
    let grid = u_star.u.grid;
    let d = grid.dim;
    if cells.len() != d {
        return Err(Error::GridMismatch(format!(
            "need {d} cell correctors, got {}",
            cells.len()
        )));
    }
    if let Some(dc) = defects {
        if dc.len() != d {
            return Err(Error::GridMismatch(format!(
                "need {d} defect correctors, got {}",
                dc.len()
            )));
        }
    }
    let inv_eps = (1.0 / eps).round() as usize;
    let mut out = u_star.u.clone();
    let mut w = NodeWalker::new(&grid);
    let mut idx = 0usize;
    while w.advance() {
        let mut corr = 0.0;
        for (i, cell) in cells.iter().enumerate() {
            let wt = defects.map(|dc| &dc[i].w_tilde);
            let wv = corrector_at(&cell.w_per, wt, &w.mi, n_per, inv_eps);
            corr += u_star.grad.comps[i][idx] * wv;
        }
        out.values[idx] += eps * corr;
        idx += 1;
    }
    grid.mask_boundary(&mut out.values);
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub eps: f64,
    pub mode: CorrectorMode,
    /// `||u_eps - u*||_{L^2}`.
    pub l2_vs_homogenized: f64,
    /// `||u_eps - u1||_{H^1}` (L2 plus gradient contributions).
    pub h1_vs_reconstruction: f64,
    /// Same error restricted to the ball `|x - 1/2| < window` around the
    /// defect.
    pub local_h1: f64,
    pub window: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<StudyRow>,
    /// Fitted H1 rate per mode (log error vs log eps).
    pub h1_rates: Vec<(CorrectorMode, LineFit)>,
    pub l2_rate: LineFit,
    /// True when every error column decreased monotonically with eps.
    pub monotone: bool,
}

fn h1_error(
    a: &ScalarField,
    b: &ScalarField,
    region: &Region,
) -> Result<f64> {
    let grid = a.grid;
    let diff = ScalarField {
        grid,
        values: a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect(),
    };
    let l2 = lq_norm_scalar(&diff, 2.0, region)?;
    let g = gradient(&diff);
    let gl2 = lq_norm_vector(&g, 2.0, region)?;
    Ok((l2 * l2 + gl2 * gl2).sqrt())
}

#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    model: &CoefficientModel,
    cells: &[CellSolution],
    defects: Option<&[DefectCorrector]>,
    a_star: &[f64],
    f_fn: impl Fn(&[f64]) -> f64,
    eps_list: &[f64],
    n_per: usize,
    modes: &[CorrectorMode],
    window_periods: f64,
    opts: &SolveOpts,
) -> Result<ConvergenceStudy> {
    if eps_list.is_empty() || modes.is_empty() {
        return Err(Error::Config("empty eps list or mode list".into()));
    }
    let mut rows = Vec::new();
    for &eps in eps_list {
        let grid = oscillatory_grid(model.dim, n_per, eps)?;
        let f = ScalarField::from_fn(grid, &f_fn);
        let osc = solve_oscillatory(model, eps, n_per, &f, opts)?;
        let hom = solve_homogenized(model.dim, a_star, &f, opts)?;
        let l2_vs_homogenized = {
            let diff = ScalarField {
                grid,
                values: osc
                    .u
                    .values
                    .iter()
                    .zip(&hom.u.values)
                    .map(|(x, y)| x - y)
                    .collect(),
            };
            lq_norm_scalar(&diff, 2.0, &Region::All)?
        };
        // the defect neighbourhood scales with eps, capped by the domain
        let window = (window_periods * eps).min(grid.extent());
        let local = Region::annulus(0.0, window, vec![0.5; model.dim]);
        for &mode in modes {
            let u1 = match mode {
                CorrectorMode::PeriodicOnly => {
                    first_order_approx(&hom, cells, None, eps, n_per)?
                }
                CorrectorMode::DefectCorrected => {
                    first_order_approx(&hom, cells, defects, eps, n_per)?
                }
            };
            let h1 = h1_error(&osc.u, &u1, &Region::All)?;
            let local_h1 = h1_error(&osc.u, &u1, &local)?;
            rows.push(StudyRow {
                eps,
                mode,
                l2_vs_homogenized,
                h1_vs_reconstruction: h1,
                local_h1,
                window,
            });
        }
    }
    let mut h1_rates = Vec::new();
    for &mode in modes {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.eps, r.h1_vs_reconstruction))
            .collect();
        h1_rates.push((mode, fit_loglog(&pts)));
    }
    let l2_pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mode == modes[0])
        .map(|r| (r.eps, r.l2_vs_homogenized))
        .collect();
    let l2_rate = fit_loglog(&l2_pts);
    // monotonicity in eps (lists run from large to small eps or vice
    // versa; compare along decreasing eps)
    let monotone = {
        let mut ok = true;
        for &mode in modes {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| (r.eps, r.h1_vs_reconstruction))
                .collect();
            pts.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            ok &= pts.windows(2).all(|w| w[1].1 <= w[0].1 * 1.0001);
        }
        ok
    };
    Ok(ConvergenceStudy {
        rows,
        h1_rates,
        l2_rate,
        monotone,
    })
}
