//! Periodic cell problems: correctors per direction, the homogenized
//! tensor from averages of corrected fluxes, the periodic invariant
//! measure of the non-divergence adjoint, and the periodic skew vector
//! potential with its divergence-free effective coefficient.

use serde::Serialize;

use crate::coeff::ellipticity_check;
use crate::error::{Error, Result};
use crate::field::{
    divergence, gradient, lq_norm_scalar, lq_norm_vector, MatrixField, Region, ScalarField,
    VectorField,
};
use crate::grid::GridSpec;
use crate::nondiv::{
    backward_matrix_divergence, forward_matrix_divergence, is_exactly_skew, scale_matrix,
    skew_potential_periodic, NonDivTransposeOp,
};
use crate::solver::{
    bicgstab, mean_diagonal_scale, norm2, pcg, DivFormOp, LinOp, PeriodicPoissonPre, SolveOpts,
};

#[derive(Debug, Clone)]
pub struct CellSolution {
    pub direction: usize,
    pub w_per: ScalarField,
    pub grad_w: VectorField,
    /// Relative residual of the discrete corrector equation.
    pub residual: f64,
    /// Cell average of `a (e_p + grad w)`, one column of the homogenized
    /// tensor.
    pub flux_column: Vec<f64>,
    pub sup_grad: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSolutionSummary {
    pub direction: usize,
    pub residual: f64,
    pub flux_column: Vec<f64>,
    pub sup_grad: f64,
    pub grad_l2: f64,
}

impl CellSolution {
    pub fn summary(&self) -> CellSolutionSummary {
        CellSolutionSummary {
            direction: self.direction,
            residual: self.residual,
            flux_column: self.flux_column.clone(),
            sup_grad: self.sup_grad,
            grad_l2: lq_norm_vector(&self.grad_w, 2.0, &Region::All).unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogenizedTensor {
    pub dim: usize,
    /// Row-major d x d matrix.
    pub a_star: Vec<f64>,
    pub mu_min: f64,
    pub mu_max: f64,
    /// Max deviation from symmetry, meaningful for symmetric backgrounds.
    pub asymmetry: f64,
}

#[derive(Debug, Clone)]
pub struct PeriodicInvariantMeasure {
    pub m_per: ScalarField,
    pub min: f64,
    pub mean: f64,
    /// Relative residual of the adjoint (double-divergence) equation.
    pub residual: f64,
    /// Estimated magnitude of the second-smallest singular value of the
    /// adjoint operator, normalized by the comparison scale; quantifies
    /// kernel uniqueness.
    pub kernel_gap: f64,
}

/// Solve `-div(a_per (e_p + grad w)) = 0` on the cell, mean-zero `w`.
pub fn solve_periodic_corrector(
    a_per: &MatrixField,
    direction: usize,
    opts: &SolveOpts,
) -> Result<CellSolution> {
    let grid = a_per.grid;
    if !grid.is_periodic() {
        return Err(Error::GridMismatch("corrector needs a cell grid".into()));
    }
    let d = grid.dim;
    if direction >= d {
        return Err(Error::GridMismatch(format!(
            "direction {direction} out of range for d = {d}"
        )));
    }
    // rhs = div(a e_p)
    let mut ap = VectorField::zeros(grid);
    for j in 0..d {
        ap.comps[j] = a_per.entry(j, direction).to_vec();
    }
    let rhs = divergence(&ap);
    let symmetric = a_per.is_symmetric(1e-13);
    let op = DivFormOp::new(a_per);
    let pre = PeriodicPoissonPre::pinned(grid, mean_diagonal_scale(a_per));
    let mut o = opts.clone();
    o.project_zero_mean = true;
    let (w_vals, _report) = if symmetric {
        pcg(&op, &pre, &rhs.values, &o)?
    } else {
        bicgstab(&op, &pre, &rhs.values, &o)?
    };
    let mut w_per = ScalarField {
        grid,
        values: w_vals,
    };
    w_per.shift_to_zero_mean();
    let grad_w = gradient(&w_per);

    // residual of the full equation -div(a(e_p + grad w)) = 0, relative
    // to the flux scale
    let full_flux = {
        let mut f = a_per.apply_to(&grad_w)?;
        for j in 0..d {
            for (v, ap) in f.comps[j].iter_mut().zip(a_per.entry(j, direction)) {
                *v += ap;
            }
        }
        f
    };
    let res_field = divergence(&full_flux);
    let residual = lq_norm_scalar(&res_field, 2.0, &Region::All)?
        / lq_norm_vector(&full_flux, 2.0, &Region::All)?.max(1e-300);

    let flux_column: Vec<f64> = (0..d)
        .map(|i| full_flux.comps[i].iter().sum::<f64>() / grid.node_count() as f64)
        .collect();
    let sup_grad = grad_w.max_abs();
    Ok(CellSolution {
        direction,
        w_per,
        grad_w,
        residual,
        flux_column,
        sup_grad,
    })
}

/// Assemble the homogenized tensor from the corrector solutions of all
/// canonical directions: `a*_{ij} = < e_i . a (e_j + grad w_j) >`.
pub fn homogenized_tensor(
    a_per: &MatrixField,
    solutions: &[CellSolution],
) -> Result<HomogenizedTensor> {
    let d = a_per.grid.dim;
    if solutions.len() != d {
        return Err(Error::GridMismatch(format!(
            "need {d} corrector solutions, got {}",
            solutions.len()
        )));
    }
    let mut seen = vec![false; d];
    let mut a_star = vec![0.0; d * d];
    for sol in solutions {
        if sol.direction >= d || seen[sol.direction] {
            return Err(Error::GridMismatch(format!(
                "bad or duplicate corrector direction {}",
                sol.direction
            )));
        }
        seen[sol.direction] = true;
        for i in 0..d {
            a_star[i * d + sol.direction] = sol.flux_column[i];
        }
    }
    let mut asymmetry = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            asymmetry = asymmetry.max((a_star[i * d + j] - a_star[j * d + i]).abs());
        }
    }
    // eigenvalue band of the symmetric part via a constant matrix field
    let tiny = GridSpec::cell(d, 8)?;
    let mut mf = MatrixField::zeros(tiny);
    for e in 0..d * d {
        mf.entries[e].iter_mut().for_each(|v| *v = a_star[e]);
    }
    let rep = ellipticity_check(&mf)?;
    Ok(HomogenizedTensor {
        dim: d,
        a_star,
        mu_min: rep.mu_min_observed,
        mu_max: rep.mu_max_observed,
        asymmetry,
    })
}

/// Shifted adjoint operator `T x = A^T x + gamma mean(x) 1`, nonsingular
/// whenever the kernel of `A^T` is spanned by a single function with
/// nonzero mean. `T x = gamma 1` then recovers that kernel function
/// normalized to mean one.
struct ShiftedAdjoint<'a> {
    inner: NonDivTransposeOp<'a>,
    gamma: f64,
}

impl LinOp for ShiftedAdjoint<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.inner.apply(x, y);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let shift = self.gamma * mean;
        for v in y.iter_mut() {
            *v += shift;
        }
    }
}

/// Periodic invariant measure: the mean-one kernel function of the exact
/// transpose of the non-divergence operator, with node-wise positivity
/// checked and a kernel-uniqueness gap estimate.
pub fn solve_periodic_invariant_measure(
    a_per: &MatrixField,
    opts: &SolveOpts,
) -> Result<PeriodicInvariantMeasure> {
    let grid = a_per.grid;
    if !grid.is_periodic() {
        return Err(Error::GridMismatch(
            "invariant measure needs a cell grid".into(),
        ));
    }
    let n = grid.node_count();
    let scale = mean_diagonal_scale(a_per);
    let gamma =
        scale * crate::fft::tight_eig(crate::fft::angle(1, grid.nodes_per_axis()), grid.spacing());
    let op = ShiftedAdjoint {
        inner: NonDivTransposeOp::new(a_per),
        gamma,
    };
    let pre = PeriodicPoissonPre {
        grid,
        scale,
        zero_mode_scale: gamma,
    };
    let b = vec![gamma; n];
    let (x, _report) = bicgstab(&op, &pre, &b, opts)?;
    let mut m_per = ScalarField { grid, values: x };
    let mean_raw = m_per.mean();
    if mean_raw.abs() < 1e-12 {
        return Err(Error::Kernel("kernel function has zero mean".into()));
    }
    m_per.scale(1.0 / mean_raw);

    let adj = NonDivTransposeOp::new(a_per);
    let mut r = vec![0.0; n];
    adj.apply(&m_per.values, &mut r);
    let residual = norm2(&r) / (gamma * norm2(&m_per.values)).max(1e-300);

    let min = m_per.min();
    if min <= 0.0 {
        let idx = m_per
            .values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        return Err(Error::Positivity {
            node: grid.multi_index(idx),
            value: min,
        });
    }

    // kernel gap: inverse iteration deflated against the found kernel
    let kernel_gap = {
        let mhat = &m_per.values;
        let mnorm2 = crate::solver::dot(mhat, mhat);
        let deflate = |v: &mut Vec<f64>| {
            let c = crate::solver::dot(v, mhat) / mnorm2;
            for (vi, mi) in v.iter_mut().zip(mhat) {
                *vi -= c * mi;
            }
        };
        let mut y: Vec<f64> = (0..n)
            .map(|i| ((i * 37 + 11) % 101) as f64 / 101.0 - 0.5)
            .collect();
        deflate(&mut y);
        let mut gap = f64::NAN;
        for _ in 0..3 {
            let nrm = norm2(&y).max(1e-300);
            y.iter_mut().for_each(|v| *v /= nrm);
            let (mut z, _) = bicgstab(&op, &pre, &y, opts)?;
            deflate(&mut z);
            let mut az = vec![0.0; n];
            adj.apply(&z, &mut az);
            gap = norm2(&az) / (gamma * norm2(&z)).max(1e-300);
            y = z;
        }
        gap
    };
    if kernel_gap < 1e-10 {
        return Err(Error::Kernel(format!(
            "second singular value estimate {kernel_gap:.3e} indicates a multiple kernel"
        )));
    }

    Ok(PeriodicInvariantMeasure {
        mean: 1.0,
        min,
        residual,
        kernel_gap,
        m_per,
    })
}

#[derive(Debug, Clone)]
pub struct PeriodicPotential {
    /// Skew matrix with `div_B skew ~ forward matrix divergence of m a`.
    pub skew: MatrixField,
    /// Effective coefficient `A_per = m a - skew`.
    pub a_eff: MatrixField,
    /// Sup norm of the residual `v - div_B skew`, i.e. the divergence of
    /// the effective coefficient.
    pub div_residual_sup: f64,
    pub div_residual_l2: f64,
}

/// Periodic skew potential for `c = m_per a_per` and the divergence-free
/// effective coefficient `A_per = c - skew`.
pub fn periodic_vector_potential(
    a_per: &MatrixField,
    m_per: &ScalarField,
) -> Result<PeriodicPotential> {
    let grid = a_per.grid;
    if !grid.is_periodic() {
        return Err(Error::GridMismatch("potential needs a cell grid".into()));
    }
    let c = scale_matrix(m_per, a_per)?;
    let v = forward_matrix_divergence(&c);
    // compatibility: each component has zero cell mean (telescoping makes
    // this exact up to rounding)
    for comp in &v.comps {
        let mean = comp.iter().sum::<f64>() / grid.node_count() as f64;
        if mean.abs() > 1e-8 {
            return Err(Error::Kernel(format!(
                "nonzero mean divergence {mean:.3e} in potential construction"
            )));
        }
    }
    let skew = skew_potential_periodic(&v)?;
    debug_assert!(is_exactly_skew(&skew));
    let div_skew = backward_matrix_divergence(&skew);
    let hd = grid.spacing().powi(grid.dim as i32);
    let mut sup = 0.0f64;
    let mut l2 = 0.0f64;
    for k in 0..grid.dim {
        for (a, b) in v.comps[k].iter().zip(&div_skew.comps[k]) {
            let r = a - b;
            sup = sup.max(r.abs());
            l2 += r * r;
        }
    }
    let l2 = (l2 * hd).sqrt();
    let mut a_eff = c;
    let d = grid.dim;
    for j in 0..d {
        for k in 0..d {
            let s = skew.entry(j, k).to_vec();
            for (v, sv) in a_eff.entries[j * d + k].iter_mut().zip(s) {
                *v -= sv;
            }
        }
    }
    Ok(PeriodicPotential {
        skew,
        a_eff,
        div_residual_sup: sup,
        div_residual_l2: l2,
    })
}
