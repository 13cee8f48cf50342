//! Matrix-free Krylov solvers: preconditioned conjugate gradients for the
//! symmetric divergence-form operator and BiCGStab for the non-symmetric
//! ones. All reductions run in fixed node order, so a given configuration
//! reproduces bit-identical results.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::fft::{angle, dirichlet_eig, solve_periodic_poisson, tight_eig, DstPlan};
use crate::field::{backward_diff_accumulate, forward_diff_into, MatrixField, ScalarField};
use crate::grid::GridSpec;

pub trait LinOp {
    fn len(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

pub trait Precond {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPre;

impl Precond for IdentityPre {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

#[derive(Debug, Clone)]
pub struct SolveOpts {
    pub tol_rel: f64,
    pub max_iter: usize,
    /// Keep iterates mean-free (periodic problems with a constant kernel).
    pub project_zero_mean: bool,
}

impl Default for SolveOpts {
    fn default() -> Self {
        SolveOpts {
            tol_rel: 1e-11,
            max_iter: 20_000,
            project_zero_mean: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub history: Vec<f64>,
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn project_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    for x in v {
        *x -= m;
    }
}

/// Preconditioned conjugate gradients for symmetric positive
/// (semi-)definite operators.
pub fn pcg(
    op: &dyn LinOp,
    pre: &dyn Precond,
    b: &[f64],
    opts: &SolveOpts,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = op.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((
            x,
            SolveReport {
                iterations: 0,
                relative_residual: 0.0,
                history: vec![0.0],
            },
        ));
    }
    let mut r = b.to_vec();
    if opts.project_zero_mean {
        project_mean(&mut r);
    }
    let mut z = vec![0.0; n];
    pre.apply(&r, &mut z);
    if opts.project_zero_mean {
        project_mean(&mut z);
    }
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut history = vec![norm2(&r) / bnorm];
    for it in 1..=opts.max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::SolverDiverged {
                iterations: it,
                residual: *history.last().unwrap(),
                target: opts.tol_rel,
                history,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if opts.project_zero_mean {
            project_mean(&mut r);
        }
        let rel = norm2(&r) / bnorm;
        history.push(rel);
        if rel <= opts.tol_rel {
            if opts.project_zero_mean {
                project_mean(&mut x);
            }
            return Ok((
                x,
                SolveReport {
                    iterations: it,
                    relative_residual: rel,
                    history,
                },
            ));
        }
        pre.apply(&r, &mut z);
        if opts.project_zero_mean {
            project_mean(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        iterations: opts.max_iter,
        residual: *history.last().unwrap(),
        target: opts.tol_rel,
        history,
    })
}

/// Preconditioned BiCGStab for non-symmetric operators.
pub fn bicgstab(
    op: &dyn LinOp,
    pre: &dyn Precond,
    b: &[f64],
    opts: &SolveOpts,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = op.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((
            x,
            SolveReport {
                iterations: 0,
                relative_residual: 0.0,
                history: vec![0.0],
            },
        ));
    }
    let mut r = b.to_vec();
    if opts.project_zero_mean {
        project_mean(&mut r);
    }
    let rhat = r.clone();
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut omega = 1.0f64;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut history = vec![norm2(&r) / bnorm];
    for it in 1..=opts.max_iter {
        let rho_new = dot(&rhat, &r);
        if rho_new.abs() < 1e-300 {
            return Err(Error::SolverDiverged {
                iterations: it,
                residual: *history.last().unwrap(),
                target: opts.tol_rel,
                history,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        pre.apply(&p, &mut phat);
        if opts.project_zero_mean {
            project_mean(&mut phat);
        }
        op.apply(&phat, &mut v);
        alpha = rho / dot(&rhat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let snorm = norm2(&s) / bnorm;
        if snorm <= opts.tol_rel {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            history.push(snorm);
            if opts.project_zero_mean {
                project_mean(&mut x);
            }
            return Ok((
                x,
                SolveReport {
                    iterations: it,
                    relative_residual: snorm,
                    history,
                },
            ));
        }
        pre.apply(&s, &mut shat);
        if opts.project_zero_mean {
            project_mean(&mut shat);
        }
        op.apply(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        if omega == 0.0 || !omega.is_finite() {
            return Err(Error::SolverDiverged {
                iterations: it,
                residual: *history.last().unwrap(),
                target: opts.tol_rel,
                history,
            });
        }
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        let rel = norm2(&r) / bnorm;
        history.push(rel);
        if rel <= opts.tol_rel {
            if opts.project_zero_mean {
                project_mean(&mut x);
            }
            return Ok((
                x,
                SolveReport {
                    iterations: it,
                    relative_residual: rel,
                    history,
                },
            ));
        }
    }
    Err(Error::SolverDiverged {
        iterations: opts.max_iter,
        residual: *history.last().unwrap(),
        target: opts.tol_rel,
        history,
    })
}

// ---------------------------------------------------------------------------
// The symmetric divergence-form operator  u -> -div(a grad u)
// with node-anchored coefficient products.
// ---------------------------------------------------------------------------

pub struct DivFormOp<'a> {
    pub grid: GridSpec,
    pub a: &'a MatrixField,
    work: RefCell<Vec<Vec<f64>>>,
}

impl<'a> DivFormOp<'a> {
    pub fn new(a: &'a MatrixField) -> Self {
        let n = a.grid.node_count();
        DivFormOp {
            grid: a.grid,
            a,
            work: RefCell::new(vec![vec![0.0; n]; a.grid.dim + 2]),
        }
    }
}

impl LinOp for DivFormOp<'_> {
    fn len(&self) -> usize {
        self.grid.node_count()
    }

    /// On Dirichlet grids the operator is `P (-div a grad) P` with `P`
    /// zeroing the pinned boundary layer, which keeps it symmetric for
    /// arbitrary inputs. Periodic grids skip the projections.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let d = self.grid.dim;
        let n = self.grid.node_count();
        let mut work = self.work.borrow_mut();
        let (xm, rest) = work.split_first_mut().unwrap();
        let input: &[f64] = if self.grid.is_periodic() {
            x
        } else {
            xm.copy_from_slice(x);
            self.grid.mask_boundary(xm);
            xm
        };
        let (grads, flux) = rest.split_at_mut(d);
        for (ax, g) in grads.iter_mut().enumerate() {
            forward_diff_into(input, &self.grid, ax, g);
        }
        y[..n].fill(0.0);
        let flux = &mut flux[0];
        for j in 0..d {
            flux.fill(0.0);
            for k in 0..d {
                let ajk = &self.a.entries[j * d + k];
                let g = &grads[k];
                for i in 0..n {
                    flux[i] += ajk[i] * g[i];
                }
            }
            backward_diff_accumulate(flux, &self.grid, j, -1.0, y);
        }
        self.grid.mask_boundary(y);
    }
}

/// Convenience: apply `-div(a grad u)` once.
pub fn apply_div_form(a: &MatrixField, u: &ScalarField) -> ScalarField {
    let op = DivFormOp::new(a);
    let mut out = ScalarField::zeros(u.grid);
    op.apply(&u.values, &mut out.values);
    out
}

// ---------------------------------------------------------------------------
// Preconditioners.
// ---------------------------------------------------------------------------

/// Inverse of `scale * (-div grad)` on a periodic grid via FFT. The zero
/// mode is pinned when `zero_mode_scale` is 0 (singular problems on the
/// mean-free subspace) and divided by that scale otherwise (shifted
/// operators such as the invariant-measure solve).
pub struct PeriodicPoissonPre {
    pub grid: GridSpec,
    pub scale: f64,
    pub zero_mode_scale: f64,
}

impl PeriodicPoissonPre {
    pub fn pinned(grid: GridSpec, scale: f64) -> Self {
        PeriodicPoissonPre {
            grid,
            scale,
            zero_mode_scale: 0.0,
        }
    }
}

impl Precond for PeriodicPoissonPre {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let f = ScalarField {
            grid: self.grid,
            values: r.to_vec(),
        };
        let sol = solve_periodic_poisson(&f);
        let zero_part = if self.zero_mode_scale > 0.0 {
            mean / self.zero_mode_scale
        } else {
            0.0
        };
        for (zi, v) in z.iter_mut().zip(sol.values) {
            *zi = v / self.scale + zero_part;
        }
    }
}

/// Inverse of `scale * (-div grad)` on a Dirichlet grid via DST-I applied
/// to the interior block (indices 1..m per axis); the pinned layer stays
/// zero. Exact for the identity coefficient.
pub struct DirichletPoissonPre {
    pub grid: GridSpec,
    pub scale: f64,
    plan: RefCell<DstPlan>,
    interior: RefCell<Vec<f64>>,
}

impl DirichletPoissonPre {
    pub fn new(grid: GridSpec, scale: f64) -> Self {
        let mi = grid.nodes_per_axis() - 1;
        DirichletPoissonPre {
            grid,
            scale,
            plan: RefCell::new(DstPlan::new()),
            interior: RefCell::new(vec![0.0; mi.pow(grid.dim as u32)]),
        }
    }

    fn for_interior(&self, mut f: impl FnMut(usize, usize)) {
        let d = self.grid.dim;
        let m = self.grid.nodes_per_axis();
        let mi = m - 1;
        if d == 2 {
            for a in 0..mi {
                for b in 0..mi {
                    f((a + 1) * m + (b + 1), a * mi + b);
                }
            }
        } else {
            for a in 0..mi {
                for b in 0..mi {
                    for c in 0..mi {
                        f(((a + 1) * m + (b + 1)) * m + (c + 1), (a * mi + b) * mi + c);
                    }
                }
            }
        }
    }
}

impl Precond for DirichletPoissonPre {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let d = self.grid.dim;
        let m = self.grid.nodes_per_axis();
        let mi = m - 1;
        let h = self.grid.spacing();
        let dims = vec![mi; d];
        let mut interior = self.interior.borrow_mut();
        z.fill(0.0);
        self.for_interior(|full, int| interior[int] = r[full]);
        let mut plan = self.plan.borrow_mut();
        plan.dst_nd(&mut interior, &dims);
        let mut k = vec![0usize; d];
        for v in interior.iter_mut() {
            let lam: f64 = (0..d).map(|ax| dirichlet_eig(k[ax], mi, h)).sum();
            *v /= lam * self.scale;
            for ax in (0..d).rev() {
                k[ax] += 1;
                if k[ax] < dims[ax] {
                    break;
                }
                k[ax] = 0;
            }
        }
        plan.dst_nd(&mut interior, &dims);
        DstPlan::normalize(&mut interior, &dims);
        self.for_interior(|full, int| z[full] = interior[int]);
    }
}

/// Mean eigenvalue scale of a coefficient field, used to scale the
/// constant-coefficient preconditioners.
pub fn mean_diagonal_scale(a: &MatrixField) -> f64 {
    let d = a.grid.dim;
    let n = a.grid.node_count();
    let mut acc = 0.0;
    for i in 0..d {
        acc += a.entries[i * d + i].iter().sum::<f64>();
    }
    (acc / (d * n) as f64).max(1e-12)
}

/// Spectral reference eigenvalue of the tight Laplacian on this grid
/// (its largest value), handy for shift scales.
pub fn laplacian_scale(grid: &GridSpec) -> f64 {
    let m = grid.nodes_per_axis();
    let h = grid.spacing();
    (0..grid.dim).map(|_| tight_eig(angle(m / 2, m), h)).sum()
}
