//! Geometric multigrid for `-div(a grad u)` on Dirichlet grids. Grids are
//! node-centered with the index-0 layer pinned to zero per axis, so the
//! coarse grid (every other node) contains the boundary layer exactly and
//! standard linear transfer operators apply. Used as a symmetric V-cycle
//! preconditioner inside CG, which keeps iteration counts grid-independent
//! on the larger 3-D boxes where a spectral preconditioner is too slow per
//! application.

use std::cell::RefCell;

use crate::field::MatrixField;
use crate::grid::GridSpec;
use crate::solver::Precond;

const SMOOTH_SWEEPS: usize = 2;
const JACOBI_DAMPING: f64 = 0.8;
const MAX_DENSE: usize = 4096;
const COARSEST_AXIS: usize = 6;

struct Level {
    dim: usize,
    m: usize,
    h: f64,
    /// d*d coefficient entries, node-indexed.
    a: Vec<Vec<f64>>,
    diag: Vec<f64>,
}

impl Level {
    fn node_count(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    fn strides(&self) -> [usize; 3] {
        match self.dim {
            2 => [self.m, 1, 0],
            _ => [self.m * self.m, self.m, 1],
        }
    }

    fn mask(&self, vals: &mut [f64]) {
        let strides = self.strides();
        let m = self.m;
        for ax in 0..self.dim {
            let stride = strides[ax];
            let block = stride * m;
            let mut base = 0usize;
            while base < vals.len() {
                for off in 0..stride {
                    vals[base + off] = 0.0;
                }
                base += block;
            }
        }
    }

    /// y = P(-div(a grad x)) for x already vanishing on the pinned layer.
    fn apply(&self, x: &[f64], y: &mut [f64], grads: &mut [Vec<f64>], flux: &mut [f64]) {
        let d = self.dim;
        let m = self.m;
        let n = self.node_count();
        let strides = self.strides();
        let inv_h = 1.0 / self.h;
        for ax in 0..d {
            let stride = strides[ax];
            let g = &mut grads[ax];
            let mut mi = [0usize; 3];
            for idx in 0..n {
                let up = if mi[ax] + 1 < m { x[idx + stride] } else { 0.0 };
                g[idx] = (up - x[idx]) * inv_h;
                for a in (0..d).rev() {
                    mi[a] += 1;
                    if mi[a] < m {
                        break;
                    }
                    mi[a] = 0;
                }
            }
        }
        y[..n].fill(0.0);
        for j in 0..d {
            flux.fill(0.0);
            for k in 0..d {
                let ajk = &self.a[j * d + k];
                let g = &grads[k];
                for i in 0..n {
                    flux[i] += ajk[i] * g[i];
                }
            }
            let stride = strides[j];
            let mut mi = [0usize; 3];
            for idx in 0..n {
                let down = if mi[j] > 0 { flux[idx - stride] } else { 0.0 };
                y[idx] -= (flux[idx] - down) * inv_h;
                for a in (0..d).rev() {
                    mi[a] += 1;
                    if mi[a] < m {
                        break;
                    }
                    mi[a] = 0;
                }
            }
        }
        self.mask(y);
    }

    fn compute_diag(&mut self) {
        let d = self.dim;
        let m = self.m;
        let n = self.node_count();
        let strides = self.strides();
        let inv_h2 = 1.0 / (self.h * self.h);
        let mut diag = vec![0.0; n];
        let mut mi = [0usize; 3];
        for idx in 0..n {
            let mut v = 0.0;
            let pinned = (0..d).any(|a| mi[a] == 0);
            if pinned {
                diag[idx] = 1.0;
            } else {
                for j in 0..d {
                    for k in 0..d {
                        v += self.a[j * d + k][idx];
                    }
                    v += self.a[j * d + j][idx - strides[j]];
                }
                diag[idx] = v * inv_h2;
            }
            for a in (0..d).rev() {
                mi[a] += 1;
                if mi[a] < m {
                    break;
                }
                mi[a] = 0;
            }
        }
        self.diag = diag;
    }
}

struct Workspace {
    grads: Vec<Vec<f64>>,
    flux: Vec<f64>,
    res: Vec<f64>,
    ax: Vec<f64>,
}

pub struct Multigrid {
    levels: Vec<Level>,
    work: RefCell<Vec<Workspace>>,
    coarse: CoarseSolve,
}

enum CoarseSolve {
    Cholesky { n: usize, factor: Vec<f64> },
    Jacobi { sweeps: usize },
}

impl Multigrid {
    pub fn new(grid: &GridSpec, a: &MatrixField) -> Self {
        assert!(!grid.is_periodic(), "multigrid expects Dirichlet grids");
        let d = grid.dim;
        let mut levels = Vec::new();
        let mut level = Level {
            dim: d,
            m: grid.nodes_per_axis(),
            h: grid.spacing(),
            a: a.entries.clone(),
            diag: Vec::new(),
        };
        level.compute_diag();
        levels.push(level);
        loop {
            let last = levels.last().unwrap();
            if last.m % 2 != 0 || last.m <= COARSEST_AXIS {
                break;
            }
            let mc = last.m / 2;
            // coefficient by injection at the shared (even) nodes
            let mut coarse_a = vec![vec![0.0; mc.pow(d as u32)]; d * d];
            inject_coefficient(d, last.m, &last.a, &mut coarse_a);
            let mut lvl = Level {
                dim: d,
                m: mc,
                h: 2.0 * last.h,
                a: coarse_a,
                diag: Vec::new(),
            };
            lvl.compute_diag();
            levels.push(lvl);
        }
        let work = levels
            .iter()
            .map(|l| {
                let n = l.node_count();
                Workspace {
                    grads: vec![vec![0.0; n]; d],
                    flux: vec![0.0; n],
                    res: vec![0.0; n],
                    ax: vec![0.0; n],
                }
            })
            .collect();
        let coarse = build_coarse_solver(levels.last().unwrap());
        Multigrid {
            levels,
            work: RefCell::new(work),
            coarse,
        }
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    fn smooth(&self, l: usize, x: &mut [f64], b: &[f64], work: &mut [Workspace]) {
        let lvl = &self.levels[l];
        let n = lvl.node_count();
        for _ in 0..SMOOTH_SWEEPS {
            let w = &mut work[l];
            lvl.apply(x, &mut w.ax, &mut w.grads, &mut w.flux);
            for i in 0..n {
                x[i] += JACOBI_DAMPING * (b[i] - w.ax[i]) / lvl.diag[i];
            }
        }
    }

    fn vcycle(&self, l: usize, x: &mut [f64], b: &[f64], work: &mut [Workspace]) {
        let lvl = &self.levels[l];
        let n = lvl.node_count();
        if l + 1 == self.levels.len() {
            match &self.coarse {
                CoarseSolve::Cholesky { n: nc, factor } => chol_solve(factor, *nc, b, x),
                CoarseSolve::Jacobi { sweeps } => {
                    x[..n].fill(0.0);
                    for _ in 0..*sweeps {
                        let w = &mut work[l];
                        lvl.apply(x, &mut w.ax, &mut w.grads, &mut w.flux);
                        for i in 0..n {
                            x[i] += JACOBI_DAMPING * (b[i] - w.ax[i]) / lvl.diag[i];
                        }
                    }
                }
            }
            return;
        }
        self.smooth(l, x, b, work);
        {
            let w = &mut work[l];
            lvl.apply(x, &mut w.ax, &mut w.grads, &mut w.flux);
            for i in 0..n {
                w.res[i] = b[i] - w.ax[i];
            }
        }
        let mc = self.levels[l + 1].node_count();
        let mut bc = vec![0.0; mc];
        restrict_field(lvl.dim, lvl.m, &work[l].res, &mut bc);
        self.levels[l + 1].mask(&mut bc);
        let mut xc = vec![0.0; mc];
        self.vcycle(l + 1, &mut xc, &bc, work);
        prolong_add(lvl.dim, self.levels[l + 1].m, &xc, x);
        lvl.mask(x);
        self.smooth(l, x, b, work);
    }
}

impl Precond for Multigrid {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let mut work = self.work.borrow_mut();
        z.fill(0.0);
        self.vcycle(0, z, r, &mut work);
    }
}

fn inject_coefficient(d: usize, m_fine: usize, fine: &[Vec<f64>], coarse: &mut [Vec<f64>]) {
    let mc = m_fine / 2;
    for (e, cf) in coarse.iter_mut().enumerate() {
        let ff = &fine[e];
        if d == 2 {
            for c0 in 0..mc {
                for c1 in 0..mc {
                    cf[c0 * mc + c1] = ff[(2 * c0) * m_fine + 2 * c1];
                }
            }
        } else {
            for c0 in 0..mc {
                for c1 in 0..mc {
                    for c2 in 0..mc {
                        cf[(c0 * mc + c1) * mc + c2] =
                            ff[((2 * c0) * m_fine + 2 * c1) * m_fine + 2 * c2];
                    }
                }
            }
        }
    }
}

/// Node-centered linear interpolation weights along one axis. Fine node
/// `2c` coincides with coarse node `c`; fine node `2c+1` averages coarse
/// `c` and `c+1` (ghost zero past the end).
#[inline]
fn axis_weights(k_fine: usize, mc: usize) -> [(isize, f64); 2] {
    if k_fine % 2 == 0 {
        [((k_fine / 2) as isize, 1.0), (-1, 0.0)]
    } else {
        let c = (k_fine / 2) as isize;
        let up = c + 1;
        let up = if up >= mc as isize { -1 } else { up };
        [(c, 0.5), (up, 0.5)]
    }
}

fn prolong_add(d: usize, mc: usize, coarse: &[f64], fine: &mut [f64]) {
    let mf = 2 * mc;
    if d == 2 {
        for f0 in 0..mf {
            let w0 = axis_weights(f0, mc);
            for f1 in 0..mf {
                let w1 = axis_weights(f1, mc);
                let mut acc = 0.0;
                for (c0, a0) in w0 {
                    if c0 < 0 || a0 == 0.0 {
                        continue;
                    }
                    for (c1, a1) in w1 {
                        if c1 < 0 || a1 == 0.0 {
                            continue;
                        }
                        acc += a0 * a1 * coarse[c0 as usize * mc + c1 as usize];
                    }
                }
                fine[f0 * mf + f1] += acc;
            }
        }
    } else {
        for f0 in 0..mf {
            let w0 = axis_weights(f0, mc);
            for f1 in 0..mf {
                let w1 = axis_weights(f1, mc);
                for f2 in 0..mf {
                    let w2 = axis_weights(f2, mc);
                    let mut acc = 0.0;
                    for (c0, a0) in w0 {
                        if c0 < 0 || a0 == 0.0 {
                            continue;
                        }
                        for (c1, a1) in w1 {
                            if c1 < 0 || a1 == 0.0 {
                                continue;
                            }
                            for (c2, a2) in w2 {
                                if c2 < 0 || a2 == 0.0 {
                                    continue;
                                }
                                acc += a0
                                    * a1
                                    * a2
                                    * coarse[(c0 as usize * mc + c1 as usize) * mc + c2 as usize];
                            }
                        }
                    }
                    fine[(f0 * mf + f1) * mf + f2] += acc;
                }
            }
        }
    }
}

/// Adjoint of [`prolong_add`] scaled by `2^-d` (full weighting).
fn restrict_field(d: usize, m_fine: usize, fine: &[f64], coarse: &mut [f64]) {
    let mc = m_fine / 2;
    let norm = 1.0 / (1 << d) as f64;
    coarse.fill(0.0);
    if d == 2 {
        for f0 in 0..m_fine {
            let w0 = axis_weights(f0, mc);
            for f1 in 0..m_fine {
                let w1 = axis_weights(f1, mc);
                let v = fine[f0 * m_fine + f1] * norm;
                if v == 0.0 {
                    continue;
                }
                for (c0, a0) in w0 {
                    if c0 < 0 || a0 == 0.0 {
                        continue;
                    }
                    for (c1, a1) in w1 {
                        if c1 < 0 || a1 == 0.0 {
                            continue;
                        }
                        coarse[c0 as usize * mc + c1 as usize] += a0 * a1 * v;
                    }
                }
            }
        }
    } else {
        for f0 in 0..m_fine {
            let w0 = axis_weights(f0, mc);
            for f1 in 0..m_fine {
                let w1 = axis_weights(f1, mc);
                for f2 in 0..m_fine {
                    let w2 = axis_weights(f2, mc);
                    let v = fine[(f0 * m_fine + f1) * m_fine + f2] * norm;
                    if v == 0.0 {
                        continue;
                    }
                    for (c0, a0) in w0 {
                        if c0 < 0 || a0 == 0.0 {
                            continue;
                        }
                        for (c1, a1) in w1 {
                            if c1 < 0 || a1 == 0.0 {
                                continue;
                            }
                            for (c2, a2) in w2 {
                                if c2 < 0 || a2 == 0.0 {
                                    continue;
                                }
                                coarse[(c0 as usize * mc + c1 as usize) * mc + c2 as usize] +=
                                    a0 * a1 * a2 * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn build_coarse_solver(lvl: &Level) -> CoarseSolve {
    let n = lvl.node_count();
    if n > MAX_DENSE {
        return CoarseSolve::Jacobi { sweeps: 60 };
    }
    let d = lvl.dim;
    let m = lvl.m;
    let mut mat = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    let mut grads = vec![vec![0.0; n]; d];
    let mut flux = vec![0.0; n];
    let pinned = |idx: usize| -> bool {
        let mut rem = idx;
        for _ in 0..d {
            if rem % m == 0 {
                return true;
            }
            rem /= m;
        }
        false
    };
    for j in 0..n {
        if pinned(j) {
            mat[j * n + j] = 1.0;
            continue;
        }
        e[j] = 1.0;
        lvl.apply(&e, &mut col, &mut grads, &mut flux);
        for i in 0..n {
            mat[i * n + j] = col[i];
        }
        mat[j * n + j] = col[j];
        e[j] = 0.0;
    }
    for i in 0..n {
        if pinned(i) {
            for j in 0..n {
                mat[i * n + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
    }
    // in-place Cholesky (lower)
    for k in 0..n {
        let mut s = mat[k * n + k];
        for p in 0..k {
            s -= mat[k * n + p] * mat[k * n + p];
        }
        let s = s.max(1e-300).sqrt();
        mat[k * n + k] = s;
        for i in (k + 1)..n {
            let mut v = mat[i * n + k];
            for p in 0..k {
                v -= mat[i * n + p] * mat[k * n + p];
            }
            mat[i * n + k] = v / s;
        }
    }
    CoarseSolve::Cholesky { n, factor: mat }
}

fn chol_solve(factor: &[f64], n: usize, b: &[f64], x: &mut [f64]) {
    for i in 0..n {
        let mut v = b[i];
        for p in 0..i {
            v -= factor[i * n + p] * x[p];
        }
        x[i] = v / factor[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = x[i];
        for p in (i + 1)..n {
            v -= factor[p * n + i] * x[p];
        }
        x[i] = v / factor[i * n + i];
    }
}
