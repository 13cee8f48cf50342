//! Spectral machinery: n-dimensional complex FFTs, symbols of the
//! discrete difference operators, periodic constant-coefficient solves,
//! a real-packed 3-D periodic Poisson solver for grids too large to hold
//! as complex data, and DST-I transforms for Dirichlet spectra.
//!
//! All discrete symbols here correspond to the forward/backward
//! difference pair used by [`crate::field`], so spectral identities hold
//! exactly at the stencil level, not just asymptotically.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::field::ScalarField;
use crate::grid::GridSpec;

/// Symbol of the forward difference `F_j` at angle `theta = 2 pi k / m`:
/// `(e^{i theta} - 1) / h`.
#[inline]
pub fn forward_symbol(theta: f64, h: f64) -> Complex<f64> {
    Complex::new((theta.cos() - 1.0) / h, theta.sin() / h)
}

/// Eigenvalue of the tight (backward-forward) 1-D Laplacian:
/// `|F_j|^2 = 4 sin^2(theta/2) / h^2`.
#[inline]
pub fn tight_eig(theta: f64, h: f64) -> f64 {
    let s = (0.5 * theta).sin();
    4.0 * s * s / (h * h)
}

#[inline]
pub fn angle(k: usize, m: usize) -> f64 {
    2.0 * std::f64::consts::PI * k as f64 / m as f64
}

/// In-place complex FFT along every axis of a row-major array
/// (last axis fastest). Unnormalized; the inverse carries the 1/N factor.
pub fn fft_nd(data: &mut [Complex<f64>], dims: &[usize], inverse: bool) {
    let total: usize = dims.iter().product();
    assert_eq!(data.len(), total);
    let mut planner = FftPlanner::new();
    let ndim = dims.len();
    let mut stride_after = 1usize;
    for ax in (0..ndim).rev() {
        let m = dims[ax];
        let fft = if inverse {
            planner.plan_fft_inverse(m)
        } else {
            planner.plan_fft_forward(m)
        };
        let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        let mut line = vec![Complex::default(); m];
        let stride = stride_after;
        let outer = total / (m * stride);
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * m * stride + inner;
                if stride == 1 {
                    let seg = &mut data[base..base + m];
                    fft.process_with_scratch(seg, &mut scratch);
                } else {
                    for (t, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + t * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (t, slot) in line.iter().enumerate() {
                        data[base + t * stride] = *slot;
                    }
                }
            }
        }
        stride_after *= m;
    }
    if inverse {
        let scale = 1.0 / total as f64;
        for v in data {
            *v *= scale;
        }
    }
}

pub fn to_complex(f: &ScalarField) -> Vec<Complex<f64>> {
    f.values.iter().map(|&v| Complex::new(v, 0.0)).collect()
}

pub fn real_part(data: &[Complex<f64>], grid: GridSpec) -> ScalarField {
    ScalarField {
        grid,
        values: data.iter().map(|c| c.re).collect(),
    }
}

/// Apply a spectral multiplier on a periodic grid: forward FFT, multiply
/// by `filter(k)` (complex, indexed by integer wave numbers), inverse FFT.
pub fn apply_symbol_filter(
    f: &ScalarField,
    mut filter: impl FnMut(&[usize]) -> Complex<f64>,
) -> ScalarField {
    assert!(f.grid.is_periodic() || true); // symbols are index-based; caller controls semantics
    let dims = vec![f.grid.nodes_per_axis(); f.grid.dim];
    let mut data = to_complex(f);
    fft_nd(&mut data, &dims, false);
    let mut k = vec![0usize; dims.len()];
    for v in data.iter_mut() {
        *v *= filter(&k);
        for ax in (0..dims.len()).rev() {
            k[ax] += 1;
            if k[ax] < dims[ax] {
                break;
            }
            k[ax] = 0;
        }
    }
    fft_nd(&mut data, &dims, true);
    real_part(&data, f.grid)
}

/// Solve the tight periodic Poisson problem `(-div grad) u = rhs` with the
/// zero mode pinned to 0. The right-hand side should have (numerically)
/// zero mean; its zero mode is discarded.
pub fn solve_periodic_poisson(rhs: &ScalarField) -> ScalarField {
    let m = rhs.grid.nodes_per_axis();
    let h = rhs.grid.spacing();
    let dim = rhs.grid.dim;
    apply_symbol_filter(rhs, |k| {
        let lam: f64 = (0..dim).map(|ax| tight_eig(angle(k[ax], m), h)).sum();
        if lam == 0.0 {
            Complex::new(0.0, 0.0)
        } else {
            Complex::new(1.0 / lam, 0.0)
        }
    })
}

// ---------------------------------------------------------------------------
// Real-packed 3-D periodic spectral solver.
//
// Holds a real row-major array with the last axis padded from m2 to m2+2
// floats so the half-spectrum (m2/2+1 complex values per line) fits in
// place. Axis 2 uses a packed real FFT (complex FFT of length m2/2 plus an
// untangling pass); axes 0 and 1 are complex FFTs over the half-spectrum.
// Peak memory is one padded real array, which is what makes desk-scale
// counterexample grids possible.
// ---------------------------------------------------------------------------

pub struct RealSpectral3 {
    pub dims: [usize; 3],
    pad2: usize,
    pub data: Vec<f64>,
}

impl RealSpectral3 {
    pub fn new(dims: [usize; 3]) -> Self {
        assert!(dims[2] % 2 == 0, "last axis must be even");
        let pad2 = dims[2] + 2;
        RealSpectral3 {
            dims,
            pad2,
            data: vec![0.0; dims[0] * dims[1] * pad2],
        }
    }

    pub fn required_bytes(dims: [usize; 3]) -> u64 {
        (dims[0] as u64) * (dims[1] as u64) * ((dims[2] + 2) as u64) * 8
    }

    #[inline]
    pub fn offset(&self, i0: usize, i1: usize, i2: usize) -> usize {
        (i0 * self.dims[1] + i1) * self.pad2 + i2
    }

    #[inline]
    pub fn get(&self, i0: usize, i1: usize, i2: usize) -> f64 {
        self.data[self.offset(i0, i1, i2)]
    }

    #[inline]
    pub fn set(&mut self, i0: usize, i1: usize, i2: usize, v: f64) {
        let o = self.offset(i0, i1, i2);
        self.data[o] = v;
    }

    /// Packed real FFT along axis 2: each line of m2 reals becomes
    /// m2/2 + 1 complex values (Hermitian half-spectrum) in place.
    fn r2c_axis2(&mut self) {
        let m2 = self.dims[2];
        let half = m2 / 2;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(half);
        let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        let mut z = vec![Complex::default(); half];
        let lines = self.dims[0] * self.dims[1];
        for line in 0..lines {
            let base = line * self.pad2;
            for j in 0..half {
                z[j] = Complex::new(self.data[base + 2 * j], self.data[base + 2 * j + 1]);
            }
            fft.process_with_scratch(&mut z, &mut scratch);
            // untangle: X[k] = (Z[k] + conj(Z[half-k]))/2
            //               - i/2 e^{-2 pi i k / m2} (Z[k] - conj(Z[half-k]))
            for k in 0..=half {
                let zk = if k == half { z[0] } else { z[k] };
                let zmk = if k == 0 { z[0] } else { z[half - k] }.conj();
                let even = 0.5 * (zk + zmk);
                let odd = 0.5 * (zk - zmk);
                let th = -2.0 * std::f64::consts::PI * k as f64 / m2 as f64;
                let tw = Complex::new(th.cos(), th.sin());
                let x = even + Complex::new(0.0, -1.0) * tw * odd;
                // k = half lands in the pad slot; reads all come from z
                let o = base + 2 * k;
                self.data[o] = x.re;
                self.data[o + 1] = x.im;
            }
        }
    }

    /// Inverse of [`Self::r2c_axis2`]; output scaled by 1/m2.
    fn c2r_axis2(&mut self) {
        let m2 = self.dims[2];
        let half = m2 / 2;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_inverse(half);
        let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        let mut z = vec![Complex::default(); half];
        let lines = self.dims[0] * self.dims[1];
        for line in 0..lines {
            let base = line * self.pad2;
            for k in 0..half {
                let xk = Complex::new(self.data[base + 2 * k], self.data[base + 2 * k + 1]);
                let xmk = {
                    let kk = half - k;
                    Complex::new(self.data[base + 2 * kk], self.data[base + 2 * kk + 1]).conj()
                };
                let even = 0.5 * (xk + xmk);
                let th = 2.0 * std::f64::consts::PI * k as f64 / m2 as f64;
                let tw = Complex::new(th.cos(), th.sin());
                let odd = Complex::new(0.0, 0.5) * tw * (xk - xmk);
                z[k] = even + odd;
            }
            fft.process_with_scratch(&mut z, &mut scratch);
            for j in 0..half {
                self.data[base + 2 * j] = z[j].re / half as f64;
                self.data[base + 2 * j + 1] = z[j].im / half as f64;
            }
            self.data[base + m2] = 0.0;
            self.data[base + m2 + 1] = 0.0;
        }
    }

    /// Complex FFT along axis 0 or 1 of the half-spectrum.
    fn complex_axis(&mut self, ax: usize, inverse: bool) {
        let half_c = self.dims[2] / 2 + 1;
        let m = self.dims[ax];
        let mut planner = FftPlanner::new();
        let fft = if inverse {
            planner.plan_fft_inverse(m)
        } else {
            planner.plan_fft_forward(m)
        };
        let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        let mut line = vec![Complex::default(); m];
        let scale = if inverse { 1.0 / m as f64 } else { 1.0 };
        match ax {
            0 => {
                let stride = self.dims[1] * self.pad2;
                for i1 in 0..self.dims[1] {
                    for k2 in 0..half_c {
                        let base = i1 * self.pad2 + 2 * k2;
                        for t in 0..m {
                            let o = base + t * stride;
                            line[t] = Complex::new(self.data[o], self.data[o + 1]);
                        }
                        fft.process_with_scratch(&mut line, &mut scratch);
                        for t in 0..m {
                            let o = base + t * stride;
                            self.data[o] = line[t].re * scale;
                            self.data[o + 1] = line[t].im * scale;
                        }
                    }
                }
            }
            1 => {
                let stride = self.pad2;
                for i0 in 0..self.dims[0] {
                    for k2 in 0..half_c {
                        let base = i0 * self.dims[1] * self.pad2 + 2 * k2;
                        for t in 0..m {
                            let o = base + t * stride;
                            line[t] = Complex::new(self.data[o], self.data[o + 1]);
                        }
                        fft.process_with_scratch(&mut line, &mut scratch);
                        for t in 0..m {
                            let o = base + t * stride;
                            self.data[o] = line[t].re * scale;
                            self.data[o + 1] = line[t].im * scale;
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    pub fn forward(&mut self) {
        self.r2c_axis2();
        self.complex_axis(1, false);
        self.complex_axis(0, false);
    }

    pub fn inverse(&mut self) {
        self.complex_axis(0, true);
        self.complex_axis(1, true);
        self.c2r_axis2();
    }

    /// Multiply the half-spectrum by a real, reflection-symmetric
    /// multiplier `s(k0,k1,k2)`; Hermitian symmetry is preserved.
    pub fn apply_real_symbol(&mut self, mut s: impl FnMut(usize, usize, usize) -> f64) {
        let half_c = self.dims[2] / 2 + 1;
        for i0 in 0..self.dims[0] {
            for i1 in 0..self.dims[1] {
                let base = (i0 * self.dims[1] + i1) * self.pad2;
                for k2 in 0..half_c {
                    let mult = s(i0, i1, k2);
                    self.data[base + 2 * k2] *= mult;
                    self.data[base + 2 * k2 + 1] *= mult;
                }
            }
        }
    }

    /// Solve the tight periodic Poisson problem in place (zero mode pinned).
    pub fn solve_poisson(&mut self, h: f64) {
        let dims = self.dims;
        self.forward();
        self.apply_real_symbol(|k0, k1, k2| {
            let lam = tight_eig(angle(k0, dims[0]), h)
                + tight_eig(angle(k1, dims[1]), h)
                + tight_eig(angle(k2, dims[2]), h);
            if lam == 0.0 {
                0.0
            } else {
                1.0 / lam
            }
        });
        self.inverse();
    }
}

// ---------------------------------------------------------------------------
// DST-I, the spectrum of the tight Laplacian with ghost-zero boundaries.
// ---------------------------------------------------------------------------

/// In-place DST-I along every axis of a row-major real array. Self-inverse
/// up to the factor `prod_ax 2/(m_ax + 1)`, which `normalize` applies.
pub struct DstPlan {
    planner: FftPlanner<f64>,
}

impl DstPlan {
    pub fn new() -> Self {
        DstPlan {
            planner: FftPlanner::new(),
        }
    }

    /// DST-I of one line of length n via a complex FFT of length 2(n+1).
    fn dst1_line(&mut self, line: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        let n = line.len();
        let m = 2 * (n + 1);
        buf.clear();
        buf.resize(m, Complex::default());
        for (k, &v) in line.iter().enumerate() {
            buf[k + 1] = Complex::new(v, 0.0);
            buf[m - 1 - k] = Complex::new(-v, 0.0);
        }
        let fft = self.planner.plan_fft_forward(m);
        let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(buf, &mut scratch);
        for j in 0..n {
            line[j] = -0.5 * buf[j + 1].im;
        }
    }

    pub fn dst_nd(&mut self, data: &mut [f64], dims: &[usize]) {
        let total: usize = dims.iter().product();
        assert_eq!(data.len(), total);
        let ndim = dims.len();
        let mut buf = Vec::new();
        let mut stride_after = 1usize;
        for ax in (0..ndim).rev() {
            let m = dims[ax];
            let stride = stride_after;
            let outer = total / (m * stride);
            let mut line = vec![0.0; m];
            for o in 0..outer {
                for inner in 0..stride {
                    let base = o * m * stride + inner;
                    for t in 0..m {
                        line[t] = data[base + t * stride];
                    }
                    self.dst1_line(&mut line, &mut buf);
                    for t in 0..m {
                        data[base + t * stride] = line[t];
                    }
                }
            }
            stride_after *= m;
        }
    }

    pub fn normalize(data: &mut [f64], dims: &[usize]) {
        let scale: f64 = dims.iter().map(|&m| 2.0 / (m as f64 + 1.0)).product();
        for v in data {
            *v *= scale;
        }
    }
}

/// Eigenvalue of the tight ghost-zero 1-D Laplacian for DST-I mode `j`
/// (0-based) on `m` nodes: `4 sin^2(pi (j+1) / (2(m+1))) / h^2`.
#[inline]
pub fn dirichlet_eig(j: usize, m: usize, h: f64) -> f64 {
    let s = (std::f64::consts::PI * (j as f64 + 1.0) / (2.0 * (m as f64 + 1.0))).sin();
    4.0 * s * s / (h * h)
}
