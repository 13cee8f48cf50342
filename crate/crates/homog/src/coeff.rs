//! Coefficient fields `a = a_per + a_tilde`: a smooth periodic background
//! given by trigonometric polynomials plus a localized defect with a
//! declared integrability exponent. Smoothness comes from the functional
//! form; ellipticity is verified node-wise on every sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{lq_norm_matrix, MatrixField, Region};
use crate::grid::{GridKind, GridSpec, NodeWalker};

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    /// Integer wave vector; the term is `amplitude * sin(2 pi k.x + phase)`.
    pub wave: Vec<i32>,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrigScalar {
    pub constant: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

impl TrigScalar {
    pub fn constant(c: f64) -> Self {
        TrigScalar {
            constant: c,
            terms: Vec::new(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for t in &self.terms {
            let mut arg = t.phase;
            for (ax, &k) in t.wave.iter().enumerate() {
                arg += 2.0 * std::f64::consts::PI * k as f64 * x[ax];
            }
            v += t.amplitude * arg.sin();
        }
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PeriodicSpec {
    Identity,
    Scaled { scale: f64 },
    /// Full matrix of trigonometric polynomials, row-major, length d*d.
    Matrix { entries: Vec<TrigScalar> },
}

impl PeriodicSpec {
    /// Isotropic laminate `diag(base + amp sin(2 pi x_axis), ...)`.
    pub fn laminate_iso(dim: usize, base: f64, amplitude: f64, axis: usize) -> Self {
        let mut entries = vec![TrigScalar::constant(0.0); dim * dim];
        let mut wave = vec![0i32; dim];
        wave[axis] = 1;
        for i in 0..dim {
            entries[i * dim + i] = TrigScalar {
                constant: base,
                terms: vec![TrigTerm {
                    amplitude,
                    wave: wave.clone(),
                    phase: 0.0,
                }],
            };
        }
        PeriodicSpec::Matrix { entries }
    }

    /// Laminate with independent diagonal entries `(base_i, amp_i)`, all
    /// varying along `axis`.
    pub fn laminate_diag(dim: usize, diag: &[(f64, f64)], axis: usize) -> Self {
        let mut entries = vec![TrigScalar::constant(0.0); dim * dim];
        let mut wave = vec![0i32; dim];
        wave[axis] = 1;
        for (i, &(base, amp)) in diag.iter().enumerate() {
            entries[i * dim + i] = TrigScalar {
                constant: base,
                terms: if amp != 0.0 {
                    vec![TrigTerm {
                        amplitude: amp,
                        wave: wave.clone(),
                        phase: 0.0,
                    }]
                } else {
                    Vec::new()
                },
            };
        }
        PeriodicSpec::Matrix { entries }
    }

    pub fn eval(&self, dim: usize, x: &[f64], out: &mut [f64]) {
        match self {
            PeriodicSpec::Identity => {
                out[..dim * dim].fill(0.0);
                for i in 0..dim {
                    out[i * dim + i] = 1.0;
                }
            }
            PeriodicSpec::Scaled { scale } => {
                out[..dim * dim].fill(0.0);
                for i in 0..dim {
                    out[i * dim + i] = *scale;
                }
            }
            PeriodicSpec::Matrix { entries } => {
                for (o, e) in out[..dim * dim].iter_mut().zip(entries) {
                    *o = e.eval(x);
                }
            }
        }
    }

    pub fn transpose(&self, dim: usize) -> PeriodicSpec {
        match self {
            PeriodicSpec::Matrix { entries } => {
                let mut t = entries.clone();
                for i in 0..dim {
                    for j in 0..dim {
                        t[i * dim + j] = entries[j * dim + i].clone();
                    }
                }
                PeriodicSpec::Matrix { entries: t }
            }
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DefectProfile {
    None,
    Gaussian { amplitude: f64, width: f64 },
    CompactBump { amplitude: f64, radius: f64 },
    Algebraic { amplitude: f64, decay: f64 },
}

impl DefectProfile {
    pub fn eval(&self, r2: f64) -> f64 {
        match self {
            DefectProfile::None => 0.0,
            DefectProfile::Gaussian { amplitude, width } => {
                amplitude * (-r2 / (2.0 * width * width)).exp()
            }
            DefectProfile::CompactBump { amplitude, radius } => {
                let t = r2 / (radius * radius);
                if t < 1.0 {
                    amplitude * (1.0 - t).powi(3)
                } else {
                    0.0
                }
            }
            DefectProfile::Algebraic { amplitude, decay } => {
                amplitude * (1.0 + r2).powf(-decay / 2.0)
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, DefectProfile::None)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefectSpec {
    pub profile: DefectProfile,
    /// Constant matrix pattern multiplying the profile, row-major d*d;
    /// identity when absent.
    #[serde(default)]
    pub matrix: Option<Vec<f64>>,
    /// Center of the defect in medium coordinates; origin when absent.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
}

impl DefectSpec {
    pub fn none() -> Self {
        DefectSpec {
            profile: DefectProfile::None,
            matrix: None,
            center: None,
        }
    }

    pub fn eval(&self, dim: usize, x: &[f64], out: &mut [f64]) {
        let mut r2 = 0.0;
        for ax in 0..dim {
            let c = self.center.as_ref().map_or(0.0, |c| c[ax]);
            let dx = x[ax] - c;
            r2 += dx * dx;
        }
        let p = self.profile.eval(r2);
        match &self.matrix {
            None => {
                out[..dim * dim].fill(0.0);
                for i in 0..dim {
                    out[i * dim + i] = p;
                }
            }
            Some(m) => {
                for (o, &c) in out[..dim * dim].iter_mut().zip(m) {
                    *o = p * c;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientModel {
    pub dim: usize,
    pub periodic: PeriodicSpec,
    #[serde(default = "DefectSpec::none")]
    pub defect: DefectSpec,
    /// Declared integrability exponent of the defect part.
    pub r_exponent: f64,
    pub mu_min: f64,
    pub mu_max: f64,
}

impl CoefficientModel {
    pub fn identity(dim: usize) -> Self {
        CoefficientModel {
            dim,
            periodic: PeriodicSpec::Identity,
            defect: DefectSpec::none(),
            r_exponent: 1.0,
            mu_min: 1.0,
            mu_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::CoefficientSpec(format!(
                "dimension must be 2 or 3, got {}",
                self.dim
            )));
        }
        if !(self.r_exponent >= 1.0) {
            return Err(Error::CoefficientSpec(
                "integrability exponent r must be >= 1".into(),
            ));
        }
        if !(self.mu_min > 0.0 && self.mu_max >= self.mu_min) {
            return Err(Error::CoefficientSpec(
                "need 0 < mu_min <= mu_max".into(),
            ));
        }
        if let PeriodicSpec::Matrix { entries } = &self.periodic {
            if entries.len() != self.dim * self.dim {
                return Err(Error::CoefficientSpec(format!(
                    "periodic matrix needs {} entries, got {}",
                    self.dim * self.dim,
                    entries.len()
                )));
            }
            for e in entries {
                for t in &e.terms {
                    if t.wave.len() != self.dim {
                        return Err(Error::CoefficientSpec(
                            "wave vector length must equal the dimension".into(),
                        ));
                    }
                }
            }
        }
        if let Some(m) = &self.defect.matrix {
            if m.len() != self.dim * self.dim {
                return Err(Error::CoefficientSpec(format!(
                    "defect matrix needs {} entries, got {}",
                    self.dim * self.dim,
                    m.len()
                )));
            }
        }
        if let DefectProfile::Algebraic { decay, .. } = self.defect.profile {
            // membership in L^r needs r * decay > d
            if self.r_exponent * decay <= self.dim as f64 {
                return Err(Error::CoefficientSpec(format!(
                    "algebraic defect with decay {} is not in L^{} for d = {}",
                    decay, self.r_exponent, self.dim
                )));
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> CoefficientModel {
        let mut t = self.clone();
        t.periodic = self.periodic.transpose(self.dim);
        if let Some(m) = &self.defect.matrix {
            let d = self.dim;
            let mut tm = m.clone();
            for i in 0..d {
                for j in 0..d {
                    tm[i * d + j] = m[j * d + i];
                }
            }
            t.defect.matrix = Some(tm);
        }
        t
    }

    pub fn eval_periodic(&self, x: &[f64], out: &mut [f64]) {
        self.periodic.eval(self.dim, x, out);
    }

    pub fn eval_defect(&self, x: &[f64], out: &mut [f64]) {
        self.defect.eval(self.dim, x, out);
    }

    pub fn eval_total(&self, x: &[f64], out: &mut [f64]) {
        let mut tilde = [0.0; MAX_DIM * MAX_DIM];
        self.periodic.eval(self.dim, x, out);
        self.defect.eval(self.dim, x, &mut tilde);
        for (o, t) in out[..self.dim * self.dim].iter_mut().zip(&tilde) {
            *o += t;
        }
    }

    /// Sample the periodic part on a cell grid, verifying ellipticity
    /// against the declared band.
    pub fn sample_periodic(&self, grid: &GridSpec) -> Result<MatrixField> {
        if !matches!(grid.kind, GridKind::Cell) {
            return Err(Error::GridMismatch(
                "periodic sampling requires a cell grid".into(),
            ));
        }
        let f = self.sample_with(grid, |m, x, out| m.eval_periodic(x, out))?;
        let rep = ellipticity_check(&f)?;
        rep.require_band(self.mu_min, self.mu_max)?;
        Ok(f)
    }

    /// Sample only the defect part on a box grid.
    pub fn sample_defect(&self, grid: &GridSpec) -> Result<MatrixField> {
        if !matches!(grid.kind, GridKind::Box { .. }) {
            return Err(Error::GridMismatch(
                "defect sampling requires a box grid".into(),
            ));
        }
        self.validate()?;
        self.sample_with(grid, |m, x, out| m.eval_defect(x, out))
    }

    /// Sample `a_per + a_tilde` on a box grid with ellipticity verified.
    pub fn sample_total(&self, grid: &GridSpec) -> Result<MatrixField> {
        let f = self.sample_with(grid, |m, x, out| m.eval_total(x, out))?;
        let rep = ellipticity_check(&f)?;
        rep.require_band(self.mu_min, self.mu_max)?;
        Ok(f)
    }

    /// Sample `a((x - origin)/eps)` on any grid (oscillatory coefficient).
    pub fn sample_rescaled(
        &self,
        grid: &GridSpec,
        eps: f64,
        origin: &[f64],
    ) -> Result<MatrixField> {
        let f = self.sample_with(grid, |m, x, out| {
            let mut y = [0.0; MAX_DIM];
            for ax in 0..m.dim {
                y[ax] = (x[ax] - origin[ax]) / eps;
            }
            m.eval_total(&y[..m.dim], out)
        })?;
        let rep = ellipticity_check(&f)?;
        rep.require_band(self.mu_min, self.mu_max)?;
        Ok(f)
    }

    fn sample_with(
        &self,
        grid: &GridSpec,
        eval: impl Fn(&CoefficientModel, &[f64], &mut [f64]),
    ) -> Result<MatrixField> {
        self.validate()?;
        if grid.dim != self.dim {
            return Err(Error::GridMismatch(format!(
                "model dimension {} vs grid dimension {}",
                self.dim, grid.dim
            )));
        }
        let d = self.dim;
        let mut field = MatrixField::zeros(*grid);
        let mut w = NodeWalker::new(grid);
        let mut x = vec![0.0; d];
        let mut buf = [0.0; MAX_DIM * MAX_DIM];
        let mut idx = 0usize;
        while w.advance() {
            for (ax, &k) in w.mi.iter().enumerate() {
                x[ax] = grid.axis_coord(k);
            }
            eval(self, &x, &mut buf);
            for i in 0..d {
                for j in 0..d {
                    field.entries[i * d + j][idx] = buf[i * d + j];
                }
            }
            idx += 1;
        }
        if !field.all_finite() {
            return Err(Error::CoefficientSpec("non-finite sample".into()));
        }
        Ok(field)
    }

    /// Dyadic-annulus `L^r` masses of the defect on a box grid, with the
    /// consecutive-shell ratios that witness summability.
    pub fn defect_annulus_masses(
        &self,
        grid: &GridSpec,
        radii: &[f64],
    ) -> Result<Vec<(f64, f64)>> {
        let tilde = self.sample_defect(grid)?;
        let center = self
            .defect
            .center
            .clone()
            .unwrap_or_else(|| vec![0.0; self.dim]);
        radii
            .iter()
            .map(|&r| {
                let reg = Region::annulus(r, 2.0 * r, center.clone());
                lq_norm_matrix(&tilde, self.r_exponent, &reg).map(|m| (r, m))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Ellipticity: closed-form symmetric eigenvalue bounds per node.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EllipticityReport {
    pub mu_min_observed: f64,
    pub mu_max_observed: f64,
    pub worst_node: Vec<usize>,
    /// True if the input was not symmetric and the symmetric part was used.
    pub symmetrized: bool,
}

impl EllipticityReport {
    pub fn require_band(&self, mu_min: f64, mu_max: f64) -> Result<()> {
        let tol = 1e-10 * mu_max.max(1.0);
        if self.mu_min_observed < mu_min - tol || self.mu_max_observed > mu_max + tol {
            return Err(Error::Ellipticity {
                node: self.worst_node.clone(),
                lambda_min: self.mu_min_observed,
            });
        }
        Ok(())
    }
}

fn eig2_sym(a11: f64, a12: f64, a22: f64) -> (f64, f64) {
    let tr = a11 + a22;
    let disc = ((a11 - a22) * (a11 - a22) + 4.0 * a12 * a12).sqrt();
    (0.5 * (tr - disc), 0.5 * (tr + disc))
}

/// Extreme eigenvalues of a symmetric 3x3 matrix (trigonometric method).
fn eig3_sym(m: &[f64; 9]) -> (f64, f64) {
    let p1 = m[1] * m[1] + m[2] * m[2] + m[5] * m[5];
    let q = (m[0] + m[4] + m[8]) / 3.0;
    if p1 == 0.0 {
        let lo = m[0].min(m[4]).min(m[8]);
        let hi = m[0].max(m[4]).max(m[8]);
        return (lo, hi);
    }
    let p2 = (m[0] - q).powi(2) + (m[4] - q).powi(2) + (m[8] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [0.0f64; 9];
    for i in 0..9 {
        b[i] = m[i];
    }
    b[0] -= q;
    b[4] -= q;
    b[8] -= q;
    let det_b = b[0] * (b[4] * b[8] - b[5] * b[7]) - b[1] * (b[3] * b[8] - b[5] * b[6])
        + b[2] * (b[3] * b[7] - b[4] * b[6]);
    let r = (det_b / (2.0 * p * p * p)).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    (lo, hi)
}

/// Per-node extreme eigenvalues of the symmetric part of `a`, with the
/// location of the smallest minimum. Non-symmetric inputs are symmetrized
/// for the bound and flagged.
pub fn ellipticity_check(a: &MatrixField) -> Result<EllipticityReport> {
    let d = a.grid.dim;
    let n = a.grid.node_count();
    let symmetric = a.is_symmetric(1e-14);
    let mut mu_min = f64::INFINITY;
    let mut mu_max = f64::NEG_INFINITY;
    let mut worst = 0usize;
    for idx in 0..n {
        let (lo, hi) = if d == 2 {
            let a11 = a.entries[0][idx];
            let a12 = 0.5 * (a.entries[1][idx] + a.entries[2][idx]);
            let a22 = a.entries[3][idx];
            eig2_sym(a11, a12, a22)
        } else {
            let mut m = [0.0f64; 9];
            for i in 0..3 {
                for j in 0..3 {
                    m[i * 3 + j] = 0.5 * (a.entries[i * 3 + j][idx] + a.entries[j * 3 + i][idx]);
                }
            }
            eig3_sym(&m)
        };
        if lo < mu_min {
            mu_min = lo;
            worst = idx;
        }
        mu_max = mu_max.max(hi);
    }
    Ok(EllipticityReport {
        mu_min_observed: mu_min,
        mu_max_observed: mu_max,
        worst_node: a.grid.multi_index(worst),
        symmetrized: !symmetric,
    })
}
