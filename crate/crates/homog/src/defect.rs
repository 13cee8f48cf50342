//! Divergence-form solves on truncated boxes: the defect corrector with
//! its `L^q` and annulus diagnostics, empirical operator-norm sweeps along
//! the coefficient interpolation `a_per + t a_tilde`, duality and
//! uniqueness probes, and the whole-space counterexample run showing the
//! `L^1` failure of the gradient estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coeff::CoefficientModel;
use crate::error::{Error, Result};
use crate::fft::RealSpectral3;
use crate::field::{
    divergence, gradient, inner_vector, lq_norm_scalar, lq_norm_vector, MatrixField, Region,
    ScalarField, VectorField,
};
use crate::grid::{GridKind, GridSpec, NodeWalker};
use crate::mg::Multigrid;
use crate::solver::{bicgstab, pcg, DivFormOp, SolveOpts, SolveReport};

#[derive(Debug, Clone)]
pub struct BoxSolve {
    pub u: ScalarField,
    pub grad: VectorField,
    pub report: SolveReport,
    /// Mean of `u` over the box, recorded so callers can normalize
    /// whole-space-style representatives.
    pub u_mean: f64,
}

/// Solve `-div(a grad u) = div f` on a Dirichlet grid.
pub fn solve_div_form(a: &MatrixField, f: &VectorField, opts: &SolveOpts) -> Result<BoxSolve> {
    let grid = a.grid;
    if grid.is_periodic() {
        return Err(Error::GridMismatch(
            "box solve requires a Dirichlet grid".into(),
        ));
    }
    grid.require_same(&f.grid, "coefficient vs data")?;
    let mut rhs = divergence(f);
    grid.mask_boundary(&mut rhs.values);
    let op = DivFormOp::new(a);
    let mg = Multigrid::new(&grid, a);
    let symmetric = a.is_symmetric(1e-13);
    let (u_vals, report) = if symmetric {
        pcg(&op, &mg, &rhs.values, opts)?
    } else {
        bicgstab(&op, &mg, &rhs.values, opts)?
    };
    let u = ScalarField {
        grid,
        values: u_vals,
    };
    let grad = gradient(&u);
    let u_mean = u.mean();
    Ok(BoxSolve {
        u,
        grad,
        report,
        u_mean,
    })
}

// ---------------------------------------------------------------------------
// Defect corrector.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DefectProfilePoint {
    pub radius: f64,
    pub q: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DefectCorrector {
    pub direction: usize,
    pub w_tilde: ScalarField,
    pub grad_w_tilde: VectorField,
    /// `(q, ||grad w_tilde||_{L^q(box)})`.
    pub norms: Vec<(f64, f64)>,
    /// Annulus gradient norms per `(R, q)`.
    pub annulus_profile: Vec<DefectProfilePoint>,
    /// `(R, max over the annulus of |w_tilde| / (1 + |x|))`.
    pub sublinearity_profile: Vec<(f64, f64)>,
    /// Relative residual of the discrete corrector equation.
    pub residual: f64,
    /// Relative change of `||grad w_tilde||_{L^q}` when the box doubles
    /// (present when the audit ran).
    pub truncation_gap: Option<f64>,
}

/// Right-hand side flux of the defect corrector equation:
/// `g_j(x) = sum_k a_tilde_jk(x) (p_k + (F_k w_per)(x))`, with the
/// periodic corrector gradient wrapped onto the box (node-exact since the
/// box and cell share the spacing and the box spans whole periods).
fn defect_rhs_flux(
    model: &CoefficientModel,
    grid: &GridSpec,
    cell_grad: &VectorField,
    direction: usize,
) -> Result<VectorField> {
    let tilde = model.sample_defect(grid)?;
    let d = grid.dim;
    let cell_grid = cell_grad.grid;
    if cell_grid.n != grid.n {
        return Err(Error::GridMismatch(
            "cell and box grids must share the number of cells per period".into(),
        ));
    }
    let nc = cell_grid.nodes_per_axis();
    let mut corr = VectorField::zeros(*grid);
    let mut w = NodeWalker::new(grid);
    let mut idx = 0usize;
    let mut cmi = vec![0usize; d];
    while w.advance() {
        for (ax, &k) in w.mi.iter().enumerate() {
            cmi[ax] = k % nc;
        }
        let cidx = cell_grid.flat_index(&cmi);
        for ax in 0..d {
            corr.comps[ax][idx] = cell_grad.comps[ax][cidx];
        }
        idx += 1;
    }
    let mut g = VectorField::zeros(*grid);
    let n = grid.node_count();
    for j in 0..d {
        for k in 0..d {
            let t = tilde.entry(j, k);
            let base = if k == direction { 1.0 } else { 0.0 };
            for i in 0..n {
                g.comps[j][i] += t[i] * (base + corr.comps[k][i]);
            }
        }
    }
    Ok(g)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_defect_corrector(
    model: &CoefficientModel,
    cell_grad: &VectorField,
    direction: usize,
    grid: &GridSpec,
    q_list: &[f64],
    radii: &[f64],
    opts: &SolveOpts,
    audit_truncation: bool,
) -> Result<DefectCorrector> {
    let a = model.sample_total(grid)?;
    let g = defect_rhs_flux(model, grid, cell_grad, direction)?;
    let solve = solve_div_form(&a, &g, opts)?;

    let center = model
        .defect
        .center
        .clone()
        .unwrap_or_else(|| vec![0.0; grid.dim]);
    let mut qs: Vec<f64> = q_list.to_vec();
    if !qs.iter().any(|&q| (q - model.r_exponent).abs() < 1e-12) {
        qs.push(model.r_exponent);
    }
    let mut norms = Vec::new();
    for &q in &qs {
        norms.push((q, lq_norm_vector(&solve.grad, q, &Region::All)?));
    }
    let mut annulus_profile = Vec::new();
    let mut sublinearity_profile = Vec::new();
    for &r in radii {
        let reg = Region::annulus(r, 2.0 * r, center.clone());
        for &q in &qs {
            annulus_profile.push(DefectProfilePoint {
                radius: r,
                q,
                grad_norm: lq_norm_vector(&solve.grad, q, &reg)?,
            });
        }
        // max |w| / (1 + |x|) over the annulus
        let mut sub = 0.0f64;
        let mut w = NodeWalker::new(grid);
        let mut idx = 0usize;
        let (r0, r1) = (r * r, 4.0 * r * r);
        while w.advance() {
            let mut d2 = 0.0;
            let mut x2 = 0.0;
            for (ax, &k) in w.mi.iter().enumerate() {
                let x = grid.axis_coord(k);
                let dx = x - center[ax];
                d2 += dx * dx;
                x2 += x * x;
            }
            if d2 >= r0 && d2 < r1 {
                sub = sub.max(solve.u.values[idx].abs() / (1.0 + x2.sqrt()));
            }
            idx += 1;
        }
        sublinearity_profile.push((r, sub));
    }

    // residual of div(a grad w + g), relative to the data scale
    let residual = {
        let flux = a.apply_to(&solve.grad)?;
        let mut total = VectorField::zeros(*grid);
        for j in 0..grid.dim {
            for i in 0..grid.node_count() {
                total.comps[j][i] = flux.comps[j][i] + g.comps[j][i];
            }
        }
        let mut r = divergence(&total);
        grid.mask_boundary(&mut r.values);
        lq_norm_scalar(&r, 2.0, &Region::All)? / lq_norm_vector(&g, 2.0, &Region::All)?.max(1e-300)
            * grid.spacing()
    };

    let truncation_gap = if audit_truncation {
        if let GridKind::Box { half_width } = grid.kind {
            let big = GridSpec::boxed(grid.dim, grid.n, 2 * half_width)?;
            let a2 = model.sample_total(&big)?;
            let g2 = defect_rhs_flux(model, &big, cell_grad, direction)?;
            let solve2 = solve_div_form(&a2, &g2, opts)?;
            let q0 = qs[0];
            let n1 = lq_norm_vector(&solve.grad, q0, &Region::All)?;
            let n2 = lq_norm_vector(&solve2.grad, q0, &Region::All)?;
            Some((n2 - n1).abs() / n2.max(1e-300))
        } else {
            None
        }
    } else {
        None
    };

    Ok(DefectCorrector {
        direction,
        w_tilde: solve.u,
        grad_w_tilde: solve.grad,
        norms,
        annulus_profile,
        sublinearity_profile,
        residual,
        truncation_gap,
    })
}

// ---------------------------------------------------------------------------
// Operator-norm sweep along the interpolation a_t = a_per + t a_tilde.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub enum ProbeKind {
    SmoothRandom,
    PointDipole,
    ConcentratedBump,
    GradientField,
}

#[derive(Debug, Clone)]
pub struct ProbeBattery {
    pub seed: u64,
    pub count: usize,
}

impl ProbeBattery {
    /// Deterministic battery: kinds cycle through the four families.
    pub fn generate(&self, grid: &GridSpec) -> Vec<(ProbeKind, VectorField)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = grid.dim;
        let m = grid.nodes_per_axis();
        let hd = grid.spacing().powi(d as i32);
        let mut probes = Vec::with_capacity(self.count);
        for p in 0..self.count {
            let kind = match p % 4 {
                0 => ProbeKind::SmoothRandom,
                1 => ProbeKind::PointDipole,
                2 => ProbeKind::ConcentratedBump,
                _ => ProbeKind::GradientField,
            };
            let mut f = VectorField::zeros(*grid);
            match kind {
                ProbeKind::SmoothRandom => {
                    let ext = 2.0 * grid.extent();
                    for comp in f.comps.iter_mut() {
                        let mut waves = Vec::new();
                        for _ in 0..4 {
                            let k: Vec<f64> =
                                (0..d).map(|_| rng.random_range(-2..3) as f64).collect();
                            let amp: f64 = rng.random_range(-1.0..1.0);
                            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                            waves.push((k, amp, phase));
                        }
                        let mut w = NodeWalker::new(grid);
                        let mut idx = 0usize;
                        while w.advance() {
                            let mut v = 0.0;
                            for (k, amp, phase) in &waves {
                                let mut arg = *phase;
                                for (ax, kk) in k.iter().enumerate() {
                                    arg += std::f64::consts::TAU * kk * grid.axis_coord(w.mi[ax])
                                        / ext;
                                }
                                v += amp * arg.sin();
                            }
                            comp[idx] = v;
                            idx += 1;
                        }
                    }
                }
                ProbeKind::PointDipole => {
                    let comp = rng.random_range(0..d);
                    let mut mi = vec![0usize; d];
                    for k in mi.iter_mut() {
                        *k = rng.random_range(m / 4..3 * m / 4);
                    }
                    let idx = grid.flat_index(&mi);
                    f.comps[comp][idx] = 1.0 / hd;
                }
                ProbeKind::ConcentratedBump => {
                    let comp = rng.random_range(0..d);
                    let width = grid.spacing() * rng.random_range(2.0..5.0);
                    let center: Vec<f64> = (0..d)
                        .map(|_| {
                            let lo = grid.axis_coord(m / 4);
                            let hi = grid.axis_coord(3 * m / 4);
                            rng.random_range(lo..hi)
                        })
                        .collect();
                    let mut w = NodeWalker::new(grid);
                    let mut idx = 0usize;
                    while w.advance() {
                        let mut r2 = 0.0;
                        for (ax, &k) in w.mi.iter().enumerate() {
                            let dx = grid.axis_coord(k) - center[ax];
                            r2 += dx * dx;
                        }
                        f.comps[comp][idx] = (-r2 / (2.0 * width * width)).exp();
                        idx += 1;
                    }
                }
                ProbeKind::GradientField => {
                    let ext = 2.0 * grid.extent();
                    let mut waves = Vec::new();
                    for _ in 0..4 {
                        let k: Vec<f64> = (0..d).map(|_| rng.random_range(-2..3) as f64).collect();
                        let amp: f64 = rng.random_range(-1.0..1.0);
                        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                        waves.push((k, amp, phase));
                    }
                    let phi = ScalarField::from_fn(*grid, |x| {
                        let mut v = 0.0;
                        for (k, amp, phase) in &waves {
                            let mut arg = *phase;
                            for (ax, kk) in k.iter().enumerate() {
                                arg += std::f64::consts::TAU * kk * x[ax] / ext;
                            }
                            v += amp * arg.sin();
                        }
                        v
                    });
                    f = gradient(&phi);
                }
            }
            // replace numerically empty draws by a safe dipole
            let n2: f64 = f.comps.iter().flat_map(|c| c.iter()).map(|v| v * v).sum();
            if n2 < 1e-30 {
                let mut mi = vec![m / 2; d];
                mi[0] += 1;
                let idx = grid.flat_index(&mi);
                f.comps[0][idx] = 1.0 / hd;
            }
            probes.push((kind, f));
        }
        probes
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatorNormEstimate {
    pub t: f64,
    pub q: f64,
    pub probe_count: usize,
    pub max_ratio: f64,
    pub argmax_probe: usize,
    pub ratios: Vec<f64>,
}

/// Lower estimates of the `L^q` gradient-to-data operator norm along the
/// continuation family, one record per `(t, q)`.
pub fn operator_norm_sweep(
    model: &CoefficientModel,
    grid: &GridSpec,
    t_grid: &[f64],
    q_list: &[f64],
    battery: &ProbeBattery,
    opts: &SolveOpts,
) -> Result<Vec<OperatorNormEstimate>> {
    let probes = battery.generate(grid);
    let mut out = Vec::new();
    for &t in t_grid {
        let mut scaled = model.clone();
        scaled.defect.profile = scale_profile(&model.defect.profile, t);
        // ellipticity is checked before any solve
        let a_t = scaled.sample_total(grid)?;
        // probes are independent; solve them in parallel and merge in
        // the fixed battery order
        let per_probe: Vec<Vec<f64>> = probes
            .par_iter()
            .map(|(_, f)| -> Result<Vec<f64>> {
                let solve = solve_div_form(&a_t, f, opts)?;
                let mut row = Vec::with_capacity(q_list.len());
                for &q in q_list {
                    let num = lq_norm_vector(&solve.grad, q, &Region::All)?;
                    let den = lq_norm_vector(f, q, &Region::All)?.max(1e-300);
                    row.push(num / den);
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;
        let mut ratios: Vec<Vec<f64>> = vec![Vec::with_capacity(probes.len()); q_list.len()];
        for row in &per_probe {
            for (qi, r) in row.iter().enumerate() {
                ratios[qi].push(*r);
            }
        }
        for (qi, &q) in q_list.iter().enumerate() {
            let (argmax, max_ratio) =
                ratios[qi]
                    .iter()
                    .enumerate()
                    .fold((0usize, 0.0f64), |(ai, av), (i, &v)| {
                        if v > av {
                            (i, v)
                        } else {
                            (ai, av)
                        }
                    });
            out.push(OperatorNormEstimate {
                t,
                q,
                probe_count: probes.len(),
                max_ratio,
                argmax_probe: argmax,
                ratios: ratios[qi].clone(),
            });
        }
    }
    Ok(out)
}

fn scale_profile(p: &crate::coeff::DefectProfile, t: f64) -> crate::coeff::DefectProfile {
    use crate::coeff::DefectProfile::*;
    match p {
        None => None,
        Gaussian { amplitude, width } => Gaussian {
            amplitude: amplitude * t,
            width: *width,
        },
        CompactBump { amplitude, radius } => CompactBump {
            amplitude: amplitude * t,
            radius: *radius,
        },
        Algebraic { amplitude, decay } => Algebraic {
            amplitude: amplitude * t,
            decay: *decay,
        },
    }
}

// ---------------------------------------------------------------------------
// Duality identity and uniqueness/stability probes.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub relative_discrepancy: f64,
}

/// With `-div(a grad u) = div f` and `-div(a^T grad v) = div g`, the
/// pairing `<f, grad v> = <g, grad u>` holds to rounding because the two
/// discrete operators are exact transposes.
pub fn duality_identity_check(
    a: &MatrixField,
    f: &VectorField,
    g: &VectorField,
    opts: &SolveOpts,
) -> Result<DualityReport> {
    let u = solve_div_form(a, f, opts)?;
    let at = a.transpose();
    let v = solve_div_form(&at, g, opts)?;
    let lhs = inner_vector(f, &v.grad);
    let rhs = inner_vector(g, &u.grad);
    let denom = (lq_norm_vector(f, 2.0, &Region::All)?
        * lq_norm_vector(&v.grad, 2.0, &Region::All)?)
    .max(1e-300);
    Ok(DualityReport {
        lhs,
        rhs,
        relative_discrepancy: (lhs - rhs).abs() / denom,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LiouvilleReport {
    pub q: f64,
    /// `||grad u||_q` for zero data; must vanish.
    pub homogeneous_grad_norm: f64,
    /// Deviations of `||grad u_k||_q / (s_k ||grad u_0||_q)` from one for
    /// data scaled by `s_k = 10^-k`.
    pub scaling_deviation: Vec<f64>,
}

pub fn liouville_probe(a: &MatrixField, q: f64, opts: &SolveOpts) -> Result<LiouvilleReport> {
    let grid = a.grid;
    let zero = VectorField::zeros(grid);
    let s0 = solve_div_form(a, &zero, opts)?;
    let homogeneous = lq_norm_vector(&s0.grad, q, &Region::All)?;

    let ext = 2.0 * grid.extent();
    let f0 = {
        let phi = ScalarField::from_fn(grid, |x| {
            (std::f64::consts::TAU * x[0] / ext).sin()
                * (std::f64::consts::TAU * 2.0 * x[1] / ext).cos()
        });
        gradient(&phi)
    };
    let base = solve_div_form(a, &f0, opts)?;
    let base_norm = lq_norm_vector(&base.grad, q, &Region::All)?;
    let mut scaling_deviation = Vec::new();
    for k in 1..=4 {
        let s = 10f64.powi(-k);
        let mut fs = f0.clone();
        for c in fs.comps.iter_mut() {
            for v in c.iter_mut() {
                *v *= s;
            }
        }
        let sol = solve_div_form(a, &fs, opts)?;
        let nrm = lq_norm_vector(&sol.grad, q, &Region::All)?;
        scaling_deviation.push((nrm / (s * base_norm) - 1.0).abs());
    }
    Ok(LiouvilleReport {
        q,
        homogeneous_grad_norm: homogeneous,
        scaling_deviation,
    })
}

// ---------------------------------------------------------------------------
// Whole-space counterexample (d = 3, a = I, f = indicator of the unit
// ball times a direction): the far-field gradient follows the dipole law
// (e - d (x.e) x / |x|^2) / (d |x|^d), whose dyadic-shell L^1 masses do
// not decay.
// ---------------------------------------------------------------------------

/// Far-field gradient of the whole-space solution of
/// `-lap u = div(1_B e1)` in d = 3: with `N` the Newtonian potential of
/// the unit ball, `u = d_1 N`, so
/// `grad u ~ -(e - d (x.e) x/|x|^2) / (d |x|^d)` as `|x| -> inf`.
pub fn dipole_far_field(x: &[f64; 3]) -> [f64; 3] {
    let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
    let r = r2.sqrt();
    let r3 = r2 * r;
    let dot = x[0];
    [
        -(1.0 - 3.0 * dot * x[0] / r2) / (3.0 * r3),
        (3.0 * dot * x[1] / r2) / (3.0 * r3),
        (3.0 * dot * x[2] / r2) / (3.0 * r3),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleReport {
    pub n: usize,
    pub half_width: usize,
    pub window: (f64, f64),
    /// Relative L2 mismatch of the computed gradient against the dipole
    /// law over the window, after periodization-drift removal.
    pub rel_l2_window: f64,
    pub median_pointwise_rel: f64,
    pub max_pointwise_rel: f64,
    /// Constant gradient removed before comparing (periodic-image drift).
    pub drift: [f64; 3],
    /// `(R, shell L^1 norm of |grad u|)` over dyadic shells.
    pub l1_shells: Vec<(f64, f64)>,
    pub l1_ratios: Vec<f64>,
    pub l2_shells: Vec<(f64, f64)>,
    pub l2_ratios: Vec<f64>,
    pub runtime_seconds: f64,
}

/// Memory needed by the counterexample run at resolution `n`, box
/// half-width `l`.
pub fn counterexample_bytes(n: usize, l: usize) -> u64 {
    let m = 2 * l * n;
    RealSpectral3::required_bytes([m, m, m]) + (64 << 20)
}

/// Run the counterexample on a periodic box `[-L, L)^3` at resolution `n`.
/// The solve is spectrally exact for the tight Laplacian; gradients are
/// evaluated by streaming forward differences. Shells must satisfy
/// `2 R_max <= L` and the window must fit inside the box.
pub fn l1_counterexample(
    n: usize,
    half_width: usize,
    window: (f64, f64),
    shell_radii: &[f64],
    budget_bytes: u64,
) -> Result<CounterexampleReport> {
    let start = std::time::Instant::now();
    let l = half_width as f64;
    if window.1 >= l {
        return Err(Error::Window(format!(
            "window outer radius {} must be below the box half-width {l}",
            window.1
        )));
    }
    if let Some(&rmax) = shell_radii.last() {
        if 2.0 * rmax > l {
            return Err(Error::Window(format!(
                "outermost shell {rmax}..{} exceeds the box",
                2.0 * rmax
            )));
        }
    }
    let need = counterexample_bytes(n, half_width);
    if need > budget_bytes {
        return Err(Error::MemoryBudget {
            required_bytes: need,
            budget_bytes,
        });
    }
    let m = 2 * half_width * n;
    let h = 1.0 / n as f64;
    let coord = |k: usize| -> f64 { -l + k as f64 * h };

    // indicator of the unit ball, anti-aliased by 4^3 subsamples near the
    // surface so the effective source volume is second-order accurate
    let chi = |x: f64, y: f64, z: f64| -> f64 {
        let r2 = x * x + y * y + z * z;
        let margin = h;
        let r = r2.sqrt();
        if r < 1.0 - margin {
            return 1.0;
        }
        if r > 1.0 + margin {
            return 0.0;
        }
        let mut acc = 0.0;
        let sub = 4;
        for a in 0..sub {
            for b in 0..sub {
                for c in 0..sub {
                    let xs = x + ((a as f64 + 0.5) / sub as f64 - 0.5) * h;
                    let ys = y + ((b as f64 + 0.5) / sub as f64 - 0.5) * h;
                    let zs = z + ((c as f64 + 0.5) / sub as f64 - 0.5) * h;
                    if xs * xs + ys * ys + zs * zs <= 1.0 {
                        acc += 1.0;
                    }
                }
            }
        }
        acc / (sub * sub * sub) as f64
    };

    // rhs = B_1 f_1 with f_1 = chi; nonzero only near the ball
    let mut rs = RealSpectral3::new([m, m, m]);
    let reach = ((1.0 + 2.0 * h) / h).ceil() as i64;
    let k0c = (l / h).round() as i64;
    let lo = (k0c - reach).max(0) as usize;
    let hi = ((k0c + reach) as usize).min(m - 1);
    for i0 in lo..=hi {
        let x = coord(i0);
        let xm = coord(i0 - 1);
        for i1 in lo..=hi {
            let y = coord(i1);
            for i2 in lo..=hi {
                let z = coord(i2);
                let here = chi(x, y, z);
                let below = chi(xm, y, z);
                if here != 0.0 || below != 0.0 {
                    rs.set(i0, i1, i2, (here - below) / h);
                }
            }
        }
    }
    rs.solve_poisson(h);

    // pass 1: window mean of each gradient component (periodic-image
    // drift; the dipole law itself has zero angular mean)
    let window2 = (window.0 * window.0, window.1 * window.1);
    let mut drift = [0.0f64; 3];
    let mut wcount = 0u64;
    for i0 in 0..m {
        let x = coord(i0);
        for i1 in 0..m {
            let y = coord(i1);
            for i2 in 0..m {
                let z = coord(i2);
                let r2 = x * x + y * y + z * z;
                if r2 < window2.0 || r2 >= window2.1 {
                    continue;
                }
                let here = rs.get(i0, i1, i2);
                drift[0] += (rs.get((i0 + 1) % m, i1, i2) - here) / h;
                drift[1] += (rs.get(i0, (i1 + 1) % m, i2) - here) / h;
                drift[2] += (rs.get(i0, i1, (i2 + 1) % m) - here) / h;
                wcount += 1;
            }
        }
    }
    for dcomp in drift.iter_mut() {
        *dcomp /= wcount.max(1) as f64;
    }

    // pass 2: comparisons and shell masses
    let rmax2 = shell_radii.last().map(|&r| 4.0 * r * r).unwrap_or(0.0);
    let rmin2 = shell_radii.first().map(|&r| r * r).unwrap_or(f64::MAX);
    let mut diff2 = 0.0f64;
    let mut ref2 = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut rel_samples: Vec<f64> = Vec::new();
    let sample_stride = (wcount / 400_000).max(1);
    let mut wseen = 0u64;
    let mut l1 = vec![0.0f64; shell_radii.len()];
    let mut l2 = vec![0.0f64; shell_radii.len()];
    for i0 in 0..m {
        let x = coord(i0);
        for i1 in 0..m {
            let y = coord(i1);
            for i2 in 0..m {
                let z = coord(i2);
                let r2 = x * x + y * y + z * z;
                let in_window = r2 >= window2.0 && r2 < window2.1;
                let in_shells = r2 >= rmin2 && r2 < rmax2;
                if !in_window && !in_shells {
                    continue;
                }
                let here = rs.get(i0, i1, i2);
                let gx = (rs.get((i0 + 1) % m, i1, i2) - here) / h - drift[0];
                let gy = (rs.get(i0, (i1 + 1) % m, i2) - here) / h - drift[1];
                let gz = (rs.get(i0, i1, (i2 + 1) % m) - here) / h - drift[2];
                if in_window {
                    // the forward difference lives at the half-step point
                    let fx = dipole_far_field(&[x + 0.5 * h, y, z])[0];
                    let fy = dipole_far_field(&[x, y + 0.5 * h, z])[1];
                    let fz = dipole_far_field(&[x, y, z + 0.5 * h])[2];
                    let (dx, dy, dz) = (gx - fx, gy - fy, gz - fz);
                    let dd = dx * dx + dy * dy + dz * dz;
                    let ff = fx * fx + fy * fy + fz * fz;
                    diff2 += dd;
                    ref2 += ff;
                    let rel = (dd / ff.max(1e-300)).sqrt();
                    max_rel = max_rel.max(rel);
                    if wseen % sample_stride == 0 {
                        rel_samples.push(rel);
                    }
                    wseen += 1;
                }
                if in_shells {
                    let mag = (gx * gx + gy * gy + gz * gz).sqrt();
                    for (si, &r) in shell_radii.iter().enumerate() {
                        if r2 >= r * r && r2 < 4.0 * r * r {
                            l1[si] += mag;
                            l2[si] += mag * mag;
                            break;
                        }
                    }
                }
            }
        }
    }
    let hd = h * h * h;
    let l1_shells: Vec<(f64, f64)> = shell_radii
        .iter()
        .zip(&l1)
        .map(|(&r, &v)| (r, v * hd))
        .collect();
    let l2_shells: Vec<(f64, f64)> = shell_radii
        .iter()
        .zip(&l2)
        .map(|(&r, &v)| (r, (v * hd).sqrt()))
        .collect();
    let ratios = |shells: &[(f64, f64)]| -> Vec<f64> {
        shells
            .windows(2)
            .map(|w| w[1].1 / w[0].1.max(1e-300))
            .collect()
    };
    rel_samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if rel_samples.is_empty() {
        f64::NAN
    } else {
        rel_samples[rel_samples.len() / 2]
    };
    Ok(CounterexampleReport {
        n,
        half_width,
        window,
        rel_l2_window: (diff2 / ref2.max(1e-300)).sqrt(),
        median_pointwise_rel: median,
        max_pointwise_rel: max_rel,
        drift,
        l1_ratios: ratios(&l1_shells),
        l2_ratios: ratios(&l2_shells),
        l1_shells,
        l2_shells,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{DefectProfile, DefectSpec, PeriodicSpec};
    use crate::solver::SolveOpts;

    fn bump_model() -> CoefficientModel {
        CoefficientModel {
            dim: 2,
            periodic: PeriodicSpec::Identity,
            defect: DefectSpec {
                profile: DefectProfile::CompactBump {
                    amplitude: 1.0,
                    radius: 1.0,
                },
                matrix: None,
                center: None,
            },
            r_exponent: 2.0,
            mu_min: 1.0,
            mu_max: 2.0,
        }
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let g = GridSpec::boxed(2, 8, 2).unwrap();
        let a = MatrixField::identity(g);
        let f = VectorField::zeros(g);
        let s = solve_div_form(&a, &f, &SolveOpts::default()).unwrap();
        assert_eq!(s.grad.max_abs(), 0.0);
    }

    #[test]
    fn identity_with_gradient_data_recovers_negated_potential() {
        // -lap u = div grad(phi) implies u = -phi exactly at the discrete
        // level (the solve inverts the same matrix that produced the rhs)
        let g = GridSpec::boxed(2, 16, 1).unwrap();
        let a = MatrixField::identity(g);
        let mut phi = ScalarField::from_fn(g, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            (-6.0 * r2).exp()
        });
        g.mask_boundary(&mut phi.values);
        let f = gradient(&phi);
        let opts = SolveOpts {
            tol_rel: 1e-13,
            ..Default::default()
        };
        let s = solve_div_form(&a, &f, &opts).unwrap();
        let mut worst = 0.0f64;
        for (u, p) in s.u.values.iter().zip(&phi.values) {
            worst = worst.max((u + p).abs());
        }
        assert!(worst < 1e-10, "worst = {worst}");
    }

    #[test]
    fn gradient_projection_ratio_is_at_most_one_for_identity() {
        // grad (-lap)^-1 div is an orthogonal projection in L^2
        let g = GridSpec::boxed(2, 8, 2).unwrap();
        let battery = ProbeBattery { seed: 7, count: 8 };
        let opts = SolveOpts {
            tol_rel: 1e-12,
            ..Default::default()
        };
        let model = CoefficientModel::identity(2);
        let sweep = operator_norm_sweep(&model, &g, &[0.0], &[2.0], &battery, &opts).unwrap();
        assert_eq!(sweep.len(), 1);
        assert!(
            sweep[0].max_ratio <= 1.0 + 1e-6,
            "ratio = {}",
            sweep[0].max_ratio
        );
    }

    #[test]
    fn norm_sweep_is_constant_in_t_without_defect() {
        let g = GridSpec::boxed(2, 8, 1).unwrap();
        let model = CoefficientModel {
            dim: 2,
            periodic: PeriodicSpec::laminate_iso(2, 2.0, 1.0, 0),
            defect: DefectSpec::none(),
            r_exponent: 2.0,
            mu_min: 1.0,
            mu_max: 3.0,
        };
        let battery = ProbeBattery { seed: 3, count: 4 };
        let opts = SolveOpts::default();
        let sweep =
            operator_norm_sweep(&model, &g, &[0.0, 0.5, 1.0], &[2.0], &battery, &opts).unwrap();
        assert!((sweep[0].max_ratio - sweep[1].max_ratio).abs() < 1e-9);
        assert!((sweep[1].max_ratio - sweep[2].max_ratio).abs() < 1e-9);
    }

    #[test]
    fn sweep_rejects_ellipticity_violating_t() {
        let mut model = bump_model();
        model.defect.profile = DefectProfile::CompactBump {
            amplitude: -2.0,
            radius: 0.5,
        };
        let g = GridSpec::boxed(2, 8, 1).unwrap();
        let battery = ProbeBattery { seed: 1, count: 2 };
        let err =
            operator_norm_sweep(&model, &g, &[1.0], &[2.0], &battery, &SolveOpts::default());
        assert!(matches!(err, Err(Error::Ellipticity { .. })));
    }

    #[test]
    fn defect_corrector_vanishes_without_defect() {
        let mut model = bump_model();
        model.defect = DefectSpec::none();
        let cell_g = GridSpec::cell(2, 8).unwrap();
        let cell_grad = VectorField::zeros(cell_g);
        let g = GridSpec::boxed(2, 8, 2).unwrap();
        let dc = solve_defect_corrector(
            &model,
            &cell_grad,
            0,
            &g,
            &[2.0],
            &[1.0],
            &SolveOpts::default(),
            false,
        )
        .unwrap();
        assert_eq!(dc.grad_w_tilde.max_abs(), 0.0);
    }

    #[test]
    fn compact_defect_gradient_decays_dipole_like_in_2d() {
        // |grad w| ~ r^{-d} = r^{-2}: dyadic-shell L1 masses roughly
        // constant, L2 masses decaying roughly like 2^{-1} per shell
        let model = bump_model();
        let cell_g = GridSpec::cell(2, 16).unwrap();
        let cell_grad = VectorField::zeros(cell_g); // a_per = I: w_per = 0
        let g = GridSpec::boxed(2, 16, 8).unwrap();
        let opts = SolveOpts {
            tol_rel: 1e-12,
            ..Default::default()
        };
        let dc = solve_defect_corrector(
            &model,
            &cell_grad,
            0,
            &g,
            &[1.0, 2.0],
            &[1.0, 2.0],
            &opts,
            false,
        )
        .unwrap();
        assert!(dc.residual < 1e-9, "residual = {}", dc.residual);
        let get = |r: f64, q: f64| {
            dc.annulus_profile
                .iter()
                .find(|p| (p.radius - r).abs() < 1e-12 && (p.q - q).abs() < 1e-12)
                .map(|p| p.grad_norm)
                .unwrap()
        };
        let l1_ratio = get(2.0, 1.0) / get(1.0, 1.0);
        assert!(
            (0.6..1.45).contains(&l1_ratio),
            "shell L1 ratio {l1_ratio} not roughly constant"
        );
        let l2_ratio = get(2.0, 2.0) / get(1.0, 2.0);
        assert!(
            l2_ratio < 0.75,
            "shell L2 ratio {l2_ratio} should decay geometrically"
        );
        // sublinearity profile decreasing
        assert!(dc.sublinearity_profile[1].1 < dc.sublinearity_profile[0].1);
    }

    #[test]
    fn duality_identity_holds_for_nonsymmetric_coefficient() {
        let g = GridSpec::boxed(2, 16, 1).unwrap();
        let mut model = crate::nondiv::tests::sym_model(2);
        if let PeriodicSpec::Matrix { entries } = &mut model.periodic {
            entries[1].constant = 0.4;
            entries[2].constant = -0.1;
        }
        model.mu_min = 0.3;
        model.mu_max = 3.7;
        let a = model.sample_rescaled(&g, 1.0, &[0.0, 0.0]).unwrap();
        let battery = ProbeBattery { seed: 11, count: 2 };
        let probes = battery.generate(&g);
        let opts = SolveOpts {
            tol_rel: 1e-14,
            max_iter: 50_000,
            ..Default::default()
        };
        let rep = duality_identity_check(&a, &probes[0].1, &probes[1].1, &opts).unwrap();
        assert!(
            rep.relative_discrepancy < 1e-10,
            "discrepancy = {}",
            rep.relative_discrepancy
        );
    }

    #[test]
    fn liouville_probe_confirms_uniqueness_and_linearity() {
        let g = GridSpec::boxed(2, 8, 1).unwrap();
        let model = bump_model();
        let a = model.sample_total(&g).unwrap();
        let rep = liouville_probe(&a, 2.0, &SolveOpts::default()).unwrap();
        assert_eq!(rep.homogeneous_grad_norm, 0.0);
        for dev in &rep.scaling_deviation {
            assert!(*dev < 1e-9, "scaling deviation {dev}");
        }
    }

    #[test]
    fn counterexample_rejects_undersized_box_and_budget() {
        assert!(matches!(
            l1_counterexample(8, 8, (10.0, 20.0), &[1.0, 2.0], u64::MAX),
            Err(Error::Window(_))
        ));
        assert!(matches!(
            l1_counterexample(8, 32, (10.0, 20.0), &[1.0, 2.0], 1024),
            Err(Error::MemoryBudget { .. })
        ));
    }

    #[test]
    fn counterexample_small_run_matches_dipole_law() {
        // cheap configuration: n = 4, L = 16 -> 128^3 nodes, window 6..12
        let rep = l1_counterexample(4, 16, (6.0, 12.0), &[1.0, 2.0, 4.0], 1 << 30).unwrap();
        assert!(
            rep.rel_l2_window < 0.08,
            "relative L2 mismatch {}",
            rep.rel_l2_window
        );
        assert!(
            rep.median_pointwise_rel < 0.08,
            "median rel {}",
            rep.median_pointwise_rel
        );
        // L1 masses roughly constant, L2 decaying
        for r in &rep.l1_ratios {
            assert!((0.75..1.25).contains(r), "L1 ratio {r}");
        }
        for r in &rep.l2_ratios {
            assert!(*r < 0.6, "L2 ratio {r}");
        }
    }
}
