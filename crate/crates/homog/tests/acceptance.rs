//! Acceptance suite: each numbered check pins its tolerances in code and
//! prints one pass/fail line. Run with `cargo test --test acceptance --
//! --nocapture` to watch the lines stream.
//!
//! The counterexample check adapts its resolution to the machine's
//! available memory (the box half-width, window, shells, and every
//! tolerance stay fixed); the chosen resolution is printed.

use std::time::Instant;

use homog::cell::{
    homogenized_tensor, periodic_vector_potential, solve_periodic_corrector,
    solve_periodic_invariant_measure, CellSolution,
};
use homog::coeff::{CoefficientModel, DefectProfile, DefectSpec, PeriodicSpec};
use homog::defect::{
    self, duality_identity_check, l1_counterexample, operator_norm_sweep, ProbeBattery,
};
use homog::field::{MatrixField, ScalarField, VectorField};
use homog::green::{
    annulus_gradient_law, center_node, green_probe, kernel_offset, laplace_kernel_3d,
    mixed_gradient_integrability, pointwise_decay_fit, GreenProbeOpts,
};
use homog::grid::GridSpec;
use homog::nondiv::{
    self, assemble_rewrite, is_exactly_skew, rewrite_consistency, solve_adjoint_double_div,
    solve_defect_invariant_measure,
};
use homog::solver::SolveOpts;
use homog::twoscale::{convergence_study, CorrectorMode};

fn opts(tol: f64) -> SolveOpts {
    SolveOpts {
        tol_rel: tol,
        max_iter: 200_000,
        project_zero_mean: false,
    }
}

fn laminate_iso(dim: usize) -> CoefficientModel {
    CoefficientModel {
        dim,
        periodic: PeriodicSpec::laminate_iso(dim, 2.0, 1.0, 0),
        defect: DefectSpec::none(),
        r_exponent: 2.0,
        mu_min: 1.0,
        mu_max: 3.0,
    }
}

fn with_bump(mut model: CoefficientModel, amplitude: f64, radius: f64) -> CoefficientModel {
    model.defect = DefectSpec {
        profile: DefectProfile::CompactBump { amplitude, radius },
        matrix: None,
        center: None,
    };
    model.mu_max += amplitude.max(0.0);
    model.mu_min += amplitude.min(0.0);
    model
}

fn available_memory_bytes() -> u64 {
    if let Ok(text) = std::fs::read_to_string("/proc/meminfo") {
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("MemAvailable:") {
                let kb: u64 = rest
                    .trim()
                    .trim_end_matches("kB")
                    .trim()
                    .parse()
                    .unwrap_or(0);
                return kb * 1024;
            }
        }
    }
    2 << 30
}

struct Outcome {
    id: usize,
    title: &'static str,
    detail: String,
    passed: bool,
    seconds: f64,
}

fn check(
    id: usize,
    title: &'static str,
    budget_seconds: f64,
    f: impl FnOnce() -> Result<String, String>,
) -> Outcome {
    let start = Instant::now();
    let result = f();
    let seconds = start.elapsed().as_secs_f64();
    let (mut passed, mut detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if seconds > budget_seconds {
        passed = false;
        detail = format!("{detail}; runtime {seconds:.1}s exceeded budget {budget_seconds}s");
    }
    Outcome {
        id,
        title,
        detail,
        passed,
        seconds,
    }
}

fn criterion_1() -> Result<String, String> {
    let grid = GridSpec::cell(2, 256).map_err(|e| e.to_string())?;
    let a = laminate_iso(2)
        .sample_periodic(&grid)
        .map_err(|e| e.to_string())?;
    let o = opts(1e-12);
    let sols: Vec<CellSolution> = (0..2)
        .map(|p| solve_periodic_corrector(&a, p, &o))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let t = homogenized_tensor(&a, &sols).map_err(|e| e.to_string())?;
    let expect = [3.0f64.sqrt(), 0.0, 0.0, 2.0];
    let mut worst = 0.0f64;
    for (got, want) in t.a_star.iter().zip(expect) {
        worst = worst.max((got - want).abs());
    }
    let detail = format!(
        "a* = [{:.6}, {:.2e}; {:.2e}, {:.6}], max deviation {:.2e} (tol 1e-3)",
        t.a_star[0], t.a_star[1], t.a_star[2], t.a_star[3], worst
    );
    if worst <= 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Result<String, String> {
    let tol = 1e-10;
    let cell_grid = GridSpec::cell(2, 32).map_err(|e| e.to_string())?;
    let a = MatrixField::identity(cell_grid);
    let o = opts(1e-12);
    let sols: Vec<CellSolution> = (0..2)
        .map(|p| solve_periodic_corrector(&a, p, &o))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let w_max = sols.iter().map(|s| s.w_per.max_abs()).fold(0.0, f64::max);
    let t = homogenized_tensor(&a, &sols).map_err(|e| e.to_string())?;
    let t_dev = t
        .a_star
        .iter()
        .zip([1.0, 0.0, 0.0, 1.0])
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    let meas = solve_periodic_invariant_measure(&a, &o).map_err(|e| e.to_string())?;
    let m_dev = meas
        .m_per
        .values
        .iter()
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max);
    let pot = periodic_vector_potential(&a, &meas.m_per).map_err(|e| e.to_string())?;
    let b_max = pot.skew.magnitude().max_abs();

    let model = CoefficientModel::identity(2);
    let box_grid = GridSpec::boxed(2, 32, 2).map_err(|e| e.to_string())?;
    let zero_grad = VectorField::zeros(cell_grid);
    let dc = defect::solve_defect_corrector(
        &model, &zero_grad, 0, &box_grid, &[2.0], &[1.0], &o, false,
    )
    .map_err(|e| e.to_string())?;
    let w_tilde_max = dc.grad_w_tilde.max_abs();
    let dm = solve_defect_invariant_measure(&model, &meas.m_per, &box_grid, &[2.0], &[1.0], &o)
        .map_err(|e| e.to_string())?;
    let m_tilde_max = dm.m_tilde.max_abs();
    let rw = assemble_rewrite(&model, &meas.m_per, Some(&dm.m_tilde), &pot.skew, &box_grid, 2)
        .map_err(|e| e.to_string())?;
    let b_tilde_max = rw.skew.magnitude().max_abs();

    let worst = [
        w_max,
        t_dev,
        m_dev,
        b_max,
        w_tilde_max,
        m_tilde_max,
        b_tilde_max,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let detail = format!(
        "identity medium: |w|={w_max:.1e} |a*-I|={t_dev:.1e} |m-1|={m_dev:.1e} \
         |B|={b_max:.1e} |grad w~|={w_tilde_max:.1e} |m~|={m_tilde_max:.1e} \
         |B~|={b_tilde_max:.1e} (tol {tol:.0e})"
    );
    if worst <= tol {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Result<String, String> {
    let budget = (available_memory_bytes() as f64 * 0.65) as u64;
    let half_width = 32usize;
    let window = (10.0, 20.0);
    let shells = [1.0, 2.0, 4.0, 8.0];
    let mut chosen = None;
    for n in [16usize, 12, 10, 8] {
        if defect::counterexample_bytes(n, half_width) <= budget {
            chosen = Some(n);
            break;
        }
    }
    let n = chosen.ok_or_else(|| {
        format!(
            "no resolution down to n = 8 fits the memory budget {} MiB",
            budget >> 20
        )
    })?;
    if n < 16 {
        announce(&format!(
            "  [criterion 3] pinned resolution n = 16 needs {} MiB but only {} MiB are available; \
             running the full assertions at n = {n}, L = {half_width}",
            defect::counterexample_bytes(16, half_width) >> 20,
            budget >> 20
        ));
    }
    let rep = l1_counterexample(n, half_width, window, &shells, budget).map_err(|e| e.to_string())?;
    let l1_ok = rep.l1_ratios.iter().all(|r| (0.9..=1.1).contains(r));
    let l2_ok = rep
        .l2_ratios
        .iter()
        .all(|r| *r < 0.8);
    let detail = format!(
        "n={n} L={half_width}: rel-L2 {:.4}, median {:.4} (tol 0.05); \
         L1 shell ratios {:?} (0.9..1.1); L2 ratios {:?} (< 0.8); solve {:.0}s",
        rep.rel_l2_window, rep.median_pointwise_rel, rep.l1_ratios, rep.l2_ratios,
        rep.runtime_seconds
    );
    if rep.rel_l2_window <= 0.05 && rep.median_pointwise_rel <= 0.05 && l1_ok && l2_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4() -> Result<String, String> {
    let model = with_bump(laminate_iso(2), 1.0, 0.5);
    let grid = GridSpec::boxed(2, 32, 4).map_err(|e| e.to_string())?;
    let battery = ProbeBattery { seed: 42, count: 20 };
    let o = opts(1e-10);
    let q_list = [1.5, 2.0, 3.0];
    let t_grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let sweep = operator_norm_sweep(&model, &grid, &t_grid, &q_list, &battery, &o)
        .map_err(|e| e.to_string())?;
    let all_finite = sweep.iter().all(|e| e.max_ratio.is_finite());
    let mut spread_detail = String::new();
    let mut spreads_ok = true;
    for &q in &q_list {
        let maxima: Vec<f64> = sweep
            .iter()
            .filter(|e| (e.q - q).abs() < 1e-12)
            .map(|e| e.max_ratio)
            .collect();
        let hi = maxima.iter().cloned().fold(0.0f64, f64::max);
        let lo = maxima.iter().cloned().fold(f64::INFINITY, f64::min);
        let spread = hi / lo;
        spreads_ok &= spread <= 10.0;
        spread_detail.push_str(&format!("q={q}: spread {spread:.3}; "));
    }
    // identity medium, q = 2: the gradient map is an orthogonal projection
    let identity = CoefficientModel::identity(2);
    let id_sweep = operator_norm_sweep(&identity, &grid, &[0.0], &[2.0], &battery, &o)
        .map_err(|e| e.to_string())?;
    let id_ratio = id_sweep[0].max_ratio;
    let detail = format!(
        "{spread_detail}identity q=2 ratio {id_ratio:.6} (<= 1.05); all finite: {all_finite}"
    );
    if all_finite && spreads_ok && id_ratio <= 1.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5() -> Result<String, String> {
    let n = 32usize;
    let model = with_bump(laminate_iso(2), 0.8, 0.5);
    let cell_grid = GridSpec::cell(2, n).map_err(|e| e.to_string())?;
    let solve_box = GridSpec::boxed(2, n, 2).map_err(|e| e.to_string())?;
    let measure_box = GridSpec::boxed(2, n, 4).map_err(|e| e.to_string())?;
    let a_per = model.sample_periodic(&cell_grid).map_err(|e| e.to_string())?;
    let o = opts(1e-13);
    let meas = solve_periodic_invariant_measure(&a_per, &o).map_err(|e| e.to_string())?;
    let pot = periodic_vector_potential(&a_per, &meas.m_per).map_err(|e| e.to_string())?;
    let dmeas = solve_defect_invariant_measure(&model, &meas.m_per, &measure_box, &[2.0], &[1.0], &o)
        .map_err(|e| e.to_string())?;
    let rewrite = assemble_rewrite(
        &model,
        &meas.m_per,
        Some(&dmeas.m_tilde),
        &pot.skew,
        &solve_box,
        2,
    )
    .map_err(|e| e.to_string())?;
    let a_box = model
        .sample_total(&solve_box)
        .map_err(|e| e.to_string())?
        .symmetrize();
    let f = ScalarField::from_fn(solve_box, |x| {
        (-2.0 * (x[0] * x[0] + x[1] * x[1])).exp()
    });
    let cons = rewrite_consistency(&a_box, &rewrite, &rewrite.m, &f, &o).map_err(|e| e.to_string())?;
    let skew_ok = is_exactly_skew(&rewrite.skew);
    let detail = format!(
        "direct vs rewrite gap {:.2e} (tol 1e-6); skew exact: {skew_ok}; \
         sup |div A_per| = {:.2e} (tol 1e-8); min m = {:.4} (> 0)",
        cons.solution_gap, pot.div_residual_sup, rewrite.min_m
    );
    if cons.solution_gap <= 1e-6
        && skew_ok
        && pot.div_residual_sup <= 1e-8
        && rewrite.min_m > 0.0
    {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Result<String, String> {
    let grid = GridSpec::cell(2, 256).map_err(|e| e.to_string())?;
    let model = CoefficientModel {
        dim: 2,
        periodic: PeriodicSpec::laminate_diag(2, &[(2.0, 1.0), (1.0, 0.0)], 0),
        defect: DefectSpec::none(),
        r_exponent: 2.0,
        mu_min: 1.0,
        mu_max: 3.0,
    };
    let a = model.sample_periodic(&grid).map_err(|e| e.to_string())?;
    let o = opts(1e-13);
    let meas = solve_periodic_invariant_measure(&a, &o).map_err(|e| e.to_string())?;
    let m = grid.nodes_per_axis();
    let mut worst = 0.0f64;
    for k0 in 0..m {
        let alpha = 2.0 + (2.0 * std::f64::consts::PI * grid.axis_coord(k0)).sin();
        let expect = 3.0f64.sqrt() / alpha;
        for k1 in 0..m {
            let got = meas.m_per.values[k0 * m + k1];
            worst = worst.max((got - expect).abs());
        }
    }
    let mean_dev = (meas.m_per.mean() - 1.0).abs();
    let detail = format!(
        "max |m - sqrt(3)/alpha| = {:.2e} (tol 1e-3); |mean - 1| = {mean_dev:.1e}",
        worst
    );
    if worst <= 1e-3 && mean_dev <= 1e-13 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7() -> Result<String, String> {
    let o = opts(1e-11);
    let radii = [1.0, 2.0, 4.0];
    let mut details = Vec::new();
    let mut ok = true;

    // (a) Laplacian oracle in d = 3
    {
        let grid = GridSpec::boxed(3, 8, 12).map_err(|e| e.to_string())?;
        let a = MatrixField::identity(grid);
        let probe = green_probe(
            &a,
            &center_node(&grid),
            &GreenProbeOpts {
                with_mixed: false,
                with_symmetry_check: false,
            },
            &o,
        )
        .map_err(|e| e.to_string())?;
        let bg = kernel_offset(&probe.g, &probe.source, 1.0, 6.0, laplace_kernel_3d);
        let fit_g = pointwise_decay_fit(&probe.g, &probe.source, &radii, "g", -1.0, bg)
            .map_err(|e| e.to_string())?;
        let fit_grad =
            pointwise_decay_fit(&probe.grad_x_mag, &probe.source, &radii, "grad", -2.0, 0.0)
                .map_err(|e| e.to_string())?;
        let g_ok = (fit_g.fit.slope + 1.0).abs() <= 0.05;
        let grad_ok = (fit_grad.fit.slope + 2.0).abs() <= 0.05;
        ok &= g_ok && grad_ok;
        details.push(format!(
            "oracle slopes G {:.3} (-1±0.05), |grad G| {:.3} (-2±0.05)",
            fit_g.fit.slope, fit_grad.fit.slope
        ));
    }

    // (b) periodic laminate: one-sided annulus and pointwise bounds
    {
        let grid = GridSpec::boxed(3, 8, 12).map_err(|e| e.to_string())?;
        let model = laminate_iso(3);
        let a = model.sample_total(&grid).map_err(|e| e.to_string())?;
        let probe = green_probe(
            &a,
            &center_node(&grid),
            &GreenProbeOpts {
                with_mixed: true,
                with_symmetry_check: false,
            },
            &o,
        )
        .map_err(|e| e.to_string())?;
        let laws = annulus_gradient_law(&probe.grad_y_mag, &probe.source, &[1.0, 2.0], &radii)
            .map_err(|e| e.to_string())?;
        for law in &laws {
            let bound_ok = law.fit.slope <= law.bound_slope + 0.15;
            ok &= bound_ok;
            details.push(format!(
                "laminate annulus q={}: slope {:.3} <= {:.3}+0.15",
                law.q, law.fit.slope, law.bound_slope
            ));
        }
        let fit_gx =
            pointwise_decay_fit(&probe.grad_x_mag, &probe.source, &radii, "gx", -2.0, 0.0)
                .map_err(|e| e.to_string())?;
        let fit_mixed = pointwise_decay_fit(
            probe.mixed_mag.as_ref().unwrap(),
            &probe.source,
            &radii,
            "mixed",
            -3.0,
            0.0,
        )
        .map_err(|e| e.to_string())?;
        let gx_ok = fit_gx.fit.slope <= -2.0 + 0.15;
        let mixed_ok = fit_mixed.fit.slope <= -3.0 + 0.15;
        ok &= gx_ok && mixed_ok;
        details.push(format!(
            "laminate pointwise |grad_x G| {:.3} (<=-1.85), mixed {:.3} (<=-2.85)",
            fit_gx.fit.slope, fit_mixed.fit.slope
        ));
    }

    // (c) perturbed laminate: source-slot gradient bound and mixed tail
    {
        let grid = GridSpec::boxed(3, 8, 12).map_err(|e| e.to_string())?;
        let model = with_bump(laminate_iso(3), 0.8, 0.5);
        let a = model.sample_total(&grid).map_err(|e| e.to_string())?;
        let probe = green_probe(
            &a,
            &center_node(&grid),
            &GreenProbeOpts {
                with_mixed: true,
                with_symmetry_check: false,
            },
            &o,
        )
        .map_err(|e| e.to_string())?;
        let fit_gy =
            pointwise_decay_fit(&probe.grad_y_mag, &probe.source, &radii, "gy", -2.0, 0.0)
                .map_err(|e| e.to_string())?;
        let gy_ok = fit_gy.fit.slope <= -2.0 + 0.15;
        let mixed = mixed_gradient_integrability(
            probe.mixed_mag.as_ref().unwrap(),
            &probe.source,
            &[2.0],
            3.0,
        )
        .map_err(|e| e.to_string())?;
        let tail_ok = mixed[0].relative_change <= 0.05;
        ok &= gy_ok && tail_ok;
        details.push(format!(
            "perturbed |grad_y G| slope {:.3} (<=-1.85); mixed q=2 window-doubling change {:.3} (<=0.05)",
            fit_gy.fit.slope, mixed[0].relative_change
        ));
    }

    let detail = details.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Result<String, String> {
    let o = opts(1e-11);
    let n_per = 32usize;
    let eps_list = [0.125, 0.0625, 0.03125, 0.015625];
    // off-center load: the homogenized gradient must not vanish at the
    // defect, or the corrector terms have nothing to correct there
    let load = |x: &[f64]| {
        (-10.0 * ((x[0] - 0.35) * (x[0] - 0.35) + (x[1] - 0.6) * (x[1] - 0.6))).exp()
    };

    // defect-free rate
    let model = laminate_iso(2);
    let cell_grid = GridSpec::cell(2, n_per).map_err(|e| e.to_string())?;
    let a_per = model.sample_periodic(&cell_grid).map_err(|e| e.to_string())?;
    let cells: Vec<CellSolution> = (0..2)
        .map(|p| solve_periodic_corrector(&a_per, p, &o))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let tensor = homogenized_tensor(&a_per, &cells).map_err(|e| e.to_string())?;
    let study = convergence_study(
        &model,
        &cells,
        None,
        &tensor.a_star,
        load,
        &eps_list,
        n_per,
        &[CorrectorMode::PeriodicOnly],
        2.0,
        &o,
    )
    .map_err(|e| e.to_string())?;
    let rate = study.h1_rates[0].1.slope;

    // defect comparison
    let dmodel = with_bump(laminate_iso(2), 1.0, 0.5);
    let box_grid = GridSpec::boxed(2, n_per, 4).map_err(|e| e.to_string())?;
    let defects: Vec<defect::DefectCorrector> = (0..2)
        .map(|p| {
            defect::solve_defect_corrector(
                &dmodel,
                &cells[p].grad_w,
                p,
                &box_grid,
                &[2.0],
                &[1.0],
                &o,
                false,
            )
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let dstudy = convergence_study(
        &dmodel,
        &cells,
        Some(&defects),
        &tensor.a_star,
        load,
        &eps_list,
        n_per,
        &[CorrectorMode::PeriodicOnly, CorrectorMode::DefectCorrected],
        2.0,
        &o,
    )
    .map_err(|e| e.to_string())?;
    let mut all_better = true;
    let mut comparisons = Vec::new();
    for &eps in &eps_list {
        let per = dstudy
            .rows
            .iter()
            .find(|r| r.eps == eps && r.mode == CorrectorMode::PeriodicOnly)
            .unwrap()
            .local_h1;
        let def = dstudy
            .rows
            .iter()
            .find(|r| r.eps == eps && r.mode == CorrectorMode::DefectCorrected)
            .unwrap()
            .local_h1;
        all_better &= def < per;
        comparisons.push(format!("eps={eps}: {def:.3e} < {per:.3e}"));
    }
    let detail = format!(
        "defect-free H1 rate {rate:.3} (>= 0.45); local H1 defect-corrected vs periodic-only: {}",
        comparisons.join(", ")
    );
    if rate >= 0.45 && all_better {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9() -> Result<String, String> {
    let o = opts(1e-14);
    let grid = GridSpec::boxed(2, 32, 1).map_err(|e| e.to_string())?;
    // non-symmetric elliptic coefficient
    let model = {
        let mut m = laminate_iso(2);
        if let PeriodicSpec::Matrix { entries } = &mut m.periodic {
            entries[1].constant = 0.4;
            entries[2].constant = -0.15;
        }
        m.mu_min = 0.5;
        m.mu_max = 3.5;
        m
    };
    let a = model
        .sample_rescaled(&grid, 1.0, &[0.0, 0.0])
        .map_err(|e| e.to_string())?;
    let battery = ProbeBattery { seed: 17, count: 2 };
    let probes = battery.generate(&grid);
    let rep = duality_identity_check(&a, &probes[0].1, &probes[1].1, &o).map_err(|e| e.to_string())?;

    // double-divergence duality: <F, D^2 v> = <g, u>
    let a_sym = a.symmetrize();
    let mut fdata = MatrixField::zeros(grid);
    for (e, ent) in fdata.entries.iter_mut().enumerate() {
        for (i, v) in ent.iter_mut().enumerate() {
            *v = ((i * (3 * e + 7)) % 29) as f64 / 29.0 - 0.5;
        }
    }
    let gfun = ScalarField::from_fn(grid, |x| {
        (std::f64::consts::PI * (x[0] + 1.0)).sin() * (std::f64::consts::PI * (x[1] + 1.0)).sin()
    });
    let v = nondiv::solve_nondiv(&a_sym, &gfun, &[2.0], &o).map_err(|e| e.to_string())?;
    let (u, _) = solve_adjoint_double_div(&a_sym, &fdata, &o).map_err(|e| e.to_string())?;
    // pair with the operator's own second differences
    let lhs = {
        let mut vm = v.u.values.clone();
        grid.mask_boundary(&mut vm);
        let mut acc = 0.0;
        let n = grid.node_count();
        let mut s = vec![0.0; n];
        for j in 0..2 {
            for k in 0..2 {
                nondiv_second(&vm, &grid, j, k, &mut s);
                acc += fdata
                    .entry(j, k)
                    .iter()
                    .zip(&s)
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
            }
        }
        acc
    };
    let rhs: f64 = {
        let mut gm = gfun.values.clone();
        grid.mask_boundary(&mut gm);
        gm.iter().zip(&u.values).map(|(x, y)| x * y).sum()
    };
    let dd_disc = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
    let detail = format!(
        "divergence-form duality discrepancy {:.2e}; double-divergence duality {:.2e} (tol 1e-10)",
        rep.relative_discrepancy, dd_disc
    );
    if rep.relative_discrepancy <= 1e-10 && dd_disc <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `B_j F_k` stencil used by the non-divergence operator, reproduced for
/// the duality pairing (independent of the library internals).
fn nondiv_second(u: &[f64], grid: &GridSpec, i: usize, j: usize, out: &mut [f64]) {
    let m = grid.nodes_per_axis();
    let strides = grid.strides();
    let h2 = grid.spacing() * grid.spacing();
    let read = |mi: &[usize], oi: i64, oj: i64| -> f64 {
        let mut nm = [0i64; 3];
        for (ax, &k) in mi.iter().enumerate() {
            nm[ax] = k as i64;
        }
        nm[i] += oi;
        nm[j] += oj;
        for ax in 0..grid.dim {
            if nm[ax] < 0 || nm[ax] >= m as i64 {
                return 0.0;
            }
        }
        let mut idx = 0usize;
        for ax in 0..grid.dim {
            idx += nm[ax] as usize * strides[ax];
        }
        u[idx]
    };
    let mut w = homog::grid::NodeWalker::new(grid);
    let mut idx = 0usize;
    while w.advance() {
        out[idx] =
            (read(&w.mi, 0, 1) - read(&w.mi, 0, 0) - read(&w.mi, -1, 1) + read(&w.mi, -1, 0)) / h2;
        idx += 1;
    }
}

/// The harness captures stdout of passing tests; per-criterion lines are
/// part of the deliverable, so they also go straight to the process fd.
fn announce(line: &str) {
    println!("{line}");
    use std::io::Write;
    use std::os::unix::io::FromRawFd;
    let mut raw = unsafe { std::fs::File::from_raw_fd(1) };
    let _ = writeln!(raw, "{line}");
    std::mem::forget(raw);
}

#[test]
fn acceptance_suite() {
    let checks: Vec<Outcome> = vec![
        check(1, "laminate homogenized tensor", 60.0, criterion_1),
        check(2, "identity medium collapses to trivial objects", 120.0, criterion_2),
        check(3, "whole-space counterexample far field and shell masses", 600.0, criterion_3),
        check(4, "operator-norm sweep along the defect interpolation", 900.0, criterion_4),
        check(5, "non-divergence rewrite consistency", 300.0, criterion_5),
        check(6, "invariant measure laminate oracle", 120.0, criterion_6),
        check(7, "Green-function decay laws", 1200.0, criterion_7),
        check(8, "two-scale convergence rates and defect correction", 1800.0, criterion_8),
        check(9, "duality identities with transpose assembly", 120.0, criterion_9),
    ];
    let mut all = true;
    for c in &checks {
        announce(&format!(
            "criterion {}: {} — {} [{}] ({:.1}s)",
            c.id,
            if c.passed { "PASS" } else { "FAIL" },
            c.title,
            c.detail,
            c.seconds
        ));
        all &= c.passed;
    }
    assert!(all, "acceptance criteria failed; see the lines above");
}
