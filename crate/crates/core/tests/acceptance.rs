//! Acceptance suite. Each test writes one `criterion N ... PASS|FAIL` line
//! straight to stdout so the lines show up without `--nocapture`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rbb_core::beamformer::{
    constraint_matrix, epsilon_bounds, itf_error, sco_solve, sco_subproblem, sdcr_problem, sdcr_solve, BinFilter,
    Method,
};
use rbb_core::cone::{self, ConeProblem, Equality, SolverOptions};
use rbb_core::experiment::{emit_report, run_experiment, ExperimentConfig, ExperimentRun};
use rbb_core::hermitian::{is_psd, HermitianMatrix, C64, PSD_TOL};
use rbb_core::scene::{assemble_noise_cpsd, AtfVector, MicrophoneArray, Scene, SceneConfig, SignalKind, Source};
use rbb_core::stft::{analyze, synthesize_to_len, StftConfig};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id:>2} [{name}] {verdict}: {detail}");
    let _ = out.flush();
}

fn cgauss(rng: &mut ChaCha8Rng) -> C64 {
    C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn cvec(rng: &mut ChaCha8Rng, n: usize) -> DVector<C64> {
    DVector::from_fn(n, |_, _| cgauss(rng))
}

fn scene_of(config: SceneConfig) -> Scene {
    Scene::new(MicrophoneArray::default(), config, StftConfig::default()).unwrap()
}

fn default_scene() -> Scene {
    scene_of(SceneConfig::default())
}

/// Default scene with a fifth interferer, so `m = 2M - 3`.
fn five_interferer_scene() -> Scene {
    let mut cfg = SceneConfig::default();
    cfg.interferers.push(Source::at(20.0, SignalKind::White));
    scene_of(cfg)
}

struct BinData {
    p_n: HermitianMatrix,
    p_tilde: HermitianMatrix,
    a: AtfVector,
    bs: Vec<AtfVector>,
}

fn model_bins(scene: &Scene) -> Vec<BinData> {
    (0..scene.n_bins())
        .map(|k| {
            let p_n = assemble_noise_cpsd(scene, k).unwrap().matrix;
            BinData {
                p_tilde: p_n.block_diag_lift(),
                p_n,
                a: scene.target_atf(k).unwrap().ratf().unwrap(),
                bs: scene.interferer_ratfs(k).unwrap(),
            }
        })
        .collect()
}

fn rel_dist(x: &DVector<C64>, y: &DVector<C64>) -> f64 {
    (x - y).norm() / y.norm().max(f64::MIN_POSITIVE)
}

/// `min w^H P w` subject to `E w = d`, via `P^-1 E^H (E P^-1 E^H)^+ d`.
fn lcmv_oracle(p: &DMatrix<C64>, rows: &[(DVector<C64>, C64)]) -> DVector<C64> {
    let n = p.nrows();
    let e = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
    let d = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let pe = p.clone().lu().solve(&e.adjoint()).unwrap();
    let gram = &e * &pe;
    let tol = 1e-13 * gram.norm();
    let gram_pinv = gram.pseudo_inverse(tol).unwrap();
    pe * (gram_pinv * d)
}

/// `a^H w_L = a_L` and `a^H w_R = a_R`, written without conjugating `w`.
fn distortionless(a: &AtfVector) -> Vec<(DVector<C64>, C64)> {
    let m = a.len();
    let ah = a.values().map(|v| v.conj());
    let mut left = DVector::zeros(2 * m);
    left.rows_mut(0, m).copy_from(&ah);
    let mut right = DVector::zeros(2 * m);
    right.rows_mut(m, m).copy_from(&ah);
    vec![(left, a.left().conj()), (right, a.right().conj())]
}

/// `w_L^H b = r w_R^H b` with `r = b_L / b_R`.
fn itf_equality(b: &AtfVector) -> (DVector<C64>, C64) {
    let m = b.len();
    let r = b.left() / b.right();
    let bh = b.values().map(|v| v.conj());
    let mut row = DVector::zeros(2 * m);
    row.rows_mut(0, m).copy_from(&bh);
    row.rows_mut(m, m).copy_from(&(&bh * -r.conj()));
    (row, C64::new(0.0, 0.0))
}

fn stacked(f: &BinFilter) -> DVector<C64> {
    f.stacked()
}

#[test]
fn criterion_01_bmvdr_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut cfg = SceneConfig::default();
    cfg.target = Source::at(rng.random_range(-60.0..60.0), SignalKind::SpeechShaped);
    let r = rng.random_range(1..=4);
    cfg.interferers = (0..r)
        .map(|_| Source::at(rng.random_range(-180.0..180.0), SignalKind::White))
        .collect();
    cfg.diffuse_level = rng.random_range(0.01..1.0);
    let scene = scene_of(cfg);
    let bins = model_bins(&scene);
    let opts = SolverOptions::default();

    let start = Instant::now();
    let mut solved = Vec::with_capacity(bins.len());
    for bin in &bins {
        let mut prob = ConeProblem::new(2 * bin.a.len());
        prob.quadratic_cost = Some(bin.p_tilde.clone());
        prob.equalities = distortionless(&bin.a)
            .into_iter()
            .map(|(coeffs, rhs)| Equality { coeffs, rhs })
            .collect();
        solved.push(cone::solve(&prob, &opts).unwrap());
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut worst: f64 = 0.0;
    let mut all_optimal = true;
    for (bin, sol) in bins.iter().zip(&solved) {
        all_optimal &= sol.is_optimal();
        // Closed form: w_L = P^-1 a a_L* / (a^H P^-1 a), likewise w_R.
        let x = bin.p_n.matrix().clone().lu().solve(bin.a.values()).unwrap();
        let denom = bin.a.values().dotc(&x);
        let mut w = DVector::zeros(2 * bin.a.len());
        let m = bin.a.len();
        w.rows_mut(0, m).copy_from(&(&x * (bin.a.left().conj() / denom)));
        w.rows_mut(m, m).copy_from(&(&x * (bin.a.right().conj() / denom)));
        worst = worst.max(rel_dist(&sol.w, &w));
    }
    let pass = all_optimal && worst <= 1e-6 && elapsed < 5.0;
    report(
        1,
        "BMVDR oracle",
        pass,
        &format!(
            "{} bins, max rel err {worst:.2e}, all optimal {all_optimal}, {elapsed:.2} s",
            bins.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_constraint_sign_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let m = 4;
    let (mut checked, mut disagreements) = (0usize, 0usize);
    for _ in 0..10_000 {
        let w = cvec(&mut rng, 2 * m);
        let b = cvec(&mut rng, m);
        let eps: f64 = rng.random_range(0.0..3.0);
        let wl = w.rows(0, m).into_owned();
        let wr = w.rows(m, m).into_owned();
        let den = wr.dotc(&b);
        if den.norm() <= 1e-6 {
            continue;
        }
        checked += 1;
        let err = (wl.dotc(&b) / den - b[0] / b[m - 1]).norm();
        let q = constraint_matrix(&AtfVector::from_slice(b.as_slice()), eps).quadratic_form(&w);
        if (q > 0.0) != (err > eps) || (q < 0.0) != (err < eps) {
            disagreements += 1;
        }
    }
    let pass = disagreements == 0 && checked > 9_000;
    report(
        2,
        "constraint sign equivalence",
        pass,
        &format!("{checked} draws checked, {disagreements} disagreements"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_constraint_not_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = 0;
    for _ in 0..1_000 {
        let b = cvec(&mut rng, 4);
        let eps = 10f64.powf(rng.random_range(-2.0..0.5));
        if is_psd(&constraint_matrix(&AtfVector::from_slice(b.as_slice()), eps), PSD_TOL) {
            failures += 1;
        }
    }
    report(
        3,
        "constraint matrix indefinite",
        failures == 0,
        &format!("1000 draws, {failures} PSD"),
    );
    assert_eq!(failures, 0);
}

#[test]
fn criterion_04_relaxation_sanity() {
    let bins = model_bins(&default_scene());
    let opts = SolverOptions::default();
    let (mut worst_w, mut worst_rank, mut worst_excess) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    let mut ok = true;
    for bin in &bins {
        let bm = rbb_core::beamformer::bmvdr(&bin.p_n, &bin.a).unwrap();
        let spec0 = epsilon_bounds(0.5, &bin.a, &[], 0.05, 50).unwrap();
        let d0 = sdcr_solve(&bin.p_tilde, &bin.a, &spec0, &opts).unwrap();
        ok &= !d0.diag.fallback && d0.diag.non_optimal_solves == 0;
        worst_w = worst_w.max(rel_dist(&stacked(&d0.filter), &stacked(&bm)));
        worst_rank = worst_rank.max(d0.diag.rank_gap.map_or(f64::INFINITY, |g| g.gap_matrix_norm));

        let spec1 = epsilon_bounds(1.0, &bin.a, &bin.bs, 0.05, 50).unwrap();
        let d1 = sdcr_solve(&bin.p_tilde, &bin.a, &spec1, &opts).unwrap();
        ok &= !d1.diag.fallback && d1.diag.non_optimal_solves == 0;
        let bm_power = bin.p_tilde.quadratic_form(&stacked(&bm));
        worst_excess = worst_excess.max(d1.diag.objective.unwrap() - bm_power);
    }
    let pass = ok && worst_w <= 1e-6 && worst_rank <= 1e-7 && worst_excess <= 1e-8;
    report(
        4,
        "relaxation sanity",
        pass,
        &format!(
            "m=0: max rel dev {worst_w:.2e}, max rank gap {worst_rank:.2e}; c=1: max objective - BMVDR power {worst_excess:.2e}; all optimal {ok}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_lcmv_oracle_at_c0() {
    let bins = model_bins(&five_interferer_scene());
    let opts = SolverOptions::default();
    let (mut worst_sdcr, mut worst_sco) = (0.0f64, 0.0f64);
    for m in 1..=5 {
        for bin in &bins {
            let bs = &bin.bs[..m];
            let mut rows = distortionless(&bin.a);
            rows.extend(bs.iter().map(itf_equality));
            let oracle = lcmv_oracle(bin.p_tilde.matrix(), &rows);
            let spec = epsilon_bounds(0.0, &bin.a, bs, 0.05, 50).unwrap();
            let sd = sdcr_solve(&bin.p_tilde, &bin.a, &spec, &opts).unwrap();
            let sc = sco_solve(&bin.p_tilde, &bin.a, &spec, &opts).unwrap();
            worst_sdcr = worst_sdcr.max(rel_dist(&stacked(&sd.filter), &oracle));
            worst_sco = worst_sco.max(rel_dist(&stacked(&sc.filter), &oracle));
        }
    }
    let pass = worst_sdcr <= 1e-5 && worst_sco <= 1e-5;
    report(
        5,
        "LCMV oracle at c=0",
        pass,
        &format!(
            "m=1..5 over {} bins: SDCR max rel err {worst_sdcr:.2e}, SCO {worst_sco:.2e}",
            bins.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_sco_guarantee() {
    let bins = model_bins(&five_interferer_scene());
    let opts = SolverOptions::default();
    let mut details = Vec::new();
    let mut pass = true;
    for c in [0.3, 0.7] {
        let (mut not_converged, mut violating, mut worst, mut max_solves) = (Vec::new(), 0usize, f64::NEG_INFINITY, 0);
        for (k, bin) in bins.iter().enumerate() {
            let spec = epsilon_bounds(c, &bin.a, &bin.bs, 0.05, 50).unwrap();
            let d = sco_solve(&bin.p_tilde, &bin.a, &spec, &opts).unwrap();
            max_solves = max_solves.max(d.diag.solves);
            if !d.diag.converged {
                not_converged.push(k);
            }
            let excess = bin
                .bs
                .iter()
                .zip(&spec.eps)
                .map(|(b, e)| itf_error(&d.filter, b) - e)
                .fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(excess);
            if !(excess <= 1e-8) {
                violating += 1;
            }
        }
        pass &= not_converged.is_empty() && violating == 0;
        details.push(format!(
            "c={c}: {} bins not converged {:?}, {violating} bins over eps (worst excess {worst:.2e}), max solves {max_solves}",
            not_converged.len(),
            not_converged
        ));
    }
    report(6, "SCO convergence with 5 RATFs", pass, &details.join("; "));
    assert!(pass);
}

struct Shared {
    cfg: ExperimentConfig,
    run: ExperimentRun,
    scene: Scene,
}

fn shared() -> &'static Shared {
    static RUN: OnceLock<Shared> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig {
            write_audio: false,
            ..Default::default()
        };
        let run = run_experiment(&cfg).unwrap();
        let scene = Scene::new(cfg.array.clone(), cfg.scene.clone(), cfg.stft).unwrap();
        Shared { cfg, run, scene }
    })
}

#[test]
fn criterion_07_hybrid_certificate() {
    let s = shared();
    let (mut violations, mut sdcr_path_bad, mut sdcr_bins, mut sco_bins) = (0usize, 0usize, 0usize, 0usize);
    let mut worst = f64::NEG_INFINITY;
    for &c in &s.cfg.c_grid {
        let cell = s.run.cell(Method::Hybrid, c).unwrap();
        for (k, bin) in cell.design.bins.iter().enumerate() {
            let a = s.scene.target_atf(k).unwrap().ratf().unwrap();
            let bs = s.scene.interferer_ratfs(k).unwrap();
            let spec = epsilon_bounds(c, &a, &bs, s.cfg.slack, s.cfg.k_max).unwrap();
            for (b, e) in bs.iter().zip(&spec.eps_tilde) {
                let excess = itf_error(&bin.filter, b) - e;
                worst = worst.max(excess);
                if !(excess <= 1e-8) {
                    violations += 1;
                }
            }
            match bin.diag.path {
                Some(Method::Sdcr) => {
                    sdcr_bins += 1;
                    if bin.diag.solves != 1 {
                        sdcr_path_bad += 1;
                    }
                }
                _ => sco_bins += 1,
            }
        }
    }
    let pass = violations == 0 && sdcr_path_bad == 0;
    report(
        7,
        "hybrid certificate",
        pass,
        &format!(
            "{violations} constraint violations (worst excess {worst:.2e}); SDCR path {sdcr_bins} bins, {sdcr_path_bad} with solves != 1; SCO path {sco_bins} bins"
        ),
    );
    assert!(pass);
}

fn total(s: &Shared, method: Method, c: f64) -> usize {
    s.run.cell(method, c).unwrap().report.total_convex_solves
}

#[test]
fn criterion_08_solve_counts() {
    let s = shared();
    let n_bins = s.run.bin_freqs.len();
    let mut pass = true;
    let mut rows = Vec::new();
    for &c in &s.cfg.c_grid {
        let (sd, hy, sc) = (
            total(s, Method::Sdcr, c),
            total(s, Method::Hybrid, c),
            total(s, Method::Sco, c),
        );
        pass &= sd == n_bins && sd <= hy && hy <= n_bins + sc;
        if c >= 0.5 - 1e-12 {
            pass &= hy < sc;
        }
        rows.push(format!("c={c}: {sd}/{hy}/{sc}"));
    }
    report(8, "solve counts", pass, &format!("SDCR/hybrid/SCO {}", rows.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_09_monotonicity() {
    let s = shared();
    let grid = &s.cfg.c_grid;
    let mut problems = Vec::new();

    for pair in grid.windows(2) {
        let (lo, hi) = (
            s.run.cell(Method::Sdcr, pair[0]).unwrap(),
            s.run.cell(Method::Sdcr, pair[1]).unwrap(),
        );
        for (k, (x, y)) in lo.design.bins.iter().zip(&hi.design.bins).enumerate() {
            let (ox, oy) = (x.diag.objective.unwrap(), y.diag.objective.unwrap());
            if oy > ox + 1e-6 * (1.0 + ox.abs()) {
                problems.push(format!(
                    "SDCR objective rises at bin {k} from c={} to c={}",
                    pair[0], pair[1]
                ));
            }
        }
        let (rl, rh) = (&lo.report, &hi.report);
        if rh.ssnr_left_db < rl.ssnr_left_db - 0.1 || rh.ssnr_right_db < rl.ssnr_right_db - 0.1 {
            problems.push(format!("SDCR SSNR drops from c={} to c={}", pair[0], pair[1]));
        }
        for method in [Method::Sdcr, Method::Sco, Method::Hybrid] {
            let (a, b) = (
                s.run.cell(method, pair[0]).unwrap(),
                s.run.cell(method, pair[1]).unwrap(),
            );
            for (ia, ib) in a.report.interferers.iter().zip(&b.report.interferers) {
                if ib.avg_itf_error < ia.avg_itf_error - 1e-12 {
                    problems.push(format!(
                        "{} ITF error for interferer {} drops from c={} to c={}",
                        method.name(),
                        ia.index,
                        pair[0],
                        pair[1]
                    ));
                }
            }
        }
    }

    let bm = &s.run.cell(Method::Bmvdr, grid[0]).unwrap().report;
    for cell in s.run.cells.iter().filter(|c| c.method != Method::Bmvdr) {
        let r = &cell.report;
        if r.ssnr_left_db > bm.ssnr_left_db || r.ssnr_right_db > bm.ssnr_right_db {
            problems.push(format!("{} c={} beats BMVDR SSNR", r.method.name(), r.c));
        }
        for (i, b) in r.interferers.iter().zip(&bm.interferers) {
            if i.avg_itf_error > b.avg_itf_error {
                problems.push(format!(
                    "{} c={} exceeds BMVDR ITF error for interferer {}",
                    r.method.name(),
                    r.c,
                    i.index
                ));
            }
        }
    }
    let pass = problems.is_empty();
    let detail = if pass {
        format!("{} grid points checked", grid.len())
    } else {
        problems.join("; ")
    };
    report(9, "monotonicity", pass, &detail);
    assert!(pass);
}

/// Reported only.
#[test]
fn criterion_10_boundary_closeness() {
    let s = shared();
    let mut rows = Vec::new();
    let mut met = true;
    for c in [0.8, 0.9] {
        let sco = &s.run.cell(Method::Sco, c).unwrap().report;
        for method in [Method::Sdcr, Method::Hybrid] {
            let r = &s.run.cell(method, c).unwrap().report;
            for (x, y) in r.interferers.iter().zip(&sco.interferers) {
                met &= x.avg_itf_error >= y.avg_itf_error;
                rows.push(format!(
                    "c={c} {} i{}: {:.4} vs SCO {:.4}",
                    method.name(),
                    x.index,
                    x.avg_itf_error,
                    y.avg_itf_error
                ));
            }
        }
    }
    let tag = if met { "" } else { " (reported only)" };
    report(10, "boundary closeness", met, &format!("{}{tag}", rows.join(", ")));
}

#[test]
fn criterion_11_stft_reconstruction() {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x: Vec<f64> = (0..16_000).map(|_| rng.sample(StandardNormal)).collect();
        let y = synthesize_to_len(&analyze(&x, &cfg).unwrap(), &cfg, x.len()).unwrap();
        let guard = cfg.frame_len / 2;
        let interior = guard..x.len() - guard;
        let err = interior.clone().map(|i| (x[i] - y[i]).powi(2)).sum::<f64>().sqrt();
        let norm = interior.map(|i| x[i].powi(2)).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    report(
        11,
        "STFT reconstruction",
        worst <= 1e-10,
        &format!("max interior rel err {worst:.2e}"),
    );
    assert!(worst <= 1e-10);
}

#[test]
fn criterion_12_solver_self_checks() {
    let s = shared();
    let (mut max_gap, mut max_weak, mut non_optimal) = (0.0f64, 0.0f64, 0usize);
    for cell in &s.run.cells {
        for bin in &cell.design.bins {
            max_gap = max_gap.max(bin.diag.max_relative_gap);
            max_weak = max_weak.max(bin.diag.max_weak_duality_violation);
            non_optimal += bin.diag.non_optimal_solves;
        }
    }

    // Objective reported by the real-variable solver against the same
    // objective evaluated on the returned complex iterate.
    let opts = SolverOptions::default();
    let mut max_obj_dev: f64 = 0.0;
    for (k, bin) in model_bins(&s.scene).iter().enumerate() {
        let c = [0.2, 0.5, 0.8][k % 3];
        let spec = epsilon_bounds(c, &bin.a, &bin.bs, 0.05, 50).unwrap();
        let sol = cone::solve(&sdcr_problem(&bin.p_tilde, &bin.a, &spec), &opts).unwrap();
        let complex_obj = bin.p_tilde.trace_product(sol.w_matrix.as_ref().unwrap());
        max_obj_dev = max_obj_dev.max((complex_obj - sol.objective).abs() / (1.0 + sol.objective.abs()));
        let bm = rbb_core::beamformer::bmvdr(&bin.p_n, &bin.a).unwrap();
        let sol = cone::solve(&sco_subproblem(&bin.p_tilde, &bin.a, &spec, &bm), &opts).unwrap();
        let complex_obj = bin.p_tilde.quadratic_form(&sol.w);
        max_obj_dev = max_obj_dev.max((complex_obj - sol.objective).abs() / (1.0 + sol.objective.abs()));
    }
    let pass = max_gap <= 1e-7 && max_obj_dev <= 1e-7 && max_weak <= 1e-9;
    report(
        12,
        "solver self-checks",
        pass,
        &format!(
            "max rel gap {max_gap:.2e} ({non_optimal} non-optimal solves), max objective deviation {max_obj_dev:.2e}, max weak-duality violation {max_weak:.2e}"
        ),
    );
    assert!(pass);
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn criterion_13_determinism() {
    let s = shared();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    emit_report(&s.run, &s.cfg, first.path()).unwrap();
    let again = run_experiment(&s.cfg).unwrap();
    emit_report(&again, &s.cfg, second.path()).unwrap();
    let (a, b) = (csv_files(first.path()), csv_files(second.path()));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let pass = !a.is_empty() && a.len() == b.len() && differing.is_empty();
    report(
        13,
        "determinism",
        pass,
        &format!("{} CSV files compared, differing: {differing:?}", a.len()),
    );
    assert!(pass);
}
