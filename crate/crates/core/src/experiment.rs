//! Batch experiment: scene synthesis, noise CPSD estimation, per-(method, c)
//! designs, shadow-filtered metrics and report files.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav_f32, Audio};
use crate::beamformer::{
    apply_filters, bmvdr_itf_error, design_all, epsilon_bounds, BinProblem, BinauralFilter, Method,
};
use crate::cone::SolverOptions;
use crate::error::{Error, Result};
use crate::eval::{
    activity_mask, avg_itf_error, ild_error, ipd_error, num, ssnr, write_metrics_csv, InterfererMetrics, MetricReport,
};
use crate::scene::{
    estimate_cpsd_from_frames, synthesize_scene, AtfVector, MicrophoneArray, PsdKind, Scene, SceneConfig, SceneSignals,
};
use crate::stft::{synthesize_to_len, StftConfig, StftGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    TrueRatf,
    PredeterminedGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub array: MicrophoneArray,
    pub stft: StftConfig,
    pub methods: Vec<Method>,
    pub c_grid: Vec<f64>,
    pub constraint_mode: ConstraintMode,
    /// Hybrid switching slack.
    pub slack: f64,
    pub k_max: usize,
    pub solver: SolverOptions,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Diagonal loading of the noise CPSD estimate, relative to `tr/M`.
    pub loading: f64,
    pub write_audio: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            array: MicrophoneArray::default(),
            stft: StftConfig::default(),
            methods: Method::ALL.to_vec(),
            c_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            constraint_mode: ConstraintMode::TrueRatf,
            slack: 0.05,
            k_max: 50,
            solver: SolverOptions::default(),
            seed: 1,
            out_dir: PathBuf::from("out"),
            loading: 1e-6,
            write_audio: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.array.validate()?;
        self.stft.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
        }
        if self.c_grid.is_empty() && self.methods.iter().any(|m| m.is_relaxed()) {
            return Err(Error::Config(
                "c_grid is empty but relaxed methods were requested".into(),
            ));
        }
        if let Some(c) = self.c_grid.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Config(format!("c = {c} outside [0, 1]")));
        }
        if !(self.slack > 0.0 && self.slack < 0.1) {
            return Err(Error::Config(format!("slack {} outside (0, 0.1)", self.slack)));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if !(self.loading >= 0.0 && self.loading.is_finite()) {
            return Err(Error::Config(format!("invalid diagonal loading {}", self.loading)));
        }
        if self.solver.max_iter == 0 || !(self.solver.gap_tol > 0.0) || !(self.solver.feas_tol > 0.0) {
            return Err(Error::Config(
                "solver tolerances and iteration limit must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The c values a method is evaluated at.
    fn c_values(&self) -> Vec<f64> {
        if self.c_grid.is_empty() {
            vec![1.0]
        } else {
            self.c_grid.clone()
        }
    }
}

/// Per-bin inputs shared by all cells.
struct Prepared {
    scene: Scene,
    signals: SceneSignals,
    p_tilde: Vec<crate::hermitian::HermitianMatrix>,
    target: Vec<AtfVector>,
    constraints: Vec<Vec<AtfVector>>,
    /// `[interferer][bin]`.
    interferers: Vec<Vec<AtfVector>>,
    /// `[interferer][bin]`.
    bmvdr_errors: Vec<Vec<f64>>,
    freqs: Vec<f64>,
    mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub method: Method,
    pub c: f64,
    pub design: BinauralFilter,
    pub report: MetricReport,
    pub audio: Audio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub method: Method,
    pub c: f64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub cells: Vec<Cell>,
    pub failures: Vec<CellFailure>,
    /// Unprocessed reference microphones.
    pub reference: Audio,
    pub noise_frames: usize,
    pub max_condition_number: f64,
    pub bin_freqs: Vec<f64>,
    pub interferer_azimuths: Vec<f64>,
}

impl ExperimentRun {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn cell(&self, method: Method, c: f64) -> Option<&Cell> {
        self.cells.iter().find(|x| x.method == method && x.c == c)
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<(Prepared, f64, usize)> {
    let scene = Scene::new(cfg.array.clone(), cfg.scene.clone(), cfg.stft)?;
    let signals = synthesize_scene(&scene, cfg.seed)?;
    let noise_frames = signals.noise_only_frames(&cfg.stft);
    if noise_frames == 0 {
        return Err(Error::Config("noise-only segment shorter than one frame".into()));
    }
    let n_bins = scene.n_bins();
    let mut p_tilde = Vec::with_capacity(n_bins);
    let mut target = Vec::with_capacity(n_bins);
    let mut constraints = Vec::with_capacity(n_bins);
    let mut per_bin_interferers = Vec::with_capacity(n_bins);
    let mut max_cond: f64 = 0.0;
    for k in 0..n_bins {
        let est = estimate_cpsd_from_frames(
            k,
            PsdKind::Noise,
            &signals.noise_snapshots(k, 0..noise_frames),
            cfg.loading,
        )?;
        max_cond = max_cond.max(est.condition_number);
        p_tilde.push(est.psd.lift());
        target.push(scene.target_atf(k)?.ratf()?);
        let ratfs = scene.interferer_ratfs(k)?;
        constraints.push(match cfg.constraint_mode {
            ConstraintMode::TrueRatf => ratfs.clone(),
            ConstraintMode::PredeterminedGrid => scene.predetermined_ratfs(k)?,
        });
        per_bin_interferers.push(ratfs);
    }
    let r = cfg.scene.interferers.len();
    let interferers: Vec<Vec<AtfVector>> = (0..r)
        .map(|i| per_bin_interferers.iter().map(|v| v[i].clone()).collect())
        .collect();
    let bmvdr_errors = interferers
        .iter()
        .map(|bs| {
            bs.iter()
                .zip(&target)
                .map(|(b, a)| bmvdr_itf_error(a, b))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let freqs = (0..n_bins).map(|k| scene.bin_freq(k)).collect();
    let mask = activity_mask(&signals.target_source, cfg.stft.frame_len)?;
    Ok((
        Prepared {
            scene,
            signals,
            p_tilde,
            target,
            constraints,
            interferers,
            bmvdr_errors,
            freqs,
            mask,
        },
        max_cond,
        noise_frames,
    ))
}

fn to_time(grid: &StftGrid, stft: &StftConfig, len: usize) -> Result<Vec<f64>> {
    synthesize_to_len(grid, stft, len)
}

fn evaluate(cfg: &ExperimentConfig, prep: &Prepared, design: BinauralFilter, c: f64) -> Result<Cell> {
    let filters = design.filters();
    let len = prep.signals.len;
    let (tl, tr) = apply_filters(&filters, &prep.signals.target)?;
    let (nl, nr) = apply_filters(&filters, &prep.signals.noise)?;
    let [tl, tr, nl, nr] = [&tl, &tr, &nl, &nr].map(|g| to_time(g, &cfg.stft, len));
    let (tl, tr, nl, nr) = (tl?, tr?, nl?, nr?);
    let fl = cfg.stft.frame_len;
    let ssnr_left_db = ssnr(&tl, &nl, &prep.mask, fl)?;
    let ssnr_right_db = ssnr(&tr, &nr, &prep.mask, fl)?;
    let mut interferers = Vec::with_capacity(prep.interferers.len());
    for (i, bs) in prep.interferers.iter().enumerate() {
        let itf = avg_itf_error(&filters, bs, &prep.bmvdr_errors[i], c)?;
        let ild = ild_error(&filters, bs, &prep.freqs)?;
        let ipd = ipd_error(&filters, bs, &prep.freqs)?;
        interferers.push(InterfererMetrics {
            index: i,
            azimuth_deg: cfg.scene.interferers[i].azimuth_deg,
            avg_itf_error: itf.error.value,
            avg_itf_bound: itf.bound,
            avg_ild_error_db: ild.value,
            avg_ipd_error_rad: ipd.value,
            excluded_bins: itf.error.bins_excluded + ild.bins_excluded + ipd.bins_excluded,
        });
    }
    let report = MetricReport {
        method: design.method,
        c,
        ssnr_left_db,
        ssnr_right_db,
        interferers,
        total_convex_solves: design.total_solves(),
    };
    let left: Vec<f64> = tl.iter().zip(&nl).map(|(a, b)| a + b).collect();
    let right: Vec<f64> = tr.iter().zip(&nr).map(|(a, b)| a + b).collect();
    Ok(Cell {
        method: design.method,
        c,
        design,
        report,
        audio: Audio {
            sample_rate: cfg.scene.sample_rate_hz as u32,
            channels: vec![left, right],
        },
    })
}

fn design_cell(cfg: &ExperimentConfig, prep: &Prepared, method: Method, c: f64) -> Result<BinauralFilter> {
    let problems = (0..prep.target.len())
        .map(|k| {
            let spec = epsilon_bounds(c, &prep.target[k], &prep.constraints[k], cfg.slack, cfg.k_max)?;
            Ok(BinProblem {
                p_tilde: prep.p_tilde[k].clone(),
                target: prep.target[k].clone(),
                spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    design_all(method, &problems, &cfg.solver)
}

/// Runs every (method, c) cell. Configuration and scene errors abort the run;
/// errors inside a cell are recorded and the remaining cells still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let (prep, max_condition_number, noise_frames) = prepare(cfg)?;
    info!(
        "scene ready: {} bins, {} noise-only frames, max CPSD condition number {:.3e}",
        prep.target.len(),
        noise_frames,
        max_condition_number
    );
    let cs = cfg.c_values();
    let jobs: Vec<(Method, f64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cs.iter().map(move |&c| (m, c)))
        .collect();
    let outcomes: Vec<(Method, f64, Result<Cell>)> = jobs
        .par_iter()
        .map(|&(method, c)| {
            let res = design_cell(cfg, &prep, method, c).and_then(|d| evaluate(cfg, &prep, d, c));
            (method, c, res)
        })
        .collect();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (method, c, res) in outcomes {
        match res {
            Ok(cell) => {
                info!(
                    "{method} c={c}: SSNR {:.2}/{:.2} dB, {} solves",
                    cell.report.ssnr_left_db, cell.report.ssnr_right_db, cell.report.total_convex_solves
                );
                cells.push(cell);
            }
            Err(e) => {
                warn!("{method} c={c} failed: {e}");
                failures.push(CellFailure {
                    method,
                    c,
                    message: e.to_string(),
                });
            }
        }
    }
    let reference = {
        let s = &prep.signals;
        let len = s.len;
        let mut channels = Vec::with_capacity(2);
        for mic in [cfg.array.left_ref, cfg.array.right_ref] {
            let t = to_time(&s.target[mic], &cfg.stft, len)?;
            let n = to_time(&s.noise[mic], &cfg.stft, len)?;
            channels.push(t.iter().zip(&n).map(|(a, b)| a + b).collect());
        }
        Audio {
            sample_rate: cfg.scene.sample_rate_hz as u32,
            channels,
        }
    };
    Ok(ExperimentRun {
        cells,
        failures,
        reference,
        noise_frames,
        max_condition_number,
        bin_freqs: prep.freqs,
        interferer_azimuths: prep.scene.config.interferers.iter().map(|s| s.azimuth_deg).collect(),
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("CSV write failed: {e}"))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn strings<const N: usize>(xs: [&str; N]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

/// One series per method over c; `value` picks the y value of a cell.
fn plot_table(
    run: &ExperimentRun,
    methods: &[Method],
    cs: &[f64],
    value: impl Fn(&Cell) -> f64,
) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["c".to_string()];
    header.extend(methods.iter().map(|m| m.name().to_string()));
    let rows = cs
        .iter()
        .map(|&c| {
            let mut row = vec![num(c)];
            row.extend(methods.iter().map(|&m| opt(run.cell(m, c).map(&value))));
            row
        })
        .collect();
    (header, rows)
}

/// Writes all report files into `dir` and returns their paths.
pub fn emit_report(run: &ExperimentRun, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    if run.cells.is_empty() && run.failures.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let cs = cfg.c_values();

    let path = dir.join("config.json");
    let json = serde_json::to_string_pretty(cfg)?;
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    written.push(path);

    let path = dir.join("metrics.csv");
    let reports: Vec<MetricReport> = run.cells.iter().map(|c| c.report.clone()).collect();
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_metrics_csv(&reports, file)?;
    written.push(path);

    let m = cfg.array.m();
    let mut header = strings([
        "method",
        "c",
        "bin",
        "freq_hz",
        "solves",
        "converged",
        "path",
        "rank_gap",
    ]);
    for side in ["l", "r"] {
        for i in 0..m {
            header.push(format!("w{side}{i}_re"));
            header.push(format!("w{side}{i}_im"));
        }
    }
    let mut rows = Vec::new();
    for cell in &run.cells {
        for (k, b) in cell.design.bins.iter().enumerate() {
            let mut row = vec![
                cell.method.name().to_string(),
                num(cell.c),
                k.to_string(),
                num(run.bin_freqs[k]),
                b.diag.solves.to_string(),
                b.diag.converged.to_string(),
                b.diag.path.map_or_else(String::new, |p| p.name().to_string()),
                opt(b.diag.rank_gap.map(|g| g.gap_matrix_norm)),
            ];
            for w in [&b.filter.w_l, &b.filter.w_r] {
                for v in w.iter() {
                    row.push(num(v.re));
                    row.push(num(v.im));
                }
            }
            rows.push(row);
        }
    }
    let path = dir.join("filters.csv");
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let header = strings([
        "method",
        "c",
        "total_solves",
        "bins",
        "converged_bins",
        "sdcr_path_bins",
        "fallback_bins",
        "non_optimal_solves",
        "max_relative_gap",
        "max_weak_duality_violation",
    ]);
    let rows: Vec<Vec<String>> = run
        .cells
        .iter()
        .map(|cell| {
            let bins = &cell.design.bins;
            vec![
                cell.method.name().to_string(),
                num(cell.c),
                cell.design.total_solves().to_string(),
                bins.len().to_string(),
                bins.iter().filter(|b| b.diag.converged).count().to_string(),
                bins.iter()
                    .filter(|b| b.diag.path == Some(Method::Sdcr))
                    .count()
                    .to_string(),
                bins.iter().filter(|b| b.diag.fallback).count().to_string(),
                bins.iter()
                    .map(|b| b.diag.non_optimal_solves)
                    .sum::<usize>()
                    .to_string(),
                num(bins.iter().map(|b| b.diag.max_relative_gap).fold(0.0, f64::max)),
                num(bins
                    .iter()
                    .map(|b| b.diag.max_weak_duality_violation)
                    .fold(0.0, f64::max)),
            ]
        })
        .collect();
    let path = dir.join("solve_counts.csv");
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let header = strings(["method", "c", "bin", "path", "solves", "converged", "fallback"]);
    let rows: Vec<Vec<String>> = run
        .cells
        .iter()
        .filter(|c| c.method == Method::Hybrid)
        .flat_map(|cell| {
            cell.design.bins.iter().enumerate().map(move |(k, b)| {
                vec![
                    cell.method.name().to_string(),
                    num(cell.c),
                    k.to_string(),
                    b.diag.path.map_or_else(String::new, |p| p.name().to_string()),
                    b.diag.solves.to_string(),
                    b.diag.converged.to_string(),
                    b.diag.fallback.to_string(),
                ]
            })
        })
        .collect();
    let path = dir.join("switching_log.csv");
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let methods = &cfg.methods;
    let mut plots: Vec<(String, (Vec<String>, Vec<Vec<String>>))> = vec![
        (
            "plot_ssnr_left.csv".into(),
            plot_table(run, methods, &cs, |c| c.report.ssnr_left_db),
        ),
        (
            "plot_ssnr_right.csv".into(),
            plot_table(run, methods, &cs, |c| c.report.ssnr_right_db),
        ),
    ];
    let relaxed: Vec<Method> = methods.iter().copied().filter(|m| m.is_relaxed()).collect();
    plots.push((
        "plot_solves.csv".into(),
        plot_table(run, &relaxed, &cs, |c| c.report.total_convex_solves as f64),
    ));
    for i in 0..run.interferer_azimuths.len() {
        let n = i + 1;
        let (mut header, mut rows) = plot_table(run, methods, &cs, |c| c.report.interferers[i].avg_itf_error);
        header.push("bound".into());
        for (row, &c) in rows.iter_mut().zip(&cs) {
            let bound = run
                .cells
                .iter()
                .find(|x| x.c == c)
                .map(|x| x.report.interferers[i].avg_itf_bound);
            row.push(opt(bound));
        }
        plots.push((format!("plot_itf_error_i{n}.csv"), (header, rows)));
        plots.push((
            format!("plot_ild_error_i{n}.csv"),
            plot_table(run, methods, &cs, |c| c.report.interferers[i].avg_ild_error_db),
        ));
        plots.push((
            format!("plot_ipd_error_i{n}.csv"),
            plot_table(run, methods, &cs, |c| c.report.interferers[i].avg_ipd_error_rad),
        ));
    }
    for (name, (header, rows)) in plots {
        let path = dir.join(name);
        write_csv(&path, &header, &rows)?;
        written.push(path);
    }

    if !run.failures.is_empty() {
        let rows: Vec<Vec<String>> = run
            .failures
            .iter()
            .map(|f| vec![f.method.name().to_string(), num(f.c), f.message.clone()])
            .collect();
        let path = dir.join("failures.csv");
        write_csv(&path, &strings(["method", "c", "error"]), &rows)?;
        written.push(path);
    }

    if cfg.write_audio {
        let audio_dir = dir.join("audio");
        fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
        let path = audio_dir.join("unprocessed.wav");
        write_wav_f32(&path, &run.reference)?;
        written.push(path);
        for cell in &run.cells {
            let path = audio_dir.join(format!("{}_c{:.2}.wav", cell.method.name(), cell.c));
            write_wav_f32(&path, &cell.audio)?;
            written.push(path);
        }
    }
    Ok(written)
}
