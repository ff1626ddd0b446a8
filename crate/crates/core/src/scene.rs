//! Acoustic scene: array geometry, free-field ATFs, diffuse coherence,
//! per-bin cross-PSD matrices and seeded signal synthesis.
//!
//! Coordinates: x points to the front, y to the left. Azimuth is measured
//! from the front towards the left, so +90 degrees is the left ear side.
//! Powers of modeled CPSDs are in STFT units, i.e. the expected `|X[k]|^2`
//! of a source with the given variance analyzed with the configured window.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::read_wav;
use crate::error::{Error, Result};
use crate::hermitian::{HermitianMatrix, C64};
use crate::stft::{analyze, StftConfig, StftGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicrophoneArray {
    /// Cartesian positions in meters.
    pub positions: Vec<[f64; 3]>,
    pub left_ref: usize,
    pub right_ref: usize,
    /// Target-to-self-noise ratio at the left reference; `None` disables
    /// self-noise.
    pub self_noise_snr_db: Option<f64>,
    /// Attenuates the contralateral subarray by `1/(1 + (f/4000)|sin az|)`.
    pub head_shadow: bool,
}

impl Default for MicrophoneArray {
    /// Two 2-mic devices on the interaural axis, 0.17 m between the outer
    /// (reference) mics and 0.01 m within each device.
    fn default() -> Self {
        Self {
            positions: vec![
                [0.0, 0.085, 0.0],
                [0.0, 0.075, 0.0],
                [0.0, -0.075, 0.0],
                [0.0, -0.085, 0.0],
            ],
            left_ref: 0,
            right_ref: 3,
            self_noise_snr_db: Some(40.0),
            head_shadow: true,
        }
    }
}

impl MicrophoneArray {
    pub fn m(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m < 2 {
            return Err(Error::Config(format!("array needs at least 2 microphones, got {m}")));
        }
        if self.left_ref >= m || self.right_ref >= m || self.left_ref == self.right_ref {
            return Err(Error::Config(format!(
                "reference indices ({}, {}) invalid for {m} microphones",
                self.left_ref, self.right_ref
            )));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("microphone positions must be finite".into()));
        }
        Ok(())
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (p, q) = (self.positions[i], self.positions[j]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }
}

/// Sample rate and speed of sound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Medium {
    pub sample_rate_hz: f64,
    pub speed_of_sound: f64,
}

impl Medium {
    pub fn nyquist(&self) -> f64 {
        self.sample_rate_hz / 2.0
    }
}

impl Default for Medium {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000.0,
            speed_of_sound: 343.0,
        }
    }
}

/// Per-microphone transfer values of one source at one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct AtfVector {
    values: DVector<C64>,
    left_ref: usize,
    right_ref: usize,
}

impl AtfVector {
    pub fn new(values: DVector<C64>, left_ref: usize, right_ref: usize) -> Result<Self> {
        let m = values.len();
        if left_ref >= m || right_ref >= m || left_ref == right_ref {
            return Err(Error::Dimension(format!(
                "references ({left_ref}, {right_ref}) invalid for length {m}"
            )));
        }
        Ok(Self {
            values,
            left_ref,
            right_ref,
        })
    }

    /// Left reference first, right reference last.
    pub fn from_slice(values: &[C64]) -> Self {
        let m = values.len();
        assert!(m >= 2, "an ATF needs at least two entries");
        Self {
            values: DVector::from_column_slice(values),
            left_ref: 0,
            right_ref: m - 1,
        }
    }

    pub fn values(&self) -> &DVector<C64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn left_ref(&self) -> usize {
        self.left_ref
    }

    pub fn right_ref(&self) -> usize {
        self.right_ref
    }

    pub fn left(&self) -> C64 {
        self.values[self.left_ref]
    }

    pub fn right(&self) -> C64 {
        self.values[self.right_ref]
    }

    /// `left / right`, or `None` if the right entry vanishes.
    pub fn itf(&self) -> Option<C64> {
        let r = self.right();
        (r.norm() > 0.0).then(|| self.left() / r)
    }

    /// Normalized to the left reference entry.
    pub fn ratf(&self) -> Result<Self> {
        let l = self.left();
        if l.norm() == 0.0 {
            return Err(Error::Degenerate("left reference entry is zero".into()));
        }
        Ok(Self {
            values: self.values.map(|v| v / l),
            ..*self
        })
    }

    pub fn scaled(&self, s: C64) -> Self {
        Self {
            values: &self.values * s,
            ..*self
        }
    }
}

/// Unit vector towards the source; +y is the left side, positive azimuth is
/// to the right.
fn unit_direction(azimuth_deg: f64) -> [f64; 3] {
    let az = azimuth_deg.to_radians();
    [az.cos(), -az.sin(), 0.0]
}

/// Far-field plane-wave ATF, element `g_m exp(-j 2 pi f tau_m)` with arrival
/// delay `tau_m = -p_m . u / c`.
pub fn synth_atf(array: &MicrophoneArray, azimuth_deg: f64, freq_hz: f64, medium: &Medium) -> Result<AtfVector> {
    if !(0.0..=medium.nyquist()).contains(&freq_hz) {
        return Err(Error::FrequencyOutOfRange {
            freq_hz,
            nyquist_hz: medium.nyquist(),
        });
    }
    let u = unit_direction(azimuth_deg);
    let shadow = 1.0 / (1.0 + freq_hz / 4000.0 * u[1].abs());
    let values = DVector::from_iterator(
        array.m(),
        array.positions.iter().map(|p| {
            let tau = -(p[0] * u[0] + p[1] * u[1] + p[2] * u[2]) / medium.speed_of_sound;
            let gain = if array.head_shadow && p[1] * u[1] < 0.0 {
                shadow
            } else {
                1.0
            };
            C64::from_polar(gain, -2.0 * PI * freq_hz * tau)
        }),
    );
    AtfVector::new(values, array.left_ref, array.right_ref)
}

/// Spherically isotropic coherence `sin(x)/x` with `x = 2 pi f d / c`.
pub fn diffuse_coherence(d: f64, freq_hz: f64, speed_of_sound: f64) -> f64 {
    let x = 2.0 * PI * freq_hz * d / speed_of_sound;
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

pub fn coherence_matrix(array: &MicrophoneArray, freq_hz: f64, speed_of_sound: f64) -> HermitianMatrix {
    let m = array.m();
    let g = DMatrix::from_fn(m, m, |i, j| {
        C64::new(diffuse_coherence(array.distance(i, j), freq_hz, speed_of_sound), 0.0)
    });
    HermitianMatrix::symmetrized(g)
}

/// Azimuths of the predetermined constraint grid: 24 directions 15 degrees
/// apart starting at -90, wrapped to [-180, 180), with 0 removed.
pub fn predetermined_azimuths() -> Vec<f64> {
    (0..24)
        .map(|k| {
            let az = -90.0 + 15.0 * k as f64;
            if az >= 180.0 {
                az - 360.0
            } else {
                az
            }
        })
        .filter(|&az| az != 0.0)
        .collect()
}

/// RATFs of the predetermined grid at one frequency.
pub fn ratf_grid(array: &MicrophoneArray, freq_hz: f64, medium: &Medium) -> Result<Vec<AtfVector>> {
    predetermined_azimuths()
        .into_iter()
        .map(|az| synth_atf(array, az, freq_hz, medium)?.ratf())
        .collect()
}

/// Multichannel impulse response of one source direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub channels: Vec<Vec<f64>>,
}

impl ImpulseResponse {
    /// DTFT of each channel at `freq_hz`.
    pub fn atf(&self, freq_hz: f64, sample_rate_hz: f64, left_ref: usize, right_ref: usize) -> Result<AtfVector> {
        let omega = 2.0 * PI * freq_hz / sample_rate_hz;
        let values = DVector::from_iterator(
            self.channels.len(),
            self.channels.iter().map(|h| {
                h.iter()
                    .enumerate()
                    .map(|(n, &v)| C64::from_polar(v, -omega * n as f64))
                    .sum::<C64>()
            }),
        );
        AtfVector::new(values, left_ref, right_ref)
    }
}

pub fn load_impulse_response(path: &Path, expected_rate: u32, n_mics: usize) -> Result<ImpulseResponse> {
    let audio = read_wav(path)?;
    if audio.sample_rate != expected_rate {
        return Err(Error::Config(format!(
            "{}: sample rate {} differs from configured {expected_rate}",
            path.display(),
            audio.sample_rate
        )));
    }
    if audio.channels.len() != n_mics {
        return Err(Error::Config(format!(
            "{}: {} channels, array has {n_mics} microphones",
            path.display(),
            audio.channels.len()
        )));
    }
    Ok(ImpulseResponse {
        channels: audio.channels,
    })
}

/// Seeded source signal types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalKind {
    White,
    /// First-order autoregressive noise with a low-pass tilt.
    SpeechShaped,
    /// First channel of a WAV file, tiled to length and scaled to unit power.
    Wav {
        path: PathBuf,
    },
}

const SPEECH_POLE: f64 = 0.8;

impl SignalKind {
    /// Power spectral density of the unit-variance process at `freq_hz`.
    /// WAV sources are treated as white.
    pub fn spectral_shape(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        match self {
            SignalKind::SpeechShaped => {
                let w = 2.0 * PI * freq_hz / sample_rate_hz;
                let rho = SPEECH_POLE;
                (1.0 - rho * rho) / (1.0 - 2.0 * rho * w.cos() + rho * rho)
            }
            _ => 1.0,
        }
    }

    pub fn generate(&self, len: usize, sample_rate_hz: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            SignalKind::White => Ok(white(len, rng)),
            SignalKind::SpeechShaped => {
                let gain = (1.0 - SPEECH_POLE * SPEECH_POLE).sqrt();
                // Start from the stationary distribution.
                let mut prev: f64 = StandardNormal.sample(rng);
                let mut out = Vec::with_capacity(len);
                for x in white(len, rng) {
                    prev = SPEECH_POLE * prev + gain * x;
                    out.push(prev);
                }
                Ok(out)
            }
            SignalKind::Wav { path } => {
                let audio = read_wav(path)?;
                if f64::from(audio.sample_rate) != sample_rate_hz {
                    return Err(Error::Config(format!(
                        "{}: sample rate {} differs from configured {sample_rate_hz}",
                        path.display(),
                        audio.sample_rate
                    )));
                }
                let src = audio.channels.into_iter().next().unwrap_or_default();
                let power = src.iter().map(|v| v * v).sum::<f64>() / src.len().max(1) as f64;
                if power == 0.0 {
                    return Err(Error::Config(format!("{}: silent source signal", path.display())));
                }
                let g = power.sqrt().recip();
                Ok((0..len).map(|i| src[i % src.len()] * g).collect())
            }
        }
    }
}

fn white(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub azimuth_deg: f64,
    #[serde(default = "default_signal")]
    pub signal: SignalKind,
    /// Variance relative to the unit-variance target.
    #[serde(default = "one")]
    pub power_scale: f64,
    /// Replaces the free-field ATF when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impulse_response: Option<PathBuf>,
}

fn default_signal() -> SignalKind {
    SignalKind::SpeechShaped
}

fn one() -> f64 {
    1.0
}

impl Source {
    pub fn at(azimuth_deg: f64, signal: SignalKind) -> Self {
        Self {
            azimuth_deg,
            signal,
            power_scale: 1.0,
            impulse_response: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub target: Source,
    pub interferers: Vec<Source>,
    /// Variance of the diffuse field relative to the target.
    pub diffuse_level: f64,
    pub sample_rate_hz: f64,
    pub speed_of_sound: f64,
    /// Leading noise-only segment used for CPSD estimation.
    pub noise_only_s: f64,
    /// Target-plus-noise segment following the noise-only part.
    pub duration_s: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            target: Source::at(0.0, SignalKind::SpeechShaped),
            interferers: vec![
                Source::at(80.0, SignalKind::SpeechShaped),
                Source::at(50.0, SignalKind::White),
                Source::at(-35.0, SignalKind::SpeechShaped),
                Source::at(-70.0, SignalKind::White),
            ],
            diffuse_level: 0.1,
            sample_rate_hz: 16_000.0,
            speed_of_sound: 343.0,
            noise_only_s: 5.0,
            duration_s: 10.0,
        }
    }
}

impl SceneConfig {
    pub fn medium(&self) -> Medium {
        Medium {
            sample_rate_hz: self.sample_rate_hz,
            speed_of_sound: self.speed_of_sound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) || !(self.speed_of_sound > 0.0) {
            return Err(Error::Config("sample rate and speed of sound must be positive".into()));
        }
        for s in std::iter::once(&self.target).chain(&self.interferers) {
            if !(-180.0..180.0).contains(&s.azimuth_deg) {
                return Err(Error::Config(format!("azimuth {} outside [-180, 180)", s.azimuth_deg)));
            }
            if !(s.power_scale >= 0.0) {
                return Err(Error::Config(format!("negative source power {}", s.power_scale)));
            }
        }
        if !(self.diffuse_level >= 0.0) {
            return Err(Error::Config(format!("negative diffuse level {}", self.diffuse_level)));
        }
        if !(self.noise_only_s > 0.0) || !(self.duration_s > 0.0) {
            return Err(Error::Config("segment durations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdKind {
    Noisy,
    Noise,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossPsd {
    pub bin: usize,
    pub matrix: HermitianMatrix,
    pub kind: PsdKind,
}

impl CrossPsd {
    /// Block-diagonal `diag(P, P)` acting on stacked left/right filters.
    pub fn lift(&self) -> HermitianMatrix {
        self.matrix.block_diag_lift()
    }
}

/// A validated scene with impulse responses loaded.
#[derive(Debug, Clone)]
pub struct Scene {
    pub array: MicrophoneArray,
    pub config: SceneConfig,
    pub stft: StftConfig,
    target_ir: Option<ImpulseResponse>,
    interferer_irs: Vec<Option<ImpulseResponse>>,
}

impl Scene {
    pub fn new(array: MicrophoneArray, config: SceneConfig, stft: StftConfig) -> Result<Self> {
        array.validate()?;
        config.validate()?;
        stft.validate()?;
        let rate = config.sample_rate_hz.round() as u32;
        let load = |s: &Source| -> Result<Option<ImpulseResponse>> {
            s.impulse_response
                .as_deref()
                .map(|p| load_impulse_response(p, rate, array.m()))
                .transpose()
        };
        let target_ir = load(&config.target)?;
        let interferer_irs = config.interferers.iter().map(load).collect::<Result<_>>()?;
        Ok(Self {
            array,
            config,
            stft,
            target_ir,
            interferer_irs,
        })
    }

    pub fn medium(&self) -> Medium {
        self.config.medium()
    }

    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }

    pub fn bin_freq(&self, bin: usize) -> f64 {
        self.stft.bin_freq(bin, self.config.sample_rate_hz)
    }

    fn atf_of(&self, source: &Source, ir: Option<&ImpulseResponse>, bin: usize) -> Result<AtfVector> {
        let f = self.bin_freq(bin);
        match ir {
            Some(ir) => ir.atf(f, self.config.sample_rate_hz, self.array.left_ref, self.array.right_ref),
            None => synth_atf(&self.array, source.azimuth_deg, f, &self.medium()),
        }
    }

    pub fn target_atf(&self, bin: usize) -> Result<AtfVector> {
        self.atf_of(&self.config.target, self.target_ir.as_ref(), bin)
    }

    pub fn interferer_atfs(&self, bin: usize) -> Result<Vec<AtfVector>> {
        self.config
            .interferers
            .iter()
            .zip(&self.interferer_irs)
            .map(|(s, ir)| self.atf_of(s, ir.as_ref(), bin))
            .collect()
    }

    /// True interferer RATFs at `bin`.
    pub fn interferer_ratfs(&self, bin: usize) -> Result<Vec<AtfVector>> {
        self.interferer_atfs(bin)?.iter().map(AtfVector::ratf).collect()
    }

    pub fn predetermined_ratfs(&self, bin: usize) -> Result<Vec<AtfVector>> {
        ratf_grid(&self.array, self.bin_freq(bin), &self.medium())
    }

    fn source_power(&self, source: &Source, bin: usize) -> f64 {
        self.stft.window_energy()
            * source.power_scale
            * source
                .signal
                .spectral_shape(self.bin_freq(bin), self.config.sample_rate_hz)
    }

    /// Variance of the white self-noise of each microphone.
    pub fn self_noise_variance(&self) -> Result<f64> {
        let Some(snr) = self.array.self_noise_snr_db else {
            return Ok(0.0);
        };
        let n = self.n_bins();
        let mut acc = 0.0;
        for k in 0..n {
            let a = self.target_atf(k)?;
            acc += self.config.target.power_scale
                * self
                    .config
                    .target
                    .signal
                    .spectral_shape(self.bin_freq(k), self.config.sample_rate_hz)
                * a.left().norm_sqr();
        }
        Ok(acc / n as f64 * 10f64.powf(-snr / 10.0))
    }

    pub fn target_cpsd(&self, bin: usize) -> Result<CrossPsd> {
        let a = self.target_atf(bin)?;
        Ok(CrossPsd {
            bin,
            matrix: HermitianMatrix::outer(a.values()).scale(self.source_power(&self.config.target, bin)),
            kind: PsdKind::Target,
        })
    }

    pub fn noisy_cpsd(&self, bin: usize) -> Result<CrossPsd> {
        let px = self.target_cpsd(bin)?;
        let pn = assemble_noise_cpsd(self, bin)?;
        Ok(CrossPsd {
            bin,
            matrix: px.matrix.add(&pn.matrix)?,
            kind: PsdKind::Noisy,
        })
    }
}

/// Model noise CPSD: interferers, diffuse field and self-noise.
pub fn assemble_noise_cpsd(scene: &Scene, bin: usize) -> Result<CrossPsd> {
    let m = scene.array.m();
    let mut acc = DMatrix::<C64>::zeros(m, m);
    for (src, b) in scene.config.interferers.iter().zip(scene.interferer_atfs(bin)?) {
        let p = scene.source_power(src, bin);
        acc += b.values() * b.values().adjoint() * C64::new(p, 0.0);
    }
    let w_energy = scene.stft.window_energy();
    if scene.config.diffuse_level > 0.0 {
        let gamma = coherence_matrix(&scene.array, scene.bin_freq(bin), scene.config.speed_of_sound);
        acc += gamma.matrix() * C64::new(scene.config.diffuse_level * w_energy, 0.0);
    }
    let p_self = scene.self_noise_variance()? * w_energy;
    for i in 0..m {
        acc[(i, i)] += C64::new(p_self, 0.0);
    }
    Ok(CrossPsd {
        bin,
        matrix: HermitianMatrix::symmetrized(acc),
        kind: PsdKind::Noise,
    })
}

#[derive(Debug, Clone)]
pub struct CpsdEstimate {
    pub psd: CrossPsd,
    pub condition_number: f64,
}

/// Sample mean of `y y^H` plus `loading * tr/M * I`.
pub fn estimate_cpsd_from_frames(
    bin: usize,
    kind: PsdKind,
    frames: &[DVector<C64>],
    loading: f64,
) -> Result<CpsdEstimate> {
    let Some(first) = frames.first() else {
        return Err(Error::InvalidArgument("no frames to estimate a CPSD from".into()));
    };
    if !(loading >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative diagonal loading {loading}")));
    }
    let m = first.len();
    let mut acc = DMatrix::<C64>::zeros(m, m);
    for y in frames {
        if y.len() != m {
            return Err(Error::Dimension(format!(
                "frame of length {} among length-{m} frames",
                y.len()
            )));
        }
        acc += y * y.adjoint();
    }
    acc /= C64::new(frames.len() as f64, 0.0);
    let tr: f64 = (0..m).map(|i| acc[(i, i)].re).sum();
    let load = loading * tr / m as f64;
    for i in 0..m {
        acc[(i, i)] += C64::new(load, 0.0);
    }
    let matrix = HermitianMatrix::symmetrized(acc);
    let vals = matrix.eigenvalues();
    let (lo, hi) = (vals[0], vals[m - 1]);
    let condition_number = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    Ok(CpsdEstimate {
        psd: CrossPsd { bin, matrix, kind },
        condition_number,
    })
}

/// STFT-domain microphone components of a synthesized scene.
#[derive(Debug, Clone)]
pub struct SceneSignals {
    /// Per microphone.
    pub target: Vec<StftGrid>,
    /// Per microphone: interferers, diffuse field and self-noise.
    pub noise: Vec<StftGrid>,
    /// Unit-variance target source signal (zero during the noise-only part).
    pub target_source: Vec<f64>,
    pub len: usize,
    pub noise_only_len: usize,
}

impl SceneSignals {
    /// Frames lying entirely inside the noise-only segment.
    pub fn noise_only_frames(&self, stft: &StftConfig) -> usize {
        stft.n_frames(self.noise_only_len)
    }

    /// Microphone snapshots of the noise at one bin over `frames`.
    pub fn noise_snapshots(&self, bin: usize, frames: std::ops::Range<usize>) -> Vec<DVector<C64>> {
        frames
            .map(|f| DVector::from_iterator(self.noise.len(), self.noise.iter().map(|g| g.get(f, bin))))
            .collect()
    }
}

/// Synthesizes the scene with per-bin multiplicative transfer functions.
pub fn synthesize_scene(scene: &Scene, seed: u64) -> Result<SceneSignals> {
    let cfg = &scene.config;
    let fs = cfg.sample_rate_hz;
    let noise_only_len = (cfg.noise_only_s * fs).round() as usize;
    let len = noise_only_len + (cfg.duration_s * fs).round() as usize;
    let m = scene.array.m();
    let n_bins = scene.n_bins();
    let stream = |id: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        rng
    };

    let mut target_source = vec![0.0; noise_only_len];
    let active = cfg.target.signal.generate(len - noise_only_len, fs, &mut stream(0))?;
    let tg = cfg.target.power_scale.sqrt();
    target_source.extend(active.iter().map(|v| v * tg));
    let s_grid = analyze(&target_source, &scene.stft)?;
    let n_frames = s_grid.n_frames();

    let target_atfs: Vec<AtfVector> = (0..n_bins).map(|k| scene.target_atf(k)).collect::<Result<_>>()?;
    let mut target = vec![StftGrid::zeros(n_frames, n_bins); m];
    add_point_source(&mut target, &s_grid, &target_atfs);

    let mut noise = vec![StftGrid::zeros(n_frames, n_bins); m];
    let per_bin_atfs: Vec<Vec<AtfVector>> = (0..n_bins).map(|k| scene.interferer_atfs(k)).collect::<Result<_>>()?;
    for (i, src) in cfg.interferers.iter().enumerate() {
        let sig = src.signal.generate(len, fs, &mut stream(1 + i as u64))?;
        let g = src.power_scale.sqrt();
        let scaled: Vec<f64> = sig.iter().map(|v| v * g).collect();
        let grid = analyze(&scaled, &scene.stft)?;
        let atfs: Vec<AtfVector> = per_bin_atfs.iter().map(|v| v[i].clone()).collect();
        add_point_source(&mut noise, &grid, &atfs);
    }

    if cfg.diffuse_level > 0.0 {
        let base: Vec<StftGrid> = (0..m)
            .map(|j| analyze(&white(len, &mut stream(1000 + j as u64)), &scene.stft))
            .collect::<Result<_>>()?;
        let gain = cfg.diffuse_level.sqrt();
        for k in 0..n_bins {
            let gamma = coherence_matrix(&scene.array, scene.bin_freq(k), cfg.speed_of_sound);
            let (vals, vecs) = gamma.eigen();
            let mix = DMatrix::from_fn(m, m, |r, c| vecs[(r, c)] * vals[c].max(0.0).sqrt() * gain);
            for f in 0..n_frames {
                for r in 0..m {
                    let mut acc = C64::new(0.0, 0.0);
                    for (c, b) in base.iter().enumerate() {
                        acc += mix[(r, c)] * b.get(f, k);
                    }
                    let cur = noise[r].get(f, k);
                    noise[r].set(f, k, cur + acc);
                }
            }
        }
    }

    let self_var = scene.self_noise_variance()?;
    if self_var > 0.0 {
        let g = self_var.sqrt();
        for (mic, grid) in noise.iter_mut().enumerate() {
            let sig: Vec<f64> = white(len, &mut stream(2000 + mic as u64))
                .iter()
                .map(|v| v * g)
                .collect();
            let sg = analyze(&sig, &scene.stft)?;
            for (dst, src) in grid.as_mut_slice().iter_mut().zip(sg.as_slice()) {
                *dst += src;
            }
        }
    }

    Ok(SceneSignals {
        target,
        noise,
        target_source,
        len,
        noise_only_len,
    })
}

fn add_point_source(mics: &mut [StftGrid], source: &StftGrid, atfs: &[AtfVector]) {
    for (mic, grid) in mics.iter_mut().enumerate() {
        for f in 0..source.n_frames() {
            let src = source.frame(f);
            let dst = grid.frame_mut(f);
            for (k, a) in atfs.iter().enumerate() {
                dst[k] += a.values()[mic] * src[k];
            }
        }
    }
}
