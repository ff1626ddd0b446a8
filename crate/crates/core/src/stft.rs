//! Short-time Fourier analysis and overlap-add synthesis with square-root
//! Hann windows at 50% overlap.
//!
//! Frames are zero-padded at the tail up to `fft_size`. With the default
//! configuration (160-sample frames, hop 80, FFT 256) the squared window
//! overlap-adds to exactly one, so `synthesize(analyze(x))` reproduces `x`
//! away from the first and last half frame.
//!
//! Energy: for each frame, the sum of `|X[k]|^2` over all `fft_size` bins
//! equals `fft_size` times the windowed frame energy (Parseval). Summed over
//! frames in steady state the windowed energy equals the signal energy.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hermitian::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 160,
            hop: 80,
            fft_size: 256,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || !self.frame_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "frame length {} must be even and positive",
                self.frame_len
            )));
        }
        if self.hop * 2 != self.frame_len {
            return Err(Error::Config(format!(
                "hop {} must be half the frame length {}",
                self.hop, self.frame_len
            )));
        }
        if self.fft_size < self.frame_len {
            return Err(Error::Config(format!(
                "FFT size {} is smaller than the frame length {}",
                self.fft_size, self.frame_len
            )));
        }
        Ok(())
    }

    /// Number of stored bins, `0..=fft_size/2`.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    /// Center frequency of `bin` in Hz.
    pub fn bin_freq(&self, bin: usize, sample_rate_hz: f64) -> f64 {
        bin as f64 * sample_rate_hz / self.fft_size as f64
    }

    /// Square-root periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        (0..self.frame_len)
            .map(|i| (0.5 * (1.0 - (2.0 * PI * i as f64 / n).cos())).sqrt())
            .collect()
    }

    /// `sum w[n]^2` over one frame; the expected `|X[k]|^2` of unit-variance
    /// white noise.
    pub fn window_energy(&self) -> f64 {
        self.window().iter().map(|w| w * w).sum()
    }

    /// Length of the signal covered by `n_frames` frames.
    pub fn covered_len(&self, n_frames: usize) -> usize {
        if n_frames == 0 {
            0
        } else {
            (n_frames - 1) * self.hop + self.frame_len
        }
    }
}

/// Time-frequency coefficients, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StftGrid {
    n_frames: usize,
    n_bins: usize,
    data: Vec<C64>,
}

impl StftGrid {
    pub fn zeros(n_frames: usize, n_bins: usize) -> Self {
        Self {
            n_frames,
            n_bins,
            data: vec![C64::new(0.0, 0.0); n_frames * n_bins],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn get(&self, frame: usize, bin: usize) -> C64 {
        self.data[frame * self.n_bins + bin]
    }

    pub fn set(&mut self, frame: usize, bin: usize, v: C64) {
        self.data[frame * self.n_bins + bin] = v;
    }

    pub fn frame(&self, frame: usize) -> &[C64] {
        &self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    pub fn frame_mut(&mut self, frame: usize) -> &mut [C64] {
        &mut self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    /// All frames of one bin.
    pub fn bin(&self, bin: usize) -> Vec<C64> {
        (0..self.n_frames).map(|f| self.get(f, bin)).collect()
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_frames == other.n_frames && self.n_bins == other.n_bins
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

pub fn analyze(signal: &[f64], cfg: &StftConfig) -> Result<StftGrid> {
    cfg.validate()?;
    if signal.len() < cfg.frame_len {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            frame_len: cfg.frame_len,
        });
    }
    let n_frames = cfg.n_frames(signal.len());
    let n_bins = cfg.n_bins();
    let window = cfg.window();
    let fft = plans(cfg.fft_size).forward;
    let mut grid = StftGrid::zeros(n_frames, n_bins);
    let mut buf = vec![C64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..n_frames {
        let start = f * cfg.hop;
        buf.fill(C64::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            buf[i] = C64::new(w * signal[start + i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        grid.frame_mut(f).copy_from_slice(&buf[..n_bins]);
    }
    Ok(grid)
}

/// Overlap-add synthesis; output length is `cfg.covered_len(n_frames)`.
///
/// The missing upper half of each spectrum is taken as the conjugate mirror,
/// so imaginary parts at bin 0 and at Nyquist are ignored.
pub fn synthesize(grid: &StftGrid, cfg: &StftConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if grid.n_bins() != cfg.n_bins() {
        return Err(Error::Dimension(format!(
            "grid has {} bins, configuration expects {}",
            grid.n_bins(),
            cfg.n_bins()
        )));
    }
    let n = cfg.fft_size;
    let window = cfg.window();
    let ifft = plans(n).inverse;
    let mut out = vec![0.0; cfg.covered_len(grid.n_frames())];
    let mut buf = vec![C64::new(0.0, 0.0); n];
    let mut scratch = vec![C64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let half = n / 2;
    for f in 0..grid.n_frames() {
        let frame = grid.frame(f);
        buf[0] = C64::new(frame[0].re, 0.0);
        for k in 1..half {
            buf[k] = frame[k];
            buf[n - k] = frame[k].conj();
        }
        if n.is_multiple_of(2) {
            buf[half] = C64::new(frame[half].re, 0.0);
        } else {
            buf[half] = frame[half];
            buf[n - half] = frame[half].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = f * cfg.hop;
        for (i, w) in window.iter().enumerate() {
            out[start + i] += w * buf[i].re / n as f64;
        }
    }
    Ok(out)
}

/// Synthesizes and zero-pads (or truncates) to `len` samples.
pub fn synthesize_to_len(grid: &StftGrid, cfg: &StftConfig, len: usize) -> Result<Vec<f64>> {
    let mut out = synthesize(grid, cfg)?;
    out.resize(len, 0.0);
    Ok(out)
}

/// Maximum deviation of `sum_k w^2[n - k hop]` from one over a steady-state
/// period.
pub fn cola_deviation(cfg: &StftConfig) -> f64 {
    let w = cfg.window();
    (0..cfg.hop)
        .map(|n| {
            let s: f64 = (0..cfg.frame_len / cfg.hop)
                .map(|k| {
                    let v = w[n + k * cfg.hop];
                    v * v
                })
                .sum();
            (s - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn frame_count() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_frames(80_000), 999);
        assert_eq!(cfg.n_frames(159), 0);
        assert_eq!(cfg.n_frames(160), 1);
        assert_eq!(cfg.n_bins(), 129);
    }

    #[test]
    fn cola_holds() {
        assert!(cola_deviation(&StftConfig::default()) < 1e-12);
    }

    #[test]
    fn zero_signal_gives_zero_grid() {
        let grid = analyze(&[0.0; 1000], &StftConfig::default()).unwrap();
        assert!(grid.as_slice().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn short_signal_rejected() {
        assert!(matches!(
            analyze(&[0.0; 100], &StftConfig::default()),
            Err(Error::SignalTooShort { .. })
        ));
    }

    #[test]
    fn tone_energy_concentrates_at_its_bin() {
        let cfg = StftConfig::default();
        let fs = 16_000.0;
        let bin = 20;
        let f0 = cfg.bin_freq(bin, fs);
        let x: Vec<f64> = (0..4000).map(|n| (2.0 * PI * f0 * n as f64 / fs).sin()).collect();
        let grid = analyze(&x, &cfg).unwrap();
        // The 160-sample sine window has a main lobe of +-2.4 bins on the
        // 256-point grid.
        for f in 0..grid.n_frames() {
            let frame = grid.frame(f);
            let energy = |r: std::ops::RangeInclusive<usize>| -> f64 { frame[r].iter().map(|z| z.norm_sqr()).sum() };
            let total = energy(0..=frame.len() - 1);
            let peak = (0..frame.len())
                .max_by(|&a, &b| frame[a].norm().total_cmp(&frame[b].norm()))
                .unwrap();
            assert_eq!(peak, bin);
            assert!(energy(bin - 1..=bin + 1) / total > 0.97, "frame {f}");
            assert!(energy(bin - 2..=bin + 2) / total > 0.99, "frame {f}");
        }
    }

    #[test]
    fn round_trip_interior() {
        let cfg = StftConfig::default();
        let x = random_signal(16_000, 7);
        let y = synthesize(&analyze(&x, &cfg).unwrap(), &cfg).unwrap();
        let lo = cfg.frame_len / 2;
        let hi = y.len() - cfg.frame_len / 2;
        let err: f64 = (lo..hi).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>().sqrt();
        let nrm: f64 = (lo..hi).map(|i| x[i].powi(2)).sum::<f64>().sqrt();
        assert!(err / nrm < 1e-10, "{}", err / nrm);
    }

    #[test]
    fn constant_round_trips_in_steady_state() {
        let cfg = StftConfig::default();
        let x = vec![0.25; 2000];
        let y = synthesize(&analyze(&x, &cfg).unwrap(), &cfg).unwrap();
        for v in &y[cfg.hop..y.len() - cfg.hop] {
            assert_relative_eq!(*v, 0.25, epsilon = 1e-14);
        }
    }

    #[test]
    fn single_frame_is_window_squared() {
        let cfg = StftConfig::default();
        let x = random_signal(cfg.frame_len, 3);
        let y = synthesize(&analyze(&x, &cfg).unwrap(), &cfg).unwrap();
        for ((xi, yi), wi) in x.iter().zip(&y).zip(cfg.window()) {
            assert_relative_eq!(*yi, wi * wi * xi, epsilon = 1e-14);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let x = random_signal(cfg.frame_len, 11);
        let grid = analyze(&x, &cfg).unwrap();
        let half = grid.frame(0);
        let n = cfg.fft_size;
        let full: f64 = half[0].norm_sqr()
            + half[n / 2].norm_sqr()
            + 2.0 * half[1..n / 2].iter().map(|z| z.norm_sqr()).sum::<f64>();
        let windowed: f64 = x.iter().zip(cfg.window()).map(|(a, w)| (a * w).powi(2)).sum();
        assert_relative_eq!(full, n as f64 * windowed, max_relative = 1e-12);
    }

    #[test]
    fn mismatched_grid_rejected() {
        let grid = StftGrid::zeros(3, 10);
        assert!(synthesize(&grid, &StftConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn analysis_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let cfg = StftConfig::default();
            let x = random_signal(800, seed);
            let y = random_signal(800, seed + 5000);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let gx = analyze(&x, &cfg).unwrap();
            let gy = analyze(&y, &cfg).unwrap();
            let gm = analyze(&mix, &cfg).unwrap();
            for i in 0..gm.as_slice().len() {
                let expect = gx.as_slice()[i] * alpha + gy.as_slice()[i] * beta;
                prop_assert!((gm.as_slice()[i] - expect).norm() < 1e-12);
            }
        }

        #[test]
        fn conjugate_symmetric_full_spectrum(seed in 0u64..1000) {
            // Bin 0 and Nyquist of a real frame are real.
            let cfg = StftConfig::default();
            let grid = analyze(&random_signal(400, seed), &cfg).unwrap();
            for f in 0..grid.n_frames() {
                prop_assert!(grid.get(f, 0).im.abs() < 1e-12);
                prop_assert!(grid.get(f, cfg.fft_size / 2).im.abs() < 1e-12);
            }
        }
    }
}
