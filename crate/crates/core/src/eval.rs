//! Instrumental metrics: segmental SNR, frequency-averaged ITF, ILD and IPD
//! errors, and their CSV form.

use std::io::Write;

use serde::Serialize;

use crate::beamformer::{itf_in, itf_out, BinFilter, Method};
use crate::error::{Error, Result};
use crate::hermitian::C64;
use crate::scene::AtfVector;

pub const SSNR_FLOOR_DB: f64 = -10.0;
pub const SSNR_CEIL_DB: f64 = 35.0;
/// Frames whose target energy is within this range of the loudest frame
/// count as target-present.
pub const ACTIVITY_RANGE_DB: f64 = 40.0;
pub const ILD_BAND_HZ: (f64, f64) = (3000.0, 8000.0);
pub const IPD_BAND_HZ: (f64, f64) = (0.0, 1500.0);

fn frame_energies(signal: &[f64], frame_len: usize) -> Vec<f64> {
    signal
        .chunks_exact(frame_len)
        .map(|f| f.iter().map(|v| v * v).sum())
        .collect()
}

/// Ideal target-activity mask over non-overlapping frames of `frame_len`.
pub fn activity_mask(target: &[f64], frame_len: usize) -> Result<Vec<bool>> {
    if frame_len == 0 {
        return Err(Error::InvalidArgument("frame length must be positive".into()));
    }
    let e = frame_energies(target, frame_len);
    let max = e.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(vec![false; e.len()]);
    }
    let thr = max * 10f64.powf(-ACTIVITY_RANGE_DB / 10.0);
    Ok(e.iter().map(|&v| v > thr).collect())
}

/// Mean over marked frames of the clamped per-frame SNR.
pub fn ssnr(target: &[f64], noise: &[f64], mask: &[bool], frame_len: usize) -> Result<f64> {
    if target.len() != noise.len() {
        return Err(Error::Dimension(format!(
            "target has {} samples, noise {}",
            target.len(),
            noise.len()
        )));
    }
    if frame_len == 0 {
        return Err(Error::InvalidArgument("frame length must be positive".into()));
    }
    let et = frame_energies(target, frame_len);
    let en = frame_energies(noise, frame_len);
    if mask.len() != et.len() {
        return Err(Error::Dimension(format!(
            "mask has {} frames, signals {}",
            mask.len(),
            et.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&x, &n), _) in et.iter().zip(&en).zip(mask).filter(|(_, &m)| m) {
        let db = if n > 0.0 && x > 0.0 {
            10.0 * (x / n).log10()
        } else if n > 0.0 {
            SSNR_FLOOR_DB
        } else {
            SSNR_CEIL_DB
        };
        sum += db.clamp(SSNR_FLOOR_DB, SSNR_CEIL_DB);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "SSNR undefined: no target-present frames".into(),
        ));
    }
    Ok(sum / count as f64)
}

fn itf_pair(w: &BinFilter, b: &AtfVector) -> Option<(C64, C64)> {
    let out = itf_out(w, b)?;
    let inp = itf_in(b)?;
    (out.norm() > 0.0 && inp.norm() > 0.0).then_some((out, inp))
}

/// `|20 log10 |ITF_out| - 20 log10 |ITF_in||` in dB.
pub fn ild_error_bin(w: &BinFilter, b: &AtfVector) -> Option<f64> {
    let (out, inp) = itf_pair(w, b)?;
    Some((20.0 * out.norm().log10() - 20.0 * inp.norm().log10()).abs())
}

/// Wrapped phase difference of output and input ITF, in `[0, pi]`.
pub fn ipd_error_bin(w: &BinFilter, b: &AtfVector) -> Option<f64> {
    let (out, inp) = itf_pair(w, b)?;
    Some(wrap_phase(out.arg() - inp.arg()).abs())
}

/// Wraps to `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    use std::f64::consts::PI;
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// Mean of the defined per-bin values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Averaged {
    pub value: f64,
    pub bins_used: usize,
    pub bins_excluded: usize,
}

impl Averaged {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut sum = 0.0;
        let mut used = 0;
        let mut excluded = 0;
        for v in values {
            match v {
                Some(x) if x.is_finite() => {
                    sum += x;
                    used += 1;
                }
                _ => excluded += 1,
            }
        }
        Self {
            value: if used > 0 { sum / used as f64 } else { f64::NAN },
            bins_used: used,
            bins_excluded: excluded,
        }
    }
}

/// Bins whose center frequency lies in `[lo, hi]`.
pub fn band_bins(freqs: &[f64], band: (f64, f64)) -> Vec<usize> {
    freqs
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= band.0 && f <= band.1)
        .map(|(k, _)| k)
        .collect()
}

fn check_lengths(filters: &[BinFilter], b: &[AtfVector]) -> Result<()> {
    if filters.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{} filters for {} ATFs",
            filters.len(),
            b.len()
        )));
    }
    Ok(())
}

/// ILD error averaged over the bins of `freqs` inside the ILD band.
pub fn ild_error(filters: &[BinFilter], b: &[AtfVector], freqs: &[f64]) -> Result<Averaged> {
    check_lengths(filters, b)?;
    let bins = band_bins(freqs, ILD_BAND_HZ);
    Ok(Averaged::of(bins.iter().map(|&k| ild_error_bin(&filters[k], &b[k]))))
}

/// IPD error averaged over the bins of `freqs` inside the IPD band.
pub fn ipd_error(filters: &[BinFilter], b: &[AtfVector], freqs: &[f64]) -> Result<Averaged> {
    check_lengths(filters, b)?;
    let bins = band_bins(freqs, IPD_BAND_HZ);
    Ok(Averaged::of(bins.iter().map(|&k| ipd_error_bin(&filters[k], &b[k]))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ItfAverage {
    pub error: Averaged,
    /// `c` times the averaged BMVDR error.
    pub bound: f64,
}

/// Frequency-averaged ITF error of `filters` for one source, with the bound
/// from the per-bin BMVDR errors.
pub fn avg_itf_error(filters: &[BinFilter], b: &[AtfVector], bmvdr_errors: &[f64], c: f64) -> Result<ItfAverage> {
    check_lengths(filters, b)?;
    if bmvdr_errors.len() != b.len() {
        return Err(Error::Dimension("one BMVDR error per bin expected".into()));
    }
    let error = Averaged::of(
        filters
            .iter()
            .zip(b)
            .map(|(w, b)| Some(crate::beamformer::itf_error(w, b))),
    );
    let bm = Averaged::of(bmvdr_errors.iter().map(|&e| Some(e)));
    Ok(ItfAverage {
        error,
        bound: c * bm.value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterfererMetrics {
    pub index: usize,
    pub azimuth_deg: f64,
    pub avg_itf_error: f64,
    pub avg_itf_bound: f64,
    pub avg_ild_error_db: f64,
    pub avg_ipd_error_rad: f64,
    /// Bins left out of any of the three averages.
    pub excluded_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub method: Method,
    pub c: f64,
    pub ssnr_left_db: f64,
    pub ssnr_right_db: f64,
    pub interferers: Vec<InterfererMetrics>,
    pub total_convex_solves: usize,
}

/// Shortest round-trip decimal form, with an exponent for very small or
/// large magnitudes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Header `method,c,metric,source,value`; one row per value.
pub fn write_metrics_csv<W: Write>(reports: &[MetricReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::InvalidArgument(format!("CSV write failed: {e}"));
    w.write_record(["method", "c", "metric", "source", "value"])
        .map_err(io)?;
    for r in reports {
        let method = r.method.name();
        let c = num(r.c);
        let mut row = |metric: &str, source: &str, value: String| {
            w.write_record([method, c.as_str(), metric, source, value.as_str()])
        };
        row("ssnr_db", "left", num(r.ssnr_left_db)).map_err(io)?;
        row("ssnr_db", "right", num(r.ssnr_right_db)).map_err(io)?;
        for i in &r.interferers {
            let src = format!("interferer_{}", i.index + 1);
            row("avg_itf_error", &src, num(i.avg_itf_error)).map_err(io)?;
            row("avg_itf_bound", &src, num(i.avg_itf_bound)).map_err(io)?;
            row("avg_ild_error_db", &src, num(i.avg_ild_error_db)).map_err(io)?;
            row("avg_ipd_error_rad", &src, num(i.avg_ipd_error_rad)).map_err(io)?;
        }
        row("total_convex_solves", "all", r.total_convex_solves.to_string()).map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidArgument(format!("CSV flush failed: {e}")))
}
