//! Dominant-frequency detection and analysis-window selection.

use std::ops::Range;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{self, BandpassSpec};
use crate::ingest::ChannelSet;

/// One-sided amplitude spectrum of a Hann-tapered record.
///
/// `mags[k]` is scaled so that a sinusoid of amplitude `A` centred on bin
/// `k` reads approximately `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub mags: Vec<f64>,
    /// Sum of the taper weights, needed to undo the amplitude scaling.
    pub window_sum: f64,
    /// Length of the transformed record.
    pub n: usize,
}

impl Spectrum {
    pub fn bin_width(&self) -> f64 {
        if self.freqs.len() > 1 {
            self.freqs[1]
        } else {
            0.0
        }
    }

    /// The bins at or below `f_max`.
    pub fn band_limited(&self, f_max: f64) -> Spectrum {
        let keep = self
            .freqs
            .iter()
            .take_while(|&&f| f <= f_max)
            .count()
            .max(3.min(self.freqs.len()));
        Spectrum {
            freqs: self.freqs[..keep].to_vec(),
            mags: self.mags[..keep].to_vec(),
            window_sum: self.window_sum,
            n: self.n,
        }
    }

    /// Writes `freq_hz,magnitude` rows.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["freq_hz", "magnitude"])?;
        for (f, m) in self.freqs.iter().zip(&self.mags) {
            w.write_record([f.to_string(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Factor applied to `|X_k|` in bin `k`: one-sided doubling except at DC
    /// and (for even lengths) the Nyquist bin.
    pub fn bin_scale(&self, k: usize) -> f64 {
        let doubled = k != 0 && !(self.n.is_multiple_of(2) && k == self.n / 2);
        if doubled {
            2.0 / self.window_sum
        } else {
            1.0 / self.window_sum
        }
    }
}

/// Periodic Hann taper.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect()
}

pub fn spectrum(x: &[f64], dt: f64) -> Result<Spectrum> {
    let n = x.len();
    if n < 8 {
        return Err(Error::InsufficientData(format!(
            "spectrum needs at least 8 samples, got {n}"
        )));
    }
    let w = hann(n);
    let window_sum: f64 = w.iter().sum();
    let mut buf: Vec<Complex64> = x.iter().zip(&w).map(|(v, w)| Complex64::new(v * w, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let mut out = Spectrum {
        freqs: (0..=half).map(|k| k as f64 / (n as f64 * dt)).collect(),
        mags: Vec::with_capacity(half + 1),
        window_sum,
        n,
    };
    for (k, c) in buf.iter().take(half + 1).enumerate() {
        let m = c.norm() * out.bin_scale(k);
        out.mags.push(m);
    }
    Ok(out)
}

/// Per-bin maximum of the channel spectra.
pub fn aggregate_spectrum(cs: &ChannelSet) -> Result<Spectrum> {
    let mut agg: Option<Spectrum> = None;
    for ch in cs.channels() {
        let s = spectrum(&ch.samples, cs.dt())?;
        agg = Some(match agg {
            None => s,
            Some(mut a) => {
                for (m, v) in a.mags.iter_mut().zip(&s.mags) {
                    *m = m.max(*v);
                }
                a
            }
        });
    }
    agg.ok_or_else(|| Error::DataQuality("no channels".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCandidate {
    pub f_s: f64,
    pub amplitude: f64,
    pub window: (f64, f64),
    pub harmonic_of: Option<f64>,
}

impl ModeCandidate {
    pub fn is_dominant(&self) -> bool {
        self.harmonic_of.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeakOptions {
    /// Fraction of the global spectral maximum a peak must reach.
    pub threshold_rel: f64,
    /// Minimum ratio of a peak to the median of the aggregated spectrum.
    pub floor_ratio: f64,
    /// Relative tolerance for recognizing integer harmonics.
    pub harmonic_tol: f64,
}

impl Default for PeakOptions {
    fn default() -> Self {
        Self {
            threshold_rel: 0.3,
            floor_ratio: 5.0,
            harmonic_tol: 0.02,
        }
    }
}

fn refine_peak(m: &[f64], k: usize) -> f64 {
    let (a, b, c) = (m[k - 1], m[k], m[k + 1]);
    let (a, b, c) = if a > 0.0 && b > 0.0 && c > 0.0 {
        (a.ln(), b.ln(), c.ln())
    } else {
        (a, b, c)
    };
    let denom = a - 2.0 * b + c;
    if denom.abs() < f64::MIN_POSITIVE {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Significant spectral peaks of an aggregated spectrum.
pub fn peaks(spec: &Spectrum, opts: &PeakOptions, window: (f64, f64)) -> Result<Vec<ModeCandidate>> {
    if !(opts.threshold_rel > 0.0 && opts.threshold_rel <= 1.0) {
        return Err(Error::Config(format!(
            "threshold_rel must lie in (0, 1], got {}",
            opts.threshold_rel
        )));
    }
    let m = &spec.mags;
    let last = m.len() - 1;
    let global = m[1..].iter().fold(0.0f64, |a, &b| a.max(b));
    if global <= 0.0 {
        return Ok(Vec::new());
    }
    let floor = opts.floor_ratio * median(&m[1..]);
    let df = spec.bin_width();

    let mut found: Vec<ModeCandidate> = Vec::new();
    for k in 1..last {
        let v = m[k];
        if !(v > m[k - 1] && v >= m[k + 1]) || v < opts.threshold_rel * global || v <= floor {
            continue;
        }
        let f = (k as f64 + refine_peak(m, k)) * df;
        found.push(ModeCandidate {
            f_s: f,
            amplitude: v,
            window,
            harmonic_of: None,
        });
    }

    // merge peaks that ended up closer than one bin after refinement
    found.sort_by(|a, b| a.f_s.total_cmp(&b.f_s));
    let mut merged: Vec<ModeCandidate> = Vec::with_capacity(found.len());
    for c in found {
        match merged.last_mut() {
            Some(prev) if c.f_s - prev.f_s < df => {
                if c.amplitude > prev.amplitude {
                    *prev = c;
                }
            }
            _ => merged.push(c),
        }
    }

    for i in 0..merged.len() {
        let f = merged[i].f_s;
        let root = merged[..i].iter().filter(|c| c.is_dominant()).find_map(|c| {
            let n = (f / c.f_s).round();
            (n >= 2.0 && (f - n * c.f_s).abs() <= opts.harmonic_tol * n * c.f_s).then_some(c.f_s)
        });
        merged[i].harmonic_of = root;
    }

    merged.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude).then(a.f_s.total_cmp(&b.f_s)));
    Ok(merged)
}

/// Dominant oscillation frequencies across all channels, ordered by
/// descending amplitude. Harmonics of a lower detected peak are kept but
/// flagged through `harmonic_of`.
pub fn dominant_modes(cs: &ChannelSet, threshold_rel: f64) -> Result<Vec<ModeCandidate>> {
    dominant_modes_with(
        cs,
        &PeakOptions {
            threshold_rel,
            ..PeakOptions::default()
        },
    )
}

pub fn dominant_modes_with(cs: &ChannelSet, opts: &PeakOptions) -> Result<Vec<ModeCandidate>> {
    let spec = aggregate_spectrum(cs)?;
    peaks(&spec, opts, (cs.t0(), cs.t_end()))
}

/// Sample indices covered by a `(start_s, end_s)` window, end inclusive.
pub fn window_range(cs: &ChannelSet, window: (f64, f64)) -> Range<usize> {
    let eps = 1e-6;
    let start = ((window.0 - cs.t0()) / cs.dt() - eps).ceil().max(0.0) as usize;
    let end = ((window.1 - cs.t0()) / cs.dt() + eps).floor() as usize + 1;
    start.min(cs.len())..end.min(cs.len())
}

/// Chooses the analysis window.
///
/// A valid requested window is returned as given. Otherwise the window spans
/// `max_cycles` periods of the lowest dominant frequency (or the whole
/// record, if shorter) and is placed where the band-limited energy of the
/// strongest mode is largest.
pub fn select_window(
    cs: &ChannelSet,
    modes: &[ModeCandidate],
    requested: Option<(f64, f64)>,
    max_cycles: f64,
) -> Result<(f64, f64)> {
    let dominant: Vec<&ModeCandidate> = modes.iter().filter(|m| m.is_dominant()).collect();
    let Some(strongest) = dominant.first() else {
        return Err(Error::Config("window selection needs at least one mode".into()));
    };
    let f_min = dominant.iter().map(|m| m.f_s).fold(f64::INFINITY, f64::min);
    let need = 5.0 / f_min;
    if cs.duration() + 1e-9 < need {
        return Err(Error::InsufficientData(format!(
            "{:.3} s of data is shorter than 5 cycles of {f_min:.4} Hz ({need:.3} s)",
            cs.duration()
        )));
    }

    if let Some((a, b)) = requested {
        let slack = 0.5 * cs.dt();
        if !(a < b && a >= cs.t0() - slack && b <= cs.t_end() + slack) {
            return Err(Error::Config(format!(
                "requested window [{a}, {b}] s is not inside the data [{}, {}] s",
                cs.t0(),
                cs.t_end()
            )));
        }
        if b - a + 1e-9 < need {
            return Err(Error::InsufficientData(format!(
                "requested window of {:.3} s is shorter than 5 cycles of {f_min:.4} Hz ({need:.3} s)",
                b - a
            )));
        }
        return Ok((a, b));
    }

    let n = cs.len();
    let span = (max_cycles.max(5.0) / f_min).max(need);
    let m = ((span / cs.dt()).ceil() as usize + 1).min(n);
    if m == n {
        return Ok((cs.t0(), cs.t_end()));
    }

    let spec = BandpassSpec::new(strongest.f_s);
    let energy: Vec<f64> = match filter::design_butterworth_bandpass(&spec, cs.dt()) {
        Ok(coeffs) if n > coeffs.pad_len() => {
            let mut e = vec![0.0; n];
            for ch in cs.channels() {
                let y = filter::filtfilt(&ch.samples, &coeffs)?;
                for (acc, v) in e.iter_mut().zip(y) {
                    *acc += v * v;
                }
            }
            e
        }
        _ => (0..n)
            .map(|k| cs.channels().iter().map(|c| c.samples[k].powi(2)).sum())
            .collect(),
    };
    let mut sum: f64 = energy[..m].iter().sum();
    let (mut best, mut best_start) = (sum, 0);
    for start in 1..=n - m {
        sum += energy[start + m - 1] - energy[start - 1];
        if sum > best * (1.0 + 1e-12) {
            best = sum;
            best_start = start;
        }
    }
    Ok((cs.time(best_start), cs.time(best_start + m - 1)))
}
