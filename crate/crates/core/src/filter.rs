//! Butterworth filter design and zero-phase filtering.
//!
//! Filters are designed from the analog Butterworth prototype, mapped to the
//! desired band in the analog domain, and discretized with the bilinear
//! transform using prewarped edge frequencies. Coefficients are kept as a
//! cascade of second-order sections.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Direct-form-II-transposed biquad, `a[0]` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, zinv: Complex64) -> Complex64 {
        let z2 = zinv * zinv;
        (self.b[0] + zinv * self.b[1] + z2 * self.b[2]) / (self.a[0] + zinv * self.a[1] + z2 * self.a[2])
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub sections: Vec<Biquad>,
    pub n_poles: usize,
}

impl FilterCoefficients {
    /// Complex frequency response at `freq_hz` for sampling interval `dt`.
    pub fn response(&self, freq_hz: f64, dt: f64) -> Complex64 {
        let zinv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz * dt);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |h, s| h * s.response(zinv))
    }

    pub fn magnitude(&self, freq_hz: f64, dt: f64) -> f64 {
        self.response(freq_hz, dt).norm()
    }

    /// Samples of odd reflection added at each end by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * self.n_poles
    }
}

/// Band definition for isolating one dominant frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub f_s: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub order: usize,
    pub retain_frac: f64,
}

impl BandpassSpec {
    pub fn new(f_s: f64) -> Self {
        Self {
            f_s,
            ratio_lo: 0.9,
            ratio_hi: 1.1,
            order: 4,
            retain_frac: 0.65,
        }
    }

    pub fn f_lo(&self) -> f64 {
        self.ratio_lo * self.f_s
    }

    pub fn f_hi(&self) -> f64 {
        self.ratio_hi * self.f_s
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        let nyq = 0.5 / dt;
        if !(self.f_s.is_finite() && self.f_s > 0.0) {
            return Err(Error::Config(format!("mode frequency must be > 0, got {}", self.f_s)));
        }
        if !(self.f_lo() > 0.0 && self.f_lo() < self.f_hi()) {
            return Err(Error::Config(format!(
                "bandpass edges must satisfy 0 < f_lo < f_hi, got [{}, {}] Hz",
                self.f_lo(),
                self.f_hi()
            )));
        }
        if self.f_hi() >= nyq {
            return Err(Error::Config(format!(
                "upper band edge {:.4} Hz is at or above Nyquist {:.4} Hz; use a higher sampling rate or a narrower band",
                self.f_hi(),
                nyq
            )));
        }
        if self.order == 0 || self.order > 12 {
            return Err(Error::Config(format!(
                "filter order must be in 1..=12, got {}",
                self.order
            )));
        }
        if !(0.5..=0.8).contains(&self.retain_frac) {
            return Err(Error::Config(format!(
                "retain fraction must be in [0.5, 0.8], got {}",
                self.retain_frac
            )));
        }
        Ok(())
    }
}

fn prewarp(f: f64, dt: f64) -> f64 {
    2.0 / dt * (PI * f * dt).tan()
}

fn bilinear(s: Complex64, dt: f64) -> Complex64 {
    let k = 2.0 / dt;
    (k + s) / (k - s)
}

/// Normalized analog Butterworth poles, all in the left half plane.
fn prototype_poles(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

/// Groups digital poles into conjugate pairs (and leftover reals) and pairs
/// each group with zeros taken in order from `zeros`.
fn to_sections(poles: &[Complex64], zeros: &[f64]) -> Vec<Biquad> {
    let tol = 1e-10;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > tol).collect();
    let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= tol).map(|p| p.re).collect();
    // poles farthest from the unit circle first
    complex.sort_by(|a, b| b.norm().total_cmp(&a.norm()).reverse());
    real.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut zeros = zeros.iter().copied();
    let mut out = Vec::new();
    for p in complex {
        let (z1, z2) = (zeros.next().unwrap_or(0.0), zeros.next().unwrap_or(0.0));
        out.push(Biquad {
            b: [1.0, -(z1 + z2), z1 * z2],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        });
    }
    for pair in real.chunks(2) {
        match *pair {
            [p1, p2] => {
                let (z1, z2) = (zeros.next().unwrap_or(0.0), zeros.next().unwrap_or(0.0));
                out.push(Biquad {
                    b: [1.0, -(z1 + z2), z1 * z2],
                    a: [1.0, -(p1 + p2), p1 * p2],
                });
            }
            [p] => {
                let z = zeros.next().unwrap_or(0.0);
                out.push(Biquad {
                    b: [1.0, -z, 0.0],
                    a: [1.0, -p, 0.0],
                });
            }
            _ => unreachable!(),
        }
    }
    out
}

fn normalize_gain(sections: &mut [Biquad], reference_gain: f64) {
    let per_section = reference_gain.powf(-1.0 / sections.len() as f64);
    for s in sections.iter_mut() {
        for b in s.b.iter_mut() {
            *b *= per_section;
        }
    }
}

/// Butterworth bandpass over `[f_lo, f_hi]`: `order` analog prototype poles
/// become `2 * order` discrete poles.
pub fn design_butterworth_bandpass(spec: &BandpassSpec, dt: f64) -> Result<FilterCoefficients> {
    spec.validate(dt)?;
    let w_lo = prewarp(spec.f_lo(), dt);
    let w_hi = prewarp(spec.f_hi(), dt);
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;
    let mut poles = Vec::with_capacity(2 * spec.order);
    for p in prototype_poles(spec.order) {
        // roots of s^2 - p*bw*s + w0^2 = 0
        let half = p * bw / 2.0;
        let disc = (half * half - w0_sq).sqrt();
        poles.push(bilinear(half + disc, dt));
        poles.push(bilinear(half - disc, dt));
    }
    // analog zeros at s = 0 map to z = 1, those at infinity to z = -1
    let zeros: Vec<f64> = (0..2 * spec.order)
        .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let mut sections = to_sections(&poles, &zeros);
    let center_hz = (w0_sq.sqrt() * dt / 2.0).atan() / (PI * dt);
    let mut coeffs = FilterCoefficients {
        sections: sections.clone(),
        n_poles: 2 * spec.order,
    };
    normalize_gain(&mut sections, coeffs.magnitude(center_hz, dt));
    coeffs.sections = sections;
    Ok(coeffs)
}

/// Butterworth low-pass with unit DC gain.
pub fn design_butterworth_lowpass(f_cut: f64, order: usize, dt: f64) -> Result<FilterCoefficients> {
    let nyq = 0.5 / dt;
    if !(f_cut > 0.0 && f_cut < nyq) {
        return Err(Error::Config(format!(
            "low-pass cut-off must lie in (0, {nyq}) Hz, got {f_cut}"
        )));
    }
    if order == 0 || order > 12 {
        return Err(Error::Config(format!("filter order must be in 1..=12, got {order}")));
    }
    let wc = prewarp(f_cut, dt);
    let poles: Vec<Complex64> = prototype_poles(order)
        .into_iter()
        .map(|p| bilinear(p * wc, dt))
        .collect();
    let mut sections = to_sections(&poles, &vec![-1.0; order]);
    let dc: f64 = sections.iter().map(Biquad::dc_gain).product();
    normalize_gain(&mut sections, dc.abs());
    Ok(FilterCoefficients {
        sections,
        n_poles: order,
    })
}

/// Steady-state section states for a unit step through the cascade.
fn step_states(coeffs: &FilterCoefficients) -> Vec<[f64; 2]> {
    let mut level = 1.0;
    coeffs
        .sections
        .iter()
        .map(|s| {
            let g = s.dc_gain();
            let zi = [level * (g - s.b[0]), level * (s.b[2] - s.a[2] * g)];
            level *= g;
            zi
        })
        .collect()
}

fn run_cascade(coeffs: &FilterCoefficients, x: &mut [f64], zi: &[[f64; 2]], scale: f64) {
    for (s, z0) in coeffs.sections.iter().zip(zi) {
        let (mut z1, mut z2) = (z0[0] * scale, z0[1] * scale);
        for v in x.iter_mut() {
            let input = *v;
            let y = s.b[0] * input + z1;
            z1 = s.b[1] * input - s.a[1] * y + z2;
            z2 = s.b[2] * input - s.a[2] * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd-reflection padding of
/// [`FilterCoefficients::pad_len`] samples and step-matched initial states.
/// The effective magnitude response is `|H|^2` with zero phase.
pub fn filtfilt(x: &[f64], coeffs: &FilterCoefficients) -> Result<Vec<f64>> {
    let n = x.len();
    let pad = coeffs.pad_len();
    if n <= pad {
        return Err(Error::InsufficientData(format!(
            "zero-phase filtering needs more than {pad} samples, got {n}"
        )));
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = step_states(coeffs);
    let first = ext[0];
    run_cascade(coeffs, &mut ext, &zi, first);
    ext.reverse();
    let first = ext[0];
    run_cascade(coeffs, &mut ext, &zi, first);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Centered sub-range keeping `round(retain_frac * n)` samples.
pub fn retain_range(n: usize, retain_frac: f64) -> Range<usize> {
    let len = ((retain_frac * n as f64).round() as usize).min(n);
    let lead = (n - len) / 2;
    lead..lead + len
}

/// Keeps the central part of a filtered record, checking that it still
/// covers five cycles of `f_s`.
pub fn retain_center(x: &[f64], retain_frac: f64, f_s: f64, dt: f64) -> Result<Vec<f64>> {
    if !(0.5..=0.8).contains(&retain_frac) {
        return Err(Error::Config(format!(
            "retain fraction must be in [0.5, 0.8], got {retain_frac}"
        )));
    }
    let range = retain_range(x.len(), retain_frac);
    check_five_cycles(range.len(), f_s, dt)?;
    Ok(x[range].to_vec())
}

pub(crate) fn check_five_cycles(n: usize, f_s: f64, dt: f64) -> Result<()> {
    let have = n as f64 * dt;
    let need = 5.0 / f_s;
    if have + 1e-9 < need {
        return Err(Error::InsufficientData(format!(
            "{have:.3} s of data after edge trimming is shorter than 5 cycles of {f_s:.4} Hz ({need:.3} s)"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DT: f64 = 1.0 / 30.0;

    // Analog Butterworth magnitudes evaluated at prewarped frequencies; the
    // bilinear transform maps these exactly onto the digital response.
    fn analog_bandpass_mag(f: f64, f_lo: f64, f_hi: f64, order: usize, dt: f64) -> f64 {
        let (w, lo, hi) = (prewarp(f, dt), prewarp(f_lo, dt), prewarp(f_hi, dt));
        let x = (w * w - lo * hi) / ((hi - lo) * w);
        1.0 / (1.0 + x.powi(2 * order as i32)).sqrt()
    }

    fn analog_lowpass_mag(f: f64, fc: f64, order: usize, dt: f64) -> f64 {
        let x = prewarp(f, dt) / prewarp(fc, dt);
        1.0 / (1.0 + x.powi(2 * order as i32)).sqrt()
    }

    fn sine(f: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| (2.0 * PI * f * k as f64 * DT).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn bandpass_cutoffs_and_center() {
        let coeffs = design_butterworth_bandpass(&BandpassSpec::new(1.0), DT).unwrap();
        assert_eq!(coeffs.sections.len(), 4);
        assert_eq!(coeffs.n_poles, 8);
        let edge = std::f64::consts::FRAC_1_SQRT_2;
        assert!((coeffs.magnitude(0.9, DT) - edge).abs() < 1e-3);
        assert!((coeffs.magnitude(1.1, DT) - edge).abs() < 1e-3);
        assert!(coeffs.magnitude(1.0, DT) >= 0.99);
    }

    #[test]
    fn bandpass_matches_analog_prototype() {
        for &(fs, order) in &[(1.0, 4), (9.34, 4), (0.4, 2), (1.41, 3), (5.0, 6)] {
            let mut spec = BandpassSpec::new(fs);
            spec.order = order;
            let c = design_butterworth_bandpass(&spec, DT).unwrap();
            for k in 1..300 {
                let f = k as f64 * 0.05;
                if f >= 15.0 {
                    break;
                }
                let want = analog_bandpass_mag(f, spec.f_lo(), spec.f_hi(), order, DT);
                assert!((c.magnitude(f, DT) - want).abs() < 1e-9, "fs={fs} order={order} f={f}");
            }
        }
    }

    #[test]
    fn lowpass_matches_analog_prototype() {
        for order in 1..=6 {
            let c = design_butterworth_lowpass(3.0, order, DT).unwrap();
            for k in 0..150 {
                let f = k as f64 * 0.1;
                let want = analog_lowpass_mag(f, 3.0, order, DT);
                assert!((c.magnitude(f, DT) - want).abs() < 1e-9, "order={order} f={f}");
            }
        }
    }

    #[test]
    fn sso_band_is_valid_at_30_hz() {
        let spec = BandpassSpec::new(9.34);
        assert!((spec.f_hi() - 10.274).abs() < 1e-12);
        assert!(design_butterworth_bandpass(&spec, DT).is_ok());
        let err = design_butterworth_bandpass(&BandpassSpec::new(14.0), DT).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("Nyquist")));
    }

    #[test]
    fn filtfilt_zero_in_zero_out() {
        let c = design_butterworth_bandpass(&BandpassSpec::new(1.0), DT).unwrap();
        assert!(filtfilt(&[0.0; 200], &c).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(filtfilt(&[0.0; 24], &c), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn filtfilt_in_band_has_zero_lag() {
        let c = design_butterworth_bandpass(&BandpassSpec::new(1.0), DT).unwrap();
        let x = sine(1.0, 900);
        let y = filtfilt(&x, &c).unwrap();
        let core = 150..750;
        let xcorr = |lag: i64| -> f64 { core.clone().map(|k| x[k] * y[(k as i64 + lag) as usize]).sum() };
        let best = (-10..=10).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn filtfilt_rejects_out_of_band() {
        let spec = BandpassSpec::new(1.0);
        let c = design_butterworth_bandpass(&spec, DT).unwrap();
        // the narrow passband rings for tens of seconds after the edges
        let x = sine(3.0, 3001);
        let y = filtfilt(&x, &c).unwrap();
        let core = 1000..2000;
        let ratio = rms(&y[core.clone()]) / rms(&x[core]);
        let predicted = analog_bandpass_mag(3.0, 0.9, 1.1, 4, DT).powi(2);
        assert!(ratio < 0.01);
        assert!((ratio - predicted).abs() < 1e-5);
    }

    #[test]
    fn filtfilt_rejects_dc() {
        let c = design_butterworth_bandpass(&BandpassSpec::new(1.0), DT).unwrap();
        let y = filtfilt(&[4.0; 300], &c).unwrap();
        assert!(rms(&y) < 1e-6 * 4.0);
    }

    proptest! {
        #[test]
        fn filtfilt_is_linear(
            xs in prop::collection::vec(-1.0f64..1.0, 120),
            ys in prop::collection::vec(-1.0f64..1.0, 120),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let c = design_butterworth_bandpass(&BandpassSpec::new(2.0), DT).unwrap();
            let mix: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let lhs = filtfilt(&mix, &c).unwrap();
            let fx = filtfilt(&xs, &c).unwrap();
            let fy = filtfilt(&ys, &c).unwrap();
            let scale = lhs.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            for k in 0..lhs.len() {
                prop_assert!((lhs[k] - (a * fx[k] + b * fy[k])).abs() <= 1e-9 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn retain_center_examples() {
        assert_eq!(retain_range(100, 0.5), 25..75);
        let r = retain_range(101, 0.8);
        assert_eq!(r.len(), 81);
        assert_eq!((r.start, 101 - r.end), (10, 10));

        let x = vec![0.0; 120];
        assert!(matches!(
            retain_center(&x, 0.5, 2.0, DT),
            Err(Error::InsufficientData(_))
        ));
        assert_eq!(retain_center(&x, 0.5, 0.5 * 10.0, DT).unwrap().len(), 60);
        assert!(matches!(retain_center(&x, 0.9, 5.0, DT), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn retain_trims_symmetrically(n in 10usize..5000, frac in 0.5f64..=0.8) {
            let r = retain_range(n, frac);
            let (lead, trail) = (r.start, n - r.end);
            prop_assert!(lead.abs_diff(trail) <= 1);
            prop_assert_eq!(r.len(), (frac * n as f64).round() as usize);
        }
    }
}
