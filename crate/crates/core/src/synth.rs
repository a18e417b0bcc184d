//! Synthetic multi-plant signals with known modal ground truth.
//!
//! A scenario lists damped modes by frequency, damping ratio and complex
//! shape over the channels. The generator superposes them (plus optional
//! forcing and seeded Gaussian noise); the oracle rebuilds an explicit
//! continuous-time system matrix with exactly those modes and reports its
//! eigenvalues and right-times-left eigenvector participation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Channel, ChannelKind, ChannelLabel, ChannelSet};
use crate::modal::{aggregate_by_plant, normalize, Aggregation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub freq_hz: f64,
    pub damping_ratio: f64,
    /// Complex amplitude per channel as `[re, im]`, in channel order.
    pub shape: Vec<[f64; 2]>,
}

impl ModeSpec {
    /// `lambda = -zeta w_n + j w_n sqrt(1 - zeta^2)` with `w_n = 2 pi f / sqrt(1 - zeta^2)`,
    /// so that the damped frequency equals `freq_hz`.
    pub fn lambda(&self) -> Complex64 {
        let z = self.damping_ratio;
        let wd = 2.0 * PI * self.freq_hz;
        let wn = wd / (1.0 - z * z).sqrt();
        Complex64::new(-z * wn, wd)
    }

    fn shape_c(&self) -> Vec<Complex64> {
        self.shape.iter().map(|[re, im]| Complex64::new(*re, *im)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waveform {
    Sine,
    Rectangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coupling {
    /// Channel label such as `"30:Q"`.
    pub channel: String,
    pub gain: f64,
    #[serde(default)]
    pub phase_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forcing {
    pub freq_hz: f64,
    pub waveform: Waveform,
    #[serde(default = "one")]
    pub amplitude: f64,
    /// Injection channel label.
    pub channel: String,
    /// Further channels that see the forcing, scaled and phase shifted.
    #[serde(default)]
    pub coupling: Vec<Coupling>,
}

fn one() -> f64 {
    1.0
}

/// Each plant contributes a P and a Q channel, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScenario {
    pub dt: f64,
    pub duration: f64,
    #[serde(default)]
    pub t0: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    pub plants: Vec<String>,
    #[serde(default)]
    pub modes: Vec<ModeSpec>,
    #[serde(default)]
    pub forcing: Option<Forcing>,
}

impl SyntheticScenario {
    /// Reads a JSON or TOML scenario, chosen by file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Ok(toml::from_str(&text)?),
            _ => Ok(serde_json::from_str(&text)?),
        }
    }

    pub fn labels(&self) -> Vec<ChannelLabel> {
        self.plants
            .iter()
            .flat_map(|p| {
                [
                    ChannelLabel::new(p.clone(), ChannelKind::P),
                    ChannelLabel::new(p.clone(), ChannelKind::Q),
                ]
            })
            .collect()
    }

    pub fn n_channels(&self) -> usize {
        2 * self.plants.len()
    }

    pub fn n_samples(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    fn channel_index(&self, label: &str) -> Result<usize> {
        self.labels()
            .iter()
            .position(|l| l.to_string() == label)
            .ok_or_else(|| Error::Config(format!("unknown channel '{label}' in forcing")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if self.n_samples() < 2 {
            return bad(format!("duration {} s gives fewer than 2 samples", self.duration));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.plants.is_empty() {
            return bad("scenario needs at least one plant".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.plants {
            if p.is_empty() || p.contains(':') || !seen.insert(p) {
                return bad(format!(
                    "plant ids must be unique, non-empty and free of ':' (got '{p}')"
                ));
            }
        }
        let nyq = 0.5 / self.dt;
        for (i, m) in self.modes.iter().enumerate() {
            if !(m.freq_hz > 0.0 && m.freq_hz < nyq) {
                return bad(format!("mode {i}: frequency {} Hz outside (0, {nyq}) Hz", m.freq_hz));
            }
            if !(0.0..1.0).contains(&m.damping_ratio) {
                return bad(format!("mode {i}: damping ratio {} outside [0, 1)", m.damping_ratio));
            }
            if m.shape.len() != self.n_channels() {
                return bad(format!(
                    "mode {i}: shape has {} entries, scenario has {} channels",
                    m.shape.len(),
                    self.n_channels()
                ));
            }
            if m.shape.iter().all(|[re, im]| *re == 0.0 && *im == 0.0) {
                return bad(format!("mode {i}: shape vector is zero"));
            }
        }
        if let Some(f) = &self.forcing {
            if !(f.freq_hz > 0.0 && f.freq_hz < nyq) {
                return bad(format!("forcing frequency {} Hz outside (0, {nyq}) Hz", f.freq_hz));
            }
            self.channel_index(&f.channel)?;
            for c in &f.coupling {
                self.channel_index(&c.channel)?;
            }
        }
        Ok(())
    }
}

fn waveform(w: Waveform, phase: f64) -> f64 {
    match w {
        Waveform::Sine => phase.sin(),
        Waveform::Rectangular => {
            let s = phase.sin();
            if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

/// `x_s(t) = sum_m Re(shape_s e^{lambda_m t})` plus forcing and noise.
pub fn generate(scn: &SyntheticScenario) -> Result<ChannelSet> {
    scn.validate()?;
    let n = scn.n_channels();
    let len = scn.n_samples();
    let mut data = vec![vec![0.0; len]; n];
    for m in &scn.modes {
        let lambda = m.lambda();
        let shape = m.shape_c();
        for k in 0..len {
            let e = (lambda * (k as f64 * scn.dt)).exp();
            for (s, row) in data.iter_mut().enumerate() {
                row[k] += (shape[s] * e).re;
            }
        }
    }
    if let Some(f) = &scn.forcing {
        let mut taps = vec![(scn.channel_index(&f.channel)?, 1.0, 0.0)];
        for c in &f.coupling {
            taps.push((scn.channel_index(&c.channel)?, c.gain, c.phase_rad));
        }
        for (s, gain, phase) in taps {
            for (k, v) in data[s].iter_mut().enumerate() {
                let arg = 2.0 * PI * f.freq_hz * k as f64 * scn.dt + phase;
                *v += f.amplitude * gain * waveform(f.waveform, arg);
            }
        }
    }
    if scn.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
        let normal = Normal::new(0.0, scn.noise_std).map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        for row in data.iter_mut() {
            for v in row.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let channels = scn
        .labels()
        .into_iter()
        .zip(data)
        .map(|(label, samples)| Channel { label, samples })
        .collect();
    ChannelSet::new(scn.dt, scn.t0, channels)
}

/// Ground truth for one scenario mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMode {
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub freq_hz: f64,
    pub damping_ratio: f64,
    /// Normalized participation per plant.
    pub plants: BTreeMap<String, f64>,
}

impl OracleMode {
    pub fn lambda(&self) -> Complex64 {
        Complex64::new(self.lambda_re, self.lambda_im)
    }

    /// Plant with the largest participation (ties to the smallest id).
    pub fn top_plant(&self) -> &str {
        let mut best: Option<(&String, f64)> = None;
        for (k, &v) in &self.plants {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        best.map(|(k, _)| k.as_str()).unwrap_or("")
    }
}

/// Orthonormal completion of the column space of `s` to a basis of R^n.
fn complement(s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let svd = s.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    for (k, &sv) in svd.singular_values.iter().enumerate() {
        if sv > 1e-10 * smax {
            basis.push(u.column(k).into_owned());
        }
    }
    let inner = basis.len();
    for i in 0..n {
        let mut e = DVector::<f64>::zeros(n);
        e[i] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let d = b.dot(&e);
                e -= b * d;
            }
        }
        let norm = e.norm();
        if norm > 1e-8 {
            basis.push(e / norm);
        }
        if basis.len() == n {
            break;
        }
    }
    let cols: Vec<DVector<f64>> = basis.into_iter().skip(inner).collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Continuous-time system matrix over the channels whose oscillatory
/// eigenpairs are exactly the scenario modes. Directions outside the mode
/// shapes decay as fast, distinct real poles.
pub fn system_matrix(scn: &SyntheticScenario) -> Result<DMatrix<f64>> {
    scn.validate()?;
    let n = scn.n_channels();
    let k = scn.modes.len();
    if 2 * k > n {
        return Err(Error::Config(format!(
            "{k} modes need at least {} channels, scenario has {n}",
            2 * k
        )));
    }
    let mut s = DMatrix::<f64>::zeros(n, 2 * k);
    for (m, mode) in scn.modes.iter().enumerate() {
        for (row, v) in mode.shape_c().iter().enumerate() {
            s[(row, 2 * m)] = v.re;
            s[(row, 2 * m + 1)] = v.im;
        }
    }
    let sv = s.clone().svd(false, false).singular_values;
    if k > 0 && sv.min() <= 1e-10 * sv.max() {
        return Err(Error::Config(
            "mode shapes are not realizable: real and imaginary parts must be linearly independent across modes".into(),
        ));
    }
    let comp = complement(&s);
    // real block form: A [a b] = [a b] [[sigma, w], [-w, sigma]] for v = a + jb
    let mut basis = DMatrix::<f64>::zeros(n, n);
    let mut block = DMatrix::<f64>::zeros(n, n);
    basis.columns_mut(0, 2 * k).copy_from(&s);
    for (m, mode) in scn.modes.iter().enumerate() {
        let l = mode.lambda();
        let j = 2 * m;
        block[(j, j)] = l.re;
        block[(j, j + 1)] = l.im;
        block[(j + 1, j)] = -l.im;
        block[(j + 1, j + 1)] = l.re;
    }
    for c in 0..comp.ncols() {
        basis.set_column(2 * k + c, &comp.column(c));
        block[(2 * k + c, 2 * k + c)] = -(10.0 + c as f64);
    }
    let inv = basis
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Config("mode shapes are not realizable as a system".into()))?;
    Ok(&basis * block * inv)
}

/// Right eigenvector for a known eigenvalue by inverse iteration.
fn inverse_iteration(a: &DMatrix<Complex64>, lambda: Complex64) -> DVector<Complex64> {
    let n = a.nrows();
    let shift = lambda + Complex64::new(1e-10 * (1.0 + lambda.norm()), 0.0);
    let lu = (a - DMatrix::<Complex64>::identity(n, n) * shift).lu();
    let mut x = DVector::<Complex64>::from_element(n, Complex64::new(1.0, 0.0));
    for _ in 0..3 {
        if let Some(y) = lu.solve(&x) {
            let norm = y.norm();
            x = y / Complex64::new(norm, 0.0);
        }
    }
    x
}

/// Eigenvalues and analytic participation of the stored system matrix, one
/// entry per scenario mode (positive-frequency member), in scenario order.
pub fn oracle_eig(scn: &SyntheticScenario, rule: Aggregation) -> Result<Vec<OracleMode>> {
    let a = system_matrix(scn)?;
    let n = a.nrows();
    let ac = a.map(|x| Complex64::new(x, 0.0));
    let values: Vec<Complex64> = a.clone().complex_eigenvalues().iter().copied().collect();
    let mut right = DMatrix::<Complex64>::zeros(n, n);
    for (j, &l) in values.iter().enumerate() {
        right.set_column(j, &inverse_iteration(&ac, l));
    }
    let left = right
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateData("oracle system matrix is not diagonalizable".into()))?;
    let labels = scn.labels();
    scn.modes
        .iter()
        .map(|mode| {
            let target = mode.lambda();
            let j = (0..n)
                .min_by(|&x, &y| (values[x] - target).norm().total_cmp(&(values[y] - target).norm()))
                .expect("non-empty spectrum");
            let p: Vec<Complex64> = (0..n).map(|s| right[(s, j)] * left[(j, s)]).collect();
            let l = values[j];
            Ok(OracleMode {
                lambda_re: l.re,
                lambda_im: l.im,
                freq_hz: l.im.abs() / (2.0 * PI),
                damping_ratio: -l.re / l.norm(),
                plants: normalize(&aggregate_by_plant(&p, &labels, rule))?,
            })
        })
        .collect()
}
