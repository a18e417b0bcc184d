//! End-to-end analysis: cleaning, spectral screening, per-mode band
//! isolation, EDMD and participation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::edmd::{self, EdmdDebug};
use crate::error::{Error, Result};
use crate::filter::{self, BandpassSpec};
use crate::ingest::{self, ChannelSet, CleanConfig, RawChannels, Schema};
use crate::modal::{rank_contributors, Aggregation, ModeReport, PlantParticipation};
use crate::spectral::{self, ModeCandidate, PeakOptions, Spectrum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandpassConfig {
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub order: usize,
    pub retain_frac: f64,
}

impl Default for BandpassConfig {
    fn default() -> Self {
        let s = BandpassSpec::new(1.0);
        Self {
            ratio_lo: s.ratio_lo,
            ratio_hi: s.ratio_hi,
            order: s.order,
            retain_frac: s.retain_frac,
        }
    }
}

impl BandpassConfig {
    pub fn spec(&self, f_s: f64) -> BandpassSpec {
        BandpassSpec {
            f_s,
            ratio_lo: self.ratio_lo,
            ratio_hi: self.ratio_hi,
            order: self.order,
            retain_frac: self.retain_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EdmdConfig {
    /// Fixed truncation order; automatic selection when absent.
    pub truncation: Option<usize>,
    /// Also write the intermediate matrices per mode.
    pub debug: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticipationConfig {
    pub aggregation: Aggregation,
    pub top_k: usize,
}

impl Default for ParticipationConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::MagSum,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub input: Option<PathBuf>,
    /// Input layout; inferred from the header when absent.
    pub schema: Option<Schema>,
    /// Analysis window `[start_s, end_s]`; chosen automatically when absent.
    pub window: Option<[f64; 2]>,
    /// Length of an automatic window in periods of the lowest dominant mode.
    pub window_cycles: f64,
    /// Low-pass denoising cutoff; 0 disables the stage.
    pub lpf_cut_hz: f64,
    pub lpf_order: usize,
    pub fft: PeakOptions,
    pub bandpass: BandpassConfig,
    pub edmd: EdmdConfig,
    pub participation: ParticipationConfig,
    pub clean: CleanConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            input: None,
            schema: None,
            window: None,
            window_cycles: 30.0,
            lpf_cut_hz: 3.0,
            lpf_order: 4,
            fft: PeakOptions::default(),
            bandpass: BandpassConfig::default(),
            edmd: EdmdConfig::default(),
            participation: ParticipationConfig::default(),
            clean: CleanConfig::default(),
            out_dir: None,
        }
    }
}

impl AnalysisConfig {
    /// Reads a TOML (`.toml`) or JSON configuration file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Ok(toml::from_str(&text)?),
            _ => Ok(serde_json::from_str(&text)?),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lpf_cut_hz >= 0.0 && self.lpf_cut_hz.is_finite()) {
            return Err(Error::Config(format!(
                "lpf_cut_hz must be >= 0, got {}",
                self.lpf_cut_hz
            )));
        }
        if !(self.window_cycles >= 5.0) {
            return Err(Error::Config(format!(
                "window_cycles must be at least 5, got {}",
                self.window_cycles
            )));
        }
        if self.edmd.truncation == Some(0) {
            return Err(Error::Config("truncation order must be >= 1".into()));
        }
        if self.participation.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cleaned, optionally low-passed and detrended channels.
pub fn prepare(raw: &RawChannels, cfg: &AnalysisConfig) -> Result<ChannelSet> {
    cfg.validate()?;
    let mut cs = ingest::clean(raw, &cfg.clean)?;
    if cfg.lpf_cut_hz > 0.0 {
        cs = ingest::lowpass_denoise(&cs, cfg.lpf_cut_hz, cfg.lpf_order)?;
    }
    Ok(ingest::detrend(&cs))
}

/// Aggregated spectrum and all spectral candidates, strongest first.
///
/// With low-pass denoising on, peaks and the noise floor are taken from the
/// pass band only; the attenuated bins above the cutoff would otherwise pull
/// the floor down.
pub fn screen(cs: &ChannelSet, cfg: &AnalysisConfig) -> Result<(Spectrum, Vec<ModeCandidate>)> {
    let spec = spectral::aggregate_spectrum(cs)?;
    let window = (cs.t0(), cs.t_end());
    let cands = if cfg.lpf_cut_hz > 0.0 {
        spectral::peaks(&spec.band_limited(cfg.lpf_cut_hz), &cfg.fft, window)?
    } else {
        spectral::peaks(&spec, &cfg.fft, window)?
    };
    Ok((spec, cands))
}

/// Zero-phase band isolation around `f_s` followed by edge trimming.
pub fn isolate(cs: &ChannelSet, f_s: f64, cfg: &AnalysisConfig) -> Result<ChannelSet> {
    let spec = cfg.bandpass.spec(f_s);
    let coeffs = filter::design_butterworth_bandpass(&spec, cs.dt())?;
    let range = filter::retain_range(cs.len(), spec.retain_frac);
    filter::check_five_cycles(range.len(), f_s, cs.dt())?;
    cs.try_map(range.start, |x| {
        let y = filter::filtfilt(x, &coeffs)?;
        Ok(y[range.clone()].to_vec())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAnalysis {
    #[serde(flatten)]
    pub report: ModeReport,
    pub top_contributors: Vec<PlantParticipation>,
    pub singular_values: Vec<f64>,
}

/// EDMD on band-isolated channels and the report for the mode nearest `f_s`.
pub fn decompose_mode(
    band: &ChannelSet,
    f_s: f64,
    n_dominant: usize,
    cfg: &AnalysisConfig,
) -> Result<(ModeAnalysis, EdmdDebug)> {
    let sp = edmd::build_snapshots(band)?;
    let op = edmd::estimate_operator(&sp)?;
    let r = match cfg.edmd.truncation {
        Some(r) => r,
        None => edmd::select_truncation(&op.singular_values, n_dominant, None).min(op.numerical_rank().max(1)),
    };
    let dec = edmd::reduce_and_decompose(&op, r)?;
    let report = ModeReport::build(&dec, f_s, cfg.participation.aggregation)?;
    let top_contributors = rank_contributors(&report, cfg.participation.top_k)
        .into_iter()
        .map(|(id, participation)| PlantParticipation { id, participation })
        .collect();
    let debug = EdmdDebug::new(&op, &dec);
    Ok((
        ModeAnalysis {
            report,
            top_contributors,
            singular_values: op.singular_values.clone(),
        },
        debug,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub n_channels: usize,
    pub n_samples: usize,
    pub dt: f64,
    pub t0: f64,
    pub plants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: AnalysisConfig,
    pub input: InputSummary,
    pub window: [f64; 2],
    pub candidates: Vec<ModeCandidate>,
    /// One entry per dominant candidate, strongest first.
    pub modes: Vec<ModeAnalysis>,
}

/// Everything produced by [`analyze`], including data not kept in the report.
#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub report: AnalysisReport,
    pub spectrum: Spectrum,
    pub debug: Vec<EdmdDebug>,
}

pub fn analyze(raw: &RawChannels, cfg: &AnalysisConfig) -> Result<AnalysisOutput> {
    let cs = prepare(raw, cfg)?;
    analyze_prepared(&cs, cfg)
}

/// Runs the analysis on channels that are already cleaned and detrended.
pub fn analyze_prepared(cs: &ChannelSet, cfg: &AnalysisConfig) -> Result<AnalysisOutput> {
    let (spectrum, candidates) = screen(cs, cfg)?;
    let dominant: Vec<&ModeCandidate> = candidates.iter().filter(|c| c.is_dominant()).collect();
    if dominant.is_empty() {
        return Err(Error::NoDominantMode);
    }
    let window = spectral::select_window(cs, &candidates, cfg.window.map(|[a, b]| (a, b)), cfg.window_cycles)?;
    let range = spectral::window_range(cs, window);
    let segment = cs.slice(range.start, range.end)?;

    let mut modes = Vec::with_capacity(dominant.len());
    let mut debug = Vec::with_capacity(dominant.len());
    for cand in &dominant {
        let band = isolate(&segment, cand.f_s, cfg)?;
        let (m, d) = decompose_mode(&band, cand.f_s, dominant.len(), cfg)?;
        modes.push(m);
        debug.push(d);
    }
    let report = AnalysisReport {
        config: cfg.clone(),
        input: InputSummary {
            n_channels: cs.n_channels(),
            n_samples: cs.len(),
            dt: cs.dt(),
            t0: cs.t0(),
            plants: cs.plants(),
        },
        window: [window.0, window.1],
        candidates,
        modes,
    };
    Ok(AnalysisOutput {
        report,
        spectrum,
        debug,
    })
}

fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits - 1, x).parse().unwrap_or(x)
}

fn canonicalize(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) => {
            if let Some(x) = n.as_f64().filter(|_| n.is_f64()) {
                if let Some(r) = serde_json::Number::from_f64(round_sig(x, 12)) {
                    *n = r;
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(canonicalize),
        serde_json::Value::Object(o) => o.values_mut().for_each(canonicalize),
        _ => {}
    }
}

/// Pretty JSON with sorted keys and floats rounded to 12 significant digits.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    canonicalize(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// File name for a mode's participation table.
pub fn participation_file_name(f_s: f64) -> String {
    format!("participation_{f_s:.3}.csv")
}

/// Writes `report.json`, `spectrum.csv`, `candidates.json`, one
/// participation CSV per mode and, if enabled, `debug_edmd.json`.
pub fn write_outputs(out: &AnalysisOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), to_canonical_json(&out.report)?)?;
    out.spectrum
        .write_csv(std::fs::File::create(dir.join("spectrum.csv"))?)?;
    std::fs::write(dir.join("candidates.json"), to_canonical_json(&out.report.candidates)?)?;
    for m in &out.report.modes {
        m.report
            .write_csv(std::fs::File::create(dir.join(participation_file_name(m.report.f_s)))?)?;
    }
    if out.report.config.edmd.debug {
        std::fs::write(dir.join("debug_edmd.json"), to_canonical_json(&out.debug)?)?;
    }
    Ok(())
}
