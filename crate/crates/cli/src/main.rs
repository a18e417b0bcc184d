//! `oscroot` command line: the full analysis plus one subcommand per stage.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use oscroot_core::ingest::{self, ChannelSet};
use oscroot_core::pipeline::{self, participation_file_name, AnalysisConfig};
use oscroot_core::spectral;
use oscroot_core::synth::{self, SyntheticScenario};
use oscroot_core::{Aggregation, Error};

const CONFIG_HELP: &str = "\
Configuration file keys (TOML or JSON) and their defaults:
  input, schema (phasor | direct; inferred from the header)
  window = [start_s, end_s]        automatic when absent
  window_cycles = 30               artifact default
  lpf_cut_hz = 3.0, 0 disables
  lpf_order = 4                    artifact default
  fft.threshold_rel = 0.3          artifact default
  fft.floor_ratio = 5              artifact default
  fft.harmonic_tol = 0.02          artifact default
  bandpass.ratio_lo = 0.9, bandpass.ratio_hi = 1.1, bandpass.order = 4
  bandpass.retain_frac = 0.65      artifact default
  edmd.truncation                  elbow rule when absent
  edmd.debug = false               artifact default
  participation.aggregation = mag_sum (mag_sum | sum_mag)   artifact default
  participation.top_k = 5          artifact default
  clean.outlier_mad = 6, clean.outlier_half_window = 15, clean.max_gap = 5,
  clean.max_removed_frac = 0.2, clean.jitter_tol = 0.01     artifact defaults
  out_dir = oscroot-out            artifact default

Exit codes: 0 ok, 2 no dominant mode, 3 data quality, 4 configuration,
5 numerical failure, 1 other I/O errors.";

const DEFAULT_OUT: &str = "oscroot-out";

#[derive(Parser)]
#[command(
    name = "oscroot",
    version,
    about = "Rank plants by participation in poorly damped oscillation modes"
)]
#[command(after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full analysis: clean, screen, isolate each mode, EDMD, participation.
    #[command(after_help = CONFIG_HELP)]
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        edmd: EdmdOverrides,
    },
    /// Clean, low-pass and detrend, then write the aggregated spectrum and
    /// the dominant-mode candidates.
    #[command(after_help = CONFIG_HELP)]
    Fft {
        #[command(flatten)]
        common: Common,
    },
    /// Zero-phase bandpass around one frequency and trim the edges. Writes
    /// filtered.csv.
    #[command(after_help = CONFIG_HELP)]
    Filter {
        #[command(flatten)]
        common: Common,
        /// Centre frequency of the band in Hz
        #[arg(long)]
        fs: f64,
    },
    /// EDMD and participation on already band-isolated channels. Writes
    /// edmd.json and the participation table.
    #[command(after_help = CONFIG_HELP)]
    Edmd {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        edmd: EdmdOverrides,
        /// Frequency of the mode to report, in Hz
        #[arg(long)]
        fs: f64,
    },
    /// Generate a synthetic scenario (synth.csv) and its analytic ground
    /// truth (oracle.json).
    Synth {
        /// Scenario file (TOML or JSON)
        #[arg(long)]
        config: PathBuf,
        /// Output directory [default: oscroot-out, artifact default]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Analysis configuration file (TOML or JSON) [defaults when absent]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV, overrides `input` in the configuration
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory [default: oscroot-out, artifact default]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Analysis window in seconds, e.g. `70,120` [automatic when absent]
    #[arg(long, value_parser = parse_window)]
    window: Option<[f64; 2]>,
    /// Low-pass cutoff in Hz, 0 disables [default: 3.0]
    #[arg(long)]
    lpf_cut_hz: Option<f64>,
    /// Peak threshold relative to the spectral maximum [default: 0.3, artifact default]
    #[arg(long)]
    threshold_rel: Option<f64>,
    /// Fraction of the filtered record kept around its centre [default: 0.65, artifact default]
    #[arg(long)]
    retain_frac: Option<f64>,
    /// Per-plant aggregation: mag_sum or sum_mag [default: mag_sum, artifact default]
    #[arg(long)]
    aggregation: Option<Aggregation>,
    /// Number of plants listed per mode [default: 5, artifact default]
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args)]
struct EdmdOverrides {
    /// Truncation order [elbow rule when absent]
    #[arg(long)]
    r: Option<usize>,
    /// Also write debug_edmd.json [default: off, artifact default]
    #[arg(long)]
    debug: bool,
}

fn parse_window(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b] = parts.as_slice() else {
        return Err(format!("expected `start,end`, got '{s}'"));
    };
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}"));
    Ok([num(a)?, num(b)?])
}

impl Common {
    /// Configuration file plus command-line overrides.
    fn resolve(&self) -> Result<AnalysisConfig> {
        let mut cfg = match &self.config {
            Some(path) => AnalysisConfig::from_path(path)?,
            None => AnalysisConfig::default(),
        };
        if let Some(p) = &self.input {
            cfg.input = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.out_dir = Some(p.clone());
        }
        if self.window.is_some() {
            cfg.window = self.window;
        }
        if cfg.out_dir.is_none() {
            cfg.out_dir = Some(PathBuf::from(DEFAULT_OUT));
        }
        if let Some(v) = self.lpf_cut_hz {
            cfg.lpf_cut_hz = v;
        }
        if let Some(v) = self.threshold_rel {
            cfg.fft.threshold_rel = v;
        }
        if let Some(v) = self.retain_frac {
            cfg.bandpass.retain_frac = v;
        }
        if let Some(v) = self.aggregation {
            cfg.participation.aggregation = v;
        }
        if let Some(v) = self.top_k {
            cfg.participation.top_k = v;
        }
        Ok(cfg)
    }
}

impl EdmdOverrides {
    fn apply(&self, cfg: &mut AnalysisConfig) {
        if self.r.is_some() {
            cfg.edmd.truncation = self.r;
        }
        cfg.edmd.debug |= self.debug;
    }
}

fn read_input(cfg: &AnalysisConfig) -> Result<ingest::RawChannels> {
    let path = cfg
        .input
        .as_deref()
        .ok_or_else(|| Error::Config("no input file: pass --input or set `input`".into()))?;
    Ok(ingest::read_csv_path(path, cfg.schema)?)
}

fn out_dir(cfg: &AnalysisConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("cannot create {}", path.display()))
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn analyze(common: &Common, edmd: &EdmdOverrides) -> Result<()> {
    let mut cfg = common.resolve()?;
    edmd.apply(&mut cfg);
    let raw = read_input(&cfg)?;
    let out = pipeline::analyze(&raw, &cfg)?;
    let dir = out_dir(&cfg)?;
    pipeline::write_outputs(&out, &dir)?;
    for m in &out.report.modes {
        let top: Vec<&str> = m.top_contributors.iter().map(|p| p.id.as_str()).collect();
        println!(
            "{:.4} Hz  damping {:.3}%  r={}  top: {}",
            m.report.freq_hz,
            m.report.damping_pct,
            m.report.r,
            top.join(", ")
        );
    }
    Ok(())
}

fn fft(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let cs = pipeline::prepare(&read_input(&cfg)?, &cfg)?;
    let (spectrum, candidates) = pipeline::screen(&cs, &cfg)?;
    let dir = out_dir(&cfg)?;
    spectrum.write_csv(create(&dir.join("spectrum.csv"))?)?;
    write_text(&dir.join("candidates.json"), pipeline::to_canonical_json(&candidates)?)?;
    for c in &candidates {
        match c.harmonic_of {
            Some(root) => println!(
                "{:.4} Hz  amplitude {:.4e}  harmonic of {root:.4} Hz",
                c.f_s, c.amplitude
            ),
            None => println!("{:.4} Hz  amplitude {:.4e}", c.f_s, c.amplitude),
        }
    }
    Ok(())
}

/// Cleaned input, cut to the configured window if there is one.
fn clean_input(cfg: &AnalysisConfig) -> Result<ChannelSet> {
    cfg.validate()?;
    let cs = ingest::clean(&read_input(cfg)?, &cfg.clean)?;
    let Some([a, b]) = cfg.window else {
        return Ok(cs);
    };
    let slack = 0.5 * cs.dt();
    if !(a < b && a >= cs.t0() - slack && b <= cs.t_end() + slack) {
        return Err(Error::Config(format!(
            "window [{a}, {b}] s is not inside the data [{}, {}] s",
            cs.t0(),
            cs.t_end()
        ))
        .into());
    }
    let range = spectral::window_range(&cs, (a, b));
    Ok(cs.slice(range.start, range.end)?)
}

fn filter(common: &Common, fs: f64) -> Result<()> {
    let cfg = common.resolve()?;
    let band = pipeline::isolate(&clean_input(&cfg)?, fs, &cfg)?;
    let dir = out_dir(&cfg)?;
    band.write_csv(create(&dir.join("filtered.csv"))?)?;
    Ok(())
}

fn edmd(common: &Common, overrides: &EdmdOverrides, fs: f64) -> Result<()> {
    let mut cfg = common.resolve()?;
    overrides.apply(&mut cfg);
    let band = clean_input(&cfg)?;
    let (mode, debug) = pipeline::decompose_mode(&band, fs, 1, &cfg)?;
    let dir = out_dir(&cfg)?;
    write_text(&dir.join("edmd.json"), pipeline::to_canonical_json(&mode)?)?;
    mode.report
        .write_csv(create(&dir.join(participation_file_name(mode.report.f_s)))?)?;
    if cfg.edmd.debug {
        write_text(&dir.join("debug_edmd.json"), pipeline::to_canonical_json(&[debug])?)?;
    }
    println!(
        "{:.4} Hz  damping {:.3}%  r={}",
        mode.report.freq_hz, mode.report.damping_pct, mode.report.r
    );
    Ok(())
}

fn synth(config: &Path, out: Option<&Path>) -> Result<()> {
    let scn = SyntheticScenario::from_path(config)?;
    let cs = synth::generate(&scn)?;
    let dir = out.map_or_else(|| PathBuf::from(DEFAULT_OUT), Path::to_path_buf);
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    cs.write_csv(create(&dir.join("synth.csv"))?)?;
    write_text(
        &dir.join("oracle.json"),
        pipeline::to_canonical_json(&synth::oracle_eig(&scn, Aggregation::default())?)?,
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Analyze { common, edmd: e } => analyze(common, e),
        Command::Fft { common } => fft(common),
        Command::Filter { common, fs } => filter(common, *fs),
        Command::Edmd { common, edmd: e, fs } => edmd(common, e, *fs),
        Command::Synth { config, out } => synth(config, out.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // usage errors are configuration errors; keep the first line only
            let text = e.render().to_string();
            let line = text.lines().next().unwrap_or_default();
            eprintln!("oscroot: {}", line.trim_start_matches("error: "));
            return ExitCode::from(Error::Config(String::new()).exit_code() as u8);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("oscroot: {msg}");
            ExitCode::from(exit_code(&err))
        }
    }
}
