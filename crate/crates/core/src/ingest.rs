//! Loading, validating and preprocessing PMU measurements.
//!
//! Two CSV layouts are accepted:
//!
//! * phasor rows `t,plant,V,theta_V,I,theta_I[,quality]`, one row per plant
//!   and timestamp; P and Q are derived from the phasors;
//! * direct columns `t,<plant>:P,<plant>:Q,...`, one column per channel.
//!
//! [`clean`] turns either into a [`ChannelSet`] on a strictly uniform grid,
//! with low-quality samples and outliers replaced by linear interpolation.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    #[default]
    Good,
    Bad,
    Missing,
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "good" | "ok" => Ok(Quality::Good),
            "bad" => Ok(Quality::Bad),
            "missing" | "na" | "nan" => Ok(Quality::Missing),
            other => Err(Error::DataQuality(format!("unknown quality flag '{other}'"))),
        }
    }
}

/// One voltage/current phasor pair reported by a PMU at the plant's point of
/// interconnection.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasorRecord {
    pub t: f64,
    pub plant: String,
    pub v: f64,
    pub theta_v: f64,
    pub i: f64,
    pub theta_i: f64,
    pub quality: Quality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelKind {
    P,
    Q,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelKind::P => f.write_str("P"),
            ChannelKind::Q => f.write_str("Q"),
        }
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "P" | "p" => Ok(ChannelKind::P),
            "Q" | "q" => Ok(ChannelKind::Q),
            other => Err(Error::DataQuality(format!(
                "channel kind must be P or Q, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelLabel {
    pub plant: String,
    pub kind: ChannelKind,
}

impl ChannelLabel {
    pub fn new(plant: impl Into<String>, kind: ChannelKind) -> Self {
        Self {
            plant: plant.into(),
            kind,
        }
    }
}

impl fmt::Display for ChannelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.plant, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub label: ChannelLabel,
    pub samples: Vec<f64>,
}

/// Uniformly sampled, finite, equal-length observable channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    dt: f64,
    t0: f64,
    channels: Vec<Channel>,
}

impl ChannelSet {
    pub fn new(dt: f64, t0: f64, channels: Vec<Channel>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("sampling interval must be > 0, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::DataQuality("start time is not finite".into()));
        }
        let Some(first) = channels.first() else {
            return Err(Error::DataQuality("no channels".into()));
        };
        let len = first.samples.len();
        if len < 2 {
            return Err(Error::InsufficientData(format!(
                "channels need at least 2 samples, got {len}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for ch in &channels {
            if ch.samples.len() != len {
                return Err(Error::DataQuality(format!(
                    "channel {} has {} samples, expected {len}",
                    ch.label,
                    ch.samples.len()
                )));
            }
            if let Some(k) = ch.samples.iter().position(|x| !x.is_finite()) {
                return Err(Error::DataQuality(format!(
                    "channel {} has a non-finite sample at index {k}",
                    ch.label
                )));
            }
            if !seen.insert(ch.label.clone()) {
                return Err(Error::DataQuality(format!("duplicate channel {}", ch.label)));
            }
        }
        Ok(Self { dt, t0, channels })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Record length in seconds, counted as `len * dt`.
    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + (self.len() - 1) as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.dt
    }

    pub fn labels(&self) -> Vec<ChannelLabel> {
        self.channels.iter().map(|c| c.label.clone()).collect()
    }

    /// Plant ids in first-appearance order.
    pub fn plants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for ch in &self.channels {
            if !out.contains(&ch.label.plant) {
                out.push(ch.label.plant.clone());
            }
        }
        out
    }

    /// Sub-record over sample indices `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InsufficientData(format!(
                "invalid sample range {start}..{end} for {} samples",
                self.len()
            )));
        }
        let channels = self
            .channels
            .iter()
            .map(|c| Channel {
                label: c.label.clone(),
                samples: c.samples[start..end].to_vec(),
            })
            .collect();
        Self::new(self.dt, self.time(start), channels)
    }

    /// Applies `f` to every channel's samples. Lengths may change uniformly;
    /// `t_shift` samples are added to the start time.
    pub fn try_map<F>(&self, t_shift: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                Ok(Channel {
                    label: c.label.clone(),
                    samples: f(&c.samples)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.dt, self.time(t_shift), channels)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.try_map(0, |x| Ok(x.iter().map(|v| v * factor).collect()))
    }

    /// Writes the direct-schema CSV `t,<plant>:<kind>,...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(self.channels.iter().map(|c| c.label.to_string()));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = Vec::with_capacity(self.channels.len() + 1);
            row.push(self.time(k).to_string());
            row.extend(self.channels.iter().map(|c| c.samples[k].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_raw(&self) -> RawChannels {
        let times: Vec<f64> = (0..self.len()).map(|k| self.time(k)).collect();
        RawChannels {
            series: self
                .channels
                .iter()
                .map(|c| RawSeries {
                    label: c.label.clone(),
                    times: times.clone(),
                    values: c.samples.iter().copied().map(Some).collect(),
                })
                .collect(),
        }
    }
}

/// `P = V I cos(theta_V - theta_I)`, `Q = V I sin(theta_V - theta_I)`.
pub fn compute_pq(rec: &PhasorRecord, index: usize) -> Result<(f64, f64)> {
    let fields = [rec.v, rec.theta_v, rec.i, rec.theta_i];
    if fields.iter().any(|x| !x.is_finite()) {
        return Err(Error::RejectedSample {
            index,
            reason: "non-finite phasor field".into(),
        });
    }
    if rec.v < 0.0 || rec.i < 0.0 {
        return Err(Error::RejectedSample {
            index,
            reason: "negative phasor magnitude".into(),
        });
    }
    let s = rec.v * rec.i;
    let (sin, cos) = (rec.theta_v - rec.theta_i).sin_cos();
    Ok((s * cos, s * sin))
}

/// One channel as read from file: its own timestamps and possibly-missing values.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub label: ChannelLabel,
    pub times: Vec<f64>,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawChannels {
    pub series: Vec<RawSeries>,
}

impl RawChannels {
    /// Groups phasor records by plant and derives P/Q; non-good samples become gaps.
    pub fn from_phasors(records: &[PhasorRecord]) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        // plant -> (times, P, Q)
        type Columns = (Vec<f64>, Vec<Option<f64>>, Vec<Option<f64>>);
        let mut by_plant: HashMap<String, Columns> = HashMap::new();
        for (index, rec) in records.iter().enumerate() {
            if !rec.t.is_finite() {
                return Err(Error::RejectedSample {
                    index,
                    reason: "non-finite timestamp".into(),
                });
            }
            let entry = by_plant.entry(rec.plant.clone()).or_insert_with(|| {
                order.push(rec.plant.clone());
                Default::default()
            });
            let (p, q) = match rec.quality {
                Quality::Good => {
                    let (p, q) = compute_pq(rec, index)?;
                    (Some(p), Some(q))
                }
                Quality::Bad | Quality::Missing => (None, None),
            };
            entry.0.push(rec.t);
            entry.1.push(p);
            entry.2.push(q);
        }
        let mut series = Vec::with_capacity(order.len() * 2);
        for plant in order {
            let (times, p, q) = by_plant.remove(&plant).expect("plant recorded");
            series.push(RawSeries {
                label: ChannelLabel::new(plant.clone(), ChannelKind::P),
                times: times.clone(),
                values: p,
            });
            series.push(RawSeries {
                label: ChannelLabel::new(plant, ChannelKind::Q),
                times,
                values: q,
            });
        }
        Ok(Self { series })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Phasor,
    Direct,
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "phasor" => Ok(Schema::Phasor),
            "direct" => Ok(Schema::Direct),
            other => Err(Error::Config(format!("unknown schema '{other}'"))),
        }
    }
}

fn parse_field(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::RejectedSample {
        index: row,
        reason: format!("column '{col}' is not a number: '{s}'"),
    })
}

/// Reads either CSV layout. With `schema = None` the layout is inferred from
/// the header.
pub fn read_csv<R: Read>(reader: R, schema: Option<Schema>) -> Result<RawChannels> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(Error::DataQuality("empty input".into()));
    }
    let lower: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    let schema = schema.unwrap_or_else(|| {
        if lower.iter().any(|h| h == "plant") {
            Schema::Phasor
        } else {
            Schema::Direct
        }
    });
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::DataQuality("input has a header but no samples".into()));
    }
    match schema {
        Schema::Phasor => read_phasor_rows(&header, &rows),
        Schema::Direct => read_direct_rows(&header, &rows),
    }
}

pub fn read_csv_path(path: &Path, schema: Option<Schema>) -> Result<RawChannels> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::DataQuality(format!("cannot open {}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(file), schema)
}

fn read_phasor_rows(header: &[String], rows: &[csv::StringRecord]) -> Result<RawChannels> {
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::DataQuality(format!("phasor schema is missing column '{name}'")))
    };
    let it = find("t")?;
    let iplant = find("plant")?;
    let iv = find("V")?;
    let itv = find("theta_V")?;
    let ii = find("I")?;
    let iti = find("theta_I")?;
    let iq = header.iter().position(|h| h.eq_ignore_ascii_case("quality"));
    let mut records = Vec::with_capacity(rows.len());
    for (row, rec) in rows.iter().enumerate() {
        let quality = match iq {
            Some(c) => rec[c].parse::<Quality>()?,
            None => Quality::Good,
        };
        // magnitudes and angles of a non-good sample are not trusted, so do not parse them
        let num = |c: usize, name: &str| -> Result<f64> {
            if quality == Quality::Good {
                parse_field(&rec[c], row, name)
            } else {
                Ok(rec[c].trim().parse::<f64>().unwrap_or(f64::NAN))
            }
        };
        records.push(PhasorRecord {
            t: parse_field(&rec[it], row, "t")?,
            plant: rec[iplant].to_string(),
            v: num(iv, "V")?,
            theta_v: num(itv, "theta_V")?,
            i: num(ii, "I")?,
            theta_i: num(iti, "theta_I")?,
            quality,
        });
    }
    RawChannels::from_phasors(&records)
}

fn read_direct_rows(header: &[String], rows: &[csv::StringRecord]) -> Result<RawChannels> {
    if header.len() < 2 {
        return Err(Error::DataQuality(
            "direct schema needs a time column and at least one channel".into(),
        ));
    }
    if !matches!(header[0].to_ascii_lowercase().as_str(), "t" | "time") {
        return Err(Error::DataQuality(format!(
            "first column must be 't', got '{}'",
            header[0]
        )));
    }
    let mut labels = Vec::with_capacity(header.len() - 1);
    for h in &header[1..] {
        let (plant, kind) = h
            .rsplit_once(':')
            .ok_or_else(|| Error::DataQuality(format!("channel column '{h}' is not of the form <plant>:<P|Q>")))?;
        if plant.is_empty() {
            return Err(Error::DataQuality(format!("empty plant id in column '{h}'")));
        }
        labels.push(ChannelLabel::new(plant, kind.parse()?));
    }
    let mut times = Vec::with_capacity(rows.len());
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(rows.len()); labels.len()];
    for (row, rec) in rows.iter().enumerate() {
        times.push(parse_field(&rec[0], row, "t")?);
        for (c, col) in columns.iter_mut().enumerate() {
            let cell = rec[c + 1].trim();
            let value = if cell.is_empty() {
                None
            } else {
                let v = parse_field(cell, row, &header[c + 1])?;
                v.is_finite().then_some(v)
            };
            col.push(value);
        }
    }
    Ok(RawChannels {
        series: labels
            .into_iter()
            .zip(columns)
            .map(|(label, values)| RawSeries {
                label,
                times: times.clone(),
                values,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    /// Outlier threshold in multiples of the local median absolute deviation.
    pub outlier_mad: f64,
    /// Half width, in samples, of the rolling median window.
    pub outlier_half_window: usize,
    /// Longest gap, in samples, that is bridged by interpolation.
    pub max_gap: usize,
    /// Largest tolerated fraction of replaced samples per channel.
    pub max_removed_frac: f64,
    /// Timestamp jitter, as a fraction of dt, that is snapped to the grid.
    pub jitter_tol: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            outlier_mad: 6.0,
            outlier_half_window: 15,
            max_gap: 5,
            max_removed_frac: 0.2,
            jitter_tol: 0.01,
        }
    }
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    v.sort_unstable_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Grid placement of one raw series: snaps when the jitter is within
/// tolerance, otherwise resamples linearly.
fn to_grid(s: &RawSeries, start: f64, dt: f64, n: usize, cfg: &CleanConfig) -> Result<Vec<Option<f64>>> {
    let tol = cfg.jitter_tol * dt;
    let snaps = s.times.iter().all(|&t| {
        let k = ((t - start) / dt).round();
        ((start + k * dt) - t).abs() <= tol
    });
    if snaps {
        let mut slots: Vec<Option<Option<f64>>> = vec![None; n];
        for (&t, &v) in s.times.iter().zip(&s.values) {
            let k = ((t - start) / dt).round();
            if k < 0.0 || k as usize >= n {
                continue;
            }
            let k = k as usize;
            if slots[k].is_some() {
                return Err(Error::Resampling(format!(
                    "channel {} has two samples on grid point {k}",
                    s.label
                )));
            }
            slots[k] = Some(v);
        }
        // a present slot carrying None marks a low-quality sample
        return Ok(slots.into_iter().map(Option::flatten).collect());
    }

    let mut out = vec![None; n];
    let valid: Vec<(f64, f64)> = s
        .times
        .iter()
        .zip(&s.values)
        .filter_map(|(&t, v)| v.map(|v| (t, v)))
        .collect();
    let max_span = (cfg.max_gap + 1) as f64 * dt + tol;
    let mut j = 0;
    for (k, slot) in out.iter_mut().enumerate() {
        let g = start + k as f64 * dt;
        while j + 1 < valid.len() && valid[j + 1].0 < g {
            j += 1;
        }
        if valid.is_empty() {
            break;
        }
        if (valid[j].0 - g).abs() <= tol {
            *slot = Some(valid[j].1);
            continue;
        }
        if j + 1 < valid.len() && valid[j].0 <= g && g <= valid[j + 1].0 {
            let (t0, v0) = valid[j];
            let (t1, v1) = valid[j + 1];
            if t1 - t0 > max_span {
                return Err(Error::Resampling(format!(
                    "channel {}: timestamp gap of {:.4} s between {t0} and {t1} exceeds {} samples",
                    s.label,
                    t1 - t0,
                    cfg.max_gap
                )));
            }
            *slot = Some(v0 + (v1 - v0) * (g - t0) / (t1 - t0));
        }
    }
    Ok(out)
}

/// Fills gaps by linear interpolation (constant extension at the edges).
/// Fails when a gap is longer than `max_gap`.
fn fill_gaps(values: &[Option<f64>], max_gap: usize, label: &ChannelLabel) -> Result<Vec<f64>> {
    let n = values.len();
    let known: Vec<usize> = (0..n).filter(|&k| values[k].is_some()).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err(Error::DataQuality(format!("channel {label} has no valid samples")));
    };
    let too_long = |len: usize| {
        Error::DataQuality(format!(
            "channel {label} has a gap of {len} samples (longest repairable gap is {max_gap})"
        ))
    };
    if first > max_gap {
        return Err(too_long(first));
    }
    if n - 1 - last > max_gap {
        return Err(too_long(n - 1 - last));
    }
    let mut out = vec![0.0; n];
    let v = |k: usize| values[k].expect("known sample");
    out[..=first].fill(v(first));
    out[last..].fill(v(last));
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a - 1 > max_gap {
            return Err(too_long(b - a - 1));
        }
        let (va, vb) = (v(a), v(b));
        out[a] = va;
        for (k, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            *slot = va + (vb - va) * (k - a) as f64 / (b - a) as f64;
        }
    }
    Ok(out)
}

fn detrend_slice(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let nf = n as f64;
    let kbar = (nf - 1.0) / 2.0;
    let xbar = x.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, &v) in x.iter().enumerate() {
        let dk = k as f64 - kbar;
        sxy += dk * (v - xbar);
        sxx += dk * dk;
    }
    let slope = sxy / sxx;
    x.iter()
        .enumerate()
        .map(|(k, &v)| v - xbar - slope * (k as f64 - kbar))
        .collect()
}

/// Indices whose deviation from the rolling median exceeds `k` rolling MADs.
/// The MAD is floored at a tenth of the channel's standard deviation so that
/// flat or quantized stretches do not turn every small change into an outlier.
/// Rolling median/MAD outliers. Runs of more than `max_run` consecutive
/// flags are a level change in the signal (a step near the record edge, for
/// instance) rather than spikes, and are not reported.
fn hampel_outliers(x: &[f64], half_window: usize, k: f64, max_run: usize) -> Vec<usize> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let floor = 0.1 * std;
    let mut buf = Vec::with_capacity(2 * half_window + 1);
    let mut out = Vec::new();
    let width = (2 * half_window + 1).min(n);
    for i in 0..n {
        // full-width window, shifted inward near the ends
        let lo = i.saturating_sub(half_window).min(n - width);
        let hi = lo + width;
        buf.clear();
        buf.extend_from_slice(&x[lo..hi]);
        let med = median_in_place(&mut buf);
        for v in buf.iter_mut() {
            *v = (*v - med).abs();
        }
        let mad = median_in_place(&mut buf).max(floor);
        if (x[i] - med).abs() > k * mad {
            out.push(i);
        }
    }
    let mut kept = Vec::with_capacity(out.len());
    let mut start = 0;
    while start < out.len() {
        let mut end = start + 1;
        while end < out.len() && out[end] == out[end - 1] + 1 {
            end += 1;
        }
        if end - start <= max_run {
            kept.extend_from_slice(&out[start..end]);
        }
        start = end;
    }
    kept
}

fn clean_channel(grid: Vec<Option<f64>>, label: &ChannelLabel, cfg: &CleanConfig) -> Result<Vec<f64>> {
    let n = grid.len();
    let mut values = grid;
    let mut removed = values.iter().filter(|v| v.is_none()).count();
    let check_removed = |removed: usize| {
        if removed as f64 > cfg.max_removed_frac * n as f64 {
            Err(Error::DataQuality(format!(
                "channel {label}: {removed} of {n} samples removed ({:.1}% > {:.0}%)",
                100.0 * removed as f64 / n as f64,
                100.0 * cfg.max_removed_frac
            )))
        } else {
            Ok(())
        }
    };
    check_removed(removed)?;
    let mut replaced: Vec<bool> = values.iter().map(Option::is_none).collect();
    // repeat until every flagged sample is one that was already replaced, so
    // that a second pass over the output reproduces it
    loop {
        let filled = fill_gaps(&values, cfg.max_gap, label)?;
        let flagged = hampel_outliers(
            &detrend_slice(&filled),
            cfg.outlier_half_window,
            cfg.outlier_mad,
            cfg.max_gap,
        );
        let fresh: Vec<usize> = flagged.into_iter().filter(|&k| !replaced[k]).collect();
        if fresh.is_empty() {
            return Ok(filled);
        }
        removed += fresh.len();
        check_removed(removed)?;
        values = filled.into_iter().map(Some).collect();
        for (k, v) in values.iter_mut().enumerate() {
            if replaced[k] {
                *v = None;
            }
        }
        for k in fresh {
            replaced[k] = true;
            values[k] = None;
        }
    }
}

/// Least-squares sampling interval. Each sample gets an integer grid index
/// by rounding its spacing to the median spacing, then the slope of time
/// against index is pooled over all channels.
fn nominal_dt(raw: &RawChannels, median: f64) -> f64 {
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for s in &raw.series {
        let mut idx = Vec::with_capacity(s.times.len());
        let mut k = 0.0;
        idx.push(k);
        for w in s.times.windows(2) {
            k += ((w[1] - w[0]) / median).round().max(1.0);
            idx.push(k);
        }
        let m = idx.len() as f64;
        let kbar = idx.iter().sum::<f64>() / m;
        let tbar = s.times.iter().sum::<f64>() / m;
        for (&k, &t) in idx.iter().zip(&s.times) {
            sxy += (k - kbar) * (t - tbar);
            sxx += (k - kbar) * (k - kbar);
        }
    }
    if sxx > 0.0 {
        sxy / sxx
    } else {
        median
    }
}

/// Places every channel on a common uniform grid, repairs gaps and
/// replaces outliers.
pub fn clean(raw: &RawChannels, cfg: &CleanConfig) -> Result<ChannelSet> {
    if raw.series.is_empty() {
        return Err(Error::DataQuality("no channels in input".into()));
    }
    let mut diffs = Vec::new();
    for s in &raw.series {
        if s.times.len() != s.values.len() {
            return Err(Error::DataQuality(format!(
                "channel {} has mismatched time and value counts",
                s.label
            )));
        }
        if s.times.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "channel {} has fewer than 2 samples",
                s.label
            )));
        }
        for w in s.times.windows(2) {
            let d = w[1] - w[0];
            if !(d > 0.0) {
                return Err(Error::Resampling(format!(
                    "channel {}: timestamps not strictly increasing at t = {}",
                    s.label, w[1]
                )));
            }
            diffs.push(d);
        }
    }
    let dt = nominal_dt(raw, median_in_place(&mut diffs));
    let start = raw.series.iter().map(|s| s.times[0]).fold(f64::NEG_INFINITY, f64::max);
    let end = raw
        .series
        .iter()
        .map(|s| *s.times.last().expect("non-empty"))
        .fold(f64::INFINITY, f64::min);
    if end <= start {
        return Err(Error::Resampling("channels do not overlap in time".into()));
    }
    let n = ((end - start) / dt + cfg.jitter_tol).floor() as usize + 1;
    if n < 2 {
        return Err(Error::InsufficientData("fewer than 2 grid samples".into()));
    }

    let channels = raw
        .series
        .iter()
        .map(|s| {
            let grid = to_grid(s, start, dt, n, cfg)?;
            Ok(Channel {
                label: s.label.clone(),
                samples: clean_channel(grid, &s.label, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ChannelSet::new(dt, start, channels)
}

/// Subtracts the least-squares line (over sample index) from each channel.
pub fn detrend(cs: &ChannelSet) -> ChannelSet {
    cs.try_map(0, |x| Ok(detrend_slice(x)))
        .expect("detrending preserves channel-set invariants")
}

/// Zero-phase Butterworth low-pass applied to each channel.
pub fn lowpass_denoise(cs: &ChannelSet, f_cut: f64, order: usize) -> Result<ChannelSet> {
    let sos = filter::design_butterworth_lowpass(f_cut, order, cs.dt())?;
    cs.try_map(0, |x| filter::filtfilt(x, &sos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn rec(v: f64, tv: f64, i: f64, ti: f64) -> PhasorRecord {
        PhasorRecord {
            t: 0.0,
            plant: "1".into(),
            v,
            theta_v: tv,
            i,
            theta_i: ti,
            quality: Quality::Good,
        }
    }

    fn single(samples: Vec<f64>) -> ChannelSet {
        ChannelSet::new(
            1.0 / 30.0,
            0.0,
            vec![Channel {
                label: ChannelLabel::new("A", ChannelKind::P),
                samples,
            }],
        )
        .unwrap()
    }

    #[test]
    fn pq_basic_cases() {
        let (p, q) = compute_pq(&rec(1.0, 0.0, 1.0, 0.0), 0).unwrap();
        assert_eq!((p, q), (1.0, 0.0));
        let (p, q) = compute_pq(&rec(1.0, PI / 2.0, 1.0, 0.0), 0).unwrap();
        assert!(p.abs() < 1e-15 && (q - 1.0).abs() < 1e-15);
        let (p, q) = compute_pq(&rec(1.02, 0.3, 0.5, 0.1), 0).unwrap();
        assert!((p - 0.51 * 0.2f64.cos()).abs() < 1e-14);
        assert!((q - 0.51 * 0.2f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn pq_rejects_non_finite_with_index() {
        match compute_pq(&rec(f64::NAN, 0.0, 1.0, 0.0), 17) {
            Err(Error::RejectedSample { index, .. }) => assert_eq!(index, 17),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn pq_power_triangle(v in 0.0f64..2.0, i in 0.0f64..5.0, tv in -PI..PI, ti in -PI..PI) {
            let (p, q) = compute_pq(&rec(v, tv, i, ti), 0).unwrap();
            let s = v * i;
            prop_assert!((p * p + q * q - s * s).abs() <= 1e-12 * (1.0 + s * s));
        }

        #[test]
        fn detrend_is_projection(xs in prop::collection::vec(-1e3f64..1e3, 3..200)) {
            let cs = single(xs);
            let once = detrend(&cs);
            let twice = detrend(&once);
            let scale = once.channels()[0].samples.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in once.channels()[0].samples.iter().zip(&twice.channels()[0].samples) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn clean_is_idempotent(
            amp in 0.1f64..10.0,
            f in 0.2f64..5.0,
            noise in prop::collection::vec(-0.05f64..0.05, 300),
            spike_at in 20usize..280,
        ) {
            let mut x: Vec<f64> = (0..300)
                .map(|k| amp * (2.0 * PI * f * k as f64 / 30.0).sin() + noise[k] * amp)
                .collect();
            x[spike_at] += 50.0 * amp;
            let once = clean(&single(x).to_raw(), &CleanConfig::default()).unwrap();
            let twice = clean(&once.to_raw(), &CleanConfig::default()).unwrap();
            prop_assert_eq!(once.len(), twice.len());
            prop_assert!((once.dt() - twice.dt()).abs() <= 1e-12 * once.dt());
            let (a, b) = (&once.channels()[0].samples, &twice.channels()[0].samples);
            for k in 0..a.len() {
                prop_assert!((a[k] - b[k]).abs() <= 1e-12 * amp, "sample {}: {} vs {}", k, a[k], b[k]);
            }
        }
    }

    #[test]
    fn clean_identity_on_clean_data() {
        let x: Vec<f64> = (0..300).map(|k| (2.0 * PI * 1.3 * k as f64 / 30.0).sin()).collect();
        let cs = single(x.clone());
        let out = clean(&cs.to_raw(), &CleanConfig::default()).unwrap();
        assert_eq!(out.channels()[0].samples, x);
        assert!((out.dt() - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn clean_keeps_a_strong_ringdown() {
        // global MAD would flag the early, large swings of a fast-decaying mode
        let x: Vec<f64> = (0..900)
            .map(|k| {
                let t = k as f64 / 30.0;
                (-0.3 * t).exp() * (2.0 * PI * 1.41 * t).cos()
            })
            .collect();
        let out = clean(&single(x.clone()).to_raw(), &CleanConfig::default()).unwrap();
        assert_eq!(out.channels()[0].samples, x);
    }

    #[test]
    fn clean_replaces_spike_by_interpolation() {
        let mut x: Vec<f64> = (0..300).map(|k| (2.0 * PI * 0.7 * k as f64 / 30.0).sin()).collect();
        let std = (x.iter().map(|v| v * v).sum::<f64>() / 300.0).sqrt();
        let k0 = 150;
        let expected = 0.5 * (x[k0 - 1] + x[k0 + 1]);
        x[k0] += 100.0 * std;
        let out = clean(&single(x).to_raw(), &CleanConfig::default()).unwrap();
        assert!((out.channels()[0].samples[k0] - expected).abs() < 1e-12);
    }

    #[test]
    fn clean_keeps_level_change_near_edge() {
        // square wave whose last half cycle is cut to 10 samples
        let x: Vec<f64> = (0..300)
            .map(|k| if (k + 85) / 75 % 2 == 1 { 0.5 } else { -0.5 })
            .collect();
        assert_eq!(x[289], -0.5);
        assert_eq!(x[290], 0.5);
        let out = clean(&single(x.clone()).to_raw(), &CleanConfig::default()).unwrap();
        assert_eq!(out.channels()[0].samples, x);
    }

    #[test]
    fn clean_rejects_thirty_percent_missing() {
        let mut raw = single((0..100).map(|k| k as f64).collect()).to_raw();
        // every third sample missing keeps each gap short
        for k in (0..100).filter(|k| k % 3 == 1) {
            raw.series[0].values[k] = None;
        }
        assert!(matches!(
            clean(&raw, &CleanConfig::default()),
            Err(Error::DataQuality(_))
        ));
    }

    #[test]
    fn clean_rejects_long_gap() {
        let mut raw = single((0..100).map(|k| (k as f64 * 0.1).sin()).collect()).to_raw();
        for k in 40..47 {
            raw.series[0].values[k] = None;
        }
        assert!(matches!(
            clean(&raw, &CleanConfig::default()),
            Err(Error::DataQuality(_))
        ));
    }

    #[test]
    fn clean_snaps_small_jitter_and_resamples_large() {
        let dt = 1.0 / 30.0;
        let n = 120;
        let f = |t: f64| (2.0 * PI * 0.5 * t).sin();
        let mut times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        for (k, t) in times.iter_mut().enumerate() {
            if k % 2 == 1 {
                *t += 0.005 * dt;
            }
        }
        let series = RawSeries {
            label: ChannelLabel::new("A", ChannelKind::P),
            values: times.iter().map(|&t| Some(f(t))).collect(),
            times: times.clone(),
        };
        let out = clean(&RawChannels { series: vec![series] }, &CleanConfig::default()).unwrap();
        assert_eq!(out.len(), n);

        // 20% jitter forces linear resampling onto the uniform grid
        let times: Vec<f64> = (0..n)
            .map(|k| k as f64 * dt + if k % 2 == 1 { 0.2 * dt } else { 0.0 })
            .collect();
        let series = RawSeries {
            label: ChannelLabel::new("A", ChannelKind::P),
            values: times.iter().map(|&t| Some(f(t))).collect(),
            times,
        };
        let out = clean(&RawChannels { series: vec![series] }, &CleanConfig::default()).unwrap();
        for k in 0..out.len() {
            assert!((out.channels()[0].samples[k] - f(out.time(k))).abs() < 2e-3);
        }
    }

    #[test]
    fn clean_rejects_non_monotone_time() {
        let raw = RawChannels {
            series: vec![RawSeries {
                label: ChannelLabel::new("A", ChannelKind::P),
                times: vec![0.0, 0.1, 0.1, 0.2],
                values: vec![Some(1.0); 4],
            }],
        };
        assert!(matches!(
            clean(&raw, &CleanConfig::default()),
            Err(Error::Resampling(_))
        ));
    }

    #[test]
    fn detrend_examples() {
        let out = detrend(&single(vec![3.5; 50]));
        assert!(out.channels()[0].samples.iter().all(|v| v.abs() < 1e-12));
        let out = detrend(&single((0..50).map(|k| 0.7 * k as f64 - 2.0).collect()));
        assert!(out.channels()[0].samples.iter().all(|v| v.abs() < 1e-9));

        // ten cycles of a cosine; a sine at the same length leaks ~8% into the fitted line
        let dt = 1.0 / 30.0;
        let sine: Vec<f64> = (0..300).map(|k| (2.0 * PI * 1.0 * k as f64 * dt).cos()).collect();
        let ramp: Vec<f64> = sine
            .iter()
            .enumerate()
            .map(|(k, s)| s + 0.05 * k as f64 + 4.0)
            .collect();
        let out = detrend(&single(ramp));
        let err: f64 = out.channels()[0]
            .samples
            .iter()
            .zip(&sine)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        let rms: f64 = sine.iter().map(|v| v * v).sum::<f64>();
        assert!((err / rms).sqrt() < 0.01);
    }

    #[test]
    fn lowpass_examples() {
        let dt = 1.0 / 30.0;
        let dc = single(vec![2.5; 300]);
        let out = lowpass_denoise(&dc, 3.0, 4).unwrap();
        assert!(out.channels()[0].samples.iter().all(|v| (v - 2.5).abs() < 1e-9));

        let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        // whole number of cycles so the reflected padding continues the wave
        let hi: Vec<f64> = (0..601).map(|k| (2.0 * PI * 10.0 * k as f64 * dt).sin()).collect();
        let out = lowpass_denoise(&single(hi.clone()), 3.0, 4).unwrap();
        assert!(rms(&out.channels()[0].samples) < 0.05 * rms(&hi));

        let lo: Vec<f64> = (0..1200).map(|k| (2.0 * PI * 0.3 * k as f64 * dt).sin()).collect();
        let out = lowpass_denoise(&single(lo.clone()), 3.0, 4).unwrap();
        let mid = 300..900;
        let ratio = rms(&out.channels()[0].samples[mid.clone()]) / rms(&lo[mid]);
        assert!((ratio - 1.0).abs() < 0.01);

        assert!(matches!(lowpass_denoise(&dc, 15.0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn reads_phasor_csv_and_groups_plants() {
        let text = "t,plant,V,theta_V,I,theta_I,quality\n\
                    0.0,30,1.0,0.0,1.0,0.0,good\n\
                    0.0,31,1.0,0.5,2.0,0.5,\n\
                    0.1,30,1.0,0.0,1.0,0.0,bad\n\
                    0.1,31,1.0,0.5,2.0,0.5,good\n\
                    0.2,30,1.0,0.0,1.0,0.0,good\n\
                    0.2,31,1.0,0.5,2.0,0.5,good\n";
        let raw = read_csv(text.as_bytes(), None).unwrap();
        let labels: Vec<String> = raw.series.iter().map(|s| s.label.to_string()).collect();
        assert_eq!(labels, ["30:P", "30:Q", "31:P", "31:Q"]);
        assert_eq!(raw.series[0].values, vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(raw.series[2].values, vec![Some(2.0); 3]);
    }

    #[test]
    fn reads_direct_csv_with_missing_cells() {
        let text = "t,45:P,45:Q,159:P\n0,1,2,3\n0.1,,2,3\n0.2,1,NaN,3\n";
        let raw = read_csv(text.as_bytes(), None).unwrap();
        assert_eq!(raw.series.len(), 3);
        assert_eq!(raw.series[0].values[1], None);
        assert_eq!(raw.series[1].values[2], None);
        assert_eq!(raw.series[2].label, ChannelLabel::new("159", ChannelKind::P));
    }

    #[test]
    fn empty_input_is_a_data_quality_error() {
        let err = read_csv("".as_bytes(), None).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let err = read_csv("t,A:P\n".as_bytes(), None).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn csv_round_trip() {
        let wave = |f: f64| -> Vec<f64> { (0..64).map(|k| (f * k as f64).sin() / 3.0).collect() };
        let cs = ChannelSet::new(
            0.5,
            1.0,
            vec![
                Channel {
                    label: ChannelLabel::new("x", ChannelKind::P),
                    samples: wave(0.3),
                },
                Channel {
                    label: ChannelLabel::new("x", ChannelKind::Q),
                    samples: wave(0.71),
                },
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        cs.write_csv(&mut buf).unwrap();
        let back = clean(&read_csv(buf.as_slice(), None).unwrap(), &CleanConfig::default()).unwrap();
        assert_eq!(back, cs);
    }
}
