//! Mode matching and plant participation.

use std::collections::BTreeMap;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::edmd::{to_continuous, KoopmanDecomposition};
use crate::error::{Error, Result};
use crate::ingest::{ChannelKind, ChannelLabel};

/// Relative frequency mismatch accepted by [`match_mode`].
pub const MATCH_TOL: f64 = 0.15;

/// How complex channel participations are combined into one plant score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum of magnitudes.
    #[default]
    MagSum,
    /// Magnitude of the complex sum.
    SumMag,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mag_sum" => Ok(Aggregation::MagSum),
            "sum_mag" => Ok(Aggregation::SumMag),
            other => Err(Error::Config(format!(
                "aggregation must be mag_sum or sum_mag, got '{other}'"
            ))),
        }
    }
}

/// `p_s = Phi^[s, i] * Xi^[i, s]` for every channel `s`.
pub fn participation_factors(dec: &KoopmanDecomposition, mode_index: usize) -> Result<Vec<Complex64>> {
    if mode_index >= dec.len() {
        return Err(Error::IndexOutOfRange {
            index: mode_index,
            len: dec.len(),
        });
    }
    Ok((0..dec.phi_hat.nrows())
        .map(|s| dec.phi_hat[(s, mode_index)] * dec.xi_hat[(mode_index, s)])
        .collect())
}

pub fn aggregate_by_plant(p: &[Complex64], labels: &[ChannelLabel], rule: Aggregation) -> BTreeMap<String, f64> {
    assert_eq!(p.len(), labels.len(), "one label per participation factor");
    let mut sums: BTreeMap<String, (f64, Complex64)> = BTreeMap::new();
    for (v, label) in p.iter().zip(labels) {
        let e = sums.entry(label.plant.clone()).or_default();
        e.0 += v.norm();
        e.1 += v;
    }
    sums.into_iter()
        .map(|(k, (mag, sum))| {
            let score = match rule {
                Aggregation::MagSum => mag,
                Aggregation::SumMag => sum.norm(),
            };
            (k, score)
        })
        .collect()
}

/// Divides by the largest value so that the top plant scores exactly 1.
pub fn normalize(scores: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    let max = scores.values().copied().fold(0.0, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::DegenerateMode);
    }
    Ok(scores.iter().map(|(k, v)| (k.clone(), v / max)).collect())
}

/// Index of the positive-frequency eigenvalue closest to `f_s`.
pub fn match_mode(dec: &KoopmanDecomposition, f_s: f64) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &mu) in dec.mu.iter().enumerate() {
        if mu.im <= 0.0 {
            continue;
        }
        let cm = to_continuous(mu, dec.dt)?;
        let d = (cm.freq_hz - f_s).abs();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    match best {
        Some((i, d)) if d <= MATCH_TOL * f_s => Ok(i),
        Some((i, _)) => Err(Error::NoMatchingMode {
            f_s,
            nearest: format!("{:.4} Hz", to_continuous(dec.mu[i], dec.dt)?.freq_hz),
        }),
        None => Err(Error::NoMatchingMode {
            f_s,
            nearest: "no oscillatory eigenvalue".into(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParticipation {
    pub id: String,
    pub participation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParticipation {
    pub plant: String,
    pub kind: ChannelKind,
    pub p_re: f64,
    pub p_im: f64,
}

/// One identified mode with its normalized plant participation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    /// Requested (spectral) frequency.
    pub f_s: f64,
    pub freq_hz: f64,
    pub damping_pct: f64,
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub r: usize,
    /// Normalized participation per plant, in plant-id order.
    pub plants: Vec<PlantParticipation>,
    pub channels: Vec<ChannelParticipation>,
}

impl ModeReport {
    pub fn build(dec: &KoopmanDecomposition, f_s: f64, rule: Aggregation) -> Result<Self> {
        let i = match_mode(dec, f_s)?;
        let cm = to_continuous(dec.mu[i], dec.dt)?;
        let p = participation_factors(dec, i)?;
        let plants = normalize(&aggregate_by_plant(&p, &dec.labels, rule))?
            .into_iter()
            .map(|(id, participation)| PlantParticipation { id, participation })
            .collect();
        let channels = p
            .iter()
            .zip(&dec.labels)
            .map(|(v, l)| ChannelParticipation {
                plant: l.plant.clone(),
                kind: l.kind,
                p_re: v.re,
                p_im: v.im,
            })
            .collect();
        Ok(Self {
            f_s,
            freq_hz: cm.freq_hz,
            damping_pct: 100.0 * cm.damping_ratio,
            lambda_re: cm.lambda.re,
            lambda_im: cm.lambda.im,
            r: dec.r,
            plants,
            channels,
        })
    }

    pub fn lambda(&self) -> Complex64 {
        Complex64::new(self.lambda_re, self.lambda_im)
    }

    pub fn channel_sum(&self) -> Complex64 {
        self.channels.iter().map(|c| Complex64::new(c.p_re, c.p_im)).sum()
    }

    /// `plant,participation` rows for bar charts.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["plant", "participation"])?;
        for p in &self.plants {
            w.write_record([p.id.as_str(), &p.participation.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Plants by descending participation, ties in plant-id order.
pub fn rank_contributors(report: &ModeReport, top_k: usize) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = report.plants.iter().map(|p| (p.id.clone(), p.participation)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(top_k);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edmd::{reduce_and_decompose, KoopmanOperator};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    type C = Complex64;

    fn labels(plants: &[&str]) -> Vec<ChannelLabel> {
        plants
            .iter()
            .flat_map(|p| {
                [
                    ChannelLabel::new(*p, ChannelKind::P),
                    ChannelLabel::new(*p, ChannelKind::Q),
                ]
            })
            .collect()
    }

    /// Decomposition of an operator given directly, with an identity Gram matrix.
    fn decompose(m_k: DMatrix<f64>, labels: Vec<ChannelLabel>, dt: f64) -> KoopmanDecomposition {
        let n = m_k.nrows();
        let op = KoopmanOperator::from_gh(DMatrix::identity(n, n), m_k.transpose(), labels, dt).unwrap();
        reduce_and_decompose(&op, n).unwrap()
    }

    /// Real matrix `V diag V^-1` whose complex pairs come from `rot(rho, theta)` blocks.
    fn block_system(v: &DMatrix<f64>, blocks: &[(f64, f64)]) -> DMatrix<f64> {
        let n = v.nrows();
        let mut d = DMatrix::<f64>::zeros(n, n);
        for (b, &(rho, th)) in blocks.iter().enumerate() {
            let k = 2 * b;
            d[(k, k)] = rho * th.cos();
            d[(k, k + 1)] = -rho * th.sin();
            d[(k + 1, k)] = rho * th.sin();
            d[(k + 1, k + 1)] = rho * th.cos();
        }
        v * d * v.clone().try_inverse().unwrap()
    }

    #[test]
    fn normal_operator_gives_squared_magnitudes() {
        let th = 2.0 * PI * 0.3;
        let m = DMatrix::from_row_slice(2, 2, &[0.9 * th.cos(), -0.9 * th.sin(), 0.9 * th.sin(), 0.9 * th.cos()]);
        let dec = decompose(m, labels(&["A"]), 1.0);
        for i in 0..2 {
            let p = participation_factors(&dec, i).unwrap();
            for (s, v) in p.iter().enumerate() {
                assert!((v - C::new(dec.phi_hat[(s, i)].norm_sqr(), 0.0)).norm() < 1e-12);
            }
            assert!((p.iter().sum::<C>() - C::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn decoupled_states_participate_alone() {
        let dec = decompose(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.5]),
            labels(&["A"]),
            1.0,
        );
        let p = participation_factors(&dec, 0).unwrap();
        assert!((p[0] - C::new(1.0, 0.0)).norm() < 1e-12 && p[1].norm() < 1e-12);
        assert!(matches!(
            participation_factors(&dec, 2),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn energetic_plant_dominates_and_matches_analytic_products() {
        // mode 1 lives mostly on plant A, mode 2 on plant B
        let v = DMatrix::from_row_slice(
            4,
            4,
            &[
                10.0, 3.0, 0.4, 0.1, //
                -4.0, 8.0, 0.2, -0.3, //
                1.0, 0.2, 5.0, 1.0, //
                0.3, -1.0, -2.0, 4.0,
            ],
        );
        let m = block_system(&v, &[(0.97, 0.3), (0.9, 0.8)]);
        let dec = decompose(m, labels(&["A", "B"]), 1.0);
        let i = match_mode(&dec, 0.3 / (2.0 * PI)).unwrap();
        let p = participation_factors(&dec, i).unwrap();

        // analytic eigenvectors: a - ib belongs to rho e^{+i theta} of a rotation block on (a, b)
        let mut full = DMatrix::<C>::zeros(4, 4);
        for r in 0..4 {
            for b in 0..2 {
                full[(r, 2 * b)] = C::new(v[(r, 2 * b)], -v[(r, 2 * b + 1)]);
                full[(r, 2 * b + 1)] = C::new(v[(r, 2 * b)], v[(r, 2 * b + 1)]);
            }
        }
        let left = full.clone().try_inverse().unwrap();
        assert!((dec.mu[i] - C::from_polar(0.97, 0.3)).norm() < 1e-12);
        for s in 0..4 {
            let analytic = full[(s, 0)] * left[(0, s)];
            assert!((p[s] - analytic).norm() < 1e-9, "s={s}: {} vs {}", p[s], analytic);
        }
        let plants = normalize(&aggregate_by_plant(&p, &dec.labels, Aggregation::MagSum)).unwrap();
        assert_eq!(plants["A"], 1.0);
        assert!(plants["B"] < 0.2);
    }

    #[test]
    fn aggregation_examples() {
        let one = labels(&["A"]);
        let p = [C::new(0.3, 0.1), C::new(-0.2, 0.0)];
        let agg = aggregate_by_plant(&p, &one, Aggregation::MagSum);
        assert!((agg["A"] - (0.1f64.hypot(0.3) + 0.2)).abs() < 1e-15);

        let two = labels(&["A", "B"]);
        let p = [0.6, 0.4, 0.0, 0.0].map(|x| C::new(x, 0.0));
        let agg = aggregate_by_plant(&p, &two, Aggregation::MagSum);
        assert_eq!((agg["A"], agg["B"]), (1.0, 0.0));

        let p = [C::new(0.5, 0.3), C::new(0.5, -0.3)];
        let mag = aggregate_by_plant(&p, &one, Aggregation::MagSum)["A"];
        let sum = aggregate_by_plant(&p, &one, Aggregation::SumMag)["A"];
        assert!((mag - 2.0 * 0.34f64.sqrt()).abs() < 1e-15);
        assert!((mag - 1.1662).abs() < 1e-4);
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let m = |pairs: &[(&str, f64)]| -> BTreeMap<String, f64> {
            pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
        };
        assert_eq!(
            normalize(&m(&[("A", 2.0), ("B", 1.0)])).unwrap(),
            m(&[("A", 1.0), ("B", 0.5)])
        );
        assert_eq!(normalize(&m(&[("A", 7.0)])).unwrap(), m(&[("A", 1.0)]));
        assert!(matches!(
            normalize(&m(&[("A", 0.0), ("B", 0.0)])),
            Err(Error::DegenerateMode)
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_monotone(vals in prop::collection::vec(0.0f64..100.0, 1..12)) {
            prop_assume!(vals.iter().any(|&v| v > 0.0));
            let m: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("{i:02}"), *v)).collect();
            let once = normalize(&m).unwrap();
            prop_assert_eq!(&normalize(&once).unwrap(), &once);
            prop_assert_eq!(once.values().copied().fold(0.0, f64::max), 1.0);
            for (a, b) in m.keys().zip(m.keys().skip(1)) {
                prop_assert_eq!(m[a] < m[b], once[a] < once[b]);
            }
        }
    }

    /// Decomposition whose positive-frequency eigenvalues sit at `freqs` (Hz).
    fn with_freqs(freqs: &[f64], dt: f64) -> KoopmanDecomposition {
        let blocks: Vec<(f64, f64)> = freqs.iter().map(|f| (0.98, 2.0 * PI * f * dt)).collect();
        let n = 2 * freqs.len();
        let v = DMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.1 / (1.0 + (r + c) as f64) });
        let plants: Vec<String> = (0..freqs.len()).map(|i| i.to_string()).collect();
        let plant_refs: Vec<&str> = plants.iter().map(String::as_str).collect();
        decompose(block_system(&v, &blocks), labels(&plant_refs), dt)
    }

    #[test]
    fn match_mode_examples() {
        let dt = 1.0 / 30.0;
        let dec = with_freqs(&[9.39, 0.2], dt);
        let i = match_mode(&dec, 9.34).unwrap();
        assert!((to_continuous(dec.mu[i], dt).unwrap().freq_hz - 9.39).abs() < 1e-9);

        let dec = with_freqs(&[1.26, 1.39], dt);
        let i = match_mode(&dec, 1.41).unwrap();
        assert!((to_continuous(dec.mu[i], dt).unwrap().freq_hz - 1.39).abs() < 1e-9);
        assert!(dec.mu[i].im > 0.0);

        let dec = with_freqs(&[5.0], dt);
        assert!(matches!(match_mode(&dec, 1.0), Err(Error::NoMatchingMode { .. })));

        let dec = decompose(DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.5]), labels(&["A"]), dt);
        assert!(matches!(match_mode(&dec, 1.0), Err(Error::NoMatchingMode { .. })));
    }

    #[test]
    fn report_and_ranking() {
        let dt = 1.0 / 30.0;
        let dec = with_freqs(&[1.2, 0.5, 2.0], dt);
        let rep = ModeReport::build(&dec, 1.25, Aggregation::MagSum).unwrap();
        assert!((rep.freq_hz - 1.2).abs() < 1e-9);
        assert!(
            (rep.damping_pct
                - 100.0
                    * to_continuous(C::from_polar(0.98, 2.0 * PI * 1.2 * dt), dt)
                        .unwrap()
                        .damping_ratio)
                .abs()
                < 1e-9
        );
        assert!((rep.channel_sum() - C::new(1.0, 0.0)).norm() < 1e-9);
        assert_eq!(rep.plants.iter().map(|p| p.participation).fold(0.0, f64::max), 1.0);
        let ranked = rank_contributors(&rep, 2);
        assert_eq!(ranked.len(), 2);
        assert_eq!(ranked[0].0, "0");
        assert_eq!(ranked[0].1, 1.0);

        let v = serde_json::to_value(&rep).unwrap();
        for key in ["f_s", "freq_hz", "damping_pct", "r", "plants", "channels"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["plants"][0].get("id").is_some());
        assert_eq!(v["channels"][1]["kind"], "Q");

        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("plant,participation\n0,"));
    }

    #[test]
    fn ties_rank_lexicographically() {
        let rep = ModeReport {
            f_s: 1.0,
            freq_hz: 1.0,
            damping_pct: 1.0,
            lambda_re: 0.0,
            lambda_im: 0.0,
            r: 2,
            plants: ["b", "c", "a"]
                .iter()
                .map(|id| PlantParticipation {
                    id: id.to_string(),
                    participation: 1.0,
                })
                .collect(),
            channels: vec![],
        };
        let ids: Vec<String> = rank_contributors(&rep, 10).into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn channel_permutation_permutes_participation() {
        let v = DMatrix::from_row_slice(
            4,
            4,
            &[
                3.0, 1.0, 0.2, 0.0, 1.0, 2.0, 0.0, 0.3, 0.5, 0.1, 2.0, 1.0, 0.0, 0.4, -1.0, 1.5,
            ],
        );
        let m = block_system(&v, &[(0.95, 0.4), (0.9, 1.1)]);
        let perm = [2, 3, 0, 1];
        let mp = DMatrix::from_fn(4, 4, |r, c| m[(perm[r], perm[c])]);
        let a = decompose(m, labels(&["A", "B"]), 1.0);
        let b = decompose(mp, labels(&["B", "A"]), 1.0);
        let pa = participation_factors(&a, match_mode(&a, 0.4 / (2.0 * PI)).unwrap()).unwrap();
        let pb = participation_factors(&b, match_mode(&b, 0.4 / (2.0 * PI)).unwrap()).unwrap();
        for s in 0..4 {
            assert!((pb[s] - pa[perm[s]]).norm() < 1e-9);
        }
    }
}
