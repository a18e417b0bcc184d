//! Synthetic events shared by the integration and acceptance suites.
#![allow(dead_code)]

use oscroot_core::synth::{Coupling, Forcing, ModeSpec, SyntheticScenario, Waveform};

pub const DT: f64 = 1.0 / 30.0;

/// P/Q mode shape over `n_plants` plants: plant `main` has unit amplitude,
/// the others between 0.1 and 0.17, with phases spread by `spread` rad.
pub fn shape(n_plants: usize, main: usize, spread: f64) -> Vec<[f64; 2]> {
    let mut v = Vec::with_capacity(2 * n_plants);
    for i in 0..n_plants {
        let amp = if i == main {
            1.0
        } else {
            0.1 + 0.07 * (i as f64 * spread).sin().abs()
        };
        let ph = spread * i as f64;
        v.push([amp * ph.cos(), amp * ph.sin()]);
        let ph_q = ph + 0.9 + spread;
        v.push([0.4 * amp * ph_q.cos(), 0.4 * amp * ph_q.sin()]);
    }
    v
}

fn ids(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Ten plants "30".."39", one 9.34 Hz mode at 0.78% damping led by plant
/// "30", 2.9 s at 30 Hz without noise.
pub fn single_mode() -> SyntheticScenario {
    let plants: Vec<String> = (30..40).map(|i| i.to_string()).collect();
    let mut shape = Vec::new();
    for i in 0..10 {
        let amp = if i == 0 { 1.0 } else { 0.15 + 0.05 * i as f64 };
        let ph = 0.3 * i as f64;
        shape.push([amp * ph.cos(), amp * ph.sin()]);
        let ph_q = ph + 1.2 + 0.1 * i as f64;
        shape.push([0.5 * amp * ph_q.cos(), 0.5 * amp * ph_q.sin()]);
    }
    SyntheticScenario {
        dt: DT,
        duration: 2.9,
        t0: 0.0,
        noise_std: 0.0,
        seed: 0,
        plants,
        modes: vec![ModeSpec {
            freq_hz: 9.34,
            damping_ratio: 0.0078,
            shape,
        }],
        forcing: None,
    }
}

/// Modes at 1.27 Hz (led by plant "45") and 1.41 Hz (led by "159"), both
/// at 2% damping, 40 s without noise.
pub fn two_mode() -> SyntheticScenario {
    SyntheticScenario {
        dt: DT,
        duration: 40.0,
        t0: 0.0,
        noise_std: 0.0,
        seed: 0,
        plants: ids(&["4", "45", "79", "159", "11", "65"]),
        modes: vec![
            ModeSpec {
                freq_hz: 1.27,
                damping_ratio: 0.02,
                shape: shape(6, 1, 0.7),
            },
            ModeSpec {
                freq_hz: 1.41,
                damping_ratio: 0.02,
                shape: shape(6, 3, 1.3),
            },
        ],
        forcing: None,
    }
}

/// Rectangular 0.4 Hz forcing injected at plant "4" over a weak natural
/// mode, 60 s with light noise.
pub fn forced() -> SyntheticScenario {
    let weak: Vec<[f64; 2]> = shape(4, 2, 0.9).into_iter().map(|[a, b]| [0.2 * a, 0.2 * b]).collect();
    SyntheticScenario {
        dt: DT,
        duration: 60.0,
        t0: 0.0,
        noise_std: 0.01,
        seed: 7,
        plants: ids(&["4", "11", "45", "159"]),
        modes: vec![ModeSpec {
            freq_hz: 0.86,
            damping_ratio: 0.05,
            shape: weak,
        }],
        forcing: Some(Forcing {
            freq_hz: 0.4,
            waveform: Waveform::Rectangular,
            amplitude: 1.0,
            channel: "4:P".into(),
            coupling: vec![
                Coupling {
                    channel: "4:Q".into(),
                    gain: 0.5,
                    phase_rad: 0.9,
                },
                Coupling {
                    channel: "11:P".into(),
                    gain: 0.2,
                    phase_rad: 2.0,
                },
            ],
        }),
    }
}
