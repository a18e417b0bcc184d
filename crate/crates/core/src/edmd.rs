//! Extended dynamic mode decomposition over P/Q observables.
//!
//! The dictionary is the identity over the measured channels, so each
//! snapshot column is already the lifted observable vector. The operator is
//! estimated as `K = G^+ H` and used in its transposed form `M_K = K^T`,
//! whose eigenvectors carry the modal information.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::eig;
use crate::error::{Error, Result};
use crate::ingest::{ChannelLabel, ChannelSet};

/// Relative cutoff below which singular values of `G` count as zero.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SnapshotPair {
    /// Observables at steps `0..M`, one column per snapshot.
    pub x: DMatrix<f64>,
    /// Observables at steps `1..=M`.
    pub y: DMatrix<f64>,
    pub labels: Vec<ChannelLabel>,
    pub dt: f64,
}

impl SnapshotPair {
    pub fn n_observables(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.x.ncols()
    }
}

pub fn build_snapshots(cs: &ChannelSet) -> Result<SnapshotPair> {
    let n = cs.n_channels();
    let total = cs.len();
    if total < n + 1 {
        return Err(Error::InsufficientData(format!(
            "{n} observables need at least {} samples per channel, got {total}",
            n + 1
        )));
    }
    let m = total - 1;
    let chans = cs.channels();
    let x = DMatrix::from_fn(n, m, |i, j| chans[i].samples[j]);
    let y = DMatrix::from_fn(n, m, |i, j| chans[i].samples[j + 1]);
    Ok(SnapshotPair {
        x,
        y,
        labels: cs.labels(),
        dt: cs.dt(),
    })
}

/// Finite-dimensional Koopman approximation together with the SVD of `G`.
#[derive(Debug, Clone)]
pub struct KoopmanOperator {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub m_k: DMatrix<f64>,
    /// Singular values of `G`, descending.
    pub singular_values: Vec<f64>,
    /// Left singular vectors of `G`, columns ordered like `singular_values`.
    pub u: DMatrix<f64>,
    /// Right singular vectors of `G`.
    pub r: DMatrix<f64>,
    pub labels: Vec<ChannelLabel>,
    pub dt: f64,
}

impl KoopmanOperator {
    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    /// Number of singular values above the relative rank cutoff.
    pub fn numerical_rank(&self) -> usize {
        let s1 = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|&&s| s > RANK_TOL * s1).count()
    }

    /// Builds the operator directly from `G` and `H`.
    pub fn from_gh(g: DMatrix<f64>, h: DMatrix<f64>, labels: Vec<ChannelLabel>, dt: f64) -> Result<Self> {
        let n = g.nrows();
        if g.ncols() != n || h.shape() != (n, n) || labels.len() != n {
            return Err(Error::Config("G, H and labels must agree in dimension".into()));
        }
        let svd = g.clone().svd(true, true);
        let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let singular_values: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
        let u = DMatrix::from_fn(n, n, |i, j| u[(i, order[j])]);
        let r = DMatrix::from_fn(n, n, |i, j| vt[(order[j], i)]);

        let s1 = singular_values[0];
        if !(s1 > 0.0) || !s1.is_finite() {
            return Err(Error::DegenerateData(
                "observable Gram matrix is zero; all channels are identically zero".into(),
            ));
        }
        // G^+ = R diag(1/sigma) U^T over the numerically nonzero singular values
        let mut g_pinv = DMatrix::<f64>::zeros(n, n);
        for (k, &s) in singular_values.iter().enumerate() {
            if s <= RANK_TOL * s1 {
                break;
            }
            g_pinv += (r.column(k) * u.column(k).transpose()) / s;
        }
        let k_op = &g_pinv * &h;
        Ok(Self {
            m_k: k_op.transpose(),
            g,
            h,
            singular_values,
            u,
            r,
            labels,
            dt,
        })
    }
}

/// `G = X X^T / M`, `H = X Y^T / M`, `M_K = (G^+ H)^T`.
pub fn estimate_operator(sp: &SnapshotPair) -> Result<KoopmanOperator> {
    let m = sp.n_snapshots() as f64;
    let g = (&sp.x * sp.x.transpose()) / m;
    let h = (&sp.x * sp.y.transpose()) / m;
    KoopmanOperator::from_gh(g, h, sp.labels.clone(), sp.dt)
}

/// First index where the discrete second difference of the singular values
/// changes sign, i.e. the number of singular values kept before the bend.
/// Curvatures within `RANK_TOL * sigma_1` of zero carry no sign.
pub fn elbow_index(sigma: &[f64]) -> Option<usize> {
    if sigma.len() < 3 {
        return None;
    }
    let tol = RANK_TOL * sigma[0].abs();
    let mut prev: Option<f64> = None;
    for k in 1..sigma.len() - 1 {
        let d2 = sigma[k + 1] - 2.0 * sigma[k] + sigma[k - 1];
        if d2.abs() <= tol {
            continue;
        }
        let s = d2.signum();
        match prev {
            Some(p) if p != s => return Some(k),
            _ => prev = Some(s),
        }
    }
    None
}

/// Truncation order: the larger of the elbow index and two states per
/// dominant spectral mode, clamped to `[2, n]`. An override wins.
pub fn select_truncation(sigma: &[f64], n_dominant_modes: usize, override_r: Option<usize>) -> usize {
    if let Some(r) = override_r {
        return r;
    }
    let n = sigma.len();
    let r = elbow_index(sigma).unwrap_or(0).max(2 * n_dominant_modes.max(1));
    r.clamp(2.min(n), n)
}

/// Reduced operator spectrum with eigenvectors projected back to the
/// observable space.
#[derive(Debug, Clone)]
pub struct KoopmanDecomposition {
    /// Discrete-time eigenvalues: descending modulus, conjugate pairs
    /// adjacent with the positive imaginary member first.
    pub mu: Vec<Complex64>,
    /// `n x r` right eigenvectors.
    pub phi_hat: DMatrix<Complex64>,
    /// `r x n` left eigenvectors, the pseudoinverse of `phi_hat`.
    pub xi_hat: DMatrix<Complex64>,
    pub m_tilde: DMatrix<f64>,
    pub r: usize,
    pub dt: f64,
    pub labels: Vec<ChannelLabel>,
}

impl KoopmanDecomposition {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn continuous(&self) -> Result<Vec<ContinuousMode>> {
        self.mu.iter().map(|&m| to_continuous(m, self.dt)).collect()
    }
}

/// Projects onto the leading `r` singular directions of `G`:
/// `M~ = U_r^* H R_r Sigma_r^-1`, `Phi^ = U_r Phi~`, `Xi^ = Phi^+`.
pub fn reduce_and_decompose(op: &KoopmanOperator, r: usize) -> Result<KoopmanDecomposition> {
    let n = op.n();
    if r == 0 || r > n {
        return Err(Error::Config(format!("truncation order must be in 1..={n}, got {r}")));
    }
    let ratio = op.singular_values[r - 1] / op.singular_values[0];
    if !(ratio >= RANK_TOL) {
        return Err(Error::IllConditionedTruncation { r, ratio });
    }
    let u_r = op.u.columns(0, r).into_owned();
    let r_r = op.r.columns(0, r).into_owned();
    let inv_sigma = DMatrix::from_diagonal(&DVector::from_iterator(
        r,
        op.singular_values[..r].iter().map(|s| 1.0 / s),
    ));
    let m_tilde = u_r.transpose() * &op.h * r_r * inv_sigma;

    let e = eig::eig_real(&m_tilde)?;
    let u_c = u_r.map(|x| Complex64::new(x, 0.0));
    let phi_hat = &u_c * &e.vectors;
    let xi_hat = phi_hat
        .clone()
        .pseudo_inverse(RANK_TOL)
        .map_err(|m| Error::DegenerateData(format!("eigenvector pseudoinverse failed: {m}")))?;
    Ok(KoopmanDecomposition {
        mu: e.values,
        phi_hat,
        xi_hat,
        m_tilde,
        r,
        dt: op.dt,
        labels: op.labels.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousMode {
    pub lambda: Complex64,
    pub freq_hz: f64,
    pub damping_ratio: f64,
}

/// `lambda = ln(mu) / dt` on the principal branch, with frequency in Hz and
/// damping ratio `-sigma / |lambda|` (zero for `lambda = 0`).
pub fn to_continuous(mu: Complex64, dt: f64) -> Result<ContinuousMode> {
    if mu.norm() == 0.0 || !mu.is_finite() {
        return Err(Error::UndefinedEigenvalue);
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("sampling interval must be > 0, got {dt}")));
    }
    let lambda = mu.ln() / dt;
    let mag = lambda.norm();
    let damping_ratio = if mag == 0.0 { 0.0 } else { -lambda.re / mag };
    Ok(ContinuousMode {
        lambda,
        freq_hz: lambda.im.abs() / (2.0 * std::f64::consts::PI),
        damping_ratio,
    })
}

/// Intermediate EDMD quantities for offline inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdmdDebug {
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    #[serde(rename = "M_tilde")]
    pub m_tilde: Vec<Vec<f64>>,
    pub mu_re: Vec<f64>,
    pub mu_im: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl EdmdDebug {
    pub fn new(op: &KoopmanOperator, dec: &KoopmanDecomposition) -> Self {
        Self {
            g: rows(&op.g),
            h: rows(&op.h),
            sigma: op.singular_values.clone(),
            m_tilde: rows(&dec.m_tilde),
            mu_re: dec.mu.iter().map(|m| m.re).collect(),
            mu_im: dec.mu.iter().map(|m| m.im).collect(),
        }
    }
}
