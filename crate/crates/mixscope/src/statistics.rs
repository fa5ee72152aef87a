//! Sample statistics of the observed input process and of sending profiles.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::attack::ProfileMatrix;
use crate::error::{Error, Result};
use crate::mixer::ObservationWindow;

/// Per-sender mean and central moments of the per-round message counts.
///
/// Sample moments use the population normalization (divide by rho, not
/// rho - 1), matching the asymptotic regime they feed into.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputMoments {
    pub mean: Vec<f64>,
    /// Second central moment (variance).
    pub m2: Vec<f64>,
    /// Third central moment.
    pub m3: Vec<f64>,
    /// Fourth central moment.
    pub m4: Vec<f64>,
}

impl InputMoments {
    pub fn num_senders(&self) -> usize {
        self.mean.len()
    }
}

/// Sample moments of each sender's column of the observation window.
pub fn input_moments(obs: &ObservationWindow) -> Result<InputMoments> {
    let rho = obs.rho();
    if rho < 2 {
        return Err(Error::NotEnoughRounds { needed: 2, got: rho });
    }
    let n = obs.num_senders();
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut m3 = vec![0.0; n];
    let mut m4 = vec![0.0; n];
    for i in 0..n {
        let mut sum = 0.0;
        for r in 0..rho {
            sum += obs.sent(r, i) as f64;
        }
        let mu = sum / rho as f64;
        let (mut c2, mut c3, mut c4) = (0.0, 0.0, 0.0);
        for r in 0..rho {
            let d = obs.sent(r, i) as f64 - mu;
            let d2 = d * d;
            c2 += d2;
            c3 += d2 * d;
            c4 += d2 * d2;
        }
        mean[i] = mu;
        m2[i] = c2 / rho as f64;
        m3[i] = c3 / rho as f64;
        m4[i] = c4 / rho as f64;
    }
    Ok(InputMoments { mean, m2, m3, m4 })
}

/// Profile-derived quantities the error analysis consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileStats {
    /// N x M matrix of per-link Bernoulli variances `p * (1 - p)`.
    pub link_variance: DMatrix<f64>,
    /// Per-sender uniformity `1 - sum_j p_j^2`: zero for a single-contact
    /// sender, `(M - 1) / M` for a sender that spreads uniformly.
    pub uniformity: Vec<f64>,
}

impl ProfileStats {
    pub fn num_senders(&self) -> usize {
        self.uniformity.len()
    }
}

/// Compute link variances and uniformity of a row-stochastic profile.
pub fn profile_stats(profile: &ProfileMatrix) -> Result<ProfileStats> {
    let p = profile.matrix();
    for i in 0..p.nrows() {
        let sum: f64 = p.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-9 || p.row(i).iter().any(|&v| v < 0.0) {
            return Err(Error::NonStochasticRow { row: i, sum });
        }
    }
    let link_variance = DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| {
        let v = p[(i, j)];
        v * (1.0 - v)
    });
    let uniformity = (0..p.nrows())
        .map(|i| 1.0 - p.row(i).iter().map(|&v| v * v).sum::<f64>())
        .collect();
    Ok(ProfileStats {
        link_variance,
        uniformity,
    })
}
