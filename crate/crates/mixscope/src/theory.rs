//! Closed-form predictions of the attack's per-sender estimation error.
//!
//! For large windows the average per-sender squared error admits closed
//! forms in the input moments and the profile uniformities. With `u_k` the
//! uniformity of sender `k`, `mu` the mean round counts and `m2..m4` the
//! central moments, the predictions are
//!
//! ```text
//! multinomial outputs:   (1 / (rho * m2_i)) * (sum_k mu_k * u_k        + (m3_i / m2_i) * u_i)
//! max-variance outputs:  (1 / (rho * m2_i)) * (sum_k (mu_k^2 + m2_k) * u_k + (m4_i / m2_i) * u_i)
//! ```
//!
//! Both follow from sandwiching the per-receiver output covariance between
//! inverses of the input autocorrelation `R = mu mu^T + diag(m2)`; that
//! derivation path is exposed by [`profile_covariance`] as a diagnostic. Its
//! final simplification assumes the aggregate participation of the *other*
//! senders dominates (`sum_{k != i} mu_k^2 / m2_k` large), which amounts to
//! replacing the Sherman-Morrison inverse of `R` by `diag(m2)^-1`; the
//! `apply_dominance` flag selects either reading so the closed forms and the
//! covariance path can be cross-checked consistently.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::generator::OutputModel;
use crate::statistics::{InputMoments, ProfileStats};

/// Everything the predictions consume: input moments, profile statistics,
/// and the number of observed rounds.
#[derive(Debug, Clone, Copy)]
pub struct TheoryInputs<'a> {
    moments: &'a InputMoments,
    stats: &'a ProfileStats,
    rho: usize,
}

impl<'a> TheoryInputs<'a> {
    pub fn new(moments: &'a InputMoments, stats: &'a ProfileStats, rho: usize) -> Result<Self> {
        if moments.num_senders() != stats.num_senders() {
            return Err(Error::ShapeMismatch {
                expected: (moments.num_senders(), 0),
                got: (stats.num_senders(), 0),
            });
        }
        if rho == 0 {
            return Err(Error::NotEnoughRounds { needed: 1, got: 0 });
        }
        Ok(TheoryInputs {
            moments,
            stats,
            rho,
        })
    }

    pub fn num_senders(&self) -> usize {
        self.moments.num_senders()
    }

    pub fn moments(&self) -> &InputMoments {
        self.moments
    }

    pub fn stats(&self) -> &ProfileStats {
        self.stats
    }

    pub fn rho(&self) -> usize {
        self.rho
    }
}

fn predict(inputs: &TheoryInputs, weights: &[f64], tails: &[f64]) -> Vec<Option<f64>> {
    let m = inputs.moments;
    let shared: f64 = weights
        .iter()
        .zip(&inputs.stats.uniformity)
        .map(|(w, u)| w * u)
        .sum();
    let rho = inputs.rho as f64;
    (0..inputs.num_senders())
        .map(|i| {
            if m.m2[i] > 0.0 {
                let tail = tails[i] / m.m2[i] * inputs.stats.uniformity[i];
                Some((shared + tail) / (m.m2[i] * rho))
            } else {
                // Deterministic participation: the formula is singular.
                None
            }
        })
        .collect()
}

/// Predicted per-sender error when senders spread each message
/// independently over their profile. `None` flags senders with zero input
/// variance, for which no prediction exists.
pub fn mse_multinomial(inputs: &TheoryInputs) -> Vec<Option<f64>> {
    predict(inputs, &inputs.moments.mean, &inputs.moments.m3)
}

/// Predicted per-sender error when each sender directs a whole round at a
/// single profile-sampled recipient.
pub fn mse_max_variance(inputs: &TheoryInputs) -> Vec<Option<f64>> {
    let weights: Vec<f64> = inputs
        .moments
        .mean
        .iter()
        .zip(&inputs.moments.m2)
        .map(|(mu, m2)| mu * mu + m2)
        .collect();
    predict(inputs, &weights, &inputs.moments.m4)
}

/// The large-window input autocorrelation `mu mu^T + diag(m2)` and its
/// Sherman-Morrison inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct InputAutocorrelation {
    pub matrix: DMatrix<f64>,
    /// Rank-one correction gain `1 / (1 + mu^T diag(m2)^-1 mu)`.
    pub gain: f64,
    pub inverse: DMatrix<f64>,
}

pub fn input_autocorrelation(moments: &InputMoments) -> Result<InputAutocorrelation> {
    if let Some(i) = moments.m2.iter().position(|&v| v <= 0.0) {
        return Err(Error::DegenerateVariance { sender: i });
    }
    let n = moments.num_senders();
    let mu = DVector::from_column_slice(&moments.mean);
    let matrix = &mu * mu.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(&moments.m2));
    let weighted: f64 = (0..n)
        .map(|i| moments.mean[i] * moments.mean[i] / moments.m2[i])
        .sum();
    let gain = 1.0 / (1.0 + weighted);
    let mut inverse = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let rank_one =
                gain * (moments.mean[i] / moments.m2[i]) * (moments.mean[j] / moments.m2[j]);
            inverse[(i, j)] = if i == j { 1.0 / moments.m2[i] } else { 0.0 } - rank_one;
        }
    }
    Ok(InputAutocorrelation {
        matrix,
        gain,
        inverse,
    })
}

/// Approximate covariance of the estimated profile column of one receiver,
/// `(1/rho) * (a_j * R^-1 + R^-1 diag(c_j) R^-1)`, where `a_j` aggregates
/// the output variance every sender contributes at receiver `j` and `c_j`
/// carries the per-sender higher-moment tail.
///
/// With `apply_dominance` the inverse collapses to `diag(m2)^-1`, and the
/// per-sender diagonals summed over receivers reproduce [`mse_multinomial`]
/// / [`mse_max_variance`] exactly; without it, the full Sherman-Morrison
/// inverse is used, which tracks the actual covariance more closely for
/// small populations.
pub fn profile_covariance(
    inputs: &TheoryInputs,
    receiver: usize,
    model: OutputModel,
    apply_dominance: bool,
) -> Result<DMatrix<f64>> {
    let m = inputs.moments;
    let n = inputs.num_senders();
    if receiver >= inputs.stats.link_variance.ncols() {
        return Err(Error::ReceiverOutOfRange {
            index: receiver,
            count: inputs.stats.link_variance.ncols(),
        });
    }
    if let Some(i) = m.m2.iter().position(|&v| v <= 0.0) {
        return Err(Error::DegenerateVariance { sender: i });
    }

    let link = inputs.stats.link_variance.column(receiver);
    let (aggregate, tail): (f64, Vec<f64>) = match model {
        OutputModel::Multinomial => (
            (0..n).map(|k| m.mean[k] * link[k]).sum(),
            (0..n).map(|k| m.m3[k] * link[k]).collect(),
        ),
        OutputModel::MaxVariance => (
            (0..n)
                .map(|k| (m.mean[k] * m.mean[k] + m.m2[k]) * link[k])
                .sum(),
            (0..n).map(|k| m.m4[k] * link[k]).collect(),
        ),
    };

    let inverse = if apply_dominance {
        DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / m.m2[i] } else { 0.0 })
    } else {
        input_autocorrelation(m)?.inverse
    };

    let tail_diag = DMatrix::from_diagonal(&DVector::from_vec(tail));
    let sandwich = &inverse * tail_diag * &inverse;
    Ok((aggregate * inverse + sandwich) / inputs.rho as f64)
}
