//! Least-squares profiling attack.
//!
//! Given the per-round send counts `U` (rho x N) and receive counts `Y`
//! (rho x M) observed at a batching mix, the attacker estimates the senders'
//! profile matrix as the least-squares fit of `Y` on `U`. The normal-equation
//! form of that fit is `(U^T U)^-1 U^T Y`; we solve it through an orthogonal
//! factorization of `U` instead of forming `U^T U`, which is numerically
//! safer and yields the minimum-norm solution when the system is rank
//! deficient.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mixer::ObservationWindow;

/// Whether a profile matrix is a ground-truth frequency table (rows are
/// probability distributions) or an attack estimate (rows are unconstrained
/// reals; least squares may leave the simplex).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    GroundTruth,
    Estimate,
}

/// N x M matrix of per-sender transition probabilities (or their estimates):
/// entry `(i, j)` is the probability that a message from sender `i` goes to
/// receiver `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileMatrix {
    matrix: DMatrix<f64>,
    kind: ProfileKind,
}

impl ProfileMatrix {
    /// Validate and normalize a ground-truth profile: every row must be
    /// non-negative and sum to one (up to 1e-9 input slack); rows are then
    /// rescaled so the sum is exact to machine precision.
    pub fn ground_truth(mut matrix: DMatrix<f64>) -> Result<Self> {
        for i in 0..matrix.nrows() {
            let sum: f64 = matrix.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-9 || matrix.row(i).iter().any(|&v| v < -1e-12) {
                return Err(Error::NonStochasticRow { row: i, sum });
            }
            for j in 0..matrix.ncols() {
                matrix[(i, j)] = (matrix[(i, j)] / sum).max(0.0);
            }
        }
        Ok(ProfileMatrix {
            matrix,
            kind: ProfileKind::GroundTruth,
        })
    }

    /// Wrap a raw estimate without constraints.
    pub fn estimate(matrix: DMatrix<f64>) -> Self {
        ProfileMatrix {
            matrix,
            kind: ProfileKind::Estimate,
        }
    }

    pub fn kind(&self) -> ProfileKind {
        self.kind
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn num_senders(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_receivers(&self) -> usize {
        self.matrix.ncols()
    }

    /// Write as CSV, one row per sender, 17 significant digits (enough to
    /// round-trip every f64 exactly).
    pub fn write_csv(&self, mut writer: impl Write) -> std::io::Result<()> {
        for i in 0..self.matrix.nrows() {
            let row: Vec<String> = (0..self.matrix.ncols())
                .map(|j| format!("{:.16e}", self.matrix[(i, j)]))
                .collect();
            writeln!(writer, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Read a profile CSV produced by [`ProfileMatrix::write_csv`] (or any
    /// headerless numeric CSV with one row per sender).
    pub fn read_csv(reader: impl BufRead, kind: ProfileKind) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let row = row.map_err(|_| Error::Parse {
                line: idx + 1,
                message: "non-numeric profile entry".into(),
            })?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("expected {} columns, got {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "empty profile file".into(),
            });
        }
        let matrix = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
        match kind {
            ProfileKind::GroundTruth => Self::ground_truth(matrix),
            ProfileKind::Estimate => Ok(Self::estimate(matrix)),
        }
    }
}

/// Conditioning diagnostics of the solved system.
#[derive(Debug, Clone, Copy)]
pub struct ConditionReport {
    /// Condition number of `U^T U` (squared ratio of U's extreme singular
    /// values); infinite when the system is rank deficient.
    pub condition_number: f64,
    /// True when `U^T U` is numerically singular, in which case the estimate
    /// is the minimum-norm solution rather than the unique one.
    pub singular: bool,
    /// Numerical rank of `U`.
    pub rank: usize,
}

/// A solved attack: the estimated profile matrix plus conditioning info.
#[derive(Debug, Clone)]
pub struct LsdaSolution {
    pub profile: ProfileMatrix,
    pub condition: ConditionReport,
}

struct Factorized {
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    eps: f64,
    report: ConditionReport,
}

fn factorize(obs: &ObservationWindow) -> Factorized {
    let u = obs.sender_matrix();
    let n = u.ncols();
    let rows = u.nrows();
    let svd = u.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    // Standard numerical-rank tolerance.
    let eps = smax * f64::EPSILON * rows.max(n) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let singular = rank < n;
    let condition_number = if singular {
        f64::INFINITY
    } else {
        let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        (smax / smin).powi(2)
    };
    Factorized {
        svd,
        eps,
        report: ConditionReport {
            condition_number,
            singular,
            rank,
        },
    }
}

/// Estimate all sending profiles at once from an observation window.
///
/// Returns the minimum-residual least-squares fit; for rank-deficient
/// windows (flagged in the condition report) the minimum-norm solution is
/// returned so that evaluation pipelines can still run at low round counts.
pub fn lsda(obs: &ObservationWindow) -> LsdaSolution {
    let f = factorize(obs);
    let y = obs.receiver_matrix();
    let estimate = f
        .svd
        .solve(&y, f.eps)
        .expect("SVD computed with both factors");
    LsdaSolution {
        profile: ProfileMatrix::estimate(estimate),
        condition: f.report,
    }
}

/// Estimate the profile column for a single receiver. The full problem
/// decouples per receiver, so this equals column `receiver` of [`lsda`].
pub fn lsda_column(obs: &ObservationWindow, receiver: usize) -> Result<DVector<f64>> {
    if receiver >= obs.num_receivers() {
        return Err(Error::ReceiverOutOfRange {
            index: receiver,
            count: obs.num_receivers(),
        });
    }
    let f = factorize(obs);
    let y_col = DVector::from_fn(obs.rho(), |r, _| obs.received(r, receiver) as f64);
    let column = f
        .svd
        .solve(&y_col, f.eps)
        .expect("SVD computed with both factors");
    Ok(column.column(0).into_owned())
}

/// Per-sender squared estimation error: for each sender, the sum over all
/// receivers of the squared deviation between the two profiles.
pub fn empirical_mse(truth: &ProfileMatrix, estimate: &ProfileMatrix) -> Result<Vec<f64>> {
    let (tn, tm) = (truth.num_senders(), truth.num_receivers());
    let (en, em) = (estimate.num_senders(), estimate.num_receivers());
    if (tn, tm) != (en, em) {
        return Err(Error::ShapeMismatch {
            expected: (tn, tm),
            got: (en, em),
        });
    }
    Ok((0..tn)
        .map(|i| {
            (0..tm)
                .map(|j| (truth.matrix()[(i, j)] - estimate.matrix()[(i, j)]).powi(2))
                .sum()
        })
        .collect())
}
