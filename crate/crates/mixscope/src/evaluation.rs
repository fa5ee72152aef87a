//! Experiment driver: attack growing prefixes of a window, track the
//! empirical error of the selected users, and overlay both closed-form
//! predictions.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{empirical_mse, lsda, ProfileMatrix};
use crate::error::{Error, Result};
use crate::mixer::ObservationWindow;
use crate::statistics::{input_moments, profile_stats, InputMoments};
use crate::theory::{mse_max_variance, mse_multinomial, TheoryInputs};

/// One prefix of the window, attacked and scored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    /// Rounds in this prefix.
    pub rho: usize,
    /// Mean empirical error over the selected users, excluding those whose
    /// prefix input variance is zero.
    pub avg_mse: Option<f64>,
    /// Mean multinomial-model prediction over the same users.
    pub avg_mse_theory_min: Option<f64>,
    /// Mean max-variance-model prediction over the same users.
    pub avg_mse_theory_max: Option<f64>,
    /// Condition number of the normal-equation matrix at this prefix.
    pub condition_number: f64,
    /// Selected users excluded from the averages (zero prefix variance).
    pub excluded_senders: usize,
    /// Empirical error per selected user, in `users` order.
    pub per_user_mse: Vec<f64>,
    /// Multinomial prediction per selected user; `None` when undefined.
    pub mse_theory_min: Vec<Option<f64>>,
    /// Max-variance prediction per selected user; `None` when undefined.
    pub mse_theory_max: Vec<Option<f64>>,
}

/// Attack results across the prefix grid `{0.1, 0.2, ..., 1.0} * rho_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseReport {
    pub rho_max: usize,
    /// The fixed user set every grid point averages over.
    pub users: Vec<usize>,
    pub grid: Vec<GridPoint>,
}

/// Which prediction tracks the empirical curve better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVerdict {
    MultinomialLike,
    MaxVarianceLike,
    Inconclusive,
}

impl std::fmt::Display for ModelVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelVerdict::MultinomialLike => "multinomial-like",
            ModelVerdict::MaxVarianceLike => "maxvariance-like",
            ModelVerdict::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

fn fractional_grid(rho_max: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = (1..=10)
        .map(|g| ((g as f64 / 10.0) * rho_max as f64).floor() as usize)
        .filter(|&rho| rho >= 1)
        .collect();
    grid.dedup();
    grid
}

/// Attack every grid prefix of `obs` and score it against `truth`,
/// averaging over the fixed `users` set. Predictions are evaluated with the
/// sample moments of the same prefix the attacker saw.
pub fn run_evaluation(
    obs: &ObservationWindow,
    truth: &ProfileMatrix,
    users: &[usize],
) -> Result<MseReport> {
    if users.is_empty() {
        return Err(Error::InvalidConfig("user set is empty".into()));
    }
    if let Some(&bad) = users.iter().find(|&&u| u >= obs.num_senders()) {
        return Err(Error::InvalidConfig(format!(
            "user index {bad} out of range ({} senders)",
            obs.num_senders()
        )));
    }
    let shape = (obs.num_senders(), obs.num_receivers());
    if (truth.num_senders(), truth.num_receivers()) != shape {
        return Err(Error::ShapeMismatch {
            expected: shape,
            got: (truth.num_senders(), truth.num_receivers()),
        });
    }
    let stats = profile_stats(truth)?;

    let grid: Vec<GridPoint> = fractional_grid(obs.rho())
        .into_par_iter()
        .map(|rho| {
            let prefix = obs.prefix(rho);
            let solution = lsda(&prefix);
            let mse = empirical_mse(truth, &solution.profile).expect("shapes checked");

            let (theory_min, theory_max) = match input_moments(&prefix) {
                Ok(moments) => {
                    let inputs = TheoryInputs::new(&moments, &stats, rho).expect("shapes checked");
                    (mse_multinomial(&inputs), mse_max_variance(&inputs))
                }
                // A one-round prefix has no moments; predictions stay empty.
                Err(_) => (vec![None; shape.0], vec![None; shape.0]),
            };

            let per_user_mse: Vec<f64> = users.iter().map(|&u| mse[u]).collect();
            let mse_theory_min: Vec<Option<f64>> = users.iter().map(|&u| theory_min[u]).collect();
            let mse_theory_max: Vec<Option<f64>> = users.iter().map(|&u| theory_max[u]).collect();

            // Users without a defined prediction are left out of every
            // average so the three curves stay comparable.
            let kept: Vec<usize> = (0..users.len())
                .filter(|&k| mse_theory_min[k].is_some())
                .collect();
            let (avg_mse, avg_min, avg_max) = if theory_defined(&mse_theory_min) {
                let avg = |f: &dyn Fn(usize) -> f64| {
                    kept.iter().map(|&k| f(k)).sum::<f64>() / kept.len() as f64
                };
                (
                    Some(avg(&|k| per_user_mse[k])),
                    Some(avg(&|k| mse_theory_min[k].unwrap())),
                    Some(avg(&|k| mse_theory_max[k].unwrap())),
                )
            } else {
                // No usable predictions at this prefix: report the raw
                // empirical average over all selected users.
                (
                    Some(per_user_mse.iter().sum::<f64>() / users.len() as f64),
                    None,
                    None,
                )
            };

            GridPoint {
                rho,
                avg_mse,
                avg_mse_theory_min: avg_min,
                avg_mse_theory_max: avg_max,
                condition_number: solution.condition.condition_number,
                excluded_senders: users.len() - kept.len(),
                per_user_mse,
                mse_theory_min,
                mse_theory_max,
            }
        })
        .collect();

    Ok(MseReport {
        rho_max: obs.rho(),
        users: users.to_vec(),
        grid,
    })
}

fn theory_defined(theory: &[Option<f64>]) -> bool {
    theory.iter().any(|v| v.is_some())
}

/// Decide which output model the data behaves like: the prediction with the
/// smaller mean absolute log-ratio to the empirical curve over the last half
/// of the grid wins; closer than 10% is a tie.
pub fn compare_models(report: &MseReport) -> ModelVerdict {
    let start = report.grid.len() / 2;
    let mut dist_min = Vec::new();
    let mut dist_max = Vec::new();
    for point in &report.grid[start..] {
        if let (Some(emp), Some(min), Some(max)) = (
            point.avg_mse,
            point.avg_mse_theory_min,
            point.avg_mse_theory_max,
        ) {
            if emp > 0.0 && min > 0.0 && max > 0.0 {
                dist_min.push((emp / min).ln().abs());
                dist_max.push((emp / max).ln().abs());
            }
        }
    }
    if dist_min.is_empty() {
        return ModelVerdict::Inconclusive;
    }
    let d_min = dist_min.iter().sum::<f64>() / dist_min.len() as f64;
    let d_max = dist_max.iter().sum::<f64>() / dist_max.len() as f64;
    let scale = d_min.max(d_max);
    if scale == 0.0 || (d_min - d_max).abs() < 0.1 * scale {
        return ModelVerdict::Inconclusive;
    }
    if d_min < d_max {
        ModelVerdict::MultinomialLike
    } else {
        ModelVerdict::MaxVarianceLike
    }
}

/// Flat CSV view of the grid: `rho,avg_mse,avg_mse_theory_min,
/// avg_mse_theory_max,cond`, empty fields where a value is undefined.
pub fn write_report_csv(report: &MseReport, mut writer: impl Write) -> std::io::Result<()> {
    writeln!(writer, "rho,avg_mse,avg_mse_theory_min,avg_mse_theory_max,cond")?;
    let field = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for p in &report.grid {
        writeln!(
            writer,
            "{},{},{},{},{:e}",
            p.rho,
            field(p.avg_mse),
            field(p.avg_mse_theory_min),
            field(p.avg_mse_theory_max),
            p.condition_number
        )?;
    }
    Ok(())
}

/// Self-describing JSON artifact for an evaluation run: the report plus the
/// configuration echo and full-window input moments.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationArtifact {
    pub command: &'static str,
    pub seed: Option<u64>,
    /// Echo of whatever produced the window (population config or mix
    /// parameters), for reproducibility.
    pub source: serde_json::Value,
    pub fallback_early_only: bool,
    pub input_moments: InputMoments,
    pub verdict: ModelVerdict,
    pub report: MseReport,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate_rounds, InputProcess, OutputModel, PopulationSpec};
    use nalgebra::DMatrix;

    fn population(n: usize, m: usize, seed: u64, output: OutputModel) -> PopulationSpec {
        // Rows concentrated on a handful of receivers, rates spread over
        // [2, 8].
        let mut rows = DMatrix::zeros(n, m);
        for i in 0..n {
            let main = i % m;
            let side = (i + 1) % m;
            rows[(i, main)] = 0.7;
            rows[(i, side)] = 0.3;
        }
        PopulationSpec::new(
            ProfileMatrix::ground_truth(rows).unwrap(),
            InputProcess::Poisson {
                rates: (0..n).map(|i| 2.0 + 6.0 * (i as f64 / n as f64)).collect(),
            },
            output,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn grid_covers_tenths_and_stays_strictly_increasing() {
        assert_eq!(
            fractional_grid(1000),
            vec![100, 200, 300, 400, 500, 600, 700, 800, 900, 1000]
        );
        assert_eq!(fractional_grid(7), vec![1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(fractional_grid(3), vec![1, 2, 3]);
        assert_eq!(fractional_grid(1), vec![1]);
    }

    #[test]
    fn single_contact_population_has_negligible_error() {
        // Every sender has exactly one contact: outputs are a deterministic
        // function of inputs and the attack recovers the profile exactly.
        let mut rows = DMatrix::zeros(5, 4);
        for i in 0..5 {
            rows[(i, i % 4)] = 1.0;
        }
        let spec = PopulationSpec::new(
            ProfileMatrix::ground_truth(rows).unwrap(),
            InputProcess::Poisson {
                rates: vec![2.0, 3.0, 4.0, 5.0, 6.0],
            },
            OutputModel::MaxVariance,
            8,
        )
        .unwrap();
        let obs = generate_rounds(&spec, 200).unwrap();
        let report = run_evaluation(&obs, spec.profiles(), &[0, 1, 2, 3, 4]).unwrap();
        for point in &report.grid {
            assert!(point.avg_mse.unwrap() < 1e-12, "rho {}", point.rho);
        }
    }

    #[test]
    fn report_is_deterministic() {
        let spec = population(6, 4, 77, OutputModel::Multinomial);
        let obs = generate_rounds(&spec, 400).unwrap();
        let users = vec![1, 3, 5];
        let a = run_evaluation(&obs, spec.profiles(), &users).unwrap();
        let b = run_evaluation(&obs, spec.profiles(), &users).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn final_point_tracks_multinomial_prediction() {
        // Monte-Carlo over seeds: the final grid point should sit within 20%
        // of the multinomial prediction and below the max-variance curve.
        let trials = 20;
        let results: Vec<(f64, f64, f64)> = (0..trials)
            .map(|t| {
                let spec = population(10, 6, 1000 + t, OutputModel::Multinomial);
                let obs = generate_rounds(&spec, 2000).unwrap();
                let users: Vec<usize> = (0..10).collect();
                let report = run_evaluation(&obs, spec.profiles(), &users).unwrap();
                let last = report.grid.last().unwrap();
                (
                    last.avg_mse.unwrap(),
                    last.avg_mse_theory_min.unwrap(),
                    last.avg_mse_theory_max.unwrap(),
                )
            })
            .collect();
        let mean = |f: &dyn Fn(&(f64, f64, f64)) -> f64| {
            results.iter().map(f).sum::<f64>() / trials as f64
        };
        let emp = mean(&|r| r.0);
        let tmin = mean(&|r| r.1);
        let tmax = mean(&|r| r.2);
        assert!(
            (emp / tmin - 1.0).abs() < 0.2,
            "empirical {emp:.3e} vs prediction {tmin:.3e}"
        );
        assert!(emp < tmax, "empirical {emp:.3e} vs upper model {tmax:.3e}");
    }

    #[test]
    fn doubling_the_window_halves_the_final_error() {
        let trials = 8;
        let (mut short_acc, mut long_acc) = (0.0, 0.0);
        for t in 0..trials {
            let spec = population(8, 5, 400 + t, OutputModel::Multinomial);
            let users: Vec<usize> = (0..8).collect();
            let short = generate_rounds(&spec, 1500).unwrap();
            let long = generate_rounds(&spec, 3000).unwrap();
            short_acc += run_evaluation(&short, spec.profiles(), &users)
                .unwrap()
                .grid
                .last()
                .unwrap()
                .avg_mse
                .unwrap();
            long_acc += run_evaluation(&long, spec.profiles(), &users)
                .unwrap()
                .grid
                .last()
                .unwrap()
                .avg_mse
                .unwrap();
        }
        let ratio = short_acc / long_acc;
        assert!(
            (ratio - 2.0).abs() < 0.3,
            "halving ratio {ratio} outside [1.7, 2.3]"
        );
    }

    #[test]
    fn error_shrinks_from_early_to_final_prefix() {
        // Majority vote over seeds: the final average error should not
        // exceed the 30%-prefix value once conditioning settles.
        let trials = 20;
        let mut wins = 0;
        for t in 0..trials {
            let spec = population(8, 5, 9_000 + t, OutputModel::Multinomial);
            let obs = generate_rounds(&spec, 1000).unwrap();
            let users: Vec<usize> = (0..8).collect();
            let report = run_evaluation(&obs, spec.profiles(), &users).unwrap();
            let at = |rho: usize| {
                report
                    .grid
                    .iter()
                    .find(|p| p.rho == rho)
                    .unwrap()
                    .avg_mse
                    .unwrap()
            };
            if at(1000) <= at(300) {
                wins += 1;
            }
        }
        assert!(wins > trials / 2, "only {wins}/{trials} runs improved");
    }

    #[test]
    fn tie_between_identical_curves_is_inconclusive() {
        let point = |rho: usize| GridPoint {
            rho,
            avg_mse: Some(1.0 / rho as f64),
            avg_mse_theory_min: Some(1.2 / rho as f64),
            avg_mse_theory_max: Some(1.2 / rho as f64),
            condition_number: 1.0,
            excluded_senders: 0,
            per_user_mse: vec![],
            mse_theory_min: vec![],
            mse_theory_max: vec![],
        };
        let report = MseReport {
            rho_max: 100,
            users: vec![0],
            grid: (1..=10).map(|g| point(g * 10)).collect(),
        };
        assert_eq!(compare_models(&report), ModelVerdict::Inconclusive);
    }

    #[test]
    fn rejects_empty_or_out_of_range_users() {
        let spec = population(4, 3, 5, OutputModel::Multinomial);
        let obs = generate_rounds(&spec, 50).unwrap();
        assert!(run_evaluation(&obs, spec.profiles(), &[]).is_err());
        assert!(run_evaluation(&obs, spec.profiles(), &[4]).is_err());
    }

    #[test]
    fn csv_layout() {
        let report = MseReport {
            rho_max: 20,
            users: vec![0],
            grid: vec![GridPoint {
                rho: 2,
                avg_mse: Some(0.5),
                avg_mse_theory_min: None,
                avg_mse_theory_max: None,
                condition_number: 3.0,
                excluded_senders: 0,
                per_user_mse: vec![0.5],
                mse_theory_min: vec![None],
                mse_theory_max: vec![None],
            }],
        };
        let mut out = Vec::new();
        write_report_csv(&report, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "rho,avg_mse,avg_mse_theory_min,avg_mse_theory_max,cond"
        );
        assert_eq!(lines.next().unwrap(), "2,5e-1,,,3e0");
    }
}
