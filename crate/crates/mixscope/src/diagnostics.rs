//! Data-exploration instruments: input covariance checks, per-round message
//! histograms, recipient-spread statistics, and the evaluation-user filter.
//!
//! The error analysis rests on the input process being uncorrelated across
//! senders, up to fourth order. [`covariance_report`] measures the relevant
//! sample covariances so that assumption can be checked on any window, real
//! or synthetic; the remaining instruments characterize how bursty senders
//! are and how widely they spread a round's messages.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::InputProcess;
use crate::mixer::{ObservationWindow, RoundPartition};
use crate::trace::Trace;

/// Exact-count bins `0..=49`; larger counts land in the overflow bin.
pub const HISTOGRAM_BINS: usize = 50;

/// Default number of index tuples sampled per covariance statistic.
pub const DEFAULT_TUPLE_BUDGET: usize = 100_000;

/// A cross/self ratio above this flags the corresponding condition.
pub const CONDITION_FLAG_RATIO: f64 = 0.1;

/// One uncorrelatedness condition: the largest cross/self ratio observed and
/// whether it crosses [`CONDITION_FLAG_RATIO`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionCheck {
    pub max_ratio: f64,
    pub violated: bool,
}

/// Averages of absolute sample covariances of the input process, over
/// sampled index tuples with distinct entries. `None` marks statistics whose
/// tuple space does not exist for this population (fewer than two or three
/// senders).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    /// avg |Cov(X_k, X_k)|
    pub var_self: f64,
    /// avg |Cov(X_k, X_m)|
    pub cross: Option<f64>,
    /// avg |Cov(X_k^2, X_k)|
    pub sq_self: f64,
    /// avg |Cov(X_k X_m, X_k)|
    pub prod_with_own_factor: Option<f64>,
    /// avg |Cov(X_k^2, X_m)|
    pub sq_with_other: Option<f64>,
    /// avg |Cov(X_k X_m, X_n)|
    pub prod_with_third: Option<f64>,
    /// avg |Cov(X_k^2, X_k^2)|
    pub sq_var: f64,
    /// avg |Cov(X_k^2, X_k X_m)|
    pub sq_with_own_prod: Option<f64>,
    /// avg |Cov(X_k^2, X_m^2)|
    pub sq_with_other_sq: Option<f64>,
    /// avg |Cov(X_k^2, X_m X_n)|
    pub sq_with_other_prod: Option<f64>,
    /// Tuple-sampling budget used per statistic.
    pub budget: usize,
    /// Three-sender statistics skipped because N < 3.
    pub tri_index_skipped: bool,
    /// Pairwise participation: cross covariances small next to variances.
    pub pairwise: Option<ConditionCheck>,
    /// Third-order products uncorrelated across senders.
    pub third_order: Option<ConditionCheck>,
    /// Fourth-order products uncorrelated across senders.
    pub fourth_order: Option<ConditionCheck>,
}

impl CovarianceReport {
    /// The ten statistics in presentation order, labelled.
    pub fn rows(&self) -> [(&'static str, Option<f64>); 10] {
        [
            ("|Cov(Xk,Xk)|", Some(self.var_self)),
            ("|Cov(Xk,Xm)|", self.cross),
            ("|Cov(Xk^2,Xk)|", Some(self.sq_self)),
            ("|Cov(XkXm,Xk)|", self.prod_with_own_factor),
            ("|Cov(Xk^2,Xm)|", self.sq_with_other),
            ("|Cov(XkXm,Xn)|", self.prod_with_third),
            ("|Cov(Xk^2,Xk^2)|", Some(self.sq_var)),
            ("|Cov(Xk^2,XkXm)|", self.sq_with_own_prod),
            ("|Cov(Xk^2,Xm^2)|", self.sq_with_other_sq),
            ("|Cov(Xk^2,XmXn)|", self.sq_with_other_prod),
        ]
    }
}

/// A derived per-round series over sender columns.
#[derive(Debug, Clone, Copy)]
enum Series {
    Plain(usize),
    Square(usize),
    Product(usize, usize),
}

impl Series {
    fn value(&self, cols: &[Vec<f64>], round: usize) -> f64 {
        match *self {
            Series::Plain(k) => cols[k][round],
            Series::Square(k) => cols[k][round] * cols[k][round],
            Series::Product(k, m) => cols[k][round] * cols[m][round],
        }
    }
}

/// Population covariance of two derived series.
fn covariance(cols: &[Vec<f64>], a: Series, b: Series) -> f64 {
    let rho = cols[0].len() as f64;
    let (mut sum_a, mut sum_b, mut sum_ab) = (0.0, 0.0, 0.0);
    for r in 0..cols[0].len() {
        let va = a.value(cols, r);
        let vb = b.value(cols, r);
        sum_a += va;
        sum_b += vb;
        sum_ab += va * vb;
    }
    sum_ab / rho - (sum_a / rho) * (sum_b / rho)
}

fn tuple_space(n: usize, arity: usize) -> usize {
    match arity {
        1 => n,
        2 => n * n.saturating_sub(1),
        3 => n * n.saturating_sub(1) * n.saturating_sub(2),
        _ => unreachable!(),
    }
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, arity: usize) -> Vec<usize> {
    let mut tuple = Vec::with_capacity(arity);
    while tuple.len() < arity {
        let candidate = rng.random_range(0..n);
        if !tuple.contains(&candidate) {
            tuple.push(candidate);
        }
    }
    tuple
}

/// Average |Cov| of `make(tuple)` over distinct index tuples: exhaustive when
/// the tuple space fits the budget, otherwise over `budget` sampled tuples.
fn average_abs_cov(
    cols: &[Vec<f64>],
    arity: usize,
    budget: usize,
    rng: &mut ChaCha8Rng,
    make: impl Fn(&[usize]) -> (Series, Series),
) -> Option<f64> {
    let n = cols.len();
    if n < arity {
        return None;
    }
    let space = tuple_space(n, arity);
    let mut total = 0.0;
    let mut count = 0usize;
    if space <= budget {
        let mut visit = |tuple: &[usize]| {
            let (a, b) = make(tuple);
            total += covariance(cols, a, b).abs();
            count += 1;
        };
        match arity {
            1 => {
                for k in 0..n {
                    visit(&[k]);
                }
            }
            2 => {
                for k in 0..n {
                    for m in 0..n {
                        if m != k {
                            visit(&[k, m]);
                        }
                    }
                }
            }
            3 => {
                for k in 0..n {
                    for m in 0..n {
                        if m == k {
                            continue;
                        }
                        for p in 0..n {
                            if p != k && p != m {
                                visit(&[k, m, p]);
                            }
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    } else {
        for _ in 0..budget {
            let tuple = sample_distinct(rng, n, arity);
            let (a, b) = make(&tuple);
            total += covariance(cols, a, b).abs();
            count += 1;
        }
    }
    Some(total / count as f64)
}

fn ratio(cross: Option<f64>, own: f64) -> Option<f64> {
    let cross = cross?;
    if own == 0.0 {
        return Some(if cross == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Some(cross / own)
}

fn check(ratios: &[Option<f64>]) -> Option<ConditionCheck> {
    let present: Vec<f64> = ratios.iter().flatten().copied().collect();
    if present.is_empty() {
        return None;
    }
    let max_ratio = present.into_iter().fold(0.0, f64::max);
    Some(ConditionCheck {
        max_ratio,
        violated: max_ratio > CONDITION_FLAG_RATIO,
    })
}

/// Measure the uncorrelatedness conditions on an observation window.
///
/// Each statistic is averaged over up to `budget` uniformly sampled index
/// tuples with distinct entries (exhaustively when the space is smaller),
/// drawn from a stream derived from `seed` so reruns match.
pub fn covariance_report(
    obs: &ObservationWindow,
    budget: usize,
    seed: u64,
) -> Result<CovarianceReport> {
    if obs.rho() < 2 {
        return Err(Error::NotEnoughRounds {
            needed: 2,
            got: obs.rho(),
        });
    }
    if budget == 0 {
        return Err(Error::InvalidConfig("tuple budget must be >= 1".into()));
    }
    let n = obs.num_senders();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..obs.rho()).map(|r| obs.sent(r, i) as f64).collect())
        .collect();

    let stat_rng = |stat: u64| {
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(stat))
    };

    let var_self = average_abs_cov(&cols, 1, budget, &mut stat_rng(0), |t| {
        (Series::Plain(t[0]), Series::Plain(t[0]))
    })
    .expect("N >= 1");
    let cross = average_abs_cov(&cols, 2, budget, &mut stat_rng(1), |t| {
        (Series::Plain(t[0]), Series::Plain(t[1]))
    });
    let sq_self = average_abs_cov(&cols, 1, budget, &mut stat_rng(2), |t| {
        (Series::Square(t[0]), Series::Plain(t[0]))
    })
    .expect("N >= 1");
    let prod_with_own_factor = average_abs_cov(&cols, 2, budget, &mut stat_rng(3), |t| {
        (Series::Product(t[0], t[1]), Series::Plain(t[0]))
    });
    let sq_with_other = average_abs_cov(&cols, 2, budget, &mut stat_rng(4), |t| {
        (Series::Square(t[0]), Series::Plain(t[1]))
    });
    let prod_with_third = average_abs_cov(&cols, 3, budget, &mut stat_rng(5), |t| {
        (Series::Product(t[0], t[1]), Series::Plain(t[2]))
    });
    let sq_var = average_abs_cov(&cols, 1, budget, &mut stat_rng(6), |t| {
        (Series::Square(t[0]), Series::Square(t[0]))
    })
    .expect("N >= 1");
    let sq_with_own_prod = average_abs_cov(&cols, 2, budget, &mut stat_rng(7), |t| {
        (Series::Square(t[0]), Series::Product(t[0], t[1]))
    });
    let sq_with_other_sq = average_abs_cov(&cols, 2, budget, &mut stat_rng(8), |t| {
        (Series::Square(t[0]), Series::Square(t[1]))
    });
    let sq_with_other_prod = average_abs_cov(&cols, 3, budget, &mut stat_rng(9), |t| {
        (Series::Square(t[0]), Series::Product(t[1], t[2]))
    });

    let pairwise = check(&[ratio(cross, var_self)]);
    let third_order = check(&[
        ratio(prod_with_own_factor, sq_self),
        ratio(sq_with_other, sq_self),
        ratio(prod_with_third, sq_self),
    ]);
    let fourth_order = check(&[
        ratio(sq_with_own_prod, sq_var),
        ratio(sq_with_other_sq, sq_var),
        ratio(sq_with_other_prod, sq_var),
    ]);

    Ok(CovarianceReport {
        var_self,
        cross,
        sq_self,
        prod_with_own_factor,
        sq_with_other,
        prod_with_third,
        sq_var,
        sq_with_own_prod,
        sq_with_other_sq,
        sq_with_other_prod,
        budget,
        tri_index_skipped: n < 3,
        pairwise,
        third_order,
        fourth_order,
    })
}

/// Counts of per-round per-sender message totals, aggregated over all
/// senders and rounds: exact bins for `0..=49` plus an overflow bin.
#[derive(Debug, Clone, PartialEq)]
pub struct InputHistogram {
    pub bins: [u64; HISTOGRAM_BINS],
    pub overflow: u64,
}

impl InputHistogram {
    /// Total tallies; always `rho * N`.
    pub fn total(&self) -> u64 {
        self.bins.iter().sum::<u64>() + self.overflow
    }

    /// Observed relative frequency per bin.
    pub fn frequencies(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.bins
            .iter()
            .map(|&c| c as f64 / total)
            .chain(std::iter::once(self.overflow as f64 / total))
            .collect()
    }
}

pub fn input_histogram(obs: &ObservationWindow) -> InputHistogram {
    let mut bins = [0u64; HISTOGRAM_BINS];
    let mut overflow = 0;
    for r in 0..obs.rho() {
        for i in 0..obs.num_senders() {
            let v = obs.sent(r, i);
            if (v as usize) < HISTOGRAM_BINS {
                bins[v as usize] += 1;
            } else {
                overflow += 1;
            }
        }
    }
    InputHistogram { bins, overflow }
}

/// The model pmf over the histogram support `{0..=49, overflow}`, averaged
/// over senders. Always sums to one, overflow included.
pub fn theoretical_input_pmf(input: &InputProcess) -> Vec<f64> {
    let per_sender: Vec<Vec<f64>> = match input {
        InputProcess::Poisson { rates } => rates.iter().map(|&l| poisson_bins(l)).collect(),
        InputProcess::MultinomialThreshold {
            batch_size,
            weights,
        } => weights
            .iter()
            .map(|&q| binomial_bins(*batch_size, q))
            .collect(),
    };
    let n = per_sender.len() as f64;
    let mut pmf = vec![0.0; HISTOGRAM_BINS + 1];
    for sender_pmf in &per_sender {
        for (acc, v) in pmf.iter_mut().zip(sender_pmf) {
            *acc += v / n;
        }
    }
    pmf
}

fn poisson_bins(lambda: f64) -> Vec<f64> {
    let mut bins = vec![0.0; HISTOGRAM_BINS + 1];
    let mut p = (-lambda).exp();
    let mut covered = 0.0;
    for k in 0..HISTOGRAM_BINS {
        bins[k] = p;
        covered += p;
        p *= lambda / (k + 1) as f64;
    }
    bins[HISTOGRAM_BINS] = (1.0 - covered).max(0.0);
    bins
}

fn binomial_bins(t: u64, q: f64) -> Vec<f64> {
    let mut bins = vec![0.0; HISTOGRAM_BINS + 1];
    if q <= 0.0 {
        bins[0] = 1.0;
        return bins;
    }
    if q >= 1.0 {
        if (t as usize) < HISTOGRAM_BINS {
            bins[t as usize] = 1.0;
        } else {
            bins[HISTOGRAM_BINS] = 1.0;
        }
        return bins;
    }
    let tf = t as f64;
    let mut p = (1.0 - q).powf(tf);
    let odds = q / (1.0 - q);
    let mut covered = 0.0;
    for k in 0..HISTOGRAM_BINS {
        if (k as u64) > t {
            break;
        }
        bins[k] = p;
        covered += p;
        p *= (tf - k as f64) / (k as f64 + 1.0) * odds;
    }
    bins[HISTOGRAM_BINS] = (1.0 - covered).max(0.0);
    bins
}

/// Average number of distinct recipients a sender reaches within one round,
/// bucketed by how many messages the sender put into that round, plus the
/// whole-trace average contact-set size.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipientSpread {
    /// Buckets for per-round message counts 2, 3, 4, 5 and >= 6; `None`
    /// when no (sender, round) pair fell in the bucket.
    pub bin_averages: [Option<f64>; 5],
    /// Mean number of distinct receivers each sender contacts over the
    /// whole trace.
    pub avg_contacts_per_sender: f64,
}

pub const SPREAD_BIN_LABELS: [&str; 5] = ["=2", "=3", "=4", "=5", ">=6"];

/// Requires per-message detail, so it consumes the trace and the round
/// partition that produced the observation window.
pub fn recipient_spread(trace: &Trace, partition: &RoundPartition) -> RecipientSpread {
    let mut sums = [0.0f64; 5];
    let mut counts = [0u64; 5];
    for range in partition.ranges() {
        let mut per_sender: HashMap<usize, Vec<usize>> = HashMap::new();
        for ev in &trace.events()[range.clone()] {
            per_sender.entry(ev.sender).or_default().push(ev.receiver);
        }
        for receivers in per_sender.values_mut() {
            let messages = receivers.len();
            if messages < 2 {
                continue;
            }
            receivers.sort_unstable();
            receivers.dedup();
            let bin = (messages.min(6)) - 2;
            sums[bin] += receivers.len() as f64;
            counts[bin] += 1;
        }
    }
    let bin_averages = std::array::from_fn(|b| {
        if counts[b] > 0 {
            Some(sums[b] / counts[b] as f64)
        } else {
            None
        }
    });

    let mut contact_sets: Vec<Vec<usize>> = vec![Vec::new(); trace.num_senders()];
    for ev in trace.events() {
        contact_sets[ev.sender].push(ev.receiver);
    }
    let active: Vec<usize> = contact_sets
        .iter_mut()
        .filter(|set| !set.is_empty())
        .map(|set| {
            set.sort_unstable();
            set.dedup();
            set.len()
        })
        .collect();
    let avg_contacts_per_sender = active.iter().sum::<usize>() as f64 / active.len() as f64;

    RecipientSpread {
        bin_averages,
        avg_contacts_per_sender,
    }
}

/// The senders whose estimation error is worth averaging: exclude sporadic
/// participants whose profiles barely get observed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationUsers {
    /// Ascending sender indices.
    pub users: Vec<usize>,
    /// The three-way intersection was empty, so the selection fell back to
    /// the early-participation filter alone.
    pub fallback_early_only: bool,
}

/// Keep senders that (1) rank in the top 40% by total messages, (2) rank in
/// the top 40% by the span between their first and last active round, and
/// (3) first participate before `0.3 * rho_max` rounds. Rank filters are
/// inclusive of ties.
pub fn select_evaluation_users(obs: &ObservationWindow, rho_max: usize) -> EvaluationUsers {
    let n = obs.num_senders();
    let mut activity = vec![0u64; n];
    let mut first: Vec<Option<usize>> = vec![None; n];
    let mut last = vec![0usize; n];
    for r in 0..obs.rho() {
        for i in 0..n {
            let sent = obs.sent(r, i);
            if sent > 0 {
                activity[i] += sent;
                if first[i].is_none() {
                    first[i] = Some(r);
                }
                last[i] = r;
            }
        }
    }
    let span: Vec<Option<usize>> = (0..n).map(|i| first[i].map(|f| last[i] - f)).collect();

    let top_cutoff = |values: &[Option<u64>]| -> Option<u64> {
        let mut present: Vec<u64> = values.iter().flatten().copied().collect();
        if present.is_empty() {
            return None;
        }
        present.sort_unstable_by(|a, b| b.cmp(a));
        let k = ((0.4 * n as f64).ceil() as usize).clamp(1, present.len());
        Some(present[k - 1])
    };

    let activity_values: Vec<Option<u64>> = (0..n)
        .map(|i| first[i].map(|_| activity[i]))
        .collect();
    let span_values: Vec<Option<u64>> = span.iter().map(|s| s.map(|v| v as u64)).collect();
    let activity_cut = top_cutoff(&activity_values);
    let span_cut = top_cutoff(&span_values);

    let early = |i: usize| {
        first[i]
            .map(|f| (f as f64) < 0.3 * rho_max as f64)
            .unwrap_or(false)
    };

    let selected: Vec<usize> = (0..n)
        .filter(|&i| {
            let active_enough = matches!((activity_values[i], activity_cut), (Some(v), Some(c)) if v >= c);
            let long_enough = matches!((span_values[i], span_cut), (Some(v), Some(c)) if v >= c);
            active_enough && long_enough && early(i)
        })
        .collect();
    if !selected.is_empty() {
        return EvaluationUsers {
            users: selected,
            fallback_early_only: false,
        };
    }
    EvaluationUsers {
        users: (0..n).filter(|&i| early(i)).collect(),
        fallback_early_only: true,
    }
}
