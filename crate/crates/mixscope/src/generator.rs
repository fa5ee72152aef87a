//! Synthetic traffic with known ground truth, for validating the attack and
//! the error predictions.
//!
//! Randomness is organized as counter-based streams: every draw comes from a
//! ChaCha stream keyed by `(seed, raw round index, lane, tag)`, where the
//! lane is the sender index (or `0` for the joint per-round input draw) and
//! the tag separates input draws from recipient choices. Rounds can
//! therefore be generated in any order, or in parallel, and produce the same
//! window as sequential generation.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::attack::{ProfileKind, ProfileMatrix};
use crate::error::{Error, Result};
use crate::mixer::ObservationWindow;
use crate::statistics::InputMoments;
use crate::trace::{Trace, TraceEvent};

/// Distribution of per-round message counts per sender.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputProcess {
    /// Each sender's count is an independent Poisson draw each round.
    Poisson { rates: Vec<f64> },
    /// Each round carries exactly `batch_size` messages, split across
    /// senders according to `weights` (a multinomial draw). This is the
    /// input process a threshold mix induces.
    MultinomialThreshold { batch_size: u64, weights: Vec<f64> },
}

/// How a sender spreads a round's messages over its profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OutputModel {
    /// Every message picks its recipient independently from the profile row.
    Multinomial,
    /// The sender picks one recipient from the profile row and directs the
    /// whole round's messages to it.
    MaxVariance,
}

/// On-disk population description (JSON). Profiles may be inline rows or a
/// path to a profile CSV, resolved relative to the config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PopulationConfig {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub profiles: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub profiles_path: Option<String>,
    pub input: InputProcess,
    pub output_model: OutputModel,
    pub seed: u64,
}

/// A validated synthetic population: ground-truth profiles, an input
/// process, an output model, and the seed that fixes every draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    profiles: ProfileMatrix,
    input: InputProcess,
    output: OutputModel,
    seed: u64,
}

impl PopulationSpec {
    pub fn new(
        profiles: ProfileMatrix,
        input: InputProcess,
        output: OutputModel,
        seed: u64,
    ) -> Result<Self> {
        if profiles.kind() != ProfileKind::GroundTruth {
            return Err(Error::InvalidConfig(
                "population profiles must be ground truth (row-stochastic)".into(),
            ));
        }
        let n = profiles.num_senders();
        let input = match input {
            InputProcess::Poisson { rates } => {
                if rates.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "{} rates for {n} senders",
                        rates.len()
                    )));
                }
                if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
                    return Err(Error::InvalidConfig(
                        "every rate must be a positive finite number".into(),
                    ));
                }
                InputProcess::Poisson { rates }
            }
            InputProcess::MultinomialThreshold {
                batch_size,
                mut weights,
            } => {
                if batch_size == 0 {
                    return Err(Error::InvalidConfig("batch size must be >= 1".into()));
                }
                if weights.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "{} weights for {n} senders",
                        weights.len()
                    )));
                }
                let sum: f64 = weights.iter().sum();
                if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(
                        "weights must be non-negative and sum to one".into(),
                    ));
                }
                weights.iter_mut().for_each(|w| *w /= sum);
                InputProcess::MultinomialThreshold {
                    batch_size,
                    weights,
                }
            }
        };
        Ok(PopulationSpec {
            profiles,
            input,
            output,
            seed,
        })
    }

    pub fn from_config(config: &PopulationConfig, base_dir: &Path) -> Result<Self> {
        let profiles = match (&config.profiles, &config.profiles_path) {
            (Some(rows), None) => {
                if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
                    return Err(Error::InvalidConfig(
                        "inline profiles must be a non-empty rectangular matrix".into(),
                    ));
                }
                let matrix = nalgebra::DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| {
                    rows[i][j]
                });
                ProfileMatrix::ground_truth(matrix)?
            }
            (None, Some(path)) => {
                let full = base_dir.join(path);
                let file = std::fs::File::open(&full)?;
                ProfileMatrix::read_csv(std::io::BufReader::new(file), ProfileKind::GroundTruth)?
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "exactly one of `profiles` and `profiles_path` must be set".into(),
                ))
            }
        };
        PopulationSpec::new(
            profiles,
            config.input.clone(),
            config.output_model,
            config.seed,
        )
    }

    pub fn profiles(&self) -> &ProfileMatrix {
        &self.profiles
    }

    pub fn input(&self) -> &InputProcess {
        &self.input
    }

    pub fn output_model(&self) -> OutputModel {
        self.output
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn num_senders(&self) -> usize {
        self.profiles.num_senders()
    }

    pub fn num_receivers(&self) -> usize {
        self.profiles.num_receivers()
    }
}

const INPUT_TAG: u64 = 1;
const OUTPUT_TAG: u64 = 2;

fn lane_rng(seed: u64, round: u64, lane: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&round.to_le_bytes());
    key[16..24].copy_from_slice(&lane.to_le_bytes());
    key[24..32].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Cumulative row distributions for recipient sampling.
fn cumulative_rows(profiles: &ProfileMatrix) -> Vec<Vec<f64>> {
    let p = profiles.matrix();
    (0..p.nrows())
        .map(|i| {
            let mut acc = 0.0;
            let mut cum: Vec<f64> = p.row(i).iter().map(|&v| {
                acc += v;
                acc
            }).collect();
            if let Some(last) = cum.last_mut() {
                *last = 1.0;
            }
            cum
        })
        .collect()
}

fn sample_categorical(rng: &mut ChaCha8Rng, cum: &[f64]) -> usize {
    let u: f64 = rng.random();
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

/// Split `total` across weights with a chain of conditional binomials.
fn multinomial_split(rng: &mut ChaCha8Rng, total: u64, weights: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; weights.len()];
    let last_positive = match weights.iter().rposition(|&w| w > 0.0) {
        Some(i) => i,
        None => return counts,
    };
    let mut remaining = total;
    let mut mass_left = 1.0;
    for (i, &w) in weights.iter().enumerate().take(last_positive + 1) {
        if remaining == 0 {
            break;
        }
        if i == last_positive {
            counts[i] = remaining;
            break;
        }
        let p = (w / mass_left).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, p)
            .expect("validated probability")
            .sample(rng);
        counts[i] = draw;
        remaining -= draw;
        mass_left -= w;
    }
    counts
}

struct RoundSample {
    inputs: Vec<u64>,
    /// Per sender: (receiver, count) contributions, receiver-sorted.
    contributions: Vec<Vec<(usize, u64)>>,
}

fn sample_round(
    spec: &PopulationSpec,
    poissons: &[Poisson<f64>],
    cum_rows: &[Vec<f64>],
    raw_round: u64,
) -> Option<RoundSample> {
    let n = spec.num_senders();
    let m = spec.num_receivers();
    let inputs: Vec<u64> = match &spec.input {
        InputProcess::Poisson { .. } => (0..n)
            .map(|i| {
                let mut rng = lane_rng(spec.seed, raw_round, i as u64, INPUT_TAG);
                poissons[i].sample(&mut rng) as u64
            })
            .collect(),
        InputProcess::MultinomialThreshold {
            batch_size,
            weights,
        } => {
            let mut rng = lane_rng(spec.seed, raw_round, 0, INPUT_TAG);
            multinomial_split(&mut rng, *batch_size, weights)
        }
    };
    if inputs.iter().all(|&x| x == 0) {
        return None;
    }

    let mut scratch = vec![0u64; m];
    let contributions = (0..n)
        .map(|k| {
            let count = inputs[k];
            if count == 0 {
                return Vec::new();
            }
            let mut rng = lane_rng(spec.seed, raw_round, k as u64, OUTPUT_TAG);
            match spec.output {
                OutputModel::Multinomial => {
                    scratch.iter_mut().for_each(|v| *v = 0);
                    for _ in 0..count {
                        scratch[sample_categorical(&mut rng, &cum_rows[k])] += 1;
                    }
                    scratch
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0)
                        .map(|(j, &c)| (j, c))
                        .collect()
                }
                OutputModel::MaxVariance => {
                    vec![(sample_categorical(&mut rng, &cum_rows[k]), count)]
                }
            }
        })
        .collect();
    Some(RoundSample {
        inputs,
        contributions,
    })
}

fn sampler_state(spec: &PopulationSpec) -> (Vec<Poisson<f64>>, Vec<Vec<f64>>) {
    let poissons = match &spec.input {
        InputProcess::Poisson { rates } => rates
            .iter()
            .map(|&r| Poisson::new(r).expect("validated rate"))
            .collect(),
        InputProcess::MultinomialThreshold { .. } => Vec::new(),
    };
    (poissons, cumulative_rows(&spec.profiles))
}

fn sample_rounds(spec: &PopulationSpec, rho: usize) -> Result<Vec<RoundSample>> {
    if rho == 0 {
        return Err(Error::InvalidConfig("need at least one round".into()));
    }
    let (poissons, cum_rows) = sampler_state(spec);
    let mut kept = Vec::with_capacity(rho);
    // Rounds where nobody sends are not observed; skip them but cap the
    // attempts so a near-silent population cannot spin forever.
    let max_raw = (rho as u64).saturating_mul(1000).saturating_add(10_000);
    let mut raw = 0u64;
    while kept.len() < rho {
        if raw >= max_raw {
            return Err(Error::InvalidConfig(format!(
                "input process produced fewer than {rho} non-empty rounds in {max_raw} attempts"
            )));
        }
        if let Some(sample) = sample_round(spec, &poissons, &cum_rows, raw) {
            kept.push(sample);
        }
        raw += 1;
    }
    Ok(kept)
}

/// Generate `rho` observed rounds. Deterministic in the seed; rounds in
/// which no sender participates are skipped, never observed.
pub fn generate_rounds(spec: &PopulationSpec, rho: usize) -> Result<ObservationWindow> {
    let samples = sample_rounds(spec, rho)?;
    let m = spec.num_receivers();
    let mut u_rows = Vec::with_capacity(rho);
    let mut y_rows = Vec::with_capacity(rho);
    for sample in samples {
        let mut y = vec![0u64; m];
        for per_sender in &sample.contributions {
            for &(j, c) in per_sender {
                y[j] += c;
            }
        }
        u_rows.push(sample.inputs);
        y_rows.push(y);
    }
    ObservationWindow::from_rows(u_rows, y_rows)
}

/// Generate the same rounds as [`generate_rounds`] but as a message-level
/// trace: round `k`'s messages all carry timestamp `k`, so a timed mix with
/// a one-second interval reproduces the window exactly.
pub fn generate_trace(spec: &PopulationSpec, rho: usize) -> Result<Trace> {
    let samples = sample_rounds(spec, rho)?;
    let mut events = Vec::new();
    for (k, sample) in samples.iter().enumerate() {
        for (sender, per_sender) in sample.contributions.iter().enumerate() {
            for &(receiver, count) in per_sender {
                for _ in 0..count {
                    events.push(TraceEvent {
                        timestamp: k as f64,
                        sender,
                        receiver,
                    });
                }
            }
        }
    }
    let sender_names = (0..spec.num_senders()).map(|i| format!("s{i}")).collect();
    let receiver_names = (0..spec.num_receivers()).map(|j| format!("r{j}")).collect();
    Trace::new(events, sender_names, receiver_names)
}

/// Analytic moments of the input process, the oracle against which sample
/// moments are checked.
pub fn exact_moments(spec: &PopulationSpec) -> InputMoments {
    match &spec.input {
        InputProcess::Poisson { rates } => InputMoments {
            mean: rates.clone(),
            m2: rates.clone(),
            m3: rates.clone(),
            m4: rates.iter().map(|&l| 3.0 * l * l + l).collect(),
        },
        InputProcess::MultinomialThreshold {
            batch_size,
            weights,
        } => {
            let t = *batch_size as f64;
            let mut moments = InputMoments {
                mean: Vec::new(),
                m2: Vec::new(),
                m3: Vec::new(),
                m4: Vec::new(),
            };
            for &q in weights {
                let pq = q * (1.0 - q);
                moments.mean.push(t * q);
                moments.m2.push(t * pq);
                moments.m3.push(t * pq * (1.0 - 2.0 * q));
                moments.m4.push(t * pq * (1.0 + 3.0 * (t - 2.0) * pq));
            }
            moments
        }
    }
}
