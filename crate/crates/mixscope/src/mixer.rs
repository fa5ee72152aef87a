//! Batching mixes: turn a trace into communication rounds and build the
//! adversary's observation matrices.
//!
//! Both supported mixes flush every stored message when they fire, so
//! message counts are conserved within each round. Threshold mixes fire
//! after exactly `t` messages; timed mixes fire every `tau` seconds.

use std::io::{BufRead, Write};
use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::trace::Trace;

/// Firing rule of the mix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixConfig {
    /// Gather exactly `batch_size` messages, then flush. A trailing group
    /// smaller than the batch never fires and is discarded.
    Threshold { batch_size: usize },
    /// Flush every `interval_secs` seconds. Windows are half-open,
    /// `[k*tau, (k+1)*tau)`, anchored at the first event's timestamp;
    /// windows containing no events are not observed as rounds.
    Timed { interval_secs: f64 },
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MixConfig::Threshold { batch_size } => {
                if batch_size == 0 {
                    return Err(Error::InvalidConfig("threshold must be >= 1".into()));
                }
            }
            MixConfig::Timed { interval_secs } => {
                if !(interval_secs > 0.0 && interval_secs.is_finite()) {
                    return Err(Error::InvalidConfig(
                        "timed interval must be a positive number of seconds".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Which events of the trace fell into each round, as index ranges into the
/// (timestamp-sorted) event list. Needed by diagnostics that require
/// per-message detail rather than just counts.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPartition {
    ranges: Vec<Range<usize>>,
}

impl RoundPartition {
    pub fn num_rounds(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }
}

/// One round of the window, borrowed from the owning matrices.
#[derive(Debug, Clone, Copy)]
pub struct Round<'a> {
    /// Messages sent per sender this round.
    pub sent: &'a [u64],
    /// Messages received per receiver this round.
    pub received: &'a [u64],
}

/// The adversary's view: per-round send counts `U` (rho x N) and receive
/// counts `Y` (rho x M). Every round conserves messages (inputs and outputs
/// sum to the same total) and contains at least one message.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    rho: usize,
    senders: usize,
    receivers: usize,
    u: Vec<u64>,
    y: Vec<u64>,
}

impl ObservationWindow {
    pub fn from_rows(u_rows: Vec<Vec<u64>>, y_rows: Vec<Vec<u64>>) -> Result<Self> {
        if u_rows.is_empty() || u_rows.len() != y_rows.len() {
            return Err(Error::InvalidObservation(format!(
                "need matching non-empty row counts, got {} and {}",
                u_rows.len(),
                y_rows.len()
            )));
        }
        let senders = u_rows[0].len();
        let receivers = y_rows[0].len();
        if senders == 0 || receivers == 0 {
            return Err(Error::InvalidObservation(
                "need at least one sender and one receiver".into(),
            ));
        }
        let mut u = Vec::with_capacity(u_rows.len() * senders);
        let mut y = Vec::with_capacity(y_rows.len() * receivers);
        for (r, (ur, yr)) in u_rows.iter().zip(&y_rows).enumerate() {
            if ur.len() != senders || yr.len() != receivers {
                return Err(Error::InvalidObservation(format!(
                    "ragged row {r}: {} senders, {} receivers",
                    ur.len(),
                    yr.len()
                )));
            }
            let sent: u64 = ur.iter().sum();
            let received: u64 = yr.iter().sum();
            if sent != received {
                return Err(Error::InvalidObservation(format!(
                    "round {r} is not conserving: {sent} sent, {received} received"
                )));
            }
            if sent == 0 {
                return Err(Error::InvalidObservation(format!("round {r} is empty")));
            }
            u.extend_from_slice(ur);
            y.extend_from_slice(yr);
        }
        Ok(ObservationWindow {
            rho: u_rows.len(),
            senders,
            receivers,
            u,
            y,
        })
    }

    pub fn rho(&self) -> usize {
        self.rho
    }

    pub fn num_senders(&self) -> usize {
        self.senders
    }

    pub fn num_receivers(&self) -> usize {
        self.receivers
    }

    pub fn sent(&self, round: usize, sender: usize) -> u64 {
        self.u[round * self.senders + sender]
    }

    pub fn received(&self, round: usize, receiver: usize) -> u64 {
        self.y[round * self.receivers + receiver]
    }

    pub fn round(&self, r: usize) -> Round<'_> {
        Round {
            sent: &self.u[r * self.senders..(r + 1) * self.senders],
            received: &self.y[r * self.receivers..(r + 1) * self.receivers],
        }
    }

    pub fn rounds(&self) -> impl Iterator<Item = Round<'_>> {
        (0..self.rho).map(move |r| self.round(r))
    }

    /// The window restricted to its first `rho` rounds.
    pub fn prefix(&self, rho: usize) -> ObservationWindow {
        assert!(rho >= 1 && rho <= self.rho);
        ObservationWindow {
            rho,
            senders: self.senders,
            receivers: self.receivers,
            u: self.u[..rho * self.senders].to_vec(),
            y: self.y[..rho * self.receivers].to_vec(),
        }
    }

    /// `U` as a dense rho x N float matrix.
    pub fn sender_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rho, self.senders, |r, i| self.sent(r, i) as f64)
    }

    /// `Y` as a dense rho x M float matrix.
    pub fn receiver_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rho, self.receivers, |r, j| self.received(r, j) as f64)
    }

    /// Total messages per sender across the window.
    pub fn sender_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.senders];
        for r in 0..self.rho {
            for i in 0..self.senders {
                totals[i] += self.sent(r, i);
            }
        }
        totals
    }

    /// Write `U` and `Y` as headerless CSVs of integer counts, one round per
    /// line.
    pub fn write_csv(&self, mut u_out: impl Write, mut y_out: impl Write) -> std::io::Result<()> {
        for r in 0..self.rho {
            let round = self.round(r);
            writeln!(u_out, "{}", join_counts(round.sent))?;
            writeln!(y_out, "{}", join_counts(round.received))?;
        }
        Ok(())
    }

    /// Read a pair of count CSVs written by [`ObservationWindow::write_csv`],
    /// re-validating conservation and shape.
    pub fn read_csv(u_in: impl BufRead, y_in: impl BufRead) -> Result<Self> {
        Ok(Self::from_rows(read_count_rows(u_in)?, read_count_rows(y_in)?)?)
    }
}

fn join_counts(counts: &[u64]) -> String {
    counts
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn read_count_rows(reader: impl BufRead) -> Result<Vec<Vec<u64>>> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<u64>, _> =
            line.split(',').map(|v| v.trim().parse::<u64>()).collect();
        rows.push(row.map_err(|_| Error::Parse {
            line: idx + 1,
            message: "count is not a non-negative integer".into(),
        })?);
    }
    Ok(rows)
}

/// Split the trace into mix rounds without tallying anything.
pub fn partition_rounds(trace: &Trace, config: MixConfig) -> Result<RoundPartition> {
    config.validate()?;
    let events = trace.events();
    let ranges = match config {
        MixConfig::Threshold { batch_size } => {
            let complete = events.len() / batch_size;
            if complete == 0 {
                return Err(Error::EmptyObservation {
                    threshold: batch_size,
                    available: events.len(),
                });
            }
            (0..complete)
                .map(|k| k * batch_size..(k + 1) * batch_size)
                .collect()
        }
        MixConfig::Timed { interval_secs } => {
            let anchor = events[0].timestamp;
            let mut ranges: Vec<Range<usize>> = Vec::new();
            let mut start = 0;
            let mut current = 0u64;
            for (idx, ev) in events.iter().enumerate() {
                let window = ((ev.timestamp - anchor) / interval_secs).floor() as u64;
                if window != current {
                    ranges.push(start..idx);
                    start = idx;
                    current = window;
                }
            }
            ranges.push(start..events.len());
            ranges
        }
    };
    Ok(RoundPartition { ranges })
}

/// Tally a partition into the adversary's count matrices.
pub fn tally(trace: &Trace, partition: &RoundPartition) -> ObservationWindow {
    let senders = trace.num_senders();
    let receivers = trace.num_receivers();
    let rho = partition.num_rounds();
    let mut u = vec![0u64; rho * senders];
    let mut y = vec![0u64; rho * receivers];
    for (r, range) in partition.ranges().iter().enumerate() {
        for ev in &trace.events()[range.clone()] {
            u[r * senders + ev.sender] += 1;
            y[r * receivers + ev.receiver] += 1;
        }
    }
    ObservationWindow {
        rho,
        senders,
        receivers,
        u,
        y,
    }
}

/// Run the mix over the trace: partition into rounds and tally counts.
pub fn anonymize(trace: &Trace, config: MixConfig) -> Result<ObservationWindow> {
    Ok(tally(trace, &partition_rounds(trace, config)?))
}

/// Basic shape and volume summary of a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundStats {
    pub rounds: usize,
    pub senders: usize,
    pub receivers: usize,
    pub mean_messages: f64,
    pub min_messages: u64,
    pub max_messages: u64,
}

pub fn round_stats(obs: &ObservationWindow) -> RoundStats {
    let totals: Vec<u64> = obs.rounds().map(|r| r.sent.iter().sum()).collect();
    let sum: u64 = totals.iter().sum();
    RoundStats {
        rounds: obs.rho(),
        senders: obs.num_senders(),
        receivers: obs.num_receivers(),
        mean_messages: sum as f64 / obs.rho() as f64,
        min_messages: *totals.iter().min().unwrap(),
        max_messages: *totals.iter().max().unwrap(),
    }
}

impl std::fmt::Display for RoundStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rounds={} senders={} receivers={} messages/round mean={:.2} min={} max={}",
            self.rounds,
            self.senders,
            self.receivers,
            self.mean_messages,
            self.min_messages,
            self.max_messages
        )
    }
}
