//! Communication traces and ground-truth sending profiles.
//!
//! A [`Trace`] is the raw (timestamp, sender, receiver) record stream that
//! every downstream stage consumes. String identifiers are interned to dense
//! indices at construction time; sender and receiver namespaces are kept
//! disjoint. The canonical on-disk format is a three-column CSV with a
//! `timestamp,sender,receiver` header, one event per line.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::attack::ProfileMatrix;
use crate::error::{Error, Result};

pub const TRACE_CSV_HEADER: &str = "timestamp,sender,receiver";

/// One message: who sent to whom, and when.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    /// Seconds since epoch (or since trace start); finite and non-negative.
    pub timestamp: f64,
    /// Interned sender index in `0..N`.
    pub sender: usize,
    /// Interned receiver index in `0..M`.
    pub receiver: usize,
}

/// An event stream sorted by timestamp, together with the name tables that
/// map interned indices back to the original identifiers.
///
/// Events with equal timestamps keep their construction order; a message to
/// several recipients must already be expanded into one event per recipient
/// by whatever exported the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    events: Vec<TraceEvent>,
    sender_names: Vec<String>,
    receiver_names: Vec<String>,
}

fn validate_name(name: &str) -> std::result::Result<(), String> {
    if name.is_empty() {
        return Err("empty name".into());
    }
    if name.contains(',') || name.contains('\n') || name.contains('\r') {
        return Err(format!("name {name:?} contains a comma or line break"));
    }
    Ok(())
}

impl Trace {
    /// Build a trace from parts, validating indices and timestamps and
    /// stable-sorting the events by timestamp.
    pub fn new(
        mut events: Vec<TraceEvent>,
        sender_names: Vec<String>,
        receiver_names: Vec<String>,
    ) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::EmptyTrace);
        }
        for names in [&sender_names, &receiver_names] {
            let mut seen = HashMap::new();
            for (i, name) in names.iter().enumerate() {
                validate_name(name).map_err(|m| Error::InvalidConfig(m))?;
                if let Some(prev) = seen.insert(name.as_str(), i) {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate name {name:?} at indices {prev} and {i}"
                    )));
                }
            }
        }
        for (i, ev) in events.iter().enumerate() {
            if !ev.timestamp.is_finite() || ev.timestamp < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "event {i}: timestamp {} is not finite and non-negative",
                    ev.timestamp
                )));
            }
            if ev.sender >= sender_names.len() {
                return Err(Error::InvalidConfig(format!(
                    "event {i}: sender index {} out of range",
                    ev.sender
                )));
            }
            if ev.receiver >= receiver_names.len() {
                return Err(Error::InvalidConfig(format!(
                    "event {i}: receiver index {} out of range",
                    ev.receiver
                )));
            }
        }
        events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Ok(Trace {
            events,
            sender_names,
            receiver_names,
        })
    }

    /// Parse the trace-CSV format. Rows are stable-sorted by timestamp and
    /// names are interned in first-appearance order of the sorted events, so
    /// parsing is idempotent across a serialize round trip.
    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        if header.trim_end_matches('\r') != TRACE_CSV_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {TRACE_CSV_HEADER:?}, got {header:?}"),
            });
        }

        let mut rows: Vec<(f64, String, String)> = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let (ts, sender, receiver) = match (cols.next(), cols.next(), cols.next(), cols.next())
            {
                (Some(ts), Some(s), Some(r), None) => (ts, s, r),
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected 3 columns, got {}", line.split(',').count()),
                    })
                }
            };
            let timestamp: f64 = ts.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("timestamp {ts:?} is not a number"),
            })?;
            if !timestamp.is_finite() || timestamp < 0.0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("timestamp {ts} must be finite and non-negative"),
                });
            }
            for name in [sender, receiver] {
                if name.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "empty sender or receiver name".into(),
                    });
                }
            }
            rows.push((timestamp, sender.to_owned(), receiver.to_owned()));
        }
        if rows.is_empty() {
            return Err(Error::EmptyTrace);
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut senders = Interner::default();
        let mut receivers = Interner::default();
        let events = rows
            .into_iter()
            .map(|(timestamp, sender, receiver)| TraceEvent {
                timestamp,
                sender: senders.intern(&sender),
                receiver: receivers.intern(&receiver),
            })
            .collect();
        Ok(Trace {
            events,
            sender_names: senders.names,
            receiver_names: receivers.names,
        })
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        Self::parse(text.as_bytes())
    }

    /// Write the trace back out in the canonical CSV format. Timestamps use
    /// the shortest decimal form that round-trips the exact value.
    pub fn write(&self, mut writer: impl Write) -> std::io::Result<()> {
        writeln!(writer, "{TRACE_CSV_HEADER}")?;
        for ev in &self.events {
            writeln!(
                writer,
                "{},{},{}",
                ev.timestamp, self.sender_names[ev.sender], self.receiver_names[ev.receiver]
            )?;
        }
        Ok(())
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn num_senders(&self) -> usize {
        self.sender_names.len()
    }

    pub fn num_receivers(&self) -> usize {
        self.receiver_names.len()
    }

    pub fn sender_names(&self) -> &[String] {
        &self.sender_names
    }

    pub fn receiver_names(&self) -> &[String] {
        &self.receiver_names
    }

    /// Seconds between the first and last event.
    pub fn duration(&self) -> f64 {
        self.events.last().unwrap().timestamp - self.events[0].timestamp
    }

    /// Total events per sender.
    pub fn sender_event_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_senders()];
        for ev in &self.events {
            counts[ev.sender] += 1;
        }
        counts
    }

    /// Keep only the `k` senders with the most events (ties broken by lower
    /// index, i.e. earlier first appearance) and re-intern both namespaces in
    /// first-appearance order of the retained events. Receivers left with no
    /// messages drop out of the receiver table. `k >= N` returns the trace
    /// unchanged.
    pub fn restrict_to_top_senders(&self, k: usize) -> Result<Trace> {
        if k == 0 {
            return Err(Error::InvalidConfig("top-sender count must be >= 1".into()));
        }
        if k >= self.num_senders() {
            return Ok(self.clone());
        }
        let counts = self.sender_event_counts();
        let mut order: Vec<usize> = (0..self.num_senders()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(counts[i]), i));
        let mut keep = vec![false; self.num_senders()];
        for &i in order.iter().take(k) {
            keep[i] = true;
        }

        let mut senders = Interner::default();
        let mut receivers = Interner::default();
        let mut events = Vec::new();
        for ev in self.events.iter().filter(|ev| keep[ev.sender]) {
            events.push(TraceEvent {
                timestamp: ev.timestamp,
                sender: senders.intern(&self.sender_names[ev.sender]),
                receiver: receivers.intern(&self.receiver_names[ev.receiver]),
            });
        }
        // Retained senders each had at least one event, so events is non-empty.
        Ok(Trace {
            events,
            sender_names: senders.names,
            receiver_names: receivers.names,
        })
    }

    /// Empirical sending profiles over the whole trace: row `i` holds the
    /// fraction of sender `i`'s messages addressed to each receiver.
    pub fn ground_truth_profiles(&self) -> Result<ProfileMatrix> {
        let n = self.num_senders();
        let m = self.num_receivers();
        let mut counts = vec![0u64; n * m];
        let mut totals = vec![0u64; n];
        for ev in &self.events {
            counts[ev.sender * m + ev.receiver] += 1;
            totals[ev.sender] += 1;
        }
        if let Some(i) = totals.iter().position(|&t| t == 0) {
            return Err(Error::UndefinedProfile {
                name: self.sender_names[i].clone(),
            });
        }
        let matrix = DMatrix::from_fn(n, m, |i, j| counts[i * m + j] as f64 / totals[i] as f64);
        ProfileMatrix::ground_truth(matrix)
    }
}

#[derive(Default)]
struct Interner {
    index: HashMap<String, usize>,
    names: Vec<String>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.to_owned(), i);
        self.names.push(name.to_owned());
        i
    }
}
