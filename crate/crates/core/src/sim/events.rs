//! Event queue and the persisted event-log schema.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{AttributeMap, ClientId, Constraint, JobId};
use crate::error::SimError;

/// Simulated time in whole milliseconds.
pub type Millis = u64;

pub fn to_secs(t: Millis) -> f64 {
    t as f64 / 1000.0
}

/// Rounds a non-negative duration in seconds to whole milliseconds.
pub fn from_secs(s: f64) -> Millis {
    (s * 1000.0).round().max(0.0) as Millis
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Online,
    Smallbatch,
    StaticPartition,
    PureRandom,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Online => "online",
            Mode::Smallbatch => "smallbatch",
            Mode::StaticPartition => "static_partition",
            Mode::PureRandom => "pure_random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// One line of `events.jsonl`. `t` is simulated milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LogRecord {
    RunStart {
        t: Millis,
        mode: Mode,
        num_clients: usize,
        seed: u64,
    },
    AdmissionRejected {
        t: Millis,
        est_demand: u32,
    },
    JobRegister {
        t: Millis,
        job: JobId,
        submitted: Millis,
        total_round: u32,
        est_demand: u32,
        public_constraint: Constraint,
        private_constraint: Constraint,
    },
    ClientArrive {
        t: Millis,
        client: ClientId,
        public_attrs: AttributeMap,
        private_attrs: AttributeMap,
    },
    ClientDepart {
        t: Millis,
        client: ClientId,
    },
    RoundStart {
        t: Millis,
        job: JobId,
        round: u32,
        demand: u32,
    },
    Bound {
        t: Millis,
        client: ClientId,
        job: JobId,
        round: u32,
    },
    DemandMet {
        t: Millis,
        job: JobId,
        round: u32,
    },
    EndRequest {
        t: Millis,
        job: JobId,
        round: u32,
    },
    TaskDone {
        t: Millis,
        client: ClientId,
        job: JobId,
        round: u32,
        start: Millis,
    },
    TaskFail {
        t: Millis,
        client: ClientId,
        job: JobId,
        round: u32,
        start: Millis,
    },
    RoundEnd {
        t: Millis,
        job: JobId,
        round: u32,
        count: u64,
    },
    JobFinish {
        t: Millis,
        job: JobId,
    },
    RunEnd {
        t: Millis,
        status: RunStatus,
        reason: String,
    },
}

impl LogRecord {
    pub fn time(&self) -> Millis {
        use LogRecord::*;
        match self {
            RunStart { t, .. }
            | AdmissionRejected { t, .. }
            | JobRegister { t, .. }
            | ClientArrive { t, .. }
            | ClientDepart { t, .. }
            | RoundStart { t, .. }
            | Bound { t, .. }
            | DemandMet { t, .. }
            | EndRequest { t, .. }
            | TaskDone { t, .. }
            | TaskFail { t, .. }
            | RoundEnd { t, .. }
            | JobFinish { t, .. }
            | RunEnd { t, .. } => *t,
        }
    }
}

pub fn write_log<W: Write>(log: &[LogRecord], mut out: W) -> Result<(), SimError> {
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log<R: BufRead>(input: R) -> Result<Vec<LogRecord>, SimError> {
    let mut log = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| SimError::TraceParse { line: i + 1, source })?;
        log.push(rec);
    }
    Ok(log)
}

struct Queued<E> {
    time: Millis,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<E> Eq for Queued<E> {}

impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Queued<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Min-queue ordered by `(time, seq)`; `seq` is assigned at push time, so
/// same-time events run in scheduling order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Queued<E>>,
    next_seq: u64,
    now: Millis,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn now(&self) -> Millis {
        self.now
    }

    /// Panics if `time` is in the past.
    pub fn push(&mut self, time: Millis, event: E) {
        assert!(time >= self.now, "event scheduled in the past: {time} < {}", self.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued { time, seq, event });
    }

    pub fn pop(&mut self) -> Option<(Millis, E)> {
        let q = self.heap.pop()?;
        self.now = q.time;
        Some((q.time, q.event))
    }

    pub fn peek_time(&self) -> Option<Millis> {
        self.heap.peek().map(|q| q.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_orders_by_time_then_seq() {
        let mut q = EventQueue::default();
        q.push(5, 'a');
        q.push(3, 'b');
        q.push(5, 'c');
        q.push(3, 'd');
        let order: Vec<char> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, vec!['b', 'd', 'a', 'c']);
    }

    #[test]
    #[should_panic]
    fn queue_rejects_past_events() {
        let mut q = EventQueue::default();
        q.push(5, ());
        q.pop();
        q.push(4, ());
    }

    #[test]
    fn log_round_trips() {
        let log = vec![
            LogRecord::Bound {
                t: 1,
                client: ClientId(2),
                job: JobId(3),
                round: 1,
            },
            LogRecord::RunEnd {
                t: 9,
                status: RunStatus::Completed,
                reason: "all jobs finished".into(),
            },
        ];
        let mut buf = Vec::new();
        write_log(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"ev":"BOUND","t":1,"client":2,"job":3,"round":1}"#));
        assert_eq!(read_log(&buf[..]).unwrap(), log);
    }
}
