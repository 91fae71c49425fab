//! Discrete-event engine.
//!
//! A virtual clock plus a priority queue of pending events ordered by
//! `(fire_time, seq)`. `seq` is the insertion ordinal, so events scheduled
//! for the same instant fire in the order they were scheduled. Random
//! numbers come from named substreams derived from one master seed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Virtual time in seconds.
pub type SimTime = f64;

pub const SECONDS_PER_HOUR: f64 = 3_600.0;
pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const SECONDS_PER_WEEK: f64 = 7.0 * SECONDS_PER_DAY;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("cannot schedule at t={fire_time} before the clock ({clock})")]
    PastTime { fire_time: SimTime, clock: SimTime },
}

/// Handle returned by [`Kernel::schedule`]; equal to the event's sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

#[derive(Debug, Clone)]
pub struct Event<E> {
    pub id: EventId,
    pub fire_time: SimTime,
    pub payload: E,
}

struct Scheduled<E> {
    fire_time: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        other
            .fire_time
            .total_cmp(&self.fire_time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    pub events_processed: u64,
    pub final_clock: SimTime,
}

pub struct Kernel<E> {
    clock: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Scheduled<E>>,
    pending: HashSet<u64>,
    processed: u64,
    master_seed: u64,
}

impl<E> Kernel<E> {
    pub fn new(master_seed: u64) -> Self {
        Self {
            clock: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            pending: HashSet::new(),
            processed: 0,
            master_seed,
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn schedule(&mut self, payload: E, fire_time: SimTime) -> Result<EventId, KernelError> {
        if fire_time < self.clock || fire_time.is_nan() {
            return Err(KernelError::PastTime {
                fire_time,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(seq);
        self.queue.push(Scheduled {
            fire_time,
            seq,
            payload,
        });
        Ok(EventId(seq))
    }

    /// Schedules `payload` at `now + delay`. Negative delays are clamped to zero.
    pub fn schedule_in(&mut self, payload: E, delay: SimTime) -> EventId {
        let at = self.clock + delay.max(0.0);
        self.schedule(payload, at)
            .expect("relative schedule is never in the past")
    }

    /// Makes a pending event inert. Returns false if it already fired, was
    /// already cancelled, or was never scheduled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.pending.remove(&id.0)
    }

    /// Pops the next live event with `fire_time <= t_end` and advances the clock to it.
    pub fn next_event(&mut self, t_end: SimTime) -> Option<Event<E>> {
        loop {
            let head = self.queue.peek()?;
            if head.fire_time > t_end {
                return None;
            }
            let ev = self.queue.pop().expect("peeked");
            if !self.pending.remove(&ev.seq) {
                continue;
            }
            debug_assert!(ev.fire_time >= self.clock);
            self.clock = ev.fire_time;
            self.processed += 1;
            return Some(Event {
                id: EventId(ev.seq),
                fire_time: ev.fire_time,
                payload: ev.payload,
            });
        }
    }

    /// Processes every event with `fire_time <= t_end` in `(fire_time, seq)`
    /// order, then leaves the clock at `t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> RunStats
    where
        F: FnMut(&mut Kernel<E>, Event<E>),
    {
        let before = self.processed;
        while let Some(ev) = self.next_event(t_end) {
            handler(self, ev);
        }
        if t_end > self.clock {
            self.clock = t_end;
        }
        RunStats {
            events_processed: self.processed - before,
            final_clock: self.clock,
        }
    }

    pub fn rng(&self, stream_name: &str) -> RngStream {
        RngStream::derive(self.master_seed, stream_name)
    }
}

/// A named, reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    name: String,
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn derive(master_seed: u64, name: &str) -> Self {
        let seed = splitmix64(master_seed ^ splitmix64(fnv1a(name.as_bytes())));
        Self {
            name: name.to_string(),
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
