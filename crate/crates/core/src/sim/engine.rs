//! Event queue and processor-sharing link used by both kernel simulations.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::perf::effective_bandwidth;

struct Entry<E> {
    time: f64,
    actor: u32,
    kind: u8,
    seq: u64,
    ev: E,
}

impl<E> Entry<E> {
    fn key(&self) -> (f64, u32, u8, u64) {
        (self.time, self.actor, self.kind, self.seq)
    }
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3))
    }
}

/// Min-queue ordered by (time, actor, kind, insertion).
pub(crate) struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    seq: u64,
    pub now: f64,
    pub processed: u64,
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue { heap: BinaryHeap::new(), seq: 0, now: 0.0, processed: 0 }
    }

    pub fn push(&mut self, time: f64, actor: u32, kind: u8, ev: E) {
        debug_assert!(time >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.heap.push(Reverse(Entry { time, actor, kind, seq: self.seq, ev }));
    }

    pub fn pop(&mut self) -> Option<E> {
        let Reverse(e) = self.heap.pop()?;
        self.now = e.time;
        self.processed += 1;
        Some(e.ev)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Flow {
    target: f64,
    owner: u32,
    seq: u64,
}

impl Eq for Flow {}

impl PartialOrd for Flow {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Flow {
    fn cmp(&self, other: &Self) -> Ordering {
        self.target.total_cmp(&other.target).then(self.owner.cmp(&other.owner)).then(self.seq.cmp(&other.seq))
    }
}

/// A link shared equally by its active flows: with `n` flows each one moves
/// at `B(n, w, beta) / n`. Progress is tracked as a virtual byte clock, so a
/// rate change costs O(1) regardless of how many flows are open.
pub(crate) struct Channel {
    beta: f64,
    w: u32,
    w_sat: f64,
    vclock: f64,
    last: f64,
    flows: BinaryHeap<Reverse<Flow>>,
    seq: u64,
    pub version: u64,
}

impl Channel {
    pub fn new(beta: f64, w: u32, w_sat: f64) -> Self {
        Channel { beta, w, w_sat, vclock: 0.0, last: 0.0, flows: BinaryHeap::new(), seq: 0, version: 0 }
    }

    #[cfg(test)]
    pub fn active(&self) -> usize {
        self.flows.len()
    }

    fn rate(&self) -> f64 {
        let n = self.flows.len() as u32;
        if n == 0 {
            return 0.0;
        }
        effective_bandwidth(n, self.w, self.beta, self.w_sat) / f64::from(n)
    }

    fn advance(&mut self, now: f64) {
        self.vclock += (now - self.last) * self.rate();
        self.last = now;
    }

    pub fn start(&mut self, now: f64, owner: u32, bytes: f64) {
        self.advance(now);
        self.seq += 1;
        self.flows.push(Reverse(Flow { target: self.vclock + bytes, owner, seq: self.seq }));
        self.version += 1;
    }

    /// Absolute time at which the earliest open flow finishes.
    pub fn next_completion(&self) -> Option<f64> {
        let Reverse(f) = self.flows.peek()?;
        let rate = self.rate();
        if rate <= 0.0 {
            return None;
        }
        Some(self.last + ((f.target - self.vclock).max(0.0) / rate))
    }

    /// Closes every flow whose bytes are through at `now`; owners in
    /// (target, owner) order.
    pub fn complete(&mut self, now: f64) -> Vec<u32> {
        self.advance(now);
        let mut done = Vec::new();
        if let Some(Reverse(f)) = self.flows.peek() {
            self.vclock = self.vclock.max(f.target);
        }
        while let Some(Reverse(f)) = self.flows.peek() {
            if f.target > self.vclock {
                break;
            }
            done.push(f.owner);
            self.flows.pop();
        }
        self.version += 1;
        done
    }
}

/// Sizes of `parts` contiguous ranges covering `0..n`, the first `n % parts`
/// one longer.
pub fn even_split(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    if parts == 0 {
        return Vec::new();
    }
    let (base, extra) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}
