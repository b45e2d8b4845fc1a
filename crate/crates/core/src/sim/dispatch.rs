use std::collections::{HashMap, VecDeque};

use super::engine::{Channel, EventQueue};
use super::{queues_from, tile_times, Interval, Phase, RankRecord, Role, SimError, SimParams, SimTimeline, StallReason, TaskQueue, WorkerTrack};
use crate::perf::effective_bandwidth;

const NVL: usize = 0;
const HBM: usize = 1;

#[derive(Debug, Clone, Copy)]
enum Ev {
    Claim { rank: u32, slot: u32 },
    Link { rank: u32, ch: u8, version: u64 },
    Copy { rank: u32, relay: u32 },
    Flag { rank: u32, block: u32 },
    Computed { rank: u32, slot: u32 },
}

/// Flattened send item with the destination row precomputed.
#[derive(Debug, Clone, Copy)]
struct Item {
    dst: u32,
    row: u32,
    block: u32,
    token: u32,
    slot: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Idle,
    Comm { task: u32, next: usize, end: usize, since: f64, busy: f64, sent_at: f64 },
    Relay,
    Compute { tile: u32, claimed: f64 },
    Finished,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    row: u32,
    block: u32,
    src: (u32, u32, u32),
}

struct Relay {
    slot: u32,
    blocks_left: usize,
    jobs: VecDeque<Job>,
    copying: bool,
    busy: f64,
}

struct Rank {
    queue: TaskQueue,
    cursor: usize,
    /// Primary flag and replica rows per schedule item.
    primary: Vec<bool>,
    replica_index: Vec<usize>,
    replicas: Vec<(u32, u32, u32, u32)>,
    items: Vec<Item>,
    block_count: Vec<u32>,
    block_flag: Vec<f64>,
    block_last: Vec<f64>,
    block_waiters: Vec<Vec<u32>>,
    /// Relay index watching a row block, `None` if its slot does not exist.
    block_owner: Vec<Option<u32>>,
    relays: Vec<Relay>,
    links: [Channel; 2],
    link_owner: [HashMap<u32, usize>; 2],
    tiles_done: usize,
    record: RankRecord,
}

struct Sim<'a> {
    p: &'a SimParams,
    n_sm: u32,
    ranks: Vec<Rank>,
    workers: Vec<State>,
    tracks: Vec<WorkerTrack>,
    q: EventQueue<Ev>,
    t_up: f64,
    copy_time: f64,
    s_tok: f64,
    bytes: [f64; 2],
}

pub fn run_dispatch_gemm_sim(p: &SimParams) -> Result<SimTimeline, SimError> {
    let (t_up, _) = tile_times(p)?;
    let queues = queues_from(p)?;
    let n_sm = p.spec.n_sm;
    let cfg = p.cfg;
    let s_tok = p.bytes_per_token();
    let relay_share = effective_bandwidth(cfg.n_relay, cfg.w, p.spec.bw_hbm, p.spec.w_sat) / f64::from(cfg.n_relay.max(1));
    let bases: Vec<Vec<usize>> = queues.iter().map(|q| q.block_base.clone()).collect();
    let mut ranks = Vec::with_capacity(p.world());
    for (rank, queue) in queues.into_iter().enumerate() {
        ranks.push(build_rank(p, rank, queue, &bases));
    }
    let world = ranks.len();
    let mut sim = Sim {
        p,
        n_sm,
        ranks,
        workers: vec![State::Idle; world * n_sm as usize],
        tracks: (0..world as u32)
            .flat_map(|r| (0..n_sm).map(move |s| WorkerTrack { rank: r, slot: s, intervals: Vec::new() }))
            .collect(),
        q: EventQueue::new(),
        t_up,
        copy_time: s_tok / relay_share,
        s_tok,
        bytes: [0.0; 2],
    };
    sim.launch();
    while let Some(ev) = sim.q.pop() {
        sim.handle(ev);
    }
    sim.finish()
}

fn build_rank(p: &SimParams, rank: usize, queue: TaskQueue, bases: &[Vec<usize>]) -> Rank {
    let map = &p.maps[rank];
    let schedule = &p.schedules[rank];
    let b_m = p.shape.b_m as usize;
    let items: Vec<Item> = schedule
        .items
        .iter()
        .map(|it| {
            let d = it.dst;
            Item {
                dst: d.rank,
                row: map.layout.buffer_index(d) as u32,
                block: (bases[d.rank as usize][d.local_expert as usize] + d.offset as usize / b_m) as u32,
                token: it.token,
                slot: it.slot,
            }
        })
        .collect();

    // first copy per (token, destination rank) in schedule order crosses the
    // link; later ones are relay copies at the destination
    let mut first: HashMap<(u32, u32), usize> = HashMap::new();
    let mut primary = vec![false; items.len()];
    let mut parent = vec![usize::MAX; items.len()];
    for (i, it) in items.iter().enumerate() {
        match first.get(&(it.token, it.dst)) {
            Some(&f) => parent[i] = f,
            None => {
                first.insert((it.token, it.dst), i);
                primary[i] = true;
            }
        }
    }
    let mut counts = vec![0usize; items.len() + 1];
    for &f in parent.iter().filter(|&&f| f != usize::MAX) {
        counts[f + 1] += 1;
    }
    for i in 0..items.len() {
        counts[i + 1] += counts[i];
    }
    let mut fill = counts.clone();
    let mut replicas = vec![(0, 0, 0, 0); counts[items.len()]];
    for (i, &f) in parent.iter().enumerate() {
        if f != usize::MAX {
            let it = items[i];
            replicas[fill[f]] = (it.row, it.block, it.token, it.slot);
            fill[f] += 1;
        }
    }

    let n_blocks = queue.block_rows.len();
    let n_slots_left = p.spec.n_sm.saturating_sub(p.cfg.n_disp);
    let mut block_owner = vec![None; n_blocks];
    let mut relays = Vec::new();
    for (j, range) in queue.relay.iter().enumerate() {
        let present = (j as u32) < n_slots_left;
        for b in range.clone() {
            block_owner[b] = present.then_some(relays.len() as u32);
        }
        if present {
            relays.push(Relay { slot: p.cfg.n_disp + j as u32, blocks_left: range.len(), jobs: VecDeque::new(), copying: false, busy: 0.0 });
        }
    }
    let rows = map.layout.total(rank);
    let n_tiles = queue.tiles.len();
    let (w, w_sat) = (p.cfg.w, p.spec.w_sat);
    Rank {
        cursor: 0,
        primary,
        replica_index: counts,
        replicas,
        items,
        block_count: vec![0; n_blocks],
        block_flag: vec![f64::INFINITY; n_blocks],
        block_last: vec![0.0; n_blocks],
        block_waiters: vec![Vec::new(); n_blocks],
        block_owner,
        relays,
        links: [Channel::new(p.spec.bw_nvl, w, w_sat), Channel::new(p.spec.bw_hbm, w, w_sat)],
        link_owner: [HashMap::new(), HashMap::new()],
        tiles_done: 0,
        record: RankRecord {
            row_arrival: vec![f64::INFINITY; rows],
            row_source: vec![(u32::MAX, u32::MAX, u32::MAX); rows],
            tile_flag: vec![f64::INFINITY; n_tiles],
            tile_start: vec![f64::INFINITY; n_tiles],
            tile_end: vec![f64::INFINITY; n_tiles],
            ..Default::default()
        },
        queue,
    }
}

impl Sim<'_> {
    fn gid(&self, rank: u32, slot: u32) -> u32 {
        rank * self.n_sm + slot
    }

    fn launch(&mut self) {
        for r in 0..self.ranks.len() as u32 {
            let relay_slots: Vec<u32> = self.ranks[r as usize].relays.iter().map(|x| x.slot).collect();
            for &s in &relay_slots {
                let g = self.gid(r, s) as usize;
                self.workers[g] = State::Relay;
            }
            for s in 0..self.n_sm {
                if !relay_slots.contains(&s) {
                    self.q.push(0.0, self.gid(r, s), 0, Ev::Claim { rank: r, slot: s });
                }
            }
            // a relay with nothing to watch is done at once
            for j in 0..relay_slots.len() {
                if self.ranks[r as usize].relays[j].blocks_left == 0 {
                    self.relay_done(r, j as u32, 0.0);
                }
            }
        }
    }

    fn handle(&mut self, ev: Ev) {
        let now = self.q.now;
        match ev {
            Ev::Claim { rank, slot } => self.claim(rank, slot, now),
            Ev::Link { rank, ch, version } => self.link_done(rank, ch as usize, version, now),
            Ev::Copy { rank, relay } => self.copy_done(rank, relay, now),
            Ev::Flag { rank, block } => self.flag(rank, block, now),
            Ev::Computed { rank, slot } => self.computed(rank, slot, now),
        }
    }

    fn claim(&mut self, rank: u32, slot: u32, now: f64) {
        let g = self.gid(rank, slot) as usize;
        let r = &mut self.ranks[rank as usize];
        let id = r.cursor;
        if id >= r.queue.len() {
            self.workers[g] = State::Finished;
            return;
        }
        r.cursor += 1;
        if id < r.queue.n_comm() {
            let range = r.queue.comm[id].clone();
            self.workers[g] = State::Comm { task: id as u32, next: range.start, end: range.end, since: now, busy: 0.0, sent_at: now };
            self.send_next(rank, slot, now);
        } else {
            let tile = (id - r.queue.n_comm()) as u32;
            let t = r.queue.tiles[tile as usize];
            let block = r.queue.block_base[t.local_expert as usize] + t.block as usize;
            self.workers[g] = State::Compute { tile, claimed: now };
            if r.block_flag[block] <= now {
                self.start_tile(rank, slot, now);
            } else {
                r.block_waiters[block].push(slot);
            }
        }
    }

    /// Starts the next link transfer of a comm worker, or ends its task.
    fn send_next(&mut self, rank: u32, slot: u32, now: f64) {
        let g = self.gid(rank, slot) as usize;
        let State::Comm { task, mut next, end, since, busy, .. } = self.workers[g] else { unreachable!() };
        let r = &mut self.ranks[rank as usize];
        while next < end && !r.primary[next] {
            next += 1;
        }
        if next == end {
            self.tracks[g].intervals.push(Interval { start: since, end: now, role: Role::Comm, task, busy, stall: None });
            self.workers[g] = State::Idle;
            self.q.push(now, g as u32, 0, Ev::Claim { rank, slot });
            return;
        }
        let ch = if r.items[next].dst == rank { HBM } else { NVL };
        r.links[ch].start(now, slot, self.s_tok);
        r.link_owner[ch].insert(slot, next);
        self.bytes[ch] += self.s_tok;
        self.workers[g] = State::Comm { task, next, end, since, busy, sent_at: now };
        self.schedule_link(rank, ch);
    }

    fn schedule_link(&mut self, rank: u32, ch: usize) {
        let link = &self.ranks[rank as usize].links[ch];
        if let Some(t) = link.next_completion() {
            let actor = self.ranks.len() as u32 * self.n_sm + 2 * rank + ch as u32;
            let version = link.version;
            self.q.push(t, actor, 1, Ev::Link { rank, ch: ch as u8, version });
        }
    }

    fn link_done(&mut self, rank: u32, ch: usize, version: u64, now: f64) {
        if self.ranks[rank as usize].links[ch].version != version {
            return;
        }
        let done = self.ranks[rank as usize].links[ch].complete(now);
        for slot in done {
            let idx = self.ranks[rank as usize].link_owner[ch].remove(&slot).expect("flow without owner");
            let it = self.ranks[rank as usize].items[idx];
            self.arrive(it.dst, it.row, it.block, (rank, it.token, it.slot), now);
            let (lo, hi) = {
                let r = &self.ranks[rank as usize];
                (r.replica_index[idx], r.replica_index[idx + 1])
            };
            for k in lo..hi {
                let (row, block, token, s) = self.ranks[rank as usize].replicas[k];
                self.enqueue_copy(it.dst, row, block, (rank, token, s), now);
            }
            let g = self.gid(rank, slot) as usize;
            if let State::Comm { task, next, end, since, busy, sent_at } = self.workers[g] {
                self.workers[g] = State::Comm { task, next: next + 1, end, since, busy: busy + (now - sent_at), sent_at };
            }
            self.send_next(rank, slot, now);
        }
        self.schedule_link(rank, ch);
    }

    fn enqueue_copy(&mut self, dst: u32, row: u32, block: u32, src: (u32, u32, u32), now: f64) {
        let r = &mut self.ranks[dst as usize];
        let Some(j) = r.block_owner[block as usize] else { return };
        let relay = &mut r.relays[j as usize];
        relay.jobs.push_back(Job { row, block, src });
        if !relay.copying {
            self.start_copy(dst, j, now);
        }
    }

    fn start_copy(&mut self, rank: u32, j: u32, now: f64) {
        let copy_time = self.copy_time;
        let relay = &mut self.ranks[rank as usize].relays[j as usize];
        if relay.jobs.is_empty() {
            relay.copying = false;
            return;
        }
        relay.copying = true;
        relay.busy += copy_time;
        let slot = relay.slot;
        self.bytes[HBM] += self.s_tok;
        self.q.push(now + copy_time, self.gid(rank, slot), 2, Ev::Copy { rank, relay: j });
    }

    fn copy_done(&mut self, rank: u32, j: u32, now: f64) {
        let relay = &mut self.ranks[rank as usize].relays[j as usize];
        let job = relay.jobs.pop_front().expect("copy without job");
        self.arrive(rank, job.row, job.block, job.src, now);
        self.start_copy(rank, j, now);
    }

    fn arrive(&mut self, rank: u32, row: u32, block: u32, src: (u32, u32, u32), now: f64) {
        let tau = self.p.spec.tau_sync;
        let r = &mut self.ranks[rank as usize];
        r.record.row_arrival[row as usize] = now;
        r.record.row_source[row as usize] = src;
        let b = block as usize;
        if r.block_owner[b].is_none() {
            return;
        }
        r.block_count[b] += 1;
        r.block_last[b] = r.block_last[b].max(now);
        if r.block_count[b] == r.queue.block_rows[b] {
            let owner = r.block_owner[b].unwrap();
            let slot = r.relays[owner as usize].slot;
            self.q.push(now + tau, self.gid(rank, slot), 3, Ev::Flag { rank, block });
        }
    }

    fn flag(&mut self, rank: u32, block: u32, now: f64) {
        let r = &mut self.ranks[rank as usize];
        let b = block as usize;
        r.block_flag[b] = now;
        let waiters = std::mem::take(&mut r.block_waiters[b]);
        let owner = r.block_owner[b].unwrap();
        r.relays[owner as usize].blocks_left -= 1;
        let relay_finished = r.relays[owner as usize].blocks_left == 0;
        for slot in waiters {
            self.start_tile(rank, slot, now);
        }
        if relay_finished {
            self.relay_done(rank, owner, now);
        }
    }

    fn relay_done(&mut self, rank: u32, j: u32, now: f64) {
        let relay = &self.ranks[rank as usize].relays[j as usize];
        let (slot, busy) = (relay.slot, relay.busy);
        let g = self.gid(rank, slot) as usize;
        self.tracks[g].intervals.push(Interval { start: 0.0, end: now, role: Role::Relay, task: j, busy, stall: None });
        self.workers[g] = State::Idle;
        self.q.push(now, g as u32, 0, Ev::Claim { rank, slot });
    }

    fn start_tile(&mut self, rank: u32, slot: u32, now: f64) {
        let g = self.gid(rank, slot) as usize;
        let State::Compute { tile, claimed } = self.workers[g] else { unreachable!() };
        let n_comm = self.ranks[rank as usize].queue.n_comm() as u32;
        if now > claimed {
            self.tracks[g].intervals.push(Interval {
                start: claimed,
                end: now,
                role: Role::Compute,
                task: n_comm + tile,
                busy: 0.0,
                stall: Some(StallReason::TileFlag),
            });
        }
        let r = &mut self.ranks[rank as usize];
        let t = r.queue.tiles[tile as usize];
        let block = r.queue.block_base[t.local_expert as usize] + t.block as usize;
        r.record.tile_flag[tile as usize] = r.block_flag[block];
        r.record.tile_start[tile as usize] = now;
        self.q.push(now + self.t_up, g as u32, 4, Ev::Computed { rank, slot });
    }

    fn computed(&mut self, rank: u32, slot: u32, now: f64) {
        let g = self.gid(rank, slot) as usize;
        let State::Compute { tile, .. } = self.workers[g] else { unreachable!() };
        let r = &mut self.ranks[rank as usize];
        let start = r.record.tile_start[tile as usize];
        r.record.tile_end[tile as usize] = now;
        r.tiles_done += 1;
        let task = r.queue.n_comm() as u32 + tile;
        self.tracks[g].intervals.push(Interval { start, end: now, role: Role::Compute, task, busy: now - start, stall: None });
        self.workers[g] = State::Idle;
        self.claim(rank, slot, now);
    }

    fn finish(self) -> Result<SimTimeline, SimError> {
        let mut pending = 0;
        for r in &self.ranks {
            pending += r.queue.tiles.len() - r.tiles_done;
            pending += r.relays.iter().filter(|x| x.blocks_left > 0).count();
            pending += r.queue.relay[r.relays.len()..].iter().filter(|b| !b.is_empty()).count();
        }
        if pending > 0 {
            return Err(SimError::DeadlockDetected { phase: Phase::Dispatch, time: self.q.now, pending });
        }
        let l_comm = self
            .ranks
            .iter()
            .flat_map(|r| r.record.row_arrival.iter().copied())
            .fold(0.0, f64::max);
        let l_compute = self.ranks.iter().flat_map(|r| r.record.tile_end.iter().copied()).fold(0.0, f64::max);
        let events = self.q.processed;
        let timeline = SimTimeline {
            phase: Phase::Dispatch,
            n_sm: self.n_sm,
            world: self.ranks.len() as u32,
            workers: self.tracks,
            ranks: self.ranks.into_iter().map(|r| r.record).collect(),
            metrics: super::SimMetrics { l_comm, l_compute, bytes_nvl: self.bytes[NVL], bytes_hbm: self.bytes[HBM], ..Default::default() },
        };
        Ok(timeline.finish(events))
    }
}
