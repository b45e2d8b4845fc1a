use std::collections::HashMap;

use super::engine::{even_split, Channel, EventQueue};
use super::{row_blocks, tile_times, tiles_for, Interval, Phase, RankRecord, Role, SimError, SimMetrics, SimParams, SimTimeline, Tile, WorkerTrack};
use crate::perf::effective_bandwidth;

const NVL: usize = 0;
const HBM: usize = 1;

#[derive(Debug, Clone, Copy)]
enum Ev {
    Claim { rank: u32, slot: u32 },
    Computed { rank: u32, slot: u32 },
    Link { rank: u32, ch: u8, version: u64 },
    Reduced { rank: u32, slot: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Idle,
    Comm { task: u32, row: usize, end: usize, since: f64, busy: f64, sent_at: f64 },
    Compute { tile: u32, start: f64 },
    Reduce { task: u32, token: usize, end: usize, since: f64, busy: f64 },
    Finished,
}

/// Expert-holding side of one rank plus its source-side reduction state.
struct Rank {
    tiles: Vec<Tile>,
    comm: Vec<std::ops::Range<usize>>,
    reduce: Vec<std::ops::Range<usize>>,
    cursor: usize,
    /// Which (source rank, token, slot) owns each receive row.
    row_source: Vec<(u32, u32, u32)>,
    row_block: Vec<u32>,
    block_base: Vec<usize>,
    block_cols: Vec<u32>,
    block_ready: Vec<f64>,
    block_waiters: Vec<Vec<u32>>,
    links: [Channel; 2],
    link_owner: [HashMap<u32, usize>; 2],
    tiles_done: usize,
    rows_sent: usize,
    // source side
    token_count: Vec<u32>,
    token_ready: Vec<f64>,
    token_waiter: Vec<Option<u32>>,
    tokens_reduced: usize,
    record: RankRecord,
}

struct Sim {
    n_sm: u32,
    topk: usize,
    column_blocks: u32,
    ranks: Vec<Rank>,
    workers: Vec<State>,
    tracks: Vec<WorkerTrack>,
    q: EventQueue<Ev>,
    t_down: f64,
    reduce_time: f64,
    s_tok: f64,
    bytes: [f64; 2],
}

pub fn run_gemm_combine_sim(p: &SimParams) -> Result<SimTimeline, SimError> {
    let (_, t_down) = tile_times(p)?;
    let shape = &p.shape;
    let cfg = p.cfg;
    let n_sm = p.spec.n_sm;
    let world = p.world();
    let topk = shape.topk as usize;
    let column_blocks = shape.h_dim.div_ceil(u64::from(shape.b_n)) as u32;
    let s_tok = p.bytes_per_token();
    let red_share = effective_bandwidth(cfg.n_red, cfg.w, p.spec.bw_hbm, p.spec.w_sat) / f64::from(cfg.n_red.max(1));

    let mut sources: Vec<Vec<(u32, u32, u32)>> = (0..world).map(|d| vec![(0, 0, 0); p.maps[d].layout.total(d)]).collect();
    for (s, map) in p.maps.iter().enumerate() {
        for t in 0..map.n_tok {
            for j in 0..map.topk {
                let d = map.get(t, j);
                sources[d.rank as usize][map.layout.buffer_index(d)] = (s as u32, t as u32, j as u32);
            }
        }
    }

    let mut ranks = Vec::with_capacity(world);
    for (rank, row_source) in sources.into_iter().enumerate() {
        let (block_rows, block_base) = row_blocks(&p.maps[rank], rank, shape.b_m);
        if !block_rows.is_empty() && column_blocks == 0 {
            return Err(SimError::Shape(format!("rank {rank} holds tokens but the down GEMM has no column blocks")));
        }
        let mut row_block = Vec::with_capacity(row_source.len());
        for (b, &rows) in block_rows.iter().enumerate() {
            row_block.extend(std::iter::repeat(b as u32).take(rows as usize));
        }
        let tiles = tiles_for(&block_rows, &block_base, column_blocks);
        let n_tok = p.maps[rank].n_tok;
        let n_tiles = tiles.len();
        ranks.push(Rank {
            comm: even_split(row_source.len(), cfg.n_comb as usize),
            reduce: even_split(n_tok, cfg.n_red as usize),
            tiles,
            cursor: 0,
            row_block,
            block_cols: vec![0; block_rows.len()],
            block_ready: vec![f64::INFINITY; block_rows.len()],
            block_waiters: vec![Vec::new(); block_rows.len()],
            block_base,
            links: [Channel::new(p.spec.bw_nvl, cfg.w, p.spec.w_sat), Channel::new(p.spec.bw_hbm, cfg.w, p.spec.w_sat)],
            link_owner: [HashMap::new(), HashMap::new()],
            tiles_done: 0,
            rows_sent: 0,
            token_count: vec![0; n_tok],
            token_ready: vec![if topk == 0 { 0.0 } else { f64::INFINITY }; n_tok],
            token_waiter: vec![None; n_tok],
            tokens_reduced: 0,
            record: RankRecord {
                tile_start: vec![f64::INFINITY; n_tiles],
                tile_end: vec![f64::INFINITY; n_tiles],
                replica_arrival: vec![f64::INFINITY; n_tok * topk],
                reduce_start: vec![f64::INFINITY; n_tok],
                ..Default::default()
            },
            row_source,
        });
    }

    let mut sim = Sim {
        n_sm,
        topk,
        column_blocks,
        ranks,
        workers: vec![State::Idle; world * n_sm as usize],
        tracks: (0..world as u32)
            .flat_map(|r| (0..n_sm).map(move |s| WorkerTrack { rank: r, slot: s, intervals: Vec::new() }))
            .collect(),
        q: EventQueue::new(),
        t_down,
        reduce_time: topk as f64 * s_tok / red_share,
        s_tok,
        bytes: [0.0; 2],
    };
    for r in 0..world as u32 {
        for s in 0..n_sm {
            sim.q.push(0.0, sim.gid(r, s), 0, Ev::Claim { rank: r, slot: s });
        }
    }
    while let Some(ev) = sim.q.pop() {
        let now = sim.q.now;
        match ev {
            Ev::Claim { rank, slot } => sim.claim(rank, slot, now),
            Ev::Computed { rank, slot } => sim.computed(rank, slot, now),
            Ev::Link { rank, ch, version } => sim.link_done(rank, ch as usize, version, now),
            Ev::Reduced { rank, slot } => sim.reduced(rank, slot, now),
        }
    }
    sim.finish()
}

impl Sim {
    fn gid(&self, rank: u32, slot: u32) -> u32 {
        rank * self.n_sm + slot
    }

    fn claim(&mut self, rank: u32, slot: u32, now: f64) {
        let g = self.gid(rank, slot) as usize;
        let r = &mut self.ranks[rank as usize];
        let id = r.cursor;
        let (n_comm, n_tiles) = (r.comm.len(), r.tiles.len());
        if id >= n_comm + n_tiles + r.reduce.len() {
            self.workers[g] = State::Finished;
            return;
        }
        r.cursor += 1;
        if id < n_comm {
            let range = r.comm[id].clone();
            self.workers[g] = State::Comm { task: id as u32, row: range.start, end: range.end, since: now, busy: 0.0, sent_at: now };
            self.comm_next(rank, slot, now);
        } else if id < n_comm + n_tiles {
            let tile = (id - n_comm) as u32;
            r.record.tile_start[tile as usize] = now;
            self.workers[g] = State::Compute { tile, start: now };
            self.q.push(now + self.t_down, g as u32, 1, Ev::Computed { rank, slot });
        } else {
            let task = id - n_comm - n_tiles;
            let range = r.reduce[task].clone();
            self.workers[g] = State::Reduce { task: task as u32, token: range.start, end: range.end, since: now, busy: 0.0 };
            self.reduce_next(rank, slot, now);
        }
    }

    fn computed(&mut self, rank: u32, slot: u32, now: f64) {
        let g = self.gid(rank, slot) as usize;
        let State::Compute { tile, start } = self.workers[g] else { unreachable!() };
        let r = &mut self.ranks[rank as usize];
        r.record.tile_end[tile as usize] = now;
        r.tiles_done += 1;
        let t = r.tiles[tile as usize];
        let b = r.block_base[t.local_expert as usize] + t.block as usize;
        r.block_cols[b] += 1;
        let mut woken = Vec::new();
        if r.block_cols[b] == self.column_blocks {
            r.block_ready[b] = now;
            woken = std::mem::take(&mut r.block_waiters[b]);
        }
        let task = (r.comm.len() + tile as usize) as u32;
        self.tracks[g].intervals.push(Interval { start, end: now, role: Role::Compute, task, busy: now - start, stall: None });
        self.workers[g] = State::Idle;
        for s in woken {
            self.comm_next(rank, s, now);
        }
        self.claim(rank, slot, now);
    }

    fn comm_next(&mut self, rank: u32, slot: u32, now: f64) {
        let g = self.gid(rank, slot) as usize;
        let State::Comm { task, row, end, since, busy, .. } = self.workers[g] else { unreachable!() };
        if row == end {
            self.tracks[g].intervals.push(Interval { start: since, end: now, role: Role::Comm, task, busy, stall: None });
            self.workers[g] = State::Idle;
            self.q.push(now, g as u32, 0, Ev::Claim { rank, slot });
            return;
        }
        let r = &mut self.ranks[rank as usize];
        let b = r.row_block[row] as usize;
        if r.block_ready[b] > now {
            r.block_waiters[b].push(slot);
            return;
        }
        let ch = if r.row_source[row].0 == rank { HBM } else { NVL };
        r.links[ch].start(now, slot, self.s_tok);
        r.link_owner[ch].insert(slot, row);
        self.bytes[ch] += self.s_tok;
        self.workers[g] = State::Comm { task, row, end, since, busy, sent_at: now };
        self.schedule_link(rank, ch);
    }

    fn schedule_link(&mut self, rank: u32, ch: usize) {
        let link = &self.ranks[rank as usize].links[ch];
        if let Some(t) = link.next_completion() {
            let actor = self.ranks.len() as u32 * self.n_sm + 2 * rank + ch as u32;
            let version = link.version;
            self.q.push(t, actor, 2, Ev::Link { rank, ch: ch as u8, version });
        }
    }

    fn link_done(&mut self, rank: u32, ch: usize, version: u64, now: f64) {
        if self.ranks[rank as usize].links[ch].version != version {
            return;
        }
        let done = self.ranks[rank as usize].links[ch].complete(now);
        for slot in done {
            let row = self.ranks[rank as usize].link_owner[ch].remove(&slot).expect("flow without owner");
            self.ranks[rank as usize].rows_sent += 1;
            let (s, t, j) = self.ranks[rank as usize].row_source[row];
            self.replica_arrived(s, t as usize, j as usize, now);
            let g = self.gid(rank, slot) as usize;
            if let State::Comm { task, row, end, since, busy, sent_at } = self.workers[g] {
                self.workers[g] = State::Comm { task, row: row + 1, end, since, busy: busy + (now - sent_at), sent_at };
            }
            self.comm_next(rank, slot, now);
        }
        self.schedule_link(rank, ch);
    }

    fn replica_arrived(&mut self, src: u32, t: usize, j: usize, now: f64) {
        let topk = self.topk;
        let r = &mut self.ranks[src as usize];
        r.record.replica_arrival[t * topk + j] = now;
        r.token_count[t] += 1;
        if r.token_count[t] as usize == topk {
            r.token_ready[t] = now;
            if let Some(slot) = r.token_waiter[t].take() {
                self.reduce_next(src, slot, now);
            }
        }
    }

    fn reduce_next(&mut self, rank: u32, slot: u32, now: f64) {
        let g = self.gid(rank, slot) as usize;
        let State::Reduce { task, token, end, since, busy } = self.workers[g] else { unreachable!() };
        if token == end {
            self.tracks[g].intervals.push(Interval { start: since, end: now, role: Role::Reduce, task, busy, stall: None });
            self.workers[g] = State::Idle;
            self.q.push(now, g as u32, 0, Ev::Claim { rank, slot });
            return;
        }
        let r = &mut self.ranks[rank as usize];
        if r.token_ready[token] > now {
            r.token_waiter[token] = Some(slot);
            return;
        }
        r.record.reduce_start[token] = now;
        self.bytes[HBM] += self.topk as f64 * self.s_tok;
        self.workers[g] = State::Reduce { task, token, end, since, busy: busy + self.reduce_time };
        self.q.push(now + self.reduce_time, g as u32, 3, Ev::Reduced { rank, slot });
    }

    fn reduced(&mut self, rank: u32, slot: u32, now: f64) {
        let g = self.gid(rank, slot) as usize;
        let State::Reduce { task, token, end, since, busy } = self.workers[g] else { unreachable!() };
        self.ranks[rank as usize].tokens_reduced += 1;
        self.workers[g] = State::Reduce { task, token: token + 1, end, since, busy };
        self.reduce_next(rank, slot, now);
    }

    fn finish(self) -> Result<SimTimeline, SimError> {
        let pending: usize = self
            .ranks
            .iter()
            .map(|r| (r.tiles.len() - r.tiles_done) + (r.row_source.len() - r.rows_sent) + (r.token_count.len() - r.tokens_reduced))
            .sum();
        if pending > 0 {
            return Err(SimError::DeadlockDetected { phase: Phase::Combine, time: self.q.now, pending });
        }
        let l_comm = self.ranks.iter().flat_map(|r| r.record.replica_arrival.iter().copied()).fold(0.0, f64::max);
        let l_compute = self.ranks.iter().flat_map(|r| r.record.tile_end.iter().copied()).fold(0.0, f64::max);
        let events = self.q.processed;
        let timeline = SimTimeline {
            phase: Phase::Combine,
            n_sm: self.n_sm,
            world: self.ranks.len() as u32,
            workers: self.tracks,
            ranks: self.ranks.into_iter().map(|r| r.record).collect(),
            metrics: SimMetrics { l_comm, l_compute, bytes_nvl: self.bytes[NVL], bytes_hbm: self.bytes[HBM], ..Default::default() },
        };
        Ok(timeline.finish(events))
    }
}
