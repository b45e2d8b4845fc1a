//! Discrete-event simulation of the fused Dispatch+GroupGEMM and
//! GroupGEMM+Combine kernels.
//!
//! Every rank runs `n_sm` persistent workers that pull task ids from a
//! per-rank cursor. Relay workers sit on fixed slots next to the dispatch
//! workers, which is what makes an oversized `n_disp + n_relay` starve the
//! scoreboard.

mod combine;
mod dispatch;
pub(crate) mod engine;
mod trace;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{sample_routing, HardwareSpec, ModelError, MoEShape, RoutingInstance, TuneConfig};
use crate::perf::{calc_gemm_block_time, calc_swiglu, PerfError};
use crate::token_map::{build_global_token_map, build_naive_schedule, build_send_schedule, GlobalTokenMap, MapError, SendSchedule};

pub use combine::run_gemm_combine_sim;
pub use dispatch::run_dispatch_gemm_sim;
pub use engine::even_split;
pub use trace::{emit_trace, metrics_csv, trace_json};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("deadlock in {phase} at t={time:.9}s: {pending} tasks unfinished")]
    DeadlockDetected { phase: Phase, time: f64, pending: usize },
    #[error("shape inconsistency: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Dispatch,
    Combine,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Dispatch => "dispatch",
            Phase::Combine => "combine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Comm,
    Relay,
    Compute,
    Reduce,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Comm => "comm",
            Role::Relay => "relay",
            Role::Compute => "compute",
            Role::Reduce => "reduce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StallReason {
    /// Compute worker waiting for its tile flag.
    TileFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub role: Role,
    pub task: u32,
    /// Time inside the interval spent moving bytes or doing math.
    pub busy: f64,
    pub stall: Option<StallReason>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerTrack {
    pub rank: u32,
    pub slot: u32,
    pub intervals: Vec<Interval>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleSeconds {
    pub comm: f64,
    pub relay: f64,
    pub compute: f64,
    pub reduce: f64,
}

impl RoleSeconds {
    fn add(&mut self, role: Role, v: f64) {
        match role {
            Role::Comm => self.comm += v,
            Role::Relay => self.relay += v,
            Role::Compute => self.compute += v,
            Role::Reduce => self.reduce += v,
        }
    }
}

/// Aggregates over all ranks. In a dispatch timeline `l_comm` is the last
/// token arrival and `l_compute` the last up-GEMM tile; in a combine timeline
/// they are the last replica landing at its source and the last down-GEMM
/// tile.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub l_comm: f64,
    pub l_compute: f64,
    pub makespan: f64,
    pub compute_stall: f64,
    /// SM-seconds each role held a worker.
    pub held: RoleSeconds,
    /// SM-seconds each role did useful work.
    pub busy: RoleSeconds,
    pub bytes_nvl: f64,
    pub bytes_hbm: f64,
    pub events: u64,
}

/// Per-rank scoreboard and data-movement record. Times never reached stay
/// `f64::INFINITY`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankRecord {
    /// Dispatch: time each receive-buffer row was written.
    pub row_arrival: Vec<f64>,
    /// Dispatch: (source rank, token, slot) that landed in each row.
    pub row_source: Vec<(u32, u32, u32)>,
    pub tile_flag: Vec<f64>,
    pub tile_start: Vec<f64>,
    pub tile_end: Vec<f64>,
    /// Combine, source side: arrival of replica `t * topk + j`.
    pub replica_arrival: Vec<f64>,
    /// Combine, source side: when each token's reduction started.
    pub reduce_start: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTimeline {
    pub phase: Phase,
    pub n_sm: u32,
    pub world: u32,
    /// `rank * n_sm + slot`.
    pub workers: Vec<WorkerTrack>,
    pub ranks: Vec<RankRecord>,
    pub metrics: SimMetrics,
}

impl SimTimeline {
    pub fn empty(phase: Phase) -> Self {
        SimTimeline { phase, n_sm: 0, world: 0, workers: Vec::new(), ranks: Vec::new(), metrics: SimMetrics::default() }
    }

    pub fn worker(&self, rank: u32, slot: u32) -> &WorkerTrack {
        &self.workers[(rank * self.n_sm + slot) as usize]
    }

    pub(crate) fn finish(mut self, events: u64) -> Self {
        let mut m = self.metrics;
        m.events = events;
        for w in &self.workers {
            for iv in &w.intervals {
                m.makespan = m.makespan.max(iv.end);
                m.held.add(iv.role, iv.end - iv.start);
                m.busy.add(iv.role, iv.busy);
                if iv.stall == Some(StallReason::TileFlag) {
                    m.compute_stall += iv.end - iv.start;
                }
            }
        }
        self.metrics = m;
        self
    }
}

/// Order of each rank's send schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleOrder {
    /// Sorted by destination (local expert, offset, rank).
    #[default]
    Priority,
    /// Source token order.
    Naive,
}

#[derive(Debug, Clone)]
pub struct SimParams {
    pub spec: HardwareSpec,
    pub shape: MoEShape,
    pub cfg: TuneConfig,
    pub routing: RoutingInstance,
    pub maps: Vec<GlobalTokenMap>,
    pub schedules: Vec<SendSchedule>,
    pub order: ScheduleOrder,
}

impl SimParams {
    /// Checks structure only; configurations that break the deadlock rule
    /// are accepted so the simulator can show what happens.
    pub fn new(spec: &HardwareSpec, shape: &MoEShape, cfg: TuneConfig, routing: RoutingInstance, order: ScheduleOrder) -> Result<Self, SimError> {
        cfg.validate_structure(spec.n_sm)?;
        routing.validate()?;
        if routing.world() != spec.world_size as usize || routing.topk != shape.topk || routing.n_exp != shape.n_exp {
            return Err(SimError::Shape(format!(
                "routing has world {}, n_exp {}, topk {}; expected {}, {}, {}",
                routing.world(),
                routing.n_exp,
                routing.topk,
                spec.world_size,
                shape.n_exp,
                shape.topk
            )));
        }
        let maps = build_global_token_map(&routing)?;
        let schedules = maps
            .iter()
            .map(|m| match order {
                ScheduleOrder::Priority => build_send_schedule(m),
                ScheduleOrder::Naive => build_naive_schedule(m),
            })
            .collect();
        Ok(SimParams { spec: spec.clone(), shape: shape.clone(), cfg, routing, maps, schedules, order })
    }

    pub fn sampled(spec: &HardwareSpec, shape: &MoEShape, cfg: TuneConfig, seed: u64, order: ScheduleOrder) -> Result<Self, SimError> {
        let routing = sample_routing(shape, spec.world_size, seed)?;
        Self::new(spec, shape, cfg, routing, order)
    }

    pub fn with_order(&self, order: ScheduleOrder) -> Self {
        let schedules = self
            .maps
            .iter()
            .map(|m| match order {
                ScheduleOrder::Priority => build_send_schedule(m),
                ScheduleOrder::Naive => build_naive_schedule(m),
            })
            .collect();
        SimParams { schedules, order, ..self.clone() }
    }

    pub(crate) fn world(&self) -> usize {
        self.maps.len()
    }

    pub(crate) fn bytes_per_token(&self) -> f64 {
        self.shape.token_bytes() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub local_expert: u32,
    /// Row block inside the expert.
    pub block: u32,
    /// Column block.
    pub column: u32,
    pub rows: u32,
}

/// One rank's linearized dispatch kernel: `[0, n_comm)` are communication
/// tasks, `[n_comm, n_comm + tiles)` compute tiles. Relay tasks are not
/// dispensed by the cursor; relay `j` runs on slot `n_disp + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskQueue {
    pub rank: usize,
    /// Send-schedule item range of each communication task.
    pub comm: Vec<Range<usize>>,
    /// Global row-block range each relay watches.
    pub relay: Vec<Range<usize>>,
    pub tiles: Vec<Tile>,
    /// Rows in each row block, in (local expert, block) order.
    pub block_rows: Vec<u32>,
    /// First row block of each local expert.
    pub block_base: Vec<usize>,
    pub column_blocks: u32,
}

impl TaskQueue {
    pub fn n_comm(&self) -> usize {
        self.comm.len()
    }

    pub fn len(&self) -> usize {
        self.comm.len() + self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_of(&self, local_expert: usize, offset: usize, b_m: u32) -> usize {
        self.block_base[local_expert] + offset / b_m as usize
    }
}

/// Row-block geometry of one receive buffer and its tiles for an output
/// width of `n_out`.
pub(crate) fn row_blocks(map: &GlobalTokenMap, rank: usize, b_m: u32) -> (Vec<u32>, Vec<usize>) {
    let layout = &map.layout;
    let mut rows = Vec::new();
    let mut base = Vec::with_capacity(layout.experts_per_rank);
    for e in 0..layout.experts_per_rank {
        base.push(rows.len());
        let count = layout.count(rank, e);
        let mut left = count;
        while left > 0 {
            let r = left.min(b_m as usize);
            rows.push(r as u32);
            left -= r;
        }
    }
    (rows, base)
}

pub(crate) fn tiles_for(block_rows: &[u32], block_base: &[usize], column_blocks: u32) -> Vec<Tile> {
    let mut tiles = Vec::with_capacity(block_rows.len() * column_blocks as usize);
    for (e, &start) in block_base.iter().enumerate() {
        let end = block_base.get(e + 1).copied().unwrap_or(block_rows.len());
        for (b, &rows) in block_rows[start..end].iter().enumerate() {
            for c in 0..column_blocks {
                tiles.push(Tile { local_expert: e as u32, block: b as u32, column: c, rows });
            }
        }
    }
    tiles
}

pub(crate) fn queues_from(p: &SimParams) -> Result<Vec<TaskQueue>, SimError> {
    let shape = &p.shape;
    let column_blocks = (2 * shape.h_inter).div_ceil(u64::from(shape.b_n)) as u32;
    (0..p.world())
        .map(|rank| {
            let (block_rows, block_base) = row_blocks(&p.maps[rank], rank, shape.b_m);
            if !block_rows.is_empty() && column_blocks == 0 {
                return Err(SimError::Shape(format!("rank {rank} receives tokens but the up GEMM has no column blocks")));
            }
            let tiles = tiles_for(&block_rows, &block_base, column_blocks);
            Ok(TaskQueue {
                rank,
                comm: even_split(p.schedules[rank].items.len(), p.cfg.n_disp as usize),
                relay: even_split(block_rows.len(), p.cfg.n_relay as usize),
                tiles,
                block_rows,
                block_base,
                column_blocks,
            })
        })
        .collect()
}

/// Dispatch task queues of every rank, priority-ordered schedules.
pub fn build_task_list(shape: &MoEShape, cfg: &TuneConfig, routing: &RoutingInstance) -> Result<Vec<TaskQueue>, SimError> {
    let world = routing.world() as u32;
    let spec = HardwareSpec {
        name: String::new(),
        n_sm: u32::MAX,
        p_peak: 1.0,
        bw_hbm: 1.0,
        bw_nvl: 1.0,
        w_sat: 1.0,
        tau_sync: 0.0,
        world_size: world,
    };
    let p = SimParams::new(&spec, shape, *cfg, routing.clone(), ScheduleOrder::Priority)?;
    queues_from(&p)
}

/// Both kernels plus the model's SwiGLU time in between.
#[derive(Debug, Clone)]
pub struct LayerSim {
    pub dispatch: SimTimeline,
    pub combine: SimTimeline,
    pub l_swiglu: f64,
    pub makespan: f64,
}

pub fn run_layer_sim(p: &SimParams) -> Result<LayerSim, SimError> {
    let dispatch = run_dispatch_gemm_sim(p)?;
    let combine = run_gemm_combine_sim(p)?;
    let expanded = p.maps.iter().map(|m| m.layout.total(m.rank)).max().unwrap_or(0) as u64;
    let l_swiglu = calc_swiglu::<f64>(&p.shape, &p.spec, expanded);
    let makespan = dispatch.metrics.makespan + l_swiglu + combine.metrics.makespan;
    Ok(LayerSim { dispatch, combine, l_swiglu, makespan })
}

/// Same instance under the priority schedule and the source-token order.
pub fn priority_ablation(p: &SimParams) -> Result<(SimTimeline, SimTimeline), SimError> {
    let prioritized = run_dispatch_gemm_sim(&p.with_order(ScheduleOrder::Priority))?;
    let naive = run_dispatch_gemm_sim(&p.with_order(ScheduleOrder::Naive))?;
    Ok((prioritized, naive))
}

pub(crate) fn tile_times(p: &SimParams) -> Result<(f64, f64), SimError> {
    let s = &p.shape;
    Ok((
        calc_gemm_block_time(&p.spec, s, s.h_dim, p.cfg.w)?,
        calc_gemm_block_time(&p.spec, s, s.h_inter, p.cfg.w)?,
    ))
}
