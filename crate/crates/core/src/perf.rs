//! Analytical latency model of the two fused kernels.
//!
//! Every function is generic over [`Scalar`] so the model can be evaluated in
//! `f32` or `f64`. The search loop builds a [`ModelContext`] once per
//! (hardware, shape, traffic) triple; everything that does not depend on the
//! worker configuration is computed there, leaving a handful of flops per
//! candidate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{derive_expanded_tokens, HardwareSpec, MoEShape, TuneConfig, WARP_CHOICES};
use crate::scalar::Scalar;
use crate::traffic::TrafficReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("no MFU entry for w={0}")]
    UnknownWarps(u32),
    #[error("{what}: zero effective bandwidth for {bytes} bytes")]
    NoBandwidth { what: &'static str, bytes: f64 },
    #[error("{stage}: no SMs left for computation")]
    NoComputeSms { stage: &'static str },
}

/// How the stage-1 compute tail is rescaled once communication ends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Scaling {
    /// Tail multiplied by `n_sm / n_comp1`.
    #[default]
    AsPrinted,
    /// Tail multiplied by `n_comp1 / n_sm`: compute SMs are joined by the
    /// freed communication SMs.
    Redistributed,
}

/// Which byte split of the dispatch traffic feeds the bandwidth terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accounting {
    /// Source rank counted among NVLink destinations.
    #[default]
    AllRanks,
    /// Copies for the source rank go through HBM only.
    RemoteOnly,
}

/// What `t_red` measures in the reduce-work term `w_red = n_red * t_red`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReduceCost {
    /// One SM reading every replica of every token.
    #[default]
    FullVolume,
    /// One SM reading its `1 / n_red` share of the replicas.
    PerWorker,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub stage1: Stage1Scaling,
    pub accounting: Accounting,
    pub reduce: ReduceCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown<T> {
    pub t_up: T,
    pub t_down: T,
    pub l_swiglu: T,
    pub l_disp: T,
    pub l_up: T,
    pub l_comb: T,
    pub l_down: T,
    pub t_red: T,
    pub l_s1: T,
    pub l_s2: T,
    pub l_total: T,
    pub n_tiles_up: u64,
    pub n_tiles_down: u64,
    pub w_gap: T,
    pub w_red: T,
    pub w_rem: T,
}

/// `min(n * w * beta / w_sat, beta)`.
pub fn effective_bandwidth<T: Scalar>(n_active: u32, w: u32, beta: T, w_sat: T) -> T {
    let scaled = T::of_count(u64::from(n_active)) * T::of_count(u64::from(w)) * beta / w_sat;
    scaled.min(beta)
}

/// One `B_M x B_N` tile over a reduction depth of `k_dim`, on one SM.
pub fn calc_gemm_block_time<T: Scalar>(spec: &HardwareSpec, shape: &MoEShape, k_dim: u64, w: u32) -> Result<T, PerfError> {
    let mu = shape.mu_table.get(w).ok_or(PerfError::UnknownWarps(w))?;
    let flops = T::of(2.0) * T::of_count(u64::from(shape.b_m)) * T::of_count(u64::from(shape.b_n)) * T::of_count(k_dim);
    let per_sm = T::of(spec.p_peak) * (T::of(mu) / T::of_count(u64::from(spec.n_sm)));
    Ok(flops / per_sm + T::of(spec.tau_sync))
}

/// Bytes of one SwiGLU row: fused gate/up input at bf16, with read and write
/// folded into the factor 2 of [`swiglu_latency`].
pub fn swiglu_row_bytes(shape: &MoEShape) -> u64 {
    2 * shape.h_inter * 2
}

/// `2 * tokens * row_bytes / bw_hbm`.
pub fn swiglu_latency<T: Scalar>(expanded_tokens: u64, row_bytes: u64, bw_hbm: f64) -> T {
    T::of(2.0) * T::of_count(expanded_tokens) * T::of_count(row_bytes) / T::of(bw_hbm)
}

pub fn calc_swiglu<T: Scalar>(shape: &MoEShape, spec: &HardwareSpec, expanded_tokens: u64) -> T {
    swiglu_latency(expanded_tokens, swiglu_row_bytes(shape), spec.bw_hbm)
}

fn transfer_time<T: Scalar>(what: &'static str, bytes: f64, bw: T) -> Result<T, PerfError> {
    if bytes == 0.0 {
        return Ok(T::zero());
    }
    if bw <= T::zero() {
        return Err(PerfError::NoBandwidth { what, bytes });
    }
    Ok(T::of(bytes) / bw)
}

fn split(traffic: &TrafficReport, accounting: Accounting) -> (f64, f64) {
    match accounting {
        Accounting::AllRanks => (traffic.v_megakernel_nvl, traffic.v_megakernel_hbm),
        Accounting::RemoteOnly => (traffic.v_remote_nvl, traffic.v_remote_hbm),
    }
}

/// NVLink sends on the dispatch workers plus relay HBM copies.
pub fn calc_disp_lat<T: Scalar>(
    traffic: &TrafficReport,
    spec: &HardwareSpec,
    cfg: &TuneConfig,
    accounting: Accounting,
) -> Result<T, PerfError> {
    let (v_nvl, v_hbm) = split(traffic, accounting);
    let w_sat = T::of(spec.w_sat);
    let nvl = transfer_time("dispatch nvlink", v_nvl, effective_bandwidth(cfg.n_disp, cfg.w, T::of(spec.bw_nvl), w_sat))?;
    let hbm = transfer_time("relay hbm", v_hbm, effective_bandwidth(cfg.n_relay, cfg.w, T::of(spec.bw_hbm), w_sat))?;
    Ok(nvl + hbm)
}

/// Wave-quantized compute time: `ceil(n_tiles / n_comp) * t_block`.
pub fn calc_comp_lat<T: Scalar>(n_tiles: u64, t_block: T, n_comp_sms: u32) -> Result<T, PerfError> {
    if n_comp_sms == 0 {
        return Err(PerfError::NoComputeSms { stage: "compute" });
    }
    Ok(T::of_count(n_tiles.div_ceil(u64::from(n_comp_sms))) * t_block)
}

/// Returns `(l_comb, t_red)`; `t_red` is the time a single SM needs to read
/// every top-k replica, `v_hbm_total` bytes.
pub fn calc_comb_lat<T: Scalar>(
    traffic: &TrafficReport,
    spec: &HardwareSpec,
    cfg: &TuneConfig,
    v_hbm_total: f64,
    accounting: Accounting,
) -> Result<(T, T), PerfError> {
    let (v_nvl, _) = split(traffic, accounting);
    let w_sat = T::of(spec.w_sat);
    let l_comb = transfer_time("combine nvlink", v_nvl, effective_bandwidth(cfg.n_comb, cfg.w, T::of(spec.bw_nvl), w_sat))?;
    let t_red = transfer_time("reduce hbm", v_hbm_total, effective_bandwidth(1, cfg.w, T::of(spec.bw_hbm), w_sat))?;
    Ok((l_comb, t_red))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileCounts {
    pub up: u64,
    pub down: u64,
}

/// Tiles of the up (fused gate+up, width `2 * h_inter`) and down (width
/// `h_dim`) grouped GEMMs with the expanded tokens spread evenly over the
/// local experts.
pub fn tile_counts(shape: &MoEShape, world: u32) -> TileCounts {
    let epr = u64::from(shape.experts_per_rank(world).max(1));
    let m = derive_expanded_tokens(shape, world);
    let b_m = u64::from(shape.b_m);
    let b_n = u64::from(shape.b_n);
    let (base, extra) = (m / epr, m % epr);
    let row_tiles: u64 = (0..epr).map(|e| (base + u64::from(e < extra)).div_ceil(b_m)).sum();
    TileCounts {
        up: row_tiles * (2 * shape.h_inter).div_ceil(b_n),
        down: row_tiles * shape.h_dim.div_ceil(b_n),
    }
}

/// Stage-1 overlap: dispatch followed by the up-GEMM tail.
pub fn overlap_stage1<T: Scalar>(l_disp: T, l_up: T, t_up: T, n_sm: u32, n_comp1: u32, scaling: Stage1Scaling) -> T {
    if l_up > l_disp {
        let (n_sm, n_comp1) = (T::of_count(u64::from(n_sm)), T::of_count(u64::from(n_comp1)));
        let factor = match scaling {
            Stage1Scaling::AsPrinted => n_sm / n_comp1,
            Stage1Scaling::Redistributed => n_comp1 / n_sm,
        };
        l_disp + (l_up - l_disp) * factor
    } else {
        l_disp + t_up
    }
}

/// Stage-2 overlap: returns `(l_s2, w_gap, w_red, w_rem)`.
pub fn overlap_stage2<T: Scalar>(l_down: T, l_comb: T, t_red: T, n_red: u32, n_comp2: u32, n_sm: u32) -> (T, T, T, T) {
    let l_base = l_down.max(l_comb);
    let w_gap = (l_down - l_comb).abs() * T::of_count(u64::from(n_comp2));
    let w_red = T::of_count(u64::from(n_red)) * t_red;
    let w_rem = (w_red - w_gap).max(T::zero());
    (l_base + w_rem / T::of_count(u64::from(n_sm)), w_gap, w_red, w_rem)
}

#[derive(Debug, Clone, Copy)]
struct WarpTerms<T> {
    w: u32,
    t_up: T,
    t_down: T,
}

/// Configuration-independent part of the model for one problem.
#[derive(Debug, Clone)]
pub struct ModelContext<T> {
    n_sm: u32,
    spec: HardwareSpec,
    traffic: TrafficReport,
    tiles: TileCounts,
    l_swiglu: T,
    v_hbm_total: f64,
    warps: Vec<WarpTerms<T>>,
    opts: ModelOptions,
}

impl<T: Scalar> ModelContext<T> {
    pub fn new(shape: &MoEShape, spec: &HardwareSpec, traffic: &TrafficReport, opts: ModelOptions) -> Self {
        let world = spec.world_size;
        let expanded = derive_expanded_tokens(shape, world);
        let warps = WARP_CHOICES
            .iter()
            .filter_map(|&w| {
                Some(WarpTerms {
                    w,
                    t_up: calc_gemm_block_time(spec, shape, shape.h_dim, w).ok()?,
                    t_down: calc_gemm_block_time(spec, shape, shape.h_inter, w).ok()?,
                })
            })
            .collect();
        ModelContext {
            n_sm: spec.n_sm,
            spec: spec.clone(),
            traffic: *traffic,
            tiles: tile_counts(shape, world),
            l_swiglu: calc_swiglu(shape, spec, expanded),
            v_hbm_total: expanded as f64 * shape.token_bytes() as f64,
            warps,
            opts,
        }
    }

    pub fn tiles(&self) -> TileCounts {
        self.tiles
    }

    pub fn evaluate(&self, cfg: &TuneConfig) -> Result<LatencyBreakdown<T>, PerfError> {
        let terms = self
            .warps
            .iter()
            .find(|t| t.w == cfg.w)
            .ok_or(PerfError::UnknownWarps(cfg.w))?;
        let (t_up, t_down) = (terms.t_up, terms.t_down);

        let n_comp1 = self.n_sm.checked_sub(cfg.n_disp).filter(|&n| n > 0).ok_or(PerfError::NoComputeSms { stage: "stage 1" })?;
        let l_disp = calc_disp_lat::<T>(&self.traffic, &self.spec, cfg, self.opts.accounting)?;
        let l_up = calc_comp_lat(self.tiles.up, t_up, n_comp1)?;
        let l_s1 = overlap_stage1(l_disp, l_up, t_up, self.n_sm, n_comp1, self.opts.stage1);

        let n_comp2 = self.n_sm.checked_sub(cfg.n_comb).filter(|&n| n > 0).ok_or(PerfError::NoComputeSms { stage: "stage 2" })?;
        let (l_comb, t_red) = calc_comb_lat::<T>(&self.traffic, &self.spec, cfg, self.v_hbm_total, self.opts.accounting)?;
        let t_red = match self.opts.reduce {
            ReduceCost::FullVolume => t_red,
            ReduceCost::PerWorker => t_red / T::of_count(u64::from(cfg.n_red.max(1))),
        };
        let l_down = calc_comp_lat(self.tiles.down, t_down, n_comp2)?;
        let (l_s2, w_gap, w_red, w_rem) = overlap_stage2(l_down, l_comb, t_red, cfg.n_red, n_comp2, self.n_sm);

        Ok(LatencyBreakdown {
            t_up,
            t_down,
            l_swiglu: self.l_swiglu,
            l_disp,
            l_up,
            l_comb,
            l_down,
            t_red,
            l_s1,
            l_s2,
            l_total: l_s1 + l_s2 + self.l_swiglu,
            n_tiles_up: self.tiles.up,
            n_tiles_down: self.tiles.down,
            w_gap,
            w_red,
            w_rem,
        })
    }
}

pub fn predict_latency<T: Scalar>(
    shape: &MoEShape,
    spec: &HardwareSpec,
    cfg: &TuneConfig,
    traffic: &TrafficReport,
    opts: ModelOptions,
) -> Result<LatencyBreakdown<T>, PerfError> {
    ModelContext::new(shape, spec, traffic, opts).evaluate(cfg)
}

impl<T: Scalar> LatencyBreakdown<T> {
    pub fn to_f64(&self) -> LatencyBreakdown<f64> {
        let c = |v: T| v.to_f64_lossy();
        LatencyBreakdown {
            t_up: c(self.t_up),
            t_down: c(self.t_down),
            l_swiglu: c(self.l_swiglu),
            l_disp: c(self.l_disp),
            l_up: c(self.l_up),
            l_comb: c(self.l_comb),
            l_down: c(self.l_down),
            t_red: c(self.t_red),
            l_s1: c(self.l_s1),
            l_s2: c(self.l_s2),
            l_total: c(self.l_total),
            n_tiles_up: self.n_tiles_up,
            n_tiles_down: self.n_tiles_down,
            w_gap: c(self.w_gap),
            w_red: c(self.w_red),
            w_rem: c(self.w_rem),
        }
    }
}

impl LatencyBreakdown<f64> {
    /// `(label, value)` rows, seconds except tile counts.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("t_up", self.t_up),
            ("t_down", self.t_down),
            ("n_tiles_up", self.n_tiles_up as f64),
            ("n_tiles_down", self.n_tiles_down as f64),
            ("l_disp", self.l_disp),
            ("l_up", self.l_up),
            ("l_s1", self.l_s1),
            ("l_swiglu", self.l_swiglu),
            ("l_down", self.l_down),
            ("l_comb", self.l_comb),
            ("t_red", self.t_red),
            ("w_gap", self.w_gap),
            ("w_red", self.w_red),
            ("w_rem", self.w_rem),
            ("l_s2", self.l_s2),
            ("l_total", self.l_total),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MuTable;
    use crate::traffic::{volume_expected, VolumeBasis};

    fn cluster1() -> HardwareSpec {
        HardwareSpec {
            name: "cluster1".into(),
            n_sm: 132,
            p_peak: 989e12,
            bw_hbm: 3.35e12,
            bw_nvl: 200e9,
            w_sat: 1024.0,
            tau_sync: 2e-6,
            world_size: 8,
        }
    }

    fn shape() -> MoEShape {
        MoEShape {
            name: "moe1".into(),
            h_dim: 2048,
            h_inter: 1408,
            n_exp: 64,
            topk: 6,
            n_tok: 32768,
            s_tok: None,
            b_m: 128,
            b_n: 256,
            mu_table: MuTable::default(),
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn bandwidth_cases() {
        assert_eq!(effective_bandwidth(12, 32, 200e9, 1024.0), 75e9);
        assert_eq!(effective_bandwidth(32, 32, 200e9, 1024.0), 200e9);
        assert_eq!(effective_bandwidth(100, 32, 200e9, 1024.0), 200e9);
        assert_eq!(effective_bandwidth(0, 32, 200e9, 1024.0), 0.0);
    }

    #[test]
    fn gemm_tile_time() {
        let t: f64 = calc_gemm_block_time(&cluster1(), &shape(), 2048, 32).unwrap();
        let expect = 2.0 * 128.0 * 256.0 * 2048.0 / (989e12 * 0.6 / 132.0) + 2e-6;
        assert!(rel(t, expect) < 1e-14);
        assert!(rel(t, 31.86e-6) < 1e-3);
        let zero: f64 = calc_gemm_block_time(&cluster1(), &shape(), 0, 32).unwrap();
        assert_eq!(zero, 2e-6);
        let t8: f64 = calc_gemm_block_time(&cluster1(), &shape(), 2048, 8).unwrap();
        assert!(t8 < t);
        assert_eq!(calc_gemm_block_time::<f64>(&cluster1(), &shape(), 2048, 12), Err(PerfError::UnknownWarps(12)));
    }

    #[test]
    fn swiglu_cases() {
        let l: f64 = swiglu_latency(32768, 4096, 3.35e12);
        assert!(rel(l, 80.13e-6) < 1e-3);
        assert_eq!(swiglu_latency::<f64>(0, 4096, 3.35e12), 0.0);
        let half: f64 = swiglu_latency(32768, 4096, 6.7e12);
        assert!(rel(half * 2.0, l) < 1e-15);
        assert_eq!(swiglu_row_bytes(&MoEShape { h_inter: 1024, ..shape() }), 4096);
    }

    fn report(v_nvl: f64, v_hbm: f64) -> TrafficReport {
        TrafficReport {
            v_allgather: 0.0,
            v_alltoall: v_nvl + v_hbm,
            v_megakernel_nvl: v_nvl,
            v_megakernel_hbm: v_hbm,
            v_remote_nvl: v_nvl,
            v_remote_hbm: v_hbm,
            basis: VolumeBasis::Expected,
        }
    }

    #[test]
    fn dispatch_chain() {
        let mib = 1024.0 * 1024.0;
        let cfg = TuneConfig::new(12, 5, 20, 78, 32);
        let pure: f64 = calc_disp_lat(&report(84.0 * mib, 0.0), &cluster1(), &cfg, Accounting::AllRanks).unwrap();
        assert!(rel(pure, 84.0 * mib / 75e9) < 1e-12);
        assert!(rel(pure, 1.174e-3) < 1e-3);
        let with_hbm: f64 = calc_disp_lat(&report(84.0 * mib, 44.0 * mib), &cluster1(), &cfg, Accounting::AllRanks).unwrap();
        let relay_bw = 5.0 * 32.0 * 3.35e12 / 1024.0;
        assert!(rel(with_hbm - pure, 44.0 * mib / relay_bw) < 1e-9);
        let sat: f64 = calc_disp_lat(&report(84.0 * mib, 0.0), &cluster1(), &TuneConfig { n_disp: 64, ..cfg }, Accounting::AllRanks).unwrap();
        assert!(rel(sat, 84.0 * mib / 200e9) < 1e-12);
        let err = calc_disp_lat::<f64>(&report(1.0, 1.0), &cluster1(), &TuneConfig { n_relay: 0, ..cfg }, Accounting::AllRanks);
        assert!(matches!(err, Err(PerfError::NoBandwidth { .. })));
    }

    #[test]
    fn wave_quantization() {
        assert_eq!(calc_comp_lat(264, 1.0f64, 132).unwrap(), 2.0);
        assert_eq!(calc_comp_lat(133, 1.0f64, 132).unwrap(), 2.0);
        assert_eq!(calc_comp_lat(0, 1.0f64, 132).unwrap(), 0.0);
        assert!(calc_comp_lat(1, 1.0f64, 0).is_err());
    }

    #[test]
    fn combine_terms() {
        let cfg = TuneConfig::new(12, 5, 12, 78, 32);
        let r = report(1e8, 5e7);
        let (l_comb, t_red): (f64, f64) = calc_comb_lat(&r, &cluster1(), &cfg, 3e8, Accounting::AllRanks).unwrap();
        let disp_nvl: f64 = calc_disp_lat(&report(1e8, 0.0), &cluster1(), &cfg, Accounting::AllRanks).unwrap();
        assert_eq!(l_comb, disp_nvl);
        assert!(rel(t_red, 3e8 / (32.0 / 1024.0 * 3.35e12)) < 1e-12);
        let (z0, z1): (f64, f64) = calc_comb_lat(&report(0.0, 0.0), &cluster1(), &cfg, 0.0, Accounting::AllRanks).unwrap();
        assert_eq!((z0, z1), (0.0, 0.0));
    }

    #[test]
    fn stage1_comm_bound_branch() {
        assert_eq!(overlap_stage1(5.0f64, 3.0, 0.25, 132, 120, Stage1Scaling::AsPrinted), 5.25);
        assert_eq!(overlap_stage1(5.0f64, 5.0, 0.25, 132, 120, Stage1Scaling::AsPrinted), 5.25);
    }

    #[test]
    fn stage1_boundary_discontinuity() {
        // Just above the boundary the tail term vanishes; at and below it the
        // model adds one full tile, so the jump equals t_up.
        let (l_disp, t_up) = (4.0f64, 0.125);
        let at = overlap_stage1(l_disp, l_disp, t_up, 132, 100, Stage1Scaling::AsPrinted);
        let above = overlap_stage1(l_disp, l_disp + 1e-12, t_up, 132, 100, Stage1Scaling::AsPrinted);
        assert!(((at - above) - t_up).abs() < 1e-10);
        let tail = overlap_stage1(l_disp, l_disp + 1.0, t_up, 132, 100, Stage1Scaling::AsPrinted);
        assert!((tail - (l_disp + 1.32)).abs() < 1e-12);
        let redis = overlap_stage1(l_disp, l_disp + 1.0, t_up, 132, 99, Stage1Scaling::Redistributed);
        assert!((redis - (l_disp + 0.75)).abs() < 1e-12);
    }

    #[test]
    fn stage2_hidden_reduction() {
        let (l_s2, w_gap, w_red, w_rem) = overlap_stage2(10.0f64, 2.0, 0.01, 78, 60, 78);
        assert_eq!(w_gap, 480.0);
        assert!((w_red - 0.78).abs() < 1e-12);
        assert_eq!(w_rem, 0.0);
        assert_eq!(l_s2, 10.0);
        let (l_s2, _, _, w_rem) = overlap_stage2(2.0f64, 2.0, 1.0, 78, 60, 78);
        assert_eq!(w_rem, 78.0);
        assert_eq!(l_s2, 3.0);
    }

    #[test]
    fn tile_geometry() {
        let t = tile_counts(&shape(), 8);
        // 32768 * 6 copies over 8 experts: 24576 rows each, 192 row tiles
        assert_eq!(t.up, 8 * 192 * 11);
        assert_eq!(t.down, 8 * 192 * 8);
        let tiny = tile_counts(&MoEShape { n_tok: 1, topk: 1, n_exp: 8, ..shape() }, 8);
        assert_eq!(tiny.up, 11);
    }

    #[test]
    fn breakdown_is_consistent() {
        let spec = cluster1();
        let s = shape();
        let traffic = volume_expected(&s, &spec);
        let cfg = TuneConfig::new(12, 5, 20, 129, 32);
        let b: LatencyBreakdown<f64> = predict_latency(&s, &spec, &cfg, &traffic, ModelOptions::default()).unwrap();
        assert_eq!(b.l_total, b.l_s1 + b.l_s2 + b.l_swiglu);
        assert!(b.l_s2 >= b.l_down.max(b.l_comb));
        assert!(b.w_gap >= 0.0 && b.w_red >= 0.0 && b.w_rem >= 0.0);
        let b32: LatencyBreakdown<f32> = predict_latency(&s, &spec, &cfg, &traffic, ModelOptions::default()).unwrap();
        assert!(rel(f64::from(b32.l_total), b.l_total) < 1e-5);
    }

    #[test]
    fn faster_links_never_slow_communication() {
        let s = shape();
        let cfg = TuneConfig::new(12, 5, 20, 129, 32);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for bw in [50e9, 100e9, 200e9, 400e9, 900e9] {
            let spec = HardwareSpec { bw_nvl: bw, ..cluster1() };
            let b: LatencyBreakdown<f64> = predict_latency(&s, &spec, &cfg, &volume_expected(&s, &spec), ModelOptions::default()).unwrap();
            assert!(b.l_disp <= prev.0 && b.l_comb <= prev.1);
            prev = (b.l_disp, b.l_comb);
        }
    }

    #[test]
    fn no_compute_sms_is_an_error() {
        let s = shape();
        let spec = cluster1();
        let t = volume_expected(&s, &spec);
        let cfg = TuneConfig::new(132, 1, 20, 1, 32);
        assert!(matches!(
            predict_latency::<f64>(&s, &spec, &cfg, &t, ModelOptions::default()),
            Err(PerfError::NoComputeSms { .. })
        ));
    }
}
