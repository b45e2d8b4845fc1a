//! Softfloat reduction experiments.
//!
//! bfloat16 is modeled as binary32 arithmetic with the result rounded to
//! bfloat16 after every add and multiply.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::MoEShape;
use crate::sim::{run_gemm_combine_sim, SimError, SimParams, SimTimeline};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Binary32,
    #[default]
    Bfloat16,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp32" | "f32" | "binary32" => Ok(Format::Binary32),
            "bf16" | "bfloat16" => Ok(Format::Bfloat16),
            _ => Err(format!("unknown format {s:?} (expected bf16 or fp32)")),
        }
    }
}

/// A value carried in binary32; bfloat16 values keep the low 16 bits zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftValue {
    pub value: f32,
    pub format: Format,
}

impl SoftValue {
    pub fn new(x: f32, format: Format) -> Self {
        match format {
            Format::Binary32 => SoftValue { value: x, format },
            Format::Bfloat16 => round_to_bf16(x),
        }
    }

    pub fn zero(format: Format) -> Self {
        SoftValue { value: 0.0, format }
    }

    pub fn add(self, other: SoftValue) -> Self {
        SoftValue::new(self.value + other.value, self.format)
    }

    pub fn mul(self, other: SoftValue) -> Self {
        SoftValue::new(self.value * other.value, self.format)
    }

    pub fn bits(self) -> u32 {
        self.value.to_bits()
    }
}

/// Round to the nearest bfloat16, ties to even. NaN stays a quiet NaN.
pub fn round_to_bf16(x: f32) -> SoftValue {
    let bits = x.to_bits();
    let out = if x.is_nan() {
        (bits | 0x0040_0000) & 0xFFFF_0000
    } else {
        let lsb = (bits >> 16) & 1;
        bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000
    };
    SoftValue { value: f32::from_bits(out), format: Format::Bfloat16 }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub k: u32,
    pub weight: f32,
    pub value: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    /// Slot order, k ascending.
    Canonical,
    /// Independent shuffle per token.
    Permuted(u64),
    /// First half and second half folded separately, then added.
    SplitBatch,
}

/// Per token, the replicas to sum in the order they are listed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionPlan {
    pub tokens: Vec<Vec<Term>>,
    pub policy: OrderPolicy,
}

impl ReductionPlan {
    /// Each token's terms sorted into `policy` order.
    pub fn new(mut tokens: Vec<Vec<Term>>, policy: OrderPolicy) -> Self {
        match policy {
            OrderPolicy::Canonical | OrderPolicy::SplitBatch => {
                for t in &mut tokens {
                    t.sort_by_key(|x| x.k);
                }
            }
            OrderPolicy::Permuted(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for t in &mut tokens {
                    t.sort_by_key(|x| x.k);
                    t.shuffle(&mut rng);
                }
            }
        }
        ReductionPlan { tokens, policy }
    }
}

fn fold(terms: &[Term], format: Format) -> SoftValue {
    terms.iter().fold(SoftValue::zero(format), |acc, t| {
        acc.add(SoftValue::new(t.weight, format).mul(SoftValue::new(t.value, format)))
    })
}

/// Left-fold weighted sum of every token, rounding each step to `format`.
pub fn accumulate(plan: &ReductionPlan, format: Format) -> Vec<SoftValue> {
    plan.tokens
        .iter()
        .map(|terms| match plan.policy {
            OrderPolicy::SplitBatch => {
                let (a, b) = terms.split_at(terms.len() / 2);
                fold(a, format).add(fold(b, format))
            }
            _ => fold(terms, format),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub max_diff: f64,
    pub non_bitwise: usize,
    pub elements: usize,
}

impl PrecisionReport {
    pub fn frac_non_bitwise(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.non_bitwise as f64 / self.elements as f64
        }
    }

    pub fn is_bitwise(&self) -> bool {
        self.non_bitwise == 0
    }

    fn push(&mut self, a: SoftValue, b: SoftValue) {
        self.elements += 1;
        if a.bits() != b.bits() {
            self.non_bitwise += 1;
            let d = (f64::from(a.value) - f64::from(b.value)).abs();
            self.max_diff = if d.is_nan() { f64::INFINITY } else { self.max_diff.max(d) };
        }
    }

    pub fn merge(&mut self, other: &PrecisionReport) {
        self.max_diff = self.max_diff.max(other.max_diff);
        self.non_bitwise += other.non_bitwise;
        self.elements += other.elements;
    }
}

pub fn compare(a: &[SoftValue], b: &[SoftValue]) -> PrecisionReport {
    assert_eq!(a.len(), b.len(), "compared outputs differ in length");
    let mut r = PrecisionReport::default();
    for (&x, &y) in a.iter().zip(b) {
        r.push(x, y);
    }
    r
}

/// Log-uniform magnitude in [2^-4, 2^8] with a random sign.
pub fn synth_value(rng: &mut impl Rng) -> f32 {
    let e: f32 = rng.gen_range(-4.0..8.0);
    let v = e.exp2();
    if rng.gen_bool(0.5) {
        -v
    } else {
        v
    }
}

/// How the fused combine orders the replicas of a token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineOrder {
    /// Reduce worker sums in slot order once all replicas are in.
    #[default]
    Scoreboard,
    /// Replicas summed in the order they landed.
    Arrival,
    /// Replicas summed in a seeded random order.
    Permuted,
}

/// One combine simulation reused for many value seeds.
pub struct FusedCombine<'a> {
    params: &'a SimParams,
    timeline: SimTimeline,
}

impl<'a> FusedCombine<'a> {
    pub fn new(params: &'a SimParams) -> Result<Self, SimError> {
        Ok(FusedCombine { params, timeline: run_gemm_combine_sim(params)? })
    }

    pub fn timeline(&self) -> &SimTimeline {
        &self.timeline
    }

    /// Expert outputs for every (source, token, slot, column), drawn in
    /// source order so both paths see the same numbers.
    fn synth(&self, seed: u64, width: usize, format: Format) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.params.shape.topk as usize;
        self.params
            .maps
            .iter()
            .map(|m| (0..m.n_tok * k * width).map(|_| SoftValue::new(synth_value(&mut rng), format).value).collect())
            .collect()
    }

    /// Sequential baseline against the simulated fused kernel, over `width`
    /// sampled hidden columns.
    pub fn compare(&self, seed: u64, format: Format, order: CombineOrder, width: usize) -> Result<PrecisionReport, SimError> {
        let p = self.params;
        let k = p.shape.topk as usize;
        let values = self.synth(seed, width, format);

        // expert-side output buffers, one row per received copy
        let mut rows: Vec<Vec<f32>> = p.maps.iter().map(|m| vec![0.0; m.layout.total(m.rank) * width]).collect();
        for (s, map) in p.maps.iter().enumerate() {
            for t in 0..map.n_tok {
                for j in 0..k {
                    let d = map.get(t, j);
                    let row = map.layout.buffer_index(d);
                    let src = &values[s][(t * k + j) * width..][..width];
                    rows[d.rank as usize][row * width..][..width].copy_from_slice(src);
                }
            }
        }

        // fire reductions in simulated time order
        let mut fired: Vec<(f64, usize, usize)> = Vec::new();
        for (s, rec) in self.timeline.ranks.iter().enumerate() {
            for (t, &start) in rec.reduce_start.iter().enumerate() {
                let last = rec.replica_arrival[t * k..(t + 1) * k].iter().copied().fold(0.0, f64::max);
                if !(start >= last) {
                    return Err(SimError::Shape(format!("rank {s} token {t} reduced at {start} before its last replica at {last}")));
                }
                fired.push((start, s, t));
            }
        }
        fired.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut shuffle = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let mut report = PrecisionReport::default();
        for &(_, s, t) in &fired {
            let map = &p.maps[s];
            let rec = &self.timeline.ranks[s];
            let gates: Vec<f32> = (0..k).map(|j| p.routing.gate(s, t, j)).collect();
            let mut slots: Vec<usize> = (0..k).collect();
            match order {
                CombineOrder::Scoreboard => {}
                CombineOrder::Arrival => slots.sort_by(|&a, &b| rec.replica_arrival[t * k + a].total_cmp(&rec.replica_arrival[t * k + b])),
                CombineOrder::Permuted => slots.shuffle(&mut shuffle),
            }
            for c in 0..width {
                let reference: Vec<Term> = (0..k)
                    .map(|j| Term { k: j as u32, weight: gates[j], value: values[s][(t * k + j) * width + c] })
                    .collect();
                let fused: Vec<Term> = slots
                    .iter()
                    .map(|&j| {
                        let d = map.get(t, j);
                        let row = map.layout.buffer_index(d);
                        Term { k: j as u32, weight: gates[j], value: rows[d.rank as usize][row * width + c] }
                    })
                    .collect();
                report.push(fold(&reference, format), fold(&fused, format));
            }
        }
        Ok(report)
    }
}

/// Runs the combine simulation and compares both paths for one seed.
pub fn fused_vs_sequential(params: &SimParams, seed: u64, format: Format, order: CombineOrder, width: usize) -> Result<PrecisionReport, SimError> {
    FusedCombine::new(params)?.compare(seed, format, order, width)
}

/// Full-sequence fold against `fold(x[..split]) + fold(x[split..])` per
/// column. `data` is token-major, `width` columns per token.
pub fn split_compare(data: &[f32], width: usize, split: usize, format: Format) -> PrecisionReport {
    let n = if width == 0 { 0 } else { data.len() / width };
    let split = split.min(n);
    let column = |c: usize, range: std::ops::Range<usize>| -> Vec<Term> {
        range.map(|t| Term { k: t as u32, weight: 1.0, value: data[t * width + c] }).collect()
    };
    let mut report = PrecisionReport::default();
    for c in 0..width {
        let full = fold(&column(c, 0..n), format);
        let parts = if split == 0 || split == n {
            full
        } else {
            fold(&column(c, 0..split), format).add(fold(&column(c, split..n), format))
        };
        report.push(full, parts);
    }
    report
}

/// Columns sampled from the hidden dimension by the split-batch experiment.
pub const SPLIT_COLUMNS: u64 = 64;

/// Weight-gradient style sum over the token axis with the batch cut into two
/// micro-batches of equal size.
pub fn split_batch_experiment(shape: &MoEShape, seed: u64, format: Format) -> PrecisionReport {
    let width = shape.h_dim.min(SPLIT_COLUMNS) as usize;
    let n = shape.n_tok as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n * width).map(|_| SoftValue::new(synth_value(&mut rng), format).value).collect();
    split_compare(&data, width, n / 2, format)
}
