//! Deterministic global token mapping.
//!
//! Every routed copy `(t, j)` of a source rank gets a destination
//! `(rank, local expert, offset)` computed from prefix sums alone, so any
//! number of senders can write concurrently without coordination and the
//! receive buffer always ends up in the same order: per expert, by source
//! rank, then by the source's local stable order.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, RankRouting, RoutingInstance};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid local sort index: {0}")]
    InvalidLocalIndex(String),
    #[error(transparent)]
    Routing(#[from] ModelError),
}

/// Position of each routed copy in the rank's expert-sorted layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalSortIndex {
    pub topk: usize,
    /// Row-major `[n_tok, topk]`.
    pub positions: Vec<usize>,
}

impl LocalSortIndex {
    pub fn get(&self, t: usize, j: usize) -> usize {
        self.positions[t * self.topk + j]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalSort {
    pub index: LocalSortIndex,
    /// Copies per global expert on this rank.
    pub expert_counts: Vec<usize>,
    /// Exclusive prefix sum of `expert_counts`.
    pub expert_offsets: Vec<usize>,
}

fn exclusive_prefix(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .scan(0usize, |acc, &c| {
            let start = *acc;
            *acc += c;
            Some(start)
        })
        .collect()
}

/// Counting sort of one rank's copies by expert, ascending `(t, j)` inside
/// each expert.
pub fn local_stable_sort(routing: &RankRouting, n_exp: usize, topk: usize) -> LocalSort {
    let mut counts = vec![0usize; n_exp];
    for &e in &routing.experts {
        counts[e as usize] += 1;
    }
    let offsets = exclusive_prefix(&counts);
    let mut cursor = offsets.clone();
    let positions = routing
        .experts
        .iter()
        .map(|&e| {
            let p = cursor[e as usize];
            cursor[e as usize] += 1;
            p
        })
        .collect();
    LocalSort {
        index: LocalSortIndex { topk, positions },
        expert_counts: counts,
        expert_offsets: offsets,
    }
}

/// Derives counts and offsets for a caller-supplied index, checking that it
/// is a permutation whose restriction to each expert is that expert's segment.
pub fn local_sort_from_index(routing: &RankRouting, n_exp: usize, index: LocalSortIndex) -> Result<LocalSort, MapError> {
    let n = routing.experts.len();
    if index.positions.len() != n {
        return Err(MapError::InvalidLocalIndex(format!(
            "{} positions for {n} copies",
            index.positions.len()
        )));
    }
    let mut counts = vec![0usize; n_exp];
    for &e in &routing.experts {
        counts[e as usize] += 1;
    }
    let offsets = exclusive_prefix(&counts);
    let mut seen = vec![false; n];
    for (copy, (&p, &e)) in index.positions.iter().zip(&routing.experts).enumerate() {
        let (lo, hi) = (offsets[e as usize], offsets[e as usize] + counts[e as usize]);
        if p < lo || p >= hi || std::mem::replace(&mut seen[p], true) {
            return Err(MapError::InvalidLocalIndex(format!(
                "copy {copy} (expert {e}) at position {p}, segment is [{lo}, {hi})"
            )));
        }
    }
    Ok(LocalSort {
        index,
        expert_counts: counts,
        expert_offsets: offsets,
    })
}

/// Base write offsets `[dst rank][local expert][src rank]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalOffsets {
    pub world: usize,
    pub experts_per_rank: usize,
    data: Vec<usize>,
}

impl GlobalOffsets {
    pub fn get(&self, dst: usize, e_loc: usize, src: usize) -> usize {
        self.data[(dst * self.experts_per_rank + e_loc) * self.world + src]
    }

    /// `[src]` row for one destination expert.
    pub fn row(&self, dst: usize, e_loc: usize) -> &[usize] {
        let start = (dst * self.experts_per_rank + e_loc) * self.world;
        &self.data[start..start + self.world]
    }
}

/// Exclusive prefix sum of the gathered counts along the source-rank axis.
pub fn compute_global_offsets(all_counts: &[Vec<usize>]) -> Result<GlobalOffsets, MapError> {
    let world = all_counts.len();
    if world == 0 {
        return Err(MapError::ShapeMismatch("no ranks".into()));
    }
    let n_exp = all_counts[0].len();
    if let Some((r, row)) = all_counts.iter().enumerate().find(|(_, row)| row.len() != n_exp) {
        return Err(MapError::ShapeMismatch(format!(
            "rank {r} reports {} experts, rank 0 reports {n_exp}",
            row.len()
        )));
    }
    if n_exp % world != 0 {
        return Err(MapError::ShapeMismatch(format!("{n_exp} experts over {world} ranks")));
    }
    let epr = n_exp / world;
    let mut data = vec![0usize; n_exp * world];
    for e in 0..n_exp {
        let mut acc = 0usize;
        for (src, row) in all_counts.iter().enumerate() {
            data[e * world + src] = acc;
            acc += row[e];
        }
    }
    Ok(GlobalOffsets {
        world,
        experts_per_rank: epr,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Destination {
    pub rank: u32,
    pub local_expert: u32,
    pub offset: u32,
}

/// Receive-buffer geometry on every destination rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceiveLayout {
    pub world: usize,
    pub experts_per_rank: usize,
    counts: Vec<usize>,
    bases: Vec<usize>,
    totals: Vec<usize>,
}

impl ReceiveLayout {
    fn from_counts(world: usize, epr: usize, all_counts: &[Vec<usize>]) -> Self {
        let mut counts = vec![0usize; world * epr];
        for row in all_counts {
            for (e, &c) in row.iter().enumerate() {
                counts[e] += c;
            }
        }
        let mut bases = Vec::with_capacity(world * epr);
        let mut totals = Vec::with_capacity(world);
        for dst in 0..world {
            let seg = &counts[dst * epr..(dst + 1) * epr];
            bases.extend(exclusive_prefix(seg));
            totals.push(seg.iter().sum());
        }
        ReceiveLayout {
            world,
            experts_per_rank: epr,
            counts,
            bases,
            totals,
        }
    }

    /// Copies received by one local expert.
    pub fn count(&self, dst: usize, e_loc: usize) -> usize {
        self.counts[dst * self.experts_per_rank + e_loc]
    }

    /// Start of a local expert's segment in the destination's receive buffer.
    pub fn base(&self, dst: usize, e_loc: usize) -> usize {
        self.bases[dst * self.experts_per_rank + e_loc]
    }

    pub fn total(&self, dst: usize) -> usize {
        self.totals[dst]
    }

    pub fn buffer_index(&self, d: Destination) -> usize {
        self.base(d.rank as usize, d.local_expert as usize) + d.offset as usize
    }
}

/// Destinations of every routed copy of one source rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalTokenMap {
    pub rank: usize,
    pub n_tok: usize,
    pub topk: usize,
    /// Row-major `[n_tok, topk]`.
    pub entries: Vec<Destination>,
    pub offsets: GlobalOffsets,
    pub layout: ReceiveLayout,
}

impl GlobalTokenMap {
    pub fn get(&self, t: usize, j: usize) -> Destination {
        self.entries[t * self.topk + j]
    }
}

pub fn build_global_token_map(routing: &RoutingInstance) -> Result<Vec<GlobalTokenMap>, MapError> {
    routing.validate()?;
    let n_exp = routing.n_exp as usize;
    let k = routing.topk as usize;
    let sorts: Vec<LocalSort> = routing
        .ranks
        .iter()
        .map(|r| local_stable_sort(r, n_exp, k))
        .collect();
    map_from_local_sorts(routing, &sorts)
}

/// Same as [`build_global_token_map`] with caller-provided local indices.
pub fn build_global_token_map_with(
    routing: &RoutingInstance,
    indices: Vec<LocalSortIndex>,
) -> Result<Vec<GlobalTokenMap>, MapError> {
    routing.validate()?;
    if indices.len() != routing.world() {
        return Err(MapError::ShapeMismatch(format!(
            "{} local indices for {} ranks",
            indices.len(),
            routing.world()
        )));
    }
    let n_exp = routing.n_exp as usize;
    let sorts = routing
        .ranks
        .iter()
        .zip(indices)
        .map(|(r, idx)| local_sort_from_index(r, n_exp, idx))
        .collect::<Result<Vec<_>, _>>()?;
    map_from_local_sorts(routing, &sorts)
}

fn map_from_local_sorts(routing: &RoutingInstance, sorts: &[LocalSort]) -> Result<Vec<GlobalTokenMap>, MapError> {
    let world = routing.world();
    let k = routing.topk as usize;
    let all_counts: Vec<Vec<usize>> = sorts.iter().map(|s| s.expert_counts.clone()).collect();
    let offsets = compute_global_offsets(&all_counts)?;
    let epr = offsets.experts_per_rank;
    let layout = ReceiveLayout::from_counts(world, epr, &all_counts);

    let to_u32 = |v: usize| u32::try_from(v).expect("offset fits in u32");
    let maps = sorts
        .iter()
        .enumerate()
        .map(|(src, sort)| {
            let experts = &routing.ranks[src].experts;
            let entries = experts
                .iter()
                .zip(&sort.index.positions)
                .map(|(&e_id, &loc_idx)| {
                    let e_id = e_id as usize;
                    let r_tgt = e_id / epr;
                    let e_loc = e_id % epr;
                    let base = offsets.get(r_tgt, e_loc, src);
                    Destination {
                        rank: to_u32(r_tgt),
                        local_expert: to_u32(e_loc),
                        offset: to_u32(loc_idx - sort.expert_offsets[e_id] + base),
                    }
                })
                .collect();
            GlobalTokenMap {
                rank: src,
                n_tok: routing.n_tok,
                topk: k,
                entries,
                offsets: offsets.clone(),
                layout: layout.clone(),
            }
        })
        .collect();
    Ok(maps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendItem {
    pub token: u32,
    pub slot: u32,
    pub dst: Destination,
}

/// Ordered transmission queue of one source rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendSchedule {
    pub rank: usize,
    pub items: Vec<SendItem>,
}

/// Orders sends by destination local expert, then destination offset, then
/// destination rank.
///
/// Each `(dst, expert)` run is already contiguous in offsets, so the queue is
/// produced by walking the offset table and merging the per-rank runs of one
/// local expert; no comparison sort over all items.
pub fn build_send_schedule(map: &GlobalTokenMap) -> SendSchedule {
    let world = map.offsets.world;
    let epr = map.offsets.experts_per_rank;
    let n_exp = world * epr;

    // Bucket copies by global expert at their run position.
    let mut run_len = vec![0usize; n_exp];
    for d in &map.entries {
        run_len[d.rank as usize * epr + d.local_expert as usize] += 1;
    }
    let run_start = exclusive_prefix(&run_len);
    let mut runs = vec![None::<SendItem>; map.entries.len()];
    for (i, d) in map.entries.iter().enumerate() {
        let e = d.rank as usize * epr + d.local_expert as usize;
        let pos = d.offset as usize - map.offsets.get(d.rank as usize, d.local_expert as usize, map.rank);
        runs[run_start[e] + pos] = Some(SendItem {
            token: (i / map.topk) as u32,
            slot: (i % map.topk) as u32,
            dst: *d,
        });
    }
    let runs: Vec<SendItem> = runs.into_iter().map(|s| s.expect("every run slot filled")).collect();

    let mut items = Vec::with_capacity(runs.len());
    let mut heads = vec![0usize; world];
    for e_loc in 0..epr {
        heads.iter_mut().for_each(|h| *h = 0);
        loop {
            let mut pick: Option<(usize, u32)> = None;
            for dst in 0..world {
                let e = dst * epr + e_loc;
                if heads[dst] < run_len[e] {
                    let off = runs[run_start[e] + heads[dst]].dst.offset;
                    if pick.map_or(true, |(_, best)| off < best) {
                        pick = Some((dst, off));
                    }
                }
            }
            let Some((dst, _)) = pick else { break };
            let e = dst * epr + e_loc;
            items.push(runs[run_start[e] + heads[dst]]);
            heads[dst] += 1;
        }
    }
    SendSchedule { rank: map.rank, items }
}

/// Natural token order, ignoring consumer priority.
pub fn build_naive_schedule(map: &GlobalTokenMap) -> SendSchedule {
    let items = map
        .entries
        .iter()
        .enumerate()
        .map(|(i, d)| SendItem {
            token: (i / map.topk) as u32,
            slot: (i % map.topk) as u32,
            dst: *d,
        })
        .collect();
    SendSchedule { rank: map.rank, items }
}

/// One row per `(rank, t, j)`, tab separated with a header.
pub fn maps_to_tsv(maps: &[GlobalTokenMap]) -> String {
    let mut out = String::from("rank\ttoken\tslot\tdst_rank\tlocal_expert\toffset\n");
    for m in maps {
        for (i, d) in m.entries.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                m.rank,
                i / m.topk,
                i % m.topk,
                d.rank,
                d.local_expert,
                d.offset
            );
        }
    }
    out
}

pub fn schedule_to_tsv(schedule: &SendSchedule) -> String {
    let mut out = String::from("rank\ttoken\tslot\tdst_rank\tlocal_expert\toffset\n");
    for it in &schedule.items {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            schedule.rank, it.token, it.slot, it.dst.rank, it.dst.local_expert, it.dst.offset
        );
    }
    out
}

/// Reference mapping computed the slow way: gather every copy of every rank
/// in `(src, t, j)` order, stable-sort by expert, and read positions off.
pub mod oracle {
    use super::*;

    pub fn gather_sort_destinations(routing: &RoutingInstance) -> Vec<Vec<Destination>> {
        let world = routing.world();
        let epr = routing.n_exp as usize / world;
        let k = routing.topk as usize;
        let mut copies: Vec<(u32, usize, usize)> = Vec::new();
        for (src, rank) in routing.ranks.iter().enumerate() {
            for (i, &e) in rank.experts.iter().enumerate() {
                copies.push((e, src, i));
            }
        }
        copies.sort_by_key(|&(e, _, _)| e);
        let mut out: Vec<Vec<Destination>> = (0..world).map(|_| vec![Destination { rank: 0, local_expert: 0, offset: 0 }; routing.n_tok * k]).collect();
        let mut prev: Option<u32> = None;
        let mut pos = 0u32;
        for (e, src, i) in copies {
            if prev != Some(e) {
                prev = Some(e);
                pos = 0;
            }
            out[src][i] = Destination {
                rank: e / epr as u32,
                local_expert: e % epr as u32,
                offset: pos,
            };
            pos += 1;
        }
        out
    }

    /// Whether the prefix-sum mapping equals the gather-and-sort mapping.
    pub fn matches(routing: &RoutingInstance) -> Result<bool, MapError> {
        let maps = build_global_token_map(routing)?;
        let expect = gather_sort_destinations(routing);
        Ok(maps.iter().zip(&expect).all(|(m, e)| &m.entries == e))
    }
}

/// Random small instance for oracle checks: world in {2, 4, 8}, at most 64
/// experts, 64 tokens per rank and top-8.
pub fn random_mapping_instance(seed: u64) -> RoutingInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7070_696e_6721);
    let world = [2u32, 4, 8][rng.gen_range(0..3)];
    let epr = rng.gen_range(1..=64 / world);
    let n_exp = world * epr;
    let topk = rng.gen_range(1..=n_exp.min(8));
    let n_tok = rng.gen_range(1..=64u64);
    let shape = crate::model::MoEShape {
        name: String::new(),
        h_dim: 1,
        h_inter: 1,
        n_exp,
        topk,
        n_tok,
        s_tok: None,
        b_m: 128,
        b_n: 256,
        mu_table: Default::default(),
    };
    crate::model::sample_routing(&shape, world, rng.gen()).expect("topk ≤ n_exp by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sel(n_exp: u32, topk: u32, per_rank: Vec<Vec<Vec<u32>>>) -> RoutingInstance {
        RoutingInstance::from_selections(n_exp, topk, per_rank).unwrap()
    }

    #[test]
    fn two_token_stable_sort() {
        let r = sel(2, 1, vec![vec![vec![1], vec![0]]]);
        let s = local_stable_sort(&r.ranks[0], 2, 1);
        assert_eq!(s.expert_counts, vec![1, 1]);
        assert_eq!(s.expert_offsets, vec![0, 1]);
        assert_eq!(s.index.positions, vec![1, 0]);
    }

    #[test]
    fn single_bin_is_identity() {
        let r = sel(1, 1, vec![vec![vec![0], vec![0], vec![0]]]);
        assert_eq!(local_stable_sort(&r.ranks[0], 1, 1).index.positions, vec![0, 1, 2]);
    }

    #[test]
    fn stable_sort_matches_counting_oracle() {
        let shape = crate::model::MoEShape {
            name: String::new(),
            h_dim: 1,
            h_inter: 1,
            n_exp: 8,
            topk: 2,
            n_tok: 4,
            s_tok: None,
            b_m: 128,
            b_n: 256,
            mu_table: Default::default(),
        };
        let r = crate::model::sample_routing(&shape, 1, 3).unwrap();
        let s = local_stable_sort(&r.ranks[0], 8, 2);
        // Oracle: sort flattened (copy index, expert) pairs by expert, stable.
        let mut pairs: Vec<(usize, u32)> = r.ranks[0].experts.iter().copied().enumerate().collect();
        pairs.sort_by_key(|&(_, e)| e);
        let mut expect = vec![0usize; pairs.len()];
        for (pos, (copy, _)) in pairs.into_iter().enumerate() {
            expect[copy] = pos;
        }
        assert_eq!(s.index.positions, expect);
    }

    #[test]
    fn offsets_by_hand() {
        let o = compute_global_offsets(&[vec![1, 1], vec![1, 1]]).unwrap();
        for dst in 0..2 {
            assert_eq!(o.row(dst, 0), &[0, 1]);
        }
        let o = compute_global_offsets(&[vec![3, 0], vec![2, 5]]).unwrap();
        assert_eq!(o.row(0, 0), &[0, 3]);
        assert_eq!(o.row(1, 0), &[0, 0]);
    }

    #[test]
    fn single_rank_offsets_are_zero() {
        let o = compute_global_offsets(&[vec![4, 2, 7]]).unwrap();
        assert!((0..3).all(|e| o.get(0, e, 0) == 0));
    }

    #[test]
    fn offsets_reject_ragged_input() {
        assert!(matches!(compute_global_offsets(&[vec![1, 2], vec![1]]), Err(MapError::ShapeMismatch(_))));
        assert!(matches!(compute_global_offsets(&[vec![1, 2, 3], vec![1, 2, 3]]), Err(MapError::ShapeMismatch(_))));
    }

    #[test]
    fn two_rank_buffer_order() {
        // rank0 selects [E0, E1], rank1 selects [E1, E0].
        let r = sel(2, 1, vec![vec![vec![0], vec![1]], vec![vec![1], vec![0]]]);
        let maps = build_global_token_map(&r).unwrap();
        let d = |rank, off| Destination { rank, local_expert: 0, offset: off };
        // expert 0 buffer: [rank0 tok0, rank1 tok1]; expert 1: [rank0 tok1, rank1 tok0]
        assert_eq!(maps[0].entries, vec![d(0, 0), d(1, 0)]);
        assert_eq!(maps[1].entries, vec![d(1, 1), d(0, 1)]);
    }

    #[test]
    fn world_one_offsets_equal_local_positions() {
        let r = sel(3, 2, vec![vec![vec![2, 0], vec![0, 1], vec![1, 2], vec![0, 2]]]);
        let maps = build_global_token_map(&r).unwrap();
        let s = local_stable_sort(&r.ranks[0], 3, 2);
        for (i, d) in maps[0].entries.iter().enumerate() {
            let e = r.ranks[0].experts[i] as usize;
            assert_eq!(d.offset as usize, s.index.positions[i] - s.expert_offsets[e]);
        }
    }

    #[test]
    fn prefix_map_matches_gather_sort_oracle() {
        for seed in 0..100 {
            let r = random_mapping_instance(seed);
            assert!(oracle::matches(&r).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn custom_index_is_checked() {
        let r = sel(2, 1, vec![vec![vec![1], vec![0]]]);
        let bad = LocalSortIndex { topk: 1, positions: vec![0, 1] };
        assert!(matches!(build_global_token_map_with(&r, vec![bad]), Err(MapError::InvalidLocalIndex(_))));
        let good = LocalSortIndex { topk: 1, positions: vec![1, 0] };
        assert_eq!(build_global_token_map_with(&r, vec![good]).unwrap(), build_global_token_map(&r).unwrap());
    }

    #[test]
    fn two_item_schedule_order() {
        // tokA -> expert 1, tokB -> expert 0 on a single rank.
        let r = sel(2, 1, vec![vec![vec![1], vec![0]]]);
        let maps = build_global_token_map(&r).unwrap();
        let s = build_send_schedule(&maps[0]);
        let tokens: Vec<u32> = s.items.iter().map(|i| i.token).collect();
        assert_eq!(tokens, vec![1, 0]);
        assert_eq!(build_naive_schedule(&maps[0]).items[0].token, 0);
    }

    #[test]
    fn single_expert_schedule_follows_offsets() {
        let r = sel(1, 1, vec![vec![vec![0]; 5]]);
        let maps = build_global_token_map(&r).unwrap();
        let offs: Vec<u32> = build_send_schedule(&maps[0]).items.iter().map(|i| i.dst.offset).collect();
        assert_eq!(offs, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn schedule_matches_comparison_sort() {
        for seed in 0..50 {
            let r = random_mapping_instance(seed);
            for m in build_global_token_map(&r).unwrap() {
                let s = build_send_schedule(&m);
                let mut expect = build_naive_schedule(&m).items;
                expect.sort_by_key(|i| (i.dst.local_expert, i.dst.offset, i.dst.rank));
                assert_eq!(s.items, expect, "seed {seed} rank {}", m.rank);
            }
        }
    }

    #[test]
    fn tsv_export_has_one_row_per_copy() {
        let r = random_mapping_instance(9);
        let maps = build_global_token_map(&r).unwrap();
        let tsv = maps_to_tsv(&maps);
        assert_eq!(tsv.lines().count(), 1 + r.world() * r.n_tok * r.topk as usize);
        assert!(tsv.starts_with("rank\ttoken\tslot"));
    }
}
