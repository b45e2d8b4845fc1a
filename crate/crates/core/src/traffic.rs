//! Relay-multicast traffic combinatorics and per-scheme byte volumes.
//!
//! A token routed to `topk` experts spread over `world` ranks only needs one
//! NVLink transfer per distinct destination rank; the remaining copies are
//! replicated locally through HBM. Probabilities are kept as exact rationals
//! and only turned into floats when reported.

use std::fmt::Write as _;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HardwareSpec, MoEShape, RoutingInstance};

/// Largest `n` accepted by [`stirling2`].
pub const STIRLING_MAX_N: u32 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrafficError {
    #[error("S2({n}, {k}) outside supported range 0 ≤ k ≤ n ≤ {STIRLING_MAX_N}")]
    OutOfRange { n: u32, k: u32 },
    #[error("world and topk must be ≥ 1")]
    Degenerate,
}

/// Stirling number of the second kind, exact.
pub fn stirling2(n: u32, k: u32) -> Result<BigUint, TrafficError> {
    if k > n || n > STIRLING_MAX_N {
        return Err(TrafficError::OutOfRange { n, k });
    }
    let (n, k) = (n as usize, k as usize);
    // row[j] = S(i, j) for the current i
    let mut row = vec![BigUint::zero(); k + 1];
    row[0] = BigUint::one();
    for i in 1..=n {
        for j in (1..=k.min(i)).rev() {
            let carried = std::mem::take(&mut row[j]) * BigUint::from(j);
            row[j] = carried + &row[j - 1];
        }
        row[0] = BigUint::zero();
    }
    Ok(row.swap_remove(k))
}

pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

pub fn factorial(n: u64) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, i| acc * BigUint::from(i))
}

fn ratio(num: &BigUint, den: &BigUint) -> BigRational {
    BigRational::new(BigInt::from(num.clone()), BigInt::from(den.clone()))
}

fn ratio_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Distribution of the number of distinct destination ranks of one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinctRankDistribution {
    pub world: u32,
    pub topk: u32,
    /// `probs[i]` is `P(X = i + 1)`.
    pub probs: Vec<f64>,
    pub expectation: f64,
    pub expected_saving_fraction: f64,
    #[serde(skip)]
    exact: Vec<BigRational>,
}

impl DistinctRankDistribution {
    fn from_exact(world: u32, topk: u32, exact: Vec<BigRational>) -> Self {
        let expectation_exact = exact
            .iter()
            .enumerate()
            .fold(BigRational::zero(), |acc, (i, p)| acc + p * BigInt::from(i + 1));
        let expectation = ratio_f64(&expectation_exact);
        DistinctRankDistribution {
            world,
            topk,
            probs: exact.iter().map(ratio_f64).collect(),
            expectation,
            expected_saving_fraction: (f64::from(topk) - expectation) / f64::from(topk),
            exact,
        }
    }

    pub fn max_ranks(&self) -> u32 {
        self.probs.len() as u32
    }

    pub fn prob(&self, x: u32) -> f64 {
        if x == 0 {
            return 0.0;
        }
        self.probs.get(x as usize - 1).copied().unwrap_or(0.0)
    }

    pub fn prob_exact(&self, x: u32) -> BigRational {
        if x == 0 {
            return BigRational::zero();
        }
        self.exact.get(x as usize - 1).cloned().unwrap_or_else(BigRational::zero)
    }

    pub fn total_exact(&self) -> BigRational {
        self.exact.iter().fold(BigRational::zero(), |a, p| a + p)
    }

    pub fn expectation_exact(&self) -> BigRational {
        self.exact
            .iter()
            .enumerate()
            .fold(BigRational::zero(), |acc, (i, p)| acc + p * BigInt::from(i + 1))
    }
}

/// Balls-in-bins: every copy picks its destination rank independently and
/// uniformly. `P(X = x) = C(W, x) x! S2(k, x) / W^k`.
pub fn distinct_rank_distribution(world: u32, topk: u32) -> Result<DistinctRankDistribution, TrafficError> {
    if world == 0 || topk == 0 {
        return Err(TrafficError::Degenerate);
    }
    let max_x = topk.min(world);
    let den = BigUint::from(world).pow(topk);
    let exact = (1..=max_x)
        .map(|x| {
            let num = binomial(u64::from(world), u64::from(x)) * factorial(u64::from(x)) * stirling2(topk, x)?;
            Ok(ratio(&num, &den))
        })
        .collect::<Result<Vec<_>, TrafficError>>()?;
    Ok(DistinctRankDistribution::from_exact(world, topk, exact))
}

/// Integer numerators `C(W, x) x! S2(k, x)`, which sum to `W^k`.
pub fn surjection_counts(world: u32, topk: u32) -> Result<Vec<BigUint>, TrafficError> {
    (1..=topk.min(world))
        .map(|x| Ok(binomial(u64::from(world), u64::from(x)) * factorial(u64::from(x)) * stirling2(topk, x)?))
        .collect()
}

/// Distinct-rank distribution when a token picks `topk` distinct experts
/// uniformly out of `world * experts_per_rank`, which is what
/// [`crate::model::sample_routing`] draws. Inclusion-exclusion over the set
/// of ranks hit:
/// `P(X = x) = C(W, x) Σ_i (-1)^i C(x, i) C((x - i) E, k) / C(W E, k)`.
pub fn distinct_rank_distribution_without_replacement(
    world: u32,
    experts_per_rank: u32,
    topk: u32,
) -> Result<DistinctRankDistribution, TrafficError> {
    if world == 0 || topk == 0 || experts_per_rank == 0 || topk > world * experts_per_rank {
        return Err(TrafficError::Degenerate);
    }
    let epr = u64::from(experts_per_rank);
    let k = u64::from(topk);
    let den = BigInt::from(binomial(u64::from(world) * epr, k));
    let max_x = topk.min(world);
    let exact = (1..=max_x)
        .map(|x| {
            let x = u64::from(x);
            let mut onto = BigInt::zero();
            for i in 0..=x {
                let term = BigInt::from(binomial(x, i)) * BigInt::from(binomial((x - i) * epr, k));
                if i % 2 == 0 {
                    onto += term;
                } else {
                    onto -= term;
                }
            }
            BigRational::new(BigInt::from(binomial(u64::from(world), x)) * onto, den.clone())
        })
        .collect();
    Ok(DistinctRankDistribution::from_exact(world, topk, exact))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeBasis {
    Expected,
    ExactInstance,
}

/// Byte volumes moved by each dispatch scheme.
///
/// `v_megakernel_*` counts the source rank among destinations (one NVLink
/// transfer per distinct rank). `v_remote_*` is the alternative accounting in
/// which copies for the source rank never touch NVLink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub v_allgather: f64,
    pub v_alltoall: f64,
    pub v_megakernel_nvl: f64,
    pub v_megakernel_hbm: f64,
    pub v_remote_nvl: f64,
    pub v_remote_hbm: f64,
    pub basis: VolumeBasis,
}

pub fn volume_expected(shape: &MoEShape, spec: &HardwareSpec) -> TrafficReport {
    let world = spec.world_size.max(1);
    let n_tok = shape.n_tok as f64;
    let s = shape.token_bytes() as f64;
    let k = f64::from(shape.topk);
    let v_allgather = f64::from(world) * n_tok * s;
    let v_alltoall = n_tok * k * s;
    if world == 1 {
        return TrafficReport {
            v_allgather,
            v_alltoall,
            v_megakernel_nvl: 0.0,
            v_megakernel_hbm: v_alltoall,
            v_remote_nvl: 0.0,
            v_remote_hbm: v_alltoall,
            basis: VolumeBasis::Expected,
        };
    }
    let e_x = distinct_rank_distribution(world, shape.topk)
        .map(|d| d.expectation)
        .unwrap_or_else(|_| closed_form_expectation(world, shape.topk));
    let w = f64::from(world);
    let e_remote = (w - 1.0) * (1.0 - (1.0 - 1.0 / w).powi(shape.topk as i32));
    let v_nvl = n_tok * e_x * s;
    let v_remote = n_tok * e_remote * s;
    TrafficReport {
        v_allgather,
        v_alltoall,
        v_megakernel_nvl: v_nvl,
        v_megakernel_hbm: v_alltoall - v_nvl,
        v_remote_nvl: v_remote,
        v_remote_hbm: v_alltoall - v_remote,
        basis: VolumeBasis::Expected,
    }
}

/// `W (1 - (1 - 1/W)^k)`.
pub fn closed_form_expectation(world: u32, topk: u32) -> f64 {
    let w = f64::from(world);
    w * (1.0 - (1.0 - 1.0 / w).powi(topk as i32))
}

/// Distinct destination ranks among a token's experts.
pub fn distinct_ranks(experts: &[u32], experts_per_rank: u32) -> usize {
    let mut ranks: Vec<u32> = experts.iter().map(|e| e / experts_per_rank).collect();
    ranks.sort_unstable();
    ranks.dedup();
    ranks.len()
}

/// Volumes summed over every source rank present in `routing`.
pub fn volume_exact(routing: &RoutingInstance, shape: &MoEShape, spec: &HardwareSpec) -> TrafficReport {
    let world = spec.world_size.max(1);
    let epr = (routing.n_exp / world).max(1);
    let s = shape.token_bytes() as f64;
    let k = routing.topk as u64;
    let mut sends = 0u64;
    let mut remote_sends = 0u64;
    let mut copies = 0u64;
    for (src, _) in routing.ranks.iter().enumerate() {
        for t in 0..routing.n_tok {
            let experts = routing.token_experts(src, t);
            let d = distinct_ranks(experts, epr) as u64;
            let has_local = experts.iter().any(|&e| (e / epr) as usize == src);
            sends += d;
            remote_sends += d - u64::from(has_local);
            copies += k;
        }
    }
    let tokens = (routing.world() * routing.n_tok) as f64;
    let v_alltoall = copies as f64 * s;
    let (nvl, remote) = if world == 1 { (0, 0) } else { (sends, remote_sends) };
    TrafficReport {
        v_allgather: f64::from(world) * tokens * s,
        v_alltoall,
        v_megakernel_nvl: nvl as f64 * s,
        v_megakernel_hbm: (copies - nvl) as f64 * s,
        v_remote_nvl: remote as f64 * s,
        v_remote_hbm: (copies - remote) as f64 * s,
        basis: VolumeBasis::ExactInstance,
    }
}

/// Probability rounded to three decimal places, the precision the reference
/// occupancy table is printed at.
pub fn fixed3(p: f64) -> String {
    format!("{p:.3}")
}

/// Aligned text rendering: distinct ranks, saved sends, probability, formula.
pub fn render_table(d: &DistinctRankDistribution) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6}  {:>11}  {:>7}  {:>12}  formula",
        "ranks", "saved_sends", "P(X)", "P(X) full"
    );
    for x in 1..=d.max_ranks() {
        let _ = writeln!(
            out,
            "{:>6}  {:>11}  {:>7}  {:>12.6e}  C({},{}) {}! S2({},{}) / {}^{}",
            x,
            d.topk - x.min(d.topk),
            fixed3(d.prob(x)),
            d.prob(x),
            d.world,
            x,
            x,
            d.topk,
            x,
            d.world,
            d.topk
        );
    }
    let _ = writeln!(out, "E[X] = {:.4}", d.expectation);
    let _ = writeln!(out, "saving fraction = {:.4}", d.expected_saving_fraction);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Direct enumeration of all partitions, S(n, k) by brute force.
    fn stirling_by_enumeration(n: u32, k: u32) -> u64 {
        // count surjections of an n-set onto a k-set, divide by k!
        let mut surj = 0u64;
        let total = (k as u64).pow(n);
        for code in 0..total {
            let mut hit = 0u64;
            let mut c = code;
            for _ in 0..n {
                hit |= 1 << (c % k as u64);
                c /= k as u64;
            }
            if hit.count_ones() == k {
                surj += 1;
            }
        }
        surj / (1..=k as u64).product::<u64>()
    }

    #[test]
    fn stirling_values() {
        assert_eq!(stirling2(8, 1).unwrap(), BigUint::from(1u32));
        assert_eq!(stirling2(8, 8).unwrap(), BigUint::from(1u32));
        assert_eq!(stirling2(8, 5).unwrap(), BigUint::from(1050u32));
        assert_eq!(stirling2(0, 0).unwrap(), BigUint::from(1u32));
        assert_eq!(stirling2(5, 0).unwrap(), BigUint::zero());
        for k in 1..=7 {
            assert_eq!(stirling2(7, k).unwrap(), BigUint::from(stirling_by_enumeration(7, k)));
        }
    }

    #[test]
    fn stirling_range() {
        assert_eq!(stirling2(3, 4), Err(TrafficError::OutOfRange { n: 3, k: 4 }));
        assert!(stirling2(65, 2).is_err());
        assert!(stirling2(64, 32).is_ok());
    }

    #[test]
    fn top8_eight_ranks() {
        let d = distinct_rank_distribution(8, 8).unwrap();
        assert_eq!(fixed3(d.prob(4)), "0.170");
        // 7056000 / 8^8 = 0.420570..., which rounds up
        assert_eq!(fixed3(d.prob(5)), "0.421");
        assert_eq!(fixed3(d.prob(6)), "0.320");
        assert_eq!(fixed3(d.prob(7)), "0.067");
        // exact numerators: C(8,x) x! S2(8,x)
        assert_eq!(d.prob_exact(5), ratio(&BigUint::from(7_056_000u32), &BigUint::from(8u32).pow(8)));
        assert!(approx(d.expectation, 5.25, 0.005));
        assert!(approx(d.expected_saving_fraction, 0.34, 0.01));
    }

    #[test]
    fn single_rank_distribution() {
        for k in 1..10 {
            let d = distinct_rank_distribution(1, k).unwrap();
            assert_eq!(d.probs, vec![1.0]);
            assert_eq!(d.expectation, 1.0);
        }
    }

    #[test]
    fn numerators_sum_to_power() {
        for w in 1..=9u32 {
            for k in 1..=12u32 {
                let sum: BigUint = surjection_counts(w, k).unwrap().into_iter().sum();
                assert_eq!(sum, BigUint::from(w).pow(k), "W={w} k={k}");
                let d = distinct_rank_distribution(w, k).unwrap();
                assert!(d.total_exact().is_one());
                assert!(approx(d.expectation, closed_form_expectation(w, k), 1e-12));
            }
        }
    }

    #[test]
    fn without_replacement_sums_to_one() {
        for (w, e, k) in [(8, 32, 8), (4, 2, 8), (2, 3, 5), (8, 1, 8), (1, 9, 4)] {
            let d = distinct_rank_distribution_without_replacement(w, e, k).unwrap();
            assert!(d.total_exact().is_one(), "{w} {e} {k}");
        }
        // one expert per rank: every token hits exactly topk ranks
        let d = distinct_rank_distribution_without_replacement(8, 1, 8).unwrap();
        assert_eq!(d.prob(8), 1.0);
    }

    #[test]
    fn without_replacement_expectation_closed_form() {
        // E[X] = W (1 - C((W-1)E, k) / C(WE, k))
        let d = distinct_rank_distribution_without_replacement(8, 32, 8).unwrap();
        let miss = ratio(&binomial(224, 8), &binomial(256, 8));
        let expect = (BigRational::one() - miss) * BigInt::from(8);
        assert_eq!(d.expectation_exact(), expect);
        assert!(approx(d.expectation, 5.29465, 1e-5));
    }

    #[test]
    fn expected_volumes() {
        let spec = HardwareSpec {
            name: String::new(),
            n_sm: 132,
            p_peak: 989e12,
            bw_hbm: 3.35e12,
            bw_nvl: 200e9,
            w_sat: 1024.0,
            tau_sync: 2e-6,
            world_size: 8,
        };
        let shape = MoEShape {
            name: String::new(),
            h_dim: 2048,
            h_inter: 1024,
            n_exp: 64,
            topk: 8,
            n_tok: 4096,
            s_tok: Some(4096),
            b_m: 128,
            b_n: 256,
            mu_table: Default::default(),
        };
        let mib = 1024.0 * 1024.0;
        let v = volume_expected(&shape, &spec);
        assert_eq!(v.v_alltoall, 128.0 * mib);
        assert_eq!(v.v_allgather, 128.0 * mib);
        let ex = closed_form_expectation(8, 8);
        assert!(approx(v.v_megakernel_nvl / v.v_alltoall, ex / 8.0, 1e-12));
        assert!(approx(v.v_megakernel_nvl / mib, 84.0, 0.1));
        assert!(approx(v.v_megakernel_nvl + v.v_megakernel_hbm, v.v_alltoall, 1e-6));
        assert!(v.v_remote_nvl < v.v_megakernel_nvl);

        let v1 = volume_expected(&MoEShape { topk: 1, ..shape.clone() }, &spec);
        assert_eq!(v1.v_megakernel_nvl, v1.v_alltoall);

        let solo = volume_expected(&shape, &HardwareSpec { world_size: 1, ..spec });
        assert_eq!(solo.v_megakernel_nvl, 0.0);
        assert_eq!(solo.v_megakernel_hbm, solo.v_alltoall);
    }

    fn spec8() -> HardwareSpec {
        HardwareSpec {
            name: String::new(),
            n_sm: 132,
            p_peak: 989e12,
            bw_hbm: 3.35e12,
            bw_nvl: 200e9,
            w_sat: 1024.0,
            tau_sync: 2e-6,
            world_size: 8,
        }
    }

    fn shape8() -> MoEShape {
        MoEShape {
            name: String::new(),
            h_dim: 16,
            h_inter: 16,
            n_exp: 64,
            topk: 8,
            n_tok: 1,
            s_tok: Some(1),
            b_m: 128,
            b_n: 256,
            mu_table: Default::default(),
        }
    }

    #[test]
    fn exact_all_on_one_rank() {
        // experts 0..8 all live on rank 0
        let r = RoutingInstance::from_selections(64, 8, vec![vec![(0..8).collect()]]).unwrap();
        let v = volume_exact(&r, &shape8(), &spec8());
        assert_eq!(v.v_megakernel_nvl, 1.0);
        assert_eq!(v.v_megakernel_hbm, 7.0);
        assert_eq!(v.v_remote_nvl, 0.0);
    }

    #[test]
    fn exact_all_distinct_ranks() {
        let r = RoutingInstance::from_selections(64, 8, vec![vec![(0..8).map(|i| i * 8).collect()]]).unwrap();
        let v = volume_exact(&r, &shape8(), &spec8());
        assert_eq!(v.v_megakernel_nvl, 8.0);
        assert_eq!(v.v_megakernel_hbm, 0.0);
        assert_eq!(v.v_remote_nvl, 7.0);
        assert_eq!(v.v_megakernel_nvl + v.v_megakernel_hbm, v.v_alltoall);
    }

    #[test]
    fn table_has_one_row_per_rank_count() {
        let text = render_table(&distinct_rank_distribution(8, 8).unwrap());
        assert_eq!(text.lines().count(), 1 + 8 + 2);
        assert!(text.contains("0.421"));
    }
}
