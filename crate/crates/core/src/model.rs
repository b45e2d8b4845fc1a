//! Shared domain records: hardware description, MoE layer geometry, routing
//! tables and the tunable worker configuration.
//!
//! Hardware and shape records are read from TOML files whose keys are the
//! struct field names. Records are plain values; `validate` returns the
//! record back only when every invariant holds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
}

impl ModelError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ModelError::Invalid {
            field,
            reason: reason.into(),
        }
    }

    /// Name of the offending field, for validation failures.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ModelError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// Warp counts a worker may run with.
pub const WARP_CHOICES: [u32; 3] = [8, 16, 32];

fn positive(field: &'static str, v: f64) -> Result<(), ModelError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ModelError::invalid(field, format!("{field} must be > 0 (got {v})")))
    }
}

/// One GPU of an expert-parallel group, plus the group size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    #[serde(default)]
    pub name: String,
    /// Streaming multiprocessors per GPU.
    pub n_sm: u32,
    /// Peak BF16 throughput, FLOP/s.
    pub p_peak: f64,
    /// HBM bandwidth, bytes/s.
    pub bw_hbm: f64,
    /// Unidirectional NVLink bandwidth, bytes/s.
    pub bw_nvl: f64,
    /// Warps needed to saturate a link.
    pub w_sat: f64,
    /// Per-tile synchronization overhead, seconds.
    pub tau_sync: f64,
    /// Ranks in the expert-parallel group.
    pub world_size: u32,
}

impl HardwareSpec {
    pub fn validate(self) -> Result<Self, ModelError> {
        if self.n_sm < 2 {
            return Err(ModelError::invalid("n_sm", "n_sm must be ≥ 2"));
        }
        positive("p_peak", self.p_peak)?;
        positive("bw_hbm", self.bw_hbm)?;
        positive("bw_nvl", self.bw_nvl)?;
        positive("w_sat", self.w_sat)?;
        positive("tau_sync", self.tau_sync)?;
        if self.world_size < 1 {
            return Err(ModelError::invalid("world_size", "world_size must be ≥ 1"));
        }
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        parse_toml::<Self>(text, "<string>")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        load_toml(path.as_ref())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("hardware record serializes")
    }

    /// Key used for cache lookups.
    pub fn id(&self) -> String {
        if self.name.is_empty() {
            serde_json::to_string(self).expect("hardware record serializes")
        } else {
            self.name.clone()
        }
    }
}

/// Achieved fraction of peak FLOPS as a function of warps per worker.
#[derive(Debug, Clone, PartialEq)]
pub struct MuTable(pub BTreeMap<u32, f64>);

impl Default for MuTable {
    fn default() -> Self {
        MuTable(BTreeMap::from([(8, 0.7), (16, 0.65), (32, 0.6)]))
    }
}

impl MuTable {
    pub fn get(&self, warps: u32) -> Option<f64> {
        self.0.get(&warps).copied()
    }
}

impl Serialize for MuTable {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<String, f64> = self.0.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        m.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MuTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        let mut out = BTreeMap::new();
        for (k, v) in raw {
            let w = k
                .parse::<u32>()
                .map_err(|_| serde::de::Error::custom(format!("mu_table key {k:?} is not a warp count")))?;
            out.insert(w, v);
        }
        Ok(MuTable(out))
    }
}

fn default_b_m() -> u32 {
    128
}

fn default_b_n() -> u32 {
    256
}

/// Geometry of one MoE layer as seen by a single rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEShape {
    #[serde(default)]
    pub name: String,
    pub h_dim: u64,
    pub h_inter: u64,
    pub n_exp: u32,
    pub topk: u32,
    /// Tokens per rank before dispatch.
    pub n_tok: u64,
    /// Bytes per token row. Defaults to bf16 activations, `2 * h_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_tok: Option<u64>,
    #[serde(default = "default_b_m")]
    pub b_m: u32,
    #[serde(default = "default_b_n")]
    pub b_n: u32,
    #[serde(default)]
    pub mu_table: MuTable,
}

impl MoEShape {
    pub fn token_bytes(&self) -> u64 {
        self.s_tok.unwrap_or(2 * self.h_dim)
    }

    pub fn experts_per_rank(&self, world: u32) -> u32 {
        self.n_exp / world.max(1)
    }

    pub fn with_tokens(&self, n_tok: u64) -> Self {
        MoEShape { n_tok, ..self.clone() }
    }

    /// Checks the invariants that do not depend on the hardware.
    pub fn validate_alone(&self) -> Result<(), ModelError> {
        if self.h_dim == 0 {
            return Err(ModelError::invalid("h_dim", "h_dim must be > 0"));
        }
        if self.h_inter == 0 {
            return Err(ModelError::invalid("h_inter", "h_inter must be > 0"));
        }
        if self.n_exp == 0 {
            return Err(ModelError::invalid("n_exp", "n_exp must be > 0"));
        }
        if self.topk == 0 || self.topk > self.n_exp {
            return Err(ModelError::invalid(
                "topk",
                format!("topk must be in [1, n_exp={}] (got {})", self.n_exp, self.topk),
            ));
        }
        if self.token_bytes() == 0 {
            return Err(ModelError::invalid("s_tok", "s_tok must be > 0"));
        }
        if self.b_m == 0 {
            return Err(ModelError::invalid("b_m", "b_m must be > 0"));
        }
        if self.b_n == 0 {
            return Err(ModelError::invalid("b_n", "b_n must be > 0"));
        }
        if self.mu_table.0.is_empty() {
            return Err(ModelError::invalid("mu_table", "mu_table must not be empty"));
        }
        for (w, mu) in &self.mu_table.0 {
            if !(mu.is_finite() && *mu > 0.0 && *mu <= 1.0) {
                return Err(ModelError::invalid(
                    "mu_table",
                    format!("mu({w}) must be in (0, 1] (got {mu})"),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        parse_toml::<Self>(text, "<string>")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        load_toml(path.as_ref())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("shape record serializes")
    }

    pub fn id(&self) -> String {
        if self.name.is_empty() {
            serde_json::to_string(&self.with_tokens(0)).expect("shape record serializes")
        } else {
            self.name.clone()
        }
    }
}

pub fn validate_hardware(spec: HardwareSpec) -> Result<HardwareSpec, ModelError> {
    spec.validate()
}

/// Validates a shape against the hardware it will run on.
pub fn validate_shape(
    shape: MoEShape,
    spec: HardwareSpec,
) -> Result<(MoEShape, HardwareSpec), ModelError> {
    let spec = spec.validate()?;
    shape.validate_alone()?;
    if shape.n_exp % spec.world_size != 0 {
        return Err(ModelError::invalid(
            "n_exp",
            format!(
                "n_exp={} is not divisible by world_size={}",
                shape.n_exp, spec.world_size
            ),
        ));
    }
    Ok((shape, spec))
}

/// Post-dispatch token copies per rank under balanced routing.
///
/// With balanced routing every rank receives as many copies as it sends, so
/// the count does not depend on the world size.
pub fn derive_expanded_tokens(shape: &MoEShape, _world: u32) -> u64 {
    shape.n_tok * u64::from(shape.topk)
}

/// Routing decisions of one source rank, row-major `[n_tok, topk]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRouting {
    pub experts: Vec<u32>,
    pub gates: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingInstance {
    pub n_exp: u32,
    pub topk: u32,
    /// Tokens per rank.
    pub n_tok: usize,
    pub seed: Option<u64>,
    pub ranks: Vec<RankRouting>,
}

impl RoutingInstance {
    /// Builds a unit-gate instance from explicit per-rank selections.
    pub fn from_selections(n_exp: u32, topk: u32, per_rank: Vec<Vec<Vec<u32>>>) -> Result<Self, ModelError> {
        let n_tok = per_rank.first().map_or(0, Vec::len);
        let ranks = per_rank
            .into_iter()
            .map(|tokens| {
                let experts: Vec<u32> = tokens.into_iter().flatten().collect();
                let gates = vec![1.0 / topk as f32; experts.len()];
                RankRouting { experts, gates }
            })
            .collect();
        let inst = RoutingInstance {
            n_exp,
            topk,
            n_tok,
            seed: None,
            ranks,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn world(&self) -> usize {
        self.ranks.len()
    }

    pub fn expert(&self, rank: usize, t: usize, j: usize) -> u32 {
        self.ranks[rank].experts[t * self.topk as usize + j]
    }

    pub fn gate(&self, rank: usize, t: usize, j: usize) -> f32 {
        self.ranks[rank].gates[t * self.topk as usize + j]
    }

    pub fn token_experts(&self, rank: usize, t: usize) -> &[u32] {
        let k = self.topk as usize;
        &self.ranks[rank].experts[t * k..(t + 1) * k]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let k = self.topk as usize;
        if k == 0 {
            return Err(ModelError::invalid("topk", "topk must be ≥ 1"));
        }
        for (r, rank) in self.ranks.iter().enumerate() {
            if rank.experts.len() != self.n_tok * k || rank.gates.len() != self.n_tok * k {
                return Err(ModelError::invalid(
                    "selected_experts",
                    format!("rank {r} table is not [{}, {k}]", self.n_tok),
                ));
            }
            for (t, row) in rank.experts.chunks(k).enumerate() {
                for (j, &e) in row.iter().enumerate() {
                    if e >= self.n_exp {
                        return Err(ModelError::invalid(
                            "selected_experts",
                            format!("rank {r} token {t} slot {j}: expert {e} ≥ n_exp={}", self.n_exp),
                        ));
                    }
                    if row[..j].contains(&e) {
                        return Err(ModelError::invalid(
                            "selected_experts",
                            format!("rank {r} token {t}: expert {e} selected twice"),
                        ));
                    }
                }
            }
            if let Some(g) = rank.gates.iter().find(|g| !g.is_finite()) {
                return Err(ModelError::invalid("gate_weights", format!("rank {r}: non-finite gate {g}")));
            }
        }
        Ok(())
    }
}

/// Uniform synthetic routing: every token picks `topk` distinct experts
/// uniformly without replacement. Gate weights are uniform(0, 1) draws
/// normalized to sum to one per token.
pub fn sample_routing(shape: &MoEShape, world: u32, seed: u64) -> Result<RoutingInstance, ModelError> {
    if shape.topk > shape.n_exp {
        return Err(ModelError::invalid(
            "topk",
            format!("topk={} exceeds n_exp={}", shape.topk, shape.n_exp),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = shape.topk as usize;
    let n_tok = usize::try_from(shape.n_tok).expect("token count fits in memory");
    let ranks = (0..world)
        .map(|_| {
            let mut experts = Vec::with_capacity(n_tok * k);
            let mut gates = Vec::with_capacity(n_tok * k);
            for _ in 0..n_tok {
                experts.extend(index::sample(&mut rng, shape.n_exp as usize, k).into_iter().map(|e| e as u32));
                let raw: Vec<f32> = (0..k).map(|_| rng.gen::<f32>()).collect();
                let sum: f32 = raw.iter().sum();
                if sum > 0.0 {
                    gates.extend(raw.iter().map(|g| g / sum));
                } else {
                    gates.extend(std::iter::repeat(1.0 / k as f32).take(k));
                }
            }
            RankRouting { experts, gates }
        })
        .collect();
    Ok(RoutingInstance {
        n_exp: shape.n_exp,
        topk: shape.topk,
        n_tok,
        seed: Some(seed),
        ranks,
    })
}

/// Worker allocation for the two fused kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TuneConfig {
    pub n_disp: u32,
    pub n_relay: u32,
    pub n_comb: u32,
    pub n_red: u32,
    pub w: u32,
}

impl TuneConfig {
    pub fn new(n_disp: u32, n_relay: u32, n_comb: u32, n_red: u32, w: u32) -> Self {
        TuneConfig {
            n_disp,
            n_relay,
            n_comb,
            n_red,
            w,
        }
    }

    /// Invariants that do not involve deadlock freedom. The simulator accepts
    /// any config passing these so that violations can be observed.
    pub fn validate_structure(&self, n_sm: u32) -> Result<(), ModelError> {
        if !WARP_CHOICES.contains(&self.w) {
            return Err(ModelError::invalid("w", format!("w must be one of 8, 16, 32 (got {})", self.w)));
        }
        if self.n_disp == 0 {
            return Err(ModelError::invalid("n_disp", "n_disp must be ≥ 1"));
        }
        if self.n_comb == 0 {
            return Err(ModelError::invalid("n_comb", "n_comb must be ≥ 1"));
        }
        if self.n_red == 0 || self.n_red > n_sm {
            return Err(ModelError::invalid("n_red", format!("n_red must be in [1, {n_sm}] (got {})", self.n_red)));
        }
        Ok(())
    }

    pub fn validate(&self, n_sm: u32) -> Result<(), ModelError> {
        self.validate_structure(n_sm)?;
        if self.n_disp + self.n_relay >= n_sm {
            return Err(ModelError::invalid(
                "n_relay",
                format!(
                    "n_disp + n_relay must be < n_sm ({} + {} ≥ {n_sm}); relay workers could not all be resident",
                    self.n_disp, self.n_relay
                ),
            ));
        }
        if self.n_comb >= n_sm {
            return Err(ModelError::invalid("n_comb", format!("n_comb must be < n_sm (got {} ≥ {n_sm})", self.n_comb)));
        }
        Ok(())
    }
}

impl fmt::Display for TuneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.n_disp, self.n_relay, self.n_comb, self.n_red, self.w)
    }
}

impl FromStr for TuneConfig {
    type Err = ModelError;

    /// Parses `n_disp,n_relay,n_comb,n_red,w`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|e| ModelError::invalid("config", format!("{s:?}: {e}")))?;
        match parts.as_slice() {
            &[d, r, c, x, w] => Ok(TuneConfig::new(d, r, c, x, w)),
            _ => Err(ModelError::invalid("config", format!("{s:?}: expected 5 comma-separated values"))),
        }
    }
}

fn parse_toml<T: DeserializeOwned>(text: &str, path: &str) -> Result<T, ModelError> {
    toml::from_str(text).map_err(|e| ModelError::Parse {
        path: path.to_string(),
        message: e.to_string(),
    })
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_toml(&text, &path.display().to_string())
}
