//! Exhaustive configuration search over the worker-role grid, plus a
//! token-bucket memo so the search only reruns when the workload size
//! changes bucket.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HardwareSpec, ModelError, MoEShape, TuneConfig, WARP_CHOICES};
use crate::perf::{LatencyBreakdown, ModelContext, ModelOptions};
use crate::traffic::{volume_expected, TrafficReport};

pub const BUCKET_TOKENS: u64 = 4096;
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("n_sm = {0}: the search grid needs at least 4 SMs")]
    TooFewSms(u32),
    #[error("no feasible configuration")]
    EmptyFeasibleSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("cache {path}: {message}")]
    Cache { path: String, message: String },
}

/// Candidate lists of the grid. `n_relay` values above `max(1, n_disp / 2)`
/// are rejected per candidate, so the raw product stays rectangular.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_sm: u32,
    pub n_disp: Vec<u32>,
    pub n_comb: Vec<u32>,
    pub n_relay: Vec<u32>,
    pub n_red: Vec<u32>,
    pub w: Vec<u32>,
}

pub fn enumerate_space(spec: &HardwareSpec) -> Result<SearchSpace, TuneError> {
    let n_sm = spec.n_sm;
    if n_sm < 4 {
        return Err(TuneError::TooFewSms(n_sm));
    }
    let fours: Vec<u32> = (1..=n_sm / 4).map(|i| 4 * i).collect();
    let mut n_relay: Vec<u32> = (0..).map(|i| 1 + 4 * i).take_while(|&r| r < n_sm / 4).collect();
    if n_relay.is_empty() {
        n_relay.push(1);
    }
    let n_red = (0..(n_sm / 16).max(1)).map(|i| n_sm - 16 * i).collect();
    Ok(SearchSpace {
        n_sm,
        n_disp: fours.clone(),
        n_comb: fours,
        n_relay,
        n_red,
        w: WARP_CHOICES.to_vec(),
    })
}

impl SearchSpace {
    pub fn raw_count(&self) -> usize {
        self.n_disp.len() * self.n_comb.len() * self.n_relay.len() * self.n_red.len() * self.w.len()
    }

    /// Every grid point in (n_disp, n_comb, n_relay, n_red, w) order.
    pub fn raw(&self) -> impl Iterator<Item = TuneConfig> + '_ {
        self.n_disp.iter().flat_map(move |&d| {
            self.n_comb.iter().flat_map(move |&c| {
                self.n_relay.iter().flat_map(move |&r| {
                    self.n_red
                        .iter()
                        .flat_map(move |&x| self.w.iter().map(move |&w| TuneConfig::new(d, r, c, x, w)))
                })
            })
        })
    }

    pub fn is_feasible(&self, cfg: &TuneConfig) -> bool {
        cfg.n_relay <= (cfg.n_disp / 2).max(1) && cfg.validate(self.n_sm).is_ok()
    }

    pub fn candidates(&self) -> impl Iterator<Item = TuneConfig> + '_ {
        self.raw().filter(move |c| self.is_feasible(c))
    }

    pub fn feasible_count(&self) -> usize {
        self.candidates().count()
    }

    fn chunks(&self) -> Vec<(u32, u32)> {
        self.n_disp.iter().flat_map(|&d| self.n_comb.iter().map(move |&c| (d, c))).collect()
    }

    fn inner(&self, d: u32, c: u32) -> impl Iterator<Item = TuneConfig> + '_ {
        self.n_relay.iter().flat_map(move |&r| {
            self.n_red
                .iter()
                .flat_map(move |&x| self.w.iter().map(move |&w| TuneConfig::new(d, r, c, x, w)))
        })
    }
}

/// Order among configurations with bit-equal predicted latency.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// First in enumeration order: the n_red list runs from n_sm downward.
    #[default]
    Canonical,
    /// Numerically smallest (n_disp, n_comb, n_relay, n_red, w).
    LexMin,
}

impl TieBreak {
    pub fn cmp(self, a: &TuneConfig, b: &TuneConfig) -> Ordering {
        let head = (a.n_disp, a.n_comb, a.n_relay).cmp(&(b.n_disp, b.n_comb, b.n_relay));
        match self {
            TieBreak::Canonical => head.then(b.n_red.cmp(&a.n_red)).then(a.w.cmp(&b.w)),
            TieBreak::LexMin => head.then((a.n_red, a.w).cmp(&(b.n_red, b.w))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Worker threads; `None` uses the global rayon pool, `Some(1)` runs inline.
    pub threads: Option<usize>,
    pub model: ModelOptions,
    pub tie_break: TieBreak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub config: TuneConfig,
    pub l_min: f64,
    pub evaluated: usize,
    pub wall_time_s: f64,
    pub breakdown: LatencyBreakdown<f64>,
    pub n_tok: u64,
}

#[derive(Clone, Copy)]
struct Best {
    lat: f64,
    cfg: TuneConfig,
}

fn pick(a: Option<Best>, b: Option<Best>, tie: TieBreak) -> Option<Best> {
    match (a, b) {
        (Some(x), Some(y)) => {
            let ord = x.lat.total_cmp(&y.lat).then_with(|| tie.cmp(&x.cfg, &y.cfg));
            Some(if ord == Ordering::Greater { y } else { x })
        }
        (x, None) => x,
        (None, y) => y,
    }
}

/// Minimum of `eval` over the feasible candidates; `eval` returning `None`
/// marks a candidate the model cannot price, which is counted but skipped.
/// Returns `(best, latency, evaluated)`.
pub fn search_with_model<F>(space: &SearchSpace, opts: &SearchOptions, eval: F) -> Result<(TuneConfig, f64, usize), TuneError>
where
    F: Fn(&TuneConfig) -> Option<f64> + Sync,
{
    let chunk = |&(d, c): &(u32, u32)| {
        let mut best = None;
        let mut n = 0usize;
        for cfg in space.inner(d, c).filter(|cfg| space.is_feasible(cfg)) {
            n += 1;
            if let Some(lat) = eval(&cfg) {
                best = pick(best, Some(Best { lat, cfg }), opts.tie_break);
            }
        }
        (best, n)
    };
    let merge = |(a, na): (Option<Best>, usize), (b, nb): (Option<Best>, usize)| (pick(a, b, opts.tie_break), na + nb);
    let chunks = space.chunks();

    let (best, evaluated) = match opts.threads {
        Some(1) => chunks.iter().map(chunk).fold((None, 0), merge),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| TuneError::Pool(e.to_string()))?
            .install(|| chunks.par_iter().map(chunk).reduce(|| (None, 0), merge)),
        None => chunks.par_iter().map(chunk).reduce(|| (None, 0), merge),
    };
    let best = best.ok_or(TuneError::EmptyFeasibleSet)?;
    Ok((best.cfg, best.lat, evaluated))
}

pub fn search(spec: &HardwareSpec, shape: &MoEShape, traffic: &TrafficReport, opts: &SearchOptions) -> Result<TuneResult, TuneError> {
    let started = Instant::now();
    let space = enumerate_space(spec)?;
    let ctx = ModelContext::<f64>::new(shape, spec, traffic, opts.model);
    let (config, l_min, evaluated) = search_with_model(&space, opts, |cfg| ctx.evaluate(cfg).ok().map(|b| b.l_total))?;
    let breakdown = ctx.evaluate(&config).map_err(|_| TuneError::EmptyFeasibleSet)?;
    Ok(TuneResult {
        config,
        l_min,
        evaluated,
        wall_time_s: started.elapsed().as_secs_f64(),
        breakdown,
        n_tok: shape.n_tok,
    })
}

pub fn bucket_of(n_tok: u64) -> u64 {
    n_tok.div_ceil(BUCKET_TOKENS)
}

#[derive(Debug, Clone, Default)]
pub struct TuneCache {
    entries: BTreeMap<(String, String, u64), TuneResult>,
    searches: usize,
    pub options: SearchOptions,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    hardware: String,
    shape: String,
    bucket: u64,
    result: TuneResult,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    entries: Vec<CacheEntry>,
}

impl TuneCache {
    pub fn new(options: SearchOptions) -> Self {
        TuneCache { options, ..Default::default() }
    }

    /// Searches run by this cache instance since it was created or loaded.
    pub fn searches(&self) -> usize {
        self.searches
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, spec: &HardwareSpec, shape: &MoEShape, n_tok: u64) -> Option<&TuneResult> {
        self.entries.get(&(spec.id(), shape.id(), bucket_of(n_tok)))
    }

    pub fn load(path: impl AsRef<Path>, options: SearchOptions) -> Result<Self, TuneError> {
        let path = path.as_ref();
        let err = |message: String| TuneError::Cache { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: CacheFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if file.version != CACHE_VERSION {
            return Err(err(format!("version {} (expected {CACHE_VERSION})", file.version)));
        }
        let entries = file.entries.into_iter().map(|e| ((e.hardware, e.shape, e.bucket), e.result)).collect();
        Ok(TuneCache { entries, searches: 0, options })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TuneError> {
        let path = path.as_ref();
        let file = CacheFile {
            version: CACHE_VERSION,
            entries: self
                .entries
                .iter()
                .map(|((h, s, b), r)| CacheEntry { hardware: h.clone(), shape: s.clone(), bucket: *b, result: r.clone() })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| TuneError::Cache { path: path.display().to_string(), message: e.to_string() })?;
        std::fs::write(path, text).map_err(|e| TuneError::Cache { path: path.display().to_string(), message: e.to_string() })
    }
}

/// Cached search keyed by `ceil(n_tok / 4096)`; a miss tunes for the bucket's
/// upper edge.
pub fn tuned_lookup(cache: &mut TuneCache, spec: &HardwareSpec, shape: &MoEShape, n_tok: u64) -> Result<TuneResult, TuneError> {
    let bucket = bucket_of(n_tok.max(1));
    let key = (spec.id(), shape.id(), bucket);
    if let Some(hit) = cache.entries.get(&key) {
        return Ok(hit.clone());
    }
    let sized = shape.with_tokens(bucket * BUCKET_TOKENS);
    let traffic = volume_expected(&sized, spec);
    let result = search(spec, &sized, &traffic, &cache.options)?;
    cache.searches += 1;
    cache.entries.insert(key, result.clone());
    Ok(result)
}
