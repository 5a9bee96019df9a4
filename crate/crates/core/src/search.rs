//! Search orchestration: model-guided architecture search with simulated
//! asynchronous workers, plus evolutionary and random-exploration baselines.
//!
//! The driver owns a simulated clock. Every dispatch claims the lowest-index
//! free worker, computes the objective immediately, and schedules a completion
//! event; results become visible to the proposal machinery only in completion
//! order, so proposals see exactly what a real asynchronous worker pool would
//! have seen at that point of the run. While a job is in flight its
//! architecture is treated as pending and receives a believer value (the
//! model's posterior mean) so the acquisition discourages dispatching the
//! same region twice.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archgraph::{
    chain_arch, structural_hash, ArchError, ArchHash, Architecture, Label, NetClass,
};
use crate::evo::{self, EaRecord, EvalError, MutationConfig};
use crate::gp::{self, EiEnsemble, HyperPriorBox, ProfileMatrix};
use crate::objectives::ObjectiveSpec;
use crate::otmann::{
    distance_profile, zero_profile, ArchFeatures, DistanceError, DistanceParams, DistanceProfile,
    FeatureCache, PenaltyMatrix,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    BadConfig(String),
    #[error("{failed} of {budget} evaluations failed")]
    TooManyFailures { failed: usize, budget: usize },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Model-guided: expected improvement under the distance-kernel model,
    /// maximised by an inner evolutionary loop.
    Nasbot,
    /// Evolutionary search directly on the objective.
    Ea,
    /// Random exploration over the same mutation neighbourhoods: the inner
    /// loop runs on uniform random scores instead of the acquisition.
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Nasbot => "nasbot",
            Method::Ea => "ea",
            Method::Random => "random",
        }
    }
}

fn default_n_hyper_samples() -> usize {
    4
}

fn default_ea_n_mut() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub method: Method,
    pub class: NetClass,
    pub objective: ObjectiveSpec,
    /// Total number of objective evaluations (duplicates included).
    pub budget: usize,
    /// Simulated concurrent evaluation slots.
    pub workers: usize,
    pub seed: u64,
    #[serde(default)]
    pub distance: DistanceParams,
    #[serde(default)]
    pub mutation: MutationConfig,
    /// Posterior hyperparameter samples per proposal.
    #[serde(default = "default_n_hyper_samples")]
    pub n_hyper_samples: usize,
    /// Children per generation for the evolutionary baseline.
    #[serde(default = "default_ea_n_mut")]
    pub ea_n_mut: usize,
    /// Overrides the data-driven hyperparameter box when set.
    #[serde(default)]
    pub prior_box: Option<HyperPriorBox>,
}

impl SearchConfig {
    pub fn new(method: Method, class: NetClass, objective: ObjectiveSpec, budget: usize) -> Self {
        SearchConfig {
            method,
            class,
            objective,
            budget,
            workers: 1,
            seed: 0,
            distance: DistanceParams::default(),
            mutation: MutationConfig::default(),
            n_hyper_samples: default_n_hyper_samples(),
            ea_n_mut: default_ea_n_mut(),
            prior_box: None,
        }
    }

    fn check(&self) -> Result<(), SearchError> {
        if self.budget == 0 {
            return Err(SearchError::BadConfig("budget must be positive".into()));
        }
        if self.workers == 0 {
            return Err(SearchError::BadConfig("workers must be at least 1".into()));
        }
        if !self.objective.applies_to(self.class) {
            return Err(SearchError::BadConfig(format!(
                "objective does not apply to {} networks",
                self.class.as_str()
            )));
        }
        if self.distance.nu_grid.is_empty() {
            return Err(SearchError::BadConfig("distance grid is empty".into()));
        }
        if self.ea_n_mut == 0 {
            return Err(SearchError::BadConfig("ea_n_mut must be positive".into()));
        }
        Ok(())
    }
}

/// Acquisition-loop sizes for proposal number `t` (1-based): the inner
/// evolutionary budget grows like sqrt(t) up to a cap, and the children per
/// generation like the square root of that budget.
pub fn schedule(t: usize) -> (usize, usize) {
    let t = t.max(1) as f64;
    let n_ea = ((20.0 * t.sqrt().ceil()) as usize).min(500);
    let n_mut = ((n_ea as f64).sqrt().ceil() as usize).max(5);
    (n_ea, n_mut)
}

// ---------------------------------------------------------------------------
// Initial pool

/// The ten feed-forward networks every run starts from; they also seed the
/// acquisition optimiser. Shapes are fixed defaults: for cnn, three
/// VGG-flavoured stacks plus seven smaller blocked nets covering the label
/// palette; for mlp, ten stacks of depth 1-5 mixing rectifiers and sigmoids.
pub fn initial_pool(class: NetClass) -> Vec<Architecture> {
    match class {
        NetClass::Cnn => cnn_pool(),
        NetClass::Mlp => mlp_pool(),
    }
}

fn cnn_pool() -> Vec<Architecture> {
    use Label::*;
    let specs: Vec<Vec<(Label, Option<u32>, Option<u32>)>> = vec![
        vec![
            (Conv3, Some(32), None),
            (Conv3, Some(32), None),
            (MaxPool, None, None),
            (Conv3, Some(64), None),
            (Conv3, Some(64), None),
            (MaxPool, None, None),
            (Fc, Some(128), None),
        ],
        vec![
            (Conv3, Some(32), None),
            (MaxPool, None, None),
            (Conv3, Some(64), None),
            (MaxPool, None, None),
            (Conv3, Some(128), None),
            (MaxPool, None, None),
            (Fc, Some(256), None),
        ],
        vec![
            (Conv5, Some(32), None),
            (Conv5, Some(32), None),
            (MaxPool, None, None),
            (Conv3, Some(64), None),
            (Conv3, Some(64), None),
            (MaxPool, None, None),
            (Fc, Some(128), None),
            (Fc, Some(128), None),
        ],
        vec![(Conv3, Some(16), None), (MaxPool, None, None), (Fc, Some(64), None)],
        vec![
            (Conv5, Some(32), None),
            (MaxPool, None, None),
            (Conv5, Some(64), None),
            (Fc, Some(128), None),
        ],
        vec![
            (Conv7, Some(16), None),
            (Conv3, Some(32), None),
            (MaxPool, None, None),
            (Fc, Some(64), None),
        ],
        vec![
            (Res3, Some(32), None),
            (MaxPool, None, None),
            (Res3, Some(64), None),
            (Fc, Some(128), None),
        ],
        vec![
            (Conv3, Some(32), None),
            (AvgPool, None, None),
            (Conv5, Some(64), None),
            (Fc, Some(64), None),
        ],
        vec![
            (Conv3, Some(48), None),
            (MaxPool, None, None),
            (Conv3, Some(48), None),
            (MaxPool, None, None),
            (Fc, Some(96), None),
        ],
        vec![
            (Res5, Some(24), None),
            (Conv3, Some(48), None),
            (MaxPool, None, None),
            (Fc, Some(64), None),
        ],
    ];
    specs.into_iter().map(|s| chain_arch(NetClass::Cnn, 3, &s)).collect()
}

fn mlp_pool() -> Vec<Architecture> {
    use Label::*;
    let specs: Vec<Vec<(Label, Option<u32>, Option<u32>)>> = vec![
        vec![(Relu, Some(64), None)],
        vec![(Relu, Some(128), None), (Relu, Some(64), None)],
        vec![(Tanh, Some(128), None)],
        vec![(Relu, Some(64), None), (Tanh, Some(64), None)],
        vec![(Softplus, Some(128), None), (Relu, Some(64), None), (Relu, Some(32), None)],
        vec![(Logistic, Some(64), None), (Relu, Some(128), None)],
        vec![(Relu, Some(256), None), (Relu, Some(128), None), (Tanh, Some(64), None)],
        vec![(Elu, Some(64), None), (Elu, Some(64), None)],
        vec![(Crelu, Some(128), None), (LeakyRelu, Some(64), None)],
        vec![
            (Relu, Some(128), None),
            (Logistic, Some(64), None),
            (Relu, Some(32), None),
            (Tanh, Some(32), None),
            (Relu, Some(32), None),
        ],
    ];
    specs.into_iter().map(|s| chain_arch(NetClass::Mlp, 10, &s)).collect()
}

// ---------------------------------------------------------------------------
// Shared distance oracle

/// Features and pairwise profiles cached for the whole run. Both maps are
/// idempotent inserts keyed by structural hash, so concurrent recomputation
/// is wasteful but harmless.
struct DistanceOracle {
    features: FeatureCache,
    profiles: RwLock<PairMap>,
    zero: Arc<DistanceProfile>,
    penalty: PenaltyMatrix,
    params: DistanceParams,
}

/// Structural hashes are short hex strings; as map keys the integer form is
/// cheaper to hash and to clone.
fn hash_key(h: &ArchHash) -> u64 {
    u64::from_str_radix(&h.0, 16).expect("structural hash is hex")
}

/// Pair keys are already uniformly distributed digests, so the profile map
/// only folds them together instead of re-scrambling whole byte streams.
#[derive(Default)]
struct DigestHasher(u64);

impl std::hash::Hasher for DigestHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 ^ u64::from(b)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
}

type PairMap =
    HashMap<(u64, u64), Arc<DistanceProfile>, std::hash::BuildHasherDefault<DigestHasher>>;

impl DistanceOracle {
    fn new(class: NetClass, params: DistanceParams) -> DistanceOracle {
        DistanceOracle {
            features: FeatureCache::new(),
            profiles: RwLock::new(PairMap::default()),
            zero: Arc::new(zero_profile(&params)),
            penalty: PenaltyMatrix::default_for(class),
            params,
        }
    }

    /// Features by structural hash.  Hashing an architecture is itself not
    /// free, so hot loops should call this once per architecture and stay in
    /// feature space afterwards.
    fn feats(&self, arch: &Architecture) -> Result<Arc<ArchFeatures>, DistanceError> {
        Ok(self.features.features(arch)?)
    }

    #[cfg(test)]
    fn profile(
        &self,
        a: &Architecture,
        b: &Architecture,
    ) -> Result<Arc<DistanceProfile>, DistanceError> {
        let fa = self.feats(a)?;
        let fb = self.feats(b)?;
        self.profile_feats(&fa, &fb)
    }

    fn profile_feats(
        &self,
        fa: &ArchFeatures,
        fb: &ArchFeatures,
    ) -> Result<Arc<DistanceProfile>, DistanceError> {
        self.profile_keyed(hash_key(&fa.hash), hash_key(&fb.hash), fa, fb)
    }

    fn profile_keyed(
        &self,
        ka: u64,
        kb: u64,
        fa: &ArchFeatures,
        fb: &ArchFeatures,
    ) -> Result<Arc<DistanceProfile>, DistanceError> {
        if ka == kb {
            return Ok(Arc::clone(&self.zero));
        }
        let key = (ka.min(kb), ka.max(kb));
        if let Some(p) = self.profiles.read().unwrap().get(&key) {
            return Ok(Arc::clone(p));
        }
        let p = distance_profile(fa, fb, &self.penalty, &self.params)?;
        let mut map = self.profiles.write().unwrap();
        Ok(Arc::clone(map.entry(key).or_insert_with(|| Arc::new(p))))
    }

    /// The query's profile against each architecture of `train`, in order —
    /// the shape the model's posterior expects.
    fn query_profiles(
        &self,
        train: &[Arc<ArchFeatures>],
        query: &ArchFeatures,
    ) -> Result<Vec<Arc<DistanceProfile>>, DistanceError> {
        let kq = hash_key(&query.hash);
        train.iter().map(|t| self.profile_keyed(kq, hash_key(&t.hash), query, t)).collect()
    }
}

// ---------------------------------------------------------------------------
// Run records

#[derive(Debug, Clone)]
pub struct RunRecord {
    /// 1-based completion index.
    pub step: usize,
    pub hash: ArchHash,
    pub arch: Architecture,
    /// Objective value; NaN marks a failed evaluation.
    pub value: f64,
    /// Best finite value among completions so far (NaN before the first).
    pub best: f64,
    /// Completion time on the run clock: simulated units for synthetic
    /// objectives, measured seconds for external commands.
    pub elapsed_s: f64,
    pub worker: usize,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub history: Vec<RunRecord>,
    pub best: Option<(Architecture, f64)>,
    /// Completions that carried no value (failed or cached-failure repeats).
    pub failed: usize,
    pub pool: Vec<Architecture>,
}

pub fn history_csv(history: &[RunRecord]) -> String {
    let mut out = String::from("step,arch,value,best,elapsed_s\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.3}\n",
            r.step, r.hash, r.value, r.best, r.elapsed_s
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Driver

struct Pending {
    arch: Architecture,
    hash: ArchHash,
    /// True objective value, computed at dispatch but hidden from proposals
    /// until the completion event fires.
    value: f64,
    finish: f64,
    seq: usize,
    worker: usize,
}

struct Evaluated {
    arch: Architecture,
    hash: ArchHash,
    value: f64,
}

struct Driver<'c> {
    config: &'c SearchConfig,
    pool: Vec<Architecture>,
    pool_queue: VecDeque<Architecture>,
    proposal_queue: VecDeque<Architecture>,
    oracle: Arc<DistanceOracle>,
    rng: ChaCha8Rng,
    evaluated: Vec<Evaluated>,
    pending: Vec<Pending>,
    /// Value by hash for every architecture ever dispatched; repeats
    /// short-circuit to this instead of re-running the objective.
    value_cache: HashMap<ArchHash, f64>,
    history: Vec<RunRecord>,
    best_value: f64,
    best_arch: Option<Architecture>,
    failed: usize,
}

pub fn run(config: &SearchConfig) -> Result<SearchOutcome, SearchError> {
    config.check()?;
    let mut driver = Driver::new(config);
    driver.drive()?;
    Ok(driver.finish())
}

/// Runs the search and writes the run directory: `config.json`, the seeding
/// networks under `pool/`, `history.csv`, and `best.json`. The directory is
/// written even when the failure budget is exceeded; the error comes after.
pub fn run_to_dir(config: &SearchConfig, dir: &Path) -> Result<SearchOutcome, SearchError> {
    let outcome = run(config)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    let pool_dir = dir.join("pool");
    fs::create_dir_all(&pool_dir)?;
    for (i, arch) in outcome.pool.iter().enumerate() {
        fs::write(pool_dir.join(format!("pool_{i:02}.json")), arch.to_json())?;
    }
    fs::write(dir.join("history.csv"), history_csv(&outcome.history))?;
    let best = match &outcome.best {
        Some((arch, value)) => serde_json::json!({
            "hash": structural_hash(arch)?.0,
            "value": value,
            "arch": arch,
        }),
        None => serde_json::Value::Null,
    };
    fs::write(dir.join("best.json"), serde_json::to_string_pretty(&best)? + "\n")?;
    if outcome.failed * 5 > config.budget {
        return Err(SearchError::TooManyFailures {
            failed: outcome.failed,
            budget: config.budget,
        });
    }
    Ok(outcome)
}

impl<'c> Driver<'c> {
    fn new(config: &'c SearchConfig) -> Driver<'c> {
        let pool = initial_pool(config.class);
        Driver {
            config,
            pool_queue: pool.iter().cloned().collect(),
            pool,
            proposal_queue: VecDeque::new(),
            oracle: Arc::new(DistanceOracle::new(config.class, config.distance.clone())),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            evaluated: Vec::new(),
            pending: Vec::new(),
            value_cache: HashMap::new(),
            history: Vec::new(),
            best_value: f64::NAN,
            best_arch: None,
            failed: 0,
        }
    }

    fn drive(&mut self) -> Result<(), SearchError> {
        let budget = self.config.budget;
        let mut free: BTreeSet<usize> = (0..self.config.workers).collect();
        let mut dispatched = 0usize;
        let mut now = 0.0f64;
        while self.history.len() < budget {
            while dispatched < budget {
                let Some(&worker) = free.iter().next() else { break };
                free.remove(&worker);
                self.dispatch(worker, now, dispatched)?;
                dispatched += 1;
            }
            let next = self
                .pending
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    a.finish.total_cmp(&b.finish).then(a.seq.cmp(&b.seq))
                })
                .map(|(i, _)| i)
                .expect("budget not exhausted implies jobs in flight");
            let job = self.pending.remove(next);
            now = now.max(job.finish);
            free.insert(job.worker);
            self.complete(job);
        }
        Ok(())
    }

    fn dispatch(&mut self, worker: usize, now: f64, seq: usize) -> Result<(), SearchError> {
        let arch = self.next_arch()?;
        let hash = structural_hash(&arch)?;
        let (value, duration) = match self.value_cache.get(&hash) {
            Some(&v) => (v, if self.config.objective.is_synthetic() { 1.0 } else { 0.0 }),
            None => {
                let t0 = Instant::now();
                let value = match self.config.objective.eval(&arch) {
                    Ok(v) if v.is_finite() => v,
                    Ok(v) => {
                        log::warn!("objective returned non-finite value {v} on {hash}");
                        f64::NAN
                    }
                    Err(e) => {
                        log::warn!("objective evaluation failed on {hash}: {e}");
                        f64::NAN
                    }
                };
                let duration = if self.config.objective.is_synthetic() {
                    1.0
                } else {
                    t0.elapsed().as_secs_f64()
                };
                self.value_cache.insert(hash.clone(), value);
                (value, duration)
            }
        };
        self.pending.push(Pending { arch, hash, value, finish: now + duration, seq, worker });
        Ok(())
    }

    fn complete(&mut self, job: Pending) {
        if job.value.is_nan() {
            self.failed += 1;
        } else if !(job.value <= self.best_value) {
            self.best_value = job.value;
            self.best_arch = Some(job.arch.clone());
        }
        self.evaluated.push(Evaluated {
            arch: job.arch.clone(),
            hash: job.hash.clone(),
            value: job.value,
        });
        self.history.push(RunRecord {
            step: self.history.len() + 1,
            hash: job.hash,
            arch: job.arch,
            value: job.value,
            best: self.best_value,
            elapsed_s: job.finish,
            worker: job.worker,
        });
    }

    fn finish(self) -> SearchOutcome {
        eprintln!(
            "XXX oracle stats: {} features, {} profiles",
            self.oracle.features.len(),
            self.oracle.profiles.read().unwrap().len()
        );
        SearchOutcome {
            history: self.history,
            best: self.best_arch.map(|a| (a, self.best_value)),
            failed: self.failed,
            pool: self.pool,
        }
    }

    fn next_arch(&mut self) -> Result<Architecture, SearchError> {
        if let Some(a) = self.pool_queue.pop_front() {
            return Ok(a);
        }
        if self.evaluated.is_empty() {
            // More workers than pool members: nothing observed yet, so the
            // only sensible proposal is a mutation of a pool network.
            return Ok(self.fallback_mutation());
        }
        let arch = match self.config.method {
            Method::Ea => {
                if self.proposal_queue.is_empty() {
                    self.refill_ea_queue();
                }
                self.proposal_queue.pop_front().unwrap_or_else(|| self.fallback_mutation())
            }
            Method::Nasbot => self.propose_model_guided(),
            Method::Random => self.propose_random(),
        };
        Ok(arch)
    }

    fn refill_ea_queue(&mut self) {
        let evaluated: Vec<(Architecture, f64)> =
            self.evaluated.iter().map(|e| (e.arch.clone(), e.value)).collect();
        match ea_generation(&evaluated, self.config.ea_n_mut, &self.config.mutation, &mut self.rng)
        {
            Ok(children) => self.proposal_queue.extend(children),
            Err(e) => {
                log::warn!("evolutionary generation failed: {e}");
                let fallback = self.fallback_mutation();
                self.proposal_queue.push_back(fallback);
            }
        }
    }

    /// Mutation of the incumbent (or, before one exists, of the latest
    /// evaluated or a pool network) — the last-resort proposal.
    fn fallback_mutation(&mut self) -> Architecture {
        let base = self
            .best_arch
            .clone()
            .or_else(|| self.evaluated.last().map(|e| e.arch.clone()))
            .unwrap_or_else(|| {
                let i = self.rng.random_range(0..self.pool.len());
                self.pool[i].clone()
            });
        evo::mutate(&base, &self.config.mutation, &mut self.rng)
    }

    /// Seeds for the inner evolutionary loop: the initial pool followed by
    /// everything evaluated so far, first occurrence of each hash only.
    fn seed_list(&self) -> Vec<Architecture> {
        let mut seen = HashSet::new();
        let mut seeds = Vec::with_capacity(self.pool.len() + self.evaluated.len());
        for arch in &self.pool {
            if let Ok(h) = structural_hash(arch) {
                if seen.insert(h) {
                    seeds.push(arch.clone());
                }
            }
        }
        for e in &self.evaluated {
            if seen.insert(e.hash.clone()) {
                seeds.push(e.arch.clone());
            }
        }
        seeds
    }

    fn propose_random(&mut self) -> Architecture {
        let t = self.evaluated.len().max(1);
        let (n_ea, n_mut) = schedule(t);
        let seeds = self.seed_list();
        // Scores are drawn ahead of the loop so the evaluator stays free of
        // the run generator; the loop spends exactly n_ea evaluations.
        let scores: Vec<f64> = (0..n_ea).map(|_| self.rng.random()).collect();
        let mut cursor = 0usize;
        let eval = move |archs: &[Architecture]| -> Result<Vec<f64>, EvalError> {
            Ok(archs
                .iter()
                .map(|_| {
                    let v = scores.get(cursor).copied().unwrap_or(0.0);
                    cursor += 1;
                    v
                })
                .collect())
        };
        match evo::ea_maximize(eval, &seeds, n_ea, n_mut, &self.config.mutation, &mut self.rng) {
            Ok(outcome) => self.pick_novel(outcome.history),
            Err(e) => {
                log::warn!("random proposal loop failed: {e}");
                self.fallback_mutation()
            }
        }
    }

    fn propose_model_guided(&mut self) -> Architecture {
        match self.model_candidates() {
            Ok(ranked) => self.pick_novel(ranked),
            Err(reason) => {
                log::warn!("model proposal unavailable ({reason}); mutating the incumbent instead");
                self.fallback_mutation()
            }
        }
    }

    /// The full acquisition pipeline: fit on completed evaluations, believer
    /// values for in-flight jobs, refit including them, then maximise the
    /// sampled-hyperparameter expected improvement with the inner loop.
    fn model_candidates(&mut self) -> Result<Vec<EaRecord>, String> {
        let train: Vec<Architecture> = self
            .evaluated
            .iter()
            .filter(|e| e.value.is_finite())
            .map(|e| e.arch.clone())
            .collect();
        let y: Vec<f64> = self
            .evaluated
            .iter()
            .map(|e| e.value)
            .filter(|v| v.is_finite())
            .collect();
        if train.is_empty() {
            return Err("no successful evaluations yet".into());
        }
        let incumbent = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let oracle = Arc::clone(&self.oracle);
        let params = &self.config.distance;

        let train_feats: Vec<Arc<ArchFeatures>> = train
            .iter()
            .map(|a| oracle.feats(a))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let train_mat = Arc::new(
            ProfileMatrix::from_fn(train_feats.len(), params, |i, j| {
                oracle.profile_feats(&train_feats[i], &train_feats[j])
            })
            .map_err(|e| e.to_string())?,
        );
        let prior = match &self.config.prior_box {
            Some(b) => b.clone(),
            None => gp::default_prior_box(&train_mat, &y),
        };
        let hypers =
            gp::sample_hypers(&train_mat, &y, &prior, &mut self.rng, self.config.n_hyper_samples);
        let base = EiEnsemble::fit(Arc::clone(&train_mat), &y, &hypers).map_err(|e| e.to_string())?;

        let pending_feats: Vec<Arc<ArchFeatures>> = self
            .pending
            .iter()
            .map(|p| oracle.feats(&p.arch))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let believed = believer_values(&oracle, &train_feats, &base, &pending_feats)?;
        let mut aug_feats = train_feats;
        let mut aug_y = y;
        aug_feats.extend(pending_feats);
        aug_y.extend(believed);

        let aug_feats = Arc::new(aug_feats);
        let aug_mat = Arc::new(
            ProfileMatrix::from_fn(aug_feats.len(), params, |i, j| {
                oracle.profile_feats(&aug_feats[i], &aug_feats[j])
            })
            .map_err(|e| e.to_string())?,
        );
        let ensemble =
            Arc::new(EiEnsemble::fit(aug_mat, &aug_y, &hypers).map_err(|e| e.to_string())?);

        let t = self.evaluated.len().max(1);
        let (n_ea, n_mut) = schedule(t);
        let seeds = self.seed_list();
        let eval = {
            let oracle = Arc::clone(&oracle);
            let ensemble = Arc::clone(&ensemble);
            let aug_feats = Arc::clone(&aug_feats);
            move |archs: &[Architecture]| -> Result<Vec<f64>, EvalError> {
                Ok(archs
                    .par_iter()
                    .map(|c| {
                        let Ok(cf) = oracle.feats(c) else { return f64::NAN };
                        match oracle.query_profiles(&aug_feats, &cf) {
                            Ok(q) => ensemble.acquisition(&q, incumbent).unwrap_or(f64::NAN),
                            Err(_) => f64::NAN,
                        }
                    })
                    .collect())
            }
        };
        let outcome =
            evo::ea_maximize(eval, &seeds, n_ea, n_mut, &self.config.mutation, &mut self.rng)
                .map_err(|e| e.to_string())?;
        Ok(outcome.history)
    }

    /// Best-first walk over the inner loop's evaluations: returns the highest
    /// scorer not yet dispatched, skipping at most five known entries; after
    /// that, mutates the top scorer until something novel appears (bounded,
    /// and a still-known candidate would only short-circuit at dispatch).
    fn pick_novel(&mut self, mut ranked: Vec<EaRecord>) -> Architecture {
        ranked.sort_by(|a, b| match (a.value.is_nan(), b.value.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            (false, false) => b.value.total_cmp(&a.value),
        });
        let mut skips = 0usize;
        for r in &ranked {
            let Ok(h) = structural_hash(&r.arch) else { continue };
            if !self.value_cache.contains_key(&h) {
                return r.arch.clone();
            }
            skips += 1;
            if skips > 5 {
                break;
            }
        }
        let base = match ranked.first() {
            Some(r) => r.arch.clone(),
            None => return self.fallback_mutation(),
        };
        for _ in 0..50 {
            let cand = evo::mutate(&base, &self.config.mutation, &mut self.rng);
            if let Ok(h) = structural_hash(&cand) {
                if !self.value_cache.contains_key(&h) {
                    return cand;
                }
            }
        }
        evo::mutate(&base, &self.config.mutation, &mut self.rng)
    }
}

/// One generation of the evolutionary baseline: `n_mut` children, each a
/// compound mutation of a value-weighted draw from everything evaluated.
pub(crate) fn ea_generation(
    evaluated: &[(Architecture, f64)],
    n_mut: usize,
    config: &MutationConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Architecture>, evo::EvoError> {
    let parents = evo::select_candidates(evaluated, n_mut, rng)?;
    let children: Vec<Architecture> =
        parents.into_iter().map(|p| evo::mutate(p, config, rng)).collect();
    debug_assert_eq!(children.len(), n_mut);
    Ok(children)
}

/// Believer values for in-flight architectures: the posterior mean of the
/// model fitted without them.
fn believer_values(
    oracle: &DistanceOracle,
    train: &[Arc<ArchFeatures>],
    prior_model: &EiEnsemble,
    pending: &[Arc<ArchFeatures>],
) -> Result<Vec<f64>, String> {
    pending
        .iter()
        .map(|f| {
            let q = oracle.query_profiles(train, f).map_err(|e| e.to_string())?;
            prior_model.mean_posterior(&q).map_err(|e| e.to_string())
        })
        .collect()
}
