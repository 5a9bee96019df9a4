//! Architecture modifiers and the evolutionary maximiser.
//!
//! Nine one-step modifiers rewrite an architecture into a nearby one: four
//! change unit counts only, five change the graph structure.  The compound
//! mutation operator chains a random number of successful one-step
//! applications.  Every emitted architecture passes the full validation
//! rules; a modifier that cannot produce a legal result rejects instead.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archgraph::{
    image_sizes, limits, structural_hash, validate_with, ArchHash, Architecture, Graph, Label,
    Layer, NetClass, Role, ValidateOpts, CNN_PROCESSING, DEFAULT_INPUT_SIZE, MLP_PROCESSING,
};
use crate::objectives::ObjectiveError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModifierKind {
    DecSingle,
    DecEnMasse,
    IncSingle,
    IncEnMasse,
    DupPath,
    RemoveLayer,
    Skip,
    SwapLabel,
    Wedge,
}

impl ModifierKind {
    pub const ALL: [ModifierKind; 9] = [
        ModifierKind::DecSingle,
        ModifierKind::DecEnMasse,
        ModifierKind::IncSingle,
        ModifierKind::IncEnMasse,
        ModifierKind::DupPath,
        ModifierKind::RemoveLayer,
        ModifierKind::Skip,
        ModifierKind::SwapLabel,
        ModifierKind::Wedge,
    ];
    /// The four that touch unit counts only.
    pub const UNITS_ONLY: [ModifierKind; 4] = [
        ModifierKind::DecSingle,
        ModifierKind::DecEnMasse,
        ModifierKind::IncSingle,
        ModifierKind::IncEnMasse,
    ];
    /// The five that rewrite the graph.
    pub const STRUCTURE_ONLY: [ModifierKind; 5] = [
        ModifierKind::DupPath,
        ModifierKind::RemoveLayer,
        ModifierKind::Skip,
        ModifierKind::SwapLabel,
        ModifierKind::Wedge,
    ];
}

/// Compound-mutation settings.  `step_probabilities[k]` is the probability of
/// applying k+1 one-step modifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationConfig {
    pub step_probabilities: Vec<f64>,
    /// Retries per step before giving up on that step.
    pub max_attempts: usize,
    /// Modifier pool; shrink to `UNITS_ONLY`/`STRUCTURE_ONLY` for ablations.
    pub kinds: Vec<ModifierKind>,
    /// Image edge length a cnn input receives, used to validate candidates.
    pub input_size: u32,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            step_probabilities: vec![0.5, 0.25, 0.125, 0.075, 0.05],
            max_attempts: 20,
            kinds: ModifierKind::ALL.to_vec(),
            input_size: DEFAULT_INPUT_SIZE,
        }
    }
}

/// Objective failure carrying the architecture that caused it.
#[derive(Debug, Error)]
#[error("objective evaluation failed on {hash}: {source}")]
pub struct EvalError {
    pub hash: ArchHash,
    pub arch: Box<Architecture>,
    #[source]
    pub source: ObjectiveError,
}

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("{kind:?} not applicable: {reason}")]
    Rejected { kind: ModifierKind, reason: String },
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn rejected(kind: ModifierKind, reason: impl Into<String>) -> EvoError {
    EvoError::Rejected { kind, reason: reason.into() }
}

// ---------------------------------------------------------------------------
// Shared helpers

/// Unit step: an eighth, rounded up so something always changes.
fn unit_delta(units: u32) -> u32 {
    units.div_ceil(8)
}

fn stepped_units(units: u32, increase: bool) -> u32 {
    let d = unit_delta(units);
    let next = if increase { units.saturating_add(d) } else { units.saturating_sub(d) };
    next.clamp(limits::MIN_UNITS, limits::MAX_UNITS)
}

/// Effective unit count seen at each layer index: own units where present,
/// the input channel count at ip, otherwise passed through from the parents
/// (averaged at merges).
fn effective_units(arch: &Architecture, g: &Graph) -> Vec<f64> {
    let mut eff = vec![0.0; g.n];
    for &i in &g.topo {
        let l = &arch.layers[i];
        eff[i] = if l.label == Label::Ip {
            arch.input_channels as f64
        } else if let Some(u) = l.units {
            u as f64
        } else {
            let ps = &g.parents[i];
            ps.iter().map(|&p| eff[p]).sum::<f64>() / ps.len().max(1) as f64
        };
    }
    eff
}

fn fresh_id(arch: &Architecture) -> u32 {
    arch.layers.iter().map(|l| l.id).max().unwrap_or(0) + 1
}

/// How many layers the en-masse operators touch, tiered by network size.
fn en_masse_count(n_layers: usize) -> usize {
    if n_layers <= 4 {
        n_layers.div_ceil(2)
    } else if n_layers <= 8 {
        n_layers.div_ceil(4)
    } else {
        n_layers.div_ceil(8)
    }
}

/// First `amount` entries of a partial Fisher–Yates shuffle.
fn sample_distinct(len: usize, amount: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let take = amount.min(len);
    for i in 0..take {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

fn check_valid(arch: Architecture, kind: ModifierKind, input_size: u32) -> Result<Architecture, EvoError> {
    let violations = validate_with(&arch, ValidateOpts { input_size });
    match violations.first() {
        None => Ok(arch),
        Some(v) => Err(rejected(kind, format!("result fails validation: {v}"))),
    }
}

// ---------------------------------------------------------------------------
// The nine modifiers

/// Applies one randomly-instantiated modifier of the given kind.  The result
/// validates under the given input size; otherwise the application rejects.
pub fn apply_modifier(
    arch: &Architecture,
    kind: ModifierKind,
    input_size: u32,
    rng: &mut impl Rng,
) -> Result<Architecture, EvoError> {
    let g = Graph::build(arch)
        .map_err(|e| rejected(kind, format!("input does not index: {e}")))?;
    let out = match kind {
        ModifierKind::DecSingle => change_units(arch, kind, false, 1, rng)?,
        ModifierKind::IncSingle => change_units(arch, kind, true, 1, rng)?,
        ModifierKind::DecEnMasse => {
            change_units(arch, kind, false, en_masse_count(arch.layers.len()), rng)?
        }
        ModifierKind::IncEnMasse => {
            change_units(arch, kind, true, en_masse_count(arch.layers.len()), rng)?
        }
        ModifierKind::DupPath => dup_path(arch, &g, rng)?,
        ModifierKind::RemoveLayer => remove_layer(arch, &g, rng)?,
        ModifierKind::Skip => skip(arch, &g, input_size, rng)?,
        ModifierKind::SwapLabel => swap_label(arch, &g, rng)?,
        ModifierKind::Wedge => wedge(arch, &g, rng)?,
    };
    check_valid(out, kind, input_size)
}

fn change_units(
    arch: &Architecture,
    kind: ModifierKind,
    increase: bool,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Architecture, EvoError> {
    // A layer qualifies when the step actually moves its unit count.
    let movable: Vec<usize> = arch
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            l.label.role() == Role::Processing
                && l.units.is_some_and(|u| stepped_units(u, increase) != u)
        })
        .map(|(i, _)| i)
        .collect();
    if movable.is_empty() {
        return Err(rejected(kind, "no layer can move its unit count"));
    }
    let picks = sample_distinct(movable.len(), count, rng);
    let mut out = arch.clone();
    for p in picks {
        let l = &mut out.layers[movable[p]];
        l.units = Some(stepped_units(l.units.unwrap(), increase));
    }
    Ok(out)
}

fn dup_path(arch: &Architecture, g: &Graph, rng: &mut impl Rng) -> Result<Architecture, EvoError> {
    let kind = ModifierKind::DupPath;
    // Random forward walk; the interior of the walk is copied between the
    // (retained) endpoints.
    let starts: Vec<usize> =
        (0..g.n).filter(|&i| !g.children[i].is_empty()).collect();
    if starts.is_empty() {
        return Err(rejected(kind, "no layer has children"));
    }
    let mut cur = starts[rng.random_range(0..starts.len())];
    let mut walk = vec![cur];
    loop {
        let ch = &g.children[cur];
        if ch.is_empty() {
            break;
        }
        cur = ch[rng.random_range(0..ch.len())];
        walk.push(cur);
        if walk.len() >= 3 && rng.random_bool(0.5) {
            break;
        }
    }
    if walk.len() < 3 {
        return Err(rejected(kind, "walk stopped before an interior layer"));
    }
    let (u, v) = (walk[0], *walk.last().unwrap());
    let interior = &walk[1..walk.len() - 1];

    let mut out = arch.clone();
    let mut next_id = fresh_id(arch);
    let mut prev_id = arch.layers[u].id;
    for &i in interior {
        let mut copy = arch.layers[i].clone();
        copy.id = next_id;
        next_id += 1;
        out.edges.push((prev_id, copy.id));
        prev_id = copy.id;
        out.layers.push(copy);
    }
    out.edges.push((prev_id, arch.layers[v].id));
    Ok(out)
}

fn remove_layer(arch: &Architecture, g: &Graph, rng: &mut impl Rng) -> Result<Architecture, EvoError> {
    let kind = ModifierKind::RemoveLayer;
    let removable: Vec<usize> = (0..g.n)
        .filter(|&i| arch.layers[i].label.role() == Role::Processing)
        .collect();
    if removable.is_empty() {
        return Err(rejected(kind, "no processing layer to remove"));
    }
    let r = removable[rng.random_range(0..removable.len())];
    let rid = arch.layers[r].id;

    let mut out = arch.clone();
    out.layers.retain(|l| l.id != rid);
    out.edges.retain(|&(a, b)| a != rid && b != rid);
    // Reconnect every parent to every child unless that edge already exists.
    for &p in &g.parents[r] {
        for &c in &g.children[r] {
            let e = (arch.layers[p].id, arch.layers[c].id);
            if !out.edges.contains(&e) {
                out.edges.push(e);
            }
        }
    }
    Ok(out)
}

fn skip(
    arch: &Architecture,
    g: &Graph,
    input_size: u32,
    rng: &mut impl Rng,
) -> Result<Architecture, EvoError> {
    let kind = ModifierKind::Skip;
    let sizes = if arch.class == NetClass::Cnn {
        Some(image_sizes(arch, input_size).map_err(|e| rejected(kind, format!("sizes: {e}")))?)
    } else {
        None
    };
    let pos_in_topo: Vec<usize> = {
        let mut pos = vec![0; g.n];
        for (rank, &i) in g.topo.iter().enumerate() {
            pos[i] = rank;
        }
        pos
    };
    let has_edge = |a: usize, b: usize| g.children[a].contains(&b);

    // Ordered pairs (u, v): u any non-terminal source with spare out-degree,
    // v a later processing layer with spare in-degree, not already connected.
    let mut pairs = Vec::new();
    for u in 0..g.n {
        let lu = arch.layers[u].label;
        if lu == Label::Op || lu.role() == Role::Decision || g.children[u].len() >= limits::MAX_DEGREE
        {
            continue;
        }
        for v in 0..g.n {
            let lv = arch.layers[v].label;
            if lv.role() != Role::Processing
                || pos_in_topo[v] <= pos_in_topo[u]
                || has_edge(u, v)
                || g.parents[v].len() >= limits::MAX_DEGREE
            {
                continue;
            }
            pairs.push((u, v));
        }
    }
    if pairs.is_empty() {
        return Err(rejected(kind, "every admissible pair is already connected"));
    }
    let (u, v) = pairs[rng.random_range(0..pairs.len())];

    let mut out = arch.clone();
    let (uid, vid) = (arch.layers[u].id, arch.layers[v].id);
    match &sizes {
        None => out.edges.push((uid, vid)),
        Some(sz) => {
            // Bridge any size gap with stride-2 average pools, one per halving.
            let mut s = sz[u];
            let target = sz[g.parents[v][0]];
            if s < target {
                return Err(rejected(kind, "source image is smaller than the target's input"));
            }
            let mut prev = uid;
            let mut next_id = fresh_id(arch);
            while s > target {
                if s <= 1 {
                    return Err(rejected(kind, "cannot halve a unit-size image"));
                }
                s = s.div_ceil(2);
                let bridge = Layer::new(next_id, Label::AvgPool);
                out.edges.push((prev, bridge.id));
                prev = bridge.id;
                next_id += 1;
                out.layers.push(bridge);
            }
            if s != target {
                return Err(rejected(kind, "image sizes cannot be equalised by halving"));
            }
            out.edges.push((prev, vid));
        }
    }
    Ok(out)
}

fn swap_label(arch: &Architecture, g: &Graph, rng: &mut impl Rng) -> Result<Architecture, EvoError> {
    let kind = ModifierKind::SwapLabel;
    let procs: Vec<usize> = (0..g.n)
        .filter(|&i| arch.layers[i].label.role() == Role::Processing)
        .collect();
    if procs.is_empty() {
        return Err(rejected(kind, "no processing layer to relabel"));
    }
    let i = procs[rng.random_range(0..procs.len())];
    let old = arch.layers[i].label;
    let palette: &[Label] = match arch.class {
        NetClass::Cnn => &CNN_PROCESSING,
        NetClass::Mlp => &MLP_PROCESSING,
    };
    let options: Vec<Label> = palette.iter().copied().filter(|&l| l != old).collect();
    let new = options[rng.random_range(0..options.len())];

    let mut out = arch.clone();
    let eff = effective_units(arch, g);
    let l = &mut out.layers[i];
    l.label = new;
    l.units = if new.has_units() {
        match l.units {
            Some(u) => Some(u),
            // Gaining units (pool → conv/fc): adopt the pass-through width.
            None => Some((eff[i].round() as u32).clamp(limits::MIN_UNITS, limits::MAX_UNITS)),
        }
    } else {
        None
    };
    l.stride = if new.takes_stride() {
        match (old.takes_stride(), old.is_pool()) {
            (true, _) => l.stride,
            // A pool halved the image; stride 2 keeps downstream sizes intact.
            (_, true) => Some(2),
            _ => None,
        }
    } else {
        None
    };
    Ok(out)
}

fn wedge(arch: &Architecture, g: &Graph, rng: &mut impl Rng) -> Result<Architecture, EvoError> {
    let kind = ModifierKind::Wedge;
    // Any edge except those into op can take a new layer in the middle.
    let candidates: Vec<(u32, u32)> = arch
        .edges
        .iter()
        .copied()
        .filter(|&(_, v)| arch.layer(v).is_some_and(|l| l.label != Label::Op))
        .collect();
    if candidates.is_empty() {
        return Err(rejected(kind, "no edge can be split"));
    }
    let (uid, vid) = candidates[rng.random_range(0..candidates.len())];
    let palette: &[Label] = match arch.class {
        // Stride-1 convolutions keep the image size, so any edge stays legal.
        NetClass::Cnn => &[Label::Conv3, Label::Conv5, Label::Conv7],
        NetClass::Mlp => &MLP_PROCESSING,
    };
    let label = palette[rng.random_range(0..palette.len())];

    let eff = effective_units(arch, g);
    let idx_of = |id: u32| arch.layers.iter().position(|l| l.id == id).unwrap();
    let units = ((eff[idx_of(uid)] + eff[idx_of(vid)]) / 2.0).round() as u32;

    let mut out = arch.clone();
    let mut mid = Layer::new(fresh_id(arch), label);
    mid.units = Some(units.clamp(limits::MIN_UNITS, limits::MAX_UNITS));
    if label.takes_stride() {
        mid.stride = Some(1);
    }
    let e = out
        .edges
        .iter()
        .position(|&p| p == (uid, vid))
        .expect("edge came from this architecture");
    out.edges.remove(e);
    out.edges.push((uid, mid.id));
    out.edges.push((mid.id, vid));
    out.layers.push(mid);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Compound mutation

/// What a single compound mutation did.
#[derive(Debug, Clone, PartialEq)]
pub struct MutationTrace {
    /// Step count drawn from the configured distribution.
    pub k_drawn: usize,
    /// Modifiers that actually applied, in order (may be shorter than drawn).
    pub applied: Vec<ModifierKind>,
}

fn draw_step_count(config: &MutationConfig, rng: &mut impl Rng) -> usize {
    let total: f64 = config.step_probabilities.iter().sum();
    let mut u: f64 = rng.random::<f64>() * total;
    for (i, &p) in config.step_probabilities.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i + 1;
        }
    }
    config.step_probabilities.len().max(1)
}

/// Compound mutation: draws a step count, then chains that many successful
/// one-step modifiers, retrying failed applications up to
/// `config.max_attempts` times per step.  Never fails: at worst the input
/// comes back unchanged (after a run of rejections).
pub fn mutate_traced(
    arch: &Architecture,
    config: &MutationConfig,
    rng: &mut impl Rng,
) -> (Architecture, MutationTrace) {
    let k = draw_step_count(config, rng);
    let mut current = arch.clone();
    let mut applied = Vec::with_capacity(k);
    'steps: for _ in 0..k {
        for _ in 0..config.max_attempts {
            let kind = config.kinds[rng.random_range(0..config.kinds.len())];
            match apply_modifier(&current, kind, config.input_size, rng) {
                Ok(next) => {
                    current = next;
                    applied.push(kind);
                    continue 'steps;
                }
                Err(_) => continue,
            }
        }
        break; // this step is hopeless; keep what we have
    }
    (current, MutationTrace { k_drawn: k, applied })
}

pub fn mutate(arch: &Architecture, config: &MutationConfig, rng: &mut impl Rng) -> Architecture {
    mutate_traced(arch, config, rng).0
}

// ---------------------------------------------------------------------------
// Selection and the EA loop

/// Indices of `n` draws (with replacement) from softmax selection
/// π(i) ∝ exp(value_i / σ), σ the sample standard deviation of the finite
/// values.  Degenerate spreads fall back to the uniform distribution.
fn select_indices(values: &[f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(!values.is_empty());
    let finite: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_finite()).collect();
    if finite.is_empty() {
        return (0..n).map(|_| rng.random_range(0..values.len())).collect();
    }
    let sigma = if finite.len() >= 2 {
        let mean = finite.iter().map(|&i| values[i]).sum::<f64>() / finite.len() as f64;
        let ss: f64 = finite.iter().map(|&i| (values[i] - mean).powi(2)).sum();
        (ss / (finite.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    if !(sigma > 0.0) {
        return (0..n).map(|_| finite[rng.random_range(0..finite.len())]).collect();
    }

    // Softmax weights, shifted so the exponent never overflows.
    let vmax = finite.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = finite.iter().map(|&i| ((values[i] - vmax) / sigma).exp()).collect();
    let total: f64 = weights.iter().sum();
    (0..n)
        .map(|_| {
            let mut t: f64 = rng.random::<f64>() * total;
            for (w, &i) in weights.iter().zip(&finite) {
                t -= w;
                if t <= 0.0 {
                    return i;
                }
            }
            *finite.last().unwrap()
        })
        .collect()
}

/// `n` draws (with replacement) favouring high values, softmax-weighted with
/// the sample standard deviation as temperature; uniform when all values tie.
pub fn select_candidates<'a>(
    evaluated: &'a [(Architecture, f64)],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a Architecture>, EvoError> {
    if evaluated.is_empty() {
        return Err(EvoError::EmptyPool);
    }
    let values: Vec<f64> = evaluated.iter().map(|(_, v)| v).copied().collect();
    Ok(select_indices(&values, n, rng).into_iter().map(|i| &evaluated[i].0).collect())
}

/// One evaluated architecture, in evaluation order.
#[derive(Debug, Clone)]
pub struct EaRecord {
    pub arch: Architecture,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct EaOutcome {
    pub best: Architecture,
    pub best_value: f64,
    /// Every evaluation in order, duplicates included.
    pub history: Vec<EaRecord>,
}

/// Evolutionary maximisation: evaluate the initial pool, then repeat
/// select → mutate → evaluate until `total_evals` evaluations have been
/// spent.  The evaluator receives whole generations so it may parallelise;
/// values it returns may be NaN (such entries are never selected as best and
/// are excluded from selection pressure).
pub fn ea_maximize(
    mut eval: impl FnMut(&[Architecture]) -> Result<Vec<f64>, EvalError>,
    init_pool: &[Architecture],
    total_evals: usize,
    n_mut: usize,
    config: &MutationConfig,
    rng: &mut impl Rng,
) -> Result<EaOutcome, EvoError> {
    if init_pool.is_empty() || n_mut == 0 {
        return Err(EvoError::EmptyPool);
    }
    let mut history: Vec<EaRecord> = Vec::with_capacity(total_evals);

    let first: Vec<Architecture> =
        init_pool.iter().take(total_evals.max(1)).cloned().collect();
    let values = eval(&first)?;
    history.extend(first.into_iter().zip(values).map(|(arch, value)| EaRecord { arch, value }));

    while history.len() < total_evals {
        let n = n_mut.min(total_evals - history.len());
        let values: Vec<f64> = history.iter().map(|r| r.value).collect();
        let parents = select_indices(&values, n, rng);
        let children: Vec<Architecture> =
            parents.iter().map(|&i| mutate(&history[i].arch, config, rng)).collect();
        let values = eval(&children)?;
        history.extend(children.into_iter().zip(values).map(|(arch, value)| EaRecord { arch, value }));
    }

    let best_idx = history
        .iter()
        .enumerate()
        .filter(|(_, r)| r.value.is_finite())
        .max_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(EaOutcome {
        best: history[best_idx].arch.clone(),
        best_value: history[best_idx].value,
        history,
    })
}

/// Convenience evaluator adapter for plain per-architecture objectives.
pub fn batched(
    mut g: impl FnMut(&Architecture) -> Result<f64, ObjectiveError>,
) -> impl FnMut(&[Architecture]) -> Result<Vec<f64>, EvalError> {
    move |archs: &[Architecture]| {
        archs
            .iter()
            .map(|a| {
                g(a).map_err(|source| EvalError {
                    hash: structural_hash(a).unwrap_or(ArchHash(String::from("unhashable"))),
                    arch: Box::new(a.clone()),
                    source,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archgraph::{chain_arch, validate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp_chain(units: &[u32]) -> Architecture {
        let spec: Vec<(Label, Option<u32>, Option<u32>)> =
            units.iter().map(|&u| (Label::Relu, Some(u), None)).collect();
        chain_arch(NetClass::Mlp, 8, &spec)
    }

    fn cnn_chain() -> Architecture {
        chain_arch(
            NetClass::Cnn,
            3,
            &[
                (Label::Conv3, Some(16), None),
                (Label::MaxPool, None, None),
                (Label::Conv3, Some(32), None),
            ],
        )
    }

    fn apply_until(
        arch: &Architecture,
        kind: ModifierKind,
        tries: u64,
        pred: impl Fn(&Architecture) -> bool,
    ) -> Option<Architecture> {
        for seed in 0..tries {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Ok(out) = apply_modifier(arch, kind, DEFAULT_INPUT_SIZE, &mut rng) {
                assert!(validate(&out).is_empty(), "modifier output must validate");
                if pred(&out) {
                    return Some(out);
                }
            }
        }
        None
    }

    #[test]
    fn unit_steps_follow_the_eighth_rule() {
        let arch = mlp_chain(&[16]);
        let up = apply_until(&arch, ModifierKind::IncSingle, 5, |_| true).unwrap();
        assert_eq!(up.layers.iter().find(|l| l.label == Label::Relu).unwrap().units, Some(18));
        let down = apply_until(&arch, ModifierKind::DecSingle, 5, |_| true).unwrap();
        assert_eq!(down.layers.iter().find(|l| l.label == Label::Relu).unwrap().units, Some(14));

        // Saturated layers are not movable.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let at_max = mlp_chain(&[1024]);
        assert!(matches!(
            apply_modifier(&at_max, ModifierKind::IncSingle, 32, &mut rng),
            Err(EvoError::Rejected { .. })
        ));
        let at_min = mlp_chain(&[8]);
        assert!(matches!(
            apply_modifier(&at_min, ModifierKind::DecSingle, 32, &mut rng),
            Err(EvoError::Rejected { .. })
        ));
    }

    #[test]
    fn unit_changes_leave_the_graph_alone() {
        let arch = mlp_chain(&[16, 32, 64]);
        let out = apply_until(&arch, ModifierKind::IncSingle, 3, |_| true).unwrap();
        assert_eq!(out.edges, arch.edges);
        let labels: Vec<Label> = out.layers.iter().map(|l| l.label).collect();
        let orig: Vec<Label> = arch.layers.iter().map(|l| l.label).collect();
        assert_eq!(labels, orig);
        let changed = out
            .layers
            .iter()
            .zip(&arch.layers)
            .filter(|(a, b)| a.units != b.units)
            .count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn en_masse_touches_the_tiered_layer_count() {
        // 7 processing + ip + linear + op = 10 layers → ceil(10/8) = 2.
        let arch = mlp_chain(&[16, 16, 16, 16, 16, 16, 16]);
        assert_eq!(arch.layers.len(), 10);
        let out = apply_until(&arch, ModifierKind::IncEnMasse, 3, |_| true).unwrap();
        let changed = out
            .layers
            .iter()
            .zip(&arch.layers)
            .filter(|(a, b)| a.units != b.units)
            .count();
        assert_eq!(changed, 2);

        // 1 processing + 3 fixed = 4 layers → ceil(4/2) = 2, clamped to the
        // single movable layer.
        let small = mlp_chain(&[16]);
        let out = apply_until(&small, ModifierKind::DecEnMasse, 3, |_| true).unwrap();
        let changed = out
            .layers
            .iter()
            .zip(&small.layers)
            .filter(|(a, b)| a.units != b.units)
            .count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn dup_path_copies_interior_layers() {
        let arch = mlp_chain(&[16, 32, 64]);
        let out = apply_until(&arch, ModifierKind::DupPath, 50, |o| {
            o.layers.len() > arch.layers.len()
        })
        .expect("some walk must duplicate");
        assert!(out.edges.len() > arch.edges.len());
        // Originals all still present.
        for l in &arch.layers {
            assert!(out.layers.iter().any(|m| m.id == l.id && m.label == l.label));
        }
    }

    #[test]
    fn remove_layer_shrinks_and_reconnects() {
        let arch = mlp_chain(&[16, 32, 64]);
        let out = apply_until(&arch, ModifierKind::RemoveLayer, 10, |_| true).unwrap();
        assert_eq!(out.layers.len(), arch.layers.len() - 1);

        // The only processing layer cannot be removed.
        let minimal = mlp_chain(&[16]);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert!(matches!(
                apply_modifier(&minimal, ModifierKind::RemoveLayer, 32, &mut rng),
                Err(EvoError::Rejected { .. })
            ));
        }
    }

    #[test]
    fn skip_connects_forward_and_bridges_cnn_sizes() {
        let mlp = mlp_chain(&[16, 32, 64, 64]);
        let out = apply_until(&mlp, ModifierKind::Skip, 20, |_| true).unwrap();
        assert_eq!(out.edges.len(), mlp.edges.len() + 1);

        // conv3 → max-pool → conv3: a skip across the pool needs one
        // stride-2 average pool to land at the matching image size.
        let cnn = cnn_chain();
        let bridged = apply_until(&cnn, ModifierKind::Skip, 100, |o| {
            o.layers.iter().filter(|l| l.label == Label::AvgPool).count() > 0
        });
        let bridged = bridged.expect("some skip must need a bridge");
        assert!(bridged.layers.len() > cnn.layers.len());
    }

    #[test]
    fn swap_label_relabels_one_processing_layer() {
        let mlp = mlp_chain(&[16, 32]);
        let out = apply_until(&mlp, ModifierKind::SwapLabel, 5, |_| true).unwrap();
        let diffs: Vec<(&Layer, &Layer)> = out
            .layers
            .iter()
            .zip(&mlp.layers)
            .filter(|(a, b)| a.label != b.label)
            .collect();
        assert_eq!(diffs.len(), 1);
        assert_eq!(diffs[0].0.units, diffs[0].1.units, "mlp swaps keep units");

        // A pool that becomes convolutional must adopt stride 2 and a width.
        let cnn = cnn_chain();
        let swapped = apply_until(&cnn, ModifierKind::SwapLabel, 200, |o| {
            !o.layers.iter().any(|l| l.label == Label::MaxPool)
        });
        if let Some(s) = swapped {
            let new = s
                .layers
                .iter()
                .zip(&cnn.layers)
                .find(|(a, b)| a.label != b.label)
                .map(|(a, _)| a)
                .unwrap();
            if new.label.takes_stride() {
                assert_eq!(new.stride, Some(2));
                assert!(new.units.is_some());
            }
        }
    }

    #[test]
    fn wedge_averages_endpoint_units() {
        let cnn = cnn_chain();
        let wedged = apply_until(&cnn, ModifierKind::Wedge, 300, |o| {
            // New layer sits between the two convolutions' widths.
            o.layers.iter().any(|l| l.units == Some(24))
        });
        // (16 + 32) / 2 = 24 whenever the wedge lands on the pool→conv edge
        // (the pool passes 16 through).
        assert!(wedged.is_some(), "some wedge must average 16 and 32 to 24");
    }

    #[test]
    fn mutate_matches_step_distribution_and_is_deterministic() {
        let arch = mlp_chain(&[16, 32]);
        let config = MutationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 20_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let (_, trace) = mutate_traced(&arch, &config, &mut rng);
            counts[trace.k_drawn - 1] += 1;
        }
        for (i, &p) in config.step_probabilities.iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            assert!(
                (freq - p).abs() < 0.02,
                "step count {} frequency {freq} vs configured {p}",
                i + 1
            );
        }

        let a = mutate(&arch, &config, &mut ChaCha8Rng::seed_from_u64(99));
        let b = mutate(&arch, &config, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
    }

    #[test]
    fn mutation_closure_on_both_classes() {
        let config = MutationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut current = cnn_chain();
        for _ in 0..350 {
            current = mutate(&current, &config, &mut rng);
            assert!(validate(&current).is_empty(), "cnn mutation escaped the constraints");
        }
        let mut current = mlp_chain(&[16, 32]);
        for _ in 0..350 {
            current = mutate(&current, &config, &mut rng);
            assert!(validate(&current).is_empty(), "mlp mutation escaped the constraints");
        }
    }

    #[test]
    fn selection_prefers_high_values_exponentially() {
        // Values engineered so the sample standard deviation is exactly 1:
        // {0, 1, 0.5+d, 0.5-d} with d = sqrt(1.25).  Each architecture gets a
        // distinct width so draws can be attributed.
        let d = 1.25_f64.sqrt();
        let values = [0.0, 1.0, 0.5 + d, 0.5 - d];
        let widths = [16, 32, 64, 128];
        let pool: Vec<(Architecture, f64)> =
            widths.iter().zip(values).map(|(&w, v)| (mlp_chain(&[w]), v)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for pick in select_candidates(&pool, n, &mut rng).unwrap() {
            let w = pick.layers.iter().find_map(|l| l.units).unwrap();
            counts[widths.iter().position(|&x| x == w).unwrap()] += 1;
        }
        // π(1)/π(0) should be e since those values differ by exactly σ.
        let ratio = counts[1] as f64 / counts[0] as f64;
        assert!(
            (ratio - std::f64::consts::E).abs() < 0.15,
            "selection ratio {ratio} should be close to e"
        );

        // Zero spread → uniform.
        let flat = vec![2.0; 4];
        let idx = select_indices(&flat, 40_000, &mut ChaCha8Rng::seed_from_u64(3));
        let mut counts = [0usize; 4];
        for i in idx {
            counts[i] += 1;
        }
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.25).abs() < 0.02);
        }

        assert!(select_candidates(&[], 3, &mut rng).is_err());
        assert!(select_candidates(&pool, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn ea_spends_the_budget_and_tracks_the_best() {
        let pool = vec![mlp_chain(&[16]), mlp_chain(&[32])];
        let config = MutationConfig::default();

        let constant = ea_maximize(
            batched(|_| Ok(3.5)),
            &pool,
            12,
            3,
            &config,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(constant.history.len(), 12);
        assert_eq!(constant.best_value, 3.5);

        // Maximise the negated layer count; best-so-far must be monotone.
        let out = ea_maximize(
            batched(|a| Ok(-(a.layers.len() as f64))),
            &pool,
            40,
            4,
            &config,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let mut best = f64::NEG_INFINITY;
        for r in &out.history {
            best = best.max(r.value);
        }
        assert_eq!(best, out.best_value);
        assert!(out.best_value >= -(pool[0].layers.len() as f64) - 2.0);
    }

    #[test]
    fn ea_propagates_objective_failures() {
        let pool = vec![mlp_chain(&[16])];
        let config = MutationConfig::default();
        let mut calls = 0;
        let res = ea_maximize(
            batched(move |_| {
                calls += 1;
                if calls > 3 {
                    Err(ObjectiveError::CommandFailed(11))
                } else {
                    Ok(1.0)
                }
            }),
            &pool,
            10,
            2,
            &config,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        match res {
            Err(EvoError::Eval(e)) => assert!(validate(&e.arch).is_empty()),
            other => panic!("expected an evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn nan_values_never_win_or_steer() {
        let pool = vec![mlp_chain(&[16]), mlp_chain(&[32])];
        let config = MutationConfig::default();
        let mut i = 0;
        let out = ea_maximize(
            batched(move |_| {
                i += 1;
                Ok(if i % 2 == 0 { f64::NAN } else { i as f64 })
            }),
            &pool,
            9,
            2,
            &config,
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap();
        assert!(out.best_value.is_finite());
        assert_eq!(out.history.len(), 9);
    }
}
