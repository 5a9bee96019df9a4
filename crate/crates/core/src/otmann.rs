//! Optimal-transport distance between architectures.
//!
//! Layer masses are shipped between two networks. Matching two layers costs a
//! label-mismatch penalty plus `nu` times a structural penalty (disagreement
//! of their path-length statistics); leaving mass unmatched costs 1 per unit
//! on either side. The inequality-constrained matching program is solved
//! exactly through an equivalent balanced transportation problem with one
//! extra non-assignment row and column.

use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archgraph::{
    self, Anchor, ArchError, ArchHash, Architecture, Label, LabelClass, NetClass, PathKind,
    CNN_PROCESSING, MLP_PROCESSING,
};
use crate::transport::{self, TransportError};

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("cannot compare a {0} network with a {1} network")]
    ClassMismatch(NetClass, NetClass),
    #[error("architecture has zero total mass")]
    ZeroMass,
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

// ---------------------------------------------------------------------------
// Label mismatch penalties

/// Pairwise label penalties for one network class. Entries of `f64::INFINITY`
/// mark label pairs whose matching is never worthwhile; they are substituted
/// with a large finite constant when building cost matrices, and any value
/// above twice the unit non-assignment cost yields the same distance.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    labels: Vec<Label>,
    entries: Vec<f64>,
}

impl PenaltyMatrix {
    /// The built-in penalty table for a class.
    ///
    /// cnn: conv penalties grow with kernel-size separation (0.2 one step,
    /// 0.3 two), the two pooling labels sit at 0.25, residual blocks mirror
    /// the conv block with `res-k <-> conv-j` costing `0.9 * conv-k/conv-j
    /// + 0.1`. mlp: rectifiers are 0.1 apart from each other, sigmoidal
    /// labels likewise, and the two families are 0.25 apart. All other label
    /// pairs match only with themselves.
    pub fn default_for(class: NetClass) -> PenaltyMatrix {
        let labels: Vec<Label> = match class {
            NetClass::Cnn => [Label::Ip, Label::Op, Label::Softmax]
                .into_iter()
                .chain(CNN_PROCESSING)
                .collect(),
            NetClass::Mlp => [Label::Ip, Label::Op, Label::Linear]
                .into_iter()
                .chain(MLP_PROCESSING)
                .collect(),
        };
        let k = labels.len();
        let mut entries = vec![f64::INFINITY; k * k];
        let idx = |l: Label| labels.iter().position(|&x| x == l).unwrap();
        let mut set = |a: Label, b: Label, v: f64| {
            entries[idx(a) * k + idx(b)] = v;
            entries[idx(b) * k + idx(a)] = v;
        };
        for &l in &labels {
            set(l, l, 0.0);
        }
        match class {
            NetClass::Cnn => {
                let convs = [Label::Conv3, Label::Conv5, Label::Conv7];
                let reses = [Label::Res3, Label::Res5, Label::Res7];
                let conv_pen = |a: usize, b: usize| match a.abs_diff(b) {
                    0 => 0.0,
                    1 => 0.2,
                    _ => 0.3,
                };
                for a in 0..3 {
                    for b in 0..3 {
                        set(convs[a], convs[b], conv_pen(a, b));
                        set(reses[a], reses[b], conv_pen(a, b));
                        set(reses[a], convs[b], 0.9 * conv_pen(a, b) + 0.1);
                    }
                }
                set(Label::MaxPool, Label::AvgPool, 0.25);
            }
            NetClass::Mlp => {
                for &a in &MLP_PROCESSING {
                    for &b in &MLP_PROCESSING {
                        if a == b {
                            continue;
                        }
                        let v = if a.is_rectifier() == b.is_rectifier() { 0.1 } else { 0.25 };
                        set(a, b, v);
                    }
                }
            }
        }
        PenaltyMatrix { labels, entries }
    }

    fn index(&self, l: Label) -> usize {
        self.labels.iter().position(|&x| x == l).expect("label not in penalty table")
    }

    pub fn get(&self, a: Label, b: Label) -> f64 {
        self.entries[self.index(a) * self.labels.len() + self.index(b)]
    }

    /// Triangle inequality over all label triples after substituting `big`
    /// for the infinite entries. The distance is a pseudo-metric whenever
    /// this holds.
    pub fn satisfies_triangle(&self, big: f64) -> bool {
        let k = self.labels.len();
        let e = |i: usize, j: usize| {
            let v = self.entries[i * k + j];
            if v.is_finite() {
                v
            } else {
                big
            }
        };
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    if e(i, j) > e(i, l) + e(l, j) + 1e-12 {
                        return false;
                    }
                }
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Prepared per-architecture features

/// Everything the distance needs about one architecture, computed once.
/// Path statistics are stored per label family, layer-major with the six
/// combinations (shortest, longest, random-walk) x (to output, from input)
/// contiguous per layer so the cost kernel streams over them.
#[derive(Debug)]
pub struct ArchFeatures {
    pub hash: ArchHash,
    pub class: NetClass,
    pub labels: Vec<Label>,
    pub masses: Vec<f64>,
    pub total_mass: f64,
    path_stats: Vec<Vec<f64>>,
}

const PATH_COMBOS: [(PathKind, Anchor); 6] = [
    (PathKind::Shortest, Anchor::ToOp),
    (PathKind::Longest, Anchor::ToOp),
    (PathKind::RandomWalk, Anchor::ToOp),
    (PathKind::Shortest, Anchor::FromIp),
    (PathKind::Longest, Anchor::FromIp),
    (PathKind::RandomWalk, Anchor::FromIp),
];

impl ArchFeatures {
    pub fn compute(arch: &Architecture) -> Result<ArchFeatures, ArchError> {
        let masses = archgraph::layer_masses(arch)?;
        let total_mass = masses.iter().sum();
        let classes = LabelClass::for_class(arch.class);
        let n = masses.len();
        let mut path_stats = Vec::with_capacity(classes.len());
        for &class in classes {
            let mut flat = vec![0.0; n * 6];
            for (slot, &(kind, anchor)) in PATH_COMBOS.iter().enumerate() {
                let lengths = archgraph::path_lengths(arch, kind, anchor, class)?;
                debug_assert_eq!(lengths.len(), n);
                for (i, d) in lengths.into_iter().enumerate() {
                    flat[i * 6 + slot] = d;
                }
            }
            path_stats.push(flat);
        }
        Ok(ArchFeatures {
            hash: archgraph::structural_hash(arch)?,
            class: arch.class,
            labels: arch.layers.iter().map(|l| l.label).collect(),
            masses,
            total_mass,
            path_stats,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.labels.len()
    }
}

/// Concurrent idempotent cache of prepared features keyed by structural hash.
#[derive(Default)]
pub struct FeatureCache {
    map: RwLock<std::collections::HashMap<ArchHash, Arc<ArchFeatures>>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn features(&self, arch: &Architecture) -> Result<Arc<ArchFeatures>, ArchError> {
        let hash = archgraph::structural_hash(arch)?;
        if let Some(f) = self.map.read().unwrap().get(&hash) {
            return Ok(Arc::clone(f));
        }
        let computed = Arc::new(ArchFeatures::compute(arch)?);
        let mut map = self.map.write().unwrap();
        Ok(Arc::clone(map.entry(hash).or_insert(computed)))
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Cost matrices

/// Label-mismatch costs, `n1 x n2` row-major, with infinite penalties
/// replaced by `big`.  Labels are resolved to table rows once per side, not
/// once per cell.
pub fn lmm_cost(a: &ArchFeatures, b: &ArchFeatures, penalty: &PenaltyMatrix, big: f64) -> Vec<f64> {
    let mut ws = ProfileScratch::default();
    lmm_cost_into(a, b, penalty, big, &mut ws);
    ws.lmm
}

fn lmm_cost_into(
    a: &ArchFeatures,
    b: &ArchFeatures,
    penalty: &PenaltyMatrix,
    big: f64,
    ws: &mut ProfileScratch,
) {
    let k = penalty.labels.len();
    ws.idx_a.clear();
    ws.idx_a.extend(a.labels.iter().map(|&l| penalty.index(l)));
    ws.idx_b.clear();
    ws.idx_b.extend(b.labels.iter().map(|&l| penalty.index(l)));
    let n2 = ws.idx_b.len();
    ws.lmm.clear();
    ws.lmm.resize(ws.idx_a.len() * n2, 0.0);
    for (i, &ra) in ws.idx_a.iter().enumerate() {
        for (j, &cb) in ws.idx_b.iter().enumerate() {
            let v = penalty.entries[ra * k + cb];
            ws.lmm[i * n2 + j] = if v.is_finite() { v } else { big };
        }
    }
}

/// Structural costs: mean absolute disagreement of the six path statistics,
/// averaged over the label families of the class.
pub fn str_cost(a: &ArchFeatures, b: &ArchFeatures) -> Vec<f64> {
    let mut out = Vec::new();
    str_cost_into(a, b, &mut out);
    out
}

fn str_cost_into(a: &ArchFeatures, b: &ArchFeatures, out: &mut Vec<f64>) {
    let n1 = a.labels.len();
    let n2 = b.labels.len();
    let n_classes = a.path_stats.len();
    out.clear();
    out.resize(n1 * n2, 0.0);
    for c in 0..n_classes {
        let sa = &a.path_stats[c];
        let sb = &b.path_stats[c];
        for i in 0..n1 {
            let ai = &sa[i * 6..i * 6 + 6];
            for j in 0..n2 {
                let bj = &sb[j * 6..j * 6 + 6];
                let mut acc = 0.0;
                for s in 0..6 {
                    acc += (ai[s] - bj[s]).abs();
                }
                out[i * n2 + j] += acc / 6.0;
            }
        }
    }
    for v in out.iter_mut() {
        *v /= n_classes as f64;
    }
}

/// Reused buffers for profile evaluation; one set per thread because the
/// search scores whole pools of candidate pairs in a loop.
#[derive(Default)]
struct ProfileScratch {
    idx_a: Vec<usize>,
    idx_b: Vec<usize>,
    lmm: Vec<f64>,
    str_: Vec<f64>,
    supply: Vec<f64>,
    demand: Vec<f64>,
}

thread_local! {
    static PROFILE_SCRATCH: std::cell::RefCell<ProfileScratch> =
        std::cell::RefCell::new(ProfileScratch::default());
}

// ---------------------------------------------------------------------------
// Distance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceParams {
    /// Structural-penalty coefficients the profile is computed over.
    pub nu_grid: Vec<f64>,
    /// Substitute for infinite label penalties; any value above 2 gives the
    /// same distances.
    pub big: f64,
}

impl Default for DistanceParams {
    fn default() -> Self {
        DistanceParams { nu_grid: vec![0.1, 0.2, 0.4, 0.8], big: 10.0 }
    }
}

/// One distance evaluation, with the optimal objective split into its label,
/// structural, and non-assignment parts.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceResult {
    pub nu: f64,
    pub raw: f64,
    pub normalized: f64,
    pub phi_lmm: f64,
    pub phi_str: f64,
    pub phi_nas: f64,
    /// Mass matched between the two networks (excludes non-assignment).
    pub matched_mass: f64,
}

/// Distances at every `nu` in a grid, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceProfile {
    pub nus: Vec<f64>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

pub fn distance(
    a: &ArchFeatures,
    b: &ArchFeatures,
    nu: f64,
    penalty: &PenaltyMatrix,
    big: f64,
) -> Result<DistanceResult, DistanceError> {
    if a.class != b.class {
        return Err(DistanceError::ClassMismatch(a.class, b.class));
    }
    if a.total_mass <= 0.0 || b.total_mass <= 0.0 {
        return Err(DistanceError::ZeroMass);
    }
    let lmm = lmm_cost(a, b, penalty, big);
    let str_ = str_cost(a, b);
    distance_from_costs(a, b, nu, &lmm, &str_)
}

fn distance_from_costs(
    a: &ArchFeatures,
    b: &ArchFeatures,
    nu: f64,
    lmm: &[f64],
    str_: &[f64],
) -> Result<DistanceResult, DistanceError> {
    let n1 = a.n_layers();
    let n2 = b.n_layers();
    // Augmented problem: an extra column absorbs unmatched mass of `a`, an
    // extra row supplies unmatched mass of `b`, both at unit cost; the corner
    // is free so the dummies can cancel against each other.
    let (rows, cols) = (n1 + 1, n2 + 1);
    let mut cost = vec![0.0; rows * cols];
    for i in 0..n1 {
        for j in 0..n2 {
            cost[i * cols + j] = lmm[i * n2 + j] + nu * str_[i * n2 + j];
        }
        cost[i * cols + n2] = 1.0;
    }
    for j in 0..n2 {
        cost[n1 * cols + j] = 1.0;
    }
    let mut supply = a.masses.clone();
    supply.push(b.total_mass);
    let mut demand = b.masses.clone();
    demand.push(a.total_mass);
    let plan = transport::solve(&cost, &supply, &demand)?;

    let mut phi_lmm = 0.0;
    let mut phi_str = 0.0;
    let mut phi_nas = 0.0;
    let mut matched = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            let f = plan.flow_at(i, j);
            if f > 0.0 {
                phi_lmm += f * lmm[i * n2 + j];
                phi_str += f * nu * str_[i * n2 + j];
                matched += f;
            }
        }
        phi_nas += plan.flow_at(i, n2);
    }
    for j in 0..n2 {
        phi_nas += plan.flow_at(n1, j);
    }
    Ok(DistanceResult {
        nu,
        raw: plan.objective,
        normalized: plan.objective / (a.total_mass + b.total_mass),
        phi_lmm,
        phi_str,
        phi_nas,
        matched_mass: matched,
    })
}

/// Distances over the whole `nu` grid. The label and structural costs are
/// shared across the grid, the dummy border never changes, and the transport
/// instance is re-optimised in place as `nu` sweeps.
pub fn distance_profile(
    a: &ArchFeatures,
    b: &ArchFeatures,
    penalty: &PenaltyMatrix,
    params: &DistanceParams,
) -> Result<DistanceProfile, DistanceError> {
    if a.class != b.class {
        return Err(DistanceError::ClassMismatch(a.class, b.class));
    }
    if a.total_mass <= 0.0 || b.total_mass <= 0.0 {
        return Err(DistanceError::ZeroMass);
    }
    let n1 = a.n_layers();
    let n2 = b.n_layers();
    let cols = n2 + 1;
    let raw = PROFILE_SCRATCH.with(|cell| {
        let ws = &mut *cell.borrow_mut();
        lmm_cost_into(a, b, penalty, params.big, ws);
        str_cost_into(a, b, &mut ws.str_);
        ws.supply.clear();
        ws.supply.extend_from_slice(&a.masses);
        ws.supply.push(b.total_mass);
        ws.demand.clear();
        ws.demand.extend_from_slice(&b.masses);
        ws.demand.push(a.total_mass);
        let (lmm, str_) = (&ws.lmm, &ws.str_);
        transport::solve_sequence(&ws.supply, &ws.demand, params.nu_grid.len(), |t, cost| {
            if t == 0 {
                // Unit-cost dummies as in `distance_from_costs`; the free
                // corner rides on the zeroed buffer.
                for i in 0..n1 {
                    cost[i * cols + n2] = 1.0;
                }
                for j in 0..n2 {
                    cost[n1 * cols + j] = 1.0;
                }
            }
            let nu = params.nu_grid[t];
            for i in 0..n1 {
                let lr = &lmm[i * n2..(i + 1) * n2];
                let sr = &str_[i * n2..(i + 1) * n2];
                let cr = &mut cost[i * cols..i * cols + n2];
                for j in 0..n2 {
                    cr[j] = lr[j] + nu * sr[j];
                }
            }
        })
    })?;
    let tm = a.total_mass + b.total_mass;
    let normalized = raw.iter().map(|&r| r / tm).collect();
    Ok(DistanceProfile { nus: params.nu_grid.clone(), raw, normalized })
}

/// Self profile: all zeros, without solving anything.
pub fn zero_profile(params: &DistanceParams) -> DistanceProfile {
    DistanceProfile {
        nus: params.nu_grid.clone(),
        raw: vec![0.0; params.nu_grid.len()],
        normalized: vec![0.0; params.nu_grid.len()],
    }
}

/// Symmetric pairwise distance matrices over a pool, one matrix per grid
/// `nu`, raw and normalized. Off-diagonal entries are computed once for
/// `i < j` (in parallel) and mirrored; diagonals are exactly zero.
pub struct PairwiseMatrices {
    pub n: usize,
    pub nus: Vec<f64>,
    /// One `n*n` row-major matrix per nu.
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

pub fn pairwise_matrices(
    feats: &[&ArchFeatures],
    penalty: &PenaltyMatrix,
    params: &DistanceParams,
) -> Result<PairwiseMatrices, DistanceError> {
    let n = feats.len();
    let g = params.nu_grid.len();
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let profiles: Result<Vec<DistanceProfile>, DistanceError> = pairs
        .par_iter()
        .map(|&(i, j)| distance_profile(feats[i], feats[j], penalty, params))
        .collect();
    let profiles = profiles?;
    let mut raw = vec![vec![0.0; n * n]; g];
    let mut normalized = vec![vec![0.0; n * n]; g];
    for (&(i, j), p) in pairs.iter().zip(&profiles) {
        for k in 0..g {
            raw[k][i * n + j] = p.raw[k];
            raw[k][j * n + i] = p.raw[k];
            normalized[k][i * n + j] = p.normalized[k];
            normalized[k][j * n + i] = p.normalized[k];
        }
    }
    Ok(PairwiseMatrices { n, nus: params.nu_grid.clone(), raw, normalized })
}

/// Render a square matrix as CSV with a leading name row and column.
pub fn matrix_to_csv(names: &[String], matrix: &[f64], n: usize) -> String {
    let mut out = String::new();
    out.push_str("name");
    for name in names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&names[i]);
        for j in 0..n {
            out.push_str(&format!(",{:.9}", matrix[i * n + j]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archgraph::chain_arch;

    fn feats(arch: &Architecture) -> ArchFeatures {
        ArchFeatures::compute(arch).unwrap()
    }

    #[test]
    fn default_penalty_values() {
        let cnn = PenaltyMatrix::default_for(NetClass::Cnn);
        assert_eq!(cnn.get(Label::Conv3, Label::Conv5), 0.2);
        assert_eq!(cnn.get(Label::Conv5, Label::Conv7), 0.2);
        assert_eq!(cnn.get(Label::Conv3, Label::Conv7), 0.3);
        assert_eq!(cnn.get(Label::MaxPool, Label::AvgPool), 0.25);
        assert_eq!(cnn.get(Label::Res3, Label::Res5), 0.2);
        assert!((cnn.get(Label::Res3, Label::Conv3) - 0.1).abs() < 1e-12);
        assert!((cnn.get(Label::Res3, Label::Conv5) - 0.28).abs() < 1e-12);
        assert!((cnn.get(Label::Res3, Label::Conv7) - 0.37).abs() < 1e-12);
        assert_eq!(cnn.get(Label::Conv3, Label::Conv3), 0.0);
        assert!(cnn.get(Label::Conv3, Label::Fc).is_infinite());
        assert!(cnn.get(Label::Ip, Label::Op).is_infinite());

        let mlp = PenaltyMatrix::default_for(NetClass::Mlp);
        assert_eq!(mlp.get(Label::Relu, Label::Elu), 0.1);
        assert_eq!(mlp.get(Label::Logistic, Label::Tanh), 0.1);
        assert_eq!(mlp.get(Label::Relu, Label::Logistic), 0.25);
        assert!(mlp.get(Label::Linear, Label::Relu).is_infinite());
    }

    #[test]
    fn default_penalties_satisfy_triangle() {
        for class in [NetClass::Cnn, NetClass::Mlp] {
            let p = PenaltyMatrix::default_for(class);
            assert!(p.satisfies_triangle(10.0));
            assert!(p.satisfies_triangle(1000.0));
        }
    }

    #[test]
    fn identical_architectures_are_at_distance_zero() {
        let a = chain_arch(
            NetClass::Cnn,
            3,
            &[(Label::Conv3, Some(16), None), (Label::MaxPool, None, None)],
        );
        let f = feats(&a);
        let penalty = PenaltyMatrix::default_for(NetClass::Cnn);
        let params = DistanceParams::default();
        let profile = distance_profile(&f, &f, &penalty, &params).unwrap();
        for (&r, &n) in profile.raw.iter().zip(&profile.normalized) {
            assert!(r.abs() < 1e-9, "raw {r}");
            assert!(n.abs() < 1e-9);
        }
    }

    #[test]
    fn conv_label_swap_costs_exactly_the_penalty() {
        // Identical chains except conv3 vs conv5: the only nonzero term is
        // 16 mass units times the 0.2 label penalty.
        let a = chain_arch(NetClass::Cnn, 1, &[(Label::Conv3, Some(16), None)]);
        let b = chain_arch(NetClass::Cnn, 1, &[(Label::Conv5, Some(16), None)]);
        let (fa, fb) = (feats(&a), feats(&b));
        let penalty = PenaltyMatrix::default_for(NetClass::Cnn);
        for nu in [0.1, 0.5, 0.8] {
            let d = distance(&fa, &fb, nu, &penalty, 10.0).unwrap();
            assert!((d.raw - 3.2).abs() < 1e-9, "nu {nu}: {}", d.raw);
            assert!((d.phi_lmm - 3.2).abs() < 1e-9);
            assert!(d.phi_str.abs() < 1e-9);
            assert!(d.phi_nas.abs() < 1e-9);
            assert!((d.normalized - 3.2 / 41.6).abs() < 1e-12);
        }
    }

    #[test]
    fn class_mismatch_is_an_error() {
        let a = chain_arch(NetClass::Cnn, 1, &[(Label::Conv3, Some(16), None)]);
        let b = chain_arch(NetClass::Mlp, 1, &[(Label::Relu, Some(16), None)]);
        let penalty = PenaltyMatrix::default_for(NetClass::Cnn);
        let err = distance(&feats(&a), &feats(&b), 0.1, &penalty, 10.0);
        assert!(matches!(err, Err(DistanceError::ClassMismatch(_, _))));
    }

    #[test]
    fn split_invariance_pair_is_at_zero() {
        // One 32-unit layer against two parallel 16-unit copies: same masses,
        // same path statistics layer for layer, so the distance vanishes.
        let single = chain_arch(
            NetClass::Cnn,
            1,
            &[(Label::Conv3, Some(16), None), (Label::Conv3, Some(32), None)],
        );
        let mut b = crate::archgraph::ArchBuilder::new(NetClass::Cnn, 1);
        let first = b.layer(Label::Conv3, 16);
        let left = b.layer(Label::Conv3, 16);
        let right = b.layer(Label::Conv3, 16);
        let sm = b.layer(Label::Softmax, None);
        let (ip, op) = (b.ip(), b.op());
        b.edge(ip, first)
            .edge(first, left)
            .edge(first, right)
            .edge(left, sm)
            .edge(right, sm)
            .edge(sm, op);
        let split = b.finish();
        assert!(archgraph::validate(&split).is_empty());
        assert!((archgraph::total_mass(&single).unwrap()
            - archgraph::total_mass(&split).unwrap())
        .abs()
            < 1e-12);
        let penalty = PenaltyMatrix::default_for(NetClass::Cnn);
        let params = DistanceParams::default();
        let profile =
            distance_profile(&feats(&single), &feats(&split), &penalty, &params).unwrap();
        for &r in profile.raw.iter().chain(&profile.normalized) {
            assert!(r.abs() < 1e-9, "expected zero, got {r}");
        }
    }

    #[test]
    fn normalized_distance_stays_below_one() {
        let a = chain_arch(NetClass::Mlp, 1, &[(Label::Relu, Some(64), None)]);
        let b = chain_arch(
            NetClass::Mlp,
            1,
            &[
                (Label::Tanh, Some(256), None),
                (Label::Logistic, Some(128), None),
                (Label::Elu, Some(512), None),
            ],
        );
        let penalty = PenaltyMatrix::default_for(NetClass::Mlp);
        let params = DistanceParams::default();
        let p = distance_profile(&feats(&a), &feats(&b), &penalty, &params).unwrap();
        for &n in &p.normalized {
            assert!(n <= 1.0 + 1e-12 && n >= 0.0);
        }
    }

    #[test]
    fn big_substitution_does_not_change_distances() {
        let a = chain_arch(
            NetClass::Cnn,
            3,
            &[(Label::Conv3, Some(32), None), (Label::Fc, Some(16), None)],
        );
        let b = chain_arch(
            NetClass::Cnn,
            3,
            &[(Label::MaxPool, None, None), (Label::Conv7, Some(64), None)],
        );
        let penalty = PenaltyMatrix::default_for(NetClass::Cnn);
        let (fa, fb) = (feats(&a), feats(&b));
        for nu in [0.1, 0.4] {
            let d10 = distance(&fa, &fb, nu, &penalty, 10.0).unwrap();
            let d1000 = distance(&fa, &fb, nu, &penalty, 1000.0).unwrap();
            assert!((d10.raw - d1000.raw).abs() < 1e-7);
        }
    }

    #[test]
    fn symmetry_within_tolerance() {
        let a = chain_arch(
            NetClass::Cnn,
            3,
            &[(Label::Conv3, Some(16), None), (Label::Conv5, Some(32), None)],
        );
        let b = chain_arch(NetClass::Cnn, 3, &[(Label::Res3, Some(24), None)]);
        let penalty = PenaltyMatrix::default_for(NetClass::Cnn);
        let (fa, fb) = (feats(&a), feats(&b));
        let ab = distance(&fa, &fb, 0.4, &penalty, 10.0).unwrap();
        let ba = distance(&fb, &fa, 0.4, &penalty, 10.0).unwrap();
        assert!((ab.raw - ba.raw).abs() <= 1e-9 * (1.0 + ab.raw.abs()));
    }

    #[test]
    fn pairwise_matrix_shape_and_symmetry() {
        let archs: Vec<Architecture> = vec![
            chain_arch(NetClass::Mlp, 1, &[(Label::Relu, Some(16), None)]),
            chain_arch(NetClass::Mlp, 1, &[(Label::Tanh, Some(32), None)]),
            chain_arch(
                NetClass::Mlp,
                1,
                &[(Label::Relu, Some(16), None), (Label::Elu, Some(8), None)],
            ),
        ];
        let fs: Vec<ArchFeatures> = archs.iter().map(feats).collect();
        let refs: Vec<&ArchFeatures> = fs.iter().collect();
        let penalty = PenaltyMatrix::default_for(NetClass::Mlp);
        let m = pairwise_matrices(&refs, &penalty, &DistanceParams::default()).unwrap();
        assert_eq!(m.raw.len(), 4);
        for mat in m.raw.iter().chain(&m.normalized) {
            for i in 0..3 {
                assert_eq!(mat[i * 3 + i], 0.0);
                for j in 0..3 {
                    assert_eq!(mat[i * 3 + j], mat[j * 3 + i]);
                }
            }
        }
        let csv = matrix_to_csv(
            &["a".into(), "b".into(), "c".into()],
            &m.raw[0],
            3,
        );
        assert!(csv.starts_with("name,a,b,c\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn feature_cache_deduplicates() {
        let cache = FeatureCache::new();
        let a = chain_arch(NetClass::Cnn, 1, &[(Label::Conv3, Some(16), None)]);
        let f1 = cache.features(&a).unwrap();
        let f2 = cache.features(&a.clone()).unwrap();
        assert!(Arc::ptr_eq(&f1, &f2));
        assert_eq!(cache.len(), 1);
    }
}
