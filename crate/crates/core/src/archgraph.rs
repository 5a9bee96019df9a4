//! Layered architecture graphs: schema, validation, layer masses, path
//! statistics, and the canonical structural hash.
//!
//! An architecture is a DAG with a single input layer, a single output layer,
//! one or more decision layers feeding the output, and processing layers in
//! between. Two families are supported: convolutional networks (`cnn`) and
//! multi-layer perceptrons (`mlp`).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Mass share given to the input, output, and decision roles, as a fraction
/// of total processing mass.
pub const ZETA: f64 = 0.1;
/// Fully-connected layers in a cnn carry this multiplier on their mass.
pub const FC_MASS_MULT: f64 = 0.1;
/// Residual blocks cost twice the matching convolution.
pub const RES_MASS_MULT: f64 = 2.0;

/// Domain constraints every legal architecture satisfies.
pub mod limits {
    pub const MAX_LAYERS: usize = 60;
    pub const MAX_EDGES: usize = 200;
    pub const MAX_DEGREE: usize = 5;
    pub const MAX_TOTAL_MASS: f64 = 1e8;
    pub const MIN_UNITS: u32 = 8;
    pub const MAX_UNITS: u32 = 1024;
}

/// Default image size used when validating cnn architectures without an
/// explicit input resolution.
pub const DEFAULT_INPUT_SIZE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetClass {
    Cnn,
    Mlp,
}

impl NetClass {
    pub fn as_str(self) -> &'static str {
        match self {
            NetClass::Cnn => "cnn",
            NetClass::Mlp => "mlp",
        }
    }
}

impl fmt::Display for NetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Ip,
    Op,
    // cnn
    Softmax,
    Conv3,
    Conv5,
    Conv7,
    Res3,
    Res5,
    Res7,
    MaxPool,
    AvgPool,
    Fc,
    // mlp
    Linear,
    Relu,
    Crelu,
    LeakyRelu,
    Softplus,
    Elu,
    Logistic,
    Tanh,
}

/// Role a label plays in the graph shape rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Input,
    Output,
    Decision,
    Processing,
}

pub const CNN_PROCESSING: [Label; 9] = [
    Label::Conv3,
    Label::Conv5,
    Label::Conv7,
    Label::Res3,
    Label::Res5,
    Label::Res7,
    Label::MaxPool,
    Label::AvgPool,
    Label::Fc,
];

pub const MLP_PROCESSING: [Label; 7] = [
    Label::Relu,
    Label::Crelu,
    Label::LeakyRelu,
    Label::Softplus,
    Label::Elu,
    Label::Logistic,
    Label::Tanh,
];

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Ip => "ip",
            Label::Op => "op",
            Label::Softmax => "softmax",
            Label::Conv3 => "conv3",
            Label::Conv5 => "conv5",
            Label::Conv7 => "conv7",
            Label::Res3 => "res3",
            Label::Res5 => "res5",
            Label::Res7 => "res7",
            Label::MaxPool => "max-pool",
            Label::AvgPool => "avg-pool",
            Label::Fc => "fc",
            Label::Linear => "linear",
            Label::Relu => "relu",
            Label::Crelu => "crelu",
            Label::LeakyRelu => "leaky-relu",
            Label::Softplus => "softplus",
            Label::Elu => "elu",
            Label::Logistic => "logistic",
            Label::Tanh => "tanh",
        }
    }

    pub fn role(self) -> Role {
        match self {
            Label::Ip => Role::Input,
            Label::Op => Role::Output,
            Label::Softmax | Label::Linear => Role::Decision,
            _ => Role::Processing,
        }
    }

    /// Whether the label may appear in a network of the given class.
    pub fn belongs_to(self, class: NetClass) -> bool {
        match self {
            Label::Ip | Label::Op => true,
            Label::Softmax => class == NetClass::Cnn,
            Label::Linear => class == NetClass::Mlp,
            l if CNN_PROCESSING.contains(&l) => class == NetClass::Cnn,
            _ => class == NetClass::Mlp,
        }
    }

    /// Labels that carry a unit count.
    pub fn has_units(self) -> bool {
        matches!(
            self,
            Label::Conv3
                | Label::Conv5
                | Label::Conv7
                | Label::Res3
                | Label::Res5
                | Label::Res7
                | Label::Fc
        ) || MLP_PROCESSING.contains(&self)
    }

    /// Labels that take an explicit stride (pooling is implicitly stride 2).
    pub fn takes_stride(self) -> bool {
        matches!(
            self,
            Label::Conv3 | Label::Conv5 | Label::Conv7 | Label::Res3 | Label::Res5 | Label::Res7
        )
    }

    pub fn is_pool(self) -> bool {
        matches!(self, Label::MaxPool | Label::AvgPool)
    }

    pub fn is_conv_like(self) -> bool {
        matches!(
            self,
            Label::Conv3 | Label::Conv5 | Label::Conv7 | Label::Res3 | Label::Res5 | Label::Res7
        )
    }

    pub fn is_res(self) -> bool {
        matches!(self, Label::Res3 | Label::Res5 | Label::Res7)
    }

    pub fn is_rectifier(self) -> bool {
        matches!(
            self,
            Label::Relu | Label::Crelu | Label::LeakyRelu | Label::Softplus | Label::Elu
        )
    }

    pub fn is_sigmoidal(self) -> bool {
        matches!(self, Label::Logistic | Label::Tanh)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub id: u32,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u32>,
}

impl Layer {
    pub fn new(id: u32, label: Label) -> Self {
        Layer { id, label, units: None, stride: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub class: NetClass,
    pub input_channels: u32,
    pub layers: Vec<Layer>,
    pub edges: Vec<(u32, u32)>,
}

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate layer id {0}")]
    DuplicateId(u32),
    #[error("edge ({0}, {1}) references an unknown layer id")]
    UnknownEdgeEndpoint(u32, u32),
    #[error("graph has a cycle")]
    Cyclic,
    #[error("expected exactly one {0} layer")]
    BadTerminals(&'static str),
    #[error("label class {0:?} does not apply to {1} networks")]
    ClassMismatch(LabelClass, NetClass),
    #[error("image sizes are only defined for cnn networks")]
    NotConvolutional,
    #[error("parents of layer {0} have unequal image sizes")]
    SizeMismatch(u32),
    #[error("layer {0} halves an image of size 1")]
    DegenerateHalving(u32),
    #[error("architecture has zero total mass")]
    ZeroMass,
}

/// Indexed adjacency view. Construction fails on graphs too malformed to
/// index (duplicate ids, dangling edges, cycles, missing terminals); use
/// [`validate`] for a full report instead of an error.
pub(crate) struct Graph {
    pub n: usize,
    pub parents: Vec<Vec<usize>>,
    pub children: Vec<Vec<usize>>,
    /// Canonical topological order, ties broken on (label, units, out-degree, id).
    pub topo: Vec<usize>,
    pub ip: usize,
    pub op: usize,
}

impl Graph {
    pub fn build(arch: &Architecture) -> Result<Graph, ArchError> {
        let n = arch.layers.len();
        let mut index_of = HashMap::with_capacity(n);
        for (i, l) in arch.layers.iter().enumerate() {
            if index_of.insert(l.id, i).is_some() {
                return Err(ArchError::DuplicateId(l.id));
            }
        }
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(u, v) in &arch.edges {
            let (ui, vi) = match (index_of.get(&u), index_of.get(&v)) {
                (Some(&a), Some(&b)) => (a, b),
                _ => return Err(ArchError::UnknownEdgeEndpoint(u, v)),
            };
            children[ui].push(vi);
            parents[vi].push(ui);
        }
        let mut ip = None;
        let mut op = None;
        for (i, l) in arch.layers.iter().enumerate() {
            match l.label {
                Label::Ip => {
                    if ip.replace(i).is_some() {
                        return Err(ArchError::BadTerminals("ip"));
                    }
                }
                Label::Op => {
                    if op.replace(i).is_some() {
                        return Err(ArchError::BadTerminals("op"));
                    }
                }
                _ => {}
            }
        }
        let (ip, op) = match (ip, op) {
            (Some(a), Some(b)) => (a, b),
            (None, _) => return Err(ArchError::BadTerminals("ip")),
            (_, None) => return Err(ArchError::BadTerminals("op")),
        };
        let topo = canonical_topo(arch, &parents, &children)?;
        Ok(Graph { n, parents, children, topo, ip, op })
    }
}

fn canonical_topo(
    arch: &Architecture,
    parents: &[Vec<usize>],
    children: &[Vec<usize>],
) -> Result<Vec<usize>, ArchError> {
    let n = arch.layers.len();
    let key = |i: usize| {
        let l = &arch.layers[i];
        (l.label.as_str(), l.units.unwrap_or(0), children[i].len(), l.id)
    };
    let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<_> = (0..n).filter(|&i| indeg[i] == 0).map(|i| (key(i), i)).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&(k, i)) = ready.iter().next() {
        ready.remove(&(k, i));
        order.push(i);
        for &c in &children[i] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.insert((key(c), c));
            }
        }
    }
    if order.len() != n {
        return Err(ArchError::Cyclic);
    }
    Ok(order)
}

/// Topological order of layer ids, deterministic across runs and id
/// relabellings that preserve structure.
pub fn topo_sort(arch: &Architecture) -> Result<Vec<u32>, ArchError> {
    let g = Graph::build(arch)?;
    Ok(g.topo.iter().map(|&i| arch.layers[i].id).collect())
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { id: u32 },
    UnknownEdgeEndpoint { from: u32, to: u32 },
    SelfEdge { id: u32 },
    DuplicateEdge { from: u32, to: u32 },
    MissingIp,
    MultipleIp,
    MissingOp,
    MultipleOp,
    EdgeIntoIp { from: u32 },
    EdgeOutOfOp { to: u32 },
    NoIncoming { id: u32 },
    NoOutgoing { id: u32 },
    NonDecisionIntoOp { id: u32 },
    DecisionExtraEdge { id: u32, to: u32 },
    NoDecisionLayer,
    NoProcessingLayer,
    WrongClassLabel { id: u32, label: Label },
    MissingUnits { id: u32 },
    UnexpectedUnits { id: u32 },
    UnitsOutOfRange { id: u32, units: u32 },
    UnexpectedStride { id: u32 },
    BadStride { id: u32, stride: u32 },
    Cyclic,
    TooManyLayers { count: usize },
    TooManyEdges { count: usize },
    InDegreeTooHigh { id: u32, degree: usize },
    OutDegreeTooHigh { id: u32, degree: usize },
    MassTooLarge { total: f64 },
    ParentSizeMismatch { id: u32 },
    DegenerateHalving { id: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DuplicateId { id } => write!(f, "duplicate layer id {id}"),
            UnknownEdgeEndpoint { from, to } => {
                write!(f, "edge ({from}, {to}) references an unknown layer id")
            }
            SelfEdge { id } => write!(f, "self edge on layer {id}"),
            DuplicateEdge { from, to } => write!(f, "duplicate edge ({from}, {to})"),
            MissingIp => write!(f, "no ip layer"),
            MultipleIp => write!(f, "more than one ip layer"),
            MissingOp => write!(f, "no op layer"),
            MultipleOp => write!(f, "more than one op layer"),
            EdgeIntoIp { from } => write!(f, "edge into ip from layer {from}"),
            EdgeOutOfOp { to } => write!(f, "edge out of op to layer {to}"),
            NoIncoming { id } => write!(f, "layer {id} has no incoming edge"),
            NoOutgoing { id } => write!(f, "layer {id} has no outgoing edge"),
            NonDecisionIntoOp { id } => {
                write!(f, "layer {id} feeds op but is not a decision layer")
            }
            DecisionExtraEdge { id, to } => {
                write!(f, "decision layer {id} has an edge to non-op layer {to}")
            }
            NoDecisionLayer => write!(f, "no decision layer"),
            NoProcessingLayer => write!(f, "no processing layer"),
            WrongClassLabel { id, label } => {
                write!(f, "layer {id} label {label} does not belong to this class")
            }
            MissingUnits { id } => write!(f, "layer {id} needs a unit count"),
            UnexpectedUnits { id } => write!(f, "layer {id} must not carry units"),
            UnitsOutOfRange { id, units } => write!(
                f,
                "layer {id} has {units} units, outside [{}, {}]",
                limits::MIN_UNITS,
                limits::MAX_UNITS
            ),
            UnexpectedStride { id } => write!(f, "layer {id} must not carry a stride"),
            BadStride { id, stride } => write!(f, "layer {id} has invalid stride {stride}"),
            Cyclic => write!(f, "graph has a cycle"),
            TooManyLayers { count } => {
                write!(f, "{count} layers exceeds the limit of {}", limits::MAX_LAYERS)
            }
            TooManyEdges { count } => {
                write!(f, "{count} edges exceeds the limit of {}", limits::MAX_EDGES)
            }
            InDegreeTooHigh { id, degree } => {
                write!(f, "layer {id} in-degree {degree} exceeds {}", limits::MAX_DEGREE)
            }
            OutDegreeTooHigh { id, degree } => {
                write!(f, "layer {id} out-degree {degree} exceeds {}", limits::MAX_DEGREE)
            }
            MassTooLarge { total } => {
                write!(f, "total mass {total:.3e} exceeds {:.0e}", limits::MAX_TOTAL_MASS)
            }
            ParentSizeMismatch { id } => {
                write!(f, "parents of layer {id} have unequal image sizes")
            }
            DegenerateHalving { id } => {
                write!(f, "layer {id} halves an image of size 1")
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidateOpts {
    /// Image edge length fed to the cnn input layer.
    pub input_size: u32,
}

impl Default for ValidateOpts {
    fn default() -> Self {
        ValidateOpts { input_size: DEFAULT_INPUT_SIZE }
    }
}

/// Check every structural rule and domain constraint. Returns all violations
/// found; an empty vector means the architecture is legal.
pub fn validate(arch: &Architecture) -> Vec<Violation> {
    validate_with(arch, ValidateOpts::default())
}

pub fn validate_with(arch: &Architecture, opts: ValidateOpts) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = arch.layers.len();

    // Identity layer: without unique ids and resolvable edges nothing else
    // can be checked.
    let mut index_of = HashMap::with_capacity(n);
    for (i, l) in arch.layers.iter().enumerate() {
        if index_of.insert(l.id, i).is_some() {
            out.push(Violation::DuplicateId { id: l.id });
        }
    }
    let mut seen_edges = BTreeSet::new();
    for &(u, v) in &arch.edges {
        if u == v {
            out.push(Violation::SelfEdge { id: u });
        }
        if !index_of.contains_key(&u) || !index_of.contains_key(&v) {
            out.push(Violation::UnknownEdgeEndpoint { from: u, to: v });
        }
        if !seen_edges.insert((u, v)) {
            out.push(Violation::DuplicateEdge { from: u, to: v });
        }
    }
    if !out.is_empty() {
        return out;
    }

    let mut parents = vec![Vec::new(); n];
    let mut children = vec![Vec::new(); n];
    for &(u, v) in &arch.edges {
        let (ui, vi) = (index_of[&u], index_of[&v]);
        children[ui].push(vi);
        parents[vi].push(ui);
    }

    let ip_count = arch.layers.iter().filter(|l| l.label == Label::Ip).count();
    let op_count = arch.layers.iter().filter(|l| l.label == Label::Op).count();
    match ip_count {
        0 => out.push(Violation::MissingIp),
        1 => {}
        _ => out.push(Violation::MultipleIp),
    }
    match op_count {
        0 => out.push(Violation::MissingOp),
        1 => {}
        _ => out.push(Violation::MultipleOp),
    }

    let mut n_decision = 0usize;
    let mut n_processing = 0usize;
    for (i, l) in arch.layers.iter().enumerate() {
        if !l.label.belongs_to(arch.class) {
            out.push(Violation::WrongClassLabel { id: l.id, label: l.label });
        }
        match l.label.role() {
            Role::Decision => n_decision += 1,
            Role::Processing => n_processing += 1,
            _ => {}
        }
        if l.label.has_units() {
            match l.units {
                None => out.push(Violation::MissingUnits { id: l.id }),
                Some(u) if u < limits::MIN_UNITS || u > limits::MAX_UNITS => {
                    out.push(Violation::UnitsOutOfRange { id: l.id, units: u })
                }
                _ => {}
            }
        } else if l.units.is_some() {
            out.push(Violation::UnexpectedUnits { id: l.id });
        }
        match l.stride {
            Some(s) if l.label.takes_stride() => {
                if s != 1 && s != 2 {
                    out.push(Violation::BadStride { id: l.id, stride: s });
                }
            }
            // Pooling is implicitly stride 2; an explicit field must agree.
            Some(2) if l.label.is_pool() => {}
            Some(s) if l.label.is_pool() => out.push(Violation::BadStride { id: l.id, stride: s }),
            Some(_) => out.push(Violation::UnexpectedStride { id: l.id }),
            None => {}
        }

        match l.label {
            Label::Ip => {
                for &p in &parents[i] {
                    out.push(Violation::EdgeIntoIp { from: arch.layers[p].id });
                }
                if children[i].is_empty() && ip_count == 1 {
                    out.push(Violation::NoOutgoing { id: l.id });
                }
            }
            Label::Op => {
                for &c in &children[i] {
                    out.push(Violation::EdgeOutOfOp { to: arch.layers[c].id });
                }
                if parents[i].is_empty() && op_count == 1 {
                    out.push(Violation::NoIncoming { id: l.id });
                }
            }
            _ => {
                if parents[i].is_empty() {
                    out.push(Violation::NoIncoming { id: l.id });
                }
                if children[i].is_empty() {
                    out.push(Violation::NoOutgoing { id: l.id });
                }
            }
        }

        if l.label.role() == Role::Decision {
            for &c in &children[i] {
                if arch.layers[c].label != Label::Op {
                    out.push(Violation::DecisionExtraEdge { id: l.id, to: arch.layers[c].id });
                }
            }
        }
        if parents[i].len() > limits::MAX_DEGREE {
            out.push(Violation::InDegreeTooHigh { id: l.id, degree: parents[i].len() });
        }
        if children[i].len() > limits::MAX_DEGREE {
            out.push(Violation::OutDegreeTooHigh { id: l.id, degree: children[i].len() });
        }
    }
    for (i, l) in arch.layers.iter().enumerate() {
        if l.label == Label::Op {
            for &p in &parents[i] {
                if arch.layers[p].label.role() != Role::Decision {
                    out.push(Violation::NonDecisionIntoOp { id: arch.layers[p].id });
                }
            }
        }
    }
    if n_decision == 0 {
        out.push(Violation::NoDecisionLayer);
    }
    if n_processing == 0 {
        out.push(Violation::NoProcessingLayer);
    }
    if n > limits::MAX_LAYERS {
        out.push(Violation::TooManyLayers { count: n });
    }
    if arch.edges.len() > limits::MAX_EDGES {
        out.push(Violation::TooManyEdges { count: arch.edges.len() });
    }

    if canonical_topo(arch, &parents, &children).is_err() {
        out.push(Violation::Cyclic);
        return out;
    }
    if !out.is_empty() {
        return out;
    }

    // Quantitative checks only make sense once the shape is sound.
    if let Ok(masses) = layer_masses(arch) {
        let total: f64 = masses.iter().sum();
        if total > limits::MAX_TOTAL_MASS {
            out.push(Violation::MassTooLarge { total });
        }
    }
    if arch.class == NetClass::Cnn {
        if let Ok(g) = Graph::build(arch) {
            let (_, mut size_violations) = image_sizes_impl(arch, &g, opts.input_size);
            out.append(&mut size_violations);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// JSON

impl Architecture {
    /// Parse the canonical JSON form. Unknown fields, duplicate ids, and
    /// edges naming unknown ids are rejected.
    pub fn parse_json(text: &str) -> Result<Architecture, ArchError> {
        let arch: Architecture = serde_json::from_str(text)?;
        let mut seen = BTreeSet::new();
        for l in &arch.layers {
            if !seen.insert(l.id) {
                return Err(ArchError::DuplicateId(l.id));
            }
        }
        for &(u, v) in &arch.edges {
            if !seen.contains(&u) || !seen.contains(&v) {
                return Err(ArchError::UnknownEdgeEndpoint(u, v));
            }
        }
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serialization cannot fail")
    }

    pub fn from_file(path: &Path) -> Result<Architecture, ArchError> {
        Architecture::parse_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_file(&self, path: &Path) -> Result<(), ArchError> {
        Ok(std::fs::write(path, self.to_json() + "\n")?)
    }

    pub fn layer(&self, id: u32) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn n_processing(&self) -> usize {
        self.layers.iter().filter(|l| l.label.role() == Role::Processing).count()
    }
}

// ---------------------------------------------------------------------------
// Masses

/// Per-layer computational mass, aligned with `arch.layers`.
///
/// A processing layer weighs `units * incoming units`, where pooling layers
/// pass their own incoming count through unchanged and the input layer
/// contributes `input_channels`. Residual blocks weigh twice the matching
/// convolution; fully-connected cnn layers carry a 0.1 multiplier. The input,
/// output, and decision layers share fixed fractions of the processing total:
/// zeta each for ip and op, zeta split evenly across decision layers.
pub fn layer_masses(arch: &Architecture) -> Result<Vec<f64>, ArchError> {
    let g = Graph::build(arch)?;
    let n = g.n;
    // Units a layer presents to its children.
    let mut contrib = vec![0.0f64; n];
    let mut mass = vec![0.0f64; n];
    let mut processing_total = 0.0;
    for &i in &g.topo {
        let l = &arch.layers[i];
        let incoming: f64 = g.parents[i].iter().map(|&p| contrib[p]).sum();
        contrib[i] = match l.label {
            Label::Ip => arch.input_channels as f64,
            _ if l.label.has_units() => l.units.unwrap_or(0) as f64,
            _ => incoming,
        };
        if l.label.role() == Role::Processing {
            let m = if l.label.is_pool() {
                incoming
            } else {
                let mut m = l.units.unwrap_or(0) as f64 * incoming;
                if l.label == Label::Fc {
                    m *= FC_MASS_MULT;
                }
                if l.label.is_res() {
                    m *= RES_MASS_MULT;
                }
                m
            };
            mass[i] = m;
            processing_total += m;
        }
    }
    let k = arch.layers.iter().filter(|l| l.label.role() == Role::Decision).count();
    for (i, l) in arch.layers.iter().enumerate() {
        match l.label.role() {
            Role::Input | Role::Output => mass[i] = ZETA * processing_total,
            Role::Decision => mass[i] = ZETA / k as f64 * processing_total,
            Role::Processing => {}
        }
    }
    Ok(mass)
}

pub fn total_mass(arch: &Architecture) -> Result<f64, ArchError> {
    Ok(layer_masses(arch)?.iter().sum())
}

// ---------------------------------------------------------------------------
// Image sizes

/// Output image edge length per layer for a cnn. Stride-2 convolutions and
/// all pooling layers halve with ceiling division; other layers inherit.
pub fn image_sizes(arch: &Architecture, input_size: u32) -> Result<Vec<u32>, ArchError> {
    if arch.class != NetClass::Cnn {
        return Err(ArchError::NotConvolutional);
    }
    let g = Graph::build(arch)?;
    let (sizes, violations) = image_sizes_impl(arch, &g, input_size);
    match violations.first() {
        None => Ok(sizes),
        Some(Violation::ParentSizeMismatch { id }) => Err(ArchError::SizeMismatch(*id)),
        Some(Violation::DegenerateHalving { id }) => Err(ArchError::DegenerateHalving(*id)),
        Some(_) => unreachable!(),
    }
}

fn image_sizes_impl(
    arch: &Architecture,
    g: &Graph,
    input_size: u32,
) -> (Vec<u32>, Vec<Violation>) {
    let mut sizes = vec![0u32; g.n];
    let mut violations = Vec::new();
    for &i in &g.topo {
        let l = &arch.layers[i];
        if l.label == Label::Ip {
            sizes[i] = input_size;
            continue;
        }
        let first = sizes[g.parents[i][0]];
        if g.parents[i].iter().any(|&p| sizes[p] != first) {
            violations.push(Violation::ParentSizeMismatch { id: l.id });
        }
        let halves = l.label.is_pool()
            || (l.label.takes_stride() && l.stride.unwrap_or(1) == 2);
        sizes[i] = if halves {
            if first <= 1 {
                violations.push(Violation::DegenerateHalving { id: l.id });
                1
            } else {
                first.div_ceil(2)
            }
        } else {
            first
        };
    }
    (sizes, violations)
}

// ---------------------------------------------------------------------------
// Path lengths

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    Shortest,
    Longest,
    RandomWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Anchor {
    FromIp,
    ToOp,
}

/// Label family counted when measuring path lengths. `All` counts every hop;
/// the restricted families count only hops landing on a member layer, with
/// the output layer always counting as one hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelClass {
    All,
    Conv,
    Pool,
    Fc,
    Rect,
    Sigm,
}

impl LabelClass {
    pub fn for_class(class: NetClass) -> &'static [LabelClass] {
        match class {
            NetClass::Cnn => &[LabelClass::All, LabelClass::Conv, LabelClass::Pool, LabelClass::Fc],
            NetClass::Mlp => &[LabelClass::All, LabelClass::Rect, LabelClass::Sigm],
        }
    }

    pub fn applies_to(self, class: NetClass) -> bool {
        match self {
            LabelClass::All => true,
            LabelClass::Conv | LabelClass::Pool | LabelClass::Fc => class == NetClass::Cnn,
            LabelClass::Rect | LabelClass::Sigm => class == NetClass::Mlp,
        }
    }

    fn contains(self, label: Label) -> bool {
        match self {
            LabelClass::All => true,
            LabelClass::Conv => label.is_conv_like(),
            LabelClass::Pool => label.is_pool(),
            LabelClass::Fc => label == Label::Fc,
            LabelClass::Rect => label.is_rectifier(),
            LabelClass::Sigm => label.is_sigmoidal(),
        }
    }

    /// Weight of a hop that lands on `label`.
    fn hop_weight(self, label: Label) -> f64 {
        if label == Label::Op || self.contains(label) {
            1.0
        } else {
            0.0
        }
    }
}

/// Per-layer path length to the output or from the input, as the minimum,
/// maximum, or random-walk expectation over directed paths. Hops landing on
/// layers outside `class` count zero.
pub fn path_lengths(
    arch: &Architecture,
    kind: PathKind,
    anchor: Anchor,
    class: LabelClass,
) -> Result<Vec<f64>, ArchError> {
    if !class.applies_to(arch.class) {
        return Err(ArchError::ClassMismatch(class, arch.class));
    }
    let g = Graph::build(arch)?;
    Ok(path_lengths_impl(arch, &g, kind, anchor, class))
}

fn combine(kind: PathKind, values: impl Iterator<Item = f64>) -> f64 {
    match kind {
        PathKind::Shortest => values.fold(f64::INFINITY, f64::min),
        PathKind::Longest => values.fold(f64::NEG_INFINITY, f64::max),
        PathKind::RandomWalk => {
            let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            sum / count as f64
        }
    }
}

fn path_lengths_impl(
    arch: &Architecture,
    g: &Graph,
    kind: PathKind,
    anchor: Anchor,
    class: LabelClass,
) -> Vec<f64> {
    let mut delta = vec![0.0f64; g.n];
    match anchor {
        Anchor::ToOp => {
            for &i in g.topo.iter().rev() {
                if i == g.op {
                    continue;
                }
                delta[i] = combine(
                    kind,
                    g.children[i]
                        .iter()
                        .map(|&c| class.hop_weight(arch.layers[c].label) + delta[c]),
                );
            }
        }
        Anchor::FromIp => {
            for &i in &g.topo {
                if i == g.ip {
                    continue;
                }
                let w = class.hop_weight(arch.layers[i].label);
                delta[i] = w + combine(kind, g.parents[i].iter().map(|&p| delta[p]));
            }
        }
    }
    delta
}

// ---------------------------------------------------------------------------
// Structural hash

/// Short stable identifier for an architecture's structure, label, and size
/// content. Equal JSON content always hashes equal; the canonical topological
/// order makes the hash independent of id numbering wherever structure
/// disambiguates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchHash(pub String);

impl fmt::Display for ArchHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn structural_hash(arch: &Architecture) -> Result<ArchHash, ArchError> {
    let g = Graph::build(arch)?;
    let mut pos = vec![0usize; g.n];
    for (p, &i) in g.topo.iter().enumerate() {
        pos[i] = p;
    }
    let mut text = format!("{}|{}", arch.class, arch.input_channels);
    for &i in &g.topo {
        let l = &arch.layers[i];
        text.push_str(&format!(
            "|{}:{}:{}",
            l.label,
            l.units.map_or(-1i64, |u| u as i64),
            l.stride.map_or(-1i64, |s| s as i64)
        ));
    }
    let mut edges: Vec<(usize, usize)> = arch
        .edges
        .iter()
        .map(|&(u, v)| {
            let ui = arch.layers.iter().position(|l| l.id == u).unwrap();
            let vi = arch.layers.iter().position(|l| l.id == v).unwrap();
            (pos[ui], pos[vi])
        })
        .collect();
    edges.sort_unstable();
    for (u, v) in edges {
        text.push_str(&format!("|{u}>{v}"));
    }
    let digest = Sha256::digest(text.as_bytes());
    Ok(ArchHash(digest[..8].iter().map(|b| format!("{b:02x}")).collect()))
}

// ---------------------------------------------------------------------------
// Builder

/// Convenience constructor for hand-built architectures. The input layer has
/// id 0 and the output layer id 1; added layers get consecutive ids from 2.
pub struct ArchBuilder {
    arch: Architecture,
    next_id: u32,
}

impl ArchBuilder {
    pub fn new(class: NetClass, input_channels: u32) -> Self {
        let arch = Architecture {
            class,
            input_channels,
            layers: vec![Layer::new(0, Label::Ip), Layer::new(1, Label::Op)],
            edges: Vec::new(),
        };
        ArchBuilder { arch, next_id: 2 }
    }

    pub fn ip(&self) -> u32 {
        0
    }

    pub fn op(&self) -> u32 {
        1
    }

    pub fn layer(&mut self, label: Label, units: impl Into<Option<u32>>) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        self.arch.layers.push(Layer { id, label, units: units.into(), stride: None });
        id
    }

    pub fn strided(&mut self, label: Label, units: impl Into<Option<u32>>, stride: u32) -> u32 {
        let id = self.layer(label, units);
        self.arch.layers.last_mut().unwrap().stride = Some(stride);
        id
    }

    pub fn edge(&mut self, from: u32, to: u32) -> &mut Self {
        self.arch.edges.push((from, to));
        self
    }

    /// Connect consecutive ids in `path` with edges.
    pub fn chain(&mut self, path: &[u32]) -> &mut Self {
        for w in path.windows(2) {
            self.edge(w[0], w[1]);
        }
        self
    }

    pub fn finish(self) -> Architecture {
        self.arch
    }
}

/// Straight ip -> layers -> op chain. Decision layers are given automatically
/// when `tail_decision` is set: a softmax (cnn) or linear (mlp) layer is
/// appended before op.
pub fn chain_arch(
    class: NetClass,
    input_channels: u32,
    spec: &[(Label, Option<u32>, Option<u32>)],
) -> Architecture {
    let mut b = ArchBuilder::new(class, input_channels);
    let mut prev = b.ip();
    for &(label, units, stride) in spec {
        let id = match stride {
            Some(s) => b.strided(label, units, s),
            None => b.layer(label, units),
        };
        b.edge(prev, id);
        prev = id;
    }
    let decision = match class {
        NetClass::Cnn => b.layer(Label::Softmax, None),
        NetClass::Mlp => b.layer(Label::Linear, None),
    };
    b.edge(prev, decision);
    let op = b.op();
    b.edge(decision, op);
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cnn() -> Architecture {
        chain_arch(NetClass::Cnn, 1, &[(Label::Conv3, Some(16), None)])
    }

    #[test]
    fn chain_masses_match_hand_computation() {
        let a = small_cnn();
        let masses = layer_masses(&a).unwrap();
        let by_label: HashMap<Label, f64> =
            a.layers.iter().zip(&masses).map(|(l, &m)| (l.label, m)).collect();
        assert_eq!(by_label[&Label::Conv3], 16.0);
        assert!((by_label[&Label::Softmax] - 1.6).abs() < 1e-12);
        assert!((by_label[&Label::Ip] - 1.6).abs() < 1e-12);
        assert!((by_label[&Label::Op] - 1.6).abs() < 1e-12);
        assert!((total_mass(&a).unwrap() - 20.8).abs() < 1e-12);
    }

    #[test]
    fn fan_in_mass_sums_parent_units() {
        // Two 16-unit parents feeding a 32-unit layer: 32 * (16 + 16).
        let mut b = ArchBuilder::new(NetClass::Cnn, 3);
        let p1 = b.layer(Label::Conv3, 16);
        let p2 = b.layer(Label::Conv5, 16);
        let j = b.layer(Label::Conv3, 32);
        let sm = b.layer(Label::Softmax, None);
        let (ip, op) = (b.ip(), b.op());
        b.edge(ip, p1).edge(ip, p2).edge(p1, j).edge(p2, j).edge(j, sm).edge(sm, op);
        let a = b.finish();
        assert!(validate(&a).is_empty(), "{:?}", validate(&a));
        let masses = layer_masses(&a).unwrap();
        let idx = a.layers.iter().position(|l| l.id == j).unwrap();
        assert_eq!(masses[idx], 1024.0);
    }

    #[test]
    fn res_block_weighs_double() {
        let mut b = ArchBuilder::new(NetClass::Cnn, 3);
        let c = b.layer(Label::Conv3, 8);
        let r = b.layer(Label::Res3, 16);
        let sm = b.layer(Label::Softmax, None);
        let (ip, op) = (b.ip(), b.op());
        b.chain(&[ip, c, r, sm, op]);
        let a = b.finish();
        let masses = layer_masses(&a).unwrap();
        let idx = a.layers.iter().position(|l| l.id == r).unwrap();
        assert_eq!(masses[idx], 256.0);
    }

    #[test]
    fn fc_mass_carries_multiplier() {
        let mut b = ArchBuilder::new(NetClass::Cnn, 3);
        let c = b.layer(Label::Conv3, 16);
        let f = b.layer(Label::Fc, 10);
        let sm = b.layer(Label::Softmax, None);
        let (ip, op) = (b.ip(), b.op());
        b.chain(&[ip, c, f, sm, op]);
        let a = b.finish();
        let masses = layer_masses(&a).unwrap();
        let idx = a.layers.iter().position(|l| l.id == f).unwrap();
        assert!((masses[idx] - 16.0).abs() < 1e-12); // 10 * 16 * 0.1
    }

    #[test]
    fn pooling_passes_units_through() {
        let mut b = ArchBuilder::new(NetClass::Cnn, 3);
        let c = b.layer(Label::Conv3, 16);
        let p = b.layer(Label::MaxPool, None);
        let d = b.layer(Label::Conv3, 8);
        let sm = b.layer(Label::Softmax, None);
        let (ip, op) = (b.ip(), b.op());
        b.chain(&[ip, c, p, d, sm, op]);
        let a = b.finish();
        let masses = layer_masses(&a).unwrap();
        let pi = a.layers.iter().position(|l| l.id == p).unwrap();
        let di = a.layers.iter().position(|l| l.id == d).unwrap();
        assert_eq!(masses[pi], 16.0); // pass-through count
        assert_eq!(masses[di], 128.0); // 8 * 16 through the pool
    }

    #[test]
    fn path_lengths_on_chain() {
        let a = small_cnn(); // ip -> conv3 -> softmax -> op
        for kind in [PathKind::Shortest, PathKind::Longest, PathKind::RandomWalk] {
            let to_op = path_lengths(&a, kind, Anchor::ToOp, LabelClass::All).unwrap();
            let from_ip = path_lengths(&a, kind, Anchor::FromIp, LabelClass::All).unwrap();
            let ip = a.layers.iter().position(|l| l.label == Label::Ip).unwrap();
            let op = a.layers.iter().position(|l| l.label == Label::Op).unwrap();
            assert_eq!(to_op[ip], 3.0);
            assert_eq!(from_ip[op], 3.0);
        }
    }

    #[test]
    fn path_lengths_on_diamond() {
        // ip -> a -> b -> sm -> op with a shortcut ip -> sm.
        let mut b = ArchBuilder::new(NetClass::Mlp, 1);
        let x = b.layer(Label::Relu, 8);
        let y = b.layer(Label::Relu, 8);
        let sm = b.layer(Label::Linear, None);
        let (ip, op) = (b.ip(), b.op());
        b.chain(&[ip, x, y, sm, op]);
        b.edge(ip, sm);
        let a = b.finish();
        assert!(validate(&a).is_empty());
        let ip_idx = a.layers.iter().position(|l| l.label == Label::Ip).unwrap();
        let sp = path_lengths(&a, PathKind::Shortest, Anchor::ToOp, LabelClass::All).unwrap();
        let lp = path_lengths(&a, PathKind::Longest, Anchor::ToOp, LabelClass::All).unwrap();
        let rw = path_lengths(&a, PathKind::RandomWalk, Anchor::ToOp, LabelClass::All).unwrap();
        assert_eq!(sp[ip_idx], 2.0);
        assert_eq!(lp[ip_idx], 4.0);
        assert_eq!(rw[ip_idx], 3.0);
    }

    #[test]
    fn restricted_class_skips_foreign_hops() {
        let a = chain_arch(
            NetClass::Cnn,
            1,
            &[
                (Label::Conv3, Some(16), None),
                (Label::MaxPool, None, None),
                (Label::Conv3, Some(32), None),
            ],
        );
        let ip = a.layers.iter().position(|l| l.label == Label::Ip).unwrap();
        let op = a.layers.iter().position(|l| l.label == Label::Op).unwrap();
        let conv = path_lengths(&a, PathKind::Shortest, Anchor::ToOp, LabelClass::Conv).unwrap();
        assert_eq!(conv[ip], 3.0); // two convs plus the op hop
        let conv_ip =
            path_lengths(&a, PathKind::Shortest, Anchor::FromIp, LabelClass::Conv).unwrap();
        assert_eq!(conv_ip[op], 3.0);
        let pool = path_lengths(&a, PathKind::Longest, Anchor::ToOp, LabelClass::Pool).unwrap();
        assert_eq!(pool[ip], 2.0); // the pool hop plus the op hop
    }

    #[test]
    fn image_sizes_halve_with_ceiling() {
        let a = chain_arch(
            NetClass::Cnn,
            3,
            &[
                (Label::Conv3, Some(16), Some(2)),
                (Label::MaxPool, None, None),
                (Label::Conv3, Some(16), None),
            ],
        );
        let sizes = image_sizes(&a, 9).unwrap();
        let by_label: Vec<(Label, u32)> =
            a.layers.iter().zip(&sizes).map(|(l, &s)| (l.label, s)).collect();
        let size_of = |lab: Label| by_label.iter().find(|(l, _)| *l == lab).unwrap().1;
        assert_eq!(size_of(Label::Ip), 9);
        assert_eq!(size_of(Label::MaxPool), 3); // 9 -> 5 -> 3
        assert_eq!(size_of(Label::Op), 3);
    }

    #[test]
    fn halving_a_unit_image_is_degenerate() {
        let spec: Vec<(Label, Option<u32>, Option<u32>)> =
            (0..6).map(|_| (Label::Conv3, Some(16), Some(2))).collect();
        let a = chain_arch(NetClass::Cnn, 3, &spec);
        // 32 -> 16 -> 8 -> 4 -> 2 -> 1 is fine; the sixth halving is not.
        assert!(matches!(
            image_sizes(&a, 32),
            Err(ArchError::DegenerateHalving(_))
        ));
        let v = validate(&a);
        assert!(v.iter().any(|x| matches!(x, Violation::DegenerateHalving { .. })));
    }

    #[test]
    fn unequal_parent_sizes_are_rejected() {
        let mut b = ArchBuilder::new(NetClass::Cnn, 3);
        let p1 = b.strided(Label::Conv3, 16, 2);
        let p2 = b.layer(Label::Conv3, 16);
        let j = b.layer(Label::Conv3, 16);
        let sm = b.layer(Label::Softmax, None);
        let (ip, op) = (b.ip(), b.op());
        b.edge(ip, p1).edge(ip, p2).edge(p1, j).edge(p2, j).edge(j, sm).edge(sm, op);
        let a = b.finish();
        let v = validate(&a);
        assert!(v.iter().any(|x| matches!(x, Violation::ParentSizeMismatch { .. })));
    }

    #[test]
    fn minimal_shape_rules() {
        let ok = small_cnn();
        assert!(validate(&ok).is_empty());

        let mut no_proc = ok.clone();
        no_proc.layers.retain(|l| l.label != Label::Conv3);
        no_proc.edges.retain(|&(u, v)| {
            ok.layer(u).unwrap().label != Label::Conv3 && ok.layer(v).unwrap().label != Label::Conv3
        });
        no_proc.edges.push((0, no_proc.layers.iter().find(|l| l.label == Label::Softmax).unwrap().id));
        let v = validate(&no_proc);
        assert!(v.contains(&Violation::NoProcessingLayer));

        let mut into_op = ok.clone();
        let conv_id = into_op.layers.iter().find(|l| l.label == Label::Conv3).unwrap().id;
        into_op.edges.push((conv_id, 1));
        let v = validate(&into_op);
        assert!(v.iter().any(|x| matches!(x, Violation::NonDecisionIntoOp { .. })));
    }

    #[test]
    fn json_round_trip_preserves_content() {
        let a = small_cnn();
        let text = a.to_json();
        let back = Architecture::parse_json(&text).unwrap();
        assert_eq!(a, back);
        assert_eq!(structural_hash(&a).unwrap(), structural_hash(&back).unwrap());
    }

    #[test]
    fn unknown_fields_and_bad_ids_are_rejected() {
        let extra = r#"{"class":"cnn","input_channels":1,"layers":[],"edges":[],"note":"x"}"#;
        assert!(Architecture::parse_json(extra).is_err());
        let dup = r#"{"class":"cnn","input_channels":1,
            "layers":[{"id":0,"label":"ip"},{"id":0,"label":"op"}],"edges":[]}"#;
        assert!(matches!(Architecture::parse_json(dup), Err(ArchError::DuplicateId(0))));
        let dangling = r#"{"class":"cnn","input_channels":1,
            "layers":[{"id":0,"label":"ip"},{"id":1,"label":"op"}],"edges":[[0,7]]}"#;
        assert!(matches!(
            Architecture::parse_json(dangling),
            Err(ArchError::UnknownEdgeEndpoint(0, 7))
        ));
    }

    #[test]
    fn label_strings_round_trip() {
        let all = [
            Label::Ip,
            Label::Op,
            Label::Softmax,
            Label::Conv3,
            Label::Conv5,
            Label::Conv7,
            Label::Res3,
            Label::Res5,
            Label::Res7,
            Label::MaxPool,
            Label::AvgPool,
            Label::Fc,
            Label::Linear,
            Label::Relu,
            Label::Crelu,
            Label::LeakyRelu,
            Label::Softplus,
            Label::Elu,
            Label::Logistic,
            Label::Tanh,
        ];
        for l in all {
            let json = serde_json::to_string(&l).unwrap();
            assert_eq!(json, format!("\"{}\"", l.as_str()));
            let back: Label = serde_json::from_str(&json).unwrap();
            assert_eq!(back, l);
        }
    }

    #[test]
    fn hash_ignores_id_numbering() {
        let a = small_cnn();
        let mut b = a.clone();
        // Relabel ids 0,1,2,3 -> 10,11,12,13.
        for l in &mut b.layers {
            l.id += 10;
        }
        for e in &mut b.edges {
            e.0 += 10;
            e.1 += 10;
        }
        assert_eq!(structural_hash(&a).unwrap(), structural_hash(&b).unwrap());
    }

    #[test]
    fn topo_sort_is_canonical() {
        let a = small_cnn();
        let order = topo_sort(&a).unwrap();
        let labels: Vec<Label> =
            order.iter().map(|&id| a.layer(id).unwrap().label).collect();
        assert_eq!(labels, vec![Label::Ip, Label::Conv3, Label::Softmax, Label::Op]);
    }
}
