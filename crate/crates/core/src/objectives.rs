//! Objectives for architecture search: synthetic benchmark functions over
//! graph statistics, and external evaluator commands.

use std::fmt;
use std::io::Write;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archgraph::{
    self, Anchor, ArchError, Architecture, Label, LabelClass, NetClass, PathKind, Role,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("{0} does not apply to {1} networks")]
    WrongClass(Synthetic, NetClass),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("external command failed with status {0}")]
    CommandFailed(i32),
    #[error("external command produced no parseable value: {0:?}")]
    BadOutput(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Aggregate graph statistics the synthetic objectives are built from.
#[derive(Debug, Clone, Serialize)]
pub struct ArchStats {
    pub total_mass: f64,
    /// Mean degree; in- and out-degree means coincide at |edges| / |layers|.
    pub mean_degree: f64,
    /// Shortest input-to-output hop count.
    pub depth: f64,
    pub n_layers: usize,
    pub n_edges: usize,
    /// Mean stride over conv and res layers (cnn; 0 when there are none).
    pub stride_avg: f64,
    /// Fraction of processing layers labelled conv3 (cnn).
    pub frac_conv3: f64,
    /// Fraction of processing layers with a sigmoidal label (mlp).
    pub frac_sigmoid: f64,
}

pub fn stats(arch: &Architecture) -> Result<ArchStats, ArchError> {
    let total_mass = archgraph::total_mass(arch)?;
    let depths =
        archgraph::path_lengths(arch, PathKind::Shortest, Anchor::FromIp, LabelClass::All)?;
    let op = arch.layers.iter().position(|l| l.label == Label::Op).unwrap();
    let n_layers = arch.layers.len();
    let n_edges = arch.edges.len();
    let n_processing = arch.n_processing().max(1);
    let conv_like: Vec<&_> =
        arch.layers.iter().filter(|l| l.label.is_conv_like()).collect();
    let stride_avg = if conv_like.is_empty() {
        0.0
    } else {
        conv_like.iter().map(|l| l.stride.unwrap_or(1) as f64).sum::<f64>()
            / conv_like.len() as f64
    };
    let count = |pred: fn(Label) -> bool| {
        arch.layers
            .iter()
            .filter(|l| l.label.role() == Role::Processing && pred(l.label))
            .count() as f64
    };
    Ok(ArchStats {
        total_mass,
        mean_degree: n_edges as f64 / n_layers as f64,
        depth: depths[op],
        n_layers,
        n_edges,
        stride_avg,
        frac_conv3: count(|l| l == Label::Conv3) / n_processing as f64,
        frac_sigmoid: count(Label::is_sigmoidal) / n_processing as f64,
    })
}

/// The synthetic benchmark objectives. `F0` applies to both classes, `F1` to
/// cnn networks, `F2` and `F3` to mlp networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Synthetic {
    F0,
    F1,
    F2,
    F3,
}

impl fmt::Display for Synthetic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Synthetic::F0 => "f0",
            Synthetic::F1 => "f1",
            Synthetic::F2 => "f2",
            Synthetic::F3 => "f3",
        })
    }
}

impl std::str::FromStr for Synthetic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f0" => Ok(Synthetic::F0),
            "f1" => Ok(Synthetic::F1),
            "f2" => Ok(Synthetic::F2),
            "f3" => Ok(Synthetic::F3),
            _ => Err(format!("unknown objective {s:?} (expected f0..f3)")),
        }
    }
}

fn peak(scale: f64, x: f64, target: f64) -> f64 {
    (-scale * (x - target).abs()).exp()
}

impl Synthetic {
    pub fn applies_to(self, class: NetClass) -> bool {
        match self {
            Synthetic::F0 => true,
            Synthetic::F1 => class == NetClass::Cnn,
            Synthetic::F2 | Synthetic::F3 => class == NetClass::Mlp,
        }
    }

    pub fn eval_stats(self, s: &ArchStats) -> f64 {
        let base = peak(0.001, s.total_mass, 1000.0)
            + 2.0 * peak(0.5, s.mean_degree, 5.0)
            + peak(0.1, s.depth, 5.0)
            + peak(0.1, s.n_layers as f64, 30.0)
            + peak(0.05, s.n_edges as f64, 100.0);
        match self {
            Synthetic::F0 => base,
            Synthetic::F1 => {
                base + peak(3.0, s.stride_avg, 1.5)
                    + peak(0.3, s.n_layers as f64, 50.0)
                    + peak(0.001, s.total_mass, 500.0)
                    + s.frac_conv3
            }
            Synthetic::F2 => {
                base + peak(0.001, s.total_mass, 2000.0)
                    + peak(0.1, s.n_edges as f64, 50.0)
                    + s.frac_sigmoid
            }
            Synthetic::F3 => base + s.frac_sigmoid,
        }
    }

    pub fn eval(self, arch: &Architecture) -> Result<f64, ObjectiveError> {
        if !self.applies_to(arch.class) {
            return Err(ObjectiveError::WrongClass(self, arch.class));
        }
        Ok(self.eval_stats(&stats(arch)?))
    }
}

/// Shell command template evaluated per architecture. `{arch}` is replaced
/// with the path of a JSON file holding the candidate; the last line of
/// stdout must parse as a float.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub template: String,
}

impl ExternalCommand {
    pub fn eval(&self, arch: &Architecture) -> Result<f64, ObjectiveError> {
        let mut file = tempfile_json()?;
        file.write_all(arch.to_json().as_bytes())?;
        file.flush()?;
        let cmd = self.template.replace("{arch}", &file.path().display().to_string());
        let output = Command::new("sh").arg("-c").arg(&cmd).output()?;
        if !output.status.success() {
            return Err(ObjectiveError::CommandFailed(output.status.code().unwrap_or(-1)));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let last = stdout.lines().rev().find(|l| !l.trim().is_empty());
        last.and_then(|l| l.trim().parse::<f64>().ok())
            .ok_or_else(|| ObjectiveError::BadOutput(stdout.trim().to_string()))
    }
}

// Minimal named-temp-file shim so the library does not depend on tempfile.
struct TempJson {
    path: std::path::PathBuf,
    file: std::fs::File,
}

impl TempJson {
    fn path(&self) -> &std::path::Path {
        &self.path
    }
}

impl Write for TempJson {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

impl Drop for TempJson {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn tempfile_json() -> std::io::Result<TempJson> {
    use std::time::{SystemTime, UNIX_EPOCH};
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_nanos();
    let path = std::env::temp_dir()
        .join(format!("arch-{}-{}.json", std::process::id(), nanos));
    let file = std::fs::File::create(&path)?;
    Ok(TempJson { path, file })
}

/// Anything the search loop can optimise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectiveSpec {
    Synthetic { name: Synthetic },
    External { command: ExternalCommand },
}

impl ObjectiveSpec {
    pub fn synthetic(name: Synthetic) -> Self {
        ObjectiveSpec::Synthetic { name }
    }

    pub fn external(template: impl Into<String>) -> Self {
        ObjectiveSpec::External { command: ExternalCommand { template: template.into() } }
    }

    pub fn applies_to(&self, class: NetClass) -> bool {
        match self {
            ObjectiveSpec::Synthetic { name } => name.applies_to(class),
            ObjectiveSpec::External { .. } => true,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, ObjectiveSpec::Synthetic { .. })
    }

    pub fn eval(&self, arch: &Architecture) -> Result<f64, ObjectiveError> {
        match self {
            ObjectiveSpec::Synthetic { name } => name.eval(arch),
            ObjectiveSpec::External { command } => command.eval(arch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archgraph::chain_arch;

    #[test]
    fn base_objective_peaks_at_six() {
        let s = ArchStats {
            total_mass: 1000.0,
            mean_degree: 5.0,
            depth: 5.0,
            n_layers: 30,
            n_edges: 100,
            stride_avg: 0.0,
            frac_conv3: 0.0,
            frac_sigmoid: 0.0,
        };
        assert!((Synthetic::F0.eval_stats(&s) - 6.0).abs() < 1e-12);
        // Any deviation from a target strictly lowers the corresponding term.
        let mut worse = s.clone();
        worse.total_mass = 1100.0;
        assert!(Synthetic::F0.eval_stats(&worse) < 6.0);
    }

    #[test]
    fn chain_statistics() {
        let a = chain_arch(NetClass::Cnn, 1, &[(Label::Conv3, Some(16), None)]);
        let s = stats(&a).unwrap();
        assert!((s.total_mass - 20.8).abs() < 1e-12);
        assert_eq!(s.n_layers, 4);
        assert_eq!(s.n_edges, 3);
        assert!((s.mean_degree - 0.75).abs() < 1e-12);
        assert_eq!(s.depth, 3.0);
        assert_eq!(s.frac_conv3, 1.0);
        assert_eq!(s.stride_avg, 1.0);
    }

    #[test]
    fn sigmoid_fraction_counts_processing_only() {
        let a = chain_arch(
            NetClass::Mlp,
            1,
            &[
                (Label::Relu, Some(16), None),
                (Label::Tanh, Some(16), None),
                (Label::Logistic, Some(16), None),
                (Label::Elu, Some(16), None),
            ],
        );
        let s = stats(&a).unwrap();
        assert!((s.frac_sigmoid - 0.5).abs() < 1e-12);
        assert_eq!(s.frac_conv3, 0.0);
    }

    #[test]
    fn class_gating() {
        let cnn = chain_arch(NetClass::Cnn, 1, &[(Label::Conv3, Some(16), None)]);
        let mlp = chain_arch(NetClass::Mlp, 1, &[(Label::Relu, Some(16), None)]);
        assert!(Synthetic::F1.eval(&cnn).is_ok());
        assert!(Synthetic::F1.eval(&mlp).is_err());
        assert!(Synthetic::F2.eval(&mlp).is_ok());
        assert!(Synthetic::F2.eval(&cnn).is_err());
        assert!(Synthetic::F3.eval(&cnn).is_err());
        assert!(Synthetic::F0.eval(&cnn).is_ok());
        assert!(Synthetic::F0.eval(&mlp).is_ok());
    }

    #[test]
    fn objective_names_parse() {
        assert_eq!("f2".parse::<Synthetic>().unwrap(), Synthetic::F2);
        assert!("f9".parse::<Synthetic>().is_err());
    }

    #[test]
    fn external_command_reads_last_line() {
        let a = chain_arch(NetClass::Cnn, 1, &[(Label::Conv3, Some(16), None)]);
        let cmd = ExternalCommand {
            template: "cat {arch} > /dev/null && printf 'log line\\n 2.5 \\n'".into(),
        };
        assert_eq!(cmd.eval(&a).unwrap(), 2.5);

        let failing = ExternalCommand { template: "exit 3".into() };
        assert!(matches!(failing.eval(&a), Err(ObjectiveError::CommandFailed(3))));

        let garbled = ExternalCommand { template: "echo not-a-number".into() };
        assert!(matches!(garbled.eval(&a), Err(ObjectiveError::BadOutput(_))));
    }
}
