//! Scenario configuration: a flat TOML file whose first line is the format
//! header. Every key is optional while parsing so that command-line flags
//! can fill or override keys one-for-one; [`ScenarioFile::resolve`] then
//! checks required keys and ranges.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collective::Backend;
use crate::graph::{AnchorRule, GenerationParams};
use crate::localization::LocalizationParams;
use crate::verification::{Orthonormalization, VerificationParams};

pub const SCENARIO_HEADER: &str = "# baryloc-scenario v1";

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line 1: expected header `{SCENARIO_HEADER}`, found `{found}`")]
    Header { found: String },
    #[error("{}{message}", line_prefix(*line))]
    Parse { line: Option<usize>, message: String },
    #[error("missing required key `{field}`")]
    Missing { field: &'static str },
    #[error("{}invalid `{field}`: {message}", line_prefix(*line))]
    Invalid { field: &'static str, line: Option<usize>, message: String },
}

fn line_prefix(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

/// Keys as written in a scenario file; `None` means absent.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub n: Option<usize>,
    pub box_side: Option<f64>,
    pub radius: Option<f64>,
    pub seed: Option<u64>,
    pub anchor_rule: Option<AnchorRule>,
    pub k: Option<usize>,
    pub epsilon1: Option<f64>,
    pub epsilon2: Option<f64>,
    pub iter_max: Option<usize>,
    pub orthonormalization: Option<Orthonormalization>,
    pub tol: Option<f64>,
    pub cg_max_iter: Option<usize>,
    pub gamma: Option<f64>,
    pub omega: Option<f64>,
    pub baseline_iters: Option<usize>,
    pub min_quality: Option<f64>,
    pub backend: Option<Backend>,
    pub output_dir: Option<PathBuf>,
    #[serde(skip)]
    lines: BTreeMap<String, usize>,
}

macro_rules! merge_fields {
    ($base:ident, $over:ident, $($f:ident),*) => {
        $( if $over.$f.is_some() { $base.$f = $over.$f; $base.lines.remove(stringify!($f)); } )*
    };
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let first = text.lines().next().unwrap_or("").trim_end();
        if first != SCENARIO_HEADER {
            return Err(ScenarioError::Header { found: first.to_string() });
        }
        let mut file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.span().map(|s| 1 + text[..s.start.min(text.len())].matches('\n').count()),
            message: e.message().to_string(),
        })?;
        for (i, l) in text.lines().enumerate() {
            if let Some((key, _)) = l.split_once('=') {
                let key = key.trim();
                if !key.starts_with('#') && !key.is_empty() {
                    file.lines.insert(key.to_string(), i + 1);
                }
            }
        }
        Ok(file)
    }

    /// Keys present in `over` replace those in `self`.
    pub fn merge(mut self, over: ScenarioFile) -> ScenarioFile {
        merge_fields!(
            self,
            over,
            n,
            box_side,
            radius,
            seed,
            anchor_rule,
            k,
            epsilon1,
            epsilon2,
            iter_max,
            orthonormalization,
            tol,
            cg_max_iter,
            gamma,
            omega,
            baseline_iters,
            min_quality,
            backend,
            output_dir
        );
        self
    }

    fn line(&self, field: &str) -> Option<usize> {
        self.lines.get(field).copied()
    }

    pub fn resolve(&self) -> Result<Scenario, ScenarioError> {
        let d = Scenario::defaults(0, 0.0, 0.0, 0);
        let s = Scenario {
            n: self.n.ok_or(ScenarioError::Missing { field: "n" })?,
            box_side: self.box_side.ok_or(ScenarioError::Missing { field: "box_side" })?,
            radius: self.radius.ok_or(ScenarioError::Missing { field: "radius" })?,
            seed: self.seed.ok_or(ScenarioError::Missing { field: "seed" })?,
            anchor_rule: self.anchor_rule.unwrap_or(d.anchor_rule),
            k: self.k.unwrap_or(d.k),
            epsilon1: self.epsilon1.unwrap_or(d.epsilon1),
            epsilon2: self.epsilon2.unwrap_or(d.epsilon2),
            iter_max: self.iter_max.unwrap_or(d.iter_max),
            orthonormalization: self.orthonormalization.unwrap_or(d.orthonormalization),
            tol: self.tol.unwrap_or(d.tol),
            cg_max_iter: self.cg_max_iter.or(d.cg_max_iter),
            gamma: self.gamma.or(d.gamma),
            omega: self.omega.unwrap_or(d.omega),
            baseline_iters: self.baseline_iters.or(d.baseline_iters),
            min_quality: self.min_quality.unwrap_or(d.min_quality),
            backend: self.backend.unwrap_or(d.backend),
            output_dir: self.output_dir.clone(),
        };
        let bad = |field: &'static str, message: &str| ScenarioError::Invalid {
            field,
            line: self.line(field),
            message: message.to_string(),
        };
        if s.n < 5 {
            return Err(bad("n", "need at least 5 nodes (4 anchors and a free node)"));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(s.box_side) {
            return Err(bad("box_side", "must be positive"));
        }
        if !positive(s.radius) {
            return Err(bad("radius", "must be positive"));
        }
        if s.k == 0 {
            return Err(bad("k", "must be at least 1"));
        }
        if !positive(s.epsilon1) {
            return Err(bad("epsilon1", "must be positive"));
        }
        if !positive(s.epsilon2) {
            return Err(bad("epsilon2", "must be positive"));
        }
        if s.iter_max == 0 {
            return Err(bad("iter_max", "must be at least 1"));
        }
        if !positive(s.tol) {
            return Err(bad("tol", "must be positive"));
        }
        if let Some(g) = s.gamma {
            if !positive(g) {
                return Err(bad("gamma", "must be positive"));
            }
        }
        if !(s.omega > 0.0 && s.omega <= 1.0) {
            return Err(bad("omega", "must lie in (0, 1]"));
        }
        if !(s.min_quality >= 0.0 && s.min_quality.is_finite()) {
            return Err(bad("min_quality", "must be non-negative"));
        }
        Ok(s)
    }
}

/// A fully specified scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub n: usize,
    pub box_side: f64,
    pub radius: f64,
    pub seed: u64,
    pub anchor_rule: AnchorRule,
    /// K of the consensus sums
    pub k: usize,
    /// zero-eigenvalue threshold, relative to the largest eigenvalue
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub iter_max: usize,
    pub orthonormalization: Orthonormalization,
    pub tol: f64,
    /// 3n_z + 5 when absent
    pub cg_max_iter: Option<usize>,
    /// 1/λ_max when absent
    pub gamma: Option<f64>,
    pub omega: f64,
    /// the CG iteration count when absent
    pub baseline_iters: Option<usize>,
    pub min_quality: f64,
    pub backend: Backend,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn defaults(n: usize, box_side: f64, radius: f64, seed: u64) -> Self {
        let v = VerificationParams::default();
        let l = LocalizationParams::default();
        Scenario {
            n,
            box_side,
            radius,
            seed,
            anchor_rule: AnchorRule::Random,
            k: 1,
            epsilon1: v.epsilon1,
            epsilon2: v.epsilon2,
            iter_max: v.iter_max,
            orthonormalization: v.orthonormalization,
            tol: l.tol,
            cg_max_iter: None,
            gamma: None,
            omega: 0.5,
            baseline_iters: None,
            min_quality: 1e-2,
            backend: Backend::Direct,
            output_dir: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        ScenarioFile::parse(text)?.resolve()
    }

    pub fn generation(&self) -> GenerationParams {
        GenerationParams {
            n: self.n,
            box_side: self.box_side,
            radius: self.radius,
            anchor_rule: self.anchor_rule,
            seed: self.seed,
        }
    }

    pub fn verification(&self) -> VerificationParams {
        VerificationParams {
            epsilon1: self.epsilon1,
            epsilon2: self.epsilon2,
            iter_max: self.iter_max,
            k: self.k,
            seed: self.seed,
            orthonormalization: self.orthonormalization,
            backend: self.backend,
            ..VerificationParams::default()
        }
    }

    pub fn localization(&self) -> LocalizationParams {
        LocalizationParams {
            k: self.k,
            tol: self.tol,
            max_iter: self.cg_max_iter,
            seed: self.seed,
            box_side: self.box_side,
            backend: self.backend,
            ..LocalizationParams::default()
        }
    }

    /// The scenario as a file that parses back to itself.
    pub fn to_file_text(&self) -> String {
        let mut out = format!("{SCENARIO_HEADER}\n");
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        line("n", self.n.to_string());
        line("box_side", format!("{:?}", self.box_side));
        line("radius", format!("{:?}", self.radius));
        line("seed", self.seed.to_string());
        line("anchor_rule", format!("\"{}\"", self.anchor_rule));
        line("k", self.k.to_string());
        line("epsilon1", format!("{:?}", self.epsilon1));
        line("epsilon2", format!("{:?}", self.epsilon2));
        line("iter_max", self.iter_max.to_string());
        line("orthonormalization", format!("\"{}\"", self.orthonormalization));
        line("tol", format!("{:?}", self.tol));
        if let Some(m) = self.cg_max_iter {
            line("cg_max_iter", m.to_string());
        }
        if let Some(g) = self.gamma {
            line("gamma", format!("{g:?}"));
        }
        line("omega", format!("{:?}", self.omega));
        if let Some(b) = self.baseline_iters {
            line("baseline_iters", b.to_string());
        }
        line("min_quality", format!("{:?}", self.min_quality));
        line("backend", format!("\"{}\"", self.backend));
        out
    }
}
