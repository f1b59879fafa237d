//! TOML run configuration.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use weakloc_core::disorder::RateKind;
use weakloc_core::expr::Expr;
use weakloc_core::{DisorderLaw, GridSpec, Mode, ModelParams, TransversalBc};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub model: ModelSection,
    pub disorder: DisorderSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub mode: Mode,
    pub lateral_cell_lengths: Vec<f64>,
    #[serde(default = "one")]
    pub transversal_width: f64,
    pub mesh_lateral: usize,
    #[serde(default = "mesh_default")]
    pub mesh_transversal: usize,
    #[serde(default = "dirichlet_pair")]
    pub transversal_bc: [TransversalBc; 2],
    /// Background potential as an expression in `z`.
    #[serde(default)]
    pub v0: Expr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(flatten)]
    pub params: ModelParams,
    /// Coefficient of the synthetic constant third-order term.
    #[serde(default)]
    pub l3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisorderSection {
    pub density: Expr,
    pub b: f64,
    #[serde(default)]
    pub mean_abs: Option<f64>,
    #[serde(default)]
    pub mean_deficit: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub t0: f64,
    #[serde(default = "one")]
    pub big_t: f64,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default = "n_default")]
    pub n_cells: Vec<usize>,
    #[serde(default = "samples_default")]
    pub samples: usize,
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "deltas_default")]
    pub deltas: Vec<f64>,
    #[serde(default = "true_value")]
    pub periodic: bool,
    #[serde(default = "c0_default")]
    pub c0_init: f64,
    #[serde(default = "pilot_default")]
    pub pilot: usize,
    /// Wegner energies; empty selects four points below the regime edge.
    #[serde(default)]
    pub energies: Vec<f64>,
    /// Wegner window widths as fractions of (Λ₀ − E)/4.
    #[serde(default = "kappa_default")]
    pub kappa_fractions: Vec<f64>,
    #[serde(default)]
    pub tau: Option<u32>,
    #[serde(default = "rate_kind_default")]
    pub rate_kind: RateKind,
    #[serde(default = "one")]
    pub rate_constant: f64,
    #[serde(default = "one")]
    pub sup_a_sq: f64,
    /// Random configurations added to the extreme ones when bounding C_b and D.
    #[serde(default = "constant_samples_default")]
    pub constant_samples: usize,
    #[serde(default)]
    pub msa: MsaGeometry,
}

/// Box sides (in cells) of the resolvent-inequality checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsaGeometry {
    pub sli_outer: usize,
    pub sli_inner: usize,
    pub sli_offset: usize,
    pub edi_big: usize,
    pub edi_inner: usize,
    pub edi_offset: usize,
    pub instances: usize,
}

impl Default for MsaGeometry {
    fn default() -> Self {
        MsaGeometry { sli_outer: 14, sli_inner: 7, sli_offset: 3, edi_big: 24, edi_inner: 8, edi_offset: 8, instances: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub orthogonality: f64,
    pub cross_term: f64,
    pub gap_margin: f64,
    pub bracket: f64,
    pub mezincescu: f64,
    pub wilson_confidence: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { orthogonality: 1e-10, cross_term: 1e-8, gap_margin: 1e-9, bracket: 1e-9, mezincescu: 1e-8, wilson_confidence: 0.99 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: String,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { directory: "weakloc-out".into(), formats: vec![Format::Json, Format::Csv] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

fn one() -> f64 {
    1.0
}
fn mesh_default() -> usize {
    16
}
fn dirichlet_pair() -> [TransversalBc; 2] {
    [TransversalBc::Dirichlet; 2]
}
fn n_default() -> Vec<usize> {
    vec![2, 4]
}
fn samples_default() -> usize {
    50
}
fn deltas_default() -> Vec<f64> {
    (3..=9).map(|k| 2f64.powi(-k)).collect()
}
fn true_value() -> bool {
    true
}
fn c0_default() -> f64 {
    4096.0
}
fn pilot_default() -> usize {
    1000
}
fn kappa_default() -> Vec<f64> {
    vec![0.5, 0.25, 0.125, 0.0625]
}
fn constant_samples_default() -> usize {
    32
}
fn rate_kind_default() -> RateKind {
    RateKind::Linear
}

/// Malformed configuration with a 1-based source position when known.
#[derive(Debug)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

impl ConfigError {
    fn plain(message: impl Into<String>) -> Self {
        ConfigError { line: None, column: None, message: message.into() }
    }
}

fn position(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.chars().rev().take_while(|&c| c != '\n').count() + 1;
    (line, column)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = match e.span() {
                Some(s) => {
                    let (l, c) = position(text, s.start);
                    (Some(l), Some(c))
                }
                None => (None, None),
            };
            ConfigError { line, column, message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::plain(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let x = &self.experiment;
        if !(x.t0 > 0.0) {
            return Err(ConfigError::plain("experiment.t0 must be positive"));
        }
        if let Some(e) = x.epsilons.iter().find(|&&e| !(e > 0.0 && e <= x.t0)) {
            return Err(ConfigError::plain(format!("epsilon {e} outside (0, t0 = {}]", x.t0)));
        }
        if x.n_cells.contains(&0) {
            return Err(ConfigError::plain("experiment.n_cells entries must be positive"));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        let g = &self.grid;
        match g.mode {
            Mode::WholeSpace => GridSpec::whole_space(g.lateral_cell_lengths.clone(), g.mesh_lateral),
            Mode::Layer => GridSpec::layer(
                g.lateral_cell_lengths.clone(),
                g.transversal_width,
                g.mesh_lateral,
                g.mesh_transversal,
                g.transversal_bc,
            ),
        }
    }

    pub fn law(&self) -> weakloc_core::Result<DisorderLaw> {
        let d = &self.disorder;
        let law = DisorderLaw::new(d.density.clone(), d.b)?;
        if let (Some(a), Some(m)) = (d.mean_abs, d.mean_deficit) {
            law.check_moments(a, m)?;
        }
        Ok(law)
    }
}
