//! Experiment configuration, orchestration and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::{assemble_h, block_audit, channel_sites, extended_mourre_form, mourre_form_for};
use crate::error::{Error, Result};
use crate::geometry::{layered_config, minimal_config, CornerModel, GeometryConfig, LayeredSpec, ProductFactor};
use crate::linalg::{cdiff_norm, cnorm, lanczos_lowest, CVec};
use crate::oracle::{
    comparator_curve, factor_phase, parseval_defect, quadrant_eigfunction_fit, stationary_phase_decay, ProductModel,
};
use crate::propagation::{
    cauchy_tails, gamma_plus, propagation_integral, reflection_time, DenseEvolution, Propagator, PropagatorSpec,
};
use crate::scattering::{
    band_limited_profile, cesaro_curve, completeness_decompose, cross_decay_rate, escape_curve, fit_cross_decay,
    gaussian_profile, gram, recompose, scattering_matrix, ChannelPacket, CompletenessOptions, GammaBasis,
    PacketVariant, Scatterer, Sign, WaveKind, WaveSeries, OMEGA_PRINTED,
};
use crate::sparse::SparseHermitian;
use crate::spectral::{mourre_check, spectral_projection, ChannelSpectrum, MourreForm};
use crate::yafaev::{Yafaev, YafaevConfig};

/// Experiments the orchestrator can schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    AssembleAudit,
    YafaevAudit,
    Propagation,
    Mourre,
    Ruelle,
    Waveops,
    Omega,
    Gram,
    Completeness,
    Smatrix,
    OracleCompare,
}

impl Experiment {
    pub const ALL: [Experiment; 11] = [
        Experiment::AssembleAudit,
        Experiment::YafaevAudit,
        Experiment::Propagation,
        Experiment::Mourre,
        Experiment::Ruelle,
        Experiment::Waveops,
        Experiment::Omega,
        Experiment::Gram,
        Experiment::Completeness,
        Experiment::Smatrix,
        Experiment::OracleCompare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::AssembleAudit => "assemble-audit",
            Experiment::YafaevAudit => "yafaev-audit",
            Experiment::Propagation => "propagation",
            Experiment::Mourre => "mourre",
            Experiment::Ruelle => "ruelle",
            Experiment::Waveops => "waveops",
            Experiment::Omega => "omega",
            Experiment::Gram => "gram",
            Experiment::Completeness => "completeness",
            Experiment::Smatrix => "smatrix",
            Experiment::OracleCompare => "oracle-compare",
        }
    }
}

/// One factor of a product geometry: a path with an optional well and a
/// one-site cross-section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub len: usize,
    #[serde(default)]
    pub well: Option<(usize, f64)>,
    #[serde(default)]
    pub cross: f64,
}

impl FactorSpec {
    pub fn factor(&self) -> Result<ProductFactor> {
        if self.len == 0 {
            return Err(Error::InvalidParameter("product factor needs at least one site".into()));
        }
        if let Some((site, _)) = self.well {
            if site >= self.len {
                return Err(Error::OutOfRange { index: site, dim: self.len });
            }
        }
        Ok(ProductFactor::path(self.len, self.well, self.cross))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductSpec {
    pub p: FactorSpec,
    pub q: FactorSpec,
    pub h: f64,
    pub box_lengths: [usize; 2],
}

/// Geometry reference of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometrySource {
    Layered(LayeredSpec),
    Minimal { l1: usize, l2: usize, h: f64 },
    Product(ProductSpec),
    Custom { config: GeometryConfig },
    /// JSON [`GeometryConfig`] file, relative paths resolved against the
    /// experiment config's directory.
    File { path: PathBuf },
}

/// Doubling time grid `t_max / 2^j`, `j = levels - 1, ..., 0`, with
/// `t_max = t_max_fraction * reflection time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeGrid {
    pub t_max_fraction: f64,
    pub levels: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            t_max_fraction: 0.8,
            levels: 7,
        }
    }
}

impl TimeGrid {
    pub fn times(&self, reflection: f64) -> Vec<f64> {
        let t_max = self.t_max_fraction * reflection;
        (0..self.levels).rev().map(|j| t_max / 2f64.powi(j as i32)).collect()
    }
}

/// Half-line profile of a packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Gaussian { center: f64, width: f64, momentum: f64 },
    /// Sine-transform support inside `(k_lo, k_hi)`.
    Band { k_lo: f64, k_hi: f64, center: f64 },
}

impl Profile {
    pub fn build(&self, len: usize, h: f64) -> Result<CVec> {
        match *self {
            Profile::Gaussian { center, width, momentum } => {
                if !(width > 0.0) {
                    return Err(Error::InvalidParameter(format!("Gaussian width {width}")));
                }
                Ok(gaussian_profile(len, h, center, width, momentum))
            }
            Profile::Band { k_lo, k_hi, center } => band_limited_profile(len, h, k_lo, k_hi, center),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RecipeVariant {
    /// Profile times the `index`-th bound state of `H^(k)`.
    Pp { index: usize },
    /// Profile times a cross-section state projected off the bound states;
    /// drawn from the seed when not given.
    Ac {
        #[serde(default)]
        cross: Option<Vec<f64>>,
    },
    /// `a(u1) c(u2) phi(y)`; `phi` constant when not given.
    Quadrant {
        #[serde(default)]
        fiber: Option<Vec<f64>>,
    },
}

/// Dense-set packet recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketRecipe {
    #[serde(default)]
    pub label: Option<String>,
    pub channel: u8,
    pub variant: RecipeVariant,
    pub profile: Profile,
    /// Profile along `u2` for quadrant packets (defaults to `profile`).
    #[serde(default)]
    pub profile2: Option<Profile>,
}

impl PacketRecipe {
    pub fn label(&self, i: usize) -> String {
        self.label.clone().unwrap_or_else(|| format!("packet{i}"))
    }

    pub fn kind(&self) -> WaveKind {
        match self.variant {
            RecipeVariant::Pp { .. } => WaveKind::Pp(self.channel),
            RecipeVariant::Ac { .. } => WaveKind::Ac(self.channel),
            RecipeVariant::Quadrant { .. } => WaveKind::Quadrant,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match self.variant {
            RecipeVariant::Pp { .. } | RecipeVariant::Ac { .. } => matches!(self.channel, 1 | 2),
            RecipeVariant::Quadrant { .. } => self.channel == 3,
        };
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "recipe {:?} does not fit channel {}",
                self.variant, self.channel
            )));
        }
        Ok(())
    }
}

/// Gaussian quadrant probe state `exp(-|u-c|^2/2w^2 + i k.u) / sqrt(|Y|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrantProbe {
    pub center: [f64; 2],
    pub width: f64,
    pub momentum: [f64; 2],
}

/// Free half-line settings for the oracle comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreeLineOptions {
    pub h: f64,
    pub len: usize,
    pub band: (f64, f64),
    pub center: f64,
    pub comparator_times: Vec<f64>,
    pub decay_times: Vec<f64>,
    pub high_band: (f64, f64),
    pub high_len: usize,
    pub high_center: f64,
    /// Times after transit; the mass at the last one is checked.
    pub high_times: Vec<f64>,
}

impl Default for FreeLineOptions {
    fn default() -> Self {
        Self {
            h: 0.1,
            len: 2000,
            band: (0.5, 1.0),
            center: 2.0,
            comparator_times: vec![8.0, 16.0, 32.0, 64.0],
            decay_times: (1..=40).map(|i| 2.0 * i as f64).collect(),
            high_band: (2.0, 4.0),
            high_len: 4000,
            high_center: 4.0,
            high_times: vec![40.0, 50.0, 60.0],
        }
    }
}

/// Per-experiment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    pub spectrum_count: usize,
    pub audit_samples: usize,
    pub audit_extent: f64,
    pub exponent_times: Vec<f64>,
    pub exponent_grid: usize,
    /// Box length of the dense-oracle model (layered, dimension 400 at 8).
    pub dense_box: usize,
    pub dense_times: Vec<f64>,
    pub drift_time: f64,
    pub probe: QuadrantProbe,
    pub integral_step: f64,
    pub gamma_deltas: Vec<f64>,
    pub mourre_offset: f64,
    pub mourre_width: f64,
    pub mourre_pad: usize,
    pub mourre_rank: usize,
    pub projection_budget: usize,
    pub escape_radii: Vec<f64>,
    pub cesaro_radius: f64,
    pub cesaro_dt: f64,
    pub cesaro_probe: QuadrantProbe,
    pub cross_times: Vec<f64>,
    pub omega_coefficient: f64,
    /// Second coefficient logged next to the printed one.
    pub omega_reference: f64,
    pub completeness_times: Vec<f64>,
    pub krylov_dim: usize,
    /// Quadrant profile of the completeness probe (both axes).
    pub completeness_profile: Profile,
    pub oracle_times: Vec<f64>,
    pub phase_momenta: Vec<f64>,
    pub free_line: FreeLineOptions,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            spectrum_count: 6,
            audit_samples: 10_000,
            audit_extent: 60.0,
            exponent_times: (0..=12).map(|i| 10f64.powf(i as f64 / 4.0)).collect(),
            exponent_grid: 60,
            dense_box: 8,
            dense_times: vec![1.0, 5.0, 20.0],
            drift_time: 20.0,
            probe: QuadrantProbe {
                center: [20.0, 20.0],
                width: 8.0,
                momentum: [0.25, 0.25],
            },
            integral_step: 1.0,
            gamma_deltas: vec![0.6, 0.45],
            mourre_offset: 0.3,
            mourre_width: 0.05,
            mourre_pad: 2,
            mourre_rank: 10,
            projection_budget: 400,
            escape_radii: vec![20.0, 30.0, 40.0],
            cesaro_radius: 10.0,
            cesaro_dt: 0.5,
            cesaro_probe: QuadrantProbe {
                center: [6.0, 6.0],
                width: 2.0,
                momentum: [1.2, 1.2],
            },
            cross_times: (2..=20).map(|i| 0.5 * i as f64).collect(),
            omega_coefficient: OMEGA_PRINTED,
            omega_reference: 1.0,
            completeness_times: vec![20.0, 40.0],
            krylov_dim: 30,
            completeness_profile: Profile::Band {
                k_lo: 0.3,
                k_hi: 0.6,
                center: 30.0,
            },
            oracle_times: vec![5.0, 20.0, 40.0],
            phase_momenta: vec![0.3, 0.7, 1.1, 1.5],
            free_line: FreeLineOptions::default(),
        }
    }
}

/// Pass thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub hermiticity: f64,
    pub kronecker: f64,
    pub partition: f64,
    pub homogeneity: f64,
    pub convexity: f64,
    pub linear_cone: f64,
    pub gradient_fd: f64,
    pub exponent: f64,
    pub unitarity_drift: f64,
    pub dense_agreement: f64,
    pub mourre_slack: f64,
    pub escape: f64,
    pub cesaro: f64,
    pub isometry: f64,
    pub gram_off_diagonal: f64,
    pub cross_rate_relative: f64,
    pub omega: f64,
    pub completeness: f64,
    pub completeness_quadrant: f64,
    pub oracle: f64,
    pub parseval: f64,
    pub decay_exponent: f64,
    pub high_momentum_mass: f64,
    pub phase_unitarity: f64,
    pub fit_relative: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            hermiticity: 1e-12,
            kronecker: 0.0,
            partition: 1e-8,
            homogeneity: 1e-10,
            convexity: 1e-10,
            linear_cone: 1e-10,
            gradient_fd: 1e-5,
            exponent: 0.05,
            unitarity_drift: 1e-9,
            dense_agreement: 1e-8,
            mourre_slack: 0.1,
            escape: 1e-3,
            cesaro: 0.05,
            isometry: 5e-2,
            gram_off_diagonal: 1e-2,
            cross_rate_relative: 0.2,
            omega: 5e-2,
            completeness: 5e-2,
            completeness_quadrant: 0.1,
            oracle: 1e-6,
            parseval: 1e-12,
            decay_exponent: -1.5,
            high_momentum_mass: 1e-8,
            phase_unitarity: 1e-10,
            fit_relative: 0.05,
        }
    }
}

/// Top-level experiment configuration (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub geometry: GeometrySource,
    #[serde(default)]
    pub yafaev: YafaevConfig,
    #[serde(default)]
    pub propagator: PropagatorSpec,
    #[serde(default)]
    pub time_grid: TimeGrid,
    #[serde(default)]
    pub packets: Vec<PacketRecipe>,
    pub experiments: Vec<Experiment>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub options: Options,
}

fn default_name() -> String {
    "run".into()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config and resolves a relative geometry file against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let GeometrySource::File { path: g } = &mut cfg.geometry {
            if g.is_relative() {
                if let Some(dir) = path.parent() {
                    *g = dir.join(&*g);
                }
            }
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }
}

/// Validated inputs shared by all experiments of a run.
pub struct Context {
    pub config: ExperimentConfig,
    pub model: CornerModel,
    pub h: SparseHermitian,
    pub product: Option<ProductModel>,
    pub yafaev: Yafaev,
    pub reflection_time: f64,
    pub times: Vec<f64>,
}

impl Context {
    /// Builds the model and checks every precondition that does not need a
    /// numerical solve.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let (model, product) = match &config.geometry {
            GeometrySource::Layered(spec) => (CornerModel::build(&layered_config(spec))?, None),
            GeometrySource::Minimal { l1, l2, h } => (CornerModel::build(&minimal_config(*l1, *l2, *h))?, None),
            GeometrySource::Product(p) => {
                let pm = ProductModel::new(&p.p.factor()?, &p.q.factor()?, p.h, p.box_lengths)?;
                (pm.model.clone(), Some(pm))
            }
            GeometrySource::Custom { config } => (CornerModel::build(config)?, None),
            GeometrySource::File { path } => {
                let g: GeometryConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
                (CornerModel::build(&g)?, None)
            }
        };
        let yafaev = Yafaev::new(config.yafaev)?;
        if config.experiments.is_empty() {
            return Err(Error::InvalidParameter("no experiments configured".into()));
        }
        if config.experiments.contains(&Experiment::OracleCompare) && product.is_none() {
            return Err(Error::InvalidParameter("oracle-compare needs a product geometry".into()));
        }
        if !(config.time_grid.t_max_fraction > 0.0 && config.time_grid.t_max_fraction <= 1.0) || config.time_grid.levels == 0 {
            return Err(Error::InvalidParameter("time grid needs t_max_fraction in (0, 1] and levels >= 1".into()));
        }
        for r in &config.packets {
            r.check()?;
        }
        let h = assemble_h(&model);
        let reflection = reflection_time(&model);
        let times = config.time_grid.times(reflection);
        Ok(Self {
            config,
            model,
            h,
            product,
            yafaev,
            reflection_time: reflection,
            times,
        })
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    fn scatterer(&self) -> Result<Scatterer<'_>> {
        Scatterer::new(&self.model, &self.h, self.config.propagator)
    }
}

/// Deterministic packets from recipes. Recipe `i` draws from its own
/// stream `seed + i`.
pub fn generate_packets(recipes: &[PacketRecipe], seed: u64, scat: &Scatterer) -> Result<Vec<ChannelPacket>> {
    let model = scat.model;
    recipes
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.check()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            match &r.variant {
                RecipeVariant::Pp { index } => {
                    let chan = scat.chan(r.channel)?;
                    let a = r.profile.build(chan.left.len(), model.h)?;
                    ChannelPacket::pp(chan, *index, &a)
                }
                RecipeVariant::Ac { cross } => {
                    let chan = scat.chan(r.channel)?;
                    let a = r.profile.build(chan.left.len(), model.h)?;
                    let c = match cross {
                        Some(c) => c.clone(),
                        None => (0..chan.right.len()).map(|_| rng.gen::<f64>() - 0.5).collect(),
                    };
                    ChannelPacket::ac(chan, &a, &c)
                }
                RecipeVariant::Quadrant { fiber } => {
                    let a = r.profile.build(model.l1, model.h)?;
                    let c = r.profile2.as_ref().unwrap_or(&r.profile).build(model.l2, model.h)?;
                    let phi = fiber
                        .clone()
                        .unwrap_or_else(|| vec![1.0 / (model.y_dim as f64).sqrt(); model.y_dim]);
                    ChannelPacket::quadrant(model, &a, &c, &phi)
                }
            }
        })
        .collect()
}

/// Normalised Gaussian probe on the quadrant sites of `model`.
pub fn quadrant_probe(model: &CornerModel, p: &QuadrantProbe) -> Result<CVec> {
    let a = gaussian_profile(model.l1, model.h, p.center[0], p.width, p.momentum[0]);
    let c = gaussian_profile(model.l2, model.h, p.center[1], p.width, p.momentum[1]);
    let phi = vec![1.0 / (model.y_dim as f64).sqrt(); model.y_dim];
    let f = ChannelPacket::quadrant(model, &a, &c, &phi)?;
    let mut out = vec![Complex64::default(); model.dim()];
    for (&s, x) in channel_sites(model, 3)?.iter().zip(&f.amps) {
        out[s] = *x;
    }
    Ok(out)
}

fn conj(v: &[Complex64]) -> CVec {
    v.iter().map(|z| z.conj()).collect()
}

/// Comparison of a measured value against a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
    Holds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub relation: Relation,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            relation: Relation::AtMost,
            pass: value <= limit,
        }
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            relation: Relation::AtLeast,
            pass: value >= limit,
        }
    }

    pub fn holds(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            limit: 1.0,
            relation: Relation::Holds,
            pass: ok,
        }
    }
}

/// Row of a time-series CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeRow {
    pub t: f64,
    pub observable: String,
    pub value: f64,
    pub cauchy_tail: f64,
    pub valid: bool,
}

/// File produced by an experiment, relative to the experiment directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    #[serde(skip)]
    pub contents: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    ConfigError,
    NumericalError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub status: Status,
    pub checks: Vec<Check>,
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<OutputFile>,
    pub error: Option<String>,
}

impl ExperimentReport {
    fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            status: Status::Pass,
            checks: Vec::new(),
            metrics: BTreeMap::new(),
            files: Vec::new(),
            error: None,
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    fn metric_set(&mut self, name: &str, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    fn push(&mut self, c: Check) {
        self.checks.push(c);
    }

    fn file(&mut self, name: &str, contents: String) {
        self.files.push(OutputFile {
            name: name.into(),
            contents,
        });
    }

    fn finish(mut self) -> Self {
        if self.checks.iter().any(|c| !c.pass) {
            self.status = Status::Fail;
        }
        self
    }
}

/// Exit code for an error: 3 for numerical failures, 2 otherwise.
pub fn error_status(e: &Error) -> Status {
    if e.is_numerical() || matches!(e, Error::Rejected(_)) {
        Status::NumericalError
    } else {
        Status::ConfigError
    }
}

/// CSV field, quoted when it contains a separator or quote.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn time_csv(rows: &[TimeRow]) -> String {
    let mut s = String::from("t,observable,value,cauchy_tail,reflection_time_flag\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.t,
            csv_field(&r.observable),
            r.value,
            r.cauchy_tail,
            if r.valid { "valid" } else { "reflected" }
        );
    }
    s
}

fn series_rows(rows: &mut Vec<TimeRow>, name: &str, s: &WaveSeries) {
    for ((&t, &d), &tail) in s.times.iter().zip(&s.defects).zip(&s.tails) {
        rows.push(TimeRow {
            t,
            observable: name.into(),
            value: d,
            cauchy_tail: tail,
            valid: t < s.reflection_time,
        });
    }
}

fn plain_rows(rows: &mut Vec<TimeRow>, name: &str, times: &[f64], values: &[f64], reflection: f64) {
    let tails = cauchy_tails(values);
    for ((&t, &v), &c) in times.iter().zip(values).zip(&tails) {
        rows.push(TimeRow {
            t,
            observable: name.into(),
            value: v,
            cauchy_tail: c,
            valid: t < reflection,
        });
    }
}

fn matrix_csv(labels: &[String], m: &nalgebra::DMatrix<Complex64>) -> String {
    let mut s = String::from("row,col,row_label,col_label,re,im\n");
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let _ = writeln!(
                s,
                "{i},{j},{},{},{},{}",
                csv_field(&labels[i]),
                csv_field(&labels[j]),
                m[(i, j)].re,
                m[(i, j)].im
            );
        }
    }
    s
}

fn spectrum_csv(spec: &ChannelSpectrum) -> String {
    let mut s = String::from("k,index,eigenvalue,residual,decay_ratio,bound\n");
    for r in spec.rows() {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.k, r.index, r.eigenvalue, r.residual, r.decay_ratio, r.bound);
    }
    s
}

fn monotone_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

/// Runs one experiment; errors are folded into the report status.
pub fn run_experiment(ctx: &Context, e: Experiment) -> ExperimentReport {
    let out = match e {
        Experiment::AssembleAudit => assemble_audit(ctx),
        Experiment::YafaevAudit => yafaev_audit(ctx),
        Experiment::Propagation => propagation(ctx),
        Experiment::Mourre => mourre(ctx),
        Experiment::Ruelle => ruelle(ctx),
        Experiment::Waveops => waveops(ctx),
        Experiment::Omega => omega(ctx),
        Experiment::Gram => gram_experiment(ctx),
        Experiment::Completeness => completeness(ctx),
        Experiment::Smatrix => smatrix(ctx),
        Experiment::OracleCompare => oracle_compare(ctx),
    };
    match out {
        Ok(r) => r.finish(),
        Err(err) => {
            let mut r = ExperimentReport::new(e);
            r.status = error_status(&err);
            r.error = Some(err.to_string());
            r
        }
    }
}

fn assemble_audit(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let mut r = ExperimentReport::new(Experiment::AssembleAudit);
    r.push(Check::at_most("hermiticity", ctx.h.hermiticity_defect(), th.hermiticity));
    let blocks = block_audit(&ctx.model, &ctx.h)?;
    for (k, g) in blocks.iter().enumerate() {
        r.push(Check::at_most(&format!("channel{}_block", k + 1), *g, th.kronecker));
    }
    if let Some(pm) = &ctx.product {
        r.push(Check::at_most("product_kronecker", pm.kronecker_defect(&ctx.h), th.kronecker));
    }
    let a = mourre_form_for(&ctx.model);
    r.metric_set("mourre_form_hermiticity", a.hermiticity_defect());
    r.metric_set("dimension", ctx.model.dim() as f64);
    r.metric_set("nnz", ctx.h.nnz() as f64);
    let spec = ChannelSpectrum::compute(&ctx.model, ctx.config.options.spectrum_count)?;
    r.metric_set("sigma", spec.sigma);
    r.file("spectra.csv", spectrum_csv(&spec));
    Ok(r)
}

fn yafaev_audit(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let o = &ctx.config.options;
    let y = &ctx.yafaev;
    let mut r = ExperimentReport::new(Experiment::YafaevAudit);
    let a = y.audit(o.audit_samples, o.audit_extent, ctx.config.seed);
    let field = y.model_field(&ctx.model);
    r.push(Check::at_most("partition_sites", field.partition_defect(), th.partition));
    r.push(Check::at_most("partition_samples", a.partition, th.partition));
    r.push(Check::at_most("support_exclusion", a.support_exclusion as f64, 0.0));
    r.push(Check::at_most("homogeneity", a.homogeneity, th.homogeneity));
    r.push(Check::at_most("convexity", a.convexity, th.convexity));
    r.push(Check::at_most("linear_first_cone", a.linear_first_cone, th.linear_cone));
    r.push(Check::at_most("gradient_fd", a.gradient_fd, th.gradient_fd));
    let ex = y.derivative_exponents(&o.exponent_times, o.exponent_grid)?;
    r.push(Check::at_most("exponent_grad", (ex.grad - ex.expected[0]).abs(), th.exponent));
    r.push(Check::at_most("exponent_hess", (ex.hess - ex.expected[1]).abs(), th.exponent));
    r.metric_set("exponent_grad_value", ex.grad);
    r.metric_set("exponent_hess_value", ex.hess);
    r.metric_set("exponent_hess_tail", ex.hess_tail);
    r.metric_set("exponent_dt", ex.dt);
    r.metric_set("exponent_dtt", ex.dtt);
    r.metric_set("smooth_vs_discrete", a.smooth_vs_discrete);
    r.metric_set("hessian_min", a.hessian_min);
    r.metric_set("tie_events", a.tie_events as f64);
    let mut buf = Vec::new();
    field.write_csv(&mut buf)?;
    r.file("field.csv", String::from_utf8_lossy(&buf).into_owned());
    let mut s = String::from("t,grad,hess,dt,dtt\n");
    for d in &ex.sups {
        let _ = writeln!(s, "{},{},{},{},{}", d.t, d.grad, d.hess, d.dt, d.dtt);
    }
    r.file("exponents.csv", s);
    Ok(r)
}

fn propagation(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let o = &ctx.config.options;
    let mut r = ExperimentReport::new(Experiment::Propagation);
    let mut rows = Vec::new();
    let prop = Propagator::new(&ctx.h, ctx.config.propagator);
    let psi = quadrant_probe(&ctx.model, &o.probe)?;

    let drift_times: Vec<f64> = (1..=4).map(|i| o.drift_time * i as f64 / 4.0).collect();
    let states = prop.series(&psi, &drift_times)?;
    let drift = drift_times
        .iter()
        .zip(&states)
        .map(|(t, s)| (cnorm(s) - 1.0).abs() / t)
        .fold(0.0, f64::max);
    r.push(Check::at_most("unitarity_drift_per_time", drift, th.unitarity_drift));

    let small = CornerModel::build(&layered_config(&LayeredSpec {
        box_len: o.dense_box,
        ..layered_spec_of(ctx)
    }))?;
    let hs = assemble_h(&small);
    let dense = DenseEvolution::new(&hs)?;
    let sp = Propagator::new(&hs, ctx.config.propagator);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed);
    let v: CVec = (0..hs.dim())
        .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
        .collect();
    let nv = cnorm(&v);
    let v: CVec = v.into_iter().map(|z| z / nv).collect();
    let mut agree = 0.0f64;
    for &t in &o.dense_times {
        agree = agree.max(cdiff_norm(&sp.propagate(&v, t)?, &dense.propagate(&v, t)));
    }
    r.push(Check::at_most("dense_oracle", agree, th.dense_agreement));
    r.metric_set("dense_dimension", hs.dim() as f64);

    let steps = (ctx.t_max() / o.integral_step).floor() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| 1.0 + o.integral_step * i as f64).filter(|&t| t <= ctx.t_max()).collect();
    let pi = propagation_integral(&ctx.model, &prop, &ctx.yafaev, &psi, &grid)?;
    r.push(Check::holds("integral_plateau", pi.plateau));
    r.metric_set("integral_ratio", pi.ratio);
    r.metric_set("integral_tail_growth", pi.tail_growth);
    r.metric_set("integral_decay_exponent", pi.decay_exponent);
    r.metric_set("integral_min_integrand", pi.min_integrand);
    plain_rows(&mut rows, "hessian_integrand", &pi.times, &pi.integrand, ctx.reflection_time);
    plain_rows(&mut rows, "hessian_partial_sum", &pi.times, &pi.partial, ctx.reflection_time);

    let mut estimates = Vec::new();
    for &d in &o.gamma_deltas {
        let y = Yafaev::new(YafaevConfig {
            delta: d,
            ..ctx.config.yafaev
        })?;
        let g = gamma_plus(&ctx.model, &prop, &y, &psi, &ctx.times)?;
        plain_rows(&mut rows, &format!("gamma_plus_delta{d}"), &g.times, &g.gamma, ctx.reflection_time);
        r.metric_set(&format!("gamma_plus_delta{d}"), g.estimates[0]);
        r.metric_set(&format!("gamma_plus_tail_delta{d}"), g.tails[0]);
        estimates.push((g.estimates[0], g.tails[0]));
    }
    if estimates.len() >= 2 {
        let (a, ta) = estimates[0];
        let gap = estimates[1..]
            .iter()
            .map(|(b, tb)| (a - b).abs() - ta - tb)
            .fold(f64::NEG_INFINITY, f64::max);
        r.push(Check::at_most("gamma_plus_delta_gap_minus_tails", gap, 0.0));
    }
    r.file("timeseries.csv", time_csv(&rows));
    Ok(r)
}

fn layered_spec_of(ctx: &Context) -> LayeredSpec {
    match &ctx.config.geometry {
        GeometrySource::Layered(s) => *s,
        _ => LayeredSpec::default(),
    }
}

fn mourre(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let o = &ctx.config.options;
    let mut r = ExperimentReport::new(Experiment::Mourre);
    let spec = ChannelSpectrum::compute(&ctx.model, o.spectrum_count)?;
    let lambda = spec.sigma + o.mourre_offset;
    let half = 0.5 * o.mourre_width;
    let window = spectral_projection(&ctx.h, lambda - half, lambda + half, o.projection_budget)?;
    let theta = spec.theta(lambda);
    let ext = extended_mourre_form(&ctx.model, o.mourre_pad)?;
    let cert = mourre_check(&window, &ext, MourreForm::Extended, lambda, th.mourre_slack, theta, o.mourre_rank);
    let boxed = mourre_check(
        &window,
        &mourre_form_for(&ctx.model),
        MourreForm::Box,
        lambda,
        th.mourre_slack,
        theta,
        o.mourre_rank,
    );
    r.push(Check::holds("certificate", cert.pass && !cert.vacuous));
    r.metric_set("lambda", lambda);
    r.metric_set("theta", theta);
    r.metric_set("projector_rank", cert.projector_rank as f64);
    r.metric_set("deflation_rank", cert.rank as f64);
    r.metric_set("lambda_min", cert.lambda_min);
    r.metric_set("box_lambda_min", boxed.lambda_min);
    r.metric_set("box_trace", boxed.trace);
    r.file("certificate.json", serde_json::to_string_pretty(&[&cert, &boxed])?);
    let mut s = String::from("k,index,eigenvalue,residual,decay_ratio\n");
    for (i, v) in window.pairs.values.iter().enumerate() {
        let vec = window.pairs.vector(i);
        let res = crate::linalg::residual(&ctx.h, *v, &vec);
        let _ = writeln!(s, "0,{i},{v},{res},NaN");
    }
    r.file("window.csv", s);
    r.file("spectra.csv", spectrum_csv(&spec));
    Ok(r)
}

fn ruelle(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let o = &ctx.config.options;
    let mut r = ExperimentReport::new(Experiment::Ruelle);
    let mut rows = Vec::new();
    let prop = Propagator::new(&ctx.h, ctx.config.propagator);
    let spec = ChannelSpectrum::compute(&ctx.model, o.spectrum_count)?;
    let low = lanczos_lowest(&ctx.h, 1, spec.sigma, 1e-10, 200, ctx.config.seed)?;
    if low.is_empty() || low.values[0] >= spec.sigma {
        return Err(Error::InvalidParameter("H has no eigenvalue below the essential spectrum".into()));
    }
    r.metric_set("eigenvalue", low.values[0]);
    let psi: CVec = low.vector(0).into_iter().map(|x| Complex64::new(x, 0.0)).collect();
    let esc = escape_curve(&ctx.model, &prop, &psi, &o.escape_radii, &ctx.times)?;
    let worst = esc.iter().filter(|(rad, _)| *rad >= 20.0).map(|x| x.1).fold(0.0, f64::max);
    r.push(Check::at_most("eigenvector_escape", worst, th.escape));
    let mut s = String::from("radius,sup_escape\n");
    for (rad, v) in &esc {
        let _ = writeln!(s, "{rad},{v}");
    }
    r.file("escape.csv", s);

    let probe = quadrant_probe(&ctx.model, &o.cesaro_probe)?;
    let curve = cesaro_curve(&ctx.model, &prop, &probe, o.cesaro_radius, o.cesaro_dt, ctx.reflection_time)?;
    let first = curve.iter().find(|(_, v)| *v < th.cesaro).map(|x| x.0);
    let crossing = first.unwrap_or(f64::INFINITY);
    r.push(Check::at_most("cesaro_crossing_time_minus_reflection", crossing - ctx.reflection_time, 0.0));
    r.metric_set("cesaro_crossing_time", crossing);
    r.metric_set("cesaro_threshold", th.cesaro);
    r.metric_set("cesaro_final", curve.last().map_or(f64::NAN, |x| x.1));
    let (ts, vs): (Vec<f64>, Vec<f64>) = curve.into_iter().unzip();
    plain_rows(&mut rows, "cesaro_inside_mass", &ts, &vs, ctx.reflection_time);
    r.file("timeseries.csv", time_csv(&rows));
    Ok(r)
}

/// Images and series of every recipe under both signs, in parallel.
fn all_series(ctx: &Context, scat: &Scatterer, packets: &[ChannelPacket]) -> Result<Vec<(String, WaveSeries)>> {
    let jobs: Vec<(usize, Sign)> = (0..packets.len())
        .flat_map(|i| [(i, Sign::Plus), (i, Sign::Minus)])
        .collect();
    jobs.par_iter()
        .map(|&(i, sign)| {
            let rec = &ctx.config.packets[i];
            let f = match sign {
                Sign::Plus => packets[i].amps.clone(),
                Sign::Minus => conj(&packets[i].amps),
            };
            let s = scat.series(rec.kind(), sign, &f, &ctx.times)?;
            let tag = match sign {
                Sign::Plus => "plus",
                Sign::Minus => "minus",
            };
            Ok((format!("{}_{}_{tag}", rec.label(i), rec.kind().label()), s))
        })
        .collect()
}

fn waveops(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let o = &ctx.config.options;
    let mut r = ExperimentReport::new(Experiment::Waveops);
    let scat = ctx.scatterer()?;
    let packets = generate_packets(&ctx.config.packets, ctx.config.seed, &scat)?;
    if packets.is_empty() {
        return Err(Error::InvalidParameter("waveops needs packet recipes".into()));
    }
    let series = all_series(ctx, &scat, &packets)?;
    let mut rows = Vec::new();
    let mut report = crate::scattering::ScatteringReport::default();
    for (name, s) in &series {
        series_rows(&mut rows, name, s);
        let last = *s.defects.last().unwrap_or(&f64::NAN);
        r.push(Check::at_most(&format!("isometry_{name}"), last, th.isometry));
        r.push(Check::holds(&format!("monotone_{name}"), s.defects_monotone(0.0)));
        r.metric_set(&format!("tail_{name}"), *s.tails.last().unwrap_or(&f64::NAN));
        report.waves.push(s.into());
    }
    let pp_of = |k: u8| {
        ctx.config
            .packets
            .iter()
            .position(|p| matches!(p.variant, RecipeVariant::Pp { .. }) && p.channel == k)
    };
    if let (Some(i1), Some(i2)) = (pp_of(1), pp_of(2)) {
        let q: Vec<f64> = o
            .cross_times
            .iter()
            .map(|&t| scat.pp_cross(&packets[i1].amps, &packets[i2].amps, Sign::Plus, t).map(|z| z.norm()))
            .collect::<Result<_>>()?;
        let fitted = fit_cross_decay(&o.cross_times, &q);
        let spec = ChannelSpectrum::compute(&ctx.model, o.spectrum_count)?;
        let (cont, lattice) = cross_decay_rate(&spec, ctx.model.h)?;
        r.push(Check::at_most("cross_rate_relative_error", (fitted - cont).abs() / cont, th.cross_rate_relative));
        r.metric_set("cross_rate_fitted", fitted);
        r.metric_set("cross_rate_continuum", cont);
        r.metric_set("cross_rate_lattice", lattice);
        plain_rows(&mut rows, "pp_cross", &o.cross_times, &q, ctx.reflection_time);
    }
    r.file("timeseries.csv", time_csv(&rows));
    r.file("report.json", serde_json::to_string_pretty(&report)?);
    Ok(r)
}

fn gram_experiment(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let mut r = ExperimentReport::new(Experiment::Gram);
    let scat = ctx.scatterer()?;
    let packets = generate_packets(&ctx.config.packets, ctx.config.seed, &scat)?;
    if packets.is_empty() {
        return Err(Error::InvalidParameter("gram needs packet recipes".into()));
    }
    let t = ctx.t_max();
    for sign in [Sign::Plus, Sign::Minus] {
        let images = packets
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let f = if sign == Sign::Plus { p.amps.clone() } else { conj(&p.amps) };
                scat.image(ctx.config.packets[i].kind(), sign, &f, t)
            })
            .collect::<Result<Vec<_>>>()?;
        let g = gram(&images);
        let kinds: Vec<String> = ctx.config.packets.iter().map(|p| p.kind().label()).collect();
        let mut cross = 0.0f64;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                if kinds[i] != kinds[j] {
                    cross = cross.max(g[(i, j)].norm());
                }
            }
        }
        let tag = if sign == Sign::Plus { "plus" } else { "minus" };
        r.push(Check::at_most(&format!("cross_channel_off_diagonal_{tag}"), cross, th.gram_off_diagonal));
        let labels: Vec<String> = ctx
            .config
            .packets
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}:{}", p.label(i), p.kind().label()))
            .collect();
        r.file(&format!("gram_{tag}.csv"), matrix_csv(&labels, &g));
    }
    r.metric_set("t", t);
    Ok(r)
}

fn omega(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let o = &ctx.config.options;
    let mut r = ExperimentReport::new(Experiment::Omega);
    let scat = ctx.scatterer()?;
    let packets = generate_packets(&ctx.config.packets, ctx.config.seed, &scat)?;
    let fs: Vec<CVec> = packets
        .iter()
        .filter(|p| p.variant == PacketVariant::Quadrant)
        .map(|p| p.amps.clone())
        .collect();
    if fs.is_empty() {
        return Err(Error::InvalidParameter("omega needs quadrant packet recipes".into()));
    }
    r.metric_set("basis_size", fs.len() as f64);
    let gf = gram(&fs);
    let mut rows = Vec::new();
    for (label, c) in [("printed", o.omega_coefficient), ("reference", o.omega_reference)] {
        let defects = ctx
            .times
            .par_iter()
            .map(|&t| {
                let images = fs
                    .iter()
                    .map(|f| scat.image(WaveKind::Omega(c), Sign::Plus, f, t))
                    .collect::<Result<Vec<_>>>()?;
                Ok((&gram(&images) - &gf).iter().map(|z| z.norm()).fold(0.0, f64::max))
            })
            .collect::<Result<Vec<f64>>>()?;
        plain_rows(&mut rows, &format!("omega_defect_{label}"), &ctx.times, &defects, ctx.reflection_time);
        let last = *defects.last().unwrap_or(&f64::NAN);
        r.metric_set(&format!("defect_{label}"), last);
        r.metric_set(&format!("coefficient_{label}"), c);
        if label == "printed" {
            r.push(Check::at_most("omega_defect", last, th.omega));
            r.push(Check::holds("omega_defect_decreasing", monotone_decreasing(&defects)));
        } else {
            r.metric_set("reference_decreasing", f64::from(u8::from(monotone_decreasing(&defects))));
        }
    }
    r.file("timeseries.csv", time_csv(&rows));
    Ok(r)
}

fn completeness(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let o = &ctx.config.options;
    let mut r = ExperimentReport::new(Experiment::Completeness);
    let mut rows = Vec::new();
    let opts_at = |t: f64| CompletenessOptions {
        t,
        omega_coefficient: o.omega_coefficient,
        basis: GammaBasis::Krylov(o.krylov_dim),
        ..Default::default()
    };
    let scat = ctx.scatterer()?;
    let packets = generate_packets(&ctx.config.packets, ctx.config.seed, &scat)?;
    if let Some(i) = ctx.config.packets.iter().position(|p| !matches!(p.variant, RecipeVariant::Quadrant { .. })) {
        let psi = scat.image(ctx.config.packets[i].kind(), Sign::Plus, &packets[i].amps, ctx.t_max())?;
        let mut res = Vec::new();
        for &t in &o.completeness_times {
            let d = completeness_decompose(&scat, &ctx.yafaev, None, &psi, Sign::Plus, &opts_at(t))?;
            res.push(d.residual);
            r.metric_set(&format!("image_solve_residual_t{t}"), d.solve.residual);
        }
        plain_rows(&mut rows, "image_round_trip", &o.completeness_times, &res, ctx.reflection_time);
        r.push(Check::at_most("image_round_trip", *res.last().unwrap_or(&f64::NAN), th.completeness));
    }

    let mut finals = Vec::new();
    for factor in [1usize, 2] {
        let model = ctx.model.with_box(ctx.model.l1 * factor, ctx.model.l2 * factor)?;
        let h = assemble_h(&model);
        let sc = Scatterer::new(&model, &h, ctx.config.propagator)?;
        let a = o.completeness_profile.build(model.l1, model.h)?;
        let c = o.completeness_profile.build(model.l2, model.h)?;
        let phi = vec![1.0 / (model.y_dim as f64).sqrt(); model.y_dim];
        let f = ChannelPacket::quadrant(&model, &a, &c, &phi)?;
        let psi = sc.chan(3)?.embed(&f.amps);
        let mut res = Vec::new();
        let mut alt = Vec::new();
        for &t in &o.completeness_times {
            let d = completeness_decompose(&sc, &ctx.yafaev, None, &psi, Sign::Plus, &opts_at(t))?;
            let (rec, _) = recompose(&sc, &d.pp, &d.quadrant, t, o.omega_reference)?;
            res.push(d.residual);
            alt.push(cdiff_norm(&psi, &rec) / cnorm(&psi));
        }
        let l = model.l1;
        plain_rows(&mut rows, &format!("quadrant_round_trip_L{l}"), &o.completeness_times, &res, reflection_time(&model));
        plain_rows(
            &mut rows,
            &format!("quadrant_round_trip_reference_L{l}"),
            &o.completeness_times,
            &alt,
            reflection_time(&model),
        );
        let last = *res.last().unwrap_or(&f64::NAN);
        let last_alt = *alt.last().unwrap_or(&f64::NAN);
        r.metric_set(&format!("quadrant_residual_L{l}"), last);
        r.metric_set(&format!("quadrant_residual_reference_L{l}"), last_alt);
        finals.push((last, last_alt));
    }
    r.push(Check::at_most("quadrant_round_trip", finals[0].0, th.completeness_quadrant));
    r.push(Check::holds("quadrant_decreasing_with_box", finals[1].0 < finals[0].0));
    r.metric_set(
        "reference_decreasing_with_box",
        f64::from(u8::from(finals[1].1 < finals[0].1)),
    );
    r.file("timeseries.csv", time_csv(&rows));
    Ok(r)
}

fn smatrix(ctx: &Context) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new(Experiment::Smatrix);
    let scat = ctx.scatterer()?;
    let packets = generate_packets(&ctx.config.packets, ctx.config.seed, &scat)?;
    let Some(first) = ctx.config.packets.first() else {
        return Err(Error::InvalidParameter("smatrix needs packet recipes".into()));
    };
    let kind = first.kind();
    let idx: Vec<usize> = (0..packets.len()).filter(|&i| ctx.config.packets[i].kind() == kind).collect();
    let t = ctx.t_max();
    let (plus, minus) = images_pm(&scat, kind, idx.iter().map(|&i| &packets[i].amps), t)?;
    let s = scattering_matrix(&minus, &plus)?;
    r.metric_set("unitarity_defect", s.unitarity_defect);
    r.metric_set("condition", s.condition);
    r.metric_set("residual", s.residual);
    let labels: Vec<String> = idx.iter().map(|&i| ctx.config.packets[i].label(i)).collect();
    r.file("smatrix.csv", matrix_csv(&labels, &s.s));
    Ok(r)
}

fn images_pm<'a>(
    scat: &Scatterer,
    kind: WaveKind,
    fs: impl Iterator<Item = &'a CVec>,
    t: f64,
) -> Result<(Vec<CVec>, Vec<CVec>)> {
    let fs: Vec<&CVec> = fs.collect();
    let plus = fs
        .par_iter()
        .map(|f| scat.image(kind, Sign::Plus, f, t))
        .collect::<Result<Vec<_>>>()?;
    let minus = fs
        .par_iter()
        .map(|f| scat.image(kind, Sign::Minus, f, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((plus, minus))
}

fn oracle_compare(ctx: &Context) -> Result<ExperimentReport> {
    let th = &ctx.config.thresholds;
    let o = &ctx.config.options;
    let pm = ctx
        .product
        .as_ref()
        .ok_or(Error::InvalidParameter("oracle-compare needs a product geometry".into()))?;
    let mut r = ExperimentReport::new(Experiment::OracleCompare);
    let mut rows = Vec::new();
    let scat = ctx.scatterer()?;
    let packets = generate_packets(&ctx.config.packets, ctx.config.seed, &scat)?;
    let times = &o.oracle_times;

    let mut kinds: Vec<(String, WaveKind, usize)> = Vec::new();
    for (i, p) in ctx.config.packets.iter().enumerate() {
        kinds.push((p.label(i), p.kind(), i));
        if p.kind() == WaveKind::Quadrant {
            kinds.push((format!("{}_omega", p.label(i)), WaveKind::Omega(o.omega_coefficient), i));
        }
    }
    let results = kinds
        .par_iter()
        .flat_map_iter(|k| [Sign::Plus, Sign::Minus].map(|s| (k.clone(), s)))
        .map(|((label, kind, i), sign)| {
            let chan = scat.chan(kind.input_channel())?;
            let f = if sign == Sign::Plus { packets[i].amps.clone() } else { conj(&packets[i].amps) };
            let mut gaps = Vec::new();
            let mut pipe = Vec::new();
            for &t in times {
                let a = scat.image(kind, sign, &f, t)?;
                let b = pm.image(chan, kind, sign, &f, t)?;
                gaps.push(cdiff_norm(&a, &b));
                pipe.push(a);
            }
            let tails: Vec<f64> = std::iter::once(0.0)
                .chain(pipe.windows(2).map(|w| cdiff_norm(&w[0], &w[1])))
                .collect();
            Ok((format!("{label}_{}_{sign:?}", kind.label()), gaps, tails))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut worst = f64::NEG_INFINITY;
    for (name, gaps, tails) in &results {
        for ((&t, &g), &c) in times.iter().zip(gaps).zip(tails) {
            worst = worst.max(g - c);
            rows.push(TimeRow {
                t,
                observable: format!("oracle_gap_{name}"),
                value: g,
                cauchy_tail: c,
                valid: t < ctx.reflection_time,
            });
        }
        r.metric_set(&format!("gap_{name}"), gaps.iter().copied().fold(0.0, f64::max));
    }
    r.push(Check::at_most("wave_vectors_gap_minus_tail", worst, th.oracle));

    if let Some(first) = ctx.config.packets.first() {
        let kind = first.kind();
        let idx: Vec<usize> = (0..packets.len()).filter(|&i| ctx.config.packets[i].kind() == kind).collect();
        let chan = scat.chan(kind.input_channel())?;
        let t = ctx.t_max();
        let (plus, minus) = images_pm(&scat, kind, idx.iter().map(|&i| &packets[i].amps), t)?;
        let s_pipe = scattering_matrix(&minus, &plus)?;
        let fs: Vec<CVec> = idx.iter().map(|&i| packets[i].amps.clone()).collect();
        let s_exact = pm.scattering_matrix(chan, kind, &fs, &fs, t)?;
        let s_half = pm.scattering_matrix(chan, kind, &fs, &fs, 0.5 * t)?;
        let gap = (&s_pipe.s - &s_exact.s).iter().map(|z| z.norm()).fold(0.0, f64::max);
        let tail = (&s_exact.s - &s_half.s).iter().map(|z| z.norm()).fold(0.0, f64::max);
        r.push(Check::at_most("smatrix_gap_minus_tail", gap - tail, th.oracle));
        r.metric_set("smatrix_gap", gap);
        r.metric_set("smatrix_tail", tail);
        r.metric_set("oracle_s_unitarity_defect", s_exact.unitarity_defect);
    }

    let p_factor = match &ctx.config.geometry {
        GeometrySource::Product(p) => p.p.factor()?,
        _ => unreachable!("product geometry checked above"),
    };
    let phase = o
        .phase_momenta
        .iter()
        .map(|&k| factor_phase(&p_factor, ctx.model.h, k).map(|s| (s.norm() - 1.0).abs()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    r.push(Check::at_most("factor_phase_unitarity", phase, th.phase_unitarity));

    let fl = &o.free_line;
    let a = band_limited_profile(fl.len, fl.h, fl.band.0, fl.band.1, fl.center)?;
    r.push(Check::at_most("parseval", parseval_defect(&a, fl.h), th.parseval));
    let curve = comparator_curve(&a, fl.h, &fl.comparator_times);
    let errs: Vec<f64> = curve.iter().map(|c| c.error).collect();
    r.push(Check::holds("comparator_decreasing", monotone_decreasing(&errs)));
    plain_rows(&mut rows, "dst_comparator_error", &fl.comparator_times, &errs, f64::INFINITY);
    let dec = stationary_phase_decay(&a, fl.h, Sign::Plus, &fl.decay_times);
    r.push(Check::at_most("stationary_phase_exponent", dec.exponent, th.decay_exponent));
    r.metric_set("stationary_phase_integral", *dec.partial.last().unwrap_or(&f64::NAN));
    plain_rows(&mut rows, "stationary_phase_mass", &dec.times, &dec.values, f64::INFINITY);
    let hi = band_limited_profile(fl.high_len, fl.h, fl.high_band.0, fl.high_band.1, fl.high_center)?;
    let dh = stationary_phase_decay(&hi, fl.h, Sign::Plus, &fl.high_times);
    r.push(Check::at_most(
        "high_momentum_mass",
        *dh.values.last().unwrap_or(&f64::NAN),
        th.high_momentum_mass,
    ));
    plain_rows(&mut rows, "high_momentum_mass", &dh.times, &dh.values, f64::INFINITY);
    let low = crate::scattering::dst_mode(1, fl.len);
    let low: CVec = low.into_iter().map(|x| Complex64::new(x, 0.0)).collect();
    let neg = stationary_phase_decay(&low, fl.h, Sign::Plus, &fl.decay_times);
    r.metric_set("negative_control_exponent", neg.exponent);

    let spec = ChannelSpectrum::compute(&ctx.model, o.spectrum_count)?;
    let fit = quadrant_eigfunction_fit(&ctx.model, &spec, 1, 0)?;
    if let Some(m) = fit.modes.first() {
        r.push(Check::at_most("eigenfunction_rate", m.relative_error, th.fit_relative));
        r.metric_set("eigenfunction_rate_fitted", m.rate);
        r.metric_set("eigenfunction_rate_lattice", m.lattice_rate);
        r.metric_set("eigenfunction_rate_continuum", m.continuum_rate);
    }
    r.file("timeseries.csv", time_csv(&rows));
    r.file("spectra.csv", spectrum_csv(&spec));
    Ok(r)
}

/// Provenance record written next to the reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub package: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub model: crate::geometry::ModelSummary,
    pub reflection_time: f64,
    pub time_grid: Vec<f64>,
    pub experiments: Vec<ManifestEntry>,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub experiment: Experiment,
    pub status: Status,
    pub files: Vec<String>,
    pub error: Option<String>,
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub reports: Vec<ExperimentReport>,
    pub out_dir: PathBuf,
}

/// Exit code of a set of reports: 2 on a configuration error, else 3 on a
/// numerical failure, else 1 on a failed threshold, else 0.
pub fn exit_code(reports: &[ExperimentReport]) -> i32 {
    let has = |s: Status| reports.iter().any(|r| r.status == s);
    if has(Status::ConfigError) {
        2
    } else if has(Status::NumericalError) {
        3
    } else if has(Status::Fail) {
        1
    } else {
        0
    }
}

/// Runs every configured experiment (in parallel) and writes
/// `manifest.json`, `summary.json` and per-experiment files under `out`.
/// A configuration that fails validation yields exit code 2 without output.
pub fn run(config: ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let ctx = match Context::new(config) {
        Ok(c) => c,
        Err(e) => {
            return Ok(RunOutcome {
                exit_code: if error_status(&e) == Status::NumericalError { 3 } else { 2 },
                reports: vec![],
                out_dir: out.to_path_buf(),
            })
        }
    };
    let reports: Vec<ExperimentReport> = ctx
        .config
        .experiments
        .par_iter()
        .map(|&e| run_experiment(&ctx, e))
        .collect();
    let code = exit_code(&reports);
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for r in &reports {
        let dir = out.join(r.experiment.name());
        std::fs::create_dir_all(&dir)?;
        for f in &r.files {
            std::fs::write(dir.join(&f.name), &f.contents)?;
        }
        entries.push(ManifestEntry {
            experiment: r.experiment,
            status: r.status,
            files: r.files.iter().map(|f| format!("{}/{}", r.experiment.name(), f.name)).collect(),
            error: r.error.clone(),
        });
    }
    let manifest = Manifest {
        name: ctx.config.name.clone(),
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: ctx.config.hash()?,
        seed: ctx.config.seed,
        model: ctx.model.summary(),
        reflection_time: ctx.reflection_time,
        time_grid: ctx.times.clone(),
        experiments: entries,
        exit_code: code,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&reports)?)?;
    Ok(RunOutcome {
        exit_code: code,
        reports,
        out_dir: out.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scattering::dst_weights;

    fn minimal_cfg(experiments: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"geometry": {{"kind": "minimal", "l1": 6, "l2": 5, "h": 1.0}}, "experiments": [{experiments}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = r#"{"geometry": {"kind": "minimal", "l1": 6, "l2": 5, "h": 1.0}, "experiments": [], "colour": 1}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
        let bad = r#"{"geometry": {"kind": "minimal", "l1": 6, "l2": 5, "h": 1.0}, "experiments": ["nope"]}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            let s = serde_json::to_string(&e).unwrap();
            assert_eq!(s, format!("\"{}\"", e.name()));
        }
    }

    #[test]
    fn doubling_grid_ends_at_t_max() {
        let g = TimeGrid::default().times(96.0);
        assert_eq!(g.len(), 7);
        assert!((g[6] - 76.8).abs() < 1e-12);
        assert!((g[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = minimal_cfg(r#""assemble-audit""#);
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn quadrature_too_small_is_a_config_error() {
        let mut cfg = minimal_cfg(r#""yafaev-audit""#);
        cfg.yafaev.q = 2;
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run(cfg, dir.path()).unwrap().exit_code, 2);
    }

    #[test]
    fn oracle_compare_requires_product() {
        let cfg = minimal_cfg(r#""oracle-compare""#);
        assert!(Context::new(cfg).is_err());
    }

    fn two_well_scatterer_packets(recipes: &[PacketRecipe], seed: u64) -> Result<Vec<ChannelPacket>> {
        let m = CornerModel::build(&layered_config(&LayeredSpec {
            box_len: 24,
            well1: 2.4,
            ..Default::default()
        }))
        .unwrap();
        let h = assemble_h(&m);
        let sc = Scatterer::new(&m, &h, PropagatorSpec::default()).unwrap();
        generate_packets(recipes, seed, &sc)
    }

    #[test]
    fn packets_are_deterministic_and_band_limited() {
        let recipes = vec![
            PacketRecipe {
                label: None,
                channel: 1,
                variant: RecipeVariant::Ac { cross: None },
                profile: Profile::Band {
                    k_lo: 0.5,
                    k_hi: 1.0,
                    center: 8.0,
                },
                profile2: None,
            },
            PacketRecipe {
                label: None,
                channel: 1,
                variant: RecipeVariant::Pp { index: 0 },
                profile: Profile::Band {
                    k_lo: 0.5,
                    k_hi: 1.0,
                    center: 8.0,
                },
                profile2: None,
            },
        ];
        let a = two_well_scatterer_packets(&recipes, 11).unwrap();
        let b = two_well_scatterer_packets(&recipes, 11).unwrap();
        assert_eq!(a, b);
        let c = two_well_scatterer_packets(&recipes, 12).unwrap();
        assert_ne!(a[0], c[0]);
        let prof = recipes[0].profile.build(24, 1.0).unwrap();
        let w = dst_weights(&prof);
        let outside: f64 = w
            .iter()
            .enumerate()
            .filter(|(m, _)| {
                let k = crate::scattering::dst_momentum(m + 1, 24, 1.0);
                !(0.5 < k && k < 1.0)
            })
            .map(|(_, x)| x)
            .sum();
        assert!(outside <= 1e-10 * w.iter().sum::<f64>());
    }

    #[test]
    fn pp_recipe_without_bound_state_fails() {
        let recipes = vec![PacketRecipe {
            label: None,
            channel: 2,
            variant: RecipeVariant::Pp { index: 0 },
            profile: Profile::Gaussian {
                center: 6.0,
                width: 2.0,
                momentum: 1.0,
            },
            profile2: None,
        }];
        assert!(matches!(
            two_well_scatterer_packets(&recipes, 0),
            Err(Error::MissingBoundState { channel: 2, index: 0 })
        ));
    }

    #[test]
    fn recipe_channel_mismatch_is_rejected() {
        let r = PacketRecipe {
            label: None,
            channel: 3,
            variant: RecipeVariant::Pp { index: 0 },
            profile: Profile::Gaussian {
                center: 6.0,
                width: 2.0,
                momentum: 1.0,
            },
            profile2: None,
        };
        assert!(r.check().is_err());
    }

    #[test]
    fn assemble_audit_on_minimal_passes() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(minimal_cfg(r#""assemble-audit""#), dir.path()).unwrap();
        assert_eq!(out.exit_code, 0, "{:?}", out.reports);
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("assemble-audit/spectra.csv").exists());
    }
}
