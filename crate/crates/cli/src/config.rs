//! Run configuration, read from a TOML file.
//!
//! Every key is optional. Relative paths are taken from the directory holding
//! the config file. Command-line flags override the file.
//!
//! ```toml
//! seed = 1
//! workers = 4
//! shield_config_tag = "SO"
//! coverage = 0.6827
//!
//! [paths]
//! datasets = ["data/manifest_SO.json", "data/manifest_SC.json"]
//! templates = ["templates/q1_SO.json"]
//! spectra = { SO = "lmo/so.csv", SC = "lmo/sc.csv" }
//!
//! [schedule]
//! n_bias_points = 74
//! points_per_period = 37
//!
//! [detection]
//! chi2_threshold = 5.5
//!
//! [[qubits]]
//! id = 1
//! position_um = [0.0, 0.0]
//! sigma_p1 = 0.012
//! efficiency = { SO = 0.83, SC = 0.83 }
//! detection = { chi2_threshold = 6.0 }
//!
//! [coincidence]
//! window_s = 44.0
//! pair_efficiency = { mode = "product" }
//!
//! [simulation]
//! n_scans = 243
//! shared_rate_mhz = 0.3
//! shared_qubits = [1, 2]
//!
//! [efficiency]
//! n_scans = 1600
//!
//! [lmo]
//! threshold_kev = 150.0
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chargejump::model::{CurveModel, QubitConfig, ScanSchedule};
use chargejump::rates::{MagWindow, PairEfficiency, DEFAULT_WINDOW_S, ONE_SIGMA};
use chargejump::synth::{MatchWindow, SizeLaw};
use chargejump::DetectionConfig;
use serde::{Deserialize, Serialize};

use crate::failure::{Failure, Outcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Upper bound on worker threads; all cores when unset.
    pub workers: Option<usize>,
    pub shield_config_tag: String,
    /// Central coverage of quoted intervals.
    pub coverage: f64,
    pub paths: Paths,
    pub schedule: ScanSchedule,
    pub detection: DetectionConfig,
    pub qubits: Vec<QubitSettings>,
    pub coincidence: CoincidenceSettings,
    pub template: TemplateSettings,
    pub simulation: SimulationSettings,
    pub efficiency: EfficiencySettings,
    pub lmo: LmoSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: None,
            shield_config_tag: "SO".into(),
            coverage: ONE_SIGMA,
            paths: Paths::default(),
            schedule: ScanSchedule::default(),
            detection: DetectionConfig {
                chi2_threshold: 5.5,
                ..DetectionConfig::default()
            },
            qubits: QubitConfig::four_qubit_chip()
                .into_iter()
                .map(|q| QubitSettings {
                    id: q.id,
                    position_um: Some(q.position_um),
                    ..QubitSettings::default()
                })
                .collect(),
            coincidence: CoincidenceSettings::default(),
            template: TemplateSettings::default(),
            simulation: SimulationSettings::default(),
            efficiency: EfficiencySettings::default(),
            lmo: LmoSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset manifests for `pipeline`.
    pub datasets: Vec<PathBuf>,
    /// Template files; each names its qubit and shield configuration.
    pub templates: Vec<PathBuf>,
    /// Spectrum CSV per shield configuration tag.
    pub spectra: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QubitSettings {
    pub id: u8,
    /// Keys of `[detection]` to override for this qubit.
    pub detection: toml::Table,
    pub position_um: Option<[f64; 2]>,
    /// Readout noise for simulated scans.
    pub sigma_p1: f64,
    /// Rate of jumps private to this qubit in simulated scans, mHz.
    pub rate_mhz: f64,
    /// Detection efficiency per shield configuration tag. Missing entries
    /// are estimated by Monte Carlo in `pipeline`.
    pub efficiency: BTreeMap<String, f64>,
}

impl Default for QubitSettings {
    fn default() -> Self {
        Self {
            id: 0,
            detection: toml::Table::new(),
            position_um: None,
            sigma_p1: 0.02,
            rate_mhz: 0.0,
            efficiency: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoincidenceSettings {
    pub window_s: f64,
    pub min_jump: f64,
    pub max_jump: f64,
    pub pair_efficiency: PairEfficiency,
}

impl Default for CoincidenceSettings {
    fn default() -> Self {
        Self {
            window_s: DEFAULT_WINDOW_S,
            min_jump: 0.1,
            max_jump: 0.5,
            pair_efficiency: PairEfficiency::default(),
        }
    }
}

impl CoincidenceSettings {
    pub fn magnitudes(&self) -> MagWindow {
        MagWindow {
            min: self.min_jump,
            max: self.max_jump,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateSettings {
    pub sigma_floor: f64,
    pub max_internal_jump: f64,
}

impl Default for TemplateSettings {
    fn default() -> Self {
        Self {
            sigma_floor: 0.01,
            max_internal_jump: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub n_scans: usize,
    pub curve: Option<CurveModel>,
    pub size_law: SizeLaw,
    pub ar1: f64,
    pub shared_rate_mhz: f64,
    pub shared_qubits: Vec<u8>,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            n_scans: 1600,
            curve: None,
            size_law: SizeLaw::default(),
            ar1: 0.0,
            shared_rate_mhz: 0.0,
            shared_qubits: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfficiencySettings {
    pub n_scans: usize,
    pub rate_mhz: f64,
    pub size_law: SizeLaw,
    /// Noise of the injected scans; the template's mean spread when unset.
    pub sigma_p1: Option<f64>,
    pub window: MatchWindow,
    pub n_size_bins: usize,
    pub n_replica_sets: usize,
}

impl Default for EfficiencySettings {
    fn default() -> Self {
        Self {
            n_scans: 1600,
            rate_mhz: 1.1,
            size_law: SizeLaw::default(),
            sigma_p1: None,
            window: MatchWindow::default(),
            n_size_bins: 15,
            n_replica_sets: 75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmoSettings {
    pub threshold_kev: f64,
    /// Tags of the higher-flux and lower-flux configurations.
    pub open_tag: String,
    pub closed_tag: String,
}

impl Default for LmoSettings {
    fn default() -> Self {
        Self {
            threshold_kev: 150.0,
            open_tag: "SO".into(),
            closed_tag: "SC".into(),
        }
    }
}

const STAGE: &str = "config";

impl RunConfig {
    /// Reads and validates a config file. `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Outcome<Self> {
        let Some(path) = path else {
            let cfg = Self::default();
            cfg.validate()?;
            return Ok(cfg);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(STAGE, format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Failure::usage(STAGE, format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.paths.datasets.iter_mut().for_each(fix);
        self.paths.templates.iter_mut().for_each(fix);
        self.paths.spectra.values_mut().for_each(fix);
    }

    pub fn validate(&self) -> Outcome<()> {
        let bad = |m: String| Err(Failure::usage(STAGE, m));
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return bad(format!("coverage {} must lie in (0, 1)", self.coverage));
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        self.schedule
            .validate()
            .map_err(|e| Failure::usage(STAGE, e))?;
        self.detection
            .validate()
            .map_err(|e| Failure::usage(STAGE, e))?;
        let mut seen = BTreeSet::new();
        for q in &self.qubits {
            if !seen.insert(q.id) {
                return bad(format!("qubit {} listed twice", q.id));
            }
            self.detection_for(q.id)?;
            for (tag, e) in &q.efficiency {
                if !(*e > 0.0 && *e <= 1.0) {
                    return bad(format!(
                        "qubit {} efficiency {e} for {tag} not in (0, 1]",
                        q.id
                    ));
                }
            }
        }
        let w = &self.coincidence;
        if !(w.window_s >= 0.0) || !(w.min_jump >= 0.0 && w.min_jump <= w.max_jump) {
            return bad("coincidence window or magnitudes invalid".into());
        }
        for p in self
            .paths
            .datasets
            .iter()
            .chain(&self.paths.templates)
            .chain(self.paths.spectra.values())
        {
            if !p.exists() {
                return bad(format!("{}: no such file", p.display()));
            }
        }
        Ok(())
    }

    pub fn qubit(&self, id: u8) -> Option<&QubitSettings> {
        self.qubits.iter().find(|q| q.id == id)
    }

    /// The global detection settings with this qubit's overrides applied.
    pub fn detection_for(&self, id: u8) -> Outcome<DetectionConfig> {
        let q = self
            .qubit(id)
            .ok_or_else(|| Failure::usage(STAGE, format!("no [[qubits]] entry for qubit {id}")))?;
        if q.detection.is_empty() {
            return Ok(self.detection.clone());
        }
        let mut table =
            toml::Table::try_from(&self.detection).map_err(|e| Failure::usage(STAGE, e))?;
        table.extend(q.detection.clone());
        let cfg: DetectionConfig = table
            .try_into()
            .map_err(|e| Failure::usage(STAGE, format!("qubit {id} detection: {e}")))?;
        cfg.validate()
            .map_err(|e| Failure::usage(STAGE, format!("qubit {id} detection: {e}")))?;
        Ok(cfg)
    }

    /// Checks every qubit in `ids` has settings.
    pub fn require_qubits(&self, ids: impl IntoIterator<Item = u8>) -> Outcome<()> {
        for id in ids {
            self.detection_for(id)?;
        }
        Ok(())
    }

    pub fn positions(&self) -> BTreeMap<u8, [f64; 2]> {
        self.qubits
            .iter()
            .filter_map(|q| q.position_um.map(|p| (q.id, p)))
            .collect()
    }

    pub fn curve(&self) -> CurveModel {
        self.simulation.curve.unwrap_or_default()
    }

    /// Forces one detection threshold on every qubit.
    pub fn set_threshold(&mut self, chi2: f64) {
        self.detection.chi2_threshold = chi2;
        for q in &mut self.qubits {
            q.detection.remove("chi2_threshold");
        }
    }
}
