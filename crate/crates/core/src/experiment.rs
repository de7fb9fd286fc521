//! Declarative experiments: spec files, batch trial execution and reports.
//!
//! A spec is a TOML file:
//!
//! ```toml
//! name = "honest_pow_liveness"
//! trials = 40
//! seed_base = 1000          # trial i runs with seed seed_base + i
//! retain_transcripts = false
//! output_dir = "honest_pow_liveness"   # under $PERMSIM_OUTPUT_ROOT; defaults to name
//! analyses = [{ kind = "invariants" }, { kind = "liveness" }]
//! driver = { kind = "standard" }
//!
//! [[sweeps]]                # cross product, first sweep outermost
//! param = "duration"
//! values = [500, 1000]
//!
//! [base]                    # an ExecutionConfig
//! duration = 1000
//! ...
//! ```
//!
//! Unknown keys are errors. Every cell of the sweep grid is validated before
//! any trial runs. Seeds used for per-cell calibration runs follow the trial
//! seeds: `seed_base + trials + j`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{build_partition_instance, observer_ids, AdversarySpec};
use crate::analysis::recalibration::{build_certificate_recalibration, recalibrate_union_bound, EllTable};
use crate::analysis::{
    calibrate_ell, check_certificates, check_invariants, invariants::standard_form_exceptions,
    measure_liveness, Estimate, GrowthSeries, SecurityView, ViolationRecord,
};
use crate::analysis::security::Witnesses;
use crate::config::{ExecutionConfig, ProcessorSpec, Sizing};
use crate::engine::{grant_slots, prepare, run_execution};
use crate::error::{ConfigError, Error, Fault};
use crate::permitter::PermitterSpec;
use crate::pool::AdversaryBound;
use crate::protocols::{ConfirmationSpec, Rule};
use crate::transcript::Transcript;
use crate::types::{MessageId, ProcessorId, PublicKey, Slot};

/// Environment variable naming the directory experiment outputs go under.
pub const OUTPUT_ROOT_VAR: &str = "PERMSIM_OUTPUT_ROOT";

/// The shipped scenario specs.
pub const SCENARIOS: &[(&str, &str)] = &[
    ("honest_pow_liveness", include_str!("../scenarios/honest_pow_liveness.toml")),
    ("pow_double_spend", include_str!("../scenarios/pow_double_spend.toml")),
    ("thm_3_3_partition", include_str!("../scenarios/thm_3_3_partition.toml")),
    ("thm_5_1_simulation", include_str!("../scenarios/thm_5_1_simulation.toml")),
    ("pos_density_certificates", include_str!("../scenarios/pos_density_certificates.toml")),
    ("prop_4_4_recalibration", include_str!("../scenarios/prop_4_4_recalibration.toml")),
];

pub fn list_builtin_scenarios() -> Vec<&'static str> {
    SCENARIOS.iter().map(|s| s.0).collect()
}

pub fn builtin_scenario(name: &str) -> Option<&'static str> {
    SCENARIOS.iter().find(|s| s.0 == name).map(|s| s.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub trials: u32,
    pub seed_base: u64,
    #[serde(default)]
    pub retain_transcripts: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub driver: Driver,
    #[serde(default)]
    pub analyses: Vec<Analysis>,
    #[serde(default)]
    pub sweeps: Vec<Sweep>,
    pub base: ExecutionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Driver {
    /// Run the cell configuration as is.
    #[default]
    Standard,
    /// The simulation attack: the base is the attacked instance (honest keys
    /// plus a simulation attacker of equal balance, unsized). Each trial also
    /// runs the instance in which the attacker's keys belong to an honest
    /// processor and every other key has zero balance.
    SimulationAttack {
        /// Fixed release slot; by default one past the later of the first
        /// slots at which the two executions confirm a block.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        release_at: Option<Slot>,
        /// Pick `k` first from honest-only runs.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        calibrate_k: Option<KCalibration>,
    },
    /// Runs each base trial; when its ledger holds two incompatible certified
    /// arms, reruns it with two isolated observers fed one arm each.
    PartitionObservers,
    /// Calibrates `ℓ` at `ε/4` from honest-only runs under `base_k`-deep
    /// confirmation, then runs the density rule built from it.
    CertificateRecalibration { calibration_trials: u32, base_k: u32 },
    /// Emits the union-bound plan for `ε₀ = ε` and `n = |D|`, then runs the
    /// trials at `|D₁|` and checks uniform growth at `ℓ_{ε₁}`.
    UnionBoundRecalibration {
        table: EllTable,
        #[serde(default)]
        alphas: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KCalibration {
    pub trials: u32,
    pub max_k: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Analysis {
    Invariants,
    Security,
    Certificates,
    /// Uniform and per-interval growth at `ell`, calibrated at the cell's
    /// `ε` when absent.
    Liveness {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ell: Option<Slot>,
    },
    StandardForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "param", content = "values", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    Epsilon(Vec<f64>),
    Duration(Vec<Slot>),
    Delta(Vec<Slot>),
    /// `k` of a `k`-deep rule.
    K(Vec<u32>),
    /// `ρ` or `λ`, whichever the permitter takes.
    Rate(Vec<f64>),
    /// Adversary balance set to a `q` fraction of the total; bound `q`.
    AdversaryShare(Vec<f64>),
    /// Adversary balance just under `1/Θ` of the honest total; bound `Θ`.
    Theta(Vec<f64>),
    Adversary(Vec<AdversarySpec>),
}

impl Sweep {
    fn name(&self) -> &'static str {
        match self {
            Sweep::Epsilon(_) => "epsilon",
            Sweep::Duration(_) => "duration",
            Sweep::Delta(_) => "delta",
            Sweep::K(_) => "k",
            Sweep::Rate(_) => "rate",
            Sweep::AdversaryShare(_) => "adversary_share",
            Sweep::Theta(_) => "theta",
            Sweep::Adversary(_) => "adversary",
        }
    }

    fn len(&self) -> usize {
        match self {
            Sweep::Epsilon(v) | Sweep::Rate(v) | Sweep::AdversaryShare(v) | Sweep::Theta(v) => v.len(),
            Sweep::Duration(v) | Sweep::Delta(v) => v.len(),
            Sweep::K(v) => v.len(),
            Sweep::Adversary(v) => v.len(),
        }
    }

    fn label(&self, i: usize) -> String {
        match self {
            Sweep::Epsilon(v) | Sweep::Rate(v) | Sweep::AdversaryShare(v) | Sweep::Theta(v) => v[i].to_string(),
            Sweep::Duration(v) | Sweep::Delta(v) => v[i].to_string(),
            Sweep::K(v) => v[i].to_string(),
            Sweep::Adversary(v) => serde_json::to_string(&v[i]).expect("serializable"),
        }
    }

    fn apply(&self, i: usize, cfg: &mut ExecutionConfig) -> Result<(), ConfigError> {
        let honest_total = || -> f64 {
            cfg.roster
                .iter()
                .filter(|r| r.adversary.is_none())
                .map(|r| r.balance * r.count as f64)
                .sum()
        };
        let field = format!("sweeps.{}", self.name());
        match self {
            Sweep::Epsilon(v) => cfg.epsilon = v[i],
            Sweep::Duration(v) => cfg.duration = v[i],
            Sweep::Delta(v) => cfg.delta = v[i],
            Sweep::K(v) => match cfg.confirmation {
                ConfirmationSpec::KDeep { .. } => cfg.confirmation = ConfirmationSpec::KDeep { k: v[i] },
                _ => return Err(ConfigError::field(field, "needs a k-deep confirmation rule")),
            },
            Sweep::Rate(v) => match &mut cfg.permitter {
                PermitterSpec::Pow { rate } => *rate = v[i],
                PermitterSpec::Pos { slot_rate } => *slot_rate = v[i],
            },
            Sweep::AdversaryShare(v) => {
                let q = v[i];
                if !(0.0..1.0).contains(&q) {
                    return Err(ConfigError::field(field, "q must lie in [0, 1)"));
                }
                // Slightly under the boundary so the exact check passes.
                let bal = q * honest_total() / (1.0 - q) * (1.0 - 1e-9);
                adversary_entry(cfg, &field)?.balance = bal;
                cfg.pool.adversary_bound = AdversaryBound::Fraction { q };
            }
            Sweep::Theta(v) => {
                let theta = v[i];
                if !(theta > 1.0) {
                    return Err(ConfigError::field(field, "Θ must exceed 1"));
                }
                let bal = honest_total() / theta * (1.0 - 1e-9);
                adversary_entry(cfg, &field)?.balance = bal;
                cfg.pool.adversary_bound = AdversaryBound::Domination { theta };
                if let ConfirmationSpec::Density(d) = &mut cfg.confirmation {
                    d.theta = theta;
                }
            }
            Sweep::Adversary(v) => adversary_entry(cfg, &field)?.adversary = Some(v[i].clone()),
        }
        Ok(())
    }
}

fn adversary_entry<'a>(
    cfg: &'a mut ExecutionConfig,
    field: &str,
) -> Result<&'a mut ProcessorSpec, ConfigError> {
    cfg.roster
        .iter_mut()
        .find(|r| r.adversary.is_some())
        .ok_or_else(|| ConfigError::field(field, "the roster has no adversary entry"))
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub labels: Vec<(String, String)>,
    pub config: ExecutionConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("cannot parse spec: {0}")]
    Parse(String),
    #[error("cell {cell}: {error}")]
    Invalid { cell: usize, error: ConfigError },
}

impl ExperimentSpec {
    pub fn from_toml(s: &str) -> Result<Self, SpecError> {
        toml::from_str(s).map_err(|e| SpecError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// The sweep grid in lexicographic order, first sweep outermost.
    pub fn cells(&self) -> Result<Vec<Cell>, SpecError> {
        let dims: Vec<usize> = self.sweeps.iter().map(|s| s.len()).collect();
        let total: usize = dims.iter().product();
        let mut out = Vec::with_capacity(total);
        for index in 0..total {
            let mut rest = index;
            let mut pick = vec![0; dims.len()];
            for d in (0..dims.len()).rev() {
                pick[d] = rest % dims[d];
                rest /= dims[d];
            }
            let mut config = self.base.clone();
            config.seed = self.seed_base;
            let mut labels = Vec::new();
            for (s, &i) in self.sweeps.iter().zip(&pick) {
                s.apply(i, &mut config)
                    .map_err(|error| SpecError::Invalid { cell: index, error })?;
                labels.push((s.name().to_string(), s.label(i)));
            }
            out.push(Cell { index, labels, config });
        }
        Ok(out)
    }

    /// Parses nothing further: checks every cell and the driver's setting
    /// requirements.
    pub fn validate(&self) -> Result<Vec<Cell>, SpecError> {
        if self.trials == 0 && !matches!(self.driver, Driver::UnionBoundRecalibration { .. }) {
            return Err(SpecError::Invalid {
                cell: 0,
                error: ConfigError::field("trials", "must be >= 1"),
            });
        }
        // TOML integers are signed 64-bit; every seed used must stay writable.
        let calib = match &self.driver {
            Driver::SimulationAttack { calibrate_k: Some(k), .. } => k.trials,
            Driver::CertificateRecalibration { calibration_trials, .. } => *calibration_trials,
            _ => 0,
        };
        if self.seed_base.saturating_add(self.trials as u64 + calib as u64) > i64::MAX as u64 {
            return Err(SpecError::Invalid {
                cell: 0,
                error: ConfigError::field("seed_base", "trial seeds must stay below 2^63"),
            });
        }
        let cells = self.cells()?;
        for c in &cells {
            let bad = |error| SpecError::Invalid { cell: c.index, error };
            prepare(&c.config).map_err(bad)?;
            self.check_driver(&c.config).map_err(bad)?;
        }
        Ok(cells)
    }

    fn check_driver(&self, cfg: &ExecutionConfig) -> Result<(), ConfigError> {
        match &self.driver {
            Driver::Standard => Ok(()),
            Driver::SimulationAttack { calibrate_k, .. } => {
                if cfg.setting.sizing != Sizing::Unsized {
                    return Err(ConfigError::axis("sizing", "the simulation attack needs the unsized setting"));
                }
                let adv = cfg.adversary();
                if !matches!(adv.and_then(|a| a.adversary), Some(AdversarySpec::SimulationAttacker { .. })) {
                    return Err(ConfigError::field("roster", "needs a simulation attacker"));
                }
                prepare(&simulated_instance(cfg)?)?;
                if calibrate_k.is_some() {
                    if !matches!(cfg.confirmation, ConfirmationSpec::KDeep { .. }) {
                        return Err(ConfigError::field("driver.calibrate_k", "needs a k-deep rule"));
                    }
                    prepare(&without_adversary(cfg))?;
                }
                Ok(())
            }
            Driver::PartitionObservers => {
                build_partition_instance(cfg, [Vec::new(), Vec::new()]).map(|_| ())
            }
            Driver::CertificateRecalibration { calibration_trials, .. } => {
                if *calibration_trials == 0 {
                    return Err(ConfigError::field("driver.calibration_trials", "must be >= 1"));
                }
                build_certificate_recalibration(cfg, 1)
                    .map(|_| ())
                    .map_err(|e| ConfigError::axis("setting", e.to_string()))?;
                prepare(&without_adversary(cfg)).map(|_| ())
            }
            Driver::UnionBoundRecalibration { table, .. } => table
                .check_precondition()
                .map_err(|e| ConfigError::field("driver.table", e.to_string())),
        }
    }
}

/// The base with every adversary line removed.
pub fn without_adversary(cfg: &ExecutionConfig) -> ExecutionConfig {
    let mut c = cfg.clone();
    c.roster.retain(|r| r.adversary.is_none());
    c
}

/// The simulated instance for a simulation-attack base: the attacker's line
/// becomes honest with the same balance and every other line keeps its ids
/// but holds nothing.
pub fn simulated_instance(cfg: &ExecutionConfig) -> Result<ExecutionConfig, ConfigError> {
    let mut c = cfg.clone();
    let mut found = false;
    for r in &mut c.roster {
        if r.adversary.take().is_some() {
            found = true;
        } else {
            r.balance = 0.0;
        }
    }
    if !found {
        return Err(ConfigError::field("roster", "needs an adversary entry"));
    }
    Ok(c)
}

fn with_release(cfg: &ExecutionConfig, release_at: Slot) -> ExecutionConfig {
    let mut c = cfg.clone();
    for r in &mut c.roster {
        if let Some(AdversarySpec::SimulationAttacker { release_at: x }) = &mut r.adversary {
            *x = release_at;
        }
    }
    c
}

/// First slot at which some honest processor confirms a non-genesis block.
pub fn first_live_slot(tr: &Transcript) -> Option<Slot> {
    let honest: Vec<ProcessorId> = tr.honest();
    tr.confirmations
        .iter()
        .find(|c| c.length >= 1 && honest.contains(&c.processor))
        .map(|c| c.slot)
}

/// Outcome of one trial.
#[derive(Debug, Clone, Default)]
pub struct TrialResult {
    pub trial: u32,
    pub seed: u64,
    pub fault: Option<Fault>,
    pub flags: BTreeMap<String, bool>,
    pub values: BTreeMap<String, f64>,
    pub violations: Vec<ViolationRecord>,
    pub series: Option<GrowthSeries>,
    /// SHA-256 of each transcript's JSON-lines form, main first.
    pub digests: Vec<(String, String)>,
    /// Kept only when the spec retains transcripts.
    pub transcripts: Vec<(String, Transcript)>,
}

impl TrialResult {
    fn flag(&mut self, k: &str, v: bool) {
        self.flags.insert(k.into(), v);
    }

    fn value(&mut self, k: &str, v: f64) {
        self.values.insert(k.into(), v);
    }

    fn note_fault(&mut self, tr: &Transcript) -> bool {
        if let Some(f) = &tr.fault {
            self.fault.get_or_insert_with(|| f.clone());
            true
        } else {
            false
        }
    }
}

/// Settings fixed for a cell before its trials run.
#[derive(Debug, Clone)]
struct CellPlan {
    config: ExecutionConfig,
    values: BTreeMap<String, f64>,
    notes: Vec<String>,
    /// Uniform growth threshold checked per trial, if any.
    growth_ell: Option<Slot>,
    trial_duration: Option<Slot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: usize,
    pub labels: BTreeMap<String, String>,
    /// The configuration the trials ran, with `seed = seed_base`.
    pub config: ExecutionConfig,
    pub trials: u32,
    pub faulted: u32,
    pub estimates: BTreeMap<String, Estimate>,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    /// Wall-clock time of the run; the only field that differs between reruns.
    pub generated_at: String,
    /// False when any trial aborted with a fault.
    pub authoritative: bool,
    pub spec: ExperimentSpec,
    pub cells: Vec<CellReport>,
}

impl Report {
    /// The report as written to disk, without `generated_at`.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().expect("object").remove("generated_at");
        serde_json::to_string_pretty(&v).expect("report serializes")
    }
}

/// Everything an experiment produced, before anything is written.
pub struct Executed {
    pub report: Report,
    /// Per cell, the trial results in trial order.
    pub trials: Vec<Vec<TrialResult>>,
}

/// Validates and runs a spec.
pub fn execute(spec: &ExperimentSpec) -> Result<Executed, SpecError> {
    let cells = spec.validate()?;
    let mut reports = Vec::new();
    let mut all = Vec::new();
    for cell in &cells {
        let plan = plan_cell(spec, cell).map_err(|error| SpecError::Invalid { cell: cell.index, error })?;
        let trials: Vec<TrialResult> = (0..spec.trials)
            .into_par_iter()
            .map(|i| run_trial(spec, &plan, i))
            .collect();
        reports.push(aggregate(spec, cell, &plan, &trials));
        all.push(trials);
    }
    let report = Report {
        name: spec.name.clone(),
        generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        authoritative: reports.iter().all(|c| c.faulted == 0),
        spec: spec.clone(),
        cells: reports,
    };
    Ok(Executed { report, trials: all })
}

fn calibration_seeds(spec: &ExperimentSpec, n: u32) -> impl ParallelIterator<Item = u64> + '_ {
    (0..n).into_par_iter().map(move |j| spec.seed_base + spec.trials as u64 + j as u64)
}

fn run_seeded(cfg: &ExecutionConfig, seed: u64) -> Transcript {
    let mut c = cfg.clone();
    c.seed = seed;
    run_execution(&c).expect("validated configuration")
}

fn plan_cell(spec: &ExperimentSpec, cell: &Cell) -> Result<CellPlan, ConfigError> {
    let mut plan = CellPlan {
        config: cell.config.clone(),
        values: BTreeMap::new(),
        notes: Vec::new(),
        growth_ell: None,
        trial_duration: None,
    };
    match &spec.driver {
        Driver::SimulationAttack { calibrate_k: Some(kc), .. } => {
            let honest = without_adversary(&cell.config);
            let runs: Vec<Transcript> = calibration_seeds(spec, kc.trials)
                .map(|s| run_seeded(&honest, s))
                .collect();
            let eps = cell.config.epsilon;
            let mut chosen = None;
            for k in 0..=kc.max_k {
                let rule = Rule::KDeep(k);
                let bad = runs
                    .par_iter()
                    .filter(|tr| check_certificates(tr, &rule, tr.slots_run).is_some())
                    .count();
                let est = Estimate::new(bad as u64, runs.len() as u64);
                if est.point <= eps {
                    chosen = Some((k, est));
                    break;
                }
            }
            let (k, est) = chosen.ok_or_else(|| {
                ConfigError::field("driver.calibrate_k", format!("no k <= {} reaches ε = {eps}", kc.max_k))
            })?;
            plan.config.confirmation = ConfirmationSpec::KDeep { k };
            plan.values.insert("k".into(), k as f64);
            plan.values.insert("honest_false_confirmation".into(), est.point);
            plan.values.insert("honest_false_confirmation_upper".into(), est.upper);
        }
        Driver::CertificateRecalibration { calibration_trials, base_k } => {
            let mut honest = without_adversary(&cell.config);
            honest.confirmation = ConfirmationSpec::KDeep { k: *base_k };
            let series: Vec<GrowthSeries> = calibration_seeds(spec, *calibration_trials)
                .map(|s| GrowthSeries::new(&run_seeded(&honest, s)).expect("own transcript replays"))
                .collect();
            let eps_prime = cell.config.epsilon / 4.0;
            let ell = calibrate_ell(&series, eps_prime).expect("at least one calibration trial");
            let p = build_certificate_recalibration(&cell.config, ell)
                .map_err(|e| ConfigError::axis("setting", e.to_string()))?;
            plan.config = p.apply(&cell.config);
            prepare(&plan.config)?;
            for (k, v) in [
                ("ell", p.ell as f64),
                ("epsilon_prime", p.epsilon_prime),
                ("r", p.r as f64),
                ("threshold", p.threshold as f64),
                ("spacing", p.spacing as f64),
                ("intervals", p.grid.len() as f64),
                ("ell_prime", p.ell_prime as f64),
            ] {
                plan.values.insert(k.into(), v);
            }
            plan.growth_ell = Some(p.ell_prime);
        }
        Driver::UnionBoundRecalibration { table, alphas } => {
            let n = cell.config.duration;
            let p = recalibrate_union_bound(cell.config.epsilon, n, table, alphas)
                .map_err(|e| ConfigError::field("driver.table", e.to_string()))?;
            plan.values.insert("n".into(), n as f64);
            plan.values.insert("epsilon1".into(), p.epsilon1);
            plan.values.insert("ell1".into(), p.ell1);
            plan.values.insert("duration1".into(), p.duration1 as f64);
            for c in &p.sublinearity {
                plan.values.insert(format!("sublinear_bound_alpha_{}", c.alpha), c.bound as f64);
            }
            plan.notes.push(format!("epsilon1 = {}", p.epsilon1_exact));
            plan.growth_ell = Some(p.ell1.ceil() as Slot);
            plan.trial_duration = Some(p.duration1);
        }
        _ => {}
    }
    Ok(plan)
}

fn run_trial(spec: &ExperimentSpec, plan: &CellPlan, trial: u32) -> TrialResult {
    let seed = spec.seed_base + trial as u64;
    let mut cfg = plan.config.clone();
    cfg.seed = seed;
    if let Some(d) = plan.trial_duration {
        cfg.duration = d;
    }
    let mut res = TrialResult {
        trial,
        seed,
        ..Default::default()
    };
    let prep = prepare(&cfg).expect("validated configuration");
    let rule = prep.rule;
    let main = match &spec.driver {
        Driver::SimulationAttack { release_at, .. } => simulation_trial(&cfg, &rule, *release_at, &mut res),
        Driver::PartitionObservers => partition_trial(&cfg, &rule, &mut res),
        _ => {
            let tr = run_execution(&cfg).expect("validated configuration");
            if !res.note_fault(&tr) {
                if let Some(ell) = plan.growth_ell {
                    let s = GrowthSeries::new(&tr).expect("own transcript replays");
                    res.flag("uniform_liveness", s.uniform_growth(ell));
                }
                if matches!(spec.driver, Driver::CertificateRecalibration { .. }) {
                    let v = check_certificates(&tr, &rule, tr.slots_run);
                    res.flag("certificate_violation", v.is_some());
                    res.violations.extend(v);
                }
            }
            tr
        }
    };
    if res.fault.is_none() {
        analyse(&main, &rule, &spec.analyses, &mut res);
    }
    res.transcripts.insert(0, ("main".into(), main));
    res.digests = res
        .transcripts
        .iter()
        .map(|(n, tr)| (n.clone(), hex::encode(Sha256::digest(tr.to_jsonl()))))
        .collect();
    if !spec.retain_transcripts {
        res.transcripts.clear();
    }
    res
}

fn analyse(tr: &Transcript, rule: &Rule, analyses: &[Analysis], res: &mut TrialResult) {
    for a in analyses {
        match a {
            Analysis::Invariants => {
                let v = check_invariants(tr);
                res.flag("invariants_clean", v.is_empty());
                res.value("invariant_violations", v.len() as f64);
            }
            Analysis::Security => {
                let view = SecurityView::new(tr).expect("own transcript replays");
                let recs = view.uniform_violations();
                res.flag("uniform_security_violation", !recs.is_empty());
                if let Some(t) = view.first_violation_slot() {
                    res.value("first_violation_slot", t as f64);
                }
                res.violations.extend(recs.into_iter().take(1));
            }
            Analysis::Certificates => {
                let v = check_certificates(tr, rule, tr.slots_run);
                res.flag("certificate_violation", v.is_some());
                if let Some(v) = v {
                    if !res.violations.contains(&v) {
                        res.violations.push(v);
                    }
                }
            }
            Analysis::Liveness { .. } => {
                res.series = Some(GrowthSeries::new(tr).expect("own transcript replays"));
            }
            Analysis::StandardForm => {
                if let Some(ex) = standard_form_exceptions(tr) {
                    res.value("standard_form_exceptions", ex.len() as f64);
                }
            }
        }
    }
}

fn simulation_trial(
    in1: &ExecutionConfig,
    rule: &Rule,
    release_at: Option<Slot>,
    res: &mut TrialResult,
) -> Transcript {
    let in0 = simulated_instance(in1).expect("validated");
    let d = in1.duration;
    let t_star = match release_at {
        Some(t) => t,
        None => {
            let tr0 = run_execution(&in0).expect("validated");
            let probe = run_execution(&with_release(in1, 0)).expect("validated");
            res.note_fault(&tr0);
            res.note_fault(&probe);
            let (t0, t1) = (first_live_slot(&tr0), first_live_slot(&probe));
            if let Some(t) = t0 {
                res.value("t0", t as f64);
            }
            if let Some(t) = t1 {
                res.value("t1", t as f64);
            }
            match (t0, t1) {
                (Some(a), Some(b)) => (a.max(b) + 1).min(d),
                _ => d,
            }
        }
    };
    res.value("t_star", t_star as f64);
    let tr1 = run_execution(&with_release(in1, t_star)).expect("validated");
    let tr0 = run_execution(&in0).expect("validated");
    if res.note_fault(&tr1) || res.note_fault(&tr0) {
        return tr1;
    }
    let v = check_certificates(&tr1, rule, tr1.slots_run);
    res.flag("certificate_violation", v.is_some());
    res.violations.extend(v);

    // Coupling: the attacker's grants up to the release equal the simulated
    // processor's, and it releases exactly the blocks that processor broadcast.
    let adv = in1.adversary().expect("validated");
    let keys: Vec<PublicKey> = (0..adv.keys).map(|i| PublicKey::new(adv.id, i)).collect();
    let upto = |v: Vec<Slot>| v.into_iter().filter(|&s| s <= t_star).collect::<Vec<_>>();
    let grants_equal = keys
        .iter()
        .all(|&k| upto(grant_slots(&tr0, k)) == upto(grant_slots(&tr1, k)));
    let sent = |tr: &Transcript| -> Vec<MessageId> {
        let mut v: Vec<MessageId> = tr
            .broadcasts
            .iter()
            .filter(|b| b.sender == adv.id && b.slot <= t_star)
            .map(|b| b.message.id)
            .collect();
        v.sort();
        v
    };
    let released_equal = sent(&tr0) == sent(&tr1);
    let atomic = tr1
        .broadcasts
        .iter()
        .filter(|b| b.sender == adv.id)
        .all(|b| b.slot == t_star);
    res.flag("coupling_identity", grants_equal && released_equal);
    res.flag("release_atomic", atomic);
    res.transcripts.push(("simulated".into(), tr0));
    tr1
}

fn partition_trial(base: &ExecutionConfig, rule: &Rule, res: &mut TrialResult) -> Transcript {
    let tr = run_execution(base).expect("validated");
    if res.note_fault(&tr) {
        return tr;
    }
    let d = base.duration;
    let arms = if d >= 2 { check_certificates(&tr, rule, d - 1) } else { None };
    res.flag("certified_arms", arms.is_some());
    let Some(rec) = arms else {
        res.flag("implication_holds", true);
        return tr;
    };
    let Witnesses::Certificates { m1, m2, .. } = rec.witnesses.clone() else {
        unreachable!("certificate records carry message sets")
    };
    let in2 = build_partition_instance(base, [m1, m2]).expect("validated");
    let tr2 = run_execution(&in2).expect("observer instance is valid");
    if res.note_fault(&tr2) {
        return tr;
    }
    let [o1, o2] = observer_ids(base);
    let view = SecurityView::new(&tr2).expect("own transcript replays");
    let violated = view.security_violated(o1, d, o2, d);
    res.flag("observer_violation", violated);
    res.flag("implication_holds", violated);
    res.flag("base_reproduced", tr2.broadcasts == tr.broadcasts);
    res.violations.push(rec);
    res.violations.extend(view.uniform_violations().into_iter().take(1));
    res.transcripts.push(("observers".into(), tr2));
    tr
}

fn aggregate(spec: &ExperimentSpec, cell: &Cell, plan: &CellPlan, trials: &[TrialResult]) -> CellReport {
    let mut estimates = BTreeMap::new();
    let mut values = plan.values.clone();
    let mut flag_names: Vec<&String> = trials.iter().flat_map(|t| t.flags.keys()).collect();
    flag_names.sort();
    flag_names.dedup();
    for name in flag_names {
        let est = Estimate::from_flags(trials.iter().filter_map(|t| t.flags.get(name).copied()));
        estimates.insert(name.clone(), est);
    }
    let mut value_names: Vec<&String> = trials.iter().flat_map(|t| t.values.keys()).collect();
    value_names.sort();
    value_names.dedup();
    for name in value_names {
        let xs: Vec<f64> = trials.iter().filter_map(|t| t.values.get(name).copied()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let max = xs.iter().copied().fold(f64::MIN, f64::max);
        values.insert(format!("{name}_mean"), mean);
        values.insert(format!("{name}_max"), max);
    }
    for a in &spec.analyses {
        if let Analysis::Liveness { ell } = a {
            let series: Vec<GrowthSeries> = trials.iter().filter_map(|t| t.series.clone()).collect();
            let ell = ell.or_else(|| calibrate_ell(&series, plan.config.epsilon));
            if let Some(ell) = ell {
                let e = measure_liveness(&series, ell);
                values.insert("liveness_ell".into(), ell as f64);
                values.insert("liveness_empty".into(), e.empty as u8 as f64);
                if let Some(w) = &e.worst {
                    values.insert("worst_interval_growth".into(), w.growth.point);
                }
                estimates.insert("uniform_liveness".into(), e.uniform);
            }
        }
    }
    let mut config = plan.config.clone();
    if let Some(d) = plan.trial_duration {
        config.duration = d;
    }
    CellReport {
        cell: cell.index,
        labels: cell.labels.iter().cloned().collect(),
        config,
        trials: trials.len() as u32,
        faulted: trials.iter().filter(|t| t.fault.is_some()).count() as u32,
        estimates,
        values,
        notes: plan.notes.clone(),
    }
}

/// Output directory of a spec under `root`.
pub fn output_dir(spec: &ExperimentSpec, root: &Path) -> PathBuf {
    root.join(spec.output_dir.as_deref().unwrap_or(&spec.name))
}

/// `$PERMSIM_OUTPUT_ROOT`, or `permsim-out` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("permsim-out"), PathBuf::from)
}

fn labels_field(c: &CellReport) -> String {
    c.labels.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

/// Writes `report.json`, `summary.csv`, `violations.csv`, `trials.csv`
/// (seed, fault and transcript digests per trial) and, when retained,
/// `transcripts/c<cell>_t<trial>_<name>.jsonl`.
pub fn write_artifacts(ex: &Executed, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut report = serde_json::to_string_pretty(&ex.report)?;
    report.push('\n');
    fs::write(dir.join("report.json"), report)?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_err)?;
    w.write_record(["cell", "labels", "metric", "successes", "trials", "point", "lower", "upper"])
        .map_err(csv_err)?;
    for c in &ex.report.cells {
        let labels = labels_field(c);
        for (name, e) in &c.estimates {
            w.write_record([
                c.cell.to_string(),
                labels.clone(),
                name.clone(),
                e.successes.to_string(),
                e.trials.to_string(),
                e.point.to_string(),
                e.lower.to_string(),
                e.upper.to_string(),
            ])
            .map_err(csv_err)?;
        }
        for (name, v) in &c.values {
            let row = [c.cell.to_string(), labels.clone(), name.clone(), String::new(), String::new(), v.to_string(), String::new(), String::new()];
            w.write_record(row).map_err(csv_err)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("violations.csv")).map_err(csv_err)?;
    w.write_record(["cell", "trial", "seed", "kind", "block1", "block2", "witnesses"])
        .map_err(csv_err)?;
    for (ci, trials) in ex.trials.iter().enumerate() {
        for t in trials {
            for v in &t.violations {
                w.write_record([
                    ci.to_string(),
                    t.trial.to_string(),
                    t.seed.to_string(),
                    serde_json::to_string(&v.kind)?.trim_matches('"').to_string(),
                    v.blocks.0.to_hex(),
                    v.blocks.1.to_hex(),
                    serde_json::to_string(&v.witnesses)?,
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("trials.csv")).map_err(csv_err)?;
    w.write_record(["cell", "trial", "seed", "fault", "transcript", "sha256"])
        .map_err(csv_err)?;
    for (ci, trials) in ex.trials.iter().enumerate() {
        for t in trials {
            let fault = t.fault.as_ref().map(|f| f.to_string()).unwrap_or_default();
            for (name, d) in &t.digests {
                w.write_record([&ci.to_string(), &t.trial.to_string(), &t.seed.to_string(), &fault, name, d])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;

    if ex.report.spec.retain_transcripts {
        let tdir = dir.join("transcripts");
        fs::create_dir_all(&tdir)?;
        for (ci, trials) in ex.trials.iter().enumerate() {
            for t in trials {
                for (name, tr) in &t.transcripts {
                    let f = fs::File::create(tdir.join(format!("c{ci}_t{}_{name}.jsonl", t.trial)))?;
                    tr.write_jsonl(std::io::BufWriter::new(f))?;
                }
            }
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `ℓ` calibrated for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllCalibration {
    pub cell: usize,
    pub labels: BTreeMap<String, String>,
    pub epsilon: f64,
    pub trials: u32,
    pub ell: Slot,
    /// Per-trial smallest uniformly live `ℓ`, sorted.
    pub ell_stars: Vec<Slot>,
}

/// Runs each cell's trials as configured and calibrates `ℓ` at the cell's `ε`.
pub fn calibrate_ell_spec(spec: &ExperimentSpec) -> Result<Vec<EllCalibration>, SpecError> {
    let cells = spec.validate()?;
    Ok(cells
        .iter()
        .map(|cell| {
            let series: Vec<GrowthSeries> = (0..spec.trials)
                .into_par_iter()
                .map(|i| {
                    GrowthSeries::new(&run_seeded(&cell.config, spec.seed_base + i as u64))
                        .expect("own transcript replays")
                })
                .collect();
            let mut ell_stars: Vec<Slot> = series.iter().map(|s| s.ell_star()).collect();
            ell_stars.sort_unstable();
            EllCalibration {
                cell: cell.index,
                labels: cell.labels.iter().cloned().collect(),
                epsilon: cell.config.epsilon,
                trials: spec.trials,
                ell: calibrate_ell(&series, cell.config.epsilon).unwrap_or(cell.config.duration),
                ell_stars,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names() {
        assert_eq!(
            list_builtin_scenarios(),
            vec![
                "honest_pow_liveness",
                "pow_double_spend",
                "thm_3_3_partition",
                "thm_5_1_simulation",
                "pos_density_certificates",
                "prop_4_4_recalibration"
            ]
        );
    }

    #[test]
    fn every_builtin_parses_validates_and_round_trips() {
        for (name, text) in SCENARIOS {
            let spec = ExperimentSpec::from_toml(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&spec.name, name);
            spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let again = ExperimentSpec::from_toml(&spec.to_toml()).unwrap();
            assert_eq!(spec, again, "{name}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = builtin_scenario("honest_pow_liveness").unwrap();
        let bad = format!("colour = \"blue\"\n{text}");
        assert!(matches!(ExperimentSpec::from_toml(&bad), Err(SpecError::Parse(_))));
    }

    #[test]
    fn sweeps_enumerate_lexicographically() {
        let mut spec = ExperimentSpec::from_toml(builtin_scenario("honest_pow_liveness").unwrap()).unwrap();
        spec.sweeps = vec![Sweep::Duration(vec![100, 200]), Sweep::K(vec![1, 2, 3])];
        let cells = spec.cells().unwrap();
        let got: Vec<(Slot, u32)> = cells
            .iter()
            .map(|c| {
                let ConfirmationSpec::KDeep { k } = c.config.confirmation else { panic!() };
                (c.config.duration, k)
            })
            .collect();
        assert_eq!(got, vec![(100, 1), (100, 2), (100, 3), (200, 1), (200, 2), (200, 3)]);
    }

    #[test]
    fn mixed_timing_axes_name_the_axis() {
        let mut spec = ExperimentSpec::from_toml(builtin_scenario("honest_pow_liveness").unwrap()).unwrap();
        spec.base.protocol = crate::protocols::ProtocolSpec::PosLongestChain { lookahead: 1 };
        match spec.validate() {
            Err(SpecError::Invalid { error: ConfigError::Axis { axis, .. }, .. }) => assert_eq!(axis, "timing"),
            other => panic!("{other:?}"),
        }
    }
}
