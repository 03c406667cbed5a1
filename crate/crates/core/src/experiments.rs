//! End-to-end experiment pipeline: data, training, prediction error, stability
//! tables, policy study and acceptance assertions, all driven by one config.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::{SystemConfig, TimeGrid, Variant};
use crate::error::{Error, Result};
use crate::io;
use crate::koopman::{evaluate_rms, KoopmanModel, RmsReport};
use crate::linalg::Mat;
use crate::lqr::{solve_bellman, LqrPolicy};
use crate::model::{combined_limit, tss_limit, LimitModel, ModelForm};
use crate::ocp::{run_policy_study, StudyConfig, StudyModel, StudyReport};
use crate::stability::{stability_table, GridConfig, StabilityReport};
use crate::training::{generate_dataset, lqr_cost, simulate_batch, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_traj: usize,
    pub grid: TimeGrid,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_traj: 10_000, grid: TimeGrid::default() }
    }
}

/// Held-out trajectories for the prediction-error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub n_traj: usize,
    /// Slow steps per trajectory.
    pub n_slow: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { n_traj: 100, n_slow: 100 }
    }
}

/// Thresholds checked by `reproduce`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceConfig {
    pub max_slow_rms: f64,
    pub max_fast_rms: f64,
    pub min_lqr_improvement: f64,
    pub max_scan_gap: f64,
    pub max_lqr_pi_spread: f64,
    pub min_gain_over_constant: f64,
    /// Wall-clock limits in seconds.
    pub max_train_eval_seconds: f64,
    pub max_hier_study_seconds: f64,
    pub max_comb_study_seconds: f64,
}

impl Default for AcceptanceConfig {
    fn default() -> Self {
        AcceptanceConfig {
            max_slow_rms: 0.2,
            max_fast_rms: 0.1,
            min_lqr_improvement: 0.2,
            max_scan_gap: 0.02,
            max_lqr_pi_spread: 0.1,
            min_gain_over_constant: 0.2,
            max_train_eval_seconds: 1800.0,
            max_hier_study_seconds: 600.0,
            max_comb_study_seconds: 900.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub system: Option<SystemConfig>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub stability: GridConfig,
    pub study: StudyConfig,
    pub acceptance: AcceptanceConfig,
    /// Extra training runs with derived seeds whose stability ordering is reported.
    pub reseeds: usize,
    /// Epoch count for the reseeded runs; the main count when absent.
    pub reseed_epochs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::TssOnly,
            seed: 0,
            out_dir: PathBuf::from("out"),
            system: None,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
            stability: GridConfig::default(),
            study: StudyConfig::default(),
            acceptance: AcceptanceConfig::default(),
            reseeds: 5,
            reseed_epochs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn new(variant: Variant) -> Self {
        ExperimentConfig { variant, ..Default::default() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn system_config(&self) -> SystemConfig {
        self.system.unwrap_or_else(|| SystemConfig::new(self.variant))
    }

    pub fn validate(&self) -> Result<()> {
        let sys = self.system_config();
        sys.validate()?;
        if sys.variant != self.variant {
            return Err(Error::config("system.variant must match variant"));
        }
        self.dataset.grid.validate()?;
        self.train.validate()?;
        if self.dataset.n_traj < 2 {
            return Err(Error::config("dataset needs at least two trajectories"));
        }
        if self.evaluation.n_traj == 0 || self.evaluation.n_slow == 0 {
            return Err(Error::config("evaluation needs at least one trajectory and one step"));
        }
        if self.variant.has_actuator() {
            self.study.validate()?;
        }
        if self.reseed_epochs == Some(0) {
            return Err(Error::config("reseed_epochs must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash_hex(&self) -> String {
        let canonical = ExperimentConfig { out_dir: PathBuf::new(), ..self.clone() };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn stream_seed(&self, tag: &str) -> u64 {
        stream_seed(self.seed, tag)
    }

    fn train_config(&self, tag: &str, epochs: usize) -> TrainConfig {
        TrainConfig { seed: self.stream_seed(tag), epochs, ..self.train.clone() }
    }
}

/// Independent 64-bit seed for a named stream.
pub fn stream_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// A pipeline stage that failed, with its name for the exit message.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

trait Stage<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage: name, error })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Assertion { name: name.to_string(), passed, detail }
    }
}

/// Stability ordering of one extra training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReseedResult {
    pub seed: u64,
    pub kreiss_xx: f64,
    pub kreiss_comb_xx: f64,
    pub radius_xx: f64,
    pub radius_comb_xx: f64,
    pub ordered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub starts: usize,
    pub failures: usize,
    pub median_pi_cost: f64,
    pub median_lqr_cost: f64,
    pub lqr_improvement: crate::ocp::Quartiles,
    pub lqr_vs_pi: crate::ocp::Quartiles,
    pub pi_gap: Option<crate::ocp::Quartiles>,
    pub lqr_gap: Option<crate::ocp::Quartiles>,
    pub pi_over_constant: Option<crate::ocp::Quartiles>,
    pub lqr_over_constant: Option<crate::ocp::Quartiles>,
    pub median_pi_seconds: f64,
    pub median_lqr_seconds: f64,
    pub seconds: f64,
}

impl StudySummary {
    fn of(report: &StudyReport, seconds: f64) -> Self {
        let median = |f: fn(&crate::ocp::StartResult) -> f64| {
            crate::ocp::Quartiles::of(&report.starts.iter().map(f).collect::<Vec<_>>()).median
        };
        StudySummary {
            starts: report.starts.len(),
            failures: report.failures,
            median_pi_cost: median(|s| s.pi_cost),
            median_lqr_cost: median(|s| s.lqr_cost),
            lqr_improvement: report.lqr_improvement,
            lqr_vs_pi: report.lqr_vs_pi,
            pi_gap: report.pi_gap,
            lqr_gap: report.lqr_gap,
            pi_over_constant: report.pi_over_constant,
            lqr_over_constant: report.lqr_over_constant,
            median_pi_seconds: report.median_pi_seconds,
            median_lqr_seconds: report.median_lqr_seconds,
            seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub model_hash: String,
    pub policy_cost_hash: Option<String>,
    pub trajectories: usize,
    pub resampled: usize,
    pub best_epoch: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub rms: RmsReport,
    pub stability: Vec<StabilityReport>,
    pub study: Option<StudySummary>,
    pub reseeds: Vec<ReseedResult>,
    pub assertions: Vec<Assertion>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

pub const RMS_FILE: &str = "rms_table.csv";
pub const STABILITY_FILE: &str = "stability_table.csv";
pub const STUDY_FILE: &str = "policy_study.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const POLICY_FILE: &str = "policy.bin";

/// Appends `config_hash` and `seed` columns to every line of a CSV document.
pub fn tag_csv(csv: &str, config_hash: &str, seed: u64) -> String {
    let mut out = String::with_capacity(csv.len() + 90 * csv.lines().count());
    for (i, line) in csv.lines().enumerate() {
        out.push_str(line);
        if i == 0 {
            out.push_str(",config_hash,seed");
        } else {
            out.push_str(&format!(",{config_hash},{seed}"));
        }
        out.push('\n');
    }
    out
}

/// Rows are state groups, columns the multirate and collapsed models.
pub fn rms_csv(variant: Variant, rms: &RmsReport) -> String {
    let mut s = String::from("dynamics,full,limit\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.9e}"));
    if variant.has_slow() {
        s.push_str(&format!("slow,{},{}\n", fmt(Some(rms.full.slow)), fmt(rms.limit.map(|l| l.slow))));
    }
    s.push_str(&format!("fast,{},{}\n", fmt(Some(rms.full.fast)), fmt(rms.limit.map(|l| l.fast))));
    s
}

/// Rows are measures, columns the analyzed matrices.
pub fn stability_csv(reports: &[StabilityReport]) -> String {
    let mut s = String::from("measure");
    for r in reports {
        s.push(',');
        s.push_str(&r.label);
    }
    s.push('\n');
    let rows: [(&str, fn(&StabilityReport) -> f64); 4] = [
        ("spectral_radius", |r| r.spectral_radius),
        ("max_initial_growth", |r| r.log_norm),
        ("transient_growth_lower_bound", |r| r.kreiss_lb),
        ("complex_stability_radius", |r| r.stability_radius),
    ];
    for (name, get) in rows {
        s.push_str(name);
        for r in reports {
            s.push_str(&format!(",{:.9e}", get(r)));
        }
        s.push('\n');
    }
    s
}

/// Everything produced by one trained model, before the policy study.
pub struct Trained {
    pub model: KoopmanModel,
    pub policy: Option<LqrPolicy>,
    pub limit_pi: Option<LimitModel>,
    pub limit_lqr: Option<LimitModel>,
    pub best_epoch: usize,
    pub train_log: String,
    pub trajectories: usize,
    pub resampled: usize,
    pub seconds: f64,
}

/// Generates data and trains one model with the given training stream.
pub fn train_model(cfg: &ExperimentConfig, tag: &str, epochs: usize) -> std::result::Result<Trained, StageError> {
    let start = Instant::now();
    let sys = cfg.system_config();
    let data = generate_dataset(&sys, &cfg.dataset.grid, cfg.dataset.n_traj, cfg.stream_seed("data")).stage("gen-data")?;
    let out = train(&data, &cfg.train_config(tag, epochs)).stage("train")?;
    let model = out.model;
    let policy = if cfg.variant.has_actuator() {
        let cost = lqr_cost(model.dims(), cfg.train.lqr_ridge, cfg.dataset.grid.tau());
        Some(solve_bellman(&model.blocks, &cost).stage("lqr-solve")?)
    } else {
        None
    };
    let (limit_pi, limit_lqr) = limits(&model, policy.as_ref()).stage("limit")?;
    Ok(Trained {
        model,
        policy,
        limit_pi,
        limit_lqr,
        best_epoch: out.best_epoch,
        train_log: out.log.to_csv(),
        trajectories: data.len(),
        resampled: data.resampled,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Collapsed models of a trained model: the TSS limit, or the combined limits
/// under the learned actuator and under the LQR law.
pub fn limits(model: &KoopmanModel, policy: Option<&LqrPolicy>) -> Result<(Option<LimitModel>, Option<LimitModel>)> {
    match model.blocks.form {
        ModelForm::Tss => Ok((Some(tss_limit(&model.blocks)?), None)),
        ModelForm::Hier => Ok((None, None)),
        ModelForm::Combined => {
            let pi = combined_limit(&model.blocks, None)?;
            let lqr = policy.map(|p| combined_limit(&model.blocks, Some(p.feedback()))).transpose()?;
            Ok((Some(pi), lqr))
        }
    }
}

/// Matrices of the stability table: `K_xx` against the collapsed slow map for
/// slow-scale models, the fast blocks for the hierarchical model.
pub fn stability_matrices(model: &KoopmanModel, policy: Option<&LqrPolicy>) -> Result<Vec<(&'static str, Mat)>> {
    let b = &model.blocks;
    let (lp, ll) = limits(model, policy)?;
    let mut v = match b.form {
        ModelForm::Tss | ModelForm::Combined => vec![("K_xx", b.k_xx.clone())],
        ModelForm::Hier => vec![("K_yy", b.k_yy.clone()), ("closed_fast", b.fast_map().closed_block())],
    };
    match b.form {
        ModelForm::Tss => v.push(("K_comb_xx", lp.expect("tss limit").b_xx)),
        ModelForm::Combined => {
            v.push(("B_xx", lp.expect("combined limit").b_xx));
            if let Some(l) = ll {
                v.push(("B_xx_lqr", l.b_xx));
            }
        }
        ModelForm::Hier => {
            if let Some(p) = policy {
                v.push(("closed_fast_lqr", p.closed_loop(b)));
            }
        }
    }
    Ok(v)
}

pub fn analyze_model(model: &KoopmanModel, policy: Option<&LqrPolicy>, grid: &GridConfig) -> Result<Vec<StabilityReport>> {
    let mats = stability_matrices(model, policy)?;
    let refs: Vec<(&str, &Mat)> = mats.iter().map(|(l, m)| (*l, m)).collect();
    stability_table(&refs, grid)
}

fn analyze_all(t: &Trained, grid: &GridConfig) -> Result<Vec<StabilityReport>> {
    analyze_model(&t.model, t.policy.as_ref(), grid)
}

fn ordering(reports: &[StabilityReport]) -> (bool, String) {
    let (xx, comb) = (&reports[0], &reports[1]);
    let ok = comb.kreiss_lb > xx.kreiss_lb && comb.stability_radius < xx.stability_radius;
    let detail = format!(
        "kreiss {:.4} vs {:.4}, radius {:.3e} vs {:.3e}",
        comb.kreiss_lb, xx.kreiss_lb, comb.stability_radius, xx.stability_radius
    );
    (ok, detail)
}

/// Outcome of [`cmd_reproduce`]; files are written to `out_dir`.
pub struct Reproduction {
    pub summary: Summary,
    pub files: Vec<PathBuf>,
}

/// Runs the full pipeline for `cfg.variant` and writes the report bundle.
pub fn cmd_reproduce(cfg: &ExperimentConfig) -> std::result::Result<Reproduction, StageError> {
    cfg.validate().stage("config")?;
    let hash = cfg.hash_hex();
    let sys = cfg.system_config();
    let grid = cfg.dataset.grid;
    let acc = &cfg.acceptance;

    let trained = train_model(cfg, "train", cfg.train.epochs)?;
    let eval_start = Instant::now();
    let (truths, _) = simulate_batch(&sys, &grid, cfg.evaluation.n_traj, cfg.evaluation.n_slow, cfg.stream_seed("eval"))
        .stage("simulate")?;
    let rms = evaluate_rms(&trained.model, trained.limit_pi.as_ref(), &truths).stage("evaluate")?;
    let eval_seconds = eval_start.elapsed().as_secs_f64();
    let stability = analyze_all(&trained, &cfg.stability).stage("stability")?;

    let mut assertions = Vec::new();
    let train_eval = trained.seconds + eval_seconds;
    let mut reseeds = Vec::new();
    match cfg.variant {
        Variant::TssOnly => {
            let ok = rms.full.slow <= acc.max_slow_rms && rms.full.fast <= acc.max_fast_rms;
            assertions.push(Assertion::new(
                "tss_prediction",
                ok && train_eval <= acc.max_train_eval_seconds,
                format!(
                    "slow {:.4} (limit {:.4}), fast {:.4}, {:.0} s",
                    rms.full.slow,
                    rms.limit.map_or(f64::NAN, |l| l.slow),
                    rms.full.fast,
                    train_eval
                ),
            ));
            let (ok, detail) = ordering(&stability);
            assertions.push(Assertion::new("tss_stability_ordering", ok, detail));
            let epochs = cfg.reseed_epochs.unwrap_or(cfg.train.epochs);
            for k in 0..cfg.reseeds {
                let tag = format!("reseed-{k}");
                let t = train_model(cfg, &tag, epochs)?;
                let r = analyze_all(&t, &cfg.stability).stage("stability")?;
                let (ordered, _) = ordering(&r);
                reseeds.push(ReseedResult {
                    seed: cfg.stream_seed(&tag),
                    kreiss_xx: r[0].kreiss_lb,
                    kreiss_comb_xx: r[1].kreiss_lb,
                    radius_xx: r[0].stability_radius,
                    radius_comb_xx: r[1].stability_radius,
                    ordered,
                });
            }
        }
        Variant::Combined => {
            let slow = rms.limit.map_or(f64::NAN, |l| l.slow);
            assertions.push(Assertion::new(
                "comb_collapsed_prediction",
                slow <= acc.max_slow_rms && train_eval <= acc.max_train_eval_seconds,
                format!("collapsed slow {:.4}, full slow {:.4}, {:.0} s", slow, rms.full.slow, train_eval),
            ));
        }
        Variant::HierOnly => {}
    }

    let mut study_csv = String::from(crate::ocp::StartResult::CSV_HEADER);
    study_csv.push('\n');
    let mut study = None;
    if let Some(policy) = &trained.policy {
        let sm = StudyModel {
            model: &trained.model,
            policy,
            limit_pi: trained.limit_pi.as_ref(),
            limit_lqr: trained.limit_lqr.as_ref(),
        };
        let start = Instant::now();
        let report = run_policy_study(&sm, &sys, &grid, &cfg.study, cfg.stream_seed("study")).stage("study")?;
        let summary = StudySummary::of(&report, start.elapsed().as_secs_f64());
        study_csv = report.to_csv();
        if cfg.variant == Variant::HierOnly {
            let impr = summary.lqr_improvement.median;
            let gaps = [summary.pi_gap, summary.lqr_gap].map(|q| q.map_or(f64::NAN, |q| q.median));
            assertions.push(Assertion::new(
                "hier_lqr_improvement",
                impr > acc.min_lqr_improvement && summary.seconds <= acc.max_hier_study_seconds,
                format!("median improvement {:.4}, {:.0} s", impr, summary.seconds),
            ));
            assertions.push(Assertion::new(
                "hier_scan_gap",
                gaps.iter().all(|&g| g < acc.max_scan_gap),
                format!("median gap PI {:.3e}, LQR {:.3e}", gaps[0], gaps[1]),
            ));
        } else {
            let spread = summary.median_lqr_cost / summary.median_pi_cost - 1.0;
            assertions.push(Assertion::new(
                "comb_lqr_vs_pi",
                spread.abs() <= acc.max_lqr_pi_spread && summary.seconds <= acc.max_comb_study_seconds,
                format!(
                    "median LQR {:.4} vs PI {:.4} ({:+.2}%), {:.0} s",
                    summary.median_lqr_cost,
                    summary.median_pi_cost,
                    100.0 * spread,
                    summary.seconds
                ),
            ));
            let gains = [summary.pi_over_constant, summary.lqr_over_constant].map(|q| q.map_or(f64::NAN, |q| q.median));
            assertions.push(Assertion::new(
                "comb_gain_over_constant",
                gains.iter().all(|&g| g > acc.min_gain_over_constant),
                format!("median gain PI {:.4}, LQR {:.4}", gains[0], gains[1]),
            ));
        }
        study = Some(summary);
    }

    let summary = Summary {
        variant: cfg.variant,
        seed: cfg.seed,
        config_hash: hash.clone(),
        model_hash: trained.model.hash_hex(),
        policy_cost_hash: trained
            .policy
            .as_ref()
            .map(|_| lqr_cost(trained.model.dims(), cfg.train.lqr_ridge, grid.tau()).hash_hex()),
        trajectories: trained.trajectories,
        resampled: trained.resampled,
        best_epoch: trained.best_epoch,
        train_seconds: trained.seconds,
        eval_seconds,
        rms,
        stability: stability.clone(),
        study,
        reseeds,
        assertions,
    };

    let dir = &cfg.out_dir;
    let mut files = Vec::new();
    let mut write = |name: &str, bytes: &[u8]| -> std::result::Result<(), StageError> {
        let path = dir.join(name);
        io::write_bytes(&path, bytes).stage("write")?;
        files.push(path);
        Ok(())
    };
    write(RMS_FILE, tag_csv(&rms_csv(cfg.variant, &summary.rms), &hash, cfg.seed).as_bytes())?;
    write(STABILITY_FILE, tag_csv(&stability_csv(&stability), &hash, cfg.seed).as_bytes())?;
    write(STUDY_FILE, tag_csv(&study_csv, &hash, cfg.seed).as_bytes())?;
    write(TRAIN_LOG_FILE, tag_csv(&trained.train_log, &hash, cfg.seed).as_bytes())?;
    write(MODEL_FILE, &io::encode_model(&trained.model, Some(cfg.stream_seed("train"))))?;
    if let Some(policy) = &trained.policy {
        let cost = lqr_cost(trained.model.dims(), cfg.train.lqr_ridge, grid.tau());
        let file = io::PolicyFile {
            policy: policy.clone(),
            dims: trained.model.dims(),
            model_hash: summary.model_hash.clone(),
            cost_hash: cost.hash_hex(),
        };
        write(POLICY_FILE, &io::encode_policy(&file))?;
    }
    let json = serde_json::to_string_pretty(&summary).map_err(Error::from).stage("write")?;
    write(SUMMARY_FILE, json.as_bytes())?;
    Ok(Reproduction { summary, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::new(Variant::Combined);
        cfg.seed = 9;
        cfg.train.epochs = 3;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash_hex(), cfg.hash_hex());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("variant = \"hier_only\"\nseed = 3\n[train]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.variant, Variant::HierOnly);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.dataset, DatasetConfig::default());
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml_str("variant = \"tss_only\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[dataset]\nn_traj = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("variant = \"combined\"\n[study]\nn_starts = 0\n").is_err());
    }

    #[test]
    fn hash_depends_on_seed() {
        let a = ExperimentConfig::new(Variant::TssOnly);
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_ne!(stream_seed(0, "data"), stream_seed(0, "train"));
        assert_eq!(stream_seed(5, "eval"), stream_seed(5, "eval"));
    }

    #[test]
    fn tagged_csv_has_extra_columns() {
        let s = tag_csv("a,b\n1,2\n", "h", 7);
        assert_eq!(s, "a,b,config_hash,seed\n1,2,h,7\n");
    }

    #[test]
    fn reproduce_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(Variant::HierOnly);
        cfg.dataset = DatasetConfig { n_traj: 40, grid: TimeGrid { dt_slow: 0.1, m: 10, substeps: 1 } };
        cfg.train.epochs = 2;
        cfg.train.batch_size = 16;
        cfg.evaluation = EvaluationConfig { n_traj: 3, n_slow: 5 };
        cfg.stability = GridConfig { angular: 16, radial: 4, refine_levels: 1, candidates: 2, polish: false };
        cfg.study = StudyConfig { n_starts: 2, horizon: 3, coarse_resolution: 0.5, scan_resolution: 0.1, ..Default::default() };
        let mut outputs = Vec::new();
        for run in 0..2 {
            cfg.out_dir = dir.path().join(format!("run{run}"));
            let r = cmd_reproduce(&cfg).unwrap();
            assert_eq!(r.summary.assertions.len(), 2);
            let read = |f: &str| std::fs::read(cfg.out_dir.join(f)).unwrap();
            outputs.push([RMS_FILE, STABILITY_FILE, STUDY_FILE, MODEL_FILE, POLICY_FILE].map(read));
        }
        assert_eq!(outputs[0], outputs[1]);
        let study = String::from_utf8(outputs[0][2].clone()).unwrap();
        assert!(study.lines().nth(1).unwrap().ends_with(&format!(",{},{}", cfg.hash_hex(), cfg.seed)));
    }
}
