//! End-to-end LQ experiment: generate optimal trajectories, train the two
//! controller architectures, measure containment probabilities, attack and
//! retrain the small network, and compare everything in one table.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{feedback_rollout, riccati_optimal_cost, riccati_solve, LqParams, RiccatiSolution};
use crate::attack::{pgd_attack, replay, AttackConfig, AttackResult};
use crate::dynamics::{NoiseTensor, ProblemSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::nn::{
    train, write_controller, Architecture, Dataset, LossValue, MlpParams, Provenance, RecordMeta,
    TrainConfig, TrainReport,
};
use crate::optimizer::{solve_pcd, OptimizerConfig, SolveStatus};
use crate::retrain::{
    harvest_adversarials, retrain, solve_from_adversarials, AugmentedDataset, Harvest,
    HarvestConfig, PopulationMode, RetrainConfig, RetrainManifest,
};
use crate::rng::{self, derive_seed, keyed};
use crate::stability::{
    compare_controllers, containment_edge, find_delta, trajectory_fan, ClosedLoopConfig,
    Comparison, ComparisonRow, ContainmentEdge, DeltaSearch, InitialMean, Sampling, Scenario,
    StabilityQuery,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Smoke,
    #[default]
    Full,
}

/// Where the supervised targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataGenerator {
    /// Sample-average optimal controls from the trajectory optimizer.
    #[default]
    Optimizer,
    /// The Riccati feedback law rolled out on the same noise.
    Riccati,
}

/// Training populations: `N` samples split into groups; each group's mean is
/// uniform on `mean_range` and its members are spread uniformly within
/// `group_spread` of that mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: DataGenerator,
    #[serde(rename = "N")]
    pub samples: usize,
    pub group_size: usize,
    pub group_spread: f64,
    pub mean_range: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: DataGenerator::Optimizer,
            samples: 1000,
            group_size: 10,
            group_spread: 20.0,
            mean_range: (-50.0, 50.0),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.group_size == 0 {
            return Err(Error::invalid("data", "N and group_size must be positive"));
        }
        if !(self.group_spread >= 0.0 && self.group_spread.is_finite()) {
            return Err(Error::invalid("data.group_spread", "must be finite and nonnegative"));
        }
        let (lo, hi) = self.mean_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::invalid("data.mean_range", "need finite lo <= hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub label: String,
    pub r: f64,
    pub epsilon: f64,
    /// Ball of initial states; `None` uses the basin radius of the first
    /// controller for this `(r, epsilon)`.
    #[serde(default)]
    pub delta: Option<f64>,
}

/// Closed-loop settings shared by every containment estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub sampling: Sampling,
    pub closed_loop: ClosedLoopConfig,
    pub ensemble_size: usize,
    pub initial_mean: InitialMean,
    pub include_terminal: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let q = StabilityQuery::default();
        Self {
            sampling: q.sampling,
            closed_loop: q.closed_loop,
            ensemble_size: q.ensemble_size,
            initial_mean: q.initial_mean,
            include_terminal: q.include_terminal,
        }
    }
}

/// Deterministic-start trajectories and the containment edge on `x0 > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeConfig {
    pub fan_starts: Vec<f64>,
    pub fan_trials: usize,
    pub edge_trials: usize,
    pub upper: f64,
    pub tolerance: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            fan_starts: (-25..=25).map(|j| 10.0 * j as f64).collect(),
            fan_trials: 1,
            edge_trials: 100,
            upper: 400.0,
            tolerance: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub oracle: u64,
    pub train: u64,
    pub stability: u64,
    pub attack: u64,
    pub harvest: u64,
    pub retrain: u64,
}

impl Seeds {
    /// Stage seeds derived from one master seed.
    pub fn from_master(seed: u64) -> Self {
        let s = |j: u64| derive_seed(seed, 0, j);
        Self {
            data: s(1),
            oracle: s(2),
            train: s(3),
            stability: s(4),
            attack: s(5),
            harvest: s(6),
            retrain: s(7),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_master(0)
    }
}

/// Published containment probability for one table cell, used only for
/// reporting distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceValue {
    pub scenario: String,
    pub controller: String,
    pub p_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub version: u32,
    pub lq_params: LqParams,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub architectures: Vec<Architecture>,
    pub train: TrainConfig,
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(rename = "M")]
    pub trials: usize,
    /// Samples in the optimizer-versus-Riccati check.
    #[serde(rename = "N_check")]
    pub n_check: usize,
    pub sweep: SweepConfig,
    /// Divergence threshold for closed-loop rollouts (stability, attack).
    /// Open-loop solves keep the problem default.
    pub divergence_threshold: f64,
    /// Attack on the retrained architecture; its seed comes from `seeds`.
    pub attack: AttackConfig,
    pub harvest: HarvestConfig,
    /// Restarts per harvest attempt.
    pub harvest_restarts: usize,
    pub population: PopulationMode,
    pub retrain: RetrainConfig,
    pub retrain_architecture: Architecture,
    pub edge: EdgeConfig,
    pub seeds: Seeds,
    pub reference: Vec<ReferenceValue>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self::full()
    }
}

fn scenario(label: &str, epsilon: f64, delta: f64) -> ScenarioConfig {
    ScenarioConfig {
        label: label.into(),
        r: 200.0,
        epsilon,
        delta: Some(delta),
    }
}

fn reference_table() -> Vec<ReferenceValue> {
    let cells = [
        ("delta_20", [1.0, 1.0, 1.0]),
        ("delta_150", [0.45, 0.557, 0.464]),
        ("delta_180", [0.3, 0.449, 0.354]),
    ];
    cells
        .iter()
        .flat_map(|(s, ps)| {
            ["NN1", "NN2", IMPROVED].iter().zip(ps).map(move |(c, p)| ReferenceValue {
                scenario: s.to_string(),
                controller: c.to_string(),
                p_hat: *p,
            })
        })
        .collect()
}

/// Label of the retrained controller.
pub const IMPROVED: &str = "Improved NN1";

impl BenchmarkConfig {
    pub fn full() -> Self {
        Self {
            version: CONFIG_VERSION,
            lq_params: LqParams::default(),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            architectures: vec![Architecture::Nn1, Architecture::Nn2],
            train: TrainConfig::default(),
            scenarios: vec![
                scenario("delta_20", 1e-3, 20.0),
                scenario("delta_150", 0.55, 150.0),
                scenario("delta_180", 0.7, 180.0),
            ],
            trials: 1000,
            n_check: 100,
            sweep: SweepConfig::default(),
            divergence_threshold: 1e6,
            attack: AttackConfig::default(),
            harvest: HarvestConfig {
                count: 500,
                min_separation: Some(0.1),
                exclude_radius: 0.0,
                max_attempts: 20_000,
            },
            harvest_restarts: 1,
            population: PopulationMode::PerState { copies: 1 },
            retrain: RetrainConfig::default(),
            retrain_architecture: Architecture::Nn1,
            edge: EdgeConfig::default(),
            seeds: Seeds::default(),
            reference: reference_table(),
        }
    }

    pub fn smoke() -> Self {
        let full = Self::full();
        Self {
            data: DataConfig {
                samples: 20,
                ..full.data
            },
            train: TrainConfig {
                epochs: 10,
                ..full.train
            },
            trials: 100,
            n_check: 20,
            harvest: HarvestConfig {
                count: 50,
                max_attempts: 2000,
                ..full.harvest
            },
            retrain: RetrainConfig {
                train: TrainConfig {
                    epochs: 10,
                    ..full.retrain.train
                },
                ..full.retrain
            },
            edge: EdgeConfig {
                fan_starts: (-5..=5).map(|j| 50.0 * j as f64).collect(),
                edge_trials: 20,
                ..full.edge
            },
            ..full
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Smoke => Self::smoke(),
            Scale::Full => Self::full(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::invalid(
                "version",
                format!("expected {CONFIG_VERSION}, found {}", self.version),
            ));
        }
        self.lq_params.validate()?;
        self.data.validate()?;
        self.optimizer.validate()?;
        self.attack.validate()?;
        self.harvest.validate()?;
        if self.architectures.is_empty() {
            return Err(Error::invalid("architectures", "must not be empty"));
        }
        if !self.architectures.contains(&self.retrain_architecture) {
            return Err(Error::invalid(
                "retrain_architecture",
                "must be one of the trained architectures",
            ));
        }
        if self.scenarios.is_empty() {
            return Err(Error::invalid("scenarios", "must not be empty"));
        }
        for s in &self.scenarios {
            self.query(s.r, s.epsilon).validate()?;
            if let Some(d) = s.delta {
                if !(d >= 0.0 && d.is_finite()) {
                    return Err(Error::invalid("scenarios.delta", "must be finite and nonnegative"));
                }
            }
        }
        if self.trials == 0 || self.n_check == 0 || self.harvest_restarts == 0 {
            return Err(Error::invalid("benchmark", "M, N_check and harvest_restarts must be positive"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::invalid("divergence_threshold", "must be positive"));
        }
        if self.edge.edge_trials == 0 || !(self.edge.upper > 0.0 && self.edge.tolerance > 0.0) {
            return Err(Error::invalid("edge", "trials, upper and tolerance must be positive"));
        }
        Ok(())
    }

    /// Containment query for one `(r, epsilon)` with the configured sweep.
    pub fn query(&self, r: f64, epsilon: f64) -> StabilityQuery {
        StabilityQuery {
            r,
            epsilon,
            trials: self.trials,
            sampling: self.sweep.sampling,
            closed_loop: self.sweep.closed_loop,
            ensemble_size: self.sweep.ensemble_size,
            initial_mean: self.sweep.initial_mean,
            include_terminal: self.sweep.include_terminal,
            seed: self.seeds.stability,
        }
    }

    /// Problem for open-loop solves and the one for closed-loop rollouts.
    pub fn problems(&self) -> Result<(ProblemSpec, ProblemSpec, TimeGrid)> {
        let (lo, hi) = self.data.mean_range;
        let spec = self
            .lq_params
            .problem((lo - self.data.group_spread, hi + self.data.group_spread))?;
        let closed = spec.clone().with_divergence_threshold(self.divergence_threshold)?;
        Ok((spec, closed, self.lq_params.grid()?))
    }
}

/// Trains architecture number `index` of the config from its seeded
/// initialization.
pub fn train_architecture(
    config: &BenchmarkConfig,
    arch: Architecture,
    index: usize,
    dataset: &Dataset,
) -> Result<TrainReport> {
    let cfg = TrainConfig {
        shuffle_seed: derive_seed(config.seeds.train, rng::domain::SHUFFLE, index as u64),
        init_seed: derive_seed(config.seeds.train, rng::domain::WEIGHT_INIT, index as u64),
        ..config.train.clone()
    };
    let init = arch.build(cfg.init_scheme, cfg.init_seed)?;
    train(&init, dataset, &cfg)
}

impl BenchmarkConfig {
    /// Retraining settings with shuffle and init seeds from `seeds.retrain`.
    pub fn seeded_retrain_config(&self) -> RetrainConfig {
        RetrainConfig {
            train: TrainConfig {
                shuffle_seed: derive_seed(self.seeds.retrain, rng::domain::SHUFFLE, 0),
                init_seed: derive_seed(self.seeds.retrain, rng::domain::WEIGHT_INIT, 0),
                ..self.retrain.train.clone()
            },
            ..self.retrain.clone()
        }
    }

    /// Attack used for harvesting: harvest seed and restart count.
    pub fn harvest_attack(&self) -> AttackConfig {
        AttackConfig {
            seed: self.seeds.harvest,
            restarts: self.harvest_restarts,
            ..self.attack.clone()
        }
    }
}

/// One training population and how its solve went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSolve {
    pub group: usize,
    pub size: usize,
    pub mean_x0: f64,
    pub achieved_cost: f64,
    pub oracle_cost: f64,
    pub status: Option<SolveStatus>,
}

fn group_states(data: &DataConfig, seed: u64, g: usize, size: usize) -> (f64, Vec<f64>) {
    let mut rng = keyed(seed, rng::domain::GROUP, g as u64);
    let (lo, hi) = data.mean_range;
    let center = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let states = (0..size)
        .map(|_| center + data.group_spread * rng.random_range(-1.0..=1.0))
        .collect();
    (center, states)
}

/// Base training records: one population per group, solved in parallel.
pub fn generate_dataset(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    solution: &RiccatiSolution,
    data: &DataConfig,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<(Dataset, Vec<GroupSolve>)> {
    data.validate()?;
    let groups = data.samples.div_ceil(data.group_size);
    let solved: Vec<(Dataset, GroupSolve)> = (0..groups)
        .into_par_iter()
        .map(|g| -> Result<(Dataset, GroupSolve)> {
            let size = data.group_size.min(data.samples - g * data.group_size);
            let (center, x0) = group_states(data, seed, g, size);
            let noise = NoiseTensor::sample(size, grid, 1, derive_seed(seed, rng::domain::NOISE, g as u64));
            let oracle_cost = riccati_optimal_cost(solution, &x0);
            let (ds, achieved_cost, status) = match data.generator {
                DataGenerator::Optimizer => {
                    let batch = solve_pcd(spec, grid, &x0, &noise, optimizer)?;
                    (batch.to_dataset(Provenance::Base, g as u32), batch.achieved_cost, Some(batch.status))
                }
                DataGenerator::Riccati => {
                    let (controls, ens) = feedback_rollout(spec, grid, solution, &x0, &noise)?;
                    let cost = crate::dynamics::empirical_cost(spec, grid, &ens, &controls)?;
                    (feedback_records(&controls, &ens, &noise, Provenance::Base, g as u32)?, cost, None)
                }
            };
            Ok((
                ds,
                GroupSolve {
                    group: g,
                    size,
                    mean_x0: center,
                    achieved_cost,
                    oracle_cost,
                    status,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut out = Dataset::new(3, 2);
    let mut report = Vec::with_capacity(groups);
    for (ds, s) in solved {
        out.extend(&ds)?;
        report.push(s);
    }
    Ok((out, report))
}

fn feedback_records(
    controls: &crate::dynamics::ControlBatch,
    ens: &crate::dynamics::Ensemble,
    noise: &NoiseTensor,
    provenance: Provenance,
    group: u32,
) -> Result<Dataset> {
    let mut out = Dataset::new(3, 2);
    for i in 0..controls.n() {
        for k in 0..controls.steps() {
            let meta = RecordMeta {
                provenance,
                group,
                sample: i as u32,
                step: k as u32,
            };
            out.push(
                &[ens.state(i, k)[0], ens.mean_state(k)[0], noise.increment(i, k)[0]],
                &[controls.control(i, k)[0], controls.mean(k)[0]],
                meta,
            )?;
        }
    }
    Ok(out)
}

/// Optimizer result against the Riccati value on one shared noise sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub samples: usize,
    pub achieved_cost: f64,
    pub oracle_cost: f64,
    pub feedback_cost: f64,
    /// `(achieved - oracle) / oracle`.
    pub gap: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

pub fn oracle_check(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    solution: &RiccatiSolution,
    samples: usize,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<OracleCheck> {
    let x0 = spec.sample_initial_states(samples, seed);
    let noise = NoiseTensor::sample(samples, grid, 1, derive_seed(seed, rng::domain::NOISE, 0));
    let batch = solve_pcd(spec, grid, &x0, &noise, optimizer)?;
    let (controls, ens) = feedback_rollout(spec, grid, solution, &x0, &noise)?;
    let feedback_cost = crate::dynamics::empirical_cost(spec, grid, &ens, &controls)?;
    let oracle_cost = riccati_optimal_cost(solution, &x0);
    Ok(OracleCheck {
        samples,
        achieved_cost: batch.achieved_cost,
        oracle_cost,
        feedback_cost,
        gap: (batch.achieved_cost - oracle_cost) / oracle_cost,
        status: batch.status,
        iterations: batch.iterations_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedController {
    pub label: String,
    pub architecture: Architecture,
    pub initial_loss: LossValue,
    pub final_loss: LossValue,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub scenario: String,
    pub controller: String,
    pub p_hat: f64,
    pub reference: f64,
    pub within_0_1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub checks: Vec<Check>,
    pub reference: Vec<ReferenceComparison>,
}

impl Summary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub riccati: RiccatiSolution,
    pub oracle: OracleCheck,
    pub groups: Vec<GroupSolve>,
    pub dataset: Dataset,
    pub trained: Vec<TrainedController>,
    /// Every controller in table order: the trained architectures, then the
    /// retrained one.
    pub controllers: Vec<(String, MlpParams)>,
    pub basin: DeltaSearch,
    pub attack: AttackResult,
    pub attack_replayed: bool,
    pub harvest: Harvest,
    pub augmented: AugmentedDataset,
    pub comparison: Comparison,
    pub edges: Vec<(String, ContainmentEdge)>,
    pub summary: Summary,
    pub stage_seconds: Vec<(String, f64)>,
    pub artifacts: Vec<PathBuf>,
}

impl BenchmarkReport {
    pub fn controller(&self, label: &str) -> Option<&MlpParams> {
        self.controllers.iter().find(|c| c.0 == label).map(|c| &c.1)
    }

    pub fn edge(&self, label: &str) -> Option<&ContainmentEdge> {
        self.edges.iter().find(|c| c.0 == label).map(|c| &c.1)
    }
}

/// `a` is at least `b`, or their 95% intervals overlap.
pub fn at_least_or_touching(a: &ComparisonRow, b: &ComparisonRow) -> bool {
    a.p_hat >= b.p_hat || a.ci_hi >= b.ci_lo
}

struct Stages {
    seconds: Vec<(String, f64)>,
}

impl Stages {
    fn run<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(name))?;
        self.seconds.push((name.to_string(), start.elapsed().as_secs_f64()));
        Ok(out)
    }
}

fn summarize(
    config: &BenchmarkConfig,
    oracle: &OracleCheck,
    comparison: &Comparison,
    base_label: &str,
    attack: &AttackResult,
    replayed: bool,
    edges: &[(String, ContainmentEdge)],
) -> Summary {
    let mut checks = vec![Check {
        name: "optimizer_within_1pct_of_riccati".into(),
        passed: oracle.gap.abs() <= 0.01,
        detail: format!("gap {:+.4}%", 100.0 * oracle.gap),
    }];
    if let Some(first) = comparison.scenarios.first() {
        let rows: Vec<&ComparisonRow> = comparison.rows.iter().filter(|r| &r.scenario == first).collect();
        checks.push(Check {
            name: format!("{first}_all_contained"),
            passed: rows.iter().all(|r| r.p_hat == 1.0 && r.ci_lo >= 0.95),
            detail: rows
                .iter()
                .map(|r| format!("{} {:.3} [{:.3}, {:.3}]", r.controller, r.p_hat, r.ci_lo, r.ci_hi))
                .collect::<Vec<_>>()
                .join("; "),
        });
    }
    for s in comparison.scenarios.iter().skip(1) {
        let Some(base) = comparison.get(s, base_label) else {
            continue;
        };
        for other in comparison.controllers.iter().filter(|c| *c != base_label) {
            if let Some(row) = comparison.get(s, other) {
                checks.push(Check {
                    name: format!("{s}_{}_at_least_{}", slug(other), slug(base_label)),
                    passed: at_least_or_touching(row, base),
                    detail: format!(
                        "{:.3} [{:.3}, {:.3}] vs {:.3} [{:.3}, {:.3}]",
                        row.p_hat, row.ci_lo, row.ci_hi, base.p_hat, base.ci_lo, base.ci_hi
                    ),
                });
            }
        }
    }
    checks.push(Check {
        name: "attack_diverges_and_replays".into(),
        passed: attack.found && replayed,
        detail: match &attack.adversarial {
            Some(x) => format!("x0 = {x:?} after {} iterations (restart {})", attack.path.len() - 1, attack.restart),
            None => format!("no adversarial ({:?})", attack.stop_reason),
        },
    });
    if let (Some(a), Some(b)) = (
        edges.iter().find(|e| e.0 == base_label),
        edges.iter().find(|e| e.0 == IMPROVED),
    ) {
        let ratio = b.1.edge / a.1.edge.max(f64::MIN_POSITIVE);
        checks.push(Check {
            name: "retraining_widens_edge_1_5x".into(),
            passed: ratio >= 1.5,
            detail: format!("{:.1} -> {:.1} ({ratio:.2}x)", a.1.edge, b.1.edge),
        });
    }
    let reference = config
        .reference
        .iter()
        .filter_map(|r| {
            comparison.get(&r.scenario, &r.controller).map(|row| ReferenceComparison {
                scenario: r.scenario.clone(),
                controller: r.controller.clone(),
                p_hat: row.p_hat,
                reference: r.p_hat,
                within_0_1: (row.p_hat - r.p_hat).abs() <= 0.1,
            })
        })
        .collect();
    Summary { checks, reference }
}

fn slug(label: &str) -> String {
    label.to_lowercase().replace(' ', "_")
}

fn write_fan(path: &Path, fans: &[(String, Vec<(f64, usize, Vec<f64>)>)], grid: &TimeGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["controller", "x0", "trial", "k", "t", "x"])?;
    for (label, fan) in fans {
        for (x0, trial, xs) in fan {
            for (k, x) in xs.iter().enumerate() {
                w.write_record([
                    label.clone(),
                    format!("{x0:?}"),
                    trial.to_string(),
                    k.to_string(),
                    format!("{:?}", grid.t(k)),
                    format!("{x:?}"),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_groups(path: &Path, groups: &[GroupSolve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "size", "mean_x0", "achieved_cost", "oracle_cost", "status"])?;
    for g in groups {
        w.write_record([
            g.group.to_string(),
            g.size.to_string(),
            format!("{:?}", g.mean_x0),
            format!("{:?}", g.achieved_cost),
            format!("{:?}", g.oracle_cost),
            g.status.map_or("feedback".into(), |s| format!("{s:?}").to_lowercase()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the whole experiment; with `out`, writes every artifact there.
pub fn run_benchmark(config: &BenchmarkConfig, out: Option<&Path>) -> Result<BenchmarkReport> {
    config.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::File {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut artifacts = Vec::new();
    let mut emit = |name: &str, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        if let Some(dir) = out {
            let p = dir.join(name);
            write(&p)?;
            artifacts.push(p);
        }
        Ok(())
    };
    let mut stages = Stages { seconds: Vec::new() };
    let (solve_spec, spec, grid) = config.problems()?;
    let seeds = &config.seeds;

    let riccati = stages.run("riccati", || riccati_solve(&config.lq_params))?;
    emit("riccati.json", &|p| Ok(fs::write(p, serde_json::to_string_pretty(&riccati)?)?))
        .map_err(|e| e.in_stage("riccati"))?;

    let oracle = stages.run("oracle_check", || {
        oracle_check(&solve_spec, &grid, &riccati, config.n_check, &config.optimizer, seeds.oracle)
    })?;

    let (dataset, groups) = stages.run("generate", || {
        generate_dataset(&solve_spec, &grid, &riccati, &config.data, &config.optimizer, seeds.data)
    })?;
    emit("dataset.csv", &|p| dataset.write_csv(p)).map_err(|e| e.in_stage("generate"))?;
    emit("groups.csv", &|p| write_groups(p, &groups)).map_err(|e| e.in_stage("generate"))?;

    let (trained, mut controllers) = stages.run("train", || {
        let mut trained = Vec::new();
        let mut controllers = Vec::new();
        for (j, arch) in config.architectures.iter().enumerate() {
            let rep = train_architecture(config, *arch, j, &dataset)?;
            trained.push(TrainedController {
                label: arch.label().into(),
                architecture: *arch,
                initial_loss: rep.initial_loss,
                final_loss: rep.final_loss,
                best_epoch: rep.best_epoch,
            });
            controllers.push((arch.label().to_string(), rep.params));
        }
        Ok((trained, controllers))
    })?;
    let base_label = config.retrain_architecture.label();
    let base = controllers
        .iter()
        .find(|c| c.0 == base_label)
        .map(|c| c.1.clone())
        .expect("validated: retrain architecture is trained");

    let first = &config.scenarios[0];
    let basin = stages.run("basin", || {
        find_delta(&spec, &grid, &base, first.r, first.epsilon, &config.query(first.r, first.epsilon))
    })?;

    let attack_cfg = AttackConfig {
        seed: seeds.attack,
        ..config.attack.clone()
    };
    let (attack, attack_replayed) = stages.run("attack", || {
        let res = pgd_attack(&spec, &grid, &base, &attack_cfg)?;
        let ok = replay(&spec, &grid, &base, &attack_cfg, &res)?;
        Ok((res, ok))
    })?;
    emit("attack.json", &|p| Ok(fs::write(p, attack.to_json()?)?)).map_err(|e| e.in_stage("attack"))?;
    emit("attack_walk.csv", &|p| attack.write_walk_csv(p)).map_err(|e| e.in_stage("attack"))?;

    let harvest_attack = config.harvest_attack();
    let harvest_cfg = HarvestConfig {
        exclude_radius: config.harvest.exclude_radius.max(basin.delta),
        ..config.harvest.clone()
    };
    let harvest = stages.run("harvest", || {
        harvest_adversarials(&spec, &grid, &base, &harvest_attack, &harvest_cfg)
    })?;

    let (augmented, improved) = stages.run("retrain", || {
        let adversarial = if harvest.records.is_empty() {
            Dataset::new(3, 2)
        } else {
            adversarial_records(config, &solve_spec, &grid, &riccati, &harvest)?
        };
        let augmented = AugmentedDataset::new(dataset.clone(), adversarial)?;
        let cfg = config.seeded_retrain_config();
        let rep = retrain(&base, &augmented, &cfg)?;
        Ok((augmented, rep.params))
    })?;
    let manifest = RetrainManifest::new(&harvest_attack, &harvest_cfg, &harvest, config.population, seeds.harvest);
    emit("retrain_manifest.json", &|p| Ok(fs::write(p, manifest.to_json()?)?))
        .map_err(|e| e.in_stage("retrain"))?;
    emit("augmented.csv", &|p| augmented.write_csv(p)).map_err(|e| e.in_stage("retrain"))?;
    controllers.push((IMPROVED.to_string(), improved));
    for (label, params) in &controllers {
        let name = format!("{}.ctrl", slug(label));
        emit(&name, &|p| write_controller(params, p)).map_err(|e| e.in_stage("train"))?;
    }

    let comparison = stages.run("compare", || {
        let scenarios: Vec<Scenario> = config
            .scenarios
            .iter()
            .map(|s| {
                let delta = match s.delta {
                    Some(d) => d,
                    None => find_delta(&spec, &grid, &base, s.r, s.epsilon, &config.query(s.r, s.epsilon))?.delta,
                };
                Ok(Scenario {
                    label: s.label.clone(),
                    r: s.r,
                    epsilon: s.epsilon,
                    delta,
                })
            })
            .collect::<Result<_>>()?;
        compare_controllers(&spec, &grid, &controllers, &scenarios, &config.query(first.r, first.epsilon))
    })?;
    emit("table2.csv", &|p| comparison.write_csv(p)).map_err(|e| e.in_stage("compare"))?;

    let edge_query = StabilityQuery {
        trials: config.edge.edge_trials,
        ensemble_size: 1,
        ..config.query(first.r, first.epsilon)
    };
    let (edges, fans) = stages.run("edges", || {
        let mut edges = Vec::new();
        let mut fans = Vec::new();
        for (label, params) in controllers.iter().filter(|c| c.0 == base_label || c.0 == IMPROVED) {
            let e = containment_edge(&spec, &grid, params, &edge_query, config.edge.upper, config.edge.tolerance)?;
            edges.push((label.clone(), e));
            let fan = trajectory_fan(&spec, &grid, params, &config.edge.fan_starts, config.edge.fan_trials, &edge_query)?;
            fans.push((label.clone(), fan));
        }
        Ok((edges, fans))
    })?;
    emit("fig3_trajectories.csv", &|p| write_fan(p, &fans, &grid)).map_err(|e| e.in_stage("edges"))?;

    let summary = summarize(config, &oracle, &comparison, base_label, &attack, attack_replayed, &edges);
    let summary_json = serde_json::json!({
        "all_passed": summary.all_passed(),
        "checks": summary.checks,
        "reference": summary.reference,
        "oracle": oracle,
        "basin_delta": basin.delta,
        "edges": edges.iter().map(|(l, e)| serde_json::json!({"controller": l, "edge": e.edge, "saturated": e.saturated})).collect::<Vec<_>>(),
        "harvest": {"found": harvest.records.len(), "requested": harvest_cfg.count, "shortfall": harvest.shortfall, "attempts": harvest.attempts},
        "trained": trained,
        "dataset_records": dataset.len(),
        "adversarial_records": augmented.adversarial().len(),
    });
    emit("summary.json", &|p| Ok(fs::write(p, serde_json::to_string_pretty(&summary_json)?)?))
        .map_err(|e| e.in_stage("summary"))?;

    Ok(BenchmarkReport {
        config: config.clone(),
        riccati,
        oracle,
        groups,
        dataset,
        trained,
        controllers,
        basin,
        attack,
        attack_replayed,
        harvest,
        augmented,
        comparison,
        edges,
        summary,
        stage_seconds: stages.seconds,
        artifacts,
    })
}

/// Supervised records from harvested states, produced by the configured
/// data generator.
pub fn adversarial_records(
    config: &BenchmarkConfig,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    riccati: &RiccatiSolution,
    harvest: &Harvest,
) -> Result<Dataset> {
    let states = harvest.states();
    match config.data.generator {
        DataGenerator::Optimizer => {
            solve_from_adversarials(spec, grid, &states, config.seeds.retrain, &config.optimizer, config.population)?
                .to_dataset()
        }
        DataGenerator::Riccati => {
            let copies = match config.population {
                PopulationMode::PerState { copies } => copies,
                PopulationMode::Joint => 1,
            };
            let mut out = Dataset::new(3, 2);
            for (q, x) in states.iter().enumerate() {
                let x0 = vec![*x; copies];
                let noise = NoiseTensor::sample(copies, grid, 1, derive_seed(config.seeds.retrain, rng::domain::NOISE, q as u64));
                let (controls, ens) = feedback_rollout(spec, grid, riccati, &x0, &noise)?;
                out.extend(&feedback_records(&controls, &ens, &noise, Provenance::Adversarial, q as u32)?)?;
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = BenchmarkConfig::full();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"M\":1000") && text.contains("\"N_check\":100") && text.contains("\"N\":1000"));
        assert_eq!(BenchmarkConfig::from_json(&text).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["tirals"] = 5.into();
        assert!(BenchmarkConfig::from_json(&v.to_string()).is_err());
        let partial = BenchmarkConfig::from_json(r#"{"M": 50, "data": {"N": 30}}"#).unwrap();
        assert_eq!(partial.trials, 50);
        assert_eq!(partial.data.samples, 30);
        assert_eq!(partial.data.group_size, 10);
    }

    #[test]
    fn invalid_fields_are_named() {
        let bad = r#"{"scenarios": [{"label": "s", "r": 200, "epsilon": 1.5, "delta": 20}]}"#;
        let msg = BenchmarkConfig::from_json(bad).unwrap_err().to_string();
        assert!(msg.contains("epsilon"), "{msg}");
        let msg = BenchmarkConfig::from_json(r#"{"version": 7}"#).unwrap_err().to_string();
        assert!(msg.contains("version"), "{msg}");
        let msg = BenchmarkConfig::from_json(r#"{"architectures": ["nn2"]}"#).unwrap_err().to_string();
        assert!(msg.contains("retrain_architecture"), "{msg}");
    }

    #[test]
    fn generated_groups_match_the_oracle() {
        let cfg = BenchmarkConfig {
            data: DataConfig {
                samples: 25,
                ..DataConfig::default()
            },
            ..BenchmarkConfig::full()
        };
        let (spec, _, grid) = cfg.problems().unwrap();
        let sol = riccati_solve(&cfg.lq_params).unwrap();
        let (ds, groups) = generate_dataset(&spec, &grid, &sol, &cfg.data, &cfg.optimizer, 5).unwrap();
        assert_eq!(ds.len(), 25 * 15);
        assert_eq!(groups.iter().map(|g| g.size).collect::<Vec<_>>(), vec![10, 10, 5]);
        for g in &groups {
            let gap = (g.achieved_cost - g.oracle_cost) / g.oracle_cost;
            assert!(gap.abs() < 0.01, "group {} gap {gap}", g.group);
            assert!(g.mean_x0.abs() <= 50.0);
        }
        let (again, _) = generate_dataset(&spec, &grid, &sol, &cfg.data, &cfg.optimizer, 5).unwrap();
        assert_eq!(again, ds);
        let (other, _) = generate_dataset(&spec, &grid, &sol, &cfg.data, &cfg.optimizer, 6).unwrap();
        assert_ne!(other, ds);
    }

    #[test]
    fn feedback_generator_targets_follow_the_gains() {
        let cfg = DataConfig {
            generator: DataGenerator::Riccati,
            samples: 10,
            ..DataConfig::default()
        };
        let p = LqParams::default();
        let (spec, grid) = (p.problem((-70.0, 70.0)).unwrap(), p.grid().unwrap());
        let sol = riccati_solve(&p).unwrap();
        let (ds, groups) = generate_dataset(&spec, &grid, &sol, &cfg, &OptimizerConfig::default(), 1).unwrap();
        assert!(groups[0].status.is_none());
        for r in 0..ds.len() {
            let k = ds.meta(r).step as usize;
            let (z, y) = (ds.input(r), ds.target(r));
            let u = -sol.mean_gain[k] * z[1] - sol.dev_gain[k] * (z[0] - z[1]);
            assert!((y[0] - u).abs() < 1e-9 * (1.0 + u.abs()));
            assert!((y[1] + sol.mean_gain[k] * z[1]).abs() < 1e-9 * (1.0 + y[1].abs()));
        }
    }

    #[test]
    fn touching_intervals_count_as_ordered() {
        let row = |p: f64, lo: f64, hi: f64| ComparisonRow {
            scenario: "s".into(),
            controller: "c".into(),
            r: 200.0,
            epsilon: 0.5,
            delta: 150.0,
            p_hat: p,
            ci_lo: lo,
            ci_hi: hi,
            trials: 1000,
        };
        let base = row(0.45, 0.42, 0.48);
        assert!(at_least_or_touching(&row(0.46, 0.43, 0.49), &base));
        assert!(at_least_or_touching(&row(0.44, 0.41, 0.47), &base));
        assert!(!at_least_or_touching(&row(0.30, 0.27, 0.33), &base));
    }

    #[test]
    fn seeds_from_master_are_distinct() {
        let s = Seeds::from_master(9);
        let all = [s.data, s.oracle, s.train, s.stability, s.attack, s.harvest, s.retrain];
        let mut sorted = all.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), all.len());
        assert_ne!(Seeds::from_master(9), Seeds::from_master(10));
    }
}
