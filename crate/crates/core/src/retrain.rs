//! Adversarial retraining: harvest states that break a controller, solve
//! the control problem from them and retrain on base plus adversarial data.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, replay, AttackConfig};
use crate::dynamics::{NoiseTensor, ProblemSpec, TimeGrid};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::norm2;
use crate::nn::{train, Dataset, MlpParams, Provenance, TrainConfig, TrainReport};
use crate::optimizer::{solve_pcd, OptimalBatch, OptimizerConfig};
use crate::rng::{self, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarvestConfig {
    pub count: usize,
    /// Minimum pairwise distance between kept states; `None` means alpha/100.
    pub min_separation: Option<f64>,
    /// States inside this ball are discarded (the controller's known basin).
    pub exclude_radius: f64,
    /// Attack runs allowed before giving up.
    pub max_attempts: usize,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            count: 500,
            min_separation: None,
            exclude_radius: 0.0,
            max_attempts: 5000,
        }
    }
}

impl HarvestConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.min_separation {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid("harvest.min_separation", "must be finite and nonnegative"));
            }
        }
        if !(self.exclude_radius >= 0.0 && self.exclude_radius.is_finite()) {
            return Err(Error::invalid("harvest.exclude_radius", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestRecord {
    pub state: Vec<f64>,
    pub attempt: usize,
    pub attack_seed: u64,
    pub restart: usize,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Harvest {
    pub records: Vec<HarvestRecord>,
    /// Fewer than the requested count were found.
    pub shortfall: bool,
    pub attempts: usize,
}

impl Harvest {
    /// Kept states, flattened `count x d`.
    pub fn states(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.state.iter().copied()).collect()
    }
}

/// Attempts launched per round; fixed so the attempt count does not depend
/// on the thread pool.
const HARVEST_CHUNK: usize = 64;

/// Runs independent attacks with fresh seeds until `count` distinct
/// adversarial states are kept. Attempts run in parallel chunks and are
/// accepted in attempt order, so the result does not depend on scheduling.
pub fn harvest_adversarials(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    params: &MlpParams,
    attack: &AttackConfig,
    config: &HarvestConfig,
) -> Result<Harvest> {
    attack.validate()?;
    config.validate()?;
    let sep = config.min_separation.unwrap_or(attack.alpha / 100.0);
    let mut records: Vec<HarvestRecord> = Vec::new();
    let mut attempts = 0;
    while records.len() < config.count && attempts < config.max_attempts {
        let hi = (attempts + HARVEST_CHUNK).min(config.max_attempts);
        let found: Vec<Option<HarvestRecord>> = (attempts..hi)
            .into_par_iter()
            .map(|a| {
                let cfg = AttackConfig {
                    seed: derive_seed(attack.seed, rng::domain::HARVEST, a as u64),
                    ..attack.clone()
                };
                let res = pgd_attack(spec, grid, params, &cfg)?;
                if !replay(spec, grid, params, &cfg, &res)? {
                    return Ok(None);
                }
                Ok(res.adversarial.map(|state| HarvestRecord {
                    state,
                    attempt: a,
                    attack_seed: cfg.seed,
                    restart: res.restart,
                    noise_seed: res.noise_seed,
                }))
            })
            .collect::<Result<_>>()?;
        attempts = hi;
        for rec in found.into_iter().flatten() {
            if records.len() == config.count {
                break;
            }
            if norm2(&rec.state) <= config.exclude_radius {
                continue;
            }
            let close = records.iter().any(|kept| {
                let diff: Vec<f64> = kept.state.iter().zip(&rec.state).map(|(a, b)| a - b).collect();
                norm2(&diff) < sep
            });
            if !close {
                records.push(rec);
            }
        }
    }
    Ok(Harvest {
        shortfall: records.len() < config.count,
        records,
        attempts,
    })
}

/// How adversarial states become initial ensembles for the control solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PopulationMode {
    /// One population whose samples are the adversarial states.
    #[default]
    Joint,
    /// A separate population per state: `copies` samples all starting at
    /// the state, so the initial mean equals the state.
    PerState { copies: usize },
}

fn state_key(x: &[f64]) -> u64 {
    x.iter()
        .fold(0x9e37_79b9_7f4a_7c15, |acc, v| derive_seed(acc, rng::domain::GROUP, v.to_bits()))
}

/// Noise rows keyed by the state's value, so reordering the states
/// reorders the noise with them.
fn state_noise(x: &[f64], copies: usize, grid: &TimeGrid, seed: u64) -> NoiseTensor {
    NoiseTensor::sample(copies, grid, x.len(), derive_seed(seed, rng::domain::GROUP, state_key(x)))
}

#[derive(Debug, Clone)]
pub struct AdversarialSolve {
    pub mode: PopulationMode,
    pub batches: Vec<OptimalBatch>,
}

impl AdversarialSolve {
    /// Records tagged adversarial; per-state solves use the state index as group.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let mut iter = self.batches.iter().enumerate();
        let Some((_, first)) = iter.next() else {
            return Err(Error::invalid("adversarial solve", "no batches"));
        };
        let mut out = first.to_dataset(Provenance::Adversarial, 0);
        for (q, b) in iter {
            out.extend(&b.to_dataset(Provenance::Adversarial, q as u32))?;
        }
        Ok(out)
    }
}

/// Optimal controls from adversarial initial states (flattened `q x d`).
pub fn solve_from_adversarials(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    states: &[f64],
    noise_seed: u64,
    optimizer: &OptimizerConfig,
    mode: PopulationMode,
) -> Result<AdversarialSolve> {
    let d = spec.state_dim();
    if states.is_empty() || states.len() % d != 0 {
        return Err(Error::dim("adversarial states", d, states.len() % d));
    }
    if states.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("adversarial states", "must be finite"));
    }
    let batches = match mode {
        PopulationMode::Joint => {
            let mut data = Vec::with_capacity(states.len() / d * grid.steps() * d);
            for x in states.chunks(d) {
                data.extend_from_slice(state_noise(x, 1, grid, noise_seed).data());
            }
            let noise = NoiseTensor::from_raw(states.len() / d, grid.steps(), d, data)?;
            vec![solve_pcd(spec, grid, states, &noise, optimizer)?]
        }
        PopulationMode::PerState { copies } => {
            if copies == 0 {
                return Err(Error::invalid("population.copies", "must be positive"));
            }
            states
                .par_chunks(d)
                .map(|x| {
                    let noise = state_noise(x, copies, grid, noise_seed);
                    let initial: Vec<f64> = (0..copies).flat_map(|_| x.iter().copied()).collect();
                    solve_pcd(spec, grid, &initial, &noise, optimizer)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(AdversarialSolve { mode, batches })
}

/// Base records kept verbatim plus adversarial records.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    base: Dataset,
    adversarial: Dataset,
}

impl AugmentedDataset {
    pub fn new(base: Dataset, adversarial: Dataset) -> Result<Self> {
        ensure_dim("adversarial input", base.input_dim(), adversarial.input_dim())?;
        ensure_dim("adversarial target", base.target_dim(), adversarial.target_dim())?;
        if base.count(Provenance::Base) != base.len() {
            return Err(Error::invalid("augmented.base", "contains non-base records"));
        }
        if adversarial.count(Provenance::Adversarial) != adversarial.len() {
            return Err(Error::invalid("augmented.adversarial", "contains base records"));
        }
        Ok(Self { base, adversarial })
    }

    pub fn base(&self) -> &Dataset {
        &self.base
    }

    pub fn adversarial(&self) -> &Dataset {
        &self.adversarial
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.adversarial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Base records followed by adversarial ones, the latter weighted.
    pub fn combined(&self, adversarial_weight: f64) -> Result<Dataset> {
        let mut out = self.base.clone();
        out.extend(&self.adversarial)?;
        out.set_weight(Provenance::Adversarial, adversarial_weight)?;
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.combined(1.0)?.write_csv(path)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let all = Dataset::read_csv(path)?;
        let split = |p: Provenance| {
            let idx: Vec<usize> = (0..all.len()).filter(|&r| all.meta(r).provenance == p).collect();
            all.reordered(&idx)
        };
        Self::new(split(Provenance::Base), split(Provenance::Adversarial))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub train: TrainConfig,
    pub adversarial_weight: f64,
    /// Start from a fresh initialization instead of the given parameters.
    pub cold_start: bool,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            adversarial_weight: 1.0,
            cold_start: false,
        }
    }
}

/// Trains on the combined loss over base and adversarial records.
pub fn retrain(
    params_init: &MlpParams,
    augmented: &AugmentedDataset,
    config: &RetrainConfig,
) -> Result<TrainReport> {
    if augmented.is_empty() {
        return Err(Error::invalid("augmented", "dataset is empty"));
    }
    let data = augmented.combined(config.adversarial_weight)?;
    let start = if config.cold_start {
        let mut dims = vec![params_init.input_dim()];
        dims.extend(params_init.layers().iter().map(|l| l.out_dim));
        let acts: Vec<_> = params_init.layers().iter().map(|l| l.activation).collect();
        let fresh = MlpParams::init(&dims, &acts, config.train.init_scheme, config.train.init_seed)?;
        match params_init.input_scaling() {
            Some(s) => fresh.with_input_scaling(s.clone())?,
            None => fresh,
        }
    } else {
        params_init.clone()
    };
    train(&start, &data, &config.train)
}

/// What produced an adversarial dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainManifest {
    pub attack: AttackConfig,
    pub harvest: HarvestConfig,
    pub population: PopulationMode,
    pub noise_seed: u64,
    pub found: usize,
    pub shortfall: bool,
    pub attempts: usize,
    pub records: Vec<HarvestRecord>,
}

impl RetrainManifest {
    pub fn new(
        attack: &AttackConfig,
        harvest_config: &HarvestConfig,
        harvest: &Harvest,
        population: PopulationMode,
        noise_seed: u64,
    ) -> Self {
        Self {
            attack: attack.clone(),
            harvest: harvest_config.clone(),
            population,
            noise_seed,
            found: harvest.records.len(),
            shortfall: harvest.shortfall,
            attempts: harvest.attempts,
            records: harvest.records.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests;
