use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use mftc_core::attack::{pgd_attack, replay, AttackConfig};
use mftc_core::lq::benchmark::{
    adversarial_records, generate_dataset, run_benchmark, train_architecture, write_groups,
    BenchmarkConfig, Seeds,
};
use mftc_core::lq::riccati_solve;
use mftc_core::nn::{read_controller, write_controller, Dataset};
use mftc_core::retrain::{harvest_adversarials, retrain, AugmentedDataset, HarvestConfig, RetrainManifest};
use mftc_core::rng::{derive_seed, domain};
use mftc_core::stability::{estimate_containment, find_delta, write_trials_csv};
use mftc_core::{Error, Result};

use crate::manifest::{relative_outputs, revision, sha256_hex, unix_now, versions, RunManifest};
use crate::{Cli, Command};

struct Loaded {
    config: BenchmarkConfig,
    digest: String,
    effective_digest: String,
}

/// Objects merge key by key; anything else in `patch` replaces `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn load_config(cli: &Cli) -> Result<Loaded> {
    let base = BenchmarkConfig::for_scale(cli.scale.into());
    let (mut config, digest) = match &cli.config {
        Some(path) => {
            let bytes = fs::read(path).map_err(|source| Error::File {
                path: path.clone(),
                source,
            })?;
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
                what: "config",
                reason: format!("{}: {e}", path.display()),
            })?;
            // Strict parse of the file alone, for unknown keys and bad types
            // with line and column.
            serde_json::from_str::<BenchmarkConfig>(text).map_err(|e| Error::Parse {
                what: "config",
                reason: format!("{}: {e}", path.display()),
            })?;
            let mut merged = serde_json::to_value(&base)?;
            merge(&mut merged, serde_json::from_str(text)?);
            let config: BenchmarkConfig = serde_json::from_value(merged).map_err(|e| Error::Parse {
                what: "config",
                reason: format!("{}: {e}", path.display()),
            })?;
            (config, sha256_hex(&bytes))
        }
        None => {
            let digest = sha256_hex(&serde_json::to_vec(&base)?);
            (base, digest)
        }
    };
    if let Some(seed) = cli.seed {
        config.seeds = Seeds::from_master(seed);
    }
    config.validate()?;
    let effective_digest = sha256_hex(&serde_json::to_vec(&config)?);
    Ok(Loaded {
        config,
        digest,
        effective_digest,
    })
}

fn ensure_readable(path: &Path) -> Result<()> {
    fs::metadata(path).map(|_| ()).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn slug(label: &str) -> String {
    label.to_lowercase().replace(' ', "_")
}

pub fn run(cli: &Cli) -> Result<()> {
    let loaded = load_config(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|source| Error::File {
        path: out.clone(),
        source,
    })?;
    let started = unix_now();
    let (name, outputs) = match &cli.command {
        Command::Generate => ("generate", generate(&loaded.config, out)?),
        Command::Train { dataset } => ("train", train_all(&loaded.config, dataset, out)?),
        Command::Attack { controller } => ("attack", attack(&loaded.config, controller, out)?),
        Command::Stability { controller } => ("stability", stability(&loaded.config, controller, out)?),
        Command::Retrain {
            controller,
            dataset,
            rounds,
        } => ("retrain", retrain_rounds(&loaded.config, controller, dataset, *rounds, out)?),
        Command::Benchmark => ("benchmark", benchmark(&loaded.config, out)?),
    };
    let manifest = RunManifest {
        command: name.into(),
        config_digest: loaded.digest,
        effective_config_digest: loaded.effective_digest,
        seeds: loaded.config.seeds.clone(),
        versions: versions(),
        revision: revision(),
        started_unix: started,
        finished_unix: unix_now(),
        outputs: relative_outputs(out, &outputs),
    };
    let path = out.join("manifest.json");
    write_text(&path, &serde_json::to_string_pretty(&manifest)?)?;
    for p in &outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn generate(config: &BenchmarkConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (solve_spec, _, grid) = config.problems()?;
    let riccati = riccati_solve(&config.lq_params)?;
    let (dataset, groups) = generate_dataset(
        &solve_spec,
        &grid,
        &riccati,
        &config.data,
        &config.optimizer,
        config.seeds.data,
    )?;
    let files = [out.join("riccati.json"), out.join("dataset.csv"), out.join("groups.csv")];
    write_text(&files[0], &serde_json::to_string_pretty(&riccati)?)?;
    dataset.write_csv(&files[1])?;
    write_groups(&files[2], &groups)?;
    eprintln!("{} records from {} populations", dataset.len(), groups.len());
    Ok(files.to_vec())
}

fn train_all(config: &BenchmarkConfig, dataset: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_readable(dataset)?;
    let data = Dataset::read_csv(dataset)?;
    let mut files = Vec::new();
    let mut summary = Vec::new();
    for (j, arch) in config.architectures.iter().enumerate() {
        let rep = train_architecture(config, *arch, j, &data)?;
        let path = out.join(format!("{}.ctrl", slug(arch.label())));
        write_controller(&rep.params, &path)?;
        eprintln!(
            "{}: loss {:.4e} -> {:.4e}",
            arch.label(),
            rep.initial_loss.mse,
            rep.final_loss.mse
        );
        summary.push(serde_json::json!({
            "controller": arch.label(),
            "file": path.file_name().map(|f| f.to_string_lossy().into_owned()),
            "initial_loss": rep.initial_loss,
            "final_loss": rep.final_loss,
            "best_epoch": rep.best_epoch,
            "epoch_losses": rep.epoch_losses,
        }));
        files.push(path);
    }
    let path = out.join("train.json");
    write_text(&path, &serde_json::to_string_pretty(&summary)?)?;
    files.push(path);
    Ok(files)
}

fn attack(config: &BenchmarkConfig, controller: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let params = read_controller(controller)?;
    let (_, spec, grid) = config.problems()?;
    let cfg = AttackConfig {
        seed: config.seeds.attack,
        ..config.attack.clone()
    };
    let res = pgd_attack(&spec, &grid, &params, &cfg)?;
    let replayed = replay(&spec, &grid, &params, &cfg, &res)?;
    match &res.adversarial {
        Some(x) => eprintln!("adversarial x0 = {x:?} (restart {}, replay {replayed})", res.restart),
        None => eprintln!("no adversarial found ({:?})", res.stop_reason),
    }
    let files = [out.join("attack.json"), out.join("attack_walk.csv")];
    write_text(&files[0], &res.to_json()?)?;
    res.write_walk_csv(&files[1])?;
    Ok(files.to_vec())
}

fn stability(config: &BenchmarkConfig, controller: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let params = read_controller(controller)?;
    let (_, spec, grid) = config.problems()?;
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for s in &config.scenarios {
        let query = config.query(s.r, s.epsilon);
        let delta = match s.delta {
            Some(d) => d,
            None => find_delta(&spec, &grid, &params, s.r, s.epsilon, &query)?.delta,
        };
        let rep = estimate_containment(&spec, &grid, &params, delta, &query)?.with_scenario(s.label.clone());
        eprintln!(
            "{}: delta {delta} p_hat {:.3} [{:.3}, {:.3}]",
            s.label, rep.p_hat, rep.ci_lo, rep.ci_hi
        );
        let path = out.join(format!("stability_{}.csv", s.label));
        write_trials_csv(&rep, &path)?;
        files.push(path);
        reports.push(rep);
    }
    let path = out.join("stability.json");
    write_text(&path, &serde_json::to_string_pretty(&reports)?)?;
    files.insert(0, path);
    Ok(files)
}

fn retrain_rounds(
    config: &BenchmarkConfig,
    controller: &Path,
    dataset: &Path,
    rounds: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if rounds == 0 {
        return Err(Error::invalid("rounds", "must be positive"));
    }
    let mut params = read_controller(controller)?;
    ensure_readable(dataset)?;
    let mut augmented = AugmentedDataset::read_csv(dataset)?;
    let (solve_spec, spec, grid) = config.problems()?;
    let riccati = riccati_solve(&config.lq_params)?;
    let first = &config.scenarios[0];
    let query = config.query(first.r, first.epsilon);
    let retrain_cfg = config.seeded_retrain_config();
    let mut manifests = Vec::new();
    for round in 0..rounds {
        let basin = find_delta(&spec, &grid, &params, first.r, first.epsilon, &query)?;
        let mut attack = config.harvest_attack();
        if round > 0 {
            attack.seed = derive_seed(config.seeds.harvest, domain::HARVEST, round as u64);
        }
        let harvest_cfg = HarvestConfig {
            exclude_radius: config.harvest.exclude_radius.max(basin.delta),
            ..config.harvest.clone()
        };
        let harvest = harvest_adversarials(&spec, &grid, &params, &attack, &harvest_cfg)?;
        eprintln!(
            "round {}: basin {:.2}, {} adversarial states in {} attempts",
            round + 1,
            basin.delta,
            harvest.records.len(),
            harvest.attempts
        );
        if !harvest.records.is_empty() {
            let mut adversarial = augmented.adversarial().clone();
            adversarial.extend(&adversarial_records(config, &solve_spec, &grid, &riccati, &harvest)?)?;
            augmented = AugmentedDataset::new(augmented.base().clone(), adversarial)?;
        }
        params = retrain(&params, &augmented, &retrain_cfg)?.params;
        manifests.push(RetrainManifest::new(
            &attack,
            &harvest_cfg,
            &harvest,
            config.population,
            config.seeds.retrain,
        ));
    }
    let files = [
        out.join("improved.ctrl"),
        out.join("augmented.csv"),
        out.join("retrain_manifest.json"),
    ];
    write_controller(&params, &files[0])?;
    augmented.write_csv(&files[1])?;
    write_text(&files[2], &serde_json::to_string_pretty(&manifests)?)?;
    Ok(files.to_vec())
}

fn benchmark(config: &BenchmarkConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let report = run_benchmark(config, Some(out))?;
    println!("{}", report.comparison.to_text_table());
    for c in &report.summary.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for (stage, secs) in &report.stage_seconds {
        eprintln!("{stage}: {secs:.2}s");
    }
    Ok(report.artifacts)
}
