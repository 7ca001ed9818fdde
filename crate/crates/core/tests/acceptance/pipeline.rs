//! Seeded end-to-end runs on the decoy benchmark.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use xbl_core::config::RunConfig;
use xbl_core::data::{generate_decoy_dataset, DatasetSplit};
use xbl_core::harness::{self, REFINED, UNREFINED};
use xbl_core::metrics::{accuracy, confounder_mass, dataset_ap};
use xbl_core::model::Classifier;
use xbl_core::{Result, XblError};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const TRAIN_MIN: f64 = 0.95;
pub const RELIANCE_GAP: f64 = 0.15;
pub const TRAIN_BUDGET: Duration = Duration::from_secs(300);
pub const AP_GAIN: f64 = 0.03;
pub const ACC_DROP: f64 = -0.07;

#[derive(Clone, Debug)]
pub struct Unrefined {
    pub model: Classifier,
    pub data: DatasetSplit,
    pub elapsed: Duration,
    pub train_acc: f64,
    pub clean_acc: f64,
    pub swapped_acc: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Snapshot {
    pub ap_clean: f64,
    pub acc_clean: f64,
    pub confounder_mass: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SeedRun {
    pub before: Snapshot,
    pub after: Snapshot,
}

thread_local! {
    static UNREFINED_RUNS: RefCell<BTreeMap<u64, Unrefined>> = RefCell::new(BTreeMap::new());
    static SEED_RUNS: RefCell<Option<Vec<SeedRun>>> = const { RefCell::new(None) };
}

pub fn config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

/// Trains (or recalls) the unrefined model of the default run at `seed`.
pub fn unrefined(seed: u64) -> Result<Unrefined> {
    if let Some(u) = UNREFINED_RUNS.with(|m| m.borrow().get(&seed).cloned()) {
        return Ok(u);
    }
    let cfg = config(seed);
    let data = generate_decoy_dataset(&cfg.decoy, seed)?;
    let start = Instant::now();
    let outcome = harness::train_unrefined(&cfg, &data)?;
    let elapsed = start.elapsed();
    let model = outcome.model;
    let u = Unrefined {
        train_acc: accuracy(&model, &data.train)?,
        clean_acc: accuracy(&model, &data.test_clean)?,
        swapped_acc: accuracy(&model, &data.test_swapped)?,
        model,
        data,
        elapsed,
    };
    UNREFINED_RUNS.with(|m| m.borrow_mut().insert(seed, u.clone()));
    Ok(u)
}

fn snapshot(model: &Classifier, data: &DatasetSplit, tau: f64) -> Result<Snapshot> {
    Ok(Snapshot {
        ap_clean: dataset_ap(model, &data.test_clean, tau)?,
        acc_clean: accuracy(model, &data.test_clean)?,
        confounder_mass: confounder_mass(model, &data.test_swapped)?
            .ok_or_else(|| XblError::Contract("swapped split has no confounder masks".into()))?,
    })
}

/// Unrefined and refined metrics for every seed, computed once.
pub fn seed_runs() -> Result<Vec<SeedRun>> {
    if let Some(runs) = SEED_RUNS.with(|r| r.borrow().clone()) {
        return Ok(runs);
    }
    let mut runs = Vec::new();
    for seed in SEEDS {
        let cfg = config(seed);
        let u = unrefined(seed)?;
        let before = snapshot(&u.model, &u.data, cfg.tau)?;
        let refined = harness::refine(&cfg, u.model.clone(), &u.data)?;
        let after = snapshot(&refined.outcome.model, &u.data, cfg.tau)?;
        println!(
            "    seed {seed}: AP {:.3} -> {:.3}, clean acc {:.3} -> {:.3}, confounder mass {:.4} -> {:.4}",
            before.ap_clean,
            after.ap_clean,
            before.acc_clean,
            after.acc_clean,
            before.confounder_mass,
            after.confounder_mass
        );
        runs.push(SeedRun { before, after });
    }
    SEED_RUNS.with(|r| *r.borrow_mut() = Some(runs.clone()));
    Ok(runs)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Reduced configuration for the determinism check: the default pipeline
/// with fewer images and epochs.
pub fn reduced_config(output_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 7,
        output_dir: output_dir.to_path_buf(),
        epochs_unrefined: 3,
        epochs_refine: 2,
        ..RunConfig::default()
    };
    cfg.decoy.train_per_class = 16;
    cfg.decoy.validation_per_class = 4;
    cfg.decoy.test_clean_per_class = 4;
    cfg.decoy.test_swapped_per_class = 4;
    cfg
}

fn run_pipeline(dir: &Path) -> Result<()> {
    let cfg = reduced_config(dir);
    harness::cmd_generate(&cfg, false)?;
    harness::cmd_train(&cfg)?;
    harness::cmd_refine(&cfg, None)?;
    for stage in [UNREFINED, REFINED] {
        harness::cmd_evaluate(&cfg, &harness::checkpoint_path(&cfg, stage), &cfg.data_dir(), cfg.tau)?;
    }
    let ids: Vec<String> = ["train:0", "test_clean:1", "test_swapped:2"].map(String::from).to_vec();
    harness::cmd_explain(&cfg, &harness::checkpoint_path(&cfg, REFINED), &ids, &dir.join("panels"))?;
    Ok(())
}

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| XblError::io(&dir, e))? {
            let path = entry.map_err(|e| XblError::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| XblError::io(&path, e))?;
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, bytes);
            }
        }
    }
    Ok(out)
}

pub struct Comparison {
    pub files: usize,
    pub by_extension: BTreeMap<String, usize>,
    pub differing: Vec<PathBuf>,
}

/// Runs the reduced pipeline in two fresh directories and compares every
/// file byte for byte.
pub fn determinism() -> Result<Comparison> {
    let tmp = |_| tempfile::tempdir().map_err(|e| XblError::io(std::env::temp_dir(), e));
    let (a, b) = (tmp(0)?, tmp(1)?);
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let fa = files_under(a.path())?;
    let fb = files_under(b.path())?;
    let mut differing: Vec<PathBuf> = fa
        .iter()
        .filter(|(p, bytes)| fb.get(*p) != Some(*bytes))
        .map(|(p, _)| p.clone())
        .collect();
    differing.extend(fb.keys().filter(|p| !fa.contains_key(*p)).cloned());
    let mut by_extension = BTreeMap::new();
    for p in fa.keys() {
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_string();
        *by_extension.entry(ext).or_insert(0) += 1;
    }
    Ok(Comparison {
        files: fa.len(),
        by_extension,
        differing,
    })
}
