//! The experiment pipeline behind the command-line tool: generate data,
//! train the unrefined model, refine it, evaluate, and draw panels.
//!
//! Output layout under `output_dir`:
//! `data/` (unless `data_dir` is set), `unrefined.xblw`, `refined.xblw`,
//! `<stage>_epochs.csv`, `<stage>_metrics.csv`, `exemplars/`,
//! `evaluation_<checkpoint>.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{LossMode, RunConfig};
use crate::data::{generate_decoy_dataset, load_image_dir, write_dataset, DatasetSplit, SplitName};
use crate::error::{Result, XblError};
use crate::exemplar::{load_pair, pair_hash, save_selection, select_exemplars, Selection};
use crate::io::write_atomic;
use crate::losses::LossWeights;
use crate::metrics::{accuracy, dataset_ap, metrics_csv, MetricsRow};
use crate::model::{build_classifier, Classifier};
use crate::saliency::{gradcam, overlay_triptych};
use crate::data::pgm::write_pgm;
use crate::train::{train, EpochRecord, Objective, TrainOutcome, TrainSettings};

pub const UNREFINED: &str = "unrefined";
pub const REFINED: &str = "refined";

pub fn checkpoint_path(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.output_dir.join(format!("{stage}.xblw"))
}

pub fn exemplar_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("exemplars")
}

/// Stable identifier of one stage of one configured run.
pub fn run_id(cfg: &RunConfig, stage: &str) -> String {
    format!("{stage}-seed{}", cfg.seed)
}

pub fn epochs_csv(run_id: &str, config_hash: &str, history: &[EpochRecord]) -> String {
    let mut out = String::from("run_id,config_hash,epoch,train_loss,val_loss,val_acc,lr\n");
    for r in history {
        let _ = writeln!(
            out,
            "{run_id},{config_hash},{},{:.6},{:.6},{:.6},{}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr
        );
    }
    out
}

fn settings(cfg: &RunConfig, epochs: usize, weights: LossWeights, seed: u64) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam.clone(),
        lr_decay_factor: cfg.lr_decay_factor,
        lr_decay_patience: cfg.lr_decay_patience,
        early_stop_patience: cfg.early_stop_patience,
        weights,
        seed,
    }
}

/// Cross-entropy training from a fresh seeded initialization. All layers
/// train; `frozen_layers` applies to refinement.
pub fn train_unrefined(cfg: &RunConfig, data: &DatasetSplit) -> Result<TrainOutcome> {
    let model = build_classifier(&cfg.model_config())?;
    let s = settings(cfg, cfg.epochs_unrefined, cfg.loss.clone(), cfg.seed);
    train(model, &data.train, &data.validation, Objective::CeOnly, &s)
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub outcome: TrainOutcome,
    /// Present for the exemplar loss.
    pub selection: Option<Selection>,
}

/// Refines `model` with the configured explanation loss. Exemplars come
/// from the training split.
pub fn refine(cfg: &RunConfig, model: Classifier, data: &DatasetSplit) -> Result<Refinement> {
    refine_inner(cfg, model, data, None)
}

/// With `persist`, the exemplar pair is saved there before training and
/// checked unchanged on disk afterwards.
fn refine_inner(
    cfg: &RunConfig,
    mut model: Classifier,
    data: &DatasetSplit,
    persist: Option<&Path>,
) -> Result<Refinement> {
    model.set_frozen_layers(cfg.model.frozen_layers)?;
    let s = settings(cfg, cfg.epochs_refine, cfg.loss.clone(), cfg.seed.wrapping_add(1));
    match cfg.loss_mode {
        LossMode::CeOnly => Err(XblError::Config(
            "refinement needs loss_mode = exbl or rrr".into(),
        )),
        LossMode::Rrr => Ok(Refinement {
            outcome: train(model, &data.train, &data.validation, Objective::Rrr, &s)?,
            selection: None,
        }),
        LossMode::Exbl => {
            let sel = select_exemplars(&model, &data.train, cfg.exemplar_policy, cfg.tau)?;
            let before = match persist {
                Some(dir) => {
                    save_selection(dir, &sel)?;
                    Some(pair_hash(&load_pair(dir)?))
                }
                None => None,
            };
            let outcome = train(model, &data.train, &data.validation, Objective::Exbl(&sel.pair), &s)?;
            if let (Some(dir), Some(before)) = (persist, before) {
                let after = pair_hash(&load_pair(dir)?);
                if before != after || before != pair_hash(&sel.pair) {
                    return Err(XblError::Contract("exemplar pair changed during refinement".into()));
                }
            }
            Ok(Refinement {
                outcome,
                selection: Some(sel),
            })
        }
    }
}

/// Accuracy and activation precision for every nonempty split. Splits
/// without relevance masks report no activation precision.
pub fn evaluate_model(
    model: &Classifier,
    data: &DatasetSplit,
    tau: f64,
    run_id: &str,
    config_hash: &str,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for split in SplitName::ALL {
        let images = data.split(split);
        if images.is_empty() {
            continue;
        }
        let ap = if images.iter().all(|im| im.relevance_mask.is_some()) {
            Some(dataset_ap(model, images, tau)?)
        } else {
            None
        };
        rows.push(MetricsRow {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            split: split.to_string(),
            accuracy: accuracy(model, images)?,
            activation_precision: ap,
            tau,
            seed,
        });
    }
    Ok(rows)
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes the seeded dataset to the data directory. An existing nonempty
/// directory is replaced only with `force`.
pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<DatasetSplit> {
    let dir = cfg.data_dir();
    if is_nonempty_dir(&dir) {
        if !force {
            return Err(XblError::Dataset(format!(
                "{} exists and is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| XblError::io(&dir, e))?;
    }
    let data = generate_decoy_dataset(&cfg.decoy, cfg.seed)?;
    write_dataset(&dir, &data)?;
    Ok(data)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    load_image_dir(dir)
}

pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Classifier> {
    let mut model = build_classifier(&cfg.model_config())?;
    model.load_named_tensors(&checkpoint::load(path)?)?;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub run_id: String,
    pub checkpoint: PathBuf,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRow>,
    pub selection: Option<Selection>,
}

fn write_stage(cfg: &RunConfig, stage: &str, outcome: &TrainOutcome, data: &DatasetSplit) -> Result<StageReport> {
    let id = run_id(cfg, stage);
    let hash = cfg.hash();
    let ckpt = checkpoint_path(cfg, stage);
    write_atomic(&ckpt, &outcome.model.checkpoint_bytes())?;
    write_atomic(
        cfg.output_dir.join(format!("{stage}_epochs.csv")),
        epochs_csv(&id, &hash, &outcome.history).as_bytes(),
    )?;
    let metrics = evaluate_model(&outcome.model, data, cfg.tau, &id, &hash, cfg.seed)?;
    write_atomic(
        cfg.output_dir.join(format!("{stage}_metrics.csv")),
        metrics_csv(&metrics).as_bytes(),
    )?;
    Ok(StageReport {
        run_id: id,
        checkpoint: ckpt,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        metrics,
        selection: None,
    })
}

fn require_dataset(cfg: &RunConfig) -> Result<DatasetSplit> {
    let dir = cfg.data_dir();
    if !dir.is_dir() {
        return Err(XblError::Dataset(format!(
            "no dataset at {}; run `xbl generate` first",
            dir.display()
        )));
    }
    let data = load_dataset(&dir)?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(XblError::Dataset(format!(
            "{} needs nonempty train and validation splits",
            dir.display()
        )));
    }
    Ok(data)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<StageReport> {
    let data = require_dataset(cfg)?;
    let outcome = train_unrefined(cfg, &data)?;
    write_stage(cfg, UNREFINED, &outcome, &data)
}

/// Refines the checkpoint (default: the unrefined one of this run). For
/// the exemplar loss the pair is saved under `exemplars/` first and
/// checked unchanged on disk afterwards.
pub fn cmd_refine(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<StageReport> {
    if cfg.loss_mode == LossMode::CeOnly {
        return Err(XblError::Config("refinement needs loss_mode = exbl or rrr".into()));
    }
    let data = require_dataset(cfg)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(cfg, UNREFINED));
    let model = load_model(cfg, &ckpt)?;
    let Refinement { outcome, selection } = refine_inner(cfg, model, &data, Some(&exemplar_dir(cfg)))?;
    let mut report = write_stage(cfg, REFINED, &outcome, &data)?;
    report.selection = selection;
    Ok(report)
}

/// Metrics of `checkpoint` on the dataset at `dataset_dir`, written to
/// `evaluation_<checkpoint stem>.csv` in the output directory.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    tau: f64,
) -> Result<(Vec<MetricsRow>, PathBuf)> {
    let model = load_model(cfg, checkpoint)?;
    let data = load_dataset(dataset_dir)?;
    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let rows = evaluate_model(&model, &data, tau, &run_id(cfg, &stem), &cfg.hash(), cfg.seed)?;
    let out = cfg.output_dir.join(format!("evaluation_{stem}.csv"));
    write_atomic(&out, metrics_csv(&rows).as_bytes())?;
    Ok((rows, out))
}

/// Parses `<split>:<index>`.
pub fn parse_image_id(id: &str) -> Result<(SplitName, usize)> {
    let bad = || XblError::Lookup(format!("image id {id:?} is not <split>:<index>"));
    let (split, index) = id.split_once(':').ok_or_else(bad)?;
    let split: SplitName = split.parse().map_err(|_| bad())?;
    Ok((split, index.parse().map_err(|_| bad())?))
}

/// Writes `<split>_<index>_panel.pgm` (input | heatmap | overlay) and
/// `<split>_<index>_heatmap.pgm` with its `.meta` sidecar for each id.
pub fn cmd_explain(cfg: &RunConfig, checkpoint: &Path, ids: &[String], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg, checkpoint)?;
    let data = load_dataset(&cfg.data_dir())?;
    let targets = ids
        .iter()
        .map(|id| {
            let (split, index) = parse_image_id(id)?;
            let images = data.split(split);
            images.get(index).map(|im| (split, index, im)).ok_or_else(|| {
                XblError::Lookup(format!("{id}: {split} holds {} images", images.len()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut written = Vec::new();
    for (split, index, im) in targets {
        let h = gradcam(&model, im, None)?;
        let panel = out_dir.join(format!("{split}_{index}_panel.pgm"));
        write_pgm(&overlay_triptych(im, &h)?, &panel)?;
        h.save(out_dir.join(format!("{split}_{index}_heatmap.pgm")))?;
        written.push(panel);
    }
    Ok(written)
}
