//! Choosing the good and bad exemplar explanations.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::{self, NamedTensor};
use crate::data::pgm::write_pgm;
use crate::data::{Grid, LabeledImage};
use crate::error::{Result, XblError};
use crate::io::{read_file, sha256_hex, write_atomic};
use crate::losses::ExemplarPair;
use crate::metrics::{activation_precision, heatmaps};
use crate::model::Classifier;
use crate::saliency::{explanation_product, gradcam};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExemplarPolicy {
    /// Highest and lowest activation precision.
    Auto,
    Manual { good: usize, bad: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub pair: ExemplarPair,
    pub good_class: usize,
    pub bad_class: usize,
    /// Activation precision of each exemplar, when its image has a mask.
    pub good_ap: Option<f64>,
    pub bad_ap: Option<f64>,
    pub tau: f64,
    pub model_checksum: String,
}

/// Instance ids sorted by activation precision, best first; ties go to the
/// lower id.
pub fn rank_explanations(model: &Classifier, data: &[LabeledImage], tau: f64) -> Result<Vec<(usize, f64)>> {
    let missing: Vec<usize> = data
        .iter()
        .enumerate()
        .filter(|(_, im)| im.relevance_mask.is_none())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(XblError::Contract(format!("relevance mask missing for instances {missing:?}")));
    }
    let maps = heatmaps(model, data)?;
    let mut ranked = data
        .iter()
        .zip(&maps)
        .enumerate()
        .map(|(i, (im, h))| {
            let m = im.relevance_mask.as_ref().expect("checked above");
            Ok((i, activation_precision(h, m, tau)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

fn product_of(model: &Classifier, im: &LabeledImage) -> Result<crate::Tensor<f32>> {
    explanation_product(im, &gradcam(model, im, None)?)
}

/// Builds the exemplar pair from `data` (the training split).
pub fn select_exemplars(
    model: &Classifier,
    data: &[LabeledImage],
    policy: ExemplarPolicy,
    tau: f64,
) -> Result<Selection> {
    let (good, bad) = match policy {
        ExemplarPolicy::Auto => {
            if data.len() < 2 {
                return Err(XblError::Selection(format!(
                    "automatic selection needs at least 2 instances, got {}",
                    data.len()
                )));
            }
            let ranked = rank_explanations(model, data, tau)?;
            (ranked[0].0, ranked[ranked.len() - 1].0)
        }
        ExemplarPolicy::Manual { good, bad } => {
            if good == bad {
                return Err(XblError::Selection(format!("good and bad exemplar are both instance {good}")));
            }
            for id in [good, bad] {
                if id >= data.len() {
                    return Err(XblError::Selection(format!(
                        "exemplar id {id} is not in the training split ({} instances)",
                        data.len()
                    )));
                }
            }
            (good, bad)
        }
    };
    let c_good = product_of(model, &data[good])?;
    let c_bad = product_of(model, &data[bad])?;
    let ap = |id: usize| -> Result<Option<f64>> {
        let im = &data[id];
        match &im.relevance_mask {
            Some(m) => Ok(Some(activation_precision(&gradcam(model, im, None)?, m, tau)?)),
            None => Ok(None),
        }
    };
    Ok(Selection {
        pair: ExemplarPair {
            c_good,
            c_bad,
            good_source_id: good,
            bad_source_id: bad,
        },
        good_class: data[good].label,
        bad_class: data[bad].label,
        good_ap: ap(good)?,
        bad_ap: ap(bad)?,
        tau,
        model_checksum: model.checksum(),
    })
}

fn pair_tensors(pair: &ExemplarPair) -> Vec<NamedTensor> {
    vec![
        NamedTensor::new("c_good", pair.c_good.clone()),
        NamedTensor::new("c_bad", pair.c_bad.clone()),
    ]
}

/// SHA-256 over both products and source ids.
pub fn pair_hash(pair: &ExemplarPair) -> String {
    let mut bytes = checkpoint::encode(&pair_tensors(pair));
    bytes.extend_from_slice(format!("{} {}", pair.good_source_id, pair.bad_source_id).as_bytes());
    sha256_hex(&bytes)
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "none".into())
}

pub fn manifest_text(sel: &Selection) -> String {
    format!(
        "good_id={}\nbad_id={}\ngood_class={}\nbad_class={}\ngood_ap={}\nbad_ap={}\ntau={}\nmodel_checksum={}\npair_hash={}\n",
        sel.pair.good_source_id,
        sel.pair.bad_source_id,
        sel.good_class,
        sel.bad_class,
        fmt_ap(sel.good_ap),
        fmt_ap(sel.bad_ap),
        sel.tau,
        sel.model_checksum,
        pair_hash(&sel.pair),
    )
}

fn product_grid(t: &crate::Tensor<f32>) -> Result<Grid<f32>> {
    let s = t.shape();
    Grid::new(s[s.len() - 2], s[s.len() - 1], t.data().to_vec())
}

/// Writes `good.pgm`, `bad.pgm`, `exemplars.xblw` and `exemplars.txt`
/// into `dir`.
pub fn save_selection(dir: impl AsRef<Path>, sel: &Selection) -> Result<()> {
    let dir = dir.as_ref();
    write_pgm(&product_grid(&sel.pair.c_good)?, dir.join("good.pgm"))?;
    write_pgm(&product_grid(&sel.pair.c_bad)?, dir.join("bad.pgm"))?;
    checkpoint::save(dir.join("exemplars.xblw"), &pair_tensors(&sel.pair))?;
    write_atomic(dir.join("exemplars.txt"), manifest_text(sel).as_bytes())
}

/// Reloads the pair written by [`save_selection`]; the products come back
/// bit-identical.
pub fn load_pair(dir: impl AsRef<Path>) -> Result<ExemplarPair> {
    let dir = dir.as_ref();
    let text_path = dir.join("exemplars.txt");
    let text = String::from_utf8(read_file(&text_path)?)
        .map_err(|_| XblError::Parse { offset: 0, msg: format!("{} is not UTF-8", text_path.display()) })?;
    let fields: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let id = |key: &str| -> Result<usize> {
        fields
            .get(key)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| XblError::Parse {
                offset: 0,
                msg: format!("{}: missing or invalid {key}", text_path.display()),
            })
    };
    let mut tensors = checkpoint::load(dir.join("exemplars.xblw"))?;
    let take = |name: &str, ts: &mut Vec<NamedTensor>| -> Result<crate::Tensor<f32>> {
        let i = ts
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| XblError::Lookup(format!("exemplar tensor {name}")))?;
        Ok(ts.remove(i).tensor)
    };
    let pair = ExemplarPair {
        c_good: take("c_good", &mut tensors)?,
        c_bad: take("c_bad", &mut tensors)?,
        good_source_id: id("good_id")?,
        bad_source_id: id("bad_id")?,
    };
    pair.validate()?;
    Ok(pair)
}
