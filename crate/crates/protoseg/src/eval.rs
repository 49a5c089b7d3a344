//! Evaluation: IoU scoring, episode evaluation at image resolution, the
//! two-fold unseen-class protocol, support-quality sweeps, and feature
//! dumps for offline inspection.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    downsample_mask, two_fold_split, Dataset, LabelMask, QuerySample, QuerySet,
    SupportSample, SupportSet, IGNORE_LABEL,
};
use crate::encoder::{encode, Backbone, ToyEncoder};
use crate::error::Error;
use crate::finetune::{finetune, FineTuneConfig};
use crate::prototype::{
    generate_prototypes, predict_query, split_class_features_multi, PredictedMask,
};
use crate::scalar::{mix_seed, Real};
use crate::support_selection::{embed_all, select_support};

/// Intersection-over-union of `class` between two label masks. Pixels
/// marked ignore in `gt` are excluded from both sides. An empty union
/// (class absent from both) scores 1.
pub fn iou(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64, Error> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::invalid_input(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    if class == IGNORE_LABEL {
        return Err(Error::invalid_input("cannot score the ignore label"));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        if g == IGNORE_LABEL {
            continue;
        }
        let in_p = p == class;
        let in_g = g == class;
        if in_p && in_g {
            inter += 1;
        }
        if in_p || in_g {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Per-query scores of one evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    /// Mean over foreground classes.
    pub iou: f64,
    /// One entry per foreground class, in class order 1..=n.
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    /// Mean of the per-image foreground IoUs.
    pub mean_iou: f64,
    pub n_images: usize,
    pub n_classes: usize,
}

/// Replicates each feature-resolution label over its stride-sized pixel
/// block to recover an image-resolution mask.
fn upsample_labels(pred: &PredictedMask, stride: usize, dims: (usize, usize)) -> LabelMask {
    let (h, w) = dims;
    let labels =
        ndarray::Array2::from_shape_fn((h, w), |(i, j)| pred.labels[[i / stride, j / stride]]);
    LabelMask { data: labels }
}

fn score_episode<T: Real>(
    encoder: &ToyEncoder<T>,
    support: &SupportSet,
    query: &QuerySet,
    n_classes: usize,
    cfg: &FineTuneConfig,
    keep_masks: bool,
) -> Result<(EvalReport, Vec<(String, LabelMask)>), Error> {
    if support.samples.is_empty() {
        return Err(Error::invalid_input("support set is empty"));
    }
    if query.samples.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if n_classes == 0 {
        return Err(Error::invalid_input("need at least one foreground class"));
    }
    let stride = encoder.downsample();
    let alpha = T::from_f64(cfg.softmax_scale);

    // Prototypes are built once from the labeled supports and reused for
    // every query.
    let mut pairs = Vec::new();
    for s in &support.samples {
        let fmap = encode(encoder, &s.image)?;
        let (h, w, _) = s.image.dims();
        let down = downsample_mask(&s.mask, (h.div_ceil(stride), w.div_ceil(stride)))?;
        pairs.push((fmap, down));
    }
    let pair_refs: Vec<(&crate::encoder::FeatureMap<T>, &LabelMask)> =
        pairs.iter().map(|(f, m)| (f, m)).collect();
    let sets = split_class_features_multi(&pair_refs, n_classes)?;
    let protos = generate_prototypes(
        &sets,
        cfg.clusters,
        T::from_f64(cfg.holistic_blend),
        mix_seed(cfg.seed, 0xE7A1),
    )?;

    let mut per_image = Vec::with_capacity(query.samples.len());
    let mut masks = Vec::new();
    for q in &query.samples {
        let fmap = encode(encoder, &q.image)?;
        let (_, predicted) = predict_query(&fmap, &protos, alpha)?;
        let (h, w, _) = q.image.dims();
        let full = upsample_labels(&predicted, stride, (h, w));
        let gt = q.mask.read();
        let mut per_class = Vec::with_capacity(n_classes);
        for class in 1..=n_classes {
            per_class.push(iou(&full, gt, class as u8)?);
        }
        let mean = per_class.iter().sum::<f64>() / n_classes as f64;
        per_image.push(ImageScore { id: q.id.clone(), iou: mean, per_class });
        if keep_masks {
            masks.push((q.id.clone(), full));
        }
    }
    let mean_iou = per_image.iter().map(|s| s.iou).sum::<f64>() / per_image.len() as f64;
    Ok((
        EvalReport { per_image, mean_iou, n_images: query.samples.len(), n_classes },
        masks,
    ))
}

/// Scores every query against prototypes built from the supports. The
/// encoder is not modified; predictions are upsampled to image resolution
/// before scoring against the ground truth.
pub fn evaluate<T: Real>(
    encoder: &ToyEncoder<T>,
    support: &SupportSet,
    query: &QuerySet,
    n_classes: usize,
    cfg: &FineTuneConfig,
) -> Result<EvalReport, Error> {
    score_episode(encoder, support, query, n_classes, cfg, false).map(|(r, _)| r)
}

/// Like [`evaluate`], additionally returning the image-resolution predicted
/// mask of every query.
pub fn evaluate_with_masks<T: Real>(
    encoder: &ToyEncoder<T>,
    support: &SupportSet,
    query: &QuerySet,
    n_classes: usize,
    cfg: &FineTuneConfig,
) -> Result<(EvalReport, Vec<(String, LabelMask)>), Error> {
    score_episode(encoder, support, query, n_classes, cfg, true)
}

fn subset_support(ds: &Dataset, ids: &[String]) -> Result<SupportSet, Error> {
    let samples = ids
        .iter()
        .map(|id| {
            let s = ds.get(id).ok_or_else(|| Error::UnknownId { id: id.clone() })?;
            Ok(SupportSample { id: s.id.clone(), image: s.image.clone(), mask: s.mask.clone() })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(SupportSet { samples })
}

fn subset_queries(ds: &Dataset, exclude: &[String]) -> Result<QuerySet, Error> {
    let samples: Vec<QuerySample> = ds
        .samples
        .iter()
        .filter(|s| !exclude.contains(&s.id))
        .map(|s| QuerySample {
            id: s.id.clone(),
            image: s.image.clone(),
            mask: crate::data::GuardedMask::new(s.mask.clone()),
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    Ok(QuerySet { samples })
}

/// One fold of the two-fold protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub support_ids: Vec<String>,
    /// IoU on the support fold's remaining images.
    pub seen_iou: f64,
    /// IoU on the held-out fold.
    pub unseen_iou: f64,
    pub n_seen_queries: usize,
    pub n_unseen_queries: usize,
    pub aborted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnseenReport {
    pub strategy: String,
    pub folds: Vec<FoldOutcome>,
    pub mean_seen: f64,
    pub mean_unseen: f64,
}

/// Two-fold generalization protocol: the dataset is split in half; per
/// fold, `k` supports are selected inside it, the encoder is tuned with the
/// configured strategy on that fold, then scored both on the fold's own
/// remaining images (seen) and on the untouched other fold (unseen).
pub fn eval_unseen<T: Real>(
    encoder: &ToyEncoder<T>,
    dataset: &Dataset,
    k: usize,
    cfg: &FineTuneConfig,
) -> Result<UnseenReport, Error> {
    if dataset.len() < 4 {
        return Err(Error::invalid_input("two-fold protocol needs at least four images"));
    }
    let (fold_a, fold_b) = two_fold_split(dataset, cfg.seed)?;
    let mut folds = Vec::with_capacity(2);
    for (idx, (tune_on, held_out)) in [(&fold_a, &fold_b), (&fold_b, &fold_a)].iter().enumerate() {
        let table = embed_all(encoder, tune_on)?;
        let ids = select_support(&table, k, cfg.seed)?;
        let episode = crate::data::make_episodes(tune_on, &ids)?;
        let result = finetune(encoder, &episode, cfg)?;
        let seen = evaluate(
            &result.encoder,
            &episode.support,
            &episode.query,
            episode.n_classes,
            cfg,
        )?;
        let unseen_queries = subset_queries(held_out, &[])?;
        let unseen = evaluate(
            &result.encoder,
            &episode.support,
            &unseen_queries,
            episode.n_classes,
            cfg,
        )?;
        folds.push(FoldOutcome {
            fold: idx,
            support_ids: ids,
            seen_iou: seen.mean_iou,
            unseen_iou: unseen.mean_iou,
            n_seen_queries: seen.n_images,
            n_unseen_queries: unseen.n_images,
            aborted: result.aborted.is_some(),
        });
    }
    let mean_seen = folds.iter().map(|f| f.seen_iou).sum::<f64>() / folds.len() as f64;
    let mean_unseen = folds.iter().map(|f| f.unseen_iou).sum::<f64>() / folds.len() as f64;
    Ok(UnseenReport {
        strategy: cfg.strategy.to_string(),
        folds,
        mean_seen,
        mean_unseen,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportScore {
    pub id: String,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub per_support: Vec<SupportScore>,
    pub min_iou: f64,
    pub max_iou: f64,
    pub avg_iou: f64,
    /// The id the embedding-based selector would pick for a 1-shot episode,
    /// and its sweep score.
    pub rep_id: String,
    pub rep_iou: f64,
}

/// Uses each image in turn as a 1-shot support (no fine-tuning) and scores
/// the remaining images, measuring how much support choice alone moves the
/// result.
pub fn sweep_support<T: Real>(
    encoder: &ToyEncoder<T>,
    dataset: &Dataset,
    cfg: &FineTuneConfig,
) -> Result<SweepReport, Error> {
    if dataset.len() < 3 {
        return Err(Error::invalid_input("support sweep needs at least three images"));
    }
    let mut per_support = Vec::with_capacity(dataset.len());
    for id in dataset.ids() {
        let support = subset_support(dataset, std::slice::from_ref(&id))?;
        let query = subset_queries(dataset, std::slice::from_ref(&id))?;
        let report = evaluate(encoder, &support, &query, dataset.n_classes, cfg)?;
        per_support.push(SupportScore { id, mean_iou: report.mean_iou });
    }
    let min_iou = per_support.iter().map(|s| s.mean_iou).fold(f64::INFINITY, f64::min);
    let max_iou = per_support.iter().map(|s| s.mean_iou).fold(f64::NEG_INFINITY, f64::max);
    let avg_iou =
        per_support.iter().map(|s| s.mean_iou).sum::<f64>() / per_support.len() as f64;
    let table = embed_all(encoder, dataset)?;
    let rep_id = select_support(&table, 1, cfg.seed)?.remove(0);
    let rep_iou = per_support
        .iter()
        .find(|s| s.id == rep_id)
        .map(|s| s.mean_iou)
        .expect("selected id comes from the dataset");
    Ok(SweepReport { per_support, min_iou, max_iou, avg_iou, rep_id, rep_iou })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub support_ids: Vec<String>,
    pub mean_iou: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub mean_random: f64,
    pub best_random: f64,
    pub selected_iou: f64,
}

/// Compares fine-tuning outcomes across randomly drawn k-shot supports
/// (one row per seed) against the embedding-selected support (final row).
pub fn random_support_study<T: Real>(
    encoder: &ToyEncoder<T>,
    dataset: &Dataset,
    k: usize,
    seeds: &[u64],
    cfg: &FineTuneConfig,
) -> Result<StudyReport, Error> {
    if k == 0 || k >= dataset.len() {
        return Err(Error::invalid_input(
            "k must be >= 1 and leave at least one query image",
        ));
    }
    if seeds.is_empty() {
        return Err(Error::invalid_input("need at least one seed"));
    }
    let run = |ids: &[String], label: String, seed: u64| -> Result<StudyRow, Error> {
        let episode = crate::data::make_episodes(dataset, ids)?;
        let mut row_cfg = cfg.clone();
        row_cfg.seed = seed;
        let result = finetune(encoder, &episode, &row_cfg)?;
        let report = evaluate(
            &result.encoder,
            &episode.support,
            &episode.query,
            episode.n_classes,
            &row_cfg,
        )?;
        Ok(StudyRow {
            label,
            support_ids: ids.to_vec(),
            mean_iou: report.mean_iou,
            aborted: result.aborted.is_some(),
        })
    };

    let all_ids = dataset.ids();
    let mut rows = Vec::with_capacity(seeds.len() + 1);
    for &seed in seeds {
        let mut pool = all_ids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5A3D));
        pool.shuffle(&mut rng);
        let mut ids: Vec<String> = pool.into_iter().take(k).collect();
        ids.sort();
        rows.push(run(&ids, format!("random-{seed}"), seed)?);
    }
    let table = embed_all(encoder, dataset)?;
    let selected = select_support(&table, k, cfg.seed)?;
    rows.push(run(&selected, "selected".to_string(), cfg.seed)?);

    let random = &rows[..rows.len() - 1];
    let mean_random = random.iter().map(|r| r.mean_iou).sum::<f64>() / random.len() as f64;
    let best_random = random.iter().map(|r| r.mean_iou).fold(f64::NEG_INFINITY, f64::max);
    let selected_iou = rows.last().unwrap().mean_iou;
    Ok(StudyReport { rows, mean_random, best_random, selected_iou })
}

/// One feature-resolution pixel of a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub row: usize,
    pub col: usize,
    pub label: u8,
    pub feature: Vec<f64>,
}

/// Writes every sample's feature-resolution pixels as JSON lines (one
/// record per pixel, labels from the downsampled mask). Returns the record
/// count.
pub fn dump_features<T: Real>(
    encoder: &ToyEncoder<T>,
    dataset: &Dataset,
    path: &Path,
) -> Result<usize, Error> {
    let stride = encoder.downsample();
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let mut count = 0usize;
    for sample in &dataset.samples {
        let fmap = encode(encoder, &sample.image)?;
        let (h, w, _) = sample.image.dims();
        let down = downsample_mask(&sample.mask, (h.div_ceil(stride), w.div_ceil(stride)))?;
        let (fh, fw, _) = fmap.dims();
        for i in 0..fh {
            for j in 0..fw {
                let rec = FeatureRecord {
                    id: sample.id.clone(),
                    row: i,
                    col: j,
                    label: down.data[[i, j]],
                    feature: fmap.data.slice(ndarray::s![i, j, ..])
                        .iter()
                        .map(|&v| v.to_f64())
                        .collect(),
                };
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
                count += 1;
            }
        }
    }
    f.flush().map_err(|e| Error::io(path, e))?;
    Ok(count)
}

pub fn load_feature_dump(path: &Path) -> Result<Vec<FeatureRecord>, Error> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
