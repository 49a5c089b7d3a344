//! Class-wise feature sets, k-means prototype decomposition, and
//! cosine-similarity prediction.
//!
//! A class's prototypes are its k-means cluster centers, each blended with a
//! scaled holistic (class-mean) term. Prediction scores a pixel against every
//! class by the best cosine similarity over that class's prototypes and
//! softmaxes the scaled scores into per-pixel probabilities.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabelMask, IGNORE_LABEL};
use crate::encoder::FeatureMap;
use crate::error::Error;
use crate::scalar::{mix_seed, Real};

/// Per-class pools of feature vectors (classes 0..=n, 0 = background).
#[derive(Debug, Clone)]
pub struct ClassFeatureSets<T: Real> {
    pub classes: Vec<Vec<Array1<T>>>,
}

impl<T: Real> ClassFeatureSets<T> {
    /// Foreground class count n (classes occupy 0..=n).
    pub fn n(&self) -> usize {
        self.classes.len().saturating_sub(1)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.len()).collect()
    }
}

/// Per-class prototype matrices, shape (clusters, dim). `None` marks a class
/// with no features to build from (possible for pseudo-prototypes).
#[derive(Debug, Clone)]
pub struct PrototypeSet<T: Real> {
    pub protos: Vec<Option<Array2<T>>>,
    pub clusters: usize,
}

impl<T: Real> PrototypeSet<T> {
    pub fn n(&self) -> usize {
        self.protos.len().saturating_sub(1)
    }

    pub fn dim(&self) -> Option<usize> {
        self.protos.iter().flatten().next().map(|p| p.shape()[1])
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.protos.len() == other.protos.len()
            && self.protos.iter().zip(&other.protos).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(x), Some(y)) => {
                    x.shape() == y.shape()
                        && x.iter()
                            .zip(y.iter())
                            .all(|(&u, &v)| u.to_f64().to_bits() == v.to_f64().to_bits())
                }
                _ => false,
            })
    }
}

/// Per-pixel class probabilities, shape (h, w, n+1).
#[derive(Debug, Clone)]
pub struct ProbabilityMap<T: Real> {
    pub probs: Array3<T>,
}

impl<T: Real> ProbabilityMap<T> {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.probs.shape();
        (s[0], s[1], s[2])
    }

    /// Largest deviation of any pixel's probability sum from 1.
    pub fn max_sum_deviation(&self) -> f64 {
        let (h, w, _) = self.dims();
        let mut worst = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let s: f64 =
                    self.probs.slice(ndarray::s![i, j, ..]).iter().map(|&v| v.to_f64()).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Per-pixel argmax labels in [0, n].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictedMask {
    pub labels: Array2<u8>,
}

impl PredictedMask {
    pub fn dims(&self) -> (usize, usize) {
        (self.labels.shape()[0], self.labels.shape()[1])
    }

    pub fn to_label_mask(&self) -> LabelMask {
        LabelMask::new(self.labels.clone()).expect("non-empty labels")
    }
}

/// Result of one k-means run.
#[derive(Debug, Clone)]
pub struct KmeansOutcome<T: Real> {
    /// (c, dim); when fewer distinct points than c exist, trailing centers
    /// replicate the last real one.
    pub centers: Array2<T>,
    /// Per input point, index of its center (always < `effective_c`).
    pub assignments: Vec<usize>,
    /// Lloyd iterations executed.
    pub iterations: usize,
    /// Number of genuinely distinct centers.
    pub effective_c: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_trace: Vec<f64>,
}

fn bit_key<T: Real>(v: ArrayView1<T>) -> Vec<u64> {
    v.iter().map(|&x| x.to_f64().to_bits()).collect()
}

fn sq_dist<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum()
}

/// Sum over points of squared distance to their assigned center.
pub fn wcss<T: Real>(features: &[Array1<T>], centers: &Array2<T>, assignments: &[usize]) -> f64 {
    features
        .iter()
        .zip(assignments)
        .map(|(f, &a)| sq_dist(f.view(), centers.row(a)))
        .sum()
}

/// Lloyd's algorithm with distance-squared-weighted seeding from a seeded
/// RNG. Deterministic given the seed. With fewer distinct points than `c`,
/// the effective cluster count shrinks and the last center is replicated to
/// keep the output shape.
pub fn kmeans<T: Real>(
    features: &[Array1<T>],
    c: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KmeansOutcome<T>, Error> {
    if features.is_empty() {
        return Err(Error::invalid_input("k-means needs at least one point"));
    }
    if c == 0 {
        return Err(Error::invalid_input("k-means needs c >= 1"));
    }
    let dim = features[0].len();
    for f in features {
        if f.len() != dim {
            return Err(Error::invalid_input("k-means points must share one dimension"));
        }
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid_input("k-means points must be finite"));
        }
    }
    let mut distinct: HashMap<Vec<u64>, usize> = HashMap::new();
    for f in features {
        let key = bit_key(f.view());
        let next = distinct.len();
        distinct.entry(key).or_insert(next);
    }
    let effective_c = c.min(distinct.len());
    if effective_c < c {
        log::warn!(
            "k-means: only {} distinct points for c={c}; reducing and replicating the last center",
            distinct.len()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Array1<T>> = Vec::with_capacity(effective_c);
    centers.push(features[rng.random_range(0..features.len())].clone());
    while centers.len() < effective_c {
        let d2: Vec<f64> = features
            .iter()
            .map(|f| {
                centers
                    .iter()
                    .map(|ctr| sq_dist(f.view(), ctr.view()))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total > 0.0 {
            let dist = rand::distr::weighted::WeightedIndex::new(&d2)
                .map_err(|e| Error::invalid_input(format!("k-means seeding: {e}")))?;
            use rand_distr::Distribution;
            centers.push(features[dist.sample(&mut rng)].clone());
        } else {
            // All remaining mass sits on chosen centers; grab the first point
            // not yet chosen (deterministic fallback).
            let chosen: Vec<Vec<u64>> = centers.iter().map(|c| bit_key(c.view())).collect();
            let fresh = features
                .iter()
                .find(|f| !chosen.contains(&bit_key(f.view())))
                .expect("effective_c <= distinct point count");
            centers.push(fresh.clone());
        }
    }

    let mut assignments = vec![0usize; features.len()];
    let mut wcss_trace = Vec::new();
    let mut iterations = 0usize;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        // Assign: nearest center, ties to the lowest index.
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, ctr) in centers.iter().enumerate() {
                let d = sq_dist(f.view(), ctr.view());
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        let centers_mat = stack_centers(&centers);
        wcss_trace.push(wcss(features, &centers_mat, &assignments));
        if !changed && iterations > 1 {
            break;
        }
        // Update: arithmetic mean per occupied cluster.
        let mut sums: Vec<Array1<T>> = vec![Array1::zeros(dim); centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (f, &a) in features.iter().zip(&assignments) {
            sums[a] = &sums[a] + f;
            counts[a] += 1;
        }
        for k in 0..centers.len() {
            if counts[k] > 0 {
                centers[k] = sums[k].mapv(|v| v / T::from_f64(counts[k] as f64));
            }
        }
        // Repair: reseat empty clusters at the point farthest from its
        // assigned center (lowest index on ties).
        for k in 0..centers.len() {
            if counts[k] == 0 {
                let mut far_i = 0usize;
                let mut far_d = -1.0f64;
                for (i, f) in features.iter().enumerate() {
                    let d = sq_dist(f.view(), centers[assignments[i]].view());
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                centers[k] = features[far_i].clone();
                assignments[far_i] = k;
                counts[k] = 1;
            }
        }
    }

    let mut all = centers;
    while all.len() < c {
        all.push(all[all.len() - 1].clone());
    }
    Ok(KmeansOutcome {
        centers: stack_centers(&all),
        assignments,
        iterations,
        effective_c,
        wcss_trace,
    })
}

fn stack_centers<T: Real>(centers: &[Array1<T>]) -> Array2<T> {
    let dim = centers[0].len();
    let mut out = Array2::zeros((centers.len(), dim));
    for (k, c) in centers.iter().enumerate() {
        out.row_mut(k).assign(c);
    }
    out
}

/// Pools each pixel's feature vector into the set of its mask label; ignore
/// pixels are dropped. Mask labels must lie in [0, n].
pub fn split_class_features<T: Real>(
    fmap: &FeatureMap<T>,
    mask: &LabelMask,
    n: usize,
) -> Result<ClassFeatureSets<T>, Error> {
    split_class_features_multi(&[(fmap, mask)], n)
}

/// k-shot pooling: concatenates per-class sets across (feature map, mask)
/// pairs in order.
pub fn split_class_features_multi<T: Real>(
    items: &[(&FeatureMap<T>, &LabelMask)],
    n: usize,
) -> Result<ClassFeatureSets<T>, Error> {
    let mut classes: Vec<Vec<Array1<T>>> = vec![Vec::new(); n + 1];
    for (fmap, mask) in items {
        let (h, w, _) = fmap.dims();
        if mask.dims() != (h, w) {
            return Err(Error::invalid_input("mask is not at feature resolution"));
        }
        for i in 0..h {
            for j in 0..w {
                let l = mask.data[[i, j]];
                if l == IGNORE_LABEL {
                    continue;
                }
                if l as usize > n {
                    return Err(Error::invalid_input(format!(
                        "mask label {l} exceeds class count {n}"
                    )));
                }
                classes[l as usize].push(fmap.data.slice(ndarray::s![i, j, ..]).to_owned());
            }
        }
    }
    Ok(ClassFeatureSets { classes })
}

/// Deduplicated view of one class pool: representative vectors in first-
/// occurrence order with multiplicities. Clustering and averaging run on this
/// view, which makes prototypes exactly invariant under duplicated shots.
struct DedupView<T: Real> {
    reps: Vec<Array1<T>>,
    counts: Vec<usize>,
    /// Index of each representative in the original pool.
    rep_origin: Vec<usize>,
}

fn dedup_class<T: Real>(vectors: &[Array1<T>]) -> DedupView<T> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut reps = Vec::new();
    let mut counts = Vec::new();
    let mut rep_origin = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        let key = bit_key(v.view());
        match index.get(&key) {
            Some(&slot) => counts[slot] += 1,
            None => {
                index.insert(key, reps.len());
                reps.push(v.clone());
                counts.push(1);
                rep_origin.push(i);
            }
        }
    }
    DedupView { reps, counts, rep_origin }
}

fn class_prototypes<T: Real>(
    vectors: &[Array1<T>],
    c: usize,
    lambda: T,
    seed: u64,
) -> Result<Array2<T>, Error> {
    let dd = dedup_class(vectors);
    let outcome = kmeans(&dd.reps, c, seed, 100)?;
    let dim = dd.reps[0].len();
    let total: usize = dd.counts.iter().sum();
    let mut holistic = Array1::<T>::zeros(dim);
    for (rep, &count) in dd.reps.iter().zip(&dd.counts) {
        let w = T::from_f64(count as f64 / total as f64);
        holistic = holistic + rep.mapv(|v| v * w);
    }
    let mut out = outcome.centers;
    for mut row in out.rows_mut() {
        ndarray::Zip::from(&mut row).and(&holistic).for_each(|r, &h| *r = *r + lambda * h);
    }
    Ok(out)
}

/// Builds per-class prototypes: k-means centers plus `lambda` times the class
/// mean. Every class must have at least one feature vector.
pub fn generate_prototypes<T: Real>(
    sets: &ClassFeatureSets<T>,
    c: usize,
    lambda: T,
    seed: u64,
) -> Result<PrototypeSet<T>, Error> {
    if lambda < T::zero() {
        return Err(Error::invalid_config("prototype blend weight must be >= 0"));
    }
    let mut protos = Vec::with_capacity(sets.classes.len());
    for (i, class) in sets.classes.iter().enumerate() {
        if class.is_empty() {
            return Err(Error::EmptyClass { class: i });
        }
        protos.push(Some(class_prototypes(class, c, lambda, mix_seed(seed, i as u64))?));
    }
    Ok(PrototypeSet { protos, clusters: c })
}

/// Like [`generate_prototypes`] but empty classes yield `None` (logged)
/// instead of failing; used for pseudo-prototypes, where a class can be
/// absent from the prediction.
pub fn generate_prototypes_partial<T: Real>(
    sets: &ClassFeatureSets<T>,
    c: usize,
    lambda: T,
    seed: u64,
) -> Result<PrototypeSet<T>, Error> {
    if lambda < T::zero() {
        return Err(Error::invalid_config("prototype blend weight must be >= 0"));
    }
    let mut protos = Vec::with_capacity(sets.classes.len());
    for (i, class) in sets.classes.iter().enumerate() {
        if class.is_empty() {
            log::debug!("class {i} absent; omitting its prototypes");
            protos.push(None);
        } else {
            protos.push(Some(class_prototypes(class, c, lambda, mix_seed(seed, i as u64))?));
        }
    }
    Ok(PrototypeSet { protos, clusters: c })
}

fn l2_norm<T: Real>(v: ArrayView1<T>) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Cosine similarity with the zero-norm convention: any zero-length side
/// scores 0.
pub(crate) fn cosine<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    a.dot(&b) / (na * nb)
}

/// Per-pixel class scores: best cosine over each class's prototypes.
fn class_scores<T: Real>(
    feature: ArrayView1<T>,
    protos: &[Array2<T>],
    zero_seen: &mut bool,
) -> Vec<T> {
    protos
        .iter()
        .map(|p| {
            let mut best = T::from_f64(-2.0);
            for row in p.rows() {
                let c = cosine(row, feature);
                if (l2_norm(row) == T::zero() || l2_norm(feature) == T::zero()) && !*zero_seen {
                    *zero_seen = true;
                    log::warn!("zero-norm vector in prediction; cosine taken as 0");
                }
                if c > best {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn softmax_in_place<T: Real>(scores: &mut [T]) {
    let mut maxv = scores[0];
    for &s in scores.iter() {
        if s > maxv {
            maxv = s;
        }
    }
    let mut sum = T::zero();
    for s in scores.iter_mut() {
        *s = (*s - maxv).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s = *s / sum;
    }
}

/// Scores every pixel against every class prototype set (best-cosine rule),
/// softmaxes `scale`-scaled scores into probabilities, and takes the
/// per-pixel argmax (ties to the lowest class index).
pub fn predict_query<T: Real>(
    fmap: &FeatureMap<T>,
    protos: &PrototypeSet<T>,
    scale: T,
) -> Result<(ProbabilityMap<T>, PredictedMask), Error> {
    let (h, w, d) = fmap.dims();
    let n = protos.n();
    if n == 0 && protos.protos.is_empty() {
        return Err(Error::invalid_input("prototype set is empty"));
    }
    if n + 1 > 255 {
        return Err(Error::invalid_input("more than 255 classes unsupported"));
    }
    let mut mats = Vec::with_capacity(n + 1);
    for (i, p) in protos.protos.iter().enumerate() {
        let p = p.as_ref().ok_or(Error::EmptyClass { class: i })?;
        if p.shape()[1] != d {
            return Err(Error::invalid_input(format!(
                "prototype dim {} does not match feature dim {d}",
                p.shape()[1]
            )));
        }
        mats.push(p.clone());
    }
    let mut probs = Array3::<T>::zeros((h, w, n + 1));
    let mut labels = Array2::<u8>::zeros((h, w));
    let mut zero_seen = false;
    for i in 0..h {
        for j in 0..w {
            let f = fmap.data.slice(ndarray::s![i, j, ..]);
            let mut scores = class_scores(f, &mats, &mut zero_seen);
            for s in scores.iter_mut() {
                *s = *s * scale;
            }
            softmax_in_place(&mut scores);
            let mut best = 0usize;
            for (k, &p) in scores.iter().enumerate() {
                if p > scores[best] {
                    best = k;
                }
            }
            labels[[i, j]] = best as u8;
            for (k, &p) in scores.iter().enumerate() {
                probs[[i, j, k]] = p;
            }
        }
    }
    Ok((ProbabilityMap { probs }, PredictedMask { labels }))
}

/// Pseudo-prototypes from a query's own predicted mask: split by the
/// prediction, then cluster. Classes absent from the prediction come back as
/// `None`.
pub fn query_prototypes<T: Real>(
    fmap: &FeatureMap<T>,
    predicted: &PredictedMask,
    n: usize,
    c: usize,
    lambda: T,
    seed: u64,
) -> Result<PrototypeSet<T>, Error> {
    if predicted.dims() != (fmap.dims().0, fmap.dims().1) {
        return Err(Error::invalid_input("predicted mask is not at feature resolution"));
    }
    let sets = split_class_features(fmap, &predicted.to_label_mask(), n)?;
    generate_prototypes_partial(&sets, c, lambda, seed)
}

// ---- discrete plan for the differentiable path ----
//
// During training the prototype structure (which rows feed which cluster, the
// dedup multiplicities) is data-dependent but treated as constant for
// differentiation, mirroring the frozen k-means assignments. A plan captures
// that structure against a stacked feature-row matrix so the tape can rebuild
// prototypes as weighted row sums.

#[derive(Debug, Clone)]
pub struct ClassPlan {
    /// Per cluster: row indices (into the stacked rows) of its distinct
    /// members; the center is their unweighted mean.
    pub clusters: Vec<Vec<usize>>,
    /// Distinct representative rows for the holistic term...
    pub holistic_rows: Vec<usize>,
    /// ...and their multiplicity weights (count / total), summing to 1.
    pub holistic_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrototypePlan {
    pub classes: Vec<Option<ClassPlan>>,
}

/// Builds the discrete prototype structure for stacked feature rows labeled
/// by `labels` (255 = ignore). Empty classes get `None` when `allow_missing`,
/// otherwise an error.
pub fn plan_prototypes<T: Real>(
    rows: &ArrayView2<T>,
    labels: &[u8],
    n: usize,
    c: usize,
    seed: u64,
    allow_missing: bool,
) -> Result<PrototypePlan, Error> {
    if rows.shape()[0] != labels.len() {
        return Err(Error::invalid_input("labels must cover every feature row"));
    }
    let mut classes = Vec::with_capacity(n + 1);
    for class in 0..=n {
        let member_rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == class && l != IGNORE_LABEL)
            .map(|(i, _)| i)
            .collect();
        if member_rows.is_empty() {
            if allow_missing {
                classes.push(None);
                continue;
            }
            return Err(Error::EmptyClass { class });
        }
        let vectors: Vec<Array1<T>> =
            member_rows.iter().map(|&r| rows.row(r).to_owned()).collect();
        let dd = dedup_class(&vectors);
        let outcome = kmeans(&dd.reps, c, mix_seed(seed, class as u64), 100)?;
        let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); outcome.effective_c];
        for (rep_i, &a) in outcome.assignments.iter().enumerate() {
            clusters[a].push(member_rows[dd.rep_origin[rep_i]]);
        }
        // Repair guarantees every effective cluster is non-empty at the last
        // update, but a final reassignment can still drain one; fold any
        // empties into the replicate-last rule.
        let mut filled: Vec<Vec<usize>> = clusters.into_iter().filter(|m| !m.is_empty()).collect();
        while filled.len() < c {
            let last = filled.last().expect("at least one cluster").clone();
            filled.push(last);
        }
        let total: usize = dd.counts.iter().sum();
        let holistic_rows: Vec<usize> =
            dd.rep_origin.iter().map(|&ri| member_rows[ri]).collect();
        let holistic_weights: Vec<f64> =
            dd.counts.iter().map(|&cnt| cnt as f64 / total as f64).collect();
        classes.push(Some(ClassPlan { clusters: filled, holistic_rows, holistic_weights }));
    }
    Ok(PrototypePlan { classes })
}
