//! Representative support-image selection.
//!
//! Each pool image is embedded by mean-pooling its encoder features; the
//! embeddings are clustered into k groups and the image nearest each cluster
//! center (the medoid rule) becomes a support. Ids come back sorted, so the
//! result is a canonical set independent of pool ordering.

use std::collections::BTreeMap;

use ndarray::Array1;

use crate::data::Dataset;
use crate::encoder::{encode, Backbone, FeatureMap};
use crate::error::Error;
use crate::prototype::kmeans;
use crate::scalar::{mix_seed, Real};

/// Whole-image embeddings keyed by sample id; the sorted key order is the
/// canonical iteration order everywhere.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<T: Real> {
    pub embeddings: BTreeMap<String, Array1<T>>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Mean feature vector over all spatial positions.
pub fn image_embedding<T: Real>(fmap: &FeatureMap<T>) -> Array1<T> {
    let (h, w, d) = fmap.dims();
    let mut acc = Array1::<T>::zeros(d);
    for i in 0..h {
        for j in 0..w {
            acc = acc + fmap.data.slice(ndarray::s![i, j, ..]);
        }
    }
    acc.mapv(|v| v / T::from_f64((h * w) as f64))
}

/// Embeds every pool image with the given (frozen) encoder.
pub fn embed_all<T: Real, B: Backbone<T>>(
    backbone: &B,
    pool: &Dataset,
) -> Result<EmbeddingTable<T>, Error> {
    let mut embeddings = BTreeMap::new();
    for s in &pool.samples {
        let fmap = encode(backbone, &s.image)?;
        embeddings.insert(s.id.clone(), image_embedding(&fmap));
    }
    Ok(EmbeddingTable { embeddings })
}

/// Clusters the embeddings into k groups and returns, per cluster center,
/// the id of the nearest not-yet-chosen image (sorted ascending). The chosen
/// ids are always k distinct members of the pool.
pub fn select_support<T: Real>(
    table: &EmbeddingTable<T>,
    k: usize,
    seed: u64,
) -> Result<Vec<String>, Error> {
    if k == 0 {
        return Err(Error::invalid_input("support selection needs k >= 1"));
    }
    if table.len() < k {
        return Err(Error::invalid_input(format!(
            "pool has {} images but k = {k}",
            table.len()
        )));
    }
    let ids: Vec<&String> = table.embeddings.keys().collect();
    let vectors: Vec<Array1<T>> = table.embeddings.values().cloned().collect();
    let outcome = kmeans(&vectors, k, mix_seed(seed, 0x5e1ec7), 100)?;
    let mut used = vec![false; ids.len()];
    let mut chosen = Vec::with_capacity(k);
    for center in outcome.centers.rows() {
        let mut best: Option<usize> = None;
        let mut best_d = f64::INFINITY;
        for (i, v) in vectors.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d: f64 = v
                .iter()
                .zip(center.iter())
                .map(|(&a, &b)| {
                    let diff = a.to_f64() - b.to_f64();
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        let i = best.expect("pool size >= k guarantees an unused image per center");
        used[i] = true;
        chosen.push(ids[i].clone());
    }
    chosen.sort();
    Ok(chosen)
}
