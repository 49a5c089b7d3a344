//! The transductive fine-tuning loss family: prototype-set distance,
//! intra/inter contrast with margin, dynamic uncertainty weighting, support
//! cross-entropy, and boundary length, plus their composition.
//!
//! These are the reference (value-only) implementations used for evaluation,
//! logging, and as oracles; the training path rebuilds the same math on the
//! autodiff tape.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, IGNORE_LABEL};
use crate::error::Error;
use crate::prototype::{ProbabilityMap, PrototypeSet};
use crate::scalar::Real;

/// Smoothing/clamping epsilon shared by the log and sqrt guards.
pub const EPS: f64 = 1e-8;

/// Spatial reduction for the boundary loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Per-iteration loss record: components, uncertainty weight, the combined
/// total, and per-class intra/inter distances (None = class skipped).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pc: f64,
    pub bd: f64,
    pub w_un: f64,
    pub total: f64,
    pub d_intra: Vec<Option<f64>>,
    pub d_inter: Vec<Option<f64>>,
    pub margin: f64,
}

/// Asymmetric distance between prototype sets: `1 - (1/c) * sum over rows g
/// of q of the best cosine against any row of p`. Range [0, 2]. Zero-norm
/// rows are rejected.
pub fn set_distance<T: Real>(p: &Array2<T>, q: &Array2<T>) -> Result<T, Error> {
    if p.shape()[1] != q.shape()[1] {
        return Err(Error::invalid_input("prototype sets must share one dimension"));
    }
    for (name, m) in [("p", p), ("q", q)] {
        for (slot, row) in m.rows().into_iter().enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::ZeroNormVector { set: if name == "p" { "p" } else { "q" }, slot });
            }
            if !norm.is_finite() {
                return Err(Error::invalid_input("non-finite prototype"));
            }
        }
    }
    let c = q.shape()[0];
    let mut acc = T::zero();
    for qi in q.rows() {
        let mut best = T::from_f64(-2.0);
        for pj in p.rows() {
            let cos = crate::prototype::cosine(pj, qi);
            if cos > best {
                best = cos;
            }
        }
        acc += best;
    }
    Ok(T::one() - acc / T::from_f64(c as f64))
}

/// Intra-class and mean inter-class set distances for class `j`. Requires a
/// complete support set `p`; returns `Ok(None)` when `q` is missing class
/// `j` (caller skips that term).
pub fn intra_inter<T: Real>(
    p: &PrototypeSet<T>,
    q: &PrototypeSet<T>,
    j: usize,
) -> Result<Option<(T, T)>, Error> {
    let n = p.n();
    if n == 0 {
        return Err(Error::invalid_input("contrast needs at least two classes"));
    }
    if p.protos.len() != q.protos.len() {
        return Err(Error::invalid_input("prototype sets cover different class counts"));
    }
    let qj = match q.protos.get(j).and_then(|m| m.as_ref()) {
        Some(m) => m,
        None => return Ok(None),
    };
    let pj = p.protos[j].as_ref().ok_or(Error::EmptyClass { class: j })?;
    let d_intra = set_distance(pj, qj)?;
    let mut acc = T::zero();
    for (i, pi) in p.protos.iter().enumerate() {
        if i == j {
            continue;
        }
        let pi = pi.as_ref().ok_or(Error::EmptyClass { class: i })?;
        acc += set_distance(pi, qj)?;
    }
    Ok(Some((d_intra, acc / T::from_f64(n as f64))))
}

/// Margin contrast over all classes: `sum_j max(d_intra_j - d_inter_j + m,
/// 0)`, with missing-class terms skipped (logged). Also returns the
/// per-class distances for run logging.
#[allow(clippy::type_complexity)]
pub fn prototype_contrast<T: Real>(
    p: &PrototypeSet<T>,
    q: &PrototypeSet<T>,
    margin: T,
) -> Result<(T, Vec<Option<(T, T)>>), Error> {
    if margin < T::zero() {
        return Err(Error::invalid_config("margin must be >= 0"));
    }
    let mut loss = T::zero();
    let mut per_class = Vec::with_capacity(p.protos.len());
    for j in 0..p.protos.len() {
        match intra_inter(p, q, j)? {
            Some((din, dout)) => {
                let term = din - dout + margin;
                if term > T::zero() {
                    loss += term;
                }
                per_class.push(Some((din, dout)));
            }
            None => {
                log::debug!("class {j} absent from pseudo-prototypes; contrast term skipped");
                per_class.push(None);
            }
        }
    }
    Ok((loss, per_class))
}

/// Mean over pixels of (second-largest probability / largest probability).
/// 1 means maximal ambiguity, small values mean confident predictions;
/// always in (0, 1] for valid probability maps.
pub fn uncertainty_weight<T: Real>(probs: &ProbabilityMap<T>) -> Result<T, Error> {
    let (h, w, k) = probs.dims();
    if k < 2 {
        return Err(Error::invalid_input("uncertainty needs at least two classes"));
    }
    let mut acc = T::zero();
    for i in 0..h {
        for j in 0..w {
            let mut largest = T::from_f64(-1.0);
            let mut second = T::from_f64(-1.0);
            for c in 0..k {
                let p = probs.probs[[i, j, c]];
                if p > largest {
                    second = largest;
                    largest = p;
                } else if p > second {
                    second = p;
                }
            }
            acc += second / largest;
        }
    }
    Ok(acc / T::from_f64((h * w) as f64))
}

/// Cross-entropy of a probability map against labels, averaged with the
/// `1/((n+1)|labeled pixels|)` normalizer; probabilities are clamped at 1e-8
/// before the log. Ignore-labeled pixels are excluded.
pub fn support_ce<T: Real>(
    probs: &ProbabilityMap<T>,
    mask: &LabelMask,
    n: usize,
) -> Result<T, Error> {
    let (h, w, k) = probs.dims();
    if k != n + 1 {
        return Err(Error::invalid_input("probability map class count mismatch"));
    }
    if mask.dims() != (h, w) {
        return Err(Error::invalid_input("mask is not aligned with the probability map"));
    }
    let eps = T::from_f64(EPS);
    let mut acc = T::zero();
    let mut labeled = 0usize;
    for i in 0..h {
        for j in 0..w {
            let l = mask.data[[i, j]];
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize > n {
                return Err(Error::invalid_input(format!("label {l} out of range")));
            }
            let p = probs.probs[[i, j, l as usize]];
            acc += p.max(eps).ln();
            labeled += 1;
        }
    }
    if labeled == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(-acc / T::from_f64(((n + 1) * labeled) as f64))
}

/// Sums the foreground probability channels (everything except class 0) into
/// one soft map, the input to the boundary loss.
pub fn soft_foreground<T: Real>(probs: &ProbabilityMap<T>) -> Array2<T> {
    let (h, w, k) = probs.dims();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut s = T::zero();
        for c in 1..k {
            s += probs.probs[[i, j, c]];
        }
        s
    })
}

/// Total-variation style boundary length of a soft map: per pixel
/// `sqrt(gx^2 + gy^2 + 1e-8)` with forward differences (zero at the last
/// row/column), reduced by mean (default) or sum.
pub fn boundary_loss<T: Real>(soft_fg: &Array2<T>, reduction: Reduction) -> T {
    let (h, w) = (soft_fg.shape()[0], soft_fg.shape()[1]);
    let eps = T::from_f64(EPS);
    let mut acc = T::zero();
    for i in 0..h {
        for j in 0..w {
            let gx = if j + 1 < w { soft_fg[[i, j + 1]] - soft_fg[[i, j]] } else { T::zero() };
            let gy = if i + 1 < h { soft_fg[[i + 1, j]] - soft_fg[[i, j]] } else { T::zero() };
            acc += (gx * gx + gy * gy + eps).sqrt();
        }
    }
    match reduction {
        Reduction::Sum => acc,
        Reduction::Mean => acc / T::from_f64((h * w) as f64),
    }
}

/// Combines the components: `ce + (1 - w_un) * pc + bd`. The uncertainty
/// weight enters as a constant.
pub fn total_loss<T: Real>(ce: T, pc: T, bd: T, w_un: T) -> T {
    ce + (T::one() - w_un) * pc + bd
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: Vec<Vec<f64>>) -> Array2<f64> {
        let d = rows[0].len();
        let mut m = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        m
    }

    fn unit(theta_deg: f64) -> Vec<f64> {
        let t = theta_deg.to_radians();
        vec![t.cos(), t.sin()]
    }

    #[test]
    fn set_distance_identical_sets_is_zero() {
        let p = mat(vec![unit(10.0), unit(75.0)]);
        let d = set_distance(&p, &p).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn set_distance_orthogonal_is_one() {
        let p = mat(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let q = mat(vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]);
        assert_abs_diff_eq!(set_distance(&p, &q).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn set_distance_antipodal_is_two() {
        let p = mat(vec![vec![0.6, -0.8]]);
        let q = mat(vec![vec![-0.6, 0.8]]);
        assert_abs_diff_eq!(set_distance(&p, &q).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn set_distance_is_asymmetric() {
        // p spans two directions, q only one: from q's view the best match is
        // perfect; from p's view one row has no good match.
        let p = mat(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = mat(vec![vec![1.0, 0.0]]);
        let pq = set_distance(&p, &q).unwrap();
        let qp = set_distance(&q, &p).unwrap();
        assert_abs_diff_eq!(pq, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(qp, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn set_distance_rejects_zero_rows() {
        let p = mat(vec![vec![0.0, 0.0]]);
        let q = mat(vec![vec![1.0, 0.0]]);
        match set_distance(&p, &q) {
            Err(Error::ZeroNormVector { set, slot }) => {
                assert_eq!(set, "p");
                assert_eq!(slot, 0);
            }
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    fn proto_set(mats: Vec<Option<Array2<f64>>>) -> PrototypeSet<f64> {
        let clusters = mats.iter().flatten().map(|m| m.shape()[0]).next().unwrap_or(1);
        PrototypeSet { protos: mats, clusters }
    }

    #[test]
    fn intra_inter_single_foreground_class() {
        let p = proto_set(vec![Some(mat(vec![unit(0.0)])), Some(mat(vec![unit(90.0)]))]);
        let q = proto_set(vec![Some(mat(vec![unit(30.0)])), Some(mat(vec![unit(120.0)]))]);
        let (din, dout) = intra_inter(&p, &q, 0).unwrap().unwrap();
        assert_abs_diff_eq!(din, 1.0 - 30.0f64.to_radians().cos(), epsilon = 1e-12);
        // Single other class: inter = d(p^1, q^0) with angle 60 degrees.
        assert_abs_diff_eq!(dout, 1.0 - 60.0f64.to_radians().cos(), epsilon = 1e-12);
    }

    #[test]
    fn intra_inter_equal_sets_zero_intra() {
        let p = proto_set(vec![
            Some(mat(vec![unit(0.0), unit(15.0)])),
            Some(mat(vec![unit(90.0), unit(100.0)])),
            Some(mat(vec![unit(200.0), unit(210.0)])),
        ]);
        for j in 0..3 {
            let (din, _) = intra_inter(&p, &p, j).unwrap().unwrap();
            assert_abs_diff_eq!(din, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn intra_inter_three_class_hand_case() {
        let p = proto_set(vec![
            Some(mat(vec![unit(0.0)])),
            Some(mat(vec![unit(90.0)])),
            Some(mat(vec![unit(180.0)])),
        ]);
        let q = proto_set(vec![
            Some(mat(vec![unit(30.0)])),
            Some(mat(vec![unit(90.0)])),
            Some(mat(vec![unit(180.0)])),
        ]);
        let (din, dout) = intra_inter(&p, &q, 0).unwrap().unwrap();
        assert_abs_diff_eq!(din, 1.0 - 30.0f64.to_radians().cos(), epsilon = 1e-12);
        let expect = 0.5
            * ((1.0 - 60.0f64.to_radians().cos()) + (1.0 - 150.0f64.to_radians().cos()));
        assert_abs_diff_eq!(dout, expect, epsilon = 1e-12);
    }

    #[test]
    fn intra_inter_missing_class_signals_skip() {
        let p = proto_set(vec![Some(mat(vec![unit(0.0)])), Some(mat(vec![unit(90.0)]))]);
        let q = proto_set(vec![Some(mat(vec![unit(10.0)])), None]);
        assert!(intra_inter(&p, &q, 1).unwrap().is_none());
        assert!(intra_inter(&p, &q, 0).unwrap().is_some());
    }

    #[test]
    fn contrast_zero_when_aligned_and_separated() {
        // q == p per class and inter distances comfortably above the margin.
        let p = proto_set(vec![Some(mat(vec![unit(0.0)])), Some(mat(vec![unit(180.0)]))]);
        let (loss, per_class) = prototype_contrast(&p, &p, 0.2).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
        assert!(per_class.iter().all(|c| c.is_some()));
    }

    #[test]
    fn contrast_two_margin_terms() {
        // Both pseudo-prototypes sit exactly between the class directions, so
        // d_intra == d_inter for each class and each term contributes m.
        let p = proto_set(vec![Some(mat(vec![unit(0.0)])), Some(mat(vec![unit(90.0)]))]);
        let q = proto_set(vec![Some(mat(vec![unit(45.0)])), Some(mat(vec![unit(45.0)]))]);
        let (loss, _) = prototype_contrast(&p, &q, 0.2).unwrap();
        assert_abs_diff_eq!(loss, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn contrast_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rand_mat = |c: usize, d: usize| {
            mat((0..c)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) + 0.01).collect())
                .collect())
        };
        let n = 2;
        let c = 3;
        let d = 4;
        let pm: Vec<Array2<f64>> = (0..=n).map(|_| rand_mat(c, d)).collect();
        let qm: Vec<Array2<f64>> = (0..=n).map(|_| rand_mat(c, d)).collect();
        let p = proto_set(pm.iter().cloned().map(Some).collect());
        let q = proto_set(qm.iter().cloned().map(Some).collect());
        let margin = 0.2;
        let (loss, _) = prototype_contrast(&p, &q, margin).unwrap();

        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let dist = |pm: &Array2<f64>, qm: &Array2<f64>| {
            let mut acc = 0.0;
            for g in 0..c {
                let mut best = f64::NEG_INFINITY;
                for h in 0..c {
                    best = best.max(cos(
                        pm.row(h).as_slice().unwrap(),
                        qm.row(g).as_slice().unwrap(),
                    ));
                }
                acc += best;
            }
            1.0 - acc / c as f64
        };
        let mut expect = 0.0;
        for j in 0..=n {
            let din = dist(&pm[j], &qm[j]);
            let mut dout = 0.0;
            for (i, m) in pm.iter().enumerate() {
                if i != j {
                    dout += dist(m, &qm[j]);
                }
            }
            dout /= n as f64;
            expect += (din - dout + margin).max(0.0);
        }
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-9);
    }

    fn prob_map(rows: Vec<Vec<f64>>, h: usize, w: usize) -> ProbabilityMap<f64> {
        let k = rows[0].len();
        let mut probs = Array3::zeros((h, w, k));
        for i in 0..h {
            for j in 0..w {
                for c in 0..k {
                    probs[[i, j, c]] = rows[i * w + j][c];
                }
            }
        }
        ProbabilityMap { probs }
    }

    #[test]
    fn uncertainty_uniform_is_one() {
        let p = prob_map(vec![vec![0.5, 0.5]; 4], 2, 2);
        assert_abs_diff_eq!(uncertainty_weight(&p).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uncertainty_single_pixel_ratio() {
        let p = prob_map(vec![vec![0.8, 0.2]], 1, 1);
        assert_abs_diff_eq!(uncertainty_weight(&p).unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn uncertainty_three_pixel_mean() {
        let p = prob_map(vec![vec![0.8, 0.2], vec![0.5, 0.5], vec![0.6, 0.4]], 1, 3);
        let expect = (0.25 + 1.0 + 0.4 / 0.6) / 3.0;
        assert_abs_diff_eq!(uncertainty_weight(&p).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn uncertainty_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| {
                    let a: f64 = rng.random_range(0.001..1.0);
                    let b: f64 = rng.random_range(0.001..1.0);
                    let c: f64 = rng.random_range(0.001..1.0);
                    let s = a + b + c;
                    vec![a / s, b / s, c / s]
                })
                .collect();
            let w = uncertainty_weight(&prob_map(rows, 2, 3)).unwrap();
            assert!(w > 0.0 && w <= 1.0, "{w}");
        }
    }

    fn mask_of(labels: Vec<u8>, h: usize, w: usize) -> LabelMask {
        LabelMask::new(Array2::from_shape_vec((h, w), labels).unwrap()).unwrap()
    }

    #[test]
    fn ce_zero_when_confident_and_correct() {
        let p = prob_map(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1, 2);
        let m = mask_of(vec![0, 1], 1, 2);
        let ce = support_ce(&p, &m, 1).unwrap();
        assert_abs_diff_eq!(ce, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn ce_uniform_binary_value() {
        let p = prob_map(vec![vec![0.5, 0.5]; 4], 2, 2);
        let m = mask_of(vec![0, 1, 0, 1], 2, 2);
        let ce = support_ce(&p, &m, 1).unwrap();
        assert_abs_diff_eq!(ce, 2.0f64.ln() / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn ce_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|_| {
                let a: f64 = rng.random_range(0.01..1.0);
                let b: f64 = rng.random_range(0.01..1.0);
                let s = a + b;
                vec![a / s, b / s]
            })
            .collect();
        let labels: Vec<u8> =
            (0..16).map(|i| if i == 5 { IGNORE_LABEL } else { (i % 2) as u8 }).collect();
        let p = prob_map(rows.clone(), 4, 4);
        let m = mask_of(labels.clone(), 4, 4);
        let ce = support_ce(&p, &m, 1).unwrap();
        let mut acc = 0.0;
        let mut count = 0usize;
        for (i, l) in labels.iter().enumerate() {
            if *l == IGNORE_LABEL {
                continue;
            }
            acc += rows[i][*l as usize].max(1e-8).ln();
            count += 1;
        }
        let expect = -acc / (2.0 * count as f64);
        assert_abs_diff_eq!(ce, expect, epsilon = 1e-9);
    }

    #[test]
    fn ce_all_ignore_errors() {
        let p = prob_map(vec![vec![0.5, 0.5]; 4], 2, 2);
        let m = mask_of(vec![IGNORE_LABEL; 4], 2, 2);
        assert!(matches!(support_ce(&p, &m, 1), Err(Error::NoLabeledPixels)));
    }

    #[test]
    fn ce_clamps_zero_probability() {
        let p = prob_map(vec![vec![0.0, 1.0]], 1, 1);
        let m = mask_of(vec![0], 1, 1);
        let ce = support_ce(&p, &m, 1).unwrap();
        assert!(ce.is_finite());
        assert_abs_diff_eq!(ce, -(1e-8f64.ln()) / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn soft_foreground_sums_non_background() {
        let p = prob_map(vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]], 1, 2);
        let fg = soft_foreground(&p);
        assert_abs_diff_eq!(fg[[0, 0]], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(fg[[0, 1]], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn boundary_constant_is_near_zero() {
        let m = Array2::from_elem((6, 6), 0.7f64);
        let sum = boundary_loss(&m, Reduction::Sum);
        assert!(sum <= 1e-4 * 36.0 + 1e-12, "{sum}");
        let mean = boundary_loss(&m, Reduction::Mean);
        assert!(mean <= 1e-4 + 1e-12, "{mean}");
    }

    #[test]
    fn boundary_half_plane_sum_is_four() {
        let m = Array2::from_shape_fn((4, 4), |(_, j)| if j < 2 { 1.0f64 } else { 0.0 });
        let sum = boundary_loss(&m, Reduction::Sum);
        assert_abs_diff_eq!(sum, 4.0, epsilon = 2e-3);
    }

    #[test]
    fn boundary_checkerboard_exceeds_single_edge() {
        let checker = Array2::from_shape_fn((6, 6), |(i, j)| ((i + j) % 2) as f64);
        let edge = Array2::from_shape_fn((6, 6), |(_, j)| if j < 3 { 1.0 } else { 0.0 });
        assert!(
            boundary_loss(&checker, Reduction::Sum) > boundary_loss(&edge, Reduction::Sum)
        );
    }

    #[test]
    fn boundary_transpose_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let m = Array2::from_shape_fn((5, 7), |_| rng.random_range(0.0..1.0));
            let t = m.t().to_owned();
            assert_abs_diff_eq!(
                boundary_loss(&m, Reduction::Sum),
                boundary_loss(&t, Reduction::Sum),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn boundary_flip_invariant_on_axis_constant_maps() {
        // Maps constant along the flipped axis keep their difference
        // structure under that flip.
        let rows = Array2::from_shape_fn((6, 6), |(i, _)| (i as f64) / 5.0);
        let flipped_cols = Array2::from_shape_fn((6, 6), |(i, j)| rows[[i, 5 - j]]);
        assert_abs_diff_eq!(
            boundary_loss(&rows, Reduction::Sum),
            boundary_loss(&flipped_cols, Reduction::Sum),
            epsilon = 1e-12
        );
        let cols = Array2::from_shape_fn((6, 6), |(_, j)| (j as f64) / 5.0);
        let flipped_rows = Array2::from_shape_fn((6, 6), |(i, j)| cols[[5 - i, j]]);
        assert_abs_diff_eq!(
            boundary_loss(&cols, Reduction::Sum),
            boundary_loss(&flipped_rows, Reduction::Sum),
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_loss_examples() {
        assert_abs_diff_eq!(total_loss(0.0, 5.0, 0.0, 1.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(total_loss(1.0, 2.0, 0.5, 0.5), 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(total_loss(0.3466, 0.4, 0.0, 0.25), 0.6466, epsilon = 1e-12);
    }

    #[test]
    fn components_non_negative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for trial in 0..20 {
            let c = 2;
            let d = 3;
            let mut rand_mat = |c: usize| {
                mat((0..c)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) + 0.02).collect())
                    .collect())
            };
            let p = proto_set(vec![Some(rand_mat(c)), Some(rand_mat(c))]);
            let q = proto_set(vec![Some(rand_mat(c)), Some(rand_mat(c))]);
            let (pc, _) = prototype_contrast(&p, &q, 0.2).unwrap();
            assert!(pc >= 0.0, "trial {trial}: pc {pc}");
            let sf = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..1.0));
            assert!(boundary_loss(&sf, Reduction::Mean) >= 0.0);
        }
    }
}
