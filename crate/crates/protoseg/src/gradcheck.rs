//! Central finite-difference gradient verification.
//!
//! Analytic gradients are compared coordinate-wise against
//! `(f(x + h) - f(x - h)) / 2h`. The comparison uses a relative error with an
//! absolute floor, so coordinates where both values are tiny do not dominate.

use ndarray::ArrayD;

/// Outcome of a gradient comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst relative error seen across checked coordinates.
    pub max_rel: f64,
    /// (input index, flat coordinate) where it occurred.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Checks `analytic[i]` against central differences of `f` in its `i`-th
/// input. `coords` restricts checking to the given (input, flat index) pairs;
/// `None` checks every coordinate. Returns an error describing the worst
/// coordinate when `tol` is exceeded.
pub fn check_gradients(
    f: &mut dyn FnMut(&[ArrayD<f64>]) -> f64,
    inputs: &[ArrayD<f64>],
    analytic: &[Option<ArrayD<f64>>],
    h: f64,
    tol: f64,
    floor: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradReport, String> {
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let all_coords: Vec<(usize, usize)> = match coords {
        Some(c) => c.to_vec(),
        None => {
            let mut v = Vec::new();
            for (i, a) in analytic.iter().enumerate() {
                if a.is_some() {
                    for k in 0..inputs[i].len() {
                        v.push((i, k));
                    }
                }
            }
            v
        }
    };
    let mut report = GradReport {
        max_rel: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    for &(i, k) in &all_coords {
        let g_analytic = match &analytic[i] {
            Some(a) => *a.as_slice().expect("standard layout").get(k).expect("coord in range"),
            None => continue,
        };
        let orig = work[i].as_slice().unwrap()[k];
        let step = h * orig.abs().max(1.0);
        work[i].as_slice_mut().unwrap()[k] = orig + step;
        let f_plus = f(&work);
        work[i].as_slice_mut().unwrap()[k] = orig - step;
        let f_minus = f(&work);
        work[i].as_slice_mut().unwrap()[k] = orig;
        let g_numeric = (f_plus - f_minus) / (2.0 * step);
        let e = rel_err(g_analytic, g_numeric, floor);
        report.coords_checked += 1;
        if e > report.max_rel {
            report.max_rel = e;
            report.worst = (i, k);
            report.analytic_at_worst = g_analytic;
            report.numeric_at_worst = g_numeric;
        }
    }
    if report.max_rel > tol {
        return Err(format!(
            "gradient mismatch at input {} coord {}: analytic {:.9e} vs numeric {:.9e} (rel {:.3e} > tol {:.3e}, {} coords)",
            report.worst.0,
            report.worst.1,
            report.analytic_at_worst,
            report.numeric_at_worst,
            report.max_rel,
            tol,
            report.coords_checked,
        ));
    }
    Ok(report)
}

/// Deterministically samples up to `count` flat coordinates of input `i`.
pub fn sample_coords(input: usize, len: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    if len <= count {
        return (0..len).map(|k| (input, k)).collect();
    }
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < count {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        picked.insert((state % len as u64) as usize);
    }
    picked.into_iter().map(|k| (input, k)).collect()
}
