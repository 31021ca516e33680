//! Central finite-difference gradient checks.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Compares `analytic` against central differences of `loss` around `params`
/// and returns the largest relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as denominator.
///
/// `coordinates` restricts the check to a subset of indices; `None` checks
/// every coordinate.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
    coordinates: Option<&[usize]>,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Parameter(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::Dimension {
            op: "finite_diff_check",
            detail: format!("{} params, {} gradients", params.len(), analytic.len()),
        });
    }
    let all: Vec<usize>;
    let coords = match coordinates {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let up = loss(&probe)?;
        probe[i] = orig - epsilon;
        let down = loss(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// `count` distinct indices out of `0..len` (all of them if `count >= len`), sorted.
pub fn sample_coordinates(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, len, count).into_vec();
    picked.sort_unstable();
    picked
}
