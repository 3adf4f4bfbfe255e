//! Monte-Carlo sanity checks: over repeated draws, the uniform deviation
//! of a finite class of point-mass predictors under the bounded loss
//! `1 - h(y)` stays below the plug-in calculators in at least a
//! `1 - delta` fraction of trials.

use perfed::analysis::{bound_interp, bound_local};
use perfed::rng;
use rand::Rng as _;

const CLASSES: usize = 5;

fn draw(rng: &mut rng::Rng, probs: &[f64], n: usize) -> Vec<f64> {
    let mut freq = vec![0.0; probs.len()];
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let y = probs
            .iter()
            .position(|p| {
                acc += p;
                u < acc
            })
            .unwrap_or(probs.len() - 1);
        freq[y] += 1.0 / n as f64;
    }
    freq
}

/// Largest gap over point masses `h_c` between true and empirical loss
/// `1 - freq[c]`.
fn sup_gap(truth: &[f64], emp: &[f64]) -> f64 {
    truth.iter().zip(emp).map(|(t, e)| (t - e).abs()).fold(0.0, f64::max)
}

#[test]
fn local_bound_covers_uniform_deviation() {
    let truth = [0.4, 0.3, 0.15, 0.1, 0.05];
    let (m, delta, trials) = (40, 0.1, 400);
    let bound = bound_local((CLASSES - 1) as f64, m, delta).unwrap();
    let mut rng = rng::stream(5, &[1]);
    let covered = (0..trials).filter(|_| sup_gap(&truth, &draw(&mut rng, &truth, m)) <= bound).count();
    assert!(covered as f64 >= (1.0 - delta) * trials as f64, "{covered}/{trials}");
}

#[test]
fn interpolation_bound_covers_mixture_deviation() {
    let local = [0.7, 0.1, 0.1, 0.05, 0.05];
    let central = [0.2; CLASSES];
    let (m_k, m_c, delta, trials) = (20, 200, 0.1, 400);
    let mut rng = rng::stream(5, &[2]);
    for lambda in [0.0, 0.3, 0.7, 1.0] {
        let bound = bound_interp(lambda, m_k, m_c, (CLASSES - 1) as f64, delta).unwrap();
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect() };
        let truth = mix(&local, &central);
        let covered = (0..trials)
            .filter(|_| {
                let emp = mix(&draw(&mut rng, &local, m_k), &draw(&mut rng, &central, m_c));
                sup_gap(&truth, &emp) <= bound
            })
            .count();
        assert!(covered as f64 >= (1.0 - delta) * trials as f64, "lambda {lambda}: {covered}/{trials}");
    }
}
