//! Exhaustive-threshold ROC reference.
#![allow(dead_code)]

use symwd_core::data::Distribution;
use symwd_core::eval::RocSample;

/// Quadratic oracle: for every θ, recount flags from scratch.
pub fn brute_force(samples: &[RocSample]) -> Vec<(f64, f64)> {
    let mut thetas: Vec<f64> = samples.iter().map(|s| s.score).collect();
    thetas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thetas.dedup();
    thetas.insert(0, f64::INFINITY);
    thetas.push(f64::NEG_INFINITY);
    let n_in = samples.iter().filter(|s| s.distribution == Distribution::In).count() as f64;
    let n_out = samples.len() as f64 - n_in;
    let mut pts: Vec<(f64, f64)> = thetas
        .iter()
        .map(|&t| {
            let flagged = |s: &&RocSample| !s.vetoed && s.score >= t;
            let tp = samples.iter().filter(flagged).filter(|s| s.distribution == Distribution::In && s.correct).count();
            let fp = samples.iter().filter(flagged).filter(|s| s.distribution == Distribution::Out).count();
            (fp as f64 / n_out, tp as f64 / n_in)
        })
        .collect();
    if *pts.last().unwrap() != (1.0, 1.0) {
        pts.push((1.0, 1.0));
    }
    pts
}

pub fn area(pts: &[(f64, f64)]) -> f64 {
    let mut a = 0.0;
    for w in pts.windows(2) {
        a += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
    }
    a
}
