#![allow(dead_code)]

use fmtasr::ctc::{blank_posteriors, ctc_loss, keep_indices, PosteriorLattice};
use fmtasr::diffcore::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-normalized random log probabilities, `t × v`.
pub fn random_log_probs(rng: &mut impl Rng, t: usize, v: usize, spread: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * v);
    for _ in 0..t {
        let z: Vec<f64> = (0..v).map(|_| rng.random_range(-spread..spread)).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(z.iter().map(|x| x - lse));
    }
    out
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Negative log of the summed probability of every length-`t` path that
/// collapses to `target`, by direct enumeration of all `v^t` paths.
pub fn brute_force_nll(lp: &[f64], t: usize, v: usize, target: &[usize]) -> Option<f64> {
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        if collapse(&path) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(i, &c)| lp[i * v + c])
                .sum::<f64>()
                .exp();
        }
        let mut i = 0;
        loop {
            if i == t {
                return (total > 0.0).then(|| -total.ln());
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn random_target(rng: &mut impl Rng, v: usize, max_len: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(1..v)).collect()
}

/// Largest |library - enumeration| NLL gap over `instances` feasible random
/// problems with T ≤ 6, |target| ≤ 3, V ≤ 4.
pub fn ctc_oracle_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(2..=4);
        let target = random_target(&mut rng, v, 3);
        let lp = random_log_probs(&mut rng, t, v, 3.0);
        let Some(expected) = brute_force_nll(&lp, t, v, &target) else {
            assert!(ctc_loss(&PosteriorLattice::new(t, v, lp).unwrap(), &target).is_err());
            continue;
        };
        let lattice = PosteriorLattice::new(t, v, lp).unwrap();
        let got = ctc_loss(&lattice, &target).unwrap();
        worst = worst.max((got - expected).abs());
        done += 1;
    }
    worst
}

/// Largest relative error between the graph's CTC gradient with respect to
/// raw logits (through a log-softmax) and central finite differences.
pub fn ctc_gradcheck_max_error(instances: usize, seed: u64, eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let t = rng.random_range(2..=8);
        let v = rng.random_range(2..=5);
        let target = random_target(&mut rng, v, 3);
        if fmtasr::ctc::min_frames(&target) > t {
            continue;
        }
        let logits: Vec<f64> = (0..t * v).map(|_| rng.random_range(-2.0..2.0)).collect();
        let loss = |z: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut store = ParamStore::new();
            let id = store.add("z", Tensor::new(vec![t, v], z.to_vec()).unwrap());
            let mut g = Graph::new(&store);
            let x = g.param(id);
            let lp = g.log_softmax(x);
            let l = g.ctc_loss(lp, &target).unwrap();
            let grads = g.backward(l).unwrap();
            (g.scalar(l), grads.get(id).map(|s| s.to_vec()))
        };
        let (_, analytic) = loss(&logits);
        let analytic = analytic.unwrap();
        for i in 0..logits.len() {
            let mut zp = logits.clone();
            zp[i] += eps;
            let mut zm = logits.clone();
            zm[i] -= eps;
            let numeric = (loss(&zp).0 - loss(&zm).0) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        done += 1;
    }
    worst
}

/// Down-sampling contract over random lattices: identity at threshold 1.0,
/// monotone kept count (before the fallback) as the threshold falls, and a
/// single fallback frame when every frame is blank-dominated.
pub fn downsample_contract(lattices: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thresholds = [1.0, 0.99, 0.95, 0.9, 0.75, 0.5, 0.3, 0.1, 0.05, 0.01, 1e-4];
    for n in 0..lattices {
        let t = rng.random_range(1..=40);
        let v = rng.random_range(2..=6);
        let mut lp = random_log_probs(&mut rng, t, v, 4.0);
        if n % 3 == 0 {
            for row in lp.chunks_mut(v) {
                row[0] += 3.0;
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
        }
        let lattice = PosteriorLattice::new(t, v, lp).map_err(|e| e.to_string())?;
        let blank = blank_posteriors(&lattice);
        let all: Vec<usize> = (0..t).collect();
        if keep_indices(&blank, 1.0).map_err(|e| e.to_string())? != all {
            return Err(format!("lattice {n}: threshold 1.0 is not the identity"));
        }
        let mut prev = usize::MAX;
        for &thr in &thresholds {
            let pre = blank.iter().filter(|&&p| p <= thr).count();
            if pre > prev {
                return Err(format!("lattice {n}: kept count grew at threshold {thr}"));
            }
            prev = pre;
            let kept = keep_indices(&blank, thr).map_err(|e| e.to_string())?;
            if pre == 0 {
                if kept.len() != 1 {
                    return Err(format!("lattice {n}: fallback kept {} frames", kept.len()));
                }
                let min = blank.iter().cloned().fold(f64::INFINITY, f64::min);
                if blank[kept[0]] != min {
                    return Err(format!(
                        "lattice {n}: fallback frame is not the least blank"
                    ));
                }
            } else if kept.len() != pre || kept.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("lattice {n}: kept indices disagree at {thr}"));
            }
        }
        let saturated = vec![0.999; t];
        if keep_indices(&saturated, 0.5)
            .map_err(|e| e.to_string())?
            .len()
            != 1
        {
            return Err(format!("lattice {n}: saturated fallback is not one frame"));
        }
    }
    Ok(())
}
