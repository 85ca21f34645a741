//! Connectionist temporal classification: loss, greedy decoding, blank
//! posteriors and blank-threshold down-sampling of encoder states.
//!
//! Class 0 is the blank in every lattice.

use crate::diffcore::{log_softmax_rows, Real};
use crate::error::{invalid, Error, Result};

pub const BLANK: usize = 0;

/// Default blank threshold for down-sampling.
pub const DEFAULT_BLANK_THRESHOLD: f64 = 0.95;

/// Per-frame log-probability distributions, `frames × classes`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorLattice<F> {
    frames: usize,
    classes: usize,
    log_probs: Vec<F>,
}

impl<F: Real> PosteriorLattice<F> {
    /// Wraps normalized log probabilities. Each row must exponentiate to 1.
    pub fn new(frames: usize, classes: usize, log_probs: Vec<F>) -> Result<Self> {
        if frames < 1 || classes < 2 {
            return Err(invalid(format!(
                "lattice needs T >= 1 and V >= 2, got T={frames} V={classes}"
            )));
        }
        if log_probs.len() != frames * classes {
            return Err(Error::Shape {
                op: "lattice",
                lhs: vec![frames, classes],
                rhs: vec![log_probs.len()],
            });
        }
        let tol = match F::DTYPE {
            crate::diffcore::DType::F64 => 1e-9,
            crate::diffcore::DType::F32 => 1e-4,
        };
        for (t, row) in log_probs.chunks(classes).enumerate() {
            let s: f64 = row.iter().map(|v| v.to_f64().unwrap().exp()).sum();
            if (s - 1.0).abs() > tol {
                return Err(invalid(format!("lattice row {t} sums to {s}, not 1")));
            }
        }
        Ok(PosteriorLattice {
            frames,
            classes,
            log_probs,
        })
    }

    /// Normalizes raw logits with a row-wise log-softmax.
    pub fn from_logits(frames: usize, classes: usize, logits: &[F]) -> Result<Self> {
        if logits.len() != frames * classes {
            return Err(Error::Shape {
                op: "lattice",
                lhs: vec![frames, classes],
                rhs: vec![logits.len()],
            });
        }
        Self::new(frames, classes, log_softmax_rows(logits, classes))
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn log_probs(&self) -> &[F] {
        &self.log_probs
    }

    pub fn row(&self, t: usize) -> &[F] {
        &self.log_probs[t * self.classes..(t + 1) * self.classes]
    }
}

fn lse2<F: Real>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames needed to emit `target`: one per label plus a
/// blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood and its gradient with respect to every
/// log-probability entry. Rows are not assumed normalized, which makes the
/// gradient valid when composed with a log-softmax.
pub fn ctc_nll_and_grad<F: Real>(
    log_probs: &[F],
    frames: usize,
    classes: usize,
    target: &[usize],
) -> Result<(F, Vec<F>)> {
    if target.is_empty() {
        return Err(invalid("ctc: empty target"));
    }
    if log_probs.len() != frames * classes {
        return Err(Error::Shape {
            op: "ctc_loss",
            lhs: vec![frames, classes],
            rhs: vec![log_probs.len()],
        });
    }
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= classes) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: classes,
        });
    }
    let needed = min_frames(target);
    if frames < needed {
        return Err(Error::InfeasibleAlignment { frames, needed });
    }

    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { BLANK } else { target[s / 2] };
    let skip_ok = |s: usize| s >= 2 && label(s) != BLANK && label(s) != label(s - 2);
    let lp = |t: usize, s: usize| log_probs[t * classes + label(s)];
    let ninf = F::neg_infinity();

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    alpha[1] = lp(0, 1);
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = lse2(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
    beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = lse2(b, next[s + 2]);
            }
            cur[s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let log_p = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_p.is_finite() {
        return Err(Error::InfeasibleAlignment { frames, needed });
    }
    let mut grad = vec![F::zero(); frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occ = (a + b - lp(t, s) - log_p).exp();
            grad[t * classes + label(s)] -= occ;
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood of `target` under `lattice`.
pub fn ctc_loss<F: Real>(lattice: &PosteriorLattice<F>, target: &[usize]) -> Result<F> {
    ctc_nll_and_grad(
        lattice.log_probs(),
        lattice.frames(),
        lattice.classes(),
        target,
    )
    .map(|(l, _)| l)
}

/// Per-frame blank probability.
pub fn blank_posteriors<F: Real>(lattice: &PosteriorLattice<F>) -> Vec<F> {
    (0..lattice.frames())
        .map(|t| lattice.row(t)[BLANK].exp())
        .collect()
}

/// Indices of frames whose blank probability does not exceed `threshold`.
/// Falls back to the single least-blank frame (first on ties) when no frame
/// qualifies.
pub fn keep_indices<F: Real>(blank_probs: &[F], threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(invalid(format!(
            "blank threshold {threshold} outside (0, 1]"
        )));
    }
    if blank_probs.is_empty() {
        return Err(invalid("down-sampling needs at least one frame"));
    }
    let thr = F::lit(threshold);
    let kept: Vec<usize> = blank_probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p <= thr)
        .map(|(i, _)| i)
        .collect();
    if !kept.is_empty() {
        return Ok(kept);
    }
    let mut best = 0;
    for (i, &p) in blank_probs.iter().enumerate() {
        if p < blank_probs[best] {
            best = i;
        }
    }
    Ok(vec![best])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleResult<F> {
    pub kept_indices: Vec<usize>,
    /// Kept rows, `kept_indices.len() × dim`.
    pub hidden: Vec<F>,
    pub threshold_used: f64,
}

/// Drops hidden-state rows (`T × dim`) whose blank probability exceeds
/// `threshold`, preserving order.
pub fn downsample<F: Real>(
    hidden: &[F],
    dim: usize,
    blank_probs: &[F],
    threshold: f64,
) -> Result<DownsampleResult<F>> {
    if dim == 0 || hidden.len() != blank_probs.len() * dim {
        return Err(Error::Shape {
            op: "downsample",
            lhs: vec![hidden.len() / dim.max(1), dim],
            rhs: vec![blank_probs.len()],
        });
    }
    let kept_indices = keep_indices(blank_probs, threshold)?;
    let mut kept = Vec::with_capacity(kept_indices.len() * dim);
    for &i in &kept_indices {
        kept.extend_from_slice(&hidden[i * dim..(i + 1) * dim]);
    }
    Ok(DownsampleResult {
        kept_indices,
        hidden: kept,
        threshold_used: threshold,
    })
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode<F: Real>(lattice: &PosteriorLattice<F>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for t in 0..lattice.frames() {
        let row = lattice.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}
