//! CTC loss, a brute-force reference, greedy decoding and token error rate.
//!
//! Class layout everywhere: labels occupy `0..V`, the blank is index `V`
//! (the last column of a `T×(V+1)` matrix).

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Target label sequence; never contains the blank.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelSeq {
    tokens: Vec<usize>,
}

impl LabelSeq {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Precondition(format!(
                "label {bad} outside vocabulary 0..{vocab_size}"
            )));
        }
        Ok(LabelSeq { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Shortest frame count that can emit this sequence: one frame per label
    /// plus a separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.tokens.len() + self.tokens.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Per-frame argmax, blanks included.
    pub trace: Vec<usize>,
}

pub(crate) struct CtcOutput {
    pub loss: f64,
    /// d loss / d log_probs, `T×(V+1)` row-major.
    pub grad: Vec<f64>,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_inputs(log_probs: &Tensor, target: &LabelSeq) -> Result<(usize, usize)> {
    let (t, classes) = match log_probs.shape() {
        [t, c] if *c >= 2 => (*t, *c),
        s => return Err(Error::Precondition(format!("ctc expects T×(V+1) log-probabilities, got {s:?}"))),
    };
    if target.is_empty() {
        return Err(Error::Precondition("ctc target must contain at least one label".into()));
    }
    if let Some(&bad) = target.tokens().iter().find(|&&k| k >= classes - 1) {
        return Err(Error::Precondition(format!("label {bad} collides with blank {}", classes - 1)));
    }
    for r in 0..t {
        let mass: f64 = log_probs.row(r).iter().map(|v| v.exp()).sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "row {r} of exp(log_probs) sums to {mass}, expected 1"
            )));
        }
    }
    let required = target.min_frames();
    if t < required {
        return Err(Error::InfeasibleAlignment {
            frames: t,
            labels: target.len(),
            required,
        });
    }
    Ok((t, classes))
}

/// Log-space forward-backward over the blank-interleaved target.
pub(crate) fn ctc_forward_backward(log_probs: &Tensor, target: &LabelSeq) -> Result<CtcOutput> {
    let (t_len, classes) = check_inputs(log_probs, target)?;
    let blank = classes - 1;
    let lp = log_probs.data();
    let y = |t: usize, k: usize| lp[t * classes + k];

    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.tokens().iter().flat_map(|&k| [k, blank]))
        .collect();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = y(0, ext[0]);
    alpha[1] = y(0, ext[1]);
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + y(t, ext[s]) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if log_p == ninf {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            labels: target.len(),
            required: target.min_frames(),
        });
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = y(t_len - 1, ext[s_len - 1]);
    beta[last + s_len - 2] = y(t_len - 1, ext[s_len - 2]);
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse2(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = lse2(acc, next[s + 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + y(t, ext[s]) };
        }
    }

    let mut grad = vec![0.0; t_len * classes];
    let mut occupancy = vec![ninf; classes];
    for t in 0..t_len {
        occupancy.fill(ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = lse2(occupancy[ext[s]], ab);
        }
        for k in 0..classes {
            if occupancy[k] != ninf {
                grad[t * classes + k] = -(occupancy[k] - y(t, k) - log_p).exp();
            }
        }
    }

    Ok(CtcOutput { loss: -log_p, grad })
}

/// Negative log-likelihood `−log Σ_paths Π p(path)` of `target`.
pub fn ctc_loss(log_probs: &Tensor, target: &LabelSeq) -> Result<f64> {
    ctc_forward_backward(log_probs, target).map(|o| o.loss)
}

/// Largest number of paths the brute-force oracle will enumerate.
pub const ORACLE_MAX_PATHS: f64 = 1e6;

/// Exhaustive enumeration of every frame labelling, collapsed and compared
/// against `target`. Reference implementation for [`ctc_loss`].
pub fn ctc_loss_bruteforce(log_probs: &Tensor, target: &LabelSeq) -> Result<f64> {
    let (t_len, classes) = match log_probs.shape() {
        [t, c] if *c >= 2 => (*t, *c),
        s => return Err(Error::Precondition(format!("expected T×(V+1), got {s:?}"))),
    };
    let paths = (classes as f64).powi(t_len as i32);
    if paths > ORACLE_MAX_PATHS {
        return Err(Error::OracleSize { paths });
    }
    let blank = classes - 1;
    let lp = log_probs.data();
    let mut path = vec![0usize; t_len];
    let mut total = f64::NEG_INFINITY;
    loop {
        if collapse(&path, blank) == target.tokens() {
            let logp: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * classes + k]).sum();
            total = lse2(total, logp);
        }
        // Mixed-radix increment.
        let mut i = 0;
        while i < t_len {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t_len {
            break;
        }
    }
    if total == f64::NEG_INFINITY {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            labels: target.len(),
            required: target.min_frames(),
        });
    }
    Ok(-total)
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(trace: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in trace {
        if prev != Some(k) && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax (ties resolve to the lowest index), then [`collapse`].
pub fn greedy_decode(logits: &Tensor) -> DecodeResult {
    let classes = logits.last_dim();
    let blank = classes - 1;
    let trace: Vec<usize> = (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    DecodeResult {
        tokens: collapse(&trace, blank),
        trace,
    }
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance over reference length. Every vocabulary token counts as
/// one word, so on the synthetic corpora this is a token error rate.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("WER of an empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}
