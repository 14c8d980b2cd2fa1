//! Exact transducer loss over the alignment lattice, its gradient with
//! respect to the joint log-probabilities, a brute-force alignment
//! enumeration oracle, and greedy decoding.
//!
//! The lattice state is `(t, u)`: frame `t` consumed `0..T`, labels emitted
//! `0..=U`. A blank transition advances `t`, a label transition advances `u`
//! without consuming a frame, and every complete alignment ends with the
//! blank at `(T-1, U)` — an alignment is an interleaving of `T` blanks and
//! `U` labels whose blank-removal map recovers the label sequence. All
//! arithmetic is in log space; probability-space recursions underflow at
//! modest `T`.

use thiserror::Error;

use crate::autodiff::{Tape, Var};

#[derive(Debug, Error)]
pub enum RnntError {
    #[error("empty lattice: T must be >= 1")]
    EmptyLattice,
    #[error("label {label} at position {pos} invalid for vocab {vocab} with blank {blank}")]
    BadLabel { label: usize, pos: usize, vocab: usize, blank: usize },
    #[error("lattice shape {got:?} does not match T={t}, U+1={u1}, V={v}")]
    ShapeMismatch { got: Vec<usize>, t: usize, u1: usize, v: usize },
    #[error("instance too large for oracle: T+U = {0} exceeds 16")]
    TooLargeForOracle(usize),
}

impl RnntError {
    pub fn code(&self) -> &'static str {
        match self {
            RnntError::EmptyLattice => "empty_lattice",
            RnntError::BadLabel { .. } => "bad_label",
            RnntError::ShapeMismatch { .. } => "lattice_shape",
            RnntError::TooLargeForOracle(_) => "oracle_guard",
        }
    }
}

/// Log-softmaxed joint outputs over `[T, U+1, V]`.
#[derive(Debug, Clone)]
pub struct LogLattice {
    log_probs: Vec<f64>,
    t: usize,
    u: usize,
    v: usize,
    blank_id: usize,
}

impl LogLattice {
    /// Builds a lattice, debug-asserting that every `[t, u, .]` slice
    /// exponentiates to a distribution.
    pub fn new(log_probs: Vec<f64>, t: usize, u: usize, v: usize, blank_id: usize) -> Self {
        let lat = Self::from_unnormalized(log_probs, t, u, v, blank_id);
        #[cfg(debug_assertions)]
        for (i, slice) in lat.log_probs.chunks(v).enumerate() {
            let sum: f64 = slice.iter().map(|lp| lp.exp()).sum();
            debug_assert!(
                (sum - 1.0).abs() < 1e-9,
                "lattice slice {i} sums to {sum}, not 1"
            );
        }
        lat
    }

    /// Builds a lattice without the normalization check; for probes that
    /// deliberately perturb log-probabilities.
    pub fn from_unnormalized(
        log_probs: Vec<f64>,
        t: usize,
        u: usize,
        v: usize,
        blank_id: usize,
    ) -> Self {
        assert_eq!(
            log_probs.len(),
            t * (u + 1) * v,
            "lattice buffer length {} does not match [{t}, {}, {v}]",
            log_probs.len(),
            u + 1
        );
        assert!(blank_id < v);
        Self { log_probs, t, u, v, blank_id }
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn labels(&self) -> usize {
        self.u
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    #[inline]
    fn lp(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[(t * (self.u + 1) + u) * self.v + k]
    }

    fn validate_labels(&self, y: &[usize]) -> Result<(), RnntError> {
        if self.t == 0 {
            return Err(RnntError::EmptyLattice);
        }
        if y.len() != self.u {
            return Err(RnntError::ShapeMismatch {
                got: vec![self.t, y.len() + 1, self.v],
                t: self.t,
                u1: self.u + 1,
                v: self.v,
            });
        }
        for (pos, &label) in y.iter().enumerate() {
            if label == self.blank_id || label >= self.v {
                return Err(RnntError::BadLabel {
                    label,
                    pos,
                    vocab: self.v,
                    blank: self.blank_id,
                });
            }
        }
        Ok(())
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Exact marginal likelihood over all alignments, with the gradient of the
/// loss with respect to the lattice log-probabilities (same layout).
pub fn rnnt_loss(lat: &LogLattice, y: &[usize]) -> Result<(f64, Vec<f64>), RnntError> {
    lat.validate_labels(y)?;
    let (t_max, u_max) = (lat.t, lat.u);
    let width = u_max + 1;
    let neg = f64::NEG_INFINITY;

    // Forward: alpha[t][u] = log prob of reaching state (t, u).
    let mut alpha = vec![neg; t_max * width];
    alpha[0] = 0.0;
    for t in 0..t_max {
        for u in 0..=u_max {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[(t - 1) * width + u] + lat.lp(t - 1, u, lat.blank_id)
            } else {
                neg
            };
            let from_label = if u > 0 {
                alpha[t * width + u - 1] + lat.lp(t, u - 1, y[u - 1])
            } else {
                neg
            };
            alpha[t * width + u] = logaddexp(from_blank, from_label);
        }
    }
    let log_z = alpha[(t_max - 1) * width + u_max] + lat.lp(t_max - 1, u_max, lat.blank_id);

    // Backward: beta[t][u] = log prob of completing from state (t, u).
    let mut beta = vec![neg; t_max * width];
    for t in (0..t_max).rev() {
        for u in (0..=u_max).rev() {
            let via_blank = if u == u_max && t == t_max - 1 {
                lat.lp(t, u, lat.blank_id)
            } else if t + 1 < t_max {
                lat.lp(t, u, lat.blank_id) + beta[(t + 1) * width + u]
            } else {
                neg
            };
            let via_label = if u < u_max {
                lat.lp(t, u, y[u]) + beta[t * width + u + 1]
            } else {
                neg
            };
            beta[t * width + u] = logaddexp(via_blank, via_label);
        }
    }
    debug_assert!(
        (beta[0] - log_z).abs() < 1e-6 || (beta[0] == neg && log_z == neg),
        "forward/backward disagree: {} vs {log_z}",
        beta[0]
    );

    // Transition occupancies give the gradient of -log Z.
    let mut grad = vec![0.0; lat.log_probs.len()];
    for t in 0..t_max {
        for u in 0..=u_max {
            let a = alpha[t * width + u];
            if a == neg {
                continue;
            }
            let blank_cont = if u == u_max && t == t_max - 1 {
                0.0
            } else if t + 1 < t_max {
                beta[(t + 1) * width + u]
            } else {
                neg
            };
            if blank_cont != neg {
                let occ = (a + lat.lp(t, u, lat.blank_id) + blank_cont - log_z).exp();
                grad[(t * width + u) * lat.v + lat.blank_id] -= occ;
            }
            if u < u_max {
                let cont = beta[t * width + u + 1];
                if cont != neg {
                    let occ = (a + lat.lp(t, u, y[u]) + cont - log_z).exp();
                    grad[(t * width + u) * lat.v + y[u]] -= occ;
                }
            }
        }
    }
    Ok((-log_z, grad))
}

/// Records the transducer loss of a log-softmaxed lattice node on the tape,
/// so gradients chain through `log_softmax` and the joint below it.
pub fn rnnt_loss_on_tape(
    tape: &mut Tape,
    log_probs: Var,
    y: &[usize],
    blank_id: usize,
) -> Result<Var, RnntError> {
    let shape = tape.shape(log_probs).to_vec();
    assert_eq!(shape.len(), 3, "lattice node must be [T, U+1, V], got {shape:?}");
    let (t, u1, v) = (shape[0], shape[1], shape[2]);
    if u1 != y.len() + 1 {
        return Err(RnntError::ShapeMismatch { got: shape, t, u1: y.len() + 1, v });
    }
    let lat = LogLattice::from_unnormalized(tape.value(log_probs).to_vec(), t, u1 - 1, v, blank_id);
    let (loss, grad) = rnnt_loss(&lat, y)?;
    Ok(tape.inject_loss(log_probs, loss, grad))
}

/// Result of the enumeration oracle.
#[derive(Debug, Clone, Copy)]
pub struct BruteForce {
    pub loss: f64,
    /// Leaves of the interleaving enumeration, `C(T+U, U)` in total;
    /// interleavings that demand a label after the last frame carry zero
    /// probability.
    pub paths_enumerated: u64,
}

/// Enumerates every blank/label interleaving and sums path probabilities in
/// log space. Guarded to `T + U <= 16`.
pub fn brute_force_loss_detailed(lat: &LogLattice, y: &[usize]) -> Result<BruteForce, RnntError> {
    lat.validate_labels(y)?;
    if lat.t + lat.u > 16 {
        return Err(RnntError::TooLargeForOracle(lat.t + lat.u));
    }
    fn rec(
        lat: &LogLattice,
        y: &[usize],
        t: usize,
        u: usize,
        acc: f64,
        total: &mut f64,
        paths: &mut u64,
    ) {
        if t == lat.frames() && u == lat.labels() {
            *paths += 1;
            *total = logaddexp(*total, acc);
            return;
        }
        if t < lat.frames() {
            rec(lat, y, t + 1, u, acc + lat.lp(t, u, lat.blank_id()), total, paths);
        }
        if u < lat.labels() {
            let step = if t < lat.frames() {
                lat.lp(t, u, y[u])
            } else {
                f64::NEG_INFINITY
            };
            rec(lat, y, t, u + 1, acc + step, total, paths);
        }
    }
    let mut total = f64::NEG_INFINITY;
    let mut paths = 0;
    rec(lat, y, 0, 0, 0.0, &mut total, &mut paths);
    Ok(BruteForce { loss: -total, paths_enumerated: paths })
}

pub fn brute_force_loss(lat: &LogLattice, y: &[usize]) -> Result<f64, RnntError> {
    Ok(brute_force_loss_detailed(lat, y)?.loss)
}

/// Frame-synchronous joint scoring interface for greedy decoding. A frozen
/// model implements this; tests drive the loop with hand-built tables.
pub trait JointScorer {
    /// Number of encoder frames `T`.
    fn frames(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn blank_id(&self) -> usize;
    /// Decoder context width `C`; `context` passed to [`JointScorer::score`]
    /// holds the last `C` emitted labels, blank-padded at the front.
    fn context_len(&self) -> usize;
    /// Joint logits (any monotone transform of log-probabilities) for frame
    /// `t` under the given label context.
    fn score(&self, t: usize, context: &[usize]) -> Vec<f64>;
}

/// Greedy search: argmax the joint at `(t, context)`; blank advances the
/// frame, a label extends the context, and after `max_symbols_per_frame`
/// consecutive labels at one frame the decoder advances anyway. Ties argmax
/// to the lowest index, so decoding is deterministic.
pub fn greedy_decode<S: JointScorer + ?Sized>(
    scorer: &S,
    max_symbols_per_frame: usize,
) -> Vec<usize> {
    assert!(max_symbols_per_frame >= 1);
    let blank = scorer.blank_id();
    let c = scorer.context_len();
    let mut context = vec![blank; c];
    let mut out = Vec::new();
    let mut t = 0;
    let mut emitted_here = 0;
    while t < scorer.frames() {
        let logits = scorer.score(t, &context);
        debug_assert_eq!(logits.len(), scorer.vocab_size());
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        if best == blank {
            t += 1;
            emitted_here = 0;
        } else {
            out.push(best);
            if c > 0 {
                context.rotate_left(1);
                context[c - 1] = best;
            }
            emitted_here += 1;
            if emitted_here >= max_symbols_per_frame {
                t += 1;
                emitted_here = 0;
            }
        }
    }
    out
}
