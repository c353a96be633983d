//! Frame cross-entropy, per-level segment cross-entropy, the smoothing
//! penalty on adjacent probabilities, and their weighted sum.

use crate::autodiff::Var;
use crate::config::LossConfig;
use crate::model::ForwardOutput;
use crate::params::Graph;
use crate::tensor::{Real, Tensor};

/// Labels for frames (`levels[0]`) and every segment level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelHierarchy {
    pub levels: Vec<Vec<usize>>,
}

impl LabelHierarchy {
    pub fn frames(&self) -> &[usize] {
        &self.levels[0]
    }

    /// Segment levels `1..`.
    pub fn segments(&self) -> &[Vec<usize>] {
        &self.levels[1..]
    }
}

/// Majority label of each window of `k^i` frames, for `i` in `1..=m`.
/// Ties go to the class seen first in the window. Levels with no complete
/// window are omitted.
pub fn downsample_labels(y: &[usize], k: usize, m: usize) -> LabelHierarchy {
    assert!(!y.is_empty(), "cannot downsample an empty label sequence");
    assert!(k >= 2, "window must be at least 2");
    let classes = y.iter().max().map_or(0, |&c| c + 1);
    let mut levels = vec![y.to_vec()];
    let mut span = 1usize;
    for _ in 0..m {
        span = match span.checked_mul(k) {
            Some(s) if s <= y.len() => s,
            _ => break,
        };
        let mut counts = vec![0usize; classes];
        let level = y
            .chunks_exact(span)
            .map(|w| {
                counts.fill(0);
                for &c in w {
                    counts[c] += 1;
                }
                let best = *counts.iter().max().unwrap();
                *w.iter().find(|&&c| counts[c] == best).unwrap()
            })
            .collect();
        levels.push(level);
    }
    LabelHierarchy { levels }
}

fn one_hot<F: Real>(labels: &[usize], classes: usize) -> Tensor<F> {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (r, &c) in labels.iter().enumerate() {
        assert!(c < classes, "label {c} out of range for {classes} classes");
        t.data_mut()[r * classes + c] = F::one();
    }
    t
}

/// `-(1/T) Σ_t ln max(p_t[y_t], floor)` for probabilities `probs: [T × C]`.
fn mean_nll<F: Real>(g: &mut Graph<F>, probs: Var, labels: &[usize], floor: f64) -> Var {
    let (t, c) = (g.tape.shape(probs)[0], g.tape.shape(probs)[1]);
    assert_eq!(t, labels.len(), "{t} predictions but {} labels", labels.len());
    let target = g.input(one_hot(labels, c));
    let lp = g.tape.log(probs, F::of(floor));
    let picked = g.tape.mul(lp, target);
    let s = g.tape.sum(picked);
    g.tape.scale(s, F::of(-1.0 / t as f64))
}

/// Mean frame cross-entropy of `logits: [T × C]`.
pub fn frame_ce<F: Real>(g: &mut Graph<F>, logits: Var, labels: &[usize], floor: f64) -> Var {
    let probs = g.tape.softmax(logits, 1);
    mean_nll(g, probs, labels, floor)
}

fn zero<F: Real>(g: &mut Graph<F>) -> Var {
    g.input(Tensor::scalar(F::zero()))
}

fn weighted_sum<F: Real>(g: &mut Graph<F>, terms: Vec<Var>, weight: f64) -> Var {
    let mut acc = match terms.first() {
        Some(&v) => v,
        None => return zero(g),
    };
    for &v in &terms[1..] {
        acc = g.tape.add(acc, v);
    }
    g.tape.scale(acc, F::of(weight))
}

/// `β Σ_i (1/T^i) Σ_p CE(ŷ^i_p, y^i_p)` over the levels present in both lists.
pub fn segment_ce<F: Real>(g: &mut Graph<F>, logits: &[Var], labels: &LabelHierarchy, beta: f64, floor: f64) -> Var {
    let terms = logits
        .iter()
        .zip(labels.segments())
        .map(|(&l, y)| frame_ce(g, l, y, floor))
        .collect();
    weighted_sum(g, terms, beta)
}

/// `(1/(T·C)) Σ_t Σ_c (p_t,c − p_t+1,c)²`, zero when `T = 1`.
fn adjacent_penalty<F: Real>(g: &mut Graph<F>, probs: Var) -> Var {
    let (t, c) = (g.tape.shape(probs)[0], g.tape.shape(probs)[1]);
    if t < 2 {
        return zero(g);
    }
    let a = g.tape.slice_rows(probs, 0, t - 1);
    let b = g.tape.slice_rows(probs, 1, t);
    let d = g.tape.sub(a, b);
    let sq = g.tape.mul(d, d);
    let s = g.tape.sum(sq);
    g.tape.scale(s, F::of(1.0 / (t * c) as f64))
}

/// Smoothing penalty on frame probabilities plus `β` times the per-level
/// penalties on segment probabilities.
pub fn smooth_loss<F: Real>(g: &mut Graph<F>, frame_probs: Var, segment_probs: &[Var], beta: f64) -> Var {
    let frame = adjacent_penalty(g, frame_probs);
    let terms = segment_probs.iter().map(|&p| adjacent_penalty(g, p)).collect();
    let seg = weighted_sum(g, terms, beta);
    g.tape.add(frame, seg)
}

/// Handles and values of each objective term.
pub struct LossTerms {
    pub total: Var,
    pub frame: Var,
    pub segment: Var,
    /// Smoothing penalty before multiplication by `λ`.
    pub smooth: Var,
    pub breakdown: LossBreakdown,
}

/// Scalar values of the objective terms, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub frame: f64,
    pub segment: f64,
    pub smooth: f64,
    /// `λ · smooth`, the amount the penalty adds to `total`.
    pub smooth_weighted: f64,
    pub total: f64,
}

/// `frame_ce + segment_ce + λ · smooth_loss`.
pub fn total_loss<F: Real>(g: &mut Graph<F>, out: &ForwardOutput, labels: &LabelHierarchy, cfg: &LossConfig) -> LossTerms {
    let levels = out.segment_logits.len().min(labels.segments().len());
    for (i, (&l, y)) in out.segment_logits.iter().zip(labels.segments()).enumerate() {
        let n = g.tape.shape(l)[0];
        assert_eq!(n, y.len(), "level {} has {n} segments but {} labels", i + 1, y.len());
    }
    let frame_probs = g.tape.softmax(out.frame_logits, 1);
    let frame = mean_nll(g, frame_probs, labels.frames(), cfg.log_floor);
    let segment_probs: Vec<Var> = out.segment_logits[..levels]
        .iter()
        .map(|&l| g.tape.softmax(l, 1))
        .collect();
    let terms = segment_probs
        .iter()
        .zip(labels.segments())
        .map(|(&p, y)| mean_nll(g, p, y, cfg.log_floor))
        .collect();
    let segment = weighted_sum(g, terms, cfg.beta);
    let smooth = smooth_loss(g, frame_probs, &segment_probs, cfg.beta);
    let weighted = g.tape.scale(smooth, F::of(cfg.lambda));
    let sum = g.tape.add(frame, segment);
    let total = g.tape.add(sum, weighted);
    let value = |g: &Graph<F>, v: Var| g.value(v).item().as_f64();
    let breakdown = LossBreakdown {
        frame: value(g, frame),
        segment: value(g, segment),
        smooth: value(g, smooth),
        smooth_weighted: value(g, weighted),
        total: value(g, total),
    };
    LossTerms {
        total,
        frame,
        segment,
        smooth,
        breakdown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::params::{on_tape, Mode, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;


    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let v = f(&mut g);
        g.value(v).item()
    }

    #[test]
    fn downsampling_examples() {
        assert_eq!(downsample_labels(&[0, 0, 1], 3, 1).levels[1], vec![0]);
        assert_eq!(downsample_labels(&[2, 2, 3, 3], 4, 1).levels[1], vec![2]);
        assert_eq!(downsample_labels(&[3, 3, 2, 2], 4, 1).levels[1], vec![3]);
        let y: Vec<usize> = [0; 7].into_iter().chain([1; 7]).collect();
        assert_eq!(downsample_labels(&y, 7, 1).levels[1], vec![0, 1]);
        // level 2 would need 49 frames
        assert_eq!(downsample_labels(&y, 7, 3).levels.len(), 2);
    }

    proptest! {
        #[test]
        fn level_lengths_follow_floor(t in 1usize..400, k in 2usize..8, m in 1usize..4) {
            let y: Vec<usize> = (0..t).map(|i| i % 3).collect();
            let h = downsample_labels(&y, k, m);
            for (i, level) in h.levels.iter().enumerate() {
                prop_assert_eq!(level.len(), t / k.pow(i as u32));
                prop_assert!(!level.is_empty());
            }
        }

        #[test]
        fn single_class_survives_downsampling(t in 1usize..300, c in 0usize..9) {
            let h = downsample_labels(&vec![c; t], 3, 3);
            prop_assert!(h.levels.iter().flatten().all(|&v| v == c));
        }
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        for c in [7usize, 8] {
            let v = eval(|g| {
                let l = g.input(Tensor::zeros([5, c]));
                frame_ce(g, l, &[0, 1, 2, 3, 4], 1e-8)
            });
            assert!((v - (c as f64).ln()).abs() <= 1e-12, "C={c}: {v}");
        }
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let v = eval(|g| {
            let l = g.input(Tensor::from_rows(&[vec![60.0, 0.0], vec![0.0, 60.0]]));
            frame_ce(g, l, &[0, 1], 1e-8)
        });
        assert!(v >= 0.0 && v <= -(1.0f64 - 1e-8).ln() + 1e-15, "{v}");
    }

    #[test]
    fn segment_weight_zero_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = downsample_labels(&[0, 1, 2, 3, 0, 1, 2, 3, 1], 3, 2);
        let v = eval(|g| {
            let a = g.input(Tensor::new([3, 4], (0..12).map(|_| rng.random_range(-5.0..5.0)).collect()));
            let b = g.input(Tensor::new([1, 4], vec![1.0, -2.0, 0.5, 3.0]));
            segment_ce(g, &[a, b], &labels, 0.0, 1e-8)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn single_level_segment_loss_is_scaled_frame_loss() {
        let labels = downsample_labels(&[0, 0, 1, 1, 1, 2], 2, 1);
        let logits = Tensor::from_rows(&[vec![0.3, -0.2, 1.0], vec![2.0, 0.0, 0.1], vec![-1.0, 0.4, 0.4]]);
        let seg = eval(|g| {
            let l = g.input(logits.clone());
            segment_ce(g, &[l], &labels, 2.5, 1e-8)
        });
        let frame = eval(|g| {
            let l = g.input(logits.clone());
            frame_ce(g, l, &labels.levels[1], 1e-8)
        });
        assert!((seg - 2.5 * frame).abs() <= 1e-12);
    }

    #[test]
    fn uniform_segment_logits_sum_per_level() {
        let y: Vec<usize> = (0..40).map(|t| t % 8).collect();
        let labels = downsample_labels(&y, 2, 3);
        let v = eval(|g| {
            let ls: Vec<Var> = [20, 10, 5].iter().map(|&n| g.input(Tensor::zeros([n, 8]))).collect();
            segment_ce(g, &ls, &labels, 1.0, 1e-8)
        });
        assert!((v - 3.0 * 8f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn smoothing_examples() {
        let v = eval(|g| {
            let p = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
            smooth_loss(g, p, &[], 0.0)
        });
        assert_eq!(v, 0.5);
        let v = eval(|g| {
            let p = g.input(Tensor::from_rows(&vec![vec![0.3, 0.7]; 6]));
            let s = g.input(Tensor::from_rows(&vec![vec![0.1, 0.9]; 3]));
            smooth_loss(g, p, &[s], 1.0)
        });
        assert_eq!(v, 0.0);
        let v = eval(|g| {
            let p = g.input(Tensor::from_rows(&[vec![0.3, 0.7]]));
            smooth_loss(g, p, &[], 1.0)
        });
        assert_eq!(v, 0.0);
    }

    fn fake_output(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, base: Option<Var>) -> ForwardOutput {
        let mut rand = |g: &mut Graph<f64>, n: usize| {
            g.input(Tensor::new([n, 3], (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect()))
        };
        let frame_logits = match base {
            Some(v) => v,
            None => rand(g, 12),
        };
        let segment_logits = vec![rand(g, 6), rand(g, 3)];
        ForwardOutput {
            frame_logits,
            segment_logits,
            fused: frame_logits,
            frames: frame_logits,
            hierarchy: crate::model::Hierarchy { levels: vec![] },
        }
    }

    fn labels() -> LabelHierarchy {
        downsample_labels(&[0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 0, 0], 2, 2)
    }

    #[test]
    fn collapses_to_frame_loss_without_weights() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = fake_output(&mut g, &mut rng, None);
        let cfg = LossConfig {
            beta: 0.0,
            lambda: 0.0,
            ..LossConfig::default()
        };
        let terms = total_loss(&mut g, &out, &labels(), &cfg);
        let frame = frame_ce(&mut g, out.frame_logits, labels().frames(), 1e-8);
        assert_eq!(terms.breakdown.total, g.value(frame).item());
        assert_eq!(terms.breakdown.smooth_weighted, 0.0);
        assert!(terms.breakdown.smooth > 0.0);
    }

    #[test]
    fn smoothing_weight_is_linear() {
        let run = |lambda: f64| {
            let store = ParamStore::new();
            let mut g = Graph::new(&store, Mode::Eval, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let out = fake_output(&mut g, &mut rng, None);
            let cfg = LossConfig {
                lambda,
                ..LossConfig::default()
            };
            total_loss(&mut g, &out, &labels(), &cfg).breakdown
        };
        let (a, b) = (run(0.5), run(0.0));
        assert!((a.total - b.total - 0.5 * a.smooth).abs() <= 1e-12);
        assert!(a.total >= a.frame && a.frame >= 0.0 && a.segment >= 0.0 && a.smooth >= 0.0);
    }

    #[test]
    fn total_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = Tensor::new([12, 3], (0..36).map(|_| rng.random_range(-2.0..2.0)).collect());
            let seed = rng.random();
            let store = ParamStore::new();
            let err = grad_check(
                |tape, v| {
                    on_tape(tape, &store, Mode::Eval, 0, |g| {
                        let mut r = ChaCha8Rng::seed_from_u64(seed);
                        let out = fake_output(g, &mut r, Some(v));
                        total_loss(g, &out, &labels(), &LossConfig::default()).total
                    })
                },
                &x,
                1e-5,
            );
            assert!(err <= 1e-4, "relative error {err:e}");
        }
    }
}
