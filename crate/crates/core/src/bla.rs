//! Bounded logit attention: the explanation module Q, its discretization E,
//! and the soft / reweighed-hard / thresholded pooling variants, plus the two
//! exploratory alternatives (global concept vector, pointwise sigmoid).
//!
//! Training caveat: beta's subgradient at 0 is defined as 0, so a fully
//! saturated logit map (every l_i == 0, q exactly uniform) is an absorbing
//! state for the explainer — no gradient reaches `u` through saturated
//! positions. Some initialization seeds start near this state (post-relu
//! features are nonnegative, so the sign of u'f_i is highly correlated
//! across positions), and those runs keep degenerate all-ones explanations.

use crate::error::{Error, Result};
use crate::tensor::{argmax_first, NodeId, Tape, Tensor};

/// Hyperparameters of the BLA explanation module.
#[derive(Clone, Copy, Debug)]
pub struct BlaConfig {
    /// Softmax temperature theta.
    pub theta: f64,
    /// Threshold gamma for thresholded pooling; 1/n is the default.
    pub gamma: f64,
    /// Whether training uses thresholded pooling.
    pub thresholding: bool,
}

impl Default for BlaConfig {
    fn default() -> Self {
        BlaConfig {
            theta: 0.1,
            gamma: 1.0 / 49.0,
            thresholding: true,
        }
    }
}

impl BlaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta <= 0.0 {
            return Err(Error::Config(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0,1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Tape nodes of the explanation scores: g_i = u^T f_i and l_i = beta(g_i).
pub struct LogitMap {
    pub g: NodeId,
    pub l: NodeId,
    pub grid: (usize, usize),
}

/// Tape node of the soft explanation q = softmax(theta * l).
pub struct SoftAttn {
    pub q: NodeId,
    pub grid: (usize, usize),
}

/// Soft explanation values exported from a forward pass.
#[derive(Clone, Debug)]
pub struct SoftExplanation {
    pub q: Vec<f64>,
    pub grid: (usize, usize),
}

/// Hard explanation delta in 2^n. Guaranteed non-empty by the
/// argmax-logit fallback.
#[derive(Clone, Debug)]
pub struct HardExplanation {
    pub delta: Vec<bool>,
    pub grid: (usize, usize),
}

impl HardExplanation {
    /// Explanation size ||delta||_1.
    pub fn size(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }

    pub fn selected(&self) -> Vec<usize> {
        (0..self.delta.len()).filter(|&i| self.delta[i]).collect()
    }
}

/// 1x1 convolution with a single filter followed by the beta activation:
/// g_i = u^T f_i, l_i = beta(g_i). Differentiable in both u and the
/// feature map.
pub fn bla_logits(tape: &mut Tape, fmap: NodeId, u: NodeId) -> Result<LogitMap> {
    let (grid, g) = position_scores(tape, fmap, u)?;
    let l = tape.beta(g);
    Ok(LogitMap { g, l, grid })
}

/// Unbounded per-position scores g_i = u^T f_i (used by L2X-F logits).
pub fn raw_scores(tape: &mut Tape, fmap: NodeId, u: NodeId) -> Result<NodeId> {
    Ok(position_scores(tape, fmap, u)?.1)
}

fn position_scores(tape: &mut Tape, fmap: NodeId, u: NodeId) -> Result<((usize, usize), NodeId)> {
    let shape = tape.value(fmap).shape().to_vec();
    let [h, w, c] = match shape[..] {
        [h, w, c] => [h, w, c],
        _ => {
            return Err(Error::ShapeMismatch {
                op: "bla_logits",
                detail: format!("feature map must be rank 3, got {shape:?}"),
            })
        }
    };
    if tape.value(u).len() != c {
        return Err(Error::ShapeMismatch {
            op: "bla_logits",
            detail: format!("u has {} entries, feature map has {c} channels", tape.value(u).len()),
        });
    }
    let kernel = tape.reshape(u, vec![1, 1, c, 1])?;
    let zero_bias = tape.leaf(Tensor::zeros(vec![1]));
    let g3 = tape.conv2d_same(fmap, kernel, zero_bias)?;
    let g = tape.reshape(g3, vec![h * w])?;
    Ok(((h, w), g))
}

/// q = softmax(theta * l).
pub fn soft_attention(tape: &mut Tape, lmap: &LogitMap, cfg: &BlaConfig) -> Result<SoftAttn> {
    cfg.validate()?;
    let q = tape.scaled_softmax(lmap.l, cfg.theta)?;
    Ok(SoftAttn {
        q,
        grid: lmap.grid,
    })
}

/// v = sum_i q(i|f) f_i. `flat_fmap` is the [n,c] view of the feature map.
pub fn soft_pool(tape: &mut Tape, flat_fmap: NodeId, soft: &SoftAttn) -> Result<NodeId> {
    tape.weighted_pool(flat_fmap, soft.q)
}

/// delta_i = 1 iff l_i = 0. The comparison is exact: beta returns the
/// literal constant 0 for non-negative inputs. When every logit is
/// negative the argmax-logit position is selected instead (lowest index
/// on ties) so the hard explanation is never empty.
pub fn discretize(l: &[f64]) -> Vec<bool> {
    let mut delta: Vec<bool> = l.iter().map(|&x| x == 0.0).collect();
    if !delta.iter().any(|&d| d) {
        delta[argmax_first(l)] = true;
    }
    delta
}

/// Discretizes the logits recorded at `l` on the tape.
pub fn discretize_node(tape: &Tape, l: NodeId, grid: (usize, usize)) -> HardExplanation {
    HardExplanation {
        delta: discretize(tape.value(l).data()),
        grid,
    }
}

/// Reweighed pooling v = (1/||delta||_1) sum_i delta_i f_i.
pub fn hard_pool(tape: &mut Tape, flat_fmap: NodeId, hard: &HardExplanation) -> Result<NodeId> {
    tape.select_mean(flat_fmap, hard.selected())
}

/// Thresholded pooling v = sum_i 1[q(i|f) > gamma] f_i with the
/// straight-through surrogate backward (see `Tape::thresholded_pool`).
pub fn thresholded_pool(
    tape: &mut Tape,
    flat_fmap: NodeId,
    soft: &SoftAttn,
    gamma: f64,
) -> Result<NodeId> {
    tape.thresholded_pool(flat_fmap, soft.q, gamma)
}

/// Pointwise sigmoid weights w_i = sigma(g_i), the no-global-context
/// variant. Pooling normalizes by the weight total.
pub fn pointwise_sigmoid_attention(tape: &mut Tape, lmap: &LogitMap) -> NodeId {
    tape.sigmoid(lmap.g)
}

/// Logits with an additive global concept vector: the concatenated feature
/// map is linearly mapped to a concept vector which is added to every
/// feature before the 1x1 convolution, l_i = beta(u^T (concept + f_i)).
pub fn global_concept_logits(
    tape: &mut Tape,
    fmap: NodeId,
    concat_weights: NodeId,
    u: NodeId,
) -> Result<LogitMap> {
    let shape = tape.value(fmap).shape().to_vec();
    let [h, w, c] = match shape[..] {
        [h, w, c] => [h, w, c],
        _ => {
            return Err(Error::ShapeMismatch {
                op: "global_concept_logits",
                detail: format!("feature map must be rank 3, got {shape:?}"),
            })
        }
    };
    let n = h * w;
    let wshape = tape.value(concat_weights).shape().to_vec();
    if wshape != [n * c, c] {
        return Err(Error::ShapeMismatch {
            op: "global_concept_logits",
            detail: format!("concat weights must be [{}, {c}], got {wshape:?}", n * c),
        });
    }
    let flat = tape.reshape(fmap, vec![n * c])?;
    let zero_bias = tape.leaf(Tensor::zeros(vec![c]));
    let concept = tape.dense(flat, concat_weights, zero_bias)?;
    // Broadcast the concept vector over the n positions.
    let tiled = tape.concat(&vec![concept; n]);
    let tiled = tape.reshape(tiled, vec![h, w, c])?;
    let shifted = tape.add(fmap, tiled)?;
    bla_logits(tape, shifted, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmap_leaf(tape: &mut Tape, h: usize, w: usize, c: usize, data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::new(vec![h, w, c], data).unwrap())
    }

    #[test]
    fn bla_logits_examples() {
        let mut tape = Tape::new();
        // u = 0 -> g = 0, l = 0 everywhere.
        let f = fmap_leaf(&mut tape, 2, 2, 3, (0..12).map(f64::from).collect());
        let u = tape.leaf(Tensor::vector(vec![0.0; 3]));
        let lm = bla_logits(&mut tape, f, u).unwrap();
        assert_eq!(tape.value(lm.g).data(), &[0.0; 4]);
        assert_eq!(tape.value(lm.l).data(), &[0.0; 4]);

        // c=1, f=[2,-3], u=[1] -> g=[2,-3], l=[0,-3].
        let f = fmap_leaf(&mut tape, 1, 2, 1, vec![2.0, -3.0]);
        let u = tape.leaf(Tensor::vector(vec![1.0]));
        let lm = bla_logits(&mut tape, f, u).unwrap();
        assert_eq!(tape.value(lm.g).data(), &[2.0, -3.0]);
        assert_eq!(tape.value(lm.l).data(), &[0.0, -3.0]);

        // Channel mismatch is an error.
        let u = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        assert!(bla_logits(&mut tape, f, u).is_err());
    }

    #[test]
    fn bla_logits_gradient_wrt_u() {
        // Inputs chosen with no g_i near 0; grad of sum(l) vs finite diffs.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fdata: Vec<f64> = (0..3 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u0 = Tensor::vector(vec![1.3, -0.7, 0.9, -1.1]);
        {
            // Ensure no score is near zero for this fixture.
            let mut tape = Tape::new();
            let f = fmap_leaf(&mut tape, 3, 3, 4, fdata.clone());
            let u = tape.leaf(u0.clone());
            let lm = bla_logits(&mut tape, f, u).unwrap();
            assert!(tape.value(lm.g).data().iter().all(|g| g.abs() > 1e-3));
        }
        let err = crate::tensor::grad_check(
            move |tape, u| {
                let f = fmap_leaf(tape, 3, 3, 4, fdata.clone());
                let lm = bla_logits(tape, f, u).unwrap();
                tape.sum(lm.l)
            },
            &u0,
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn soft_attention_examples() {
        let cfg = BlaConfig::default();
        let mut tape = Tape::new();
        // l = 0 everywhere, n = 49 -> uniform 1/49.
        let f = fmap_leaf(&mut tape, 7, 7, 1, vec![1.0; 49]);
        let u = tape.leaf(Tensor::vector(vec![0.0]));
        let lm = bla_logits(&mut tape, f, u).unwrap();
        let soft = soft_attention(&mut tape, &lm, &cfg).unwrap();
        for &qi in tape.value(soft.q).data() {
            assert!((qi - 1.0 / 49.0).abs() < 1e-15);
        }

        // l = [0, 0, -10], theta = 1: two near-equal masses, third ~ e^-10.
        let f = fmap_leaf(&mut tape, 1, 3, 1, vec![1.0, 2.0, -10.0]);
        let u = tape.leaf(Tensor::vector(vec![1.0]));
        let lm = bla_logits(&mut tape, f, u).unwrap();
        let cfg1 = BlaConfig { theta: 1.0, ..cfg };
        let soft = soft_attention(&mut tape, &lm, &cfg1).unwrap();
        let q = tape.value(soft.q).data();
        assert!((q[0] - q[1]).abs() < 1e-15);
        assert!((q[2] / q[0] - (-10.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn soft_attention_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let l: Vec<f64> = (0..6).map(|_| -rng.gen_range(0.0..5.0f64)).collect();
            let q = crate::tensor::scaled_softmax_value(&l, 0.1);
            for i in 0..6 {
                for j in 0..6 {
                    if l[i] > l[j] {
                        assert!(q[i] > q[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn soft_pool_examples() {
        let mut tape = Tape::new();
        let flat = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());

        // Uniform q equals the average.
        let soft = SoftAttn {
            q: tape.leaf(Tensor::vector(vec![1.0 / 3.0; 3])),
            grid: (1, 3),
        };
        let v = soft_pool(&mut tape, flat, &soft).unwrap();
        assert!((tape.value(v).data()[0] - 3.0).abs() < 1e-15);
        assert!((tape.value(v).data()[1] - 4.0).abs() < 1e-15);

        // One-hot q selects that feature.
        let soft = SoftAttn {
            q: tape.leaf(Tensor::vector(vec![0.0, 0.0, 1.0])),
            grid: (1, 3),
        };
        let v = soft_pool(&mut tape, flat, &soft).unwrap();
        assert_eq!(tape.value(v).data(), &[5.0, 6.0]);

        // Random case against the direct weighted-sum oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let fd: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qd: Vec<f64> = {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        };
        let flat = tape.leaf(Tensor::new(vec![4, 2], fd.clone()).unwrap());
        let soft = SoftAttn {
            q: tape.leaf(Tensor::vector(qd.clone())),
            grid: (2, 2),
        };
        let v = soft_pool(&mut tape, flat, &soft).unwrap();
        for ch in 0..2 {
            let oracle: f64 = (0..4).map(|i| qd[i] * fd[i * 2 + ch]).sum();
            assert!((tape.value(v).data()[ch] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(
            discretize(&[0.0, -0.5, 0.0, -3.0]),
            vec![true, false, true, false]
        );
        // Fallback: all-negative logits select the argmax position.
        assert_eq!(discretize(&[-1.0, -2.0]), vec![true, false]);
        // All-zero logits select everything; hard pool then averages.
        assert_eq!(discretize(&[0.0; 4]), vec![true; 4]);
    }

    #[test]
    fn hard_pool_examples() {
        let mut tape = Tape::new();
        let flat = tape.leaf(Tensor::new(vec![3, 1], vec![0.0, 6.0, 100.0]).unwrap());

        let all = HardExplanation {
            delta: vec![true; 3],
            grid: (1, 3),
        };
        let v = hard_pool(&mut tape, flat, &all).unwrap();
        let avg = (0.0 + 6.0 + 100.0) / 3.0;
        assert!((tape.value(v).data()[0] - avg).abs() < 1e-12);

        let onehot = HardExplanation {
            delta: vec![false, true, false],
            grid: (1, 3),
        };
        let v = hard_pool(&mut tape, flat, &onehot).unwrap();
        assert_eq!(tape.value(v).data(), &[6.0]);

        let two = HardExplanation {
            delta: vec![true, true, false],
            grid: (1, 3),
        };
        let v = hard_pool(&mut tape, flat, &two).unwrap();
        assert_eq!(tape.value(v).data(), &[3.0]);
    }

    #[test]
    fn thresholded_pool_examples() {
        let mut tape = Tape::new();
        // n=4, gamma=1/4, unit features: two positions pass -> [2.0].
        let flat = tape.leaf(Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap());
        let soft = SoftAttn {
            q: tape.leaf(Tensor::vector(vec![0.4, 0.3, 0.2, 0.1])),
            grid: (2, 2),
        };
        let v = thresholded_pool(&mut tape, flat, &soft, 0.25).unwrap();
        assert_eq!(tape.value(v).data(), &[2.0]);

        // Uniform q, gamma slightly below 1/n: all pass, v = n * average.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let fd: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let flat = tape.leaf(Tensor::new(vec![4, 2], fd.clone()).unwrap());
        let soft = SoftAttn {
            q: tape.leaf(Tensor::vector(vec![0.25; 4])),
            grid: (2, 2),
        };
        let v = thresholded_pool(&mut tape, flat, &soft, 0.25 * (1.0 - 1e-9)).unwrap();
        for ch in 0..2 {
            let sum: f64 = (0..4).map(|i| fd[i * 2 + ch]).sum();
            assert!((tape.value(v).data()[ch] - sum).abs() < 1e-12);
        }

        // Random case against the direct masked-sum oracle.
        for trial in 0..20 {
            let fd: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qd: Vec<f64> = {
                let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            };
            let gamma = rng.gen_range(0.0..0.5);
            let flat = tape.leaf(Tensor::new(vec![5, 2], fd.clone()).unwrap());
            let soft = SoftAttn {
                q: tape.leaf(Tensor::vector(qd.clone())),
                grid: (1, 5),
            };
            let v = thresholded_pool(&mut tape, flat, &soft, gamma).unwrap();
            let passing: Vec<usize> = (0..5).filter(|&i| qd[i] > gamma).collect();
            let idx = if passing.is_empty() {
                vec![argmax_first(&qd)]
            } else {
                passing
            };
            for ch in 0..2 {
                let oracle: f64 = idx.iter().map(|&i| fd[i * 2 + ch]).sum();
                assert!(
                    (tape.value(v).data()[ch] - oracle).abs() < 1e-12,
                    "trial {trial}"
                );
            }
        }
    }

    #[test]
    fn pointwise_sigmoid_examples() {
        let mut tape = Tape::new();
        // g = 0 -> all weights 0.5, normalized pooling equals the average.
        let f = fmap_leaf(&mut tape, 2, 2, 2, (0..8).map(f64::from).collect());
        let u = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let lm = bla_logits(&mut tape, f, u).unwrap();
        let w = pointwise_sigmoid_attention(&mut tape, &lm);
        assert_eq!(tape.value(w).data(), &[0.5; 4]);
        let flat = tape.reshape(f, vec![4, 2]).unwrap();
        let pooled = tape.mask_pool(flat, w).unwrap();
        assert_close_slice(tape.value(pooled).data(), &[3.0, 4.0], 1e-12);

        // g = [10, -10] -> w ~ [1, 4.5e-5]; strictly inside (0,1).
        let f = fmap_leaf(&mut tape, 1, 2, 1, vec![10.0, -10.0]);
        let u = tape.leaf(Tensor::vector(vec![1.0]));
        let lm = bla_logits(&mut tape, f, u).unwrap();
        let w = pointwise_sigmoid_attention(&mut tape, &lm);
        let wd = tape.value(w).data();
        assert!((wd[0] - 1.0).abs() < 1e-4);
        assert!((wd[1] - 4.5e-5).abs() < 1e-6);
        assert!(wd.iter().all(|&v| 0.0 < v && v < 1.0));
    }

    fn assert_close_slice(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn global_concept_examples() {
        let mut tape = Tape::new();
        let (h, w, c) = (2, 2, 2);
        let n = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let fd: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = fmap_leaf(&mut tape, h, w, c, fd.clone());
        let u = tape.leaf(Tensor::vector(vec![0.7, -0.4]));

        // Zero concat weights reduce exactly to bla_logits.
        let zero_w = tape.leaf(Tensor::zeros(vec![n * c, c]));
        let lm = global_concept_logits(&mut tape, f, zero_w, u).unwrap();
        let plain = bla_logits(&mut tape, f, u).unwrap();
        assert_eq!(tape.value(lm.l).data(), tape.value(plain.l).data());
        assert_eq!(tape.value(lm.l).len(), n);

        // u = 0 -> l = 0 everywhere.
        let wts = tape.leaf(Tensor::new(
            vec![n * c, c],
            (0..n * c * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap());
        let zero_u = tape.leaf(Tensor::vector(vec![0.0; c]));
        let lm = global_concept_logits(&mut tape, f, wts, zero_u).unwrap();
        assert_eq!(tape.value(lm.l).data(), &[0.0; 4]);

        // Shape error on wrong concat weights.
        let bad = tape.leaf(Tensor::zeros(vec![3, c]));
        assert!(global_concept_logits(&mut tape, f, bad, u).is_err());
    }

    /// q restricted to the selected set (pre-fallback) is uniform within
    /// 1e-12, and min selected q > max unselected q.
    #[test]
    fn selected_uniformity_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..500 {
            let n = rng.gen_range(2..50);
            let l: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        0.0
                    } else {
                        -rng.gen_range(0.001..10.0f64)
                    }
                })
                .collect();
            if !l.iter().any(|&x| x == 0.0) {
                continue;
            }
            let q = crate::tensor::scaled_softmax_value(&l, 0.1);
            let sel: Vec<f64> = l
                .iter()
                .zip(&q)
                .filter(|(&li, _)| li == 0.0)
                .map(|(_, &qi)| qi)
                .collect();
            let unsel: Vec<f64> = l
                .iter()
                .zip(&q)
                .filter(|(&li, _)| li != 0.0)
                .map(|(_, &qi)| qi)
                .collect();
            for w in sel.windows(2) {
                assert!((w[0] - w[1]).abs() < 1e-12);
            }
            if !unsel.is_empty() {
                let min_sel = sel.iter().cloned().fold(f64::INFINITY, f64::min);
                let max_unsel = unsel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(min_sel > max_unsel);
            }
        }
    }

    /// Positive rescaling of u leaves delta unchanged.
    #[test]
    fn scale_covariance_of_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..50 {
            let fd: Vec<f64> = (0..9 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ud: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scale = rng.gen_range(0.1..10.0);
            let mut deltas = Vec::new();
            for u in [ud.clone(), ud.iter().map(|x| x * scale).collect()] {
                let mut tape = Tape::new();
                let f = fmap_leaf(&mut tape, 3, 3, 3, fd.clone());
                let un = tape.leaf(Tensor::vector(u));
                let lm = bla_logits(&mut tape, f, un).unwrap();
                deltas.push(discretize(tape.value(lm.l).data()));
            }
            assert_eq!(deltas[0], deltas[1]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(BlaConfig::default().validate().is_ok());
        assert!(BlaConfig {
            theta: 0.0,
            ..BlaConfig::default()
        }
        .validate()
        .is_err());
        assert!(BlaConfig {
            gamma: 1.0,
            ..BlaConfig::default()
        }
        .validate()
        .is_err());
        assert!(BlaConfig {
            gamma: -0.1,
            ..BlaConfig::default()
        }
        .validate()
        .is_err());
    }
}
