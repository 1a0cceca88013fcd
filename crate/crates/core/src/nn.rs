//! The classifier architecture: convolutional feature extractor, pluggable
//! pooling, and a dense head with a sigmoid output unit.

use crate::bla::{self, BlaConfig};
use crate::error::{Error, Result};
use crate::l2x::L2xConfig;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::train::glorot_uniform;
use rand_chacha::ChaCha8Rng;

/// Named, optionally trainable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: true,
        }
    }
}

/// Spatial grid of convolutional feature vectors, viewed as the flat list
/// of n = h*w features of c channels each.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    /// Row-major [h, w, c] tensor.
    pub data: Tensor,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        match data.shape() {
            [h, w, c] => Ok(FeatureMap {
                grid: (*h, *w),
                channels: *c,
                data,
            }),
            other => Err(Error::ShapeMismatch {
                op: "FeatureMap::new",
                detail: format!("expected rank 3, got {other:?}"),
            }),
        }
    }

    pub fn n(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// The i-th feature vector (row-major spatial order).
    pub fn feature(&self, i: usize) -> &[f64] {
        let c = self.channels;
        &self.data.data()[i * c..(i + 1) * c]
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub kernels: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weights: Param,
    pub bias: Param,
}

/// Convolution stack: conv+ReLU layers, each optionally followed by 2x2
/// max pooling.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv2dLayer>,
    pub pool_after: Vec<bool>,
}

impl ConvStack {
    /// Applies the stack on the tape; `params` maps each layer to its
    /// already-registered (kernels, bias) leaf nodes.
    pub fn apply(&self, tape: &mut Tape, x: NodeId, params: &[(NodeId, NodeId)]) -> Result<NodeId> {
        let mut cur = x;
        for (i, _) in self.layers.iter().enumerate() {
            let (k, b) = params[i];
            cur = tape.conv2d_same(cur, k, b)?;
            cur = tape.relu(cur);
            if self.pool_after[i] {
                cur = tape.maxpool2(cur)?;
            }
        }
        Ok(cur)
    }
}

/// Which pooling operation connects the feature map to the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingMode {
    Average,
    Soft,
    Hard,
    Thresholded,
    L2xF,
}

/// Explanation module wired into the model, if any.
#[derive(Clone, Debug)]
pub enum Explainer {
    /// Bounded logit attention: 1x1 convolution u, beta activation.
    Bla { u: Param },
    /// BLA with an additive global concept vector (exploratory).
    GlobalConcept { concat_weights: Param, u: Param },
    /// Pointwise sigmoid weights, no global context (exploratory).
    PointwiseSigmoid { u: Param },
    /// L2X-F: 1x1-convolution inclusion logits, Gumbel-softmax k-subset.
    L2xF { u: Param },
}

/// Composition F (extractor), Q (optional explainer), L (head).
#[derive(Clone, Debug)]
pub struct Model {
    pub extractor: ConvStack,
    pub head: DenseLayer,
    pub explainer: Option<Explainer>,
    pub pooling: PoolingMode,
    pub bla: BlaConfig,
    pub l2x: L2xConfig,
    pub freeze_extractor: bool,
    pub freeze_head: bool,
    pub freeze_explainer: bool,
}

/// Everything the forward pass of one input exposes to callers.
pub struct ForwardPass {
    /// Node holding the [h,w,c] feature map.
    pub fmap: NodeId,
    pub grid: (usize, usize),
    pub channels: usize,
    /// Pre-activation explanation scores g (length n), when an explainer ran.
    pub scores: Option<NodeId>,
    /// Bounded logits l = beta(g), when a BLA-family explainer ran.
    pub logits: Option<NodeId>,
    /// Soft explanation q, when one was computed.
    pub q: Option<NodeId>,
    /// Pooled feature vector fed to the head.
    pub pooled: NodeId,
    /// Pre-sigmoid head output.
    pub logit: NodeId,
    /// Prediction sigmoid(logit) in (0,1).
    pub prediction: NodeId,
}

/// Leaf node ids of a model's parameters registered on a tape, in the
/// canonical parameter order.
pub struct BoundParams {
    pub conv: Vec<(NodeId, NodeId)>,
    pub head: (NodeId, NodeId),
    pub explainer: Vec<NodeId>,
}

impl Model {
    /// Registers every parameter as a tape leaf, in `named_params` order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let conv = self
            .extractor
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.kernels.value.clone()),
                    tape.leaf(l.bias.value.clone()),
                )
            })
            .collect();
        let head = (
            tape.leaf(self.head.weights.value.clone()),
            tape.leaf(self.head.bias.value.clone()),
        );
        let explainer = match &self.explainer {
            None => vec![],
            Some(Explainer::Bla { u })
            | Some(Explainer::PointwiseSigmoid { u })
            | Some(Explainer::L2xF { u }) => vec![tape.leaf(u.value.clone())],
            Some(Explainer::GlobalConcept { concat_weights, u }) => vec![
                tape.leaf(concat_weights.value.clone()),
                tape.leaf(u.value.clone()),
            ],
        };
        BoundParams {
            conv,
            head,
            explainer,
        }
    }

    /// Runs extractor, the model's training pooling mode, and the head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        self.forward_with(tape, bound, x, self.pooling, rng)
    }

    /// Runs extractor, the given pooling, and the head for one input.
    ///
    /// For `L2xF` pooling, `rng` selects the regime: with an rng the mask is
    /// a fresh Gumbel-softmax k-subset sample (training); without it the
    /// hard top-k mask of the inclusion probabilities is used (evaluation,
    /// no sampling).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: NodeId,
        pooling: PoolingMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let fmap = self.extractor.apply(tape, x, &bound.conv)?;
        let shape = tape.value(fmap).shape().to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let n = h * w;

        let mut scores = None;
        let mut logits = None;
        let mut q = None;

        let pooled = match pooling {
            PoolingMode::Average => {
                let flat = tape.reshape(fmap, vec![n, c])?;
                let uniform = tape.leaf(Tensor::vector(vec![1.0 / n as f64; n]));
                tape.weighted_pool(flat, uniform)?
            }
            PoolingMode::Soft | PoolingMode::Hard | PoolingMode::Thresholded => {
                let u = bound.explainer.last().copied().ok_or(Error::Config(
                    "attentive pooling requires an explanation module".into(),
                ))?;
                let lmap = match &self.explainer {
                    Some(Explainer::GlobalConcept { .. }) => bla::global_concept_logits(
                        tape,
                        fmap,
                        bound.explainer[0],
                        bound.explainer[1],
                    )?,
                    Some(Explainer::PointwiseSigmoid { .. }) => {
                        // Pointwise variant: weights sigma(g), normalized pooling.
                        let lmap = bla::bla_logits(tape, fmap, u)?;
                        scores = Some(lmap.g);
                        let weights = bla::pointwise_sigmoid_attention(tape, &lmap);
                        let flat = tape.reshape(fmap, vec![n, c])?;
                        let pooled = tape.mask_pool(flat, weights)?;
                        return self.finish(tape, bound, fmap, h, w, c, scores, None, None, pooled);
                    }
                    _ => bla::bla_logits(tape, fmap, u)?,
                };
                scores = Some(lmap.g);
                logits = Some(lmap.l);
                let flat = tape.reshape(fmap, vec![n, c])?;
                match pooling {
                    PoolingMode::Soft => {
                        let soft = bla::soft_attention(tape, &lmap, &self.bla)?;
                        q = Some(soft.q);
                        bla::soft_pool(tape, flat, &soft)?
                    }
                    PoolingMode::Thresholded => {
                        let soft = bla::soft_attention(tape, &lmap, &self.bla)?;
                        q = Some(soft.q);
                        bla::thresholded_pool(tape, flat, &soft, self.bla.gamma)?
                    }
                    _ => {
                        let soft = bla::soft_attention(tape, &lmap, &self.bla)?;
                        q = Some(soft.q);
                        let hard = bla::discretize_node(tape, lmap.l, (h, w));
                        bla::hard_pool(tape, flat, &hard)?
                    }
                }
            }
            PoolingMode::L2xF => {
                let u = bound.explainer.last().copied().ok_or(Error::Config(
                    "L2xF pooling requires an explanation module".into(),
                ))?;
                let inclusion_logits = crate::bla::raw_scores(tape, fmap, u)?;
                // Inclusion distribution, exported as the soft explanation.
                q = Some(tape.scaled_softmax(inclusion_logits, 1.0)?);
                scores = Some(inclusion_logits);
                let mask = match rng {
                    Some(rng) => crate::l2x::gumbel_softmax_k_subset(
                        tape,
                        inclusion_logits,
                        &self.l2x,
                        rng,
                    )?,
                    None => {
                        let probs = tape.value(q.unwrap()).data().to_vec();
                        let hard: Vec<f64> = crate::l2x::topk_hard_mask(&probs, self.l2x.k)?
                            .iter()
                            .map(|&m| f64::from(m as u8))
                            .collect();
                        tape.leaf(Tensor::vector(hard))
                    }
                };
                let flat = tape.reshape(fmap, vec![n, c])?;
                crate::l2x::l2xf_pool(tape, flat, mask)?
            }
        };
        self.finish(tape, bound, fmap, h, w, c, scores, logits, q, pooled)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        fmap: NodeId,
        h: usize,
        w: usize,
        c: usize,
        scores: Option<NodeId>,
        logits: Option<NodeId>,
        q: Option<NodeId>,
        pooled: NodeId,
    ) -> Result<ForwardPass> {
        let logit = tape.dense(pooled, bound.head.0, bound.head.1)?;
        let prediction = tape.sigmoid(logit);
        Ok(ForwardPass {
            fmap,
            grid: (h, w),
            channels: c,
            scores,
            logits,
            q,
            pooled,
            logit,
            prediction,
        })
    }

    /// Parameters in canonical (checkpoint) order.
    pub fn named_params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.extractor.layers {
            out.push(&l.kernels);
            out.push(&l.bias);
        }
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        match &self.explainer {
            None => {}
            Some(Explainer::Bla { u })
            | Some(Explainer::PointwiseSigmoid { u })
            | Some(Explainer::L2xF { u }) => out.push(u),
            Some(Explainer::GlobalConcept { concat_weights, u }) => {
                out.push(concat_weights);
                out.push(u);
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.extractor.layers {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        match &mut self.explainer {
            None => {}
            Some(Explainer::Bla { u })
            | Some(Explainer::PointwiseSigmoid { u })
            | Some(Explainer::L2xF { u }) => out.push(u),
            Some(Explainer::GlobalConcept { concat_weights, u }) => {
                out.push(concat_weights);
                out.push(u);
            }
        }
        out
    }

    /// Whether the parameter at canonical index `i` is currently trainable
    /// (its own flag and the freeze flag of the part it belongs to).
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for l in &self.extractor.layers {
            let t = !self.freeze_extractor;
            out.push(t && l.kernels.trainable);
            out.push(t && l.bias.trainable);
        }
        out.push(!self.freeze_head && self.head.weights.trainable);
        out.push(!self.freeze_head && self.head.bias.trainable);
        let ex = !self.freeze_explainer;
        match &self.explainer {
            None => {}
            Some(Explainer::GlobalConcept { .. }) => {
                out.push(ex);
                out.push(ex);
            }
            Some(_) => out.push(ex),
        }
        out
    }

    /// Leaf node ids in the same canonical order as `named_params`.
    pub fn bound_leaf_ids(bound: &BoundParams) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(k, b) in &bound.conv {
            out.push(k);
            out.push(b);
        }
        out.push(bound.head.0);
        out.push(bound.head.1);
        out.extend_from_slice(&bound.explainer);
        out
    }
}

/// The MNIST 3-vs-8 CNN: three same-padded 5x5 convolutions with ReLU
/// (8, 16, 16 filters), 2x2 max pooling after the first two, then a dense
/// 16 -> 1 head with a sigmoid output unit. Glorot-uniform initialization,
/// zero biases, deterministic per seed.
pub fn build_mnist_cnn(seed: u64) -> Model {
    let mut rng = crate::train::param_rng(seed);
    let extractor = mnist_conv_stack(&mut rng, "extractor");
    let head = glorot_dense(&mut rng, "head", 16, 1);
    Model {
        extractor,
        head,
        explainer: None,
        pooling: PoolingMode::Average,
        bla: BlaConfig::default(),
        l2x: L2xConfig::default(),
        freeze_extractor: false,
        freeze_head: false,
        freeze_explainer: false,
    }
}

pub(crate) fn mnist_conv_stack(rng: &mut ChaCha8Rng, prefix: &str) -> ConvStack {
    let specs: [(usize, usize); 3] = [(1, 8), (8, 16), (16, 16)];
    let mut layers = Vec::new();
    for (i, &(cin, cout)) in specs.iter().enumerate() {
        layers.push(glorot_conv(rng, &format!("{prefix}.conv{i}"), 5, 5, cin, cout));
    }
    ConvStack {
        layers,
        pool_after: vec![true, true, false],
    }
}

pub(crate) fn glorot_conv(
    rng: &mut ChaCha8Rng,
    name: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) -> Conv2dLayer {
    // Conv fans follow the kernel-area convention.
    let fan_in = kh * kw * cin;
    let fan_out = kh * kw * cout;
    Conv2dLayer {
        kernels: Param::new(
            format!("{name}.kernels"),
            glorot_uniform(vec![kh, kw, cin, cout], fan_in, fan_out, rng),
        ),
        bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![cout])),
    }
}

pub(crate) fn glorot_dense(rng: &mut ChaCha8Rng, name: &str, d: usize, m: usize) -> DenseLayer {
    DenseLayer {
        weights: Param::new(
            format!("{name}.weights"),
            glorot_uniform(vec![d, m], d, m, rng),
        ),
        bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![m])),
    }
}

/// Plain (non-tape) global average pooling of a feature map.
pub fn average_pool(fmap: &FeatureMap) -> Vec<f64> {
    let n = fmap.n();
    let c = fmap.channels;
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, v) in fmap.feature(i).iter().enumerate() {
            out[ch] += v;
        }
    }
    for v in &mut out {
        *v /= n as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_once(model: &Model, x: &Tensor, pooling: PoolingMode) -> (Vec<f64>, f64) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xi = tape.leaf(x.clone());
        let fwd = model
            .forward_with(&mut tape, &bound, xi, pooling, None)
            .unwrap();
        (
            tape.value(fwd.pooled).data().to_vec(),
            tape.value(fwd.prediction).item(),
        )
    }

    fn test_image(seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![28, 28, 1], (0..784).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn mnist_cnn_shapes_and_counts() {
        let model = build_mnist_cnn(0);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(test_image(1));
        let fwd = model.forward(&mut tape, &bound, x, None).unwrap();
        assert_eq!(tape.value(fwd.fmap).shape(), &[7, 7, 16]);
        assert_eq!(fwd.grid, (7, 7));
        assert_eq!(fwd.channels, 16);
        // Head parameter count 16*1 + 1 = 17.
        assert_eq!(
            model.head.weights.value.len() + model.head.bias.value.len(),
            17
        );
        // Prediction strictly inside (0,1).
        let p = tape.value(fwd.prediction).item();
        assert!(0.0 < p && p < 1.0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_mnist_cnn(3);
        let b = build_mnist_cnn(3);
        for (pa, pb) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(pa.name, pb.name);
            for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let c = build_mnist_cnn(4);
        let differs = a
            .named_params()
            .iter()
            .zip(c.named_params())
            .any(|(pa, pc)| pa.value.data() != pc.value.data());
        assert!(differs);
    }

    #[test]
    fn average_pool_examples() {
        // Constant map -> constant vector.
        let fmap = FeatureMap::new(Tensor::new(vec![2, 2, 3], vec![7.0; 12]).unwrap()).unwrap();
        assert_eq!(average_pool(&fmap), vec![7.0; 3]);

        // n=2, f=[[1,3],[5,7]] (c=2) -> [3,5].
        let fmap =
            FeatureMap::new(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap()).unwrap();
        assert_eq!(average_pool(&fmap), vec![3.0, 5.0]);

        // Equals hard_pool with delta = all-ones.
        let mut tape = Tape::new();
        let flat = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let hard = crate::bla::HardExplanation {
            delta: vec![true, true],
            grid: (1, 2),
        };
        let v = crate::bla::hard_pool(&mut tape, flat, &hard).unwrap();
        assert_eq!(tape.value(v).data(), &[3.0, 5.0]);
    }

    #[test]
    fn pooling_mode_equivalences() {
        // SOFT with q uniform (u = 0) == AVERAGE; HARD with full delta
        // (u = 0 makes every logit 0) == AVERAGE.
        let mut model = build_mnist_cnn(5);
        model.explainer = Some(Explainer::Bla {
            u: Param::new("explainer.bla.u", Tensor::zeros(vec![16])),
        });
        let x = test_image(6);
        let (avg, pa) = forward_once(&model, &x, PoolingMode::Average);
        let (soft, ps) = forward_once(&model, &x, PoolingMode::Soft);
        let (hard, ph) = forward_once(&model, &x, PoolingMode::Hard);
        for i in 0..16 {
            assert!((avg[i] - soft[i]).abs() < 1e-12);
            assert!((avg[i] - hard[i]).abs() < 1e-12);
        }
        assert!((pa - ps).abs() < 1e-12);
        assert!((pa - ph).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = build_mnist_cnn(7);
        let x = test_image(8);
        let (_, p1) = forward_once(&model, &x, PoolingMode::Average);
        let (_, p2) = forward_once(&model, &x, PoolingMode::Average);
        assert_eq!(p1.to_bits(), p2.to_bits());
    }

    #[test]
    fn attentive_pooling_without_explainer_errors() {
        let model = build_mnist_cnn(9);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(test_image(10));
        assert!(model
            .forward_with(&mut tape, &bound, x, PoolingMode::Soft, None)
            .is_err());
    }

    #[test]
    fn trainable_mask_respects_freeze_flags() {
        let mut model = build_mnist_cnn(11);
        model.explainer = Some(Explainer::Bla {
            u: Param::new("explainer.bla.u", Tensor::zeros(vec![16])),
        });
        assert!(model.trainable_mask().iter().all(|&t| t));
        model.freeze_extractor = true;
        model.freeze_head = true;
        let mask = model.trainable_mask();
        // 6 conv params + 2 head params frozen; the explainer last and live.
        assert_eq!(mask.len(), 9);
        assert!(mask[..8].iter().all(|&t| !t));
        assert!(mask[8]);
    }
}
