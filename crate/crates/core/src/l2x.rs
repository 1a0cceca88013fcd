//! The L2X baseline: Gumbel-softmax k-subset sampling, hard top-k selection
//! at test time, feature-level pooling (L2X-F) and the pixel-level variant
//! that masks the input image for a second convolution stack.

use crate::error::{Error, Result};
use crate::nn::{ConvStack, DenseLayer, Param};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Hyperparameters of the L2X baseline.
#[derive(Clone, Copy, Debug)]
pub struct L2xConfig {
    /// Fixed explanation size k.
    pub k: usize,
    /// Gumbel-softmax temperature tau.
    pub tau: f64,
}

impl Default for L2xConfig {
    fn default() -> Self {
        L2xConfig { k: 4, tau: 0.5 }
    }
}

impl L2xConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k > n {
            return Err(Error::Config(format!(
                "k must lie in 1..={n}, got {}",
                self.k
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Standard Gumbel samples g = -ln(-ln u), u uniform on the open unit
/// interval. Deterministic given the rng state.
pub fn sample_gumbel(count: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..count)
        .map(|_| {
            // gen() yields [0,1); reject the exact endpoint.
            let mut u: f64 = rng.gen();
            while u == 0.0 {
                u = rng.gen();
            }
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::vector(data)
}

/// Draws k independent relaxed one-hot samples c_j = softmax((logits+g_j)/tau)
/// and returns their elementwise maximum: a soft mask in [0,1]^n,
/// differentiable w.r.t. the logits (the noise is a constant of the graph).
pub fn gumbel_softmax_k_subset(
    tape: &mut Tape,
    logits: NodeId,
    cfg: &L2xConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let n = tape.value(logits).len();
    cfg.validate(n)?;
    let mut mask = None;
    for _ in 0..cfg.k {
        let noise = tape.leaf(sample_gumbel(n, rng));
        let noisy = tape.add(logits, noise)?;
        let sample = tape.scaled_softmax(noisy, 1.0 / cfg.tau)?;
        mask = Some(match mask {
            None => sample,
            Some(m) => tape.max2(m, sample)?,
        });
    }
    Ok(mask.expect("k >= 1"))
}

/// Binary mask selecting the k largest entries (ties break to the lowest
/// index). Test-time selection: no sampling.
pub fn topk_hard_mask(probs: &[f64], k: usize) -> Result<Vec<bool>> {
    let n = probs.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument {
            op: "topk_hard_mask",
            detail: format!("k must lie in 1..={n}, got {k}"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by descending value keeps the lowest index first on ties.
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
    let mut mask = vec![false; n];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Indices selected by the hard top-k mask, ascending.
pub fn topk_indices(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    Ok(topk_hard_mask(probs, k)?
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect())
}

/// v = sum_i m_i f_i / sum_i m_i over the flat [n,c] feature map; with a
/// hard top-k mask this is the mean of the k selected features.
pub fn l2xf_pool(tape: &mut Tape, flat_fmap: NodeId, mask: NodeId) -> Result<NodeId> {
    tape.mask_pool(flat_fmap, mask)
}

/// Nearest-neighbor block repetition of an [h,w] mask (value level).
pub fn upsample_repeat(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let [h, w] = match mask.shape()[..] {
        [h, w] => [h, w],
        _ => {
            return Err(Error::ShapeMismatch {
                op: "upsample_repeat",
                detail: format!("mask must be rank 2, got {:?}", mask.shape()),
            })
        }
    };
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = mask.data()[(oy / factor) * w + ox / factor];
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// Pixel-level L2X: an explainer convolution stack producing a 7x7 mask
/// over the input, which is upsampled (with repetition), multiplied into
/// the image, and classified by a second convolution stack.
#[derive(Clone, Debug)]
pub struct PixelL2x {
    pub explainer: ConvStack,
    /// 1x1 convolution mapping explainer features to inclusion logits.
    pub explainer_u: Param,
    pub classifier: ConvStack,
    pub head: DenseLayer,
    pub l2x: L2xConfig,
}

pub struct PixelBound {
    pub explainer: Vec<(NodeId, NodeId)>,
    pub explainer_u: NodeId,
    pub classifier: Vec<(NodeId, NodeId)>,
    pub head: (NodeId, NodeId),
}

pub struct PixelForward {
    /// Inclusion probabilities over the mask grid (length n).
    pub probs: Vec<f64>,
    pub grid: (usize, usize),
    pub logit: NodeId,
    pub prediction: NodeId,
}

impl PixelL2x {
    pub fn build(seed: u64, l2x: L2xConfig) -> Self {
        let mut rng = crate::train::param_rng(seed);
        let explainer = crate::nn::mnist_conv_stack(&mut rng, "pixel.explainer");
        let explainer_u = Param::new(
            "pixel.explainer.u",
            crate::train::glorot_uniform(vec![16], 16, 1, &mut rng),
        );
        let classifier = crate::nn::mnist_conv_stack(&mut rng, "pixel.classifier");
        let head = crate::nn::glorot_dense(&mut rng, "pixel.head", 16, 1);
        PixelL2x {
            explainer,
            explainer_u,
            classifier,
            head,
            l2x,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> PixelBound {
        let bind_stack = |tape: &mut Tape, s: &ConvStack| {
            s.layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.kernels.value.clone()),
                        tape.leaf(l.bias.value.clone()),
                    )
                })
                .collect::<Vec<_>>()
        };
        let explainer = bind_stack(tape, &self.explainer);
        let explainer_u = tape.leaf(self.explainer_u.value.clone());
        let classifier = bind_stack(tape, &self.classifier);
        let head = (
            tape.leaf(self.head.weights.value.clone()),
            tape.leaf(self.head.bias.value.clone()),
        );
        PixelBound {
            explainer,
            explainer_u,
            classifier,
            head,
        }
    }

    /// Forward pass. With `rng` given, training mode: the mask is a fresh
    /// Gumbel-softmax k-subset sample. Without, evaluation mode: the hard
    /// top-k mask of the inclusion probabilities.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &PixelBound,
        x: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<PixelForward> {
        let efmap = self.explainer.apply(tape, x, &bound.explainer)?;
        let shape = tape.value(efmap).shape().to_vec();
        let (h, w) = (shape[0], shape[1]);
        let logits = crate::bla::raw_scores(tape, efmap, bound.explainer_u)?;
        let probs = crate::tensor::scaled_softmax_value(tape.value(logits).data(), 1.0);

        let mask = match rng {
            Some(rng) => gumbel_softmax_k_subset(tape, logits, &self.l2x, rng)?,
            None => {
                let hard: Vec<f64> = topk_hard_mask(&probs, self.l2x.k)?
                    .iter()
                    .map(|&m| if m { 1.0 } else { 0.0 })
                    .collect();
                tape.leaf(Tensor::vector(hard))
            }
        };
        let xshape = tape.value(x).shape().to_vec();
        let factor = xshape[0] / h;
        let mask2 = tape.reshape(mask, vec![h, w, 1])?;
        let up = tape.upsample_repeat(mask2, factor)?;
        let masked = tape.mul(x, up)?;

        let cfmap = self.classifier.apply(tape, masked, &bound.classifier)?;
        let cshape = tape.value(cfmap).shape().to_vec();
        let cn = cshape[0] * cshape[1];
        let flat = tape.reshape(cfmap, vec![cn, cshape[2]])?;
        let uniform = tape.leaf(Tensor::vector(vec![1.0 / cn as f64; cn]));
        let pooled = tape.weighted_pool(flat, uniform)?;
        let logit = tape.dense(pooled, bound.head.0, bound.head.1)?;
        let prediction = tape.sigmoid(logit);
        Ok(PixelForward {
            probs,
            grid: (h, w),
            logit,
            prediction,
        })
    }

    pub fn named_params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.explainer.layers {
            out.push(&l.kernels);
            out.push(&l.bias);
        }
        out.push(&self.explainer_u);
        for l in &self.classifier.layers {
            out.push(&l.kernels);
            out.push(&l.bias);
        }
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.explainer.layers {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        out.push(&mut self.explainer_u);
        for l in &mut self.classifier.layers {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    pub fn bound_leaf_ids(bound: &PixelBound) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(k, b) in &bound.explainer {
            out.push(k);
            out.push(b);
        }
        out.push(bound.explainer_u);
        for &(k, b) in &bound.classifier {
            out.push(k);
            out.push(b);
        }
        out.push(bound.head.0);
        out.push(bound.head.1);
        out
    }
}
