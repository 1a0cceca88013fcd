//! Training and evaluation: Adam, Glorot initialization, the training modes
//! (BL, BLA, BLA-T, BLA-PH, L2X-F, pixel L2X), metrics, and run records.

use crate::bla::{self, BlaConfig, HardExplanation, SoftExplanation};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::l2x::{L2xConfig, PixelL2x};
use crate::nn::{self, Explainer, Model, Param, PoolingMode};
use crate::tensor::{argmax_first, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Training mode of an experiment run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Baseline: average pooling, no explanation module.
    Bl,
    /// Bounded logit attention, end-to-end.
    Bla,
    /// BLA with thresholded pooling and the wider gamma.
    BlaT,
    /// Post-hoc BLA: extractor and head frozen, from a trained BL checkpoint.
    BlaPh,
    /// Feature-level L2X with fixed explanation size k.
    L2xF,
    /// Pixel-level L2X with a second convolution stack.
    L2xPixel,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "bl" => Mode::Bl,
            "bla" => Mode::Bla,
            "bla-t" | "blat" => Mode::BlaT,
            "bla-ph" | "blaph" => Mode::BlaPh,
            "l2xf" | "l2x-f" => Mode::L2xF,
            "l2x-pixel" | "l2xpixel" => Mode::L2xPixel,
            other => return Err(Error::Config(format!("unknown mode '{other}'"))),
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Bl => "bl",
            Mode::Bla => "bla",
            Mode::BlaT => "bla-t",
            Mode::BlaPh => "bla-ph",
            Mode::L2xF => "l2xf",
            Mode::L2xPixel => "l2x-pixel",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full configuration of one training run.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub bla: BlaConfig,
    pub l2x: L2xConfig,
}

impl ExperimentConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        let bla = match mode {
            // BLA-T uses the wider threshold from the large-scale recipe.
            Mode::BlaT => BlaConfig {
                gamma: 0.02,
                ..BlaConfig::default()
            },
            _ => BlaConfig::default(),
        };
        ExperimentConfig {
            mode,
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 32,
            seed,
            bla,
            l2x: L2xConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bla.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical config string, for run records.
    pub fn hash(&self) -> u64 {
        let s = format!(
            "mode={} epochs={} lr={} batch={} seed={} theta={} gamma={} thresholding={} k={} tau={}",
            self.mode,
            self.epochs,
            self.learning_rate,
            self.batch_size,
            self.seed,
            self.bla.theta,
            self.bla.gamma,
            self.bla.thresholding,
            self.l2x.k,
            self.l2x.tau
        );
        let mut h: u64 = 0xcbf29ce484222325;
        for b in s.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// A trained (or in-training) network of either architecture family.
#[derive(Clone, Debug)]
pub enum Network {
    Standard(Model),
    Pixel(PixelL2x),
}

impl Network {
    pub fn named_params(&self) -> Vec<&Param> {
        match self {
            Network::Standard(m) => m.named_params(),
            Network::Pixel(p) => p.named_params(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Network::Standard(m) => m.named_params_mut(),
            Network::Pixel(p) => p.named_params_mut(),
        }
    }

    pub fn as_standard(&self) -> Result<&Model> {
        match self {
            Network::Standard(m) => Ok(m),
            Network::Pixel(_) => Err(Error::Config(
                "operation requires a standard (non-pixel) model".into(),
            )),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let params: Vec<(&str, &Tensor)> = self
            .named_params()
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        crate::checkpoint::save_checkpoint(path, &params)
    }

    /// Rebuilds a network from checkpoint parameters. The explainer variant
    /// is carried by the parameter names; pooling defaults to the variant's
    /// natural mode and hyperparameters come from the configs.
    pub fn from_params(
        params: Vec<(String, Tensor)>,
        bla_cfg: BlaConfig,
        l2x_cfg: L2xConfig,
        path: &std::path::Path,
    ) -> Result<Network> {
        let missing = |name: &str| Error::BadCheckpoint {
            path: path.into(),
            detail: format!("missing parameter '{name}'"),
        };
        let find = |name: &str| -> Option<Tensor> {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
        };
        if find("pixel.head.bias").is_some() {
            let mut net = PixelL2x::build(0, l2x_cfg);
            for p in net.named_params_mut() {
                p.value = find(&p.name).ok_or_else(|| missing(&p.name))?;
            }
            return Ok(Network::Pixel(net));
        }

        let conv_layer = |prefix: &str| -> Result<nn::Conv2dLayer> {
            Ok(nn::Conv2dLayer {
                kernels: Param::new(
                    format!("{prefix}.kernels"),
                    find(&format!("{prefix}.kernels"))
                        .ok_or_else(|| missing(&format!("{prefix}.kernels")))?,
                ),
                bias: Param::new(
                    format!("{prefix}.bias"),
                    find(&format!("{prefix}.bias"))
                        .ok_or_else(|| missing(&format!("{prefix}.bias")))?,
                ),
            })
        };
        let mut layers = Vec::new();
        let mut i = 0;
        while find(&format!("extractor.conv{i}.kernels")).is_some() {
            layers.push(conv_layer(&format!("extractor.conv{i}"))?);
            i += 1;
        }
        if layers.is_empty() {
            return Err(missing("extractor.conv0.kernels"));
        }
        let mut pool_after = vec![true; layers.len()];
        *pool_after.last_mut().unwrap() = false;
        let extractor = nn::ConvStack { layers, pool_after };
        let head = nn::DenseLayer {
            weights: Param::new("head.weights", find("head.weights").ok_or_else(|| missing("head.weights"))?),
            bias: Param::new("head.bias", find("head.bias").ok_or_else(|| missing("head.bias"))?),
        };
        let (explainer, pooling) = if let Some(u) = find("explainer.bla.u") {
            (
                Some(Explainer::Bla {
                    u: Param::new("explainer.bla.u", u),
                }),
                PoolingMode::Soft,
            )
        } else if let Some(u) = find("explainer.l2xf.u") {
            (
                Some(Explainer::L2xF {
                    u: Param::new("explainer.l2xf.u", u),
                }),
                PoolingMode::L2xF,
            )
        } else if let Some(u) = find("explainer.pointwise.u") {
            (
                Some(Explainer::PointwiseSigmoid {
                    u: Param::new("explainer.pointwise.u", u),
                }),
                PoolingMode::Soft,
            )
        } else if let Some(u) = find("explainer.concept.u") {
            (
                Some(Explainer::GlobalConcept {
                    concat_weights: Param::new(
                        "explainer.concept.weights",
                        find("explainer.concept.weights")
                            .ok_or_else(|| missing("explainer.concept.weights"))?,
                    ),
                    u: Param::new("explainer.concept.u", u),
                }),
                PoolingMode::Soft,
            )
        } else {
            (None, PoolingMode::Average)
        };
        Ok(Network::Standard(Model {
            extractor,
            head,
            explainer,
            pooling,
            bla: bla_cfg,
            l2x: l2x_cfg,
            freeze_extractor: false,
            freeze_head: false,
            freeze_explainer: false,
        }))
    }

    pub fn load(
        path: &std::path::Path,
        bla_cfg: BlaConfig,
        l2x_cfg: L2xConfig,
    ) -> Result<Network> {
        let params = crate::checkpoint::load_checkpoint(path)?;
        Network::from_params(params, bla_cfg, l2x_cfg, path)
    }
}

/// Dedicated rng streams so modes stay comparable seed-for-seed.
pub fn param_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 0)
}

pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 1)
}

pub fn gumbel_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 2)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform Glorot initialization on [-L, L], L = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Adam optimizer state for a fixed set of parameters.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over parallel slices of parameters and gradients.
pub fn adam_step(
    params: &mut [&mut Param],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        let g = grads[i];
        if g.len() != param.value.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "param '{}' has {} entries, gradient has {}",
                    param.name,
                    param.value.len(),
                    g.len()
                ),
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = param.value.data_mut();
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Which pooling to use at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPooling {
    Average,
    Soft,
    Hard,
    Thresholded,
    TopK,
}

impl EvalPooling {
    pub fn parse(s: &str) -> Result<EvalPooling> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "average" | "avg" => EvalPooling::Average,
            "soft" => EvalPooling::Soft,
            "hard" => EvalPooling::Hard,
            "thresholded" => EvalPooling::Thresholded,
            "topk" | "top-k" => EvalPooling::TopK,
            other => return Err(Error::Config(format!("unknown pooling '{other}'"))),
        })
    }

    fn as_mode(self) -> PoolingMode {
        match self {
            EvalPooling::Average => PoolingMode::Average,
            EvalPooling::Soft => PoolingMode::Soft,
            EvalPooling::Hard => PoolingMode::Hard,
            EvalPooling::Thresholded => PoolingMode::Thresholded,
            EvalPooling::TopK => PoolingMode::L2xF,
        }
    }

    /// Hard-explanation evaluation for the mode, per the reporting rule
    /// that validation metrics always use the discretized explanations.
    pub fn reporting_for(mode: Mode) -> EvalPooling {
        match mode {
            Mode::Bl => EvalPooling::Average,
            Mode::Bla | Mode::BlaT | Mode::BlaPh => EvalPooling::Hard,
            Mode::L2xF | Mode::L2xPixel => EvalPooling::TopK,
        }
    }
}

/// Per-epoch measurements.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub history: Vec<EpochStats>,
    pub size_mean: f64,
    pub size_std: f64,
    pub wall_secs: f64,
}

impl RunResult {
    /// One-line record: config hash, seed, metrics, explanation-size stats.
    /// Deliberately excludes wall-clock so identical runs serialize
    /// identically.
    pub fn to_record(&self) -> String {
        format!(
            "mode={} seed={} config={:016x} accuracy={} loss={} size_mean={} size_std={}",
            self.mode,
            self.seed,
            self.config_hash,
            self.accuracy,
            self.loss,
            self.size_mean,
            self.size_std
        )
    }

    pub fn parse_record(line: &str) -> Result<RunResult> {
        let mut fields = std::collections::HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed record field '{part}'")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("record missing field '{k}'")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad number in field '{k}'")))
        };
        Ok(RunResult {
            mode: Mode::parse(get("mode")?)?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Config("bad seed".into()))?,
            config_hash: u64::from_str_radix(get("config")?, 16)
                .map_err(|_| Error::Config("bad config hash".into()))?,
            accuracy: num("accuracy")?,
            loss: num("loss")?,
            history: vec![],
            size_mean: num("size_mean")?,
            size_std: num("size_std")?,
            wall_secs: 0.0,
        })
    }
}

/// Builds the untrained network for a mode. BLA-PH additionally needs the
/// trained baseline passed to `train`.
pub fn build_network(cfg: &ExperimentConfig) -> Network {
    match cfg.mode {
        Mode::L2xPixel => Network::Pixel(PixelL2x::build(cfg.seed, cfg.l2x)),
        _ => {
            let mut model = nn::build_mnist_cnn(cfg.seed);
            model.bla = cfg.bla;
            model.l2x = cfg.l2x;
            match cfg.mode {
                Mode::Bl => {}
                Mode::Bla | Mode::BlaT | Mode::BlaPh => {
                    let mut rng = stream_rng(cfg.seed, 3);
                    model.explainer = Some(Explainer::Bla {
                        u: Param::new(
                            "explainer.bla.u",
                            glorot_uniform(vec![16], 16, 1, &mut rng),
                        ),
                    });
                    model.pooling = if cfg.mode == Mode::BlaT || cfg.bla.thresholding {
                        PoolingMode::Thresholded
                    } else {
                        PoolingMode::Soft
                    };
                    if cfg.mode == Mode::BlaPh {
                        model.freeze_extractor = true;
                        model.freeze_head = true;
                    }
                }
                Mode::L2xF => {
                    let mut rng = stream_rng(cfg.seed, 3);
                    model.explainer = Some(Explainer::L2xF {
                        u: Param::new(
                            "explainer.l2xf.u",
                            glorot_uniform(vec![16], 16, 1, &mut rng),
                        ),
                    });
                    model.pooling = PoolingMode::L2xF;
                }
                Mode::L2xPixel => unreachable!(),
            }
            Network::Standard(model)
        }
    }
}

/// Trains a network per the config. `init` supplies the trained baseline
/// for BLA-PH (its extractor and head parameters are copied in and frozen).
pub fn train(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    init: Option<&Network>,
) -> Result<(Network, RunResult)> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let start = Instant::now();
    let mut net = build_network(cfg);

    if cfg.mode == Mode::BlaPh {
        let baseline = init
            .ok_or_else(|| Error::Config("bla-ph requires a trained baseline checkpoint".into()))?
            .as_standard()?;
        let model = match &mut net {
            Network::Standard(m) => m,
            Network::Pixel(_) => unreachable!(),
        };
        for (layer, src) in model
            .extractor
            .layers
            .iter_mut()
            .zip(&baseline.extractor.layers)
        {
            layer.kernels.value = src.kernels.value.clone();
            layer.bias.value = src.bias.value.clone();
        }
        model.head.weights.value = baseline.head.weights.value.clone();
        model.head.bias.value = baseline.head.bias.value.clone();
    } else if init.is_some() && cfg.mode != Mode::BlaPh {
        return Err(Error::Config(format!(
            "mode {} does not take an init checkpoint",
            cfg.mode
        )));
    }

    let trainable = match &net {
        Network::Standard(m) => m.trainable_mask(),
        Network::Pixel(p) => vec![true; p.named_params().len()],
    };
    let trainable_sizes: Vec<usize> = net
        .named_params()
        .iter()
        .zip(&trainable)
        .filter(|(_, &t)| t)
        .map(|(p, _)| p.value.len())
        .collect();
    let mut adam = AdamState::new(&trainable_sizes);

    let mut shuffle = shuffle_rng(cfg.seed);
    let mut gumbel = gumbel_rng(cfg.seed);
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let loss = train_batch(&mut net, cfg, train_ds, batch, &trainable, &mut adam, &mut gumbel)?;
            epoch_loss += loss;
            batches += 1;
        }
        let (val_accuracy, val_loss) =
            evaluate(&net, val_ds, EvalPooling::reporting_for(cfg.mode))?;
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_accuracy,
            val_loss,
        });
    }

    let (accuracy, loss) = evaluate(&net, val_ds, EvalPooling::reporting_for(cfg.mode))?;
    let (size_mean, size_std) = match cfg.mode {
        Mode::Bla | Mode::BlaT | Mode::BlaPh => {
            let sizes: Vec<f64> = explanation_sizes(net.as_standard()?, val_ds)?
                .iter()
                .map(|&s| s as f64)
                .collect();
            let n = sizes.len() as f64;
            let mean = sizes.iter().sum::<f64>() / n;
            let var = sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var.sqrt())
        }
        Mode::L2xF | Mode::L2xPixel => (cfg.l2x.k as f64, 0.0),
        Mode::Bl => (0.0, 0.0),
    };

    let result = RunResult {
        mode: cfg.mode,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        accuracy,
        loss,
        history,
        size_mean,
        size_std,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    Ok((net, result))
}

fn train_batch(
    net: &mut Network,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    batch: &[usize],
    trainable: &[bool],
    adam: &mut AdamState,
    gumbel: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (leaf_ids, loss_node) = match net {
        Network::Standard(model) => {
            let bound = model.bind(&mut tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let x = tape.leaf(ds.images[idx].clone());
                let rng = matches!(cfg.mode, Mode::L2xF).then_some(&mut *gumbel);
                let fwd = model.forward(&mut tape, &bound, x, rng)?;
                losses.push(tape.bce_with_logits(fwd.logit, ds.labels[idx] as f64)?);
            }
            let all = tape.concat(&losses);
            (Model::bound_leaf_ids(&bound), tape.mean(all))
        }
        Network::Pixel(model) => {
            let bound = model.bind(&mut tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let x = tape.leaf(ds.images[idx].clone());
                let fwd = model.forward(&mut tape, &bound, x, Some(gumbel))?;
                losses.push(tape.bce_with_logits(fwd.logit, ds.labels[idx] as f64)?);
            }
            let all = tape.concat(&losses);
            (PixelL2x::bound_leaf_ids(&bound), tape.mean(all))
        }
    };
    let loss = tape.value(loss_node).item();
    let grads = tape.backward(loss_node)?;

    let mut params = net.named_params_mut();
    let mut tparams: Vec<&mut Param> = Vec::new();
    let mut tgrads: Vec<&[f64]> = Vec::new();
    for (i, p) in params.drain(..).enumerate() {
        if trainable[i] {
            tparams.push(p);
            tgrads.push(grads.wrt(leaf_ids[i]));
        }
    }
    adam_step(&mut tparams, &tgrads, adam, cfg.learning_rate)?;
    Ok(loss)
}

/// Accuracy and mean binary cross-entropy on a dataset.
pub fn evaluate(net: &Network, ds: &Dataset, pooling: EvalPooling) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for i in 0..ds.len() {
        let mut tape = Tape::new();
        let (logit, loss) = match net {
            Network::Standard(model) => {
                let bound = model.bind(&mut tape);
                let x = tape.leaf(ds.images[i].clone());
                let fwd = model.forward_with(&mut tape, &bound, x, pooling.as_mode(), None)?;
                let loss = tape.bce_with_logits(fwd.logit, ds.labels[i] as f64)?;
                (tape.value(fwd.logit).item(), tape.value(loss).item())
            }
            Network::Pixel(model) => {
                let bound = model.bind(&mut tape);
                let x = tape.leaf(ds.images[i].clone());
                let fwd = model.forward(&mut tape, &bound, x, None)?;
                let loss = tape.bce_with_logits(fwd.logit, ds.labels[i] as f64)?;
                (tape.value(fwd.logit).item(), tape.value(loss).item())
            }
        };
        // prediction > 0.5 iff the pre-sigmoid logit is positive
        let predicted = u8::from(logit > 0.0);
        if predicted == ds.labels[i] {
            correct += 1;
        }
        loss_sum += loss;
    }
    Ok((
        correct as f64 / ds.len() as f64,
        loss_sum / ds.len() as f64,
    ))
}

/// Explanations, predictions and labels for every input of a dataset.
pub struct ExplainedInput {
    pub index: usize,
    pub prediction: f64,
    pub label: u8,
    pub soft: SoftExplanation,
    pub hard: HardExplanation,
}

/// Runs the explainer over a dataset and collects soft and hard
/// explanations (top-k hard masks for L2X-F models).
pub fn explain_dataset(model: &Model, ds: &Dataset) -> Result<Vec<ExplainedInput>> {
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        out.push(explain_input(model, ds, i)?);
    }
    Ok(out)
}

pub fn explain_input(model: &Model, ds: &Dataset, index: usize) -> Result<ExplainedInput> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.leaf(ds.images[index].clone());
    let pooling = match model.pooling {
        PoolingMode::Average => {
            return Err(Error::Config(
                "model has no explanation module to explain with".into(),
            ))
        }
        p => p,
    };
    let fwd = model.forward_with(&mut tape, &bound, x, pooling, None)?;
    let q_node = fwd
        .q
        .ok_or_else(|| Error::Config("forward pass produced no soft explanation".into()))?;
    let q = tape.value(q_node).data().to_vec();
    let hard = match fwd.logits {
        Some(l) => bla::discretize_node(&tape, l, fwd.grid),
        // L2X-F: the hard explanation is the top-k mask.
        None => HardExplanation {
            delta: crate::l2x::topk_hard_mask(&q, model.l2x.k)?,
            grid: fwd.grid,
        },
    };
    Ok(ExplainedInput {
        index,
        prediction: tape.value(fwd.prediction).item(),
        label: ds.labels[index],
        soft: SoftExplanation {
            q,
            grid: fwd.grid,
        },
        hard,
    })
}

/// Hard-explanation sizes ||delta||_1 over a dataset.
pub fn explanation_sizes(model: &Model, ds: &Dataset) -> Result<Vec<usize>> {
    Ok(explain_dataset(model, ds)?
        .iter()
        .map(|e| e.hard.size())
        .collect())
}

/// Fraction of inputs whose argmax-q cell (lowest index on ties) lies in
/// the ground-truth region.
pub fn localization_hit_rate(
    soft: &[SoftExplanation],
    masks: &[Vec<bool>],
) -> Result<f64> {
    if soft.is_empty() || soft.len() != masks.len() {
        return Err(Error::InvalidArgument {
            op: "localization_hit_rate",
            detail: format!("{} explanations vs {} masks", soft.len(), masks.len()),
        });
    }
    let mut hits = 0usize;
    for (s, m) in soft.iter().zip(masks) {
        if s.q.len() != m.len() {
            return Err(Error::ShapeMismatch {
                op: "localization_hit_rate",
                detail: format!("{} cells vs {} mask bits", s.q.len(), m.len()),
            });
        }
        if m[argmax_first(&s.q)] {
            hits += 1;
        }
    }
    Ok(hits as f64 / soft.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_planted_patch, Split};

    #[test]
    fn mode_parse_roundtrip() {
        for mode in [
            Mode::Bl,
            Mode::Bla,
            Mode::BlaT,
            Mode::BlaPh,
            Mode::L2xF,
            Mode::L2xPixel,
        ] {
            assert_eq!(Mode::parse(mode.as_str()).unwrap(), mode);
        }
        assert!(Mode::parse("nope").is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ExperimentConfig::new(Mode::Bla, 0);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.bla.theta, 0.1);
        assert!((cfg.bla.gamma - 1.0 / 49.0).abs() < 1e-15);
        // BLA-T preset switches to its own gamma.
        assert_eq!(ExperimentConfig::new(Mode::BlaT, 0).bla.gamma, 0.02);
        assert!(cfg.validate().is_ok());
        let mut bad = cfg.clone();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
        // The hash covers the hyperparameters.
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(cfg.hash(), other.hash());
        assert_eq!(cfg.hash(), cfg.clone().hash());
    }

    #[test]
    fn glorot_support_and_mean() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (fan_in, fan_out) = (30, 70);
        let limit = (6.0 / 100.0f64).sqrt();
        let t = glorot_uniform(vec![100_000], fan_in, fan_out, &mut rng);
        assert!(t.data().iter().all(|&v| (-limit..limit).contains(&v)));
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        // 3 standard errors of the uniform mean: 3 * (2L/sqrt(12)) / sqrt(n).
        let se = limit / 3.0f64.sqrt() / (t.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} vs se {se}");
    }

    #[test]
    fn adam_examples() {
        // Zero gradient leaves parameters unchanged.
        let mut p = Param::new("p", Tensor::vector(vec![1.0, -2.0]));
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut state, 1e-3).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);

        // First step moves by ~lr*sign(g) (within 1% for |g| >> eps).
        let mut p = Param::new("p", Tensor::vector(vec![1.0, -2.0]));
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [&mut p], &[&[0.5, -3.0]], &mut state, 1e-3).unwrap();
        assert!((p.value.data()[0] - (1.0 - 1e-3)).abs() < 1e-5);
        assert!((p.value.data()[1] - (-2.0 + 1e-3)).abs() < 1e-5);

        // Determinism: identical state and gradients give identical values.
        let run = || {
            let mut p = Param::new("p", Tensor::vector(vec![0.3]));
            let mut state = AdamState::new(&[1]);
            for g in [0.2, -0.7, 0.1] {
                adam_step(&mut [&mut p], &[&[g]], &mut state, 1e-3).unwrap();
            }
            p.value.data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());

        // Shape mismatch is an error.
        let mut p = Param::new("p", Tensor::vector(vec![1.0]));
        let mut state = AdamState::new(&[1]);
        assert!(adam_step(&mut [&mut p], &[&[1.0, 2.0]], &mut state, 1e-3).is_err());
    }

    #[test]
    fn run_record_roundtrip() {
        let r = RunResult {
            mode: Mode::BlaT,
            seed: 3,
            config_hash: 0xdead_beef_0123_4567,
            accuracy: 0.9921875,
            loss: 0.03125,
            history: vec![],
            size_mean: 4.5,
            size_std: 1.25,
            wall_secs: 12.0,
        };
        let line = r.to_record();
        let back = RunResult::parse_record(&line).unwrap();
        assert_eq!(back.mode, r.mode);
        assert_eq!(back.seed, r.seed);
        assert_eq!(back.config_hash, r.config_hash);
        assert_eq!(back.accuracy, r.accuracy);
        assert_eq!(back.loss, r.loss);
        assert_eq!(back.size_mean, r.size_mean);
        assert_eq!(back.size_std, r.size_std);
        assert!(RunResult::parse_record("mode=bl seed=0").is_err());
    }

    #[test]
    fn localization_hit_rate_examples() {
        let grid = (2, 2);
        let soft = |q: Vec<f64>| SoftExplanation { q, grid };
        // Explanations equal to the (renormalized) masks: rate 1.
        let masks = vec![vec![true, false, false, true], vec![false, true, true, false]];
        let explanations = vec![
            soft(vec![0.5, 0.0, 0.0, 0.5]),
            soft(vec![0.0, 0.5, 0.5, 0.0]),
        ];
        assert_eq!(localization_hit_rate(&explanations, &masks).unwrap(), 1.0);
        // Miss case.
        let off = vec![soft(vec![0.9, 0.05, 0.03, 0.02])];
        assert_eq!(
            localization_hit_rate(&off, &[vec![false, true, false, false]]).unwrap(),
            0.0
        );
        // Empty input is an error.
        assert!(localization_hit_rate(&[], &[]).is_err());
        // Uniform q with the lowest-index tie rule hits iff cell 0 is set.
        let uniform = vec![soft(vec![0.25; 4])];
        assert_eq!(
            localization_hit_rate(&uniform, &[vec![true, false, false, false]]).unwrap(),
            1.0
        );
        assert_eq!(
            localization_hit_rate(&uniform, &[vec![false, true, true, true]]).unwrap(),
            0.0
        );
    }

    fn tiny_sets() -> (Dataset, Dataset) {
        let mut train = synth_planted_patch(64, 100, Split::Train);
        train.masks = None;
        let mut val = synth_planted_patch(32, 101, Split::Validation);
        val.masks = None;
        (train, val)
    }

    fn tiny_config(mode: Mode) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(mode, 0);
        cfg.epochs = 1;
        cfg
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let (tr, va) = tiny_sets();
        let cfg = tiny_config(Mode::Bla);
        let (net1, r1) = train(&cfg, &tr, &va, None).unwrap();
        let (net2, r2) = train(&cfg, &tr, &va, None).unwrap();
        assert_eq!(r1.to_record(), r2.to_record());
        for (a, b) in net1.named_params().iter().zip(net2.named_params()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Training reduced the validation loss below the untrained loss.
        let cfg0 = ExperimentConfig {
            epochs: 0,
            ..cfg.clone()
        };
        let (_, untrained) = train(&cfg0, &tr, &va, None).unwrap();
        assert!(r1.loss < untrained.loss);
    }

    #[test]
    fn bla_ph_freezes_extractor_and_head() {
        let (tr, va) = tiny_sets();
        let (baseline, _) = train(&tiny_config(Mode::Bl), &tr, &va, None).unwrap();
        let cfg = tiny_config(Mode::BlaPh);
        let (net, _) = train(&cfg, &tr, &va, Some(&baseline)).unwrap();
        let trained = net.as_standard().unwrap();
        let base = baseline.as_standard().unwrap();
        for l in 0..3 {
            assert_eq!(
                trained.extractor.layers[l].kernels.value.data(),
                base.extractor.layers[l].kernels.value.data()
            );
        }
        assert_eq!(
            trained.head.weights.value.data(),
            base.head.weights.value.data()
        );
        // The explainer did move.
        if let Some(crate::nn::Explainer::Bla { u }) = &trained.explainer {
            assert!(u.value.data().iter().any(|&v| v != 0.0));
        } else {
            panic!("bla-ph network carries a BLA explainer");
        }
        // Without a baseline the mode is rejected; with one, other modes are.
        assert!(train(&cfg, &tr, &va, None).is_err());
        assert!(train(&tiny_config(Mode::Bl), &tr, &va, Some(&baseline)).is_err());
    }

    #[test]
    fn untrained_evaluation_is_near_chance() {
        let (tr, va) = tiny_sets();
        let cfg = ExperimentConfig {
            epochs: 0,
            ..tiny_config(Mode::Bl)
        };
        let (_, r) = train(&cfg, &tr, &va, None).unwrap();
        assert!((r.accuracy - 0.5).abs() <= 0.5);
        assert!(r.loss > 0.0);
    }

    #[test]
    fn network_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [Mode::Bla, Mode::L2xF, Mode::L2xPixel] {
            let cfg = tiny_config(mode);
            let net = build_network(&cfg);
            let path = dir.path().join(format!("{}.blam", mode.as_str()));
            net.save(&path).unwrap();
            let back = Network::load(&path, cfg.bla, cfg.l2x).unwrap();
            let (a, b) = (net.named_params(), back.named_params());
            assert_eq!(a.len(), b.len());
            for (pa, pb) in a.iter().zip(&b) {
                assert_eq!(pa.name, pb.name);
                assert_eq!(pa.value.shape(), pb.value.shape());
                for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn eval_pooling_contracts() {
        assert_eq!(EvalPooling::parse("hard").unwrap(), EvalPooling::Hard);
        assert_eq!(EvalPooling::parse("avg").unwrap(), EvalPooling::Average);
        assert_eq!(EvalPooling::parse("top-k").unwrap(), EvalPooling::TopK);
        assert!(EvalPooling::parse("wat").is_err());
        assert_eq!(EvalPooling::reporting_for(Mode::Bl), EvalPooling::Average);
        assert_eq!(EvalPooling::reporting_for(Mode::Bla), EvalPooling::Hard);
        assert_eq!(EvalPooling::reporting_for(Mode::L2xF), EvalPooling::TopK);
    }
}
