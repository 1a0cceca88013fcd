//! The faithfulness study: compares explanation methods per image via
//! Spearman rank correlation against LIME, with a random-explanation
//! control drawn from other images.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Model, PoolingMode};
use crate::saliency::{self, Method, SaliencyMap};
use crate::stats;
use crate::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Saliency maps and correlations for one image.
pub struct ImageFaithfulness {
    pub index: usize,
    pub bla: SaliencyMap,
    pub cam: SaliencyMap,
    pub lime: SaliencyMap,
    pub random: SaliencyMap,
    /// Spearman rho between LIME and the soft explanation.
    pub rho_bla: f64,
    /// Spearman rho between LIME and the random control.
    pub rho_random: f64,
    /// Spearman rho between LIME and CAM.
    pub rho_cam: f64,
}

/// Aggregate study outcome.
pub struct FaithfulnessOutcome {
    pub per_image: Vec<ImageFaithfulness>,
    pub mean_rho_bla: f64,
    pub stderr_rho_bla: f64,
    pub mean_rho_random: f64,
    pub stderr_rho_random: f64,
    pub mean_rho_cam: f64,
    pub stderr_rho_cam: f64,
    /// Two-sided Wilcoxon signed-rank p for rho_bla vs rho_random.
    pub p_bla_vs_random: f64,
}

/// Deployed-model probability for one input (hard explanations for
/// attentive models, matching how the model is evaluated).
pub fn predict_probability(model: &Model, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let node = tape.leaf(x.clone());
    let pooling = match model.pooling {
        PoolingMode::Average => PoolingMode::Average,
        PoolingMode::L2xF => PoolingMode::L2xF,
        _ => PoolingMode::Hard,
    };
    let fwd = model.forward_with(&mut tape, &bound, node, pooling, None)?;
    Ok(tape.value(fwd.prediction).item())
}

/// Soft explanation, feature map, and prediction for one input.
fn soft_pass(model: &Model, x: &Tensor) -> Result<(SaliencyMap, FeatureMap, f64)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let node = tape.leaf(x.clone());
    let fwd = model.forward_with(&mut tape, &bound, node, PoolingMode::Soft, None)?;
    let q = fwd
        .q
        .ok_or_else(|| Error::Config("model has no explanation module".into()))?;
    let map = SaliencyMap {
        scores: tape.value(q).data().to_vec(),
        grid: fwd.grid,
        method: Method::BlaSoft,
    };
    let fmap = FeatureMap::new(tape.value(fwd.fmap).clone())?;
    let prediction = tape.value(fwd.prediction).item();
    Ok((map, fmap, prediction))
}

/// Runs the study over the first `count` images of the dataset.
/// `num_samples` is the LIME occlusion sample count per image.
pub fn faithfulness_study(
    model: &Model,
    ds: &Dataset,
    count: usize,
    num_samples: usize,
    seed: u64,
) -> Result<FaithfulnessOutcome> {
    let count = count.min(ds.len());
    if count < 2 {
        return Err(Error::InvalidArgument {
            op: "faithfulness_study",
            detail: "need at least 2 images".into(),
        });
    }
    let head_weights = model.head.weights.value.data().to_vec();

    // First pass: soft explanations (also the random-control pool) and CAM.
    let mut bla_maps = Vec::with_capacity(count);
    let mut cam_maps = Vec::with_capacity(count);
    for i in 0..count {
        let (map, fmap, prediction) = soft_pass(model, &ds.images[i])?;
        let class_sign = if prediction >= 0.5 { 1.0 } else { -1.0 };
        cam_maps.push(saliency::cam_scores(&fmap, &head_weights, class_sign));
        bla_maps.push(map);
    }

    // Second pass: LIME and the correlations.
    let mut lime_rng = ChaCha8Rng::seed_from_u64(seed);
    lime_rng.set_stream(10);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
    pick_rng.set_stream(11);
    let mut per_image = Vec::with_capacity(count);
    for i in 0..count {
        let lime = saliency::lime_scores(
            |x| predict_probability(model, x).expect("forward pass on occluded input"),
            &ds.images[i],
            bla_maps[i].grid,
            num_samples,
            &mut lime_rng,
        )?;
        let random = saliency::random_saliency(i, &bla_maps, &mut pick_rng)?;
        let rho_bla = saliency::spearman(&lime.scores, &bla_maps[i].scores)?;
        let rho_random = saliency::spearman(&lime.scores, &random.scores)?;
        let rho_cam = saliency::spearman(&lime.scores, &cam_maps[i].scores)?;
        per_image.push(ImageFaithfulness {
            index: i,
            bla: bla_maps[i].clone(),
            cam: cam_maps[i].clone(),
            lime,
            random,
            rho_bla,
            rho_random,
            rho_cam,
        });
    }

    let rb: Vec<f64> = per_image.iter().map(|r| r.rho_bla).collect();
    let rr: Vec<f64> = per_image.iter().map(|r| r.rho_random).collect();
    let rc: Vec<f64> = per_image.iter().map(|r| r.rho_cam).collect();
    let (mean_rho_bla, stderr_rho_bla) = stats::mean_stderr(&rb)?;
    let (mean_rho_random, stderr_rho_random) = stats::mean_stderr(&rr)?;
    let (mean_rho_cam, stderr_rho_cam) = stats::mean_stderr(&rc)?;
    let (_, p_bla_vs_random) = stats::wilcoxon_signed_rank(&rb, &rr)?;
    Ok(FaithfulnessOutcome {
        per_image,
        mean_rho_bla,
        stderr_rho_bla,
        mean_rho_random,
        stderr_rho_random,
        mean_rho_cam,
        stderr_rho_cam,
        p_bla_vs_random,
    })
}
