//! Saliency baselines and faithfulness apparatus: CAM for the linear head,
//! LIME occlusion scores via least squares, Spearman rank correlation, and
//! the random-explanation control.

use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::stats::average_ranks;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Cam,
    Lime,
    BlaSoft,
    Random,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Cam => "CAM",
            Method::Lime => "LIME",
            Method::BlaSoft => "BLA-SOFT",
            Method::Random => "RANDOM",
        };
        f.write_str(s)
    }
}

/// Real-valued per-position saliency over a spatial grid.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub scores: Vec<f64>,
    pub grid: (usize, usize),
    pub method: Method,
}

/// CAM for a single linear head: score_i = class_sign * w^T f_i.
/// class_sign is +1 for the positive sigmoid class and -1 for the negative.
pub fn cam_scores(fmap: &FeatureMap, head_weights: &[f64], class_sign: f64) -> SaliencyMap {
    let scores = (0..fmap.n())
        .map(|i| {
            class_sign
                * fmap
                    .feature(i)
                    .iter()
                    .zip(head_weights)
                    .map(|(&f, &w)| f * w)
                    .sum::<f64>()
        })
        .collect();
    SaliencyMap {
        scores,
        grid: fmap.grid,
        method: Method::Cam,
    }
}

/// Occlusion LIME: partitions the image into an h x w grid of equal
/// patches, samples `num_samples` fair-coin occlusion patterns (occluded
/// patches set to 0), evaluates `predict` on each occluded image, and fits
/// ordinary least squares `output ~ w0 + sum_i w_i z_i`. Returns the patch
/// coefficients.
///
/// A singular design matrix is retried with the next substream of the rng,
/// up to a handful of attempts.
pub fn lime_scores(
    predict: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    grid: (usize, usize),
    num_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SaliencyMap> {
    let (gh, gw) = grid;
    let n = gh * gw;
    if num_samples < n + 1 {
        return Err(Error::InvalidArgument {
            op: "lime_scores",
            detail: format!("need at least {} samples for {} patches", n + 1, n),
        });
    }
    let [h, w, c] = match x.shape()[..] {
        [h, w, c] => [h, w, c],
        _ => {
            return Err(Error::ShapeMismatch {
                op: "lime_scores",
                detail: format!("image must be rank 3, got {:?}", x.shape()),
            })
        }
    };
    let (ph, pw) = (h / gh, w / gw);

    for _attempt in 0..5 {
        // Design matrix rows [1, z_0 .. z_{n-1}] and responses.
        let mut design = Vec::with_capacity(num_samples * (n + 1));
        let mut response = Vec::with_capacity(num_samples);
        for _ in 0..num_samples {
            let z: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
            let mut occluded = x.clone();
            for (patch, &keep) in z.iter().enumerate() {
                if keep {
                    continue;
                }
                let (py, px) = (patch / gw, patch % gw);
                for dy in 0..ph {
                    for dx in 0..pw {
                        let base = ((py * ph + dy) * w + px * pw + dx) * c;
                        for ch in 0..c {
                            occluded.data_mut()[base + ch] = 0.0;
                        }
                    }
                }
            }
            design.push(1.0);
            design.extend(z.iter().map(|&b| f64::from(b as u8)));
            response.push(predict(&occluded));
        }
        match least_squares(&design, &response, n + 1) {
            Ok(coef) => {
                return Ok(SaliencyMap {
                    scores: coef[1..].to_vec(),
                    grid,
                    method: Method::Lime,
                })
            }
            Err(Error::SingularDesign) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::SingularDesign)
}

/// Ordinary least squares via the normal equations and Gaussian elimination
/// with partial pivoting. `design` is row-major [rows, cols].
pub fn least_squares(design: &[f64], response: &[f64], cols: usize) -> Result<Vec<f64>> {
    let rows = response.len();
    debug_assert_eq!(design.len(), rows * cols);
    // A = X^T X, b = X^T y
    let mut a = vec![0.0; cols * cols];
    let mut b = vec![0.0; cols];
    for r in 0..rows {
        let row = &design[r * cols..(r + 1) * cols];
        for i in 0..cols {
            b[i] += row[i] * response[r];
            for j in i..cols {
                a[i * cols + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..cols {
        for j in 0..i {
            a[i * cols + j] = a[j * cols + i];
        }
    }
    solve_linear(&mut a, &mut b, cols)?;
    Ok(b)
}

fn solve_linear(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col].abs() < 1e-10 {
            return Err(Error::SingularDesign);
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            b[r] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in col + 1..n {
            acc -= a[col * n + j] * b[j];
        }
        b[col] = acc / a[col * n + col];
    }
    Ok(())
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// Returns 0 when either input has zero rank variance (constant input).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "spearman",
            detail: format!("{} vs {} entries", a.len(), b.len()),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "spearman",
            detail: "need at least 2 entries".into(),
        });
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Uniformly picks a saliency map from the pool, excluding the reference
/// index: the control explanation "from another, random input".
pub fn random_saliency(
    reference: usize,
    pool: &[SaliencyMap],
    rng: &mut ChaCha8Rng,
) -> Result<SaliencyMap> {
    let candidates: Vec<usize> = (0..pool.len()).filter(|&i| i != reference).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument {
            op: "random_saliency",
            detail: "pool holds no map other than the reference".into(),
        });
    }
    let pick = candidates[rng.gen_range(0..candidates.len())];
    let mut map = pool[pick].clone();
    map.method = Method::Random;
    Ok(map)
}
