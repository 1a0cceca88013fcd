//! Dataset ingestion: IDX files, class-pair subsampling, and a synthetic
//! planted-patch generator with ground-truth explanation regions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Images with binary labels, plus optional ground-truth masks for the
/// synthetic dataset. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// [h, w, 1] tensors with pixel values in [0,1].
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    /// 7x7 ground-truth grids (synthetic data only).
    pub masks: Option<Vec<Vec<bool>>>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Raw IDX pair: images as [h,w,1] tensors scaled to [0,1], labels as raw
/// byte values.
#[derive(Debug)]
pub struct RawDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
}

fn read_u32_be(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Parses an IDX image/label file pair and scales pixel bytes to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    if img_bytes.len() < 16 {
        return Err(Error::Truncated {
            path: images_path.into(),
            needed: 16,
            got: img_bytes.len(),
        });
    }
    let magic = read_u32_be(&img_bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.into(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_u32_be(&img_bytes, 4) as usize;
    let h = read_u32_be(&img_bytes, 8) as usize;
    let w = read_u32_be(&img_bytes, 12) as usize;
    let needed = 16 + count * h * w;
    if img_bytes.len() < needed {
        return Err(Error::Truncated {
            path: images_path.into(),
            needed,
            got: img_bytes.len(),
        });
    }

    if lbl_bytes.len() < 8 {
        return Err(Error::Truncated {
            path: labels_path.into(),
            needed: 8,
            got: lbl_bytes.len(),
        });
    }
    let lmagic = read_u32_be(&lbl_bytes, 0);
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.into(),
            expected: IDX_LABELS_MAGIC,
            got: lmagic,
        });
    }
    let lcount = read_u32_be(&lbl_bytes, 4) as usize;
    if lcount != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: lcount,
        });
    }
    if lbl_bytes.len() < 8 + count {
        return Err(Error::Truncated {
            path: labels_path.into(),
            needed: 8 + count,
            got: lbl_bytes.len(),
        });
    }

    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * h * w;
        let data = img_bytes[start..start + h * w]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(Tensor::new(vec![h, w, 1], data)?);
    }
    let labels = lbl_bytes[8..8 + count].to_vec();
    Ok(RawDataset { images, labels })
}

/// Writes images (pixels rounded back to bytes via value*255) and labels as
/// an IDX pair. Inverse of `load_idx` for byte-derived data.
pub fn save_idx(
    images: &[Tensor],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let (h, w) = match images.first().map(|t| t.shape()) {
        Some([h, w, 1]) => (*h, *w),
        _ => (0, 0),
    };
    let mut img_out = Vec::with_capacity(16 + images.len() * h * w);
    img_out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img_out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img_out.extend_from_slice(&(h as u32).to_be_bytes());
    img_out.extend_from_slice(&(w as u32).to_be_bytes());
    for img in images {
        for &v in img.data() {
            img_out.push((v * 255.0).round() as u8);
        }
    }
    let mut lbl_out = Vec::with_capacity(8 + labels.len());
    lbl_out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl_out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lbl_out.extend_from_slice(labels);

    fs::write(images_path, img_out).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lbl_out).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Keeps only digits `a` and `b`, relabeling a -> 0, b -> 1 and preserving
/// the original order.
pub fn filter_pair(raw: &RawDataset, a: u8, b: u8, split: Split) -> Dataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (img, &lbl) in raw.images.iter().zip(&raw.labels) {
        if lbl == a || lbl == b {
            images.push(img.clone());
            labels.push(u8::from(lbl == b));
        }
    }
    Dataset {
        images,
        labels,
        masks: None,
        split,
    }
}

/// Loads the MNIST 3-vs-8 train/validation pair from a directory holding the
/// four standard IDX files.
pub fn load_mnist38(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((
        filter_pair(&train, 3, 8, Split::Train),
        filter_pair(&test, 3, 8, Split::Validation),
    ))
}

const SYNTH_SIZE: usize = 28;
const SYNTH_CELL: usize = 4;
const SYNTH_SHAPE: usize = 8;

/// Synthetic planted-patch dataset: uniform background noise in [0, 0.3];
/// class 1 carries a bright 8x8 square, class 0 a bright 8x8 hollow frame,
/// both aligned to the 4-pixel patch grid. The ground-truth mask marks the
/// 7x7 cells overlapping the shape (always exactly 4 for aligned shapes).
/// Classes alternate, so counts differ by at most one.
pub fn synth_planted_patch(count: usize, seed: u64, split: Split) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    let cells = SYNTH_SIZE / SYNTH_CELL;
    for i in 0..count {
        let label = (i % 2) as u8;
        let mut data: Vec<f64> = (0..SYNTH_SIZE * SYNTH_SIZE)
            .map(|_| rng.gen::<f64>() * 0.3)
            .collect();
        // Aligned placement: offsets are multiples of the cell size.
        let max_cell = (SYNTH_SIZE - SYNTH_SHAPE) / SYNTH_CELL;
        let y0 = SYNTH_CELL * rng.gen_range(0..=max_cell);
        let x0 = SYNTH_CELL * rng.gen_range(0..=max_cell);
        for dy in 0..SYNTH_SHAPE {
            for dx in 0..SYNTH_SHAPE {
                let on_border = dy < 2 || dy >= SYNTH_SHAPE - 2 || dx < 2 || dx >= SYNTH_SHAPE - 2;
                if label == 1 || on_border {
                    data[(y0 + dy) * SYNTH_SIZE + x0 + dx] = 1.0;
                }
            }
        }
        let mut mask = vec![false; cells * cells];
        for cy in 0..cells {
            for cx in 0..cells {
                let overlaps = cy * SYNTH_CELL < y0 + SYNTH_SHAPE
                    && y0 < (cy + 1) * SYNTH_CELL
                    && cx * SYNTH_CELL < x0 + SYNTH_SHAPE
                    && x0 < (cx + 1) * SYNTH_CELL;
                mask[cy * cells + cx] = overlaps;
            }
        }
        images.push(Tensor::new(vec![SYNTH_SIZE, SYNTH_SIZE, 1], data).unwrap());
        labels.push(label);
        masks.push(mask);
    }
    Dataset {
        images,
        labels,
        masks: Some(masks),
        split,
    }
}

/// Writes the sidecar ground-truth mask file: one line of 49 bits per image.
pub fn save_masks(masks: &[Vec<bool>], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for m in masks {
        let line: String = m.iter().map(|&b| if b { '1' } else { '0' }).collect();
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Resolves a `--data` argument: the literal names `mnist38` / `synthetic`,
/// or a directory of IDX files. `BLA_DATA_DIR` is the dataset root fallback
/// for `mnist38`.
pub fn resolve_dataset(spec: &str, synth_seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        "mnist38" => {
            let root = std::env::var("BLA_DATA_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|_| PathBuf::from("data"));
            load_mnist38(&root.join("mnist"))
        }
        "synthetic" => Ok((
            synth_planted_patch(5000, synth_seed, Split::Train),
            synth_planted_patch(1000, synth_seed.wrapping_add(1), Split::Validation),
        )),
        dir => {
            let dir = Path::new(dir);
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            // Already-binary label files are used as-is; full digit labels
            // are reduced to the 3-vs-8 pair.
            let binary = train
                .labels
                .iter()
                .chain(&test.labels)
                .all(|&l| l <= 1);
            if binary {
                Ok((
                    Dataset {
                        images: train.images,
                        labels: train.labels,
                        masks: None,
                        split: Split::Train,
                    },
                    Dataset {
                        images: test.images,
                        labels: test.labels,
                        masks: None,
                        split: Split::Validation,
                    },
                ))
            } else {
                Ok((
                    filter_pair(&train, 3, 8, Split::Train),
                    filter_pair(&test, 3, 8, Split::Validation),
                ))
            }
        }
    }
}
