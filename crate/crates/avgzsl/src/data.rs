//! Datasets for audio-visual zero-shot learning: class tables with text
//! embeddings, per-modality feature matrices, fixed splits, a controllable
//! synthetic benchmark generator, and a stable on-disk format.
//!
//! Samples carry two modality features (audio and visual). The fused
//! representation used by every downstream model is their concatenation,
//! audio first. Classes are partitioned into seen and unseen: seen classes
//! populate the train, validation, and seen-test splits, unseen classes
//! appear exclusively in the unseen-test split.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::io;
use crate::nn::Mat;
use crate::{Error, Result};

/// Class identifier, indexing into [`Dataset::classes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Sample-to-split assignment. Train and validation contain only seen
/// classes; the unseen-test split contains only unseen classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    TrainSeen,
    Val,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainSeen, Split::Val, Split::TestSeen, Split::TestUnseen];

    fn to_byte(self) -> u8 {
        match self {
            Split::TrainSeen => 0,
            Split::Val => 1,
            Split::TestSeen => 2,
            Split::TestUnseen => 3,
        }
    }

    fn from_byte(b: u8) -> Option<Split> {
        match b {
            0 => Some(Split::TrainSeen),
            1 => Some(Split::Val),
            2 => Some(Split::TestSeen),
            3 => Some(Split::TestUnseen),
            _ => None,
        }
    }
}

/// Fractions of each seen class routed to train and validation; the remainder
/// is seen-test. Unseen classes are test-only.
const TRAIN_FRACTION: f64 = 0.7;
const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub seen: bool,
}

/// Modality widths. The fused width is their sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub audio: usize,
    pub visual: usize,
    pub text: usize,
}

impl FeatureDims {
    pub fn fused(&self) -> usize {
        self.audio + self.visual
    }
}

/// Configuration for the synthetic benchmark generator.
///
/// Classes are Gaussian clusters: per class, a latent code is drawn from a
/// standard normal in `latent_dim` dimensions and mapped through fixed random
/// bases into the audio and visual spaces to form the class means; samples
/// scatter around the means with standard deviation `spread`, and the class
/// text embedding is a fixed random linear projection of the stacked modality
/// means plus a small perturbation of standard deviation `text_noise`.
/// Smaller `spread` separates the clusters; the shared latent subspace and
/// the linear mean-to-text map are what make unseen classes recoverable from
/// their embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    /// Intrinsic dimensionality of the class-mean manifold. Class means are
    /// drawn from a shared `latent_dim`-dimensional subspace of the feature
    /// spaces, so with enough seen classes an unseen class mean is an
    /// interpolation of structure the seen classes already cover. Full-rank
    /// independent means (latent_dim >= audio_dim + visual_dim) would leave
    /// nothing transferable between class sets.
    pub latent_dim: usize,
    pub samples_per_class: usize,
    pub spread: f64,
    pub text_noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seen_classes: 8,
            unseen_classes: 4,
            audio_dim: 16,
            visual_dim: 16,
            text_dim: 16,
            latent_dim: 4,
            samples_per_class: 60,
            spread: 0.3,
            text_noise: 0.01,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.seen_classes == 0 || self.unseen_classes == 0 {
            return Err(Error::Config("need at least one seen and one unseen class".into()));
        }
        if self.audio_dim == 0 || self.visual_dim == 0 || self.text_dim == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.samples_per_class < 10 {
            return Err(Error::Config("need at least 10 samples per class to split".into()));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config("spread must be positive and finite".into()));
        }
        Ok(())
    }
}

/// A complete benchmark: class table, per-class text embeddings, per-sample
/// modality features, labels, and split assignments.
///
/// Feature values are quantized to f32 precision in memory so that save and
/// load round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: FeatureDims,
    pub classes: Vec<ClassInfo>,
    /// One row per class, aligned with `classes`.
    pub text_embeddings: Mat,
    pub audio: Mat,
    pub visual: Mat,
    pub labels: Vec<ClassId>,
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Generates a synthetic benchmark. The draw order is fixed: a master
    /// stream supplies the mean-to-text projection, then each class reads its
    /// means, text noise, and samples from its own stream, so any one class's
    /// content depends only on (seed, class index).
    pub fn synthesize(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
        config.validate()?;
        let dims = FeatureDims {
            audio: config.audio_dim,
            visual: config.visual_dim,
            text: config.text_dim,
        };
        let total_classes = config.seen_classes + config.unseen_classes;
        let n = total_classes * config.samples_per_class;

        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let proj_scale = (1.0 / dims.fused() as f64).sqrt();
        let projection: Vec<f64> = (0..config.text_dim * dims.fused())
            .map(|_| proj_scale * sample_normal(&mut master))
            .collect();
        let latent = config.latent_dim;
        let basis_scale = (1.0 / latent as f64).sqrt();
        let mut draw_basis = |rows: usize| -> Vec<f64> {
            (0..rows * latent).map(|_| basis_scale * sample_normal(&mut master)).collect()
        };
        let basis_a = draw_basis(config.audio_dim);
        let basis_v = draw_basis(config.visual_dim);

        let mut classes = Vec::with_capacity(total_classes);
        let mut text = Mat::zeros(total_classes, config.text_dim);
        let mut audio = Mat::zeros(n, config.audio_dim);
        let mut visual = Mat::zeros(n, config.visual_dim);
        let mut labels = Vec::with_capacity(n);
        let mut splits = Vec::with_capacity(n);

        let train_per_class = (config.samples_per_class as f64 * TRAIN_FRACTION).floor() as usize;
        let val_per_class = (config.samples_per_class as f64 * VAL_FRACTION).floor() as usize;

        for k in 0..total_classes {
            let seen = k < config.seen_classes;
            classes.push(ClassInfo {
                name: if seen {
                    format!("seen_{:02}", k)
                } else {
                    format!("unseen_{:02}", k - config.seen_classes)
                },
                seen,
            });

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + k as u64);

            let z: Vec<f64> = (0..latent).map(|_| sample_normal(&mut rng)).collect();
            let span = |basis: &[f64], j: usize| -> f64 {
                basis[j * latent..(j + 1) * latent].iter().zip(&z).map(|(b, zk)| b * zk).sum()
            };
            let mean_a: Vec<f64> = (0..config.audio_dim).map(|j| span(&basis_a, j)).collect();
            let mean_v: Vec<f64> = (0..config.visual_dim).map(|j| span(&basis_v, j)).collect();

            let trow = text.row_mut(k);
            for (j, tj) in trow.iter_mut().enumerate() {
                let prow = &projection[j * dims.fused()..(j + 1) * dims.fused()];
                let mut acc = 0.0;
                for (t, &m) in mean_a.iter().chain(&mean_v).enumerate() {
                    acc += prow[t] * m;
                }
                *tj = quantize(acc + config.text_noise * sample_normal(&mut rng));
            }

            for s in 0..config.samples_per_class {
                let row = k * config.samples_per_class + s;
                for (j, aj) in audio.row_mut(row).iter_mut().enumerate() {
                    *aj = quantize(mean_a[j] + config.spread * sample_normal(&mut rng));
                }
                for (j, vj) in visual.row_mut(row).iter_mut().enumerate() {
                    *vj = quantize(mean_v[j] + config.spread * sample_normal(&mut rng));
                }
                labels.push(ClassId(k as u32));
                splits.push(if !seen {
                    Split::TestUnseen
                } else if s < train_per_class {
                    Split::TrainSeen
                } else if s < train_per_class + val_per_class {
                    Split::Val
                } else {
                    Split::TestSeen
                });
            }
        }

        Ok(Dataset { dims, classes, text_embeddings: text, audio, visual, labels, splits })
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn seen_class_ids(&self) -> Vec<ClassId> {
        self.class_ids_where(true)
    }

    pub fn unseen_class_ids(&self) -> Vec<ClassId> {
        self.class_ids_where(false)
    }

    fn class_ids_where(&self, seen: bool) -> Vec<ClassId> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.seen == seen)
            .map(|(k, _)| ClassId(k as u32))
            .collect()
    }

    /// Sample indices belonging to a split, in storage order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Concatenated audio+visual features (audio first) for the given rows.
    pub fn fused(&self, indices: &[usize]) -> Mat {
        let fused_dim = self.dims.fused();
        let mut out = Mat::zeros(indices.len(), fused_dim);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst)[..self.dims.audio].copy_from_slice(self.audio.row(src));
            out.row_mut(dst)[self.dims.audio..].copy_from_slice(self.visual.row(src));
        }
        out
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<ClassId> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Text embedding rows for the given classes.
    pub fn text_for_classes(&self, ids: &[ClassId]) -> Mat {
        let rows: Vec<usize> = ids.iter().map(|c| c.index()).collect();
        self.text_embeddings.gather_rows(&rows)
    }

    /// Text embedding rows matching each sample's label.
    pub fn text_for_labels(&self, labels: &[ClassId]) -> Mat {
        self.text_for_classes(labels)
    }

    /// Writes the dataset as a directory: a JSON manifest plus f32-le tensor
    /// files, u32-le labels, and one split byte per sample.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            dtype: "f32-le".into(),
            dims: self.dims,
            sample_count: self.sample_count(),
            classes: self.classes.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Manifest { path: dir.display().to_string(), reason: e.to_string() })?;
        io::write_bytes(&dir.join("manifest.json"), &json)?;
        io::write_f32_mat(&dir.join("audio.bin"), &self.audio)?;
        io::write_f32_mat(&dir.join("visual.bin"), &self.visual)?;
        io::write_f32_mat(&dir.join("text_embeddings.bin"), &self.text_embeddings)?;
        io::write_u32s(&dir.join("labels.bin"), self.labels.iter().map(|c| c.0))?;
        let split_bytes: Vec<u8> = self.splits.iter().map(|s| s.to_byte()).collect();
        io::write_bytes(&dir.join("splits.bin"), &split_bytes)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.json");
        let bytes = io::read_bytes(&mpath)?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Manifest { path: mpath.display().to_string(), reason: e.to_string() })?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Manifest {
                path: mpath.display().to_string(),
                reason: format!("unexpected format tag {:?}", manifest.format),
            });
        }
        if manifest.dtype != "f32-le" {
            return Err(Error::Manifest {
                path: mpath.display().to_string(),
                reason: format!("unsupported dtype {:?}", manifest.dtype),
            });
        }
        let n = manifest.sample_count;
        let k = manifest.classes.len();
        let dims = manifest.dims;
        let audio = io::read_f32_mat(&dir.join("audio.bin"), n, dims.audio)?;
        let visual = io::read_f32_mat(&dir.join("visual.bin"), n, dims.visual)?;
        let text = io::read_f32_mat(&dir.join("text_embeddings.bin"), k, dims.text)?;
        let labels: Vec<ClassId> = io::read_u32s(&dir.join("labels.bin"), n)?
            .into_iter()
            .map(ClassId)
            .collect();
        if let Some(bad) = labels.iter().find(|c| c.index() >= k) {
            return Err(Error::Manifest {
                path: mpath.display().to_string(),
                reason: format!("label {} out of range for {} classes", bad.0, k),
            });
        }
        let split_bytes = io::read_bytes(&dir.join("splits.bin"))?;
        if split_bytes.len() != n {
            return Err(Error::Manifest {
                path: mpath.display().to_string(),
                reason: format!("splits.bin holds {} entries, expected {}", split_bytes.len(), n),
            });
        }
        let splits: Vec<Split> = split_bytes
            .iter()
            .map(|&b| {
                Split::from_byte(b).ok_or_else(|| Error::Manifest {
                    path: mpath.display().to_string(),
                    reason: format!("invalid split byte {b}"),
                })
            })
            .collect::<Result<_>>()?;

        let ds = Dataset {
            dims,
            classes: manifest.classes,
            text_embeddings: text,
            audio,
            visual,
            labels,
            splits,
        };
        ds.check_consistency(&mpath)?;
        Ok(ds)
    }

    fn check_consistency(&self, mpath: &Path) -> Result<()> {
        for (i, (&label, &split)) in self.labels.iter().zip(&self.splits).enumerate() {
            let seen = self.classes[label.index()].seen;
            let ok = match split {
                Split::TrainSeen | Split::Val | Split::TestSeen => seen,
                Split::TestUnseen => !seen,
            };
            if !ok {
                return Err(Error::Manifest {
                    path: mpath.display().to_string(),
                    reason: format!(
                        "sample {i}: class {} (seen={seen}) assigned to {split:?}",
                        label.0
                    ),
                });
            }
        }
        Ok(())
    }
}

const DATASET_FORMAT: &str = "avgzsl-dataset";

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    dtype: String,
    dims: FeatureDims,
    sample_count: usize,
    classes: Vec<ClassInfo>,
}

fn sample_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rounds through f32 so in-memory values match their serialized form.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}
