//! Datasets: in-memory batches plus the synthetic desk-scale generator.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministically mix a base seed with two stream indices (splitmix64).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// A labeled batch of images with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    examples: Tensor,
    labels: Vec<usize>,
    split: String,
    class_count: usize,
}

impl DatasetHandle {
    pub fn from_parts(
        examples: Tensor,
        labels: Vec<usize>,
        split: impl Into<String>,
        class_count: usize,
    ) -> Result<Self> {
        let shape = examples.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "dataset examples must be [n,c,h,w], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} examples but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: class_count,
            });
        }
        if examples.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidSpec(
                "dataset values must lie in [0,1]".into(),
            ));
        }
        Ok(DatasetHandle {
            examples,
            labels,
            split: split.into(),
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn examples(&self) -> &Tensor {
        &self.examples
    }

    /// Shape of one example: [c, h, w].
    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.examples.shape();
        [s[1], s[2], s[3]]
    }

    /// The `i`-th example as a standalone tensor.
    pub fn example(&self, i: usize) -> Tensor {
        let [c, h, w] = self.example_shape();
        let per = c * h * w;
        Tensor::new(
            vec![c, h, w],
            self.examples.data()[i * per..(i + 1) * per].to_vec(),
        )
        .expect("dataset slice is valid")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Smooth per-class template: a small sum of low-frequency cosine modes,
/// rescaled into [0.2, 0.8].
fn class_template(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let modes = 3usize;
    let mut amp = Vec::new();
    for _ in 0..modes * modes {
        amp.push((
            rng.random_range(-1.0..1.0f64),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ));
    }
    let mut field = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for u in 0..modes {
                for w in 0..modes {
                    let (a, p1, p2) = amp[u * modes + w];
                    v += a
                        * (std::f64::consts::PI * u as f64 * (y as f64 + 0.5) / size as f64 + p1)
                            .cos()
                        * (std::f64::consts::PI * w as f64 * (x as f64 + 0.5) / size as f64 + p2)
                            .cos();
                }
            }
            field[y * size + x] = v;
        }
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    field
        .iter()
        .map(|v| 0.2 + 0.6 * (v - lo) / span)
        .collect()
}

/// Synthetic classification task: one smooth template per class plus
/// per-example pixel noise, clamped to [0, 1]. Single-channel images,
/// class-major example order, deterministic under the seed.
pub fn generate_synthetic_dataset(
    seed: u64,
    classes: usize,
    size: usize,
    per_class: usize,
    noise: f64,
) -> Result<DatasetHandle> {
    if classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if size < 4 {
        return Err(Error::InvalidConfig(format!(
            "image size must be at least 4, got {size}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidConfig("per_class must be positive".into()));
    }
    if noise < 0.0 || !noise.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise level must be non-negative, got {noise}"
        )));
    }

    let mut template_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| class_template(&mut template_rng, size))
        .collect();

    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for (c, template) in templates.iter().enumerate() {
        for j in 0..per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 + c as u64, j as u64));
            for &t in template {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push((t + noise * e).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    let examples = Tensor::new(vec![n, 1, size, size], data)?;
    DatasetHandle::from_parts(examples, labels, "synthetic", classes)
}
