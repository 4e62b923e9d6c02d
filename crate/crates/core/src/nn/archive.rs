//! Model archive ("PRKM") serialization.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes  "PRKM"
//! version          u32      currently 1
//! input_shape      3 x u64  channels, height, width
//! class_count      u64
//! feature_count    u64
//! feature_layers   feature_count x u64
//! layer_count      u64
//! layers           per layer: tag u8 + fields
//!                    0 conv2d   out_channels u64, kernel u64, stride u64, padding u64
//!                    1 relu
//!                    2 max_pool size u64, stride u64
//!                    3 flatten
//!                    4 dense    out_features u64
//!                    5 identity
//! param_count      u64      total number of f64 parameter values
//! params           param_count x f64, spec order (weight then bias per
//!                  parameterized layer, tensors row-major)
//! ```

use super::{ClassifierModel, LayerParams, LayerSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PRKM";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::ArchiveTruncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serialize a model to its archive byte representation.
pub fn model_to_bytes(model: &ClassifierModel) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in spec.input_shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(spec.class_count as u64).to_le_bytes());
    out.extend_from_slice(&(spec.feature_layers.len() as u64).to_le_bytes());
    for &f in &spec.feature_layers {
        out.extend_from_slice(&(f as u64).to_le_bytes());
    }
    out.extend_from_slice(&(spec.layers.len() as u64).to_le_bytes());
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                out.push(0);
                for v in [out_channels, kernel, stride, padding] {
                    out.extend_from_slice(&(*v as u64).to_le_bytes());
                }
            }
            LayerSpec::Relu => out.push(1),
            LayerSpec::MaxPool { size, stride } => {
                out.push(2);
                out.extend_from_slice(&(*size as u64).to_le_bytes());
                out.extend_from_slice(&(*stride as u64).to_le_bytes());
            }
            LayerSpec::Flatten => out.push(3),
            LayerSpec::Dense { out_features } => {
                out.push(4);
                out.extend_from_slice(&(*out_features as u64).to_le_bytes());
            }
            LayerSpec::Identity => out.push(5),
        }
    }
    let params = model.parameters();
    let total: usize = params.iter().map(|p| p.numel()).sum();
    out.extend_from_slice(&(total as u64).to_le_bytes());
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse a model from archive bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<ClassifierModel> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::ArchiveMagic { expected: "PRKM" });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::ArchiveVersion {
            found: version,
            supported: VERSION,
        });
    }
    let input_shape = [r.usize()?, r.usize()?, r.usize()?];
    let class_count = r.usize()?;
    let feature_count = r.usize()?;
    let mut feature_layers = Vec::with_capacity(feature_count);
    for _ in 0..feature_count {
        feature_layers.push(r.usize()?);
    }
    let layer_count = r.usize()?;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = r.u8()?;
        layers.push(match tag {
            0 => LayerSpec::Conv2d {
                out_channels: r.usize()?,
                kernel: r.usize()?,
                stride: r.usize()?,
                padding: r.usize()?,
            },
            1 => LayerSpec::Relu,
            2 => LayerSpec::MaxPool {
                size: r.usize()?,
                stride: r.usize()?,
            },
            3 => LayerSpec::Flatten,
            4 => LayerSpec::Dense {
                out_features: r.usize()?,
            },
            5 => LayerSpec::Identity,
            other => return Err(Error::ArchiveTag(other)),
        });
    }
    let spec = ModelSpec {
        layers,
        feature_layers,
        input_shape,
        class_count,
    };
    spec.validate()?;

    let declared = r.usize()?;
    // Reconstruct parameter tensors from the spec-derived shapes.
    let reference = super::init_model(&spec, 0)?;
    let mut params = Vec::new();
    let mut read_total = 0usize;
    for slot in reference.layer_params() {
        match slot {
            None => params.push(None),
            Some(p) => {
                let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
                    let n: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..n {
                        data.push(r.f64()?);
                    }
                    read_total += n;
                    Tensor::new(shape.to_vec(), data)
                };
                let weight = read_tensor(p.weight.shape())?;
                let bias = read_tensor(p.bias.shape())?;
                params.push(Some(LayerParams { weight, bias }));
            }
        }
    }
    if declared != read_total {
        return Err(Error::ArchiveTruncated);
    }
    if !r.done() {
        return Err(Error::Io("trailing bytes after model archive".into()));
    }
    ClassifierModel::from_parts(spec, params)
}

/// Write a model archive atomically (temp file + rename).
pub fn save_model(path: &Path, model: &ClassifierModel) -> Result<()> {
    atomic_write(path, &model_to_bytes(model))
}

/// Load a model archive.
pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;
    use crate::passes::PassCounter;
    use crate::testkit::random_tensor;
    use rand::SeedableRng;

    #[test]
    fn round_trip_preserves_logits() {
        let spec = ModelSpec::tiny_cnn([1, 8, 8], 3);
        let model = init_model(&spec, 77).unwrap();
        let bytes = model_to_bytes(&model);
        let loaded = model_from_bytes(&bytes).unwrap();
        assert_eq!(model, loaded);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut c = PassCounter::new();
        assert_eq!(
            model.logits(&x, &mut c).unwrap(),
            loaded.logits(&x, &mut c).unwrap()
        );
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let spec = ModelSpec::tiny_cnn([1, 8, 8], 3);
        let model = init_model(&spec, 77).unwrap();
        let mut bytes = model_to_bytes(&model);
        bytes[0] = b'X';
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::ArchiveMagic { .. })
        ));
    }

    #[test]
    fn version_and_truncation_are_distinct_errors() {
        let spec = ModelSpec::tiny_cnn([1, 8, 8], 3);
        let model = init_model(&spec, 77).unwrap();
        let bytes = model_to_bytes(&model);

        let mut wrong_version = bytes.clone();
        wrong_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&wrong_version),
            Err(Error::ArchiveVersion { found: 9, .. })
        ));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            model_from_bytes(truncated),
            Err(Error::ArchiveTruncated)
        ));
    }

    #[test]
    fn externally_written_layout_loads() {
        // Hand-assemble the documented byte layout for a flatten+dense model
        // on a 1x1x2 input with 2 classes and check it matches the same model
        // built in memory.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PRKM");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for d in [1u64, 1, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&2u64.to_le_bytes()); // class_count
        bytes.extend_from_slice(&0u64.to_le_bytes()); // no feature layers
        bytes.extend_from_slice(&2u64.to_le_bytes()); // two layers
        bytes.push(3); // flatten
        bytes.push(4); // dense
        bytes.extend_from_slice(&2u64.to_le_bytes()); // out_features
        bytes.extend_from_slice(&6u64.to_le_bytes()); // 4 weights + 2 biases
        for v in [1.0f64, 2.0, 3.0, 4.0, 0.5, -0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }

        let loaded = model_from_bytes(&bytes).unwrap();
        let spec = ModelSpec {
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
            feature_layers: vec![],
            input_shape: [1, 1, 2],
            class_count: 2,
        };
        let expected = ClassifierModel::from_parts(
            spec,
            vec![
                None,
                Some(LayerParams {
                    weight: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                    bias: Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
                }),
            ],
        )
        .unwrap();
        assert_eq!(loaded, expected);
    }

    #[test]
    fn save_load_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.prkm");
        let spec = ModelSpec::tiny_cnn([1, 8, 8], 4);
        let model = init_model(&spec, 5).unwrap();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
    }
}
