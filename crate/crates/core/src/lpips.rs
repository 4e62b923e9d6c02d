//! Perceptual distance: channel-normalized, layer-scaled, flattened feature
//! embeddings and the L2 distance between them.
//!
//! For an extractor with feature activations `g_l(x)` of shape
//! `[c_l, h_l, w_l]`, the embedding is
//! `phi(x) = (norm(g_1)/sqrt(w_1 h_1), ..., norm(g_L)/sqrt(w_L h_L))`
//! flattened into one vector, where `norm` scales each pixel's channel
//! vector to unit L2 norm. The distance is `d(x1,x2) = ||phi(x1)-phi(x2)||_2`.
//! No learned per-channel weights are applied.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ClassifierModel;
use crate::passes::PassCounter;
use crate::tensor::{self, Tensor};

/// Pixels whose channel vector norm falls at or below this map to zero
/// instead of dividing by a vanishing norm.
pub const EPS_NORM: f64 = 1e-10;

/// Where a layer's activations landed in the flat embedding vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Flattened perceptual embedding with per-layer segment metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEmbedding {
    pub flat: Tensor,
    pub segments: Vec<Segment>,
}

impl FeatureEmbedding {
    pub fn len(&self) -> usize {
        self.flat.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.numel() == 0
    }

    /// Number of contributing layers.
    pub fn layer_count(&self) -> usize {
        self.segments.len()
    }
}

/// Channel-wise L2 normalization of a `[c,h,w]` activation; zero-norm pixels
/// map to the zero vector.
pub fn channel_normalize(activation: &Tensor) -> Result<Tensor> {
    tensor::channel_normalize(activation, EPS_NORM)
}

/// Assemble the embedding from already-computed feature activations.
pub fn embed_from_activations(activations: &[Tensor]) -> Result<FeatureEmbedding> {
    let mut parts = Vec::with_capacity(activations.len());
    let mut segments = Vec::with_capacity(activations.len());
    let mut offset = 0;
    for act in activations {
        let shape = act.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "feature activation must be [c,h,w], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let normalized = channel_normalize(act)?;
        let scaled = tensor::scalar_mul(&normalized, 1.0 / ((w * h) as f64).sqrt())?;
        segments.push(Segment {
            offset,
            len: c * h * w,
            channels: c,
            height: h,
            width: w,
        });
        offset += c * h * w;
        parts.push(scaled.flatten());
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(FeatureEmbedding {
        flat: tensor::concat(&refs)?,
        segments,
    })
}

/// Embedding of one input. One network evaluation.
pub fn embed(
    extractor: &ClassifierModel,
    x: &Tensor,
    counter: &mut PassCounter,
) -> Result<FeatureEmbedding> {
    let acts = extractor.activations(x, counter)?;
    embed_from_activations(&acts)
}

/// Tape-recorded embedding assembly from recorded feature activations.
/// Returns the flat embedding node and its segment table.
pub fn record_embedding_from_features(
    tape: &mut Tape,
    features: &[Var],
) -> Result<(Var, Vec<Segment>)> {
    let mut parts = Vec::with_capacity(features.len());
    let mut segments = Vec::with_capacity(features.len());
    let mut offset = 0;
    for &f in features {
        let shape = tape.value(f).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "feature activation must be [c,h,w], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let normalized = tape.channel_normalize(f, EPS_NORM)?;
        let scaled = tape.scalar_mul(normalized, 1.0 / ((w * h) as f64).sqrt())?;
        let flat = tape.flatten(scaled)?;
        segments.push(Segment {
            offset,
            len: c * h * w,
            channels: c,
            height: h,
            width: w,
        });
        offset += c * h * w;
        parts.push(flat);
    }
    Ok((tape.concat(&parts)?, segments))
}

/// Tape-recorded embedding of one input, registering it as a fresh forward
/// evaluation of the extractor.
pub fn record_embedding(
    tape: &mut Tape,
    extractor: &ClassifierModel,
    x: Var,
    counter: &mut PassCounter,
) -> Result<(Var, Vec<Segment>)> {
    let rec = extractor.record_forward(tape, x, counter)?;
    record_embedding_from_features(tape, &rec.features)
}

/// LPIPS distance between two inputs. Measurement utility (two network
/// evaluations on a scratch counter); attacks use their own counted sessions.
pub fn lpips_distance(extractor: &ClassifierModel, x1: &Tensor, x2: &Tensor) -> Result<f64> {
    let mut scratch = PassCounter::new();
    let e1 = embed(extractor, x1, &mut scratch)?;
    let e2 = embed(extractor, x2, &mut scratch)?;
    distance_between(&e1, &e2)
}

/// Distance between two embeddings.
pub fn distance_between(a: &FeatureEmbedding, b: &FeatureEmbedding) -> Result<f64> {
    Ok(tensor::sub(&a.flat, &b.flat)?.l2_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, ModelSpec};
    use crate::numerics::finite_diff_grad;
    use crate::testkit::random_tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn counter() -> PassCounter {
        PassCounter::new()
    }

    /// TinyCNN with conv biases shifted positive so no post-relu pixel has an
    /// all-zero channel vector on [0,1] inputs.
    fn live_tiny_cnn(seed: u64) -> ClassifierModel {
        let spec = ModelSpec::tiny_cnn([1, 8, 8], 3);
        let mut model = init_model(&spec, seed).unwrap();
        for p in model.parameters_mut() {
            if p.rank() == 1 {
                let boosted: Vec<f64> = p.data().iter().map(|v| v + 0.5).collect();
                *p = Tensor::new(p.shape().to_vec(), boosted).unwrap();
            }
        }
        model
    }

    fn has_dead_pixels(model: &ClassifierModel, x: &Tensor) -> bool {
        let acts = model.activations(x, &mut counter()).unwrap();
        acts.iter().any(|a| {
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            (0..h * w).any(|p| (0..c).all(|ch| a.data()[ch * h * w + p] <= EPS_NORM))
        })
    }

    #[test]
    fn channel_normalize_examples() {
        // single channel value 3 -> 1
        let single = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(channel_normalize(&single).unwrap().data(), &[1.0]);
        // channel pair (3,4) -> (0.6, 0.8)
        let pair = Tensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        let out = channel_normalize(&pair).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15);
        assert!((out.data()[1] - 0.8).abs() < 1e-15);
        // all-zero pixel stays zero
        let zero = Tensor::zeros(&[4, 1, 1]);
        assert_eq!(channel_normalize(&zero).unwrap(), Tensor::zeros(&[4, 1, 1]));
        // wrong rank
        assert!(channel_normalize(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn embedding_norm_is_sqrt_layer_count_without_dead_pixels() {
        let model = live_tiny_cnn(3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 5 {
            let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
            if has_dead_pixels(&model, &x) {
                continue;
            }
            let e = embed(&model, &x, &mut counter()).unwrap();
            let l = e.layer_count() as f64;
            assert!((e.flat.l2_norm() - l.sqrt()).abs() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn identity_extractor_embeds_signs_over_sqrt_hw() {
        let spec = ModelSpec::identity_feature([1, 4, 4], 2);
        let model = init_model(&spec, 1).unwrap();
        let x = Tensor::full(&[1, 4, 4], 0.37).unwrap();
        let e = embed(&model, &x, &mut counter()).unwrap();
        for v in e.flat.data() {
            assert!((v - 0.25).abs() < 1e-12, "expected 1/sqrt(16) = 0.25");
        }
    }

    #[test]
    fn segments_partition_the_embedding() {
        let model = live_tiny_cnn(5);
        let x = Tensor::full(&[1, 8, 8], 0.4).unwrap();
        let e = embed(&model, &x, &mut counter()).unwrap();
        let mut expected_offset = 0;
        for seg in &e.segments {
            assert_eq!(seg.offset, expected_offset);
            assert_eq!(seg.len, seg.channels * seg.height * seg.width);
            expected_offset += seg.len;
        }
        assert_eq!(expected_offset, e.len());
    }

    #[test]
    fn distance_examples() {
        let model = live_tiny_cnn(7);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        assert_eq!(lpips_distance(&model, &x, &x).unwrap(), 0.0);

        // identity extractor, all-positive vs all-negative 2x2: each pixel
        // normalizes to +1 / -1, scaled by 1/2; distance = ||(1,1,1,1)|| = 2
        let spec = ModelSpec::identity_feature([1, 2, 2], 2);
        let ident = init_model(&spec, 1).unwrap();
        let pos = Tensor::full(&[1, 2, 2], 0.8).unwrap();
        let neg = Tensor::full(&[1, 2, 2], -0.3).unwrap();
        let d = lpips_distance(&ident, &pos, &neg).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn distance_is_bounded_by_twice_sqrt_layer_count() {
        let model = live_tiny_cnn(9);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let bound = 2.0 * (model.spec().feature_layers.len() as f64).sqrt();
        for _ in 0..20 {
            let a = random_tensor(&mut rng, &[1, 8, 8], -2.0, 2.0);
            let b = random_tensor(&mut rng, &[1, 8, 8], -2.0, 2.0);
            assert!(lpips_distance(&model, &a, &b).unwrap() <= bound + 1e-12);
        }
    }

    #[test]
    fn recorded_embedding_matches_plain() {
        let model = live_tiny_cnn(11);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let plain = embed(&model, &x, &mut counter()).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let (ev, segments) = record_embedding(&mut tape, &model, xv, &mut counter()).unwrap();
        assert_eq!(tape.value(ev), &plain.flat);
        assert_eq!(segments, plain.segments);
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let model = live_tiny_cnn(13);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x1 = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let x2 = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let ref_embed = embed(&model, &x1, &mut counter()).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x2.clone());
        let (ev, _) = record_embedding(&mut tape, &model, xv, &mut counter()).unwrap();
        let refv = tape.leaf(ref_embed.flat.clone());
        let diff = tape.sub(ev, refv).unwrap();
        let d = tape.l2_norm(diff).unwrap();
        let analytic = tape.backward(d).unwrap().wrt_or_zeros(xv, x2.shape());

        let numeric = finite_diff_grad(
            |p| lpips_distance(&model, &x1, p),
            &x2,
            1e-5,
        )
        .unwrap();
        let err = tensor::sub(&analytic, &numeric).unwrap().l2_norm()
            / analytic.l2_norm().max(1e-9);
        assert!(err < 1e-6, "distance gradient relative error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pseudometric_properties(seed in 0u64..2000) {
            let model = live_tiny_cnn(31);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
            let b = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
            let c = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
            let dab = lpips_distance(&model, &a, &b).unwrap();
            let dba = lpips_distance(&model, &b, &a).unwrap();
            let dac = lpips_distance(&model, &a, &c).unwrap();
            let dbc = lpips_distance(&model, &b, &c).unwrap();
            prop_assert!(dab >= 0.0);
            prop_assert_eq!(dab, dba);
            prop_assert!(lpips_distance(&model, &a, &a).unwrap() == 0.0);
            prop_assert!(dac <= dab + dbc + 1e-9);
        }
    }
}
