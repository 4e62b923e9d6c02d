//! Counted evaluation sessions for perceptual attacks.
//!
//! A session binds the attacked classifier, the network defining the
//! perceptual distance (the classifier itself when self-bounded), the cached
//! reference embedding of the original input, and the attack's pass counter.
//! Every network evaluation and reverse traversal an attack performs goes
//! through a session method, so the counting discipline lives in one place.

use super::config::Objective;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lpips::{self, FeatureEmbedding};
use crate::nn::{self, ClassifierModel};
use crate::passes::PassCounter;
use crate::tensor::{self, Tensor};

/// One recorded evaluation at the current iterate. Self-bounded attacks get
/// logits and embedding from a single joint graph; externally-bounded
/// attacks keep separate classifier and extractor graphs.
pub(crate) enum StepEval {
    Joint {
        tape: Tape,
        input: Var,
        logits: Var,
        embed: Var,
    },
    Split {
        cls_tape: Tape,
        cls_input: Var,
        logits: Var,
        ext_tape: Tape,
        ext_input: Var,
        embed: Var,
    },
}

impl StepEval {
    pub fn embed_value(&self) -> &Tensor {
        match self {
            StepEval::Joint { tape, embed, .. } => tape.value(*embed),
            StepEval::Split { ext_tape, embed, .. } => ext_tape.value(*embed),
        }
    }
}

pub struct PerceptualSession<'a> {
    classifier: &'a ClassifierModel,
    extractor: Option<&'a ClassifierModel>,
    reference: Option<FeatureEmbedding>,
    counter: PassCounter,
}

impl<'a> PerceptualSession<'a> {
    /// `extractor = None` selects self-bounded mode.
    pub fn new(classifier: &'a ClassifierModel, extractor: Option<&'a ClassifierModel>) -> Self {
        PerceptualSession {
            classifier,
            extractor,
            reference: None,
            counter: PassCounter::new(),
        }
    }

    pub fn is_self_bounded(&self) -> bool {
        self.extractor.is_none()
    }

    pub fn classifier(&self) -> &'a ClassifierModel {
        self.classifier
    }

    /// The network that defines the perceptual distance.
    pub fn extractor(&self) -> &'a ClassifierModel {
        self.extractor.unwrap_or(self.classifier)
    }

    pub fn counter(&self) -> PassCounter {
        self.counter
    }

    pub fn reference(&self) -> &FeatureEmbedding {
        self.reference
            .as_ref()
            .expect("reference embedding not prepared")
    }

    /// Cache the reference embedding of the original input.
    ///
    /// When `counted`, the evaluation runs in gradient mode and its reverse
    /// traversal is executed (one forward, one backward) — the `+1` constants
    /// of the LPA and Fast-LPA schedules. PPGD's schedule has no slot for the
    /// cache fill, so it passes `counted = false` and the evaluation runs on
    /// a scratch counter.
    pub fn prepare_reference(&mut self, x: &Tensor, counted: bool) -> Result<()> {
        if counted {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let (embed, segments) =
                lpips::record_embedding(&mut tape, self.extractor(), xv, &mut self.counter)?;
            let flat = tape.value(embed).clone();
            tape.backward_with_cotangent(embed, &flat)?;
            self.counter.record_backward();
            self.reference = Some(FeatureEmbedding { flat, segments });
        } else {
            let mut scratch = PassCounter::new();
            self.reference = Some(lpips::embed(self.extractor(), x, &mut scratch)?);
        }
        Ok(())
    }

    /// Recorded evaluation at the iterate: one forward pass when
    /// self-bounded (joint logits + embedding), two when external.
    pub(crate) fn record_step(&mut self, x_tilde: &Tensor) -> Result<StepEval> {
        match self.extractor {
            None => {
                let mut tape = Tape::new();
                let input = tape.leaf(x_tilde.clone());
                let rec = self
                    .classifier
                    .record_forward(&mut tape, input, &mut self.counter)?;
                let (embed, _) = lpips::record_embedding_from_features(&mut tape, &rec.features)?;
                Ok(StepEval::Joint {
                    tape,
                    input,
                    logits: rec.logits,
                    embed,
                })
            }
            Some(ext) => {
                let mut cls_tape = Tape::new();
                let cls_input = cls_tape.leaf(x_tilde.clone());
                let rec =
                    self.classifier
                        .record_forward(&mut cls_tape, cls_input, &mut self.counter)?;
                let mut ext_tape = Tape::new();
                let ext_input = ext_tape.leaf(x_tilde.clone());
                let (embed, _) =
                    lpips::record_embedding(&mut ext_tape, ext, ext_input, &mut self.counter)?;
                Ok(StepEval::Split {
                    cls_tape,
                    cls_input,
                    logits: rec.logits,
                    ext_tape,
                    ext_input,
                    embed,
                })
            }
        }
    }

    fn objective_node(
        tape: &mut Tape,
        logits: Var,
        y: usize,
        objective: Objective,
    ) -> Result<Var> {
        match objective {
            Objective::Margin => nn::margin_loss_node(tape, logits, y),
            Objective::CrossEntropy => nn::cross_entropy_node(tape, logits, y),
        }
    }

    /// Gradient of the classification objective at the iterate: one reverse
    /// traversal of the classifier graph.
    pub(crate) fn objective_grad(
        &mut self,
        step: &mut StepEval,
        y: usize,
        objective: Objective,
    ) -> Result<(f64, Tensor)> {
        let (tape, input, logits) = match step {
            StepEval::Joint {
                tape, input, logits, ..
            } => (tape, *input, *logits),
            StepEval::Split {
                cls_tape,
                cls_input,
                logits,
                ..
            } => (cls_tape, *cls_input, *logits),
        };
        let loss = Self::objective_node(tape, logits, y, objective)?;
        let value = tape.value(loss).scalar_value()?;
        let grads = tape.backward(loss)?;
        self.counter.record_backward();
        let shape = tape.value(input).shape().to_vec();
        Ok((value, grads.wrt_or_zeros(input, &shape)))
    }

    /// Value and gradient of the penalized objective
    /// `L(f(x),y) - lambda * max(0, d(x, x0) - eps)`.
    ///
    /// Self-bounded: one traversal of the joint graph. External: one
    /// traversal of the classifier graph plus one of the extractor graph.
    /// Returns (objective value, current distance, ascent direction).
    pub(crate) fn lagrangian_grad(
        &mut self,
        step: &mut StepEval,
        y: usize,
        lambda: f64,
        eps: f64,
        objective: Objective,
    ) -> Result<(f64, f64, Tensor)> {
        let reference = self.reference().flat.clone();
        match step {
            StepEval::Joint {
                tape,
                input,
                logits,
                embed,
            } => {
                let loss = Self::objective_node(tape, *logits, y, objective)?;
                let refv = tape.leaf(reference);
                let diff = tape.sub(*embed, refv)?;
                let dist = tape.l2_norm(diff)?;
                let shifted = tape.add_scalar(dist, -eps)?;
                let penalty = tape.relu(shifted)?;
                let weighted = tape.scalar_mul(penalty, lambda)?;
                let root = tape.sub(loss, weighted)?;
                let loss_value = tape.value(loss).scalar_value()?;
                let d_value = tape.value(dist).scalar_value()?;
                let grads = tape.backward(root)?;
                self.counter.record_backward();
                let shape = tape.value(*input).shape().to_vec();
                Ok((loss_value, d_value, grads.wrt_or_zeros(*input, &shape)))
            }
            StepEval::Split {
                cls_tape,
                cls_input,
                logits,
                ext_tape,
                ext_input,
                embed,
            } => {
                let loss = Self::objective_node(cls_tape, *logits, y, objective)?;
                let loss_value = cls_tape.value(loss).scalar_value()?;
                let cls_grads = cls_tape.backward(loss)?;
                self.counter.record_backward();
                let shape = cls_tape.value(*cls_input).shape().to_vec();
                let g_loss = cls_grads.wrt_or_zeros(*cls_input, &shape);

                let refv = ext_tape.leaf(reference);
                let diff = ext_tape.sub(*embed, refv)?;
                let dist = ext_tape.l2_norm(diff)?;
                let shifted = ext_tape.add_scalar(dist, -eps)?;
                let penalty = ext_tape.relu(shifted)?;
                let d_value = ext_tape.value(dist).scalar_value()?;
                let ext_grads = ext_tape.backward(penalty)?;
                self.counter.record_backward();
                let g_pen = ext_grads.wrt_or_zeros(*ext_input, &shape);

                let direction = tensor::axpy(&g_loss, -lambda, &g_pen)?;
                Ok((loss_value, d_value, direction))
            }
        }
    }

    /// Vector-Jacobian product of the embedding at the iterate: one reverse
    /// traversal of the (already recorded) embedding graph.
    pub(crate) fn vjp(&mut self, step: &StepEval, cotangent: &Tensor) -> Result<Tensor> {
        let (tape, input, embed) = match step {
            StepEval::Joint {
                tape, input, embed, ..
            } => (tape, *input, *embed),
            StepEval::Split {
                ext_tape,
                ext_input,
                embed,
                ..
            } => (ext_tape, *ext_input, *embed),
        };
        let grads = tape.backward_with_cotangent(embed, cotangent)?;
        self.counter.record_backward();
        let shape = tape.value(input).shape().to_vec();
        Ok(grads.wrt_or_zeros(input, &shape))
    }

    /// Inference-mode embedding of a probe point: one forward pass.
    pub fn probe_embed(&mut self, point: &Tensor) -> Result<Tensor> {
        let acts = self.extractor().activations(point, &mut self.counter)?;
        Ok(lpips::embed_from_activations(&acts)?.flat)
    }

    /// Inference-mode distance to the cached reference: one forward pass.
    pub fn probe_distance(&mut self, point: &Tensor) -> Result<f64> {
        let e = self.probe_embed(point)?;
        Ok(tensor::sub(&e, &self.reference().flat)?.l2_norm())
    }

    /// Gradient-mode distance to the cached reference: one forward pass plus
    /// one executed reverse traversal. Returns the distance and its gradient
    /// with respect to the probe point.
    pub fn recorded_distance(&mut self, point: &Tensor) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(point.clone());
        let (embed, _) =
            lpips::record_embedding(&mut tape, self.extractor(), xv, &mut self.counter)?;
        let refv = tape.leaf(self.reference().flat.clone());
        let diff = tape.sub(embed, refv)?;
        let dist = tape.l2_norm(diff)?;
        let d_value = tape.value(dist).scalar_value()?;
        let grads = tape.backward(dist)?;
        self.counter.record_backward();
        Ok((d_value, grads.wrt_or_zeros(xv, point.shape())))
    }

    /// Uncounted outcome measurement after the optimization loop: final
    /// margin, success flag, and LPIPS distance at the final iterate.
    pub fn finalize(&self, x_tilde: &Tensor, y: usize) -> Result<(f64, bool, f64)> {
        let mut scratch = PassCounter::new();
        let logits = self.classifier.logits(x_tilde, &mut scratch)?;
        let margin = nn::margin_loss(&logits, y)?;
        let e = lpips::embed(self.extractor(), x_tilde, &mut scratch)?;
        let d = tensor::sub(&e.flat, &self.reference().flat)?.l2_norm();
        Ok((margin, margin > 0.0, d))
    }
}

/// Validate that the extractor argument agrees with the configured bound
/// mode and return the session.
pub(crate) fn open_session<'a>(
    classifier: &'a ClassifierModel,
    extractor: Option<&'a ClassifierModel>,
    bound_mode: super::config::BoundMode,
) -> Result<PerceptualSession<'a>> {
    use super::config::BoundMode;
    match (bound_mode, extractor) {
        (BoundMode::SelfBounded, None) => Ok(PerceptualSession::new(classifier, None)),
        (BoundMode::External, Some(ext)) => Ok(PerceptualSession::new(classifier, Some(ext))),
        (BoundMode::SelfBounded, Some(_)) => Err(Error::InvalidConfig(
            "self-bounded attack must not receive a separate distance model".into(),
        )),
        (BoundMode::External, None) => Err(Error::InvalidConfig(
            "externally-bounded attack requires a distance model".into(),
        )),
    }
}
