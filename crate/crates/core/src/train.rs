//! Training: plain SGD, PGD adversarial training, and perceptual adversarial
//! training with Fast-LPA as the inner maximizer.
//!
//! One engine drives all three modes. Every epoch shuffles the example order
//! (seeded per epoch), walks batches, optionally perturbs each example with
//! the configured inner attack against a read-only snapshot of the current
//! parameters, and takes one SGD-with-momentum step on the mean cross-entropy
//! of the batch. Per-example work runs in parallel; gradients are reduced in
//! example order, so results are bit-reproducible for a fixed seed.

use crate::attack::{self, AttackConfig, BoundMode, Objective};
use crate::data::{derive_seed, DatasetHandle};
use crate::error::{Error, Result};
use crate::nn::{self, ClassifierModel};
use crate::passes::PassCounter;
use crate::tensor::{self, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::PathBuf;
use std::time::Instant;

/// Which network bounds the perceptual inner attack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainBound {
    /// The model being trained defines the distance; it changes as the
    /// parameters are optimized.
    SelfBounded,
    /// A fixed extractor loaded from a model archive.
    External(PathBuf),
}

/// Inner maximizer for `adv_train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    None,
    PgdL2,
    PgdLinf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (1-based) at which the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Perceptual training bound epsilon.
    pub bound: f64,
    /// Inner attack steps T.
    pub attack_steps: usize,
    pub bound_mode: TrainBound,
    /// Attack only examples the current model already classifies correctly;
    /// filtered-out examples contribute their clean loss.
    pub attack_correct_only: bool,
    pub baseline: BaselineMode,
    /// L_p bound for the PGD baseline trainer.
    pub baseline_bound: f64,
    /// PGD baseline step size; `None` selects 2.5 * bound / steps.
    pub baseline_step_size: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![15],
            lr_drop_factor: 0.1,
            bound: 0.5,
            attack_steps: 10,
            bound_mode: TrainBound::SelfBounded,
            attack_correct_only: false,
            baseline: BaselineMode::None,
            baseline_bound: 0.1,
            baseline_step_size: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.bound < 0.0 || self.baseline_bound < 0.0 {
            return Err(Error::InvalidConfig("training bounds must be >= 0".into()));
        }
        if self.attack_steps == 0 {
            return Err(Error::InvalidConfig("attack_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at a 1-based epoch index.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
        self.learning_rate * self.lr_drop_factor.powi(drops as i32)
    }
}

/// One epoch of log data.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub clean_acc: f64,
    pub attacked: usize,
    pub seconds: f64,
}

/// Per-epoch training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    /// CSV with header `epoch,clean_loss,adv_loss,clean_acc,attacked_count,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,clean_loss,adv_loss,clean_acc,attacked_count,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.clean_loss, e.adv_loss, e.clean_acc, e.attacked, e.seconds
            ));
        }
        out
    }
}

/// SGD momentum state, one velocity buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(model: &ClassifierModel) -> Self {
        SgdState {
            velocity: model
                .parameters()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        }
    }
}

/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
pub fn sgd_momentum_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch(format!(
                "sgd: param {:?} vs grad {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let decayed = tensor::axpy(grad, weight_decay, param)?;
        *vel = tensor::axpy(&decayed, momentum, vel)?;
        **param = tensor::axpy(param, -lr, vel)?;
    }
    Ok(())
}

enum InnerAttack<'a> {
    None,
    Pgd {
        mode: BaselineMode,
        bound: f64,
        steps: usize,
        step_size: f64,
    },
    FastLpa {
        bound: f64,
        steps: usize,
        extractor: Option<&'a ClassifierModel>,
    },
}

struct ExampleOutcome {
    grads: Vec<Tensor>,
    clean_loss: f64,
    adv_loss: f64,
    clean_correct: bool,
    attacked: bool,
}

/// Cross-entropy gradient of one (possibly perturbed) example with respect
/// to every parameter, in parameter order.
fn example_gradients(
    model: &ClassifierModel,
    x: &Tensor,
    y: usize,
) -> Result<(f64, bool, Vec<Tensor>)> {
    let mut scratch = PassCounter::new();
    let mut tape = crate::autodiff::Tape::new();
    let xv = tape.leaf(x.clone());
    let rec = model.record_forward(&mut tape, xv, &mut scratch)?;
    let loss = nn::cross_entropy_node(&mut tape, rec.logits, y)?;
    let loss_value = tape.value(loss).scalar_value()?;
    let correct = nn::predict(tape.value(rec.logits)) == y;
    let grads_all = tape.backward(loss)?;
    let mut grads = Vec::with_capacity(rec.params.len() * 2);
    for (_, w, b) in &rec.params {
        grads.push(grads_all.wrt_or_zeros(*w, tape.value(*w).shape()));
        grads.push(grads_all.wrt_or_zeros(*b, tape.value(*b).shape()));
    }
    Ok((loss_value, correct, grads))
}

fn attack_example(
    model: &ClassifierModel,
    inner: &InnerAttack<'_>,
    x: &Tensor,
    y: usize,
    seed: u64,
) -> Result<Tensor> {
    match inner {
        InnerAttack::None => Ok(x.clone()),
        InnerAttack::Pgd {
            mode,
            bound,
            steps,
            step_size,
        } => {
            let result = match mode {
                BaselineMode::PgdL2 => attack::pgd_l2(
                    model,
                    x,
                    y,
                    *bound,
                    *steps,
                    *step_size,
                    Objective::CrossEntropy,
                    false,
                )?,
                BaselineMode::PgdLinf => attack::pgd_linf(
                    model,
                    x,
                    y,
                    *bound,
                    *steps,
                    *step_size,
                    Objective::CrossEntropy,
                    false,
                )?,
                BaselineMode::None => unreachable!("checked by adv_train"),
            };
            Ok(result.adversarial)
        }
        InnerAttack::FastLpa {
            bound,
            steps,
            extractor,
        } => {
            let mut cfg = AttackConfig::new(*bound);
            cfg.steps = *steps;
            cfg.objective = Objective::CrossEntropy;
            cfg.seed = seed;
            cfg.bound_mode = if extractor.is_some() {
                BoundMode::External
            } else {
                BoundMode::SelfBounded
            };
            Ok(attack::fast_lpa(model, *extractor, x, y, &cfg)?.adversarial)
        }
    }
}

fn process_example(
    model: &ClassifierModel,
    inner: &InnerAttack<'_>,
    cfg: &TrainConfig,
    x: &Tensor,
    y: usize,
    seed: u64,
) -> Result<ExampleOutcome> {
    let inner_bound = match inner {
        InnerAttack::None => 0.0,
        InnerAttack::Pgd { bound, .. } => *bound,
        InnerAttack::FastLpa { bound, .. } => *bound,
    };
    if matches!(inner, InnerAttack::None) || inner_bound == 0.0 {
        // Inner maximization collapses to the clean loss.
        let (loss, correct, grads) = example_gradients(model, x, y)?;
        return Ok(ExampleOutcome {
            grads,
            clean_loss: loss,
            adv_loss: loss,
            clean_correct: correct,
            attacked: false,
        });
    }

    let mut scratch = PassCounter::new();
    let clean_logits = model.logits(x, &mut scratch)?;
    let clean_loss = nn::cross_entropy_loss(&clean_logits, y)?;
    let clean_correct = nn::predict(&clean_logits) == y;

    if cfg.attack_correct_only && !clean_correct {
        let (loss, correct, grads) = example_gradients(model, x, y)?;
        return Ok(ExampleOutcome {
            grads,
            clean_loss,
            adv_loss: loss,
            clean_correct: correct,
            attacked: false,
        });
    }

    let adversarial = attack_example(model, inner, x, y, seed)?;
    let (adv_loss, _, grads) = example_gradients(model, &adversarial, y)?;
    Ok(ExampleOutcome {
        grads,
        clean_loss,
        adv_loss,
        clean_correct,
        attacked: true,
    })
}

fn train_engine(
    mut model: ClassifierModel,
    dataset: &DatasetHandle,
    cfg: &TrainConfig,
    inner: InnerAttack<'_>,
) -> Result<(ClassifierModel, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if model.spec().input_shape != dataset.example_shape() {
        return Err(Error::ShapeMismatch(format!(
            "model expects {:?}, dataset provides {:?}",
            model.spec().input_shape,
            dataset.example_shape()
        )));
    }

    let n = dataset.len();
    let mut state = SgdState::new(&model);
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 100, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut clean_loss_sum = 0.0;
        let mut adv_loss_sum = 0.0;
        let mut correct = 0usize;
        let mut attacked = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &model;
            let outcomes: Vec<ExampleOutcome> = batch
                .par_iter()
                .map(|&idx| {
                    process_example(
                        snapshot,
                        &inner,
                        cfg,
                        &dataset.example(idx),
                        dataset.label(idx),
                        derive_seed(cfg.seed, epoch as u64, idx as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;

            let mut mean_grads: Vec<Tensor> = outcomes[0]
                .grads
                .iter()
                .map(|g| Tensor::zeros(g.shape()))
                .collect();
            let scale = 1.0 / outcomes.len() as f64;
            for outcome in &outcomes {
                if !outcome.adv_loss.is_finite() || !outcome.clean_loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}"
                    )));
                }
                for (acc, g) in mean_grads.iter_mut().zip(&outcome.grads) {
                    *acc = tensor::axpy(acc, scale, g)?;
                }
                clean_loss_sum += outcome.clean_loss;
                adv_loss_sum += outcome.adv_loss;
                correct += outcome.clean_correct as usize;
                attacked += outcome.attacked as usize;
            }

            let mut params = model.parameters_mut();
            sgd_momentum_step(
                &mut params,
                &mean_grads,
                &mut state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }

        log.epochs.push(EpochStats {
            epoch,
            clean_loss: clean_loss_sum / n as f64,
            adv_loss: adv_loss_sum / n as f64,
            clean_acc: correct as f64 / n as f64,
            attacked,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok((model, log))
}

/// Plain SGD on the clean cross-entropy.
pub fn standard_train(
    model: ClassifierModel,
    dataset: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainLog)> {
    train_engine(model, dataset, cfg, InnerAttack::None)
}

/// Adversarial training with the configured PGD baseline as the inner
/// maximizer (cross-entropy objective).
pub fn adv_train(
    model: ClassifierModel,
    dataset: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainLog)> {
    if cfg.baseline == BaselineMode::None {
        return Err(Error::InvalidConfig(
            "adv_train requires baseline = pgd_l2 or pgd_linf".into(),
        ));
    }
    let step_size = cfg
        .baseline_step_size
        .unwrap_or(2.5 * cfg.baseline_bound / cfg.attack_steps as f64);
    let inner = InnerAttack::Pgd {
        mode: cfg.baseline,
        bound: cfg.baseline_bound,
        steps: cfg.attack_steps,
        step_size: if step_size > 0.0 { step_size } else { 1e-3 },
    };
    train_engine(model, dataset, cfg, inner)
}

/// Perceptual adversarial training: Fast-LPA inner maximizer at the training
/// bound. Self-bounded mode recomputes the perceptual embedding with the
/// current parameters at every attack; externally-bounded mode uses a fixed
/// extractor loaded from the configured archive.
pub fn pat_train(
    model: ClassifierModel,
    dataset: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainLog)> {
    let external = match &cfg.bound_mode {
        TrainBound::SelfBounded => None,
        TrainBound::External(path) => Some(nn::archive::load_model(path)?),
    };
    let inner = InnerAttack::FastLpa {
        bound: cfg.bound,
        steps: cfg.attack_steps,
        extractor: external.as_ref(),
    };
    train_engine(model, dataset, cfg, inner)
}
