//! Evaluation: per-attack accuracy, union and unseen-mean aggregates, and
//! distance-distribution measurement.

use crate::attack::{self, AttackConfig, BoundMode, Objective};
use crate::data::{derive_seed, DatasetHandle};
use crate::error::{Error, Result};
use crate::lpips;
use crate::nn::{self, ClassifierModel};
use crate::passes::PassCounter;
use crate::tensor::{self, Tensor};
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

/// A named, fully configured attack for the evaluation harness.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    None,
    PgdL2 {
        bound: f64,
        steps: usize,
        step_size: f64,
    },
    PgdLinf {
        bound: f64,
        steps: usize,
        step_size: f64,
    },
    Ppgd(AttackConfig),
    Lpa(AttackConfig),
    FastLpa(AttackConfig),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::PgdL2 { .. } => "pgd_l2",
            AttackSpec::PgdLinf { .. } => "pgd_linf",
            AttackSpec::Ppgd(_) => "ppgd",
            AttackSpec::Lpa(_) => "lpa",
            AttackSpec::FastLpa(_) => "fast_lpa",
        }
    }

    /// Build a spec from a registry name. Perceptual attacks take their
    /// hyperparameters from `base`; PGD baselines take `bound_override` (or
    /// `base.bound`), `base.steps`, and a 2.5*bound/steps step size.
    pub fn from_name(
        name: &str,
        base: &AttackConfig,
        bound_override: Option<f64>,
    ) -> Result<AttackSpec> {
        let pgd_bound = bound_override.unwrap_or(base.bound);
        let pgd_step = 2.5 * pgd_bound / base.steps as f64;
        let with_bound = |mut cfg: AttackConfig| {
            if let Some(b) = bound_override {
                cfg.bound = b;
            }
            cfg
        };
        match name {
            "none" => Ok(AttackSpec::None),
            "pgd_l2" => Ok(AttackSpec::PgdL2 {
                bound: pgd_bound,
                steps: base.steps,
                step_size: if pgd_step > 0.0 { pgd_step } else { 1e-3 },
            }),
            "pgd_linf" => Ok(AttackSpec::PgdLinf {
                bound: pgd_bound,
                steps: base.steps,
                step_size: if pgd_step > 0.0 { pgd_step } else { 1e-3 },
            }),
            "ppgd" => Ok(AttackSpec::Ppgd(with_bound(base.clone()))),
            "lpa" => Ok(AttackSpec::Lpa(with_bound(base.clone()))),
            "fast_lpa" => Ok(AttackSpec::FastLpa(with_bound(base.clone()))),
            other => Err(Error::UnknownAttack(other.to_string())),
        }
    }

    fn stream_tag(&self) -> u64 {
        match self {
            AttackSpec::None => 0,
            AttackSpec::PgdL2 { .. } => 1,
            AttackSpec::PgdLinf { .. } => 2,
            AttackSpec::Ppgd(_) => 3,
            AttackSpec::Lpa(_) => 4,
            AttackSpec::FastLpa(_) => 5,
        }
    }
}

/// Per-example distances of an adversarial example from its original.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceTriple {
    pub l2: f64,
    pub linf: f64,
    pub lpips: f64,
}

/// Accuracy plus per-example detail for one attack over a dataset.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// Post-attack correctness per example (initially misclassified examples
    /// count as incorrect, matching robust-accuracy semantics).
    pub correct: Vec<bool>,
    pub distances: Vec<DistanceTriple>,
}

fn run_attack_on(
    model: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    spec: &AttackSpec,
    x: &Tensor,
    y: usize,
    seed: u64,
) -> Result<Tensor> {
    match spec {
        AttackSpec::None => Ok(x.clone()),
        AttackSpec::PgdL2 {
            bound,
            steps,
            step_size,
        } => Ok(attack::pgd_l2(
            model,
            x,
            y,
            *bound,
            *steps,
            *step_size,
            Objective::Margin,
            false,
        )?
        .adversarial),
        AttackSpec::PgdLinf {
            bound,
            steps,
            step_size,
        } => Ok(attack::pgd_linf(
            model,
            x,
            y,
            *bound,
            *steps,
            *step_size,
            Objective::Margin,
            false,
        )?
        .adversarial),
        AttackSpec::Ppgd(cfg) => {
            let cfg = seeded(cfg, seed, extractor);
            Ok(attack::ppgd(model, extractor, x, y, &cfg)?.adversarial)
        }
        AttackSpec::Lpa(cfg) => {
            let cfg = seeded(cfg, seed, extractor);
            Ok(attack::lpa(model, extractor, x, y, &cfg)?.adversarial)
        }
        AttackSpec::FastLpa(cfg) => {
            let cfg = seeded(cfg, seed, extractor);
            Ok(attack::fast_lpa(model, extractor, x, y, &cfg)?.adversarial)
        }
    }
}

fn seeded(cfg: &AttackConfig, seed: u64, extractor: Option<&ClassifierModel>) -> AttackConfig {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.bound_mode = if extractor.is_some() {
        BoundMode::External
    } else {
        BoundMode::SelfBounded
    };
    cfg
}

/// An attack swept over a dataset: the adversarial batch plus its outcome.
#[derive(Debug, Clone)]
pub struct AttackRun {
    /// Adversarial examples, `[n, c, h, w]` in dataset order.
    pub adversarial: Tensor,
    pub outcome: EvalOutcome,
}

/// Run one attack over every example (in parallel, reduced in dataset
/// order). `extractor = None` bounds the perceptual attacks with the
/// attacked model itself.
pub fn run_attack(
    model: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    dataset: &DatasetHandle,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AttackRun> {
    let distance_net = extractor.unwrap_or(model);
    let tag = spec.stream_tag();
    let rows: Vec<(Tensor, bool, DistanceTriple)> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let x = dataset.example(i);
            let y = dataset.label(i);
            let adv = run_attack_on(model, extractor, spec, &x, y, derive_seed(seed, tag, i as u64))?;
            let mut scratch = PassCounter::new();
            let logits = model.logits(&adv, &mut scratch)?;
            let correct = nn::predict(&logits) == y;
            let delta = tensor::sub(&adv, &x)?;
            let distances = DistanceTriple {
                l2: delta.l2_norm(),
                linf: delta.linf_norm(),
                lpips: lpips::lpips_distance(distance_net, &x, &adv)?,
            };
            Ok((adv, correct, distances))
        })
        .collect::<Result<Vec<_>>>()?;

    let [c, h, w] = dataset.example_shape();
    let mut batch = Vec::with_capacity(dataset.len() * c * h * w);
    let mut correct = Vec::with_capacity(rows.len());
    let mut distances = Vec::with_capacity(rows.len());
    for (adv, ok, d) in rows {
        batch.extend_from_slice(adv.data());
        correct.push(ok);
        distances.push(d);
    }
    let adversarial = Tensor::new(vec![dataset.len(), c, h, w], batch)?;
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len().max(1) as f64;
    Ok(AttackRun {
        adversarial,
        outcome: EvalOutcome {
            accuracy,
            correct,
            distances,
        },
    })
}

/// Accuracy of `model` under one attack.
pub fn evaluate_accuracy(
    model: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    dataset: &DatasetHandle,
    spec: &AttackSpec,
    seed: u64,
) -> Result<EvalOutcome> {
    Ok(run_attack(model, extractor, dataset, spec, seed)?.outcome)
}

/// Fraction of examples correct under every attack simultaneously. An empty
/// attack list yields the clean accuracy (vacuous intersection).
pub fn union_accuracy(clean: &[bool], per_attack: &[Vec<bool>]) -> Result<f64> {
    for v in per_attack {
        if v.len() != clean.len() {
            return Err(Error::ShapeMismatch(format!(
                "union over vectors of lengths {} and {}",
                clean.len(),
                v.len()
            )));
        }
    }
    if clean.is_empty() {
        return Err(Error::ShapeMismatch("union over zero examples".into()));
    }
    let robust = (0..clean.len())
        .filter(|&i| {
            if per_attack.is_empty() {
                clean[i]
            } else {
                per_attack.iter().all(|v| v[i])
            }
        })
        .count();
    Ok(robust as f64 / clean.len() as f64)
}

/// Mean accuracy over the attacks not trained against.
pub fn unseen_mean_accuracy(
    per_attack: &BTreeMap<String, f64>,
    trained_against: &BTreeSet<String>,
) -> Result<f64> {
    for name in trained_against {
        if !per_attack.contains_key(name) {
            return Err(Error::UnknownAttack(name.clone()));
        }
    }
    let unseen: Vec<f64> = per_attack
        .iter()
        .filter(|(name, _)| !trained_against.contains(*name))
        .map(|(_, acc)| *acc)
        .collect();
    if unseen.is_empty() {
        return Err(Error::EmptyComplement);
    }
    Ok(unseen.iter().sum::<f64>() / unseen.len() as f64)
}

/// Summary statistics of one distance metric over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

/// Nearest-rank percentile of a sample (q in [0,1]).
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl DistanceStats {
    pub fn from_samples(samples: &[f64]) -> DistanceStats {
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        DistanceStats {
            mean: samples.iter().sum::<f64>() / samples.len().max(1) as f64,
            median: percentile(&sorted, 0.5),
            p5: percentile(&sorted, 0.05),
            p95: percentile(&sorted, 0.95),
        }
    }
}

/// Distance distributions of one attack's adversarial examples.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AttackDistanceStats {
    pub attack: String,
    pub l2: DistanceStats,
    pub linf: DistanceStats,
    pub lpips: DistanceStats,
}

/// Generate adversarial examples for every listed attack and summarize their
/// L2, Linf, and LPIPS distances from the natural inputs.
pub fn measure_distance_distributions(
    model: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    dataset: &DatasetHandle,
    specs: &[AttackSpec],
    seed: u64,
) -> Result<Vec<AttackDistanceStats>> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let outcome = evaluate_accuracy(model, extractor, dataset, spec, seed)?;
        let l2: Vec<f64> = outcome.distances.iter().map(|d| d.l2).collect();
        let linf: Vec<f64> = outcome.distances.iter().map(|d| d.linf).collect();
        let lp: Vec<f64> = outcome.distances.iter().map(|d| d.lpips).collect();
        out.push(AttackDistanceStats {
            attack: spec.name().to_string(),
            l2: DistanceStats::from_samples(&l2),
            linf: DistanceStats::from_samples(&linf),
            lpips: DistanceStats::from_samples(&lp),
        });
    }
    Ok(out)
}

/// CSV emission for distance distributions:
/// `attack,metric,mean,median,p5,p95`.
pub fn distance_stats_to_csv(stats: &[AttackDistanceStats]) -> String {
    let mut out = String::from("attack,metric,mean,median,p5,p95\n");
    for s in stats {
        for (metric, d) in [("l2", &s.l2), ("linf", &s.linf), ("lpips", &s.lpips)] {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.attack, metric, d.mean, d.median, d.p5, d.p95
            ));
        }
    }
    out
}

/// Choose a PGD bound whose adversarial examples have a median LPIPS
/// distance matching `target_lpips` on the given dataset: doubling search
/// for an upper bracket, then fixed bisection. Deterministic under `seed`.
/// This is a desk-scale stand-in for perceptual-study calibration.
pub fn calibrate_pgd_bound(
    model: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    dataset: &DatasetHandle,
    linf: bool,
    steps: usize,
    target_lpips: f64,
    seed: u64,
) -> Result<f64> {
    let median_for = |bound: f64| -> Result<f64> {
        let spec = if linf {
            AttackSpec::PgdLinf {
                bound,
                steps,
                step_size: 2.5 * bound / steps as f64,
            }
        } else {
            AttackSpec::PgdL2 {
                bound,
                steps,
                step_size: 2.5 * bound / steps as f64,
            }
        };
        let outcome = evaluate_accuracy(model, extractor, dataset, &spec, seed)?;
        let lp: Vec<f64> = outcome.distances.iter().map(|d| d.lpips).collect();
        Ok(DistanceStats::from_samples(&lp).median)
    };

    let mut hi = if linf { 0.01 } else { 0.25 };
    let mut grow = 0;
    while median_for(hi)? < target_lpips && grow < 12 {
        hi *= 2.0;
        grow += 1;
    }
    let mut lo = 0.0;
    for _ in 0..10 {
        let mid = 0.5 * (lo + hi);
        if median_for(mid)? < target_lpips {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::nn::{init_model, ModelSpec};

    fn setup() -> (ClassifierModel, DatasetHandle) {
        let data = generate_synthetic_dataset(3, 3, 8, 4, 0.1).unwrap();
        let model = init_model(&ModelSpec::tiny_cnn([1, 8, 8], 3), 5).unwrap();
        (model, data)
    }

    #[test]
    fn none_attack_equals_clean_accuracy() {
        let (model, data) = setup();
        let clean = evaluate_accuracy(&model, None, &data, &AttackSpec::None, 1).unwrap();
        // direct enumeration
        let mut scratch = PassCounter::new();
        let mut manual = 0;
        for i in 0..data.len() {
            let logits = model.logits(&data.example(i), &mut scratch).unwrap();
            if nn::predict(&logits) == data.label(i) {
                manual += 1;
            }
        }
        assert_eq!(clean.accuracy, manual as f64 / data.len() as f64);
        assert!(clean.distances.iter().all(|d| d.l2 == 0.0 && d.lpips == 0.0));
    }

    #[test]
    fn zero_bound_attack_equals_clean_accuracy() {
        let (model, data) = setup();
        let clean = evaluate_accuracy(&model, None, &data, &AttackSpec::None, 1).unwrap();
        let spec = AttackSpec::PgdLinf {
            bound: 0.0,
            steps: 3,
            step_size: 0.01,
        };
        let attacked = evaluate_accuracy(&model, None, &data, &spec, 1).unwrap();
        assert_eq!(clean.correct, attacked.correct);
    }

    #[test]
    fn accuracy_cross_checked_by_enumeration_under_attack() {
        let (model, data) = setup();
        let spec = AttackSpec::PgdLinf {
            bound: 0.05,
            steps: 5,
            step_size: 0.02,
        };
        let outcome = evaluate_accuracy(&model, None, &data, &spec, 9).unwrap();
        let agree = outcome.correct.iter().filter(|&&c| c).count() as f64
            / outcome.correct.len() as f64;
        assert_eq!(outcome.accuracy, agree);
        assert_eq!(outcome.correct.len(), data.len());
    }

    #[test]
    fn union_accuracy_examples() {
        // robust sets {1,2,3} and {2,3} over N=5 -> 2/5
        let clean = vec![true; 5];
        let a = vec![false, true, true, true, false];
        let b = vec![false, false, true, true, false];
        let u = union_accuracy(&clean, &[a.clone(), b]).unwrap();
        assert_eq!(u, 2.0 / 5.0);
        // single attack equals that attack's accuracy
        assert_eq!(union_accuracy(&clean, &[a.clone()]).unwrap(), 3.0 / 5.0);
        // empty list -> clean accuracy
        let clean2 = vec![true, false, true, false, true];
        assert_eq!(union_accuracy(&clean2, &[]).unwrap(), 3.0 / 5.0);
        // mismatched lengths are an error
        assert!(union_accuracy(&clean, &[vec![true]]).is_err());
    }

    #[test]
    fn union_never_exceeds_any_constituent() {
        let clean = vec![true; 8];
        let a = vec![true, true, false, true, false, true, true, false];
        let b = vec![true, false, true, true, true, false, true, true];
        let u = union_accuracy(&clean, &[a.clone(), b.clone()]).unwrap();
        let acc = |v: &Vec<bool>| v.iter().filter(|&&c| c).count() as f64 / v.len() as f64;
        assert!(u <= acc(&a));
        assert!(u <= acc(&b));
    }

    #[test]
    fn unseen_mean_examples() {
        let mut accs = BTreeMap::new();
        accs.insert("a".to_string(), 0.4);
        accs.insert("b".to_string(), 0.6);
        let trained: BTreeSet<String> = ["a".to_string()].into_iter().collect();
        assert_eq!(unseen_mean_accuracy(&accs, &trained).unwrap(), 0.6);
        assert_eq!(
            unseen_mean_accuracy(&accs, &BTreeSet::new()).unwrap(),
            0.5
        );
        let all: BTreeSet<String> = ["a".to_string(), "b".to_string()].into_iter().collect();
        assert!(matches!(
            unseen_mean_accuracy(&accs, &all),
            Err(Error::EmptyComplement)
        ));
        let unknown: BTreeSet<String> = ["zzz".to_string()].into_iter().collect();
        assert!(matches!(
            unseen_mean_accuracy(&accs, &unknown),
            Err(Error::UnknownAttack(_))
        ));
    }

    #[test]
    fn unknown_attack_names_are_rejected() {
        let base = AttackConfig::new(0.1);
        assert!(matches!(
            AttackSpec::from_name("madeup", &base, None),
            Err(Error::UnknownAttack(_))
        ));
        assert_eq!(
            AttackSpec::from_name("lpa", &base, Some(0.2)).unwrap().name(),
            "lpa"
        );
    }

    #[test]
    fn pgd_distance_distributions_respect_bounds() {
        let (model, data) = setup();
        let eps = 0.04;
        let specs = vec![AttackSpec::PgdLinf {
            bound: eps,
            steps: 4,
            step_size: 0.02,
        }];
        let stats = measure_distance_distributions(&model, None, &data, &specs, 2).unwrap();
        assert_eq!(stats.len(), 1);
        assert!(stats[0].linf.p95 <= eps + 1e-12);
        assert!(stats[0].linf.mean <= eps + 1e-12);
    }

    #[test]
    fn lpa_distance_distributions_respect_the_perceptual_bound() {
        let (model, data) = setup();
        let mut cfg = AttackConfig::new(0.15);
        cfg.steps = 3;
        cfg.lambda_rounds = 2;
        let specs = vec![AttackSpec::Lpa(cfg)];
        let stats = measure_distance_distributions(&model, None, &data, &specs, 4).unwrap();
        assert!(stats[0].lpips.p95 <= 0.15 * (1.0 + 1e-6));
    }

    #[test]
    fn distance_csv_schema() {
        let stats = vec![AttackDistanceStats {
            attack: "x".into(),
            l2: DistanceStats::from_samples(&[1.0, 2.0]),
            linf: DistanceStats::from_samples(&[0.5]),
            lpips: DistanceStats::from_samples(&[0.1, 0.2, 0.3]),
        }];
        let csv = distance_stats_to_csv(&stats);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "attack,metric,mean,median,p5,p95");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn percentile_nearest_rank() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&sorted, 0.5), 2.0);
        assert_eq!(percentile(&sorted, 0.05), 1.0);
        assert_eq!(percentile(&sorted, 0.95), 4.0);
        assert_eq!(percentile(&sorted, 1.0), 4.0);
    }

    #[test]
    fn calibration_matches_the_target_median() {
        let (model, data) = setup();
        let target = 0.08;
        let bound =
            calibrate_pgd_bound(&model, None, &data, true, 4, target, 7).unwrap();
        assert!(bound > 0.0);
        let spec = AttackSpec::PgdLinf {
            bound,
            steps: 4,
            step_size: 2.5 * bound / 4.0,
        };
        let outcome = evaluate_accuracy(&model, None, &data, &spec, 7).unwrap();
        let lp: Vec<f64> = outcome.distances.iter().map(|d| d.lpips).collect();
        let median = DistanceStats::from_samples(&lp).median;
        assert!(
            (median - target).abs() / target < 0.35,
            "calibrated median {median} vs target {target}"
        );
    }
}
