//! `pra` command line: train models, run attacks, evaluate robustness,
//! measure distance distributions, and check gradients.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use clap::{Arg, ArgAction, Command};
use pra_core::attack::AttackConfig;
use pra_core::config::RunConfig;
use pra_core::data::{derive_seed, DatasetHandle};
use pra_core::eval::{self, AttackSpec};
use pra_core::io::Dtype;
use pra_core::nn::{self, archive, ClassifierModel, ModelSpec};
use pra_core::report::{per_example_csv, write_text, AttackReport, EvalReport};
use pra_core::train::{self, BaselineMode};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<pra_core::Error> for CliError {
    fn from(e: pra_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Run the CLI on the given argument list (including argv[0]); returns the
/// process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let args: Vec<String> = args.into_iter().collect();
    let cmd = build_command();
    let matches = match cmd.try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    let outcome = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("attack", m)) => cmd_attack(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("distances", m)) => cmd_distances(m),
        Some(("gradcheck", m)) => cmd_gradcheck(m),
        _ => Err(CliError::Usage(
            "missing subcommand; see `pra --help`".to_string(),
        )),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn data_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("data")
            .long("data")
            .required(true)
            .help("dataset: a .prkt tensor archive or synth:classes=K,size=S,per_class=N,noise=Z[,split=NAME]"),
    )
    .arg(
        Arg::new("labels")
            .long("labels")
            .help("label archive (.prkl); required for file datasets"),
    )
}

fn attack_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("config").long("config").help("key = value config file"))
        .arg(Arg::new("bound").long("bound").help("perceptual bound epsilon override"))
        .arg(Arg::new("steps").long("steps").help("attack steps override"))
        .arg(
            Arg::new("lpips-model")
                .long("lpips-model")
                .help("distance network: `self` or a model archive path"),
        )
        .arg(
            Arg::new("projection")
                .long("projection")
                .help("projection method: newton or bisection"),
        )
        .arg(Arg::new("seed").long("seed").help("seed override"))
}

fn build_command() -> Command {
    Command::new("pra")
        .about("perceptual robustness attacks, training, and evaluation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            data_args(
                Command::new("train")
                    .about("train a classifier (standard, PGD-adversarial, or perceptual)"),
            )
            .arg(Arg::new("config").long("config").help("key = value config file"))
            .arg(Arg::new("seed").long("seed").help("seed override"))
            .arg(
                Arg::new("out")
                    .long("out")
                    .required(true)
                    .help("output model archive (.prkm)"),
            )
            .arg(Arg::new("log").long("log").help("training log CSV path")),
        )
        .subcommand(
            attack_args(data_args(
                Command::new("attack").about("run one attack over a dataset"),
            ))
            .arg(
                Arg::new("model")
                    .long("model")
                    .required(true)
                    .help("model archive to attack"),
            )
            .arg(
                Arg::new("attack")
                    .long("attack")
                    .required(true)
                    .help("attack name: none|pgd_l2|pgd_linf|ppgd|lpa|fast_lpa, optional :bound"),
            )
            .arg(Arg::new("out").long("out").help("adversarial examples archive (.prkt)"))
            .arg(Arg::new("report").long("report").help("JSON report path")),
        )
        .subcommand(
            attack_args(data_args(
                Command::new("eval").about("evaluate a model against a set of attacks"),
            ))
            .arg(
                Arg::new("model")
                    .long("model")
                    .required(true)
                    .help("model archive to evaluate"),
            )
            .arg(
                Arg::new("attack")
                    .long("attack")
                    .required(true)
                    .help("comma-separated attack names, each optionally name:bound"),
            )
            .arg(
                Arg::new("trained-against")
                    .long("trained-against")
                    .help("comma-separated attacks the model was trained against"),
            )
            .arg(
                Arg::new("report")
                    .long("report")
                    .required(true)
                    .help("JSON report path; per-example and distance CSVs are written alongside"),
            ),
        )
        .subcommand(
            attack_args(data_args(
                Command::new("distances")
                    .about("measure distance distributions of attacks' adversarial examples"),
            ))
            .arg(
                Arg::new("model")
                    .long("model")
                    .required(true)
                    .help("model archive"),
            )
            .arg(
                Arg::new("attack")
                    .long("attack")
                    .required(true)
                    .help("comma-separated attack names, each optionally name:bound"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .required(true)
                    .help("distance distribution CSV path"),
            ),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("check reverse-mode gradients against finite differences")
                .arg(Arg::new("seed").long("seed").help("seed"))
                .arg(
                    Arg::new("instances")
                        .long("instances")
                        .help("number of random model instances (default 10)"),
                ),
        )
        .disable_version_flag(true)
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("suppress progress output"),
        )
}

fn parse_flag<T: std::str::FromStr>(m: &clap::ArgMatches, name: &str) -> CliResult<Option<T>> {
    match m.get_one::<String>(name) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("cannot parse --{name} value {raw:?}"))),
    }
}

fn has_flag(m: &clap::ArgMatches, name: &str) -> bool {
    m.try_get_one::<String>(name).is_ok()
}

/// Load the run configuration, then apply CLI overrides.
fn load_config(m: &clap::ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::from_file(Path::new(path))?,
        None => RunConfig::default(),
    };
    if has_flag(m, "bound") {
        if let Some(bound) = parse_flag::<f64>(m, "bound")? {
            cfg.apply("bound", &bound.to_string())?;
            record_override(&mut cfg, "bound", &bound.to_string());
        }
    }
    if has_flag(m, "steps") {
        if let Some(steps) = parse_flag::<usize>(m, "steps")? {
            cfg.apply("steps", &steps.to_string())?;
            cfg.apply("attack_steps", &steps.to_string())?;
            record_override(&mut cfg, "steps", &steps.to_string());
        }
    }
    if let Some(seed) = parse_flag::<u64>(m, "seed")? {
        cfg.apply("seed", &seed.to_string())?;
        record_override(&mut cfg, "seed", &seed.to_string());
    }
    if has_flag(m, "projection") {
        if let Some(projection) = m.get_one::<String>("projection") {
            cfg.apply("projection", projection)?;
            record_override(&mut cfg, "projection", projection);
        }
    }
    if has_flag(m, "lpips-model") {
        if let Some(lp) = m.get_one::<String>("lpips-model") {
            if lp == "self" {
                cfg.apply("bound_mode", "self")?;
                cfg.lpips_model = None;
            } else {
                cfg.apply("lpips_model", lp)?;
            }
            record_override(&mut cfg, "lpips_model", lp);
        }
    }
    Ok(cfg)
}

fn record_override(cfg: &mut RunConfig, key: &str, value: &str) {
    cfg.pairs.retain(|(k, _)| k != key);
    cfg.pairs.push((key.to_string(), value.to_string()));
}

/// Parse `synth:classes=K,size=S,per_class=N,noise=Z[,split=NAME]`.
fn parse_synth(descriptor: &str, seed: u64) -> CliResult<DatasetHandle> {
    let mut classes = 4usize;
    let mut size = 16usize;
    let mut per_class = 50usize;
    let mut noise = 0.1f64;
    let mut split = "train".to_string();
    for part in descriptor.split(',') {
        let Some((k, v)) = part.split_once('=') else {
            return Err(CliError::Usage(format!(
                "synth dataset: expected key=value, got {part:?}"
            )));
        };
        match k.trim() {
            "classes" => classes = parse_kv(k, v)?,
            "size" => size = parse_kv(k, v)?,
            "per_class" => per_class = parse_kv(k, v)?,
            "noise" => noise = parse_kv(k, v)?,
            "split" => split = v.trim().to_string(),
            other => {
                return Err(CliError::Usage(format!(
                    "synth dataset: unknown key {other:?}"
                )))
            }
        }
    }
    let split_tag = split.bytes().fold(0u64, |acc, b| acc * 31 + b as u64);
    let dataset_seed = derive_seed(seed, 1000 + split_tag, 0);
    Ok(pra_core::data::generate_synthetic_dataset(
        dataset_seed,
        classes,
        size,
        per_class,
        noise,
    )?)
}

fn parse_kv<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("synth dataset: cannot parse {key}={value}")))
}

fn load_dataset(m: &clap::ArgMatches, seed: u64) -> CliResult<DatasetHandle> {
    let data = m
        .get_one::<String>("data")
        .expect("--data is required by clap");
    if let Some(descriptor) = data.strip_prefix("synth:") {
        return parse_synth(descriptor, seed);
    }
    let labels_path = m.get_one::<String>("labels").ok_or_else(|| {
        CliError::Usage("--labels is required when --data is a tensor archive".into())
    })?;
    let examples = pra_core::io::load_tensor_archive(Path::new(data))?;
    let labels = pra_core::io::load_labels(Path::new(labels_path))?;
    let class_count = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(DatasetHandle::from_parts(
        examples,
        labels,
        "file",
        class_count,
    )?)
}

fn load_extractor(cfg: &RunConfig) -> CliResult<Option<ClassifierModel>> {
    match &cfg.lpips_model {
        None => Ok(None),
        Some(path) => Ok(Some(archive::load_model(path)?)),
    }
}

/// Parse `name[:bound]` attack list entries.
fn parse_attack_list(raw: &str, base: &AttackConfig) -> CliResult<Vec<AttackSpec>> {
    let mut specs = Vec::new();
    for entry in raw.split(',') {
        let entry = entry.trim();
        let (name, bound) = match entry.split_once(':') {
            Some((n, b)) => {
                let bound: f64 = b.parse().map_err(|_| {
                    CliError::Usage(format!("attack {entry:?}: cannot parse bound {b:?}"))
                })?;
                (n, Some(bound))
            }
            None => (entry, None),
        };
        specs.push(AttackSpec::from_name(name, base, bound)?);
    }
    Ok(specs)
}

fn config_echo(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.pairs.iter().cloned().collect()
}

fn cmd_train(m: &clap::ArgMatches) -> CliResult<()> {
    let cfg = load_config(m)?;
    let dataset = load_dataset(m, cfg.train.seed)?;
    let spec = ModelSpec::tiny_cnn(dataset.example_shape(), dataset.class_count());
    let model = nn::init_model(&spec, cfg.train.seed)?;

    let quiet = m.get_flag("quiet");
    if !quiet {
        eprintln!(
            "training: {} examples, {} classes, {} epochs",
            dataset.len(),
            dataset.class_count(),
            cfg.train.epochs
        );
    }
    let (trained, log) = if cfg.train.baseline != BaselineMode::None {
        train::adv_train(model, &dataset, &cfg.train)?
    } else if cfg.train.bound > 0.0 {
        train::pat_train(model, &dataset, &cfg.train)?
    } else {
        train::standard_train(model, &dataset, &cfg.train)?
    };

    let out = m.get_one::<String>("out").expect("--out required");
    archive::save_model(Path::new(out), &trained)?;
    if let Some(log_path) = m.get_one::<String>("log") {
        write_text(Path::new(log_path), &log.to_csv())?;
    }
    if !quiet {
        let last = log.epochs.last().expect("at least one epoch");
        eprintln!(
            "done: clean accuracy {:.3}, model written to {out}",
            last.clean_acc
        );
    }
    Ok(())
}

fn cmd_attack(m: &clap::ArgMatches) -> CliResult<()> {
    let cfg = load_config(m)?;
    let dataset = load_dataset(m, cfg.attack.seed)?;
    let model = archive::load_model(Path::new(
        m.get_one::<String>("model").expect("--model required"),
    ))?;
    let extractor = load_extractor(&cfg)?;
    let raw = m.get_one::<String>("attack").expect("--attack required");
    let specs = parse_attack_list(raw, &cfg.attack)?;
    if specs.len() != 1 {
        return Err(CliError::Usage(
            "`pra attack` takes exactly one attack name".into(),
        ));
    }
    let spec = &specs[0];
    let run = eval::run_attack(&model, extractor.as_ref(), &dataset, spec, cfg.attack.seed)?;

    if let Some(out) = m.get_one::<String>("out") {
        pra_core::io::save_tensor_archive(Path::new(out), &run.adversarial, Dtype::F64)?;
    }
    if let Some(report_path) = m.get_one::<String>("report") {
        let mut attacks = BTreeMap::new();
        attacks.insert(
            spec.name().to_string(),
            AttackReport {
                accuracy: run.outcome.accuracy,
                distances: eval::stats_from_outcome(&run.outcome, spec.name()),
            },
        );
        let clean = eval::evaluate_accuracy(
            &model,
            extractor.as_ref(),
            &dataset,
            &AttackSpec::None,
            cfg.attack.seed,
        )?;
        let report = EvalReport {
            seed: cfg.attack.seed,
            config: config_echo(&cfg),
            clean_accuracy: clean.accuracy,
            attacks,
            union_accuracy: run.outcome.accuracy,
            trained_against: vec![],
            unseen_mean_accuracy: None,
            calibration_note: None,
        };
        report.write_json(Path::new(report_path))?;
    }
    if !m.get_flag("quiet") {
        eprintln!(
            "{}: accuracy {:.3} over {} examples",
            spec.name(),
            run.outcome.accuracy,
            dataset.len()
        );
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_eval(m: &clap::ArgMatches) -> CliResult<()> {
    let cfg = load_config(m)?;
    let seed = cfg.attack.seed;
    let dataset = load_dataset(m, seed)?;
    let model = archive::load_model(Path::new(
        m.get_one::<String>("model").expect("--model required"),
    ))?;
    let extractor = load_extractor(&cfg)?;
    let raw = m.get_one::<String>("attack").expect("--attack required");
    let specs = parse_attack_list(raw, &cfg.attack)?;
    let quiet = m.get_flag("quiet");

    let clean =
        eval::evaluate_accuracy(&model, extractor.as_ref(), &dataset, &AttackSpec::None, seed)?;
    if !quiet {
        eprintln!("clean: accuracy {:.3}", clean.accuracy);
    }

    let mut attacks = BTreeMap::new();
    let mut per_attack_bits: Vec<(String, Vec<bool>)> = Vec::new();
    let mut union_bits: Vec<Vec<bool>> = Vec::new();
    let mut accs = BTreeMap::new();
    for spec in &specs {
        if matches!(spec, AttackSpec::None) {
            continue;
        }
        let outcome = eval::evaluate_accuracy(&model, extractor.as_ref(), &dataset, spec, seed)?;
        if !quiet {
            eprintln!("{}: accuracy {:.3}", spec.name(), outcome.accuracy);
        }
        accs.insert(spec.name().to_string(), outcome.accuracy);
        attacks.insert(
            spec.name().to_string(),
            AttackReport {
                accuracy: outcome.accuracy,
                distances: eval::stats_from_outcome(&outcome, spec.name()),
            },
        );
        per_attack_bits.push((spec.name().to_string(), outcome.correct.clone()));
        union_bits.push(outcome.correct);
    }

    let union = eval::union_accuracy(&clean.correct, &union_bits)?;
    let trained: BTreeSet<String> = m
        .get_one::<String>("trained-against")
        .map(|raw| {
            raw.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default();
    let unseen = if accs.is_empty() {
        None
    } else {
        match eval::unseen_mean_accuracy(&accs, &trained) {
            Ok(v) => Some(v),
            Err(pra_core::Error::EmptyComplement) => None,
            Err(e) => return Err(e.into()),
        }
    };

    let report = EvalReport {
        seed,
        config: config_echo(&cfg),
        clean_accuracy: clean.accuracy,
        attacks,
        union_accuracy: union,
        trained_against: trained.iter().cloned().collect(),
        unseen_mean_accuracy: unseen,
        calibration_note: None,
    };
    let report_path = Path::new(m.get_one::<String>("report").expect("--report required"));
    report.write_json(report_path)?;

    let per_example = per_example_csv(dataset.labels(), &clean.correct, &per_attack_bits);
    write_text(&sibling(report_path, "per_example.csv"), &per_example)?;

    let stats = eval::measure_distance_distributions(
        &model,
        extractor.as_ref(),
        &dataset,
        &specs
            .iter()
            .filter(|s| !matches!(s, AttackSpec::None))
            .cloned()
            .collect::<Vec<_>>(),
        seed,
    )?;
    write_text(
        &sibling(report_path, "distances.csv"),
        &eval::distance_stats_to_csv(&stats),
    )?;
    if !quiet {
        eprintln!(
            "union accuracy {union:.3}; report written to {}",
            report_path.display()
        );
    }
    Ok(())
}

fn cmd_distances(m: &clap::ArgMatches) -> CliResult<()> {
    let cfg = load_config(m)?;
    let seed = cfg.attack.seed;
    let dataset = load_dataset(m, seed)?;
    let model = archive::load_model(Path::new(
        m.get_one::<String>("model").expect("--model required"),
    ))?;
    let extractor = load_extractor(&cfg)?;
    let raw = m.get_one::<String>("attack").expect("--attack required");
    let specs = parse_attack_list(raw, &cfg.attack)?;
    let stats =
        eval::measure_distance_distributions(&model, extractor.as_ref(), &dataset, &specs, seed)?;
    let out = m.get_one::<String>("out").expect("--out required");
    write_text(Path::new(out), &eval::distance_stats_to_csv(&stats))?;
    if !m.get_flag("quiet") {
        eprintln!("distance distributions written to {out}");
    }
    Ok(())
}

fn cmd_gradcheck(m: &clap::ArgMatches) -> CliResult<()> {
    let seed = parse_flag::<u64>(m, "seed")?.unwrap_or(0);
    let instances = parse_flag::<usize>(m, "instances")?.unwrap_or(10);
    let worst = nn::gradient_check(instances, seed, 1e-5)?;
    println!("max relative error = {worst:e}");
    if worst < 1e-6 {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {worst:e} >= 1e-6"
        )))
    }
}
