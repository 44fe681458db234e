//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use robdet_core::attack::{AttackDomain, AttackSpec, CompositePreset};
use robdet_core::data::{self, DatasetSpec};
use robdet_core::detect::DetectConfig;
use robdet_core::eval::{self, EvalAttack, MetricName, MetricRecord, SweepAxis};
use robdet_core::model::{DetectorModel, ModelConfig};
use robdet_core::train::{self, EpochStats, TrainConfig, TrainSink, TrainVariant};

use crate::config::KvConfig;
use crate::manifest::RunManifest;
use crate::{AttackArgs, Command, OutArg};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            config,
            seed,
            train_count,
            test_count,
            classes,
            noise_amp,
        } => gen_data(out, config, seed, train_count, test_count, classes, noise_amp),
        Command::Train {
            out,
            config,
            data,
            variant,
            seed,
            epochs,
            batch_size,
            lr,
            momentum,
            weight_decay,
            milestones,
            epsilon,
            attack_steps,
            attack_step_size,
        } => train_cmd(TrainCmdArgs {
            out,
            config,
            data,
            variant,
            seed,
            epochs,
            batch_size,
            lr,
            momentum,
            weight_decay,
            milestones,
            epsilon,
            attack_steps,
            attack_step_size,
        }),
        Command::Attack { out, model, data, attack } => attack_cmd(out, model, data, attack),
        Command::Eval {
            out,
            model,
            data,
            metrics,
            alignment_sample,
            attack,
        } => eval_cmd(out, model, data, metrics, alignment_sample, attack),
        Command::Sweep {
            out,
            models,
            data,
            axis,
            domain,
            steps,
            seed,
        } => sweep_cmd(out, models, data, axis, domain, steps, seed),
        Command::Ablate {
            out,
            std,
            cls,
            loc,
            con,
            mtd,
            data,
            epsilon,
            steps,
            seed,
        } => ablate_cmd(out, [std, cls, loc, con, mtd], data, epsilon, steps, seed),
        Command::Transfer {
            out,
            victim,
            sources,
            preset,
            data,
            epsilon,
            steps,
            seed,
        } => transfer_cmd(out, victim, sources, preset, data, epsilon, steps, seed),
        Command::Report { out, csv } => crate::report::report_cmd(out, csv),
    }
}

pub fn resolve_out(out: &OutArg) -> Result<PathBuf> {
    let dir = match &out.out {
        Some(p) => p.clone(),
        None => match std::env::var_os("ROBDET_OUT") {
            Some(root) => PathBuf::from(root),
            None => bail!("no --out given and ROBDET_OUT is not set"),
        },
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_dataset(path: &Path) -> Result<Vec<data::LabeledImage>> {
    let d = data::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if d.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(d)
}

fn load_model(path: &Path) -> Result<DetectorModel> {
    DetectorModel::load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

/// `id=path` or bare path (id = file stem) lists.
fn parse_model_list(arg: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for part in arg.split(',').filter(|p| !p.is_empty()) {
        let (id, path) = match part.split_once('=') {
            Some((id, p)) => (id.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(part);
                let id = p
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| part.to_string());
                (id, p)
            }
        };
        out.push((id, path));
    }
    if out.is_empty() {
        bail!("empty model list '{arg}'");
    }
    Ok(out)
}

const GEN_KEYS: &[&str] = &["seed", "train_count", "test_count", "classes", "noise_amp"];

fn gen_data(
    out: OutArg,
    config: Option<PathBuf>,
    seed: Option<u64>,
    train_count: Option<usize>,
    test_count: Option<usize>,
    classes: Option<usize>,
    noise_amp: Option<f32>,
) -> Result<()> {
    let dir = resolve_out(&out)?;
    let kv = match &config {
        Some(p) => KvConfig::load(p, GEN_KEYS)?,
        None => KvConfig::default(),
    };
    let seed = kv.resolve("seed", seed, 0u64)?;
    let train_count = kv.resolve("train_count", train_count, 2000usize)?;
    let test_count = kv.resolve("test_count", test_count, 400usize)?;
    let classes = kv.resolve("classes", classes, 4usize)?;
    let noise_amp = kv.resolve("noise_amp", noise_amp, 6.0f32)?;

    let mut manifest = RunManifest::new("gen-data");
    manifest.set("classes", classes);
    manifest.set("noise_amp", noise_amp);
    manifest.set("seed", seed);
    manifest.set("test_count", test_count);
    manifest.set("train_count", train_count);

    for (name, count, stream) in [("train", train_count, 0u64), ("test", test_count, 1u64)] {
        let spec = DatasetSpec {
            count,
            classes,
            noise_amp,
            seed: robdet_core::rng::derive_seed(seed, robdet_core::rng::STREAM_DATA, stream),
            ..DatasetSpec::default()
        };
        let (images, stats) = data::generate(&spec)?;
        let path = dir.join(format!("{name}.rdd"));
        data::save(&images, &path)?;
        if stats.shortfall_images > 0 {
            log::warn!("{name}: {} images got fewer objects than drawn", stats.shortfall_images);
        }
        manifest.output(&path)?;
        println!("wrote {} ({count} images)", path.display());
    }
    manifest.write(&dir)
}

const TRAIN_KEYS: &[&str] = &[
    "variant",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "milestones",
    "epsilon",
    "attack_steps",
    "attack_step_size",
];

struct TrainCmdArgs {
    out: OutArg,
    config: Option<PathBuf>,
    data: PathBuf,
    variant: Option<String>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f32>,
    momentum: Option<f32>,
    weight_decay: Option<f32>,
    milestones: Option<String>,
    epsilon: Option<f32>,
    attack_steps: Option<u32>,
    attack_step_size: Option<f32>,
}

struct CliSink {
    dir: PathBuf,
    quiet: bool,
}

impl TrainSink for CliSink {
    fn on_epoch(&mut self, s: &EpochStats) {
        if !self.quiet {
            let rate = s
                .cls_selection_rate
                .map(|r| format!("  cls-rate {r:.3}"))
                .unwrap_or_default();
            println!(
                "epoch {:3}  loss_cls {:.4}  loss_loc {:.4}{rate}  ({:.1}s)",
                s.epoch, s.mean_loss_cls, s.mean_loss_loc, s.wall_secs
            );
        }
    }

    fn on_milestone(&mut self, step: usize, model: &DetectorModel) -> robdet_core::Result<()> {
        model.save_checkpoint(&self.dir.join(format!("checkpoint_step_{step}")))
    }
}

fn train_cmd(args: TrainCmdArgs) -> Result<()> {
    let dir = resolve_out(&args.out)?;
    let kv = match &args.config {
        Some(p) => KvConfig::load(p, TRAIN_KEYS)?,
        None => KvConfig::default(),
    };
    let variant = TrainVariant::from_str(&kv.resolve("variant", args.variant, "std".to_string())?)?;
    let seed = kv.resolve("seed", args.seed, 0u64)?;
    let mut cfg = TrainConfig::new(variant, seed);
    cfg.epochs = kv.resolve("epochs", args.epochs, cfg.epochs)?;
    cfg.batch_size = kv.resolve("batch_size", args.batch_size, cfg.batch_size)?;
    cfg.lr = kv.resolve("lr", args.lr, cfg.lr)?;
    cfg.momentum = kv.resolve("momentum", args.momentum, cfg.momentum)?;
    cfg.weight_decay = kv.resolve("weight_decay", args.weight_decay, cfg.weight_decay)?;
    cfg.attack.epsilon = kv.resolve("epsilon", args.epsilon, cfg.attack.epsilon)?;
    cfg.attack.steps = kv.resolve("attack_steps", args.attack_steps, cfg.attack.steps)?;
    cfg.attack.step_size = kv.resolve(
        "attack_step_size",
        args.attack_step_size,
        AttackSpec::default_step_size(cfg.attack.epsilon, cfg.attack.steps),
    )?;
    if let Some(ms) = kv.resolve_opt("milestones", args.milestones)? {
        cfg.milestones = ms
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<usize>().context("bad milestone"))
            .collect::<Result<_>>()?;
    }

    let dataset = load_dataset(&args.data)?;
    let model_cfg = model_config_for(&dataset)?;

    let mut manifest = RunManifest::new("train");
    manifest.input(&args.data)?;
    for (k, v) in [
        ("batch_size", cfg.batch_size.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("epsilon", cfg.attack.epsilon.to_string()),
        ("attack_steps", cfg.attack.steps.to_string()),
        ("attack_step_size", cfg.attack.step_size.to_string()),
        ("lr", cfg.lr.to_string()),
        (
            "milestones",
            cfg.milestones
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("momentum", cfg.momentum.to_string()),
        ("seed", cfg.seed.to_string()),
        ("variant", cfg.variant.as_str().to_string()),
        ("weight_decay", cfg.weight_decay.to_string()),
    ] {
        manifest.set(k, v);
    }

    let mut sink = CliSink {
        dir: dir.clone(),
        quiet: false,
    };
    let (model, report) = train::train_with_sink(&dataset, &model_cfg, &cfg, &mut sink)?;

    let ckpt = dir.join("checkpoint");
    model.save_checkpoint(&ckpt)?;
    let report_path = dir.join("train_report.csv");
    fs::write(&report_path, report.to_csv())?;
    manifest.output(&ckpt)?;
    manifest.output(&report_path)?;
    manifest.write(&dir)?;
    println!(
        "trained {} for {} epochs -> {}",
        cfg.variant.as_str(),
        cfg.epochs,
        ckpt.display()
    );
    if report.skipped_steps > 0 || report.attack_fallbacks > 0 {
        println!(
            "note: {} skipped steps, {} clean-image fallbacks",
            report.skipped_steps, report.attack_fallbacks
        );
    }
    Ok(())
}

/// Detector class count follows the dataset's labels (+1 for background).
fn model_config_for(dataset: &[data::LabeledImage]) -> Result<ModelConfig> {
    let max_label = dataset
        .iter()
        .flat_map(|img| img.annotations.iter().map(|a| a.label))
        .max()
        .unwrap_or(0);
    Ok(ModelConfig {
        classes: max_label + 2,
        ..ModelConfig::default()
    })
}

/// Resolves attack flags (plus optional key=value spec file) into an
/// `EvalAttack`. `none` disables the attack entirely.
fn resolve_attack(args: &AttackArgs, default_kind: &str) -> Result<EvalAttack> {
    let base = match &args.attack_spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading attack spec {}", path.display()))?;
            Some(AttackSpec::from_kv(&text).context("parsing attack spec")?)
        }
        None => None,
    };
    let kind = args
        .attack
        .clone()
        .or_else(|| base.as_ref().map(|s| s.domain.as_str().to_string()))
        .unwrap_or_else(|| default_kind.to_string());
    if kind == "none" {
        return Ok(EvalAttack::None);
    }
    let epsilon = args
        .epsilon
        .or(base.as_ref().map(|s| s.epsilon))
        .unwrap_or(8.0);
    let steps = args.steps.or(base.as_ref().map(|s| s.steps)).unwrap_or(20);
    let step_size = args
        .step_size
        .or(base.as_ref().map(|s| s.step_size))
        .unwrap_or_else(|| AttackSpec::default_step_size(epsilon, steps));
    let random_start = args
        .random_start
        .or(base.as_ref().map(|s| s.random_start))
        .unwrap_or(false);
    let seed = args
        .attack_seed
        .or(base.as_ref().map(|s| s.seed))
        .unwrap_or(0);
    let mut spec = AttackSpec {
        epsilon,
        steps,
        step_size,
        domain: AttackDomain::Cls,
        targeted: base.as_ref().and_then(|s| s.targeted.clone()),
        random_start,
        seed,
    };
    Ok(match kind.as_str() {
        "cls" | "loc" | "union" => {
            spec.domain = AttackDomain::from_str(&kind)?;
            EvalAttack::Pgd(spec)
        }
        "task_oriented" => {
            spec.domain = AttackDomain::TaskOriented;
            EvalAttack::TaskOriented(spec)
        }
        "dag_like" => {
            spec.domain = AttackDomain::Union;
            EvalAttack::Composite(CompositePreset::DagLike, spec)
        }
        "rap_like" => {
            spec.domain = AttackDomain::Union;
            EvalAttack::Composite(CompositePreset::RapLike, spec)
        }
        other => bail!("unknown attack kind '{other}'"),
    })
}

fn attack_cmd(out: OutArg, model: PathBuf, data_path: PathBuf, args: AttackArgs) -> Result<()> {
    let dir = resolve_out(&out)?;
    let model_loaded = load_model(&model)?;
    let dataset = load_dataset(&data_path)?;
    let atk = resolve_attack(&args, "cls")?;
    if matches!(atk, EvalAttack::None) {
        bail!("attack command needs an attack kind other than 'none'");
    }

    let mut manifest = RunManifest::new("attack");
    manifest.input(&model)?;
    manifest.input(&data_path)?;
    manifest.set("attack", atk.id());
    if let Some(spec) = atk.spec() {
        for line in spec.to_kv().lines() {
            let (k, v) = line.split_once('=').expect("kv line");
            manifest.set(&format!("attack_{k}"), v);
        }
    }

    // Per-image provenance plus the perturbed dataset.
    let mut log_csv = String::from(
        "image,chosen_domain,loc_undefined,clean_loss_cls,clean_loss_loc,final_loss_cls,final_loss_loc,objective_clean,objective_final,linf\n",
    );
    let mut adv_images = Vec::with_capacity(dataset.len());
    for (i, img) in dataset.iter().enumerate() {
        let spec = atk
            .spec()
            .expect("non-none attack has a spec")
            .clone()
            .with_seed(robdet_core::rng::derive_seed(
                atk.spec().unwrap().seed,
                robdet_core::rng::STREAM_ATTACK,
                i as u64,
            ));
        let adv = match &atk {
            EvalAttack::Pgd(_) => robdet_core::attack::pgd_attack(&model_loaded, &img.into(), &spec)?,
            EvalAttack::TaskOriented(_) => {
                robdet_core::attack::task_oriented_attack(&model_loaded, &img.into(), &spec)?
            }
            EvalAttack::Composite(preset, _) => {
                robdet_core::attack::composite_attack(&model_loaded, &img.into(), preset, &spec)?
            }
            EvalAttack::None => unreachable!(),
        };
        let linf = robdet_core::attack::linf_distance(&adv.image, &img.image);
        log_csv.push_str(&format!(
            "{i},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}\n",
            match adv.chosen_domain {
                Some(robdet_core::attack::ChosenDomain::Cls) => "cls",
                Some(robdet_core::attack::ChosenDomain::Loc) => "loc",
                None => "",
            },
            adv.loc_undefined,
            adv.clean_loss_cls,
            adv.clean_loss_loc,
            adv.final_loss_cls,
            adv.final_loss_loc,
            adv.objective_clean,
            adv.objective_final,
            linf
        ));
        adv_images.push(data::LabeledImage {
            image: adv.image,
            annotations: img.annotations.clone(),
        });
    }

    let adv_path = dir.join("adversarial.rdd");
    data::save(&adv_images, &adv_path)?;
    let log_path = dir.join("attack_log.csv");
    fs::write(&log_path, log_csv)?;
    manifest.output(&adv_path)?;
    manifest.output(&log_path)?;
    manifest.write(&dir)?;
    println!("wrote {} adversarial images -> {}", adv_images.len(), adv_path.display());
    Ok(())
}

fn eval_cmd(
    out: OutArg,
    model: PathBuf,
    data_path: PathBuf,
    metrics: String,
    alignment_sample: usize,
    attack: AttackArgs,
) -> Result<()> {
    let dir = resolve_out(&out)?;
    let model_loaded = load_model(&model)?;
    let dataset = load_dataset(&data_path)?;
    let atk = resolve_attack(&attack, "none")?;
    let det = DetectConfig::default();
    let model_id = model
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());

    let mut records: Vec<MetricRecord> = Vec::new();
    let (steps, epsilon) = match atk.spec() {
        Some(s) => (Some(s.steps), Some(s.epsilon)),
        None => (None, None),
    };
    for metric in metrics.split(',').filter(|m| !m.is_empty()) {
        match metric.trim() {
            "map50" => {
                let v = eval::map50(&model_loaded, &dataset, &atk, &det)?;
                records.push(MetricRecord {
                    model: model_id.clone(),
                    attack: atk.id(),
                    metric: MetricName::Map50,
                    steps,
                    epsilon,
                    value: v,
                });
            }
            "candidates" => {
                let (acc, iou) = eval::candidate_metrics(&model_loaded, &dataset, &atk)?;
                for (name, value) in [(MetricName::CandAcc, acc), (MetricName::CandIou, iou)] {
                    records.push(MetricRecord {
                        model: model_id.clone(),
                        attack: atk.id(),
                        metric: name,
                        steps,
                        epsilon,
                        value,
                    });
                }
            }
            "alignment" => {
                let sample = &dataset[..alignment_sample.min(dataset.len())];
                let stats = eval::gradient_alignment(&model_loaded, sample)?;
                for (name, value) in [
                    (MetricName::CosAlign, stats.median_cos()),
                    (MetricName::MagRatio, stats.median_ratio()),
                ] {
                    records.push(MetricRecord {
                        model: model_id.clone(),
                        attack: "none".into(),
                        metric: name,
                        steps: None,
                        epsilon: None,
                        value,
                    });
                }
            }
            other => bail!("unknown metric '{other}' (want map50, candidates, alignment)"),
        }
    }

    let csv_path = dir.join("metrics.csv");
    fs::write(&csv_path, eval::records_to_csv(&records))?;
    let mut manifest = RunManifest::new("eval");
    manifest.input(&model)?;
    manifest.input(&data_path)?;
    manifest.set("attack", atk.id());
    manifest.set("metrics", &metrics);
    manifest.output(&csv_path)?;
    manifest.write(&dir)?;
    for r in &records {
        println!("{} {} {} = {:.4}", r.model, r.attack, r.metric.as_str(), r.value);
    }
    Ok(())
}

fn sweep_cmd(
    out: OutArg,
    models: String,
    data_path: PathBuf,
    axis: String,
    domain: String,
    steps: u32,
    seed: Option<u64>,
) -> Result<()> {
    let dir = resolve_out(&out)?;
    let axis = SweepAxis::from_str(&axis)?;
    let domain = AttackDomain::from_str(&domain)?;
    if !matches!(domain, AttackDomain::Cls | AttackDomain::Loc) {
        bail!("sweep domain must be cls or loc");
    }
    let list = parse_model_list(&models)?;
    let loaded: Vec<(String, DetectorModel)> = list
        .iter()
        .map(|(id, p)| Ok((id.clone(), load_model(p)?)))
        .collect::<Result<_>>()?;
    let dataset = load_dataset(&data_path)?;
    let refs: Vec<(String, &DetectorModel)> =
        loaded.iter().map(|(id, m)| (id.clone(), m)).collect();
    let records = eval::sweep(
        &refs,
        axis,
        domain,
        &dataset,
        &DetectConfig::default(),
        seed.unwrap_or(0),
        Some(steps),
    )?;
    let csv_path = dir.join(format!("sweep_{}_{}.csv", domain.as_str(), axis.as_str()));
    fs::write(&csv_path, eval::records_to_csv(&records))?;

    let mut manifest = RunManifest::new("sweep");
    for (_, p) in &list {
        manifest.input(p)?;
    }
    manifest.input(&data_path)?;
    manifest.set("axis", axis.as_str());
    manifest.set("domain", domain.as_str());
    manifest.set("seed", seed.unwrap_or(0));
    manifest.output(&csv_path)?;
    manifest.write(&dir)?;
    println!("wrote {} ({} rows)", csv_path.display(), records.len());
    Ok(())
}

fn ablate_cmd(
    out: OutArg,
    paths: [PathBuf; 5],
    data_path: PathBuf,
    epsilon: f32,
    steps: u32,
    seed: Option<u64>,
) -> Result<()> {
    let dir = resolve_out(&out)?;
    let ids = ["std", "cls", "loc", "con", "mtd"];
    let loaded: Vec<(String, DetectorModel)> = ids
        .iter()
        .zip(&paths)
        .map(|(id, p)| Ok((id.to_string(), load_model(p)?)))
        .collect::<Result<_>>()?;
    let dataset = load_dataset(&data_path)?;
    let refs: Vec<(String, &DetectorModel)> =
        loaded.iter().map(|(id, m)| (id.clone(), m)).collect();
    let records = eval::ablation_grid(
        &refs,
        &dataset,
        &DetectConfig::default(),
        epsilon,
        steps,
        seed.unwrap_or(0),
    )?;
    let csv_path = dir.join("ablation.csv");
    fs::write(&csv_path, eval::records_to_csv(&records))?;
    let table = crate::report::grid_table(&records);
    let txt_path = dir.join("ablation.txt");
    fs::write(&txt_path, &table)?;
    print!("{table}");

    let mut manifest = RunManifest::new("ablate");
    for p in &paths {
        manifest.input(p)?;
    }
    manifest.input(&data_path)?;
    manifest.set("epsilon", epsilon);
    manifest.set("seed", seed.unwrap_or(0));
    manifest.set("steps", steps);
    manifest.output(&csv_path)?;
    manifest.output(&txt_path)?;
    manifest.write(&dir)
}

#[allow(clippy::too_many_arguments)]
fn transfer_cmd(
    out: OutArg,
    victim: PathBuf,
    sources: String,
    preset: String,
    data_path: PathBuf,
    epsilon: f32,
    steps: u32,
    seed: Option<u64>,
) -> Result<()> {
    let dir = resolve_out(&out)?;
    let preset = match preset.as_str() {
        "dag_like" => CompositePreset::DagLike,
        "rap_like" => CompositePreset::RapLike,
        other => bail!("unknown preset '{other}' (want dag_like or rap_like)"),
    };
    let victim_model = load_model(&victim)?;
    let victim_id = victim
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "victim".into());
    let list = parse_model_list(&sources)?;
    let loaded: Vec<(String, DetectorModel)> = list
        .iter()
        .map(|(id, p)| Ok((id.clone(), load_model(p)?)))
        .collect::<Result<_>>()?;
    let dataset = load_dataset(&data_path)?;
    let refs: Vec<(String, &DetectorModel)> =
        loaded.iter().map(|(id, m)| (id.clone(), m)).collect();
    let records = eval::transfer_eval(
        (&victim_id, &victim_model),
        &refs,
        preset.clone(),
        &dataset,
        &DetectConfig::default(),
        epsilon,
        steps,
        seed.unwrap_or(0),
    )?;
    let csv_path = dir.join(format!("transfer_{}.csv", preset.as_str()));
    fs::write(&csv_path, eval::records_to_csv(&records))?;

    let mut manifest = RunManifest::new("transfer");
    manifest.input(&victim)?;
    for (_, p) in &list {
        manifest.input(p)?;
    }
    manifest.input(&data_path)?;
    manifest.set("epsilon", epsilon);
    manifest.set("preset", preset.as_str());
    manifest.set("seed", seed.unwrap_or(0));
    manifest.set("steps", steps);
    manifest.output(&csv_path)?;
    manifest.write(&dir)?;
    for r in &records {
        println!("{} {} = {:.4}", r.attack, r.metric.as_str(), r.value);
    }
    Ok(())
}
