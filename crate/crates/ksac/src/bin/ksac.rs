//! Command-line front end: training, evaluation, data generation, parameter
//! accounting, gradient checking and feature-map export.
//!
//! Exit codes: 0 success, 1 runtime/numeric failure, 2 usage error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use ksac::data::{
    generate_scene, write_manifest, write_pgm, write_ppm, AugmentSpec, SceneSample, IGNORE_LABEL,
    NUM_CLASSES,
};
use ksac::heads::{build_model, ModelConfig};
use ksac::ledger::{count_params, flops_estimate, savings_report, MConvention};
use ksac::train::{
    evaluate, gradcheck, train, ConfusionMatrix, EvalStrategy, TrainConfig,
};
use ksac::{Error, Real, Tape};

#[derive(Parser)]
#[command(name = "ksac", version, about = "Kernel-sharing atrous convolution toolkit")]
struct Cli {
    /// Line-oriented `key = value` config file with `#` comments; command-line
    /// flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for evaluation sharding; 1 guarantees determinism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes as PPM/PGM pairs plus a manifest.
    GenData(GenDataArgs),
    /// Train a segmentation model on synthetic scenes.
    Train(TrainArgs),
    /// Evaluate a checkpoint with single, multi-scale or flip strategies.
    Eval(EvalArgs),
    /// Print the exact parameter ledger for a head configuration.
    CountParams(ModelArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export per-rate, per-channel head activations as PGM tiles.
    ExportFeatures(ExportArgs),
}

// ---- config file ----

#[derive(Default)]
struct ConfigMap {
    map: BTreeMap<String, String>,
}

impl ConfigMap {
    fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Error> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::Config(format!("config key '{key}': cannot parse '{raw}'"))
            }),
        }
    }
}

/// Flag value, else config-file value, else default.
fn resolve<T: FromStr + Clone>(
    flag: &Option<T>,
    cfg: &ConfigMap,
    key: &str,
    default: T,
) -> Result<T, Error> {
    Ok(flag
        .clone()
        .or(cfg.get(key)?)
        .unwrap_or(default))
}

fn parse_rates(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad rate '{p}' in '{s}'")))
        })
        .collect()
}

fn parse_scales(s: &str) -> Result<Vec<Real>, Error> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad scale '{p}' in '{s}'")))
        })
        .collect()
}

/// `"0:0.01,1500:0.005"`, or a bare learning rate as shorthand for a
/// single-segment schedule.
fn parse_lr_schedule(s: &str) -> Result<Vec<(u64, Real)>, Error> {
    if !s.contains(':') {
        let lr = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad learning rate '{s}'")))?;
        return Ok(vec![(0, lr)]);
    }
    s.split(',')
        .map(|seg| {
            let bad = || Error::Config(format!("bad lr segment '{seg}' in '{s}'"));
            let (it, lr) = seg.split_once(':').ok_or_else(bad)?;
            Ok((
                it.trim().parse().map_err(|_| bad())?,
                lr.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

// ---- shared model flags ----

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Head kind: ksac or aspp.
    #[arg(long)]
    head: Option<String>,
    /// Comma-separated atrous rates, e.g. 6,12,18.
    #[arg(long)]
    rates: Option<String>,
    /// Head input channels (backbone output).
    #[arg(long)]
    cin: Option<usize>,
    /// Head output channels.
    #[arg(long)]
    cout: Option<usize>,
    /// Encoder output stride: 8 or 16.
    #[arg(long)]
    os: Option<usize>,
    /// Attach the refinement decoder.
    #[arg(long)]
    decoder: bool,
    /// Number of output classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Model initialization seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelArgs {
    fn resolve(&self, cfg: &ConfigMap) -> Result<ModelConfig, Error> {
        let head: String = resolve(&self.head, cfg, "head", "ksac".into())?;
        let rates: String = resolve(&self.rates, cfg, "rates", "6,12,18".into())?;
        let decoder = self.decoder || cfg.get("decoder")?.unwrap_or(false);
        Ok(ModelConfig {
            head: head.parse()?,
            rates: parse_rates(&rates)?,
            c_in: resolve(&self.cin, cfg, "cin", 64)?,
            c_out: resolve(&self.cout, cfg, "cout", 64)?,
            os: resolve(&self.os, cfg, "os", 16)?,
            decoder,
            num_classes: resolve(&self.classes, cfg, "classes", NUM_CLASSES)?,
            seed: resolve(&self.seed, cfg, "seed", 0)?,
        })
    }
}

fn model_config_text(mc: &ModelConfig) -> String {
    let rates: Vec<String> = mc.rates.iter().map(|r| r.to_string()).collect();
    format!(
        "head = {}\nrates = {}\ncin = {}\ncout = {}\nos = {}\ndecoder = {}\nclasses = {}\nseed = {}\n",
        mc.head,
        rates.join(","),
        mc.c_in,
        mc.c_out,
        mc.os,
        mc.decoder,
        mc.num_classes,
        mc.seed
    )
}

// ---- subcommand arguments ----

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    max_shapes: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory for checkpoints, log and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Piecewise lr schedule "start:lr,start:lr,..." or a single rate.
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<Real>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    eval_scenes: Option<usize>,
    /// Base seed for scene generation (training batches reuse it too).
    #[arg(long)]
    data_seed: Option<u64>,
    /// Side length of generated scenes before augmentation.
    #[arg(long)]
    scene_size: Option<usize>,
    /// Augmentation crop side length; also the eval scene size.
    #[arg(long)]
    crop: Option<usize>,
    /// Disable flip/scale/crop augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// single, ms, or ms+flip.
    #[arg(long)]
    strategy: Option<String>,
    /// Comma-separated multi-scale factors.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    eval_scenes: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epsilon: Option<Real>,
    #[arg(long)]
    tolerance: Option<Real>,
    #[arg(long)]
    max_checks: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint to load; freshly initialized weights when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Export only this branch (index into the rate list).
    #[arg(long)]
    branch: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
}

// ---- commands ----

fn ensure_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_scenes(base_seed: u64, count: usize, size: usize, max_shapes: usize) -> Result<Vec<SceneSample>, Error> {
    (0..count)
        .map(|i| generate_scene(base_seed + i as u64, size, size, max_shapes))
        .collect()
}

fn cmd_gen_data(args: &GenDataArgs, cfg: &ConfigMap) -> Result<(), Error> {
    let count = resolve(&args.count, cfg, "count", 8)?;
    let seed = resolve(&args.seed, cfg, "seed", 0)?;
    let height = resolve(&args.height, cfg, "height", 97)?;
    let width = resolve(&args.width, cfg, "width", 97)?;
    let max_shapes = resolve(&args.max_shapes, cfg, "max-shapes", 5)?;
    ensure_dir(&args.out)?;
    let mut manifest = Vec::new();
    for i in 0..count {
        let scene_seed = seed + i as u64;
        let scene = generate_scene(scene_seed, height, width, max_shapes)?;
        write_ppm(&args.out.join(format!("scene_{i:04}.ppm")), &scene.image, scene.h, scene.w)?;
        let labels: Vec<u8> = scene.labels.iter().map(|&l| l as u8).collect();
        write_pgm(&args.out.join(format!("scene_{i:04}.pgm")), &labels, scene.h, scene.w)?;
        manifest.push((scene_seed, height, width));
    }
    write_manifest(&args.out.join("dataset.manifest"), &manifest)?;
    println!("wrote {count} scene pairs to {}", args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs, cfg: &ConfigMap) -> Result<(), Error> {
    let mc = args.model.resolve(cfg)?;
    let iterations = resolve(&args.iterations, cfg, "iterations", 1000)?;
    let batch_size = resolve(&args.batch_size, cfg, "batch-size", 4)?;
    let lr: String = resolve(&args.lr, cfg, "lr", "0.01".into())?;
    let momentum = resolve(&args.momentum, cfg, "momentum", 0.9)?;
    let eval_every = resolve(&args.eval_every, cfg, "eval-every", 200)?;
    let train_scenes = resolve(&args.train_scenes, cfg, "train-scenes", 64)?;
    let eval_scenes = resolve(&args.eval_scenes, cfg, "eval-scenes", 16)?;
    let data_seed = resolve(&args.data_seed, cfg, "data-seed", 100)?;
    let scene_size = resolve(&args.scene_size, cfg, "scene-size", 121)?;
    let crop = resolve(&args.crop, cfg, "crop", 97)?;
    let no_augment = args.no_augment || cfg.get("no-augment")?.unwrap_or(false);

    let tc = TrainConfig {
        lr_schedule: parse_lr_schedule(&lr)?,
        momentum,
        batch_size,
        max_iterations: iterations,
        eval_every,
        seed: mc.seed ^ data_seed.rotate_left(17),
    };
    tc.validate()?;
    let train_size = if no_augment { crop } else { scene_size };
    let train_set = gen_scenes(data_seed, train_scenes, train_size, 5)?;
    let eval_set = gen_scenes(data_seed + 10_000, eval_scenes, crop, 5)?;
    let spec = AugmentSpec {
        crop: (crop, crop),
        ..Default::default()
    };
    let augment_spec = (!no_augment).then_some(&spec);

    ensure_dir(&args.out)?;
    let mut run_config = model_config_text(&mc);
    let _ = write!(
        run_config,
        "iterations = {iterations}\nbatch-size = {batch_size}\nlr = {lr}\nmomentum = {momentum}\n\
         eval-every = {eval_every}\ntrain-scenes = {train_scenes}\neval-scenes = {eval_scenes}\n\
         data-seed = {data_seed}\nscene-size = {scene_size}\ncrop = {crop}\nno-augment = {no_augment}\n"
    );
    let config_path = args.out.join("run.config");
    std::fs::write(&config_path, run_config).map_err(|e| Error::Io {
        path: config_path,
        source: e,
    })?;

    let mut model = build_model(mc)?;
    let best_path = args.out.join("best.ckpt");
    let outcome = train(
        &mut model,
        &train_set,
        &eval_set,
        &tc,
        augment_spec,
        Some(&best_path),
    )?;
    outcome.log.write(&args.out.join("train_log.csv"))?;
    model.save(&args.out.join("model.ckpt"))?;
    println!("final loss {:.6}", outcome.final_loss);
    if let Some(miou) = outcome.best_miou {
        println!("best eval mIOU {miou:.4}");
    }
    Ok(())
}

fn parse_strategy(name: &str, scales: Vec<Real>) -> Result<EvalStrategy, Error> {
    match name {
        "single" => Ok(EvalStrategy::Single),
        "ms" => Ok(EvalStrategy::MultiScale(scales)),
        "ms+flip" => Ok(EvalStrategy::MultiScaleFlip(scales)),
        other => Err(Error::Config(format!(
            "unknown strategy '{other}' (expected single, ms, or ms+flip)"
        ))),
    }
}

fn cmd_eval(args: &EvalArgs, cfg: &ConfigMap, threads: usize) -> Result<(), Error> {
    let mc = args.model.resolve(cfg)?;
    let strategy_name: String = resolve(&args.strategy, cfg, "strategy", "single".into())?;
    let scales = match resolve(&args.scales, cfg, "scales", String::new())? {
        s if s.is_empty() => ksac::train::default_eval_scales(),
        s => parse_scales(&s)?,
    };
    let strategy = parse_strategy(&strategy_name, scales)?;
    let eval_scenes = resolve(&args.eval_scenes, cfg, "eval-scenes", 16)?;
    let data_seed = resolve(&args.data_seed, cfg, "data-seed", 10_100)?;
    let size = resolve(&args.size, cfg, "size", 97)?;

    let mut model = build_model(mc)?;
    model.load(&args.checkpoint)?;
    let samples = gen_scenes(data_seed, eval_scenes, size, 5)?;

    let confusion = if threads <= 1 {
        evaluate(&mut model, &samples, &strategy, IGNORE_LABEL)?.confusion
    } else {
        // shard samples across threads, each with a private confusion matrix
        let chunk = samples.len().div_ceil(threads);
        let results: Vec<Result<ConfusionMatrix, Error>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|shard| {
                    let mut local = model.clone();
                    let strategy = strategy.clone();
                    scope.spawn(move || {
                        evaluate(&mut local, shard, &strategy, IGNORE_LABEL).map(|r| r.confusion)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker")).collect()
        });
        let mut merged = ConfusionMatrix::new(model.cfg.num_classes);
        for r in results {
            merged.merge(&r?)?;
        }
        merged
    };
    for (class, iou) in confusion.per_class_iou().iter().enumerate() {
        match iou {
            Some(v) => println!("class {class}: IoU {v:.4}"),
            None => println!("class {class}: IoU undefined (absent)"),
        }
    }
    println!("mIOU {:.4}", confusion.miou());
    Ok(())
}

fn cmd_count_params(args: &ModelArgs, cfg: &ConfigMap) -> Result<(), Error> {
    let mc = args.resolve(cfg)?;
    let model = build_model(mc.clone())?;
    let report = count_params(&model);
    println!("{:<28} {:>14} {:>10}", "group", "parameters", "");
    let mut rows = vec![
        ("backbone", report.backbone),
        ("head 3x3", report.head_3x3),
        ("head 1x1", report.head_1x1),
        ("bn (gamma/beta)", report.bn_trainable),
        ("bn buffers", report.bn_buffers),
        ("classifier", report.classifier),
    ];
    if report.decoder > 0 {
        rows.insert(5, ("decoder", report.decoder));
    }
    for (name, count) in rows {
        println!("{name:<28} {count:>14}");
    }
    println!("{:<28} {:>14}", "trainable total", report.trainable_total());
    println!("{:<28} {:>14}", "grand total", report.grand_total());
    println!();
    println!("head_3x3 = {}", report.head_3x3);
    println!("head_1x1 = {}", report.head_1x1);
    println!("formula_head_3x3 = {}", report.formula_head_3x3);
    println!("complexity = {}", report.complexity);
    println!("trainable_total = {}", report.trainable_total());
    println!("grand_total = {}", report.grand_total());
    println!(
        "savings_vs_aspp = {:.4}",
        savings_report(mc.c_in, mc.c_out, mc.rates.len(), MConvention::TwoLayers)
    );
    let flops = flops_estimate(&model, [1, 3, 97, 97])?;
    println!("head_macs_97x97 = {}", flops.head_total());
    println!("total_macs_97x97 = {}", flops.total());
    if !report.formula_ok() {
        return Err(Error::Contract(
            "head 3x3 parameter count disagrees with the closed-form formula".into(),
        ));
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, cfg: &ConfigMap) -> Result<(), Error> {
    let mc = args.model.resolve(cfg)?;
    let epsilon = resolve(&args.epsilon, cfg, "epsilon", 1e-5)?;
    let tolerance = resolve(&args.tolerance, cfg, "tolerance", 1e-4)?;
    let max_checks = resolve(&args.max_checks, cfg, "max-checks", 200)?;
    let data_seed = resolve(&args.data_seed, cfg, "data-seed", 7)?;
    let size = resolve(&args.size, cfg, "size", 48)?;
    let mut model = build_model(mc.clone())?;
    let samples = gen_scenes(data_seed, 2, size, 4)?;
    let report = gradcheck(&mut model, &samples, epsilon, tolerance, max_checks, mc.seed)?;
    println!(
        "checked {} parameter scalars, max relative error {:.3e}",
        report.checked, report.max_rel_err
    );
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        for f in &report.failures {
            eprintln!(
                "FAIL {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                f.name, f.index, f.analytic, f.numeric, f.rel_err
            );
        }
        Err(Error::Contract(format!(
            "gradient check failed for {} of {} sampled scalars",
            report.failures.len(),
            report.checked
        )))
    }
}

fn cmd_export_features(args: &ExportArgs, cfg: &ConfigMap) -> Result<(), Error> {
    let mc = args.model.resolve(cfg)?;
    let data_seed = resolve(&args.data_seed, cfg, "data-seed", 0)?;
    let size = resolve(&args.size, cfg, "size", 97)?;
    if let Some(branch) = args.branch {
        if branch >= mc.rates.len() {
            return Err(Error::Config(format!(
                "branch {branch} out of range for {} rates",
                mc.rates.len()
            )));
        }
    }
    let mut model = build_model(mc.clone())?;
    if let Some(ckpt) = &args.checkpoint {
        model.load(ckpt)?;
    }
    let scene = generate_scene(data_seed, size, size, 5)?;
    let mut tape = Tape::new();
    let x = scene.image_tensor(&mut tape);
    let branches = model.branch_activations(&mut tape, x)?;
    ensure_dir(&args.out)?;
    let mut index = String::new();
    for (i, (rate, act)) in branches.iter().enumerate() {
        if args.branch.is_some_and(|b| b != i) {
            continue;
        }
        let [_, c, h, w] = tape.shape(*act);
        let data = tape.data(*act);
        for ch in 0..c {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            let (lo, hi) = plane.iter().fold((Real::INFINITY, Real::NEG_INFINITY), |(l, u), &v| {
                (l.min(v), u.max(v))
            });
            let bytes: Vec<u8> = plane
                .iter()
                .map(|&v| {
                    if hi > lo {
                        ((v - lo) / (hi - lo) * 255.0).round() as u8
                    } else {
                        0
                    }
                })
                .collect();
            let name = format!("rate{rate}_ch{ch:03}.pgm");
            write_pgm(&args.out.join(&name), &bytes, h, w)?;
            let _ = writeln!(index, "rate={rate} channel={ch} file={name} min={lo} max={hi}");
        }
    }
    let index_path = args.out.join("index.txt");
    std::fs::write(&index_path, index).map_err(|e| Error::Io {
        path: index_path,
        source: e,
    })?;
    println!("wrote feature tiles to {}", args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let cfg = match &cli.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    match &cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args, &cfg),
        Cmd::Train(args) => cmd_train(args, &cfg),
        Cmd::Eval(args) => cmd_eval(args, &cfg, cli.threads),
        Cmd::CountParams(args) => cmd_count_params(args, &cfg),
        Cmd::Gradcheck(args) => cmd_gradcheck(args, &cfg),
        Cmd::ExportFeatures(args) => cmd_export_features(args, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                // misconfiguration is a usage error; everything else is a
                // runtime/numeric failure
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ksac::heads::HeadKind;

    fn config_from(text: &str) -> ConfigMap {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.config");
        std::fs::write(&path, text).unwrap();
        ConfigMap::load(&path).unwrap()
    }

    #[test]
    fn config_file_parsing_and_overrides() {
        let cfg = config_from("# comment\nhead = aspp\nrates = 1,2,4 # inline\ncin = 32\n");
        let args = ModelArgs {
            cin: Some(16),
            ..Default::default()
        };
        let mc = args.resolve(&cfg).unwrap();
        assert_eq!(mc.head, HeadKind::Aspp);
        assert_eq!(mc.rates, vec![1, 2, 4]);
        // the flag wins over the file
        assert_eq!(mc.c_in, 16);
        assert_eq!(mc.c_out, 64);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = config_from("head = aspp\nrates = 1,6,12\ncin = 32\ncout = 48\nos = 8\nclasses = 5\nseed = 9\ndecoder = true\n");
        let mc = ModelArgs::default().resolve(&cfg).unwrap();
        let reparsed = ModelArgs::default()
            .resolve(&config_from(&model_config_text(&mc)))
            .unwrap();
        assert_eq!(mc, reparsed);
    }

    #[test]
    fn bad_config_lines_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.config");
        std::fs::write(&path, "this is not a pair\n").unwrap();
        assert!(matches!(ConfigMap::load(&path), Err(Error::Config(_))));
        let cfg = config_from("cin = not-a-number\n");
        assert!(ModelArgs::default().resolve(&cfg).is_err());
    }

    #[test]
    fn lr_schedule_forms() {
        assert_eq!(parse_lr_schedule("0.05").unwrap(), vec![(0, 0.05)]);
        assert_eq!(
            parse_lr_schedule("0:0.01,1500:0.005").unwrap(),
            vec![(0, 0.01), (1500, 0.005)]
        );
        assert!(parse_lr_schedule("0:x").is_err());
    }

    #[test]
    fn strategy_names() {
        assert_eq!(parse_strategy("single", vec![]).unwrap(), EvalStrategy::Single);
        assert!(matches!(
            parse_strategy("ms", vec![1.0]).unwrap(),
            EvalStrategy::MultiScale(_)
        ));
        assert!(matches!(
            parse_strategy("ms+flip", vec![1.0]).unwrap(),
            EvalStrategy::MultiScaleFlip(_)
        ));
        assert!(parse_strategy("maximal", vec![]).is_err());
    }
}
