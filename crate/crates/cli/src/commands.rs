//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lwanet::analysis::{benchmark_latency, count_model};
use lwanet::autodiff::gradient_suite;
use lwanet::data::{
    load_dataset, load_image, normalize, resize_bilinear, save_mask_png, save_rgb_png, split_holdout, synth_shapes,
    ClassTable, SegSample,
};
use lwanet::loss::LabelMap;
use lwanet::network::{read_container, Model, NetworkConfig};
use lwanet::train::{predict_masks, FitOptions, Trainer};
use serde_json::json;

use crate::config::{parse_size, RunConfig};
use crate::{AnalyzeArgs, BenchArgs, CliError, GradCheckArgs, InferArgs, TrainArgs};

type CliResult<T = ()> = Result<T, CliError>;

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn usage_size(s: &str) -> CliResult<[usize; 2]> {
    let hw = parse_size(s).map_err(CliError::Usage)?;
    if hw[0] == 0 || hw[1] == 0 || hw[0] % 32 != 0 || hw[1] % 32 != 0 {
        return Err(CliError::Usage(format!(
            "size {s}: width and height must be positive multiples of 32"
        )));
    }
    Ok(hw)
}

/// `LWA_SEED` overrides the configured seed; an explicit `--seed` wins over both.
fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("LWA_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("LWA_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Write to stdout, tolerating a closed pipe (`lwanet analyze --json | head`).
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(value: &serde_json::Value) {
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(value).expect("json value serializes")
    ));
}

fn effective_config(args: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.max_steps {
        t.max_steps = Some(v);
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.gamma {
        t.gamma = v;
    }
    if let Some(v) = env_seed()? {
        t.seed = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(p) = &args.pretrained {
        t.pretrained_encoder = Some(p.clone());
    }
    let n = &mut cfg.network;
    if let Some(v) = args.classes {
        n.num_classes = v;
    }
    if let Some(s) = &args.size {
        n.input_size = usage_size(s)?;
    }
    if args.no_afb {
        n.afb_enabled = false;
    }
    if args.no_augment {
        cfg.augment.enabled = false;
    }
    if let Some(root) = &args.data_root {
        cfg.data.root = Some(root.clone());
        cfg.data.synthetic = None;
    }
    if let Some(count) = args.synthetic {
        cfg.data.synthetic = Some(count);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_training_data(cfg: &RunConfig) -> CliResult<(Vec<SegSample>, Vec<SegSample>)> {
    let n = &cfg.network;
    if let Some(count) = cfg.data.synthetic {
        let all = synth_shapes(count, n.input_size, n.num_classes, cfg.train.seed)?;
        return Ok(split_holdout(all, cfg.train.val_fraction));
    }
    let root = cfg
        .data
        .root
        .as_ref()
        .ok_or_else(|| CliError::Usage("no training data: pass --synthetic N or --data-root DIR".into()))?;
    let train = load_dataset(root, &cfg.data.split, n.num_classes)?;
    let check = |s: &SegSample| -> CliResult {
        if s.hw() != n.input_size {
            return Err(CliError::Runtime(format!(
                "{}: image is {}x{}, network input size is {}x{}",
                s.name,
                s.hw()[1],
                s.hw()[0],
                n.input_size[1],
                n.input_size[0]
            )));
        }
        Ok(())
    };
    train.iter().try_for_each(check)?;
    match &cfg.data.val_split {
        Some(split) => {
            let val = load_dataset(root, split, n.num_classes)?;
            val.iter().try_for_each(check)?;
            Ok((train, val))
        }
        None => Ok(split_holdout(train, cfg.train.val_fraction)),
    }
}

pub fn train(args: TrainArgs) -> CliResult {
    let cfg = effective_config(&args)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::resume(path)?;
            if args.epochs.is_some() || args.max_steps.is_some() {
                t.set_budget(cfg.train.epochs, cfg.train.max_steps);
            }
            t
        }
        None => {
            let model = Model::build_seeded(&cfg.network, cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    // A resumed run keeps the network it was checkpointed with.
    let mut cfg = cfg;
    cfg.network = trainer.model().config().clone();
    cfg.train = trainer.config().clone();
    let (train_set, val_set) = load_training_data(&cfg)?;
    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| runtime(out, e))?;
    let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(out.join("effective_config.json"), text).map_err(|e| runtime(out, e))?;

    let opts = FitOptions {
        out_dir: Some(out.clone()),
        stop_after_epoch: None,
        augment: Some(cfg.augment.clone()),
        verbose: args.verbose,
    };
    let history = trainer.fit(&train_set, &val_set, &opts)?;
    let model_path = out.join("model.lwaw");
    trainer.model().save_weights(&model_path)?;
    let state = trainer.state();
    if args.json {
        print_json(&json!({
            "out_dir": out,
            "train_samples": train_set.len(),
            "val_samples": val_set.len(),
            "epochs_run": history.len(),
            "steps": state.step,
            "best_mdice": state.best_mdice,
            "best_epoch": state.best_epoch,
            "pretrained": trainer.pretrained(),
            "last": history.last(),
        }));
    } else {
        println!(
            "trained {} epochs ({} steps) on {} samples, {} held out",
            history.len(),
            state.step,
            train_set.len(),
            val_set.len()
        );
        if let Some(last) = history.last() {
            println!("final loss {:.6}", last.train_loss);
        }
        if let (Some(d), Some(e)) = (state.best_mdice, state.best_epoch) {
            println!("best mDice {d:.4} at epoch {e}");
        }
        println!("weights written to {}", model_path.display());
    }
    Ok(())
}

fn read_classes(path: &Path) -> CliResult<ClassTable> {
    let file = if path.is_dir() {
        path.join("classes.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))
}

fn collect_inputs(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| runtime(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn round_to_32(v: usize) -> usize {
    ((v + 16) / 32).max(1) * 32
}

fn infer_one(model: &Model<f32>, path: &Path, resize: bool) -> lwanet::Result<LabelMap> {
    let image = load_image(path)?;
    let (h, w) = (image.h(), image.w());
    if h % 32 == 0 && w % 32 == 0 {
        return predict_masks(model, &image);
    }
    if !resize {
        return Err(lwanet::Error::InvalidArgument(format!(
            "{}: {w}x{h} is not a multiple of 32 (pass --resize)",
            path.display()
        )));
    }
    let resized = resize_bilinear(&image, round_to_32(h), round_to_32(w))?;
    let logits = model.predict(&normalize(&resized, &model.config().normalization))?;
    Ok(LabelMap::argmax(&resize_bilinear(&logits, h, w)?))
}

fn overlay(image: &[f32], mask: &[u8], classes: &ClassTable) -> Vec<u8> {
    let hw = mask.len();
    let mut rgb = vec![0u8; 3 * hw];
    for p in 0..hw {
        let color = classes.color(mask[p]);
        let alpha = if mask[p] == 0 { 0.0 } else { 0.5 };
        for c in 0..3 {
            let v = (1.0 - alpha) * image[c * hw + p] * 255.0 + alpha * color[c] as f32;
            rgb[3 * p + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    rgb
}

pub fn infer(args: InferArgs) -> CliResult {
    let model = Model::<f32>::from_weights_file(&args.weights)?;
    let num_classes = model.config().num_classes;
    let classes = match &args.classes {
        Some(p) => read_classes(p)?,
        None => ClassTable::generic(num_classes),
    };
    if classes.len() < num_classes {
        return Err(CliError::Usage(format!(
            "class table lists {} classes, the model predicts {num_classes}",
            classes.len()
        )));
    }
    let files = collect_inputs(&args.inputs)?;
    fs::create_dir_all(&args.out).map_err(|e| runtime(&args.out, e))?;
    let mut failures = 0usize;
    let mut results = Vec::new();
    for path in &files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let outcome = infer_one(&model, path, args.resize).and_then(|mask| {
            let [_, h, w] = mask.shape();
            let mask_path = args.out.join(format!("{stem}_mask.png"));
            let overlay_path = args.out.join(format!("{stem}_overlay.png"));
            save_mask_png(&mask_path, mask.data(), w, h)?;
            let image = load_image(path)?;
            save_rgb_png(&overlay_path, &overlay(image.data(), mask.data(), &classes), w, h)?;
            let mut counts = vec![0u64; num_classes];
            for &c in mask.data() {
                counts[c as usize] += 1;
            }
            Ok((mask_path, overlay_path, counts))
        });
        match outcome {
            Ok((mask_path, overlay_path, counts)) => {
                if !args.json {
                    println!("{} -> {}", path.display(), mask_path.display());
                }
                results.push(json!({
                    "input": path,
                    "mask": mask_path,
                    "overlay": overlay_path,
                    "pixels_per_class": counts,
                }));
            }
            Err(e) => {
                failures += 1;
                eprintln!("error: {e}");
                results.push(json!({"input": path, "error": e.to_string()}));
            }
        }
    }
    if args.json {
        print_json(&json!({"results": results, "failures": failures}));
    }
    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} of {} inputs failed",
            files.len()
        )));
    }
    Ok(())
}

fn model_for(config: Option<&Path>, weights: Option<&Path>) -> CliResult<Model<f32>> {
    match (weights, config) {
        (Some(w), _) => Ok(Model::from_weights_file(w)?),
        (None, c) => {
            let cfg = RunConfig::load_or_default(c)?;
            cfg.network.validate()?;
            Ok(Model::build(&cfg.network)?)
        }
    }
}

pub fn bench(args: BenchArgs) -> CliResult {
    let sizes = args
        .sizes
        .iter()
        .map(|s| usage_size(s))
        .collect::<CliResult<Vec<_>>>()?;
    if args.iters < 1 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let model = model_for(args.config.as_deref(), args.weights.as_deref())?;
    let mut all = Vec::new();
    for [h, w] in sizes {
        let stats = benchmark_latency(&model, [1, 3, h, w], args.warmup, args.iters)?;
        if !args.json {
            println!(
                "{w}x{h}: mean {:.2} ms  p50 {:.2} ms  p95 {:.2} ms  {:.2} fps  ({} iters, {} workers)",
                stats.mean_ms, stats.p50_ms, stats.p95_ms, stats.fps, stats.iters, stats.workers
            );
        }
        all.push(stats);
    }
    if args.json {
        print_json(&json!({ "results": all }));
    }
    Ok(())
}

pub fn analyze(args: AnalyzeArgs) -> CliResult {
    let mut network: NetworkConfig = match (&args.weights, &args.config) {
        (Some(w), _) => read_container(w)?.network_config()?,
        (None, c) => RunConfig::load_or_default(c.as_deref())?.network,
    };
    if args.no_afb {
        network.afb_enabled = false;
    }
    if let Some(s) = &args.size {
        network.input_size = usage_size(s)?;
    }
    network.validate()?;
    let model = Model::<f32>::build(&network)?;
    let report = count_model(&model, network.input_size)?;
    if args.json {
        print_json(&json!({ "config": network, "report": report }));
    } else {
        emit(&report.to_table(args.per_layer, args.flops_per_mac));
    }
    Ok(())
}

pub fn grad_check(args: GradCheckArgs) -> CliResult {
    if args.cases < 1 {
        return Err(CliError::Usage("--cases must be at least 1".into()));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let entries = gradient_suite(seed, args.cases)?;
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if args.json {
        let rows: Vec<_> = entries
            .iter()
            .map(|e| {
                json!({
                    "name": e.name,
                    "cases": e.cases,
                    "coordinates": e.coordinates,
                    "max_rel_error": e.max_rel_error,
                    "passed": e.passed(),
                })
            })
            .collect();
        print_json(&json!({
            "seed": seed,
            "step": lwanet::autodiff::SUITE_STEP,
            "tolerance": lwanet::autodiff::SUITE_TOLERANCE,
            "ops": rows,
            "failed": failed,
        }));
    } else {
        for e in &entries {
            println!(
                "{:<22} {:>3} cases {:>7} coords  max rel err {:.3e}  {}",
                e.name,
                e.cases,
                e.coordinates,
                e.max_rel_error,
                if e.passed() { "ok" } else { "FAIL" }
            );
        }
        println!("{} ops, {failed} failed", entries.len());
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} ops exceeded the gradient tolerance"
        )));
    }
    Ok(())
}
