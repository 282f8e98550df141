use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use semfuse::checkpoint::Checkpoint;
use semfuse::data::{
    generate_synthetic, load_dataset, load_entry, load_gray, match_pair_files, save_gray, save_rgb,
    save_split, scan_dataset, Split,
};
use semfuse::metrics::curve_csv;
use semfuse::train::{
    ablation_table_csv, evaluate_fused, run_ablation, semantic_train, warm_start, AblationPlan,
    LogEvent, TrainState,
};
use semfuse::types::reattach_chroma;
use semfuse::{FusionModel, ImagePair, LabelPalette};

use crate::config::RunConfig;
use crate::{ConfigArgs, Failure, PhaseArg};

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn contract(msg: impl Into<String>) -> Failure {
    Failure::Contract(msg.into())
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| contract(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| contract(format!("cannot write {}: {e}", path.display())))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<String, Failure> {
    ck.save(path)
        .map_err(|e| contract(format!("cannot write {}: {e}", path.display())))?;
    Ok(ck.checksum())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| contract(format!("{}: {e}", path.display())))
}

/// Writes every log event to `train.log`; epoch and validation records
/// are echoed to standard output.
struct RunLog {
    file: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl RunLog {
    fn create(path: &Path) -> Result<Self, Failure> {
        let file = File::create(path)
            .map_err(|e| contract(format!("cannot write {}: {e}", path.display())))?;
        Ok(Self {
            file: BufWriter::new(file),
            error: None,
        })
    }

    fn record(&mut self, event: &LogEvent) {
        let line = event.to_line();
        if !matches!(event, LogEvent::Step(_)) {
            println!("{line}");
        }
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> CmdResult {
        if let Some(e) = self.error.take() {
            return Err(contract(format!("training log: {e}")));
        }
        self.file
            .flush()
            .map_err(|e| contract(format!("training log: {e}")))
    }
}

fn trend_summary(phase: &str, state: &TrainState) -> String {
    let first = state.epoch_means.first().copied().unwrap_or(f64::NAN);
    let last = state.epoch_means.last().copied().unwrap_or(f64::NAN);
    format!(
        "{phase} epochs={} steps={} first_mean={first:.6} last_mean={last:.6} trend_ok={}",
        state.epoch_means.len(),
        state.step,
        state.trend_ok()
    )
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    args: &ConfigArgs,
    images: Option<usize>,
    val_images: Option<usize>,
    test_images: Option<usize>,
    size: Option<usize>,
    seed: Option<u64>,
    glare: Option<f64>,
    out: &Path,
) -> CmdResult {
    let mut cfg = load_config(args)?;
    let d = &mut cfg.data;
    if let Some(n) = images {
        d.synth.count = n;
    }
    if let Some(n) = val_images {
        d.val_images = n;
    }
    if let Some(n) = test_images {
        d.test_images = n;
    }
    if let Some(s) = size {
        d.synth.size = s;
    }
    if let Some(s) = seed {
        d.synth.seed = s;
    }
    if let Some(p) = glare {
        d.synth.glare_probability = p;
    }
    d.synth.validate()?;

    let counts = [
        (Split::Train, d.synth.count),
        (Split::Val, d.val_images),
        (Split::Test, d.test_images),
    ];
    create_dir(out)?;
    let palette = LabelPalette::synthetic();
    for (split, count) in counts {
        if count == 0 {
            continue;
        }
        let spec = semfuse::data::SynthSpec {
            count,
            ..d.synth.clone()
        }
        .for_split(split);
        let pairs = generate_synthetic(&spec)?;
        save_split(out, split, &pairs)
            .map_err(|e| contract(format!("cannot write {}: {e}", out.display())))?;
        let manifest = scan_dataset(out, split, &palette, &cfg.train)?;
        write_file(&out.join(format!("{split}.manifest")), &manifest.to_text())?;
        println!(
            "synth split={split} images={} size={} seed={} dir={}",
            manifest.entries.len(),
            spec.size,
            spec.seed,
            out.join(split.as_str()).display()
        );
    }
    Ok(())
}

fn dataset_root(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.data.root.clone())
        .ok_or_else(|| usage("no dataset: pass --data or set data.root"))
}

fn load_splits(
    cfg: &RunConfig,
    root: &Path,
    palette: &LabelPalette,
) -> Result<(Vec<ImagePair>, Vec<ImagePair>), Failure> {
    let (manifest, train) = load_dataset(root, cfg.data.train_split, palette, &cfg.train)?;
    for r in &manifest.rejected {
        eprintln!("skipped {}: {}", r.id, r.reason);
    }
    let val = match cfg.data.val_split {
        Some(split) if root.join(split.as_str()).is_dir() => {
            load_dataset(root, split, palette, &cfg.train)?.1
        }
        Some(split) => {
            eprintln!(
                "note: no {} split under {}; training without validation",
                split,
                root.display()
            );
            Vec::new()
        }
        None => Vec::new(),
    };
    Ok((train, val))
}

pub fn train(
    args: &ConfigArgs,
    phase: PhaseArg,
    init_from: Option<&Path>,
    data: Option<PathBuf>,
    out: &Path,
) -> CmdResult {
    let cfg = load_config(args)?;
    let tc = &cfg.train;
    if phase == PhaseArg::Warm && tc.skip_warm_start {
        return Err(usage(
            "train.skip_warm_start = true leaves nothing for --phase warm",
        ));
    }
    if phase == PhaseArg::Warm && init_from.is_some() {
        return Err(usage("--init-from only applies to the semantic phase"));
    }
    if phase == PhaseArg::Both && init_from.is_some() {
        return Err(usage(
            "--phase both trains its own warm start; drop --init-from or use --phase semantic",
        ));
    }
    let init = init_from.map(load_checkpoint).transpose()?;
    let root = dataset_root(&cfg, data)?;
    let palette = cfg.palette().map_err(usage)?;
    let (train_set, val_set) = load_splits(&cfg, &root, &palette)?;

    create_dir(out)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let mut log = RunLog::create(&out.join("train.log"))?;
    let mut trend_ok = true;

    let theta = match phase {
        PhaseArg::Semantic => init,
        PhaseArg::Warm | PhaseArg::Both if tc.skip_warm_start => None,
        PhaseArg::Warm | PhaseArg::Both => {
            let model = FusionModel::new(tc)?;
            let outcome = warm_start(model, &train_set, tc, &mut |e: &LogEvent| log.record(e))?;
            let path = out.join("warm.ck");
            let sum = save_checkpoint(&outcome.checkpoint, &path)?;
            println!(
                "{} checkpoint={} sha256={sum}",
                trend_summary("warm", &outcome.state),
                path.display()
            );
            trend_ok &= outcome.state.trend_ok();
            Some(outcome.checkpoint)
        }
    };

    if phase != PhaseArg::Warm {
        let outcome = semantic_train(
            theta.as_ref(),
            &train_set,
            &val_set,
            tc,
            &mut |e: &LogEvent| log.record(e),
        )?;
        let best = out.join("semantic_best.ck");
        let last = out.join("semantic_last.ck");
        let best_sum = save_checkpoint(&outcome.best, &best)?;
        let last_sum = save_checkpoint(&outcome.last, &last)?;
        println!(
            "{} best_epoch={} best={} best_sha256={best_sum} last={} last_sha256={last_sum}",
            trend_summary("semantic", &outcome.state),
            outcome.best_epoch,
            best.display(),
            last.display()
        );
        trend_ok &= outcome.state.trend_ok();
    }
    log.finish()?;
    if !trend_ok {
        return Err(contract(
            "loss trend contract violated: final epoch mean is not below the first",
        ));
    }
    Ok(())
}

pub fn fuse(model: &Path, input_dir: &Path, out_dir: &Path, color: bool) -> CmdResult {
    let ck = load_checkpoint(model)?;
    let (entries, rejected) = match_pair_files(input_dir)?;
    create_dir(out_dir)?;
    let palette = LabelPalette::numbered(ck.config().class_count);
    let mut failures: Vec<(String, String)> =
        rejected.into_iter().map(|r| (r.id, r.reason)).collect();
    let mut written = 0;
    for mut entry in entries {
        entry.label = None;
        let path = out_dir.join(format!("{}.png", entry.id));
        let result = load_entry(&entry, &palette, ck.config()).and_then(|pair| {
            let fused = ck.fusion.forward(&pair)?;
            if color {
                save_rgb(&path, &reattach_chroma(&fused, &pair.vis_rgb)?)
            } else {
                save_gray(&path, &fused)
            }
        });
        match result {
            Ok(()) => written += 1,
            Err(e) => failures.push((entry.id, e.to_string())),
        }
    }
    for (id, reason) in &failures {
        eprintln!("failed {id}: {reason}");
    }
    println!(
        "fuse written={written} failed={} out={}",
        failures.len(),
        out_dir.display()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(contract(format!(
            "{} pair(s) could not be fused",
            failures.len()
        )))
    }
}

pub fn eval(
    args: &ConfigArgs,
    fused_dir: &Path,
    dataset: &Path,
    seg_model: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let cfg = load_config(args)?;
    let palette = cfg.palette().map_err(usage)?;
    let seg = match seg_model {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let seg = ck
                .seg
                .ok_or_else(|| usage(format!("{} holds no segmentation net", path.display())))?;
            if seg.class_count() != palette.class_count() {
                return Err(usage(format!(
                    "segmentation net has {} classes, palette `{}` has {}",
                    seg.class_count(),
                    cfg.data.palette,
                    palette.class_count()
                )));
            }
            Some(seg)
        }
        None => None,
    };

    let (entries, rejected) = match_pair_files(dataset)?;
    for r in &rejected {
        eprintln!("skipped {}: {}", r.id, r.reason);
    }
    if entries.is_empty() {
        return Err(contract(format!(
            "no complete pairs under {}",
            dataset.display()
        )));
    }
    let mut pairs = Vec::with_capacity(entries.len());
    let mut fused = Vec::with_capacity(entries.len());
    let mut missing = Vec::new();
    for mut entry in entries {
        if seg.is_none() {
            entry.label = None;
        }
        let path = fused_dir.join(format!("{}.png", entry.id));
        if !path.is_file() {
            missing.push(entry.id);
            continue;
        }
        fused.push(load_gray(&path)?);
        pairs.push(load_entry(&entry, &palette, &cfg.train)?);
    }
    if !missing.is_empty() {
        return Err(contract(format!(
            "no fused image for {} pair(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    if seg.is_some() && pairs.iter().any(|p| p.label.is_none()) {
        return Err(usage(format!(
            "{} has no labels/ to score segmentation against",
            dataset.display()
        )));
    }

    let report = evaluate_fused(&fused, seg.as_ref(), &pairs, &palette)?;
    create_dir(out)?;
    let text = report.to_text();
    write_file(&out.join("report.txt"), &text)?;
    write_file(&out.join("sf_curve.csv"), &curve_csv(&report.sf_curve))?;
    write_file(&out.join("ag_curve.csv"), &curve_csv(&report.ag_curve))?;
    if let Some(csv) = report.class_table_csv() {
        write_file(&out.join("classes.csv"), &csv)?;
    }
    print!("{text}");
    Ok(())
}

pub fn ablate(args: &ConfigArgs, plan: &str, data: Option<PathBuf>, out: &Path) -> CmdResult {
    let cfg = load_config(args)?;
    let palette = cfg.palette().map_err(usage)?;
    let plan = if plan == "default" {
        AblationPlan::default_plan(&cfg.train, &palette)
    } else {
        let text = fs::read_to_string(plan).map_err(|e| usage(format!("{plan}: {e}")))?;
        AblationPlan::parse(&text, &cfg.train).map_err(|e| usage(format!("{plan}: {e}")))?
    };
    let root = dataset_root(&cfg, data)?;
    let (train_set, val_set) = load_splits(&cfg, &root, &palette)?;

    create_dir(out)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let mut log = RunLog::create(&out.join("ablation.log"))?;
    let results = run_ablation(
        &plan,
        &train_set,
        &val_set,
        &palette,
        &mut |e: &LogEvent| log.record(e),
    );
    log.finish()?;
    let table = ablation_table_csv(&results, &palette);
    write_file(&out.join("ablation.csv"), &table)?;
    print!("{table}");
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| r.outcome.is_err())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(contract(format!(
            "ablation rows failed: {}",
            failed.join(", ")
        )))
    }
}
