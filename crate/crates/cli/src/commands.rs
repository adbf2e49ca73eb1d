use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cellcount_core::annotations::{clean_dataset, dataset_stats, stats_for_sets, AnnotationSet};
use cellcount_core::dataset::{scan_source, write_dataset, write_synthetic_corpus, Dataset, SourceDefaults};
use cellcount_core::imaging::comparison_pgm;
use cellcount_core::metrics::{
    macro_markdown, metrics_csv, metrics_markdown, parse_metrics_csv, predictions_csv, DensityBin, MacroRow,
    MetricsReport,
};
use cellcount_core::model::checkpoint::{decode_checkpoint, encode_checkpoint, LoadedModel};
use cellcount_core::model::{CountingModel, DensityModel, ModelConfig, RegressionModel};
use cellcount_core::splitting::{carve_validation, stratified_split, Assignment, SplitItem, SplitManifest};
use cellcount_core::synthgen::generate_corpus;
use cellcount_core::training::{
    ablation_csv, ablation_markdown, best_grid_point, evaluate, grid_csv, grid_search, hparams_markdown,
    parse_ablation_csv, run_ablation, train_with_observer, ConstantPredictor, GroundTruthOracle, Predictor, Sample,
    TrainConfig, TrainError,
};

use crate::config::ModelKindName;
use crate::{CliError, Command, Common, Result, RunConfig, Subset};

pub const SPLIT_FILE: &str = "split.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

pub fn dispatch(command: &Command, common: &Common, cfg: &mut RunConfig, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Ingest {
            src,
            marker,
            magnification,
        } => ingest(src, marker.as_deref(), magnification.as_deref(), common, out),
        Command::Stats { dataset } => stats(dataset, common, out),
        Command::Synth { n_images } => {
            if let Some(n) = n_images {
                cfg.synth.n_images = *n;
            }
            synth(cfg, common, out)
        }
        Command::Split {
            dataset,
            ratio,
            k_bins,
            validation_ratio,
        } => {
            let s = &mut cfg.split;
            s.ratio = ratio.unwrap_or(s.ratio);
            s.k_bins = k_bins.unwrap_or(s.k_bins);
            s.validation_ratio = validation_ratio.unwrap_or(s.validation_ratio);
            split(dataset, cfg, common, out)
        }
        Command::Train {
            dataset,
            split,
            batch_size,
            lr,
            max_epochs,
            max_steps,
            objective,
            frozen,
            grid,
        } => {
            let t = &mut cfg.train;
            t.batch_size = batch_size.or(t.batch_size);
            t.learning_rate = lr.or(t.learning_rate);
            t.max_epochs = max_epochs.or(t.max_epochs);
            t.max_steps = max_steps.or(t.max_steps);
            t.objective = objective.clone().or(t.objective.take());
            if *frozen {
                t.encoder_trainable = Some(false);
            }
            train(dataset, split, *grid, cfg, common, out)
        }
        Command::Eval {
            dataset,
            split,
            checkpoint,
            oracle,
            baseline,
            subset,
        } => {
            let which = match (checkpoint, oracle, baseline) {
                (Some(p), _, _) => Which::Checkpoint(p.clone()),
                (None, true, _) => Which::Oracle,
                (None, false, true) => Which::Baseline,
                _ => {
                    return Err(CliError::Config(
                        "eval needs --checkpoint, --oracle or --baseline".into(),
                    ))
                }
            };
            eval(dataset, split, which, *subset, cfg, common, out)
        }
        Command::Ablate {
            dataset,
            split,
            max_steps,
        } => {
            cfg.train.max_steps = max_steps.or(cfg.train.max_steps);
            ablate(dataset, split, cfg, common, out)
        }
        Command::Report { inputs } => report(inputs, cfg, common, out),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(cellcount_core::Error::io(path, e))
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::Runtime(format!("cannot write output: {e}")))
}

fn out_dir(common: &Common) -> Result<&Path> {
    let dir = common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("--out <DIR> is required for this command".into()))?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Fails with the missing file and the command that produces it.
fn require(path: &Path, producer: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "missing {}; run `cellcount {producer}` first",
            path.display()
        )))
    }
}

fn open_dataset(root: &Path) -> Result<Dataset> {
    require(
        &root.join(cellcount_core::dataset::METADATA_FILE),
        "ingest` or `cellcount synth",
    )?;
    Ok(Dataset::open(root)?)
}

fn load_split(path: &Path, ds: &Dataset, seed: u64) -> Result<SplitManifest> {
    require(path, "split")?;
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let split = SplitManifest::from_csv(&text, seed)?;
    if let Some(e) = split.entries.iter().find(|e| ds.record(&e.image_id).is_none()) {
        return Err(CliError::Data(format!(
            "{} lists image {} which is not in {}",
            path.display(),
            e.image_id,
            ds.root.display()
        )));
    }
    Ok(split)
}

fn subset_samples(
    ds: &Dataset,
    split: &SplitManifest,
    which: Assignment,
    model: &ModelConfig,
    cfg: &RunConfig,
) -> Result<Vec<Sample>> {
    let ids = split.ids(which);
    Ok(ds.samples(&ids, model, &cfg.kernel()?)?)
}

fn ingest(
    src: &Path,
    marker: Option<&str>,
    magnification: Option<&str>,
    common: &Common,
    out: &mut dyn Write,
) -> Result<()> {
    let dest = out_dir(common)?;
    let defaults = SourceDefaults {
        marker: marker
            .map(str::parse)
            .transpose()
            .map_err(|e| CliError::Config(format!("--marker: {e}")))?
            .unwrap_or_default(),
        magnification: magnification
            .map(str::parse)
            .transpose()
            .map_err(|e| CliError::Config(format!("--magnification: {e}")))?
            .unwrap_or_default(),
    };
    let pairs = scan_source(src, &defaults)?;
    let (manifest, rejects) = clean_dataset(pairs);
    write_file(&dest.join("reject_report.csv"), rejects.to_csv())?;
    if manifest.records.is_empty() {
        return Err(CliError::Data(format!(
            "no valid image/annotation pairs under {}; see {}",
            src.display(),
            dest.join("reject_report.csv").display()
        )));
    }
    write_dataset(&manifest, src, dest)?;
    let table = dataset_stats(&manifest)?;
    write_file(&dest.join("stats.md"), table.to_markdown())?;
    write_file(&dest.join("stats.csv"), table.to_csv())?;
    say(
        out,
        format!(
            "ingested {} images into {} ({} rejected)",
            manifest.records.len(),
            dest.display(),
            rejects.entries.len()
        ),
    )?;
    for r in &rejects.entries {
        say(out, format!("  rejected {}: {} ({})", r.key, r.reason, r.detail))?;
    }
    say(out, table.to_markdown())
}

fn stats(dataset: &Path, common: &Common, out: &mut dyn Write) -> Result<()> {
    let ds = open_dataset(dataset)?;
    let sets = ds.annotation_sets()?;
    let refs: Vec<&AnnotationSet> = sets.iter().collect();
    let table = stats_for_sets(&refs)?;
    if common.out.is_some() {
        let dir = out_dir(common)?;
        write_file(&dir.join("stats.md"), table.to_markdown())?;
        write_file(&dir.join("stats.csv"), table.to_csv())?;
    }
    say(out, table.to_markdown())
}

fn synth(cfg: &RunConfig, common: &Common, out: &mut dyn Write) -> Result<()> {
    let spec = cfg.scene_spec()?;
    let quotas = cfg.quotas()?;
    let dest = out_dir(common)?;
    let scenes = generate_corpus(&spec, cfg.synth.n_images, quotas.as_ref())?;
    write_synthetic_corpus(&scenes, dest)?;
    let sets: Vec<&AnnotationSet> = scenes.iter().map(|s| &s.dots).collect();
    say(out, format!("wrote {} scenes to {}", scenes.len(), dest.display()))?;
    if !sets.is_empty() {
        say(out, stats_for_sets(&sets)?.to_markdown())?;
    }
    Ok(())
}

/// Equal-width histogram of counts per subset, for comparing subsets.
fn count_histogram(split: &SplitManifest, bins: usize) -> String {
    let max = split.entries.iter().map(|e| e.count).fold(0.0, f64::max).max(1.0);
    let width = max / bins as f64;
    let mut rows = vec![[0usize; 3]; bins];
    for e in &split.entries {
        let b = ((e.count / width) as usize).min(bins - 1);
        rows[b][e.assignment as usize] += 1;
    }
    let mut csv = String::from("lower,upper,train,validation,test\n");
    for (i, r) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            i as f64 * width,
            (i + 1) as f64 * width,
            r[0],
            r[1],
            r[2]
        ));
    }
    csv
}

fn split(dataset: &Path, cfg: &RunConfig, common: &Common, out: &mut dyn Write) -> Result<()> {
    let dest = out_dir(common)?;
    let ds = open_dataset(dataset)?;
    let items: Vec<SplitItem> = ds
        .records
        .iter()
        .map(|r| SplitItem {
            image_id: r.id.clone(),
            count: r.count as f64,
            magnification: r.magnification,
        })
        .collect();
    let s = &cfg.split;
    let (two_way, breaks) = stratified_split(&items, s.k_bins, s.ratio, cfg.seed())?;
    let manifest = carve_validation(&two_way, s.validation_ratio)?;
    write_file(&dest.join(SPLIT_FILE), manifest.to_csv())?;
    write_file(&dest.join("strata.md"), manifest.strata_markdown())?;
    write_file(&dest.join("count_histogram.csv"), count_histogram(&manifest, 10))?;
    say(
        out,
        format!(
            "Jenks breaks (k={}): {:?}, GVF {:.4}",
            breaks.k, breaks.breaks, breaks.gvf
        ),
    )?;
    say(out, manifest.strata_markdown())?;
    for a in [Assignment::Train, Assignment::Validation, Assignment::Test] {
        let n = manifest.ids(a).len();
        let mean = manifest
            .mean_count(a)
            .map_or_else(|| "-".to_string(), |m| format!("{m:.2}"));
        say(out, format!("{a}: {n} images, mean CPI {mean}"))?;
    }
    Ok(())
}

fn run_training<M: CountingModel + Clone>(
    model: M,
    train_set: &[Sample],
    val_set: &[Sample],
    tcfg: &TrainConfig,
    out: &mut dyn Write,
) -> Result<(M, cellcount_core::training::TrainState)> {
    let mut lines = Vec::new();
    let result = train_with_observer(model, train_set, val_set, tcfg, &mut |r| {
        lines.push(format!(
            "epoch {:>3}  step {:>5}  loss {:.6}  val_mae {:.4}  best {:.4}",
            r.epoch, r.step, r.train_loss, r.val_mae, r.best_val_mae
        ))
    });
    for l in lines {
        say(out, l)?;
    }
    Ok(result?)
}

fn train_and_save<M: CountingModel + Clone>(
    model: M,
    train_set: &[Sample],
    val_set: &[Sample],
    mut tcfg: TrainConfig,
    grid: Option<&[(usize, f64)]>,
    dest: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    if let Some(candidates) = grid {
        let points = grid_search(&model, candidates, train_set, val_set, &tcfg);
        write_file(&dest.join("grid.csv"), grid_csv(&points))?;
        let best = best_grid_point(&points)
            .ok_or_else(|| CliError::Runtime("every grid candidate failed; see grid.csv".into()))?;
        tcfg.batch_size = best.batch_size;
        tcfg.learning_rate = best.learning_rate;
        let table = hparams_markdown(&[(model_label(&model), best.batch_size, best.learning_rate)]);
        write_file(&dest.join("hparams.md"), &table)?;
        say(out, table)?;
    }
    let (trained, state) = run_training(model, train_set, val_set, &tcfg, out)?;
    write_file(&dest.join(CHECKPOINT_FILE), encode_checkpoint(&trained))?;
    write_file(&dest.join("history.csv"), state.history_csv())?;
    say(
        out,
        format!(
            "best validation MAE {:.4} at epoch {} of {} ({} steps); checkpoint {}",
            state.best_val_mae,
            state.best_epoch,
            state.epoch,
            state.step,
            dest.join(CHECKPOINT_FILE).display()
        ),
    )
}

fn model_label(model: &dyn CountingModel) -> &'static str {
    match model.kind() {
        cellcount_core::model::ModelKind::Density => "Density model",
        cellcount_core::model::ModelKind::Regression => "Regression model",
    }
}

fn train(
    dataset: &Path,
    split_path: &Path,
    grid: bool,
    cfg: &RunConfig,
    common: &Common,
    out: &mut dyn Write,
) -> Result<()> {
    let mcfg = cfg.model_config()?;
    let tcfg = cfg.train_config()?;
    let ds = open_dataset(dataset)?;
    let split = load_split(split_path, &ds, cfg.seed())?;
    let dest = out_dir(common)?;
    let candidates = match grid {
        true if cfg.train.grid.is_empty() => {
            return Err(CliError::Config(
                "--grid needs [train] grid = [[batch, lr], ...] in the config".into(),
            ))
        }
        true => Some(cfg.train.grid.as_slice()),
        false => None,
    };
    let train_set = subset_samples(&ds, &split, Assignment::Train, &mcfg, cfg)?;
    let val_set = subset_samples(&ds, &split, Assignment::Validation, &mcfg, cfg)?;
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation").into());
    }
    say(
        out,
        format!(
            "training on {} images, validating on {} (objective {}, lr {:e}, batch {})",
            train_set.len(),
            val_set.len(),
            tcfg.objective,
            tcfg.learning_rate,
            tcfg.batch_size
        ),
    )?;
    match cfg.model.kind {
        ModelKindName::Density => train_and_save(
            DensityModel::new(mcfg)?,
            &train_set,
            &val_set,
            tcfg,
            candidates,
            dest,
            out,
        ),
        ModelKindName::Regression => train_and_save(
            RegressionModel::new(mcfg)?,
            &train_set,
            &val_set,
            tcfg,
            candidates,
            dest,
            out,
        ),
    }
}

enum Which {
    Checkpoint(PathBuf),
    Oracle,
    Baseline,
}

fn assignment(subset: Subset) -> Assignment {
    match subset {
        Subset::Train => Assignment::Train,
        Subset::Validation => Assignment::Validation,
        Subset::Test => Assignment::Test,
    }
}

fn eval(
    dataset: &Path,
    split_path: &Path,
    which: Which,
    subset: Subset,
    cfg: &RunConfig,
    common: &Common,
    out: &mut dyn Write,
) -> Result<()> {
    let ds = open_dataset(dataset)?;
    let split = load_split(split_path, &ds, cfg.seed())?;
    let loaded = match &which {
        Which::Checkpoint(p) => {
            require(p, "train")?;
            let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
            Some(decode_checkpoint(&bytes)?)
        }
        _ => None,
    };
    let mcfg = match &loaded {
        Some(m) => m.as_model().config().clone(),
        None => cfg.model_config()?,
    };
    let dest = out_dir(common)?;
    let samples = subset_samples(&ds, &split, assignment(subset), &mcfg, cfg)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!(
            "{} has no {} images",
            split_path.display(),
            assignment(subset)
        )));
    }
    let baseline;
    let (name, predictor): (String, &dyn Predictor) = match (&which, &loaded) {
        (Which::Checkpoint(p), Some(m)) => {
            let stem = p
                .file_stem()
                .map_or("model".into(), |s| s.to_string_lossy().into_owned());
            let model: &dyn Predictor = match m {
                LoadedModel::Density(d) => d,
                LoadedModel::Regression(r) => r,
            };
            (stem, model)
        }
        (Which::Oracle, _) => ("Ground-truth oracle".into(), &GroundTruthOracle),
        _ => {
            let counts: Vec<f64> = split
                .entries
                .iter()
                .filter(|e| e.assignment == Assignment::Train)
                .map(|e| e.count)
                .collect();
            if counts.is_empty() {
                return Err(TrainError::EmptySplit("train").into());
            }
            baseline = ConstantPredictor(counts.iter().sum::<f64>() / counts.len() as f64);
            ("Training-mean baseline".into(), &baseline)
        }
    };
    let bounds = cfg.bounds()?;
    let e = evaluate(predictor, &samples, bounds)?;
    write_file(&dest.join(METRICS_FILE), metrics_csv(&e.overall, &e.bins))?;
    write_file(&dest.join("predictions.csv"), predictions_csv(&e.pairs))?;
    let table = metrics_markdown(&[(name.as_str(), &e.overall)]);
    let bins = macro_markdown(&[(name.as_str(), &e.bins)], bounds);
    write_file(&dest.join("metrics.md"), &table)?;
    write_file(&dest.join("macro.md"), &bins)?;
    let grid = mcfg.grid();
    let zoom = (128 / grid).max(1);
    for s in samples.iter().take(cfg.eval.heatmaps) {
        if let Some(pred) = predictor.predict_map(s)? {
            let pgm = comparison_pgm(&s.density, &pred, zoom)?;
            write_file(&dest.join("heatmaps").join(format!("{}.pgm", s.id)), pgm)?;
        }
    }
    say(
        out,
        format!("{name} on {} {} images", samples.len(), assignment(subset)),
    )?;
    say(out, table)?;
    say(out, bins)
}

fn ablate(dataset: &Path, split_path: &Path, cfg: &RunConfig, common: &Common, out: &mut dyn Write) -> Result<()> {
    let mcfg = cfg.model_config()?;
    let tcfg = cfg.train_config()?;
    let ds = open_dataset(dataset)?;
    let split = load_split(split_path, &ds, cfg.seed())?;
    let dest = out_dir(common)?;
    let heads = cfg.ablation_heads(mcfg.feature_dim);
    if cfg.ablate.encoder.is_empty() || heads.is_empty() {
        return Err(CliError::Config("ablation grid is empty".into()));
    }
    let sets: Vec<Vec<Sample>> = [Assignment::Train, Assignment::Validation, Assignment::Test]
        .into_iter()
        .map(|a| subset_samples(&ds, &split, a, &mcfg, cfg))
        .collect::<Result<_>>()?;
    let quiet = TrainConfig {
        report_every: 0,
        ..tcfg
    };
    let rows = run_ablation(&mcfg, &cfg.ablate.encoder, &heads, &sets[0], &sets[1], &sets[2], &quiet);
    write_file(&dest.join(ABLATION_FILE), ablation_csv(&rows))?;
    let table = ablation_markdown(&rows);
    write_file(&dest.join("ablation.md"), &table)?;
    say(out, table)?;
    let failed = rows.iter().filter(|r| r.test_mae.is_err()).count();
    if failed == rows.len() {
        return Err(CliError::Runtime(format!("all {failed} ablation cells failed")));
    }
    Ok(())
}

fn report(inputs: &[PathBuf], cfg: &RunConfig, common: &Common, out: &mut dyn Write) -> Result<()> {
    let bounds = cfg.bounds()?;
    let mut perf: Vec<(String, MetricsReport, Vec<MacroRow>)> = Vec::new();
    let mut ablations = Vec::new();
    for dir in inputs {
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let (metrics, ablation) = (dir.join(METRICS_FILE), dir.join(ABLATION_FILE));
        if !metrics.is_file() && !ablation.is_file() {
            return Err(CliError::Data(format!(
                "{} has neither {METRICS_FILE} nor {ABLATION_FILE}; run `cellcount eval` or `cellcount ablate` first",
                dir.display()
            )));
        }
        if metrics.is_file() {
            let text = fs::read_to_string(&metrics).map_err(|e| io_err(&metrics, e))?;
            let mut overall = None;
            let mut bins = Vec::new();
            for (scope, r) in parse_metrics_csv(&text)? {
                match scope.parse::<DensityBin>() {
                    Ok(bin) => bins.push(MacroRow { bin, report: r }),
                    Err(_) => overall = Some(r),
                }
            }
            let overall = overall.ok_or_else(|| CliError::Data(format!("{} has no overall row", metrics.display())))?;
            perf.push((name.clone(), overall, bins));
        }
        if ablation.is_file() {
            let text = fs::read_to_string(&ablation).map_err(|e| io_err(&ablation, e))?;
            ablations.push((name, parse_ablation_csv(&text)?));
        }
    }
    let mut md = String::from("# Results\n");
    if !perf.is_empty() {
        let rows: Vec<(&str, &MetricsReport)> = perf.iter().map(|(n, r, _)| (n.as_str(), r)).collect();
        md.push_str("\n## Performance\n\n");
        md.push_str(&metrics_markdown(&rows));
        let rows: Vec<(&str, &[MacroRow])> = perf.iter().map(|(n, _, b)| (n.as_str(), b.as_slice())).collect();
        md.push_str("\n## Macro MAE and ACP by density\n\n");
        md.push_str(&macro_markdown(&rows, bounds));
    }
    for (name, rows) in &ablations {
        md.push_str(&format!("\n## Ablation: {name}\n\n"));
        md.push_str(&ablation_markdown(rows));
    }
    if common.out.is_some() {
        write_file(&out_dir(common)?.join("report.md"), &md)?;
    }
    say(out, md)
}
