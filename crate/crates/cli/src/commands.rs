use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fieldseg::bayesinfer::{edge_interior_summary, mc_predict, McConfig};
use fieldseg::chipdata::{
    load_samples, spatial_split, write_chip, DatasetManifest, ManifestEntry, Sample, Split, SplitRatios,
};
use fieldseg::metrics::{MapRef, MetricsReport};
use fieldseg::raster::{render_pseudo_rgb, Raster};
use fieldseg::segnet::{count_params, read_checkpoint, write_checkpoint, UNetConfig};
use fieldseg::synthfields::{bayes_accuracy, DatasetGenerator, SynthConfig};
use fieldseg::trainer::{evaluate, train_with_progress, write_history, TrainConfig};
use fieldseg::{Error, Params};

use crate::{
    CliError, Command, EvalArgs, PredictArgs, ReportArgs, SplitArgs, SynthGenArgs, TrainArgs,
};

type CmdResult = Result<String, CliError>;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const SPLIT_MANIFEST_NAME: &str = "manifest.split.tsv";
pub const CHECKPOINT_NAME: &str = "checkpoint.aeunet";
pub const HISTORY_NAME: &str = "history.tsv";
pub const METRICS_NAME: &str = "metrics.txt";
pub const UNCERTAINTY_NAME: &str = "uncertainty.tsv";
pub const REPORT_NAME: &str = "report.txt";

pub fn dispatch(command: &Command) -> CmdResult {
    match command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Report(a) => report(a),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(io_error(dir, e)))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Data(io_error(path, e)))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    match Split::parse(name) {
        Some(s) if s != Split::Unassigned => Ok(s),
        _ => Err(CliError::Usage(format!(
            "unknown split {name:?} (expected train, val or test)"
        ))),
    }
}

fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<Sample>, CliError> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let samples = load_samples(&manifest, &parent_dir(manifest_path), Some(split))?;
    if samples.is_empty() {
        return Err(CliError::Data(Error::Split(format!(
            "no {} chips in {}",
            split.as_str(),
            manifest_path.display()
        ))));
    }
    Ok(samples)
}

fn synth_gen(a: &SynthGenArgs) -> CmdResult {
    let config = SynthConfig {
        chip_height: a.size,
        chip_width: a.size,
        edge_mix_width: a.edge_mix,
        margin_width: a.margin,
        field_irregularity: a.irregularity,
        noise_sigma: a.noise,
        separation: a.separation,
        seed: a.seed,
    };
    let generator = DatasetGenerator::new(&config, a.chips, a.spacing)?;
    let chip_dir = a.out.join("chips");
    create_dir(&chip_dir)?;
    let mut entries = Vec::with_capacity(a.chips);
    for i in 0..a.chips {
        let s = generator.chip(i)?;
        let rel = format!("chips/{}.aechip", s.chip.chip_id);
        write_chip(&s.chip, &s.labels, &a.out.join(&rel))?;
        entries.push(ManifestEntry {
            chip_id: s.chip.chip_id.clone(),
            path: rel,
            class_label: s.chip.class_label,
            centroid: s.chip.centroid,
            split: Split::Unassigned,
        });
    }
    let manifest = DatasetManifest::new(entries, a.seed)?;
    manifest.write(&a.out.join(MANIFEST_NAME))?;

    let pair = &generator.pair;
    let bayes = bayes_accuracy(pair);
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut params = String::new();
    writeln!(params, "chips={}", a.chips).unwrap();
    writeln!(params, "seed={}", a.seed).unwrap();
    writeln!(params, "size={}", a.size).unwrap();
    writeln!(params, "separation={}", a.separation).unwrap();
    writeln!(params, "noise_sigma={}", a.noise).unwrap();
    writeln!(params, "edge_mix_width={}", a.edge_mix).unwrap();
    writeln!(params, "margin_width={}", a.margin).unwrap();
    writeln!(params, "field_irregularity={}", a.irregularity).unwrap();
    writeln!(params, "spacing={}", a.spacing).unwrap();
    writeln!(params, "bayes_accuracy={bayes:.6}").unwrap();
    writeln!(params, "mu_tomato={}", join(&pair.mu_tomato)).unwrap();
    writeln!(params, "mu_other={}", join(&pair.mu_other)).unwrap();
    write_file(&a.out.join("synth_params.txt"), params)?;
    Ok(format!(
        "synth-gen: wrote {} chips to {} (bayes_accuracy {bayes:.6})",
        a.chips,
        a.out.display()
    ))
}

fn split(a: &SplitArgs) -> CmdResult {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let [train, val, test] = a.ratios;
    let ratios = SplitRatios::new(train, val, test)?;
    let mut out = spatial_split(&manifest, ratios, a.block, a.seed)?;
    let src_dir = parent_dir(&a.manifest);
    let out_dir = a.out.clone().unwrap_or_else(|| src_dir.clone());
    create_dir(&out_dir)?;
    let same = fs::canonicalize(&src_dir).ok() == fs::canonicalize(&out_dir).ok();
    if !same {
        let base = fs::canonicalize(&src_dir).map_err(|e| CliError::Data(io_error(&src_dir, e)))?;
        for e in &mut out.entries {
            if Path::new(&e.path).is_relative() {
                e.path = base.join(&e.path).display().to_string();
            }
        }
    }
    out.write(&out_dir.join(SPLIT_MANIFEST_NAME))?;
    Ok(format!(
        "split: train {} / val {} / test {} chips -> {}",
        out.count(Split::Train),
        out.count(Split::Val),
        out.count(Split::Test),
        out_dir.join(SPLIT_MANIFEST_NAME).display()
    ))
}

fn train(a: &TrainArgs) -> CmdResult {
    let config = TrainConfig {
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        mixed_precision: a.mixed_precision,
        unet: UNetConfig {
            base_width: a.base_width,
            depth: a.depth,
            dropout_rate: a.dropout,
            norm_enabled: !a.no_norm,
            ..UNetConfig::default()
        },
        ..TrainConfig::default()
    };
    config.validate()?;
    let train_set = load_split(&a.manifest, Split::Train)?;
    let val_set = load_split(&a.manifest, Split::Val)?;
    let quiet = a.quiet;
    let outcome = train_with_progress::<f32>(&config, &train_set, &val_set, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_f1 {:.6}  val_iou {:.6}",
                r.epoch, r.train_loss, r.val_loss, r.f1, r.iou
            );
        }
    })?;
    create_dir(&a.out)?;
    write_checkpoint(&outcome.params, &a.out.join(CHECKPOINT_NAME))?;
    write_history(&outcome.history, &a.out.join(HISTORY_NAME))?;
    let best = &outcome.history[outcome.best_epoch - 1];
    Ok(format!(
        "train: {} epochs on {} chips, best epoch {} (val_loss {:.6}, val_f1 {:.6}) -> {}",
        config.epochs,
        train_set.len(),
        outcome.best_epoch,
        best.val_loss,
        best.f1,
        a.out.display()
    ))
}

fn eval(a: &EvalArgs) -> CmdResult {
    let split = parse_split(&a.split)?;
    let params: Params = read_checkpoint(&a.checkpoint)?;
    let samples = load_split(&a.manifest, split)?;
    let report = evaluate(&params, &samples, a.threshold)?;
    create_dir(&a.out)?;
    write_file(&a.out.join(METRICS_NAME), report.to_text())?;
    Ok(format!(
        "eval: {} {} chips, pixel_accuracy {:.6}, f1 {:.6}, iou {:.6}, chip_accuracy {:.6}",
        samples.len(),
        split.as_str(),
        report.pixel_accuracy,
        report.f1,
        report.iou,
        report.chip_accuracy
    ))
}

pub fn uncertainty_header() -> &'static str {
    "chip_id\tclass_label\tmean_probability\tedge_median_var\tinterior_median_var\tedge_pixels\tinterior_pixels"
}

fn predict(a: &PredictArgs) -> CmdResult {
    let params: Params = read_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let base = parent_dir(&a.manifest);
    let samples = match &a.chip {
        Some(id) => {
            let entry = manifest.entries.iter().find(|e| &e.chip_id == id).ok_or_else(|| {
                CliError::Data(Error::Config(format!("chip {id} is not in {}", a.manifest.display())))
            })?;
            let one = DatasetManifest::new(vec![entry.clone()], manifest.generator_seed)?;
            load_samples(&one, &base, None)?
        }
        None => load_split(&a.manifest, parse_split(&a.split)?)?,
    };
    let config = McConfig {
        passes: a.passes as usize,
        base_seed: a.seed,
        store_samples: false,
    };
    create_dir(&a.out)?;
    let mut table = String::from(uncertainty_header());
    table.push('\n');
    let mut edge_wins = 0;
    for s in &samples {
        let chip = &s.chip;
        let maps = mc_predict(&params, chip, &config)?;
        let labels = &s.labels.labels;
        let id = &chip.chip_id;
        maps.mean_raster(chip.class_label, labels)
            .write(&a.out.join(format!("{id}.mean.aechip")))?;
        maps.variance_raster(chip.class_label, labels)
            .write(&a.out.join(format!("{id}.variance.aechip")))?;
        write_file(&a.out.join(format!("{id}.mean.pgm")), maps.mean_pgm())?;
        write_file(&a.out.join(format!("{id}.variance.pgm")), maps.variance_pgm())?;
        write_file(&a.out.join(format!("{id}.rgb.ppm")), render_pseudo_rgb(chip, a.bands)?)?;

        let summary = edge_interior_summary(
            &maps.variance,
            labels,
            &chip.valid,
            chip.height,
            chip.width,
            a.edge_distance,
        )?;
        let valid_means: Vec<f64> = maps
            .mean
            .iter()
            .zip(&chip.valid)
            .filter(|(_, &v)| v)
            .map(|(&m, _)| m)
            .collect();
        let mean_prob = valid_means.iter().sum::<f64>() / valid_means.len().max(1) as f64;
        if summary.edge_median_var > summary.interior_median_var {
            edge_wins += 1;
        }
        writeln!(
            table,
            "{id}\t{}\t{mean_prob:.6}\t{:.6e}\t{:.6e}\t{}\t{}",
            chip.class_label.as_str(),
            summary.edge_median_var,
            summary.interior_median_var,
            summary.edge_pixel_count,
            summary.interior_pixel_count
        )
        .unwrap();
    }
    write_file(&a.out.join(UNCERTAINTY_NAME), table)?;
    Ok(format!(
        "predict: {} chips x {} passes, edge variance above interior on {edge_wins}/{} -> {}",
        samples.len(),
        a.passes,
        samples.len(),
        a.out.display()
    ))
}

fn report(a: &ReportArgs) -> CmdResult {
    let split = parse_split(&a.split)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let ids: Vec<&str> = manifest.in_split(split).map(|e| e.chip_id.as_str()).collect();
    if ids.is_empty() {
        return Err(CliError::Data(Error::Split(format!("no {} chips", split.as_str()))));
    }
    let mut means = Vec::with_capacity(ids.len());
    let mut text = String::new();
    let mut edge_wins = 0usize;
    let mut edge_medians = Vec::new();
    let mut interior_medians = Vec::new();
    for id in &ids {
        let mean = Raster::read(&a.predictions.join(format!("{id}.mean.aechip")))?;
        let var = Raster::read(&a.predictions.join(format!("{id}.variance.aechip")))?;
        if (mean.height, mean.width) != (var.height, var.width) || mean.cells != var.cells {
            return Err(CliError::Data(Error::DimensionMismatch(format!(
                "mean and variance rasters of {id} disagree"
            ))));
        }
        let variance: Vec<f64> = var.values.iter().map(|&v| f64::from(v)).collect();
        let s = edge_interior_summary(
            &variance,
            &var.labels(),
            &var.valid(),
            var.height,
            var.width,
            a.edge_distance,
        )?;
        edge_wins += usize::from(s.edge_median_var > s.interior_median_var);
        edge_medians.push(s.edge_median_var);
        interior_medians.push(s.interior_median_var);
        means.push(mean);
    }
    let probs: Vec<Vec<f64>> = means
        .iter()
        .map(|r| r.values.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let labels: Vec<Vec<u8>> = means.iter().map(Raster::labels).collect();
    let valid: Vec<Vec<bool>> = means.iter().map(Raster::valid).collect();
    let maps = probs
        .iter()
        .zip(&labels)
        .zip(&valid)
        .map(|((p, l), v)| MapRef::new(p, l, v))
        .collect::<fieldseg::Result<Vec<_>>>()?;
    let metrics = MetricsReport::compute(&maps, a.threshold)?;

    if let Some(path) = &a.checkpoint {
        let params: Params = read_checkpoint(path)?;
        let c = params.config();
        writeln!(
            text,
            "model: in_channels={} base_width={} depth={} dropout={} norm={} parameters={}",
            c.in_channels,
            c.base_width,
            c.depth,
            c.dropout_rate,
            c.norm_enabled,
            count_params(c)
        )
        .unwrap();
    }
    writeln!(text, "split: {} ({} chips)", split.as_str(), ids.len()).unwrap();
    writeln!(text, "predictive mean thresholded at {}", a.threshold).unwrap();
    text.push('\n');
    text.push_str(&metrics.to_text());
    text.push('\n');
    let med = |v: &mut Vec<f64>| fieldseg::bayesinfer::median(v).unwrap_or(f64::NAN);
    writeln!(text, "edge_distance={}", a.edge_distance).unwrap();
    writeln!(text, "chips_edge_var_above_interior={edge_wins}").unwrap();
    writeln!(text, "median_edge_median_var={:.6e}", med(&mut edge_medians)).unwrap();
    writeln!(text, "median_interior_median_var={:.6e}", med(&mut interior_medians)).unwrap();
    create_dir(&a.out)?;
    write_file(&a.out.join(REPORT_NAME), &text)?;
    Ok(format!(
        "report: {} chips, pixel_accuracy {:.6}, chip_accuracy {:.6}, edge > interior on {edge_wins}/{}",
        ids.len(),
        metrics.pixel_accuracy,
        metrics.chip_accuracy,
        ids.len()
    ))
}
