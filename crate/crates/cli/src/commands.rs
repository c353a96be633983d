use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use sahc::config::parse_kv;
use sahc::data::{generate_synthetic, load_dataset, read_sfb, write_dataset, Dataset, SyntheticSpec, MANIFEST_FILE};
use sahc::evaluation::{dataset_metrics, online_evaluate, ribbon_export, video_metrics, VideoMetrics};
use sahc::model::stream_step;
use sahc::training::{self, features_tensor, load_checkpoint, save_checkpoint, Checkpoint};
use sahc::{Error, FeatureSequence, ModelConfig, ModelParams, Result, Split, StreamState, TrainConfig};

pub const EPOCH_LOG: &str = "epochs.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const BEST_MARKER: &str = "best";

fn io_err(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_kv(&text)
}

fn parse_overrides(pairs: &[String]) -> Result<BTreeMap<String, String>> {
    pairs
        .iter()
        .map(|p| match p.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => Err(Error::Config(format!("override `{p}` is not of the form key=value"))),
        })
        .collect()
}

pub fn synth(spec_path: Option<&Path>, out: &Path, seed: u64, overrides: &[String]) -> Result<()> {
    let mut kv = match spec_path {
        Some(p) => read_kv_file(p)?,
        None => BTreeMap::new(),
    };
    kv.extend(parse_overrides(overrides)?);
    let mut spec = SyntheticSpec::default();
    spec.apply_all(&kv)?;
    spec.validate()?;
    let data = generate_synthetic(&spec, seed)?;
    write_dataset(&data, out)?;
    let frames: usize = data.videos.iter().map(|v| v.len()).sum();
    println!(
        "videos={} (train {}, val {}, test {}) frames={} C={} D_in={}",
        data.videos.len(),
        spec.train,
        spec.val,
        spec.test,
        frames,
        spec.num_classes,
        spec.input_dim
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(&dir.join(MANIFEST_FILE), dir)
}

/// Fails when the manifest disagrees with the model about C or D_in.
fn check_manifest(data: &Dataset, model: &ModelConfig, mismatch: fn(String) -> Error) -> Result<()> {
    let m = &data.manifest;
    if m.num_classes != model.num_classes || m.input_dim != model.input_dim {
        return Err(mismatch(format!(
            "data has C={} and D_in={}, model has C={} and D_in={}",
            m.num_classes, m.input_dim, model.num_classes, model.input_dim
        )));
    }
    Ok(())
}

fn resolve_train_config(
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    resumed: Option<&Checkpoint>,
) -> Result<TrainConfig> {
    let overrides = parse_overrides(overrides)?;
    let mut cfg = match (config, resumed) {
        (Some(path), _) => {
            let mut kv = read_kv_file(path)?;
            kv.extend(overrides);
            TrainConfig::from_kv(&kv)?
        }
        (None, Some(ckpt)) => {
            let mut cfg = ckpt.config.clone();
            cfg.apply_all(&overrides)?;
            cfg
        }
        (None, None) => TrainConfig::from_kv(&overrides)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    overrides: &[String],
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let resumed = resume.map(load_checkpoint).transpose()?;
    let cfg = resolve_train_config(config, overrides, seed, resumed.as_ref())?;
    let data = load_data(data_dir)?;
    check_manifest(&data, &cfg.model, Error::Data)?;

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let config_path = out.join("config.txt");
    fs::write(&config_path, sahc::config::format_kv(&cfg.to_kv())).map_err(|e| io_err(&config_path, e))?;

    let log_path = out.join(EPOCH_LOG);
    let fresh_log = !log_path.exists() || resumed.is_none();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    if fresh_log {
        writeln!(log, "{}", training::EpochRecord::CSV_HEADER).map_err(|e| io_err(&log_path, e))?;
    }

    let outcome = training::train(&cfg, &data.train, &data.val, resumed, |record, ckpt| {
        save_checkpoint(ckpt, &out.join(epoch_file(record.epoch)))?;
        writeln!(log, "{}", record.csv_row()).map_err(|e| io_err(&log_path, e))?;
        log.flush().map_err(|e| io_err(&log_path, e))
    })?;

    save_checkpoint(&outcome.best, &out.join(BEST_CHECKPOINT))?;
    let marker = out.join(BEST_MARKER);
    fs::write(&marker, format!("{}\n", epoch_file(outcome.best.epoch))).map_err(|e| io_err(&marker, e))?;
    println!(
        "best epoch {} with validation accuracy {:.4}; wrote {}",
        outcome.best.epoch,
        outcome.best.val_accuracy,
        out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

pub fn epoch_file(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// One `t,class,confidence` line.
pub fn prediction_line(t: usize, probs: &[f32]) -> String {
    let class = argmax(probs);
    format!("{t},{class},{}", probs[class])
}

fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

struct Scored {
    metrics: VideoMetrics,
    probabilities: Vec<Vec<f32>>,
}

fn offline_scores(params: &ModelParams<f32>, video: &FeatureSequence) -> Result<Scored> {
    let probs = params.predict(&features_tensor(video))?;
    let probabilities: Vec<Vec<f32>> = (0..probs.rows()).map(|t| probs.row(t).to_vec()).collect();
    let pred: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let mut metrics = video_metrics(&pred, &video.labels, params.config.num_classes);
    metrics.video_id = video.video_id.clone();
    Ok(Scored { metrics, probabilities })
}

pub fn eval(checkpoint: &Path, data_dir: &Path, split: &str, report: &Path, online: Option<usize>, seed: u64) -> Result<()> {
    let split: Split = split.parse()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let params = ckpt.model()?;
    if online.is_some() && !params.config.causal_attention {
        return Err(Error::Config(
            "--online requires a model trained with model.causal_attention=true".into(),
        ));
    }
    let data = load_data(data_dir)?;
    check_manifest(&data, &params.config, Error::Incompatible)?;
    let videos = data.split(split);
    if videos.is_empty() {
        return Err(Error::Data(format!("split `{split}` has no videos")));
    }

    let scored: Vec<Scored> = videos
        .par_iter()
        .enumerate()
        .map(|(i, v)| match online {
            Some(checks) => online_evaluate(&params, v, checks, seed.wrapping_add(i as u64)).map(|r| Scored {
                metrics: r.metrics,
                probabilities: r.probabilities,
            }),
            None => offline_scores(&params, v),
        })
        .collect::<Result<_>>()?;

    let pred_dir = report.join("predictions");
    fs::create_dir_all(&pred_dir).map_err(|e| io_err(&pred_dir, e))?;
    for s in &scored {
        let path = pred_dir.join(format!("{}.csv", s.metrics.video_id));
        let mut text = String::new();
        for (t, p) in s.probabilities.iter().enumerate() {
            text.push_str(&prediction_line(t, p));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    let metrics = dataset_metrics(scored.into_iter().map(|s| s.metrics).collect());
    metrics.write(report)?;
    print!("{}", metrics.table());
    if let Some(checks) = online {
        println!(
            "causality certificate: PASS ({} videos, {checks} future perturbations each)",
            videos.len()
        );
    }
    Ok(())
}

pub fn predict(checkpoint: &Path, input: &Path, ribbon: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let params = ckpt.model()?;
    let video = read_sfb(input)?;
    if video.dim != params.config.input_dim || video.num_classes != params.config.num_classes {
        return Err(Error::Incompatible(format!(
            "{} has D_in={} and C={}, model has D_in={} and C={}",
            input.display(),
            video.dim,
            video.num_classes,
            params.config.input_dim,
            params.config.num_classes
        )));
    }

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let stdout_err = |e: io::Error| io_err(Path::new("<stdout>"), e);
    let mut probabilities = Vec::with_capacity(video.len());
    if params.config.causal_attention {
        let mut state = StreamState::new(video.dim);
        for t in 0..video.len() {
            let p = stream_step(&params, &mut state, video.frame(t))?;
            writeln!(out, "{}", prediction_line(t, &p)).map_err(stdout_err)?;
            out.flush().map_err(stdout_err)?;
            probabilities.push(p);
        }
    } else {
        log::warn!("model attends to future segments; predicting offline");
        let probs = params.predict(&features_tensor(&video))?;
        for t in 0..video.len() {
            writeln!(out, "{}", prediction_line(t, probs.row(t))).map_err(stdout_err)?;
            probabilities.push(probs.row(t).to_vec());
        }
    }
    let pred: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let (csv, svg) = ribbon_export(&pred, &video.labels, &probabilities, ribbon, &video.video_id)?;
    log::info!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}
