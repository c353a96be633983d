//! Frame accuracy and per-phase precision, recall and Jaccard; dataset
//! aggregation; streaming evaluation with a causality certificate; phase
//! ribbon export.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::{stream_step, ModelParams, StreamState};
use crate::tensor::Tensor;

/// Scores of one phase within one video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseMetrics {
    pub phase: usize,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

/// Accuracy plus phase scores averaged over the phases present in the
/// ground truth or the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMetrics {
    pub video_id: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub phases: Vec<PhaseMetrics>,
}

/// Per-video metrics. A phase present in neither sequence is skipped; a
/// phase that is never predicted scores precision 0, and one absent from the
/// ground truth scores recall 0.
pub fn video_metrics(pred: &[usize], gt: &[usize], num_classes: usize) -> VideoMetrics {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth lengths differ");
    assert!(!gt.is_empty(), "cannot score an empty video");
    let mut tp = vec![0usize; num_classes];
    let mut n_pred = vec![0usize; num_classes];
    let mut n_gt = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        assert!(p < num_classes && g < num_classes, "class id out of range");
        n_pred[p] += 1;
        n_gt[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let phases: Vec<PhaseMetrics> = (0..num_classes)
        .filter(|&c| n_pred[c] + n_gt[c] > 0)
        .map(|c| PhaseMetrics {
            phase: c,
            precision: ratio(tp[c], n_pred[c]),
            recall: ratio(tp[c], n_gt[c]),
            jaccard: ratio(tp[c], n_pred[c] + n_gt[c] - tp[c]),
        })
        .collect();
    let mean = |f: fn(&PhaseMetrics) -> f64| phases.iter().map(f).sum::<f64>() / phases.len() as f64;
    VideoMetrics {
        video_id: String::new(),
        accuracy: ratio(tp.iter().sum(), gt.len()),
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        jaccard: mean(|p| p.jaccard),
        phases,
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "statistics of an empty sample");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Percentages with one decimal, e.g. `91.6 ± 7.8`.
impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub videos: Vec<VideoMetrics>,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub jaccard: MeanStd,
}

/// Unweighted mean ± population std over videos.
///
/// Panics on an empty slice.
pub fn dataset_metrics(rows: Vec<VideoMetrics>) -> MetricsReport {
    assert!(!rows.is_empty(), "dataset metrics need at least one video");
    let stat = |f: fn(&VideoMetrics) -> f64| MeanStd::of(&rows.iter().map(f).collect::<Vec<_>>());
    MetricsReport {
        accuracy: stat(|v| v.accuracy),
        precision: stat(|v| v.precision),
        recall: stat(|v| v.recall),
        jaccard: stat(|v| v.jaccard),
        videos: rows,
    }
}

impl MetricsReport {
    /// Human-readable table: one row per video, then the summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let w = self.videos.iter().map(|v| v.video_id.len()).max().unwrap_or(0).max(5);
        writeln!(s, "{:<w$}  {:>8}  {:>9}  {:>8}  {:>8}", "video", "accuracy", "precision", "recall", "jaccard").unwrap();
        for v in &self.videos {
            writeln!(
                s,
                "{:<w$}  {:>8.1}  {:>9.1}  {:>8.1}  {:>8.1}",
                v.video_id,
                100.0 * v.accuracy,
                100.0 * v.precision,
                100.0 * v.recall,
                100.0 * v.jaccard
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        for (name, m) in self.summary() {
            writeln!(s, "{name:<10} {m}").unwrap();
        }
        s
    }

    fn summary(&self) -> [(&'static str, MeanStd); 4] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("jaccard", self.jaccard),
        ]
    }

    /// Machine-readable `key=value` lines, fractions in `[0, 1]`.
    pub fn kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "videos={}", self.videos.len()).unwrap();
        for (name, m) in self.summary() {
            writeln!(s, "{name}.mean={}", m.mean).unwrap();
            writeln!(s, "{name}.std={}", m.std).unwrap();
        }
        for v in &self.videos {
            let id = &v.video_id;
            writeln!(s, "video.{id}.accuracy={}", v.accuracy).unwrap();
            writeln!(s, "video.{id}.precision={}", v.precision).unwrap();
            writeln!(s, "video.{id}.recall={}", v.recall).unwrap();
            writeln!(s, "video.{id}.jaccard={}", v.jaccard).unwrap();
        }
        s
    }

    /// Writes `metrics.txt` (table) and `metrics.kv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let table = dir.join("metrics.txt");
        fs::write(&table, self.table()).map_err(|e| Error::io(&table, e))?;
        let kv = dir.join("metrics.kv");
        fs::write(&kv, self.kv()).map_err(|e| Error::io(&kv, e))
    }
}

/// Evidence that emitted predictions ignore future frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub passed: bool,
    /// Timesteps after which the input was perturbed.
    pub tested: Vec<usize>,
}

/// Output of [`online_evaluate`].
#[derive(Clone, Debug)]
pub struct OnlineReport {
    pub metrics: VideoMetrics,
    pub predictions: Vec<usize>,
    /// Emitted class probabilities, one row per frame.
    pub probabilities: Vec<Vec<f32>>,
    pub certificate: Certificate,
}

/// Streams `video` frame by frame, then re-runs the network on `checks`
/// copies whose frames after a random timestep are replaced by noise and
/// requires every earlier emitted probability to be reproduced bitwise.
pub fn online_evaluate(params: &ModelParams<f32>, video: &FeatureSequence, checks: usize, seed: u64) -> Result<OnlineReport> {
    if !params.config.causal_attention {
        return Err(Error::config("online evaluation requires model.causal_attention=true"));
    }
    let mut state = StreamState::new(video.dim);
    let mut probabilities = Vec::with_capacity(video.len());
    for t in 0..video.len() {
        probabilities.push(stream_step(params, &mut state, video.frame(t))?);
    }
    let tested = certify(params, video, &probabilities, checks, seed)?;
    let predictions: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let mut metrics = video_metrics(&predictions, &video.labels, params.config.num_classes);
    metrics.video_id = video.video_id.clone();
    Ok(OnlineReport {
        metrics,
        predictions,
        probabilities,
        certificate: Certificate { passed: true, tested },
    })
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

/// Returns the tested timesteps, or the earliest violating timestep.
fn certify(params: &ModelParams<f32>, video: &FeatureSequence, emitted: &[Vec<f32>], checks: usize, seed: u64) -> Result<Vec<usize>> {
    let t_len = video.len();
    if t_len < 2 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tested: Vec<usize> = sample(&mut rng, t_len - 1, checks.min(t_len - 1)).into_vec();
    tested.sort_unstable();
    let mut earliest: Option<usize> = None;
    for &t in &tested {
        let mut x = video.features.clone();
        for v in &mut x[(t + 1) * video.dim..] {
            *v = rng.random_range(-4.0..4.0);
        }
        let probs = params.predict(&Tensor::new([t_len, video.dim], x))?;
        let bad = (0..=t).find(|&s| probs.row(s).iter().zip(&emitted[s]).any(|(a, b)| a.to_bits() != b.to_bits()));
        if let Some(s) = bad {
            earliest = Some(earliest.map_or(s, |e| e.min(s)));
        }
    }
    match earliest {
        Some(timestep) => Err(Error::Causality { timestep }),
        None => Ok(tested),
    }
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939",
];

/// Fixed colour of a class id.
pub fn class_color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

/// Writes `<stem>.csv` (frame, gt, pred, per-class probability) and
/// `<stem>.svg` (ground-truth and prediction ribbons over a confidence trace).
pub fn ribbon_export(pred: &[usize], gt: &[usize], probs: &[Vec<f32>], dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    assert!(pred.len() == gt.len() && gt.len() == probs.len(), "ribbon inputs differ in length");
    assert!(!gt.is_empty(), "cannot draw an empty video");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let classes = probs[0].len();

    let mut csv = String::from("frame,gt,pred");
    for c in 0..classes {
        write!(csv, ",p{c}").unwrap();
    }
    csv.push('\n');
    for (t, ((p, g), row)) in pred.iter().zip(gt).zip(probs).enumerate() {
        write!(csv, "{t},{g},{p}").unwrap();
        for v in row {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let svg_path = dir.join(format!("{stem}.svg"));
    fs::write(&svg_path, ribbon_svg(pred, gt, probs)).map_err(|e| Error::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}

const WIDTH: f64 = 1000.0;
const LEFT: f64 = 60.0;
const RIBBON: f64 = 28.0;
const TRACE: f64 = 60.0;

fn ribbon(svg: &mut String, labels: &[usize], y: f64, name: &str) {
    let scale = WIDTH / labels.len() as f64;
    writeln!(svg, r#"<text x="4" y="{:.1}" font-size="12">{name}</text>"#, y + RIBBON * 0.65).unwrap();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            writeln!(
                svg,
                r#"<rect x="{:.3}" y="{y:.1}" width="{:.3}" height="{RIBBON}" fill="{}"/>"#,
                LEFT + start as f64 * scale,
                (t - start) as f64 * scale,
                class_color(labels[start])
            )
            .unwrap();
            start = t;
        }
    }
}

fn ribbon_svg(pred: &[usize], gt: &[usize], probs: &[Vec<f32>]) -> String {
    let height = 10.0 + 2.0 * (RIBBON + 6.0) + TRACE + 10.0;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" viewBox="0 0 {} {height}">"#,
        LEFT + WIDTH + 10.0,
        LEFT + WIDTH + 10.0
    )
    .unwrap();
    ribbon(&mut svg, gt, 10.0, "GT");
    ribbon(&mut svg, pred, 10.0 + RIBBON + 6.0, "Pred");
    let top = 10.0 + 2.0 * (RIBBON + 6.0);
    writeln!(svg, r#"<text x="4" y="{:.1}" font-size="12">conf</text>"#, top + TRACE * 0.5).unwrap();
    writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{top:.1}" width="{WIDTH}" height="{TRACE}" fill="none" stroke="#999"/>"##
    )
    .unwrap();
    let scale = WIDTH / probs.len() as f64;
    let points: Vec<String> = probs
        .iter()
        .zip(pred)
        .enumerate()
        .map(|(t, (row, &p))| {
            let x = LEFT + (t as f64 + 0.5) * scale;
            let y = top + TRACE * (1.0 - row[p] as f64);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    writeln!(svg, r#"<polyline fill="none" stroke="black" stroke-width="1" points="{}"/>"#, points.join(" ")).unwrap();
    svg.push_str("</svg>\n");
    svg
}

/// Phases that occur anywhere in `labels`.
pub fn phases_present(labels: &[usize]) -> BTreeSet<usize> {
    labels.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::init_model;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    /// Set-construction oracle: index sets per phase, intersected and united.
    fn oracle(pred: &[usize], gt: &[usize], classes: usize) -> (f64, Vec<(usize, f64, f64, f64)>) {
        let set = |v: &[usize], c: usize| -> BTreeSet<usize> { (0..v.len()).filter(|&i| v[i] == c).collect() };
        let acc = (0..gt.len()).filter(|&i| pred[i] == gt[i]).count() as f64 / gt.len() as f64;
        let mut out = Vec::new();
        for c in 0..classes {
            let (p, g) = (set(pred, c), set(gt, c));
            if p.is_empty() && g.is_empty() {
                continue;
            }
            let inter = p.intersection(&g).count() as f64;
            let union = p.union(&g).count() as f64;
            let pr = if p.is_empty() { 0.0 } else { inter / p.len() as f64 };
            let re = if g.is_empty() { 0.0 } else { inter / g.len() as f64 };
            out.push((c, pr, re, inter / union));
        }
        (acc, out)
    }

    #[test]
    fn hand_case() {
        let m = video_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
        assert_eq!(m.accuracy, 0.75);
        assert_eq!((m.phases[0].precision, m.phases[0].recall, m.phases[0].jaccard), (1.0, 0.5, 0.5));
        assert_eq!((m.phases[1].precision, m.phases[1].recall, m.phases[1].jaccard), (2.0 / 3.0, 1.0, 2.0 / 3.0));
        assert_eq!(m.precision, (1.0 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn identical_and_disjoint() {
        let m = video_metrics(&[2, 2, 0], &[2, 2, 0], 5);
        assert_eq!((m.accuracy, m.precision, m.recall, m.jaccard), (1.0, 1.0, 1.0, 1.0));
        let m = video_metrics(&[1, 1, 1], &[0, 0, 0], 2);
        assert_eq!(m.accuracy, 0.0);
        assert!(m.phases.iter().all(|p| p.jaccard == 0.0));
        assert_eq!(m.phases.len(), 2);
    }

    #[test]
    fn matches_the_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let t = rng.random_range(1..=50);
            let c = rng.random_range(1..=8);
            let pred: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
            let gt: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
            let m = video_metrics(&pred, &gt, c);
            let (acc, phases) = oracle(&pred, &gt, c);
            assert_eq!(m.accuracy, acc);
            assert_eq!(m.phases.len(), phases.len());
            for (a, b) in m.phases.iter().zip(&phases) {
                assert_eq!((a.phase, a.precision, a.recall, a.jaccard), *b);
                assert!(a.jaccard <= a.precision && a.jaccard <= a.recall);
            }
        }
    }

    proptest! {
        #[test]
        fn accuracy_ignores_joint_permutation(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..60), seed: u64) {
            let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let mut idx: Vec<usize> = (0..pred.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let p2: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            let g2: Vec<usize> = idx.iter().map(|&i| gt[i]).collect();
            let a = video_metrics(&pred, &gt, 6);
            let b = video_metrics(&p2, &g2, 6);
            prop_assert_eq!(a.accuracy, b.accuracy);
            for p in &a.phases {
                prop_assert!(p.jaccard <= p.precision && p.jaccard <= p.recall);
                prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
            }
        }
    }

    fn row(acc: f64) -> VideoMetrics {
        VideoMetrics {
            video_id: format!("v{acc}"),
            accuracy: acc,
            precision: acc,
            recall: acc,
            jaccard: acc,
            phases: vec![],
        }
    }

    #[test]
    fn aggregation() {
        let r = dataset_metrics(vec![row(0.7)]);
        assert_eq!(r.accuracy.std, 0.0);
        let r = dataset_metrics(vec![row(0.8), row(1.0)]);
        assert!((r.accuracy.mean - 0.9).abs() < 1e-12);
        assert!((r.accuracy.std - 0.1).abs() < 1e-12);
        let m = MeanStd { mean: 0.916, std: 0.078 };
        assert_eq!(m.to_string(), "91.6 ± 7.8");
        assert!(r.table().contains("accuracy   90.0 ± 10.0"));
        assert!(r.kv().contains("accuracy.mean=0.9"));
    }

    #[test]
    #[should_panic(expected = "at least one video")]
    fn empty_aggregation_panics() {
        dataset_metrics(vec![]);
    }

    fn tiny(causal: bool) -> ModelParams<f32> {
        let cfg = ModelConfig {
            input_dim: 3,
            num_classes: 3,
            depth: 2,
            fusion_kernel: 3,
            frame_layers: 3,
            segment_layers: 2,
            heads: 2,
            max_len: 100,
            causal_attention: causal,
            ..ModelConfig::default()
        }
        .with_model_dim(8);
        init_model(&cfg, 4).unwrap()
    }

    fn video(t: usize) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        FeatureSequence {
            video_id: "v".into(),
            features: (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            dim: 3,
            labels: (0..t).map(|i| i * 3 / t).collect(),
            num_classes: 3,
        }
    }

    #[test]
    fn online_matches_offline_and_certifies() {
        let p = tiny(true);
        let v = video(40);
        let report = online_evaluate(&p, &v, 20, 1).unwrap();
        assert!(report.certificate.passed);
        assert_eq!(report.certificate.tested.len(), 20);
        let offline = p.predict(&crate::training::features_tensor(&v)).unwrap();
        assert_eq!(report.predictions, offline.argmax_rows());
        for (t, row) in report.probabilities.iter().enumerate() {
            assert_eq!(row.as_slice(), offline.row(t));
        }
    }

    #[test]
    fn online_rejects_non_causal_models() {
        assert!(matches!(online_evaluate(&tiny(false), &video(10), 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn leaking_model_fails_the_certificate() {
        // non-causal parameters under a causal flag: the stream sees prefixes,
        // the perturbation run sees the full (noisy) future
        let mut p = tiny(false);
        let v = video(30);
        let mut state = StreamState::new(3);
        p.config.causal_attention = true;
        let mut emitted = Vec::new();
        for t in 0..30 {
            emitted.push(stream_step(&p, &mut state, v.frame(t)).unwrap());
        }
        p.config.causal_attention = false;
        let err = certify(&p, &v, &emitted, 10, 0).unwrap_err();
        assert!(matches!(err, Error::Causality { .. }), "{err}");
    }

    #[test]
    fn ribbons() {
        let dir = tempfile::tempdir().unwrap();
        let gt = vec![0, 0, 1, 1, 2];
        let probs: Vec<Vec<f32>> = gt.iter().map(|&c| (0..3).map(|k| if k == c { 0.8 } else { 0.1 }).collect()).collect();
        let (csv, svg) = ribbon_export(&gt, &gt, &probs, dir.path(), "v").unwrap();
        let text = fs::read_to_string(csv).unwrap();
        assert_eq!(text.lines().count(), gt.len() + 1);
        assert_eq!(text.lines().next().unwrap(), "frame,gt,pred,p0,p1,p2");
        let svg = fs::read_to_string(svg).unwrap();
        let rects: Vec<&str> = svg.lines().filter(|l| l.starts_with("<rect x=\"60.000\"") || l.contains("fill=\"#")).collect();
        assert_eq!(rects.len(), 6);
        // both ribbons draw the same runs in the same colours
        let runs = |y: &str| svg.lines().filter(|l| l.contains(y)).map(|l| l.replace(y, "")).collect::<Vec<_>>();
        assert_eq!(runs("y=\"10.0\""), runs("y=\"44.0\""));
        assert_eq!(class_color(2), "#2ca02c");
        assert_eq!(class_color(14), class_color(2));
        let again = ribbon_svg(&gt, &gt, &probs);
        assert_eq!(again, svg);
    }

    #[test]
    fn present_phases() {
        assert_eq!(phases_present(&[3, 1, 3]).into_iter().collect::<Vec<_>>(), vec![1, 3]);
    }
}
