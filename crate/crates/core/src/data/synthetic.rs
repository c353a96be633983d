//! Synthetic surgical-phase videos with controllable frame ambiguity.
//!
//! Every class owns a unit prototype vector. A video walks a mostly forward
//! phase chain; each phase lasts a truncated-Gaussian number of frames whose
//! features are the prototype plus Gaussian noise. Near a phase boundary
//! the features blend in the neighbouring phase's prototype.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::manifest::SplitManifest;
use super::sfb::{write_sfb, FeatureSequence};
use crate::config::{format_kv, parse_kv};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

const DURATION_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Mean phase duration in frames.
    pub mean_duration: f64,
    pub std_duration: f64,
    /// Frames on each side of a boundary whose features are blended.
    pub boundary_width: f64,
    /// Standard deviation of the per-dimension feature noise.
    pub noise: f64,
    /// Probability of stepping back to the previous phase instead of forward.
    pub back_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 7,
            input_dim: 32,
            train: 40,
            val: 8,
            test: 10,
            mean_duration: 70.0,
            std_duration: 20.0,
            boundary_width: 10.0,
            noise: 0.3,
            back_prob: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn videos(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.num_classes < 2 {
            return bad("synth.C must be at least 2");
        }
        if self.num_classes > u16::MAX as usize + 1 {
            return bad("synth.C does not fit the 16-bit label field");
        }
        if self.input_dim == 0 {
            return bad("synth.D_in must be positive");
        }
        if self.videos() == 0 {
            return bad("at least one video is required");
        }
        if !(self.mean_duration >= 1.0) || !(self.std_duration >= 0.0) {
            return bad("synth.mean_duration must be at least 1 and synth.std_duration non-negative");
        }
        if !(self.boundary_width >= 0.0) || self.boundary_width >= self.mean_duration {
            return bad("synth.boundary_width must be non-negative and below synth.mean_duration");
        }
        if !(self.noise >= 0.0) {
            return bad("synth.noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.back_prob) {
            return bad("synth.back_prob must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("synth.C", self.num_classes.to_string()),
            ("synth.D_in", self.input_dim.to_string()),
            ("synth.train", self.train.to_string()),
            ("synth.val", self.val.to_string()),
            ("synth.test", self.test.to_string()),
            ("synth.mean_duration", self.mean_duration.to_string()),
            ("synth.std_duration", self.std_duration.to_string()),
            ("synth.boundary_width", self.boundary_width.to_string()),
            ("synth.noise", self.noise.to_string()),
            ("synth.back_prob", self.back_prob.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "synth.C" => self.num_classes = parse(key, value)?,
            "synth.D_in" => self.input_dim = parse(key, value)?,
            "synth.train" => self.train = parse(key, value)?,
            "synth.val" => self.val = parse(key, value)?,
            "synth.test" => self.test = parse(key, value)?,
            "synth.mean_duration" => self.mean_duration = parse(key, value)?,
            "synth.std_duration" => self.std_duration = parse(key, value)?,
            "synth.boundary_width" => self.boundary_width = parse(key, value)?,
            "synth.noise" => self.noise = parse(key, value)?,
            "synth.back_prob" => self.back_prob = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses `synth.*` lines; unknown keys are configuration errors.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        spec.apply_all(&parse_kv(text)?)?;
        Ok(spec)
    }

    pub fn apply_all(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            if !self.apply(k, v)? {
                return Err(Error::config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        format_kv(&self.to_kv())
    }
}

/// Generated videos (train, then val, then test) and their manifest.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: SplitManifest,
    pub videos: Vec<FeatureSequence>,
    pub prototypes: Vec<Vec<f32>>,
}

/// Random unit vectors, orthonormal whenever `count <= dim`.
fn prototypes(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        out.push(v);
    }
    out
}

/// `(phase, duration)` runs of one video.
fn phase_chain(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let durations = Normal::new(spec.mean_duration, spec.std_duration)
        .map_err(|e| Error::config(format!("invalid duration distribution: {e}")))?;
    let draw = |rng: &mut ChaCha8Rng| -> Result<usize> {
        for _ in 0..DURATION_RETRIES {
            let d = durations.sample(rng).round();
            if d >= 1.0 {
                return Ok(d as usize);
            }
        }
        Err(Error::Data(format!(
            "no phase duration of at least one frame after {DURATION_RETRIES} draws"
        )))
    };
    let last = spec.num_classes - 1;
    let max_runs = 3 * spec.num_classes;
    let mut runs = Vec::new();
    let mut phase = 0;
    loop {
        runs.push((phase, draw(rng)?));
        if phase == last {
            return Ok(runs);
        }
        let back = phase > 0 && runs.len() < max_runs && rng.random_bool(spec.back_prob);
        phase = if back { phase - 1 } else { phase + 1 };
    }
}

fn video(spec: &SyntheticSpec, protos: &[Vec<f64>], id: String, rng: &mut ChaCha8Rng) -> Result<FeatureSequence> {
    let runs = phase_chain(spec, rng)?;
    let t: usize = runs.iter().map(|r| r.1).sum();
    let dim = spec.input_dim;
    let wb = spec.boundary_width;
    let mut features = Vec::with_capacity(t * dim);
    let mut labels = Vec::with_capacity(t);
    for (r, &(phase, len)) in runs.iter().enumerate() {
        for i in 0..len {
            // distance in frames to the nearest boundary with a neighbouring run
            let left = (r > 0).then(|| (i as f64, runs[r - 1].0));
            let right = (r + 1 < runs.len()).then(|| ((len - 1 - i) as f64, runs[r + 1].0));
            let nearest = match (left, right) {
                (Some(l), Some(rt)) => Some(if rt.0 < l.0 { rt } else { l }),
                (l, rt) => l.or(rt),
            };
            let mix = match nearest {
                Some((d, other)) if d < wb => Some((0.5 * (1.0 - d / wb), other)),
                _ => None,
            };
            for j in 0..dim {
                let mut v = protos[phase][j];
                if let Some((w, other)) = mix {
                    v = (1.0 - w) * v + w * protos[other][j];
                }
                if spec.noise > 0.0 {
                    v += spec.noise * rng.sample::<f64, _>(StandardNormal);
                }
                features.push(v as f32);
            }
            labels.push(phase);
        }
    }
    Ok(FeatureSequence {
        video_id: id,
        features,
        dim,
        labels,
        num_classes: spec.num_classes,
    })
}

/// Deterministic in `seed`. Video `i` draws from its own generator stream,
/// so its content does not depend on the split sizes before it.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(spec.num_classes, spec.input_dim, &mut rng);
    let mut manifest = SplitManifest {
        num_classes: spec.num_classes,
        input_dim: spec.input_dim,
        ..SplitManifest::default()
    };
    let mut videos = Vec::with_capacity(spec.videos());
    for i in 0..spec.videos() {
        let id = format!("video{i:03}");
        let mut vr = ChaCha8Rng::seed_from_u64(seed);
        vr.set_stream(i as u64 + 1);
        videos.push(video(spec, &protos, id.clone(), &mut vr)?);
        let list = if i < spec.train {
            &mut manifest.train
        } else if i < spec.train + spec.val {
            &mut manifest.val
        } else {
            &mut manifest.test
        };
        list.push(id);
    }
    Ok(SyntheticDataset {
        manifest,
        videos,
        prototypes: protos.iter().map(|p| p.iter().map(|&v| v as f32).collect()).collect(),
    })
}

/// Writes every video as `<id>.sfb` plus the manifest into `dir`.
pub fn write_dataset(data: &SyntheticDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in &data.videos {
        write_sfb(v, &dir.join(format!("{}.sfb", v.video_id)))?;
    }
    data.manifest.write(&dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sfb::{decode_sfb, encode_sfb};

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train: 4,
            val: 1,
            test: 1,
            mean_duration: 20.0,
            std_duration: 6.0,
            boundary_width: 4.0,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_frames_are_nearest_to_their_prototype() {
        let spec = SyntheticSpec {
            noise: 0.0,
            boundary_width: 0.0,
            ..small()
        };
        let data = generate_synthetic(&spec, 3).unwrap();
        let (mut right, mut total) = (0, 0);
        for v in &data.videos {
            for t in 0..v.len() {
                let frame = v.frame(t);
                let dist = |p: &Vec<f32>| frame.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
                let best = (0..spec.num_classes)
                    .min_by(|&a, &b| dist(&data.prototypes[a]).total_cmp(&dist(&data.prototypes[b])))
                    .unwrap();
                right += (best == v.labels[t]) as usize;
                total += 1;
            }
        }
        assert_eq!(right, total);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&small(), 9).unwrap();
        let b = generate_synthetic(&small(), 9).unwrap();
        let c = generate_synthetic(&small(), 10).unwrap();
        for (x, y) in a.videos.iter().zip(&b.videos) {
            assert_eq!(encode_sfb(x).unwrap(), encode_sfb(y).unwrap());
        }
        assert_ne!(encode_sfb(&a.videos[0]).unwrap(), encode_sfb(&c.videos[0]).unwrap());
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn labels_are_piecewise_constant_runs() {
        let data = generate_synthetic(&small(), 1).unwrap();
        for v in &data.videos {
            assert_eq!(v.features.len(), v.len() * v.dim);
            assert_eq!(v.labels[0], 0);
            assert_eq!(*v.labels.last().unwrap(), small().num_classes - 1);
            for w in v.labels.windows(2) {
                assert!(w[1] == w[0] || w[1] == w[0] + 1 || w[1] + 1 == w[0]);
            }
            let p = Path::new("x.sfb");
            let back = decode_sfb(&encode_sfb(v).unwrap(), p).unwrap();
            assert_eq!(back.features, v.features);
        }
    }

    #[test]
    fn run_lengths_sum_to_video_length() {
        let spec = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let protos = prototypes(7, 32, &mut rng);
        for _ in 0..50 {
            let start = rng.clone();
            let runs = phase_chain(&spec, &mut rng).unwrap();
            assert!(runs.iter().all(|r| r.1 >= 1));
            let v = video(&spec, &protos, "v".into(), &mut start.clone()).unwrap();
            assert_eq!(v.len(), runs.iter().map(|r| r.1).sum::<usize>());
        }
    }

    #[test]
    fn backward_transitions_respect_the_bias() {
        let spec = SyntheticSpec {
            back_prob: 0.2,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut back, mut total) = (0usize, 0usize);
        for _ in 0..1000 {
            let runs = phase_chain(&spec, &mut rng).unwrap();
            for w in runs.windows(2) {
                back += (w[1].0 < w[0].0) as usize;
                total += 1;
            }
        }
        let frac = back as f64 / total as f64;
        assert!(frac <= 0.2 + 0.02, "backward fraction {frac}");
        assert!(frac > 0.05);
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = prototypes(7, 32, &mut rng);
        for i in 0..7 {
            for j in 0..7 {
                let dot: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boundary_frames_are_blended() {
        let spec = SyntheticSpec {
            noise: 0.0,
            back_prob: 0.0,
            ..small()
        };
        let data = generate_synthetic(&spec, 2).unwrap();
        let v = &data.videos[0];
        let b = v.labels.iter().position(|&c| c == 1).unwrap();
        // the first frame after the boundary is an even mix
        let expect: Vec<f32> = data.prototypes[0]
            .iter()
            .zip(&data.prototypes[1])
            .map(|(a, c)| (0.5 * *a as f64 + 0.5 * *c as f64) as f32)
            .collect();
        for (x, e) in v.frame(b).iter().zip(&expect) {
            assert!((x - e).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec { num_classes: 1, ..small() },
            SyntheticSpec { boundary_width: 30.0, ..small() },
            SyntheticSpec { back_prob: 1.0, ..small() },
            SyntheticSpec { train: 0, val: 0, test: 0, ..small() },
        ] {
            assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config(_))));
        }
        assert!(SyntheticSpec::from_kv_text("synth.colour=3").is_err());
        let s = small();
        assert_eq!(SyntheticSpec::from_kv_text(&s.to_kv_text()).unwrap(), s);
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&small(), 4).unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let loaded = crate::data::load_dataset(&dir.path().join(MANIFEST_FILE), dir.path()).unwrap();
        assert_eq!(loaded.train.len(), 4);
        assert_eq!(loaded.test[0], data.videos[5]);
    }
}
