//! Synthetic multi-class event sequences.
//!
//! Each class has a per-frame activity in `[0, 1]`: 1 inside an event with a
//! linear ramp over the first and last `ramp_len` frames, 0 elsewhere.
//! Features are a fixed random linear mixing of the activities plus white
//! noise, `x_t = W a_t + eps_t`.
//!
//! Randomness comes from ChaCha8 streams keyed by the dataset seed: stream
//! `index` drives sequence `index`, and a reserved stream draws `W`, so any
//! sequence can be regenerated on its own.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::io;
use crate::rng;
use crate::types::{EventSpan, SequenceSample};

const MIXING_STREAM: u64 = u64::MAX;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const COOCCUR_JITTER: i64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CooccurPair {
    pub class_a: usize,
    pub class_b: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub length: usize,
    pub feature_dim: usize,
    pub events_per_class_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub cooccur_pairs: Vec<CooccurPair>,
    pub ramp_len: usize,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            length: 64,
            feature_dim: 16,
            events_per_class_rate: 1.2,
            min_len: 4,
            max_len: 24,
            cooccur_pairs: Vec::new(),
            ramp_len: 2,
            noise_sigma: 0.3,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.feature_dim == 0 {
            return bad("num_classes and feature_dim must be positive".into());
        }
        if !(1 <= self.min_len && self.min_len <= self.max_len && self.max_len <= self.length) {
            return bad(format!(
                "need 1 <= min_len ({}) <= max_len ({}) <= length ({})",
                self.min_len, self.max_len, self.length
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.events_per_class_rate >= 0.0) {
            return bad("noise_sigma and events_per_class_rate must be non-negative".into());
        }
        for p in &self.cooccur_pairs {
            if !(0.0..=1.0).contains(&p.probability) {
                return bad(format!("co-occurrence probability {} outside [0, 1]", p.probability));
            }
            for c in [p.class_a, p.class_b] {
                if c == 0 || c > self.num_classes {
                    return bad(format!("co-occurrence class {c} outside 1..={}", self.num_classes));
                }
            }
        }
        Ok(())
    }
}

/// Activity of a `[start, end)` event at frame `t`.
pub fn ramp_activity(start: usize, end: usize, t: usize, ramp_len: usize) -> f64 {
    if t < start || t >= end {
        return 0.0;
    }
    let denom = (ramp_len + 1) as f64;
    let rise = (t - start + 1) as f64 / denom;
    let fall = (end - t) as f64 / denom;
    rise.min(fall).min(1.0)
}

/// Per-frame class activities (`length × num_classes`) of a set of events.
pub fn activity_matrix(events: &[EventSpan], length: usize, num_classes: usize, ramp_len: usize) -> Tensor {
    let mut a = vec![0.0f64; length * num_classes];
    for e in events {
        let (s, t) = (e.start as usize, e.end as usize);
        for frame in s..t.min(length) {
            let v = ramp_activity(s, t, frame, ramp_len);
            let slot = &mut a[frame * num_classes + e.class_id - 1];
            *slot = slot.max(v);
        }
    }
    Tensor::matrix(length, num_classes, a).expect("activity shape")
}

/// Generator bound to one dataset seed.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    seed: u64,
    /// `feature_dim × num_classes`, row-major.
    mixing: Tensor,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, MIXING_STREAM);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..cfg.feature_dim * cfg.num_classes)
            .map(|_| normal.sample(&mut r))
            .collect();
        let mixing = Tensor::matrix(cfg.feature_dim, cfg.num_classes, data)?;
        Ok(Self { cfg, seed, mixing })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn mixing(&self) -> &Tensor {
        &self.mixing
    }

    /// Sequence number `index` of this dataset.
    pub fn sequence(&self, index: u64, id: String) -> SequenceSample {
        let cfg = &self.cfg;
        let mut r = rng::stream(self.seed, index);
        let events = self.place_events(&mut r);
        let activity = activity_matrix(&events, cfg.length, cfg.num_classes, cfg.ramp_len);

        let (f, c) = (cfg.feature_dim, cfg.num_classes);
        let mut x = vec![0.0; cfg.length * f];
        let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma"));
        for t in 0..cfg.length {
            let a = activity.row(t);
            for i in 0..f {
                let w = self.mixing.row(i);
                let mut v: f64 = (0..c).map(|k| w[k] * a[k]).sum();
                if let Some(n) = &noise {
                    v += n.sample(&mut r);
                }
                x[t * f + i] = v;
            }
        }
        SequenceSample {
            id,
            length: cfg.length,
            features: Tensor::matrix(cfg.length, f, x).expect("feature shape"),
            events,
        }
    }

    fn place_events(&self, r: &mut impl Rng) -> Vec<EventSpan> {
        let cfg = &self.cfg;
        let t_len = cfg.length as i64;
        let mut per_class: Vec<Vec<(i64, i64)>> = vec![Vec::new(); cfg.num_classes];
        let poisson = (cfg.events_per_class_rate > 0.0)
            .then(|| Poisson::new(cfg.events_per_class_rate).expect("rate"));

        // base events: disjoint within a class with at least one frame gap
        for spans in per_class.iter_mut() {
            let want = poisson.as_ref().map_or(0, |p| p.sample(r) as usize);
            let mut attempts = 0;
            while spans.len() < want && attempts < MAX_PLACEMENT_ATTEMPTS {
                attempts += 1;
                let len = r.gen_range(cfg.min_len..=cfg.max_len) as i64;
                let start = r.gen_range(0..=t_len - len);
                let cand = (start, start + len);
                if spans.iter().all(|&(s, e)| cand.1 < s || cand.0 > e) {
                    spans.push(cand);
                }
            }
        }

        // co-occurring partners replace base events they touch and merge
        // with each other
        let mut spawned: Vec<Vec<(i64, i64)>> = vec![Vec::new(); cfg.num_classes];
        for pair in &cfg.cooccur_pairs {
            let sources = per_class[pair.class_a - 1].clone();
            for (s, e) in sources {
                if r.gen::<f64>() >= pair.probability {
                    continue;
                }
                let js = s + r.gen_range(-COOCCUR_JITTER..=COOCCUR_JITTER);
                let je = e + r.gen_range(-COOCCUR_JITTER..=COOCCUR_JITTER);
                let (js, je) = (js.clamp(0, t_len), je.clamp(0, t_len));
                if je <= js {
                    continue;
                }
                merge_into(&mut spawned[pair.class_b - 1], (js, je));
            }
        }
        for (base, extra) in per_class.iter_mut().zip(&spawned) {
            if extra.is_empty() {
                continue;
            }
            base.retain(|&(s, e)| extra.iter().all(|&(xs, xe)| e < xs || s > xe));
            for &span in extra {
                merge_into(base, span);
            }
        }

        let mut events = Vec::new();
        for (k, spans) in per_class.iter_mut().enumerate() {
            spans.sort_unstable();
            events.extend(spans.iter().map(|&(s, e)| EventSpan::new(s as f64, e as f64, k + 1)));
        }
        events
    }
}

/// Inserts `span`, merging it with every span it overlaps or touches.
fn merge_into(spans: &mut Vec<(i64, i64)>, span: (i64, i64)) {
    let (mut s, mut e) = span;
    spans.retain(|&(a, b)| {
        if a <= e && s <= b {
            s = s.min(a);
            e = e.max(b);
            false
        } else {
            true
        }
    });
    spans.push((s, e));
}

/// One sequence of the dataset with `seed` (sequence index 0).
pub fn generate_sequence(cfg: &GeneratorConfig, seed: u64) -> Result<SequenceSample> {
    Ok(Generator::new(cfg.clone(), seed)?.sequence(0, "seq-0".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub files: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub manifest: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.jsonl"),
            val: dir.join("val.jsonl"),
            test: dir.join("test.jsonl"),
            manifest: dir.join("manifest.json"),
        }
    }
}

/// Sequences of the three splits; indices run consecutively across splits.
pub fn generate_splits(cfg: &GeneratorConfig, seed: u64) -> Result<[Vec<SequenceSample>; 3]> {
    let generator = Generator::new(cfg.clone(), seed)?;
    let mut next = 0u64;
    let mut split = |name: &str, n: usize| {
        let first = next;
        next += n as u64;
        (0..n as u64)
            .into_par_iter()
            .map(|k| generator.sequence(first + k, format!("{name}-{k:06}")))
            .collect::<Vec<_>>()
    };
    Ok([
        split("train", cfg.n_train),
        split("val", cfg.n_val),
        split("test", cfg.n_test),
    ])
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `manifest.json` into `dir`.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64, dir: &Path) -> Result<DatasetPaths> {
    let [train, val, test] = generate_splits(cfg, seed)?;
    let paths = DatasetPaths::in_dir(dir);
    io::write_sequences(&paths.train, &train)?;
    io::write_sequences(&paths.val, &val)?;
    io::write_sequences(&paths.test, &test)?;
    let manifest = Manifest {
        generator: cfg.clone(),
        seed,
        files: vec!["train.jsonl".into(), "val.jsonl".into(), "test.jsonl".into()],
    };
    io::write_json(&paths.manifest, &manifest)?;
    Ok(paths)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    io::read_json(path)
}
