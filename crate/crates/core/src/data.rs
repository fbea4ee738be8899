//! Synthetic speaker corpus and the on-disk feature, label and trial formats.
//!
//! Frames are drawn as `x_t = m_s + c_u + n_t`: a speaker mean, a
//! per-utterance session offset and AR(1) frame noise. Each utterance is
//! then passed through one of four channel conditions.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::records::write_atomic;

pub const FEATURE_MAGIC: [u8; 4] = *b"AXVF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Noise,
    Codec,
    Reverb,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Clean, Condition::Noise, Condition::Codec, Condition::Reverb];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noise => "noise",
            Condition::Codec => "codec",
            Condition::Reverb => "reverb",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub feature_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub sigma_between: f64,
    pub sigma_session: f64,
    pub ar_coefficient: f64,
    /// Scale of the frame innovations.
    pub frame_noise: f64,
    /// Std of the white noise added under [`Condition::Noise`].
    pub noise_scale: f64,
    /// Neighbour weight of the channel filter used for [`Condition::Codec`].
    pub codec_mix: f64,
    /// Window of the causal moving average used for [`Condition::Reverb`].
    pub reverb_frames: usize,
    /// Assigned round-robin over each speaker's utterances.
    pub conditions: Vec<Condition>,
    /// Prefix of speaker ids, so train and evaluation corpora never collide.
    pub prefix: String,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 32,
            utts_per_speaker: 20,
            feature_dim: 30,
            frames_min: 80,
            frames_max: 300,
            sigma_between: 1.0,
            sigma_session: 0.3,
            ar_coefficient: 0.5,
            frame_noise: 1.0,
            noise_scale: 0.3,
            codec_mix: 0.15,
            reverb_frames: 5,
            conditions: Condition::ALL.to_vec(),
            prefix: "spk".into(),
            seed: 1,
        }
    }
}

/// Frames removed by the default network; shorter inputs cannot be scored.
pub const MIN_UTTERANCE_FRAMES: usize = 15;

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_speakers == 0 || self.utts_per_speaker == 0 || self.feature_dim == 0 {
            return bad("corpus needs at least one speaker, utterance and feature".into());
        }
        if self.frames_min < MIN_UTTERANCE_FRAMES || self.frames_min > self.frames_max {
            return bad(format!(
                "frame range {}..={} must start at {MIN_UTTERANCE_FRAMES} or more",
                self.frames_min, self.frames_max
            ));
        }
        for (name, v) in [
            ("sigma_between", self.sigma_between),
            ("sigma_session", self.sigma_session),
            ("frame_noise", self.frame_noise),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return bad(format!("ar_coefficient must be in [0, 1), got {}", self.ar_coefficient));
        }
        if !(0.0..=0.5).contains(&self.codec_mix) {
            return bad(format!("codec_mix must be in [0, 0.5], got {}", self.codec_mix));
        }
        if self.reverb_frames == 0 {
            return bad("reverb_frames must be positive".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        Ok(())
    }

    pub fn speaker_id(&self, s: usize) -> String {
        format!("{}{s:03}", self.prefix)
    }

    pub fn utt_id(&self, s: usize, j: usize) -> String {
        format!("{}{s:03}-utt{j:03}", self.prefix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub condition: Condition,
    pub features: Matrix,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().map(|u| u.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Speaker index of every utterance, in the order of [`Corpus::speakers`].
    pub fn labels(&self) -> Vec<usize> {
        let index: BTreeMap<String, usize> = self.speakers().into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        self.utterances.iter().map(|u| index[&u.speaker_id]).collect()
    }

    pub fn get(&self, utt_id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.utt_id == utt_id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let feats = dir.join("feats");
        std::fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
        self.utterances
            .par_iter()
            .try_for_each(|u| write_features(&feature_path(dir, &u.utt_id), &u.features))?;
        let mut utt2spk = String::new();
        let mut utt2cond = String::new();
        for u in &self.utterances {
            utt2spk.push_str(&format!("{} {}\n", u.utt_id, u.speaker_id));
            utt2cond.push_str(&format!("{} {}\n", u.utt_id, u.condition));
        }
        write_atomic(&dir.join("utt2spk"), utt2spk.as_bytes())?;
        write_atomic(&dir.join("utt2cond"), utt2cond.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spk = read_pairs(&dir.join("utt2spk"))?;
        let cond: BTreeMap<String, String> = read_pairs(&dir.join("utt2cond"))?.into_iter().collect();
        let utterances = spk
            .into_par_iter()
            .map(|(utt_id, speaker_id)| {
                let condition = cond
                    .get(&utt_id)
                    .ok_or_else(|| Error::Missing(format!("condition of {utt_id} in utt2cond")))?
                    .parse()?;
                let features = read_features(&feature_path(dir, &utt_id))?;
                Ok(Utterance {
                    utt_id,
                    speaker_id,
                    condition,
                    features,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { utterances })
    }
}

/// Reads whitespace-separated `key value` lines.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut it = l.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) => Ok((a.to_string(), b.to_string())),
                _ => Err(Error::format(path, format!("line {} is not `key value`", i + 1))),
            }
        })
        .collect()
}

/// Builds the corpus in memory. Features are rounded to `f32` so the
/// in-memory corpus equals what [`Corpus::load`] returns.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let between = Normal::new(0.0, spec.sigma_between).expect("validated");
    let means: Vec<Array1<f64>> = (0..spec.num_speakers)
        .map(|_| Array1::from_shape_simple_fn(d, || between.sample(&mut rng)))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..spec.num_speakers)
        .flat_map(|s| (0..spec.utts_per_speaker).map(move |j| (s, j)))
        .collect();
    let utterances = jobs
        .into_par_iter()
        .enumerate()
        .map(|(k, (s, j))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64 + 1);
            let condition = spec.conditions[j % spec.conditions.len()];
            let clean = clean_utterance(spec, &means[s], &mut rng);
            let features = corrupt(spec, condition, clean, &mut rng).mapv(|v| v as f32 as f64);
            Utterance {
                utt_id: spec.utt_id(s, j),
                speaker_id: spec.speaker_id(s),
                condition,
                features,
            }
        })
        .collect();
    Ok(Corpus { utterances })
}

fn clean_utterance(spec: &CorpusSpec, mean: &Array1<f64>, rng: &mut ChaCha8Rng) -> Matrix {
    let d = spec.feature_dim;
    let t = rng.random_range(spec.frames_min..=spec.frames_max);
    let offset: Array1<f64> = Array1::from_shape_simple_fn(d, || spec.sigma_session * rng.sample::<f64, _>(StandardNormal));
    let rho = spec.ar_coefficient;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut out = Array2::zeros((t, d));
    // Stationary start: n_0 has the same marginal variance as later frames.
    let mut n: Array1<f64> = Array1::from_shape_simple_fn(d, || spec.frame_noise * rng.sample::<f64, _>(StandardNormal));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        if i > 0 {
            n.mapv_inplace(|v| rho * v + innovation * spec.frame_noise * rng.sample::<f64, _>(StandardNormal));
        }
        row.assign(&(mean + &offset + &n));
    }
    out
}

/// Applies a channel condition. Deterministic given the features, the
/// corpus settings and (for additive noise) the generator state.
pub fn corrupt(spec: &CorpusSpec, condition: Condition, x: Matrix, rng: &mut ChaCha8Rng) -> Matrix {
    match condition {
        Condition::Clean => x,
        Condition::Noise => {
            let mut x = x;
            x.mapv_inplace(|v| v + spec.noise_scale * rng.sample::<f64, _>(StandardNormal));
            x
        }
        Condition::Codec => codec_filter(&x, spec.codec_mix),
        Condition::Reverb => moving_average(&x, spec.reverb_frames),
    }
}

/// Banded mixing across neighbouring feature channels, edges clamped.
pub fn codec_filter(x: &Matrix, mix: f64) -> Matrix {
    let d = x.ncols();
    Array2::from_shape_fn(x.raw_dim(), |(t, c)| {
        let lo = x[[t, c.saturating_sub(1)]];
        let hi = x[[t, (c + 1).min(d - 1)]];
        (1.0 - 2.0 * mix) * x[[t, c]] + mix * (lo + hi)
    })
}

/// Causal moving average over the last `window` frames.
pub fn moving_average(x: &Matrix, window: usize) -> Matrix {
    let mut out = Array2::zeros(x.raw_dim());
    for t in 0..x.nrows() {
        let start = (t + 1).saturating_sub(window);
        let slice = x.slice(ndarray::s![start..=t, ..]);
        out.row_mut(t).assign(&slice.mean_axis(ndarray::Axis(0)).expect("nonempty window"));
    }
    out
}

pub fn features_to_bytes(m: &Matrix) -> Result<Vec<u8>> {
    let (t, d) = m.dim();
    if t == 0 || d == 0 {
        return Err(Error::Shape(format!("feature matrix must be nonempty, got {t}x{d}")));
    }
    let mut out = Vec::with_capacity(16 + 4 * t * d);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", word(4))));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(Error::format(path, format!("empty matrix {t}x{d}")));
    }
    let payload = &bytes[16..];
    if payload.len() != 4 * t * d {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", 4 * t * d, payload.len()),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Array2::from_shape_vec((t, d), values).expect("length checked"))
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &features_to_bytes(m)?)
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

pub fn generate_trials(corpus: &Corpus, seed: u64, n_target: usize, n_nontarget: usize) -> Result<Vec<Trial>> {
    let utts = &corpus.utterances;
    let labels = corpus.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut target_pairs: Vec<(usize, usize)> = Vec::new();
    let mut per_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        per_speaker.entry(l).or_default().push(i);
    }
    for members in per_speaker.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                target_pairs.push((i, j));
            }
        }
    }
    let n = utts.len();
    let same: usize = per_speaker.values().map(|m| m.len() * (m.len() - 1) / 2).sum();
    let available_nontarget = n * n.saturating_sub(1) / 2 - same;
    if n_target > target_pairs.len() || n_nontarget > available_nontarget {
        return Err(Error::InvalidArgument(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials, only {} / {available_nontarget} exist",
            target_pairs.len()
        )));
    }
    target_pairs.shuffle(&mut rng);
    target_pairs.truncate(n_target);

    let mut seen = HashSet::new();
    let mut nontarget_pairs = Vec::with_capacity(n_nontarget);
    if n_nontarget * 2 > available_nontarget {
        // Dense request: enumerate and sample.
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| labels[i] != labels[j])
            .collect();
        all.shuffle(&mut rng);
        nontarget_pairs.extend(all.into_iter().take(n_nontarget));
    } else {
        while nontarget_pairs.len() < n_nontarget {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if labels[i] != labels[j] && seen.insert((i.min(j), i.max(j))) {
                nontarget_pairs.push((i, j));
            }
        }
    }

    let mut trials: Vec<Trial> = target_pairs
        .into_iter()
        .map(|p| (p, true))
        .chain(nontarget_pairs.into_iter().map(|p| (p, false)))
        .map(|((i, j), target)| {
            let (e, t) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
            Trial {
                enroll: utts[e].utt_id.clone(),
                test: utts[t].utt_id.clone(),
                target,
            }
        })
        .collect();
    trials.shuffle(&mut rng);
    Ok(trials)
}

pub fn trials_to_string(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{} {} {}\n", t.enroll, t.test, if t.target { "target" } else { "nontarget" }))
        .collect()
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    write_atomic(path, trials_to_string(trials).as_bytes())
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let target = match f.as_slice() {
                [_, _, "target"] => true,
                [_, _, "nontarget"] => false,
                _ => {
                    return Err(Error::format(
                        path,
                        format!("line {} is not `enroll test target|nontarget`", i + 1),
                    ))
                }
            };
            Ok(Trial {
                enroll: f[0].to_string(),
                test: f[1].to_string(),
                target,
            })
        })
        .collect()
}

/// Standard on-disk layout of a generated corpus directory.
pub fn feature_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join("feats").join(format!("{utt_id}.axvf"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small() -> CorpusSpec {
        CorpusSpec {
            num_speakers: 4,
            utts_per_speaker: 6,
            frames_min: 20,
            frames_max: 40,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn feature_bytes_match_independent_writer() {
        let m = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut expected = b"AXVF".to_vec();
        for w in [1u32, 3, 2] {
            expected.extend(w.to_le_bytes());
        }
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0] {
            expected.extend(v.to_le_bytes());
        }
        let bytes = features_to_bytes(&m).unwrap();
        assert_eq!(bytes, expected);
        assert_eq!(features_from_bytes(&bytes, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn feature_parse_errors() {
        let mut bytes = features_to_bytes(&array![[1.0]]).unwrap();
        assert!(features_from_bytes(&bytes[..18], Path::new("m")).is_err());
        bytes[0] = b'X';
        assert!(features_from_bytes(&bytes, Path::new("m")).is_err());
        let mut zero_t = features_to_bytes(&array![[1.0]]).unwrap();
        zero_t[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(features_from_bytes(&zero_t[..16], Path::new("m")).is_err());
        assert!(features_to_bytes(&Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_labeled() {
        let spec = small();
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.utterances.len(), 24);
        assert_eq!(a.utterances[7].utt_id, "spk001-utt001");
        assert_eq!(a.utterances[7].condition, Condition::Noise);
        assert_eq!(a.speakers().len(), 4);
        for u in &a.utterances {
            assert!((20..=40).contains(&u.features.nrows()));
            assert!(u.features.iter().all(|v| *v == *v as f32 as f64));
        }
        let other = generate_corpus(&CorpusSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn noiseless_utterances_of_one_speaker_are_equal() {
        let spec = CorpusSpec {
            sigma_session: 0.0,
            frame_noise: 0.0,
            ar_coefficient: 0.0,
            conditions: vec![Condition::Clean],
            frames_min: 30,
            frames_max: 30,
            ..small()
        };
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.utterances[0].features, c.utterances[1].features);
        assert_ne!(c.utterances[0].features, c.utterances[6].features);
    }

    #[test]
    fn covariance_traces_follow_the_generator() {
        let spec = CorpusSpec {
            num_speakers: 100,
            utts_per_speaker: 10,
            frames_min: 200,
            frames_max: 200,
            ar_coefficient: 0.0,
            conditions: vec![Condition::Clean],
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let d = spec.feature_dim as f64;
        let frames: Vec<Matrix> = c.utterances.iter().map(|u| u.features.clone()).collect();
        let speaker_means: Vec<Array1<f64>> = frames
            .chunks(10)
            .map(|g| {
                g.iter().map(|m| m.mean_axis(ndarray::Axis(0)).unwrap()).fold(Array1::zeros(30), |a, b| a + b) / 10.0
            })
            .collect();
        let grand = speaker_means.iter().fold(Array1::<f64>::zeros(30), |a, b| a + b) / 100.0;
        let between: f64 = speaker_means.iter().map(|m| (m - &grand).mapv(|v| v * v).sum()).sum::<f64>() / 99.0;
        let mut within = 0.0;
        let mut count = 0.0;
        for (g, m) in frames.chunks(10).zip(&speaker_means) {
            for u in g {
                for row in u.outer_iter() {
                    within += (&row - m).mapv(|v| v * v).sum();
                    count += 1.0;
                }
            }
        }
        within /= count;
        let expect_between = spec.sigma_between.powi(2) * d;
        let expect_within = (spec.sigma_session.powi(2) + 1.0) * d;
        assert!((between / expect_between - 1.0).abs() < 0.1, "between {between} vs {expect_between}");
        assert!((within / expect_within - 1.0).abs() < 0.1, "within {within} vs {expect_within}");
    }

    #[test]
    fn corruptions_are_deterministic_functions() {
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let c = codec_filter(&x, 0.25);
        assert!((c[[0, 1]] - 2.0).abs() < 1e-15);
        assert!((c[[0, 0]] - 1.25).abs() < 1e-15);
        let r = moving_average(&x, 2);
        assert_eq!(r.row(0), x.row(0));
        assert_eq!(r.row(2), array![5.5, 6.5, 7.5]);
    }

    #[test]
    fn trials_are_valid_and_unique() {
        let c = generate_corpus(&small()).unwrap();
        let trials = generate_trials(&c, 3, 20, 40).unwrap();
        assert_eq!(trials.iter().filter(|t| t.target).count(), 20);
        assert_eq!(trials.iter().filter(|t| !t.target).count(), 40);
        let mut keys = HashSet::new();
        for t in &trials {
            assert_ne!(t.enroll, t.test);
            let same = c.get(&t.enroll).unwrap().speaker_id == c.get(&t.test).unwrap().speaker_id;
            assert_eq!(same, t.target);
            let key = if t.enroll < t.test { (&t.enroll, &t.test) } else { (&t.test, &t.enroll) };
            assert!(keys.insert(key));
        }
        assert_eq!(trials, generate_trials(&c, 3, 20, 40).unwrap());
        // 4 speakers × C(6,2) target pairs.
        assert!(generate_trials(&c, 3, 61, 0).is_err());
        assert!(generate_trials(&c, 3, 60, 216).is_ok());
        assert!(generate_trials(&c, 3, 0, 217).is_err());
    }

    #[test]
    fn corpus_and_trials_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&small()).unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
        let trials = generate_trials(&c, 1, 5, 5).unwrap();
        let path = dir.path().join("trials");
        write_trials(&path, &trials).unwrap();
        assert_eq!(read_trials(&path).unwrap(), trials);
        std::fs::write(&path, "a b maybe\n").unwrap();
        assert!(read_trials(&path).is_err());
    }
}
