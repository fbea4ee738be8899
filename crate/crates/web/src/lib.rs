//! Browser bindings for the demo page in `www/`.
//!
//! Every entry point returns a JSON string; the page parses it and draws on
//! a canvas. The `*_json` functions hold the logic so they can be tested
//! natively.

use axvec_core::data::{generate_corpus, Condition, CorpusSpec};
use axvec_core::metrics::{act_dcf, det_points, eer_from_points, min_dcf_from_points, DcfParams, LabeledScores};
use axvec_core::numerics::{conv1d, ConvParams};
use axvec_core::layers::mix_filters;
use axvec_core::{Error, Result};
use ndarray::{Array1, Array2, Array3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_CURVE_POINTS: usize = 400;

fn gaussian_scores(mean: f64, std: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
        return Err(Error::InvalidArgument(format!("score distribution N({mean}, {std}) is invalid")));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::InvalidArgument(format!("score distribution: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Scores drawn from two Gaussians, summarized as a DET curve with EER,
/// minDCF and actDCF at `p_target`.
pub fn det_json(
    target_mean: f64,
    target_std: f64,
    nontarget_mean: f64,
    nontarget_std: f64,
    n_trials: usize,
    p_target: f64,
    seed: u64,
) -> Result<String> {
    if !(2..=200_000).contains(&n_trials) {
        return Err(Error::InvalidArgument("trial count must be between 2 and 200000".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_target = (n_trials / 10).max(1);
    let targets = gaussian_scores(target_mean, target_std, n_target, &mut rng)?;
    let nontargets = gaussian_scores(nontarget_mean, nontarget_std, n_trials - n_target, &mut rng)?;
    let scores = LabeledScores::new(targets, nontargets)?;
    let params = DcfParams::new(p_target);
    params.validate()?;
    let points = det_points(&scores)?;
    let stride = points.len().div_ceil(MAX_CURVE_POINTS).max(1);
    let curve: Vec<[f64; 2]> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| i % stride == 0 || *i == points.len() - 1)
        .map(|(_, p)| [p.p_fa, p.p_miss])
        .collect();
    Ok(json!({
        "eer": eer_from_points(&points),
        "min_dcf": min_dcf_from_points(&points, &params),
        "act_dcf": act_dcf(&scores, &params)?,
        "threshold": params.threshold(),
        "n_target": scores.targets.len(),
        "n_nontarget": scores.nontargets.len(),
        "curve": curve,
    })
    .to_string())
}

/// Four single-channel kernels with easily recognized responses.
fn demo_pool() -> Vec<ConvParams> {
    let kernels: [[f64; 7]; 4] = [
        [1.0 / 7.0; 7],
        [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0],
        [0.0, 0.0, -0.5, 1.0, -0.5, 0.0, 0.0],
    ];
    kernels
        .iter()
        .map(|k| {
            let w = Array3::from_shape_vec((7, 1, 1), k.to_vec()).expect("7 taps");
            ConvParams::new(w, Array1::zeros(1), 1).expect("valid kernel")
        })
        .collect()
}

/// Mixes the demo filter pool with coefficients `beta` and applies the
/// result to one feature track of a synthetic utterance.
pub fn mix_json(beta: &[f64], seed: u64) -> Result<String> {
    let pool = demo_pool();
    let mixed = mix_filters(Array1::from(beta.to_vec()).view(), &pool)?;
    let spec = CorpusSpec {
        num_speakers: 1,
        utts_per_speaker: 1,
        frames_min: 120,
        frames_max: 120,
        conditions: vec![Condition::Noise],
        seed,
        ..CorpusSpec::default()
    };
    let utt = generate_corpus(&spec)?.utterances.remove(0);
    let track = utt.features.column(0).to_owned();
    let input = Array2::from_shape_vec((track.len(), 1), track.to_vec()).expect("column");
    let output = conv1d(input.view(), &mixed)?;
    let taps = |p: &ConvParams| p.weights.iter().copied().collect::<Vec<_>>();
    Ok(json!({
        "pool": pool.iter().map(taps).collect::<Vec<_>>(),
        "mixed": taps(&mixed),
        "input": track.to_vec(),
        "output": output.column(0).to_vec(),
        "offset": mixed.shrink() / 2,
    })
    .to_string())
}

/// One utterance of `speaker` (0..4) under `condition`, as a frame-major
/// matrix.
pub fn utterance_json(condition: &str, speaker: usize, seed: u64) -> Result<String> {
    let condition: Condition = condition.parse()?;
    let spec = CorpusSpec {
        num_speakers: 4,
        utts_per_speaker: Condition::ALL.len(),
        frames_min: 150,
        frames_max: 150,
        seed,
        ..CorpusSpec::default()
    };
    if speaker >= spec.num_speakers {
        return Err(Error::InvalidArgument(format!("speaker must be below {}", spec.num_speakers)));
    }
    let corpus = generate_corpus(&spec)?;
    let j = Condition::ALL.iter().position(|&c| c == condition).expect("listed");
    let utt = corpus
        .get(&spec.utt_id(speaker, j))
        .ok_or_else(|| Error::Missing("generated utterance".into()))?;
    let (frames, dims) = utt.features.dim();
    Ok(json!({
        "utt_id": utt.utt_id,
        "condition": utt.condition.name(),
        "frames": frames,
        "dims": dims,
        "values": utt.features.iter().copied().collect::<Vec<_>>(),
    })
    .to_string())
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn det_curve(
    target_mean: f64,
    target_std: f64,
    nontarget_mean: f64,
    nontarget_std: f64,
    n_trials: usize,
    p_target: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(det_json(target_mean, target_std, nontarget_mean, nontarget_std, n_trials, p_target, seed as u64))
}

#[wasm_bindgen]
pub fn mix_pool(beta: Vec<f64>, seed: u32) -> std::result::Result<String, JsError> {
    js(mix_json(&beta, seed as u64))
}

#[wasm_bindgen]
pub fn synthetic_utterance(condition: &str, speaker: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(utterance_json(condition, speaker, seed as u64))
}
