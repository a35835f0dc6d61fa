use serde::{Deserialize, Serialize};

use super::{generate, CalibrationProfile, GenerateOptions, Mode};
use crate::error::{ChaiError, Result};
use crate::model::Weights;

/// Per-step deviation of a clustered mode from MHA on the same context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub mode: Mode,
    pub steps: usize,
    pub mha_tokens: Vec<u32>,
    /// Argmax picks of the clustered run, fed the MHA tokens as context.
    pub chai_tokens: Vec<u32>,
    /// First step whose argmax differs from MHA's, 1-based.
    pub first_divergence_step: Option<usize>,
    pub max_abs_logit_delta: Vec<f64>,
    pub mean_abs_logit_delta: Vec<f64>,
    /// `KL(p_mha || p_chai)` of the next-token distributions, in nats.
    pub kl_divergence: Vec<f64>,
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v as f64 - lse).collect()
}

pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// Runs MHA, then `mode` teacher-forced on the MHA token stream, and compares
/// the two runs' logits step by step.
pub fn compare_outputs(
    weights: &Weights,
    prompt: &[u32],
    steps: usize,
    profile: &CalibrationProfile,
    mode: Mode,
    base: &GenerateOptions,
) -> Result<DivergenceReport> {
    if mode == Mode::Mha {
        return Err(ChaiError::Argument("compare needs a clustered mode".into()));
    }
    let mut mha_opts = base.clone();
    mha_opts.mode = Mode::Mha;
    mha_opts.steps = steps;
    mha_opts.keep_logits = true;
    mha_opts.forced_tokens = None;
    let mha = generate(weights, prompt, &mha_opts, None)?;

    let mut chai_opts = mha_opts.clone();
    chai_opts.mode = mode;
    chai_opts.forced_tokens = Some(mha.tokens.clone());
    let chai = generate(weights, prompt, &chai_opts, Some(profile))?;

    let mut max_abs = Vec::with_capacity(steps);
    let mut mean_abs = Vec::with_capacity(steps);
    let mut kl = Vec::with_capacity(steps);
    for (a, b) in mha.logits.iter().zip(&chai.logits) {
        let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).collect();
        max_abs.push(deltas.iter().fold(0.0, |m: f64, &d| m.max(d)));
        mean_abs.push(deltas.iter().sum::<f64>() / deltas.len() as f64);
        kl.push(kl_divergence(a, b));
    }
    let first_divergence_step = mha
        .tokens
        .iter()
        .zip(&chai.tokens)
        .position(|(a, b)| a != b)
        .map(|i| i + 1);
    Ok(DivergenceReport {
        mode,
        steps,
        mha_tokens: mha.tokens,
        chai_tokens: chai.tokens,
        first_divergence_step,
        max_abs_logit_delta: max_abs,
        mean_abs_logit_delta: mean_abs,
        kl_divergence: kl,
    })
}
