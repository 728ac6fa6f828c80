//! Bidirectional triplet losses over a batch score grid: a fixed hinge
//! margin and a variable margin driven by the prior text similarity of each
//! (query, negative) pair, plus the margin-curve sampler.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid margin parameter: {0}")]
    InvalidParameter(String),
    #[error("score grid must be square, got {0} values for n = {1}")]
    BadGrid(usize, usize),
}

/// Square grid of per-pair values; row `i` is image `i`, column `j` is
/// text `j`, and the diagonal holds the aligned pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid {
    n: usize,
    values: Vec<f64>,
}

impl ScoreGrid {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self, LossError> {
        if values.len() != n * n {
            return Err(LossError::BadGrid(values.len(), n));
        }
        Ok(Self { n, values })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(i, j));
            }
        }
        Self { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// How negatives enter the hinge sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeStrategy {
    /// Every violating negative contributes.
    All,
    /// Only the single maximal violator per anchor contributes (ties break
    /// to the smallest index).
    Hardest,
}

/// Margin configuration for a training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarginMode {
    Fixed { alpha: f64 },
    Dynamic { gamma: f64, beta: f64 },
}

/// Variable margin: `gamma * (e^beta - e^(beta S)) / (e^beta - 1)`.
/// Equals `gamma` at `S = 0` and `0` at `S = 1`, decreasing in between.
pub fn dynamic_margin(prior: f64, gamma: f64, beta: f64) -> Result<f64, LossError> {
    validate_margin_params(gamma, beta)?;
    if !(0.0..=1.0).contains(&prior) {
        return Err(LossError::InvalidParameter(format!(
            "prior similarity {prior} outside [0, 1]"
        )));
    }
    let eb = beta.exp();
    Ok(gamma * (eb - (beta * prior).exp()) / (eb - 1.0))
}

fn validate_margin_params(gamma: f64, beta: f64) -> Result<(), LossError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(LossError::InvalidParameter(format!(
            "gamma {gamma} outside (0, 1)"
        )));
    }
    if beta == 0.0 || !beta.is_finite() {
        return Err(LossError::InvalidParameter(format!(
            "beta must be finite and nonzero, got {beta}"
        )));
    }
    Ok(())
}

/// Sample the margin law on a uniform grid over `[0, 1]` (endpoints
/// included), ready for CSV emission.
pub fn margin_curve(gamma: f64, beta: f64, samples: usize) -> Result<Vec<(f64, f64)>, LossError> {
    validate_margin_params(gamma, beta)?;
    if samples < 2 {
        return Err(LossError::InvalidParameter(format!(
            "need at least 2 samples, got {samples}"
        )));
    }
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let s = i as f64 / (samples - 1) as f64;
        out.push((s, dynamic_margin(s, gamma, beta)?));
    }
    Ok(out)
}

/// Bidirectional hinge loss with a per-pair margin. For every anchor image
/// the negatives are the other texts; for every anchor text the negatives
/// are the other images. Both directions of pair `(i, j)` use `margin(i, j)`.
///
/// Returns the loss and the coefficient grid `dL/dS[i][j]` (hinge
/// subgradient 0 exactly at the kink), so callers can push gradients
/// through the score function.
pub fn hinge_loss(
    scores: &ScoreGrid,
    margin: impl Fn(usize, usize) -> f64,
    strategy: NegativeStrategy,
) -> (f64, ScoreGrid) {
    let n = scores.n();
    let mut coef = vec![0.0; n * n];
    if n < 2 {
        log::warn!("hinge loss over a batch of {n}: no negatives, loss is 0");
        return (0.0, ScoreGrid { n, values: coef });
    }
    let mut loss = 0.0;
    // Image anchors: positive (i, i), negative texts j.
    for i in 0..n {
        let positive = scores.at(i, i);
        let mut apply = |j: usize, h: f64| {
            loss += h;
            coef[i * n + j] += 1.0;
            coef[i * n + i] -= 1.0;
        };
        match strategy {
            NegativeStrategy::All => {
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let h = margin(i, j) - positive + scores.at(i, j);
                    if h > 0.0 {
                        apply(j, h);
                    }
                }
            }
            NegativeStrategy::Hardest => {
                let mut best: Option<(usize, f64)> = None;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let h = margin(i, j) - positive + scores.at(i, j);
                    if best.map_or(true, |(_, bh)| h > bh) {
                        best = Some((j, h));
                    }
                }
                if let Some((j, h)) = best {
                    if h > 0.0 {
                        apply(j, h);
                    }
                }
            }
        }
    }
    // Text anchors: positive (j, j), negative images i.
    for j in 0..n {
        let positive = scores.at(j, j);
        let mut apply = |i: usize, h: f64| {
            loss += h;
            coef[i * n + j] += 1.0;
            coef[j * n + j] -= 1.0;
        };
        match strategy {
            NegativeStrategy::All => {
                for i in 0..n {
                    if i == j {
                        continue;
                    }
                    let h = margin(i, j) - positive + scores.at(i, j);
                    if h > 0.0 {
                        apply(i, h);
                    }
                }
            }
            NegativeStrategy::Hardest => {
                let mut best: Option<(usize, f64)> = None;
                for i in 0..n {
                    if i == j {
                        continue;
                    }
                    let h = margin(i, j) - positive + scores.at(i, j);
                    if best.map_or(true, |(_, bh)| h > bh) {
                        best = Some((i, h));
                    }
                }
                if let Some((i, h)) = best {
                    if h > 0.0 {
                        apply(i, h);
                    }
                }
            }
        }
    }
    (loss, ScoreGrid { n, values: coef })
}

/// Fixed-margin bidirectional triplet loss.
pub fn triplet_fixed(scores: &ScoreGrid, alpha: f64, strategy: NegativeStrategy) -> f64 {
    hinge_loss(scores, |_, _| alpha, strategy).0
}

/// Variable-margin triplet loss: the margin of pair `(i, j)` comes from the
/// prior similarity of text `j` against image `i`'s captions, in both
/// retrieval directions.
pub fn triplet_dynamic(
    scores: &ScoreGrid,
    priors: &ScoreGrid,
    gamma: f64,
    beta: f64,
    strategy: NegativeStrategy,
) -> Result<f64, LossError> {
    validate_margin_params(gamma, beta)?;
    if priors.n() != scores.n() {
        return Err(LossError::BadGrid(priors.values.len(), scores.n()));
    }
    let eb = beta.exp();
    let margin = |i: usize, j: usize| {
        let s = priors.at(i, j).clamp(0.0, 1.0);
        gamma * (eb - (beta * s).exp()) / (eb - 1.0)
    };
    Ok(hinge_loss(scores, margin, strategy).0)
}

/// Loss under the configured margin mode.
pub fn triplet_loss(
    scores: &ScoreGrid,
    priors: &ScoreGrid,
    mode: MarginMode,
    strategy: NegativeStrategy,
) -> Result<f64, LossError> {
    match mode {
        MarginMode::Fixed { alpha } => Ok(triplet_fixed(scores, alpha, strategy)),
        MarginMode::Dynamic { gamma, beta } => {
            triplet_dynamic(scores, priors, gamma, beta, strategy)
        }
    }
}
