//! Projection-head training: analytic gradients of the triplet losses,
//! an Adam optimizer with a step-decay learning-rate schedule, and the
//! mini-batch training loop. Encoders stay frozen at their seeded values;
//! only the heads move.

use thiserror::Error;

use crate::data::{split_indices, DataError, Dataset, SplitIndices};
use crate::eval::{encode_corpus, recall_report, ContextGrid, EncodedCorpus, EvalError, QueryMode};
use crate::fusion::{HeadGrads, Model, ModelError, PairContext, ProjectionHeads};
use crate::loss::{hinge_loss, LossError, MarginMode, NegativeStrategy, ScoreGrid};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::score::prior_similarity;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam over the five head tensors, with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn for_heads(heads: &ProjectionHeads) -> Self {
        let zeros: Vec<Tensor> = heads
            .clone()
            .into_parts()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, heads: &mut ProjectionHeads, grads: &HeadGrads, lr: f64) {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        let params = heads.parts_mut();
        let grad_parts = grads.parts();
        for (slot, param) in params.into_iter().enumerate() {
            let g = grad_parts[slot].data();
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            let p = param.data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

impl ProjectionHeads {
    pub fn into_parts(self) -> [Tensor; 5] {
        [
            self.w_visual,
            self.w_sentence,
            self.w_keyword,
            self.w_gate,
            self.b_gate,
        ]
    }

    pub fn parts_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.w_visual,
            &mut self.w_sentence,
            &mut self.w_keyword,
            &mut self.w_gate,
            &mut self.b_gate,
        ]
    }
}

/// One gradient batch: a square grid of pair contexts (row = image of the
/// anchor pair, column = text of the anchor pair) plus the prior grid.
pub struct GradBatch<'a> {
    pub contexts: Vec<&'a PairContext>,
    pub priors: ScoreGrid,
}

impl GradBatch<'_> {
    pub fn n(&self) -> usize {
        self.priors.n()
    }
}

/// Loss and analytic head gradients for one batch under the configured
/// margin mode. Upstream encoder outputs are constants; the hinge kink
/// contributes subgradient zero.
pub fn grad_projection(
    heads: &ProjectionHeads,
    batch: &GradBatch,
    mode: MarginMode,
    strategy: NegativeStrategy,
) -> Result<(f64, HeadGrads), TrainError> {
    let n = batch.n();
    debug_assert_eq!(batch.contexts.len(), n * n);
    let mut score_values = Vec::with_capacity(n * n);
    for ctx in &batch.contexts {
        score_values.push(heads.score_pair(ctx)?);
    }
    let scores = ScoreGrid::new(n, score_values)?;
    let (loss, coef) = match mode {
        MarginMode::Fixed { alpha } => hinge_loss(&scores, |_, _| alpha, strategy),
        MarginMode::Dynamic { gamma, beta } => {
            if !(gamma > 0.0 && gamma < 1.0) || beta == 0.0 || !beta.is_finite() {
                return Err(TrainError::Loss(LossError::InvalidParameter(format!(
                    "gamma {gamma}, beta {beta}"
                ))));
            }
            let eb = beta.exp();
            hinge_loss(
                &scores,
                |i, j| {
                    let s = batch.priors.at(i, j).clamp(0.0, 1.0);
                    gamma * (eb - (beta * s).exp()) / (eb - 1.0)
                },
                strategy,
            )
        }
    };
    let mut grads = HeadGrads::zeros_like(heads);
    for i in 0..n {
        for j in 0..n {
            let c = coef.at(i, j);
            if c != 0.0 {
                heads.score_backward(batch.contexts[i * n + j], c, &mut grads)?;
            }
        }
    }
    Ok((loss, grads))
}

/// Prior similarities of every split caption against every split image's
/// caption set. Pairs whose caption belongs to the image are pinned to 1.
pub struct PriorGrid {
    pub images: usize,
    pub captions: usize,
    pub values: Vec<f64>,
}

impl PriorGrid {
    pub fn at(&self, image: usize, caption: usize) -> f64 {
        self.values[image * self.captions + caption]
    }
}

pub fn build_priors(
    dataset: &Dataset,
    indices: &[usize],
    corpus: &EncodedCorpus,
    bleu_weight: f64,
) -> Result<PriorGrid, TrainError> {
    let refs: Vec<Vec<crate::text::TokenSeq>> = indices
        .iter()
        .map(|&ix| dataset.entries[ix].sentence_tokens())
        .collect();
    let images = indices.len();
    let captions = corpus.caption_tokens.len();
    let mut values = Vec::with_capacity(images * captions);
    for (i, image_refs) in refs.iter().enumerate() {
        for (q, caption) in corpus.caption_tokens.iter().enumerate() {
            let v = if corpus.owner[q] == i {
                1.0
            } else {
                let s = prior_similarity(caption, image_refs, bleu_weight)
                    .map_err(ModelError::from)?;
                // Keep priors strictly positive so the dynamic margin sees
                // its documented domain.
                s.max(1e-12)
            };
            values.push(v);
        }
    }
    Ok(PriorGrid {
        images,
        captions,
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub margin: MarginMode,
    pub strategy: NegativeStrategy,
    pub bleu_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            learning_rate: 1e-4,
            lr_decay: 0.7,
            lr_decay_every: 20,
            margin: MarginMode::Dynamic {
                gamma: 0.6,
                beta: 5.0,
            },
            strategy: NegativeStrategy::Hardest,
            bleu_weight: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch size {} below 2", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr decay {}", self.lr_decay));
        }
        if self.lr_decay_every == 0 {
            return bad("lr decay interval of 0".into());
        }
        match self.margin {
            MarginMode::Fixed { alpha } => {
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return bad(format!("fixed margin {alpha} outside (0, 1]"));
                }
            }
            MarginMode::Dynamic { gamma, beta } => {
                if !(gamma > 0.0 && gamma < 1.0) {
                    return bad(format!("gamma {gamma} outside (0, 1)"));
                }
                if beta == 0.0 || !beta.is_finite() {
                    return bad(format!("beta {beta}"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.bleu_weight) {
            return bad(format!("bleu weight {}", self.bleu_weight));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_mean_recall: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochStat>,
    pub split: SplitIndices,
}

impl TrainReport {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_mR\n");
        for s in &self.history {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.epoch, s.learning_rate, s.train_loss, s.val_mean_recall
            ));
        }
        out
    }
}

/// Mini-batch Adam over the projection heads. Batches are (image, caption)
/// pairs drawn by a seeded shuffle each epoch; encoder outputs, guided
/// pair contexts, and prior similarities are computed once up front.
pub fn train(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let split = split_indices(dataset.len(), cfg.seed);
    if split.train.is_empty() {
        return Err(TrainError::Eval(EvalError::EmptySplit));
    }

    let corpus = encode_corpus(model, dataset, &split.train, QueryMode::Joint)?;
    let grid = ContextGrid::build(model, &corpus)?;
    let priors = build_priors(dataset, &split.train, &corpus, cfg.bleu_weight)?;

    let val = if split.val.is_empty() {
        log::warn!("validation split is empty; reporting 0 for validation recall");
        None
    } else {
        let val_corpus = encode_corpus(model, dataset, &split.val, QueryMode::Joint)?;
        Some(ContextGrid::build(model, &val_corpus)?)
    };

    let n_captions = grid.captions;
    let mut order: Vec<usize> = (0..n_captions).collect();
    let mut rng = Rng::new(cfg.seed).derive(0xBA7C);
    let mut adam = Adam::for_heads(&model.heads);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a single pair has no negatives
            }
            let b = chunk.len();
            let mut contexts = Vec::with_capacity(b * b);
            for &row_caption in chunk {
                let image = corpus.owner[row_caption];
                for &col_caption in chunk {
                    contexts.push(grid.context(image, col_caption));
                }
            }
            let batch_priors = ScoreGrid::from_fn(b, |bi, bj| {
                priors.at(corpus.owner[chunk[bi]], chunk[bj])
            });
            let batch = GradBatch {
                contexts,
                priors: batch_priors,
            };
            let (loss, grads) = grad_projection(&model.heads, &batch, cfg.margin, cfg.strategy)?;
            adam.step(&mut model.heads, &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = if batches > 0 {
            epoch_loss / batches as f64
        } else {
            0.0
        };
        let val_mean_recall = match &val {
            Some(val_grid) => recall_report(&val_grid.scores(&model.heads)?).mean_recall,
            None => 0.0,
        };
        history.push(EpochStat {
            epoch,
            learning_rate: lr,
            train_loss,
            val_mean_recall,
        });
    }
    Ok(TrainReport { history, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, make_fixture, FixtureOptions};
    use crate::fusion::{ModelConfig, ModelDims, VgaVariant};
    use crate::tensor::finite_diff_grad;
    use crate::text::Vocabulary;

    fn tiny_heads(seed: u64) -> ProjectionHeads {
        let mut rng = Rng::new(seed);
        ProjectionHeads::seeded(5, 4, 6, &mut rng)
    }

    fn random_contexts(seed: u64, n: usize) -> Vec<PairContext> {
        let mut rng = Rng::new(seed);
        (0..n * n)
            .map(|i| PairContext {
                visual: rng.tensor(&[5], 1.0),
                sentence: rng.tensor(&[4], 1.0),
                keywords: (i % 3 != 2).then(|| rng.tensor(&[4], 1.0)),
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_heads_bit_identical() {
        let mut heads = tiny_heads(1);
        let reference = heads.clone();
        let contexts = random_contexts(2, 3);
        let batch = GradBatch {
            contexts: contexts.iter().collect(),
            priors: ScoreGrid::from_fn(3, |i, j| if i == j { 1.0 } else { 0.2 }),
        };
        let (_, grads) = grad_projection(
            &heads,
            &batch,
            MarginMode::Fixed { alpha: 0.4 },
            NegativeStrategy::All,
        )
        .unwrap();
        let mut adam = Adam::for_heads(&heads);
        adam.step(&mut heads, &grads, 0.0);
        assert_eq!(heads, reference);
    }

    #[test]
    fn adam_updates_are_bit_reproducible() {
        let run = || {
            let mut heads = tiny_heads(3);
            let contexts = random_contexts(4, 4);
            let batch = GradBatch {
                contexts: contexts.iter().collect(),
                priors: ScoreGrid::from_fn(4, |i, j| if i == j { 1.0 } else { 0.3 }),
            };
            let mut adam = Adam::for_heads(&heads);
            for step in 0..5 {
                let (_, grads) = grad_projection(
                    &heads,
                    &batch,
                    MarginMode::Dynamic {
                        gamma: 0.6,
                        beta: 5.0,
                    },
                    NegativeStrategy::Hardest,
                )
                .unwrap();
                adam.step(&mut heads, &grads, 1e-3 * (step + 1) as f64);
            }
            heads
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_loss_means_zero_gradients() {
        let heads = tiny_heads(5);
        let contexts = random_contexts(6, 2);
        // Fixed margin of 0 over identical scores cannot activate a hinge
        // when positives dominate; force it by pinning scores via priors...
        // Simpler: margin tiny and diagonal contexts equal to off-diagonal
        // gives h = margin > 0, so instead check the reported loss first.
        let batch = GradBatch {
            contexts: contexts.iter().collect(),
            priors: ScoreGrid::from_fn(2, |_, _| 1.0),
        };
        let (loss, grads) = grad_projection(
            &heads,
            &batch,
            MarginMode::Dynamic {
                gamma: 0.6,
                beta: 5.0,
            },
            NegativeStrategy::All,
        )
        .unwrap();
        if loss == 0.0 {
            for part in grads.parts() {
                assert!(part.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn backward_coefficient_is_linear() {
        let heads = tiny_heads(7);
        let contexts = random_contexts(8, 2);
        let mut once = HeadGrads::zeros_like(&heads);
        heads.score_backward(&contexts[1], 1.0, &mut once).unwrap();
        let mut thrice = HeadGrads::zeros_like(&heads);
        heads.score_backward(&contexts[1], 3.0, &mut thrice).unwrap();
        for (a, b) in once.parts().iter().zip(thrice.parts().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((3.0 * x - y).abs() < 1e-12);
            }
        }
    }

    /// Full-batch loss gradient against central finite differences, for
    /// both margin modes and both negative strategies.
    #[test]
    fn batch_gradients_match_finite_differences() {
        for (mode, strategy) in [
            (MarginMode::Fixed { alpha: 0.4 }, NegativeStrategy::All),
            (MarginMode::Fixed { alpha: 0.4 }, NegativeStrategy::Hardest),
            (
                MarginMode::Dynamic {
                    gamma: 0.6,
                    beta: 5.0,
                },
                NegativeStrategy::All,
            ),
            (
                MarginMode::Dynamic {
                    gamma: 0.6,
                    beta: 5.0,
                },
                NegativeStrategy::Hardest,
            ),
        ] {
            let heads = tiny_heads(11);
            let contexts = random_contexts(12, 4);
            let priors = ScoreGrid::from_fn(4, |i, j| if i == j { 1.0 } else { 0.1 + 0.2 * ((i + j) % 3) as f64 });
            let batch = GradBatch {
                contexts: contexts.iter().collect(),
                priors: priors.clone(),
            };
            let (_, grads) = grad_projection(&heads, &batch, mode, strategy).unwrap();

            let parts = heads.clone().into_parts();
            let shapes: Vec<Vec<usize>> = parts.iter().map(|t| t.shape().to_vec()).collect();
            let flat: Vec<f64> = parts.iter().flat_map(|t| t.data().to_vec()).collect();
            let loss_of = |v: &Tensor| {
                let mut offset = 0;
                let mut rebuilt = Vec::new();
                for s in &shapes {
                    let n: usize = s.iter().product();
                    rebuilt.push(Tensor::new(s.clone(), v.data()[offset..offset + n].to_vec()).unwrap());
                    offset += n;
                }
                let h = ProjectionHeads {
                    w_visual: rebuilt[0].clone(),
                    w_sentence: rebuilt[1].clone(),
                    w_keyword: rebuilt[2].clone(),
                    w_gate: rebuilt[3].clone(),
                    b_gate: rebuilt[4].clone(),
                };
                let b = GradBatch {
                    contexts: contexts.iter().collect(),
                    priors: priors.clone(),
                };
                grad_projection(&h, &b, mode, strategy).unwrap().0
            };
            let fd = finite_diff_grad(loss_of, &Tensor::vector(flat), 1e-6).unwrap();
            let analytic: Vec<f64> = grads.parts().iter().flat_map(|t| t.data().to_vec()).collect();
            let scale = fd.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (i, (a, n)) in analytic.iter().zip(fd.data()).enumerate() {
                assert!(
                    (a - n).abs() / scale < 1e-5,
                    "{mode:?} {strategy:?} param {i}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn learning_rate_schedule_steps_down() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            lr_decay: 0.7,
            lr_decay_every: 20,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 1.0);
        assert_eq!(cfg.learning_rate_at(19), 1.0);
        assert!((cfg.learning_rate_at(20) - 0.7).abs() < 1e-15);
        assert!((cfg.learning_rate_at(45) - 0.49).abs() < 1e-15);
    }

    #[test]
    fn config_validation_rejects_bad_margins() {
        let mut cfg = TrainConfig::default();
        cfg.margin = MarginMode::Fixed { alpha: 0.0 };
        assert!(cfg.validate().is_err());
        cfg.margin = MarginMode::Dynamic {
            gamma: 0.6,
            beta: 0.0,
        };
        assert!(cfg.validate().is_err());
        cfg.margin = MarginMode::Dynamic {
            gamma: 0.6,
            beta: 5.0,
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn training_smoke_run_keeps_history_finite() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = FixtureOptions::new(5, 6, true);
        opts.image_size = 64;
        make_fixture(dir.path(), &opts).unwrap();
        let dataset = load_dataset(&dir.path().join("dataset.jsonl")).unwrap();

        let mut dims = ModelDims::tiny();
        dims.input_size = 64;
        let mut model = Model::seeded(
            ModelConfig {
                variant: VgaVariant::Sim,
                dims,
                seed: 9,
            },
            Vocabulary::from_sequences(
                &dataset
                    .entries
                    .iter()
                    .flat_map(|e| e.sentence_tokens())
                    .collect::<Vec<_>>(),
            ),
        );
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &dataset, &cfg).unwrap();
        assert_eq!(report.history.len(), 3);
        for stat in &report.history {
            assert!(stat.train_loss.is_finite());
            assert!(stat.val_mean_recall.is_finite());
        }
        let csv = report.history_csv();
        assert!(csv.starts_with("epoch,lr,train_loss,val_mR\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
