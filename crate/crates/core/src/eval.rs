//! Ranking and recall metrics over a query/corpus similarity matrix, and
//! the end-to-end evaluation of a model on a dataset split in the three
//! query modes (sentence, keywords, joint).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::fusion::{Model, ModelError, PairContext, ProjectionHeads, TextFeatures, TextQuery};
use crate::text::{tokenize, TokenSeq};
use crate::visual::mvsa::SalientVisual;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("keywords mode requires keyword phrases on every entry")]
    MissingKeywords,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Retrieval input adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// The caption feeds the sentence branch; keyword input is derived by
    /// filtering the caption's tokens through the dataset keyword
    /// vocabulary.
    Sentence,
    /// The keyword phrases are joined into a pseudo-sentence for the
    /// sentence branch and kept as phrases for the keyword branch.
    Keywords,
    /// Caption and keyword phrases both as given.
    Joint,
}

impl std::str::FromStr for QueryMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentence" => Ok(Self::Sentence),
            "keywords" => Ok(Self::Keywords),
            "joint" => Ok(Self::Joint),
            other => Err(format!("unknown query mode '{other}'")),
        }
    }
}

impl std::fmt::Display for QueryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sentence => "sentence",
            Self::Keywords => "keywords",
            Self::Joint => "joint",
        })
    }
}

/// Build the model input for one caption under a query mode.
pub fn adapt_query(
    caption: &str,
    keywords: &[TokenSeq],
    keyword_vocab: &HashSet<String>,
    mode: QueryMode,
) -> Result<TextQuery, EvalError> {
    let sentence = tokenize(caption);
    match mode {
        QueryMode::Sentence => {
            let mut derived: Vec<TokenSeq> = Vec::new();
            let mut seen = HashSet::new();
            for token in sentence.iter() {
                if keyword_vocab.contains(token) && seen.insert(token.clone()) {
                    derived.push(TokenSeq::from_tokens(vec![token.clone()]));
                    if derived.len() == 5 {
                        break;
                    }
                }
            }
            Ok(TextQuery::new(sentence, derived))
        }
        QueryMode::Keywords => {
            if keywords.is_empty() {
                return Err(EvalError::MissingKeywords);
            }
            Ok(TextQuery::keywords_only(keywords.to_vec()))
        }
        QueryMode::Joint => Ok(TextQuery::new(sentence, keywords.to_vec())),
    }
}

/// Query-by-corpus score matrix with per-query ground truth.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub queries: usize,
    pub corpus: usize,
    /// Row-major `queries x corpus`.
    pub scores: Vec<f64>,
    /// Ground-truth corpus indices per query (at least one each).
    pub ground_truth: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.corpus..(q + 1) * self.corpus]
    }
}

/// Corpus indices sorted by descending score; ties break to the lower
/// index, so rankings are reproducible.
pub fn rank(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order
}

/// Fraction of queries whose best-ranked ground-truth entry lands in the
/// top `k`. A `k` beyond the corpus size clamps to it.
pub fn recall_at_k(matrix: &SimilarityMatrix, k: usize) -> f64 {
    assert!(k >= 1, "recall_at_k: k must be at least 1");
    let k = if k > matrix.corpus {
        log::warn!(
            "recall@{k} clamped to corpus size {}",
            matrix.corpus
        );
        matrix.corpus
    } else {
        k
    };
    let mut hits = 0usize;
    for q in 0..matrix.queries {
        let order = rank(matrix.row(q));
        let gt = &matrix.ground_truth[q];
        let best = order
            .iter()
            .position(|ix| gt.contains(ix))
            .expect("every query has ground truth");
        if best < k {
            hits += 1;
        }
    }
    hits as f64 / matrix.queries as f64
}

/// Arithmetic mean of the six recall values.
pub fn mean_recall(values: &[f64; 6]) -> f64 {
    values.iter().sum::<f64>() / 6.0
}

/// The six recalls (both retrieval directions at K = 1, 5, 10) plus their
/// mean, with run metadata for report files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallReport {
    /// Image query ranking captions: R@1, R@5, R@10.
    pub text_retrieval: [f64; 3],
    /// Caption query ranking images: R@1, R@5, R@10.
    pub image_retrieval: [f64; 3],
    pub mean_recall: f64,
    pub mode: String,
    pub seed: u64,
    pub split_hash: String,
}

impl RecallReport {
    pub fn six(&self) -> [f64; 6] {
        [
            self.text_retrieval[0],
            self.text_retrieval[1],
            self.text_retrieval[2],
            self.image_retrieval[0],
            self.image_retrieval[1],
            self.image_retrieval[2],
        ]
    }

    /// One CSV row for aggregation across runs.
    pub fn csv_row(&self) -> String {
        let s = self.six();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.mode, self.seed, self.split_hash, s[0], s[1], s[2], s[3], s[4], s[5]
        )
    }

    pub fn csv_header() -> &'static str {
        "mode,seed,split_hash,text_r1,text_r5,text_r10,image_r1,image_r5,image_r10"
    }
}

/// Pairwise image-by-caption scores plus the caption-to-image ownership map.
#[derive(Clone, Debug)]
pub struct PairScores {
    pub images: usize,
    pub captions: usize,
    /// Row-major `images x captions`.
    pub scores: Vec<f64>,
    pub owner: Vec<usize>,
}

impl PairScores {
    pub fn at(&self, image: usize, caption: usize) -> f64 {
        self.scores[image * self.captions + caption]
    }

    /// Caption queries ranking images.
    pub fn image_retrieval_matrix(&self) -> SimilarityMatrix {
        let mut scores = Vec::with_capacity(self.captions * self.images);
        for q in 0..self.captions {
            for i in 0..self.images {
                scores.push(self.at(i, q));
            }
        }
        SimilarityMatrix {
            queries: self.captions,
            corpus: self.images,
            scores,
            ground_truth: self.owner.iter().map(|&o| vec![o]).collect(),
        }
    }

    /// Image queries ranking captions; any of the image's captions counts.
    pub fn text_retrieval_matrix(&self) -> SimilarityMatrix {
        let mut ground_truth = vec![Vec::new(); self.images];
        for (q, &o) in self.owner.iter().enumerate() {
            ground_truth[o].push(q);
        }
        SimilarityMatrix {
            queries: self.images,
            corpus: self.captions,
            scores: self.scores.clone(),
            ground_truth,
        }
    }
}

/// Both retrieval directions from a pairwise score grid.
pub fn recall_report(pairs: &PairScores) -> RecallReport {
    let i2t = pairs.text_retrieval_matrix();
    let t2i = pairs.image_retrieval_matrix();
    let text_retrieval = [
        recall_at_k(&i2t, 1),
        recall_at_k(&i2t, 5),
        recall_at_k(&i2t, 10),
    ];
    let image_retrieval = [
        recall_at_k(&t2i, 1),
        recall_at_k(&t2i, 5),
        recall_at_k(&t2i, 10),
    ];
    let six = [
        text_retrieval[0],
        text_retrieval[1],
        text_retrieval[2],
        image_retrieval[0],
        image_retrieval[1],
        image_retrieval[2],
    ];
    RecallReport {
        text_retrieval,
        image_retrieval,
        mean_recall: mean_recall(&six),
        mode: String::new(),
        seed: 0,
        split_hash: String::new(),
    }
}

/// FNV-1a over the little-endian index bytes; pins a report to its split.
pub fn split_hash(indices: &[usize]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &ix in indices {
        for b in (ix as u64).to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x1000_0000_01b3);
        }
    }
    format!("{hash:016x}")
}

/// Encoded split: salient visuals per image, encoded captions, ownership.
pub struct EncodedCorpus {
    pub image_ids: Vec<String>,
    pub visuals: Vec<SalientVisual>,
    pub caption_ids: Vec<String>,
    pub texts: Vec<TextFeatures>,
    pub caption_tokens: Vec<TokenSeq>,
    pub owner: Vec<usize>,
}

/// Encode every image and caption of a split once.
pub fn encode_corpus(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    mode: QueryMode,
) -> Result<EncodedCorpus, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let keyword_vocab = dataset.keyword_vocabulary();
    let mut corpus = EncodedCorpus {
        image_ids: Vec::new(),
        visuals: Vec::new(),
        caption_ids: Vec::new(),
        texts: Vec::new(),
        caption_tokens: Vec::new(),
        owner: Vec::new(),
    };
    for (slot, &ix) in indices.iter().enumerate() {
        let entry = &dataset.entries[ix];
        let image = dataset.load_image(entry)?;
        corpus.visuals.push(model.encode_image(&image)?);
        corpus.image_ids.push(entry.image_id.clone());
        let keywords = entry.keyword_tokens();
        for (ci, caption) in entry.sentences.iter().enumerate() {
            let query = adapt_query(caption, &keywords, &keyword_vocab, mode)?;
            corpus.caption_tokens.push(query.sentence.clone());
            corpus.texts.push(model.encode_text(&query)?);
            corpus.caption_ids.push(format!("{}#{ci}", entry.image_id));
            corpus.owner.push(slot);
        }
    }
    Ok(corpus)
}

/// Per-pair head inputs for a whole corpus; scores can be recomputed
/// cheaply as the heads move.
pub struct ContextGrid {
    pub images: usize,
    pub captions: usize,
    pub contexts: Vec<PairContext>,
    pub owner: Vec<usize>,
}

impl ContextGrid {
    pub fn build(model: &Model, corpus: &EncodedCorpus) -> Result<Self, EvalError> {
        let images = corpus.visuals.len();
        let captions = corpus.texts.len();
        let mut contexts = Vec::with_capacity(images * captions);
        for visual in &corpus.visuals {
            for text in &corpus.texts {
                contexts.push(model.pair_context(visual, text)?);
            }
        }
        Ok(Self {
            images,
            captions,
            contexts,
            owner: corpus.owner.clone(),
        })
    }

    pub fn context(&self, image: usize, caption: usize) -> &PairContext {
        &self.contexts[image * self.captions + caption]
    }

    pub fn scores(&self, heads: &ProjectionHeads) -> Result<PairScores, EvalError> {
        let mut scores = Vec::with_capacity(self.images * self.captions);
        for ctx in &self.contexts {
            scores.push(heads.score_pair(ctx)?);
        }
        Ok(PairScores {
            images: self.images,
            captions: self.captions,
            scores,
            owner: self.owner.clone(),
        })
    }
}

/// Evaluate a model on a dataset split: encode everything once, fill the
/// pairwise matrix, and compute both directions' recalls.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    mode: QueryMode,
) -> Result<(RecallReport, PairScores), EvalError> {
    let corpus = encode_corpus(model, dataset, indices, mode)?;
    let grid = ContextGrid::build(model, &corpus)?;
    let pairs = grid.scores(&model.heads)?;
    let mut report = recall_report(&pairs);
    report.mode = mode.to_string();
    report.seed = model.config.seed;
    report.split_hash = split_hash(indices);
    Ok((report, pairs))
}
