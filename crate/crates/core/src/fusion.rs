//! Cross-modal matching head: visual-guided attention over the text
//! branches, dynamic sentence/keyword fusion, projection heads, and the
//! scalar similarity. The assembled [`Model`] ties the visual and text
//! encoders to this head.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{
    activate, concat_vec, l2_normalize, matvec, matvec_transpose, outer, sigmoid, Activation,
    Tensor, TensorError,
};
use crate::text::gru::{bigru_encode, encode_keywords, BiGruParams, MlpParams};
use crate::text::{EmbeddingTable, TextError, TokenSeq, Vocabulary};
use crate::visual::mvsa::{salient_forward, MvsaParams, MvsaPlan, SalientVisual};
use crate::visual::{ExtractorParams, FeaturePyramid, VisualError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

const NORM_EPSILON: f64 = 1e-12;

/// Which attention mechanism guides the text branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VgaVariant {
    /// Visual features gate the text directly.
    Soft,
    /// Joint visual/text representation produces information and gate.
    Fusion,
    /// Scalar cosine between projected modalities gates the projected text.
    Sim,
}

impl std::str::FromStr for VgaVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "soft" => Ok(Self::Soft),
            "fusion" => Ok(Self::Fusion),
            "sim" => Ok(Self::Sim),
            other => Err(format!("unknown attention variant '{other}'")),
        }
    }
}

impl std::fmt::Display for VgaVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Soft => "soft",
            Self::Fusion => "fusion",
            Self::Sim => "sim",
        })
    }
}

/// Parameters of one visual-guided attention instance. Exactly one variant
/// is active per model.
#[derive(Clone, Debug, PartialEq)]
pub enum VgaParams {
    Soft {
        w: Tensor,
        b: Tensor,
    },
    Fusion {
        w_info: Tensor,
        b_info: Tensor,
        w_gate: Tensor,
        b_gate: Tensor,
    },
    Sim {
        w_visual: Tensor,
        b_visual: Tensor,
        w_text: Tensor,
        b_text: Tensor,
    },
}

impl VgaParams {
    pub fn seeded(variant: VgaVariant, visual_dim: usize, text_dim: usize, rng: &mut Rng) -> Self {
        match variant {
            VgaVariant::Soft => Self::Soft {
                w: rng.linear_init(&[text_dim, visual_dim]),
                b: Tensor::zeros(&[text_dim]),
            },
            VgaVariant::Fusion => Self::Fusion {
                w_info: rng.linear_init(&[text_dim, visual_dim + text_dim]),
                b_info: Tensor::zeros(&[text_dim]),
                w_gate: rng.linear_init(&[text_dim, visual_dim + text_dim]),
                b_gate: Tensor::zeros(&[text_dim]),
            },
            VgaVariant::Sim => Self::Sim {
                w_visual: rng.linear_init(&[text_dim, visual_dim]),
                b_visual: Tensor::zeros(&[text_dim]),
                w_text: rng.linear_init(&[text_dim, text_dim]),
                b_text: Tensor::zeros(&[text_dim]),
            },
        }
    }

    pub fn variant(&self) -> VgaVariant {
        match self {
            Self::Soft { .. } => VgaVariant::Soft,
            Self::Fusion { .. } => VgaVariant::Fusion,
            Self::Sim { .. } => VgaVariant::Sim,
        }
    }

    /// Produce the visually guided text vector.
    pub fn apply(&self, visual: &Tensor, text: &Tensor) -> Result<Tensor, ModelError> {
        match self {
            Self::Soft { w, b } => {
                let gate = activate(&matvec(w, visual)?.add(b)?, Activation::Sigmoid);
                Ok(gate.hadamard(text)?)
            }
            Self::Fusion {
                w_info,
                b_info,
                w_gate,
                b_gate,
            } => {
                let joint = concat_vec(&[visual, text])?;
                let info = matvec(w_info, &joint)?.add(b_info)?;
                let gate = activate(&matvec(w_gate, &joint)?.add(b_gate)?, Activation::Sigmoid);
                Ok(info.hadamard(&gate)?)
            }
            Self::Sim {
                w_visual,
                b_visual,
                w_text,
                b_text,
            } => {
                let fv = matvec(w_visual, visual)?.add(b_visual)?;
                let ft = matvec(w_text, text)?.add(b_text)?;
                let gate = sigmoid(cosine(&fv, &ft));
                Ok(ft.scale(gate))
            }
        }
    }
}

/// Cosine of two vectors; zero when either norm is degenerate.
pub fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na <= NORM_EPSILON || nb <= NORM_EPSILON {
        return 0.0;
    }
    a.dot(b).expect("cosine: shape mismatch") / (na * nb)
}

/// Dynamic weighted sum of the sentence and keyword branches. The gate is
/// a sigmoid of a linear map over the concatenated unit-normalized inputs;
/// with keywords absent the gate is forced fully open and the sentence
/// branch passes through bit-exactly.
pub fn dynamic_fuse(
    sentence: &Tensor,
    keywords: Option<&Tensor>,
    w_gate: &Tensor,
    b_gate: &Tensor,
) -> Result<Tensor, ModelError> {
    let Some(kw) = keywords else {
        return Ok(sentence.clone());
    };
    let joined = concat_vec(&[&l2_normalize(sentence, 0), &l2_normalize(kw, 0)])?;
    let gate = activate(&matvec(w_gate, &joined)?.add(b_gate)?, Activation::Sigmoid);
    let keep = gate.hadamard(sentence)?;
    let blend = gate.map(|g| 1.0 - g).hadamard(kw)?;
    Ok(keep.add(&blend)?)
}

/// Trainable projection heads: one per modality branch plus the fusion gate.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    /// joint_dim x visual_dim
    pub w_visual: Tensor,
    /// joint_dim x text_dim
    pub w_sentence: Tensor,
    /// joint_dim x text_dim
    pub w_keyword: Tensor,
    /// joint_dim x 2 joint_dim
    pub w_gate: Tensor,
    pub b_gate: Tensor,
}

impl ProjectionHeads {
    pub fn seeded(visual_dim: usize, text_dim: usize, joint_dim: usize, rng: &mut Rng) -> Self {
        Self {
            w_visual: rng.linear_init(&[joint_dim, visual_dim]),
            w_sentence: rng.linear_init(&[joint_dim, text_dim]),
            w_keyword: rng.linear_init(&[joint_dim, text_dim]),
            w_gate: rng.linear_init(&[joint_dim, 2 * joint_dim]),
            b_gate: Tensor::zeros(&[joint_dim]),
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.w_visual.shape()[0]
    }

    /// Project the text branches and fuse them into the final text vector.
    pub fn fuse_text(
        &self,
        sentence: &Tensor,
        keywords: Option<&Tensor>,
    ) -> Result<Tensor, ModelError> {
        let sp = matvec(&self.w_sentence, sentence)?;
        let kp = match keywords {
            Some(k) => Some(matvec(&self.w_keyword, k)?),
            None => None,
        };
        dynamic_fuse(&sp, kp.as_ref(), &self.w_gate, &self.b_gate)
    }
}

/// Scalar similarity in `[-1, 1]`: cosine of the projected visual vector
/// and the fused text vector (sum of the elementwise product of the
/// unit-normalized projections). Degenerate zero embeddings score 0.
pub fn similarity(
    heads: &ProjectionHeads,
    visual: &Tensor,
    fused_text: &Tensor,
) -> Result<f64, ModelError> {
    let a = l2_normalize(&matvec(&heads.w_visual, visual)?, 0);
    let b = l2_normalize(fused_text, 0);
    Ok(a.dot(&b)?)
}

/// Per-pair constants the heads operate on: the salient visual vector and
/// the visually guided text branches for one (image, text) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairContext {
    pub visual: Tensor,
    pub sentence: Tensor,
    pub keywords: Option<Tensor>,
}

/// Matched pair in the joint space; raw and unit-normalized copies.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub visual: Tensor,
    pub text: Tensor,
    pub visual_unit: Tensor,
    pub text_unit: Tensor,
}

impl ProjectionHeads {
    pub fn embed_pair(&self, ctx: &PairContext) -> Result<JointEmbedding, ModelError> {
        let visual = matvec(&self.w_visual, &ctx.visual)?;
        let text = self.fuse_text(&ctx.sentence, ctx.keywords.as_ref())?;
        let visual_unit = l2_normalize(&visual, 0);
        let text_unit = l2_normalize(&text, 0);
        Ok(JointEmbedding {
            visual,
            text,
            visual_unit,
            text_unit,
        })
    }

    pub fn score_pair(&self, ctx: &PairContext) -> Result<f64, ModelError> {
        let e = self.embed_pair(ctx)?;
        Ok(e.visual_unit.dot(&e.text_unit)?)
    }

    /// Accumulate `coef * d(score)/d(heads)` into `grads` for one pair.
    /// Upstream encoder outputs in the context are treated as constants;
    /// subgradients through degenerate zero norms are zero.
    pub fn score_backward(
        &self,
        ctx: &PairContext,
        coef: f64,
        grads: &mut HeadGrads,
    ) -> Result<(), ModelError> {
        // Forward intermediates.
        let a0 = matvec(&self.w_visual, &ctx.visual)?;
        let na = a0.norm();
        let a = if na > NORM_EPSILON {
            a0.scale(1.0 / na)
        } else {
            Tensor::zeros(a0.shape())
        };
        let sp = matvec(&self.w_sentence, &ctx.sentence)?;
        let kp = match &ctx.keywords {
            Some(k) => Some(matvec(&self.w_keyword, k)?),
            None => None,
        };

        struct FusionTrace {
            ns: Tensor,
            nk: Tensor,
            ns_norm: f64,
            nk_norm: f64,
            joined: Tensor,
            gate: Tensor,
            kp: Tensor,
        }
        let (fused, trace) = match &kp {
            Some(kp) => {
                let ns_norm = sp.norm();
                let nk_norm = kp.norm();
                let ns = if ns_norm > NORM_EPSILON {
                    sp.scale(1.0 / ns_norm)
                } else {
                    Tensor::zeros(sp.shape())
                };
                let nk = if nk_norm > NORM_EPSILON {
                    kp.scale(1.0 / nk_norm)
                } else {
                    Tensor::zeros(kp.shape())
                };
                let joined = concat_vec(&[&ns, &nk])?;
                let gate = activate(
                    &matvec(&self.w_gate, &joined)?.add(&self.b_gate)?,
                    Activation::Sigmoid,
                );
                let fused = gate
                    .hadamard(&sp)?
                    .add(&gate.map(|g| 1.0 - g).hadamard(kp)?)?;
                (
                    fused,
                    Some(FusionTrace {
                        ns,
                        nk,
                        ns_norm,
                        nk_norm,
                        joined,
                        gate,
                        kp: kp.clone(),
                    }),
                )
            }
            None => (sp.clone(), None),
        };
        let nf = fused.norm();
        let b = if nf > NORM_EPSILON {
            fused.scale(1.0 / nf)
        } else {
            Tensor::zeros(fused.shape())
        };
        let score = a.dot(&b)?;

        // d score / d a0 through the normalization: (b - score a) / |a0|.
        if na > NORM_EPSILON {
            let da0 = b.sub(&a.scale(score))?.scale(coef / na);
            grads.w_visual = grads.w_visual.add(&outer(&da0, &ctx.visual)?)?;
        }
        if nf <= NORM_EPSILON {
            return Ok(());
        }
        let dfused = a.sub(&b.scale(score))?.scale(1.0 / nf);

        match trace {
            None => {
                let dsp = dfused.scale(coef);
                grads.w_sentence = grads.w_sentence.add(&outer(&dsp, &ctx.sentence)?)?;
            }
            Some(t) => {
                let dgate = dfused.hadamard(&sp.sub(&t.kp)?)?;
                let dlogits = dgate.hadamard(&t.gate.map(|g| g * (1.0 - g)))?;
                grads.b_gate = grads.b_gate.add(&dlogits.scale(coef))?;
                grads.w_gate = grads
                    .w_gate
                    .add(&outer(&dlogits, &t.joined)?.scale(coef))?;

                let djoined = matvec_transpose(&self.w_gate, &dlogits)?;
                let d = sp.len();
                let du_s = Tensor::vector(djoined.data()[..d].to_vec());
                let du_k = Tensor::vector(djoined.data()[d..].to_vec());

                let mut dsp = dfused.hadamard(&t.gate)?;
                if t.ns_norm > NORM_EPSILON {
                    let through =
                        du_s.sub(&t.ns.scale(t.ns.dot(&du_s)?))?.scale(1.0 / t.ns_norm);
                    dsp = dsp.add(&through)?;
                }
                let mut dkp = dfused.hadamard(&t.gate.map(|g| 1.0 - g))?;
                if t.nk_norm > NORM_EPSILON {
                    let through =
                        du_k.sub(&t.nk.scale(t.nk.dot(&du_k)?))?.scale(1.0 / t.nk_norm);
                    dkp = dkp.add(&through)?;
                }
                grads.w_sentence = grads
                    .w_sentence
                    .add(&outer(&dsp, &ctx.sentence)?.scale(coef))?;
                grads.w_keyword = grads
                    .w_keyword
                    .add(&outer(&dkp, ctx.keywords.as_ref().unwrap())?.scale(coef))?;
            }
        }
        Ok(())
    }
}

/// Gradient accumulator mirroring [`ProjectionHeads`].
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub w_visual: Tensor,
    pub w_sentence: Tensor,
    pub w_keyword: Tensor,
    pub w_gate: Tensor,
    pub b_gate: Tensor,
}

impl HeadGrads {
    pub fn zeros_like(heads: &ProjectionHeads) -> Self {
        Self {
            w_visual: Tensor::zeros(heads.w_visual.shape()),
            w_sentence: Tensor::zeros(heads.w_sentence.shape()),
            w_keyword: Tensor::zeros(heads.w_keyword.shape()),
            w_gate: Tensor::zeros(heads.w_gate.shape()),
            b_gate: Tensor::zeros(heads.b_gate.shape()),
        }
    }

    pub fn parts(&self) -> [&Tensor; 5] {
        [
            &self.w_visual,
            &self.w_sentence,
            &self.w_keyword,
            &self.w_gate,
            &self.b_gate,
        ]
    }
}

/// Model dimensions. `compact` is the desk-scale default; `full` mirrors
/// the published configuration (512 visual/hidden, 300 word embedding).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_size: usize,
    pub image_channels: usize,
    pub stage_channels: [usize; 5],
    pub fuse_channels: usize,
    pub filter_channels: usize,
    pub visual_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: usize,
    pub joint_dim: usize,
}

impl ModelDims {
    pub fn compact() -> Self {
        Self {
            input_size: 256,
            image_channels: 3,
            stage_channels: [4, 8, 16, 32, 64],
            fuse_channels: 16,
            filter_channels: 8,
            visual_dim: 32,
            embed_dim: 32,
            hidden_dim: 32,
            mlp_hidden: 32,
            joint_dim: 32,
        }
    }

    pub fn full() -> Self {
        Self {
            input_size: 256,
            image_channels: 3,
            stage_channels: [16, 32, 64, 128, 256],
            fuse_channels: 64,
            filter_channels: 16,
            visual_dim: 512,
            embed_dim: 300,
            hidden_dim: 512,
            mlp_hidden: 512,
            joint_dim: 512,
        }
    }

    /// Tiny dimensions for unit tests.
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            image_channels: 3,
            stage_channels: [2, 3, 4, 5, 6],
            fuse_channels: 4,
            filter_channels: 3,
            visual_dim: 8,
            embed_dim: 6,
            hidden_dim: 8,
            mlp_hidden: 8,
            joint_dim: 8,
        }
    }

    /// Spatial extent of the deep fused field (after four halvings).
    pub fn field_extent(&self) -> usize {
        let mut e = self.input_size;
        for _ in 0..4 {
            e = e.div_ceil(2);
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: VgaVariant,
    pub dims: ModelDims,
    pub seed: u64,
}

/// Text input for one query: a sentence plus optional keyword phrases.
#[derive(Clone, Debug, PartialEq)]
pub struct TextQuery {
    pub sentence: TokenSeq,
    pub keywords: Vec<TokenSeq>,
}

impl TextQuery {
    pub fn new(sentence: TokenSeq, keywords: Vec<TokenSeq>) -> Self {
        Self { sentence, keywords }
    }

    pub fn sentence_only(sentence: TokenSeq) -> Self {
        Self {
            sentence,
            keywords: Vec::new(),
        }
    }

    /// Keyword-only retrieval: the phrases are joined into a pseudo-sentence
    /// for the sentence branch and kept as phrases for the keyword branch.
    pub fn keywords_only(phrases: Vec<TokenSeq>) -> Self {
        let mut joined = Vec::new();
        for p in &phrases {
            joined.extend(p.tokens().iter().cloned());
        }
        Self {
            sentence: TokenSeq::from_tokens(joined),
            keywords: phrases,
        }
    }
}

/// Encoded text: the sentence global vector and, when keyword phrases were
/// supplied, the keyword global vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub sentence: Tensor,
    pub keywords: Option<Tensor>,
}

/// The full matching model. Parameters are immutable during inference;
/// training mutates only the projection heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub embedding: EmbeddingTable,
    pub gru: BiGruParams,
    pub keyword_mlp: MlpParams,
    pub extractor: ExtractorParams,
    pub mvsa: MvsaParams,
    pub vga: VgaParams,
    pub heads: ProjectionHeads,
}

impl Model {
    /// Deterministically initialize every component from the config seed.
    /// Each component draws from its own derived stream, so layouts do not
    /// shift each other.
    pub fn seeded(config: ModelConfig, vocab: Vocabulary) -> Self {
        let dims = config.dims;
        let base = Rng::new(config.seed);
        let embedding = EmbeddingTable::seeded(&vocab, dims.embed_dim, &mut base.derive(1));
        let gru = BiGruParams::seeded(dims.embed_dim, dims.hidden_dim, &mut base.derive(2));
        let keyword_mlp = MlpParams::seeded(
            dims.hidden_dim,
            dims.mlp_hidden,
            dims.hidden_dim,
            &mut base.derive(3),
        );
        let extractor = ExtractorParams::seeded(
            dims.image_channels,
            &dims.stage_channels,
            dims.visual_dim,
            &mut base.derive(4),
        );
        let field = dims.field_extent();
        let plan = MvsaPlan::for_pyramid(
            &dims.stage_channels,
            (field, field),
            dims.fuse_channels,
            dims.filter_channels,
            dims.visual_dim,
        );
        let mvsa = MvsaParams::seeded(&plan, &mut base.derive(5));
        let vga = VgaParams::seeded(
            config.variant,
            dims.visual_dim,
            dims.hidden_dim,
            &mut base.derive(6),
        );
        let heads = ProjectionHeads::seeded(
            dims.visual_dim,
            dims.hidden_dim,
            dims.joint_dim,
            &mut base.derive(7),
        );
        Self {
            config,
            vocab,
            embedding,
            gru,
            keyword_mlp,
            extractor,
            mvsa,
            vga,
            heads,
        }
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<SalientVisual, ModelError> {
        let pyramid = self.extractor.extract(image)?;
        Ok(salient_forward(&pyramid, &self.mvsa)?)
    }

    pub fn encode_pyramid(&self, pyramid: &FeaturePyramid) -> Result<SalientVisual, ModelError> {
        Ok(salient_forward(pyramid, &self.mvsa)?)
    }

    pub fn encode_text(&self, query: &TextQuery) -> Result<TextFeatures, ModelError> {
        let sentence = bigru_encode(&query.sentence, &self.vocab, &self.embedding, &self.gru)?
            .pooled;
        let keywords = if query.keywords.is_empty() {
            None
        } else {
            Some(
                encode_keywords(
                    &query.keywords,
                    &self.vocab,
                    &self.embedding,
                    &self.gru,
                    &self.keyword_mlp,
                )?
                .pooled,
            )
        };
        Ok(TextFeatures { sentence, keywords })
    }

    /// Guide the text branches with this image's salient features.
    pub fn pair_context(
        &self,
        visual: &SalientVisual,
        text: &TextFeatures,
    ) -> Result<PairContext, ModelError> {
        let sentence = self.vga.apply(&visual.feature, &text.sentence)?;
        let keywords = match &text.keywords {
            Some(k) => Some(self.vga.apply(&visual.feature, k)?),
            None => None,
        };
        Ok(PairContext {
            visual: visual.feature.clone(),
            sentence,
            keywords,
        })
    }

    /// Full pipeline for one (image, text) pair.
    pub fn encode_pair(
        &self,
        image: &Tensor,
        query: &TextQuery,
    ) -> Result<JointEmbedding, ModelError> {
        let visual = self.encode_image(image)?;
        let text = self.encode_text(query)?;
        let ctx = self.pair_context(&visual, &text)?;
        self.heads.embed_pair(&ctx)
    }

    pub fn score(&self, visual: &SalientVisual, text: &TextFeatures) -> Result<f64, ModelError> {
        let ctx = self.pair_context(visual, text)?;
        self.heads.score_pair(&ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use crate::text::tokenize;

    #[test]
    fn soft_attention_zero_params_halves_text() {
        let vga = VgaParams::Soft {
            w: Tensor::zeros(&[3, 4]),
            b: Tensor::zeros(&[3]),
        };
        let v = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let t = Tensor::vector(vec![2.0, -4.0, 6.0]);
        let out = vga.apply(&v, &t).unwrap();
        assert_eq!(out.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn soft_attention_zero_text_stays_zero_and_gates() {
        let mut rng = Rng::new(4);
        let vga = VgaParams::seeded(VgaVariant::Soft, 4, 3, &mut rng);
        let v = rng.tensor(&[4], 1.0);
        let zero = Tensor::zeros(&[3]);
        assert!(vga.apply(&v, &zero).unwrap().data().iter().all(|&x| x == 0.0));
        let t = rng.tensor(&[3], 1.0);
        let out = vga.apply(&v, &t).unwrap();
        for (o, ti) in out.data().iter().zip(t.data()) {
            assert!(o.abs() < ti.abs());
        }
    }

    #[test]
    fn fusion_attention_zero_layers_give_zero() {
        let vga = VgaParams::Fusion {
            w_info: Tensor::zeros(&[3, 7]),
            b_info: Tensor::zeros(&[3]),
            w_gate: Tensor::zeros(&[3, 7]),
            b_gate: Tensor::zeros(&[3]),
        };
        let v = Tensor::vector(vec![1.0; 4]);
        let t = Tensor::vector(vec![1.0; 3]);
        assert!(vga.apply(&v, &t).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fusion_attention_saturated_gate() {
        let mut rng = Rng::new(5);
        let VgaParams::Fusion {
            w_info,
            b_info,
            w_gate,
            ..
        } = VgaParams::seeded(VgaVariant::Fusion, 4, 3, &mut rng)
        else {
            unreachable!()
        };
        let vga = VgaParams::Fusion {
            w_info,
            b_info,
            w_gate,
            b_gate: Tensor::filled(&[3], -20.0),
        };
        let v = rng.tensor(&[4], 1.0);
        let t = rng.tensor(&[3], 1.0);
        let out = vga.apply(&v, &t).unwrap();
        assert!(out.data().iter().all(|&x| x.abs() < 1e-8));
    }

    #[test]
    fn fusion_attention_matches_hand_composition() {
        let mut rng = Rng::new(6);
        let vga = VgaParams::seeded(VgaVariant::Fusion, 3, 2, &mut rng);
        let v = rng.tensor(&[3], 1.0);
        let t = rng.tensor(&[2], 1.0);
        let out = vga.apply(&v, &t).unwrap();
        let VgaParams::Fusion {
            w_info,
            b_info,
            w_gate,
            b_gate,
        } = &vga
        else {
            unreachable!()
        };
        let joint = concat_vec(&[&v, &t]).unwrap();
        let info = matvec(w_info, &joint).unwrap().add(b_info).unwrap();
        let gate = activate(
            &matvec(w_gate, &joint).unwrap().add(b_gate).unwrap(),
            Activation::Sigmoid,
        );
        let want = info.hadamard(&gate).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn sim_with_identity(dim: usize) -> VgaParams {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.set(&[i, i], 1.0);
        }
        VgaParams::Sim {
            w_visual: w.clone(),
            b_visual: Tensor::zeros(&[dim]),
            w_text: w,
            b_text: Tensor::zeros(&[dim]),
        }
    }

    #[test]
    fn sim_attention_orthogonal_halves() {
        let vga = sim_with_identity(2);
        let v = Tensor::vector(vec![1.0, 0.0]);
        let t = Tensor::vector(vec![0.0, 2.0]);
        let out = vga.apply(&v, &t).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }

    #[test]
    fn sim_attention_aligned_gate() {
        let vga = sim_with_identity(2);
        let v = Tensor::vector(vec![1.0, 1.0]);
        let out = vga.apply(&v, &v).unwrap();
        let gate = 0.7310585786300049; // sigmoid(1)
        assert!((out.data()[0] - gate).abs() < 1e-12);
    }

    #[test]
    fn sim_attention_zero_text_is_zero() {
        let vga = sim_with_identity(2);
        let v = Tensor::vector(vec![1.0, 1.0]);
        let zero = Tensor::zeros(&[2]);
        assert!(vga.apply(&v, &zero).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dynamic_fuse_zero_gate_averages() {
        let s = Tensor::vector(vec![2.0, 4.0]);
        let k = Tensor::vector(vec![0.0, 2.0]);
        let out = dynamic_fuse(
            &s,
            Some(&k),
            &Tensor::zeros(&[2, 4]),
            &Tensor::zeros(&[2]),
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, 3.0]);
    }

    #[test]
    fn dynamic_fuse_fixed_point_and_convexity() {
        let mut rng = Rng::new(8);
        let w = rng.tensor(&[3, 6], 1.0);
        let b = rng.tensor(&[3], 1.0);
        let s = rng.tensor(&[3], 2.0);
        assert_eq!(dynamic_fuse(&s, Some(&s), &w, &b).unwrap(), s);

        for seed in 0..50 {
            let mut r = Rng::new(seed);
            let s = r.tensor(&[3], 2.0);
            let k = r.tensor(&[3], 2.0);
            let out = dynamic_fuse(&s, Some(&k), &w, &b).unwrap();
            for i in 0..3 {
                let (lo, hi) = (s.data()[i].min(k.data()[i]), s.data()[i].max(k.data()[i]));
                assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn dynamic_fuse_absent_keywords_is_bit_exact() {
        let mut rng = Rng::new(9);
        let s = rng.tensor(&[5], 1.0);
        let w = rng.tensor(&[5, 10], 1.0);
        let b = rng.tensor(&[5], 1.0);
        let out = dynamic_fuse(&s, None, &w, &b).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn similarity_reference_points() {
        let mut rng = Rng::new(10);
        let heads = ProjectionHeads::seeded(3, 3, 3, &mut rng);
        // Bypass the visual projection with an identity head.
        let mut id = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            id.set(&[i, i], 1.0);
        }
        let heads = ProjectionHeads {
            w_visual: id,
            ..heads
        };
        let e1 = Tensor::vector(vec![2.0, 0.0, 0.0]);
        let e2 = Tensor::vector(vec![0.0, 3.0, 0.0]);
        assert!((similarity(&heads, &e1, &e1).unwrap() - 1.0).abs() < 1e-12);
        assert!(similarity(&heads, &e1, &e2).unwrap().abs() < 1e-12);
        assert!((similarity(&heads, &e1, &e1.scale(-1.0)).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_scale_invariant() {
        let mut rng = Rng::new(11);
        let heads = ProjectionHeads::seeded(4, 4, 4, &mut rng);
        let v = rng.tensor(&[4], 1.0);
        let t = rng.tensor(&[4], 1.0);
        let base = similarity(&heads, &v, &t).unwrap();
        for c in [0.5, 3.0, 1e6] {
            let scaled = similarity(&heads, &v.scale(c), &t).unwrap();
            assert!((scaled - base).abs() < 1e-12);
            let scaled_t = similarity(&heads, &v, &t.scale(c)).unwrap();
            assert!((scaled_t - base).abs() < 1e-12);
        }
    }

    fn random_context(rng: &mut Rng, dv: usize, dt: usize, with_keywords: bool) -> PairContext {
        PairContext {
            visual: rng.tensor(&[dv], 1.0),
            sentence: rng.tensor(&[dt], 1.0),
            keywords: with_keywords.then(|| rng.tensor(&[dt], 1.0)),
        }
    }

    /// Analytic gradient of the raw pair score against central differences.
    #[test]
    fn score_backward_matches_finite_differences() {
        for (seed, with_kw) in [(1u64, true), (2, true), (3, false)] {
            let mut rng = Rng::new(seed);
            let heads = ProjectionHeads::seeded(5, 4, 6, &mut rng);
            let ctx = random_context(&mut rng, 5, 4, with_kw);

            let mut grads = HeadGrads::zeros_like(&heads);
            heads.score_backward(&ctx, 1.0, &mut grads).unwrap();

            // Pack all parameters into one vector for the checker.
            let parts = [
                heads.w_visual.clone(),
                heads.w_sentence.clone(),
                heads.w_keyword.clone(),
                heads.w_gate.clone(),
                heads.b_gate.clone(),
            ];
            let flat: Vec<f64> = parts.iter().flat_map(|t| t.data().to_vec()).collect();
            let shapes: Vec<Vec<usize>> = parts.iter().map(|t| t.shape().to_vec()).collect();
            let rebuild = |v: &Tensor| {
                let mut offset = 0;
                let mut out = Vec::new();
                for s in &shapes {
                    let n: usize = s.iter().product();
                    out.push(
                        Tensor::new(s.clone(), v.data()[offset..offset + n].to_vec()).unwrap(),
                    );
                    offset += n;
                }
                ProjectionHeads {
                    w_visual: out[0].clone(),
                    w_sentence: out[1].clone(),
                    w_keyword: out[2].clone(),
                    w_gate: out[3].clone(),
                    b_gate: out[4].clone(),
                }
            };
            let fd = finite_diff_grad(
                |v| rebuild(v).score_pair(&ctx).unwrap(),
                &Tensor::vector(flat),
                1e-6,
            )
            .unwrap();
            let analytic: Vec<f64> = grads.parts().iter().flat_map(|t| t.data().to_vec()).collect();
            let max_fd = fd.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (i, (a, n)) in analytic.iter().zip(fd.data()).enumerate() {
                let err = (a - n).abs() / max_fd.max(1.0);
                assert!(err < 1e-6, "seed {seed} kw {with_kw} param {i}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn end_to_end_pair_is_deterministic() {
        let config = ModelConfig {
            variant: VgaVariant::Fusion,
            dims: ModelDims::tiny(),
            seed: 99,
        };
        let vocab = Vocabulary::from_sequences(&[tokenize("a red square on the green field")]);
        let model = Model::seeded(config, vocab);
        let mut rng = Rng::new(123);
        let image = rng.tensor(&[3, 32, 32], 0.5);
        let query = TextQuery::new(
            tokenize("a red square on the field"),
            vec![tokenize("red-square")],
        );
        let a = model.encode_pair(&image, &query).unwrap();
        let b = model.encode_pair(&image, &query).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.visual.len(), model.config.dims.joint_dim);
        assert_eq!(a.text.len(), model.config.dims.joint_dim);
        let unit = a.visual_unit.norm();
        assert!((unit - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sentence_only_context_fuses_to_sentence_branch() {
        let mut rng = Rng::new(14);
        let heads = ProjectionHeads::seeded(4, 4, 5, &mut rng);
        let ctx = random_context(&mut rng, 4, 4, false);
        let e = heads.embed_pair(&ctx).unwrap();
        let want = matvec(&heads.w_sentence, &ctx.sentence).unwrap();
        assert_eq!(e.text, want);
    }

    #[test]
    fn keywords_only_query_routes_through_sentence_branch() {
        let q = TextQuery::keywords_only(vec![tokenize("red-roof"), tokenize("-port")]);
        assert_eq!(q.sentence.tokens(), ["red", "roof", "port"]);
        assert_eq!(q.keywords.len(), 2);
    }
}
