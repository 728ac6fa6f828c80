//! Model checkpointing: a JSON manifest (version, variant, dimensions,
//! seed, vocabulary, tensor names, optional split) followed by every
//! parameter tensor in XTEN framing. Loading then saving reproduces the
//! file byte for byte.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SplitIndices;
use crate::fusion::{Model, ModelConfig, ModelDims, ProjectionHeads, VgaParams, VgaVariant};
use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};
use crate::text::gru::{BiGruParams, GruDirection, MlpParams};
use crate::text::{EmbeddingTable, Vocabulary};
use crate::visual::mvsa::MvsaParams;
use crate::visual::ExtractorParams;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"XCKP";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    VariantMismatch {
        found: VgaVariant,
        expected: VgaVariant,
    },
    #[error("checkpoint is missing tensor '{0}'")]
    MissingTensor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    variant: VgaVariant,
    dims: ModelDims,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitIndices>,
    vocab: Vec<String>,
    tensors: Vec<String>,
}

fn named_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = Vec::new();
    let mut push = |name: &str, t: &Tensor| out.push((name.to_string(), t.clone()));

    push("embedding.table", model.embedding.tensor());
    for (prefix, dir) in [
        ("gru.forward", &model.gru.forward),
        ("gru.backward", &model.gru.backward),
    ] {
        push(&format!("{prefix}.w_update"), &dir.w_update);
        push(&format!("{prefix}.u_update"), &dir.u_update);
        push(&format!("{prefix}.b_update"), &dir.b_update);
        push(&format!("{prefix}.w_reset"), &dir.w_reset);
        push(&format!("{prefix}.u_reset"), &dir.u_reset);
        push(&format!("{prefix}.b_reset"), &dir.b_reset);
        push(&format!("{prefix}.w_cand"), &dir.w_cand);
        push(&format!("{prefix}.u_cand"), &dir.u_cand);
        push(&format!("{prefix}.b_cand"), &dir.b_cand);
    }
    push("keyword_mlp.w_hidden", &model.keyword_mlp.w_hidden);
    push("keyword_mlp.b_hidden", &model.keyword_mlp.b_hidden);
    push("keyword_mlp.w_out", &model.keyword_mlp.w_out);
    push("keyword_mlp.b_out", &model.keyword_mlp.b_out);
    for (i, (k, b)) in model
        .extractor
        .stage_kernels
        .iter()
        .zip(&model.extractor.stage_biases)
        .enumerate()
    {
        push(&format!("extractor.stage{i}.kernels"), k);
        push(&format!("extractor.stage{i}.bias"), b);
    }
    push(
        "extractor.slopes",
        &Tensor::vector(model.extractor.stage_slopes.clone()),
    );
    push("extractor.global_proj", &model.extractor.global_proj);
    push("extractor.global_bias", &model.extractor.global_bias);

    push("mvsa.low_kernels", &model.mvsa.low_kernels);
    push("mvsa.low_bias", &model.mvsa.low_bias);
    push("mvsa.high_kernels", &model.mvsa.high_kernels);
    push("mvsa.high_bias", &model.mvsa.high_bias);
    push(
        "mvsa.slopes",
        &Tensor::vector(vec![model.mvsa.low_slope, model.mvsa.high_slope]),
    );
    push("mvsa.info_kernels", &model.mvsa.info_kernels);
    push("mvsa.info_bias", &model.mvsa.info_bias);
    push("mvsa.gate_kernels", &model.mvsa.gate_kernels);
    push("mvsa.gate_bias", &model.mvsa.gate_bias);
    push("mvsa.mask_proj", &model.mvsa.mask_proj);
    push("mvsa.mask_bias", &model.mvsa.mask_bias);

    match &model.vga {
        VgaParams::Soft { w, b } => {
            push("vga.w", w);
            push("vga.b", b);
        }
        VgaParams::Fusion {
            w_info,
            b_info,
            w_gate,
            b_gate,
        } => {
            push("vga.w_info", w_info);
            push("vga.b_info", b_info);
            push("vga.w_gate", w_gate);
            push("vga.b_gate", b_gate);
        }
        VgaParams::Sim {
            w_visual,
            b_visual,
            w_text,
            b_text,
        } => {
            push("vga.w_visual", w_visual);
            push("vga.b_visual", b_visual);
            push("vga.w_text", w_text);
            push("vga.b_text", b_text);
        }
    }
    push("heads.w_visual", &model.heads.w_visual);
    push("heads.w_sentence", &model.heads.w_sentence);
    push("heads.w_keyword", &model.heads.w_keyword);
    push("heads.w_gate", &model.heads.w_gate);
    push("heads.b_gate", &model.heads.b_gate);
    out
}

/// Save a model, optionally recording the split its training run used.
pub fn save_model(path: &Path, model: &Model, split: Option<&SplitIndices>) -> Result<(), CheckpointError> {
    let io = |source: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let tensors = named_tensors(model);
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        variant: model.config.variant,
        dims: model.config.dims,
        seed: model.config.seed,
        split: split.cloned(),
        vocab: model.vocab.words().to_vec(),
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| CheckpointError::Corrupt(format!("manifest encode: {e}")))?;
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(io)?;
    f.write_all(&manifest_bytes).map_err(io)?;
    for (_, t) in &tensors {
        write_tensor(&mut f, t)?;
    }
    Ok(())
}

/// Load a model; `expect_variant` guards callers configured for one
/// specific attention mechanism. Returns the model and the recorded split,
/// when present.
pub fn load_model(
    path: &Path,
    expect_variant: Option<VgaVariant>,
) -> Result<(Model, Option<SplitIndices>), CheckpointError> {
    let io = |source: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::open(path).map_err(io)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|e| CheckpointError::Corrupt(format!("missing magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b8)
        .map_err(|e| CheckpointError::Corrupt(format!("truncated manifest length: {e}")))?;
    let manifest_len = u64::from_le_bytes(b8) as usize;
    if manifest_len > 1 << 24 {
        return Err(CheckpointError::Corrupt("implausible manifest length".into()));
    }
    let mut manifest_bytes = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_bytes)
        .map_err(|e| CheckpointError::Corrupt(format!("truncated manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CheckpointError::Corrupt(format!("manifest decode: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if let Some(expected) = expect_variant {
        if manifest.variant != expected {
            return Err(CheckpointError::VariantMismatch {
                found: manifest.variant,
                expected,
            });
        }
    }
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for name in &manifest.tensors {
        let t = read_tensor(&mut f).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.insert(name.clone(), t);
    }
    let mut take = |name: &str| -> Result<Tensor, CheckpointError> {
        tensors
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    };

    let embedding = EmbeddingTable::from_tensor(take("embedding.table")?)?;
    let mut direction = |prefix: &str| -> Result<GruDirection, CheckpointError> {
        Ok(GruDirection {
            w_update: take(&format!("{prefix}.w_update"))?,
            u_update: take(&format!("{prefix}.u_update"))?,
            b_update: take(&format!("{prefix}.b_update"))?,
            w_reset: take(&format!("{prefix}.w_reset"))?,
            u_reset: take(&format!("{prefix}.u_reset"))?,
            b_reset: take(&format!("{prefix}.b_reset"))?,
            w_cand: take(&format!("{prefix}.w_cand"))?,
            u_cand: take(&format!("{prefix}.u_cand"))?,
            b_cand: take(&format!("{prefix}.b_cand"))?,
        })
    };
    let gru = BiGruParams {
        forward: direction("gru.forward")?,
        backward: direction("gru.backward")?,
    };
    let keyword_mlp = MlpParams {
        w_hidden: take("keyword_mlp.w_hidden")?,
        b_hidden: take("keyword_mlp.b_hidden")?,
        w_out: take("keyword_mlp.w_out")?,
        b_out: take("keyword_mlp.b_out")?,
    };
    let mut stage_kernels = Vec::new();
    let mut stage_biases = Vec::new();
    for i in 0..5 {
        stage_kernels.push(take(&format!("extractor.stage{i}.kernels"))?);
        stage_biases.push(take(&format!("extractor.stage{i}.bias"))?);
    }
    let extractor = ExtractorParams {
        stage_kernels,
        stage_biases,
        stage_slopes: take("extractor.slopes")?.into_data(),
        global_proj: take("extractor.global_proj")?,
        global_bias: take("extractor.global_bias")?,
    };
    let mvsa_slopes = take("mvsa.slopes")?.into_data();
    if mvsa_slopes.len() != 2 {
        return Err(CheckpointError::Corrupt("mvsa slope vector".into()));
    }
    let mvsa = MvsaParams {
        low_kernels: take("mvsa.low_kernels")?,
        low_bias: take("mvsa.low_bias")?,
        low_slope: mvsa_slopes[0],
        high_kernels: take("mvsa.high_kernels")?,
        high_bias: take("mvsa.high_bias")?,
        high_slope: mvsa_slopes[1],
        info_kernels: take("mvsa.info_kernels")?,
        info_bias: take("mvsa.info_bias")?,
        gate_kernels: take("mvsa.gate_kernels")?,
        gate_bias: take("mvsa.gate_bias")?,
        mask_proj: take("mvsa.mask_proj")?,
        mask_bias: take("mvsa.mask_bias")?,
    };
    let vga = match manifest.variant {
        VgaVariant::Soft => VgaParams::Soft {
            w: take("vga.w")?,
            b: take("vga.b")?,
        },
        VgaVariant::Fusion => VgaParams::Fusion {
            w_info: take("vga.w_info")?,
            b_info: take("vga.b_info")?,
            w_gate: take("vga.w_gate")?,
            b_gate: take("vga.b_gate")?,
        },
        VgaVariant::Sim => VgaParams::Sim {
            w_visual: take("vga.w_visual")?,
            b_visual: take("vga.b_visual")?,
            w_text: take("vga.w_text")?,
            b_text: take("vga.b_text")?,
        },
    };
    let heads = ProjectionHeads {
        w_visual: take("heads.w_visual")?,
        w_sentence: take("heads.w_sentence")?,
        w_keyword: take("heads.w_keyword")?,
        w_gate: take("heads.w_gate")?,
        b_gate: take("heads.b_gate")?,
    };
    let model = Model {
        config: ModelConfig {
            variant: manifest.variant,
            dims: manifest.dims,
            seed: manifest.seed,
        },
        vocab: Vocabulary::from_words(manifest.vocab),
        embedding,
        gru,
        keyword_mlp,
        extractor,
        mvsa,
        vga,
        heads,
    };
    Ok((model, manifest.split))
}
