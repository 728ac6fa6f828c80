//! Visual side of the pipeline: a five-stage feature pyramid (seeded
//! convolutional extractor or feature-file ingestion) and the salient
//! attention stage that turns it into the final image vector.

pub mod mvsa;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{
    activate, avg_pool2, conv2d, matvec, read_tensor, write_tensor, Activation, Tensor,
    TensorError,
};

#[derive(Debug, Error)]
pub enum VisualError {
    #[error("bad image input: {0}")]
    BadImage(String),
    #[error("invalid pyramid: {0}")]
    BadPyramid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("feature bundle i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt feature bundle: {0}")]
    CorruptBundle(String),
}

pub const PYRAMID_STAGES: usize = 5;

/// Per-stage feature maps with halving spatial extents, plus the global
/// image vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    stages: Vec<Tensor>,
    global: Tensor,
}

impl FeaturePyramid {
    pub fn new(stages: Vec<Tensor>, global: Tensor) -> Result<Self, VisualError> {
        if stages.len() != PYRAMID_STAGES {
            return Err(VisualError::BadPyramid(format!(
                "expected {PYRAMID_STAGES} stages, got {}",
                stages.len()
            )));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.rank() != 3 {
                return Err(VisualError::BadPyramid(format!(
                    "stage {i} is not C x H x W: {:?}",
                    s.shape()
                )));
            }
        }
        for i in 1..stages.len() {
            let (ph, pw) = (stages[i - 1].shape()[1], stages[i - 1].shape()[2]);
            let (h, w) = (stages[i].shape()[1], stages[i].shape()[2]);
            if h != ph.div_ceil(2) || w != pw.div_ceil(2) {
                return Err(VisualError::BadPyramid(format!(
                    "stage {i} extent {h}x{w} does not halve {ph}x{pw}"
                )));
            }
        }
        if global.rank() != 1 {
            return Err(VisualError::BadPyramid(format!(
                "global vector has shape {:?}",
                global.shape()
            )));
        }
        Ok(Self { stages, global })
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    pub fn stage(&self, i: usize) -> &Tensor {
        &self.stages[i]
    }

    pub fn global(&self) -> &Tensor {
        &self.global
    }
}

/// Seeded five-stage extractor: each stage is a same-padding 3x3
/// convolution, PReLU, then 2x2 average pooling; the global vector is the
/// spatial mean of the last stage pushed through a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub stage_kernels: Vec<Tensor>,
    pub stage_biases: Vec<Tensor>,
    pub stage_slopes: Vec<f64>,
    pub global_proj: Tensor,
    pub global_bias: Tensor,
}

pub const DEFAULT_PRELU_SLOPE: f64 = 0.25;

impl ExtractorParams {
    pub fn seeded(input_channels: usize, channels: &[usize; 5], global_dim: usize, rng: &mut Rng) -> Self {
        let mut stage_kernels = Vec::new();
        let mut stage_biases = Vec::new();
        let mut prev = input_channels;
        for &c in channels {
            stage_kernels.push(rng.linear_init(&[c, prev, 3, 3]));
            stage_biases.push(Tensor::zeros(&[c]));
            prev = c;
        }
        Self {
            stage_kernels,
            stage_biases,
            stage_slopes: vec![DEFAULT_PRELU_SLOPE; PYRAMID_STAGES],
            global_proj: rng.linear_init(&[global_dim, channels[4]]),
            global_bias: Tensor::zeros(&[global_dim]),
        }
    }

    pub fn global_dim(&self) -> usize {
        self.global_proj.shape()[0]
    }

    pub fn extract(&self, image: &Tensor) -> Result<FeaturePyramid, VisualError> {
        if image.rank() != 3 {
            return Err(VisualError::BadImage(format!(
                "expected C x H x W image, got {:?}",
                image.shape()
            )));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(VisualError::BadImage(format!(
                "spatial extents {h}x{w} must be divisible by 32"
            )));
        }
        if image.shape()[0] != self.stage_kernels[0].shape()[1] {
            return Err(VisualError::BadImage(format!(
                "image has {} channels, extractor expects {}",
                image.shape()[0],
                self.stage_kernels[0].shape()[1]
            )));
        }
        let mut current = image.clone();
        let mut stages = Vec::with_capacity(PYRAMID_STAGES);
        for i in 0..PYRAMID_STAGES {
            let conv = conv2d(&current, &self.stage_kernels[i], Some(&self.stage_biases[i]))?;
            let act = activate(&conv, Activation::PRelu(self.stage_slopes[i]));
            current = avg_pool2(&act)?;
            stages.push(current.clone());
        }
        let last = &stages[PYRAMID_STAGES - 1];
        let channels = last.shape()[0];
        let hw = (last.shape()[1] * last.shape()[2]) as f64;
        let mut pooled = vec![0.0; channels];
        for (c, slot) in pooled.iter_mut().enumerate() {
            let plane = &last.data()[c * last.shape()[1] * last.shape()[2]..]
                [..last.shape()[1] * last.shape()[2]];
            *slot = plane.iter().sum::<f64>() / hw;
        }
        let global = matvec(&self.global_proj, &Tensor::vector(pooled))?.add(&self.global_bias)?;
        FeaturePyramid::new(stages, global)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    stages: Vec<Vec<usize>>,
    global: Vec<usize>,
}

const BUNDLE_MAGIC: &[u8; 4] = b"XFBN";

/// Feature bundle: a JSON header with stage shapes followed by the stage
/// tensors and the global vector, all in the XTEN framing.
pub fn write_feature_bundle<W: Write>(w: &mut W, p: &FeaturePyramid) -> Result<(), VisualError> {
    let header = BundleHeader {
        stages: p.stages.iter().map(|s| s.shape().to_vec()).collect(),
        global: p.global.shape().to_vec(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| VisualError::CorruptBundle(format!("header encode: {e}")))?;
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for s in &p.stages {
        write_tensor(w, s)?;
    }
    write_tensor(w, &p.global)?;
    Ok(())
}

pub fn read_feature_bundle<R: Read>(r: &mut R) -> Result<FeaturePyramid, VisualError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| VisualError::CorruptBundle(format!("missing magic: {e}")))?;
    if &magic != BUNDLE_MAGIC {
        return Err(VisualError::CorruptBundle("bad magic".into()));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)
        .map_err(|e| VisualError::CorruptBundle(format!("truncated header length: {e}")))?;
    let header_len = u64::from_le_bytes(b8) as usize;
    if header_len > 1 << 20 {
        return Err(VisualError::CorruptBundle("implausible header length".into()));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|e| VisualError::CorruptBundle(format!("truncated header: {e}")))?;
    let header: BundleHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| VisualError::CorruptBundle(format!("header decode: {e}")))?;
    let mut stages = Vec::new();
    for want in &header.stages {
        let t = read_tensor(r).map_err(|e| VisualError::CorruptBundle(e.to_string()))?;
        if t.shape() != want.as_slice() {
            return Err(VisualError::CorruptBundle(format!(
                "stage shape {:?} does not match header {:?}",
                t.shape(),
                want
            )));
        }
        stages.push(t);
    }
    let global = read_tensor(r).map_err(|e| VisualError::CorruptBundle(e.to_string()))?;
    if global.shape() != header.global.as_slice() {
        return Err(VisualError::CorruptBundle("global shape mismatch".into()));
    }
    FeaturePyramid::new(stages, global)
}

pub fn save_feature_bundle(path: &Path, p: &FeaturePyramid) -> Result<(), VisualError> {
    let mut f = std::fs::File::create(path)?;
    write_feature_bundle(&mut f, p)
}

pub fn load_feature_bundle(path: &Path) -> Result<FeaturePyramid, VisualError> {
    let mut f = std::fs::File::open(path)?;
    read_feature_bundle(&mut f)
}
