//! Salient visual attention: multiscale fusion of the pyramid, redundant
//! feature filtering, and the sigmoid mask applied to the global vector.

use crate::rng::Rng;
use crate::tensor::{
    activate, add_broadcast_channel, avg_pool2, concat_channels, conv2d, l2_normalize, matvec,
    mean_channel, resize_nearest, Activation, Tensor,
};
use crate::visual::{FeaturePyramid, VisualError, DEFAULT_PRELU_SLOPE};

/// Group the pyramid into shallow and deep branches. Stages 1-3 are brought
/// to the stage-3 extent and concatenated; stages 4-5 are brought to the
/// stage-4 extent and concatenated. Matching uses nearest-neighbor resizing,
/// which replicates pixels when a map grows and samples on a stride when it
/// shrinks.
pub fn build_low_high(p: &FeaturePyramid) -> Result<(Tensor, Tensor), VisualError> {
    let (lh, lw) = (p.stage(2).shape()[1], p.stage(2).shape()[2]);
    let low_parts: Vec<Tensor> = p.stages()[..3]
        .iter()
        .map(|s| resize_nearest(s, lh, lw))
        .collect::<Result<_, _>>()?;
    let low = concat_channels(&low_parts.iter().collect::<Vec<_>>())?;

    let (hh, hw) = (p.stage(3).shape()[1], p.stage(3).shape()[2]);
    let high_parts: Vec<Tensor> = p.stages()[3..]
        .iter()
        .map(|s| resize_nearest(s, hh, hw))
        .collect::<Result<_, _>>()?;
    let high = concat_channels(&high_parts.iter().collect::<Vec<_>>())?;
    Ok((low, high))
}

/// Parameters of the salient attention stage.
#[derive(Clone, Debug, PartialEq)]
pub struct MvsaParams {
    /// 3x3 kernels transforming the shallow branch (followed by 2x pooling).
    pub low_kernels: Tensor,
    pub low_bias: Tensor,
    pub low_slope: f64,
    /// 1x1 kernels transforming the deep branch.
    pub high_kernels: Tensor,
    pub high_bias: Tensor,
    pub high_slope: f64,
    /// 1x1 kernels of the information branch.
    pub info_kernels: Tensor,
    pub info_bias: Tensor,
    /// 1x1 kernels of the gate branch.
    pub gate_kernels: Tensor,
    pub gate_bias: Tensor,
    /// Linear map from the flattened filtered field to the mask logits.
    pub mask_proj: Tensor,
    pub mask_bias: Tensor,
}

/// Shape plan the parameters are built for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MvsaPlan {
    pub low_channels: usize,
    pub high_channels: usize,
    /// Output channels of each branch transform.
    pub fuse_channels: usize,
    /// Output channels of the information and gate branches.
    pub filter_channels: usize,
    /// Spatial extent of the deep branch (stage-4 extent).
    pub field_h: usize,
    pub field_w: usize,
    /// Length of the global vector the mask gates.
    pub global_dim: usize,
}

impl MvsaPlan {
    pub fn for_pyramid(channels: &[usize; 5], stage4_extent: (usize, usize), fuse: usize, filter: usize, global_dim: usize) -> Self {
        Self {
            low_channels: channels[0] + channels[1] + channels[2],
            high_channels: channels[3] + channels[4],
            fuse_channels: fuse,
            filter_channels: filter,
            field_h: stage4_extent.0,
            field_w: stage4_extent.1,
            global_dim,
        }
    }
}

impl MvsaParams {
    pub fn seeded(plan: &MvsaPlan, rng: &mut Rng) -> Self {
        let cat = 2 * plan.fuse_channels;
        Self {
            low_kernels: rng.linear_init(&[plan.fuse_channels, plan.low_channels, 3, 3]),
            low_bias: Tensor::zeros(&[plan.fuse_channels]),
            low_slope: DEFAULT_PRELU_SLOPE,
            high_kernels: rng.linear_init(&[plan.fuse_channels, plan.high_channels, 1, 1]),
            high_bias: Tensor::zeros(&[plan.fuse_channels]),
            high_slope: DEFAULT_PRELU_SLOPE,
            info_kernels: rng.linear_init(&[plan.filter_channels, cat, 1, 1]),
            info_bias: Tensor::zeros(&[plan.filter_channels]),
            gate_kernels: rng.linear_init(&[plan.filter_channels, cat, 1, 1]),
            gate_bias: Tensor::zeros(&[plan.filter_channels]),
            mask_proj: rng.linear_init(&[
                plan.global_dim,
                plan.filter_channels * plan.field_h * plan.field_w,
            ]),
            mask_bias: Tensor::zeros(&[plan.global_dim]),
        }
    }

    pub fn zeroed(plan: &MvsaPlan) -> Self {
        let cat = 2 * plan.fuse_channels;
        Self {
            low_kernels: Tensor::zeros(&[plan.fuse_channels, plan.low_channels, 3, 3]),
            low_bias: Tensor::zeros(&[plan.fuse_channels]),
            low_slope: DEFAULT_PRELU_SLOPE,
            high_kernels: Tensor::zeros(&[plan.fuse_channels, plan.high_channels, 1, 1]),
            high_bias: Tensor::zeros(&[plan.fuse_channels]),
            high_slope: DEFAULT_PRELU_SLOPE,
            info_kernels: Tensor::zeros(&[plan.filter_channels, cat, 1, 1]),
            info_bias: Tensor::zeros(&[plan.filter_channels]),
            gate_kernels: Tensor::zeros(&[plan.filter_channels, cat, 1, 1]),
            gate_bias: Tensor::zeros(&[plan.filter_channels]),
            mask_proj: Tensor::zeros(&[
                plan.global_dim,
                plan.filter_channels * plan.field_h * plan.field_w,
            ]),
            mask_bias: Tensor::zeros(&[plan.global_dim]),
        }
    }
}

/// Join the two branches: the shallow branch goes through a 3x3 convolution
/// and 2x average pooling so it lands on the deep branch's extent, the deep
/// branch through a 1x1 convolution; the concatenation then receives the
/// per-pixel channel mean of the raw deep branch as a residual term.
pub fn multiscale_fuse(
    low: &Tensor,
    high: &Tensor,
    params: &MvsaParams,
) -> Result<Tensor, VisualError> {
    let low_conv = conv2d(low, &params.low_kernels, Some(&params.low_bias))?;
    let low_t = activate(&avg_pool2(&low_conv)?, Activation::PRelu(params.low_slope));
    let high_t = activate(
        &conv2d(high, &params.high_kernels, Some(&params.high_bias))?,
        Activation::PRelu(params.high_slope),
    );
    assert_eq!(
        low_t.shape()[1..],
        high_t.shape()[1..],
        "fused branches must share an extent"
    );
    let joint = concat_channels(&[&low_t, &high_t])?;
    let residual = mean_channel(high)?;
    Ok(add_broadcast_channel(&joint, &residual)?)
}

/// Suppress redundant content: normalize the joint field per pixel along
/// channels, form an information branch and a sigmoid gate branch with
/// independent 1x1 kernels, and take their elementwise product.
pub fn redundancy_filter(joint: &Tensor, params: &MvsaParams) -> Result<Tensor, VisualError> {
    let normalized = l2_normalize(joint, 0);
    let info = conv2d(&normalized, &params.info_kernels, Some(&params.info_bias))?;
    let gate = activate(
        &conv2d(&normalized, &params.gate_kernels, Some(&params.gate_bias))?,
        Activation::Sigmoid,
    );
    Ok(info.hadamard(&gate)?)
}

/// Salient mask over the global vector and the gated image vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SalientVisual {
    pub mask: Tensor,
    pub feature: Tensor,
}

/// Flatten the filtered field, project it to the global dimension, squash
/// with a sigmoid, and gate the global vector elementwise.
pub fn salient_mask(
    filtered: &Tensor,
    global: &Tensor,
    params: &MvsaParams,
) -> Result<SalientVisual, VisualError> {
    let flat = filtered.flattened();
    if params.mask_proj.shape()[1] != flat.len() || params.mask_proj.shape()[0] != global.len() {
        return Err(VisualError::BadPyramid(format!(
            "mask projection {:?} does not map field {} to global {}",
            params.mask_proj.shape(),
            flat.len(),
            global.len()
        )));
    }
    let logits = matvec(&params.mask_proj, &flat)?.add(&params.mask_bias)?;
    let mask = activate(&logits, Activation::Sigmoid);
    let feature = global.hadamard(&mask)?;
    Ok(SalientVisual { mask, feature })
}

/// Full salient-attention pass over a pyramid.
pub fn salient_forward(
    pyramid: &FeaturePyramid,
    params: &MvsaParams,
) -> Result<SalientVisual, VisualError> {
    let (low, high) = build_low_high(pyramid)?;
    let joint = multiscale_fuse(&low, &high, params)?;
    let filtered = redundancy_filter(&joint, params)?;
    salient_mask(&filtered, pyramid.global(), params)
}

/// The pre-projection filtered field, for spatial inspection of what the
/// mask is built from.
pub fn salient_field(
    pyramid: &FeaturePyramid,
    params: &MvsaParams,
) -> Result<Tensor, VisualError> {
    let (low, high) = build_low_high(pyramid)?;
    let joint = multiscale_fuse(&low, &high, params)?;
    redundancy_filter(&joint, params)
}
