//! Structural re-parameterization: BN folding, identity and scale branches
//! lifted to K×K kernels, and branch merging.

use crate::arch::{Layer, Model, ModelMode};
use crate::block::{InferenceBlock, InferenceStage, TrainBlock, TrainStage};
use crate::error::{ensure_dim, Error, Result};
use crate::ops::{BnParams, ConvSpec};
use crate::tensor::{Scalar, Tensor4};

/// Kernel and bias of a conv with its batchnorm absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedConv<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> FoldedConv<T> {
    pub fn into_conv(self, stride: usize, padding: usize, groups: usize) -> Result<ConvSpec<T>> {
        ConvSpec::new(self.weight, self.bias, stride, padding, groups)
    }
}

/// Absorbs `bn` into `conv`:
/// `W = W'·γ/sqrt(σ²+ε)`, `b = (b' − μ)·γ/sqrt(σ²+ε) + β`.
pub fn fold_bn<T: Scalar>(conv: &ConvSpec<T>, bn: &BnParams<T>) -> Result<FoldedConv<T>> {
    bn.validate()?;
    ensure_dim("fold_bn", "bn channels", conv.out_channels(), bn.channels())?;
    let scale = bn.scale_factors()?;
    let per_out = conv.weight.len() / conv.out_channels().max(1);
    let mut weight = conv.weight.clone();
    for (c, chunk) in weight.data_mut().chunks_mut(per_out.max(1)).enumerate() {
        for v in chunk {
            *v = *v * scale[c];
        }
    }
    let bias = (0..conv.out_channels())
        .map(|c| (conv.bias[c] - bn.mu[c]) * scale[c] + bn.beta[c])
        .collect();
    Ok(FoldedConv { weight, bias })
}

/// K×K conv that maps channel c to itself: a 1×1 identity kernel zero-padded
/// to K×K, stride 1, padding (K−1)/2, zero bias.
pub fn identity_as_conv<T: Scalar>(channels: usize, groups: usize, kernel: usize) -> Result<ConvSpec<T>> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "identity kernel size must be odd, got {kernel}"
        )));
    }
    if groups == 0 || channels % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "groups {groups} must divide channels {channels}"
        )));
    }
    let per_group = channels / groups;
    let centre = kernel / 2;
    let weight = Tensor4::from_fn([channels, per_group, kernel, kernel], |[o, i, h, w]| {
        if i == o % per_group && h == centre && w == centre {
            T::one()
        } else {
            T::zero()
        }
    });
    ConvSpec::new(weight, vec![T::zero(); channels], 1, centre, groups)
}

/// Zero-pads a kernel symmetrically to `target`×`target` and widens the
/// padding so the conv computes the same function.
pub fn pad_kernel<T: Scalar>(conv: &ConvSpec<T>, target: usize) -> Result<ConvSpec<T>> {
    let k = conv.kernel();
    if k % 2 == 0 || target % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "pad_kernel needs odd kernel sizes, got {k} -> {target}"
        )));
    }
    if k > target {
        return Err(Error::InvalidArgument(format!(
            "cannot pad a {k}x{k} kernel down to {target}x{target}"
        )));
    }
    let off = (target - k) / 2;
    let [co, ci, _, _] = conv.weight.shape();
    let weight = Tensor4::from_fn([co, ci, target, target], |[o, i, h, w]| {
        if h >= off && h < off + k && w >= off && w < off + k {
            conv.weight.get(o, i, h - off, w - off)
        } else {
            T::zero()
        }
    });
    ConvSpec::new(weight, conv.bias.clone(), conv.stride, conv.padding + off, conv.groups)
}

/// Sums kernels and biases in list order.
pub fn merge_branches<T: Scalar>(branches: &[FoldedConv<T>]) -> Result<FoldedConv<T>> {
    let (first, rest) = branches
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("merge_branches needs at least one branch".into()))?;
    let mut merged = first.clone();
    for (i, b) in rest.iter().enumerate() {
        if b.weight.shape() != merged.weight.shape() || b.bias.len() != merged.bias.len() {
            return Err(Error::InvalidArgument(format!(
                "branch {} has shape {:?}, expected {:?}",
                i + 1,
                b.weight.shape(),
                merged.weight.shape()
            )));
        }
        merged.weight.add_assign(&b.weight)?;
        for (a, &v) in merged.bias.iter_mut().zip(&b.bias) {
            *a = *a + v;
        }
    }
    Ok(merged)
}

fn widen_conv<T: Scalar>(conv: &ConvSpec<T>) -> ConvSpec<f64> {
    ConvSpec {
        weight: conv.weight.cast(),
        bias: conv.bias.iter().map(|v| v.as_f64()).collect(),
        stride: conv.stride,
        padding: conv.padding,
        groups: conv.groups,
    }
}

fn widen_bn<T: Scalar>(bn: &BnParams<T>) -> BnParams<f64> {
    let widen = |v: &[T]| v.iter().map(|x| x.as_f64()).collect();
    BnParams {
        mu: widen(&bn.mu),
        sigma: widen(&bn.sigma),
        gamma: widen(&bn.gamma),
        beta: widen(&bn.beta),
        eps: bn.eps.as_f64(),
    }
}

/// Folds every branch of one stage: conv branches ascending, then the
/// padded scale branch, then the skip BN realized as an identity conv.
///
/// The arithmetic runs in double precision and is rounded to `T` once, so a
/// single-precision fold carries one rounding per weight rather than one per
/// branch.
pub fn fold_stage<T: Scalar>(stage: &TrainStage<T>) -> Result<FoldedConv<T>> {
    stage.validate()?;
    let g = stage.geometry;
    let stats_ok = stage.branches.iter().all(|b| b.bn.is_populated())
        && stage.scale.as_ref().is_none_or(|s| s.bn.is_populated())
        && stage.skip.as_ref().is_none_or(BnParams::is_populated);
    if !stats_ok {
        return Err(Error::UnpopulatedStats);
    }
    let mut folded = Vec::with_capacity(stage.branch_config().branch_count());
    for b in &stage.branches {
        folded.push(fold_bn(&widen_conv(&b.conv), &widen_bn(&b.bn))?);
    }
    if let Some(s) = &stage.scale {
        folded.push(fold_bn(&pad_kernel(&widen_conv(&s.conv), g.kernel)?, &widen_bn(&s.bn))?);
    }
    if let Some(skip) = &stage.skip {
        let id = identity_as_conv(g.out_channels, g.groups, g.kernel)?;
        folded.push(fold_bn(&id, &widen_bn(skip))?);
    }
    let merged = merge_branches(&folded)?;
    Ok(FoldedConv {
        weight: merged.weight.cast(),
        bias: merged.bias.iter().map(|&v| T::of(v)).collect(),
    })
}

pub fn reparameterize_stage<T: Scalar>(stage: &TrainStage<T>) -> Result<InferenceStage<T>> {
    let g = stage.geometry;
    let conv = fold_stage(stage)?.into_conv(g.stride, g.padding(), g.groups)?;
    Ok(InferenceStage {
        conv,
        se: stage.se.clone(),
    })
}

pub fn reparameterize_block<T: Scalar>(block: &TrainBlock<T>) -> Result<InferenceBlock<T>> {
    block.validate()?;
    Ok(InferenceBlock {
        kind: block.kind,
        stages: block
            .stages
            .iter()
            .map(reparameterize_stage)
            .collect::<Result<_>>()?,
        activation: block.activation,
    })
}

/// Replaces every train block with its inference form. Inference models are
/// returned unchanged.
pub fn reparameterize_model<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    if model.mode == ModelMode::Inference {
        return Ok(model.clone());
    }
    let layers = model
        .layers
        .iter()
        .map(|l| {
            Ok(match l {
                Layer::Train(b) => Layer::Inference(reparameterize_block(b)?),
                other => other.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        name: model.name.clone(),
        mode: ModelMode::Inference,
        input_resolution: model.input_resolution,
        layers,
    })
}
