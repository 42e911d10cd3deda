//! Recorded train-mode forward pass and its manual reverse pass.
//!
//! Gradients are keyed by the same names the weight container uses, so a
//! [`GradMap`] lines up with every `Param` tensor of a train-mode model.

use std::collections::BTreeMap;

use crate::arch::{Layer, Model, ModelMode};
use crate::block::{BlockActivation, TrainBlock, TrainStage};
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_train, batchnorm_train_backward, conv2d, conv2d_backward, global_avgpool, linear,
    relu, se_forward_cached, BnCache, SeCache,
};
use crate::tensor::{Scalar, Tensor4};

use super::loss::label_smoothed_ce;

/// Parameter gradients by canonical tensor name.
pub type GradMap<T> = BTreeMap<String, Vec<T>>;

/// Saved activations of one stage.
#[derive(Debug, Clone)]
pub struct StageTape<T> {
    input: Tensor4<T>,
    branches: Vec<BnCache<T>>,
    scale: Option<BnCache<T>>,
    skip: Option<BnCache<T>>,
    /// Summed branch output, before SE and ReLU.
    z: Tensor4<T>,
    se: Option<SeCache<T>>,
    output: Tensor4<T>,
}

#[derive(Debug, Clone)]
pub struct BlockTape<T> {
    stages: Vec<StageTape<T>>,
}

#[derive(Debug, Clone)]
enum LayerTape<T> {
    Block(BlockTape<T>),
    Pool { shape: [usize; 4] },
    Linear { input: Tensor4<T> },
}

/// Everything [`backward_from_logits`] needs.
#[derive(Debug, Clone)]
pub struct ModelTape<T> {
    layers: Vec<LayerTape<T>>,
}

impl<T: Scalar> TrainStage<T> {
    /// Train-mode forward with batch statistics; running statistics are
    /// updated in place.
    pub fn forward_recorded(
        &mut self,
        x: &Tensor4<T>,
        activation: BlockActivation,
        momentum: T,
    ) -> Result<(Tensor4<T>, StageTape<T>)> {
        self.validate()?;
        let mut z: Option<Tensor4<T>> = None;
        let mut accumulate = |t: Tensor4<T>| -> Result<()> {
            match &mut z {
                Some(acc) => acc.add_assign(&t),
                None => {
                    z = Some(t);
                    Ok(())
                }
            }
        };
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        for b in &mut self.branches {
            let (y, updated, cache) = batchnorm_train(&conv2d(x, &b.conv)?, &b.bn, momentum)?;
            b.bn = updated;
            branch_caches.push(cache);
            accumulate(y)?;
        }
        let mut scale_cache = None;
        if let Some(s) = &mut self.scale {
            let (y, updated, cache) = batchnorm_train(&conv2d(x, &s.conv)?, &s.bn, momentum)?;
            s.bn = updated;
            scale_cache = Some(cache);
            accumulate(y)?;
        }
        let mut skip_cache = None;
        if let Some(skip) = &mut self.skip {
            let (y, updated, cache) = batchnorm_train(x, skip, momentum)?;
            *skip = updated;
            skip_cache = Some(cache);
            accumulate(y)?;
        }
        let z = z.expect("a validated stage has at least one branch");
        let (gated, se_cache) = match (activation, &self.se) {
            (BlockActivation::SeRelu, Some(se)) => {
                let (g, c) = se_forward_cached(&z, se)?;
                (g, Some(c))
            }
            (BlockActivation::Relu, None) => (z.clone(), None),
            _ => {
                return Err(Error::InvalidArgument(
                    "squeeze-excite parameters must be present exactly for SE-ReLU".into(),
                ))
            }
        };
        let output = relu(&gated);
        let tape = StageTape {
            input: x.clone(),
            branches: branch_caches,
            scale: scale_cache,
            skip: skip_cache,
            z,
            se: se_cache,
            output: output.clone(),
        };
        Ok((output, tape))
    }

    /// Gradient with respect to the stage input; parameter gradients are
    /// written to `grads` under `prefix`.
    pub fn backward(&self, tape: &StageTape<T>, gy: &Tensor4<T>, prefix: &str, grads: &mut GradMap<T>) -> Result<Tensor4<T>> {
        // ReLU: the output is positive exactly where its input was.
        let g_act = gy.zip_map(&tape.output, |g, y| if y > T::zero() { g } else { T::zero() })?;
        let dz = match (&self.se, &tape.se) {
            (Some(se), Some(cache)) => {
                let plane = tape.z.plane();
                let [n, c, _, _] = tape.z.shape();
                let gate = cache.gate.data();
                let mut dz = g_act.clone();
                let mut dgate = vec![T::zero(); n * c];
                for (idx, (dst, zc)) in dz
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(tape.z.data().chunks(plane))
                    .enumerate()
                {
                    let mut acc = T::zero();
                    for (d, &zv) in dst.iter_mut().zip(zc) {
                        acc = acc + *d * zv;
                        *d = *d * gate[idx];
                    }
                    dgate[idx] = acc;
                }
                // sigmoid' = s(1 - s)
                let dpre: Vec<T> = dgate
                    .iter()
                    .zip(gate)
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                let dpre = Tensor4::from_vec([n, c, 1, 1], dpre)?;
                let ge = conv2d_backward(&cache.hidden, &se.expand, &dpre)?;
                let dh = ge
                    .input
                    .zip_map(&cache.hidden_pre, |g, h| if h > T::zero() { g } else { T::zero() })?;
                let gr = conv2d_backward(&cache.pooled, &se.reduce, &dh)?;
                grads.insert(format!("{prefix}.se.expand.weight"), ge.weight.into_vec());
                grads.insert(format!("{prefix}.se.expand.bias"), ge.bias);
                grads.insert(format!("{prefix}.se.reduce.weight"), gr.weight.into_vec());
                grads.insert(format!("{prefix}.se.reduce.bias"), gr.bias);
                let inv_plane = T::one() / T::from_usize(plane.max(1)).unwrap();
                for (dst, &dp) in dz.data_mut().chunks_mut(plane).zip(gr.input.data()) {
                    let add = dp * inv_plane;
                    for d in dst {
                        *d = *d + add;
                    }
                }
                dz
            }
            (None, None) => g_act,
            _ => {
                return Err(Error::InvalidArgument(
                    "tape does not match the stage's squeeze-excite layout".into(),
                ))
            }
        };

        let mut dx = Tensor4::zeros(tape.input.shape());
        let convs = self
            .branches
            .iter()
            .zip(&tape.branches)
            .enumerate()
            .map(|(i, (b, c))| (format!("{prefix}.branches.{i}"), b, c))
            .chain(
                self.scale
                    .iter()
                    .zip(&tape.scale)
                    .map(|(b, c)| (format!("{prefix}.scale"), b, c)),
            );
        for (name, branch, cache) in convs {
            let (dconv, dgamma, dbeta) = batchnorm_train_backward(&dz, &branch.bn.gamma, cache)?;
            let g = conv2d_backward(&tape.input, &branch.conv, &dconv)?;
            dx.add_assign(&g.input)?;
            grads.insert(format!("{name}.conv.weight"), g.weight.into_vec());
            grads.insert(format!("{name}.bn.gamma"), dgamma);
            grads.insert(format!("{name}.bn.beta"), dbeta);
        }
        if let (Some(skip), Some(cache)) = (&self.skip, &tape.skip) {
            let (dskip, dgamma, dbeta) = batchnorm_train_backward(&dz, &skip.gamma, cache)?;
            dx.add_assign(&dskip)?;
            grads.insert(format!("{prefix}.skip.bn.gamma"), dgamma);
            grads.insert(format!("{prefix}.skip.bn.beta"), dbeta);
        }
        Ok(dx)
    }
}

impl<T: Scalar> TrainBlock<T> {
    /// Train-mode forward; see [`TrainStage::forward_recorded`].
    pub fn forward_recorded(&mut self, x: &Tensor4<T>, momentum: T) -> Result<(Tensor4<T>, BlockTape<T>)> {
        let activation = self.activation;
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &mut self.stages {
            let (y, tape) = s.forward_recorded(&h, activation, momentum)?;
            stages.push(tape);
            h = y;
        }
        Ok((h, BlockTape { stages }))
    }

    pub fn backward(&self, tape: &BlockTape<T>, gy: &Tensor4<T>, prefix: &str, grads: &mut GradMap<T>) -> Result<Tensor4<T>> {
        let mut g = gy.clone();
        for (j, (s, t)) in self.stages.iter().zip(&tape.stages).enumerate().rev() {
            g = s.backward(t, &g, &format!("{prefix}.stages.{j}"), grads)?;
        }
        Ok(g)
    }
}

/// Train-mode forward through a whole model. Returns logits and the tape.
pub fn forward_recorded<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor4<T>,
    momentum: T,
) -> Result<(Tensor4<T>, ModelTape<T>)> {
    if model.mode != ModelMode::Train {
        return Err(Error::WrongMode {
            expected: ModelMode::Train.as_str(),
            actual: model.mode.as_str(),
        });
    }
    let mut h = x.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &mut model.layers {
        match l {
            Layer::Train(b) => {
                let (y, tape) = b.forward_recorded(&h, momentum)?;
                layers.push(LayerTape::Block(tape));
                h = y;
            }
            Layer::AvgPool => {
                layers.push(LayerTape::Pool { shape: h.shape() });
                h = global_avgpool(&h);
            }
            Layer::Linear(lin) => {
                let y = linear(&h, lin)?;
                layers.push(LayerTape::Linear { input: h });
                h = y;
            }
            Layer::Inference(_) => unreachable!("validated train-mode model"),
        }
    }
    Ok((h, ModelTape { layers }))
}

/// Replaces every batchnorm running statistic with the statistics of the
/// batch `x`, leaving all other parameters untouched.
pub fn calibrate<T: Scalar>(model: &mut Model<T>, x: &Tensor4<T>) -> Result<()> {
    forward_recorded(model, x, T::one()).map(|_| ())
}

/// Reverse pass from the gradient of the loss with respect to the logits.
pub fn backward_from_logits<T: Scalar>(
    model: &Model<T>,
    tape: &ModelTape<T>,
    dlogits: &Tensor4<T>,
) -> Result<GradMap<T>> {
    if tape.layers.len() != model.layers.len() {
        return Err(Error::InvalidArgument("tape was recorded on a different model".into()));
    }
    let mut grads = GradMap::new();
    let mut g = dlogits.clone();
    for (i, (l, t)) in model.layers.iter().zip(&tape.layers).enumerate().rev() {
        let prefix = format!("layers.{i}");
        g = match (l, t) {
            (Layer::Train(b), LayerTape::Block(bt)) => b.backward(bt, &g, &prefix, &mut grads)?,
            (Layer::AvgPool, LayerTape::Pool { shape }) => {
                let plane = shape[2] * shape[3];
                let inv = T::one() / T::from_usize(plane.max(1)).unwrap();
                let mut out = Tensor4::zeros(*shape);
                for (dst, &gv) in out.data_mut().chunks_mut(plane.max(1)).zip(g.data()) {
                    dst.fill(gv * inv);
                }
                out
            }
            (Layer::Linear(lin), LayerTape::Linear { input }) => {
                let f = lin.in_features;
                let o = lin.out_features;
                let mut dw = vec![T::zero(); f * o];
                let mut db = vec![T::zero(); o];
                let mut dx = vec![T::zero(); input.len()];
                for ((row, grow), dxr) in input
                    .data()
                    .chunks(f)
                    .zip(g.data().chunks(o))
                    .zip(dx.chunks_mut(f))
                {
                    for (k, &gk) in grow.iter().enumerate() {
                        db[k] = db[k] + gk;
                        let wr = &lin.weight[k * f..(k + 1) * f];
                        let dwr = &mut dw[k * f..(k + 1) * f];
                        for j in 0..f {
                            dwr[j] = dwr[j] + gk * row[j];
                            dxr[j] = dxr[j] + gk * wr[j];
                        }
                    }
                }
                grads.insert(format!("{prefix}.weight"), dw);
                grads.insert(format!("{prefix}.bias"), db);
                Tensor4::from_vec(input.shape(), dx)?
            }
            _ => return Err(Error::InvalidArgument("tape was recorded on a different model".into())),
        };
    }
    Ok(grads)
}

/// Loss and parameter gradients of one train-mode step on `(x, targets)`.
/// Running batchnorm statistics are updated as a side effect.
pub fn backward<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor4<T>,
    targets: &[usize],
    smoothing: f64,
    bn_momentum: T,
) -> Result<(f64, GradMap<T>)> {
    let (logits, tape) = forward_recorded(model, x, bn_momentum)?;
    let (loss, dlogits) = label_smoothed_ce(&logits, targets, smoothing)?;
    let grads = backward_from_logits(model, &tape, &dlogits)?;
    Ok((loss, grads))
}
