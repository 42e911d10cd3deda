//! The MobileOne block in its two forms.
//!
//! A train-time stage sums `k` conv+BN branches, an optional 1×1 scale
//! branch (K > 1 only) and an optional BN-only skip branch, then applies
//! (SE →) ReLU. A separable block is a 3×3 depthwise stage followed by a
//! 1×1 pointwise stage; a stem block is a single dense 3×3 stage.
//! The inference form keeps one conv per stage.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::ops::{
    batchnorm_infer, conv2d, relu, se_block, se_hidden, BnParams, ConvSpec, SeParams, BN_EPS,
    SE_RATIO,
};
use crate::tensor::{randn_vec, Scalar, Tensor4};

/// Largest trivial over-parameterization factor.
pub const MAX_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockActivation {
    Relu,
    SeRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Depthwise 3×3 stage then pointwise 1×1 stage.
    Separable,
    /// One dense 3×3 stage.
    Stem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Branch inventory of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub k: usize,
    pub kernel: usize,
    pub has_scale_branch: bool,
    pub has_skip_bn: bool,
}

impl BranchConfig {
    /// Number of branches folded into the inference conv.
    pub fn branch_count(&self) -> usize {
        self.k + usize::from(self.has_scale_branch) + usize::from(self.has_skip_bn)
    }
}

/// How batchnorm statistics are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnInit {
    /// mu 0, sigma 1, gamma 1, beta 0.
    Identity,
    /// Randomized statistics and affine terms, for equivalence testing.
    Random,
    /// Running statistics left as NaN until calibrated.
    Unset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitPolicy {
    pub seed: u64,
    pub bn: BnInit,
}

impl InitPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            bn: BnInit::Identity,
        }
    }

    pub fn random_bn(seed: u64) -> Self {
        Self {
            seed,
            bn: BnInit::Random,
        }
    }
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self::new(0)
    }
}

/// N(0, 2 / fan_out) conv weights, fan_out = (C_out / groups)·K².
pub(crate) fn init_conv<T: Scalar, R: Rng + ?Sized>(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
    bias: bool,
    rng: &mut R,
) -> ConvSpec<T> {
    let fan_out = (c_out / groups) * kernel * kernel;
    let weight = Tensor4::randn(
        [c_out, c_in / groups, kernel, kernel],
        (2.0 / fan_out as f64).sqrt(),
        rng,
    );
    let bias = if bias {
        randn_vec(c_out, 0.01, rng)
    } else {
        vec![T::zero(); c_out]
    };
    ConvSpec {
        weight,
        bias,
        stride,
        padding: (kernel - 1) / 2,
        groups,
    }
}

pub(crate) fn init_bn<T: Scalar, R: Rng + ?Sized>(
    channels: usize,
    init: BnInit,
    rng: &mut R,
) -> BnParams<T> {
    let eps = T::of(BN_EPS);
    match init {
        BnInit::Identity => BnParams::identity(channels, eps),
        BnInit::Unset => {
            let mut bn = BnParams::identity(channels, eps);
            bn.mu.fill(T::nan());
            bn.sigma.fill(T::nan());
            bn
        }
        BnInit::Random => {
            let pos = Uniform::new(0.5, 1.5).expect("valid range");
            BnParams {
                mu: randn_vec(channels, 0.3, rng),
                sigma: (0..channels).map(|_| T::of(pos.sample(rng))).collect(),
                gamma: (0..channels).map(|_| T::of(pos.sample(rng))).collect(),
                beta: randn_vec(channels, 0.2, rng),
                eps,
            }
        }
    }
}

pub(crate) fn init_se<T: Scalar, R: Rng + ?Sized>(channels: usize, rng: &mut R) -> SeParams<T> {
    let hidden = se_hidden(channels, SE_RATIO);
    SeParams {
        reduce: init_conv(channels, hidden, 1, 1, 1, true, rng),
        expand: init_conv(hidden, channels, 1, 1, 1, true, rng),
        ratio: SE_RATIO,
    }
}

/// A bias-free conv followed by batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    /// Bias is held at zero; the following BN carries the shift.
    pub conv: ConvSpec<T>,
    pub bn: BnParams<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        batchnorm_infer(&conv2d(x, &self.conv)?, &self.bn)
    }

    pub fn param_count(&self) -> usize {
        self.conv.weight.len() + self.bn.param_count()
    }
}

/// Shape parameters shared by every branch of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl StageGeometry {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn shape_preserving(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::InvalidArgument(format!(
                "stage kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument("stride and groups must be positive".into()));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "groups {} must divide {} and {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

/// One train-time stage: Σ k conv+BN ⊕ scale ⊕ skip, then (SE →) ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStage<T> {
    pub geometry: StageGeometry,
    pub branches: Vec<ConvBn<T>>,
    pub scale: Option<ConvBn<T>>,
    pub skip: Option<BnParams<T>>,
    pub se: Option<SeParams<T>>,
}

impl<T: Scalar> TrainStage<T> {
    pub fn new(
        geometry: StageGeometry,
        branches: Vec<ConvBn<T>>,
        scale: Option<ConvBn<T>>,
        skip: Option<BnParams<T>>,
        se: Option<SeParams<T>>,
    ) -> Result<Self> {
        let stage = Self {
            geometry,
            branches,
            scale,
            skip,
            se,
        };
        stage.validate()?;
        Ok(stage)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        g.validate()?;
        if self.branches.is_empty() || self.branches.len() > MAX_K {
            return Err(Error::InvalidArgument(format!(
                "k must be in 1..={MAX_K}, got {}",
                self.branches.len()
            )));
        }
        for b in &self.branches {
            check_branch(b, g, g.kernel)?;
        }
        if let Some(s) = &self.scale {
            if g.kernel == 1 {
                return Err(Error::InvalidArgument(
                    "a 1x1 stage cannot carry a scale branch".into(),
                ));
            }
            check_branch(s, g, 1)?;
        }
        if let Some(skip) = &self.skip {
            if !g.shape_preserving() {
                return Err(Error::IllegalSkip {
                    stride: g.stride,
                    in_channels: g.in_channels,
                    out_channels: g.out_channels,
                });
            }
            skip.validate()?;
            ensure_dim("train stage", "skip channels", g.out_channels, skip.channels())?;
        }
        if let Some(se) = &self.se {
            ensure_dim("train stage", "se channels", g.out_channels, se.channels())?;
        }
        Ok(())
    }

    /// Randomly initialized stage. `skip` is honored only where legal.
    pub fn init<R: Rng + ?Sized>(
        geometry: StageGeometry,
        k: usize,
        scale: bool,
        skip: bool,
        se: bool,
        bn: BnInit,
        rng: &mut R,
    ) -> Result<Self> {
        geometry.validate()?;
        let g = geometry;
        let branch = |kernel: usize, rng: &mut R| ConvBn {
            conv: init_conv(g.in_channels, g.out_channels, kernel, g.stride, g.groups, false, rng),
            bn: init_bn(g.out_channels, bn, rng),
        };
        let branches = (0..k).map(|_| branch(g.kernel, rng)).collect();
        let scale = (scale && g.kernel > 1).then(|| branch(1, rng));
        let skip = (skip && g.shape_preserving()).then(|| init_bn(g.out_channels, bn, rng));
        let se = se.then(|| init_se(g.out_channels, rng));
        Self::new(geometry, branches, scale, skip, se)
    }

    pub fn branch_config(&self) -> BranchConfig {
        BranchConfig {
            k: self.branches.len(),
            kernel: self.geometry.kernel,
            has_scale_branch: self.scale.is_some(),
            has_skip_bn: self.skip.is_some(),
        }
    }

    /// Eval-mode output before SE and activation. Summation order: conv
    /// branches ascending, then scale, then skip.
    pub fn preactivation_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        ensure_dim("train stage", "input channels", self.geometry.in_channels, x.c())?;
        let mut acc = self.branches[0].forward_eval(x)?;
        for b in &self.branches[1..] {
            acc.add_assign(&b.forward_eval(x)?)?;
        }
        if let Some(s) = &self.scale {
            acc.add_assign(&s.forward_eval(x)?)?;
        }
        if let Some(skip) = &self.skip {
            acc.add_assign(&batchnorm_infer(x, skip)?)?;
        }
        Ok(acc)
    }

    pub fn forward_eval(&self, x: &Tensor4<T>, activation: BlockActivation) -> Result<Tensor4<T>> {
        let z = self.preactivation_eval(x)?;
        finish_stage(z, self.se.as_ref(), activation)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(ConvBn::param_count).sum::<usize>()
            + self.scale.as_ref().map_or(0, ConvBn::param_count)
            + self.skip.as_ref().map_or(0, BnParams::param_count)
            + self.se.as_ref().map_or(0, SeParams::param_count)
    }
}

fn check_branch<T: Scalar>(b: &ConvBn<T>, g: &StageGeometry, kernel: usize) -> Result<()> {
    b.conv.validate()?;
    b.bn.validate()?;
    ensure_dim("branch", "kernel", kernel, b.conv.kernel())?;
    ensure_dim("branch", "input channels", g.in_channels, b.conv.in_channels())?;
    ensure_dim("branch", "output channels", g.out_channels, b.conv.out_channels())?;
    ensure_dim("branch", "groups", g.groups, b.conv.groups)?;
    ensure_dim("branch", "stride", g.stride, b.conv.stride)?;
    ensure_dim("branch", "padding", (kernel - 1) / 2, b.conv.padding)?;
    ensure_dim("branch", "bn channels", g.out_channels, b.bn.channels())
}

pub(crate) fn finish_stage<T: Scalar>(
    z: Tensor4<T>,
    se: Option<&SeParams<T>>,
    activation: BlockActivation,
) -> Result<Tensor4<T>> {
    match (activation, se) {
        (BlockActivation::SeRelu, Some(se)) => Ok(relu(&se_block(&z, se)?)),
        (BlockActivation::Relu, None) => Ok(relu(&z)),
        (BlockActivation::SeRelu, None) => Err(Error::InvalidArgument(
            "SE-ReLU stage is missing its squeeze-excite parameters".into(),
        )),
        (BlockActivation::Relu, Some(_)) => Err(Error::InvalidArgument(
            "squeeze-excite parameters present on a ReLU stage".into(),
        )),
    }
}

/// Block construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub k: usize,
    /// Attach the 1×1 scale branch to 3×3 stages.
    pub scale: bool,
    /// Attach skip-BN to every shape-preserving stage.
    pub skip: bool,
    pub activation: BlockActivation,
}

impl BlockConfig {
    pub fn separable(in_channels: usize, out_channels: usize, stride: usize, k: usize) -> Self {
        Self {
            kind: BlockKind::Separable,
            in_channels,
            out_channels,
            stride,
            k,
            scale: true,
            skip: true,
            activation: BlockActivation::Relu,
        }
    }

    pub fn stem(in_channels: usize, out_channels: usize, stride: usize, k: usize) -> Self {
        Self {
            kind: BlockKind::Stem,
            ..Self::separable(in_channels, out_channels, stride, k)
        }
    }

    /// Stage geometries in execution order.
    pub fn geometries(&self) -> Vec<StageGeometry> {
        match self.kind {
            BlockKind::Stem => vec![StageGeometry {
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                kernel: 3,
                stride: self.stride,
                groups: 1,
            }],
            BlockKind::Separable => vec![
                StageGeometry {
                    in_channels: self.in_channels,
                    out_channels: self.in_channels,
                    kernel: 3,
                    stride: self.stride,
                    groups: self.in_channels,
                },
                StageGeometry {
                    in_channels: self.in_channels,
                    out_channels: self.out_channels,
                    kernel: 1,
                    stride: 1,
                    groups: 1,
                },
            ],
        }
    }
}

/// Train-time MobileOne block.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBlock<T> {
    pub kind: BlockKind,
    pub stages: Vec<TrainStage<T>>,
    pub activation: BlockActivation,
}

impl<T: Scalar> TrainBlock<T> {
    pub fn new(kind: BlockKind, stages: Vec<TrainStage<T>>, activation: BlockActivation) -> Result<Self> {
        let block = Self {
            kind,
            stages,
            activation,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.kind {
            BlockKind::Stem => 1,
            BlockKind::Separable => 2,
        };
        ensure_dim("train block", "stage count", expected, self.stages.len())?;
        for pair in self.stages.windows(2) {
            ensure_dim(
                "train block",
                "stage chaining",
                pair[0].geometry.out_channels,
                pair[1].geometry.in_channels,
            )?;
        }
        for s in &self.stages {
            s.validate()?;
            if s.se.is_some() != (self.activation == BlockActivation::SeRelu) {
                return Err(Error::InvalidArgument(
                    "squeeze-excite is present exactly when the activation is SE-ReLU".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(cfg: &BlockConfig, bn: BnInit, rng: &mut R) -> Result<Self> {
        if cfg.k == 0 || cfg.k > MAX_K {
            return Err(Error::InvalidArgument(format!(
                "k must be in 1..={MAX_K}, got {}",
                cfg.k
            )));
        }
        let se = cfg.activation == BlockActivation::SeRelu;
        let stages = cfg
            .geometries()
            .into_iter()
            .map(|g| TrainStage::init(g, cfg.k, cfg.scale, cfg.skip, se, bn, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cfg.kind, stages, cfg.activation)
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].geometry.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().expect("non-empty").geometry.out_channels
    }

    pub fn stride(&self) -> usize {
        self.stages[0].geometry.stride
    }

    /// Forward pass. `Eval` uses running statistics; `Train` normalizes with
    /// batch statistics and updates the running ones with `momentum`.
    pub fn forward_train(&mut self, x: &Tensor4<T>, mode: Mode, momentum: T) -> Result<Tensor4<T>> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => self.forward_recorded(x, momentum).map(|(y, _)| y),
        }
    }

    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut h = self.stages[0].forward_eval(x, self.activation)?;
        for s in &self.stages[1..] {
            h = s.forward_eval(&h, self.activation)?;
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(TrainStage::param_count).sum()
    }
}

/// One inference stage: conv → (SE) → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceStage<T> {
    pub conv: ConvSpec<T>,
    pub se: Option<SeParams<T>>,
}

/// Branch-free MobileOne block.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceBlock<T> {
    pub kind: BlockKind,
    pub stages: Vec<InferenceStage<T>>,
    pub activation: BlockActivation,
}

impl<T: Scalar> InferenceBlock<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        let se = cfg.activation == BlockActivation::SeRelu;
        let stages = cfg
            .geometries()
            .into_iter()
            .map(|g| {
                g.validate()?;
                Ok(InferenceStage {
                    conv: init_conv(g.in_channels, g.out_channels, g.kernel, g.stride, g.groups, true, rng),
                    se: se.then(|| init_se(g.out_channels, rng)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: cfg.kind,
            stages,
            activation: cfg.activation,
        })
    }

    pub fn forward_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut h = x.clone();
        for s in &self.stages {
            let z = conv2d(&h, &s.conv)?;
            h = finish_stage(z, s.se.as_ref(), self.activation)?;
        }
        Ok(h)
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().expect("non-empty").conv.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.conv.param_count() + s.se.as_ref().map_or(0, SeParams::param_count))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_branches(block: &mut TrainBlock<f64>) {
        for s in &mut block.stages {
            for b in &mut s.branches {
                b.conv.weight.data_mut().fill(0.0);
            }
            if let Some(sc) = &mut s.scale {
                sc.conv.weight.data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn zero_branches_with_identity_skip_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BlockConfig::separable(4, 4, 1, 1);
        let mut block = TrainBlock::<f64>::init(&cfg, BnInit::Identity, &mut rng).unwrap();
        zero_branches(&mut block);
        for s in &mut block.stages {
            s.skip.as_mut().unwrap().eps = 0.0;
        }
        let x = Tensor4::randn([2, 4, 5, 5], 1.0, &mut rng);
        let y = block.forward_eval(&x).unwrap();
        assert!(y.max_abs_diff(&relu(&x)).unwrap() < 1e-15);
    }

    #[test]
    fn identical_branches_sum_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = BlockConfig::separable(3, 5, 1, 1);
        cfg.scale = false;
        cfg.skip = false;
        let single = TrainBlock::<f64>::init(&cfg, BnInit::Random, &mut rng).unwrap();
        let mut triple = single.clone();
        for s in &mut triple.stages {
            let b = s.branches[0].clone();
            s.branches = vec![b.clone(), b.clone(), b];
        }
        let x = Tensor4::randn([1, 3, 4, 4], 1.0, &mut rng);
        let z1 = single.stages[0].preactivation_eval(&x).unwrap();
        let z3 = triple.stages[0].preactivation_eval(&x).unwrap();
        assert!(z3.max_abs_diff(&z1.scale(3.0)).unwrap() < 1e-12);
        let y = triple.stages[0].forward_eval(&x, BlockActivation::Relu).unwrap();
        assert!(y.max_abs_diff(&relu(&z1.scale(3.0))).unwrap() < 1e-12);
    }

    #[test]
    fn skip_rejected_on_non_preserving_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = StageGeometry {
            in_channels: 4,
            out_channels: 4,
            kernel: 3,
            stride: 2,
            groups: 4,
        };
        let mut stage = TrainStage::<f64>::init(g, 2, true, false, false, BnInit::Identity, &mut rng).unwrap();
        stage.skip = Some(BnParams::identity(4, 1e-5));
        assert!(matches!(stage.validate(), Err(Error::IllegalSkip { .. })));

        let g = StageGeometry {
            in_channels: 4,
            out_channels: 6,
            kernel: 1,
            stride: 1,
            groups: 1,
        };
        let r = TrainStage::<f64>::new(
            g,
            vec![ConvBn {
                conv: init_conv(4, 6, 1, 1, 1, false, &mut rng),
                bn: BnParams::identity(6, 1e-5),
            }],
            None,
            Some(BnParams::identity(6, 1e-5)),
            None,
        );
        assert!(matches!(r, Err(Error::IllegalSkip { .. })));
    }

    #[test]
    fn block_init_places_skip_only_where_legal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = TrainBlock::<f64>::init(&BlockConfig::separable(4, 8, 1, 2), BnInit::Identity, &mut rng).unwrap();
        assert!(b.stages[0].skip.is_some());
        assert!(b.stages[1].skip.is_none());
        let b = TrainBlock::<f64>::init(&BlockConfig::separable(8, 8, 2, 2), BnInit::Identity, &mut rng).unwrap();
        assert!(b.stages[0].skip.is_none());
        assert!(b.stages[1].skip.is_some());
        assert_eq!(b.stages[0].branch_config().branch_count(), 3);
        assert!(b.stages[1].scale.is_none());
        assert!(TrainBlock::<f64>::init(&BlockConfig::separable(4, 4, 1, 0), BnInit::Identity, &mut rng).is_err());
        assert!(TrainBlock::<f64>::init(&BlockConfig::separable(4, 4, 1, 6), BnInit::Identity, &mut rng).is_err());
    }

    #[test]
    fn inference_identity_block_on_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut block = InferenceBlock::<f64>::init(&BlockConfig::separable(3, 3, 1, 1), &mut rng).unwrap();
        block.stages[0].conv.weight =
            Tensor4::from_fn([3, 1, 3, 3], |[_, _, h, w]| if h == 1 && w == 1 { 1.0 } else { 0.0 });
        block.stages[0].conv.bias = vec![0.0; 3];
        block.stages[1].conv.weight = Tensor4::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        block.stages[1].conv.bias = vec![0.0; 3];
        let x = Tensor4::randn([2, 3, 4, 4], 1.0, &mut rng).map(f64::abs);
        assert_eq!(block.forward_infer(&x).unwrap(), x);
    }

    #[test]
    fn stride_two_halves_spatial_dims_with_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = InferenceBlock::<f32>::init(&BlockConfig::separable(2, 4, 2, 1), &mut rng).unwrap();
        for (h, w, ho, wo) in [(8, 8, 4, 4), (7, 9, 4, 5), (1, 1, 1, 1)] {
            let y = block.forward_infer(&Tensor4::zeros([1, 2, h, w])).unwrap();
            assert_eq!(y.shape(), [1, 4, ho, wo]);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = TrainBlock::<f64>::init(&BlockConfig::separable(4, 4, 1, 1), BnInit::Identity, &mut rng).unwrap();
        assert!(block.forward_eval(&Tensor4::zeros([1, 3, 4, 4])).is_err());
        let inf = InferenceBlock::<f64>::init(&BlockConfig::separable(4, 4, 1, 1), &mut rng).unwrap();
        assert!(inf.forward_infer(&Tensor4::zeros([1, 3, 4, 4])).is_err());
    }
}
