//! Published MobileOne variants, the model builder, and parameter / MAC
//! accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{
    BlockActivation, BlockConfig, BlockKind, InferenceBlock, InitPolicy, TrainBlock,
};
use crate::error::{ensure_dim, Error, Result};
use crate::ops::{global_avgpool, linear, se_hidden, Linear, SE_RATIO};
use crate::tensor::{randn_vec, Scalar, Tensor4};

/// Base channel counts of the six block stages.
pub const BASE_CHANNELS: [usize; 6] = [64, 64, 128, 256, 256, 512];
/// Stride of the first block of each stage.
pub const STAGE_STRIDES: [usize; 6] = [2, 2, 2, 2, 1, 2];
/// Block counts of the S-variants.
pub const S_BLOCKS: [usize; 6] = [1, 2, 8, 5, 5, 1];
/// Output width cap of the stem stage.
pub const STEM_MAX_CHANNELS: usize = 64;

pub const VARIANTS: [&str; 8] = ["S0", "S1", "S2", "S3", "S4", "mu0", "mu1", "mu2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub stride: usize,
    pub base_channels: usize,
    pub alpha: f64,
    pub k: usize,
    pub activation: BlockActivation,
    pub kind: BlockKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_channels: Option<usize>,
}

impl StageSpec {
    pub fn channels(&self) -> usize {
        let c = (self.base_channels as f64 * self.alpha).round() as usize;
        self.max_channels.map_or(c, |m| c.min(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub n_classes: usize,
    pub in_channels: usize,
    pub input_resolution: usize,
    /// Attach 1×1 scale branches to 3×3 stages in train mode.
    pub scale_branch: bool,
    /// Attach skip-BN branches to shape-preserving stages in train mode.
    pub skip_branch: bool,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("architecture has no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 {
                return Err(Error::InvalidArgument(format!("stage {} has no blocks", i + 1)));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::InvalidArgument(format!(
                    "stage {} stride must be 1 or 2, got {}",
                    i + 1,
                    s.stride
                )));
            }
            if s.channels() == 0 {
                return Err(Error::InvalidArgument(format!("stage {} has zero channels", i + 1)));
            }
            if s.k == 0 || s.k > crate::block::MAX_K {
                return Err(Error::InvalidArgument(format!("stage {} k={} out of range", i + 1, s.k)));
            }
        }
        if self.n_classes == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArgument("classes and input channels must be positive".into()));
        }
        Ok(())
    }

    /// Width fed to the classifier.
    pub fn feature_width(&self) -> usize {
        self.stages.last().expect("validated").channels()
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Block configurations in execution order.
    pub fn block_configs(&self) -> Vec<BlockConfig> {
        let mut out = Vec::with_capacity(self.total_blocks());
        let mut c_in = self.in_channels;
        for s in &self.stages {
            let c_out = s.channels();
            for j in 0..s.blocks {
                out.push(BlockConfig {
                    kind: s.kind,
                    in_channels: c_in,
                    out_channels: c_out,
                    stride: if j == 0 { s.stride } else { 1 },
                    k: s.k,
                    scale: self.scale_branch,
                    skip: self.skip_branch,
                    activation: s.activation,
                });
                c_in = c_out;
            }
        }
        out
    }
}

fn variant_table(
    name: &str,
    blocks: [usize; 6],
    alphas: [f64; 6],
    ks: [usize; 6],
    se_from_stage: Option<usize>,
) -> ArchSpec {
    let stages = (0..6)
        .map(|i| StageSpec {
            blocks: blocks[i],
            stride: STAGE_STRIDES[i],
            base_channels: BASE_CHANNELS[i],
            alpha: alphas[i],
            k: ks[i],
            activation: match se_from_stage {
                Some(first) if i + 1 >= first => BlockActivation::SeRelu,
                _ => BlockActivation::Relu,
            },
            kind: if i == 0 { BlockKind::Stem } else { BlockKind::Separable },
            max_channels: (i == 0).then_some(STEM_MAX_CHANNELS),
        })
        .collect();
    ArchSpec {
        name: name.to_string(),
        stages,
        n_classes: 1000,
        in_channels: 3,
        input_resolution: 224,
        scale_branch: true,
        skip_branch: true,
    }
}

/// Looks up a published variant. Accepts `S0`..`S4` and `mu0`..`mu2`
/// (also `μ0`..`μ2`), case-insensitively.
pub fn variant_spec(name: &str) -> Result<ArchSpec> {
    let key = name.trim().to_ascii_lowercase().replace('μ', "mu");
    let spec = match key.as_str() {
        "s0" => variant_table("S0", S_BLOCKS, [0.75, 0.75, 1.0, 1.0, 1.0, 2.0], [4; 6], None),
        "s1" => variant_table("S1", S_BLOCKS, [1.5, 1.5, 1.5, 2.0, 2.0, 2.5], [1; 6], None),
        "s2" => variant_table("S2", S_BLOCKS, [1.5, 1.5, 2.0, 2.5, 2.5, 4.0], [1; 6], None),
        "s3" => variant_table("S3", S_BLOCKS, [2.0, 2.0, 2.5, 3.0, 3.0, 4.0], [1; 6], None),
        "s4" => variant_table("S4", S_BLOCKS, [3.0, 3.0, 3.5, 3.5, 3.5, 4.0], [1; 6], Some(5)),
        "mu0" => variant_table("mu0", [1, 2, 4, 3, 3, 1], [0.75, 0.75, 0.5, 0.5, 0.5, 0.75], [3; 6], None),
        "mu1" => variant_table("mu1", [1, 2, 6, 4, 4, 1], [0.75, 0.75, 0.75, 0.75, 0.75, 1.0], [2; 6], None),
        "mu2" => variant_table("mu2", [1, 2, 6, 4, 4, 1], [0.75, 0.75, 1.0, 1.0, 1.0, 1.0], [2; 6], None),
        _ => {
            return Err(Error::UnknownVariant {
                name: name.to_string(),
                valid: VARIANTS.join(", "),
            })
        }
    };
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Train,
    Inference,
}

impl ModelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Train => "train",
            ModelMode::Inference => "inference",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Train(TrainBlock<T>),
    Inference(InferenceBlock<T>),
    AvgPool,
    Linear(Linear<T>),
}

/// An instantiated network: blocks, then global average pool, then linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub name: String,
    pub mode: ModelMode,
    pub input_resolution: usize,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n < 3 {
            return Err(Error::InvalidArgument("model needs blocks, a pool and a linear head".into()));
        }
        if !matches!(self.layers[n - 2], Layer::AvgPool) || !matches!(self.layers[n - 1], Layer::Linear(_)) {
            return Err(Error::InvalidArgument("model must end with AvgPool then Linear".into()));
        }
        let mut channels = None;
        for l in &self.layers[..n - 2] {
            let (ci, co) = match (l, self.mode) {
                (Layer::Train(b), ModelMode::Train) => {
                    b.validate()?;
                    (b.in_channels(), b.out_channels())
                }
                (Layer::Inference(b), ModelMode::Inference) => (b.in_channels(), b.out_channels()),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "{} model contains a block of the other mode or a misplaced head layer",
                        self.mode.as_str()
                    )))
                }
            };
            if let Some(prev) = channels {
                ensure_dim("model", "block chaining", prev, ci)?;
            }
            channels = Some(co);
        }
        if let Layer::Linear(lin) = &self.layers[n - 1] {
            ensure_dim("model", "linear input", channels.unwrap_or(0), lin.in_features)?;
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        match &self.layers[0] {
            Layer::Train(b) => b.in_channels(),
            Layer::Inference(b) => b.in_channels(),
            _ => 0,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Linear(l)) => l.out_features,
            _ => 0,
        }
    }

    pub fn block_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Train(_) | Layer::Inference(_)))
            .count()
    }

    /// Eval-mode logits, shape (N, classes, 1, 1).
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = match l {
                Layer::Train(b) => b.forward_eval(&h)?,
                Layer::Inference(b) => b.forward_infer(&h)?,
                Layer::AvgPool => global_avgpool(&h),
                Layer::Linear(lin) => linear(&h, lin)?,
            };
        }
        Ok(h)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        crate::container::cast_model(self)
    }
}

/// Instantiates `spec` in the requested mode. The first block of a stage
/// carries the stride and channel change; later blocks preserve shape.
pub fn build_model<T: Scalar>(spec: &ArchSpec, mode: ModelMode, init: InitPolicy) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let mut layers = Vec::with_capacity(spec.total_blocks() + 2);
    for cfg in spec.block_configs() {
        layers.push(match mode {
            ModelMode::Train => Layer::Train(TrainBlock::init(&cfg, init.bn, &mut rng)?),
            ModelMode::Inference => Layer::Inference(InferenceBlock::init(&cfg, &mut rng)?),
        });
    }
    let f = spec.feature_width();
    layers.push(Layer::AvgPool);
    layers.push(Layer::Linear(Linear::new(
        randn_vec(f * spec.n_classes, 0.01, &mut rng),
        vec![T::zero(); spec.n_classes],
        f,
        spec.n_classes,
    )?));
    let model = Model {
        name: spec.name.clone(),
        mode,
        input_resolution: spec.input_resolution,
        layers,
    };
    model.validate()?;
    Ok(model)
}

/// Total scalar parameters: conv weights and biases, batchnorm vectors
/// (mu, sigma, gamma, beta) in train mode, squeeze-excite and linear.
pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Train(b) => b.param_count(),
            Layer::Inference(b) => b.param_count(),
            Layer::AvgPool => 0,
            Layer::Linear(lin) => lin.param_count(),
        })
        .sum()
}

/// Multiply-accumulate count of an inference model at `input_res`×`input_res`.
/// Convs count C_out·H_out·W_out·(C_in/groups)·K²; squeeze-excite counts its
/// pool, two 1×1 convs and gating multiply; pooling counts one op per input
/// element.
pub fn count_flops<T: Scalar>(model: &Model<T>, input_res: usize) -> Result<u64> {
    if model.mode != ModelMode::Inference {
        return Err(Error::WrongMode {
            expected: "inference",
            actual: model.mode.as_str(),
        });
    }
    let (mut h, mut w) = (input_res, input_res);
    let mut channels = model.in_channels();
    let mut macs: u64 = 0;
    for l in &model.layers {
        match l {
            Layer::Inference(b) => {
                for s in &b.stages {
                    ensure_dim("count_flops", "input channels", s.conv.in_channels(), channels)?;
                    let (ho, wo) = s.conv.out_size(h, w)?;
                    let k = s.conv.kernel();
                    let co = s.conv.out_channels();
                    macs += (co * ho * wo * (channels / s.conv.groups) * k * k) as u64;
                    if let Some(se) = &s.se {
                        let plane = (co * ho * wo) as u64;
                        macs += 2 * plane + 2 * (co * se.hidden()) as u64;
                    }
                    h = ho;
                    w = wo;
                    channels = co;
                }
            }
            Layer::AvgPool => {
                macs += (channels * h * w) as u64;
                h = 1;
                w = 1;
            }
            Layer::Linear(lin) => {
                macs += (lin.in_features * lin.out_features) as u64;
                channels = lin.out_features;
            }
            Layer::Train(_) => unreachable!("mode checked above"),
        }
    }
    Ok(macs)
}

/// Parameters of the inference form of `spec`, computed from the spec alone.
pub fn spec_inference_params(spec: &ArchSpec) -> usize {
    let mut total = 0;
    for cfg in spec.block_configs() {
        let se = cfg.activation == BlockActivation::SeRelu;
        for g in cfg.geometries() {
            total += g.out_channels * (g.in_channels / g.groups) * g.kernel * g.kernel + g.out_channels;
            if se {
                let hid = se_hidden(g.out_channels, SE_RATIO);
                total += 2 * g.out_channels * hid + hid + g.out_channels;
            }
        }
    }
    total + spec.feature_width() * spec.n_classes + spec.n_classes
}
