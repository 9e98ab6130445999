//! Forecasting architectures.
//!
//! Every model maps a `[B, 8, 12, H, W]` history to a `[B, 8, 6, H, W]`
//! prediction. Parameters live in a flat name → [`KernelWeights`] map inside a
//! [`ModelState`], so optimizers, checkpoints and parity checks never need to
//! know the topology.

mod checkpoint;
mod resnet;
mod unet;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::sparse::SparseConvMode;
use crate::tensor::{mse_loss, ConvSpec, DenseTensor, GradientTape, KernelWeights, Real};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use resnet::{conv_output_block, resnet_features, sequential_output_block};
pub use unet::{conv3d_unet_forward, fold_history, sparse_unet_forward, unfold_prediction};

/// Traffic channels per frame: volume and speed for four headings.
pub const CHANNELS: usize = 8;
/// Observed frames per sample.
pub const HISTORY: usize = 12;
/// Predicted frames per sample.
pub const HORIZON: usize = 6;

/// The five trainable variants exposed on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    ResNet3D,
    ResNet3DConvOutput,
    ResNet2D,
    SparseUNet,
    Conv3DUNet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::ResNet3D,
        ModelKind::ResNet3DConvOutput,
        ModelKind::ResNet2D,
        ModelKind::SparseUNet,
        ModelKind::Conv3DUNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ResNet3D => "3dresnet",
            ModelKind::ResNet3DConvOutput => "3dresnet-convout",
            ModelKind::ResNet2D => "2dresnet",
            ModelKind::SparseUNet => "sparse-unet",
            ModelKind::Conv3DUNet => "conv3d-unet",
        }
    }

    pub fn default_config(self) -> ModelConfig {
        let resnet = ResNet3DConfig::default();
        let unet = UNetConfig::default();
        match self {
            ModelKind::ResNet3D => ModelConfig::ResNet(resnet),
            ModelKind::ResNet3DConvOutput => ModelConfig::ResNet(ResNet3DConfig {
                output_mode: OutputMode::ConvOutput,
                ..resnet
            }),
            ModelKind::ResNet2D => ModelConfig::ResNet(ResNet3DConfig {
                output_mode: OutputMode::ConvOutput,
                conv_dim: ConvDim::D2,
                ..resnet
            }),
            ModelKind::SparseUNet => ModelConfig::UNet(unet),
            ModelKind::Conv3DUNet => ModelConfig::UNet(UNetConfig {
                backend: UNetBackend::Dense3D,
                ..unet
            }),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputMode {
    /// Six chained layers, each fed the previous predicted frame.
    Sequential,
    /// One convolution emitting all six frames at once.
    ConvOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvDim {
    D3,
    /// Time folded into channels; every kernel has unit time extent.
    D2,
}

/// What the first sequential output layer sees as its "previous frame".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorFrame {
    Zero,
    LastObserved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResNet3DConfig {
    pub in_channels: usize,
    pub stem_hidden: usize,
    pub num_residual_blocks: usize,
    pub output_mode: OutputMode,
    pub conv_dim: ConvDim,
    pub history: usize,
    pub horizon: usize,
    pub prior_frame: PriorFrame,
}

impl Default for ResNet3DConfig {
    fn default() -> Self {
        Self {
            in_channels: CHANNELS,
            stem_hidden: 16,
            num_residual_blocks: 4,
            output_mode: OutputMode::Sequential,
            conv_dim: ConvDim::D3,
            history: HISTORY,
            horizon: HORIZON,
            prior_frame: PriorFrame::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UNetBackend {
    Sparse,
    Dense3D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Channels per frame; the network sees `in_channels * history` after folding.
    pub in_channels: usize,
    pub out_channels: usize,
    pub history: usize,
    pub horizon: usize,
    pub backend: UNetBackend,
    /// Only used by the sparse backend.
    pub sparse_mode: SparseConvMode,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            in_channels: CHANNELS,
            out_channels: CHANNELS,
            history: HISTORY,
            horizon: HORIZON,
            backend: UNetBackend::Sparse,
            sparse_mode: SparseConvMode::Submanifold,
        }
    }
}

impl UNetConfig {
    /// Channel width of encoder level `l`; `l == levels` is the bottleneck.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelConfig {
    ResNet(ResNet3DConfig),
    UNet(UNetConfig),
}

impl ModelConfig {
    /// The command-line name of this configuration, if it is one of the five presets' shapes.
    pub fn kind(&self) -> Option<ModelKind> {
        match self {
            ModelConfig::ResNet(c) => match (c.conv_dim, c.output_mode) {
                (ConvDim::D3, OutputMode::Sequential) => Some(ModelKind::ResNet3D),
                (ConvDim::D3, OutputMode::ConvOutput) => Some(ModelKind::ResNet3DConvOutput),
                (ConvDim::D2, OutputMode::ConvOutput) => Some(ModelKind::ResNet2D),
                (ConvDim::D2, OutputMode::Sequential) => None,
            },
            ModelConfig::UNet(c) => Some(match c.backend {
                UNetBackend::Sparse => ModelKind::SparseUNet,
                UNetBackend::Dense3D => ModelKind::Conv3DUNet,
            }),
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_owned()));
        match self {
            ModelConfig::ResNet(c) => {
                if c.in_channels == 0 || c.stem_hidden == 0 || c.history == 0 || c.horizon == 0 {
                    return bad("resnet channel, history and horizon sizes must be positive");
                }
            }
            ModelConfig::UNet(c) => {
                if c.levels == 0 || c.base_channels == 0 || c.in_channels == 0 || c.out_channels == 0 {
                    return bad("unet needs at least one level and positive widths");
                }
                if c.history == 0 || c.horizon == 0 {
                    return bad("unet history and horizon must be positive");
                }
            }
        }
        Ok(())
    }

    /// Every parameter with its layer geometry, in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, ConvSpec)> {
        match self {
            ModelConfig::ResNet(c) => resnet::param_specs(c),
            ModelConfig::UNet(c) => unet::param_specs(c),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|(_, s)| s.param_count()).sum()
    }

    pub fn history(&self) -> usize {
        match self {
            ModelConfig::ResNet(c) => c.history,
            ModelConfig::UNet(c) => c.history,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            ModelConfig::ResNet(c) => c.horizon,
            ModelConfig::UNet(c) => c.horizon,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            ModelConfig::ResNet(c) => c.in_channels,
            ModelConfig::UNet(c) => c.in_channels,
        }
    }

    /// `key=value` pairs describing the configuration, for checkpoints.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        match self {
            ModelConfig::ResNet(c) => vec![
                ("family", "resnet".into()),
                ("in_channels", c.in_channels.to_string()),
                ("stem_hidden", c.stem_hidden.to_string()),
                ("num_residual_blocks", c.num_residual_blocks.to_string()),
                (
                    "output_mode",
                    match c.output_mode {
                        OutputMode::Sequential => "sequential",
                        OutputMode::ConvOutput => "convoutput",
                    }
                    .into(),
                ),
                (
                    "conv_dim",
                    match c.conv_dim {
                        ConvDim::D3 => "3d",
                        ConvDim::D2 => "2d",
                    }
                    .into(),
                ),
                ("history", c.history.to_string()),
                ("horizon", c.horizon.to_string()),
                (
                    "prior_frame",
                    match c.prior_frame {
                        PriorFrame::Zero => "zero",
                        PriorFrame::LastObserved => "last_observed",
                    }
                    .into(),
                ),
            ],
            ModelConfig::UNet(c) => vec![
                ("family", "unet".into()),
                ("levels", c.levels.to_string()),
                ("base_channels", c.base_channels.to_string()),
                ("in_channels", c.in_channels.to_string()),
                ("out_channels", c.out_channels.to_string()),
                ("history", c.history.to_string()),
                ("horizon", c.horizon.to_string()),
                (
                    "backend",
                    match c.backend {
                        UNetBackend::Sparse => "sparse",
                        UNetBackend::Dense3D => "dense3d",
                    }
                    .into(),
                ),
                (
                    "sparse_mode",
                    match c.sparse_mode {
                        SparseConvMode::Submanifold => "submanifold",
                        SparseConvMode::Generalized => "generalized",
                    }
                    .into(),
                ),
            ],
        }
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::ModelMismatch(format!("config is missing {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::ModelMismatch(format!("config value {k:?} is not an integer")))
        };
        let unknown = |k: &str, v: &str| Error::ModelMismatch(format!("config {k}={v} is not recognised"));
        let config = match get("family")? {
            "resnet" => ModelConfig::ResNet(ResNet3DConfig {
                in_channels: num("in_channels")?,
                stem_hidden: num("stem_hidden")?,
                num_residual_blocks: num("num_residual_blocks")?,
                output_mode: match get("output_mode")? {
                    "sequential" => OutputMode::Sequential,
                    "convoutput" => OutputMode::ConvOutput,
                    v => return Err(unknown("output_mode", v)),
                },
                conv_dim: match get("conv_dim")? {
                    "3d" => ConvDim::D3,
                    "2d" => ConvDim::D2,
                    v => return Err(unknown("conv_dim", v)),
                },
                history: num("history")?,
                horizon: num("horizon")?,
                prior_frame: match get("prior_frame")? {
                    "zero" => PriorFrame::Zero,
                    "last_observed" => PriorFrame::LastObserved,
                    v => return Err(unknown("prior_frame", v)),
                },
            }),
            "unet" => ModelConfig::UNet(UNetConfig {
                levels: num("levels")?,
                base_channels: num("base_channels")?,
                in_channels: num("in_channels")?,
                out_channels: num("out_channels")?,
                history: num("history")?,
                horizon: num("horizon")?,
                backend: match get("backend")? {
                    "sparse" => UNetBackend::Sparse,
                    "dense3d" => UNetBackend::Dense3D,
                    v => return Err(unknown("backend", v)),
                },
                sparse_mode: match get("sparse_mode")? {
                    "submanifold" => SparseConvMode::Submanifold,
                    "generalized" => SparseConvMode::Generalized,
                    v => return Err(unknown("sparse_mode", v)),
                },
            }),
            v => return Err(unknown("family", v)),
        };
        config.check()?;
        Ok(config)
    }
}

/// Parameters, configuration and step counter of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T = f32> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, KernelWeights<T>>,
    pub step: u64,
}

impl<T: Real> ModelState<T> {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, spec)| {
                let w = KernelWeights::<T>::init(spec, &mut rng);
                (name, w)
            })
            .collect();
        Ok(Self {
            config,
            params,
            step: 0,
        })
    }

    /// Every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.check()?;
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, spec)| (name, KernelWeights::zeros(spec)))
            .collect();
        Ok(Self {
            config,
            params,
            step: 0,
        })
    }

    pub fn param(&self, name: &str) -> Result<&KernelWeights<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::ModelMismatch(format!("missing parameter {name}")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(KernelWeights::param_count).sum()
    }

    /// Checks that the parameter map is exactly what the configuration needs.
    pub fn validate(&self) -> Result<()> {
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::ModelMismatch(format!(
                "configuration needs {} parameters, state has {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (name, spec) in specs {
            self.param(&name)?.check_spec("ModelState::validate", &spec)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            step: self.step,
        }
    }
}

/// Result of one forward and backward pass.
#[derive(Clone, Debug)]
pub struct LossAndGrads<T = f32> {
    pub loss: f64,
    pub prediction: DenseTensor<T>,
    pub grads: GradientTape<T>,
}

fn check_history<T: Real>(config: &ModelConfig, x: &DenseTensor<T>) -> Result<[usize; 5]> {
    let d = x.dims5("model input")?;
    if d[1] != config.channels() {
        return Err(Error::shape("model input", "channels", config.channels(), d[1]));
    }
    if d[2] != config.history() {
        return Err(Error::shape("model input", "history frames", config.history(), d[2]));
    }
    Ok(d)
}

/// Prediction `[B, 8, 6, H, W]` for a history `[B, 8, 12, H, W]`.
pub fn forward<T: Real>(state: &ModelState<T>, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    check_history(&state.config, x)?;
    match &state.config {
        ModelConfig::ResNet(c) => Ok(resnet::forward(c, state, x)?.0),
        ModelConfig::UNet(c) => Ok(unet::forward(c, state, x)?.0),
    }
}

/// Mean squared error of the prediction against `target` together with the
/// gradient of every parameter.
pub fn loss_and_grads<T: Real>(
    state: &ModelState<T>,
    x: &DenseTensor<T>,
    target: &DenseTensor<T>,
) -> Result<LossAndGrads<T>> {
    let [b, c, _, h, w] = check_history(&state.config, x)?;
    target.expect_shape("model target", &[b, c, state.config.horizon(), h, w])?;
    let mut grads = GradientTape::new();
    let prediction = match &state.config {
        ModelConfig::ResNet(cfg) => {
            let (pred, cache) = resnet::forward(cfg, state, x)?;
            let mse = mse_loss(&pred, target)?;
            resnet::backward(cfg, state, &cache, &mse.grad, &mut grads)?;
            (pred, mse.loss)
        }
        ModelConfig::UNet(cfg) => {
            let (pred, cache) = unet::forward(cfg, state, x)?;
            let mse = mse_loss(&pred, target)?;
            unet::backward(cfg, state, &cache, &mse.grad, &mut grads)?;
            (pred, mse.loss)
        }
    };
    grads.check_covers(&state.params)?;
    Ok(LossAndGrads {
        loss: prediction.1.to_f64(),
        prediction: prediction.0,
        grads,
    })
}

/// Turns a state trained with the one-layer output block into the sequential
/// variant: the stem and residual blocks are copied, the output block is drawn
/// fresh from `seed`.
pub fn warm_up_swap<T: Real>(state: &ModelState<T>, seed: u64) -> Result<ModelState<T>> {
    let ModelConfig::ResNet(c) = state.config else {
        return Err(Error::ModelMismatch("warm-up swap needs a residual network".into()));
    };
    if c.output_mode != OutputMode::ConvOutput {
        return Err(Error::ModelMismatch(
            "warm-up swap needs a state trained with the one-layer output block".into(),
        ));
    }
    state.validate()?;
    let config = ModelConfig::ResNet(ResNet3DConfig {
        output_mode: OutputMode::Sequential,
        ..c
    });
    let mut next = ModelState::<T>::init(config, seed)?;
    for name in resnet::backbone_names(&c) {
        next.params.insert(name.clone(), state.param(&name)?.clone());
    }
    next.step = state.step;
    Ok(next)
}

/// Parameter names of the output stage (everything after the residual trunk).
pub fn output_block_names(config: &ModelConfig) -> Vec<String> {
    match config {
        ModelConfig::ResNet(c) => {
            let backbone = resnet::backbone_names(c);
            config
                .param_specs()
                .into_iter()
                .map(|(n, _)| n)
                .filter(|n| !backbone.contains(n))
                .collect()
        }
        ModelConfig::UNet(_) => vec!["head".into()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
            assert_eq!(k.default_config().kind(), Some(k));
        }
        assert!("resnet".parse::<ModelKind>().is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        for k in ModelKind::ALL {
            let c = k.default_config();
            let map = c.to_pairs().into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
            assert_eq!(ModelConfig::from_pairs(&map).unwrap(), c);
        }
    }

    #[test]
    fn output_stage_sizes() {
        let seq = ModelKind::ResNet3D.default_config();
        let conv = ModelKind::ResNet3DConvOutput.default_config();
        let count = |c: &ModelConfig| -> usize {
            let names = output_block_names(c);
            c.param_specs()
                .iter()
                .filter(|(n, _)| names.contains(n))
                .map(|(_, s)| s.param_count())
                .sum()
        };
        // 6 layers of (12*3*3*24*8 + 8) against one 12*3*3*16*48 + 48.
        assert_eq!(count(&seq), 124_464);
        assert_eq!(count(&conv), 82_992);
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelKind::ResNet2D.default_config();
        let a = ModelState::<f32>::init(c, 3).unwrap();
        assert_eq!(a, ModelState::init(c, 3).unwrap());
        assert_ne!(a, ModelState::init(c, 4).unwrap());
        a.validate().unwrap();
    }
}
