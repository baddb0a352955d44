//! Network configuration and the shared parameter registry for the boundary
//! generator and the proposal relation block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng_from_seed, ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature channels `C` of the input sequence.
    pub feature_dim: usize,
    /// Window length `l_w`.
    pub window_len: usize,
    /// Maximum proposal duration `D`.
    pub max_duration: usize,
    pub base_width: usize,
    pub unet_width: usize,
    /// Reduced channels `C_r` fed to proposal sampling.
    pub reduced_width: usize,
    /// Sample points `N` per proposal.
    pub num_samples: usize,
    /// Fractional extension of each proposal on both sides before sampling.
    pub sample_extension: f64,
    /// Output channels of the sample-axis contraction.
    pub prb_width: usize,
    /// Query/key channels of position attention.
    pub key_width: usize,
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            feature_dim: 8,
            window_len: 32,
            max_duration: 16,
            base_width: 64,
            unet_width: 64,
            reduced_width: 32,
            num_samples: 32,
            sample_extension: 0.25,
            prb_width: 64,
            key_width: 16,
            head_hidden: 32,
        }
    }

    pub fn paper_activitynet() -> Self {
        Self {
            feature_dim: 400,
            window_len: 100,
            max_duration: 100,
            base_width: 256,
            unet_width: 512,
            reduced_width: 128,
            num_samples: 32,
            sample_extension: 0.25,
            prb_width: 512,
            key_width: 64,
            head_hidden: 128,
        }
    }

    pub fn paper_thumos() -> Self {
        Self { window_len: 128, max_duration: 64, ..Self::paper_activitynet() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::InvalidArgument(format!("{field}: {msg}")));
        if self.window_len == 0 || self.window_len % 4 != 0 {
            return bad("window_len", format!("must be a positive multiple of 4, got {}", self.window_len));
        }
        if self.max_duration == 0 || self.max_duration > self.window_len {
            return bad(
                "max_duration",
                format!("must lie in 1..={}, got {}", self.window_len, self.max_duration),
            );
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("base_width", self.base_width),
            ("unet_width", self.unet_width),
            ("reduced_width", self.reduced_width),
            ("prb_width", self.prb_width),
            ("key_width", self.key_width),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return bad(name, "must be ≥ 1".into());
            }
        }
        if self.num_samples < 2 {
            return bad("num_samples", format!("must be ≥ 2, got {}", self.num_samples));
        }
        if !(self.sample_extension >= 0.0 && self.sample_extension.is_finite()) {
            return bad("sample_extension", format!("must be finite and ≥ 0, got {}", self.sample_extension));
        }
        Ok(())
    }

    /// Number of map cells `D · l_w`.
    pub fn cells(&self) -> usize {
        self.max_duration * self.window_len
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Convolution followed by per-channel scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub conv: ConvIds,
    pub scale: ParamId,
    pub shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct CbgIds {
    pub base1: ConvIds,
    pub base2: ConvIds,
    pub x00: BlockIds,
    pub x10: BlockIds,
    pub x20: BlockIds,
    pub x01: BlockIds,
    pub x11: BlockIds,
    pub x02: BlockIds,
    pub head01: ConvIds,
    pub head02: ConvIds,
}

#[derive(Clone, Copy, Debug)]
pub struct PrbIds {
    pub reduce: ConvIds,
    pub contract: ConvIds,
    pub query: ConvIds,
    pub key: ConvIds,
    pub value: ConvIds,
    pub skip: ConvIds,
    pub hidden: ConvIds,
    pub head: ConvIds,
}

/// All trainable parameters plus the handles the forward passes use.
#[derive(Clone, Debug)]
pub struct Model<S = f64> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub cbg: CbgIds,
    pub prb: PrbIds,
}

/// Weight standard deviation of the prediction layers.
pub const HEAD_INIT_STD: f64 = 0.01;

struct Init<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: crate::numerics::Rng,
}

impl<S: Scalar> Init<'_, S> {
    /// He-normal weights for ReLU layers, zero bias.
    fn conv(&mut self, name: &str, shape: &[usize], gain: f64) -> Result<ConvIds> {
        let fan_in: usize = shape[1..].iter().product();
        let std = (gain / fan_in as f64).sqrt();
        let w = Tensor::randn(shape.to_vec(), std, &mut self.rng);
        let w = self.store.add(format!("{name}.weight"), w)?;
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(vec![shape[0]]))?;
        Ok(ConvIds { w, b })
    }

    /// Sigmoid prediction layers start with small weights so every
    /// probability begins near 0.5 whatever the scale of the features.
    fn head(&mut self, name: &str, shape: &[usize]) -> Result<ConvIds> {
        let w = Tensor::randn(shape.to_vec(), HEAD_INIT_STD, &mut self.rng);
        let w = self.store.add(format!("{name}.weight"), w)?;
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(vec![shape[0]]))?;
        Ok(ConvIds { w, b })
    }

    fn block(&mut self, name: &str, c_out: usize, c_in: usize) -> Result<BlockIds> {
        let conv = self.conv(name, &[c_out, c_in, 3], 2.0)?;
        let scale = self.store.add(format!("{name}.scale"), Tensor::full(vec![c_out], S::one()))?;
        let shift = self.store.add(format!("{name}.shift"), Tensor::zeros(vec![c_out]))?;
        Ok(BlockIds { conv, scale, shift })
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: rng_from_seed(seed) };
        let c = &config;
        let (bw, u) = (c.base_width, c.unet_width);
        let cbg = CbgIds {
            base1: init.conv("base.conv1", &[bw, c.feature_dim, 3], 2.0)?,
            base2: init.conv("base.conv2", &[bw, bw, 3], 2.0)?,
            x00: init.block("cbg.x00", u, bw)?,
            x10: init.block("cbg.x10", u, u)?,
            x20: init.block("cbg.x20", u, u)?,
            x01: init.block("cbg.x01", u, 2 * u)?,
            x11: init.block("cbg.x11", u, 2 * u)?,
            x02: init.block("cbg.x02", u, 3 * u)?,
            head01: init.head("cbg.head01", &[2, u, 1])?,
            head02: init.head("cbg.head02", &[2, u, 1])?,
        };
        let p = c.prb_width;
        let prb = PrbIds {
            reduce: init.conv("prb.reduce", &[c.reduced_width, bw, 3], 2.0)?,
            contract: init.conv("prb.contract", &[p, c.reduced_width * c.num_samples, 1], 2.0)?,
            query: init.conv("prb.pos.query", &[c.key_width, p, 1], 1.0)?,
            key: init.conv("prb.pos.key", &[c.key_width, p, 1], 1.0)?,
            value: init.conv("prb.pos.value", &[p, p, 1], 1.0)?,
            skip: init.conv("prb.skip", &[p, p, 1], 1.0)?,
            hidden: init.conv("prb.hidden", &[c.head_hidden, p, 3, 3], 2.0)?,
            head: init.head("prb.head", &[2, c.head_hidden, 1, 1])?,
        };
        Ok(Self { config, store, cbg, prb })
    }

    /// Parameters registered under the `prb.` prefix.
    pub fn is_prb_param(&self, id: ParamId) -> bool {
        self.store.get(id).name.starts_with("prb.")
    }
}
