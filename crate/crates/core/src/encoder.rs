//! Pre-layernorm S4 blocks and the context encoder built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::ssm::{init_dplr, SsmVars};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct S4BlockConfig {
    pub model_dim: usize,
    pub state_dim: usize,
    pub ffn_hidden: usize,
    /// Longest sequence the block accepts.
    pub max_len: usize,
}

impl Default for S4BlockConfig {
    fn default() -> Self {
        S4BlockConfig {
            model_dim: 32,
            state_dim: 16,
            ffn_hidden: 64,
            max_len: 1024,
        }
    }
}

impl S4BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.state_dim == 0 || self.ffn_hidden == 0 || self.max_len == 0 {
            return Err(Error::contract(format!("S4 block sizes must be at least 1: {self:?}")));
        }
        Ok(())
    }
}

/// Parameter ids of a bank of per-channel SSMs.
#[derive(Clone, Debug)]
pub struct SsmBank {
    pub log_neg_re: ParamId,
    pub im: ParamId,
    pub p: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub log_dt: ParamId,
}

impl SsmBank {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, state_dim: usize, rng: &mut R) -> Result<Self> {
        let (m, pairs) = (state_dim / 2 + state_dim % 2, state_dim / 2);
        let mut re = Vec::with_capacity(channels * m);
        let mut im = Vec::with_capacity(channels * pairs);
        let mut p = Vec::with_capacity(channels * state_dim);
        let mut b = Vec::with_capacity(channels * state_dim);
        let mut c = Vec::with_capacity(channels * state_dim);
        let mut log_dt = Vec::with_capacity(channels);
        for _ in 0..channels {
            let ssm = init_dplr(state_dim, rng.gen())?;
            re.extend(ssm.lambda_re.iter().map(|v| (-v).ln()));
            im.extend(&ssm.lambda_im);
            p.extend(&ssm.p);
            b.extend(&ssm.b);
            c.extend(&ssm.c);
            log_dt.push(ssm.log_dt);
        }
        let mut add = |suffix: &str, shape: Vec<usize>, data: Vec<f64>| {
            store.add(format!("{name}.{suffix}"), Tensor::from_parts(shape, data))
        };
        Ok(SsmBank {
            log_neg_re: add("log_neg_re", vec![channels, m], re),
            im: add("im", vec![channels, pairs], im),
            p: add("p", vec![channels, state_dim], p),
            b: add("b", vec![channels, state_dim], b),
            c: add("c", vec![channels, state_dim], c),
            log_dt: add("log_dt", vec![channels], log_dt),
        })
    }

    pub fn vars(&self, g: &mut Graph<'_>) -> SsmVars {
        SsmVars {
            log_neg_re: g.param(self.log_neg_re),
            im: g.param(self.im),
            p: g.param(self.p),
            b: g.param(self.b),
            c: g.param(self.c),
            log_dt: g.param(self.log_dt),
        }
    }
}

/// `y₁ = x + W·GELU(SSM(LN(x)))`, `y = y₁ + FFN(LN(y₁))`.
#[derive(Clone, Debug)]
pub struct S4Block {
    pub config: S4BlockConfig,
    pub norm_ssm: LayerNorm,
    pub ssm: SsmBank,
    pub mix: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl S4Block {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: S4BlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        Ok(S4Block {
            norm_ssm: LayerNorm::new(store, &format!("{name}.norm_ssm"), d),
            ssm: SsmBank::new(store, &format!("{name}.ssm"), d, config.state_dim, rng)?,
            mix: Linear::new(store, &format!("{name}.mix"), d, d, true, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, config.ffn_hidden, true, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), config.ffn_hidden, d, true, rng),
            config,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.model_dim {
            return Err(Error::dim(format!(
                "S4 block of width {} got input {shape:?}",
                self.config.model_dim
            )));
        }
        let len = shape[0];
        if len == 0 || len > self.config.max_len {
            return Err(Error::contract(format!(
                "sequence length {len} outside 1..={}",
                self.config.max_len
            )));
        }
        let u = self.norm_ssm.forward(g, x)?;
        let vars = self.ssm.vars(g);
        let kernel = g.ssm_kernel(vars, len)?;
        let y = g.causal_conv(kernel, u)?;
        let y = g.gelu(y)?;
        let y = self.mix.forward(g, y)?;
        let x1 = g.add(x, y)?;

        let v = self.norm_ffn.forward(g, x1)?;
        let v = self.ffn_in.forward(g, v)?;
        let v = g.gelu(v)?;
        let v = self.ffn_out.forward(g, v)?;
        g.add(x1, v)
    }

    /// Output projections of both residual branches.
    pub fn output_projections(&self) -> Vec<ParamId> {
        let mut ids = self.mix.params();
        ids.extend(self.ffn_out.params());
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub n_blocks: usize,
    pub block: S4BlockConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 40,
            n_blocks: 2,
            block: S4BlockConfig::default(),
        }
    }
}

/// Input projection, a stack of S4 blocks, and a closing layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<S4Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.block.model_dim;
        let input = Linear::new(store, "encoder.input", config.input_dim, d, true, &mut rng);
        let blocks = (0..config.n_blocks)
            .map(|i| S4Block::new(store, &format!("encoder.block{i}"), config.block.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", d);
        Ok(Encoder {
            config,
            input,
            blocks,
            norm,
        })
    }

    /// `x [T×input_dim]` → `[T×model_dim]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = self.input.forward(g, x)?;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        self.norm.forward(g, h)
    }
}
