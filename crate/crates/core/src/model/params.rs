use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_INIT};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_mult: usize,
    pub max_seq: usize,
    /// Filled from the dataset vocabulary when left at 0.
    pub vocab_size: usize,
    pub dropout: f64,
    /// Standard deviation of every weight matrix at init.
    pub init_std: f64,
    /// Overrides `init_std` for the token embedding when set.
    pub embed_init_std: Option<f64>,
    pub rope_base: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 1,
            n_heads: 1,
            mlp_mult: 4,
            max_seq: 64,
            vocab_size: 0,
            dropout: 0.0,
            init_std: 0.02,
            embed_init_std: None,
            rope_base: 10_000.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads and n_layers must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!(
                "head dim {} must be even for rotary embedding",
                self.head_dim()
            ));
        }
        if self.vocab_size == 0 || self.max_seq == 0 || self.mlp_mult == 0 {
            return bad("vocab_size, max_seq and mlp_mult must be positive".into());
        }
        if self.dropout != 0.0 {
            return bad(format!(
                "dropout {} is not supported; only 0 is",
                self.dropout
            ));
        }
        if !(self.init_std > 0.0) || self.embed_init_std.is_some_and(|s| !(s > 0.0)) {
            return bad("init std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.d_model * self.mlp_mult
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, v, m) = (self.d_model, self.vocab_size, self.mlp_dim());
        let block = 2 * 2 * d + 4 * (d * d + d) + (d * m + m) + (m * d + d);
        2 * v * d + self.n_layers * block + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }
}

/// One pre-norm transformer block. Linear weights are stored `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub w_q: Array2<T>,
    pub b_q: Array1<T>,
    pub w_k: Array2<T>,
    pub b_k: Array1<T>,
    pub w_v: Array2<T>,
    pub b_v: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    pub ln2: LayerNorm<T>,
    pub w_fc: Array2<T>,
    pub b_fc: Array1<T>,
    pub w_proj: Array2<T>,
    pub b_proj: Array1<T>,
}

impl<T: Scalar> Block<T> {
    fn zeros(d: usize, m: usize) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            w_q: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            w_k: Array2::zeros((d, d)),
            b_k: Array1::zeros(d),
            w_v: Array2::zeros((d, d)),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2: LayerNorm::new(d),
            w_fc: Array2::zeros((d, m)),
            b_fc: Array1::zeros(m),
            w_proj: Array2::zeros((m, d)),
            b_proj: Array1::zeros(d),
        }
    }
}

/// Role of a tensor, which decides its initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
    Gain,
}

/// Weights of the causal transformer. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// Token embedding, `(vocab, d)`.
    pub wte: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    /// Unembedding, `(d, vocab)`; not tied to `wte`.
    pub w_unembed: Array2<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Shape-correct parameters with zero weights, unit gains and zero biases.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, v, m) = (config.d_model, config.vocab_size, config.mlp_dim());
        Self {
            config: config.clone(),
            wte: Array2::zeros((v, d)),
            blocks: (0..config.n_layers).map(|_| Block::zeros(d, m)).collect(),
            ln_f: LayerNorm::new(d),
            w_unembed: Array2::zeros((d, v)),
        }
    }

    /// All-zero tensors of the same shapes (gain tensors included).
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.config);
        for (_, _, mut t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, TensorKind, ArrayViewD<'_, T>)> {
        use TensorKind::*;
        let mut out = vec![("wte".to_string(), Embedding, self.wte.view().into_dyn())];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.extend([
                (p("ln1.gain"), Gain, b.ln1.gain.view().into_dyn()),
                (p("ln1.bias"), Bias, b.ln1.bias.view().into_dyn()),
                (p("attn.w_q"), Weight, b.w_q.view().into_dyn()),
                (p("attn.b_q"), Bias, b.b_q.view().into_dyn()),
                (p("attn.w_k"), Weight, b.w_k.view().into_dyn()),
                (p("attn.b_k"), Bias, b.b_k.view().into_dyn()),
                (p("attn.w_v"), Weight, b.w_v.view().into_dyn()),
                (p("attn.b_v"), Bias, b.b_v.view().into_dyn()),
                (p("attn.w_o"), Weight, b.w_o.view().into_dyn()),
                (p("attn.b_o"), Bias, b.b_o.view().into_dyn()),
                (p("ln2.gain"), Gain, b.ln2.gain.view().into_dyn()),
                (p("ln2.bias"), Bias, b.ln2.bias.view().into_dyn()),
                (p("mlp.w_fc"), Weight, b.w_fc.view().into_dyn()),
                (p("mlp.b_fc"), Bias, b.b_fc.view().into_dyn()),
                (p("mlp.w_proj"), Weight, b.w_proj.view().into_dyn()),
                (p("mlp.b_proj"), Bias, b.b_proj.view().into_dyn()),
            ]);
        }
        out.extend([
            (
                "ln_f.gain".to_string(),
                Gain,
                self.ln_f.gain.view().into_dyn(),
            ),
            (
                "ln_f.bias".to_string(),
                Bias,
                self.ln_f.bias.view().into_dyn(),
            ),
            (
                "w_unembed".to_string(),
                Weight,
                self.w_unembed.view().into_dyn(),
            ),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorKind, ArrayViewMutD<'_, T>)> {
        use TensorKind::*;
        let mut out = vec![("wte".to_string(), Embedding, self.wte.view_mut().into_dyn())];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let Block {
                ln1,
                w_q,
                b_q,
                w_k,
                b_k,
                w_v,
                b_v,
                w_o,
                b_o,
                ln2,
                w_fc,
                b_fc,
                w_proj,
                b_proj,
            } = b;
            out.extend([
                (p("ln1.gain"), Gain, ln1.gain.view_mut().into_dyn()),
                (p("ln1.bias"), Bias, ln1.bias.view_mut().into_dyn()),
                (p("attn.w_q"), Weight, w_q.view_mut().into_dyn()),
                (p("attn.b_q"), Bias, b_q.view_mut().into_dyn()),
                (p("attn.w_k"), Weight, w_k.view_mut().into_dyn()),
                (p("attn.b_k"), Bias, b_k.view_mut().into_dyn()),
                (p("attn.w_v"), Weight, w_v.view_mut().into_dyn()),
                (p("attn.b_v"), Bias, b_v.view_mut().into_dyn()),
                (p("attn.w_o"), Weight, w_o.view_mut().into_dyn()),
                (p("attn.b_o"), Bias, b_o.view_mut().into_dyn()),
                (p("ln2.gain"), Gain, ln2.gain.view_mut().into_dyn()),
                (p("ln2.bias"), Bias, ln2.bias.view_mut().into_dyn()),
                (p("mlp.w_fc"), Weight, w_fc.view_mut().into_dyn()),
                (p("mlp.b_fc"), Bias, b_fc.view_mut().into_dyn()),
                (p("mlp.w_proj"), Weight, w_proj.view_mut().into_dyn()),
                (p("mlp.b_proj"), Bias, b_proj.view_mut().into_dyn()),
            ]);
        }
        let ModelParams {
            ln_f, w_unembed, ..
        } = self;
        out.extend([
            (
                "ln_f.gain".to_string(),
                Gain,
                ln_f.gain.view_mut().into_dyn(),
            ),
            (
                "ln_f.bias".to_string(),
                Bias,
                ln_f.bias.view_mut().into_dyn(),
            ),
            (
                "w_unembed".to_string(),
                Weight,
                w_unembed.view_mut().into_dyn(),
            ),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Elementwise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        for ((_, _, src), (_, _, mut dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, &s| *d = U::of(s.to_f64_lossy()));
        }
        out
    }
}

/// Normal(0, std) weights, zero biases, unit gains; deterministic per seed.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut params = ModelParams::zeros(config);
    let mut rng = stream_rng(seed, STREAM_INIT);
    let weight = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let embed = Normal::new(0.0, config.embed_init_std.unwrap_or(config.init_std))
        .map_err(|e| Error::Config(e.to_string()))?;
    for (_, kind, mut t) in params.tensors_mut() {
        let dist = match kind {
            TensorKind::Embedding => &embed,
            TensorKind::Weight => &weight,
            TensorKind::Bias | TensorKind::Gain => continue,
        };
        t.iter_mut().for_each(|x| *x = T::of(dist.sample(&mut rng)));
    }
    Ok(params)
}
