//! Transformer building blocks. Layers hold parameter ids only; values live
//! in a [`ParamStore`] and every forward pass runs on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AttnMask, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Registers freshly initialized parameters under a common name prefix.
pub(crate) struct Init<'a, F, R: ?Sized> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut R,
}

impl<F: Real, R: Rng + ?Sized> Init<'_, F, R> {
    pub fn randn(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.store.add(name, Tensor::filled(shape, F::one()))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        self.linear_std(name, d_in, d_out, 1.0 / (d_in as f64).sqrt())
    }

    pub fn linear_std(&mut self, name: &str, d_in: usize, d_out: usize, std: f64) -> Linear {
        Linear {
            w: self.randn(&format!("{name}.w"), vec![d_out, d_in], std),
            b: Some(self.zeros(&format!("{name}.b"), vec![d_out])),
            d_in,
            d_out,
            lora: None,
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            g: self.ones(&format!("{name}.g"), vec![d]),
            b: self.zeros(&format!("{name}.b"), vec![d]),
        }
    }
}

/// Low-rank update `(alpha / r) · B · A` attached to a [`Linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

/// `y = x · Wᵀ + b`, optionally plus a LoRA update.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        let y = g.affine(x, w, b)?;
        let Some(lora) = &self.lora else { return Ok(y) };
        let a = g.param(lora.a);
        let bm = g.param(lora.b);
        let down = g.affine(x, a, None)?;
        let up = g.affine(down, bm, None)?;
        let up = g.scale(up, F::lit(lora.scale));
        g.add(y, up)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gain = g.param(self.g);
        let bias = g.param(self.b);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Projection inside an attention block that LoRA may target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    pub fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(Projection::Query),
            "key" | "k" => Ok(Projection::Key),
            "value" | "v" => Ok(Projection::Value),
            "output" | "o" => Ok(Projection::Output),
            _ => Err(Error::Config(format!("unknown projection {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new<F: Real, R: Rng + ?Sized>(
        init: &mut Init<'_, F, R>,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        MultiHeadAttention {
            q: init.linear(&format!("{name}.q"), d, d),
            k: init.linear(&format!("{name}.k"), d, d),
            v: init.linear(&format!("{name}.v"), d, d),
            o: init.linear(&format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Linear {
        match p {
            Projection::Query => &mut self.q,
            Projection::Key => &mut self.k,
            Projection::Value => &mut self.v,
            Projection::Output => &mut self.o,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        memory: Var,
        mask: &AttnMask,
    ) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer layer: self-attention, optional cross-attention,
/// feed-forward, each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub(crate) fn new<F: Real, R: Rng + ?Sized>(
        init: &mut Init<'_, F, R>,
        name: &str,
        d: usize,
        heads: usize,
        ffn_dim: usize,
        cross: bool,
    ) -> Self {
        let ln_self = init.layer_norm(&format!("{name}.ln_self"), d);
        let self_attn = MultiHeadAttention::new(init, &format!("{name}.attn"), d, heads);
        let cross = cross.then(|| {
            (
                init.layer_norm(&format!("{name}.ln_cross"), d),
                MultiHeadAttention::new(init, &format!("{name}.cross"), d, heads),
            )
        });
        let ln_ffn = init.layer_norm(&format!("{name}.ln_ffn"), d);
        let ffn = FeedForward {
            up: init.linear(&format!("{name}.ffn.up"), d, ffn_dim),
            down: init.linear(&format!("{name}.ffn.down"), ffn_dim, d),
        };
        TransformerLayer {
            ln_self,
            self_attn,
            cross,
            ln_ffn,
            ffn,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        memory: Option<Var>,
        causal: bool,
    ) -> Result<Var> {
        let mask = if causal {
            AttnMask::causal()
        } else {
            AttnMask::none()
        };
        let h = self.ln_self.forward(g, x)?;
        let h = self.self_attn.forward(g, h, h, &mask)?;
        let mut x = g.add(x, h)?;
        if let (Some((ln, attn)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(g, x)?;
            let h = attn.forward(g, h, mem, &AttnMask::none())?;
            x = g.add(x, h)?;
        }
        let h = self.ln_ffn.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        g.add(x, h)
    }
}

/// Sinusoidal position table for positions `start..start + n`.
pub fn sinusoid<F: Real>(start: usize, n: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(n * d);
    for pos in start..start + n {
        for i in 0..d {
            let freq = (10000f64).powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            out.push(F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

/// Adds sinusoidal positions (starting at `start`) to the rows of `x`.
pub fn add_positions<F: Real>(g: &mut Graph<'_, F>, x: Var, start: usize) -> Result<Var> {
    let (n, d) = (g.rows(x), g.cols(x));
    let pe = g.input(vec![n, d], sinusoid(start, n, d))?;
    g.add(x, pe)
}

/// Hyperparameters of a transformer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

/// A stack of transformer layers followed by a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<TransformerLayer>,
    pub ln_final: LayerNorm,
}

impl Stack {
    pub(crate) fn new<F: Real, R: Rng + ?Sized>(
        init: &mut Init<'_, F, R>,
        name: &str,
        cfg: &StackConfig,
        cross: bool,
    ) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| {
                TransformerLayer::new(
                    init,
                    &format!("{name}.layers.{i}"),
                    cfg.embed_dim,
                    cfg.heads,
                    cfg.ffn_dim,
                    cross,
                )
            })
            .collect();
        Stack {
            layers,
            ln_final: init.layer_norm(&format!("{name}.ln_final"), cfg.embed_dim),
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        mut x: Var,
        memory: Option<Var>,
        causal: bool,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, memory, causal)?;
        }
        self.ln_final.forward(g, x)
    }
}
