//! Layer building blocks shared by the towers, generator and recognizer.

use crate::autodiff::{self, AttentionVars, Real, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, Session};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.weight(&format!("{name}.w"), fan_in, fan_out),
            b: init.fill(&format!("{name}.b"), fan_out, 0.0),
        }
    }

    pub fn zeros<R: Real>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.zeros_matrix(&format!("{name}.w"), fan_in, fan_out),
            b: init.fill(&format!("{name}.b"), fan_out, 0.0),
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<R>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        autodiff::affine(&mut s.tape, x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: init.fill(&format!("{name}.gamma"), dim, 1.0),
            beta: init.fill(&format!("{name}.beta"), dim, 0.0),
            eps,
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<R>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.tape.layer_norm(x, g, b, self.eps)
    }
}

/// Per-frame affine map followed by per-channel PReLU (a 1×1 convolution
/// over a `T×D` sequence).
#[derive(Clone, Debug)]
pub struct AffinePrelu {
    pub linear: Linear,
    pub slope: ParamId,
}

impl AffinePrelu {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            linear: Linear::new(init, name, fan_in, fan_out),
            slope: init.fill(&format!("{name}.slope"), fan_out, 0.25),
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<R>, x: Var) -> Result<Var> {
        let h = self.linear.forward(s, x)?;
        let a = s.p(self.slope);
        s.tape.prelu(h, a)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            wq: init.weight(&format!("{name}.wq"), dim, dim),
            bq: init.fill(&format!("{name}.bq"), dim, 0.0),
            wk: init.weight(&format!("{name}.wk"), dim, dim),
            wv: init.weight(&format!("{name}.wv"), dim, dim),
            bv: init.fill(&format!("{name}.bv"), dim, 0.0),
            out: Linear::new(init, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<R>, q: Var, kv: Var) -> Result<Var> {
        let vars = AttentionVars {
            wq: s.p(self.wq),
            bq: s.p(self.bq),
            wk: s.p(self.wk),
            wv: s.p(self.wv),
            bv: s.p(self.bv),
            wo: s.p(self.out.w),
            bo: s.p(self.out.b),
        };
        autodiff::multi_head_attention(&mut s.tape, q, kv, kv, self.heads, &vars)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: AffinePrelu,
    pub out: Linear,
}

impl FeedForward {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, dim: usize, ffn: usize) -> Self {
        Self {
            hidden: AffinePrelu::new(init, &format!("{name}.ffn1"), dim, ffn),
            out: Linear::new(init, &format!("{name}.ffn2"), ffn, dim),
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<R>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(s, x)?;
        self.out.forward(s, h)
    }
}

/// `Norm(x + f(x))`.
pub fn residual_norm<R: Real>(s: &mut Session<R>, norm: &LayerNorm, x: Var, fx: Var) -> Result<Var> {
    let sum = s.tape.add(x, fx)?;
    norm.forward(s, sum)
}

/// Post-norm self-attention encoder layer (self-attention, feed-forward).
#[derive(Clone, Debug)]
pub struct SelfAttentionLayer {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl SelfAttentionLayer {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, dim: usize, heads: usize, ffn: usize, eps: f64) -> Self {
        Self {
            attn: Attention::new(init, &format!("{name}.self_attn"), dim, heads),
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim, eps),
            ffn: FeedForward::new(init, name, dim, ffn),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim, eps),
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<R>, x: Var) -> Result<Var> {
        let a = self.attn.forward(s, x, x)?;
        let a = s.dropout(a)?;
        let x = residual_norm(s, &self.norm1, x, a)?;
        let f = self.ffn.forward(s, x)?;
        residual_norm(s, &self.norm2, x, f)
    }
}
