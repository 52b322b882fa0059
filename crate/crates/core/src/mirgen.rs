//! Modality-invariant representation generator.
//!
//! The query stream `f_va` is a learned projection of `f_v ∥ f_a`. Each block
//! runs hybrid-modal attention against both modality-specific streams:
//! cross-attention from `f_va` into `f_m^spe`, gated per element by
//! `sigmoid(affine(f_m^spe ∥ f_va))`, then a per-frame affine + PReLU branch.
//! The branches are summed onto the residual and layer-normalised. The
//! specific streams stay fixed across blocks; `f_va` evolves.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{AffinePrelu, Attention, LayerNorm, Linear};
use crate::params::{Group, Init, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Visual, Modality::Audio];

    fn index(self) -> usize {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visual => "v",
            Modality::Audio => "a",
        }
    }
}

#[derive(Clone, Debug)]
pub struct HmaBranch {
    pub attn: Attention,
    pub mask: Linear,
    pub conv: AffinePrelu,
}

#[derive(Clone, Debug)]
pub struct HmaBlock {
    pub branches: [HmaBranch; 2],
    pub norm: LayerNorm,
}

impl HmaBlock {
    pub fn branch(&self, m: Modality) -> &HmaBranch {
        &self.branches[m.index()]
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub fuse: Linear,
    pub blocks: Vec<HmaBlock>,
}

/// Gated cross-attention output `s_m` and the gate that produced it.
pub struct HmaOutput {
    pub s: Var,
    pub mask: Var,
    pub shared: Var,
}

fn same_len<R: Real>(s: &Session<R>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (ta, tb) = (s.value(a).rows(), s.value(b).rows());
    if ta != tb {
        return Err(Error::dim(op, format!("T={ta} vs T={tb}")));
    }
    Ok(())
}

impl Generator {
    /// `blocks = 0` leaves only the fusion projection.
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: &ModelConfig, blocks: usize, seed: u64) -> Self {
        let d = cfg.d_model;
        let mut init = Init::new(store, Group::Generator, seed);
        let fuse = Linear::new(&mut init, "generator.fuse", 2 * d, d);
        let blocks = (0..blocks)
            .map(|b| {
                let branch = |init: &mut Init<'_, R>, m: Modality| {
                    let name = format!("generator.{b}.{}", m.tag());
                    HmaBranch {
                        attn: Attention::new(init, &format!("{name}.attn"), d, cfg.heads),
                        mask: Linear::new(init, &format!("{name}.mask"), 2 * d, d),
                        conv: AffinePrelu::new(init, &format!("{name}.conv"), d, d),
                    }
                };
                HmaBlock {
                    branches: [branch(&mut init, Modality::Visual), branch(&mut init, Modality::Audio)],
                    norm: LayerNorm::new(&mut init, &format!("generator.{b}.norm"), d, cfg.ln_eps),
                }
            })
            .collect();
        Self { fuse, blocks }
    }

    /// `f_va = affine(f_v ∥ f_a)`, `T×2D → T×D`.
    pub fn fuse_query<R: Real>(&self, s: &mut Session<R>, f_v: Var, f_a: Var) -> Result<Var> {
        same_len(s, "fuse_query", f_v, f_a)?;
        let cat = s.tape.concat(&[f_v, f_a])?;
        self.fuse.forward(s, cat)
    }

    /// Hybrid-modal attention of one block for modality `m`.
    pub fn hma<R: Real>(&self, s: &mut Session<R>, block: &HmaBlock, m: Modality, f_m_spe: Var, f_va: Var) -> Result<HmaOutput> {
        same_len(s, "hma", f_m_spe, f_va)?;
        let br = block.branch(m);
        let shared = br.attn.forward(s, f_va, f_m_spe)?;
        let cat = s.tape.concat(&[f_m_spe, f_va])?;
        let logits = br.mask.forward(s, cat)?;
        let mask = s.tape.sigmoid(logits)?;
        let gated = s.tape.mul(shared, mask)?;
        Ok(HmaOutput {
            s: gated,
            mask,
            shared,
        })
    }

    /// Runs all blocks; returns `f_va^inv`.
    pub fn generate<R: Real>(&self, s: &mut Session<R>, f_v_spe: Var, f_a_spe: Var, f_va: Var) -> Result<Var> {
        same_len(s, "generate", f_v_spe, f_va)?;
        same_len(s, "generate", f_a_spe, f_va)?;
        let mut q = f_va;
        for block in &self.blocks {
            let sv = self.hma(s, block, Modality::Visual, f_v_spe, q)?;
            let sa = self.hma(s, block, Modality::Audio, f_a_spe, q)?;
            let cv = block.branch(Modality::Visual).conv.forward(s, sv.s)?;
            let ca = block.branch(Modality::Audio).conv.forward(s, sa.s)?;
            let branches = s.tape.add(cv, ca)?;
            let sum = s.tape.add(q, branches)?;
            q = block.norm.forward(s, sum)?;
        }
        Ok(q)
    }
}
