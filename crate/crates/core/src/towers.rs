//! Modality front-ends and the paired modality-specific encoders.
//!
//! Each encoder layer runs both streams in lockstep: self-attention, then
//! cross-attention into the other stream's post-self-attention state, then
//! a feed-forward sublayer, each wrapped as `Norm(x + sublayer(x))`.

use crate::autodiff::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{residual_norm, AffinePrelu, Attention, FeedForward, LayerNorm, Linear};
use crate::params::{check_width, Group, Init, ParamStore, Session};

#[derive(Clone, Debug)]
pub struct AudioFrontend {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl AudioFrontend {
    pub fn forward<R: Real>(&self, s: &mut Session<R>, x_a: Var) -> Result<Var> {
        let h = self.proj.forward(s, x_a)?;
        self.norm.forward(s, h)
    }
}

/// Two affine layers with a PReLU between them, then layer norm.
#[derive(Clone, Debug)]
pub struct VisualFrontend {
    pub hidden: AffinePrelu,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl VisualFrontend {
    pub fn forward<R: Real>(&self, s: &mut Session<R>, x_v: Var) -> Result<Var> {
        let h = self.hidden.forward(s, x_v)?;
        let h = self.proj.forward(s, h)?;
        self.norm.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct StreamLayer {
    pub self_attn: Attention,
    pub norm_self: LayerNorm,
    pub cross_attn: Attention,
    pub norm_cross: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

impl StreamLayer {
    fn new<R: Real>(init: &mut Init<'_, R>, name: &str, cfg: &ModelConfig) -> Self {
        let (d, h, eps) = (cfg.d_model, cfg.heads, cfg.ln_eps);
        Self {
            self_attn: Attention::new(init, &format!("{name}.self_attn"), d, h),
            norm_self: LayerNorm::new(init, &format!("{name}.norm_self"), d, eps),
            cross_attn: Attention::new(init, &format!("{name}.cross_attn"), d, h),
            norm_cross: LayerNorm::new(init, &format!("{name}.norm_cross"), d, eps),
            ffn: FeedForward::new(init, name, d, cfg.ffn_dim),
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), d, eps),
        }
    }

    fn self_block<R: Real>(&self, s: &mut Session<R>, x: Var) -> Result<Var> {
        let a = self.self_attn.forward(s, x, x)?;
        let a = s.dropout(a)?;
        residual_norm(s, &self.norm_self, x, a)
    }

    fn cross_block<R: Real>(&self, s: &mut Session<R>, x: Var, other: Var) -> Result<Var> {
        let c = self.cross_attn.forward(s, x, other)?;
        let x = residual_norm(s, &self.norm_cross, x, c)?;
        let f = self.ffn.forward(s, x)?;
        residual_norm(s, &self.norm_ffn, x, f)
    }
}

/// Front-ends plus `N_E` paired encoder layers.
#[derive(Clone, Debug)]
pub struct Towers {
    pub audio: AudioFrontend,
    pub visual: VisualFrontend,
    pub visual_layers: Vec<StreamLayer>,
    pub audio_layers: Vec<StreamLayer>,
    pub positional_encoding: bool,
    d_model: usize,
    d_visual_raw: usize,
    d_audio_raw: usize,
}

impl Towers {
    /// `encoder_layers = 0` gives front-ends only.
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: &ModelConfig, encoder_layers: usize, seed: u64) -> Self {
        let d = cfg.d_model;
        let mut vf = Init::new(store, Group::VisualFrontend, seed);
        let visual = VisualFrontend {
            hidden: AffinePrelu::new(&mut vf, "visual_frontend.hidden", cfg.d_visual_raw, d),
            proj: Linear::new(&mut vf, "visual_frontend.proj", d, d),
            norm: LayerNorm::new(&mut vf, "visual_frontend.norm", d, cfg.ln_eps),
        };
        let mut af = Init::new(store, Group::AudioFrontend, seed);
        let audio = AudioFrontend {
            proj: Linear::new(&mut af, "audio_frontend.proj", cfg.d_audio_raw, d),
            norm: LayerNorm::new(&mut af, "audio_frontend.norm", d, cfg.ln_eps),
        };
        let mut enc = Init::new(store, Group::Encoders, seed);
        let visual_layers = (0..encoder_layers)
            .map(|l| StreamLayer::new(&mut enc, &format!("encoder.visual.{l}"), cfg))
            .collect();
        let audio_layers = (0..encoder_layers)
            .map(|l| StreamLayer::new(&mut enc, &format!("encoder.audio.{l}"), cfg))
            .collect();
        Self {
            audio,
            visual,
            visual_layers,
            audio_layers,
            positional_encoding: cfg.positional_encoding,
            d_model: d,
            d_visual_raw: cfg.d_visual_raw,
            d_audio_raw: cfg.d_audio_raw,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.visual_layers.len()
    }

    pub fn audio_frontend<R: Real>(&self, s: &mut Session<R>, x_a: Var) -> Result<Var> {
        check_width("audio_frontend", s.value(x_a).cols(), self.d_audio_raw)?;
        let f = self.audio.forward(s, x_a)?;
        self.add_positions(s, f)
    }

    pub fn visual_frontend<R: Real>(&self, s: &mut Session<R>, x_v: Var) -> Result<Var> {
        check_width("visual_frontend", s.value(x_v).cols(), self.d_visual_raw)?;
        let f = self.visual.forward(s, x_v)?;
        self.add_positions(s, f)
    }

    fn add_positions<R: Real>(&self, s: &mut Session<R>, f: Var) -> Result<Var> {
        if !self.positional_encoding {
            return Ok(f);
        }
        let t = s.value(f).rows();
        let pe = s.input(sinusoidal_positions(t, self.d_model))?;
        s.tape.add(f, pe)
    }

    /// `(f_v, f_a) -> (f_v^spe, f_a^spe)`.
    pub fn encode<R: Real>(&self, s: &mut Session<R>, f_v: Var, f_a: Var) -> Result<(Var, Var)> {
        let (tv, ta) = (s.value(f_v).rows(), s.value(f_a).rows());
        if tv != ta {
            return Err(Error::dim("encode", format!("visual T={tv}, audio T={ta}")));
        }
        let (mut v, mut a) = (f_v, f_a);
        for (lv, la) in self.visual_layers.iter().zip(&self.audio_layers) {
            let v1 = lv.self_block(s, v)?;
            let a1 = la.self_block(s, a)?;
            v = lv.cross_block(s, v1, a1)?;
            a = la.cross_block(s, a1, v1)?;
        }
        Ok((v, a))
    }
}

/// Standard sine/cosine position table, `T×D`.
pub fn sinusoidal_positions<R: Real>(t: usize, d: usize) -> Tensor<R> {
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            data.push(R::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(t, d, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{project_to_scalar, random_tensor, DEFAULT_EPS};
    use crate::autodiff::{grad_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_visual_raw: 5,
            d_audio_raw: 6,
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            encoder_layers: 2,
            ..ModelConfig::default()
        }
    }

    fn build(cfg: &ModelConfig) -> (ParamStore<f64>, Towers) {
        let mut store = ParamStore::new();
        let towers = Towers::new(&mut store, cfg, cfg.encoder_layers, 3);
        perturb(&mut store, 99);
        (store, towers)
    }

    // Move every parameter off its initial value so biases, norms and slopes
    // are exercised.
    fn perturb(store: &mut ParamStore<f64>, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for p in store.iter_mut() {
            let noise = random_tensor(p.value.shape(), 0.2, &mut r);
            for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }

    fn run(store: &ParamStore<f64>, towers: &Towers, xv: &Tensor<f64>, xa: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let mut s = Session::bind(store, |_| false).unwrap();
        let v = s.input(xv.clone()).unwrap();
        let a = s.input(xa.clone()).unwrap();
        let fv = towers.visual_frontend(&mut s, v).unwrap();
        let fa = towers.audio_frontend(&mut s, a).unwrap();
        let (ov, oa) = towers.encode(&mut s, fv, fa).unwrap();
        (s.value(ov).clone(), s.value(oa).clone())
    }

    #[test]
    fn audio_frontend_zero_input_gives_beta() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let towers = Towers::new(&mut store, &cfg, 0, 1);
        let mut s = Session::bind(&store, |_| false).unwrap();
        let x = s.input(Tensor::zeros(&[3, 6])).unwrap();
        let f = towers.audio_frontend(&mut s, x).unwrap();
        // zero input and zero bias: the projection is zero and the norm maps it to β = 0
        assert!(s.value(f).data().iter().all(|&v| v == 0.0));
        assert_eq!(s.value(f).shape(), &[3, 8]);
    }

    #[test]
    fn audio_frontend_rows_centre_on_beta() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let towers = Towers::new(&mut store, &cfg, 0, 1);
        let beta = towers.audio.norm.beta;
        store.get_mut(beta).value = Tensor::full(&[8], 0.7);
        let mut s = Session::bind(&store, |_| false).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = s.input(random_tensor(&[4, 6], 1.0, &mut r)).unwrap();
        let f = towers.audio_frontend(&mut s, x).unwrap();
        for i in 0..4 {
            let mean: f64 = s.value(f).row(i).iter().sum::<f64>() / 8.0;
            assert!((mean - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn visual_frontend_identity_layers() {
        let cfg = ModelConfig {
            d_visual_raw: 8,
            ..small_cfg()
        };
        let mut store = ParamStore::<f64>::new();
        let towers = Towers::new(&mut store, &cfg, 0, 1);
        store.get_mut(towers.visual.hidden.linear.w).value = Tensor::identity(8);
        store.get_mut(towers.visual.hidden.slope).value = Tensor::full(&[8], 1.0);
        store.get_mut(towers.visual.proj.w).value = Tensor::identity(8);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[3, 8], 1.0, &mut r);
        let mut s = Session::bind(&store, |_| false).unwrap();
        let xv = s.input(x.clone()).unwrap();
        let f = towers.visual_frontend(&mut s, xv).unwrap();
        let got = s.value(f).clone();
        let g = s.input(Tensor::full(&[8], 1.0)).unwrap();
        let b = s.input(Tensor::zeros(&[8])).unwrap();
        let norm = s.tape.layer_norm(xv, g, b, cfg.ln_eps).unwrap();
        for (a, b) in got.data().iter().zip(s.value(norm).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn visual_frontend_output_shape_for_any_raw_width() {
        for raw in [1, 3, 17] {
            let cfg = ModelConfig {
                d_visual_raw: raw,
                ..small_cfg()
            };
            let mut store = ParamStore::<f64>::new();
            let towers = Towers::new(&mut store, &cfg, 0, 1);
            let mut s = Session::bind(&store, |_| false).unwrap();
            let x = s.input(Tensor::full(&[5, raw], 0.3)).unwrap();
            let f = towers.visual_frontend(&mut s, x).unwrap();
            assert_eq!(s.value(f).shape(), &[5, 8]);
            let bad = s.input(Tensor::zeros(&[5, raw + 1])).unwrap();
            assert!(towers.visual_frontend(&mut s, bad).is_err());
        }
    }

    #[test]
    fn frontend_gradients() {
        let cfg = small_cfg();
        let (store, towers) = build(&cfg);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let xv = random_tensor(&[4, 5], 1.0, &mut r);
        let xa = random_tensor(&[4, 6], 1.0, &mut r);
        let n = store.len();
        let mut inputs = store.tensors();
        inputs.push(xv);
        inputs.push(xa);
        let rep = grad_check(
            |tape: &mut Tape<f64>, v| {
                let mut s = Session::from_vars(std::mem::take(tape), v[..n].to_vec());
                let fv = towers.visual_frontend(&mut s, v[n])?;
                let fa = towers.audio_frontend(&mut s, v[n + 1])?;
                let both = s.tape.concat(&[fv, fa])?;
                let out = project_to_scalar(&mut s.tape, both, 5)?;
                *tape = s.tape;
                Ok(out)
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn encode_full_tower_gradient() {
        let cfg = ModelConfig {
            encoder_layers: 1,
            ..small_cfg()
        };
        let (store, towers) = build(&cfg);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let n = store.len();
        let mut inputs = store.tensors();
        inputs.push(random_tensor(&[4, 5], 1.0, &mut r));
        inputs.push(random_tensor(&[4, 6], 1.0, &mut r));
        let rep = grad_check(
            |tape: &mut Tape<f64>, v| {
                let mut s = Session::from_vars(std::mem::take(tape), v[..n].to_vec());
                let fv = towers.visual_frontend(&mut s, v[n])?;
                let fa = towers.audio_frontend(&mut s, v[n + 1])?;
                let (ov, oa) = towers.encode(&mut s, fv, fa)?;
                let both = s.tape.concat(&[ov, oa])?;
                let out = project_to_scalar(&mut s.tape, both, 6)?;
                *tape = s.tape;
                Ok(out)
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn zero_weight_collapse_is_stack_of_norms() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let towers = Towers::new(&mut store, &cfg, cfg.encoder_layers, 8);
        for layer in towers.visual_layers.iter().chain(&towers.audio_layers) {
            for lin in [&layer.self_attn.out, &layer.cross_attn.out, &layer.ffn.out] {
                let w = store.get(lin.w).value.shape().to_vec();
                store.get_mut(lin.w).value = Tensor::zeros(&w);
                let b = store.get(lin.b).value.shape().to_vec();
                store.get_mut(lin.b).value = Tensor::zeros(&b);
            }
        }
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let fv = random_tensor(&[4, 8], 2.0, &mut r);
        let fa = random_tensor(&[4, 8], 2.0, &mut r);
        let mut s = Session::bind(&store, |_| false).unwrap();
        let v = s.input(fv).unwrap();
        let a = s.input(fa).unwrap();
        let (ov, oa) = towers.encode(&mut s, v, a).unwrap();
        let g = s.input(Tensor::full(&[8], 1.0)).unwrap();
        let b = s.input(Tensor::zeros(&[8])).unwrap();
        for (x, out) in [(v, ov), (a, oa)] {
            let mut y = x;
            for _ in 0..3 * cfg.encoder_layers {
                y = s.tape.layer_norm(y, g, b, cfg.ln_eps).unwrap();
            }
            assert_eq!(s.value(y).data(), s.value(out).data());
        }
    }

    #[test]
    fn encode_shapes_and_length_mismatch() {
        let cfg = small_cfg();
        let (store, towers) = build(&cfg);
        let mut s = Session::bind(&store, |_| false).unwrap();
        let v = s.input(Tensor::full(&[3, 8], 0.1)).unwrap();
        let a = s.input(Tensor::full(&[4, 8], 0.1)).unwrap();
        assert!(matches!(towers.encode(&mut s, v, a), Err(Error::Dimension { .. })));
        let a = s.input(Tensor::full(&[3, 8], 0.2)).unwrap();
        let (ov, oa) = towers.encode(&mut s, v, a).unwrap();
        assert_eq!(s.value(ov).shape(), &[3, 8]);
        assert_eq!(s.value(oa).shape(), &[3, 8]);
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let cfg = small_cfg();
        let (store, towers) = build(&cfg);
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let xv = random_tensor(&[5, 5], 1.0, &mut r);
        let xa = random_tensor(&[5, 6], 1.0, &mut r);
        let perm = [3, 0, 4, 1, 2];
        let (ov, oa) = run(&store, &towers, &xv, &xa);
        let (pv, pa) = run(&store, &towers, &xv.select_rows(&perm), &xa.select_rows(&perm));
        for (orig, permuted) in [(ov, pv), (oa, pa)] {
            let expected = orig.select_rows(&perm);
            for (x, y) in expected.data().iter().zip(permuted.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn positional_encoding_breaks_equivariance() {
        let cfg = ModelConfig {
            positional_encoding: true,
            ..small_cfg()
        };
        let (store, towers) = build(&cfg);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let xv = random_tensor(&[4, 5], 1.0, &mut r);
        let xa = random_tensor(&[4, 6], 1.0, &mut r);
        let perm = [1, 0, 2, 3];
        let (ov, _) = run(&store, &towers, &xv, &xa);
        let (pv, _) = run(&store, &towers, &xv.select_rows(&perm), &xa.select_rows(&perm));
        let diff: f64 = ov
            .select_rows(&perm)
            .data()
            .iter()
            .zip(pv.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn no_cross_utterance_mixing() {
        // Outputs for one utterance do not depend on which other utterance
        // is processed alongside it.
        let cfg = small_cfg();
        let (store, towers) = build(&cfg);
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let xv = random_tensor(&[3, 5], 1.0, &mut r);
        let xa = random_tensor(&[3, 6], 1.0, &mut r);
        let alone = run(&store, &towers, &xv, &xa);
        let mut s = Session::bind(&store, |_| false).unwrap();
        let ov = s.input(random_tensor(&[6, 5], 1.0, &mut r)).unwrap();
        let oa = s.input(random_tensor(&[6, 6], 1.0, &mut r)).unwrap();
        let fv = towers.visual_frontend(&mut s, ov).unwrap();
        let fa = towers.audio_frontend(&mut s, oa).unwrap();
        towers.encode(&mut s, fv, fa).unwrap();
        let v = s.input(xv).unwrap();
        let a = s.input(xa).unwrap();
        let fv = towers.visual_frontend(&mut s, v).unwrap();
        let fa = towers.audio_frontend(&mut s, a).unwrap();
        let (ev, ea) = towers.encode(&mut s, fv, fa).unwrap();
        assert_eq!(s.value(ev), &alone.0);
        assert_eq!(s.value(ea), &alone.1);
    }
}
