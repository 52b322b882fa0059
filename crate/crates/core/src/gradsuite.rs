//! The gradient-check suite behind `mirgan gradcheck`: every tape primitive,
//! every composed module, and the full training objective, all at 64-bit.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{grad_check_with_fault, project_to_scalar, random_tensor, DEFAULT_EPS};
use crate::autodiff::{multi_head_attention, AttentionVars, GradCheckReport, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mim::{mim_loss, MimConfig};
use crate::model::{AblationMode, LossWeights, Model, ModelConfig};
use crate::params::{Group, Session};
use crate::recognition::ModalityMode;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Ops,
    Modules,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Modules, Scope::Full];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Modules => "modules",
            Scope::Full => "full",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope `{s}` (ops, modules, full)")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub scope: Scope,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Runner = fn(Option<&'static str>) -> Result<GradCheckReport>;

pub struct Case {
    pub name: &'static str,
    pub scope: Scope,
    run: Runner,
}

impl Case {
    pub fn run(&self, fault: Option<&'static str>) -> Result<CaseResult> {
        let rep = (self.run)(fault)?;
        Ok(CaseResult {
            name: self.name,
            scope: self.scope,
            coordinates: rep.coordinates,
            max_rel_error: rep.max_rel_error,
            passed: rep.passes(TOLERANCE),
        })
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, 1.0, &mut rng(seed))
}

/// Checks `op` applied to random inputs of the given shapes, reduced through
/// a fixed random projection.
fn op_check(fault: Option<&'static str>, shapes: &[&[usize]], seed: u64, op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    let inputs: Vec<_> = shapes.iter().enumerate().map(|(i, s)| rand(s, seed + i as u64)).collect();
    op_check_on(fault, inputs, seed, op)
}

fn op_check_on(fault: Option<&'static str>, inputs: Vec<Tensor<f64>>, seed: u64, op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check_with_fault(
        |tape, v| {
            let out = op(tape, v)?;
            if tape.value(out).len() == 1 {
                Ok(out)
            } else {
                // distinct from the input seeds, or the projection can equal
                // the input and sit at a stationary point
                project_to_scalar(tape, out, seed + 1000)
            }
        },
        &inputs,
        DEFAULT_EPS,
        fault,
    )
}

fn check_model() -> Model<f64> {
    let cfg = ModelConfig {
        d_visual_raw: 5,
        d_audio_raw: 4,
        d_model: 4,
        heads: 2,
        ffn_dim: 6,
        encoder_layers: 1,
        generator_blocks: 1,
        recognizer_layers: 1,
        disc_hidden: 3,
        num_classes: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(cfg, AblationMode::Full, 6).expect("valid fixture config");
    model.store.randomize_for_check(7);
    model
}

/// Checks the parameters of `groups` plus `extras`; every other parameter is
/// bound as a constant.
fn module_check(
    fault: Option<&'static str>,
    model: &Model<f64>,
    groups: &[Group],
    extras: Vec<Tensor<f64>>,
    f: impl Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let checked: Vec<bool> = model.store.iter().map(|p| groups.contains(&p.group)).collect();
    let n_checked = checked.iter().filter(|&&c| c).count();
    let inputs: Vec<Tensor<f64>> = model
        .store
        .iter()
        .filter(|p| groups.contains(&p.group))
        .map(|p| p.value.clone())
        .chain(extras)
        .collect();
    grad_check_with_fault(
        |tape, v| {
            let mut t = std::mem::take(tape);
            let mut vars = Vec::with_capacity(checked.len());
            let mut k = 0;
            for (p, &c) in model.store.iter().zip(&checked) {
                if c {
                    vars.push(v[k]);
                    k += 1;
                } else {
                    vars.push(t.constant(p.value.clone())?);
                }
            }
            let mut s = Session::from_vars(t, vars);
            let out = f(&mut s, &v[n_checked..]);
            *tape = s.tape;
            let out = out?;
            if tape.value(out).len() == 1 {
                Ok(out)
            } else {
                project_to_scalar(tape, out, 5)
            }
        },
        &inputs,
        DEFAULT_EPS,
        fault,
    )
}

fn attention_check(fault: Option<&'static str>) -> Result<GradCheckReport> {
    let d = 4;
    let mut r = rng(40);
    let mut inputs = vec![random_tensor(&[3, d], 1.0, &mut r), random_tensor(&[5, d], 1.0, &mut r)];
    for i in 0..4 {
        inputs.push(random_tensor(&[d, d], 0.6, &mut r));
        if i != 1 {
            inputs.push(random_tensor(&[d], 0.2, &mut r));
        }
    }
    op_check_on(fault, inputs, 41, |tape, v| {
        let p = AttentionVars {
            wq: v[2],
            bq: v[3],
            wk: v[4],
            wv: v[5],
            bv: v[6],
            wo: v[7],
            bo: v[8],
        };
        multi_head_attention(tape, v[0], v[1], v[1], 2, &p)
    })
}

fn full_objective(fault: Option<&'static str>) -> Result<GradCheckReport> {
    let model = check_model();
    let cfg = &model.config;
    let lens = [3usize, 4];
    let mut extras = Vec::new();
    let mut labels = Vec::new();
    let mut r = rng(90);
    for &t in &lens {
        extras.push(random_tensor(&[t, cfg.d_visual_raw], 1.0, &mut r));
        extras.push(random_tensor(&[t, cfg.d_audio_raw], 1.0, &mut r));
        labels.push((0..t).map(|_| r.gen_range(0..cfg.num_classes)).collect::<Vec<_>>());
    }
    let frames: usize = lens.iter().sum();
    let w = LossWeights {
        lambda_gan: 0.3,
        lambda_mim: 0.2,
        mim: MimConfig::default(),
    };
    let trainable = [
        Group::VisualFrontend,
        Group::AudioFrontend,
        Group::Encoders,
        Group::Generator,
        Group::Recognizer,
    ];
    module_check(fault, &model, &trainable, extras, |s, x| {
        let mut total: Option<Var> = None;
        for (i, l) in labels.iter().enumerate() {
            let fwd = model.forward_vars(s, x[2 * i], x[2 * i + 1], ModalityMode::AV)?;
            let pb = model.phase_b(s, &fwd, l, l.len() as f64 / frames as f64, 1.0 / lens.len() as f64, &w)?;
            total = Some(match total {
                None => pb.total,
                Some(t) => s.tape.add(t, pb.total)?,
            });
        }
        Ok(total.expect("two utterances"))
    })
}

pub fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:literal, $scope:ident, $run:expr) => {
            Case {
                name: $name,
                scope: Scope::$scope,
                run: $run,
            }
        };
    }
    vec![
        case!("matmul", Ops, |f| op_check(f, &[&[3, 4], &[4, 2]], 1, |t, v| t.matmul(v[0], v[1]))),
        case!("matmul_nt", Ops, |f| op_check(f, &[&[3, 4], &[2, 4]], 2, |t, v| t.matmul_nt(v[0], v[1]))),
        case!("add", Ops, |f| op_check(f, &[&[2, 3], &[2, 3]], 3, |t, v| t.add(v[0], v[1]))),
        case!("sub", Ops, |f| op_check(f, &[&[2, 3], &[2, 3]], 4, |t, v| t.sub(v[0], v[1]))),
        case!("mul", Ops, |f| op_check(f, &[&[2, 3], &[2, 3]], 5, |t, v| t.mul(v[0], v[1]))),
        case!("add_row", Ops, |f| op_check(f, &[&[3, 4], &[4]], 6, |t, v| t.add_row(v[0], v[1]))),
        case!("sigmoid", Ops, |f| op_check(f, &[&[2, 4]], 7, |t, v| t.sigmoid(v[0]))),
        case!("exp", Ops, |f| op_check(f, &[&[2, 4]], 8, |t, v| t.exp(v[0]))),
        case!("log", Ops, |f| {
            let x = rand(&[2, 4], 9).map(|v| 1.5 + v);
            op_check_on(f, vec![x], 9, |t, v| t.log(v[0]))
        }),
        case!("neg", Ops, |f| op_check(f, &[&[2, 4]], 10, |t, v| t.negate(v[0]))),
        case!("scale", Ops, |f| op_check(f, &[&[2, 4]], 11, |t, v| t.scale(v[0], -1.7))),
        case!("softplus", Ops, |f| op_check(f, &[&[2, 4]], 12, |t, v| t.softplus(v[0]))),
        case!("prelu", Ops, |f| op_check(f, &[&[3, 4], &[4]], 13, |t, v| t.prelu(v[0], v[1]))),
        case!("concat", Ops, |f| op_check(f, &[&[3, 2], &[3, 3]], 14, |t, v| t.concat(&[v[0], v[1]]))),
        case!("slice_cols", Ops, |f| op_check(f, &[&[3, 5]], 15, |t, v| t.slice_cols(v[0], 1, 3))),
        case!("softmax_rows", Ops, |f| op_check(f, &[&[3, 4]], 16, |t, v| t.softmax_rows(v[0]))),
        case!("layer_norm", Ops, |f| op_check(f, &[&[3, 5], &[5], &[5]], 17, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        case!("normalize_rows", Ops, |f| op_check(f, &[&[3, 4]], 18, |t, v| t.normalize_rows(v[0], 1e-8))),
        case!("cosine_rows", Ops, |f| op_check(f, &[&[3, 4], &[2, 4]], 19, |t, v| t.cosine_rows(v[0], v[1]))),
        case!("cross_entropy", Ops, |f| op_check(f, &[&[4, 5]], 20, |t, v| t.cross_entropy(v[0], &[0, 3, 1, 4]))),
        case!("sum", Ops, |f| op_check(f, &[&[3, 4]], 21, |t, v| t.sum(v[0]))),
        case!("mean", Ops, |f| op_check(f, &[&[3, 4]], 22, |t, v| t.mean(v[0]))),
        case!("attention", Ops, attention_check),
        case!("frontends", Modules, |f| {
            let m = check_model();
            let (dv, da) = (m.config.d_visual_raw, m.config.d_audio_raw);
            module_check(f, &m, &[Group::VisualFrontend, Group::AudioFrontend], vec![rand(&[4, dv], 30), rand(&[4, da], 31)], |s, x| {
                let fv = m.towers.visual_frontend(s, x[0])?;
                let fa = m.towers.audio_frontend(s, x[1])?;
                s.tape.concat(&[fv, fa])
            })
        }),
        case!("encoders", Modules, |f| {
            let m = check_model();
            let d = m.config.d_model;
            module_check(f, &m, &[Group::Encoders], vec![rand(&[4, d], 32), rand(&[4, d], 33)], |s, x| {
                let (v, a) = m.towers.encode(s, x[0], x[1])?;
                s.tape.concat(&[v, a])
            })
        }),
        case!("generator", Modules, |f| {
            let m = check_model();
            let d = m.config.d_model;
            module_check(f, &m, &[Group::Generator], vec![rand(&[4, d], 34), rand(&[4, d], 35)], |s, x| {
                let f_va = m.generator.fuse_query(s, x[0], x[1])?;
                m.generator.generate(s, x[0], x[1], f_va)
            })
        }),
        case!("discriminator_losses", Modules, |f| {
            let m = check_model();
            let d = m.config.d_model;
            let disc = m.discriminator.as_ref().expect("full model has a discriminator");
            let extras = vec![rand(&[4, d], 36), rand(&[4, d], 37), rand(&[4, d], 38)];
            module_check(f, &m, &[Group::Discriminator], extras, |s, x| {
                let ld = disc.loss_d(s, x[0], x[1], x[2])?;
                let lg = disc.loss_g(s, x[2])?;
                let lg = s.tape.scale(lg, 0.37)?;
                s.tape.add(ld, lg)
            })
        }),
        case!("mim_loss", Modules, |f| {
            op_check(f, &[&[4, 6], &[4, 6], &[4, 6]], 39, |t, v| mim_loss(t, v[0], v[1], v[2], &MimConfig::default()))
        }),
        case!("recognize", Modules, |f| {
            let m = check_model();
            let d = m.config.d_model;
            let extras = vec![rand(&[4, d], 42), rand(&[4, d], 43), rand(&[4, d], 44)];
            module_check(f, &m, &[Group::Recognizer], extras, |s, x| {
                let logits = m.recognizer.recognize(s, x[0], x[1], x[2])?;
                s.tape.cross_entropy(logits, &[0, 2, 1, 1])
            })
        }),
        case!("full_objective", Full, full_objective),
    ]
}

/// Runs every case whose scope is in `scopes`. With `fault`, that op's
/// backward rule is corrupted so failures can be demonstrated.
pub fn run(scopes: &[Scope], fault: Option<&'static str>) -> Result<Vec<CaseResult>> {
    cases()
        .iter()
        .filter(|c| scopes.contains(&c.scope))
        .map(|c| c.run(fault))
        .collect()
}
