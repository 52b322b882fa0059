//! Named, grouped parameter storage and per-forward binding onto a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter partition used by the two-phase optimiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    VisualFrontend,
    AudioFrontend,
    Encoders,
    Generator,
    Discriminator,
    Recognizer,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::VisualFrontend,
        Group::AudioFrontend,
        Group::Encoders,
        Group::Generator,
        Group::Discriminator,
        Group::Recognizer,
    ];

    fn index(self) -> u64 {
        Group::ALL.iter().position(|&g| g == self).unwrap() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<R>,
}

/// Flat, ordered parameter list. The order is the serialisation order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: String, group: Group, value: Tensor<R>) -> ParamId {
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<R> {
        &mut self.params[id.0]
    }

    pub fn get_index(&self, i: usize) -> &Param<R> {
        &self.params[i]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.params.iter().any(|p| p.group == group)
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Replaces every value with a random draw shaped like a trained network:
    /// unit-scale weights, small biases, gains near one. Used to move gradient
    /// checks off the zero-initialised and rank-collapsed corners, where some
    /// gradients fall below finite-difference resolution.
    pub fn randomize_for_check(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let kind = p.name.rsplit('.').next().unwrap_or("");
            let (lo, hi) = match kind {
                "gamma" => (0.7, 1.3),
                "slope" => (0.05, 0.5),
                "b" | "bq" | "bv" | "beta" => (-0.1, 0.1),
                _ => (-1.0, 1.0),
            };
            for v in p.value.data_mut() {
                *v = R::from_f64(rng.gen_range(lo..hi));
            }
        }
    }

    /// Values in store order, for gradient checking.
    pub fn tensors(&self) -> Vec<Tensor<R>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }
}

/// Deterministic initialiser for one parameter group. Each group draws from
/// its own stream, so adding or removing a module leaves the others intact.
pub struct Init<'a, R> {
    store: &'a mut ParamStore<R>,
    group: Group,
    rng: ChaCha8Rng,
}

impl<'a, R: Real> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore<R>, group: Group, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(group.index() + 1);
        Self { store, group, rng }
    }

    /// Glorot-uniform `fan_in × fan_out` matrix.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| R::from_f64(self.rng.gen_range(-limit..limit)))
            .collect();
        let t = Tensor::matrix(fan_in, fan_out, data).expect("shape matches data");
        self.store.push(name.to_string(), self.group, t)
    }

    pub fn zeros_matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store
            .push(name.to_string(), self.group, Tensor::zeros(&[rows, cols]))
    }

    pub fn fill(&mut self, name: &str, len: usize, value: f64) -> ParamId {
        self.store
            .push(name.to_string(), self.group, Tensor::full(&[len], R::from_f64(value)))
    }
}

/// A forward pass in progress: the tape plus the tape variable of every
/// parameter. Parameters are copied in at bind time.
pub struct Session<R> {
    pub tape: Tape<R>,
    vars: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<R: Real> Session<R> {
    /// Binds every parameter; those whose group satisfies `trainable` become
    /// gradient-receiving leaves, the rest constants.
    pub fn bind(store: &ParamStore<R>, trainable: impl Fn(Group) -> bool) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = store
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable(p.group)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tape,
            vars,
            dropout: None,
        })
    }

    /// Session over an existing tape whose first variables are the parameters
    /// in store order.
    pub fn from_vars(tape: Tape<R>, vars: Vec<Var>) -> Self {
        Self {
            tape,
            vars,
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn input(&mut self, t: Tensor<R>) -> Result<Var> {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity when the session has no dropout configured.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let shape = self.tape.value(x).shape().to_vec();
        let n = self.tape.value(x).len();
        let scale = R::from_f64(1.0 / keep);
        let mask = (0..n)
            .map(|_| if rng.gen_bool(keep) { scale } else { R::zero() })
            .collect();
        let mask = self.tape.constant(Tensor::new(shape, mask)?)?;
        self.tape.mul(x, mask)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        self.tape.value(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.tape.value(v).data()[0].as_f64()
    }
}

pub(crate) fn check_width(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::dim(op, format!("expected width {want}, got {got}")));
    }
    Ok(())
}
