//! Named parameter storage and the forward-pass context that binds it to a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var, GRAD_FLOOR};
use crate::tensor::{Real, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    /// Records every parameter as a trainable leaf.
    fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Seeded initializers that append to a [`ParamStore`].
pub struct Initializer<'a, F> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<'a, F: Real> Initializer<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of(self.rng.random_range(-bound..bound)))
            .collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid standard deviation");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(dist.sample(&mut self.rng))).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), F::of(value)))
    }
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape with the parameters bound as leaves, the mode,
/// and the generator that draws dropout masks.
pub struct Graph<F> {
    pub tape: Tape<F>,
    params: Vec<Var>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<F: Real> Graph<F> {
    pub fn new(store: &ParamStore<F>, mode: Mode, seed: u64) -> Self {
        Self::attach(Tape::new(), store, mode, seed)
    }

    /// Binds the parameters onto an existing tape.
    pub fn attach(mut tape: Tape<F>, store: &ParamStore<F>, mode: Mode, seed: u64) -> Self {
        let params = store.bind(&mut tape);
        Self {
            tape,
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn into_tape(self) -> Tape<F> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Tape handle of a bound parameter.
    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn input(&mut self, tensor: Tensor<F>) -> Var {
        self.tape.constant(tensor)
    }

    /// Dropout in training mode; identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        match self.mode {
            Mode::Train => self.tape.dropout(x, rate, &mut self.rng),
            Mode::Eval => x,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tape.value(v)
    }
}

/// Runs `f` on a graph built over `tape`, then hands the tape back. Lets
/// layer code run inside [`crate::autodiff::grad_check`] closures.
pub fn on_tape<F: Real, R>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    mode: Mode,
    seed: u64,
    f: impl FnOnce(&mut Graph<F>) -> R,
) -> R {
    let mut g = Graph::attach(std::mem::take(tape), store, mode, seed);
    let out = f(&mut g);
    *tape = g.into_tape();
    out
}

/// Worst relative error between backprop and central differences for the
/// gradient of a scalar `loss` with respect to parameter entries.
///
/// With `sample = Some(n)`, `n` entries are drawn uniformly (seeded) from all
/// parameters; otherwise every entry is checked. Error per entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn param_grad_check(
    store: &ParamStore<f64>,
    sample: Option<(usize, u64)>,
    eps: f64,
    loss: impl Fn(&mut Graph<f64>) -> Var,
) -> f64 {
    let mut g = Graph::new(store, Mode::Eval, 0);
    let out = loss(&mut g);
    let grads = g.tape.backward(out).expect("backward failed during gradient check");

    let mut entries: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    if let Some((n, seed)) = sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::with_capacity(n);
        for _ in 0..n.min(entries.len()) {
            let j = rng.random_range(0..entries.len());
            picked.push(entries.swap_remove(j));
        }
        entries = picked;
    }

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s, Mode::Eval, 0);
        let v = loss(&mut g);
        g.value(v).item()
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (id, i) in entries {
        let analytic = grads.get(g.param(id)).expect("parameter gradient").data()[i];
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let up = eval(&probe);
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let down = eval(&probe);
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}
