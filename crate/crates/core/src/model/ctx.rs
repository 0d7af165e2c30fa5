use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sbcit_tensor::{BatchNormStats, Element, ParamId, ParameterStore, Tape, Tensor, Var};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch normalization uses batch statistics.
    Train,
    /// Deterministic inference with running statistics.
    Eval,
}

/// How a parameter is filled when first created.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    KaimingFanIn(usize),
}

enum Store<'a, T> {
    Shared(&'a ParameterStore<T>),
    Building(&'a mut ParameterStore<T>, ChaCha8Rng),
}

impl<T: Element> Store<'_, T> {
    fn get(&self) -> &ParameterStore<T> {
        match self {
            Store::Shared(s) => s,
            Store::Building(s, _) => s,
        }
    }
}

/// Forward-pass context: the tape being recorded, the parameter source and
/// the per-pass state (mode, dropout stream, pending running-statistic
/// updates and optional recorded intermediates).
pub struct Ctx<'a, T: Element = f32> {
    pub tape: &'a mut Tape<T>,
    store: Store<'a, T>,
    pub mode: Mode,
    bound: HashMap<ParamId, Var>,
    overrides: HashMap<String, Var>,
    track_params: bool,
    dropout_rng: ChaCha8Rng,
    bn_updates: Vec<(String, BatchNormStats)>,
    taps: Option<BTreeMap<String, Vec<Var>>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParameterStore<T>, mode: Mode) -> Self {
        Self::with_store(tape, Store::Shared(store), mode)
    }

    /// Context that creates missing parameters on first use, drawing initial
    /// values from a generator seeded with `seed`.
    pub fn building(tape: &'a mut Tape<T>, store: &'a mut ParameterStore<T>, seed: u64) -> Self {
        Self::with_store(tape, Store::Building(store, ChaCha8Rng::seed_from_u64(seed)), Mode::Eval)
    }

    fn with_store(tape: &'a mut Tape<T>, store: Store<'a, T>, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            bound: HashMap::new(),
            overrides: HashMap::new(),
            track_params: true,
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
            taps: None,
        }
    }

    /// Seeds the dropout mask stream.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Records parameters as constants so no parameter gradients are built.
    pub fn frozen(mut self) -> Self {
        self.track_params = false;
        self
    }

    /// Routes the named parameter to an existing tape variable instead of
    /// the store; used to differentiate with respect to chosen parameters.
    pub fn with_override(mut self, name: impl Into<String>, var: Var) -> Self {
        self.overrides.insert(name.into(), var);
        self
    }

    /// Enables recording of named intermediates (attention maps, gates).
    pub fn with_taps(mut self) -> Self {
        self.taps = Some(BTreeMap::new());
        self
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParameterStore<T> {
        self.store.get()
    }

    /// Tape variable holding parameter `name`, created with `init` when the
    /// context is building a fresh model.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.param_impl(name, shape, init, true)
    }

    /// Non-trainable parameter such as a running statistic.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor<T>> {
        let id = self.ensure(name, shape, init, false)?;
        Ok(self.store.get().value(id).clone())
    }

    fn param_impl(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.overrides.get(name) {
            if self.tape.shape(v) != shape {
                return Err(Error::Checkpoint {
                    name: name.to_string(),
                    reason: format!("override has shape {:?}, expected {shape:?}", self.tape.shape(v)),
                });
            }
            return Ok(v);
        }
        let id = self.ensure(name, shape, init, trainable)?;
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let value = self.store.get().value(id).clone();
        let v = if self.track_params && self.store.get().get(id).trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(id, v);
        Ok(v)
    }

    fn ensure(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<ParamId> {
        if let Some(id) = self.store.get().id(name) {
            let have = self.store.get().value(id).shape();
            if have != shape {
                return Err(Error::Checkpoint {
                    name: name.to_string(),
                    reason: format!("shape {have:?} does not match the configured {shape:?}"),
                });
            }
            return Ok(id);
        }
        match &mut self.store {
            Store::Shared(_) => Err(Error::Checkpoint {
                name: name.to_string(),
                reason: "missing from the parameter store".into(),
            }),
            Store::Building(store, rng) => {
                let value = match init {
                    Init::Zeros => Tensor::zeros(shape.to_vec()),
                    Init::Ones => Tensor::ones(shape.to_vec()),
                    Init::KaimingFanIn(fan_in) => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                        Tensor::from_fn(shape.to_vec(), |_| T::lift(normal.sample(rng)))
                    }
                };
                Ok(store.add(name, value, trainable)?)
            }
        }
    }

    /// `(parameter, variable)` pairs for every trainable parameter used.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        let mut b: Vec<(ParamId, Var)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        b.sort();
        b
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 − rate)`. Identity outside training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.is_train() || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = T::lift(1.0 / keep);
        let shape = self.tape.shape(x).to_vec();
        let rng = &mut self.dropout_rng;
        let mask = Tensor::from_fn(shape, |_| if rng.random::<f64>() < keep { scale } else { T::zero() });
        let m = self.tape.constant(mask);
        Ok(self.tape.mul(x, m)?)
    }

    pub(crate) fn push_bn_update(&mut self, prefix: &str, stats: BatchNormStats) {
        self.bn_updates.push((prefix.to_string(), stats));
    }

    /// Batch statistics gathered in training mode, keyed by layer prefix.
    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchNormStats)> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn tap(&mut self, name: &str, v: Var) {
        if let Some(taps) = &mut self.taps {
            taps.entry(name.to_string()).or_default().push(v);
        }
    }

    pub fn taps(&self, name: &str) -> &[Var] {
        self.taps.as_ref().and_then(|t| t.get(name)).map_or(&[], |v| v.as_slice())
    }
}
