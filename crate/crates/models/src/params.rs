//! Named parameter storage and the per-pass context that turns parameters
//! into graph leaves.

use std::cell::RefCell;
use std::collections::BTreeMap;

use nowcast_tensor::{numel, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f32),
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    /// Uniform in `±1 / sqrt(fan_in)`.
    LecunUniform { fan_in: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        assert_eq!(data.len(), numel(shape), "parameter '{}' data does not fit {:?}", name, shape);
        let prev = self.params.insert(name.to_string(), Param { shape: shape.to_vec(), data });
        assert!(prev.is_none(), "parameter '{}' registered twice", name);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }
}

/// Registers parameters with deterministic initial values.
pub struct Builder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> String {
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0f32, 1.0).expect("unit normal");
                (0..n)
                    .map(|_| loop {
                        let v: f32 = d.sample(&mut self.rng);
                        if v.abs() <= 2.0 {
                            break v * std;
                        }
                    })
                    .collect()
            }
            Init::HeUniform { fan_in } => {
                let b = (6.0 / fan_in.max(1) as f32).sqrt();
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
            Init::LecunUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f32).sqrt();
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
        };
        self.store.insert(name, shape, data);
        name.to_string()
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// One forward pass over a parameter snapshot. In training mode every
/// parameter becomes a gradient-tracking leaf and stochastic layers draw
/// from the context RNG; in evaluation mode parameters are constants and
/// the pass is deterministic.
pub struct Ctx<'a> {
    params: &'a ParamStore,
    train: bool,
    leaves: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval(params: &'a ParamStore) -> Self {
        Ctx { params, train: false, leaves: RefCell::default(), rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)) }
    }

    pub fn train(params: &'a ParamStore, seed: u64) -> Self {
        Ctx { params, train: true, leaves: RefCell::default(), rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn p(&self, name: &str) -> Var {
        if let Some(v) = self.leaves.borrow().get(name) {
            return v.clone();
        }
        let p = self.params.get(name).unwrap_or_else(|| panic!("unknown parameter '{}'", name));
        let v = if self.train { Var::leaf(p.data.clone(), &p.shape) } else { Var::constant(p.data.clone(), &p.shape) };
        self.leaves.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    /// Runs `f` with the training RNG, or with `None` in evaluation mode.
    pub fn with_rng<R>(&self, f: impl FnOnce(Option<&mut dyn RngCore>) -> R) -> R {
        if self.train {
            let mut rng = self.rng.borrow_mut();
            f(Some(&mut *rng))
        } else {
            f(None)
        }
    }

    /// Gradients of every parameter touched by the pass; untouched
    /// parameters get zeros.
    pub fn grads(&self) -> BTreeMap<String, Vec<f32>> {
        let leaves = self.leaves.borrow();
        self.params
            .iter()
            .map(|(name, p)| {
                let g = leaves.get(name).and_then(Var::grad).unwrap_or_else(|| vec![0.0; p.data.len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut a = Builder::new(3);
        let mut b = Builder::new(3);
        a.add("w", &[100], Init::TruncNormal(0.02));
        b.add("w", &[100], Init::TruncNormal(0.02));
        let (a, b) = (a.finish(), b.finish());
        assert_eq!(a, b);
        assert!(a.get("w").unwrap().data.iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn grads_follow_backward() {
        let mut b = Builder::new(0);
        b.add("a", &[2], Init::Ones);
        b.add("unused", &[1], Init::Zeros);
        let store = b.finish();
        let ctx = Ctx::train(&store, 0);
        let y = nowcast_tensor::ops::sum_all(&nowcast_tensor::ops::scale(&ctx.p("a"), 3.0));
        y.backward();
        let g = ctx.grads();
        assert_eq!(g["a"], vec![3.0, 3.0]);
        assert_eq!(g["unused"], vec![0.0]);
        assert!(!Ctx::eval(&store).p("a").requires_grad());
    }
}
