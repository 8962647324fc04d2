use indexmap::IndexMap;

use crate::scalar::Scalar;

use super::{Graph, NnError, ParamStore, Rng, Tensor, Var};

const BN_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

/// One forward (and optionally backward) pass over a [`ParamStore`].
///
/// Parameters are copied into the graph on first use; [`Session::backward`]
/// adds their gradients back into the store. In training mode BatchNorm
/// running statistics are updated in place.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a mut ParamStore<T>,
    bound: IndexMap<String, Var>,
    train: bool,
    rng: &'a mut Rng,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, train: bool, rng: &'a mut Rng) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: IndexMap::new(),
            train,
            rng,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var, NnError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.param(name)?.clone();
        let v = self.graph.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// `x @ {prefix}.w + {prefix}.b`
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, NnError> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var, NnError> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.graph.layer_norm(x, g, b, NORM_EPS)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var, NnError> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        if self.train {
            let (y, stats) = self.graph.batch_norm_1d(x, g, b, None, NORM_EPS)?;
            let (bm, bv) = stats.expect("training mode returns batch statistics");
            let mom = T::from_f64_lossy(BN_MOMENTUM);
            let keep = T::one() - mom;
            for (r, s) in self.store.buffer_mut(&mean_name)?.data_mut().iter_mut().zip(&bm) {
                *r = keep * *r + mom * *s;
            }
            for (r, s) in self.store.buffer_mut(&var_name)?.data_mut().iter_mut().zip(&bv) {
                *r = keep * *r + mom * *s;
            }
            Ok(y)
        } else {
            let rm = self.store.buffer(&mean_name)?.data().to_vec();
            let rv = self.store.buffer(&var_name)?.data().to_vec();
            Ok(self.graph.batch_norm_1d(x, g, b, Some((&rm, &rv)), NORM_EPS)?.0)
        }
    }

    /// Dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, NnError> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        self.graph.dropout(x, p, self.rng)
    }

    /// Backpropagates from `loss` and accumulates parameter gradients into
    /// the store.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        self.graph.backward(loss)?;
        for (name, &v) in &self.bound {
            if let Some(g) = self.graph.grad(v) {
                self.store.accumulate_grad(name, g.data())?;
            } else {
                let n = self.store.param(name)?.len();
                self.store.accumulate_grad(name, &vec![T::zero(); n])?;
            }
        }
        Ok(())
    }
}

/// Registers `{prefix}.w` `[din, dout]` and a zero `{prefix}.b`.
pub(crate) fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut Rng,
) -> Result<(), NnError> {
    store.add_xavier(&format!("{prefix}.w"), &[din, dout], din, dout, rng)?;
    store.add_param(&format!("{prefix}.b"), Tensor::zeros(&[dout]))
}

pub(crate) fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<(), NnError> {
    store.add_param(&format!("{prefix}.gamma"), Tensor::ones(&[d]))?;
    store.add_param(&format!("{prefix}.beta"), Tensor::zeros(&[d]))
}

pub(crate) fn init_batch_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<(), NnError> {
    init_layer_norm(store, prefix, d)?;
    store.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[d]))?;
    store.add_buffer(&format!("{prefix}.running_var"), Tensor::ones(&[d]))
}
