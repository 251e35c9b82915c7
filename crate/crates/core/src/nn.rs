//! Fully-connected layers and stacks over the tape.
//!
//! Layers own only parameter *names*; values live in a [`ParamStore`] and
//! are bound onto a tape per step.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One dense layer, `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Register weight and bias under `name` and initialize them: weights
    /// uniform in `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`,
    /// biases zero.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Linear> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.gen_range(-bound..=bound)).collect();
        store.insert(&format!("{name}/w"), Tensor::matrix(out_dim, in_dim, w)?)?;
        store.insert(&format!("{name}/b"), Tensor::from_vec(vec![0.0; out_dim]))?;
        Ok(Linear { name: name.to_string(), in_dim, out_dim })
    }

    /// A layer over parameters that already exist in the store.
    pub fn attach(name: &str, in_dim: usize, out_dim: usize) -> Linear {
        Linear { name: name.to_string(), in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Var {
        let w = bound.var(&format!("{}/w", self.name));
        let b = bound.var(&format!("{}/b", self.name));
        tape.linear(x, w, b)
    }

    pub fn param_names(&self) -> [String; 2] {
        [format!("{}/w", self.name), format!("{}/b", self.name)]
    }
}

/// Dense stack with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`; layers are named `prefix/l{i}`.
    pub fn init(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut Rng) -> Result<Mlp> {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            layers.push(Linear::init(
                store,
                &format!("{prefix}/l{i}"),
                dims[i],
                dims[i + 1],
                rng,
            )?);
        }
        Ok(Mlp { layers })
    }

    pub fn attach(prefix: &str, dims: &[usize]) -> Mlp {
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::attach(&format!("{prefix}/l{i}"), dims[i], dims[i + 1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h);
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(|l| l.param_names()).collect()
    }
}

/// `[in, hidden..., out]` from a hidden-size list.
pub fn dims_with(in_dim: usize, hidden: &[usize], out_dim: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(in_dim);
    dims.extend_from_slice(hidden);
    dims.push(out_dim);
    dims
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn init_shapes_and_bound() {
        let mut store = ParamStore::new();
        let mut r = rng::derived(1, "t");
        let mlp = Mlp::init(&mut store, "net", &[4, 8, 3], &mut r).unwrap();
        assert_eq!(store.value("net/l0/w").unwrap().shape(), &[8, 4]);
        assert_eq!(store.value("net/l1/b").unwrap().shape(), &[3]);
        let bound_limit = (6.0 / 12.0f64).sqrt();
        for v in store.value("net/l0/w").unwrap().data() {
            assert!(v.abs() <= bound_limit);
        }
        assert_eq!(mlp.param_names().len(), 4);
    }

    #[test]
    fn forward_shapes() {
        let mut store = ParamStore::new();
        let mut r = rng::derived(1, "t");
        let mlp = Mlp::init(&mut store, "net", &[4, 8, 3], &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::matrix(2, 4, vec![0.1; 8]).unwrap());
        let y = mlp.forward(&mut tape, &bound, x);
        assert_eq!(tape.value(y).shape(), &[2, 3]);
    }

    #[test]
    fn same_seed_same_init() {
        let build = || {
            let mut store = ParamStore::new();
            let mut r = rng::derived(42, "init");
            Mlp::init(&mut store, "net", &[3, 5, 2], &mut r).unwrap();
            store.fingerprint()
        };
        assert_eq!(build(), build());
    }
}
