//! Per-device task-relevant feature extraction.
//!
//! Each device learns a Gaussian encoder `x -> (mu, sigma)` (shared trunk,
//! heads split at the final layer, sigma through softplus) trained with a
//! variational bottleneck loss: classification cross-entropy on a
//! reparameterized sample plus `gamma` times the closed-form divergence of
//! the encoder output from a standard normal prior. Downstream modules
//! consume the mean vector `mu` as the deterministic feature.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{BatchSampler, MultiViewDataset};
use crate::error::{Error, Result};
use crate::nn::{dims_with, Linear, Mlp};
use crate::optim::{OptAlgorithm, Optimizer};
use crate::params::{BoundParams, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Architecture and training knobs for one device's extractor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VibConfig {
    /// Bottleneck weight, `gamma >= 0`.
    pub gamma: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Monte Carlo samples per example per step (`L`).
    #[serde(default = "one")]
    pub samples_per_example: usize,
    pub seed: u64,
    pub trunk_hidden: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default)]
    pub classifier_hidden: Vec<usize>,
    #[serde(default = "default_opt")]
    pub optimizer: OptAlgorithm,
}

fn one() -> usize {
    1
}
fn default_opt() -> OptAlgorithm {
    OptAlgorithm::Adam
}

impl VibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::BadConfig("gamma must be >= 0".into()));
        }
        if self.batch_size == 0 || self.samples_per_example == 0 {
            return Err(Error::BadConfig("batch size and sample count must be >= 1".into()));
        }
        Ok(())
    }
}

/// The stochastic feature map `x -> N(mu(x), diag sigma(x)^2)`: a shared
/// ReLU trunk with mean and standard-deviation heads split at the final
/// layer.
#[derive(Clone, Debug)]
pub struct GaussianEncoder {
    pub trunk: Option<Mlp>,
    pub mu_head: Linear,
    pub sigma_head: Linear,
    pub feature_dim: usize,
}

impl GaussianEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        trunk_hidden: &[usize],
        feature_dim: usize,
        rng: &mut rng::Rng,
    ) -> Result<GaussianEncoder> {
        let trunk = if trunk_hidden.is_empty() {
            None
        } else {
            let mut dims = vec![in_dim];
            dims.extend_from_slice(trunk_hidden);
            Some(Mlp::init(store, &format!("{prefix}/trunk"), &dims, rng)?)
        };
        let trunk_out = *trunk_hidden.last().unwrap_or(&in_dim);
        let mu_head = Linear::init(store, &format!("{prefix}/mu"), trunk_out, feature_dim, rng)?;
        let sigma_head =
            Linear::init(store, &format!("{prefix}/sigma"), trunk_out, feature_dim, rng)?;
        Ok(GaussianEncoder { trunk, mu_head, sigma_head, feature_dim })
    }

    pub fn attach(
        prefix: &str,
        in_dim: usize,
        trunk_hidden: &[usize],
        feature_dim: usize,
    ) -> GaussianEncoder {
        let trunk = if trunk_hidden.is_empty() {
            None
        } else {
            let mut dims = vec![in_dim];
            dims.extend_from_slice(trunk_hidden);
            Some(Mlp::attach(&format!("{prefix}/trunk"), &dims))
        };
        let trunk_out = *trunk_hidden.last().unwrap_or(&in_dim);
        GaussianEncoder {
            trunk,
            mu_head: Linear::attach(&format!("{prefix}/mu"), trunk_out, feature_dim),
            sigma_head: Linear::attach(&format!("{prefix}/sigma"), trunk_out, feature_dim),
            feature_dim,
        }
    }

    /// `(mu, sigma)` for a batch; sigma is strictly positive via softplus.
    pub fn encode(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> (Var, Var) {
        let h = match &self.trunk {
            Some(t) => {
                let pre = t.forward(tape, bound, x);
                tape.relu(pre)
            }
            None => x,
        };
        let mu = self.mu_head.forward(tape, bound, h);
        let sigma_pre = self.sigma_head.forward(tape, bound, h);
        let sigma = tape.softplus(sigma_pre);
        (mu, sigma)
    }
}

/// Gaussian encoder plus its variational classifier head.
#[derive(Clone, Debug)]
pub struct VibModel {
    pub encoder: GaussianEncoder,
    pub classifier: Mlp,
}

impl VibModel {
    /// Initialize parameters under `prefix` (e.g. `vib/k0`).
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        num_classes: usize,
        cfg: &VibConfig,
        rng: &mut rng::Rng,
    ) -> Result<VibModel> {
        let encoder = GaussianEncoder::init(
            store,
            prefix,
            in_dim,
            &cfg.trunk_hidden,
            cfg.feature_dim,
            rng,
        )?;
        let classifier = Mlp::init(
            store,
            &format!("{prefix}/cls"),
            &dims_with(cfg.feature_dim, &cfg.classifier_hidden, num_classes),
            rng,
        )?;
        Ok(VibModel { encoder, classifier })
    }

    /// Rebuild the layer handles for parameters already in a store.
    pub fn attach(prefix: &str, in_dim: usize, num_classes: usize, cfg: &VibConfig) -> VibModel {
        VibModel {
            encoder: GaussianEncoder::attach(prefix, in_dim, &cfg.trunk_hidden, cfg.feature_dim),
            classifier: Mlp::attach(
                &format!("{prefix}/cls"),
                &dims_with(cfg.feature_dim, &cfg.classifier_hidden, num_classes),
            ),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim
    }

    /// `(mu, sigma)` for a batch; sigma is strictly positive via softplus.
    pub fn encode(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> (Var, Var) {
        self.encoder.encode(tape, bound, x)
    }
}

/// `z = mu + sigma .* eps`; gradient reaches `mu` with coefficient one and
/// `sigma` with coefficient `eps`.
pub fn reparameterize(tape: &mut Tape, mu: Var, sigma: Var, eps: Var) -> Var {
    let scaled = tape.mul(sigma, eps);
    tape.add(mu, scaled)
}

/// Minibatch loss: mean over examples of cross-entropy on the sampled
/// feature plus `gamma` times the prior divergence. `eps` holds
/// `samples_per_example` noise tensors shaped like `mu`.
pub fn vib_loss(
    model: &VibModel,
    tape: &mut Tape,
    bound: &BoundParams,
    x: Var,
    labels: &[usize],
    eps: &[Var],
    gamma: f64,
) -> Var {
    assert!(!labels.is_empty(), "empty batch");
    assert!(!eps.is_empty(), "need at least one noise draw");
    let (mu, sigma) = model.encode(tape, bound, x);
    let mut ce_total: Option<Var> = None;
    for &e in eps {
        let z = reparameterize(tape, mu, sigma, e);
        let logits = model.classifier.forward(tape, bound, z);
        let ce = tape.softmax_cross_entropy(logits, labels);
        ce_total = Some(match ce_total {
            Some(acc) => tape.add(acc, ce),
            None => ce,
        });
    }
    let ce_mean_draws = tape.scale(ce_total.unwrap(), 1.0 / eps.len() as f64);
    let kl = tape.kl_std_normal(mu, sigma);
    let kl_scaled = tape.scale(kl, gamma);
    let per_example = tape.add(ce_mean_draws, kl_scaled);
    tape.mean(per_example)
}

/// A trained extractor with its parameter store and loss trace.
pub struct VibTrained {
    pub model: VibModel,
    pub store: ParamStore,
    pub trace: Vec<f64>,
}

fn sample_normal(rng: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Train one device's extractor: per step, draw a minibatch, encode,
/// sample noise, take the bottleneck loss, backpropagate, update.
pub fn train_vib(data: &MultiViewDataset, device: usize, cfg: &VibConfig) -> Result<VibTrained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prefix = format!("vib/k{device}");
    let mut store = ParamStore::new();
    let mut init_rng = rng::derived(cfg.seed, &format!("{prefix}/init"));
    let model = VibModel::init(
        &mut store,
        &prefix,
        data.view_dim(device),
        data.num_classes(),
        cfg,
        &mut init_rng,
    )?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut sampler = BatchSampler::new(
        data.len(),
        cfg.batch_size,
        rng::derived(cfg.seed, &format!("{prefix}/batches")),
    );
    let mut noise_rng = rng::derived(cfg.seed, &format!("{prefix}/noise"));
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let xb = data.view_batch(device, &idx);
        let yb = data.label_batch(&idx);
        let m = idx.len();

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(xb);
        let eps: Vec<Var> = (0..cfg.samples_per_example)
            .map(|_| {
                let t = sample_normal(&mut noise_rng, m, cfg.feature_dim);
                tape.constant(t)
            })
            .collect();
        let loss = vib_loss(&model, &mut tape, &bound, x, &yb, &eps, cfg.gamma);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        trace.push(value);
        let grads = tape.backward(loss);
        store.accumulate_grads(&bound, &grads);
        opt.step(&mut store)?;
    }
    Ok(VibTrained { model, store, trace })
}

/// Row-chunk size for frozen evaluation passes; bounds transient memory
/// without affecting results (row arithmetic is independent of batching).
pub const EVAL_CHUNK: usize = 2048;

/// Deterministic features for downstream coding: `z = mu(x)`, computed by
/// a frozen encoder over the whole set in row chunks.
pub fn encode_means(
    encoder: &GaussianEncoder,
    store: &ParamStore,
    views: &Tensor,
) -> Tensor {
    let n = views.rows();
    let mut out = Vec::with_capacity(n * encoder.feature_dim);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(views.select_rows(&idx));
        let (mu, _) = encoder.encode(&mut tape, &bound, x);
        out.extend_from_slice(tape.value(mu).data());
        start = end;
    }
    Tensor::matrix(n, encoder.feature_dim, out).unwrap()
}

/// Deterministic features for one device of a dataset.
pub fn extract_features(
    model: &VibModel,
    store: &ParamStore,
    data: &MultiViewDataset,
    device: usize,
) -> Tensor {
    encode_means(&model.encoder, store, data.view_matrix(device))
}

/// Mean loss components over a dataset at the current parameters:
/// `(cross_entropy_at_mu, kl)`, both in nats.
pub fn eval_components(
    model: &VibModel,
    store: &ParamStore,
    data: &MultiViewDataset,
    device: usize,
) -> (f64, f64) {
    let n = data.len();
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(data.view_batch(device, &idx));
        let (mu, sigma) = model.encode(&mut tape, &bound, x);
        let logits = model.classifier.forward(&mut tape, &bound, mu);
        let ce = tape.softmax_cross_entropy(logits, &data.label_batch(&idx));
        let kl = tape.kl_std_normal(mu, sigma);
        ce_sum += tape.value(ce).data().iter().sum::<f64>();
        kl_sum += tape.value(kl).data().iter().sum::<f64>();
        start = end;
    }
    (ce_sum / n as f64, kl_sum / n as f64)
}

/// Classification accuracy of the extractor's own head at `z = mu`.
pub fn eval_accuracy(
    model: &VibModel,
    store: &ParamStore,
    data: &MultiViewDataset,
    device: usize,
) -> f64 {
    let n = data.len();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(data.view_batch(device, &idx));
        let (mu, _) = model.encode(&mut tape, &bound, x);
        let logits = model.classifier.forward(&mut tape, &bound, mu);
        let lv = tape.value(logits);
        for (row, &i) in idx.iter().enumerate() {
            if crate::vddib::argmax_tie_low(lv.row(row)) == data.labels()[i] {
                correct += 1;
            }
        }
        start = end;
    }
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> VibConfig {
        VibConfig {
            gamma: 0.0,
            batch_size: 8,
            steps: 500,
            learning_rate: 0.01,
            samples_per_example: 1,
            seed: 7,
            trunk_hidden: vec![16],
            feature_dim: 4,
            classifier_hidden: vec![],
            optimizer: OptAlgorithm::Adam,
        }
    }

    fn toy_data(seed: u64) -> MultiViewDataset {
        // 8 fixed points in 2-D, labels split by quadrant parity
        let mut rng = rng::derived(seed, "toy");
        use rand::Rng as _;
        let n = 8;
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            data.push(a);
            data.push(b);
            labels.push(i % 2);
        }
        MultiViewDataset::new(vec![Tensor::matrix(n, 2, data).unwrap()], labels, 2).unwrap()
    }

    #[test]
    fn zero_heads_give_zero_mu_and_softplus_zero_sigma() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut r = rng::derived(1, "i");
        let model = VibModel::init(&mut store, "vib/k0", 2, 2, &cfg, &mut r).unwrap();
        store.set_value("vib/k0/mu/w", Tensor::matrix(4, 16, vec![0.0; 64]).unwrap()).unwrap();
        store.set_value("vib/k0/mu/b", Tensor::from_vec(vec![0.0; 4])).unwrap();
        store.set_value("vib/k0/sigma/w", Tensor::matrix(4, 16, vec![0.0; 64]).unwrap()).unwrap();
        store.set_value("vib/k0/sigma/b", Tensor::from_vec(vec![0.0; 4])).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::from_vec(vec![0.3, 0.9]));
        let (mu, sigma) = model.encode(&mut tape, &bound, x);
        assert_eq!(tape.value(mu).data(), &[0.0; 4]);
        let ln2 = std::f64::consts::LN_2;
        for &s in tape.value(sigma).data() {
            assert!((s - ln2).abs() < 1e-15);
        }
        assert_eq!(tape.value(mu).shape(), &[4]);
        assert_eq!(tape.value(sigma).shape(), &[4]);
    }

    #[test]
    fn sigma_positive_on_random_inputs() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut r = rng::derived(2, "i");
        let model = VibModel::init(&mut store, "vib/k0", 2, 2, &cfg, &mut r).unwrap();
        use rand::Rng as _;
        let mut xr = rng::derived(2, "x");
        let n = 10_000;
        let data: Vec<f64> = (0..n * 2).map(|_| xr.gen_range(-5.0..5.0)).collect();
        // raw inputs here may leave [0,1]; the encoder itself has no range
        // precondition, only the dataset type does
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::matrix(n, 2, data).unwrap());
        let (_, sigma) = model.encode(&mut tape, &bound, x);
        assert!(tape.value(sigma).data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn reparameterize_cases() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let sigma = tape.constant(Tensor::from_vec(vec![0.5, 1.0]));
        let zero = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let z = reparameterize(&mut tape, mu, sigma, zero);
        assert_eq!(tape.value(z).data(), &[1.0, 2.0]);

        let eps = tape.constant(Tensor::from_vec(vec![2.0, -1.0]));
        let z = reparameterize(&mut tape, mu, sigma, eps);
        assert_eq!(tape.value(z).data(), &[2.0, 1.0]);

        // sigma = 0 bypasses the noise entirely
        let zero_sigma = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let z = reparameterize(&mut tape, mu, zero_sigma, eps);
        assert_eq!(tape.value(z).data(), &[1.0, 2.0]);
    }

    #[test]
    fn loss_composition_uniform_logits() {
        // classifier forced to uniform logits, mu = 0, sigma = 1
        let cfg = VibConfig { feature_dim: 1, trunk_hidden: vec![], ..tiny_cfg() };
        let mut store = ParamStore::new();
        let mut r = rng::derived(3, "i");
        let model = VibModel::init(&mut store, "vib/k0", 1, 10, &cfg, &mut r).unwrap();
        store.set_value("vib/k0/cls/l0/w", Tensor::matrix(10, 1, vec![0.0; 10]).unwrap()).unwrap();
        store.set_value("vib/k0/cls/l0/b", Tensor::from_vec(vec![0.0; 10])).unwrap();
        store.set_value("vib/k0/mu/w", Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        // sigma head bias chosen so softplus gives exactly 1
        let b = (std::f64::consts::E - 1.0f64).ln();
        store.set_value("vib/k0/sigma/w", Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        store.set_value("vib/k0/sigma/b", Tensor::from_vec(vec![b])).unwrap();

        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let eps = tape.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let loss = vib_loss(&model, &mut tape, &bound, x, &[3], &[eps], 1.0);
        // kl(mu=0, sigma=1) = 0, so the loss is ln 10
        assert!((tape.value(loss).item() - 10.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn loss_single_example_hand_value() {
        // mu = 1, sigma = 1, gamma = 0.5, uniform logits over 2 classes:
        // ln 2 + 0.5 * 0.5
        let cfg = VibConfig { feature_dim: 1, trunk_hidden: vec![], ..tiny_cfg() };
        let mut store = ParamStore::new();
        let mut r = rng::derived(3, "i");
        let model = VibModel::init(&mut store, "vib/k0", 1, 2, &cfg, &mut r).unwrap();
        store.set_value("vib/k0/cls/l0/w", Tensor::matrix(2, 1, vec![0.0; 2]).unwrap()).unwrap();
        store.set_value("vib/k0/cls/l0/b", Tensor::from_vec(vec![0.0; 2])).unwrap();
        store.set_value("vib/k0/mu/w", Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        store.set_value("vib/k0/mu/b", Tensor::from_vec(vec![1.0])).unwrap();
        let b = (std::f64::consts::E - 1.0f64).ln();
        store.set_value("vib/k0/sigma/w", Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        store.set_value("vib/k0/sigma/b", Tensor::from_vec(vec![b])).unwrap();

        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let eps = tape.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let loss = vib_loss(&model, &mut tape, &bound, x, &[1], &[eps], 0.5);
        let expect = 2.0f64.ln() + 0.25;
        assert!((tape.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn overfits_toy_set() {
        let data = toy_data(11);
        let trained = train_vib(&data, 0, &tiny_cfg()).unwrap();
        let (ce, _) = eval_components(&trained.model, &trained.store, &data, 0);
        assert!(ce < 0.05, "training cross-entropy {ce}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(11);
        let cfg = VibConfig { steps: 50, ..tiny_cfg() };
        let a = train_vib(&data, 0, &cfg).unwrap();
        let b = train_vib(&data, 0, &cfg).unwrap();
        assert_eq!(a.store.fingerprint(), b.store.fingerprint());
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn huge_gamma_collapses_to_prior() {
        let data = toy_data(11);
        let cfg = VibConfig { gamma: 1e6, steps: 800, ..tiny_cfg() };
        let trained = train_vib(&data, 0, &cfg).unwrap();
        let (_, kl) = eval_components(&trained.model, &trained.store, &data, 0);
        assert!(kl < 0.01, "kl at convergence {kl}");
    }

    #[test]
    fn empty_batch_panics() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut r = rng::derived(3, "i");
        let model = VibModel::init(&mut store, "vib/k0", 2, 2, &cfg, &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap());
        let eps = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut t2 = Tape::new();
            std::mem::swap(&mut tape, &mut t2);
            vib_loss(&model, &mut t2, &bound, x, &[], &[eps], 0.0)
        }));
        assert!(result.is_err());
    }
}
