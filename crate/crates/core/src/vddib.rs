//! Distributed one-shot feature coding.
//!
//! Each device maps its frozen extracted feature through a small encoder,
//! bounds it with tanh, and quantizes every element to `n_k` bits. The
//! server holds one joint classifier over the concatenated dequantized
//! codes plus one auxiliary classifier per device. Training minimizes
//!
//! `mean[ CE_joint + beta * sum_k (CE_aux_k + bits_k * ln 2) ]`
//!
//! in nats; the bit term is constant for fixed quantizers but keeps
//! reported losses comparable across budgets. Gradients cross the
//! quantizer through its straight-through surrogate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::BatchSampler;
use crate::error::{Error, Result};
use crate::nn::{dims_with, Mlp};
use crate::optim::{OptAlgorithm, Optimizer};
use crate::params::{BoundParams, ParamStore};
use crate::quantizer::{quantize, QuantizedCode, QuantizerSpec};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VddibConfig {
    /// Auxiliary-plus-rate weight, `beta >= 0`.
    pub beta: f64,
    /// Per-device `(bits, dims)`.
    pub quantizers: Vec<QuantizerSpec>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_head")]
    pub head_hidden: Vec<usize>,
    #[serde(default = "default_aux")]
    pub aux_hidden: Vec<usize>,
    #[serde(default = "default_opt")]
    pub optimizer: OptAlgorithm,
}

fn default_head() -> Vec<usize> {
    vec![256, 256]
}
fn default_aux() -> Vec<usize> {
    vec![256]
}
fn default_opt() -> OptAlgorithm {
    OptAlgorithm::Adam
}

impl VddibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::BadConfig("beta must be >= 0".into()));
        }
        if self.quantizers.is_empty() {
            return Err(Error::BadConfig("need at least one device quantizer".into()));
        }
        Ok(())
    }
}

/// Per-device encoders, quantizer specs, and the server predictors.
#[derive(Clone, Debug)]
pub struct VddibModel {
    pub encoders: Vec<Mlp>,
    pub specs: Vec<QuantizerSpec>,
    pub joint: Mlp,
    pub aux: Vec<Mlp>,
}

impl VddibModel {
    /// Initialize under `prefix` (normally `vddib`): encoders at
    /// `{prefix}/enc/k{i}`, joint head at `{prefix}/joint`, auxiliary
    /// heads at `{prefix}/aux/k{i}`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        feature_dims: &[usize],
        num_classes: usize,
        cfg: &VddibConfig,
        rng: &mut rng::Rng,
    ) -> Result<VddibModel> {
        assert_eq!(feature_dims.len(), cfg.quantizers.len(), "one quantizer per device");
        let mut encoders = Vec::new();
        for (i, (&fd, spec)) in feature_dims.iter().zip(&cfg.quantizers).enumerate() {
            encoders.push(Mlp::init(
                store,
                &format!("{prefix}/enc/k{i}"),
                &dims_with(fd, &cfg.encoder_hidden, spec.dims),
                rng,
            )?);
        }
        let total: usize = cfg.quantizers.iter().map(|s| s.dims).sum();
        let joint = Mlp::init(
            store,
            &format!("{prefix}/joint"),
            &dims_with(total, &cfg.head_hidden, num_classes),
            rng,
        )?;
        let mut aux = Vec::new();
        for (i, spec) in cfg.quantizers.iter().enumerate() {
            aux.push(Mlp::init(
                store,
                &format!("{prefix}/aux/k{i}"),
                &dims_with(spec.dims, &cfg.aux_hidden, num_classes),
                rng,
            )?);
        }
        Ok(VddibModel { encoders, specs: cfg.quantizers.clone(), joint, aux })
    }

    pub fn attach(
        prefix: &str,
        feature_dims: &[usize],
        num_classes: usize,
        cfg: &VddibConfig,
    ) -> VddibModel {
        let encoders = feature_dims
            .iter()
            .zip(&cfg.quantizers)
            .enumerate()
            .map(|(i, (&fd, spec))| {
                Mlp::attach(&format!("{prefix}/enc/k{i}"), &dims_with(fd, &cfg.encoder_hidden, spec.dims))
            })
            .collect();
        let total: usize = cfg.quantizers.iter().map(|s| s.dims).sum();
        let joint = Mlp::attach(&format!("{prefix}/joint"), &dims_with(total, &cfg.head_hidden, num_classes));
        let aux = cfg
            .quantizers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                Mlp::attach(&format!("{prefix}/aux/k{i}"), &dims_with(spec.dims, &cfg.aux_hidden, num_classes))
            })
            .collect();
        VddibModel { encoders, specs: cfg.quantizers.clone(), joint, aux }
    }

    pub fn num_devices(&self) -> usize {
        self.encoders.len()
    }

    pub fn total_bits(&self) -> u64 {
        self.specs.iter().map(|s| s.bit_cost()).sum()
    }

    /// One device's code on the tape: encoder, tanh bounding, quantizer.
    /// Returns `(bounded, code)`; `code` carries the dequantized levels
    /// forward and the straight-through surrogate backward.
    pub fn encode_device(&self, tape: &mut Tape, bound: &BoundParams, k: usize, z: Var) -> (Var, Var) {
        let pre = self.encoders[k].forward(tape, bound, z);
        let bounded = tape.tanh(pre);
        let code = tape.quantize_ste(bounded, self.specs[k].bits);
        (bounded, code)
    }
}

/// Loss pieces evaluated at the current parameters, all in nats except
/// the raw bit count.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: f64,
    pub joint_ce: f64,
    pub aux_ce: Vec<f64>,
    pub rate_bits: u64,
}

/// Batch loss over dequantized device codes.
///
/// `codes[k]` is the `[M, d_k]` output of `encode_device`. Returns the
/// scalar loss node; the constant bit term enters as `beta * bits * ln 2`.
pub fn vddib_loss(
    model: &VddibModel,
    tape: &mut Tape,
    bound: &BoundParams,
    codes: &[Var],
    labels: &[usize],
    beta: f64,
) -> Var {
    assert_eq!(codes.len(), model.num_devices(), "one code per device");
    let joint_in = tape.concat_cols(codes);
    let joint_logits = model.joint.forward(tape, bound, joint_in);
    let mut per_example = tape.softmax_cross_entropy(joint_logits, labels);
    for (k, &code) in codes.iter().enumerate() {
        let logits = model.aux[k].forward(tape, bound, code);
        let ce = tape.softmax_cross_entropy(logits, labels);
        let scaled = tape.scale(ce, beta);
        per_example = tape.add(per_example, scaled);
    }
    let mean = tape.mean(per_example);
    let rate_nats = beta * model.total_bits() as f64 * std::f64::consts::LN_2;
    let rate = tape.constant(Tensor::scalar(rate_nats));
    tape.add(mean, rate)
}

/// A trained coding stage: model handles, parameters, loss trace.
pub struct VddibTrained {
    pub model: VddibModel,
    pub store: ParamStore,
    pub trace: Vec<f64>,
}

/// Train encoders and predictors on frozen per-device features
/// (`features[k]` is `[N, feat_k]`, rows aligned with `labels`).
pub fn train_vddib(
    features: &[Tensor],
    labels: &[usize],
    num_classes: usize,
    cfg: &VddibConfig,
) -> Result<VddibTrained> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let feature_dims: Vec<usize> = features.iter().map(|f| f.cols()).collect();
    let mut store = ParamStore::new();
    let mut init_rng = rng::derived(cfg.seed, "vddib/init");
    let model = VddibModel::init(&mut store, "vddib", &feature_dims, num_classes, cfg, &mut init_rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut sampler = BatchSampler::new(
        labels.len(),
        cfg.batch_size,
        rng::derived(cfg.seed, "vddib/batches"),
    );
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut codes = Vec::with_capacity(features.len());
        for (k, f) in features.iter().enumerate() {
            let z = tape.constant(f.select_rows(&idx));
            let (_, code) = model.encode_device(&mut tape, &bound, k, z);
            codes.push(code);
        }
        let loss = vddib_loss(&model, &mut tape, &bound, &codes, &yb, cfg.beta);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        trace.push(value);
        let grads = tape.backward(loss);
        store.accumulate_grads(&bound, &grads);
        opt.step(&mut store)?;
    }
    Ok(VddibTrained { model, store, trace })
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_tie_low(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluation outputs over a feature set: predictions, per-device integer
/// codes, and the mean loss components.
pub struct VddibEval {
    pub predictions: Vec<usize>,
    /// `codes[k][i]` is device `k`'s code for sample `i`.
    pub codes: Vec<Vec<QuantizedCode>>,
    pub parts: LossParts,
}

/// Run the trained coding stage over full feature matrices, in row
/// chunks to bound transient memory. Row arithmetic does not depend on
/// batch composition, so chunking leaves every output bit-identical.
pub fn evaluate(
    model: &VddibModel,
    store: &ParamStore,
    features: &[Tensor],
    labels: &[usize],
    beta: f64,
) -> VddibEval {
    let n = labels.len();
    let devices = model.num_devices();
    let mut predictions = Vec::with_capacity(n);
    let mut codes: Vec<Vec<QuantizedCode>> = (0..devices).map(|_| Vec::with_capacity(n)).collect();
    let mut joint_ce_sum = 0.0;
    let mut aux_ce_sum = vec![0.0; devices];

    let mut start = 0;
    while start < n {
        let end = (start + crate::vib::EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let mut code_vars = Vec::with_capacity(devices);
        for (k, f) in features.iter().enumerate() {
            let z = tape.constant(f.select_rows(&idx));
            let (bounded, code) = model.encode_device(&mut tape, &bound, k, z);
            // integer codes from the same bounded values the tape quantized
            let bt = tape.value(bounded);
            codes[k].extend((0..bt.rows()).map(|i| quantize(bt.row(i), model.specs[k])));
            code_vars.push(code);
        }
        let joint_in = tape.concat_cols(&code_vars);
        let joint_logits = model.joint.forward(&mut tape, &bound, joint_in);
        let ce = tape.softmax_cross_entropy(joint_logits, &yb);
        joint_ce_sum += tape.value(ce).data().iter().sum::<f64>();
        for (k, &code) in code_vars.iter().enumerate() {
            let logits = model.aux[k].forward(&mut tape, &bound, code);
            let ce = tape.softmax_cross_entropy(logits, &yb);
            aux_ce_sum[k] += tape.value(ce).data().iter().sum::<f64>();
        }
        let logits_t = tape.value(joint_logits);
        predictions.extend((0..yb.len()).map(|i| argmax_tie_low(logits_t.row(i))));
        start = end;
    }

    let joint_ce = joint_ce_sum / n as f64;
    let aux_ce: Vec<f64> = aux_ce_sum.into_iter().map(|s| s / n as f64).collect();
    let rate_bits = model.total_bits();
    let total = joint_ce
        + beta * (aux_ce.iter().sum::<f64>() + rate_bits as f64 * std::f64::consts::LN_2);
    VddibEval {
        predictions,
        codes,
        parts: LossParts { total, joint_ce, aux_ce, rate_bits },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(devices: usize) -> VddibConfig {
        VddibConfig {
            beta: 0.01,
            quantizers: vec![QuantizerSpec::new(2, 3); devices],
            batch_size: 8,
            steps: 400,
            learning_rate: 0.01,
            seed: 5,
            encoder_hidden: vec![16],
            head_hidden: vec![32],
            aux_hidden: vec![16],
            optimizer: OptAlgorithm::Adam,
        }
    }

    fn toy_features(n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        use rand::Rng as _;
        let mut rng = rng::derived(seed, "feat");
        let mut f1 = Vec::new();
        let mut f2 = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -0.7 } else { 0.7 };
            for _ in 0..4 {
                f1.push(c + rng.gen_range(-0.2..0.2));
                f2.push(-c + rng.gen_range(-0.2..0.2));
            }
            labels.push(y);
        }
        (
            vec![
                Tensor::matrix(n, 4, f1).unwrap(),
                Tensor::matrix(n, 4, f2).unwrap(),
            ],
            labels,
        )
    }

    #[test]
    fn zero_weight_encoder_quantizes_tanh_zero() {
        let cfg = tiny_cfg(1);
        let mut store = ParamStore::new();
        let mut r = rng::derived(1, "i");
        let model = VddibModel::init(&mut store, "vddib", &[4], 2, &cfg, &mut r).unwrap();
        for name in ["vddib/enc/k0/l0/w", "vddib/enc/k0/l1/w"] {
            let shape = store.value(name).unwrap().shape().to_vec();
            store.set_value(name, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let z = tape.constant(Tensor::matrix(1, 4, vec![0.5; 4]).unwrap());
        let (bounded, code) = model.encode_device(&mut tape, &bound, 0, z);
        assert_eq!(tape.value(bounded).data(), &[0.0, 0.0, 0.0]);
        // tanh(0) = 0 ties between levels -1/3 and 1/3 and resolves down
        for &v in tape.value(code).data() {
            assert!((v + 1.0 / 3.0).abs() < 1e-15);
        }
        let qc = quantize(tape.value(bounded).data(), model.specs[0]);
        assert_eq!(qc.indices, vec![1, 1, 1]);
        assert_eq!(qc.bit_cost(), 6);
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = tiny_cfg(1);
        let mut store = ParamStore::new();
        let mut r = rng::derived(2, "i");
        let model = VddibModel::init(&mut store, "vddib", &[4], 2, &cfg, &mut r).unwrap();
        let z = Tensor::matrix(1, 4, vec![0.3, -0.1, 0.9, 0.0]).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let zv = tape.constant(z.clone());
            let (_, code) = model.encode_device(&mut tape, &bound, 0, zv);
            tape.value(code).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn beta_zero_is_joint_ce_alone() {
        let cfg = tiny_cfg(2);
        let (features, labels) = toy_features(8, 3);
        let mut store = ParamStore::new();
        let mut r = rng::derived(3, "i");
        let model = VddibModel::init(&mut store, "vddib", &[4, 4], 2, &cfg, &mut r).unwrap();
        let ev = evaluate(&model, &store, &features, &labels, 0.0);
        assert!((ev.parts.total - ev.parts.joint_ce).abs() < 1e-15);
    }

    #[test]
    fn rate_only_when_predictors_perfect() {
        // ce -> 0 leaves beta * bits * ln 2; checked against the parts
        let cfg = tiny_cfg(1);
        let (features, labels) = toy_features(8, 4);
        let features = vec![features[0].clone()];
        let trained = train_vddib(&features, &labels, 2, &cfg).unwrap();
        let ev = evaluate(&trained.model, &trained.store, &features, &labels, cfg.beta);
        let rate_term = cfg.beta * 6.0 * std::f64::consts::LN_2;
        assert!(ev.parts.joint_ce < 0.05, "joint ce {}", ev.parts.joint_ce);
        assert!(
            (ev.parts.total - ev.parts.joint_ce - cfg.beta * ev.parts.aux_ce[0] - rate_term).abs()
                < 1e-12
        );
    }

    #[test]
    fn overfits_toy_set() {
        let cfg = VddibConfig { quantizers: vec![QuantizerSpec::new(4, 8); 2], steps: 1000, ..tiny_cfg(2) };
        let (features, labels) = toy_features(8, 5);
        let trained = train_vddib(&features, &labels, 2, &cfg).unwrap();
        let ev = evaluate(&trained.model, &trained.store, &features, &labels, cfg.beta);
        assert!(ev.parts.joint_ce < 0.05, "joint ce {}", ev.parts.joint_ce);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = VddibConfig { steps: 60, ..tiny_cfg(2) };
        let (features, labels) = toy_features(8, 6);
        let a = train_vddib(&features, &labels, 2, &cfg).unwrap();
        let b = train_vddib(&features, &labels, 2, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.store.fingerprint(), b.store.fingerprint());
    }

    #[test]
    fn loss_decomposition_exact() {
        let cfg = tiny_cfg(2);
        let (features, labels) = toy_features(8, 7);
        let mut store = ParamStore::new();
        let mut r = rng::derived(8, "i");
        let model = VddibModel::init(&mut store, "vddib", &[4, 4], 2, &cfg, &mut r).unwrap();
        for beta in [0.0, 1e-3, 0.05, 1.0] {
            let ev = evaluate(&model, &store, &features, &labels, beta);
            let recomposed = ev.parts.joint_ce
                + beta
                    * (ev.parts.aux_ce.iter().sum::<f64>()
                        + ev.parts.rate_bits as f64 * std::f64::consts::LN_2);
            assert!((ev.parts.total - recomposed).abs() < 1e-12);
        }
    }
}
