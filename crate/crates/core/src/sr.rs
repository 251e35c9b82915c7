//! Selective retransmission over the distributed coding stage.
//!
//! Each device's code is split into `T` round-sized chunks. Round 1 is
//! unconditional: every device ships its first chunk. Before each later
//! round, per-device attention gates look at everything received so far
//! and emit a hard 0/1 score; only gated-on devices transmit, and the
//! others contribute zero vectors at the server. `T` independent internal
//! predictors classify from the rounds received so far, so the server can
//! stop as soon as one of them is confident. Training always runs all `T`
//! rounds and averages the per-round losses; the confidence threshold
//! matters only at inference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::BatchSampler;
use crate::error::{Error, Result};
use crate::nn::{dims_with, Mlp};
use crate::optim::{OptAlgorithm, Optimizer};
use crate::params::{BoundParams, ParamStore};
use crate::quantizer::QuantizerSpec;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SrConfig {
    /// Maximum transmission attempts, `T >= 1`.
    pub t_max: usize,
    pub beta: f64,
    /// Confidence threshold for stopping; unused during training.
    pub delta0: f64,
    /// Per-device `(bits, chunk dims)` for one round's chunk.
    pub chunk_quantizers: Vec<QuantizerSpec>,
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
    /// One hidden layer makes the gate two fully-connected layers.
    #[serde(default = "default_gate")]
    pub gate_hidden: Vec<usize>,
    #[serde(default = "default_opt")]
    pub optimizer: OptAlgorithm,
}

fn default_head() -> Vec<usize> {
    vec![256, 256]
}
fn default_aux() -> Vec<usize> {
    vec![256]
}
fn default_gate() -> Vec<usize> {
    vec![64]
}
fn default_opt() -> OptAlgorithm {
    OptAlgorithm::Adam
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max < 1 {
            return Err(Error::BadConfig("t_max must be >= 1".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::BadConfig("beta must be >= 0".into()));
        }
        if self.chunk_quantizers.is_empty() {
            return Err(Error::BadConfig("need at least one device".into()));
        }
        Ok(())
    }
}

/// Encoders, chunk quantizers, internal predictors, auxiliary predictors,
/// and attention gates.
#[derive(Clone, Debug)]
pub struct SrModel {
    pub encoders: Vec<Mlp>,
    pub chunk_specs: Vec<QuantizerSpec>,
    pub t_max: usize,
    /// `predictors[tau-1]` reads the gated chunks of rounds `1..=tau`.
    pub predictors: Vec<Mlp>,
    /// Auxiliary heads over each device's full (ungated) code.
    pub aux: Vec<Mlp>,
    /// `gates[tau-2][k]` scores device `k` for round `tau`; round 1 is
    /// hard-wired on and has no parameters.
    pub gates: Vec<Vec<Mlp>>,
}

impl SrModel {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        feature_dims: &[usize],
        num_classes: usize,
        cfg: &SrConfig,
        rng: &mut rng::Rng,
    ) -> Result<SrModel> {
        assert_eq!(feature_dims.len(), cfg.chunk_quantizers.len());
        let t = cfg.t_max;
        let round_width: usize = cfg.chunk_quantizers.iter().map(|s| s.dims).sum();

        let mut encoders = Vec::new();
        for (i, (&fd, spec)) in feature_dims.iter().zip(&cfg.chunk_quantizers).enumerate() {
            encoders.push(Mlp::init(
                store,
                &format!("{prefix}/enc/k{i}"),
                &dims_with(fd, &cfg.encoder_hidden, t * spec.dims),
                rng,
            )?);
        }
        let mut predictors = Vec::new();
        for tau in 1..=t {
            predictors.push(Mlp::init(
                store,
                &format!("{prefix}/pred/t{tau}"),
                &dims_with(tau * round_width, &cfg.head_hidden, num_classes),
                rng,
            )?);
        }
        let mut aux = Vec::new();
        for (i, spec) in cfg.chunk_quantizers.iter().enumerate() {
            aux.push(Mlp::init(
                store,
                &format!("{prefix}/aux/k{i}"),
                &dims_with(t * spec.dims, &cfg.aux_hidden, num_classes),
                rng,
            )?);
        }
        let mut gates = Vec::new();
        for tau in 2..=t {
            let mut round_gates = Vec::new();
            for k in 0..feature_dims.len() {
                round_gates.push(Mlp::init(
                    store,
                    &format!("{prefix}/gate/k{k}/t{tau}"),
                    &dims_with((tau - 1) * round_width, &cfg.gate_hidden, 1),
                    rng,
                )?);
            }
            gates.push(round_gates);
        }
        Ok(SrModel {
            encoders,
            chunk_specs: cfg.chunk_quantizers.clone(),
            t_max: t,
            predictors,
            aux,
            gates,
        })
    }

    pub fn attach(
        prefix: &str,
        feature_dims: &[usize],
        num_classes: usize,
        cfg: &SrConfig,
    ) -> SrModel {
        let t = cfg.t_max;
        let round_width: usize = cfg.chunk_quantizers.iter().map(|s| s.dims).sum();
        let encoders = feature_dims
            .iter()
            .zip(&cfg.chunk_quantizers)
            .enumerate()
            .map(|(i, (&fd, spec))| {
                Mlp::attach(
                    &format!("{prefix}/enc/k{i}"),
                    &dims_with(fd, &cfg.encoder_hidden, t * spec.dims),
                )
            })
            .collect();
        let predictors = (1..=t)
            .map(|tau| {
                Mlp::attach(
                    &format!("{prefix}/pred/t{tau}"),
                    &dims_with(tau * round_width, &cfg.head_hidden, num_classes),
                )
            })
            .collect();
        let aux = cfg
            .chunk_quantizers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                Mlp::attach(
                    &format!("{prefix}/aux/k{i}"),
                    &dims_with(t * spec.dims, &cfg.aux_hidden, num_classes),
                )
            })
            .collect();
        let gates = (2..=t)
            .map(|tau| {
                (0..feature_dims.len())
                    .map(|k| {
                        Mlp::attach(
                            &format!("{prefix}/gate/k{k}/t{tau}"),
                            &dims_with((tau - 1) * round_width, &cfg.gate_hidden, 1),
                        )
                    })
                    .collect()
            })
            .collect();
        SrModel { encoders, chunk_specs: cfg.chunk_quantizers.clone(), t_max: t, predictors, aux, gates }
    }

    pub fn num_devices(&self) -> usize {
        self.encoders.len()
    }
}

/// Split a device's full code into `T` equal contiguous chunks.
pub fn split_chunks(tape: &mut Tape, full: Var, t_max: usize, chunk_dims: usize) -> Vec<Var> {
    let width = tape.value(full).cols();
    assert_eq!(width, t_max * chunk_dims, "code width {width} not divisible into {t_max} chunks of {chunk_dims}");
    (0..t_max).map(|t| tape.slice_cols(full, t * chunk_dims, chunk_dims)).collect()
}

/// Everything one forward pass produces across the `T` rounds.
pub struct SrForward {
    /// Pre-quantizer tanh outputs per device, `[M, T*d]`.
    pub bounded: Vec<Var>,
    /// Raw (ungated) dequantized chunks, `chunks[k][t]`.
    pub chunks: Vec<Vec<Var>>,
    /// Gated chunks actually visible to the server, `gated[k][t]`.
    pub gated: Vec<Vec<Var>>,
    /// Attention scores as `[M]` vectors, `attention[k][t]`; round 1 is a
    /// constant one.
    pub attention: Vec<Vec<Var>>,
    /// Per-round predictor logits, `[M, C]`.
    pub round_logits: Vec<Var>,
}

/// Run encoders, gates, and internal predictors for all rounds.
///
/// Round ordering is strict: gates for round `tau` see only the gated
/// chunks of rounds `1..tau`, so the round-`tau` predictor input extends
/// the round-`tau-1` input.
pub fn sr_forward(
    model: &SrModel,
    tape: &mut Tape,
    bound: &BoundParams,
    features: &[Var],
) -> SrForward {
    let devices = model.num_devices();
    assert_eq!(features.len(), devices, "one feature batch per device");
    let rows = tape.value(features[0]).rows();
    let t = model.t_max;

    let mut bounded = Vec::with_capacity(devices);
    let mut chunks: Vec<Vec<Var>> = Vec::with_capacity(devices);
    for k in 0..devices {
        let pre = model.encoders[k].forward(tape, bound, features[k]);
        let b = tape.tanh(pre);
        let code = tape.quantize_ste(b, model.chunk_specs[k].bits);
        bounded.push(b);
        chunks.push(split_chunks(tape, code, t, model.chunk_specs[k].dims));
    }

    let ones = tape.constant(Tensor::from_vec(vec![1.0; rows]));
    let mut attention: Vec<Vec<Var>> = (0..devices).map(|_| vec![ones]).collect();
    let mut gated: Vec<Vec<Var>> = (0..devices).map(|k| vec![chunks[k][0]]).collect();

    // received[t] concatenates all devices' gated chunks of round t+1
    let mut received: Vec<Var> = Vec::with_capacity(t);
    let round1: Vec<Var> = (0..devices).map(|k| gated[k][0]).collect();
    received.push(tape.concat_cols(&round1));

    let mut round_logits = Vec::with_capacity(t);
    round_logits.push(model.predictors[0].forward(tape, bound, received[0]));

    for tau in 2..=t {
        let history = tape.concat_cols(&received[..tau - 1].to_vec());
        for k in 0..devices {
            let s = model.gates[tau - 2][k].forward(tape, bound, history);
            let s_flat = tape.reshape(s, vec![rows]);
            let a = tape.binarize_ste(s_flat);
            attention[k].push(a);
            let g = tape.row_scale(chunks[k][tau - 1], a);
            gated[k].push(g);
        }
        let this_round: Vec<Var> = (0..devices).map(|k| gated[k][tau - 1]).collect();
        received.push(tape.concat_cols(&this_round));
        let upto = tape.concat_cols(&received[..tau].to_vec());
        round_logits.push(model.predictors[tau - 1].forward(tape, bound, upto));
    }

    SrForward { bounded, chunks, gated, attention, round_logits }
}

/// Per-example transmitted-bit cost in nats, `beta * ln2 * sum_{k,t}
/// a_{k,t} * bits_k * d_chunk_k`, as an `[M]` vector on the tape. The
/// attention scores carry gradient through their surrogate, so higher
/// `beta` pushes gates closed.
pub fn rate_term(
    tape: &mut Tape,
    attention: &[Vec<Var>],
    specs: &[QuantizerSpec],
    beta: f64,
) -> Var {
    let ln2 = std::f64::consts::LN_2;
    let mut total: Option<Var> = None;
    for (k, rounds) in attention.iter().enumerate() {
        let per_round_nats = beta * specs[k].bit_cost() as f64 * ln2;
        for &a in rounds {
            let contrib = tape.scale(a, per_round_nats);
            total = Some(match total {
                Some(acc) => tape.add(acc, contrib),
                None => contrib,
            });
        }
    }
    total.expect("at least one device and round")
}

/// Scalar training loss across all rounds:
/// `mean[ (1/T) sum_tau CE_tau + beta (sum_k CE_aux_k + charged bits in nats) ]`.
pub fn vddib_sr_loss(
    model: &SrModel,
    tape: &mut Tape,
    bound: &BoundParams,
    fwd: &SrForward,
    labels: &[usize],
    beta: f64,
) -> Var {
    let t = model.t_max as f64;
    let mut round_sum: Option<Var> = None;
    for &logits in &fwd.round_logits {
        let ce = tape.softmax_cross_entropy(logits, labels);
        round_sum = Some(match round_sum {
            Some(acc) => tape.add(acc, ce),
            None => ce,
        });
    }
    let mut per_example = tape.scale(round_sum.unwrap(), 1.0 / t);

    for (k, enc_aux) in model.aux.iter().enumerate() {
        let full: Vec<Var> = fwd.chunks[k].clone();
        let full_code = tape.concat_cols(&full);
        let logits = enc_aux.forward(tape, bound, full_code);
        let ce = tape.softmax_cross_entropy(logits, labels);
        let scaled = tape.scale(ce, beta);
        per_example = tape.add(per_example, scaled);
    }

    let rate = rate_term(tape, &fwd.attention, &model.chunk_specs, beta);
    per_example = tape.add(per_example, rate);
    tape.mean(per_example)
}

pub struct SrTrained {
    pub model: SrModel,
    pub store: ParamStore,
    pub trace: Vec<f64>,
}

/// Train the retransmission stage on frozen per-device features. All `T`
/// rounds run every step; no stopping during training.
pub fn train_vddib_sr(
    features: &[Tensor],
    labels: &[usize],
    num_classes: usize,
    cfg: &SrConfig,
) -> Result<SrTrained> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let feature_dims: Vec<usize> = features.iter().map(|f| f.cols()).collect();
    let mut store = ParamStore::new();
    let mut init_rng = rng::derived(cfg.seed, "sr/init");
    let model = SrModel::init(&mut store, "sr", &feature_dims, num_classes, cfg, &mut init_rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut sampler =
        BatchSampler::new(labels.len(), cfg.batch_size, rng::derived(cfg.seed, "sr/batches"));
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fvars: Vec<Var> =
            features.iter().map(|f| tape.constant(f.select_rows(&idx))).collect();
        let fwd = sr_forward(&model, &mut tape, &bound, &fvars);
        let loss = vddib_sr_loss(&model, &mut tape, &bound, &fwd, &yb, cfg.beta);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        trace.push(value);
        let grads = tape.backward(loss);
        store.accumulate_grads(&bound, &grads);
        opt.step(&mut store)?;
    }
    Ok(SrTrained { model, store, trace })
}

/// Confidence score of a normalized probability row: its maximum.
pub fn confidence(probs: &[f64]) -> f64 {
    let sum: f64 = probs.iter().sum();
    assert!(
        (sum - 1.0).abs() <= 1e-6 && probs.iter().all(|&p| p >= 0.0),
        "confidence wants a normalized distribution, got sum {sum}"
    );
    probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}
