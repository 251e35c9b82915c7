//! Inference-time episode simulation over error-free bit pipes.
//!
//! A trained retransmission model runs round by round against one sample:
//! round 1 ships every device's first chunk, the internal predictor's
//! confidence decides whether to stop, and gates pick the devices that
//! retransmit in later rounds. Payloads use the packed wire format; the
//! reported bit counts are the pre-padding payload widths. Feedback
//! (gate activations, stop signals) costs nothing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::quantizer::{pack_bits, quantize};
use crate::sr::{confidence, sr_forward, SrModel};
use crate::tensor::Tensor;
use crate::vddib::argmax_tie_low;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Devices share the uplink; latency follows total bits.
    Serial,
    /// Devices transmit simultaneously; latency follows the busiest device.
    Parallel,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChannelModel {
    pub mode: ChannelMode,
    pub uplink_bytes_per_sec: f64,
}

impl ChannelModel {
    pub fn new(mode: ChannelMode, uplink_bytes_per_sec: f64) -> Self {
        assert!(uplink_bytes_per_sec > 0.0, "uplink rate must be positive");
        ChannelModel { mode, uplink_bytes_per_sec }
    }
}

/// Transmission time in seconds for the given per-device bit counts.
pub fn latency(channel: ChannelModel, per_device_bits: &[u64]) -> f64 {
    let denom = 8.0 * channel.uplink_bytes_per_sec;
    match channel.mode {
        ChannelMode::Serial => per_device_bits.iter().sum::<u64>() as f64 / denom,
        ChannelMode::Parallel => {
            per_device_bits.iter().copied().max().unwrap_or(0) as f64 / denom
        }
    }
}

/// One round as the server saw it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SrRoundState {
    /// 1-based round index.
    pub round: usize,
    /// Hard attention per device; round 1 is all ones.
    pub attention: Vec<u8>,
    /// Dequantized chunks after gating (zero vectors for silent devices).
    pub gated_chunks: Vec<Vec<f64>>,
    /// Packed payload per transmitting device (`None` when gated off).
    pub payloads: Vec<Option<Vec<u8>>>,
    /// Bits charged through this round.
    pub cumulative_bits: u64,
    /// Stopping confidence; absent on the final possible round.
    pub confidence: Option<f64>,
}

/// Observable outcome of one inference episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub rounds: Vec<SrRoundState>,
    pub prediction: usize,
    pub rounds_used: usize,
    pub total_bits: u64,
    pub per_device_bits: Vec<u64>,
    pub latency_secs: f64,
}

/// Run one episode from already-extracted per-device features (one row
/// each). Rounds are computed strictly in order; the loop stops the first
/// time a non-final round's confidence reaches `delta0`.
pub fn run_inference_episode(
    model: &SrModel,
    store: &ParamStore,
    features: &[Tensor],
    delta0: f64,
    channel: ChannelModel,
) -> Result<EpisodeTrace> {
    let devices = model.num_devices();
    if features.len() != devices {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} devices",
            features.len(),
            devices
        )));
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let fvars: Vec<Var> = features
        .iter()
        .map(|f| tape.constant(Tensor::matrix(1, f.len(), f.data().to_vec()).unwrap()))
        .collect();
    let fwd = sr_forward(model, &mut tape, &bound, &fvars);

    let t_max = model.t_max;
    let classes = tape.value(fwd.round_logits[0]).cols();
    let mut probs = vec![0.0; classes];
    let mut rounds = Vec::new();
    let mut per_device_bits = vec![0u64; devices];
    let mut cumulative = 0u64;
    let mut stop_round = t_max;

    for tau in 1..=t_max {
        let mut attention = Vec::with_capacity(devices);
        let mut gated_chunks = Vec::with_capacity(devices);
        let mut payloads = Vec::with_capacity(devices);
        for k in 0..devices {
            let a = tape.value(fwd.attention[k][tau - 1]).data()[0];
            let on = a == 1.0;
            attention.push(if on { 1 } else { 0 });
            gated_chunks.push(tape.value(fwd.gated[k][tau - 1]).row(0).to_vec());
            if on {
                let spec = model.chunk_specs[k];
                let bounded = tape.value(fwd.bounded[k]);
                let chunk = &bounded.row(0)[(tau - 1) * spec.dims..tau * spec.dims];
                let code = quantize(chunk, spec);
                per_device_bits[k] += code.bit_cost();
                cumulative += code.bit_cost();
                payloads.push(Some(pack_bits(&code.indices, spec.bits)?));
            } else {
                payloads.push(None);
            }
        }

        softmax_row(tape.value(fwd.round_logits[tau - 1]).row(0), &mut probs);
        let conf = if tau < t_max { Some(confidence(&probs)) } else { None };
        rounds.push(SrRoundState {
            round: tau,
            attention,
            gated_chunks,
            payloads,
            cumulative_bits: cumulative,
            confidence: conf,
        });
        if let Some(c) = conf {
            if c >= delta0 {
                stop_round = tau;
                break;
            }
        }
    }

    let prediction = argmax_tie_low(tape.value(fwd.round_logits[stop_round - 1]).row(0));
    let latency_secs = latency(channel, &per_device_bits);
    Ok(EpisodeTrace {
        rounds,
        prediction,
        rounds_used: stop_round,
        total_bits: cumulative,
        per_device_bits,
        latency_secs,
    })
}

/// Batched counterpart of the episode loop: identical stopping decisions
/// and bit accounting for every row, computed in one forward pass.
pub struct SrBatchEval {
    pub predictions: Vec<usize>,
    pub rounds_used: Vec<usize>,
    pub bits_used: Vec<u64>,
    /// Full (all-round) integer code per device per sample, for entropy
    /// audits.
    pub full_codes: Vec<Vec<Vec<u16>>>,
    /// Mean cross-entropy of each device's auxiliary head, in nats.
    pub aux_ce: Vec<f64>,
    /// Mean cross-entropy of the final-round predictor, in nats.
    pub final_ce: f64,
}

pub fn sr_batch_evaluate(
    model: &SrModel,
    store: &ParamStore,
    features: &[Tensor],
    labels: &[usize],
    delta0: f64,
) -> Result<SrBatchEval> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = labels.len();
    let devices = model.num_devices();
    let t_max = model.t_max;
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let fvars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let fwd = sr_forward(model, &mut tape, &bound, &fvars);

    let classes = tape.value(fwd.round_logits[0]).cols();
    let mut probs = vec![0.0; classes];
    let mut predictions = vec![0usize; n];
    let mut rounds_used = vec![t_max; n];
    let mut bits_used = vec![0u64; n];
    let mut stopped = vec![false; n];

    for tau in 1..=t_max {
        let logits = tape.value(fwd.round_logits[tau - 1]);
        for m in 0..n {
            if stopped[m] {
                continue;
            }
            for k in 0..devices {
                let a = tape.value(fwd.attention[k][tau - 1]).data()[m];
                if a == 1.0 {
                    bits_used[m] += model.chunk_specs[k].bit_cost();
                }
            }
            if tau < t_max {
                softmax_row(logits.row(m), &mut probs);
                if confidence(&probs) >= delta0 {
                    stopped[m] = true;
                    rounds_used[m] = tau;
                    predictions[m] = argmax_tie_low(logits.row(m));
                }
            } else {
                rounds_used[m] = t_max;
                predictions[m] = argmax_tie_low(logits.row(m));
            }
        }
    }

    let mut full_codes = Vec::with_capacity(devices);
    for k in 0..devices {
        let bounded = tape.value(fwd.bounded[k]);
        let spec = model.chunk_specs[k];
        let full_spec = crate::quantizer::QuantizerSpec::new(spec.bits, spec.dims * t_max);
        let codes = (0..n).map(|m| quantize(bounded.row(m), full_spec).indices).collect();
        full_codes.push(codes);
    }

    let mut aux_ce = Vec::with_capacity(devices);
    for k in 0..devices {
        let full: Vec<Var> = fwd.chunks[k].clone();
        let full_code = tape.concat_cols(&full);
        let logits = model.aux[k].forward(&mut tape, &bound, full_code);
        let ce = tape.softmax_cross_entropy(logits, labels);
        aux_ce.push(tape.value(ce).data().iter().sum::<f64>() / n as f64);
    }
    let final_ce_var = tape.softmax_cross_entropy(fwd.round_logits[t_max - 1], labels);
    let final_ce = tape.value(final_ce_var).data().iter().sum::<f64>() / n as f64;

    Ok(SrBatchEval { predictions, rounds_used, bits_used, full_codes, aux_ce, final_ce })
}
