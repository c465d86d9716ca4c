//! Per-channel asymmetric quantize-dequantize and a W8A8 loss probe.
//!
//! Each channel uses its minimum as zero point and `(max − min) / levels` as
//! scale; codes are rounded half away from zero and clamped to
//! `[0, levels]`. Code 0 and code `levels` dequantize to the channel minimum
//! and maximum exactly, so the output never leaves the channel range and a
//! second pass reproduces the first bit for bit.

use serde::{Deserialize, Serialize};

use crate::densela::{matmul, DenseMatrix};
use crate::problems::{LossParts, ProblemError, TwoLayerNetRD};

pub const INT8_LEVELS: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub zero_point: f64,
    pub scale: f64,
}

/// Which index runs over channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAxis {
    /// Each row is a channel (weights, one row per output unit).
    Rows,
    /// Each column is a channel (activations, one row per sample).
    Cols,
}

fn qdq_channel(values: &mut [f64], levels: u32) -> QuantSpec {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let top = levels as f64;
    let scale = (hi - lo) / top;
    if scale == 0.0 {
        return QuantSpec {
            zero_point: lo,
            scale: 0.0,
        };
    }
    for v in values.iter_mut() {
        let q = ((*v - lo) / scale).round().clamp(0.0, top);
        *v = if q == 0.0 {
            lo
        } else if q == top {
            hi
        } else {
            (q * scale + lo).clamp(lo, hi)
        };
    }
    QuantSpec {
        zero_point: lo,
        scale,
    }
}

/// Quantize-dequantize with `levels + 1` codes per channel.
pub fn qdq_with_levels(
    x: &DenseMatrix,
    axis: ChannelAxis,
    levels: u32,
) -> (DenseMatrix, Vec<QuantSpec>) {
    assert!(levels >= 1, "need at least two codes");
    match axis {
        ChannelAxis::Rows => {
            let mut out = x.clone();
            let cols = x.cols();
            let specs = out
                .as_mut_slice()
                .chunks_mut(cols)
                .map(|row| qdq_channel(row, levels))
                .collect();
            (out, specs)
        }
        ChannelAxis::Cols => {
            let (t, specs) = qdq_with_levels(&x.transpose(), ChannelAxis::Rows, levels);
            (t.transpose(), specs)
        }
    }
}

/// 8-bit quantize-dequantize.
pub fn qdq_per_channel(x: &DenseMatrix, axis: ChannelAxis) -> (DenseMatrix, Vec<QuantSpec>) {
    qdq_with_levels(x, axis, INT8_LEVELS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub loss_fp: f64,
    pub loss_q: f64,
    pub penalty: f64,
}

/// Loss of the net when weights are quantized per output row once and the
/// input and latent activations per channel on every forward pass.
pub fn quantized_loss(net: &TwoLayerNetRD, batch: &DenseMatrix) -> Result<LossParts, ProblemError> {
    let enc_q = qdq_per_channel(&net.enc, ChannelAxis::Rows).0;
    let dec_q = qdq_per_channel(&net.dec, ChannelAxis::Rows).0;
    let x_q = qdq_per_channel(batch, ChannelAxis::Cols).0;
    let z = matmul(&x_q, &enc_q.transpose())?;
    let z_q = qdq_per_channel(&z, ChannelAxis::Cols).0;
    let err = matmul(&z_q, &dec_q.transpose())?.sub(batch)?;
    let n = batch.rows() as f64;
    let rate = z_q.dot(&z_q)? / n;
    let dist = err.dot(&err)? / n;
    Ok(LossParts {
        total: dist + net.lambda * rate,
        rate,
        dist,
    })
}

pub fn w8a8_probe(net: &TwoLayerNetRD, batch: &DenseMatrix) -> Result<ProbeResult, ProblemError> {
    let params = net.initial_params();
    let loss_fp = crate::problems::Objective::TwoLayer(net.clone())
        .loss(&params, Some(batch))?
        .total;
    let loss_q = quantized_loss(net, batch)?.total;
    Ok(ProbeResult {
        loss_fp,
        loss_q,
        penalty: loss_q - loss_fp,
    })
}

/// Probe averaged over fresh batches of `n` samples, one per seed.
pub fn w8a8_probe_seeds(
    net: &TwoLayerNetRD,
    n: usize,
    seeds: &[u64],
) -> Result<ProbeResult, ProblemError> {
    let mut acc = ProbeResult {
        loss_fp: 0.0,
        loss_q: 0.0,
        penalty: 0.0,
    };
    for &seed in seeds {
        let r = w8a8_probe(net, &net.sample_batch(n, seed)?)?;
        acc.loss_fp += r.loss_fp;
        acc.loss_q += r.loss_q;
        acc.penalty += r.penalty;
    }
    let k = seeds.len().max(1) as f64;
    Ok(ProbeResult {
        loss_fp: acc.loss_fp / k,
        loss_q: acc.loss_q / k,
        penalty: acc.penalty / k,
    })
}
