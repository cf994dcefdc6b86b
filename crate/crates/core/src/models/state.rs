//! Per-layer recurrent state for token-at-a-time inference.

use std::collections::VecDeque;

use super::attention::LinearAttentionState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    /// Softmax attention: one key row (C) and value row (M) per seen token.
    KvCache {
        keys: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
    },
    /// Linear attention / Performer: `(S, G)`.
    Linear(LinearAttentionState),
    /// Selective SSM: state `H` (C × inner width) plus the last
    /// `conv_width − 1` conv inputs, oldest first, zero at stream start.
    Ssm { h: Tensor, conv: VecDeque<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamingState {
    pub layers: Vec<LayerState>,
    pub token_count: usize,
}

const TAG_KV: u8 = 1;
const TAG_LINEAR: u8 = 2;
const TAG_SSM: u8 = 3;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_floats(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

impl StreamingState {
    /// Little-endian serialization: token count, layer count, then per layer
    /// a tag, its extents and its float payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.token_count as u64).to_le_bytes());
        put_u32(&mut buf, self.layers.len());
        for layer in &self.layers {
            match layer {
                LayerState::KvCache { keys, values } => {
                    buf.push(TAG_KV);
                    buf.extend_from_slice(&(keys.len() as u64).to_le_bytes());
                    put_u32(&mut buf, keys.first().map_or(0, Vec::len));
                    put_u32(&mut buf, values.first().map_or(0, Vec::len));
                    for (k, v) in keys.iter().zip(values) {
                        put_floats(&mut buf, k);
                        put_floats(&mut buf, v);
                    }
                }
                LayerState::Linear(st) => {
                    buf.push(TAG_LINEAR);
                    put_u32(&mut buf, st.s.rows());
                    put_u32(&mut buf, st.s.cols());
                    put_floats(&mut buf, st.s.data());
                    put_floats(&mut buf, &st.g);
                }
                LayerState::Ssm { h, conv } => {
                    buf.push(TAG_SSM);
                    put_u32(&mut buf, h.rows());
                    put_u32(&mut buf, h.cols());
                    put_u32(&mut buf, conv.len());
                    put_floats(&mut buf, h.data());
                    for row in conv {
                        put_floats(&mut buf, row);
                    }
                }
            }
        }
        buf
    }

    pub fn byte_size(&self) -> usize {
        self.to_bytes().len()
    }

    /// Number of cached key rows in `layer`, for attention caches.
    pub fn kv_rows(&self, layer: usize) -> Option<usize> {
        match self.layers.get(layer)? {
            LayerState::KvCache { keys, .. } => Some(keys.len()),
            _ => None,
        }
    }
}
