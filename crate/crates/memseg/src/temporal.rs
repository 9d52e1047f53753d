//! Temporal memory attention: a rolling buffer of recent-frame features
//! attended by the current frame.
//!
//! The buffer stores post-bottleneck stride-8 features (the same space as
//! the memory-facing feature), so downstream consumers can use the attended
//! output wherever they would use the raw feature. A residual connection
//! keeps the empty-buffer case (video start) a plain identity.

use std::collections::VecDeque;

use crate::attention::{ProjectionSet, ProjectionVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW: usize = 2;

/// Ordered buffer of up to `capacity` previous-frame features (oldest first).
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalMemory {
    buffer: VecDeque<Tensor>,
    capacity: usize,
}

impl TemporalMemory {
    pub fn new(capacity: usize) -> TemporalMemory {
        TemporalMemory {
            buffer: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Tensor> {
        self.buffer.iter()
    }

    /// Append a frame's features, evicting the oldest beyond capacity.
    pub fn push(&mut self, features: Tensor) -> Result<()> {
        if let Some(first) = self.buffer.front() {
            if first.shape() != features.shape() {
                return Err(Error::shape(format!(
                    "temporal push: {:?} vs buffered {:?}",
                    features.shape(),
                    first.shape()
                )));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(features);
        Ok(())
    }
}

/// Attend the current frame over every buffered frame's pixels (single-head
/// scaled dot product, residual output). An empty buffer is the identity.
pub fn attend_vars<'t>(
    tape: &'t Tape,
    proj: &ProjectionVars<'t>,
    memory: &TemporalMemory,
    current: Var<'t>,
) -> Result<Var<'t>> {
    if memory.is_empty() {
        return Ok(current);
    }
    let shape = current.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "attend: C×h×w feature required, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    for entry in memory.entries() {
        if entry.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "attend: buffered {:?} vs current {shape:?}",
                entry.shape()
            )));
        }
    }
    let q = proj.g_q.forward(current)?.chw_to_pixel_rows()?;
    // keys/values: all buffered frames' pixels stacked, oldest first
    let mut keys: Option<Var<'t>> = None;
    let mut values: Option<Var<'t>> = None;
    for entry in memory.entries() {
        let frame = tape.constant(entry.clone());
        let k = proj.g_k.forward(frame)?.chw_to_pixel_rows()?;
        let v = proj.g_v.forward(frame)?.chw_to_pixel_rows()?;
        keys = Some(match keys {
            Some(acc) => acc.concat_rows(k)?,
            None => k,
        });
        values = Some(match values {
            Some(acc) => acc.concat_rows(v)?,
            None => v,
        });
    }
    let keys = keys.expect("nonempty buffer");
    let values = values.expect("nonempty buffer");
    let half = q.shape()[1] as f64;
    let attn = q
        .matmul_transpose(keys)?
        .scale(1.0 / half.sqrt())
        .softmax_rows()?;
    let mixed = attn.matmul(values)?.pixel_rows_to_chw(h, w)?;
    proj.g_o.forward(mixed)?.add(current)
}

/// Plain forward of [`attend_vars`].
pub fn attend(memory: &TemporalMemory, current: &Tensor, proj: &ProjectionSet) -> Result<Tensor> {
    let tape = Tape::new();
    let mut leaves = Vec::new();
    let vars = proj.lift(&tape, false, &mut leaves);
    Ok(attend_vars(&tape, &vars, memory, tape.constant(current.clone()))?.value())
}
