//! Building blocks of the network. Each block owns a set of [`ParamId`]s and
//! records its forward pass on a [`Tape`].

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

use super::config::Pooling;

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl Builder<'_> {
    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.store.init(
            name,
            &[rows, cols],
            Init::Xavier {
                fan_in: rows,
                fan_out: cols,
            },
            self.seed,
        )
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<ParamId> {
        self.store.init(name, dims, Init::Zeros, self.seed)
    }

    pub fn ones(&mut self, name: &str, dims: &[usize]) -> Result<ParamId> {
        self.store.init(name, dims, Init::Ones, self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub(crate) fn new(b: &mut Builder<'_>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: b.ones(&format!("{prefix}.gain"), &[d])?,
            bias: b.zeros(&format!("{prefix}.bias"), &[d])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub(crate) fn new(b: &mut Builder<'_>, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.weight(&format!("{prefix}.W"), d_in, d_out)?,
            bias: b.zeros(&format!("{prefix}.b"), &[d_out])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

/// Temporal convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl ConvParams {
    pub(crate) fn new(b: &mut Builder<'_>, prefix: &str, k: usize, d_in: usize, d_out: usize) -> Result<Self> {
        let kernel = b.store.init(
            &format!("{prefix}.kernel"),
            &[k, d_in, d_out],
            Init::Xavier {
                fan_in: k * d_in,
                fan_out: d_out,
            },
            b.seed,
        )?;
        Ok(Self {
            kernel,
            bias: b.zeros(&format!("{prefix}.bias"), &[d_out])?,
            width: k,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv1d(x, k, b, 1, self.width / 2)
    }
}

/// Multi-head scaled dot-product attention without biases.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
}

/// Result of one attention call: the output and each head's weight matrix.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl AttentionParams {
    pub(crate) fn new(b: &mut Builder<'_>, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            query: b.weight(&format!("{prefix}.q.W"), d, d)?,
            key: b.weight(&format!("{prefix}.k.W"), d, d)?,
            value: b.weight(&format!("{prefix}.v.W"), d, d)?,
            output: b.weight(&format!("{prefix}.o.W"), d, d)?,
            heads,
        })
    }

    /// Queries come from `query_src`, keys and values from `kv_src`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query_src: Var, kv_src: Var) -> Result<AttentionOutput> {
        let wq = tape.param(store, self.query);
        let wk = tape.param(store, self.key);
        let wv = tape.param(store, self.value);
        let wo = tape.param(store, self.output);
        let q = tape.matmul(query_src, wq)?;
        let k = tape.matmul(kv_src, wk)?;
        let v = tape.matmul(kv_src, wv)?;
        let d = tape.dims(q)[1];
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f32).sqrt();
        let mut weights = Vec::with_capacity(self.heads);
        let mut merged: Option<Var> = None;
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dk, dk)?,
                    tape.slice_cols(k, h * dk, dk)?,
                    tape.slice_cols(v, h * dk, dk)?,
                )
            };
            let scores = tape.matmul_transpose_b(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let w = tape.softmax_rows(scores)?;
            let out = tape.matmul(w, vh)?;
            weights.push(w);
            merged = Some(match merged {
                None => out,
                Some(m) => tape.concat_cols(m, out)?,
            });
        }
        let merged = merged.expect("at least one head");
        let output = tape.matmul(merged, wo)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Memory and fuse gates mixing the pre-attention stream with the
/// attention output.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub memory: LinearParams,
    pub fuse: LinearParams,
}

pub struct GateOutput {
    pub output: Var,
    pub memory_gate: Var,
    pub fuse_gate: Var,
}

impl GateParams {
    pub(crate) fn new(b: &mut Builder<'_>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            memory: LinearParams::new(b, &format!("{prefix}.memory"), 2 * d, d)?,
            fuse: LinearParams::new(b, &format!("{prefix}.fuse"), 2 * d, d)?,
        })
    }

    /// `g_m ⊙ prev + g_f ⊙ attended`, both gates read `[text ⊕ prev]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, prev: Var, attended: Var, text: Var) -> Result<GateOutput> {
        let joint = tape.concat_cols(text, prev)?;
        let m = self.memory.forward(tape, store, joint)?;
        let memory_gate = tape.sigmoid(m);
        let f = self.fuse.forward(tape, store, joint)?;
        let fuse_gate = tape.sigmoid(f);
        let kept = tape.mul(memory_gate, prev)?;
        let injected = tape.mul(fuse_gate, attended)?;
        let output = tape.add(kept, injected)?;
        Ok(GateOutput {
            output,
            memory_gate,
            fuse_gate,
        })
    }
}

/// Pre-norm position-wise feed-forward block with a residual connection.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub norm: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl FfnParams {
    pub(crate) fn new(b: &mut Builder<'_>, prefix: &str, d: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNormParams::new(b, &format!("{prefix}.ln"), d)?,
            fc1: LinearParams::new(b, &format!("{prefix}.fc1"), d, mult * d)?,
            fc2: LinearParams::new(b, &format!("{prefix}.fc2"), mult * d, d)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.norm.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, n)?;
        let h = tape.relu(h);
        let y = self.fc2.forward(tape, store, h)?;
        tape.add(x, y)
    }
}

/// Two-layer ReLU perceptron with a scalar output.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub(crate) fn new(b: &mut Builder<'_>, prefix: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: LinearParams::new(b, &format!("{prefix}.fc1"), d_in, hidden)?,
            fc2: LinearParams::new(b, &format!("{prefix}.fc2"), hidden, 1)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }
}

pub fn pool(tape: &mut Tape, x: Var, pooling: Pooling) -> Result<Var> {
    match pooling {
        Pooling::Mean => tape.mean_rows(x),
        Pooling::Last => tape.last_row(x),
    }
}

/// `L × T` matrix that linearly resamples a `T`-step sequence to `L` steps,
/// keeping both endpoints.
pub fn resample_matrix(t: usize, l: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; l * t];
    for j in 0..l {
        let pos = if l == 1 || t == 1 {
            0.0
        } else {
            j as f64 * (t - 1) as f64 / (l - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t - 1);
        let hi = (lo + 1).min(t - 1);
        let w = pos - lo as f64;
        m[j * t + lo] += (1.0 - w) as f32;
        if w > 0.0 {
            m[j * t + hi] += w as f32;
        }
    }
    m
}

/// Sinusoidal position table, `L × d`.
pub fn positional_table(l: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; l * d];
    for pos in 0..l {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}
