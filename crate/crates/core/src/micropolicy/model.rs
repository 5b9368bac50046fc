use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::questworld::{Token, BOS, PAD};
use crate::seed;

/// Shape of the token MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Number of most recent tokens the model conditions on.
    pub context: usize,
}

impl PolicyDims {
    pub fn new(vocab: usize, embed: usize, hidden: usize, context: usize) -> Self {
        Self { vocab, embed, hidden, context }
    }

    /// Parameter count: `V*d + W*d*h + h + h*V + V`.
    pub fn param_count(&self) -> usize {
        let Self { vocab: v, embed: d, hidden: h, context: w } = *self;
        v * d + w * d * h + h + h * v + v
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab < 4 || self.embed == 0 || self.hidden == 0 || self.context == 0 {
            return Err(PolicyError::Dims(format!("{self:?}")));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.context * self.embed
    }
}

/// Flat parameter block.
///
/// Layout, in order: embedding `V x d`, hidden weights `(W*d) x h`, hidden
/// bias `h`, output weights `h x V`, output bias `V`. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dims: PolicyDims,
    data: Vec<f64>,
}

/// Offsets of each parameter group inside the flat vector.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    pub embedding: usize,
    pub w_hidden: usize,
    pub b_hidden: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub end: usize,
}

impl ParamLayout {
    pub fn of(dims: &PolicyDims) -> Self {
        let PolicyDims { vocab: v, embed: d, hidden: h, .. } = *dims;
        let embedding = 0;
        let w_hidden = embedding + v * d;
        let b_hidden = w_hidden + dims.input_width() * h;
        let w_out = b_hidden + h;
        let b_out = w_out + h * v;
        Self { embedding, w_hidden, b_hidden, w_out, b_out, end: b_out + v }
    }
}

impl PolicyParams {
    /// Uniform `[-a, a]` initialisation with `a = 1/sqrt(fan_in)` per weight
    /// matrix (fan-in of the embedding taken as `d`); biases start at zero.
    pub fn init(seed: u64, dims: PolicyDims) -> Result<Self, PolicyError> {
        dims.validate()?;
        let mut rng = seed::derived_rng(seed, seed::stream::INIT, 0);
        let lay = ParamLayout::of(&dims);
        let mut data = vec![0.0; dims.param_count()];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for x in &mut data[range] {
                *x = rng.random_range(-a..a);
            }
        };
        fill(lay.embedding..lay.w_hidden, dims.embed);
        fill(lay.w_hidden..lay.b_hidden, dims.input_width());
        fill(lay.w_out..lay.b_out, dims.hidden);
        Ok(Self { dims, data })
    }

    /// All-zero parameters: every next-token distribution is uniform.
    pub fn zeros(dims: PolicyDims) -> Result<Self, PolicyError> {
        dims.validate()?;
        Ok(Self { dims, data: vec![0.0; dims.param_count()] })
    }

    pub fn from_vec(dims: PolicyDims, data: Vec<f64>) -> Result<Self, PolicyError> {
        dims.validate()?;
        if data.len() != dims.param_count() {
            return Err(PolicyError::Dims(format!(
                "expected {} parameters, got {}",
                dims.param_count(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite { term: "parameter".into(), detail: format!("index {i}") });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::of(&self.dims)
    }

    /// Flat view in the documented order.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// FNV-1a over the parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in &self.data {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub(crate) fn window(&self, context: &[Token]) -> Vec<Token> {
        let w = self.dims.context;
        let ctx: &[Token] = if context.is_empty() { &[BOS] } else { context };
        let take = ctx.len().min(w);
        let mut out = vec![PAD; w - take];
        out.extend_from_slice(&ctx[ctx.len() - take..]);
        out
    }

    /// Hidden activations and logits for a window of exactly `context` tokens.
    pub(crate) fn forward(&self, window: &[Token]) -> (Vec<f64>, Vec<f64>) {
        let PolicyDims { vocab: v, embed: d, hidden: h, .. } = self.dims;
        let lay = self.layout();
        let mut z = self.data[lay.b_hidden..lay.b_hidden + h].to_vec();
        for (p, &tok) in window.iter().enumerate() {
            let emb = &self.data[lay.embedding + tok as usize * d..][..d];
            for (k, &xv) in emb.iter().enumerate() {
                let row = &self.data[lay.w_hidden + (p * d + k) * h..][..h];
                for (zj, wj) in z.iter_mut().zip(row) {
                    *zj += xv * wj;
                }
            }
        }
        let hidden: Vec<f64> = z.into_iter().map(f64::tanh).collect();
        let mut logits = self.data[lay.b_out..lay.b_out + v].to_vec();
        for (j, &hj) in hidden.iter().enumerate() {
            let row = &self.data[lay.w_out + j * v..][..v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += hj * w;
            }
        }
        (hidden, logits)
    }

    /// Accumulates into `grad` the gradient of `Σ_v dlogits[v] * logits[v]`
    /// for the forward pass that produced `hidden` from `window`.
    pub(crate) fn backward(&self, window: &[Token], hidden: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let PolicyDims { vocab: v, embed: d, hidden: h, .. } = self.dims;
        let lay = self.layout();
        for (g, dl) in grad[lay.b_out..lay.b_out + v].iter_mut().zip(dlogits) {
            *g += dl;
        }
        let mut dz = vec![0.0; h];
        for j in 0..h {
            let w_row = &self.data[lay.w_out + j * v..][..v];
            let g_row = &mut grad[lay.w_out + j * v..][..v];
            let mut acc = 0.0;
            for ((g, w), dl) in g_row.iter_mut().zip(w_row).zip(dlogits) {
                *g += hidden[j] * dl;
                acc += w * dl;
            }
            dz[j] = acc * (1.0 - hidden[j] * hidden[j]);
        }
        for (g, dj) in grad[lay.b_hidden..lay.b_hidden + h].iter_mut().zip(&dz) {
            *g += dj;
        }
        for (p, &tok) in window.iter().enumerate() {
            let e = lay.embedding + tok as usize * d;
            for k in 0..d {
                let i = p * d + k;
                let xv = self.data[e + k];
                let w_row = &self.data[lay.w_hidden + i * h..][..h];
                let mut dx = 0.0;
                {
                    let g_row = &mut grad[lay.w_hidden + i * h..][..h];
                    for ((g, w), dj) in g_row.iter_mut().zip(w_row).zip(&dz) {
                        *g += xv * dj;
                        dx += w * dj;
                    }
                }
                grad[e + k] += dx;
            }
        }
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub(crate) fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    out
}

/// Log-softmax at temperature 1.
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}
