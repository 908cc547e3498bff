//! Transformer building blocks on top of [`crate::autograd`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var, MASKED};

pub const LN_EPS: f64 = 1e-5;

/// One forward pass: the tape, read-only parameters, and an optional record
/// of every attention probability matrix produced along the way.
pub struct Fwd<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    pub record_attention: bool,
    pub attentions: Vec<Var>,
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Fwd {
            g: Graph::new(),
            store,
            record_attention: false,
            attentions: Vec::new(),
        }
    }

    pub fn recording(store: &'a ParamStore) -> Self {
        Fwd {
            record_attention: true,
            ..Fwd::new(store)
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.g.value(v)
    }

    /// `softmax(scores + mask)`, recorded when requested.
    pub fn attention_probs(&mut self, scores: Var, mask: Option<&Mat>) -> Var {
        let masked = match mask {
            Some(m) => self.g.add_const(scores, m),
            None => scores,
        };
        let probs = self.g.softmax_rows(masked);
        if self.record_attention {
            self.attentions.push(probs);
        }
        probs
    }
}

/// Parameter factory with a seeded generator so model construction is
/// reproducible.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Glorot-uniform.
    pub fn xavier(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Mat::from_shape_fn((rows, cols), |_| self.rng.gen_range(-bound..bound));
        self.store.add(name, value)
    }

    pub fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let value = Mat::from_shape_fn((rows, cols), |_| {
            // Irwin-Hall approximation is plenty for initialization.
            let u: f64 = (0..12).map(|_| self.rng.gen::<f64>()).sum::<f64>() - 6.0;
            u * std
        });
        self.store.add(name, value)
    }

    pub fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Mat::from_elem((rows, cols), value))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: init.xavier(format!("{name}.weight"), input, output),
            bias: init.constant(format!("{name}.bias"), 1, output, 0.0),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.p(self.weight);
        let b = f.p(self.bias);
        let xw = f.g.matmul(x, w);
        f.g.add_row(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: init.constant(format!("{name}.gamma"), 1, width, 1.0),
            beta: init.constant(format!("{name}.beta"), 1, width, 0.0),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let normed = f.g.layer_norm_rows(x, LN_EPS);
        let gamma = f.p(self.gamma);
        let beta = f.p(self.beta);
        let scaled = f.g.mul_row(normed, gamma);
        f.g.add_row(scaled, beta)
    }
}

/// Additive mask hiding invalid keys, optionally also future positions.
pub fn attention_mask(queries: usize, key_valid: &[bool], causal: bool) -> Option<Mat> {
    let any_masked = key_valid.iter().any(|v| !v);
    if !any_masked && !causal {
        return None;
    }
    Some(Mat::from_shape_fn((queries, key_valid.len()), |(q, k)| {
        if !key_valid[k] || (causal && k > q) {
            MASKED
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, width: usize, heads: usize) -> Self {
        assert_eq!(width % heads, 0, "width {width} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(init, &format!("{name}.q"), width, width),
            key: Linear::new(init, &format!("{name}.k"), width, width),
            value: Linear::new(init, &format!("{name}.v"), width, width),
            output: Linear::new(init, &format!("{name}.o"), width, width),
            heads,
            width,
        }
    }

    pub fn forward(&self, f: &mut Fwd, queries: Var, memory: Var, mask: Option<&Mat>) -> Var {
        let q = self.query.forward(f, queries);
        let k = self.key.forward(f, memory);
        let v = self.value.forward(f, memory);
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = f.g.cols(q, h * head_dim, head_dim);
            let kh = f.g.cols(k, h * head_dim, head_dim);
            let vh = f.g.cols(v, h * head_dim, head_dim);
            let scores = f.g.matmul_t(qh, kh);
            let scores = f.g.scale(scores, scale);
            let probs = f.attention_probs(scores, mask);
            outs.push(f.g.matmul(probs, vh));
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            f.g.concat_cols(&outs)
        };
        self.output.forward(f, joined)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, width: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(init, &format!("{name}.up"), width, hidden),
            down: Linear::new(init, &format!("{name}.down"), hidden, width),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let h = self.up.forward(f, x);
        let h = f.g.relu(h);
        self.down.forward(f, h)
    }
}

/// Post-norm encoder block: self-attention and feed-forward, each wrapped in
/// a residual connection followed by layer normalization.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(init: &mut Init, name: &str, width: usize, heads: usize, ff_hidden: usize) -> Self {
        EncoderBlock {
            attention: MultiHeadAttention::new(init, &format!("{name}.attn"), width, heads),
            norm1: LayerNorm::new(init, &format!("{name}.ln1"), width),
            ff: FeedForward::new(init, &format!("{name}.ff"), width, ff_hidden),
            norm2: LayerNorm::new(init, &format!("{name}.ln2"), width),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, key_valid: &[bool]) -> Var {
        let rows = f.g.shape(x).0;
        let mask = attention_mask(rows, key_valid, false);
        let a = self.attention.forward(f, x, x, mask.as_ref());
        let x = f.g.add(x, a);
        let x = self.norm1.forward(f, x);
        let h = self.ff.forward(f, x);
        let x = f.g.add(x, h);
        self.norm2.forward(f, x)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
}

impl EncoderStack {
    pub fn new(
        init: &mut Init,
        name: &str,
        layers: usize,
        width: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Self {
        EncoderStack {
            blocks: (0..layers)
                .map(|i| EncoderBlock::new(init, &format!("{name}.{i}"), width, heads, ff_hidden))
                .collect(),
        }
    }

    pub fn forward(&self, f: &mut Fwd, mut x: Var, key_valid: &[bool]) -> Var {
        for block in &self.blocks {
            x = block.forward(f, x, key_valid);
        }
        x
    }
}

/// Causal self-attention, cross-attention to a memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    pub fn new(init: &mut Init, name: &str, width: usize, heads: usize, ff_hidden: usize) -> Self {
        DecoderBlock {
            self_attention: MultiHeadAttention::new(init, &format!("{name}.self"), width, heads),
            norm1: LayerNorm::new(init, &format!("{name}.ln1"), width),
            cross_attention: MultiHeadAttention::new(init, &format!("{name}.cross"), width, heads),
            norm2: LayerNorm::new(init, &format!("{name}.ln2"), width),
            ff: FeedForward::new(init, &format!("{name}.ff"), width, ff_hidden),
            norm3: LayerNorm::new(init, &format!("{name}.ln3"), width),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, memory: Var, memory_valid: &[bool]) -> Var {
        let rows = f.g.shape(x).0;
        let causal = attention_mask(rows, &vec![true; rows], true);
        let a = self.self_attention.forward(f, x, x, causal.as_ref());
        let x = f.g.add(x, a);
        let x = self.norm1.forward(f, x);
        let cross_mask = attention_mask(rows, memory_valid, false);
        let c = self.cross_attention.forward(f, x, memory, cross_mask.as_ref());
        let x = f.g.add(x, c);
        let x = self.norm2.forward(f, x);
        let h = self.ff.forward(f, x);
        let x = f.g.add(x, h);
        self.norm3.forward(f, x)
    }
}

/// Fixed sinusoidal position table, `rows × width`.
pub fn sinusoidal_positions(rows: usize, width: usize) -> Mat {
    Mat::from_shape_fn((rows, width), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(width: usize) -> (ParamStore, EncoderBlock) {
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(1),
        };
        let block = EncoderBlock::new(&mut init, "b", width, 2, 4 * width);
        (store, block)
    }

    #[test]
    fn padded_keys_do_not_leak() {
        let (store, block) = setup(8);
        let base = sinusoidal_positions(5, 8);
        let mut other = base.clone();
        other.row_mut(4).fill(3.0);
        let valid = [true, true, true, true, false];
        let run = |x: &Mat| {
            let mut f = Fwd::new(&store);
            let xv = f.g.input(x.clone());
            let out = block.forward(&mut f, xv, &valid);
            f.value(out).clone()
        };
        let a = run(&base);
        let b = run(&other);
        for r in 0..4 {
            for c in 0..8 {
                assert!((a[[r, c]] - b[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m = attention_mask(3, &[true, true, true], true).unwrap();
        assert_eq!(m[[0, 1]], MASKED);
        assert_eq!(m[[2, 1]], 0.0);
        assert!(attention_mask(3, &[true, true], false).is_none());
    }

    #[test]
    fn recorded_attention_rows_sum_to_one() {
        let (store, block) = setup(8);
        let mut f = Fwd::recording(&store);
        let x = f.g.input(sinusoidal_positions(6, 8));
        block.forward(&mut f, x, &[true; 6]);
        assert_eq!(f.attentions.len(), 2);
        for a in &f.attentions {
            for row in f.value(*a).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
