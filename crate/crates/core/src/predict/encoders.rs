//! Sequence encoders and the pointer head used by per-sample predictors.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{ParamId, ParamSet, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Recurrent,
    Convolutional,
    Attention,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Recurrent => "recurrent",
            EncoderKind::Convolutional => "convolutional",
            EncoderKind::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecurrentCell {
    Lstm,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Recurrent: per-direction state size. Convolutional: channels.
    /// Attention: model width.
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub kernel_size: usize,
    pub cell: RecurrentCell,
    /// Width of the pointer head's scoring layer.
    pub pointer_dim: usize,
}

impl EncoderConfig {
    pub fn recurrent() -> Self {
        Self {
            kind: EncoderKind::Recurrent,
            hidden_dim: 512,
            layers: 2,
            heads: 0,
            ff_dim: 0,
            kernel_size: 0,
            cell: RecurrentCell::Lstm,
            pointer_dim: 512,
        }
    }

    pub fn convolutional() -> Self {
        Self {
            kind: EncoderKind::Convolutional,
            hidden_dim: 512,
            layers: 4,
            heads: 0,
            ff_dim: 0,
            kernel_size: 3,
            cell: RecurrentCell::Lstm,
            pointer_dim: 512,
        }
    }

    pub fn attention() -> Self {
        Self {
            kind: EncoderKind::Attention,
            hidden_dim: 256,
            layers: 4,
            heads: 8,
            ff_dim: 1024,
            kernel_size: 0,
            cell: RecurrentCell::Lstm,
            pointer_dim: 256,
        }
    }

    pub fn default_for(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::Recurrent => Self::recurrent(),
            EncoderKind::Convolutional => Self::convolutional(),
            EncoderKind::Attention => Self::attention(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_dim == 0 || self.layers == 0 || self.pointer_dim == 0 {
            return Err("hidden_dim, layers and pointer_dim must be positive".into());
        }
        match self.kind {
            EncoderKind::Convolutional if self.kernel_size % 2 == 0 => {
                Err(format!("kernel size {} must be odd", self.kernel_size))
            }
            EncoderKind::Attention if self.heads == 0 || self.hidden_dim % self.heads != 0 => Err(
                format!("hidden_dim {} is not divisible by {} heads", self.hidden_dim, self.heads),
            ),
            EncoderKind::Attention if self.ff_dim == 0 => Err("ff_dim must be positive".into()),
            _ => Ok(()),
        }
    }

    /// Width of the per-token hidden states the encoder emits.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Recurrent => 2 * self.hidden_dim,
            _ => self.hidden_dim,
        }
    }
}

#[derive(Debug, Clone)]
struct RecurrentDirection {
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    /// GRU only: bias of the recurrent projection.
    bh: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct AttentionLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bq: ParamId,
    bk: ParamId,
    bv: ParamId,
    bo: ParamId,
    ln1: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
enum Layers {
    Recurrent(Vec<[RecurrentDirection; 2]>),
    Convolutional(Vec<ConvLayer>),
    Attention {
        wi: ParamId,
        bi: ParamId,
        layers: Vec<AttentionLayer>,
    },
}

/// Pointer head: `logit_i = v · tanh(W h_i + U mean(h) + b)`.
#[derive(Debug, Clone)]
pub struct PointerHead {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    v: ParamId,
}

impl PointerHead {
    pub fn new(params: &mut ParamSet, input: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: params.glorot("pointer.w", input, dim, rng),
            u: params.glorot("pointer.u", input, dim, rng),
            b: params.zeros("pointer.b", 1, dim),
            v: params.glorot("pointer.v", dim, 1, rng),
        }
    }

    /// `L × 1` logits for hidden states `h` (`L × input`).
    pub fn logits(&self, tape: &mut Tape, h: Var) -> Var {
        let (w, u, b, v) = (tape.param(self.w), tape.param(self.u), tape.param(self.b), tape.param(self.v));
        let hw = tape.matmul(h, w);
        let pooled = tape.mean_rows(h);
        let query = tape.matmul(pooled, u);
        let pre = tape.add_row(hw, query);
        let pre = tape.add_row(pre, b);
        let act = tape.tanh(pre);
        tape.matmul(act, v)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Layers,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, input: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let h = config.hidden_dim;
        let layers = match config.kind {
            EncoderKind::Recurrent => {
                let gates = match config.cell {
                    RecurrentCell::Lstm => 4,
                    RecurrentCell::Gru => 3,
                };
                let mut layers = Vec::new();
                for l in 0..config.layers {
                    let inp = if l == 0 { input } else { 2 * h };
                    let mut dir = |name: &str| RecurrentDirection {
                        wx: params.glorot(format!("rnn{l}.{name}.wx"), inp, gates * h, rng),
                        wh: params.glorot(format!("rnn{l}.{name}.wh"), h, gates * h, rng),
                        bx: params.zeros(format!("rnn{l}.{name}.bx"), 1, gates * h),
                        bh: (config.cell == RecurrentCell::Gru)
                            .then(|| params.zeros(format!("rnn{l}.{name}.bh"), 1, gates * h)),
                    };
                    let fwd = dir("fwd");
                    let bwd = dir("bwd");
                    layers.push([fwd, bwd]);
                }
                Layers::Recurrent(layers)
            }
            EncoderKind::Convolutional => Layers::Convolutional(
                (0..config.layers)
                    .map(|l| {
                        let inp = if l == 0 { input } else { h };
                        ConvLayer {
                            w: params.glorot(format!("conv{l}.w"), config.kernel_size * inp, h, rng),
                            b: params.zeros(format!("conv{l}.b"), 1, h),
                        }
                    })
                    .collect(),
            ),
            EncoderKind::Attention => {
                let wi = params.glorot("attn.in.w", input, h, rng);
                let bi = params.zeros("attn.in.b", 1, h);
                let ff = config.ff_dim;
                let layers = (0..config.layers)
                    .map(|l| AttentionLayer {
                        wq: params.glorot(format!("attn{l}.wq"), h, h, rng),
                        wk: params.glorot(format!("attn{l}.wk"), h, h, rng),
                        wv: params.glorot(format!("attn{l}.wv"), h, h, rng),
                        wo: params.glorot(format!("attn{l}.wo"), h, h, rng),
                        bq: params.zeros(format!("attn{l}.bq"), 1, h),
                        bk: params.zeros(format!("attn{l}.bk"), 1, h),
                        bv: params.zeros(format!("attn{l}.bv"), 1, h),
                        bo: params.zeros(format!("attn{l}.bo"), 1, h),
                        ln1: (
                            params.add(format!("attn{l}.ln1.gamma"), Array2::ones((1, h))),
                            params.zeros(format!("attn{l}.ln1.beta"), 1, h),
                        ),
                        w1: params.glorot(format!("attn{l}.ff.w1"), h, ff, rng),
                        b1: params.zeros(format!("attn{l}.ff.b1"), 1, ff),
                        w2: params.glorot(format!("attn{l}.ff.w2"), ff, h, rng),
                        b2: params.zeros(format!("attn{l}.ff.b2"), 1, h),
                        ln2: (
                            params.add(format!("attn{l}.ln2.gamma"), Array2::ones((1, h))),
                            params.zeros(format!("attn{l}.ln2.beta"), 1, h),
                        ),
                    })
                    .collect();
                Layers::Attention { wi, bi, layers }
            }
        };
        Self {
            config: config.clone(),
            layers,
        }
    }

    /// Hidden states (`L × output_dim`) for an `L × input` sequence.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        match &self.layers {
            Layers::Recurrent(layers) => {
                let mut h = x;
                for [fwd, bwd] in layers {
                    let f = self.recurrent_pass(tape, h, fwd, false);
                    let b = self.recurrent_pass(tape, h, bwd, true);
                    h = tape.concat_cols(&[f, b]);
                }
                h
            }
            Layers::Convolutional(layers) => {
                let mut h = x;
                for layer in layers {
                    h = self.conv(tape, h, layer);
                }
                h
            }
            Layers::Attention { wi, bi, layers } => {
                let len = tape.value(x).nrows();
                let (wi, bi) = (tape.param(*wi), tape.param(*bi));
                let proj = tape.matmul(x, wi);
                let proj = tape.add_row(proj, bi);
                let pe = tape.constant(positional_encoding(len, self.config.hidden_dim));
                let mut h = tape.add(proj, pe);
                for layer in layers {
                    h = self.attention_layer(tape, h, layer);
                }
                h
            }
        }
    }

    fn recurrent_pass(&self, tape: &mut Tape, x: Var, dir: &RecurrentDirection, reverse: bool) -> Var {
        let hd = self.config.hidden_dim;
        let len = tape.value(x).nrows();
        let (wx, wh, bx) = (tape.param(dir.wx), tape.param(dir.wh), tape.param(dir.bx));
        let xw = tape.matmul(x, wx);
        let xw = tape.add_row(xw, bx);
        let mut h = tape.constant(Array2::zeros((1, hd)));
        let mut c = tape.constant(Array2::zeros((1, hd)));
        let mut states = vec![h; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let xt = tape.slice_rows(xw, t, t + 1);
            let hw = tape.matmul(h, wh);
            match self.config.cell {
                RecurrentCell::Lstm => {
                    let g = tape.add(xt, hw);
                    let i = tape.slice_cols(g, 0, hd);
                    let i = tape.sigmoid(i);
                    let f = tape.slice_cols(g, hd, 2 * hd);
                    let f = tape.sigmoid(f);
                    let cand = tape.slice_cols(g, 2 * hd, 3 * hd);
                    let cand = tape.tanh(cand);
                    let o = tape.slice_cols(g, 3 * hd, 4 * hd);
                    let o = tape.sigmoid(o);
                    let keep = tape.mul(f, c);
                    let write = tape.mul(i, cand);
                    c = tape.add(keep, write);
                    let tc = tape.tanh(c);
                    h = tape.mul(o, tc);
                }
                RecurrentCell::Gru => {
                    let bh = tape.param(dir.bh.expect("GRU recurrent bias"));
                    let hw = tape.add_row(hw, bh);
                    let xr = tape.slice_cols(xt, 0, hd);
                    let hr = tape.slice_cols(hw, 0, hd);
                    let r = tape.add(xr, hr);
                    let r = tape.sigmoid(r);
                    let xz = tape.slice_cols(xt, hd, 2 * hd);
                    let hz = tape.slice_cols(hw, hd, 2 * hd);
                    let z = tape.add(xz, hz);
                    let z = tape.sigmoid(z);
                    let xn = tape.slice_cols(xt, 2 * hd, 3 * hd);
                    let hn = tape.slice_cols(hw, 2 * hd, 3 * hd);
                    let gated = tape.mul(r, hn);
                    let n = tape.add(xn, gated);
                    let n = tape.tanh(n);
                    let one_minus_z = tape.affine(z, -1.0, 1.0);
                    let fresh = tape.mul(one_minus_z, n);
                    let carried = tape.mul(z, h);
                    h = tape.add(fresh, carried);
                }
            }
            states[t] = h;
        }
        tape.concat_rows(&states)
    }

    fn conv(&self, tape: &mut Tape, x: Var, layer: &ConvLayer) -> Var {
        let k = self.config.kernel_size;
        let pad = k / 2;
        let (len, width) = tape.value(x).dim();
        let zeros = tape.constant(Array2::zeros((pad, width)));
        let padded = if pad > 0 { tape.concat_rows(&[zeros, x, zeros]) } else { x };
        let shifted: Vec<Var> = (0..k).map(|o| tape.slice_rows(padded, o, o + len)).collect();
        let window = tape.concat_cols(&shifted);
        let (w, b) = (tape.param(layer.w), tape.param(layer.b));
        let out = tape.matmul(window, w);
        let out = tape.add_row(out, b);
        tape.relu(out)
    }

    fn attention_layer(&self, tape: &mut Tape, x: Var, l: &AttentionLayer) -> Var {
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let dk = d / heads;
        let proj = |tape: &mut Tape, w: ParamId, b: ParamId| {
            let (w, b) = (tape.param(w), tape.param(b));
            let y = tape.matmul(x, w);
            tape.add_row(y, b)
        };
        let q = proj(tape, l.wq, l.bq);
        let k = proj(tape, l.wk, l.bk);
        let v = proj(tape, l.wv, l.bv);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let (a, b) = (head * dk, (head + 1) * dk);
            let qh = tape.slice_cols(q, a, b);
            let kh = tape.slice_cols(k, a, b);
            let vh = tape.slice_cols(v, a, b);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.affine(scores, scale, 0.0);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let heads_out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let (wo, bo) = (tape.param(l.wo), tape.param(l.bo));
        let o = tape.matmul(heads_out, wo);
        let o = tape.add_row(o, bo);
        let res = tape.add(x, o);
        let h = norm(tape, res, l.ln1);

        let (w1, b1, w2, b2) = (tape.param(l.w1), tape.param(l.b1), tape.param(l.w2), tape.param(l.b2));
        let f = tape.matmul(h, w1);
        let f = tape.add_row(f, b1);
        let f = tape.relu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, b2);
        let res = tape.add(h, f);
        norm(tape, res, l.ln2)
    }
}

fn norm(tape: &mut Tape, x: Var, (gamma, beta): (ParamId, ParamId)) -> Var {
    let y = tape.layer_norm(x, 1e-5);
    let (g, b) = (tape.param(gamma), tape.param(beta));
    let y = tape.mul_row(y, g);
    tape.add_row(y, b)
}

/// Sinusoidal position encoding, `len × dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Encoder plus pointer head with its own parameters.
#[derive(Debug, Clone)]
pub struct PointerNetwork {
    pub config: EncoderConfig,
    pub input_dim: usize,
    pub params: ParamSet,
    encoder: Encoder,
    head: PointerHead,
}

impl PointerNetwork {
    pub fn new(config: &EncoderConfig, input_dim: usize, rng: &mut impl Rng) -> Result<Self, String> {
        config.validate()?;
        let mut params = ParamSet::new();
        let encoder = Encoder::new(config, input_dim, &mut params, rng);
        let head = PointerHead::new(&mut params, config.output_dim(), config.pointer_dim, rng);
        Ok(Self {
            config: config.clone(),
            input_dim,
            params,
            encoder,
            head,
        })
    }

    /// `L × 1` pointer logits for `x` built on `tape`.
    pub fn logits_on(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.encoder.forward(tape, x);
        self.head.logits(tape, h)
    }

    /// Cross-entropy of the 0-based `target` position.
    pub fn loss_on(&self, tape: &mut Tape, x: Var, target: usize) -> Var {
        let logits = self.logits_on(tape, x);
        tape.cross_entropy(logits, target)
    }

    pub fn logits(&self, x: &Array2<f64>) -> Vec<f64> {
        let mut tape = Tape::new(&self.params);
        let xv = tape.constant(x.clone());
        let l = self.logits_on(&mut tape, xv);
        tape.value(l).column(0).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(kind: EncoderKind) -> EncoderConfig {
        EncoderConfig {
            kind,
            hidden_dim: 4,
            layers: 2,
            heads: 2,
            ff_dim: 6,
            kernel_size: 3,
            cell: RecurrentCell::Lstm,
            pointer_dim: 4,
        }
    }

    fn check(config: EncoderConfig, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = PointerNetwork::new(&config, 3, &mut rng).unwrap();
        for v in net.params.values_mut() {
            v.mapv_inplace(|_| rng.gen_range(-0.8..0.8));
        }
        let x = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let target = 2;
        let mut params = net.params.clone();
        let report = check_gradients(&mut params, 1e-5, |tape| {
            let xv = tape.constant(x.clone());
            net.loss_on(tape, xv, target)
        });
        net.params = params;
        report.max_relative_error
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [EncoderKind::Recurrent, EncoderKind::Convolutional, EncoderKind::Attention] {
            let err = check(tiny(kind), 7);
            assert!(err <= 1e-4, "{kind:?}: {err}");
        }
        let mut gru = tiny(EncoderKind::Recurrent);
        gru.cell = RecurrentCell::Gru;
        assert!(check(gru, 8) <= 1e-4);
    }

    #[test]
    fn output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [EncoderKind::Recurrent, EncoderKind::Convolutional, EncoderKind::Attention] {
            let net = PointerNetwork::new(&tiny(kind), 3, &mut rng).unwrap();
            assert_eq!(net.logits(&Array2::zeros((7, 3))).len(), 7);
            assert_eq!(net.logits(&Array2::zeros((1, 3))).len(), 1);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny(EncoderKind::Attention);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(EncoderKind::Convolutional);
        c.kernel_size = 2;
        assert!(c.validate().is_err());
    }
}
