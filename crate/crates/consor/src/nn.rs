//! Parameter storage and the transformer building blocks shared by the
//! adapter and reasoning stages.
//!
//! Parameters live in a [`ParamStore`] keyed by stable ids; forward passes
//! bind them onto a [`Tape`] at most once, so modules that reuse the same
//! ids (the parameter-shared adapter) accumulate gradients on one slot.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Stable handle to one named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub value: Array2<F>,
}

/// Ordered collection of all trainable tensors of a model.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar coordinates.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count restricted to parameters whose name starts with `prefix`.
    pub fn scalar_count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Binds the parameter onto the tape (at most once per tape).
    pub fn bind(&self, tape: &mut Tape<F>, id: ParamId) -> Var {
        tape.bind(id.0, || self.params[id.0].value.clone())
    }

    /// Gradient lookup helper for a finished backward pass.
    pub fn grad<'g>(
        &self,
        tape: &Tape<F>,
        grads: &'g crate::tape::Gradients<F>,
        id: ParamId,
    ) -> Option<&'g Array2<F>> {
        tape.bound(id.0).and_then(|v| grads.wrt(v))
    }
}

/// Seeded Gaussian initializer (Box–Muller over a counter-based stream).
pub struct Init {
    rng: ChaCha20Rng,
}

impl Init {
    pub fn from_seed(seed: u64) -> Self {
        Init {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_matrix<F: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<F> {
        Array2::from_shape_fn((rows, cols), |_| F::from_f64c(self.standard_normal() * std))
    }
}

/// Fully-connected layer; weights are `[in, out]`, applied as `x · W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            init.normal_matrix(in_dim, out_dim, std),
        );
        let b = store.add(format!("{name}.b"), Array2::zeros((1, out_dim)));
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = store.bind(tape, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = store.bind(tape, b);
                tape.add_rowvec(y, b)
            }
            None => y,
        }
    }
}

/// Learnable layer-norm gain/bias pair.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(
                format!("{name}.gain"),
                Array2::from_elem((1, dim), F::one()),
            ),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let gain = store.bind(tape, self.gain);
        let bias = store.bind(tape, self.bias);
        tape.layer_norm(x, gain, bias, F::from_f64c(LN_EPS))
    }
}

/// Multi-head attention without positional encoding; queries and
/// keys/values may come from different sequences (cross-attention).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(
            dim.is_multiple_of(heads),
            "attention dim {dim} not divisible by {heads} heads"
        );
        MultiHeadAttention {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, init, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Runs attention; when `retain` is given, appends one `[Lq, Lk]`
    /// post-softmax weight matrix per head.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        queries: Var,
        keys_values: Var,
        mut retain: Option<&mut Vec<Array2<F>>>,
    ) -> Var {
        let q = self.q.forward(tape, store, queries);
        let k = self.k.forward(tape, store, keys_values);
        let v = self.v.forward(tape, store, keys_values);
        let head_dim = self.dim / self.heads;
        let scale = F::from_f64c(1.0 / (head_dim as f64).sqrt());

        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let c0 = h * head_dim;
            let c1 = c0 + head_dim;
            let qh = tape.slice_cols(q, c0, c1);
            let kh = tape.slice_cols(k, c0, c1);
            let vh = tape.slice_cols(v, c0, c1);
            let scores = tape.matmul_bt(qh, kh);
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled);
            if let Some(buf) = retain.as_deref_mut() {
                buf.push(tape.value(attn).clone());
            }
            heads.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&heads);
        self.o.forward(tape, store, merged)
    }
}

/// Pre-norm transformer encoder block: MSA and a 4x MLP, both residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl TransformerBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp_in: Linear::new(store, init, &format!("{name}.mlp_in"), dim, 4 * dim),
            mlp_out: Linear::new(store, init, &format!("{name}.mlp_out"), 4 * dim, dim),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let normed = self.ln1.forward(tape, store, x);
        let attended = self.attn.forward(tape, store, normed, normed, None);
        let x = tape.add(x, attended);
        let normed = self.ln2.forward(tape, store, x);
        let hidden = self.mlp_in.forward(tape, store, normed);
        let hidden = tape.gelu(hidden);
        let mlp = self.mlp_out.forward(tape, store, hidden);
        tape.add(x, mlp)
    }
}

/// Pre-norm decoder block: self-attention over the query tokens, then
/// cross-attention onto an external memory, then a 4x MLP.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl DecoderBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        DecoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(
                store,
                init,
                &format!("{name}.self_attn"),
                dim,
                heads,
            ),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(
                store,
                init,
                &format!("{name}.cross_attn"),
                dim,
                heads,
            ),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
            mlp_in: Linear::new(store, init, &format!("{name}.mlp_in"), dim, 4 * dim),
            mlp_out: Linear::new(store, init, &format!("{name}.mlp_out"), 4 * dim, dim),
        }
    }

    /// `retain` collects the per-head cross-attention weights of this block.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        memory: Var,
        retain: Option<&mut Vec<Array2<F>>>,
    ) -> Var {
        let normed = self.ln1.forward(tape, store, x);
        let self_att = self.self_attn.forward(tape, store, normed, normed, None);
        let x = tape.add(x, self_att);
        let normed = self.ln2.forward(tape, store, x);
        let cross = self.cross_attn.forward(tape, store, normed, memory, retain);
        let x = tape.add(x, cross);
        let normed = self.ln3.forward(tape, store, x);
        let hidden = self.mlp_in.forward(tape, store, normed);
        let hidden = tape.gelu(hidden);
        let mlp = self.mlp_out.forward(tape, store, hidden);
        tape.add(x, mlp)
    }
}
