//! Transformer building blocks recorded on a [`Tape`].
//!
//! Layers are pre-norm: `x + Attn(LN(x))` followed by `x + FFN(LN(x))`, with a
//! GELU feed-forward block. Dropout uses inverted scaling and is active only
//! when the forward context carries a dropout RNG.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng as _;

use super::params::ParamStore;
use super::tape::{Segment, Tape, Var};
use crate::error::Result;
use crate::rng::Rng;

pub struct Forward<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    dropout_rng: Option<Rng>,
    leaves: HashMap<String, Var>,
}

impl<'a> Forward<'a> {
    /// Evaluation context: dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            dropout_rng: None,
            leaves: HashMap::new(),
        }
    }

    /// Training context: dropout masks drawn from `rng`.
    pub fn train(store: &'a ParamStore, rng: Rng) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            dropout_rng: Some(rng),
            leaves: HashMap::new(),
        }
    }

    /// Hands back the dropout RNG, leaving the context in evaluation mode.
    pub fn take_rng(&mut self) -> Option<Rng> {
        self.dropout_rng.take()
    }

    pub fn is_train(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Parameter leaf for `name`, recorded once per forward pass.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let v = self.tape.param(self.store, name)?;
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.tape.value(x).len();
        // each 64-bit draw decides two elements by its 32-bit halves
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mut mask = Vec::with_capacity(n + 1);
        while mask.len() < n {
            let bits = rng.next_u64();
            for half in [bits & 0xffff_ffff, bits >> 32] {
                mask.push(if half < threshold { 0.0 } else { keep });
            }
        }
        mask.truncate(n);
        self.tape.mul_const(x, Rc::new(mask))
    }

    fn ffn_block(&mut self, x: Var, prefix: &str, dropout: f64) -> Result<Var> {
        let h = self.layer_norm(x, &format!("{prefix}.ln2"))?;
        let h = self.linear(h, &format!("{prefix}.ffn1"))?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, &format!("{prefix}.ffn2"))?;
        let h = self.dropout(h, dropout)?;
        self.tape.add(x, h)
    }

    fn attend(&mut self, q_in: Var, kv_in: Var, prefix: &str, heads: usize, segments: Rc<Vec<Segment>>, dropout: f64) -> Result<Var> {
        let q = self.linear(q_in, &format!("{prefix}.q"))?;
        let wk = self.p(&format!("{prefix}.k.w"))?;
        let k = self.tape.matmul(kv_in, wk)?;
        let v = self.linear(kv_in, &format!("{prefix}.v"))?;
        let a = self.tape.attention(q, k, v, heads, segments)?;
        let a = self.linear(a, &format!("{prefix}.o"))?;
        self.dropout(a, dropout)
    }

    /// Pre-norm self-attention layer over `segments` of `x`.
    pub fn transformer_layer(&mut self, x: Var, prefix: &str, heads: usize, segments: Rc<Vec<Segment>>, dropout: f64) -> Result<Var> {
        let h = self.layer_norm(x, &format!("{prefix}.ln1"))?;
        let a = self.attend(h, h, &format!("{prefix}.attn"), heads, segments, dropout)?;
        let x = self.tape.add(x, a)?;
        self.ffn_block(x, prefix, dropout)
    }

    /// Pre-norm cross-attention layer: rows of `x` query rows of `memory`.
    pub fn cross_layer(&mut self, x: Var, memory: Var, prefix: &str, heads: usize, segments: Rc<Vec<Segment>>, dropout: f64) -> Result<Var> {
        let hq = self.layer_norm(x, &format!("{prefix}.lnq"))?;
        let hm = self.layer_norm(memory, &format!("{prefix}.lnm"))?;
        let a = self.attend(hq, hm, &format!("{prefix}.attn"), heads, segments, dropout)?;
        let x = self.tape.add(x, a)?;
        self.ffn_block(x, prefix, dropout)
    }
}

fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    store.init_weight(&format!("{prefix}.w"), fan_in, fan_out, rng);
    store.init_const(&format!("{prefix}.b"), &[fan_out], 0.0);
}

pub fn init_linear_params(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    init_linear(store, prefix, fan_in, fan_out, rng);
}

fn init_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.init_const(&format!("{prefix}.g"), &[d], 1.0);
    store.init_const(&format!("{prefix}.b"), &[d], 0.0);
}

fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{part}"), d, d, rng);
    }
    store.remove(&format!("{prefix}.k.b"));
}

fn init_ffn(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut Rng) {
    init_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.ffn1"), d, ffn, rng);
    init_linear(store, &format!("{prefix}.ffn2"), ffn, d, rng);
}

pub fn init_transformer_layer(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut Rng) {
    init_norm(store, &format!("{prefix}.ln1"), d);
    init_attention(store, &format!("{prefix}.attn"), d, rng);
    init_ffn(store, prefix, d, ffn, rng);
}

pub fn init_cross_layer(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut Rng) {
    init_norm(store, &format!("{prefix}.lnq"), d);
    init_norm(store, &format!("{prefix}.lnm"), d);
    init_attention(store, &format!("{prefix}.attn"), d, rng);
    init_ffn(store, prefix, d, ffn, rng);
}
