//! Shared transformer building blocks on the autodiff tape.
//!
//! Pre-LN blocks with rotary attention and a GELU feed-forward, plus an
//! incremental variant that attends over cached key/value tensors so
//! token-by-token generation avoids re-encoding the past. Both variants run
//! the identical per-token arithmetic; an equivalence test pins that.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::diffcore::array::{Array, Scalar};
use crate::diffcore::optim::ParamStore;
use crate::diffcore::tape::{attention_masked, Bcast, Mask, NodeId, RopeTable, Tape};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Geometry of a transformer stack.
#[derive(Clone, Copy, Debug)]
pub struct StackConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub ffn_mult: usize,
    /// Rotary frequency base.
    pub rope_base: f64,
}

impl StackConfig {
    pub fn head_dim(&self) -> Result<usize> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        let dh = self.width / self.heads;
        if dh % 2 != 0 {
            return Err(Error::Config(format!("head dim {dh} must be even for rotary pairs")));
        }
        Ok(dh)
    }
}

/// Parameter node handles registered on the current tape.
pub struct TapeParams {
    map: BTreeMap<String, NodeId>,
}

impl TapeParams {
    /// Register every parameter of `store` on `tape`.
    pub fn register<F: Scalar>(tape: &mut Tape<F>, store: &ParamStore<F>) -> Result<TapeParams> {
        Ok(TapeParams { map: store.register_all(tape)? })
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' not registered on tape")))
    }
}

/// y = x @ W + b with W named `{name}.w`, b named `{name}.b`.
pub fn linear<F: Scalar>(tape: &mut Tape<F>, p: &TapeParams, name: &str, x: NodeId) -> Result<NodeId> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bc(y, b, Bcast::LastDim)
}

/// LayerNorm with learned gain/bias `{name}.g` / `{name}.b`.
pub fn layer_norm_affine<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    let n = tape.layer_norm(x)?;
    let n = tape.mul_bc(n, g, Bcast::LastDim)?;
    tape.add_bc(n, b, Bcast::LastDim)
}

fn init_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut Stream,
) -> Result<()> {
    store.insert_weight(&format!("{name}.w"), vec![d_in, d_out], 0.02, rng)?;
    store.insert_zeros(&format!("{name}.b"), vec![d_out])
}

fn init_layer_norm<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Result<()> {
    store.insert(&format!("{name}.g"), Array::full(vec![d], F::one()))?;
    store.insert_zeros(&format!("{name}.b"), vec![d])
}

/// Create all parameters of a stack under `prefix` (blocks + final norm).
pub fn init_stack<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &StackConfig,
    rng: &mut Stream,
) -> Result<()> {
    cfg.head_dim()?;
    let d = cfg.width;
    for l in 0..cfg.layers {
        let b = format!("{prefix}.l{l}");
        init_layer_norm(store, &format!("{b}.ln1"), d)?;
        for nm in ["wq", "wk", "wv", "wo"] {
            init_linear(store, &format!("{b}.{nm}"), d, d, rng)?;
        }
        init_layer_norm(store, &format!("{b}.ln2"), d)?;
        init_linear(store, &format!("{b}.ffn1"), d, d * cfg.ffn_mult, rng)?;
        init_linear(store, &format!("{b}.ffn2"), d * cfg.ffn_mult, d, rng)?;
    }
    init_layer_norm(store, &format!("{prefix}.lnf"), d)
}

/// Cached rotary-rotated keys and values of one layer, token-major
/// (T_cached, H, D_h), detached from any tape.
#[derive(Clone, Debug)]
pub struct LayerKv<F: Scalar> {
    pub k: Array<F>,
    pub v: Array<F>,
}

/// Growable per-layer attention cache for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct KvCache<F: Scalar> {
    layers: Vec<LayerKv<F>>,
}

impl<F: Scalar> KvCache<F> {
    pub fn new() -> Self {
        KvCache { layers: Vec::new() }
    }

    /// Number of cached tokens (0 when empty).
    pub fn cached_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.k.shape()[0])
    }
}

/// Full-sequence stack forward: x is (T, width), every token position gets
/// a rotary phase from `rope` (one timestamp per token), attention follows
/// `mask`. Returns the (T, width) output after the final norm.
pub fn stack_forward<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    prefix: &str,
    cfg: &StackConfig,
    x: NodeId,
    rope: &Arc<RopeTable<F>>,
    mask: &Arc<Mask>,
) -> Result<NodeId> {
    stack_forward_inner(tape, p, prefix, cfg, x, rope, mask, None)
}

/// Incremental stack forward over new tokens (T_new, width) against a
/// key/value cache. The mask must cover (T_new, cached + T_new) positions.
/// When `append` is true the new tokens' keys/values are persisted into the
/// cache (history tokens); when false they are transient (denoising probes).
pub fn stack_forward_cached<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    prefix: &str,
    cfg: &StackConfig,
    x_new: NodeId,
    rope_new: &Arc<RopeTable<F>>,
    mask: &Arc<Mask>,
    cache: &mut KvCache<F>,
    append: bool,
) -> Result<NodeId> {
    if cache.layers.is_empty() {
        cache.layers = (0..cfg.layers)
            .map(|_| LayerKv { k: Array::zeros(vec![0, cfg.heads, cfg.width / cfg.heads]), v: Array::zeros(vec![0, cfg.heads, cfg.width / cfg.heads]) })
            .collect();
    }
    if cache.layers.len() != cfg.layers {
        return Err(Error::Contract(format!(
            "cache has {} layers, stack has {}",
            cache.layers.len(),
            cfg.layers
        )));
    }
    stack_forward_inner(tape, p, prefix, cfg, x_new, rope_new, mask, Some((cache, append)))
}

#[allow(clippy::too_many_arguments)]
fn stack_forward_inner<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TapeParams,
    prefix: &str,
    cfg: &StackConfig,
    x: NodeId,
    rope: &Arc<RopeTable<F>>,
    mask: &Arc<Mask>,
    mut cache: Option<(&mut KvCache<F>, bool)>,
) -> Result<NodeId> {
    let dh = cfg.head_dim()?;
    let t_new = tape.value(x).shape()[0];
    if tape.value(x).shape() != [t_new, cfg.width] {
        return Err(Error::Shape(format!(
            "stack input must be (T, {}), got {:?}",
            cfg.width,
            tape.value(x).shape()
        )));
    }
    let mut h = x;
    for l in 0..cfg.layers {
        let b = format!("{prefix}.l{l}");
        // Attention sublayer.
        let a = layer_norm_affine(tape, p, &format!("{b}.ln1"), h)?;
        let q = linear(tape, p, &format!("{b}.wq"), a)?;
        let k = linear(tape, p, &format!("{b}.wk"), a)?;
        let v = linear(tape, p, &format!("{b}.wv"), a)?;
        let q = tape.reshape(q, vec![t_new, cfg.heads, dh])?;
        let k = tape.reshape(k, vec![t_new, cfg.heads, dh])?;
        let v = tape.reshape(v, vec![t_new, cfg.heads, dh])?;
        let q = tape.rope(q, rope.clone())?;
        let k = tape.rope(k, rope.clone())?;
        let (k_all, v_all) = match &mut cache {
            None => (k, v),
            Some((cache, append)) => {
                let layer = &mut cache.layers[l];
                let (k_all, v_all) = if layer.k.shape()[0] == 0 {
                    (k, v)
                } else {
                    let ck = tape.leaf(layer.k.clone())?;
                    let cv = tape.leaf(layer.v.clone())?;
                    (tape.concat0(&[ck, k])?, tape.concat0(&[cv, v])?)
                };
                if *append {
                    layer.k = Array::concat0(&[&layer.k, tape.value(k)])?;
                    layer.v = Array::concat0(&[&layer.v, tape.value(v)])?;
                }
                (k_all, v_all)
            }
        };
        let attn = attention_masked(tape, q, k_all, v_all, mask.clone())?;
        let attn = tape.reshape(attn, vec![t_new, cfg.width])?;
        let attn = linear(tape, p, &format!("{b}.wo"), attn)?;
        h = tape.add(h, attn)?;
        // Feed-forward sublayer.
        let f = layer_norm_affine(tape, p, &format!("{b}.ln2"), h)?;
        let f = linear(tape, p, &format!("{b}.ffn1"), f)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, p, &format!("{b}.ffn2"), f)?;
        h = tape.add(h, f)?;
    }
    layer_norm_affine(tape, p, &format!("{prefix}.lnf"), h)
}

/// Sinusoidal embedding of a scalar in [0, 1], width `d` (even), as a single
/// row. Used to condition the velocity network on flow time.
pub fn sinusoidal_embedding<F: Scalar>(t: f64, d: usize) -> Result<Array<F>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal embedding width must be even, got {d}")));
    }
    let half = d / 2;
    let mut data = Vec::with_capacity(d);
    for u in 0..half {
        let freq = 10_000.0_f64.powf(-(u as f64) / half as f64);
        data.push(F::of_f64((t * freq).sin()));
        data.push(F::of_f64((t * freq).cos()));
    }
    Array::new(vec![1, d], data)
}
