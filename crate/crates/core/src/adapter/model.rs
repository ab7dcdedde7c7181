//! Forward and reverse passes of the adapter stack.
//!
//! ```text
//! x_0     = pre(U)                    queries from the unconditional embedding
//! m       = pre([c_1 | ... | c_n | c_target])
//! h_l     = LayerNorm(x_l)
//! s       = (h_l Wq + bq)(m Wk + bk)^T / sqrt(head_dim)        per head
//! x_{l+1} = x_l + (weights(s) (m Wv + bv)) Wo + bo
//! y       = post(x_L)
//! ```
//!
//! There is no positional encoding and no feed-forward sublayer; keys and
//! values are the (projected) conditions themselves at every layer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{AdapterParams, LayerSlots, LinearSlots};
use crate::error::{DrumError, Result};
use crate::guidance::{self, GuidanceConfig, SegmentLabel, SegmentLayout, SegmentSpec, Weighting};

/// One condition fed to the adapter as keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSegment {
    pub label: SegmentLabel,
    pub preference: f64,
    /// `T x d_cond`.
    pub condition: Array2<f64>,
}

/// Numeric input of one adapter evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterInput {
    /// `T_q x d_cond` query tokens.
    pub queries: Array2<f64>,
    pub segments: Vec<ConditionSegment>,
    pub guidance: GuidanceConfig,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    o: Array2<f64>,
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    raw_queries: Array2<f64>,
    raw_memory: Array2<f64>,
    memory: Array2<f64>,
    layers: Vec<LayerCache>,
    last: Array2<f64>,
    layout: SegmentLayout,
    weighting: Weighting,
}

impl ForwardCache {
    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    /// Attention mass each segment received in the last layer, averaged over
    /// heads and query rows.
    pub fn last_layer_segment_mass(&self) -> Vec<f64> {
        let Some(last) = self.layers.last() else {
            return Vec::new();
        };
        let n = (last.weights.len() * last.weights[0].nrows()) as f64;
        (0..self.layout.specs().len())
            .map(|g| {
                let r = self.layout.range(g);
                last.weights.iter().map(|w| w.slice(s![.., r.clone()]).sum()).sum::<f64>() / n
            })
            .collect()
    }
}

fn linear(p: &AdapterParams, lin: &LinearSlots, x: &Array2<f64>) -> Array2<f64> {
    let y = x.dot(&p.mat(&lin.weight));
    match &lin.bias {
        Some(b) => y + &p.vector(b),
        None => y,
    }
}

fn linear_backward(
    p: &AdapterParams,
    grads: &mut AdapterParams,
    lin: &LinearSlots,
    x: &Array2<f64>,
    dy: &Array2<f64>,
) -> Array2<f64> {
    grads.accumulate_mat(&lin.weight, &x.t().dot(dy));
    if let Some(b) = &lin.bias {
        grads.accumulate_vec(b, &dy.sum_axis(Axis(0)));
    }
    dy.dot(&p.mat(&lin.weight).t())
}

impl AdapterInput {
    fn layout(&self) -> Result<SegmentLayout> {
        SegmentLayout::new(
            self.segments
                .iter()
                .map(|s| SegmentSpec {
                    label: s.label,
                    preference: s.preference,
                    tokens: s.condition.nrows(),
                })
                .collect(),
        )
    }

    fn check(&self, d_cond: usize) -> Result<()> {
        if self.queries.nrows() == 0 || self.queries.ncols() != d_cond {
            return Err(DrumError::Dimension(format!(
                "queries are {:?}, expected at least one row of width {d_cond}",
                self.queries.dim()
            )));
        }
        for s in &self.segments {
            if s.condition.ncols() != d_cond {
                return Err(DrumError::Dimension(format!(
                    "condition width {} differs from adapter d_cond {d_cond}",
                    s.condition.ncols()
                )));
            }
        }
        let finite = |m: &Array2<f64>| m.iter().all(|x| x.is_finite());
        if !finite(&self.queries) || !self.segments.iter().all(|s| finite(&s.condition)) {
            return Err(DrumError::NonFinite("adapter input".into()));
        }
        Ok(())
    }
}

/// Runs the adapter and keeps the intermediates for [`backward`].
pub fn forward_with_cache(params: &AdapterParams, input: &AdapterInput) -> Result<(Array2<f64>, ForwardCache)> {
    let cfg = *params.config();
    input.check(cfg.d_cond)?;
    let layout = input.layout()?;
    let weighting = Weighting::for_config(&layout, &input.guidance)?;

    let mut raw_memory = Array2::zeros((layout.total_tokens(), cfg.d_cond));
    for (g, seg) in input.segments.iter().enumerate() {
        raw_memory.slice_mut(s![layout.range(g), ..]).assign(&seg.condition);
    }
    let (mut x, memory) = match &params.layout().pre {
        Some(pre) => (linear(params, pre, &input.queries), linear(params, pre, &raw_memory)),
        None => (input.queries.clone(), raw_memory.clone()),
    };

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for slots in &params.layout().layers {
        let (out, cache) = layer_forward(params, slots, &x, &memory, &layout, &weighting);
        layers.push(cache);
        x = out;
    }
    let y = match &params.layout().post {
        Some(post) => linear(params, post, &x),
        None => x.clone(),
    };
    Ok((
        y,
        ForwardCache {
            raw_queries: input.queries.clone(),
            raw_memory,
            memory,
            layers,
            last: x,
            layout,
            weighting,
        },
    ))
}

fn layer_forward(
    p: &AdapterParams,
    slots: &LayerSlots,
    x: &Array2<f64>,
    memory: &Array2<f64>,
    layout: &SegmentLayout,
    weighting: &Weighting,
) -> (Array2<f64>, LayerCache) {
    let cfg = p.config();
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    let (x_hat, inv_std) = normalize_rows(x, cfg.ln_eps);
    let h = &x_hat * &p.vector(&slots.ln_gamma) + &p.vector(&slots.ln_beta);
    let q = linear(p, &slots.query, &h);
    let k = linear(p, &slots.key, memory);
    let v = linear(p, &slots.value, memory);

    let mut o = Array2::zeros((x.nrows(), cfg.d_model));
    let mut weights = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let cols = s![.., head * hd..(head + 1) * hd];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let w = guidance::weights(scores.view(), layout, weighting);
        o.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
        weights.push(w);
    }
    let out = x + &linear(p, &slots.output, &o);
    (out, LayerCache { x_hat, inv_std, h, q, k, v, weights, o })
}

fn normalize_rows(x: &Array2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut x_hat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in x_hat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *is = 1.0 / (var + eps).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    (x_hat, inv_std)
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss gradient `grad_out` with respect to the adapter output.
pub fn backward(params: &AdapterParams, cache: &ForwardCache, grad_out: &Array2<f64>) -> AdapterParams {
    let mut grads = params.zeros_like();
    let layout = params.layout();

    let mut dx = match &layout.post {
        Some(post) => linear_backward(params, &mut grads, post, &cache.last, grad_out),
        None => grad_out.clone(),
    };
    let mut dmem = Array2::zeros(cache.memory.raw_dim());
    for (slots, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        dx = layer_backward(params, &mut grads, slots, lc, &cache.memory, &cache.layout, &cache.weighting, &dx, &mut dmem);
    }
    if let Some(pre) = &layout.pre {
        linear_backward(params, &mut grads, pre, &cache.raw_queries, &dx);
        linear_backward(params, &mut grads, pre, &cache.raw_memory, &dmem);
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    p: &AdapterParams,
    grads: &mut AdapterParams,
    slots: &LayerSlots,
    lc: &LayerCache,
    memory: &Array2<f64>,
    layout: &SegmentLayout,
    weighting: &Weighting,
    dout: &Array2<f64>,
    dmem: &mut Array2<f64>,
) -> Array2<f64> {
    let cfg = p.config();
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    let d_o = linear_backward(p, grads, &slots.output, &lc.o, dout);

    let mut dq = Array2::zeros(lc.q.raw_dim());
    let mut dk = Array2::zeros(lc.k.raw_dim());
    let mut dv = Array2::zeros(lc.v.raw_dim());
    for head in 0..n_heads {
        let cols = s![.., head * hd..(head + 1) * hd];
        let w = &lc.weights[head];
        let d_oh = d_o.slice(cols);
        let dw = d_oh.dot(&lc.v.slice(cols).t());
        dv.slice_mut(cols).assign(&w.t().dot(&d_oh));
        let ds = guidance::weights_backward(w.view(), dw.view(), layout, weighting) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
    }

    let dh = linear_backward(p, grads, &slots.query, &lc.h, &dq);
    *dmem += &linear_backward(p, grads, &slots.key, memory, &dk);
    *dmem += &linear_backward(p, grads, &slots.value, memory, &dv);

    grads.accumulate_vec(&slots.ln_gamma, &(&dh * &lc.x_hat).sum_axis(Axis(0)));
    grads.accumulate_vec(&slots.ln_beta, &dh.sum_axis(Axis(0)));
    let dx_hat = &dh * &p.vector(&slots.ln_gamma);
    let d = dx_hat.ncols() as f64;
    let mut dx = dout.clone();
    for (i, (gr, xr)) in dx_hat.rows().into_iter().zip(lc.x_hat.rows()).enumerate() {
        let mean_g = gr.sum() / d;
        let mean_gx = gr.dot(&xr) / d;
        let is = lc.inv_std[i];
        for (j, (&g, &xh)) in gr.iter().zip(xr).enumerate() {
            dx[[i, j]] += is * (g - mean_g - xh * mean_gx);
        }
    }
    dx
}

/// One cross-attention layer on already projected `d_model` tokens:
/// layer-normalized queries, per-head scaled dot-product scores, segment
/// weighting, weighted value sum, output projection and a residual from the
/// un-normalized queries.
pub fn attention_layer(
    params: &AdapterParams,
    layer: usize,
    queries: ArrayView2<f64>,
    memory: ArrayView2<f64>,
    layout: &SegmentLayout,
    guidance: &GuidanceConfig,
) -> Result<Array2<f64>> {
    let cfg = params.config();
    let slots = params
        .layout()
        .layers
        .get(layer)
        .ok_or_else(|| DrumError::Range(format!("layer {layer} of {}", cfg.n_layers)))?;
    if queries.ncols() != cfg.d_model || memory.ncols() != cfg.d_model {
        return Err(DrumError::Dimension(format!(
            "attention layer expects width {}, got queries {:?} and memory {:?}",
            cfg.d_model,
            queries.dim(),
            memory.dim()
        )));
    }
    if memory.nrows() != layout.total_tokens() {
        return Err(DrumError::Dimension(format!(
            "memory has {} tokens, layout describes {}",
            memory.nrows(),
            layout.total_tokens()
        )));
    }
    let weighting = Weighting::for_config(layout, guidance)?;
    let (out, _) = layer_forward(params, slots, &queries.to_owned(), &memory.to_owned(), layout, &weighting);
    Ok(out)
}

/// Attention weights of every head of one layer, for inspection and tests.
pub fn attention_weights(
    params: &AdapterParams,
    input: &AdapterInput,
    layer: usize,
) -> Result<Vec<Array2<f64>>> {
    let (_, cache) = forward_with_cache(params, input)?;
    cache
        .layers
        .get(layer)
        .map(|l| l.weights.clone())
        .ok_or_else(|| DrumError::Range(format!("layer {layer} of {}", params.config().n_layers)))
}
