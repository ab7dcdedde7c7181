use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DrumError, Result};
use crate::rng::DrumRng;

/// Architecture of the adapter stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Width of the encoder condition tokens.
    pub d_cond: usize,
    /// Width of the attention stack.
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Linear maps `d_cond -> d_model` before and `d_model -> d_cond` after
    /// the stack. Required whenever the two widths differ.
    pub projection: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl AdapterConfig {
    /// Toy configuration used throughout the tests: 64 wide, 4 heads, 4 layers.
    pub fn toy(d_cond: usize) -> Self {
        Self {
            d_cond,
            d_model: d_cond,
            n_heads: 4,
            n_layers: 4,
            projection: false,
            ln_eps: default_ln_eps(),
        }
    }

    /// Ten layers; when `encoding_ratio > 1` the stack runs at
    /// `d_cond / encoding_ratio` behind linear projections.
    pub fn full(d_cond: usize, n_heads: usize, encoding_ratio: usize) -> Self {
        let ratio = encoding_ratio.max(1);
        Self {
            d_cond,
            d_model: d_cond / ratio,
            n_heads,
            n_layers: 10,
            projection: ratio > 1,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_cond == 0 || self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(DrumError::Invalid(format!("adapter sizes must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(DrumError::Invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.projection && self.d_model != self.d_cond {
            return Err(DrumError::Invalid(format!(
                "d_model {} differs from d_cond {} but projection is off",
                self.d_model, self.d_cond
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(DrumError::Invalid("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Location of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Biases and norm parameters are stored as `1 x n`.
    pub fn is_vector(&self) -> bool {
        self.rows == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearSlots {
    pub weight: TensorSlot,
    /// Absent on the key projection: a key bias adds the same amount to every
    /// score of a query row, which softmax cancels.
    pub bias: Option<TensorSlot>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln_gamma: TensorSlot,
    pub ln_beta: TensorSlot,
    pub query: LinearSlots,
    pub key: LinearSlots,
    pub value: LinearSlots,
    pub output: LinearSlots,
}

/// Fixed tensor order of the flat buffer (and of checkpoints):
/// `pre.{weight,bias}` (with projection), then per layer
/// `ln.{gamma,beta}`, `q.{weight,bias}`, `k.weight`, `v.{weight,bias}`,
/// `o.{weight,bias}`, then `post.{weight,bias}` (with projection). Weights
/// are `in x out`, applied as `x W + b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub pre: Option<LinearSlots>,
    pub layers: Vec<LayerSlots>,
    pub post: Option<LinearSlots>,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(cfg: &AdapterConfig) -> Self {
        let mut offset = 0;
        let mut slot = |name: String, rows: usize, cols: usize| {
            let s = TensorSlot { name, offset, rows, cols };
            offset += rows * cols;
            s
        };
        let linear = |slot: &mut dyn FnMut(String, usize, usize) -> TensorSlot, name: &str, i: usize, o: usize| {
            LinearSlots {
                weight: slot(format!("{name}.weight"), i, o),
                bias: Some(slot(format!("{name}.bias"), 1, o)),
            }
        };
        let unbiased = |slot: &mut dyn FnMut(String, usize, usize) -> TensorSlot, name: &str, i: usize, o: usize| {
            LinearSlots {
                weight: slot(format!("{name}.weight"), i, o),
                bias: None,
            }
        };
        let (dc, dm) = (cfg.d_cond, cfg.d_model);
        let pre = cfg.projection.then(|| linear(&mut slot, "pre", dc, dm));
        let layers = (0..cfg.n_layers)
            .map(|l| LayerSlots {
                ln_gamma: slot(format!("layers.{l}.ln.gamma"), 1, dm),
                ln_beta: slot(format!("layers.{l}.ln.beta"), 1, dm),
                query: linear(&mut slot, &format!("layers.{l}.q"), dm, dm),
                key: unbiased(&mut slot, &format!("layers.{l}.k"), dm, dm),
                value: linear(&mut slot, &format!("layers.{l}.v"), dm, dm),
                output: linear(&mut slot, &format!("layers.{l}.o"), dm, dm),
            })
            .collect();
        let post = cfg.projection.then(|| linear(&mut slot, "post", dm, dc));
        drop(slot);
        Self { pre, layers, post, len: offset }
    }

    /// All slots in buffer order.
    pub fn slots(&self) -> Vec<&TensorSlot> {
        fn push<'a>(out: &mut Vec<&'a TensorSlot>, lin: &'a LinearSlots) {
            out.push(&lin.weight);
            out.extend(lin.bias.as_ref());
        }
        let mut out = Vec::new();
        if let Some(p) = &self.pre {
            push(&mut out, p);
        }
        for l in &self.layers {
            out.extend([&l.ln_gamma, &l.ln_beta]);
            for lin in [&l.query, &l.key, &l.value, &l.output] {
                push(&mut out, lin);
            }
        }
        if let Some(p) = &self.post {
            push(&mut out, p);
        }
        out
    }
}

/// Every learnable tensor of the adapter, stored in one flat `f64` buffer.
///
/// The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    config: AdapterConfig,
    layout: ParamLayout,
    data: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let data = vec![0.0; layout.len];
        Ok(Self { config, layout, data })
    }

    /// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases, unit norm gains. Draws follow buffer order.
    pub fn init(config: AdapterConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = DrumRng::new(seed);
        let slots: Vec<TensorSlot> = p.layout.slots().into_iter().cloned().collect();
        for slot in slots {
            let values = &mut p.data[slot.range()];
            if slot.name.ends_with(".gamma") {
                values.fill(1.0);
            } else if slot.name.ends_with(".weight") {
                let bound = 1.0 / (slot.rows as f64).sqrt();
                values.iter_mut().for_each(|v| *v = rng.uniform_in(-bound, bound));
            }
        }
        Ok(p)
    }

    pub fn from_flat(config: AdapterConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if data.len() != layout.len {
            return Err(DrumError::Dimension(format!(
                "parameter buffer has {} values, architecture needs {}",
                data.len(),
                layout.len
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(DrumError::NonFinite("adapter parameters".into()));
        }
        Ok(Self { config, layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

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

    pub fn mat(&self, slot: &TensorSlot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((slot.rows, slot.cols), &self.data[slot.range()]).expect("slot shape")
    }

    pub fn vector(&self, slot: &TensorSlot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[slot.range()])
    }

    /// Adds a matrix (any memory order) into a slot.
    pub(crate) fn accumulate_mat(&mut self, slot: &TensorSlot, m: &Array2<f64>) {
        debug_assert_eq!(m.dim(), (slot.rows, slot.cols));
        for (d, x) in self.data[slot.range()].iter_mut().zip(m.iter()) {
            *d += x;
        }
    }

    pub(crate) fn accumulate_vec(&mut self, slot: &TensorSlot, v: &Array1<f64>) {
        debug_assert_eq!(v.len(), slot.len());
        for (d, x) in self.data[slot.range()].iter_mut().zip(v.iter()) {
            *d += x;
        }
    }

    pub fn add_assign(&mut self, other: &AdapterParams) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let cfg = AdapterConfig::toy(64);
        let layout = ParamLayout::new(&cfg);
        let per_layer = 2 * 64 + 4 * 64 * 64 + 3 * 64;
        assert_eq!(layout.len, 4 * per_layer);
        assert_eq!(layout.slots().len(), 4 * 9);

        let proj = AdapterConfig { d_cond: 32, d_model: 8, n_heads: 2, n_layers: 1, projection: true, ln_eps: 1e-5 };
        let layout = ParamLayout::new(&proj);
        assert_eq!(layout.len, (32 * 8 + 8) + (2 * 8 + 4 * 64 + 3 * 8) + (8 * 32 + 32));
        let slots = layout.slots();
        assert_eq!(slots.first().unwrap().name, "pre.weight");
        assert_eq!(slots.last().unwrap().name, "post.bias");
        // contiguous and ordered
        let mut next = 0;
        for s in slots {
            assert_eq!(s.offset, next);
            next += s.len();
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = AdapterConfig::toy(64);
        cfg.n_heads = 5;
        assert!(AdapterParams::zeros(cfg).is_err());
        let cfg = AdapterConfig { d_model: 16, ..AdapterConfig::toy(64) };
        assert!(AdapterParams::zeros(cfg).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = AdapterConfig::toy(16);
        let a = AdapterParams::init(cfg, 1).unwrap();
        assert_eq!(a, AdapterParams::init(cfg, 1).unwrap());
        assert_ne!(a, AdapterParams::init(cfg, 2).unwrap());
        let l = &a.layout().layers[0];
        assert!(a.vector(&l.ln_gamma).iter().all(|&g| g == 1.0));
        assert!(a.vector(l.query.bias.as_ref().unwrap()).iter().all(|&b| b == 0.0));
        assert!(a.mat(&l.query.weight).iter().all(|&w| w.abs() <= 0.25));
    }

    #[test]
    fn full_config_uses_encoding_ratio() {
        let cfg = AdapterConfig::full(4096, 8, 4);
        assert_eq!(cfg.d_model, 1024);
        assert_eq!(cfg.n_layers, 10);
        assert!(cfg.projection);
        assert!(cfg.validate().is_ok());
    }
}
