//! Parameter storage and layer primitives shared by the encoder, decoder,
//! and the two prediction heads.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{ConvConf, Tape, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat, name-addressed parameter storage. Registration order is part of
/// the checkpoint contract: loading rebuilds the same architecture and
/// assigns arrays back by position.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Replace all arrays by position; shapes must match exactly.
    pub fn load_values(&mut self, values: Vec<Array2<f64>>) -> Result<(), String> {
        if values.len() != self.values.len() {
            return Err(format!(
                "parameter count mismatch: {} vs {}",
                values.len(),
                self.values.len()
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if v.raw_dim() != self.values[i].raw_dim() {
                return Err(format!("shape mismatch for {}", self.names[i]));
            }
        }
        self.values = values;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// One forward computation: a tape plus memoized bindings of store
/// parameters to tape nodes, so each parameter appears once per graph.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    /// Graph whose parameters receive gradients.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Inference-only graph: parameters enter as constants.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: false,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.trainable {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients after `tape.backward`; `None` when the
    /// parameter did not participate in this graph.
    pub fn gradients(&self) -> Vec<Option<Array2<f64>>> {
        self.bound
            .iter()
            .map(|b| b.map(|v| self.tape.grad(v).clone()))
            .collect()
    }
}

pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

/// Fully connected layer; weights are He-scaled by default.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// `std_scale` multiplies `1/sqrt(fan_in)`; use `sqrt(2)` in front of
    /// ReLU and `1` for output heads.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std_scale: f64,
    ) -> Self {
        let std = std_scale / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal_init(rng, in_dim, out_dim, std));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, out_dim)));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w);
        g.tape.add_row(y, b)
    }
}

/// Convolution layer over channel-major image rows.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub conf: ConvConf,
}

impl ConvLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, conf: ConvConf) -> Self {
        let fan_in = conf.patch_len() as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = store.add(
            format!("{name}.w"),
            normal_init(rng, conf.patch_len(), conf.out_ch, std),
        );
        let b = store.add(format!("{name}.b"), Array2::zeros((1, conf.out_ch)));
        Self { w, b, conf }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.tape.conv2d(x, w, b, &self.conf)
    }
}
