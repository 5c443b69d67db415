//! Reference classifiers with named activation capture.
//!
//! Both models rebuild a [`Tape`] on every forward pass. Named layers can be
//! *captured* (their activation and, after a backward pass, their gradient
//! are returned) or *spliced* (the activation is replaced by a caller-given
//! tensor, which then becomes a differentiable leaf).

mod cnn;
pub mod train;
mod vit;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use cnn::{CnnConfig, TinyCnnCbam};
pub use vit::{TinyVit, VitConfig};

use crate::autodiff::{softmax_values, Tape, Var};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cnn,
    Vit,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Cnn => "cnn",
            Family::Vit => "vit",
        }
    }
}

/// Architecture descriptor stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Arch {
    Cnn(CnnConfig),
    Vit(VitConfig),
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Replaces values from another store with identical names and shapes.
    fn assign(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter names do not match architecture".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Format(format!(
                    "parameter shape {:?} does not match architecture {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("non-negative std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
    }
}

/// Which trainable inputs get gradients on a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradMode {
    pub params: bool,
    pub input: bool,
}

impl GradMode {
    pub const NONE: GradMode = GradMode {
        params: false,
        input: false,
    };
    pub const PARAMS: GradMode = GradMode {
        params: true,
        input: false,
    };
}

/// Capture/splice bookkeeping threaded through a forward pass.
pub(crate) struct Recorder<'a> {
    capture: &'a [&'a str],
    splice: Option<(&'a str, &'a Tensor)>,
    captured: BTreeMap<String, Var>,
    spliced: Option<Var>,
    pub(crate) attention: Vec<Vec<Tensor>>,
    pub(crate) keep_attention: bool,
}

impl<'a> Recorder<'a> {
    pub(crate) fn point(&mut self, tape: &mut Tape, name: &str, v: Var) -> Result<Var> {
        let mut v = v;
        if let Some((at, t)) = self.splice {
            if at == name {
                if t.shape() != tape.value(v).shape() {
                    return Err(Error::dim(format!(
                        "splice at `{name}`: expected {:?}, got {:?}",
                        tape.value(v).shape(),
                        t.shape()
                    )));
                }
                v = tape.leaf(t.clone(), true);
                self.spliced = Some(v);
            }
        }
        if self.capture.contains(&name) {
            v = tape.track(v);
            self.captured.insert(name.to_string(), v);
        }
        Ok(v)
    }
}

/// Parameters bound to tape leaves for one pass.
pub(crate) struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub(crate) fn get(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        self.vars[i]
    }
}

pub(crate) fn bind<'a>(tape: &mut Tape, store: &'a ParamStore, grad: bool) -> Bound<'a> {
    let vars = store
        .values
        .iter()
        .map(|t| tape.leaf(t.clone(), grad))
        .collect();
    Bound { store, vars }
}

/// `x @ w + b` for `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [1, d_out]`.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let shape = tape.value(y).shape().to_vec();
    let bias = tape.expand(b, &shape)?;
    tape.add(y, bias)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Cnn(TinyCnnCbam),
    Vit(TinyVit),
}

/// Output of one instrumented pass, ready for a backward sweep.
pub struct InstrumentedForward {
    tape: Tape,
    logits: Var,
    input: Var,
    captured: BTreeMap<String, Var>,
    spliced: Option<Var>,
    attention: Vec<Vec<Tensor>>,
    param_vars: Vec<Var>,
}

/// Activations and gradients after a backward sweep.
#[derive(Debug)]
pub struct BackwardResult {
    pub activations: BTreeMap<String, Tensor>,
    pub activation_grads: BTreeMap<String, Tensor>,
    /// One per parameter in store order; zeros when parameters were frozen.
    pub param_grads: Vec<Tensor>,
    pub input_grad: Option<Tensor>,
    pub splice_grad: Option<Tensor>,
    pub loss: f64,
}

impl InstrumentedForward {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let l = self.logits();
        softmax_values(l.data(), l.shape(), 0)
    }

    pub fn activation(&self, name: &str) -> Result<&Tensor> {
        self.captured
            .get(name)
            .map(|&v| self.tape.value(v))
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Per layer, per head, the `[tokens, tokens]` attention matrix. Empty for
    /// the CNN.
    pub fn attention(&self) -> &[Vec<Tensor>] {
        &self.attention
    }

    /// Attention as one `[depth, heads, tokens, tokens]` tensor.
    pub fn attention_stack(&self) -> Option<Tensor> {
        let first = self.attention.first()?.first()?;
        let (depth, heads) = (self.attention.len(), self.attention[0].len());
        let mut shape = vec![depth, heads];
        shape.extend_from_slice(first.shape());
        let data = self
            .attention
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        Some(Tensor::from_parts(shape, data))
    }

    /// Differentiates the pre-softmax logit of `class`.
    pub fn backward_logit(mut self, class: usize) -> Result<BackwardResult> {
        let n = self.logits().numel();
        if class >= n {
            return Err(Error::invalid(format!("class {class} out of range for {n} classes")));
        }
        let picked = self.tape.narrow(self.logits, 0, class, 1)?;
        let loss = self.tape.sum(picked)?;
        self.finish(loss)
    }

    /// Differentiates the cross-entropy loss against `target`.
    pub fn backward_loss(mut self, target: usize) -> Result<BackwardResult> {
        let loss = self.tape.cross_entropy(self.logits, target)?;
        self.finish(loss)
    }

    fn finish(self, loss: Var) -> Result<BackwardResult> {
        let loss_value = self.tape.value(loss).item()?;
        let activations: BTreeMap<String, Tensor> = self
            .captured
            .iter()
            .map(|(k, &v)| (k.clone(), self.tape.value(v).clone()))
            .collect();
        let shapes: Vec<Vec<usize>> = self
            .param_vars
            .iter()
            .map(|&v| self.tape.value(v).shape().to_vec())
            .collect();
        let captured = self.captured;
        let (input, spliced, params) = (self.input, self.spliced, self.param_vars);
        let mut grads = self.tape.backward(loss)?;
        let activation_grads = captured
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(activations[k].shape().to_vec()));
                (k.clone(), g)
            })
            .collect();
        let param_grads = params
            .iter()
            .zip(shapes)
            .map(|(&v, s)| grads.take(v).unwrap_or_else(|| Tensor::zeros(s)))
            .collect();
        Ok(BackwardResult {
            activations,
            activation_grads,
            param_grads,
            input_grad: grads.take(input),
            splice_grad: spliced.and_then(|v| grads.take(v)),
            loss: loss_value,
        })
    }
}

impl Model {
    pub fn new(arch: &Arch, seed: u64) -> Result<Self> {
        Ok(match arch {
            Arch::Cnn(c) => Model::Cnn(TinyCnnCbam::new(c.clone(), seed)?),
            Arch::Vit(c) => Model::Vit(TinyVit::new(c.clone(), seed)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            Model::Cnn(m) => Arch::Cnn(m.config().clone()),
            Model::Vit(m) => Arch::Vit(m.config().clone()),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Model::Cnn(_) => Family::Cnn,
            Model::Vit(_) => Family::Vit,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::Cnn(m) => m.config().n_classes,
            Model::Vit(m) => m.config().n_classes,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            Model::Cnn(m) => m.config().image_size,
            Model::Vit(m) => m.config().image_size,
        }
    }

    /// Default Grad-CAM layer.
    pub fn gradcam_layer(&self) -> String {
        match self {
            Model::Cnn(_) => "cbam_out".into(),
            Model::Vit(m) => format!("block{}_attn_in", m.config().depth - 1),
        }
    }

    pub fn layer_names(&self) -> Vec<String> {
        match self {
            Model::Cnn(m) => m.layer_names(),
            Model::Vit(m) => m.layer_names(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Cnn(m) => &m.params,
            Model::Vit(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Cnn(m) => &mut m.params,
            Model::Vit(m) => &mut m.params,
        }
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let s = self.image_size();
        if image.shape() != [1, s, s] {
            return Err(Error::dim(format!(
                "expected a [1, {s}, {s}] image, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    fn check_layers<'n>(&self, names: impl IntoIterator<Item = &'n str>) -> Result<()> {
        let known = self.layer_names();
        for n in names {
            if !known.iter().any(|k| k == n) {
                return Err(Error::UnknownLayer(n.to_string()));
            }
        }
        Ok(())
    }

    /// Full instrumented pass. `capture` names must come from
    /// [`Model::layer_names`].
    pub fn forward(&self, image: &Tensor, capture: &[&str], grad: GradMode) -> Result<InstrumentedForward> {
        self.run(image, capture, None, grad, true)
    }

    /// Runs the network with the activation at `layer` replaced by
    /// `activation`; the splice point becomes a differentiable leaf.
    pub fn forward_spliced(
        &self,
        image: &Tensor,
        layer: &str,
        activation: &Tensor,
        capture: &[&str],
    ) -> Result<InstrumentedForward> {
        self.run(image, capture, Some((layer, activation)), GradMode::NONE, true)
    }

    fn run(
        &self,
        image: &Tensor,
        capture: &[&str],
        splice: Option<(&str, &Tensor)>,
        grad: GradMode,
        keep_attention: bool,
    ) -> Result<InstrumentedForward> {
        self.check_input(image)?;
        self.check_layers(capture.iter().copied().chain(splice.map(|s| s.0)))?;
        let mut tape = Tape::new();
        let input = tape.leaf(image.clone(), grad.input);
        let bound = bind(&mut tape, self.params(), grad.params);
        let param_vars = bound.vars.clone();
        let mut rec = Recorder {
            capture,
            splice,
            captured: BTreeMap::new(),
            spliced: None,
            attention: Vec::new(),
            keep_attention,
        };
        let logits = match self {
            Model::Cnn(m) => m.graph(&mut tape, input, &bound, &mut rec)?,
            Model::Vit(m) => m.graph(&mut tape, input, &bound, &mut rec)?,
        };
        Ok(InstrumentedForward {
            tape,
            logits,
            input,
            captured: rec.captured,
            spliced: rec.spliced,
            attention: rec.attention,
            param_vars,
        })
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let f = self.run(image, &[], None, GradMode::NONE, false)?;
        Ok(f.logits().clone())
    }

    /// Softmax of the logits.
    pub fn predict_proba(&self, image: &Tensor) -> Result<Vec<f64>> {
        let l = self.logits(image)?;
        Ok(softmax_values(l.data(), l.shape(), 0))
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = serde_json::json!({ "kind": "faudit-model", "arch": self.arch() });
        let mut c = Container::new(header.to_string());
        let p = self.params();
        for (n, t) in p.names.iter().zip(&p.values) {
            c.push(n.clone(), t.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            kind: String,
            arch: Arch,
        }
        let h: Header = serde_json::from_str(&c.header)?;
        if h.kind != "faudit-model" {
            return Err(Error::Format(format!("container kind `{}` is not a model", h.kind)));
        }
        let mut model = Model::new(&h.arch, 0)?;
        let mut store = ParamStore::new();
        for (n, t) in &c.records {
            store.add(n.clone(), t.clone());
        }
        model.params_mut().assign(&store)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl Predictor for Model {
    fn predict(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.predict_proba(image)
    }
}
