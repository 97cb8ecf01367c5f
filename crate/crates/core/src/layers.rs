//! Network blocks: per-frame encoder, feature fusion, the two-layer recurrent
//! temporal module and the AU / EXPR / VA heads.
//!
//! Parameters live in a flat, named [`ParamStore`]; layers hold indices into
//! it. A [`Session`] binds the store onto a fresh [`Tape`] for one forward
//! pass, registering trainable parameters as leaves and everything else as
//! constants.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::task::{HeadKind, NUM_AUS, NUM_EXPR};
use crate::tensor::{central_difference_error, Tape, Tensor, Var};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces values by name; every name must exist with the same shape.
    pub fn load_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
            if self.values[id].shape() != value.shape() {
                return Err(Error::Dimension {
                    op: "load_from",
                    left: self.values[id].shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            self.values[id] = value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// One forward pass over a parameter store.
pub struct Session<'r> {
    pub tape: Tape,
    params: Vec<Var>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Session<'r> {
    /// Training mode: parameters flagged in `trainable` become leaves and
    /// dropout draws from `rng`.
    pub fn train(store: &ParamStore, trainable: &[bool], rng: &'r mut ChaCha8Rng) -> Self {
        let mut tape = Tape::new();
        let params = store
            .values
            .iter()
            .zip(trainable)
            .map(|(v, &t)| {
                if t {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Session {
            tape,
            params,
            rng: Some(rng),
        }
    }

    /// Gradients for `trainable` parameters with dropout off.
    pub fn traced(store: &ParamStore, trainable: &[bool]) -> Session<'static> {
        let mut tape = Tape::new();
        let params = store
            .values
            .iter()
            .zip(trainable)
            .map(|(v, &t)| if t { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Session {
            tape,
            params,
            rng: None,
        }
    }

    /// Evaluation mode: no gradients, dropout off.
    pub fn eval(store: &ParamStore) -> Session<'static> {
        let mut tape = Tape::new();
        let params = store.values.iter().map(|v| tape.constant(v.clone())).collect();
        Session {
            tape,
            params,
            rng: None,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn dropout_active(&self) -> bool {
        self.rng.is_some()
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => self.tape.dropout(x, p, Some(rng)),
            None => Ok(x),
        }
    }
}

/// Finite-difference check of `f` with respect to the parameters in `ids`,
/// perturbing the store directly. Dropout is off on both routes.
pub fn param_grad_check<F>(store: &ParamStore, ids: &[ParamId], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut trainable = vec![false; store.len()];
    ids.iter().for_each(|&i| trainable[i] = true);
    let mut s = Session::traced(store, &trainable);
    let out = f(&mut s)?;
    let grads = s.tape.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&i| {
            grads
                .get(s.param(i))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(i).shape()))
        })
        .collect();
    let inputs: Vec<Tensor> = ids.iter().map(|&i| store.get(i).clone()).collect();
    central_difference_error(&inputs, &analytic, eps, |xs| {
        let mut probe = store.clone();
        for (&i, x) in ids.iter().zip(xs) {
            *probe.get_mut(i) = x.clone();
        }
        let mut s = Session::eval(&probe);
        let out = f(&mut s)?;
        Ok(s.tape.value(out).item())
    })
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInit {
    Random,
    /// Both linear layers start as identity with zero bias.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    fn new(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_out: usize) -> Self {
        let wname = format!("{name}.weight");
        let mut rng = seed::stream(seed, &wname);
        let weight = store.push(wname, glorot(&mut rng, &[d_in, d_out], d_in, d_out));
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = s.tape.matmul(x, s.param(self.weight))?;
        s.tape.add_row(y, s.param(self.bias))
    }
}

/// Per-frame MLP standing in for the pretrained image extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty").d_out
    }

    /// `[n, input_dim] -> [n, d]`, leaky ReLU after every layer.
    pub fn encode(&self, s: &mut Session, frames: Var) -> Result<Var> {
        let sh = s.tape.shape(frames);
        if sh.len() != 2 || sh[1] != self.input_dim() {
            return Err(Error::Dimension {
                op: "encode",
                left: sh.to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let mut h = frames;
        for layer in &self.layers {
            let z = layer.forward(s, h)?;
            h = s.tape.leaky_relu(z, self.slope);
        }
        Ok(h)
    }
}

/// `F_f(F_other + F_current)`: linear, activation, dropout, linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModule {
    pub linear1: Linear,
    pub linear2: Linear,
    pub activation: Activation,
    pub dropout: f64,
    pub slope: f64,
}

impl FusionModule {
    /// `f_other` is a frozen constant (the sum of every selected bank), or
    /// `None` when no bank is fused.
    pub fn fuse(&self, s: &mut Session, f_other: Option<Var>, f_current: Var) -> Result<Var> {
        let x = match f_other {
            Some(o) => s.tape.add(o, f_current)?,
            None => f_current,
        };
        let h = self.linear1.forward(s, x)?;
        let h = match self.activation {
            Activation::LeakyRelu => s.tape.leaky_relu(h, self.slope),
            Activation::Identity => h,
        };
        let h = s.dropout(h, self.dropout)?;
        self.linear2.forward(s, h)
    }
}

/// Gated recurrent cell with input, forget and output gates.
///
/// ```text
/// [i f g o] = x W_ih + h W_hh + b
/// c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
/// h' = sigmoid(o) * tanh(c')
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Lstm {
    fn new(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, hidden: usize) -> Self {
        let g = 4 * hidden;
        let n_ih = format!("{name}.w_ih");
        let n_hh = format!("{name}.w_hh");
        let w_ih = store.push(
            n_ih.clone(),
            glorot(&mut seed::stream(seed, &n_ih), &[d_in, g], d_in, g),
        );
        let w_hh = store.push(
            n_hh.clone(),
            glorot(&mut seed::stream(seed, &n_hh), &[hidden, g], hidden, g),
        );
        let mut b = Tensor::zeros(&[g]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.push(format!("{name}.bias"), b);
        Lstm {
            w_ih,
            w_hh,
            bias,
            d_in,
            hidden,
        }
    }

    pub fn step(&self, s: &mut Session, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hs = self.hidden;
        let xi = s.tape.matmul(x, s.param(self.w_ih))?;
        let hh = s.tape.matmul(h, s.param(self.w_hh))?;
        let z = s.tape.add(xi, hh)?;
        let z = s.tape.add_row(z, s.param(self.bias))?;
        let zi = s.tape.slice_last(z, 0, hs)?;
        let zf = s.tape.slice_last(z, hs, hs)?;
        let zg = s.tape.slice_last(z, 2 * hs, hs)?;
        let zo = s.tape.slice_last(z, 3 * hs, hs)?;
        let i = s.tape.sigmoid(zi);
        let f = s.tape.sigmoid(zf);
        let g = s.tape.tanh(zg);
        let o = s.tape.sigmoid(zo);
        let fc = s.tape.mul(f, c)?;
        let ig = s.tape.mul(i, g)?;
        let c_next = s.tape.add(fc, ig)?;
        let tc = s.tape.tanh(c_next);
        let h_next = s.tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Runs over `steps` (each `[b, d_in]`) from zero state.
    pub fn run(&self, s: &mut Session, steps: &[Var]) -> Result<Vec<Var>> {
        let b = s.tape.shape(steps[0])[0];
        let mut h = s.tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut c = s.tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut out = Vec::with_capacity(steps.len());
        for &x in steps {
            (h, c) = self.step(s, x, h, c)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Two stacked unidirectional recurrent layers followed by leaky ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalModule {
    pub lstm1: Lstm,
    pub lstm2: Lstm,
    pub slope: f64,
}

impl TemporalModule {
    /// `[b, s, d] -> [b, s, d]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        if sh.len() != 3 || sh[2] != self.lstm1.d_in {
            return Err(Error::Dimension {
                op: "temporal_forward",
                left: sh,
                right: vec![self.lstm1.d_in],
            });
        }
        if sh[1] == 0 {
            return Err(Error::Degenerate {
                op: "temporal_forward",
                msg: "sequence length is zero".into(),
            });
        }
        let steps = (0..sh[1])
            .map(|t| s.tape.select_step(x, t))
            .collect::<Result<Vec<_>>>()?;
        let h1 = self.lstm1.run(s, &steps)?;
        let h2 = self.lstm2.run(s, &h1)?;
        let y = s.tape.stack_steps(&h2)?;
        Ok(s.tape.leaky_relu(y, self.slope))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHeads {
    pub au: Linear,
    pub expr: Linear,
    pub va: Linear,
}

impl TaskHeads {
    /// AU: sigmoid probabilities `[n, 12]`. EXPR: softmax `[n, 8]`.
    /// VA: tanh-bounded `[n, 2]` (valence, arousal).
    pub fn forward(&self, s: &mut Session, x: Var, head: HeadKind) -> Result<Var> {
        match head {
            HeadKind::Au => {
                let z = self.au.forward(s, x)?;
                Ok(s.tape.sigmoid(z))
            }
            HeadKind::Expr => {
                let z = self.expr.forward(s, x)?;
                s.tape.softmax(z, 1)
            }
            HeadKind::Va => {
                let z = self.va.forward(s, x)?;
                Ok(s.tape.tanh(z))
            }
        }
    }

    pub fn linear(&self, head: HeadKind) -> &Linear {
        match head {
            HeadKind::Au => &self.au,
            HeadKind::Expr => &self.expr,
            HeadKind::Va => &self.va,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub encoder_hidden: usize,
    pub fusion: bool,
    pub temporal: bool,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub fusion_activation: Activation,
    pub fusion_init: FusionInit,
}

impl ArchSpec {
    pub fn new(input_dim: usize, feature_dim: usize) -> Self {
        ArchSpec {
            input_dim,
            feature_dim,
            encoder_hidden: 2 * feature_dim,
            fusion: false,
            temporal: false,
            dropout: 0.1,
            leaky_slope: 0.01,
            fusion_activation: Activation::LeakyRelu,
            fusion_init: FusionInit::Random,
        }
    }
}

/// Predictions from one forward pass; heads that were not requested are
/// `None`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Outputs {
    pub au: Option<Var>,
    pub expr: Option<Var>,
    pub va: Option<Var>,
}

impl Outputs {
    pub fn get(&self, head: HeadKind) -> Option<Var> {
        match head {
            HeadKind::Au => self.au,
            HeadKind::Expr => self.expr,
            HeadKind::Va => self.va,
        }
    }
}

/// Full model: encoder, optional fusion, optional temporal stack, heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub fusion: Option<FusionModule>,
    pub temporal: Option<TemporalModule>,
    pub heads: TaskHeads,
}

impl Model {
    /// Glorot-uniform weights, zero biases, forget-gate bias 1. Each parameter
    /// draws from its own stream keyed by name, so optional blocks never
    /// shift the initial values of the others.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.feature_dim == 0 || arch.encoder_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&arch.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                arch.dropout
            )));
        }
        let d = arch.feature_dim;
        let mut p = ParamStore::new();
        let encoder = Encoder {
            layers: vec![
                Linear::new(&mut p, seed, "encoder.0", arch.input_dim, arch.encoder_hidden),
                Linear::new(&mut p, seed, "encoder.1", arch.encoder_hidden, d),
            ],
            slope: arch.leaky_slope,
        };
        let fusion = arch.fusion.then(|| {
            let linear1 = Linear::new(&mut p, seed, "fusion.linear1", d, d);
            let linear2 = Linear::new(&mut p, seed, "fusion.linear2", d, d);
            if arch.fusion_init == FusionInit::Identity {
                *p.get_mut(linear1.weight) = Tensor::identity(d);
                *p.get_mut(linear2.weight) = Tensor::identity(d);
            }
            FusionModule {
                linear1,
                linear2,
                activation: arch.fusion_activation,
                dropout: arch.dropout,
                slope: arch.leaky_slope,
            }
        });
        let temporal = arch.temporal.then(|| TemporalModule {
            lstm1: Lstm::new(&mut p, seed, "temporal.lstm1", d, d),
            lstm2: Lstm::new(&mut p, seed, "temporal.lstm2", d, d),
            slope: arch.leaky_slope,
        });
        let heads = TaskHeads {
            au: Linear::new(&mut p, seed, "heads.au", d, NUM_AUS),
            expr: Linear::new(&mut p, seed, "heads.expr", d, NUM_EXPR),
            va: Linear::new(&mut p, seed, "heads.va", d, 2),
        };
        Ok(Model {
            arch,
            params: p,
            encoder,
            fusion,
            temporal,
            heads,
        })
    }

    /// Parameter ids belonging to one head.
    pub fn head_params(&self, head: HeadKind) -> [ParamId; 2] {
        let l = self.heads.linear(head);
        [l.weight, l.bias]
    }

    pub fn fusion_params(&self) -> Vec<ParamId> {
        self.fusion
            .iter()
            .flat_map(|f| [f.linear1.weight, f.linear1.bias, f.linear2.weight, f.linear2.bias])
            .collect()
    }

    /// Encoder features for `[n, input_dim]` frames.
    pub fn encode(&self, s: &mut Session, frames: Var) -> Result<Var> {
        self.encoder.encode(s, frames)
    }

    /// Runs the trunk and the requested heads.
    ///
    /// `frames` is `[b*s, input_dim]`, window-major. `other` is the summed
    /// frozen bank features `[b*s, d]`. Heads listed in `temporal_heads` read
    /// the temporal output; the rest read the fused per-frame features.
    pub fn forward(
        &self,
        s: &mut Session,
        frames: Var,
        other: Option<Var>,
        (batch, seq): (usize, usize),
        heads: &[HeadKind],
        temporal_heads: &[HeadKind],
    ) -> Result<Outputs> {
        let feats = self.encode(s, frames)?;
        let fused = match &self.fusion {
            Some(f) => f.fuse(s, other, feats)?,
            None if other.is_some() => {
                return Err(Error::Config(
                    "bank features supplied to a model without a fusion module".into(),
                ))
            }
            None => feats,
        };
        let d = self.arch.feature_dim;
        let temporal = match &self.temporal {
            Some(t) if heads.iter().any(|h| temporal_heads.contains(h)) => {
                let x = s.tape.reshape(fused, &[batch, seq, d])?;
                let y = t.forward(s, x)?;
                Some(s.tape.reshape(y, &[batch * seq, d])?)
            }
            _ => None,
        };
        let mut out = Outputs::default();
        for &h in heads {
            let input = match temporal {
                Some(t) if temporal_heads.contains(&h) => t,
                _ => fused,
            };
            let y = self.heads.forward(s, input, h)?;
            match h {
                HeadKind::Au => out.au = Some(y),
                HeadKind::Expr => out.expr = Some(y),
                HeadKind::Va => out.va = Some(y),
            }
        }
        Ok(out)
    }
}
