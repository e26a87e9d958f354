//! Dense layers, the feature adapter and discriminator, BCE-with-logits and
//! AdamW.
//!
//! All layers act independently on each spatial position: inputs are
//! position-major row batches (`n x in_dim`, row-major), weights are
//! `out_dim x in_dim`, row-major.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, CrasError, Result};
use crate::tensor::Real;
use crate::tensor_store::{decode_tensor_prefix, encode_tensor, write_atomic, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CRMD";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    in_dim: usize,
    out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> DenseGrads<T> {
    pub fn zeros(layer: &DenseLayer<T>) -> Self {
        DenseGrads {
            weight: vec![T::zero(); layer.weight.len()],
            bias: vec![T::zero(); layer.bias.len()],
        }
    }

    fn add_assign(&mut self, other: &Self) {
        add_into(&mut self.weight, &other.weight);
        add_into(&mut self.bias, &other.bias);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl<T: Real> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(shape_err("dense layer dims must be nonzero"));
        }
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(shape_err(format!(
                "dense {in_dim}->{out_dim}: weight {} / bias {}",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(CrasError::Config("non-finite layer parameter".into()));
        }
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    /// Glorot-normal weights, zero bias.
    pub fn xavier_normal<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        DenseLayer {
            in_dim,
            out_dim,
            weight,
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn rows(&self, input: &[T]) -> Result<usize> {
        if input.len() % self.in_dim != 0 {
            return Err(shape_err(format!(
                "input of {} values is not a batch of {}-vectors",
                input.len(),
                self.in_dim
            )));
        }
        Ok(input.len() / self.in_dim)
    }

    /// `weight . x + bias` for every row `x` of the batch.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let n = self.rows(input)?;
        let mut out = Vec::with_capacity(n * self.out_dim);
        for x in input.chunks_exact(self.in_dim) {
            for (row, &b) in self.weight.chunks_exact(self.in_dim).zip(&self.bias) {
                let mut acc = b;
                for (&w, &xi) in row.iter().zip(x) {
                    acc += w * xi;
                }
                out.push(acc);
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to `input`.
    pub fn backward(&self, input: &[T], upstream: &[T], grads: &mut DenseGrads<T>) -> Result<Vec<T>> {
        let n = self.rows(input)?;
        if upstream.len() != n * self.out_dim {
            return Err(shape_err(format!(
                "upstream gradient has {} values, expected {}",
                upstream.len(),
                n * self.out_dim
            )));
        }
        if grads.weight.len() != self.weight.len() || grads.bias.len() != self.bias.len() {
            return Err(shape_err("gradient buffer does not match layer"));
        }
        let mut input_grad = vec![T::zero(); input.len()];
        for ((x, dy), dx) in input
            .chunks_exact(self.in_dim)
            .zip(upstream.chunks_exact(self.out_dim))
            .zip(input_grad.chunks_exact_mut(self.in_dim))
        {
            for (o, &g) in dy.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                grads.bias[o] += g;
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for i in 0..self.in_dim {
                    grow[i] += g * x[i];
                    dx[i] += g * row[i];
                }
            }
        }
        Ok(input_grad)
    }
}

#[inline]
pub fn leaky_relu<T: Real>(x: T) -> T {
    leaky_relu_with(x, T::of(LEAKY_SLOPE))
}

#[inline]
pub fn leaky_relu_with<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, evaluated in
/// log space.
#[inline]
pub fn bce_with_logits<T: Real>(logit: T, target: bool) -> T {
    if target {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

/// Derivative of [`bce_with_logits`] with respect to the logit.
#[inline]
pub fn bce_grad<T: Real>(logit: T, target: bool) -> T {
    let t = if target { T::one() } else { T::zero() };
    sigmoid(logit) - t
}

/// Feature adapter: a single square dense layer applied per position.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterNet<T> {
    pub layer: DenseLayer<T>,
}

#[derive(Clone, Debug)]
pub struct AdapterTrace<T> {
    input: Vec<T>,
}

impl<T: Real> AdapterNet<T> {
    /// Identity weights plus a zero-mean normal perturbation, zero bias. The
    /// perturbation std is `1e-4 / sqrt(C)` so that the per-output deviation
    /// stays near `1e-4` of the input scale for any width.
    pub fn near_identity<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut layer = DenseLayer::zeros(channels, channels);
        let scale = 1e-4 / (channels as f64).sqrt();
        for (i, w) in layer.weight.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            let id = if i / channels == i % channels { 1.0 } else { 0.0 };
            *w = T::of(id + scale * z);
        }
        AdapterNet { layer }
    }

    pub fn identity(channels: usize) -> Self {
        let mut layer = DenseLayer::zeros(channels, channels);
        for c in 0..channels {
            layer.weight[c * channels + c] = T::one();
        }
        AdapterNet { layer }
    }

    pub fn from_layer(layer: DenseLayer<T>) -> Result<Self> {
        if layer.in_dim != layer.out_dim {
            return Err(shape_err("adapter layer must be square"));
        }
        Ok(AdapterNet { layer })
    }

    pub fn channels(&self) -> usize {
        self.layer.in_dim
    }

    pub fn forward(&self, rows: &[T]) -> Result<Vec<T>> {
        self.layer.forward(rows)
    }

    pub fn forward_traced(&self, rows: &[T]) -> Result<(Vec<T>, AdapterTrace<T>)> {
        let out = self.layer.forward(rows)?;
        Ok((out, AdapterTrace { input: rows.to_vec() }))
    }

    pub fn backward(&self, trace: &AdapterTrace<T>, upstream: &[T]) -> Result<(DenseGrads<T>, Vec<T>)> {
        let mut grads = DenseGrads::zeros(&self.layer);
        let dx = self.layer.backward(&trace.input, upstream, &mut grads)?;
        Ok((grads, dx))
    }
}

/// `dense(in -> hidden) -> leaky_relu(0.2) -> dense(hidden -> 1)`, emitting
/// one logit per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet<T> {
    pub hidden: DenseLayer<T>,
    pub output: DenseLayer<T>,
}

#[derive(Clone, Debug)]
pub struct DiscTrace<T> {
    input: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

impl<T: Real> DiscTrace<T> {
    /// Pre-activation values of the hidden layer (used to detect kinks).
    pub fn pre_activations(&self) -> &[T] {
        &self.pre
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscGrads<T> {
    pub hidden: DenseGrads<T>,
    pub output: DenseGrads<T>,
}

impl<T: Real> DiscriminatorNet<T> {
    /// Xavier-normal hidden layer and a zero output layer, so every position
    /// starts at logit 0 and the early gradient is not dominated by a random
    /// readout.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        DiscriminatorNet {
            hidden: DenseLayer::xavier_normal(in_dim, hidden, rng),
            output: DenseLayer::zeros(hidden, 1),
        }
    }

    pub fn from_layers(hidden: DenseLayer<T>, output: DenseLayer<T>) -> Result<Self> {
        if output.in_dim != hidden.out_dim || output.out_dim != 1 {
            return Err(shape_err(format!(
                "discriminator layers {}->{} and {}->{} do not compose to a logit",
                hidden.in_dim, hidden.out_dim, output.in_dim, output.out_dim
            )));
        }
        Ok(DiscriminatorNet { hidden, output })
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn forward(&self, rows: &[T]) -> Result<Vec<T>> {
        let mut act = self.hidden.forward(rows)?;
        act.iter_mut().for_each(|v| *v = leaky_relu(*v));
        self.output.forward(&act)
    }

    pub fn forward_traced(&self, rows: &[T]) -> Result<(Vec<T>, DiscTrace<T>)> {
        let pre = self.hidden.forward(rows)?;
        let act: Vec<T> = pre.iter().map(|&v| leaky_relu(v)).collect();
        let logits = self.output.forward(&act)?;
        Ok((
            logits,
            DiscTrace {
                input: rows.to_vec(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, trace: &DiscTrace<T>, upstream: &[T]) -> Result<(DiscGrads<T>, Vec<T>)> {
        if trace.pre.len() != upstream.len() * self.hidden.out_dim {
            return Err(shape_err("trace does not belong to this discriminator"));
        }
        let mut out_grads = DenseGrads::zeros(&self.output);
        let mut d_act = self.output.backward(&trace.act, upstream, &mut out_grads)?;
        let slope = T::of(LEAKY_SLOPE);
        for (d, &z) in d_act.iter_mut().zip(&trace.pre) {
            if z < T::zero() {
                *d *= slope;
            }
        }
        let mut hidden_grads = DenseGrads::zeros(&self.hidden);
        let dx = self.hidden.backward(&trace.input, &d_act, &mut hidden_grads)?;
        Ok((
            DiscGrads {
                hidden: hidden_grads,
                output: out_grads,
            },
            dx,
        ))
    }
}

/// Adapter and discriminator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub adapter: AdapterNet<T>,
    pub disc: DiscriminatorNet<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T> {
    pub adapter: DenseGrads<T>,
    pub disc: DiscGrads<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros(model: &ModelParams<T>) -> Self {
        ModelGrads {
            adapter: DenseGrads::zeros(&model.adapter.layer),
            disc: DiscGrads {
                hidden: DenseGrads::zeros(&model.disc.hidden),
                output: DenseGrads::zeros(&model.disc.output),
            },
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.adapter.add_assign(&other.adapter);
        self.disc.hidden.add_assign(&other.disc.hidden);
        self.disc.output.add_assign(&other.disc.output);
    }

    /// Gradient tensors in checkpoint order.
    pub fn slices(&self) -> [&[T]; 6] {
        [
            &self.adapter.weight,
            &self.adapter.bias,
            &self.disc.hidden.weight,
            &self.disc.hidden.bias,
            &self.disc.output.weight,
            &self.disc.output.bias,
        ]
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl<T: Real> ModelParams<T> {
    /// Near-identity adapter over `channels` and a discriminator reading
    /// `disc_in` features with `channels` hidden units.
    pub fn init<R: Rng + ?Sized>(channels: usize, disc_in: usize, rng: &mut R) -> Self {
        let adapter = AdapterNet::near_identity(channels, rng);
        let disc = DiscriminatorNet::new(disc_in, channels, rng);
        ModelParams { adapter, disc }
    }

    pub fn channels(&self) -> usize {
        self.adapter.channels()
    }

    /// Parameter tensors in checkpoint order.
    pub fn slices(&self) -> [&[T]; 6] {
        [
            &self.adapter.layer.weight,
            &self.adapter.layer.bias,
            &self.disc.hidden.weight,
            &self.disc.hidden.bias,
            &self.disc.output.weight,
            &self.disc.output.bias,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [T]; 6] {
        [
            &mut self.adapter.layer.weight,
            &mut self.adapter.layer.bias,
            &mut self.disc.hidden.weight,
            &mut self.disc.hidden.bias,
            &mut self.disc.output.weight,
            &mut self.disc.output.bias,
        ]
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |l: &DenseLayer<T>| DenseLayer {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            weight: l.weight.iter().map(|&v| U::of(v.f64())).collect(),
            bias: l.bias.iter().map(|&v| U::of(v.f64())).collect(),
        };
        ModelParams {
            adapter: AdapterNet {
                layer: conv(&self.adapter.layer),
            },
            disc: DiscriminatorNet {
                hidden: conv(&self.disc.hidden),
                output: conv(&self.disc.output),
            },
        }
    }
}

impl ModelParams<f32> {
    fn layer_tensors(layer: &DenseLayer<f32>) -> [Tensor; 2] {
        [
            Tensor::F32 {
                dims: vec![layer.out_dim, layer.in_dim],
                data: layer.weight.clone(),
            },
            Tensor::F32 {
                dims: vec![1, layer.out_dim],
                data: layer.bias.clone(),
            },
        ]
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for layer in [&self.adapter.layer, &self.disc.hidden, &self.disc.output] {
            for t in Self::layer_tensors(layer) {
                out.write_all(&encode_tensor(&t)?).expect("vec write");
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(CrasError::Length {
                expected: 6,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(CrasError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(CrasError::UnsupportedVersion(version));
        }
        let mut offset = 6;
        let mut layers = Vec::with_capacity(3);
        for _ in 0..3 {
            let (w, used) = decode_tensor_prefix(&bytes[offset..])?;
            offset += used;
            let (b, used) = decode_tensor_prefix(&bytes[offset..])?;
            offset += used;
            let (Tensor::F32 { dims: wd, data: wv }, Tensor::F32 { dims: bd, data: bv }) = (w, b) else {
                return Err(CrasError::BadHeader("checkpoint tensors must be f32".into()));
            };
            if wd.len() != 2 || bd.len() != 2 || bd[0] != 1 || bd[1] != wd[0] {
                return Err(CrasError::BadHeader(format!(
                    "inconsistent layer tensors {wd:?} / {bd:?}"
                )));
            }
            layers.push(DenseLayer::from_parts(wd[1], wd[0], wv, bv)?);
        }
        if offset != bytes.len() {
            return Err(CrasError::Length {
                expected: offset,
                found: bytes.len(),
            });
        }
        let output = layers.pop().expect("three layers");
        let hidden = layers.pop().expect("three layers");
        let adapter = AdapterNet::from_layer(layers.pop().expect("three layers"))?;
        let disc = DiscriminatorNet::from_layers(hidden, output)?;
        if disc.hidden.out_dim != adapter.channels() {
            return Err(CrasError::BadHeader(
                "discriminator hidden width differs from adapter channels".into(),
            ));
        }
        Ok(ModelParams { adapter, disc })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_checkpoint_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CrasError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// AdamW with decoupled weight decay over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(shapes: &[usize], lr: f64, weight_decay: f64) -> Self {
        OptimState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn adamw_step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(shape_err(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(shape_err("parameter / gradient / moment lengths differ"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let lr = T::of(self.lr);
        let decay = one - lr * T::of(self.weight_decay);
        let bc1 = one - b1.powi(t);
        let bc2_sqrt = (one - b2.powi(t)).sqrt();
        let step_size = lr / bc1;
        let eps = T::of(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                p[j] *= decay;
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                p[j] -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
