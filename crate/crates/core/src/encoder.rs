//! Small ReLU perceptron whose output is projected onto the unit sphere,
//! with hand-written backpropagation and momentum SGD.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Real;
use crate::error::{PcpError, Result};

const PCPW_MAGIC: &[u8; 4] = b"PCPW";
const PCPW_VERSION: u32 = 1;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
        }
    }

    /// `(fan_out, fan_in)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(PcpError::ConfigError(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Affine map `y = W x + b`, `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn uniform_fan_in<R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut layer = Self::zeros(fan_out, fan_in);
        for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn identity(n: usize) -> Self {
        let mut layer = Self::zeros(n, n);
        for i in 0..n {
            layer.weight[i * n + i] = 1.0;
        }
        layer
    }

    fn apply(&self, x: &[f32]) -> Vec<f32> {
        self.weight
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + b)
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Parameter-shaped buffer: gradients or optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Linear>,
}

impl Grads {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Linear::zeros(l.fan_out, l.fan_in))
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grads, scale: f32) -> Result<()> {
        check_shapes(&self.layers, &other.layers)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for l in &mut self.layers {
            for x in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }
}

fn check_shapes(a: &[Linear], b: &[Linear]) -> Result<()> {
    if a.len() != b.len() {
        return Err(PcpError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    for (x, y) in a.iter().zip(b) {
        if (x.fan_out, x.fan_in) != (y.fan_out, y.fan_in) {
            return Err(PcpError::DimensionMismatch {
                expected: x.param_count(),
                got: y.param_count(),
            });
        }
    }
    Ok(())
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    model_id: u64,
    revision: u64,
    /// Input to each layer; `inputs[0]` is the sample itself.
    inputs: Vec<Vec<f32>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f32>>,
    /// Output before normalization.
    z: Vec<f32>,
    z_norm: f64,
    /// Unit output.
    pub output: Vec<f32>,
}

/// Encoder network: ReLU hidden layers, a linear head, then L2 normalization.
#[derive(Debug)]
pub struct Mlp {
    spec: EncoderSpec,
    layers: Vec<Linear>,
    id: u64,
    revision: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            revision: 0,
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Linear::uniform_fan_in(o, i, rng))
            .collect();
        Ok(Self::assemble(spec, layers))
    }

    pub fn from_layers(spec: EncoderSpec, layers: Vec<Linear>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(PcpError::DimensionMismatch {
                expected: shapes.len(),
                got: layers.len(),
            });
        }
        for (&(o, i), l) in shapes.iter().zip(&layers) {
            let ok = l.fan_out == o
                && l.fan_in == i
                && l.weight.len() == o * i
                && l.bias.len() == o;
            if !ok {
                return Err(PcpError::DimensionMismatch {
                    expected: o * i + o,
                    got: l.weight.len() + l.bias.len(),
                });
            }
        }
        Ok(Self::assemble(spec, layers))
    }

    fn assemble(spec: EncoderSpec, layers: Vec<Linear>) -> Self {
        Self {
            spec,
            layers,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            revision: 0,
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Linear] {
        self.revision += 1;
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    /// Unit-norm embedding of `x` plus the activations needed for backward.
    pub fn forward<T: Real>(&self, x: &[T]) -> Result<ForwardCache> {
        if x.len() != self.spec.input_dim {
            return Err(PcpError::DimensionMismatch {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h: Vec<f32> = x.iter().map(|&v| v.to_f64() as f32).collect();
        for layer in &self.layers[..last] {
            let a = layer.apply(&h);
            inputs.push(h);
            h = a.iter().map(|&v| v.max(0.0)).collect();
            pre.push(a);
        }
        let z = self.layers[last].apply(&h);
        inputs.push(h);
        let z_norm = z.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !z_norm.is_finite() {
            return Err(PcpError::NumericError("non-finite encoder output".into()));
        }
        if z_norm == 0.0 {
            return Err(PcpError::DegenerateVector);
        }
        let output = z.iter().map(|&v| (v as f64 / z_norm) as f32).collect();
        Ok(ForwardCache {
            model_id: self.id,
            revision: self.revision,
            inputs,
            pre,
            z,
            z_norm,
            output,
        })
    }

    /// Embed `x`, discarding the cache.
    pub fn embed<T: Real>(&self, x: &[T]) -> Result<Vec<f32>> {
        Ok(self.forward(x)?.output)
    }

    /// Backpropagate `grad_out` (gradient of a scalar loss in the unit
    /// output) to parameter gradients and the input gradient.
    pub fn backward<T: Real>(&self, cache: &ForwardCache, grad_out: &[T]) -> Result<(Grads, Vec<f32>)> {
        if cache.model_id != self.id || cache.revision != self.revision {
            return Err(PcpError::CacheInvalid);
        }
        if grad_out.len() != self.spec.output_dim {
            return Err(PcpError::DimensionMismatch {
                expected: self.spec.output_dim,
                got: grad_out.len(),
            });
        }
        // Through the normalization: project onto the tangent space at y.
        let radial: f64 = grad_out
            .iter()
            .zip(&cache.output)
            .map(|(&g, &y)| g.to_f64() * y as f64)
            .sum();
        let mut delta: Vec<f32> = grad_out
            .iter()
            .zip(&cache.output)
            .map(|(&g, &y)| ((g.to_f64() - radial * y as f64) / cache.z_norm) as f32)
            .collect();
        debug_assert_eq!(delta.len(), cache.z.len());

        let mut grads = Grads::zeros_like(self);
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.inputs[li];
            let g = &mut grads.layers[li];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] = d;
                let row = &mut g.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (w, &x) in row.iter_mut().zip(input) {
                    *w = d * x;
                }
            }
            let mut back = vec![0.0f32; layer.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (b, &w) in back.iter_mut().zip(row) {
                    *b += w * d;
                }
            }
            if li > 0 {
                for (b, &p) in back.iter_mut().zip(&cache.pre[li - 1]) {
                    if p <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            delta = back;
        }
        Ok((grads, delta))
    }

    /// Serialize as `PCPW`: magic, u32 version, u32 layer count, then per
    /// layer u32 fan_out, u32 fan_in, weights and biases as little-endian f32.
    pub fn to_pcpw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.param_count() * 4 + self.layers.len() * 8);
        out.extend_from_slice(PCPW_MAGIC);
        out.extend_from_slice(&PCPW_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.fan_out as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_in as u32).to_le_bytes());
            for x in l.weight.iter().chain(&l.bias) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_pcpw_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != PCPW_MAGIC {
            return Err(PcpError::ingest("offset 0", "missing PCPW magic"));
        }
        let version = cur.u32()?;
        if version != PCPW_VERSION {
            return Err(PcpError::ingest("offset 4", format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        if count == 0 {
            return Err(PcpError::ingest("offset 8", "checkpoint has no layers"));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let fan_out = cur.u32()? as usize;
            let fan_in = cur.u32()? as usize;
            let mut layer = Linear::zeros(fan_out, fan_in);
            for x in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *x = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            }
            layers.push(layer);
        }
        if cur.pos != bytes.len() {
            return Err(PcpError::ingest(format!("offset {}", cur.pos), "trailing bytes"));
        }
        let chained = layers.windows(2).all(|w| w[0].fan_out == w[1].fan_in);
        if !chained {
            return Err(PcpError::ingest("layers", "layer dimensions do not chain"));
        }
        let spec = EncoderSpec {
            input_dim: layers[0].fan_in,
            hidden_dims: layers[..count - 1].iter().map(|l| l.fan_out).collect(),
            output_dim: layers[count - 1].fan_out,
        };
        Self::from_layers(spec, layers)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(PcpError::ingest(format!("offset {}", self.pos), "unexpected end of file"));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Momentum SGD state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Grads,
}

impl OptimState {
    pub fn new(model: &Mlp, lr0: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr0,
            momentum,
            weight_decay,
            velocity: Grads::zeros_like(model),
        }
    }

    pub fn with_defaults(model: &Mlp) -> Self {
        Self::new(model, 0.03, 0.9, 0.0005)
    }
}

/// `v := momentum * v + grad + weight_decay * param; param := param - lr * v`.
pub fn sgd_step(model: &mut Mlp, grads: &Grads, opt: &mut OptimState, lr: f64) -> Result<()> {
    check_shapes(&model.layers, &grads.layers)?;
    check_shapes(&model.layers, &opt.velocity.layers)?;
    let (mu, wd, lr) = (opt.momentum as f32, opt.weight_decay as f32, lr as f32);
    for ((p, g), v) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(opt.velocity.layers.iter_mut())
    {
        let params = p.weight.iter_mut().chain(p.bias.iter_mut());
        let gs = g.weight.iter().chain(&g.bias);
        let vs = v.weight.iter_mut().chain(v.bias.iter_mut());
        for ((p, &g), v) in params.zip(gs).zip(vs) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Step-decayed learning rate: `lr0` scaled by the factor of the last
/// milestone reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    /// `(epoch, factor)` pairs in increasing epoch order.
    pub milestones: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr0: 0.03,
            milestones: vec![(120, 0.1), (160, 0.01)],
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let factor = self
            .milestones
            .iter()
            .take_while(|(e, _)| epoch >= *e)
            .last()
            .map_or(1.0, |&(_, f)| f);
        self.lr0 * factor
    }
}

/// Learning rate at `epoch` under the default schedule.
pub fn lr_at_epoch(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(n: usize) -> Mlp {
        Mlp::from_layers(EncoderSpec::new(n, vec![], n), vec![Linear::identity(n)]).unwrap()
    }

    #[test]
    fn identity_forward() {
        let net = identity_net(3);
        let x = [0.6f32, 0.0, 0.8];
        assert_eq!(net.embed(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_is_unit_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(EncoderSpec::new(5, vec![7, 6], 4), &mut rng).unwrap();
        let x = [0.3f32, -1.0, 2.0, 0.1, 0.5];
        let a = net.embed(&x).unwrap();
        let b = net.embed(&x).unwrap();
        assert_eq!(a, b);
        let n: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        assert!(matches!(net.forward(&[1.0f32]), Err(PcpError::DimensionMismatch { .. })));
    }

    #[test]
    fn radial_gradient_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(EncoderSpec::new(4, vec![5], 3), &mut rng).unwrap();
        let cache = net.forward(&[0.2f32, 0.4, -0.1, 0.9]).unwrap();
        let g: Vec<f32> = cache.output.iter().map(|y| 2.5 * y).collect();
        let (grads, dx) = net.backward(&cache, &g).unwrap();
        assert!(dx.iter().all(|v| v.abs() < 1e-5));
        assert!(grads.layers.iter().all(|l| l.weight.iter().all(|v| v.abs() < 1e-5)));
    }

    #[test]
    fn single_layer_closed_form() {
        // z = W x + b, y = z/|z|; dL/dW = P g x^T / |z| with P = I - y y^T.
        let mut layer = Linear::zeros(2, 2);
        layer.weight = vec![2.0, 0.0, 0.0, 1.0];
        layer.bias = vec![0.0, 1.0];
        let net = Mlp::from_layers(EncoderSpec::new(2, vec![], 2), vec![layer]).unwrap();
        let x = [1.0f32, 1.0];
        let cache = net.forward(&x).unwrap();
        // z = (2, 2), |z| = 2 sqrt 2, y = (1, 1)/sqrt 2.
        let g = [1.0f64, 0.0];
        let (grads, _) = net.backward(&cache, &g).unwrap();
        let zn = 8f64.sqrt();
        let proj = [0.5 / zn, -0.5 / zn];
        let gl = &grads.layers[0];
        assert_abs_diff_eq!(gl.weight[0] as f64, proj[0], epsilon = 1e-6);
        assert_abs_diff_eq!(gl.weight[1] as f64, proj[0], epsilon = 1e-6);
        assert_abs_diff_eq!(gl.weight[2] as f64, proj[1], epsilon = 1e-6);
        assert_abs_diff_eq!(gl.bias[1] as f64, proj[1], epsilon = 1e-6);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = identity_net(2);
        let cache = net.forward(&[1.0f32, 0.0]).unwrap();
        net.layers_mut()[0].bias[0] = 0.1;
        assert!(matches!(net.backward(&cache, &[1.0f32, 0.0]), Err(PcpError::CacheInvalid)));
        let other = identity_net(2);
        let cache = other.forward(&[1.0f32, 0.0]).unwrap();
        assert!(matches!(net.backward(&cache, &[1.0f32, 0.0]), Err(PcpError::CacheInvalid)));
    }

    #[test]
    fn sgd_fixed_point_and_single_step() {
        let mut net = identity_net(2);
        let before = net.layers()[0].clone();
        let zero = Grads::zeros_like(&net);
        let mut opt = OptimState::new(&net, 0.03, 0.9, 0.0);
        sgd_step(&mut net, &zero, &mut opt, 0.03).unwrap();
        assert_eq!(net.layers()[0], before);

        let mut g = Grads::zeros_like(&net);
        g.layers[0].weight[0] = 0.5;
        let mut opt = OptimState::new(&net, 0.1, 0.9, 0.01);
        sgd_step(&mut net, &g, &mut opt, 0.1).unwrap();
        // 1 - 0.1 * (0.5 + 0.01 * 1)
        assert_abs_diff_eq!(net.layers()[0].weight[0], 0.949, epsilon = 1e-6);
        assert_abs_diff_eq!(net.layers()[0].weight[3], 0.999, epsilon = 1e-6);
    }

    #[test]
    fn sgd_two_steps_constant_gradient() {
        let mut net = identity_net(1);
        let mut g = Grads::zeros_like(&net);
        g.layers[0].weight[0] = 1.0;
        let mut opt = OptimState::new(&net, 0.1, 0.9, 0.0);
        sgd_step(&mut net, &g, &mut opt, 0.1).unwrap();
        sgd_step(&mut net, &g, &mut opt, 0.1).unwrap();
        assert_abs_diff_eq!(1.0 - net.layers()[0].weight[0], 0.29, epsilon = 1e-6);
    }

    #[test]
    fn lr_schedule() {
        assert_abs_diff_eq!(lr_at_epoch(0), 0.03);
        assert_abs_diff_eq!(lr_at_epoch(119), 0.03);
        assert_abs_diff_eq!(lr_at_epoch(120), 0.003, epsilon = 1e-12);
        assert_abs_diff_eq!(lr_at_epoch(160), 0.0003, epsilon = 1e-12);
        assert_abs_diff_eq!(lr_at_epoch(199), 0.0003, epsilon = 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(EncoderSpec::new(6, vec![5, 4], 3), &mut rng).unwrap();
        let bytes = net.to_pcpw_bytes();
        let back = Mlp::from_pcpw_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_pcpw_bytes(), bytes);
        assert!(Mlp::from_pcpw_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(Mlp::from_pcpw_bytes(&bad), Err(PcpError::IngestError { .. })));
    }
}
