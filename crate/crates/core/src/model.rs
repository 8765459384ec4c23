//! Encoder, Gaussian sampling head and reparameterized sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Bound applied to the predicted log-variance.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Shape of the MLP backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Flattened input length (`C*H*W` for images).
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

/// Encoder plus head: everything needed to lay out parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub head_dim: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if e.hidden_dims.is_empty() {
            return Err(Error::config("model.hidden_dims", "must not be empty"));
        }
        if e.hidden_dims.contains(&0) {
            return Err(Error::config("model.hidden_dims", "every width must be positive"));
        }
        if e.embed_dim < 2 {
            return Err(Error::config("model.embed_dim", "must be at least 2"));
        }
        if self.head_dim == 0 {
            return Err(Error::config("model.head_dim", "must be positive"));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let e = &self.encoder;
        let mut out = Vec::new();
        let mut fan_in = e.input_dim;
        for (i, &h) in e.hidden_dims.iter().enumerate() {
            out.push((format!("encoder.layer{i}.weight"), vec![fan_in, h]));
            out.push((format!("encoder.layer{i}.bias"), vec![h]));
            fan_in = h;
        }
        let (d, dz) = (e.embed_dim, self.head_dim);
        out.push(("encoder.out.weight".into(), vec![fan_in, d]));
        out.push(("encoder.out.bias".into(), vec![d]));
        out.push(("head.hidden.weight".into(), vec![d, d]));
        out.push(("head.hidden.bias".into(), vec![d]));
        out.push(("head.mu.weight".into(), vec![d, dz]));
        out.push(("head.mu.bias".into(), vec![dz]));
        out.push(("head.logvar.weight".into(), vec![d, dz]));
        out.push(("head.logvar.bias".into(), vec![dz]));
        out
    }

    fn encoder_layers(&self) -> usize {
        self.encoder.hidden_dims.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// All weights and biases of encoder and head, in [`Architecture::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    tensors: Vec<NamedTensor>,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if shape.len() == 2 {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt() as f32;
                    let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-a..a)).collect();
                    Tensor::from_parts(shape, data)
                } else {
                    Tensor::zeros(shape)
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Ok(ModelParams { arch: arch.clone(), tensors })
    }

    /// Checks names and shapes against `arch`.
    pub fn from_named(arch: &Architecture, tensors: Vec<NamedTensor>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if *name != t.name || shape.as_slice() != t.tensor.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: if *name == t.name { t.tensor.shape().to_vec() } else { vec![] },
                });
            }
        }
        Ok(ModelParams { arch: arch.clone(), tensors })
    }

    /// Recovers the architecture from tensor names and shapes.
    pub fn infer_architecture(tensors: &[NamedTensor]) -> Result<Architecture> {
        let shape_of = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.tensor.shape().to_vec())
                .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
        };
        let mut hidden = Vec::new();
        let mut input_dim = None;
        while let Ok(s) = shape_of(&format!("encoder.layer{}.weight", hidden.len())) {
            if s.len() != 2 {
                return Err(Error::Invalid(format!("encoder weight has rank {}", s.len())));
            }
            input_dim.get_or_insert(s[0]);
            hidden.push(s[1]);
        }
        let out = shape_of("encoder.out.weight")?;
        let mu = shape_of("head.mu.weight")?;
        if out.len() != 2 || mu.len() != 2 {
            return Err(Error::Invalid("malformed output or head weights".into()));
        }
        let arch = Architecture {
            encoder: EncoderConfig { input_dim: input_dim.unwrap_or(out[0]), hidden_dims: hidden, embed_dim: out[1] },
            head_dim: mu[1],
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }
    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.tensors.iter_mut().map(|t| &mut t.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.tensor)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.numel()).sum()
    }

    /// Order-sensitive FNV-1a over names and raw bits; used to assert immutability.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for t in &self.tensors {
            t.name.bytes().for_each(&mut eat);
            for x in t.tensor.data() {
                x.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let v = t.tensor.cast::<S>();
                if trainable {
                    tape.leaf(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        BoundParams { arch: self.arch.clone(), vars }
    }
}

/// Tape handles for a [`ModelParams`], same order as its tensors.
#[derive(Debug, Clone)]
pub struct BoundParams {
    arch: Architecture,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Replaces the handle of parameter `index`, e.g. with a leaf under test.
    pub fn with_var(mut self, index: usize, var: Var) -> Self {
        self.vars[index] = var;
        self
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn encoder_layer(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn head(&self) -> [(Var, Var); 3] {
        let base = 2 * self.arch.encoder_layers();
        let v = &self.vars;
        [(v[base], v[base + 1]), (v[base + 2], v[base + 3]), (v[base + 4], v[base + 5])]
    }
}

fn affine<S: Scalar>(tape: &mut Tape<S>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `h = f(x)`: affine+relu per hidden layer, then an affine map to `embed_dim`.
///
/// `x` is `[B, input_dim]`; images are flattened row-major beforehand.
pub fn encode<S: Scalar>(tape: &mut Tape<S>, params: &BoundParams, x: Var) -> Result<Var> {
    let input_dim = params.arch.encoder.input_dim;
    match tape.shape(x)? {
        [_, d] if *d == input_dim => {}
        s => return Err(Error::ShapeMismatch { op: "encode", lhs: s.to_vec(), rhs: vec![input_dim] }),
    }
    let layers = params.arch.encoder_layers();
    let mut h = x;
    for i in 0..layers {
        h = affine(tape, h, params.encoder_layer(i))?;
        if i + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Per-view `(mu, logvar)` recorded on a tape, each `[B, D]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

/// Plain-valued Gaussian parameters of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::ShapeMismatch { op: "gaussian_params", lhs: vec![mu.len()], rhs: vec![logvar.len()] });
        }
        if !mu.iter().chain(&logvar).all(|x| x.is_finite()) {
            return Err(Error::Invalid("gaussian parameters must be finite".into()));
        }
        Ok(GaussianParams { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `(mu, logvar) = g(h)`: a shared relu layer of width `d` feeding two affine maps.
/// The log-variance is clamped to `[-10, 10]`.
pub fn gaussian_head<S: Scalar>(tape: &mut Tape<S>, params: &BoundParams, h: Var) -> Result<GaussianVars> {
    let [hidden, mu_layer, lv_layer] = params.head();
    let a = affine(tape, h, hidden)?;
    let a = tape.relu(a)?;
    let mu = affine(tape, a, mu_layer)?;
    let raw = affine(tape, a, lv_layer)?;
    let logvar = tape.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    Ok(GaussianVars { mu, logvar })
}

/// How the noise is scaled when sampling `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReparamMode {
    /// `z = mu + sigma * xi`
    #[default]
    Std,
    /// `z = mu + sigma^2 * xi`
    Literal,
}

/// Draws `z` from `N(mu, sigma^2)` given standard-normal noise `xi` (a constant).
pub fn reparameterize<S: Scalar>(tape: &mut Tape<S>, g: &GaussianVars, xi: Var, mode: ReparamMode) -> Result<Var> {
    let (sm, sx) = (tape.shape(g.mu)?.to_vec(), tape.shape(xi)?.to_vec());
    if sm != sx || tape.shape(g.logvar)? != sm.as_slice() {
        return Err(Error::ShapeMismatch { op: "reparameterize", lhs: sm, rhs: sx });
    }
    let factor = match mode {
        ReparamMode::Std => 0.5,
        ReparamMode::Literal => 1.0,
    };
    let half = tape.scale(g.logvar, factor)?;
    let scale = tape.exp(half)?;
    let noise = tape.mul(scale, xi)?;
    tape.add(g.mu, noise)
}

/// Fills `[rows, cols]` with standard-normal draws.
pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f32> {
    use rand_distr::StandardNormal;
    let data = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_fn;

    fn small_arch() -> Architecture {
        Architecture { encoder: EncoderConfig { input_dim: 5, hidden_dims: vec![4, 3], embed_dim: 3 }, head_dim: 2 }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        standard_normal(&mut rng, rows, cols)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = small_arch();
        let a = ModelParams::init(&arch, 0).unwrap();
        let b = ModelParams::init(&arch, 0).unwrap();
        assert_eq!(a, b);
        for t in a.tensors() {
            if t.name.ends_with("bias") {
                assert!(t.tensor.data().iter().all(|&x| x == 0.0), "{}", t.name);
            }
        }
        let c = ModelParams::init(&arch, 1).unwrap();
        assert_ne!(a.get("encoder.layer0.weight"), c.get("encoder.layer0.weight"));
    }

    #[test]
    fn init_respects_xavier_bound() {
        let arch = small_arch();
        let p = ModelParams::init(&arch, 3).unwrap();
        let w = p.get("encoder.layer0.weight").unwrap();
        let a = (6.0f32 / 9.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= a));
    }

    #[test]
    fn invalid_dims_rejected() {
        let mut arch = small_arch();
        arch.encoder.embed_dim = 1;
        assert!(ModelParams::init(&arch, 0).is_err());
        arch.encoder.embed_dim = 3;
        arch.encoder.hidden_dims.clear();
        assert!(ModelParams::init(&arch, 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features_and_unit_variance() {
        let arch = small_arch();
        let mut p = ModelParams::init(&arch, 0).unwrap();
        p.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut tape = Tape::<f32>::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(random(4, 5, 9));
        let h = encode(&mut tape, &b, x).unwrap();
        assert!(tape.value(h).unwrap().data().iter().all(|&v| v == 0.0));
        let g = gaussian_head(&mut tape, &b, h).unwrap();
        assert!(tape.value(g.mu).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(tape.value(g.logvar).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_inputs_identical_rows() {
        let arch = small_arch();
        let p = ModelParams::init(&arch, 4).unwrap();
        let row = random(1, 5, 2);
        let x = Tensor::new([3, 5], row.data().repeat(3)).unwrap();
        let mut tape = Tape::<f32>::new();
        let b = p.bind(&mut tape, false);
        let xv = tape.constant(x);
        let h = encode(&mut tape, &b, xv).unwrap();
        let hv = tape.value(h).unwrap();
        assert_eq!(hv.row(0), hv.row(1));
        assert_eq!(hv.row(0), hv.row(2));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let p = ModelParams::init(&small_arch(), 0).unwrap();
        let mut tape = Tape::<f32>::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([2, 6]));
        assert!(matches!(encode(&mut tape, &b, x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn logvar_is_clamped() {
        let arch = small_arch();
        let mut p = ModelParams::init(&arch, 0).unwrap();
        p.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        p.get_mut("head.logvar.bias").unwrap().data_mut().fill(25.0);
        let mut tape = Tape::<f32>::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([1, 5]));
        let h = encode(&mut tape, &b, x).unwrap();
        let g = gaussian_head(&mut tape, &b, h).unwrap();
        assert_eq!(tape.value(g.logvar).unwrap().data(), &[10.0, 10.0]);
    }

    #[test]
    fn reparameterize_cases() {
        for mode in [ReparamMode::Std, ReparamMode::Literal] {
            let mut tape = Tape::<f32>::new();
            let mu = tape.constant(Tensor::new([1, 2], vec![0.5, -1.0]).unwrap());
            let logvar = tape.constant(Tensor::zeros([1, 2]));
            let g = GaussianVars { mu, logvar };
            let zero = tape.constant(Tensor::zeros([1, 2]));
            let z = reparameterize(&mut tape, &g, zero, mode).unwrap();
            assert_eq!(tape.value(z).unwrap().data(), &[0.5, -1.0]);
            let one = tape.constant(Tensor::ones([1, 2]));
            let z = reparameterize(&mut tape, &g, one, mode).unwrap();
            assert_eq!(tape.value(z).unwrap().data(), &[1.5, 0.0]);
        }
    }

    #[test]
    fn reparameterize_modes_differ_off_unit_variance() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::zeros([1, 1]));
        let logvar = tape.constant(Tensor::full([1, 1], 2.0f64.ln()));
        let xi = tape.constant(Tensor::ones([1, 1]));
        let g = GaussianVars { mu, logvar };
        let s = reparameterize(&mut tape, &g, xi, ReparamMode::Std).unwrap();
        let l = reparameterize(&mut tape, &g, xi, ReparamMode::Literal).unwrap();
        assert!((tape.value(s).unwrap().data()[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((tape.value(l).unwrap().data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn noise_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.leaf(Tensor::zeros([1, 2]));
        let logvar = tape.leaf(Tensor::zeros([1, 2]));
        let xi = tape.constant(Tensor::ones([1, 2]));
        let z = reparameterize(&mut tape, &GaussianVars { mu, logvar }, xi, ReparamMode::Std).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(xi).is_none());
        assert_eq!(g.get(mu).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(logvar).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn encode_first_layer_gradient_matches_finite_differences() {
        let arch = small_arch();
        let p = ModelParams::init(&arch, 11).unwrap();
        let x = random(3, 5, 12).cast::<f64>();
        let w0 = p.get("encoder.layer0.weight").unwrap().cast::<f64>();
        let r = grad_check_fn(
            |tape, w| {
                let b = p.bind(tape, false).with_var(0, w);
                let xv = tape.constant(x.clone());
                let h = encode(tape, &b, xv)?;
                tape.sum(h)
            },
            &w0,
            1e-6,
            1e-3,
        );
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn architecture_inferred_from_tensors() {
        let arch = small_arch();
        let p = ModelParams::init(&arch, 0).unwrap();
        assert_eq!(ModelParams::infer_architecture(p.tensors()).unwrap(), arch);
    }

    #[test]
    fn reparameterized_mean_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let xi = standard_normal(&mut rng, n, 1);
        let mut tape = Tape::<f32>::new();
        let mu = tape.constant(Tensor::full([n, 1], 0.3f32));
        let logvar = tape.constant(Tensor::full([n, 1], 0.8f32));
        let xv = tape.constant(xi);
        let z = reparameterize(&mut tape, &GaussianVars { mu, logvar }, xv, ReparamMode::Std).unwrap();
        let mean = tape.value(z).unwrap().sum_f64() / n as f64;
        let sigma = (0.4f64).exp();
        assert!((mean - 0.3).abs() < 3.0 * sigma / (n as f64).sqrt());
    }
}
