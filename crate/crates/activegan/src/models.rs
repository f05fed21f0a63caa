//! Network definitions: conditional generator, dual-head discriminator, and
//! the diagonal-Gaussian latent-density network ("policy"). Parameters live
//! in plain tensors; each forward pass binds them onto a fresh tape.

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tape, Tensor, Var};
use crate::store::TensorStore;

/// Slope of the discriminator's leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Clamp range for the policy's log standard deviation; keeps the density
/// from collapsing or exploding during joint training.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Linear,
    Tanh,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Tanh => tape.tanh(x),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
        }
    }
}

/// Shape description of a trunk-plus-heads network.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    /// Linear output heads as (name, width).
    pub heads: Vec<(String, usize)>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::contract("network: input dimension must be positive"));
        }
        if self.hidden.is_empty() {
            return Err(Error::contract("network: at least one hidden layer required"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::contract("network: zero-width hidden layer"));
        }
        if self.heads.is_empty() || self.heads.iter().any(|(_, w)| *w == 0) {
            return Err(Error::contract("network: heads must be non-empty with positive widths"));
        }
        Ok(())
    }
}

/// One fully connected layer; `w` is `[input, output]`, `b` is `[output]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    /// Weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    fn init(input: usize, output: usize, rng: &mut SeededRng) -> Dense {
        let bound = 1.0 / (input as f64).sqrt();
        Dense {
            w: rng.uniform_tensor(vec![input, output], -bound, bound),
            b: Tensor::zeros(vec![output]),
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<DenseVars> {
        Ok(DenseVars {
            w: tape.leaf(self.w.clone(), trainable)?,
            b: tape.leaf(self.b.clone(), trainable)?,
        })
    }

    fn forward(tape: &mut Tape, vars: DenseVars, x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars.w)?;
        tape.add(h, vars.b)
    }
}

/// Trunk-plus-heads network built from a [`NetworkSpec`]. The trunk applies
/// the hidden activation after every layer; heads are linear.
#[derive(Clone, Debug)]
pub struct HeadedNet {
    spec: NetworkSpec,
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct HeadedVars {
    trunk: Vec<DenseVars>,
    heads: Vec<DenseVars>,
}

impl HeadedVars {
    /// Variables in the same order as [`HeadedNet::params`].
    pub fn all_vars(&self) -> Vec<Var> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .flat_map(|d| [d.w, d.b])
            .collect()
    }
}

impl HeadedNet {
    pub fn from_spec(spec: NetworkSpec, rng: &mut SeededRng) -> Result<HeadedNet> {
        spec.validate()?;
        let mut trunk = Vec::with_capacity(spec.hidden.len());
        let mut prev = spec.input_dim;
        for &width in &spec.hidden {
            trunk.push(Dense::init(prev, width, rng));
            prev = width;
        }
        let heads = spec
            .heads
            .iter()
            .map(|(_, width)| Dense::init(prev, *width, rng))
            .collect();
        Ok(HeadedNet { spec, trunk, heads })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<HeadedVars> {
        let trunk = self
            .trunk
            .iter()
            .map(|d| d.bind(tape, trainable))
            .collect::<Result<_>>()?;
        let heads = self
            .heads
            .iter()
            .map(|d| d.bind(tape, trainable))
            .collect::<Result<_>>()?;
        Ok(HeadedVars { trunk, heads })
    }

    /// Forward pass producing one output per head, in spec order.
    pub fn forward(&self, tape: &mut Tape, vars: &HeadedVars, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        for layer in &vars.trunk {
            h = Dense::forward(tape, *layer, h)?;
            h = self.spec.hidden_activation.apply(tape, h)?;
        }
        vars.heads
            .iter()
            .map(|head| Dense::forward(tape, *head, h))
            .collect()
    }

    /// Value-level forward on an ephemeral tape.
    pub fn forward_values(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let input = tape.constant(x.clone())?;
        let outs = self.forward(&mut tape, &vars, input)?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Parameters in binding order: trunk layers then heads, `w` before `b`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .flat_map(|d| [&d.w, &d.b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain(&mut self.heads)
            .flat_map(|d| [&mut d.w, &mut d.b])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn entry_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.trunk.len() {
            names.push(format!("{}/trunk{}/w", prefix, i));
            names.push(format!("{}/trunk{}/b", prefix, i));
        }
        for (name, _) in &self.spec.heads {
            names.push(format!("{}/head_{}/w", prefix, name));
            names.push(format!("{}/head_{}/b", prefix, name));
        }
        names
    }

    pub fn save_into(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        for (name, tensor) in self.entry_names(prefix).into_iter().zip(self.params()) {
            store.insert(name, tensor.clone())?;
        }
        Ok(())
    }

    /// Rebuild from a store; `spec` supplies the architecture, the store the
    /// values. Shapes are cross-checked.
    pub fn load_from(store: &TensorStore, prefix: &str, spec: NetworkSpec) -> Result<HeadedNet> {
        spec.validate()?;
        let mut rng = SeededRng::new(0);
        let mut net = HeadedNet::from_spec(spec, &mut rng)?;
        let names = net.entry_names(prefix);
        for (name, param) in names.into_iter().zip(net.params_mut()) {
            let stored = store.require(&name)?;
            if stored.shape() != param.shape() {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        name,
                        stored.shape(),
                        param.shape()
                    ),
                });
            }
            *param = stored.clone();
        }
        Ok(net)
    }
}

/// Conditional generator: `[latent | one-hot label] -> sample`.
#[derive(Clone, Debug)]
pub struct Generator {
    net: HeadedNet,
    pub latent_dim: usize,
    pub classes: usize,
    pub sample_dim: usize,
}

impl Generator {
    pub fn init(
        latent_dim: usize,
        classes: usize,
        sample_dim: usize,
        hidden: &[usize],
        rng: &mut SeededRng,
    ) -> Result<Generator> {
        let spec = NetworkSpec {
            input_dim: latent_dim + classes,
            hidden: hidden.to_vec(),
            hidden_activation: Activation::Tanh,
            heads: vec![("out".to_string(), sample_dim)],
        };
        Ok(Generator {
            net: HeadedNet::from_spec(spec, rng)?,
            latent_dim,
            classes,
            sample_dim,
        })
    }

    pub fn net(&self) -> &HeadedNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut HeadedNet {
        &mut self.net
    }

    /// Concatenate latents with one-hot labels into the network input.
    pub fn input_from(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if z.cols()? != self.latent_dim {
            return Err(Error::Shape {
                op: "generator_input",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len(), self.latent_dim],
            });
        }
        if z.rows()? != labels.len() {
            return Err(Error::Contract(format!(
                "generator: {} latents but {} labels",
                z.rows()?,
                labels.len()
            )));
        }
        let onehot = Tensor::one_hot(labels, self.classes)?;
        z.concat_cols(&onehot)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<HeadedVars> {
        self.net.bind(tape, trainable)
    }

    /// Tape forward over a prepared `[batch, latent+classes]` input.
    pub fn forward(&self, tape: &mut Tape, vars: &HeadedVars, input: Var) -> Result<Var> {
        Ok(self.net.forward(tape, vars, input)?[0])
    }

    /// Value-level batch generation.
    pub fn generate_batch(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let input = self.input_from(z, labels)?;
        Ok(self.net.forward_values(&input)?.pop().expect("one head"))
    }

    /// Single-sample convenience: `z` is one latent vector.
    pub fn generate(&self, z: &[f64], y: usize) -> Result<Vec<f64>> {
        let z = Tensor::new(vec![1, self.latent_dim], z.to_vec())?;
        let out = self.generate_batch(&z, &[y])?;
        Ok(out.into_data())
    }

    pub fn save_into(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.net.save_into(store, prefix)
    }

    pub fn load_from(
        store: &TensorStore,
        prefix: &str,
        latent_dim: usize,
        classes: usize,
        sample_dim: usize,
        hidden: &[usize],
    ) -> Result<Generator> {
        let spec = NetworkSpec {
            input_dim: latent_dim + classes,
            hidden: hidden.to_vec(),
            hidden_activation: Activation::Tanh,
            heads: vec![("out".to_string(), sample_dim)],
        };
        Ok(Generator {
            net: HeadedNet::load_from(store, prefix, spec)?,
            latent_dim,
            classes,
            sample_dim,
        })
    }
}

/// Discriminator with a shared trunk and two heads: a 1-logit source head
/// (real vs fake, through a sigmoid) and a K-logit class head (softmax).
#[derive(Clone, Debug)]
pub struct Discriminator {
    net: HeadedNet,
    pub sample_dim: usize,
    pub classes: usize,
}

impl Discriminator {
    pub fn init(
        sample_dim: usize,
        classes: usize,
        hidden: &[usize],
        rng: &mut SeededRng,
    ) -> Result<Discriminator> {
        let spec = NetworkSpec {
            input_dim: sample_dim,
            hidden: hidden.to_vec(),
            hidden_activation: Activation::LeakyRelu(LEAKY_SLOPE),
            heads: vec![("src".to_string(), 1), ("cls".to_string(), classes)],
        };
        Ok(Discriminator {
            net: HeadedNet::from_spec(spec, rng)?,
            sample_dim,
            classes,
        })
    }

    pub fn net(&self) -> &HeadedNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut HeadedNet {
        &mut self.net
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<HeadedVars> {
        self.net.bind(tape, trainable)
    }

    /// Tape forward: returns `(source logits [batch, 1], class logits [batch, K])`.
    pub fn forward(&self, tape: &mut Tape, vars: &HeadedVars, x: Var) -> Result<(Var, Var)> {
        let outs = self.net.forward(tape, vars, x)?;
        Ok((outs[0], outs[1]))
    }

    /// Value-level: probabilities of "real" per row plus class distributions.
    pub fn discriminate(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if !x.is_finite() {
            return Err(Error::numeric("discriminate: non-finite input"));
        }
        if x.cols()? != self.sample_dim {
            return Err(Error::Shape {
                op: "discriminate",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows()?, self.sample_dim],
            });
        }
        let outs = self.net.forward_values(x)?;
        let p_real = outs[0]
            .data()
            .iter()
            .map(|&s| 1.0 / (1.0 + (-s).exp()))
            .collect();
        let class_probs = crate::numerics::softmax_rows(&outs[1])?;
        Ok((p_real, class_probs))
    }

    pub fn save_into(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.net.save_into(store, prefix)
    }

    pub fn load_from(
        store: &TensorStore,
        prefix: &str,
        sample_dim: usize,
        classes: usize,
        hidden: &[usize],
    ) -> Result<Discriminator> {
        let spec = NetworkSpec {
            input_dim: sample_dim,
            hidden: hidden.to_vec(),
            hidden_activation: Activation::LeakyRelu(LEAKY_SLOPE),
            heads: vec![("src".to_string(), 1), ("cls".to_string(), classes)],
        };
        Ok(Discriminator {
            net: HeadedNet::load_from(store, prefix, spec)?,
            sample_dim,
            classes,
        })
    }
}

/// Maps a generated sample to a diagonal Gaussian over the latent space.
/// Supplies the density whose score function drives the uncertainty loss.
#[derive(Clone, Debug)]
pub struct GaussianPolicy {
    net: HeadedNet,
    pub sample_dim: usize,
    pub latent_dim: usize,
}

impl GaussianPolicy {
    pub fn init(
        sample_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut SeededRng,
    ) -> Result<GaussianPolicy> {
        let spec = NetworkSpec {
            input_dim: sample_dim,
            hidden: hidden.to_vec(),
            hidden_activation: Activation::Tanh,
            heads: vec![("mu".to_string(), latent_dim), ("sigma".to_string(), latent_dim)],
        };
        Ok(GaussianPolicy {
            net: HeadedNet::from_spec(spec, rng)?,
            sample_dim,
            latent_dim,
        })
    }

    pub fn net(&self) -> &HeadedNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut HeadedNet {
        &mut self.net
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<HeadedVars> {
        self.net.bind(tape, trainable)
    }

    /// Mean and clamped log-std per row of `x`.
    pub fn mu_sigma(&self, tape: &mut Tape, vars: &HeadedVars, x: Var) -> Result<(Var, Var)> {
        let outs = self.net.forward(tape, vars, x)?;
        let sigma = tape.clamp(outs[1], LOG_STD_MIN, LOG_STD_MAX)?;
        Ok((outs[0], sigma))
    }

    /// Per-row log density of `z` under the Gaussian predicted from `x_hat`:
    /// `sum_k [ -sigma_k - ln(2*pi)/2 - (z_k - mu_k)^2 / (2 e^{2 sigma_k}) ]`.
    ///
    /// Differentiable with respect to the policy parameters and `x_hat`
    /// (hence through the generator when `x_hat` is generator output).
    pub fn log_likelihood(
        &self,
        tape: &mut Tape,
        vars: &HeadedVars,
        x_hat: Var,
        z: Var,
    ) -> Result<Var> {
        if tape.shape(z).last() != Some(&self.latent_dim)
            || tape.shape(x_hat).first() != tape.shape(z).first()
        {
            return Err(Error::Shape {
                op: "log_likelihood",
                lhs: tape.shape(x_hat).to_vec(),
                rhs: tape.shape(z).to_vec(),
            });
        }
        let (mu, sigma) = self.mu_sigma(tape, vars, x_hat)?;
        let diff = tape.sub(z, mu)?;
        let sq = tape.mul(diff, diff)?;
        let inv_var = {
            let m2s = tape.scale(sigma, -2.0)?;
            tape.exp(m2s)?
        };
        let quad = tape.mul(sq, inv_var)?;
        let quad_sum = tape.sum_axis(quad, 1)?;
        let sigma_sum = tape.sum_axis(sigma, 1)?;
        let neg_sigma = tape.neg(sigma_sum)?;
        let half_quad = tape.scale(quad_sum, 0.5)?;
        let partial = tape.sub(neg_sigma, half_quad)?;
        tape.add_const(partial, -(self.latent_dim as f64) * 0.5 * LN_2PI)
    }

    /// Value-level per-row log likelihoods.
    pub fn log_likelihood_values(&self, x_hat: &Tensor, z: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let xv = tape.constant(x_hat.clone())?;
        let zv = tape.constant(z.clone())?;
        let ll = self.log_likelihood(&mut tape, &vars, xv, zv)?;
        Ok(tape.value(ll).data().to_vec())
    }

    pub fn save_into(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.net.save_into(store, prefix)
    }

    pub fn load_from(
        store: &TensorStore,
        prefix: &str,
        sample_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
    ) -> Result<GaussianPolicy> {
        let spec = NetworkSpec {
            input_dim: sample_dim,
            hidden: hidden.to_vec(),
            hidden_activation: Activation::Tanh,
            heads: vec![("mu".to_string(), latent_dim), ("sigma".to_string(), latent_dim)],
        };
        Ok(GaussianPolicy {
            net: HeadedNet::load_from(store, prefix, spec)?,
            sample_dim,
            latent_dim,
        })
    }
}
