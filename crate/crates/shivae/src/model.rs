//! The sequential heterogeneous VAE: a recurrent latent-variable model
//! with a discrete mixture latent `s_t`, a continuous latent `z_t` whose
//! prior is a mixture component selected by `s_t`, an LSTM hidden state
//! carrying the past, and one likelihood head per attribute kind.
//!
//! Per time step, with `x~_t` the zero-filled encoded observations:
//!
//! ```text
//! q(s_t)            = softmax(phi_s(x~_t, h_{t-1}))
//! s_t               ~ Gumbel-softmax relaxation of q(s_t)
//! p(z_t | s_t, h)   = N(mu_0, Sigma_0) = phi_prior(h_{t-1}, s_t)
//! q(z_t | x, s, h)  = N(mu_z, Sigma_z) = phi_enc(phi_x(x~_t), h_{t-1}, s_t)
//! z_t               = mu_z + sqrt(Sigma_z) * eps
//! y_t               = phi_z(z_t)
//! gamma_t^d         = phi_dec_d(y_t, s_t, h_{t-1})    per attribute d
//! h_t               = LSTM(y_t, h_{t-1})
//! ```
//!
//! The training objective sums, over valid steps, the observed-cell
//! reconstruction log-likelihood minus beta times the two KL terms, and
//! averages over the batch.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AttrKind, AttributeSchema};
use crate::error::{Result, ShivaeError};
use crate::nn::{Binding, Linear, LstmCell, Mlp, ParamStore};
use crate::tape::{sigmoid_scalar, Tape, Var};

/// Lower bound applied to every variance output.
pub const VAR_FLOOR: f64 = 1e-5;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

// ---------------------------------------------------------------------------
// Noise sources
// ---------------------------------------------------------------------------

/// Source of the external randomness consumed by sampling: standard
/// normal draws for the continuous latent and standard Gumbel draws for
/// the discrete one. Abstracted so tests can inject zero noise.
pub trait NoiseSource {
    fn normal(&mut self, rows: usize, cols: usize) -> Array2<f64>;
    fn gumbel(&mut self, rows: usize, cols: usize) -> Array2<f64>;
}

/// Deterministic stream of real noise.
pub struct SeededNoise {
    rng: ChaCha12Rng,
}

impl SeededNoise {
    pub fn new(seed: u64) -> Self {
        SeededNoise { rng: ChaCha12Rng::seed_from_u64(seed) }
    }
}

impl NoiseSource for SeededNoise {
    fn normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut self.rng))
    }

    fn gumbel(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            let u: f64 = rand::distr::Open01.sample(&mut self.rng);
            -(-u.ln()).ln()
        })
    }
}

/// Test hook: every draw is zero, so samples collapse to means and the
/// Gumbel-softmax returns the plain tempered softmax.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::zeros((rows, cols))
    }

    fn gumbel(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::zeros((rows, cols))
    }
}

// ---------------------------------------------------------------------------
// Model definition
// ---------------------------------------------------------------------------

/// Latent and layer dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Continuous latent dimension.
    pub k: usize,
    /// Recurrent hidden dimension.
    pub h: usize,
    /// Mixture size of the discrete latent.
    pub l: usize,
    /// Width of hidden layers and of the feature vectors produced by
    /// the input and latent feature networks.
    pub width: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.h == 0 || self.l == 0 || self.width == 0 {
            return Err(ShivaeError::config(
                "model dimensions k, h, l, width must all be at least 1",
            ));
        }
        Ok(())
    }
}

/// Trunk-plus-two-heads network emitting a diagonal Gaussian: one hidden
/// ReLU layer shared, then linear heads for the mean and the raw
/// variance, the latter mapped through softplus with a floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GaussianNet {
    trunk: Linear,
    mu: Linear,
    raw_var: Linear,
}

impl GaussianNet {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        GaussianNet {
            trunk: Linear::init(store, &format!("{prefix}.trunk"), in_dim, hidden, rng),
            mu: Linear::init(store, &format!("{prefix}.mu"), hidden, out_dim, rng),
            raw_var: Linear::init(store, &format!("{prefix}.var"), hidden, out_dim, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> (Var, Var) {
        let t = self.trunk.forward(tape, bind, x);
        let t = tape.relu(t);
        let mu = self.mu.forward(tape, bind, t);
        let raw = self.raw_var.forward(tape, bind, t);
        let sp = tape.softplus(raw);
        let var = tape.clamp_min(sp, VAR_FLOOR);
        (mu, var)
    }
}

/// One likelihood head per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum DecHead {
    Gaussian(GaussianNet),
    Bernoulli { trunk: Linear, logit: Linear },
    Categorical { trunk: Linear, logits: Linear },
}

/// Decoded likelihood parameters for one attribute, as tape nodes.
pub enum AttrParams {
    /// Mean and variance in encoded space, each B x 1.
    Gaussian { mu: Var, var: Var },
    /// Logit, B x 1.
    Bernoulli { logit: Var },
    /// Log-probabilities, B x C.
    Categorical { log_probs: Var },
}

/// The model: architecture plus encoded-space layout. Weights live in a
/// separate [`ParamStore`] so checkpoints can swap them wholesale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiVae {
    pub dims: ModelDims,
    pub schema: Vec<AttributeSchema>,
    /// Start column of each attribute in encoded space.
    enc_offsets: Vec<usize>,
    pub enc_dim: usize,
    phi_x: Mlp,
    phi_s: Mlp,
    phi_prior: GaussianNet,
    phi_enc: GaussianNet,
    phi_z: Mlp,
    rnn: LstmCell,
    dec: Vec<DecHead>,
}

fn attr_width(kind: &AttrKind) -> usize {
    match kind {
        AttrKind::Categorical { num_classes } => *num_classes,
        _ => 1,
    }
}

impl ShiVae {
    /// Build the architecture and Glorot-initialize a parameter store.
    pub fn init(
        dims: ModelDims,
        schema: &[AttributeSchema],
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        dims.validate()?;
        crate::data::validate_schema(schema)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut enc_offsets = Vec::with_capacity(schema.len());
        let mut enc_dim = 0;
        for attr in schema {
            enc_offsets.push(enc_dim);
            enc_dim += attr_width(&attr.kind);
        }

        let (k, h, l, w) = (dims.k, dims.h, dims.l, dims.width);
        let phi_x = Mlp::init(&mut store, "phi_x", &[enc_dim, w, w], &mut rng);
        let phi_s = Mlp::init(&mut store, "phi_s", &[enc_dim + h, w, l], &mut rng);
        let phi_prior = GaussianNet::init(&mut store, "phi_prior", h + l, w, k, &mut rng);
        let phi_enc = GaussianNet::init(&mut store, "phi_enc", w + h + l, w, k, &mut rng);
        let phi_z = Mlp::init(&mut store, "phi_z", &[k, w, w], &mut rng);
        let rnn = LstmCell::init(&mut store, "rnn", w, h, &mut rng);
        let dec = schema
            .iter()
            .enumerate()
            .map(|(d, attr)| {
                let prefix = format!("dec.{d}");
                let in_dim = w + l + h;
                match attr.kind {
                    AttrKind::Real | AttrKind::Positive => DecHead::Gaussian(GaussianNet::init(
                        &mut store, &prefix, in_dim, w, 1, &mut rng,
                    )),
                    AttrKind::Binary => DecHead::Bernoulli {
                        trunk: Linear::init(&mut store, &format!("{prefix}.trunk"), in_dim, w, &mut rng),
                        logit: Linear::init(&mut store, &format!("{prefix}.logit"), w, 1, &mut rng),
                    },
                    AttrKind::Categorical { num_classes } => DecHead::Categorical {
                        trunk: Linear::init(&mut store, &format!("{prefix}.trunk"), in_dim, w, &mut rng),
                        logits: Linear::init(
                            &mut store,
                            &format!("{prefix}.logits"),
                            w,
                            num_classes,
                            &mut rng,
                        ),
                    },
                }
            })
            .collect();

        Ok((
            ShiVae {
                dims,
                schema: schema.to_vec(),
                enc_offsets,
                enc_dim,
                phi_x,
                phi_s,
                phi_prior,
                phi_enc,
                phi_z,
                rnn,
                dec,
            },
            store,
        ))
    }

    /// Encoded columns of attribute `d`.
    pub fn enc_cols(&self, d: usize) -> std::ops::Range<usize> {
        let start = self.enc_offsets[d];
        start..start + attr_width(&self.schema[d].kind)
    }

    /// Conditional prior parameters from the past hidden state and the
    /// current mixture indicator.
    pub fn prior_step(&self, tape: &mut Tape, bind: &Binding, h_prev: Var, s: Var) -> (Var, Var) {
        let inp = tape.concat_cols(&[h_prev, s]);
        self.phi_prior.forward(tape, bind, inp)
    }

    /// Variational log-probabilities over the mixture indicator.
    pub fn encode_s(&self, tape: &mut Tape, bind: &Binding, x_filled: Var, h_prev: Var) -> Var {
        let inp = tape.concat_cols(&[x_filled, h_prev]);
        let logits = self.phi_s.forward(tape, bind, inp);
        tape.log_softmax(logits)
    }

    /// Variational Gaussian over the continuous latent.
    pub fn encode_z(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x_filled: Var,
        h_prev: Var,
        s: Var,
    ) -> (Var, Var) {
        let feat = self.phi_x.forward(tape, bind, x_filled);
        let inp = tape.concat_cols(&[feat, h_prev, s]);
        self.phi_enc.forward(tape, bind, inp)
    }

    /// Likelihood parameters for every attribute.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        y: Var,
        s: Var,
        h_prev: Var,
    ) -> Vec<AttrParams> {
        let inp = tape.concat_cols(&[y, s, h_prev]);
        self.dec
            .iter()
            .map(|head| match head {
                DecHead::Gaussian(net) => {
                    let (mu, var) = net.forward(tape, bind, inp);
                    AttrParams::Gaussian { mu, var }
                }
                DecHead::Bernoulli { trunk, logit } => {
                    let t = trunk.forward(tape, bind, inp);
                    let t = tape.relu(t);
                    AttrParams::Bernoulli { logit: logit.forward(tape, bind, t) }
                }
                DecHead::Categorical { trunk, logits } => {
                    let t = trunk.forward(tape, bind, inp);
                    let t = tape.relu(t);
                    let raw = logits.forward(tape, bind, t);
                    AttrParams::Categorical { log_probs: tape.log_softmax(raw) }
                }
            })
            .collect()
    }

    /// Feature vector of the continuous latent, fed to the decoder and
    /// the recurrence.
    pub fn latent_features(&self, tape: &mut Tape, bind: &Binding, z: Var) -> Var {
        self.phi_z.forward(tape, bind, z)
    }

    pub fn recurrence_step(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        y: Var,
        h: Var,
        c: Var,
    ) -> (Var, Var) {
        self.rnn.step(tape, bind, y, h, c)
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> (Var, Var) {
        self.rnn.zero_state(tape, batch)
    }
}

// ---------------------------------------------------------------------------
// Sampling machinery
// ---------------------------------------------------------------------------

/// Differentiable relaxed draw from a categorical given log-probs:
/// softmax((log_probs + g) / temperature) with standard Gumbel g.
pub fn gumbel_softmax_sample(
    tape: &mut Tape,
    log_probs: Var,
    temperature: f64,
    noise: &mut dyn NoiseSource,
) -> Var {
    assert!(temperature > 0.0, "gumbel-softmax temperature must be positive");
    let (b, l) = tape.value(log_probs).dim();
    let g = tape.input(noise.gumbel(b, l));
    let shifted = tape.add(log_probs, g);
    let tempered = tape.scale(shifted, 1.0 / temperature);
    tape.softmax(tempered)
}

/// Reparameterized Gaussian draw: z = mu + sqrt(var) * eps.
pub fn reparameterize(
    tape: &mut Tape,
    mu: Var,
    var: Var,
    noise: &mut dyn NoiseSource,
) -> Var {
    let (b, k) = tape.value(mu).dim();
    let eps = tape.input(noise.normal(b, k));
    let sd = tape.sqrt(var);
    let scaled = tape.mul(sd, eps);
    tape.add(mu, scaled)
}

/// Hard one-hot draw from log-probabilities via the Gumbel-max trick:
/// argmax(log_probs + g) is an exact categorical sample.
pub fn hard_categorical_sample(
    log_probs: &[f64],
    noise: &mut dyn NoiseSource,
) -> usize {
    let g = noise.gumbel(1, log_probs.len());
    log_probs
        .iter()
        .enumerate()
        .map(|(i, &lp)| (i, lp + g[(0, i)]))
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("non-finite perturbed logit"))
        .map(|(i, _)| i)
        .expect("empty log-prob vector")
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// KL(N(mu_q, var_q) || N(mu_p, var_p)) for diagonal Gaussians, summed
/// over dimensions: B x 1.
pub fn kl_gaussian_diag(
    tape: &mut Tape,
    mu_q: Var,
    var_q: Var,
    mu_p: Var,
    var_p: Var,
) -> Var {
    let ln_p = tape.ln(var_p);
    let ln_q = tape.ln(var_q);
    let ln_ratio = tape.sub(ln_p, ln_q);
    let dmu = tape.sub(mu_q, mu_p);
    let dmu2 = tape.mul(dmu, dmu);
    let num = tape.add(var_q, dmu2);
    let frac = tape.div(num, var_p);
    let sum = tape.add(ln_ratio, frac);
    let sum = tape.add_scalar(sum, -1.0);
    let half = tape.scale(sum, 0.5);
    tape.sum_cols(half)
}

/// KL(q || uniform) for a categorical given log q: B x 1. Equals
/// sum_k q_k (ln q_k + ln L), bounded by [0, ln L].
pub fn kl_categorical_uniform(tape: &mut Tape, log_q: Var) -> Var {
    let l = tape.value(log_q).ncols() as f64;
    let q = tape.exp(log_q);
    let shifted = tape.add_scalar(log_q, l.ln());
    let terms = tape.mul(q, shifted);
    tape.sum_cols(terms)
}

/// Observed-cell log-likelihood of one step, B x 1. `target` is the
/// zero-filled encoded observations (B x E), `attr_obs` the per-attribute
/// observation indicator (B x D as 0/1); missing attributes contribute
/// exactly zero.
pub fn log_likelihood_observed(
    model: &ShiVae,
    tape: &mut Tape,
    params: &[AttrParams],
    target: Var,
    attr_obs: Var,
) -> Var {
    let b = tape.value(target).nrows();
    let mut acc = tape.input(Array2::zeros((b, 1)));
    for (d, p) in params.iter().enumerate() {
        let cols = model.enc_cols(d);
        let x = tape.slice_cols(target, cols.start, cols.end);
        let ll = match p {
            AttrParams::Gaussian { mu, var } => {
                let diff = tape.sub(x, *mu);
                let sq = tape.mul(diff, diff);
                let quad = tape.div(sq, *var);
                let ln_var = tape.ln(*var);
                let inner = tape.add(quad, ln_var);
                let halved = tape.scale(inner, -0.5);
                tape.add_scalar(halved, -HALF_LN_2PI)
            }
            AttrParams::Bernoulli { logit } => {
                // x*l - softplus(l), the stable Bernoulli log-likelihood
                let xl = tape.mul(x, *logit);
                let sp = tape.softplus(*logit);
                tape.sub(xl, sp)
            }
            AttrParams::Categorical { log_probs } => {
                let picked = tape.mul(x, *log_probs);
                tape.sum_cols(picked)
            }
        };
        let mask_d = tape.slice_cols(attr_obs, d, d + 1);
        let masked = tape.mul(ll, mask_d);
        acc = tape.add(acc, masked);
    }
    acc
}

// ---------------------------------------------------------------------------
// The objective
// ---------------------------------------------------------------------------

/// One right-padded batch in encoded space, laid out step-major. The
/// zero-filled table serves as both network input and reconstruction
/// target; per-attribute indicators say which cells count.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Per step: B x E zero-filled encoded values.
    pub x: Vec<Array2<f64>>,
    /// Per step: B x D observation indicator (0.0 / 1.0).
    pub attr_obs: Vec<Array2<f64>>,
    /// Per step: B x 1 validity indicator; padded steps are 0.0.
    pub valid: Vec<Array2<f64>>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.x.first().map_or(0, Array2::nrows)
    }

    pub fn num_steps(&self) -> usize {
        self.x.len()
    }
}

/// The three objective components of one batch, as batch means, plus
/// the annealing weight used. `total = recon - beta * (kl_z + kl_s)`;
/// training maximizes this.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_s: f64,
    pub beta: f64,
    pub total: f64,
}

/// Tape handles of the objective, for callers that also need gradients.
pub struct ElboVars {
    /// Negative objective (the quantity to minimize), 1 x 1.
    pub loss: Var,
    pub recon: Var,
    pub kl_z: Var,
    pub kl_s: Var,
}

/// Sampling knobs of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboSettings {
    pub beta: f64,
    pub temperature: f64,
}

impl Default for ElboSettings {
    fn default() -> Self {
        ElboSettings { beta: 1.0, temperature: 1.0 }
    }
}

/// Unrolled single-sample objective over a batch. Noise is consumed in
/// a fixed order (Gumbel then normal, per step), so a reseeded source
/// replays the identical estimate.
pub fn elbo_forward(
    model: &ShiVae,
    tape: &mut Tape,
    bind: &Binding,
    batch: &Batch,
    settings: ElboSettings,
    noise: &mut dyn NoiseSource,
) -> ElboVars {
    assert!((0.0..=1.0).contains(&settings.beta), "beta must lie in [0,1]");
    let b = batch.batch_size();
    let (mut h, mut c) = model.zero_state(tape, b);
    let mut recon_acc = tape.input(Array2::zeros((b, 1)));
    let mut kl_z_acc = tape.input(Array2::zeros((b, 1)));
    let mut kl_s_acc = tape.input(Array2::zeros((b, 1)));

    for t in 0..batch.num_steps() {
        let x = tape.input(batch.x[t].clone());
        let attr_obs = tape.input(batch.attr_obs[t].clone());
        let valid = tape.input(batch.valid[t].clone());

        let log_q_s = model.encode_s(tape, bind, x, h);
        let s = gumbel_softmax_sample(tape, log_q_s, settings.temperature, noise);
        let (mu_p, var_p) = model.prior_step(tape, bind, h, s);
        let (mu_q, var_q) = model.encode_z(tape, bind, x, h, s);
        let z = reparameterize(tape, mu_q, var_q, noise);
        let y = model.latent_features(tape, bind, z);
        let params = model.decode_step(tape, bind, y, s, h);

        let recon_t = log_likelihood_observed(model, tape, &params, x, attr_obs);
        let kl_z_t = kl_gaussian_diag(tape, mu_q, var_q, mu_p, var_p);
        let kl_s_t = kl_categorical_uniform(tape, log_q_s);

        let recon_v = tape.mul(recon_t, valid);
        let kl_z_v = tape.mul(kl_z_t, valid);
        let kl_s_v = tape.mul(kl_s_t, valid);
        recon_acc = tape.add(recon_acc, recon_v);
        kl_z_acc = tape.add(kl_z_acc, kl_z_v);
        kl_s_acc = tape.add(kl_s_acc, kl_s_v);

        let (h_new, c_new) = model.recurrence_step(tape, bind, y, h, c);
        h = h_new;
        c = c_new;
    }

    let scale = 1.0 / b as f64;
    let recon_sum = tape.sum_all(recon_acc);
    let recon = tape.scale(recon_sum, scale);
    let kl_z_sum = tape.sum_all(kl_z_acc);
    let kl_z = tape.scale(kl_z_sum, scale);
    let kl_s_sum = tape.sum_all(kl_s_acc);
    let kl_s = tape.scale(kl_s_sum, scale);

    let kl = tape.add(kl_z, kl_s);
    let weighted = tape.scale(kl, settings.beta);
    let total = tape.sub(recon, weighted);
    let loss = tape.neg(total);
    ElboVars { loss, recon, kl_z, kl_s }
}

/// Evaluate the objective without keeping the tape around.
pub fn elbo(
    model: &ShiVae,
    store: &ParamStore,
    batch: &Batch,
    settings: ElboSettings,
    noise: &mut dyn NoiseSource,
) -> Result<ElboTerms> {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let vars = elbo_forward(model, &mut tape, &bind, batch, settings, noise);
    let terms = ElboTerms {
        recon: tape.scalar(vars.recon),
        kl_z: tape.scalar(vars.kl_z),
        kl_s: tape.scalar(vars.kl_s),
        beta: settings.beta,
        total: -tape.scalar(vars.loss),
    };
    if !terms.total.is_finite() {
        return Err(ShivaeError::numeric(format!(
            "objective is not finite (recon {}, kl_z {}, kl_s {}, batch of {} x {} steps)",
            terms.recon,
            terms.kl_z,
            terms.kl_s,
            batch.batch_size(),
            batch.num_steps()
        )));
    }
    Ok(terms)
}

// ---------------------------------------------------------------------------
// Filtering pass for imputation
// ---------------------------------------------------------------------------

/// Likelihood parameters of one attribute at one step, as plain values
/// in encoded space.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrParamValues {
    Gaussian { mu: f64, var: f64 },
    Bernoulli { p: f64 },
    Categorical { probs: Vec<f64> },
}

/// One forward filtering pass over a single sequence: per step, sample
/// a hard mixture indicator and a latent draw from the variational
/// posteriors, decode likelihood parameters, advance the recurrence.
/// With `latent_mean` set, z uses the posterior mean instead of a draw.
pub fn filter_sequence(
    model: &ShiVae,
    store: &ParamStore,
    x_filled: &Array2<f64>,
    attr_obs: &Array2<f64>,
    noise: &mut dyn NoiseSource,
    latent_mean: bool,
) -> Result<Vec<Vec<AttrParamValues>>> {
    let t_len = x_filled.nrows();
    if x_filled.ncols() != model.enc_dim {
        return Err(ShivaeError::data(format!(
            "encoded width {} does not match model width {}",
            x_filled.ncols(),
            model.enc_dim
        )));
    }
    if attr_obs.dim() != (t_len, model.schema.len()) {
        return Err(ShivaeError::data("observation indicator shape mismatch".to_string()));
    }
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let (mut h, mut c) = model.zero_state(&mut tape, 1);
    let mut out = Vec::with_capacity(t_len);

    for t in 0..t_len {
        let x_row = x_filled.row(t).insert_axis(ndarray::Axis(0)).to_owned();
        let x = tape.input(x_row);
        let log_q_s = model.encode_s(&mut tape, &bind, x, h);
        let lp: Vec<f64> = tape.value(log_q_s).row(0).to_vec();
        let pick = hard_categorical_sample(&lp, noise);
        let mut one_hot = Array2::zeros((1, model.dims.l));
        one_hot[(0, pick)] = 1.0;
        let s = tape.input(one_hot);

        let (mu_q, var_q) = model.encode_z(&mut tape, &bind, x, h, s);
        let z = if latent_mean {
            // keep the noise stream aligned with sampling mode
            let _ = noise.normal(1, model.dims.k);
            mu_q
        } else {
            reparameterize(&mut tape, mu_q, var_q, noise)
        };
        let y = model.latent_features(&mut tape, &bind, z);
        let params = model.decode_step(&mut tape, &bind, y, s, h);

        let values = params
            .iter()
            .map(|p| match p {
                AttrParams::Gaussian { mu, var } => AttrParamValues::Gaussian {
                    mu: tape.value(*mu)[(0, 0)],
                    var: tape.value(*var)[(0, 0)],
                },
                AttrParams::Bernoulli { logit } => AttrParamValues::Bernoulli {
                    p: sigmoid_scalar(tape.value(*logit)[(0, 0)]),
                },
                AttrParams::Categorical { log_probs } => AttrParamValues::Categorical {
                    probs: tape.value(*log_probs).row(0).iter().map(|&l| l.exp()).collect(),
                },
            })
            .collect();
        out.push(values);

        let (h_new, c_new) = model.recurrence_step(&mut tape, &bind, y, h, c);
        h = h_new;
        c = c_new;
    }
    Ok(out)
}
