//! Conditional latent-density segmentation networks and their objectives.
//!
//! Prior and posterior encoders map an image (and, for the posterior, a mask)
//! to a diagonal Gaussian over a `d`-dimensional latent. The decoder is a tiny
//! two-level U-Net whose final features are concatenated with the tiled
//! latent and combined by two 1×1 convolutions.

use std::collections::{BTreeMap, HashMap};

use log::debug;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::densities::{DiagonalGaussian, LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::ot::{graph_sinkhorn_divergence, SinkhornConfig};
use crate::rng;

pub const LOGIT_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Punet,
    Spunet,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Punet => "punet",
            ModelKind::Spunet => "spunet",
        })
    }
}

/// How the per-pixel reconstruction losses are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    #[default]
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(Error::invalid(format!("unknown reduction {s:?}, expected mean or sum"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub image_size: usize,
    /// Weight of the Sinkhorn term.
    pub alpha: f64,
    /// Weight of the KL term.
    pub beta: f64,
    pub sinkhorn_epsilon: f64,
    /// Cloud size per density for the Sinkhorn term.
    pub latent_samples: usize,
    #[serde(default)]
    pub reconstruction: Reduction,
    pub mode: ModelKind,
    pub sinkhorn: SinkhornConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            base_channels: 8,
            image_size: 32,
            alpha: 10.0,
            beta: 10.0,
            sinkhorn_epsilon: 1e-2,
            latent_samples: 16,
            reconstruction: Reduction::Sum,
            mode: ModelKind::Spunet,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn new(mode: ModelKind) -> Self {
        Self {
            mode,
            ..Self::default()
        }
        .normalized()
    }

    /// Copy with the mode contract applied (the ELBO model has no Sinkhorn term).
    pub fn normalized(mut self) -> Self {
        if self.mode == ModelKind::Punet {
            self.alpha = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::invalid("latent_dim and base_channels must be at least 1"));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::invalid("image_size must be a positive multiple of 8"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        if self.mode == ModelKind::Punet && self.alpha != 0.0 {
            return Err(Error::invalid("punet mode requires alpha = 0"));
        }
        if !(self.sinkhorn_epsilon > 0.0) {
            return Err(Error::invalid("sinkhorn_epsilon must be positive"));
        }
        if self.latent_samples == 0 {
            return Err(Error::invalid("latent_samples must be at least 1"));
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` for every parameter; fan-in 0 marks zero init.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (c, d) = (self.base_channels, self.latent_dim);
        let mut out = Vec::new();
        let mut conv = |name: String, ci: usize, co: usize, k: usize| {
            out.push((format!("{name}.w"), vec![co, ci, k, k], ci * k * k));
            out.push((format!("{name}.b"), vec![co], 0));
        };
        for (net, cin) in [("prior", 1), ("posterior", 2)] {
            conv(format!("{net}.conv1"), cin, c, 3);
            conv(format!("{net}.conv2"), c, c, 3);
            conv(format!("{net}.conv3"), c, c, 3);
        }
        conv("decoder.conv1".into(), 1, c, 3);
        conv("decoder.conv2".into(), c, c, 3);
        conv("decoder.conv3".into(), 2 * c, c, 3);
        conv("decoder.comb1".into(), c + d, c, 1);
        conv("decoder.comb2".into(), c, 1, 1);
        for net in ["prior", "posterior"] {
            out.push((format!("{net}.head.w"), vec![2 * d, c], 0));
            out.push((format!("{net}.head.b"), vec![2 * d], 0));
        }
        out
    }
}

/// Named parameter tensors of all three networks, in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    tensors: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    /// He-normal convolutions, zero biases and zero density heads.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for (k, (name, shape, fan_in)) in cfg.layout().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, k as u64);
                (0..n)
                    .map(|_| std * r.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            tensors.insert(name, Tensor::new(shape, data).expect("layout shape"));
        }
        Self { tensors }
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let layout = cfg.layout();
        if layout.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &layout {
            match tensors.get(name) {
                None => return Err(Error::invalid(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::invalid(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::invalid(format!("parameter {name} is not finite")))
                }
                _ => {}
            }
        }
        Ok(Self { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Every value rounded through `f32`.
    pub fn rounded_to_f32(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.map(|v| v as f32 as f64)))
                .collect(),
        }
    }
}

/// Parameters placed on a graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Trainable parameters become named leaves, others constants.
    pub fn new(g: &mut Graph, params: &NetworkParams, trainable: bool) -> Result<Self> {
        let mut vars = HashMap::with_capacity(params.tensors.len());
        for (name, t) in &params.tensors {
            let v = if trainable {
                g.param(name.clone(), t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Self { vars })
    }

    /// Binds existing vars, paired with `names` in order.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::invalid("names and vars differ in length"));
        }
        Ok(Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    fn conv(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.w"));
        let b = self.var(&format!("{name}.b"));
        g.conv2d(x, w, Some(b))
    }
}

/// Mean and clamped log-std vars of one density.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianVars {
    pub fn value(&self, g: &Graph) -> Result<DiagonalGaussian> {
        DiagonalGaussian::new(
            g.value(self.mean).data().to_vec(),
            g.value(self.log_std).data().to_vec(),
        )
    }
}

fn image_var(g: &mut Graph, cfg: &ModelConfig, pixels: &[f64]) -> Result<Var> {
    let s = cfg.image_size;
    if pixels.len() != s * s {
        return Err(Error::invalid(format!(
            "image has {} pixels, model expects {s}x{s}",
            pixels.len()
        )));
    }
    g.constant(Tensor::new(vec![1, s, s], pixels.to_vec())?)
}

fn encoder(g: &mut Graph, p: &Bound, cfg: &ModelConfig, net: &str, input: Var) -> Result<GaussianVars> {
    let mut h = input;
    for stage in 1..=3 {
        h = p.conv(g, &format!("{net}.conv{stage}"), h)?;
        h = g.relu(h)?;
        h = g.avg_pool2(h)?;
    }
    let (c, d) = (cfg.base_channels, cfg.latent_dim);
    let side = cfg.image_size / 8;
    let h = g.reshape(h, &[c, side * side])?;
    let feat = g.mean_axis(h, 1)?;
    let feat = g.reshape(feat, &[c, 1])?;
    let w = p.var(&format!("{net}.head.w"));
    let b = p.var(&format!("{net}.head.b"));
    let out = g.matmul(w, feat)?;
    let out = g.reshape(out, &[2 * d])?;
    let out = g.add(out, b)?;
    let mean = g.slice(out, 0, 0, d)?;
    let raw = g.slice(out, 0, d, 2 * d)?;
    let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)?;
    Ok(GaussianVars { mean, log_std })
}

pub fn prior_net(g: &mut Graph, p: &Bound, cfg: &ModelConfig, image: &[f64]) -> Result<GaussianVars> {
    let x = image_var(g, cfg, image)?;
    encoder(g, p, cfg, "prior", x)
}

pub fn posterior_net(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image: &[f64],
    mask: &BinaryMask,
) -> Result<GaussianVars> {
    let x = image_var(g, cfg, image)?;
    let y = image_var(g, cfg, &mask.to_f64())?;
    let xy = g.concat(&[x, y], 0)?;
    encoder(g, p, cfg, "posterior", xy)
}

/// Backbone features `[C, H, W]`, independent of the latent.
pub fn decoder_features(g: &mut Graph, p: &Bound, cfg: &ModelConfig, image: &[f64]) -> Result<Var> {
    let x = image_var(g, cfg, image)?;
    let f1 = p.conv(g, "decoder.conv1", x)?;
    let f1 = g.relu(f1)?;
    let f2 = g.avg_pool2(f1)?;
    let f2 = p.conv(g, "decoder.conv2", f2)?;
    let f2 = g.relu(f2)?;
    let up = g.upsample2(f2)?;
    let cat = g.concat(&[f1, up], 0)?;
    let f3 = p.conv(g, "decoder.conv3", cat)?;
    g.relu(f3)
}

/// Clamped logits `[1, H, W]` for latent `z` (shape `[d]`).
pub fn decoder_head(g: &mut Graph, p: &Bound, cfg: &ModelConfig, features: Var, z: Var) -> Result<Var> {
    let s = cfg.image_size;
    let d = cfg.latent_dim;
    if g.shape(z) != [d] {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: g.shape(z).to_vec(),
            rhs: vec![d],
        });
    }
    let z = g.reshape(z, &[d, 1, 1])?;
    let tiled = g.broadcast_to(z, &[d, s, s])?;
    let h = g.concat(&[features, tiled], 0)?;
    let h = p.conv(g, "decoder.comb1", h)?;
    let h = g.relu(h)?;
    let logits = p.conv(g, "decoder.comb2", h)?;
    g.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
}

pub fn decode_logits(g: &mut Graph, p: &Bound, cfg: &ModelConfig, image: &[f64], z: Var) -> Result<Var> {
    let f = decoder_features(g, p, cfg, image)?;
    decoder_head(g, p, cfg, f, z)
}

/// Probability map for a fixed latent, without gradients.
pub fn decode(params: &NetworkParams, cfg: &ModelConfig, image: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false)?;
    let zv = g.constant(Tensor::vector(z.to_vec()))?;
    let logits = decode_logits(&mut g, &p, cfg, image, zv)?;
    let probs = g.sigmoid(logits)?;
    Ok(g.value(probs).data().to_vec())
}

pub fn prior_density(params: &NetworkParams, cfg: &ModelConfig, image: &[f64]) -> Result<DiagonalGaussian> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false)?;
    prior_net(&mut g, &p, cfg, image)?.value(&g)
}

pub fn posterior_density(
    params: &NetworkParams,
    cfg: &ModelConfig,
    image: &[f64],
    mask: &BinaryMask,
) -> Result<DiagonalGaussian> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false)?;
    posterior_net(&mut g, &p, cfg, image, mask)?.value(&g)
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians on the graph.
pub fn graph_kl(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let dl = g.sub(q.log_std, p.log_std)?;
    let two_dl = g.scale(dl, 2.0)?;
    let ratio = g.exp(two_dl)?;
    let dm = g.sub(p.mean, q.mean)?;
    let dm2 = g.mul(dm, dm)?;
    let inv_var_p = g.scale(p.log_std, -2.0)?;
    let inv_var_p = g.exp(inv_var_p)?;
    let maha = g.mul(dm2, inv_var_p)?;
    let t = g.add(ratio, maha)?;
    let t = g.sub(t, two_dl)?;
    let t = g.add_scalar(t, -1.0)?;
    let s = g.sum(t)?;
    g.scale(s, 0.5)
}

/// Pixel-mean binary cross-entropy with logits: `softplus(l) - y l`.
pub fn graph_bce(g: &mut Graph, logits: Var, target: &[f64]) -> Result<Var> {
    let y = g.constant(Tensor::new(g.shape(logits).to_vec(), target.to_vec())?)?;
    let sp = g.softplus(logits)?;
    let yl = g.mul(y, logits)?;
    let t = g.sub(sp, yl)?;
    g.mean(t)
}

/// `[m, d]` reparameterized cloud `mean + std ⊙ noise` on the graph.
fn cloud(g: &mut Graph, density: GaussianVars, noise: &[f64], m: usize, d: usize) -> Result<Var> {
    let eps = g.constant(Tensor::new(vec![m, d], noise.to_vec())?)?;
    let std = g.exp(density.log_std)?;
    let scaled = g.mul(eps, std)?;
    g.add(scaled, density.mean)
}

/// Standard-Normal draws consumed by one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossNoise {
    /// Reparameterization noise of the reconstruction sample, length `d`.
    pub recon: Vec<f64>,
    /// `m × d` noise for the posterior cloud.
    pub posterior_cloud: Vec<f64>,
    /// `m × d` noise for the prior cloud.
    pub prior_cloud: Vec<f64>,
}

impl LossNoise {
    /// Both clouds share one draw, so equal densities give a zero divergence.
    pub fn draw(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, m) = (cfg.latent_dim, cfg.latent_samples);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let recon = normal(d);
        let (posterior_cloud, prior_cloud) = if cfg.alpha > 0.0 {
            let shared = normal(m * d);
            (shared.clone(), shared)
        } else {
            (Vec::new(), Vec::new())
        };
        Self {
            recon,
            posterior_cloud,
            prior_cloud,
        }
    }
}

/// Loss var with the values of its terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub prior: GaussianVars,
    pub posterior: GaussianVars,
    pub recon: f64,
    pub kl: f64,
    pub sinkhorn: f64,
}

/// Reconstruction plus β-weighted KL, and the α-weighted Sinkhorn divergence
/// between posterior and prior clouds when α > 0.
pub fn loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image: &[f64],
    mask: &BinaryMask,
    noise: &LossNoise,
) -> Result<LossTerms> {
    let d = cfg.latent_dim;
    let q = posterior_net(g, p, cfg, image, mask)?;
    let prior = prior_net(g, p, cfg, image)?;
    let z = cloud(g, q, &noise.recon, 1, d)?;
    let z = g.reshape(z, &[d])?;
    let logits = decode_logits(g, p, cfg, image, z)?;
    let mut recon = graph_bce(g, logits, &mask.to_f64())?;
    if cfg.reconstruction == Reduction::Sum {
        recon = g.scale(recon, (mask.height() * mask.width()) as f64)?;
    }
    let kl = graph_kl(g, q, prior)?;
    let weighted_kl = g.scale(kl, cfg.beta)?;
    let mut total = g.add(recon, weighted_kl)?;
    let mut sinkhorn = 0.0;
    if cfg.alpha > 0.0 {
        let m = cfg.latent_samples;
        let cq = cloud(g, q, &noise.posterior_cloud, m, d)?;
        let cp = cloud(g, prior, &noise.prior_cloud, m, d)?;
        let (s, info) = graph_sinkhorn_divergence(g, cq, cp, cfg.sinkhorn_epsilon, &cfg.sinkhorn)?;
        if !info.converged {
            debug!(
                "sinkhorn unroll not converged: {} iterations, marginal error {:.3e}",
                info.iterations, info.marginal_error
            );
        }
        sinkhorn = g.value(s).item()?;
        let weighted = g.scale(s, cfg.alpha)?;
        total = g.add(total, weighted)?;
    }
    Ok(LossTerms {
        total,
        prior,
        posterior: q,
        recon: g.value(recon).item()?,
        kl: g.value(kl).item()?,
        sinkhorn,
    })
}

/// Conditional ELBO objective; ignores `cfg.alpha`.
pub fn punet_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image: &[f64],
    mask: &BinaryMask,
    noise: &LossNoise,
) -> Result<LossTerms> {
    let cfg = ModelConfig {
        alpha: 0.0,
        ..cfg.clone()
    };
    loss(g, p, &cfg, image, mask, noise)
}

pub fn spunet_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image: &[f64],
    mask: &BinaryMask,
    noise: &LossNoise,
) -> Result<LossTerms> {
    loss(g, p, cfg, image, mask, noise)
}

/// `n` ancestral samples from the prior, thresholded at 0.5.
pub fn predict(
    params: &NetworkParams,
    cfg: &ModelConfig,
    image: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<BinaryMask>> {
    let mut rng = rng::stream(seed, 0);
    predict_with(params, cfg, image, n, &mut rng)
}

pub fn predict_with(
    params: &NetworkParams,
    cfg: &ModelConfig,
    image: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BinaryMask>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false)?;
    let prior = prior_net(&mut g, &p, cfg, image)?.value(&g)?;
    let features = decoder_features(&mut g, &p, cfg, image)?;
    let s = cfg.image_size;
    (0..n)
        .map(|_| {
            let noise: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            let z = g.constant(Tensor::vector(prior.sample(&noise)?))?;
            let logits = decoder_head(&mut g, &p, cfg, features, z)?;
            // p > 0.5 exactly when the logit is positive.
            let bits = g.value(logits).data().iter().map(|l| *l > 0.0).collect();
            BinaryMask::new(s, s, bits)
        })
        .collect()
}
