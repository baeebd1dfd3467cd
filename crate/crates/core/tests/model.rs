use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spunet::autodiff::{gradcheck, Graph, Tensor};
use spunet::densities::kl_divergence;
use spunet::metrics::BinaryMask;
use spunet::model::*;
use spunet::synthdata::{generate, TaskSpec};

fn toy_config(mode: ModelKind) -> ModelConfig {
    ModelConfig {
        latent_dim: 2,
        base_channels: 2,
        image_size: 8,
        latent_samples: 4,
        ..ModelConfig::new(mode)
    }
}

fn random_image(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    (0..s * s).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, s: usize) -> BinaryMask {
    BinaryMask::new(s, s, (0..s * s).map(|_| rng.random_bool(0.4)).collect()).unwrap()
}

/// Replaces the zero-initialized density heads with small random values.
fn perturb_heads(params: &mut NetworkParams, rng: &mut ChaCha8Rng, scale: f64) {
    for (name, t) in params.iter_mut() {
        if name.contains(".head.") {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }
}

fn sample_pair() -> (Vec<f64>, BinaryMask) {
    let ds = generate(&TaskSpec::default(), 1, 3).unwrap();
    let s = &ds.samples[0];
    (s.image_f64(), s.masks[0].clone())
}

#[test]
fn default_config_is_small() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    let n = NetworkParams::init(&cfg, 0).count();
    assert!(n <= 20_000, "{n}");
    assert!(NetworkParams::init(&toy_config(ModelKind::Spunet), 0).count() <= 2000);
}

#[test]
fn punet_mode_forces_alpha_zero() {
    let cfg = ModelConfig::new(ModelKind::Punet);
    assert_eq!(cfg.alpha, 0.0);
    assert_eq!(cfg.beta, 10.0);
    let bad = ModelConfig {
        alpha: 1.0,
        ..cfg.clone()
    };
    assert!(bad.validate().is_err());
    assert_eq!(bad.normalized().alpha, 0.0);
    let sp = ModelConfig::new(ModelKind::Spunet);
    assert_eq!((sp.alpha, sp.beta), (10.0, 10.0));
}

#[test]
fn zero_init_prior_is_standard_normal() {
    let cfg = ModelConfig::default();
    let params = NetworkParams::init(&cfg, 1);
    let (x, y) = sample_pair();
    let prior = prior_density(&params, &cfg, &x).unwrap();
    assert_eq!(prior.mean, vec![0.0; 4]);
    assert_eq!(prior.log_std, vec![0.0; 4]);
    assert_eq!(prior, prior_density(&params, &cfg, &x).unwrap());
    let post = posterior_density(&params, &cfg, &x, &y).unwrap();
    assert_eq!(kl_divergence(&post, &prior).unwrap(), 0.0);
}

#[test]
fn posterior_depends_on_the_mask() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = NetworkParams::init(&cfg, 2);
    perturb_heads(&mut params, &mut rng, 0.5);
    let (x, y) = sample_pair();
    let zeros = BinaryMask::empty(32, 32);
    let ones = BinaryMask::new(32, 32, vec![true; 1024]).unwrap();
    let a = posterior_density(&params, &cfg, &x, &zeros).unwrap();
    let b = posterior_density(&params, &cfg, &x, &ones).unwrap();
    assert_ne!(a.mean, b.mean);
    assert_eq!(
        posterior_density(&params, &cfg, &x, &y).unwrap(),
        posterior_density(&params, &cfg, &x, &y).unwrap()
    );
}

#[test]
fn decoder_is_deterministic_and_continuous() {
    let cfg = ModelConfig::default();
    let params = NetworkParams::init(&cfg, 3);
    let (x, _) = sample_pair();
    let z1 = vec![0.1, -0.2, 0.3, 0.05];
    let a = decode(&params, &cfg, &x, &z1).unwrap();
    assert_eq!(a, decode(&params, &cfg, &x, &z1).unwrap());
    assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
    let dz = 1e-4;
    let z2: Vec<f64> = z1.iter().map(|v| v + dz).collect();
    let b = decode(&params, &cfg, &x, &z2).unwrap();
    let norm = dz * 2.0;
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-3 * norm.max(1.0), "{diff}");
    assert!(decode(&params, &cfg, &x, &[0.0; 3]).is_err());
}

#[test]
fn reconstruction_floor_and_monotonicity() {
    let y = [1.0, 0.0, 1.0, 0.0];
    let bce = |logits: [f64; 4]| {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![1, 2, 2], logits.to_vec()).unwrap()).unwrap();
        let v = graph_bce(&mut g, l, &y).unwrap();
        g.value(v).item().unwrap()
    };
    let floor = (1.0 + (-LOGIT_CLAMP).exp()).ln();
    assert!((bce([10.0, -10.0, 10.0, -10.0]) - floor).abs() < 1e-15);
    let start = [-3.0, 2.0, 0.5, 1.0];
    let target = [10.0, -10.0, 10.0, -10.0];
    let mut prev = f64::INFINITY;
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let l = std::array::from_fn(|i| start[i] + t * (target[i] - start[i]));
        let v = bce(l);
        assert!(v <= prev + 1e-15);
        prev = v;
    }
}

fn eval_loss(
    cfg: &ModelConfig,
    params: &NetworkParams,
    x: &[f64],
    y: &BinaryMask,
    noise: &LossNoise,
    f: fn(&mut Graph, &Bound, &ModelConfig, &[f64], &BinaryMask, &LossNoise) -> spunet::Result<LossTerms>,
) -> (f64, LossTerms) {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, true).unwrap();
    let t = f(&mut g, &p, cfg, x, y, noise).unwrap();
    (g.value(t.total).item().unwrap(), t)
}

#[test]
fn loss_reduction_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = ModelConfig::default();
    let mut params = NetworkParams::init(&cfg, 4);
    perturb_heads(&mut params, &mut rng, 0.3);
    let (x, y) = sample_pair();
    let noise = LossNoise::draw(&cfg, &mut rng);

    let zero_alpha = ModelConfig {
        alpha: 0.0,
        ..cfg.clone()
    };
    let (sp, _) = eval_loss(&zero_alpha, &params, &x, &y, &noise, spunet_loss);
    let (pu, _) = eval_loss(&cfg, &params, &x, &y, &noise, punet_loss);
    assert!((sp - pu).abs() <= 1e-12);

    let zero_beta = ModelConfig {
        beta: 0.0,
        ..cfg.clone()
    };
    let (total, terms) = eval_loss(&zero_beta, &params, &x, &y, &noise, punet_loss);
    assert_eq!(total, terms.recon);

    let (total, terms) = eval_loss(&cfg, &params, &x, &y, &noise, spunet_loss);
    let expect = terms.recon + cfg.beta * terms.kl + cfg.alpha * terms.sinkhorn;
    assert!((total - expect).abs() < 1e-12);
    assert!(terms.kl > 0.0 && terms.sinkhorn > 0.0);
}

#[test]
fn identical_densities_with_paired_noise_give_zero_penalties() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = ModelConfig::default();
    let params = NetworkParams::init(&cfg, 5);
    let (x, y) = sample_pair();
    let mut noise = LossNoise::draw(&cfg, &mut rng);
    noise.prior_cloud = noise.posterior_cloud.clone();
    let (_, terms) = eval_loss(&cfg, &params, &x, &y, &noise, spunet_loss);
    assert_eq!(terms.kl, 0.0);
    assert_eq!(terms.sinkhorn, 0.0);
}

fn check_loss_gradient(mode: ModelKind) {
    let cfg = toy_config(mode);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut params = NetworkParams::init(&cfg, 6);
    perturb_heads(&mut params, &mut rng, 0.3);
    // Zero biases put dead ReLU inputs exactly on the kink.
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") && !name.contains(".head.") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    let x = random_image(&mut rng, 8);
    let y = random_mask(&mut rng, 8);
    let noise = LossNoise::draw(&cfg, &mut rng);
    let names = params.names();
    let point: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let f = |g: &mut Graph, vars: &[spunet::autodiff::Var]| {
        let p = Bound::from_vars(&names, vars)?;
        Ok(loss(g, &p, &cfg, &x, &y, &noise)?.total)
    };
    let report = gradcheck(f, &point, 1e-5, 1e-3);
    assert!(report.passed, "{mode}: {report:?}");
    assert!(report.checked <= 2000);
}

#[test]
fn punet_loss_gradcheck() {
    check_loss_gradient(ModelKind::Punet);
}

#[test]
fn spunet_loss_gradcheck() {
    check_loss_gradient(ModelKind::Spunet);
}

#[test]
fn prediction_contracts() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = NetworkParams::init(&cfg, 7);
    perturb_heads(&mut params, &mut rng, 0.5);
    let (x, _) = sample_pair();
    let a = predict(&params, &cfg, &x, 16, 3).unwrap();
    assert_eq!(a.len(), 16);
    assert_eq!(a, predict(&params, &cfg, &x, 16, 3).unwrap());

    let head_b = params.get_mut("prior.head.b").unwrap();
    for (i, v) in head_b.data_mut().iter_mut().enumerate() {
        *v = if i < 4 { 0.0 } else { -100.0 };
    }
    let w = params.get_mut("prior.head.w").unwrap();
    w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let prior = prior_density(&params, &cfg, &x).unwrap();
    assert_eq!(prior.log_std, vec![-8.0; 4]);
    let masks = predict(&params, &cfg, &x, 8, 4).unwrap();
    assert!(masks.windows(2).all(|w| w[0] == w[1]));
}
