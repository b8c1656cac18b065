//! Loss identities, independent oracles and finite-difference gradient
//! verification (including the double-backward gradient-penalty path).

use cranio_autodiff::{Graph, NodeId};
use cranio_model::losses::*;
use cranio_model::nets::GaussianPosterior;
use cranio_model::Result;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_array(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn random_binary(shape: &[usize], seed: u64) -> ArrayD<f64> {
    random_array(shape, seed, 0.0, 1.0).mapv(|v| (v > 0.5) as u8 as f64)
}

/// Critic with unit-norm linear weights: its input gradient is exactly `w`.
fn unit_linear_critic(w: ArrayD<f64>) -> impl FnMut(&mut Graph<f64>, NodeId) -> Result<NodeId> {
    move |g, x| {
        let shape = g.shape(x);
        let n = shape[0];
        let v: usize = shape[1..].iter().product();
        let flat = g.reshape(x, &[n, v]);
        let wn = g.leaf(w.clone());
        Ok(g.matmul(flat, wn))
    }
}

/// A tiny two-layer critic for 4^3 two-channel inputs.
struct TinyCritic {
    conv_w: ArrayD<f64>,
    fc_w: ArrayD<f64>,
    fc_b: ArrayD<f64>,
}

impl TinyCritic {
    fn new(seed: u64) -> Self {
        Self {
            conv_w: random_array(&[3, 2, 4, 4, 4], seed, -0.2, 0.2),
            fc_w: random_array(&[3 * 8, 1], seed + 1, -0.3, 0.3),
            fc_b: random_array(&[1, 1], seed + 2, -0.1, 0.1),
        }
    }

    fn forward(
        &self,
        g: &mut Graph<f64>,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId> {
        let n = g.shape(x)[0];
        let cf = g.permute(x, &[0, 4, 1, 2, 3]); // channel-last to channel-first
        let h = g.conv3d(cf, params[0], 2, 1); // [n, 3, 2, 2, 2]
        let h = g.sigmoid(h);
        let flat = g.reshape(h, &[n, 24]);
        let s = g.matmul(flat, params[1]);
        let b = g.broadcast_to(params[2], &[n, 1]);
        Ok(g.add(s, b))
    }
}

#[test]
fn unit_gradient_linear_critic_has_zero_penalty() {
    let v = 2 * 64; // two channels of 4^3
    let mut w = random_array(&[v, 1], 1, -1.0, 1.0);
    let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.mapv_inplace(|x| x / norm);

    let real = random_binary(&[3, 4, 4, 4, 2], 2);
    let fake = random_array(&[3, 4, 4, 4, 2], 3, 0.0, 1.0);
    let eps = [0.3, 0.6, 0.9];
    let mut g = Graph::new();
    let mut critic = unit_linear_critic(w);
    let p = gradient_penalty(&mut g, &mut critic, &real, &fake, &eps).unwrap();
    assert!(g.scalar_value(p).abs() < 1e-6, "penalty {}", g.scalar_value(p));
}

#[test]
fn constant_critic_has_unit_penalty() {
    let mut critic = |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> {
        let n = g.shape(x)[0];
        Ok(g.leaf(ArrayD::from_elem(IxDyn(&[n, 1]), 4.2)))
    };
    let real = random_binary(&[2, 4, 4, 4, 2], 4);
    let fake = random_array(&[2, 4, 4, 4, 2], 5, 0.0, 1.0);
    let mut g = Graph::new();
    // the norm stabilizer shifts a zero gradient to 1e-6, hence the tolerance
    let p = gradient_penalty(&mut g, &mut critic, &real, &fake, &[0.5, 0.5]).unwrap();
    assert!((g.scalar_value(p) - 1.0).abs() < 1e-5);
}

#[test]
fn penalty_gradient_norm_matches_finite_differences() {
    // the input gradient computed inside the penalty must match central
    // differences of the critic score
    let tc = TinyCritic::new(6);
    let x0 = random_array(&[2, 4, 4, 4, 2], 7, 0.1, 0.9);

    let eval = |x: &ArrayD<f64>| -> f64 {
        let mut g = Graph::new();
        let params = [
            g.leaf(tc.conv_w.clone()),
            g.leaf(tc.fc_w.clone()),
            g.leaf(tc.fc_b.clone()),
        ];
        let xn = g.leaf(x.clone());
        let s = tc.forward(&mut g, &params, xn).unwrap();
        let t = g.sum_all(s);
        g.scalar_value(t)
    };

    let mut g = Graph::new();
    let params = [
        g.leaf(tc.conv_w.clone()),
        g.leaf(tc.fc_w.clone()),
        g.leaf(tc.fc_b.clone()),
    ];
    let xn = g.leaf(x0.clone());
    let s = tc.forward(&mut g, &params, xn).unwrap();
    let t = g.sum_all(s);
    let gx = g.grad(t, &[xn])[0].unwrap();
    let analytic = g.value(gx).clone();

    let h = 1e-5;
    for flat in (0..x0.len()).step_by(7) {
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        plus.as_slice_mut().unwrap()[flat] += h;
        minus.as_slice_mut().unwrap()[flat] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[flat];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
        assert!(rel < 1e-3, "voxel {flat}: {a} vs {fd}");
    }
}

#[test]
fn critic_loss_identities() {
    let cfg0 = WganGpConfig {
        lambda_gp: 0.0,
        critic_iters_per_gen: 5,
    };
    let real = random_binary(&[3, 4, 4, 4, 2], 8);
    let eps = [0.1, 0.5, 0.9];

    // fake = real with lambda 0 -> 0
    let tc = TinyCritic::new(9);
    let mut g = Graph::new();
    let params = [
        g.leaf(tc.conv_w.clone()),
        g.leaf(tc.fc_w.clone()),
        g.leaf(tc.fc_b.clone()),
    ];
    let mut critic =
        |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> { tc.forward(g, &params, x) };
    let parts = critic_loss(&mut g, &mut critic, &real, &real, &eps, &cfg0).unwrap();
    assert!(g.scalar_value(parts.total).abs() < 1e-12);

    // constant critic with lambda 0 -> 0
    let mut constant = |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> {
        let n = g.shape(x)[0];
        Ok(g.leaf(ArrayD::from_elem(IxDyn(&[n, 1]), -3.0)))
    };
    let fake = random_array(&[3, 4, 4, 4, 2], 10, 0.0, 1.0);
    let mut g = Graph::new();
    let parts = critic_loss(&mut g, &mut constant, &real, &fake, &eps, &cfg0).unwrap();
    assert!(g.scalar_value(parts.total).abs() < 1e-12);
}

#[test]
fn critic_loss_equals_sum_of_its_terms() {
    let cfg = WganGpConfig::default();
    let tc = TinyCritic::new(11);
    let real = random_binary(&[2, 4, 4, 4, 2], 12);
    let fake = random_array(&[2, 4, 4, 4, 2], 13, 0.0, 1.0);
    let eps = [0.25, 0.75];

    let mut g = Graph::new();
    let params = [
        g.leaf(tc.conv_w.clone()),
        g.leaf(tc.fc_w.clone()),
        g.leaf(tc.fc_b.clone()),
    ];
    let mut critic =
        |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> { tc.forward(g, &params, x) };
    let parts = critic_loss(&mut g, &mut critic, &real, &fake, &eps, &cfg).unwrap();
    let total = g.scalar_value(parts.total);

    // independent term-wise recomputation
    let mean_score = |x: &ArrayD<f64>| -> f64 {
        let mut g = Graph::new();
        let params = [
            g.leaf(tc.conv_w.clone()),
            g.leaf(tc.fc_w.clone()),
            g.leaf(tc.fc_b.clone()),
        ];
        let xn = g.leaf(x.clone());
        let s = tc.forward(&mut g, &params, xn).unwrap();
        let m = g.mean_all(s);
        g.scalar_value(m)
    };
    let mut g2 = Graph::new();
    let params2 = [
        g2.leaf(tc.conv_w.clone()),
        g2.leaf(tc.fc_w.clone()),
        g2.leaf(tc.fc_b.clone()),
    ];
    let mut critic2 =
        |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> { tc.forward(g, &params2, x) };
    let gp = gradient_penalty(&mut g2, &mut critic2, &real, &fake, &eps).unwrap();
    let expect = mean_score(&fake) - mean_score(&real) + cfg.lambda_gp * g2.scalar_value(gp);
    assert!(
        (total - expect).abs() < 1e-9,
        "total {total} vs recomputed {expect}"
    );
    // antisymmetry under swapping real/fake at lambda 0
    let cfg0 = WganGpConfig {
        lambda_gp: 0.0,
        ..cfg
    };
    let mut ga = Graph::new();
    let pa = [
        ga.leaf(tc.conv_w.clone()),
        ga.leaf(tc.fc_w.clone()),
        ga.leaf(tc.fc_b.clone()),
    ];
    let mut ca = |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> { tc.forward(g, &pa, x) };
    let fwd = critic_loss(&mut ga, &mut ca, &real, &fake, &eps, &cfg0).unwrap();
    let rev = critic_loss(&mut ga, &mut ca, &fake, &real, &eps, &cfg0).unwrap();
    assert!(
        (ga.scalar_value(fwd.total) + ga.scalar_value(rev.total)).abs() < 1e-12,
        "not antisymmetric"
    );
}

#[test]
fn generator_loss_identities_and_gradient() {
    let fake_val = random_array(&[3, 4, 4, 4, 2], 14, 0.0, 1.0);

    // critic identically zero -> 0
    let mut zero = |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> {
        let n = g.shape(x)[0];
        Ok(g.leaf(ArrayD::zeros(IxDyn(&[n, 1]))))
    };
    let mut g = Graph::new();
    let fake = g.leaf(fake_val.clone());
    let l = generator_wgan_loss(&mut g, &mut zero, fake).unwrap();
    assert_eq!(g.scalar_value(l), 0.0);

    // critic identically c -> -c
    let mut constc = |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> {
        let n = g.shape(x)[0];
        Ok(g.leaf(ArrayD::from_elem(IxDyn(&[n, 1]), 1.7)))
    };
    let mut g = Graph::new();
    let fake = g.leaf(fake_val.clone());
    let l = generator_wgan_loss(&mut g, &mut constc, fake).unwrap();
    assert!((g.scalar_value(l) + 1.7).abs() < 1e-12);

    // gradient with respect to the fake voxels matches finite differences
    let tc = TinyCritic::new(15);
    let max_rel = finite_difference_check(
        |g, ids| {
            let params = [
                g.leaf(tc.conv_w.clone()),
                g.leaf(tc.fc_w.clone()),
                g.leaf(tc.fc_b.clone()),
            ];
            let mut critic =
                |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> { tc.forward(g, &params, x) };
            generator_wgan_loss(g, &mut critic, ids[0])
        },
        &[fake_val],
        60,
        1e-4,
        16,
    )
    .unwrap();
    assert!(max_rel < 1e-3, "max relative error {max_rel}");
}

#[test]
fn kl_closed_form_identities() {
    let mut g: Graph<f64> = Graph::new();
    let zeros = g.leaf(ArrayD::zeros(IxDyn(&[2, 5])));
    let p0 = GaussianPosterior {
        mu: zeros,
        log_var: zeros,
    };
    let kl = kl_standard_normal(&mut g, &p0);
    assert_eq!(g.scalar_value(kl), 0.0);

    // mu = (1, 0, ..., 0), log_var = 0 -> 0.5
    let mut mu = ArrayD::zeros(IxDyn(&[1, 5]));
    mu[[0, 0]] = 1.0;
    let mu = g.leaf(mu);
    let lv = g.leaf(ArrayD::zeros(IxDyn(&[1, 5])));
    let kl = kl_standard_normal(&mut g, &GaussianPosterior { mu, log_var: lv });
    assert!((g.scalar_value(kl) - 0.5).abs() < 1e-12);
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    // KL(q||p) = E_q[ln q(z) - ln p(z)], estimated from 1e5 draws
    let dim = 6;
    let mu = random_array(&[1, dim], 17, -0.8, 0.8);
    let lv = random_array(&[1, dim], 18, -0.7, 0.7);
    let mut g: Graph<f64> = Graph::new();
    let mu_n = g.leaf(mu.clone());
    let lv_n = g.leaf(lv.clone());
    let kl = kl_standard_normal(&mut g, &GaussianPosterior { mu: mu_n, log_var: lv_n });
    let closed = g.scalar_value(kl);

    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let draws = 100_000;
    let mut acc = 0.0f64;
    for _ in 0..draws {
        let mut lq = 0.0;
        let mut lp = 0.0;
        for d in 0..dim {
            let m = mu[[0, d]];
            let var = lv[[0, d]].exp();
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let n01 = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            let z = m + var.sqrt() * n01;
            lq += -0.5 * ((z - m) * (z - m) / var + var.ln());
            lp += -0.5 * z * z;
        }
        acc += lq - lp;
    }
    let mc = acc / draws as f64;
    assert!(
        (mc - closed).abs() / closed.abs() < 0.01,
        "monte carlo {mc} vs closed form {closed}"
    );
}

#[test]
fn kl_is_nonnegative_and_zero_only_at_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..50 {
        let mu = random_array(&[2, 4], rng.gen(), -2.0, 2.0);
        let lv = random_array(&[2, 4], rng.gen(), -2.0, 2.0);
        let mut g = Graph::new();
        let mu_n = g.leaf(mu);
        let lv_n = g.leaf(lv);
        let kl = kl_standard_normal(&mut g, &GaussianPosterior { mu: mu_n, log_var: lv_n });
        assert!(g.scalar_value(kl) >= 0.0);
    }
}

#[test]
fn reconstruction_loss_identities_and_oracle() {
    let shape = [2usize, 4, 4, 4, 2];
    let voxels: usize = shape[1..].iter().product();
    let x = random_binary(&shape, 21);

    // perfect reconstruction (post-clamp) is near zero
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let rec = g.leaf(x.clone());
    let l = reconstruction_loss(&mut g, xn, rec).unwrap();
    assert!(g.scalar_value(l) <= voxels as f64 * 1e-5);

    // x_rec = 0.5 everywhere -> V * ln 2
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let half = g.leaf(ArrayD::from_elem(IxDyn(&shape), 0.5));
    let l = reconstruction_loss(&mut g, xn, half).unwrap();
    let expect = voxels as f64 * std::f64::consts::LN_2;
    assert!((g.scalar_value(l) - expect).abs() / expect < 1e-12);

    // random pair against a scalar-loop oracle
    let rec_val = random_array(&shape, 22, 0.001, 0.999);
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let rn = g.leaf(rec_val.clone());
    let l = reconstruction_loss(&mut g, xn, rn).unwrap();
    let mut oracle = 0.0f64;
    for (xv, pv) in x.iter().zip(rec_val.iter()) {
        let p = pv.clamp(1e-6, 1.0 - 1e-6);
        oracle -= xv * p.ln() + (1.0 - xv) * (1.0 - p).ln();
    }
    oracle /= shape[0] as f64;
    let got = g.scalar_value(l);
    assert!((got - oracle).abs() / oracle < 1e-6, "{got} vs {oracle}");
}

fn make_posterior(g: &mut Graph<f64>, mu: ArrayD<f64>, lv: ArrayD<f64>) -> GaussianPosterior {
    GaussianPosterior {
        mu: g.leaf(mu),
        log_var: g.leaf(lv),
    }
}

#[test]
fn introvae_encoder_hinges_saturate_and_alpha_zero_is_elbo() {
    let cfg = IntroVaeConfig::default();
    let shape = [2usize, 4, 4, 4, 2];
    let x_val = random_binary(&shape, 23);
    let rec_val = random_array(&shape, 24, 0.05, 0.95);

    // adversarial KLs far above the margin: hinge terms vanish
    let mut g = Graph::new();
    let real = make_posterior(
        &mut g,
        random_array(&[2, 6], 25, -0.5, 0.5),
        random_array(&[2, 6], 26, -0.5, 0.5),
    );
    let big = make_posterior(
        &mut g,
        ArrayD::from_elem(IxDyn(&[2, 6]), 4.0), // KL = 0.5*6*16 = 48 >> m
        ArrayD::zeros(IxDyn(&[2, 6])),
    );
    let x = g.leaf(x_val.clone());
    let xr = g.leaf(rec_val.clone());
    let parts = introvae_encoder_loss(&mut g, &real, &big, &big, x, xr, &cfg).unwrap();
    assert!(g.scalar_value(parts.adv_kl_rec) >= cfg.margin);
    assert_eq!(g.scalar_value(parts.hinge_rec), 0.0);
    assert_eq!(g.scalar_value(parts.hinge_sampled), 0.0);
    let expect =
        g.scalar_value(parts.kl_real) + cfg.beta * g.scalar_value(parts.recon);
    assert!((g.scalar_value(parts.total) - expect).abs() < 1e-9);

    // alpha = 0 reduces exactly to the ELBO objective
    let cfg0 = IntroVaeConfig {
        alpha: 0.0,
        ..cfg
    };
    let mut g = Graph::new();
    let real = make_posterior(
        &mut g,
        random_array(&[2, 6], 27, -0.5, 0.5),
        random_array(&[2, 6], 28, -0.5, 0.5),
    );
    let small = make_posterior(
        &mut g,
        random_array(&[2, 6], 29, -0.2, 0.2),
        random_array(&[2, 6], 30, -0.2, 0.2),
    );
    let x = g.leaf(x_val.clone());
    let xr = g.leaf(rec_val.clone());
    let parts = introvae_encoder_loss(&mut g, &real, &small, &small, x, xr, &cfg0).unwrap();
    let kl = kl_standard_normal(&mut g, &real);
    let x2 = g.leaf(x_val.clone());
    let xr2 = g.leaf(rec_val.clone());
    let recon = reconstruction_loss(&mut g, x2, xr2).unwrap();
    let elbo = g.scalar_value(kl) + cfg.beta * g.scalar_value(recon);
    assert!((g.scalar_value(parts.total) - elbo).abs() < 1e-6 * elbo.abs().max(1.0));
}

#[test]
fn introvae_encoder_total_matches_termwise_oracle() {
    let cfg = IntroVaeConfig {
        alpha: 0.4,
        beta: 1.3,
        margin: 2.0,
    };
    let shape = [2usize, 4, 4, 4, 2];
    let mut g = Graph::new();
    let real = make_posterior(
        &mut g,
        random_array(&[2, 6], 31, -1.0, 1.0),
        random_array(&[2, 6], 32, -1.0, 1.0),
    );
    let rec = make_posterior(
        &mut g,
        random_array(&[2, 6], 33, -1.0, 1.0),
        random_array(&[2, 6], 34, -1.0, 1.0),
    );
    let sampled = make_posterior(
        &mut g,
        random_array(&[2, 6], 35, -1.0, 1.0),
        random_array(&[2, 6], 36, -1.0, 1.0),
    );
    let x = g.leaf(random_binary(&shape, 37));
    let xr = g.leaf(random_array(&shape, 38, 0.05, 0.95));
    let parts = introvae_encoder_loss(&mut g, &real, &rec, &sampled, x, xr, &cfg).unwrap();
    let oracle = g.scalar_value(parts.kl_real)
        + cfg.alpha
            * ((cfg.margin - g.scalar_value(parts.adv_kl_rec)).max(0.0)
                + (cfg.margin - g.scalar_value(parts.adv_kl_sampled)).max(0.0))
        + cfg.beta * g.scalar_value(parts.recon);
    let got = g.scalar_value(parts.total);
    assert!((got - oracle).abs() / oracle.abs().max(1.0) < 1e-6);
}

#[test]
fn introvae_generator_loss_identities_and_gradient_path() {
    let cfg = IntroVaeConfig::default();
    let shape = [2usize, 4, 4, 4, 2];
    let x_val = random_binary(&shape, 39);

    // alpha = 0 leaves only the weighted reconstruction
    let cfg0 = IntroVaeConfig {
        alpha: 0.0,
        ..cfg
    };
    let mut g = Graph::new();
    let rec = make_posterior(
        &mut g,
        random_array(&[2, 6], 40, -1.0, 1.0),
        random_array(&[2, 6], 41, -1.0, 1.0),
    );
    let x = g.leaf(x_val.clone());
    let xr = g.leaf(random_array(&shape, 42, 0.05, 0.95));
    let parts = introvae_generator_loss(&mut g, &rec, &rec, x, xr, &cfg0).unwrap();
    let expect = cfg.beta * g.scalar_value(parts.recon);
    assert!((g.scalar_value(parts.total) - expect).abs() < 1e-12);

    // exact standard-normal posteriors zero the adversarial term
    let mut g = Graph::new();
    let std = make_posterior(&mut g, ArrayD::zeros(IxDyn(&[2, 6])), ArrayD::zeros(IxDyn(&[2, 6])));
    let x = g.leaf(x_val.clone());
    let xr = g.leaf(random_array(&shape, 43, 0.05, 0.95));
    let parts = introvae_generator_loss(&mut g, &std, &std, x, xr, &cfg).unwrap();
    assert_eq!(g.scalar_value(parts.adv_kl_rec), 0.0);
    assert_eq!(g.scalar_value(parts.adv_kl_sampled), 0.0);

    // gradient flows through z_s into the generator weights
    let mut g = Graph::new();
    let dec_w = g.leaf(random_array(&[4, 8], 44, -0.5, 0.5));
    let enc_w = g.leaf(random_array(&[8, 6], 45, -0.5, 0.5));
    let z_p = g.leaf(random_array(&[2, 4], 46, -1.0, 1.0));
    let raw = g.matmul(z_p, dec_w); // tiny generator
    let x_p = g.sigmoid(raw);
    let mu = g.matmul(x_p, enc_w); // tiny encoder head
    let lv = g.leaf(ArrayD::zeros(IxDyn(&[2, 6])));
    let post = GaussianPosterior { mu, log_var: lv };
    let kl = kl_standard_normal(&mut g, &post);
    let grads = g.grad(kl, &[dec_w]);
    let gw = grads[0].expect("gradient must reach the generator weights");
    assert!(g.value(gw).iter().any(|&v| v != 0.0));
}

#[test]
fn dice_loss_identities_and_oracle() {
    let shape = [2usize, 4, 4, 4, 1];
    let cfg = DiceLossConfig { epsilon: 1e-7 };
    let target = random_binary(&shape, 47);
    assert!(target.iter().any(|&v| v == 1.0));

    // perfect overlap with epsilon -> 0 limit
    let mut g = Graph::new();
    let p = g.leaf(target.clone());
    let t = g.leaf(target.clone());
    let l = dice_loss(&mut g, p, t, &cfg).unwrap();
    assert!(g.scalar_value(l).abs() < 1e-6);

    // empty prediction vs nonempty target -> close to 1
    let mut g = Graph::new();
    let p = g.leaf(ArrayD::zeros(IxDyn(&shape)));
    let t = g.leaf(target.clone());
    let l = dice_loss(&mut g, p, t, &DiceLossConfig::default()).unwrap();
    let per_sample: Vec<f64> = (0..2)
        .map(|i| {
            let tsum: f64 = target.index_axis(ndarray::Axis(0), i).sum();
            1.0 - 1.0 / (tsum + 1.0) * 0.0 // soft dice with zero intersection
        })
        .collect();
    let expect = per_sample.iter().sum::<f64>() / 2.0;
    assert!((g.scalar_value(l) - expect).abs() < 1e-9);

    // random pair against the scalar-loop oracle
    let pred = random_array(&shape, 48, 0.0, 1.0);
    let mut g = Graph::new();
    let p = g.leaf(pred.clone());
    let t = g.leaf(target.clone());
    let l = dice_loss(&mut g, p, t, &DiceLossConfig::default()).unwrap();
    let mut oracle = 0.0;
    for i in 0..2 {
        let pv = pred.index_axis(ndarray::Axis(0), i);
        let tv = target.index_axis(ndarray::Axis(0), i);
        let inter: f64 = pv.iter().zip(tv.iter()).map(|(a, b)| a * b).sum();
        let sums: f64 = pv.sum() + tv.sum();
        oracle += 1.0 - 2.0 * inter / (sums + 1.0);
    }
    oracle /= 2.0;
    let got = g.scalar_value(l);
    assert!((got - oracle).abs() / oracle.max(1e-12) < 1e-6);
}

#[test]
fn dice_loss_decreases_as_overlap_grows() {
    // moving prediction mass onto the target lowers the loss
    let shape = [1usize, 4, 4, 4, 1];
    let target = random_binary(&shape, 49);
    let cfg = DiceLossConfig::default();
    let mut previous = f64::INFINITY;
    for mix in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let pred = target.mapv(|t| mix * t + (1.0 - mix) * 0.5);
        let mut g = Graph::new();
        let p = g.leaf(pred);
        let t = g.leaf(target.clone());
        let l = dice_loss(&mut g, p, t, &cfg).unwrap();
        let v = g.scalar_value(l);
        assert!(v < previous, "mix {mix}: {v} !< {previous}");
        previous = v;
    }
}

#[test]
fn hinge_term_is_monotone_in_the_adversarial_kl() {
    let cfg = IntroVaeConfig::default();
    let shape = [1usize, 2, 2, 2, 1];
    let x_val = random_binary(&shape, 50);
    let rec_val = random_array(&shape, 51, 0.1, 0.9);
    let mut previous = f64::INFINITY;
    for scale in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let mut g = Graph::new();
        let real = make_posterior(&mut g, ArrayD::zeros(IxDyn(&[1, 4])), ArrayD::zeros(IxDyn(&[1, 4])));
        let adv = make_posterior(
            &mut g,
            ArrayD::from_elem(IxDyn(&[1, 4]), scale),
            ArrayD::zeros(IxDyn(&[1, 4])),
        );
        let x = g.leaf(x_val.clone());
        let xr = g.leaf(rec_val.clone());
        let parts = introvae_encoder_loss(&mut g, &real, &adv, &adv, x, xr, &cfg).unwrap();
        let hinge = g.scalar_value(parts.hinge_rec);
        assert!(hinge <= previous + 1e-12);
        if g.scalar_value(parts.adv_kl_rec) >= cfg.margin {
            assert_eq!(hinge, 0.0);
        }
        previous = hinge;
    }
}

#[test]
fn finite_difference_harness_on_quadratic_is_exact() {
    // L = sum(3 x^2) has third derivative zero: central differences are exact
    let x = random_array(&[10], 52, 0.5, 1.5);
    let max_rel = finite_difference_check(
        |g, ids| {
            let sq = g.square(ids[0]);
            let s = g.mul_scalar(sq, 3.0);
            Ok(g.sum_all(s))
        },
        &[x],
        10,
        1e-4,
        53,
    )
    .unwrap();
    assert!(max_rel < 1e-8, "max relative error {max_rel}");
}

#[test]
fn finite_difference_harness_on_dice_and_double_backward_critic_loss() {
    // dice loss through a small sigmoid map
    let w = random_array(&[8, 8], 54, -0.5, 0.5);
    let x = random_array(&[2, 8], 55, -1.0, 1.0);
    let t = random_binary(&[2, 8], 56);
    let max_rel = finite_difference_check(
        |g, ids| {
            let xn = g.leaf(x.clone());
            let tn = g.leaf(t.clone());
            let h = g.matmul(xn, ids[0]);
            let p = g.sigmoid(h);
            dice_loss(g, p, tn, &DiceLossConfig::default())
        },
        &[w.clone()],
        50,
        1e-4,
        57,
    )
    .unwrap();
    assert!(max_rel < 1e-3, "dice: max relative error {max_rel}");

    // critic loss including the gradient penalty: double-backward path
    let tc = TinyCritic::new(58);
    let real = random_binary(&[2, 4, 4, 4, 2], 59);
    let fake = random_array(&[2, 4, 4, 4, 2], 60, 0.0, 1.0);
    let eps = [0.3, 0.8];
    let cfg = WganGpConfig {
        lambda_gp: 10.0,
        critic_iters_per_gen: 5,
    };
    let max_rel = finite_difference_check(
        |g, ids| {
            let ids = ids.to_vec();
            let mut critic = |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> {
                let n = g.shape(x)[0];
                let cf = g.permute(x, &[0, 4, 1, 2, 3]);
                let h = g.conv3d(cf, ids[0], 2, 1);
                let h = g.sigmoid(h);
                let flat = g.reshape(h, &[n, 24]);
                let s = g.matmul(flat, ids[1]);
                let b = g.broadcast_to(ids[2], &[n, 1]);
                Ok(g.add(s, b))
            };
            Ok(critic_loss(g, &mut critic, &real, &fake, &eps, &cfg)?.total)
        },
        &[tc.conv_w.clone(), tc.fc_w.clone(), tc.fc_b.clone()],
        60,
        1e-4,
        61,
    )
    .unwrap();
    assert!(max_rel < 1e-3, "critic+gp: max relative error {max_rel}");
}

#[test]
fn every_loss_is_finite_on_valid_inputs() {
    let shape = [2usize, 4, 4, 4, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    for _ in 0..20 {
        let mut g = Graph::new();
        let x = g.leaf(random_binary(&shape, rng.gen()));
        // raw, unsquashed reconstructions still yield finite losses
        let xr = g.leaf(random_array(&shape, rng.gen(), -3.0, 3.0));
        let l = reconstruction_loss(&mut g, x, xr).unwrap();
        assert!(g.scalar_value(l).is_finite());

        let post = make_posterior(
            &mut g,
            random_array(&[2, 4], rng.gen(), -10.0, 10.0),
            random_array(&[2, 4], rng.gen(), -10.0, 10.0),
        );
        let kl = kl_standard_normal(&mut g, &post);
        assert!(g.scalar_value(kl).is_finite());

        let p = g.leaf(random_array(&shape, rng.gen(), 0.0, 1.0));
        let t = g.leaf(random_binary(&shape, rng.gen()));
        let dl = dice_loss(&mut g, p, t, &DiceLossConfig::default()).unwrap();
        assert!(g.scalar_value(dl).is_finite());
    }
}
