use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::dvbf::{self, mix_transition, transition_step, TransitionBank, Triplet};
use super::*;
use crate::autodiff::check::{check_graph, fd_gradient};
use crate::distributions::{DiagGaussian, HALF_LN_2PI};
use crate::environments::{generate_sequences, EnvKind};

fn tiny_dvbf(m: usize) -> DvbfConfig {
    DvbfConfig {
        obs_dim: 9,
        ctrl_dim: 1,
        latent_dim: 2,
        noise_dim: 2,
        transitions: m,
        hidden: 5,
        alpha_hidden: 0,
        init_window: 3,
        initial_net: InitialNet::Mlp,
        emission_output: Activation::Identity,
        bayesian_bank: true,
    }
}

fn tiny_dkf() -> DkfConfig {
    DkfConfig {
        obs_dim: 4,
        ctrl_dim: 1,
        latent_dim: 2,
        rnn_hidden: 3,
        hidden: 3,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_data(cfg: &ModelConfig, rows: usize, t: usize, seed: u64) -> BTreeMap<String, Tensor> {
    let mut r = rng(seed);
    let obs = Tensor::randn(&[t * rows, cfg.obs_dim()], 0.5, &mut r);
    let ctrl = Tensor::randn(&[t * rows, cfg.ctrl_dim()], 1.0, &mut r);
    let noise = sample_noise(&cfg.noise_shapes(rows, t), &mut r);
    elbo_inputs(obs, ctrl, noise, 0.7, 0.25)
}

fn perturbed(params: &Params, std: f64, seed: u64) -> Params {
    let mut r = rng(seed);
    let mut p = params.clone();
    for (_, t) in p.iter_mut() {
        let n = Tensor::randn(t.shape(), std, &mut r);
        t.add_assign(&n);
    }
    p
}

fn bank_params(cfg: &DvbfConfig, blocks: &[Vec<f64>]) -> Params {
    let mut p = dvbf::init_params(cfg, &mut rng(0));
    let flat: Vec<f64> = blocks.iter().flatten().copied().collect();
    p.insert("bank.mean", Tensor::matrix(cfg.transitions, cfg.component_len(), flat));
    p
}

#[test]
fn single_component_mixture_is_exact() {
    let cfg = tiny_dvbf(1);
    let p = dvbf::init_params(&cfg, &mut rng(3));
    let bank = TransitionBank::new(&cfg, &p);
    let v = bank.sample(Some(&Tensor::randn(&[1, cfg.component_len()], 1.0, &mut rng(4)))).unwrap();
    let mixed = mix_transition(&[1.0], &bank, &v).unwrap();
    let direct = bank.triplet(&v, 0);
    for (a, b) in [(&mixed.a, &direct.a), (&mixed.b, &direct.b), (&mixed.c, &direct.c)] {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn single_component_graph_weights_are_one() {
    let cfg = ModelConfig::Dvbf(tiny_dvbf(1));
    let params = perturbed(&cfg.init_params(&mut rng(1)), 0.3, 2);
    let g = cfg.build_elbo_graph(&params, 3, 4);
    let values = g.graph.forward(&(&random_data(&cfg, 3, 4, 5), &params)).unwrap();
    assert!(values.output("alpha").unwrap().data().iter().all(|&a| a == 1.0));
}

#[test]
fn opposite_components_cancel() {
    let cfg = DvbfConfig {
        ctrl_dim: 1,
        ..tiny_dvbf(2)
    };
    // Rows of [A | B | C] with A = I and A = -I, B = C = 0.
    let plus = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let minus: Vec<f64> = plus.iter().map(|x| -x).collect();
    let p = bank_params(&cfg, &[plus, minus]);
    let bank = TransitionBank::new(&cfg, &p);
    let v = bank.sample(None).unwrap();
    let mixed = mix_transition(&[0.5, 0.5], &bank, &v).unwrap();
    assert_eq!(mixed.a, Tensor::zeros(&[2, 2]));
}

#[test]
fn mixture_matches_naive_sum() {
    let cfg = DvbfConfig {
        latent_dim: 3,
        noise_dim: 3,
        ctrl_dim: 2,
        ..tiny_dvbf(4)
    };
    let p = dvbf::init_params(&cfg, &mut rng(9));
    let bank = TransitionBank::new(&cfg, &p);
    let mut r = rng(10);
    let v = bank.sample(Some(&Tensor::randn(&[4, cfg.component_len()], 1.0, &mut r))).unwrap();
    let raw: Vec<f64> = (0..4).map(|_| rand::Rng::random::<f64>(&mut r) + 0.1).collect();
    let total: f64 = raw.iter().sum();
    let alpha: Vec<f64> = raw.iter().map(|a| a / total).collect();
    let mixed = mix_transition(&alpha, &bank, &v).unwrap();
    let parts: Vec<Triplet> = (0..4).map(|i| bank.triplet(&v, i)).collect();
    let naive = |pick: fn(&Triplet) -> &Tensor| {
        let mut acc = pick(&parts[0]).map(|x| alpha[0] * x);
        for i in 1..4 {
            acc.add_assign(&pick(&parts[i]).map(|x| alpha[i] * x));
        }
        acc
    };
    assert!(mixed.a.max_abs_diff(&naive(|t| &t.a)) < 1e-12);
    assert!(mixed.b.max_abs_diff(&naive(|t| &t.b)) < 1e-12);
    assert!(mixed.c.max_abs_diff(&naive(|t| &t.c)) < 1e-12);
}

#[test]
fn off_simplex_weights_are_rejected() {
    let cfg = tiny_dvbf(2);
    let p = dvbf::init_params(&cfg, &mut rng(0));
    let bank = TransitionBank::new(&cfg, &p);
    let v = bank.sample(None).unwrap();
    assert!(mix_transition(&[0.5, 0.5 + 2e-6], &bank, &v).is_err());
    assert!(mix_transition(&[1.2, -0.2], &bank, &v).is_err());
    assert!(mix_transition(&[1.0], &bank, &v).is_err());
    assert!(mix_transition(&[0.5, 0.5 + 5e-7], &bank, &v).is_ok());
}

#[test]
fn transition_step_examples() {
    let eye = Tensor::eye(2);
    let zero_tr = Triplet {
        a: Tensor::zeros(&[2, 2]),
        b: Tensor::zeros(&[2, 1]),
        c: Tensor::zeros(&[2, 2]),
    };
    assert_eq!(transition_step(&[0.0, 0.0], &[0.0], &[0.0, 0.0], &zero_tr), vec![0.0, 0.0]);
    let tr = Triplet {
        a: eye.clone(),
        b: Tensor::zeros(&[2, 1]),
        c: eye,
    };
    assert_eq!(transition_step(&[0.5, -1.0], &[3.0], &[0.25, 2.0], &tr), vec![0.75, 1.0]);
}

#[test]
fn transition_jacobian_is_a() {
    let mut r = rng(21);
    let tr = Triplet {
        a: Tensor::randn(&[3, 3], 1.0, &mut r),
        b: Tensor::randn(&[3, 2], 1.0, &mut r),
        c: Tensor::randn(&[3, 3], 1.0, &mut r),
    };
    let z = Tensor::randn(&[3], 1.0, &mut r);
    let (u, w) = ([0.3, -0.2], [0.1, 0.4, -0.5]);
    for i in 0..3 {
        let row = fd_gradient(|zp| Ok(transition_step(zp.data(), &u, &w, &tr)[i]), &z, 1e-6).unwrap();
        for j in 0..3 {
            assert!((row.data()[j] - tr.a.get2(i, j)).abs() < 1e-8);
        }
    }
}

#[test]
fn untrained_recognition_is_standard_normal() {
    let cfg = tiny_dvbf(2);
    let p = dvbf::init_params(&cfg, &mut rng(2));
    let mut r = rng(3);
    let q = dvbf::infer_w(
        &cfg,
        &p,
        &Tensor::randn(&[4, 2], 1.0, &mut r),
        &Tensor::randn(&[4, 9], 1.0, &mut r),
        &Tensor::randn(&[4, 1], 1.0, &mut r),
    )
    .unwrap();
    assert!(q.mean.data().iter().all(|&m| m == 0.0));
    assert!(q.std.data().iter().all(|&s| s == 1.0));
}

#[test]
fn recognition_std_is_clamped() {
    let cfg = tiny_dvbf(2);
    let mut p = dvbf::init_params(&cfg, &mut rng(2));
    let b = p.get_mut("rec.out.b").unwrap();
    for (i, x) in b.data_mut().iter_mut().enumerate() {
        *x = if i % 2 == 0 { 50.0 } else { -50.0 };
    }
    let q = dvbf::infer_w(&cfg, &p, &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 9]), &Tensor::zeros(&[1, 1])).unwrap();
    for &s in q.std.data() {
        assert!((1e-5 * (1.0 - 1e-12)..=1e3 * (1.0 + 1e-12)).contains(&s));
    }
}

#[test]
fn recognition_mean_gradient_matches_fd() {
    let cfg = tiny_dvbf(2);
    let p = perturbed(&dvbf::init_params(&cfg, &mut rng(2)), 0.2, 7);
    let mut r = rng(8);
    let (z, x, u) = (
        Tensor::randn(&[2, 2], 1.0, &mut r),
        Tensor::randn(&[2, 9], 1.0, &mut r),
        Tensor::randn(&[2, 1], 1.0, &mut r),
    );
    let f = |w: &Tensor| -> crate::Result<f64> {
        let mut q = p.clone();
        q.insert("rec.out.w", w.clone());
        let d = dvbf::infer_w(&cfg, &q, &z, &x, &u)?;
        Ok(d.mean.data().iter().enumerate().map(|(i, m)| (i as f64 + 1.0) * m).sum())
    };
    let numeric = fd_gradient(f, p.get("rec.out.w").unwrap(), 1e-6).unwrap();

    let mut g = Graph::new();
    let nodes = ParamNodesForTest::new(&mut g, &p);
    let zn = g.input("z", &[2, 2]);
    let xn = g.input("x", &[2, 9]);
    let un = g.input("u", &[2, 1]);
    let h = {
        let a = g.matmul(zn, nodes.get("rec.l1.wz"));
        let b = g.matmul(xn, nodes.get("rec.l1.wx"));
        let c = g.matmul(un, nodes.get("rec.l1.wu"));
        let s = g.add(a, b);
        let s = g.add(s, c);
        let s = g.add_row(s, nodes.get("rec.l1.b"));
        g.relu(s)
    };
    let out = nodes.0.dense(&mut g, "rec.out", h, Activation::Identity);
    let mean = g.slice_cols(out, 0, 2);
    let weights = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let weighted = g.mul(mean, weights);
    let loss = g.sum(weighted);
    let mut data = BTreeMap::new();
    data.insert("z".to_string(), z.clone());
    data.insert("x".to_string(), x.clone());
    data.insert("u".to_string(), u.clone());
    let values = g.forward(&(&data, &p)).unwrap();
    let grads = g.backward(&values, loss).unwrap();
    let analytic = grads.get("rec.out.w").unwrap();
    assert!(analytic.max_abs_diff(&numeric) < 1e-7, "{}", analytic.max_abs_diff(&numeric));
}

struct ParamNodesForTest(nn::ParamNodes);

impl ParamNodesForTest {
    fn new(g: &mut Graph, p: &Params) -> Self {
        ParamNodesForTest(nn::ParamNodes::declare(g, p))
    }

    fn get(&self, name: &str) -> NodeId {
        self.0.get(name)
    }
}

#[test]
fn full_dvbf_bound_gradient_matches_fd() {
    let cfg = ModelConfig::Dvbf(tiny_dvbf(2));
    let params = perturbed(&cfg.init_params(&mut rng(11)), 0.1, 12);
    let g = cfg.build_elbo_graph(&params, 2, 3);
    let data = random_data(&cfg, 2, 3, 13);
    let report = check_graph(&g.graph, g.nodes.loss, params.as_map(), &data, 1e-6).unwrap();
    assert!(report.passes(1e-4, 1e-6), "{report:?}");
}

#[test]
fn full_dvbf_birnn_bound_gradient_matches_fd() {
    let cfg = ModelConfig::Dvbf(DvbfConfig {
        initial_net: InitialNet::BiRnn,
        alpha_hidden: 4,
        ..tiny_dvbf(2)
    });
    let params = perturbed(&cfg.init_params(&mut rng(14)), 0.1, 15);
    let g = cfg.build_elbo_graph(&params, 2, 3);
    let data = random_data(&cfg, 2, 3, 16);
    let report = check_graph(&g.graph, g.nodes.loss, params.as_map(), &data, 1e-6).unwrap();
    assert!(report.passes(1e-4, 1e-6), "{report:?}");
}

#[test]
fn full_dkf_bound_gradient_matches_fd() {
    let cfg = ModelConfig::Dkf(tiny_dkf());
    let params = perturbed(&cfg.init_params(&mut rng(17)), 0.1, 18);
    let g = cfg.build_elbo_graph(&params, 2, 3);
    let data = random_data(&cfg, 2, 3, 19);
    let report = check_graph(&g.graph, g.nodes.loss, params.as_map(), &data, 1e-6).unwrap();
    assert!(report.passes(1e-4, 1e-6), "{report:?}");
}

/// Appends `ln N(x_t; mean_t, 1)` for the last step to a bound graph.
fn last_step_recon(g: &mut ElboGraph) -> NodeId {
    let rows = g.rows;
    let start = (g.t - 1) * rows;
    let obs = g.graph.input_id("obs").unwrap();
    let x = g.graph.slice_rows(obs, start, rows);
    let m = g.graph.slice_rows(g.nodes.recon_mean, start, rows);
    let d = g.graph.sub(x, m);
    let sq = g.graph.square(d);
    let s = g.graph.sum(sq);
    g.graph.scale(s, -0.5)
}

#[test]
fn reconstruction_gradient_flows_through_transitions() {
    let cfg = ModelConfig::Dvbf(tiny_dvbf(2));
    let params = perturbed(&cfg.init_params(&mut rng(31)), 0.2, 32);
    let mut g = cfg.build_elbo_graph(&params, 2, 5);
    let target = last_step_recon(&mut g);
    let data = random_data(&cfg, 2, 5, 33);
    let values = g.graph.forward(&(&data, &params)).unwrap();
    let grads = g.graph.backward_wrt(&values, target, &["noise.w"]).unwrap();
    let gw = grads.get("noise.w").unwrap();
    // Block 1 is the process noise of the first transition.
    let first: f64 = (2..4).flat_map(|r| gw.row(r).to_vec()).map(f64::abs).sum();
    assert!(first > 1e-8, "{first}");
    let by_param = g.graph.backward(&values, target).unwrap();
    let rec = by_param.get("rec.out.w").unwrap();
    assert!(rec.sq_norm() > 0.0);
}

#[test]
fn dkf_reconstruction_does_not_see_the_transition() {
    let cfg = ModelConfig::Dkf(tiny_dkf());
    let params = perturbed(&cfg.init_params(&mut rng(41)), 0.2, 42);
    let mut g = cfg.build_elbo_graph(&params, 2, 5);
    let target = last_step_recon(&mut g);
    for name in ["trans.l1.w", "trans.l2.w", "trans.out.w"] {
        let p = g.graph.input_id(name).unwrap();
        assert!(!g.graph.depends_on(g.nodes.recon, p));
        assert!(g.graph.depends_on(g.nodes.kl_w, p));
    }
    let data = random_data(&cfg, 2, 5, 43);
    let values = g.graph.forward(&(&data, &params)).unwrap();
    let grads = g.graph.backward_wrt(&values, target, &["noise.z"]).unwrap();
    let gz = grads.get("noise.z").unwrap();
    // Only the last step's latent sample reaches the last reconstruction.
    for r in 0..8 {
        assert!(gz.row(r).iter().all(|&x| x == 0.0));
    }
    assert!(gz.row(8).iter().any(|&x| x != 0.0));

    let dv = ModelConfig::Dvbf(tiny_dvbf(2));
    let pv = dv.init_params(&mut rng(0));
    let gv = dv.build_elbo_graph(&pv, 2, 5);
    for name in ["bank.mean", "alpha.out.w"] {
        assert!(gv.graph.depends_on(gv.nodes.recon, gv.graph.input_id(name).unwrap()));
    }
}

#[test]
fn bound_is_deterministic_given_noise() {
    for cfg in [ModelConfig::Dvbf(tiny_dvbf(3)), ModelConfig::Dkf(tiny_dkf())] {
        let params = perturbed(&cfg.init_params(&mut rng(51)), 0.1, 52);
        let data = random_data(&cfg, 3, 4, 53);
        let a = cfg.build_elbo_graph(&params, 3, 4).evaluate(&params, &data).unwrap().0;
        let b = cfg.build_elbo_graph(&params, 3, 4).evaluate(&params, &data).unwrap().0;
        for (x, y) in [
            (a.recon, b.recon),
            (a.kl_w, b.kl_w),
            (a.kl_v, b.kl_v),
            (a.annealed_total, b.annealed_total),
        ] {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn bound_identity_at_unit_temperature() {
    for cfg in [ModelConfig::Dvbf(tiny_dvbf(3)), ModelConfig::Dkf(tiny_dkf())] {
        let params = perturbed(&cfg.init_params(&mut rng(61)), 0.1, 62);
        let mut data = random_data(&cfg, 3, 4, 63);
        data.insert("c".into(), Tensor::scalar(1.0));
        let g = cfg.build_elbo_graph(&params, 3, 4);
        let (comp, values) = g.evaluate(&params, &data).unwrap();
        assert!((comp.annealed_total - comp.bound()).abs() < 1e-8);
        assert!((values.scalar(g.nodes.bound) - comp.bound()).abs() < 1e-8);
    }
}

#[test]
fn temperature_outside_unit_interval_is_rejected() {
    let cfg = ModelConfig::Dvbf(tiny_dvbf(2));
    let params = cfg.init_params(&mut rng(0));
    let g = cfg.build_elbo_graph(&params, 1, 2);
    for c in [0.0, -0.1, 1.5, f64::NAN] {
        let mut data = random_data(&cfg, 1, 2, 1);
        data.insert("c".into(), Tensor::scalar(c));
        assert!(g.evaluate(&params, &data).is_err());
    }
}

#[test]
fn degenerate_single_step_matches_hand_computation() {
    let dcfg = tiny_dvbf(2);
    let cfg = ModelConfig::Dvbf(dcfg.clone());
    let mut params = cfg.init_params(&mut rng(71));
    for (name, t) in params.iter_mut() {
        if name != "bank.log_std" {
            *t = Tensor::zeros(t.shape());
        }
    }
    let (rows, scale) = (3, 0.2);
    let mut r = rng(72);
    let obs = Tensor::randn(&[rows, 9], 1.0, &mut r);
    let ctrl = Tensor::randn(&[rows, 1], 1.0, &mut r);
    let noise = sample_noise(&cfg.noise_shapes(rows, 1), &mut r);
    let g = cfg.build_elbo_graph(&params, rows, 1);

    // Zero nets: z = 0, emission mean 0 with unit std, q(w) = N(0, 1).
    let recon: f64 = obs.data().iter().map(|x| -0.5 * x * x - HALF_LN_2PI).sum();
    let n_v = (dcfg.transitions * dcfg.component_len()) as f64;
    let s = dvbf::BANK_INIT_STD;
    let kl_v = n_v * (-s.ln() + 0.5 * s * s - 0.5);
    let n_w = (rows * dcfg.noise_dim) as f64;
    for c in [1.0, 0.4] {
        let data = elbo_inputs(obs.clone(), ctrl.clone(), noise.clone(), c, scale);
        let comp = g.evaluate(&params, &data).unwrap().0;
        assert!((comp.recon - recon).abs() < 1e-9);
        assert!(comp.kl_w.abs() < 1e-12);
        assert!((comp.kl_v - scale * kl_v).abs() < 1e-8 * kl_v.abs());
        // E_q[ln q - c ln p] with q = p = N(0, 1).
        let annealed_kl_w = (1.0 - c) * n_w * (-HALF_LN_2PI - 0.5);
        let expected = c * recon - annealed_kl_w - scale * kl_v;
        assert!((comp.annealed_total - expected).abs() < 1e-8, "{} vs {}", comp.annealed_total, expected);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = w.dims2().unwrap();
    assert_eq!(x.len(), n_in);
    (0..n_out)
        .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.get2(i, j)).sum::<f64>())
        .collect()
}

#[test]
fn dkf_single_step_is_a_vae_bound() {
    let cfg = tiny_dkf();
    let mcfg = ModelConfig::Dkf(cfg.clone());
    let params = perturbed(&mcfg.init_params(&mut rng(81)), 0.3, 82);
    let rows = 2;
    let mut r = rng(83);
    let obs = Tensor::randn(&[rows, 4], 1.0, &mut r);
    let ctrl = Tensor::randn(&[rows, 1], 1.0, &mut r);
    let noise = sample_noise(&mcfg.noise_shapes(rows, 1), &mut r);
    let data = elbo_inputs(obs.clone(), ctrl.clone(), noise.clone(), 1.0, 1.0);
    let comp = mcfg.build_elbo_graph(&params, rows, 1).evaluate(&params, &data).unwrap().0;

    let p = |n: &str| params.get(n).unwrap();
    let (mut recon, mut kl) = (0.0, 0.0);
    for b in 0..rows {
        let mut xin = obs.row(b).to_vec();
        xin.extend_from_slice(ctrl.row(b));
        let mut h = Vec::new();
        for dir in ["fwd", "bwd"] {
            let pre = affine(&xin, p(&format!("rec.rnn.{dir}.in.w")), p(&format!("rec.rnn.{dir}.in.b")));
            h.extend(pre.iter().map(|v| v.tanh()));
        }
        let out = affine(&h, p("rec.out.w"), p("rec.out.b"));
        let q = DiagGaussian::from_log_std(Tensor::vector(out[..2].to_vec()), &Tensor::vector(out[2..].to_vec())).unwrap();
        let eps = Tensor::vector(noise["noise.z"].row(b).to_vec());
        let z = q.sample(&eps).unwrap();
        let h1: Vec<f64> = affine(z.data(), p("emit.l1.w"), p("emit.l1.b")).into_iter().map(sigmoid).collect();
        let h2: Vec<f64> = affine(&h1, p("emit.l2.w"), p("emit.l2.b")).into_iter().map(sigmoid).collect();
        let e = affine(&h2, p("emit.out.w"), p("emit.out.b"));
        let px = DiagGaussian::from_log_std(Tensor::vector(e[..4].to_vec()), &Tensor::vector(e[4..].to_vec())).unwrap();
        recon += px.log_pdf(&Tensor::vector(obs.row(b).to_vec())).unwrap();
        kl += q.kl(&DiagGaussian::standard(2)).unwrap();
    }
    assert!((comp.recon - recon).abs() < 1e-9, "{} vs {recon}", comp.recon);
    assert!((comp.kl_w - kl).abs() < 1e-10);
    assert_eq!(comp.kl_v, 0.0);
    assert!((comp.bound() - (recon - kl)).abs() < 1e-9);
}

#[test]
fn mixing_weights_stay_on_simplex() {
    let cfg = ModelConfig::Dvbf(DvbfConfig {
        alpha_hidden: 6,
        ..tiny_dvbf(5)
    });
    let params = perturbed(&cfg.init_params(&mut rng(91)), 0.3, 92);
    let g = cfg.build_elbo_graph(&params, 4, 6);
    let values = g.graph.forward(&(&random_data(&cfg, 4, 6, 93), &params)).unwrap();
    let alpha = values.output("alpha").unwrap();
    let (n, m) = alpha.dims2().unwrap();
    assert_eq!((n, m), (20, 5));
    for i in 0..n {
        let row = alpha.row(i);
        assert!(row.iter().all(|&a| a > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

fn pendulum_model(kind: ModelKind, seed: u64) -> Model {
    let cfg = match kind {
        ModelKind::Dvbf => ModelConfig::Dvbf(DvbfConfig {
            hidden: 16,
            ..DvbfConfig::for_env(EnvKind::Pendulum)
        }),
        ModelKind::Dkf => ModelConfig::Dkf(DkfConfig {
            hidden: 16,
            rnn_hidden: 16,
            ..DkfConfig::for_env(EnvKind::Pendulum)
        }),
    };
    Model::new(cfg, seed).unwrap()
}

#[test]
fn filtering_in_mean_mode_is_reproducible() {
    let data = generate_sequences(EnvKind::Pendulum, 7, 6, 1, 0, "train");
    for kind in [ModelKind::Dvbf, ModelKind::Dkf] {
        let m = pendulum_model(kind, 3);
        let a = m.filter(&data, NoiseMode::Mean, 100).unwrap();
        let b = m.filter(&data, NoiseMode::Mean, 100).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.recon, b.recon);
        assert_eq!(a.recon.shape(), &[42, 256]);
        assert_eq!(a.z.shape(), &[42, 3]);
        assert_eq!(m.config.latent_dim(), 3);
        // Sequence-major: row 6 is the first step of sequence 1.
        let single = m.filter(&data.select(&[1]), NoiseMode::Mean, 100).unwrap();
        for k in 0..6 {
            for (x, y) in single.z.row(k).iter().zip(a.z.row(6 + k)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn filtering_bound_equals_sum_of_batch_bounds() {
    let data = generate_sequences(EnvKind::Pendulum, 5, 4, 2, 0, "train");
    let m = pendulum_model(ModelKind::Dvbf, 4);
    let all = m.filter(&data, NoiseMode::Mean, 50).unwrap().elbo;
    let mut parts = 0.0;
    for i in 0..5 {
        parts += m.filter(&data.select(&[i]), NoiseMode::Mean, 50).unwrap().elbo.bound();
    }
    assert!((all.bound() - parts).abs() < 1e-8 * all.bound().abs());
}

#[test]
fn rollouts_extend_past_training_length() {
    let data = generate_sequences(EnvKind::Pendulum, 3, 15, 5, 0, "test");
    for kind in [ModelKind::Dvbf, ModelKind::Dkf] {
        let m = pendulum_model(kind, 6);
        for horizon in [15, 100] {
            let (obs, _) = time_major(&data, &[0, 1, 2], 3);
            let ctrl = Tensor::zeros(&[horizon * 3, 1]);
            let out = m.generate(&obs, 3, &ctrl, horizon, NoiseMode::Sample { seed: 1, stream: 2 }).unwrap();
            assert_eq!(out.mean.shape(), &[3 * horizon, 256]);
            assert!(out.mean.is_finite());
        }
    }
}

#[test]
fn zero_bank_rollout_emits_the_origin_image() {
    let data = generate_sequences(EnvKind::Pendulum, 2, 4, 5, 0, "test");
    let mut m = pendulum_model(ModelKind::Dvbf, 7);
    let bank = m.params.get_mut("bank.mean").unwrap();
    *bank = Tensor::zeros(bank.shape());
    let (obs, _) = time_major(&data, &[0, 1], 3);
    let horizon = 12;
    let ctrl = Tensor::randn(&[horizon * 2, 1], 1.0, &mut rng(1));
    let out = m.generate(&obs, 3, &ctrl, horizon, NoiseMode::Sample { seed: 3, stream: 0 }).unwrap();

    let mut g = Graph::new();
    let nodes = nn::ParamNodes::declare(&mut g, &m.params);
    let z = g.input("z", &[1, 3]);
    let h = nodes.dense(&mut g, "emit.l1", z, Activation::Relu);
    let img = nodes.dense(&mut g, "emit.out", h, Activation::Identity);
    let mut zin = BTreeMap::new();
    zin.insert("z".to_string(), Tensor::zeros(&[1, 3]));
    let origin = g.forward(&(&zin, &m.params)).unwrap().get(img).clone();
    for s in 0..2 {
        for k in 1..horizon {
            assert!(out.z.row(s * horizon + k).iter().all(|&v| v == 0.0));
            assert_eq!(out.mean.row(s * horizon + k), origin.data());
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Dvbf, ModelKind::Dkf] {
        let m = pendulum_model(kind, 8);
        let path = dir.path().join(kind.name());
        checkpoint::save(&path, &m, EnvKind::Pendulum, 17, 0.25, 8).unwrap();
        let (back, manifest) = checkpoint::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest.step, 17);
        assert_eq!(manifest.c, 0.25);
        assert_eq!(manifest.config.kind(), kind);
        let bytes = std::fs::read(path.join("params.bin")).unwrap();
        checkpoint::save(&path, &back, EnvKind::Pendulum, 17, 0.25, 8).unwrap();
        assert_eq!(bytes, std::fs::read(path.join("params.bin")).unwrap());
    }
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = pendulum_model(ModelKind::Dkf, 9);
    checkpoint::save(dir.path(), &m, EnvKind::Pendulum, 0, 0.01, 9).unwrap();
    let path = dir.path().join("params.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = checkpoint::load(dir.path()).unwrap_err();
    assert_eq!(err.kind(), "format");
    assert!(err.to_string().contains("params.bin"));
}
