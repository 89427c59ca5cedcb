use sdmcl::baselines::{Activation, MlpBaseline};
use sdmcl::numerics::{cross_entropy, softmax, DenseMatrix, Rng};
use sdmcl::sdmlp::{Ablations, SdmlpModel, TopKConfig, TopKMode};

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn random_input(rng: &mut Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn spread_model(mode: TopKMode, k: usize, detach: bool, seed: u64) -> SdmlpModel<f64> {
    let (n, r, o) = (6, 8, 3);
    let mut rng = Rng::new(seed);
    let x_a = DenseMatrix::<f64>::from_fn(n, r, |_, _| rng.uniform() + 0.05);
    let x_v = DenseMatrix::<f64>::from_fn(o, r, |_, _| rng.uniform());
    let topk = TopKConfig {
        k_target: k,
        k_max: k,
        s: 1.0,
        mode,
        detach_inhibition: detach,
    };
    let mut m = SdmlpModel::from_weights(x_a, x_v, topk, Ablations::default()).unwrap();
    m.project_weights();
    m
}

fn perturbed_loss(model: &SdmlpModel<f64>, x: &[f64], y: usize, addr: bool, idx: usize, h: f64) -> f64 {
    let mut m = model.clone();
    if addr {
        m.x_a_mut().as_mut_slice()[idx] += h;
    } else {
        m.x_v_mut().as_mut_slice()[idx] += h;
    }
    m.loss(x, y).unwrap()
}

/// Central differences on the loss with the winner set held fixed. Entries
/// whose perturbation changes the ranking are skipped.
fn check_sdmlp(model: &SdmlpModel<f64>, x: &[f64], y: usize) -> usize {
    let trace = model.forward(x).unwrap();
    let grads = model.backward(&trace, y).unwrap();
    let mut checked = 0;
    for (addr, analytic) in [(true, grads.x_a.as_slice()), (false, grads.x_v.as_slice())] {
        for (idx, &g) in analytic.iter().enumerate() {
            let same_ranking = |h: f64| {
                let mut m = model.clone();
                if addr {
                    m.x_a_mut().as_mut_slice()[idx] += h;
                } else {
                    m.x_v_mut().as_mut_slice()[idx] += h;
                }
                let t = m.forward(x).unwrap();
                t.active == trace.active && t.runner_up == trace.runner_up
            };
            if !(same_ranking(H) && same_ranking(-H)) {
                continue;
            }
            let fd =
                (perturbed_loss(model, x, y, addr, idx, H) - perturbed_loss(model, x, y, addr, idx, -H)) / (2.0 * H);
            assert!(
                (fd - g).abs() < TOL * (1.0 + fd.abs()),
                "addr={addr} idx={idx}: fd {fd} vs {g}"
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn subtract_gradient_matches_finite_differences() {
    let mut rng = Rng::new(3);
    for seed in 0..10 {
        let model = spread_model(TopKMode::FixedSubtract, 3, false, seed);
        let x = random_input(&mut rng, model.n());
        assert!(check_sdmlp(&model, &x, (seed % 3) as usize) > 20);
    }
}

#[test]
fn mask_gradient_matches_finite_differences() {
    let mut rng = Rng::new(4);
    for seed in 0..10 {
        let model = spread_model(TopKMode::AnnealMask, 2, false, seed);
        let x = random_input(&mut rng, model.n());
        assert!(check_sdmlp(&model, &x, (seed % 3) as usize) > 20);
    }
}

/// With the inhibition treated as a constant the loss is
/// `CE(X_v · [Xa^T x − I]₊)` with `I` frozen; differentiate that directly.
#[test]
fn detached_gradient_matches_frozen_inhibition_oracle() {
    let mut rng = Rng::new(5);
    for seed in 0..10 {
        let model = spread_model(TopKMode::FixedSubtract, 2, true, seed);
        let x = random_input(&mut rng, model.n());
        let y = (seed % 3) as usize;
        let trace = model.forward(&x).unwrap();
        let frozen = trace.inhibition;
        // the runner-up sits exactly on the kink of the frozen loss
        let frozen_loss = |x_a: &DenseMatrix<f64>| {
            let (n, r) = x_a.shape();
            let mut logits = vec![0.0; model.o()];
            for j in 0..r {
                let a: f64 = (0..n).map(|i| x_a[(i, j)] * x[i]).sum();
                let a_star = (a - frozen).max(0.0);
                for (c, l) in logits.iter_mut().enumerate() {
                    *l += model.x_v()[(c, j)] * a_star;
                }
            }
            cross_entropy(&softmax(&logits).unwrap(), y).unwrap()
        };
        let grads = model.backward(&trace, y).unwrap();
        let r = model.r();
        for idx in 0..model.x_a().as_slice().len() {
            if Some(idx % r) == trace.runner_up {
                continue;
            }
            let mut plus = model.x_a().clone();
            plus.as_mut_slice()[idx] += H;
            let mut minus = model.x_a().clone();
            minus.as_mut_slice()[idx] -= H;
            let fd = (frozen_loss(&plus) - frozen_loss(&minus)) / (2.0 * H);
            let g = grads.x_a.as_slice()[idx];
            assert!((fd - g).abs() < TOL * (1.0 + fd.abs()), "idx {idx}: {fd} vs {g}");
        }
        if let Some(j) = trace.runner_up {
            for i in 0..model.n() {
                assert_eq!(grads.x_a[(i, j)], 0.0, "runner-up must get no gradient");
            }
        }
    }
}

#[test]
fn gaba_gradient_matches_finite_differences() {
    let mut rng = Rng::new(6);
    for seed in 0..5 {
        let mut model = spread_model(TopKMode::GabaSwitch, 2, false, seed);
        model.set_epoch(0);
        let x = random_input(&mut rng, model.n());
        assert!(check_sdmlp(&model, &x, 1) > 10);
    }
}

fn mlp_loss(m: &MlpBaseline<f64>, x: &[f64], y: usize) -> f64 {
    let t = m.forward(x, None).unwrap();
    cross_entropy(&softmax(&t.logits).unwrap(), y).unwrap()
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = Rng::new(7);
    for activation in [Activation::Relu, Activation::TopKMask(3), Activation::TopKSubtract(3)] {
        for seed in 0..4 {
            let model = MlpBaseline::<f64>::new(5, 7, 3, activation, 0.0, seed).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let y = (seed % 3) as usize;
            let trace = model.forward(&x, None).unwrap();
            let grads = model.backward(&trace, y).unwrap();
            let n_groups = grads.groups().len();
            for g in 0..n_groups {
                let len = grads.groups()[g].len();
                for idx in 0..len {
                    let bump = |h: f64| {
                        let mut m = model.clone();
                        match g {
                            0 => m.w_in.as_mut_slice()[idx] += h,
                            1 => m.b_in[idx] += h,
                            2 => m.w_out.as_mut_slice()[idx] += h,
                            _ => m.b_out[idx] += h,
                        }
                        m
                    };
                    let (mp, mm) = (bump(H), bump(-H));
                    let same = |m: &MlpBaseline<f64>| {
                        let t = m.forward(&x, None).unwrap();
                        t.active == trace.active && t.runner_up == trace.runner_up
                    };
                    if !(same(&mp) && same(&mm)) {
                        continue;
                    }
                    let fd = (mlp_loss(&mp, &x, y) - mlp_loss(&mm, &x, y)) / (2.0 * H);
                    let an = grads.groups()[g][idx];
                    assert!(
                        (fd - an).abs() < TOL * (1.0 + fd.abs()),
                        "{activation:?} group {g} idx {idx}: {fd} vs {an}"
                    );
                }
            }
        }
    }
}
