use super::*;
use crate::features::SampleFeatures;
use crate::features::ScoreNorms;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

fn randomize(params: &mut ParamSet, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = (0..params.len()).map(crate::optim::ParamId).collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
}

fn random_vec(n: usize, rng: &mut impl Rng, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn cfg(levels: usize, context: usize) -> FlowConfig {
    FlowConfig {
        hidden: 16,
        ..FlowConfig::new(levels, context)
    }
}

fn set_param(flow: &mut FlowModel, name: &str, f: impl Fn(usize, &mut f64)) {
    let id = flow.params().find(name).unwrap_or_else(|| panic!("no param {name}"));
    for (i, v) in flow.params_mut().get_mut(id).data_mut().iter_mut().enumerate() {
        f(i, v);
    }
}

#[test]
fn masks_alternate_and_cover() {
    let f = FlowModel::new(cfg(5, 2)).unwrap();
    assert_eq!(f.blocks()[0].keep, 0..3);
    assert_eq!(f.blocks()[0].change, 3..5);
    assert_eq!(f.blocks()[1].keep, 3..5);
    assert_eq!(f.blocks()[1].change, 0..3);
    let one = FlowModel::new(cfg(1, 2)).unwrap();
    assert!(one.blocks()[0].change.is_empty());
    assert_eq!(one.blocks()[1].change, 0..1);
}

#[test]
fn fresh_flow_is_identity() {
    let f = FlowModel::new(cfg(4, 3)).unwrap();
    let v = [0.3, -1.2, 2.0, 0.7];
    let c = [1.0, 0.0, -1.0];
    let (u, ld) = f.flow_forward(&v, &c).unwrap();
    assert_eq!(u, v);
    assert_eq!(ld, 0.0);
    assert_eq!(f.flow_inverse(&v, &c).unwrap(), v);
}

#[test]
fn doubling_block() {
    let mut f = FlowModel::new(FlowConfig {
        blocks: 1,
        ..cfg(4, 2)
    })
    .unwrap();
    let clamp = f.config().clamp;
    let raw = clamp * (2f64.ln() / clamp).atanh();
    set_param(&mut f, "flow.block0.out.b", |i, v| {
        if i < 2 {
            *v = raw
        }
    });
    let v = [1.0, 2.0, 3.0, -4.0];
    let (u, ld) = f.flow_forward(&v, &[0.5, 0.5]).unwrap();
    let want = [1.0, 2.0, 6.0, -8.0];
    assert!(u.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!((ld - 2.0 * 2f64.ln()).abs() < 1e-12);
    let back = f.flow_inverse(&v, &[0.5, 0.5]).unwrap();
    let half = [1.0, 2.0, 1.5, -2.0];
    assert!(back.iter().zip(&half).all(|(a, b)| (a - b).abs() < 1e-12));
}

fn random_flow(levels: usize, context: usize, seed: u64) -> FlowModel {
    let mut f = FlowModel::new(FlowConfig {
        seed,
        ..cfg(levels, context)
    })
    .unwrap();
    randomize(f.params_mut(), 0.3, seed + 100);
    f.whitening = Whitening {
        mean: (0..levels).map(|i| 0.1 * i as f64).collect(),
        std: (0..levels).map(|i| 0.5 + 0.25 * i as f64).collect(),
    };
    f
}

#[test]
fn round_trip_is_exact() {
    let f = random_flow(5, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let v = random_vec(5, &mut rng, 2.0);
        let c = random_vec(3, &mut rng, 1.0);
        let (u, _) = f.flow_forward(&v, &c).unwrap();
        let back = f.flow_inverse(&u, &c).unwrap();
        for (a, b) in back.iter().zip(&v) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-6, "round-trip error {worst}");
}

#[test]
fn logdet_matches_numeric_jacobian() {
    let f = random_flow(4, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    for _ in 0..10 {
        let v = random_vec(4, &mut rng, 1.0);
        let c = random_vec(2, &mut rng, 1.0);
        let (_, ld) = f.flow_forward(&v, &c).unwrap();
        let jac = DMatrix::from_fn(4, 4, |i, j| {
            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            let up = f.flow_forward(&vp, &c).unwrap().0;
            let um = f.flow_forward(&vm, &c).unwrap().0;
            (up[i] - um[i]) / (2.0 * h)
        });
        let numeric = jac.determinant().abs().ln();
        assert!((numeric - ld).abs() <= 1e-4 * ld.abs().max(1.0), "{numeric} vs {ld}");
    }
}

#[test]
fn standard_normal_base_at_origin() {
    let mut f = FlowModel::new(FlowConfig {
        components: 1,
        ..cfg(2, 2)
    })
    .unwrap();
    set_param(&mut f, "flow.gmm.w", |_, v| *v = 0.0);
    set_param(&mut f, "flow.gmm.b", |_, v| *v = 0.0);
    let ll = f.log_likelihood(&[0.0, 0.0], &[0.3, -0.7]).unwrap();
    assert!((ll + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

    let mut g = FlowModel::new(FlowConfig {
        components: 1,
        ..cfg(1, 1)
    })
    .unwrap();
    set_param(&mut g, "flow.gmm.w", |_, v| *v = 0.0);
    set_param(&mut g, "flow.gmm.b", |_, v| *v = 0.0);
    let lp = g.gmm_log_prob(&[0.0], &[1.0]).unwrap();
    assert!((lp + HALF_LN_2PI).abs() < 1e-15);
}

#[test]
fn duplicate_components_match_single() {
    let mut one = FlowModel::new(FlowConfig {
        components: 1,
        ..cfg(2, 1)
    })
    .unwrap();
    let mut two = FlowModel::new(FlowConfig {
        components: 2,
        ..cfg(2, 1)
    })
    .unwrap();
    // K=1 bias layout: [logit, mu0, mu1, ls0, ls1]
    let b1 = [0.0, 0.4, -0.3, 0.2, -0.1];
    set_param(&mut one, "flow.gmm.w", |_, v| *v = 0.0);
    set_param(&mut one, "flow.gmm.b", |i, v| *v = b1[i]);
    // K=2 layout: [l0, l1, mu(2x2), ls(2x2)]
    let b2 = [0.7, 0.7, 0.4, -0.3, 0.4, -0.3, 0.2, -0.1, 0.2, -0.1];
    set_param(&mut two, "flow.gmm.w", |_, v| *v = 0.0);
    set_param(&mut two, "flow.gmm.b", |i, v| *v = b2[i]);
    let u = [0.9, 1.3];
    let a = one.gmm_log_prob(&u, &[2.0]).unwrap();
    let b = two.gmm_log_prob(&u, &[2.0]).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn gmm_matches_direct_density_sum() {
    let f = random_flow(3, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let u = random_vec(3, &mut rng, 1.5);
        let c = random_vec(2, &mut rng, 1.0);
        let g = f.gmm_params(&c).unwrap();
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut density = 0.0;
        for k in 0..g.weights.len() {
            let mut term = g.weights[k];
            for d in 0..3 {
                let (m, s) = (g.means[k][d], g.stds[k][d]);
                let z = (u[d] - m) / s;
                term *= (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            }
            density += term;
        }
        let lp = f.gmm_log_prob(&u, &c).unwrap();
        assert!((lp - density.ln()).abs() < 1e-10);
    }
}

#[test]
fn shift_block_translates_density() {
    let mut base = FlowModel::new(FlowConfig {
        blocks: 1,
        seed: 3,
        ..cfg(2, 1)
    })
    .unwrap();
    randomize(base.params_mut(), 0.0, 0);
    let mut shifted = base.clone();
    // change half is dim 1; bias slot 1 is its shift
    set_param(&mut shifted, "flow.block0.out.b", |i, v| {
        if i == 1 {
            *v = 0.75
        }
    });
    for v in [[0.0, 0.0], [1.0, -2.0], [-0.5, 0.3]] {
        let a = shifted.log_likelihood(&v, &[0.2]).unwrap();
        let b = base.log_likelihood(&[v[0], v[1] + 0.75], &[0.2]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    let mut f = FlowModel::new(FlowConfig { seed: 11, ..cfg(1, 3) }).unwrap();
    randomize(f.params_mut(), 0.1, 111);
    f.whitening = Whitening { mean: vec![0.4], std: vec![1.5] };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 100_000;
    let (lo, hi) = (-30.0, 30.0);
    let step = (hi - lo) / (n - 1) as f64;
    let grid = Tensor::from_fn(&[n, 1], |i| lo + i as f64 * step);
    for _ in 0..5 {
        let c = random_vec(3, &mut rng, 1.0);
        let ctx = Tensor::new(vec![n, 3], c.iter().cycle().take(3 * n).cloned().collect()).unwrap();
        let ll = f.log_likelihood_batch(&grid, &ctx).unwrap();
        let p: Vec<f64> = ll.iter().map(|v| v.exp()).collect();
        let integral = step * (p.iter().sum::<f64>() - 0.5 * (p[0] + p[n - 1]));
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }
}

#[test]
fn non_finite_block_is_named() {
    let mut f = FlowModel::new(cfg(2, 1)).unwrap();
    set_param(&mut f, "flow.block1.l0.w", |_, v| *v = 1e308);
    let err = f.flow_forward(&[5.0, 5.0], &[5.0]).unwrap_err();
    assert!(err.to_string().contains("flow block 1"), "{err}");
}

fn spatial(use_positional: bool, seed: u64) -> SpatialFlow {
    SpatialFlow::new(
        FlowConfig {
            hidden: 32,
            seed,
            ..FlowConfig::new(2, 0)
        },
        ContextEncoderConfig {
            height: 8,
            width: 8,
            channels: [2, 4, 4],
            seed,
        },
        PatchGrid::new(8, 8, 2).unwrap(),
        8,
        use_positional,
    )
    .unwrap()
}

/// Norms whose level depends on the patch position, over noise images.
fn positional_samples(n: usize, seed: u64) -> Vec<SampleFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let patches = (0..16)
                .map(|p| {
                    let level = (p as f64 * 0.7).sin() * 2.0 + 3.0;
                    (0..2)
                        .map(|d| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (level + 0.5 * d as f64 + 0.1 * z).exp_m1()
                        })
                        .collect()
                })
                .collect();
            SampleFeatures {
                sample_id: i as u64,
                image: Tensor::from_fn(&[1, 8, 8], |_| rng.gen_range(0.0..1.0)),
                norms: ScoreNorms {
                    patches,
                    whole: vec![0.0; 2],
                },
            }
        })
        .collect()
}

#[test]
fn zero_iterations_leave_flow_unchanged() {
    let mut m = spatial(true, 0);
    let before = (m.flow.params().clone(), m.encoder.params().clone());
    let losses = train_flow(
        &mut m,
        &positional_samples(4, 0),
        &FlowTrainConfig {
            iterations: 0,
            ..FlowTrainConfig::default()
        },
    )
    .unwrap();
    assert!(losses.is_empty());
    assert_eq!(m.flow.params(), &before.0);
    assert_eq!(m.encoder.params(), &before.1);
}

#[test]
fn encoder_receives_gradient() {
    let mut m = spatial(true, 1);
    let data = positional_samples(4, 1);
    m.fit_whitening(&data).unwrap();
    // one step makes the zero-initialized output layers nonzero
    train_flow(
        &mut m,
        &data,
        &FlowTrainConfig {
            iterations: 1,
            batch_size: 4,
            ..FlowTrainConfig::default()
        },
    )
    .unwrap();
    let refs: Vec<&SampleFeatures> = data.iter().collect();
    let g = encoder_gradients(&m, &refs).unwrap();
    let norm: f64 = g.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
    assert!(norm > 0.0);
}

#[test]
fn training_uses_position() {
    let train = positional_samples(48, 2);
    let held = positional_samples(16, 3);
    let tc = FlowTrainConfig {
        iterations: 300,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 4,
    };
    let mut full = spatial(true, 5);
    full.fit_whitening(&train).unwrap();
    let init = full.mean_nll(&held).unwrap();
    train_flow(&mut full, &train, &tc).unwrap();
    let trained = full.mean_nll(&held).unwrap();
    assert!(trained < init, "{trained} !< {init}");

    let mut ablated = spatial(false, 5);
    ablated.fit_whitening(&train).unwrap();
    train_flow(&mut ablated, &train, &tc).unwrap();
    let ablated_nll = ablated.mean_nll(&held).unwrap();
    assert!(trained < ablated_nll, "{trained} !< {ablated_nll}");

    // scoring each patch under another patch's position must hurt on average
    let mut wrong = full.clone();
    wrong.positional.rotate_left(5);
    assert!(wrong.mean_nll(&held).unwrap() > trained);

    let a = full.train_determinism_probe(&train, &tc);
    let b = full.train_determinism_probe(&train, &tc);
    assert_eq!(a, b);
}

impl SpatialFlow {
    fn train_determinism_probe(&self, data: &[SampleFeatures], tc: &FlowTrainConfig) -> Vec<f64> {
        let mut m = self.clone();
        train_flow(
            &mut m,
            data,
            &FlowTrainConfig {
                iterations: 5,
                ..tc.clone()
            },
        )
        .unwrap()
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut m = spatial(true, 6);
    let data = positional_samples(4, 6);
    m.fit_whitening(&data).unwrap();
    randomize(m.flow.params_mut(), 0.05, 1);
    let dir = tempfile::tempdir().unwrap();
    let files = m.save(dir.path()).unwrap();
    assert!(files.iter().all(|f| f.exists()));
    let back = SpatialFlow::load(dir.path()).unwrap();
    assert_eq!(back.patch_nll(&data).unwrap(), m.patch_nll(&data).unwrap());
    assert_eq!(back.meta(), m.meta());
}
