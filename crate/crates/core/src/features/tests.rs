use super::*;
use crate::score::testing::FnScore;
use crate::score::{estimate_score, ScoreNet, ScoreNetConfig};
use proptest::prelude::*;
use rand::Rng;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(0.1, 5.0, 4).unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn patchify_small_cases() {
    let grid = PatchGrid::new(4, 4, 2).unwrap();
    let x = Tensor::from_fn(&[4, 4], |i| i as f64);
    let patches = patchify(&grid, &x).unwrap();
    assert_eq!(patches.len(), 4);
    assert_eq!(patches[0].data(), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(patches[3].data(), &[10.0, 11.0, 14.0, 15.0]);

    let single = PatchGrid::new(4, 4, 4).unwrap();
    let p = patchify(&single, &x).unwrap();
    assert_eq!(p.len(), 1);
    assert_eq!(p[0].data(), x.data());

    assert!(PatchGrid::new(32, 32, 5).is_err());
    assert!(PatchGrid::new(32, 32, 0).is_err());
    assert!(patchify(&grid, &Tensor::zeros(&[3, 4])).is_err());
}

proptest! {
    #[test]
    fn patchify_is_lossless(seed in any::<u64>(), p in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let grid = PatchGrid::new(8, 16, p).unwrap();
        let x = random_image(8, 16, seed);
        let back = reassemble(&grid, &patchify(&grid, &x).unwrap()).unwrap();
        prop_assert_eq!(back, x);
    }
}

#[test]
fn norms_of_constant_scores() {
    let grid = PatchGrid::new(16, 16, 2).unwrap();
    let x = random_image(16, 16, 0);
    let zero = FnScore::new(&[1, 16, 16], |tape: &mut Tape, x| tape.scale(x, 0.0));
    let n = patch_score_norms(&zero, &schedule(), &grid, &x).unwrap();
    assert!(n.patches.iter().flatten().all(|&v| v == 0.0));
    assert!(n.whole.iter().all(|&v| v == 0.0));

    let ones = FnScore::new(&[1, 16, 16], |tape: &mut Tape, x| {
        let z = tape.scale(x, 0.0)?;
        tape.offset(z, 1.0)
    });
    let n = patch_score_norms(&ones, &schedule(), &grid, &x).unwrap();
    assert_eq!(n.patches.len(), 64);
    assert!(n.patches.iter().all(|r| r.len() == 4 && r.iter().all(|&v| v == 2.0)));
    assert!(n.whole.iter().all(|&v| (v - 16.0).abs() < 1e-12));
}

#[test]
fn norms_match_slice_then_norm_oracle() {
    let net = ScoreNet::new(ScoreNetConfig {
        height: 16,
        width: 16,
        channels: [4, 4, 4],
        data_scale: 0.5,
        seed: 3,
    })
    .unwrap();
    let grid = PatchGrid::new(16, 16, 4).unwrap();
    let sched = schedule();
    let x = random_image(16, 16, 1);
    let got = patch_score_norms(&net, &sched, &grid, &x).unwrap();
    for (l, &sigma) in sched.eval_sigmas().iter().enumerate() {
        let s = estimate_score(&net, &sched, &x, sigma).unwrap();
        for pr in 0..4 {
            for pc in 0..4 {
                let mut ss = 0.0;
                for r in 0..4 {
                    for c in 0..4 {
                        let v = s.data()[(pr * 4 + r) * 16 + pc * 4 + c];
                        ss += v * v;
                    }
                }
                let want = ss.sqrt();
                let have = got.patches[pr * 4 + pc][l];
                assert!((have - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }
}

#[test]
fn norms_scale_and_permute_with_local_scores() {
    let grid = PatchGrid::new(16, 16, 4).unwrap();
    let sched = schedule();
    let local = FnScore::new(&[1, 16, 16], |tape: &mut Tape, x| tape.neg(x));
    let scaled = FnScore::new(&[1, 16, 16], |tape: &mut Tape, x| tape.scale(x, -2.5));
    let x = random_image(16, 16, 2);
    let base = patch_score_norms(&local, &sched, &grid, &x).unwrap();
    let big = patch_score_norms(&scaled, &sched, &grid, &x).unwrap();
    for (a, b) in base.patches.iter().flatten().zip(big.patches.iter().flatten()) {
        assert!((b - 2.5 * a).abs() < 1e-12);
    }

    let mut patches = patchify(&grid, &x).unwrap();
    patches.swap(1, 14);
    let swapped = reassemble(&grid, &patches).unwrap();
    let perm = patch_score_norms(&local, &sched, &grid, &swapped).unwrap();
    assert_eq!(perm.patches[1], base.patches[14]);
    assert_eq!(perm.patches[14], base.patches[1]);
    assert_eq!(perm.patches[0], base.patches[0]);
}

#[test]
fn positional_encoding_properties() {
    let e = positional_encoding(0, 0, 16).unwrap();
    let want: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
    assert_eq!(e, want);
    assert!(positional_encoding(1, 1, 6).is_err());
    assert!(positional_encoding(1, 1, 0).is_err());

    let grid = PatchGrid::new(64, 64, 8).unwrap();
    let table = positional_table(&grid, 16).unwrap();
    assert!(table.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    for v in &table {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= 4.0 + 1e-12);
    }
    for i in 0..table.len() {
        for j in i + 1..table.len() {
            let linf = table[i]
                .iter()
                .zip(&table[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(linf > 1e-6, "positions {i} and {j} collide");
        }
    }
}

fn encoder16() -> ContextEncoder {
    ContextEncoder::new(ContextEncoderConfig {
        height: 16,
        width: 16,
        channels: [4, 6, 8],
        seed: 1,
    })
    .unwrap()
}

#[test]
fn encoder_contract() {
    let enc = encoder16();
    let x = random_image(16, 16, 5);
    let a = enc.encode(&x).unwrap();
    let b = enc.encode(&x.clone()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    assert_eq!(enc.encode(&Tensor::zeros(&[1, 16, 16])).unwrap().len(), 8);
    assert!(enc.encode(&Tensor::zeros(&[1, 8, 8])).is_err());
    let batch = enc.encode_batch(&[&x, &random_image(16, 16, 6)]).unwrap();
    assert_eq!(batch.shape(), &[2, 8]);
    assert_eq!(batch.row(0), a.as_slice());
}

#[test]
fn dataset_rows_and_layout() {
    let grid = PatchGrid::new(16, 16, 8).unwrap();
    let sched = schedule();
    let enc = encoder16();
    let images: Vec<(u64, Tensor)> = (0..3).map(|i| (10 + i, random_image(16, 16, i))).collect();

    let zero = FnScore::new(&[1, 16, 16], |tape: &mut Tape, x| tape.scale(x, 0.0));
    let rows = build_dataset(&zero, &sched, &grid, &enc, 8, &images).unwrap();
    assert_eq!(rows.len(), 3 * 4);
    assert!(rows.iter().all(|r| r.norms.iter().all(|&v| v == 0.0)));

    let local = FnScore::new(&[1, 16, 16], |tape: &mut Tape, x| tape.neg(x));
    let rows = build_dataset(&local, &sched, &grid, &enc, 8, &images).unwrap();
    let r = &rows[7];
    assert_eq!((r.sample_id, r.patch), (11, 3));
    // patch 3 is the bottom-right 8×8 block; the score is -x at every σ
    let x = &images[1].1;
    let mut ss = 0.0;
    for row in 8..16 {
        for col in 8..16 {
            ss += x.data()[row * 16 + col].powi(2);
        }
    }
    let want = ss.sqrt().ln_1p();
    assert!(r.norms.iter().all(|&v| (v - want).abs() < 1e-12));
    let mut ctx = positional_encoding(1, 1, 8).unwrap();
    ctx.extend(enc.encode(x).unwrap());
    assert_eq!(r.context, ctx);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.dtf");
    let sidecar = write_feature_table(&path, &rows, 8).unwrap();
    let t = io::read_dtf(&path).unwrap();
    assert_eq!(t.shape(), &[12, 4 + 8 + 8 + 2]);
    assert_eq!(t.row(7)[t.shape()[1] - 2..], [11.0, 3.0]);
    let layout: FeatureLayout = serde_json::from_slice(&io::read_bytes(&sidecar).unwrap()).unwrap();
    assert_eq!(layout.width(), 22);
    assert_eq!(layout.columns[0], "log1p_norm_0");
}
