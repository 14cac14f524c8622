use fbnet_core::attention::{CamBlock, SamBlock};
use fbnet_core::nn::{BnBuffers, Builder, Ctx, ParamStore};
use fbnet_core::tensor::gradcheck::{finite_diff_check, random_projection, random_tensor};
use fbnet_core::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cam(channels: usize, ratio: usize, seed: u64) -> (CamBlock, ParamStore<f64>, BnBuffers<f64>) {
    let mut p = ParamStore::new();
    let mut bn = BnBuffers::new();
    let block = CamBlock::new(&mut Builder::new(&mut p, &mut bn, seed), channels, ratio).unwrap();
    (block, p, bn)
}

fn sam(channels: usize, key: usize, seed: u64) -> (SamBlock, ParamStore<f64>, BnBuffers<f64>) {
    let mut p = ParamStore::new();
    let mut bn = BnBuffers::new();
    let block = SamBlock::new(&mut Builder::new(&mut p, &mut bn, seed), channels, key, true).unwrap();
    (block, p, bn)
}

fn run_cam(block: &CamBlock, p: &ParamStore<f64>, bn: &BnBuffers<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let tape = Tape::inference();
    let mut ctx = Ctx::eval(&tape, p.attach(&tape), bn);
    let xv = tape.constant(x.clone());
    let (out, att) = block.forward_with_attention(&mut ctx, xv).unwrap();
    let r = (tape.value(out).clone(), tape.value(att).clone());
    r
}

fn run_sam(block: &SamBlock, p: &ParamStore<f64>, bn: &BnBuffers<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let tape = Tape::inference();
    let mut ctx = Ctx::eval(&tape, p.attach(&tape), bn);
    let xv = tape.constant(x.clone());
    let (out, att) = block.forward_with_attention(&mut ctx, xv).unwrap();
    let r = (tape.value(out).clone(), tape.value(att).clone());
    r
}

fn randomize(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for param in p.iter_mut() {
        param.value = random_tensor(param.value.shape(), scale, rng);
    }
}

#[test]
fn cam_with_zero_weights_adds_uniform_attention() {
    let (block, mut p, bn) = cam(8, 4, 0);
    for param in p.iter_mut() {
        param.value = Tensor::zeros(param.value.shape().to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&[2, 8, 3, 3], 5.0, &mut rng);
    let (out, _) = run_cam(&block, &p, &bn, &x);
    for (o, i) in out.data().iter().zip(x.data()) {
        assert!((o - i - 1.0 / 8.0).abs() < 1e-12);
    }
}

#[test]
fn cam_residual_is_a_distribution_over_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let (block, mut p, bn) = cam(8, 4, trial);
        randomize(&mut p, &mut rng, 1.5);
        let x = random_tensor(&[2, 8, 3, 4], 10.0, &mut rng);
        let (out, _) = run_cam(&block, &p, &bn, &x);
        for b in 0..2 {
            for pix in 0..12 {
                let mut total = 0.0;
                for c in 0..8 {
                    let i = (b * 8 + c) * 12 + pix;
                    let a = out.data()[i] - x.data()[i];
                    assert!(a >= -1e-12);
                    total += a;
                }
                assert!((total - 1.0).abs() < 1e-6, "trial {trial}: {total}");
            }
        }
    }
}

/// Applies the squeeze/ReLU/expand/softmax chain one location at a time.
fn scalar_cam(block: &CamBlock, p: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let [bsz, c, h, w] = x.dims4().unwrap();
    let hidden = block.hidden();
    let w1 = p.get(block.squeeze.weight).value.data();
    let b1 = p.get(block.squeeze.bias.unwrap()).value.data();
    let w2 = p.get(block.expand.weight).value.data();
    let b2 = p.get(block.expand.bias.unwrap()).value.data();
    let mut out = x.clone();
    for b in 0..bsz {
        for pix in 0..h * w {
            let v: Vec<f64> = (0..c).map(|k| x.data()[(b * c + k) * h * w + pix]).collect();
            let z: Vec<f64> = (0..hidden)
                .map(|j| (b1[j] + (0..c).map(|k| w1[j * c + k] * v[k]).sum::<f64>()).max(0.0))
                .collect();
            let logits: Vec<f64> = (0..c)
                .map(|k| b2[k] + (0..hidden).map(|j| w2[k * hidden + j] * z[j]).sum::<f64>())
                .collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..c {
                out.data_mut()[(b * c + k) * h * w + pix] += logits[k].exp() / denom;
            }
        }
    }
    out
}

#[test]
fn cam_matches_per_pixel_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let (block, mut p, bn) = cam(8, 4, seed);
        randomize(&mut p, &mut rng, 1.0);
        let x = random_tensor(&[1, 8, 3, 3], 2.0, &mut rng);
        let (out, _) = run_cam(&block, &p, &bn, &x);
        assert!(out.max_abs_diff(&scalar_cam(&block, &p, &x)) < 1e-5);
    }
}

#[test]
fn cam_is_spatially_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (block, mut p, bn) = cam(8, 2, 5);
    randomize(&mut p, &mut rng, 1.0);
    let x = random_tensor(&[1, 8, 4, 5], 1.0, &mut rng);
    let (base, _) = run_cam(&block, &p, &bn, &x);
    for (py, px) in [(0, 0), (2, 3), (3, 4)] {
        let mut y = x.clone();
        for c in 0..8 {
            y.data_mut()[c * 20 + py * 5 + px] += 0.5 + c as f64;
        }
        let (moved, _) = run_cam(&block, &p, &bn, &y);
        for c in 0..8 {
            for i in 0..4 {
                for j in 0..5 {
                    let idx = c * 20 + i * 5 + j;
                    if (i, j) == (py, px) {
                        assert_ne!(moved.data()[idx], base.data()[idx]);
                    } else {
                        assert_eq!(moved.data()[idx], base.data()[idx]);
                    }
                }
            }
        }
    }
}

#[test]
fn cam_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..10 {
        let (block, mut p, bn) = cam(8, 4, seed);
        randomize(&mut p, &mut rng, 0.8);
        let x = random_tensor(&[1, 8, 4, 4], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(p.iter().map(|q| q.value.clone()));
        let r = finite_diff_check(
            |tape, vars| {
                let mut ctx = Ctx::eval(tape, vars[1..].to_vec(), &bn);
                let y = block.forward(&mut ctx, vars[0])?;
                random_projection(tape, y, seed)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn sam_with_zero_value_projection_is_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (block, mut p, bn) = sam(8, 2, 1);
    randomize(&mut p, &mut rng, 1.0);
    p.get_mut(block.value.weight).value = Tensor::zeros(vec![8, 8, 1, 1]);
    p.get_mut(block.value.bias.unwrap()).value = Tensor::zeros(vec![8]);
    let x = random_tensor(&[2, 8, 3, 3], 4.0, &mut rng);
    let (out, _) = run_sam(&block, &p, &bn, &x);
    assert_eq!(out, x);
}

#[test]
fn sam_attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..20 {
        let (block, mut p, bn) = sam(8, 1, seed);
        randomize(&mut p, &mut rng, 1.0);
        let x = random_tensor(&[2, 8, 3, 4], 2.0, &mut rng);
        let (_, att) = run_sam(&block, &p, &bn, &x);
        assert_eq!(att.shape(), &[2, 12, 12]);
        for row in att.data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn sam_uniform_features_give_uniform_attention() {
    let (block, p, bn) = sam(8, 2, 3);
    let column: Vec<f64> = (0..8).map(|c| c as f64 * 0.3 - 1.0).collect();
    let x = Tensor::from_fn(vec![1, 8, 3, 3], |i| column[i / 9]);
    let (_, att) = run_sam(&block, &p, &bn, &x);
    for &v in att.data() {
        assert!((v - 1.0 / 9.0).abs() < 1e-12);
    }
}

#[test]
fn sam_dominant_key_concentrates_every_row() {
    let (block, mut p, bn) = sam(4, 1, 0);
    for param in p.iter_mut() {
        param.value = Tensor::zeros(param.value.shape().to_vec());
    }
    // key = 20·x[0], query = 1, so logits[n][m] = 20·x[0][m]
    p.get_mut(block.key.weight).value.data_mut()[0] = 20.0;
    p.get_mut(block.query.bias.unwrap()).value.data_mut()[0] = 1.0;
    let dominant = 5;
    let mut x = Tensor::zeros(vec![1, 4, 3, 3]);
    x.data_mut()[dominant] = 1.0;
    let (_, att) = run_sam(&block, &p, &bn, &x);
    for row in att.data().chunks(9) {
        assert!(row[dominant] > 0.99, "{row:?}");
    }
}

#[test]
fn sam_is_equivariant_to_spatial_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (block, mut p, bn) = sam(8, 2, 4);
    randomize(&mut p, &mut rng, 0.5);
    let (c, h, w) = (8, 3, 4);
    let n = h * w;
    let x = random_tensor(&[1, c, h, w], 1.0, &mut rng);
    let (base, _) = run_sam(&block, &p, &bn, &x);
    let permute = |t: &Tensor<f64>, perm: &[usize]| {
        Tensor::from_fn(vec![1, c, h, w], |i| {
            let (ch, pos) = (i / n, i % n);
            t.data()[ch * n + perm[pos]]
        })
    };
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (moved, _) = run_sam(&block, &p, &bn, &permute(&x, &perm));
        assert!(moved.max_abs_diff(&permute(&base, &perm)) < 1e-5);
    }
}

#[test]
fn sam_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..10 {
        let key = [1, 2][seed as usize % 2];
        let (block, mut p, bn) = sam(8, key, seed);
        randomize(&mut p, &mut rng, 0.5);
        let x = random_tensor(&[1, 8, 4, 4], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(p.iter().map(|q| q.value.clone()));
        let r = finite_diff_check(
            |tape, vars| {
                let mut ctx = Ctx::eval(tape, vars[1..].to_vec(), &bn);
                let y = block.forward(&mut ctx, vars[0])?;
                random_projection(tape, y, seed)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
