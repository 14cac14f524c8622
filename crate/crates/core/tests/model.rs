use fbnet_core::backbone::BackboneConfig;
use fbnet_core::model::{fuse_features, ClassifierHead, MidTransform, Model, ModelConfig, Strategy};
use fbnet_core::nn::{BnBuffers, Builder, Ctx, ParamStore};
use fbnet_core::tensor::gradcheck::{finite_diff_check, random_projection, random_tensor};
use fbnet_core::tensor::{Tape, Tensor};
use fbnet_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(strategy: Strategy) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stage_channels: [4, 4, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
        },
        c_mid: 4,
        c_sam: 8,
        cam_ratio: 4,
        sam_ratio: 2,
        num_classes: 3,
        aux_enabled: true,
        strategy,
        head_dropout: 0.1,
    }
}

fn toy(strategy: Strategy) -> ModelConfig {
    ModelConfig {
        strategy,
        ..ModelConfig::toy()
    }
}

fn random_labels(shape: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Tensor<i32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0..classes as i32))
}

#[test]
fn every_strategy_trains_one_step_on_a_64_pixel_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_tensor(&[2, 3, 64, 64], 1.0, &mut rng).cast::<f32>();
    let labels = random_labels(&[2, 16, 16], 5, &mut rng);
    let aux_labels = random_labels(&[2, 8, 8], 5, &mut rng);
    for s in Strategy::ALL {
        let mut model = Model::<f32>::new(&toy(s), 3).unwrap();
        let tape = Tape::new();
        let vars = model.params.attach(&tape);
        let (out, loss) = {
            let mut ctx = Ctx::train(&tape, vars.clone(), &mut model.buffers, 0);
            let x = tape.constant(img.clone());
            let out = model.network.forward(&mut ctx, x).unwrap();
            let mut loss = tape.cross_entropy(out.main, &labels, 255).unwrap();
            if let Some(aux) = out.aux {
                let a = tape.cross_entropy(aux, &aux_labels, 255).unwrap();
                let a = tape.scale(a, 0.4).unwrap();
                loss = tape.add(loss, a).unwrap();
            }
            (out, loss)
        };
        assert_eq!(tape.shape(out.main), vec![2, 5, 16, 16], "{s}");
        assert_eq!(out.aux.map(|a| tape.shape(a)), s.has_sam().then(|| vec![2, 5, 8, 8]), "{s}");
        let grads = tape.backward(loss).unwrap();
        let reached = vars.iter().filter(|&&v| grads.get(v).is_some()).count();
        assert_eq!(reached, vars.len(), "{s}: every parameter receives a gradient");
        assert!(tape.value(loss).is_finite());
    }
}

#[test]
fn auxiliary_output_follows_spatial_attention() {
    let img = Tensor::full(vec![1, 3, 32, 32], 0.3f32);
    let sam = Model::<f32>::new(&toy(Strategy::Sam), 0).unwrap().infer(&img).unwrap();
    let cam = Model::<f32>::new(&toy(Strategy::Cam), 0).unwrap().infer(&img).unwrap();
    assert!(sam.aux.is_some());
    assert!(cam.aux.is_none());
    let no_aux = ModelConfig {
        aux_enabled: false,
        ..toy(Strategy::Full)
    };
    assert!(Model::<f32>::new(&no_aux, 0).unwrap().infer(&img).unwrap().aux.is_none());
}

#[test]
fn resolution_contract_for_inputs_divisible_by_eight() {
    for s in [Strategy::Full, Strategy::Parallel, Strategy::FeatureFusion] {
        let model = Model::<f32>::new(&toy(s), 1).unwrap();
        for (h, w) in [(8, 8), (16, 24), (32, 32), (40, 16)] {
            let out = model.infer(&Tensor::full(vec![1, 3, h, w], 0.5)).unwrap();
            assert_eq!(out.main.shape(), &[1, 5, h / 4, w / 4]);
            if let Some(aux) = out.aux {
                assert_eq!(aux.shape(), &[1, 5, h / 8, w / 8]);
                assert_eq!(aux.shape()[2] * 2, out.main.shape()[2]);
            }
        }
        assert!(matches!(
            model.infer(&Tensor::full(vec![1, 3, 20, 16], 0.5)),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn fused_width_is_three_mid_widths_plus_sam_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let c_mid = rng.random_range(1..9);
        let c_sam = 4 * rng.random_range(1..4);
        let cfg = ModelConfig {
            c_mid,
            c_sam,
            cam_ratio: 1,
            ..micro(Strategy::Full)
        };
        let model = Model::<f64>::new(&cfg, 0).unwrap();
        let tape = Tape::inference();
        let mut ctx = Ctx::eval(&tape, model.params.attach(&tape), &model.buffers);
        let x = tape.constant(Tensor::full(vec![1, 3, 16, 16], 0.2));
        let out = model.forward(&mut ctx, x).unwrap();
        assert_eq!(tape.shape(out.fused.unwrap())[1], 3 * c_mid + c_sam);
        assert_eq!(cfg.fused_channels(), 3 * c_mid + c_sam);
    }
    assert_eq!(ModelConfig::paper_scale().fused_channels(), 1280);
    assert_eq!(
        ModelConfig {
            c_mid: 32,
            c_sam: 64,
            ..ModelConfig::toy()
        }
        .fused_channels(),
        160
    );
}

#[test]
fn fused_map_starts_with_the_shallowest_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = Model::<f64>::new(&micro(Strategy::Full), 2).unwrap();
    let tape = Tape::inference();
    let mut ctx = Ctx::eval(&tape, model.params.attach(&tape), &model.buffers);
    let x = tape.constant(random_tensor(&[2, 3, 16, 16], 1.0, &mut rng));
    let out = model.forward(&mut ctx, x).unwrap();
    let fused = tape.value(out.fused.unwrap()).clone();
    let m1 = tape.value(out.mid.unwrap()[0]).clone();
    let [b, c_mid, h, w] = m1.dims4().unwrap();
    let c_l = fused.shape()[1];
    for bi in 0..b {
        for k in 0..c_mid {
            let plane = h * w;
            let a = &fused.data()[(bi * c_l + k) * plane..][..plane];
            let e = &m1.data()[(bi * c_mid + k) * plane..][..plane];
            assert_eq!(a, e);
        }
    }
}

#[test]
fn fusion_rejects_mismatched_extents() {
    let tape = Tape::<f64>::inference();
    let f1 = tape.constant(Tensor::zeros(vec![1, 2, 8, 8]));
    let ok = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let bad = tape.constant(Tensor::zeros(vec![1, 3, 3, 4]));
    assert_eq!(tape.shape(fuse_features(&tape, f1, [ok, ok, ok]).unwrap()), vec![1, 11, 8, 8]);
    assert!(matches!(fuse_features(&tape, f1, [ok, bad, ok]), Err(Error::Shape { .. })));
}

#[test]
fn series_and_parallel_differ_under_shared_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let series = Model::<f64>::new(&toy(Strategy::Series), 9).unwrap();
    let parallel = Model::<f64>::new(&toy(Strategy::Parallel), 9).unwrap();
    assert_eq!(series.params, parallel.params);
    let img = random_tensor(&[1, 3, 32, 32], 1.0, &mut rng);
    let a = series.infer(&img).unwrap().main;
    let b = parallel.infer(&img).unwrap().main;
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_tensor(&[2, 3, 32, 32], 1.0, &mut rng).cast::<f32>();
    for s in Strategy::ALL {
        let model = Model::<f32>::new(&toy(s), 4).unwrap();
        let first = model.infer(&img).unwrap();
        let second = model.infer(&img).unwrap();
        assert_eq!(first.main, second.main);
        assert_eq!(first.aux, second.aux);
    }
}

#[test]
fn head_emits_one_logit_per_class() {
    for classes in [2, 5, 11] {
        let cfg = ModelConfig {
            num_classes: classes,
            ..toy(Strategy::Full)
        };
        let out = Model::<f32>::new(&cfg, 0).unwrap().infer(&Tensor::full(vec![1, 3, 16, 16], 0.1)).unwrap();
        assert_eq!(out.main.shape()[1], classes);
    }
}

fn randomize(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for q in p.iter_mut() {
        let shape = q.value.shape().to_vec();
        q.value = if q.name.ends_with("gamma") {
            Tensor::from_fn(shape, |_| 1.0 + rng.random_range(-0.3..0.3))
        } else {
            random_tensor(&shape, 0.5, rng)
        };
    }
}

#[test]
fn mid_transform_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..10 {
        let mut p = ParamStore::new();
        let mut bn = BnBuffers::new();
        let block = MidTransform::new(&mut Builder::new(&mut p, &mut bn, seed), 4, 3);
        randomize(&mut p, &mut rng);
        let mut inputs = vec![random_tensor(&[1, 4, 3, 3], 1.0, &mut rng)];
        inputs.extend(p.iter().map(|q| q.value.clone()));
        let r = finite_diff_check(
            |tape, vars| {
                let mut stats = bn.clone();
                let mut ctx = Ctx::train(tape, vars[1..].to_vec(), &mut stats, 0);
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
fn mid_transform_width_is_independent_of_input_width() {
    for cin in [3, 16, 40] {
        let mut p = ParamStore::<f32>::new();
        let mut bn = BnBuffers::new();
        let block = MidTransform::new(&mut Builder::new(&mut p, &mut bn, 0), cin, 32);
        let tape = Tape::inference();
        let mut ctx = Ctx::eval(&tape, p.attach(&tape), &bn);
        let x = tape.constant(Tensor::full(vec![1, cin, 5, 6], 1.0));
        assert_eq!(tape.shape(block.forward(&mut ctx, x).unwrap()), vec![1, 32, 5, 6]);
    }
}

#[test]
fn classifier_head_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10 {
        let mut p = ParamStore::new();
        let mut bn = BnBuffers::new();
        let head = ClassifierHead::new(&mut Builder::new(&mut p, &mut bn, seed), 8, 3, 0.1);
        randomize(&mut p, &mut rng);
        let mut inputs = vec![random_tensor(&[2, 8, 3, 3], 1.0, &mut rng)];
        inputs.extend(p.iter().map(|q| q.value.clone()));
        let r = finite_diff_check(
            |tape, vars| {
                let mut stats = bn.clone();
                // a fixed dropout seed keeps the mask identical across probes
                let mut ctx = Ctx::train(tape, vars[1..].to_vec(), &mut stats, seed);
                let y = head.forward(&mut ctx, vars[0])?;
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
fn fusion_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..10 {
        let inputs = vec![
            random_tensor(&[1, 2, 4, 6], 1.0, &mut rng),
            random_tensor(&[1, 1, 2, 3], 1.0, &mut rng),
            random_tensor(&[1, 2, 2, 3], 1.0, &mut rng),
            random_tensor(&[1, 3, 2, 3], 1.0, &mut rng),
        ];
        let r = finite_diff_check(
            |tape, v| {
                let y = fuse_features(tape, v[0], [v[1], v[2], v[3]])?;
                random_projection(tape, y, seed)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

/// Main plus weighted auxiliary cross-entropy, as in training.
fn micro_loss(
    model: &Model<f64>,
    tape: &Tape<f64>,
    vars: &[fbnet_core::Var],
    img: &Tensor<f64>,
    labels: &Tensor<i32>,
    aux_labels: &Tensor<i32>,
) -> fbnet_core::Result<fbnet_core::Var> {
    let mut stats = model.buffers.clone();
    let mut ctx = Ctx::train(tape, vars.to_vec(), &mut stats, 5);
    let x = tape.constant(img.clone());
    let out = model.forward(&mut ctx, x)?;
    let main = tape.cross_entropy(out.main, labels, 255)?;
    let aux = tape.cross_entropy(out.aux.expect("aux head"), aux_labels, 255)?;
    let aux = tape.scale(aux, 0.4)?;
    tape.add(main, aux)
}

#[test]
fn full_micro_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut model = Model::<f64>::new(&micro(Strategy::Full), 21).unwrap();
    randomize(&mut model.params, &mut rng);
    let img = random_tensor(&[2, 3, 16, 16], 1.0, &mut rng);
    let labels = random_labels(&[2, 4, 4], 3, &mut rng);
    let aux_labels = random_labels(&[2, 2, 2], 3, &mut rng);
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|q| q.value.clone()).collect();
    let r = finite_diff_check(|tape, vars| micro_loss(&model, tape, vars, &img, &labels, &aux_labels), &inputs, 1e-6)
        .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

/// Weights and bias of a k×k convolution.
fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

fn norm(c: usize) -> usize {
    2 * c
}

#[test]
fn toy_full_parameter_count_matches_hand_count() {
    let model = Model::<f32>::new(&toy(Strategy::Full), 0).unwrap();
    let count = model.parameter_count();
    let expected = [
        ("backbone", 310_608),
        ("mid1", conv(3, 16, 32) + norm(32) + conv(3, 32, 32) + norm(32)),
        ("mid2", conv(3, 32, 32) + norm(32) + conv(3, 32, 32) + norm(32)),
        ("mid3", conv(3, 64, 32) + norm(32) + conv(3, 32, 32) + norm(32)),
        ("f4_projection", conv(3, 128, 64) + norm(64)),
        ("sam", 2 * conv(1, 64, 8) + conv(1, 64, 64)),
        ("cam", conv(1, 160, 40) + conv(1, 40, 160)),
        ("head", conv(3, 160, 40) + norm(40) + conv(1, 40, 5)),
        ("aux_head", conv(3, 64, 16) + norm(16) + conv(1, 16, 5)),
    ];
    let modules: Vec<(&str, usize)> = count.modules.iter().map(|(m, n)| (m.as_str(), *n)).collect();
    assert_eq!(modules, expected);
    assert_eq!(count.total, expected.iter().map(|(_, n)| n).sum::<usize>());
    assert_eq!(count.total, model.params.scalar_count());
}

#[test]
fn complete_model_has_more_parameters_than_single_modules() {
    let total = |s| Model::<f32>::new(&toy(s), 0).unwrap().parameter_count().total;
    let full = total(Strategy::Full);
    assert!(total(Strategy::Sam) < full);
    assert!(total(Strategy::Cam) < full);
}
