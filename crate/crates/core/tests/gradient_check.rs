use irs_core::nn::gradcheck::{check_batchnorm, check_conv, check_model, check_relu, kink_free_input, GradCheckReport};
use irs_core::nn::{adam_step, AdamConfig, BatchNorm, Conv2d, Model, ModelArchitecture, Tensor4};
use irs_core::rng::ComplexGaussian;

const TOL: f64 = 1e-6;

fn random(dims: [usize; 4], rng: &mut ComplexGaussian) -> Tensor4<f64> {
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| rng.standard_normal()).collect()).unwrap()
}

fn assert_passes(report: GradCheckReport) {
    assert!(report.checks > report.kinks, "{report:?}");
    assert!(report.max_raw_rel_err < TOL, "{report:?}");
    assert!(report.kinks * 20 <= report.checks, "{report:?}");
}

/// Model with batch-norm affine terms and biases moved off their defaults.
fn perturbed(arch: ModelArchitecture, seed: u64, rng: &mut ComplexGaussian) -> Model<f64> {
    let mut model = Model::<f64>::new(arch, seed).unwrap();
    for (name, p) in model.named_params_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            for v in p.value.iter_mut() {
                *v += 0.3 * rng.standard_normal();
            }
        }
    }
    model
}

fn check(arch: ModelArchitecture, per_tensor: usize, seed: u64) {
    let mut rng = ComplexGaussian::new(seed);
    let model = perturbed(arch, seed, &mut rng);
    let x = kink_free_input(&model, [2, 2, 3, 3], &mut rng);
    let r = random([2, 2, 3, 3], &mut rng);
    assert_passes(check_model(&model, &x, &r, per_tensor));
}

#[test]
fn proposed_model_gradients() {
    check(ModelArchitecture::proposed(), 4, 1);
}

#[test]
fn residual_model_gradients() {
    check(ModelArchitecture::drn_style(1), 4, 2);
}

#[test]
fn narrow_model_all_entries() {
    let arch = ModelArchitecture {
        num_blocks: 3,
        middle_repeats: 1,
        middle_per_repeat: 4,
        width: 3,
        residual_skip: false,
    };
    check(arch, usize::MAX, 3);
}

#[test]
fn convolution_gradients() {
    let mut rng = ComplexGaussian::new(4);
    let mut conv = Conv2d::<f64>::he_normal(2, 3, &mut rng);
    for b in conv.bias.value.iter_mut() {
        *b = rng.standard_normal();
    }
    let x = random([2, 2, 3, 3], &mut rng);
    let r = random([2, 3, 3, 3], &mut rng);
    let report = check_conv(&conv, &x, &r);
    assert_eq!(report.checks, conv.weight.len() + conv.bias.len() + 36);
    assert_passes(report);
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ComplexGaussian::new(5);
    let mut bn = BatchNorm::<f64>::new(2);
    for (g, b) in bn.gamma.value.iter_mut().zip(bn.beta.value.iter_mut()) {
        *g = 1.0 + 0.5 * rng.standard_normal();
        *b = rng.standard_normal();
    }
    let x = random([2, 2, 3, 3], &mut rng);
    let r = random([2, 2, 3, 3], &mut rng);
    let report = check_batchnorm(&bn, &x, &r);
    assert_eq!(report.checks, 4 + 36);
    assert_passes(report);
}

#[test]
fn relu_gradients() {
    let mut rng = ComplexGaussian::new(6);
    let x = random([2, 2, 3, 3], &mut rng);
    let r = random([2, 2, 3, 3], &mut rng);
    assert_passes(check_relu(&x, &r));
}

#[test]
fn f32_engine_agrees_with_f64() {
    let arch = ModelArchitecture::proposed();
    let m64 = Model::<f64>::new(arch, 9).unwrap();
    let mut m32: Model<f32> = m64.cast();
    let mut m64 = m64;
    let mut rng = ComplexGaussian::new(9);
    let x = random([2, 2, 3, 3], &mut rng);
    let r = random([2, 2, 3, 3], &mut rng);
    m64.forward_train(&x).unwrap();
    m64.backward(&r);
    m32.forward_train(&x.cast()).unwrap();
    m32.backward(&r.cast());
    for ((name, a), (_, b)) in m64.named_params_mut().into_iter().zip(m32.named_params_mut()) {
        let scale = a.grad.iter().fold(0.0f64, |s, g| s.max(g.abs())).max(1e-2);
        for (ga, gb) in a.grad.iter().zip(&b.grad) {
            assert!((ga - *gb as f64).abs() / scale < 1e-3, "{name}: {ga} vs {gb}");
        }
    }
}

#[test]
fn training_steps_are_deterministic() {
    let run = || {
        let mut rng = ComplexGaussian::new(11);
        let mut model = Model::<f32>::new(ModelArchitecture::proposed(), 11).unwrap();
        let x = random([4, 2, 4, 9], &mut rng).cast::<f32>();
        let target = random([4, 2, 4, 9], &mut rng).cast::<f32>();
        for _ in 0..10 {
            model.zero_grad();
            let out = model.forward_train(&x).unwrap();
            let mut g = out.clone();
            for (v, t) in g.as_mut_slice().iter_mut().zip(target.as_slice()) {
                *v = 2.0 * (*v - t);
            }
            model.backward(&g);
            adam_step(&mut model, &AdamConfig::with_lr(1e-3)).unwrap();
        }
        model
    };
    let (mut a, mut b) = (run(), run());
    assert_eq!(a.step, 10);
    for ((_, p), (_, q)) in a.named_params_mut().into_iter().zip(b.named_params_mut()) {
        assert!(p.value.iter().zip(&q.value).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

