//! Central finite-difference gradient checks on the `f64` engine.
//!
//! Every check uses the scalar loss `sum(out * r)` for a fixed random `r`,
//! so the upstream gradient handed to `backward` is `r` itself.

use crate::rng::ComplexGaussian;

use super::{relu_backward, relu_forward, BatchNorm, Conv2d, Model, Tensor4};

/// Perturbation size of the central differences.
pub const STEP: f64 = 4e-5;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    /// Largest relative error, with differences inside the central
    /// difference's rounding noise counted as zero.
    pub max_rel_err: f64,
    /// Largest relative error without the rounding allowance.
    pub max_raw_rel_err: f64,
    /// Entry with the largest error, e.g. `block0.middle1.weight[17]`.
    pub worst: String,
    pub checks: usize,
    /// Perturbations skipped because they flipped a ReLU.
    pub kinks: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64, scale: f64) {
        let err = rel_err_scaled(analytic, numeric, scale);
        self.max_raw_rel_err = self.max_raw_rel_err.max(rel_err(analytic, numeric));
        self.checks += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = name();
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checks += other.checks;
        self.kinks += other.kinks;
        self.max_raw_rel_err = self.max_raw_rel_err.max(other.max_raw_rel_err);
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst;
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-2)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// [`rel_err`], or zero when the difference is within the rounding noise of
/// a central difference on a loss whose terms sum to `scale` in magnitude.
pub fn rel_err_scaled(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let noise = 8.0 * f64::EPSILON * scale / STEP;
    if (analytic - numeric).abs() <= noise {
        0.0
    } else {
        rel_err(analytic, numeric)
    }
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn loss_scale(out: &Tensor4<f64>, r: &Tensor4<f64>) -> f64 {
    out.as_slice().iter().zip(r.as_slice()).map(|(o, w)| (o * w).abs()).sum()
}

/// Smallest distance of any ReLU input from its kink that
/// [`kink_free_input`] accepts.
pub const MARGIN: f64 = 10.0 * STEP;

/// Draws standard-normal inputs until every ReLU input of `model` lies at
/// least [`MARGIN`] from zero, so that perturbations stay on one linear
/// piece.
pub fn kink_free_input(model: &Model<f64>, dims: [usize; 4], rng: &mut ComplexGaussian) -> Tensor4<f64> {
    let mut probe = model.clone();
    let n = dims.iter().product();
    loop {
        let x = Tensor4::from_vec(dims, (0..n).map(|_| rng.standard_normal()).collect()).expect("dims match");
        probe.forward_train(&x).expect("input matches the model");
        if probe.relu_inputs().iter().all(|z| z.abs() >= MARGIN) {
            return x;
        }
    }
}

/// Derivative at zero of `f(delta)` from central differences at `STEP` and
/// `STEP / 2`, combined as `(4 D(h/2) - D(h)) / 3` to cancel the `h^2` term.
fn derivative(mut f: impl FnMut(f64) -> Option<f64>) -> Option<f64> {
    let mut diff = |h: f64| -> Option<f64> { Some((f(h)? - f(-h)?) / (2.0 * h)) };
    let coarse = diff(STEP)?;
    let fine = diff(STEP / 2.0)?;
    Some((4.0 * fine - coarse) / 3.0)
}

/// Derivative of `loss` with respect to one entry of a buffer.
fn central<F>(values: &mut [f64], i: usize, mut loss: F) -> Option<f64>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let orig = values[i];
    derivative(|delta| {
        values[i] = orig + delta;
        let l = loss(values);
        values[i] = orig;
        l
    })
}

/// Checks weight, bias and input gradients of a convolution, all entries.
pub fn check_conv(conv: &Conv2d<f64>, x: &Tensor4<f64>, r: &Tensor4<f64>) -> GradCheckReport {
    let mut layer = conv.clone();
    layer.weight.zero_grad();
    layer.bias.zero_grad();
    let out = layer.forward_train(x).expect("input matches the layer");
    let dx = layer.backward(r);
    let scale = loss_scale(&out, r);
    let mut report = GradCheckReport::default();

    let mut probe = conv.clone();
    for i in 0..probe.weight.len() {
        let mut w = probe.weight.value.clone();
        let numeric = central(&mut w, i, |w| {
            probe.weight.value.copy_from_slice(w);
            Some(dot(&probe.forward(x).unwrap(), r))
        });
        probe.weight.value.copy_from_slice(&conv.weight.value);
        report.record(|| format!("conv.weight[{i}]"), layer.weight.grad[i], numeric.unwrap(), scale);
    }
    for i in 0..probe.bias.len() {
        let mut b = probe.bias.value.clone();
        let numeric = central(&mut b, i, |b| {
            probe.bias.value.copy_from_slice(b);
            Some(dot(&probe.forward(x).unwrap(), r))
        });
        probe.bias.value.copy_from_slice(&conv.bias.value);
        report.record(|| format!("conv.bias[{i}]"), layer.bias.grad[i], numeric.unwrap(), scale);
    }
    let mut xv = x.as_slice().to_vec();
    for i in 0..xv.len() {
        let numeric = central(&mut xv, i, |v| {
            let xp = Tensor4::from_vec(x.dims(), v.to_vec()).unwrap();
            Some(dot(&conv.forward(&xp).unwrap(), r))
        });
        report.record(|| format!("conv.input[{i}]"), dx.as_slice()[i], numeric.unwrap(), scale);
    }
    report
}

/// Checks `gamma`, `beta` and input gradients of batch normalization in
/// training mode, all entries.
pub fn check_batchnorm(bn: &BatchNorm<f64>, x: &Tensor4<f64>, r: &Tensor4<f64>) -> GradCheckReport {
    let mut layer = bn.clone();
    layer.gamma.zero_grad();
    layer.beta.zero_grad();
    let out = layer.forward_train(x).expect("input matches the layer");
    let dx = layer.backward(r);
    let scale = loss_scale(&out, r);
    let mut report = GradCheckReport::default();
    let eval = |b: &BatchNorm<f64>, x: &Tensor4<f64>| dot(&b.clone().forward_train(x).unwrap(), r);

    for (name, analytic) in [("gamma", &layer.gamma.grad), ("beta", &layer.beta.grad)] {
        for c in 0..bn.channels() {
            let mut probe = bn.clone();
            let mut vals = if name == "gamma" { bn.gamma.value.clone() } else { bn.beta.value.clone() };
            let numeric = central(&mut vals, c, |v| {
                let target = if name == "gamma" { &mut probe.gamma } else { &mut probe.beta };
                target.value.copy_from_slice(v);
                Some(eval(&probe, x))
            });
            report.record(|| format!("bn.{name}[{c}]"), analytic[c], numeric.unwrap(), scale);
        }
    }
    let mut xv = x.as_slice().to_vec();
    for i in 0..xv.len() {
        let numeric = central(&mut xv, i, |v| Some(eval(bn, &Tensor4::from_vec(x.dims(), v.to_vec()).unwrap())));
        report.record(|| format!("bn.input[{i}]"), dx.as_slice()[i], numeric.unwrap(), scale);
    }
    report
}

/// Checks the ReLU input gradient; entries within `STEP` of the kink count
/// as skipped.
pub fn check_relu(x: &Tensor4<f64>, r: &Tensor4<f64>) -> GradCheckReport {
    let y = relu_forward(x);
    let dx = relu_backward(x, r);
    let scale = loss_scale(&y, r);
    let mut report = GradCheckReport::default();
    let mut xv = x.as_slice().to_vec();
    for i in 0..xv.len() {
        if xv[i].abs() <= STEP {
            report.kinks += 1;
            report.checks += 1;
            continue;
        }
        let numeric = central(&mut xv, i, |v| {
            Some(dot(&relu_forward(&Tensor4::from_vec(x.dims(), v.to_vec()).unwrap()), r))
        });
        report.record(|| format!("relu.input[{i}]"), dx.as_slice()[i], numeric.unwrap(), scale);
    }
    report
}

/// Checks every parameter tensor of a model in training mode (up to
/// `per_tensor` spread-out entries each) and every input entry.
/// Perturbations that change any ReLU's active set are skipped, since the
/// loss is not differentiable across the kink.
pub fn check_model(model: &Model<f64>, x: &Tensor4<f64>, r: &Tensor4<f64>, per_tensor: usize) -> GradCheckReport {
    let mut trained = model.clone();
    trained.zero_grad();
    let out = trained.forward_train(x).expect("input matches the model");
    let base = trained.relu_pattern();
    let dx = trained.backward(r);
    let scale = loss_scale(&out, r);
    let grads: Vec<(String, Vec<f64>)> = trained
        .named_params_mut()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();

    let mut probe = model.clone();
    let loss = |m: &mut Model<f64>, x: &Tensor4<f64>| -> Option<f64> {
        let l = dot(&m.forward_train(x).unwrap(), r);
        (m.relu_pattern() == base).then_some(l)
    };
    let mut report = GradCheckReport::default();
    for (t, (name, grad)) in grads.iter().enumerate() {
        let len = grad.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|i| (i * 7919 + t * 31) % len).collect()
        };
        let mut part = GradCheckReport::default();
        for i in picks {
            let orig = probe.named_params_mut()[t].1.value[i];
            let numeric = derivative(|delta| {
                probe.named_params_mut()[t].1.value[i] = orig + delta;
                let l = loss(&mut probe, x);
                probe.named_params_mut()[t].1.value[i] = orig;
                l
            });
            match numeric {
                Some(n) => part.record(|| format!("{name}[{i}]"), grad[i], n, scale),
                None => {
                    part.checks += 1;
                    part.kinks += 1;
                }
            }
        }
        report.merge(part);
    }
    let mut xv = x.as_slice().to_vec();
    for i in 0..xv.len() {
        let numeric = central(&mut xv, i, |v| loss(&mut probe, &Tensor4::from_vec(x.dims(), v.to_vec()).unwrap()));
        match numeric {
            Some(n) => report.record(|| format!("input[{i}]"), dx.as_slice()[i], n, scale),
            None => {
                report.checks += 1;
                report.kinks += 1;
            }
        }
    }
    report
}
