//! Central finite-difference checks of every layer's backward pass, in
//! double precision.
//!
//! Each check builds a scalar objective `L = sum(R * layer(x))` with a fixed
//! random weighting `R` (or the loss itself for softmax cross-entropy),
//! perturbs every input and parameter element by `+-EPSILON` and compares
//! `(L(+) - L(-)) / (2 EPSILON)` with the analytic gradient. The relative
//! error of one element is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
//! Only forward passes are used to build the numeric side.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::network::{ForwardPass, LayerSpec, Network, NetworkSpec};
use super::tensor::Tensor;

pub const EPSILON: f64 = 1e-4;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const SOFTMAX_TOLERANCE: f64 = 1e-6;
/// Denominator floor so that exactly-zero gradient pairs compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub elements: usize,
    /// Elements left out because the finite-difference probe crossed a
    /// ReLU or max-pool switch, where the function is not differentiable.
    pub skipped: usize,
}

impl GradCheck {
    /// Below tolerance, with at most a quarter of the elements skipped.
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.skipped * 4 <= self.elements
    }
}

impl fmt::Display for GradCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>6} elements  max rel err {:.3e}  tol {:.0e}  {}",
            self.name,
            self.elements,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        if self.skipped > 0 {
            write!(f, "  ({} at kinks skipped)", self.skipped)?;
        }
        Ok(())
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Numeric gradient of `f` at `x` by central differences.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + EPSILON;
            let up = f(&probe);
            probe[i] = orig - EPSILON;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * EPSILON)
        })
        .collect()
}

fn compare(name: &str, tolerance: f64, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "{name}: gradient lengths differ");
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max);
    GradCheck {
        name: name.to_string(),
        max_rel_error,
        tolerance,
        elements: analytic.len(),
        skipped: 0,
    }
}

/// Which side of every ReLU and which max-pool winner each activation is
/// on. Two inputs with equal patterns lie in the same smooth piece.
fn kink_pattern(spec: &NetworkSpec, x: &Tensor<f64>, pass: &ForwardPass<f64>) -> Vec<u32> {
    let mut pattern = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = if i == 0 { x } else { &pass.outputs()[i - 1] };
        match layer {
            LayerSpec::Relu => pattern.extend(input.as_slice().iter().map(|&v| u32::from(v > 0.0))),
            LayerSpec::MaxPool => {
                let [n, c, h, w] = input.shape();
                for b in 0..n {
                    for ch in 0..c {
                        let plane = input.channel(b, ch);
                        for py in 0..h / 2 {
                            for px in 0..w / 2 {
                                let cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                    .map(|(dy, dx)| plane[(2 * py + dy) * w + 2 * px + dx]);
                                let best = (0..4).fold(0, |m, k| if cells[k] > cells[m] { k } else { m });
                                pattern.push(best as u32);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    pattern
}

fn weighted_sum(r: &[f64], y: &Tensor<f64>) -> f64 {
    r.iter().zip(y.as_slice()).map(|(a, b)| a * b).sum()
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero (for ReLU kinks).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced at least 0.01 apart (for max-pool ties).
fn spread_values(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, idx.into_iter().map(|k| k as f64 * 0.01 - 0.3).collect()).expect("shape")
}

fn with(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), data.to_vec()).expect("same shape")
}

pub fn check_conv2d(seed: u64, stride: usize, pad: usize) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, [2, 3, 8, 8], -1.0, 1.0);
    let w = uniform(&mut rng, [4, 3, 3, 3], -0.5, 0.5);
    let b: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    let y = conv2d_forward(&x, &w, &b, stride, pad).expect("conv shapes");
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0).into_vec();
    let dy = with(&y, &r);
    let (dx, dw, db) = conv2d_backward(&x, &w, stride, pad, &dy).expect("conv shapes");
    let tag = format!("conv2d s{stride} p{pad}");
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| weighted_sum(&r, &conv2d_forward(x, w, b, stride, pad).unwrap());
    vec![
        compare(
            &format!("{tag} d_input"),
            LAYER_TOLERANCE,
            dx.as_slice(),
            &numeric_gradient(x.as_slice(), |v| loss(&with(&x, v), &w, &b)),
        ),
        compare(
            &format!("{tag} d_weights"),
            LAYER_TOLERANCE,
            dw.as_slice(),
            &numeric_gradient(w.as_slice(), |v| loss(&x, &with(&w, v), &b)),
        ),
        compare(
            &format!("{tag} d_bias"),
            LAYER_TOLERANCE,
            &db,
            &numeric_gradient(&b, |v| loss(&x, &w, v)),
        ),
    ]
}

pub fn check_batchnorm(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn([2, 3, 5, 5], |i| rng.random_range(-1.0..1.0) * (1 + i % 3) as f64 + (i % 3) as f64);
    let gamma: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (y, cache) = batchnorm_forward_train(&x, &gamma, &beta).expect("bn shapes");
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0).into_vec();
    let (dx, dg, db) = batchnorm_backward(&with(&y, &r), &cache, &gamma).expect("bn shapes");
    let loss = |x: &Tensor<f64>, g: &[f64], b: &[f64]| weighted_sum(&r, &batchnorm_forward_train(x, g, b).unwrap().0);
    vec![
        compare(
            "batchnorm d_input",
            LAYER_TOLERANCE,
            dx.as_slice(),
            &numeric_gradient(x.as_slice(), |v| loss(&with(&x, v), &gamma, &beta)),
        ),
        compare(
            "batchnorm d_gamma",
            LAYER_TOLERANCE,
            &dg,
            &numeric_gradient(&gamma, |v| loss(&x, v, &beta)),
        ),
        compare(
            "batchnorm d_beta",
            LAYER_TOLERANCE,
            &db,
            &numeric_gradient(&beta, |v| loss(&x, &gamma, v)),
        ),
    ]
}

pub fn check_relu(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(&mut rng, [2, 2, 5, 5]);
    let y = relu_forward(&x);
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0).into_vec();
    let dx = relu_backward(&y, &with(&y, &r));
    vec![compare(
        "relu d_input",
        LAYER_TOLERANCE,
        dx.as_slice(),
        &numeric_gradient(x.as_slice(), |v| weighted_sum(&r, &relu_forward(&with(&x, v)))),
    )]
}

pub fn check_maxpool(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = spread_values(&mut rng, [2, 2, 6, 7]);
    let (y, arg) = maxpool2_forward(&x).expect("pool shapes");
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0).into_vec();
    let dx = maxpool2_backward(x.shape(), &arg, &with(&y, &r));
    vec![compare(
        "maxpool d_input",
        LAYER_TOLERANCE,
        dx.as_slice(),
        &numeric_gradient(x.as_slice(), |v| weighted_sum(&r, &maxpool2_forward(&with(&x, v)).unwrap().0)),
    )]
}

pub fn check_upsample(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, [2, 2, 4, 3], -1.0, 1.0);
    let y = upsample2_forward(&x);
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0).into_vec();
    let dx = upsample2_backward(&with(&y, &r));
    vec![compare(
        "upsample d_input",
        LAYER_TOLERANCE,
        dx.as_slice(),
        &numeric_gradient(x.as_slice(), |v| weighted_sum(&r, &upsample2_forward(&with(&x, v)))),
    )]
}

/// Crop-concatenation followed by a 3x3 conv head.
pub fn check_crop_concat(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deep = uniform(&mut rng, [2, 2, 5, 5], -1.0, 1.0);
    let skip = uniform(&mut rng, [2, 3, 10, 9], -1.0, 1.0);
    let w = uniform(&mut rng, [2, 5, 3, 3], -0.5, 0.5);
    let b = vec![0.1, -0.2];
    let head = |d: &Tensor<f64>, s: &Tensor<f64>, w: &Tensor<f64>| {
        conv2d_forward(&crop_concat_forward(d, s).unwrap(), w, &b, 1, 0).unwrap()
    };
    let y = head(&deep, &skip, &w);
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0).into_vec();
    let cat = crop_concat_forward(&deep, &skip).unwrap();
    let (dcat, dw, _) = conv2d_backward(&cat, &w, 1, 0, &with(&y, &r)).unwrap();
    let (dd, ds) = crop_concat_backward(&dcat, deep.channels(), skip.shape()).unwrap();
    vec![
        compare(
            "crop_concat d_deep",
            LAYER_TOLERANCE,
            dd.as_slice(),
            &numeric_gradient(deep.as_slice(), |v| weighted_sum(&r, &head(&with(&deep, v), &skip, &w))),
        ),
        compare(
            "crop_concat d_skip",
            LAYER_TOLERANCE,
            ds.as_slice(),
            &numeric_gradient(skip.as_slice(), |v| weighted_sum(&r, &head(&deep, &with(&skip, v), &w))),
        ),
        compare(
            "crop_concat head d_weights",
            LAYER_TOLERANCE,
            dw.as_slice(),
            &numeric_gradient(w.as_slice(), |v| weighted_sum(&r, &head(&deep, &skip, &with(&w, v)))),
        ),
    ]
}

/// Softmax cross-entropy with labels larger than the logits (cropped).
pub fn check_softmax_ce(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uniform(&mut rng, [2, 2, 5, 5], -3.0, 3.0);
    let labels = Tensor::from_fn([2, 1, 7, 7], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    let (_, d) = softmax_ce(&logits, &labels, true).unwrap();
    vec![compare(
        "softmax_ce d_logits",
        SOFTMAX_TOLERANCE,
        d.as_slice(),
        &numeric_gradient(logits.as_slice(), |v| softmax_ce(&with(&logits, v), &labels, true).unwrap().0),
    )]
}

/// Whole-network check on a reduced copy of the default architecture
/// (fewer channels, same layer types and skip wiring), every parameter and
/// input element.
pub fn check_network(seed: u64) -> Vec<GradCheck> {
    use LayerSpec::*;
    let conv = |k, i, o| Conv {
        kernel: k,
        in_channels: i,
        out_channels: o,
        stride: 1,
        pad: 0,
    };
    let spec = NetworkSpec {
        input_channels: 1,
        layers: vec![
            conv(3, 1, 3),
            BatchNorm { channels: 3 },
            Relu,
            MaxPool,
            conv(3, 3, 4),
            BatchNorm { channels: 4 },
            Relu,
            Upsample,
            CropConcat { source: 2 },
            conv(1, 7, 2),
        ],
    };
    let mut net = Network::<f64>::new(spec, seed).expect("valid spec");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let x = uniform(&mut rng, [2, 1, 12, 12], 0.0, 1.0);
    let pass = net.forward_train(&x).expect("shapes");
    let out = pass.logits().shape();
    let labels = Tensor::from_fn([2, 1, 12, 12], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    let (_, d) = softmax_ce(pass.logits(), &labels, true).unwrap();
    let grads = net.backward(&pass, &d).expect("shapes");
    debug_assert_eq!(out[1], 2);

    // Loss plus the kink pattern it was evaluated in.
    let probe = |n: &mut Network<f64>, x: &Tensor<f64>| {
        let p = n.forward_train(x).unwrap();
        let loss = softmax_ce(p.logits(), &labels, true).unwrap().0;
        (loss, kink_pattern(n.spec(), x, &p))
    };
    let smooth_gradient = |start: &[f64], mut eval: Box<dyn FnMut(&[f64]) -> (f64, Vec<u32>) + '_>| {
        let base = eval(start).1;
        let mut v = start.to_vec();
        (0..v.len())
            .map(|i| {
                let orig = v[i];
                let mut smooth = true;
                let mut central = |h: f64| {
                    v[i] = orig + h;
                    let (up, pu) = eval(&v);
                    v[i] = orig - h;
                    let (down, pd) = eval(&v);
                    v[i] = orig;
                    smooth &= pu == base && pd == base;
                    (up - down) / (2.0 * h)
                };
                // Richardson step: cancels the h^2 term that dominates for
                // the composed network's small, curved input gradients.
                let (d1, d2) = (central(EPSILON), central(EPSILON / 2.0));
                smooth.then(|| (4.0 * d2 - d1) / 3.0)
            })
            .collect::<Vec<Option<f64>>>()
    };
    // A finite difference of the loss resolves gradients only down to a
    // few ulps of the loss over the step. Parameters whose true gradient is
    // exactly zero (a conv bias feeding a batch norm) sit at that noise
    // level, so the relative-error denominator is floored there.
    let base_loss = softmax_ce(pass.logits(), &labels, true).unwrap().0;
    let floor = (16.0 * base_loss.abs() * f64::EPSILON / EPSILON / LAYER_TOLERANCE).max(REL_FLOOR);
    let compare_smooth = |name: &str, analytic: &[f64], numeric: &[Option<f64>]| {
        let errors: Vec<f64> = analytic
            .iter()
            .zip(numeric)
            .filter_map(|(&a, n)| n.map(|n| (a - n).abs() / a.abs().max(n.abs()).max(floor)))
            .collect();
        GradCheck {
            name: name.to_string(),
            max_rel_error: errors.iter().copied().fold(0.0, f64::max),
            tolerance: LAYER_TOLERANCE,
            elements: analytic.len(),
            skipped: analytic.len() - errors.len(),
        }
    };

    let mut results = Vec::new();
    let analytic: Vec<f64> = grads.flat().iter().flat_map(|g| g.iter().copied()).collect();
    let flat: Vec<f64> = net.parameters().iter().flat_map(|p| p.iter().copied()).collect();
    let lens: Vec<usize> = net.parameters().iter().map(|p| p.len()).collect();
    let mut probe_net = net.clone();
    let numeric = smooth_gradient(
        &flat,
        Box::new(|v: &[f64]| {
            let mut off = 0;
            for (p, &n) in probe_net.parameters_mut().into_iter().zip(&lens) {
                p.copy_from_slice(&v[off..off + n]);
                off += n;
            }
            probe(&mut probe_net, &x)
        }),
    );
    results.push(compare_smooth("network d_parameters", &analytic, &numeric));
    let mut probe_net = net.clone();
    let numeric = smooth_gradient(x.as_slice(), Box::new(|v: &[f64]| probe(&mut probe_net, &with(&x, v))));
    results.push(compare_smooth("network d_input", grads.input.as_slice(), &numeric));
    results
}

/// Runs every layer check.
pub fn run_all(seed: u64) -> Vec<GradCheck> {
    let mut out = Vec::new();
    out.extend(check_conv2d(seed, 1, 0));
    out.extend(check_conv2d(seed + 1, 2, 1));
    out.extend(check_batchnorm(seed + 2));
    out.extend(check_relu(seed + 3));
    out.extend(check_maxpool(seed + 4));
    out.extend(check_upsample(seed + 5));
    out.extend(check_crop_concat(seed + 6));
    out.extend(check_softmax_ce(seed + 7));
    out.extend(check_network(seed + 8));
    out
}
