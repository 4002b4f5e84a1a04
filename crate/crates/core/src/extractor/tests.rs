use super::*;
use crate::numerics::{dot, RngStream};
use rand::Rng;

fn conv(out_channels: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel,
        stride,
        padding: None,
    }
}

fn params(seed: u64) -> ExtractorParams {
    ExtractorParams {
        seed,
        init_scale: 1.0,
    }
}

fn random_input(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed).rng();
    (0..len).map(|_| rng.random::<f64>()).collect()
}

/// Straightforward re-implementation used as an oracle: every output value is
/// computed independently from the definition, with explicit bounds checks.
fn naive_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    let spec = net.spec();
    let (mut c, mut h, mut w) = spec.input_shape;
    let mut cur = x.to_vec();
    for (k, layer) in spec.layers.iter().enumerate() {
        let wts = &net.weights()[k];
        cur = match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let p = padding.unwrap_or(kernel / 2) as isize;
                let oh = (h + 2 * p as usize - kernel) / stride + 1;
                let ow = (w + 2 * p as usize - kernel) / stride + 1;
                let mut out = vec![0.0; out_channels * oh * ow];
                for oc in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = wts.bias[oc];
                            for ic in 0..c {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let iy = (oy * stride + ky) as isize - p;
                                        let ix = (ox * stride + kx) as isize - p;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let wi = oc * c * kernel * kernel
                                            + ic * kernel * kernel
                                            + ky * kernel
                                            + kx;
                                        s += wts.weight[wi]
                                            * cur[ic * h * w + iy as usize * w + ix as usize];
                                    }
                                }
                            }
                            out[oc * oh * ow + oy * ow + ox] = s;
                        }
                    }
                }
                c = out_channels;
                h = oh;
                w = ow;
                out
            }
            LayerSpec::Relu => cur.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect(),
            LayerSpec::AvgPool { window } => {
                let (oh, ow) = (h / window, w / window);
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    s += cur[ch * h * w + (oy * window + dy) * w + ox * window + dx];
                                }
                            }
                            out[ch * oh * ow + oy * ow + ox] = s / (window * window) as f64;
                        }
                    }
                }
                h = oh;
                w = ow;
                out
            }
            LayerSpec::Flatten => cur,
            LayerSpec::Dense { out_dim } => (0..out_dim)
                .map(|o| {
                    wts.bias[o]
                        + (0..cur.len())
                            .map(|i| wts.weight[o * cur.len() + i] * cur[i])
                            .sum::<f64>()
                })
                .collect(),
        };
    }
    cur
}

fn gradcheck_specs() -> Vec<ExtractorSpec> {
    vec![
        ExtractorSpec {
            input_shape: (1, 8, 8),
            layers: vec![conv(4, 3, 1), LayerSpec::Relu, LayerSpec::AvgPool { window: 2 }, LayerSpec::Flatten],
            feature_dim: 64,
        },
        ExtractorSpec {
            input_shape: (3, 8, 8),
            layers: vec![
                conv(5, 3, 2),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 10 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_dim: 6 },
            ],
            feature_dim: 6,
        },
        ExtractorSpec {
            input_shape: (2, 8, 8),
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 5,
                    stride: 1,
                    padding: Some(1),
                },
                LayerSpec::Relu,
                LayerSpec::AvgPool { window: 3 },
                conv(4, 1, 1),
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            feature_dim: 16,
        },
    ]
}

#[test]
fn desk_default_is_consistent() {
    let spec = ExtractorSpec::desk_default(1);
    spec.validate().unwrap();
    assert_eq!(spec.feature_dim, 128);
    let spec3 = ExtractorSpec::desk_default(3);
    spec3.validate().unwrap();
}

#[test]
fn inconsistent_specs_rejected() {
    let mut spec = ExtractorSpec::desk_default(1);
    spec.feature_dim = 100;
    assert!(materialize(&spec, params(0)).is_err());
    let spec = ExtractorSpec {
        input_shape: (1, 4, 4),
        layers: vec![LayerSpec::Dense { out_dim: 3 }],
        feature_dim: 3,
    };
    assert!(spec.validate().is_err());
    let spec = ExtractorSpec {
        input_shape: (1, 4, 4),
        layers: vec![LayerSpec::AvgPool { window: 5 }, LayerSpec::Flatten],
        feature_dim: 0,
    };
    assert!(spec.validate().is_err());
}

#[test]
fn same_seed_same_weights() {
    let spec = ExtractorSpec::desk_default(1);
    let a = materialize(&spec, params(17)).unwrap();
    let b = materialize(&spec, params(17)).unwrap();
    let c = materialize(&spec, params(18)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn dense_weight_scale() {
    let spec = ExtractorSpec {
        input_shape: (1, 10, 10),
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out_dim: 1000 }],
        feature_dim: 1000,
    };
    let net = materialize(&spec, params(3)).unwrap();
    let w = &net.weights()[1].weight;
    assert_eq!(w.len(), 100_000);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    assert!((std - 0.1).abs() < 0.005, "std {std}");
}

#[test]
fn zero_scale_gives_zero_weights_and_output() {
    let spec = gradcheck_specs().remove(1);
    let net = materialize(
        &spec,
        ExtractorParams {
            seed: 5,
            init_scale: 0.0,
        },
    )
    .unwrap();
    assert!(net.weights().iter().all(|l| l.weight.iter().all(|&v| v == 0.0)));
    let y = net.forward(&random_input(spec.input_len(), 1)).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn zero_input_gives_zero_features() {
    let spec = ExtractorSpec::desk_default(1);
    let net = materialize(&spec, params(9)).unwrap();
    let y = net.forward(&vec![0.0; spec.input_len()]).unwrap();
    assert_eq!(y.len(), 128);
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn identity_dense_layer_copies_input() {
    let spec = ExtractorSpec {
        input_shape: (1, 3, 3),
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out_dim: 9 }],
        feature_dim: 9,
    };
    let mut eye = vec![0.0; 81];
    for i in 0..9 {
        eye[i * 9 + i] = 1.0;
    }
    let net = Network::with_weights(
        &spec,
        vec![
            LayerWeights {
                weight: vec![],
                bias: vec![],
            },
            LayerWeights {
                weight: eye,
                bias: vec![0.0; 9],
            },
        ],
    )
    .unwrap();
    let x = random_input(9, 4);
    assert_eq!(net.forward(&x).unwrap(), x);
}

#[test]
fn shape_mismatch_rejected() {
    let spec = ExtractorSpec::desk_default(1);
    let net = materialize(&spec, params(0)).unwrap();
    assert!(net.forward(&[0.0; 10]).is_err());
    assert!(net.input_gradient(&vec![0.0; 256], &[1.0; 3]).is_err());
}

#[test]
fn forward_matches_naive_reimplementation() {
    let mut specs = gradcheck_specs();
    specs.push(ExtractorSpec::desk_default(1));
    specs.push(ExtractorSpec::desk_default(3));
    for (i, spec) in specs.iter().enumerate() {
        for seed in 0..3 {
            let net = materialize(spec, params(100 * i as u64 + seed)).unwrap();
            let x: Vec<f64> = random_input(spec.input_len(), seed)
                .iter()
                .map(|v| v - 0.3)
                .collect();
            let fast = net.forward(&x).unwrap();
            let slow = naive_forward(&net, &x);
            assert_eq!(fast.len(), spec.feature_dim);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10, "spec {i}: {a} vs {b}");
            }
        }
    }
}

fn relu_pattern(net: &Network, x: &[f64]) -> Vec<bool> {
    net.relu_inputs(x).unwrap().iter().map(|&v| v > 0.0).collect()
}

/// Central-difference check of `input_gradient`. Coordinates whose
/// perturbation flips any ReLU are skipped. Returns the worst relative error.
pub(crate) fn gradient_check(net: &Network, x: &[f64], upstream: &[f64]) -> (f64, usize) {
    let h = 1e-5;
    let g = net.input_gradient(x, upstream).unwrap();
    let base = relu_pattern(net, x);
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        if relu_pattern(net, &xp) != base || relu_pattern(net, &xm) != base {
            continue;
        }
        let fp = dot(&net.forward(&xp).unwrap(), upstream);
        let fm = dot(&net.forward(&xm).unwrap(), upstream);
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-3 * scale);
        worst = worst.max(rel);
        checked += 1;
    }
    (worst, checked)
}

#[test]
fn gradient_matches_finite_differences_on_100_triples() {
    let specs = gradcheck_specs();
    let mut total_checked = 0;
    for t in 0..100u64 {
        let spec = &specs[(t % specs.len() as u64) as usize];
        let net = materialize(spec, params(1000 + t)).unwrap();
        let x: Vec<f64> = random_input(spec.input_len(), 2000 + t)
            .iter()
            .map(|v| 2.0 * v - 1.0)
            .collect();
        let upstream = random_input(spec.feature_dim, 3000 + t);
        let (worst, checked) = gradient_check(&net, &x, &upstream);
        assert!(worst < 1e-4, "triple {t}: relative error {worst:e}");
        total_checked += checked;
    }
    assert!(total_checked > 10_000);
}

#[test]
fn linear_network_gradient_independent_of_input() {
    let spec = ExtractorSpec {
        input_shape: (2, 6, 6),
        layers: vec![conv(3, 3, 1), LayerSpec::AvgPool { window: 2 }, LayerSpec::Flatten, LayerSpec::Dense { out_dim: 5 }],
        feature_dim: 5,
    };
    let net = materialize(&spec, params(8)).unwrap();
    let u = random_input(5, 1);
    let g1 = net.input_gradient(&random_input(72, 2), &u).unwrap();
    let g2 = net.input_gradient(&random_input(72, 3), &u).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_upstream_zero_gradient() {
    let spec = ExtractorSpec::desk_default(1);
    let net = materialize(&spec, params(2)).unwrap();
    let g = net
        .input_gradient(&random_input(256, 1), &[0.0; 128])
        .unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let spec = gradcheck_specs().remove(1);
    let net = materialize(&spec, params(77)).unwrap();
    let x = random_input(spec.input_len(), 5);
    let u = random_input(spec.feature_dim, 6);
    let trace = net.forward_trace(&x).unwrap();
    let (_, grads) = net.backward(&trace, &u, true).unwrap();
    let grads = grads.unwrap();
    let h = 1e-6;
    for layer in [0usize, 3, 5] {
        for idx in [0usize, 7, 21] {
            let mut plus = net.clone();
            plus.weights_mut()[layer].weight[idx] += h;
            let mut minus = net.clone();
            minus.weights_mut()[layer].weight[idx] -= h;
            let fd = (dot(&plus.forward(&x).unwrap(), &u) - dot(&minus.forward(&x).unwrap(), &u)) / (2.0 * h);
            let g = grads[layer].weight[idx];
            assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "layer {layer} idx {idx}: {fd} vs {g}");
        }
        let mut plus = net.clone();
        plus.weights_mut()[layer].bias[0] += h;
        let fd = (dot(&plus.forward(&x).unwrap(), &u) - dot(&net.forward(&x).unwrap(), &u)) / h;
        assert!((fd - grads[layer].bias[0]).abs() < 1e-5);
    }
}

#[test]
fn layer_string_round_trip() {
    let spec = ExtractorSpec::desk_default(1);
    let parsed = ExtractorSpec::from_layers((1, 16, 16), ExtractorSpec::parse_layers(&spec.layers_string()).unwrap()).unwrap();
    assert_eq!(parsed.feature_dim, 128);
    assert_eq!(parsed.shapes().unwrap(), spec.shapes().unwrap());
    assert!(ExtractorSpec::parse_layers("conv:8").is_err());
    assert!(ExtractorSpec::parse_layers("softmax").is_err());
}
