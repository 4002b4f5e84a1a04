//! The small fixed classifier used to score distilled sets.

use rand::seq::SliceRandom;

use crate::augment::{self, AugmentPolicy};
use crate::data::LabeledImages;
use crate::error::{ensure, Error, Result};
use crate::extractor::{materialize, ExtractorParams, ExtractorSpec, LayerSpec, Network};
use crate::numerics::{Purpose, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Hidden layers before the final dense softmax layer.
    pub layers: String,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Applied to every training batch with a fresh seed per step.
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            layers: "conv:8:3,relu,pool:2,flatten".into(),
            steps: 300,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: AugmentPolicy::parse("crop:1.0").expect("valid policy"),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub seed: u64,
}

fn build(cfg: &ClassifierConfig, shape: (usize, usize, usize), classes: usize) -> Result<Network> {
    let mut layers = ExtractorSpec::parse_layers(&cfg.layers)?;
    layers.push(LayerSpec::Dense { out_dim: classes });
    let spec = ExtractorSpec::from_layers(shape, layers)?;
    let mut net = materialize(
        &spec,
        ExtractorParams {
            seed: RngStream::new(cfg.seed).derive(Purpose::Classifier, &[0]).seed_u64(),
            init_scale: std::f64::consts::SQRT_2,
        },
    )?;
    // A zero output layer starts every prediction at the uniform distribution.
    if let Some(last) = net.weights_mut().last_mut() {
        last.weight.iter_mut().for_each(|w| *w = 0.0);
    }
    Ok(net)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |b, (k, &x)| if x > v[b] { k } else { b })
}

/// Trains on `train` with cross-entropy and scores accuracy on `test`.
pub fn train_classifier(train: &LabeledImages, test: &LabeledImages, cfg: &ClassifierConfig) -> Result<EvalReport> {
    ensure!(
        train.shape() == test.shape(),
        "train images {:?} and test images {:?} differ in shape",
        train.shape(),
        test.shape()
    );
    ensure!(!train.is_empty() && !test.is_empty(), "train and test sets must be nonempty");
    ensure!(cfg.batch_size >= 1, "batch size must be positive");
    ensure!(
        cfg.learning_rate >= 0.0 && (0.0..1.0).contains(&cfg.momentum) && cfg.weight_decay >= 0.0,
        "invalid classifier optimizer settings"
    );
    cfg.augment.validate()?;
    let classes = train.num_classes().max(test.num_classes());
    let shape = train.shape();
    let mut net = build(cfg, shape, classes)?;
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = net
        .weights()
        .iter()
        .map(|w| (vec![0.0; w.weight.len()], vec![0.0; w.bias.len()]))
        .collect();
    let root = RngStream::new(cfg.seed);
    let mut order_rng = root.derive(Purpose::Classifier, &[1]).rng();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.min(train.len());
    let mut loss_trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let zeta = root.derive(Purpose::Augment, &[step as u64]);
        let params = augment::sample_params(&cfg.augment, &zeta, shape);
        let mut grads: Option<Vec<crate::extractor::LayerWeights>> = None;
        let mut loss = 0.0;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let x = augment::apply_with_params(&params, train.image(idx), shape);
            let trace = net.forward_trace(&x)?;
            let p = softmax(trace.output());
            let label = train.labels()[idx] as usize;
            loss -= p[label].max(1e-300).ln();
            let mut up = p;
            up[label] -= 1.0;
            up.iter_mut().for_each(|u| *u /= batch as f64);
            let (_, g) = net.backward(&trace, &up, true)?;
            let g = g.expect("parameter gradients requested");
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
                        a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("classifier loss diverged at step {step}")));
        }
        loss_trace.push(loss);
        let grads = grads.expect("batch is nonempty");
        for ((w, g), (vw, vb)) in net.weights_mut().iter_mut().zip(&grads).zip(velocity.iter_mut()) {
            for ((p, gp), v) in w.weight.iter_mut().zip(&g.weight).zip(vw.iter_mut()) {
                *v = cfg.momentum * *v + gp + cfg.weight_decay * *p;
                *p -= cfg.learning_rate * *v;
            }
            for ((p, gp), v) in w.bias.iter_mut().zip(&g.bias).zip(vb.iter_mut()) {
                *v = cfg.momentum * *v + gp;
                *p -= cfg.learning_rate * *v;
            }
        }
    }

    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for i in 0..test.len() {
        let label = test.labels()[i] as usize;
        total[label] += 1;
        if argmax(&net.forward(test.image(i))?) == label {
            correct[label] += 1;
        }
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    let present = total.iter().filter(|&&t| t > 0).count() as f64;
    let accuracy = per_class.iter().zip(&total).filter(|(_, &t)| t > 0).map(|(a, _)| a).sum::<f64>() / present;
    Ok(EvalReport {
        accuracy,
        per_class,
        loss_trace,
        seed: cfg.seed,
    })
}
