use std::collections::BTreeMap;

use super::sample::add_noise;
use super::*;
use crate::augment::AugOp;
use crate::data::{ClassMixture, LabeledImages, MixtureComponent, MixtureSpec};
use crate::extractor::{self, LayerSpec};
use crate::numerics::{dot, Purpose};
use crate::privacy::{self, PrivacyBudget};
use crate::ser::synth_aux;

const SHAPE: ImageShape = (1, 8, 8);

fn small_spec(augment: AugmentPolicy, clip: f64) -> SignalSpec {
    let layers = ExtractorSpec::parse_layers("conv:4:3,relu,pool:2,flatten").unwrap();
    SignalSpec {
        extractor: ExtractorSpec::from_layers(SHAPE, layers).unwrap(),
        init_scale: 1.0,
        augment,
        clip: ClipConfig::new(clip).unwrap(),
    }
}

fn mixture(classes: usize) -> MixtureSpec {
    let n = 64;
    MixtureSpec {
        shape: SHAPE,
        classes: (0..classes)
            .map(|c| ClassMixture {
                components: vec![MixtureComponent {
                    weight: 1.0,
                    mean: (0..n).map(|p| if p % (c + 2) == 0 { 0.8 } else { 0.2 }).collect(),
                    std: 0.15,
                }],
            })
            .collect(),
    }
}

fn private(classes: usize, per_class: usize) -> LabeledImages {
    mixture(classes).sample(per_class, &RngStream::new(77)).unwrap()
}

fn config(spec: SignalSpec, group: usize, iters: usize, nm: f64) -> SampleConfig {
    SampleConfig {
        signal: spec,
        group_size: group,
        iterations: iters,
        noise: NoiseSetting::Multiplier {
            noise_multiplier: nm,
            delta: 1e-5,
        },
        subspace_dim: None,
        seed: 5,
        tags: BTreeMap::new(),
    }
}

/// Independent recomputation of one record's signal: augment via the
/// public seed-driven API, extractor via the tensor wrapper, clip via the
/// free function, projection via an explicit matrix product.
fn slow_signal(spec: &SignalSpec, images: &[&[f64]], denom: f64, rec: &SignalRecord) -> Vec<f64> {
    let net = extractor::materialize(
        &spec.extractor,
        ExtractorParams {
            seed: rec.extractor_seed,
            init_scale: spec.init_scale,
        },
    )
    .unwrap();
    let zeta = RngStream::new(rec.aug_seed);
    let mut sum = vec![0.0; spec.feature_dim()];
    for x in images {
        let a = augment::apply(&spec.augment, &zeta, x, SHAPE).unwrap();
        let t = crate::numerics::Tensor::new(vec![1, 8, 8], a).unwrap();
        let feat = extractor::forward(&net, &t).unwrap();
        let clipped = privacy::clip(feat.data(), spec.clip.bound()).unwrap();
        for (s, v) in sum.iter_mut().zip(clipped) {
            *s += v;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / denom).collect();
    match &rec.projection {
        None => mean,
        Some(p) => {
            let m = p.matrix();
            (0..m.cols()).map(|j| dot(&m.column(j), &mean)).collect()
        }
    }
}

#[test]
fn poisson_full_rate_takes_everything() {
    assert_eq!(poisson_sample(7, 1.0, &RngStream::new(1)).unwrap(), (0..7).collect::<Vec<_>>());
    assert_eq!(poisson_sample(7, 3.0, &RngStream::new(1)).unwrap().len(), 7);
    assert!(poisson_sample(7, 0.0, &RngStream::new(1)).is_err());
}

#[test]
fn poisson_batch_size_statistics() {
    let (n, q, trials) = (10_000usize, 0.1, 1000);
    let root = RngStream::new(9);
    let total: usize = (0..trials)
        .map(|t| poisson_sample(n, q, &root.child(t)).unwrap().len())
        .sum();
    let mean = total as f64 / trials as f64;
    let tol = 3.0 * (n as f64 * q * (1.0 - q) / trials as f64).sqrt();
    assert!((mean - n as f64 * q).abs() < tol, "mean batch {mean}");
}

#[test]
fn noiseless_full_batch_is_exact_clipped_mean() {
    let data = private(2, 6);
    let spec = small_spec(AugmentPolicy::desk_default(), 0.5);
    let cfg = config(spec.clone(), 6, 3, 0.0);
    let store = sample_stage(&data, None, &cfg).unwrap();
    for rec in store.records() {
        let imgs = data.class_images(rec.class as usize);
        let oracle = slow_signal(&spec, &imgs, 6.0, rec);
        let gap = rec.noisy_mean.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12, "{gap}");
    }
}

#[test]
fn store_is_deterministic_and_round_trips() {
    let data = private(3, 10);
    let mut cfg = config(small_spec(AugmentPolicy::desk_default(), 1.0), 4, 4, 1.3);
    cfg.tags.insert("config_hash".into(), "abc".into());
    let a = sample_stage(&data, None, &cfg).unwrap();
    let b = sample_stage(&data, None, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let back = SignalStore::read_from(&a.to_bytes()[..]).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.meta_value("config_hash"), Some("abc"));
    assert_eq!(back.signal_spec().unwrap(), cfg.signal);
    cfg.seed += 1;
    assert_ne!(sample_stage(&data, None, &cfg).unwrap().to_bytes(), a.to_bytes());
}

#[test]
fn corrupt_store_files_are_format_errors() {
    let data = private(2, 5);
    let store = sample_stage(&data, None, &config(small_spec(AugmentPolicy::identity(), 1.0), 2, 2, 1.0)).unwrap();
    let bytes = store.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(SignalStore::read_from(&bad[..]), Err(Error::Format(_))));
    assert!(matches!(
        SignalStore::read_from(&bytes[..bytes.len() - 3]),
        Err(Error::Format(_))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(SignalStore::read_from(&long[..]), Err(Error::Format(_))));
}

#[test]
fn ledger_metadata_matches_run() {
    let data = private(2, 20);
    let mut cfg = config(small_spec(AugmentPolicy::identity(), 1.0), 5, 7, 0.0);
    cfg.noise = NoiseSetting::Calibrate(PrivacyBudget::new(2.0, 1e-5).unwrap());
    let store = sample_stage(&data, None, &cfg).unwrap();
    assert_eq!(store.meta_value("steps"), Some("7"));
    assert_eq!(store.meta_value("class_rates"), Some("0.25,0.25"));
    let nm: f64 = store.meta_value("noise_multiplier").unwrap().parse().unwrap();
    let sigma: f64 = store.meta_value("sigma").unwrap().parse().unwrap();
    assert_eq!(sigma, nm * 1.0 / 5.0);
    let eps = privacy::epsilon_for(0.25, nm, 7, 1e-5).unwrap();
    assert!(eps <= 2.0 && eps >= 0.999 * 2.0);
}

#[test]
fn infeasible_budget_aborts() {
    let data = private(2, 20);
    let mut cfg = config(small_spec(AugmentPolicy::identity(), 1.0), 20, 5000, 0.0);
    cfg.noise = NoiseSetting::Calibrate(PrivacyBudget::new(1e-3, 1e-12).unwrap());
    assert!(matches!(sample_stage(&data, None, &cfg), Err(Error::Calibration(_))));
}

#[test]
fn noise_variance_matches_sigma() {
    let sigma = 0.3;
    let clean = vec![0.1, -0.2, 0.0, 1.0];
    // The sample variance of 1e4 draws has relative std ~1.4%, so 3% is
    // about two standard errors per coordinate; the seed is pinned.
    let root = RngStream::new(0);
    let n = 10_000;
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|t| add_noise(&clean, sigma, &root.derive(Purpose::Noise, &[t])).unwrap())
        .collect();
    for k in 0..clean.len() {
        let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.03, "coord {k}: {var}");
    }
}

#[test]
fn synthetic_copy_of_single_image_matches_record_exactly() {
    let data = private(2, 1);
    let spec = small_spec(AugmentPolicy::desk_default(), 0.7);
    let store = sample_stage(&data, None, &config(spec.clone(), 1, 3, 0.0)).unwrap();
    for rec in store.records() {
        let img = data.class_images(rec.class as usize);
        assert_eq!(synth_signal(&spec, &img, rec).unwrap(), rec.noisy_mean);
    }
}

#[test]
fn duplicated_images_leave_signal_unchanged() {
    let data = private(1, 3);
    let spec = small_spec(AugmentPolicy::desk_default(), 0.7);
    let store = sample_stage(&data, None, &config(spec.clone(), 3, 1, 0.5)).unwrap();
    let rec = &store.records()[0];
    let x = data.image(0);
    let one = synth_signal(&spec, &[x], rec).unwrap();
    let three = synth_signal(&spec, &[x, x, x], rec).unwrap();
    for (a, b) in one.iter().zip(&three) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn ser_records_match_slow_path() {
    let data = private(2, 8);
    let aux = synth_aux(&mixture(2), 12, &RngStream::new(8)).unwrap();
    let spec = small_spec(AugmentPolicy::desk_default(), 0.6);
    let mut cfg = config(spec.clone(), 8, 3, 0.0);
    cfg.subspace_dim = Some(5);
    let store = sample_stage(&data, Some(&aux), &cfg).unwrap();
    assert_eq!(store.subspace_dim(), 5);
    for rec in store.records() {
        let p = rec.projection.as_ref().unwrap();
        assert!(p.orthonormality_error() < 1e-8);
        // The subspace comes from the aux images under this record's map.
        let bare = SignalRecord {
            projection: None,
            ..rec.clone()
        };
        let aux_imgs = aux.images().class_images(rec.class as usize);
        let rows: Vec<f64> = aux_imgs.iter().flat_map(|x| slow_signal(&spec, &[x], 1.0, &bare)).collect();
        let feats = crate::numerics::Tensor::new(vec![aux_imgs.len(), spec.feature_dim()], rows).unwrap();
        let want = crate::ser::discover_subspace(&feats, 5).unwrap();
        let gap = want.matrix().data().iter().zip(p.matrix().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-8, "projection gap {gap}");
        let imgs = data.class_images(rec.class as usize);
        let oracle = slow_signal(&spec, &imgs, 8.0, rec);
        let gap = rec.noisy_mean.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-10, "{gap}");
        let synth = synth_signal(&spec, &imgs[..3], rec).unwrap();
        let oracle = slow_signal(&spec, &imgs[..3], 3.0, rec);
        let gap = synth.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-10, "{gap}");
    }
    let back = SignalStore::read_from(&store.to_bytes()[..]).unwrap();
    assert_eq!(back, store);
}

#[test]
fn ser_requires_auxiliary_data() {
    let data = private(2, 8);
    let mut cfg = config(small_spec(AugmentPolicy::identity(), 1.0), 4, 1, 1.0);
    cfg.subspace_dim = Some(4);
    assert!(matches!(sample_stage(&data, None, &cfg), Err(Error::Validation(_))));
}

#[test]
fn matching_gradient_matches_finite_differences() {
    let spec = small_spec(AugmentPolicy::parse("crop:1.5,flip:0.5,brightness:0.8:1.2,cutout:3").unwrap(), 0.4);
    let data = private(1, 4);
    let aux = synth_aux(&mixture(1), 10, &RngStream::new(2)).unwrap();
    for (use_ser, seed) in [(false, 1u64), (true, 2), (true, 3)] {
        let mut cfg = config(spec.clone(), 4, 1, 1.0);
        cfg.seed = seed;
        cfg.subspace_dim = use_ser.then_some(6);
        let store = sample_stage(&data, Some(&aux), &cfg).unwrap();
        let rec = &store.records()[0];
        let f = spec.signal_fn(rec.extractor_seed, rec.aug_seed).unwrap();
        let z: Vec<Vec<f64>> = mixture(1).sample_class(0, 2, &RngStream::new(seed + 10)).unwrap();
        let refs: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
        let (_, grads) = f.matching_loss_grad(&refs, &rec.noisy_mean, rec.projection.as_ref()).unwrap();
        let loss_at = |imgs: &[Vec<f64>]| {
            let r: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
            f.matching_loss_grad(&r, &rec.noisy_mean, rec.projection.as_ref()).unwrap().0
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for j in 0..2 {
            for k in (0..64).step_by(5) {
                let mut plus = z.clone();
                plus[j][k] += h;
                let mut minus = z.clone();
                minus[j][k] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let an = grads[j][k];
                let scale = fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max((fd - an).abs() / scale);
            }
        }
        assert!(worst < 1e-4, "ser={use_ser}: {worst}");
    }
}

fn identity_store(target: &[f64]) -> (SignalStore, SignalSpec) {
    let spec = SignalSpec {
        extractor: ExtractorSpec::identity((1, 4, 4)),
        init_scale: 1.0,
        augment: AugmentPolicy::identity(),
        clip: ClipConfig::new(10.0).unwrap(),
    };
    let data = LabeledImages::new((1, 4, 4), target.to_vec(), vec![0], 1).unwrap();
    let cfg = SampleConfig {
        signal: spec.clone(),
        group_size: 1,
        iterations: 1,
        noise: NoiseSetting::Multiplier {
            noise_multiplier: 0.0,
            delta: 1e-5,
        },
        subspace_dim: None,
        seed: 1,
        tags: BTreeMap::new(),
    };
    (sample_stage(&data, None, &cfg).unwrap(), spec)
}

#[test]
fn convex_case_converges_to_preimage() {
    let target: Vec<f64> = (0..16).map(|k| 0.1 + 0.05 * k as f64).collect();
    let (store, _) = identity_store(&target);
    let cfg = OptimizeConfig {
        images_per_class: 1,
        iterations: 500,
        learning_rate: 0.25,
        schedule: Schedule::Constant,
        optimizer: OptimizerKind::Sgd,
        ..OptimizeConfig::default()
    };
    let out = optimize_stage(&store, &cfg).unwrap();
    assert!(*out.loss_trace.last().unwrap() < 1e-6);
    let z = out.synthetic.class_images(0)[0];
    let gap = z.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-6);
    assert_eq!(out.synthetic.step(), 500);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let target: Vec<f64> = (0..16).map(|k| k as f64 / 16.0).collect();
    let (store, _) = identity_store(&target);
    let cfg = OptimizeConfig {
        images_per_class: 2,
        iterations: 20,
        learning_rate: 0.0,
        ..OptimizeConfig::default()
    };
    let out = optimize_stage(&store, &cfg).unwrap();
    let init = SyntheticSet::init((1, 4, 4), 1, 2, cfg.init_std, &RngStream::new(cfg.seed).derive(Purpose::SyntheticInit, &[]));
    assert_eq!(out.synthetic.class_images(0), init.class_images(0));
    assert!(out.loss_trace.iter().all(|&l| l == out.loss_trace[0]));
}

#[test]
fn empty_store_is_state_error() {
    let store = SignalStore::seal(0, 0, 4, BTreeMap::new(), Vec::new()).unwrap();
    assert!(matches!(
        optimize_stage(&store, &OptimizeConfig::default()),
        Err(Error::State(_))
    ));
}

#[test]
fn optimization_is_deterministic_and_clamped() {
    let data = private(2, 10);
    let store = sample_stage(&data, None, &config(small_spec(AugmentPolicy::desk_default(), 1.0), 5, 6, 0.8)).unwrap();
    for selection in [Selection::Uniform, Selection::ShuffledEpochs, Selection::InOrder] {
        let cfg = OptimizeConfig {
            images_per_class: 3,
            iterations: 15,
            selection,
            learning_rate: 0.5,
            ..OptimizeConfig::default()
        };
        let a = optimize_stage(&store, &cfg).unwrap();
        let b = optimize_stage(&store, &cfg).unwrap();
        assert_eq!(a.synthetic, b.synthetic);
        assert_eq!(a.loss_trace, b.loss_trace);
        for c in 0..2 {
            assert!(a.synthetic.class_images(c).iter().flat_map(|im| im.iter()).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn selection_modes_cover_records() {
    let mk = |mode| Picker {
        mode,
        n: 4,
        rng: RngStream::new(1).rng(),
        order: Vec::new(),
        t: 0,
    };
    let mut p = mk(Selection::InOrder);
    assert_eq!((0..6).map(|_| p.next()).collect::<Vec<_>>(), vec![0, 1, 2, 3, 0, 1]);
    let mut p = mk(Selection::ShuffledEpochs);
    for _ in 0..3 {
        let mut epoch: Vec<usize> = (0..4).map(|_| p.next()).collect();
        epoch.sort();
        assert_eq!(epoch, vec![0, 1, 2, 3]);
    }
}

#[test]
fn preview_grid_dimensions() {
    let set = SyntheticSet::init((1, 4, 4), 2, 3, 0.1, &RngStream::new(1));
    let (w, h, ch, px) = set.preview_grid();
    assert_eq!((w, h, ch), (3 * 5 + 1, 2 * 5 + 1, 1));
    assert_eq!(px.len(), w * h);
    let rgb = SyntheticSet::init((3, 4, 4), 1, 1, 0.1, &RngStream::new(1));
    assert_eq!(rgb.preview_grid().2, 3);
    let _ = AugOp::Flip { prob: 0.5 };
    let _ = LayerSpec::Relu;
}

