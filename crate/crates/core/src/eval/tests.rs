use super::*;
use crate::augment::AugmentPolicy;
use crate::dos::OptimizeConfig;
use crate::extractor::ExtractorSpec;
use crate::privacy::ClipConfig;

fn small_task(classes: usize) -> ToyTask {
    ToyTask::generate(&ToyTaskSpec {
        num_classes: classes,
        train_per_class: 60,
        test_per_class: 40,
        ..ToyTaskSpec::default()
    })
    .unwrap()
}

fn quick_classifier(steps: usize, seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        steps,
        batch_size: 16,
        seed,
        ..ClassifierConfig::default()
    }
}

#[test]
fn zero_steps_is_chance() {
    let task = small_task(4);
    let r = train_classifier(&task.train, &task.test, &quick_classifier(0, 1)).unwrap();
    assert_eq!(r.accuracy, 0.25);
    assert!(r.loss_trace.is_empty());
}

#[test]
fn accuracy_is_mean_of_per_class() {
    let task = small_task(3);
    let r = train_classifier(&task.train, &task.test, &quick_classifier(40, 2)).unwrap();
    let mean = r.per_class.iter().sum::<f64>() / 3.0;
    assert!((r.accuracy - mean).abs() < 1e-15);
    assert!(r.per_class.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn real_data_is_learnable_and_training_is_deterministic() {
    let task = small_task(4);
    let cfg = quick_classifier(150, 3);
    let a = train_classifier(&task.train, &task.test, &cfg).unwrap();
    let b = train_classifier(&task.train, &task.test, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.accuracy > 0.6, "{}", a.accuracy);
}

#[test]
fn full_train_set_as_distilled_matches_direct_training() {
    let task = small_task(4);
    let cfg = quick_classifier(100, 4);
    let direct = train_classifier(&task.train, &task.test, &cfg).unwrap();
    let set = SyntheticSet::from_labeled(&task.train).unwrap();
    let via = evaluate_synthetic(&set, &task, &cfg).unwrap();
    assert!((direct.accuracy - via.accuracy).abs() <= 0.02, "{} vs {}", direct.accuracy, via.accuracy);
}

#[test]
fn random_noise_images_are_near_chance() {
    // Test images sit in a few tight clusters, so a single run lands on a
    // coarse grid of accuracies; only the mean over many runs is near 1/2.
    let task = small_task(2);
    let runs = 20;
    let mut total = 0.0;
    for seed in 0..runs {
        let noise = SyntheticSet::init((1, 16, 16), 2, 5, 0.3, &RngStream::new(1000 + seed));
        total += evaluate_synthetic(&noise, &task, &quick_classifier(100, seed)).unwrap().accuracy;
    }
    let mean = total / runs as f64;
    assert!((0.35..=0.65).contains(&mean), "{mean}");
}

#[test]
fn shape_mismatch_rejected() {
    let task = small_task(2);
    let wrong = SyntheticSet::init((1, 8, 8), 2, 1, 0.1, &RngStream::new(0));
    assert!(evaluate_synthetic(&wrong, &task, &quick_classifier(1, 0)).is_err());
}

fn tiny_ablation() -> AblationConfig {
    AblationConfig {
        task: ToyTaskSpec {
            train_per_class: 80,
            test_per_class: 30,
            ..ToyTaskSpec::default()
        },
        signal: SignalSpec {
            extractor: ExtractorSpec::desk_default(1),
            init_scale: 1.0,
            augment: AugmentPolicy::parse("crop:1.0").unwrap(),
            clip: ClipConfig::new(1.0).unwrap(),
        },
        budget: PrivacyBudget::new(1.0, 1e-5).unwrap(),
        group_size: 10,
        sample_iterations: 5,
        optimize: OptimizeConfig {
            iterations: 20,
            images_per_class: 2,
            learning_rate: 0.01,
            ..OptimizeConfig::default()
        },
        subspace_dim: 4,
        aux_per_class: 8,
        aux_shift: 1.0,
        aux_amp_jitter: 0.2,
        classifier: quick_classifier(20, 0),
        seeds: vec![0, 1],
    }
}

#[test]
fn ablation_is_deterministic_and_spends_the_budget() {
    let cfg = tiny_ablation();
    let a = ablation_suite(&cfg, &Arm::ALL, false).unwrap();
    let b = ablation_suite(&cfg, &Arm::ALL, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.arms.len(), 4);
    for r in &a.arms {
        assert_eq!(r.accuracies.len(), 2);
        assert!(r.epsilons.iter().all(|&e| (0.999..=1.0).contains(&e)), "{:?}", r.epsilons);
    }
    let csv = a.to_csv();
    assert!(csv.starts_with("arm,dos,ser,mean_accuracy,std_accuracy,max_epsilon,seed_0,seed_1\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn coupled_arm_uses_one_pass_in_order() {
    let cfg = tiny_ablation();
    let coupled = cfg.optimize_config(3, false);
    assert_eq!(coupled.iterations, cfg.sample_iterations);
    assert_eq!(coupled.selection, Selection::InOrder);
    let decoupled = cfg.optimize_config(3, true);
    assert_eq!(decoupled.iterations, 20);
    assert_eq!(decoupled.seed, 3);
}

#[test]
fn arm_statistics() {
    let r = ArmResult {
        arm: Arm::ALL[0],
        accuracies: vec![0.5, 0.7],
        epsilons: vec![1.0, 1.0],
    };
    assert!((r.mean() - 0.6).abs() < 1e-15);
    assert!((r.std() - 0.02f64.sqrt()).abs() < 1e-15);
}
