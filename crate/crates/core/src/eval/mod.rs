//! Downstream utility: toy tasks, a small classifier, and the DOS x SER ablation.

mod classifier;
mod task;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;

pub use classifier::{train_classifier, ClassifierConfig, EvalReport};
pub use task::{ToyTask, ToyTaskSpec};

use crate::dos::{
    optimize_stage, sample_stage, NoiseSetting, OptimizeConfig, SampleConfig, Selection, SignalSpec, SignalStore,
    SyntheticSet,
};
use crate::error::{ensure, Result};
use crate::numerics::{Purpose, RngStream};
use crate::privacy::{calibrate_noise_multiplier, PrivacyBudget};
use crate::ser::synth_aux;

/// Scores a distilled set on the task's test split.
pub fn evaluate_synthetic(set: &SyntheticSet, task: &ToyTask, cfg: &ClassifierConfig) -> Result<EvalReport> {
    ensure!(
        set.shape() == task.spec.shape && set.num_classes() == task.spec.num_classes,
        "distilled set ({} classes of {:?}) does not match the task ({} classes of {:?})",
        set.num_classes(),
        set.shape(),
        task.spec.num_classes,
        task.spec.shape
    );
    train_classifier(&set.to_labeled()?, &task.test, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub task: ToyTaskSpec,
    pub signal: SignalSpec,
    pub budget: PrivacyBudget,
    pub group_size: usize,
    pub sample_iterations: usize,
    /// Settings of the decoupled arms; coupled arms reuse them with
    /// `iterations = sample_iterations` and in-order record selection.
    pub optimize: OptimizeConfig,
    pub subspace_dim: usize,
    pub aux_per_class: usize,
    pub aux_shift: f64,
    pub aux_amp_jitter: f64,
    pub classifier: ClassifierConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub dos: bool,
    pub ser: bool,
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm { dos: false, ser: false },
        Arm { dos: false, ser: true },
        Arm { dos: true, ser: false },
        Arm { dos: true, ser: true },
    ];

    pub fn name(&self) -> &'static str {
        match (self.dos, self.ser) {
            (false, false) => "neither",
            (false, true) => "ser-only",
            (true, false) => "dos-only",
            (true, true) => "both",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    pub accuracies: Vec<f64>,
    pub epsilons: Vec<f64>,
}

impl ArmResult {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation (zero for a single seed).
    pub fn std(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub noise_multiplier: f64,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
    /// Accuracy of the classifier trained on the full private train split.
    pub real_data_accuracy: Option<f64>,
}

impl AblationTable {
    pub fn arm(&self, dos: bool, ser: bool) -> Option<&ArmResult> {
        self.arms.iter().find(|r| r.arm == Arm { dos, ser })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,dos,ser,mean_accuracy,std_accuracy,max_epsilon");
        for s in &self.seeds {
            write!(out, ",seed_{s}").unwrap();
        }
        out.push('\n');
        for r in &self.arms {
            let eps = r.epsilons.iter().copied().fold(0.0, f64::max);
            write!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.arm.name(),
                r.arm.dos,
                r.arm.ser,
                r.mean(),
                r.std(),
                eps
            )
            .unwrap();
            for a in &r.accuracies {
                write!(out, ",{a:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

impl AblationConfig {
    pub fn sample_config(&self, seed: u64, noise_multiplier: f64, ser: bool) -> SampleConfig {
        SampleConfig {
            signal: self.signal.clone(),
            group_size: self.group_size,
            iterations: self.sample_iterations,
            noise: NoiseSetting::Multiplier {
                noise_multiplier,
                delta: self.budget.delta(),
            },
            subspace_dim: ser.then_some(self.subspace_dim),
            seed,
            tags: BTreeMap::new(),
        }
    }

    pub fn optimize_config(&self, seed: u64, dos: bool) -> OptimizeConfig {
        let mut cfg = self.optimize.clone();
        cfg.seed = seed;
        if !dos {
            cfg.iterations = self.sample_iterations;
            cfg.selection = Selection::InOrder;
        }
        cfg
    }
}

/// Runs every requested arm for every seed with one shared noise multiplier.
pub fn ablation_suite(cfg: &AblationConfig, arms: &[Arm], with_reference: bool) -> Result<AblationTable> {
    ensure!(!cfg.seeds.is_empty(), "ablation needs at least one seed");
    ensure!(!arms.is_empty(), "ablation needs at least one arm");
    let task = ToyTask::generate(&cfg.task)?;
    let min_n = task.train.class_counts().into_iter().min().unwrap_or(0);
    ensure!(min_n > 0, "toy task has an empty class");
    let q = (cfg.group_size as f64 / min_n as f64).min(1.0);
    let nm = calibrate_noise_multiplier(cfg.budget, q, cfg.sample_iterations as u64)?;
    info!("ablation: shared noise multiplier {nm:.6} at rate {q:.4}");

    // Seeds run in parallel; each yields one (accuracy, epsilon) per arm, in arm order.
    let per_seed: Vec<Vec<(f64, f64)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| ablation_seed(cfg, arms, &task, nm, seed))
        .collect::<Result<_>>()?;
    let results: Vec<ArmResult> = arms
        .iter()
        .enumerate()
        .map(|(k, &arm)| ArmResult {
            arm,
            accuracies: per_seed.iter().map(|r| r[k].0).collect(),
            epsilons: per_seed.iter().map(|r| r[k].1).collect(),
        })
        .collect();
    let real_data_accuracy = if with_reference {
        let mut ccfg = cfg.classifier.clone();
        ccfg.seed = cfg.seeds[0];
        Some(train_classifier(&task.train, &task.test, &ccfg)?.accuracy)
    } else {
        None
    };
    Ok(AblationTable {
        noise_multiplier: nm,
        seeds: cfg.seeds.clone(),
        arms: results,
        real_data_accuracy,
    })
}

fn ablation_seed(cfg: &AblationConfig, arms: &[Arm], task: &ToyTask, nm: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    let aux_mix = task.perturbed_mixture(
        cfg.aux_shift,
        cfg.aux_amp_jitter,
        &RngStream::new(seed).derive(Purpose::Auxiliary, &[0]),
    )?;
    let aux = synth_aux(
        &aux_mix,
        cfg.aux_per_class,
        &RngStream::new(seed).derive(Purpose::Auxiliary, &[1]),
    )?;
    let mut stores: [Option<SignalStore>; 2] = [None, None];
    let mut out = Vec::with_capacity(arms.len());
    for &arm in arms {
        let slot = usize::from(arm.ser);
        if stores[slot].is_none() {
            let sc = cfg.sample_config(seed, nm, arm.ser);
            stores[slot] = Some(sample_stage(&task.train, Some(&aux), &sc)?);
        }
        let store = stores[slot].as_ref().unwrap();
        let synth = optimize_stage(store, &cfg.optimize_config(seed, arm.dos))?;
        let mut ccfg = cfg.classifier.clone();
        ccfg.seed = seed;
        let report = evaluate_synthetic(&synth.synthetic, task, &ccfg)?;
        info!("ablation seed {seed} arm {}: accuracy {:.4}", arm.name(), report.accuracy);
        let eps: f64 = store
            .meta_value("epsilon")
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::INFINITY);
        out.push((report.accuracy, eps));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
