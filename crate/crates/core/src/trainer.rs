//! PK-batch training with Adam and a step learning-rate schedule.
//!
//! The batch of global step `s` depends only on `(seed, s)`, so a run
//! resumed from a checkpoint replays exactly what an uninterrupted run does.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradStore, ParamStore};
use crate::backbone::prepare_image;
use crate::checkpoint::{load_pretrained_backbone, AdamState, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_rgb, read_part_map, sample_pk_batch, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{batch_loss, init_model, Ablation, LossBreakdown, SampleInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    /// Parameters and optimizer moments are rounded to f32 after every step.
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch (capped at the number of train identities).
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    pub base_lr: f64,
    pub backbone_lr: f64,
    pub lr_decay_factor: f64,
    /// The learning rate is multiplied by the decay factor after each of these epochs.
    pub lr_decay_epochs: Vec<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            p: 5,
            k: 4,
            base_lr: 1e-3,
            backbone_lr: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![40, 60],
            seed: 0,
            ablation: Ablation::FULL,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.p == 0 || self.k == 0 {
            return err("trainer.epochs, trainer.p and trainer.k must be positive");
        }
        if !(self.base_lr > 0.0 && self.backbone_lr >= 0.0) {
            return err("learning rates must be positive");
        }
        if !(self.lr_decay_factor > 0.0) {
            return err("trainer.lr_decay_factor must be positive");
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return err("trainer.lr_decay_epochs must be strictly increasing");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return err("Adam betas must lie in [0, 1) and eps must be positive");
        }
        self.ablation.validate()
    }

    /// Schedule factor for 1-based `epoch`: one decay per milestone already passed.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let passed = self.lr_decay_epochs.iter().filter(|&&e| epoch > e).count();
        self.lr_decay_factor.powi(passed as i32)
    }

    /// Head learning rate during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_factor(epoch)
    }
}

pub fn steps_per_epoch(num_train: usize, p: usize, k: usize) -> usize {
    num_train.div_ceil(p * k).max(1)
}

/// Seed of the PK batch drawn at global step `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng.next_u64()
}

/// One line of the JSON-lines metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_id")]
    pub id: f64,
    #[serde(rename = "L_tri")]
    pub tri: f64,
    #[serde(rename = "L_part")]
    pub part: f64,
    pub lr: f64,
}

/// Train images (and part maps when needed), decoded once.
pub struct TrainData {
    samples: Vec<SampleInput>,
    index: HashMap<PathBuf, usize>,
}

impl TrainData {
    pub fn load(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Self> {
        let [h, w] = cfg.backbone.input_size;
        let need_parts = cfg.trainer.ablation.psa;
        let mut samples = Vec::new();
        let mut index = HashMap::new();
        for rec in manifest.train() {
            let img = load_rgb(&rec.image_path, (h, w))?;
            let part_map = if need_parts {
                Some(read_part_map(&manifest.part_map_path(rec, &cfg.dataset.part_dir))?)
            } else {
                None
            };
            index.insert(rec.image_path.clone(), samples.len());
            samples.push(SampleInput {
                image: prepare_image(&img, &cfg.backbone)?,
                part_map,
            });
        }
        Ok(TrainData { samples, index })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn get(&self, path: &Path) -> &SampleInput {
        &self.samples[self.index[path]]
    }
}

/// Fresh training state: initial parameters, zero moments, nothing done yet.
pub fn initial_checkpoint(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Checkpoint> {
    cfg.validate()?;
    let spec = cfg.model_spec(manifest.num_identities);
    let mut params = init_model(&spec, cfg.trainer.seed)?;
    if let Some(path) = &cfg.backbone.pretrained_weights_path {
        load_pretrained_backbone(Path::new(path), &mut params)?;
    }
    let adam = AdamState::zeros_like(&params);
    Ok(Checkpoint {
        config: cfg.clone(),
        num_identities: manifest.num_identities,
        epoch: 0,
        step: 0,
        params,
        adam,
    })
}

fn adam_step(
    params: &mut ParamStore,
    adam: &mut AdamState,
    grads: &GradStore,
    t: usize,
    cfg: &TrainConfig,
    factor: f64,
) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (id, g) in grads.iter() {
        let lr = factor
            * if params.name(id).starts_with("backbone.") {
                cfg.backbone_lr
            } else {
                cfg.base_lr
            };
        let i = id.index();
        let p = params.value_mut(id);
        let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            });
        if cfg.precision == Precision::F32 {
            for t in [params.value_mut(id), &mut adam.m[i], &mut adam.v[i]] {
                t.mapv_inplace(|x| x as f32 as f64);
            }
        }
    }
}

fn non_finite_report(step: usize, loss: &LossBreakdown, params: &ParamStore) -> Option<String> {
    let terms = [("L", loss.total), ("L_id", loss.id), ("L_tri", loss.tri), ("L_part", loss.part)];
    let bad_term = terms.iter().find(|(_, v)| !v.is_finite());
    let bad_param = params.first_non_finite();
    match (bad_term, bad_param) {
        (None, None) => None,
        (term, param) => Some(format!(
            "step {step}: loss term {} is non-finite; first non-finite parameter: {}",
            term.map_or("(none)".to_string(), |(n, v)| format!("{n} = {v}")),
            param.unwrap_or("(none)")
        )),
    }
}

/// Runs the remaining steps of `state` (all of them unless `max_steps` stops it early),
/// writing one JSON line per step to `log`.
pub fn run(
    state: &mut Checkpoint,
    manifest: &DatasetManifest,
    data: &TrainData,
    log: &mut dyn Write,
    max_steps: Option<usize>,
) -> Result<()> {
    let cfg = state.config.clone();
    cfg.validate()?;
    let tc = &cfg.trainer;
    if manifest.num_identities != state.num_identities {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on {} identities, manifest has {}",
            state.num_identities, manifest.num_identities
        )));
    }
    let spec = cfg.model_spec(state.num_identities);
    let p = tc.p.min(manifest.num_identities);
    let per_epoch = steps_per_epoch(data.len(), p, tc.k);
    let total = tc.epochs * per_epoch;
    let mut budget = max_steps.unwrap_or(usize::MAX);
    while state.step < total && budget > 0 {
        let epoch = state.step / per_epoch + 1;
        let factor = tc.lr_factor(epoch);
        let batch = sample_pk_batch(manifest, p, tc.k, batch_seed(tc.seed, state.step))?;
        let inputs: Vec<SampleInput> = batch.samples.iter().map(|r| data.get(&r.image_path).clone()).collect();
        let mut grads = GradStore::new(&state.params);
        let loss = batch_loss(&state.params, &spec, &cfg.losses, &inputs, &batch.labels(), Some(&mut grads))?;
        if let Some(msg) = non_finite_report(state.step + 1, &loss, &state.params) {
            return Err(Error::NonFinite(msg));
        }
        adam_step(&mut state.params, &mut state.adam, &grads, state.step + 1, tc, factor);
        if let Some(name) = state.params.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: parameter `{name}` became non-finite after the update",
                state.step + 1
            )));
        }
        state.step += 1;
        state.epoch = state.step / per_epoch;
        budget -= 1;
        let record = StepRecord {
            epoch,
            step: state.step,
            loss: loss.total,
            id: loss.id,
            tri: loss.tri,
            part: loss.part,
            lr: tc.base_lr * factor,
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io("<metrics log>", e))?;
    }
    Ok(())
}

/// Trains from scratch according to `cfg`.
pub fn train(cfg: &RunConfig, manifest: &DatasetManifest, log: &mut dyn Write) -> Result<Checkpoint> {
    let mut state = initial_checkpoint(cfg, manifest)?;
    let data = TrainData::load(manifest, cfg)?;
    run(&mut state, manifest, &data, log, None)?;
    Ok(state)
}

/// Mean logged loss of every epoch, in order.
pub fn epoch_means(records: &[StepRecord]) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in records {
        if sums.len() < r.epoch {
            sums.resize(r.epoch, (0.0, 0));
        }
        sums[r.epoch - 1].0 += r.loss;
        sums[r.epoch - 1].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

pub fn parse_log(text: &str) -> Result<Vec<StepRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json("metrics log", e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SynthSpec};

    fn tiny_run(dir: &Path, ablation: Ablation) -> (RunConfig, DatasetManifest) {
        let spec = SynthSpec {
            num_ids: 4,
            clothes_per_id: 2,
            images_per_combo: 3,
            image_size: (32, 32),
            ..SynthSpec::default()
        };
        let manifest = generate_synthetic_dataset(&spec, dir).unwrap();
        let mut cfg = RunConfig::default();
        cfg.backbone.input_size = [32, 32];
        cfg.backbone.hidden_channels = [4, 6, 8];
        cfg.backbone.out_channels = 8;
        cfg.cdn.capsule_channels = 2;
        cfg.cdn.attribute_capsules = 4;
        cfg.psa.hidden_channels = 4;
        cfg.trainer.epochs = 2;
        cfg.trainer.p = 2;
        cfg.trainer.k = 2;
        cfg.trainer.ablation = ablation;
        (cfg, manifest)
    }

    #[test]
    fn schedule_decays_after_milestones() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(1), 1e-3);
        assert_eq!(t.lr_at(40), 1e-3);
        assert!((t.lr_at(41) - 1e-4).abs() < 1e-18);
        assert!((t.lr_at(61) - 1e-5).abs() < 1e-18);
        assert_eq!(steps_per_epoch(128, 5, 4), 7);
        assert_eq!(steps_per_epoch(120, 5, 4), 6);
    }

    #[test]
    fn validation_rejects_bad_schedules() {
        let bad = TrainConfig {
            lr_decay_epochs: vec![60, 40],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let psa_only = TrainConfig {
            ablation: "psa".parse().unwrap(),
            ..TrainConfig::default()
        };
        assert!(psa_only.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn same_seed_same_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, manifest) = tiny_run(dir.path(), Ablation::FULL);
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        let a = train(&cfg, &manifest, &mut log_a).unwrap();
        let b = train(&cfg, &manifest, &mut log_b).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a.to_bytes(), b.to_bytes());
        let records = parse_log(std::str::from_utf8(&log_a).unwrap()).unwrap();
        // 2 train identities × 2 clothes × 3 images = 12 images, P·K = 4
        assert_eq!(records.len(), 2 * 3);
        assert_eq!(a.step, 6);
        assert_eq!(a.epoch, 2);
        assert!(records.iter().all(|r| r.loss.is_finite() && r.part > 0.0));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, manifest) = tiny_run(dir.path(), Ablation::MGR_CDN);
        let data = TrainData::load(&manifest, &cfg).unwrap();
        let mut straight = initial_checkpoint(&cfg, &manifest).unwrap();
        run(&mut straight, &manifest, &data, &mut std::io::sink(), Some(4)).unwrap();

        let mut first = initial_checkpoint(&cfg, &manifest).unwrap();
        run(&mut first, &manifest, &data, &mut std::io::sink(), Some(3)).unwrap();
        let path = dir.path().join("mid.ckpt");
        first.save(&path).unwrap();
        let mut resumed = Checkpoint::load(&path).unwrap();
        run(&mut resumed, &manifest, &data, &mut std::io::sink(), Some(1)).unwrap();
        assert_eq!(resumed.params, straight.params);
        assert_eq!(resumed.to_bytes(), straight.to_bytes());
    }

    #[test]
    fn nan_parameters_abort_with_their_name() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, manifest) = tiny_run(dir.path(), Ablation::MGR);
        let data = TrainData::load(&manifest, &cfg).unwrap();
        let mut state = initial_checkpoint(&cfg, &manifest).unwrap();
        let id = state.params.id("classifier.bias").unwrap();
        state.params.value_mut(id)[[0]] = f64::NAN;
        match run(&mut state, &manifest, &data, &mut std::io::sink(), None) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("classifier.bias"), "{msg}"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn f32_mode_rounds_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, manifest) = tiny_run(dir.path(), Ablation::BASELINE);
        cfg.trainer.precision = Precision::F32;
        cfg.trainer.epochs = 1;
        let ck = train(&cfg, &manifest, &mut std::io::sink()).unwrap();
        let w = ck.params.get("classifier.weight").unwrap();
        assert!(w.iter().all(|&x| x == x as f32 as f64));
    }
}
