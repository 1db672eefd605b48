use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate_toy_ap;
use super::loss::{gt_loss, GtLossWeights};
use super::model::ToyDetector;
use super::optim::{AdamW, AdamWConfig};
use super::scene::Dataset;
use crate::agfd::{agfd_loss, agfd_loss_with_adapter, foreground_mask, AdapterConfig, AttentionStack, ADAPTER_PREFIX};
use crate::assignment::{bipartite_match, MatchWeights};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::lapd::{lapd_loss, local_align, PairingConfig};
use crate::selection::{GqsConfig, PredictionSet};

/// Everything that shapes a training or distillation run besides the models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub loss: GtLossWeights,
    pub match_weights: MatchWeights,
    pub lambda_agfd: f64,
    pub lambda_lapd: f64,
    pub gqs: GqsConfig,
    /// Build the feature mask from hard negatives as well as positives.
    pub agfd_hard_negatives: bool,
    pub pairing: PairingConfig,
    pub adapter: AdapterConfig,
    pub preload_teacher_weights: bool,
    /// Evaluate toy AP every this many epochs (and after the last); 0 only after the last.
    pub eval_every: usize,
    pub eval_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 8,
            seed: 0,
            optimizer: AdamWConfig::default(),
            loss: GtLossWeights::default(),
            match_weights: MatchWeights::default(),
            lambda_agfd: 50.0,
            lambda_lapd: 1.0,
            gqs: GqsConfig::default(),
            agfd_hard_negatives: true,
            pairing: PairingConfig::default(),
            adapter: AdapterConfig::default(),
            preload_teacher_weights: false,
            eval_every: 0,
            eval_iou: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [("lambda_agfd", self.lambda_agfd), ("lambda_lapd", self.lambda_lapd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return Err(Error::Config(format!("eval_iou must be in (0, 1], got {}", self.eval_iou)));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.match_weights.validate()?;
        self.gqs.validate()
    }

    fn distills(&self) -> bool {
        self.lambda_agfd > 0.0 || self.lambda_lapd > 0.0
    }
}

/// Per-epoch record; losses are means over images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub loss_total: f64,
    pub loss_gt: f64,
    pub loss_agfd: f64,
    pub loss_lapd: f64,
    pub lapd_pairs: f64,
    pub toy_ap: Option<f64>,
}

/// Frozen teacher predictions for every training scene.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub preds: Vec<PredictionSet>,
    pub attention: Vec<AttentionStack>,
    /// `[d x P]` encoder features.
    pub features: Vec<Tensor>,
}

impl TeacherOutputs {
    pub fn compute(teacher: &ToyDetector, data: &Dataset) -> Result<Self> {
        if teacher.scene != data.spec {
            return Err(Error::Config("teacher was built for a different scene layout".into()));
        }
        let mut out = TeacherOutputs {
            preds: Vec::with_capacity(data.len()),
            attention: Vec::with_capacity(data.len()),
            features: Vec::with_capacity(data.len()),
        };
        for x in &data.patches {
            let (p, a, f) = teacher.predict(x)?;
            out.preds.push(p);
            out.attention.push(a);
            out.features.push(f);
        }
        Ok(out)
    }
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546);
    rng.set_stream(epoch as u64);
    rng
}

/// Stream for drawing adapter weights, separate from model initialization.
pub fn adapter_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4144_4150);
    rng.set_stream(1);
    rng
}

/// Checks that `student` can learn from `teacher` under `cfg`, copies the
/// teacher's weights when preloading and adds adapter parameters.
pub fn prepare_student(student: &mut ToyDetector, teacher: &ToyDetector, cfg: &TrainConfig) -> Result<()> {
    if student.scene != teacher.scene {
        return Err(Error::Config("teacher and student use different scene layouts".into()));
    }
    if student.config.d_model != teacher.config.d_model {
        return Err(Error::Config(format!(
            "feature width mismatch: teacher d_model {} vs student {}",
            teacher.config.d_model, student.config.d_model
        )));
    }
    if cfg.preload_teacher_weights {
        if student.config != teacher.config {
            return Err(Error::Config(
                "preload_teacher_weights needs identical teacher and student architectures".into(),
            ));
        }
        for (name, value) in teacher.params.iter() {
            if !name.starts_with(ADAPTER_PREFIX) {
                student.params.insert(name, value.clone());
            }
        }
    }
    if cfg.adapter.enabled && student.params.position(&format!("{ADAPTER_PREFIX}.ln1.gamma")).is_none() {
        cfg.adapter
            .init(&mut student.params, &mut adapter_rng(cfg.seed), student.config.d_model)?;
    }
    Ok(())
}

/// A frozen teacher together with its cached outputs on the training set.
#[derive(Clone, Copy)]
pub struct Distillation<'a> {
    pub teacher: &'a ToyDetector,
    pub outputs: &'a TeacherOutputs,
}

/// Losses of one image, already recorded on the tape.
pub struct ImageLoss {
    pub total: Var,
    pub gt: f64,
    pub agfd: f64,
    pub lapd: f64,
    pub pairs: usize,
}

pub struct Trainer {
    pub model: ToyDetector,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: ToyDetector, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer, &model.params);
        Ok(Trainer {
            model,
            optimizer,
            config,
            epoch: 0,
        })
    }

    /// Forward pass and every configured loss for training image `index`.
    pub fn image_loss(
        &self,
        t: &mut Tape,
        p: &crate::nn::Bound,
        data: &Dataset,
        index: usize,
        distill: Option<Distillation>,
    ) -> Result<ImageLoss> {
        let cfg = &self.config;
        let f = self.model.forward(t, p, &data.patches[index])?;
        let preds = f.predictions(t)?;
        let gts = &data.scenes[index].gts;
        let assignment = bipartite_match(&preds, gts, &cfg.match_weights)?;
        let lg = gt_loss(t, f.probs, f.boxes, gts, &assignment, &cfg.loss)?;
        let mut out = ImageLoss {
            total: lg,
            gt: t.value(lg).item()?,
            agfd: 0.0,
            lapd: 0.0,
            pairs: 0,
        };
        let Some(d) = distill else { return Ok(out) };
        if gts.is_empty() || !cfg.distills() {
            return Ok(out);
        }

        let teacher_preds = &d.outputs.preds[index];
        let local = local_align(teacher_preds, &preds, gts, &assignment, &cfg.gqs, &cfg.match_weights, &cfg.pairing)?;
        if cfg.lambda_agfd > 0.0 {
            let tg = &local.teacher_gqs;
            let selected = if cfg.agfd_hard_negatives {
                &tg.selected_indices
            } else {
                &tg.positive_indices
            };
            let mask = foreground_mask(&d.outputs.attention[index], selected, &tg.giou_metric)?;
            let teacher_features = t.constant(d.outputs.features[index].clone());
            let la = if cfg.adapter.enabled {
                let grid = self.model.scene.grid();
                agfd_loss_with_adapter(t, p, &cfg.adapter, teacher_features, f.features, grid, &mask)?
            } else {
                agfd_loss(t, teacher_features, f.features, &mask)?
            };
            out.agfd = t.value(la).item()?;
            let weighted = t.scale(la, cfg.lambda_agfd)?;
            out.total = t.add(out.total, weighted)?;
        }
        if cfg.lambda_lapd > 0.0 {
            let ll = lapd_loss(
                t,
                &local.pairs,
                teacher_preds,
                f.probs,
                f.boxes,
                cfg.loss.lambda_cls,
                cfg.loss.lambda_box,
            )?;
            out.lapd = t.value(ll).item()?;
            out.pairs = local.pairs.len();
            let weighted = t.scale(ll, cfg.lambda_lapd)?;
            out.total = t.add(out.total, weighted)?;
        }
        Ok(out)
    }

    /// One pass over `data` in a seed- and epoch-determined order.
    pub fn run_epoch(&mut self, data: &Dataset, distill: Option<Distillation>) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if let Some(d) = distill {
            if d.outputs.preds.len() != data.len() {
                return Err(Error::Contract("teacher outputs do not cover the training set".into()));
            }
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle_rng(self.config.seed, self.epoch));

        let (mut gt, mut agfd, mut lapd, mut total, mut pairs) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut steps = 0;
        for batch in order.chunks(self.config.batch_size) {
            let mut t = Tape::new();
            let p = self.model.params.bind(&mut t, true);
            let mut sum: Option<Var> = None;
            for &i in batch {
                let l = self.image_loss(&mut t, &p, data, i, distill)?;
                gt += l.gt;
                agfd += l.agfd;
                lapd += l.lapd;
                total += t.value(l.total).item()?;
                pairs += l.pairs;
                sum = Some(match sum {
                    Some(s) => t.add(s, l.total)?,
                    None => l.total,
                });
            }
            let loss = t.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            t.backward(loss)?;
            let grads: Vec<Tensor> = p
                .vars()
                .iter()
                .map(|&v| t.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape(v))))
                .collect();
            drop(p);
            self.optimizer.update(&mut self.model.params, &grads)?;
            steps += 1;
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            steps,
            loss_total: total / n,
            loss_gt: gt / n,
            loss_agfd: agfd / n,
            loss_lapd: lapd / n,
            lapd_pairs: pairs as f64 / n,
            toy_ap: None,
        })
    }

    /// Trains until `config.epochs` epochs are complete, reporting each epoch
    /// to `on_epoch` as it finishes.
    pub fn fit(
        &mut self,
        data: &Dataset,
        eval: Option<&Dataset>,
        distill: Option<Distillation>,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let mut m = self.run_epoch(data, distill)?;
            let due = self.epoch == self.config.epochs
                || (self.config.eval_every > 0 && self.epoch.is_multiple_of(self.config.eval_every));
            if let (Some(ev), true) = (eval, due) {
                m.toy_ap = Some(evaluate_toy_ap(&self.model, ev, self.config.eval_iou)?);
            }
            on_epoch(self, &m)?;
            history.push(m);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydetr::model::ModelConfig;
    use crate::toydetr::scene::SceneSpec;

    fn tiny() -> (ModelConfig, SceneSpec) {
        (
            ModelConfig {
                d_model: 16,
                heads: 2,
                ffn_dim: 16,
                backbone_hidden: 16,
                n_enc: 1,
                n_dec: 1,
                n_queries: 6,
            },
            SceneSpec {
                height: 16,
                width: 16,
                max_objects: 2,
                min_size: 4,
                max_size: 8,
                ..SceneSpec::default()
            },
        )
    }

    fn model(cfg: &ModelConfig, spec: &SceneSpec, seed: u64) -> ToyDetector {
        ToyDetector::new(cfg.clone(), spec.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_weights_reproduce_plain_training() {
        let (mc, spec) = tiny();
        let data = Dataset::generate(&spec, 0, 0, 12).unwrap();
        let teacher = model(&mc, &spec, 99);
        let outputs = TeacherOutputs::compute(&teacher, &data).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lambda_agfd: 0.0,
            lambda_lapd: 0.0,
            ..TrainConfig::default()
        };
        let mut plain = Trainer::new(model(&mc, &spec, 1), cfg.clone()).unwrap();
        let a = plain.fit(&data, None, None, |_, _| Ok(())).unwrap();
        let mut distilled = Trainer::new(model(&mc, &spec, 1), cfg).unwrap();
        let d = Distillation {
            teacher: &teacher,
            outputs: &outputs,
        };
        let b = distilled.fit(&data, None, Some(d), |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(plain.model.params, distilled.model.params);
    }

    #[test]
    fn teacher_copy_has_zero_distillation_loss() {
        let (mc, spec) = tiny();
        let data = Dataset::generate(&spec, 0, 0, 6).unwrap();
        let teacher = model(&mc, &spec, 5);
        let outputs = TeacherOutputs::compute(&teacher, &data).unwrap();
        let cfg = TrainConfig {
            preload_teacher_weights: true,
            ..TrainConfig::default()
        };
        let mut student = model(&mc, &spec, 6);
        prepare_student(&mut student, &teacher, &cfg).unwrap();
        let trainer = Trainer::new(student, cfg).unwrap();
        let d = Distillation {
            teacher: &teacher,
            outputs: &outputs,
        };
        for i in 0..data.len() {
            let mut t = Tape::new();
            let p = trainer.model.params.bind(&mut t, true);
            let l = trainer.image_loss(&mut t, &p, &data, i, Some(d)).unwrap();
            assert!(l.agfd.abs() < 1e-12, "{}", l.agfd);
            assert!(l.lapd.abs() < 1e-9, "{}", l.lapd);
            assert!(l.pairs > 0);
        }
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let (mc, spec) = tiny();
        let teacher = model(&mc, &spec, 0);
        let narrow = ModelConfig {
            d_model: 8,
            ..mc.clone()
        };
        let mut student = model(&narrow, &spec, 1);
        let r = prepare_student(&mut student, &teacher, &TrainConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
