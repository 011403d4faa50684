//! Two-phase training and the assembled pipeline.
//!
//! Phase 1 fits the captioner (backbone, attention stacks, vocabulary head)
//! on (image, caption) pairs. Phase 2 freezes the captioner, uses it only
//! to translate images, and fits the language encoder plus classification
//! head on the sentiment task. A per-step fingerprint audit proves the
//! frozen parameter groups never move during a phase.

mod optim;

pub use optim::{lr_schedule, AdamW, AdamWConfig};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Mode;
use crate::captioner::{CaptionerConfig, CaptionerModel};
use crate::checkpoint::{load_into, load_manifest, save_checkpoint, Manifest, Phase};
use crate::data::CaptionDataset;
use crate::error::{Error, Result};
use crate::eval::PredictionRecord;
use crate::fusion::{
    class_nll, ef_logits_from_caption, lf_logits_from_caption,
    pair_qa_predict_with_temperature, pair_qa_query_logits, ClassifierHead, FusionMode,
    LanguageEncoderConfig, LanguageEncoderParams, MultimodalSample,
};
use crate::tensor::{Element, Tensor};
use crate::text::{tokenize, TokenSequence, Vocabulary};

/// Hyperparameters for both training phases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Dropout applied between the pooler and the classification head.
    pub pooler_dropout: f64,
    pub weight_decay: f64,
    pub captioner: CaptionerConfig,
    pub encoder: LanguageEncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let vocab_size = crate::data::synthetic_vocabulary().size();
        TrainConfig {
            seed: 0,
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 6,
            pooler_dropout: 0.1,
            weight_decay: 0.01,
            captioner: CaptionerConfig {
                image_height: 16,
                image_width: 16,
                backbone_channels: vec![16, 32, 16],
                d: 16,
                heads: 4,
                d_ff: 64,
                enc_layers: 2,
                dec_layers: 2,
                // one control position plus the sentence-B budget (l - 3)
                caption_len: 77,
                vocab_size,
                dropout: 0.0,
            },
            encoder: LanguageEncoderConfig {
                d: 64,
                heads: 4,
                d_ff: 256,
                layers: 2,
                max_length: 80,
                vocab_size,
                dropout: 0.0,
            },
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for the synthetic corpus. Batch size, epoch count
    /// and pooler dropout follow the full-scale recipe; the learning rate
    /// is raised to a from-scratch value since there are no pretrained
    /// weights to fine-tune here.
    pub fn synthetic_toy(seed: u64) -> Self {
        let vocab_size = crate::data::synthetic_vocabulary().size();
        TrainConfig {
            seed,
            learning_rate: 2e-3,
            batch_size: 16,
            epochs: 6,
            pooler_dropout: 0.1,
            weight_decay: 0.01,
            captioner: CaptionerConfig {
                image_height: 16,
                image_width: 16,
                backbone_channels: vec![16, 32, 16],
                d: 16,
                heads: 4,
                d_ff: 64,
                enc_layers: 1,
                dec_layers: 1,
                caption_len: 5,
                vocab_size,
                dropout: 0.0,
            },
            encoder: LanguageEncoderConfig {
                d: 32,
                heads: 4,
                d_ff: 128,
                layers: 2,
                max_length: 24,
                vocab_size,
                dropout: 0.0,
            },
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.pooler_dropout) {
            return Err(Error::Config(format!(
                "pooler_dropout {} outside [0, 1)",
                self.pooler_dropout
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.captioner.validate()?;
        self.encoder.validate()?;
        if self.captioner.vocab_size != vocab.size() || self.encoder.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "config vocab sizes ({}, {}) do not match vocabulary of {} tokens",
                self.captioner.vocab_size,
                self.encoder.vocab_size,
                vocab.size()
            )));
        }
        Ok(())
    }

    /// Linear-schedule horizon: ceil(samples / batch) * epochs.
    pub fn total_steps(&self, n_samples: usize) -> u64 {
        (n_samples.div_ceil(self.batch_size) * self.epochs) as u64
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

// ── Parameter fingerprint audit ──────────────────────────────────────

/// Order-independent fingerprint of a tensor's exact bits.
pub fn fingerprint_tensor<E: Element>(t: &Tensor<E>) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut bytes = Vec::with_capacity(t.numel() * E::BYTES);
    for v in t.data() {
        v.write_le(&mut bytes);
    }
    let mut h = std::collections::hash_map::DefaultHasher::new();
    t.shape().hash(&mut h);
    bytes.hash(&mut h);
    h.finish()
}

/// Fingerprint every parameter reported by `visit`.
pub fn snapshot_fingerprints<E: Element>(
    visit: impl FnOnce(&mut dyn FnMut(&str, &Tensor<E>)),
) -> BTreeMap<String, u64> {
    let mut map = BTreeMap::new();
    visit(&mut |name, t| {
        map.insert(name.to_string(), fingerprint_tensor(t));
    });
    map
}

/// Names present in either snapshot whose fingerprints differ.
pub fn diff_fingerprints(a: &BTreeMap<String, u64>, b: &BTreeMap<String, u64>) -> Vec<String> {
    let mut changed = Vec::new();
    for (name, hash) in a {
        if b.get(name) != Some(hash) {
            changed.push(name.clone());
        }
    }
    for name in b.keys() {
        if !a.contains_key(name) {
            changed.push(name.clone());
        }
    }
    changed
}

// ── Training logs ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters the returned model carries (best validation
    /// accuracy; last epoch when no validation set was given).
    pub best_epoch: Option<usize>,
    /// Steps at which the frozen-group audit ran and passed.
    pub audited_steps: usize,
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Contract(format!(
            "non-finite loss {loss} at step {step}; training aborted"
        )));
    }
    Ok(())
}

fn mean_of<E: Element>(losses: Vec<Tensor<E>>) -> Result<Tensor<E>> {
    let n = losses.len();
    let mut total = losses[0].clone();
    for l in &losses[1..] {
        total = total.add(l)?;
    }
    Ok(total.scale(E::from_f64(1.0 / n as f64)))
}

// ── Phase 1: caption pretraining ─────────────────────────────────────

/// Mean caption loss over a batch of (image, caption-token) pairs.
pub fn caption_batch_loss<E: Element>(
    model: &CaptionerModel<E>,
    dataset: &CaptionDataset<E>,
    captions_tok: &[TokenSequence],
    batch: &[usize],
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let losses = batch
        .iter()
        .map(|&i| model.loss(&dataset.images[i], &captions_tok[i], mode))
        .collect::<Result<Vec<_>>>()?;
    mean_of(losses)
}

/// Fit the captioner on (image, caption) pairs with AdamW and the linear
/// schedule. Only captioner parameter groups exist in this phase; the
/// classifier-side parameters are created later and untouched by
/// construction. Writes one checkpoint per epoch plus the final state when
/// `ckpt_dir` is given.
pub fn pretrain_captioner<E: Element>(
    dataset: &CaptionDataset<E>,
    vocab: &Vocabulary,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<(CaptionerModel<E>, TrainLog)> {
    if dataset.images.is_empty() {
        return Err(Error::Config("caption dataset is empty".into()));
    }
    config.validate(vocab)?;
    let captions_tok: Vec<TokenSequence> = dataset.captions.iter().map(|c| tokenize(c, vocab)).collect();
    for (i, toks) in captions_tok.iter().enumerate() {
        if toks.len() > config.captioner.caption_len - 1 {
            return Err(Error::Config(format!(
                "caption {i} has {} tokens, decoder budget is {}",
                toks.len(),
                config.captioner.caption_len - 1
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CaptionerModel::init(config.captioner.clone(), &mut rng)?;
    let mut opt = AdamW::<E>::new(config.adamw());
    let n = dataset.images.len();
    let total_steps = config.total_steps(n);
    let mut log = TrainLog::default();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in indices.chunks(config.batch_size) {
            let loss = caption_batch_loss(
                &model,
                dataset,
                &captions_tok,
                batch,
                &mut Mode::Train { dropout_rng: &mut rng },
            )?;
            let loss_val = loss.item().as_f64();
            check_finite(loss_val, log.step_losses.len())?;
            loss.backward()?;
            let lr = lr_schedule(step, total_steps, config.learning_rate);
            opt.begin_step();
            let mut fail = None;
            model.visit_mut(&mut |name, t| {
                if fail.is_none() {
                    if let Err(e) = opt.update(name, t, lr) {
                        fail = Some(e);
                    }
                }
            });
            if let Some(e) = fail {
                return Err(e);
            }
            step += 1;
            log.step_losses.push(loss_val);
            epoch_loss += loss_val;
            epoch_batches += 1;
        }
        let mean_loss = epoch_loss / epoch_batches.max(1) as f64;
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            val_accuracy: None,
        });
        log::info!("captioner epoch {epoch}: mean loss {mean_loss:.4}");
        if let Some(dir) = ckpt_dir {
            save_captioner_checkpoint(&dir.join(format!("epoch{epoch:03}")), &model)?;
        }
    }
    if let Some(dir) = ckpt_dir {
        save_captioner_checkpoint(dir, &model)?;
    }
    Ok((model, log))
}

/// Fraction of real-token positions where the argmax prediction equals the
/// gold token (eval mode, no recording).
pub fn caption_token_accuracy<E: Element>(
    model: &CaptionerModel<E>,
    dataset: &CaptionDataset<E>,
    vocab: &Vocabulary,
) -> Result<f64> {
    crate::tensor::no_grad(|| {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (image, caption) in dataset.images.iter().zip(&dataset.captions) {
            let toks = tokenize(caption, vocab);
            let logits = model.forward_logits(image, &mut Mode::Eval)?;
            let v = logits.cols();
            for (pos, &gold) in toks.iter().enumerate() {
                let row = &logits.data()[(pos + 1) * v..(pos + 2) * v];
                let mut best = 0;
                for (j, &x) in row.iter().enumerate().skip(1) {
                    if x > row[best] {
                        best = j;
                    }
                }
                total += 1;
                if best == gold {
                    hit += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::Contract("caption accuracy over an empty token set".into()));
        }
        Ok(hit as f64 / total as f64)
    })
}

pub fn save_captioner_checkpoint<E: Element>(dir: &Path, model: &CaptionerModel<E>) -> Result<()> {
    let manifest = Manifest {
        phase: Phase::Captioner,
        captioner: model.config.clone(),
        encoder: None,
        fusion_mode: None,
        classes: None,
        tensors: BTreeMap::new(),
    };
    save_checkpoint(dir, manifest, &|f| model.visit(f))
}

pub fn load_captioner_checkpoint<E: Element>(dir: &Path) -> Result<CaptionerModel<E>> {
    let manifest = load_manifest(dir)?;
    if manifest.phase != Phase::Captioner {
        return Err(Error::Integrity(format!(
            "{}: expected a captioner-phase checkpoint",
            dir.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = CaptionerModel::init(manifest.captioner.clone(), &mut rng)?;
    load_into(dir, &manifest, &mut |f| model.visit_mut(f))?;
    Ok(model)
}

// ── Phase 2: classifier training ─────────────────────────────────────

/// The assembled two-stage model: frozen captioner, language encoder,
/// classification head.
#[derive(Debug, Clone)]
pub struct Pipeline<E: Element> {
    pub captioner: CaptionerModel<E>,
    pub encoder: LanguageEncoderParams<E>,
    pub head: ClassifierHead<E>,
    pub mode: FusionMode,
    pub classes: Vec<String>,
}

impl<E: Element> Pipeline<E> {
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.captioner.visit(f);
        self.encoder.visit(f);
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.captioner.visit_mut(f);
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }

    /// Deterministic eval-mode prediction for one sample. `temperature`
    /// divides the final logits before softmax (1.0 leaves them as
    /// trained).
    pub fn predict_record(
        &self,
        id: usize,
        sample: &MultimodalSample<E>,
        vocab: &Vocabulary,
        temperature: f64,
    ) -> Result<PredictionRecord> {
        if temperature <= 0.0 {
            return Err(Error::Param(format!("temperature must be > 0, got {temperature}")));
        }
        crate::tensor::no_grad(|| match self.mode {
            FusionMode::EarlyFusion | FusionMode::LateFusion => {
                let caption = self.captioner.decode_caption(&sample.image)?;
                let logits = match self.mode {
                    FusionMode::EarlyFusion => ef_logits_from_caption(
                        sample,
                        &caption,
                        &self.encoder,
                        &self.head,
                        vocab,
                        &mut Mode::Eval,
                    )?,
                    _ => lf_logits_from_caption(
                        sample,
                        &caption,
                        &self.encoder,
                        &self.head,
                        vocab,
                        &mut Mode::Eval,
                    )?,
                };
                let probs = logits.scale(E::from_f64(1.0 / temperature)).softmax(0)?;
                let probabilities: Vec<f64> = probs.data().iter().map(|p| p.as_f64()).collect();
                let predicted = crate::fusion::decide_from_confidences(&probabilities);
                Ok(PredictionRecord::from_probabilities(
                    id,
                    sample.label,
                    predicted,
                    probabilities,
                    caption.len(),
                    self.mode,
                ))
            }
            FusionMode::PairQa => {
                let (predicted, confidences) = pair_qa_predict_with_temperature(
                    sample,
                    &self.encoder,
                    &self.head,
                    vocab,
                    &self.classes,
                    temperature,
                )?;
                let total: f64 = confidences.iter().sum();
                let probabilities = if total > 0.0 {
                    confidences.iter().map(|c| c / total).collect()
                } else {
                    vec![1.0 / confidences.len() as f64; confidences.len()]
                };
                Ok(PredictionRecord {
                    id,
                    gold: sample.label,
                    predicted,
                    probabilities,
                    confidence: confidences[predicted],
                    caption_len: 0,
                    mode: self.mode,
                })
            }
        })
    }

    pub fn evaluate(
        &self,
        samples: &[MultimodalSample<E>],
        vocab: &Vocabulary,
        temperature: f64,
    ) -> Result<Vec<PredictionRecord>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| self.predict_record(i, s, vocab, temperature))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            phase: Phase::Classifier,
            captioner: self.captioner.config.clone(),
            encoder: Some(self.encoder.config.clone()),
            fusion_mode: Some(self.mode),
            classes: Some(self.classes.clone()),
            tensors: BTreeMap::new(),
        };
        save_checkpoint(dir, manifest, &|f| self.visit(f))
    }

    pub fn load(dir: &Path) -> Result<Pipeline<E>> {
        let manifest = load_manifest(dir)?;
        if manifest.phase != Phase::Classifier {
            return Err(Error::Integrity(format!(
                "{}: expected a classifier-phase checkpoint",
                dir.display()
            )));
        }
        let encoder_config = manifest
            .encoder
            .clone()
            .ok_or_else(|| Error::Integrity("classifier checkpoint missing encoder config".into()))?;
        let mode = manifest
            .fusion_mode
            .ok_or_else(|| Error::Integrity("classifier checkpoint missing fusion mode".into()))?;
        let classes = manifest
            .classes
            .clone()
            .ok_or_else(|| Error::Integrity("classifier checkpoint missing class names".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let captioner = CaptionerModel::init(manifest.captioner.clone(), &mut rng)?;
        let encoder = LanguageEncoderParams::init(encoder_config.clone(), &mut rng)?;
        let head = head_for_mode(mode, classes.len(), &encoder_config, 0.0, &mut rng)?;
        let mut pipeline = Pipeline {
            captioner,
            encoder,
            head,
            mode,
            classes,
        };
        load_into(dir, &manifest, &mut |f| pipeline.visit_mut(f))?;
        Ok(pipeline)
    }
}

fn head_for_mode<E: Element>(
    mode: FusionMode,
    classes: usize,
    encoder: &LanguageEncoderConfig,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ClassifierHead<E>> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    Ok(match mode {
        FusionMode::EarlyFusion => ClassifierHead::init(classes, encoder.d, dropout, rng),
        FusionMode::LateFusion => ClassifierHead::init(classes, 2 * encoder.d, dropout, rng),
        FusionMode::PairQa => ClassifierHead::init(2, encoder.d, dropout, rng),
    })
}

/// Mean classification loss over a batch, dispatching on fusion mode.
/// `captions` holds the frozen captioner's decoded tokens per sample
/// (unused by the pair-query mode, which never sees the image).
pub fn classifier_batch_loss<E: Element>(
    encoder: &LanguageEncoderParams<E>,
    head: &ClassifierHead<E>,
    mode: FusionMode,
    classes: &[String],
    samples: &[MultimodalSample<E>],
    captions: &[TokenSequence],
    batch: &[usize],
    vocab: &Vocabulary,
    run: &mut Mode,
) -> Result<Tensor<E>> {
    let mut losses = Vec::new();
    for &i in batch {
        match mode {
            FusionMode::EarlyFusion => {
                let logits = ef_logits_from_caption(&samples[i], &captions[i], encoder, head, vocab, run)?;
                losses.push(class_nll(&logits, samples[i].label)?);
            }
            FusionMode::LateFusion => {
                let logits = lf_logits_from_caption(&samples[i], &captions[i], encoder, head, vocab, run)?;
                losses.push(class_nll(&logits, samples[i].label)?);
            }
            FusionMode::PairQa => {
                // one binary instance per label query
                for (q, word) in classes.iter().enumerate() {
                    let logits = pair_qa_query_logits(&samples[i], word, encoder, head, vocab, run)?;
                    let target = usize::from(q == samples[i].label);
                    losses.push(class_nll(&logits, target)?);
                }
            }
        }
    }
    mean_of(losses)
}

/// Phase 2: train encoder + head on the sentiment task with the captioner
/// frozen. Per-step fingerprinting of every captioner parameter aborts the
/// run if anything in the frozen groups moves. Returns the parameters of
/// the best-validation-accuracy epoch (last epoch when `val` is empty).
#[allow(clippy::too_many_arguments)]
pub fn train_classifier<E: Element>(
    train_set: &[MultimodalSample<E>],
    val_set: &[MultimodalSample<E>],
    classes: &[String],
    captioner: CaptionerModel<E>,
    vocab: &Vocabulary,
    config: &TrainConfig,
    mode: FusionMode,
    ckpt_dir: Option<&Path>,
) -> Result<(Pipeline<E>, TrainLog)> {
    if train_set.is_empty() {
        return Err(Error::Config("sentiment training set is empty".into()));
    }
    config.validate(vocab)?;
    for s in train_set.iter().chain(val_set) {
        if s.label >= classes.len() {
            return Err(Error::Config(format!(
                "label index {} outside {} classes",
                s.label,
                classes.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let encoder = LanguageEncoderParams::init(config.encoder.clone(), &mut rng)?;
    let head = head_for_mode(mode, classes.len(), &config.encoder, config.pooler_dropout, &mut rng)?;
    let mut pipeline = Pipeline {
        captioner,
        encoder,
        head,
        mode,
        classes: classes.to_vec(),
    };

    // the captioner is frozen: decode every training image once up front
    let captions: Vec<TokenSequence> = if mode == FusionMode::PairQa {
        vec![Vec::new(); train_set.len()]
    } else {
        train_set
            .iter()
            .map(|s| pipeline.captioner.decode_caption(&s.image))
            .collect::<Result<Vec<_>>>()?
    };

    let frozen_baseline = snapshot_fingerprints(|f| pipeline.captioner.visit(f));
    let mut opt = AdamW::<E>::new(config.adamw());
    let total_steps = config.total_steps(train_set.len());
    let mut log = TrainLog::default();
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    let mut best: Option<(f64, usize, LanguageEncoderParams<E>, ClassifierHead<E>)> = None;

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in indices.chunks(config.batch_size) {
            let loss = classifier_batch_loss(
                &pipeline.encoder,
                &pipeline.head,
                mode,
                classes,
                train_set,
                &captions,
                batch,
                vocab,
                &mut Mode::Train { dropout_rng: &mut rng },
            )?;
            let loss_val = loss.item().as_f64();
            check_finite(loss_val, log.step_losses.len())?;
            loss.backward()?;
            let lr = lr_schedule(step, total_steps, config.learning_rate);
            opt.begin_step();
            let mut fail = None;
            let mut update = |name: &str, t: &mut Tensor<E>| {
                if fail.is_none() {
                    if let Err(e) = opt.update(name, t, lr) {
                        fail = Some(e);
                    }
                }
            };
            pipeline.encoder.visit_mut(&mut update);
            pipeline.head.visit_mut(&mut update);
            if let Some(e) = fail {
                return Err(e);
            }
            // frozen-group audit: the captioner must not have moved
            let now = snapshot_fingerprints(|f| pipeline.captioner.visit(f));
            let drift = diff_fingerprints(&frozen_baseline, &now);
            if !drift.is_empty() {
                return Err(Error::Contract(format!(
                    "frozen captioner parameters changed during classifier training: {drift:?}"
                )));
            }
            log.audited_steps += 1;
            step += 1;
            log.step_losses.push(loss_val);
            epoch_loss += loss_val;
            epoch_batches += 1;
        }

        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            let records = pipeline.evaluate(val_set, vocab, 1.0)?;
            Some(crate::eval::accuracy(&records)?)
        };
        let mean_loss = epoch_loss / epoch_batches.max(1) as f64;
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            val_accuracy,
        });
        log::info!(
            "classifier({mode}) epoch {epoch}: mean loss {mean_loss:.4} val acc {val_accuracy:?}"
        );

        let score = val_accuracy.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            Some((best_score, _, _, _)) => score > *best_score,
            None => true,
        };
        if val_set.is_empty() || improved {
            best = Some((score, epoch, pipeline.encoder.clone(), pipeline.head.clone()));
        }
        if let Some(dir) = ckpt_dir {
            pipeline.save(&dir.join(format!("epoch{epoch:03}")))?;
        }
    }

    let (_, best_epoch, best_encoder, best_head) = best.expect("at least one epoch ran");
    pipeline.encoder = best_encoder;
    pipeline.head = best_head;
    log.best_epoch = Some(best_epoch);
    if let Some(dir) = ckpt_dir {
        pipeline.save(dir)?;
    }
    Ok((pipeline, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec, SyntheticBundle};

    fn tiny_toy_config(seed: u64) -> TrainConfig {
        let mut config = TrainConfig::synthetic_toy(seed);
        // shrink for unit-test speed; acceptance runs the full preset
        config.encoder.d = 16;
        config.encoder.d_ff = 32;
        config.encoder.layers = 1;
        config.encoder.max_length = 16;
        config.captioner.backbone_channels = vec![8, 8, 8];
        config.captioner.d = 8;
        config.captioner.heads = 2;
        config.captioner.d_ff = 16;
        config
    }

    fn tiny_bundle(seed: u64) -> SyntheticBundle<f32> {
        generate_synthetic(&SynthSpec {
            seed,
            caption_pairs: 4,
            train: 12,
            val: 6,
            test: 6,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn config_validation_catches_mismatched_vocab() {
        let vocab = crate::data::synthetic_vocabulary();
        let mut config = tiny_toy_config(0);
        config.captioner.vocab_size = 999;
        assert!(config.validate(&vocab).is_err());
        assert!(tiny_toy_config(0).validate(&vocab).is_ok());
    }

    #[test]
    fn total_steps_is_ceil_batches_times_epochs() {
        let config = TrainConfig {
            batch_size: 16,
            epochs: 6,
            ..TrainConfig::default()
        };
        assert_eq!(config.total_steps(64), 24);
        assert_eq!(config.total_steps(65), 30);
        assert_eq!(config.total_steps(1), 6);
    }

    #[test]
    fn fingerprint_diff_detects_changes() {
        let a = Tensor::<f32>::param(vec![2], vec![1.0, 2.0]).unwrap();
        let before = snapshot_fingerprints(|f| f("x", &a));
        let b = a.param_like(vec![1.0, 2.5]).unwrap();
        let after = snapshot_fingerprints(|f| f("x", &b));
        assert_eq!(diff_fingerprints(&before, &before), Vec::<String>::new());
        assert_eq!(diff_fingerprints(&before, &after), vec!["x".to_string()]);
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let vocab = crate::data::synthetic_vocabulary();
        let empty = CaptionDataset::<f32> {
            images: Vec::new(),
            captions: Vec::new(),
        };
        let err = pretrain_captioner(&empty, &vocab, &tiny_toy_config(0), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let bundle = tiny_bundle(3);
        let mut config = tiny_toy_config(7);
        config.epochs = 2;
        let (m1, log1) = pretrain_captioner(&bundle.captions, &bundle.vocab, &config, None).unwrap();
        let (m2, log2) = pretrain_captioner(&bundle.captions, &bundle.vocab, &config, None).unwrap();
        assert_eq!(log1.step_losses, log2.step_losses);
        let f1 = snapshot_fingerprints(|f| m1.visit(f));
        let f2 = snapshot_fingerprints(|f| m2.visit(f));
        assert_eq!(diff_fingerprints(&f1, &f2), Vec::<String>::new());
    }

    #[test]
    fn captioner_checkpoint_round_trip_preserves_forward() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle(4);
        let mut config = tiny_toy_config(8);
        config.epochs = 1;
        let (model, _) = pretrain_captioner(&bundle.captions, &bundle.vocab, &config, Some(dir.path())).unwrap();
        let loaded = load_captioner_checkpoint::<f32>(dir.path()).unwrap();
        for (img, _) in bundle.captions.images.iter().zip(&bundle.captions.captions) {
            let a = model.decode_caption(img).unwrap();
            let b = loaded.decode_caption(img).unwrap();
            assert_eq!(a, b);
            let la = model.forward_logits(img, &mut Mode::Eval).unwrap();
            let lb = loaded.forward_logits(img, &mut Mode::Eval).unwrap();
            for (x, y) in la.data().iter().zip(lb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // phase-1 checkpoints carry no classifier-side groups
        let manifest = load_manifest(dir.path()).unwrap();
        for name in manifest.tensors.keys() {
            assert!(
                !name.starts_with("lang_encoder") && !name.starts_with("classifier"),
                "unexpected group in captioner checkpoint: {name}"
            );
        }
    }

    #[test]
    fn classifier_loss_matches_naive_per_sample_loop() {
        let bundle = tiny_bundle(5);
        let config = tiny_toy_config(9);
        let vocab = &bundle.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let encoder = LanguageEncoderParams::<f32>::init(config.encoder.clone(), &mut rng).unwrap();
        let head = head_for_mode(FusionMode::EarlyFusion, 3, &config.encoder, 0.0, &mut rng).unwrap();
        let samples = &bundle.train.samples[..8];
        let captions: Vec<TokenSequence> = samples.iter().map(|_| vec![]).collect();
        let batch: Vec<usize> = (0..8).collect();
        let loss = classifier_batch_loss(
            &encoder,
            &head,
            FusionMode::EarlyFusion,
            &bundle.classes,
            samples,
            &captions,
            &batch,
            vocab,
            &mut Mode::Eval,
        )
        .unwrap();

        // naive loop: mean of per-sample -log p(gold)
        let mut total = 0.0;
        for (s, c) in samples.iter().zip(&captions) {
            let logits = ef_logits_from_caption(s, c, &encoder, &head, vocab, &mut Mode::Eval).unwrap();
            let probs = logits.softmax(0).unwrap();
            total += -(probs.data()[s.label] as f32).ln() as f64;
        }
        let naive = total / 8.0;
        assert!((loss.item() as f64 - naive).abs() < 1e-4, "{} vs {naive}", loss.item());
    }

    #[test]
    fn classifier_training_freezes_captioner_and_is_deterministic() {
        let bundle = tiny_bundle(6);
        let mut config = tiny_toy_config(10);
        config.epochs = 2;
        config.batch_size = 6;
        let (captioner, _) = {
            let mut pre = config.clone();
            pre.epochs = 1;
            pretrain_captioner(&bundle.captions, &bundle.vocab, &pre, None).unwrap()
        };
        let before = snapshot_fingerprints(|f| captioner.visit(f));

        let run = |cap: CaptionerModel<f32>| {
            train_classifier(
                &bundle.train.samples,
                &bundle.val.samples,
                &bundle.classes,
                cap,
                &bundle.vocab,
                &config,
                FusionMode::EarlyFusion,
                None,
            )
            .unwrap()
        };
        let (p1, log1) = run(captioner.clone());
        let (p2, log2) = run(captioner.clone());
        assert_eq!(log1.step_losses, log2.step_losses);
        assert!(log1.audited_steps > 0);
        assert_eq!(log1.best_epoch.is_some(), true);

        let after = snapshot_fingerprints(|f| p1.captioner.visit(f));
        assert_eq!(diff_fingerprints(&before, &after), Vec::<String>::new());

        let f1 = snapshot_fingerprints(|f| p1.visit(f));
        let f2 = snapshot_fingerprints(|f| p2.visit(f));
        assert_eq!(diff_fingerprints(&f1, &f2), Vec::<String>::new());
    }

    #[test]
    fn pipeline_checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle(7);
        let mut config = tiny_toy_config(11);
        config.epochs = 1;
        config.batch_size = 6;
        let (captioner, _) = pretrain_captioner(&bundle.captions, &bundle.vocab, &config, None).unwrap();
        let (pipeline, _) = train_classifier(
            &bundle.train.samples,
            &bundle.val.samples,
            &bundle.classes,
            captioner,
            &bundle.vocab,
            &config,
            FusionMode::EarlyFusion,
            Some(dir.path()),
        )
        .unwrap();
        let loaded = Pipeline::<f32>::load(dir.path()).unwrap();
        let a = pipeline.evaluate(&bundle.test.samples, &bundle.vocab, 1.0).unwrap();
        let b = loaded.evaluate(&bundle.test.samples, &bundle.vocab, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.predicted, y.predicted);
            assert_eq!(x.probabilities, y.probabilities);
        }
    }

    #[test]
    fn pair_qa_training_runs_and_counts_three_passes_per_sample() {
        let bundle = tiny_bundle(8);
        let mut config = tiny_toy_config(12);
        config.epochs = 1;
        config.batch_size = 4;
        let (captioner, _) = {
            let mut pre = config.clone();
            pre.epochs = 1;
            pretrain_captioner(&bundle.captions, &bundle.vocab, &pre, None).unwrap()
        };
        let (pipeline, _) = train_classifier(
            &bundle.train.samples,
            &[],
            &bundle.classes,
            captioner,
            &bundle.vocab,
            &config,
            FusionMode::PairQa,
            None,
        )
        .unwrap();
        assert_eq!(pipeline.head.classes(), 2);
        pipeline.encoder.counters.reset();
        let record = pipeline
            .predict_record(0, &bundle.test.samples[0], &bundle.vocab, 1.0)
            .unwrap();
        assert_eq!(pipeline.encoder.counters.encoder_passes.get(), 3);
        let total: f64 = record.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
