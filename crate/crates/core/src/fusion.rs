//! Sentence-pair language encoder and the three fusion paths.
//!
//! Early fusion (EF) routes the decoded image description into the encoder
//! itself: the auxiliary sentence (target tokens + description tokens)
//! becomes sentence B of the pair, so text and image context attend to each
//! other inside every layer. Late fusion (LF) encodes tweet and description
//! separately and concatenates the pooled vectors in front of a wider
//! linear head. The pair-query mode decomposes K-way classification into K
//! binary queries ("<label word> <target>") decided by confidence argmax —
//! one encoder pass per label, and no image at all.

use rand_chacha::ChaCha8Rng;

use crate::attention::{encoder_layer_forward, EncoderLayerParams, Mode};
use crate::captioner::{CaptionerModel, ImageTensor, PassCounters};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::text::{
    build_aux_sentence, build_sentence_pair, tokenize, SentencePairEncoding,
    Vocabulary,
};

/// One labelled multimodal input: sentence, the target mentioned in it,
/// the posted image, and the class index of the sentiment toward the
/// target.
#[derive(Debug, Clone)]
pub struct MultimodalSample<E: Element> {
    pub sentence: String,
    pub target: String,
    pub image: ImageTensor<E>,
    pub label: usize,
}

/// How the image context reaches the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionMode {
    #[serde(rename = "EF")]
    EarlyFusion,
    #[serde(rename = "LF")]
    LateFusion,
    #[serde(rename = "PairQA")]
    PairQa,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EF" => Ok(FusionMode::EarlyFusion),
            "LF" => Ok(FusionMode::LateFusion),
            "PairQA" => Ok(FusionMode::PairQa),
            other => Err(Error::Param(format!(
                "unknown fusion mode {other:?} (expected EF, LF or PairQA)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::EarlyFusion => "EF",
            FusionMode::LateFusion => "LF",
            FusionMode::PairQa => "PairQA",
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LanguageEncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Fixed sequence length l of every pair encoding.
    pub max_length: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl LanguageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide model dim {}",
                self.heads, self.d
            )));
        }
        if self.max_length < 4 {
            return Err(Error::Config("max_length must be >= 4".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must be >= 5".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Token/segment/learned-position embeddings, masked self-attention layers,
/// and the tanh pooler over position 0.
#[derive(Debug, Clone)]
pub struct LanguageEncoderParams<E: Element> {
    pub config: LanguageEncoderConfig,
    pub token_embedding: Tensor<E>,
    pub segment_embedding: Tensor<E>,
    pub position_embedding: Tensor<E>,
    pub layers: Vec<EncoderLayerParams<E>>,
    pub pooler: Tensor<E>,
    pub counters: PassCounters,
}

impl<E: Element> LanguageEncoderParams<E> {
    pub fn init(config: LanguageEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let layers = (0..config.layers)
            .map(|_| EncoderLayerParams::init(d, config.heads, config.d_ff, config.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        // Embedding tables start wider than the 1/sqrt(fan_in) projections:
        // there is no embedding layer norm, so this scale sets the first
        // layer's attention contrast, and a from-scratch toy run never
        // escapes uniform attention if it starts too small.
        let emb = 1.0;
        Ok(LanguageEncoderParams {
            token_embedding: Tensor::init_uniform(vec![config.vocab_size, d], emb, rng),
            segment_embedding: Tensor::init_uniform(vec![2, d], emb, rng),
            position_embedding: Tensor::init_uniform(vec![config.max_length, d], emb, rng),
            layers,
            pooler: Tensor::init_projection(vec![d, d], d, rng),
            counters: PassCounters::default(),
            config,
        })
    }

    /// Pooled [CLS] representation of a pair encoding, shape [d x 1].
    ///
    /// [PAD] positions are excluded from attention at every layer via the
    /// pair's mask, so their token ids cannot influence the result.
    pub fn encode_pair(&self, pair: &SentencePairEncoding, mode: &mut Mode) -> Result<Tensor<E>> {
        let l = self.config.max_length;
        if pair.len() != l {
            return Err(Error::Shape(format!(
                "encode_pair: pair length {} does not match configured {l}",
                pair.len()
            )));
        }
        let tok = Tensor::embedding_lookup(&self.token_embedding, &pair.ids)?;
        let seg_ids: Vec<usize> = pair.segments.iter().map(|s| *s as usize).collect();
        let seg = Tensor::embedding_lookup(&self.segment_embedding, &seg_ids)?;
        let pos_ids: Vec<usize> = (0..l).collect();
        let pos = Tensor::embedding_lookup(&self.position_embedding, &pos_ids)?;
        let mut x = tok.add(&seg)?.add(&pos)?;
        for layer in &self.layers {
            x = encoder_layer_forward(&x, None, Some(&pair.mask), layer, mode)?;
        }
        let cls = x.narrow(1, 0, 1)?;
        let pooled = self.pooler.matmul(&cls)?.tanh_op();
        self.counters
            .encoder_passes
            .set(self.counters.encoder_passes.get() + 1);
        Ok(pooled)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f("lang_encoder.token_embedding", &self.token_embedding);
        f("lang_encoder.segment_embedding", &self.segment_embedding);
        f("lang_encoder.position_embedding", &self.position_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("lang_encoder.layer{i}"), f);
        }
        f("lang_encoder.pooler", &self.pooler);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f("lang_encoder.token_embedding", &mut self.token_embedding);
        f("lang_encoder.segment_embedding", &mut self.segment_embedding);
        f("lang_encoder.position_embedding", &mut self.position_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("lang_encoder.layer{i}"), f);
        }
        f("lang_encoder.pooler", &mut self.pooler);
    }
}

/// Linear classification head over the pooled representation.
/// `weight` is [K x d] for the fused paths, [K x 2d] for late fusion.
#[derive(Debug, Clone)]
pub struct ClassifierHead<E: Element> {
    pub weight: Tensor<E>,
    pub dropout: f64,
}

impl<E: Element> ClassifierHead<E> {
    pub fn init(classes: usize, input_dim: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead {
            weight: Tensor::init_projection(vec![classes, input_dim], input_dim, rng),
            dropout,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f("classifier.weight", &self.weight);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f("classifier.weight", &mut self.weight);
    }
}

/// Class logits [K x 1]: weight . dropout(pooled).
pub fn classify_logits<E: Element>(
    pooled: &Tensor<E>,
    head: &ClassifierHead<E>,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let dropped = mode.apply_dropout(pooled, head.dropout)?;
    head.weight.matmul(&dropped)
}

/// Class probabilities [K x 1] (softmax over the logits).
pub fn classify<E: Element>(
    pooled: &Tensor<E>,
    head: &ClassifierHead<E>,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    classify_logits(pooled, head, mode)?.softmax(0)
}

/// Negative log-likelihood of `target` under class logits [K x 1].
pub fn class_nll<E: Element>(logits: &Tensor<E>, target: usize) -> Result<Tensor<E>> {
    let row = logits.transpose()?;
    Tensor::masked_cross_entropy(&row, &[target], &[true])
}

/// Pair encoding of the early-fusion path: sentence A is the tweet,
/// sentence B is target tokens + description tokens.
pub fn ef_encoding(
    sentence: &[usize],
    target: &[usize],
    caption: &[usize],
    l: usize,
) -> Result<SentencePairEncoding> {
    let aux = build_aux_sentence(target, caption)?;
    build_sentence_pair(sentence, &aux, l)
}

/// Early-fusion logits for one sample given an already-decoded caption.
pub fn ef_logits_from_caption<E: Element>(
    sample: &MultimodalSample<E>,
    caption: &[usize],
    encoder: &LanguageEncoderParams<E>,
    head: &ClassifierHead<E>,
    vocab: &Vocabulary,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let sentence = tokenize(&sample.sentence, vocab);
    let target = tokenize(&sample.target, vocab);
    let pair = ef_encoding(&sentence, &target, caption, encoder.config.max_length)?;
    let pooled = encoder.encode_pair(&pair, mode)?;
    classify_logits(&pooled, head, mode)
}

/// Full early-fusion path: translate the image, build the auxiliary
/// sentence, encode the pair, classify. Returns probabilities [K x 1].
pub fn ef_forward<E: Element>(
    sample: &MultimodalSample<E>,
    captioner: &CaptionerModel<E>,
    encoder: &LanguageEncoderParams<E>,
    head: &ClassifierHead<E>,
    vocab: &Vocabulary,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let caption = captioner.decode_caption(&sample.image)?;
    ef_logits_from_caption(sample, &caption, encoder, head, vocab, mode)?.softmax(0)
}

/// Late-fusion logits given an already-decoded caption: tweet and caption
/// are encoded separately (target as sentence B of each pair) and the
/// pooled vectors concatenated in front of a [K x 2d] head.
pub fn lf_logits_from_caption<E: Element>(
    sample: &MultimodalSample<E>,
    caption: &[usize],
    encoder: &LanguageEncoderParams<E>,
    head_lf: &ClassifierHead<E>,
    vocab: &Vocabulary,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let expected = 2 * encoder.config.d;
    if head_lf.weight.cols() != expected {
        return Err(Error::Shape(format!(
            "late-fusion head expects {expected} input features, has {}",
            head_lf.weight.cols()
        )));
    }
    let sentence = tokenize(&sample.sentence, vocab);
    let target = tokenize(&sample.target, vocab);
    let l = encoder.config.max_length;
    let h_text = encoder.encode_pair(&build_sentence_pair(&sentence, &target, l)?, mode)?;
    let h_caption = encoder.encode_pair(&build_sentence_pair(caption, &target, l)?, mode)?;
    let fused = Tensor::concat(0, &[h_text, h_caption])?;
    classify_logits(&fused, head_lf, mode)
}

/// Full late-fusion path; probabilities [K x 1].
pub fn lf_forward<E: Element>(
    sample: &MultimodalSample<E>,
    captioner: &CaptionerModel<E>,
    encoder: &LanguageEncoderParams<E>,
    head_lf: &ClassifierHead<E>,
    vocab: &Vocabulary,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let caption = captioner.decode_caption(&sample.image)?;
    lf_logits_from_caption(sample, &caption, encoder, head_lf, vocab, mode)?.softmax(0)
}

/// Argmax with ties broken toward the lowest label index.
pub fn decide_from_confidences(confidences: &[f64]) -> usize {
    let mut best = 0;
    for (i, c) in confidences.iter().enumerate().skip(1) {
        if *c > confidences[best] {
            best = i;
        }
    }
    best
}

/// Binary logits [2 x 1] for one label query: the auxiliary sentence is
/// "<label word> <target tokens>" and the image is never consulted.
pub fn pair_qa_query_logits<E: Element>(
    sample: &MultimodalSample<E>,
    label_word: &str,
    encoder: &LanguageEncoderParams<E>,
    binary_head: &ClassifierHead<E>,
    vocab: &Vocabulary,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    if binary_head.classes() != 2 {
        return Err(Error::Shape(format!(
            "pair-query head must be binary, has {} classes",
            binary_head.classes()
        )));
    }
    let sentence = tokenize(&sample.sentence, vocab);
    let target = tokenize(&sample.target, vocab);
    let mut aux = tokenize(label_word, vocab);
    aux.extend_from_slice(&target);
    let pair = build_sentence_pair(&sentence, &aux, encoder.config.max_length)?;
    let pooled = encoder.encode_pair(&pair, mode)?;
    classify_logits(&pooled, binary_head, mode)
}

/// K-way prediction by binary decomposition: one encoder pass per label
/// word, confidence = probability of the "match" class, prediction =
/// confidence argmax. `temperature` divides the binary logits before
/// softmax (1.0 = calibrated output as trained; < 1.0 sharpens).
pub fn pair_qa_predict_with_temperature<E: Element>(
    sample: &MultimodalSample<E>,
    encoder: &LanguageEncoderParams<E>,
    binary_head: &ClassifierHead<E>,
    vocab: &Vocabulary,
    label_words: &[String],
    temperature: f64,
) -> Result<(usize, Vec<f64>)> {
    if temperature <= 0.0 {
        return Err(Error::Param(format!("temperature must be > 0, got {temperature}")));
    }
    let mut confidences = Vec::with_capacity(label_words.len());
    for word in label_words {
        let logits = pair_qa_query_logits(sample, word, encoder, binary_head, vocab, &mut Mode::Eval)?;
        let sharpened = logits.scale(E::from_f64(1.0 / temperature));
        let probs = sharpened.softmax(0)?;
        confidences.push(probs.data()[1].as_f64());
    }
    Ok((decide_from_confidences(&confidences), confidences))
}

/// Prediction at the trained temperature.
pub fn pair_qa_predict<E: Element>(
    sample: &MultimodalSample<E>,
    encoder: &LanguageEncoderParams<E>,
    binary_head: &ClassifierHead<E>,
    vocab: &Vocabulary,
    label_words: &[String],
) -> Result<(usize, Vec<f64>)> {
    pair_qa_predict_with_temperature(sample, encoder, binary_head, vocab, label_words, 1.0)
}
