//! Non-autoregressive image captioner.
//!
//! One forward pass translates an image into a token sequence: a small
//! strided conv backbone produces an activation map, a 1x1 convolution
//! projects it to the model width, the flattened map runs through encoder
//! layers (2-d positional encoding), and a fixed prompt
//! `[CLS-id, 0, ..., 0]` runs through decoder layers cross-attending to
//! that memory. A 3-layer ReLU head scores every vocabulary token at every
//! prompt position simultaneously — no token-by-token loop.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    decoder_layer_forward, encoder_layer_forward, DecoderLayerParams, EncoderLayerParams, Mode,
    PositionalEncoding,
};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, Element, Tensor};
use crate::text::{TokenSequence, CLS_ID, PAD_ID};

/// 3 x H x W image with values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageTensor<E: Element> {
    data: Tensor<E>,
}

impl<E: Element> ImageTensor<E> {
    pub fn new(data: Tensor<E>) -> Result<Self> {
        data.check_rank(3, "image")?;
        if data.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got shape {:?}",
                data.shape()
            )));
        }
        if data.data().iter().any(|v| *v < E::zero() || *v > E::one()) {
            return Err(Error::Param("image values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor { data })
    }

    pub fn tensor(&self) -> &Tensor<E> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// One strided conv block: 3x3 kernel, stride 2, padding 1, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

/// Strided conv stack plus the 1x1 channel projection down to the model
/// width. Total stride is 2^(number of blocks).
#[derive(Debug, Clone)]
pub struct BackboneParams<E: Element> {
    pub blocks: Vec<ConvBlock<E>>,
    pub proj_weight: Tensor<E>,
    pub proj_bias: Tensor<E>,
}

impl<E: Element> BackboneParams<E> {
    /// `channels` lists the output channels of each strided block
    /// (input is always 3); the 1x1 projection maps the last entry to `d`.
    pub fn init(channels: &[usize], d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("backbone needs at least one conv block".into()));
        }
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = 3;
        for &c_out in channels {
            let fan_in = c_in * 9;
            blocks.push(ConvBlock {
                weight: Tensor::init_projection(vec![c_out, c_in, 3, 3], fan_in, rng),
                bias: Tensor::param(vec![c_out], vec![E::zero(); c_out])?,
            });
            c_in = c_out;
        }
        Ok(BackboneParams {
            blocks,
            proj_weight: Tensor::init_projection(vec![d, c_in, 1, 1], c_in, rng),
            proj_bias: Tensor::param(vec![d], vec![E::zero(); d])?,
        })
    }

    pub fn stride(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("{prefix}.block{i}.weight"), &b.weight);
            f(&format!("{prefix}.block{i}.bias"), &b.bias);
        }
        f(&format!("{prefix}.proj.weight"), &self.proj_weight);
        f(&format!("{prefix}.proj.bias"), &self.proj_bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("{prefix}.block{i}.weight"), &mut b.weight);
            f(&format!("{prefix}.block{i}.bias"), &mut b.bias);
        }
        f(&format!("{prefix}.proj.weight"), &mut self.proj_weight);
        f(&format!("{prefix}.proj.bias"), &mut self.proj_bias);
    }
}

/// Conv stack -> 1x1 projection -> flatten: [3 x H0 x W0] to [d x HW] with
/// H = H0 / stride, W = W0 / stride.
pub fn backbone_forward<E: Element>(image: &ImageTensor<E>, params: &BackboneParams<E>) -> Result<Tensor<E>> {
    let stride = params.stride();
    if image.height() % stride != 0 || image.width() % stride != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible by backbone stride {stride}",
            image.height(),
            image.width()
        )));
    }
    let mut x = image.tensor().clone();
    for block in &params.blocks {
        x = conv2d(&x, &block.weight, &block.bias, 2, 1)?.relu();
    }
    let x = conv2d(&x, &params.proj_weight, &params.proj_bias, 1, 0)?;
    let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.reshape(vec![d, h * w])
}

/// Decoder prompt: `[CLS-id, 0, 0, ...]` of length l. The zeros are the
/// [PAD] id; position 0 carries the start-of-sentence control code.
pub fn build_prompt(l: usize) -> Result<TokenSequence> {
    if l < 2 {
        return Err(Error::Param(format!("prompt length must be >= 2, got {l}")));
    }
    let mut prompt = vec![PAD_ID; l];
    prompt[0] = CLS_ID;
    Ok(prompt)
}

/// The 3-layer feed-forward vocabulary head of the caption decoder.
#[derive(Debug, Clone)]
pub struct CaptionHeadParams<E: Element> {
    pub w1: Tensor<E>,
    pub w2: Tensor<E>,
    pub w3: Tensor<E>,
}

impl<E: Element> CaptionHeadParams<E> {
    pub fn init(d: usize, d_hidden: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        CaptionHeadParams {
            w1: Tensor::init_projection(vec![d_hidden, d], d, rng),
            w2: Tensor::init_projection(vec![d_hidden, d_hidden], d_hidden, rng),
            w3: Tensor::init_projection(vec![vocab, d_hidden], d_hidden, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.w3"), &self.w3);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.w3"), &mut self.w3);
    }
}

/// Per-position vocabulary logits: W3 relu(W2 relu(W1 x)) over the decoder
/// output stream [d x l], returned as [l x V]. Softmax is applied only
/// inside the loss and at decode time.
pub fn caption_head<E: Element>(decoder_out: &Tensor<E>, head: &CaptionHeadParams<E>) -> Result<Tensor<E>> {
    let h1 = head.w1.matmul(decoder_out)?.relu();
    let h2 = head.w2.matmul(&h1)?.relu();
    head.w3.matmul(&h2)?.transpose()
}

/// Masked caption loss: sum over real-token positions of the negative
/// log-probability of the gold token. Position 0 (the control code) and
/// [PAD] positions are excluded, so the loss is invariant to their logits.
pub fn caption_loss<E: Element>(logits: &Tensor<E>, gold_padded: &[usize]) -> Result<Tensor<E>> {
    let l = logits.rows();
    if gold_padded.len() != l {
        return Err(Error::Shape(format!(
            "caption_loss: logits have {l} positions, gold has {}",
            gold_padded.len()
        )));
    }
    let mask: Vec<bool> = gold_padded
        .iter()
        .enumerate()
        .map(|(i, &t)| i > 0 && t != PAD_ID)
        .collect();
    Tensor::masked_cross_entropy(logits, gold_padded, &mask)
}

/// Pad a gold caption into the prompt frame: position 0 is the control
/// slot, tokens fill 1..=len, [PAD] fills the tail.
pub fn pad_gold_caption(caption: &[usize], l: usize) -> Result<Vec<usize>> {
    if caption.len() > l - 1 {
        return Err(Error::Contract(format!(
            "caption of {} tokens exceeds decoder budget {} (l - 1)",
            caption.len(),
            l - 1
        )));
    }
    let mut gold = vec![PAD_ID; l];
    gold[0] = CLS_ID;
    gold[1..=caption.len()].copy_from_slice(caption);
    Ok(gold)
}

/// Argmax decode over positions 1..l, lowest token id winning ties,
/// truncated at the first [PAD].
pub fn greedy_decode_from_logits<E: Element>(logits: &Tensor<E>) -> TokenSequence {
    let (l, v) = (logits.rows(), logits.cols());
    let mut out = Vec::new();
    for i in 1..l {
        let row = &logits.data()[i * v..(i + 1) * v];
        let mut best = 0;
        for (j, &x) in row.iter().enumerate().skip(1) {
            if x > row[best] {
                best = j;
            }
        }
        if best == PAD_ID {
            break;
        }
        out.push(best);
    }
    out
}

/// Forward-pass counters for the non-autoregressive contract checks.
#[derive(Debug, Clone, Default)]
pub struct PassCounters {
    pub encoder_passes: Cell<u64>,
    pub decoder_passes: Cell<u64>,
}

impl PassCounters {
    pub fn reset(&self) {
        self.encoder_passes.set(0);
        self.decoder_passes.set(0);
    }
}

/// Captioner hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CaptionerConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of each strided conv block (input is 3).
    pub backbone_channels: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Decoder length l: one control position plus up to l-1 tokens.
    pub caption_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = 1usize << self.backbone_channels.len();
        if self.backbone_channels.is_empty() {
            return Err(Error::Config("backbone_channels must be non-empty".into()));
        }
        if self.image_height % stride != 0 || self.image_width % stride != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by backbone stride {stride}",
                self.image_height, self.image_width
            )));
        }
        if self.d % 4 != 0 {
            return Err(Error::Config(format!("model dim {} must be divisible by 4", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide model dim {}",
                self.heads, self.d
            )));
        }
        if self.caption_len < 2 {
            return Err(Error::Config("caption_len must be >= 2".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must be >= 5".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn memory_len(&self) -> usize {
        let stride = 1usize << self.backbone_channels.len();
        (self.image_height / stride) * (self.image_width / stride)
    }
}

/// The full captioner: backbone, prompt embedding, encoder/decoder stacks,
/// vocabulary head, and fixed positional tables.
#[derive(Debug, Clone)]
pub struct CaptionerModel<E: Element> {
    pub config: CaptionerConfig,
    pub backbone: BackboneParams<E>,
    pub embedding: Tensor<E>,
    pub encoder: Vec<EncoderLayerParams<E>>,
    pub decoder: Vec<DecoderLayerParams<E>>,
    pub head: CaptionHeadParams<E>,
    p_mem: PositionalEncoding<E>,
    p_dec: PositionalEncoding<E>,
    pub counters: PassCounters,
}

impl<E: Element> CaptionerModel<E> {
    pub fn init(config: CaptionerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let stride = 1usize << config.backbone_channels.len();
        let (h, w) = (config.image_height / stride, config.image_width / stride);
        let backbone = BackboneParams::init(&config.backbone_channels, d, rng)?;
        let embedding = Tensor::init_projection(vec![config.vocab_size, d], d, rng);
        let encoder = (0..config.enc_layers)
            .map(|_| EncoderLayerParams::init(d, config.heads, config.d_ff, config.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.dec_layers)
            .map(|_| DecoderLayerParams::init(d, config.heads, config.d_ff, config.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = CaptionHeadParams::init(d, d, config.vocab_size, rng);
        Ok(CaptionerModel {
            backbone,
            embedding,
            encoder,
            decoder,
            head,
            p_mem: PositionalEncoding::sinusoidal_2d(d, h, w)?,
            p_dec: PositionalEncoding::sinusoidal_1d(d, config.caption_len)?,
            counters: PassCounters::default(),
            config,
        })
    }

    /// Backbone plus the whole encoder stack; one "encoder pass".
    pub fn encode_image(&self, image: &ImageTensor<E>, mode: &mut Mode) -> Result<Tensor<E>> {
        let mut memory = backbone_forward(image, &self.backbone)?;
        for layer in &self.encoder {
            memory = encoder_layer_forward(&memory, Some(&self.p_mem), None, layer, mode)?;
        }
        self.counters.encoder_passes.set(self.counters.encoder_passes.get() + 1);
        Ok(memory)
    }

    /// Embed the fixed prompt and run the whole decoder stack over the
    /// encoder memory; one "decoder pass".
    pub fn decode_states(&self, memory: &Tensor<E>, mode: &mut Mode) -> Result<Tensor<E>> {
        let prompt = build_prompt(self.config.caption_len)?;
        let mut x = Tensor::embedding_lookup(&self.embedding, &prompt)?;
        for layer in &self.decoder {
            x = decoder_layer_forward(&x, memory, Some(&self.p_dec), Some(&self.p_mem), layer, mode)?;
        }
        self.counters.decoder_passes.set(self.counters.decoder_passes.get() + 1);
        Ok(x)
    }

    /// Per-position vocabulary logits [l x V] for an image.
    pub fn forward_logits(&self, image: &ImageTensor<E>, mode: &mut Mode) -> Result<Tensor<E>> {
        let memory = self.encode_image(image, mode)?;
        let states = self.decode_states(&memory, mode)?;
        caption_head(&states, &self.head)
    }

    /// Translate an image into a token sequence: a single deterministic
    /// forward pass (eval mode, no recording), argmax per position,
    /// truncated at the first [PAD].
    pub fn decode_caption(&self, image: &ImageTensor<E>) -> Result<TokenSequence> {
        crate::tensor::no_grad(|| {
            let logits = self.forward_logits(image, &mut Mode::Eval)?;
            Ok(greedy_decode_from_logits(&logits))
        })
    }

    /// Caption loss for one (image, caption) pair.
    pub fn loss(&self, image: &ImageTensor<E>, caption: &[usize], mode: &mut Mode) -> Result<Tensor<E>> {
        let logits = self.forward_logits(image, mode)?;
        let gold = pad_gold_caption(caption, self.config.caption_len)?;
        caption_loss(&logits, &gold)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.backbone.visit("backbone", f);
        f("captioner.embedding", &self.embedding);
        for (i, layer) in self.encoder.iter().enumerate() {
            layer.visit(&format!("captioner.enc{i}"), f);
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            layer.visit(&format!("captioner.dec{i}"), f);
        }
        self.head.visit("caption_head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.backbone.visit_mut("backbone", f);
        f("captioner.embedding", &mut self.embedding);
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            layer.visit_mut(&format!("captioner.enc{i}"), f);
        }
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            layer.visit_mut(&format!("captioner.dec{i}"), f);
        }
        self.head.visit_mut("caption_head", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_config() -> CaptionerConfig {
        CaptionerConfig {
            image_height: 16,
            image_width: 16,
            backbone_channels: vec![16, 32, 16],
            d: 16,
            heads: 2,
            d_ff: 32,
            enc_layers: 1,
            dec_layers: 1,
            caption_len: 5,
            vocab_size: 12,
            dropout: 0.0,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor<f64> {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..3 * h * w).map(|_| rand::Rng::gen::<f64>(&mut r)).collect();
        ImageTensor::new(Tensor::from_vec(vec![3, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn image_tensor_validates_range_and_channels() {
        assert!(ImageTensor::new(Tensor::<f64>::zeros(vec![3, 4, 4])).is_ok());
        assert!(ImageTensor::new(Tensor::<f64>::zeros(vec![1, 4, 4])).is_err());
        assert!(ImageTensor::new(Tensor::<f64>::full(vec![3, 2, 2], 1.5)).is_err());
    }

    #[test]
    fn backbone_memory_shape_at_toy_scale() {
        // stride 8 over 3x16x16 with d=16 -> memory [16, 4]
        let mut r = rng(1);
        let params = BackboneParams::<f64>::init(&[16, 32, 16], 16, &mut r).unwrap();
        let img = random_image(16, 16, 2);
        let mem = backbone_forward(&img, &params).unwrap();
        assert_eq!(mem.shape(), &[16, 4]);
    }

    #[test]
    fn backbone_rejects_indivisible_image() {
        let mut r = rng(1);
        let params = BackboneParams::<f64>::init(&[4, 4, 4], 8, &mut r).unwrap();
        let img = ImageTensor::new(Tensor::<f64>::zeros(vec![3, 12, 12])).unwrap();
        assert!(backbone_forward(&img, &params).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_memory() {
        let mut r = rng(3);
        let params = BackboneParams::<f64>::init(&[4, 4], 8, &mut r).unwrap();
        // biases are zero-initialized already
        let img = ImageTensor::new(Tensor::<f64>::zeros(vec![3, 8, 8])).unwrap();
        let mem = backbone_forward(&img, &params).unwrap();
        assert!(mem.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prompt_layout() {
        assert_eq!(build_prompt(4).unwrap(), vec![CLS_ID, 0, 0, 0]);
        assert_eq!(build_prompt(2).unwrap(), vec![CLS_ID, 0]);
        assert!(build_prompt(1).is_err());
    }

    #[test]
    fn caption_head_zero_weights_give_uniform_distribution() {
        let head = CaptionHeadParams {
            w1: Tensor::<f64>::zeros(vec![4, 4]),
            w2: Tensor::<f64>::zeros(vec![4, 4]),
            w3: Tensor::<f64>::zeros(vec![8, 4]),
        };
        let states = Tensor::from_vec(vec![4, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let logits = caption_head(&states, &head).unwrap();
        let probs = logits.softmax(1).unwrap();
        assert!(probs.data().iter().all(|p| (p - 0.125).abs() < 1e-12));
    }

    #[test]
    fn caption_head_shape_and_brute_force() {
        let mut r = rng(4);
        let head = CaptionHeadParams::<f64>::init(6, 6, 32, &mut r);
        let states = Tensor::uniform(vec![6, 8], 1.0, &mut r);
        let logits = caption_head(&states, &head).unwrap();
        assert_eq!(logits.shape(), &[8, 32]);

        // explicit three-matrix chain for one position
        let pos = 5;
        let x: Vec<f64> = (0..6).map(|c| states.data()[c * 8 + pos]).collect();
        let lin = |w: &Tensor<f64>, x: &[f64], rows: usize, cols: usize, relu: bool| -> Vec<f64> {
            (0..rows)
                .map(|i| {
                    let s: f64 = (0..cols).map(|j| w.data()[i * cols + j] * x[j]).sum();
                    if relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        };
        let h1 = lin(&head.w1, &x, 6, 6, true);
        let h2 = lin(&head.w2, &h1, 6, 6, true);
        let out = lin(&head.w3, &h2, 32, 6, false);
        for (j, expect) in out.iter().enumerate() {
            assert!((logits.data()[pos * 32 + j] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn caption_loss_all_pad_gold_is_zero() {
        let logits = Tensor::<f64>::from_vec(vec![4, 8], (0..32).map(|v| v as f64 / 7.0).collect()).unwrap();
        let gold = pad_gold_caption(&[], 4).unwrap();
        let loss = caption_loss(&logits, &gold).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn caption_loss_uniform_logits_closed_form() {
        // 3 real tokens, V=8, uniform logits -> 3 ln 8
        let logits = Tensor::<f64>::zeros(vec![5, 8]);
        let gold = pad_gold_caption(&[4, 5, 6], 5).unwrap();
        let loss = caption_loss(&logits, &gold).unwrap();
        assert!((loss.item() - 3.0 * 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn caption_loss_ignores_pad_position_logits() {
        let mut base = vec![0.1; 5 * 8];
        let gold = pad_gold_caption(&[4, 5], 5).unwrap();
        let logits_a = Tensor::<f64>::from_vec(vec![5, 8], base.clone()).unwrap();
        // perturb the control position and the two pad positions
        for row in [0usize, 3, 4] {
            for j in 0..8 {
                base[row * 8 + j] = 17.0 - j as f64;
            }
        }
        let logits_b = Tensor::<f64>::from_vec(vec![5, 8], base).unwrap();
        let a = caption_loss(&logits_a, &gold).unwrap().item();
        let b = caption_loss(&logits_b, &gold).unwrap().item();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_decode_truncates_at_first_pad() {
        // positions: 1 -> token 5, 2 -> PAD, 3 -> token 6 (ignored)
        let v = 8;
        let mut data = vec![0.0; 4 * v];
        data[v + 5] = 5.0;
        data[2 * v + PAD_ID] = 5.0;
        data[3 * v + 6] = 5.0;
        let logits = Tensor::<f64>::from_vec(vec![4, v], data).unwrap();
        assert_eq!(greedy_decode_from_logits(&logits), vec![5]);
    }

    #[test]
    fn greedy_decode_breaks_ties_toward_lowest_id() {
        let logits = Tensor::<f64>::from_vec(vec![2, 4], vec![0.0; 8]).unwrap();
        // all-equal logits: position 1 picks token 0 = PAD -> empty caption
        assert_eq!(greedy_decode_from_logits(&logits), Vec::<usize>::new());
        let logits = Tensor::<f64>::from_vec(vec![2, 4], vec![0., 0., 0., 0., 0., 3., 3., 0.]).unwrap();
        assert_eq!(greedy_decode_from_logits(&logits), vec![1]);
    }

    #[test]
    fn decode_caption_is_deterministic_and_single_pass() {
        let mut r = rng(6);
        let model = CaptionerModel::<f64>::init(toy_config(), &mut r).unwrap();
        let img = random_image(16, 16, 7);
        model.counters.reset();
        let a = model.decode_caption(&img).unwrap();
        assert_eq!(model.counters.encoder_passes.get(), 1);
        assert_eq!(model.counters.decoder_passes.get(), 1);
        let b = model.decode_caption(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.counters.encoder_passes.get(), 2);
    }

    #[test]
    fn prompt_is_image_independent() {
        // the decoder input depends only on l; two images share the prompt
        let p1 = build_prompt(6).unwrap();
        let p2 = build_prompt(6).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn caption_loss_gradient_check_end_to_end() {
        // every weight of a miniature captioner, image held constant
        let config = CaptionerConfig {
            image_height: 4,
            image_width: 4,
            backbone_channels: vec![4],
            d: 8,
            heads: 2,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            caption_len: 4,
            vocab_size: 8,
            dropout: 0.0,
        };
        let mut r = rng(8);
        let model = CaptionerModel::<f64>::init(config, &mut r).unwrap();
        let img = random_image(4, 4, 9);
        let caption = vec![5, 6];

        let mut params = Vec::new();
        model.visit(&mut |_, t| params.push(t.clone()));
        let report = grad_check(
            |ps| {
                let mut probe = model.clone();
                let mut it = ps.iter();
                probe.visit_mut(&mut |_, t| *t = it.next().unwrap().clone());
                probe.loss(&img, &caption, &mut Mode::Eval)
            },
            &params,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }
}
