//! Encoder-decoder transformer with one encoder stack shared by the image and
//! text passes.
//!
//! The image grid and the text query are encoded by two independent passes
//! over the *same* encoder parameters, so each modality can stop at its own
//! depth. The decoder runs self-attention, cross-attention over the
//! concatenated encoder outputs, and a feed-forward block per layer. All blocks
//! are pre-norm with residual connections, and positions enter only through
//! bucketed relative biases (1D for text and decoder, 2D for the image grid).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::numerics::{self, seeded_normal, SeededRng, Tensor2D, LAYER_NORM_EPS};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;

/// Additive mask for future positions. Large enough that `exp` underflows
/// to exactly zero, small enough that every entry stays finite.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub grid_side: usize,
    pub max_text_len: usize,
    pub max_gen_len: usize,
    pub rel_bucket_count: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_enc_layers: 6,
            n_dec_layers: 6,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            grid_side: 4,
            max_text_len: 8,
            max_gen_len: 16,
            rel_bucket_count: 9,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("grid_side", self.grid_side),
            ("max_text_len", self.max_text_len),
            ("max_gen_len", self.max_gen_len),
            ("rel_bucket_count", self.rel_bucket_count),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Contract(format!("model.{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= PAD {
            return Err(Error::Contract(format!(
                "vocab_size {} leaves no room for the reserved BOS/EOS/PAD ids",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn image_tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub norm1: Norm<T>,
    pub self_attn: Attention<T>,
    pub norm2: Norm<T>,
    pub cross_attn: Attention<T>,
    pub norm3: Norm<T>,
    pub ffn: FeedForward<T>,
}

/// Every trainable tensor of the model, generic over the slot type so the same
/// layout carries parameters, gradients, optimizer moments, and tape variables.
///
/// There is exactly one `encoder` stack. Both modality passes read it.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub token_embedding: T,
    pub patch_weight: T,
    pub patch_bias: T,
    pub text_rel_bias: T,
    pub image_row_bias: T,
    pub image_col_bias: T,
    pub decoder_rel_bias: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub encoder_norm: Norm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub decoder_norm: Norm<T>,
    /// Present only when embeddings are untied.
    pub output_head: Option<T>,
}

pub type ModelParams = Weights<Tensor2D>;

type Visitor<'f, 's, T, U> = dyn FnMut(&str, &'s T) -> U + 'f;
type VisitorMut<'f, T> = dyn FnMut(&str, &mut T) + 'f;

impl<T> Norm<T> {
    fn map<'s, U>(&'s self, p: &str, f: &mut Visitor<'_, 's, T, U>) -> Norm<U> {
        Norm {
            gain: f(&format!("{p}.gain"), &self.gain),
            bias: f(&format!("{p}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{p}.gain"), &mut self.gain);
        f(&format!("{p}.bias"), &mut self.bias);
    }
}

impl<T> Attention<T> {
    fn map<'s, U>(&'s self, p: &str, f: &mut Visitor<'_, 's, T, U>) -> Attention<U> {
        Attention {
            wq: f(&format!("{p}.wq"), &self.wq),
            wk: f(&format!("{p}.wk"), &self.wk),
            wv: f(&format!("{p}.wv"), &self.wv),
            wo: f(&format!("{p}.wo"), &self.wo),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{p}.wq"), &mut self.wq);
        f(&format!("{p}.wk"), &mut self.wk);
        f(&format!("{p}.wv"), &mut self.wv);
        f(&format!("{p}.wo"), &mut self.wo);
    }
}

impl<T> FeedForward<T> {
    fn map<'s, U>(&'s self, p: &str, f: &mut Visitor<'_, 's, T, U>) -> FeedForward<U> {
        FeedForward {
            w1: f(&format!("{p}.w1"), &self.w1),
            b1: f(&format!("{p}.b1"), &self.b1),
            w2: f(&format!("{p}.w2"), &self.w2),
            b2: f(&format!("{p}.b2"), &self.b2),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{p}.w1"), &mut self.w1);
        f(&format!("{p}.b1"), &mut self.b1);
        f(&format!("{p}.w2"), &mut self.w2);
        f(&format!("{p}.b2"), &mut self.b2);
    }
}

impl<T> Weights<T> {
    /// Builds a parallel structure by visiting every slot in canonical order.
    /// The names passed to `f` are the checkpoint tensor names.
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> Weights<U> {
        let f: &mut Visitor<'_, 's, T, U> = &mut f;
        Weights {
            token_embedding: f("token_embedding", &self.token_embedding),
            patch_weight: f("patch.weight", &self.patch_weight),
            patch_bias: f("patch.bias", &self.patch_bias),
            text_rel_bias: f("rel_bias.text", &self.text_rel_bias),
            image_row_bias: f("rel_bias.image_row", &self.image_row_bias),
            image_col_bias: f("rel_bias.image_col", &self.image_col_bias),
            decoder_rel_bias: f("rel_bias.decoder", &self.decoder_rel_bias),
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let p = format!("encoder.{i}");
                    EncoderLayer {
                        norm1: l.norm1.map(&format!("{p}.norm1"), f),
                        attn: l.attn.map(&format!("{p}.attn"), f),
                        norm2: l.norm2.map(&format!("{p}.norm2"), f),
                        ffn: l.ffn.map(&format!("{p}.ffn"), f),
                    }
                })
                .collect(),
            encoder_norm: self.encoder_norm.map("encoder.final_norm", f),
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let p = format!("decoder.{i}");
                    DecoderLayer {
                        norm1: l.norm1.map(&format!("{p}.norm1"), f),
                        self_attn: l.self_attn.map(&format!("{p}.self_attn"), f),
                        norm2: l.norm2.map(&format!("{p}.norm2"), f),
                        cross_attn: l.cross_attn.map(&format!("{p}.cross_attn"), f),
                        norm3: l.norm3.map(&format!("{p}.norm3"), f),
                        ffn: l.ffn.map(&format!("{p}.ffn"), f),
                    }
                })
                .collect(),
            decoder_norm: self.decoder_norm.map("decoder.final_norm", f),
            output_head: self.output_head.as_ref().map(|h| f("output_head", h)),
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        let f: &mut VisitorMut<'_, T> = &mut f;
        f("token_embedding", &mut self.token_embedding);
        f("patch.weight", &mut self.patch_weight);
        f("patch.bias", &mut self.patch_bias);
        f("rel_bias.text", &mut self.text_rel_bias);
        f("rel_bias.image_row", &mut self.image_row_bias);
        f("rel_bias.image_col", &mut self.image_col_bias);
        f("rel_bias.decoder", &mut self.decoder_rel_bias);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            l.norm1.visit_mut(&format!("{p}.norm1"), f);
            l.attn.visit_mut(&format!("{p}.attn"), f);
            l.norm2.visit_mut(&format!("{p}.norm2"), f);
            l.ffn.visit_mut(&format!("{p}.ffn"), f);
        }
        self.encoder_norm.visit_mut("encoder.final_norm", f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            l.norm1.visit_mut(&format!("{p}.norm1"), f);
            l.self_attn.visit_mut(&format!("{p}.self_attn"), f);
            l.norm2.visit_mut(&format!("{p}.norm2"), f);
            l.cross_attn.visit_mut(&format!("{p}.cross_attn"), f);
            l.norm3.visit_mut(&format!("{p}.norm3"), f);
            l.ffn.visit_mut(&format!("{p}.ffn"), f);
        }
        self.decoder_norm.visit_mut("decoder.final_norm", f);
        if let Some(h) = self.output_head.as_mut() {
            f("output_head", h);
        }
    }

    /// Slots in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        let mut push = |name: &str, _: &T| out.push(name.to_string());
        self.map(&mut push);
        let refs = self.refs();
        out.into_iter().zip(refs).collect()
    }

    /// Slots in canonical order.
    pub fn refs(&self) -> Vec<&T> {
        let mut out: Vec<&T> = vec![
            &self.token_embedding,
            &self.patch_weight,
            &self.patch_bias,
            &self.text_rel_bias,
            &self.image_row_bias,
            &self.image_col_bias,
            &self.decoder_rel_bias,
        ];
        for l in &self.encoder {
            out.extend([&l.norm1.gain, &l.norm1.bias]);
            out.extend([&l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.wo]);
            out.extend([&l.norm2.gain, &l.norm2.bias]);
            out.extend([&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2]);
        }
        out.extend([&self.encoder_norm.gain, &self.encoder_norm.bias]);
        for l in &self.decoder {
            out.extend([&l.norm1.gain, &l.norm1.bias]);
            let a = &l.self_attn;
            out.extend([&a.wq, &a.wk, &a.wv, &a.wo]);
            out.extend([&l.norm2.gain, &l.norm2.bias]);
            let a = &l.cross_attn;
            out.extend([&a.wq, &a.wk, &a.wv, &a.wo]);
            out.extend([&l.norm3.gain, &l.norm3.bias]);
            out.extend([&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2]);
        }
        out.extend([&self.decoder_norm.gain, &self.decoder_norm.bias]);
        out.extend(self.output_head.as_ref());
        out
    }

    /// Applies `f` to each slot of `self` paired with the same slot of `other`.
    pub fn zip_mut<U>(&mut self, other: &Weights<U>, mut f: impl FnMut(&mut T, &U)) {
        let others = other.refs();
        let mut i = 0;
        self.visit_mut(|_, t| {
            f(t, others[i]);
            i += 1;
        });
    }
}

impl ModelParams {
    /// Random initialization. Output projections of residual branches are
    /// scaled down by depth; relative biases start at zero.
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std_d = 1.0 / (d as f64).sqrt();
        let std_ff = 1.0 / (cfg.d_ff as f64).sqrt();
        let depth = ((2 * (cfg.n_enc_layers + cfg.n_dec_layers)) as f64).sqrt();
        let buckets = cfg.rel_bucket_count;
        let norm = || Norm {
            gain: Tensor2D::filled(1, d, 1.0),
            bias: Tensor2D::zeros(1, d),
        };
        let attn = |rng: &mut SeededRng| Attention {
            wq: seeded_normal(rng, d, d, std_d),
            wk: seeded_normal(rng, d, d, std_d),
            wv: seeded_normal(rng, d, d, std_d),
            wo: seeded_normal(rng, d, d, std_d / depth),
        };
        let ffn = |rng: &mut SeededRng| FeedForward {
            w1: seeded_normal(rng, d, cfg.d_ff, std_d),
            b1: Tensor2D::zeros(1, cfg.d_ff),
            w2: seeded_normal(rng, cfg.d_ff, d, std_ff / depth),
            b2: Tensor2D::zeros(1, d),
        };
        let token_embedding = seeded_normal(rng, cfg.vocab_size, d, std_d);
        let patch_weight = seeded_normal(rng, d, d, std_d);
        let encoder = (0..cfg.n_enc_layers)
            .map(|_| EncoderLayer {
                norm1: norm(),
                attn: attn(rng),
                norm2: norm(),
                ffn: ffn(rng),
            })
            .collect();
        let decoder = (0..cfg.n_dec_layers)
            .map(|_| DecoderLayer {
                norm1: norm(),
                self_attn: attn(rng),
                norm2: norm(),
                cross_attn: attn(rng),
                norm3: norm(),
                ffn: ffn(rng),
            })
            .collect();
        let output_head = (!cfg.tie_embeddings).then(|| seeded_normal(rng, cfg.vocab_size, d, std_d));
        Ok(Weights {
            token_embedding,
            patch_weight,
            patch_bias: Tensor2D::zeros(1, d),
            text_rel_bias: Tensor2D::zeros(1, buckets),
            image_row_bias: Tensor2D::zeros(1, buckets),
            image_col_bias: Tensor2D::zeros(1, buckets),
            decoder_rel_bias: Tensor2D::zeros(1, buckets),
            encoder,
            encoder_norm: norm(),
            decoder,
            decoder_norm: norm(),
            output_head,
        })
    }

    /// Same layout with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor2D::zeros(t.rows(), t.cols()))
    }

    pub fn is_finite(&self) -> bool {
        self.refs().iter().all(|t| t.is_finite())
    }

    pub fn scalar_count(&self) -> usize {
        self.refs().iter().map(|t| t.len()).sum()
    }

    /// Matrix that maps normalized decoder states to vocabulary logits.
    pub fn head(&self) -> &Tensor2D {
        self.output_head.as_ref().unwrap_or(&self.token_embedding)
    }

    /// Checks that every tensor has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(cfg, &mut SeededRng::new(0))?;
        let mine = self.named();
        let theirs = reference.named();
        if mine.len() != theirs.len() {
            return Err(Error::Contract(format!(
                "parameter count {} differs from config's {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((name, t), (ref_name, r)) in mine.iter().zip(&theirs) {
            if name != ref_name || t.shape() != r.shape() {
                return Err(Error::Shape {
                    op: "check_shapes",
                    left: t.shape(),
                    right: r.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Which stream a hidden state belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
    Decoder,
}

/// Hidden states of one stream after `layer` blocks; layer 0 is the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub tensor: Tensor2D,
    pub modality: Modality,
    pub layer: usize,
}

/// Configuration and parameters together; shared read-only during inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, &mut SeededRng::new(seed))?;
        Ok(Self { config, params })
    }

    pub fn embed_text(&self, tokens: &[usize]) -> Result<HiddenState> {
        if tokens.len() > self.config.max_text_len {
            return Err(Error::Length {
                what: "text",
                len: tokens.len(),
                max: self.config.max_text_len,
            });
        }
        Ok(HiddenState {
            tensor: embed_text(&mut Eval, &self.params, tokens)?,
            modality: Modality::Text,
            layer: 0,
        })
    }

    pub fn embed_image(&self, grid: &[usize]) -> Result<HiddenState> {
        let n = self.config.image_tokens();
        if grid.len() != n {
            return Err(Error::Shape {
                op: "embed_image",
                left: (grid.len(), 1),
                right: (n, 1),
            });
        }
        Ok(HiddenState {
            tensor: embed_image(&mut Eval, &self.params, grid)?,
            modality: Modality::Image,
            layer: 0,
        })
    }

    /// Bias matrix for a state of the given modality and token count.
    pub fn encoder_bias(&self, modality: Modality, tokens: usize) -> Result<Tensor2D> {
        match modality {
            Modality::Image => {
                if tokens != self.config.image_tokens() {
                    return Err(Error::Shape {
                        op: "encoder_bias",
                        left: (tokens, tokens),
                        right: (self.config.image_tokens(), self.config.image_tokens()),
                    });
                }
                relative_bias_2d(
                    self.config.grid_side,
                    &self.params.image_row_bias,
                    &self.params.image_col_bias,
                )
            }
            Modality::Text => Ok(relative_bias_1d(tokens, &self.params.text_rel_bias)),
            Modality::Decoder => Err(Error::Contract("decoder states use causal decoder bias".into())),
        }
    }

    /// One encoder block. `layer_index` is 1-based and must equal
    /// `state.layer + 1`.
    pub fn encoder_layer_forward(&self, state: &HiddenState, layer_index: usize, bias: &Tensor2D) -> Result<HiddenState> {
        if state.modality == Modality::Decoder {
            return Err(Error::Contract("encoder layer applied to a decoder state".into()));
        }
        if layer_index == 0 || layer_index > self.config.n_enc_layers || layer_index != state.layer + 1 {
            return Err(Error::Contract(format!(
                "encoder layer {layer_index} cannot follow layer {} (stack depth {})",
                state.layer, self.config.n_enc_layers
            )));
        }
        let n = state.tensor.rows();
        if bias.shape() != (n, n) {
            return Err(Error::Shape {
                op: "encoder_layer_forward",
                left: (n, n),
                right: bias.shape(),
            });
        }
        let w = &self.params.encoder[layer_index - 1];
        let tensor = encoder_layer(&mut Eval, w, &state.tensor, bias, self.config.n_heads)?;
        Ok(HiddenState {
            tensor,
            modality: state.modality,
            layer: layer_index,
        })
    }

    /// One decoder block for the newest position. Appends that position's
    /// self-attention key/value to `caches` at this layer.
    pub fn decoder_layer_forward(
        &self,
        state: &HiddenState,
        layer_index: usize,
        caches: &mut DecoderCaches,
    ) -> Result<HiddenState> {
        if state.modality != Modality::Decoder || state.tensor.rows() != 1 {
            return Err(Error::Contract("decoder step expects one decoder row".into()));
        }
        if layer_index == 0 || layer_index > self.config.n_dec_layers || layer_index != state.layer + 1 {
            return Err(Error::Contract(format!(
                "decoder layer {layer_index} cannot follow layer {}",
                state.layer
            )));
        }
        let w = &self.params.decoder[layer_index - 1];
        let cache = caches
            .layers
            .get_mut(layer_index - 1)
            .ok_or_else(|| Error::State(format!("no cache for decoder layer {layer_index}")))?;
        if cache.cross_k.rows() == 0 {
            return Err(Error::State("cross-attention cache is empty".into()));
        }
        let position = cache.self_k.rows();
        let a = numerics::layer_norm(&state.tensor, &w.norm1.gain, &w.norm1.bias, LAYER_NORM_EPS)?;
        cache.self_k.push_row(numerics::matmul(&a, &w.self_attn.wk)?.row(0))?;
        cache.self_v.push_row(numerics::matmul(&a, &w.self_attn.wv)?.row(0))?;
        let q = numerics::matmul(&a, &w.self_attn.wq)?;
        let bias = causal_bias_row(position, &self.params.decoder_rel_bias);
        let mut g = Eval;
        let heads = attend(&mut g, &q, &cache.self_k, &cache.self_v, Some(&bias), self.config.n_heads)?;
        let h1 = state.tensor.add(&numerics::matmul(&heads, &w.self_attn.wo)?)?;

        let b = numerics::layer_norm(&h1, &w.norm2.gain, &w.norm2.bias, LAYER_NORM_EPS)?;
        let q = numerics::matmul(&b, &w.cross_attn.wq)?;
        let heads = attend(&mut g, &q, &cache.cross_k, &cache.cross_v, None, self.config.n_heads)?;
        let h2 = h1.add(&numerics::matmul(&heads, &w.cross_attn.wo)?)?;

        let c = numerics::layer_norm(&h2, &w.norm3.gain, &w.norm3.bias, LAYER_NORM_EPS)?;
        let out = h2.add(&feed_forward(&mut g, &w.ffn, &c)?)?;
        Ok(HiddenState {
            tensor: out,
            modality: Modality::Decoder,
            layer: layer_index,
        })
    }

    /// Vocabulary logits for decoder states: `state × headᵀ`. With tied
    /// embeddings the head is the token embedding table.
    pub fn output_head(&self, state: &HiddenState) -> Result<Tensor2D> {
        if state.modality != Modality::Decoder {
            return Err(Error::Contract("output head applied to an encoder state".into()));
        }
        numerics::matmul_t(&state.tensor, self.params.head())
    }

    /// Final decoder norm followed by the output head; what every exit reads.
    pub fn decoder_logits(&self, state: &HiddenState) -> Result<Tensor2D> {
        if state.modality != Modality::Decoder {
            return Err(Error::Contract("output head applied to an encoder state".into()));
        }
        decoder_logits(&mut Eval, &self.params, &state.tensor)
    }

    pub fn embed_decoder_token(&self, token: usize) -> Result<HiddenState> {
        Ok(HiddenState {
            tensor: embed_text(&mut Eval, &self.params, &[token])?,
            modality: Modality::Decoder,
            layer: 0,
        })
    }
}

/// Bucket for a signed relative offset. Offset 0 maps to bucket 0, positive
/// offsets to `1..=r`, negative offsets to `r+1..=2r`, clipping at distance
/// `r = (buckets - 1) / 2`.
pub fn relative_bucket(offset: isize, buckets: usize) -> usize {
    let reach = ((buckets.max(1) - 1) / 2) as isize;
    let clipped = offset.clamp(-reach, reach);
    match clipped {
        0 => 0,
        c if c > 0 => c as usize,
        c => (reach - c) as usize,
    }
}

fn bias_index_1d(len: usize, buckets: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            idx.push(relative_bucket(j as isize - i as isize, buckets));
        }
    }
    idx
}

fn bias_index_2d(side: usize, buckets: usize) -> (Vec<usize>, Vec<usize>) {
    let n = side * side;
    let mut rows = Vec::with_capacity(n * n);
    let mut cols = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (ri, ci) = ((i / side) as isize, (i % side) as isize);
            let (rj, cj) = ((j / side) as isize, (j % side) as isize);
            rows.push(relative_bucket(rj - ri, buckets));
            cols.push(relative_bucket(cj - ci, buckets));
        }
    }
    (rows, cols)
}

/// `len × len` bias with `out[i][j] = table[bucket(j - i)]`.
pub fn relative_bias_1d(len: usize, table: &Tensor2D) -> Tensor2D {
    let idx = bias_index_1d(len, table.cols());
    Tensor2D::from_vec(len, len, idx.iter().map(|&k| table.data()[k]).collect()).expect("square index")
}

/// Bias over a `side × side` grid in row-major cell order: the row-offset
/// bucket and the column-offset bucket are looked up separately and summed.
pub fn relative_bias_2d(side: usize, row_table: &Tensor2D, col_table: &Tensor2D) -> Result<Tensor2D> {
    if row_table.shape() != col_table.shape() || row_table.rows() != 1 {
        return Err(Error::Shape {
            op: "relative_bias_2d",
            left: row_table.shape(),
            right: col_table.shape(),
        });
    }
    let (ri, ci) = bias_index_2d(side, row_table.cols());
    let n = side * side;
    let data = ri
        .iter()
        .zip(&ci)
        .map(|(&r, &c)| row_table.data()[r] + col_table.data()[c])
        .collect();
    Tensor2D::from_vec(n, n, data)
}

fn causal_bias_row(position: usize, table: &Tensor2D) -> Tensor2D {
    let row: Vec<f64> = (0..=position)
        .map(|j| table.data()[relative_bucket(j as isize - position as isize, table.cols())])
        .collect();
    Tensor2D::row_vector(&row)
}

// ---- graph-generic forward pieces -------------------------------------------------

pub(crate) fn embed_text<G: Graph>(g: &mut G, w: &Weights<G::Var>, tokens: &[usize]) -> Result<G::Var> {
    g.gather_rows(&w.token_embedding, tokens)
}

pub(crate) fn embed_image<G: Graph>(g: &mut G, w: &Weights<G::Var>, grid: &[usize]) -> Result<G::Var> {
    let e = g.gather_rows(&w.token_embedding, grid)?;
    let p = g.matmul(&e, &w.patch_weight)?;
    let p = g.add_row(&p, &w.patch_bias)?;
    g.add(&e, &p)
}

pub(crate) fn image_bias<G: Graph>(g: &mut G, w: &Weights<G::Var>, side: usize) -> Result<G::Var> {
    let buckets = g.value(&w.image_row_bias).cols();
    let (ri, ci) = bias_index_2d(side, buckets);
    let n = side * side;
    let rb = g.gather_bias(&w.image_row_bias, &ri, n, n)?;
    let cb = g.gather_bias(&w.image_col_bias, &ci, n, n)?;
    g.add(&rb, &cb)
}

pub(crate) fn text_bias<G: Graph>(g: &mut G, w: &Weights<G::Var>, len: usize) -> Result<G::Var> {
    let buckets = g.value(&w.text_rel_bias).cols();
    g.gather_bias(&w.text_rel_bias, &bias_index_1d(len, buckets), len, len)
}

/// Relative bias plus the causal mask for teacher-forced decoding.
pub(crate) fn causal_bias<G: Graph>(g: &mut G, w: &Weights<G::Var>, len: usize) -> Result<G::Var> {
    let buckets = g.value(&w.decoder_rel_bias).cols();
    let rel = g.gather_bias(&w.decoder_rel_bias, &bias_index_1d(len, buckets), len, len)?;
    let mut mask = Tensor2D::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            mask.set(i, j, MASKED);
        }
    }
    let mask = g.constant(mask);
    g.add(&rel, &mask)
}

/// Scaled dot-product attention over all heads; returns concatenated head
/// outputs (before the output projection).
pub(crate) fn attend<G: Graph>(
    g: &mut G,
    q: &G::Var,
    k: &G::Var,
    v: &G::Var,
    bias: Option<&G::Var>,
    n_heads: usize,
) -> Result<G::Var> {
    let d = g.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul_t(&qh, &kh)?;
        let mut s = g.scale(&s, scale);
        if let Some(b) = bias {
            s = g.add(&s, b)?;
        }
        let p = g.softmax_rows(&s);
        heads.push(g.matmul(&p, &vh)?);
    }
    g.concat_cols(&heads)
}

fn attention<G: Graph>(
    g: &mut G,
    w: &Attention<G::Var>,
    query_in: &G::Var,
    kv_in: &G::Var,
    bias: Option<&G::Var>,
    n_heads: usize,
) -> Result<G::Var> {
    let q = g.matmul(query_in, &w.wq)?;
    let k = g.matmul(kv_in, &w.wk)?;
    let v = g.matmul(kv_in, &w.wv)?;
    let heads = attend(g, &q, &k, &v, bias, n_heads)?;
    g.matmul(&heads, &w.wo)
}

fn feed_forward<G: Graph>(g: &mut G, w: &FeedForward<G::Var>, x: &G::Var) -> Result<G::Var> {
    let h = g.matmul(x, &w.w1)?;
    let h = g.add_row(&h, &w.b1)?;
    let h = g.gelu(&h);
    let o = g.matmul(&h, &w.w2)?;
    g.add_row(&o, &w.b2)
}

pub(crate) fn encoder_layer<G: Graph>(
    g: &mut G,
    w: &EncoderLayer<G::Var>,
    x: &G::Var,
    bias: &G::Var,
    n_heads: usize,
) -> Result<G::Var> {
    let a = g.layer_norm(x, &w.norm1.gain, &w.norm1.bias)?;
    let attn = attention(g, &w.attn, &a, &a, Some(bias), n_heads)?;
    let h = g.add(x, &attn)?;
    let b = g.layer_norm(&h, &w.norm2.gain, &w.norm2.bias)?;
    let f = feed_forward(g, &w.ffn, &b)?;
    g.add(&h, &f)
}

/// Decoder block over a whole teacher-forced prefix; `memory` is the
/// normalized encoder output.
pub(crate) fn decoder_layer<G: Graph>(
    g: &mut G,
    w: &DecoderLayer<G::Var>,
    x: &G::Var,
    memory: &G::Var,
    self_bias: &G::Var,
    n_heads: usize,
) -> Result<G::Var> {
    let a = g.layer_norm(x, &w.norm1.gain, &w.norm1.bias)?;
    let sa = attention(g, &w.self_attn, &a, &a, Some(self_bias), n_heads)?;
    let h1 = g.add(x, &sa)?;
    let b = g.layer_norm(&h1, &w.norm2.gain, &w.norm2.bias)?;
    let ca = attention(g, &w.cross_attn, &b, memory, None, n_heads)?;
    let h2 = g.add(&h1, &ca)?;
    let c = g.layer_norm(&h2, &w.norm3.gain, &w.norm3.bias)?;
    let f = feed_forward(g, &w.ffn, &c)?;
    g.add(&h2, &f)
}

pub(crate) fn encoder_memory<G: Graph>(g: &mut G, w: &Weights<G::Var>, c: &G::Var) -> Result<G::Var> {
    g.layer_norm(c, &w.encoder_norm.gain, &w.encoder_norm.bias)
}

pub(crate) fn decoder_logits<G: Graph>(g: &mut G, w: &Weights<G::Var>, h: &G::Var) -> Result<G::Var> {
    let n = g.layer_norm(h, &w.decoder_norm.gain, &w.decoder_norm.bias)?;
    let head = w.output_head.as_ref().unwrap_or(&w.token_embedding);
    g.matmul_t(&n, head)
}

/// Teacher-forced forward pass at full depth. Returns the logits read off
/// every decoder layer (through the shared final norm and head), shallowest
/// first. Only the last is computed when `all_layers` is false.
/// Full-depth encoder memory for both modalities.
pub(crate) fn full_memory<G: Graph>(
    g: &mut G,
    w: &Weights<G::Var>,
    cfg: &ModelConfig,
    grid: &[usize],
    text: &[usize],
) -> Result<G::Var> {
    let mut img = embed_image(g, w, grid)?;
    let img_bias = image_bias(g, w, cfg.grid_side)?;
    for layer in &w.encoder {
        img = encoder_layer(g, layer, &img, &img_bias, cfg.n_heads)?;
    }
    let mut txt = embed_text(g, w, text)?;
    let txt_bias = text_bias(g, w, text.len())?;
    for layer in &w.encoder {
        txt = encoder_layer(g, layer, &txt, &txt_bias, cfg.n_heads)?;
    }
    let c = g.concat_rows(&[img, txt])?;
    encoder_memory(g, w, &c)
}

/// Decoder logits for every input position at once, read off every layer
/// or only the last.
pub(crate) fn teacher_forced_decode<G: Graph>(
    g: &mut G,
    w: &Weights<G::Var>,
    cfg: &ModelConfig,
    memory: &G::Var,
    decoder_input: &[usize],
    all_layers: bool,
) -> Result<Vec<G::Var>> {
    let mut h = embed_text(g, w, decoder_input)?;
    let bias = causal_bias(g, w, decoder_input.len())?;
    let mut out = Vec::with_capacity(w.decoder.len());
    let last = w.decoder.len() - 1;
    for (i, layer) in w.decoder.iter().enumerate() {
        h = decoder_layer(g, layer, &h, memory, &bias, cfg.n_heads)?;
        if all_layers || i == last {
            out.push(decoder_logits(g, w, &h)?);
        }
    }
    Ok(out)
}

pub(crate) fn teacher_forced_logits<G: Graph>(
    g: &mut G,
    w: &Weights<G::Var>,
    cfg: &ModelConfig,
    grid: &[usize],
    text: &[usize],
    decoder_input: &[usize],
    all_layers: bool,
) -> Result<Vec<G::Var>> {
    let memory = full_memory(g, w, cfg, grid, text)?;
    teacher_forced_decode(g, w, cfg, &memory, decoder_input, all_layers)
}

/// Cached keys/values for one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub self_k: Tensor2D,
    pub self_v: Tensor2D,
    pub cross_k: Tensor2D,
    pub cross_v: Tensor2D,
}

/// Per-layer self-attention history plus the cross-attention keys/values,
/// which are computed once from the encoder output.
#[derive(Clone, Debug)]
pub struct DecoderCaches {
    pub layers: Vec<LayerCache>,
}

impl DecoderCaches {
    /// Builds cross-attention caches from `c = [I_p; T_q]`.
    pub fn new(model: &Model, c: &Tensor2D) -> Result<Self> {
        if c.rows() == 0 {
            return Err(Error::State("encoder output is empty".into()));
        }
        let w = &model.params;
        let memory = encoder_memory(&mut Eval, w, c)?;
        let d = model.config.d_model;
        let layers = w
            .decoder
            .iter()
            .map(|l| {
                Ok(LayerCache {
                    self_k: Tensor2D::zeros(0, d),
                    self_v: Tensor2D::zeros(0, d),
                    cross_k: numerics::matmul(&memory, &l.cross_attn.wk)?,
                    cross_v: numerics::matmul(&memory, &l.cross_attn.wv)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Self-attention length per layer.
    pub fn lengths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.self_k.rows()).collect()
    }

    /// Fills layers `from_layer+1 ..= N_D` (1-based) for the current position
    /// with keys/values computed from `hidden`, as if each skipped layer had
    /// received the exit-layer state as its input.
    pub fn propagate(&mut self, model: &Model, from_layer: usize, hidden: &Tensor2D) -> Result<()> {
        for (cache, w) in self.layers.iter_mut().zip(&model.params.decoder).skip(from_layer) {
            let a = numerics::layer_norm(hidden, &w.norm1.gain, &w.norm1.bias, LAYER_NORM_EPS)?;
            cache.self_k.push_row(numerics::matmul(&a, &w.self_attn.wk)?.row(0))?;
            cache.self_v.push_row(numerics::matmul(&a, &w.self_attn.wv)?.row(0))?;
        }
        Ok(())
    }
}
