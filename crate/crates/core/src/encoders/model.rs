//! Patch and token transformers sharing the same block layout.
//!
//! Both encoders prepend a learned global slot, add learned positional
//! embeddings, run `depth` pre-norm single-head attention blocks and a final
//! layer norm. Row 0 of the output is the global feature; the remaining rows
//! are the local features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Caption, EncodedItem, ImageGrid, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Binding, Params};

pub const IMAGE_PREFIX: &str = "img.";
pub const TEXT_PREFIX: &str = "txt.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Embedding dimension shared by both modalities.
    pub dim: usize,
    pub depth: usize,
    pub patch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub max_tokens: usize,
    /// Hidden width of each block's MLP as a multiple of `dim`.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            depth: 2,
            patch: 8,
            image_height: 32,
            image_width: 32,
            channels: 3,
            max_tokens: super::DEFAULT_MAX_TOKENS,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.max_tokens == 0 || self.mlp_ratio == 0 {
            return Err(Error::Input("encoder sizes must be positive".into()));
        }
        if self.patch == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
        {
            return Err(Error::Shape(format!(
                "{}x{} images are not divisible into {p}x{p} patches",
                self.image_height,
                self.image_width,
                p = self.patch
            )));
        }
        Ok(())
    }

    pub fn patches_per_image(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Encoder outputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `[rows x dim]` local features.
    pub locals: Var,
    /// `[dim]` global feature.
    pub global: Var,
}

/// Adds freshly initialized image and text encoder blocks to `params`.
pub fn init_encoder_params<T: Real>(
    params: &mut Params<T>,
    cfg: &EncoderConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;

    params.insert_glorot(&mut rng, "img.patch.w", cfg.patch_dim(), d);
    params.insert_fill("img.patch.b", vec![d], 0.0);
    params.insert_uniform(&mut rng, "img.cls", vec![d], 0.5);
    params.insert_uniform(&mut rng, "img.pos", vec![cfg.patches_per_image() + 1, d], 0.5);
    init_blocks(params, &mut rng, "img", cfg);

    params.insert_uniform(&mut rng, "txt.tok", vec![vocab_size.max(1), d], 0.5);
    params.insert_uniform(&mut rng, "txt.cls", vec![d], 0.5);
    params.insert_uniform(&mut rng, "txt.pos", vec![cfg.max_tokens + 1, d], 0.5);
    init_blocks(params, &mut rng, "txt", cfg);
    Ok(())
}

fn init_blocks<T: Real>(
    params: &mut Params<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &EncoderConfig,
) {
    let d = cfg.dim;
    let h = d * cfg.mlp_ratio;
    for b in 0..cfg.depth {
        let p = format!("{prefix}.blk{b}");
        params.insert_fill(&format!("{p}.ln1.g"), vec![d], 1.0);
        params.insert_fill(&format!("{p}.ln1.b"), vec![d], 0.0);
        for m in ["wq", "wk", "wv", "wo"] {
            params.insert_glorot(rng, &format!("{p}.{m}"), d, d);
        }
        params.insert_fill(&format!("{p}.bo"), vec![d], 0.0);
        params.insert_fill(&format!("{p}.ln2.g"), vec![d], 1.0);
        params.insert_fill(&format!("{p}.ln2.b"), vec![d], 0.0);
        params.insert_glorot(rng, &format!("{p}.fc1.w"), d, h);
        params.insert_fill(&format!("{p}.fc1.b"), vec![h], 0.0);
        params.insert_glorot(rng, &format!("{p}.fc2.w"), h, d);
        params.insert_fill(&format!("{p}.fc2.b"), vec![d], 0.0);
    }
    params.insert_fill(&format!("{prefix}.ln.g"), vec![d], 1.0);
    params.insert_fill(&format!("{prefix}.ln.b"), vec![d], 0.0);
}

const LN_EPS: f64 = 1e-5;

fn block<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    p: &str,
    x: Var,
    dim: usize,
) -> Result<Var> {
    let get = |n: &str| b.get(&format!("{p}.{n}"));
    let h = tape.layer_norm(x, get("ln1.g")?, get("ln1.b")?, T::of(LN_EPS))?;
    let q = tape.linear(h, get("wq")?, None)?;
    let k = tape.linear(h, get("wk")?, None)?;
    let v = tape.linear(h, get("wv")?, None)?;
    let scores = tape.matmul_nt(q, k)?;
    let attn = tape.softmax_rows(scores, T::of((dim as f64).sqrt()))?;
    let mixed = tape.matmul(attn, v)?;
    let o = tape.linear(mixed, get("wo")?, Some(get("bo")?))?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, get("ln2.g")?, get("ln2.b")?, T::of(LN_EPS))?;
    let m = tape.linear(h, get("fc1.w")?, Some(get("fc1.b")?))?;
    let m = tape.gelu(m);
    let m = tape.linear(m, get("fc2.w")?, Some(get("fc2.b")?))?;
    tape.add(x, m)
}

fn trunk<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    prefix: &str,
    cfg: &EncoderConfig,
    tokens: Var,
    pos: Var,
) -> Result<EncodedVars> {
    let cls = b.get(&format!("{prefix}.cls"))?;
    let mut x = tape.concat_rows(&[cls, tokens])?;
    x = tape.add(x, pos)?;
    for i in 0..cfg.depth {
        x = block(tape, b, &format!("{prefix}.blk{i}"), x, cfg.dim)?;
    }
    x = tape.layer_norm(
        x,
        b.get(&format!("{prefix}.ln.g"))?,
        b.get(&format!("{prefix}.ln.b"))?,
        T::of(LN_EPS),
    )?;
    let rows = tape.shape(x)[0];
    let global = tape.row(x, 0)?;
    let idx: Vec<usize> = (1..rows).collect();
    let locals = tape.gather_rows(x, &idx)?;
    Ok(EncodedVars { locals, global })
}

/// Runs the image encoder on `tape` with parameters from `b`.
pub fn encode_image_vars<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    cfg: &EncoderConfig,
    img: &ImageGrid,
) -> Result<EncodedVars> {
    if img.height != cfg.image_height
        || img.width != cfg.image_width
        || img.channels != cfg.channels
    {
        return Err(Error::Shape(format!(
            "encoder expects {}x{}x{} images, got {}x{}x{}",
            cfg.image_height, cfg.image_width, cfg.channels, img.height, img.width, img.channels
        )));
    }
    let (n, raw) = img.patches(cfg.patch)?;
    let data = raw.iter().map(|&v| T::of(v as f64)).collect();
    let patches = tape.constant(Tensor::matrix(n, cfg.patch_dim(), data)?);
    let emb = tape.linear(patches, b.get("img.patch.w")?, Some(b.get("img.patch.b")?))?;
    let pos = b.get("img.pos")?;
    trunk(tape, b, "img", cfg, emb, pos)
}

/// Runs the text encoder over already-tokenized ids.
pub fn encode_text_vars<T: Real>(
    tape: &mut Tape<T>,
    b: &Binding,
    cfg: &EncoderConfig,
    ids: &[u32],
) -> Result<EncodedVars> {
    if ids.is_empty() {
        return Err(Error::Input("cannot encode an empty caption".into()));
    }
    if ids.len() > cfg.max_tokens {
        return Err(Error::Input(format!(
            "{} tokens exceed max_tokens = {}",
            ids.len(),
            cfg.max_tokens
        )));
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let emb = tape.gather_rows(b.get("txt.tok")?, &idx)?;
    let positions: Vec<usize> = (0..=ids.len()).collect();
    let pos = tape.gather_rows(b.get("txt.pos")?, &positions)?;
    trunk(tape, b, "txt", cfg, emb, pos)
}

/// Image and text encoders with their vocabulary and weights.
#[derive(Clone, Debug)]
pub struct DualEncoder<T> {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: Params<T>,
}

impl<T: Real> DualEncoder<T> {
    pub fn new(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut params = Params::new();
        init_encoder_params(&mut params, &config, vocab.len(), seed)?;
        Ok(DualEncoder {
            config,
            vocab,
            params,
        })
    }

    pub fn encode_image(&self, img: &ImageGrid) -> Result<EncodedItem<T>> {
        encode_image(img, &self.params, &self.config)
    }

    pub fn encode_text(&self, cap: &Caption) -> Result<EncodedItem<T>> {
        encode_text(cap, &self.params, &self.config, &self.vocab)
    }
}

fn item_from<T: Real>(tape: &Tape<T>, vars: EncodedVars, identity_id: u32) -> Result<EncodedItem<T>> {
    EncodedItem::new(tape.tensor(vars.locals), tape.tensor(vars.global), identity_id)
}

/// Inference-mode image encoding.
pub fn encode_image<T: Real>(
    img: &ImageGrid,
    params: &Params<T>,
    cfg: &EncoderConfig,
) -> Result<EncodedItem<T>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[IMAGE_PREFIX], false);
    let vars = encode_image_vars(&mut tape, &b, cfg, img)?;
    item_from(&tape, vars, img.identity_id)
}

/// Inference-mode text encoding; over-long captions are truncated.
pub fn encode_text<T: Real>(
    cap: &Caption,
    params: &Params<T>,
    cfg: &EncoderConfig,
    vocab: &Vocab,
) -> Result<EncodedItem<T>> {
    let ids = vocab.encode(cap, cfg.max_tokens)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[TEXT_PREFIX], false);
    let vars = encode_text_vars(&mut tape, &b, cfg, &ids.ids)?;
    item_from(&tape, vars, cap.identity_id)
}
