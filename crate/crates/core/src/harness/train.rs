//! Training loop combining global alignment with the three pathways.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{mix, Dataset};
use super::optim::{lamb_step, lr_schedule, LambConfig, LambState};
use crate::cmr::{init_fusion_params, loss_nitc, refine, CmrConfig, FusionParams, CMR_PREFIX};
use crate::dcc::{cue_indices, cue_on_tape, loss_ditc, relevance_from_rows, DccParams};
use crate::encoders::{
    encode_image_vars, encode_text_vars, Caption, DualEncoder, EncodedItem, EncodedVars, EncoderConfig,
    ImageGrid, Vocab, IMAGE_PREFIX, TEXT_PREFIX,
};
use crate::error::{Error, Result};
use crate::evalret::{RetrievalReport, SimilarityMatrix};
use crate::imr::{
    loss_imc, loss_imr_batch, mine_from_globals, text_negatives, CorpusStats, ImrLossParams, Lexicon,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Binding;

/// Which objectives contribute to the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub imr_t: bool,
    pub imr_v: bool,
    pub cmr: bool,
    pub dcc: bool,
    /// Contrastive alignment of the raw encoder globals.
    pub global_align: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            imr_t: true,
            imr_v: true,
            cmr: true,
            dcc: true,
            global_align: true,
        }
    }
}

impl Toggles {
    pub fn none() -> Self {
        Toggles {
            imr_t: false,
            imr_v: false,
            cmr: false,
            dcc: false,
            global_align: false,
        }
    }

    pub fn baseline() -> Self {
        Toggles {
            global_align: true,
            ..Toggles::none()
        }
    }

    pub fn any(&self) -> bool {
        self.imr_t || self.imr_v || self.cmr || self.dcc || self.global_align
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub imr: f64,
    pub imc: f64,
    pub nitc: f64,
    pub ditc: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            imr: 1.0,
            imc: 1.0,
            nitc: 1.0,
            ditc: 1.0,
            align: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weights: LossWeights,
    pub toggles: Toggles,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub imr: ImrLossParams,
    pub cmr: CmrConfig,
    pub dcc: DccParams,
    pub lamb: LambConfig,
    /// Temperature of the global alignment loss.
    pub align_tau: f64,
    /// Evaluate held-out Rank-1 after every epoch.
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 12,
            lr_start: 1e-6,
            lr_end: 1e-5,
            weights: LossWeights::default(),
            toggles: Toggles::default(),
            seed: 0,
            encoder: EncoderConfig::default(),
            imr: ImrLossParams::default(),
            cmr: CmrConfig::default(),
            dcc: DccParams::default(),
            lamb: LambConfig::default(),
            align_tau: 0.07,
            validate_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Input(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Input("epochs must be >= 1".into()));
        }
        if !(self.lr_start >= 0.0 && self.lr_start <= self.lr_end && self.lr_end.is_finite()) {
            return Err(Error::Input(format!(
                "need 0 <= lr_start <= lr_end, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        let w = &self.weights;
        if [w.imr, w.imc, w.nitc, w.ditc, w.align].iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Input(format!("loss weights must be >= 0, got {w:?}")));
        }
        if !(self.align_tau > 0.0) {
            return Err(Error::Input("align_tau must be positive".into()));
        }
        self.encoder.validate()?;
        self.imr.validate()?;
        self.cmr.validate()?;
        self.dcc.validate()?;
        self.lamb.validate()
    }
}

/// Unweighted loss values of one batch plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub imr_t: f64,
    pub imc_t: f64,
    pub imr_v: f64,
    pub imc_v: f64,
    pub nitc: f64,
    pub ditc: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown) {
        self.align += o.align;
        self.imr_t += o.imr_t;
        self.imc_t += o.imc_t;
        self.imr_v += o.imr_v;
        self.imc_v += o.imc_v;
        self.nitc += o.nitc;
        self.ditc += o.ditc;
        self.total += o.total;
    }

    fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            align: self.align * k,
            imr_t: self.imr_t * k,
            imc_t: self.imc_t * k,
            imr_v: self.imr_v * k,
            imc_v: self.imc_v * k,
            nitc: self.nitc * k,
            ditc: self.ditc * k,
            total: self.total * k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub val_rank1: Option<f64>,
}

pub struct TrainOutcome {
    /// Encoders plus fusion blocks; the fusion blocks are unused at
    /// retrieval time.
    pub model: DualEncoder<f32>,
    pub history: Vec<EpochMetrics>,
}

/// One training batch with its negatives attached.
pub struct TrainBatch<'a> {
    pub images: Vec<&'a ImageGrid>,
    pub captions: Vec<&'a Caption>,
    pub ids: Vec<u32>,
    /// Perturbed captions per pair; empty when text negatives are off.
    pub text_negatives: Vec<Vec<Caption>>,
    /// `[k x D]` detached image globals per pair; empty when visual
    /// negatives are off.
    pub visual_negatives: Vec<Tensor<f32>>,
}

/// Vocabulary over the training captions and the catalog words.
pub fn build_vocab(data: &Dataset) -> Vocab {
    let cat = &data.spec.catalog;
    Vocab::build(
        data.captions
            .iter()
            .flat_map(|c| c.tokens.iter().map(String::as_str))
            .chain(cat.noun_words())
            .chain(cat.adjective_words())
            .chain(cat.verb_words()),
    )
}

/// Freshly initialized encoders and fusion blocks for `config`.
pub fn init_model(config: &TrainConfig, vocab: Vocab) -> Result<DualEncoder<f32>> {
    let mut model = DualEncoder::new(config.encoder.clone(), vocab, config.seed)?;
    init_fusion_params(&mut model.params, &config.cmr, config.encoder.dim, mix(config.seed, 1, 0));
    Ok(model)
}

/// `(caption index, image index)` for every caption tied to an image.
fn training_pairs(data: &Dataset) -> Vec<(usize, usize)> {
    data.captions
        .iter()
        .enumerate()
        .filter_map(|(c, cap)| cap.image_index.map(|i| (c, i)))
        .collect()
}

/// Orders pairs so that consecutive runs of distinct identities fill the
/// batches: pairs are dealt round-robin over a shuffled identity order.
fn epoch_batches(pairs: &[(usize, usize)], data: &Dataset, batch: usize, seed: u64) -> Vec<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_id: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for &p in pairs {
        by_id.entry(data.captions[p.0].identity_id).or_default().push(p);
    }
    let mut groups: Vec<Vec<(usize, usize)>> = by_id.into_values().collect();
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
    }
    groups.shuffle(&mut rng);
    let rounds = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(pairs.len());
    for r in 0..rounds {
        order.extend(groups.iter().filter_map(|g| g.get(r).copied()));
    }
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[_]>::to_vec)
        .collect()
}

fn batch_count(n_pairs: usize, batch: usize) -> usize {
    n_pairs / batch + usize::from(n_pairs % batch >= 2)
}

/// Image globals of every training image under the current weights.
fn image_bank(model: &DualEncoder<f32>, images: &[ImageGrid]) -> Result<Vec<Vec<f32>>> {
    images
        .par_iter()
        .map(|img| model.encode_image(img).map(|it| it.global_feat.data().to_vec()))
        .collect()
}

struct Context<'a> {
    lexicon: Lexicon,
    stats: CorpusStats,
    data: &'a Dataset,
}

fn assemble<'a>(
    config: &TrainConfig,
    ctx: &Context<'a>,
    pairs: &[(usize, usize)],
    bank: Option<&[Vec<f32>]>,
    epoch: usize,
) -> Result<TrainBatch<'a>> {
    let data = ctx.data;
    let images: Vec<&ImageGrid> = pairs.iter().map(|p| &data.images[p.1]).collect();
    let captions: Vec<&Caption> = pairs.iter().map(|p| &data.captions[p.0]).collect();
    let ids = captions.iter().map(|c| c.identity_id).collect();
    let mut text_negs = Vec::new();
    if config.toggles.imr_t {
        for (&(c, _), cap) in pairs.iter().zip(&captions) {
            let seed = mix(config.seed, epoch as u64 + 1, c as u64);
            let set = text_negatives(c, cap, &ctx.lexicon, &ctx.stats, seed);
            text_negs.push(set.captions().cloned().collect());
        }
    }
    let mut visual = Vec::new();
    if let Some(bank) = bank {
        let globals: Vec<&[f32]> = bank.iter().map(Vec::as_slice).collect();
        let bank_ids: Vec<u32> = data.images.iter().map(|i| i.identity_id).collect();
        for &(_, i) in pairs {
            let set = mine_from_globals(&bank[i], bank_ids[i], &globals, &bank_ids, config.imr.k, None)?;
            let rows: Vec<f32> = set.visual_indices().flat_map(|j| bank[j].iter().copied()).collect();
            let k = rows.len() / config.encoder.dim;
            visual.push(Tensor::matrix(k, config.encoder.dim, rows)?);
        }
    }
    Ok(TrainBatch {
        images,
        captions,
        ids,
        text_negatives: text_negs,
        visual_negatives: visual,
    })
}

fn encode_caption(tape: &mut Tape<f32>, b: &Binding, cfg: &EncoderConfig, vocab: &Vocab, cap: &Caption) -> Result<EncodedVars> {
    let ids = vocab.encode(cap, cfg.max_tokens)?;
    encode_text_vars(tape, b, cfg, &ids.ids)
}

fn weighted(tape: &mut Tape<f32>, total: &mut Option<Var>, term: Var, w: f64) -> Result<()> {
    let t = tape.scale(term, w as f32);
    *total = Some(match *total {
        Some(acc) => tape.add(acc, t)?,
        None => t,
    });
    Ok(())
}

/// Records the enabled objectives of one batch on `tape`. Returns the
/// weighted total (absent when nothing is enabled) and its parts.
pub fn batch_objective(
    tape: &mut Tape<f32>,
    b: &Binding,
    config: &TrainConfig,
    vocab: &Vocab,
    batch: &TrainBatch,
) -> Result<(Option<Var>, LossBreakdown)> {
    let tg = &config.toggles;
    let w = &config.weights;
    let cfg = &config.encoder;
    let mut parts = LossBreakdown::default();
    let mut total = None;
    if !tg.any() {
        return Ok((None, parts));
    }
    let n = batch.images.len();
    let mut img = Vec::with_capacity(n);
    let mut txt = Vec::with_capacity(n);
    for i in 0..n {
        img.push(encode_image_vars(tape, b, cfg, batch.images[i])?);
        txt.push(encode_caption(tape, b, cfg, vocab, batch.captions[i])?);
    }
    let img_g: Vec<Var> = img.iter().map(|e| e.global).collect();
    let txt_g: Vec<Var> = txt.iter().map(|e| e.global).collect();

    if tg.global_align {
        let gi = tape.concat_rows(&img_g)?;
        let gt = tape.concat_rows(&txt_g)?;
        let l = loss_nitc(tape, gi, gt, &batch.ids, config.align_tau)?;
        parts.align = tape.scalar(l) as f64;
        weighted(tape, &mut total, l, w.align)?;
    }

    if tg.imr_t {
        let (mut a, mut p, mut negs) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let caps = &batch.text_negatives[i];
            if caps.is_empty() {
                continue;
            }
            let mut rows = Vec::with_capacity(caps.len());
            for c in caps {
                rows.push(encode_caption(tape, b, cfg, vocab, c)?.global);
            }
            a.push(img_g[i]);
            p.push(txt_g[i]);
            negs.push(tape.concat_rows(&rows)?);
        }
        if !a.is_empty() {
            let l1 = loss_imr_batch(tape, &a, &p, &negs, &config.imr)?;
            let l2 = loss_imc(tape, &a, &p, &negs, &config.imr)?;
            parts.imr_t = tape.scalar(l1) as f64;
            parts.imc_t = tape.scalar(l2) as f64;
            weighted(tape, &mut total, l1, w.imr)?;
            weighted(tape, &mut total, l2, w.imc)?;
        }
    }

    if tg.imr_v {
        let (mut a, mut p, mut negs) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let v = &batch.visual_negatives[i];
            if v.rows() == 0 {
                continue;
            }
            a.push(txt_g[i]);
            p.push(img_g[i]);
            negs.push(tape.constant(v.clone()));
        }
        if !a.is_empty() {
            let l1 = loss_imr_batch(tape, &a, &p, &negs, &config.imr)?;
            let l2 = loss_imc(tape, &a, &p, &negs, &config.imr)?;
            parts.imr_v = tape.scalar(l1) as f64;
            parts.imc_v = tape.scalar(l2) as f64;
            weighted(tape, &mut total, l1, w.imr)?;
            weighted(tape, &mut total, l2, w.imc)?;
        }
    }

    if tg.cmr {
        let fi = FusionParams::from_binding(b, &config.cmr.block("img"))?;
        let ft = FusionParams::from_binding(b, &config.cmr.block("txt"))?;
        let (mut gi, mut gt) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let r = refine(tape, (img[i].locals, img[i].global), (txt[i].locals, txt[i].global), &fi, &ft)?;
            gi.push(r.g_img);
            gt.push(r.g_txt);
        }
        let gi = tape.concat_rows(&gi)?;
        let gt = tape.concat_rows(&gt)?;
        let l = loss_nitc(tape, gi, gt, &batch.ids, config.cmr.tau)?;
        parts.nitc = tape.scalar(l) as f64;
        weighted(tape, &mut total, l, w.nitc)?;
    }

    if tg.dcc {
        let (mut cues, mut pooled) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let profile = relevance_from_rows(&tape.tensor(txt[i].locals), &tape.tensor(img[i].locals))?;
            let (idx, _) = cue_indices(&profile, &config.dcc)?;
            cues.push(cue_on_tape(tape, txt[i].locals, &idx)?);
            pooled.push(tape.mean_rows(img[i].locals));
        }
        let c = tape.concat_rows(&cues)?;
        let v = tape.concat_rows(&pooled)?;
        let l = loss_ditc(tape, c, v, config.dcc.tau)?;
        parts.ditc = tape.scalar(l) as f64;
        weighted(tape, &mut total, l, w.ditc)?;
    }

    if let Some(t) = total {
        parts.total = tape.scalar(t) as f64;
    }
    Ok((total, parts))
}

fn prefixes() -> [&'static str; 3] {
    [IMAGE_PREFIX, TEXT_PREFIX, CMR_PREFIX]
}

/// Loss breakdown of the first batch of epoch 0 under the initial weights.
pub fn initial_losses(config: &TrainConfig, data: &Dataset) -> Result<LossBreakdown> {
    config.validate()?;
    let model = init_model(config, build_vocab(data))?;
    let ctx = context(data);
    let pairs = training_pairs(data);
    let batches = epoch_batches(&pairs, data, config.batch_size, mix(config.seed, 0, 2));
    let first = batches
        .first()
        .ok_or_else(|| Error::Input("dataset yields no batch of two pairs".into()))?;
    let bank = if config.toggles.imr_v {
        Some(image_bank(&model, &data.images)?)
    } else {
        None
    };
    let batch = assemble(config, &ctx, first, bank.as_deref(), 0)?;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, &prefixes(), true);
    Ok(batch_objective(&mut tape, &b, config, &model.vocab, &batch)?.1)
}

fn context(data: &Dataset) -> Context<'_> {
    Context {
        lexicon: Lexicon::from_catalog(&data.spec.catalog),
        stats: CorpusStats::from_captions(&data.captions),
        data,
    }
}

/// Encodes every caption as a query and every image as the gallery.
pub fn evaluate(model: &DualEncoder<f32>, data: &Dataset, fingerprint: String, seed: u64) -> Result<RetrievalReport> {
    evaluate_captions(model, &data.images, &data.captions, fingerprint, seed)
}

pub fn evaluate_captions(
    model: &DualEncoder<f32>,
    images: &[ImageGrid],
    captions: &[Caption],
    fingerprint: String,
    seed: u64,
) -> Result<RetrievalReport> {
    evaluate_direction(model, images, captions, Direction::TextToImage, fingerprint, seed)
}

/// Which modality supplies the queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    TextToImage,
    /// Image queries against a caption gallery, for diagnostics.
    ImageToText,
}

pub fn evaluate_direction(
    model: &DualEncoder<f32>,
    images: &[ImageGrid],
    captions: &[Caption],
    direction: Direction,
    fingerprint: String,
    seed: u64,
) -> Result<RetrievalReport> {
    let image_items: Vec<EncodedItem<f32>> = images
        .par_iter()
        .map(|i| model.encode_image(i))
        .collect::<Result<_>>()?;
    let text_items: Vec<EncodedItem<f32>> = captions
        .par_iter()
        .map(|c| model.encode_text(c))
        .collect::<Result<_>>()?;
    let sim = match direction {
        Direction::TextToImage => SimilarityMatrix::from_items(&text_items, &image_items)?,
        Direction::ImageToText => SimilarityMatrix::from_items(&image_items, &text_items)?,
    };
    RetrievalReport::from_similarity(&sim, fingerprint, seed)
}

/// Trains on `data`, reporting held-out Rank-1 on `val` after each epoch.
pub fn train(config: &TrainConfig, data: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome> {
    config.validate()?;
    let pairs = training_pairs(data);
    if pairs.len() < 2 {
        return Err(Error::Input("training needs at least two image-caption pairs".into()));
    }
    let mut model = init_model(config, build_vocab(data))?;
    let ctx = context(data);
    let mut state = LambState::new(config.lamb.clone(), &model.params)?;
    let total_steps = config.epochs * batch_count(pairs.len(), config.batch_size);
    let mut step = 0;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = epoch_batches(&pairs, data, config.batch_size, mix(config.seed, epoch as u64, 2));
        let bank = if config.toggles.imr_v {
            Some(image_bank(&model, &data.images)?)
        } else {
            None
        };
        let mut sum = LossBreakdown::default();
        for pairs in &batches {
            let batch = assemble(config, &ctx, pairs, bank.as_deref(), epoch)?;
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape, &prefixes(), true);
            let (total, parts) = batch_objective(&mut tape, &b, config, &model.vocab, &batch)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: parts.total,
                });
            }
            if let Some(total) = total {
                tape.backward(total)?;
                let grads = b.grads(&tape);
                let lr = lr_schedule(step, total_steps, config.lr_start, config.lr_end);
                lamb_step(&mut model.params, &grads, &mut state, lr)?;
            }
            sum.accumulate(&parts);
            step += 1;
        }
        let val_rank1 = match val {
            Some(v) if config.validate_each_epoch || epoch + 1 == config.epochs => {
                Some(evaluate(&model, v, String::new(), config.seed)?.rank1)
            }
            _ => None,
        };
        let metrics = EpochMetrics {
            epoch,
            steps: batches.len(),
            loss: sum.scaled(1.0 / batches.len().max(1) as f64),
            val_rank1,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val rank-1 {:?}",
            metrics.loss.total,
            metrics.val_rank1
        );
        history.push(metrics);
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
#[path = "train_tests.rs"]
mod tests;
