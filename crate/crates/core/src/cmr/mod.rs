//! Cross-modal refinement: attention-weighted locals, gated fusion with the
//! global feature, and the identity-aware contrastive loss over the
//! refined representations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Binding, Params};

pub const CMR_PREFIX: &str = "cmr.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmrConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// One fusion block for both modalities instead of one each.
    pub shared_fusion: bool,
}

impl Default for CmrConfig {
    fn default() -> Self {
        CmrConfig {
            tau: 0.07,
            shared_fusion: false,
        }
    }
}

impl CmrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Input(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Parameter-name prefix of the fusion block used for `side`
    /// (`"img"` or `"txt"`).
    pub fn block(&self, side: &str) -> String {
        if self.shared_fusion {
            format!("{CMR_PREFIX}shared.")
        } else {
            format!("{CMR_PREFIX}{side}.")
        }
    }
}

/// Fusion weights of one modality as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    /// `[2D x D]` content projection.
    pub w_u: Var,
    /// `[2D x D]` gate projection.
    pub w_f: Var,
    /// `[D]` gate bias.
    pub b_f: Var,
    /// `[2D x D]` projection of `[mean refined local, global]`.
    pub w_p: Var,
}

impl FusionParams {
    pub fn from_binding(b: &Binding, prefix: &str) -> Result<Self> {
        Ok(FusionParams {
            w_u: b.get(&format!("{prefix}w_u"))?,
            w_f: b.get(&format!("{prefix}w_f"))?,
            b_f: b.get(&format!("{prefix}b_f"))?,
            w_p: b.get(&format!("{prefix}w_p"))?,
        })
    }
}

/// Adds fusion blocks for both modalities (or one shared block).
pub fn init_fusion_params<T: Real>(params: &mut Params<T>, cfg: &CmrConfig, dim: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = vec![cfg.block("img")];
    if !cfg.shared_fusion {
        blocks.push(cfg.block("txt"));
    }
    for p in blocks {
        params.insert_glorot(&mut rng, &format!("{p}w_u"), 2 * dim, dim);
        params.insert_glorot(&mut rng, &format!("{p}w_f"), 2 * dim, dim);
        params.insert_fill(&format!("{p}b_f"), vec![dim], 0.0);
        params.insert_glorot(&mut rng, &format!("{p}w_p"), 2 * dim, dim);
    }
}

/// `A[i, j] = exp(cos(v_i, t_j)) / sum_{i', j'} exp(cos(v_i', t_j'))`.
pub fn attention_weights<T: Real>(tape: &mut Tape<T>, img_locals: Var, txt_locals: Var) -> Result<Var> {
    let s = tape.cosine_matrix(img_locals, txt_locals)?;
    let (n, m) = (tape.shape(s)[0], tape.shape(s)[1]);
    let flat = tape.reshape(s, vec![1, n * m])?;
    let a = tape.softmax_rows(flat, T::one())?;
    tape.reshape(a, vec![n, m])
}

/// Scales each local by its total attention mass: row sums for image locals,
/// column sums for text locals.
pub fn weight_locals<T: Real>(
    tape: &mut Tape<T>,
    attention: Var,
    img_locals: Var,
    txt_locals: Var,
) -> Result<(Var, Var)> {
    let (n, m) = (tape.shape(attention)[0], tape.shape(attention)[1]);
    if tape.shape(img_locals)[0] != n || tape.shape(txt_locals)[0] != m {
        return Err(Error::dim(
            "weight_locals",
            tape.shape(attention),
            tape.shape(img_locals),
        ));
    }
    let mass_v = tape.sum_cols(attention);
    let mass_t = tape.sum_rows(attention);
    let v = tape.row_scale(img_locals, mass_v)?;
    let t = tape.row_scale(txt_locals, mass_t)?;
    Ok((v, t))
}

/// Per row `c = [local, g]`: `(c W_u) * tanh(c W_f + b_f)`.
pub fn gated_fuse<T: Real>(
    tape: &mut Tape<T>,
    locals_hat: Var,
    g: Var,
    fp: &FusionParams,
) -> Result<Var> {
    let r = tape.shape(locals_hat)[0];
    let gm = tape.as_matrix(g)?;
    let g_rows = tape.gather_rows(gm, &vec![0; r])?;
    let c = tape.concat_cols(locals_hat, g_rows)?;
    let content = tape.linear(c, fp.w_u, None)?;
    let pre = tape.linear(c, fp.w_f, Some(fp.b_f))?;
    let gate = tape.tanh(pre);
    tape.mul(content, gate)
}

/// `W_p^T [mean of refined locals, global]` as a `[D]` vector.
pub fn pooled_global<T: Real>(tape: &mut Tape<T>, refined: Var, g: Var, fp: &FusionParams) -> Result<Var> {
    let mean = tape.mean_rows(refined);
    let mean = tape.as_matrix(mean)?;
    let gm = tape.as_matrix(g)?;
    let c = tape.concat_cols(mean, gm)?;
    let out = tape.linear(c, fp.w_p, None)?;
    let d = tape.shape(out)[1];
    tape.reshape(out, vec![d])
}

/// Tape handles of one refined image/text pair.
#[derive(Clone, Copy, Debug)]
pub struct RefinedPair {
    pub image_locals_refined: Var,
    pub text_locals_refined: Var,
    pub attention_matrix: Var,
    pub g_img: Var,
    pub g_txt: Var,
}

/// Attention, weighting, gated fusion and pooling for one pair.
pub fn refine<T: Real>(
    tape: &mut Tape<T>,
    img: (Var, Var),
    txt: (Var, Var),
    img_fusion: &FusionParams,
    txt_fusion: &FusionParams,
) -> Result<RefinedPair> {
    let a = attention_weights(tape, img.0, txt.0)?;
    let (v_hat, t_hat) = weight_locals(tape, a, img.0, txt.0)?;
    let v_ref = gated_fuse(tape, v_hat, img.1, img_fusion)?;
    let t_ref = gated_fuse(tape, t_hat, txt.1, txt_fusion)?;
    let g_img = pooled_global(tape, v_ref, img.1, img_fusion)?;
    let g_txt = pooled_global(tape, t_ref, txt.1, txt_fusion)?;
    Ok(RefinedPair {
        image_locals_refined: v_ref,
        text_locals_refined: t_ref,
        attention_matrix: a,
        g_img,
        g_txt,
    })
}

/// Soft identity targets: `p[i][j] = 1/|{j : id_j = id_i}|` for matches.
pub fn identity_targets(ids: &[u32]) -> Vec<f64> {
    let n = ids.len();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let matches = ids.iter().filter(|&&x| x == ids[i]).count() as f64;
        for j in 0..n {
            if ids[j] == ids[i] {
                p[i * n + j] = 1.0 / matches;
            }
        }
    }
    p
}

/// Symmetric contrastive loss with identity-aware soft labels between
/// image globals `g_img` and text globals `g_txt` (both `[N x D]`).
pub fn loss_nitc<T: Real>(tape: &mut Tape<T>, g_img: Var, g_txt: Var, ids: &[u32], tau: f64) -> Result<Var> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::Input(format!("contrastive batch needs N >= 2, got {n}")));
    }
    if tape.shape(g_img)[0] != n || tape.shape(g_txt)[0] != n {
        return Err(Error::dim("loss_nitc", tape.shape(g_img), tape.shape(g_txt)));
    }
    let s = tape.cosine_matrix(g_img, g_txt)?;
    let log_q = tape.log_softmax_rows(s, T::of(tau))?;
    let st = tape.transpose(s)?;
    let log_p = tape.log_softmax_rows(st, T::of(tau))?;
    let log_p = tape.transpose(log_p)?;
    let targets: Vec<T> = identity_targets(ids).into_iter().map(T::of).collect();
    let p = tape.constant(Tensor::matrix(n, n, targets)?);
    let both = tape.add(log_q, log_p)?;
    let weighted = tape.mul(both, p)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, T::of(-1.0 / (2.0 * n as f64))))
}

/// Stacks per-item `[D]` globals into `[N x D]`.
pub fn stack<T: Real>(tape: &mut Tape<T>, rows: &[Var]) -> Result<Var> {
    tape.concat_rows(rows)
}
