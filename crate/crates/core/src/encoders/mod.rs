//! Toy dual encoders producing per-patch / per-token local features plus a
//! global feature, together with captions, images and embedding banks.

mod bank;
mod caption;
mod image;
mod model;

pub use bank::{
    similarity_rows_from_bytes, similarity_rows_to_bytes, EmbeddingBank, Modality, BANK_MAGIC,
    BANK_VERSION,
};
pub use caption::{
    read_captions_jsonl, tokenize, write_captions_jsonl, Caption, Pos, Tagger, TokenIds, Vocab,
    DEFAULT_MAX_TOKENS, UNK_TOKEN,
};
pub use image::ImageGrid;
pub use model::{
    encode_image, encode_image_vars, encode_text, encode_text_vars, init_encoder_params,
    DualEncoder, EncodedVars, EncoderConfig, IMAGE_PREFIX, TEXT_PREFIX,
};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Local rows plus one global vector for a single image or caption.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedItem<T> {
    /// `[rows x D]`.
    pub locals: Tensor<T>,
    /// `[D]`.
    pub global_feat: Tensor<T>,
    pub identity_id: u32,
}

impl<T: Real> EncodedItem<T> {
    pub fn new(locals: Tensor<T>, global_feat: Tensor<T>, identity_id: u32) -> Result<Self> {
        if locals.shape().len() != 2 || global_feat.shape().len() != 1 {
            return Err(Error::dim(
                "encoded item",
                locals.shape(),
                global_feat.shape(),
            ));
        }
        if locals.cols() != global_feat.numel() {
            return Err(Error::dim(
                "encoded item",
                locals.shape(),
                global_feat.shape(),
            ));
        }
        Ok(EncodedItem {
            locals,
            global_feat,
            identity_id,
        })
    }

    pub fn dim(&self) -> usize {
        self.global_feat.numel()
    }

    pub fn local_count(&self) -> usize {
        self.locals.rows()
    }

    /// Errors if the global vector or any local row has zero norm.
    pub fn check_nonzero(&self) -> Result<()> {
        let zero = |v: &[T]| !(v.iter().map(|&x| x * x).sum::<T>() > T::zero());
        if zero(self.global_feat.data()) {
            return Err(Error::Degenerate {
                op: "encoded item",
                reason: "global feature has zero norm".into(),
            });
        }
        for i in 0..self.local_count() {
            if zero(self.locals.row(i)) {
                return Err(Error::Degenerate {
                    op: "encoded item",
                    reason: format!("local row {i} has zero norm"),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EncodedItem<U> {
        EncodedItem {
            locals: self.locals.cast(),
            global_feat: self.global_feat.cast(),
            identity_id: self.identity_id,
        }
    }
}
