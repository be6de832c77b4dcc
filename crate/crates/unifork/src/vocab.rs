//! Token id layout shared by the model, the dataset, and the samplers.
//!
//! The id space is split into three disjoint ranges covering [0, V):
//! text words first, then special tokens, then per-level image codes.
//! Keeping text + specials as a contiguous prefix lets the text head
//! project onto exactly that prefix, so decoded text can never contain
//! an image-code id.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    Bos,
    Eos,
    PadCfg,
    ImgStart,
    ImgEnd,
    User,
    Assistant,
}

pub const N_SPECIAL: usize = 7;

pub const ALL_SPECIALS: [Special; N_SPECIAL] = [
    Special::Bos,
    Special::Eos,
    Special::PadCfg,
    Special::ImgStart,
    Special::ImgEnd,
    Special::User,
    Special::Assistant,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_vocab: usize,
    pub image_codebook: usize,
}

impl VocabLayout {
    pub fn total(&self) -> usize {
        self.text_vocab + N_SPECIAL + self.image_codebook
    }

    /// Dimension of the text head: text words plus specials.
    pub fn text_head_dim(&self) -> usize {
        self.text_vocab + N_SPECIAL
    }

    pub fn special(&self, s: Special) -> u32 {
        (self.text_vocab + s as usize) as u32
    }

    /// First id of the image-code range.
    pub fn code_offset(&self) -> usize {
        self.text_vocab + N_SPECIAL
    }

    pub fn code_id(&self, code: usize) -> u32 {
        debug_assert!(code < self.image_codebook);
        (self.code_offset() + code) as u32
    }

    pub fn is_text(&self, id: u32) -> bool {
        (id as usize) < self.text_vocab
    }

    pub fn is_special(&self, id: u32) -> bool {
        let id = id as usize;
        id >= self.text_vocab && id < self.code_offset()
    }

    pub fn is_code(&self, id: u32) -> bool {
        let id = id as usize;
        id >= self.code_offset() && id < self.total()
    }

    pub fn in_vocab(&self, id: u32) -> bool {
        (id as usize) < self.total()
    }
}
