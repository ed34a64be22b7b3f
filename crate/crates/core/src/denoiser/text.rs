use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

/// Placeholder word standing for the personalized identity.
pub const PSEUDO_WORD: &str = "S*";
/// Word used in generic captions during base pretraining.
pub const GENERIC_WORD: &str = "person";
const UNK: &str = "<unk>";

/// Prompt templates used while fine-tuning. `S*` marks the identity slot.
pub const TRAIN_TEMPLATES: [&str; 8] = [
    "an image of S*",
    "a cropped photo of S*",
    "a photo of S*",
    "a close-up photo of S*",
    "a portrait of S*",
    "a rendering of S*",
    "a good photo of S*",
    "a bright photo of S*",
];

/// Fixed evaluation prompts: single subject, groups, objects, clothing and pose.
pub const EVAL_PROMPTS: [&str; 12] = [
    "a photo of S* reading in the library",
    "a photo of S* wearing a red hat",
    "S* standing on the beach",
    "S* and a friend in the park",
    "a portrait of S* with a dog",
    "S* wearing glasses in the office",
    "a photo of S* sitting on a chair",
    "S* holding a cup of coffee",
    "a photo of S* in a blue shirt",
    "S* smiling at night in the city",
    "S* riding a bike on the street",
    "a group photo of S* with people",
];

/// Frozen word-embedding table standing in for a pretrained text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTextEncoder {
    vocab: Vec<&'static str>,
    table: Tensor<f32>,
    max_len: usize,
}

impl ToyTextEncoder {
    pub const MAX_LEN: usize = 10;

    pub fn new(seed: u64, dim: usize) -> Self {
        let mut vocab: Vec<&'static str> = alloc::vec![UNK, PSEUDO_WORD, GENERIC_WORD];
        for prompt in TRAIN_TEMPLATES.iter().chain(EVAL_PROMPTS.iter()) {
            for w in prompt.split_whitespace() {
                if !vocab.contains(&w) {
                    vocab.push(w);
                }
            }
        }
        let mut rng = SeededRng::derive(seed, 0x7e87);
        let table = rng.normal_tensor(&[vocab.len(), dim], 1.0);
        Self {
            vocab,
            table,
            max_len: Self::MAX_LEN,
        }
    }

    /// Rebuilds around a stored embedding table.
    pub fn with_table(table: Tensor<f32>) -> Result<Self> {
        let base = Self::new(0, table.dims2()?.1);
        if table.shape()[0] != base.vocab.len() {
            return Err(Error::Format(format!(
                "text table has {} rows, vocabulary has {}",
                table.shape()[0],
                base.vocab.len()
            )));
        }
        Ok(Self { table, ..base })
    }

    pub fn table(&self) -> &Tensor<f32> {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn vocab(&self) -> &[&'static str] {
        &self.vocab
    }

    fn row_of(&self, word: &str) -> usize {
        self.vocab.iter().position(|&v| v == word).unwrap_or(0)
    }

    /// Embeds a template from [`TRAIN_TEMPLATES`] with `pseudo_word` in the identity slot.
    pub fn encode_text(&self, template_id: usize, pseudo_word: &str) -> Result<Tensor<f32>> {
        let template = TRAIN_TEMPLATES.get(template_id).ok_or_else(|| {
            Error::Range(format!(
                "unknown template id {template_id} (have {})",
                TRAIN_TEMPLATES.len()
            ))
        })?;
        Ok(self.encode_prompt(template, pseudo_word))
    }

    /// Whitespace tokenization; unknown words map to the reserved UNK row.
    pub fn encode_prompt(&self, prompt: &str, pseudo_word: &str) -> Tensor<f32> {
        let dim = self.dim();
        let rows: Vec<usize> = prompt
            .split_whitespace()
            .take(self.max_len)
            .map(|w| self.row_of(if w == PSEUDO_WORD { pseudo_word } else { w }))
            .collect();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            data.extend_from_slice(&self.table.data()[r * dim..(r + 1) * dim]);
        }
        Tensor::new(&[rows.len(), dim], data).unwrap()
    }

    /// Zero matrix used when the text prompt is dropped.
    pub fn null(&self) -> Tensor<f32> {
        Tensor::zeros(&[self.max_len, self.dim()])
    }
}
