//! Toy text encoder: a learned embedding table over a fixed vocabulary.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Keyword whose attention slice is extracted.
pub const TEXT_TOKEN: &str = "text";

pub const VOCAB: &[&str] = &[
    "<pad>", "a", "an", "the", "photo", "image", "with", "of", "text", "clear", "sharp",
    "high", "quality", "detailed", "scene", "and",
];

pub const DEFAULT_PROMPT: &[&str] = &["a", "photo", "with", "text"];

/// Token ids and their embedded rows `c_y`, plus the position of the
/// keyword slice `c_tex` within them.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub tokens: Vec<usize>,
    pub embeddings: Var,
    pub tex_index: usize,
}

pub fn tokenize(words: &[impl AsRef<str>]) -> Result<Vec<usize>> {
    words
        .iter()
        .map(|w| {
            let w = w.as_ref();
            VOCAB
                .iter()
                .position(|v| *v == w)
                .ok_or_else(|| Error::Prompt(format!("unknown token {w:?}")))
        })
        .collect()
}

/// Position of the keyword; it must appear exactly once.
pub fn locate_text_token(tokens: &[usize]) -> Result<usize> {
    let text_id = VOCAB.iter().position(|v| *v == TEXT_TOKEN).unwrap();
    let hits: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == text_id)
        .map(|(i, _)| i)
        .collect();
    match hits[..] {
        [i] => Ok(i),
        [] => Err(Error::Prompt(format!("prompt lacks the {TEXT_TOKEN:?} token"))),
        _ => Err(Error::Prompt(format!(
            "{TEXT_TOKEN:?} appears {} times in the prompt",
            hits.len()
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pub table: ParamId,
    pub dim: usize,
}

impl PromptEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let table = store.add("prompt.embedding", Tensor::randn(&[VOCAB.len(), dim], 1.0, rng));
        Self { table, dim }
    }

    pub fn embed(&self, g: &mut Graph, words: &[impl AsRef<str>]) -> Result<PromptEmbedding> {
        let tokens = tokenize(words)?;
        let tex_index = locate_text_token(&tokens)?;
        let table = g.param(self.table);
        let embeddings = g.gather_rows(table, &tokens);
        Ok(PromptEmbedding {
            tokens,
            embeddings,
            tex_index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (ParamStore, PromptEncoder) {
        let mut store = ParamStore::new();
        let enc = PromptEncoder::new(&mut store, 8, &mut ChaCha8Rng::seed_from_u64(3));
        (store, enc)
    }

    #[test]
    fn default_prompt_locates_keyword() {
        let (store, enc) = encoder();
        let mut g = Graph::new();
        g.bind(&store);
        let p = enc.embed(&mut g, DEFAULT_PROMPT).unwrap();
        assert_eq!(p.tex_index, 3);
        assert_eq!(g.shape(p.embeddings), &[4, 8]);
    }

    #[test]
    fn embedding_is_deterministic() {
        let (store, enc) = encoder();
        let mut g = Graph::new();
        g.bind(&store);
        let a = enc.embed(&mut g, DEFAULT_PROMPT).unwrap();
        let b = enc.embed(&mut g, DEFAULT_PROMPT).unwrap();
        assert_eq!(g.value(a.embeddings), g.value(b.embeddings));
    }

    #[test]
    fn missing_or_repeated_keyword_is_an_error() {
        let (store, enc) = encoder();
        let mut g = Graph::new();
        g.bind(&store);
        assert!(matches!(
            enc.embed(&mut g, &["a", "photo"]),
            Err(Error::Prompt(_))
        ));
        assert!(matches!(
            enc.embed(&mut g, &["text", "with", "text"]),
            Err(Error::Prompt(_))
        ));
        assert!(matches!(enc.embed(&mut g, &["zebra", "text"]), Err(Error::Prompt(_))));
    }
}
