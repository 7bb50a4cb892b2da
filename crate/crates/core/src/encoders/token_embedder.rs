//! Token front end: an embedding lookup. Out-of-range ids map to unk (id 0)
//! rather than failing, matching how a recognizer lexicon behaves.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

pub const UNK_ID: u32 = 0;

pub struct TokenEmbedder {
    table: ParamId,
    vocab_size: u32,
}

impl TokenEmbedder {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        side: &str,
        vocab_size: u32,
        d_model: usize,
        rng: &mut R,
    ) -> Result<TokenEmbedder> {
        if vocab_size == 0 {
            return Err(Error::Config("token embedder needs a non-empty vocab".into()));
        }
        let table = store.add(
            &format!("{side}.embed.table"),
            super::embed_init(rng, vocab_size as usize, d_model),
        )?;
        Ok(TokenEmbedder { table, vocab_size })
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.table).tensor.cols()
    }

    /// [len, d_model] rows, one per token.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[u32],
        utterance: &str,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput(format!(
                "cannot embed empty utterance {utterance}"
            )));
        }
        let ids: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                if t < self.vocab_size {
                    t as usize
                } else {
                    UNK_ID as usize
                }
            })
            .collect();
        let table = tape.param(store, self.table);
        tape.gather_rows(table, &ids)
    }
}
