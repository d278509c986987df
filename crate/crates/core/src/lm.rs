use crate::error::Result;

/// Anything that yields next-token scores from a prefix.
///
/// Logits are natural-log scores up to an additive constant; `-inf` marks a
/// token the model deems impossible. The prefix excludes any BOS padding,
/// which each model adds itself.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// Logits for every position of `ids`; entry `i` conditions on `ids[..i]`.
    fn sequence_logits(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        (0..ids.len()).map(|i| self.next_logits(&ids[..i])).collect()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        (**self).next_logits(prefix)
    }

    fn sequence_logits(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        (**self).sequence_logits(ids)
    }
}

/// Equal probability for every token.
#[derive(Clone, Copy, Debug)]
pub struct UniformModel {
    pub vocab_size: usize,
}

impl LanguageModel for UniformModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logits(&self, _prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.vocab_size])
    }
}
