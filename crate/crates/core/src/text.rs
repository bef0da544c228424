//! Text-encoder stand-in: each lower-cased word maps to a fixed Gaussian
//! vector seeded by a hash of the word.

use sha2::{Digest, Sha256};

use crate::numerics::{DenseArray, Real, Rng};

/// Words of `prompt` (alphanumeric runs, lower-cased).
pub fn words(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn word_seed(word: &str) -> u64 {
    let digest = Sha256::digest(word.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One `text_dim` row per word, at most `max_tokens` rows. An empty prompt
/// gives zero rows, which the model treats as the null condition.
pub fn encode_text<T: Real>(prompt: &str, text_dim: usize, max_tokens: usize) -> DenseArray<T> {
    let ws = words(prompt);
    let n = ws.len().min(max_tokens);
    let mut data = Vec::with_capacity(n * text_dim);
    for w in &ws[..n] {
        let row: DenseArray<T> = Rng::new(word_seed(w)).normal_array(&[text_dim], 1.0);
        data.extend_from_slice(row.data());
    }
    DenseArray::new(vec![n, text_dim], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_word_same_vector() {
        let a = encode_text::<f32>("Hello, hello world", 8, 16);
        assert_eq!(a.shape(), &[3, 8]);
        assert_eq!(a.data()[..8], a.data()[8..16]);
        assert_ne!(a.data()[..8], a.data()[16..24]);
        assert_eq!(encode_text::<f32>("", 8, 16).shape(), &[0, 8]);
        assert_eq!(encode_text::<f32>("a b c d", 8, 2).rows(), 2);
    }
}
