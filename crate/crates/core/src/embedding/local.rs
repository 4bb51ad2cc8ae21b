use async_trait::async_trait;

use super::{EmbeddingBackend, EmbeddingError, EmbeddingVector};

pub const LOCAL_DIM: usize = 1024;

const START: char = '\u{2}';
const END: char = '\u{3}';

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Deterministic offline embedder: L2-normalised counts of lowercased
/// character trigrams, hashed into 1024 buckets with FNV-1a. The text is
/// framed by one start and one end marker before trigrams are taken, so a
/// one-character text still yields a trigram. Empty text maps to zero.
#[derive(Debug, Clone, Default)]
pub struct TrigramEmbedder;

impl TrigramEmbedder {
    pub fn new() -> Self {
        TrigramEmbedder
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0f32; LOCAL_DIM];
        if text.is_empty() {
            return EmbeddingVector(counts);
        }
        let chars: Vec<char> = std::iter::once(START)
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once(END))
            .collect();
        let mut buf = String::with_capacity(12);
        for w in chars.windows(3) {
            buf.clear();
            buf.extend(w);
            let bucket = (fnv1a_64(buf.as_bytes()) % LOCAL_DIM as u64) as usize;
            counts[bucket] += 1.0;
        }
        let norm = counts.iter().map(|&c| f64::from(c) * f64::from(c)).sum::<f64>().sqrt();
        for c in &mut counts {
            *c = (f64::from(*c) / norm) as f32;
        }
        EmbeddingVector(counts)
    }
}

#[async_trait]
impl EmbeddingBackend for TrigramEmbedder {
    fn name(&self) -> &str {
        "local-trigram-1024"
    }

    fn dim(&self) -> Option<usize> {
        Some(LOCAL_DIM)
    }

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}
