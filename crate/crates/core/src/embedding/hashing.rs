//! Deterministic embedder used for hermetic runs.
//!
//! Text is feature-hashed: every lowercase alphanumeric token adds a signed unit
//! at `fnv1a64(token) mod dim`, with the sign taken from the low bit of
//! `fnv1a64(token + "#s")`. Images with a caption sidecar embed the caption so
//! that text queries and product images share one space; images without a
//! caption get a pseudo-random direction derived from their bytes.

use super::{EmbedError, Embedder, EmbeddingVector};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    /// Bucket index and sign for one token.
    pub fn slot(&self, token: &str) -> (usize, f64) {
        let index = (fnv1a64(token.as_bytes()) % self.dim as u64) as usize;
        let mut salted = Vec::with_capacity(token.len() + 2);
        salted.extend_from_slice(token.as_bytes());
        salted.extend_from_slice(b"#s");
        let sign = if fnv1a64(&salted) & 1 == 0 { 1.0 } else { -1.0 };
        (index, sign)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyQuery);
        }
        let mut acc = vec![0f64; self.dim];
        for t in &tokens {
            let (i, s) = self.slot(t);
            acc[i] += s;
        }
        // Opposite-signed collisions can cancel every bucket.
        if acc.iter().all(|&v| v == 0.0) {
            return Err(EmbedError::Degenerate);
        }
        let values = acc.into_iter().map(|v| v as f32).collect();
        Ok(EmbeddingVector::normalize(values)?)
    }

    fn embed_image(&self, image: &[u8], caption: Option<&str>) -> Result<EmbeddingVector, EmbedError> {
        if image.is_empty() {
            return Err(EmbedError::EmptyImage);
        }
        if let Some(caption) = caption {
            return self.embed_text(caption);
        }
        let mut state = fnv1a64(image);
        let values = (0..self.dim)
            .map(|_| {
                let unit = (splitmix64(&mut state) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                (unit * 2.0 - 1.0) as f32
            })
            .collect();
        EmbeddingVector::normalize(values).map_err(|_| EmbedError::Degenerate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;

    #[test]
    fn fnv_reference_values() {
        // Offset basis for the empty input; others computed with an independent script.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"red"), 0x89e9_be19_60f4_c21c);
        assert_eq!(fnv1a64(b"red#s"), 0xa255_3ff3_13ef_b91a);
    }

    #[test]
    fn single_token_hits_one_bucket() {
        // fnv("red") mod 8 = 4; fnv("red#s") is even, so the sign is positive.
        let v = HashEmbedder::new(8).embed_text("red").unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn deterministic_text() {
        let e = HashEmbedder::new(1024);
        let a = e.embed_text("red dress").unwrap();
        let b = e.embed_text("red dress").unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        let e = HashEmbedder::new(64);
        assert_eq!(e.embed_text("Red, DRESS!").unwrap(), e.embed_text("red dress").unwrap());
    }

    #[test]
    fn empty_text_is_an_error() {
        let e = HashEmbedder::new(16);
        assert!(matches!(e.embed_text(" "), Err(EmbedError::EmptyQuery)));
        assert!(matches!(e.embed_text("--- !!"), Err(EmbedError::EmptyQuery)));
    }

    #[test]
    fn caption_sidecar_matches_text() {
        let e = HashEmbedder::new(1024);
        let img = e.embed_image(b"img1", Some("red dress")).unwrap();
        assert_eq!(img, e.embed_text("red dress").unwrap());
    }

    #[test]
    fn uncaptioned_image_is_deterministic() {
        let e = HashEmbedder::new(256);
        let a = e.embed_image(b"\x89PNG fake bytes", None).unwrap();
        let b = e.embed_image(b"\x89PNG fake bytes", None).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-5);
        let c = e.embed_image(b"other bytes", None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_image_is_an_error() {
        assert!(matches!(
            HashEmbedder::new(8).embed_image(b"", Some("x")),
            Err(EmbedError::EmptyImage)
        ));
    }

    #[test]
    fn distinct_buckets_are_orthogonal() {
        let e = HashEmbedder::new(1024);
        let words = ["red", "blue", "dress", "shirt", "denim", "linen", "polo", "jeans"];
        for a in words {
            for b in words {
                if a != b && e.slot(a).0 != e.slot(b).0 {
                    let s = cosine_similarity(&e.embed_text(a).unwrap(), &e.embed_text(b).unwrap()).unwrap();
                    assert_eq!(s, 0.0, "{a} vs {b}");
                }
            }
        }
    }
}
