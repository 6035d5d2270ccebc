use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Token embeddings for BERTScore. Implementations must be deterministic
/// per token and return vectors of a fixed dimension.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, token: &str) -> Result<Vec<f64>>;
}

pub(crate) fn unit_embedding(emb: &dyn EmbeddingProvider, token: &str) -> Result<Vec<f64>> {
    let v = emb.embed(token)?;
    if v.len() != emb.dim() {
        return Err(Error::consistency(format!(
            "embedding for {token:?} has dimension {}, provider says {}",
            v.len(),
            emb.dim()
        )));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::numeric(format!("embedding for {token:?} cannot be normalized")));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// One basis vector per vocabulary entry, so cosine similarity reduces to
/// token equality.
#[derive(Debug, Clone, Default)]
pub struct OneHot {
    index: HashMap<String, usize>,
}

impl OneHot {
    pub fn new<I, S>(vocabulary: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = vocabulary.into_iter().map(Into::into).collect();
        OneHot {
            index: sorted.into_iter().enumerate().map(|(i, t)| (t, i)).collect(),
        }
    }

    /// Vocabulary taken from every token of `seqs`.
    pub fn fit<'a, I>(seqs: I) -> Self
    where
        I: IntoIterator<Item = &'a TokenSequence>,
    {
        Self::new(seqs.into_iter().flat_map(|s| s.tokens().iter().cloned()))
    }
}

impl EmbeddingProvider for OneHot {
    fn dim(&self) -> usize {
        self.index.len()
    }

    fn embed(&self, token: &str) -> Result<Vec<f64>> {
        let i = *self
            .index
            .get(token)
            .ok_or_else(|| Error::param(format!("token {token:?} not in one-hot vocabulary")))?;
        let mut v = vec![0.0; self.index.len()];
        v[i] = 1.0;
        Ok(v)
    }
}

/// Pseudo-random Gaussian vector per token, seeded from SHA-256 of the seed
/// and the token bytes.
#[derive(Debug, Clone, Copy)]
pub struct HashProjection {
    dim: usize,
    seed: u64,
}

impl HashProjection {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("embedding dimension must be positive"));
        }
        Ok(HashProjection { dim, seed })
    }
}

impl EmbeddingProvider for HashProjection {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, token: &str) -> Result<Vec<f64>> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut rng = SeededRng::new(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
        Ok((0..self.dim).map(|_| rng.standard_normal()).collect())
    }
}

/// Embeddings loaded from a text table.
///
/// One token per line followed by its components, separated by whitespace
/// (the common GloVe layout). Blank lines and lines starting with `#` are
/// skipped. Tokens absent from the table fall back to a [`HashProjection`] of
/// the same dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    fallback: HashProjection,
}

impl EmbeddingTable {
    pub fn parse(text: &str, fallback_seed: u64) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line");
            let values = parts
                .map(|p| p.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::format(format!("embedding table line {lineno}: bad number")))?;
            let d = *dim.get_or_insert(values.len());
            if values.is_empty() || values.len() != d {
                return Err(Error::format(format!(
                    "embedding table line {lineno}: expected {d} components, found {}",
                    values.len()
                )));
            }
            if vectors.insert(token.to_string(), values).is_some() {
                return Err(Error::format(format!(
                    "embedding table line {lineno}: duplicate token {token:?}"
                )));
            }
        }
        let dim = dim.ok_or_else(|| Error::format("embedding table is empty"))?;
        Ok(EmbeddingTable {
            dim,
            vectors,
            fallback: HashProjection::new(dim, fallback_seed)?,
        })
    }

    pub fn load(path: impl AsRef<Path>, fallback_seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse(&text, fallback_seed)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, token: &str) -> Result<Vec<f64>> {
        match self.vectors.get(token) {
            Some(v) => Ok(v.clone()),
            None => self.fallback.embed(token),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_is_orthonormal() {
        let e = OneHot::new(["b", "a", "c", "a"]);
        assert_eq!(e.dim(), 3);
        assert_eq!(e.embed("a").unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(e.embed("c").unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(e.embed("zzz").is_err());
    }

    #[test]
    fn hash_projection_is_stable() {
        let e = HashProjection::new(5, 9).unwrap();
        assert_eq!(e.embed("road").unwrap(), e.embed("road").unwrap());
        assert_ne!(e.embed("road").unwrap(), e.embed("roads").unwrap());
        assert_ne!(
            e.embed("road").unwrap(),
            HashProjection::new(5, 10).unwrap().embed("road").unwrap()
        );
        assert!(HashProjection::new(0, 0).is_err());
    }

    #[test]
    fn table_parsing() {
        let t = EmbeddingTable::parse("# demo\nroad 1 0\n\nriver 0 2.5\n", 0).unwrap();
        assert_eq!((t.dim(), t.len()), (2, 2));
        assert_eq!(t.embed("river").unwrap(), vec![0.0, 2.5]);
        assert_eq!(t.embed("lake").unwrap().len(), 2);
        assert!(matches!(EmbeddingTable::parse("a 1 2\nb 1\n", 0), Err(Error::Format(m)) if m.contains("line 2")));
        assert!(EmbeddingTable::parse("a 1 x\n", 0).is_err());
        assert!(EmbeddingTable::parse("a 1\na 2\n", 0).is_err());
        assert!(EmbeddingTable::parse("", 0).is_err());
    }

    #[test]
    fn zero_vector_rejected_at_normalization() {
        let t = EmbeddingTable::parse("z 0 0\n", 0).unwrap();
        assert!(matches!(unit_embedding(&t, "z"), Err(Error::Numeric(_))));
    }
}
