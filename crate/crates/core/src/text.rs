//! Text side: category vocabularies, prompt templates and frozen text
//! embeddings.
//!
//! No text encoder is trained or run here. Embeddings come either from a
//! `SEDE` file exported offline or from a deterministic hash of each prompt.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::pnm::with_path;
use crate::io::{self, create, expect_eof, expect_magic, open, read_f32s, read_u32, to_u32, write_f32s, write_u32};
use crate::tensor::{Real, Tensor};

pub const PLACEHOLDER: &str = "{}";
pub const SEDE_MAGIC: &[u8; 4] = b"SEDE";

/// Templates used when none are given.
pub const DEFAULT_TEMPLATES: [&str; 4] = ["a photo of a {}.", "a photo of the {}.", "a close-up photo of a {}.", "there is a {} in the scene."];

/// Non-empty list of unique category names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryVocabulary {
    names: Vec<String>,
}

impl CategoryVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("category vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate category name `{dup}`")));
        }
        Ok(Self { names })
    }

    /// One name per non-empty line.
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::new(io::read_lines(path)?)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// `N × P` prompts, row-major by category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    prompts: Vec<String>,
    templates: usize,
}

impl PromptSet {
    pub fn num_categories(&self) -> usize {
        self.prompts.len() / self.templates
    }

    pub fn num_templates(&self) -> usize {
        self.templates
    }

    pub fn get(&self, category: usize, template: usize) -> &str {
        &self.prompts[category * self.templates + template]
    }

    pub fn as_slice(&self) -> &[String] {
        &self.prompts
    }
}

/// Fills every template's single `{}` with every category name.
pub fn expand_prompts<S: AsRef<str>>(vocab: &CategoryVocabulary, templates: &[S]) -> Result<PromptSet> {
    if templates.is_empty() {
        return Err(Error::InvalidArgument("template list is empty".into()));
    }
    for (index, t) in templates.iter().enumerate() {
        let found = t.as_ref().matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(Error::Template { index, found });
        }
    }
    let prompts = vocab.names().iter().flat_map(|name| templates.iter().map(move |t| t.as_ref().replacen(PLACEHOLDER, name, 1))).collect();
    Ok(PromptSet { prompts, templates: templates.len() })
}

/// Frozen embeddings `E[N, P, D_t]`. The tensor never requires grad.
#[derive(Clone, Debug)]
pub struct TextEmbeddings<T: Real = f32> {
    e: Tensor<T>,
}

impl<T: Real> TextEmbeddings<T> {
    pub fn new(e: Tensor<T>) -> Result<Self> {
        if e.rank() != 3 || e.numel() == 0 {
            return Err(Error::shape("text embeddings", "[N, P, D_t]", format!("{:?}", e.shape())));
        }
        Ok(Self { e: e.detach() })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.e
    }

    pub fn num_categories(&self) -> usize {
        self.e.shape()[0]
    }

    pub fn num_templates(&self) -> usize {
        self.e.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.e.shape()[2]
    }

    pub fn cast<U: Real>(&self) -> TextEmbeddings<U> {
        TextEmbeddings { e: self.e.cast() }
    }

    /// Categories `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        crate::tensor::no_grad(|| crate::tensor::index_select(&self.e, 0, indices)).map(|e| Self { e })
    }
}

/// Where embeddings come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingProvider {
    /// Hash each prompt into `dim` values and L2-normalise.
    Synthetic { seed: u64, dim: usize },
    /// A `SEDE` file whose rows correspond to the prompt set.
    File(std::path::PathBuf),
}

fn fnv1a(seed: u64, text: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    seed.to_le_bytes().iter().chain(text.as_bytes()).fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Deterministic unit vector for `prompt`.
pub fn synthetic_vector(seed: u64, prompt: &str, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, prompt));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

pub fn embed_texts(prompts: &PromptSet, provider: &EmbeddingProvider) -> Result<TextEmbeddings<f32>> {
    let (n, p) = (prompts.num_categories(), prompts.num_templates());
    match provider {
        EmbeddingProvider::Synthetic { seed, dim } => {
            if *dim == 0 {
                return Err(Error::InvalidArgument("embedding width must be positive".into()));
            }
            let data = prompts.as_slice().iter().flat_map(|s| synthetic_vector(*seed, s, *dim)).collect();
            TextEmbeddings::new(Tensor::new(&[n, p, *dim], data)?)
        }
        EmbeddingProvider::File(path) => {
            let e = read_embeddings(path)?;
            if (e.num_categories(), e.num_templates()) != (n, p) {
                return Err(Error::mismatch(
                    format!("embedding rows in {}", path.display()),
                    format!("{n} x {p}"),
                    format!("{} x {}", e.num_categories(), e.num_templates()),
                ));
            }
            Ok(e)
        }
    }
}

pub fn encode_embeddings(w: &mut impl Write, e: &TextEmbeddings<f32>) -> Result<()> {
    w.write_all(SEDE_MAGIC)?;
    for d in e.tensor().shape() {
        write_u32(w, to_u32("embedding extent", *d)?)?;
    }
    write_f32s(w, e.tensor().data().iter().copied())
}

pub fn decode_embeddings(r: &mut impl Read) -> Result<TextEmbeddings<f32>> {
    expect_magic(r, SEDE_MAGIC)?;
    let n = read_u32(r)? as usize;
    let p = read_u32(r)? as usize;
    let d = read_u32(r)? as usize;
    let values = read_f32s(r, n * p * d)?;
    expect_eof(r)?;
    TextEmbeddings::new(Tensor::new(&[n, p, d], values)?)
}

pub fn write_embeddings(path: &Path, e: &TextEmbeddings<f32>) -> Result<()> {
    let mut w = create(path)?;
    encode_embeddings(&mut w, e)?;
    w.flush().map_err(|err| Error::io(path, err))
}

pub fn read_embeddings(path: &Path) -> Result<TextEmbeddings<f32>> {
    decode_embeddings(&mut open(path)?).map_err(|e| with_path(path, e))
}

/// Reads a template file and checks each line has one placeholder.
pub fn read_templates(path: &Path) -> Result<Vec<String>> {
    let t = io::read_lines(path)?;
    for (index, line) in t.iter().enumerate() {
        let found = line.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(Error::Template { index, found });
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(names: &[&str]) -> CategoryVocabulary {
        CategoryVocabulary::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn fills_placeholder() {
        let s = expand_prompts(&vocab(&["cat"]), &["a photo of a {}"]).unwrap();
        assert_eq!(s.get(0, 0), "a photo of a cat");
    }

    #[test]
    fn row_major_by_category() {
        let s = expand_prompts(&vocab(&["a", "b", "c"]), &["x {}", "{} y"]).unwrap();
        assert_eq!(s.as_slice(), ["x a", "a y", "x b", "b y", "x c", "c y"]);
    }

    #[test]
    fn template_errors_name_the_index() {
        let v = vocab(&["a"]);
        assert!(matches!(expand_prompts::<&str>(&v, &[]), Err(Error::InvalidArgument(_))));
        assert!(matches!(expand_prompts(&v, &["{}", "none"]), Err(Error::Template { index: 1, found: 0 })));
        assert!(matches!(expand_prompts(&v, &["{} {}"]), Err(Error::Template { index: 0, found: 2 })));
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_empty() {
        assert!(CategoryVocabulary::new(vec![]).is_err());
        assert!(CategoryVocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_unit() {
        let a = synthetic_vector(3, "a photo of a cat", 64);
        assert_eq!(a, synthetic_vector(3, "a photo of a cat", 64));
        assert_ne!(a, synthetic_vector(4, "a photo of a cat", 64));
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn file_provider_checks_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.sede");
        let prompts = expand_prompts(&vocab(&["a", "b"]), &["{}"]).unwrap();
        let e = embed_texts(&prompts, &EmbeddingProvider::Synthetic { seed: 1, dim: 8 }).unwrap();
        write_embeddings(&path, &e).unwrap();
        let back = embed_texts(&prompts, &EmbeddingProvider::File(path.clone())).unwrap();
        assert_eq!(back.tensor().data(), e.tensor().data());
        let three = expand_prompts(&vocab(&["a", "b", "c"]), &["{}"]).unwrap();
        let err = embed_texts(&three, &EmbeddingProvider::File(path)).unwrap_err();
        assert!(err.to_string().contains("3 x 1"), "{err}");
    }
}
