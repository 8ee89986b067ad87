//! Samples, dataset directories and a synthetic scene generator.
//!
//! A dataset directory holds `images/XXXX.ppm`, `labels/XXXX.pgm` (or
//! `.sedl` for large vocabularies), `categories.txt` and `templates.txt`.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ImageTensor, ENCODER_STRIDE};
use crate::error::{Error, Result};
use crate::io::labels::{read_labels, write_labels, LabelMap};
use crate::io::pnm::{read_ppm, write_ppm, RgbImage};
use crate::io::read_lines;
use crate::tensor::{Real, IGNORE_LABEL};
use crate::text::{read_templates, CategoryVocabulary, DEFAULT_TEMPLATES};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(image: RgbImage, label: LabelMap) -> Result<Self> {
        if (image.height, image.width) != (label.height, label.width) {
            return Err(Error::mismatch("label extents", format!("{}x{}", image.height, image.width), format!("{}x{}", label.height, label.width)));
        }
        Ok(Self { image, label })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        Self { image: self.image.crop(top, left, h, w), label: self.label.crop(top, left, h, w) }
    }

    /// Uniformly placed `crop × crop` window. Errors if the sample is smaller.
    pub fn random_crop(&self, crop: usize, rng: &mut impl Rng) -> Result<Self> {
        if self.height() < crop || self.width() < crop {
            return Err(Error::InvalidArgument(format!("sample {}x{} is smaller than crop {crop}", self.height(), self.width())));
        }
        let top = rng.gen_range(0..=self.height() - crop);
        let left = rng.gen_range(0..=self.width() - crop);
        Ok(self.crop(top, left, crop, crop))
    }

    pub fn image_tensor<T: Real>(&self) -> Result<ImageTensor<T>> {
        ImageTensor::from_rgb8(self.height(), self.width(), &self.image.data)
    }

    /// Checks label values against the vocabulary size.
    pub fn validate(&self, num_categories: usize) -> Result<()> {
        match self.label.values.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= num_categories) {
            Some(v) => Err(Error::InvalidArgument(format!("label {v} out of range for {num_categories} categories"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub names: Vec<String>,
    pub vocab: CategoryVocabulary,
    pub templates: Vec<String>,
}

fn sample_stems(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join("images");
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn label_path(dir: &Path, stem: &str) -> PathBuf {
    let pgm = dir.join("labels").join(format!("{stem}.pgm"));
    if pgm.exists() {
        pgm
    } else {
        dir.join("labels").join(format!("{stem}.sedl"))
    }
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = CategoryVocabulary::from_file(&dir.join("categories.txt"))?;
        let tpath = dir.join("templates.txt");
        let templates = if tpath.exists() { read_templates(&tpath)? } else { DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect() };
        let mut samples = Vec::new();
        let mut names = Vec::new();
        for stem in sample_stems(dir)? {
            let image = read_ppm(&dir.join("images").join(format!("{stem}.ppm")))?;
            let lpath = label_path(dir, &stem);
            let label = read_labels(&lpath)?;
            let s = Sample::new(image, label).map_err(|e| Error::Format(format!("{}: {e}", lpath.display())))?;
            s.validate(vocab.len()).map_err(|e| Error::Format(format!("{}: {e}", lpath.display())))?;
            samples.push(s);
            names.push(stem);
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!("no images found in {}", dir.join("images").display())));
        }
        Ok(Self { samples, names, vocab, templates })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let write_lines = |name: &str, lines: &[String]| {
            let path = dir.join(name);
            std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))
        };
        write_lines("categories.txt", self.vocab.names())?;
        write_lines("templates.txt", &self.templates)?;
        let n = self.vocab.len();
        let ext = if n <= 255 { "pgm" } else { "sedl" };
        for (s, stem) in self.samples.iter().zip(&self.names) {
            write_ppm(&dir.join("images").join(format!("{stem}.ppm")), &s.image)?;
            write_labels(&dir.join("labels").join(format!("{stem}.{ext}")), &s.label, n)?;
        }
        Ok(())
    }
}

/// Reads a category list file; shared by the CLI subcommands.
pub fn read_categories(path: &Path) -> Result<CategoryVocabulary> {
    CategoryVocabulary::new(read_lines(path)?)
}

/// Scenes tiled with 32-pixel blocks, one category per block. Each category
/// has a fixed colour; pixels get uniform noise on top.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScenes {
    pub size: usize,
    /// Categories drawn for blocks; they are `0..present`.
    pub present: usize,
    pub noise: u8,
    pub seed: u64,
}

impl SyntheticScenes {
    pub fn new(size: usize, present: usize, seed: u64) -> Result<Self> {
        if size == 0 || !size.is_multiple_of(ENCODER_STRIDE) {
            return Err(Error::InvalidArgument(format!("scene size {size} is not a multiple of {ENCODER_STRIDE}")));
        }
        if present == 0 || present > IGNORE_LABEL as usize {
            return Err(Error::InvalidArgument(format!("invalid category count {present}")));
        }
        Ok(Self { size, present, noise: 12, seed })
    }

    /// Base colour of category `c`: a point of a 6×6×6 lattice, visited with
    /// a stride so that consecutive categories differ strongly. Any two of
    /// the first 216 categories differ by at least 44 in some channel.
    pub fn colour(c: usize) -> [u8; 3] {
        const LEVELS: [u8; 6] = [20, 64, 108, 152, 196, 240];
        let i = (c * 97 + 43) % 216;
        [LEVELS[i / 36], LEVELS[(i / 6) % 6], LEVELS[i % 6]]
    }

    pub fn generate(&self, index: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let blocks = self.size / ENCODER_STRIDE;
        let cats: Vec<u16> = (0..blocks * blocks).map(|_| rng.gen_range(0..self.present) as u16).collect();
        let mut data = Vec::with_capacity(self.size * self.size * 3);
        let mut values = Vec::with_capacity(self.size * self.size);
        let noise = self.noise as i16;
        for y in 0..self.size {
            for x in 0..self.size {
                let c = cats[(y / ENCODER_STRIDE) * blocks + x / ENCODER_STRIDE];
                values.push(c);
                for ch in Self::colour(c as usize) {
                    let d = if noise > 0 { rng.gen_range(-noise..=noise) } else { 0 };
                    data.push((ch as i16 + d).clamp(0, 255) as u8);
                }
            }
        }
        Sample { image: RgbImage { width: self.size, height: self.size, data }, label: LabelMap { height: self.size, width: self.size, values } }
    }

    pub fn samples(&self, count: usize) -> Vec<Sample> {
        (0..count as u64).map(|i| self.generate(i)).collect()
    }
}

/// Category names `class000, class001, ...`.
pub fn synthetic_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i:03}")).collect()
}
