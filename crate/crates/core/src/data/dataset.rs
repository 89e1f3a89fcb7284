//! In-memory datasets and their on-disk directory form.
//!
//! ```text
//! DIR/manifest.txt        header, generator config, one seed per line
//! DIR/image_NNNNN.ssat    [H, W, 3] tensor records
//! DIR/label_NNNNN.pgm     8-bit P5 label maps
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;

use super::synth::{generate, SynthConfig};

pub const DATASET_HEADER: &str = "ssa-synth-dataset 1";

/// One image/label pair as consumed by training.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub seed: u64,
    pub image: Tensor<T>,
    pub labels: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub config: SynthConfig,
    pub samples: Vec<Sample<T>>,
}

pub fn image_file(i: usize) -> String {
    format!("image_{i:05}.ssat")
}

pub fn label_file(i: usize) -> String {
    format!("label_{i:05}.pgm")
}

/// Seed of sample `index` in a dataset rooted at `base_seed`.
pub fn sample_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_add(index as u64)
}

/// Held-out membership: every sample whose seed is a multiple of five (20 %).
pub fn is_held_out(seed: u64) -> bool {
    seed.is_multiple_of(5)
}

impl<T: Scalar> Dataset<T> {
    /// Generates `count` samples, spreading the work over `threads` workers.
    /// The result does not depend on `threads`.
    pub fn generate(config: &SynthConfig, base_seed: u64, count: usize, threads: usize) -> Result<Self> {
        config.validate()?;
        let seeds: Vec<u64> = (0..count).map(|i| sample_seed(base_seed, i)).collect();
        let threads = threads.max(1).min(count.max(1));
        let chunk = count.div_ceil(threads).max(1);
        let parts: Vec<Result<Vec<Sample<T>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&seed| {
                                let s = generate::<T>(config, seed)?;
                                Ok(Sample {
                                    seed,
                                    image: s.image,
                                    labels: s.labels,
                                })
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generator thread")).collect()
        });
        let mut samples = Vec::with_capacity(count);
        for part in parts {
            samples.extend(part?);
        }
        Ok(Self {
            config: config.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(train, held_out)` indices.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.samples.len()).partition(|&i| !is_held_out(self.samples[i].seed))
    }

    pub fn manifest_text(&self) -> String {
        let c = &self.config;
        let mut s = format!("{DATASET_HEADER}\n");
        let _ = writeln!(s, "height={}", c.height);
        let _ = writeln!(s, "width={}", c.width);
        let _ = writeln!(s, "classes={}", c.classes);
        let _ = writeln!(s, "shapes_per_image={}", c.shapes_per_image);
        let _ = writeln!(s, "noise_sigma={}", c.noise_sigma);
        let _ = writeln!(s, "color_jitter={}", c.color_jitter);
        let _ = writeln!(s, "count={}", self.samples.len());
        s.push_str("seeds:\n");
        for sample in &self.samples {
            let _ = writeln!(s, "{}", sample.seed);
        }
        s
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            save_tensor(dir.join(image_file(i)), &s.image)?;
            s.labels.save_pgm(dir.join(label_file(i)))?;
        }
        fs::write(dir.join("manifest.txt"), self.manifest_text())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let (config, seeds) = parse_manifest(&text)?;
        let mut samples = Vec::with_capacity(seeds.len());
        for (i, seed) in seeds.into_iter().enumerate() {
            let image: Tensor<T> = load_tensor(dir.join(image_file(i)))?;
            let labels = LabelMask::load_pgm(dir.join(label_file(i)))?;
            if image.shape() != [config.height, config.width, 3]
                || labels.height() != config.height
                || labels.width() != config.width
            {
                return Err(Error::format(0, format!("sample {i} does not match the manifest geometry")));
            }
            labels.validate(config.classes, 255)?;
            samples.push(Sample { seed, image, labels });
        }
        Ok(Self { config, samples })
    }

    /// Indices of samples that differ from a fresh regeneration of their seed.
    pub fn inconsistent_samples(&self) -> Result<Vec<usize>> {
        let mut bad = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            let fresh = generate::<T>(&self.config, s.seed)?;
            if fresh.image != s.image || fresh.labels != s.labels {
                bad.push(i);
            }
        }
        Ok(bad)
    }
}

fn parse_manifest(text: &str) -> Result<(SynthConfig, Vec<u64>)> {
    let mut lines = text.lines();
    let mut offset = 0u64;
    let mut advance = |line: &str| {
        let at = offset;
        offset += line.len() as u64 + 1;
        at
    };
    match lines.next() {
        Some(l) if l == DATASET_HEADER => {
            advance(l);
        }
        other => {
            return Err(Error::format(0, format!("expected {DATASET_HEADER:?}, found {other:?}")));
        }
    }
    let mut config = SynthConfig::default();
    let mut count = None;
    let mut seeds = Vec::new();
    let mut in_seeds = false;
    for line in lines {
        let at = advance(line);
        if line.is_empty() {
            continue;
        }
        if in_seeds {
            seeds.push(
                line.parse::<u64>()
                    .map_err(|_| Error::format(at, format!("bad seed {line:?}")))?,
            );
            continue;
        }
        if line == "seeds:" {
            in_seeds = true;
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(at, format!("expected key=value, found {line:?}")))?;
        let bad = || Error::format(at, format!("cannot parse {k}={v}"));
        match k {
            "height" => config.height = v.parse().map_err(|_| bad())?,
            "width" => config.width = v.parse().map_err(|_| bad())?,
            "classes" => config.classes = v.parse().map_err(|_| bad())?,
            "shapes_per_image" => config.shapes_per_image = v.parse().map_err(|_| bad())?,
            "noise_sigma" => config.noise_sigma = v.parse().map_err(|_| bad())?,
            "color_jitter" => config.color_jitter = v.parse().map_err(|_| bad())?,
            "count" => count = Some(v.parse::<usize>().map_err(|_| bad())?),
            _ => return Err(Error::format(at, format!("unknown manifest key {k:?}"))),
        }
    }
    if count != Some(seeds.len()) {
        return Err(Error::format(
            offset,
            format!("manifest count {count:?} does not match {} listed seeds", seeds.len()),
        ));
    }
    config.validate()?;
    Ok((config, seeds))
}
