use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Bytes per CIFAR-10 binary record: one label byte, then 32×32 R, G, B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Labeled images in `[0, 1]` with per-channel normalization constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
    /// Per-channel mean and standard deviation over `images`, computed once.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        let (n, c, _, _) = images.dims4("dataset")?;
        if labels.len() != n {
            return Err(Error::Dataset(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside {num_classes} classes")));
        }
        let (mean, std) = if n == 0 {
            (vec![0.0; c], vec![1.0; c])
        } else {
            let (m, v) = crate::tensor::kernels::channel_stats(&images)?;
            (m.iter().map(|&m| m as f32).collect(), v.iter().map(|&v| v.sqrt() as f32).collect())
        };
        Ok(Dataset { images, labels, num_classes, split: split.into(), mean, std })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image(&self, i: usize) -> &[f32] {
        let per: usize = self.image_shape().iter().product();
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// Normalized batch `(x − mean) / std` for the given sample indices.
    pub fn batch<T: Element>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let hw = h * w;
        let mut data = Vec::with_capacity(idx.len() * c * hw);
        for &i in idx {
            for (ch, plane) in self.image(i).chunks(hw).enumerate() {
                let (m, s) = (self.mean[ch], self.std[ch].max(1e-6));
                data.extend(plane.iter().map(|&v| T::from_f32((v - m) / s).unwrap()));
            }
        }
        let x = Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Copy of the selected samples, keeping this set's normalization.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let [c, h, w] = self.image_shape();
        let data = idx.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        Dataset {
            images: Tensor::new(vec![idx.len(), c, h, w], data).expect("subset shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split.clone(),
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

/// Decode CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Dataset(format!("record {i}: label byte {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

/// Encode images in `[0, 1]` as CIFAR-10 records, rounding to the nearest byte.
pub fn encode_cifar10(images: &Tensor<f32>, labels: &[usize]) -> Result<Vec<u8>> {
    let (n, c, h, w) = images.dims4("encode_cifar10")?;
    if (c, h, w) != (3, 32, 32) || labels.len() != n || labels.iter().any(|&l| l > 9) {
        return Err(Error::Dataset("expected [N, 3, 32, 32] images with labels in 0..=9".into()));
    }
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for (i, img) in images.data().chunks(CIFAR_RECORD - 1).enumerate() {
        out.push(labels[i] as u8);
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

/// Load a CIFAR-10 binary file, or every `*.bin` file of a directory in
/// name order. The split tag is the file stem (or `"train"` for a directory).
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let (files, split): (Vec<PathBuf>, String) = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin") && !p.ends_with("test_batch.bin"))
            .collect();
        v.sort();
        (v, "train".into())
    } else {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        (vec![path.to_path_buf()], stem)
    };
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .bin files in {}", path.display())));
    }
    let mut bytes = Vec::new();
    for f in &files {
        let b = fs::read(f)?;
        if b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                f.display(),
                b.len()
            )));
        }
        bytes.extend(b);
    }
    let (images, labels) = parse_cifar10(&bytes)?;
    Dataset::new(images, labels, 10, split)
}

/// Class-conditional oriented gratings with pixel noise: class `c` of `k`
/// has stripes at angle `π·c/k`, random phase and spatial frequency, and a
/// random per-channel contrast. The same seed always gives the same set.
pub fn synth_dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || size == 0 {
        return Err(Error::Dataset("synthetic set needs at least one class and pixel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).unwrap();
    let n = classes * per_class;
    let hw = size * size;
    let mut data = Vec::with_capacity(n * 3 * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let theta = std::f64::consts::PI * c as f64 / classes as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        let cycles = rng.gen_range(2.5..4.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let gains: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
        for g in gains {
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * ct + y as f64 * st) / size as f64;
                    let v = 0.5 + 0.4 * g * (std::f64::consts::TAU * cycles * u + phase).sin() + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 3, size, size], data)?, labels, classes, "synth")
}
