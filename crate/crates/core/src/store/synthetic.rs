use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EmbeddingRecords, EmbeddingStore, GeneratorInfo, StoreManifest, VideoEntry, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of a seeded stand-in for encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_classes: usize,
    pub videos_per_class: usize,
    pub frames: usize,
    pub dim: usize,
    /// Length of the class direction relative to the frame noise.
    pub class_sep: f64,
    /// Mix between the class direction (1) and an independent direction (0).
    pub text_corr: f64,
    pub n_temp: usize,
    /// Per-coordinate standard deviation of frame noise; `None` means
    /// `1/√dim`, i.e. noise of expected unit norm like `μ_c`.
    pub noise_std: Option<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 10,
            videos_per_class: 20,
            frames: 8,
            dim: 64,
            class_sep: 4.0,
            text_corr: 0.9,
            n_temp: 4,
            noise_std: None,
        }
    }
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Generates a store where every class has a unit direction `μ_c`;
/// frames are `normalize(class_sep·μ_c + σ·ε)` and texts are
/// `normalize(text_corr·μ_c + (1 − text_corr)·g/√dim)` with `ε, g ~ N(0, I)`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingStore> {
    if !(spec.class_sep >= 0.0) || !spec.class_sep.is_finite() {
        return Err(Error::Config(format!("class_sep must be ≥ 0, got {}", spec.class_sep)));
    }
    if !(0.0..=1.0).contains(&spec.text_corr) {
        return Err(Error::Config(format!("text_corr must lie in [0, 1], got {}", spec.text_corr)));
    }
    if spec.n_classes == 0 || spec.videos_per_class == 0 {
        return Err(Error::Config("need at least one class and one video per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (l, d) = (spec.frames, spec.dim);

    let text_noise = 1.0 / (d as f64).sqrt();
    let noise_std = spec.noise_std.unwrap_or(text_noise);
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::Config(format!("noise_std must be ≥ 0, got {noise_std}")));
    }
    let directions: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| normalized(gaussian(d, &mut rng))).collect();
    let classes: Vec<String> = (0..spec.n_classes).map(|c| format!("class_{c:03}")).collect();

    let mut records = EmbeddingRecords::default();
    let mut videos = Vec::with_capacity(spec.n_classes * spec.videos_per_class);
    for (c, mu) in directions.iter().enumerate() {
        for k in 0..spec.videos_per_class {
            let id = format!("c{c:03}_v{k:04}");
            let mut data = Vec::with_capacity(l * d);
            for _ in 0..l {
                let noise = gaussian(d, &mut rng);
                let frame = normalized(mu.iter().zip(noise).map(|(m, e)| spec.class_sep * m + noise_std * e).collect());
                data.extend(frame.into_iter().map(|x| x as f32));
            }
            records.visual.insert(id.clone(), Tensor::from_parts(vec![l, d], data));
            videos.push(VideoEntry { id, class: c, split: None });
        }
    }
    for t in 0..spec.n_temp {
        for (c, mu) in directions.iter().enumerate() {
            let g = gaussian(d, &mut rng);
            let text = normalized(
                mu.iter()
                    .zip(g)
                    .map(|(m, x)| spec.text_corr * m + (1.0 - spec.text_corr) * text_noise * x)
                    .collect(),
            );
            records.text.insert((t, c), text.into_iter().map(|x| x as f32).collect());
        }
    }

    let manifest = StoreManifest {
        format_version: MANIFEST_VERSION,
        dataset_name: format!("synthetic-{}", spec.seed),
        frames: l,
        dim: d,
        n_temp: spec.n_temp,
        classes,
        templates: (0..spec.n_temp).map(|t| format!("template {t}:")).collect(),
        generator: Some(GeneratorInfo {
            seed: spec.seed,
            class_sep: spec.class_sep,
            text_corr: spec.text_corr,
            noise_std,
        }),
        videos,
    };
    EmbeddingStore::new(manifest, records)
}
