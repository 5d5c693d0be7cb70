//! Synthetic co-registered multimodal images with controlled missingness.
//!
//! Each sample starts from one latent tissue map: a soft-edged blob scene
//! over a jittered background. Four fixed contrast curves turn that map into
//! four modalities that share geometry but disagree in intensity, one of
//! them speckled. Inputs additionally get a per-sample affine intensity
//! jitter; the canonical targets do not, so synthesis is judged against a
//! stable reference. Missingness applies to the training split only.

use crate::error::{Error, Result};
use crate::missingness::Indicator;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// The number of modalities the built-in contrast curves cover.
pub const MAX_MODALITIES: usize = 4;

const CLASS_LEVELS: [f64; 3] = [0.4, 0.65, 0.9];
const SPECKLE_STD: f64 = 0.12;

/// Binary 8-bit PGM input and output.
pub mod pgm {
    use super::*;
    use std::io::{Read, Write};

    pub fn write(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "pgm payload of {} bytes for {width}x{height}",
                data.len()
            )));
        }
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{width} {height}\n255\n")?;
        f.write_all(data)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        let mut pos = 0usize;
        let mut token = |raw: &[u8]| -> Result<String> {
            // Skip whitespace and # comments between header fields.
            loop {
                while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < raw.len() && raw[pos] == b'#' {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::parse("truncated pgm header"));
            }
            Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
        };
        if token(&raw)? != "P5" {
            return Err(Error::parse("not a binary pgm file"));
        }
        let width: usize = token(&raw)?.parse().map_err(|_| Error::parse("bad pgm width"))?;
        let height: usize = token(&raw)?.parse().map_err(|_| Error::parse("bad pgm height"))?;
        let maxval: usize = token(&raw)?.parse().map_err(|_| Error::parse("bad pgm maxval"))?;
        if maxval != 255 {
            return Err(Error::parse(format!("unsupported pgm maxval {maxval}")));
        }
        pos += 1; // single whitespace byte after maxval
        let need = width * height;
        if raw.len() < pos + need {
            return Err(Error::parse("pgm payload shorter than header promises"));
        }
        Ok((width, height, raw[pos..pos + need].to_vec()))
    }

    /// Quantizes unit-range intensities to one byte per pixel.
    pub fn quantize(image: &Tensor) -> Vec<u8> {
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Maps bytes back to unit-range intensities with shape `[1, h, w]`.
    pub fn dequantize(width: usize, height: usize, data: &[u8]) -> Result<Tensor> {
        Tensor::new(
            vec![1, height, width],
            data.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

/// Which split a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Generation settings for one dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub modalities: usize,
    pub side: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    /// Indicator table for the training split; weights must sum to one and
    /// every indicator must observe at least one modality.
    #[serde(rename = "missingness_table")]
    pub missingness: Vec<(Indicator, f64)>,
}

impl DatasetConfig {
    pub fn desk(seed: u64) -> Self {
        DatasetConfig {
            modalities: 4,
            side: 32,
            train: 240,
            val: 24,
            test: 24,
            seed,
            missingness: Self::default_missingness(),
        }
    }

    /// The default table keeps modality 0 always present and makes complete
    /// samples a small minority.
    pub fn default_missingness() -> Vec<(Indicator, f64)> {
        let ind = |s: &str| s.parse::<Indicator>().expect("table literals are valid");
        vec![
            (ind("1111"), 0.12),
            (ind("1000"), 0.16),
            (ind("1100"), 0.13),
            (ind("1010"), 0.13),
            (ind("1001"), 0.13),
            (ind("1110"), 0.11),
            (ind("1101"), 0.11),
            (ind("1011"), 0.11),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities == 0 || self.modalities > MAX_MODALITIES {
            return Err(Error::config(format!(
                "modalities must be 1..={MAX_MODALITIES}, got {}",
                self.modalities
            )));
        }
        if self.side < 8 || self.side % 4 != 0 {
            return Err(Error::config(format!(
                "side must be at least 8 and divisible by 4, got {}",
                self.side
            )));
        }
        if self.missingness.is_empty() {
            return Err(Error::config("missingness_table is empty"));
        }
        let mut total = 0.0;
        for (ind, w) in &self.missingness {
            if ind.len() != self.modalities {
                return Err(Error::config(format!(
                    "missingness_table indicator {ind} does not cover {} modalities",
                    self.modalities
                )));
            }
            if ind.is_empty() {
                return Err(Error::config("missingness_table contains an empty indicator"));
            }
            if !(*w > 0.0) {
                return Err(Error::config(format!(
                    "missingness_table has a non-positive weight {w}"
                )));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "missingness_table weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Per-modality affine intensity jitter applied to inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineJitter {
    pub scale: f64,
    pub shift: f64,
}

/// Everything generated for one subject, before clipping.
#[derive(Clone, Debug)]
pub struct SampleParts {
    /// Latent tissue map, shape `[1, side, side]`.
    pub tissue: Tensor,
    /// Jitter-free targets, one per modality.
    pub canonical: Vec<Tensor>,
    /// Jittered inputs, one per modality.
    pub inputs: Vec<Tensor>,
    pub jitter: Vec<AffineJitter>,
}

/// One dataset entry; unobserved modalities carry no image at all.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub indicator: Indicator,
    pub images: Vec<Option<Tensor>>,
}

/// An in-memory dataset plus the config that produced it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

fn per_sample_rng(seed: u64, idx: u64) -> ChaCha8Rng {
    // SplitMix-style stream separation so samples are independent of count.
    let mut s = seed ^ idx.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    s ^= s >> 30;
    s = s.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    s ^= s >> 27;
    ChaCha8Rng::seed_from_u64(s)
}

/// The fixed contrast curve for each modality as a function of tissue value.
fn contrast(modality: usize, t: f64) -> f64 {
    match modality {
        0 => 0.2 + 0.6 * t,
        1 => 0.9 - 0.7 * t,
        2 => 0.1 + 0.8 * t * t,
        3 => 0.05 + 0.9 * t.sqrt(),
        _ => unreachable!("modalities are validated to {MAX_MODALITIES}"),
    }
}

/// Generates the full parts for sample `idx` deterministically.
pub fn gen_sample(cfg: &DatasetConfig, idx: usize) -> Result<SampleParts> {
    cfg.validate()?;
    let mut rng = per_sample_rng(cfg.seed, idx as u64);
    let side = cfg.side;
    let scale = side as f64 / 32.0;

    let background: f64 = rng.gen_range(0.1..0.2);
    let mut tissue = Tensor::filled(&[1, side, side], background);

    let blob_count = rng.gen_range(2..=4usize);
    for _ in 0..blob_count {
        let cx = rng.gen_range(0.15 * side as f64..0.85 * side as f64);
        let cy = rng.gen_range(0.15 * side as f64..0.85 * side as f64);
        let radius = rng.gen_range(3.0..8.0) * scale;
        let class = rng.gen_range(0..CLASS_LEVELS.len());
        let level = CLASS_LEVELS[class];
        let edge = 1.2 * scale;
        let data = tissue.data_mut();
        for y in 0..side {
            for x in 0..side {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let a = 1.0 / (1.0 + ((d - radius) / edge).exp());
                let i = y * side + x;
                data[i] = data[i] * (1.0 - a) + level * a;
            }
        }
    }

    // One speckle field, drawn once and shared by the input and the target
    // of modality 0, so the input stays an exact affine image of the target.
    let speckle: Vec<f64> = (0..side * side)
        .map(|_| 1.0 + SPECKLE_STD * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();

    let mut canonical = Vec::with_capacity(cfg.modalities);
    for m in 0..cfg.modalities {
        let mut img = tissue.map(|t| contrast(m, t));
        if m == 0 {
            let data = img.data_mut();
            for (v, s) in data.iter_mut().zip(&speckle) {
                *v *= s;
            }
        }
        canonical.push(img);
    }

    let mut inputs = Vec::with_capacity(cfg.modalities);
    let mut jitter = Vec::with_capacity(cfg.modalities);
    for img in &canonical {
        let j = AffineJitter {
            scale: rng.gen_range(0.85..1.15),
            shift: rng.gen_range(-0.08..0.08),
        };
        inputs.push(img.map(|v| j.scale * v + j.shift));
        jitter.push(j);
    }

    Ok(SampleParts { tissue, canonical, inputs, jitter })
}

fn sample_indicator(
    table: &[(Indicator, f64)],
    rng: &mut impl Rng,
) -> Indicator {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (ind, w) in table {
        acc += w;
        if u < acc {
            return *ind;
        }
    }
    table.last().expect("table validated non-empty").0
}

/// Generates the whole dataset. Training samples draw their indicator from
/// the table; validation and test are forced complete.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let full = Indicator::full(cfg.modalities)?;
    // Indicators use their own stream so image content is unaffected by the
    // table.
    let mut ind_rng = per_sample_rng(cfg.seed ^ 0x6d69_7373, u64::MAX);
    let mut samples = Vec::with_capacity(cfg.total());
    for id in 0..cfg.total() {
        let split = if id < cfg.train {
            Split::Train
        } else if id < cfg.train + cfg.val {
            Split::Val
        } else {
            Split::Test
        };
        let indicator = match split {
            Split::Train => sample_indicator(&cfg.missingness, &mut ind_rng),
            _ => full,
        };
        let parts = gen_sample(cfg, id)?;
        let images = parts
            .inputs
            .into_iter()
            .enumerate()
            .map(|(m, img)| indicator.is_observed(m).then(|| img.map(|v| v.clamp(0.0, 1.0))))
            .collect();
        samples.push(Sample { id, split, indicator, images });
    }
    Ok(Dataset { config: cfg.clone(), samples })
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: usize,
    split: Split,
    indicator: Indicator,
    files: BTreeMap<usize, String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    samples: Vec<ManifestSample>,
}

/// Writes the dataset as a manifest plus one PGM per observed image.
pub fn export(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let mut files = BTreeMap::new();
        for (m, img) in s.images.iter().enumerate() {
            if let Some(img) = img {
                let name = format!("images/{:05}_{m}.pgm", s.id);
                let side = dataset.config.side;
                pgm::write(&dir.join(&name), side, side, &pgm::quantize(img))?;
                files.insert(m, name);
            }
        }
        entries.push(ManifestSample {
            id: s.id,
            split: s.split,
            indicator: s.indicator,
            files,
        });
    }
    let manifest = Manifest { config: dataset.config.clone(), samples: entries };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(e.to_string()))?;
    std::fs::write(dir.join("dataset.json"), json)?;
    Ok(())
}

/// Reads a dataset back from [`export`] output. Intensities come back
/// quantized to 8 bits.
pub fn import(dir: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = dir.join("dataset.json");
    let json = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| Error::parse(format!("dataset.json: {e}")))?;
    manifest.config.validate()?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let mut images = vec![None; manifest.config.modalities];
        for (m, name) in &e.files {
            if *m >= manifest.config.modalities {
                return Err(Error::parse(format!("sample {} names modality {m}", e.id)));
            }
            let (w, h, data) = pgm::read(&dir.join(name))?;
            if w != manifest.config.side || h != manifest.config.side {
                return Err(Error::parse(format!(
                    "{name}: {w}x{h} does not match configured side {}",
                    manifest.config.side
                )));
            }
            images[*m] = Some(pgm::dequantize(w, h, &data)?);
        }
        for m in e.indicator.iter_observed() {
            if images[m].is_none() {
                return Err(Error::parse(format!(
                    "sample {} observes modality {m} but has no file for it",
                    e.id
                )));
            }
        }
        samples.push(Sample {
            id: e.id,
            split: e.split,
            indicator: e.indicator,
            images,
        });
    }
    Ok(Dataset { config: manifest.config, samples })
}
