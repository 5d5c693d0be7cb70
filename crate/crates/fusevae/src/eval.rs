//! Image-quality metrics, the cross-modal evaluation grid and latent-space
//! diagnostics.
//!
//! The grid is the crate's main report card: one row per non-empty input
//! combination, and per target modality the reconstruction quality when the
//! target was observed (harmonization) and when it had to be synthesized
//! from the other modalities. A per-modality mean-image baseline anchors
//! the numbers; a model has learned nothing cross-modal until it beats it.

use crate::error::{Error, Result};
use crate::missingness::Indicator;
use crate::model::Model;
use crate::synthdata::{Dataset, Sample, Split};
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Ceiling applied to infinite or extreme PSNR values in tables.
pub const PSNR_TABLE_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of the images; everything in this crate lives in [0, 1].
const SSIM_RANGE: f64 = 1.0;

/// RNG stream for grid scoring, fixed so re-runs are byte-identical.
const GRID_SEED: u64 = 0x6772_6964;

fn plane(t: &Tensor) -> Result<(usize, usize, &[f64])> {
    match *t.shape() {
        [h, w] => Ok((h, w, t.data())),
        [1, h, w] => Ok((h, w, t.data())),
        ref s => Err(Error::shape(format!(
            "expected a single grayscale plane, got shape {s:?}"
        ))),
    }
}

/// Peak signal-to-noise ratio in decibels for unit-range images,
/// `10 log10(1 / mse)`. Identical images produce positive infinity; callers
/// rendering tables should pass the result through [`table_db`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "psnr needs matching shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::contract("psnr over an empty image"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Clamps a decibel value to the table ceiling, mapping the infinite
/// sentinel from [`psnr`] onto [`PSNR_TABLE_CAP`].
pub fn table_db(v: f64) -> f64 {
    v.min(PSNR_TABLE_CAP)
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - center;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Valid-mode separable blur; output shrinks by the window size minus one.
fn blur_valid(data: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * data[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
/// valid positions only. Images smaller than the window are rejected.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "ssim needs matching shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w, xa) = plane(a)?;
    let (_, _, xb) = plane(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least one full {SSIM_WINDOW}x{SSIM_WINDOW} window, image is {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * SSIM_RANGE) * (SSIM_K1 * SSIM_RANGE);
    let c2 = (SSIM_K2 * SSIM_RANGE) * (SSIM_K2 * SSIM_RANGE);
    let taps = gaussian_taps();
    let aa: Vec<f64> = xa.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = xb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = xa.iter().zip(xb).map(|(x, y)| x * y).collect();
    let mu_a = blur_valid(xa, h, w, &taps);
    let mu_b = blur_valid(xb, h, w, &taps);
    let m_aa = blur_valid(&aa, h, w, &taps);
    let m_bb = blur_valid(&bb, h, w, &taps);
    let m_ab = blur_valid(&ab, h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Fraction of spectral power above a radial frequency cutoff, after
/// removing the mean. `cutoff_fraction` scales the corner of the frequency
/// plane: zero keeps everything but the mean, one keeps nothing. A constant
/// image scores zero; a one-pixel checkerboard scores one.
pub fn spectral_energy(image: &Tensor, cutoff_fraction: f64) -> Result<f64> {
    let (h, w, data) = plane(image)?;
    if h != w {
        return Err(Error::contract(format!(
            "spectral energy needs a square image, got {h}x{w}"
        )));
    }
    if !cutoff_fraction.is_finite() || !(0.0..=1.0).contains(&cutoff_fraction) {
        return Err(Error::contract(format!(
            "cutoff fraction must lie in [0, 1], got {cutoff_fraction}"
        )));
    }
    let n = h;
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut cols = vec![Complex::new(0.0, 0.0); n * n];
    for y in 0..n {
        for x in 0..n {
            cols[x * n + y] = buf[y * n + x];
        }
    }
    for col in cols.chunks_exact_mut(n) {
        fft.process(col);
    }
    // Frequencies wrap at n/2; the corner radius is the largest possible.
    let corner = std::f64::consts::SQRT_2 * (n / 2) as f64;
    let cutoff = cutoff_fraction * corner;
    let (mut above, mut total) = (0.0, 0.0);
    for u in 0..n {
        let fu = u.min(n - u) as f64;
        for v in 0..n {
            let fv = v.min(n - v) as f64;
            let p = cols[u * n + v].norm_sqr();
            total += p;
            if (fu * fu + fv * fv).sqrt() > cutoff {
                above += p;
            }
        }
    }
    if total <= 1e-18 {
        return Ok(0.0);
    }
    Ok(above / total)
}

/// Whether a grid cell scores an observed input (harmonization) or a
/// modality the model never saw (synthesis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellRole {
    Harmonization,
    Synthesis,
}

impl CellRole {
    pub fn as_str(self) -> &'static str {
        match self {
            CellRole::Harmonization => "harmonization",
            CellRole::Synthesis => "synthesis",
        }
    }
}

/// Aggregated quality for one (input combination, target modality) pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub target: usize,
    pub role: CellRole,
    pub psnr_mean: f64,
    pub psnr_sd: f64,
    pub ssim_mean: f64,
    pub ssim_sd: f64,
    /// PSNR of the per-modality training-set mean image against the same
    /// targets. Input-independent, so it repeats across rows.
    pub baseline_psnr_mean: f64,
}

/// One evaluation row: a non-empty input combination scored against every
/// target modality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridRow {
    pub inputs: Indicator,
    pub cells: Vec<GridCell>,
}

/// The full cross-modal report over a dataset split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalGrid {
    pub temperature: f64,
    pub sample_count: usize,
    pub rows: Vec<GridRow>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.max(0.0).sqrt())
}

impl EvalGrid {
    pub const CSV_HEADER: &'static str =
        "inputs,target,role,psnr_mean,psnr_sd,ssim_mean,ssim_sd,baseline_psnr_mean";

    /// Renders the grid as CSV, one line per cell. Byte-identical across
    /// re-runs of the same evaluation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            for cell in &row.cells {
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    row.inputs,
                    cell.target,
                    cell.role.as_str(),
                    cell.psnr_mean,
                    cell.psnr_sd,
                    cell.ssim_mean,
                    cell.ssim_sd,
                    cell.baseline_psnr_mean,
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse(e.to_string()))
    }

    fn cell_mean(&self, keep: impl Fn(&GridRow, &GridCell) -> bool, f: impl Fn(&GridCell) -> f64) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for row in &self.rows {
            for cell in &row.cells {
                if keep(row, cell) {
                    total += f(cell);
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    /// Mean PSNR over synthesis cells reached from single-modality inputs,
    /// the grid's headline cross-modal number. NaN when no such cell exists.
    pub fn cross_modal_psnr(&self) -> f64 {
        self.cell_mean(
            |row, cell| row.inputs.count() == 1 && cell.role == CellRole::Synthesis,
            |cell| cell.psnr_mean,
        )
    }

    /// The mean-image baseline over the same cells as [`cross_modal_psnr`].
    pub fn cross_modal_baseline(&self) -> f64 {
        self.cell_mean(
            |row, cell| row.inputs.count() == 1 && cell.role == CellRole::Synthesis,
            |cell| cell.baseline_psnr_mean,
        )
    }
}

/// Per-modality mean image over the observed part of the training split.
pub fn train_mean_images(dataset: &Dataset) -> Result<Vec<Tensor>> {
    let m = dataset.config.modalities;
    let side = dataset.config.side;
    let mut sums = vec![Tensor::zeros(&[1, side, side]); m];
    let mut counts = vec![0usize; m];
    for sample in dataset.split_samples(Split::Train) {
        for j in sample.indicator.iter_observed() {
            let img = sample.images[j]
                .as_ref()
                .ok_or_else(|| Error::contract(format!("modality {j} image missing")))?;
            for (s, v) in sums[j].data_mut().iter_mut().zip(img.data()) {
                *s += v;
            }
            counts[j] += 1;
        }
    }
    for (j, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(Error::contract(format!(
                "modality {j} is never observed in the training split, no baseline"
            )));
        }
        let inv = 1.0 / *count as f64;
        for s in sums[j].data_mut().iter_mut() {
            *s *= inv;
        }
    }
    Ok(sums)
}

/// Scores the model over one fully observed split: every non-empty input
/// combination against every target modality, plus the mean-image baseline.
/// Scoring order and RNG use are fixed, so the result is a pure function of
/// the model, the dataset and the temperature.
pub fn run_grid(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    temperature: f64,
) -> Result<EvalGrid> {
    let m = model.config().modalities;
    if m != dataset.config.modalities {
        return Err(Error::contract(format!(
            "model covers {m} modalities, dataset has {}",
            dataset.config.modalities
        )));
    }
    let samples: Vec<&Sample> = dataset.split_samples(split).collect();
    if samples.is_empty() {
        return Err(Error::contract(format!("evaluation split {split:?} is empty")));
    }
    for sample in &samples {
        if sample.indicator.count() != m {
            return Err(Error::contract(format!(
                "grid scoring needs fully observed samples, sample {} observes {}",
                sample.id, sample.indicator
            )));
        }
    }
    let means = train_mean_images(dataset)?;
    let mut baseline = vec![Vec::with_capacity(samples.len()); m];
    for sample in &samples {
        for (t, mean_img) in means.iter().enumerate() {
            let target = sample.images[t].as_ref().expect("split checked fully observed");
            baseline[t].push(table_db(psnr(mean_img, target)?));
        }
    }
    let baseline_psnr: Vec<f64> = baseline.iter().map(|v| mean_sd(v).0).collect();

    let full = Indicator::full(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(GRID_SEED);
    let mut rows = Vec::new();
    for inputs in full.enumerate_subsets() {
        let mut psnr_acc = vec![Vec::with_capacity(samples.len()); m];
        let mut ssim_acc = vec![Vec::with_capacity(samples.len()); m];
        for sample in &samples {
            let masked: Vec<Option<Tensor>> = (0..m)
                .map(|j| {
                    if inputs.is_observed(j) {
                        sample.images[j].clone()
                    } else {
                        None
                    }
                })
                .collect();
            let outputs = model.synthesize(&masked, &inputs, temperature, &mut rng)?;
            for (t, out) in outputs.iter().enumerate() {
                let target = sample.images[t].as_ref().expect("split checked fully observed");
                psnr_acc[t].push(table_db(psnr(out, target)?));
                ssim_acc[t].push(ssim(out, target)?);
            }
        }
        let cells = (0..m)
            .map(|t| {
                let (psnr_mean, psnr_sd) = mean_sd(&psnr_acc[t]);
                let (ssim_mean, ssim_sd) = mean_sd(&ssim_acc[t]);
                let role = if inputs.is_observed(t) {
                    CellRole::Harmonization
                } else {
                    CellRole::Synthesis
                };
                GridCell {
                    target: t,
                    role,
                    psnr_mean,
                    psnr_sd,
                    ssim_mean,
                    ssim_sd,
                    baseline_psnr_mean: baseline_psnr[t],
                }
            })
            .collect();
        rows.push(GridRow { inputs, cells });
    }
    Ok(EvalGrid { temperature, sample_count: samples.len(), rows })
}

/// Principal-component view of the finest-level posterior means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaReport {
    /// Orthonormal directions in latent space, strongest first. Rank
    /// deficiency in the pooled data shortens this list.
    pub components: Vec<Vec<f64>>,
    /// Fraction of total variance per component; the sum never exceeds one.
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
    pub projections: Vec<PcaProjection>,
}

/// Pooled pixel latents for one input combination, projected onto the
/// leading components (at most two).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaProjection {
    pub combination: Indicator,
    pub points: Vec<Vec<f64>>,
}

/// One latent vector per spatial position of the finest-level mean.
fn pixel_vectors(mean: &Tensor) -> Result<Vec<Vec<f64>>> {
    match *mean.shape() {
        [_] => Ok(vec![mean.data().to_vec()]),
        [c, h, w] => {
            let px = h * w;
            Ok((0..px)
                .map(|p| (0..c).map(|ch| mean.data()[ch * px + p]).collect())
                .collect())
        }
        ref s => Err(Error::shape(format!("latent mean has unexpected shape {s:?}"))),
    }
}

fn finest_posterior_pixels(
    model: &Model,
    sample: &Sample,
    combination: &Indicator,
) -> Result<Vec<Vec<f64>>> {
    let m = model.config().modalities;
    if !combination.is_subset_of(&sample.indicator) {
        return Err(Error::contract(format!(
            "combination {combination} is not observed in sample {}",
            sample.id
        )));
    }
    let masked: Vec<Option<Tensor>> = (0..m)
        .map(|j| {
            if combination.is_observed(j) {
                sample.images[j].clone()
            } else {
                None
            }
        })
        .collect();
    let params = model.posterior_params(&masked, combination)?;
    pixel_vectors(params[0].0.mean())
}

/// Eigendecomposition of the pooled covariance, eigenvalues descending.
/// Components below a relative rank tolerance are dropped.
fn fit_pca(points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<(f64, Vec<f64>)>)> {
    if points.is_empty() {
        return Err(Error::contract("pca over an empty point set"));
    }
    let dim = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        if p.len() != dim {
            return Err(Error::shape("pca points have mixed dimensions".to_string()));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let denom = (n - 1.0).max(1.0);
    let mut cov = DMatrix::zeros(dim, dim);
    for p in points {
        let d = DVector::from_iterator(dim, p.iter().zip(&mean).map(|(v, m)| v - m));
        cov += &d * d.transpose() / denom;
    }
    let trace = cov.trace();
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let keep: Vec<(f64, Vec<f64>)> = order
        .into_iter()
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
        .filter(|(v, _)| *v > 1e-12 && *v > 1e-9 * top)
        .map(|(v, dir)| (v / trace.max(1e-300), dir))
        .collect();
    Ok((mean, keep))
}

/// Fits PCA to the finest-level posterior means pooled over `samples` and
/// `combinations`, then projects each combination's pixels onto the leading
/// components. Needs at least three latent channels per pixel.
pub fn latent_pca(
    model: &Model,
    samples: &[Sample],
    combinations: &[Indicator],
) -> Result<PcaReport> {
    let channels = model.config().hier.levels[0].channels;
    if channels < 3 {
        return Err(Error::contract(format!(
            "latent pca needs at least 3 finest-level channels, model has {channels}"
        )));
    }
    if samples.is_empty() || combinations.is_empty() {
        return Err(Error::contract("latent pca needs samples and combinations"));
    }
    let mut per_combo: Vec<Vec<Vec<f64>>> = Vec::with_capacity(combinations.len());
    for combination in combinations {
        let mut points = Vec::new();
        for sample in samples {
            points.extend(finest_posterior_pixels(model, sample, combination)?);
        }
        per_combo.push(points);
    }
    let pooled: Vec<Vec<f64>> = per_combo.iter().flatten().cloned().collect();
    let (mean, eig) = fit_pca(&pooled)?;
    let proj_dims = eig.len().min(2);
    let projections = combinations
        .iter()
        .zip(&per_combo)
        .map(|(combination, points)| PcaProjection {
            combination: combination.clone(),
            points: points
                .iter()
                .map(|p| {
                    (0..proj_dims)
                        .map(|k| {
                            p.iter()
                                .zip(&mean)
                                .zip(&eig[k].1)
                                .map(|((v, m), d)| (v - m) * d)
                                .sum()
                        })
                        .collect()
                })
                .collect(),
        })
        .collect();
    Ok(PcaReport {
        components: eig.iter().map(|(_, d)| d.clone()).collect(),
        explained_variance: eig.iter().map(|(v, _)| *v).collect(),
        mean,
        projections,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na.max(1e-12) * nb.max(1e-12))
}

/// Mean cosine similarity between corresponding points of every pair of
/// sets. Identical sets score exactly one.
fn mean_pairwise_cosine(sets: &[Vec<Vec<f64>>]) -> Result<f64> {
    if sets.len() < 2 {
        return Err(Error::contract("alignment needs at least two latent sets"));
    }
    let len = sets[0].len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            if sets[i].len() != len || sets[j].len() != len {
                return Err(Error::shape("latent sets have mismatched sizes".to_string()));
            }
            let s: f64 = sets[i]
                .iter()
                .zip(&sets[j])
                .map(|(a, b)| cosine(a, b))
                .sum();
            total += s / len as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// How similarly the modalities place the same scene in latent space: the
/// mean cosine similarity between per-pixel finest-level posterior means
/// produced from each single-modality input, averaged over modality pairs
/// and samples. One means the encoders agree perfectly.
pub fn alignment_score(model: &Model, samples: &[Sample]) -> Result<f64> {
    let m = model.config().modalities;
    if m < 2 {
        return Err(Error::contract("alignment needs at least two modalities"));
    }
    if samples.is_empty() {
        return Err(Error::contract("alignment over an empty sample set"));
    }
    let mut total = 0.0;
    for sample in samples {
        let sets: Vec<Vec<Vec<f64>>> = (0..m)
            .map(|j| {
                let single = Indicator::single(j, m)?;
                finest_posterior_pixels(model, sample, &single)
            })
            .collect::<Result<_>>()?;
        total += mean_pairwise_cosine(&sets)?;
    }
    Ok(total / samples.len() as f64)
}
