//! Synthetic benchmark: two groups of four-Gaussian-blob images. The two
//! diagonal blob magnitudes carry the class signal (sigma_A) and the two
//! off-diagonal magnitudes are the protected variable (sigma_B). Group 1
//! samples both magnitudes from U(1,4), group 2 from U(3,6), so intensity
//! alone separates the groups imperfectly and the protected variable is
//! genuinely predictive — exactly the trap a debiased model must avoid.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bytes::{fnv1a64, ByteReader};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// How many uniform draws control the two blobs of each pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobDraws {
    /// One draw shared by both blobs of a pair (the reference mode).
    Shared,
    /// An independent draw per blob; the recorded sigma is the pair mean.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_per_group: usize,
    pub height: usize,
    pub width: usize,
    /// Sampling range for group 1 (label 0), lo < hi.
    pub group1_range: (f64, f64),
    /// Sampling range for group 2 (label 1), lo < hi.
    pub group2_range: (f64, f64),
    pub noise_std: f64,
    /// Centers (row, col) of the two signal blobs on the main diagonal.
    pub centers_signal: [(f64, f64); 2],
    /// Centers (row, col) of the two protected blobs off the diagonal.
    pub centers_protected: [(f64, f64); 2],
    /// Common spatial standard deviation of all four unit-peak blobs.
    pub spatial_std: f64,
    pub blob_draws: BlobDraws,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_per_group: 512,
            height: 32,
            width: 32,
            group1_range: (1.0, 4.0),
            group2_range: (3.0, 6.0),
            noise_std: 0.01,
            centers_signal: [(8.0, 8.0), (24.0, 24.0)],
            centers_protected: [(8.0, 24.0), (24.0, 8.0)],
            spatial_std: 4.0,
            blob_draws: BlobDraws::Shared,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_group == 0 {
            return Err(contract("n_per_group must be positive".to_string()));
        }
        if self.group1_range.0 >= self.group1_range.1 {
            return Err(contract(format!(
                "group1_range: lo {} must be < hi {}",
                self.group1_range.0, self.group1_range.1
            )));
        }
        if self.group2_range.0 >= self.group2_range.1 {
            return Err(contract(format!(
                "group2_range: lo {} must be < hi {}",
                self.group2_range.0, self.group2_range.1
            )));
        }
        if self.group1_range.0 <= 0.0 || self.group2_range.0 <= 0.0 {
            return Err(contract("sigma ranges must be positive".to_string()));
        }
        if self.noise_std < 0.0 {
            return Err(contract(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(contract("resolution must be positive".to_string()));
        }
        for &(r, c) in self.centers_signal.iter().chain(&self.centers_protected) {
            if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
                return Err(contract(format!(
                    "blob center ({r},{c}) outside {}x{} image",
                    self.height, self.width
                )));
            }
        }
        if self.spatial_std <= 0.0 {
            return Err(contract(format!("spatial_std must be positive, got {}", self.spatial_std)));
        }
        Ok(())
    }
}

/// Images, class labels, and per-image blob magnitudes. sigma_b is the
/// protected variable (k = 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor, // [N, 1, H, W]
    pub labels: Vec<u8>,
    pub sigma_a: Vec<f64>,
    pub sigma_b: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    /// Protected variables as an [N, 1] matrix.
    pub fn protected_matrix(&self) -> Tensor {
        Tensor::from_vec(&[self.sigma_b.len(), 1], self.sigma_b.clone())
            .expect("lengths agree by construction")
    }
}

/// Unit-peak Gaussian bump value at pixel (r, c).
fn bump(r: f64, c: f64, center: (f64, f64), spatial_std: f64) -> f64 {
    let dr = r - center.0;
    let dc = c - center.1;
    (-(dr * dr + dc * dc) / (2.0 * spatial_std * spatial_std)).exp()
}

/// Noise-free blob field at one pixel, used by `render_image` and by tests.
pub fn field_value(config: &SyntheticConfig, sigma_a: f64, sigma_b: f64, r: usize, c: usize) -> f64 {
    let (rf, cf) = (r as f64, c as f64);
    let sa: f64 = config
        .centers_signal
        .iter()
        .map(|&ctr| bump(rf, cf, ctr, config.spatial_std))
        .sum();
    let sb: f64 = config
        .centers_protected
        .iter()
        .map(|&ctr| bump(rf, cf, ctr, config.spatial_std))
        .sum();
    sigma_a * sa + sigma_b * sb
}

/// Render one image: sigma_a scales the two diagonal blobs, sigma_b the two
/// off-diagonal blobs, plus i.i.d. Gaussian pixel noise.
pub fn render_image(
    config: &SyntheticConfig,
    sigma_a: f64,
    sigma_b: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if sigma_a <= 0.0 || sigma_b <= 0.0 {
        return Err(contract(format!(
            "blob magnitudes must be positive, got sigma_a={sigma_a}, sigma_b={sigma_b}"
        )));
    }
    render_pair(config, (sigma_a, sigma_a), (sigma_b, sigma_b), rng)
}

fn render_pair(
    config: &SyntheticConfig,
    sigma_a: (f64, f64),
    sigma_b: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (h, w) = (config.height, config.width);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (rf, cf) = (r as f64, c as f64);
            let mut v = sigma_a.0 * bump(rf, cf, config.centers_signal[0], config.spatial_std)
                + sigma_a.1 * bump(rf, cf, config.centers_signal[1], config.spatial_std)
                + sigma_b.0 * bump(rf, cf, config.centers_protected[0], config.spatial_std)
                + sigma_b.1 * bump(rf, cf, config.centers_protected[1], config.spatial_std);
            if config.noise_std > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += config.noise_std * z;
            }
            data.push(v);
        }
    }
    Tensor::from_vec(&[1, h, w], data)
}

/// Generate the full dataset: group 1 first (label 0), then group 2
/// (label 1), with a single sequential RNG stream for reproducibility.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = 2 * config.n_per_group;
    let (h, w) = (config.height, config.width);

    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut sigma_a = Vec::with_capacity(n);
    let mut sigma_b = Vec::with_capacity(n);

    for (label, range) in [(0u8, config.group1_range), (1u8, config.group2_range)] {
        for _ in 0..config.n_per_group {
            let (sa, sb) = match config.blob_draws {
                BlobDraws::Shared => {
                    let sa = rng.gen_range(range.0..range.1);
                    let sb = rng.gen_range(range.0..range.1);
                    ((sa, sa), (sb, sb))
                }
                BlobDraws::Independent => {
                    let sa0 = rng.gen_range(range.0..range.1);
                    let sa1 = rng.gen_range(range.0..range.1);
                    let sb0 = rng.gen_range(range.0..range.1);
                    let sb1 = rng.gen_range(range.0..range.1);
                    ((sa0, sa1), (sb0, sb1))
                }
            };
            let img = render_pair(config, sa, sb, &mut rng)?;
            images.extend_from_slice(img.data());
            labels.push(label);
            sigma_a.push(0.5 * (sa.0 + sa.1));
            sigma_b.push(0.5 * (sb.0 + sb.1));
        }
    }

    Ok(Dataset {
        images: Tensor::from_vec(&[n, 1, h, w], images)?,
        labels,
        sigma_a,
        sigma_b,
    })
}

/// Best achievable label accuracy for a classifier observing the signal
/// magnitude only, with ties in the overlap scored one half.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleAccuracy {
    /// Closed form for the shared-draw (one sigma_A observation) case.
    pub analytic: f64,
    /// Monte-Carlo estimate under the actual configuration.
    pub monte_carlo: f64,
    /// Standard error of the Monte-Carlo estimate.
    pub std_err: f64,
}

/// Closed-form Bayes accuracy for one uniform draw per class:
/// one half of the integral of max(p1, p2).
pub fn analytic_oracle_accuracy(r1: (f64, f64), r2: (f64, f64)) -> f64 {
    let d1 = 1.0 / (r1.1 - r1.0);
    let d2 = 1.0 / (r2.1 - r2.0);
    let mut cuts = vec![r1.0, r1.1, r2.0, r2.1];
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let mut integral = 0.0;
    for pair in cuts.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let mid = 0.5 * (lo + hi);
        let p1 = if mid >= r1.0 && mid <= r1.1 { d1 } else { 0.0 };
        let p2 = if mid >= r2.0 && mid <= r2.1 { d2 } else { 0.0 };
        integral += p1.max(p2) * (hi - lo);
    }
    0.5 * integral
}

/// Monte-Carlo Bayes accuracy. Trials alternate between groups; each trial
/// scores 1 for a correct likelihood-ratio decision and 1/2 for a tie.
pub fn bayes_oracle_accuracy(config: &SyntheticConfig, n_mc: usize, seed: u64) -> Result<OracleAccuracy> {
    config.validate()?;
    if n_mc < 100_000 {
        return Err(contract(format!("n_mc must be at least 100000, got {n_mc}")));
    }
    let r1 = config.group1_range;
    let r2 = config.group2_range;
    let d1 = 1.0 / (r1.1 - r1.0);
    let d2 = 1.0 / (r2.1 - r2.0);
    let density = |x: f64, r: (f64, f64), d: f64| if x >= r.0 && x <= r.1 { d } else { 0.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for t in 0..n_mc {
        let group = t % 2;
        let range = if group == 0 { r1 } else { r2 };
        let (p1, p2) = match config.blob_draws {
            BlobDraws::Shared => {
                let x = rng.gen_range(range.0..range.1);
                (density(x, r1, d1), density(x, r2, d2))
            }
            BlobDraws::Independent => {
                let x = rng.gen_range(range.0..range.1);
                let y = rng.gen_range(range.0..range.1);
                (
                    density(x, r1, d1) * density(y, r1, d1),
                    density(x, r2, d2) * density(y, r2, d2),
                )
            }
        };
        let score = if p1 == p2 {
            0.5
        } else {
            let pick = if p1 > p2 { 0 } else { 1 };
            if pick == group {
                1.0
            } else {
                0.0
            }
        };
        sum += score;
        sum_sq += score * score;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(OracleAccuracy {
        analytic: analytic_oracle_accuracy(r1, r2),
        monte_carlo: mean,
        std_err: (var / n).sqrt(),
    })
}

// ── Dataset serialization ───────────────────────────────────────────

const DATASET_MAGIC: &[u8; 4] = b"BRDS";
const DATASET_VERSION: u32 = 1;

/// Serialize to the binary dataset format: magic, version, N/H/W, images as
/// little-endian f64, labels, sigma_a, sigma_b, then an FNV-1a 64 checksum
/// of all preceding bytes.
pub fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let (h, w) = ds.resolution();
    let n = ds.len();
    let mut buf = Vec::with_capacity(16 + n * h * w * 8 + n * 17 + 8);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in ds.images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&ds.labels);
    for &v in &ds.sigma_a {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &ds.sigma_b {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    buf
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let buf = dataset_bytes(ds);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 8 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "file too short for checksum".to_string(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = ByteReader::new(body);
    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported dataset version {version}"),
        });
    }
    let n = r.u32("sample count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let images = r.f64s(n * h * w, "image data")?;
    let labels = r.u8s(n, "labels")?.to_vec();
    let sigma_a = r.f64s(n, "sigma_a")?;
    let sigma_b = r.f64s(n, "sigma_b")?;
    if r.pos != body.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes before checksum", body.len() - r.pos),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Format {
            offset: (16 + n * h * w * 8) as u64,
            msg: "labels must be 0 or 1".to_string(),
        });
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 1, h, w], images)?,
        labels,
        sigma_a,
        sigma_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dataset_shape_and_balance() {
        let mut config = SyntheticConfig::default();
        config.n_per_group = 16; // keep the unit test quick
        let ds = generate(&config).unwrap();
        assert_eq!(ds.len(), 32);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 16);
        assert_eq!(ds.images.shape(), &[32, 1, 32, 32]);
        for i in 0..ds.len() {
            let range = if ds.labels[i] == 0 { config.group1_range } else { config.group2_range };
            assert!(ds.sigma_a[i] >= range.0 && ds.sigma_a[i] <= range.1);
            assert!(ds.sigma_b[i] >= range.0 && ds.sigma_b[i] <= range.1);
        }
    }

    #[test]
    fn center_pixel_is_analytic() {
        let mut config = SyntheticConfig::default();
        config.noise_std = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render_image(&config, 2.0, 3.0, &mut rng).unwrap();
        let (r, c) = (8usize, 8usize);
        let expected = field_value(&config, 2.0, 3.0, r, c);
        let got = img.data()[r * config.width + c];
        assert!((got - expected).abs() < 1e-15);
        // the center pixel is the peak value plus analytic tails
        assert!((got - 2.0).abs() < 0.1, "tails are small at std 4: {got}");
    }

    #[test]
    fn equal_magnitudes_give_rotational_symmetry() {
        let mut config = SyntheticConfig::default();
        config.noise_std = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render_image(&config, 2.5, 2.5, &mut rng).unwrap();
        let w = config.width;
        // quarter turn about the image center maps (r,c) to (c, 32-r)
        for r in 1..config.height {
            for c in 0..w {
                let a = img.data()[r * w + c];
                let b = img.data()[c * w + (32 - r)];
                assert!((a - b).abs() < 1e-12, "asymmetry at ({r},{c})");
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let config = SyntheticConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = render_image(&config, 2.0, 2.0, &mut r1).unwrap();
        let b = render_image(&config, 2.0, 2.0, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_positive_sigma_rejected() {
        let config = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(render_image(&config, 0.0, 1.0, &mut rng).is_err());
        assert!(render_image(&config, 1.0, -2.0, &mut rng).is_err());
    }

    #[test]
    fn monotone_in_signal_magnitude() {
        let mut config = SyntheticConfig::default();
        config.noise_std = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lo = render_image(&config, 1.5, 2.0, &mut rng).unwrap();
        let hi = render_image(&config, 2.5, 2.0, &mut rng).unwrap();
        let idx = 8 * config.width + 8;
        assert!(hi.data()[idx] > lo.data()[idx]);
    }

    #[test]
    fn analytic_oracle_cases() {
        assert_eq!(analytic_oracle_accuracy((1.0, 2.0), (3.0, 4.0)), 1.0);
        assert!((analytic_oracle_accuracy((1.0, 4.0), (1.0, 4.0)) - 0.5).abs() < 1e-15);
        let acc = analytic_oracle_accuracy((1.0, 4.0), (3.0, 6.0));
        assert!((acc - 5.0 / 6.0).abs() < 1e-12, "got {acc}");
    }

    #[test]
    fn monte_carlo_matches_analytic() {
        let config = SyntheticConfig::default();
        let oracle = bayes_oracle_accuracy(&config, 200_000, 5).unwrap();
        assert!(
            (oracle.monte_carlo - oracle.analytic).abs() < 4.0 * oracle.std_err + 1e-3,
            "mc {} vs analytic {} (se {})",
            oracle.monte_carlo,
            oracle.analytic,
            oracle.std_err
        );
    }

    #[test]
    fn oracle_requires_enough_samples() {
        let config = SyntheticConfig::default();
        assert!(bayes_oracle_accuracy(&config, 1000, 5).is_err());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut config = SyntheticConfig::default();
        config.n_per_group = 8;
        let ds = generate(&config).unwrap();
        let dir = std::env::temp_dir().join("brnet_core_test_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.brds");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut config = SyntheticConfig::default();
        config.n_per_group = 4;
        let ds = generate(&config).unwrap();
        let bytes = dataset_bytes(&ds);
        let truncated = &bytes[..bytes.len() / 2];
        assert!(parse_dataset(truncated).is_err());
    }

    #[test]
    fn corrupted_checksum_rejected() {
        let mut config = SyntheticConfig::default();
        config.n_per_group = 4;
        let ds = generate(&config).unwrap();
        let mut bytes = dataset_bytes(&ds);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        match parse_dataset(&bytes) {
            Err(Error::Checksum { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let mut config = SyntheticConfig::default();
        config.group1_range = (4.0, 1.0);
        let err = generate(&config).unwrap_err();
        assert!(err.to_string().contains("group1_range"), "{err}");
    }

    #[test]
    fn within_group_sigmas_uncorrelated() {
        let config = SyntheticConfig {
            noise_std: 0.0,
            ..SyntheticConfig::default()
        };
        let ds = generate(&config).unwrap();
        let n = config.n_per_group;
        let a = &ds.sigma_a[..n];
        let b = &ds.sigma_b[..n];
        let corr = crate::losses::pearson_corr_sq_value(a, b, 0.0).unwrap().sqrt();
        assert!(corr < 0.1, "within-group correlation {corr}");
    }
}
