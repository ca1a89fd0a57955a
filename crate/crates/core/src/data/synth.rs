//! Synthetic aligned triples with controllable per-modality identity signal.
//!
//! Every identity owns one random block pattern per modality. An instance
//! renders that pattern with a small shared shift, a brightness jitter and
//! Gaussian pixel noise. A modality with signal strength 0 is pure noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DemoError, Result};
use crate::modality::Modality;
use crate::parallel;

/// Flat key-value description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub instances_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub signal_rgb: f64,
    pub signal_nir: f64,
    pub signal_tir: f64,
    pub noise_rgb: f64,
    pub noise_nir: f64,
    pub noise_tir: f64,
    pub cameras: usize,
    /// Pattern grid (rows x cols) each identity is drawn on.
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_identities: 8,
            instances_per_identity: 8,
            height: 16,
            width: 8,
            signal_rgb: 1.0,
            signal_nir: 1.0,
            signal_tir: 1.0,
            noise_rgb: 0.1,
            noise_nir: 0.1,
            noise_tir: 0.1,
            cameras: 4,
            grid_rows: 4,
            grid_cols: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn signal(&self, m: Modality) -> f64 {
        [self.signal_rgb, self.signal_nir, self.signal_tir][m.index()]
    }

    pub fn noise(&self, m: Modality) -> f64 {
        [self.noise_rgb, self.noise_nir, self.noise_tir][m.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(DemoError::Config("num_identities must be positive".into()));
        }
        if self.instances_per_identity == 0 || self.cameras == 0 {
            return Err(DemoError::Config(
                "instances_per_identity and cameras must be positive".into(),
            ));
        }
        if self.height == 0 || self.width == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(DemoError::Config("image and grid dims must be positive".into()));
        }
        for m in Modality::ALL {
            let s = self.signal(m);
            if !(0.0..=1.0).contains(&s) {
                return Err(DemoError::Config(format!(
                    "signal strength for {m} must lie in [0, 1], got {s}"
                )));
            }
            if !(self.noise(m) >= 0.0) {
                return Err(DemoError::Config(format!("noise for {m} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DemoError::Config(format!("synthetic spec: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sub_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let s = parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)));
    ChaCha8Rng::seed_from_u64(s)
}

/// Identity pattern for one modality: per grid cell and channel a value in
/// `[0, 1]`. NIR and TIR patterns are grey (equal across channels).
fn identity_pattern(spec: &SynthSpec, id: usize, m: Modality) -> Vec<[f64; 3]> {
    let mut rng = sub_rng(spec.seed, &[1, id as u64, m.index() as u64]);
    (0..spec.grid_rows * spec.grid_cols)
        .map(|_| match m {
            Modality::Rgb => [rng.random(), rng.random(), rng.random()],
            _ => {
                let v = rng.random();
                [v, v, v]
            }
        })
        .collect()
}

/// Render one triple as 8-bit RGB buffers (`height x width x 3`).
fn render_instance(spec: &SynthSpec, patterns: &[Vec<[f64; 3]>; 3], id: usize, inst: usize) -> [Vec<u8>; 3] {
    let mut rng = sub_rng(spec.seed, &[2, id as u64, inst as u64]);
    let dy: i64 = rng.random_range(-1..=1);
    let dx: i64 = rng.random_range(-1..=1);
    let (h, w) = (spec.height as i64, spec.width as i64);
    Modality::ALL.map(|m| {
        let signal = spec.signal(m);
        let brightness: f64 = rng.random_range(-0.05..=0.05);
        let noise = Normal::new(0.0, spec.noise(m).max(0.0)).expect("finite noise");
        let mut buf = Vec::with_capacity((h * w * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                let sy = (y - dy).rem_euclid(h) as usize;
                let sx = (x - dx).rem_euclid(w) as usize;
                let cell = (sy * spec.grid_rows / spec.height) * spec.grid_cols
                    + sx * spec.grid_cols / spec.width;
                for c in 0..3 {
                    let p = patterns[m.index()][cell][c];
                    let v = 0.5 + signal * (p - 0.5) + brightness + noise.sample(&mut rng);
                    buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        buf
    })
}

/// File name for the `inst`-th instance of identity `id` (both 0-based).
pub fn synth_file_name(spec: &SynthSpec, id: usize, inst: usize) -> String {
    format!("{:04}_c{}_{:04}.png", id + 1, inst % spec.cameras + 1, inst + 1)
}

/// Write the dataset under `root` in the standard directory layout, plus a
/// copy of the spec as `synth.toml`. Returns the number of triples.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<usize> {
    spec.validate()?;
    for m in Modality::ALL {
        let d = root.join(m.dir_name());
        fs::create_dir_all(&d).map_err(|e| DemoError::io(&d, e))?;
    }
    let total = spec.num_identities * spec.instances_per_identity;
    let patterns: Vec<[Vec<[f64; 3]>; 3]> = (0..spec.num_identities)
        .map(|id| Modality::ALL.map(|m| identity_pattern(spec, id, m)))
        .collect();
    let written: Vec<Result<()>> = parallel::map_range(total, |k| {
        let (id, inst) = (k / spec.instances_per_identity, k % spec.instances_per_identity);
        let bufs = render_instance(spec, &patterns[id], id, inst);
        let name = synth_file_name(spec, id, inst);
        for m in Modality::ALL {
            let path = root.join(m.dir_name()).join(&name);
            image::save_buffer(
                &path,
                &bufs[m.index()],
                spec.width as u32,
                spec.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| DemoError::Export(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    let spec_path = root.join("synth.toml");
    fs::write(&spec_path, spec.to_toml()).map_err(|e| DemoError::io(&spec_path, e))?;
    Ok(total)
}
