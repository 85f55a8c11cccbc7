//! Desk-scale synthetic dermoscopy stand-in: skin-toned textured
//! backgrounds with one darker, irregular, elliptical lesion per image.
//! Lesion orientation is drawn uniformly over [0°, 360°), so the benchmark
//! distribution is rotation-symmetric by construction.

use std::f64::consts::TAU;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pnm::{read_pgm_mask, read_ppm, write_pgm, write_ppm};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One labeled sample: `[3,H,W]` image in [0,1], `[1,H,W]` binary mask.
pub struct SampleRecord<F: Scalar> {
    pub image: Tensor<F>,
    pub mask: Tensor<F>,
    pub id: String,
}

/// Mask foreground fraction is kept inside this band by rejection.
pub const FG_FRACTION: (f64, f64) = (0.05, 0.6);

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos_a: f64,
    sin_a: f64,
    eps: [f64; 4],
    psi: [f64; 4],
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_a + dy * self.sin_a) / self.rx;
        let v = (-dx * self.sin_a + dy * self.cos_a) / self.ry;
        let r = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        // low-order angular harmonics make the outline irregular
        let mut rim = 1.0;
        for (j, (&e, &p)) in self.eps.iter().zip(&self.psi).enumerate() {
            rim += e * ((j as f64 + 2.0) * phi + p).sin();
        }
        r <= rim
    }
}

fn draw_blob(rng: &mut StdRng, s: f64) -> Blob {
    let alpha = rng.gen_range(0.0..TAU);
    Blob {
        cx: rng.gen_range(0.3..0.7) * s,
        cy: rng.gen_range(0.3..0.7) * s,
        rx: rng.gen_range(0.13..0.28) * s,
        ry: rng.gen_range(0.13..0.28) * s,
        cos_a: alpha.cos(),
        sin_a: alpha.sin(),
        eps: std::array::from_fn(|_| rng.gen_range(0.0..0.08)),
        psi: std::array::from_fn(|_| rng.gen_range(0.0..TAU)),
    }
}

/// Render one deterministic sample. Exposed so callers can build datasets
/// in memory without touching disk.
pub fn synth_sample<F: Scalar>(size: usize, seed: u64) -> Result<(Tensor<F>, Tensor<F>)> {
    check_size(size)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let s = size as f64;

    let base = [
        0.78 + rng.gen_range(-0.06..0.06),
        0.62 + rng.gen_range(-0.06..0.06),
        0.52 + rng.gen_range(-0.06..0.06),
    ];
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..TAU);
            let freq = rng.gen_range(1.5..4.5);
            Wave {
                kx: TAU * freq * theta.cos() / s,
                ky: TAU * freq * theta.sin() / s,
                phase: rng.gen_range(0.0..TAU),
                amp: rng.gen_range(0.01..0.04),
            }
        })
        .collect();

    // place the lesion, rejecting degenerate foreground fractions
    let mut mask_bits = Vec::new();
    for attempt in 0.. {
        if attempt >= 1000 {
            return Err(Error::arg("lesion placement failed 1000 rejection rounds"));
        }
        let blob = draw_blob(&mut rng, s);
        mask_bits = (0..size * size)
            .map(|i| blob.contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
            .collect();
        let frac = mask_bits.iter().filter(|&&b| b).count() as f64 / (s * s);
        if (FG_FRACTION.0..=FG_FRACTION.1).contains(&frac) {
            break;
        }
    }

    let contrast = rng.gen_range(0.35..0.75);
    // the lesion darkens every channel, red a touch less (melanin brown)
    let shade = [1.0 - 0.9 * contrast, 1.0 - contrast, 1.0 - contrast];

    let mut image = vec![F::zero(); 3 * size * size];
    let mut mask = vec![F::zero(); size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let ripple: f64 = waves
                .iter()
                .map(|w| w.amp * (w.kx * x as f64 + w.ky * y as f64 + w.phase).sin())
                .sum();
            let inside = mask_bits[i];
            if inside {
                mask[i] = F::one();
            }
            for c in 0..3 {
                let tone = if inside { base[c] * shade[c] } else { base[c] };
                let noise = rng.gen_range(-0.03..0.03);
                image[c * size * size + i] = F::of_f64((tone + ripple + noise).clamp(0.0, 1.0));
            }
        }
    }
    Ok((
        Tensor::from_vec(&[3, size, size], image)?,
        Tensor::from_vec(&[1, size, size], mask)?,
    ))
}

fn check_size(size: usize) -> Result<()> {
    if size < 32 || size % 2 != 0 {
        return Err(Error::arg(format!(
            "sample size must be even and ≥ 32, got {size}"
        )));
    }
    Ok(())
}

pub fn image_name(index: usize) -> String {
    format!("img_{index:05}.ppm")
}

pub fn mask_name(index: usize) -> String {
    format!("msk_{index:05}.pgm")
}

/// Write `n` image/mask pairs under `out_dir`. Samples derive per-index
/// seeds from `seed`, so content is independent of generation order and
/// byte-identical across runs.
pub fn gen_synthetic(n: usize, size: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<()> {
    check_size(size)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    (0..n).into_par_iter().try_for_each(|i| {
        let (image, mask) = synth_sample::<f64>(size, seed.wrapping_add(i as u64))?;
        write_ppm(out_dir.join(image_name(i)), &image)?;
        write_pgm(out_dir.join(mask_name(i)), &mask)
    })
}

/// Load every `img_*.ppm` with its `msk_*.pgm` partner, ordered by id.
pub fn load_dataset<F: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<SampleRecord<F>>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name
            .strip_prefix("img_")
            .and_then(|rest| rest.strip_suffix(".ppm"))
        {
            ids.push(id.to_string());
        }
    }
    if ids.is_empty() {
        return Err(Error::arg(format!(
            "no img_*.ppm files under {}",
            dir.display()
        )));
    }
    ids.sort();
    ids.iter()
        .map(|id| {
            let image: Tensor<F> = read_ppm(dir.join(format!("img_{id}.ppm")))?;
            let mask: Tensor<F> = read_pgm_mask(dir.join(format!("msk_{id}.pgm")))?;
            if image.dims()[1..] != mask.dims()[1..] {
                return Err(Error::shape(format!(
                    "sample {id}: image {:?} and mask {:?} disagree",
                    image.dims(),
                    mask.dims()
                )));
            }
            Ok(SampleRecord {
                image,
                mask,
                id: id.clone(),
            })
        })
        .collect()
}

/// Deterministically shuffle and split off a validation fraction.
pub fn split_dataset<F: Scalar>(
    mut records: Vec<SampleRecord<F>>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord<F>>, Vec<SampleRecord<F>>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::arg(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    use rand::seq::SliceRandom;
    let mut rng = StdRng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let n_val = (records.len() as f64 * val_fraction).round() as usize;
    let n_val = n_val.min(records.len().saturating_sub(1));
    let val = records.split_off(records.len() - n_val);
    Ok((records, val))
}
