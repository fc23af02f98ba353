//! Procedural identity generator. Each identity is a 48x48 face-like canvas:
//! a shared oval base, a high-contrast block glyph in the canonical eye band
//! (the distinguishing feature, by construction), and a handful of weaker
//! identity-specific interior bumps centered on the nose/mouth/cheek/forehead
//! zones. Rendering adds brightness, translation, and noise variation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::regions::eye_band_rows;
use crate::tensor::{fbtn, Tensor};
use crate::util::HashWriter;

pub const IMAGE_SIZE: usize = 48;
pub const GENERATOR_VERSION: u32 = 1;

/// Glyph cell grid inside the eye band: 2x2-pixel blocks.
const GLYPH_BLOCK: usize = 2;
const GLYPH_ROWS: usize = 4;
const GLYPH_COLS: usize = 14;
const GLYPH_ROW0: usize = 14;
const GLYPH_COL0: usize = 10;
const GLYPH_DARK: f64 = 0.15;
const GLYPH_LIGHT: f64 = 0.85;
/// Minimum pairwise glyph distance, as a fraction of glyph cells (and hence
/// of glyph pixels, since blocks are uniform).
const GLYPH_MIN_DISTANCE: f64 = 0.25;

/// Identity-specific interior bumps: (row, col, sigma) per zone, placed
/// inside the forehead / nose / mouth / cheek prefab regions.
const BUMP_ZONES: [(f64, f64, f64); 5] = [
    (9.0, 24.0, 5.5),  // forehead
    (26.5, 24.0, 4.0), // nose
    (34.0, 24.0, 3.5), // mouth
    (30.0, 6.0, 4.0),  // left cheek
    (30.0, 42.0, 4.0), // right cheek
];
const BUMP_MAX_AMPLITUDE: f64 = 0.16;

/// Normalized image in [0, 1]^(c x h x w).
#[derive(Clone, Debug)]
pub struct Image(Tensor);

impl Image {
    pub fn new(t: Tensor) -> Result<Self> {
        t.chw()?;
        if !t.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Parameter("image values must lie in [0, 1]".into()));
        }
        Ok(Image(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.chw().expect("validated at construction")
    }
}

/// Bit pattern of one identity's eye-band glyph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub bits: Vec<bool>,
}

impl Glyph {
    pub fn pixel_area() -> usize {
        GLYPH_ROWS * GLYPH_COLS * GLYPH_BLOCK * GLYPH_BLOCK
    }

    /// Hamming distance in pixels (cells scale uniformly to pixels).
    pub fn pixel_distance(&self, other: &Glyph) -> usize {
        let cells = self
            .bits
            .iter()
            .zip(other.bits.iter())
            .filter(|(a, b)| a != b)
            .count();
        cells * GLYPH_BLOCK * GLYPH_BLOCK
    }
}

/// Deterministic template for one identity.
#[derive(Clone, Debug)]
pub struct IdentityTemplate {
    pub identity_id: usize,
    pub glyph: Glyph,
    /// Low-frequency background field with the identity bumps applied,
    /// before the glyph is stamped.
    pub base_texture: Vec<f64>,
    pub seed: u64,
}

fn stream_rng(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(tag.len() + 24);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(tag.as_bytes());
    key.extend_from_slice(&a.to_le_bytes());
    key.extend_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(crate::util::sha256_bytes(&key))
}

fn draw_glyph_bits(seed: u64, id: u64, salt: u64) -> Vec<bool> {
    let mut rng = stream_rng(seed, "glyph", id, salt);
    (0..GLYPH_ROWS * GLYPH_COLS).map(|_| rng.random::<bool>()).collect()
}

/// Glyphs for identities 0..=max_id. Each glyph is drawn from its own
/// stream and redrawn (salt bump) until it differs from every earlier
/// identity in at least 25% of cells, so the chain is a pure function of
/// the seed.
fn glyph_chain(seed: u64, max_id: usize) -> Vec<Glyph> {
    let min_cells = (GLYPH_MIN_DISTANCE * (GLYPH_ROWS * GLYPH_COLS) as f64).ceil() as usize;
    let mut chain: Vec<Glyph> = Vec::with_capacity(max_id + 1);
    for id in 0..=max_id {
        let mut salt = 0u64;
        let bits = loop {
            let candidate = draw_glyph_bits(seed, id as u64, salt);
            let ok = chain.iter().all(|prev| {
                candidate
                    .iter()
                    .zip(prev.bits.iter())
                    .filter(|(a, b)| a != b)
                    .count()
                    >= min_cells
            });
            if ok {
                break candidate;
            }
            salt += 1;
        };
        chain.push(Glyph { bits });
    }
    chain
}

fn base_canvas(seed: u64, identity_id: usize) -> Vec<f64> {
    let h = IMAGE_SIZE;
    let w = IMAGE_SIZE;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;

    // Shared low-frequency texture, identical for every identity.
    let mut tex_rng = stream_rng(seed, "base-texture", 0, 0);
    let mut waves = Vec::new();
    for _ in 0..2 {
        let fy: f64 = tex_rng.random_range(0.7..1.8);
        let fx: f64 = tex_rng.random_range(0.7..1.8);
        let py: f64 = tex_rng.random_range(0.0..std::f64::consts::TAU);
        let px: f64 = tex_rng.random_range(0.0..std::f64::consts::TAU);
        waves.push((fy, fx, py, px));
    }

    // Identity bump amplitudes: the weak interior signature.
    let mut id_rng = stream_rng(seed, "bumps", identity_id as u64, 0);
    let amplitudes: Vec<f64> = BUMP_ZONES
        .iter()
        .map(|_| id_rng.random_range(-BUMP_MAX_AMPLITUDE..BUMP_MAX_AMPLITUDE))
        .collect();

    let mut canvas = vec![0.0; h * w];
    let sy = 0.38 * h as f64;
    let sx = 0.32 * w as f64;
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let oval = (-(dy * dy) / (2.0 * sy * sy) - (dx * dx) / (2.0 * sx * sx)).exp();
            let mut v = 0.32 + 0.33 * oval;
            for &(fy, fx, py, px) in &waves {
                v += 0.02
                    * (std::f64::consts::TAU * fy * y as f64 / h as f64 + py).cos()
                    * (std::f64::consts::TAU * fx * x as f64 / w as f64 + px).cos();
            }
            for (amp, &(by, bx, sigma)) in amplitudes.iter().zip(BUMP_ZONES.iter()) {
                let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            canvas[y * w + x] = v.clamp(0.05, 0.95);
        }
    }
    canvas
}

/// Deterministic identity template; same (identity_id, seed) gives a
/// bit-identical result.
pub fn generate_identity(identity_id: usize, seed: u64) -> IdentityTemplate {
    let glyph = glyph_chain(seed, identity_id).pop().expect("chain is non-empty");
    IdentityTemplate {
        identity_id,
        glyph,
        base_texture: base_canvas(seed, identity_id),
        seed,
    }
}

/// Generate templates for ids 0..n, sharing the glyph chain work.
pub fn generate_identities(n: usize, seed: u64) -> Vec<IdentityTemplate> {
    if n == 0 {
        return Vec::new();
    }
    let chain = glyph_chain(seed, n - 1);
    chain
        .into_iter()
        .enumerate()
        .map(|(id, glyph)| IdentityTemplate {
            identity_id: id,
            glyph,
            base_texture: base_canvas(seed, id),
            seed,
        })
        .collect()
}

/// Glyph bounding box (row0, col0, rows, cols) in pixels.
pub fn glyph_bounds() -> (usize, usize, usize, usize) {
    (GLYPH_ROW0, GLYPH_COL0, GLYPH_ROWS * GLYPH_BLOCK, GLYPH_COLS * GLYPH_BLOCK)
}

fn stamp_glyph(canvas: &mut [f64], glyph: &Glyph) {
    let w = IMAGE_SIZE;
    for gr in 0..GLYPH_ROWS {
        for gc in 0..GLYPH_COLS {
            let v = if glyph.bits[gr * GLYPH_COLS + gc] { GLYPH_LIGHT } else { GLYPH_DARK };
            for by in 0..GLYPH_BLOCK {
                for bx in 0..GLYPH_BLOCK {
                    let y = GLYPH_ROW0 + gr * GLYPH_BLOCK + by;
                    let x = GLYPH_COL0 + gc * GLYPH_BLOCK + bx;
                    canvas[y * w + x] = v;
                }
            }
        }
    }
}

fn translate_replicate(src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let sy = (y - dy).clamp(0, h as isize - 1) as usize;
            let sx = (x - dx).clamp(0, w as isize - 1) as usize;
            out[(y * w as isize + x) as usize] = src[sy * w + sx];
        }
    }
    out
}

/// Render one sample: brightness scale in [0.8, 1.2], translation up to
/// 2 px, additive Gaussian noise sigma 0.02, clipped to [0, 1].
pub fn render_sample(template: &IdentityTemplate, variation_seed: u64) -> Image {
    render_sample_channels(template, variation_seed, 1)
}

pub fn render_sample_channels(
    template: &IdentityTemplate,
    variation_seed: u64,
    channels: usize,
) -> Image {
    let mut rng = stream_rng(template.seed, "render", template.identity_id as u64, variation_seed);
    let brightness: f64 = rng.random_range(0.8..1.2);
    let dy: isize = rng.random_range(-2..=2);
    let dx: isize = rng.random_range(-2..=2);

    let mut canvas = template.base_texture.clone();
    stamp_glyph(&mut canvas, &template.glyph);
    let shifted = translate_replicate(&canvas, IMAGE_SIZE, IMAGE_SIZE, dy, dx);

    let hw = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = Vec::with_capacity(channels * hw);
    for ch in 0..channels {
        // Slight per-channel tint keeps the RGB variant non-degenerate.
        let tint = 1.0 - 0.03 * ch as f64;
        for &v in &shifted {
            let noise = gaussian(&mut rng) * 0.02;
            data.push((v * brightness * tint + noise).clamp(0.0, 1.0));
        }
    }
    let shape = if channels == 1 {
        vec![1, IMAGE_SIZE, IMAGE_SIZE]
    } else {
        vec![channels, IMAGE_SIZE, IMAGE_SIZE]
    };
    Image::new(Tensor::from_vec(data, &shape).expect("finite by construction"))
        .expect("clamped to [0, 1]")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniform draws.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Labeled image set with train/eval split and insider/attacker role pools.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub n_identities: usize,
    pub samples_per_id: usize,
    pub seed: u64,
    pub disjoint_roles: bool,
    pub channels: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == Split::Train).collect()
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == Split::Eval).collect()
    }

    /// Identity pool allowed to act as insiders.
    pub fn insider_ids(&self) -> Vec<usize> {
        if self.disjoint_roles {
            (0..self.n_identities / 2).collect()
        } else {
            (0..self.n_identities).collect()
        }
    }

    /// Identity pool whose images feed trigger training.
    pub fn attacker_ids(&self) -> Vec<usize> {
        if self.disjoint_roles {
            (self.n_identities / 2..self.n_identities).collect()
        } else {
            (0..self.n_identities).collect()
        }
    }

    pub fn indices_of_id(&self, id: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == id).collect()
    }

    /// SHA-256 over shapes, pixels, labels, and splits.
    pub fn content_hash(&self) -> String {
        let mut w = HashWriter::new();
        w.update(&(self.n_identities as u64).to_le_bytes());
        w.update(&(self.samples_per_id as u64).to_le_bytes());
        w.update(&(self.channels as u64).to_le_bytes());
        for (img, (label, split)) in
            self.images.iter().zip(self.labels.iter().zip(self.splits.iter()))
        {
            w.update_f64s(img.tensor().data());
            w.update(&(*label as u64).to_le_bytes());
            w.update(&[matches!(split, Split::Train) as u8]);
        }
        w.finish_hex()
    }
}

/// Deterministic dataset: n_identities x samples_per_id renders, 80/20
/// train/eval split per identity.
pub fn build_dataset(
    n_identities: usize,
    samples_per_id: usize,
    seed: u64,
    disjoint_roles: bool,
) -> Result<LabeledDataset> {
    build_dataset_channels(n_identities, samples_per_id, seed, disjoint_roles, 1)
}

pub fn build_dataset_channels(
    n_identities: usize,
    samples_per_id: usize,
    seed: u64,
    disjoint_roles: bool,
    channels: usize,
) -> Result<LabeledDataset> {
    if n_identities < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 identities, got {n_identities}"
        )));
    }
    if samples_per_id == 0 {
        return Err(Error::Parameter("samples_per_id must be >= 1".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Parameter(format!("channels must be 1 or 3, got {channels}")));
    }
    let templates = generate_identities(n_identities, seed);
    let train_per_id = ((samples_per_id as f64) * 0.8).ceil() as usize;
    let mut images = Vec::with_capacity(n_identities * samples_per_id);
    let mut labels = Vec::with_capacity(n_identities * samples_per_id);
    let mut splits = Vec::with_capacity(n_identities * samples_per_id);
    for t in &templates {
        for k in 0..samples_per_id {
            images.push(render_sample_channels(t, k as u64, channels));
            labels.push(t.identity_id);
            splits.push(if k < train_per_id { Split::Train } else { Split::Eval });
        }
    }
    Ok(LabeledDataset {
        images,
        labels,
        splits,
        n_identities,
        samples_per_id,
        seed,
        disjoint_roles,
        channels,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    label: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    generator_version: u32,
    n_identities: usize,
    samples_per_id: usize,
    seed: u64,
    disjoint_roles: bool,
    channels: usize,
    images: Vec<ManifestEntry>,
}

/// Export as a directory: `manifest.json` plus one FBTN tensor per image.
pub fn export_dataset(data: &LabeledDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut entries = Vec::with_capacity(data.len());
    for (i, img) in data.images.iter().enumerate() {
        let file = format!("images/img_{i:05}.fbtn");
        fbtn::save(&dir.join(&file), img.tensor())?;
        entries.push(ManifestEntry { file, label: data.labels[i], split: data.splits[i] });
    }
    let manifest = Manifest {
        schema_version: 1,
        generator_version: GENERATOR_VERSION,
        n_identities: data.n_identities,
        samples_per_id: data.samples_per_id,
        seed: data.seed,
        disjoint_roles: data.disjoint_roles,
        channels: data.channels,
        images: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Import a dataset directory written by [`export_dataset`] (or any
/// user-supplied directory of FBTN images with a matching manifest).
pub fn import_dataset(dir: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    if manifest.schema_version != 1 {
        return Err(Error::Format(format!(
            "unsupported manifest schema {}",
            manifest.schema_version
        )));
    }
    let mut images = Vec::with_capacity(manifest.images.len());
    let mut labels = Vec::with_capacity(manifest.images.len());
    let mut splits = Vec::with_capacity(manifest.images.len());
    for e in &manifest.images {
        let t = fbtn::load(&dir.join(&e.file))?;
        images.push(Image::new(t)?);
        labels.push(e.label);
        splits.push(e.split);
    }
    Ok(LabeledDataset {
        images,
        labels,
        splits,
        n_identities: manifest.n_identities,
        samples_per_id: manifest.samples_per_id,
        seed: manifest.seed,
        disjoint_roles: manifest.disjoint_roles,
        channels: manifest.channels,
    })
}

/// First train render of every identity, the canonical enrollment set.
pub fn enrollment_images(data: &LabeledDataset) -> BTreeMap<usize, Image> {
    let mut out = BTreeMap::new();
    for i in 0..data.len() {
        if data.splits[i] == Split::Train {
            out.entry(data.labels[i]).or_insert_with(|| data.images[i].clone());
        }
    }
    out
}

/// Cheap shared handle for fan-out over read-only images.
pub type SharedImages = Arc<Vec<Image>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_deterministic() {
        let a = generate_identity(3, 99);
        let b = generate_identity(3, 99);
        assert_eq!(a.glyph, b.glyph);
        assert_eq!(a.base_texture, b.base_texture);
    }

    #[test]
    fn glyphs_differ_by_at_least_quarter() {
        let ids = generate_identities(16, 7);
        let min = (Glyph::pixel_area() as f64 * GLYPH_MIN_DISTANCE).ceil() as usize;
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                assert!(
                    ids[i].glyph.pixel_distance(&ids[j].glyph) >= min,
                    "glyphs {i} and {j} too close"
                );
            }
        }
    }

    #[test]
    fn glyph_box_inside_eye_band() {
        let (row0, _, rows, _) = glyph_bounds();
        let (band_lo, band_hi) = eye_band_rows(IMAGE_SIZE);
        assert!(row0 >= band_lo);
        assert!(row0 + rows <= band_hi);
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let t = generate_identity(0, 5);
        let a = render_sample(&t, 11);
        let b = render_sample(&t, 11);
        assert_eq!(a.tensor().data(), b.tensor().data());
        assert!(a.tensor().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = render_sample(&t, 12);
        assert_ne!(a.tensor().data(), c.tensor().data());
    }

    #[test]
    fn dataset_partition_and_roles() {
        let d = build_dataset(6, 5, 1, true).unwrap();
        assert_eq!(d.len(), 30);
        let insiders = d.insider_ids();
        let attackers = d.attacker_ids();
        assert!(insiders.iter().all(|i| !attackers.contains(i)));
        assert_eq!(insiders.len() + attackers.len(), 6);
        // 80/20: 4 train, 1 eval per identity
        assert_eq!(d.train_indices().len(), 24);
        assert_eq!(d.eval_indices().len(), 6);
    }

    #[test]
    fn dataset_hash_stable() {
        let a = build_dataset(4, 3, 42, false).unwrap();
        let b = build_dataset(4, 3, 42, false).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = build_dataset(4, 3, 43, false).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn too_few_identities_is_parameter_error() {
        assert!(matches!(build_dataset(1, 3, 0, false), Err(Error::Parameter(_))));
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(3, 2, 8, false).unwrap();
        export_dataset(&d, dir.path()).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), d.len());
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.splits, d.splits);
        // pixels round-trip at f32 storage precision
        for (a, b) in back.images.iter().zip(d.images.iter()) {
            for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rgb_variant_builds() {
        let d = build_dataset_channels(2, 2, 3, false, 3).unwrap();
        assert_eq!(d.images[0].dims(), (3, IMAGE_SIZE, IMAGE_SIZE));
    }
}
