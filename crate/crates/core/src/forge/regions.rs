//! Binary spatial masks: the prefabricated facial-region set and
//! support-derived masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Facial region a mask selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Eye,
    Nose,
    Mouth,
    Cheek,
    Forehead,
    Background,
    Learned,
}

impl Region {
    pub const PREFAB: [Region; 6] = [
        Region::Eye,
        Region::Nose,
        Region::Mouth,
        Region::Cheek,
        Region::Forehead,
        Region::Background,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Region::Eye => "eye",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
            Region::Cheek => "cheek",
            Region::Forehead => "forehead",
            Region::Background => "background",
            Region::Learned => "learned",
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eye" => Ok(Region::Eye),
            "nose" => Ok(Region::Nose),
            "mouth" => Ok(Region::Mouth),
            "cheek" => Ok(Region::Cheek),
            "forehead" => Ok(Region::Forehead),
            "background" => Ok(Region::Background),
            "learned" => Ok(Region::Learned),
            other => Err(Error::Parameter(format!("unknown mask region '{other}'"))),
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary spatial mask over an h x w canvas. Values are exactly 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
    region: Region,
}

impl Mask {
    pub fn new(values: Vec<f64>, height: usize, width: usize, region: Region) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask of {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        if !values.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Parameter("mask values must be exactly 0 or 1".into()));
        }
        Ok(Mask { height, width, values, region })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] == 1.0
    }

    /// Fraction of pixels the mask occupies.
    pub fn cover_rate(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.values.clone(), &[self.height, self.width])
            .expect("mask values are finite by construction")
    }

    /// Intersection-over-union with another mask of the same dims.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Dimension("iou of differently sized masks".into()));
        }
        let mut inter = 0.0;
        let mut union = 0.0;
        for (a, b) in self.values.iter().zip(other.values.iter()) {
            if *a == 1.0 || *b == 1.0 {
                union += 1.0;
            }
            if *a == 1.0 && *b == 1.0 {
                inter += 1.0;
            }
        }
        Ok(if union == 0.0 { 0.0 } else { inter / union })
    }
}

/// Row span [lo*h, hi*h) with ceiling-rounded endpoints.
fn row_span(lo: f64, hi: f64, h: usize) -> (usize, usize) {
    let start = (lo * h as f64).ceil() as usize;
    let end = ((hi * h as f64).ceil() as usize).min(h);
    (start, end)
}

/// Rows of the canonical eye band, [start, end).
pub fn eye_band_rows(h: usize) -> (usize, usize) {
    row_span(0.29, 0.46, h)
}

fn center_cols(w: usize) -> (usize, usize) {
    (w / 4, w - w / 4)
}

/// A prefabricated region mask scaled to h x w. Geometry: the eye band and
/// forehead span the full width; nose and mouth take the center half-width;
/// cheeks are the two side rectangles beside them; background is the border
/// frame minus every other region.
pub fn prefab_mask(region: Region, h: usize, w: usize) -> Result<Mask> {
    if h < 10 || w < 10 {
        return Err(Error::Dimension(format!("prefab masks need at least 10x10, got {h}x{w}")));
    }
    let mut values = vec![0.0; h * w];
    let mut fill = |rows: (usize, usize), cols: (usize, usize), values: &mut Vec<f64>| {
        for r in rows.0..rows.1 {
            for c in cols.0..cols.1 {
                values[r * w + c] = 1.0;
            }
        }
    };
    match region {
        Region::Eye => fill(eye_band_rows(h), (0, w), &mut values),
        Region::Forehead => fill(row_span(0.10, 0.29, h), (0, w), &mut values),
        Region::Nose => fill(row_span(0.46, 0.63, h), center_cols(w), &mut values),
        Region::Mouth => fill(row_span(0.63, 0.77, h), center_cols(w), &mut values),
        Region::Cheek => {
            let rows = row_span(0.46, 0.77, h);
            let (c0, c1) = center_cols(w);
            fill(rows, (0, c0), &mut values);
            fill(rows, (c1, w), &mut values);
        }
        Region::Background => {
            let fw = (0.10 * h as f64).round() as usize;
            for r in 0..h {
                for c in 0..w {
                    if r < fw || r >= h - fw || c < fw || c >= w - fw {
                        values[r * w + c] = 1.0;
                    }
                }
            }
            // Carve out every named region so the frame stays disjoint.
            for other in [Region::Eye, Region::Nose, Region::Mouth, Region::Cheek, Region::Forehead]
            {
                let m = prefab_mask(other, h, w)?;
                for (v, o) in values.iter_mut().zip(m.values()) {
                    if *o == 1.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Region::Learned => {
            return Err(Error::Parameter("learned masks come from search, not prefab".into()))
        }
    }
    Mask::new(values, h, w, region)
}

/// Support indicator of a patch: 1 wherever any channel is nonzero.
pub fn mask_from_patch(p: &Tensor) -> Result<Mask> {
    let (c, h, w) = p.chw()?;
    let hw = h * w;
    let mut values = vec![0.0; hw];
    for ch in 0..c {
        for i in 0..hw {
            if p.data()[ch * hw + i] != 0.0 {
                values[i] = 1.0;
            }
        }
    }
    Mask::new(values, h, w, Region::Learned)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eye_band_rows_48() {
        // rows 14..=22 inclusive, cover 9/48 = 18.75%
        assert_eq!(eye_band_rows(48), (14, 23));
        let m = prefab_mask(Region::Eye, 48, 48).unwrap();
        assert!((m.cover_rate() - 0.1875).abs() < 1e-12);
        for r in 14..=22 {
            assert!(m.is_set(r, 0) && m.is_set(r, 47));
        }
        assert!(!m.is_set(13, 0) && !m.is_set(23, 0));
    }

    #[test]
    fn background_disjoint_from_core_regions() {
        let bg = prefab_mask(Region::Background, 48, 48).unwrap();
        for region in [Region::Eye, Region::Nose, Region::Mouth] {
            let m = prefab_mask(region, 48, 48).unwrap();
            let overlap: f64 = bg
                .values()
                .iter()
                .zip(m.values())
                .map(|(a, b)| a * b)
                .sum();
            assert_eq!(overlap, 0.0, "background overlaps {region}");
        }
        assert!(bg.cover_rate() > 0.0);
    }

    #[test]
    fn all_prefabs_are_binary_and_nonempty() {
        for region in Region::PREFAB {
            let m = prefab_mask(region, 48, 48).unwrap();
            assert!(m.values().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(m.cover_rate() > 0.0, "{region} is empty");
        }
    }

    #[test]
    fn mask_from_patch_support() {
        let zero = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(mask_from_patch(&zero).unwrap().cover_rate(), 0.0);

        let mut data = vec![0.0; 16];
        data[5] = 0.3;
        let p = Tensor::from_vec(data, &[1, 4, 4]).unwrap();
        let m = mask_from_patch(&p).unwrap();
        assert_eq!(m.cover_rate(), 1.0 / 16.0);
        assert!(m.is_set(1, 1));
    }

    #[test]
    fn mask_from_patch_shrinks_under_masking() {
        // support(p * m) is contained in m
        let p = Tensor::from_vec(vec![0.5, 0.0, 0.2, 0.9], &[1, 2, 2]).unwrap();
        let m = Mask::new(vec![1.0, 1.0, 0.0, 0.0], 2, 2, Region::Learned).unwrap();
        let masked: Vec<f64> = p
            .data()
            .iter()
            .zip(m.values())
            .map(|(a, b)| a * b)
            .collect();
        let support = mask_from_patch(&Tensor::from_vec(masked, &[1, 2, 2]).unwrap()).unwrap();
        for (s, orig) in support.values().iter().zip(m.values()) {
            assert!(*s <= *orig);
        }
    }

    #[test]
    fn non_binary_mask_rejected() {
        assert!(Mask::new(vec![0.5; 4], 2, 2, Region::Learned).is_err());
    }

    #[test]
    fn region_parsing_roundtrip() {
        for region in Region::PREFAB {
            let parsed: Region = region.name().parse().unwrap();
            assert_eq!(parsed, region);
        }
        assert!("eyebrow".parse::<Region>().is_err());
    }
}
