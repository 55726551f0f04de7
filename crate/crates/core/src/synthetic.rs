//! Deterministic weak-localization dataset: noisy 64×64 images with filled
//! discs (class 0) and annuli (class 1). Labels are image-level; the tight
//! box of every blob is kept for evaluation only.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{read_labels_csv, write_labels_csv, AnnotationSet};
use crate::localization::{read_boxes_csv, write_boxes_csv, BBox, BoxRecord};
use crate::pgm::{read_pgm, to_u8_image, to_unit_image, write_pgm};
use crate::tensor::{Grid, Rng};

/// Placement attempts per blob before it is dropped.
const PLACEMENT_TRIES: usize = 200;
/// Minimum free pixels between blob boxes.
const BLOB_GAP: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    pub intensity: f64,
    pub noise_std: f64,
    pub positive_rate: f64,
    pub blobs_min: usize,
    pub blobs_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 100,
            image_size: 64,
            num_classes: 2,
            radius_min: 4,
            radius_max: 12,
            intensity: 0.6,
            noise_std: 0.15,
            positive_rate: 0.5,
            blobs_min: 1,
            blobs_max: 3,
        }
    }
}

impl SynthConfig {
    pub fn new(seed: u64, n_images: usize) -> Self {
        Self {
            seed,
            n_images,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > 2 {
            return bad(format!("num_classes must be 1 or 2, got {}", self.num_classes));
        }
        if self.radius_min == 0 || self.radius_min > self.radius_max {
            return bad(format!("bad radius range [{}, {}]", self.radius_min, self.radius_max));
        }
        if 2 * self.radius_max >= self.image_size {
            return bad(format!(
                "radius {} does not fit a {}px image",
                self.radius_max, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return bad(format!("positive rate {} outside [0, 1]", self.positive_rate));
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return bad(format!("bad blob count range [{}, {}]", self.blobs_min, self.blobs_max));
        }
        if !(self.noise_std >= 0.0) || !self.intensity.is_finite() {
            return bad("noise std and intensity must be finite, std >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image_id: String,
    /// Pixel values are multiples of 1/255, so PGM storage is lossless.
    pub image: Grid<f64>,
    pub labels: Vec<bool>,
    pub gt_boxes: Vec<BBox>,
}

/// Ring width of an annulus of outer radius `r`.
pub fn ring_thickness(r: usize) -> usize {
    (r / 3).max(2)
}

fn in_blob(class_id: usize, r: usize, d2: usize) -> bool {
    match class_id {
        0 => d2 <= r * r,
        _ => {
            let inner = r - ring_thickness(r);
            d2 > inner * inner && d2 <= r * r
        }
    }
}

pub fn image_id(index: usize) -> String {
    format!("img{index:05}")
}

fn render_sample(cfg: &SynthConfig, index: usize) -> SynthSample {
    let mut rng = Rng::stream(cfg.seed, index as u64);
    let size = cfg.image_size;
    let mut boxes: Vec<BBox> = Vec::new();
    for class_id in 0..cfg.num_classes {
        if !rng.bernoulli(cfg.positive_rate) {
            continue;
        }
        let count = rng.int_inclusive(cfg.blobs_min as i64, cfg.blobs_max as i64);
        for _ in 0..count {
            for _ in 0..PLACEMENT_TRIES {
                let r = rng.int_inclusive(cfg.radius_min as i64, cfg.radius_max as i64) as usize;
                let cx = rng.int_inclusive(r as i64, (size - 1 - r) as i64) as usize;
                let cy = rng.int_inclusive(r as i64, (size - 1 - r) as i64) as usize;
                let cand = BBox::new(cx - r, cy - r, 2 * r + 1, 2 * r + 1, class_id);
                let clear = boxes.iter().all(|b| {
                    cand.x >= b.right() + BLOB_GAP
                        || b.x >= cand.right() + BLOB_GAP
                        || cand.y >= b.bottom() + BLOB_GAP
                        || b.y >= cand.bottom() + BLOB_GAP
                });
                if clear {
                    boxes.push(cand);
                    break;
                }
            }
        }
    }

    let mut blob = vec![false; size * size];
    for b in &boxes {
        let r = b.w / 2;
        let (cx, cy) = (b.x + r, b.y + r);
        for y in b.y..b.bottom() {
            for x in b.x..b.right() {
                let d2 = x.abs_diff(cx).pow(2) + y.abs_diff(cy).pow(2);
                if in_blob(b.class_id, r, d2) {
                    blob[y * size + x] = true;
                }
            }
        }
    }
    let data: Vec<f64> = blob
        .iter()
        .map(|&on| {
            let v = rng.normal(0.0, cfg.noise_std) + if on { cfg.intensity } else { 0.0 };
            // quantize so the PGM copy is exact
            f64::from((255.0 * v.clamp(0.0, 1.0)).round() as u8) / 255.0
        })
        .collect();

    let mut labels = vec![false; cfg.num_classes];
    for b in &boxes {
        labels[b.class_id] = true;
    }
    SynthSample {
        image_id: image_id(index),
        image: Grid::new(size, size, data).expect("square image"),
        labels,
        gt_boxes: boxes,
    }
}

/// Renders `n_images` samples. Every sample draws from its own stream of the
/// seed, so rendering runs in parallel with sequential-identical output.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    Ok((0..cfg.n_images)
        .into_par_iter()
        .map(|i| render_sample(cfg, i))
        .collect())
}

pub fn annotations(samples: &[SynthSample], num_classes: usize, image_size: usize) -> Result<AnnotationSet> {
    let mut set = AnnotationSet::new(num_classes);
    for s in samples {
        set.add_image(&s.image_id, s.labels.clone())?;
        for b in &s.gt_boxes {
            set.add_box(&s.image_id, *b, Some((image_size, image_size)))?;
        }
    }
    Ok(set)
}

/// Writes `images/{id}.pgm`, `labels.csv`, `gt_boxes.csv` and `config.json`.
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig, samples: &[SynthSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    for s in samples {
        write_pgm(dir.join("images").join(format!("{}.pgm", s.image_id)), &to_u8_image(&s.image))?;
    }
    let labels: BTreeMap<String, Vec<bool>> = samples
        .iter()
        .map(|s| (s.image_id.clone(), s.labels.clone()))
        .collect();
    write_labels_csv(BufWriter::new(File::create(dir.join("labels.csv"))?), &labels)?;
    let boxes: Vec<BoxRecord> = samples
        .iter()
        .flat_map(|s| {
            s.gt_boxes.iter().map(|b| BoxRecord {
                image_id: s.image_id.clone(),
                bbox: *b,
            })
        })
        .collect();
    write_boxes_csv(BufWriter::new(File::create(dir.join("gt_boxes.csv"))?), &boxes, false)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

/// Reads a dataset directory back; samples come out in image-id order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(SynthConfig, Vec<SynthSample>)> {
    let dir = dir.as_ref();
    let cfg: SynthConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let labels = read_labels_csv(BufReader::new(File::open(dir.join("labels.csv"))?))?;
    let boxes = read_boxes_csv(BufReader::new(File::open(dir.join("gt_boxes.csv"))?))?;
    let mut by_image: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for r in boxes {
        if !labels.contains_key(&r.image_id) {
            return Err(Error::InvalidArgument(format!("box for unlabeled image {}", r.image_id)));
        }
        by_image.entry(r.image_id).or_default().push(r.bbox);
    }
    labels
        .into_iter()
        .map(|(id, l)| {
            let image = to_unit_image(&read_pgm(dir.join("images").join(format!("{id}.pgm")))?);
            let gt_boxes = by_image.remove(&id).unwrap_or_default();
            Ok(SynthSample {
                image_id: id,
                image,
                labels: l,
                gt_boxes,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(|s| (cfg, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig::new(5, 20);
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
        let other = generate_dataset(&SynthConfig::new(6, 20)).unwrap();
        assert_ne!(generate_dataset(&cfg).unwrap(), other);
    }

    #[test]
    fn zero_rate_gives_negatives() {
        let cfg = SynthConfig {
            positive_rate: 0.0,
            ..SynthConfig::new(1, 30)
        };
        let data = generate_dataset(&cfg).unwrap();
        assert!(data.iter().all(|s| s.labels.iter().all(|&l| !l) && s.gt_boxes.is_empty()));
    }

    #[test]
    fn impossible_geometry_rejected() {
        let cfg = SynthConfig {
            radius_max: 32,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            positive_rate: 1.5,
            ..SynthConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn disc_box_is_centered_square() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            num_classes: 1,
            positive_rate: 1.0,
            blobs_max: 1,
            ..SynthConfig::new(3, 10)
        };
        for s in generate_dataset(&cfg).unwrap() {
            let b = s.gt_boxes[0];
            let r = b.w / 2;
            assert_eq!((b.w, b.h), (2 * r + 1, 2 * r + 1));
            let (cx, cy) = (b.x + r, b.y + r);
            assert!(*s.image.get(cy, cx) > 0.5);
            // tight: extreme rows and columns of the box hold blob pixels
            assert!(*s.image.get(b.y, cx) > 0.5 && *s.image.get(b.bottom() - 1, cx) > 0.5);
            assert!(*s.image.get(cy, b.x) > 0.5 && *s.image.get(cy, b.right() - 1) > 0.5);
            // and nothing outside the box is lit
            let lit = s.image.data().iter().filter(|&&v| v > 0.5).count();
            let inside = (b.y..b.bottom())
                .flat_map(|y| (b.x..b.right()).map(move |x| (y, x)))
                .filter(|&(y, x)| *s.image.get(y, x) > 0.5)
                .count();
            assert_eq!(lit, inside);
        }
    }

    #[test]
    fn rings_are_hollow() {
        for r in 4..=12 {
            let inner = r - ring_thickness(r);
            assert!(!in_blob(1, r, 0));
            assert!(in_blob(1, r, r * r));
            assert!(!in_blob(1, r, inner * inner));
            assert!(in_blob(0, r, 0));
        }
    }

    #[test]
    fn labels_match_boxes_and_bounds() {
        let data = generate_dataset(&SynthConfig::new(9, 600)).unwrap();
        let set = annotations(&data, 2, 64).unwrap();
        assert_eq!(set.labels().len(), 600);
        let mut positives = [0usize; 2];
        for s in &data {
            for k in 0..2 {
                assert_eq!(s.labels[k], s.gt_boxes.iter().any(|b| b.class_id == k));
                positives[k] += usize::from(s.labels[k]);
            }
            assert!(s.gt_boxes.iter().all(|b| b.fits_in(64, 64)));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for p in positives {
            let rate = p as f64 / 600.0;
            assert!((rate - 0.5).abs() <= 0.05, "{rate}");
        }
    }

    #[test]
    fn directory_round_trip() {
        let cfg = SynthConfig::new(2, 12);
        let data = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, &data).unwrap();
        let (cfg2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, data);
        let json = fs::read_to_string(dir.path().join("config.json")).unwrap();
        for key in ["seed", "n_images", "radius_min", "noise_std", "positive_rate", "blobs_max"] {
            assert!(json.contains(key));
        }
    }
}
