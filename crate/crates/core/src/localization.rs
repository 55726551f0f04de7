//! From spatial maps to boxes.
//!
//! Two inference paths are provided: PCAM thresholds the probability map
//! directly (`p ≥ τ`, default 0.9); the CAM baseline rescales the raw score
//! map to `[0, 255]` per image and keeps pixels `≥ 180`. Both upsample the
//! feature-resolution map to image pixels by nearest neighbour, then emit
//! the tight bounding box of every 8-connected region.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{format_err, shape_err, Error, Result};
use crate::head::{ProbabilityMap, ScoreMap};
use crate::tensor::Grid;

pub const DEFAULT_TAU: f64 = 0.9;
pub const CAM_THRESHOLD: u8 = 180;

pub type BinaryMask = Grid<bool>;

/// Axis-aligned box covering pixels `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub class_id: usize,
    pub score: f64,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize, class_id: usize) -> Self {
        Self {
            x,
            y,
            w,
            h,
            class_id,
            score: 1.0,
        }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width && self.bottom() <= height
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y..self.bottom()).contains(&row) && (self.x..self.right()).contains(&col)
    }
}

/// `p ≥ τ` elementwise.
pub fn threshold_probability_map(p: &ProbabilityMap, tau: f64) -> Result<BinaryMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside (0, 1)")));
    }
    Ok(p.grid().map(|&v| v >= tau))
}

/// Per-image `[0, 255]` rescaling of a CAM and its `≥ 180` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCam {
    pub values: Grid<u8>,
    pub mask: BinaryMask,
}

pub fn normalize_cam_255(s: &ScoreMap) -> NormalizedCam {
    let (lo, hi) = s
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let values = if hi > lo {
        s.map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
    } else {
        s.map(|_| 0u8)
    };
    let mask = values.map(|&u| u >= CAM_THRESHOLD);
    NormalizedCam { values, mask }
}

/// One 8-connected region; pixels `(row, col)` in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    fn bounds(&self) -> (usize, usize, usize, usize) {
        self.pixels.iter().fold(
            (usize::MAX, usize::MAX, 0, 0),
            |(r0, c0, r1, c1), &(r, c)| (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        )
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // smaller index wins, so roots are the earliest raster pixel
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Maximal 8-connected components, numbered in raster order of each
/// component's first pixel. Two-pass union-find labeling.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = mask.dims();
    let m = mask.data();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !m[i] {
                continue;
            }
            // previously visited neighbours: W, NW, N, NE
            if c > 0 && m[i - 1] {
                union(&mut parent, i, i - 1);
            }
            if r > 0 {
                let up = i - w;
                if m[up] {
                    union(&mut parent, i, up);
                }
                if c > 0 && m[up - 1] {
                    union(&mut parent, i, up - 1);
                }
                if c + 1 < w && m[up + 1] {
                    union(&mut parent, i, up + 1);
                }
            }
        }
    }
    let mut label_of_root = vec![usize::MAX; h * w];
    let mut comps: Vec<Component> = Vec::new();
    for i in 0..h * w {
        if !m[i] {
            continue;
        }
        let root = find(&mut parent, i);
        if label_of_root[root] == usize::MAX {
            label_of_root[root] = comps.len();
            comps.push(Component { pixels: Vec::new() });
        }
        comps[label_of_root[root]].pixels.push((i / w, i % w));
    }
    comps
}

/// Tight boxes of every component with at least `min_area` pixels, sorted by
/// descending score (max probability inside the component, or 1.0 without a
/// map) with raster order breaking ties.
pub fn boxes_from_mask(
    mask: &BinaryMask,
    p: Option<&ProbabilityMap>,
    class_id: usize,
    min_area: usize,
) -> Result<Vec<BBox>> {
    if let Some(p) = p {
        if p.dims() != mask.dims() {
            return Err(shape_err(format!(
                "mask {:?} and probability map {:?} differ in shape",
                mask.dims(),
                p.dims()
            )));
        }
    }
    let mut boxes: Vec<BBox> = connected_components(mask)
        .into_iter()
        .filter(|comp| comp.pixels.len() >= min_area.max(1))
        .map(|comp| {
            let (r0, c0, r1, c1) = comp.bounds();
            let score = p.map_or(1.0, |p| {
                comp.pixels
                    .iter()
                    .map(|&(r, c)| *p.grid().get(r, c))
                    .fold(f64::NEG_INFINITY, f64::max)
            });
            BBox {
                x: c0,
                y: r0,
                w: c1 - c0 + 1,
                h: r1 - r0 + 1,
                class_id,
                score,
            }
        })
        .collect();
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(boxes)
}

/// PCAM path: upsample the probability map by `factor`, threshold at `tau`,
/// and box the regions.
pub fn localize_probability_map(
    p: &ProbabilityMap,
    factor: usize,
    tau: f64,
    class_id: usize,
) -> Result<(ProbabilityMap, Vec<BBox>)> {
    let up = ProbabilityMap::new(p.grid().upsample_nearest(factor, factor))?;
    let mask = threshold_probability_map(&up, tau)?;
    let boxes = boxes_from_mask(&mask, Some(&up), class_id, 1)?;
    Ok((up, boxes))
}

/// CAM baseline path: normalize to `[0, 255]`, upsample, keep `≥ 180`.
/// Box scores are the normalized values divided by 255.
pub fn localize_cam(s: &ScoreMap, factor: usize, class_id: usize) -> Result<(Grid<u8>, Vec<BBox>)> {
    let norm = normalize_cam_255(s);
    let values = norm.values.upsample_nearest(factor, factor);
    let mask = norm.mask.upsample_nearest(factor, factor);
    let pseudo = ProbabilityMap::new(values.map(|&u| f64::from(u) / 255.0))?;
    let boxes = boxes_from_mask(&mask, Some(&pseudo), class_id, 1)?;
    Ok((values, boxes))
}

/// A box tied to an image.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRecord {
    pub image_id: String,
    pub bbox: BBox,
}

pub const BOX_HEADER: [&str; 7] = ["image_id", "class_id", "x", "y", "w", "h", "score"];

/// Writes `image_id,class_id,x,y,w,h[,score]` rows with LF endings. The
/// score column is omitted for ground truth.
pub fn write_boxes_csv<W: Write>(out: W, records: &[BoxRecord], with_score: bool) -> Result<()> {
    let mut wr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let ncol = if with_score { 7 } else { 6 };
    wr.write_record(&BOX_HEADER[..ncol])?;
    for r in records {
        let b = &r.bbox;
        let mut row = vec![
            r.image_id.clone(),
            b.class_id.to_string(),
            b.x.to_string(),
            b.y.to_string(),
            b.w.to_string(),
            b.h.to_string(),
        ];
        if with_score {
            row.push(b.score.to_string());
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads either box CSV flavour; a missing score column reads as 1.0.
pub fn read_boxes_csv<R: Read>(input: R) -> Result<Vec<BoxRecord>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    let with_score = match header.len() {
        7 if header == BOX_HEADER => true,
        6 if header == BOX_HEADER[..6] => false,
        _ => return Err(format_err("box CSV", format!("unexpected header {header:?}"))),
    };
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| format_err("box CSV", format!("row {}: bad integer {:?}", line + 2, &rec[i])))
        };
        let bbox = BBox {
            class_id: field(1)?,
            x: field(2)?,
            y: field(3)?,
            w: field(4)?,
            h: field(5)?,
            score: if with_score {
                rec[6]
                    .parse()
                    .map_err(|_| format_err("box CSV", format!("row {}: bad score", line + 2)))?
            } else {
                1.0
            },
        };
        if bbox.w == 0 || bbox.h == 0 {
            return Err(format_err("box CSV", format!("row {}: empty box", line + 2)));
        }
        out.push(BoxRecord {
            image_id: rec[0].to_owned(),
            bbox,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn pmap(rows: &[Vec<f64>]) -> ProbabilityMap {
        ProbabilityMap::new(Grid::from_rows(rows).unwrap()).unwrap()
    }

    fn mask(rows: &[&str]) -> BinaryMask {
        let rows: Vec<Vec<bool>> = rows.iter().map(|r| r.chars().map(|c| c == '#').collect()).collect();
        Grid::from_rows(&rows).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let p = pmap(&[vec![0.95, 0.5], vec![0.91, 0.89]]);
        let m = threshold_probability_map(&p, 0.9).unwrap();
        assert_eq!(m.data(), &[true, false, true, false]);

        let p = pmap(&[vec![0.1, 0.2]]);
        let m = threshold_probability_map(&p, 0.9).unwrap();
        assert!(m.data().iter().all(|&v| !v));
        assert!(boxes_from_mask(&m, Some(&p), 0, 1).unwrap().is_empty());

        let p = pmap(&[vec![0.9, 0.9]]);
        assert!(threshold_probability_map(&p, 0.9).unwrap().data().iter().all(|&v| v));

        assert!(threshold_probability_map(&p, 1.0).is_err());
        assert!(threshold_probability_map(&p, 0.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = Grid::from_rows(&[vec![-2.0, 2.0, 0.0]]).unwrap();
        let n = normalize_cam_255(&s);
        assert_eq!(n.values.data(), &[0, 255, 128]);
        assert_eq!(n.mask.data(), &[false, true, false]);

        let n = normalize_cam_255(&Grid::filled(3, 3, 4.2));
        assert!(n.values.data().iter().all(|&v| v == 0));
        assert!(n.mask.data().iter().all(|&v| !v));
    }

    #[test]
    fn component_examples() {
        assert_eq!(connected_components(&mask(&["#.", ".#"])).len(), 1);
        assert_eq!(connected_components(&mask(&["#.#"])).len(), 2);
        assert!(connected_components(&mask(&["...", "..."])).is_empty());
        // U shape merges late; labels follow first pixels
        let comps = connected_components(&mask(&["#.#.#", "#.#..", "###.#"]));
        assert_eq!(comps.len(), 3);
        assert_eq!(comps[0].pixels[0], (0, 0));
        assert_eq!(comps[1].pixels[0], (0, 4));
        assert_eq!(comps[2].pixels[0], (2, 4));
        assert_eq!(comps[0].pixels.len(), 7);
    }

    #[test]
    fn box_examples() {
        let mut m = Grid::filled(8, 8, false);
        m.set(3, 5, true);
        let b = boxes_from_mask(&m, None, 1, 1).unwrap();
        assert_eq!(b, vec![BBox { x: 5, y: 3, w: 1, h: 1, class_id: 1, score: 1.0 }]);

        let m = mask(&["....", "..#.", "..#.", "..#.", "..##"]);
        let b = boxes_from_mask(&m, None, 0, 1).unwrap();
        assert_eq!((b[0].x, b[0].y, b[0].w, b[0].h), (2, 1, 2, 4));

        assert!(boxes_from_mask(&Grid::filled(3, 3, false), None, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn boxes_sorted_by_score_then_raster() {
        let m = mask(&["#.#.#"]);
        let p = pmap(&[vec![0.5, 0.0, 0.9, 0.0, 0.5]]);
        let b = boxes_from_mask(&m, Some(&p), 0, 1).unwrap();
        let xs: Vec<usize> = b.iter().map(|b| b.x).collect();
        assert_eq!(xs, [2, 0, 4]);
        assert!(boxes_from_mask(&m, Some(&pmap(&[vec![0.5]])), 0, 1).is_err());
    }

    #[test]
    fn min_area_filters_components() {
        let m = mask(&["##..#"]);
        assert_eq!(boxes_from_mask(&m, None, 0, 2).unwrap().len(), 1);
    }

    #[test]
    fn localize_paths_use_image_pixels() {
        let p = pmap(&[vec![0.1, 0.95], vec![0.2, 0.3]]);
        let (up, boxes) = localize_probability_map(&p, 8, 0.9, 0).unwrap();
        assert_eq!(up.dims(), (16, 16));
        assert_eq!(boxes.len(), 1);
        assert_eq!((boxes[0].x, boxes[0].y, boxes[0].w, boxes[0].h), (8, 0, 8, 8));
        assert_eq!(boxes[0].score, 0.95);

        let s = Grid::from_rows(&[vec![-1.0, 3.0], vec![2.9, 0.0]]).unwrap();
        let (vals, boxes) = localize_cam(&s, 4, 1).unwrap();
        assert_eq!(vals.dims(), (8, 8));
        assert_eq!(boxes.len(), 1);
        assert_eq!((boxes[0].x, boxes[0].y, boxes[0].w, boxes[0].h), (0, 0, 8, 8));
    }

    #[test]
    fn csv_layout() {
        let recs = vec![
            BoxRecord { image_id: "img7".into(), bbox: BBox { x: 1, y: 2, w: 3, h: 4, class_id: 1, score: 0.95 } },
            BoxRecord { image_id: "img8".into(), bbox: BBox::new(0, 0, 64, 64, 0) },
        ];
        let mut buf = Vec::new();
        write_boxes_csv(&mut buf, &recs, true).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "image_id,class_id,x,y,w,h,score\nimg7,1,1,2,3,4,0.95\nimg8,0,0,0,64,64,1\n"
        );
        assert_eq!(read_boxes_csv(&buf[..]).unwrap(), recs);

        let mut gt = Vec::new();
        write_boxes_csv(&mut gt, &recs, false).unwrap();
        assert!(String::from_utf8(gt.clone()).unwrap().starts_with("image_id,class_id,x,y,w,h\n"));
        assert_eq!(read_boxes_csv(&gt[..]).unwrap()[0].bbox.score, 1.0);

        assert!(read_boxes_csv(&b"a,b\n1,2\n"[..]).is_err());
        assert!(read_boxes_csv(&b"image_id,class_id,x,y,w,h\ni,0,0,0,0,1\n"[..]).is_err());
    }

    fn random_mask(rng: &mut Rng, h: usize, w: usize, density: f64) -> BinaryMask {
        Grid::new(h, w, (0..h * w).map(|_| rng.bernoulli(density)).collect()).unwrap()
    }

    #[test]
    fn boxes_are_tight() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let m = random_mask(&mut rng, 20, 24, 0.2);
            let comps = connected_components(&m);
            let boxes = boxes_from_mask(&m, None, 0, 1).unwrap();
            assert_eq!(boxes.len(), comps.len());
            for (b, comp) in boxes.iter().zip(&comps) {
                assert!(comp.pixels.iter().all(|&(r, c)| b.contains(r, c)));
                assert!(comp.pixels.iter().any(|&(r, _)| r == b.y));
                assert!(comp.pixels.iter().any(|&(r, _)| r == b.bottom() - 1));
                assert!(comp.pixels.iter().any(|&(_, c)| c == b.x));
                assert!(comp.pixels.iter().any(|&(_, c)| c == b.right() - 1));
            }
        }
    }

    proptest! {
        #[test]
        fn threshold_is_monotone(
            v in prop::collection::vec(0.0f64..=1.0, 1..50),
            t1 in 0.01f64..0.99,
            t2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let p = ProbabilityMap::new(Grid::new(1, v.len(), v).unwrap()).unwrap();
            let a = threshold_probability_map(&p, lo).unwrap();
            let b = threshold_probability_map(&p, hi).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(&x, &y)| !y || x));
        }

        #[test]
        fn normalize_is_affine_invariant(
            v in prop::collection::vec(-100_000i32..100_000, 2..60),
            k in -4i32..4,
            shift in -1000i32..1000,
        ) {
            // dyadic values keep s·2^k + shift exact
            let v: Vec<f64> = v.into_iter().map(|i| f64::from(i) / 1024.0).collect();
            let g = Grid::new(1, v.len(), v).unwrap();
            let scale = 2f64.powi(k);
            let g2 = g.map(|&s| s * scale + f64::from(shift));
            prop_assert_eq!(normalize_cam_255(&g).values, normalize_cam_255(&g2).values);
        }
    }
}
