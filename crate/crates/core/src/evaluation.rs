//! Localization and classification metrics.
//!
//! IoBB divides the intersection by the *predicted* box's area, so it is not
//! symmetric. An image counts as localized for a class when at least one
//! predicted box reaches IoBB strictly above the threshold against any
//! ground-truth box of that class. False positives are predicted boxes that
//! reach no ground-truth box, averaged over the annotated images of the class.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{format_err, Error, Result};
use crate::localization::{BBox, BoxRecord};

pub const DEFAULT_IOBB_THRESHOLD: f64 = 0.5;

/// Intersection area over predicted-box area on the pixel grid.
pub fn iobb(pred: &BBox, gt: &BBox) -> f64 {
    let iw = pred.right().min(gt.right()).saturating_sub(pred.x.max(gt.x));
    let ih = pred.bottom().min(gt.bottom()).saturating_sub(pred.y.max(gt.y));
    (iw * ih) as f64 / pred.area() as f64
}

/// Ground-truth boxes per image and image-level labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    num_classes: usize,
    labels: BTreeMap<String, Vec<bool>>,
    boxes: BTreeMap<String, Vec<BBox>>,
}

impl AnnotationSet {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    /// Builds and validates: every box's image has labels, class ids are in
    /// range, and boxes fit the `(width, height)` image when given.
    pub fn from_parts(
        num_classes: usize,
        labels: BTreeMap<String, Vec<bool>>,
        boxes: &[BoxRecord],
        image_size: Option<(usize, usize)>,
    ) -> Result<Self> {
        let mut set = Self::new(num_classes);
        for (id, l) in labels {
            set.add_image(&id, l)?;
        }
        for r in boxes {
            set.add_box(&r.image_id, r.bbox, image_size)?;
        }
        Ok(set)
    }

    pub fn add_image(&mut self, image_id: &str, labels: Vec<bool>) -> Result<()> {
        if labels.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "image {image_id}: {} labels for {} classes",
                labels.len(),
                self.num_classes
            )));
        }
        self.labels.insert(image_id.to_owned(), labels);
        Ok(())
    }

    pub fn add_box(&mut self, image_id: &str, bbox: BBox, image_size: Option<(usize, usize)>) -> Result<()> {
        if !self.labels.contains_key(image_id) {
            return Err(Error::InvalidArgument(format!("box for unlabeled image {image_id}")));
        }
        if bbox.class_id >= self.num_classes {
            return Err(Error::InvalidArgument(format!("class {} out of range", bbox.class_id)));
        }
        if bbox.w == 0 || bbox.h == 0 {
            return Err(Error::InvalidArgument(format!("empty box on image {image_id}")));
        }
        if let Some((w, h)) = image_size {
            if !bbox.fits_in(w, h) {
                return Err(Error::InvalidArgument(format!("box {bbox:?} outside {w}x{h} image {image_id}")));
            }
        }
        self.boxes.entry(image_id.to_owned()).or_default().push(bbox);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &BTreeMap<String, Vec<bool>> {
        &self.labels
    }

    pub fn boxes(&self, image_id: &str) -> &[BBox] {
        self.boxes.get(image_id).map_or(&[], Vec::as_slice)
    }

    /// Images with at least one box of `class_id`, in id order.
    pub fn annotated_images(&self, class_id: usize) -> impl Iterator<Item = &str> {
        self.boxes
            .iter()
            .filter(move |(_, b)| b.iter().any(|b| b.class_id == class_id))
            .map(|(id, _)| id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocMetrics {
    pub accuracy: f64,
    pub avg_false_positives: f64,
    pub images: usize,
    pub gt_boxes: usize,
}

/// Per-class localization accuracy and average false positives; `None` for
/// classes without annotated images.
pub fn localization_metrics(
    preds: &BTreeMap<String, Vec<BBox>>,
    gts: &AnnotationSet,
    iobb_threshold: f64,
) -> Result<Vec<Option<LocMetrics>>> {
    if !(iobb_threshold > 0.0 && iobb_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoBB threshold {iobb_threshold} outside (0, 1)"
        )));
    }
    Ok((0..gts.num_classes())
        .map(|k| {
            let mut images = 0;
            let mut hits = 0;
            let mut false_pos = 0;
            let mut gt_boxes = 0;
            for id in gts.annotated_images(k) {
                images += 1;
                let gt: Vec<&BBox> = gts.boxes(id).iter().filter(|b| b.class_id == k).collect();
                gt_boxes += gt.len();
                let pred = preds.get(id).map_or(&[][..], Vec::as_slice);
                let mut localized = false;
                for p in pred.iter().filter(|b| b.class_id == k) {
                    if gt.iter().any(|g| iobb(p, g) > iobb_threshold) {
                        localized = true;
                    } else {
                        false_pos += 1;
                    }
                }
                hits += usize::from(localized);
            }
            (images > 0).then(|| LocMetrics {
                accuracy: hits as f64 / images as f64,
                avg_false_positives: false_pos as f64 / images as f64,
                images,
                gt_boxes,
            })
        })
        .collect())
}

/// Mann–Whitney AUC: `P(s_pos > s_neg) + ½·P(s_pos = s_neg)`, from midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined("need at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (doubled) midranks of positives keeps everything integral
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the midrank (i + j + 2) / 2
        let mid2 = (i + j + 2) as u64;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank2_pos += mid2 * pos;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    pub auc: Option<f64>,
    pub loc: Option<LocMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iobb_threshold: f64,
    pub classes: Vec<ClassReport>,
}

/// Full report: AUC over every image that has both scores and labels, and
/// localization over the annotated images.
pub fn evaluate(
    preds: &BTreeMap<String, Vec<BBox>>,
    gts: &AnnotationSet,
    scores: &BTreeMap<String, Vec<f64>>,
    iobb_threshold: f64,
) -> Result<EvalReport> {
    let loc = localization_metrics(preds, gts, iobb_threshold)?;
    let classes = loc
        .into_iter()
        .enumerate()
        .map(|(k, loc)| {
            let (s, y): (Vec<f64>, Vec<bool>) = gts
                .labels()
                .iter()
                .filter_map(|(id, l)| scores.get(id).and_then(|s| s.get(k)).map(|&s| (s, l[k])))
                .unzip();
            let auc = match roc_auc(&s, &y) {
                Ok(a) => Some(a),
                Err(Error::AucUndefined(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(ClassReport { class_id: k, auc, loc })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        iobb_threshold,
        classes,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.4}"))
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5}  {:>7}  {:>12}  {:>8}  {:>6}  {:>5}",
            "class",
            "auc",
            format!("acc@{}", self.iobb_threshold),
            "avg_fp",
            "images",
            "boxes"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:>5}  {:>7}  {:>12}  {:>8}  {:>6}  {:>5}",
                c.class_id,
                opt(c.auc),
                opt(c.loc.map(|l| l.accuracy)),
                opt(c.loc.map(|l| l.avg_false_positives)),
                c.loc.map_or(0, |l| l.images),
                c.loc.map_or(0, |l| l.gt_boxes),
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_id,auc,loc_accuracy,avg_false_positives,images,boxes\n");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                c.class_id,
                opt(c.auc),
                opt(c.loc.map(|l| l.accuracy)),
                opt(c.loc.map(|l| l.avg_false_positives)),
                c.loc.map_or(0, |l| l.images),
                c.loc.map_or(0, |l| l.gt_boxes),
            );
        }
        s
    }
}

/// Groups box records by image id.
pub fn group_boxes(records: &[BoxRecord]) -> BTreeMap<String, Vec<BBox>> {
    let mut out: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for r in records {
        out.entry(r.image_id.clone()).or_default().push(r.bbox);
    }
    out
}

/// Writes `image_id,<prefix>_0,...,<prefix>_{K-1}` rows.
fn write_table<W: Write, T: ToString>(out: W, prefix: &str, rows: &BTreeMap<String, Vec<T>>) -> Result<()> {
    let k = rows.values().next().map_or(0, Vec::len);
    let mut wr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["image_id".to_owned()];
    header.extend((0..k).map(|i| format!("{prefix}_{i}")));
    wr.write_record(&header)?;
    for (id, vals) in rows {
        if vals.len() != k {
            return Err(Error::InvalidArgument(format!("image {id}: ragged row")));
        }
        let mut rec = vec![id.clone()];
        rec.extend(vals.iter().map(T::to_string));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

fn read_table<R: Read, T>(
    input: R,
    prefix: &'static str,
    what: &'static str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<BTreeMap<String, Vec<T>>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rd.headers()?.clone();
    let k = header.len().saturating_sub(1);
    let ok = header.get(0) == Some("image_id")
        && k > 0
        && (0..k).all(|i| header.get(i + 1) == Some(format!("{prefix}_{i}").as_str()));
    if !ok {
        return Err(format_err(what, format!("unexpected header {header:?}")));
    }
    let mut out = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let vals = (1..=k)
            .map(|i| parse(&rec[i]).ok_or_else(|| format_err(what, format!("bad value {:?}", &rec[i]))))
            .collect::<Result<Vec<T>>>()?;
        out.insert(rec[0].to_owned(), vals);
    }
    Ok(out)
}

pub fn write_labels_csv<W: Write>(out: W, labels: &BTreeMap<String, Vec<bool>>) -> Result<()> {
    let rows: BTreeMap<String, Vec<u8>> = labels
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().map(|&b| u8::from(b)).collect()))
        .collect();
    write_table(out, "label", &rows)
}

pub fn read_labels_csv<R: Read>(input: R) -> Result<BTreeMap<String, Vec<bool>>> {
    read_table(input, "label", "labels CSV", |s| match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    })
}

pub fn write_scores_csv<W: Write>(out: W, scores: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    write_table(out, "score", scores)
}

pub fn read_scores_csv<R: Read>(input: R) -> Result<BTreeMap<String, Vec<f64>>> {
    read_table(input, "score", "scores CSV", |s| s.parse().ok())
}
