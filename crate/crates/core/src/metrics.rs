//! Segmentation scores: per-class IoU, instance-weighted iIoU, category
//! roll-ups, and multi-scale majority-vote prediction.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{resize_image, resize_labels, Scene};
use crate::grid::{GridError, GridModel};
use crate::tensor::{Shape, Tensor, IGNORE_LABEL};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction has {pred} pixels, ground truth {truth}")]
    SizeMismatch { pred: usize, truth: usize },
    #[error("class id {class} is out of range for {num_classes} classes")]
    ClassOutOfRange { class: u8, num_classes: usize },
    #[error("instance {id} of class {class} has no pixels")]
    EmptyInstance { class: usize, id: u16 },
    #[error("every scale was below the minimum grid input")]
    NoUsableScale,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Pixel counts with rows indexed by ground truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds one image. Pixels whose ground truth is [`IGNORE_LABEL`] are
    /// counted as ignored.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<(), MetricsError> {
        if pred.len() != truth.len() {
            return Err(MetricsError::SizeMismatch {
                pred: pred.len(),
                truth: truth.len(),
            });
        }
        let c = self.num_classes;
        for &v in pred.iter().chain(truth.iter().filter(|t| **t != IGNORE_LABEL)) {
            if v as usize >= c {
                return Err(MetricsError::ClassOutOfRange { class: v, num_classes: c });
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                self.ignored += 1;
            } else {
                self.counts[t as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "merging matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.num_classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.num_classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// Ground-truth pixel count per class.
    pub fn truth_counts(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|t| (0..self.num_classes).map(|p| self.get(t, p)).sum())
            .collect()
    }

    /// Rows and columns merged through `map` (class to category).
    pub fn rolled_up(&self, map: &CategoryMap) -> ConfusionMatrix {
        let k = map.num_categories();
        let mut out = ConfusionMatrix::new(k);
        for t in 0..self.num_classes {
            for p in 0..self.num_classes {
                out.counts[map.category(t) * k + map.category(p)] += self.get(t, p);
            }
        }
        out.ignored = self.ignored;
        out
    }
}

/// `TP / (TP + FP + FN)`, `None` when the class is absent from both truth
/// and prediction.
pub fn iou_from_counts(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let denom = tp + fp + fn_;
    (denom > 0).then(|| tp as f64 / denom as f64)
}

/// Per-class IoU and the mean over defined classes.
pub fn iou(cm: &ConfusionMatrix) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = (0..cm.num_classes)
        .map(|c| iou_from_counts(cm.true_positives(c), cm.false_positives(c), cm.false_negatives(c)))
        .collect();
    let mean = mean_defined(&per);
    (per, mean)
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Surjective map from class id to category id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub class_to_category: Vec<usize>,
}

impl CategoryMap {
    /// Background alone in category 0, object classes paired up.
    pub fn default_for(num_classes: usize) -> Self {
        CategoryMap {
            class_to_category: (0..num_classes).map(|c| if c == 0 { 0 } else { 1 + (c - 1) / 2 }).collect(),
        }
    }

    pub fn category(&self, class: usize) -> usize {
        self.class_to_category[class]
    }

    pub fn num_categories(&self) -> usize {
        self.class_to_category.iter().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> bool {
        let k = self.num_categories();
        (0..k).all(|c| self.class_to_category.contains(&c))
    }

    fn apply(&self, labels: &[u8]) -> Vec<u8> {
        labels
            .iter()
            .map(|&l| if l == IGNORE_LABEL { l } else { self.category(l as usize) as u8 })
            .collect()
    }
}

/// Instance sizes gathered over an evaluation set (first pass of iIoU).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceSizes {
    total: Vec<u64>,
    count: Vec<u64>,
}

fn instance_sizes(truth: &[u8], instances: &[u16]) -> HashMap<u16, (u8, u64)> {
    let mut sizes: HashMap<u16, (u8, u64)> = HashMap::new();
    for (&t, &id) in truth.iter().zip(instances) {
        if id != 0 && t != IGNORE_LABEL {
            sizes.entry(id).or_insert((t, 0)).1 += 1;
        }
    }
    sizes
}

impl InstanceSizes {
    pub fn new(num_classes: usize) -> Self {
        InstanceSizes {
            total: vec![0; num_classes],
            count: vec![0; num_classes],
        }
    }

    pub fn accumulate(&mut self, truth: &[u8], instances: &[u16]) {
        for (_, (class, size)) in instance_sizes(truth, instances) {
            self.total[class as usize] += size;
            self.count[class as usize] += 1;
        }
    }

    /// Mean instance size per class, `None` for classes without instances.
    pub fn averages(&self) -> Vec<Option<f64>> {
        self.total
            .iter()
            .zip(&self.count)
            .map(|(&t, &n)| (n > 0).then(|| t as f64 / n as f64))
            .collect()
    }
}

/// Weighted true positives and false negatives, unweighted false positives
/// (second pass of iIoU).
#[derive(Clone, Debug, PartialEq)]
pub struct IiouAccumulator {
    avg: Vec<Option<f64>>,
    itp: Vec<f64>,
    ifn: Vec<f64>,
    fp: Vec<u64>,
}

impl IiouAccumulator {
    pub fn new(avg_sizes: Vec<Option<f64>>) -> Self {
        let c = avg_sizes.len();
        IiouAccumulator {
            avg: avg_sizes,
            itp: vec![0.0; c],
            ifn: vec![0.0; c],
            fp: vec![0; c],
        }
    }

    /// A pixel of ground-truth instance `k` of class `c` weighs
    /// `avg_size[c] / size(k)`. Pixels of `c` without an instance id weigh 1.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], instances: &[u16]) -> Result<(), MetricsError> {
        if pred.len() != truth.len() || instances.len() != truth.len() {
            return Err(MetricsError::SizeMismatch {
                pred: pred.len(),
                truth: truth.len(),
            });
        }
        let sizes = instance_sizes(truth, instances);
        let c = self.avg.len();
        for ((&p, &t), &id) in pred.iter().zip(truth).zip(instances) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(MetricsError::ClassOutOfRange {
                    class: t.max(p),
                    num_classes: c,
                });
            }
            let (t, p) = (t as usize, p as usize);
            if let Some(avg) = self.avg[t] {
                let w = if id == 0 {
                    1.0
                } else {
                    let size = sizes[&id].1;
                    if size == 0 {
                        return Err(MetricsError::EmptyInstance { class: t, id });
                    }
                    avg / size as f64
                };
                if p == t {
                    self.itp[t] += w;
                } else {
                    self.ifn[t] += w;
                }
            }
            if p != t {
                self.fp[p] += 1;
            }
        }
        Ok(())
    }

    /// iIoU of every class that has instances; `None` elsewhere.
    pub fn scores(&self) -> Vec<Option<f64>> {
        (0..self.avg.len())
            .map(|c| {
                self.avg[c]?;
                let denom = self.itp[c] + self.fp[c] as f64 + self.ifn[c];
                (denom > 0.0).then(|| self.itp[c] / denom)
            })
            .collect()
    }
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pred: Vec<u8>,
    pub truth: Vec<u8>,
    pub instances: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: Option<f64>,
    pub per_class_iiou: Vec<Option<f64>>,
    pub mean_iiou: Option<f64>,
    pub per_category_iou: Vec<Option<f64>>,
    pub mean_category_iou: Option<f64>,
    pub per_category_iiou: Vec<Option<f64>>,
    pub mean_category_iiou: Option<f64>,
    /// Ground-truth pixels per class.
    pub pixel_counts: Vec<u64>,
    pub ignored_pixels: u64,
    pub images: usize,
}

fn iiou_scores(samples: &[Sample], num: usize, map: Option<&CategoryMap>) -> Result<Vec<Option<f64>>, MetricsError> {
    let relabel = |v: &[u8]| map.map_or_else(|| v.to_vec(), |m| m.apply(v));
    let mut sizes = InstanceSizes::new(num);
    for s in samples {
        sizes.accumulate(&relabel(&s.truth), &s.instances);
    }
    let mut acc = IiouAccumulator::new(sizes.averages());
    for s in samples {
        acc.accumulate(&relabel(&s.pred), &relabel(&s.truth), &s.instances)?;
    }
    Ok(acc.scores())
}

/// Class and category IoU / iIoU over a set of images. Average instance
/// sizes are computed over the whole set before any weighting.
pub fn evaluate(samples: &[Sample], num_classes: usize, categories: &CategoryMap) -> Result<MetricsReport, MetricsError> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for s in samples {
        cm.accumulate(&s.pred, &s.truth)?;
    }
    let (per_class_iou, mean_iou) = iou(&cm);
    let per_class_iiou = iiou_scores(samples, num_classes, None)?;
    let (per_category_iou, mean_category_iou) = iou(&cm.rolled_up(categories));
    let per_category_iiou = iiou_scores(samples, categories.num_categories(), Some(categories))?;
    Ok(MetricsReport {
        mean_iiou: mean_defined(&per_class_iiou),
        mean_category_iiou: mean_defined(&per_category_iiou),
        per_class_iou,
        mean_iou,
        per_class_iiou,
        per_category_iou,
        mean_category_iou,
        per_category_iiou,
        pixel_counts: cm.truth_counts(),
        ignored_pixels: cm.ignored,
        images: samples.len(),
    })
}

/// Per-pixel majority vote over label maps; ties go to the lowest class.
pub fn majority_vote(votes: &[Vec<u8>], num_classes: usize) -> Vec<u8> {
    let n = votes.first().map_or(0, Vec::len);
    let mut tally = vec![0u32; num_classes];
    (0..n)
        .map(|px| {
            tally.fill(0);
            for v in votes {
                tally[v[px] as usize] += 1;
            }
            let mut best = 0;
            for c in 1..num_classes {
                if tally[c] > tally[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Side length of `side` scaled by `scale`, rounded to nearest.
pub fn scaled_side(side: usize, scale: f64) -> usize {
    (side as f64 * scale).round() as usize
}

/// Predicts a `height x width` channel-major image at every scale (bilinear
/// resize, eval-mode forward, argmax, nearest resize back) and takes the
/// per-pixel majority vote. Scales that would shrink the input below the
/// grid's minimum are skipped with a warning.
pub fn multiscale_predict(
    model: &mut GridModel<f32>,
    image: &[f32],
    (height, width): (usize, usize),
    scales: &[f64],
) -> Result<Vec<u8>, MetricsError> {
    let channels = model.spec().in_channels;
    let min = model.spec().min_input_side();
    let mut votes = Vec::with_capacity(scales.len());
    for &s in scales {
        let (h, w) = (scaled_side(height, s), scaled_side(width, s));
        if h < min || w < min {
            warn!("skipping scale {s}: {h}x{w} is below the {min}x{min} minimum");
            continue;
        }
        let input = if (h, w) == (height, width) {
            image.to_vec()
        } else {
            resize_image(image, channels, (height, width), (h, w))
        };
        let t = Tensor::from_vec(Shape::new(1, channels, h, w), input).map_err(GridError::from)?;
        let labels = model.predict(&t)?.argmax_channels();
        votes.push(if (h, w) == (height, width) {
            labels
        } else {
            resize_labels(&labels, (h, w), (height, width))
        });
    }
    if votes.is_empty() {
        return Err(MetricsError::NoUsableScale);
    }
    Ok(majority_vote(&votes, model.spec().num_classes))
}

/// Multi-scale predictions for whole scenes, paired with their ground truth.
pub fn predict_scenes(model: &mut GridModel<f32>, scenes: &[Scene], scales: &[f64]) -> Result<Vec<Sample>, MetricsError> {
    scenes
        .iter()
        .map(|s| {
            let pred = multiscale_predict(model, &s.image, (s.height, s.width), scales)?;
            Ok(Sample {
                pred,
                truth: s.labels.clone(),
                instances: s.instances.clone(),
            })
        })
        .collect()
}

/// [`predict_scenes`] split over `threads` workers, each with its own copy
/// of the model. The result is independent of the thread count.
pub fn predict_scenes_parallel(
    model: &GridModel<f32>,
    scenes: &[Scene],
    scales: &[f64],
    threads: usize,
) -> Result<Vec<Sample>, MetricsError> {
    let threads = threads.clamp(1, scenes.len().max(1));
    if threads == 1 {
        return predict_scenes(&mut model.clone(), scenes, scales);
    }
    let chunk = scenes.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|part| {
                let mut local = model.clone();
                scope.spawn(move || predict_scenes(&mut local, part, scales))
            })
            .collect();
        let mut out = Vec::with_capacity(scenes.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}
