//! Confusion matrix, IoU, the C-vs-E consistency gap, and multi-scale
//! inference.

use serde::{Deserialize, Serialize};

use crate::edge::EdgeTarget;
use crate::error::{shape_err, Error, Result};
use crate::label::LabelMap;
use crate::model::{ParameterSet, TriangleNet};
use crate::tensor::{kernels, Tape, Tensor};

pub const MULTISCALE_SCALES: [f64; 3] = [0.75, 1.0, 1.25];

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(shape_err!("{} counts for {} classes", counts.len(), num_classes));
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap, ignore: u8) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(shape_err!(
                "prediction {}×{} vs truth {}×{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            ));
        }
        truth.validate(self.num_classes, ignore)?;
        for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            if t == ignore {
                continue;
            }
            if p as usize >= self.num_classes {
                return Err(Error::Data(format!(
                    "predicted class {} at pixel {} is outside [0, {})",
                    p, i, self.num_classes
                )));
            }
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(shape_err!("merging {} and {} classes", self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

pub fn iou_report(cm: &ConfusionMatrix) -> Result<IouReport> {
    let k = cm.num_classes;
    let mut per_class = Vec::with_capacity(k);
    let mut diag = 0;
    for c in 0..k {
        let tp = cm.get(c, c);
        diag += tp;
        let row: u64 = (0..k).map(|j| cm.get(c, j)).sum();
        let col: u64 = (0..k).map(|j| cm.get(j, c)).sum();
        let denom = row + col - tp;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("every class is absent; mIoU is undefined".into()));
    }
    Ok(IouReport {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        pixel_accuracy: diag as f64 / cm.total() as f64,
        per_class,
    })
}

/// Per-pixel argmax of `N×K×H×W` probabilities, ties to the lowest class.
pub fn argmax_labels(s: &Tensor) -> Result<Vec<LabelMap>> {
    let (n, k, h, w) = s.dims4()?;
    if k > 255 {
        return Err(shape_err!("{} classes do not fit a label map", k));
    }
    let plane = h * w;
    (0..n)
        .map(|b| {
            let base = b * k * plane;
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if s.data()[base + c * plane + p] > s.data()[base + best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, data)
        })
        .collect()
}

/// Mean `|C − E|` over valid pixels and all channels.
pub fn consistency_gap(c: &Tensor, e: &Tensor, target: &EdgeTarget) -> Result<f64> {
    if c.shape() != e.shape() || c.shape() != target.shape() {
        return Err(shape_err!(
            "consistency gap needs equal shapes, got C {:?}, E {:?}, target {:?}",
            c.shape(),
            e.shape(),
            target.shape()
        ));
    }
    let valid = target.valid_per_class();
    let mut sum = 0.0;
    let mut count = 0.0;
    for ((a, b), v) in c.data().iter().zip(e.data()).zip(valid.data()) {
        sum += v * (a - b).abs();
        count += v;
    }
    if count == 0.0 {
        return Err(Error::Data("consistency gap over a target with no valid pixels".into()));
    }
    Ok(sum / count)
}

fn round_to_16(v: f64) -> usize {
    (((v / 16.0).round() as usize).max(1)) * 16
}

/// Segmentation probabilities of a normalised `1×3×H×W` image averaged over
/// `scales`, resized back to `H×W` and renormalised per pixel.
pub fn multiscale_infer(
    net: &TriangleNet,
    params: &ParameterSet,
    image: &Tensor,
    scales: &[f64],
) -> Result<Tensor> {
    let (n, _, h, w) = image.dims4()?;
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Param(format!("scales must be positive, got {scales:?}")));
    }
    let k = net.config().num_classes;
    let mut acc = Tensor::zeros(&[n, k, h, w]);
    for &scale in scales {
        let (sh, sw) = (round_to_16(h as f64 * scale), round_to_16(w as f64 * scale));
        let input = if (sh, sw) == (h, w) {
            image.clone()
        } else {
            kernels::bilinear_resize(image, sh, sw)?
        };
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let feats = net.encoder_forward(&p, tape.constant(input))?;
        let s = net.seg_head_forward(&p, &feats)?.softmax_channel()?.value();
        let s = if (sh, sw) == (h, w) {
            s.as_ref().clone()
        } else {
            kernels::bilinear_resize(&s, h, w)?
        };
        for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let plane = h * w;
    for b in 0..n {
        for p in 0..plane {
            let idx = |c: usize| b * k * plane + c * plane + p;
            let total: f64 = (0..k).map(|c| acc.data()[idx(c)]).sum();
            for c in 0..k {
                acc.data_mut()[idx(c)] /= total;
            }
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub num_images: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// Absent without an edge branch.
    pub consistency_gap: Option<f64>,
    pub multiscale: bool,
    pub config_hash: String,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::derive_edge_targets;
    use crate::label::IGNORE_LABEL;
    use crate::model::{EdgeMode, Fusion, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_two_class_iou() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 4]).unwrap();
        let r = iou_report(&cm).unwrap();
        assert!((r.per_class[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((r.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
        assert!((r.pixel_accuracy - 0.75).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let truth = LabelMap::new(2, 3, vec![0, 0, 2, 2, 0, 2]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &truth, IGNORE_LABEL).unwrap();
        assert_eq!(cm.get(0, 0) + cm.get(2, 2), 6);
        let r = iou_report(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(r.miou, 1.0);

        let ignored = LabelMap::filled(2, 3, IGNORE_LABEL);
        let mut empty = ConfusionMatrix::new(3);
        empty.accumulate(&truth, &ignored, IGNORE_LABEL).unwrap();
        assert_eq!(empty, ConfusionMatrix::new(3));
        assert!(iou_report(&empty).is_err());

        let bad = LabelMap::new(2, 3, vec![0, 0, 5, 2, 0, 2]).unwrap();
        assert!(matches!(cm.accumulate(&bad, &truth, IGNORE_LABEL), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let s = Tensor::new(vec![1, 3, 1, 2], vec![0.4, 0.2, 0.4, 0.2, 0.2, 0.6]).unwrap();
        assert_eq!(argmax_labels(&s).unwrap()[0].data(), &[0, 2]);
    }

    #[test]
    fn gap_examples() {
        let labels = LabelMap::new(4, 4, (0..16).map(|i| (i % 4 >= 2) as u8).collect()).unwrap();
        let t = derive_edge_targets(&labels, 2, 3, IGNORE_LABEL).unwrap();
        let zeros = Tensor::zeros(&[1, 2, 4, 4]);
        let ones = Tensor::full(&[1, 2, 4, 4], 1.0);
        assert_eq!(consistency_gap(&zeros, &zeros, &t).unwrap(), 0.0);
        assert_eq!(consistency_gap(&zeros, &ones, &t).unwrap(), 1.0);
        assert!(consistency_gap(&zeros, &Tensor::zeros(&[1, 1, 4, 4]), &t).is_err());
    }

    #[test]
    fn single_scale_is_plain_forward() {
        let net = TriangleNet::new(ModelConfig {
            num_classes: 3,
            base_channels: 2,
            edge_mode: EdgeMode::None,
            fusion: Fusion::Fixed,
            input_size: (32, 32),
            edge_width: 3,
        })
        .unwrap();
        let params = net.init_parameters(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen_range(-1.0..1.0));
        let ms1 = multiscale_infer(&net, &params, &img, &[1.0]).unwrap();
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let s = net.forward_full(&p, tape.constant(img.clone())).unwrap().s.value();
        assert!(ms1.max_abs_diff(&s) < 1e-15);

        let ms = multiscale_infer(&net, &params, &img, &MULTISCALE_SCALES).unwrap();
        for p in 0..32 * 32 {
            let total: f64 = (0..3).map(|c| ms.data()[c * 1024 + p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multiscale_argmax_matches_snapshot() {
        use sha2::{Digest, Sha256};
        let net = TriangleNet::new(ModelConfig::default()).unwrap();
        let params = net.init_parameters(3);
        let sample = crate::data::generate_sample(&Default::default(), "val", 0).unwrap();
        let img = crate::data::normalize(&sample.image);
        let s = multiscale_infer(&net, &params, &img, &MULTISCALE_SCALES).unwrap();
        let pred = &argmax_labels(&s).unwrap()[0];
        let mut hist = [0usize; 4];
        for &l in pred.data() {
            hist[l as usize] += 1;
        }
        let digest = hex::encode(Sha256::digest(pred.data()));
        assert_eq!(hist, SNAPSHOT_HIST);
        assert_eq!(digest, SNAPSHOT_SHA256);
    }

    const SNAPSHOT_HIST: [usize; 4] = [0, 1223, 13, 2860];
    const SNAPSHOT_SHA256: &str = "90bbc5463e9241de9883928be1ac519ab5063bd1e1e4cdcf0980ac65227a7e0c";

    fn arb_maps() -> impl Strategy<Value = (usize, LabelMap, LabelMap)> {
        (2usize..5, 1usize..9, 1usize..9).prop_flat_map(|(k, h, w)| {
            let cells = h * w;
            let truth = proptest::collection::vec(prop_oneof![4 => 0..k as u8, 1 => Just(IGNORE_LABEL)], cells);
            let pred = proptest::collection::vec(0..k as u8, cells);
            (Just(k), truth, pred).prop_map(move |(k, t, p)| {
                (k, LabelMap::new(h, w, p).unwrap(), LabelMap::new(h, w, t).unwrap())
            })
        })
    }

    proptest! {
        #[test]
        fn iou_matches_set_intersection((k, pred, truth) in arb_maps()) {
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(&pred, &truth, IGNORE_LABEL).unwrap();
            prop_assert_eq!(cm.total() as usize, truth.num_valid(IGNORE_LABEL));
            let mut ious = Vec::new();
            for c in 0..k as u8 {
                let valid: Vec<usize> = (0..truth.data().len()).filter(|&i| truth.data()[i] != IGNORE_LABEL).collect();
                let inter = valid.iter().filter(|&&i| truth.data()[i] == c && pred.data()[i] == c).count();
                let union = valid.iter().filter(|&&i| truth.data()[i] == c || pred.data()[i] == c).count();
                ious.push((union > 0).then(|| inter as f64 / union as f64));
            }
            match iou_report(&cm) {
                Ok(r) => {
                    for (a, b) in r.per_class.iter().zip(&ious) {
                        match (a, b) {
                            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                            (None, None) => {}
                            _ => prop_assert!(false, "absent mismatch"),
                        }
                    }
                    let present: Vec<f64> = ious.iter().flatten().copied().collect();
                    let mean = present.iter().sum::<f64>() / present.len() as f64;
                    prop_assert!((r.miou - mean).abs() < 1e-12);
                }
                Err(_) => prop_assert!(ious.iter().all(Option::is_none)),
            }
        }

        #[test]
        fn accumulation_order_is_irrelevant((k, p1, t1) in arb_maps(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p2 = LabelMap::new(p1.height(), p1.width(), p1.data().iter().map(|_| rng.gen_range(0..k as u8)).collect()).unwrap();
            let mut a = ConfusionMatrix::new(k);
            a.accumulate(&p1, &t1, IGNORE_LABEL).unwrap();
            a.accumulate(&p2, &t1, IGNORE_LABEL).unwrap();
            let mut b = ConfusionMatrix::new(k);
            b.accumulate(&p2, &t1, IGNORE_LABEL).unwrap();
            let mut c = ConfusionMatrix::new(k);
            c.accumulate(&p1, &t1, IGNORE_LABEL).unwrap();
            b.merge(&c).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn gap_matches_loop_and_is_symmetric(k in 1usize..4, h in 2usize..7, w in 2usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = LabelMap::new(h, w, (0..h * w).map(|_| if rng.gen_bool(0.2) { IGNORE_LABEL } else { rng.gen_range(0..k as u8) }).collect()).unwrap();
            prop_assume!(labels.num_valid(IGNORE_LABEL) > 0);
            let t = derive_edge_targets(&labels, k, 3, IGNORE_LABEL).unwrap();
            let c = Tensor::from_fn(&[1, k, h, w], |_| rng.gen::<f64>());
            let e = Tensor::from_fn(&[1, k, h, w], |_| rng.gen::<f64>());
            let mut sum = 0.0;
            let mut count = 0;
            for ch in 0..k {
                for y in 0..h {
                    for x in 0..w {
                        if labels.get(y, x) != IGNORE_LABEL {
                            sum += (c.at4(0, ch, y, x) - e.at4(0, ch, y, x)).abs();
                            count += 1;
                        }
                    }
                }
            }
            let gap = consistency_gap(&c, &e, &t).unwrap();
            prop_assert!((gap - sum / count as f64).abs() < 1e-12);
            prop_assert_eq!(gap, consistency_gap(&e, &c, &t).unwrap());
            // Reversing the channel order of both maps leaves the gap alone.
            let plane = h * w;
            let rev = |m: &Tensor| Tensor::from_fn(m.shape(), |i| m.data()[(k - 1 - i / plane) * plane + i % plane]);
            prop_assert!((consistency_gap(&rev(&c), &rev(&e), &t).unwrap() - gap).abs() < 1e-12);
        }
    }
}
