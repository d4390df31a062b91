//! Training objectives: hard-example-mined cross-entropy for segmentation,
//! the multi-label edge loss, the boundary-aware ℓ1 consistency terms, and
//! their weighted, gated sum.

use serde::{Deserialize, Serialize};

use crate::edge::EdgeTarget;
use crate::error::{param_err, shape_err, Error, Result};
use crate::label::LabelMap;
use crate::tensor::{Tensor, Var, LOG_EPS};

/// Loss coefficients and the point in training where the consistency term
/// switches on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub c_s: f64,
    pub c_e: f64,
    pub c_c: f64,
    pub consistency_start_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            c_s: 1.0,
            c_e: 10.0,
            c_c: 20.0,
            consistency_start_fraction: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c_s", self.c_s), ("c_e", self.c_e), ("c_c", self.c_c)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(param_err!("loss weight {} must be finite and ≥ 0, got {}", name, v));
            }
        }
        if !(0.0..=1.0).contains(&self.consistency_start_fraction) {
            return Err(param_err!(
                "consistency_start_fraction must lie in [0, 1], got {}",
                self.consistency_start_fraction
            ));
        }
        Ok(())
    }

    pub fn consistency_active(&self, progress: f64) -> bool {
        progress >= self.consistency_start_fraction
    }
}

/// Scalar values of every term; `l_cd == l_c1 + l_c2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_e: f64,
    pub l_c1: f64,
    pub l_c2: f64,
    pub l_cd: f64,
    pub total: f64,
    pub n_hard: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OhemConfig {
    /// Pixels whose true-class probability is below this are hard. `1.0`
    /// selects every valid pixel.
    pub thresh: f64,
    /// Lower bound on the hard set, as a fraction of valid pixels.
    pub min_kept_fraction: f64,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            thresh: 0.7,
            min_kept_fraction: 0.1,
        }
    }
}

impl OhemConfig {
    pub fn min_kept(&self, num_valid: usize) -> usize {
        ((self.min_kept_fraction * num_valid as f64).ceil() as usize).max(1)
    }
}

pub struct OhemLoss<'t> {
    pub loss: Var<'t>,
    pub n_hard: usize,
}

/// Mean of `−ln P(p)` over the hard pixels of a batch, where `P(p)` is the
/// softmax probability of the true label.
///
/// The hard set is `{p : P(p) < thresh}`; if that holds fewer than
/// `min_kept` pixels it is replaced by the `min_kept` lowest-probability
/// pixels, ties broken by batch-major, row-major pixel index. The selection
/// is a constant of the backward pass.
pub fn ohem_cross_entropy<'t>(
    logits: Var<'t>,
    labels: &[LabelMap],
    thresh: f64,
    min_kept: usize,
    ignore: u8,
) -> Result<OhemLoss<'t>> {
    if !(thresh > 0.0 && thresh <= 1.0) {
        return Err(param_err!("ohem thresh must lie in (0, 1], got {}", thresh));
    }
    if min_kept == 0 {
        return Err(param_err!("ohem min_kept must be ≥ 1"));
    }
    let shape = logits.shape();
    let (n, k, h, w) = match shape[..] {
        [n, k, h, w] => (n, k, h, w),
        _ => return Err(shape_err!("ohem logits must be N×K×H×W, got {:?}", shape)),
    };
    if labels.len() != n || labels.iter().any(|l| (l.height(), l.width()) != (h, w)) {
        return Err(shape_err!(
            "ohem needs {} label maps of {}×{} for logits {:?}",
            n,
            h,
            w,
            shape
        ));
    }
    for l in labels {
        l.validate(k, ignore)?;
    }
    let probs = logits.softmax_channel()?;
    let pv = probs.value();
    let plane = h * w;
    // (probability, flat pixel index, flat tensor index of the true class)
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (b, lm) in labels.iter().enumerate() {
        for (p, &l) in lm.data().iter().enumerate() {
            if l != ignore {
                let idx = (b * k + l as usize) * plane + p;
                candidates.push((pv.data()[idx], b * plane + p, idx));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Data("ohem cross-entropy over a batch with no valid pixels".into()));
    }
    let min_kept = min_kept.min(candidates.len());
    let mut hard: Vec<usize> = if thresh >= 1.0 {
        candidates.iter().map(|c| c.2).collect()
    } else {
        candidates.iter().filter(|c| c.0 < thresh).map(|c| c.2).collect()
    };
    if hard.len() < min_kept {
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        hard = candidates[..min_kept].iter().map(|c| c.2).collect();
    }
    let mut mask = Tensor::zeros(&[n, k, h, w]);
    for &i in &hard {
        mask.data_mut()[i] = 1.0;
    }
    let n_hard = hard.len();
    let tape = logits.tape();
    let loss = probs
        .log(LOG_EPS)?
        .mul(tape.constant(mask))?
        .sum()
        .scale(-1.0 / n_hard as f64);
    Ok(OhemLoss { loss, n_hard })
}

fn check_target_shape(x: &Var<'_>, target: &EdgeTarget) -> Result<()> {
    if x.shape() != target.shape() {
        return Err(shape_err!(
            "prediction {:?} does not match edge target {:?}",
            x.shape(),
            target.shape()
        ));
    }
    Ok(())
}

fn normaliser(target: &EdgeTarget, normalize: bool) -> Result<f64> {
    if !normalize {
        return Ok(1.0);
    }
    let count = target.num_classes() * target.num_valid();
    if count == 0 {
        return Err(Error::Data("edge loss over a target with no valid pixels".into()));
    }
    Ok(count as f64)
}

/// `−Σ_k Σ_p [G log E + (1 − G) log(1 − E)]` over valid pixels, divided by
/// `K·#valid` when `normalize` is set.
pub fn multilabel_edge_loss<'t>(e: Var<'t>, target: &EdgeTarget, normalize: bool) -> Result<Var<'t>> {
    check_target_shape(&e, target)?;
    let norm = normaliser(target, normalize)?;
    let valid = target.valid_per_class();
    let g = target.edges();
    let on = Tensor::from_fn(g.shape(), |i| g.data()[i] * valid.data()[i]);
    let off = Tensor::from_fn(g.shape(), |i| (1.0 - g.data()[i]) * valid.data()[i]);
    let tape = e.tape();
    let log_e = e.log(LOG_EPS)?.mul(tape.constant(on))?;
    let log_not_e = e.affine(-1.0, 1.0).log(LOG_EPS)?.mul(tape.constant(off))?;
    Ok(log_e.add(log_not_e)?.sum().scale(-1.0 / norm))
}

/// Boundary-aware ℓ1 norm `Σ_k Σ_p W_k(p)·|X_k(p) − G_k(p)|`, divided by
/// `K·#valid` when `normalize` is set.
pub fn boundary_aware_l1<'t>(x: Var<'t>, target: &EdgeTarget, normalize: bool) -> Result<Var<'t>> {
    check_target_shape(&x, target)?;
    let norm = normaliser(target, normalize)?;
    let tape = x.tape();
    let diff = x.sub(tape.constant(target.edges().clone()))?.abs();
    Ok(diff
        .mul(tape.constant(target.weights().clone()))?
        .sum()
        .scale(1.0 / norm))
}

/// The two halves of the decomposed consistency loss and their sum.
pub struct ConsistencyTerms<'t> {
    pub l_c1: Var<'t>,
    pub l_c2: Var<'t>,
    pub l_cd: Var<'t>,
}

impl<'t> ConsistencyTerms<'t> {
    pub fn new(l_c1: Var<'t>, l_c2: Var<'t>) -> Result<Self> {
        let l_cd = l_c1.add(l_c2)?;
        Ok(ConsistencyTerms { l_c1, l_c2, l_cd })
    }
}

/// `l_c1 = ‖C − G‖_W`, `l_c2 = ‖E − G‖_W`, `l_cd = l_c1 + l_c2`.
pub fn decomposed_consistency_loss<'t>(
    c: Var<'t>,
    e: Var<'t>,
    target: &EdgeTarget,
    normalize: bool,
) -> Result<ConsistencyTerms<'t>> {
    ConsistencyTerms::new(
        boundary_aware_l1(c, target, normalize)?,
        boundary_aware_l1(e, target, normalize)?,
    )
}

pub struct TotalLoss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// `C_s·L_s + C_e·L_e + C_c·L_cd`, with the last term present only once
/// `progress ≥ consistency_start_fraction`. Missing edge terms contribute 0.
pub fn total_loss<'t>(
    seg: &OhemLoss<'t>,
    l_e: Option<Var<'t>>,
    consistency: Option<&ConsistencyTerms<'t>>,
    weights: &LossWeights,
    progress: f64,
) -> Result<TotalLoss<'t>> {
    weights.validate()?;
    let mut breakdown = LossBreakdown {
        l_s: seg.loss.item(),
        n_hard: seg.n_hard,
        ..Default::default()
    };
    let mut total = seg.loss.scale(weights.c_s);
    if let Some(l_e) = l_e {
        breakdown.l_e = l_e.item();
        total = total.add(l_e.scale(weights.c_e))?;
    }
    if let Some(terms) = consistency.filter(|_| weights.consistency_active(progress)) {
        breakdown.l_c1 = terms.l_c1.item();
        breakdown.l_c2 = terms.l_c2.item();
        breakdown.l_cd = terms.l_cd.item();
        total = total.add(terms.l_cd.scale(weights.c_c))?;
    }
    breakdown.total = total.item();
    Ok(TotalLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::IGNORE_LABEL;
    use crate::tensor::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-class logits whose class-0 probability is `p` at each pixel.
    fn logits_for(probs: &[f64]) -> Tensor {
        let n = probs.len();
        Tensor::from_fn(&[1, 2, 1, n], |i| {
            let p = probs[i % n];
            if i < n {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
    }

    #[test]
    fn ohem_worked_example() {
        let tape = Tape::new();
        let logits = tape.param(logits_for(&[0.9, 0.6, 0.5, 0.8]));
        let labels = [LabelMap::filled(1, 4, 0)];
        let out = ohem_cross_entropy(logits, &labels, 0.7, 1, IGNORE_LABEL).unwrap();
        let want = (-(0.6f64).ln() - (0.5f64).ln()) / 2.0;
        assert_eq!(out.n_hard, 2);
        assert!((out.loss.item() - want).abs() < 1e-12);
        assert!((out.loss.item() - 0.60199).abs() < 1e-5);
    }

    #[test]
    fn ohem_min_kept_tops_up_by_probability_then_index() {
        let tape = Tape::new();
        let logits = tape.param(logits_for(&[0.9, 0.8, 0.8, 0.95]));
        let labels = [LabelMap::filled(1, 4, 0)];
        let out = ohem_cross_entropy(logits, &labels, 0.7, 2, IGNORE_LABEL).unwrap();
        assert_eq!(out.n_hard, 2);
        assert!((out.loss.item() + (0.8f64).ln()).abs() < 1e-12);
        let g = tape.backward(out.loss).unwrap();
        let gl = g.get(logits).unwrap();
        // Only pixels 1 and 2 are selected; pixels 0 and 3 receive nothing.
        assert_eq!(gl.data()[0], 0.0);
        assert_eq!(gl.data()[3], 0.0);
        assert!(gl.data()[1] != 0.0 && gl.data()[2] != 0.0);
    }

    #[test]
    fn ohem_select_all_is_plain_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let tape = Tape::new();
        let x = Tensor::from_fn(&[2, 3, 3, 3], |_| rng.gen_range(-2.0..2.0));
        let labels: Vec<LabelMap> = (0..2)
            .map(|_| LabelMap::new(3, 3, (0..9).map(|_| rng.gen_range(0..3)).collect()).unwrap())
            .collect();
        let logits = tape.param(x.clone());
        let by_thresh = ohem_cross_entropy(logits, &labels, 1.0, 1, IGNORE_LABEL).unwrap();
        let by_count = ohem_cross_entropy(logits, &labels, 0.5, 18, IGNORE_LABEL).unwrap();
        let s = crate::tensor::kernels::softmax_channel(&x).unwrap();
        let mut ce = 0.0;
        for (b, l) in labels.iter().enumerate() {
            for p in 0..9 {
                ce -= s.at4(b, l.data()[p] as usize, p / 3, p % 3).ln();
            }
        }
        ce /= 18.0;
        assert!((by_thresh.loss.item() - ce).abs() < 1e-12);
        assert!((by_count.loss.item() - ce).abs() < 1e-12);
    }

    #[test]
    fn ohem_perfect_and_degenerate_inputs() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 50.0 } else { -50.0 });
        let out = ohem_cross_entropy(tape.param(x.clone()), &[LabelMap::filled(2, 2, 0)], 0.7, 1, IGNORE_LABEL)
            .unwrap();
        assert!((out.loss.item() + (1.0 - LOG_EPS).ln()).abs() < 1e-15);
        assert!(out.loss.item() < 1e-6);

        let ignored = [LabelMap::filled(2, 2, IGNORE_LABEL)];
        assert!(ohem_cross_entropy(tape.param(x.clone()), &ignored, 0.7, 1, IGNORE_LABEL).is_err());
        // min_kept beyond the valid count clamps.
        let out = ohem_cross_entropy(tape.param(x), &[LabelMap::filled(2, 2, 0)], 0.7, 100, IGNORE_LABEL)
            .unwrap();
        assert_eq!(out.n_hard, 4);
    }

    fn target_1d(g: &[f64]) -> EdgeTarget {
        let n = g.len();
        EdgeTarget::from_edges(
            Tensor::new(vec![1, 1, 1, n], g.to_vec()).unwrap(),
            Tensor::full(&[1, 1, 1, n], 1.0),
        )
        .unwrap()
    }

    #[test]
    fn multilabel_examples() {
        let tape = Tape::new();
        let t = target_1d(&[1.0]);
        let e = tape.param(Tensor::full(&[1, 1, 1, 1], 0.5));
        let l = multilabel_edge_loss(e, &t, false).unwrap();
        assert!((l.item() - 0.693_147_180_559_945_3).abs() < 1e-12);

        let t = target_1d(&[1.0, 0.0, 1.0, 0.0]);
        let e = tape.param(t.edges().clone());
        let l = multilabel_edge_loss(e, &t, true).unwrap();
        assert!(l.item().abs() < 1e-6);
    }

    #[test]
    fn boundary_l1_examples() {
        let tape = Tape::new();
        let t = target_1d(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.beta_at(0, 0), 0.75);
        let x = tape.param(Tensor::new(vec![1, 1, 1, 4], vec![0.5, 0.0, 0.0, 0.0]).unwrap());
        let l = boundary_aware_l1(x, &t, true).unwrap();
        assert!((l.item() - 0.09375).abs() < 1e-15);
        let x = tape.param(t.edges().clone());
        assert_eq!(boundary_aware_l1(x, &t, true).unwrap().item(), 0.0);
        let wrong = tape.param(Tensor::zeros(&[1, 2, 1, 4]));
        assert!(boundary_aware_l1(wrong, &t, true).is_err());
    }

    #[test]
    fn consistency_is_zero_at_target() {
        let tape = Tape::new();
        let t = target_1d(&[0.0, 1.0, 1.0, 0.0]);
        let c = tape.param(t.edges().clone());
        let e = tape.param(t.edges().clone());
        let terms = decomposed_consistency_loss(c, e, &t, true).unwrap();
        assert_eq!((terms.l_c1.item(), terms.l_c2.item(), terms.l_cd.item()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn decoupled_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = Tensor::from_fn(&[1, 2, 4, 4], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let t = EdgeTarget::from_edges(g, Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
        let c0 = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(0.05..0.95));
        let e0 = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(0.05..0.95));

        let tape = Tape::new();
        let (c, e) = (tape.param(c0.clone()), tape.param(e0.clone()));
        let terms = decomposed_consistency_loss(c, e, &t, true).unwrap();
        let full = tape.backward(terms.l_cd).unwrap();
        let tape1 = Tape::new();
        let c1 = tape1.param(c0);
        let g1 = tape1.backward(boundary_aware_l1(c1, &t, true).unwrap()).unwrap();
        let tape2 = Tape::new();
        let e2 = tape2.param(e0);
        let g2 = tape2.backward(boundary_aware_l1(e2, &t, true).unwrap()).unwrap();
        assert_eq!(full.get(c), g1.get(c1));
        assert_eq!(full.get(e), g2.get(e2));
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        let seg = OhemLoss { loss: s(0.5), n_hard: 3 };
        let terms = ConsistencyTerms::new(s(0.015), s(0.005)).unwrap();
        let w = LossWeights::default();

        let on = total_loss(&seg, Some(s(0.1)), Some(&terms), &w, 0.9).unwrap();
        assert!((on.breakdown.total - 1.9).abs() < 1e-12);
        assert_eq!(on.breakdown.l_cd, on.breakdown.l_c1 + on.breakdown.l_c2);
        assert_eq!(on.breakdown.n_hard, 3);

        let off = total_loss(&seg, Some(s(0.1)), Some(&terms), &w, 0.1).unwrap();
        assert!((off.breakdown.total - 1.5).abs() < 1e-12);
        assert_eq!(off.breakdown.l_cd, 0.0);

        let zero = LossWeights { c_s: 0.0, c_e: 0.0, c_c: 0.0, ..w };
        assert_eq!(total_loss(&seg, Some(s(0.1)), Some(&terms), &zero, 0.9).unwrap().breakdown.total, 0.0);

        let neg = LossWeights { c_e: -1.0, ..w };
        assert!(total_loss(&seg, None, None, &neg, 0.9).is_err());
    }

    #[test]
    fn losses_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let g = Tensor::from_fn(&[1, 2, 4, 4], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let t = EdgeTarget::from_edges(g, Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
        let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(0.05..0.95));
        let r = grad_check(|_, v| multilabel_edge_loss(v[0], &t, true), &[x.clone()], 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        let r = grad_check(|_, v| boundary_aware_l1(v[0], &t, true), &[x], 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
