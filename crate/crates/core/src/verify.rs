//! Finite-difference checks over every differentiable op and every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::edge::{derive_edge_targets, spatial_gradient, spatial_gradient_values, EdgeTarget};
use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::losses::{
    boundary_aware_l1, decomposed_consistency_loss, multilabel_edge_loss, ohem_cross_entropy, total_loss,
    LossWeights,
};
use crate::model::{EdgeMode, Fusion, ModelConfig, TriangleNet};
use crate::tensor::{grad_check, kernels, GradCheckReport, Tensor, Var};
use crate::train::{objective, Batch, ObjectiveConfig};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Inputs are redrawn until every kink is at least this far away.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Redraws `draw` until `ok` holds.
fn draw_where(
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Tensor,
    ok: impl Fn(&Tensor) -> bool,
) -> Result<Tensor> {
    for _ in 0..MAX_DRAWS {
        let t = draw(rng);
        if ok(&t) {
            return Ok(t);
        }
    }
    Err(Error::Contract("could not draw an input clear of kinks".into()))
}

fn clear_of_zero(t: &Tensor) -> bool {
    t.data().iter().all(|v| v.abs() > KINK_MARGIN)
}

fn labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, ignore_rate: f64) -> LabelMap {
    let data = (0..h * w)
        .map(|_| {
            if rng.gen_bool(ignore_rate) {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..k as u8)
            }
        })
        .collect();
    LabelMap::new(h, w, data).expect("sized")
}

/// Two-class vertical split, so every class has edges.
fn split_target(h: usize, w: usize) -> EdgeTarget {
    let l = LabelMap::new(h, w, (0..h * w).map(|i| ((i % w) >= w / 2) as u8).collect()).expect("sized");
    derive_edge_targets(&l, 2, 3, IGNORE_LABEL).expect("valid labels")
}

/// True-class probabilities of `logits` at valid pixels.
fn true_probs(logits: &Tensor, labels: &[LabelMap]) -> Vec<f64> {
    let s = kernels::softmax_channel(logits).expect("4-d");
    let (_, k, h, w) = s.dims4().expect("4-d");
    let plane = h * w;
    let mut out = Vec::new();
    for (b, l) in labels.iter().enumerate() {
        for (p, &c) in l.data().iter().enumerate() {
            if c != IGNORE_LABEL {
                out.push(s.data()[b * k * plane + c as usize * plane + p]);
            }
        }
    }
    out
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradCheckReport>>;

fn cases() -> Vec<(&'static str, Check)> {
    fn probe<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor::from_fn(&y.shape(), |_| rng.gen_range(-1.0..1.0));
        Ok(y.mul(y.tape().constant(p))?.sum())
    }
    vec![
        (
            "conv2d (grouped, strided, padded)",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = uniform(rng, &[2, 4, 6, 5], -1.0, 1.0);
                let w = uniform(rng, &[6, 2, 3, 3], -1.0, 1.0);
                let b = uniform(rng, &[6], -1.0, 1.0);
                grad_check(|_, v| probe(v[0].conv2d(v[1], Some(v[2]), 2, 1, 2)?, 1), &[x, w, b], FD_STEP, FD_TOL)
            }) as Check,
        ),
        (
            "conv2d (pointwise)",
            Box::new(|rng| {
                let x = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
                let w = uniform(rng, &[5, 3, 1, 1], -1.0, 1.0);
                grad_check(|_, v| probe(v[0].conv2d(v[1], None, 1, 0, 1)?, 2), &[x, w], FD_STEP, FD_TOL)
            }),
        ),
        (
            "avg_pool_window",
            Box::new(|rng| {
                let x = uniform(rng, &[1, 2, 5, 6], -1.0, 1.0);
                grad_check(|_, v| probe(v[0].avg_pool_window(3)?, 3), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "bilinear_resize (up)",
            Box::new(|rng| {
                let x = uniform(rng, &[1, 2, 4, 4], -1.0, 1.0);
                grad_check(|_, v| probe(v[0].bilinear_resize(7, 9)?, 4), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "bilinear_resize (down)",
            Box::new(|rng| {
                let x = uniform(rng, &[1, 2, 8, 6], -1.0, 1.0);
                grad_check(|_, v| probe(v[0].bilinear_resize(3, 4)?, 5), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "adaptive_avg_pool",
            Box::new(|rng| {
                let x = uniform(rng, &[1, 2, 5, 7], -1.0, 1.0);
                grad_check(|_, v| probe(v[0].adaptive_avg_pool(2, 3)?, 6), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "softmax_channel",
            Box::new(|rng| {
                let x = uniform(rng, &[2, 4, 3, 3], -3.0, 3.0);
                grad_check(|_, v| probe(v[0].softmax_channel()?, 7), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "sigmoid",
            Box::new(|rng| {
                let x = uniform(rng, &[1, 2, 3, 3], -4.0, 4.0);
                grad_check(|_, v| probe(v[0].sigmoid(), 8), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "relu",
            Box::new(|rng| {
                let x = draw_where(rng, |r| uniform(r, &[1, 2, 3, 3], -1.0, 1.0), clear_of_zero)?;
                grad_check(|_, v| probe(v[0].relu(), 9), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "abs",
            Box::new(|rng| {
                let x = draw_where(rng, |r| uniform(r, &[1, 2, 3, 3], -1.0, 1.0), clear_of_zero)?;
                grad_check(|_, v| probe(v[0].abs(), 10), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "log",
            Box::new(|rng| {
                let x = uniform(rng, &[1, 2, 3, 3], 0.05, 2.0);
                grad_check(|_, v| probe(v[0].log(1e-7)?, 11), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "affine / scale",
            Box::new(|rng| {
                let x = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
                grad_check(|_, v| probe(v[0].affine(-1.5, 0.25).scale(3.0), 12), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "add / sub / mul",
            Box::new(|rng| {
                let a = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
                let b = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
                grad_check(|_, v| probe(v[0].add(v[1])?.mul(v[0].sub(v[1])?)?, 13), &[a, b], FD_STEP, FD_TOL)
            }),
        ),
        (
            "per-channel broadcast",
            Box::new(|rng| {
                let a = uniform(rng, &[2, 3, 2, 2], -1.0, 1.0);
                let c = uniform(rng, &[3], -1.0, 1.0);
                grad_check(|_, v| probe(v[0].mul(v[1])?.add(v[1])?.sub(v[1])?, 14), &[a, c], FD_STEP, FD_TOL)
            }),
        ),
        (
            "sum / mean",
            Box::new(|rng| {
                let x = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
                grad_check(|_, v| Ok(v[0].mul(v[0])?.mean().add(v[0].sum())?), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "channel_max",
            Box::new(|rng| {
                // Runner-up channel must trail the maximum by the margin.
                let x = draw_where(
                    rng,
                    |r| uniform(r, &[1, 3, 3, 3], -1.0, 1.0),
                    |t| {
                        (0..9).all(|p| {
                            let mut v: Vec<f64> = (0..3).map(|c| t.data()[c * 9 + p]).collect();
                            v.sort_by(f64::total_cmp);
                            v[2] - v[1] > KINK_MARGIN
                        })
                    },
                )?;
                grad_check(|_, v| probe(v[0].channel_max()?, 15), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "concat / interleave channels",
            Box::new(|rng| {
                let a = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
                let b = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
                grad_check(
                    |tape, v| {
                        let c = tape.concat_channels(&[v[0], v[1]])?;
                        let i = tape.interleave_channels(&[v[1], v[0]])?;
                        probe(c.mul(i)?, 16)
                    },
                    &[a, b],
                    FD_STEP,
                    FD_TOL,
                )
            }),
        ),
        (
            "spatial_gradient",
            Box::new(|rng| {
                let s = draw_where(
                    rng,
                    |r| uniform(r, &[1, 2, 5, 5], 0.0, 1.0),
                    |t| spatial_gradient_values(t, 3).expect("4-d").data().iter().all(|v| *v > KINK_MARGIN),
                )?;
                grad_check(|_, v| probe(spatial_gradient(v[0], 3)?, 17), &[s], FD_STEP, FD_TOL)
            }),
        ),
        (
            "ohem cross-entropy",
            Box::new(|rng| {
                let lbl = vec![labels(rng, 4, 5, 3, 0.1), labels(rng, 4, 5, 3, 0.1)];
                let (thresh, min_kept) = (0.7, 12);
                // Keep the selection away from the threshold and from ties
                // at the min_kept cut.
                let x = draw_where(
                    rng,
                    |r| uniform(r, &[2, 3, 4, 5], -2.0, 2.0),
                    |t| {
                        let mut p = true_probs(t, &lbl);
                        if p.iter().any(|v| (v - thresh).abs() < KINK_MARGIN) {
                            return false;
                        }
                        p.sort_by(f64::total_cmp);
                        p.windows(2).all(|w| w[1] - w[0] > KINK_MARGIN)
                    },
                )?;
                grad_check(
                    |_, v| Ok(ohem_cross_entropy(v[0], &lbl, thresh, min_kept, IGNORE_LABEL)?.loss),
                    &[x],
                    FD_STEP,
                    FD_TOL,
                )
            }),
        ),
        (
            "multi-label edge loss",
            Box::new(|rng| {
                let t = split_target(4, 6);
                let x = uniform(rng, &[1, 2, 4, 6], -3.0, 3.0);
                grad_check(|_, v| multilabel_edge_loss(v[0].sigmoid(), &t, true), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "boundary-aware l1",
            Box::new(|rng| {
                let t = split_target(4, 6);
                let g = t.edges().clone();
                let x = draw_where(
                    rng,
                    |r| uniform(r, &[1, 2, 4, 6], 0.0, 1.0),
                    |x| x.data().iter().zip(g.data()).all(|(a, b)| (a - b).abs() > KINK_MARGIN),
                )?;
                grad_check(|_, v| boundary_aware_l1(v[0], &t, false), &[x], FD_STEP, FD_TOL)
            }),
        ),
        (
            "decomposed consistency loss",
            Box::new(|rng| {
                let t = split_target(5, 6);
                let x = draw_where(
                    rng,
                    |r| uniform(r, &[1, 2, 5, 6], -2.0, 2.0),
                    |x| {
                        let s = kernels::softmax_channel(x).expect("4-d");
                        let c = spatial_gradient_values(&s, 3).expect("4-d");
                        c.data()
                            .iter()
                            .zip(t.edges().data())
                            .all(|(c, g)| *c > KINK_MARGIN && (c - g).abs() > KINK_MARGIN)
                    },
                )?;
                let e = uniform(rng, &[1, 2, 5, 6], -2.0, 2.0);
                grad_check(
                    |_, v| {
                        let c = spatial_gradient(v[0].softmax_channel()?, 3)?;
                        Ok(decomposed_consistency_loss(c, v[1].sigmoid(), &t, true)?.l_cd)
                    },
                    &[x, e],
                    FD_STEP,
                    FD_TOL,
                )
            }),
        ),
        (
            "total loss",
            Box::new(|rng| {
                let t = split_target(4, 6);
                let lbl = vec![LabelMap::new(4, 6, (0..24).map(|i| ((i % 6) >= 3) as u8).collect())?];
                let x = uniform(rng, &[1, 2, 4, 6], -2.0, 2.0);
                let e = uniform(rng, &[1, 2, 4, 6], -2.0, 2.0);
                grad_check(
                    |_, v| {
                        let seg = ohem_cross_entropy(v[0], &lbl, 1.0, 1, IGNORE_LABEL)?;
                        let ev = v[1].sigmoid();
                        let l_e = multilabel_edge_loss(ev, &t, true)?;
                        // Compare E against itself shifted so |·| stays clear of 0.
                        let terms = decomposed_consistency_loss(ev.affine(0.5, 0.25), ev, &t, true)?;
                        Ok(total_loss(&seg, Some(l_e), Some(&terms), &LossWeights::default(), 0.9)?.total)
                    },
                    &[x, e],
                    FD_STEP,
                    FD_TOL,
                )
            }),
        ),
        (
            "full model objective",
            Box::new(|rng| {
                let cfg = ModelConfig {
                    num_classes: 3,
                    base_channels: 2,
                    edge_mode: EdgeMode::Semantic,
                    fusion: Fusion::Adaptive,
                    input_size: (16, 16),
                    edge_width: 3,
                };
                let net = TriangleNet::new(cfg)?;
                let params = net.init_parameters(rng.gen());
                let sample = Sample {
                    image: uniform(rng, &[1, 3, 16, 16], 0.0, 1.0),
                    labels: LabelMap::new(16, 16, (0..256).map(|i| ((i % 16) / 6) as u8).collect())?,
                };
                let batch = Batch::new(&[sample], &cfg)?;
                let obj_cfg = ObjectiveConfig {
                    weights: LossWeights::default(),
                    ohem: crate::losses::OhemConfig {
                        thresh: 1.0,
                        min_kept_fraction: 0.1,
                    },
                    normalize: true,
                };
                let names = ["seg_head.classifier.weight", "edge_head.side2.weight", "encoder.stage4.conv2.bias"];
                let inputs: Vec<Tensor> = names
                    .iter()
                    .map(|n| params.get(n).cloned())
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Contract("missing parameter".into()))?;
                grad_check(
                    |tape, v| {
                        let mut bound = params.bind(tape, false);
                        for (n, var) in names.iter().zip(v) {
                            bound.replace(n, *var)?;
                        }
                        let obj = objective(&net, &bound, tape.constant(batch.image.clone()), &batch, &obj_cfg, 0.9)?;
                        Ok(obj.total.total)
                    },
                    &inputs,
                    FD_STEP,
                    FD_TOL,
                )
            }),
        ),
    ]
}

/// Runs every case with inputs drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|(name, f)| Ok(GradCase { name, report: f(&mut rng)? }))
        .collect()
}

/// Fixed-width table, one line per case.
pub fn format_table(results: &[GradCase]) -> String {
    let mut out = format!("{:<36} {:>8} {:>14}  status\n", "case", "checked", "max rel err");
    for r in results {
        out.push_str(&format!(
            "{:<36} {:>8} {:>14.3e}  {}\n",
            r.name,
            r.report.checked,
            r.report.max_rel_error,
            if r.report.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}
