//! Segmentation → semantic-edge mapping.
//!
//! [`spatial_gradient`] is the differentiable edge detector applied to a
//! probability map. [`derive_edge_targets`] applies the very same operator
//! to one-hot ground truth and binarises it, so a perfect segmentation maps
//! exactly onto its edge target.

use crate::error::{param_err, shape_err, Result};
use crate::label::LabelMap;
use crate::tensor::{kernels, Tensor, Var};

/// Edge band width used throughout training.
pub const DEFAULT_EDGE_WIDTH: usize = 3;

/// Per-class binary edge map with its class-balancing weights.
///
/// Shapes are batched: `edges` and `weights` are `N×K×H×W`, `valid` is
/// `N×1×H×W` and `beta` holds `N·K` values in image-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeTarget {
    edges: Tensor,
    beta: Vec<f64>,
    weights: Tensor,
    valid: Tensor,
}

impl EdgeTarget {
    /// Builds a target from binary edges and a validity mask, computing
    /// `beta = |non-edge| / |valid|` per image and class and the weight map
    /// `beta` on edges, `1 − beta` off edges, `0` on invalid pixels.
    pub fn from_edges(edges: Tensor, valid: Tensor) -> Result<Self> {
        let (n, k, h, w) = edges.dims4()?;
        if valid.shape() != [n, 1, h, w] {
            return Err(shape_err!(
                "valid mask must be {:?}, got {:?}",
                [n, 1, h, w],
                valid.shape()
            ));
        }
        if let Some(v) = edges
            .data()
            .iter()
            .chain(valid.data())
            .find(|v| **v != 0.0 && **v != 1.0)
        {
            return Err(param_err!("edge and valid maps must be binary, found {}", v));
        }
        let plane = h * w;
        let mut beta = Vec::with_capacity(n * k);
        let mut weights = vec![0.0; edges.numel()];
        for b in 0..n {
            let mask = &valid.data()[b * plane..(b + 1) * plane];
            let n_valid = mask.iter().filter(|m| **m == 1.0).count();
            for c in 0..k {
                let g = &edges.data()[(b * k + c) * plane..][..plane];
                let n_edge = g
                    .iter()
                    .zip(mask)
                    .filter(|(g, m)| **g == 1.0 && **m == 1.0)
                    .count();
                let bk = if n_valid == 0 {
                    1.0
                } else {
                    (n_valid - n_edge) as f64 / n_valid as f64
                };
                beta.push(bk);
                let wk = &mut weights[(b * k + c) * plane..][..plane];
                for p in 0..plane {
                    wk[p] = match (mask[p] == 1.0, g[p] == 1.0) {
                        (false, _) => 0.0,
                        (true, true) => bk,
                        (true, false) => 1.0 - bk,
                    };
                }
            }
        }
        // Edges outside the valid region carry no information.
        let edges = Tensor::from_fn(edges.shape(), |i| {
            let (b, p) = (i / (k * plane), i % plane);
            edges.data()[i] * valid.data()[b * plane + p]
        });
        Ok(EdgeTarget {
            weights: Tensor::new(vec![n, k, h, w], weights)?,
            edges,
            beta,
            valid,
        })
    }

    pub fn edges(&self) -> &Tensor {
        &self.edges
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `beta` of class `k` in image `n`.
    pub fn beta_at(&self, n: usize, k: usize) -> f64 {
        self.beta[n * self.num_classes() + k]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn valid(&self) -> &Tensor {
        &self.valid
    }

    pub fn shape(&self) -> &[usize] {
        self.edges.shape()
    }

    pub fn batch_size(&self) -> usize {
        self.edges.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.edges.shape()[1]
    }

    /// Valid pixels summed over the batch.
    pub fn num_valid(&self) -> usize {
        self.valid.data().iter().filter(|v| **v == 1.0).count()
    }

    /// `N×K×H×W` broadcast of the validity mask.
    pub fn valid_per_class(&self) -> Tensor {
        let (_, k, h, w) = self.edges.dims4().expect("4-D by construction");
        let plane = h * w;
        Tensor::from_fn(self.edges.shape(), |i| {
            self.valid.data()[(i / (k * plane)) * plane + i % plane]
        })
    }

    pub fn stack(items: &[EdgeTarget]) -> Result<EdgeTarget> {
        let edges: Vec<Tensor> = items.iter().map(|t| t.edges.clone()).collect();
        let valid: Vec<Tensor> = items.iter().map(|t| t.valid.clone()).collect();
        EdgeTarget::from_edges(Tensor::stack_batch(&edges)?, Tensor::stack_batch(&valid)?)
    }
}

fn check_width(w: usize) -> Result<()> {
    if w == 0 || w % 2 == 0 {
        return Err(param_err!("edge width must be odd and ≥ 1, got {}", w));
    }
    Ok(())
}

/// `|S − pool_w(S)|` per class, recorded on the tape.
pub fn spatial_gradient<'t>(s: Var<'t>, w: usize) -> Result<Var<'t>> {
    check_width(w)?;
    Ok(s.sub(s.avg_pool_window(w)?)?.abs())
}

/// Same operator as [`spatial_gradient`] on a plain tensor.
pub fn spatial_gradient_values(s: &Tensor, w: usize) -> Result<Tensor> {
    check_width(w)?;
    let pooled = kernels::avg_pool_window(s, w)?;
    Ok(Tensor::from_fn(s.shape(), |i| (s.data()[i] - pooled.data()[i]).abs()))
}

/// One-hot `1×K×H×W` encoding; ignored pixels are all-zero.
pub fn one_hot(labels: &LabelMap, num_classes: usize, ignore: u8) -> Result<Tensor> {
    labels.validate(num_classes, ignore)?;
    let (h, w) = (labels.height(), labels.width());
    let plane = h * w;
    let mut data = vec![0.0; num_classes * plane];
    for (p, &l) in labels.data().iter().enumerate() {
        if l != ignore {
            data[l as usize * plane + p] = 1.0;
        }
    }
    Tensor::new(vec![1, num_classes, h, w], data)
}

/// `1×1×H×W` mask, 1 where the label is not `ignore`.
pub fn valid_mask(labels: &LabelMap, ignore: u8) -> Tensor {
    let data = labels
        .data()
        .iter()
        .map(|&l| if l == ignore { 0.0 } else { 1.0 })
        .collect();
    Tensor::new(vec![1, 1, labels.height(), labels.width()], data).expect("sized from labels")
}

/// Edge target for one label map: `G_k(p) = 1` where the spatial gradient of
/// the one-hot encoding is positive.
pub fn derive_edge_targets(
    labels: &LabelMap,
    num_classes: usize,
    w: usize,
    ignore: u8,
) -> Result<EdgeTarget> {
    let hot = one_hot(labels, num_classes, ignore)?;
    let grad = spatial_gradient_values(&hot, w)?;
    let edges = Tensor::from_fn(grad.shape(), |i| if grad.data()[i] > 0.0 { 1.0 } else { 0.0 });
    EdgeTarget::from_edges(edges, valid_mask(labels, ignore))
}

/// Collapses a per-class target to one binary channel, `G(p) = max_k G_k(p)`.
pub fn binary_edge_union(target: &EdgeTarget) -> Result<EdgeTarget> {
    let (n, k, h, w) = target.edges.dims4()?;
    if k == 1 {
        return Ok(target.clone());
    }
    let plane = h * w;
    let edges = Tensor::from_fn(&[n, 1, h, w], |i| {
        let (b, p) = (i / plane, i % plane);
        (0..k)
            .map(|c| target.edges.data()[(b * k + c) * plane + p])
            .fold(0.0, f64::max)
    });
    EdgeTarget::from_edges(edges, target.valid.clone())
}
