//! Two-branch network: a shared five-stage encoder, a pyramid-pooling +
//! top-down segmentation head, and a side-output edge head with fixed
//! (CASENet-style) or adaptive (DFF-style) fusion.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edge::{spatial_gradient, DEFAULT_EDGE_WIDTH};
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// One edge channel per class.
    Semantic,
    /// A single class-agnostic edge channel.
    Binary,
    /// No edge branch; segmentation only.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Per-pixel side weights predicted from the deepest feature.
    Adaptive,
    /// Learned per-class, per-side scalars.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub edge_mode: EdgeMode,
    pub fusion: Fusion,
    pub input_size: (usize, usize),
    pub edge_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            base_channels: 8,
            edge_mode: EdgeMode::Semantic,
            fusion: Fusion::Adaptive,
            input_size: (64, 64),
            edge_width: DEFAULT_EDGE_WIDTH,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(param_err!("num_classes must lie in [1, 254], got {}", self.num_classes));
        }
        if self.base_channels == 0 {
            return Err(param_err!("base_channels must be ≥ 1"));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(shape_err!(
                "input size {}×{} must be non-zero multiples of 16",
                h,
                w
            ));
        }
        if self.edge_width % 2 == 0 {
            return Err(param_err!("edge width must be odd, got {}", self.edge_width));
        }
        Ok(())
    }

    /// Channels of the edge prediction (0 without an edge branch).
    pub fn edge_channels(&self) -> usize {
        match self.edge_mode {
            EdgeMode::Semantic => self.num_classes,
            EdgeMode::Binary => 1,
            EdgeMode::None => 0,
        }
    }

    fn decoder_channels(&self) -> usize {
        2 * self.base_channels
    }

    /// `(in, out, stride)` of each 3×3 conv, grouped by encoder stage.
    fn stage_plan(&self) -> [Vec<(usize, usize, usize)>; 5] {
        let c = self.base_channels;
        [
            vec![(3, c, 1)],
            vec![(c, 2 * c, 2)],
            vec![(2 * c, 4 * c, 2)],
            vec![(4 * c, 8 * c, 2), (8 * c, 8 * c, 1)],
            vec![(8 * c, 8 * c, 2), (8 * c, 8 * c, 1)],
        ]
    }

    /// Channel count of each encoder output.
    pub fn feature_channels(&self) -> [usize; 5] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c, 8 * c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    He { fan_in: usize },
    Constant(f64),
}

/// Named parameters in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    /// Swaps in another variable for an existing parameter.
    pub fn replace(&mut self, name: &str, var: Var<'t>) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::Contract(format!("missing parameter {name}"))),
        }
    }

    /// Per-parameter gradients; parameters the output does not depend on get zeros.
    pub fn gradients(&self, grads: &Gradients) -> ParameterSet {
        ParameterSet {
            params: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
                .collect(),
        }
    }
}

/// Output of a full forward pass.
pub struct Outputs<'t> {
    pub seg_logits: Var<'t>,
    /// Softmax probabilities.
    pub s: Var<'t>,
    pub edge_logits: Option<Var<'t>>,
    /// Sigmoid edge probabilities.
    pub e: Option<Var<'t>>,
    /// Edges of `s` through the spatial-gradient detector.
    pub c: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct TriangleNet {
    config: ModelConfig,
}

fn conv_name(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

impl TriangleNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(TriangleNet { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn param_specs(&self) -> BTreeMap<String, (Vec<usize>, Init)> {
        let mut specs = BTreeMap::new();
        let mut conv = |prefix: &str, cin_per_group: usize, cout: usize, k: usize| {
            let (w, b) = conv_name(prefix);
            let fan_in = cin_per_group * k * k;
            specs.insert(w, (vec![cout, cin_per_group, k, k], Init::He { fan_in }));
            specs.insert(b, (vec![cout], Init::Constant(0.0)));
        };
        let cfg = &self.config;
        for (s, convs) in cfg.stage_plan().iter().enumerate() {
            for (j, &(cin, cout, _)) in convs.iter().enumerate() {
                conv(&format!("encoder.stage{}.conv{}", s + 1, j + 1), cin, cout, 3);
            }
        }
        let [_, _, f3, f4, f5] = cfg.feature_channels();
        let d = cfg.decoder_channels();
        let k = cfg.num_classes;
        conv("seg_head.ppm.scale1", f5, d, 1);
        conv("seg_head.ppm.scale2", f5, d, 1);
        conv("seg_head.ppm.fuse", f5 + 2 * d, d, 1);
        conv("seg_head.lateral16", f5, d, 1);
        conv("seg_head.lateral8", f4, d, 1);
        conv("seg_head.lateral4", f3, d, 1);
        conv("seg_head.smooth", d, d, 3);
        conv("seg_head.classifier", d, k, 1);

        let ke = cfg.edge_channels();
        if ke > 0 {
            let feats = cfg.feature_channels();
            for (side, level) in [(1, 0), (2, 1), (3, 2), (5, 4)] {
                conv(&format!("edge_head.side{side}"), feats[level], ke, 1);
            }
            match cfg.fusion {
                Fusion::Fixed => {
                    let (w, b) = conv_name("edge_head.fusion");
                    specs.insert(w, (vec![ke, 4, 1, 1], Init::Constant(0.25)));
                    specs.insert(b, (vec![ke], Init::Constant(0.0)));
                }
                Fusion::Adaptive => conv("edge_head.adaptive", f5, 4 * ke, 1),
            }
        }
        specs
    }

    /// Deterministic per seed: He-uniform conv weights, zero biases, fixed
    /// fusion weights of 1/4.
    pub fn init_parameters(&self, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (name, (shape, init)) in self.param_specs() {
            let t = match init {
                Init::He { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                }
                Init::Constant(v) => Tensor::full(&shape, v),
            };
            params.insert(name, t);
        }
        params
    }

    /// Checks that `params` has exactly the expected names and shapes.
    pub fn check_parameters(&self, params: &ParameterSet) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Contract(format!(
                "model expects {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, (shape, _)) in &specs {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(shape_err!(
                        "parameter {} has shape {:?}, expected {:?}",
                        name,
                        t.shape(),
                        shape
                    ))
                }
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    fn conv<'t>(
        &self,
        p: &BoundParams<'t>,
        prefix: &str,
        x: Var<'t>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (w, b) = conv_name(prefix);
        x.conv2d(p.get(&w)?, Some(p.get(&b)?), stride, pad, 1)
    }

    /// Features at strides 1, 2, 4, 8 and 16.
    pub fn encoder_forward<'t>(&self, p: &BoundParams<'t>, image: Var<'t>) -> Result<[Var<'t>; 5]> {
        let shape = image.shape();
        match shape[..] {
            [_, 3, h, w] if h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0 => {}
            _ => {
                return Err(shape_err!(
                    "encoder expects N×3×H×W with H, W multiples of 16, got {:?}",
                    shape
                ))
            }
        }
        let mut x = image;
        let mut feats = Vec::with_capacity(5);
        for (s, convs) in self.config.stage_plan().iter().enumerate() {
            for (j, &(_, _, stride)) in convs.iter().enumerate() {
                x = self
                    .conv(p, &format!("encoder.stage{}.conv{}", s + 1, j + 1), x, stride, 1)?
                    .relu();
            }
            feats.push(x);
        }
        Ok(feats.try_into().expect("five stages"))
    }

    /// Segmentation logits at input resolution.
    pub fn seg_head_forward<'t>(&self, p: &BoundParams<'t>, feats: &[Var<'t>; 5]) -> Result<Var<'t>> {
        let [_, _, f3, f4, f5] = *feats;
        let s16 = f5.shape();
        let (h16, w16) = (s16[2], s16[3]);
        let tape = f5.tape();

        let mut pyramid = vec![f5];
        for (scale, name) in [(1, "seg_head.ppm.scale1"), (2, "seg_head.ppm.scale2")] {
            let pooled = f5.adaptive_avg_pool(scale.min(h16), scale.min(w16))?;
            let proj = self.conv(p, name, pooled, 1, 0)?.relu();
            pyramid.push(proj.bilinear_resize(h16, w16)?);
        }
        let top = self
            .conv(p, "seg_head.ppm.fuse", tape.concat_channels(&pyramid)?, 1, 0)?
            .relu();

        let p16 = top.add(self.conv(p, "seg_head.lateral16", f5, 1, 0)?)?;
        let s8 = f4.shape();
        let p8 = p16
            .bilinear_resize(s8[2], s8[3])?
            .add(self.conv(p, "seg_head.lateral8", f4, 1, 0)?)?;
        let s4 = f3.shape();
        let p4 = p8
            .bilinear_resize(s4[2], s4[3])?
            .add(self.conv(p, "seg_head.lateral4", f3, 1, 0)?)?;
        let smooth = self.conv(p, "seg_head.smooth", p4, 1, 1)?.relu();
        let logits = self.conv(p, "seg_head.classifier", smooth, 1, 0)?;
        let (h, w) = (feats[0].shape()[2], feats[0].shape()[3]);
        logits.bilinear_resize(h, w)
    }

    /// Side outputs of levels 1, 2, 3 and 5 projected to the edge channels
    /// and resized to input resolution.
    pub fn edge_sides<'t>(&self, p: &BoundParams<'t>, feats: &[Var<'t>; 5]) -> Result<[Var<'t>; 4]> {
        let (h, w) = (feats[0].shape()[2], feats[0].shape()[3]);
        let mut sides = Vec::with_capacity(4);
        for (side, level) in [(1, 0), (2, 1), (3, 2), (5, 4)] {
            let proj = self.conv(p, &format!("edge_head.side{side}"), feats[level], 1, 0)?;
            sides.push(if level == 0 { proj } else { proj.bilinear_resize(h, w)? });
        }
        Ok(sides.try_into().expect("four sides"))
    }

    /// Fused edge logits, or `None` when the edge branch is disabled.
    pub fn edge_head_forward<'t>(
        &self,
        p: &BoundParams<'t>,
        feats: &[Var<'t>; 5],
    ) -> Result<Option<Var<'t>>> {
        let ke = self.config.edge_channels();
        if ke == 0 {
            return Ok(None);
        }
        let sides = self.edge_sides(p, feats)?;
        let tape = feats[0].tape();
        // Channel k·4 + s holds side s of class k.
        let stacked = tape.interleave_channels(&sides)?;
        let fused = match self.config.fusion {
            Fusion::Fixed => {
                let (w, b) = conv_name("edge_head.fusion");
                stacked.conv2d(p.get(&w)?, Some(p.get(&b)?), 1, 0, ke)?
            }
            Fusion::Adaptive => {
                let (h, w) = (feats[0].shape()[2], feats[0].shape()[3]);
                let side_weights = self
                    .conv(p, "edge_head.adaptive", feats[4], 1, 0)?
                    .bilinear_resize(h, w)?;
                let ones = tape.constant(Tensor::full(&[ke, 4, 1, 1], 1.0));
                stacked.mul(side_weights)?.conv2d(ones, None, 1, 0, ke)?
            }
        };
        Ok(Some(fused))
    }

    pub fn forward_full<'t>(&self, p: &BoundParams<'t>, image: Var<'t>) -> Result<Outputs<'t>> {
        let feats = self.encoder_forward(p, image)?;
        let seg_logits = self.seg_head_forward(p, &feats)?;
        let s = seg_logits.softmax_channel()?;
        let edge_logits = self.edge_head_forward(p, &feats)?;
        let e = edge_logits.map(|l| l.sigmoid());
        let mut c = spatial_gradient(s, self.config.edge_width)?;
        if self.config.edge_mode == EdgeMode::Binary {
            c = c.channel_max()?;
        }
        Ok(Outputs {
            seg_logits,
            s,
            edge_logits,
            e,
            c,
        })
    }

    /// Whether a parameter belongs to the segmentation head, the edge head,
    /// or the shared encoder.
    pub fn branch_of(name: &str) -> Branch {
        if name.starts_with("seg_head.") {
            Branch::Segmentation
        } else if name.starts_with("edge_head.") {
            Branch::Edge
        } else {
            Branch::Shared
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Shared,
    Segmentation,
    Edge,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::derive_edge_targets;
    use crate::label::{LabelMap, IGNORE_LABEL};
    use crate::tensor::grad_check;

    fn small(edge_mode: EdgeMode, fusion: Fusion) -> TriangleNet {
        TriangleNet::new(ModelConfig {
            num_classes: 3,
            base_channels: 2,
            edge_mode,
            fusion,
            input_size: (16, 16),
            edge_width: 3,
        })
        .unwrap()
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn encoder_shapes_at_default_config() {
        let net = TriangleNet::new(ModelConfig::default()).unwrap();
        let params = net.init_parameters(0);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let feats = net.encoder_forward(&p, tape.constant(image(1, 64, 64))).unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|f| f.shape()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 8, 64, 64],
                vec![1, 16, 32, 32],
                vec![1, 32, 16, 16],
                vec![1, 64, 8, 8],
                vec![1, 64, 4, 4]
            ]
        );
        let bad = tape.constant(Tensor::zeros(&[1, 3, 20, 16]));
        assert!(net.encoder_forward(&p, bad).is_err());
    }

    #[test]
    fn parameter_count_regression() {
        let net = TriangleNet::new(ModelConfig::default()).unwrap();
        let params = net.init_parameters(0);
        assert!(params.num_scalars() < 200_000);
        assert_eq!(params.num_scalars(), 145_476);
        let names: Vec<&str> = params.names().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn encoder_is_deterministic_and_zero_preserving() {
        let net = small(EdgeMode::Semantic, Fusion::Adaptive);
        let params = net.init_parameters(3);
        let run = |x: Tensor| {
            let tape = Tape::new();
            let p = params.bind(&tape, false);
            let f = net.encoder_forward(&p, tape.constant(x)).unwrap();
            f.iter().map(|v| v.value().as_ref().clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(image(4, 16, 16)), run(image(4, 16, 16)));
        for f in run(Tensor::zeros(&[1, 3, 16, 16])) {
            assert!(f.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn init_is_seeded() {
        let net = small(EdgeMode::Semantic, Fusion::Fixed);
        assert_eq!(net.init_parameters(5), net.init_parameters(5));
        assert_ne!(net.init_parameters(5), net.init_parameters(6));
        let p = net.init_parameters(5);
        assert!(p.get("edge_head.fusion.weight").unwrap().data().iter().all(|v| *v == 0.25));
        assert!(p.get("seg_head.classifier.bias").unwrap().data().iter().all(|v| *v == 0.0));
        net.check_parameters(&p).unwrap();
        assert!(small(EdgeMode::Semantic, Fusion::Adaptive).check_parameters(&p).is_err());
    }

    #[test]
    fn output_shapes_for_every_variant() {
        for mode in [EdgeMode::Semantic, EdgeMode::Binary, EdgeMode::None] {
            for fusion in [Fusion::Adaptive, Fusion::Fixed] {
                let net = small(mode, fusion);
                let params = net.init_parameters(1);
                let tape = Tape::new();
                let p = params.bind(&tape, false);
                let out = net.forward_full(&p, tape.constant(image(2, 16, 32))).unwrap();
                assert_eq!(out.seg_logits.shape(), vec![1, 3, 16, 32]);
                let ke = net.config().edge_channels();
                match out.e {
                    Some(e) => assert_eq!(e.shape(), vec![1, ke, 16, 32]),
                    None => assert_eq!(mode, EdgeMode::None),
                }
                let c_channels = if mode == EdgeMode::Binary { 1 } else { 3 };
                assert_eq!(out.c.shape(), vec![1, c_channels, 16, 32]);
                let s = out.s.value();
                for p in 0..16 * 32 {
                    let total: f64 = (0..3).map(|k| s.data()[k * 512 + p]).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
                if let Some(e) = out.e {
                    assert!(e.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
                }
                assert!(out.c.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn classifier_bias_shifts_its_logit() {
        let net = small(EdgeMode::None, Fusion::Fixed);
        let mut params = net.init_parameters(7);
        let logits = |params: &ParameterSet| {
            let tape = Tape::new();
            let p = params.bind(&tape, false);
            let feats = net.encoder_forward(&p, tape.constant(image(8, 16, 16))).unwrap();
            net.seg_head_forward(&p, &feats).unwrap().value().as_ref().clone()
        };
        let before = logits(&params);
        params.get_mut("seg_head.classifier.bias").unwrap().data_mut()[1] = 0.75;
        let after = logits(&params);
        for k in 0..3 {
            for p in 0..256 {
                let d = after.data()[k * 256 + p] - before.data()[k * 256 + p];
                let want = if k == 1 { 0.75 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_reaches_every_encoder_parameter() {
        let net = small(EdgeMode::None, Fusion::Fixed);
        let params = net.init_parameters(9);
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let feats = net.encoder_forward(&p, tape.constant(image(10, 16, 16))).unwrap();
        let logits = net.seg_head_forward(&p, &feats).unwrap();
        let probe = tape.constant(image(11, 16, 16));
        let loss = logits.mul(probe).unwrap().sum();
        let grads = p.gradients(&tape.backward(loss).unwrap());
        for (name, g) in grads.iter() {
            if name.starts_with("encoder.") {
                assert!(g.data().iter().any(|v| *v != 0.0), "{name} got no gradient");
            }
        }
    }

    #[test]
    fn selector_fusion_returns_first_side() {
        let net = small(EdgeMode::Semantic, Fusion::Fixed);
        let mut params = net.init_parameters(12);
        let w = params.get_mut("edge_head.fusion.weight").unwrap();
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = if i % 4 == 0 { 1.0 } else { 0.0 };
        }
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let feats = net.encoder_forward(&p, tape.constant(image(13, 16, 16))).unwrap();
        let fused = net.edge_head_forward(&p, &feats).unwrap().unwrap().value();
        let sides = net.edge_sides(&p, &feats).unwrap();
        assert_eq!(*fused, *sides[0].value());
    }

    #[test]
    fn fixed_fusion_starts_at_side_mean() {
        let net = small(EdgeMode::Semantic, Fusion::Fixed);
        let params = net.init_parameters(14);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let feats = net.encoder_forward(&p, tape.constant(image(15, 16, 16))).unwrap();
        let fused = net.edge_head_forward(&p, &feats).unwrap().unwrap().value();
        let sides: Vec<_> = net.edge_sides(&p, &feats).unwrap().iter().map(|s| s.value()).collect();
        for i in 0..fused.numel() {
            let mean = sides.iter().map(|s| s.data()[i]).sum::<f64>() / 4.0;
            assert!((fused.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_adaptive_weights_reduce_to_fixed_fusion() {
        let adaptive = small(EdgeMode::Semantic, Fusion::Adaptive);
        let fixed = small(EdgeMode::Semantic, Fusion::Fixed);
        let mut pa = adaptive.init_parameters(16);
        let mut pf = fixed.init_parameters(16);
        let side_w = [0.5, -1.25, 2.0, 0.125];
        for (name, t) in pa.iter() {
            if name.starts_with("encoder.") || name.starts_with("edge_head.side") {
                pf.insert(name.clone(), t.clone());
            }
        }
        pa.get_mut("edge_head.adaptive.weight").unwrap().data_mut().fill(0.0);
        for (i, v) in pa.get_mut("edge_head.adaptive.bias").unwrap().data_mut().iter_mut().enumerate() {
            *v = side_w[i % 4];
        }
        for (i, v) in pf.get_mut("edge_head.fusion.weight").unwrap().data_mut().iter_mut().enumerate() {
            *v = side_w[i % 4];
        }
        let run = |net: &TriangleNet, params: &ParameterSet| {
            let tape = Tape::new();
            let p = params.bind(&tape, false);
            let feats = net.encoder_forward(&p, tape.constant(image(17, 16, 16))).unwrap();
            net.edge_head_forward(&p, &feats).unwrap().unwrap().value().as_ref().clone()
        };
        assert!(run(&adaptive, &pa).max_abs_diff(&run(&fixed, &pf)) < 1e-12);
    }

    #[test]
    fn confident_correct_segmentation_reproduces_edge_target() {
        let labels = LabelMap::new(16, 16, (0..256).map(|i| if i % 16 < 7 { 0 } else { 1 }).collect()).unwrap();
        let target = derive_edge_targets(&labels, 2, 3, IGNORE_LABEL).unwrap();
        let tape = Tape::new();
        let logits = Tensor::from_fn(&[1, 2, 16, 16], |i| {
            let (k, p) = (i / 256, i % 256);
            if labels.data()[p] as usize == k { 800.0 } else { -800.0 }
        });
        let s = tape.constant(logits).softmax_channel().unwrap();
        let c = spatial_gradient(s, 3).unwrap().value();
        let binarised = Tensor::from_fn(c.shape(), |i| if c.data()[i] > 0.0 { 1.0 } else { 0.0 });
        assert_eq!(&binarised, target.edges());
    }

    #[test]
    fn full_model_passes_gradient_check() {
        let net = small(EdgeMode::Semantic, Fusion::Adaptive);
        let params = net.init_parameters(18);
        let names: Vec<String> = ["encoder.stage3.conv1.weight", "edge_head.adaptive.weight", "seg_head.smooth.weight"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
        let img = image(19, 16, 16);
        let probe_s = image(20, 16, 16);
        let probe_e = image(21, 16, 16);
        let r = grad_check(
            |tape, vars| {
                let mut bound = params.bind(tape, false);
                for (n, v) in names.iter().zip(vars) {
                    bound.replace(n, *v)?;
                }
                let out = net.forward_full(&bound, tape.constant(img.clone()))?;
                let a = out.s.mul(tape.constant(probe_s.clone()))?.sum();
                Ok(a.add(out.e.unwrap().mul(tape.constant(probe_e.clone()))?.sum())?)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
