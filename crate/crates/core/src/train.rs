//! Experiment configuration, the training loop, evaluation and the
//! loss-weight grid search.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{self, AugmentConfig, Sample};
use crate::edge::{binary_edge_union, derive_edge_targets, EdgeTarget};
use crate::error::{param_err, Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::losses::{
    decomposed_consistency_loss, multilabel_edge_loss, ohem_cross_entropy, total_loss, ConsistencyTerms,
    LossBreakdown, LossWeights, OhemConfig, OhemLoss, TotalLoss,
};
use crate::metrics::{
    argmax_labels, consistency_gap, iou_report, multiscale_infer, ConfusionMatrix, EvalReport, IouReport,
    MULTISCALE_SCALES,
};
use crate::model::{BoundParams, EdgeMode, ModelConfig, Outputs, ParameterSet, TriangleNet};
use crate::optim::{sgd_step, Schedule, ScheduleKind, SgdConfig, SgdState, WeightGrid};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub power: f64,
    pub cycles: usize,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = Schedule::default();
        ScheduleConfig {
            kind: s.kind,
            power: s.power,
            cycles: s.cycles,
            min_lr: s.min_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub ohem: OhemConfig,
    pub optimizer: SgdConfig,
    pub schedule: ScheduleConfig,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub augment: AugmentConfig,
    /// Extra checkpoints every this many iterations; 0 keeps only the last.
    pub checkpoint_every: usize,
    /// Divide the edge and consistency sums by `K·#valid`.
    pub normalize_losses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            ohem: OhemConfig::default(),
            optimizer: SgdConfig::default(),
            schedule: ScheduleConfig::default(),
            total_iters: 300,
            batch_size: 4,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
            normalize_losses: true,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            kind: self.schedule.kind,
            lr_base: self.optimizer.lr_base,
            total_iters: self.total_iters,
            power: self.schedule.power,
            cycles: self.schedule.cycles,
            min_lr: self.schedule.min_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(param_err!("batch_size must be ≥ 1"));
        }
        if !(self.ohem.min_kept_fraction > 0.0 && self.ohem.min_kept_fraction <= 1.0) {
            return Err(param_err!(
                "ohem.min_kept_fraction must lie in (0, 1], got {}",
                self.ohem.min_kept_fraction
            ));
        }
        Ok(())
    }

    /// Parses JSON, then applies `key.path=value` overrides in order.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !value.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        // Fill defaults first so overrides can reach nested fields that the
        // file leaves out.
        let base: TrainConfig =
            serde_json::from_value(value.clone()).map_err(|e| Error::Config(e.to_string()))?;
        value = serde_json::to_value(&base).expect("config serialises");
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_with_overrides(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// First 12 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(compact.as_bytes()))[..12].to_string()
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
pub fn apply_override(config: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let assignment = assignment.trim_start_matches("--");
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {part:?} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    unreachable!("split yields at least one part")
}

/// A normalised image batch with its supervision.
#[derive(Clone, Debug)]
pub struct Batch {
    pub image: Tensor,
    pub labels: Vec<LabelMap>,
    /// Absent without an edge branch; single-channel in binary mode.
    pub target: Option<EdgeTarget>,
}

impl Batch {
    /// `samples` hold images in `[0, 1]`; normalisation happens here.
    pub fn new(samples: &[Sample], model: &ModelConfig) -> Result<Self> {
        let images: Vec<Tensor> = samples.iter().map(|s| data::normalize(&s.image)).collect();
        let labels: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
        let target = match model.edge_mode {
            EdgeMode::None => None,
            mode => {
                let per: Vec<EdgeTarget> = labels
                    .iter()
                    .map(|l| derive_edge_targets(l, model.num_classes, model.edge_width, IGNORE_LABEL))
                    .collect::<Result<_>>()?;
                let t = EdgeTarget::stack(&per)?;
                Some(if mode == EdgeMode::Binary { binary_edge_union(&t)? } else { t })
            }
        };
        Ok(Batch {
            image: Tensor::stack_batch(&images)?,
            labels,
            target,
        })
    }

    pub fn num_valid(&self) -> usize {
        self.labels.iter().map(|l| l.num_valid(IGNORE_LABEL)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub ohem: OhemConfig,
    pub normalize: bool,
}

impl From<&TrainConfig> for ObjectiveConfig {
    fn from(c: &TrainConfig) -> Self {
        ObjectiveConfig {
            weights: c.loss,
            ohem: c.ohem,
            normalize: c.normalize_losses,
        }
    }
}

/// Every intermediate of one loss evaluation.
pub struct Objective<'t> {
    pub outputs: Outputs<'t>,
    pub seg: OhemLoss<'t>,
    pub l_e: Option<Var<'t>>,
    /// Present only while the consistency term is active.
    pub consistency: Option<ConsistencyTerms<'t>>,
    pub total: TotalLoss<'t>,
}

pub fn objective<'t>(
    net: &TriangleNet,
    params: &BoundParams<'t>,
    image: Var<'t>,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    progress: f64,
) -> Result<Objective<'t>> {
    let outputs = net.forward_full(params, image)?;
    let num_valid = batch.num_valid();
    if num_valid == 0 {
        return Err(Error::Data("batch has no valid pixels".into()));
    }
    let seg = ohem_cross_entropy(
        outputs.seg_logits,
        &batch.labels,
        cfg.ohem.thresh,
        cfg.ohem.min_kept(num_valid),
        IGNORE_LABEL,
    )?;
    let (l_e, consistency) = match (outputs.e, &batch.target) {
        (Some(e), Some(target)) => {
            let l_e = multilabel_edge_loss(e, target, cfg.normalize)?;
            let terms = if cfg.weights.consistency_active(progress) {
                Some(decomposed_consistency_loss(outputs.c, e, target, cfg.normalize)?)
            } else {
                None
            };
            (Some(l_e), terms)
        }
        (None, _) => (None, None),
        (Some(_), None) => return Err(Error::Contract("edge branch present but batch has no edge target".into())),
    };
    let total = total_loss(&seg, l_e, consistency.as_ref(), &cfg.weights, progress)?;
    Ok(Objective {
        outputs,
        seg,
        l_e,
        consistency,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

pub const LOSS_CSV_HEADER: &str = "iter,lr,l_s,l_e,l_c1,l_c2,l_cd,total";

impl IterationLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.lr, l.l_s, l.l_e, l.l_c1, l.l_c2, l.l_cd, l.total
        )
    }
}

/// Sequential SGD training over an in-memory training split.
pub struct Trainer {
    config: TrainConfig,
    net: TriangleNet,
    params: ParameterSet,
    sgd: SgdState,
    rng: ChaCha8Rng,
    iteration: usize,
    train: Vec<Sample>,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let net = TriangleNet::new(config.model)?;
        let params = net.init_parameters(config.seed);
        let sgd = SgdState::new(config.optimizer, &params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config,
            net,
            params,
            sgd,
            rng,
            iteration: 0,
            train,
        })
    }

    /// Continues training from `ckpt` exactly where it stopped.
    pub fn resume(config: TrainConfig, train: Vec<Sample>, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config, train)?;
        t.net.check_parameters(&ckpt.params)?;
        t.net.check_parameters(&ckpt.velocity)?;
        if ckpt.iteration as usize > t.config.total_iters {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at iteration {} but total_iters is {}",
                ckpt.iteration, t.config.total_iters
            )));
        }
        t.iteration = ckpt.iteration as usize;
        t.params = ckpt.params;
        t.sgd.velocity = ckpt.velocity;
        t.rng = ckpt.rng.restore();
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &TriangleNet {
        &self.net
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.total_iters
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration as u64,
            rng: RngState::capture(&self.rng),
            params: self.params.clone(),
            velocity: self.sgd.velocity.clone(),
        }
    }

    fn next_batch(&mut self) -> Result<Batch> {
        let mut samples = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let idx = self.rng.gen_range(0..self.train.len());
            samples.push(data::augment(&self.train[idx], &self.config.augment, &mut self.rng)?);
        }
        Batch::new(&samples, &self.config.model)
    }

    /// One SGD iteration.
    pub fn step(&mut self) -> Result<IterationLog> {
        if self.is_done() {
            return Err(Error::Contract("training already reached total_iters".into()));
        }
        let t = self.iteration;
        let lr = self.config.schedule().lr_at(t)?;
        let progress = t as f64 / self.config.total_iters as f64;
        let batch = self.next_batch()?;
        let obj_cfg = ObjectiveConfig::from(&self.config);
        let tape = Tape::new();
        let bound = self.params.bind(&tape, true);
        let obj = objective(&self.net, &bound, tape.constant(batch.image.clone()), &batch, &obj_cfg, progress)?;
        let losses = obj.total.breakdown;
        if !losses.total.is_finite() {
            return Err(Error::Data(format!("loss diverged at iteration {t}: {}", losses.total)));
        }
        let grads = bound.gradients(&tape.backward(obj.total.total)?);
        sgd_step(&mut self.params, &grads, &mut self.sgd, lr)?;
        self.iteration += 1;
        Ok(IterationLog { iter: t, lr, losses })
    }

    pub fn run(&mut self, mut on_iter: impl FnMut(&IterationLog) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let log = self.step()?;
            on_iter(&log)?;
        }
        Ok(())
    }
}

/// Segmentation scores and the consistency gap of a model on a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub iou: IouReport,
    pub consistency_gap: Option<f64>,
}

/// Samples hold images in `[0, 1]`.
pub fn evaluate(net: &TriangleNet, params: &ParameterSet, samples: &[Sample], multiscale: bool) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let k = net.config().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    let (mut gap_sum, mut gap_count) = (0.0, 0.0);
    for chunk in samples.chunks(4) {
        let batch = Batch::new(chunk, net.config())?;
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let out = net.forward_full(&bound, tape.constant(batch.image.clone()))?;
        let s = if multiscale {
            multiscale_infer(net, params, &batch.image, &MULTISCALE_SCALES)?
        } else {
            out.s.value().as_ref().clone()
        };
        for (pred, truth) in argmax_labels(&s)?.iter().zip(&batch.labels) {
            cm.accumulate(pred, truth, IGNORE_LABEL)?;
        }
        if let (Some(e), Some(target)) = (out.e, &batch.target) {
            let n = (target.num_valid() * target.num_classes()) as f64;
            if n > 0.0 {
                gap_sum += consistency_gap(&out.c.value(), &e.value(), target)? * n;
                gap_count += n;
            }
        }
    }
    Ok(Evaluation {
        iou: iou_report(&cm)?,
        consistency_gap: (gap_count > 0.0).then(|| gap_sum / gap_count),
    })
}

pub fn eval_report(
    config: &TrainConfig,
    params: &ParameterSet,
    split: &str,
    samples: &[Sample],
    multiscale: bool,
) -> Result<EvalReport> {
    let net = TriangleNet::new(config.model)?;
    net.check_parameters(params)?;
    let ev = evaluate(&net, params, samples, multiscale)?;
    Ok(EvalReport {
        split: split.to_string(),
        num_images: samples.len(),
        per_class_iou: ev.iou.per_class,
        miou: ev.iou.miou,
        pixel_accuracy: ev.iou.pixel_accuracy,
        consistency_gap: ev.consistency_gap,
        multiscale,
        config_hash: config.hash(),
        seed: config.seed,
    })
}

pub const LOSS_CSV: &str = "loss.csv";
pub const CONFIG_JSON: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";

pub fn checkpoint_name(iter: usize) -> String {
    format!("checkpoint_{iter:06}.bin")
}

/// Fresh `<timestamp>-<confighash>` directory under `output_dir`.
pub fn new_run_dir(config: &TrainConfig) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{}", config.hash());
    let mut dir = config.output_dir.join(&base);
    let mut n = 2;
    while dir.exists() {
        dir = config.output_dir.join(format!("{base}-{n}"));
        n += 1;
    }
    Ok(dir)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Use this directory instead of a fresh timestamped one.
    pub run_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub iterations: usize,
    pub last: Option<IterationLog>,
}

/// Trains from `config`, writing the resolved config, the loss CSV and the
/// checkpoints into one run directory.
pub fn run_training(config: &TrainConfig, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let train = data::load_split(&config.data_dir, &config.train_split, config.model.num_classes)?;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::resume(config.clone(), train, Checkpoint::load(path)?)?,
        None => Trainer::new(config.clone(), train)?,
    };
    let run_dir = match &opts.run_dir {
        Some(d) => d.clone(),
        None => new_run_dir(config)?,
    };
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let cfg_path = run_dir.join(CONFIG_JSON);
    fs::write(&cfg_path, config.to_json()).map_err(|e| Error::io(&cfg_path, e))?;

    let csv_path = run_dir.join(LOSS_CSV);
    let mut csv = std::io::BufWriter::new(fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?);
    writeln!(csv, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    let start = trainer.iteration();
    let mut last = None;
    let every = config.checkpoint_every;
    loop {
        if every > 0 && trainer.iteration() % every == 0 && trainer.iteration() > start {
            trainer.checkpoint().save(&run_dir.join(checkpoint_name(trainer.iteration())))?;
        }
        if trainer.is_done() {
            break;
        }
        let log = trainer.step()?;
        writeln!(csv, "{}", log.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
        last = Some(log);
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    let final_checkpoint = run_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(RunSummary {
        run_dir,
        final_checkpoint,
        iterations: trainer.iteration() - start,
        last,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub c_s: f64,
    pub c_e: f64,
    pub c_c: f64,
    pub seed: u64,
    pub miou_val: Option<f64>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

pub const GRID_CSV_HEADER: &str = "c_s,c_e,c_c,seed,miou_val,status";

impl GridRow {
    pub fn csv_row(&self) -> String {
        let miou = self.miou_val.map(|m| m.to_string()).unwrap_or_default();
        let status = self.status.replace([',', '\n'], ";");
        format!("{},{},{},{},{},{}", self.c_s, self.c_e, self.c_c, self.seed, miou, status)
    }
}

/// Trains one fresh model per grid cell for `budget_iters` and ranks the
/// cells by validation mIoU, best first; failed cells go last.
pub fn grid_search(
    template: &TrainConfig,
    grid: &WeightGrid,
    budget_iters: usize,
    train: &[Sample],
    val: &[Sample],
) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for (c_s, c_e, c_c) in grid.cells()? {
        let mut cfg = template.clone();
        cfg.loss.c_s = c_s;
        cfg.loss.c_e = c_e;
        cfg.loss.c_c = c_c;
        cfg.total_iters = budget_iters;
        let outcome = (|| {
            let mut t = Trainer::new(cfg.clone(), train.to_vec())?;
            t.run(|_| Ok(()))?;
            evaluate(t.net(), t.params(), val, false)
        })();
        rows.push(match outcome {
            Ok(ev) => GridRow {
                c_s,
                c_e,
                c_c,
                seed: cfg.seed,
                miou_val: Some(ev.iou.miou),
                status: "ok".into(),
            },
            Err(e) => GridRow {
                c_s,
                c_e,
                c_c,
                seed: cfg.seed,
                miou_val: None,
                status: format!("failed: {e}"),
            },
        });
    }
    rows.sort_by(|a, b| match (a.miou_val, b.miou_val) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(rows)
}

pub fn write_grid_csv(rows: &[GridRow], path: &Path) -> Result<()> {
    let mut text = format!("{GRID_CSV_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
