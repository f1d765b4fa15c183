//! Two-stage training: template pretraining against whole label maps, then
//! end-to-end training of encoder and point head on sampled points with the
//! template frozen.

mod sampling;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{dice_macro, dice_from_counts};
use crate::model::{argmax, coords_tensor, voxel_point, ImplicitModel, ModelConfig, TemplateNet};
use crate::nn::{cosine_lr, AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::phantom::Subject;
use crate::volume::{downsample_scalar, nearest_label, trilinear_sample, GridDims, LabelVolume, ScalarVolume};
use crate::{Error, Result};

pub use sampling::{bav_foreground, sample_points, uniform_count, PointBatch};

/// Which volumes feed the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    /// Image only.
    I,
    /// Image plus binary bronchi, artery and vein masks.
    IBAV,
    /// Lobe map only.
    L,
    /// Lobe map plus the three tree masks.
    LBAV,
}

impl InputMode {
    pub const ALL: [InputMode; 4] = [InputMode::I, InputMode::IBAV, InputMode::L, InputMode::LBAV];

    pub fn channels(self) -> usize {
        match self {
            InputMode::I | InputMode::L => 1,
            InputMode::IBAV | InputMode::LBAV => 4,
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InputMode::I => "I",
            InputMode::IBAV => "IBAV",
            InputMode::L => "L",
            InputMode::LBAV => "LBAV",
        };
        f.write_str(s)
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" => Ok(InputMode::I),
            "IBAV" => Ok(InputMode::IBAV),
            "L" => Ok(InputMode::L),
            "LBAV" => Ok(InputMode::LBAV),
            other => Err(Error::InvalidValue(format!("unknown input mode {other:?}"))),
        }
    }
}

fn mask_channel(labels: &LabelVolume) -> Vec<f32> {
    labels.data().iter().map(|&v| (v != 0) as u8 as f32).collect()
}

/// Encoder input `[1, C, D, H, W]` for `mode`, optionally block-averaged to a
/// cube of edge `resolution`.
pub fn assemble_input(subject: &Subject, mode: InputMode, resolution: Option<usize>) -> Result<Tensor> {
    let dims = subject.dims();
    let mut channels: Vec<Vec<f32>> = Vec::with_capacity(4);
    match mode {
        InputMode::I | InputMode::IBAV => channels.push(subject.image.data().to_vec()),
        InputMode::L | InputMode::LBAV => {
            let scale = 1.0 / subject.spec.num_lobes.max(1) as f32;
            channels.push(subject.lobes.data().iter().map(|&v| v as f32 * scale).collect());
        }
    }
    if matches!(mode, InputMode::IBAV | InputMode::LBAV) {
        channels.push(mask_channel(&subject.bronchi));
        channels.push(mask_channel(&subject.artery));
        channels.push(mask_channel(&subject.vein));
    }
    let target = match resolution {
        Some(r) => GridDims::cube(r)?,
        None => dims,
    };
    let mut data = Vec::with_capacity(channels.len() * target.len());
    for ch in channels {
        let vol = ScalarVolume::new(dims, ch)?;
        let vol = if target == dims { vol } else { downsample_scalar(&vol, target)? };
        data.extend(vol.data().iter().map(|&v| v as f64));
    }
    let c = data.len() / target.len();
    Tensor::new(&[1, c, target.d, target.h, target.w], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub input_mode: InputMode,
    pub points_per_subject: usize,
    /// Fraction of uniformly sampled points; the rest come from the trees.
    pub gamma: f64,
    pub lr: f64,
    /// Cosine annealing lower bound.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub lambda_def: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Encoder input edge; `None` keeps the subject resolution.
    pub input_resolution: Option<usize>,
    /// Validation grid edge; `None` uses the subject resolution.
    pub val_resolution: Option<usize>,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::IBAV,
            points_per_subject: 4096,
            gamma: 1.0,
            lr: 1e-3,
            lr_floor: 1e-6,
            weight_decay: 0.01,
            lambda_def: 0.01,
            alpha: 0.5,
            beta: 1.0,
            epochs: 10,
            seed: 0,
            input_resolution: None,
            val_resolution: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidValue(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.lambda_def >= 0.0) {
            return bad("alpha, beta and lambda_def must be >= 0");
        }
        if !(self.lr > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr) {
            return bad("need 0 <= lr_floor <= lr and lr > 0");
        }
        if self.points_per_subject == 0 {
            return bad("points_per_subject must be positive");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub dice: f64,
    pub def: f64,
    pub total: f64,
}

struct LossVars {
    ce: Var,
    dice: Var,
    def: Option<Var>,
    total: Var,
}

/// `alpha CE + beta (1 - soft Dice)`, plus `lambda |d|` when a deformation is given.
fn task_loss(
    tape: &mut Tape,
    logits: Var,
    deformation: Option<Var>,
    labels: &[u8],
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> Result<LossVars> {
    let ce = tape.cross_entropy(logits, labels)?;
    let probs = tape.softmax(logits)?;
    let dice = tape.soft_dice(probs, labels)?;
    let def = deformation.map(|d| tape.deformation_penalty(d)).transpose()?;
    let mut terms = vec![(ce, alpha), (dice, beta)];
    if let Some(d) = def {
        terms.push((d, lambda));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(LossVars { ce, dice, def, total })
}

fn read_terms(tape: &Tape, v: &LossVars) -> Result<LossTerms> {
    let t = LossTerms {
        ce: tape.value(v.ce).item(),
        dice: tape.value(v.dice).item(),
        def: v.def.map(|d| tape.value(d).item()).unwrap_or(0.0),
        total: tape.value(v.total).item(),
    };
    if !t.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss: {t:?}")));
    }
    Ok(t)
}

/// Labels on the voxel centers of `dims` by nearest-voxel lookup.
pub fn resample_labels(labels: &LabelVolume, dims: GridDims) -> LabelVolume {
    if labels.dims() == dims {
        return labels.clone();
    }
    let data = (0..dims.len()).map(|i| nearest_label(labels, voxel_point(dims, i))).collect();
    LabelVolume::new(dims, labels.num_classes(), data).expect("labels come from a valid volume")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; each step draws one random subject.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: None,
            lr: 1e-3,
            lr_floor: 1e-6,
            weight_decay: 0.01,
            alpha: 0.5,
            beta: 1.0,
            seed: 0,
        }
    }
}

/// Result of template pretraining.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub template: TemplateNet,
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fits the template and its latent code to randomly drawn training label
/// maps, resampled to the template grid.
pub fn pretrain_template(subjects: &[&Subject], model: &ModelConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    if subjects.is_empty() {
        return Err(Error::InvalidValue("template pretraining needs at least one subject".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut template = TemplateNet::new(model.template.clone(), model.num_classes, &mut rng)?;
    let grid = GridDims::cube(model.template.resolution())?;
    let targets: Vec<Vec<u8>> = subjects
        .iter()
        .map(|s| resample_labels(&s.segments, grid).into_data())
        .collect();
    let mut opt = AdamW::new(
        &template.store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let steps = cfg.steps_per_epoch.unwrap_or(subjects.len()).max(1);
    let total = cfg.epochs * steps;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for s in 0..steps {
            let target = &targets[rng.random_range(0..targets.len())];
            let mut tape = Tape::new();
            let bound = template.store.bind(&mut tape, true);
            let out = template.forward(&mut tape, &bound)?;
            let logits = tape.channels_last(out)?;
            let loss = task_loss(&mut tape, logits, None, target, cfg.alpha, cfg.beta, 0.0)?;
            let terms = read_terms(&tape, &loss)?;
            let mut grads = tape.backward(loss.total)?;
            let g = bound.gradients(&template.store, &mut grads);
            let lr = cosine_lr(cfg.lr, cfg.lr_floor, epoch * steps + s, total);
            opt.step_with_lr(&mut template.store, &g, lr);
            sum += terms.total;
        }
        let mean = sum / steps as f64;
        log::info!("template epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(Pretrained { template, epoch_losses })
}

/// Optimizer state for the trainable parts of a model.
pub struct Optimizers {
    pub encoder: AdamW,
    pub head: AdamW,
}

impl Optimizers {
    pub fn new(model: &ImplicitModel, cfg: &TrainConfig) -> Self {
        Self {
            encoder: AdamW::new(&model.encoder.store, cfg.adamw()),
            head: AdamW::new(&model.head.store, cfg.adamw()),
        }
    }
}

/// Per-step outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: LossTerms,
    /// Argmax predictions at the batch points, before the update.
    pub predictions: Vec<u8>,
}

/// One optimizer step on one point batch.
pub fn train_step(
    model: &mut ImplicitModel,
    opts: &mut Optimizers,
    input: &Tensor,
    batch: &PointBatch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let coords = coords_tensor(&batch.coords);
    let out = model.forward(&mut tape, &bound, input, &coords)?;
    let loss = task_loss(
        &mut tape,
        out.logits,
        Some(out.deformation),
        &batch.labels,
        cfg.alpha,
        cfg.beta,
        cfg.lambda_def,
    )?;
    let terms = read_terms(&tape, &loss)?;
    let k = model.config.num_classes;
    let predictions = tape.value(out.logits).data().chunks(k).map(argmax).collect();
    let mut grads = tape.backward(loss.total)?;
    let ge = bound.encoder.gradients(&model.encoder.store, &mut grads);
    let gh = bound.head.gradients(&model.head.store, &mut grads);
    opts.encoder.step_with_lr(&mut model.encoder.store, &ge, lr);
    opts.head.step_with_lr(&mut model.head.store, &gh, lr);
    Ok(StepStats { loss: terms, predictions })
}

/// Macro Dice over foreground classes of point predictions.
pub fn point_dice(pred: &[u8], labels: &[u8], num_classes: usize) -> f64 {
    let mut inter = vec![0usize; num_classes];
    let mut np = vec![0usize; num_classes];
    let mut ng = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(labels) {
        np[p as usize] += 1;
        ng[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let fg = num_classes - 1;
    (1..num_classes)
        .map(|c| dice_from_counts(inter[c], ng[c], np[c]))
        .sum::<f64>()
        / fg as f64
}

/// One line of the NDJSON training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss_ce: f64,
    pub loss_dice: f64,
    pub loss_def: f64,
    pub dice_macro: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model of the epoch with the best validation Dice (or the last epoch
    /// without validation data).
    pub best: ImplicitModel,
    pub last: ImplicitModel,
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
    pub history: Vec<LogRecord>,
}

/// Where training writes its side outputs.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
}

fn emit(sinks: &mut TrainSinks<'_>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = sinks.log.as_mut() {
        let line = serde_json::to_string(rec).expect("log records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
    }
    Ok(())
}

/// Validation seed stream, fixed so every epoch sees the same points.
const VAL_STREAM: u64 = 0x7661_6c69_6461_7465;

/// Mean losses on fixed validation point batches and dense-inference macro Dice.
pub fn validate(model: &ImplicitModel, subjects: &[Subject], cfg: &TrainConfig) -> Result<(LossTerms, f64)> {
    let mut acc = LossTerms {
        ce: 0.0,
        dice: 0.0,
        def: 0.0,
        total: 0.0,
    };
    let mut dice_sum = 0.0;
    for (i, s) in subjects.iter().enumerate() {
        let input = assemble_input(s, cfg.input_mode, cfg.input_resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(VAL_STREAM ^ i as u64);
        let batch = sample_points(s, cfg.points_per_subject, 1.0, &[], &mut rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &bound, &input, &coords_tensor(&batch.coords))?;
        let loss = task_loss(
            &mut tape,
            out.logits,
            Some(out.deformation),
            &batch.labels,
            cfg.alpha,
            cfg.beta,
            cfg.lambda_def,
        )?;
        let t = read_terms(&tape, &loss)?;
        acc.ce += t.ce;
        acc.dice += t.dice;
        acc.def += t.def;
        acc.total += t.total;
        let dims = match cfg.val_resolution {
            Some(r) => GridDims::cube(r)?,
            None => s.dims(),
        };
        let pred = model.infer(&input, dims)?;
        dice_sum += dice_macro(&resample_labels(&s.segments, dims), &pred)?;
    }
    let n = subjects.len().max(1) as f64;
    Ok((
        LossTerms {
            ce: acc.ce / n,
            dice: acc.dice / n,
            def: acc.def / n,
            total: acc.total / n,
        },
        dice_sum / n,
    ))
}

/// End-to-end training of encoder and point head against the model's frozen
/// template. Deterministic for a given seed.
pub fn train_main(
    mut model: ImplicitModel,
    train: &[Subject],
    val: &[Subject],
    cfg: &TrainConfig,
    mut sinks: TrainSinks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidValue("training needs at least one subject".into()));
    }
    if model.config.encoder.in_channels != cfg.input_mode.channels() {
        return Err(Error::Shape(format!(
            "input mode {} provides {} channels, encoder expects {}",
            cfg.input_mode,
            cfg.input_mode.channels(),
            model.config.encoder.in_channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opts = Optimizers::new(&model, cfg);
    let foregrounds: Vec<Vec<usize>> = train.iter().map(bav_foreground).collect();
    let total_steps = cfg.epochs * train.len();
    let mut step = 0;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ImplicitModel)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut dl, mut df, mut pd) = (0.0, 0.0, 0.0, 0.0);
        for &i in &order {
            let s = &train[i];
            let input = assemble_input(s, cfg.input_mode, cfg.input_resolution)?;
            let batch = sample_points(s, cfg.points_per_subject, cfg.gamma, &foregrounds[i], &mut rng);
            let lr = cosine_lr(cfg.lr, cfg.lr_floor, step, total_steps);
            let stats = train_step(&mut model, &mut opts, &input, &batch, cfg, lr)?;
            step += 1;
            ce += stats.loss.ce;
            dl += stats.loss.dice;
            df += stats.loss.def;
            pd += point_dice(&stats.predictions, &batch.labels, model.config.num_classes);
        }
        let n = train.len() as f64;
        let rec = LogRecord {
            epoch,
            split: "train".into(),
            loss_ce: ce / n,
            loss_dice: dl / n,
            loss_def: df / n,
            dice_macro: pd / n,
        };
        emit(&mut sinks, &rec)?;
        history.push(rec);

        if !val.is_empty() {
            let (loss, dice) = validate(&model, val, cfg)?;
            let rec = LogRecord {
                epoch,
                split: "val".into(),
                loss_ce: loss.ce,
                loss_dice: loss.dice,
                loss_def: loss.def,
                dice_macro: dice,
            };
            log::info!("epoch {epoch}: val dice {dice:.4}");
            emit(&mut sinks, &rec)?;
            history.push(rec);
            if best.as_ref().is_none_or(|(b, _, _)| dice > *b) {
                best = Some((dice, epoch, model.clone()));
            }
        }
        if let Some(dir) = sinks.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                model.save(&dir.join(format!("epoch_{epoch:04}.snn")))?;
            }
        }
    }
    let (best_val_dice, best_epoch, best_model) = match best {
        Some((d, e, m)) => (Some(d), e, m),
        None => (None, cfg.epochs.saturating_sub(1), model.clone()),
    };
    if let Some(dir) = sinks.checkpoint_dir {
        model.save(&dir.join("last.snn"))?;
        best_model.save(&dir.join("best.snn"))?;
    }
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_epoch,
        best_val_dice,
        history,
    })
}

/// Dense prediction for one subject at any output resolution.
pub fn infer(subject: &Subject, mode: InputMode, input_resolution: Option<usize>, model: &ImplicitModel, out_dims: GridDims) -> Result<LabelVolume> {
    let input = assemble_input(subject, mode, input_resolution)?;
    model.infer(&input, out_dims)
}

/// Argmax of the trilinearly sampled template alone at every voxel center.
pub fn template_only_labels(model: &ImplicitModel, out_dims: GridDims) -> Result<LabelVolume> {
    let field = model.template_field();
    let data = (0..out_dims.len())
        .map(|i| argmax(&trilinear_sample(field, voxel_point(out_dims, i))))
        .collect();
    LabelVolume::new(out_dims, field.channels() as u8, data)
}

/// Mean `|d|` over `n` uniform points per subject.
pub fn mean_deformation(model: &ImplicitModel, subjects: &[Subject], cfg: &TrainConfig, n: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, s) in subjects.iter().enumerate() {
        let input = assemble_input(s, cfg.input_mode, cfg.input_resolution)?;
        let pyr = model.encoder.pyramid(&input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        let batch = sample_points(s, n, 1.0, &[], &mut rng);
        let d = model.point_deformation(&pyr, &batch.coords)?;
        for row in d.data().chunks(3) {
            total += (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
