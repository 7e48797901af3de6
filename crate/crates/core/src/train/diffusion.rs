use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Checkpoint;
use crate::ablation::{ablate_random, AblationPattern, Mask};
use crate::autodiff::{lr_schedule, AdamWConfig, AdamWState, Tape, Tensor};
use crate::diffusion::{forward_sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::phantom::LabeledSample;
use crate::unet::{encode_masks, UNet, UNetConfig};

/// Which of the three diffusion models to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Mask-conditioned, masks fed verbatim.
    Guided,
    /// Mask-conditioned with random per-class ablation.
    GuidedAblated,
    /// All-zero mask channel throughout.
    Unconditional,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Guided => "guided",
            TrainMode::GuidedAblated => "guided-ablated",
            TrainMode::Unconditional => "unconditional",
        }
    }

    pub fn guidance(self) -> bool {
        self != TrainMode::Unconditional
    }

    pub fn ablation(self) -> bool {
        self == TrainMode::GuidedAblated
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            TrainMode::Guided,
            TrainMode::GuidedAblated,
            TrainMode::Unconditional,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown mode {s:?} (expected guided, guided-ablated or unconditional)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub ablation_enabled: bool,
    pub guidance_enabled: bool,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            base_lr: 1e-4,
            warmup_steps: 500,
            ablation_enabled: true,
            guidance_enabled: true,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        let mut c = TrainConfig::default();
        c.set_mode(mode);
        c
    }

    pub fn set_mode(&mut self, mode: TrainMode) {
        self.guidance_enabled = mode.guidance();
        self.ablation_enabled = mode.ablation();
    }

    /// Ablation only ever applies to guided training.
    pub fn effective_ablation(&self) -> bool {
        self.guidance_enabled && self.ablation_enabled
    }

    pub fn mode(&self) -> TrainMode {
        match (self.guidance_enabled, self.effective_ablation()) {
            (false, _) => TrainMode::Unconditional,
            (true, false) => TrainMode::Guided,
            (true, true) => TrainMode::GuidedAblated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }

    /// Optimizer steps for `n` training items.
    pub fn total_steps(&self, n: usize) -> u64 {
        (self.epochs * n.div_ceil(self.batch_size)) as u64
    }

    pub fn to_key_values(&self, kv: &mut KeyValues) {
        kv.set("mode", self.mode());
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("base_lr", self.base_lr);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("seed", self.seed);
        kv.set("adamw.beta1", self.adamw.beta1);
        kv.set("adamw.beta2", self.adamw.beta2);
        kv.set("adamw.eps", self.adamw.eps);
        kv.set("adamw.weight_decay", self.adamw.weight_decay);
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Writes `step  epoch  lr  loss` rows with a header.
pub fn loss_tsv(records: &[LossRecord]) -> String {
    let mut s = String::from("step\tepoch\tlr\tloss\n");
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{:.6e}\t{:.6}\n",
            r.step, r.epoch, r.lr, r.loss
        ));
    }
    s
}

/// Mean loss of each epoch, in epoch order.
pub fn epoch_means(records: &[LossRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in records {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += r.loss;
        out[r.epoch].1 += 1;
    }
    out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

/// What the model saw in one step; passed to [`StepObserver`]s.
pub struct StepView<'a> {
    pub record: LossRecord,
    /// Masks after ablation (all background for unconditional training).
    pub masks: &'a [Mask],
    /// Ablation pattern of each item, when ablation is on.
    pub patterns: &'a [AblationPattern],
    /// The mask channel actually concatenated to `x_t`.
    pub mask_channel: &'a Tensor<f32>,
    pub timesteps: &'a [usize],
}

pub trait StepObserver {
    fn on_step(&mut self, view: &StepView<'_>);
}

impl<F: FnMut(&StepView<'_>)> StepObserver for F {
    fn on_step(&mut self, view: &StepView<'_>) {
        self(view)
    }
}

pub struct DiffusionRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
    /// Count of each ablation pattern drawn, indexed by pattern index.
    pub pattern_counts: Vec<u64>,
}

/// Trains the noise predictor on `data` with the MSE noise objective.
pub fn train_diffusion(
    data: &[LabeledSample],
    config: &TrainConfig,
    unet: &UNetConfig,
    schedule: &NoiseSchedule,
    mut observer: Option<&mut dyn StepObserver>,
) -> Result<DiffusionRun> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let c = unet.num_classes;
    if let Some(bad) = data.iter().find(|s| s.mask.num_classes() != c) {
        return Err(Error::Config(format!(
            "sample {} has {} classes, network expects {c}",
            bad.index,
            bad.mask.num_classes()
        )));
    }
    let total = config.total_steps(data.len());
    // fail early on a bad warmup rather than at the first step
    lr_schedule(0, total, config.warmup_steps, config.base_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = UNet::<f32>::init(unet.clone(), &mut rng)?;
    let mut opt = AdamWState::new(net.params().tensors(), config.adamw);
    let ablate = config.effective_ablation();
    let mut pattern_counts = vec![0u64; if ablate { 1usize << (c - 1).min(20) } else { 0 }];
    let mut losses = Vec::with_capacity(total as usize);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let lr = lr_schedule(step, total, config.warmup_steps, config.base_lr)?;
            let mut masks = Vec::with_capacity(batch.len());
            let mut patterns = Vec::new();
            for &i in batch {
                let m = &data[i].mask;
                if !config.guidance_enabled {
                    masks.push(Mask::empty(m.width(), m.height(), c));
                } else if ablate {
                    let (am, p) = ablate_random(m, &mut rng)?;
                    if let Some(slot) = pattern_counts.get_mut(p.index() as usize) {
                        *slot += 1;
                    }
                    masks.push(am);
                    patterns.push(p);
                } else {
                    masks.push(m.clone());
                }
            }
            let ts: Vec<usize> = batch
                .iter()
                .map(|_| rng.random_range(1..=schedule.num_steps()))
                .collect();
            let images: Vec<Tensor<f32>> = batch.iter().map(|&i| data[i].image.clone()).collect();
            let x0 = Tensor::stack_outer(&images)?;
            let eps = Tensor::from_fn(x0.shape().to_vec(), |_| {
                rng.sample::<f32, _>(StandardNormal)
            });
            let x_t = forward_sample_batch(&x0, &ts, &eps, schedule)?;
            let mask_channel = encode_masks::<f32>(&masks)?;

            let mut tape = Tape::new();
            let vars = net.params().bind(&mut tape, true);
            let xv = tape.constant(x_t);
            let mv = tape.constant(mask_channel.clone());
            let ev = tape.constant(eps);
            let pred = net.predict_noise_on(&mut tape, &vars, xv, mv, &ts)?;
            let loss_var = tape.mse(pred, ev)?;
            let loss = tape.value(loss_var).item()? as f64;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {loss} at step {step} (lr {lr:.3e})"
                )));
            }
            tape.backward(loss_var)?;
            let grads: Vec<Option<&[f32]>> = vars.iter().map(|&v| tape.grad(v)).collect();
            opt.step(net.params_mut().tensors_mut(), &grads, lr)?;

            let record = LossRecord {
                step,
                epoch,
                lr,
                loss,
            };
            if let Some(obs) = observer.as_deref_mut() {
                obs.on_step(&StepView {
                    record,
                    masks: &masks,
                    patterns: &patterns,
                    mask_channel: &mask_channel,
                    timesteps: &ts,
                });
            }
            losses.push(record);
            step += 1;
        }
    }
    let mut info = KeyValues::new();
    config.to_key_values(&mut info);
    Ok(DiffusionRun {
        checkpoint: Checkpoint::from_net(&net, Some(schedule), step, info),
        losses,
        pattern_counts,
    })
}

/// Ablation histogram as `pattern  removed  count` rows with a header.
pub fn pattern_histogram_tsv(num_classes: usize, counts: &[u64]) -> Result<String> {
    let mut s = String::from("pattern\tremoved\tcount\n");
    for (i, &n) in counts.iter().enumerate() {
        let p = AblationPattern::from_index(num_classes, i as u64)?;
        let removed: Vec<String> = p.removed_classes().iter().map(|c| c.to_string()).collect();
        let removed = if removed.is_empty() {
            "-".to_string()
        } else {
            removed.join(",")
        };
        s.push_str(&format!("{i}\t{removed}\t{n}\n"));
    }
    Ok(s)
}
