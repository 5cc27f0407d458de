//! Deterministic mini-batch training with every loss term, SGD with
//! momentum and a cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{
    make_sva_pairs, sample_mask, sva_patch_replace, weak_augment, MaskSpec, SvaPair,
};
use crate::datagen::{swap_backgrounds, GcdSplit, ShortcutSpec, TrainingData};
use crate::error::{Error, Result};
use crate::eval::{hungarian_accuracy, predict_from_probs, EvalReport};
use crate::losses::{
    l_cls, l_kl_as_printed, l_kl_sva, l_rep_s, l_rep_u, pseudo_labels, total_loss, LossParts,
    LossWeights,
};
use crate::model::{stack_images, Model, ModelDims};
use crate::prototype_bank::{argmax, l_ssr, route, PrototypeBank, SsrConfig};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvaConfig {
    pub enabled: bool,
    /// Use the consistency integrand as printed instead of the KL form.
    pub as_printed: bool,
    pub mask: MaskSpec,
}

impl Default for SvaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            as_printed: false,
            mask: MaskSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of each batch drawn from the labeled pool.
    pub labeled_fraction: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub cosine: bool,
    pub seed: u64,
    /// Overrides the derived number of steps per epoch.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            labeled_fraction: 0.5,
            lr: 0.1,
            lr_min: 1e-4,
            momentum: 0.9,
            cosine: true,
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::invalid(
                "train.batch_size",
                alloc::format!("{} must be even and at least 4", self.batch_size),
            ));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0) {
            return Err(Error::invalid(
                "train.labeled_fraction",
                alloc::format!("{} is outside (0, 1)", self.labeled_fraction),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.lr_min >= 0.0 && self.lr_min.is_finite())
        {
            return Err(Error::invalid(
                "train.lr",
                "learning rates must be finite and >= 0",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "train.momentum",
                alloc::format!("{} not in [0, 1)", self.momentum),
            ));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("train.steps_per_epoch", "must be positive"));
        }
        Ok(())
    }

    pub fn labeled_per_batch(&self) -> usize {
        libm::ceil(self.labeled_fraction * self.batch_size as f64 - 1e-9) as usize
    }
}

/// Everything that shapes a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub model: ModelDims,
    pub loss: LossWeights,
    pub sva: SvaConfig,
    pub ssr: SsrConfig,
    pub train: TrainConfig,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.sva.mask.validate()?;
        self.ssr.validate()?;
        self.train.validate()
    }

    /// Weights in force during `epoch` (0-based): `β` is 0 while SSR warms
    /// up or when it is off.
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        let mut w = self.loss;
        if !self.ssr.enabled || epoch < self.ssr.warmup_epochs {
            w.beta = 0.0;
        }
        w
    }
}

/// The three per-run random streams besides initialization.
#[derive(Debug, Clone)]
pub struct Streams {
    pub data: Rng,
    pub augment: Rng,
    pub mask: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: rng::stream(seed, "data-order"),
            augment: rng::stream(seed, "augment"),
            mask: rng::stream(seed, "mask"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub step: u64,
    pub epoch: usize,
    pub velocity: Vec<Vec<f64>>,
    pub streams: Streams,
}

impl RunState {
    pub fn new(model: &Model, seed: u64) -> Self {
        Self {
            step: 0,
            epoch: 0,
            velocity: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
            streams: Streams::new(seed),
        }
    }
}

/// One mini-batch: labeled rows first, then unlabeled rows.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub images: Vec<&'a Tensor>,
    /// Labels of the first `labels.len()` rows.
    pub labels: Vec<usize>,
    /// Two weak views per row.
    pub views: Vec<[Tensor; 2]>,
    pub view_seeds: Vec<[u64; 2]>,
    pub pair_seed: u64,
    /// One mask seed per possible SVA source.
    pub mask_seeds: Vec<u64>,
    /// Pool positions, for bookkeeping: labeled ids then unlabeled ids.
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
    /// Labeled slots filled from the unlabeled pool.
    pub backfilled: usize,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.labels.len()
    }
}

/// Shuffled pools and cursors for one epoch.
#[derive(Debug, Clone)]
pub struct EpochOrder {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    l_cursor: usize,
    u_cursor: usize,
}

impl EpochOrder {
    pub fn new(data: &TrainingData<'_>, rng: &mut Rng) -> Self {
        let mut labeled: Vec<usize> = (0..data.labeled.len()).collect();
        let mut unlabeled: Vec<usize> = (0..data.unlabeled.len()).collect();
        labeled.shuffle(rng);
        unlabeled.shuffle(rng);
        Self {
            labeled,
            unlabeled,
            l_cursor: 0,
            u_cursor: 0,
        }
    }
}

/// `max(1, min(⌊|D_l|/n_l⌋, ⌊|D_u|/n_u⌋))` unless overridden.
pub fn steps_per_epoch(config: &TrainConfig, n_labeled: usize, n_unlabeled: usize) -> usize {
    if let Some(s) = config.steps_per_epoch {
        return s;
    }
    let n_l = config.labeled_per_batch();
    let n_u = config.batch_size - n_l;
    let by_l = n_labeled / n_l.max(1);
    let by_u = n_unlabeled.checked_div(n_u).unwrap_or(usize::MAX);
    by_l.min(by_u).max(1)
}

/// Draws the next batch without replacement within the epoch. A short
/// labeled pool is backfilled from the unlabeled one.
pub fn compose_batch<'a>(
    data: &TrainingData<'a>,
    config: &TrainConfig,
    order: &mut EpochOrder,
    streams: &mut Streams,
) -> Result<Batch<'a>> {
    let n_l = config.labeled_per_batch();
    let n_u = config.batch_size - n_l;
    let l_end = (order.l_cursor + n_l).min(order.labeled.len());
    let labeled_ids = order.labeled[order.l_cursor..l_end].to_vec();
    order.l_cursor = l_end;
    let backfilled = n_l - labeled_ids.len();
    let want_u = n_u + backfilled;
    let u_end = (order.u_cursor + want_u).min(order.unlabeled.len());
    let unlabeled_ids = order.unlabeled[order.u_cursor..u_end].to_vec();
    order.u_cursor = u_end;
    if backfilled > 0 {
        log::info!(
            "labeled pool exhausted; {backfilled} labeled slots backfilled from unlabeled data"
        );
    }
    let b = labeled_ids.len() + unlabeled_ids.len();
    if b < 2 {
        return Err(Error::domain(
            "compose_batch",
            alloc::format!("only {b} samples left for a batch"),
        ));
    }

    let mut images = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(labeled_ids.len());
    for &i in &labeled_ids {
        let (x, y) = data.labeled[i];
        images.push(x);
        labels.push(y);
    }
    images.extend(unlabeled_ids.iter().map(|&i| data.unlabeled[i]));

    let view_seeds: Vec<[u64; 2]> = (0..b)
        .map(|_| {
            let a = streams.augment.random::<u64>();
            let mut c = streams.augment.random::<u64>();
            while c == a {
                c = streams.augment.random::<u64>();
            }
            [a, c]
        })
        .collect();
    let views = images
        .iter()
        .zip(&view_seeds)
        .map(|(x, s)| Ok([weak_augment(x, s[0])?, weak_augment(x, s[1])?]))
        .collect::<Result<Vec<_>>>()?;
    let pair_seed = streams.mask.random::<u64>();
    let mask_seeds = (0..config.batch_size / 2)
        .map(|_| streams.mask.random::<u64>())
        .collect();
    Ok(Batch {
        images,
        labels,
        views,
        view_seeds,
        pair_seed,
        mask_seeds,
        labeled_ids,
        unlabeled_ids,
        backfilled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub beta_eff: f64,
    pub parts: LossParts<f64>,
    pub total: f64,
    pub sva_pairs: usize,
    pub ssr_positive: usize,
    pub ssr_negative: usize,
}

/// Parts and graph handles of one forward pass.
pub struct StepGraph {
    pub tape: Tape,
    pub bound: crate::model::Bound,
    pub parts: LossParts<Var>,
    pub total: Var,
    pub pairs: Vec<SvaPair>,
    pub ssr_counts: (usize, usize),
}

/// Builds the full objective for one batch on a fresh tape.
pub fn build_step(
    model: &Model,
    batch: &Batch<'_>,
    bank: Option<&PrototypeBank>,
    settings: &TrainSettings,
    weights: &LossWeights,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let b = batch.len();
    let n_l = batch.num_labeled();
    let w = &settings.loss;

    let v1: Vec<&Tensor> = batch.views.iter().map(|v| &v[0]).collect();
    let v2: Vec<&Tensor> = batch.views.iter().map(|v| &v[1]).collect();
    let x1 = tape.constant(stack_images(&v1)?);
    let x2 = tape.constant(stack_images(&v2)?);
    let h1 = model.forward_features(&mut tape, &bound, x1)?;
    let h2 = model.forward_features(&mut tape, &bound, x2)?;

    let z1 = model.project(&mut tape, &bound, h1)?;
    let z2 = model.project(&mut tape, &bound, h2)?;
    let rep_u = l_rep_u(&mut tape, z1, z2, w.tau_u, w.include_positive)?;
    let rep_s = if n_l >= 2 {
        let rows: Vec<usize> = (0..n_l).collect();
        let zl = tape.gather_rows(z1, &rows)?;
        let zl2 = tape.gather_rows(z2, &rows)?;
        l_rep_s(
            &mut tape,
            zl,
            zl2,
            &batch.labels,
            w.tau_c,
            w.include_positive,
        )?
    } else {
        tape.scalar(0.0)
    };

    let p1 = model.classify(&mut tape, &bound, h1, w.tau_s)?;
    let p2 = model.classify(&mut tape, &bound, h2, w.tau_s)?;
    let q = pseudo_labels(&mut tape, h2, bound.prototypes(), w.tau_t)?;
    let labeled: Vec<(usize, usize)> = batch.labels.iter().copied().enumerate().collect();
    let cls = l_cls(&mut tape, p1, p2, q, &labeled, w.lambda, w.epsilon)?;

    let probs1 = tape.tensor(p1);
    let mut pairs = Vec::new();
    let l_kl = if settings.sva.enabled {
        let mut pair_labels = batch.labels.clone();
        pair_labels.extend((n_l..b).map(|i| argmax(probs1.row(i)).0));
        pairs = make_sva_pairs(&pair_labels, batch.pair_seed)?;
        if pairs.is_empty() {
            tape.scalar(0.0)
        } else {
            let shape = batch.images[0].shape();
            let (h, wd) = (shape[1], shape[2]);
            let strong = pairs
                .iter()
                .zip(&batch.mask_seeds)
                .map(|(pair, &seed)| {
                    let mask = sample_mask(&settings.sva.mask, h, wd, seed)?;
                    sva_patch_replace(batch.images[pair.source], batch.images[pair.donor], &mask)
                })
                .collect::<Result<Vec<_>>>()?;
            let strong_refs: Vec<&Tensor> = strong.iter().collect();
            let xs = tape.constant(stack_images(&strong_refs)?);
            let hs = model.forward_features(&mut tape, &bound, xs)?;
            let ps = model.classify(&mut tape, &bound, hs, w.tau_s)?;
            let sources: Vec<usize> = pairs.iter().map(|p| p.source).collect();
            let pw = tape.gather_rows(p1, &sources)?;
            if settings.sva.as_printed {
                let clean: Vec<&Tensor> = sources.iter().map(|&i| batch.images[i]).collect();
                let xc = tape.constant(stack_images(&clean)?);
                let hc = model.forward_features(&mut tape, &bound, xc)?;
                let pc = model.classify(&mut tape, &bound, hc, w.tau_s)?;
                l_kl_as_printed(&mut tape, pc, pw, ps)?
            } else {
                l_kl_sva(&mut tape, pw, ps)?
            }
        }
    } else {
        tape.scalar(0.0)
    };

    let mut ssr_counts = (0, 0);
    let (pos, neg) = match (settings.ssr.enabled, bank) {
        (true, Some(bank)) if n_l < b => {
            let rows: Vec<usize> = (n_l..b).collect();
            let unl_probs = Tensor::new(
                vec![b - n_l, probs1.row_len()],
                probs1.data()[n_l * probs1.row_len()..].to_vec(),
            )?;
            let routing = route(&unl_probs, bank, settings.ssr.route_threshold);
            ssr_counts = (routing.positive.len(), routing.negative.len());
            let hu = tape.gather_rows(h1, &rows)?;
            l_ssr(&mut tape, hu, &routing, bank, settings.ssr.tau)?
        }
        _ => (tape.scalar(0.0), tape.scalar(0.0)),
    };

    let parts = LossParts {
        l_rep_u: rep_u,
        l_rep_s: rep_s,
        l_cls_u: cls.l_cls_u,
        l_cls_s: cls.l_cls_s,
        h_mean_entropy: cls.h_mean_entropy,
        l_kl,
        l_ssr_pos: pos,
        l_ssr_neg: neg,
    };
    let total = total_loss(&mut tape, &parts, weights)?;
    Ok(StepGraph {
        tape,
        bound,
        parts,
        total,
        pairs,
        ssr_counts,
    })
}

/// `v ← m·v − lr·g`, `θ ← θ + v` for every parameter.
pub fn sgd_update(model: &mut Model, velocity: &mut [Vec<f64>], lr: f64, momentum: f64) {
    for (p, v) in model.params_mut().iter_mut().zip(velocity) {
        let g = p
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; p.len()]);
        for ((vi, gi), th) in v.iter_mut().zip(&g).zip(p.data_mut()) {
            *vi = momentum * *vi - lr * gi;
            *th += *vi;
        }
    }
}

/// Forward, backward and one optimizer update.
pub fn train_step(
    state: &mut RunState,
    batch: &Batch<'_>,
    model: &mut Model,
    bank: Option<&PrototypeBank>,
    settings: &TrainSettings,
    lr: f64,
) -> Result<StepRecord> {
    let weights = settings.weights_at(state.epoch);
    let graph = build_step(model, batch, bank, settings, &weights)?;
    let total = graph.tape.item(graph.total);
    if !total.is_finite() {
        return Err(Error::NonFinite("total"));
    }
    let grads = graph.tape.backward(graph.total)?;
    model.zero_grad();
    model.accumulate_grads(&grads, &graph.bound);
    sgd_update(model, &mut state.velocity, lr, settings.train.momentum);
    let record = StepRecord {
        epoch: state.epoch,
        step: state.step,
        lr,
        beta_eff: weights.beta,
        parts: graph.parts.values(&graph.tape),
        total,
        sva_pairs: graph.pairs.len(),
        ssr_positive: graph.ssr_counts.0,
        ssr_negative: graph.ssr_counts.1,
    };
    state.step += 1;
    Ok(record)
}

/// Cosine decay from `lr` to `lr_min` over `total` steps.
pub fn learning_rate(config: &TrainConfig, step: u64, total: u64) -> f64 {
    if !config.cosine || total == 0 {
        return config.lr;
    }
    let t = step as f64 / total as f64;
    config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + libm::cos(core::f64::consts::PI * t))
}

/// A fixed evaluation subset of the unlabeled data and its
/// background-swapped twin.
#[derive(Debug, Clone)]
pub struct Probe<'a> {
    pub clean: Vec<&'a Tensor>,
    pub swapped: Vec<Tensor>,
    pub truths: Vec<usize>,
    pub known_classes: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub all: f64,
    pub old: f64,
    pub new: f64,
    pub shortcut_gap: f64,
}

impl<'a> Probe<'a> {
    /// `size` samples of `D_u` (all when `size` is 0 or too large), drawn
    /// with `seed`.
    pub fn from_split(
        split: &'a GcdSplit,
        spec: &ShortcutSpec,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = split.unlabeled.len();
        let mut idx: Vec<usize> = (0..n).collect();
        if size > 0 && size < n {
            idx.shuffle(&mut rng::stream(seed, "probe"));
            idx.truncate(size);
            idx.sort_unstable();
        }
        let samples: Vec<_> = idx.iter().map(|&i| split.unlabeled[i].clone()).collect();
        let swapped = swap_backgrounds(spec, &samples, seed)?;
        Ok(Self {
            clean: idx.iter().map(|&i| &split.unlabeled[i].image).collect(),
            swapped: swapped.into_iter().map(|s| s.image).collect(),
            truths: samples.iter().map(|s| s.label).collect(),
            known_classes: split.known_classes.clone(),
            num_classes: split.num_classes,
        })
    }

    pub fn evaluate(&self, model: &Model, tau_s: f64) -> Result<(EvalReport, EvalReport)> {
        let clean = model.probabilities(&self.clean, tau_s)?;
        let swapped: Vec<&Tensor> = self.swapped.iter().collect();
        let swapped = model.probabilities(&swapped, tau_s)?;
        let a = hungarian_accuracy(
            &predict_from_probs(&clean),
            &self.truths,
            &self.known_classes,
            self.num_classes,
        )?;
        let b = hungarian_accuracy(
            &predict_from_probs(&swapped),
            &self.truths,
            &self.known_classes,
            self.num_classes,
        )?;
        Ok((a, b))
    }

    pub fn summary(&self, model: &Model, tau_s: f64) -> Result<ProbeResult> {
        let (a, b) = self.evaluate(model, tau_s)?;
        Ok(ProbeResult {
            all: a.acc_all,
            old: a.acc_old,
            new: a.acc_new,
            shortcut_gap: a.acc_all - b.acc_all,
        })
    }
}

/// Per-epoch means of the step records plus the probe evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based: the record after `epoch` passes.
    pub epoch: usize,
    /// Steps taken so far.
    pub step: u64,
    pub lr: f64,
    pub beta_eff: f64,
    pub parts: LossParts<f64>,
    pub total: f64,
    pub probe: Option<ProbeResult>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub initial_probe: Option<ProbeResult>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

fn mean_record(epoch: usize, steps: &[StepRecord], probe: Option<ProbeResult>) -> EpochRecord {
    let n = steps.len().max(1) as f64;
    let mut parts = LossParts::<f64>::default();
    let mut total = 0.0;
    for s in steps {
        let p = &s.parts;
        parts.l_rep_u += p.l_rep_u / n;
        parts.l_rep_s += p.l_rep_s / n;
        parts.l_cls_u += p.l_cls_u / n;
        parts.l_cls_s += p.l_cls_s / n;
        parts.h_mean_entropy += p.h_mean_entropy / n;
        parts.l_kl += p.l_kl / n;
        parts.l_ssr_pos += p.l_ssr_pos / n;
        parts.l_ssr_neg += p.l_ssr_neg / n;
        total += s.total / n;
    }
    let last = steps.last();
    EpochRecord {
        epoch: epoch + 1,
        step: last.map_or(0, |s| s.step + 1),
        lr: last.map_or(0.0, |s| s.lr),
        beta_eff: last.map_or(0.0, |s| s.beta_eff),
        parts,
        total,
        probe,
    }
}

/// Runs every epoch: refreshes the bank, steps through the batches and
/// hands each epoch's record to `on_epoch` as soon as it is complete.
pub fn train_run(
    settings: &TrainSettings,
    data: &TrainingData<'_>,
    probe: Option<&Probe<'_>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutput> {
    settings.validate()?;
    let mut dims = settings.model;
    dims.num_classes = data.num_classes;
    if let Some((x, _)) = data.labeled.first() {
        dims.input = x.len();
    }
    let seed = settings.train.seed;
    let mut model = Model::init(dims, seed)?;
    let mut state = RunState::new(&model, seed);
    let tau_s = settings.loss.tau_s;
    let initial_probe = probe.map(|p| p.summary(&model, tau_s)).transpose()?;

    let mut bank = if settings.ssr.enabled {
        Some(PrototypeBank::new(
            &data.known_classes,
            dims.feature,
            settings.ssr.ema_momentum,
        )?)
    } else {
        None
    };
    let per_epoch = steps_per_epoch(&settings.train, data.labeled.len(), data.unlabeled.len());
    let total_steps = (per_epoch * settings.train.epochs) as u64;
    let refresh_every = settings.ssr.refresh_every_steps as u64;

    let mut epochs = Vec::with_capacity(settings.train.epochs);
    let mut steps = Vec::with_capacity(total_steps as usize);
    for epoch in 0..settings.train.epochs {
        state.epoch = epoch;
        let mut order = EpochOrder::new(data, &mut state.streams.data);
        let first = steps.len();
        for i in 0..per_epoch {
            if let Some(bank) = bank.as_mut() {
                let due = if refresh_every == 0 {
                    i == 0
                } else {
                    bank.last_refresh_step()
                        .is_none_or(|s| state.step - s >= refresh_every)
                };
                if due {
                    bank.refresh(&model, &data.labeled, state.step)?;
                }
            }
            let batch = compose_batch(data, &settings.train, &mut order, &mut state.streams)?;
            let lr = learning_rate(&settings.train, state.step, total_steps);
            let record = train_step(&mut state, &batch, &mut model, bank.as_ref(), settings, lr)?;
            steps.push(record);
        }
        let probe = probe.map(|p| p.summary(&model, tau_s)).transpose()?;
        let record = mean_record(epoch, &steps[first..], probe);
        on_epoch(&record);
        epochs.push(record);
    }
    Ok(RunOutput {
        model,
        initial_probe,
        epochs,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, make_gcd_split};

    fn tiny_split() -> (ShortcutSpec, GcdSplit) {
        let spec = ShortcutSpec {
            image_size: [8, 8],
            num_known_classes: 2,
            num_novel_classes: 2,
            samples_per_class: 12,
            ..ShortcutSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let split = make_gcd_split(&ds, 0.5, 0.5, spec.seed).unwrap();
        (spec, split)
    }

    fn tiny_settings() -> TrainSettings {
        TrainSettings {
            model: ModelDims {
                hidden: [16, 16],
                feature: 8,
                projection: 4,
                ..ModelDims::default()
            },
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ssr: SsrConfig {
                warmup_epochs: 1,
                ..SsrConfig::default()
            },
            ..TrainSettings::default()
        }
    }

    #[test]
    fn batch_composition() {
        let (_, split) = tiny_split();
        let data = split.training_data();
        let config = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut streams = Streams::new(3);
        let mut order = EpochOrder::new(&data, &mut streams.data);
        let b = compose_batch(&data, &config, &mut order, &mut streams).unwrap();
        assert_eq!(b.num_labeled(), 4);
        assert_eq!(b.len(), 8);
        assert!(b.view_seeds.iter().all(|s| s[0] != s[1]));

        let mut again = Streams::new(3);
        let mut order2 = EpochOrder::new(&data, &mut again.data);
        let b2 = compose_batch(&data, &config, &mut order2, &mut again).unwrap();
        assert_eq!(b.labeled_ids, b2.labeled_ids);
        assert_eq!(b.unlabeled_ids, b2.unlabeled_ids);
    }

    #[test]
    fn short_labeled_pool_is_backfilled() {
        let (_, split) = tiny_split();
        let data = split.training_data();
        let config = TrainConfig {
            batch_size: 32,
            labeled_fraction: 0.5,
            ..TrainConfig::default()
        };
        let mut streams = Streams::new(0);
        let mut order = EpochOrder::new(&data, &mut streams.data);
        let b = compose_batch(&data, &config, &mut order, &mut streams).unwrap();
        assert_eq!(b.num_labeled(), data.labeled.len());
        assert_eq!(b.backfilled, 16 - data.labeled.len());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (_, split) = tiny_split();
        let data = split.training_data();
        let mut settings = tiny_settings();
        settings.model.input = 3 * 64;
        settings.model.num_classes = 4;
        let mut model = Model::init(settings.model, 1).unwrap();
        let before = model.clone();
        let mut state = RunState::new(&model, 1);
        let mut order = EpochOrder::new(&data, &mut state.streams.data);
        let batch = compose_batch(&data, &settings.train, &mut order, &mut state.streams).unwrap();
        let mut bank = PrototypeBank::new(&data.known_classes, 8, None).unwrap();
        bank.refresh(&model, &data.labeled, 0).unwrap();
        state.epoch = 5;
        let rec = train_step(&mut state, &batch, &mut model, Some(&bank), &settings, 0.0).unwrap();
        assert_eq!(before.flat_params(), model.flat_params());
        assert!((rec.parts.total(&settings.weights_at(5)) - rec.total).abs() < 1e-10);
        assert!(rec.sva_pairs == 4 || rec.sva_pairs == 0);
    }

    #[test]
    fn run_is_deterministic_and_accounts() {
        let (spec, split) = tiny_split();
        let data = split.training_data();
        let probe = Probe::from_split(&split, &spec, 16, 2).unwrap();
        let settings = tiny_settings();
        let a = train_run(&settings, &data, Some(&probe), |_| {}).unwrap();
        let b = train_run(&settings, &data, Some(&probe), |_| {}).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.model, b.model);
        assert_eq!(a.epochs.len(), 3);
        for s in &a.steps {
            let w = settings.weights_at(s.epoch);
            assert!((s.parts.total(&w) - s.total).abs() < 1e-10);
        }
        assert_eq!(a.steps[0].beta_eff, 0.0);
        assert_eq!(a.steps.last().unwrap().beta_eff, 0.5);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (_, split) = tiny_split();
        let data = split.training_data();
        let mut settings = tiny_settings();
        settings.train.epochs = 0;
        let out = train_run(&settings, &data, None, |_| {}).unwrap();
        let mut dims = settings.model;
        dims.input = 3 * 64;
        dims.num_classes = 4;
        assert_eq!(out.model, Model::init(dims, settings.train.seed).unwrap());
        assert!(out.steps.is_empty());
    }

    #[test]
    fn disabled_components_log_exact_zeros() {
        let (_, split) = tiny_split();
        let data = split.training_data();
        let mut settings = tiny_settings();
        settings.sva.enabled = false;
        settings.ssr.enabled = false;
        let out = train_run(&settings, &data, None, |_| {}).unwrap();
        for s in &out.steps {
            assert_eq!(s.parts.l_kl, 0.0);
            assert_eq!(s.parts.l_ssr_pos, 0.0);
            assert_eq!(s.parts.l_ssr_neg, 0.0);
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(learning_rate(&c, 0, 100), 0.1);
        assert!((learning_rate(&c, 100, 100) - 1e-4).abs() < 1e-15);
        let flat = TrainConfig { cosine: false, ..c };
        assert_eq!(learning_rate(&flat, 50, 100), 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            batch_size: 6,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert!(TrainConfig {
            batch_size: 7,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            labeled_fraction: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
