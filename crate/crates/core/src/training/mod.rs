//! Training orchestrators: standard step-decay training, the ablation
//! regimes, and cyclic alternation between mined sub-categories and the full
//! dataset with per-phase learning-rate ramps and validation-driven
//! checkpoint carrying.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::imaging::{mosaic, CfaPattern, Patch};
use crate::mining::{Dihedral, PatchRef};
use crate::model::{
    adam_step, forward, loss_and_gradients, pack_bayer, AdamState, Checkpoint, CheckpointMeta,
    Gradients, ModelParams, ModelSpec, Tensor,
};
use crate::selection::CategoryBank;
use crate::util::{derive_seed, rng_from_seed, SeededRng};

pub const GENERAL_DATASET: &str = "general";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    pub base_lr: f64,
    /// Standard regime only: halve the learning rate every this many steps.
    pub halve_every: usize,
    pub total_iters: usize,
    /// Steps per epoch; 0 derives one pass over the non-overlapping train
    /// patch capacity.
    pub iters_per_epoch: usize,
    /// Cap on validation patches per dataset during training (0 = all).
    pub val_patch_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            crop: 64,
            seed: 0,
            base_lr: 5e-4,
            halve_every: 100_000,
            total_iters: 2000,
            iters_per_epoch: 0,
            val_patch_cap: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig("base_lr must be > 0".into()));
        }
        if self.crop < 8 || self.crop % 2 != 0 {
            return Err(Error::InvalidConfig("crop must be even and >= 8".into()));
        }
        if self.halve_every == 0 {
            return Err(Error::InvalidConfig("halve_every must be positive".into()));
        }
        Ok(())
    }

    fn resolved_iters_per_epoch(&self, corpus: &Corpus) -> usize {
        if self.iters_per_epoch > 0 {
            return self.iters_per_epoch;
        }
        let capacity: usize = corpus
            .train_ids()
            .iter()
            .filter_map(|&id| corpus.get(id).ok())
            .map(|i| (i.image.height() / self.crop) * (i.image.width() / self.crop))
            .sum();
        (capacity.div_ceil(self.batch)).max(1)
    }
}

/// Per-phase learning-rate ramp, rising geometrically from `lr_min` to
/// `lr_max` over `ramp_steps` optimizer steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrRamp {
    pub lr_min: f64,
    pub lr_max: f64,
    pub ramp_steps: usize,
}

impl Default for LrRamp {
    fn default() -> Self {
        Self { lr_min: 1e-5, lr_max: 5e-4, ramp_steps: 200 }
    }
}

impl LrRamp {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::InvalidConfig("ramp requires 0 < lr_min <= lr_max".into()));
        }
        Ok(())
    }
}

/// Geometric interpolation; constant at `lr_max` after `ramp_steps`.
pub fn lr_ramp_value(ramp: &LrRamp, step: usize) -> f64 {
    if ramp.ramp_steps == 0 {
        return ramp.lr_max;
    }
    let t = step.min(ramp.ramp_steps) as f64 / ramp.ramp_steps as f64;
    ramp.lr_min * (ramp.lr_max / ramp.lr_min).powf(t)
}

/// Step decay used by the standard regime.
pub fn step_decay_lr(base_lr: f64, halve_every: usize, step: usize) -> f64 {
    base_lr * 0.5f64.powi((step / halve_every) as i32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CyclePlan {
    pub epochs_per_phase: usize,
    pub n_cycles: usize,
}

impl Default for CyclePlan {
    fn default() -> Self {
        Self { epochs_per_phase: 4, n_cycles: 0 }
    }
}

impl CyclePlan {
    /// Zero cycles means the default of two passes over the bank.
    pub fn resolved_cycles(&self, bank_len: usize) -> usize {
        if self.n_cycles > 0 {
            self.n_cycles
        } else {
            2 * bank_len.max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    Standard,
    MinedOnly,
    UniformMix,
    CyclicNoGeneral,
    CyclicFull,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 5] = [
        RegimeKind::Standard,
        RegimeKind::MinedOnly,
        RegimeKind::UniformMix,
        RegimeKind::CyclicNoGeneral,
        RegimeKind::CyclicFull,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RegimeKind::Standard => "standard",
            RegimeKind::MinedOnly => "mined-only",
            RegimeKind::UniformMix => "uniform-mix",
            RegimeKind::CyclicNoGeneral => "cyclic-no-general",
            RegimeKind::CyclicFull => "cyclic-full",
        }
    }
}

/// Options that refine the cyclic protocol; defaults match the main method.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CyclicOptions {
    /// Whether the general validation loss participates in the phase-winner
    /// mean with weight 1.
    pub include_general_in_selection: bool,
    /// Whether optimizer moments restart at each phase boundary.
    pub reset_adam_per_phase: bool,
}

impl Default for CyclicOptions {
    fn default() -> Self {
        Self { include_general_in_selection: true, reset_adam_per_phase: true }
    }
}

/// One validation record: per-epoch losses over every tracked dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub phase_idx: usize,
    pub phase_dataset: String,
    pub epoch_in_phase: usize,
    pub steps_done: usize,
    pub lr_first: f64,
    pub lr_last: f64,
    pub val_losses: BTreeMap<String, f64>,
    pub mean_val: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase_idx: usize,
    pub dataset: String,
    pub winner_epoch: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: String,
    pub rows: Vec<EpochRow>,
    pub phases: Vec<PhaseLog>,
    pub total_steps: usize,
    pub best_phase_idx: usize,
    pub best_epoch: usize,
}

impl TrainReport {
    /// Flat CSV: epoch, phase, dataset, loss, lr, selected-flag.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase_idx,phase_dataset,epoch,dataset,loss,lr,selected\n");
        for row in &self.rows {
            for (dataset, loss) in &row.val_losses {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    row.phase_idx,
                    row.phase_dataset,
                    row.epoch_in_phase,
                    dataset,
                    loss,
                    row.lr_last,
                    if row.selected { 1 } else { 0 }
                ));
            }
        }
        out
    }
}

/// Training output: the selected checkpoint, the last-step checkpoint, and
/// the full report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub report: TrainReport,
}

// ---- shared loop primitives ----

/// Mean per-element L1 over a ref list, using unclamped model output. The
/// normalization keeps curves comparable across datasets of different size.
pub fn validate_mean_l1(
    params: &ModelParams,
    spec: &ModelSpec,
    corpus: &Corpus,
    refs: &[PatchRef],
    pattern: CfaPattern,
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidConfig("validation ref list is empty".into()));
    }
    let mut total = 0.0;
    for r in refs {
        let gt = r.resolve(corpus)?;
        let packed = pack_bayer(&mosaic(&gt, pattern)?);
        let pred = forward(params, spec, &packed)?;
        let n = pred.data().len() as f64;
        let l1: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum();
        total += l1 / n;
    }
    Ok(total / refs.len() as f64)
}

pub(crate) struct Sample {
    pub packed: Tensor,
    pub gt: Patch,
}

fn sample_from_gt(gt: Patch, rng: &mut SeededRng, pattern: CfaPattern) -> Result<Sample> {
    let elem = Dihedral::sample(rng);
    let gt = elem.apply(&gt)?;
    let packed = pack_bayer(&mosaic(&gt, pattern)?);
    Ok(Sample { packed, gt })
}

/// Random augmented crop from the train split.
fn sample_general(
    corpus: &Corpus,
    crop: usize,
    rng: &mut SeededRng,
    pattern: CfaPattern,
) -> Result<Sample> {
    let ids = corpus.train_ids();
    if ids.is_empty() {
        return Err(Error::InvalidConfig("corpus train split is empty".into()));
    }
    let id = ids[rng.gen_range(0..ids.len())];
    let img = &corpus.get(id)?.image;
    if img.height() < crop || img.width() < crop {
        return Err(Error::Mining(format!("image {id} smaller than crop {crop}")));
    }
    let y = rng.gen_range(0..=img.height() - crop);
    let x = rng.gen_range(0..=img.width() - crop);
    sample_from_gt(img.crop(y, x, crop, crop)?, rng, pattern)
}

/// Uniformly drawn mined patch, augmented.
fn sample_from_refs(
    corpus: &Corpus,
    refs: &[PatchRef],
    rng: &mut SeededRng,
    pattern: CfaPattern,
) -> Result<Sample> {
    if refs.is_empty() {
        return Err(Error::InvalidConfig("ref pool is empty".into()));
    }
    let r = refs[rng.gen_range(0..refs.len())];
    sample_from_gt(r.resolve(corpus)?, rng, pattern)
}

/// Where a mixed-regime sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    General,
    Bank,
}

/// The uniform-mixture coin: each training example is equally likely to come
/// from the general dataset or from the mined pool.
pub fn sample_source(rng: &mut SeededRng) -> SampleSource {
    if rng.gen_bool(0.5) {
        SampleSource::Bank
    } else {
        SampleSource::General
    }
}

/// Dataset a phase or regime draws batches from.
enum Pool<'a> {
    General,
    Refs(&'a [PatchRef]),
    Mixed(&'a [PatchRef]),
}

fn draw_batch(
    pool: &Pool<'_>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
    pattern: CfaPattern,
) -> Result<Vec<Sample>> {
    let mut batch = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let s = match pool {
            Pool::General => sample_general(corpus, cfg.crop, rng, pattern)?,
            Pool::Refs(refs) => sample_from_refs(corpus, refs, rng, pattern)?,
            Pool::Mixed(refs) => match sample_source(rng) {
                SampleSource::General => sample_general(corpus, cfg.crop, rng, pattern)?,
                SampleSource::Bank => sample_from_refs(corpus, refs, rng, pattern)?,
            },
        };
        batch.push(s);
    }
    Ok(batch)
}

/// One optimizer step on a batch: gradients are averaged in batch order.
fn train_step(
    params: &ModelParams,
    spec: &ModelSpec,
    adam: &AdamState,
    batch: &[Sample],
    lr: f64,
) -> Result<(ModelParams, AdamState, f64)> {
    let mut acc: Option<Gradients> = None;
    let mut loss_sum = 0.0;
    for s in batch {
        let (loss, grads) = loss_and_gradients(params, spec, &s.packed, &s.gt)?;
        loss_sum += loss;
        acc = Some(match acc {
            None => grads,
            Some(mut a) => {
                for (t, g) in a.tensors_mut().iter_mut().zip(grads.tensors()) {
                    for (v, w) in t.data_mut().iter_mut().zip(g.data()) {
                        *v += *w;
                    }
                }
                a
            }
        });
    }
    let mut grads = acc.ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
    let inv = 1.0 / batch.len() as f64;
    for t in grads.tensors_mut() {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
    let (params, adam) = adam_step(params, &grads, adam, lr)?;
    Ok((params, adam, loss_sum * inv))
}

/// Named validation sets tracked during a run.
struct ValSets {
    names: Vec<String>,
    refs: Vec<Vec<PatchRef>>,
}

impl ValSets {
    fn general_only(general: &[PatchRef]) -> Self {
        Self { names: vec![GENERAL_DATASET.to_string()], refs: vec![general.to_vec()] }
    }

    fn with_bank(general: &[PatchRef], bank: &CategoryBank) -> Self {
        let mut names = Vec::new();
        let mut refs = Vec::new();
        for entry in &bank.entries {
            names.push(entry.name.clone());
            refs.push(entry.val_refs.clone());
        }
        names.push(GENERAL_DATASET.to_string());
        refs.push(general.to_vec());
        Self { names, refs }
    }

    fn measure(
        &self,
        params: &ModelParams,
        spec: &ModelSpec,
        corpus: &Corpus,
        pattern: CfaPattern,
    ) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (name, refs) in self.names.iter().zip(&self.refs) {
            out.insert(name.clone(), validate_mean_l1(params, spec, corpus, refs, pattern)?);
        }
        Ok(out)
    }
}

fn cap_refs(refs: &[PatchRef], cap: usize, seed: u64) -> Vec<PatchRef> {
    if cap == 0 || refs.len() <= cap {
        return refs.to_vec();
    }
    use rand::seq::SliceRandom;
    let mut rng = rng_from_seed(derive_seed(seed, "val-cap"));
    let mut v = refs.to_vec();
    v.shuffle(&mut rng);
    v.truncate(cap);
    v.sort_unstable();
    v
}

fn mean_of(map: &BTreeMap<String, f64>, include_general: bool) -> f64 {
    let vals: Vec<f64> = map
        .iter()
        .filter(|(k, _)| include_general || k.as_str() != GENERAL_DATASET)
        .map(|(_, v)| *v)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Picks the epoch with the lowest unweighted mean validation loss; earlier
/// epochs win ties.
pub fn select_phase_checkpoint<'a>(
    epoch_checkpoints: &'a [Checkpoint],
    validation_table: &[BTreeMap<String, f64>],
) -> Result<(usize, &'a Checkpoint)> {
    if epoch_checkpoints.is_empty() || epoch_checkpoints.len() != validation_table.len() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint/validation table mismatch: {} vs {}",
            epoch_checkpoints.len(),
            validation_table.len()
        )));
    }
    let n_sets = validation_table[0].len();
    if n_sets == 0 || validation_table.iter().any(|m| m.len() != n_sets) {
        return Err(Error::InvalidConfig("incomplete validation table".into()));
    }
    let mut best = 0usize;
    let mut best_mean = f64::INFINITY;
    for (i, row) in validation_table.iter().enumerate() {
        let mean = row.values().sum::<f64>() / n_sets as f64;
        if mean < best_mean {
            best_mean = mean;
            best = i;
        }
    }
    Ok((best, &epoch_checkpoints[best]))
}

// ---- standard + flat regimes ----

/// Standard training: seeded random crops, step-decay LR, per-epoch
/// validation on the general split. Returns best-validation and final
/// checkpoints.
pub fn train_standard(corpus: &Corpus, spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    spec.validate()?;
    let mut ckpt = Checkpoint::fresh(*spec);
    ckpt.meta = CheckpointMeta { epoch: 0, phase: RegimeKind::Standard.label().to_string(), seed: cfg.seed };
    run_flat_loop(RegimeKind::Standard, corpus, None, spec, cfg, ckpt)
}

/// Dispatch over the five training regimes.
#[allow(clippy::too_many_arguments)]
pub fn train_regime(
    kind: RegimeKind,
    corpus: &Corpus,
    bank: Option<&CategoryBank>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    ramp: &LrRamp,
    plan: &CyclePlan,
    options: &CyclicOptions,
    start_from: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    match kind {
        RegimeKind::Standard | RegimeKind::MinedOnly | RegimeKind::UniformMix => {
            spec.validate()?;
            let ckpt = match start_from {
                Some(base) => {
                    // Continuation starts with fresh optimizer moments.
                    let mut c = base.clone();
                    c.adam = AdamState::new(spec);
                    c
                }
                None => Checkpoint::fresh(*spec),
            };
            run_flat_loop(kind, corpus, bank, spec, cfg, ckpt)
        }
        RegimeKind::CyclicNoGeneral | RegimeKind::CyclicFull => {
            let bank = bank.ok_or_else(|| {
                Error::InvalidConfig(format!("{} requires a category bank", kind.label()))
            })?;
            cyclic_train_impl(
                kind,
                corpus,
                bank,
                spec,
                cfg,
                ramp,
                plan,
                options,
                start_from,
            )
        }
    }
}

fn run_flat_loop(
    kind: RegimeKind,
    corpus: &Corpus,
    bank: Option<&CategoryBank>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    ckpt0: Checkpoint,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pattern = CfaPattern::default();
    let bank_union: Vec<PatchRef> = bank.map(|b| b.union_train_refs()).unwrap_or_default();
    let pool = match kind {
        RegimeKind::Standard => Pool::General,
        RegimeKind::MinedOnly => Pool::Refs(&bank_union),
        RegimeKind::UniformMix => Pool::Mixed(&bank_union),
        _ => return Err(Error::InvalidConfig("flat loop only".into())),
    };
    if !matches!(kind, RegimeKind::Standard) && bank_union.is_empty() {
        return Err(Error::InvalidConfig(format!("{} requires a non-empty bank", kind.label())));
    }
    if corpus.train_ids().is_empty() {
        return Err(Error::InvalidConfig("corpus train split is empty".into()));
    }

    let general_val = cap_refs(
        &crate::mining::extract_val_patch_grid(
            corpus,
            &crate::mining::MiningConfig { crop: cfg.crop, stride: cfg.crop, seed: cfg.seed, ..Default::default() },
        )?,
        cfg.val_patch_cap,
        cfg.seed,
    );
    let val_sets = ValSets::general_only(&general_val);
    let mut ckpt = ckpt0;
    let mut report = TrainReport { regime: kind.label().to_string(), ..Default::default() };
    if cfg.total_iters == 0 {
        return Ok(TrainOutcome { best: ckpt.clone(), last: ckpt, report });
    }
    let iters_per_epoch = cfg.resolved_iters_per_epoch(corpus);
    let epochs = cfg.total_iters.div_ceil(iters_per_epoch);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &format!("{}/epoch{epoch}", kind.label())));
        let lr_first = step_decay_lr(cfg.base_lr, cfg.halve_every, step);
        let mut lr_last = lr_first;
        let steps_this_epoch = iters_per_epoch.min(cfg.total_iters - step);
        for _ in 0..steps_this_epoch {
            let lr = step_decay_lr(cfg.base_lr, cfg.halve_every, step);
            lr_last = lr;
            let batch = draw_batch(&pool, corpus, cfg, &mut rng, pattern)?;
            let (p, a, _loss) = train_step(&ckpt.params, spec, &ckpt.adam, &batch, lr)?;
            ckpt.params = p;
            ckpt.adam = a;
            step += 1;
        }
        let val = val_sets.measure(&ckpt.params, spec, corpus, pattern)?;
        let mean_val = mean_of(&val, true);
        ckpt.meta.epoch = epoch;
        let is_best = best.as_ref().map_or(true, |(b, _)| mean_val < *b);
        if is_best {
            best = Some((mean_val, ckpt.clone()));
            report.best_epoch = epoch;
        }
        report.rows.push(EpochRow {
            phase_idx: 0,
            phase_dataset: kind.label().to_string(),
            epoch_in_phase: epoch,
            steps_done: step,
            lr_first,
            lr_last,
            val_losses: val,
            mean_val,
            selected: is_best,
        });
        if step >= cfg.total_iters {
            break;
        }
    }
    let best_epoch = report.best_epoch;
    for row in &mut report.rows {
        row.selected = row.epoch_in_phase == best_epoch;
    }
    report.total_steps = step;
    report.phases.push(PhaseLog {
        phase_idx: 0,
        dataset: kind.label().to_string(),
        winner_epoch: best_epoch,
        steps: step,
    });
    Ok(TrainOutcome { best: best.expect("ran").1, last: ckpt, report })
}

// ---- cyclic protocol ----

/// Cyclic training: alternate phases over bank entries (round-robin) and the
/// general dataset, restart the LR ramp and optimizer moments each phase, and
/// carry forward the epoch checkpoint with the lowest mean validation loss.
pub fn cyclic_train(
    corpus: &Corpus,
    bank: &CategoryBank,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    ramp: &LrRamp,
    plan: &CyclePlan,
    options: &CyclicOptions,
    start_from: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cyclic_train_impl(
        RegimeKind::CyclicFull,
        corpus,
        bank,
        spec,
        cfg,
        ramp,
        plan,
        options,
        start_from,
    )
}

#[allow(clippy::too_many_arguments)]
fn cyclic_train_impl(
    kind: RegimeKind,
    corpus: &Corpus,
    bank: &CategoryBank,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    ramp: &LrRamp,
    plan: &CyclePlan,
    options: &CyclicOptions,
    start_from: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ramp.validate()?;
    spec.validate()?;
    if bank.entries.is_empty() {
        return Err(Error::InvalidConfig(
            "cyclic training needs a non-empty category bank; use the standard regime instead"
                .into(),
        ));
    }
    if plan.epochs_per_phase < 1 {
        return Err(Error::InvalidConfig("epochs_per_phase must be >= 1".into()));
    }
    let pattern = CfaPattern::default();
    let include_general_phases = matches!(kind, RegimeKind::CyclicFull);

    let general_val = cap_refs(
        &crate::mining::extract_val_patch_grid(
            corpus,
            &crate::mining::MiningConfig { crop: cfg.crop, stride: cfg.crop, seed: cfg.seed, ..Default::default() },
        )?,
        cfg.val_patch_cap,
        cfg.seed,
    );
    let val_sets = ValSets::with_bank(&general_val, bank);

    // Phase sequence: bank entry, then (optionally) the general dataset.
    let n_cycles = plan.resolved_cycles(bank.entries.len());
    let mut phase_datasets: Vec<Option<usize>> = Vec::new();
    for c in 0..n_cycles {
        phase_datasets.push(Some(c % bank.entries.len()));
        if include_general_phases {
            phase_datasets.push(None);
        }
    }

    let mut ckpt = match start_from {
        Some(base) => base.clone(),
        None => Checkpoint::fresh(*spec),
    };
    ckpt.meta.seed = cfg.seed;
    let iters_per_epoch = cfg.resolved_iters_per_epoch(corpus);
    let mut report = TrainReport { regime: kind.label().to_string(), ..Default::default() };
    let mut overall_best: Option<(f64, usize, usize, Checkpoint)> = None;
    let mut total_steps = 0usize;

    for (phase_idx, entry_idx) in phase_datasets.iter().enumerate() {
        let dataset_name = match entry_idx {
            Some(i) => bank.entries[*i].name.clone(),
            None => GENERAL_DATASET.to_string(),
        };
        if options.reset_adam_per_phase {
            ckpt.adam = AdamState::new(spec);
        }
        let mut epoch_ckpts: Vec<Checkpoint> = Vec::with_capacity(plan.epochs_per_phase);
        let mut epoch_vals: Vec<BTreeMap<String, f64>> = Vec::with_capacity(plan.epochs_per_phase);
        let mut phase_step = 0usize;
        for epoch in 0..plan.epochs_per_phase {
            let mut rng = rng_from_seed(derive_seed(
                cfg.seed,
                &format!("{}/phase{phase_idx}/epoch{epoch}", kind.label()),
            ));
            let lr_first = lr_ramp_value(ramp, phase_step);
            let mut lr_last = lr_first;
            for _ in 0..iters_per_epoch {
                let lr = lr_ramp_value(ramp, phase_step);
                lr_last = lr;
                let entry_refs: &[PatchRef] = match entry_idx {
                    Some(i) => &bank.entries[*i].train_refs,
                    None => &[],
                };
                let pool = match entry_idx {
                    Some(_) => Pool::Refs(entry_refs),
                    None => Pool::General,
                };
                let batch = draw_batch(&pool, corpus, cfg, &mut rng, pattern)?;
                let (p, a, _loss) = train_step(&ckpt.params, spec, &ckpt.adam, &batch, lr)?;
                ckpt.params = p;
                ckpt.adam = a;
                phase_step += 1;
                total_steps += 1;
            }
            let val = val_sets.measure(&ckpt.params, spec, corpus, pattern)?;
            let mean_val = mean_of(&val, options.include_general_in_selection);
            ckpt.meta = CheckpointMeta { epoch, phase: dataset_name.clone(), seed: cfg.seed };
            epoch_ckpts.push(ckpt.clone());
            report.rows.push(EpochRow {
                phase_idx,
                phase_dataset: dataset_name.clone(),
                epoch_in_phase: epoch,
                steps_done: total_steps,
                lr_first,
                lr_last,
                val_losses: val.clone(),
                mean_val,
                selected: false,
            });
            epoch_vals.push(val);
        }

        // Phase winner: lowest mean over the tracked validation sets.
        let means: Vec<f64> = report.rows[report.rows.len() - plan.epochs_per_phase..]
            .iter()
            .map(|r| r.mean_val)
            .collect();
        let mut winner = 0usize;
        for (i, m) in means.iter().enumerate() {
            if *m < means[winner] {
                winner = i;
            }
        }
        let row_base = report.rows.len() - plan.epochs_per_phase;
        report.rows[row_base + winner].selected = true;
        report.phases.push(PhaseLog {
            phase_idx,
            dataset: dataset_name.clone(),
            winner_epoch: winner,
            steps: phase_step,
        });
        ckpt = epoch_ckpts[winner].clone();
        let winner_mean = means[winner];
        let better = overall_best.as_ref().map_or(true, |(b, _, _, _)| winner_mean < *b);
        if better {
            overall_best = Some((winner_mean, phase_idx, winner, epoch_ckpts[winner].clone()));
        }
    }

    let (_, best_phase, best_epoch, best_ckpt) = overall_best.expect("at least one phase");
    report.total_steps = total_steps;
    report.best_phase_idx = best_phase;
    report.best_epoch = best_epoch;
    Ok(TrainOutcome { best: best_ckpt, last: ckpt, report })
}
