use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::GroupingTable;
use crate::error::{Error, Result};
use crate::mae::adamw::{AdamWConfig, AdamWState};
use crate::mae::model::{Gradients, LossScope, MaeModel};
use crate::mae::patch::PatchSpec;
use crate::masking::{apply_mask, generate_mask, MaskContext, MaskStrategy};
use crate::rng::{derive, keyed_rng};
use crate::scalar::{pairwise_sum, Scalar};
use crate::volume::{LabelVolume, Mask3D, Mask4D, Volume4D};

const TAG_INIT: u64 = 0x494E_4954;
const TAG_ORDER: u64 = 0x4F52_4452;
const TAG_MASK: u64 = 0x4D41_534B;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub patch: [usize; 4],
    pub hidden: usize,
    pub latent: usize,
    pub loss_scope: LossScope,
    /// Draw a fresh mask for every (epoch, sample); otherwise one per sample.
    pub resample_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 24,
            seed: 0,
            lr: 5e-5,
            weight_decay: 0.01,
            patch: [4, 4, 4, 4],
            hidden: 32,
            latent: 16,
            loss_scope: LossScope::Masked,
            resample_masks: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if self.patch.contains(&0) || self.hidden == 0 || self.latent == 0 {
            return Err(Error::invalid(
                "patch, hidden and latent sizes must be positive",
            ));
        }
        self.adamw().validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive(self.seed, &[TAG_INIT])
    }

    /// Mask seed used for `sample` during `epoch`.
    pub fn mask_seed(&self, strategy: &MaskStrategy, epoch: usize, sample: usize) -> u64 {
        let epoch = if self.resample_masks { epoch as u64 } else { 0 };
        derive(self.seed, &[TAG_MASK, strategy.seed, epoch, sample as u64])
    }
}

/// One preprocessed subject: the volume and its brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub volume: Volume4D<T>,
    pub brain: Mask3D,
}

impl<T: Scalar> Sample<T> {
    pub fn new(volume: Volume4D<T>) -> Self {
        let brain = volume.brain_mask();
        Sample { volume, brain }
    }
}

/// Atlas inputs needed by ROI strategies.
#[derive(Debug, Clone, Copy)]
pub struct AtlasInputs<'a> {
    pub labels: &'a LabelVolume,
    pub grouping: &'a GroupingTable,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: MaeModel<T>,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Mask for `sample` at `epoch`, exactly as drawn during pretraining.
pub fn training_mask<T: Scalar>(
    sample: &Sample<T>,
    index: usize,
    epoch: usize,
    strategy: &MaskStrategy,
    cfg: &TrainConfig,
    atlas: Option<AtlasInputs<'_>>,
) -> Result<Mask4D> {
    let sub = strategy.with_seed(cfg.mask_seed(strategy, epoch, index));
    let ctx = match atlas {
        Some(a) => MaskContext::with_atlas(&sample.brain, a.labels, a.grouping),
        None => MaskContext::new(&sample.brain),
    };
    generate_mask(&sub, sample.volume.dims(), &ctx)
}

/// Masked loss of `model` on `sample` under `mask`, with gradients.
pub fn sample_loss<T: Scalar>(
    model: &MaeModel<T>,
    sample: &Sample<T>,
    mask: &Mask4D,
    spec: &PatchSpec,
    scope: LossScope,
) -> Result<(f64, Gradients)> {
    let input = apply_mask(&sample.volume, mask, T::zero())?;
    model.loss_and_gradients(&input, &sample.volume, mask, spec, scope)
}

/// Masked-reconstruction pretraining with AdamW.
pub fn pretrain<T: Scalar>(
    samples: &[&Sample<T>],
    strategy: &MaskStrategy,
    cfg: &TrainConfig,
    atlas: Option<AtlasInputs<'_>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    let dims = first.volume.dims();
    if let Some(s) = samples.iter().find(|s| s.volume.dims() != dims) {
        return Err(Error::dims(dims, s.volume.dims()));
    }
    let spec = PatchSpec::new(dims, cfg.patch)?;
    let mut model = MaeModel::<T>::new(cfg.patch, cfg.hidden, cfg.latent, cfg.init_seed())?;
    let mut opt = AdamWState::new(&model, cfg.adamw())?;
    info!(
        "pretraining {} params on {} samples, strategy {}",
        model.param_count(),
        samples.len(),
        strategy.kind
    );

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut keyed_rng(cfg.seed, &[TAG_ORDER, epoch as u64], 0));
        let mut losses = vec![0.0f64; samples.len()];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let mask = training_mask(samples[i], i, epoch, strategy, cfg, atlas)?;
                    sample_loss(&model, samples[i], &mask, &spec, cfg.loss_scope)
                })
                .collect();
            let mut grads = Vec::with_capacity(batch.len());
            for (&i, r) in batch.iter().zip(results) {
                let (loss, g) = r?;
                losses[i] = loss;
                grads.push(g);
            }
            let mean = Gradients::mean(grads).expect("batch is nonempty");
            opt.step(&mut model, &mean)?;
        }
        let loss = pairwise_sum(losses.len(), |i| losses[i]) / losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at epoch {}",
                epoch + 1
            )));
        }
        debug!("epoch {}: loss {loss:.6}", epoch + 1);
        epoch_losses.push(loss);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        steps: opt.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskKind;
    use crate::volume::GridDims;
    use rand::Rng;

    fn dataset(n: usize, seed: u64) -> Vec<Sample<f32>> {
        let d = GridDims::new(4, 4, 4, 4).unwrap();
        (0..n)
            .map(|s| {
                let mut rng = keyed_rng(seed, &[s as u64], 0);
                let data = (0..d.len())
                    .map(|_| rng.random::<f32>() * 2.0 - 1.0)
                    .collect();
                Sample::new(Volume4D::new(d, data).unwrap())
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 5,
            patch: [2, 2, 2, 2],
            hidden: 6,
            latent: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_gives_flat_curve_with_fixed_masks() {
        let data = dataset(4, 1);
        let refs: Vec<_> = data.iter().collect();
        let strategy = MaskStrategy::new(MaskKind::RandomTube { ratio: 0.25 }, 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            resample_masks: false,
            ..small_cfg()
        };
        let out = pretrain(&refs, &strategy, &cfg, None).unwrap();
        assert!(out.epoch_losses.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(
            out.model,
            MaeModel::new([2, 2, 2, 2], 6, 3, cfg.init_seed()).unwrap()
        );
    }

    #[test]
    fn repeat_runs_are_bit_identical() {
        let data = dataset(5, 2);
        let refs: Vec<_> = data.iter().collect();
        let strategy = MaskStrategy::new(MaskKind::RandomRandom { ratio: 0.3 }, 9).unwrap();
        let a = pretrain(&refs, &strategy, &small_cfg(), None).unwrap();
        let b = pretrain(&refs, &strategy, &small_cfg(), None).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.epoch_losses), bits(&b.epoch_losses));
        assert_eq!(a.model, b.model);
        assert_eq!(a.steps, 9);
    }

    #[test]
    fn loss_falls_at_high_lr() {
        let data = dataset(4, 3);
        let refs: Vec<_> = data.iter().collect();
        let strategy = MaskStrategy::new(MaskKind::RandomRandom { ratio: 0.5 }, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            lr: 1e-2,
            ..small_cfg()
        };
        let out = pretrain(&refs, &strategy, &cfg, None).unwrap();
        assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let strategy = MaskStrategy::new(MaskKind::RandomTube { ratio: 0.1 }, 0).unwrap();
        assert!(pretrain::<f32>(&[], &strategy, &small_cfg(), None).is_err());
        let data = dataset(2, 0);
        let refs: Vec<_> = data.iter().collect();
        let bad = TrainConfig {
            patch: [3, 2, 2, 2],
            ..small_cfg()
        };
        assert!(pretrain(&refs, &strategy, &bad, None).is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        assert!(pretrain(&refs, &strategy, &bad, None).is_err());
    }
}
