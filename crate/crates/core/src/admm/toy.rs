//! Seeded synthetic two-class image task: one Gaussian blob per image whose
//! center depends on the class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::net::{Dataset, Loss, Sample, TinyNet};
use super::{train, PruneConfig};
use crate::error::Result;
use crate::tensor::LayerShape;

pub const TOY_SIZE: usize = 8;

/// Blob centers per class, in pixel coordinates.
const CENTERS: [(f64, f64); 2] = [(2.5, 2.5), (4.5, 4.5)];

/// Renders `n` images of size 8x8 with labels alternating 0, 1, 0, ...
pub fn blob_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 1.0).expect("valid sigma");
    let noise = Normal::new(0.0, 0.35).expect("valid sigma");
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let (cy, cx) = CENTERS[label];
            let cy = cy + jitter.sample(&mut rng);
            let cx = cx + jitter.sample(&mut rng);
            let amp = rng.random_range(0.6..1.4);
            let width = rng.random_range(1.0..2.0f64);
            let mut input = Vec::with_capacity(TOY_SIZE * TOY_SIZE);
            for y in 0..TOY_SIZE {
                for x in 0..TOY_SIZE {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    input.push(amp * (-d2 / (2.0 * width * width)).exp() + noise.sample(&mut rng));
                }
            }
            Sample { input, label }
        })
        .collect();
    Dataset {
        channels: 1,
        height: TOY_SIZE,
        width: TOY_SIZE,
        classes: 2,
        samples,
    }
}

/// Conv shapes of the toy network: 1->4 (8x8 -> 6x6), 4->8 (6x6 -> 4x4).
pub fn toy_shapes() -> Vec<LayerShape> {
    vec![
        LayerShape::conv3x3(1, 4, TOY_SIZE, TOY_SIZE).expect("static shape"),
        LayerShape::conv3x3(4, 8, TOY_SIZE - 2, TOY_SIZE - 2).expect("static shape"),
    ]
}

/// Two 3x3 CONV+ReLU layers and a dense 2-way softmax head.
pub fn toy_net(seed: u64) -> Result<TinyNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TinyNet::init(&toy_shapes(), Some(2), Loss::SoftmaxCrossEntropy, &mut rng)
}

pub const TRAIN_SAMPLES: usize = 256;
pub const TEST_SAMPLES: usize = 512;
pub const PRETRAIN_EPOCHS: usize = 20;
pub const PRETRAIN_LR: f64 = 1e-3;
pub const PRETRAIN_BATCH: usize = 16;

/// A dense toy network pretrained on its own seeded train split.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub net: TinyNet,
    pub train: Dataset,
    pub test: Dataset,
}

impl ToyTask {
    pub fn pretrained(seed: u64) -> Result<Self> {
        let train_set = blob_dataset(TRAIN_SAMPLES, 100 + seed);
        let test = blob_dataset(TEST_SAMPLES, 200 + seed);
        let mut net = toy_net(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train(
            &mut net,
            &train_set,
            PRETRAIN_EPOCHS,
            PRETRAIN_LR,
            PRETRAIN_BATCH,
            &mut rng,
        )?;
        Ok(Self {
            net,
            train: train_set,
            test,
        })
    }

    /// Continues dense training for the same number of epochs a pruning run
    /// with `cfg` spends (ADMM plus fine-tuning), with the same optimizer settings.
    pub fn dense_baseline(&self, cfg: &PruneConfig) -> Result<TinyNet> {
        let mut net = self.net.clone();
        let epochs = cfg.admm_iterations * cfg.epochs_per_iteration + cfg.finetune_epochs;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        train(
            &mut net,
            &self.train,
            epochs,
            cfg.learning_rate,
            cfg.batch_size,
            &mut rng,
        )?;
        Ok(net)
    }
}
