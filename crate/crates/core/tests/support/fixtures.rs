//! Small datasets and configurations shared by the test targets.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tsnet_core::data::{build_pairs, synth_dataset, ModalityTransform, PatchPair};
use tsnet_core::layers::{ParamStore, TowerShape};
use tsnet_core::model::{LossMode, ModelKind, ModelSpec};
use tsnet_core::pipeline::Prepared;

pub const TINY_TOWER: TowerShape = TowerShape {
    width_multiplier: 0.1,
    bottleneck_multiplier: 0.25,
};

pub fn tiny(kind: ModelKind, loss_mode: LossMode) -> ModelSpec {
    ModelSpec {
        kind,
        loss_mode,
        tower: TINY_TOWER,
    }
}

/// 20 synthetic 128² scenes: 448 training pairs, 32 test, 16 validation.
pub fn small_data(transform: ModalityTransform, seed: u64) -> Prepared {
    let images = synth_dataset(20, 128, transform, seed).unwrap();
    Prepared::new(build_pairs(&images, seed).unwrap(), true).unwrap()
}

/// `n` training pairs, alternating labels.
pub fn balanced_subset(pairs: &[PatchPair], n: usize) -> Vec<PatchPair> {
    let pos = pairs.iter().filter(|p| p.label == 1);
    let neg = pairs.iter().filter(|p| p.label == 0);
    pos.zip(neg)
        .flat_map(|(a, b)| [a.clone(), b.clone()])
        .take(n)
        .collect()
}

/// Redraws every fully connected weight from `N(0, 2 / fan_in)`.
pub fn he_reinit_fc(store: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        if let [_, fan_in] = *p.value.shape() {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for v in p.value.data_mut() {
                *v = d.sample(&mut rng) as f32;
            }
        }
    }
}
