#![allow(dead_code)]

use geoadapt::net::{CoreConfig, HeadConfig, ModelConfig, ParamStore, Role};
use geoadapt::synthgeo::{make_domain_pair, DomainShiftSpec, PairSpec, SceneSpec};
use geoadapt::tensorstore::DomainData;
use geoadapt::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        core: CoreConfig {
            depth: 1,
            heads: 2,
            embed_dim: 16,
            mlp_ratio: 2,
            core_channels: 3,
            patch_size: 8,
        },
        head: HeadConfig {
            upsampler_blocks: 3,
            bn_momentum: 0.1,
        },
        ..Default::default()
    }
}

pub fn scene(size: (usize, usize), classes: usize, channels: usize, seed: u64) -> SceneSpec {
    SceneSpec {
        height: size.0,
        width: size.1,
        class_count: classes,
        seed,
        region_scale: 12,
        channel_count: channels,
    }
}

/// 32x32, three classes, three bands, mild shift.
pub fn tiny_pair(budget: usize) -> (DomainData, DomainData) {
    make_domain_pair(&PairSpec {
        source: scene((32, 32), 3, 3, 1),
        target: scene((32, 32), 3, 3, 2),
        shift: DomainShiftSpec::uniform(3, 1.2, 0.05, 0.02),
        images_per_domain: 3,
        budget_per_class: budget,
        source_noise: 0.02,
    })
    .unwrap()
}

/// Adds seeded Gaussian noise to every trainable tensor so that no gradient
/// is zero by construction (zero-initialized biases, identity norms).
pub fn jitter<T: Scalar>(store: &mut ParamStore<T>, sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    for (_, p) in store.iter_mut() {
        if p.role == Role::Trainable {
            for v in p.value.data.iter_mut() {
                *v = *v + T::from_f64(n.sample(&mut rng)).unwrap();
            }
        }
    }
}
