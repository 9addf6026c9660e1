//! Shared fixtures for the criterion benchmarks.

use fedsoda_core::config::{DataConfig, ExperimentConfig};
use fedsoda_core::data::ClientDatasetSpec;
use fedsoda_core::fedcore::Method;

/// Small three-client configuration for end-to-end round benchmarks.
pub fn bench_config(method: Method, rounds: u32) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(method);
    cfg.rounds = rounds;
    cfg.local_epochs = 1;
    cfg.num_clients = 3;
    cfg.data = DataConfig::Custom(
        (0..3)
            .map(|i| ClientDatasetSpec {
                client_id: i,
                n_samples: 6,
                image_h: 16,
                image_w: 16,
                blob_radius: (2.0, 5.0),
                blobs_per_image: (1, 2),
                fg_intensity: 0.75,
                bg_intensity: 0.25,
                noise_std: 0.08,
                seed: i as u64,
            })
            .collect(),
    );
    cfg
}
