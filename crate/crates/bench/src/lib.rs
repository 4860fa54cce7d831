//! Fixtures shared by the criterion benchmarks.

use unlearn_core::d2d::{ChainMode, D2DConfig};
use unlearn_core::dare::DareParams;
use unlearn_core::deltagrad::DeltaGradConfig;
use unlearn_core::mechanism::Method;
use unlearn_core::sisa::SisaConfig;
use unlearn_core::{gaussian_blobs, BlobSpec, DatasetTable, LossSpec, TrainConfig};

/// The default blob fixture: two classes, separation 2.
pub fn fixture(n: usize, p: usize, seed: u64) -> DatasetTable {
    gaussian_blobs(&BlobSpec::new(n, p, 2.0, seed)).expect("valid blob spec")
}

/// One configuration per mechanism, sized so a retrain takes milliseconds.
pub fn methods() -> Vec<Method> {
    let spec = LossSpec::logistic(0.01);
    let train = TrainConfig::full_batch(100, 1.0);
    vec![
        Method::Naive { spec, train },
        Method::Sisa { spec, config: SisaConfig::new(4, 5, 100, train) },
        Method::Dare { params: DareParams { trees: 10, d_max: 10, d_rmax: 1, k: 5, p_tilde: 4 } },
        Method::Fisher { spec, train, sigma: 0.0, batch_size: None },
        Method::Influence { spec, train, objective_sigma: 0.0, batch_size: None },
        Method::DeltaGrad { spec, train, config: DeltaGradConfig::new(10, 5, 2) },
        Method::D2D { spec, train, config: D2DConfig::new(ChainMode::Perfect, 20, 0.0, 1.0) },
        Method::DeepObliviate { spec, train, blocks: 8, eps: 0.01 },
    ]
}
