use tapegrad::{ParamId, ParamStore, SplitMix64, Tensor};

/// Variance-preserving uniform init: bound sqrt(3/fan_in), which gives the
/// weights variance 1/fan_in so feature magnitude carries through linear
/// layers unchanged. Biases use the fan-in of the layer that owns them.
///
/// A tighter 1/sqrt(fan_in) bound loses a factor ~1.7 of signal per layer;
/// across this model's ~10-layer visual-to-logit path that attenuates the
/// spatial signal below what the optimizer can recover, and training
/// collapses to the constant background prior.
pub(crate) fn uniform_param(
    store: &mut ParamStore,
    rng: &mut SplitMix64,
    name: &str,
    shape: &[usize],
    fan_in: usize,
) -> ParamId {
    let bound = (3.0 / fan_in as f64).sqrt();
    store.register(name, Tensor::uniform(shape, -bound, bound, rng))
}

/// Relu-gain variant for the conv stack: bound sqrt(6/fan_in) compensates
/// the halving of second moments at each relu.
pub(crate) fn relu_uniform_param(
    store: &mut ParamStore,
    rng: &mut SplitMix64,
    name: &str,
    shape: &[usize],
    fan_in: usize,
) -> ParamId {
    let bound = (6.0 / fan_in as f64).sqrt();
    store.register(name, Tensor::uniform(shape, -bound, bound, rng))
}

pub(crate) const INIT_SCHEME: &str =
    "uniform(-sqrt(3/fan_in), +sqrt(3/fan_in)); conv kernels followed by relu use uniform(-sqrt(6/fan_in), +sqrt(6/fan_in))";
