//! Central finite-difference gradients for checking a manual backward pass.

use super::{Mlp, MlpGrads};

/// Numerical gradient of `loss` with respect to every parameter of `params`,
/// using `(f(p + h) − f(p − h)) / 2h` one coordinate at a time.
pub fn finite_difference(params: &Mlp, step: f64, mut loss: impl FnMut(&Mlp) -> f64) -> MlpGrads {
    let mut probe = params.clone();
    let mut grads = params.zero_grads();
    for (l, g) in grads.layers.iter_mut().enumerate() {
        for i in 0..g.weight.data().len() {
            let orig = probe.layers()[l].weight.data()[i];
            probe.layers_mut()[l].weight.data_mut()[i] = orig + step;
            let up = loss(&probe);
            probe.layers_mut()[l].weight.data_mut()[i] = orig - step;
            let down = loss(&probe);
            probe.layers_mut()[l].weight.data_mut()[i] = orig;
            g.weight.data_mut()[i] = (up - down) / (2.0 * step);
        }
        for i in 0..g.bias.len() {
            let orig = probe.layers()[l].bias[i];
            probe.layers_mut()[l].bias[i] = orig + step;
            let up = loss(&probe);
            probe.layers_mut()[l].bias[i] = orig - step;
            let down = loss(&probe);
            probe.layers_mut()[l].bias[i] = orig;
            g.bias[i] = (up - down) / (2.0 * step);
        }
    }
    grads
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over matching coordinates. The floor
/// keeps coordinates whose true gradient is essentially zero from dominating.
/// Returns infinity when the two gradients have different shapes.
pub fn max_relative_error(analytic: &MlpGrads, numeric: &MlpGrads, floor: f64) -> f64 {
    if analytic.layers.len() != numeric.layers.len() {
        return f64::INFINITY;
    }
    let mut worst = 0.0_f64;
    for (a, n) in analytic.layers.iter().zip(&numeric.layers) {
        if a.weight.shape() != n.weight.shape() || a.bias.len() != n.bias.len() {
            return f64::INFINITY;
        }
        let pairs = a
            .weight
            .data()
            .iter()
            .zip(n.weight.data())
            .chain(a.bias.iter().zip(&n.bias));
        for (x, y) in pairs {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}
