//! Central finite-difference gradient checking.

use super::optim::{GradStore, Parameterized};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation applied on each side of every coordinate.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor, so coordinates whose true gradient is ~0 are
    /// compared in absolute rather than relative terms. Raised automatically
    /// to the resolution limit of the difference quotient, see
    /// [`check_gradients`].
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

/// Result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.max_rel_error <= self.tolerance)
    }
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// The relative error of one coordinate is `|a - n| / max(|a|, |n|, floor)`.
///
/// Rounding in the difference quotient is about `eps * |L| / step`, so a
/// gradient smaller than `eps * |L| / (step * tolerance)` cannot be resolved
/// to `tolerance`. `floor` is the larger of that bound and `abs_floor`.
pub fn check_gradients<P, F>(
    params: &P,
    analytic: &GradStore,
    loss: F,
    cfg: GradCheckConfig,
) -> GradCheckReport
where
    P: Parameterized + Clone,
    F: Fn(&P) -> f64,
{
    let names = params.parameter_names();
    let resolution = f64::EPSILON * loss(params).abs() / (cfg.step * cfg.tolerance);
    let floor = cfg.abs_floor.max(resolution);
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(names.len());

    for (ti, name) in names.into_iter().enumerate() {
        let mut check = TensorCheck {
            name,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let n = probe.parameters()[ti].len();
        for i in 0..n {
            let original = probe.parameters()[ti].data()[i];
            probe.parameters_mut()[ti].data_mut()[i] = original + cfg.step;
            let plus = loss(&probe);
            probe.parameters_mut()[ti].data_mut()[i] = original - cfg.step;
            let minus = loss(&probe);
            probe.parameters_mut()[ti].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.get(ti).data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            // NaN compares false, so route it through explicitly.
            if rel > check.max_rel_error || rel.is_nan() {
                check.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }

    GradCheckReport {
        tensors,
        tolerance: cfg.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// `y = w . x + b`, loss `0.5 * (y - t)^2` summed over a few samples.
    #[derive(Clone)]
    struct Linear {
        w: Tensor,
        b: Tensor,
    }

    impl Parameterized for Linear {
        fn parameters(&self) -> Vec<&Tensor> {
            vec![&self.w, &self.b]
        }
        fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.w, &mut self.b]
        }
    }

    const SAMPLES: [([f64; 3], f64); 3] = [
        ([1.0, 2.0, -1.0], 0.5),
        ([0.3, -0.7, 2.0], -1.0),
        ([-1.5, 0.2, 0.4], 2.0),
    ];

    fn loss(m: &Linear) -> f64 {
        SAMPLES
            .iter()
            .map(|(x, t)| {
                let y: f64 =
                    m.w.data().iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + m.b.data()[0];
                0.5 * (y - t) * (y - t)
            })
            .sum()
    }

    fn grads(m: &Linear) -> GradStore {
        let mut gw = vec![0.0; 3];
        let mut gb = 0.0;
        for (x, t) in SAMPLES {
            let y: f64 = m.w.data().iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + m.b.data()[0];
            for (g, xi) in gw.iter_mut().zip(&x) {
                *g += (y - t) * xi;
            }
            gb += y - t;
        }
        GradStore::from_tensors(vec![
            Tensor::new(vec![3], gw).unwrap(),
            Tensor::new(vec![1], vec![gb]).unwrap(),
        ])
    }

    fn model() -> Linear {
        Linear {
            w: Tensor::new(vec![3], vec![0.2, -0.4, 0.9]).unwrap(),
            b: Tensor::new(vec![1], vec![0.1]).unwrap(),
        }
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let m = model();
        let report = check_gradients(&m, &grads(&m), loss, GradCheckConfig::default());
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let m = model();
        let mut g = grads(&m);
        g.tensors_mut()[0].data_mut()[1] *= 1.01;
        let report = check_gradients(&m, &g, loss, GradCheckConfig::default());
        assert!(!report.passed());
        assert_eq!(report.tensors[0].worst_index, 1);
    }

    #[test]
    fn floor_tracks_loss_magnitude() {
        // A large constant offset adds rounding noise without changing the gradient.
        let m = model();
        let offset = |m: &Linear| loss(m) + 1e6;
        let report = check_gradients(&m, &grads(&m), offset, GradCheckConfig::default());
        assert!(report.passed(), "{report:?}");
        let mut g = grads(&m);
        g.tensors_mut()[0].data_mut()[1] *= 1.01;
        assert!(!check_gradients(&m, &g, offset, GradCheckConfig::default()).passed());
    }
}
