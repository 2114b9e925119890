//! Central finite-difference oracle for verifying analytic gradients.
//!
//! Works entirely through forward evaluations, so it is independent of the
//! backward pass it checks.

use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

use crate::error::Result;
use crate::network::{backward, forward, Mode};
use crate::spec::{NetworkParams, NetworkSpec};
use crate::tensor::Tensor;

/// Largest relative error found by a check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        self.max_rel_error = self.max_rel_error.max((analytic - numeric).abs() / scale);
        self.checked += 1;
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
        }
    }
}

/// Compares `analytic` against central differences of `f` at `x`,
/// probing at most `max_probes` coordinates (evenly strided).
pub fn check_fn<F>(f: F, x: &[f64], analytic: &[f64], h: f64, max_probes: usize) -> GradCheck
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut report = GradCheck::default();
    let stride = (x.len() / max_probes.max(1)).max(1);
    let mut probe = x.to_vec();
    for i in (0..x.len()).step_by(stride) {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        report.record(analytic[i], (up - down) / (2.0 * h));
    }
    report
}

/// Random projection weights used as the scalar loss `sum(w * y)`.
pub fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Checks parameter and input gradients of a whole network in 64-bit
/// precision. Dropout masks are replayed from `seed` on every evaluation.
pub fn check_network(
    spec: &NetworkSpec,
    params: &NetworkParams<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    seed: u64,
    h: f64,
    max_probes: usize,
) -> Result<GradCheck> {
    let (y, tape) = forward(spec, params, input.clone(), mode, &mut StdRng::seed_from_u64(seed))?;
    let w = projection(y.len(), seed ^ 0x9e37_79b9);
    let dy = Tensor::new(y.shape().to_vec(), w.clone())?;
    let grads = backward(spec, params, tape, &dy)?;

    let eval = |p: &NetworkParams<f64>, x: &Tensor<f64>| -> f64 {
        let (y, _) = forward(spec, p, x.clone(), mode, &mut StdRng::seed_from_u64(seed))
            .expect("forward succeeded once");
        y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };

    let mut report = check_fn(
        |xs| {
            let x = Tensor::new(input.shape().to_vec(), xs.to_vec()).expect("same shape");
            eval(params, &x)
        },
        input.data(),
        grads.input.data(),
        h,
        max_probes,
    );
    for (ti, g) in grads.params.tensors.iter().enumerate() {
        let r = check_fn(
            |xs| {
                let mut p = params.clone();
                p.tensors[ti].data_mut().copy_from_slice(xs);
                eval(&p, input)
            },
            params.tensors[ti].data(),
            g.data(),
            h,
            max_probes,
        );
        report = report.merge(r);
    }
    Ok(report)
}
