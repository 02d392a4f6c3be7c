use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, Module, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn probe_loss<M: Module<f64>>(m: &mut M, x: &Tensor<f64>, mode: Mode, weights: &[Tensor<f64>]) -> Result<f64, NnError> {
    let outs = m.forward(x, mode)?;
    Ok(outs.iter().zip(weights).map(|(o, w)| o.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()).sum())
}

/// Compares analytic gradients of a random linear probe of the outputs against
/// central differences, on up to `samples` parameters and `samples` input entries.
/// Use a mode in which the module is deterministic (no active dropout).
pub fn grad_check<M: Module<f64>>(m: &mut M, x: &Tensor<f64>, eps: f64, samples: usize, mode: Mode, seed: u64) -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outs = m.forward(x, mode)?;
    let weights: Vec<Tensor<f64>> = outs
        .iter()
        .map(|o| Tensor::from_vec(&o.shape, (0..o.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect::<Result<_, _>>()?;
    m.zero_grad();
    let dx = m.backward(&weights)?;
    let analytic: Vec<Vec<f64>> = m.params_mut().iter().map(|p| p.grad.clone()).collect();

    let mut worst = 0.0f64;
    let mut checked = 0;
    let total: usize = analytic.iter().map(|g| g.len()).sum();
    for _ in 0..samples.min(total) {
        let mut k = rng.gen_range(0..total);
        let mut pi = 0;
        while k >= analytic[pi].len() {
            k -= analytic[pi].len();
            pi += 1;
        }
        let orig = m.params_mut()[pi].value[k];
        m.params_mut()[pi].value[k] = orig + eps;
        let lp = probe_loss(m, x, mode, &weights)?;
        m.params_mut()[pi].value[k] = orig - eps;
        let lm = probe_loss(m, x, mode, &weights)?;
        m.params_mut()[pi].value[k] = orig;
        worst = worst.max(rel_err(analytic[pi][k], (lp - lm) / (2.0 * eps)));
        checked += 1;
    }
    let mut xp = x.clone();
    for _ in 0..samples.min(x.len()) {
        let i = rng.gen_range(0..x.len());
        let orig = xp.data[i];
        xp.data[i] = orig + eps;
        let lp = probe_loss(m, &xp, mode, &weights)?;
        xp.data[i] = orig - eps;
        let lm = probe_loss(m, &xp, mode, &weights)?;
        xp.data[i] = orig;
        worst = worst.max(rel_err(dx.data[i], (lp - lm) / (2.0 * eps)));
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Sequential};

    fn check(specs: &[LayerSpec], input: &[usize], mode: Mode) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Sequential::<f64>::build(specs, &mut rng).unwrap();
        let x = Tensor::from_vec(input, (0..input.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        // give batchnorm non-trivial running statistics
        net.run(&x, Mode::Train).unwrap();
        grad_check(&mut net, &x, 1e-5, 200, mode, 5).unwrap().max_rel_error
    }

    #[test]
    fn linear_is_exact() {
        let e = check(&[LayerSpec::Linear { inputs: 6, outputs: 3 }], &[4, 6], Mode::Eval);
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn every_layer_kind() {
        let conv = LayerSpec::Conv {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let cases: Vec<(Vec<LayerSpec>, Vec<usize>)> = vec![
            (vec![conv.clone()], vec![2, 2, 7, 6]),
            (vec![LayerSpec::BatchNorm { channels: 2 }], vec![3, 2, 4, 4]),
            (vec![LayerSpec::Relu], vec![2, 9]),
            (vec![LayerSpec::Dropout { rate: 0.3 }], vec![2, 9]),
            (
                vec![LayerSpec::UpConv {
                    in_ch: 2,
                    out_ch: 3,
                    kernel: 2,
                    stride: 2,
                }],
                vec![2, 2, 3, 3],
            ),
            (vec![LayerSpec::SpatialSoftArgmax], vec![2, 3, 5, 4]),
            (vec![LayerSpec::Heatmap { sigma: 2.0, height: 6, width: 5 }], vec![2, 4]),
            (vec![conv, LayerSpec::Flatten, LayerSpec::Linear { inputs: 36, outputs: 2 }], vec![2, 2, 7, 6]),
        ];
        for (specs, shape) in cases {
            let e = check(&specs, &shape, Mode::Eval);
            assert!(e < 1e-3, "{specs:?}: {e}");
        }
        // batchnorm with batch statistics
        let e = check(&[LayerSpec::BatchNorm { channels: 3 }], &[5, 3], Mode::Train);
        assert!(e < 1e-3, "bn train: {e}");
    }
}
