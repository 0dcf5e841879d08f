//! Central finite differences, the oracle for the analytic tape gradients.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference estimate of `df/dx`, one element at a time:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::from_vec(x.shape(), grad)
}

/// Central-difference directional derivative of `f` at `x` along `dir`.
pub fn finite_diff_directional<F>(f: F, x: &Tensor, dir: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut up = x.clone();
    let mut down = x.clone();
    for ((u, d), v) in up.data_mut().iter_mut().zip(down.data_mut().iter_mut()).zip(dir) {
        *u += h * v;
        *d -= h * v;
    }
    Ok((f(&up)? - f(&down)?) / (2.0 * h))
}

/// Norm-wise relative error `||a - b|| / max(||a||, ||b||)`; zero when both
/// vectors are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on vectors of different length");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Outcome of comparing one analytic gradient against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub input: usize,
    pub rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.rel_err.is_finite() && self.rel_err < tol
    }
}

/// Evaluate `build(inputs)` weighted by fixed random probes and return the
/// scalar. Weighting avoids trivially zero gradients (e.g. softmax under a
/// plain sum).
fn probe_loss<'t>(tape: &'t Tape, out: Var<'t>, rng: &mut Rng) -> Result<Var<'t>> {
    let probe = Tensor::uniform(&out.shape(), -1.0, 1.0, rng)?;
    let p = tape.constant(probe);
    Ok(out.mul(&p)?.sum_all())
}

struct OpCase {
    name: &'static str,
    /// (shape, lo, hi) per input
    inputs: Vec<(Vec<usize>, f64, f64)>,
    forward: for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>,
}

fn op_cases() -> Vec<OpCase> {
    fn c(
        name: &'static str,
        inputs: &[(&[usize], f64, f64)],
        forward: for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>,
    ) -> OpCase {
        OpCase {
            name,
            inputs: inputs.iter().map(|(s, lo, hi)| (s.to_vec(), *lo, *hi)).collect(),
            forward,
        }
    }
    vec![
        c("matmul", &[(&[3, 4], -1.0, 1.0), (&[4, 2], -1.0, 1.0)], |v| v[0].matmul(&v[1])),
        c("bmm", &[(&[2, 3, 4], -1.0, 1.0), (&[2, 4, 5], -1.0, 1.0)], |v| v[0].bmm(&v[1])),
        c(
            "affine",
            &[(&[2, 3, 4], -1.0, 1.0), (&[4, 5], -1.0, 1.0), (&[5], -1.0, 1.0)],
            |v| v[0].affine(&v[1], Some(&v[2])),
        ),
        c(
            "conv2d_3x3_s1_p1",
            &[(&[2, 3, 6, 6], -1.0, 1.0), (&[4, 3, 3, 3], -1.0, 1.0), (&[4], -1.0, 1.0)],
            |v| v[0].conv2d(&v[1], Some(&v[2]), 1, 1),
        ),
        c(
            "conv2d_3x3_s2_p1",
            &[(&[1, 2, 7, 7], -1.0, 1.0), (&[3, 2, 3, 3], -1.0, 1.0), (&[3], -1.0, 1.0)],
            |v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1),
        ),
        c(
            "conv2d_1x1",
            &[(&[2, 3, 4, 4], -1.0, 1.0), (&[2, 3, 1, 1], -1.0, 1.0), (&[2], -1.0, 1.0)],
            |v| v[0].conv2d(&v[1], Some(&v[2]), 1, 0),
        ),
        c(
            "conv2d_7x7_s4_p3",
            &[(&[1, 2, 12, 12], -1.0, 1.0), (&[2, 2, 7, 7], -1.0, 1.0), (&[2], -1.0, 1.0)],
            |v| v[0].conv2d(&v[1], Some(&v[2]), 4, 3),
        ),
        c("avgpool2d", &[(&[2, 3, 7, 5], -1.0, 1.0)], |v| v[0].avgpool2d(3, 2)),
        c("avgpool2d_upsample", &[(&[1, 2, 3, 2], -1.0, 1.0)], |v| v[0].avgpool2d(5, 4)),
        c(
            "layer_norm",
            &[(&[2, 3, 8], -2.0, 2.0), (&[8], 0.5, 1.5), (&[8], -1.0, 1.0)],
            |v| v[0].layer_norm(&v[1], &v[2], 1e-6),
        ),
        c("softmax_last", &[(&[2, 3, 5], -2.0, 2.0)], |v| v[0].softmax(2)),
        c("softmax_mid", &[(&[2, 5, 3], -2.0, 2.0)], |v| v[0].softmax(1)),
        c("gelu", &[(&[3, 7], -3.0, 3.0)], |v| Ok(v[0].gelu())),
        // kept away from the kink at 0
        c("relu", &[(&[3, 7], 0.05, 2.0)], |v| Ok(v[0].neg().add_scalar(1.0).relu())),
        c("add_broadcast", &[(&[2, 3, 4], -1.0, 1.0), (&[4], -1.0, 1.0)], |v| v[0].add(&v[1])),
        c("sub_broadcast", &[(&[2, 3, 4], -1.0, 1.0), (&[3, 1], -1.0, 1.0)], |v| v[0].sub(&v[1])),
        c("mul_broadcast", &[(&[2, 3, 4], -1.0, 1.0), (&[4], -1.0, 1.0)], |v| v[0].mul(&v[1])),
        c("mul_same", &[(&[2, 5], -1.0, 1.0), (&[2, 5], -1.0, 1.0)], |v| v[0].mul(&v[1])),
        c("div", &[(&[2, 5], -1.0, 1.0), (&[2, 5], 0.5, 2.0)], |v| v[0].div(&v[1])),
        c("scale", &[(&[6], -1.0, 1.0)], |v| Ok(v[0].scale(-2.5))),
        c("add_scalar", &[(&[6], -1.0, 1.0)], |v| Ok(v[0].add_scalar(0.7))),
        c("sqrt", &[(&[6], 0.5, 3.0)], |v| Ok(v[0].sqrt())),
        c("reshape", &[(&[2, 6], -1.0, 1.0)], |v| v[0].reshape(&[3, 4])),
        c("flatten", &[(&[2, 3, 4], -1.0, 1.0)], |v| v[0].flatten(1)),
        c("concat", &[(&[2, 1, 3], -1.0, 1.0), (&[2, 4, 3], -1.0, 1.0)], |v| {
            Var::concat(&[v[0], v[1]], 1)
        }),
        c("permute", &[(&[2, 3, 4, 5], -1.0, 1.0)], |v| v[0].permute(&[2, 0, 3, 1])),
        c("narrow", &[(&[3, 5, 2], -1.0, 1.0)], |v| v[0].narrow(1, 1, 3)),
        c("sum_axis", &[(&[3, 4, 2], -1.0, 1.0)], |v| v[0].sum(1)),
        c("mean_axis", &[(&[3, 4, 2], -1.0, 1.0)], |v| v[0].mean(0)),
        c("sum_all", &[(&[3, 4], -1.0, 1.0)], |v| Ok(v[0].sum_all())),
        c("mean_all", &[(&[3, 4], -1.0, 1.0)], |v| Ok(v[0].mean_all())),
    ]
}

/// Names of the ops covered by [`op_suite`].
pub fn op_suite_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

fn eval_case(case: &OpCase, inputs: &[Tensor], probe_seed: u64) -> Result<f64> {
    let tape = Tape::inference();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = (case.forward)(&vars)?;
    let loss = probe_loss(&tape, out, &mut Rng::new(probe_seed))?;
    loss.value().item()
}

/// Check every op's analytic gradient against central differences for each
/// seed and each differentiable input. Step size `h`.
pub fn op_suite(seeds: std::ops::Range<u64>, h: f64) -> Result<Vec<GradCheck>> {
    let mut results = Vec::new();
    for case in op_cases() {
        for seed in seeds.clone() {
            let mut rng = Rng::new(seed.wrapping_mul(1_000_003).wrapping_add(case.name.len() as u64));
            let inputs: Vec<Tensor> = case
                .inputs
                .iter()
                .map(|(s, lo, hi)| Tensor::uniform(s, *lo, *hi, &mut rng).map(|t| t.with_requires_grad(true)))
                .collect::<Result<_>>()?;
            let probe_seed = seed ^ 0x5eed;
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t)).collect();
            let out = (case.forward)(&vars)?;
            let loss = probe_loss(&tape, out, &mut Rng::new(probe_seed))?;
            let grads = tape.backward(loss)?;
            for (i, var) in vars.iter().enumerate() {
                let analytic = grads
                    .slice(*var)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
                let numeric = finite_diff_grad(
                    |x| {
                        let mut probe = inputs.clone();
                        probe[i] = x.clone();
                        eval_case(&case, &probe, probe_seed)
                    },
                    &inputs[i],
                    h,
                )?;
                results.push(GradCheck {
                    name: case.name.to_string(),
                    seed,
                    input: i,
                    rel_err: relative_error(&analytic, numeric.data()),
                });
            }
        }
    }
    Ok(results)
}
