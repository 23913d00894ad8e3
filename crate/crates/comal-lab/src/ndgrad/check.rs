//! Finite-difference gradient checking.

use super::Tensor;
use crate::rng::DetRng;
use crate::{Error, Real, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: Real = 1e-5;

/// Max over coordinates of `|ad - fd| / (|fd| + 1e-8)` where `fd` is the
/// central difference of `f` and `ad` the reverse-mode gradient.
pub fn grad_check<F>(f: F, x: &Tensor, step: Real) -> Result<Real>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let xp = x.to_param();
    let loss = f(&xp)?;
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.all_finite() {
        let culprit = find_nonfinite(&loss).unwrap_or("loss");
        return Err(Error::NonFinite {
            context: format!("grad_check: non-finite value produced by `{culprit}`"),
        });
    }
    loss.backward()?;
    let ad = xp.grad().unwrap_or_else(|| vec![0.0; xp.len()]);
    if ad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "grad_check: non-finite gradient".into(),
        });
    }

    let mut max_rel = 0.0;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&Tensor::from_vec(plus, x.shape())?)?.item();
        let fm = f(&Tensor::from_vec(minus, x.shape())?)?.item();
        let fd = (fp - fm) / (2.0 * step);
        let rel = (ad[i] - fd).abs() / (fd.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// First op (in dependency order) whose output holds a non-finite value.
fn find_nonfinite(t: &Tensor) -> Option<&'static str> {
    fn walk(t: &Tensor, seen: &mut std::collections::HashSet<u64>) -> Option<&'static str> {
        if !seen.insert(t.id()) {
            return None;
        }
        if let Some(op) = t.op() {
            for input in op.inputs() {
                if let Some(name) = walk(input, seen) {
                    return Some(name);
                }
            }
            if !t.all_finite() {
                return Some(op.name());
            }
        }
        None
    }
    walk(t, &mut std::collections::HashSet::new())
}

/// A named scalar-valued composition exercising one primitive, plus the
/// input shape it expects. Inputs are drawn uniformly from [-2, 2].
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub input_shape: Vec<usize>,
    pub f: Box<dyn Fn(&Tensor) -> Result<Tensor> + Send + Sync>,
}

fn weights(shape: &[usize], tag: u64) -> Tensor {
    let mut rng = DetRng::new(0x5eed_0001).derive(tag);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Weighted sum against fixed coefficients; keeps per-coordinate gradients
/// distinct so routing bugs cannot cancel out.
fn wsum(t: &Tensor, tag: u64) -> Result<Tensor> {
    let w = weights(t.shape(), tag);
    Ok(t.mul(&w)?.sum_all())
}

/// Registry of every differentiable primitive, used by both the unit
/// property tests and the acceptance suite.
pub fn primitive_registry() -> Vec<PrimitiveCheck> {
    let mut v: Vec<PrimitiveCheck> = Vec::new();
    let mut add = |name: &'static str, shape: &[usize], f: Box<dyn Fn(&Tensor) -> Result<Tensor> + Send + Sync>| {
        v.push(PrimitiveCheck {
            name,
            input_shape: shape.to_vec(),
            f,
        });
    };

    add("add", &[2, 3], Box::new(|x| wsum(&x.add(&weights(x.shape(), 1))?, 2)));
    add("sub", &[2, 3], Box::new(|x| wsum(&x.sub(&weights(x.shape(), 3))?, 4)));
    add("mul", &[2, 3], Box::new(|x| wsum(&x.mul(&weights(x.shape(), 5))?, 6)));
    add(
        "div",
        &[2, 3],
        Box::new(|x| {
            // keep the divisor away from zero
            let d = weights(x.shape(), 7).mul_scalar(0.25).add_scalar(3.0);
            wsum(&x.div(&d)?, 8)
        }),
    );
    add("add_scalar", &[4], Box::new(|x| wsum(&x.add_scalar(1.5), 9)));
    add("mul_scalar", &[4], Box::new(|x| wsum(&x.mul_scalar(-0.7), 10)));
    add("exp", &[2, 2], Box::new(|x| wsum(&x.exp(), 11)));
    add("log", &[5], Box::new(|x| wsum(&x.add_scalar(3.0).log(), 12)));
    add("tanh", &[5], Box::new(|x| wsum(&x.tanh(), 13)));
    add("pow", &[4], Box::new(|x| wsum(&x.add_scalar(3.0).powf(1.7), 14)));
    add(
        "matmul",
        &[3, 4],
        Box::new(|x| wsum(&x.matmul(&weights(&[4, 2], 15))?, 16)),
    );
    add(
        "matmul_rhs",
        &[4, 2],
        Box::new(|x| wsum(&weights(&[3, 4], 17).to_param().matmul(x)?, 18)),
    );
    add(
        "conv2d",
        &[4, 4, 2],
        Box::new(|x| wsum(&x.conv2d(&weights(&[3, 3, 2, 2], 19), 1)?, 20)),
    );
    add(
        "conv2d_kernel",
        &[3, 3, 2, 2],
        Box::new(|x| wsum(&weights(&[4, 4, 2], 21).to_param().conv2d(x, 1)?, 22)),
    );
    add(
        "add_bias",
        &[3, 4],
        Box::new(|x| wsum(&x.add_bias(&weights(&[4], 23))?, 24)),
    );
    add("sum_all", &[2, 3], Box::new(|x| Ok(x.sum_all())));
    add("mean_all", &[2, 3], Box::new(|x| Ok(x.mean_all())));
    add("sum_axis", &[2, 3, 2], Box::new(|x| wsum(&x.sum_axis(1)?, 25)));
    add("mean_axis", &[2, 3, 2], Box::new(|x| wsum(&x.mean_axis(1)?, 26)));
    add("max_axis", &[3, 4], Box::new(|x| wsum(&x.max_axis(1)?, 27)));
    add("reshape", &[2, 6], Box::new(|x| wsum(&x.reshape(&[3, 4])?, 28)));
    add("transpose", &[2, 3, 2], Box::new(|x| wsum(&x.transpose(0, 2)?, 29)));
    add("slice", &[3, 5], Box::new(|x| wsum(&x.slice(1, 1, 3)?, 30)));
    add(
        "concat",
        &[2, 3],
        Box::new(|x| wsum(&Tensor::concat(&[x.clone(), x.mul_scalar(0.5)], 1)?, 31)),
    );
    add("softmax", &[2, 2, 3], Box::new(|x| wsum(&x.softmax(2)?, 32)));
    add(
        "masked_softmax_last",
        &[3, 4],
        Box::new(|x| {
            let allowed = vec![
                true, false, true, true, //
                true, true, false, true, //
                false, true, true, false,
            ];
            wsum(&x.masked_softmax_last(&allowed)?, 33)
        }),
    );
    add(
        "gather",
        &[4, 3],
        Box::new(|x| wsum(&x.gather(0, &[2, 0, 2, 3, 1])?, 34)),
    );
    add(
        "take_per_row",
        &[3, 4],
        Box::new(|x| wsum(&x.take_per_row(&[1, 3, 0])?, 35)),
    );
    add(
        "layer_norm",
        &[3, 6],
        Box::new(|x| {
            let gain = weights(&[6], 36).to_param();
            let bias = weights(&[6], 37).to_param();
            wsum(&x.layer_norm(&gain, &bias, 1e-5)?, 38)
        }),
    );
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = DetRng::new(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = random_input(&[6], 1);
        let err = grad_check(|t| Ok(t.sum_all()), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "sum grad err {err}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for check in primitive_registry() {
            for seed in 0..3u64 {
                let x = random_input(&check.input_shape, 100 + seed);
                let err = grad_check(&check.f, &x, DEFAULT_STEP).unwrap();
                assert!(err < 1e-4, "{} seed {seed}: rel err {err}", check.name);
            }
        }
    }

    #[test]
    fn three_layer_composition_matches_finite_differences() {
        // tanh(x W1) W2 -> softmax -> weighted sum
        let f = |x: &Tensor| -> Result<Tensor> {
            let h = x.matmul(&weights(&[4, 5], 50))?.tanh();
            let o = h.matmul(&weights(&[5, 3], 51))?;
            wsum(&o.softmax(1)?, 52)
        };
        for seed in 0..5u64 {
            let x = random_input(&[2, 4], 200 + seed);
            let err = grad_check(f, &x, DEFAULT_STEP).unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn nonfinite_intermediate_names_the_primitive() {
        let x = Tensor::from_vec(vec![800.0], &[1]).unwrap();
        let err = grad_check(|t| Ok(t.exp().exp().sum_all()), &x, DEFAULT_STEP).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("exp"), "message should name the op: {msg}");
    }
}
