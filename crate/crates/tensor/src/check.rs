//! Central-difference gradient checking, run at 64-bit precision.

use ndarray::{array, ArrayD};
use std::sync::Arc;

use crate::{Tape, TensorError, TensorRef};

/// Result of checking one registered op.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Compare the tape's analytic gradients against central differences for a
/// deterministic scalar program over `params`.
///
/// The relative error for a coordinate is `|a - n| / max(1, |a|, |n|)`;
/// the maximum over all coordinates of all parameters is returned.
pub fn grad_check<F>(
    params: &[(String, ArrayD<f64>)],
    eps: f64,
    mut program: F,
) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape<f64>, &[TensorRef]) -> Result<TensorRef, TensorError>,
{
    // analytic pass
    let mut tape = Tape::<f64>::new();
    let refs: Vec<TensorRef> = params
        .iter()
        .map(|(name, value)| tape.param(name, Arc::new(value.clone())))
        .collect();
    let loss = program(&mut tape, &refs)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<ArrayD<f64>> = refs
        .iter()
        .zip(params)
        .map(|(&r, (_, value))| {
            grads.take(r).unwrap_or_else(|| ArrayD::zeros(value.shape().to_vec()))
        })
        .collect();

    let mut eval = |perturbed: &[(String, ArrayD<f64>)]| -> Result<f64, TensorError> {
        let mut tape = Tape::<f64>::new();
        let refs: Vec<TensorRef> = perturbed
            .iter()
            .map(|(name, value)| tape.param(name, Arc::new(value.clone())))
            .collect();
        let loss = program(&mut tape, &refs)?;
        Ok(tape.scalar_value(loss))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<(String, ArrayD<f64>)> = params.to_vec();
    for pi in 0..params.len() {
        let len = params[pi].1.len();
        for ci in 0..len {
            let base = params[pi].1.as_slice().expect("standard layout")[ci];
            work[pi].1.as_slice_mut().unwrap()[ci] = base + eps;
            let plus = eval(&work)?;
            work[pi].1.as_slice_mut().unwrap()[ci] = base - eps;
            let minus = eval(&work)?;
            work[pi].1.as_slice_mut().unwrap()[ci] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].as_slice().unwrap()[ci];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic pseudo-uniform values in (-1, 1).
fn pseudo(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut st = seed.wrapping_mul(0xA24B_AED4_963E_E407).wrapping_add(1);
    ArrayD::from_shape_fn(shape.to_vec(), |_| {
        let u = (splitmix(&mut st) >> 11) as f64 / (1u64 << 53) as f64;
        2.0 * u - 1.0
    })
}

/// Like `pseudo` but keeps values away from zero (for kinked ops).
fn pseudo_off_zero(shape: &[usize], seed: u64) -> ArrayD<f64> {
    pseudo(shape, seed).mapv(|v| if v.abs() < 0.1 { v + 0.25 * v.signum().max(0.5) } else { v })
}

fn weighted_sum(
    tape: &mut Tape<f64>,
    out: TensorRef,
    seed: u64,
) -> Result<TensorRef, TensorError> {
    let w = pseudo(tape.value(out).shape(), seed);
    let c = tape.constant(w);
    let m = tape.mul(out, c);
    Ok(tape.sum(m))
}

fn one(
    name: &'static str,
    params: Vec<(String, ArrayD<f64>)>,
    program: impl FnMut(&mut Tape<f64>, &[TensorRef]) -> Result<TensorRef, TensorError>,
    eps: f64,
) -> OpCheck {
    let max_rel_err = grad_check(&params, eps, program).expect("op check program");
    OpCheck { name, max_rel_err }
}

fn p(name: &str, v: ArrayD<f64>) -> (String, ArrayD<f64>) {
    (name.to_string(), v)
}

/// Run the gradient checker over every differentiable op the tape
/// registers, each on a small fixed pseudo-random instance.
pub fn registered_op_checks(eps: f64) -> Vec<OpCheck> {
    let mut checks = Vec::new();

    checks.push(one(
        "add",
        vec![p("a", pseudo(&[3, 4], 1)), p("b", pseudo(&[3, 4], 2))],
        |t, r| {
            let y = t.add(r[0], r[1]);
            weighted_sum(t, y, 100)
        },
        eps,
    ));
    checks.push(one(
        "mul",
        vec![p("a", pseudo(&[3, 4], 3)), p("b", pseudo(&[3, 4], 4))],
        |t, r| {
            let y = t.mul(r[0], r[1]);
            weighted_sum(t, y, 101)
        },
        eps,
    ));
    checks.push(one(
        "sigmoid",
        vec![p("x", pseudo(&[4, 3], 5))],
        |t, r| {
            let y = t.sigmoid(r[0]);
            weighted_sum(t, y, 102)
        },
        eps,
    ));
    checks.push(one(
        "relu",
        vec![p("x", pseudo_off_zero(&[4, 5], 6))],
        |t, r| {
            let y = t.relu(r[0]);
            weighted_sum(t, y, 103)
        },
        eps,
    ));
    checks.push(one(
        "gelu",
        vec![p("x", pseudo(&[4, 5], 7))],
        |t, r| {
            let y = t.gelu(r[0]);
            weighted_sum(t, y, 104)
        },
        eps,
    ));
    checks.push(one(
        "softmax_vec",
        vec![p("x", pseudo(&[6], 8))],
        |t, r| {
            let y = t.softmax(r[0]);
            weighted_sum(t, y, 105)
        },
        eps,
    ));
    checks.push(one(
        "softmax_rows",
        vec![p("x", pseudo(&[3, 5], 9))],
        |t, r| {
            let y = t.softmax(r[0]);
            weighted_sum(t, y, 106)
        },
        eps,
    ));
    checks.push(one(
        "sum",
        vec![p("x", pseudo(&[3, 3], 10))],
        |t, r| Ok(t.sum(r[0])),
        eps,
    ));
    checks.push(one(
        "layer_norm",
        vec![
            p("x", pseudo(&[4, 6], 11)),
            p("gain", pseudo(&[6], 12).mapv(|v| v + 1.5)),
            p("bias", pseudo(&[6], 13)),
        ],
        |t, r| {
            let y = t.layer_norm(r[0], r[1], r[2]);
            weighted_sum(t, y, 107)
        },
        eps,
    ));
    checks.push(one(
        "depthwise_conv_scored",
        vec![p("x", pseudo(&[7, 3], 14)), p("w", pseudo(&[3, 4], 15))],
        |t, r| {
            let y = t.scored_depthwise_conv(r[0], r[1], true);
            weighted_sum(t, y, 108)
        },
        eps,
    ));
    checks.push(one(
        "depthwise_conv_raw",
        vec![p("x", pseudo(&[7, 3], 16)), p("w", pseudo(&[3, 4], 17))],
        |t, r| {
            let y = t.scored_depthwise_conv(r[0], r[1], false);
            weighted_sum(t, y, 109)
        },
        eps,
    ));
    checks.push(one(
        "linear",
        vec![
            p("x", pseudo(&[3, 4], 18)),
            p("w", pseudo(&[4, 5], 19)),
            p("b", pseudo(&[5], 20)),
        ],
        |t, r| {
            let y = t.linear(r[0], r[1], r[2]);
            weighted_sum(t, y, 110)
        },
        eps,
    ));
    checks.push(one(
        "matmul_nt",
        vec![p("x", pseudo(&[3, 4], 21)), p("w", pseudo(&[6, 4], 22))],
        |t, r| {
            let y = t.matmul_nt(r[0], r[1]);
            weighted_sum(t, y, 111)
        },
        eps,
    ));
    checks.push(one(
        "add_row_vec",
        vec![p("x", pseudo(&[3, 5], 23)), p("v", pseudo(&[5], 24))],
        |t, r| {
            let y = t.add_row_vec(r[0], r[1]);
            weighted_sum(t, y, 112)
        },
        eps,
    ));
    checks.push(one(
        "embedding_lookup",
        vec![p("table", pseudo(&[7, 3], 25))],
        |t, r| {
            let y = t.embedding_lookup(r[0], &[0, 3, 3, 6, 1])?;
            weighted_sum(t, y, 113)
        },
        eps,
    ));
    checks.push(one(
        "gather_rows",
        vec![p("x", pseudo(&[6, 3], 26))],
        |t, r| {
            let y = t.gather_rows(r[0], &[5, 0, 2, 2])?;
            weighted_sum(t, y, 114)
        },
        eps,
    ));
    checks.push(one(
        "concat_rows",
        vec![
            p("a", pseudo(&[2, 3], 27)),
            p("b", pseudo(&[3, 3], 28)),
            p("c", pseudo(&[1, 3], 29)),
        ],
        |t, r| {
            let y = t.concat_rows(&[r[0], r[1], r[2]]);
            weighted_sum(t, y, 115)
        },
        eps,
    ));
    checks.push(one(
        "zero_rows",
        vec![p("x", pseudo(&[5, 3], 30))],
        |t, r| {
            let y = t.zero_rows(r[0], &[true, false, true, true, false]);
            weighted_sum(t, y, 116)
        },
        eps,
    ));
    checks.push(one(
        "max_pool_seq",
        vec![p(
            "x",
            array![
                [1.0, -2.0, 0.3],
                [0.2, 0.9, -0.7],
                [9.0, 9.0, 9.0],
                [-0.5, 0.1, 0.8],
                [0.6, -0.4, -0.1]
            ]
            .into_dyn(),
        )],
        // row 2 is invalid, so maxima come from well-separated rows
        |t, r| {
            let y = t.max_pool_seq(r[0], &[true, true, false, true, true])?;
            weighted_sum(t, y, 117)
        },
        eps,
    ));
    checks.push(one(
        "mean_pool_seq",
        vec![p("x", pseudo(&[5, 3], 32))],
        |t, r| {
            let y = t.mean_pool_seq(r[0], &[true, false, true, true, false])?;
            weighted_sum(t, y, 118)
        },
        eps,
    ));
    checks.push(one(
        "cross_entropy",
        vec![p("logits", pseudo(&[4, 6], 33))],
        |t, r| t.cross_entropy(r[0], &[1, 0, 5, 2]),
        eps,
    ));

    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_gradient_is_tight() {
        let err = grad_check(
            &[
                p("x", pseudo(&[3, 4], 40)),
                p("w", pseudo(&[4, 5], 41)),
                p("b", pseudo(&[5], 42)),
            ],
            1e-4,
            |t, r| {
                let y = t.linear(r[0], r[1], r[2]);
                weighted_sum(t, y, 140)
            },
        )
        .unwrap();
        assert!(err < 1e-7, "linear grad rel err {err}");
    }

    #[test]
    fn scored_conv_gradient_is_tight() {
        let err = grad_check(
            &[p("x", pseudo(&[9, 4], 43)), p("w", pseudo(&[4, 3], 44))],
            1e-4,
            |t, r| {
                let y = t.scored_depthwise_conv(r[0], r[1], true);
                weighted_sum(t, y, 141)
            },
        )
        .unwrap();
        assert!(err < 1e-6, "conv grad rel err {err}");
    }

    #[test]
    fn every_registered_op_passes_at_1e4() {
        for check in registered_op_checks(1e-4) {
            assert!(
                check.max_rel_err < 1e-4,
                "op {} rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }
}
