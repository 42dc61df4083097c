//! Central finite-difference checks of every differentiable tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::tape::{ParamStore, Tape, Var};
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub shapes: Vec<Vec<usize>>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type Forward<'f> = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var> + 'f;

/// Compares reverse-mode gradients of `sum(f(inputs) * r)` against central
/// differences, where `r` is a fixed random projection of the output.
pub fn check(
    op: &str,
    inputs: &[Array],
    seed: u64,
    training: bool,
    f: &Forward<'_>,
) -> Result<GradCheckReport> {
    check_with(&ParamStore::new(), op, inputs, seed, training, f)
}

/// Like [`check`], with model parameters available to `f` as fixed weights.
pub fn check_with(
    store: &ParamStore,
    op: &str,
    inputs: &[Array],
    seed: u64,
    training: bool,
    f: &Forward<'_>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let make_tape = || {
        if training {
            Tape::training(store, ChaCha8Rng::seed_from_u64(seed))
        } else {
            Tape::new(store)
        }
    };

    let out_shape = {
        let mut tape = make_tape();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let proj = Array::uniform(&out_shape, 1.0, &mut rng);

    let loss_of = |xs: &[Array], want_grads: bool| -> Result<(f64, Vec<Array>)> {
        let mut tape = make_tape();
        let vars: Vec<Var> = xs
            .iter()
            .map(|a| {
                if want_grads {
                    tape.input(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let r = tape.constant(proj.clone());
        let prod = tape.mul(out, r)?;
        let loss = tape.sum_all(prod);
        let value = tape.value(loss).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(x.shape()))
            })
            .collect();
        Ok((value, g))
    };

    let (_, analytic) = loss_of(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..xs[which].len() {
            let orig = xs[which].data()[i];
            xs[which].data_mut()[i] = orig + FD_STEP;
            let (up, _) = loss_of(&xs, false)?;
            xs[which].data_mut()[i] = orig - FD_STEP;
            let (down, _) = loss_of(&xs, false)?;
            xs[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        shapes: inputs.iter().map(|a| a.shape().to_vec()).collect(),
        max_rel_error: worst,
    })
}

/// Inputs bounded away from zero so kinks of |x| and relu are never crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.5);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Array::new(shape, data).expect("consistent shape")
}

/// Runs the full suite: every differentiable operation on three shapes.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let randn = |shape: &[usize], rng: &mut ChaCha8Rng| Array::randn(shape, 1.0, rng);

    for (m, k, n) in [(3, 4, 2), (1, 5, 3), (6, 2, 6)] {
        let a = randn(&[m, k], &mut rng);
        let b = randn(&[k, n], &mut rng);
        reports.push(check("matmul", &[a, b], seed, false, &|t, v| {
            t.matmul(v[0], v[1])
        })?);
    }
    for (m, n) in [(2, 3), (5, 1), (4, 7)] {
        let x = randn(&[m, n], &mut rng);
        let y = randn(&[m, n], &mut rng);
        let b = randn(&[n], &mut rng);
        reports.push(check(
            "add",
            &[x.clone(), y.clone()],
            seed,
            false,
            &|t, v| t.add(v[0], v[1]),
        )?);
        reports.push(check("add_bias", &[x.clone(), b], seed, false, &|t, v| {
            t.add_bias(v[0], v[1])
        })?);
        reports.push(check("mul", &[x.clone(), y], seed, false, &|t, v| {
            t.mul(v[0], v[1])
        })?);
        reports.push(check(
            "scale",
            std::slice::from_ref(&x),
            seed,
            false,
            &|t, v| Ok(t.scale(v[0], -1.7)),
        )?);
        reports.push(check(
            "gelu",
            &[x.clone().map(|v| 2.0 * v)],
            seed,
            false,
            &|t, v| Ok(t.gelu(v[0])),
        )?);
        let xr = away_from_zero(&[m, n], &mut rng);
        reports.push(check("relu", &[xr], seed, false, &|t, v| Ok(t.relu(v[0])))?);
        reports.push(check(
            "sum_all",
            std::slice::from_ref(&x),
            seed,
            false,
            &|t, v| Ok(t.sum_all(v[0])),
        )?);
        reports.push(check("dropout", &[x], seed, true, &|t, v| {
            Ok(t.dropout(v[0], 0.3))
        })?);
    }
    for (t_len, c_in, c_out, kernel) in [(5, 3, 2, 3), (1, 2, 3, 3), (7, 4, 2, 5)] {
        let x = randn(&[t_len, c_in], &mut rng);
        let w = randn(&[kernel * c_in, c_out], &mut rng);
        let b = randn(&[c_out], &mut rng);
        reports.push(check("conv1d", &[x, w, b], seed, false, &move |t, v| {
            let cols = t.im2col(v[0], kernel)?;
            let y = t.matmul(cols, v[1])?;
            t.add_bias(y, v[2])
        })?);
    }
    for (tq, tk, d, heads, causal) in [
        (3, 4, 4, 2, false),
        (5, 5, 6, 3, true),
        (1, 6, 8, 4, false),
        (2, 7, 6, 2, false),
        (4, 4, 4, 1, true),
        (6, 6, 8, 2, true),
    ] {
        let q = randn(&[tq, d], &mut rng);
        let k = randn(&[tk, d], &mut rng);
        let v = randn(&[tk, d], &mut rng);
        let name = if causal {
            "attention_causal"
        } else {
            "attention"
        };
        reports.push(check(name, &[q, k, v], seed, false, &move |t, x| {
            t.attention(x[0], x[1], x[2], heads, causal)
        })?);
    }
    for (t_len, d) in [(2, 3), (4, 8), (1, 5)] {
        let x = randn(&[t_len, d], &mut rng);
        let g = randn(&[d], &mut rng);
        reports.push(check("rmsnorm", &[x, g], seed, false, &|t, v| {
            t.rmsnorm(v[0], v[1])
        })?);
    }
    for (vocab, d, ids) in [
        (5, 3, vec![0usize, 4, 4, 2]),
        (2, 4, vec![1]),
        (7, 2, vec![6, 0, 3]),
    ] {
        let table = randn(&[vocab, d], &mut rng);
        reports.push(check("embedding", &[table], seed, false, &move |t, v| {
            t.embedding(v[0], &ids)
        })?);
    }
    for (r1, r2, c) in [(2, 3, 4), (1, 1, 2), (4, 2, 3)] {
        let a = randn(&[r1, c], &mut rng);
        let b = randn(&[r2, c], &mut rng);
        reports.push(check(
            "concat_rows",
            &[a.clone(), b.clone()],
            seed,
            false,
            &|t, v| t.concat_rows(&[v[0], v[1], v[0]]),
        )?);
        let bt = randn(&[r1, r2 + 1], &mut rng);
        reports.push(check(
            "concat_cols",
            &[a.clone(), bt],
            seed,
            false,
            &|t, v| t.concat_cols(v[0], v[1]),
        )?);
        reports.push(check("slice_rows", &[a], seed, false, &move |t, v| {
            t.slice_rows(v[0], r1 - 1, 1)
        })?);
    }
    for (t_len, classes) in [(3, 5), (1, 2), (6, 11)] {
        let logits = randn(&[t_len, classes], &mut rng);
        let targets: Vec<usize> = (0..t_len).map(|i| (i * 7 + 1) % classes).collect();
        let weights: Vec<f64> = (0..t_len)
            .map(|i| if i % 3 == 2 { 0.0 } else { 1.0 })
            .collect();
        reports.push(check(
            "cross_entropy",
            &[logits],
            seed,
            false,
            &move |t, v| t.cross_entropy_sum(v[0], &targets, &weights),
        )?);
    }
    for shape in [[2usize, 3], [1, 1], [4, 5]] {
        let a = randn(&shape, &mut rng);
        let b = a.map(|v| v + if v > 0.0 { -0.5 } else { 0.5 });
        let b = Array::new(&shape, b.data().iter().map(|v| v + 0.05).collect())?;
        reports.push(check("l1", &[a, b], seed, false, &|t, v| t.l1(v[0], v[1]))?);
    }
    Ok(reports)
}
