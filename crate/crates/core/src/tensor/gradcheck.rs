//! Central finite-difference verification of analytic gradients.
//!
//! Everything here runs at `f64`: the graph under test is rebuilt for every
//! perturbed parameter, so the numeric side never touches the `f32` path.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Scalars checked per tensor; `None` checks every entry.
    pub samples_per_tensor: Option<usize>,
    pub seed: u64,
    /// Test hook forwarded to [`Tape::corrupt_backward`].
    pub corrupt: Option<OpKind>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-3,
            samples_per_tensor: Some(10),
            seed: 0,
            corrupt: None,
        }
    }
}

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(build: &F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = build(&mut tape, &vars)?;
    Ok((tape.value(out)[0], tape.kink_signature()))
}

/// Step reductions tried when a perturbation crosses a leaky-ReLU kink.
const KINK_RETRIES: usize = 4;

/// Builds the graph with `build`, differentiates it, and compares sampled
/// parameter gradients with `(f(p+eps) - f(p-eps)) / 2eps`.
///
/// A perturbation that flips the sign of any leaky-ReLU input straddles a
/// kink, where central differences are meaningless; such a step is retried
/// at a tenth of the size, and the scalar is skipped if every retry straddles.
///
/// Returns the maximum [`relative_error`] over all sampled scalars.
pub fn finite_difference_check<F>(build: F, params: &[Tensor<f64>], opts: &FdOptions) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = opts.corrupt {
        tape.corrupt_backward(kind);
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = build(&mut tape, &vars)?;
    let base_signature = tape.kink_signature();
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("leaf gradients exist after backward").to_vec();
        let n = params[pi].len();
        let picks: Vec<usize> = match opts.samples_per_tensor {
            Some(s) if s < n => sample(&mut rng, n, s).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let orig = work[pi].values()[idx];
            let mut eps = opts.eps;
            for _ in 0..=KINK_RETRIES {
                work[pi].values_mut()[idx] = orig + eps;
                let (up, sig_up) = eval(&build, &work)?;
                work[pi].values_mut()[idx] = orig - eps;
                let (down, sig_down) = eval(&build, &work)?;
                work[pi].values_mut()[idx] = orig;
                if sig_up == base_signature && sig_down == base_signature {
                    let numeric = (up - down) / (2.0 * eps);
                    worst = worst.max(relative_error(analytic[idx], numeric));
                    break;
                }
                eps /= 10.0;
            }
        }
    }
    Ok(worst)
}

/// Result of checking one operation.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    let v = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(dims.to_vec(), v).expect("valid dims")
}

/// Moves every entry at least `gap` away from zero so that kinks are never
/// straddled by a perturbation.
fn away_from_zero(mut t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    for v in t.values_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

/// Checks every differentiable primitive at `points` random inputs each.
/// Each primitive is reduced to a scalar through a fixed random projection.
pub fn primitive_suite(points: usize, seed: u64, corrupt: Option<OpKind>) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = |s: u64| FdOptions {
        eps: 1e-5,
        samples_per_tensor: None,
        seed: s,
        corrupt,
    };
    // Weighted sum keeps the scalar sensitive to every output entry.
    fn project(tape: &mut Tape<f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
        let wv = tape.constant_from(tape.dims(x).to_vec(), w.values().to_vec())?;
        let p = tape.mul(x, wv)?;
        Ok(tape.sum(p))
    }

    let mut results = Vec::new();
    let mut run = |name: &str,
                   rng: &mut ChaCha8Rng,
                   f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..points {
            worst = worst.max(f(rng)?);
        }
        results.push(CheckOutcome {
            name: name.to_string(),
            max_rel_error: worst,
        });
        Ok(())
    };

    run("matmul", &mut rng, &mut |rng| {
        let a = random_tensor(rng, &[4, 3]);
        let b = random_tensor(rng, &[3, 5]);
        let w = random_tensor(rng, &[4, 5]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, &w)
            },
            &[a, b],
            &opts(s),
        )
    })?;
    run("conv1d", &mut rng, &mut |rng| {
        let stride = rng.gen_range(1..=2);
        let x = random_tensor(rng, &[3, 9]);
        let k = random_tensor(rng, &[2, 3, 3]);
        let b = random_tensor(rng, &[2]);
        let l_out = (9 - 3) / stride + 1;
        let w = random_tensor(rng, &[2, l_out]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.conv1d(v[0], v[1], v[2], stride)?;
                project(t, y, &w)
            },
            &[x, k, b],
            &opts(s),
        )
    })?;
    run("leaky_relu", &mut rng, &mut |rng| {
        let x = away_from_zero(random_tensor(rng, &[7]), 1e-3);
        let w = random_tensor(rng, &[7]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.leaky_relu(v[0], 0.01);
                project(t, y, &w)
            },
            &[x],
            &opts(s),
        )
    })?;
    run("sigmoid", &mut rng, &mut |rng| {
        let x = random_tensor(rng, &[6]);
        let w = random_tensor(rng, &[6]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y, &w)
            },
            &[x],
            &opts(s),
        )
    })?;
    run("tanh", &mut rng, &mut |rng| {
        let x = random_tensor(rng, &[6]);
        let w = random_tensor(rng, &[6]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.tanh(v[0]);
                project(t, y, &w)
            },
            &[x],
            &opts(s),
        )
    })?;
    run("softmax", &mut rng, &mut |rng| {
        let x = random_tensor(rng, &[5]);
        let w = random_tensor(rng, &[5]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.softmax(v[0]);
                project(t, y, &w)
            },
            &[x],
            &opts(s),
        )
    })?;
    run("add", &mut rng, &mut |rng| {
        let a = random_tensor(rng, &[2, 3]);
        let b = random_tensor(rng, &[2, 3]);
        let w = random_tensor(rng, &[2, 3]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, &w)
            },
            &[a, b],
            &opts(s),
        )
    })?;
    run("add_row", &mut rng, &mut |rng| {
        let a = random_tensor(rng, &[3, 4]);
        let b = random_tensor(rng, &[4]);
        let w = random_tensor(rng, &[3, 4]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y, &w)
            },
            &[a, b],
            &opts(s),
        )
    })?;
    run("mul", &mut rng, &mut |rng| {
        let a = random_tensor(rng, &[5]);
        let b = random_tensor(rng, &[5]);
        let w = random_tensor(rng, &[5]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, &w)
            },
            &[a, b],
            &opts(s),
        )
    })?;
    run("concat", &mut rng, &mut |rng| {
        let a = random_tensor(rng, &[2, 2]);
        let b = random_tensor(rng, &[3]);
        let w = random_tensor(rng, &[7]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                project(t, y, &w)
            },
            &[a, b],
            &opts(s),
        )
    })?;
    run("slice", &mut rng, &mut |rng| {
        let a = random_tensor(rng, &[3, 4]);
        let w = random_tensor(rng, &[2, 3]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.slice(v[0], 3, vec![2, 3])?;
                let y = t.reshape(y, vec![2, 3])?;
                project(t, y, &w)
            },
            &[a],
            &opts(s),
        )
    })?;
    run("concat_cols", &mut rng, &mut |rng| {
        let a = random_tensor(rng, &[3, 2]);
        let b = random_tensor(rng, &[3, 4]);
        let w = random_tensor(rng, &[3, 6]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                project(t, y, &w)
            },
            &[a, b],
            &opts(s),
        )
    })?;
    run("slice_cols", &mut rng, &mut |rng| {
        let a = random_tensor(rng, &[3, 5]);
        let w = random_tensor(rng, &[3, 2]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let y = t.slice_cols(v[0], 2, 2)?;
                project(t, y, &w)
            },
            &[a],
            &opts(s),
        )
    })?;
    run("gather_rows", &mut rng, &mut |rng| {
        let a = random_tensor(rng, &[4, 3]);
        let w = random_tensor(rng, &[5, 3]);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                // a repeated row checks that gradients add up
                let y = t.gather_rows(v[0], &[3, 0, 3, 1, 2])?;
                project(t, y, &w)
            },
            &[a],
            &opts(s),
        )
    })?;
    run("cross_entropy", &mut rng, &mut |rng| {
        let x = random_tensor(rng, &[4]);
        let class = rng.gen_range(0..4);
        let s = rng.gen();
        finite_difference_check(
            |t, v| {
                let p = t.softmax(v[0]);
                t.cross_entropy(p, class)
            },
            &[x],
            &opts(s),
        )
    })?;
    run("softmax_cross_entropy", &mut rng, &mut |rng| {
        let x = random_tensor(rng, &[4]);
        let class = rng.gen_range(0..4);
        let s = rng.gen();
        finite_difference_check(|t, v| t.softmax_cross_entropy(v[0], class), &[x], &opts(s))
    })?;
    Ok(results)
}
