use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::Usage(format!("finite_diff_check needs a scalar function, got {:?}", v.dims())));
    }
    Ok(v.item())
}

/// Analytic gradient of a scalar tape function at `x`.
pub fn analytic_grad<F>(f: &F, x: &Tensor<f64>) -> Result<Tensor<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    Ok(tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.dims().to_vec())))
}

/// Max over all coordinates of the relative error between the tape gradient
/// and a central difference with step `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_coords(f, x, eps, &coords)
}

/// As [`finite_diff_check`], restricted to the given flat coordinates.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let grad = analytic_grad(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(grad.data()[i], numeric));
    }
    Ok(worst)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    /// Indices of the inputs the op is differentiated against.
    wrt: Vec<usize>,
    op: OpFn,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    wrt: &[usize],
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        wrt: wrt.to_vec(),
        op: Box::new(op),
    }
}

/// Maps uniform draws away from the clamp kinks at 0 and 1.
fn off_kinks(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 || (v - 1.0).abs() < 0.05 { v + 0.2 } else { v })
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut n = |dims: &[usize]| Tensor::<f64>::randn(dims.to_vec(), &mut rng);
    let mut mask = Tensor::<f64>::zeros(vec![2, 3, 4]);
    for (i, v) in mask.data_mut().iter_mut().enumerate() {
        *v = if i % 3 == 0 { 0.0 } else { 1.0 };
    }
    let m01 = n(&[2, 3, 1]).map(|v| 1.0 / (1.0 + (-v).exp()));
    vec![
        case("affine", vec![n(&[2, 3, 4]), n(&[5, 4]), n(&[5])], &[0, 1, 2], |t, v| t.affine(v[0], v[1], Some(v[2]))),
        case("conv1d", vec![n(&[2, 6, 3]), n(&[5, 4, 3]), n(&[4])], &[0, 1, 2], |t, v| t.conv1d(v[0], v[1], v[2], 1)),
        case("conv1d_stride2", vec![n(&[2, 6, 3]), n(&[3, 4, 3]), n(&[4])], &[0, 1, 2], |t, v| {
            t.conv1d(v[0], v[1], v[2], 2)
        }),
        case("group_norm", vec![n(&[2, 3, 6]), n(&[6]), n(&[6])], &[0, 1, 2], |t, v| {
            t.group_norm(v[0], 2, v[1], v[2], super::GN_EPS)
        }),
        case("mish", vec![n(&[3, 5]).map(|x| 3.0 * x)], &[0], |t, v| Ok(t.mish(v[0]))),
        case("softmax_lastdim", vec![n(&[3, 5])], &[0], |t, v| t.softmax_lastdim(v[0])),
        case("attention", vec![n(&[3, 2, 4]), n(&[3, 2, 4]), n(&[3, 2, 4])], &[0, 1, 2], |t, v| {
            t.attention(v[0], v[1], v[2], 2)
        }),
        case("concat_lastdim", vec![n(&[2, 3]), n(&[2, 4])], &[0, 1], |t, v| t.concat_lastdim(v[0], v[1])),
        case("slice_lastdim", vec![n(&[2, 3, 5])], &[0], |t, v| t.slice_lastdim(v[0], 1, 4)),
        case("add", vec![n(&[2, 3]), n(&[2, 3])], &[0, 1], |t, v| t.add(v[0], v[1])),
        case("sub", vec![n(&[2, 3]), n(&[2, 3])], &[0, 1], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![n(&[2, 3]), n(&[2, 3])], &[0, 1], |t, v| t.mul(v[0], v[1])),
        case("add_lastdim", vec![n(&[2, 3, 4]), n(&[4])], &[0, 1], |t, v| t.add_lastdim(v[0], v[1])),
        case("scale", vec![n(&[2, 3])], &[0], |t, v| Ok(t.scale(v[0], -1.7))),
        case("add_scalar", vec![n(&[2, 3])], &[0], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        case("clamp01", vec![off_kinks(n(&[4, 5]).map(|x| 0.5 + 0.6 * x))], &[0], |t, v| Ok(t.clamp01(v[0]))),
        case("upsample2", vec![n(&[2, 3, 4])], &[0], |t, v| t.upsample2(v[0])),
        case("swap01", vec![n(&[2, 3, 4])], &[0], |t, v| t.swap01(v[0])),
        case("reshape", vec![n(&[2, 3, 4])], &[0], |t, v| t.reshape(v[0], vec![6, 4])),
        case("sum", vec![n(&[2, 3])], &[0], |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![n(&[2, 3])], &[0], |t, v| Ok(t.mean(v[0]))),
        case("masked_mse", vec![n(&[2, 3, 4]), n(&[2, 3, 4])], &[0, 1], move |t, v| t.masked_mse(v[0], v[1], &mask)),
        case("film", vec![n(&[2, 3, 4]), n(&[2, 3, 4]), n(&[2, 3, 4]), m01], &[0, 1, 2, 3], |t, v| {
            t.film(v[0], v[1], v[2], v[3])
        }),
    ]
}

/// Finite-difference check of every differentiable tape op against each of
/// its inputs on random inputs. Returns `(op, max relative error)`.
pub fn check_all_ops(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    op_cases(seed)
        .into_iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for &i in &c.wrt {
                // a fixed random projection makes the scalar depend on every output
                let out_dims = {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = c.inputs.iter().map(|x| tape.constant(x.clone())).collect();
                    let y = (c.op)(&mut tape, &vars)?;
                    tape.value(y).dims().to_vec()
                };
                let proj = {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
                    Tensor::<f64>::randn(out_dims, &mut rng)
                };
                let f = |tape: &mut Tape<f64>, x: Var| {
                    let vars: Vec<Var> = c
                        .inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| if j == i { x } else { tape.constant(t.clone()) })
                        .collect();
                    let y = (c.op)(tape, &vars)?;
                    let p = tape.constant(proj.clone());
                    let yp = tape.mul(y, p)?;
                    Ok(tape.sum(yp))
                };
                worst = worst.max(finite_diff_check(f, &c.inputs[i], eps)?);
            }
            Ok((c.name, worst))
        })
        .collect()
}
