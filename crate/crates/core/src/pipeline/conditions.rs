use rand::seq::index::sample;
use rand::Rng;

use crate::anchor::ConditionSet;
use crate::ballworld::feature;
use crate::error::{shape_err, Error, Result};
use crate::ndgrad::Tensor;
use crate::{CHANGEABLE_DIM, FEATURE_DIM};

/// Width of the conditioning-net input: condition values, presence bit,
/// movable flag, size and shape one-hot.
pub const COND_INPUT_DIM: usize = CHANGEABLE_DIM + 1 + 4;

/// Probabilities of drawing 0, 1 or 2 conditions per movable object.
pub fn check_probs(p: [f64; 3]) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("condition-count probabilities {p:?} must be a distribution")));
    }
    Ok(())
}

pub(crate) fn movable_flags(x: &Tensor<f32>) -> Vec<bool> {
    (0..x.dims()[0]).map(|o| x.at(&[o, 0, feature::MOVABLE]) > 0.5).collect()
}

/// Draws training conditions from the ground truth `x0` and assembles the
/// matching conditioning input.
pub fn sample_training_conditions<R: Rng>(
    x0: &Tensor<f32>,
    probs: [f64; 3],
    rng: &mut R,
) -> Result<(ConditionSet, Tensor<f32>)> {
    check_probs(probs)?;
    if x0.rank() != 3 || x0.dims()[2] != FEATURE_DIM {
        return Err(shape_err!("trajectory {:?}, expected [O, L, {FEATURE_DIM}]", x0.dims()));
    }
    let steps = x0.dims()[1];
    let mut cond = ConditionSet::empty();
    for (o, movable) in movable_flags(x0).into_iter().enumerate() {
        if !movable {
            continue;
        }
        let u: f64 = rng.random();
        let n = if u < probs[0] {
            0
        } else if u < probs[0] + probs[1] {
            1
        } else {
            2
        };
        let mut ls = sample(rng, steps, n.min(steps)).into_vec();
        ls.sort_unstable();
        for l in ls {
            cond.push(o, l, read_state(x0, o, l));
        }
    }
    let input = build_cond_input(x0, &cond)?;
    Ok((cond, input))
}

fn read_state(x: &Tensor<f32>, o: usize, l: usize) -> [f32; CHANGEABLE_DIM] {
    std::array::from_fn(|f| x.at(&[o, l, f]))
}

/// Conditions every movable object on its state at step 0.
pub fn initial_state_conditions(x0: &Tensor<f32>) -> ConditionSet {
    let mut cond = ConditionSet::empty();
    for (o, movable) in movable_flags(x0).into_iter().enumerate() {
        if movable {
            cond.push(o, 0, read_state(x0, o, 0));
        }
    }
    cond
}

/// `[O, L, 8]` input of the conditioning nets. Per entry: condition values
/// (zero where absent), presence bit, then the object's static features
/// read from `statics`.
pub fn build_cond_input(statics: &Tensor<f32>, cond: &ConditionSet) -> Result<Tensor<f32>> {
    if statics.rank() != 3 || statics.dims()[2] != FEATURE_DIM {
        return Err(shape_err!("statics {:?}, expected [O, L, {FEATURE_DIM}]", statics.dims()));
    }
    let (o_n, l_n) = (statics.dims()[0], statics.dims()[1]);
    cond.validate(&movable_flags(statics), l_n)?;
    let mut out = Tensor::zeros(vec![o_n, l_n, COND_INPUT_DIM]);
    for o in 0..o_n {
        for l in 0..l_n {
            for (k, f) in [feature::MOVABLE, feature::SIZE, feature::SHAPE_BALL, feature::SHAPE_BAR]
                .into_iter()
                .enumerate()
            {
                out.set(&[o, l, CHANGEABLE_DIM + 1 + k], statics.at(&[o, l, f]));
            }
        }
    }
    for c in &cond.conditions {
        for (f, &v) in c.values.iter().enumerate() {
            out.set(&[c.o, c.l, f], v);
        }
        out.set(&[c.o, c.l, CHANGEABLE_DIM], 1.0);
    }
    Ok(out)
}
