//! Hard conditioning: piecewise-linear trajectory shifts that pass every
//! object trajectory exactly through its conditioned states, plus the
//! two-term anchored training loss.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{CustomBackward, Scalar, Tape, Tensor, Var};
use crate::schedule::DenoiseMask;
use crate::{CHANGEABLE_DIM, FEATURE_LAYOUT_VERSION};

/// A required changeable-feature state of object `o` at trajectory step `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub o: usize,
    pub l: usize,
    pub values: [f32; CHANGEABLE_DIM],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    #[serde(default = "layout_version")]
    pub feature_layout: u32,
    pub conditions: Vec<Condition>,
}

fn layout_version() -> u32 {
    FEATURE_LAYOUT_VERSION
}

impl ConditionSet {
    pub fn new(conditions: Vec<Condition>) -> Self {
        Self {
            feature_layout: FEATURE_LAYOUT_VERSION,
            conditions,
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn push(&mut self, o: usize, l: usize, values: [f32; CHANGEABLE_DIM]) {
        self.conditions.push(Condition { o, l, values });
    }

    /// Conditions grouped per object, sorted by step.
    pub fn by_object(&self) -> BTreeMap<usize, Vec<&Condition>> {
        let mut map: BTreeMap<usize, Vec<&Condition>> = BTreeMap::new();
        for c in &self.conditions {
            map.entry(c.o).or_default().push(c);
        }
        for v in map.values_mut() {
            v.sort_by_key(|c| c.l);
        }
        map
    }

    /// Checks the set against a trajectory of `movable.len()` objects and
    /// `steps` steps.
    pub fn validate(&self, movable: &[bool], steps: usize) -> Result<()> {
        if self.feature_layout != FEATURE_LAYOUT_VERSION {
            return Err(Error::Format(format!(
                "condition feature layout {} does not match {}",
                self.feature_layout, FEATURE_LAYOUT_VERSION
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.conditions {
            if c.o >= movable.len() {
                return Err(Error::Usage(format!("condition on object {} of {}", c.o, movable.len())));
            }
            if c.l >= steps {
                return Err(Error::Usage(format!("condition step {} outside [0, {}]", c.l, steps - 1)));
            }
            if !movable[c.o] {
                return Err(Error::Usage(format!("condition on non-movable object {}", c.o)));
            }
            if c.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Usage(format!("non-finite condition value at ({}, {})", c.o, c.l)));
            }
            if !seen.insert((c.o, c.l)) {
                return Err(Error::Usage(format!("duplicate condition at ({}, {})", c.o, c.l)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Interpolation weights of the conditions of one object at step `l`.
/// `steps` must be sorted ascending. Returns up to two `(index, weight)`.
fn weights(steps: &[usize], l: usize) -> [(usize, f64); 2] {
    let n = steps.len();
    if l <= steps[0] {
        return [(0, 1.0), (0, 0.0)];
    }
    if l >= steps[n - 1] {
        return [(n - 1, 1.0), (n - 1, 0.0)];
    }
    let i = steps.partition_point(|&s| s <= l) - 1;
    let lam = (l - steps[i]) as f64 / (steps[i + 1] - steps[i]) as f64;
    [(i, 1.0 - lam), (i + 1, lam)]
}

fn movable_flags<T: Scalar>(x: &Tensor<T>) -> Vec<bool> {
    (0..x.dims()[0]).map(|o| x.at(&[o, 0, 3]).as_f64() > 0.5).collect()
}

fn check_input<T: Scalar>(x_hat: &Tensor<T>, cond: &ConditionSet) -> Result<()> {
    if x_hat.rank() != 3 || x_hat.dims()[2] <= 3 {
        return Err(shape_err!("anchoring expects [O, L, d>3], got {:?}", x_hat.dims()));
    }
    cond.validate(&movable_flags(x_hat), x_hat.dims()[1])
}

/// Per-object, per-step shift of the changeable features, `[O, L, 3]`.
pub fn compute_shift_field<T: Scalar>(x_hat: &Tensor<T>, cond: &ConditionSet) -> Result<Tensor<T>> {
    check_input(x_hat, cond)?;
    let (no, nl) = (x_hat.dims()[0], x_hat.dims()[1]);
    let mut shift = Tensor::zeros([no, nl, CHANGEABLE_DIM]);
    for (o, cs) in cond.by_object() {
        let steps: Vec<usize> = cs.iter().map(|c| c.l).collect();
        let deltas: Vec<[f64; CHANGEABLE_DIM]> = cs
            .iter()
            .map(|c| std::array::from_fn(|f| c.values[f] as f64 - x_hat.at(&[o, c.l, f]).as_f64()))
            .collect();
        for l in 0..nl {
            let w = weights(&steps, l);
            for f in 0..CHANGEABLE_DIM {
                let s = w[0].1 * deltas[w[0].0][f] + w[1].1 * deltas[w[1].0][f];
                shift.set(&[o, l, f], T::from_f64(s));
            }
        }
    }
    Ok(shift)
}

/// `x_hat + S` on changeable features of conditioned objects. Conditioned
/// entries are written exactly; unconditioned objects are copied bit-for-bit.
pub fn apply_anchor<T: Scalar>(x_hat: &Tensor<T>, cond: &ConditionSet) -> Result<Tensor<T>> {
    let shift = compute_shift_field(x_hat, cond)?;
    let mut out = x_hat.clone();
    let objects = cond.by_object();
    for (&o, cs) in &objects {
        for l in 0..x_hat.dims()[1] {
            for f in 0..CHANGEABLE_DIM {
                let v = x_hat.at(&[o, l, f]) + shift.at(&[o, l, f]);
                out.set(&[o, l, f], v);
            }
        }
        for c in cs {
            for f in 0..CHANGEABLE_DIM {
                out.set(&[o, c.l, f], T::from_f64(c.values[f] as f64));
            }
        }
    }
    Ok(out)
}

struct AnchorBackward {
    /// Per conditioned object: sorted condition steps.
    objects: Vec<(usize, Vec<usize>)>,
    steps: usize,
    features: usize,
}

impl<T: Scalar> CustomBackward<T> for AnchorBackward {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        // out = x + sum_i w_i(l) (c_i - x[l_i]), so
        // dx[l_i] -= sum_l w_i(l) g[l] on top of the identity path.
        let mut gx = grad.to_vec();
        let idx = |o: usize, l: usize, f: usize| (o * self.steps + l) * self.features + f;
        for (o, steps) in &self.objects {
            let mut acc = vec![[0.0f64; CHANGEABLE_DIM]; steps.len()];
            for l in 0..self.steps {
                for (i, w) in weights(steps, l) {
                    if w == 0.0 {
                        continue;
                    }
                    for f in 0..CHANGEABLE_DIM {
                        acc[i][f] += w * grad[idx(*o, l, f)].as_f64();
                    }
                }
            }
            for (i, &li) in steps.iter().enumerate() {
                for f in 0..CHANGEABLE_DIM {
                    gx[idx(*o, li, f)] -= T::from_f64(acc[i][f]);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Differentiable anchoring recorded on a tape.
pub fn anchor_on_tape<T: Scalar>(tape: &mut Tape<T>, x_hat: Var, cond: &ConditionSet) -> Result<Var> {
    let value = apply_anchor(tape.value(x_hat), cond)?;
    let dims = value.dims().to_vec();
    let objects = cond
        .by_object()
        .into_iter()
        .map(|(o, cs)| (o, cs.iter().map(|c| c.l).collect()))
        .collect();
    let rule = AnchorBackward {
        objects,
        steps: dims[1],
        features: dims[2],
    };
    Ok(tape.custom(vec![x_hat], value, Box::new(rule)))
}

/// The anchored loss and its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchoredLoss {
    pub total: f64,
    /// `MSE(x_hat, x_hat_shifted)`.
    pub shift_penalty: f64,
    /// `MSE(x_hat_shifted, x0)`.
    pub reconstruction: f64,
}

fn masked_mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: &DenoiseMask) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        if mask.is_set(i) {
            let d = a.data()[i].as_f64() - b.data()[i].as_f64();
            s += d * d;
        }
    }
    s / mask.count() as f64
}

/// `MSE(x_hat, shifted) + MSE(shifted, x0)` averaged over masked entries.
pub fn anchored_loss<T: Scalar>(
    x_hat: &Tensor<T>,
    x0: &Tensor<T>,
    cond: &ConditionSet,
    mask: &DenoiseMask,
) -> Result<AnchoredLoss> {
    if mask.count() == 0 {
        return Err(Error::Usage("anchored loss over an empty mask".into()));
    }
    if x_hat.dims() != mask.dims() || x0.dims() != mask.dims() {
        return Err(shape_err!("anchored loss: {:?} / {:?} / mask {:?}", x_hat.dims(), x0.dims(), mask.dims()));
    }
    let shifted = apply_anchor(x_hat, cond)?;
    let shift_penalty = masked_mse(x_hat, &shifted, mask);
    let reconstruction = masked_mse(&shifted, x0, mask);
    Ok(AnchoredLoss {
        total: shift_penalty + reconstruction,
        shift_penalty,
        reconstruction,
    })
}

/// Tape vars of the anchored loss: `(total, shift_penalty, reconstruction)`.
/// With `hard = false` no anchoring happens and the penalty is absent.
pub fn anchored_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x_hat: Var,
    x0: &Tensor<T>,
    cond: &ConditionSet,
    mask: &DenoiseMask,
    hard: bool,
) -> Result<(Var, Option<Var>, Var)> {
    if mask.count() == 0 {
        return Err(Error::Usage("anchored loss over an empty mask".into()));
    }
    let m = mask.cast::<T>();
    let target = tape.constant(x0.clone());
    if !hard {
        let rec = tape.masked_mse(x_hat, target, &m)?;
        return Ok((rec, None, rec));
    }
    let shifted = anchor_on_tape(tape, x_hat, cond)?;
    let pen = tape.masked_mse(x_hat, shifted, &m)?;
    let rec = tape.masked_mse(shifted, target, &m)?;
    let total = tape.add(pen, rec)?;
    Ok((total, Some(pen), rec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(no: usize, nl: usize, movable: &[bool]) -> Tensor<f64> {
        let mut x = Tensor::zeros([no, nl, 8]);
        for o in 0..no {
            for l in 0..nl {
                for f in 0..3 {
                    x.set(&[o, l, f], 0.1 * o as f64 + 0.01 * l as f64 + 0.001 * f as f64);
                }
                x.set(&[o, l, 3], if movable[o] { 1.0 } else { 0.0 });
            }
        }
        x
    }

    #[test]
    fn empty_set_gives_zero_shift() {
        let x = traj(2, 6, &[true, true]);
        let s = compute_shift_field(&x, &ConditionSet::empty()).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert_eq!(apply_anchor(&x, &ConditionSet::empty()).unwrap(), x);
    }

    #[test]
    fn single_condition_shifts_whole_trajectory() {
        let x = traj(2, 6, &[true, true]);
        let v = x.at(&[1, 3, 0]) as f32 + 0.1;
        let mut cond = ConditionSet::empty();
        cond.push(1, 3, [v, x.at(&[1, 3, 1]) as f32, x.at(&[1, 3, 2]) as f32]);
        let s = compute_shift_field(&x, &cond).unwrap();
        for l in 0..6 {
            assert!((s.at(&[1, l, 0]) - 0.1).abs() < 1e-7);
            assert!(s.at(&[1, l, 1]).abs() < 1e-7);
            assert_eq!(s.at(&[0, l, 0]), 0.0);
        }
    }

    #[test]
    fn two_conditions_interpolate_linearly() {
        let x: Tensor<f64> = Tensor::from_f64([1, 11, 8], &{
            let mut d = vec![0.0; 88];
            for l in 0..11 {
                d[l * 8 + 3] = 1.0;
            }
            d
        })
        .unwrap();
        let mut cond = ConditionSet::empty();
        cond.push(0, 0, [0.0, 0.0, 0.0]);
        cond.push(0, 10, [0.2, 0.0, 0.0]);
        let s = compute_shift_field(&x, &cond).unwrap();
        assert!((s.at(&[0, 5, 0]) - 0.1).abs() < 1e-7);
        let y = apply_anchor(&x, &cond).unwrap();
        assert!((y.at(&[0, 10, 0]) - 0.2).abs() < 1e-7);
    }

    #[test]
    fn non_movable_condition_is_rejected() {
        let x = traj(2, 4, &[true, false]);
        let mut cond = ConditionSet::empty();
        cond.push(1, 0, [0.0; 3]);
        assert!(matches!(compute_shift_field(&x, &cond), Err(Error::Usage(_))));
    }

    #[test]
    fn hand_computed_two_term_loss() {
        // one object, one step, first feature off by 0.2 and conditioned back
        let mut x0 = Tensor::<f64>::zeros([1, 1, 8]);
        x0.set(&[0, 0, 3], 1.0);
        let mut x_hat = x0.clone();
        x_hat.set(&[0, 0, 0], 0.2);
        let mut cond = ConditionSet::empty();
        cond.push(0, 0, [0.0, 0.0, 0.0]);
        let mask = DenoiseMask::from_movable(&[true], 1, 8);
        let loss = anchored_loss(&x_hat, &x0, &cond, &mask).unwrap();
        assert!((loss.shift_penalty - 0.04 / 3.0).abs() < 1e-12);
        assert!(loss.reconstruction.abs() < 1e-12);
        assert!((loss.total - 0.04 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_usage_error() {
        let x = traj(1, 2, &[false]);
        let mask = DenoiseMask::from_movable(&[false], 2, 8);
        assert!(matches!(
            anchored_loss(&x, &x, &ConditionSet::empty(), &mask),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn json_shape() {
        let mut cond = ConditionSet::empty();
        cond.push(2, 5, [0.5, 0.25, 0.0]);
        let s = serde_json::to_value(&cond).unwrap();
        assert_eq!(s["feature_layout"], 1);
        assert_eq!(s["conditions"][0]["o"], 2);
        assert_eq!(s["conditions"][0]["l"], 5);
        assert_eq!(s["conditions"][0]["values"][1], 0.25);
    }
}
