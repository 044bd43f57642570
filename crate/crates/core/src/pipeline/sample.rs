use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::conditions::{build_cond_input, movable_flags};
use crate::acnet::Checkpoint;
use crate::anchor::{apply_anchor, ConditionSet};
use crate::error::{shape_err, Result};
use crate::ndgrad::{Tape, Tensor};
use crate::schedule::{posterior_step, x0_from_v, DenoiseMask, NoiseSchedule, ScheduleConfig};
use crate::{CHANGEABLE_DIM, FEATURE_DIM};

/// Anything that estimates the clean trajectory from a noisy one.
pub trait Denoiser: Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Estimate of `x0`; only the masked entries are read by the sampler.
    fn predict_x0(&self, x_t: &Tensor<f32>, t: usize, cond_input: &Tensor<f32>, mask: &DenoiseMask) -> Result<Tensor<f32>>;
}

/// A trained network predicting `v`.
pub struct ModelDenoiser<'a> {
    ckpt: &'a Checkpoint,
    sched: NoiseSchedule,
}

impl<'a> ModelDenoiser<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Result<Self> {
        Ok(Self {
            sched: NoiseSchedule::from_config(&ckpt.header.schedule)?,
            ckpt,
        })
    }
}

impl Denoiser for ModelDenoiser<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn predict_x0(&self, x_t: &Tensor<f32>, t: usize, cond_input: &Tensor<f32>, mask: &DenoiseMask) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.ckpt.params.bind(&mut tape, false);
        let xv = tape.constant(x_t.clone());
        let cv = tape.constant(cond_input.clone());
        let v = self.ckpt.net.forward(&mut tape, &p, xv, t, Some(cv))?;
        x0_from_v(x_t, tape.value(v), t, &self.sched, mask)
    }
}

/// Returns the ground truth regardless of its input; bounds what the
/// sampler itself can reconstruct.
pub struct OracleDenoiser<'a> {
    x0: &'a Tensor<f32>,
    sched: NoiseSchedule,
}

impl<'a> OracleDenoiser<'a> {
    pub fn new(x0: &'a Tensor<f32>, schedule: &ScheduleConfig) -> Result<Self> {
        Ok(Self {
            x0,
            sched: NoiseSchedule::from_config(schedule)?,
        })
    }
}

impl Denoiser for OracleDenoiser<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn predict_x0(&self, x_t: &Tensor<f32>, _t: usize, _cond: &Tensor<f32>, mask: &DenoiseMask) -> Result<Tensor<f32>> {
        if x_t.dims() != self.x0.dims() {
            return Err(shape_err!("oracle holds {:?}, asked for {:?}", self.x0.dims(), x_t.dims()));
        }
        let mut out = x_t.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            if mask.is_set(i) {
                *o = self.x0.data()[i];
            }
        }
        Ok(out)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise seed of one object, derived from what identifies it rather than
/// from its index, so that reordering objects reorders their noise.
fn object_seed(seed: u64, statics: &Tensor<f32>, cond: &ConditionSet, o: usize) -> u64 {
    let mut h = splitmix(seed);
    for f in CHANGEABLE_DIM..FEATURE_DIM {
        h = splitmix(h ^ u64::from(statics.at(&[o, 0, f]).to_bits()));
    }
    let mut own: Vec<_> = cond.conditions.iter().filter(|c| c.o == o).collect();
    own.sort_by_key(|c| c.l);
    for c in own {
        h = splitmix(h ^ c.l as u64);
        for v in c.values {
            h = splitmix(h ^ u64::from(v.to_bits()));
        }
    }
    h
}

struct ObjectNoise {
    rngs: Vec<Option<ChaCha8Rng>>,
    dims: Vec<usize>,
}

impl ObjectNoise {
    fn new(seed: u64, statics: &Tensor<f32>, cond: &ConditionSet) -> Self {
        let rngs = movable_flags(statics)
            .into_iter()
            .enumerate()
            .map(|(o, m)| m.then(|| ChaCha8Rng::seed_from_u64(object_seed(seed, statics, cond, o))))
            .collect();
        Self {
            rngs,
            dims: statics.dims().to_vec(),
        }
    }

    /// Standard normal draws on the changeable features of movable objects.
    fn draw(&mut self) -> Tensor<f32> {
        let (l_n, d) = (self.dims[1], self.dims[2]);
        let mut t = Tensor::zeros(self.dims.clone());
        for (o, rng) in self.rngs.iter_mut().enumerate() {
            let Some(rng) = rng else { continue };
            for l in 0..l_n {
                for f in 0..CHANGEABLE_DIM {
                    t.data_mut()[(o * l_n + l) * d + f] = StandardNormal.sample(rng);
                }
            }
        }
        t
    }
}

/// Reverse diffusion from pure noise on the changeable features of movable
/// objects; everything else is copied from `statics`. `snapshot` sees the
/// (anchored) `x0` estimate at each step.
pub fn sample_trajectories(
    den: &dyn Denoiser,
    statics: &Tensor<f32>,
    cond: &ConditionSet,
    seed: u64,
    hard: bool,
    mut snapshot: Option<&mut dyn FnMut(usize, &Tensor<f32>)>,
) -> Result<Tensor<f32>> {
    let cond_input = build_cond_input(statics, cond)?;
    let mask = DenoiseMask::from_trajectory(statics)?;
    let sched = den.schedule();
    let mut noise = ObjectNoise::new(seed, statics, cond);
    let init = noise.draw();
    let mut x = statics.clone();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if mask.is_set(i) {
            *v = init.data()[i];
        }
    }
    for t in (1..=sched.steps()).rev() {
        let mut x0 = den.predict_x0(&x, t, &cond_input, &mask)?;
        if hard {
            x0 = apply_anchor(&x0, cond)?;
        }
        if let Some(f) = snapshot.as_mut() {
            f(t, &x0);
        }
        let xi = if t > 1 { noise.draw() } else { Tensor::zeros(x.dims().to_vec()) };
        x = posterior_step(&x, &x0, t, sched, &mask, &xi)?;
    }
    Ok(x)
}

/// Largest deviation of `x` from any condition.
pub fn max_condition_violation(x: &Tensor<f32>, cond: &ConditionSet) -> f64 {
    cond.conditions
        .iter()
        .flat_map(|c| (0..CHANGEABLE_DIM).map(move |f| (x.at(&[c.o, c.l, f]) - c.values[f]).abs() as f64))
        .fold(0.0, f64::max)
}
