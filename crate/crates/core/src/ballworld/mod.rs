//! Deterministic ball-and-bar simulator producing ground-truth trajectories.

mod physics;
mod templates;

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ndgrad::Tensor;
use crate::{FEATURE_DIM, FEATURE_LAYOUT_VERSION};

pub use physics::{ball_mass, integrate, max_overlap, mechanical_energy, BodyState, PhysicsParams};
pub use templates::{make_template, SceneTemplate, TemplateKind, TEMPLATE_NAMES};

/// Half-thickness of every bar.
pub const BAR_HALF_THICKNESS: f64 = 0.02;

/// Feature indices of the per-object layout.
pub mod feature {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const ROT: usize = 2;
    pub const MOVABLE: usize = 3;
    pub const SIZE: usize = 4;
    pub const SHAPE_BALL: usize = 5;
    pub const SHAPE_BAR: usize = 6;
    pub const RESERVED: usize = 7;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Ball,
    Bar,
}

/// One object of a scene. `size` is the radius of a ball or the half-length
/// of a bar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub size: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub rotation: f64,
    pub movable: bool,
    #[serde(default = "default_color")]
    pub color: String,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
}

fn default_color() -> String {
    "gray".into()
}

impl ObjectSpec {
    pub fn ball(x: f64, y: f64, radius: f64, color: &str) -> Self {
        Self {
            shape: Shape::Ball,
            size: radius,
            x,
            y,
            rotation: 0.0,
            movable: true,
            color: color.into(),
            vx: 0.0,
            vy: 0.0,
        }
    }

    pub fn bar(x: f64, y: f64, half_length: f64, rotation: f64) -> Self {
        Self {
            shape: Shape::Bar,
            size: half_length,
            x,
            y,
            rotation,
            movable: false,
            color: "black".into(),
            vx: 0.0,
            vy: 0.0,
        }
    }
}

/// The four static bars boxing in the unit square.
pub fn boxing_walls() -> Vec<ObjectSpec> {
    let a = 0.5 + BAR_HALF_THICKNESS;
    let up = std::f64::consts::FRAC_PI_2;
    vec![
        ObjectSpec::bar(0.5, 0.0, a, 0.0),
        ObjectSpec::bar(0.0, 0.5, a, up),
        ObjectSpec::bar(1.0, 0.5, a, up),
        ObjectSpec::bar(0.5, 1.0, a, 0.0),
    ]
}

/// A simulated trajectory in feature form.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    /// `[O, L, 8]` feature tensor.
    pub x: Tensor<f32>,
    pub template: String,
    pub seed: u64,
    pub offset: [f64; 2],
    pub colors: Vec<String>,
}

/// Runs a template instance drawn with `seed`.
pub fn simulate(template: &SceneTemplate, seed: u64) -> Result<TrajectoryRecord> {
    let objects = template.instance(seed)?;
    let states = integrate(&objects, &template.physics, template.frames)
        .map_err(|e| Error::Simulation(format!("template {} seed {seed}: {e}", template.name)))?;
    Ok(TrajectoryRecord {
        x: encode_features(&objects, &states)?,
        template: template.name.clone(),
        seed,
        offset: [0.0, 0.0],
        colors: objects.iter().map(|o| o.color.clone()).collect(),
    })
}

/// Encodes `states[l][o]` into an `[O, L, 8]` tensor.
pub fn encode_features(objects: &[ObjectSpec], states: &[Vec<BodyState>]) -> Result<Tensor<f32>> {
    let (o_n, l_n) = (objects.len(), states.len());
    if states.iter().any(|s| s.len() != o_n) {
        return Err(shape_err!("every frame must hold {o_n} object states"));
    }
    let mut x = Tensor::zeros(vec![o_n, l_n, FEATURE_DIM]);
    for (o, obj) in objects.iter().enumerate() {
        let start = states.first().map_or(obj.rotation, |s| s[o].rotation);
        let turns = (start / TAU).floor();
        for (l, frame) in states.iter().enumerate() {
            let s = &frame[o];
            let row = statics_row(obj);
            let off = (o * l_n + l) * FEATURE_DIM;
            let dst = &mut x.data_mut()[off..off + FEATURE_DIM];
            dst.copy_from_slice(&row);
            dst[feature::X] = s.x as f32;
            dst[feature::Y] = s.y as f32;
            dst[feature::ROT] = (s.rotation / TAU - turns) as f32;
        }
    }
    Ok(x)
}

fn statics_row(obj: &ObjectSpec) -> [f32; FEATURE_DIM] {
    let mut r = [0.0f32; FEATURE_DIM];
    r[feature::X] = obj.x as f32;
    r[feature::Y] = obj.y as f32;
    r[feature::ROT] = (obj.rotation / TAU).rem_euclid(1.0) as f32;
    r[feature::MOVABLE] = f32::from(u8::from(obj.movable));
    r[feature::SIZE] = obj.size as f32;
    match obj.shape {
        Shape::Ball => r[feature::SHAPE_BALL] = 1.0,
        Shape::Bar => r[feature::SHAPE_BAR] = 1.0,
    }
    r
}

/// Feature tensor holding every object at its specified pose for all `steps`.
/// Used as the immutable part of a sampling run.
pub fn statics_tensor(objects: &[ObjectSpec], steps: usize) -> Tensor<f32> {
    let mut x = Tensor::zeros(vec![objects.len(), steps, FEATURE_DIM]);
    for (o, obj) in objects.iter().enumerate() {
        let row = statics_row(obj);
        for l in 0..steps {
            let off = (o * steps + l) * FEATURE_DIM;
            x.data_mut()[off..off + FEATURE_DIM].copy_from_slice(&row);
        }
    }
    x
}

/// Object state for display, with its colour restored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplayState {
    pub shape: Shape,
    pub x: f64,
    pub y: f64,
    pub rotation: f64,
    pub size: f64,
    pub movable: bool,
    pub color: String,
}

/// Decodes `[O, L, 8]` features into `frames[l][o]` display states.
pub fn decode_features(x: &Tensor<f32>, colors: &[String], layout: u32) -> Result<Vec<Vec<DisplayState>>> {
    if layout != FEATURE_LAYOUT_VERSION {
        return Err(Error::Format(format!(
            "feature layout {layout} does not match supported version {FEATURE_LAYOUT_VERSION}"
        )));
    }
    if x.rank() != 3 || x.dims()[2] != FEATURE_DIM {
        return Err(shape_err!("trajectory tensor {:?}, expected [O, L, {FEATURE_DIM}]", x.dims()));
    }
    let (o_n, l_n) = (x.dims()[0], x.dims()[1]);
    if colors.len() != o_n {
        return Err(shape_err!("{} colours for {o_n} objects", colors.len()));
    }
    Ok((0..l_n)
        .map(|l| {
            (0..o_n)
                .map(|o| {
                    let f = |i| x.at(&[o, l, i]) as f64;
                    DisplayState {
                        shape: if f(feature::SHAPE_BAR) > f(feature::SHAPE_BALL) {
                            Shape::Bar
                        } else {
                            Shape::Ball
                        },
                        x: f(feature::X),
                        y: f(feature::Y),
                        rotation: f(feature::ROT) * TAU,
                        size: f(feature::SIZE),
                        movable: f(feature::MOVABLE) > 0.5,
                        color: colors[o].clone(),
                    }
                })
                .collect()
        })
        .collect())
}

/// Shifts every object, walls included, by `offset` at every frame.
pub fn augment_offset(record: &TrajectoryRecord, offset: [f64; 2]) -> TrajectoryRecord {
    let mut out = record.clone();
    let (dx, dy) = (offset[0] as f32, offset[1] as f32);
    for row in out.x.data_mut().chunks_exact_mut(FEATURE_DIM) {
        row[feature::X] += dx;
        row[feature::Y] += dy;
    }
    out.offset = [record.offset[0] + offset[0], record.offset[1] + offset[1]];
    out
}

#[cfg(test)]
mod tests;
