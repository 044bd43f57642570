use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::physics::{max_overlap, BodyState, PhysicsParams};
use super::{boxing_walls, ObjectSpec};
use crate::error::{Error, Result};

pub const TEMPLATE_NAMES: [&str; 4] = ["three-balls", "ball-on-bar", "funnel", "drop-two"];

const COLORS: [&str; 5] = ["red", "green", "blue", "purple", "orange"];
const RADIUS: (f64, f64) = (0.04, 0.07);
const CLEARANCE: f64 = 0.005;
const MAX_TRIES: usize = 10_000;

/// Scene layouts; each variant draws a task instance from its ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// Three balls dropped from rest.
    ThreeBalls,
    /// Two balls dropped onto a tilted bar.
    BallOnBar,
    /// Three balls dropped into a V of two tilted bars.
    Funnel,
    /// One ball dropped onto another.
    DropTwo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTemplate {
    pub name: String,
    pub kind: TemplateKind,
    /// Recorded trajectory length `L`.
    pub frames: usize,
    pub physics: PhysicsParams,
}

pub fn make_template(name: &str) -> Result<SceneTemplate> {
    let kind = match name {
        "three-balls" => TemplateKind::ThreeBalls,
        "ball-on-bar" => TemplateKind::BallOnBar,
        "funnel" => TemplateKind::Funnel,
        "drop-two" => TemplateKind::DropTwo,
        other => {
            return Err(Error::Usage(format!(
                "unknown template {other:?}; expected one of {}",
                TEMPLATE_NAMES.join(", ")
            )))
        }
    };
    Ok(SceneTemplate {
        name: name.into(),
        kind,
        frames: 64,
        physics: PhysicsParams::default(),
    })
}

impl SceneTemplate {
    pub fn with_frames(mut self, frames: usize) -> Self {
        self.frames = frames;
        self
    }

    /// Number of objects, walls included, in every instance.
    pub fn object_count(&self) -> usize {
        4 + match self.kind {
            TemplateKind::ThreeBalls => 3,
            TemplateKind::BallOnBar => 3,
            TemplateKind::Funnel => 5,
            TemplateKind::DropTwo => 2,
        }
    }

    /// Draws the initial objects of the task instance `seed`: balls first,
    /// then interior bars, then the four walls.
    pub fn instance(&self, seed: u64) -> Result<Vec<ObjectSpec>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bars = Vec::new();
        let mut balls = Vec::new();
        match self.kind {
            TemplateKind::ThreeBalls => {
                for i in 0..3 {
                    place(&mut balls, &bars, &mut rng, i, (0.1, 0.9), (0.3, 0.9))?;
                }
            }
            TemplateKind::BallOnBar => {
                let tilt = rng.random_range(0.15..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let cx = rng.random_range(0.35..0.65);
                let cy = rng.random_range(0.3..0.45);
                bars.push(ObjectSpec::bar(cx, cy, rng.random_range(0.2..0.3), tilt));
                for i in 0..2 {
                    place(&mut balls, &bars, &mut rng, i, (cx - 0.2, cx + 0.2), (cy + 0.2, 0.9))?;
                }
            }
            TemplateKind::Funnel => {
                let tilt = rng.random_range(0.4..0.6);
                let (half, cy) = (0.18, rng.random_range(0.4..0.5));
                bars.push(ObjectSpec::bar(0.28, cy, half, -tilt));
                bars.push(ObjectSpec::bar(0.72, cy, half, tilt));
                for i in 0..3 {
                    place(&mut balls, &bars, &mut rng, i, (0.12, 0.88), (cy + 0.2, 0.92))?;
                }
            }
            TemplateKind::DropTwo => {
                let r0 = rng.random_range(RADIUS.0..RADIUS.1);
                let r1 = rng.random_range(RADIUS.0..RADIUS.1);
                let x0 = rng.random_range(0.3..0.7);
                let y0 = rng.random_range(0.2..0.45);
                let x1 = x0 + rng.random_range(-0.8..0.8) * r0;
                let y1 = y0 + r0 + r1 + rng.random_range(0.1..0.3);
                balls.push(ObjectSpec::ball(x0, y0, r0, COLORS[0]));
                balls.push(ObjectSpec::ball(x1, y1, r1, COLORS[1]));
            }
        }
        let mut objects = balls;
        objects.extend(bars);
        objects.extend(boxing_walls());
        let states: Vec<BodyState> = objects.iter().map(rest_state).collect();
        let overlap = max_overlap(&objects, &states);
        if overlap > 1e-6 {
            return Err(Error::Simulation(format!(
                "template {} seed {seed}: initial overlap {overlap:.2e}",
                self.name
            )));
        }
        Ok(objects)
    }
}

fn rest_state(o: &ObjectSpec) -> BodyState {
    BodyState {
        x: o.x,
        y: o.y,
        rotation: o.rotation,
        vx: o.vx,
        vy: o.vy,
    }
}

/// Rejection-samples a ball that clears the walls, bars and earlier balls.
fn place(
    balls: &mut Vec<ObjectSpec>,
    bars: &[ObjectSpec],
    rng: &mut ChaCha8Rng,
    index: usize,
    xr: (f64, f64),
    yr: (f64, f64),
) -> Result<()> {
    let mut scene: Vec<ObjectSpec> = balls.iter().chain(bars).cloned().collect();
    scene.extend(boxing_walls());
    for _ in 0..MAX_TRIES {
        let r = rng.random_range(RADIUS.0..RADIUS.1);
        let x = rng.random_range(xr.0.max(0.02 + r)..xr.1.min(0.98 - r));
        let y = rng.random_range(yr.0.max(0.02 + r)..yr.1.min(0.98 - r));
        let mut probe = ObjectSpec::ball(x, y, r + CLEARANCE, COLORS[index % COLORS.len()]);
        let mut trial = vec![probe.clone()];
        trial.extend(scene.iter().cloned().map(|mut o| {
            o.movable = false;
            o
        }));
        let states: Vec<BodyState> = trial.iter().map(rest_state).collect();
        if max_overlap(&trial, &states) == 0.0 {
            probe.size = r;
            balls.push(probe);
            return Ok(());
        }
    }
    Err(Error::Simulation("could not place a ball without overlap".into()))
}
