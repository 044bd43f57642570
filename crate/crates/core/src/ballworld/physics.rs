use serde::{Deserialize, Serialize};

use super::{ObjectSpec, Shape, BAR_HALF_THICKNESS};
use crate::error::{Error, Result};

/// Integrator and contact constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub gravity: f64,
    pub restitution: f64,
    pub friction: f64,
    /// Length of one physics step in seconds.
    pub dt: f64,
    /// Integration substeps per physics step.
    pub substeps: usize,
    /// Physics steps between recorded frames.
    pub frame_stride: usize,
    pub solver_iterations: usize,
    /// Approach speeds below this bounce without restitution.
    pub bounce_threshold: f64,
    /// Overlap left uncorrected to keep resting contacts stable.
    pub slop: f64,
    /// Overlap that counts as a failed simulation.
    pub max_overlap: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            restitution: 0.6,
            friction: 0.2,
            dt: 1.0 / 256.0,
            substeps: 32,
            frame_stride: 10,
            solver_iterations: 8,
            bounce_threshold: 0.05,
            slop: 1e-4,
            max_overlap: 2e-2,
        }
    }
}

/// Kinematic state of one object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub x: f64,
    pub y: f64,
    pub rotation: f64,
    pub vx: f64,
    pub vy: f64,
}

/// Mass of a ball; proportional to its area, 1 for radius 0.05.
pub fn ball_mass(radius: f64) -> f64 {
    (radius / 0.05).powi(2)
}

/// Kinetic plus potential energy of the movable objects.
pub fn mechanical_energy(objects: &[ObjectSpec], states: &[BodyState], gravity: f64) -> f64 {
    objects
        .iter()
        .zip(states)
        .filter(|(o, _)| o.movable)
        .map(|(o, s)| {
            let m = ball_mass(o.size);
            m * (0.5 * (s.vx * s.vx + s.vy * s.vy) + gravity * s.y)
        })
        .sum()
}

#[derive(Clone, Copy, Debug)]
struct Contact {
    a: usize,
    b: usize,
    nx: f64,
    ny: f64,
    depth: f64,
    bias: f64,
    jn: f64,
    jt: f64,
}

/// Signed overlap of a ball with a static bar, with the normal pointing from
/// the bar towards the ball.
fn ball_bar(ball: (f64, f64, f64), bar: &ObjectSpec, bar_state: &BodyState) -> Option<(f64, f64, f64)> {
    let (bx, by, r) = ball;
    let (c, s) = (bar_state.rotation.cos(), bar_state.rotation.sin());
    let (dx, dy) = (bx - bar_state.x, by - bar_state.y);
    let (px, py) = (dx * c + dy * s, -dx * s + dy * c);
    let (a, h) = (bar.size, BAR_HALF_THICKNESS);
    let (qx, qy) = (px.clamp(-a, a), py.clamp(-h, h));
    let (ex, ey) = (px - qx, py - qy);
    let dist = (ex * ex + ey * ey).sqrt();
    let (lx, ly, depth) = if dist > 0.0 {
        if dist >= r {
            return None;
        }
        (ex / dist, ey / dist, r - dist)
    } else {
        // centre inside the bar: leave through the nearest face
        let (fx, fy) = (a - px.abs(), h - py.abs());
        if fx < fy {
            (px.signum(), 0.0, r + fx)
        } else {
            (0.0, if py >= 0.0 { 1.0 } else { -1.0 }, r + fy)
        }
    };
    Some((lx * c - ly * s, lx * s + ly * c, depth))
}

/// Current overlap of movable ball `i` with object `j`, normal from `j` to `i`.
fn pair_overlap(objects: &[ObjectSpec], st: &[BodyState], j: usize, i: usize) -> Option<(f64, f64, f64)> {
    let (xi, yi, ri) = (st[i].x, st[i].y, objects[i].size);
    match objects[j].shape {
        Shape::Ball => {
            let (dx, dy) = (xi - st[j].x, yi - st[j].y);
            let rr = ri + objects[j].size;
            let d2 = dx * dx + dy * dy;
            if d2 >= rr * rr {
                return None;
            }
            let d = d2.sqrt();
            if d > 0.0 {
                Some((dx / d, dy / d, rr - d))
            } else {
                Some((0.0, 1.0, rr))
            }
        }
        Shape::Bar => ball_bar((xi, yi, ri), &objects[j], &st[j]),
    }
}

fn find_contacts(objects: &[ObjectSpec], st: &[BodyState], out: &mut Vec<Contact>) {
    out.clear();
    let n = objects.len();
    for i in 0..n {
        if !objects[i].movable {
            continue;
        }
        for j in 0..n {
            if j == i {
                continue;
            }
            if objects[j].shape == Shape::Ball && objects[j].movable && j < i {
                continue;
            }
            let hit = pair_overlap(objects, st, j, i);
            if let Some((nx, ny, depth)) = hit {
                // normal points from j to i
                out.push(Contact {
                    a: j,
                    b: i,
                    nx,
                    ny,
                    depth,
                    bias: 0.0,
                    jn: 0.0,
                    jt: 0.0,
                });
            }
        }
    }
}

/// Integrates `frames` recorded states starting from the objects' initial
/// positions and velocities.
pub fn integrate(objects: &[ObjectSpec], params: &PhysicsParams, frames: usize) -> Result<Vec<Vec<BodyState>>> {
    for o in objects {
        if !(o.size > 0.0) {
            return Err(Error::Config(format!("object size {} must be positive", o.size)));
        }
        if o.movable && o.shape == Shape::Bar {
            return Err(Error::Config("movable bars are not supported".into()));
        }
    }
    let inv_mass: Vec<f64> = objects
        .iter()
        .map(|o| if o.movable { 1.0 / ball_mass(o.size) } else { 0.0 })
        .collect();
    let mut st: Vec<BodyState> = objects
        .iter()
        .map(|o| BodyState {
            x: o.x,
            y: o.y,
            rotation: o.rotation,
            vx: o.vx,
            vy: o.vy,
        })
        .collect();
    let h = params.dt / params.substeps.max(1) as f64;
    let mut contacts = Vec::new();
    let mut out = Vec::with_capacity(frames);
    out.push(st.clone());
    for frame in 1..frames {
        for _ in 0..params.frame_stride * params.substeps.max(1) {
            for (s, &im) in st.iter_mut().zip(&inv_mass) {
                if im > 0.0 {
                    s.vy -= params.gravity * h;
                    s.x += s.vx * h;
                    s.y += s.vy * h;
                }
            }
            find_contacts(objects, &st, &mut contacts);
            if contacts.is_empty() {
                continue;
            }
            for c in contacts.iter_mut() {
                let vn = (st[c.b].vx - st[c.a].vx) * c.nx + (st[c.b].vy - st[c.a].vy) * c.ny;
                if vn < -params.bounce_threshold {
                    c.bias = -params.restitution * vn;
                }
            }
            for _ in 0..params.solver_iterations {
                for c in contacts.iter_mut() {
                    let (ia, ib) = (inv_mass[c.a], inv_mass[c.b]);
                    let meff = 1.0 / (ia + ib);
                    let (rvx, rvy) = (st[c.b].vx - st[c.a].vx, st[c.b].vy - st[c.a].vy);
                    let vn = rvx * c.nx + rvy * c.ny;
                    let total = (c.jn + (c.bias - vn) * meff).max(0.0);
                    let dj = total - c.jn;
                    c.jn = total;
                    apply(&mut st, c.a, c.b, ia, ib, dj * c.nx, dj * c.ny);

                    let (tx, ty) = (-c.ny, c.nx);
                    let (rvx, rvy) = (st[c.b].vx - st[c.a].vx, st[c.b].vy - st[c.a].vy);
                    let vt = rvx * tx + rvy * ty;
                    let lim = params.friction * c.jn;
                    let total = (c.jt - vt * meff).clamp(-lim, lim);
                    let dj = total - c.jt;
                    c.jt = total;
                    apply(&mut st, c.a, c.b, ia, ib, dj * tx, dj * ty);
                }
            }
            for c in &contacts {
                let Some((nx, ny, depth)) = pair_overlap(objects, &st, c.a, c.b) else {
                    continue;
                };
                let corr = (depth - params.slop).max(0.0);
                if corr == 0.0 {
                    continue;
                }
                let (ia, ib) = (inv_mass[c.a], inv_mass[c.b]);
                let share = corr / (ia + ib);
                st[c.a].x -= share * ia * nx;
                st[c.a].y -= share * ia * ny;
                st[c.b].x += share * ib * nx;
                st[c.b].y += share * ib * ny;
            }
        }
        find_contacts(objects, &st, &mut contacts);
        if let Some(c) = contacts.iter().find(|c| c.depth > params.max_overlap) {
            return Err(Error::Simulation(format!(
                "objects {} and {} overlap by {:.4} at frame {frame}",
                c.a, c.b, c.depth
            )));
        }
        if st.iter().any(|s| !(s.x.is_finite() && s.y.is_finite())) {
            return Err(Error::Simulation(format!("non-finite state at frame {frame}")));
        }
        out.push(st.clone());
    }
    Ok(out)
}

fn apply(st: &mut [BodyState], a: usize, b: usize, ia: f64, ib: f64, px: f64, py: f64) {
    st[a].vx -= px * ia;
    st[a].vy -= py * ia;
    st[b].vx += px * ib;
    st[b].vy += py * ib;
}

/// Largest overlap between any movable ball and another object.
pub fn max_overlap(objects: &[ObjectSpec], states: &[BodyState]) -> f64 {
    let mut contacts = Vec::new();
    find_contacts(objects, states, &mut contacts);
    contacts.iter().map(|c| c.depth).fold(0.0, f64::max)
}
