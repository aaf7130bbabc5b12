//! Contact geometry and state updates of the four task analogs.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::World;
use crate::geometry::{Pose, Wrench};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskState {
    /// Two-mass powder model; fine mass is `total − coarse`.
    Grind { coarse: f64, total: f64 },
    /// Row-major mark intensities, row index along +y, column along +x.
    Erase { marks: Vec<f64>, initial_total: f64, damaged: bool },
    Insert(InsertState),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PegState {
    /// Rigidly held by arm 0; the peg tip is the arm 0 origin.
    Held,
    /// Let go; tip position and yaw expressed in the hole frame.
    Released { tip: [f64; 3], yaw: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertState {
    pub peg: PegState,
    /// The tip passed through the hole mouth and is constrained by its walls.
    pub inside: bool,
    /// The tip was above the hole top surface at the previous substep.
    pub above: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Contact {
    pub wrench: Wrench,
    pub normal: f64,
}

/// "OSX" drawn with a 5×3 bitmap font, one stroke per cell.
pub fn initial_marks(grid: usize) -> Vec<f64> {
    const GLYPHS: [[&str; 5]; 3] = [
        ["###", "#.#", "#.#", "#.#", "###"],
        ["###", "#..", "###", "..#", "###"],
        ["#.#", "#.#", ".#.", "#.#", "#.#"],
    ];
    let mut marks = vec![0.0; grid * grid];
    // Text centered around row 12, columns 6..17 on the default 24 grid.
    let top = (grid / 2 + 3).min(grid.saturating_sub(1));
    let left = grid / 4;
    for (g, glyph) in GLYPHS.iter().enumerate() {
        for (r, line) in glyph.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                let row = top.wrapping_sub(r);
                let col = left + g * 4 + c;
                if ch == '#' && row < grid && col < grid {
                    marks[row * grid + col] = 1.0;
                }
            }
        }
    }
    marks
}

/// Spring-damper normal force against the plane `z = 0` plus smoothed
/// Coulomb friction on the tangential velocity.
fn plane_contact(world: &World, pos: &Vector3<f64>, vel: &Vector3<f64>) -> Contact {
    let pen = -pos.z;
    if pen <= 0.0 {
        return Contact::default();
    }
    let c = &world.config;
    let normal = (c.contact_stiffness * pen - c.contact_damping * vel.z).max(0.0);
    let vt = Vector3::new(vel.x, vel.y, 0.0);
    let speed = vt.norm();
    let scale = c.friction * normal / (speed * speed + c.friction_smoothing * c.friction_smoothing).sqrt();
    let force = Vector3::new(0.0, 0.0, normal) - scale * vt;
    Contact { wrench: Wrench { force, torque: Vector3::zeros() }, normal }
}

fn linear_velocity(world: &World, arm: usize) -> Vector3<f64> {
    let t = &world.arms[arm].twist;
    Vector3::new(t[0], t[1], t[2])
}

fn grind_contact(world: &World) -> Contact {
    let a = &world.arms[0];
    let vel = linear_velocity(world, 0);
    let mut contact = plane_contact(world, &a.pose.position, &vel);
    let r = a.pose.position.xy().norm();
    let radius = world.config.grind.bowl_radius;
    // Mortar rim: a 2 cm thick cylindrical wall up to 4 cm high.
    if r > radius && r < radius + 0.02 && a.pose.position.z < 0.04 {
        let n = -Vector3::new(a.pose.position.x, a.pose.position.y, 0.0) / r;
        let c = &world.config;
        let f = (c.contact_stiffness * (r - radius) + c.contact_damping * vel.dot(&n).min(0.0).abs()).max(0.0);
        contact.wrench.force += f * n;
    }
    contact
}

fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let w = a.rem_euclid(t);
    if w > std::f64::consts::PI { w - t } else { w }
}

/// Hole-frame geometry of the peg tip relative to the hole mouth.
struct PegGeometry {
    /// Lateral offset in the hole frame.
    lateral: Vector3<f64>,
    /// Positive below the hole top surface.
    depth: f64,
    /// Lateral offset including the corner displacement from yaw mismatch.
    effective: f64,
    yaw_error: f64,
}

fn peg_geometry(world: &World, tip: &Vector3<f64>, peg_yaw: f64) -> PegGeometry {
    let hole = &world.arms[1].pose;
    let local = hole.rotation.matrix().transpose() * (tip - hole.position);
    let lateral = Vector3::new(local.x, local.y, 0.0);
    let yaw_error = if world.task == crate::types::TaskId::CuboidInsert {
        // A square section is symmetric under quarter turns.
        let e = wrap_angle(peg_yaw - hole.yaw());
        let q = std::f64::consts::FRAC_PI_2;
        e - q * (e / q).round()
    } else {
        0.0
    };
    let w = world.config.insert.peg_half_width;
    let effective = lateral.norm() + w * std::f64::consts::SQRT_2 * yaw_error.abs();
    PegGeometry { lateral, depth: -local.z, effective, yaw_error }
}

/// Allowed lateral offset at a given depth, widening through the chamfer.
fn allowed_offset(world: &World, depth: f64) -> f64 {
    let p = &world.config.insert;
    p.clearance + p.chamfer * (1.0 - depth / p.chamfer).clamp(0.0, 1.0)
}

fn insert_contacts(world: &World) -> Vec<Contact> {
    let mut out = vec![Contact::default(); 2];
    let TaskState::Insert(state) = &world.task_state else { return out };
    if state.peg != PegState::Held {
        return out;
    }
    let c = &world.config;
    let peg = &world.arms[0];
    let g = peg_geometry(world, &peg.pose.position, peg.pose.yaw());
    if g.depth <= 0.0 {
        return out;
    }
    let hole_r = world.arms[1].pose.rotation.matrix();
    let rel_vel = hole_r.transpose() * (linear_velocity(world, 0) - linear_velocity(world, 1));
    let mut local_force = Vector3::zeros();
    let mut torque_z = 0.0;
    let mut normal = 0.0;
    if state.inside {
        let allowed = allowed_offset(world, g.depth);
        if g.effective > allowed {
            let pen = g.effective - allowed;
            let dir = if g.lateral.norm() > 1e-12 { g.lateral / g.lateral.norm() } else { Vector3::x() };
            let f = (c.contact_stiffness * pen + c.contact_damping * rel_vel.dot(&dir).max(0.0)).max(0.0);
            local_force -= f * dir;
            normal += f;
            if g.yaw_error != 0.0 {
                let w = c.insert.peg_half_width;
                torque_z -= c.contact_stiffness * w * w * g.yaw_error;
            }
        }
        let bottom = g.depth - c.insert.hole_depth;
        if bottom > 0.0 {
            let f = (c.contact_stiffness * bottom - c.contact_damping * rel_vel.z).max(0.0);
            local_force.z += f;
            normal += f;
        }
    } else {
        // Resting on the top surface outside the mouth.
        let f = (c.contact_stiffness * g.depth - c.contact_damping * rel_vel.z).max(0.0);
        local_force.z += f;
        normal += f;
    }
    let force = hole_r * local_force;
    let torque = Vector3::new(0.0, 0.0, torque_z);
    out[0] = Contact { wrench: Wrench { force, torque }, normal };
    out[1] = Contact { wrench: Wrench { force: -force, torque: -torque }, normal };
    out
}

/// Environment wrench on each arm for the current state.
pub(crate) fn contact_wrenches(world: &World, _h: f64) -> Vec<Contact> {
    match &world.task_state {
        TaskState::Grind { .. } => vec![grind_contact(world)],
        TaskState::Erase { .. } => {
            let a = &world.arms[0];
            vec![plane_contact(world, &a.pose.position, &linear_velocity(world, 0))]
        }
        TaskState::Insert(_) => insert_contacts(world),
    }
}

fn tangential_speed(world: &World) -> f64 {
    let v = linear_velocity(world, 0);
    v.xy().norm()
}

/// Post-integration task update over one substep of length `h`.
pub(crate) fn update_task(world: &mut World, h: f64) {
    let fmin = world.config.min_force;
    let speed = tangential_speed(world);
    let normal = world.arms[0].normal_force;
    let pos = world.arms[0].pose.position;
    let yaw = world.arms[0].pose.yaw();
    match &mut world.task_state {
        TaskState::Grind { coarse, total } => {
            if pos.xy().norm() <= world.config.grind.bowl_radius && normal > fmin {
                let rate = world.config.grind.rate * (normal - fmin) * speed * (*coarse / *total);
                *coarse -= (rate * h).min(*coarse);
            }
        }
        TaskState::Erase { marks, damaged, .. } => {
            if normal > world.config.damage_force {
                *damaged = true;
            }
            let loss = world.config.erase.rate * (normal - fmin).max(0.0) * speed * h;
            if loss > 0.0 {
                erase_footprint(marks, world.config.grid_size, &world.config.erase, &pos, yaw, loss);
            }
        }
        TaskState::Insert(_) => update_insert(world),
    }
}

fn erase_footprint(marks: &mut [f64], grid: usize, p: &super::EraseParams, pos: &Vector3<f64>, yaw: f64, loss: f64) {
    let cell = 2.0 * p.pad_half_extent / grid as f64;
    let (s, c) = yaw.sin_cos();
    let reach = p.eraser_half_x.hypot(p.eraser_half_y);
    let range = |lo: f64, hi: f64| {
        let a = ((lo + p.pad_half_extent) / cell).floor().max(0.0) as usize;
        let b = ((hi + p.pad_half_extent) / cell).floor().min(grid as f64 - 1.0);
        (a, b)
    };
    let (c0, c1) = range(pos.x - reach, pos.x + reach);
    let (r0, r1) = range(pos.y - reach, pos.y + reach);
    if c1 < 0.0 || r1 < 0.0 {
        return;
    }
    for row in r0..=r1 as usize {
        for col in c0..=c1 as usize {
            let x = -p.pad_half_extent + (col as f64 + 0.5) * cell - pos.x;
            let y = -p.pad_half_extent + (row as f64 + 0.5) * cell - pos.y;
            let (lx, ly) = (c * x + s * y, -s * x + c * y);
            if lx.abs() <= p.eraser_half_x && ly.abs() <= p.eraser_half_y {
                let m = &mut marks[row * grid + col];
                *m = (*m - loss).max(0.0);
            }
        }
    }
}

fn update_insert(world: &mut World) {
    let TaskState::Insert(state) = world.task_state else { return };
    let mut state = state;
    match state.peg {
        PegState::Held => {
            let tip = world.arms[0].pose.position;
            let g = peg_geometry(world, &tip, world.arms[0].pose.yaw());
            let mouth = world.config.insert.clearance + world.config.insert.chamfer;
            if g.depth <= 0.0 {
                state.inside = false;
            } else if state.above && g.effective <= mouth {
                state.inside = true;
            }
            state.above = g.depth <= 0.0;
            if world.arms[0].gripper > 0.5 {
                let hole = &world.arms[1].pose;
                let local = hole.rotation.matrix().transpose() * (tip - hole.position);
                let yaw = wrap_angle(world.arms[0].pose.yaw() - hole.yaw());
                state.peg = PegState::Released { tip: [local.x, local.y, local.z], yaw };
            }
        }
        PegState::Released { .. } => {}
    }
    world.task_state = TaskState::Insert(state);
}

/// World pose of the peg tip, following the hole part once released.
pub(crate) fn peg_pose(world: &World) -> Option<Pose> {
    let TaskState::Insert(state) = &world.task_state else { return None };
    Some(match state.peg {
        PegState::Held => world.arms[0].pose,
        PegState::Released { tip, yaw } => {
            let hole = &world.arms[1].pose;
            let position = hole.position + hole.rotation.matrix() * Vector3::from(tip);
            Pose::new(position, crate::geometry::RotationMatrix::rot_z(yaw) * hole.rotation)
        }
    })
}

pub(crate) fn insert_success(world: &World) -> bool {
    let TaskState::Insert(state) = &world.task_state else { return false };
    let PegState::Released { tip, yaw } = state.peg else { return false };
    if !state.inside {
        return false;
    }
    let p = &world.config.insert;
    let lateral = tip[0].hypot(tip[1]);
    let yaw_error = if world.task == crate::types::TaskId::CuboidInsert {
        let q = std::f64::consts::FRAC_PI_2;
        yaw - q * (yaw / q).round()
    } else {
        0.0
    };
    let effective = lateral + p.peg_half_width * std::f64::consts::SQRT_2 * yaw_error.abs();
    -tip[2] >= p.target_depth && effective <= p.clearance + 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{SimConfig, World};
    use crate::types::TaskId;

    #[test]
    fn marks_spell_three_glyphs() {
        let m = initial_marks(24);
        let lit = m.iter().filter(|&&v| v == 1.0).count();
        // O: 12, S: 11, X: 9
        assert_eq!(lit, 12 + 11 + 9);
        for row in 0..24 {
            for col in 0..24 {
                if m[row * 24 + col] > 0.0 {
                    assert!((11..=15).contains(&row) && (6..=16).contains(&col), "{row},{col}");
                }
            }
        }
    }

    #[test]
    fn grind_no_contact_no_change() {
        let mut w = World::new(TaskId::Grind, SimConfig::default(), 0);
        let before = w.task_state.clone();
        update_task(&mut w, 1e-3);
        assert_eq!(w.task_state, before);
    }

    #[test]
    fn grind_pressing_without_motion_no_change() {
        let mut w = World::new(TaskId::Grind, SimConfig::default(), 0);
        w.arms[0].pose.position = Vector3::new(0.0, 0.0, -0.002);
        w.arms[0].normal_force = 10.0;
        let before = w.task_state.clone();
        update_task(&mut w, 1e-3);
        assert_eq!(w.task_state, before);
    }

    #[test]
    fn grind_conserves_mass() {
        let mut w = World::new(TaskId::Grind, SimConfig::default(), 0);
        w.arms[0].pose.position = Vector3::new(0.01, 0.0, -0.002);
        w.arms[0].twist[1] = 0.1;
        w.arms[0].normal_force = 10.0;
        for _ in 0..1000 {
            update_task(&mut w, 1e-3);
        }
        let TaskState::Grind { coarse, total } = w.task_state else { unreachable!() };
        assert!(coarse < total && coarse >= 0.0);
        assert_eq!(total, w.config.grind.initial_coarse);
    }

    #[test]
    fn erase_hover_no_change_and_damage_flag() {
        let mut w = World::new(TaskId::Erase, SimConfig::default(), 0);
        w.arms[0].twist[0] = -0.1;
        let before = w.task_state.clone();
        update_task(&mut w, 1e-3);
        assert_eq!(w.task_state, before);
        w.arms[0].normal_force = 20.0;
        update_task(&mut w, 1e-3);
        assert!(w.damaged());
    }

    #[test]
    fn erase_footprint_only_under_eraser() {
        let mut marks = vec![1.0; 24 * 24];
        let p = crate::sim::EraseParams::default();
        erase_footprint(&mut marks, 24, &p, &Vector3::new(0.0, 0.0, 0.0), 0.0, 0.25);
        let touched: Vec<usize> = (0..marks.len()).filter(|&i| marks[i] < 1.0).collect();
        // 3 columns × 8 rows of 1 cm cells.
        assert_eq!(touched.len(), 3 * 8);
        assert!(touched.iter().all(|&i| (marks[i] - 0.75).abs() < 1e-15));
        let mut edge = vec![1.0; 24 * 24];
        erase_footprint(&mut edge, 24, &p, &Vector3::new(0.5, 0.5, 0.0), 0.0, 0.25);
        assert!(edge.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn insert_initially_fails_and_requires_release() {
        let mut w = World::new(TaskId::RoundInsert, SimConfig::default(), 3);
        assert!(!w.task_insert_check());
        let hole = w.arms[1].pose.position;
        // Enter from above, then sit at depth while still grasped.
        w.arms[0].pose.position = hole + Vector3::new(0.0, 0.0, 0.001);
        update_task(&mut w, 1e-3);
        w.arms[0].pose.position = hole - Vector3::new(0.0005, 0.0, 0.025);
        update_task(&mut w, 1e-3);
        assert!(!w.task_insert_check());
        w.arms[0].gripper = 1.0;
        update_task(&mut w, 1e-3);
        assert!(w.task_insert_check());
    }

    #[test]
    fn insert_top_surface_pushes_back() {
        let mut w = World::new(TaskId::RoundInsert, SimConfig::default(), 0);
        let hole = w.arms[1].pose.position;
        w.arms[0].pose.position = hole + Vector3::new(0.02, 0.0, -0.001);
        let c = contact_wrenches(&w, 1e-3);
        assert!(c[0].wrench.force.z > 0.0);
        assert_eq!(c[1].wrench.force, -c[0].wrench.force);
        assert!((c[0].normal - 5.0).abs() < 1e-9);
    }

    #[test]
    fn insert_wall_centers_peg() {
        let mut w = World::new(TaskId::RoundInsert, SimConfig::default(), 0);
        let hole = w.arms[1].pose;
        w.task_state = TaskState::Insert(InsertState { peg: PegState::Held, inside: true, above: false });
        let offset = hole.rotation.matrix() * Vector3::new(0.004, 0.0, -0.015);
        w.arms[0].pose.position = hole.position + offset;
        let c = contact_wrenches(&w, 1e-3);
        let local = hole.rotation.matrix().transpose() * c[0].wrench.force;
        assert!(local.x < 0.0);
        assert!((local.x + 5000.0 * 0.002).abs() < 1e-9);
    }

    #[test]
    fn cuboid_yaw_error_widens_offset() {
        let mut w = World::new(TaskId::CuboidInsert, SimConfig::default(), 0);
        let hole = w.arms[1].pose;
        w.arms[0].pose = Pose::new(hole.position, crate::geometry::RotationMatrix::rot_z(0.1) * hole.rotation);
        let g = peg_geometry(&w, &hole.position, w.arms[0].pose.yaw());
        assert!((g.yaw_error - 0.1).abs() < 1e-12);
        assert!(g.effective > 0.001);
        w.arms[0].pose.rotation = crate::geometry::RotationMatrix::rot_z(std::f64::consts::FRAC_PI_2) * hole.rotation;
        let g = peg_geometry(&w, &hole.position, w.arms[0].pose.yaw());
        assert!(g.yaw_error.abs() < 1e-12);
    }
}
