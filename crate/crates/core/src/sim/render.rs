//! Top-down rasterization of the task state into a `G×G` grid in [0, 1].

use super::tasks::{peg_pose, TaskState};
use super::World;
use crate::types::TaskId;

const SUPERSAMPLE: usize = 3;

/// Area-averaged coverage of `shade(x, y)` over each cell of a square view
/// of half extent `half`. Rows run along +y, columns along +x.
fn rasterize(grid: usize, half: f64, shade: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let cell = 2.0 * half / grid as f64;
    let sub = cell / SUPERSAMPLE as f64;
    let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut out = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let mut acc = 0.0;
            for i in 0..SUPERSAMPLE {
                for j in 0..SUPERSAMPLE {
                    let x = -half + col as f64 * cell + (j as f64 + 0.5) * sub;
                    let y = -half + row as f64 * cell + (i as f64 + 0.5) * sub;
                    acc += shade(x, y);
                }
            }
            out.push((acc / norm).clamp(0.0, 1.0));
        }
    }
    out
}

pub fn render_grid(world: &World) -> Vec<f64> {
    let g = world.config.grid_size;
    match &world.task_state {
        TaskState::Grind { coarse, total } => {
            let p = &world.config.grind;
            let frac = coarse / total;
            rasterize(g, p.view_half_extent, |x, y| {
                let r = x.hypot(y);
                if r <= p.pile_radius {
                    frac
                } else if (r - p.bowl_radius).abs() <= 0.003 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        TaskState::Erase { marks, .. } => marks.clone(),
        TaskState::Insert(_) => {
            let p = &world.config.insert;
            let hole = world.arms[1].pose;
            let peg = peg_pose(world).unwrap_or(world.arms[0].pose);
            let cuboid = world.task == TaskId::CuboidInsert;
            let (hs, hc) = hole.yaw().sin_cos();
            let (ps, pc) = peg.yaw().sin_cos();
            let inner = p.peg_half_width + p.clearance;
            let outer = inner + 0.006;
            // Distance measure: Euclidean for round parts, Chebyshev in the
            // part frame for square ones.
            let dist = |x: f64, y: f64, s: f64, c: f64| {
                let (lx, ly) = (c * x + s * y, -s * x + c * y);
                if cuboid { lx.abs().max(ly.abs()) } else { lx.hypot(ly) }
            };
            rasterize(g, p.view_half_extent, |x, y| {
                let dp = dist(x - peg.position.x, y - peg.position.y, ps, pc);
                if dp <= p.peg_half_width {
                    return 1.0;
                }
                let dh = dist(x - hole.position.x, y - hole.position.y, hs, hc);
                if dh >= inner && dh <= outer { 0.5 } else { 0.0 }
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;

    #[test]
    fn shapes_ranges_and_determinism() {
        for task in TaskId::ALL {
            let w = World::new(task, SimConfig::default(), 5);
            let a = render_grid(&w);
            assert_eq!(a.len(), 24 * 24);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(a.iter().any(|&v| v > 0.0), "{task}");
            assert_eq!(a, render_grid(&World::new(task, SimConfig::default(), 5)));
        }
    }

    #[test]
    fn grind_grid_tracks_coarse_fraction() {
        let mut w = World::new(TaskId::Grind, SimConfig::default(), 0);
        let center = 12 * 24 + 12;
        assert_eq!(render_grid(&w)[center], 1.0);
        w.task_state = TaskState::Grind { coarse: 0.25, total: 1.0 };
        assert_eq!(render_grid(&w)[center], 0.25);
    }

    #[test]
    fn hole_jitter_visible() {
        let a = render_grid(&World::new(TaskId::RoundInsert, SimConfig::default(), 1));
        let b = render_grid(&World::new(TaskId::RoundInsert, SimConfig::default(), 2));
        assert_ne!(a, b);
    }
}
