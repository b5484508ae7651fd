//! Square room with a U-shaped wall.
//!
//! Coordinates are centred on the room with `y` pointing up. The U is built
//! from three axis-aligned rectangles: a horizontal bar with two legs rising
//! from its ends, so its pocket opens upward and the bar separates the pocket
//! from the band of goals beneath it. The agent is a disc; states are disc
//! centres.
//!
//! Default layout (room side 8, walls 1 thick, radius 0.5):
//!
//! ```text
//!  y=4 +--------------------------------+
//!      |                                |
//!  y=2 |       +--+          +--+       |
//!      |       |  |  pocket  |  |       |
//!  y=0 |       |  +----------+  |       |
//!      |       +----------------+       |   bar: x in [-2, 2], y in [-1, 0]
//!      |          goal band             |
//! y=-4 +--------------------------------+
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack for touching contact so states resolved flush against a wall stay valid.
const CONTACT_EPS: f64 = 1e-9;
const MAX_REJECTION_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x0..=self.x1).contains(&p[0]) && (self.y0..=self.y1).contains(&p[1])
    }

    pub fn centroid(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn sq_distance(&self, p: [f64; 2]) -> f64 {
        let dx = (self.x0 - p[0]).max(p[0] - self.x1).max(0.0);
        let dy = (self.y0 - p[1]).max(p[1] - self.y1).max(0.0);
        dx * dx + dy * dy
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [rng.gen_range(self.x0..self.x1), rng.gen_range(self.y0..self.y1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UWall {
    pub left_leg: Rect,
    pub right_leg: Rect,
    pub bar: Rect,
}

impl UWall {
    pub fn rects(&self) -> [Rect; 3] {
        [self.left_leg, self.right_leg, self.bar]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub room_side: f64,
    pub wall_thickness: f64,
    pub agent_radius: f64,
    pub max_step: f64,
    pub horizon: usize,
    pub walls: UWall,
    /// Start region for the hard evaluation task, inside the pocket.
    pub center_box: Rect,
    /// Goal region directly beneath the bar.
    pub goal_band: Rect,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::nav2d()
    }
}

impl EnvConfig {
    pub fn nav2d() -> Self {
        let t = 1.0;
        let r = 0.5;
        let bar = Rect::new(-2.0, 2.0, -1.0, -1.0 + t);
        let walls = UWall {
            left_leg: Rect::new(bar.x0, bar.x0 + t, bar.y1, 2.0),
            right_leg: Rect::new(bar.x1 - t, bar.x1, bar.y1, 2.0),
            bar,
        };
        Self {
            room_side: 8.0,
            wall_thickness: t,
            agent_radius: r,
            max_step: 0.15,
            horizon: 100,
            walls,
            center_box: Rect::new(-0.5, 0.5, 0.5, 1.5),
            goal_band: Rect::new(bar.x0, bar.x1, -4.0 + r, bar.y0 - r),
        }
    }

    pub fn half_side(&self) -> f64 {
        0.5 * self.room_side
    }

    /// Box of admissible disc centres ignoring the U.
    pub fn center_bounds(&self) -> Rect {
        let h = self.half_side() - self.agent_radius;
        Rect::new(-h, h, -h, h)
    }

    /// Interior of the U: between the legs' inner faces, above the bar, below the leg tops.
    pub fn pocket(&self) -> Rect {
        let w = &self.walls;
        Rect::new(w.left_leg.x1, w.right_leg.x0, w.bar.y1, w.left_leg.y1.min(w.right_leg.y1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("env: {msg}")));
        if self.max_step <= 0.0 {
            return bad("max_step must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.agent_radius <= 0.0 || 2.0 * self.agent_radius >= self.room_side {
            return bad("agent radius does not fit the room");
        }
        let room = Rect::new(-self.half_side(), self.half_side(), -self.half_side(), self.half_side());
        let diameter = 2.0 * self.agent_radius;
        for r in self.walls.rects() {
            if r.x0 >= r.x1 || r.y0 >= r.y1 {
                return bad("degenerate wall rectangle");
            }
            let gaps = [r.x0 - room.x0, room.x1 - r.x1, r.y0 - room.y0, room.y1 - r.y1];
            if gaps.iter().any(|&g| g <= diameter) {
                return bad("agent cannot pass between a wall and the room boundary");
            }
        }
        let pocket = self.pocket();
        if pocket.x1 - pocket.x0 <= diameter {
            return bad("pocket narrower than the agent");
        }
        Ok(())
    }

    pub fn valid_state(&self, p: [f64; 2]) -> bool {
        let b = self.center_bounds();
        if p[0] < b.x0 - CONTACT_EPS || p[0] > b.x1 + CONTACT_EPS || p[1] < b.y0 - CONTACT_EPS || p[1] > b.y1 + CONTACT_EPS {
            return false;
        }
        let r2 = self.agent_radius * self.agent_radius;
        self.walls.rects().iter().all(|w| w.sq_distance(p) >= r2 - CONTACT_EPS)
    }

    /// Largest displacement along `axis` (0 = x, 1 = y) not exceeding `d` in magnitude
    /// that keeps the disc out of every wall.
    fn resolve_axis(&self, p: [f64; 2], axis: usize, d: f64) -> f64 {
        if d == 0.0 {
            return 0.0;
        }
        let other = 1 - axis;
        let r = self.agent_radius;
        let bounds = self.center_bounds();
        let (lo, hi) = if axis == 0 { (bounds.x0, bounds.x1) } else { (bounds.y0, bounds.y1) };
        let mut allowed = if d > 0.0 { d.min((hi - p[axis]).max(0.0)) } else { d.max((lo - p[axis]).min(0.0)) };
        for w in self.walls.rects() {
            let (a0, a1, o0, o1) = if axis == 0 { (w.x0, w.x1, w.y0, w.y1) } else { (w.y0, w.y1, w.x0, w.x1) };
            let gap = (o0 - p[other]).max(p[other] - o1).max(0.0);
            if gap >= r {
                continue;
            }
            let half = (r * r - gap * gap).sqrt();
            let (lower, upper) = (a0 - half, a1 + half);
            if allowed > 0.0 && p[axis] < 0.5 * (lower + upper) {
                allowed = allowed.min((lower - p[axis]).max(0.0));
            } else if allowed < 0.0 && p[axis] > 0.5 * (lower + upper) {
                allowed = allowed.max((upper - p[axis]).min(0.0));
            }
        }
        allowed
    }

    pub fn clip_action(&self, a: Action) -> Action {
        let m = self.max_step;
        Action([a.0[0].clamp(-m, m), a.0[1].clamp(-m, m)])
    }

    /// One step of the dynamics: clip, then move along x, then along y.
    pub fn step(&self, s: NavState, a: Action) -> NavState {
        let a = self.clip_action(a);
        let mut p = s.0;
        p[0] += self.resolve_axis(p, 0, a.0[0]);
        p[1] += self.resolve_axis(p, 1, a.0[1]);
        NavState(p)
    }

    fn rejection_sample<R: Rng + ?Sized>(&self, rng: &mut R, region: Rect, name: &str) -> Result<NavState> {
        for _ in 0..MAX_REJECTION_DRAWS {
            let p = region.sample(rng);
            if self.valid_state(p) {
                return Ok(NavState(p));
            }
        }
        Err(Error::SamplingExhausted {
            region: name.to_string(),
            draws: MAX_REJECTION_DRAWS,
        })
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R, region: StartRegion) -> Result<NavState> {
        match region {
            StartRegion::UniformValid => self.rejection_sample(rng, self.center_bounds(), "uniform_valid"),
            StartRegion::CenterBox => self.rejection_sample(rng, self.center_box, "center_box"),
        }
    }

    pub fn sample_goal<R: Rng + ?Sized>(&self, rng: &mut R, region: GoalRegion) -> Result<NavState> {
        match region {
            GoalRegion::UniformValid => self.rejection_sample(rng, self.center_bounds(), "uniform_valid"),
            GoalRegion::BelowWall => self.rejection_sample(rng, self.goal_band, "below_wall"),
        }
    }

    pub fn sample_valid_states<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<NavState>> {
        (0..n).map(|_| self.reset(rng, StartRegion::UniformValid)).collect()
    }

    /// Ends below the bar and within one agent diameter of the goal.
    pub fn success(&self, final_state: NavState, goal: NavState) -> bool {
        final_state.0[1] < self.walls.bar.y0 && distance(final_state, goal) <= 2.0 * self.agent_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRegion {
    UniformValid,
    CenterBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalRegion {
    UniformValid,
    BelowWall,
}

/// Disc centre position. Goals share this type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavState(pub [f64; 2]);

/// Velocity command in units per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action(pub [f64; 2]);

pub fn distance(s: NavState, g: NavState) -> f64 {
    let dx = s.0[0] - g.0[0];
    let dy = s.0[1] - g.0[1];
    dx.hypot(dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EnvConfig {
        EnvConfig::nav2d()
    }

    fn disc_overlaps(c: &EnvConfig, p: [f64; 2]) -> bool {
        // Independent check: sample the disc boundary and interior on a polar grid.
        let r = c.agent_radius;
        for i in 0..=20 {
            let rho = r * i as f64 / 20.0 * (1.0 - 1e-7);
            for k in 0..72 {
                let th = k as f64 * std::f64::consts::TAU / 72.0;
                let q = [p[0] + rho * th.cos(), p[1] + rho * th.sin()];
                if c.walls.rects().iter().any(|w| w.x0 < q[0] && q[0] < w.x1 && w.y0 < q[1] && q[1] < w.y1) {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn default_config_validates() {
        cfg().validate().unwrap();
    }

    #[test]
    fn free_motion_is_exact() {
        let c = cfg();
        let s = NavState([-3.0, 3.0]);
        let n = c.step(s, Action([0.1, 0.0]));
        assert_eq!(n.0, [-3.0 + 0.1, 3.0]);
    }

    #[test]
    fn large_action_is_clipped() {
        let c = cfg();
        let s = NavState([-3.0, 3.0]);
        let n = c.step(s, Action([1.0, 1.0]));
        assert!((n.0[0] - (-2.85)).abs() < 1e-12 && (n.0[1] - 3.15).abs() < 1e-12);
    }

    #[test]
    fn flush_against_wall_blocks_only_that_axis() {
        let c = cfg();
        // Resting on top of the bar inside the pocket.
        let s = NavState([0.0, c.walls.bar.y1 + c.agent_radius]);
        assert!(c.valid_state(s.0));
        let n = c.step(s, Action([0.1, -0.1]));
        assert_eq!(n.0[1], s.0[1]);
        assert!((n.0[0] - 0.1).abs() < 1e-12);
        assert!(!disc_overlaps(&c, n.0));
    }

    #[test]
    fn approaching_a_wall_stops_at_contact() {
        let c = cfg();
        let s = NavState([0.0, c.walls.bar.y1 + c.agent_radius + 0.05]);
        let n = c.step(s, Action([0.0, -0.15]));
        assert!((n.0[1] - (c.walls.bar.y1 + c.agent_radius)).abs() < 1e-12);
    }

    #[test]
    fn corner_contact_uses_disc_geometry() {
        let c = cfg();
        // Diagonally off the outer top corner of the right leg: the disc can slide past
        // the corner further than a square agent would.
        let leg = c.walls.right_leg;
        let s = NavState([leg.x1 + 0.45, leg.y1 + 0.3]);
        assert!(c.valid_state(s.0));
        let n = c.step(s, Action([-0.15, 0.0]));
        let gap: f64 = 0.3;
        let expected_x = leg.x1 + (0.25 - gap * gap).sqrt();
        assert!((n.0[0] - expected_x.max(s.0[0] - 0.15)).abs() < 1e-12);
        assert!(!disc_overlaps(&c, n.0));
    }

    #[test]
    fn valid_state_examples() {
        let c = cfg();
        assert!(c.valid_state(c.pocket().centroid()));
        assert!(c.valid_state([0.0, 3.0]));
        for w in c.walls.rects() {
            assert!(!c.valid_state(w.centroid()));
        }
        assert!(!c.valid_state([3.9, 0.0]));
    }

    /// Area of the Minkowski sum of a rectilinear polygon with a disc:
    /// `A + P r + convex * pi r^2 / 4 - reflex * r^2`.
    fn inflated_u_area(c: &EnvConfig) -> f64 {
        let w = &c.walls;
        let r = c.agent_radius;
        let area: f64 = w.rects().iter().map(Rect::area).sum();
        let bar_w = w.bar.x1 - w.bar.x0;
        let outer_h = w.left_leg.y1 - w.bar.y0;
        let leg_w = w.left_leg.x1 - w.left_leg.x0;
        let inner_h = w.left_leg.y1 - w.bar.y1;
        let inner_w = w.right_leg.x0 - w.left_leg.x1;
        let perimeter = bar_w + 2.0 * outer_h + 2.0 * leg_w + 2.0 * inner_h + inner_w;
        area + perimeter * r + 6.0 * std::f64::consts::PI * r * r / 4.0 - 2.0 * r * r
    }

    #[test]
    fn valid_fraction_matches_free_area() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = c.half_side();
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| c.valid_state([rng.gen_range(-h..h), rng.gen_range(-h..h)]))
            .count();
        let side = 2.0 * (h - c.agent_radius);
        let expected = (side * side - inflated_u_area(&c)) / (c.room_side * c.room_side);
        let got = hits as f64 / n as f64;
        assert!((got - expected).abs() < 0.02, "{got} vs {expected}");
    }

    /// Centroid of the valid set from a decomposition of the inflated U into
    /// rectangles, quarter discs and subtracted reflex squares.
    fn free_area_centroid(c: &EnvConfig) -> [f64; 2] {
        let r = c.agent_radius;
        let w = &c.walls;
        let pi = std::f64::consts::PI;
        // (area, cx, cy) pieces of the inflated U.
        let mut pieces: Vec<(f64, f64, f64)> = Vec::new();
        let mut rect = |rc: Rect, sign: f64| {
            let [cx, cy] = rc.centroid();
            pieces.push((sign * rc.area(), cx, cy));
        };
        for rc in w.rects() {
            rect(rc, 1.0);
        }
        let (bl, br, lg, rg) = (w.bar, w.bar, w.left_leg, w.right_leg);
        // Edge strips.
        rect(Rect::new(bl.x0, bl.x1, bl.y0 - r, bl.y0), 1.0);
        rect(Rect::new(bl.x0 - r, bl.x0, bl.y0, lg.y1), 1.0);
        rect(Rect::new(br.x1, br.x1 + r, br.y0, rg.y1), 1.0);
        rect(Rect::new(lg.x0, lg.x1, lg.y1, lg.y1 + r), 1.0);
        rect(Rect::new(rg.x0, rg.x1, rg.y1, rg.y1 + r), 1.0);
        rect(Rect::new(lg.x1, lg.x1 + r, bl.y1, lg.y1), 1.0);
        rect(Rect::new(rg.x0 - r, rg.x0, bl.y1, rg.y1), 1.0);
        rect(Rect::new(lg.x1, rg.x0, bl.y1, bl.y1 + r), 1.0);
        // Reflex corners are covered twice by the strips.
        rect(Rect::new(lg.x1, lg.x1 + r, bl.y1, bl.y1 + r), -1.0);
        rect(Rect::new(rg.x0 - r, rg.x0, bl.y1, bl.y1 + r), -1.0);
        // Quarter discs at the six convex corners: (corner, outward x sign, outward y sign).
        let q = 4.0 * r / (3.0 * pi);
        let corners = [
            ([bl.x0, bl.y0], -1.0, -1.0),
            ([bl.x1, bl.y0], 1.0, -1.0),
            ([lg.x0, lg.y1], -1.0, 1.0),
            ([lg.x1, lg.y1], 1.0, 1.0),
            ([rg.x0, rg.y1], -1.0, 1.0),
            ([rg.x1, rg.y1], 1.0, 1.0),
        ];
        for (p, sx, sy) in corners {
            pieces.push((pi * r * r / 4.0, p[0] + sx * q, p[1] + sy * q));
        }
        let a_u: f64 = pieces.iter().map(|p| p.0).sum();
        let mx: f64 = pieces.iter().map(|p| p.0 * p.1).sum();
        let my: f64 = pieces.iter().map(|p| p.0 * p.2).sum();
        assert!((a_u - inflated_u_area(c)).abs() < 1e-12);
        let b = c.center_bounds();
        let a_room = b.area();
        let [rx, ry] = b.centroid();
        let a_free = a_room - a_u;
        [(a_room * rx - mx) / a_free, (a_room * ry - my) / a_free]
    }

    #[test]
    fn sample_mean_matches_free_area_centroid() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states = c.sample_valid_states(&mut rng, 50_000).unwrap();
        assert!(states.iter().all(|s| c.valid_state(s.0)));
        let n = states.len() as f64;
        let mx = states.iter().map(|s| s.0[0]).sum::<f64>() / n;
        let my = states.iter().map(|s| s.0[1]).sum::<f64>() / n;
        let [cx, cy] = free_area_centroid(&c);
        assert!((mx - cx).abs() < 0.05 && (my - cy).abs() < 0.05, "({mx}, {my}) vs ({cx}, {cy})");
    }

    #[test]
    fn samples_have_no_duplicates() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut xs: Vec<_> = c.sample_valid_states(&mut rng, 2000).unwrap().iter().map(|s| s.0[0].to_bits()).collect();
        xs.sort_unstable();
        xs.dedup();
        assert_eq!(xs.len(), 2000);
    }

    #[test]
    fn region_samplers_respect_geometry() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pocket = c.pocket();
        for _ in 0..500 {
            let s = c.reset(&mut rng, StartRegion::CenterBox).unwrap();
            assert!(c.valid_state(s.0) && pocket.contains(s.0));
            let g = c.sample_goal(&mut rng, GoalRegion::BelowWall).unwrap();
            assert!(c.valid_state(g.0) && g.0[1] < c.walls.bar.y0);
            let u = c.reset(&mut rng, StartRegion::UniformValid).unwrap();
            assert!(c.valid_state(u.0));
        }
    }

    #[test]
    fn misconfigured_region_errors() {
        let mut c = cfg();
        c.center_box = c.walls.bar;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(c.reset(&mut rng, StartRegion::CenterBox), Err(Error::SamplingExhausted { .. })));
    }

    #[test]
    fn distance_examples() {
        let a = NavState([0.0, 0.0]);
        assert_eq!(distance(a, a), 0.0);
        assert_eq!(distance(a, NavState([3.0, 4.0])), 5.0);
    }

    #[test]
    fn success_examples() {
        let c = cfg();
        let g = NavState([0.0, -2.5]);
        assert!(c.success(g, g));
        let above_goal = NavState([0.0, -1.25]);
        let above = NavState([0.0, -0.5]);
        assert!(distance(above, above_goal) <= 1.0);
        assert!(!c.success(above, above_goal));
        assert!(!c.success(NavState([1.01, -2.5]), g));
        assert!(c.success(NavState([1.0, -2.5]), g));
    }

    #[test]
    fn greedy_walk_from_pocket_is_blocked() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut s = c.reset(&mut rng, StartRegion::CenterBox).unwrap();
            let g = c.sample_goal(&mut rng, GoalRegion::BelowWall).unwrap();
            for _ in 0..c.horizon {
                let a = Action([g.0[0] - s.0[0], g.0[1] - s.0[1]]);
                s = c.step(s, a);
            }
            assert!(s.0[1] > c.walls.bar.y1, "greedy agent escaped the pocket: {s:?}");
            assert!(!c.success(s, g));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn step_preserves_validity(seed in any::<u64>(), ax in -1.0f64..1.0, ay in -1.0f64..1.0) {
            let c = cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = c.reset(&mut rng, StartRegion::UniformValid).unwrap();
            let n = c.step(s, Action([ax, ay]));
            prop_assert!(c.valid_state(n.0));
            prop_assert!((n.0[0] - s.0[0]).abs() <= c.max_step + 1e-12);
            prop_assert!((n.0[1] - s.0[1]).abs() <= c.max_step + 1e-12);
            prop_assert_eq!(n, c.step(s, Action([ax, ay])));
        }

        #[test]
        fn distance_triangle_inequality(a in prop::array::uniform2(-4.0f64..4.0), b in prop::array::uniform2(-4.0f64..4.0), c in prop::array::uniform2(-4.0f64..4.0)) {
            let (a, b, c) = (NavState(a), NavState(b), NavState(c));
            prop_assert!(distance(a, c) <= distance(a, b) + distance(b, c) + 1e-12);
            prop_assert_eq!(distance(a, b), distance(b, a));
        }
    }

    #[test]
    fn long_random_walks_stay_valid() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut s = c.reset(&mut rng, StartRegion::UniformValid).unwrap();
        for i in 0..100_000 {
            if i % 1000 == 0 {
                s = c.reset(&mut rng, StartRegion::UniformValid).unwrap();
            }
            let a = Action([rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
            let n = c.step(s, a);
            assert!(c.valid_state(n.0), "step {i}: {s:?} -> {n:?}");
            assert!((n.0[0] - s.0[0]).abs().max((n.0[1] - s.0[1]).abs()) <= c.max_step + 1e-12);
            s = n;
        }
    }
}
