//! Synthetic scenes and the DVS pixel model.
//!
//! Scenes hold bright objects over a dark background. Each pair of
//! consecutive rendered intensity frames is turned into events by comparing
//! per-pixel log intensities against a contrast threshold.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{bin_events, inject_noise, Event, EventFrame, FrameSequence, Geometry, GrayImage, Polarity};
use crate::rng;

/// Lower clamp applied to intensities so the logarithm stays finite.
pub const MIN_INTENSITY: f64 = 1e-3;
pub const DEFAULT_LOG_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Ball { radius: f64 },
    /// Pixels with value >= 128 belong to the object.
    Sprite(GrayImage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    /// Center, in pixels.
    pub position: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

impl SceneObject {
    pub fn ball(radius: f64, position: (f64, f64), velocity: (f64, f64)) -> Self {
        Self {
            shape: Shape::Ball { radius },
            position,
            velocity,
        }
    }

    /// Half-extent along x and y.
    fn half_extent(&self) -> (f64, f64) {
        match &self.shape {
            Shape::Ball { radius } => (*radius, *radius),
            Shape::Sprite(img) => (
                img.geometry.width as f64 / 2.0,
                img.geometry.height as f64 / 2.0,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub geometry: Geometry,
    pub objects: Vec<SceneObject>,
    pub background: f64,
    pub foreground: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("background", self.background), ("foreground", self.foreground)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidValue(format!("{name} intensity {v} not in (0, 1]")));
            }
        }
        for o in &self.objects {
            if let Shape::Ball { radius } = o.shape {
                if !(radius > 0.0) {
                    return Err(Error::InvalidValue(format!("ball radius {radius} must be positive")));
                }
            }
            let (x, y) = o.position;
            if !(0.0..=self.geometry.width as f64).contains(&x)
                || !(0.0..=self.geometry.height as f64).contains(&y)
            {
                return Err(Error::InvalidValue(format!("object at ({x}, {y}) outside the scene")));
            }
        }
        Ok(())
    }
}

/// Advances every object by its velocity, reflects off the walls, then
/// exchanges velocities between balls that touch while approaching.
pub fn step_scene(scene: &Scene) -> Scene {
    let mut next = scene.clone();
    let (w, h) = (scene.geometry.width as f64, scene.geometry.height as f64);
    for o in &mut next.objects {
        let (hx, hy) = o.half_extent();
        o.position.0 += o.velocity.0;
        o.position.1 += o.velocity.1;
        reflect(&mut o.position.0, &mut o.velocity.0, hx, w - hx);
        reflect(&mut o.position.1, &mut o.velocity.1, hy, h - hy);
    }
    let n = next.objects.len();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&next.objects[i], &next.objects[j]);
            let (ra, rb) = match (&a.shape, &b.shape) {
                (Shape::Ball { radius: ra }, Shape::Ball { radius: rb }) => (*ra, *rb),
                _ => continue,
            };
            let dx = b.position.0 - a.position.0;
            let dy = b.position.1 - a.position.1;
            let dvx = b.velocity.0 - a.velocity.0;
            let dvy = b.velocity.1 - a.velocity.1;
            let approaching = dx * dvx + dy * dvy < 0.0;
            if (dx * dx + dy * dy).sqrt() <= ra + rb && approaching {
                let va = next.objects[i].velocity;
                next.objects[i].velocity = next.objects[j].velocity;
                next.objects[j].velocity = va;
            }
        }
    }
    next
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        // object wider than the scene: pin it to the middle
        *pos = (lo + hi) / 2.0;
        *vel = 0.0;
        return;
    }
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = vel.abs();
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -vel.abs();
    }
    *pos = pos.clamp(lo, hi);
}

/// Per-pixel light intensity, strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityFrame {
    pub geometry: Geometry,
    pub data: Vec<f64>,
}

impl IntensityFrame {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.geometry.width + x]
    }
}

/// Rasterizes without anti-aliasing: a pixel whose center lies inside any
/// object takes the foreground intensity.
pub fn render(scene: &Scene) -> IntensityFrame {
    let g = scene.geometry;
    let bg = scene.background.clamp(MIN_INTENSITY, 1.0);
    let fg = scene.foreground.clamp(MIN_INTENSITY, 1.0);
    let mut data = vec![bg; g.area()];
    for o in &scene.objects {
        match &o.shape {
            Shape::Ball { radius } => {
                let (cx, cy) = o.position;
                let r2 = radius * radius;
                let x0 = (cx - radius).floor().max(0.0) as usize;
                let y0 = (cy - radius).floor().max(0.0) as usize;
                let x1 = ((cx + radius).ceil() as usize).min(g.width);
                let y1 = ((cy + radius).ceil() as usize).min(g.height);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= r2 {
                            data[y * g.width + x] = fg;
                        }
                    }
                }
            }
            Shape::Sprite(img) => {
                let left = (o.position.0 - img.geometry.width as f64 / 2.0).round() as isize;
                let top = (o.position.1 - img.geometry.height as f64 / 2.0).round() as isize;
                for sy in 0..img.geometry.height {
                    for sx in 0..img.geometry.width {
                        let (x, y) = (left + sx as isize, top + sy as isize);
                        if x < 0 || y < 0 || x as usize >= g.width || y as usize >= g.height {
                            continue;
                        }
                        if img.pixels[sy * img.geometry.width + sx] >= 128 {
                            data[y as usize * g.width + x as usize] = fg;
                        }
                    }
                }
            }
        }
    }
    IntensityFrame { geometry: g, data }
}

/// Emits `+1` where the log intensity rose by more than `th_log` and `-1`
/// where it fell by more than `th_log`. Pixels are independent; events come
/// out in row-major order, all stamped `t`.
pub fn intensity_to_events(
    prev: &IntensityFrame,
    next: &IntensityFrame,
    th_log: f64,
    t: u64,
) -> Result<Vec<Event>> {
    prev.geometry.ensure_same(&next.geometry)?;
    let w = prev.geometry.width;
    let mut events = Vec::new();
    for (i, (&a, &b)) in prev.data.iter().zip(&next.data).enumerate() {
        if !(a > 0.0) || !(b > 0.0) {
            return Err(Error::Domain(format!(
                "intensity must be positive, got {} at pixel {i}",
                if a > 0.0 { b } else { a }
            )));
        }
        let delta = b.ln() - a.ln();
        let p = if delta > th_log {
            Polarity::Positive
        } else if -delta > th_log {
            Polarity::Negative
        } else {
            continue;
        };
        events.push(Event::new((i % w) as u32, (i / w) as u32, t, p));
    }
    Ok(events)
}

/// Parameters of a bouncing-ball dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub sequences: usize,
    /// Event frames per sequence.
    pub frames: usize,
    pub balls: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub background: f64,
    pub foreground: f64,
    pub th_log: f64,
    /// Bin interval in microseconds.
    pub dt_us: u64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::bouncing_ball_64(0)
    }
}

impl DatasetConfig {
    /// 64x64 frames with three balls.
    pub fn bouncing_ball_64(seed: u64) -> Self {
        Self {
            width: 64,
            height: 64,
            sequences: 200,
            frames: 24,
            balls: 3,
            radius_min: 5.0,
            radius_max: 8.0,
            speed_min: 1.5,
            speed_max: 3.0,
            background: 0.2,
            foreground: 0.8,
            th_log: DEFAULT_LOG_THRESHOLD,
            dt_us: 10_000,
            seed,
        }
    }

    /// 256x256 frames with three proportionally larger balls.
    pub fn bouncing_ball_256(seed: u64) -> Self {
        Self {
            width: 256,
            height: 256,
            radius_min: 20.0,
            radius_max: 32.0,
            speed_min: 6.0,
            speed_max: 12.0,
            ..Self::bouncing_ball_64(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "bouncingball64" => Ok(Self::bouncing_ball_64(seed)),
            "bouncingball256" => Ok(Self::bouncing_ball_256(seed)),
            other => Err(Error::Config(format!("unknown dataset preset `{other}`"))),
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("geometry must be non-empty".into());
        }
        if self.frames == 0 || self.dt_us == 0 {
            return bad("frames and dt_us must be positive".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!("bad radius range {}..{}", self.radius_min, self.radius_max));
        }
        if 2.0 * self.radius_max >= self.width.min(self.height) as f64 {
            return bad("balls do not fit in the scene".into());
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad(format!("bad speed range {}..{}", self.speed_min, self.speed_max));
        }
        if !(self.th_log > 0.0) {
            return bad("th_log must be positive".into());
        }
        Ok(())
    }

    pub fn sequence_seed(&self, index: usize) -> u64 {
        rng::derive_seed(self.seed, index as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Even indices train, odd indices test.
    pub fn of_index(index: usize) -> Self {
        if index % 2 == 0 {
            Split::Train
        } else {
            Split::Test
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One generated sequence with its raw events and binned frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub events: Vec<Event>,
    pub frames: FrameSequence,
    /// Scene state at the start of every intensity frame (`frames + 1` of them).
    pub scenes: Vec<Scene>,
}

/// Random initial scene: non-overlapping balls with uniform radius, heading
/// and speed.
pub fn random_scene(cfg: &DatasetConfig, seed: u64) -> Scene {
    let mut rng = rng::seeded(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(cfg.balls);
    for _ in 0..cfg.balls {
        let radius = rng.gen_range(cfg.radius_min..=cfg.radius_max);
        let mut position = (w / 2.0, h / 2.0);
        for _ in 0..200 {
            position = (rng.gen_range(radius..=w - radius), rng.gen_range(radius..=h - radius));
            let clear = objects.iter().all(|o| {
                let r = match o.shape {
                    Shape::Ball { radius } => radius,
                    Shape::Sprite(_) => 0.0,
                };
                let (dx, dy) = (o.position.0 - position.0, o.position.1 - position.1);
                (dx * dx + dy * dy).sqrt() > r + radius + 1.0
            });
            if clear {
                break;
            }
        }
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
        objects.push(SceneObject::ball(
            radius,
            position,
            (speed * heading.cos(), speed * heading.sin()),
        ));
    }
    Scene {
        geometry: cfg.geometry(),
        objects,
        background: cfg.background,
        foreground: cfg.foreground,
    }
}

/// Simulates `frames + 1` intensity frames and converts each consecutive
/// pair into one bin of events. Event timestamps are jittered inside the bin.
pub fn simulate(scene: Scene, frames: usize, th_log: f64, dt_us: u64, seed: u64) -> Result<(Vec<Event>, FrameSequence, Vec<Scene>)> {
    scene.validate()?;
    let mut jitter = rng::seeded(rng::derive_seed(seed, 0x7177_e4));
    let mut scenes = vec![scene];
    let mut intensity = render(&scenes[0]);
    let mut events = Vec::new();
    for k in 0..frames {
        let next_scene = step_scene(&scenes[k]);
        let next = render(&next_scene);
        for mut e in intensity_to_events(&intensity, &next, th_log, k as u64 * dt_us)? {
            e.t += jitter.gen_range(0..dt_us);
            events.push(e);
        }
        intensity = next;
        scenes.push(next_scene);
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));
    let geometry = scenes[0].geometry;
    let binned = bin_events(&events, 0, dt_us, geometry, Some(frames))?;
    Ok((events, binned, scenes))
}

pub fn generate_sequence(cfg: &DatasetConfig, index: usize) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let seed = cfg.sequence_seed(index);
    let scene = random_scene(cfg, seed);
    let (events, frames, scenes) = simulate(scene, cfg.frames, cfg.th_log, cfg.dt_us, seed)?;
    Ok(SyntheticSequence {
        index,
        seed,
        split: Split::of_index(index),
        events,
        frames,
        scenes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<FrameSequence>,
    pub test: Vec<FrameSequence>,
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for index in 0..cfg.sequences {
        let seq = generate_sequence(cfg, index)?;
        match seq.split {
            Split::Train => train.push(seq.frames),
            Split::Test => test.push(seq.frames),
        }
    }
    Ok(Dataset { train, test })
}

/// One ball crossing a larger frame, used to compare metrics under small
/// displacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftedBallConfig {
    pub width: usize,
    pub height: usize,
    pub radius: f64,
    /// Horizontal motion during the frame, in pixels.
    pub speed: f64,
    /// Displacements as fractions of the radius.
    pub offsets: Vec<f64>,
    pub noise_level: f64,
    /// Independent noise draws per offset; scores are averaged over them.
    pub noise_draws: usize,
    pub background: f64,
    pub foreground: f64,
    pub th_log: f64,
    pub seed: u64,
}

impl Default for ShiftedBallConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            radius: 16.0,
            speed: 4.0,
            offsets: vec![0.0, 0.05, 0.10, 0.25],
            noise_level: 0.5,
            noise_draws: 64,
            background: 0.2,
            foreground: 0.8,
            th_log: DEFAULT_LOG_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedCase {
    /// Displacement as a fraction of the radius.
    pub offset: f64,
    pub clean: EventFrame,
    /// One noisy copy of `clean` per draw.
    pub noisy: Vec<EventFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedBall {
    /// Clean frame of the ball at its reference position.
    pub reference: EventFrame,
    pub cases: Vec<ShiftedCase>,
}

/// Event frame of a single ball moving `speed` pixels to the right, with its
/// centre starting at `(cx, cy)`.
pub fn moving_ball_frame(cfg: &ShiftedBallConfig, cx: f64, cy: f64) -> Result<EventFrame> {
    let geometry = Geometry::new(cfg.width, cfg.height);
    let at = |x: f64| Scene {
        geometry,
        objects: vec![SceneObject::ball(cfg.radius, (x, cy), (0.0, 0.0))],
        background: cfg.background,
        foreground: cfg.foreground,
    };
    let (a, b) = (at(cx), at(cx + cfg.speed));
    a.validate()?;
    b.validate()?;
    let events = intensity_to_events(&render(&a), &render(&b), cfg.th_log, 0)?;
    let mut frame = EventFrame::zeros(geometry);
    for e in events {
        frame.set(e.x as usize, e.y as usize, e.p.value());
    }
    Ok(frame)
}

/// Reference frame plus noisy copies displaced by each configured offset.
/// Draw `k` uses the same seed at every offset.
pub fn shifted_ball(cfg: &ShiftedBallConfig) -> Result<ShiftedBall> {
    if cfg.noise_draws == 0 {
        return Err(Error::Config("shifted-ball needs at least one noise draw".into()));
    }
    let cx = cfg.width as f64 / 2.0 - cfg.speed / 2.0;
    let cy = cfg.height as f64 / 2.0;
    let reference = moving_ball_frame(cfg, cx, cy)?;
    let cases = cfg
        .offsets
        .iter()
        .map(|&offset| {
            let clean = moving_ball_frame(cfg, cx + offset * cfg.radius, cy)?;
            let noisy = (0..cfg.noise_draws)
                .map(|k| inject_noise(&clean, cfg.noise_level, rng::derive_seed(cfg.seed, k as u64)).map(|n| n.frame))
                .collect::<Result<Vec<_>>>()?;
            Ok(ShiftedCase { offset, clean, noisy })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShiftedBall { reference, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene {
            geometry: Geometry::new(64, 64),
            objects,
            background: 0.2,
            foreground: 0.8,
        }
    }

    #[test]
    fn shifted_ball_frames() {
        let cfg = ShiftedBallConfig {
            noise_draws: 2,
            ..ShiftedBallConfig::default()
        };
        let sb = shifted_ball(&cfg).unwrap();
        assert_eq!(sb.cases.len(), 4);
        assert_eq!(sb.cases[0].clean, sb.reference);
        // moving right: positive events lead, negative events trail
        let cells = sb.reference.cells();
        let pos = cells.iter().filter(|&&c| c == 1).count();
        let neg = cells.iter().filter(|&&c| c == -1).count();
        assert!(pos > 0 && pos == neg);
        for case in &sb.cases {
            assert_eq!(case.noisy.len(), 2);
            assert_ne!(case.noisy[0], case.noisy[1]);
            let nnz = case.clean.nonzero_count();
            for f in &case.noisy {
                assert_eq!(f.nonzero_count(), nnz + (nnz as f64 * 0.5).ceil() as usize);
            }
        }
        assert!(shifted_ball(&ShiftedBallConfig { noise_draws: 0, ..cfg }).is_err());
    }

    #[test]
    fn free_flight_adds_velocity() {
        let s = scene(vec![SceneObject::ball(3.0, (20.0, 30.0), (1.5, -2.0))]);
        let n = step_scene(&s);
        assert_eq!(n.objects[0].position, (21.5, 28.0));
        assert_eq!(n.objects[0].velocity, (1.5, -2.0));
    }

    #[test]
    fn wall_contact_flips_normal_velocity() {
        let s = scene(vec![SceneObject::ball(2.0, (5.0, 30.0), (-6.0, 1.0))]);
        let n = step_scene(&s);
        assert_eq!(n.objects[0].velocity, (6.0, 1.0));
        assert!(n.objects[0].position.0 >= 2.0);
    }

    #[test]
    fn head_on_balls_exchange_velocities() {
        let s = scene(vec![
            SceneObject::ball(2.0, (10.0, 20.0), (1.0, 0.0)),
            SceneObject::ball(2.0, (14.0, 20.0), (-1.0, 0.0)),
        ]);
        let n = step_scene(&s);
        assert_eq!(n.objects[0].velocity, (-1.0, 0.0));
        assert_eq!(n.objects[1].velocity, (1.0, 0.0));
    }

    #[test]
    fn speed_survives_many_bounces() {
        let mut s = scene(vec![SceneObject::ball(4.0, (30.0, 12.0), (2.7, -1.9))]);
        let speed = |s: &Scene| {
            let v = s.objects[0].velocity;
            (v.0 * v.0 + v.1 * v.1).sqrt()
        };
        let s0 = speed(&s);
        for _ in 0..500 {
            s = step_scene(&s);
            assert!((speed(&s) - s0).abs() < 1e-12);
        }
    }

    #[test]
    fn render_cases() {
        let empty = render(&scene(vec![]));
        assert!(empty.data.iter().all(|&v| v == 0.2));

        let r = 10.0;
        let img = render(&scene(vec![SceneObject::ball(r, (32.0, 32.0), (0.0, 0.0))]));
        let lit = img.data.iter().filter(|&&v| v == 0.8).count() as f64;
        let area = std::f64::consts::PI * r * r;
        assert!((lit - area).abs() <= 0.1 * area, "lit {lit} vs {area}");

        let overlapping = render(&scene(vec![
            SceneObject::ball(5.0, (30.0, 30.0), (0.0, 0.0)),
            SceneObject::ball(5.0, (33.0, 30.0), (0.0, 0.0)),
        ]));
        assert!(overlapping.data.iter().all(|&v| v == 0.2 || v == 0.8));
    }

    fn uniform(v: f64) -> IntensityFrame {
        IntensityFrame {
            geometry: Geometry::new(4, 4),
            data: vec![v; 16],
        }
    }

    #[test]
    fn log_contrast_events() {
        assert!(intensity_to_events(&uniform(0.5), &uniform(0.5), 0.3, 0).unwrap().is_empty());
        let up = intensity_to_events(&uniform(0.1), &uniform(0.9), 0.5, 7).unwrap();
        assert_eq!(up.len(), 16);
        assert!(up.iter().all(|e| e.p == Polarity::Positive && e.t == 7));
        let down = intensity_to_events(&uniform(0.9), &uniform(0.1), 0.5, 7).unwrap();
        assert!(down.iter().zip(&up).all(|(d, u)| d.p == u.p.flipped() && (d.x, d.y) == (u.x, u.y)));
        assert!(matches!(
            intensity_to_events(&uniform(0.0), &uniform(0.5), 0.3, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn static_scene_is_silent() {
        let s = scene(vec![SceneObject::ball(6.0, (20.0, 20.0), (0.0, 0.0))]);
        for th in [0.01, 0.3, 2.0] {
            let (events, _, _) = simulate(s.clone(), 5, th, 100, 1).unwrap();
            assert!(events.is_empty());
        }
    }

    #[test]
    fn moving_disc_events_hug_its_boundary() {
        let s = scene(vec![SceneObject::ball(9.0, (25.0, 30.0), (2.0, 1.0))]);
        let (_, frames, scenes) = simulate(s, 6, DEFAULT_LOG_THRESHOLD, 100, 2).unwrap();
        let (mut near, mut total) = (0usize, 0usize);
        for (k, f) in frames.frames().iter().enumerate() {
            let (a, b) = (&scenes[k].objects[0], &scenes[k + 1].objects[0]);
            for y in 0..64 {
                for x in 0..64 {
                    let v = f.get(x, y);
                    if v == 0 {
                        continue;
                    }
                    total += 1;
                    let d = |o: &SceneObject| {
                        let (dx, dy) = (x as f64 + 0.5 - o.position.0, y as f64 + 0.5 - o.position.1);
                        ((dx * dx + dy * dy).sqrt() - 9.0).abs()
                    };
                    if d(a).min(d(b)) <= 2.0 {
                        near += 1;
                    }
                    // leading edge is brighter, trailing edge darker
                    let inside_next = {
                        let (dx, dy) = (x as f64 + 0.5 - b.position.0, y as f64 + 0.5 - b.position.1);
                        dx * dx + dy * dy <= 81.0
                    };
                    assert_eq!(v == 1, inside_next);
                }
            }
        }
        assert!(total > 0);
        assert!(near as f64 >= 0.8 * total as f64);
    }

    #[test]
    fn dataset_split_and_determinism() {
        let cfg = DatasetConfig {
            sequences: 10,
            frames: 4,
            ..DatasetConfig::bouncing_ball_64(11)
        };
        let a = generate_dataset(&cfg).unwrap();
        assert_eq!(a.train.len(), 5);
        assert_eq!(a.test.len(), 5);
        assert_eq!(a, generate_dataset(&cfg).unwrap());
        let s = generate_sequence(&cfg, 0).unwrap();
        assert_eq!(s.frames.geometry(), Geometry::new(64, 64));
        assert_eq!(s.scenes[0].objects.len(), 3);
        assert_eq!(s.frames.len(), 4);
        let other = generate_dataset(&DatasetConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn hundred_sequences_split_evenly() {
        let cfg = DatasetConfig {
            sequences: 100,
            frames: 1,
            ..DatasetConfig::bouncing_ball_64(3)
        };
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (50, 50));
    }

    #[test]
    fn sprites_render_from_bitmaps() {
        let img = GrayImage {
            geometry: Geometry::new(3, 2),
            pixels: vec![255, 0, 255, 0, 255, 0],
        };
        let s = Scene {
            objects: vec![SceneObject {
                shape: Shape::Sprite(img),
                position: (10.5, 10.0),
                velocity: (1.0, 0.0),
            }],
            ..scene(vec![])
        };
        let r = render(&s);
        assert_eq!(r.data.iter().filter(|&&v| v == 0.8).count(), 3);
        assert_eq!(r.get(9, 9), 0.8);
        assert_eq!(r.get(10, 10), 0.8);
    }
}
