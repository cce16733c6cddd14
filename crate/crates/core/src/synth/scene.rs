//! Grid-world scene programs and their symbolic feature rendering.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::mix_seed;
use crate::tensor::Tensor;
use crate::video::FeatureVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Gray,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    MoveLeft,
    MoveRight,
    MoveUp,
    MoveDown,
    Rotate,
    Stop,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
        }
    }
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Gray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Gray => "gray",
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Big];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Big => "big",
        }
    }
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::MoveLeft,
        Action::MoveRight,
        Action::MoveUp,
        Action::MoveDown,
        Action::Rotate,
        Action::Stop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveLeft => "move-left",
            Action::MoveRight => "move-right",
            Action::MoveUp => "move-up",
            Action::MoveDown => "move-down",
            Action::Rotate => "rotate",
            Action::Stop => "stop",
        }
    }

    /// Grid displacement per pulse; `up` increases `y`.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::MoveLeft => (-1, 0),
            Action::MoveRight => (1, 0),
            Action::MoveUp => (0, 1),
            Action::MoveDown => (0, -1),
            Action::Rotate | Action::Stop => (0, 0),
        }
    }

    pub fn is_move(self) -> bool {
        self.delta() != (0, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub id: usize,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Position at frame 0.
    pub x: usize,
    pub y: usize,
}

/// A repeated action. Each pulse is `pulses[i]` active frames followed by one pause frame;
/// `end` is exclusive and includes the final pause.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub object: usize,
    pub action: Action,
    pub start: usize,
    pub end: usize,
    pub repeat: usize,
    pub pulses: Vec<usize>,
}

impl Event {
    /// First frame of each pulse.
    pub fn pulse_starts(&self) -> Vec<usize> {
        let mut t = self.start;
        self.pulses
            .iter()
            .map(|&p| {
                let s = t;
                t += p + 1;
                s
            })
            .collect()
    }

    pub fn is_active(&self, t: usize) -> bool {
        self.pulse_starts()
            .iter()
            .zip(&self.pulses)
            .any(|(&s, &p)| t >= s && t < s + p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneProgram {
    pub id: usize,
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Object>,
    /// Sorted by start frame; globally non-overlapping.
    pub events: Vec<Event>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub max_repeat: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 40,
            width: 4,
            height: 4,
            min_objects: 2,
            max_objects: 4,
            min_events: 3,
            max_events: 8,
            max_repeat: 4,
        }
    }
}

/// Channel layout of a rendered cell.
pub mod channel {
    pub const SHAPE: usize = 0;
    pub const COLOR: usize = 3;
    pub const SIZE: usize = 9;
    pub const HORIZONTAL: usize = 10;
    pub const VERTICAL: usize = 11;
    pub const ROTATE: usize = 12;
    pub const STOP: usize = 13;
    pub const OCCUPANCY: usize = 14;
    pub const DEPTH: usize = 16;
}

impl SceneProgram {
    pub fn object(&self, id: usize) -> &Object {
        &self.objects[id]
    }

    /// Object positions at frame `t`.
    pub fn positions_at(&self, t: usize) -> Vec<(usize, usize)> {
        let mut pos: Vec<(i32, i32)> = self.objects.iter().map(|o| (o.x as i32, o.y as i32)).collect();
        for e in &self.events {
            let (dx, dy) = e.action.delta();
            if (dx, dy) == (0, 0) {
                continue;
            }
            for s in e.pulse_starts() {
                if s <= t {
                    pos[e.object].0 += dx;
                    pos[e.object].1 += dy;
                }
            }
        }
        pos.into_iter().map(|(x, y)| (x as usize, y as usize)).collect()
    }

    /// Action each object is performing at frame `t`, if any.
    pub fn active_at(&self, t: usize) -> Vec<Option<Action>> {
        let mut out = vec![None; self.objects.len()];
        for e in &self.events {
            if e.is_active(t) {
                out[e.object] = Some(e.action);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::format("scene program", m));
        let mut prev_end = 0;
        for e in &self.events {
            if e.object >= self.objects.len() {
                return bad(format!("event refers to object {}", e.object));
            }
            if e.repeat == 0 || e.repeat != e.pulses.len() || e.pulses.iter().any(|&p| p == 0) {
                return bad("repeat count does not match pulses".into());
            }
            if e.end != e.start + e.pulses.iter().map(|p| p + 1).sum::<usize>() || e.end > self.frames {
                return bad(format!("event frames {}..{} out of range", e.start, e.end));
            }
            if e.start < prev_end {
                return bad("overlapping events".into());
            }
            prev_end = e.end;
        }
        for t in 0..self.frames {
            let pos = self.positions_at(t);
            for (i, p) in pos.iter().enumerate() {
                if p.0 >= self.width || p.1 >= self.height {
                    return bad(format!("object {i} leaves the grid at frame {t}"));
                }
                if pos[..i].contains(p) {
                    return bad(format!("collision at frame {t}"));
                }
            }
        }
        Ok(())
    }
}

/// Scene drawn from `seed` with the default layout.
pub fn generate_scene(seed: u64) -> SceneProgram {
    generate_scene_with(&SceneConfig::default(), 0, seed)
}

pub fn generate_scene_with(cfg: &SceneConfig, id: usize, seed: u64) -> SceneProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5ce4e));
    loop {
        if let Some(scene) = try_scene(cfg, id, seed, &mut rng) {
            return scene;
        }
    }
}

fn try_scene(cfg: &SceneConfig, id: usize, seed: u64, rng: &mut ChaCha8Rng) -> Option<SceneProgram> {
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut kinds: Vec<(Shape, Color)> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
        .collect();
    kinds.shuffle(rng);
    let mut cells: Vec<(usize, usize)> = (0..cfg.width)
        .flat_map(|x| (0..cfg.height).map(move |y| (x, y)))
        .collect();
    cells.shuffle(rng);
    let mut objects: Vec<Object> = (0..n_obj)
        .map(|i| Object {
            id: i,
            shape: kinds[i].0,
            color: kinds[i].1,
            size: if rng.gen_bool(0.5) { Size::Big } else { Size::Small },
            x: cells[i].0,
            y: cells[i].1,
        })
        .collect();
    // canonical object order makes inverse rendering exact
    objects.sort_by_key(|o| (o.x, o.y));
    for (i, o) in objects.iter_mut().enumerate() {
        o.id = i;
    }

    let target = rng.gen_range(cfg.min_events..=cfg.max_events);
    let mut pos: Vec<(i32, i32)> = objects.iter().map(|o| (o.x as i32, o.y as i32)).collect();
    let mut events = Vec::new();
    let mut cursor = 1 + rng.gen_range(0..2);
    'events: while events.len() < target {
        for _ in 0..24 {
            let object = rng.gen_range(0..n_obj);
            let action = Action::ALL[rng.gen_range(0..Action::ALL.len())];
            let repeat = if action == Action::Stop {
                1
            } else {
                rng.gen_range(1..=cfg.max_repeat)
            };
            let pulses: Vec<usize> = (0..repeat).map(|_| rng.gen_range(1..=2)).collect();
            let duration: usize = pulses.iter().map(|p| p + 1).sum();
            if cursor + duration > cfg.frames {
                continue;
            }
            let (dx, dy) = action.delta();
            let path_ok = (1..=repeat as i32).all(|k| {
                let p = (pos[object].0 + k * dx, pos[object].1 + k * dy);
                p.0 >= 0
                    && p.1 >= 0
                    && (p.0 as usize) < cfg.width
                    && (p.1 as usize) < cfg.height
                    && !pos.iter().enumerate().any(|(j, q)| j != object && *q == p)
            });
            if !path_ok {
                continue;
            }
            pos[object].0 += repeat as i32 * dx;
            pos[object].1 += repeat as i32 * dy;
            events.push(Event {
                object,
                action,
                start: cursor,
                end: cursor + duration,
                repeat,
                pulses,
            });
            cursor += duration + rng.gen_range(2..=3);
            continue 'events;
        }
        break;
    }
    if events.len() < cfg.min_events {
        return None;
    }
    Some(SceneProgram {
        id,
        seed,
        frames: cfg.frames,
        width: cfg.width,
        height: cfg.height,
        objects,
        events,
    })
}

/// Renders one feature vector per cell per frame; empty cells are zero.
pub fn render_features(scene: &SceneProgram) -> FeatureVolume {
    let (n, w, h, d) = (scene.frames, scene.width, scene.height, channel::DEPTH);
    let mut data = vec![0f32; n * w * h * d];
    for t in 0..n {
        let pos = scene.positions_at(t);
        let active = scene.active_at(t);
        for (o, &(x, y)) in scene.objects.iter().zip(&pos) {
            let base = ((t * w + x) * h + y) * d;
            let cell = &mut data[base..base + d];
            cell[channel::SHAPE + o.shape as usize] = 1.0;
            cell[channel::COLOR + o.color as usize] = 1.0;
            cell[channel::SIZE] = if o.size == Size::Big { 1.0 } else { 0.0 };
            cell[channel::OCCUPANCY] = 1.0;
            if let Some(a) = active[o.id] {
                let (dx, dy) = a.delta();
                cell[channel::HORIZONTAL] = dx as f32;
                cell[channel::VERTICAL] = dy as f32;
                cell[channel::ROTATE] = (a == Action::Rotate) as u8 as f32;
                cell[channel::STOP] = (a == Action::Stop) as u8 as f32;
            }
        }
    }
    FeatureVolume::new(Tensor::new([n, w, h, d], data).expect("sized above")).expect("rank 4")
}

fn one_hot_index(v: &[f32]) -> Option<usize> {
    let hot: Vec<usize> = v.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect();
    (hot.len() == 1).then(|| hot[0])
}

/// Reconstructs the scene program from a rendered volume. Seed and id are not recoverable.
pub fn decode_features(vol: &FeatureVolume) -> Result<SceneProgram> {
    let (n, w, h) = (vol.num_frames(), vol.width(), vol.height());
    if vol.depth() != channel::DEPTH {
        return Err(Error::format("rendered scene", format!("depth {}", vol.depth())));
    }
    let bad = |m: String| Error::format("rendered scene", m);
    let identify = |c: &[f32]| -> Result<(Shape, Color, Size)> {
        let s = one_hot_index(&c[channel::SHAPE..channel::COLOR]).ok_or_else(|| bad("shape code".into()))?;
        let k = one_hot_index(&c[channel::COLOR..channel::SIZE]).ok_or_else(|| bad("color code".into()))?;
        let size = if c[channel::SIZE] == 1.0 { Size::Big } else { Size::Small };
        Ok((Shape::ALL[s], Color::ALL[k], size))
    };
    let action_of = |c: &[f32]| -> Option<Action> {
        match (c[channel::HORIZONTAL], c[channel::VERTICAL]) {
            (x, _) if x > 0.5 => Some(Action::MoveRight),
            (x, _) if x < -0.5 => Some(Action::MoveLeft),
            (_, y) if y > 0.5 => Some(Action::MoveUp),
            (_, y) if y < -0.5 => Some(Action::MoveDown),
            _ if c[channel::ROTATE] == 1.0 => Some(Action::Rotate),
            _ if c[channel::STOP] == 1.0 => Some(Action::Stop),
            _ => None,
        }
    };

    let mut objects = Vec::new();
    for x in 0..w {
        for y in 0..h {
            let c = vol.cell(0, x, y);
            if c[channel::OCCUPANCY] == 1.0 {
                let (shape, color, size) = identify(c)?;
                objects.push(Object {
                    id: objects.len(),
                    shape,
                    color,
                    size,
                    x,
                    y,
                });
            }
        }
    }

    // per-frame activity per object
    let mut activity = vec![vec![None; n]; objects.len()];
    for t in 0..n {
        let mut seen = vec![false; objects.len()];
        for x in 0..w {
            for y in 0..h {
                let c = vol.cell(t, x, y);
                if c[channel::OCCUPANCY] != 1.0 {
                    continue;
                }
                let (shape, color, _) = identify(c)?;
                let id = objects
                    .iter()
                    .position(|o| o.shape == shape && o.color == color)
                    .ok_or_else(|| bad(format!("unknown object at frame {t}")))?;
                seen[id] = true;
                activity[id][t] = action_of(c);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(bad(format!("object missing at frame {t}")));
        }
    }

    let mut events = Vec::new();
    for (id, acts) in activity.iter().enumerate() {
        // maximal runs of one action
        let mut runs: Vec<(Action, usize, usize)> = Vec::new();
        let mut t = 0;
        while t < n {
            if let Some(a) = acts[t] {
                let s = t;
                while t < n && acts[t] == Some(a) {
                    t += 1;
                }
                runs.push((a, s, t - s));
            } else {
                t += 1;
            }
        }
        // pulses of one event are separated by exactly one pause frame
        let mut i = 0;
        while i < runs.len() {
            let (a, s, len) = runs[i];
            let mut pulses = vec![len];
            let mut last_end = s + len;
            i += 1;
            while i < runs.len() && runs[i].0 == a && runs[i].1 == last_end + 1 {
                pulses.push(runs[i].2);
                last_end = runs[i].1 + runs[i].2;
                i += 1;
            }
            events.push(Event {
                object: id,
                action: a,
                start: s,
                end: s + pulses.iter().map(|p| p + 1).sum::<usize>(),
                repeat: pulses.len(),
                pulses,
            });
        }
    }
    events.sort_by_key(|e| e.start);
    Ok(SceneProgram {
        id: 0,
        seed: 0,
        frames: n,
        width: w,
        height: h,
        objects,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_program() {
        assert_eq!(generate_scene(17), generate_scene(17));
        assert_ne!(generate_scene(17), generate_scene(18));
    }

    #[test]
    fn programs_respect_bounds_over_many_seeds() {
        let cfg = SceneConfig::default();
        for seed in 0..1000 {
            let s = generate_scene(seed);
            assert!((2..=4).contains(&s.objects.len()));
            assert!((3..=8).contains(&s.events.len()), "seed {seed}: {} events", s.events.len());
            s.validate().unwrap();
            for e in &s.events {
                assert!(e.start < e.end && e.end <= cfg.frames);
                if e.action == Action::Stop {
                    assert_eq!(e.repeat, 1);
                }
            }
            let kinds: std::collections::HashSet<_> = s.objects.iter().map(|o| (o.shape, o.color)).collect();
            assert_eq!(kinds.len(), s.objects.len());
        }
    }

    #[test]
    fn empty_scene_renders_zero() {
        let s = SceneProgram {
            id: 0,
            seed: 0,
            frames: 5,
            width: 3,
            height: 2,
            objects: vec![],
            events: vec![],
        };
        let v = render_features(&s);
        assert_eq!(v.frames.shape(), &[5, 3, 2, 16]);
        assert!(v.frames.data().iter().all(|&x| x == 0.0));
    }

    fn one_object(events: Vec<Event>) -> SceneProgram {
        SceneProgram {
            id: 0,
            seed: 0,
            frames: 12,
            width: 4,
            height: 4,
            objects: vec![Object {
                id: 0,
                shape: Shape::Sphere,
                color: Color::Blue,
                size: Size::Big,
                x: 0,
                y: 1,
            }],
            events,
        }
    }

    #[test]
    fn static_object_identical_frames() {
        let v = render_features(&one_object(vec![]));
        let per = 4 * 4 * 16;
        let d = v.frames.data();
        for t in 1..12 {
            assert_eq!(&d[..per], &d[t * per..(t + 1) * per]);
        }
        assert_eq!(v.cell(0, 0, 1)[channel::OCCUPANCY], 1.0);
    }

    #[test]
    fn move_right_shifts_one_cell_per_pulse() {
        let ev = Event {
            object: 0,
            action: Action::MoveRight,
            start: 2,
            end: 2 + 3 + 2 + 3,
            repeat: 3,
            pulses: vec![2, 1, 2],
        };
        let scene = one_object(vec![ev]);
        scene.validate().unwrap();
        let v = render_features(&scene);
        let xs: Vec<usize> = (0..12)
            .map(|t| (0..4).find(|&x| v.cell(t, x, 1)[channel::OCCUPANCY] == 1.0).unwrap())
            .collect();
        assert_eq!(xs, vec![0, 0, 1, 1, 1, 2, 2, 3, 3, 3, 3, 3]);
        let decoded = decode_features(&v).unwrap();
        assert_eq!(decoded, scene);
    }

    #[test]
    fn decode_inverts_render() {
        for seed in 0..200 {
            let mut s = generate_scene(seed);
            let d = decode_features(&render_features(&s)).unwrap();
            s.seed = 0;
            assert_eq!(d, s, "seed {seed}");
        }
    }
}
