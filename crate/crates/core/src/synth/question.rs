//! Question programs, their text templates, and the symbolic answer oracle.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Action, Color, Event, Object, SceneProgram, Shape, Size};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Exist,
    Count,
    AttributeCompare,
    Query,
    ActionOrder,
    RepetitionCount,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Exist,
        Task::Count,
        Task::AttributeCompare,
        Task::Query,
        Task::ActionOrder,
        Task::RepetitionCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Exist => "exist",
            Task::Count => "count",
            Task::AttributeCompare => "attribute-compare",
            Task::Query => "query",
            Task::ActionOrder => "action-order",
            Task::RepetitionCount => "repetition-count",
        }
    }

    /// Tasks whose answers depend on event order or repetition.
    pub fn is_temporal(self) -> bool {
        matches!(self, Task::ActionOrder | Task::RepetitionCount)
    }

    /// Answered by the regression head rather than by classification.
    pub fn is_regression(self) -> bool {
        self == Task::RepetitionCount
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Exist,
    CountShape,
    CountColor,
    SameSize,
    QueryColor,
    QueryShape,
    QuerySize,
    ActionAfter,
    ActionBefore,
    ColorAfter,
    RepetitionCount,
}

impl Template {
    pub const ALL: [Template; 11] = [
        Template::Exist,
        Template::CountShape,
        Template::CountColor,
        Template::SameSize,
        Template::QueryColor,
        Template::QueryShape,
        Template::QuerySize,
        Template::ActionAfter,
        Template::ActionBefore,
        Template::ColorAfter,
        Template::RepetitionCount,
    ];

    pub fn task(self) -> Task {
        match self {
            Template::Exist => Task::Exist,
            Template::CountShape | Template::CountColor => Task::Count,
            Template::SameSize => Task::AttributeCompare,
            Template::QueryColor | Template::QueryShape | Template::QuerySize => Task::Query,
            Template::ActionAfter | Template::ActionBefore | Template::ColorAfter => Task::ActionOrder,
            Template::RepetitionCount => Task::RepetitionCount,
        }
    }

    /// Relative sampling weight; temporal templates make up half of a corpus.
    pub fn weight(self) -> f64 {
        match self {
            Template::Exist | Template::SameSize => 1.0,
            Template::CountShape | Template::CountColor => 0.5,
            Template::QueryColor | Template::QueryShape | Template::QuerySize => 1.0 / 3.0,
            Template::ActionAfter | Template::ActionBefore | Template::ColorAfter => 1.0,
            Template::RepetitionCount => 1.0,
        }
    }

    /// Every answer the template can produce.
    pub fn answer_space(self, max_objects: usize, max_repeat: usize) -> Vec<Answer> {
        let labels = |v: Vec<&str>| v.into_iter().map(|s| Answer::Label(s.to_string())).collect();
        match self {
            Template::Exist | Template::SameSize => labels(vec!["yes", "no"]),
            Template::CountShape => (0..=max_objects.min(Color::ALL.len()) as u32).map(Answer::Count).collect(),
            Template::CountColor => (0..=max_objects.min(Shape::ALL.len()) as u32).map(Answer::Count).collect(),
            Template::QueryColor | Template::ColorAfter => labels(Color::ALL.iter().map(|c| c.name()).collect()),
            Template::QueryShape => labels(Shape::ALL.iter().map(|s| s.name()).collect()),
            Template::QuerySize => labels(Size::ALL.iter().map(|s| s.name()).collect()),
            Template::ActionAfter | Template::ActionBefore => {
                labels(Action::ALL.iter().map(|a| a.name()).collect())
            }
            Template::RepetitionCount => (1..=max_repeat as u32).map(Answer::Count).collect(),
        }
    }
}

/// Object description; unset attributes match anything.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Filter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Color>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<Size>,
}

impl Filter {
    pub fn exact(o: &Object) -> Self {
        Filter {
            shape: Some(o.shape),
            color: Some(o.color),
            size: None,
        }
    }

    pub fn matches(&self, o: &Object) -> bool {
        self.shape.is_none_or(|s| s == o.shape)
            && self.color.is_none_or(|c| c == o.color)
            && self.size.is_none_or(|s| s == o.size)
    }

    /// Noun phrase, e.g. "big red cube" or "small thing".
    pub fn phrase(&self) -> String {
        let mut words = Vec::new();
        if let Some(s) = self.size {
            words.push(s.name());
        }
        if let Some(c) = self.color {
            words.push(c.name());
        }
        words.push(self.shape.map_or("thing", Shape::name));
        words.join(" ")
    }
}

/// Parsed question.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Program {
    Exist { filter: Filter },
    CountShape { shape: Shape },
    CountColor { color: Color },
    SameSize { a: Filter, b: Filter },
    QueryColor { target: Filter },
    QueryShape { target: Filter },
    QuerySize { target: Filter },
    /// What `subject` does first after `anchor` performs `action`.
    ActionAfter { subject: Filter, anchor: Filter, action: Action },
    /// What `subject` does last before `anchor` performs `action`.
    ActionBefore { subject: Filter, anchor: Filter, action: Action },
    /// Color of whichever object acts next after `anchor` performs `action`.
    ColorAfter { anchor: Filter, action: Action },
    RepetitionCount { subject: Filter, action: Action },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Count(u32),
    Label(String),
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Count(n) => write!(f, "{n}"),
            Answer::Label(s) => f.write_str(s),
        }
    }
}

fn verb_3rd(a: Action) -> &'static str {
    match a {
        Action::MoveLeft => "moves left",
        Action::MoveRight => "moves right",
        Action::MoveUp => "moves up",
        Action::MoveDown => "moves down",
        Action::Rotate => "rotates",
        Action::Stop => "stops",
    }
}

fn verb_base(a: Action) -> &'static str {
    match a {
        Action::MoveLeft => "move left",
        Action::MoveRight => "move right",
        Action::MoveUp => "move up",
        Action::MoveDown => "move down",
        Action::Rotate => "rotate",
        Action::Stop => "stop",
    }
}

fn yes_no(b: bool) -> Answer {
    Answer::Label(if b { "yes" } else { "no" }.to_string())
}

fn label(s: &str) -> Answer {
    Answer::Label(s.to_string())
}

impl Program {
    pub fn template(&self) -> Template {
        match self {
            Program::Exist { .. } => Template::Exist,
            Program::CountShape { .. } => Template::CountShape,
            Program::CountColor { .. } => Template::CountColor,
            Program::SameSize { .. } => Template::SameSize,
            Program::QueryColor { .. } => Template::QueryColor,
            Program::QueryShape { .. } => Template::QueryShape,
            Program::QuerySize { .. } => Template::QuerySize,
            Program::ActionAfter { .. } => Template::ActionAfter,
            Program::ActionBefore { .. } => Template::ActionBefore,
            Program::ColorAfter { .. } => Template::ColorAfter,
            Program::RepetitionCount { .. } => Template::RepetitionCount,
        }
    }

    pub fn task(&self) -> Task {
        self.template().task()
    }

    pub fn text(&self) -> String {
        match self {
            Program::Exist { filter } => format!("is there a {}", filter.phrase()),
            Program::CountShape { shape } => format!("how many {}s are there", shape.name()),
            Program::CountColor { color } => format!("how many {} things are there", color.name()),
            Program::SameSize { a, b } => {
                format!("is the {} the same size as the {}", a.phrase(), b.phrase())
            }
            Program::QueryColor { target } => format!("what color is the {}", target.phrase()),
            Program::QueryShape { target } => format!("what shape is the {}", target.phrase()),
            Program::QuerySize { target } => format!("what size is the {}", target.phrase()),
            Program::ActionAfter { subject, anchor, action } => format!(
                "what does the {} do after the {} {}",
                subject.phrase(),
                anchor.phrase(),
                verb_3rd(*action)
            ),
            Program::ActionBefore { subject, anchor, action } => format!(
                "what does the {} do before the {} {}",
                subject.phrase(),
                anchor.phrase(),
                verb_3rd(*action)
            ),
            Program::ColorAfter { anchor, action } => format!(
                "what color is the object that acts right after the {} {}",
                anchor.phrase(),
                verb_3rd(*action)
            ),
            Program::RepetitionCount { subject, action } => {
                format!("how many times does the {} {}", subject.phrase(), verb_base(*action))
            }
        }
    }
}

fn unique<'a>(scene: &'a SceneProgram, f: &Filter) -> Option<&'a Object> {
    let mut it = scene.objects.iter().filter(|o| f.matches(o));
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

fn unique_event<'a>(scene: &'a SceneProgram, object: usize, action: Action) -> Option<&'a Event> {
    let mut it = scene.events.iter().filter(|e| e.object == object && e.action == action);
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

/// Symbolic answer, or `None` when the question does not apply to the scene
/// (ambiguous or missing reference, no qualifying event).
pub fn oracle_answer(scene: &SceneProgram, program: &Program) -> Option<Answer> {
    match program {
        Program::Exist { filter } => Some(yes_no(scene.objects.iter().any(|o| filter.matches(o)))),
        Program::CountShape { shape } => {
            Some(Answer::Count(scene.objects.iter().filter(|o| o.shape == *shape).count() as u32))
        }
        Program::CountColor { color } => {
            Some(Answer::Count(scene.objects.iter().filter(|o| o.color == *color).count() as u32))
        }
        Program::SameSize { a, b } => {
            let (x, y) = (unique(scene, a)?, unique(scene, b)?);
            (x.id != y.id).then(|| yes_no(x.size == y.size))
        }
        Program::QueryColor { target } => Some(label(unique(scene, target)?.color.name())),
        Program::QueryShape { target } => Some(label(unique(scene, target)?.shape.name())),
        Program::QuerySize { target } => Some(label(unique(scene, target)?.size.name())),
        Program::ActionAfter { subject, anchor, action } => {
            let s = unique(scene, subject)?;
            let a = unique(scene, anchor)?;
            if s.id == a.id {
                return None;
            }
            let ev = unique_event(scene, a.id, *action)?;
            let next = scene
                .events
                .iter()
                .filter(|e| e.object == s.id && e.start >= ev.end)
                .min_by_key(|e| e.start)?;
            Some(label(next.action.name()))
        }
        Program::ActionBefore { subject, anchor, action } => {
            let s = unique(scene, subject)?;
            let a = unique(scene, anchor)?;
            if s.id == a.id {
                return None;
            }
            let ev = unique_event(scene, a.id, *action)?;
            let prev = scene
                .events
                .iter()
                .filter(|e| e.object == s.id && e.end <= ev.start)
                .max_by_key(|e| e.start)?;
            Some(label(prev.action.name()))
        }
        Program::ColorAfter { anchor, action } => {
            let a = unique(scene, anchor)?;
            let ev = unique_event(scene, a.id, *action)?;
            let next = scene.events.iter().filter(|e| e.start >= ev.end).min_by_key(|e| e.start)?;
            Some(label(scene.objects[next.object].color.name()))
        }
        Program::RepetitionCount { subject, action } => {
            if *action == Action::Stop {
                return None;
            }
            let s = unique(scene, subject)?;
            Some(Answer::Count(unique_event(scene, s.id, *action)?.repeat as u32))
        }
    }
}

fn all_filters() -> Vec<Filter> {
    let mut out = Vec::new();
    for shape in std::iter::once(None).chain(Shape::ALL.map(Some)) {
        for color in std::iter::once(None).chain(Color::ALL.map(Some)) {
            for size in std::iter::once(None).chain(Size::ALL.map(Some)) {
                if shape.is_some() || color.is_some() || size.is_some() {
                    out.push(Filter { shape, color, size });
                }
            }
        }
    }
    out
}

/// Every instance of `template` that has an answer on `scene`.
pub fn candidate_programs(scene: &SceneProgram, template: Template) -> Vec<Program> {
    let objects = &scene.objects;
    let events = &scene.events;
    let raw: Vec<Program> = match template {
        Template::Exist => all_filters().into_iter().map(|filter| Program::Exist { filter }).collect(),
        Template::CountShape => Shape::ALL.iter().map(|&shape| Program::CountShape { shape }).collect(),
        Template::CountColor => Color::ALL.iter().map(|&color| Program::CountColor { color }).collect(),
        Template::SameSize => objects
            .iter()
            .flat_map(|a| {
                objects.iter().filter(move |b| b.id != a.id).map(move |b| Program::SameSize {
                    a: Filter::exact(a),
                    b: Filter::exact(b),
                })
            })
            .collect(),
        Template::QueryColor => objects
            .iter()
            .map(|o| Program::QueryColor {
                target: Filter {
                    shape: Some(o.shape),
                    color: None,
                    size: Some(o.size),
                },
            })
            .collect(),
        Template::QueryShape => objects
            .iter()
            .map(|o| Program::QueryShape {
                target: Filter {
                    shape: None,
                    color: Some(o.color),
                    size: Some(o.size),
                },
            })
            .collect(),
        Template::QuerySize => objects
            .iter()
            .map(|o| Program::QuerySize { target: Filter::exact(o) })
            .collect(),
        Template::ActionAfter | Template::ActionBefore => events
            .iter()
            .flat_map(|ev| {
                objects.iter().filter(move |s| s.id != ev.object).map(move |s| {
                    let (subject, anchor) = (Filter::exact(s), Filter::exact(&objects[ev.object]));
                    if template == Template::ActionAfter {
                        Program::ActionAfter { subject, anchor, action: ev.action }
                    } else {
                        Program::ActionBefore { subject, anchor, action: ev.action }
                    }
                })
            })
            .collect(),
        Template::ColorAfter => events
            .iter()
            .map(|ev| Program::ColorAfter {
                anchor: Filter::exact(&objects[ev.object]),
                action: ev.action,
            })
            .collect(),
        Template::RepetitionCount => events
            .iter()
            .map(|ev| Program::RepetitionCount {
                subject: Filter::exact(&objects[ev.object]),
                action: ev.action,
            })
            .collect(),
    };
    let mut seen = std::collections::HashSet::new();
    raw.into_iter()
        .filter(|p| oracle_answer(scene, p).is_some() && seen.insert(p.clone()))
        .collect()
}

/// Picks an instance of `template` on `scene` whose answer is `target`.
/// `None` means the scene cannot produce that answer; the caller resamples.
pub fn generate_question<R: Rng>(
    scene: &SceneProgram,
    template: Template,
    target: &Answer,
    rng: &mut R,
) -> Option<(Program, Answer)> {
    let hits: Vec<Program> = candidate_programs(scene, template)
        .into_iter()
        .filter(|p| oracle_answer(scene, p).as_ref() == Some(target))
        .collect();
    if hits.is_empty() {
        return None;
    }
    let p = hits[rng.gen_range(0..hits.len())].clone();
    Some((p, target.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::generate_scene;
    use rand::SeedableRng;

    fn obj(id: usize, shape: Shape, color: Color, size: Size, x: usize) -> Object {
        Object { id, shape, color, size, x, y: 0 }
    }

    fn ev(object: usize, action: Action, start: usize, repeat: usize) -> Event {
        let pulses = vec![1; repeat];
        Event { object, action, start, end: start + 2 * repeat, repeat, pulses }
    }

    fn toy() -> SceneProgram {
        SceneProgram {
            id: 0,
            seed: 0,
            frames: 40,
            width: 4,
            height: 4,
            objects: vec![
                obj(0, Shape::Cube, Color::Red, Size::Big, 0),
                obj(1, Shape::Sphere, Color::Blue, Size::Small, 2),
            ],
            events: vec![
                ev(0, Action::Rotate, 1, 3),
                ev(1, Action::MoveUp, 10, 2),
                ev(0, Action::Stop, 20, 1),
            ],
        }
    }

    #[test]
    fn exist_without_match_is_no() {
        let p = Program::Exist {
            filter: Filter { shape: Some(Shape::Cylinder), ..Filter::default() },
        };
        assert_eq!(oracle_answer(&toy(), &p), Some(label("no")));
    }

    #[test]
    fn query_only_object_color() {
        let mut s = toy();
        s.objects.truncate(1);
        s.events.clear();
        let p = Program::QueryColor { target: Filter { shape: Some(Shape::Cube), ..Filter::default() } };
        assert_eq!(oracle_answer(&s, &p), Some(label("red")));
    }

    #[test]
    fn before_and_after_pick_neighbouring_events() {
        let s = toy();
        let red = Filter::exact(&s.objects[0]);
        let blue = Filter::exact(&s.objects[1]);
        let after = Program::ActionAfter { subject: red, anchor: blue, action: Action::MoveUp };
        assert_eq!(oracle_answer(&s, &after), Some(label("stop")));
        let before = Program::ActionBefore { subject: red, anchor: blue, action: Action::MoveUp };
        assert_eq!(oracle_answer(&s, &before), Some(label("rotate")));
        let color = Program::ColorAfter { anchor: red, action: Action::Rotate };
        assert_eq!(oracle_answer(&s, &color), Some(label("blue")));
        let nothing = Program::ActionAfter { subject: blue, anchor: red, action: Action::Stop };
        assert_eq!(oracle_answer(&s, &nothing), None);
    }

    #[test]
    fn repetition_count_is_repeat() {
        let s = toy();
        let red = Filter::exact(&s.objects[0]);
        let p = Program::RepetitionCount { subject: red, action: Action::Rotate };
        assert_eq!(oracle_answer(&s, &p), Some(Answer::Count(3)));
        let stop = Program::RepetitionCount { subject: red, action: Action::Stop };
        assert_eq!(oracle_answer(&s, &stop), None);
    }

    #[test]
    fn generated_questions_hit_their_target() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut hits = 0;
        for seed in 0..50 {
            let scene = generate_scene(seed);
            for t in Template::ALL {
                for target in t.answer_space(4, 4) {
                    if let Some((p, a)) = generate_question(&scene, t, &target, &mut rng) {
                        assert_eq!(a, target);
                        assert_eq!(oracle_answer(&scene, &p), Some(target.clone()));
                        assert_eq!(p.template(), t);
                        hits += 1;
                    }
                }
            }
        }
        assert!(hits > 500);
    }

    #[test]
    fn answer_serialization_keeps_kind() {
        assert_eq!(serde_json::to_string(&Answer::Count(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&label("red")).unwrap(), "\"red\"");
        let back: Answer = serde_json::from_str("2").unwrap();
        assert_eq!(back, Answer::Count(2));
        let p = Program::ColorAfter { anchor: Filter::default(), action: Action::MoveLeft };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<Program>(&s).unwrap(), p);
    }
}
