//! Synthetic video question answering: grid-world scenes, templated questions and a symbolic oracle.

pub mod corpus;
pub mod question;
pub mod scene;

pub use corpus::{generate_corpus, Corpus, CorpusConfig, Manifest, QaItem, Split};
pub use question::{candidate_programs, generate_question, oracle_answer, Answer, Filter, Program, Task, Template};
pub use scene::{
    decode_features, generate_scene, generate_scene_with, render_features, Action, Color, Event, Object, SceneConfig,
    SceneProgram, Shape, Size,
};
