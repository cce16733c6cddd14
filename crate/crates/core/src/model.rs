//! Full question answering network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::{CountHead, OpenEndedHead};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::language::LanguageEncoder;
use crate::mac::{AttentionTrace, Mac};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::video::{clip_frame_indices, Crn, CrnConfig, FeatureVolume, SubsetPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LinguisticOnly,
    LingSframe,
    SframeMac,
    AvgpoolMac,
    TrnMac,
    CrnMlp,
    CrnMac,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::LinguisticOnly,
        Variant::LingSframe,
        Variant::SframeMac,
        Variant::AvgpoolMac,
        Variant::TrnMac,
        Variant::CrnMlp,
        Variant::CrnMac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LinguisticOnly => "linguistic_only",
            Variant::LingSframe => "ling_sframe",
            Variant::SframeMac => "sframe_mac",
            Variant::AvgpoolMac => "avgpool_mac",
            Variant::TrnMac => "trn_mac",
            Variant::CrnMlp => "crn_mlp",
            Variant::CrnMac => "crn_mac",
        }
    }

    pub fn uses_mac(self) -> bool {
        matches!(
            self,
            Variant::SframeMac | Variant::AvgpoolMac | Variant::TrnMac | Variant::CrnMac
        )
    }

    pub fn uses_crn(self) -> bool {
        matches!(self, Variant::TrnMac | Variant::CrnMlp | Variant::CrnMac)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub answers: usize,
    pub embed_dim: usize,
    pub dim: usize,
    pub steps: usize,
    pub clips: usize,
    pub clip_len: usize,
    pub max_order: usize,
    /// Sparsely sampled frames for the average-pooling and frame-level relation baselines.
    pub sampled_frames: usize,
    pub feature_dim: usize,
    pub cells: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// CRN geometry actually built: the frame-level variant uses single-frame clips.
    pub fn crn_config(&self) -> CrnConfig {
        let (clips, clip_len) = match self.variant {
            Variant::TrnMac => (self.sampled_frames, 1),
            _ => (self.clips, self.clip_len),
        };
        CrnConfig {
            clips,
            clip_len,
            max_order: self.max_order.min(clips),
            feature_dim: self.feature_dim,
            dim: self.dim,
        }
    }
}

#[derive(Clone, Debug)]
enum Visual {
    None,
    Frame(Linear),
    Crn(Crn),
}

#[derive(Clone, Debug)]
enum Reasoner {
    Mlp(Linear),
    Mac(Mac),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub language: LanguageEncoder,
    visual: Visual,
    reasoner: Reasoner,
    pub open_ended: OpenEndedHead,
    pub count: CountHead,
}

/// One video/question pair.
#[derive(Clone, Copy, Debug)]
pub struct Inputs<'a> {
    pub tokens: &'a [usize],
    pub volume: &'a FeatureVolume,
    /// Frame used by the single-frame variants.
    pub frame: usize,
}

/// Training-time dropout on the question vector and the knowledge base.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub memory: Var,
    pub question: Var,
    pub knowledge: Option<Var>,
    pub temporal_attention: Option<Var>,
    pub trace: Option<AttentionTrace>,
}

fn dropout<F: Real, R: Rng>(g: &mut Graph<F>, x: Var, d: &mut Option<Dropout<'_, R>>) -> Result<Var> {
    match d {
        Some(Dropout { rate, rng }) if *rate > 0.0 => {
            let keep = 1.0 - *rate;
            let shape = g.shape(x).to_vec();
            let n: usize = shape.iter().product();
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            let m = g.constant(Tensor::from_f64(shape, &mask)?);
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

impl Model {
    pub fn new<F: Real>(store: &mut ParamStore<F>, config: ModelConfig) -> Result<Self> {
        let d = config.dim;
        if config.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        let language = LanguageEncoder::new(store, config.vocab_size, config.embed_dim, d, config.max_len)?;
        let visual = match config.variant {
            Variant::LinguisticOnly => Visual::None,
            Variant::LingSframe | Variant::SframeMac | Variant::AvgpoolMac => {
                Visual::Frame(Linear::new(store, "visual.project", config.feature_dim, d, true)?)
            }
            _ => Visual::Crn(Crn::new(store, "crn", config.crn_config())?),
        };
        let reasoner = match config.variant {
            Variant::LinguisticOnly => Reasoner::Mlp(Linear::new(store, "reason.mlp", d, d, true)?),
            Variant::LingSframe | Variant::CrnMlp => {
                Reasoner::Mlp(Linear::new(store, "reason.mlp", config.cells * d + d, d, true)?)
            }
            _ => Reasoner::Mac(Mac::new(store, "mac", d, config.steps)?),
        };
        Ok(Model {
            config,
            language,
            visual,
            reasoner,
            open_ended: OpenEndedHead::new(store, "head.open", d, config.answers)?,
            count: CountHead::new(store, "head.count", d)?,
        })
    }

    pub fn crn(&self) -> Option<&Crn> {
        match &self.visual {
            Visual::Crn(c) => Some(c),
            _ => None,
        }
    }

    pub fn mac(&self) -> Option<&Mac> {
        match &self.reasoner {
            Reasoner::Mac(m) => Some(m),
            _ => None,
        }
    }

    /// `[cells, d]` knowledge base for the visual variants.
    fn knowledge<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        inputs: &Inputs<'_>,
        question: Var,
        policy: &SubsetPolicy,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let n = inputs.volume.num_frames();
        let cells = inputs.volume.width() * inputs.volume.height();
        if cells != self.config.cells || inputs.volume.depth() != self.config.feature_dim {
            return Err(Error::dim(
                "video",
                &[cells, inputs.volume.depth()],
                &[self.config.cells, self.config.feature_dim],
            ));
        }
        match &self.visual {
            Visual::None => Ok((None, None)),
            Visual::Frame(project) => {
                let frames = inputs.volume.to_graph(g);
                let raw = match self.config.variant {
                    Variant::AvgpoolMac => {
                        let idx: Vec<usize> = clip_frame_indices(n, self.config.sampled_frames, 1)?
                            .into_iter()
                            .flatten()
                            .collect();
                        let picked = g.rows(frames, &idx)?;
                        g.mean_axis(picked, 0)?
                    }
                    _ => {
                        if inputs.frame >= n {
                            return Err(Error::contract(format!("frame {} of {n}", inputs.frame)));
                        }
                        g.row(frames, inputs.frame)?
                    }
                };
                Ok((Some(project.forward(g, store, raw)?), None))
            }
            Visual::Crn(crn) => {
                let frames = inputs.volume.to_graph(g);
                let out = crn.forward(g, store, frames, question, policy)?;
                Ok((Some(out.knowledge), Some(out.attention)))
            }
        }
    }

    pub fn forward<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        inputs: &Inputs<'_>,
        policy: &SubsetPolicy,
        mut drop: Option<Dropout<'_, R>>,
    ) -> Result<Forward> {
        let mut encoded = self.language.encode_question(g, store, inputs.tokens)?;
        encoded.question_vector = dropout(g, encoded.question_vector, &mut drop)?;
        let question = encoded.question_vector;
        let (knowledge, temporal_attention) = self.knowledge(g, store, inputs, question, policy)?;
        let knowledge = match knowledge {
            Some(k) => Some(dropout(g, k, &mut drop)?),
            None => None,
        };
        let (memory, trace) = match (&self.reasoner, knowledge) {
            (Reasoner::Mac(mac), Some(kb)) => {
                let (m, trace) = mac.run(g, store, &encoded, kb, mac.steps)?;
                (m, Some(trace))
            }
            (Reasoner::Mlp(mlp), kb) => {
                let input = match kb {
                    Some(kb) => {
                        let flat = g.reshape(kb, &[self.config.cells * self.config.dim])?;
                        g.concat_last(&[flat, question])?
                    }
                    None => question,
                };
                let pre = mlp.forward(g, store, input)?;
                (g.elu(pre), None)
            }
            (Reasoner::Mac(_), None) => return Err(Error::contract("MAC needs a knowledge base")),
        };
        Ok(Forward {
            memory,
            question,
            knowledge,
            temporal_attention,
            trace,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.language.params();
        match &self.visual {
            Visual::None => {}
            Visual::Frame(l) => v.extend(l.params()),
            Visual::Crn(c) => v.extend(c.params()),
        }
        match &self.reasoner {
            Reasoner::Mlp(l) => v.extend(l.params()),
            Reasoner::Mac(m) => v.extend(m.params()),
        }
        v.extend(self.open_ended.params());
        v.extend(self.count.params());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            vocab_size: 12,
            answers: 5,
            embed_dim: 6,
            dim: 4,
            steps: 2,
            clips: 3,
            clip_len: 2,
            max_order: 3,
            sampled_frames: 4,
            feature_dim: 5,
            cells: 4,
            max_len: 10,
        }
    }

    fn volume() -> FeatureVolume {
        let data: Vec<f32> = (0..8 * 2 * 2 * 5).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
        FeatureVolume::new(Tensor::new([8, 2, 2, 5], data).unwrap()).unwrap()
    }

    #[test]
    fn every_variant_runs_and_trains_its_own_params() {
        let vol = volume();
        for v in Variant::ALL {
            let mut store = ParamStore::<f64>::new(1);
            let model = Model::new(&mut store, config(v)).unwrap();
            assert_eq!(model.params().len(), store.len(), "{v}");
            let mut g = Graph::new();
            let inputs = Inputs { tokens: &[3, 4, 5], volume: &vol, frame: 2 };
            let f = model
                .forward::<f64, ChaCha8Rng>(&mut g, &store, &inputs, &SubsetPolicy::Exhaustive, None)
                .unwrap();
            assert_eq!(g.shape(f.memory), &[4]);
            assert_eq!(model.mac().is_some(), v.uses_mac());
            assert_eq!(model.crn().is_some(), v.uses_crn());
            let logits = model.open_ended.logits(&mut g, &store, f.memory, f.question).unwrap();
            let loss = crate::decoders::cross_entropy(&mut g, logits, 1).unwrap();
            g.backward(loss).unwrap();
            g.flush_param_grads(&mut store);
            let embedding_grad = store.grad(model.language.embedding).data().iter().any(|&x| x != 0.0);
            assert!(embedding_grad, "{v}");
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("mystery".parse::<Variant>().is_err());
    }

    #[test]
    fn single_frame_variant_depends_on_chosen_frame() {
        let vol = volume();
        let mut store = ParamStore::<f64>::new(4);
        let model = Model::new(&mut store, config(Variant::SframeMac)).unwrap();
        let run = |frame| {
            let mut g = Graph::new();
            let inputs = Inputs { tokens: &[3, 4], volume: &vol, frame };
            let f = model
                .forward::<f64, ChaCha8Rng>(&mut g, &store, &inputs, &SubsetPolicy::Exhaustive, None)
                .unwrap();
            g.value(f.memory).data().to_vec()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(6));
        let mut g = Graph::new();
        let inputs = Inputs { tokens: &[3], volume: &vol, frame: 8 };
        assert!(model
            .forward::<f64, ChaCha8Rng>(&mut g, &store, &inputs, &SubsetPolicy::Exhaustive, None)
            .is_err());
    }
}
