//! Central-difference gradient checks over every module at toy sizes, in f64.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoders::{cross_entropy, hinge_loss, squared_error, Candidate, MultichoiceHead};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{Inputs, Model, ModelConfig, Variant};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::synth::scene::channel;
use crate::synth::{generate_scene, render_features};
use crate::tensor::Tensor;
use crate::video::SubsetPolicy;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    /// Probes per module.
    pub probes: usize,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub dim: usize,
    pub steps: usize,
    pub clips: usize,
    pub clip_len: usize,
    /// Test fixture: scales the analytic gradient of this module before comparison.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            probes: 100,
            seed: 0,
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            dim: 8,
            steps: 3,
            clips: 3,
            clip_len: 2,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleReport {
    pub module: String,
    pub probes: usize,
    pub max_rel: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub modules: Vec<ModuleReport>,
    /// Max relative error on a single affine layer under a linear loss.
    pub linear_max_rel: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.modules.iter().all(|m| m.max_rel < self.tolerance)
    }

    pub fn max_rel(&self) -> f64 {
        self.modules.iter().map(|m| m.max_rel).fold(0.0, f64::max)
    }

    pub fn module(&self, name: &str) -> Option<&ModuleReport> {
        self.modules.iter().find(|m| m.module == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.modules {
            let tag = if m.max_rel < self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{:<24} probes {:>4}  max rel {:.3e}  {tag}", m.module, m.probes, m.max_rel)?;
        }
        writeln!(f, "{:<24} max rel {:.3e}", "linear sub-path", self.linear_max_rel)?;
        writeln!(
            f,
            "overall max rel {:.3e} (tolerance {:.0e}) in {:.1}s: {}",
            self.max_rel(),
            self.tolerance,
            self.seconds,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Groups a parameter name into the module it belongs to.
pub fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let group = match parts.as_slice() {
        ["lang", "embedding", ..] => "language.embedding",
        ["lang", "lstm", ..] => "language.lstm",
        ["crn", "project", ..] => "crn.project",
        ["crn", "att", ..] => "crn.temporal_attention",
        ["crn", "h", ..] => "crn.aggregate",
        ["crn", g, ..] if g.starts_with('g') => "crn.relation",
        ["mac", "control", ..] => "mac.control",
        ["mac", "read", ..] => "mac.read",
        ["mac", "write", ..] => "mac.write",
        ["mac", "c0" | "m0", ..] => "mac.initial_state",
        ["mac", q, ..] if q.starts_with('q') => "mac.question",
        ["head", "open", ..] => "decoder.open_ended",
        ["head", "count", ..] => "decoder.count",
        ["head", "multi", ..] => "decoder.multichoice",
        ["visual", ..] => "visual.project",
        ["reason", ..] => "reasoner.mlp",
        _ => return parts[0].to_string(),
    };
    group.to_string()
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

fn loss_value(store: &ParamStore<f64>, build: &Builder<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let l = build(&mut g, store)?;
    Ok(g.value(l).item())
}

fn analytic(store: &ParamStore<f64>, build: &Builder<'_>) -> Result<ParamStore<f64>> {
    let mut g = Graph::new();
    let l = build(&mut g, store)?;
    g.backward(l)?;
    let mut s = store.clone();
    s.zero_grad();
    g.flush_param_grads(&mut s);
    Ok(s)
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Probes `cfg.probes` random elements per module; returns the max relative error per module.
fn check(
    cfg: &GradcheckConfig,
    store: &mut ParamStore<f64>,
    build: &Builder<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, (usize, f64)>> {
    let grads = analytic(store, build)?;
    let mut by_module: BTreeMap<String, Vec<(crate::params::ParamId, usize)>> = BTreeMap::new();
    for id in store.ids().collect::<Vec<_>>() {
        let m = module_of(store.name(id));
        let n = store.value(id).len();
        by_module.entry(m).or_default().extend((0..n).map(|i| (id, i)));
    }
    let mut out = BTreeMap::new();
    for (module, elems) in by_module {
        let mut worst = 0.0f64;
        for _ in 0..cfg.probes {
            let (id, i) = elems[rng.gen_range(0..elems.len())];
            let mut a = grads.grad(id).data()[i];
            if cfg.corrupt.as_deref() == Some(module.as_str()) {
                a = a * 1.5 + 1e-3;
            }
            let x = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = x + cfg.eps;
            let up = loss_value(store, build)?;
            store.value_mut(id).data_mut()[i] = x - cfg.eps;
            let down = loss_value(store, build)?;
            store.value_mut(id).data_mut()[i] = x;
            let n = (up - down) / (2.0 * cfg.eps);
            worst = worst.max(relative_error(a, n, cfg.floor));
        }
        out.insert(module, (cfg.probes, worst));
    }
    Ok(out)
}

fn toy_model_config(cfg: &GradcheckConfig, variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        vocab_size: 12,
        answers: 5,
        embed_dim: 6,
        dim: cfg.dim,
        steps: cfg.steps,
        clips: cfg.clips,
        clip_len: cfg.clip_len,
        max_order: cfg.clips,
        sampled_frames: cfg.clips * cfg.clip_len,
        feature_dim: channel::DEPTH,
        cells: 16,
        max_len: 8,
    }
}

fn merge(into: &mut BTreeMap<String, (usize, f64)>, from: BTreeMap<String, (usize, f64)>) {
    for (k, (p, e)) in from {
        let slot = into.entry(k).or_insert((0, 0.0));
        slot.0 += p;
        slot.1 = slot.1.max(e);
    }
}

fn linear_sub_path(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::<f64>::new(cfg.seed);
    let lin = Linear::new(&mut store, "linear", 5, 4, true)?;
    // unit-scale magnitudes keep every gradient element well above the difference resolution
    let mut unit = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect()
    };
    let x = unit(5);
    let c = unit(4);
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let xv = g.constant(Tensor::from_f64([5], &x)?);
        let cv = g.constant(Tensor::from_f64([4], &c)?);
        let y = lin.forward(g, s, xv)?;
        let p = g.mul(y, cv)?;
        Ok(g.sum_all(p))
    };
    let sub = GradcheckConfig {
        corrupt: None,
        ..cfg.clone()
    };
    let r = check(&sub, &mut store, &build, rng)?;
    Ok(r.values().map(|(_, e)| *e).fold(0.0, f64::max))
}

/// Runs the check over the full model variants and the multichoice head.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let volume = render_features(&generate_scene(cfg.seed));
    let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..12)).collect();
    let mut modules = BTreeMap::new();

    for variant in [Variant::CrnMac, Variant::AvgpoolMac, Variant::CrnMlp] {
        let mut store = ParamStore::<f64>::new(cfg.seed);
        let model = Model::new(&mut store, toy_model_config(cfg, variant))?;
        let inputs = Inputs {
            tokens: &tokens,
            volume: &volume,
            frame: 0,
        };
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let f = model.forward::<f64, ChaCha8Rng>(g, s, &inputs, &SubsetPolicy::Exhaustive, None)?;
            let logits = model.open_ended.logits(g, s, f.memory, f.question)?;
            let ce = cross_entropy(g, logits, 2)?;
            let score = model.count.score(g, s, f.memory, f.question)?;
            let se = squared_error(g, score, 1.0)?;
            g.add(ce, se)
        };
        merge(&mut modules, check(cfg, &mut store, &build, &mut rng)?);
    }

    let mut store = ParamStore::<f64>::new(cfg.seed);
    let head = MultichoiceHead::new(&mut store, "head.multi", cfg.dim)?;
    let vecs: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let d = cfg.dim;
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let v: Vec<Var> = vecs
            .iter()
            .map(|x| Tensor::from_f64([d], x).map(|t| g.constant(t)))
            .collect::<Result<_>>()?;
        let cands: Vec<Candidate> = v[2..]
            .chunks(2)
            .map(|c| Candidate { memory: c[0], encoding: c[1] })
            .collect();
        let scores = head.scores(g, s, v[0], v[1], &cands)?;
        hinge_loss(g, scores[0], &scores[1..])
    };
    merge(&mut modules, check(cfg, &mut store, &build, &mut rng)?);

    let linear_max_rel = linear_sub_path(cfg, &mut rng)?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        modules: modules
            .into_iter()
            .map(|(module, (probes, max_rel))| ModuleReport { module, probes, max_rel })
            .collect(),
        linear_max_rel,
        seconds: start.elapsed().as_secs_f64(),
    })
}
