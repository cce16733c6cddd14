//! Clip-based relation network: clip segmentation, question-conditioned temporal
//! attention pooling, k-order relations over ordered clip subsets, and the
//! knowledge base they sum into.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{mix_seed, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const FVOL_MAGIC: &[u8; 4] = b"FVOL";
pub const FVOL_VERSION: u32 = 1;

/// Raw per-frame spatial features, `[N, W, H, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub frames: Tensor<f32>,
    pub fps: Option<f32>,
}

impl FeatureVolume {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::dim("feature volume", frames.shape(), &[0, 0, 0, 0]));
        }
        Ok(FeatureVolume { frames, fps: None })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn depth(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Feature vector at frame `t`, cell `(x, y)`.
    pub fn cell(&self, t: usize, x: usize, y: usize) -> &[f32] {
        let (w, h, d) = (self.width(), self.height(), self.depth());
        let base = ((t * w + x) * h + y) * d;
        &self.frames.data()[base..base + d]
    }

    /// Frames as a `[N, W·H, D]` graph constant in the model's precision.
    pub fn to_graph<F: Real>(&self, g: &mut Graph<F>) -> Var {
        let (n, cells, d) = (self.num_frames(), self.width() * self.height(), self.depth());
        let t = self
            .frames
            .cast::<F>()
            .reshaped([n, cells, d])
            .expect("same element count");
        g.constant(t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FVOL_MAGIC)?;
        w.write_all(&FVOL_VERSION.to_le_bytes())?;
        for &e in self.frames.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.frames.len() * 4);
        for v in self.frames.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FVOL_MAGIC {
            return Err(Error::format("FVOL", format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        let mut next = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next(&mut r)?;
        if version != FVOL_VERSION {
            return Err(Error::format("FVOL", format!("unsupported version {version}")));
        }
        let mut shape = [0usize; 4];
        for e in &mut shape {
            *e = next(&mut r)? as usize;
            if *e == 0 {
                return Err(Error::format("FVOL", "zero extent in header"));
            }
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::format("FVOL", format!("truncated payload: {e}")))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format("FVOL", format!("{} trailing bytes", rest.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureVolume::new(Tensor::new(shape.to_vec(), data)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Frame indices of `clips` clips of `clip_len` consecutive frames with evenly
/// spaced centers. Videos shorter than `clips·clip_len` are padded by
/// repeating their last frame.
pub fn clip_frame_indices(num_frames: usize, clips: usize, clip_len: usize) -> Result<Vec<Vec<usize>>> {
    if clips == 0 || clip_len == 0 {
        return Err(Error::contract("clip count and length must be positive"));
    }
    if num_frames < clips {
        return Err(Error::ShortVideo {
            frames: num_frames,
            needed: clips,
        });
    }
    let padded = num_frames.max(clips * clip_len);
    Ok((0..clips)
        .map(|l| {
            // start = l·N/L + (N/L − T)/2, floored
            let start = (2 * l * padded + padded - clip_len * clips) / (2 * clips);
            (start..start + clip_len)
                .map(|t| t.min(num_frames - 1))
                .collect()
        })
        .collect())
}

/// Which ordered clip subsets feed a k-order relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsetPolicy {
    Exhaustive,
    /// All subsets when there are at most `cap`, else `cap` drawn without replacement.
    Capped { cap: usize, seed: u64 },
}

impl Default for SubsetPolicy {
    fn default() -> Self {
        SubsetPolicy::Capped { cap: 32, seed: 0 }
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Strictly increasing k-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let mut i = k;
        while i > 0 && cur[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

impl SubsetPolicy {
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            SubsetPolicy::Capped { cap, .. } => SubsetPolicy::Capped { cap, seed },
            e => e,
        }
    }

    pub fn select(&self, clips: usize, k: usize) -> Result<Vec<Vec<usize>>> {
        if k < 2 || k > clips {
            return Err(Error::contract(format!(
                "relation order {k} must lie in 2..={clips}"
            )));
        }
        let all = combinations(clips, k);
        let chosen = match *self {
            SubsetPolicy::Exhaustive => all,
            SubsetPolicy::Capped { cap, .. } if all.len() <= cap => all,
            SubsetPolicy::Capped { cap, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, k as u64));
                let mut picks = sample(&mut rng, all.len(), cap).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| all[i].clone()).collect()
            }
        };
        if chosen.is_empty() {
            return Err(Error::contract("empty subset selection"));
        }
        Ok(chosen)
    }
}

/// `h( Σ_subsets g(Ĉ_{l1}, …, Ĉ_{lk}) )` over `pooled: [L, cells, d]`.
///
/// `g_theta` receives one `[n_subsets, cells, d]` tensor per subset slot and
/// must return `[n_subsets, cells, d]`.
pub fn relate<F, G, H>(
    g: &mut Graph<F>,
    pooled: Var,
    subsets: &[Vec<usize>],
    mut g_theta: G,
    mut h_phi: H,
) -> Result<Var>
where
    F: Real,
    G: FnMut(&mut Graph<F>, &[Var]) -> Result<Var>,
    H: FnMut(&mut Graph<F>, Var) -> Result<Var>,
{
    let k = subsets
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::contract("empty subset selection"))?;
    let clips = g.shape(pooled)[0];
    for s in subsets {
        if s.len() != k || s.windows(2).any(|w| w[0] >= w[1]) || s[k - 1] >= clips {
            return Err(Error::contract(format!("invalid clip subset {s:?}")));
        }
    }
    let slots: Vec<Var> = (0..k)
        .map(|j| {
            let idx: Vec<usize> = subsets.iter().map(|s| s[j]).collect();
            g.rows(pooled, &idx)
        })
        .collect::<Result<_>>()?;
    let related = g_theta(g, &slots)?;
    let summed = g.sum_axis(related, 0)?;
    h_phi(g, summed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrnConfig {
    pub clips: usize,
    pub clip_len: usize,
    pub max_order: usize,
    pub feature_dim: usize,
    pub dim: usize,
}

/// Position-wise `ELU(W2 · ELU(W1 · [x1; …; xk] + b1) + b2)` for one order.
#[derive(Clone, Copy, Debug)]
pub struct RelationMlp {
    pub order: usize,
    pub first: Linear,
    pub second: Linear,
}

impl RelationMlp {
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, slots: &[Var]) -> Result<Var> {
        let x = g.concat_last(slots)?;
        let h = self.first.forward(g, store, x)?;
        let h = g.elu(h);
        let y = self.second.forward(g, store, h)?;
        Ok(g.elu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Crn {
    pub config: CrnConfig,
    /// Frame projection D → d.
    pub project: Linear,
    pub att_question: Linear,
    pub att_visual: Linear,
    /// Scalar score per frame, d → 1.
    pub att_score: Linear,
    /// One relation MLP per order 2..=K.
    pub relations: Vec<RelationMlp>,
    /// Shared across orders.
    pub aggregate: Linear,
}

/// Pieces of a CRN forward pass kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct CrnOutput {
    /// `[L, T, cells, d]` projected clip frames.
    pub clips: Var,
    /// `[L, T]` temporal attention weights.
    pub attention: Var,
    /// `[L, cells, d]` attention-pooled clip features.
    pub pooled: Var,
    /// `[cells, d]` knowledge base.
    pub knowledge: Var,
}

impl Crn {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, config: CrnConfig) -> Result<Self> {
        if config.max_order < 2 {
            return Err(Error::contract(format!(
                "max relation order {} must be at least 2",
                config.max_order
            )));
        }
        if config.max_order > config.clips {
            return Err(Error::contract(format!(
                "max relation order {} exceeds clip count {}",
                config.max_order, config.clips
            )));
        }
        let d = config.dim;
        let project = Linear::new(store, &format!("{name}.project"), config.feature_dim, d, true)?;
        let att_question = Linear::new(store, &format!("{name}.att.q"), d, d, true)?;
        let att_visual = Linear::new(store, &format!("{name}.att.v"), d, d, true)?;
        let att_score = Linear::new(store, &format!("{name}.att.score"), d, 1, false)?;
        let relations = (2..=config.max_order)
            .map(|k| {
                Ok(RelationMlp {
                    order: k,
                    first: Linear::new(store, &format!("{name}.g{k}.0"), k * d, d, true)?,
                    second: Linear::new(store, &format!("{name}.g{k}.1"), d, d, true)?,
                })
            })
            .collect::<Result<_>>()?;
        let aggregate = Linear::new(store, &format!("{name}.h"), d, d, true)?;
        Ok(Crn {
            config,
            project,
            att_question,
            att_visual,
            att_score,
            relations,
            aggregate,
        })
    }

    /// Gathers the clip frames and projects them: `[N, cells, D]` → `[L, T, cells, d]`.
    pub fn segment_clips<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, frames: Var) -> Result<Var> {
        let fs = g.shape(frames).to_vec();
        if fs.len() != 3 || fs[2] != self.config.feature_dim {
            return Err(Error::dim("segment_clips", &fs, &[0, 0, self.config.feature_dim]));
        }
        let CrnConfig { clips, clip_len, .. } = self.config;
        let idx: Vec<usize> = clip_frame_indices(fs[0], clips, clip_len)?
            .into_iter()
            .flatten()
            .collect();
        let picked = g.rows(frames, &idx)?;
        let projected = self.project.forward(g, store, picked)?;
        g.reshape(projected, &[clips, clip_len, fs[1], self.config.dim])
    }

    /// Question-conditioned soft pooling over the frames of each clip.
    /// Returns `(pooled [L, cells, d], attention [L, T])`.
    pub fn temporal_attention_pool<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        clips: Var,
        question: Var,
    ) -> Result<(Var, Var)> {
        let cs = g.shape(clips).to_vec();
        if g.shape(question) != [self.config.dim] {
            return Err(Error::dim("temporal_attention_pool", g.shape(question), &[self.config.dim]));
        }
        let (l, t) = (cs[0], cs[1]);
        let spatial_mean = g.mean_axis(clips, 2)?;
        let qa = self.att_question.forward(g, store, question)?;
        let va = self.att_visual.forward(g, store, spatial_mean)?;
        let joint = g.mul(va, qa)?;
        let scores = self.att_score.forward(g, store, joint)?;
        let scores = g.reshape(scores, &[l, t])?;
        let attention = g.softmax(scores);
        let pooled = g.weighted_sum(attention, clips)?;
        Ok((pooled, attention))
    }

    pub fn relation(&self, k: usize) -> Result<&RelationMlp> {
        self.relations
            .iter()
            .find(|r| r.order == k)
            .ok_or_else(|| Error::contract(format!("no relation module of order {k}")))
    }

    /// k-order relational representation over `pooled: [L, cells, d]`.
    pub fn k_order<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        pooled: Var,
        k: usize,
        policy: &SubsetPolicy,
    ) -> Result<Var> {
        let clips = g.shape(pooled)[0];
        let subsets = policy.select(clips, k)?;
        let mlp = *self.relation(k)?;
        let agg = self.aggregate;
        relate(
            g,
            pooled,
            &subsets,
            |g, slots| mlp.forward(g, store, slots),
            |g, x| agg.forward(g, store, x),
        )
    }

    /// `Σ_{k=2..K} R^(k)`, `[cells, d]`.
    pub fn build_knowledge_base<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        pooled: Var,
        max_order: usize,
        policy: &SubsetPolicy,
    ) -> Result<Var> {
        if max_order < 2 {
            return Err(Error::contract(format!("max order {max_order} < 2")));
        }
        let clips = g.shape(pooled)[0];
        if max_order > clips {
            return Err(Error::contract(format!(
                "max order {max_order} exceeds clip count {clips}"
            )));
        }
        let mut kb = self.k_order(g, store, pooled, 2, policy)?;
        for k in 3..=max_order {
            let r = self.k_order(g, store, pooled, k, policy)?;
            kb = g.add(kb, r)?;
        }
        Ok(kb)
    }

    /// Full pipeline from raw frames `[N, cells, D]` and question vector `[d]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        frames: Var,
        question: Var,
        policy: &SubsetPolicy,
    ) -> Result<CrnOutput> {
        let clips = self.segment_clips(g, store, frames)?;
        let (pooled, attention) = self.temporal_attention_pool(g, store, clips, question)?;
        let knowledge = self.build_knowledge_base(g, store, pooled, self.config.max_order, policy)?;
        Ok(CrnOutput {
            clips,
            attention,
            pooled,
            knowledge,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for l in [self.project, self.att_question, self.att_visual, self.att_score] {
            v.extend(l.params());
        }
        for r in &self.relations {
            v.extend(r.first.params());
            v.extend(r.second.params());
        }
        v.extend(self.aggregate.params());
        v
    }
}

/// Frame-level relation network: the CRN pipeline with single-frame clips.
pub fn trn_mode<F: Real>(
    crn: &Crn,
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    frames: Var,
    question: Var,
    policy: &SubsetPolicy,
) -> Result<CrnOutput> {
    if crn.config.clip_len != 1 {
        return Err(Error::contract(format!(
            "TRN mode needs single-frame clips, got clip length {}",
            crn.config.clip_len
        )));
    }
    crn.forward(g, store, frames, question, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn five_clips_of_eight_from_forty_frames() {
        let idx = clip_frame_indices(40, 5, 8).unwrap();
        for (l, clip) in idx.iter().enumerate() {
            assert_eq!(clip, &(8 * l..8 * l + 8).collect::<Vec<_>>());
        }
        assert_eq!(clip_frame_indices(8, 2, 4).unwrap(), vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
    }

    #[test]
    fn short_video_is_edge_padded() {
        let idx = clip_frame_indices(6, 1, 8).unwrap();
        assert_eq!(idx, vec![vec![0, 1, 2, 3, 4, 5, 5, 5]]);
        // re-count: every real frame once, the last one replicated to fill
        let mut counts = [0usize; 6];
        idx[0].iter().for_each(|&i| counts[i] += 1);
        assert_eq!(counts, [1, 1, 1, 1, 1, 3]);
        assert!(matches!(
            clip_frame_indices(3, 5, 1),
            Err(Error::ShortVideo { frames: 3, needed: 5 })
        ));
    }

    #[test]
    fn single_frame_clips_take_segment_middles() {
        let idx = clip_frame_indices(40, 8, 1).unwrap();
        let flat: Vec<usize> = idx.into_iter().flatten().collect();
        assert_eq!(flat, vec![2, 7, 12, 17, 22, 27, 32, 37]);
    }

    #[test]
    fn combinations_counts() {
        assert_eq!(combinations(2, 2), vec![vec![0, 1]]);
        assert_eq!(combinations(5, 2).len(), 10);
        assert_eq!(binomial(8, 4), 70);
    }

    #[test]
    fn capped_policy_samples_and_keeps_order() {
        let p = SubsetPolicy::Capped { cap: 32, seed: 5 };
        let s = p.select(8, 4).unwrap();
        assert_eq!(s.len(), 32);
        let mut uniq = s.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 32);
        assert!(s.iter().all(|c| c.windows(2).all(|w| w[0] < w[1])));
        assert_eq!(s, p.select(8, 4).unwrap());
        assert_ne!(s, p.with_seed(6).select(8, 4).unwrap());
        assert_eq!(p.select(5, 3).unwrap().len(), 10);
        assert!(p.select(3, 4).is_err());
    }

    fn volume(n: usize, w: usize, h: usize, d: usize, seed: u64) -> FeatureVolume {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * w * h * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureVolume::new(Tensor::new([n, w, h, d], data).unwrap()).unwrap()
    }

    #[test]
    fn fvol_round_trip_and_rejects_garbage() {
        let v = volume(3, 2, 2, 5, 1);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FVOL");
        assert_eq!(buf.len(), 24 + 3 * 2 * 2 * 5 * 4);
        assert_eq!(FeatureVolume::read_from(&buf[..]).unwrap(), v);
        assert!(FeatureVolume::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(FeatureVolume::read_from(&bad[..]).is_err());
    }

    #[test]
    fn stub_relation_sums_each_clip_per_subset_membership() {
        // g = sum of inputs, h = identity: each clip appears in C(L-1, k-1) subsets
        let mut g = Graph::<f64>::new();
        let pooled = g.constant(Tensor::from_f64([3, 1, 2], &[1.0, 2.0, 10.0, 20.0, 100.0, 200.0]).unwrap());
        let subsets = SubsetPolicy::Exhaustive.select(3, 2).unwrap();
        let r = relate(
            &mut g,
            pooled,
            &subsets,
            |g, slots| {
                let mut acc = slots[0];
                for &s in &slots[1..] {
                    acc = g.add(acc, s)?;
                }
                Ok(acc)
            },
            |_, x| Ok(x),
        )
        .unwrap();
        assert_eq!(g.value(r).data(), &[2.0 * 111.0, 2.0 * 222.0]);
    }

    fn toy_crn(store: &mut ParamStore<f64>, clips: usize, clip_len: usize, k: usize) -> Crn {
        Crn::new(
            store,
            "crn",
            CrnConfig {
                clips,
                clip_len,
                max_order: k,
                feature_dim: 3,
                dim: 2,
            },
        )
        .unwrap()
    }

    #[test]
    fn single_frame_clip_pools_to_itself() {
        let mut store = ParamStore::new(3);
        let crn = toy_crn(&mut store, 3, 1, 2);
        let v = volume(3, 2, 1, 3, 9);
        let mut g = Graph::new();
        let frames = v.to_graph(&mut g);
        let q = g.constant(Tensor::from_f64([2], &[0.3, -0.7]).unwrap());
        let clips = crn.segment_clips(&mut g, &store, frames).unwrap();
        let (pooled, att) = crn.temporal_attention_pool(&mut g, &store, clips, q).unwrap();
        assert!(g.value(att).data().iter().all(|&a| a == 1.0));
        assert_eq!(g.value(pooled).data(), g.value(clips).data());
    }

    #[test]
    fn equal_scores_pool_to_the_mean() {
        let mut store = ParamStore::new(3);
        let crn = toy_crn(&mut store, 2, 4, 2);
        store.set(crn.att_score.w, Tensor::zeros([1, 2])).unwrap();
        let v = volume(8, 2, 2, 3, 4);
        let mut g = Graph::new();
        let frames = v.to_graph(&mut g);
        let q = g.constant(Tensor::from_f64([2], &[0.3, -0.7]).unwrap());
        let clips = crn.segment_clips(&mut g, &store, frames).unwrap();
        let (pooled, _) = crn.temporal_attention_pool(&mut g, &store, clips, q).unwrap();
        let mean = g.mean_axis(clips, 1).unwrap();
        for (a, b) in g.value(pooled).data().iter().zip(g.value(mean).data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        // L=1, T=2, W=H=1, d=2
        let mut store2 = ParamStore::new(21);
        let crn2 = Crn::new(
            &mut store2,
            "crn",
            CrnConfig {
                clips: 2,
                clip_len: 2,
                max_order: 2,
                feature_dim: 2,
                dim: 2,
            },
        )
        .unwrap();
        let frames_raw = [[0.5, -1.0], [1.5, 0.25]];
        let q = [0.8, -0.4];
        let mut g = Graph::new();
        let clips = g.constant(
            Tensor::from_f64([1, 2, 1, 2], &[frames_raw[0][0], frames_raw[0][1], frames_raw[1][0], frames_raw[1][1]])
                .unwrap(),
        );
        let qv = g.constant(Tensor::from_f64([2], &q).unwrap());
        let (pooled, att) = crn2.temporal_attention_pool(&mut g, &store2, clips, qv).unwrap();

        let aff = |lin: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store2.value(lin.w).data();
            let b = lin.b.map(|b| store2.value(b).data().to_vec());
            (0..lin.out_dim)
                .map(|i| {
                    let mut s = 0.0;
                    for k in 0..lin.in_dim {
                        s += w[i * lin.in_dim + k] * x[k];
                    }
                    s + b.as_ref().map_or(0.0, |b| b[i])
                })
                .collect()
        };
        let qa = aff(&crn2.att_question, &q);
        let scores: Vec<f64> = frames_raw
            .iter()
            .map(|f| {
                let va = aff(&crn2.att_visual, f);
                let joint: Vec<f64> = va.iter().zip(&qa).map(|(a, b)| a * b).collect();
                aff(&crn2.att_score, &joint)[0]
            })
            .collect();
        let m = scores[0].max(scores[1]);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        for t in 0..2 {
            assert_abs_diff_eq!(g.value(att).data()[t], a[t], epsilon = 1e-6);
        }
        for j in 0..2 {
            let expect = a[0] * frames_raw[0][j] + a[1] * frames_raw[1][j];
            assert_abs_diff_eq!(g.value(pooled).data()[j], expect, epsilon = 1e-6);
        }
    }

    #[test]
    fn knowledge_base_sums_requested_orders() {
        let mut store = ParamStore::new(5);
        let crn = toy_crn(&mut store, 5, 1, 4);
        assert_eq!(crn.relations.len(), 3);
        let mut g = Graph::new();
        let pooled = g.constant(volume(5, 2, 1, 2, 7).frames.cast::<f64>().reshaped([5, 2, 2]).unwrap());
        let policy = SubsetPolicy::Exhaustive;
        let kb = crn.build_knowledge_base(&mut g, &store, pooled, 4, &policy).unwrap();
        let mut expect = vec![0.0; 4];
        for k in 2..=4 {
            let r = crn.k_order(&mut g, &store, pooled, k, &policy).unwrap();
            for (e, v) in expect.iter_mut().zip(g.value(r).data()) {
                *e += v;
            }
        }
        for (a, b) in g.value(kb).data().iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let only2 = crn.build_knowledge_base(&mut g, &store, pooled, 2, &policy).unwrap();
        let r2 = crn.k_order(&mut g, &store, pooled, 2, &policy).unwrap();
        assert_eq!(g.value(only2).data(), g.value(r2).data());
        assert!(crn.build_knowledge_base(&mut g, &store, pooled, 1, &policy).is_err());
        assert!(crn.build_knowledge_base(&mut g, &store, pooled, 6, &policy).is_err());
    }

    #[test]
    fn relation_is_order_sensitive() {
        let mut store = ParamStore::new(5);
        let crn = toy_crn(&mut store, 3, 1, 2);
        let mut g = Graph::new();
        let raw = volume(3, 1, 1, 2, 8).frames.cast::<f64>().reshaped([3, 1, 2]).unwrap();
        let pooled = g.constant(raw.clone());
        let r = crn.k_order(&mut g, &store, pooled, 2, &SubsetPolicy::Exhaustive).unwrap();
        let shuffled = g.rows(pooled, &[2, 0, 1]).unwrap();
        let rs = crn.k_order(&mut g, &store, shuffled, 2, &SubsetPolicy::Exhaustive).unwrap();
        assert_ne!(g.value(r).data(), g.value(rs).data());
    }

    #[test]
    fn trn_mode_requires_single_frame_clips() {
        let mut store = ParamStore::new(5);
        let crn = toy_crn(&mut store, 2, 2, 2);
        let v = volume(4, 1, 1, 3, 1);
        let mut g = Graph::new();
        let f = v.to_graph(&mut g);
        let q = g.constant(Tensor::zeros([2]));
        assert!(trn_mode(&crn, &mut g, &store, f, q, &SubsetPolicy::Exhaustive).is_err());
        let mut s2 = ParamStore::new(5);
        let trn2 = toy_crn(&mut s2, 2, 1, 2);
        let out = trn_mode(&trn2, &mut g, &s2, f, q, &SubsetPolicy::Exhaustive).unwrap();
        assert_eq!(g.shape(out.knowledge), &[1, 2]);
    }
}
