//! Staged pruning schedule.
//!
//! The LLM's layers are split into `n` stages. Before stage 1 the video is
//! segmented and temporally merged. Entering stage 2, tokens are pruned by
//! instruction relevance alone. Entering every later stage, each segment is
//! pruned by DPP selection with its own ratio. After merging, the alive
//! count entering stage `i` is
//!
//! ```text
//! |H_v^i| = |H_v^0| · (1 − R_merge) · Π_{k=2}^{i} (1 − R^k_prune)
//! ```
//!
//! up to per-stage rounding.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{
    allocate_ratios, round_half_up, segment_budgets, BudgetError, DEFAULT_LAMBDA, DEFAULT_R_VAR,
};
use crate::cost::{pipeline_flops, validate_boundaries, CostError, FlopsReport, ModelDims};
use crate::dpp::{prune_tokens, relevance, DppError, Selection};
use crate::io::{read_tensor_file, FormatError};
use crate::merge::{apply_merge, plan_merge, MergeError, MergeStats};
use crate::segmentation::{
    global_topk_mask, segment, similarity_stack, SegmentationError, DEFAULT_BETA,
};
use crate::tensor::{
    cosine_similarity, Embeddings, InstructionEmbedding, TensorError, VideoTokens,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid schedule: {0}")]
    ScheduleInvalid(String),
    #[error("provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Dpp(#[from] DppError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Layer-stage layout and every ratio knob of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub n_stages: usize,
    /// First layer of each stage.
    pub boundaries: Vec<usize>,
    pub r_merge: f64,
    /// Prune ratio entering stages 2..=n.
    pub r_prune: Vec<f64>,
    pub r_var: f64,
    pub lambda: f64,
    pub beta: f64,
    pub dims: ModelDims,
    /// Instruction/system tokens added to every layer in FLOPs accounting.
    pub text_tokens: u64,
}

/// `{0, ⌈L/n⌉, ⌈2L/n⌉, …}`.
pub fn default_boundaries(n_stages: usize, layers: u64) -> Vec<usize> {
    (0..n_stages)
        .map(|i| (i as u64 * layers).div_ceil(n_stages as u64) as usize)
        .collect()
}

impl Default for PruneSchedule {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            n_stages: 4,
            boundaries: default_boundaries(4, dims.layers),
            r_merge: 0.3,
            r_prune: vec![0.3, 0.3, 0.3],
            r_var: DEFAULT_R_VAR,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            dims,
            text_tokens: 0,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::ScheduleInvalid(m));
        if self.n_stages < 2 {
            return bad(format!(
                "n_stages must be at least 2, got {}",
                self.n_stages
            ));
        }
        if self.boundaries.len() != self.n_stages {
            return bad(format!(
                "{} boundaries for {} stages",
                self.boundaries.len(),
                self.n_stages
            ));
        }
        if self.r_prune.len() != self.n_stages - 1 {
            return bad(format!(
                "r_prune needs {} entries (stages 2..={}), got {}",
                self.n_stages - 1,
                self.n_stages,
                self.r_prune.len()
            ));
        }
        if validate_boundaries(&self.boundaries, self.dims.layers).is_err() {
            return bad(format!(
                "boundaries {:?} must start at 0 and increase strictly below layer count {}",
                self.boundaries, self.dims.layers
            ));
        }
        ModelDims::new(self.dims.layers, self.dims.hidden, self.dims.ffn)?;
        for (name, r) in std::iter::once(("r_merge", self.r_merge))
            .chain(self.r_prune.iter().map(|&r| ("r_prune", r)))
        {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} value {r} outside [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(self.r_var.is_finite() && self.r_var >= 0.0) {
            return bad(format!("r_var {} must be non-negative", self.r_var));
        }
        Ok(())
    }
}

/// Closed-form alive counts at the start of each stage, rounded half up per
/// stage with a floor of one token.
pub fn token_count_recurrence(schedule: &PruneSchedule, n0: usize) -> Vec<usize> {
    let floor = |x: f64| if n0 == 0 { 0 } else { round_half_up(x).max(1) };
    let mut counts = Vec::with_capacity(schedule.n_stages);
    let mut n = floor(n0 as f64 * (1.0 - schedule.r_merge));
    counts.push(n);
    for &r in &schedule.r_prune {
        n = floor(n as f64 * (1.0 - r));
        counts.push(n);
    }
    counts
}

/// Supplies the visual and instruction hidden states at a stage boundary.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;

    /// Hidden states after `completed` stages for the tokens `ids`, where
    /// `merged` holds the stage-0 embeddings.
    fn stage_embeddings(
        &self,
        completed: usize,
        merged: &VideoTokens,
        instruction: &InstructionEmbedding,
        ids: &[usize],
    ) -> Result<(Embeddings, InstructionEmbedding), PipelineError>;
}

/// Embeddings stay frozen across stages.
#[derive(Debug, Clone, Copy)]
pub struct IdentityProvider {
    pub dim: usize,
}

impl EmbeddingProvider for IdentityProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn stage_embeddings(
        &self,
        _completed: usize,
        merged: &VideoTokens,
        instruction: &InstructionEmbedding,
        ids: &[usize],
    ) -> Result<(Embeddings, InstructionEmbedding), PipelineError> {
        Ok((merged.gather(ids)?, instruction.clone()))
    }
}

/// Applies a seeded random orthogonal channel mix per stage, cumulatively.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    dim: usize,
    // cumulative[s] = Q_{s+1} ⋯ Q_1, row-major d×d
    cumulative: Vec<Vec<f64>>,
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    // modified Gram-Schmidt on a Gaussian matrix, rows become orthonormal
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            q.push(v);
        }
    }
    q.concat()
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

impl SyntheticProvider {
    pub fn new(dim: usize, stages: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4147_4553);
        let mut cumulative: Vec<Vec<f64>> = Vec::with_capacity(stages);
        for s in 0..stages {
            let q = random_orthogonal(&mut rng, dim);
            let next = match s {
                0 => q,
                _ => matmul(&q, &cumulative[s - 1], dim),
            };
            cumulative.push(next);
        }
        Self { dim, cumulative }
    }

    fn apply(&self, completed: usize, x: &[f32], out: &mut Vec<f32>) {
        if completed == 0 {
            out.extend_from_slice(x);
            return;
        }
        let m = &self.cumulative[completed - 1];
        let d = self.dim;
        for i in 0..d {
            let row = &m[i * d..(i + 1) * d];
            out.push(row.iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>() as f32);
        }
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn stage_embeddings(
        &self,
        completed: usize,
        merged: &VideoTokens,
        instruction: &InstructionEmbedding,
        ids: &[usize],
    ) -> Result<(Embeddings, InstructionEmbedding), PipelineError> {
        if completed > self.cumulative.len() {
            return Err(PipelineError::Provider(format!(
                "synthetic provider built for {} stages, asked for stage {completed}",
                self.cumulative.len()
            )));
        }
        let base = merged.gather(ids)?;
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for row in base.rows() {
            self.apply(completed, row, &mut data);
        }
        let mut instr = Vec::with_capacity(self.dim);
        self.apply(completed, instruction.data(), &mut instr);
        Ok((
            Embeddings::new(ids.to_vec(), self.dim, data)?,
            InstructionEmbedding::new(instr)?,
        ))
    }
}

/// Recorded hidden states: `stage{s}.hvtk` (a `[T, H, W, d]` video) and
/// `instr{s}.hvtk` (a vector) for each completed-stage count `s ≥ 1`.
#[derive(Debug, Clone)]
pub struct FileProvider {
    dir: PathBuf,
    dim: usize,
}

impl FileProvider {
    pub fn new(dir: impl Into<PathBuf>, dim: usize) -> Self {
        Self {
            dir: dir.into(),
            dim,
        }
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn stage_embeddings(
        &self,
        completed: usize,
        merged: &VideoTokens,
        _instruction: &InstructionEmbedding,
        ids: &[usize],
    ) -> Result<(Embeddings, InstructionEmbedding), PipelineError> {
        let states =
            read_tensor_file(self.dir.join(format!("stage{completed}.hvtk")))?.into_video()?;
        let instr =
            read_tensor_file(self.dir.join(format!("instr{completed}.hvtk")))?.into_vector()?;
        let expected = [
            merged.num_frames(),
            merged.height(),
            merged.width(),
            self.dim,
        ];
        let found = [
            states.num_frames(),
            states.height(),
            states.width(),
            states.dim(),
        ];
        if found != expected {
            return Err(PipelineError::Provider(format!(
                "stage{completed}.hvtk has shape {found:?}, expected {expected:?}"
            )));
        }
        instr.check_dim(self.dim)?;
        Ok((states.gather(ids)?, instr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageOp {
    Merge,
    Relevance,
    Dpp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: usize,
    pub first_layer: usize,
    pub operation: StageOp,
    pub input_tokens: usize,
    pub kept_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_ratios: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_kept: Option<Vec<usize>>,
    /// Alive token ids entering the stage, ascending.
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub segment_ms: f64,
    pub merge_ms: f64,
    pub relevance_ms: f64,
    pub dpp_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub schedule: PruneSchedule,
    pub initial_tokens: usize,
    pub segment_boundaries: Vec<usize>,
    pub segment_budgets: Vec<f64>,
    pub merge: MergeStats,
    pub stages: Vec<StageReport>,
    /// Counts from [`token_count_recurrence`].
    pub expected_counts: Vec<usize>,
    pub flops: FlopsReport,
    /// Wall-clock timings; excluded from [`PruneReport::to_json`] unless asked for.
    #[serde(skip)]
    pub timings: Timings,
}

impl PruneReport {
    pub fn stage_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.kept_tokens).collect()
    }

    pub fn final_kept(&self) -> &[usize] {
        self.stages.last().map_or(&[], |s| s.kept.as_slice())
    }

    /// Deterministic JSON; timings are appended only when `with_timings`.
    pub fn to_json(&self, with_timings: bool) -> Vec<u8> {
        if with_timings {
            #[derive(Serialize)]
            struct WithTimings<'a> {
                #[serde(flatten)]
                report: &'a PruneReport,
                timings: &'a Timings,
            }
            crate::io::to_json_bytes(&WithTimings {
                report: self,
                timings: &self.timings,
            })
        } else {
            crate::io::to_json_bytes(self)
        }
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// The `k` ids with the highest relevance, ties to the lower id; returned ascending.
pub fn top_by_relevance(ids: &[usize], r: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(ids[a].cmp(&ids[b])));
    let mut kept: Vec<usize> = order[..k.min(ids.len())].iter().map(|&i| ids[i]).collect();
    kept.sort_unstable();
    kept
}

fn stage_keep(n: usize, ratio: f64) -> usize {
    if n == 0 {
        0
    } else {
        round_half_up(n as f64 * (1.0 - ratio)).clamp(1, n)
    }
}

pub fn run_pipeline(
    video: &VideoTokens,
    instruction: &InstructionEmbedding,
    schedule: &PruneSchedule,
    provider: &dyn EmbeddingProvider,
) -> Result<PruneReport, PipelineError> {
    schedule.validate()?;
    instruction.check_dim(video.dim())?;
    if provider.dim() != video.dim() {
        return Err(PipelineError::Provider(format!(
            "provider dim {} does not match video dim {}",
            provider.dim(),
            video.dim()
        )));
    }
    let start = Instant::now();
    let mut timings = Timings::default();
    let n0 = video.num_alive();

    let t = Instant::now();
    let stack = similarity_stack(video)?;
    let mask = global_topk_mask(&stack, schedule.r_merge)?;
    timings.segment_ms += ms_since(t);

    let t = Instant::now();
    let plan = plan_merge(video, &mask)?;
    let merged = apply_merge(video, &plan)?;
    timings.merge_ms = ms_since(t);

    let t = Instant::now();
    let segmap = segment(&merged, &mask, schedule.beta)?;
    let budgets = segment_budgets(&segmap, schedule.lambda)?;
    timings.segment_ms += ms_since(t);

    let mut alive = merged.alive_ids();
    let mut stages = vec![StageReport {
        stage: 1,
        first_layer: schedule.boundaries[0],
        operation: StageOp::Merge,
        input_tokens: n0,
        kept_tokens: alive.len(),
        segment_ratios: None,
        segment_kept: None,
        kept: alive.clone(),
    }];

    for (s, &ratio) in schedule.r_prune.iter().enumerate() {
        let stage = s + 2;
        let completed = stage - 1;
        let input = alive.len();
        let (hv, ht) = provider.stage_embeddings(completed, &merged, instruction, &alive)?;
        let report = if stage == 2 {
            let t = Instant::now();
            let k = stage_keep(input, ratio);
            alive = if k == input {
                alive
            } else {
                let r = relevance(&hv, &ht)?;
                top_by_relevance(hv.ids(), &r.r, k)
            };
            timings.relevance_ms += ms_since(t);
            StageReport {
                stage,
                first_layer: schedule.boundaries[s + 1],
                operation: StageOp::Relevance,
                input_tokens: input,
                kept_tokens: alive.len(),
                segment_ratios: None,
                segment_kept: None,
                kept: alive.clone(),
            }
        } else {
            let t = Instant::now();
            let mut counts = vec![0usize; segmap.len()];
            for &id in &alive {
                let m = segmap
                    .segment_of_token(id)
                    .ok_or(DppError::SegmentMismatch { id })?;
                counts[m] += 1;
            }
            let ratios = allocate_ratios(&budgets, ratio, schedule.r_var, &counts)?;
            let selection: Selection = prune_tokens(&hv, &ht, &segmap, &ratios)?;
            let segment_kept = selection.segments.iter().map(|s| s.kept.len()).collect();
            alive = selection.kept;
            timings.dpp_ms += ms_since(t);
            StageReport {
                stage,
                first_layer: schedule.boundaries[s + 1],
                operation: StageOp::Dpp,
                input_tokens: input,
                kept_tokens: alive.len(),
                segment_ratios: Some(ratios.ratios),
                segment_kept: Some(segment_kept),
                kept: alive.clone(),
            }
        };
        stages.push(report);
    }

    let counts: Vec<u64> = stages.iter().map(|s| s.kept_tokens as u64).collect();
    let flops = pipeline_flops(
        &counts,
        &schedule.boundaries,
        &schedule.dims,
        n0 as u64,
        schedule.text_tokens,
    )?;
    timings.total_ms = ms_since(start);
    Ok(PruneReport {
        schedule: schedule.clone(),
        initial_tokens: n0,
        segment_boundaries: segmap.boundaries.clone(),
        segment_budgets: budgets.b,
        merge: plan.stats(),
        stages,
        expected_counts: token_count_recurrence(schedule, n0),
        flops,
        timings,
    })
}

/// `⌈fraction·n⌉`, clamped to `[0, n]`.
pub fn keep_count(fraction: f64, n: usize) -> usize {
    ((fraction.clamp(0.0, 1.0) * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Uniformly random kept set of exactly `⌈fraction·n⌉` alive tokens.
pub fn baseline_random(video: &VideoTokens, keep_fraction: f64, seed: u64) -> Selection {
    let alive = video.alive_ids();
    let k = keep_count(keep_fraction, alive.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept = index::sample(&mut rng, alive.len(), k)
        .into_iter()
        .map(|i| alive[i])
        .collect();
    Selection::flat(kept)
}

/// The `⌈fraction·n⌉` alive tokens with the highest instruction relevance.
pub fn baseline_relevance_only(
    video: &VideoTokens,
    instruction: &InstructionEmbedding,
    keep_fraction: f64,
) -> Result<Selection, PipelineError> {
    let hv = video.alive_embeddings();
    if hv.is_empty() {
        return Ok(Selection::flat(Vec::new()));
    }
    let r = relevance(&hv, instruction)?;
    let k = keep_count(keep_fraction, hv.len());
    Ok(Selection::flat(top_by_relevance(hv.ids(), &r.r, k)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub kept_tokens: usize,
    pub frames_covered: usize,
    /// Share of total relevance held by the kept tokens.
    pub relevance_mass: f64,
    /// Mean over kept tokens of the highest cosine similarity to another kept token.
    pub redundancy: f64,
    pub flops_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub initial_tokens: usize,
    pub budget_fraction: f64,
    pub methods: Vec<MethodSummary>,
}

fn summarize(
    method: &str,
    kept: &[usize],
    video: &VideoTokens,
    relevance_by_id: &[f64],
    flops_ratio: f64,
) -> MethodSummary {
    let mut frames: Vec<usize> = kept.iter().map(|&id| video.provenance(id).frame).collect();
    frames.dedup();
    let total_r: f64 = relevance_by_id.iter().sum();
    let kept_r: f64 = kept.iter().map(|&id| relevance_by_id[id]).sum();
    let redundancy = if kept.len() < 2 {
        0.0
    } else {
        kept.iter()
            .map(|&a| {
                kept.iter()
                    .filter(|&&b| b != a)
                    .map(|&b| cosine_similarity(video.token(a), video.token(b)).unwrap_or(0.0))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / kept.len() as f64
    };
    MethodSummary {
        method: method.to_string(),
        kept_tokens: kept.len(),
        frames_covered: frames.len(),
        relevance_mass: if total_r > 0.0 { kept_r / total_r } else { 0.0 },
        redundancy,
        flops_ratio,
    }
}

/// Runs the staged pipeline and both baselines at the pipeline's final
/// token count.
pub fn compare_methods(
    video: &VideoTokens,
    instruction: &InstructionEmbedding,
    schedule: &PruneSchedule,
    provider: &dyn EmbeddingProvider,
    seed: u64,
) -> Result<ComparisonReport, PipelineError> {
    let report = run_pipeline(video, instruction, schedule, provider)?;
    let n0 = video.num_alive();
    let k = report.final_kept().len();
    let fraction = if n0 == 0 { 0.0 } else { k as f64 / n0 as f64 };

    let hv = video.alive_embeddings();
    let mut relevance_by_id = vec![0.0; video.num_tokens()];
    if !hv.is_empty() {
        let r = relevance(&hv, instruction)?;
        for (&id, &x) in hv.ids().iter().zip(&r.r) {
            relevance_by_id[id] = x;
        }
    }
    let single_shot = pipeline_flops(
        &vec![k as u64; schedule.n_stages],
        &schedule.boundaries,
        &schedule.dims,
        n0 as u64,
        schedule.text_tokens,
    )?
    .ratio;

    let random = baseline_random(video, fraction, seed);
    let by_relevance = baseline_relevance_only(video, instruction, fraction)?;
    Ok(ComparisonReport {
        initial_tokens: n0,
        budget_fraction: fraction,
        methods: vec![
            summarize(
                "hieravid",
                report.final_kept(),
                video,
                &relevance_by_id,
                report.flops.ratio,
            ),
            summarize("random", &random.kept, video, &relevance_by_id, single_shot),
            summarize(
                "relevance_only",
                &by_relevance.kept,
                video,
                &relevance_by_id,
                single_shot,
            ),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_synthetic, SyntheticConfig};

    fn schedule(r_merge: f64, r_prune: &[f64]) -> PruneSchedule {
        PruneSchedule {
            n_stages: r_prune.len() + 1,
            boundaries: default_boundaries(r_prune.len() + 1, 28),
            r_merge,
            r_prune: r_prune.to_vec(),
            ..PruneSchedule::default()
        }
    }

    #[test]
    fn default_layout() {
        assert_eq!(default_boundaries(4, 28), vec![0, 7, 14, 21]);
        assert_eq!(default_boundaries(4, 30), vec![0, 8, 15, 23]);
        PruneSchedule::default().validate().unwrap();
    }

    #[test]
    fn recurrence_examples() {
        assert_eq!(
            token_count_recurrence(&schedule(0.0, &[0.0, 0.0, 0.0]), 500),
            vec![500; 4]
        );
        assert_eq!(
            token_count_recurrence(&schedule(0.3, &[0.5, 0.5, 0.5]), 1000),
            vec![700, 350, 175, 88]
        );
        assert_eq!(
            token_count_recurrence(&schedule(0.25, &[0.5]), 80),
            vec![60, 30]
        );
        assert_eq!(
            token_count_recurrence(&schedule(0.9, &[0.9, 0.9]), 3),
            vec![1, 1, 1]
        );
    }

    #[test]
    fn invalid_schedules() {
        let bad = PruneSchedule {
            boundaries: vec![0, 14, 7, 21],
            ..PruneSchedule::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(PipelineError::ScheduleInvalid(_))
        ));
        for bad in [
            PruneSchedule {
                r_prune: vec![0.5],
                ..PruneSchedule::default()
            },
            PruneSchedule {
                r_merge: 1.0,
                ..PruneSchedule::default()
            },
            PruneSchedule {
                n_stages: 1,
                ..PruneSchedule::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn noop_schedule() {
        let syn = gen_synthetic(&SyntheticConfig::new(6, 3, 3, 8, 2, 5)).unwrap();
        let s = schedule(0.0, &[0.0, 0.0, 0.0]);
        let r = run_pipeline(
            &syn.video,
            &syn.instruction,
            &s,
            &IdentityProvider { dim: 8 },
        )
        .unwrap();
        assert_eq!(r.stage_counts(), vec![54; 4]);
        assert_eq!(r.flops.ratio, 1.0);
    }

    #[test]
    fn stages_nest() {
        let syn = gen_synthetic(&SyntheticConfig::new(8, 4, 4, 16, 3, 9)).unwrap();
        let s = schedule(0.3, &[0.4, 0.5, 0.5]);
        let provider = SyntheticProvider::new(16, 4, 1);
        let r = run_pipeline(&syn.video, &syn.instruction, &s, &provider).unwrap();
        for w in r.stages.windows(2) {
            assert!(w[1]
                .kept
                .iter()
                .all(|id| w[0].kept.binary_search(id).is_ok()));
        }
        let counts = r.stage_counts();
        for (a, b) in counts.iter().zip(&r.expected_counts) {
            assert!(a.abs_diff(*b) <= 1, "{counts:?} vs {:?}", r.expected_counts);
        }
    }

    #[test]
    fn synthetic_provider_is_orthogonal() {
        let p = SyntheticProvider::new(5, 3, 2);
        let v = VideoTokens::from_flat(
            1,
            1,
            2,
            5,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, -1.0, 0.5, 0.0, 2.0, 1.0],
        )
        .unwrap();
        let instr = InstructionEmbedding::new(vec![0.0; 5]).unwrap();
        let (e, _) = p.stage_embeddings(2, &v, &instr, &[0, 1]).unwrap();
        let before = crate::tensor::dot(v.token(0), v.token(1));
        let after = crate::tensor::dot(e.row(0), e.row(1));
        assert!((before - after).abs() < 1e-4);
        assert!(p.stage_embeddings(4, &v, &instr, &[0]).is_err());
    }

    #[test]
    fn baselines() {
        let v = VideoTokens::from_flat(1, 1, 10, 2, (0..20).map(|x| x as f32).collect()).unwrap();
        assert_eq!(
            baseline_random(&v, 1.0, 3).kept,
            (0..10).collect::<Vec<_>>()
        );
        assert_eq!(baseline_random(&v, 0.5, 3).len(), 5);
        assert_eq!(baseline_random(&v, 0.5, 3), baseline_random(&v, 0.5, 3));
        let instr = InstructionEmbedding::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(baseline_relevance_only(&v, &instr, 1.0).unwrap().len(), 10);
    }

    #[test]
    fn relevance_baseline_two_tokens() {
        let v = VideoTokens::from_flat(1, 1, 2, 1, vec![-3.0, 3.0]).unwrap();
        let instr = InstructionEmbedding::new(vec![1.0]).unwrap();
        assert_eq!(
            baseline_relevance_only(&v, &instr, 0.5).unwrap().kept,
            vec![1]
        );
    }

    #[test]
    fn relevance_baseline_matches_sort() {
        let v = VideoTokens::from_flat(1, 1, 4, 1, vec![0.3, -1.0, 2.0, 0.9]).unwrap();
        let instr = InstructionEmbedding::new(vec![1.0]).unwrap();
        assert_eq!(
            baseline_relevance_only(&v, &instr, 0.5).unwrap().kept,
            vec![2, 3]
        );
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(0.5, 10), 5);
        assert_eq!(keep_count(0.51, 10), 6);
        assert_eq!(keep_count(0.3, 10), 3);
        assert_eq!(keep_count(1.0, 7), 7);
        assert_eq!(keep_count(0.0, 7), 0);
    }
}
