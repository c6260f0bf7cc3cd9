//! Multi-scene scripts, frame-segment allocation, and conditioning plans.
//!
//! A script is an ordered list of scene descriptions. Three ways of turning
//! one into frame conditioning are implemented:
//!
//! * time-aligned (`talc`): frames are partitioned into per-scene segments
//!   and each segment references its own scene's caption embedding;
//! * merged captions: all scenes are joined (single-space separator, no
//!   scene markers) into one caption referenced by every frame;
//! * merged videos: handled by the sampler (scenes are generated as
//!   independent single-scene clips and concatenated), so there is no joint
//!   plan here.

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TalcError};
use crate::textenc::{encode_caption, CaptionEmbedding, FrameConditioning, TextEncParams, Vocabulary};

pub const MAX_SCENES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::S1 => write!(f, "S1"),
            Scenario::S2 => write!(f, "S2"),
            Scenario::S3 => write!(f, "S3"),
            Scenario::Synthetic => write!(f, "synthetic"),
        }
    }
}

/// Ordered scene descriptions with a scenario tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSceneScript {
    pub id: String,
    pub scenario: Scenario,
    pub scenes: Vec<String>,
}

impl MultiSceneScript {
    pub fn new(id: impl Into<String>, scenario: Scenario, scenes: Vec<String>) -> Result<Self> {
        let script = MultiSceneScript {
            id: id.into(),
            scenario,
            scenes,
        };
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() || self.scenes.len() > MAX_SCENES {
            return Err(TalcError::Usage(format!(
                "script {:?} has {} scenes; need 1..={MAX_SCENES}",
                self.id,
                self.scenes.len()
            )));
        }
        if self.scenes.iter().any(|s| s.trim().is_empty()) {
            return Err(TalcError::Usage(format!(
                "script {:?} contains an empty scene caption",
                self.id
            )));
        }
        Ok(())
    }

    pub fn num_scenes(&self) -> usize {
        self.scenes.len()
    }

    /// All scenes joined with single spaces, no scene markers.
    pub fn merged_caption(&self) -> String {
        self.scenes.join(" ")
    }

    /// Single-scene script for scene `j` (0-based), used by merged-video
    /// generation.
    pub fn single_scene(&self, j: usize) -> Result<MultiSceneScript> {
        let caption = self
            .scenes
            .get(j)
            .ok_or_else(|| TalcError::Index(format!("scene {j} of {}", self.scenes.len())))?;
        MultiSceneScript::new(
            format!("{}__scene{}", self.id, j + 1),
            self.scenario,
            vec![caption.clone()],
        )
    }
}

/// Read a JSON-lines script file.
pub fn read_scripts_jsonl(text: &str) -> Result<Vec<MultiSceneScript>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let script: MultiSceneScript = serde_json::from_str(line)
            .map_err(|e| TalcError::Format(format!("script line {}: {e}", i + 1)))?;
        script.validate()?;
        out.push(script);
    }
    Ok(out)
}

pub fn write_scripts_jsonl(scripts: &[MultiSceneScript]) -> String {
    let mut s = String::new();
    for script in scripts {
        s.push_str(&serde_json::to_string(script).expect("script serializes"));
        s.push('\n');
    }
    s
}

/// Built-in benchmark scripts (multi-scene prompts used for qualitative
/// checks; see `assets/benchmark_scripts.jsonl`).
pub fn benchmark_scripts() -> Vec<MultiSceneScript> {
    read_scripts_jsonl(include_str!("../assets/benchmark_scripts.jsonl"))
        .expect("built-in benchmark scripts are valid")
}

/// Half-open frame ranges, one per scene, partitioning `[0, total_frames)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePlan {
    pub segments: Vec<(usize, usize)>,
    pub total_frames: usize,
}

impl FramePlan {
    pub fn num_scenes(&self) -> usize {
        self.segments.len()
    }

    /// Scene index owning frame `f`.
    pub fn scene_of_frame(&self, f: usize) -> Option<usize> {
        self.segments.iter().position(|&(s, e)| f >= s && f < e)
    }
}

/// Partition `L` frames into `n` ordered segments. When `L` is not divisible
/// by `n`, the first `L mod n` segments take one extra frame.
pub fn allocate_frames(total_frames: usize, scenes: usize) -> Result<FramePlan> {
    if scenes == 0 {
        return Err(TalcError::Usage("allocate_frames: zero scenes".into()));
    }
    if total_frames < scenes {
        return Err(TalcError::Usage(format!(
            "fewer frames than scenes: {total_frames} < {scenes}"
        )));
    }
    let base = total_frames / scenes;
    let extra = total_frames % scenes;
    let mut segments = Vec::with_capacity(scenes);
    let mut start = 0;
    for j in 0..scenes {
        let len = base + usize::from(j < extra);
        segments.push((start, start + len));
        start += len;
    }
    Ok(FramePlan {
        segments,
        total_frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Talc,
    MergeCaptions,
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditioningMode::Talc => write!(f, "talc"),
            ConditioningMode::MergeCaptions => write!(f, "merge_captions"),
        }
    }
}

/// A complete conditioning recipe for one generation or training item: which
/// caption embedding each frame references, plus the segment layout.
#[derive(Debug, Clone)]
pub struct ConditioningPlan {
    pub mode: ConditioningMode,
    pub frame_conditioning: FrameConditioning,
    pub frame_plan: FramePlan,
    pub embeddings: Vec<Rc<CaptionEmbedding>>,
}

/// Build the conditioning plan for a script.
///
/// `talc`: one embedding per scene, frames in segment j reference embedding
/// j. `merge_captions`: scenes joined into a single caption whose embedding
/// every frame references.
pub fn build_plan(
    script: &MultiSceneScript,
    total_frames: usize,
    mode: ConditioningMode,
    vocab: &Vocabulary,
    params: &TextEncParams,
) -> Result<ConditioningPlan> {
    script.validate()?;
    match mode {
        ConditioningMode::Talc => {
            let frame_plan = allocate_frames(total_frames, script.num_scenes())?;
            let embeddings: Vec<Rc<CaptionEmbedding>> = script
                .scenes
                .iter()
                .map(|s| encode_caption(s, false, vocab, params).map(Rc::new))
                .collect::<Result<_>>()?;
            let mut per_frame = Vec::with_capacity(total_frames);
            for (j, &(start, end)) in frame_plan.segments.iter().enumerate() {
                for _ in start..end {
                    per_frame.push(embeddings[j].clone());
                }
            }
            Ok(ConditioningPlan {
                mode,
                frame_conditioning: FrameConditioning { per_frame },
                frame_plan,
                embeddings,
            })
        }
        ConditioningMode::MergeCaptions => {
            if total_frames == 0 {
                return Err(TalcError::Usage("build_plan: zero frames".into()));
            }
            let merged = script.merged_caption();
            let emb = Rc::new(encode_caption(&merged, false, vocab, params)?);
            let frame_plan = FramePlan {
                segments: vec![(0, total_frames)],
                total_frames,
            };
            Ok(ConditioningPlan {
                mode,
                frame_conditioning: FrameConditioning {
                    per_frame: vec![emb.clone(); total_frames],
                },
                frame_plan,
                embeddings: vec![emb],
            })
        }
    }
}

/// Same frame structure with every reference replaced by the NULL caption
/// embedding (the unconditional guidance branch). Idempotent.
pub fn null_plan(
    plan: &ConditioningPlan,
    vocab: &Vocabulary,
    params: &TextEncParams,
) -> Result<ConditioningPlan> {
    let null = Rc::new(encode_caption("", true, vocab, params)?);
    Ok(ConditioningPlan {
        mode: plan.mode,
        frame_conditioning: FrameConditioning {
            per_frame: vec![null.clone(); plan.frame_conditioning.frames()],
        },
        frame_plan: plan.frame_plan.clone(),
        embeddings: vec![null],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn setup() -> (Vocabulary, TextEncParams) {
        let vocab = Vocabulary::build([
            "a red square moves right",
            "a blue circle moves up",
            "a green triangle moves down",
        ]);
        let mut rng = Rng::new(17);
        let params = TextEncParams::init(vocab.size(), 16, 8, &mut rng);
        (vocab, params)
    }

    fn script(scenes: &[&str]) -> MultiSceneScript {
        MultiSceneScript::new(
            "t",
            Scenario::Synthetic,
            scenes.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn allocate_even_split() {
        let p = allocate_frames(16, 2).unwrap();
        assert_eq!(p.segments, vec![(0, 8), (8, 16)]);
    }

    #[test]
    fn allocate_single_scene() {
        let p = allocate_frames(8, 1).unwrap();
        assert_eq!(p.segments, vec![(0, 8)]);
    }

    #[test]
    fn allocate_remainder_goes_to_earliest() {
        let p = allocate_frames(10, 4).unwrap();
        assert_eq!(p.segments, vec![(0, 3), (3, 6), (6, 8), (8, 10)]);
    }

    #[test]
    fn allocate_rejects_fewer_frames_than_scenes() {
        let err = allocate_frames(3, 4).unwrap_err().to_string();
        assert!(err.contains("fewer frames than scenes"), "{err}");
    }

    #[test]
    fn partition_property() {
        for total in 1..40 {
            for n in 1..=total.min(MAX_SCENES + 2) {
                let p = allocate_frames(total, n).unwrap();
                assert_eq!(p.segments.len(), n);
                assert_eq!(p.segments[0].0, 0);
                assert_eq!(p.segments.last().unwrap().1, total);
                let mut lens = Vec::new();
                for w in p.segments.windows(2) {
                    assert_eq!(w[0].1, w[1].0, "gap or overlap");
                }
                for &(s, e) in &p.segments {
                    lens.push(e - s);
                }
                let (mn, mx) = (lens.iter().min().unwrap(), lens.iter().max().unwrap());
                assert!(mx - mn <= 1);
                assert_eq!(lens.iter().sum::<usize>(), total);
            }
        }
    }

    #[test]
    fn talc_plan_aligns_segments_to_scenes() {
        let (vocab, params) = setup();
        let s = script(&["a red square moves right", "a blue circle moves up"]);
        let plan = build_plan(&s, 16, ConditioningMode::Talc, &vocab, &params).unwrap();
        assert_eq!(plan.embeddings.len(), 2);
        for f in 0..8 {
            assert!(Rc::ptr_eq(
                &plan.frame_conditioning.per_frame[f],
                &plan.embeddings[0]
            ));
        }
        for f in 8..16 {
            assert!(Rc::ptr_eq(
                &plan.frame_conditioning.per_frame[f],
                &plan.embeddings[1]
            ));
        }
    }

    #[test]
    fn merged_plan_joins_with_single_space() {
        let (vocab, params) = setup();
        let s = script(&["a red square moves right", "a blue circle moves up"]);
        assert_eq!(
            s.merged_caption(),
            "a red square moves right a blue circle moves up"
        );
        let plan = build_plan(&s, 16, ConditioningMode::MergeCaptions, &vocab, &params).unwrap();
        assert_eq!(plan.embeddings.len(), 1);
        let direct = encode_caption(&s.merged_caption(), false, &vocab, &params).unwrap();
        assert_eq!(plan.embeddings[0].tokens.to_vec(), direct.tokens.to_vec());
        for f in &plan.frame_conditioning.per_frame {
            assert!(Rc::ptr_eq(f, &plan.embeddings[0]));
        }
    }

    #[test]
    fn modes_coincide_for_single_scene() {
        let (vocab, params) = setup();
        let s = script(&["a red square moves right"]);
        let talc = build_plan(&s, 8, ConditioningMode::Talc, &vocab, &params).unwrap();
        let merged = build_plan(&s, 8, ConditioningMode::MergeCaptions, &vocab, &params).unwrap();
        for f in 0..8 {
            let a = talc.frame_conditioning.per_frame[f].tokens.to_vec();
            let b = merged.frame_conditioning.per_frame[f].tokens.to_vec();
            assert_eq!(a, b);
            assert_eq!(
                talc.frame_conditioning.per_frame[f].mask,
                merged.frame_conditioning.per_frame[f].mask
            );
        }
    }

    #[test]
    fn null_plan_replaces_all_references_and_is_idempotent() {
        let (vocab, params) = setup();
        let s = script(&["a red square moves right", "a blue circle moves up"]);
        for mode in [ConditioningMode::Talc, ConditioningMode::MergeCaptions] {
            let plan = build_plan(&s, 16, mode, &vocab, &params).unwrap();
            let nulled = null_plan(&plan, &vocab, &params).unwrap();
            assert_eq!(nulled.frame_plan, plan.frame_plan);
            for f in &nulled.frame_conditioning.per_frame {
                assert!(f.is_null);
            }
            let again = null_plan(&nulled, &vocab, &params).unwrap();
            for (a, b) in nulled
                .frame_conditioning
                .per_frame
                .iter()
                .zip(&again.frame_conditioning.per_frame)
            {
                assert_eq!(a.tokens.to_vec(), b.tokens.to_vec());
            }
        }
    }

    #[test]
    fn plans_are_deterministic() {
        let (vocab, params) = setup();
        let s = script(&["a red square moves right", "a blue circle moves up"]);
        let p1 = build_plan(&s, 10, ConditioningMode::Talc, &vocab, &params).unwrap();
        let p2 = build_plan(&s, 10, ConditioningMode::Talc, &vocab, &params).unwrap();
        assert_eq!(p1.frame_plan, p2.frame_plan);
        for (a, b) in p1.embeddings.iter().zip(&p2.embeddings) {
            assert_eq!(a.tokens.to_vec(), b.tokens.to_vec());
        }
    }

    #[test]
    fn script_validation() {
        assert!(MultiSceneScript::new("x", Scenario::S1, vec![]).is_err());
        assert!(MultiSceneScript::new("x", Scenario::S1, vec!["ok".into(); 5]).is_err());
        assert!(MultiSceneScript::new("x", Scenario::S1, vec!["".into()]).is_err());
        assert!(MultiSceneScript::new("x", Scenario::S1, vec!["ok".into(); 4]).is_ok());
    }

    #[test]
    fn scripts_round_trip_jsonl() {
        let scripts = vec![
            script(&["a red square moves right"]),
            script(&["a blue circle moves up", "a green triangle moves down"]),
        ];
        let text = write_scripts_jsonl(&scripts);
        let back = read_scripts_jsonl(&text).unwrap();
        assert_eq!(scripts, back);
    }

    #[test]
    fn builtin_benchmark_set_contains_paper_examples() {
        let scripts = benchmark_scripts();
        let polar = scripts
            .iter()
            .find(|s| s.scenes[0].contains("polar bear"))
            .expect("polar bear script present");
        assert_eq!(polar.scenario, Scenario::S1);
        assert_eq!(polar.num_scenes(), 4);
        assert_eq!(polar.scenes[0], "A polar bear navigates through a icy landscape.");
        let teddy = scripts
            .iter()
            .find(|s| s.scenes[0].contains("teddy bear"))
            .expect("teddy bear script present");
        assert_eq!(teddy.scenario, Scenario::S2);
        assert_eq!(teddy.num_scenes(), 4);
        assert_eq!(teddy.scenes[1], "A panda swims under the same water.");
    }
}
