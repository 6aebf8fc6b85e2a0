//! Seed-sweep evaluation: judge generated images with the blob detector,
//! aggregate per condition, and compare conditions with a paired
//! permutation test.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor};
use crate::diffusion::{DenoiserModel, NoiseSchedule, PromptSpec};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, LayoutEntry, LayoutSpec};
use crate::sampler::{fan_out, Sampler, SamplerConfig, StepStats};
use crate::scenes::{detect, Detection, CANVAS};
use crate::vocab::{Color, Shape, Token};

/// Prompt (and optional boxes) for one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub prompt: PromptSpec,
    pub layout: Option<LayoutSpec>,
}

/// "c1 s1 and c2 s2" with distinct shapes and distinct colors.
pub fn two_subject_prompt<R: Rng + ?Sized>(rng: &mut R) -> Result<PromptSpec> {
    let mut shapes = Shape::ALL.to_vec();
    let mut colors = Color::ALL.to_vec();
    shapes.shuffle(rng);
    colors.shuffle(rng);
    PromptSpec::from_tokens(&[
        Token::Color(colors[0]),
        Token::Shape(shapes[0]),
        Token::And,
        Token::Color(colors[1]),
        Token::Shape(shapes[1]),
    ])
}

/// Two-subject case; with `boxes`, the canvas is split in halves (left/right
/// or top/bottom, random) and each subject gets one half.
pub fn make_case(seed: u64, boxes: bool) -> Result<EvalCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt = two_subject_prompt(&mut rng)?;
    let layout = if boxes {
        let halves = if rng.random_bool(0.5) {
            [[0.0, 0.0, 0.5, 1.0], [0.5, 0.0, 1.0, 1.0]]
        } else {
            [[0.0, 0.0, 1.0, 0.5], [0.0, 0.5, 1.0, 1.0]]
        };
        let flip = rng.random_bool(0.5) as usize;
        let entries = prompt
            .subject_positions
            .iter()
            .enumerate()
            .map(|(k, &token)| LayoutEntry {
                token,
                bbox: halves[(k + flip) % 2],
            })
            .collect();
        Some(LayoutSpec::new(entries, &prompt)?)
    } else {
        None
    };
    Ok(EvalCase { prompt, layout })
}

/// What the detector and the attention readouts say about one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    /// 1 when every subject's shape is detected.
    pub presence: f64,
    pub subjects_detected: usize,
    /// Detected subjects that also carry their bound color.
    pub subjects_bound: usize,
    /// Fraction of boxes containing the centroid of the largest blob of the
    /// boxed subject's shape.
    pub centroid_in_box: Option<f64>,
    /// Mean in-box attention ratio over the guidance window.
    pub mean_ratio: Option<f64>,
    /// Subject loss at the final step.
    pub final_semantic: Option<f64>,
    /// Layout energy at the final step.
    pub final_layout: Option<f64>,
}

fn largest<'a>(det: &'a Detection, shape: Shape) -> Option<&'a crate::scenes::Blob> {
    det.with_shape(shape).max_by_key(|b| b.pixel_count)
}

/// Scores a generated image. `window` is the number of leading steps the
/// mean ratio averages over.
pub fn judge(
    image: &Tensor<f32>,
    case: &EvalCase,
    stats: &[StepStats],
    window: usize,
) -> Judgement {
    let det = detect(image);
    let mut detected = 0;
    let mut bound = 0;
    for &s in &case.prompt.subject_positions {
        let Some(shape) = case.prompt.shape_at(s) else {
            continue;
        };
        if det.with_shape(shape).next().is_none() {
            continue;
        }
        detected += 1;
        let color = case.prompt.bound_color(s);
        if det.with_shape(shape).any(|b| Some(b.color) == color) {
            bound += 1;
        }
    }
    let presence = if detected == case.prompt.subject_positions.len() {
        1.0
    } else {
        0.0
    };

    let layout = case.layout.as_ref().filter(|l| !l.is_empty());
    let centroid_in_box = layout.map(|l| {
        let hits = l
            .entries
            .iter()
            .filter(|e| {
                let Some(shape) = case.prompt.shape_at(e.token) else {
                    return false;
                };
                largest(&det, shape).is_some_and(|b| {
                    let (x, y) = (b.centroid.0 / CANVAS as f64, b.centroid.1 / CANVAS as f64);
                    let [x0, y0, x1, y1] = e.bbox;
                    x0 <= x && x < x1 && y0 <= y && y < y1
                })
            })
            .count();
        hits as f64 / l.entries.len() as f64
    });
    let mean_ratio = layout.and_then(|_| {
        let per_step: Vec<f64> = stats
            .iter()
            .take(window)
            .filter(|s| !s.box_ratios.is_empty())
            .map(|s| s.box_ratios.iter().sum::<f64>() / s.box_ratios.len() as f64)
            .collect();
        (!per_step.is_empty()).then(|| per_step.iter().sum::<f64>() / per_step.len() as f64)
    });
    let last = stats.last();
    let final_semantic = last.filter(|s| !s.subject_maxes.is_empty()).map(|s| {
        s.subject_maxes
            .values()
            .map(|m| 1.0 - m)
            .fold(f64::MIN, f64::max)
    });
    let final_layout = last.filter(|s| !s.box_ratios.is_empty()).map(|s| {
        s.box_ratios.iter().map(|r| (1.0 - r).powi(2)).sum::<f64>() / s.box_ratios.len() as f64
    });
    Judgement {
        presence,
        subjects_detected: detected,
        subjects_bound: bound,
        centroid_in_box,
        mean_ratio,
        final_semantic,
        final_layout,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// Mean of `treated - baseline`.
    pub delta: f64,
    /// P(mean of sign-flipped differences >= observed).
    pub p_greater: f64,
    /// P(|mean of sign-flipped differences| >= |observed|).
    pub p_two_sided: f64,
    pub n: usize,
    pub permutations: usize,
}

/// Paired sign-flip permutation test on per-seed differences.
pub fn paired_permutation_test(
    baseline: &[f64],
    treated: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if baseline.len() != treated.len() || baseline.is_empty() {
        return Err(Error::param(format!(
            "paired test needs equal non-empty samples, got {} and {}",
            baseline.len(),
            treated.len()
        )));
    }
    let d: Vec<f64> = treated.iter().zip(baseline).map(|(t, b)| t - b).collect();
    let n = d.len() as f64;
    let observed = d.iter().sum::<f64>() / n;
    // compare with a little slack so exact ties count as "as extreme"
    let tol = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ge, mut abs_ge) = (0usize, 0usize);
    for _ in 0..permutations {
        let m = d
            .iter()
            .map(|&x| if rng.random_bool(0.5) { x } else { -x })
            .sum::<f64>()
            / n;
        if m >= observed - tol {
            ge += 1;
        }
        if m.abs() >= observed.abs() - tol {
            abs_ge += 1;
        }
    }
    let p = |k: usize| (k + 1) as f64 / (permutations + 1) as f64;
    Ok(PermutationResult {
        delta: observed,
        p_greater: p(ge),
        p_two_sided: p(abs_ge),
        n: d.len(),
        permutations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    /// `None` samples without guidance.
    pub guidance: Option<GuidanceConfig>,
    /// Whether the case boxes are handed to the sampler.
    pub use_layout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub name: String,
    pub seeds: usize,
    pub presence_rate: f64,
    /// Bound-color subjects over detected subjects, pooled across seeds.
    pub binding_rate: Option<f64>,
    pub centroid_in_box_rate: Option<f64>,
    pub mean_ratio: Option<f64>,
    pub mean_final_semantic: Option<f64>,
    pub mean_final_layout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub condition: String,
    pub baseline: String,
    pub metric: String,
    pub test: PermutationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conditions: Vec<ConditionSummary>,
    pub comparisons: Vec<Comparison>,
    pub seeds: Vec<u64>,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(name: &str, judgements: &[Judgement]) -> ConditionSummary {
    let n = judgements.len();
    let detected: usize = judgements.iter().map(|j| j.subjects_detected).sum();
    let bound: usize = judgements.iter().map(|j| j.subjects_bound).sum();
    ConditionSummary {
        name: name.to_string(),
        seeds: n,
        presence_rate: judgements.iter().map(|j| j.presence).sum::<f64>() / n.max(1) as f64,
        binding_rate: (detected > 0).then(|| bound as f64 / detected as f64),
        centroid_in_box_rate: mean_of(judgements.iter().map(|j| j.centroid_in_box)),
        mean_ratio: mean_of(judgements.iter().map(|j| j.mean_ratio)),
        mean_final_semantic: mean_of(judgements.iter().map(|j| j.final_semantic)),
        mean_final_layout: mean_of(judgements.iter().map(|j| j.final_layout)),
    }
}

/// Per-seed results of one condition.
#[derive(Debug, Clone)]
pub struct ConditionRun {
    pub condition: Condition,
    pub judgements: Vec<Judgement>,
    pub images: Vec<Tensor<f32>>,
}

/// Samples every `(condition, seed)` pair. Case `i` is paired across
/// conditions and sampled with `seeds[i]`.
#[allow(clippy::too_many_arguments)]
pub fn run_conditions<E: Element>(
    model: &DenoiserModel<E>,
    schedule: &NoiseSchedule,
    conditions: &[Condition],
    cases: &[EvalCase],
    seeds: &[u64],
    sampler: &SamplerConfig,
    workers: usize,
) -> Result<Vec<ConditionRun>> {
    if cases.len() != seeds.len() {
        return Err(Error::param("every case needs exactly one seed"));
    }
    let window = GuidanceConfig::default();
    let window = sampler.steps + 1 - window.t_end.min(sampler.steps);
    conditions
        .iter()
        .map(|cond| {
            let results = fan_out(cases.len(), workers, |i| {
                let case = &cases[i];
                let layout = if cond.use_layout {
                    case.layout.as_ref()
                } else {
                    None
                };
                let s = Sampler::new(
                    model,
                    schedule,
                    &case.prompt,
                    layout,
                    cond.guidance.as_ref(),
                    sampler.clone(),
                )?
                .with_probe(case.layout.as_ref())?;
                let out = s.run(seeds[i])?;
                Ok((judge(&out.image, case, &out.stats, window), out.image))
            })?;
            let (judgements, images) = results.into_iter().unzip();
            Ok(ConditionRun {
                condition: cond.clone(),
                judgements,
                images,
            })
        })
        .collect()
}

/// Aggregates runs; every condition after the first is compared with the
/// first on presence, centroid-in-box and mean ratio.
pub fn build_report(
    runs: &[ConditionRun],
    seeds: &[u64],
    permutations: usize,
    test_seed: u64,
) -> Result<EvalReport> {
    let conditions = runs
        .iter()
        .map(|r| summarize(&r.condition.name, &r.judgements))
        .collect();
    let mut comparisons = Vec::new();
    if let Some((base, rest)) = runs.split_first() {
        type Metric = fn(&Judgement) -> Option<f64>;
        let metrics: [(&str, Metric); 3] = [
            ("presence", |j| Some(j.presence)),
            ("centroid_in_box", |j| j.centroid_in_box),
            ("mean_ratio", |j| j.mean_ratio),
        ];
        for run in rest {
            for (name, f) in metrics {
                let pairs: Vec<(f64, f64)> = base
                    .judgements
                    .iter()
                    .zip(&run.judgements)
                    .filter_map(|(b, t)| Some((f(b)?, f(t)?)))
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                let (b, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                comparisons.push(Comparison {
                    condition: run.condition.name.clone(),
                    baseline: base.condition.name.clone(),
                    metric: name.to_string(),
                    test: paired_permutation_test(&b, &t, permutations, test_seed)?,
                });
            }
        }
    }
    Ok(EvalReport {
        conditions,
        comparisons,
        seeds: seeds.to_vec(),
    })
}

impl EvalReport {
    pub fn summary(&self, name: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn comparison(&self, condition: &str, metric: &str) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.condition == condition && c.metric == metric)
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "condition", "n", "present", "binding", "in_box", "ratio", "L_sem", "E_lay"
        );
        for c in &self.conditions {
            let _ = writeln!(
                s,
                "{:<16} {:>5} {:>8.3} {:>8} {:>8} {:>8} {:>8} {:>8}",
                c.name,
                c.seeds,
                c.presence_rate,
                opt(c.binding_rate),
                opt(c.centroid_in_box_rate),
                opt(c.mean_ratio),
                opt(c.mean_final_semantic),
                opt(c.mean_final_layout)
            );
        }
        if !self.comparisons.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "{:<16} {:<16} {:>8} {:>10} {:>10}",
                "condition", "metric", "delta", "p(>)", "p(two)"
            );
            for c in &self.comparisons {
                let _ = writeln!(
                    s,
                    "{:<16} {:<16} {:>+8.3} {:>10.4} {:>10.4}",
                    c.condition, c.metric, c.test.delta, c.test.p_greater, c.test.p_two_sided
                );
            }
        }
        s
    }
}
