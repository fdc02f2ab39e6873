//! Randomized checks of the teacher and fusion operations. Each check takes a
//! generated case and fails with a message instead of panicking, so it can
//! run under `proptest!` or a hand-driven `TestRunner`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use wssgg_core::fusion::{
    expert_reweight, fuse_targets, random_attention, self_reweight, AdaptorParams, ExpertEmbeddings, FusionStrategy, TeacherWeights,
};
use wssgg_core::grounder::{GrounderParams, GrounderShape};
use wssgg_core::ir::{BBox, ImageRecord, RegionProposal, TargetDistribution, TargetSource, TextEntity};
use wssgg_core::nn::{Activation, Adam, AdamConfig, Params};
use wssgg_core::teachers::{interaction_aware_target, interaction_target_from_densities, object_aware_target, ActivationMap, SynonymMatcher};
use wssgg_core::training::{batch_objective, plan_batch, GroundingSample, SamplePlan, TeacherSet, TrainConfig};

pub const SUM_TOL: f64 = 1e-6;
const WORDS: [&str; 5] = ["boy", "kid", "dog", "head", "ball"];

type Check = std::result::Result<(), TestCaseError>;

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

pub fn check_distribution(t: &TargetDistribution<f64>, what: &str) -> Check {
    if !t.defined {
        return if t.values.iter().all(|&v| v == 0.0) {
            Ok(())
        } else {
            Err(fail(format!("{what}: undefined target with mass {:?}", t.values)))
        };
    }
    if t.values.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(fail(format!("{what}: negative or non-finite entry in {:?}", t.values)));
    }
    let sum: f64 = t.values.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(fail(format!("{what}: sums to {sum}")));
    }
    Ok(())
}

fn check_weights(w: TeacherWeights<f64>, what: &str) -> Check {
    if !(w.object >= 0.0 && w.interaction >= 0.0) || (w.object + w.interaction - 1.0).abs() > SUM_TOL {
        return Err(fail(format!("{what}: weights ({}, {})", w.object, w.interaction)));
    }
    Ok(())
}

fn permuted<T: Clone>(values: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&j| values[j].clone()).collect()
}

fn permuted_rows(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    m.select(ndarray::Axis(0), perm)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

pub fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

/// A proposal count with a matching permutation.
fn sized_permutation(max: usize) -> impl Strategy<Value = (usize, Vec<usize>)> {
    (1..=max).prop_flat_map(|n| (Just(n), permutation(n)))
}

/// Strictly positive weights normalized to a distribution.
fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn target(values: Vec<f64>, source: TargetSource) -> TargetDistribution<f64> {
    TargetDistribution {
        values,
        source,
        defined: true,
    }
}

fn image(boxes: &[BBox<f64>], labels: &[&str]) -> ImageRecord {
    ImageRecord {
        image_id: "img".into(),
        width: 64.0,
        height: 64.0,
        proposals: boxes
            .iter()
            .zip(labels)
            .map(|(b, l)| RegionProposal {
                bbox: *b,
                label: l.to_string(),
                score: 0.5,
                feature: vec![0.0],
            })
            .collect(),
    }
}

fn small_box() -> impl Strategy<Value = BBox<f64>> {
    (0u32..56, 0u32..56, 1u32..32, 1u32..32).prop_map(|(x, y, w, h)| BBox {
        x1: x as f64,
        y1: y as f64,
        x2: (x + w).min(64) as f64,
        y2: (y + h).min(64) as f64,
    })
}

// --- object teacher --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ObjectCase {
    pub entity: usize,
    pub labels: Vec<usize>,
    pub kid_is_boy: bool,
    pub perm: Vec<usize>,
}

pub fn object_case() -> impl Strategy<Value = ObjectCase> {
    (0..WORDS.len(), prop::collection::vec(0..WORDS.len(), 1..8), any::<bool>())
        .prop_flat_map(|(entity, labels, kid_is_boy)| {
            let n = labels.len();
            (Just(entity), Just(labels), Just(kid_is_boy), permutation(n))
        })
        .prop_map(|(entity, labels, kid_is_boy, perm)| ObjectCase {
            entity,
            labels,
            kid_is_boy,
            perm,
        })
}

pub fn object_teacher_invariants(case: ObjectCase) -> Check {
    let mut syn = BTreeMap::new();
    if case.kid_is_boy {
        syn.insert("kid".to_string(), "boy".to_string());
    }
    let matcher = SynonymMatcher::new(syn);
    let entity = TextEntity::new(0, WORDS[case.entity], None);
    let labels: Vec<&str> = case.labels.iter().map(|&l| WORDS[l]).collect();
    let boxes = vec![BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(); labels.len()];
    let t = object_aware_target::<f64>(&entity, &image(&boxes, &labels), &matcher);
    check_distribution(&t, "object target")?;
    let matches: Vec<bool> = labels.iter().map(|l| matcher.matches(WORDS[case.entity], l)).collect();
    if t.defined != matches.iter().any(|&m| m) {
        return Err(fail(format!("defined={} with matches {matches:?}", t.defined)));
    }
    let support: Vec<f64> = t.values.iter().zip(&matches).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if t.values.iter().zip(&matches).any(|(&v, &m)| !m && v != 0.0) {
        return Err(fail(format!("mass outside matching proposals: {:?}", t.values)));
    }
    if support.windows(2).any(|w| w[0] != w[1]) {
        return Err(fail(format!("unequal mass on the support: {support:?}")));
    }
    let p_labels = permuted(&labels, &case.perm);
    let tp = object_aware_target::<f64>(&entity, &image(&boxes, &p_labels), &matcher);
    if tp.values != permuted(&t.values, &case.perm) {
        return Err(fail("object target is not permutation equivariant".into()));
    }
    Ok(())
}

// --- interaction teacher ---------------------------------------------------

#[derive(Debug, Clone)]
pub struct InteractionCase {
    pub grid: Vec<f64>,
    pub boxes: Vec<BBox<f64>>,
    pub perm: Vec<usize>,
    pub shift: f64,
    pub bump: (usize, f64),
}

pub fn interaction_case() -> impl Strategy<Value = InteractionCase> {
    (prop::collection::vec(0.0f64..5.0, 16), sized_permutation(6), -10.0f64..10.0, 0.01f64..3.0)
        .prop_flat_map(|(grid, (n, perm), shift, bump)| {
            (
                Just(grid),
                prop::collection::vec(small_box(), n),
                Just(perm),
                Just(shift),
                (0..n, Just(bump)),
            )
        })
        .prop_map(|(grid, boxes, perm, shift, bump)| InteractionCase {
            grid,
            boxes,
            perm,
            shift,
            bump,
        })
}

pub fn interaction_teacher_invariants(case: InteractionCase) -> Check {
    let map = ActivationMap {
        image_id: "img".into(),
        entity_id: 0,
        height: 4,
        width: 4,
        scale: (16.0, 16.0),
        grid: case.grid.clone(),
    };
    let entity = TextEntity::new(0, "boy", None);
    let labels = vec!["boy"; case.boxes.len()];
    let t = interaction_aware_target::<f64>(&entity, &image(&case.boxes, &labels), &map, 1.0)
        .map_err(|e| fail(e.to_string()))?;
    if !t.defined {
        return Err(fail("interaction target undefined with proposals present".into()));
    }
    check_distribution(&t, "interaction target")?;
    let p_boxes = permuted(&case.boxes, &case.perm);
    let tp = interaction_aware_target::<f64>(&entity, &image(&p_boxes, &labels), &map, 1.0)
        .map_err(|e| fail(e.to_string()))?;
    if !close(&tp.values, &permuted(&t.values, &case.perm), 1e-12) {
        return Err(fail("interaction target is not permutation equivariant".into()));
    }

    let densities: Vec<f64> = case.grid[..case.boxes.len()].to_vec();
    let base = interaction_target_from_densities(&densities);
    check_distribution(&base, "softmax of densities")?;
    let shifted: Vec<f64> = densities.iter().map(|d| d + case.shift).collect();
    if !close(&interaction_target_from_densities(&shifted).values, &base.values, 1e-9) {
        return Err(fail(format!("not shift invariant under +{}", case.shift)));
    }
    let (j, delta) = case.bump;
    let mut bumped = densities.clone();
    bumped[j] += delta;
    let after = interaction_target_from_densities(&bumped);
    if densities.len() > 1 && after.values[j] <= base.values[j] {
        return Err(fail(format!("raising density {j} did not raise its mass")));
    }
    Ok(())
}

// --- fusion ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FusionCase {
    pub object: Vec<f64>,
    pub interaction: Vec<f64>,
    pub object_defined: bool,
    pub w: f64,
}

pub fn fusion_case() -> impl Strategy<Value = FusionCase> {
    (1usize..8)
        .prop_flat_map(|n| (distribution(n), distribution(n), any::<bool>(), 0.0f64..=1.0))
        .prop_map(|(object, interaction, object_defined, w)| FusionCase {
            object,
            interaction,
            object_defined,
            w,
        })
}

pub fn fusion_invariants(case: FusionCase) -> Check {
    let n = case.object.len();
    let object = if case.object_defined {
        target(case.object.clone(), TargetSource::ObjectTeacher)
    } else {
        TargetDistribution::undefined(n, TargetSource::ObjectTeacher)
    };
    let interaction = target(case.interaction.clone(), TargetSource::InteractionTeacher);
    let avg = TeacherWeights::<f64>::average(object.defined, true).map_err(|e| fail(e.to_string()))?;
    check_weights(avg, "average")?;
    if case.object_defined && (avg.object, avg.interaction) != (0.5, 0.5) {
        return Err(fail("average weights are not (0.5, 0.5)".into()));
    }
    let weights = if case.object_defined {
        TeacherWeights::new(case.w, 1.0 - case.w)
    } else {
        avg
    };
    let fused = fuse_targets(&object, &interaction, weights).map_err(|e| fail(e.to_string()))?;
    check_distribution(&fused, "fused target")?;
    Ok(())
}

// --- expert and self-guided weights ----------------------------------------

#[derive(Debug, Clone)]
pub struct ReweightCase {
    pub object: Vec<f64>,
    pub interaction: Vec<f64>,
    pub expert_proposals: Vec<Vec<f64>>,
    pub prompt: Vec<f64>,
    pub scale: f64,
    pub perm: Vec<usize>,
    pub seed: u64,
}

fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1f64..1.0, d)
}

pub fn reweight_case() -> impl Strategy<Value = ReweightCase> {
    sized_permutation(6)
        .prop_flat_map(|(n, perm)| {
            (
                distribution(n),
                distribution(n),
                prop::collection::vec(nonzero_vec(4), n),
                nonzero_vec(4),
                0.01f64..100.0,
                Just(perm),
                any::<u64>(),
            )
        })
        .prop_map(|(object, interaction, expert_proposals, prompt, scale, perm, seed)| ReweightCase {
            object,
            interaction,
            expert_proposals,
            prompt,
            scale,
            perm,
            seed,
        })
}

fn matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows[0].len();
    Array2::from_shape_fn((rows.len(), d), |(i, k)| rows[i][k])
}

pub fn expert_reweight_invariants(case: ReweightCase) -> Check {
    let object = target(case.object.clone(), TargetSource::ObjectTeacher);
    let interaction = target(case.interaction.clone(), TargetSource::InteractionTeacher);
    let expert = ExpertEmbeddings {
        proposals: matrix(&case.expert_proposals),
        prompts: matrix(std::slice::from_ref(&case.prompt)),
    };
    let w = expert_reweight(0, &object, &interaction, &expert).map_err(|e| fail(e.to_string()))?;
    check_weights(w, "expert")?;

    let scaled = ExpertEmbeddings {
        proposals: &expert.proposals * case.scale,
        prompts: &expert.prompts * case.scale,
    };
    let ws = expert_reweight(0, &object, &interaction, &scaled).map_err(|e| fail(e.to_string()))?;
    if (ws.object - w.object).abs() > 1e-9 {
        return Err(fail(format!("rescaling by {} moved the weights", case.scale)));
    }

    let permuted_expert = ExpertEmbeddings {
        proposals: permuted_rows(&expert.proposals, &case.perm),
        prompts: expert.prompts.clone(),
    };
    let wp = expert_reweight(
        0,
        &target(permuted(&case.object, &case.perm), TargetSource::ObjectTeacher),
        &target(permuted(&case.interaction, &case.perm), TargetSource::InteractionTeacher),
        &permuted_expert,
    )
    .map_err(|e| fail(e.to_string()))?;
    if (wp.object - w.object).abs() > 1e-9 {
        return Err(fail("expert weights change under a proposal permutation".into()));
    }

    let undefined = TargetDistribution::undefined(case.object.len(), TargetSource::ObjectTeacher);
    let wu = expert_reweight(0, &undefined, &interaction, &expert).map_err(|e| fail(e.to_string()))?;
    if (wu.object, wu.interaction) != (0.0, 1.0) {
        return Err(fail("undefined object teacher did not fall back to (0, 1)".into()));
    }
    Ok(())
}

pub fn self_reweight_invariants(case: ReweightCase) -> Check {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(case.seed);
    let adaptor = AdaptorParams::<f64>::init(4, &mut rng);
    let v = matrix(&case.expert_proposals);
    let h = Array1::from(case.prompt.clone());
    let object = target(case.object.clone(), TargetSource::ObjectTeacher);
    let interaction = target(case.interaction.clone(), TargetSource::InteractionTeacher);
    let r = self_reweight(&object, &interaction, h.view(), v.view(), &adaptor).map_err(|e| fail(e.to_string()))?;
    check_weights(r.weights, "self-guided")?;
    let rp = self_reweight(
        &target(permuted(&case.object, &case.perm), TargetSource::ObjectTeacher),
        &target(permuted(&case.interaction, &case.perm), TargetSource::InteractionTeacher),
        h.view(),
        permuted_rows(&v, &case.perm).view(),
        &adaptor,
    )
    .map_err(|e| fail(e.to_string()))?;
    if (rp.weights.object - r.weights.object).abs() > 1e-9 {
        return Err(fail("self-guided weights change under a proposal permutation".into()));
    }
    let zero = self_reweight(&object, &interaction, h.view(), v.view(), &AdaptorParams::zeros(4))
        .map_err(|e| fail(e.to_string()))?;
    if (zero.weights.object, zero.weights.interaction) != (0.5, 0.5) {
        return Err(fail("a zero adaptor did not give (0.5, 0.5)".into()));
    }
    Ok(())
}

// --- stop-gradient ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StopGradCase {
    pub seed: u64,
    pub entities: usize,
    pub proposals: usize,
    pub values: Vec<f64>,
}

pub fn stop_grad_case() -> impl Strategy<Value = StopGradCase> {
    (any::<u64>(), 1usize..4, 2usize..5, prop::collection::vec(-1.0f64..1.0, 64)).prop_map(
        |(seed, entities, proposals, values)| StopGradCase {
            seed,
            entities,
            proposals,
            values,
        },
    )
}

fn sample(case: &StopGradCase, salt: usize) -> GroundingSample<f64> {
    let (n, m) = (case.entities, case.proposals);
    let val = |k: usize| case.values[(k + salt * 17) % case.values.len()];
    let softmax_row = |i: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..m).map(|j| (2.0 * val(i * 5 + j + 31)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    };
    GroundingSample {
        image_id: format!("img{salt}"),
        lemmas: (0..n).map(|i| format!("e{i}")).collect(),
        features: Array2::from_shape_fn((m, 3), |(j, k)| val(j * 3 + k)),
        embeddings: Array2::from_shape_fn((n, 3), |(i, k)| val(40 + i * 3 + k)),
        object_targets: (0..n).map(|i| target(softmax_row(i), TargetSource::ObjectTeacher)).collect(),
        interaction_targets: Some((0..n).map(|i| target(softmax_row(i + 7), TargetSource::InteractionTeacher)).collect()),
        expert_weights: None,
    }
}

/// With distillation and MIL switched off, the self-guided objective's
/// gradient for the grounder is exactly zero and only the adaptor moves.
pub fn stop_gradient_invariants(case: StopGradCase) -> Check {
    let shape = GrounderShape {
        text_dim: 3,
        visual_dim: 3,
        hidden_dim: 4,
        embed_dim: 4,
    };
    let params = GrounderParams::<f64>::init(shape, Activation::Relu, case.seed);
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(case.seed ^ 1);
    let adaptor = AdaptorParams::<f64>::init(4, &mut rng);
    let cfg = TrainConfig {
        teachers: TeacherSet::Both,
        strategy: FusionStrategy::SelfGuided,
        use_mil: true,
        ..TrainConfig::default()
    };
    let samples = [sample(&case, 0), sample(&case, 1)];
    let batch: Vec<&GroundingSample<f64>> = samples.iter().collect();
    let negatives: Vec<Vec<Vec<f64>>> = samples
        .iter()
        .map(|s| (0..s.num_entities()).map(|_| random_attention(s.num_proposals(), &mut rng)).collect())
        .collect();
    let plans = plan_batch(&params, &adaptor, &batch, &cfg, &negatives).map_err(|e| fail(e.to_string()))?;

    let (_, full) = batch_objective(&params, &adaptor, &batch, &plans, &cfg).map_err(|e| fail(e.to_string()))?;
    let stripped: Vec<_> = plans
        .iter()
        .map(|p| SamplePlan {
            adaptor_terms: Vec::new(),
            ..p.clone()
        })
        .collect();
    let (_, without) = batch_objective(&params, &adaptor, &batch, &stripped, &cfg).map_err(|e| fail(e.to_string()))?;
    if full.grounder != without.grounder {
        return Err(fail("the adaptor loss changed the grounder gradient".into()));
    }

    let adaptor_only = TrainConfig { use_mil: false, ..cfg };
    let no_targets: Vec<_> = plans
        .iter()
        .map(|p| SamplePlan {
            targets: vec![None; p.targets.len()],
            ..p.clone()
        })
        .collect();
    let (loss, g) = batch_objective(&params, &adaptor, &batch, &no_targets, &adaptor_only).map_err(|e| fail(e.to_string()))?;
    let mut updated = params.clone();
    Adam::new(AdamConfig::default(), &updated).step(&mut updated, &g.grounder);
    let bits = |p: &GrounderParams<f64>| -> Vec<u64> { p.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect() };
    if bits(&updated) != bits(&params) {
        return Err(fail("an adaptor-only update changed the encoders".into()));
    }
    if loss.adaptor > 0.0 && g.adaptor.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)) {
        return Err(fail("positive adaptor loss with a zero adaptor gradient".into()));
    }
    Ok(())
}
