//! Central finite differences of the grounding objective against its
//! analytic gradients, on a small random fixture.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wssgg_core::fusion::{random_attention, AdaptorParams, FusionStrategy, TeacherWeights};
use wssgg_core::grounder::{GrounderParams, GrounderShape};
use wssgg_core::ir::{TargetDistribution, TargetSource};
use wssgg_core::nn::Params;
use wssgg_core::scalar::softmax;
use wssgg_core::training::{batch_objective, initial_params, plan_batch, GroundingSample, LossBreakdown, TeacherSet, TrainConfig};

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Entity 0 has no object-teacher target, the rest split their mass over
/// two proposals.
fn sample(rng: &mut ChaCha8Rng, id: usize, n_e: usize, n_v: usize) -> GroundingSample<f64> {
    let object_targets = (0..n_e)
        .map(|i| {
            if i == 0 {
                TargetDistribution::undefined(n_v, TargetSource::ObjectTeacher)
            } else {
                let hit = rng.random_range(0..n_v);
                let mut values = vec![0.0; n_v];
                values[hit] = 0.5;
                values[(hit + 1) % n_v] = 0.5;
                TargetDistribution {
                    values,
                    source: TargetSource::ObjectTeacher,
                    defined: true,
                }
            }
        })
        .collect();
    let interaction_targets = (0..n_e)
        .map(|_| {
            let g: Vec<f64> = (0..n_v).map(|_| rng.random_range(0.0..3.0)).collect();
            TargetDistribution {
                values: softmax(&g),
                source: TargetSource::InteractionTeacher,
                defined: true,
            }
        })
        .collect();
    GroundingSample {
        image_id: format!("img{id}"),
        lemmas: (0..n_e).map(|i| format!("e{i}")).collect(),
        features: random_matrix(rng, n_v, 5),
        embeddings: random_matrix(rng, n_e, 6),
        object_targets,
        interaction_targets: Some(interaction_targets),
        expert_weights: Some(
            (0..n_e)
                .map(|i| if i == 0 { TeacherWeights::new(0.0, 1.0) } else { TeacherWeights::new(0.3, 0.7) })
                .collect(),
        ),
    }
}

pub fn config(teachers: TeacherSet, strategy: FusionStrategy, use_mil: bool) -> TrainConfig {
    TrainConfig {
        teachers,
        strategy,
        use_mil,
        hidden_dim: 7,
        embed_dim: 4,
        ..TrainConfig::default()
    }
}

pub fn fixture(cfg: &TrainConfig) -> (Vec<GroundingSample<f64>>, GrounderParams<f64>, AdaptorParams<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples = vec![sample(&mut rng, 0, 3, 4), sample(&mut rng, 1, 2, 5), sample(&mut rng, 2, 3, 3)];
    let shape = GrounderShape {
        text_dim: 6,
        visual_dim: 5,
        hidden_dim: 7,
        embed_dim: 4,
    };
    let (params, adaptor) = initial_params(shape, cfg);
    (samples, params, adaptor)
}

pub fn negatives(samples: &[GroundingSample<f64>]) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    samples
        .iter()
        .map(|s| (0..s.num_entities()).map(|_| random_attention(s.num_proposals(), &mut rng)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Group {
    Grounder,
    Adaptor,
    Both,
}

/// Relative error, with gradients below 1e-7 in magnitude counted as equal.
fn rel_error(numeric: f64, analytic: f64) -> f64 {
    let scale = numeric.abs().max(analytic.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (numeric - analytic).abs() / scale
    }
}

/// Compares every parameter's numeric and analytic gradient. Parameters
/// outside `group` must have a zero numeric gradient. Returns the worst
/// relative error, or the mismatches.
pub fn check_gradients(cfg: &TrainConfig, pick: fn(&LossBreakdown<f64>) -> f64, group: Group) -> Result<f64, String> {
    let (samples, params, adaptor) = fixture(cfg);
    let batch: Vec<&GroundingSample<f64>> = samples.iter().collect();
    let plans = plan_batch(&params, &adaptor, &batch, cfg, &negatives(&samples)).map_err(|e| e.to_string())?;
    let (_, grads) = batch_objective(&params, &adaptor, &batch, &plans, cfg).map_err(|e| e.to_string())?;
    let eval = |p: &GrounderParams<f64>, a: &AdaptorParams<f64>| pick(&batch_objective(p, a, &batch, &plans, cfg).unwrap().0);

    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let analytic: Vec<f64> = grads.grounder.tensors().concat();
    let mut k = 0;
    for t in 0..params.tensors().len() {
        for j in 0..params.tensors()[t].len() {
            let mut plus = params.clone();
            plus.tensors_mut()[t][j] += STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[t][j] -= STEP;
            let numeric = (eval(&plus, &adaptor) - eval(&minus, &adaptor)) / (2.0 * STEP);
            let expected = if group == Group::Adaptor { 0.0 } else { analytic[k] };
            let err = rel_error(numeric, expected);
            worst = worst.max(err);
            if err > TOL {
                failures.push(format!("grounder[{t}][{j}]: numeric {numeric}, analytic {expected}"));
            }
            k += 1;
        }
    }
    let analytic: Vec<f64> = grads.adaptor.tensors().concat();
    let mut k = 0;
    for t in 0..adaptor.tensors().len() {
        for j in 0..adaptor.tensors()[t].len() {
            let mut plus = adaptor.clone();
            plus.tensors_mut()[t][j] += STEP;
            let mut minus = adaptor.clone();
            minus.tensors_mut()[t][j] -= STEP;
            let numeric = (eval(&params, &plus) - eval(&params, &minus)) / (2.0 * STEP);
            let expected = if group == Group::Grounder { 0.0 } else { analytic[k] };
            let err = rel_error(numeric, expected);
            worst = worst.max(err);
            if err > TOL {
                failures.push(format!("adaptor[{t}][{j}]: numeric {numeric}, analytic {expected}"));
            }
            k += 1;
        }
    }
    if failures.is_empty() {
        Ok(worst)
    } else {
        Err(failures.join("; "))
    }
}

/// Every loss term under every configuration that produces it.
pub fn all_checks() -> Vec<(String, Result<f64, String>)> {
    let mut out = vec![(
        "L_MIL".to_string(),
        check_gradients(&config(TeacherSet::None, FusionStrategy::Average, true), |l| l.mil, Group::Grounder),
    )];
    for strategy in [FusionStrategy::Average, FusionStrategy::Expert, FusionStrategy::SelfGuided] {
        out.push((
            format!("L_KD ({strategy:?})"),
            check_gradients(&config(TeacherSet::Both, strategy, false), |l| l.kd, Group::Grounder),
        ));
    }
    out.push((
        "L_adp".to_string(),
        check_gradients(&config(TeacherSet::Both, FusionStrategy::SelfGuided, false), |l| l.adaptor, Group::Adaptor),
    ));
    out.push((
        "L_GD".to_string(),
        check_gradients(&config(TeacherSet::Both, FusionStrategy::SelfGuided, true), |l| l.total, Group::Both),
    ));
    out
}
