//! Analytic-versus-central-difference verification for every loss.
//!
//! Each component builds randomized small instances (sequence lengths 2-6,
//! embedding dims 3-8, values uniform in [-1, 1]), computes the reverse-mode
//! gradient and the finite-difference estimate at step 1e-5, and compares
//! them leaf by leaf. A leaf passes when the l2 error is below 1e-4 relative
//! to the gradient magnitudes, or absolutely tiny for identically-zero
//! gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{Array, Bindings, Graph, NodeId};
use crate::losses::{
    batch_cross_entropy_expr, labeled_objective_expr, ntxent_expr, supervised_contrastive_expr,
    tcc_batch_objective_expr, tcc_pair_loss_expr, ContrastiveConfig, CycleBackDenominator,
    LossError, Similarity, TccConfig,
};
use crate::model::ModelConfig;
use crate::rng::stream;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-9;

pub const COMPONENTS: [&str; 6] = [
    "tcc_pair_loss",
    "tcc_batch_objective",
    "ntxent",
    "supervised_contrastive_batch",
    "cross_entropy",
    "labeled_objective",
];

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("unknown component '{0}'")]
    UnknownComponent(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

/// Result of checking one component across its random instances.
#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub component: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn fill(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Array::new(shape.to_vec(), data).expect("finite fill")
}

struct Instance {
    graph: Graph,
    root: NodeId,
    bindings: Bindings,
    wrt: Vec<String>,
}

fn tcc_cfg_for(i: usize) -> TccConfig {
    TccConfig {
        similarity: if i % 2 == 0 { Similarity::Cosine } else { Similarity::NegativeSquaredDistance },
        denominator: if (i / 2) % 2 == 0 {
            CycleBackDenominator::Variance
        } else {
            CycleBackDenominator::VarianceSquared
        },
        ..TccConfig::default()
    }
}

fn build_instance(component: &str, i: usize, rng: &mut ChaCha8Rng) -> Result<Instance, GradCheckError> {
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let mut wrt = Vec::new();

    let root = match component {
        "tcc_pair_loss" => {
            let n = rng.gen_range(2..=6);
            let m = rng.gen_range(2..=6);
            let d = rng.gen_range(3..=8);
            let u = g.leaf("u", &[n, d])?;
            let v = g.leaf("v", &[m, d])?;
            bindings.insert("u".into(), fill(&[n, d], rng));
            bindings.insert("v".into(), fill(&[m, d], rng));
            wrt.extend(["u".to_string(), "v".to_string()]);
            tcc_pair_loss_expr(&mut g, u, v, &tcc_cfg_for(i))?
        }
        "tcc_batch_objective" => {
            let d = rng.gen_range(3..=6);
            let mut clips = Vec::new();
            for c in 0..3 {
                let n = rng.gen_range(2..=4);
                let name = format!("c{c}");
                clips.push(g.leaf(&name, &[n, d])?);
                bindings.insert(name.clone(), fill(&[n, d], rng));
                wrt.push(name);
            }
            tcc_batch_objective_expr(&mut g, &clips, &tcc_cfg_for(i))?
        }
        "ntxent" => {
            let d = rng.gen_range(3..=8);
            let a = g.leaf("a", &[d])?;
            let p = g.leaf("p", &[d])?;
            bindings.insert("a".into(), fill(&[d], rng));
            bindings.insert("p".into(), fill(&[d], rng));
            wrt.extend(["a".to_string(), "p".to_string()]);
            let mut negs = Vec::new();
            for k in 0..3 {
                let name = format!("n{k}");
                negs.push(g.leaf(&name, &[d])?);
                bindings.insert(name.clone(), fill(&[d], rng));
                wrt.push(name);
            }
            ntxent_expr(&mut g, a, p, &negs, &ContrastiveConfig::default())?
        }
        "supervised_contrastive_batch" => {
            let d = rng.gen_range(3..=6);
            let batch = 6;
            let labels = loop {
                let ls: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=3)).collect();
                let mut counts = [0usize; 3];
                for &l in &ls {
                    counts[l - 1] += 1;
                }
                if counts.iter().any(|&c| c >= 2) {
                    break ls;
                }
            };
            let emb = g.leaf("emb", &[batch, d])?;
            bindings.insert("emb".into(), fill(&[batch, d], rng));
            wrt.push("emb".into());
            supervised_contrastive_expr(&mut g, emb, &labels, 3, &ContrastiveConfig::default())?
        }
        "cross_entropy" => {
            let classes = rng.gen_range(3..=6);
            // random logits through an explicit softmax so the leaf is a
            // well-conditioned probability vector
            let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|&e| e / total).collect();
            let label = rng.gen_range(1..=classes);
            let p = g.leaf("p", &[1, classes])?;
            bindings.insert("p".into(), Array::new(vec![1, classes], probs).expect("probs"));
            wrt.push("p".into());
            batch_cross_entropy_expr(&mut g, p, &[label])?
        }
        "labeled_objective" => {
            let model_cfg = ModelConfig {
                input_dim: 4,
                hidden_dims: vec![5],
                embed_dim: 4,
                num_phases: 3,
            };
            let batch = 6;
            let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=3)).collect();
            let frames = g.constant(fill(&[batch, 4], rng));
            let root =
                labeled_objective_expr(&mut g, &model_cfg, frames, &labels, &ContrastiveConfig::default())?;
            for (name, shape) in [
                ("omega.w0", vec![4usize, 5]),
                ("omega.b0", vec![5]),
                ("omega.w1", vec![5, 4]),
                ("omega.b1", vec![4]),
                ("theta.w", vec![4, 3]),
                ("theta.b", vec![3]),
            ] {
                bindings.insert(name.to_string(), fill(&shape, rng));
                wrt.push(name.to_string());
            }
            root
        }
        other => return Err(GradCheckError::UnknownComponent(other.to_string())),
    };
    Ok(Instance { graph: g, root, bindings, wrt })
}

/// Check one component over `instances` randomized cases. `corrupt` injects
/// an error into the analytic gradient of every instance; it exists so the
/// harness can prove it detects failures.
pub fn check_component(
    component: &str,
    instances: usize,
    seed: u64,
    corrupt: bool,
) -> Result<ComponentReport, GradCheckError> {
    let idx = COMPONENTS
        .iter()
        .position(|&c| c == component)
        .ok_or_else(|| GradCheckError::UnknownComponent(component.to_string()))?;
    let mut max_rel: f64 = 0.0;
    let mut passed = true;
    for i in 0..instances {
        let mut rng = stream(seed, &[idx as u64, i as u64]);
        let inst = build_instance(component, i, &mut rng)?;
        let wrt: Vec<&str> = inst.wrt.iter().map(String::as_str).collect();
        let mut analytic = inst.graph.gradient(inst.root, &inst.bindings, &wrt)?;
        if corrupt {
            // bump scaled to the gradient so it always exceeds the tolerance
            let first = analytic.get_mut(wrt[0]).expect("leaf present");
            let norm: f64 = first.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            first.data_mut()[0] += 0.05 * (norm + 1.0);
        }
        let numeric = inst.graph.numeric_gradient(inst.root, &inst.bindings, &wrt, STEP)?;
        for name in &wrt {
            let a = analytic[*name].data();
            let n = numeric[*name].data();
            let err: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let err_inf: f64 = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt()
                + n.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rel = err / scale.max(1e-12);
            if err_inf > ABS_TOL && rel > REL_TOL {
                passed = false;
            }
            if scale > 0.0 {
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(ComponentReport {
        component: component.to_string(),
        instances,
        max_rel_error: max_rel,
        passed,
    })
}

/// Run the whole suite (or a subset) and collect per-component reports.
pub fn run_suite(
    components: &[&str],
    instances: usize,
    seed: u64,
    corrupt: bool,
) -> Result<Vec<ComponentReport>, GradCheckError> {
    components
        .iter()
        .map(|c| check_component(c, instances, seed, corrupt))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_a_smoke_run() {
        for component in COMPONENTS {
            let report = check_component(component, 5, 42, false).unwrap();
            assert!(report.passed, "{component}: max rel {}", report.max_rel_error);
            assert!(report.max_rel_error < REL_TOL);
        }
    }

    #[test]
    fn corrupted_gradients_are_detected() {
        for component in COMPONENTS {
            let report = check_component(component, 2, 7, true).unwrap();
            assert!(!report.passed, "{component} missed the corruption");
        }
    }

    #[test]
    fn unknown_component_is_an_error() {
        assert!(matches!(
            check_component("nonsense", 1, 0, false),
            Err(GradCheckError::UnknownComponent(_))
        ));
    }
}
