use super::eval_loss;
use crate::data::{EvalSet, NodeDataset};
use crate::engine::{run_training, TrainConfig, TrainingInputs, TrainingTrace};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector, Sample};
use crate::topology::{MixingMatrix, Topology};

/// `Σ_k q_k (L(θ_k^T) − L(θ_{k∖z}^T))` between a full run and one retrained
/// without the datum; both must share everything but the data.
pub fn loo_influence(full: &TrainingTrace, without: &TrainingTrace, eval: &EvalSet) -> Result<f64> {
    let mismatch = [
        ("model", full.model() != without.model()),
        ("topology", full.topology() != without.topology()),
        ("mixing", full.mixing() != without.mixing()),
        ("step sizes", full.lrs() != without.lrs()),
        ("q", full.q() != without.q()),
        ("seed", full.seed() != without.seed()),
        ("batch size", full.batch_size() != without.batch_size()),
        ("init", full.init_policy() != without.init_policy()),
        ("initial parameters", full.params(0)? != without.params(0)?),
    ];
    if let Some((what, _)) = mismatch.iter().find(|(_, differs)| *differs) {
        return Err(Error::Comparability(format!("{what} differ")));
    }
    let ev = eval.refs();
    let model = full.model();
    let mut total = 0.0;
    for (k, (a, b)) in full.final_params().iter().zip(without.final_params()).enumerate() {
        total += full.q()[k] * (eval_loss(model, a, &ev)? - eval_loss(model, b, &ev)?);
    }
    Ok(total)
}

/// Centralized leave-one-out: train on `samples` and on `samples` minus
/// entry `removed` with the same seed and schedule, then compare.
pub fn loo_retrain(
    model: &ModelSpec,
    samples: &[Sample],
    removed: usize,
    eval: &EvalSet,
    cfg: &TrainConfig,
    initial: Option<ParamVector>,
) -> Result<f64> {
    if removed >= samples.len() {
        return Err(Error::Config(format!("sample {removed} out of range")));
    }
    let topo = Topology::from_edges(1, [(0, 0)])?;
    let run = |data: Vec<Sample>| -> Result<TrainingTrace> {
        let inputs = TrainingInputs {
            model: model.clone(),
            topology: topo.clone(),
            mixing: MixingMatrix::identity(1).into(),
            shards: vec![NodeDataset::new(0, data)?],
            eval: eval.clone(),
            initial: initial.clone().map(|p| vec![p]),
        };
        run_training(cfg, inputs, 1)
    };
    let full = run(samples.to_vec())?;
    let mut rest = samples.to_vec();
    rest.remove(removed);
    let without = run(rest)?;
    loo_influence(&full, &without, eval)
}
