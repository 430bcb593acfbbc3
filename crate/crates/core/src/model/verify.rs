use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ForwardOptions, Model, ModelConfig};
use crate::error::Result;
use crate::tensor::{grad_check_inputs, CoordSelection, GradCheckReport, Tensor};

/// Finite-difference check of the cross-entropy loss of a whole network.
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    /// Parameter names, indexing `report.per_input`.
    pub names: Vec<String>,
    pub report: GradCheckReport,
}

impl ModelGradCheck {
    /// Worst relative error per parameter tensor.
    pub fn per_param(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names.iter().map(|s| s.as_str()).zip(self.report.per_input.iter().copied())
    }
}

/// Checks every parameter tensor of a freshly initialized `cfg` network in
/// double precision, probing `per_param` sampled coordinates of each.
///
/// One training-mode pass first fills the batch-norm running statistics;
/// the checked function is then the inference-mode loss. In training mode
/// the head normalizes with batch statistics, so a bias that shifts every
/// node of every sample alike has an exactly zero gradient, which a
/// relative error cannot resolve against finite-difference rounding.
///
/// Neighbor selection is piecewise constant and carries no gradient, so the
/// probes reuse the graphs of the unperturbed input: a near-tie flipping
/// between `x - eps` and `x + eps` would otherwise put a jump into the
/// difference quotient.
pub fn check_model_gradients(cfg: &ModelConfig, batch: usize, per_param: usize, seed: u64, eps: f64) -> Result<ModelGradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<f64> = Model::new(cfg.clone(), &mut rng)?;
    let x = Tensor::from_fn(&[batch, 1, cfg.input_frames, cfg.input_bins], |_| rng.gen_range(-1.0..1.0));
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.n_classes).collect();
    {
        let mut tape = crate::tensor::Tape::new();
        let vars = model.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        model.forward_train(&mut tape, &vars, xv, &ForwardOptions::default())?;
    }
    let (_, trace) = model.infer(&x, &ForwardOptions::default())?;
    let opts = ForwardOptions {
        fixed_graphs: Some(trace.graphs),
        ..Default::default()
    };
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    let report = grad_check_inputs(
        |tape, vars| {
            let xv = tape.constant(x.clone());
            let out = model.forward_eval(tape, vars, xv, &opts)?;
            tape.cross_entropy(out.logits, &labels)
        },
        &inputs,
        eps,
        CoordSelection::Sample {
            per_input: per_param,
            seed: seed ^ 0xC0FF_EE00,
        },
    )?;
    Ok(ModelGradCheck {
        names: model.params().iter().map(|p| p.name.clone()).collect(),
        report,
    })
}
