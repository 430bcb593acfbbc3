//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which coordinates of each input get a finite-difference probe.
#[derive(Debug, Clone, Copy)]
pub enum CoordSelection {
    All,
    /// Up to `per_input` distinct coordinates per input, drawn with `seed`.
    /// Coordinates whose probe crosses a kink are replaced by fresh draws.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(1e-8, |a| + |n|)` over checked coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest relative error per input.
    pub per_input: Vec<f64>,
    pub checked: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Every probe, same layout as `worst`.
    pub probes: Vec<(usize, usize, f64, f64)>,
    /// Probes discarded because every step tried took different relu or max
    /// branches than the unperturbed pass.
    pub kinks_skipped: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar_loss(tape: &Tape<f64>, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::shape(format!("loss must be scalar, got {:?}", v.shape())));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok(x)
}

/// Checks `f` with respect to a single input.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_inputs(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, CoordSelection::All)
}

/// Checks `f` with respect to every tensor in `inputs`. `f` must build the
/// same scalar function on each call (it is re-run for every probe).
///
/// A central difference across a relu or max kink measures a mix of two
/// slopes. A probe whose perturbed passes leave the branch pattern of the
/// base pass is retried with steps of `eps / 8` and `eps / 64`, and skipped
/// if those cross a kink too.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    select: CoordSelection,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        // params, so that the branch-taking ops are recorded
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((scalar_loss(&tape, loss)?, tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    scalar_loss(&tape, loss)?;
    let base_branches = tape.branch_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| match grads.get(*v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; x.len()],
        })
        .collect();
    if analytic.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        checked: 0,
        worst: None,
        probes: Vec::new(),
        kinks_skipped: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        // candidates in draw order; sampling keeps spares for skipped probes
        let (coords, wanted): (Vec<usize>, usize) = match select {
            CoordSelection::All => ((0..x.len()).collect(), x.len()),
            CoordSelection::Sample { per_input, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(which as u64));
                let spare = (4 * per_input).min(x.len());
                (sample(&mut rng, x.len(), spare).into_vec(), per_input)
            }
        };
        let mut done = 0;
        for c in coords {
            if done == wanted {
                break;
            }
            // early parameters feed so many relus that some input usually
            // sits within eps of zero; a shorter step then stays clear of it
            let orig = x.data()[c];
            let mut numeric = None;
            for h in [eps, eps / 8.0, eps / 64.0] {
                work[which].data_mut()[c] = orig + h;
                let (up, up_branches) = eval(&work)?;
                work[which].data_mut()[c] = orig - h;
                let (down, down_branches) = eval(&work)?;
                work[which].data_mut()[c] = orig;
                if up_branches == base_branches && down_branches == base_branches {
                    numeric = Some((up - down) / (2.0 * h));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.kinks_skipped += 1;
                continue;
            };
            done += 1;
            let a = analytic[which][c];
            let rel = rel_error(a, numeric);
            report.checked += 1;
            report.probes.push((which, c, a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.per_input[which] = report.per_input[which].max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((which, c, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Result of one named check of [`primitive_suite`].
#[derive(Debug, Clone)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

type Case = (String, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

/// Every differentiable primitive of the tape, each reduced to a scalar by
/// a fixed random weighting of its output and checked on all coordinates.
pub fn primitive_suite(seed: u64, eps: f64) -> Result<Vec<NamedCheck>> {
    use super::{BnMode, RunningStats};
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    // relu kinks are avoided by keeping |x| >= 0.1
    let away = |t: Tensor<f64>| Tensor::from_fn(t.shape(), |i| {
        let v = t.data()[i];
        v.signum() * (0.1 + 0.9 * v.abs())
    });
    let case = |name: &str, inputs: Vec<Tensor<f64>>, f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>| -> Case {
        (name.to_string(), inputs, f)
    };
    let neighbors: Vec<usize> = {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        (0..2 * 6 * 3).map(|_| r.gen_range(0..6)).collect()
    };
    let running = RunningStats {
        mean: vec![0.1, -0.2, 0.3, 0.0],
        var: vec![1.5, 0.5, 2.0, 1.0],
    };
    let cases: Vec<Case> = vec![
        case("add", vec![rand(&[3, 4]), rand(&[3, 4])], Box::new(|t, x| t.add(x[0], x[1]))),
        case("add_broadcast", vec![rand(&[2, 3, 4]), rand(&[3, 4])], Box::new(|t, x| t.add_broadcast(x[0], x[1]))),
        case("mul", vec![rand(&[3, 4]), rand(&[3, 4])], Box::new(|t, x| t.mul(x[0], x[1]))),
        case("scale", vec![rand(&[3, 4])], Box::new(|t, x| Ok(t.scale(x[0], -1.7)))),
        case("sum", vec![rand(&[3, 4])], Box::new(|t, x| Ok(t.sum(x[0])))),
        case("relu", vec![away(rand(&[3, 4]))], Box::new(|t, x| Ok(t.relu(x[0])))),
        case("gelu", vec![rand(&[3, 4])], Box::new(|t, x| Ok(t.gelu(x[0])))),
        case("matmul_shared", vec![rand(&[2, 3, 4]), rand(&[4, 5])], Box::new(|t, x| t.matmul(x[0], x[1]))),
        case("matmul_batched", vec![rand(&[2, 3, 4]), rand(&[2, 4, 5])], Box::new(|t, x| t.matmul(x[0], x[1]))),
        case("matmul_nt", vec![rand(&[2, 3, 4]), rand(&[2, 6, 4])], Box::new(|t, x| t.matmul_nt(x[0], x[1], 0.5))),
        case("linear", vec![rand(&[2, 3, 4]), rand(&[4, 5]), rand(&[5])], Box::new(|t, x| t.linear(x[0], x[1], Some(x[2])))),
        case("reshape", vec![rand(&[2, 3, 4])], Box::new(|t, x| t.reshape(x[0], &[6, 4]))),
        case("permute", vec![rand(&[2, 3, 4])], Box::new(|t, x| t.permute(x[0], &[2, 0, 1]))),
        case("concat", vec![rand(&[2, 3, 4]), rand(&[2, 2, 4])], Box::new(|t, x| t.concat(&[x[0], x[1]], 1))),
        case("slice", vec![rand(&[2, 3, 4])], Box::new(|t, x| t.slice(x[0], 2, 1, 2))),
        case("conv2d_s1p1", vec![rand(&[2, 3, 6, 5]), rand(&[4, 3, 3, 3]), rand(&[4])], Box::new(|t, x| t.conv2d(x[0], x[1], Some(x[2]), 1, 1))),
        case("conv2d_s2p1", vec![rand(&[2, 3, 6, 5]), rand(&[4, 3, 3, 3])], Box::new(|t, x| t.conv2d(x[0], x[1], None, 2, 1))),
        case("conv2d_1x1", vec![rand(&[2, 3, 4, 4]), rand(&[5, 3, 1, 1]), rand(&[5])], Box::new(|t, x| t.conv2d(x[0], x[1], Some(x[2]), 1, 0))),
        case(
            "batchnorm_train",
            vec![rand(&[3, 4, 2, 3]), rand(&[4]), rand(&[4])],
            Box::new(|t, x| t.batchnorm2d(x[0], x[1], x[2], BnMode::Train(&mut RunningStats::new(4)))),
        ),
        case(
            "batchnorm_eval",
            vec![rand(&[3, 4, 2, 3]), rand(&[4]), rand(&[4])],
            Box::new(move |t, x| t.batchnorm2d(x[0], x[1], x[2], BnMode::Eval(&running))),
        ),
        case("layernorm", vec![rand(&[2, 5, 8]), rand(&[8]), rand(&[8])], Box::new(|t, x| t.layernorm(x[0], x[1], x[2]))),
        case("softmax_mid", vec![rand(&[2, 3, 4])], Box::new(|t, x| t.softmax(x[0], 1))),
        case("softmax_last", vec![rand(&[2, 3, 4])], Box::new(|t, x| t.softmax(x[0], 2))),
        case("neighbor_max_diff", vec![rand(&[2, 6, 3])], Box::new(move |t, x| t.neighbor_max_diff(x[0], &neighbors, 3))),
        case("adaptive_avg_pool", vec![rand(&[2, 3, 4, 5])], Box::new(|t, x| t.adaptive_avg_pool(x[0]))),
        case("cross_entropy", vec![rand(&[5, 3])], Box::new(|t, x| t.cross_entropy(x[0], &[0, 2, 1, 1, 0]))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = grad_check_inputs(
                |tape, vars| {
                    let y = f(tape, vars)?;
                    let w = Tensor::from_fn(tape.shape(y), |i| 0.5 + ((i * 7 + 3) % 11) as f64 / 11.0);
                    let w = tape.constant(w);
                    let p = tape.mul(y, w)?;
                    Ok(tape.sum(p))
                },
                &inputs,
                eps,
                CoordSelection::All,
            )?;
            Ok(NamedCheck { name, report })
        })
        .collect()
}
