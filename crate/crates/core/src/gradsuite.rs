//! The finite-difference gradient suite: every differentiable op, layer,
//! attention block and loss, plus a tiny end-to-end classifier, checked at
//! float64 over a range of random seeds.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    apply_spatial_channel, channel_attention, multi_head_attention, soft_additive_attention, spatial_attention,
    HeadWeights,
};
use crate::error::Result;
use crate::layers::{
    avgpool3d, batchnorm, concat_channels, conv3d, conv_transpose3d, fully_connected, global_avg_pool3d, maxpool3d,
    relu,
};
use crate::models::{Hybrid, HybridConfig};
use crate::params::{Ctx, Mode, ParamStore};
use crate::seed::derive_seed;
use crate::train::{bce_loss, categorical_ce, one_hot, softmax_cross_entropy};
use crate::volcore::{
    check_gradients, check_gradients_sampled, concat, GradCheckReport, Reduce, Tape, Tensor, Var, DEFAULT_STEP,
};

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

/// Elements probed per input tensor in the end-to-end classifier check.
const MODEL_SAMPLES: usize = 24;

type CheckFn = Box<dyn Fn(u64) -> Result<GradCheckReport>>;

pub struct GradCase {
    pub module: &'static str,
    pub name: &'static str,
    check: CheckFn,
}

impl GradCase {
    pub fn check(&self, seed: u64) -> Result<GradCheckReport> {
        (self.check)(seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCaseResult {
    pub module: &'static str,
    pub name: &'static str,
    pub seeds: u64,
    /// Gradient entries compared, summed over seeds.
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
}

impl GradCaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn op<F>(module: &'static str, name: &'static str, shapes: &[&[usize]], f: F) -> GradCase
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
{
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    GradCase {
        module,
        name,
        check: Box::new(move |seed| {
            let inputs: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| uniform(s, derive_seed(&[seed, i as u64])))
                .collect();
            check_gradients(&inputs, seed, &f)
        }),
    }
}

/// Random one-hot rows `[n, classes]`, fixed by `seed`.
fn labels(n: usize, classes: usize, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    one_hot(&picks, classes)
}

fn loss_case<F>(name: &'static str, shape: [usize; 2], f: F) -> GradCase
where
    F: for<'t> Fn(Var<'t, f64>, &Tensor<f64>) -> Result<Var<'t, f64>> + 'static,
{
    GradCase {
        module: "train",
        name,
        check: Box::new(move |seed| {
            let x = uniform(&shape, derive_seed(&[seed, 0]));
            let y = labels(shape[0], shape[1], derive_seed(&[seed, 1]))?;
            check_gradients(&[x], seed, |_, v| f(v[0], &y))
        }),
    }
}

fn hybrid_case() -> GradCase {
    GradCase {
        module: "models",
        name: "hybrid_tiny",
        check: Box::new(|seed| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 7]));
            let net = Hybrid::new(&mut store, HybridConfig::tiny(), &mut rng)?;
            let [c, d, h, w] = net.config.input;
            let mut inputs = vec![uniform(&[2, c, d, h, w], derive_seed(&[seed, 8]))];
            inputs.extend(store.entries().iter().map(|e| e.value.clone()));
            check_gradients_sampled(&inputs, seed, DEFAULT_STEP, MODEL_SAMPLES, |tape, vars| {
                let ctx = Ctx::from_vars(tape, &store, vars[1..].to_vec(), Mode::Train)?;
                Ok(net.forward(&ctx, vars[0])?.probs)
            })
        }),
    }
}

/// Every case in the suite, in a fixed order.
pub fn cases() -> Vec<GradCase> {
    let rm = Tensor::from_f64([2], &[0.1, -0.2]).expect("static shape");
    let rv = Tensor::from_f64([2], &[0.5, 1.5]).expect("static shape");
    let (rm2, rv2) = (rm.clone(), rv.clone());
    vec![
        op("volcore", "add", &[&[3, 2], &[3, 2]], |_, v| v[0].add(v[1])),
        op("volcore", "sub", &[&[3, 2], &[3, 2]], |_, v| v[0].sub(v[1])),
        op("volcore", "mul", &[&[3, 2], &[3, 2]], |_, v| v[0].mul(v[1])),
        op("volcore", "scale_shift_neg", &[&[4]], |_, v| v[0].scale(-1.7)?.add_scalar(0.3)?.neg()),
        op("volcore", "exp_log", &[&[5]], |_, v| v[0].exp()?.add_scalar(0.1)?.log()),
        op("volcore", "sigmoid", &[&[6]], |_, v| v[0].scale(4.0)?.sigmoid()),
        op("volcore", "relu", &[&[6]], |_, v| v[0].relu()),
        op("volcore", "square_mean", &[&[6]], |_, v| v[0].square()?.mean()),
        op("volcore", "sum", &[&[2, 3]], |_, v| v[0].square()?.sum()),
        op("volcore", "matmul", &[&[3, 4], &[4, 2]], |_, v| v[0].matmul(v[1])),
        op("volcore", "transpose_reshape", &[&[3, 4]], |_, v| v[0].transpose()?.reshape([2, 6])),
        op("volcore", "softmax_rows", &[&[3, 4]], |_, v| v[0].scale(3.0)?.softmax(1)),
        op("volcore", "softmax_cols", &[&[3, 4]], |_, v| v[0].scale(3.0)?.softmax(0)),
        op("volcore", "reduce_mean", &[&[2, 3, 4]], |_, v| v[0].reduce(1, Reduce::Mean)),
        op("volcore", "reduce_max", &[&[2, 3, 4]], |_, v| v[0].reduce(2, Reduce::Max)),
        op("volcore", "channel_bias", &[&[2, 3, 4], &[3]], |_, v| v[0].add_channel_bias(v[1])),
        op("volcore", "scale_channels", &[&[2, 3, 4], &[2, 3]], |_, v| v[0].scale_channels(v[1])),
        op("volcore", "gate_voxels", &[&[2, 3, 4], &[2, 1, 4]], |_, v| v[0].gate_voxels(v[1])),
        op("volcore", "concat_narrow", &[&[2, 2, 3], &[2, 1, 3]], |_, v| {
            concat(&[v[0], v[1], v[0]], 1)?.narrow(1, 1, 3)
        }),
        op("layers", "conv3d_k3_p1", &[&[2, 2, 3, 3, 3], &[2, 2, 3, 3, 3], &[2]], |_, v| {
            conv3d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        op("layers", "conv3d_k2_s2", &[&[1, 2, 4, 4, 2], &[3, 2, 2, 2, 2]], |_, v| {
            conv3d(v[0], v[1], None, 2, 0)
        }),
        op("layers", "conv_transpose3d_k2_s2", &[&[2, 2, 2, 2, 2], &[2, 3, 2, 2, 2], &[3]], |_, v| {
            conv_transpose3d(v[0], v[1], Some(v[2]), 2, 0)
        }),
        op("layers", "conv_transpose3d_k3_p1", &[&[1, 2, 3, 2, 2], &[2, 1, 3, 3, 3]], |_, v| {
            conv_transpose3d(v[0], v[1], None, 1, 1)
        }),
        op("layers", "maxpool3d", &[&[2, 2, 4, 2, 2]], |_, v| maxpool3d(v[0], 2, 2)),
        op("layers", "avgpool3d", &[&[2, 2, 4, 2, 2]], |_, v| avgpool3d(v[0], 2, 2)),
        // squared so the loss is not invariant to the normalization
        op("layers", "batchnorm_train", &[&[3, 2, 2, 2, 1], &[2], &[2]], move |_, v| {
            batchnorm(v[0], v[1], v[2], &rm, &rv, 1e-5, Mode::Train)?.0.square()
        }),
        op("layers", "batchnorm_eval", &[&[3, 2, 2, 2, 1], &[2], &[2]], move |_, v| {
            batchnorm(v[0], v[1], v[2], &rm2, &rv2, 1e-5, Mode::Eval)?.0.square()
        }),
        op("layers", "relu", &[&[2, 3, 2, 2, 2]], |_, v| relu(v[0])),
        op("layers", "global_avg_pool3d", &[&[2, 3, 2, 2, 2]], |_, v| global_avg_pool3d(v[0])),
        op("layers", "concat_channels", &[&[1, 2, 2, 1, 2], &[1, 1, 2, 1, 2]], |_, v| {
            concat_channels(&[v[0], v[1]])
        }),
        op("layers", "fully_connected", &[&[2, 4], &[3, 4], &[3]], |_, v| fully_connected(v[0], v[1], v[2])),
        op("attention", "soft_additive", &[&[2, 3, 2, 2, 2], &[1, 3, 1, 1, 1], &[1]], |_, v| {
            Ok(soft_additive_attention(v[0], v[1], Some(v[2]))?.0)
        }),
        op("attention", "spatial", &[&[1, 2, 3, 3, 2], &[1, 1, 3, 3, 3], &[1]], |_, v| {
            spatial_attention(v[0], v[1], Some(v[2]))
        }),
        op("attention", "channel", &[&[2, 4, 2, 2, 1], &[2, 4], &[2], &[4, 2], &[4]], |_, v| {
            channel_attention(v[0], [v[1], v[2]], [v[3], v[4]])
        }),
        op("attention", "apply_spatial_channel", &[&[1, 2, 2, 2, 2], &[1, 1, 2, 2, 2], &[1, 2]], |_, v| {
            apply_spatial_channel(v[0], v[1], v[2])
        }),
        op(
            "attention",
            "multi_head",
            &[&[3, 4], &[4, 2], &[4, 2], &[4, 2], &[4, 2], &[4, 2], &[4, 2], &[4, 4]],
            |_, v| {
                let heads = [
                    HeadWeights { w_q: v[1], w_k: v[2], w_v: v[3] },
                    HeadWeights { w_q: v[4], w_k: v[5], w_v: v[6] },
                ];
                Ok(multi_head_attention(v[0], &heads, v[7])?.output)
            },
        ),
        loss_case("bce", [3, 2], |x, y| bce_loss(x.sigmoid()?, y)),
        loss_case("categorical_ce", [3, 2], |x, y| categorical_ce(x.scale(2.0)?.softmax(1)?, y)),
        loss_case("softmax_cross_entropy", [4, 3], |x, y| softmax_cross_entropy(x.scale(2.0)?, y)),
        hybrid_case(),
    ]
}

/// Checks one case at seeds `0..seeds`, keeping the worst error.
pub fn run_case(case: &GradCase, seeds: u64) -> Result<GradCaseResult> {
    let mut result = GradCaseResult {
        module: case.module,
        name: case.name,
        seeds,
        checked: 0,
        max_rel_err: 0.0,
        worst_seed: 0,
    };
    for seed in 0..seeds {
        let report = case.check(seed)?;
        result.checked += report.checked;
        if report.max_rel_err > result.max_rel_err || report.max_rel_err.is_nan() {
            result.max_rel_err = report.max_rel_err;
            result.worst_seed = seed;
        }
    }
    Ok(result)
}

/// Runs every case whose `module/name` contains `filter`.
pub fn run(seeds: u64, filter: Option<&str>) -> Result<Vec<GradCaseResult>> {
    cases()
        .iter()
        .filter(|c| filter.is_none_or(|f| format!("{}/{}", c.module, c.name).contains(f)))
        .map(|c| run_case(c, seeds))
        .collect()
}

pub fn to_csv(results: &[GradCaseResult]) -> String {
    let mut out = String::from("module,op,seeds,checked,max_rel_err,passed\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{}",
            r.module,
            r.name,
            r.seeds,
            r.checked,
            r.max_rel_err,
            r.passed()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let cases = cases();
        let mut names: Vec<_> = cases.iter().map(|c| (c.module, c.name)).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), cases.len());
    }

    #[test]
    fn covers_every_module() {
        let cases = cases();
        for module in ["volcore", "layers", "attention", "train", "models"] {
            assert!(cases.iter().any(|c| c.module == module), "{module}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // relu's derivative swapped for the identity's: the check must notice
        let bad = op("test", "bad", &[&[8]], |t, v| {
            let x = v[0];
            let truth = x.relu()?.value();
            // `x + stop(relu(x) - x)` has relu's value but slope 1 everywhere
            let offset = t.constant(Tensor::new(x.shape(), truth.data().iter().zip(x.value().data()).map(|(r, a)| r - a).collect())?);
            x.add(offset)
        });
        let r = run_case(&bad, 3).unwrap();
        assert!(!r.passed(), "{r:?}");
    }

    #[test]
    fn csv_has_one_row_per_result() {
        let results = run(1, Some("volcore/add")).unwrap();
        assert_eq!(results.len(), 1);
        let csv = to_csv(&results);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("volcore,add,1,"));
    }
}
