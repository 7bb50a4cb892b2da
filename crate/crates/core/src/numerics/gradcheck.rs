//! Finite-difference gradient checking.
//!
//! The numeric side is an independent oracle: it only ever evaluates the
//! forward pass at perturbed parameter values, so it cannot share a bug with
//! the backward computation. Central differences with a fixed step; the
//! relative error denominator is floored so exact-zero coordinates do not
//! divide by zero.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Cap on coordinates checked per parameter; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    /// Seed for coordinate subsampling.
    pub seed: u64,
    /// Floor for the relative-error denominator max(|analytic|, |numeric|, floor).
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_param: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub frozen: bool,
    /// Frozen parameters must have no analytic gradient at all.
    pub analytic_absent: bool,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// (coordinate, analytic, numeric) at the worst relative error.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_err: f64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// True when every frozen parameter has zero analytic gradient.
    pub fn frozen_clean(&self) -> bool {
        self.per_param
            .iter()
            .all(|p| !p.frozen || p.analytic_absent)
    }
}

/// Check the analytic gradient of `f` with respect to every parameter in
/// `store`. `f` must be deterministic: it is re-evaluated many times at
/// perturbed parameter values. Frozen parameters are verified to receive no
/// gradient and are excluded from the numeric comparison.
pub fn grad_check<F>(
    store: &mut ParamStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let (loss0, grads) = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.check_finite()?;
        let g = tape.backward(loss)?;
        (tape.value(loss).item()?, g)
    };

    let ids = store.ids();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel = 0.0f64;

    for id in ids {
        let (name, frozen, numel) = {
            let p = store.get(id);
            (p.name.clone(), p.frozen, p.tensor.numel())
        };
        let analytic = grads.param(id);

        if frozen {
            per_param.push(ParamCheck {
                name,
                frozen: true,
                analytic_absent: analytic.is_none(),
                coords_checked: 0,
                max_rel_err: 0.0,
                worst: None,
            });
            continue;
        }

        let coords = pick_coords(numel, opts, id);
        let mut param_max = 0.0f64;
        let mut worst = None;
        for &c in &coords {
            let a = analytic.map_or(0.0, |t| t.data()[c]);
            let n = central_diff(store, &f, id, c, opts.step)?;
            let denom = a.abs().max(n.abs()).max(opts.floor);
            let rel = (a - n).abs() / denom;
            if rel > param_max {
                param_max = rel;
                worst = Some((c, a, n));
            }
        }
        max_rel = max_rel.max(param_max);
        per_param.push(ParamCheck {
            name,
            frozen: false,
            analytic_absent: analytic.is_none(),
            coords_checked: coords.len(),
            max_rel_err: param_max,
            worst,
        });
    }

    Ok(GradCheckReport {
        loss: loss0,
        max_rel_err: max_rel,
        per_param,
    })
}

fn pick_coords(numel: usize, opts: &GradCheckOptions, id: ParamId) -> Vec<usize> {
    match opts.max_coords_per_param {
        Some(k) if k < numel => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((id.index() as u64) << 32));
            let mut all: Vec<usize> = (0..numel).collect();
            all.shuffle(&mut rng);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => (0..numel).collect(),
    }
}

fn central_diff<F>(
    store: &mut ParamStore,
    f: &F,
    id: ParamId,
    coord: usize,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let original = store.get(id).tensor.data()[coord];

    store.get_mut(id).tensor.data_mut()[coord] = original + h;
    let plus = eval_loss(store, f);

    store.get_mut(id).tensor.data_mut()[coord] = original - h;
    let minus = eval_loss(store, f);

    store.get_mut(id).tensor.data_mut()[coord] = original;

    Ok((plus? - minus?) / (2.0 * h))
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.check_finite()?;
    tape.value(loss).item()
}

pub type LossFn = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var> + Send + Sync>;

type BuildFn = Box<dyn Fn(&mut Tape, &[Var], &ParamStore) -> Result<Var> + Send + Sync>;

/// One differentiable-op scenario for the gradient suite: a parameter store
/// with random contents and a scalar loss exercising the op. Losses are
/// weighted by fixed random constants so no coordinate has a degenerate
/// (identically cancelling) gradient.
pub struct OpCase {
    pub name: &'static str,
    /// Elementwise ops are held to a tighter error bound.
    pub elementwise: bool,
    pub store: ParamStore,
    pub loss: LossFn,
}

/// Every differentiable tape op, each as a small randomized scenario.
/// Deterministic in `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use crate::numerics::{normal_tensor, Tensor};

    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));

    // Weighted mean: mean_all(x * w) with w a constant, breaking symmetry.
    fn wmean(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
        let wv = tape.constant(w.clone());
        let prod = tape.mul(x, wv)?;
        Ok(tape.mean_all(prod))
    }

    let case = |name: &'static str,
                elementwise: bool,
                shapes: &[&[usize]],
                rng: &mut ChaCha8Rng,
                build: BuildFn| {
        let mut store = ParamStore::new();
        let mut ids = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            let t = normal_tensor(rng, s, 0.8);
            ids.push(store.add(&format!("p{i}"), t).expect("unique name"));
        }
        let loss: LossFn = Box::new(move |tape, store| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            build(tape, &vars, store)
        });
        OpCase {
            name,
            elementwise,
            store,
            loss,
        }
    };

    let w34 = normal_tensor(&mut rng, &[3, 4], 1.0);
    {
        let w = w34.clone();
        cases.push(case(
            "add",
            true,
            &[&[3, 4], &[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.add(v[0], v[1])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = w34.clone();
        cases.push(case(
            "sub",
            true,
            &[&[3, 4], &[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.sub(v[0], v[1])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = w34.clone();
        cases.push(case(
            "mul",
            true,
            &[&[3, 4], &[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.mul(v[0], v[1])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = w34.clone();
        cases.push(case(
            "scale",
            true,
            &[&[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.scale(v[0], -1.7);
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = w34.clone();
        cases.push(case(
            "gelu",
            true,
            &[&[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.gelu(v[0]);
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = w34.clone();
        cases.push(case(
            "add_row_vec",
            false,
            &[&[3, 4], &[4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.add_row_vec(v[0], v[1])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = w34.clone();
        cases.push(case(
            "mul_row_vec",
            false,
            &[&[3, 4], &[4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.mul_row_vec(v[0], v[1])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[3, 2], 1.0);
        cases.push(case(
            "matmul",
            false,
            &[&[3, 4], &[4, 2]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.matmul(v[0], v[1])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[4, 3], 1.0);
        cases.push(case(
            "transpose",
            false,
            &[&[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.transpose(v[0])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = w34.clone();
        cases.push(case(
            "softmax_rows",
            false,
            &[&[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.softmax_rows(v[0])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[3], 1.0);
        cases.push(case(
            "logsumexp_rows",
            false,
            &[&[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.logsumexp_rows(v[0])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[4], 1.0);
        cases.push(case(
            "take_diag",
            false,
            &[&[4, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.take_diag(v[0])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        cases.push(case(
            "mean_all",
            false,
            &[&[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.gelu(v[0]);
                Ok(t.mean_all(y))
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[5, 3], 1.0);
        cases.push(case(
            "instance_norm_cols",
            false,
            &[&[5, 3]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.instance_norm_cols(v[0], 1e-5)?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[3, 5], 1.0);
        cases.push(case(
            "layer_norm_rows",
            false,
            &[&[3, 5]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.layer_norm_rows(v[0], 1e-5)?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[4, 2], 1.0);
        cases.push(case(
            "conv1d_stride2",
            false,
            &[&[9, 3], &[2, 3, 2]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.conv1d(v[0], v[1], 2)?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[3, 2], 1.0);
        cases.push(case(
            "conv1d_stride3",
            false,
            &[&[9, 3], &[3, 3, 2]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.conv1d(v[0], v[1], 3)?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        // Repeated ids exercise gradient accumulation in the scatter.
        let w = normal_tensor(&mut rng, &[4, 3], 1.0);
        cases.push(case(
            "gather_rows",
            false,
            &[&[6, 3]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.gather_rows(v[0], &[0, 2, 2, 5])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[3, 2], 1.0);
        cases.push(case(
            "slice_cols",
            false,
            &[&[3, 5]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.slice_cols(v[0], 1, 2)?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[3, 6], 1.0);
        cases.push(case(
            "concat_cols",
            false,
            &[&[3, 2], &[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[5, 3], 1.0);
        cases.push(case(
            "concat_rows",
            false,
            &[&[2, 3], &[3, 3]],
            &mut rng,
            Box::new(move |t, v, _| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        let w = normal_tensor(&mut rng, &[2, 4], 1.0);
        cases.push(case(
            "take_row_stack_rows",
            false,
            &[&[3, 4]],
            &mut rng,
            Box::new(move |t, v, _| {
                let r2 = t.take_row(v[0], 2)?;
                let r0 = t.take_row(v[0], 0)?;
                let y = t.stack_rows(&[r2, r0])?;
                wmean(t, y, &w)
            }),
        ));
    }
    {
        // Parameter feeding two paths exercises gradient accumulation at a leaf.
        let w = normal_tensor(&mut rng, &[3, 3], 1.0);
        cases.push(case(
            "shared_input",
            false,
            &[&[3, 3]],
            &mut rng,
            Box::new(move |t, v, _| {
                let tr = t.transpose(v[0])?;
                let prod = t.matmul(v[0], tr)?;
                let sum = t.add(prod, v[0])?;
                wmean(t, sum, &w)
            }),
        ));
    }
    {
        // Small MLP end to end: matmul, bias, gelu, layer norm, affine.
        let w = normal_tensor(&mut rng, &[4, 2], 1.0);
        cases.push(case(
            "composite_mlp",
            false,
            &[&[4, 3], &[3, 5], &[5], &[5, 2], &[2], &[2]],
            &mut rng,
            Box::new(move |t, v, _| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_row_vec(h, v[2])?;
                let h = t.gelu(h);
                let h = t.matmul(h, v[3])?;
                let h = t.layer_norm_rows(h, 1e-5)?;
                let h = t.mul_row_vec(h, v[4])?;
                let h = t.add_row_vec(h, v[5])?;
                wmean(t, h, &w)
            }),
        ));
    }

    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normal_tensor, Tensor};

    #[test]
    fn op_suite_gradients_match_finite_differences() {
        for seed in 0..3u64 {
            for mut case in op_cases(seed) {
                let report = grad_check(
                    &mut case.store,
                    case.loss.as_ref(),
                    &GradCheckOptions::default(),
                )
                .unwrap_or_else(|e| panic!("{} failed: {e}", case.name));
                let bound = if case.elementwise { 1e-6 } else { 1e-4 };
                assert!(
                    report.max_rel_err < bound,
                    "{} seed {seed}: rel err {} over bound {bound}",
                    case.name,
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn frozen_parameter_receives_no_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let a = store.add("a", normal_tensor(&mut rng, &[3, 3], 1.0)).unwrap();
        let b = store.add("b", normal_tensor(&mut rng, &[3, 3], 1.0)).unwrap();
        store.get_mut(b).frozen = true;

        let report = grad_check(
            &mut store,
            move |tape, store| {
                let va = tape.param(store, a);
                let vb = tape.param(store, b);
                let prod = tape.mul(va, vb)?;
                Ok(tape.mean_all(prod))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();

        assert!(report.frozen_clean());
        assert!(report.max_rel_err < 1e-6);
        let frozen_entry = report.per_param.iter().find(|p| p.name == "b").unwrap();
        assert!(frozen_entry.frozen && frozen_entry.analytic_absent);
        assert_eq!(frozen_entry.coords_checked, 0);
    }

    #[test]
    fn subsampling_checks_requested_coordinate_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store
            .add("a", normal_tensor(&mut rng, &[10, 10], 1.0))
            .unwrap();
        let w = normal_tensor(&mut rng, &[10, 10], 1.0);
        let opts = GradCheckOptions {
            max_coords_per_param: Some(7),
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            &mut store,
            move |tape, store| {
                let va = tape.param(store, a);
                let wv = tape.constant(w.clone());
                let prod = tape.mul(va, wv)?;
                Ok(tape.mean_all(prod))
            },
            &opts,
        )
        .unwrap();
        assert_eq!(report.per_param[0].coords_checked, 7);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn non_finite_forward_is_reported_with_op_name() {
        let mut store = ParamStore::new();
        let a = store
            .add("a", Tensor::matrix(1, 2, vec![1e308, 1e308]).unwrap())
            .unwrap();
        let err = grad_check(
            &mut store,
            move |tape, store| {
                let va = tape.param(store, a);
                let doubled = tape.add(va, va)?;
                Ok(tape.mean_all(doubled))
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "unexpected message: {msg}");
    }
}

