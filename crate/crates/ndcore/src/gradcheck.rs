//! Central finite-difference gradient checking.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::graph::{BatchNormStats, Graph, Mode, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of a scalar function against central
/// differences, for every element of every input and every parameter.
///
/// `f` must rebuild the whole computation on the graph it is given and be
/// deterministic; it is called once for the analytic pass and twice per
/// checked element.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mut f: F,
) -> Result<GradCheck>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    let grads = g.backward(loss, store)?;

    let mut eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, store, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + FD_STEP;
            let plus = eval(store, &work)?;
            work[k].data_mut()[j] = orig - FD_STEP;
            let minus = eval(store, &work)?;
            work[k].data_mut()[j] = orig;
            worst = worst.max(rel_error(a, (plus - minus) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    for pid in 0..store.len() {
        let id = ParamId(pid);
        let analytic = store.get(id).grad.data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let plus = eval(store, inputs)?;
            store.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let minus = eval(store, inputs)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            worst = worst.max(rel_error(a, (plus - minus) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    if !worst.is_finite() {
        worst = f64::INFINITY;
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

/// One line of the layer suite report.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub layer: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(SuiteEntry::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Default tolerance for every layer except batch norm.
pub const LAYER_TOL: f64 = 1e-4;
pub const BATCH_NORM_TOL: f64 = 1e-3;
pub const LINEAR_TOL: f64 = 1e-6;

fn random_tensor(rng: &mut StdRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Values spread at least `gap` apart, so no max-pool window has a tie and
/// no leaky-relu input sits within `gap / 2` of the kink.
fn tie_free_tensor(rng: &mut StdRng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks
        .into_iter()
        .map(|r| (r as f64 - n as f64 / 2.0 + 0.25) * gap)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Runs the finite-difference check over every layer type the adaptation
/// network uses, plus a two-block miniature feature extractor.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut entries = Vec::new();

    // conv2d, both stride 1 with padding and stride 2 without.
    {
        let mut worst = GradCheck {
            max_rel_error: 0.0,
            checked: 0,
        };
        for (stride, pad) in [(1, 1), (2, 0)] {
            let mut store = ParamStore::new();
            let w = store.add("w", random_tensor(&mut rng, &[3, 2, 3, 3], 0.5));
            let b = store.add("b", random_tensor(&mut rng, &[3], 0.5));
            let x = random_tensor(&mut rng, &[1, 2, 5, 5], 1.0);
            let oh = (5 + 2 * pad - 3) / stride + 1;
            let proj = random_tensor(&mut rng, &[3 * oh * oh], 1.0).into_data();
            let r = check_gradients(&mut store, &[x], |g, s, v| {
                let (wv, bv) = (g.param(s, w), g.param(s, b));
                let y = g.conv2d(v[0], wv, bv, stride, pad)?;
                g.dot_const(y, &proj)
            })?;
            worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
            worst.checked += r.checked;
        }
        entries.push(entry("conv2d", worst, LAYER_TOL));
    }

    {
        let mut store = ParamStore::new();
        let x = tie_free_tensor(&mut rng, &[2, 2, 4, 5], 0.05);
        let proj = random_tensor(&mut rng, &[2 * 2 * 2 * 3], 1.0).into_data();
        let r = check_gradients(&mut store, &[x], |g, _, v| {
            let y = g.maxpool2(v[0])?;
            g.dot_const(y, &proj)
        })?;
        entries.push(entry("maxpool2", r, LAYER_TOL));
    }

    {
        let mut store = ParamStore::new();
        let x = tie_free_tensor(&mut rng, &[3, 7], 0.1);
        let proj = random_tensor(&mut rng, &[21], 1.0).into_data();
        let r = check_gradients(&mut store, &[x], |g, _, v| {
            let y = g.leaky_relu(v[0], 0.1);
            g.dot_const(y, &proj)
        })?;
        entries.push(entry("leaky_relu", r, LAYER_TOL));
    }

    // Batch norm on a feature matrix and on a spatial map.
    {
        let mut worst = GradCheck {
            max_rel_error: 0.0,
            checked: 0,
        };
        for shape in [vec![8, 4], vec![4, 2, 3, 3]] {
            let chans = shape[1];
            let mut store = ParamStore::new();
            let gamma = store.add(
                "gamma",
                random_tensor(&mut rng, &[chans], 1.0).map(|v| v + 1.5),
            );
            let beta = store.add("beta", random_tensor(&mut rng, &[chans], 0.5));
            let x = random_tensor(&mut rng, &shape, 2.0);
            let proj = random_tensor(&mut rng, &[x.len()], 1.0).into_data();
            let r = check_gradients(&mut store, &[x], |g, s, v| {
                let mut stats = BatchNormStats::new(chans);
                let (gv, bv) = (g.param(s, gamma), g.param(s, beta));
                let y = g.batch_norm(v[0], gv, bv, &mut stats, Mode::Train)?;
                g.dot_const(y, &proj)
            })?;
            worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
            worst.checked += r.checked;
        }
        entries.push(entry("batch_norm", worst, BATCH_NORM_TOL));
    }

    {
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&mut rng, &[5, 3], 0.5));
        let b = store.add("b", random_tensor(&mut rng, &[3], 0.5));
        let x = random_tensor(&mut rng, &[4, 5], 1.0);
        let proj = random_tensor(&mut rng, &[12], 1.0).into_data();
        let r = check_gradients(&mut store, &[x], |g, s, v| {
            let (wv, bv) = (g.param(s, w), g.param(s, b));
            let y = g.linear(v[0], wv, bv)?;
            g.dot_const(y, &proj)
        })?;
        entries.push(entry("fully_connected", r, LINEAR_TOL));
    }

    {
        let mut store = ParamStore::new();
        let x = random_tensor(&mut rng, &[4, 5], 2.0);
        let labels = [0, 4, 2, 2];
        let r = check_gradients(&mut store, &[x], |g, _, v| {
            let p = g.softmax(v[0])?;
            g.cross_entropy(p, &labels)
        })?;
        entries.push(entry("softmax+cross_entropy", r, LAYER_TOL));
    }

    {
        let mut store = ParamStore::new();
        let x = random_tensor(&mut rng, &[6, 1], 2.0);
        let targets = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let weights: Vec<f64> = (0..6).map(|_| rng.gen_range(1.0..2.0)).collect();
        let r = check_gradients(&mut store, &[x], |g, _, v| {
            let p = g.sigmoid(v[0]);
            g.binary_cross_entropy(p, &targets, Some(&weights))
        })?;
        entries.push(entry("sigmoid+binary_cross_entropy", r, LAYER_TOL));
    }

    {
        let mut store = ParamStore::new();
        let x = random_tensor(&mut rng, &[3, 6], 2.0);
        let r = check_gradients(&mut store, &[x], |g, _, v| {
            let p = g.softmax(v[0])?;
            g.mean_entropy(p)
        })?;
        entries.push(entry("softmax+entropy", r, LAYER_TOL));
    }

    entries.push(grad_reverse_entry(&mut rng)?);
    entries.push(mini_extractor_entry(&mut rng)?);

    Ok(SuiteReport {
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn entry(layer: &'static str, r: GradCheck, tolerance: f64) -> SuiteEntry {
    SuiteEntry {
        layer,
        max_rel_error: r.max_rel_error,
        tolerance,
        checked: r.checked,
    }
}

/// `linear -> grad_reverse -> linear -> sigmoid -> bce`. Parameters behind
/// the reversal must receive exactly `-lambda` times the plain gradient;
/// parameters in front of it are checked against finite differences.
fn grad_reverse_entry(rng: &mut StdRng) -> Result<SuiteEntry> {
    let lambda = 0.7;
    let mut store = ParamStore::new();
    let w1 = store.add("w1", random_tensor(rng, &[4, 3], 0.7));
    let b1 = store.add("b1", random_tensor(rng, &[3], 0.3));
    let w2 = store.add("w2", random_tensor(rng, &[3, 1], 0.7));
    let b2 = store.add("b2", random_tensor(rng, &[1], 0.3));
    let x = random_tensor(rng, &[4, 4], 1.0);
    let targets = [1.0, 1.0, 0.0, 0.0];

    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: Var, reverse: bool| -> Result<Var> {
        let (a, b) = (g.param(s, w1), g.param(s, b1));
        let h = g.linear(x, a, b)?;
        let h = if reverse {
            g.grad_reverse(h, lambda)?
        } else {
            h
        };
        let (c, d) = (g.param(s, w2), g.param(s, b2));
        let o = g.linear(h, c, d)?;
        let p = g.sigmoid(o);
        g.binary_cross_entropy(p, &targets, None)
    };

    let grads_of = |store: &mut ParamStore<f64>, reverse: bool| -> Result<Vec<Vec<f64>>> {
        store.zero_grad();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let loss = build(&mut g, store, xv, reverse)?;
        g.backward(loss, store)?;
        Ok(store.iter().map(|p| p.grad.data().to_vec()).collect())
    };
    let plain = grads_of(&mut store, false)?;
    let reversed = grads_of(&mut store, true)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, (pg, rg)) in plain.iter().zip(&reversed).enumerate() {
        for (&a, &b) in pg.iter().zip(rg) {
            let expected = if k < 2 { -lambda * a } else { a };
            worst = worst.max(rel_error(b, expected));
            checked += 1;
        }
    }
    // The post-reversal half against finite differences.
    let fd = check_gradients(&mut store, std::slice::from_ref(&x), |g, s, v| {
        build(g, s, v[0], false)
    })?;
    worst = worst.max(fd.max_rel_error);
    checked += fd.checked;
    Ok(SuiteEntry {
        layer: "grad_reverse composition",
        max_rel_error: worst,
        tolerance: LAYER_TOL,
        checked,
    })
}

/// Two conv blocks (conv, leaky-relu, conv, leaky-relu, pool, batch norm)
/// followed by a fully connected layer and softmax cross-entropy.
fn mini_extractor_entry(rng: &mut StdRng) -> Result<SuiteEntry> {
    let mut store = ParamStore::new();
    let chans = [3usize, 3, 4];
    let mut blocks = Vec::new();
    for blk in 0..2 {
        let (cin, cout) = (chans[blk], chans[blk + 1]);
        let c1w = store.add("c1w", random_tensor(rng, &[cout, cin, 3, 3], 0.5));
        let c1b = store.add("c1b", random_tensor(rng, &[cout], 0.2));
        let c2w = store.add("c2w", random_tensor(rng, &[cout, cout, 3, 3], 0.5));
        let c2b = store.add("c2b", random_tensor(rng, &[cout], 0.2));
        let gamma = store.add("gamma", random_tensor(rng, &[cout], 0.3).map(|v| v + 1.0));
        let beta = store.add("beta", random_tensor(rng, &[cout], 0.3));
        blocks.push([c1w, c1b, c2w, c2b, gamma, beta]);
    }
    let fw = store.add("fw", random_tensor(rng, &[4 * 2 * 2, 5], 0.5));
    let fb = store.add("fb", random_tensor(rng, &[5], 0.2));
    let x = random_tensor(rng, &[3, 3, 8, 8], 1.0);
    let labels = [1, 3, 4];
    let r = check_gradients(&mut store, &[x], |g, s, v| {
        let mut h = v[0];
        for (blk, ids) in blocks.iter().enumerate() {
            let mut stats = BatchNormStats::new(chans[blk + 1]);
            let (a, b) = (g.param(s, ids[0]), g.param(s, ids[1]));
            h = g.conv2d(h, a, b, 1, 1)?;
            h = g.leaky_relu(h, 0.1);
            let (a, b) = (g.param(s, ids[2]), g.param(s, ids[3]));
            h = g.conv2d(h, a, b, 1, 1)?;
            h = g.leaky_relu(h, 0.1);
            h = g.maxpool2(h)?;
            let (a, b) = (g.param(s, ids[4]), g.param(s, ids[5]));
            h = g.batch_norm(h, a, b, &mut stats, Mode::Train)?;
        }
        let h = g.flatten(h)?;
        let (a, b) = (g.param(s, fw), g.param(s, fb));
        let o = g.linear(h, a, b)?;
        let p = g.softmax(o)?;
        g.cross_entropy(p, &labels)
    })?;
    Ok(entry("mini feature extractor", r, LAYER_TOL))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_gradient_is_tight() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&mut rng, &[3, 2], 1.0));
        let b = store.add("b", random_tensor(&mut rng, &[2], 1.0));
        let x = random_tensor(&mut rng, &[2, 3], 1.0);
        let r = check_gradients(&mut store, &[x], |g, s, v| {
            let (wv, bv) = (g.param(s, w), g.param(s, b));
            let y = g.linear(v[0], wv, bv)?;
            g.dot_const(y, &[0.3, -1.2, 0.8, 2.0])
        })
        .unwrap();
        assert_eq!(r.checked, 6 + 6 + 2);
        assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Backward of scale_rows uses the constant scale, so hiding a
        // dependency inside the closure makes analytic and numeric disagree.
        let mut store = ParamStore::new();
        let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let r = check_gradients(&mut store, &[x], |g, _, v| {
            let s: Vec<f64> = g.value(v[0]).data().to_vec();
            let y = g.scale_rows(v[0], &s)?;
            g.dot_const(y, &[1.0, 1.0])
        })
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn suite_passes_every_layer() {
        let report = run_suite(7).unwrap();
        for e in &report.entries {
            assert!(
                e.passed(),
                "{} failed: {:e} > {:e}",
                e.layer,
                e.max_rel_error,
                e.tolerance
            );
            assert!(e.checked > 0);
        }
        assert_eq!(report.entries.len(), 10);
    }
}
