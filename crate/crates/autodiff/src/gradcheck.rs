//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per parameter (sampled); `None`
    /// checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Lower bound on the error denominator, so parameters whose true
    /// gradient vanishes are judged by absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords: None,
            seed: 0,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-parameter relative error.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub per_param: Vec<(String, f64)>,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` must rebuild the whole computation from the given parameters and
/// return the tape together with its scalar loss. For each parameter the
/// error is `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, floor)`
/// over the checked coordinates.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    let (mut tape, loss) = f(store)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.param_grads(store);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let (tape, loss) = f(s)?;
        tape.value(loss)
            .item()
            .ok_or_else(|| AutodiffError::NonScalarLoss(tape.value(loss).shape().to_vec()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut per_param = Vec::new();
    for (id, name, value) in store.iter() {
        let n = value.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &j in &coords {
            let orig = value.data()[j];
            work.get_mut(id).data_mut()[j] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[id.index()].data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(opts.floor);
        let err = diff2.sqrt() / denom;
        per_param.push((name.to_string(), err));
    }

    let worst = per_param
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned();
    Ok(GradCheckReport {
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.1),
        worst_param: worst.map(|w| w.0),
        per_param,
    })
}

/// Checks every differentiable tape op on random inputs with random
/// dimensions in `1..=max_dim`, returning `(op, relative error)` pairs.
///
/// Each op output `y` is reduced as `sum(y * r)` with a fixed random `r` so
/// that every output coordinate contributes a distinct weight.
pub fn op_gradient_suite(seed: u64, max_dim: usize) -> Result<Vec<(&'static str, f64)>> {
    use std::sync::Arc;

    use rand::Rng;

    use crate::tensor::Tensor;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_dim = max_dim.max(1);
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..=max_dim);
    let rand_t = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    };
    // Values bounded away from zero so leaky-ReLU kinks are never straddled.
    let away_from_zero = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m: f64 = rng.random_range(0.1..1.5);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };

    type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();

    let (n, k, m) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    cases.push((
        "matmul",
        vec![rand_t(&mut rng, &[n, k], -1.0, 1.0), rand_t(&mut rng, &[k, m], -1.0, 1.0)],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    ));
    cases.push((
        "add_bias",
        vec![rand_t(&mut rng, &[n, m], -1.0, 1.0), rand_t(&mut rng, &[m], -1.0, 1.0)],
        Box::new(|t, v| t.add_bias(v[0], v[1])),
    ));
    for (name, f) in [
        ("add", Tape::<f64>::add as fn(&mut Tape<f64>, Var, Var) -> Result<Var>),
        ("sub", Tape::<f64>::sub),
        ("mul", Tape::<f64>::mul),
    ] {
        cases.push((
            name,
            vec![rand_t(&mut rng, &[n, m], -1.0, 1.0), rand_t(&mut rng, &[n, m], -1.0, 1.0)],
            Box::new(move |t, v| f(t, v[0], v[1])),
        ));
    }
    let w2 = dim(&mut rng);
    cases.push((
        "concat_cols",
        vec![rand_t(&mut rng, &[n, m], -1.0, 1.0), rand_t(&mut rng, &[n, w2], -1.0, 1.0)],
        Box::new(|t, v| t.concat_cols(v)),
    ));
    cases.push((
        "concat_rows",
        vec![rand_t(&mut rng, &[n, m], -1.0, 1.0), rand_t(&mut rng, &[w2, m], -1.0, 1.0)],
        Box::new(|t, v| t.concat_rows(v)),
    ));
    let start = rng.random_range(0..m);
    let end = rng.random_range(start + 1..=m);
    cases.push((
        "slice_cols",
        vec![rand_t(&mut rng, &[n, m], -1.0, 1.0)],
        Box::new(move |t, v| t.slice_cols(v[0], start, end)),
    ));
    cases.push((
        "leaky_relu",
        vec![away_from_zero(&mut rng, &[n, m])],
        Box::new(|t, v| t.leaky_relu(v[0], crate::LEAKY_RELU_SLOPE)),
    ));
    cases.push(("tanh", vec![rand_t(&mut rng, &[n, m], -2.0, 2.0)], Box::new(|t, v| t.tanh(v[0]))));
    cases.push(("exp", vec![rand_t(&mut rng, &[n, m], -2.0, 2.0)], Box::new(|t, v| t.exp(v[0]))));
    cases.push(("log", vec![rand_t(&mut rng, &[n, m], 0.5, 2.0)], Box::new(|t, v| t.log(v[0]))));
    cases.push((
        "scale",
        vec![rand_t(&mut rng, &[n, m], -1.0, 1.0)],
        Box::new(|t, v| t.scale(v[0], -1.75)),
    ));
    cases.push((
        "row_softmax",
        vec![rand_t(&mut rng, &[n, m], -2.0, 2.0)],
        Box::new(|t, v| t.row_softmax(v[0])),
    ));
    cases.push(("sum", vec![rand_t(&mut rng, &[n, m], -1.0, 1.0)], Box::new(|t, v| t.sum(v[0]))));
    cases.push(("mean", vec![rand_t(&mut rng, &[n, m], -1.0, 1.0)], Box::new(|t, v| t.mean(v[0]))));
    cases.push((
        "reshape",
        vec![rand_t(&mut rng, &[n, m], -1.0, 1.0)],
        Box::new(move |t, v| t.reshape(v[0], vec![m, n])),
    ));
    cases.push((
        "dropout",
        vec![rand_t(&mut rng, &[n, m], -1.0, 1.0)],
        Box::new(|t, v| t.dropout(v[0], 0.3)),
    ));
    cases.push((
        "cosine_rows",
        vec![rand_t(&mut rng, &[n, m], -1.0, 1.0), rand_t(&mut rng, &[n, m], -1.0, 1.0)],
        Box::new(|t, v| t.cosine_rows(v[0], v[1])),
    ));
    let classes = dim(&mut rng).max(2);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    cases.push((
        "softmax_cross_entropy",
        vec![rand_t(&mut rng, &[n, classes], -2.0, 2.0)],
        Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets)),
    ));
    let bce_targets: Vec<f64> = (0..n * m).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    cases.push((
        "bce_with_logits",
        vec![rand_t(&mut rng, &[n, m], -3.0, 3.0)],
        Box::new(move |t, v| t.bce_with_logits(v[0], &bce_targets)),
    ));
    let edges = dim(&mut rng) + n;
    let idx: Arc<[usize]> = (0..edges).map(|_| rng.random_range(0..n)).collect::<Vec<_>>().into();
    let gather_idx = idx.clone();
    cases.push((
        "gather_rows",
        vec![rand_t(&mut rng, &[n, m], -1.0, 1.0)],
        Box::new(move |t, v| t.gather_rows(v[0], gather_idx.clone())),
    ));
    let scatter_idx = idx.clone();
    cases.push((
        "scatter_add_rows",
        vec![rand_t(&mut rng, &[edges, m], -1.0, 1.0)],
        Box::new(move |t, v| t.scatter_add_rows(v[0], scatter_idx.clone(), n)),
    ));
    let heads = rng.random_range(1..=4usize);
    let seg_idx = idx.clone();
    cases.push((
        "segment_softmax",
        vec![rand_t(&mut rng, &[edges, heads], -2.0, 2.0)],
        Box::new(move |t, v| t.segment_softmax(v[0], seg_idx.clone(), n)),
    ));
    let dh = dim(&mut rng);
    cases.push((
        "head_dot",
        vec![
            rand_t(&mut rng, &[edges, heads * dh], -1.0, 1.0),
            rand_t(&mut rng, &[edges, heads * dh], -1.0, 1.0),
        ],
        Box::new(move |t, v| t.head_dot(v[0], v[1], heads)),
    ));
    cases.push((
        "head_scale",
        vec![
            rand_t(&mut rng, &[edges, heads * dh], -1.0, 1.0),
            rand_t(&mut rng, &[edges, heads], -1.0, 1.0),
        ],
        Box::new(|t, v| t.head_scale(v[0], v[1])),
    ));

    let mut out = Vec::new();
    for (name, inputs, build) in cases {
        let mut store = ParamStore::new();
        let ids: Vec<_> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("in{i}"), t))
            .collect::<Result<_>>()?;
        // Probe the output shape once to draw the reduction weights.
        let mut probe = Tape::train(seed);
        let vars: Vec<_> = ids.iter().map(|&id| probe.param(&store, id)).collect::<Result<_>>()?;
        let y = build(&mut probe, &vars)?;
        let shape = probe.value(y).shape().to_vec();
        let weights = rand_t(&mut rng, &shape, 0.5, 1.5);

        let report = grad_check(
            &store,
            |s| {
                let mut tape = Tape::train(seed);
                let vars: Vec<_> = ids.iter().map(|&id| tape.param(s, id)).collect::<Result<_>>()?;
                let y = build(&mut tape, &vars)?;
                let r = tape.constant(weights.clone())?;
                let yr = tape.mul(y, r)?;
                let loss = tape.sum(yr)?;
                Ok((tape, loss))
            },
            GradCheckOptions::default(),
        )?;
        out.push((name, report.max_rel_error));
    }
    Ok(out)
}
