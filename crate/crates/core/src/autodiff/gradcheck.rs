//! Central finite-difference checks of tape gradients.

use super::{AutodiffError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so near-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-5;

/// Largest relative error between analytic and central-difference gradients of
/// a random projection of `f(inputs)`, over every input element.
pub fn max_relative_error<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proj: Vec<f64> = Vec::new();
    let eval = |values: &[Tensor], proj: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if proj.is_empty() {
            *proj = (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        }
        let loss = tape.weighted_sum(out, proj)?;
        Ok::<_, AutodiffError>((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(inputs, &mut proj, &mut rng)?;
    let grads = tape.backward(loss);
    let mut worst: f64 = 0.0;
    let mut shifted = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for e in 0..input.len() {
            let base = input.data()[e];
            shifted[k].data_mut()[e] = base + STEP;
            let (t_plus, _, l_plus) = eval(&shifted, &mut proj, &mut rng)?;
            shifted[k].data_mut()[e] = base - STEP;
            let (t_minus, _, l_minus) = eval(&shifted, &mut proj, &mut rng)?;
            shifted[k].data_mut()[e] = base;
            let numeric = (t_plus.value(l_plus).item() - t_minus.value(l_minus).item()) / (2.0 * STEP);
            let a = analytic[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Worst gradient error of one operation family over several random shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_error: f64,
}

fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(dims, 1.0, rng)
}

fn rand_edges(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(0.5) {
                edges.push((a, b, rng.gen_range(0.05..1.0)));
            }
        }
    }
    edges
}

/// Gradient checks of every differentiable operation on `cases` random shapes each.
pub fn gradient_suite(cases: usize, seed: u64) -> Result<Vec<GradReport>, AutodiffError> {
    use super::nn::{
        attention_gcn_forward, attention_regularizer, dense_forward, gcn_forward, Adjacency, AttentionRecord, HeadVars,
        LEAKY_SLOPE,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run = |op: &'static str,
                   rng: &mut ChaCha8Rng,
                   case: &mut dyn FnMut(&mut ChaCha8Rng, u64) -> Result<f64, AutodiffError>|
     -> Result<(), AutodiffError> {
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let s = rng.gen();
            worst = worst.max(case(rng, s)?);
        }
        reports.push(GradReport {
            op,
            cases,
            max_error: worst,
        });
        Ok(())
    };

    run("dense", &mut rng, &mut |rng, s| {
        let (n, k, m) = (rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..6));
        let inputs = [
            rand_tensor(&[n, k], rng),
            rand_tensor(&[k, m], rng),
            rand_tensor(&[m], rng),
        ];
        max_relative_error(&inputs, s, |t, v| dense_forward(t, v[0], v[1], v[2]))
    })?;
    run("activations", &mut rng, &mut |rng, s| {
        let n = rng.gen_range(1..12);
        let seg: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let inputs = [rand_tensor(&[n], rng)];
        max_relative_error(&inputs, s, |t, v| {
            let a = t.leaky_relu(v[0], LEAKY_SLOPE);
            let b = t.sigmoid(a);
            let c = t.segment_softmax(v[0], &seg)?;
            t.add(b, c)
        })
    })?;
    run("conv", &mut rng, &mut |rng, s| {
        let (c, o) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4));
        let inputs = [
            rand_tensor(&[c, h, w], rng),
            rand_tensor(&[o, c, 3, 3], rng),
            rand_tensor(&[o], rng),
        ];
        max_relative_error(&inputs, s, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            let y = t.leaky_relu(y, LEAKY_SLOPE);
            let p = t.max_pool2(y)?;
            let u = t.upsample2(p)?;
            t.concat_first(u, v[0])
        })
    })?;
    run("gcn", &mut rng, &mut |rng, s| {
        let (n, l, m) = (rng.gen_range(1..7), rng.gen_range(1..5), rng.gen_range(1..5));
        let adj = Adjacency::from_edges(n, &rand_edges(n, rng), rng.gen_bool(0.5));
        let inputs = [
            rand_tensor(&[n, l], rng),
            rand_tensor(&[l, m], rng),
            rand_tensor(&[m], rng),
        ];
        max_relative_error(&inputs, s, |t, v| gcn_forward(t, v[0], &adj, v[1], v[2]))
    })?;
    run("attention_gcn", &mut rng, &mut |rng, s| {
        let (n, l, m, k) = (
            rng.gen_range(1..7),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..4),
        );
        let adj = Adjacency::from_edges(n, &rand_edges(n, rng), rng.gen_bool(0.5));
        let mut inputs = vec![rand_tensor(&[n, l], rng), rand_tensor(&[m], rng)];
        for _ in 0..k {
            inputs.push(rand_tensor(&[l, m], rng));
            inputs.push(rand_tensor(&[m, 1], rng));
            inputs.push(rand_tensor(&[m, 1], rng));
        }
        max_relative_error(&inputs, s, |t, v| {
            let heads: Vec<HeadVars> = v[2..]
                .chunks(3)
                .map(|c| HeadVars {
                    w: c[0],
                    a_dst: c[1],
                    a_src: c[2],
                })
                .collect();
            Ok(attention_gcn_forward(t, v[0], &adj, &heads, v[1])?.0)
        })
    })?;
    run("bce", &mut rng, &mut |rng, s| {
        let n = rng.gen_range(1..10);
        let p = Tensor::new(&[n], (0..n).map(|_| rng.gen_range(0.05..0.95)).collect())?;
        let y: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
        max_relative_error(&[p], s, |t, v| t.bce(v[0], &y, &w))
    })?;
    run("attention_regularizer", &mut rng, &mut |rng, s| {
        let (layers, heads, n, m) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..5),
            rng.gen_range(1..4),
        );
        let inputs: Vec<Tensor> = (0..layers * heads).map(|_| rand_tensor(&[n, m], rng)).collect();
        max_relative_error(&inputs, s, |t, v| {
            let rec = AttentionRecord {
                layers: v.chunks(heads).map(|c| c.to_vec()).collect(),
            };
            attention_regularizer(t, &rec)
        })
    })?;
    run("merge_cross_entropy", &mut rng, &mut |rng, s| {
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let gt: Vec<f64> = (0..h * w).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let inputs = [rand_tensor(&[1, h, w], rng)];
        max_relative_error(&inputs, s, |t, v| {
            let p = t.sigmoid(v[0]);
            super::nn::bce_loss(t, p, &gt)
        })
    })?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_shapes() {
        for r in gradient_suite(3, 11).unwrap() {
            assert!(r.max_error <= 1e-3, "{r:?}");
        }
    }
}
