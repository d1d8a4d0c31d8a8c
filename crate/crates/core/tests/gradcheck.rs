//! Central finite-difference checks of every graph kernel in f64, and of
//! the composed selector objective in f32.

use hetlm::cluster::{Selector, SelectorConfig};
use hetlm::predictor::{batch_nll_graph, Example, PredictorConfig, Predictor};
use hetlm::tensor::{Graph, NodeId, ParamSet, Scalar, SeededRng, Segment, Tensor};
use hetlm::train::selector_objective;

const INSTANCES: usize = 20;
const H64: f64 = 1e-4;
const TOL64: f64 = 1e-4;

fn random(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()).unwrap()
}

/// Magnitudes in `[0.3, 1.5]` with random sign, keeping away from kinks at 0.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let m = 0.3 + 1.2 * rng.uniform();
                if rng.uniform() < 0.5 {
                    -m
                } else {
                    m
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Max-norm relative error between two gradient vectors.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|x| x.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Builds `loss = Σ out ⊙ W` with a fixed random `W`, then compares the
/// analytic gradient of every input against central differences.
fn check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let weights = {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids);
        let shape = g.value(out).shape().to_vec();
        random(&mut SeededRng::new(seed ^ 0xfeed), &shape, -1.0, 1.0)
    };
    let eval = |vals: &[Tensor<f64>], grad: bool| {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = vals
            .iter()
            .enumerate()
            .map(|(i, t)| if grad { g.parameter(&format!("p{i}"), t.clone()) } else { g.input(t.clone()) })
            .collect();
        let out = build(&mut g, &ids);
        let w = g.input(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        let grads = grad.then(|| g.backward(loss).unwrap());
        (value, grads)
    };
    let (_, grads) = eval(inputs, true);
    let grads = grads.unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..inputs.len() {
        let name = format!("p{i}");
        let a = grads.get(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        analytic.extend(a);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H64;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H64;
            numeric.push((eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H64));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Runs `INSTANCES` random instances of one kernel and asserts the bound.
fn run_kernel(name: &str, make: impl Fn(&mut SeededRng, u64) -> f64) {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = SeededRng::new(1000 + i as u64).split_named(name);
        worst = worst.max(make(&mut rng, i as u64));
    }
    assert!(worst <= TOL64, "{name}: worst relative error {worst:e}");
}

fn dims(rng: &mut SeededRng) -> (usize, usize, usize) {
    (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4))
}

#[test]
fn matmul() {
    run_kernel("matmul", |r, s| {
        let (n, k, m) = dims(r);
        let ins = [random(r, &[n, k], -1.0, 1.0), random(r, &[k, m], -1.0, 1.0)];
        check(&ins, s, |g, x| g.matmul(x[0], x[1]).unwrap())
    });
}

#[test]
fn matmul_nt() {
    run_kernel("matmul_nt", |r, s| {
        let (n, k, m) = dims(r);
        let ins = [random(r, &[n, k], -1.0, 1.0), random(r, &[m, k], -1.0, 1.0)];
        check(&ins, s, |g, x| g.matmul_nt(x[0], x[1]).unwrap())
    });
}

#[test]
fn transpose() {
    run_kernel("transpose", |r, s| {
        let (n, m, _) = dims(r);
        check(&[random(r, &[n, m], -1.0, 1.0)], s, |g, x| g.transpose(x[0]).unwrap())
    });
}

#[test]
fn elementwise_binary() {
    for op in ["add", "sub", "mul", "div"] {
        run_kernel(op, |r, s| {
            let (n, m, _) = dims(r);
            let a = random(r, &[n, m], -1.0, 1.0);
            let b = if op == "div" { random(r, &[n, m], 0.5, 2.0) } else { random(r, &[n, m], -1.0, 1.0) };
            check(&[a, b], s, |g, x| match op {
                "add" => g.add(x[0], x[1]).unwrap(),
                "sub" => g.sub(x[0], x[1]).unwrap(),
                "mul" => g.mul(x[0], x[1]).unwrap(),
                _ => g.div(x[0], x[1]).unwrap(),
            })
        });
    }
}

#[test]
fn row_broadcasts() {
    run_kernel("add_row", |r, s| {
        let (n, m, _) = dims(r);
        check(&[random(r, &[n, m], -1.0, 1.0), random(r, &[m], -1.0, 1.0)], s, |g, x| {
            g.add_row(x[0], x[1]).unwrap()
        })
    });
    run_kernel("div_rows", |r, s| {
        let (n, m, _) = dims(r);
        check(&[random(r, &[n, m], -1.0, 1.0), random(r, &[n], 0.5, 2.0)], s, |g, x| {
            g.div_rows(x[0], x[1]).unwrap()
        })
    });
}

#[test]
fn unary() {
    for op in ["scale", "add_scalar", "tanh", "gelu", "sigmoid", "exp", "log", "abs"] {
        run_kernel(op, |r, s| {
            let (n, m, _) = dims(r);
            let x = match op {
                "log" => random(r, &[n, m], 0.2, 3.0),
                "abs" => away_from_zero(r, &[n, m]),
                _ => random(r, &[n, m], -2.0, 2.0),
            };
            check(&[x], s, |g, x| match op {
                "scale" => g.scale(x[0], -1.7),
                "add_scalar" => g.add_scalar(x[0], 0.4),
                "tanh" => g.tanh(x[0]),
                "gelu" => g.gelu(x[0]),
                "sigmoid" => g.sigmoid(x[0]),
                "exp" => g.exp(x[0]),
                "log" => g.log(x[0]),
                _ => g.abs(x[0]),
            })
        });
    }
}

#[test]
fn softmaxes() {
    run_kernel("softmax", |r, s| {
        let (n, m, _) = dims(r);
        check(&[random(r, &[n, m + 1], -2.0, 2.0)], s, |g, x| g.softmax(x[0]))
    });
    run_kernel("log_softmax", |r, s| {
        let (n, m, _) = dims(r);
        check(&[random(r, &[n, m + 1], -2.0, 2.0)], s, |g, x| g.log_softmax(x[0]))
    });
}

#[test]
fn layer_norm() {
    run_kernel("layer_norm", |r, s| {
        let (n, m, _) = dims(r);
        let m = m + 1;
        let ins = [
            random(r, &[n, m], -2.0, 2.0),
            random(r, &[m], 0.5, 1.5),
            random(r, &[m], -0.5, 0.5),
        ];
        check(&ins, s, |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5).unwrap())
    });
}

#[test]
fn embedding() {
    run_kernel("embedding", |r, s| {
        let (v, d, n) = dims(r);
        let ids: Vec<usize> = (0..n + 2).map(|_| r.below(v)).collect();
        check(&[random(r, &[v, d], -1.0, 1.0)], s, move |g, x| g.embedding(x[0], &ids).unwrap())
    });
}

#[test]
fn column_ops() {
    run_kernel("concat_cols", |r, s| {
        let (n, a, b) = dims(r);
        check(&[random(r, &[n, a], -1.0, 1.0), random(r, &[n, b], -1.0, 1.0)], s, |g, x| {
            g.concat_cols(&[x[0], x[1]]).unwrap()
        })
    });
    run_kernel("slice_cols", |r, s| {
        let (n, m, _) = dims(r);
        let m = m + 2;
        let start = r.below(m - 1);
        let len = 1 + r.below(m - start);
        check(&[random(r, &[n, m], -1.0, 1.0)], s, move |g, x| g.slice_cols(x[0], start, len).unwrap())
    });
}

#[test]
fn reductions() {
    run_kernel("sum", |r, s| {
        let (n, m, _) = dims(r);
        check(&[random(r, &[n, m], -1.0, 1.0)], s, |g, x| g.sum(x[0]))
    });
    run_kernel("mean", |r, s| {
        let (n, m, _) = dims(r);
        check(&[random(r, &[n, m], -1.0, 1.0)], s, |g, x| g.mean(x[0]))
    });
    run_kernel("sum_over_rows", |r, s| {
        let (n, m, _) = dims(r);
        check(&[random(r, &[n, m], -1.0, 1.0)], s, |g, x| g.sum_over_rows(x[0]))
    });
}

fn segments(r: &mut SeededRng, rows: usize) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut start = 0;
    while start < rows {
        let len = (1 + r.below(4)).min(rows - start);
        segs.push(Segment::new(start, len));
        start += len;
    }
    segs
}

#[test]
fn causal_attention() {
    run_kernel("causal_attention", |r, s| {
        let heads = 1 + r.below(2);
        let d = heads * (1 + r.below(3));
        let n = 2 + r.below(6);
        let segs = segments(r, n);
        let ins = [
            random(r, &[n, d], -1.0, 1.0),
            random(r, &[n, d], -1.0, 1.0),
            random(r, &[n, d], -1.0, 1.0),
        ];
        check(&ins, s, move |g, x| g.causal_attention(x[0], x[1], x[2], heads, &segs).unwrap())
    });
}

#[test]
fn cross_entropy() {
    run_kernel("cross_entropy", |r, s| {
        let n = 2 + r.below(6);
        let v = 2 + r.below(4);
        let segs = segments(r, n);
        let targets: Vec<Option<usize>> = (0..n)
            .map(|_| if r.uniform() < 0.75 { Some(r.below(v)) } else { None })
            .collect();
        check(&[random(r, &[n, v], -2.0, 2.0)], s, move |g, x| {
            g.cross_entropy(x[0], &targets, &segs).unwrap()
        })
    });
}

#[test]
fn nll() {
    run_kernel("nll", |r, s| {
        let n = 1 + r.below(5);
        let v = 2 + r.below(4);
        let targets: Vec<usize> = (0..n).map(|_| r.below(v)).collect();
        check(&[random(r, &[n, v], 0.2, 1.0)], s, move |g, x| g.nll(x[0], &targets).unwrap())
    });
}

#[test]
fn composed_predictor_loss_f64() {
    let cfg = PredictorConfig {
        layers: 1,
        heads: 2,
        model_dim: 4,
        ffn_dim: 6,
        max_seq_len: 16,
        dropout: 0.0,
    };
    let vocab = 7;
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = SeededRng::new(50 + i as u64);
        let base = Predictor::new(cfg, vocab, &SeededRng::new(i as u64)).unwrap();
        // Larger weights than the default init so every path carries signal.
        let mut params: ParamSet<f64> = base.params.cast();
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += 0.3 * r.normal();
            }
        }
        let examples: Vec<Example> = (0..2)
            .map(|_| Example {
                input: (0..1 + r.below(3)).map(|_| 4 + r.below(3)).collect(),
                target: (0..2 + r.below(3)).map(|_| r.below(vocab)).collect(),
            })
            .collect();
        let refs: Vec<&Example> = examples.iter().collect();
        let loss_of = |p: &ParamSet<f64>| {
            let (mut g, nll) = batch_nll_graph(p, &cfg, &refs, false).unwrap();
            let s = g.sum(nll);
            g.value(s).item()
        };
        let (mut g, nll) = batch_nll_graph(&params, &cfg, &refs, true).unwrap();
        let s = g.sum(nll);
        let grads = g.backward(s).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let n = params.get(&name).unwrap().len();
            analytic.extend(grads.get(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]));
            for j in 0..n {
                let mut p = params.clone();
                p.get_mut(&name).unwrap().data_mut()[j] += H64;
                let up = loss_of(&p);
                p.get_mut(&name).unwrap().data_mut()[j] -= 2.0 * H64;
                let down = loss_of(&p);
                numeric.push((up - down) / (2.0 * H64));
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    assert!(worst <= TOL64, "composed predictor loss: {worst:e}");
}

/// Selector objective in f32: analytic gradient w.r.t. every selector
/// weight against central differences of the f32 forward pass.
#[test]
fn composed_selector_objective_f32() {
    const H32: f32 = 5e-3;
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = SeededRng::new(700 + i as u64);
        let b = 3 + r.below(6);
        let dim = 2 + r.below(4);
        let k = 2 + r.below(3);
        let hidden = 2 + r.below(4);
        let alpha = 5.0 * r.uniform();
        let beta = 9.0 * r.uniform();
        let mut sel = Selector::new(dim, k, SelectorConfig { hidden }, &SeededRng::new(i as u64)).unwrap();
        for (_, t) in sel.params.iter_mut() {
            for v in t.data_mut() {
                *v += (0.5 * r.normal()) as f32;
            }
        }
        let z = Tensor::new(vec![b, dim], (0..b * dim).map(|_| (0.3 * r.normal()) as f32).collect()).unwrap();
        let nll = Tensor::new(vec![b, k], (0..b * k).map(|_| (1.0 + 4.0 * r.uniform()) as f32).collect()).unwrap();
        let dict: Vec<Vec<f32>> = (0..k).map(|_| (0..dim).map(|_| r.normal() as f32).collect()).collect();
        let loss_of = |p: &ParamSet<f32>| {
            let mut g = Graph::<f32>::new();
            let binds = p.bind_frozen(&mut g);
            let nodes = selector_objective(&mut g, &binds, &z, &nll, &dict, alpha, beta).unwrap();
            g.value(nodes.l_overall).item().as_f64()
        };
        let mut g = Graph::<f32>::new();
        let binds = sel.params.bind(&mut g);
        let nodes = selector_objective(&mut g, &binds, &z, &nll, &dict, alpha, beta).unwrap();
        let grads = g.backward(nodes.l_overall).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let names: Vec<String> = sel.params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let n = sel.params.get(&name).unwrap().len();
            analytic.extend(grads.get(&name).unwrap().data().iter().map(|&v| v as f64));
            for j in 0..n {
                let mut p = sel.params.clone();
                let orig = p.get(&name).unwrap().data()[j];
                p.get_mut(&name).unwrap().data_mut()[j] = orig + H32;
                let up = loss_of(&p);
                p.get_mut(&name).unwrap().data_mut()[j] = orig - H32;
                let down = loss_of(&p);
                numeric.push((up - down) / (2.0 * H32 as f64));
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    assert!(worst <= 1e-3, "composed selector objective: {worst:e}");
}
