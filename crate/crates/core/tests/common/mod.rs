#![allow(dead_code)]

use adsnn::attention::{attention_augmented_conv, multi_head_attention, AttentionConfig, AttentionWeights, AugmentedConvParams, HeadWeights};
use adsnn::autodiff::{Graph, Mode, Padding, RunningStats, Var};
use adsnn::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const MAX_REL_ERR: f64 = 1e-4;
/// Relative error uses `max(|analytic|, |numeric|, REL_FLOOR)` as the
/// denominator so entries that are zero up to rounding compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const SHAPES_PER_OP: usize = 10;

type Build = dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)>;

/// Inputs drawn in `[-1, 1]` and kept away from zero so ReLU kinks are
/// never within one step.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

/// Loss `Σ r ⊙ y` with a fixed random `r`, so every output entry matters.
fn loss_of(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

fn eval_loss(build: &Build, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let (y, _) = build(&mut g, inputs)?;
    let l = loss_of(&mut g, y, r)?;
    g.value(l).item()
}

/// Max relative error between reverse-mode and central-difference
/// gradients over every entry of every input.
pub fn check(build: &Build, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let (y, vars) = build(&mut g, &inputs)?;
    let r = rand_tensor(rng, g.shape(y));
    let l = loss_of(&mut g, y, &r)?;
    let grads = g.backward(l)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval_loss(build, &plus, &r)? - eval_loss(build, &minus, &r)?) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn params(g: &mut Graph<f64>, ts: &[Tensor<f64>]) -> Vec<Var> {
    ts.iter().map(|t| g.param(t.clone())).collect()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

pub struct OpCase {
    pub name: &'static str,
    pub build: Box<Build>,
    pub inputs: Vec<Tensor<f64>>,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)> + 'static) -> OpCase {
    OpCase {
        name,
        build: Box::new(build),
        inputs,
    }
}

fn attention_weights(rng: &mut ChaCha8Rng, fin: usize, cfg: &AttentionConfig) -> AttentionWeights<f64> {
    let (dk, dv) = (cfg.key_depth_per_head(), cfg.value_depth_per_head());
    AttentionWeights {
        heads: (0..cfg.heads)
            .map(|_| HeadWeights {
                query: rand_tensor(rng, &[fin, dk]),
                key: rand_tensor(rng, &[fin, dk]),
                value: rand_tensor(rng, &[fin, dv]),
            })
            .collect(),
        output: rand_tensor(rng, &[cfg.value_depth, cfg.value_depth]),
    }
}

fn weights_from(ts: &[Tensor<f64>], heads: usize) -> AttentionWeights<f64> {
    AttentionWeights {
        heads: (0..heads)
            .map(|h| HeadWeights {
                query: ts[3 * h].clone(),
                key: ts[3 * h + 1].clone(),
                value: ts[3 * h + 2].clone(),
            })
            .collect(),
        output: ts[3 * heads].clone(),
    }
}

fn weights_tensors(w: &AttentionWeights<f64>) -> Vec<Tensor<f64>> {
    let mut v: Vec<Tensor<f64>> = w.heads.iter().flat_map(|h| [h.query.clone(), h.key.clone(), h.value.clone()]).collect();
    v.push(w.output.clone());
    v
}

/// One random instance of every differentiable operation, plus the
/// attention branch and the composed attention-augmented block.
pub fn cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut out = Vec::new();
    let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 4));
    let s = [a, b];
    out.push(case("add", vec![rand_tensor(rng, &s), rand_tensor(rng, &s)], |g, t| {
        let v = params(g, t);
        Ok((g.add(v[0], v[1])?, v))
    }));
    out.push(case("mul", vec![rand_tensor(rng, &s), rand_tensor(rng, &s)], |g, t| {
        let v = params(g, t);
        Ok((g.mul(v[0], v[1])?, v))
    }));
    let c = dim(rng, 1, 4);
    let xs = [dim(rng, 1, 3), dim(rng, 1, 3), c];
    out.push(case("add_bias", vec![rand_tensor(rng, &xs), rand_tensor(rng, &[c])], |g, t| {
        let v = params(g, t);
        Ok((g.add_bias(v[0], v[1])?, v))
    }));
    let k: f64 = rng.gen_range(-2.0..2.0);
    out.push(case("scale", vec![rand_tensor(rng, &xs)], move |g, t| {
        let v = params(g, t);
        Ok((g.scale(v[0], k), v))
    }));
    out.push(case("sum", vec![rand_tensor(rng, &xs)], |g, t| {
        let v = params(g, t);
        Ok((g.sum(v[0]), v))
    }));
    out.push(case("mean", vec![rand_tensor(rng, &xs)], |g, t| {
        let v = params(g, t);
        Ok((g.mean(v[0]), v))
    }));
    let (m, kk, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    out.push(case("matmul", vec![rand_tensor(rng, &[m, kk]), rand_tensor(rng, &[kk, n])], |g, t| {
        let v = params(g, t);
        Ok((g.matmul(v[0], v[1])?, v))
    }));
    let bt = dim(rng, 1, 3);
    out.push(case("matmul_batched", vec![rand_tensor(rng, &[bt, m, kk]), rand_tensor(rng, &[bt, kk, n])], |g, t| {
        let v = params(g, t);
        Ok((g.matmul(v[0], v[1])?, v))
    }));
    out.push(case("matmul_shared", vec![rand_tensor(rng, &[bt, m, kk]), rand_tensor(rng, &[kk, n])], |g, t| {
        let v = params(g, t);
        Ok((g.matmul(v[0], v[1])?, v))
    }));
    out.push(case("transpose_last", vec![rand_tensor(rng, &[bt, m, kk])], |g, t| {
        let v = params(g, t);
        Ok((g.transpose_last(v[0])?, v))
    }));
    let total: usize = xs.iter().product();
    out.push(case("reshape", vec![rand_tensor(rng, &xs)], move |g, t| {
        let v = params(g, t);
        Ok((g.reshape(v[0], vec![total])?, v))
    }));
    out.push(case("relu", vec![rand_tensor(rng, &xs)], |g, t| {
        let v = params(g, t);
        Ok((g.relu(v[0]), v))
    }));
    let axis = rng.gen_range(0..3);
    let sm = [dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4)];
    out.push(case("softmax", vec![rand_tensor(rng, &sm)], move |g, t| {
        let v = params(g, t);
        Ok((g.softmax(v[0], axis)?, v))
    }));
    let (nb, h, w, ci, co) = (dim(rng, 1, 2), dim(rng, 3, 5), dim(rng, 3, 5), dim(rng, 1, 3), dim(rng, 1, 3));
    let kz = if rng.gen_bool(0.5) { 3 } else { 1 };
    let stride = dim(rng, 1, 2);
    let pad = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    out.push(case(
        "conv2d",
        vec![rand_tensor(rng, &[nb, h, w, ci]), rand_tensor(rng, &[kz, kz, ci, co])],
        move |g, t| {
            let v = params(g, t);
            Ok((g.conv2d(v[0], v[1], stride, pad)?, v))
        },
    ));
    out.push(case(
        "depthwise_conv2d",
        vec![rand_tensor(rng, &[nb, h, w, ci]), rand_tensor(rng, &[3, 3, ci])],
        move |g, t| {
            let v = params(g, t);
            Ok((g.depthwise_conv2d(v[0], v[1], stride, pad)?, v))
        },
    ));
    let bn_in = [dim(rng, 2, 3), dim(rng, 1, 3), dim(rng, 1, 3), ci];
    for (name, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_eval", Mode::Eval)] {
        let mut stats = RunningStats::new(ci);
        stats.mean = rand_tensor(rng, &[ci]);
        stats.var = Tensor::from_fn(vec![ci], |_| rng.gen_range(0.5..2.0));
        out.push(case(
            name,
            vec![rand_tensor(rng, &bn_in), rand_tensor(rng, &[ci]), rand_tensor(rng, &[ci])],
            move |g, t| {
                let v = params(g, t);
                let mut st = stats.clone();
                Ok((g.batch_norm(v[0], v[1], v[2], &mut st, mode)?, v))
            },
        ));
    }
    out.push(case("global_avg_pool", vec![rand_tensor(rng, &[nb, h, w, ci])], |g, t| {
        let v = params(g, t);
        Ok((g.global_avg_pool(v[0])?, v))
    }));
    let (c1, c2) = (dim(rng, 1, 3), dim(rng, 1, 3));
    out.push(case(
        "concat",
        vec![rand_tensor(rng, &[nb, h, c1]), rand_tensor(rng, &[nb, h, c2])],
        |g, t| {
            let v = params(g, t);
            Ok((g.concat(&v, 2)?, v))
        },
    ));
    let idx = rng.gen_range(0..ci);
    out.push(case("select_last", vec![rand_tensor(rng, &[nb, h, ci])], move |g, t| {
        let v = params(g, t);
        Ok((g.select_last(v[0], idx)?, v))
    }));
    let (db, di, dout) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    out.push(case(
        "dense",
        vec![rand_tensor(rng, &[db, di]), rand_tensor(rng, &[di, dout]), rand_tensor(rng, &[dout])],
        |g, t| {
            let v = params(g, t);
            Ok((g.dense(v[0], v[1], v[2])?, v))
        },
    ));
    let classes = dim(rng, 2, 4);
    let labels: Vec<usize> = (0..db).map(|_| rng.gen_range(0..classes)).collect();
    out.push(case("cross_entropy", vec![rand_tensor(rng, &[db, classes])], move |g, t| {
        let v = params(g, t);
        Ok((g.cross_entropy(v[0], &labels)?, v))
    }));

    // attention branch and the composed block
    let heads = dim(rng, 1, 2);
    let cfg = AttentionConfig::new(heads, heads * dim(rng, 1, 2), heads * dim(rng, 1, 2)).unwrap();
    let fin = dim(rng, 2, 3);
    let (ah, aw) = (dim(rng, 1, 3), dim(rng, 2, 3));
    let ab = dim(rng, 1, 2);
    let x = rand_tensor(rng, &[ab, ah, aw, fin]);
    let wts = attention_weights(rng, fin, &cfg);
    let mut inputs = vec![x.clone()];
    inputs.extend(weights_tensors(&wts));
    out.push(case("multi_head_attention", inputs, move |g, t| {
        let xv = g.param(t[0].clone());
        let w = weights_from(&t[1..], cfg.heads);
        let (y, trace) = multi_head_attention(g, xv, &w, &cfg)?;
        let mut vars = vec![xv];
        vars.extend(trace.vars);
        Ok((y, vars))
    }));
    let fconv = dim(rng, 1, 2);
    let mut inputs = vec![x, rand_tensor(rng, &[3, 3, fin, fconv])];
    inputs.extend(weights_tensors(&wts));
    out.push(case("attention_augmented_block", inputs, move |g, t| {
        let xv = g.param(t[0].clone());
        let p = AugmentedConvParams {
            kernel: t[1].clone(),
            attention: Some(weights_from(&t[2..], cfg.heads)),
            config: cfg,
        };
        let (y, pv) = attention_augmented_conv(g, xv, &p)?;
        let mut vars = vec![xv];
        vars.extend(pv);
        Ok((y, vars))
    }));
    out
}

/// Worst relative error per operation over [`SHAPES_PER_OP`] random shape
/// draws, in a fixed order.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for _ in 0..SHAPES_PER_OP {
        for c in cases(&mut rng) {
            let err = check(&*c.build, c.inputs, &mut rng).unwrap_or_else(|e| panic!("{}: {}", c.name, e));
            match worst.iter_mut().find(|(n, _)| *n == c.name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((c.name, err)),
            }
        }
    }
    worst
}
