#![allow(dead_code)]

use condense::engine::{Array, Tape, Var};
use condense::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed, non-uniform weights so
/// that every output element influences the checked gradient differently.
pub fn project(tape: &mut Tape, out: Var) -> Var {
    let v = tape.value(out);
    if v.len() == 1 && v.ndim() == 0 {
        return out;
    }
    let w: Vec<f64> = (0..v.len()).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect();
    let w = tape.constant(Array::new(v.shape().to_vec(), w).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn evaluate<F>(inputs: &[Array], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = project(&mut tape, out);
    tape.value(s).item()
}

/// Analytic gradients of `f` (projected to a scalar) at `inputs`.
pub fn analytic<F>(inputs: &[Array], f: &F) -> Vec<Array>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = project(&mut tape, out);
    let g = tape.backward(s).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, a)| g.get_or_zeros(v, a))
        .collect()
}

/// Central finite differences of `f` (projected to a scalar) at `inputs`.
pub fn numeric<F>(inputs: &[Array], f: &F) -> Vec<Array>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = Array::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            grad.data_mut()[i] = (evaluate(&plus, f) - evaluate(&minus, f)) / (2.0 * FD_STEP);
        }
        out.push(grad);
    }
    out
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn rel_err(a: &Array, n: &Array) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(n.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(n.norm()).max(1e-8)
}

/// Worst relative error between analytic and numeric gradients over all inputs.
pub fn gradcheck<F>(inputs: &[Array], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic(inputs, &f);
    let n = numeric(inputs, &f);
    a.iter()
        .zip(&n)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Every differentiable engine op, each instantiable on random inputs.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "reshape",
    "flatten",
    "transpose",
    "matmul",
    "linear",
    "conv2d",
    "conv2d_strided_grouped",
    "conv2d_depthwise",
    "avg_pool2d",
    "adaptive_avg_pool2d",
    "global_avg_pool",
    "relu",
    "channel_shuffle",
    "select_rows",
    "batch_norm_train",
    "batch_norm_eval",
    "group_norm",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "mean_axes",
    "var_axes",
    "patch_mean",
    "patch_var",
    "norm",
    "log",
    "kl_div",
    "squared_error",
    "eigvals_sym",
];

/// Random inputs and a closure applying the named op.
pub fn op_case(name: &str, r: &mut ChaCha8Rng) -> (Vec<Array>, OpFn) {
    let f: OpFn;
    let inputs: Vec<Array>;
    match name {
        "add" => {
            inputs = vec![randn(r, &[3, 4]), randn(r, &[3, 4])];
            f = Box::new(|t, v| t.add(v[0], v[1]));
        }
        "sub" => {
            inputs = vec![randn(r, &[3, 4]), randn(r, &[3, 4])];
            f = Box::new(|t, v| t.sub(v[0], v[1]));
        }
        "mul" => {
            inputs = vec![randn(r, &[3, 4]), randn(r, &[3, 4])];
            f = Box::new(|t, v| t.mul(v[0], v[1]));
        }
        "scale" => {
            inputs = vec![randn(r, &[5])];
            f = Box::new(|t, v| Ok(t.scale(v[0], -1.7)));
        }
        "add_scalar" => {
            inputs = vec![randn(r, &[5])];
            f = Box::new(|t, v| Ok(t.add_scalar(v[0], 2.5)));
        }
        "reshape" => {
            inputs = vec![randn(r, &[2, 6])];
            f = Box::new(|t, v| t.reshape(v[0], &[3, 4]));
        }
        "flatten" => {
            inputs = vec![randn(r, &[2, 2, 3, 3])];
            f = Box::new(|t, v| t.flatten(v[0]));
        }
        "transpose" => {
            inputs = vec![randn(r, &[3, 5])];
            f = Box::new(|t, v| t.transpose(v[0]));
        }
        "matmul" => {
            inputs = vec![randn(r, &[3, 4]), randn(r, &[4, 2])];
            f = Box::new(|t, v| t.matmul(v[0], v[1]));
        }
        "linear" => {
            inputs = vec![randn(r, &[3, 4]), randn(r, &[5, 4]), randn(r, &[5])];
            f = Box::new(|t, v| t.linear(v[0], v[1], v[2]));
        }
        "conv2d" => {
            inputs = vec![randn(r, &[1, 1, 4, 4]), randn(r, &[1, 1, 3, 3])];
            f = Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1, 1));
        }
        "conv2d_strided_grouped" => {
            inputs = vec![randn(r, &[2, 4, 5, 5]), randn(r, &[6, 2, 3, 3])];
            f = Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1, 2));
        }
        "conv2d_depthwise" => {
            inputs = vec![randn(r, &[2, 3, 5, 6]), randn(r, &[3, 1, 3, 3])];
            f = Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1, 3));
        }
        "avg_pool2d" => {
            inputs = vec![randn(r, &[2, 2, 5, 4])];
            f = Box::new(|t, v| t.avg_pool2d(v[0], 2));
        }
        "adaptive_avg_pool2d" => {
            inputs = vec![randn(r, &[1, 2, 7, 5])];
            f = Box::new(|t, v| t.adaptive_avg_pool2d(v[0], 3, 2));
        }
        "global_avg_pool" => {
            inputs = vec![randn(r, &[2, 3, 3, 3])];
            f = Box::new(|t, v| t.global_avg_pool(v[0]));
        }
        "relu" => {
            // Keep values away from the kink so central differences are valid.
            let mut x = randn(r, &[4, 4]);
            x.data_mut().iter_mut().for_each(|v| {
                if v.abs() < 0.05 {
                    *v += 0.1
                }
            });
            inputs = vec![x];
            f = Box::new(|t, v| Ok(t.relu(v[0])));
        }
        "channel_shuffle" => {
            inputs = vec![randn(r, &[2, 6, 2, 2])];
            f = Box::new(|t, v| t.channel_shuffle(v[0], 3));
        }
        "select_rows" => {
            inputs = vec![randn(r, &[4, 3])];
            f = Box::new(|t, v| t.select_rows(v[0], &[2, 0, 2]));
        }
        "batch_norm_train" => {
            inputs = vec![randn(r, &[3, 2, 3, 3]), randn(r, &[2]), randn(r, &[2])];
            f = Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0));
        }
        "batch_norm_eval" => {
            inputs = vec![randn(r, &[3, 2, 3, 3]), randn(r, &[2]), randn(r, &[2])];
            let mean: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..2).map(|_| r.random_range(0.5..2.0)).collect();
            f = Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5));
        }
        "group_norm" => {
            inputs = vec![randn(r, &[2, 4, 3, 3]), randn(r, &[4]), randn(r, &[4])];
            f = Box::new(|t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5));
        }
        "softmax" => {
            inputs = vec![randn(r, &[3, 5])];
            f = Box::new(|t, v| t.softmax(v[0]));
        }
        "log_softmax" => {
            inputs = vec![randn(r, &[3, 5])];
            f = Box::new(|t, v| t.log_softmax(v[0]));
        }
        "sum" => {
            inputs = vec![randn(r, &[3, 4])];
            f = Box::new(|t, v| Ok(t.sum(v[0])));
        }
        "mean" => {
            inputs = vec![randn(r, &[3, 4])];
            f = Box::new(|t, v| t.mean(v[0]));
        }
        "mean_axes" => {
            inputs = vec![randn(r, &[2, 3, 2, 2])];
            f = Box::new(|t, v| t.mean_axes(v[0], &[0, 2, 3]));
        }
        "var_axes" => {
            inputs = vec![randn(r, &[2, 3, 2, 2])];
            f = Box::new(|t, v| t.var_axes(v[0], &[0, 2, 3]));
        }
        "patch_mean" => {
            inputs = vec![randn(r, &[2, 2, 5, 5])];
            f = Box::new(|t, v| t.patch_mean(v[0], 2));
        }
        "patch_var" => {
            inputs = vec![randn(r, &[2, 2, 5, 5])];
            f = Box::new(|t, v| t.patch_var(v[0], 2));
        }
        "norm" => {
            inputs = vec![randn(r, &[3, 3])];
            f = Box::new(|t, v| Ok(t.norm(v[0])));
        }
        "log" => {
            inputs = vec![uniform(r, &[6], 0.5, 3.0)];
            f = Box::new(|t, v| t.log(v[0]));
        }
        "kl_div" => {
            inputs = vec![randn(r, &[6]), randn(r, &[6])];
            f = Box::new(|t, v| {
                let p = t.softmax(v[0])?;
                let lq = t.log_softmax(v[1])?;
                t.kl_div(p, lq)
            });
        }
        "squared_error" => {
            inputs = vec![randn(r, &[3, 4]), randn(r, &[3, 4])];
            f = Box::new(|t, v| t.squared_error(v[0], v[1]));
        }
        "eigvals_sym" => {
            // Symmetrized parametrization keeps finite-difference probes symmetric;
            // the gap condition keeps the spectrum well separated.
            let a = loop {
                let a = randn(r, &[4, 4]);
                let mut s = vec![0.0; 16];
                for i in 0..4 {
                    for j in 0..4 {
                        s[i * 4 + j] = 0.5 * (a.data()[i * 4 + j] + a.data()[j * 4 + i]);
                    }
                }
                let e = condense::engine::jacobi_eigh(&s, 4);
                if e.values.windows(2).all(|w| w[1] - w[0] > 1e-3) {
                    break a;
                }
            };
            inputs = vec![a];
            f = Box::new(|t, v| {
                let at = t.transpose(v[0])?;
                let s = t.add(v[0], at)?;
                let s = t.scale(s, 0.5);
                t.eigvals_sym(s)
            });
        }
        other => panic!("no case for op {other}"),
    }
    (inputs, f)
}

/// Brute-force channel mean/var and patch mean/var of one `[B, C, H, W]` map,
/// computed two-pass by explicit enumeration.
pub fn brute_stats(x: &Array, n_p: usize) -> [Vec<f64>; 4] {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let at = |i: usize, ch: usize, y: usize, xx: usize| x.data()[((i * c + ch) * h + y) * w + xx];
    let mut cm = vec![0.0; c];
    let mut cv = vec![0.0; c];
    for ch in 0..c {
        let mut vals = Vec::new();
        for i in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    vals.push(at(i, ch, y, xx));
                }
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        cm[ch] = m;
        cv[ch] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
    }
    let (gh, gw) = (h.div_ceil(n_p), w.div_ceil(n_p));
    let mut pm = vec![0.0; gh * gw];
    let mut pv = vec![0.0; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut vals = Vec::new();
            for i in 0..b {
                for ch in 0..c {
                    for y in gy * n_p..((gy + 1) * n_p).min(h) {
                        for xx in gx * n_p..((gx + 1) * n_p).min(w) {
                            vals.push(at(i, ch, y, xx));
                        }
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            pm[gy * gw + gx] = m;
            pv[gy * gw + gx] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        }
    }
    [cm, cv, pm, pv]
}

/// Eq.-9 style oracle: per-batch brute-force statistics of every conv tap,
/// averaged over consecutive batches of `batch` images.
pub fn brute_capture(
    model: &condense::backbone::Model,
    images: &Array,
    n_p: usize,
    batch: usize,
) -> Vec<[Vec<f64>; 4]> {
    let n = images.shape()[0];
    let mut sums: Vec<[Vec<f64>; 4]> = Vec::new();
    let mut batches = 0.0;
    for s in (0..n).step_by(batch) {
        let mut t = Tape::new();
        let x = t.constant(images.slice_rows(s, (s + batch).min(n)));
        let f = model
            .forward(&mut t, x, condense::backbone::Mode::Eval, false)
            .unwrap();
        let stats: Vec<[Vec<f64>; 4]> = f
            .conv_taps
            .iter()
            .map(|&v| brute_stats(t.value(v), n_p))
            .collect();
        if sums.is_empty() {
            sums = stats;
        } else {
            for (a, b) in sums.iter_mut().zip(&stats) {
                for k in 0..4 {
                    for (x, y) in a[k].iter_mut().zip(&b[k]) {
                        *x += y;
                    }
                }
            }
        }
        batches += 1.0;
    }
    for s in &mut sums {
        for fam in s.iter_mut() {
            fam.iter_mut().for_each(|v| *v /= batches);
        }
    }
    sums
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct-summation convolution; `w: [o, c/groups, k, k]`.
pub fn naive_conv(x: &Array, w: &Array, stride: usize, pad: usize, groups: usize) -> Array {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let og = o / groups;
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oc in 0..o {
            let g = oc / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ic in 0..cg {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + g * cg + ic) * h + iy as usize) * wd + ix as usize];
                                s += xv * w.data()[((oc * cg + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    Array::new(vec![b, o, ho, wo], out).unwrap()
}

/// `−Σ p·log softmax(Σ(X))` with `p` frozen at `x0`: the function whose
/// gradient the stop-gradient densification loss prescribes.
pub fn dd_frozen(x0: &Array, labels: &[usize], tau: f64) -> impl Fn(&mut Tape, &[Var]) -> condense::Result<Var> {
    let classes = labels.iter().max().unwrap() + 1;
    let groups: Vec<Vec<usize>> = (0..classes)
        .map(|y| (0..labels.len()).filter(|&i| labels[i] == y).collect())
        .filter(|g: &Vec<usize>| g.len() >= 2)
        .collect();
    let spectrum = |t: &mut Tape, x: Var, idx: &[usize]| -> condense::Result<Var> {
        let xs = t.select_rows(x, idx)?;
        let f = t.flatten(xs)?;
        let ft = t.transpose(f)?;
        let g = t.matmul(f, ft)?;
        t.eigvals_sym(g)
    };
    let mut t = Tape::new();
    let x = t.constant(x0.clone());
    let frozen: Vec<Array> = groups
        .iter()
        .map(|idx| {
            let s = spectrum(&mut t, x, idx).unwrap();
            let s = t.scale(s, 1.0 / tau);
            let p = t.softmax(s).unwrap();
            t.value(p).clone()
        })
        .collect();
    move |t: &mut Tape, v: &[Var]| {
        let mut acc = t.constant(Array::scalar(0.0));
        for (idx, p) in groups.iter().zip(&frozen) {
            let s = spectrum(t, v[0], idx)?;
            let lq = t.log_softmax(s)?;
            let p = t.constant(p.clone());
            let prod = t.mul(p, lq)?;
            let ce = t.sum(prod);
            let neg = t.scale(ce, -1.0);
            acc = t.add(acc, neg)?;
        }
        Ok(acc)
    }
}
