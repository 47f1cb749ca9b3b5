//! Central finite differences against analytic gradients. The numeric side
//! runs on the f64 reference implementation in `oracle`.

use super::oracle::{self, Params};
use super::{pick, randn, randn_tensor, rel_err, rng, tiny_config, to_f64};
use spikekit::architecture::{ResidualMode, Spikformer, StemConfig};
use spikekit::neuron::{Lif, LifConfig, ResetMode};
use spikekit::nn::{Forward, ParamStore, SpikeMode};
use spikekit::tensor::{BnLayout, BnStats, DenseTensor, Var};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-3;
const COORDS: usize = 64;
/// Smallest gradient, relative to its tensor's RMS, sampled for the
/// network-level relative-error check.
const SIGNIFICANT: f64 = 0.1;

type TapeFn = Box<dyn Fn(&mut Forward<'_>, &[Var]) -> Var>;
type OracleFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Vec<f32>)>,
    run: TapeFn,
    oracle: OracleFn,
}

fn case(name: &'static str, inputs: Vec<(Vec<usize>, Vec<f32>)>, run: TapeFn, oracle: OracleFn) -> Case {
    Case { name, inputs, run, oracle }
}

/// Loss `sum(w * f(inputs))` with fixed random `w`; returns the worst
/// relative error over the checked coordinates and how many were checked.
fn check(c: &Case, seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut fx = Forward::new(&mut store, true).with_mode(SpikeMode::Relaxed);
    let leaves: Vec<Var> = c
        .inputs
        .iter()
        .map(|(s, v)| fx.tape.leaf(DenseTensor::new(s.clone(), v.clone()).unwrap(), true))
        .collect();
    let out = (c.run)(&mut fx, &leaves);
    let out_val = fx.value(out).clone();
    let w = randn(&mut r, out_val.numel());
    let wv = fx.input(DenseTensor::new(out_val.shape().to_vec(), w.clone()).unwrap());
    let prod = fx.tape.mul(out, wv).unwrap();
    let loss = fx.tape.sum(prod);
    let grads = fx.tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = c.inputs.iter().map(|(_, v)| to_f64(v)).collect();
    let reference = (c.oracle)(&base);
    assert_eq!(reference.len(), out_val.numel(), "{}: oracle output size", c.name);
    for (i, (&a, &b)) in out_val.data().iter().zip(&reference).enumerate() {
        assert!((a as f64 - b).abs() <= 1e-4 * b.abs().max(1.0), "{}: forward mismatch at {i}: {a} vs {b}", c.name);
    }
    let w64 = to_f64(&w);
    let objective = |xs: &[Vec<f64>]| -> f64 { (c.oracle)(xs).iter().zip(&w64).map(|(o, w)| o * w).sum() };

    let sizes: Vec<usize> = c.inputs.iter().map(|(_, v)| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let coords = pick(&mut r, total, COORDS);
    let mut worst = 0.0f64;
    for &flat in &coords {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let mut xs = base.clone();
        xs[which][idx] = base[which][idx] + EPS;
        let up = objective(&xs);
        xs[which][idx] = base[which][idx] - EPS;
        let down = objective(&xs);
        let numeric = (up - down) / (2.0 * EPS);
        let analytic = grads.get(leaves[which]).map_or(0.0, |g| g[idx] as f64);
        let e = rel_err(analytic, numeric);
        assert!(e <= TOL, "{}: input {which}[{idx}] analytic {analytic} numeric {numeric} rel {e}", c.name);
        worst = worst.max(e);
    }
    (worst, coords.len())
}

fn input(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f32>) {
    (shape.to_vec(), randn(r, shape.iter().product()))
}

fn shifted(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize], shift: f32, scale: f32) -> (Vec<usize>, Vec<f32>) {
    let (s, v) = input(r, shape);
    (s, v.into_iter().map(|x| shift + scale * x).collect())
}

fn elementwise_cases(r: &mut rand_chacha::ChaCha8Rng) -> Vec<Case> {
    let s = [4, 15];
    vec![
        case(
            "add",
            vec![input(r, &s), input(r, &s)],
            Box::new(|fx, v| fx.tape.add(v[0], v[1]).unwrap()),
            Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
        ),
        case(
            "sub",
            vec![input(r, &s), input(r, &s)],
            Box::new(|fx, v| fx.tape.sub(v[0], v[1]).unwrap()),
            Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()),
        ),
        case(
            "mul",
            vec![input(r, &s), input(r, &s)],
            Box::new(|fx, v| fx.tape.mul(v[0], v[1]).unwrap()),
            Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
        ),
        case(
            "scale",
            vec![input(r, &s)],
            Box::new(|fx, v| fx.tape.scale(v[0], 0.37)),
            Box::new(|x| x[0].iter().map(|a| a * 0.37f32 as f64).collect()),
        ),
        case(
            "mul_scalar",
            vec![input(r, &s), input(r, &[1])],
            Box::new(|fx, v| fx.tape.mul_scalar(v[0], v[1]).unwrap()),
            Box::new(|x| x[0].iter().map(|a| a * x[1][0]).collect()),
        ),
        case(
            "add_broadcast",
            vec![input(r, &s), input(r, &[15])],
            Box::new(|fx, v| fx.tape.add_broadcast(v[0], v[1]).unwrap()),
            Box::new(|x| x[0].iter().enumerate().map(|(i, a)| a + x[1][i % 15]).collect()),
        ),
        case(
            "iand",
            vec![input(r, &s), input(r, &s)],
            Box::new(|fx, v| fx.tape.iand(v[0], v[1]).unwrap()),
            Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * (1.0 - b)).collect()),
        ),
        case(
            "relu",
            vec![input(r, &s)],
            Box::new(|fx, v| fx.tape.relu(v[0])),
            Box::new(|x| x[0].iter().map(|a| a.max(0.0)).collect()),
        ),
        case(
            "leaky_relu",
            vec![input(r, &s)],
            Box::new(|fx, v| fx.tape.leaky_relu(v[0], 0.01)),
            Box::new(|x| x[0].iter().map(|&a| if a > 0.0 { a } else { 0.01f32 as f64 * a }).collect()),
        ),
        case(
            "gelu",
            vec![input(r, &s)],
            Box::new(|fx, v| fx.tape.gelu(v[0])),
            Box::new(|x| x[0].iter().map(|&a| oracle::gelu_tanh(a)).collect()),
        ),
        case(
            "sum",
            vec![input(r, &s)],
            Box::new(|fx, v| fx.tape.sum(v[0])),
            Box::new(|x| vec![x[0].iter().sum()]),
        ),
    ]
}

fn matrix_cases(r: &mut rand_chacha::ChaCha8Rng) -> Vec<Case> {
    vec![
        case(
            "linear",
            vec![input(r, &[2, 3, 10]), input(r, &[10, 4]), input(r, &[4])],
            Box::new(|fx, v| fx.tape.linear(v[0], v[1], Some(v[2])).unwrap()),
            Box::new(|x| oracle::linear(&x[0], 10, &x[1], 4, Some(&x[2]))),
        ),
        case(
            "matmul",
            vec![input(r, &[6, 10]), input(r, &[10, 5])],
            Box::new(|fx, v| fx.tape.matmul(v[0], v[1]).unwrap()),
            Box::new(|x| oracle::linear(&x[0], 10, &x[1], 5, None)),
        ),
        case(
            "batched_matmul",
            vec![input(r, &[3, 4, 5]), input(r, &[3, 5, 6])],
            Box::new(|fx, v| fx.tape.batched_matmul(v[0], v[1], false).unwrap()),
            Box::new(|x| oracle::bmm(&x[0], &x[1], 3, 4, 5, 6, false)),
        ),
        case(
            "batched_matmul_transposed",
            vec![input(r, &[3, 4, 5]), input(r, &[3, 6, 5])],
            Box::new(|fx, v| fx.tape.batched_matmul(v[0], v[1], true).unwrap()),
            Box::new(|x| oracle::bmm(&x[0], &x[1], 3, 4, 5, 6, true)),
        ),
        case(
            "reshape",
            vec![input(r, &[3, 4, 5])],
            Box::new(|fx, v| {
                let y = fx.tape.reshape(v[0], &[12, 5]).unwrap();
                let w = fx.input(DenseTensor::from_fn([12, 5], |i| 1.0 + i as f32 / 60.0));
                fx.tape.mul(y, w).unwrap()
            }),
            Box::new(|x| x[0].iter().enumerate().map(|(i, a)| a * (1.0 + i as f32 / 60.0) as f64).collect()),
        ),
        case(
            "permute",
            vec![input(r, &[3, 4, 5])],
            Box::new(|fx, v| fx.tape.permute(v[0], &[2, 0, 1]).unwrap()),
            Box::new(|x| oracle::permute(&x[0], &[3, 4, 5], &[2, 0, 1])),
        ),
        case(
            "softmax",
            vec![input(r, &[6, 10])],
            Box::new(|fx, v| fx.tape.softmax(v[0])),
            Box::new(|x| oracle::softmax_rows(&x[0], 10)),
        ),
        case(
            "layer_norm",
            vec![input(r, &[6, 10]), shifted(r, &[10], 1.0, 0.3), input(r, &[10])],
            Box::new(|fx, v| fx.tape.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()),
            Box::new(|x| oracle::layer_norm(&x[0], 10, &x[1], &x[2], 1e-6)),
        ),
        case(
            "mean_axis",
            vec![input(r, &[3, 4, 5])],
            Box::new(|fx, v| fx.tape.mean_axis(v[0], 1).unwrap()),
            Box::new(|x| {
                let mut out = vec![0.0; 15];
                for o in 0..3 {
                    for a in 0..4 {
                        for i in 0..5 {
                            out[o * 5 + i] += x[0][(o * 4 + a) * 5 + i] / 4.0;
                        }
                    }
                }
                out
            }),
        ),
        case(
            "gather_rows",
            vec![input(r, &[2, 5, 6])],
            Box::new(|fx, v| fx.tape.gather_rows(v[0], &[vec![0, 3], vec![4, 1]]).unwrap()),
            Box::new(|x| {
                let idx = [[0usize, 3], [4, 1]];
                let mut out = Vec::new();
                for (b, rows) in idx.iter().enumerate() {
                    for &row in rows {
                        out.extend_from_slice(&x[0][(b * 5 + row) * 6..(b * 5 + row + 1) * 6]);
                    }
                }
                out
            }),
        ),
        case(
            "scatter_rows",
            vec![input(r, &[2, 5, 6]), input(r, &[2, 2, 6])],
            Box::new(|fx, v| fx.tape.scatter_rows(v[0], v[1], &[vec![2, 0], vec![1, 4]]).unwrap()),
            Box::new(|x| {
                let idx = [[2usize, 0], [1, 4]];
                let mut out = x[0].clone();
                for (b, rows) in idx.iter().enumerate() {
                    for (j, &row) in rows.iter().enumerate() {
                        out[(b * 5 + row) * 6..(b * 5 + row + 1) * 6].copy_from_slice(&x[1][(b * 2 + j) * 6..(b * 2 + j + 1) * 6]);
                    }
                }
                out
            }),
        ),
        case(
            "cross_entropy",
            vec![input(r, &[8, 7])],
            Box::new(|fx, v| fx.tape.cross_entropy(v[0], &[0, 6, 3, 3, 1, 2, 5, 4]).unwrap()),
            Box::new(|x| {
                let labels = [0usize, 6, 3, 3, 1, 2, 5, 4];
                let p = oracle::softmax_rows(&x[0], 7);
                vec![labels.iter().enumerate().map(|(i, &l)| -p[i * 7 + l].ln()).sum::<f64>() / 8.0]
            }),
        ),
        case(
            "masked_mse",
            vec![input(r, &[2, 5, 6])],
            Box::new(|fx, v| {
                let target = DenseTensor::from_fn([2, 5, 6], |i| ((i * 7) % 11) as f32 / 5.0 - 1.0);
                fx.tape.masked_mse(v[0], &target, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap()
            }),
            Box::new(|x| {
                let w = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
                let mut total = 0.0;
                for (row, &wr) in w.iter().enumerate() {
                    for j in 0..6 {
                        let i = row * 6 + j;
                        let t = ((i * 7) % 11) as f32 / 5.0 - 1.0;
                        total += wr * (x[0][i] - t as f64).powi(2) / 6.0;
                    }
                }
                vec![total / 6.0]
            }),
        ),
    ]
}

fn spatial_cases(r: &mut rand_chacha::ChaCha8Rng) -> Vec<Case> {
    let mask: Vec<f32> = (0..2 * 9).map(|i| ((i * 5) % 3 != 0) as u8 as f32).collect();
    let mask64 = to_f64(&mask);
    vec![
        case(
            "conv2d",
            vec![input(r, &[2, 3, 5, 5]), input(r, &[4, 3, 3, 3]), input(r, &[4])],
            Box::new(|fx, v| fx.tape.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()),
            Box::new(|x| {
                let (y, oh, ow) = oracle::conv2d(&x[0], 2, 3, 5, 5, &x[1], 4, 3, 1, 1);
                y.iter().enumerate().map(|(i, v)| v + x[2][i / (oh * ow) % 4]).collect()
            }),
        ),
        case(
            "conv2d_stride2",
            vec![input(r, &[2, 3, 6, 6]), input(r, &[4, 3, 2, 2])],
            Box::new(|fx, v| fx.tape.conv2d(v[0], v[1], None, 2, 0).unwrap()),
            Box::new(|x| oracle::conv2d(&x[0], 2, 3, 6, 6, &x[1], 4, 2, 2, 0).0),
        ),
        case(
            "max_pool2d",
            vec![input(r, &[2, 3, 4, 4])],
            Box::new(|fx, v| fx.tape.max_pool2d(v[0], 2, 2).unwrap()),
            Box::new(|x| oracle::max_pool2(&x[0], 2, 3, 4, 4)),
        ),
        case(
            "batch_norm",
            vec![input(r, &[4, 3, 5]), shifted(r, &[3], 1.0, 0.3), input(r, &[3])],
            Box::new(|fx, v| {
                let layout = BnLayout { batch: 4, channels: 3, spatial: 5 };
                fx.tape.batch_norm(v[0], v[1], v[2], layout, BnStats::Batch, 1e-5, None).unwrap().0
            }),
            Box::new(|x| oracle::batch_norm(&x[0], 4, 3, 5, &x[1], &x[2], 1e-5, None)),
        ),
        case(
            "batch_norm_masked",
            vec![input(r, &[2, 4, 9]), shifted(r, &[4], 1.0, 0.3), input(r, &[4])],
            Box::new(move |fx, v| {
                let layout = BnLayout { batch: 2, channels: 4, spatial: 9 };
                fx.tape.batch_norm(v[0], v[1], v[2], layout, BnStats::Batch, 1e-5, Some(&mask)).unwrap().0
            }),
            Box::new(move |x| oracle::batch_norm(&x[0], 2, 4, 9, &x[1], &x[2], 1e-5, Some(&mask64))),
        ),
        case(
            "batch_norm_running",
            vec![input(r, &[4, 3, 5]), shifted(r, &[3], 1.0, 0.3), input(r, &[3])],
            Box::new(|fx, v| {
                let layout = BnLayout { batch: 4, channels: 3, spatial: 5 };
                let stats = BnStats::Fixed { mean: &[0.1, -0.2, 0.3], var: &[0.5, 1.5, 2.0] };
                fx.tape.batch_norm(v[0], v[1], v[2], layout, stats, 1e-5, None).unwrap().0
            }),
            Box::new(|x| {
                let (m, var) = ([0.1f32, -0.2, 0.3].map(f64::from), [0.5f32, 1.5, 2.0].map(f64::from));
                oracle::batch_norm_fixed(&x[0], 4, 3, 5, &x[1], &x[2], &m, &var, 1e-5f32 as f64)
            }),
        ),
    ]
}

fn neuron_cases(r: &mut rand_chacha::ChaCha8Rng) -> Vec<Case> {
    let hard = LifConfig { detach_reset: false, ..LifConfig::default() };
    let soft = LifConfig { reset_mode: ResetMode::Soft, ..hard };
    let mut out = Vec::new();
    for (name, cfg) in [("lif_hard_reset", hard), ("lif_soft_reset", soft)] {
        out.push(case(
            name,
            vec![shifted(r, &[4, 3, 6], 1.0, 1.0)],
            Box::new(move |fx, v| Lif::new("n", cfg).forward(fx, v[0], 4).unwrap()),
            Box::new(move |x| oracle::lif_relaxed(&x[0], 4, &cfg)),
        ));
    }
    out
}

/// Checks every differentiable primitive; panics on the first failure and
/// returns `(name, coordinates, worst relative error)` per primitive.
pub fn check_primitives() -> Vec<(&'static str, usize, f64)> {
    let mut r = rng(11);
    let mut cases = elementwise_cases(&mut r);
    cases.extend(matrix_cases(&mut r));
    cases.extend(spatial_cases(&mut r));
    cases.extend(neuron_cases(&mut r));
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (worst, n) = check(c, 100 + i as u64);
            assert!(n >= 50, "{}: only {n} coordinates", c.name);
            (c.name, n, worst)
        })
        .collect()
}

/// Linear biases directly followed by batch norm have identically zero
/// gradient; they are checked separately.
fn feeds_batch_norm(name: &str) -> bool {
    let bn_fed = [".attn.q.bias", ".attn.k.bias", ".attn.v.bias", ".attn.proj.bias", ".mlp.fc1.bias", ".mlp.fc2.bias"];
    bn_fed.iter().any(|s| name.ends_with(s))
}

pub struct NetCase {
    pub stem: StemConfig,
    pub residual: ResidualMode,
    pub learnable_scale: bool,
    pub seed: u64,
}

fn rms(g: &[f32]) -> f64 {
    (g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / g.len() as f64).sqrt()
}

struct Coord {
    name: String,
    analytic: f64,
    numeric: f64,
    /// RMS analytic gradient of the coordinate's tensor.
    scale: f64,
    significant: bool,
}

fn network_grads(c: &NetCase) -> Vec<Coord> {
    let mut cfg = tiny_config(c.stem.clone());
    cfg.residual = c.residual;
    cfg.learnable_scale = c.learnable_scale;
    cfg.lif.detach_reset = false;
    let batch = 2;
    let mut model = Spikformer::new(cfg.clone(), c.seed).unwrap();
    let mut r = rng(c.seed + 1);
    // Unit-variance fan-in scaling instead of the small default init keeps
    // every layer's gradient well above rounding noise.
    for id in model.store.ids().collect::<Vec<_>>() {
        let e = model.store.entry(id);
        if e.trainable && e.value.rank() >= 2 {
            let n = e.value.numel();
            let fan_in = if e.value.rank() == 2 { e.value.shape()[0] } else { n / e.value.shape()[0] };
            let noise = randn(&mut r, n);
            let s = (fan_in as f32).sqrt();
            model.store.value_mut(id).data_mut().iter_mut().zip(noise).for_each(|(w, z)| *w = z / s);
        }
    }
    let images = randn_tensor(&mut r, &[batch, 3, 8, 8]);
    let w = randn(&mut r, batch * cfg.num_classes);

    let Spikformer { net, store } = &mut model;
    store.zero_grads();
    let logits = {
        let mut fx = Forward::new(store, true).with_mode(SpikeMode::Relaxed);
        let y = net.logits(&mut fx, &images, cfg.time_steps).unwrap();
        let logits = fx.value(y).clone();
        let wv = fx.input(DenseTensor::new([batch, cfg.num_classes], w.clone()).unwrap());
        let p = fx.tape.mul(y, wv).unwrap();
        let l = fx.tape.sum(p);
        fx.backward(l).unwrap();
        logits
    };

    let params: Params = oracle::params_of(store);
    let img64 = to_f64(images.data());
    let reference = oracle::network_logits(&cfg, &params, &img64, batch);
    for (a, b) in logits.data().iter().zip(&reference) {
        assert!((*a as f64 - b).abs() < 1e-4, "forward mismatch: {a} vs {b}");
    }
    let w64 = to_f64(&w);
    let objective = |p: &Params| -> f64 {
        oracle::network_logits(&cfg, p, &img64, batch).iter().zip(&w64).map(|(o, w)| o * w).sum()
    };

    // Relative error is only meaningful well above f32 round-off; entries far
    // below their tensor's typical size get an absolute check instead.
    let (mut coords, mut faint) = (Vec::new(), Vec::new());
    for (id, e) in store.entries() {
        if !e.trainable {
            continue;
        }
        let g = store.grad(id).unwrap();
        if feeds_batch_norm(&e.name) {
            let weight = store.id(&e.name.replace(".bias", ".weight")).and_then(|w| store.grad(w)).unwrap();
            let worst = g.iter().fold(0f64, |m, v| m.max((*v as f64).abs()));
            assert!(worst <= TOL * rms(weight), "{} should have zero gradient, max {worst}", e.name);
            continue;
        }
        let scale = rms(g);
        for (i, v) in g.iter().enumerate() {
            let significant = (*v as f64).abs() >= SIGNIFICANT * scale;
            let list = if significant { &mut coords } else { &mut faint };
            list.push((id, e.name.clone(), i, scale, significant));
        }
    }
    let chosen: Vec<_> = pick(&mut r, coords.len(), COORDS).into_iter().map(|k| coords[k].clone()).collect();
    let faint: Vec<_> = pick(&mut r, faint.len(), COORDS / 4).into_iter().map(|k| faint[k].clone()).collect();
    chosen
        .into_iter()
        .chain(faint)
        .map(|(id, name, i, scale, significant)| {
            let mut p = params.clone();
            let x0 = p[&name][i];
            p.get_mut(&name).unwrap()[i] = x0 + EPS;
            let up = objective(&p);
            p.get_mut(&name).unwrap()[i] = x0 - EPS;
            let down = objective(&p);
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = store.grad(id).map_or(0.0, |g| g[i] as f64);
            Coord { name: format!("{name}[{i}]"), analytic, numeric, scale, significant }
        })
        .collect()
}

/// Panics on the first failing coordinate; returns a one-line summary.
pub fn assert_network(c: NetCase) -> String {
    let rows = network_grads(&c);
    let (mut checked, mut worst, mut worst_abs) = (0, 0.0f64, 0.0f64);
    for Coord { name, analytic: a, numeric: n, scale, significant } in &rows {
        let abs = (a - n).abs() / scale;
        assert!(abs <= TOL, "{name}: analytic {a} numeric {n} differ by {abs} of the tensor RMS");
        worst_abs = worst_abs.max(abs);
        if *significant {
            let e = rel_err(*a, *n);
            assert!(e <= TOL, "{name}: analytic {a} numeric {n} rel {e}");
            worst = worst.max(e);
            checked += 1;
        }
    }
    assert!(checked >= 50, "only {checked} coordinates");
    format!(
        "stem={:?} residual={:?}: {checked} coords max_rel_err={worst:.2e}, {} coords max_err/rms={worst_abs:.2e}",
        c.stem.kind,
        c.residual,
        rows.len()
    )
}
