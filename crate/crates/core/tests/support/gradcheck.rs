#![allow(dead_code)]
//! Finite-difference gradient checks: f64 reference forwards, central
//! differences on them, compared with the tape's f32 gradients.

use lanepilot::models::{lstm_cell_step, ode_solve, LstmState, OdeConfig, Solver, TapeBackend};
use lanepilot::tensor::{GradTape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Coordinates checked per tensor; larger tensors are sampled.
pub const MAX_COORDS: usize = 256;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dense_ref(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter().enumerate().map(|(i, bi)| bi + (0..n).map(|j| w[i * n + j] * x[j]).sum::<f64>()).collect()
}

/// `x: [c,h,w]`, `k: [f,c,kh,kw]`, valid padding.
pub fn conv_ref(x: &[f64], xs: [usize; 3], k: &[f64], ks: [usize; 4], b: &[f64], stride: usize) -> Vec<f64> {
    let [c, h, w] = xs;
    let [f, _, kh, kw] = ks;
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0; f * oh * ow];
    for o in 0..f {
        for y in 0..oh {
            for z in 0..ow {
                let mut acc = b[o];
                for ch in 0..c {
                    for dy in 0..kh {
                        for dz in 0..kw {
                            acc += k[((o * c + ch) * kh + dy) * kw + dz] * x[(ch * h + y * stride + dy) * w + z * stride + dz];
                        }
                    }
                }
                out[(o * oh + y) * ow + z] = acc;
            }
        }
    }
    out
}

pub fn mse_ref(p: &[f64], t: &[f64]) -> f64 {
    p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64
}

/// Gate order i, f, g, o over `[x; h]`.
pub fn lstm_ref(x: &[f64], h: &[f64], c: &[f64], w: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let z = dense_ref(&xh, w, b);
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for k in 0..n {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[n + k]);
        let g = z[2 * n + k].tanh();
        let o = sigmoid(z[3 * n + k]);
        c2[k] = f * c[k] + i * g;
        h2[k] = o * c2[k].tanh();
    }
    (h2, c2)
}

pub fn field_ref(h: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    let a: Vec<f64> = dense_ref(h, w1, b1).into_iter().map(f64::tanh).collect();
    dense_ref(&a, w2, b2)
}

pub fn solve_ref(h0: &[f64], solver: Solver, steps: usize, field: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let dt = 1.0 / steps as f64;
    let axpy = |y: &[f64], a: f64, x: &[f64]| y.iter().zip(x).map(|(y, x)| y + a * x).collect::<Vec<f64>>();
    let mut h = h0.to_vec();
    for _ in 0..steps {
        h = match solver {
            Solver::Euler => axpy(&h, dt, &field(&h)),
            Solver::Rk4 => {
                let k1 = field(&h);
                let k2 = field(&axpy(&h, dt / 2.0, &k1));
                let k3 = field(&axpy(&h, dt / 2.0, &k2));
                let k4 = field(&axpy(&h, dt, &k3));
                (0..h.len()).map(|i| h[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
            }
        };
    }
    h
}

/// Random f32 tensor data, also returned widened to f64.
pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> (Vec<f32>, Vec<f64>) {
    let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    let w = v.iter().map(|&x| x as f64).collect();
    (v, w)
}

/// Norm-wise relative error `‖g − g_fd‖ / max(‖g_fd‖, 1e-6)` over the
/// checked coordinates of every parameter.
pub fn fd_error(params: &[Vec<f64>], grads: &[Vec<f32>], rng: &mut ChaCha8Rng, loss: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (p, g) in params.iter().zip(grads) {
        assert_eq!(p.len(), g.len(), "gradient length");
    }
    for k in 0..params.len() {
        let n = params[k].len();
        let coords: Vec<usize> = if n <= MAX_COORDS { (0..n).collect() } else { (0..MAX_COORDS).map(|_| rng.gen_range(0..n)).collect() };
        for i in coords {
            let x = params[k][i];
            work[k][i] = x + FD_STEP;
            let up = loss(&work);
            work[k][i] = x - FD_STEP;
            let down = loss(&work);
            work[k][i] = x;
            let fd = (up - down) / (2.0 * FD_STEP);
            diff += (grads[k][i] as f64 - fd).powi(2);
            norm += fd * fd;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-6)
}

fn grads_of(tape: &mut GradTape, loss: Var, vars: &[Var]) -> Vec<Vec<f32>> {
    let g = tape.backward(loss).unwrap();
    vars.iter().map(|&v| g.get(v).into_vec()).collect()
}

pub fn check_conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = rng.gen_range(1..=2);
    let (c, h, w, f, k) = (2, 7, 8, 3, 3);
    let (x32, x) = rand_vec(&mut rng, c * h * w, 1.0);
    let (k32, kk) = rand_vec(&mut rng, f * c * k * k, 0.5);
    let (b32, b) = rand_vec(&mut rng, f, 0.5);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let (t32, t) = rand_vec(&mut rng, f * oh * ow, 1.0);
    let mut tape = GradTape::new();
    let vx = tape.param(Tensor::new(vec![c, h, w], x32).unwrap());
    let vk = tape.param(Tensor::new(vec![f, c, k, k], k32).unwrap());
    let vb = tape.param(Tensor::from_vec(b32));
    let y = tape.conv2d(vx, vk, vb, stride).unwrap();
    let tt = tape.constant(Tensor::new(vec![f, oh, ow], t32).unwrap());
    let loss = tape.mse(y, tt).unwrap();
    let grads = grads_of(&mut tape, loss, &[vx, vk, vb]);
    fd_error(&[x, kk, b], &grads, &mut rng, |p| mse_ref(&conv_ref(&p[0], [c, h, w], &p[1], [f, c, k, k], &p[2], stride), &t))
}

pub fn check_dense(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (20, 15);
    let (x32, x) = rand_vec(&mut rng, n, 1.0);
    let (w32, w) = rand_vec(&mut rng, m * n, 0.5);
    let (b32, b) = rand_vec(&mut rng, m, 0.5);
    let (t32, t) = rand_vec(&mut rng, m, 1.0);
    let mut tape = GradTape::new();
    let vx = tape.param(Tensor::from_vec(x32));
    let vw = tape.param(Tensor::new(vec![m, n], w32).unwrap());
    let vb = tape.param(Tensor::from_vec(b32));
    let y = tape.dense(vx, vw, vb).unwrap();
    let tt = tape.constant(Tensor::from_vec(t32));
    let loss = tape.mse(y, tt).unwrap();
    let grads = grads_of(&mut tape, loss, &[vx, vw, vb]);
    fd_error(&[x, w, b], &grads, &mut rng, |p| mse_ref(&dense_ref(&p[0], &p[1], &p[2]), &t))
}

#[derive(Clone, Copy, Debug)]
pub enum Act {
    Relu,
    Tanh,
    Sigmoid,
}

pub fn check_activation(act: Act, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep ReLU inputs away from the kink, where the difference quotient straddles it.
    let x32: Vec<f32> = (0..64)
        .map(|_| {
            let v: f32 = rng.gen_range(0.01..3.0);
            if rng.gen_bool(0.5) { v } else { -v }
        })
        .collect();
    let x: Vec<f64> = x32.iter().map(|&v| v as f64).collect();
    let (t32, t) = rand_vec(&mut rng, 64, 1.0);
    let mut tape = GradTape::new();
    let vx = tape.param(Tensor::from_vec(x32));
    let y = match act {
        Act::Relu => tape.relu(vx),
        Act::Tanh => tape.tanh(vx),
        Act::Sigmoid => tape.sigmoid(vx),
    }
    .unwrap();
    let tt = tape.constant(Tensor::from_vec(t32));
    let loss = tape.mse(y, tt).unwrap();
    let grads = grads_of(&mut tape, loss, &[vx]);
    let f = move |v: f64| match act {
        Act::Relu => v.max(0.0),
        Act::Tanh => v.tanh(),
        Act::Sigmoid => sigmoid(v),
    };
    fd_error(&[x], &grads, &mut rng, |p| mse_ref(&p[0].iter().map(|&v| f(v)).collect::<Vec<_>>(), &t))
}

pub fn check_lstm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, nh) = (50, 64);
    let (x32, x) = rand_vec(&mut rng, nx, 1.0);
    let (h32, h) = rand_vec(&mut rng, nh, 0.8);
    let (c32, c) = rand_vec(&mut rng, nh, 1.0);
    let (w32, w) = rand_vec(&mut rng, 4 * nh * (nx + nh), 0.2);
    let (b32, b) = rand_vec(&mut rng, 4 * nh, 0.5);
    let (th32, th) = rand_vec(&mut rng, nh, 0.5);
    let (tc32, tc) = rand_vec(&mut rng, nh, 1.0);
    let mut tape = GradTape::new();
    let vx = tape.param(Tensor::from_vec(x32));
    let vh = tape.param(Tensor::from_vec(h32));
    let vc = tape.param(Tensor::from_vec(c32));
    let vw = tape.param(Tensor::new(vec![4 * nh, nx + nh], w32).unwrap());
    let vb = tape.param(Tensor::from_vec(b32));
    let out = lstm_cell_step(&mut tape, vw, vb, vx, LstmState { h: vh, c: vc }).unwrap();
    let a = tape.constant(Tensor::from_vec(th32));
    let z = tape.constant(Tensor::from_vec(tc32));
    let lh = tape.mse(out.h, a).unwrap();
    let lc = tape.mse(out.c, z).unwrap();
    let loss = tape.add(lh, lc).unwrap();
    let grads = grads_of(&mut tape, loss, &[vx, vh, vc, vw, vb]);
    fd_error(&[x, h, c, w, b], &grads, &mut rng, |p| {
        let (h2, c2) = lstm_ref(&p[0], &p[1], &p[2], &p[3], &p[4]);
        mse_ref(&h2, &th) + mse_ref(&c2, &tc)
    })
}

/// End-to-end through a fixed-step solve of the 64-d tanh field.
pub fn check_ode(solver: Solver, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 64;
    let (h32, h) = rand_vec(&mut rng, n, 1.0);
    let (w1_32, w1) = rand_vec(&mut rng, n * n, 0.15);
    let (b1_32, b1) = rand_vec(&mut rng, n, 0.2);
    let (w2_32, w2) = rand_vec(&mut rng, n * n, 0.15);
    let (b2_32, b2) = rand_vec(&mut rng, n, 0.2);
    let (t32, t) = rand_vec(&mut rng, n, 1.0);
    let cfg = OdeConfig::new(solver);
    let mut tape = GradTape::new();
    let vh = tape.param(Tensor::from_vec(h32));
    let vw1 = tape.param(Tensor::new(vec![n, n], w1_32).unwrap());
    let vb1 = tape.param(Tensor::from_vec(b1_32));
    let vw2 = tape.param(Tensor::new(vec![n, n], w2_32).unwrap());
    let vb2 = tape.param(Tensor::from_vec(b2_32));
    let mut backend = TapeBackend {
        tape: &mut tape,
        field: |t: &mut GradTape, h: Var, _| {
            let a = t.dense(h, vw1, vb1)?;
            let a = t.tanh(a)?;
            Ok(t.dense(a, vw2, vb2)?)
        },
    };
    let h1 = ode_solve(&mut backend, vh, &cfg).unwrap();
    let tt = tape.constant(Tensor::from_vec(t32));
    let loss = tape.mse(h1, tt).unwrap();
    let grads = grads_of(&mut tape, loss, &[vh, vw1, vb1, vw2, vb2]);
    fd_error(&[h, w1, b1, w2, b2], &grads, &mut rng, |p| {
        let out = solve_ref(&p[0], cfg.solver, cfg.steps, |s| field_ref(s, &p[1], &p[2], &p[3], &p[4]));
        mse_ref(&out, &t)
    })
}

/// (name, worst error over seeds) for every checked operation.
pub fn run_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let worst = |f: &dyn Fn(u64) -> f64| (0..seeds).map(f).fold(0.0f64, f64::max);
    vec![
        ("conv2d", worst(&check_conv)),
        ("dense", worst(&check_dense)),
        ("relu", worst(&|s| check_activation(Act::Relu, s))),
        ("tanh", worst(&|s| check_activation(Act::Tanh, s))),
        ("sigmoid", worst(&|s| check_activation(Act::Sigmoid, s))),
        ("lstm cell", worst(&check_lstm)),
        ("ode euler", worst(&|s| check_ode(Solver::Euler, s))),
        ("ode rk4", worst(&|s| check_ode(Solver::Rk4, s))),
    ]
}

/// Global error against e at each step count, and the fitted log-log
/// slope of error versus step size.
pub fn convergence_slope(solver: Solver, steps: &[usize]) -> (Vec<f64>, f64) {
    use lanepilot::models::VecBackend;
    let errs: Vec<f64> = steps
        .iter()
        .map(|&n| {
            let cfg = OdeConfig { solver, steps: n, t0: 0.0, t1: 1.0 };
            let h = ode_solve(&mut VecBackend(|h: &[f64], _| h.to_vec()), vec![1.0], &cfg).unwrap();
            (h[0] - std::f64::consts::E).abs()
        })
        .collect();
    let xs: Vec<f64> = steps.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / xs.len() as f64, ys.iter().sum::<f64>() / ys.len() as f64);
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (errs, num / den)
}
