//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use gradleak::model::soft_cross_entropy;
use gradleak::tensor::{finite_difference, grad, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

type OpFn = fn(&[Var]) -> Result<Var, TensorError>;
type InputFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

/// One differentiable primitive with a generator for valid random inputs.
pub struct Primitive {
    pub name: &'static str,
    pub inputs: InputFn,
    pub op: OpFn,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn pair(rng: &mut ChaCha8Rng, a: &[usize], b: &[usize]) -> Vec<Tensor> {
    vec![uniform(rng, a, -1.0, 1.0), uniform(rng, b, -1.0, 1.0)]
}

fn one(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<Tensor> {
    vec![uniform(rng, shape, -1.0, 1.0)]
}

pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive { name: "add", inputs: |r| pair(r, &[3, 4], &[3, 4]), op: |v| v[0].add(&v[1]) },
        Primitive { name: "add_broadcast", inputs: |r| pair(r, &[3, 4], &[1, 4]), op: |v| v[0].add(&v[1]) },
        Primitive { name: "sub", inputs: |r| pair(r, &[3, 4], &[3, 4]), op: |v| v[0].sub(&v[1]) },
        Primitive { name: "mul", inputs: |r| pair(r, &[3, 4], &[3, 4]), op: |v| v[0].mul(&v[1]) },
        Primitive {
            name: "div",
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), signed(r, &[3, 4], 0.5, 2.0)],
            op: |v| v[0].div(&v[1]),
        },
        Primitive { name: "neg", inputs: |r| one(r, &[5]), op: |v| v[0].neg() },
        Primitive { name: "add_scalar", inputs: |r| one(r, &[5]), op: |v| v[0].add_scalar(0.7) },
        Primitive { name: "mul_scalar", inputs: |r| one(r, &[5]), op: |v| v[0].mul_scalar(-1.3) },
        Primitive { name: "pow_int", inputs: |r| one(r, &[5]), op: |v| v[0].pow_scalar(3.0) },
        Primitive {
            name: "pow_real",
            inputs: |r| vec![uniform(r, &[5], 0.5, 2.0)],
            op: |v| v[0].pow_scalar(2.5),
        },
        Primitive { name: "square", inputs: |r| one(r, &[5]), op: |v| v[0].square() },
        Primitive { name: "exp", inputs: |r| vec![uniform(r, &[5], -2.0, 2.0)], op: |v| v[0].exp() },
        Primitive { name: "log", inputs: |r| vec![uniform(r, &[5], 0.5, 3.0)], op: |v| v[0].log() },
        Primitive { name: "sigmoid", inputs: |r| vec![uniform(r, &[5], -4.0, 4.0)], op: |v| v[0].sigmoid() },
        Primitive { name: "gelu", inputs: |r| vec![uniform(r, &[5], -3.0, 3.0)], op: |v| v[0].gelu() },
        Primitive { name: "matmul", inputs: |r| pair(r, &[3, 4], &[4, 2]), op: |v| v[0].matmul(&v[1]) },
        Primitive {
            name: "matmul_batched",
            inputs: |r| pair(r, &[2, 3, 4], &[2, 4, 5]),
            op: |v| v[0].matmul(&v[1]),
        },
        Primitive { name: "transpose", inputs: |r| one(r, &[3, 4]), op: |v| v[0].transpose() },
        Primitive { name: "permute", inputs: |r| one(r, &[2, 3, 4]), op: |v| v[0].permute(&[2, 0, 1]) },
        Primitive { name: "reshape", inputs: |r| one(r, &[3, 4]), op: |v| v[0].reshape(&[2, 6]) },
        Primitive { name: "broadcast_to", inputs: |r| one(r, &[1, 4]), op: |v| v[0].broadcast_to(&[3, 4]) },
        Primitive { name: "sum_to", inputs: |r| one(r, &[3, 4]), op: |v| v[0].sum_to(&[1, 4]) },
        Primitive { name: "sum", inputs: |r| one(r, &[3, 4]), op: |v| v[0].sum() },
        Primitive { name: "sum_axis", inputs: |r| one(r, &[2, 3, 4]), op: |v| v[0].sum_axis(1) },
        Primitive { name: "mean", inputs: |r| one(r, &[3, 4]), op: |v| v[0].mean() },
        Primitive { name: "mean_axis", inputs: |r| one(r, &[3, 4]), op: |v| v[0].mean_axis(0) },
        Primitive { name: "variance", inputs: |r| one(r, &[3, 4]), op: |v| v[0].variance() },
        Primitive { name: "slice", inputs: |r| one(r, &[3, 4]), op: |v| v[0].slice(1, 1, 3) },
        Primitive { name: "pad", inputs: |r| one(r, &[3, 4]), op: |v| v[0].pad(1, 1, 2) },
        Primitive {
            name: "concat",
            inputs: |r| pair(r, &[2, 3], &[1, 3]),
            op: |v| Var::concat(&[v[0].clone(), v[1].clone()], 0),
        },
        Primitive {
            // keeps clear of the kinks at ±0.5
            name: "clamp",
            inputs: |r| {
                vec![Tensor::from_fn([12], |_| {
                    let m = if r.random_bool(0.5) {
                        r.random_range(0.0..0.49)
                    } else {
                        r.random_range(0.51..1.5)
                    };
                    if r.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })]
            },
            op: |v| v[0].clamp(-0.5, 0.5),
        },
        Primitive {
            name: "conv2d",
            inputs: |r| pair(r, &[2, 2, 5, 5], &[3, 2, 3, 3]),
            op: |v| v[0].conv2d(&v[1], 1, 1),
        },
        Primitive {
            name: "conv2d_strided",
            inputs: |r| pair(r, &[1, 2, 6, 6], &[2, 2, 3, 3]),
            op: |v| v[0].conv2d(&v[1], 2, 0),
        },
        Primitive { name: "softmax", inputs: |r| vec![uniform(r, &[3, 5], -2.0, 2.0)], op: |v| v[0].softmax() },
        Primitive {
            name: "log_softmax",
            inputs: |r| vec![uniform(r, &[3, 5], -2.0, 2.0)],
            op: |v| v[0].log_softmax(),
        },
    ]
}

/// Elementwise agreement: absolute error below the floor, or relative error
/// below the tolerance.
pub fn compare(autodiff: &Tensor, fd: &Tensor) -> Result<(), String> {
    if autodiff.shape() != fd.shape() {
        return Err(format!("shape {:?} vs {:?}", autodiff.shape(), fd.shape()));
    }
    for (i, (&a, &f)) in autodiff.data().iter().zip(fd.data()).enumerate() {
        let err = (a - f).abs();
        if err >= ABS_FLOOR && err / a.abs().max(f.abs()) >= REL_TOL {
            return Err(format!("entry {i}: autodiff {a:.10e}, finite difference {f:.10e}"));
        }
    }
    Ok(())
}

fn build(op: OpFn, xs: &[Tensor]) -> (Vec<Var>, Var) {
    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = op(&vars).expect("primitive applies to generated inputs");
    (vars, out)
}

fn project(out: &Var, r: &Tensor) -> Var {
    out.mul(&out.tape().constant(r.clone())).unwrap().sum().unwrap()
}

/// First-order check of one primitive on one random case.
pub fn check_primitive(p: &Primitive, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (p.inputs)(&mut rng);
    let (vars, out) = build(p.op, &inputs);
    let r = uniform(&mut rng, out.shape(), -1.0, 1.0);
    let refs: Vec<&Var> = vars.iter().collect();
    let grads = grad(&project(&out, &r), &refs, false).map_err(|e| e.to_string())?;
    for (i, g) in grads.iter().enumerate() {
        let fd = finite_difference(
            |point| {
                let mut xs = inputs.clone();
                xs[i] = point.clone();
                project(&build(p.op, &xs).1, &r).item()
            },
            &inputs[i],
            FD_STEP,
        );
        compare(g.value(), &fd).map_err(|e| format!("input {i}: {e}"))?;
    }
    Ok(())
}

/// Network shapes for the second-order check.
#[derive(Clone, Copy, Debug)]
pub enum TwoLayer {
    /// sigmoid(x W1) W2 with soft-label cross-entropy.
    Dense,
    /// gelu(conv(x, K)) flattened into a linear head, soft-label cross-entropy.
    Conv,
}

struct NetCase {
    x: Tensor,
    w1: Tensor,
    w2: Tensor,
    y: Tensor,
    v1: Tensor,
    v2: Tensor,
}

impl TwoLayer {
    fn case(self, rng: &mut ChaCha8Rng) -> NetCase {
        let (xs, w1s, w2s, b, c): (Vec<usize>, Vec<usize>, Vec<usize>, usize, usize) = match self {
            TwoLayer::Dense => (vec![2, 4], vec![4, 5], vec![5, 3], 2, 3),
            TwoLayer::Conv => (vec![1, 1, 4, 4], vec![2, 1, 3, 3], vec![32, 3], 1, 3),
        };
        NetCase {
            x: uniform(rng, &xs, -1.0, 1.0),
            w1: uniform(rng, &w1s, -1.0, 1.0),
            w2: uniform(rng, &w2s, -1.0, 1.0),
            y: uniform(rng, &[b, c], -1.0, 1.0),
            v1: uniform(rng, &w1s, -1.0, 1.0),
            v2: uniform(rng, &w2s, -1.0, 1.0),
        }
    }

    fn loss(self, x: &Var, w1: &Var, w2: &Var, y: &Var) -> Var {
        let logits = match self {
            TwoLayer::Dense => x.matmul(w1).unwrap().sigmoid().unwrap().matmul(w2).unwrap(),
            TwoLayer::Conv => {
                let h = x.conv2d(w1, 1, 1).unwrap().gelu().unwrap();
                let n = x.shape()[0];
                h.reshape(&[n, 32]).unwrap().matmul(w2).unwrap()
            }
        };
        soft_cross_entropy(&logits, y).unwrap()
    }

    /// `⟨∇_W L, V⟩` with the gradient kept differentiable, plus the leaves.
    fn gradient_probe(self, c: &NetCase, x: &Tensor, w1: &Tensor, create_graph: bool) -> (Var, Var, Var) {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let w1v = tape.leaf(w1.clone());
        let w2v = tape.leaf(c.w2.clone());
        let yv = tape.constant(c.y.clone());
        let l = self.loss(&xv, &w1v, &w2v, &yv);
        let g = grad(&l, &[&w1v, &w2v], create_graph).unwrap();
        let s = g[0]
            .mul(&tape.constant(c.v1.clone()))
            .unwrap()
            .sum()
            .unwrap()
            .add(&g[1].mul(&tape.constant(c.v2.clone())).unwrap().sum().unwrap())
            .unwrap();
        (s, xv, w1v)
    }
}

/// Grad-of-grad check: differentiates `⟨∇_W L, V⟩` with respect to the input
/// and the first-layer weights, against finite differences of the
/// first-order gradient.
pub fn check_second_order(net: TwoLayer, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = net.case(&mut rng);
    let (s, xv, w1v) = net.gradient_probe(&c, &c.x, &c.w1, true);
    let hv = grad(&s, &[&xv, &w1v], false).map_err(|e| e.to_string())?;
    let fd_x = finite_difference(|p| net.gradient_probe(&c, p, &c.w1, false).0.item(), &c.x, FD_STEP);
    compare(hv[0].value(), &fd_x).map_err(|e| format!("d/dx: {e}"))?;
    let fd_w = finite_difference(|p| net.gradient_probe(&c, &c.x, p, false).0.item(), &c.w1, FD_STEP);
    compare(hv[1].value(), &fd_w).map_err(|e| format!("d/dW1: {e}"))
}
