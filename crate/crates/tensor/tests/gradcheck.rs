//! Finite-difference checks for every primitive, first and second order.

use metaux_tensor::check::{numerical_grad, rel_error};
use metaux_tensor::{grad, Result, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Gen = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;
type Func = dyn Fn(&[Tensor]) -> Result<Tensor>;

const SEEDS: u64 = 20;
const FIRST_ORDER_TOL: f64 = 1e-4;
const SECOND_ORDER_TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values kept away from zero, for kinks and poles.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::uniform(shape, 0.2, 1.5, r);
    let signs = Tensor::uniform(shape, -1.0, 1.0, r);
    let data = t.data().iter().zip(signs.data()).map(|(v, s)| if *s < 0.0 { -v } else { *v }).collect();
    Tensor::new(data, shape).unwrap()
}

/// Scalar probe `sum(w ⊙ f(inputs))` with a fixed random projection `w`.
fn probe(f: &Func, inputs: &[Tensor], w: &Tensor) -> Result<Tensor> {
    f(inputs)?.mul(w)?.sum()
}

fn check_first_order(name: &str, gen: &Gen, f: &Func) {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let inputs = gen(&mut r);
        let out_shape = f(&inputs).unwrap().shape().to_vec();
        let w = Tensor::randn(&out_shape, 1.0, &mut r);

        let tape = Tape::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = probe(f, &leaves, &w).unwrap();
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let analytic = grad(&loss, &refs, false).unwrap();

        for i in 0..inputs.len() {
            let numeric = numerical_grad(&inputs[i], 1e-5, |xi| {
                let mut xs = inputs.clone();
                xs[i] = xi.clone();
                Ok(probe(f, &xs, &w)?.item())
            })
            .unwrap();
            let err = rel_error(&analytic[i], &numeric);
            assert!(err < FIRST_ORDER_TOL, "{name}: input {i} seed {seed}: rel err {err:e}");
        }
    }
}

/// Hessian-vector products through `create_graph` against finite
/// differences of the first gradient.
fn check_second_order(name: &str, gen: &Gen, f: &Func) {
    for seed in 0..SEEDS / 4 {
        let mut r = rng(1000 + seed);
        let inputs = gen(&mut r);
        let out_shape = f(&inputs).unwrap().shape().to_vec();
        let w = Tensor::randn(&out_shape, 1.0, &mut r);
        // square the probe so second derivatives also exist for linear ops
        let loss_of = |xs: &[Tensor]| -> Result<Tensor> { probe(f, xs, &w)?.square() };

        let first_grads = |xs: &[Tensor]| -> Vec<Tensor> {
            let tape = Tape::new();
            let leaves: Vec<Tensor> = xs.iter().map(|t| tape.leaf(t)).collect();
            let loss = loss_of(&leaves).unwrap();
            let refs: Vec<&Tensor> = leaves.iter().collect();
            grad(&loss, &refs, false).unwrap()
        };

        let dirs: Vec<Tensor> = inputs.iter().map(|t| Tensor::randn(t.shape(), 1.0, &mut r)).collect();
        let tape = Tape::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = loss_of(&leaves).unwrap();
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let g = grad(&loss, &refs, true).unwrap();
        let mut gv = Tensor::scalar(0.0);
        for (gi, di) in g.iter().zip(&dirs) {
            gv = gv.add(&gi.mul(di).unwrap().sum().unwrap()).unwrap();
        }
        if !gv.is_tracked() {
            continue;
        }
        let hv = grad(&gv, &refs, false).unwrap();

        let h = 1e-5;
        let shifted = |sign: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| x.add(&d.scale(sign * h).unwrap()).unwrap())
                .collect()
        };
        let gp = first_grads(&shifted(1.0));
        let gm = first_grads(&shifted(-1.0));
        for i in 0..inputs.len() {
            let numeric = gp[i].sub(&gm[i]).unwrap().scale(1.0 / (2.0 * h)).unwrap();
            let err = rel_error(&hv[i], &numeric);
            assert!(err < SECOND_ORDER_TOL, "{name} (2nd order): input {i} seed {seed}: rel err {err:e}");
        }
    }
}

fn check(name: &str, gen: &Gen, f: &Func) {
    check_first_order(name, gen, f);
    check_second_order(name, gen, f);
}

fn normal(shapes: &'static [&'static [usize]]) -> Box<Gen> {
    Box::new(move |r| shapes.iter().map(|s| Tensor::randn(s, 1.0, r)).collect())
}

#[test]
fn elementwise_binary_with_broadcast() {
    let gen = normal(&[&[3, 4], &[4]]);
    check("add", &gen, &|x| x[0].add(&x[1]));
    check("sub", &gen, &|x| x[1].sub(&x[0]));
    check("mul", &gen, &|x| x[0].mul(&x[1]));
    let gen_div: Box<Gen> = Box::new(|r| vec![Tensor::randn(&[2, 3, 1], 1.0, r), away_from_zero(&[3, 5], r)]);
    check("div", &gen_div, &|x| x[0].div(&x[1]));
    let gen_scalar = normal(&[&[2, 3], &[]]);
    check("mul scalar-shaped", &gen_scalar, &|x| x[0].mul(&x[1]));
}

#[test]
fn elementwise_unary() {
    let gen = normal(&[&[4, 5]]);
    check("neg", &gen, &|x| x[0].neg());
    check("scale", &gen, &|x| x[0].scale(-2.5));
    check("add_scalar", &gen, &|x| x[0].add_scalar(0.7));
    check("exp", &gen, &|x| x[0].exp());
    check("tanh", &gen, &|x| x[0].tanh());
    check("sigmoid", &gen, &|x| x[0].sigmoid());
    check("softplus", &gen, &|x| x[0].softplus());
    check("square", &gen, &|x| x[0].square());
    let positive: Box<Gen> = Box::new(|r| vec![Tensor::uniform(&[3, 4], 0.3, 2.0, r)]);
    check("ln", &positive, &|x| x[0].ln());
    check("sqrt", &positive, &|x| x[0].sqrt());
    let kinked: Box<Gen> = Box::new(|r| vec![away_from_zero(&[3, 4], r)]);
    check("leaky_relu", &kinked, &|x| x[0].leaky_relu(0.2));
    check("relu", &kinked, &|x| x[0].relu());
}

#[test]
fn reductions_and_broadcasts() {
    let gen = normal(&[&[3, 4, 2]]);
    check("sum", &gen, &|x| x[0].sum());
    check("mean", &gen, &|x| x[0].mean());
    check("sum_axis keep", &gen, &|x| x[0].sum_axis(1, true));
    check("sum_axis drop", &gen, &|x| x[0].sum_axis(2, false));
    check("mean_axis", &gen, &|x| x[0].mean_axis(0, false));
    check("cumsum", &gen, &|x| x[0].cumsum_exclusive(1, false));
    check("cumsum rev", &gen, &|x| x[0].cumsum_exclusive(1, true));
    let small = normal(&[&[3, 1]]);
    check("broadcast_to", &small, &|x| x[0].broadcast_to(&[2, 3, 4]));
    check("sum_to", &gen, &|x| x[0].sum_to(&[4, 1]));
}

#[test]
fn matmul_all_transposes() {
    let gen = normal(&[&[3, 4], &[4, 5]]);
    check("matmul nn", &gen, &|x| x[0].matmul_t(&x[1], false, false));
    let gen = normal(&[&[4, 3], &[4, 5]]);
    check("matmul tn", &gen, &|x| x[0].matmul_t(&x[1], true, false));
    let gen = normal(&[&[3, 4], &[5, 4]]);
    check("matmul nt", &gen, &|x| x[0].matmul_t(&x[1], false, true));
    let gen = normal(&[&[4, 3], &[5, 4]]);
    check("matmul tt", &gen, &|x| x[0].matmul_t(&x[1], true, true));
}

#[test]
fn shape_ops() {
    let gen = normal(&[&[2, 3, 4]]);
    check("reshape", &gen, &|x| x[0].reshape(&[6, 4]));
    check("permute", &gen, &|x| x[0].permute(&[2, 0, 1]));
    check("slice", &gen, &|x| x[0].slice(2, 1, 2));
    check("pad", &gen, &|x| x[0].pad(1, 2, 1));
    check("flip", &gen, &|x| x[0].flip(1));
    let two = normal(&[&[2, 3], &[2, 1]]);
    check("concat", &two, &|x| Tensor::concat(&[&x[0], &x[1], &x[0]], 1));
}

#[test]
fn convolutions() {
    let gen = normal(&[&[2, 3, 5, 5], &[4, 3, 3, 3]]);
    check("conv2d s1", &gen, &|x| x[0].conv2d(&x[1], 1, 1));
    let gen2 = normal(&[&[1, 2, 6, 6], &[3, 2, 3, 3]]);
    check("conv2d s2", &gen2, &|x| x[0].conv2d(&x[1], 2, 1));
    let gen_in = normal(&[&[1, 3, 3, 3], &[3, 2, 3, 3]]);
    check("conv2d_input_grad", &gen_in, &|x| x[0].conv2d_input_grad(&x[1], &[1, 2, 6, 6], 2, 1));
    let gen_w = normal(&[&[1, 2, 6, 6], &[1, 3, 3, 3]]);
    check("conv2d_weight_grad", &gen_w, &|x| x[0].conv2d_weight_grad(&x[1], &[3, 2, 3, 3], 2, 1));
    let gen_1x1 = normal(&[&[1, 3, 4, 4], &[2, 3, 1, 1]]);
    check("conv2d 1x1", &gen_1x1, &|x| x[0].conv2d(&x[1], 1, 0));
    let img = normal(&[&[1, 2, 3, 4]]);
    check("upsample2x", &img, &|x| x[0].upsample2x());
    let img = normal(&[&[1, 2, 4, 6]]);
    check("sum_pool2x", &img, &|x| x[0].sum_pool2x());
}

fn plane_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![Tensor::randn(&[3, 5, 5], 1.0, r), Tensor::uniform(&[7, 2], -0.97, 0.97, r)]
}

#[test]
fn plane_sampling() {
    let gen: Box<Gen> = Box::new(plane_inputs);
    check("plane_sample", &gen, &|x| x[0].plane_sample(&x[1]));
    let gen_scatter: Box<Gen> = Box::new(|r| vec![Tensor::randn(&[7, 3], 1.0, r), Tensor::uniform(&[7, 2], -0.97, 0.97, r)]);
    check("plane_scatter", &gen_scatter, &|x| x[0].plane_scatter(&x[1], 5));
    // the coordinate path composed with a smooth nonlinearity
    check("plane_sample∘tanh", &gen, &|x| x[0].plane_sample(&x[1].tanh()?)?.tanh());
}

#[test]
fn composite_mlp() {
    let gen = normal(&[&[5, 4], &[6, 4], &[6], &[2, 6]]);
    let mlp = |x: &[Tensor]| -> Result<Tensor> {
        let h = x[0].matmul_t(&x[1], false, true)?.add(&x[2])?.tanh()?;
        h.matmul_t(&x[3], false, true)?.softplus()
    };
    check("mlp", &gen, &mlp);
}
