//! Finite-difference checks for every tensor primitive (f64).

use coverhunter::nn::gradcheck::check_inputs;
use coverhunter::nn::{Graph, NnError, Rng, Tensor, Var};
use rand::{Rng as _, SeedableRng};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an arbitrary-shaped output with fixed random weights so that
/// every output element contributes a distinct coefficient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, NnError> {
    let w = random(g.shape(y), seed);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn assert_grad(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NnError>) {
    let report = check_inputs(inputs, STEP, |g, v| {
        let y = f(g, v)?;
        project(g, y, 99)
    })
    .unwrap();
    println!("{name}: max rel error {:.2e} ({})", report.max_rel_error, report.worst);
    assert!(report.max_rel_error < TOL, "{name}: {report:?}");
}

#[test]
fn matmul_shared_and_batched() {
    assert_grad("matmul", &[random(&[3, 4, 5], 1), random(&[5, 2], 2)], |g, v| g.matmul(v[0], v[1]));
    assert_grad("bmm", &[random(&[3, 4, 5], 3), random(&[3, 5, 2], 4)], |g, v| g.matmul(v[0], v[1]));
    assert_grad("bmm_t", &[random(&[3, 4, 5], 5), random(&[3, 2, 5], 6)], |g, v| g.matmul_t(v[0], v[1]));
    assert_grad("matmul_t", &[random(&[4, 5], 5), random(&[2, 5], 6)], |g, v| g.matmul_t(v[0], v[1]));
}

#[test]
fn elementwise() {
    let x = random(&[3, 4, 5], 7);
    assert_grad("add", &[x.clone(), random(&[5], 8)], |g, v| g.add(v[0], v[1]));
    assert_grad("mul", &[x.clone(), random(&[4, 5], 9)], |g, v| g.mul(v[0], v[1]));
    assert_grad("scale", &[x.clone()], |g, v| g.scale(v[0], -1.7));
    assert_grad("swish", &[x.clone()], |g, v| g.swish(v[0]));
    assert_grad("sigmoid", &[x.clone()], |g, v| g.sigmoid(v[0]));
    // keep relu inputs away from the kink
    let xr = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    assert_grad("relu", &[xr], |g, v| g.relu(v[0]));
    assert_grad("glu", &[random(&[3, 4, 6], 10)], |g, v| g.glu(v[0]));
}

#[test]
fn normalizations() {
    let x = random(&[3, 4, 5], 11);
    let gamma = random(&[5], 12).map(|v| v + 1.5);
    let beta = random(&[5], 13);
    assert_grad("layer_norm", &[x.clone(), gamma.clone(), beta.clone()], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    assert_grad("batch_norm_train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        Ok(g.batch_norm_1d(v[0], v[1], v[2], None, 1e-5)?.0)
    });
    let rm = vec![0.1, -0.2, 0.3, 0.0, 0.5];
    let rv = vec![1.0, 0.5, 2.0, 0.7, 1.2];
    assert_grad("batch_norm_eval", &[x, gamma, beta], |g, v| {
        Ok(g.batch_norm_1d(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5)?.0)
    });
    assert_grad("l2_normalize", &[random(&[4, 5], 14)], |g, v| g.l2_normalize(v[0]));
}

#[test]
fn convolutions() {
    assert_grad("conv1d_s2_p1", &[random(&[3, 9, 4], 15), random(&[5, 4, 3], 16)], |g, v| g.conv1d(v[0], v[1], 2, 1));
    assert_grad("conv1d_s1_p0", &[random(&[2, 7, 3], 17), random(&[4, 3, 2], 18)], |g, v| g.conv1d(v[0], v[1], 1, 0));
    assert_grad("depthwise", &[random(&[3, 8, 4], 19), random(&[4, 5], 20)], |g, v| g.depthwise_conv1d(v[0], v[1], 2));
}

#[test]
fn softmax_and_reductions() {
    let x = random(&[3, 4, 5], 21);
    assert_grad("softmax", &[x.clone()], |g, v| g.softmax(v[0], None));
    let mask: Vec<bool> = (0..20).map(|i| i % 3 == 1).collect();
    assert_grad("softmax_masked", &[x.clone()], |g, v| g.softmax(v[0], Some(&mask)));
    assert_grad("mean_axis1", &[x.clone()], |g, v| g.mean(v[0], 1));
    assert_grad("mean_axis0", &[x.clone()], |g, v| g.mean(v[0], 0));
    assert_grad("std_axis1", &[x.clone()], |g, v| g.std(v[0], 1, 1e-5));
    assert_grad("std_axis2", &[x.clone()], |g, v| g.std(v[0], 2, 1e-5));
}

#[test]
fn shape_ops() {
    let x = random(&[3, 4, 5], 22);
    assert_grad("transpose", &[x.clone()], |g, v| g.transpose(v[0]));
    assert_grad("permute", &[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    assert_grad("reshape", &[x.clone()], |g, v| g.reshape(v[0], &[12, 5]));
    assert_grad("expand", &[random(&[3, 5], 23)], |g, v| g.expand(v[0], 1, 4));
    assert_grad("concat", &[x.clone(), random(&[3, 2, 5], 24)], |g, v| g.concat(&[v[0], v[1]], 1));
    assert_grad("concat_last", &[x, random(&[3, 4, 2], 25)], |g, v| g.concat(&[v[0], v[1]], 2));
}

#[test]
fn dropout_fixed_mask() {
    // the mask is drawn from a fresh seeded RNG on every evaluation
    assert_grad("dropout", &[random(&[3, 4, 5], 26)], |g, v| {
        let mut rng = Rng::seed_from_u64(5);
        g.dropout(v[0], 0.3, &mut rng)
    });
}

#[test]
fn composite_graph() {
    // attention-like composite: softmax(x W x^T) x, then layer norm
    let gamma = Tensor::ones(&[5]);
    let beta = Tensor::zeros(&[5]);
    assert_grad("composite", &[random(&[2, 4, 5], 27), random(&[5, 5], 28), gamma, beta], |g, v| {
        let xw = g.matmul(v[0], v[1])?;
        let s = g.matmul_t(xw, v[0])?;
        let a = g.softmax(s, None)?;
        let c = g.matmul(a, v[0])?;
        let c = g.swish(c)?;
        g.layer_norm(c, v[2], v[3], 1e-5)
    });
}

#[test]
fn forward_identities() {
    let mut g = Graph::<f64>::new();
    let x = random(&[4, 3], 30);
    let eye = g.constant(Tensor::eye(4));
    let xv = g.constant(x.clone());
    let y = g.matmul(eye, xv).unwrap();
    assert_eq!(g.value(y), &x);

    let c = g.constant(Tensor::full(&[7], 2.5));
    let s = g.softmax(c, None).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 7.0).abs() < 1e-15);
    }

    let mut rng = Rng::seed_from_u64(0);
    let d = g.dropout(xv, 0.0, &mut rng).unwrap();
    assert_eq!(g.value(d), &x);
}

#[test]
fn errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.matmul(a, b), Err(NnError::ShapeMismatch(_))));
    let big = g.constant(Tensor::full(&[2], f32::MAX));
    assert!(matches!(g.scale(big, 10.0), Err(NnError::NonFiniteValue(_))));
    let sq = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.softmax(sq, Some(&[true, true, false, true])), Err(NnError::FullyMaskedRow(0))));
}
