//! Every differentiable op against central finite differences at 64-bit.

use proptest::prelude::*;
use smart_core::rng::SplitMix64;
use smart_core::tensor::gradcheck::{gradcheck, GradcheckOptions};
use smart_core::tensor::{Graph, Result, Tensor, Var};

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Contracts an arbitrary output against fixed random weights so the loss is
/// a generic scalar function of every output element.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed ^ 0xabcdef);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(seed: u64, shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let mut rng = SplitMix64::new(seed);
    let params: Vec<(String, Tensor<f64>)> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("p{i}"), random(s, &mut rng)))
        .collect();
    let report = gradcheck(
        &params,
        |g: &mut Graph<f64>, p: &[Var]| {
            let y = f(g, p)?;
            project(g, y, seed)
        },
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn matmul_shared_and_batched(seed in any::<u64>()) {
        check(seed, &[&[2, 3, 4], &[4, 5]], |g, p| g.matmul(p[0], p[1]));
        check(seed, &[&[2, 3, 4], &[2, 4, 5]], |g, p| g.matmul(p[0], p[1]));
        check(seed, &[&[3, 4], &[5, 4]], |g, p| g.matmul_t(p[0], p[1]));
        check(seed, &[&[2, 3, 4], &[2, 5, 4]], |g, p| g.matmul_t(p[0], p[1]));
    }

    #[test]
    fn broadcasting_add_mul(seed in any::<u64>()) {
        check(seed, &[&[3, 4], &[4]], |g, p| g.add(p[0], p[1]));
        check(seed, &[&[2, 1, 4], &[3, 1]], |g, p| g.mul(p[0], p[1]));
        check(seed, &[&[2, 3], &[2, 3]], |g, p| g.mul(p[0], p[1]));
    }

    #[test]
    fn softmaxes_on_every_axis(seed in any::<u64>(), axis in 0usize..3) {
        check(seed, &[&[2, 3, 4]], |g, p| g.softmax(p[0], axis));
        check(seed, &[&[2, 3, 4]], |g, p| g.log_softmax(p[0], axis));
    }

    #[test]
    fn layer_norm_relu_scale(seed in any::<u64>()) {
        check(seed, &[&[3, 5], &[5], &[5]], |g, p| g.layer_norm(p[0], p[1], p[2], 1e-5));
        check(seed, &[&[4, 3]], |g, p| g.relu(p[0]));
        check(seed, &[&[4, 3]], |g, p| g.scale(p[0], -0.7));
    }

    #[test]
    fn shape_ops(seed in any::<u64>()) {
        check(seed, &[&[5, 3]], |g, p| g.embedding(p[0], &[4, 0, 4, 2]));
        check(seed, &[&[2, 3], &[2, 2]], |g, p| g.concat(&[p[0], p[1]], 1));
        check(seed, &[&[3, 4, 2]], |g, p| g.slice(p[0], 1, 1, 3));
        check(seed, &[&[3, 4, 2]], |g, p| g.mean(p[0], 1));
        check(seed, &[&[2, 3, 4]], |g, p| g.permute(p[0], &[2, 0, 1]));
        check(seed, &[&[2, 3, 4]], |g, p| g.transpose(p[0], 0, 2));
        check(seed, &[&[2, 6]], |g, p| g.reshape(p[0], &[3, 4]));
        check(seed, &[&[3, 4]], |g, p| g.pick(p[0], &[3, 0, 1]));
    }

    #[test]
    fn softmax_normalizes(seed in any::<u64>(), axis in 0usize..3) {
        let mut rng = SplitMix64::new(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[3, 4, 5], &mut rng)).unwrap();
        let y = g.softmax(x, axis).unwrap();
        let s = g.value(y).shape().to_vec();
        let sums = {
            let mut g2 = Graph::<f64>::new();
            let c = g2.constant(g.value(y).clone()).unwrap();
            let m = g2.mean(c, axis).unwrap();
            g2.value(m).data().iter().map(|v| v * s[axis] as f64).collect::<Vec<_>>()
        };
        for v in sums {
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn f32_and_f64_graphs_agree() {
    let mut rng = SplitMix64::new(9);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut g64 = Graph::<f64>::new();
    let (x, y) = (g64.constant(a.clone()).unwrap(), g64.constant(b.clone()).unwrap());
    let z = g64.matmul(x, y).unwrap();
    let mut g32 = Graph::<f32>::new();
    let (x, y) = (g32.constant(a.cast()).unwrap(), g32.constant(b.cast()).unwrap());
    let z32 = g32.matmul(x, y).unwrap();
    for (p, q) in g64.value(z).data().iter().zip(g32.value(z32).data()) {
        assert!((p - *q as f64).abs() < 1e-5);
    }
}
