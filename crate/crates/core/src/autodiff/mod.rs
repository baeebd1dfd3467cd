//! Minimal dense reverse-mode automatic differentiation.
//!
//! Values are `f64` throughout. A [`Graph`] is built per evaluation and
//! discarded afterwards; nothing is mutated in place once recorded.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport, RELATIVE_FLOOR};
pub use graph::{BinaryKind, Gradients, Graph, UnaryKind, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_example() {
        let mut g = Graph::new();
        let a = g
            .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let b = g
            .constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap())
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1000.0, 1000.0])).unwrap();
        let y = g.logsumexp(x, 0).unwrap();
        assert!((g.value(y).item().unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradient_of_logsumexp_is_softmax() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.logsumexp(x, 0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![4])).unwrap();
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4]"));
        assert!(matches!(
            g.matmul(a, a),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
        let y = g.constant(Tensor::vector(vec![1000.0])).unwrap();
        assert!(matches!(g.exp(y), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn conv_gradient_wrt_one_hot_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[1, 5, 5]);
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let f = |g: &mut Graph, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], None)?;
            g.sum(y)
        };
        let report = gradcheck(f, &[x, w], 1e-5, 1e-6);
        assert!(report.passed, "{report:?}");
    }

    /// Every primitive against central differences on inputs in [-2, 2].
    #[test]
    fn primitives_match_finite_differences() {
        type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> crate::Result<Var>>;
        let weighted = |g: &mut Graph, y: Var| -> crate::Result<Var> {
            // Non-uniform output weights so permutation bugs are visible.
            let n = g.value(y).numel();
            let w = Tensor::new(
                g.shape(y).to_vec(),
                (0..n).map(|i| 0.3 + (i as f64 * 0.71).sin()).collect(),
            )?;
            let w = g.constant(w)?;
            let p = g.mul(y, w)?;
            g.sum(p)
        };
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.add(v[0], v[1]))),
            ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.sub(v[0], v[1]))),
            ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.mul(v[0], v[1]))),
            (
                "div",
                vec![vec![2, 3], vec![2, 3]],
                Box::new(|g, v| {
                    let d = g.exp(v[1])?;
                    g.div(v[0], d)
                }),
            ),
            ("broadcast_add", vec![vec![3, 4], vec![4]], Box::new(|g, v| g.add(v[0], v[1]))),
            ("broadcast_mul", vec![vec![3, 1], vec![1, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
            ("matmul", vec![vec![2, 3], vec![3, 4]], Box::new(|g, v| g.matmul(v[0], v[1]))),
            ("exp", vec![vec![5]], Box::new(|g, v| g.exp(v[0]))),
            (
                "log",
                vec![vec![5]],
                Box::new(|g, v| {
                    let p = g.exp(v[0])?;
                    let p = g.add_scalar(p, 0.5)?;
                    g.log(p)
                }),
            ),
            ("tanh", vec![vec![5]], Box::new(|g, v| g.tanh(v[0]))),
            ("sigmoid", vec![vec![5]], Box::new(|g, v| g.sigmoid(v[0]))),
            ("softplus", vec![vec![5]], Box::new(|g, v| g.softplus(v[0]))),
            ("relu", vec![vec![6]], Box::new(|g, v| g.relu(v[0]))),
            ("clamp", vec![vec![6]], Box::new(|g, v| g.clamp(v[0], -1.0, 1.0))),
            ("scale", vec![vec![3]], Box::new(|g, v| g.scale(v[0], -2.5))),
            ("mean", vec![vec![2, 3]], Box::new(|g, v| g.mean(v[0]))),
            ("sum_axis", vec![vec![2, 3, 4]], Box::new(|g, v| g.sum_axis(v[0], 1))),
            ("mean_axis", vec![vec![2, 3, 4]], Box::new(|g, v| g.mean_axis(v[0], 2))),
            ("logsumexp0", vec![vec![3, 4]], Box::new(|g, v| g.logsumexp(v[0], 0))),
            ("logsumexp1", vec![vec![3, 4]], Box::new(|g, v| g.logsumexp(v[0], 1))),
            (
                "concat",
                vec![vec![2, 3], vec![2, 2]],
                Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
            ),
            ("reshape", vec![vec![2, 3]], Box::new(|g, v| g.reshape(v[0], &[3, 2]))),
            (
                "broadcast_to",
                vec![vec![3, 1]],
                Box::new(|g, v| g.broadcast_to(v[0], &[2, 3, 4])),
            ),
            ("slice", vec![vec![3, 5]], Box::new(|g, v| g.slice(v[0], 1, 1, 4))),
            (
                "conv3x3",
                vec![vec![2, 5, 6], vec![3, 2, 3, 3], vec![3]],
                Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]))),
            ),
            (
                "conv1x1",
                vec![vec![3, 4, 4], vec![2, 3, 1, 1]],
                Box::new(|g, v| g.conv2d(v[0], v[1], None)),
            ),
            ("avg_pool2", vec![vec![2, 4, 6]], Box::new(|g, v| g.avg_pool2(v[0]))),
            ("upsample2", vec![vec![2, 3, 2]], Box::new(|g, v| g.upsample2(v[0]))),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, shapes, build) in cases {
            for _ in 0..3 {
                let point: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
                let f = |g: &mut Graph, v: &[Var]| {
                    let y = build(g, v)?;
                    weighted(g, y)
                };
                let report = gradcheck(f, &point, 1e-5, 1e-6);
                assert!(report.passed, "{name}: {report:?}");
            }
        }
    }

    #[test]
    fn gradcheck_sum_of_squares_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random(&mut rng, &[7]);
        let f = |g: &mut Graph, v: &[Var]| {
            let s = g.mul(v[0], v[0])?;
            g.sum(s)
        };
        let report = gradcheck(f, &[p], 1e-4, 1e-8);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gradcheck_rejects_bad_step() {
        let f = |g: &mut Graph, v: &[Var]| g.sum(v[0]);
        let r = gradcheck(f, &[Tensor::vector(vec![1.0])], 1e-2, 1e-6);
        assert!(!r.passed && r.failure.is_some());
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[2, 6, 6]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let wv = g.param("w", w.clone()).unwrap();
            let y = g.conv2d(xv, wv, None).unwrap();
            let y = g.tanh(y).unwrap();
            let y = g.avg_pool2(y).unwrap();
            let s = g.logsumexp(y, 0).unwrap();
            let s = g.sum(s).unwrap();
            let gr = g.backward(s).unwrap();
            (g.value(s).clone(), gr.by_name("w").unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert!(ga.data().iter().zip(gb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
