use asap::tensor::{finite_diff_check, finite_diff_check_coords, GraphTape, Reduction};
use asap::Tensor;
use proptest::prelude::*;

fn vec_in(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn t(data: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::new(data, dims).unwrap()
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_gradients(a in vec_in(12), b in vec_in(12), s in -2.0f64..2.0) {
        let b = t(b, &[3, 4]);
        let x = t(a, &[3, 4]);
        let f = |x: &Tensor| {
            let y = x.mul(&b)?.add(x)?.sub(&b)?.scale(s).relu();
            Ok(y.mul(&y.add_scalar(0.3))?.sum())
        };
        let r = finite_diff_check(f, &x, H, TOL).unwrap();
        prop_assert!(r.passed, "{r:?}");
    }

    #[test]
    fn matmul_and_bmm_gradients(a in vec_in(6), b in vec_in(12), c in vec_in(24)) {
        let inputs = [t(a, &[2, 3]), t(b, &[3, 4]), t(c, &[2, 3, 4])];
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, x)| (0..x.numel()).map(move |j| (i, j)))
            .collect();
        let f = |xs: &[Tensor]| {
            let m = xs[0].matmul(&xs[1])?;
            let lhs = xs[0].reshape(&[1, 2, 3])?.broadcast_to(&[2, 2, 3])?;
            let bm = lhs.bmm(&xs[2])?.transpose_last2()?;
            Ok(m.mul(&m)?.sum().add(&bm.mul(&bm)?.mean())?)
        };
        let r = finite_diff_check_coords(f, &inputs, &coords, H, TOL).unwrap();
        prop_assert!(r.passed, "{r:?}");
    }

    #[test]
    fn reduction_gradients(a in vec_in(24)) {
        let x = t(a, &[2, 3, 4]);
        let f = |x: &Tensor| {
            let v = x.reduce(Reduction::Var, &[1, 2], false)?;
            let m = x.reduce(Reduction::Mean, &[0], true)?;
            Ok(v.sum().add(&m.mul(&m)?.sum())?)
        };
        let r = finite_diff_check(f, &x, H, TOL).unwrap();
        prop_assert!(r.passed, "{r:?}");
    }

    #[test]
    fn backward_is_linear(a in vec_in(8), p in -3.0f64..3.0, q in -3.0f64..3.0) {
        let grad_of = |build: &dyn Fn(&Tensor) -> Tensor| {
            let x = t(a.clone(), &[8]).into_param();
            build(&x).backward().unwrap();
            x.grad().unwrap()
        };
        let f = |x: &Tensor| x.mul(x).unwrap().sum();
        let g = |x: &Tensor| x.relu().mean();
        let combined = grad_of(&|x| f(x).scale(p).add(&g(x).scale(q)).unwrap());
        let gf = grad_of(&f);
        let gg = grad_of(&g);
        for i in 0..8 {
            prop_assert!((combined[i] - (p * gf[i] + q * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_is_bit_identical(a in vec_in(12), b in vec_in(12)) {
        let run = || {
            let x = t(a.clone(), &[3, 4]).into_param();
            let w = t(b.clone(), &[4, 3]);
            let y = x.matmul(&w).unwrap().relu().reduce(Reduction::Var, &[1], false).unwrap().sum();
            y.backward().unwrap();
            (y.item().unwrap().to_bits(), x.grad().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn sum_of_squares_checker_example() {
    let x = t(vec![0.3, -0.7, 0.9, -0.1, 0.5], &[5]);
    let r = finite_diff_check(|x: &Tensor| Ok(x.mul(x)?.sum()), &x, 1e-5, 1e-6).unwrap();
    assert!(r.passed && r.max_rel_err < 1e-6, "{r:?}");
    let r = finite_diff_check(|x: &Tensor| Ok(x.sum()), &x, 1e-5, 1e-6).unwrap();
    assert!(r.max_rel_err < 1e-9);
}

#[test]
fn reduction_examples() {
    let x = t(vec![1.0, 2.0, 3.0, 4.0], &[4]);
    assert_eq!(x.reduce(Reduction::Mean, &[0], false).unwrap().item().unwrap(), 2.5);
    let c = Tensor::full(&[2, 3], 7.0).unwrap();
    assert_eq!(c.reduce(Reduction::Var, &[0, 1], false).unwrap().item().unwrap(), 0.0);
    let id = x.reduce(Reduction::Mean, &[], false).unwrap();
    assert_eq!(id.data(), x.data());
    assert!(x.reduce(Reduction::Mean, &[1], false).is_err());
}

#[test]
fn tape_is_topological_and_visits_once() {
    let x = t(vec![1.0, 2.0], &[2]).into_param();
    let y = x.mul(&x).unwrap();
    let z = y.add(&x).unwrap().sum();
    let tape = GraphTape::record(&z);
    assert_eq!(tape.ops(), ["leaf", "mul", "add", "sum"]);
    z.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0, 5.0]);
}
