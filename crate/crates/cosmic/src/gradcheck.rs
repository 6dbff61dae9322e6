//! Central finite-difference gradient checking.
//!
//! The checker evaluates the forward function at perturbed inputs and never
//! touches the tape's backward machinery, so it is an independent oracle for
//! every differentiable op. Run in f64: the h=1e-4 stencil needs more
//! mantissa than f32 carries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Scalar, Tape, TapeBinding, Tensor, Var};

pub fn rand_tensor<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Check autodiff gradients of `f` against central finite differences
/// (h = 1e-4) on random inputs of the given shapes.
///
/// Panics with a description of the first failing element. The comparison is
/// |fd - ad| <= tol * max(1, |fd|, |ad|).
pub fn check_grad(
    shapes: &[&[usize]],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    tol: f64,
) {
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(s, rng)).collect();
    check_grad_at(&inputs, f, tol);
}

/// Same as [`check_grad`] but at caller-provided input values.
pub fn check_grad_at(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    tol: f64,
) {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars).expect("forward failed during gradcheck");
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars).expect("forward failed during gradcheck");
    tape.backward(loss).expect("backward failed during gradcheck");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("missing gradient for input"))
        .collect();

    let h = 1e-4;
    for (i, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = analytic[i].data()[e];
            let denom = 1.0f64.max(fd.abs()).max(ad.abs());
            assert!(
                (fd - ad).abs() <= tol * denom,
                "gradient mismatch input {i} elem {e}: fd={fd:.8e} ad={ad:.8e} rel={:.3e}",
                (fd - ad).abs() / denom
            );
        }
    }
}

/// Check the gradient of one named store parameter against central finite
/// differences, for losses built from a whole parameter store (model-level
/// paths such as LoRA-through-attention).
pub fn check_param_grad(
    store: &mut ParamStore<f64>,
    name: &str,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>, &mut TapeBinding) -> Result<Var>,
    tol: f64,
) {
    let (pid, p) = store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter named `{name}`"));
    assert!(p.trainable, "param gradcheck needs a trainable target");
    let n = p.tensor.numel();

    let mut tape = Tape::new();
    let mut bind = TapeBinding::new(store);
    let loss = f(&mut tape, store, &mut bind).expect("forward failed during gradcheck");
    tape.backward(loss).expect("backward failed during gradcheck");
    let analytic = bind
        .grad(&tape, pid)
        .unwrap_or_else(|| panic!("no gradient reached `{name}`"));

    let h = 1e-4;
    for e in 0..n {
        let orig = store.get(pid).tensor.data()[e];
        let mut eval_at = |v: f64| -> f64 {
            store.get_mut(pid).tensor.data_mut()[e] = v;
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new(store);
            let loss = f(&mut tape, store, &mut bind).expect("forward failed during gradcheck");
            tape.value(loss).item()
        };
        let fd = (eval_at(orig + h) - eval_at(orig - h)) / (2.0 * h);
        store.get_mut(pid).tensor.data_mut()[e] = orig;
        let ad = analytic.data()[e];
        let denom = 1.0f64.max(fd.abs()).max(ad.abs());
        assert!(
            (fd - ad).abs() <= tol * denom,
            "gradient mismatch for `{name}` elem {e}: fd={fd:.8e} ad={ad:.8e} rel={:.3e}",
            (fd - ad).abs() / denom
        );
    }
}
