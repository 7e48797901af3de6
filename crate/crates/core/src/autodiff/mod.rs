//! Minimal reverse-mode automatic differentiation over dense tensors.

pub mod check;
mod conv;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use optim::{lr_schedule, AdamWConfig, AdamWState};
pub use scalar::{gemm, Layout, MatRef, Scalar};
pub use tape::{Tape, Var, GROUP_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mse_gradient_by_hand_chain_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let y = tape.constant(Tensor::zeros([2]));
        let loss = tape.mse(x, y).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 2.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        let y = tape.silu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));

        let mut other = Tape::<f64>::new();
        let z = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(z), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_overwrites_unless_accumulating() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        tape.backward_accumulate(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[8.0]);
    }

    #[test]
    fn silu_at_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.silu(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 0.0);
    }

    #[test]
    fn group_norm_of_constant_channel_is_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 4, 3, 3], 2.5));
        let gamma = tape.constant(Tensor::full([4], 3.0));
        let beta = tape.constant(Tensor::new([4], vec![0.0, 0.1, 0.2, 0.3]).unwrap());
        let y = tape.group_norm(x, gamma, beta, 4).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            assert_eq!(*v, [0.0, 0.1, 0.2, 0.3][i / 9]);
        }
        let beta0 = tape.constant(Tensor::zeros([4]));
        let y0 = tape.group_norm(x, gamma, beta0, 2).unwrap();
        assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 6, 2, 2]));
        let g = tape.constant(Tensor::zeros([6]));
        assert!(tape.group_norm(x, g, g, 4).is_err());
    }

    #[test]
    fn conv_identity_and_box_sum() {
        let mut tape = Tape::<f64>::new();
        let input = Tensor::from_fn([1, 1, 4, 5], |i| i as f64 * 0.3 - 1.0);
        let x = tape.constant(input.clone());
        let k1 = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b0 = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(x, k1, Some(b0), 1, 0).unwrap();
        assert_eq!(tape.value(y), &input);

        let c = tape.constant(Tensor::full([1, 1, 5, 5], 0.7));
        let k3 = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d(c, k3, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        for v in tape.value(y).data() {
            assert!((v - 9.0 * 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_same_padding_preserves_shape_for_odd_kernels() {
        for k in [1usize, 3, 5, 7] {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::zeros([2, 3, 9, 7]));
            let w = tape.constant(Tensor::zeros([4, 3, k, k]));
            let y = tape.conv2d(x, w, None, 1, (k - 1) / 2).unwrap();
            assert_eq!(tape.shape(y), &[2, 4, 9, 7]);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros([4, 2, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("[1, 3, 8, 8]"));
        let w2 = tape.constant(Tensor::zeros([4, 3, 2, 2]));
        assert!(tape.conv2d(x, w2, None, 1, 0).is_err());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn constants_never_receive_grads() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let p = tape.param(Tensor::scalar(5.0));
        let y = tape.mul(c, p).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap(), &[2.0]);
    }
}
