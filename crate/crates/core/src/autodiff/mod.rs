//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records each forward op as a node holding its value.
//! Parameters live in a [`ParamStore`]; they are copied onto the tape with
//! [`Tape::param`] and receive accumulated gradients from
//! [`Tape::backward`].
//!
//! ```
//! use agentseg::autodiff::{Matrix, ParamStore, Tape};
//!
//! let mut store = ParamStore::new();
//! let w = store.insert("w", &[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
//! let mut tape = Tape::new();
//! let x = tape.constant(Matrix::from_rows(&[[4.0, 5.0, 6.0]]));
//! let wv = tape.param(&store, w);
//! let prod = tape.mul(wv, x).unwrap();
//! let loss = tape.sum(prod);
//! tape.backward(loss, &mut store).unwrap();
//! assert_eq!(tape.scalar(loss), 32.0);
//! assert_eq!(store.grad(w).as_slice(), &[4.0, 5.0, 6.0]);
//! ```

pub mod checkpoint;
mod gradcheck;
mod matrix;
mod optim;
mod param;
mod tape;

pub use gradcheck::finite_diff_check;
pub use matrix::Matrix;
pub use optim::{poly_lr, Adam};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
