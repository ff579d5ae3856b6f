//! Parameterized layers addressed by name prefix in a [`ParamStore`].

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Convolution reading `<prefix>.weight` and `<prefix>.bias`. Padding keeps
/// the spatial size for odd kernels at stride 1.
pub fn conv<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    let pad = tape.dims(w)[2] / 2;
    tape.conv2d(x, w, b, 1, pad)
}

pub fn linear<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.fully_connected(x, w, b)
}

/// Sums a non-empty list of same-shaped variables left to right.
pub fn sum_all<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}
