//! Small layer helpers over [`Graph`] shared by the sender, receiver, and perceptual encoder.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::{he_normal, BoundParams, ParamSet};

/// Inserts `{name}.w` with shape `(c_out, c_in, k, k)` and `{name}.b` with shape `(c_out, 1, 1)`.
pub(crate) fn init_conv(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, k: usize) {
    p.insert(format!("{name}.w"), he_normal(rng, &[c_out, c_in, k, k], c_in * k * k));
    p.insert(format!("{name}.b"), Tensor::zeros(&[c_out, 1, 1]));
}

/// Inserts a transposed-conv kernel `(c_in, c_out, k, k)` and bias `(c_out, 1, 1)`.
pub(crate) fn init_deconv(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, k: usize) {
    p.insert(format!("{name}.w"), he_normal(rng, &[c_in, c_out, k, k], c_in));
    p.insert(format!("{name}.b"), Tensor::zeros(&[c_out, 1, 1]));
}

pub(crate) fn init_linear(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, n_in: usize, n_out: usize) {
    p.insert(format!("{name}.w"), he_normal(rng, &[n_in, n_out], n_in));
    p.insert(format!("{name}.b"), Tensor::zeros(&[1, n_out]));
}

/// Two 3×3 convolutions with an identity shortcut.
pub(crate) fn init_residual(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, channels: usize) {
    init_conv(p, rng, &format!("{name}.c1"), channels, channels, 3);
    init_conv(p, rng, &format!("{name}.c2"), channels, channels, 3);
    // start close to the identity map
    let w = p.get_mut(&format!("{name}.c2.w")).expect("just inserted");
    *w = w.map(|v| 0.1 * v);
}

pub(crate) fn conv(g: &mut Graph, bp: &BoundParams, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let y = g.conv2d(x, bp.get(&format!("{name}.w")), stride, padding)?;
    g.add(y, bp.get(&format!("{name}.b")))
}

pub(crate) fn deconv(g: &mut Graph, bp: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = g.deconv2d(x, bp.get(&format!("{name}.w")), stride)?;
    g.add(y, bp.get(&format!("{name}.b")))
}

pub(crate) fn linear(g: &mut Graph, bp: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, bp.get(&format!("{name}.w")))?;
    g.add(y, bp.get(&format!("{name}.b")))
}

/// `relu(x + c2(relu(c1(x))))`.
pub(crate) fn residual(g: &mut Graph, bp: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, bp, &format!("{name}.c1"), x, 1, 1)?;
    let h = g.relu(h);
    let h = conv(g, bp, &format!("{name}.c2"), h, 1, 1)?;
    let s = g.add(x, h)?;
    Ok(g.relu(s))
}
