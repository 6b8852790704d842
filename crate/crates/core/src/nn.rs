//! Parameter registration and forward helpers shared by the network modules.

use alloc::format;

use crate::error::Result;
use crate::params::{Init, ParamKind, ParamStore};
use crate::tape::{BatchNormConfig, BatchNormMode, Padding, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

pub fn register_conv(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
    let fan_in = c_in * k * k;
    store.register(&format!("{prefix}.weight"), &[c_out, c_in, k, k], Init::FanInUniform { fan_in }, ParamKind::Trainable)?;
    store.register(&format!("{prefix}.bias"), &[c_out], Init::Zeros, ParamKind::Trainable)?;
    Ok(())
}

pub fn register_bn(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.register(&format!("{prefix}.gamma"), &[channels], Init::Ones, ParamKind::Trainable)?;
    store.register(&format!("{prefix}.beta"), &[channels], Init::Zeros, ParamKind::Trainable)?;
    store.register(&format!("{prefix}.running_mean"), &[channels], Init::Zeros, ParamKind::Buffer)?;
    store.register(&format!("{prefix}.running_var"), &[channels], Init::Ones, ParamKind::Buffer)?;
    Ok(())
}

pub fn register_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.register(&format!("{prefix}.weight"), &[fan_out, fan_in], Init::FanInUniform { fan_in }, ParamKind::Trainable)?;
    store.register(&format!("{prefix}.bias"), &[fan_out], Init::Zeros, ParamKind::Trainable)?;
    Ok(())
}

pub fn conv(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, stride: usize, padding: Padding) -> Result<Var> {
    let w = tape.param_by_name(store, &format!("{prefix}.weight"))?;
    let b = tape.param_by_name(store, &format!("{prefix}.bias"))?;
    tape.conv2d(x, w, b, stride, padding)
}

pub fn batchnorm(tape: &mut Tape, store: &mut ParamStore, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
    let gamma = tape.param_by_name(store, &format!("{prefix}.gamma"))?;
    let beta = tape.param_by_name(store, &format!("{prefix}.beta"))?;
    let rm = store.id(&format!("{prefix}.running_mean"))?;
    let rv = store.id(&format!("{prefix}.running_var"))?;
    let cfg = BatchNormConfig::default();
    match mode {
        Mode::Train => {
            let (running_mean, running_var) = store.buffers_mut(rm, rv);
            tape.batchnorm2d(x, gamma, beta, BatchNormMode::Train { running_mean, running_var }, cfg)
        }
        Mode::Eval => {
            let running_mean = store.value(rm).data();
            let running_var = store.value(rv).data();
            tape.batchnorm2d(x, gamma, beta, BatchNormMode::Eval { running_mean, running_var }, cfg)
        }
    }
}

pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param_by_name(store, &format!("{prefix}.weight"))?;
    let b = tape.param_by_name(store, &format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}
