//! Model files: a CDMM tensor list whose first two entries describe the architecture
//! (`meta.arch` and `meta.config`), followed by the parameters in build order.

use std::path::Path;

use crate::cdmm;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    UNet = 1,
    CapsDeMM = 2,
}

impl Arch {
    fn from_code(code: f32) -> Option<Arch> {
        match code as u32 {
            1 => Some(Arch::UNet),
            2 => Some(Arch::CapsDeMM),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::UNet => "unet",
            Arch::CapsDeMM => "capsdemm",
        }
    }
}

pub fn encode_model(arch: Arch, header: &[f32], params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut all = vec![
        ("meta.arch".to_string(), Tensor::scalar(arch as u32 as f32)),
        (
            "meta.config".to_string(),
            Tensor::new(&[header.len()], header.to_vec())?,
        ),
    ];
    all.extend(
        params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false))),
    );
    Ok(cdmm::encode(&all))
}

pub fn save_model(path: &Path, arch: Arch, header: &[f32], params: &ParamSet<f32>) -> Result<()> {
    crate::io::write_atomic(path, &encode_model(arch, header, params)?)
}

/// A decoded model file before it is matched against a rebuilt architecture.
pub struct RawModel {
    pub arch: Arch,
    pub header: Vec<f32>,
    pub params: Vec<(String, Tensor<f32>)>,
}

pub fn load_raw(path: &Path) -> Result<RawModel> {
    let mut tensors = cdmm::load(path)?.into_iter();
    let arch = match tensors.next() {
        Some((name, t)) if name == "meta.arch" && t.numel() == 1 => Arch::from_code(t.data()[0])
            .ok_or_else(|| Error::Format(format!("unknown architecture code {}", t.data()[0])))?,
        _ => return Err(Error::Format("model file lacks meta.arch".into())),
    };
    let header = match tensors.next() {
        Some((name, t)) if name == "meta.config" => t.into_data(),
        _ => return Err(Error::Format("model file lacks meta.config".into())),
    };
    Ok(RawModel {
        arch,
        header,
        params: tensors.collect(),
    })
}

/// Loads a model of the given architecture; returns its header and raw parameters.
pub fn load_model(path: &Path, arch: Arch) -> Result<(Vec<f32>, Vec<(String, Tensor<f32>)>)> {
    let raw = load_raw(path)?;
    if raw.arch != arch {
        return Err(Error::Format(format!(
            "{} holds a {} model, expected {}",
            path.display(),
            raw.arch.name(),
            arch.name()
        )));
    }
    Ok((raw.header, raw.params))
}

/// Copies loaded tensors into a freshly built parameter set, requiring identical
/// names and shapes in the same order.
pub fn fill_params(target: &mut ParamSet<f32>, loaded: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if loaded.len() != target.len() {
        return Err(Error::Format(format!(
            "model file has {} parameter tensors, architecture needs {}",
            loaded.len(),
            target.len()
        )));
    }
    for ((name, slot), (lname, t)) in target.iter_mut().zip(loaded) {
        if name != lname || slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter {lname} {:?} does not match expected {name} {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

/// Reads a non-negative integer field from a model header.
pub fn header_usize(header: &[f32], idx: usize) -> Result<usize> {
    match header.get(idx) {
        Some(&v) if v >= 0.0 && v.fract() == 0.0 => Ok(v as usize),
        _ => Err(Error::Format(format!("bad or missing model header field {idx}"))),
    }
}
