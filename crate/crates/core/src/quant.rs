//! 8-bit symmetric weight quantization and model-size accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::training::{Checkpoint, StoredTensor};

/// Per-tensor symmetric int8 codes; value = `scale * code`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    pub scale: f64,
}

/// `scale = max|w| / 127`, codes rounded half away from zero. An all-zero
/// tensor gets scale 1.
pub fn quantize(t: &Tensor) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::NonFinite(
            "cannot quantize a non-finite tensor".into(),
        ));
    }
    let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
    let codes = t
        .data()
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        codes,
        scale,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q.codes.iter().map(|&c| q.scale * f64::from(c)).collect();
    Tensor::new(q.shape.clone(), data).expect("codes match the stored shape")
}

/// Bytes per parameter at 32-bit inference precision.
pub const FLOAT_BYTES: usize = 4;
/// Per-tensor scale stored alongside int8 codes, at 32-bit precision.
pub const SCALE_BYTES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleSize {
    pub params: usize,
    pub tensors: usize,
    pub float_bytes: usize,
    pub quantized_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    /// Size of the checkpoint as serialized.
    pub file_bytes: usize,
    pub quantized: bool,
    pub params: usize,
    /// Parameter payload with 32-bit reals.
    pub float_payload_bytes: usize,
    /// Parameter payload with int8 codes plus one scale per tensor.
    pub quantized_payload_bytes: usize,
    /// Keyed by the name prefix before the first dot.
    pub modules: BTreeMap<String, ModuleSize>,
}

impl SizeReport {
    /// Quantized over float payload; `None` for an empty model.
    pub fn ratio(&self) -> Option<f64> {
        (self.float_payload_bytes > 0)
            .then(|| self.quantized_payload_bytes as f64 / self.float_payload_bytes as f64)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "checkpoint bytes: {} ({})",
            self.file_bytes,
            if self.quantized { "int8" } else { "float" }
        );
        let _ = writeln!(s, "parameters: {}", self.params);
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>12} {:>12}",
            "module", "params", "float32 B", "int8 B"
        );
        for (name, m) in &self.modules {
            let _ = writeln!(
                s,
                "{:<12} {:>10} {:>12} {:>12}",
                name, m.params, m.float_bytes, m.quantized_bytes
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>12} {:>12}",
            "total", self.params, self.float_payload_bytes, self.quantized_payload_bytes
        );
        match self.ratio() {
            Some(r) => {
                let _ = writeln!(s, "compression ratio: {r:.4}");
            }
            None => {
                let _ = writeln!(s, "compression ratio: n/a (no parameters)");
            }
        }
        s.push_str(
            "reference: the full-size production model occupies 177MB after 8-bit quantization\n",
        );
        s
    }
}

pub fn model_size_report(ckpt: &Checkpoint) -> Result<SizeReport> {
    let file_bytes = ckpt.encode()?.len();
    let mut modules: BTreeMap<String, ModuleSize> = BTreeMap::new();
    for (name, t) in &ckpt.tensors {
        let n = match t {
            StoredTensor::Real(t) => t.numel(),
            StoredTensor::Quantized(q) => q.codes.len(),
        };
        let key = name.split('.').next().unwrap_or(name).to_string();
        let m = modules.entry(key).or_insert(ModuleSize {
            params: 0,
            tensors: 0,
            float_bytes: 0,
            quantized_bytes: 0,
        });
        m.params += n;
        m.tensors += 1;
        m.float_bytes += n * FLOAT_BYTES;
        m.quantized_bytes += n + SCALE_BYTES;
    }
    Ok(SizeReport {
        file_bytes,
        quantized: ckpt.quantized(),
        params: modules.values().map(|m| m.params).sum(),
        float_payload_bytes: modules.values().map(|m| m.float_bytes).sum(),
        quantized_payload_bytes: modules.values().map(|m| m.quantized_bytes).sum(),
        modules,
    })
}
