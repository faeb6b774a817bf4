//! ONNX model backend (pure-Rust runtime).
//!
//! Models carry their contract in `metadata_props`:
//! `class_names` (JSON list or comma-separated, must be `background,waste`),
//! `input_layout` (`NCHW` or `NHWC`), and optionally `input_scale`
//! (multiplier applied to 0..255 inputs, default 1) and `output_kind`
//! (`probabilities` or `logits`, default `probabilities`).

use std::path::Path;

use sha2::{Digest, Sha256};
use tract_onnx::pb;
use tract_onnx::prelude::*;

use super::ClassifierBackend;
use crate::error::{Error, Result};
use crate::records::Class;
use crate::tiles::{TileTensor, CHANNELS, TENSOR_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLayout {
    Nchw,
    Nhwc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Probabilities,
    Logits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContract {
    pub class_names: Vec<String>,
    pub input_layout: InputLayout,
    pub input_scale: f32,
    pub output_kind: OutputKind,
}

pub struct OnnxClassifier {
    plan: TypedSimplePlan<TypedModel>,
    contract: ModelContract,
    digest: String,
}

fn contract_err(expected: impl Into<String>, found: impl Into<String>) -> Error {
    Error::ModelContract {
        expected: expected.into(),
        found: found.into(),
    }
}

fn read_contract(proto: &pb::ModelProto) -> Result<ModelContract> {
    let meta = |k: &str| {
        proto
            .metadata_props
            .iter()
            .find(|e| e.key == k)
            .map(|e| e.value.trim().to_string())
    };
    let raw = meta("class_names").ok_or_else(|| contract_err("metadata key `class_names`", "absent"))?;
    let class_names: Vec<String> = serde_json::from_str(&raw)
        .unwrap_or_else(|_| raw.split(',').map(|s| s.trim().to_string()).collect());
    if class_names.len() != 2 {
        return Err(contract_err("2 classes", format!("{} classes", class_names.len())));
    }
    if class_names.iter().map(String::as_str).ne(Class::NAMES) {
        return Err(contract_err(
            format!("class_names {:?}", Class::NAMES),
            format!("{class_names:?}"),
        ));
    }
    let input_layout = match meta("input_layout").as_deref().map(str::to_ascii_uppercase).as_deref() {
        Some("NCHW") => InputLayout::Nchw,
        Some("NHWC") => InputLayout::Nhwc,
        Some(other) => return Err(contract_err("input_layout NCHW or NHWC", other)),
        None => return Err(contract_err("metadata key `input_layout`", "absent")),
    };
    let input_scale = match meta("input_scale") {
        Some(s) => s
            .parse::<f32>()
            .ok()
            .filter(|v| v.is_finite() && *v > 0.0)
            .ok_or_else(|| contract_err("positive input_scale", s))?,
        None => 1.0,
    };
    let output_kind = match meta("output_kind").as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("probabilities") | Some("softmax") => OutputKind::Probabilities,
        Some("logits") => OutputKind::Logits,
        Some(other) => return Err(contract_err("output_kind probabilities or logits", other)),
    };
    Ok(ModelContract {
        class_names,
        input_layout,
        input_scale,
        output_kind,
    })
}

fn dims_of(v: &pb::ValueInfoProto) -> Option<Vec<Option<i64>>> {
    use pb::tensor_shape_proto::dimension::Value;
    use pb::type_proto::Value as TV;
    let TV::TensorType(t) = v.r#type.as_ref()?.value.as_ref()?;
    Some(
        t.shape
            .as_ref()?
            .dim
            .iter()
            .map(|d| match &d.value {
                Some(Value::DimValue(n)) => Some(*n),
                _ => None,
            })
            .collect(),
    )
}

fn fmt_dims(d: &[Option<i64>]) -> String {
    let parts: Vec<String> = d
        .iter()
        .map(|x| x.map_or_else(|| "?".to_string(), |n| n.to_string()))
        .collect();
    format!("({})", parts.join(","))
}

/// Checks the declared graph input against the layout and the tensor size.
fn check_input(proto: &pb::ModelProto, layout: InputLayout) -> Result<()> {
    let graph = proto.graph.as_ref().ok_or_else(|| Error::ModelParse("model has no graph".into()))?;
    let inits: Vec<&str> = graph.initializer.iter().map(|t| t.name.as_str()).collect();
    let inputs: Vec<&pb::ValueInfoProto> = graph.input.iter().filter(|i| !inits.contains(&i.name.as_str())).collect();
    if inputs.len() != 1 {
        return Err(contract_err("exactly one graph input", format!("{} inputs", inputs.len())));
    }
    let size = TENSOR_SIZE as i64;
    let expected = match layout {
        InputLayout::Nchw => [None, Some(CHANNELS as i64), Some(size), Some(size)],
        InputLayout::Nhwc => [None, Some(size), Some(size), Some(CHANNELS as i64)],
    };
    if let Some(dims) = dims_of(inputs[0]) {
        let ok = dims.len() == 4
            && dims
                .iter()
                .zip(expected)
                .all(|(got, want)| got.is_none() || want.is_none() || *got == want);
        if !ok {
            return Err(contract_err(
                format!("input {}", fmt_dims(&expected)),
                format!("input {}", fmt_dims(&dims)),
            ));
        }
    }
    Ok(())
}

impl OnnxClassifier {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        let onnx = tract_onnx::onnx();
        let proto = onnx
            .proto_model_for_read(&mut bytes.as_slice())
            .map_err(|e| Error::ModelParse(format!("{}: {e}", path.display())))?;
        let contract = read_contract(&proto)?;
        check_input(&proto, contract.input_layout)?;

        let shape: [usize; 4] = match contract.input_layout {
            InputLayout::Nchw => [1, CHANNELS, TENSOR_SIZE, TENSOR_SIZE],
            InputLayout::Nhwc => [1, TENSOR_SIZE, TENSOR_SIZE, CHANNELS],
        };
        let parse = |e: TractError| Error::ModelParse(format!("{}: {e:#}", path.display()));
        let model = onnx
            .model_for_proto_model(&proto)
            .map_err(parse)?
            .with_input_fact(0, f32::fact(shape).into())
            .map_err(parse)?
            .into_optimized()
            .map_err(parse)?;
        let out = model.output_fact(0).map_err(parse)?;
        let n_out: Option<usize> = out.shape.as_concrete().map(|s| s.iter().product());
        if n_out != Some(2) {
            return Err(contract_err(
                "2 output classes",
                match out.shape.as_concrete() {
                    Some(s) => format!("output shape {s:?}"),
                    None => format!("output shape {:?}", out.shape),
                },
            ));
        }
        let plan = model.into_runnable().map_err(parse)?;
        Ok(OnnxClassifier { plan, contract, digest })
    }

    pub fn contract(&self) -> &ModelContract {
        &self.contract
    }

    fn input(&self, t: &TileTensor) -> Result<Tensor> {
        if t.size != TENSOR_SIZE {
            return Err(contract_err(format!("{TENSOR_SIZE}px tensor"), format!("{}px", t.size)));
        }
        let s = self.contract.input_scale;
        let n = TENSOR_SIZE;
        let arr = match self.contract.input_layout {
            InputLayout::Nhwc => tract_ndarray::Array4::from_shape_fn((1, n, n, CHANNELS), |(_, y, x, c)| {
                f32::from(t.data[(y * n + x) * CHANNELS + c]) * s
            }),
            InputLayout::Nchw => tract_ndarray::Array4::from_shape_fn((1, CHANNELS, n, n), |(_, c, y, x)| {
                f32::from(t.data[(y * n + x) * CHANNELS + c]) * s
            }),
        };
        Ok(arr.into_tensor())
    }
}

impl ClassifierBackend for OnnxClassifier {
    fn predict_batch(&self, batch: &[TileTensor]) -> Result<Vec<[f64; 2]>> {
        batch
            .iter()
            .map(|t| {
                let input = self.input(t)?;
                let out = self
                    .plan
                    .run(tvec!(input.into()))
                    .map_err(|e| Error::Validation(format!("model run failed: {e:#}")))?;
                let view = out[0]
                    .to_array_view::<f32>()
                    .map_err(|e| Error::Validation(format!("model output: {e:#}")))?;
                let v: Vec<f64> = view.iter().map(|&x| f64::from(x)).collect();
                if v.len() != 2 {
                    return Err(contract_err("2 outputs", format!("{}", v.len())));
                }
                Ok(match self.contract.output_kind {
                    OutputKind::Probabilities => [v[0], v[1]],
                    OutputKind::Logits => {
                        let m = v[0].max(v[1]);
                        let (a, b) = ((v[0] - m).exp(), (v[1] - m).exp());
                        [a / (a + b), b / (a + b)]
                    }
                })
            })
            .collect()
    }

    fn id(&self) -> String {
        format!("onnx:{}", self.digest)
    }
}
