#![cfg(feature = "onnx")]

use std::path::Path;

use dumpscan_core::error::Error;
use dumpscan_core::geogrid::{PixelWindow, TileId};
use dumpscan_core::infer::onnx::{InputLayout, OnnxClassifier};
use dumpscan_core::infer::ClassifierBackend;
use dumpscan_core::tiles::TileTensor;
use prost::Message;
use tract_onnx::pb;
use tract_onnx::pb::tensor_shape_proto::{dimension, Dimension};

const FLOAT: i32 = 1;
const SIZE: usize = 128;
const W: [[f32; 2]; 3] = [[-4.0, 3.0], [1.5, -2.0], [2.0, 0.5]];
const B: [f32; 2] = [0.25, -0.75];

fn value_info(name: &str, dims: &[Option<i64>]) -> pb::ValueInfoProto {
    let dim = dims
        .iter()
        .map(|d| Dimension {
            value: Some(match d {
                Some(n) => dimension::Value::DimValue(*n),
                None => dimension::Value::DimParam("N".into()),
            }),
            ..Default::default()
        })
        .collect();
    pb::ValueInfoProto {
        name: name.into(),
        r#type: Some(pb::TypeProto {
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: FLOAT,
                shape: Some(pb::TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<pb::AttributeProto>) -> pb::NodeProto {
    pb::NodeProto {
        op_type: op.into(),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.into()],
        name: output.into(),
        attribute,
        ..Default::default()
    }
}

fn int_attr(name: &str, i: i64) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: pb::attribute_proto::AttributeType::Int as i32,
        i,
        ..Default::default()
    }
}

fn init(name: &str, dims: &[i64], data: Vec<f32>) -> pb::TensorProto {
    pb::TensorProto {
        name: name.into(),
        dims: dims.to_vec(),
        data_type: FLOAT,
        float_data: data,
        ..Default::default()
    }
}

/// Mean-pool, linear layer with `classes` outputs, softmax.
fn model(classes: usize, meta: &[(&str, &str)]) -> Vec<u8> {
    let weights: Vec<f32> = (0..3).flat_map(|c| (0..classes).map(move |k| W[c][k % 2])).collect();
    let bias: Vec<f32> = (0..classes).map(|k| B[k % 2]).collect();
    let graph = pb::GraphProto {
        name: "pool_linear".into(),
        node: vec![
            node("GlobalAveragePool", &["x"], "pooled", vec![]),
            node("Flatten", &["pooled"], "flat", vec![int_attr("axis", 1)]),
            node("Gemm", &["flat", "w", "b"], "logits", vec![]),
            node("Softmax", &["logits"], "probs", vec![int_attr("axis", 1)]),
        ],
        initializer: vec![init("w", &[3, classes as i64], weights), init("b", &[classes as i64], bias)],
        input: vec![value_info("x", &[None, Some(3), Some(SIZE as i64), Some(SIZE as i64)])],
        output: vec![value_info("probs", &[None, Some(classes as i64)])],
        ..Default::default()
    };
    pb::ModelProto {
        ir_version: 7,
        opset_import: vec![pb::OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        producer_name: "test".into(),
        graph: Some(graph),
        metadata_props: meta
            .iter()
            .map(|(k, v)| pb::StringStringEntryProto {
                key: k.to_string(),
                value: v.to_string(),
            })
            .collect(),
        ..Default::default()
    }
    .encode_to_vec()
}

const META: [(&str, &str); 4] = [
    ("class_names", "[\"background\", \"waste\"]"),
    ("input_layout", "NCHW"),
    ("input_scale", "0.00392156862745098"),
    ("output_kind", "probabilities"),
];

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

fn tensor(seed: u32) -> TileTensor {
    let mut data = Vec::with_capacity(SIZE * SIZE * 3);
    for i in 0..(SIZE * SIZE) as u32 {
        let h = i.wrapping_mul(2_654_435_761).wrapping_add(seed.wrapping_mul(40_503));
        data.extend_from_slice(&[(h >> 8) as u8, (h >> 16) as u8 / (1 + seed as u8 % 3), (h >> 24) as u8]);
    }
    TileTensor {
        tile_id: TileId::new(0, seed),
        size: SIZE,
        data,
        source_window: PixelWindow::new(0, 0, SIZE as u32, SIZE as u32),
        valid_fraction: 1.0,
    }
}

fn oracle(t: &TileTensor) -> [f64; 2] {
    let mut mean = [0f64; 3];
    for px in t.data.chunks_exact(3) {
        for c in 0..3 {
            mean[c] += f64::from(px[c]) / 255.0;
        }
    }
    let n = (SIZE * SIZE) as f64;
    let z: Vec<f64> = (0..2)
        .map(|k| f64::from(B[k]) + (0..3).map(|c| mean[c] / n * f64::from(W[c][k])).sum::<f64>())
        .collect();
    let e = [z[0].exp(), z[1].exp()];
    [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
}

#[test]
fn valid_model_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "ok.onnx", &model(2, &META));
    let clf = OnnxClassifier::load(&path).unwrap();
    assert_eq!(clf.contract().input_layout, InputLayout::Nchw);
    assert!(clf.id().starts_with("onnx:"));

    let batch: Vec<TileTensor> = (0..6).map(tensor).collect();
    let got = clf.predict_batch(&batch).unwrap();
    assert_eq!(got.len(), 6);
    for (t, p) in batch.iter().zip(&got) {
        let want = oracle(t);
        assert!((p[0] - want[0]).abs() < 1e-4 && (p[1] - want[1]).abs() < 1e-4, "{p:?} vs {want:?}");
        assert!((p[0] + p[1] - 1.0).abs() < 1e-5);
    }
    // Reloading the same bytes gives the same id.
    assert_eq!(OnnxClassifier::load(&path).unwrap().id(), clf.id());
}

fn contract_error(bytes: &[u8]) -> (String, String) {
    let dir = tempfile::tempdir().unwrap();
    match OnnxClassifier::load(write(dir.path(), "m.onnx", bytes)) {
        Err(Error::ModelContract { expected, found }) => (expected, found),
        Err(e) => panic!("expected a contract error, got {e:?}"),
        Ok(_) => panic!("model was accepted"),
    }
}

#[test]
fn thousand_class_output_is_rejected() {
    let (expected, found) = contract_error(&model(1000, &META));
    assert!(expected.contains("2 output classes"), "{expected}");
    assert!(found.contains("1000"), "{found}");
}

#[test]
fn reversed_class_names_are_rejected() {
    let mut meta = META;
    meta[0] = ("class_names", "waste,background");
    let (_, found) = contract_error(&model(2, &meta));
    assert!(found.contains("waste"), "{found}");
}

#[test]
fn missing_metadata_is_rejected() {
    let (expected, found) = contract_error(&model(2, &[]));
    assert!(expected.contains("class_names"));
    assert_eq!(found, "absent");
    let (expected, _) = contract_error(&model(2, &META[..1]));
    assert!(expected.contains("input_layout"));
}

#[test]
fn truncated_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = model(2, &META);
    let path = write(dir.path(), "cut.onnx", &bytes[..bytes.len() / 2]);
    let err = OnnxClassifier::load(&path).err().expect("truncated model loaded");
    assert!(matches!(err, Error::ModelParse(_)), "{err:?}");
    assert_eq!(err.exit_code(), 4);
}
