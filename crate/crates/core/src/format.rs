//! Model file format.
//!
//! A model is one JSON document:
//!
//! ```text
//! {
//!   "input_shape": [2],
//!   "layers": [
//!     {"kind": "dropout", "rate": 0.1, "convention": "standard"},
//!     {
//!       "kind": "dense",
//!       "weights": [
//!         [1.0, 0.0],
//!         [0.0, 1.0]
//!       ],
//!       "bias": [0.0, 0.0]
//!     },
//!     {"kind": "relu"}
//!   ]
//! }
//! ```
//!
//! Layer kinds are `dense` (`weights` as `out×in` nested rows, `bias`),
//! `conv2d` (`kernel` as `H'×W'×C×C_out` nested arrays, `padding` of
//! `valid`/`same`, optional `bias`), `dropout` (`rate`, `convention` of
//! `standard`/`inverted`, both required), and the parameterless `relu`,
//! `sigmoid`, `softmax`.
//!
//! [`save_model`] writes a canonical form: fixed key order, fixed layout, and
//! floats in shortest round-trip notation, so saving is byte-stable and
//! loading a saved model reproduces every weight bit-exactly.

use serde_json::{Map, Value};

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::network::{DropoutConvention, LayerSpec, NetworkSpec};
use crate::tensor::Tensor;

/// Parses and validates a model document.
pub fn load_model(text: &str) -> Result<NetworkSpec> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed document: {e}")))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Format("top level must be an object".into()))?;
    for key in obj.keys() {
        if key != "input_shape" && key != "layers" {
            return Err(Error::Format(format!("unknown top-level key `{key}`")));
        }
    }
    let input_shape = obj
        .get("input_shape")
        .ok_or_else(|| Error::Format("missing `input_shape`".into()))
        .and_then(|v| parse_extents(v).map_err(Error::Format))?;
    let layers = obj
        .get("layers")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("missing `layers` array".into()))?;
    let layers = layers
        .iter()
        .enumerate()
        .map(|(i, v)| parse_layer(v).map_err(|m| Error::layer(i, m)))
        .collect::<Result<Vec<_>>>()?;
    NetworkSpec::new(input_shape, layers)
}

/// [`load_model`] on raw bytes, which must be UTF-8.
pub fn load_model_bytes(bytes: &[u8]) -> Result<NetworkSpec> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("model is not valid UTF-8: {e}")))?;
    load_model(text)
}

pub fn load_model_file(path: impl AsRef<std::path::Path>) -> Result<NetworkSpec> {
    load_model_bytes(&std::fs::read(path)?)
}

type Parsed<T> = std::result::Result<T, String>;

fn parse_layer(v: &Value) -> Parsed<LayerSpec> {
    let obj = v.as_object().ok_or("layer must be an object")?;
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or("missing string field `kind`")?;
    let allowed: &[&str] = match kind {
        "dense" => &["kind", "weights", "bias"],
        "conv2d" => &["kind", "kernel", "bias", "padding"],
        "dropout" => &["kind", "rate", "convention"],
        "relu" | "sigmoid" | "softmax" => &["kind"],
        other => return Err(format!("unknown layer kind `{other}`")),
    };
    if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(format!("unexpected field `{extra}` for {kind} layer"));
    }
    Ok(match kind {
        "dense" => {
            let weights = parse_nested(field(obj, "weights")?, 2)?;
            let bias = parse_numbers(field(obj, "bias")?)?;
            LayerSpec::Dense { weights, bias }
        }
        "conv2d" => {
            let kernel = parse_nested(field(obj, "kernel")?, 4)?;
            let padding: Padding = serde_json::from_value(field(obj, "padding")?.clone())
                .map_err(|_| "`padding` must be \"valid\" or \"same\"".to_string())?;
            let bias = obj.get("bias").map(parse_numbers).transpose()?;
            LayerSpec::Conv2d {
                kernel,
                bias,
                padding,
            }
        }
        "dropout" => {
            let rate = field(obj, "rate")?
                .as_f64()
                .ok_or("`rate` must be a number")?;
            let convention: DropoutConvention =
                serde_json::from_value(field(obj, "convention")?.clone()).map_err(|_| {
                    "`convention` must be \"standard\" or \"inverted\"".to_string()
                })?;
            LayerSpec::Dropout { rate, convention }
        }
        "relu" => LayerSpec::Relu,
        "sigmoid" => LayerSpec::Sigmoid,
        _ => LayerSpec::Softmax,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Parsed<&'a Value> {
    obj.get(name).ok_or_else(|| format!("missing field `{name}`"))
}

fn parse_extents(v: &Value) -> Parsed<Vec<usize>> {
    v.as_array()
        .ok_or("`input_shape` must be an array")?
        .iter()
        .map(|e| {
            e.as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| format!("extent {e} is not a nonnegative integer"))
        })
        .collect()
}

fn parse_numbers(v: &Value) -> Parsed<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| format!("expected an array of numbers, got {v}"))?
        .iter()
        .map(|e| e.as_f64().ok_or_else(|| format!("expected a number, got {e}")))
        .collect()
}

/// Rectangular nested array of the given depth.
fn parse_nested(v: &Value, depth: usize) -> Parsed<Tensor> {
    let mut shape: Vec<Option<usize>> = vec![None; depth];
    let mut data = Vec::new();
    collect_nested(v, 0, &mut shape, &mut data)?;
    let shape: Vec<usize> = shape.into_iter().map(|s| s.unwrap_or(0)).collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

fn collect_nested(
    v: &Value,
    level: usize,
    shape: &mut [Option<usize>],
    data: &mut Vec<f64>,
) -> Parsed<()> {
    let items = v
        .as_array()
        .ok_or_else(|| format!("expected a nested array of depth {}", shape.len()))?;
    match shape[level] {
        Some(n) if n != items.len() => {
            return Err(format!(
                "ragged nested array at depth {level}: {} vs {n}",
                items.len()
            ))
        }
        _ => shape[level] = Some(items.len()),
    }
    for item in items {
        if level + 1 == shape.len() {
            data.push(
                item.as_f64()
                    .ok_or_else(|| format!("expected a number, got {item}"))?,
            );
        } else {
            collect_nested(item, level + 1, shape, data)?;
        }
    }
    Ok(())
}

/// Canonical text form of a model.
pub fn save_model(net: &NetworkSpec) -> String {
    let mut out = String::new();
    out.push_str("{\n  \"input_shape\": ");
    write_extents(&mut out, net.input_shape());
    out.push_str(",\n  \"layers\": [");
    for (i, layer) in net.layers().iter().enumerate() {
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        write_layer(&mut out, layer);
    }
    if !net.layers().is_empty() {
        out.push_str("\n  ");
    }
    out.push_str("]\n}\n");
    out
}

fn write_layer(out: &mut String, layer: &LayerSpec) {
    const INDENT: &str = "    ";
    match layer {
        LayerSpec::Dense { weights, bias } => {
            out.push_str(INDENT);
            out.push_str("{\n      \"kind\": \"dense\",\n      \"weights\": ");
            write_nested(out, weights.shape(), weights.data(), 1, 6);
            out.push_str(",\n      \"bias\": ");
            write_flat(out, bias);
            out.push_str("\n    }");
        }
        LayerSpec::Conv2d {
            kernel,
            bias,
            padding,
        } => {
            out.push_str(INDENT);
            out.push_str("{\n      \"kind\": \"conv2d\",\n      \"padding\": ");
            out.push_str(match padding {
                Padding::Valid => "\"valid\"",
                Padding::Same => "\"same\"",
            });
            out.push_str(",\n      \"kernel\": ");
            write_nested(out, kernel.shape(), kernel.data(), 2, 6);
            if let Some(b) = bias {
                out.push_str(",\n      \"bias\": ");
                write_flat(out, b);
            }
            out.push_str("\n    }");
        }
        LayerSpec::Dropout { rate, convention } => {
            out.push_str(INDENT);
            out.push_str("{\"kind\": \"dropout\", \"rate\": ");
            write_f64(out, *rate);
            out.push_str(", \"convention\": \"");
            out.push_str(convention.as_str());
            out.push_str("\"}");
        }
        other => {
            out.push_str(INDENT);
            out.push_str("{\"kind\": \"");
            out.push_str(other.kind());
            out.push_str("\"}");
        }
    }
}

fn write_extents(out: &mut String, extents: &[usize]) {
    out.push('[');
    for (i, e) in extents.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&e.to_string());
    }
    out.push(']');
}

fn write_f64(out: &mut String, v: f64) {
    let mut buf = ryu::Buffer::new();
    out.push_str(buf.format_finite(v));
}

fn write_flat(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, &v) in values.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write_f64(out, v);
    }
    out.push(']');
}

/// Nested array; the `inline_depth` innermost levels go on one line.
fn write_nested(out: &mut String, shape: &[usize], data: &[f64], inline_depth: usize, indent: usize) {
    if shape.len() <= inline_depth {
        write_inline(out, shape, data);
        return;
    }
    let n = shape[0];
    if n == 0 {
        out.push_str("[]");
        return;
    }
    let stride = data.len() / n;
    out.push('[');
    for i in 0..n {
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        out.push_str(&" ".repeat(indent + 2));
        write_nested(
            out,
            &shape[1..],
            &data[i * stride..(i + 1) * stride],
            inline_depth,
            indent + 2,
        );
    }
    out.push('\n');
    out.push_str(&" ".repeat(indent));
    out.push(']');
}

fn write_inline(out: &mut String, shape: &[usize], data: &[f64]) {
    if shape.len() == 1 {
        write_flat(out, data);
        return;
    }
    let n = shape[0];
    let stride = data.len().checked_div(n).unwrap_or(0);
    out.push('[');
    for i in 0..n {
        if i > 0 {
            out.push_str(", ");
        }
        write_inline(out, &shape[1..], &data[i * stride..(i + 1) * stride]);
    }
    out.push(']');
}
