//! Benchmark workload generators: MLP chains and scaled dot-product
//! attention, in f32 or int8, plus small random graphs for testing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{infer_shapes, AttrValue, Attrs, DataType, Graph, OpKind, TensorId, TensorProperty};
use crate::value::{Data, DenseValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    Int8,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "int8" => Ok(Precision::Int8),
            _ => Err(format!("unknown precision `{s}` (expected f32 or int8)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Mlp { widths: Vec<usize> },
    Mha { seq: usize, hidden: usize, heads: usize },
}

/// One row of the workload table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadRow {
    pub name: String,
    pub batches: Vec<usize>,
    pub shape: Shape,
}

pub fn table() -> Vec<WorkloadRow> {
    let mlp = |name: &str, w: &[usize]| WorkloadRow { name: name.into(), batches: vec![32, 64, 128, 256, 512], shape: Shape::Mlp { widths: w.to_vec() } };
    let mha = |name: &str, seq, hidden, heads| WorkloadRow { name: name.into(), batches: vec![32, 64, 128], shape: Shape::Mha { seq, hidden, heads } };
    vec![
        mlp("MLP-1", &[13, 512, 256, 128]),
        mlp("MLP-2", &[479, 1024, 1024, 512, 256, 1]),
        mha("MHA-1", 128, 768, 8),
        mha("MHA-2", 128, 768, 12),
        mha("MHA-3", 384, 1024, 8),
        mha("MHA-4", 512, 1024, 16),
    ]
}

pub fn row(name: &str) -> Option<WorkloadRow> {
    table().into_iter().find(|r| r.name.eq_ignore_ascii_case(name))
}

/// A generated benchmark instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchConfig {
    pub name: String,
    pub batch: usize,
    pub shape: Shape,
    pub precision: Precision,
    /// Divisor applied to the batch and the attention sequence length.
    pub scale_factor: usize,
}

impl BenchConfig {
    pub fn new(row: &WorkloadRow, batch: usize, precision: Precision, scale_factor: usize) -> BenchConfig {
        let s = scale_factor.max(1);
        let shape = match &row.shape {
            Shape::Mha { seq, hidden, heads } => Shape::Mha { seq: (seq / s).max(1), hidden: *hidden, heads: *heads },
            sh => sh.clone(),
        };
        BenchConfig { name: row.name.clone(), batch: (batch / s).max(1), shape, precision, scale_factor: s }
    }

    pub fn graph(&self) -> Graph {
        match &self.shape {
            Shape::Mlp { widths } => mlp_graph(self.batch, widths, self.precision),
            Shape::Mha { seq, hidden, heads } => mha_graph(self.batch, *seq, *hidden, *heads, self.precision),
        }
    }

    pub fn label(&self) -> String {
        let p = match self.precision {
            Precision::F32 => "f32",
            Precision::Int8 => "int8",
        };
        format!("{} {p} b{}", self.name, self.batch)
    }
}

fn attrs(kv: &[(&str, AttrValue)]) -> Attrs {
    kv.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn var(g: &mut Graph, dt: DataType, shape: &[usize]) -> TensorId {
    g.add_tensor(dt, shape.to_vec(), TensorProperty::Variable)
}

fn op(g: &mut Graph, kind: OpKind, a: Attrs, inputs: Vec<TensorId>, dt: DataType, shape: &[usize]) -> TensorId {
    let t = var(g, dt, shape);
    g.add_op(kind, a, inputs, vec![t]);
    t
}

const ACT_SCALE: f64 = 1.0 / 16.0;
const ACT_ZERO: f64 = 8.0;

fn quantize(g: &mut Graph, x: TensorId, shape: &[usize]) -> TensorId {
    let a = attrs(&[("scale", AttrValue::Float(ACT_SCALE)), ("zero_point", AttrValue::Float(ACT_ZERO)), ("to", AttrValue::Str("u8".into()))]);
    op(g, OpKind::Quantize, a, vec![x], DataType::U8, shape)
}

fn dequantize(g: &mut Graph, x: TensorId, shape: &[usize]) -> TensorId {
    let a = attrs(&[("scale", AttrValue::Float(ACT_SCALE)), ("zero_point", AttrValue::Float(ACT_ZERO))]);
    op(g, OpKind::Dequantize, a, vec![x], DataType::F32, shape)
}

/// Chained `MatMul -> ReLU` layers with constant weights. The int8 form
/// quantizes activations to u8 and weights to s8 with per-channel scales.
pub fn mlp_graph(batch: usize, widths: &[usize], prec: Precision) -> Graph {
    let mut g = Graph::new();
    let in_dt = if prec == Precision::F32 { DataType::F32 } else { DataType::U8 };
    let mut x = var(&mut g, in_dt, &[batch, widths[0]]);
    g.inputs.push(x);
    for w in widths.windows(2) {
        let (k, n) = (w[0], w[1]);
        let out = [batch, n];
        let y = match prec {
            Precision::F32 => {
                let wt = g.add_tensor(DataType::F32, vec![k, n], TensorProperty::Constant);
                g.inputs.push(wt);
                op(&mut g, OpKind::MatMul, Attrs::new(), vec![x, wt], DataType::F32, &out)
            }
            Precision::Int8 => {
                let wq = g.add_tensor(DataType::S8, vec![k, n], TensorProperty::Constant);
                g.inputs.push(wq);
                let xf = dequantize(&mut g, x, &[batch, k]);
                let scales: Vec<f64> = (0..n).map(|j| (1.0 + (j % 7) as f64 / 8.0) / (128.0 * (k as f64).sqrt())).collect();
                let wf = op(
                    &mut g,
                    OpKind::Dequantize,
                    attrs(&[("scale", AttrValue::Floats(scales)), ("axis", AttrValue::Int(1))]),
                    vec![wq],
                    DataType::F32,
                    &[k, n],
                );
                op(&mut g, OpKind::MatMul, Attrs::new(), vec![xf, wf], DataType::F32, &out)
            }
        };
        let r = op(&mut g, OpKind::ReLU, Attrs::new(), vec![y], DataType::F32, &out);
        x = match prec {
            Precision::F32 => r,
            Precision::Int8 => quantize(&mut g, r, &out),
        };
    }
    g.outputs.push(x);
    infer_shapes(&g).expect("generated MLP is well formed")
}

/// Scaled dot-product attention over `[batch, heads, seq, hidden / heads]`:
/// `softmax(Q Kt / sqrt(d) + mask) V` with a `[batch, 1, 1, seq]` mask.
/// The int8 form feeds u8 Q, K, V through dequantize and quantizes both the
/// softmax output and the result.
pub fn mha_graph(batch: usize, seq: usize, hidden: usize, heads: usize, prec: Precision) -> Graph {
    let d = hidden / heads;
    let mut g = Graph::new();
    let qkv_shape = [batch, heads, seq, d];
    let in_dt = if prec == Precision::F32 { DataType::F32 } else { DataType::U8 };
    let q = var(&mut g, in_dt, &qkv_shape);
    let k = var(&mut g, in_dt, &qkv_shape);
    let v = var(&mut g, in_dt, &qkv_shape);
    let mask = var(&mut g, DataType::F32, &[batch, 1, 1, seq]);
    g.inputs = vec![q, k, v, mask];
    let (q, k, v) = match prec {
        Precision::F32 => (q, k, v),
        Precision::Int8 => (dequantize(&mut g, q, &qkv_shape), dequantize(&mut g, k, &qkv_shape), dequantize(&mut g, v, &qkv_shape)),
    };
    let kt = op(&mut g, OpKind::Transpose, attrs(&[("perm", AttrValue::Ints(vec![0, 1, 3, 2]))]), vec![k], DataType::F32, &[batch, heads, d, seq]);
    let s_shape = [batch, heads, seq, seq];
    let s = op(&mut g, OpKind::MatMul, Attrs::new(), vec![q, kt], DataType::F32, &s_shape);
    let scale = g.add_literal(DenseValue::scalar_f32((d as f32).sqrt()));
    let s = op(&mut g, OpKind::Div, Attrs::new(), vec![s, scale], DataType::F32, &s_shape);
    let s = op(&mut g, OpKind::Add, Attrs::new(), vec![s, mask], DataType::F32, &s_shape);
    let mut p = op(&mut g, OpKind::Softmax, attrs(&[("axis", AttrValue::Int(-1))]), vec![s], DataType::F32, &s_shape);
    if prec == Precision::Int8 {
        let pa = attrs(&[("scale", AttrValue::Float(1.0 / 255.0)), ("to", AttrValue::Str("u8".into()))]);
        let pq = op(&mut g, OpKind::Quantize, pa, vec![p], DataType::U8, &s_shape);
        p = op(&mut g, OpKind::Dequantize, attrs(&[("scale", AttrValue::Float(1.0 / 255.0))]), vec![pq], DataType::F32, &s_shape);
    }
    let mut o = op(&mut g, OpKind::MatMul, Attrs::new(), vec![p, v], DataType::F32, &qkv_shape);
    if prec == Precision::Int8 {
        o = quantize(&mut g, o, &qkv_shape);
    }
    g.outputs = vec![o];
    infer_shapes(&g).expect("generated attention is well formed")
}

/// Seeded inputs for every graph input. Floats are drawn from `[0, 1)` so
/// f32 accumulation is free of cancellation and comparable to a wider
/// reference within tight relative tolerances; f32 right-hand matmul
/// operands are scaled by the reduction length to keep activations bounded.
pub fn random_inputs(g: &Graph, seed: u64) -> BTreeMap<TensorId, DenseValue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let consumers = g.consumers();
    g.inputs
        .iter()
        .map(|&t| {
            let lt = g.tensor(t);
            let mut hi = 1.0f32;
            let feeds_matmul_b = consumers.get(&t).is_some_and(|cs| cs.iter().any(|c| g.op(*c).kind == OpKind::MatMul && g.op(*c).inputs[1] == t));
            if lt.dtype == DataType::F32 && feeds_matmul_b && lt.shape.len() >= 2 {
                hi = 2.0 / lt.shape[lt.shape.len() - 2] as f32;
            }
            let mut v = DenseValue::random(&mut rng, lt.dtype, lt.shape.clone(), 0.0, hi);
            if let Data::S8(d) = &mut v.data {
                // keep s8 weights symmetric
                d.iter_mut().for_each(|x| *x = (*x).max(-127));
            }
            (t, v)
        })
        .collect()
}

/// Zero-valued inputs.
pub fn zero_inputs(g: &Graph) -> BTreeMap<TensorId, DenseValue> {
    g.inputs.iter().map(|&t| (t, DenseValue::zeros(g.tensor(t).dtype, g.tensor(t).shape.clone()))).collect()
}

/// A small random f32 graph: one or two matmuls (optionally batched, with a
/// transposed operand) surrounded by elementwise ops, reductions and
/// broadcasts.
pub fn random_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let f = DataType::F32;
    let batch: Vec<usize> = if rng.gen_bool(0.3) { vec![rng.gen_range(1..=3)] } else { vec![] };
    let dim = |rng: &mut ChaCha8Rng| *[1usize, 3, 7, 16, 24, 33, 40, 64].choose(rng).unwrap();
    let (m, k, n) = (dim(&mut rng).max(2), dim(&mut rng), dim(&mut rng).max(2));
    let sh = |r: usize, c: usize| [batch.clone(), vec![r, c]].concat();
    let transpose_a = rng.gen_bool(0.3);
    let a = var(&mut g, f, &if transpose_a { sh(k, m) } else { sh(m, k) });
    g.inputs.push(a);
    let a = if transpose_a {
        let r = batch.len() + 2;
        let mut perm: Vec<i64> = (0..r as i64).collect();
        perm.swap(r - 1, r - 2);
        op(&mut g, OpKind::Transpose, attrs(&[("perm", AttrValue::Ints(perm))]), vec![a], f, &sh(m, k))
    } else {
        a
    };
    let b_prop = if rng.gen_bool(0.6) { TensorProperty::Constant } else { TensorProperty::Variable };
    let b = g.add_tensor(f, sh(k, n), b_prop);
    g.inputs.push(b);
    let mut x = op(&mut g, OpKind::MatMul, Attrs::new(), vec![a, b], f, &sh(m, n));
    let mut cols = n;
    let steps = rng.gen_range(1..=4);
    for _ in 0..steps {
        let out = sh(m, cols);
        x = match rng.gen_range(0..8) {
            0 => op(&mut g, OpKind::ReLU, Attrs::new(), vec![x], f, &out),
            1 => {
                let bias = g.add_tensor(f, vec![cols], TensorProperty::Constant);
                g.inputs.push(bias);
                op(&mut g, OpKind::BiasAdd, Attrs::new(), vec![x, bias], f, &out)
            }
            2 => {
                let s = g.add_literal(DenseValue::scalar_f32(rng.gen_range(0.5..2.0)));
                op(&mut g, OpKind::Mul, Attrs::new(), vec![x, s], f, &out)
            }
            3 => op(&mut g, OpKind::Softmax, attrs(&[("axis", AttrValue::Int(-1))]), vec![x], f, &out),
            4 => {
                let kind = if rng.gen_bool(0.5) { OpKind::ReduceSum } else { OpKind::ReduceMax };
                let r = op(&mut g, kind, attrs(&[("axis", AttrValue::Int(-1)), ("keepdims", AttrValue::Bool(true))]), vec![x], f, &sh(m, 1));
                op(&mut g, OpKind::Add, Attrs::new(), vec![x, r], f, &out)
            }
            5 => {
                let y = g.add_tensor(f, out.clone(), TensorProperty::Variable);
                g.inputs.push(y);
                op(&mut g, OpKind::Max, Attrs::new(), vec![x, y], f, &out)
            }
            6 => {
                let n2 = dim(&mut rng).max(2);
                let w = g.add_tensor(f, sh(cols, n2), TensorProperty::Constant);
                g.inputs.push(w);
                cols = n2;
                op(&mut g, OpKind::MatMul, Attrs::new(), vec![x, w], f, &sh(m, n2))
            }
            _ => {
                let h = g.add_literal(DenseValue::scalar_f32(-0.5));
                let x2 = op(&mut g, OpKind::Mul, Attrs::new(), vec![x, h], f, &out);
                op(&mut g, OpKind::Exp, Attrs::new(), vec![x2], f, &out)
            }
        };
    }
    g.outputs.push(x);
    infer_shapes(&g).expect("random graph is well formed")
}
