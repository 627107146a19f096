//! Dense row-major tensor values used for graph inputs, outputs and literals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::DataType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dtype", content = "data", rename_all = "lowercase")]
pub enum Data {
    F32(Vec<f32>),
    S32(Vec<i32>),
    S8(Vec<i8>),
    U8(Vec<u8>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::S32(v) => v.len(),
            Data::S8(v) => v.len(),
            Data::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DataType {
        match self {
            Data::F32(_) => DataType::F32,
            Data::S32(_) => DataType::S32,
            Data::S8(_) => DataType::S8,
            Data::U8(_) => DataType::U8,
        }
    }

    pub fn zeros(dtype: DataType, len: usize) -> Self {
        match dtype {
            DataType::F32 => Data::F32(vec![0.0; len]),
            DataType::S32 => Data::S32(vec![0; len]),
            DataType::S8 => Data::S8(vec![0; len]),
            DataType::U8 => Data::U8(vec![0; len]),
        }
    }
}

/// A dense value: dtype, shape and flat row-major data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseValue {
    pub shape: Vec<usize>,
    #[serde(flatten)]
    pub data: Data,
}

impl DenseValue {
    pub fn new(shape: Vec<usize>, data: Data) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "data length does not match shape {shape:?}");
        DenseValue { shape, data }
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(shape, Data::F32(data))
    }

    pub fn s32(shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self::new(shape, Data::S32(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self::new(shape, Data::U8(data))
    }

    pub fn s8(shape: Vec<usize>, data: Vec<i8>) -> Self {
        Self::new(shape, Data::S8(data))
    }

    pub fn scalar_f32(v: f32) -> Self {
        Self::f32(vec![1], vec![v])
    }

    pub fn zeros(dtype: DataType, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        DenseValue { shape, data: Data::zeros(dtype, len) }
    }

    pub fn dtype(&self) -> DataType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Data::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Element `i` widened to f64.
    pub fn get_f64(&self, i: usize) -> f64 {
        match &self.data {
            Data::F32(v) => v[i] as f64,
            Data::S32(v) => v[i] as f64,
            Data::S8(v) => v[i] as f64,
            Data::U8(v) => v[i] as f64,
        }
    }

    /// Element `i` as an integer (f32 values are truncated).
    pub fn get_i64(&self, i: usize) -> i64 {
        match &self.data {
            Data::F32(v) => v[i] as i64,
            Data::S32(v) => v[i] as i64,
            Data::S8(v) => v[i] as i64,
            Data::U8(v) => v[i] as i64,
        }
    }

    /// Uniform random value; floats in `[lo, hi)`, integers over the full dtype range.
    pub fn random<R: Rng>(rng: &mut R, dtype: DataType, shape: Vec<usize>, lo: f32, hi: f32) -> Self {
        let n: usize = shape.iter().product();
        let data = match dtype {
            DataType::F32 => Data::F32((0..n).map(|_| rng.gen_range(lo..hi)).collect()),
            DataType::S32 => Data::S32((0..n).map(|_| rng.gen_range(-1000..1000)).collect()),
            DataType::S8 => Data::S8((0..n).map(|_| rng.gen()).collect()),
            DataType::U8 => Data::U8((0..n).map(|_| rng.gen()).collect()),
        };
        DenseValue { shape, data }
    }
}

/// Outcome of comparing two values under the crate's tolerance rules.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diff {
    pub max_abs: f64,
    pub max_rel: f64,
    /// Elements outside tolerance.
    pub violations: usize,
}

/// Tolerances: s32 exact, u8/s8 within `int_steps`, f32 `|a-b| <= atol + rtol*|b|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
    pub int8_steps: i64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rtol: 1e-5, atol: 1e-6, int8_steps: 1 }
    }
}

impl Tolerance {
    pub fn exact() -> Self {
        Tolerance { rtol: 0.0, atol: 0.0, int8_steps: 0 }
    }
}

/// Compares `actual` against `expected`. Panics on dtype or shape mismatch.
pub fn compare(actual: &DenseValue, expected: &DenseValue, tol: Tolerance) -> Diff {
    assert_eq!(actual.dtype(), expected.dtype(), "dtype mismatch");
    assert_eq!(actual.shape, expected.shape, "shape mismatch");
    let mut diff = Diff::default();
    for i in 0..actual.numel() {
        let (a, b) = (actual.get_f64(i), expected.get_f64(i));
        let abs = if a == b || (a.is_nan() && b.is_nan()) { 0.0 } else { (a - b).abs() };
        let rel = if b != 0.0 { abs / b.abs() } else { abs };
        if abs.is_nan() || abs > diff.max_abs {
            diff.max_abs = abs;
        }
        if rel > diff.max_rel {
            diff.max_rel = rel;
        }
        let ok = match actual.dtype() {
            DataType::F32 => abs <= tol.atol + tol.rtol * b.abs(),
            DataType::S32 => abs == 0.0,
            DataType::U8 | DataType::S8 => abs <= tol.int8_steps as f64,
        };
        if !ok {
            diff.violations += 1;
        }
    }
    diff
}

/// One tensor in a values file: `[{"id": 0, "shape": [..], "dtype": "f32", "data": [..]}]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub id: crate::graph::TensorId,
    #[serde(flatten)]
    pub value: DenseValue,
}

/// Parses a values file, checking that every data length matches its shape.
pub fn parse_values(text: &str) -> Result<std::collections::BTreeMap<crate::graph::TensorId, DenseValue>, String> {
    let vals: Vec<NamedValue> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut out = std::collections::BTreeMap::new();
    for nv in vals {
        let want: usize = nv.value.shape.iter().product();
        if nv.value.data.len() != want {
            return Err(format!("tensor {}: {} data elements for shape {:?}", nv.id, nv.value.data.len(), nv.value.shape));
        }
        let id = nv.id;
        if out.insert(id, nv.value).is_some() {
            return Err(format!("tensor {id}: given twice"));
        }
    }
    Ok(out)
}
