//! Binary model checkpoints.
//!
//! Layout (all integers u32 little-endian, strings length-prefixed UTF-8):
//!
//! ```text
//! magic "CQCK" | version | precision code | kind (0 hierarchical, 1 flat)
//! d_v d_w d_q d_f n_w n_c k h_cq h_ap | n_a for each of the n_c categories
//! block count | per block: name, rank, extents, row-major values
//! answer space: n_c category names, |A| answers, n_c subsets (len, ids)
//! ```
//!
//! Blocks appear in the fixed order of [`Model::named_params`].

use std::path::Path;

use crate::binio::{self, put_str, put_u32, put_values, Reader};
use crate::error::{Error, Result};
use crate::hier::{AnswerSpace, PredictorParams};
use crate::model::{Head, Model, ModelDims, ModelKind};
use crate::nn::Mlp;
use crate::tensor::{Precision, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"CQCK";
const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &Model<T>, precision: Precision) -> Vec<u8> {
    let d = &model.dims;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, precision.code());
    put_u32(
        &mut out,
        match model.kind() {
            ModelKind::Hierarchical => 0,
            ModelKind::Flat => 1,
        },
    );
    for v in [
        d.d_v, d.d_w, d.d_q, d.d_f, d.n_w, d.n_c, d.k, d.h_cq, d.h_ap,
    ] {
        put_u32(&mut out, v as u32);
    }
    for n in model.space.subset_sizes() {
        put_u32(&mut out, n as u32);
    }
    let params = model.named_params();
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params {
        put_str(&mut out, &name);
        put_u32(&mut out, t.shape().len() as u32);
        for &e in t.shape() {
            put_u32(&mut out, e as u32);
        }
        put_values(&mut out, t.data(), precision);
    }
    let space = &model.space;
    put_u32(&mut out, space.n_c() as u32);
    space.categories().iter().for_each(|c| put_str(&mut out, c));
    put_u32(&mut out, space.len() as u32);
    space.answers().iter().for_each(|a| put_str(&mut out, a));
    for r in 0..space.n_c() {
        let subset = space.subset(r);
        put_u32(&mut out, subset.len() as u32);
        subset.iter().for_each(|&g| put_u32(&mut out, g as u32));
    }
    out
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path, precision: Precision) -> Result<()> {
    binio::write_file(path, &to_bytes(model, precision))
}

/// Header fields, readable without knowing the stored precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub precision: Precision,
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub subset_sizes: Vec<usize>,
}

fn read_info(r: &mut Reader<'_>) -> Result<CheckpointInfo> {
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let precision = r.precision()?;
    let kind = match r.u32()? {
        0 => ModelKind::Hierarchical,
        1 => ModelKind::Flat,
        other => return Err(r.err(format!("unknown model kind {other}"))),
    };
    let mut v = [0usize; 9];
    for slot in &mut v {
        *slot = r.usize()?;
    }
    let [d_v, d_w, d_q, d_f, n_w, n_c, k, h_cq, h_ap] = v;
    let dims = ModelDims {
        k,
        d_v,
        d_w,
        d_q,
        d_f,
        n_w,
        n_c,
        h_cq,
        h_ap,
    };
    dims.validate().map_err(|e| r.err(e.to_string()))?;
    let subset_sizes = (0..n_c).map(|_| r.usize()).collect::<Result<_>>()?;
    Ok(CheckpointInfo {
        precision,
        kind,
        dims,
        subset_sizes,
    })
}

pub fn read_info_from(path: &Path) -> Result<CheckpointInfo> {
    let bytes = binio::read_file(path)?;
    read_info(&mut Reader::new(path, &bytes))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = binio::read_file(path)?;
    from_bytes(path, &bytes)
}

pub fn from_bytes<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader::new(path, bytes);
    let info = read_info(&mut r)?;
    let count = r.usize()?;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.usize()?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = r.values::<T>(n, info.precision)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(r.err(format!("non-finite value in block {name}")));
        }
        let t = Tensor::new(shape, values).map_err(|e| r.err(format!("block {name}: {e}")))?;
        blocks.push((name, t));
    }

    let n_c = r.usize()?;
    let categories = (0..n_c).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let n_answers = r.usize()?;
    let answers = (0..n_answers)
        .map(|_| r.string())
        .collect::<Result<Vec<_>>>()?;
    let mut subsets = Vec::with_capacity(n_c);
    for _ in 0..n_c {
        let len = r.usize()?;
        subsets.push((0..len).map(|_| r.usize()).collect::<Result<Vec<_>>>()?);
    }
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    let space = AnswerSpace::from_parts(categories, answers, subsets)
        .map_err(|e| r.err(format!("answer space: {e}")))?;
    if space.subset_sizes() != info.subset_sizes || space.n_c() != info.dims.n_c {
        return Err(r.err("answer space disagrees with header sizes"));
    }

    // Build a zero model of the right architecture and fill it block by block.
    let d = info.dims;
    let mut model: Model<T> = Model {
        dims: d,
        lstm: crate::encoders::LstmParams::zeros(d.d_w, d.d_q),
        fusion: crate::attention::FusionParams {
            visual: crate::nn::Dense::zeros(d.d_v, d.d_f),
            question: crate::nn::Dense::zeros(d.d_q, d.d_f),
            score: crate::nn::Dense::zeros(d.d_f, 1),
        },
        head: match info.kind {
            ModelKind::Hierarchical => Head::Hierarchical {
                categorizer: Mlp::zeros(d.d_f, d.h_cq, d.n_c),
                predictors: PredictorParams::zeros(d.d_f, d.h_ap, &space),
            },
            ModelKind::Flat => Head::Flat(Mlp::zeros(d.d_f, d.h_ap, space.len())),
        },
        space,
    };
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != blocks.len() {
        return Err(r.err(format!(
            "expected {} parameter blocks, found {}",
            expected.len(),
            blocks.len()
        )));
    }
    for ((name, shape), (got_name, t)) in expected.iter().zip(&blocks) {
        if name != got_name || shape.as_slice() != t.shape() {
            return Err(r.err(format!(
                "block {got_name} {:?} where {name} {shape:?} was expected",
                t.shape()
            )));
        }
    }
    for (slot, (_, t)) in model.params_mut().into_iter().zip(blocks) {
        *slot = t;
    }
    Ok(model)
}

/// Errors if a checkpoint's input sizes disagree with a dataset.
pub fn check_compatible(dims: &ModelDims, data: &crate::data::DatasetDims) -> Result<()> {
    for (what, expected, found) in [
        ("region count k", dims.k, data.k),
        ("region feature width d_v", dims.d_v, data.d_v),
        ("word embedding width d_w", dims.d_w, data.d_w),
        ("question length n_w", dims.n_w, data.n_w),
    ] {
        if expected != found {
            return Err(Error::DimensionMismatch {
                what: what.into(),
                expected,
                found,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hier::build_answer_space;

    fn toy(kind: ModelKind) -> Model<f64> {
        let cats = vec!["color".to_string(), "absurd".to_string()];
        let space =
            build_answer_space(&cats, [(0, "red"), (0, "blue"), (1, "Does-Not-Apply")]).unwrap();
        let dims = ModelDims {
            k: 3,
            d_v: 5,
            d_w: 4,
            d_q: 3,
            d_f: 4,
            n_w: 6,
            n_c: 2,
            h_cq: 4,
            h_ap: 4,
        };
        Model::init(dims, space, kind, 11).unwrap()
    }

    #[test]
    fn round_trip_both_kinds() {
        for kind in [ModelKind::Hierarchical, ModelKind::Flat] {
            let m = toy(kind);
            let bytes = to_bytes(&m, Precision::F64);
            let back: Model<f64> = from_bytes(Path::new("mem"), &bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(to_bytes(&back, Precision::F64), bytes);
        }
    }

    #[test]
    fn f32_storage_loads_as_either_width() {
        let m = toy(ModelKind::Hierarchical).cast::<f32>();
        let bytes = to_bytes(&m, Precision::F32);
        let narrow: Model<f32> = from_bytes(Path::new("mem"), &bytes).unwrap();
        assert_eq!(narrow, m);
        let wide: Model<f64> = from_bytes(Path::new("mem"), &bytes).unwrap();
        assert_eq!(wide.cast::<f32>(), m);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let bytes = to_bytes(&toy(ModelKind::Hierarchical), Precision::F64);
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let err = from_bytes::<f64>(Path::new("mem"), &bad_magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        let err = from_bytes::<f64>(Path::new("mem"), &bad_version).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert!(from_bytes::<f64>(Path::new("mem"), &bytes[..bytes.len() - 1]).is_err());
    }
}
