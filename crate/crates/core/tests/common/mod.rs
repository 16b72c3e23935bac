#![allow(dead_code)]

use cqvqa_core::data::{generate_synthetic, DatasetDims, SyntheticSpec};
use cqvqa_core::hier::build_answer_space;
use cqvqa_core::{AnswerSpace, Dataset, EmbeddingTable, ModelDims, Precision, Scalar};
use tempfile::TempDir;

/// Small sizes for finite-difference checks.
pub fn toy_dims() -> ModelDims {
    ModelDims {
        k: 3,
        d_v: 5,
        d_w: 4,
        d_q: 3,
        d_f: 4,
        n_w: 4,
        n_c: 2,
        h_cq: 4,
        h_ap: 4,
    }
}

pub fn desk_data_dims() -> DatasetDims {
    DatasetDims {
        k: 4,
        d_v: 16,
        d_w: 8,
        n_w: 6,
    }
}

pub fn desk_dims(n_c: usize) -> ModelDims {
    ModelDims {
        k: 4,
        d_v: 16,
        d_w: 8,
        d_q: 32,
        d_f: 32,
        n_w: 6,
        n_c,
        h_cq: 32,
        h_ap: 32,
    }
}

pub struct Loaded<T> {
    pub dir: TempDir,
    pub data: Dataset<T>,
    pub emb: EmbeddingTable<T>,
    pub space: AnswerSpace,
}

/// Generates synthetic data, writes it to a temporary directory and reads it back.
pub fn synthetic<T: Scalar>(spec: &SyntheticSpec) -> Loaded<T> {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = generate_synthetic(spec).unwrap();
    let manifest = gen.write(dir.path(), Precision::F64).unwrap();
    let data = Dataset::<T>::load(&manifest).unwrap();
    let emb = EmbeddingTable::load(&dir.path().join("embeddings.bin")).unwrap();
    let space = space_of(&data);
    Loaded {
        dir,
        data,
        emb,
        space,
    }
}

pub fn space_of<T>(data: &Dataset<T>) -> AnswerSpace {
    build_answer_space(
        &data.categories,
        data.samples.iter().map(|s| (s.category, s.answer.as_str())),
    )
    .unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
