mod common;

use common::*;
use cqvqa_core::checkpoint;
use cqvqa_core::data::{generate_synthetic, SyntheticSpec};
use cqvqa_core::model::Head;
use cqvqa_core::nn::{Dense, Mlp};
use cqvqa_core::{
    build_answer_space, Dataset, EmbeddingTable, Model, ModelDims, ModelKind, Precision,
};

#[test]
fn gen_data_counts_and_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = gen(a.path(), 100);
    assert!(o.stdout.contains("wrote 400 records"), "{}", o.stdout);
    gen(b.path(), 100);
    for f in [
        "manifest.jsonl",
        "features.bin",
        "embeddings.bin",
        "vocab.txt",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let lines = std::fs::read_to_string(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 401);
}

#[test]
fn gen_data_rejects_small_margin() {
    let dir = tempfile::tempdir().unwrap();
    let o = cqvqa(&["gen-data", "--out", s(dir.path()), "--margin", "0.5"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("margin 0.5 must exceed"), "{}", o.stderr);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cqvqa_bin(&["train", "--no-such-flag"]).code, 1);
    assert_eq!(
        cqvqa_bin(&["train", "--profile", "desk", "--set", "colour=red"]).code,
        1
    );
    assert_eq!(cqvqa_bin(&["--help"]).code, 0);
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(
        cqvqa_bin(&["train", "--profile", "desk", "--manifest", s(&missing)]).code,
        2
    );

    gen(dir.path(), 20);
    let manifest = dir.path().join("manifest.jsonl");
    // Paper-scale dims against desk-scale data.
    let o = cqvqa_bin(&["train", "--manifest", s(&manifest)]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("expected 36, found 4"), "{}", o.stderr);

    let ckpt = dir.path().join("m.ckpt");
    let o = cqvqa_bin(&[
        "train",
        "--profile",
        "desk",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--lr0",
        "1e38",
        "--epochs",
        "3",
    ]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    assert!(
        o.stderr.contains("non-finite loss at epoch 0"),
        "{}",
        o.stderr
    );
}

#[test]
fn config_echo_and_predicted_routing_log() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 20);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "profile=desk\nepochs=2\ntrain_manifest=manifest.jsonl\ncheckpoint=m.ckpt\n",
    )
    .unwrap();
    let o = cqvqa(&["train", "--config", s(&cfg), "--routing", "predicted"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let header = o.stderr.lines().next().unwrap();
    assert!(header.contains("\"routing\":\"predicted\""), "{header}");
    assert!(header.contains("\"epochs\":\"2\""), "{header}");

    let log = std::fs::read_to_string(dir.path().join("m.ckpt.log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["config"]["routing"], "predicted");
    for l in &lines[1..] {
        for key in [
            "epoch",
            "lr",
            "loss",
            "l_q",
            "l_aa",
            "miss_rate",
            "category_accuracy",
            "answer_accuracy",
        ] {
            assert!(l.get(key).is_some(), "{key} missing from {l}");
        }
    }
    assert!(lines[1]["miss_rate"].as_f64().unwrap() > 0.0);
}

#[test]
fn trained_model_scores_perfectly_and_report_layout() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 50);
    let manifest = dir.path().join("manifest.jsonl");
    let ckpt = dir.path().join("m.ckpt");
    let o = cqvqa(&[
        "train",
        "--profile",
        "desk",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--epochs",
        "15",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);

    let report = dir.path().join("report.json");
    let o = cqvqa(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--report",
        s(&report),
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(
        lines[0].split_whitespace().collect::<Vec<_>>(),
        ["category", "count", "accuracy"]
    );
    for l in lines.iter().filter(|l| l.starts_with("category-")) {
        assert!(l.ends_with("100.00"), "{l}");
    }
    let footer: Vec<&str> = lines[lines.len() - 3..]
        .iter()
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(footer, ["Overall", "Arithmetic-MPT", "Harmonic-MPT"]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["overall"], 100.0);
    assert_eq!(json["harmonic_mpt"], 100.0);

    let a = cqvqa(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--index",
        "5",
    ]);
    let b = cqvqa(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--index",
        "5",
    ]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.stdout, b.stdout);
    assert!(
        a.stdout
            .starts_with("category: category-0\nanswer: c0-answer-2\n"),
        "{}",
        a.stdout
    );
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 10);
    let manifest = dir.path().join("manifest.jsonl");
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(
        cqvqa(&[
            "train",
            "--profile",
            "desk",
            "--manifest",
            s(&manifest),
            "--checkpoint",
            s(&ckpt),
            "--epochs",
            "1"
        ])
        .code,
        0
    );
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[4] = 77;
    std::fs::write(&ckpt, &bytes).unwrap();
    let o = cqvqa(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("version"), "{}", o.stderr);
}

#[test]
fn single_answer_category_has_probability_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSpec::uniform(
        2,
        3,
        40,
        cqvqa_core::DatasetDims {
            k: 4,
            d_v: 16,
            d_w: 8,
            n_w: 6,
        },
        3,
    );
    spec.answers_per_category = vec![3, 1];
    let mut data = generate_synthetic(&spec).unwrap();
    let manifest = data.write(dir.path(), Precision::F32).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = cqvqa(&[
        "train",
        "--profile",
        "desk",
        "--set",
        "n_c=2",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--epochs",
        "10",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    // Records 40.. belong to the single-answer category.
    let o = cqvqa(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--index",
        "45",
        "--json",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(o.stdout.trim()).unwrap();
    assert_eq!(v["category"], "category-1");
    assert_eq!(v["answer"], "c1-answer-0");
    assert_eq!(v["top5"].as_array().unwrap().len(), 1);
    assert_eq!(v["top5"][0]["probability"], 1.0);
}

// Reference forward pass in plain loops, independent of the tape.

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dense(d: &Dense<f64>, x: &[f64]) -> Vec<f64> {
    let w = d.weight.data();
    let n_in = x.len();
    (0..d.bias.numel())
        .map(|o| d.bias.data()[o] + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn mlp(m: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = dense(&m.hidden, x)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    softmax(&dense(&m.output, &h))
}

fn reference(
    model: &Model<f64>,
    emb: &EmbeddingTable<f64>,
    tokens: &[usize],
    regions: &[f64],
) -> (Vec<f64>, usize, Vec<f64>) {
    let d = model.dims;
    let l = &model.lstm;
    let gate = |w: &cqvqa_core::Tensor<f64>, b: &cqvqa_core::Tensor<f64>, z: &[f64]| {
        dense(
            &Dense {
                weight: w.clone(),
                bias: b.clone(),
            },
            z,
        )
    };
    let (mut h, mut c) = (vec![0.0; d.d_q], vec![0.0; d.d_q]);
    for &t in tokens {
        let mut z = emb.row(t).unwrap().to_vec();
        z.extend(&h);
        let i: Vec<f64> = gate(&l.w_input, &l.b_input, &z)
            .into_iter()
            .map(sigmoid)
            .collect();
        let f: Vec<f64> = gate(&l.w_forget, &l.b_forget, &z)
            .into_iter()
            .map(sigmoid)
            .collect();
        let g: Vec<f64> = gate(&l.w_cell, &l.b_cell, &z)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let o: Vec<f64> = gate(&l.w_output, &l.b_output, &z)
            .into_iter()
            .map(sigmoid)
            .collect();
        for j in 0..d.d_q {
            c[j] = f[j] * c[j] + i[j] * g[j];
            h[j] = o[j] * c[j].tanh();
        }
    }
    let q = dense(&model.fusion.question, &h);
    let v: Vec<Vec<f64>> = regions
        .chunks(d.d_v)
        .map(|r| dense(&model.fusion.visual, r))
        .collect();
    let raw: Vec<f64> = v
        .iter()
        .map(|vi| {
            let u: Vec<f64> = vi.iter().zip(&q).map(|(a, b)| a * b).collect();
            dense(&model.fusion.score, &u)[0]
        })
        .collect();
    let s = softmax(&raw);
    let fused: Vec<f64> = (0..d.d_f)
        .map(|j| q[j] * (0..d.k).map(|i| s[i] * v[i][j]).sum::<f64>())
        .collect();
    let Head::Hierarchical {
        categorizer,
        predictors,
    } = &model.head
    else {
        unreachable!()
    };
    let p_q = mlp(categorizer, &fused);
    let r = (0..p_q.len()).fold(0, |best, i| if p_q[i] > p_q[best] { i } else { best });
    let p_a = mlp(&predictors.heads[r], &fused);
    (p_q, r, p_a)
}

#[test]
fn predict_matches_hand_computed_forward() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 6);
    let manifest = dir.path().join("manifest.jsonl");
    let data = Dataset::<f64>::load(&manifest).unwrap();
    let emb = EmbeddingTable::<f64>::load(&dir.path().join("embeddings.bin")).unwrap();
    let space = build_answer_space(
        &data.categories,
        data.samples.iter().map(|s| (s.category, s.answer.as_str())),
    )
    .unwrap();
    let dims = ModelDims {
        k: 4,
        d_v: 16,
        d_w: 8,
        d_q: 5,
        d_f: 6,
        n_w: 6,
        n_c: 4,
        h_cq: 7,
        h_ap: 3,
    };
    let model = Model::<f64>::init(dims, space, ModelKind::Hierarchical, 99).unwrap();
    let ckpt = dir.path().join("toy.ckpt");
    checkpoint::save(&model, &ckpt, Precision::F64).unwrap();

    for index in [0, 7, 13, 22] {
        let o = cqvqa(&[
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--manifest",
            s(&manifest),
            "--precision",
            "f64",
            "--index",
            &index.to_string(),
            "--json",
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        let v: serde_json::Value = serde_json::from_str(o.stdout.trim()).unwrap();
        let sample = &data.samples[index];
        let (p_q, r, p_a) = reference(&model, &emb, &sample.tokens, sample.regions.tensor().data());
        assert_eq!(v["category"], model.space.categories()[r]);
        for (got, want) in v["p_q"].as_array().unwrap().iter().zip(&p_q) {
            assert!(
                (got.as_f64().unwrap() - want).abs() < 1e-12,
                "p_q {got} vs {want}"
            );
        }
        let best = (0..p_a.len()).fold(0, |b, i| if p_a[i] > p_a[b] { i } else { b });
        assert_eq!(v["answer"], model.space.answer(model.space.subset(r)[best]));
        assert!((v["top5"][0]["probability"].as_f64().unwrap() - p_a[best]).abs() < 1e-12);
    }
}
