#![allow(dead_code)]

use std::path::PathBuf;

use mtcool::data::idx::encode_idx;
use mtcool::data::{LabeledSet, TaskData};
use mtcool::network::{MultiTaskModel, NetSpec};
use mtcool::tensor::Tensor;

/// Directory holding the MNIST IDX files, if all four are present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MTCOOL_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    mtcool::data::fetch::MNIST_FILES
        .iter()
        .all(|(f, _)| dir.join(f).is_file())
        .then_some(dir)
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

/// A valid three-image 2x2 images blob and matching labels blob.
pub fn valid_pair() -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
    (
        encode_idx(&[3, 2, 2], &pixels),
        encode_idx(&[3], &[7, 0, 9]),
    )
}

/// Twenty corrupted `(name, images, labels)` pairs, each of which must be
/// rejected.
pub fn corrupted_fixtures() -> Vec<(&'static str, Vec<u8>, Vec<u8>)> {
    let (img, lab) = valid_pair();
    let edit = |b: &[u8], f: &dyn Fn(&mut Vec<u8>)| {
        let mut v = b.to_vec();
        f(&mut v);
        v
    };
    vec![
        ("empty images file", vec![], lab.clone()),
        ("three-byte images file", img[..3].to_vec(), lab.clone()),
        (
            "non-zero first magic byte",
            edit(&img, &|v| v[0] = 1),
            lab.clone(),
        ),
        (
            "non-zero second magic byte",
            edit(&img, &|v| v[1] = 0x80),
            lab.clone(),
        ),
        (
            "signed-byte element type",
            edit(&img, &|v| v[2] = 0x09),
            lab.clone(),
        ),
        (
            "float element type",
            edit(&img, &|v| v[2] = 0x0d),
            lab.clone(),
        ),
        (
            "two-dimensional images",
            edit(&img, &|v| v[3] = 2),
            lab.clone(),
        ),
        ("zero dimensions", edit(&img, &|v| v[3] = 0), lab.clone()),
        (
            "header cut inside dimensions",
            img[..10].to_vec(),
            lab.clone(),
        ),
        (
            "payload short by one byte",
            img[..img.len() - 1].to_vec(),
            lab.clone(),
        ),
        ("payload missing entirely", img[..16].to_vec(), lab.clone()),
        (
            "trailing byte after payload",
            edit(&img, &|v| v.push(0)),
            lab.clone(),
        ),
        (
            "dimension product overflows",
            encode_idx(&[u32::MAX, u32::MAX, u32::MAX], &[]),
            lab.clone(),
        ),
        (
            "image count larger than payload",
            edit(&img, &|v| v[7] = 4),
            lab.clone(),
        ),
        ("labels file given image magic", img.clone(), img.clone()),
        ("images file given label magic", lab.clone(), lab.clone()),
        (
            "fewer labels than images",
            img.clone(),
            encode_idx(&[2], &[1, 2]),
        ),
        ("label value 10", img.clone(), encode_idx(&[3], &[1, 10, 2])),
        (
            "label value 255",
            img.clone(),
            encode_idx(&[3], &[255, 0, 0]),
        ),
        (
            "labels payload truncated",
            img.clone(),
            lab[..lab.len() - 1].to_vec(),
        ),
    ]
}

/// Small two-task data with labels that depend on the inputs.
pub fn toy_task_data(n: usize, dim: usize, classes: usize, seed: u64) -> Vec<LabeledSet> {
    let mut s = seed;
    let mut next = move || {
        s = mtcool::harness::splitmix64(s);
        (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    (0..2)
        .map(|t| {
            let x: Vec<f64> = (0..n * dim).map(|_| next()).collect();
            let labels = (0..n)
                .map(|i| {
                    let v: f64 = x[i * dim..(i + 1) * dim]
                        .iter()
                        .enumerate()
                        .map(|(k, a)| a * (k + t + 1) as f64)
                        .sum();
                    ((v + 2.0).max(0.0) as usize * 7 + t) % classes
                })
                .collect();
            LabeledSet::new(Tensor::new(vec![n, dim], x).unwrap(), labels, classes).unwrap()
        })
        .collect()
}

pub fn toy_setup(seed: u64) -> (MultiTaskModel, TaskData) {
    let spec = NetSpec::mlp(6, &[8, 6], 3);
    let model = MultiTaskModel::build(&spec, 2, seed).unwrap();
    let data = TaskData::new(toy_task_data(64, 6, 3, seed), 8, seed).unwrap();
    (model, data)
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn store_bits(m: &MultiTaskModel) -> Vec<u64> {
    m.store()
        .iter()
        .flat_map(|p| bits(p.tensor.values()))
        .collect()
}
