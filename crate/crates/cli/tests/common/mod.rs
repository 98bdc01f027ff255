use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qkatlas_core::model::AttentionDirection;
use qkatlas_core::store::{write_bundle, Bundle};
use qkatlas_core::synthetic::{self, HeadStyle};
use sha2::{Digest, Sha256};

pub const BIN: &str = env!("CARGO_BIN_EXE_qkatlas");

pub fn qkatlas(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("run qkatlas")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two layers of two heads, causal, three short sequences.
pub fn gpt2_export() -> Bundle {
    let model = synthetic::text_model("gpt2-tiny", 2, 2, 8, AttentionDirection::Causal);
    synthetic::text_bundle(model, &[7, 9, 8], HeadStyle::decoder_like(), false, 1)
}

/// Bidirectional with W_Q/W_K; head (0, 1) has all-zero keys.
pub fn bert_export() -> Bundle {
    let model = synthetic::text_model("bert-tiny", 2, 2, 8, AttentionDirection::Bidirectional);
    let mut b = synthetic::text_bundle(model, &[6, 5, 7], HeadStyle::isotropic(), true, 2);
    let keys = &mut b.heads[1].keys;
    *keys = qkatlas_core::Matrix::zeros(keys.rows(), keys.cols());
    synthetic::refresh_norms(&mut b.heads[1]);
    b
}

pub fn vit_export() -> Bundle {
    synthetic::image_bundle(synthetic::image_model("vit-tiny", 1, 1, 8), 2, 3, false, 3)
}

pub fn write_export(dir: &Path, b: &Bundle) {
    write_bundle(dir, b).unwrap();
}

/// SHA-256 of every file under `root`, keyed by relative path.
pub fn hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}
