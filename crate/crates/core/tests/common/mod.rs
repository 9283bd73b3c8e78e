#![allow(dead_code)]

use std::path::PathBuf;

use ptn::datasets::Mnist;

/// MNIST IDX files under `$PTN_DATA_DIR/mnist`, or `data/mnist` at the
/// workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("PTN_DATA_DIR") {
        Some(d) => PathBuf::from(d).join("mnist"),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

pub fn load_mnist() -> Option<Mnist> {
    let dir = mnist_dir();
    if !Mnist::FILES.iter().all(|f| dir.join(f).exists()) {
        eprintln!("MNIST not found in {}; skipping", dir.display());
        return None;
    }
    Some(Mnist::load(&dir).expect("MNIST files present but unreadable"))
}
