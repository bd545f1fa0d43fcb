//! Synthetic IDX datasets laid out like the real data directory.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 28;

fn write_idx(dir: &Path, prefix: &str, per_class: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * 10;
    let mut images = vec![0, 0, 8, 3];
    for v in [n, SIDE, SIDE] {
        images.extend_from_slice(&(v as u32).to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        // Each class brightens its own band of rows.
        for p in 0..SIDE * SIDE {
            let band = (p / SIDE) * 10 / SIDE;
            let px = if band == class { rng.gen_range(150..=255) } else { rng.gen_range(0..60) };
            images.push(px);
        }
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

/// Writes `mnist/` and `fashion-mnist/` under `root`.
pub fn write_data_root(root: &Path) {
    for (k, name) in ["mnist", "fashion-mnist"].iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        write_idx(&dir, "train", 60, 10 + k as u64);
        write_idx(&dir, "t10k", 10, 20 + k as u64);
    }
}

/// Every file under `dir`, relative path and contents, sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
