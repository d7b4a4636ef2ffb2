use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect(&path, out);
        } else if matches!(path.extension().and_then(|e| e.to_str()), Some("rs" | "toml")) {
            out.push(path);
        }
    }
}

fn main() {
    let crates = Path::new(env!("CARGO_MANIFEST_DIR")).join("..");
    let mut files = Vec::new();
    for name in ["tensor", "core", "cli"] {
        let root = crates.join(name);
        println!("cargo:rerun-if-changed={}", root.join("src").display());
        println!("cargo:rerun-if-changed={}", root.join("Cargo.toml").display());
        collect(&root.join("src"), &mut files);
        files.push(root.join("Cargo.toml"));
    }
    files.sort();
    let mut hasher = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(&crates).unwrap_or(f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update(fs::read(f).unwrap_or_default());
    }
    let digest = hex::encode(hasher.finalize());
    println!("cargo:rustc-env=MASKDISTILL_CODE_VERSION={}", &digest[..16]);
}
