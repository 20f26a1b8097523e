//! Optional MNIST download with checksum verification.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_MIRROR: &str = "https://storage.googleapis.com/cvdf-datasets/mnist/";

/// The four decompressed files and their SHA-256 digests.
pub const MNIST_FILES: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check(name: &str, bytes: &[u8], want: &str) -> Result<()> {
    let got = sha256_hex(bytes);
    if got != want {
        return Err(Error::invalid(
            "fetch",
            format!("{name}: checksum {got} does not match {want}"),
        ));
    }
    Ok(())
}

/// Checks that `dir` already holds all four files with the right digests.
pub fn verify_dir(dir: &Path) -> Result<()> {
    for (name, sum) in MNIST_FILES {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        check(name, &bytes, sum)?;
    }
    Ok(())
}

/// Downloads `<name>.gz` for each file from `mirror`, decompresses and
/// verifies it, and writes it into `dir`. Files already present with the
/// right digest are kept.
pub fn fetch_mnist(dir: &Path, mirror: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, sum) in MNIST_FILES {
        let target = dir.join(name);
        if let Ok(bytes) = std::fs::read(&target) {
            if sha256_hex(&bytes) == sum {
                continue;
            }
        }
        let url = format!("{}/{name}.gz", mirror.trim_end_matches('/'));
        let gz = ureq::get(&url)
            .call()
            .and_then(|mut r| r.body_mut().with_config().limit(64 << 20).read_to_vec())
            .map_err(|e| Error::invalid("fetch", format!("{url}: {e}")))?;
        let mut raw = Vec::new();
        GzDecoder::new(gz.as_slice())
            .read_to_end(&mut raw)
            .map_err(|e| Error::io(&target, e))?;
        check(name, &raw, sum)?;
        std::fs::write(&target, &raw).map_err(|e| Error::io(&target, e))?;
        written.push(target);
    }
    Ok(written)
}
