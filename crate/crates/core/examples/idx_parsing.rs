//! Encodes a tiny IDX image/label pair, parses it back, then shows the
//! diagnostics produced for damaged copies.
//!
//! cargo run --example idx_parsing

use mtcool::data::idx::encode_idx;
use mtcool::data::mnist_from_bytes;

fn main() -> mtcool::Result<()> {
    let images = encode_idx(&[2, 2, 2], &[0, 64, 128, 255, 255, 128, 64, 0]);
    let labels = encode_idx(&[2], &[3, 8]);
    let set = mnist_from_bytes(&images, &labels)?;
    println!("shape {:?}, labels {:?}", set.images.shape(), set.labels);
    println!("pixels {:?}", set.images.values());

    let damaged: [(&str, Vec<u8>, Vec<u8>); 4] = [
        (
            "truncated",
            images[..images.len() - 1].to_vec(),
            labels.clone(),
        ),
        (
            "bad magic",
            [&[0u8, 1][..], &images[2..]].concat(),
            labels.clone(),
        ),
        (
            "label out of range",
            images.clone(),
            encode_idx(&[2], &[3, 12]),
        ),
        ("count mismatch", images.clone(), encode_idx(&[1], &[3])),
    ];
    for (what, i, l) in damaged {
        println!("{what}: {}", mnist_from_bytes(&i, &l).unwrap_err());
    }
    Ok(())
}
