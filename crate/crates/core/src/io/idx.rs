//! IDX container reader/writer (unsigned-byte payloads only).

use std::fs;
use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Idx {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Validates the header and returns `(dims, payload)`.
fn parse<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(idx_err(path, "file shorter than the magic number"));
    }
    let got = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if got != magic {
        return Err(idx_err(path, format!("magic {got:#010x}, expected {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(idx_err(path, "truncated dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| idx_err(path, "dimension product overflows"))?;
    let body = &bytes[header..];
    if body.len() != payload {
        let what = if body.len() < payload { "truncated payload" } else { "trailing bytes after payload" };
        return Err(idx_err(path, format!("{what}: {} bytes for {payload} expected", body.len())));
    }
    Ok((dims, body))
}

/// Parses an image/label pair already in memory. Pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (idims, pix) = parse(images, IMAGES_MAGIC, images_path)?;
    let (ldims, lab) = parse(labels, LABELS_MAGIC, labels_path)?;
    if idims[0] != ldims[0] {
        return Err(idx_err(
            labels_path,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    if idims[1] == 0 || idims[2] == 0 {
        return Err(idx_err(images_path, "zero image extent"));
    }
    let classes = lab.iter().copied().max().map_or(10, |m| (m as usize + 1).max(10));
    let pixels: Vec<f64> = pix.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(pixels, [1, idims[1], idims[2]], lab.to_vec(), classes, split)
}

pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| idx_err(p, e.to_string()));
    let images = read(images_path)?;
    let labels = read(labels_path)?;
    parse_idx(&images, &labels, images_path, labels_path, split)
}

/// Loads the canonical MNIST file pair for `split` from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test | Split::Other => "t10k",
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// Serializes images (`count x rows x cols` bytes) and labels as IDX.
pub fn encode_idx(images: &[u8], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    assert_eq!(images.len(), labels.len() * rows * cols);
    let mut im = Vec::with_capacity(16 + images.len());
    im.extend(IMAGES_MAGIC.to_be_bytes());
    for d in [labels.len(), rows, cols] {
        im.extend((d as u32).to_be_bytes());
    }
    im.extend_from_slice(images);
    let mut lb = Vec::with_capacity(8 + labels.len());
    lb.extend(LABELS_MAGIC.to_be_bytes());
    lb.extend((labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    (im, lb)
}

/// Writes a dataset back to IDX, quantizing pixels to bytes.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [_, rows, cols] = dataset.image_shape();
    let bytes: Vec<u8> = (0..dataset.len())
        .flat_map(|i| dataset.pixels(i).iter().map(|&p| (p * 255.0).round() as u8))
        .collect();
    let (im, lb) = encode_idx(&bytes, rows, cols, dataset.labels());
    fs::write(images_path, im)?;
    fs::write(labels_path, lb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};
    use rand::Rng;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images: Vec<u8> = (0..4 * 3 * 2).map(|i| (i * 11) as u8).collect();
        images[5] = 255;
        encode_idx(&images, 3, 2, &[3, 1, 4, 1])
    }

    fn p() -> &'static Path {
        Path::new("fixture")
    }

    #[test]
    fn fixture_round_trips() {
        let (im, lb) = fixture();
        let d = parse_idx(&im, &lb, p(), p(), Split::Other).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.image_shape(), [1, 3, 2]);
        assert_eq!(d.pixels(0)[5], 1.0);
        assert_eq!(d.labels(), &[3, 1, 4, 1]);

        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&d, &a, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), im);
        assert_eq!(fs::read(&b).unwrap(), lb);
        let again = load_idx(&a, &b, Split::Other).unwrap();
        assert_eq!(again.pixels(2), d.pixels(2));
    }

    #[test]
    fn structured_errors() {
        let (im, lb) = fixture();
        let mut bad = im.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx(&bad, &lb, p(), p(), Split::Other), Err(Error::Idx { .. })));
        assert!(parse_idx(&im[..im.len() - 1], &lb, p(), p(), Split::Other).is_err());
        let (_, lb3) = encode_idx(&[0; 18], 3, 2, &[0, 0, 0]);
        assert!(parse_idx(&im, &lb3, p(), p(), Split::Other).is_err());
        assert!(load_idx(Path::new("/nonexistent/a"), Path::new("/nonexistent/b"), Split::Test).is_err());
    }

    #[test]
    fn rejects_every_header_corruption() {
        let (im, lb) = fixture();
        let mut rng = StreamKey::new(17, Purpose::Test, 0, 0).rng();
        for case in 0..100 {
            let (mut a, mut b) = (im.clone(), lb.clone());
            let target = if case % 2 == 0 { &mut a } else { &mut b };
            let header = if case % 2 == 0 { 16 } else { 8 };
            match case % 5 {
                // Truncate inside the header.
                0 => target.truncate(rng.random_range(0..header)),
                // Append stray bytes.
                1 => target.extend(std::iter::repeat_n(0u8, rng.random_range(1..5))),
                // Flip one header byte to a different value.
                _ => {
                    let i = rng.random_range(0..header);
                    target[i] ^= rng.random_range(1..=255u8);
                }
            }
            let r = parse_idx(&a, &b, p(), p(), Split::Other);
            assert!(r.is_err(), "corruption {case} accepted");
        }
    }
}
