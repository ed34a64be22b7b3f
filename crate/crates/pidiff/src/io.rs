//! File formats: TNSR tensors, W+ files, PPM/PGM images and the loss CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pidiff_core::attention::AttentionMap;
use pidiff_core::checkpoint::Profile;
use pidiff_core::numerics::{tnsr, Tensor};
use pidiff_core::wplus::WPlusVector;

use crate::error::{CliError, CliResult};

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_tensor(path: &Path) -> CliResult<Tensor<f32>> {
    tnsr::decode(&read_bytes(path)?).map_err(|e| with_path(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> CliResult<()> {
    write_bytes(path, &tnsr::encode(t))
}

fn with_path(path: &Path, e: pidiff_core::Error) -> CliError {
    match e {
        pidiff_core::Error::Format(m) => {
            pidiff_core::Error::Format(format!("{}: {m}", path.display())).into()
        }
        other => other.into(),
    }
}

/// Loads a W+ file and checks it against the profile's `rows × latent_dim`.
pub fn load_wplus(path: &Path, profile: &Profile) -> CliResult<WPlusVector> {
    let t = read_tensor(path)?;
    let w = WPlusVector::new(t).map_err(|e| with_path(path, e))?;
    w.expect_dims(profile.rows, profile.latent_dim)
        .map_err(|e| {
            CliError::Core(pidiff_core::Error::Shape {
                op: "load_wplus",
                detail: format!("{}: {e} (profile {})", path.display(), profile.name),
            })
        })?;
    Ok(w)
}

pub fn save_wplus(path: &Path, w: &WPlusVector) -> CliResult<()> {
    write_tensor(path, w.values())
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// P6 bytes of a `[3, H, W]` image with values in `[-1, 1]` (clamped).
pub fn encode_ppm(img: &Tensor<f32>) -> CliResult<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(pidiff_core::Error::Shape {
            op: "encode_ppm",
            detail: format!("image {s:?}, expected [3, H, W]"),
        }
        .into());
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(d[(c * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> CliResult<()> {
    write_bytes(path, &encode_ppm(img)?)
}

/// Parses P6 with maxval 255 into `[3, H, W]` with values in `[-1, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> pidiff_core::Result<Tensor<f32>> {
    let bad = |m: &str| pidiff_core::Error::Format(format!("ppm: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("missing P6 magic"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad("malformed header number"))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() != w * h * 3 {
        return Err(bad(&format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            w * h * 3
        )));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in payload.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_ppm(path: &Path) -> CliResult<Tensor<f32>> {
    decode_ppm(&read_bytes(path)?).map_err(|e| with_path(path, e))
}

/// Places images side by side, `cols` per row, on a mid-grey canvas.
pub fn grid(images: &[Tensor<f32>], cols: usize) -> pidiff_core::Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| pidiff_core::Error::Contract("grid needs at least one image".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut data = vec![0.0f32; 3 * gh * gw];
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(pidiff_core::Error::Shape {
                op: "grid",
                detail: format!("image {:?} differs from {:?}", img.shape(), first.shape()),
            });
        }
        let (oy, ox) = ((i / cols) * h, (i % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let dst = (c * gh + oy + y) * gw + ox;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(&[3, gh, gw], data)
}

/// P5 bytes of an attention map: one pixel row per query, each row scaled
/// so its largest weight maps to 255.
pub fn encode_pgm(map: &AttentionMap) -> Vec<u8> {
    let (rows, cols) = (map.weights.shape()[0], map.weights.shape()[1]);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for row in map.weights.data().chunks(cols) {
        let max = row.iter().cloned().fold(0.0f32, f32::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        out.extend(
            row.iter()
                .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8),
        );
    }
    out
}

pub fn loss_csv(losses: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in losses {
        writeln!(s, "{step},{loss}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use pidiff_core::attention::AttnKind;

    #[test]
    fn ppm_round_trip_on_grid_values() {
        let vals: Vec<f32> = (0..3 * 2 * 5)
            .map(|i| (i * 8) as f32 / 127.5 - 1.0)
            .collect();
        let img = Tensor::new(&[3, 2, 5], vals).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ppm_clamps_and_maps_endpoints() {
        let img = Tensor::new(&[3, 1, 2], vec![-3.0, 3.0, -1.0, 1.0, 0.0, 0.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 0, 128, 255, 255, 128]);
    }

    #[test]
    fn ppm_header_errors() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n# note\n1 1\n255\n\x01\x02\x03").is_ok());
    }

    #[test]
    fn pgm_rows_peak_at_255() {
        let map = AttentionMap {
            kind: AttnKind::Text,
            block: "mid".into(),
            step: None,
            weights: Tensor::new(&[2, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap(),
        };
        let bytes = encode_pgm(&map);
        let body = &bytes[bytes.len() - 6..];
        assert_eq!(body, &[102, 153, 255, 32, 32, 255]);
    }

    #[test]
    fn loss_csv_header() {
        assert_eq!(
            loss_csv(&[(1, 0.5), (2, 0.25)]),
            "step,loss\n1,0.5\n2,0.25\n"
        );
    }
}
