//! Binary PNM images and on-disk sample directories.
//!
//! A sample directory holds `rgb.ppm` (8-bit), `raw_depth.pgm` and
//! `gt_depth.pgm` (16-bit big-endian, millimeters), `mask.pgm` (8-bit,
//! 255 marks transparent or specular pixels) and `camera.json`.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap};
use crate::pipeline::scene::SceneSample;

/// Decoded P5 (gray) or P6 (RGB) image.
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Row-major, interleaved channels.
    pub data: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.error(start, format!("{what} out of range")))
    }
}

/// Parses a binary PGM/PPM held in memory. `path` is only used in errors.
pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let mut c = Cursor { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.error(0, "missing P5/P6 magic number")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let max_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.error(max_at, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(c.error(max_at, format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.error(c.pos, "expected one whitespace byte before pixel data")),
    }
    let bpp = if maxval > 255 { 2 } else { 1 };
    let count = width * height * channels;
    let need = count * bpp;
    let have = bytes.len() - c.pos;
    if have < need {
        return Err(c.error(
            bytes.len(),
            format!("pixel data truncated: {have} of {need} bytes"),
        ));
    }
    let px = &bytes[c.pos..c.pos + need];
    let data: Vec<u16> = if bpp == 2 {
        px.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        px.iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = data.iter().position(|&v| v > maxval as u16) {
        return Err(c.error(c.pos + i * bpp, format!("sample exceeds maxval {maxval}")));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data,
    })
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes, path)
}

pub fn write_pnm(path: &Path, img: &Pnm) -> Result<()> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::input(format!("cannot write a {c}-channel PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for v in &img.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(img.data.iter().map(|&v| v as u8));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn expect_gray(img: &Pnm, path: &Path) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: "expected a grayscale (P5) image".into(),
        });
    }
    Ok(())
}

/// Writes depth in meters as 16-bit millimeters (rounded, saturating).
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let data = depth
        .values()
        .iter()
        .map(|&d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    write_pnm(
        path,
        &Pnm {
            width: depth.width(),
            height: depth.height(),
            channels: 1,
            maxval: 65535,
            data,
        },
    )
}

/// Reads a millimeter PGM into meters.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let img = read_pnm(path)?;
    expect_gray(&img, path)?;
    let values = Array2::from_shape_vec((img.height, img.width), img.data)
        .unwrap()
        .mapv(|v| v as f64 / 1000.0);
    DepthMap::new(values)
}

/// Writes values in [0, 1] as an 8-bit PGM.
pub fn write_unit_map(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    write_pnm(
        path,
        &Pnm {
            width: w,
            height: h,
            channels: 1,
            maxval: 255,
            data: values.iter().map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u16).collect(),
        },
    )
}

pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    write_unit_map(path, &mask.mapv(|m| if m { 1.0 } else { 0.0 }))
}

/// Nonzero pixels are set.
pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = read_pnm(path)?;
    expect_gray(&img, path)?;
    Ok(Array2::from_shape_vec((img.height, img.width), img.data)
        .unwrap()
        .mapv(|v| v > 0))
}

pub fn write_rgb(path: &Path, rgb: &Array3<f64>) -> Result<()> {
    let (c, h, w) = rgb.dim();
    if c != 3 {
        return Err(Error::input(format!("rgb must have 3 channels, got {c}")));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for v in 0..h {
        for u in 0..w {
            for ch in 0..3 {
                data.push((rgb[[ch, v, u]].clamp(0.0, 1.0) * 255.0).round() as u16);
            }
        }
    }
    write_pnm(
        path,
        &Pnm {
            width: w,
            height: h,
            channels: 3,
            maxval: 255,
            data,
        },
    )
}

/// Reads a PPM as `3×H×W` in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = read_pnm(path)?;
    if img.channels != 3 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: "expected a color (P6) image".into(),
        });
    }
    let m = img.maxval as f64;
    Ok(Array3::from_shape_fn((3, img.height, img.width), |(c, v, u)| {
        img.data[(v * img.width + u) * 3 + c] as f64 / m
    }))
}

pub const RGB_FILE: &str = "rgb.ppm";
pub const RAW_FILE: &str = "raw_depth.pgm";
pub const GT_FILE: &str = "gt_depth.pgm";
pub const MASK_FILE: &str = "mask.pgm";
pub const CAMERA_FILE: &str = "camera.json";

pub fn save_sample(dir: &Path, s: &SceneSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rgb(&dir.join(RGB_FILE), &s.rgb)?;
    write_depth(&dir.join(RAW_FILE), &s.raw_depth)?;
    write_depth(&dir.join(GT_FILE), &s.gt_depth)?;
    write_mask(&dir.join(MASK_FILE), &s.mask)?;
    s.camera.save(&dir.join(CAMERA_FILE))
}

/// Loads a sample directory; the id is the directory name.
pub fn load_sample(dir: &Path) -> Result<SceneSample> {
    let rgb = read_rgb(&dir.join(RGB_FILE))?;
    let raw_depth = read_depth(&dir.join(RAW_FILE))?;
    let gt_depth = read_depth(&dir.join(GT_FILE))?;
    let mask = read_mask(&dir.join(MASK_FILE))?;
    let camera = CameraModel::load(&dir.join(CAMERA_FILE))?;
    let (h, w) = (gt_depth.height(), gt_depth.width());
    let shapes_ok = rgb.dim() == (3, h, w)
        && (raw_depth.height(), raw_depth.width()) == (h, w)
        && mask.dim() == (h, w)
        && (camera.height(), camera.width()) == (h, w);
    if !shapes_ok {
        return Err(Error::input(format!(
            "{}: rgb, depth, mask and camera sizes disagree",
            dir.display()
        )));
    }
    Ok(SceneSample {
        id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        rgb,
        raw_depth,
        gt_depth,
        mask,
        camera,
    })
}

/// Sample directories under `root` in name order.
pub fn list_samples(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CAMERA_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x01, 0x02, 0xff, 0xff]);
        let img = parse_pnm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.data, vec![0x0102, 0xffff]);
    }

    #[test]
    fn errors_carry_offsets() {
        let offset = |b: &[u8]| match parse_pnm(b, Path::new("x")) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        assert_eq!(offset(b"P7\n"), 0);
        assert_eq!(offset(b"P5\n2 x\n"), 5);
        assert_eq!(offset(b"P5\n2 2\n255\n\x01\x02"), 13);
        assert_eq!(offset(b"P5\n1 1\n9\n\x0a"), 9);
    }
}
