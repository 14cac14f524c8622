//! Attention maps as greyscale PGM images.
//!
//! Channel attention of the full network acts on the fused map at 1/4 of the
//! input extent and spatial attention on the deepest features at 1/8, so an
//! exported spatial map is exactly half the size of a channel map per axis.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::INPUT_MULTIPLE;
use crate::data::{eval_resize, pad_to_multiple, Sample};
use crate::error::{Error, Result};
use crate::metrics::argmax_classes;
use crate::model::Model;
use crate::tensor::{Real, Tensor};

/// An 8-bit greyscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreyMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GreyMap {
    /// Min-max scales `values` (row-major, `height·width` long) onto 0..=255.
    /// A constant map becomes all zeros.
    pub fn normalised(values: &[f64], height: usize, width: usize) -> Self {
        assert_eq!(values.len(), height * width, "map extent");
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let pixels = values
            .iter()
            .map(|&v| if span > 0.0 { (255.0 * (v - lo) / span).round() as u8 } else { 0 })
            .collect();
        GreyMap { height, width, pixels }
    }
}

pub fn encode_pgm(map: &GreyMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&map.pixels);
    out
}

/// Parses a binary PGM with maxval 255 and no comments.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GreyMap> {
    let bad = |reason: &str| Error::format(path, reason);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let number = |s: &str| s.parse::<usize>().map_err(|_| bad("header field is not a number"));
    let (width, height, maxval) = (number(fields[1])?, number(fields[2])?, number(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if pixels.len() != width * height {
        return Err(bad(&format!("raster holds {} bytes, expected {}", pixels.len(), width * height)));
    }
    Ok(GreyMap {
        height,
        width,
        pixels: pixels.to_vec(),
    })
}

/// Binary PPM of a `[3, H, W]` image with values in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("ppm image", image.shape(), &[3, 0, 0]));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((255.0 * data[c * h * w + p].clamp(0.0, 1.0)).round() as u8);
        }
    }
    Ok(out)
}

/// Maps extracted from one evaluation-mode pass.
#[derive(Clone, Debug)]
pub struct AttentionExport {
    /// Channel-attention weight over locations, keyed by channel index.
    pub cam: Vec<(usize, GreyMap)>,
    /// Spatial-attention rows reshaped to the grid, keyed by query cell.
    pub sam: Vec<((usize, usize), GreyMap)>,
    /// Predicted classes at the main output extent, scaled to fill 0..=255.
    pub prediction: GreyMap,
    /// The padded network input.
    pub input: Tensor<f32>,
}

/// Query cells of the spatial-attention grid: the centre and the centres of
/// the four quadrants.
pub fn default_queries(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut q = vec![(height / 2, width / 2)];
    for &fy in &[1, 3] {
        for &fx in &[1, 3] {
            q.push((height * fy / 4, width * fx / 4));
        }
    }
    q.sort_unstable();
    q.dedup();
    q
}

/// Runs `sample` through the model as evaluation does and collects the
/// `cam_channels` channel maps with the largest mean weight together with
/// the spatial-attention rows of the default query cells.
pub fn attention_maps<T: Real>(
    model: &Model<T>,
    sample: &Sample,
    base: usize,
    cam_channels: usize,
) -> Result<AttentionExport> {
    let padded = pad_to_multiple(&eval_resize(sample, base), INPUT_MULTIPLE);
    let (ph, pw) = (padded.height(), padded.width());
    let out = model.infer(&padded.image.cast::<T>().reshape(vec![1, 3, ph, pw])?)?;

    let mut cam = Vec::new();
    if let Some(a) = &out.cam_attention {
        let [_, c, h, w] = a.dims4()?;
        let plane = h * w;
        let data: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
        let mut order: Vec<usize> = (0..c).collect();
        let mean = |k: usize| data[k * plane..(k + 1) * plane].iter().sum::<f64>();
        order.sort_by(|&x, &y| mean(y).total_cmp(&mean(x)).then(x.cmp(&y)));
        for &k in order.iter().take(cam_channels) {
            cam.push((k, GreyMap::normalised(&data[k * plane..(k + 1) * plane], h, w)));
        }
    }

    let mut sam = Vec::new();
    if let Some(a) = &out.sam_attention {
        let (h, w) = (ph / INPUT_MULTIPLE, pw / INPUT_MULTIPLE);
        let n = h * w;
        if a.shape() != [1, n, n] {
            return Err(Error::shape("spatial attention", a.shape(), &[1, n, n]));
        }
        for (y, x) in default_queries(h, w) {
            let row = &a.data()[(y * w + x) * n..(y * w + x + 1) * n];
            let values: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            sam.push(((y, x), GreyMap::normalised(&values, h, w)));
        }
    }

    let classes = argmax_classes(&out.main)?;
    let [_, _, mh, mw] = out.main.dims4()?;
    let scale = 255.0 / (model.config().num_classes.max(2) - 1) as f64;
    let values: Vec<f64> = classes.data().iter().map(|&c| c as f64 * scale).collect();
    let prediction = GreyMap {
        height: mh,
        width: mw,
        pixels: values.iter().map(|&v| v.round() as u8).collect(),
    };
    Ok(AttentionExport {
        cam,
        sam,
        prediction,
        input: padded.image,
    })
}

/// Writes `input.ppm`, `prediction.pgm`, `cam_c<k>.pgm` and
/// `sam_q<y>_<x>.pgm` into `dir` and returns the paths written.
pub fn write_attention(dir: &Path, export: &AttentionExport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put("input.ppm".into(), encode_ppm(&export.input)?)?;
    put("prediction.pgm".into(), encode_pgm(&export.prediction))?;
    for (k, map) in &export.cam {
        put(format!("cam_c{k:03}.pgm"), encode_pgm(map))?;
    }
    for ((y, x), map) in &export.sam {
        put(format!("sam_q{y:02}_{x:02}.pgm"), encode_pgm(map))?;
    }
    Ok(written)
}
