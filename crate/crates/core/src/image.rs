//! Image values, file I/O and deterministic resampling.
//!
//! Every image in the pipeline is an RGB `f32` tensor of shape
//! `(3, H, W)` with values in `[0, 1]`.

use std::path::Path;

use gated_tensor::Tensor;
use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};

/// RGB image tensor `(3, H, W)`, finite and within `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        match t.shape() {
            [3, h, w] if *h > 0 && *w > 0 => {}
            s => return Err(Error::Shape(format!("image must be (3, H, W), got {s:?}"))),
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("image value {v} outside [0, 1]")));
        }
        Ok(ImageTensor(t))
    }

    /// Like [`ImageTensor::new`] but clamps small excursions produced by
    /// floating-point drift. Non-finite values are still rejected.
    pub fn new_clamped(t: Tensor<f32>) -> Result<Self> {
        if !t.all_finite() {
            return Err(Error::Shape("image contains non-finite values".into()));
        }
        Self::new(t.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(Tensor::from_vec([3, height, width], data)?)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full([3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    /// As a single-image batch `(1, 3, H, W)`.
    pub fn to_batch(&self) -> Tensor<f32> {
        self.0
            .reshape([1, 3, self.height(), self.width()])
            .expect("same element count")
    }

    /// Image `i` of a `(N, 3, H, W)` batch, clamped into range.
    pub fn from_batch(batch: &Tensor<f32>, i: usize) -> Result<Self> {
        let item = batch.batch_item(i)?;
        let (_, c, h, w) = item.dims4()?;
        Self::new_clamped(item.reshape([c, h, w])?)
    }
}

/// Stack of equally sized images `(N, 3, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTensor(Tensor<f32>);

impl BatchTensor {
    pub fn from_images(images: &[ImageTensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let tensors: Vec<Tensor<f32>> = images.iter().map(|i| i.tensor().clone()).collect();
        Ok(BatchTensor(Tensor::stack(&tensors)?))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn image(&self, i: usize) -> Result<ImageTensor> {
        ImageTensor::from_batch(&self.0, i)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Replicate single-channel inputs to RGB instead of rejecting them.
    pub replicate_grayscale: bool,
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    load_image_with(path, LoadOptions::default())
}

pub fn load_image_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<ImageTensor> {
    let path = path.as_ref();
    // the format comes from the content alone, so a text file named .png is
    // unsupported rather than corrupt
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format().is_none() {
        return Err(Error::UnsupportedFormat { path: path.into() });
    }
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(_) => Error::UnsupportedFormat { path: path.into() },
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.into(),
            msg: other.to_string(),
        },
    })?;
    from_dynamic(img, path, opts)
}

fn from_dynamic(img: DynamicImage, path: &Path, opts: LoadOptions) -> Result<ImageTensor> {
    use image::ColorType as C;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let gray = matches!(color, C::L8 | C::La8 | C::L16 | C::La16);
    if gray && !opts.replicate_grayscale {
        return Err(Error::GrayscaleInput {
            path: path.into(),
            channels: color.channel_count() as usize,
        });
    }
    let interleaved: Vec<f32> = match color {
        C::L8 | C::La8 | C::Rgb8 | C::Rgba8 => {
            img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        C::L16 | C::La16 | C::Rgb16 | C::Rgba16 => {
            img.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
        }
        _ => return Err(Error::UnsupportedFormat { path: path.into() }),
    };
    let mut planar = vec![0.0f32; 3 * h * w];
    for (p, px) in interleaved.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * h * w + p] = px[c];
        }
    }
    ImageTensor::new(Tensor::from_vec([3, h, w], planar)?)
}

/// 8-bit code for a value: `round(v * 255)` (half away from zero), clamped.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write an 8-bit RGB PNG.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    save_planar(img.tensor(), path)
}

/// Same as [`save_image`] for any `(3, H, W)` tensor; out-of-range values clamp.
pub fn save_planar(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [3, h, w] = t.shape() else {
        return Err(Error::Shape(format!("cannot save shape {:?}", t.shape())));
    };
    let (h, w) = (*h, *w);
    let d = t.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            raw.push(quantize(d[c * h * w + p]));
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.into(),
                msg: other.to_string(),
            },
        })
}

/// Bilinear resampling with half-pixel centres (no corner alignment, no
/// antialiasing).
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("resize target {height}x{width}")));
    }
    let (h, w) = (img.height(), img.width());
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let ys = sample_positions(h, height);
    let xs = sample_positions(w, width);
    let src = img.tensor().data();
    let mut out = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    ImageTensor::new_clamped(Tensor::from_vec([3, height, width], out)?)
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Reflect-pad bottom and right edges so both sides are multiples of `multiple`.
pub fn reflect_pad(img: &ImageTensor, multiple: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(img.clone());
    }
    if ph - h >= h.max(2) || pw - w >= w.max(2) {
        return Err(Error::Shape(format!("{h}x{w} too small to reflect-pad to {ph}x{pw}")));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    ImageTensor::from_fn(ph, pw, |c, y, x| img.get(c, reflect(y, h), reflect(x, w)))
}

/// Top-left `height x width` window.
pub fn crop(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    Ok(ImageTensor(crop_planar(img.tensor(), height, width)?))
}

/// Top-left `height x width` window of any `(C, H, W)` tensor.
pub fn crop_planar(t: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = t.shape() else {
        return Err(Error::Shape(format!("cannot crop shape {:?}", t.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    if height > h || width > w || height == 0 || width == 0 {
        return Err(Error::Shape(format!("cannot crop {h}x{w} to {height}x{width}")));
    }
    let mut out = Vec::with_capacity(c * height * width);
    for plane in t.data().chunks(h * w) {
        for row in plane.chunks(w).take(height) {
            out.extend_from_slice(&row[..width]);
        }
    }
    Ok(Tensor::from_vec([c, height, width], out)?)
}
