mod common;

use common::{rng, uniform32};
use gated::image::*;
use gated::Error;
use gated_tensor::Tensor;
use image::{ImageBuffer, Luma, Rgb};
use proptest::prelude::*;
use tempfile::tempdir;

#[test]
fn eight_bit_codes_map_to_unit_range() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("codes.png");
    let buf = ImageBuffer::from_fn(3, 1, |x, _| match x {
        0 => Rgb([255u8, 0, 128]),
        1 => Rgb([0, 128, 255]),
        _ => Rgb([128, 255, 0]),
    });
    buf.save(&p).unwrap();
    let img = load_image(&p).unwrap();
    assert_eq!((img.height(), img.width()), (1, 3));
    assert_eq!(img.get(0, 0, 0), 1.0);
    assert_eq!(img.get(1, 0, 0), 0.0);
    assert!((img.get(2, 0, 0) - 128.0 / 255.0).abs() < 1e-7);
    assert!((img.get(2, 0, 0) - 0.50196).abs() < 1e-5);
    // channel order is RGB
    assert_eq!(img.get(2, 0, 1), 1.0);
    assert_eq!(img.get(1, 0, 2), 1.0);
}

#[test]
fn sixteen_bit_uses_the_16_bit_maximum() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("deep.png");
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(2, 1, |x, _| {
        if x == 0 {
            Rgb([65535, 0, 32768])
        } else {
            Rgb([1, 2, 3])
        }
    });
    buf.save(&p).unwrap();
    let img = load_image(&p).unwrap();
    assert_eq!(img.get(0, 0, 0), 1.0);
    assert_eq!(img.get(1, 0, 0), 0.0);
    assert!((img.get(2, 0, 0) - 32768.0 / 65535.0).abs() < 1e-7);
    assert!((img.get(2, 0, 1) - 3.0 / 65535.0).abs() < 1e-9);
}

#[test]
fn jpeg_decodes() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("flat.jpg");
    let buf = ImageBuffer::from_pixel(16, 16, Rgb([200u8, 100, 50]));
    buf.save(&p).unwrap();
    let img = load_image(&p).unwrap();
    assert!((img.get(0, 8, 8) - 200.0 / 255.0).abs() < 0.02);
}

#[test]
fn grayscale_is_rejected_unless_replicated() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("grey.png");
    ImageBuffer::from_pixel(4, 4, Luma([51u8])).save(&p).unwrap();
    assert!(matches!(load_image(&p), Err(Error::GrayscaleInput { channels: 1, .. })));
    let img = load_image_with(&p, LoadOptions { replicate_grayscale: true }).unwrap();
    for c in 0..3 {
        assert!((img.get(c, 2, 2) - 0.2).abs() < 1e-7);
    }
}

#[test]
fn bad_files() {
    let dir = tempdir().unwrap();
    let text = dir.path().join("notes.png");
    std::fs::write(&text, "not an image at all").unwrap();
    assert!(matches!(load_image(&text), Err(Error::UnsupportedFormat { .. })));

    let good = dir.path().join("good.png");
    ImageBuffer::from_pixel(32, 32, Rgb([1u8, 2, 3])).save(&good).unwrap();
    let bytes = std::fs::read(&good).unwrap();
    let corrupt = dir.path().join("corrupt.png");
    std::fs::write(&corrupt, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_image(&corrupt).unwrap_err();
    assert!(matches!(err, Error::Decode { .. } | Error::Io { .. }), "{err}");

    assert!(matches!(load_image(dir.path().join("absent.png")), Err(Error::Io { .. })));
}

#[test]
fn image_tensor_invariants() {
    assert!(ImageTensor::new(Tensor::full([3, 2, 2], 1.5)).is_err());
    assert!(ImageTensor::new(Tensor::full([3, 2, 2], f32::NAN)).is_err());
    assert!(ImageTensor::new(Tensor::full([1, 2, 2], 0.5)).is_err());
    let c = ImageTensor::new_clamped(Tensor::full([3, 2, 2], -0.2)).unwrap();
    assert_eq!(c.get(0, 0, 0), 0.0);
    let imgs = vec![ImageTensor::constant(16, 16, 0.1).unwrap(), ImageTensor::constant(16, 16, 0.2).unwrap()];
    let batch = BatchTensor::from_images(&imgs).unwrap();
    assert_eq!(batch.tensor().shape(), &[2, 3, 16, 16]);
    assert_eq!(batch.image(1).unwrap(), imgs[1]);
    assert!(BatchTensor::from_images(&[]).is_err());
}

#[test]
fn quantization() {
    assert_eq!(quantize(1.0), 255);
    assert_eq!(quantize(0.5), 128);
    assert_eq!(quantize(-0.001), 0);
    assert_eq!(quantize(1.2), 255);
    let dir = tempdir().unwrap();
    let p = dir.path().join("drift.png");
    let t = Tensor::from_vec([3, 1, 2], vec![-0.001, 0.5, 1.0, 0.0, 1.0001, 0.25]).unwrap();
    save_planar(&t, &p).unwrap();
    let back = image::open(&p).unwrap().to_rgb8();
    assert_eq!(back.get_pixel(0, 0).0, [0, 255, 255]);
    assert_eq!(back.get_pixel(1, 0).0, [128, 0, 64]);
}

#[test]
fn resize_examples() {
    let c = ImageTensor::constant(7, 9, 0.7).unwrap();
    for (h, w) in [(1, 1), (128, 128), (3, 20)] {
        let r = resize_bilinear(&c, h, w).unwrap();
        assert!(r.tensor().data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }
    let board = ImageTensor::from_fn(2, 2, |_, y, x| ((x + y) % 2) as f32).unwrap();
    let one = resize_bilinear(&board, 1, 1).unwrap();
    assert!(one.tensor().data().iter().all(|v| (v - 0.5).abs() < 1e-6));
    let img = ImageTensor::new(uniform32(&mut rng(0), &[3, 5, 6], 0.0, 1.0)).unwrap();
    assert_eq!(resize_bilinear(&img, 5, 6).unwrap(), img);
    assert!(resize_bilinear(&img, 0, 6).is_err());
}

#[test]
fn resize_upsampling_by_two_matches_brute_force() {
    // half-pixel centres: output x maps to source (x + 0.5) / 2 - 0.5
    let img = ImageTensor::new(uniform32(&mut rng(1), &[3, 3, 4], 0.0, 1.0)).unwrap();
    let r = resize_bilinear(&img, 6, 8).unwrap();
    let sample = |c: usize, sy: f64, sx: f64| {
        let sy = sy.clamp(0.0, 2.0);
        let sx = sx.clamp(0.0, 3.0);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(2), (x0 + 1).min(3));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let g = |y, x| img.get(c, y, x) as f64;
        (g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx) * (1.0 - fy) + (g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx) * fy
    };
    for c in 0..3 {
        for y in 0..6 {
            for x in 0..8 {
                let want = sample(c, (y as f64 + 0.5) / 2.0 - 0.5, (x as f64 + 0.5) / 2.0 - 0.5);
                assert!((r.get(c, y, x) as f64 - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn pad_and_crop() {
    let img = ImageTensor::new(uniform32(&mut rng(2), &[3, 20, 30], 0.0, 1.0)).unwrap();
    let p = reflect_pad(&img, 16).unwrap();
    assert_eq!((p.height(), p.width()), (32, 32));
    assert_eq!(p.get(0, 20, 5), img.get(0, 18, 5));
    assert_eq!(p.get(2, 3, 31), img.get(2, 3, 27));
    assert_eq!(crop(&p, 20, 30).unwrap(), img);
    assert!(reflect_pad(&ImageTensor::constant(3, 3, 0.1).unwrap(), 16).is_err());
    assert!(crop(&img, 21, 30).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn save_load_round_trip(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let dir = tempdir().unwrap();
        let img = ImageTensor::new(uniform32(&mut rng(seed), &[3, h, w], 0.0, 1.0)).unwrap();
        let p = dir.path().join("x.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in img.tensor().data().iter().zip(back.tensor().data()) {
            prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
        let again = dir.path().join("y.png");
        save_image(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn resize_stays_in_range(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, oh in 1usize..20, ow in 1usize..20) {
        let img = ImageTensor::new(uniform32(&mut rng(seed), &[3, h, w], 0.2, 0.6)).unwrap();
        let r = resize_bilinear(&img, oh, ow).unwrap();
        let (lo, hi) = img.tensor().data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for &v in r.tensor().data() {
            prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }
}
