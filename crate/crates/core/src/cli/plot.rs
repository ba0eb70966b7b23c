use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 12;

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), colour: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

/// Line plot of one or more series sharing a y range. Colours cycle blue,
/// orange, green.
pub fn plot_series(path: &Path, series: &[&[f64]]) -> Result<()> {
    const COLOURS: [Rgb<u8>; 3] = [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44])];
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let all = series.iter().flat_map(|s| s.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let axis = Rgb([160, 160, 160]);
    line(&mut img, (MARGIN as f64, (HEIGHT - MARGIN) as f64), ((WIDTH - MARGIN) as f64, (HEIGHT - MARGIN) as f64), axis);
    line(&mut img, (MARGIN as f64, MARGIN as f64), (MARGIN as f64, (HEIGHT - MARGIN) as f64), axis);
    for (k, s) in series.iter().enumerate() {
        let n = s.len().max(2) - 1;
        let point = |i: usize| {
            let x = MARGIN as f64 + pw * i as f64 / n as f64;
            let y = MARGIN as f64 + ph * (1.0 - (s[i] - lo) / span);
            (x, y)
        };
        for i in 1..s.len() {
            line(&mut img, point(i - 1), point(i), COLOURS[k % COLOURS.len()]);
        }
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}
