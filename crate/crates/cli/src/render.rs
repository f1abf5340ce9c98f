//! Stimulus rendering. Synthetic samples become a procedural patch degraded
//! according to their latents; samples with an `image_ref` are streamed from
//! disk unchanged.

use std::io::Cursor;

use anyhow::{anyhow, Context, Result};
use image::{ImageFormat, RgbImage};
use iqa_troubleshoot::datapool::{Latents, Sample};
use iqa_troubleshoot::rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const SIZE: u32 = 96;

/// Encoded image bytes and their MIME type.
pub struct Rendered {
    pub bytes: Vec<u8>,
    pub content_type: &'static str,
}

pub fn render_sample(sample: &Sample) -> Result<Rendered> {
    if let Some(path) = &sample.image_ref {
        let bytes = std::fs::read(path).with_context(|| format!("reading {path}"))?;
        let content_type = match ImageFormat::from_path(path) {
            Ok(ImageFormat::Png) => "image/png",
            Ok(ImageFormat::Jpeg) => "image/jpeg",
            _ => "application/octet-stream",
        };
        return Ok(Rendered { bytes, content_type });
    }
    let latents = sample
        .latents
        .ok_or_else(|| anyhow!("sample `{}` has neither latents nor an image", sample.id))?;
    let img = render_latents(&sample.id, &latents, SIZE);
    Ok(Rendered {
        bytes: encode_png(&img)?,
        content_type: "image/png",
    })
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Clean pattern for `id`: two oriented gratings and a disc on a mid-grey
/// field, channel values in `[0, 1]`.
pub fn base_pattern(id: &str, size: u32) -> Vec<[f64; 3]> {
    let mut r = rng::stream(0, &format!("render/{id}"));
    let freqs: [f64; 2] = [r.random_range(2.0..6.0), r.random_range(3.0..9.0)];
    let angles: [f64; 2] = [
        r.random_range(0.0..std::f64::consts::PI),
        r.random_range(0.0..std::f64::consts::PI),
    ];
    let tint: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.2..0.2));
    let (cx, cy, rad) = (
        r.random_range(0.3..0.7),
        r.random_range(0.3..0.7),
        r.random_range(0.12..0.25),
    );
    let n = size as f64;
    let mut px = Vec::with_capacity((size * size) as usize);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / n, y as f64 / n);
            let mut g = 0.0;
            for k in 0..2 {
                let t = u * angles[k].cos() + v * angles[k].sin();
                g += 0.15 * (2.0 * std::f64::consts::PI * freqs[k] * t).sin();
            }
            let disc = if (u - cx).powi(2) + (v - cy).powi(2) < rad * rad {
                0.15
            } else {
                -0.03
            };
            px.push(std::array::from_fn(|c| {
                (0.5 + g + disc + tint[c] * (1.0 + g)).clamp(0.0, 1.0)
            }));
        }
    }
    px
}

/// Applies, in order: contrast loss, colour loss, over-exposure, blur and
/// sharpness loss as one box blur, then additive noise.
pub fn render_latents(id: &str, l: &Latents, size: u32) -> RgbImage {
    let mut px = base_pattern(id, size);
    for p in px.iter_mut() {
        for c in p.iter_mut() {
            *c = 0.5 + (*c - 0.5) * (1.0 - 0.8 * l.contrast);
        }
        let grey = (p[0] + p[1] + p[2]) / 3.0;
        for c in p.iter_mut() {
            *c = grey + (*c - grey) * (1.0 - 0.9 * l.colorfulness);
            *c += 0.7 * l.exposure * (1.0 - *c);
        }
    }
    let radius = (5.0 * l.blur + 2.0 * l.sharpness).round() as usize;
    if radius > 0 {
        px = box_blur(&px, size as usize, radius);
    }
    if l.noise > 0.0 {
        let mut r = rng::stream(0, &format!("render/{id}/noise"));
        for p in px.iter_mut() {
            for c in p.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut r);
                *c += 0.2 * l.noise * n;
            }
        }
    }
    let mut img = RgbImage::new(size, size);
    for (i, p) in px.iter().enumerate() {
        let (x, y) = (i as u32 % size, i as u32 / size);
        img.put_pixel(x, y, image::Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)));
    }
    img
}

fn box_blur(px: &[[f64; 3]], size: usize, radius: usize) -> Vec<[f64; 3]> {
    let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; src.len()];
        for a in 0..size {
            for b in 0..size {
                let lo = b.saturating_sub(radius);
                let hi = (b + radius).min(size - 1);
                let mut acc = [0.0; 3];
                for k in lo..=hi {
                    let idx = if horizontal { a * size + k } else { k * size + a };
                    for c in 0..3 {
                        acc[c] += src[idx][c];
                    }
                }
                let idx = if horizontal { a * size + b } else { b * size + a };
                out[idx] = acc.map(|v| v / (hi - lo + 1) as f64);
            }
        }
        out
    };
    pass(&pass(px, true), false)
}
