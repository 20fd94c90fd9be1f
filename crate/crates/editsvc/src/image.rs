//! Channel images as PNG or binary PPM bytes.

use std::str::FromStr;

use panfield_core::io::{label_color, ppm, to_u8};
use panfield_core::renderer::ChannelImages;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Color,
    Depth,
    Semantic,
    Instance,
    Opacity,
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "color" => Ok(Self::Color),
            "depth" => Ok(Self::Depth),
            "semantic" => Ok(Self::Semantic),
            "instance" => Ok(Self::Instance),
            "opacity" => Ok(Self::Opacity),
            _ => Err(format!("unknown channel {s:?} (color, depth, semantic, instance, opacity)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            Self::Png => "image/png",
            Self::Ppm => "image/x-portable-pixmap",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "png" => Ok(Self::Png),
            "ppm" => Ok(Self::Ppm),
            _ => Err(format!("unknown format {s:?} (png, ppm)")),
        }
    }
}

/// Number of palette entries used for label images.
pub const PALETTE_SIZE: usize = 256;

fn gray(values: &[f32], scale: f32) -> Vec<u8> {
    values.iter().map(|&v| to_u8(v * scale)).collect()
}

/// Depth is scaled by the image's largest depth so near is dark.
fn depth_gray(depth: &[f32]) -> Vec<u8> {
    let max = depth.iter().copied().filter(|d| d.is_finite()).fold(0.0f32, f32::max);
    gray(depth, if max > 0.0 { 1.0 / max } else { 0.0 })
}

fn labels(values: &[u32]) -> Vec<u8> {
    values.iter().map(|&l| l.min(PALETTE_SIZE as u32 - 1) as u8).collect()
}

pub fn encode(img: &ChannelImages, channel: Channel, format: ImageFormat) -> Result<Vec<u8>, png::EncodingError> {
    let (w, h) = (img.width, img.height);
    match format {
        ImageFormat::Ppm => {
            let rgb: Vec<[f32; 3]> = match channel {
                Channel::Color => img.color.clone(),
                Channel::Depth => expand_gray(&depth_gray(&img.depth)),
                Channel::Opacity => expand_gray(&gray(&img.opacity, 1.0)),
                Channel::Semantic => expand_labels(&img.semantic),
                Channel::Instance => expand_labels(&img.instance),
            };
            Ok(ppm(w, h, &rgb))
        }
        ImageFormat::Png => {
            let mut out = Vec::new();
            let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
            enc.set_depth(png::BitDepth::Eight);
            let data = match channel {
                Channel::Color => {
                    enc.set_color(png::ColorType::Rgb);
                    img.color.iter().flat_map(|c| c.map(to_u8)).collect()
                }
                Channel::Depth => {
                    enc.set_color(png::ColorType::Grayscale);
                    depth_gray(&img.depth)
                }
                Channel::Opacity => {
                    enc.set_color(png::ColorType::Grayscale);
                    gray(&img.opacity, 1.0)
                }
                Channel::Semantic | Channel::Instance => {
                    enc.set_color(png::ColorType::Indexed);
                    enc.set_palette(palette());
                    labels(if channel == Channel::Semantic { &img.semantic } else { &img.instance })
                }
            };
            let mut writer = enc.write_header()?;
            writer.write_image_data(&data)?;
            writer.finish()?;
            Ok(out)
        }
    }
}

pub fn palette() -> Vec<u8> {
    (0..PALETTE_SIZE as u32).flat_map(label_color).collect()
}

fn expand_gray(values: &[u8]) -> Vec<[f32; 3]> {
    values.iter().map(|&v| [v as f32 / 255.0; 3]).collect()
}

fn expand_labels(values: &[u32]) -> Vec<[f32; 3]> {
    labels(values)
        .iter()
        .map(|&l| label_color(l as u32).map(|c| c as f32 / 255.0))
        .collect()
}
