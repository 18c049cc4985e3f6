//! File formats: GeoTIFF rasters, GeoJSON layers, COCO datasets and results, PNG images and
//! JSON documents.

pub mod coco;
pub mod geojson;
pub mod geotiff;

use std::path::Path;

use crownseg_core::Grid;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parse a JSON document; type errors name the offending field path.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        Error::Json {
            path: path.to_path_buf(),
            location: format!("{field} (line {} column {})", inner.line(), inner.column()),
            message: inner.to_string(),
        }
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    image::save_buffer(path, rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_png_grid(path: &Path, rgb: &Grid<[u8; 3]>) -> Result<()> {
    let flat: Vec<u8> = rgb.data().iter().flat_map(|p| p.iter().copied()).collect();
    write_png(path, rgb.width(), rgb.height(), &flat)
}

pub fn read_png(path: &Path) -> Result<Grid<[u8; 3]>> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(w, h, data)?)
}
