//! GeoTIFF rasters: 8-bit RGB(+band) images and single-band float elevation grids.
//!
//! Georeferencing uses the pixel-scale and tie-point tags; rasters without them get the
//! identity pixel transform.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crownseg_core::tiling::{GeoTransform, Orthomosaic};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum RasterData {
    /// Band-interleaved bytes.
    U8(Vec<u8>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoRaster {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub data: RasterData,
    pub geotransform: Option<GeoTransform>,
    pub nodata: Option<f64>,
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> Error {
    Error::format(path, e.to_string())
}

pub fn read_geotiff(path: &Path) -> Result<GeoRaster> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(f))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let bands = match dec.colortype().map_err(|e| tiff_err(path, e))? {
        ColorType::Gray(_) => 1,
        ColorType::RGB(_) => 3,
        ColorType::RGBA(_) => 4,
        ColorType::Multiband { num_samples, .. } => num_samples as usize,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let scale = dec
        .find_tag(Tag::ModelPixelScaleTag)
        .map_err(|e| tiff_err(path, e))?
        .map(|v| v.into_f64_vec())
        .transpose()
        .map_err(|e| tiff_err(path, e))?;
    let tie = dec
        .find_tag(Tag::ModelTiepointTag)
        .map_err(|e| tiff_err(path, e))?
        .map(|v| v.into_f64_vec())
        .transpose()
        .map_err(|e| tiff_err(path, e))?;
    let geotransform = match (scale, tie) {
        (Some(s), Some(t)) if s.len() >= 2 && t.len() >= 6 => Some(GeoTransform([
            t[3] - t[0] * s[0],
            s[0],
            0.0,
            t[4] + t[1] * s[1],
            0.0,
            -s[1],
        ])),
        _ => None,
    };
    let nodata = dec
        .find_tag(Tag::GdalNodata)
        .map_err(|e| tiff_err(path, e))?
        .and_then(|v| v.into_string().ok())
        .and_then(|s| s.trim_matches(char::from(0)).trim().parse::<f64>().ok());
    let data = match dec.read_image().map_err(|e| tiff_err(path, e))? {
        DecodingResult::U8(v) => RasterData::U8(v),
        DecodingResult::U16(v) => RasterData::F32(v.into_iter().map(f32::from).collect()),
        DecodingResult::I16(v) => RasterData::F32(v.into_iter().map(f32::from).collect()),
        DecodingResult::F32(v) => RasterData::F32(v),
        DecodingResult::F64(v) => RasterData::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => return Err(Error::format(path, "unsupported sample format")),
    };
    Ok(GeoRaster {
        width: w as usize,
        height: h as usize,
        bands,
        data,
        geotransform,
        nodata,
    })
}

fn geo_tags(gt: &GeoTransform) -> Result<([f64; 3], [f64; 6])> {
    let g = gt.0;
    if g[2] != 0.0 || g[4] != 0.0 {
        return Err(Error::Usage("rotated geotransforms cannot be written".into()));
    }
    Ok(([g[1], -g[5], 0.0], [0.0, 0.0, 0.0, g[0], g[3], 0.0]))
}

macro_rules! write_with_tags {
    ($path:expr, $ct:ty, $w:expr, $h:expr, $data:expr, $gt:expr, $nodata:expr) => {{
        let path: &Path = $path;
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = TiffEncoder::new(BufWriter::new(f)).map_err(|e| tiff_err(path, e))?;
        let mut img = enc
            .new_image::<$ct>($w as u32, $h as u32)
            .map_err(|e| tiff_err(path, e))?;
        if let Some(gt) = $gt {
            let (scale, tie) = geo_tags(gt)?;
            img.encoder()
                .write_tag(Tag::ModelPixelScaleTag, &scale[..])
                .map_err(|e| tiff_err(path, e))?;
            img.encoder()
                .write_tag(Tag::ModelTiepointTag, &tie[..])
                .map_err(|e| tiff_err(path, e))?;
        }
        if let Some(nd) = $nodata {
            img.encoder()
                .write_tag(Tag::GdalNodata, format!("{nd}").as_str())
                .map_err(|e| tiff_err(path, e))?;
        }
        img.write_data($data).map_err(|e| tiff_err(path, e))?;
        Ok(())
    }};
}

/// Interleaved 8-bit RGB.
pub fn write_rgb(path: &Path, w: usize, h: usize, rgb: &[u8], gt: Option<&GeoTransform>, nodata: Option<f64>) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Usage(format!("RGB buffer holds {} bytes, expected {}", rgb.len(), w * h * 3)));
    }
    write_with_tags!(path, colortype::RGB8, w, h, rgb, gt, nodata)
}

/// Single-band 32-bit float.
pub fn write_f32(path: &Path, w: usize, h: usize, data: &[f32], gt: Option<&GeoTransform>, nodata: Option<f64>) -> Result<()> {
    if data.len() != w * h {
        return Err(Error::Usage(format!("band holds {} values, expected {}", data.len(), w * h)));
    }
    write_with_tags!(path, colortype::Gray32Float, w, h, data, gt, nodata)
}

/// Orthomosaic from an RGB (or RGB + 8-bit DSM band) GeoTIFF and an optional separate DSM.
/// A separate DSM takes precedence over a fourth band.
pub fn read_orthomosaic(raster_id: &str, rgb_path: &Path, dsm_path: Option<&Path>) -> Result<Orthomosaic> {
    let r = read_geotiff(rgb_path)?;
    let RasterData::U8(bytes) = &r.data else {
        return Err(Error::format(rgb_path, "orthomosaic bands must be 8-bit"));
    };
    if r.bands != 3 && r.bands != 4 {
        return Err(Error::format(rgb_path, format!("expected 3 or 4 bands, found {}", r.bands)));
    }
    let n = r.width * r.height;
    let rgb: Vec<u8> = (0..n)
        .flat_map(|i| bytes[i * r.bands..i * r.bands + 3].iter().copied())
        .collect();
    let mut dsm = (r.bands == 4).then(|| (0..n).map(|i| f32::from(bytes[i * 4 + 3])).collect::<Vec<_>>());
    if let Some(p) = dsm_path {
        let d = read_geotiff(p)?;
        if d.width != r.width || d.height != r.height || d.bands != 1 {
            return Err(Error::format(
                p,
                format!(
                    "DSM is {}x{}x{}, expected {}x{}x1",
                    d.width, d.height, d.bands, r.width, r.height
                ),
            ));
        }
        let mut values = match d.data {
            RasterData::F32(v) => v,
            RasterData::U8(v) => v.into_iter().map(f32::from).collect(),
        };
        // pixels at the DSM's own nodata become the raster nodata (zero)
        if let Some(nd) = d.nodata {
            for v in &mut values {
                if (f64::from(*v) == nd) || v.is_nan() {
                    *v = 0.0;
                }
            }
        }
        dsm = Some(values);
    }
    let gt = r.geotransform.unwrap_or(GeoTransform::IDENTITY);
    Ok(Orthomosaic::new(raster_id, r.width, r.height, rgb, dsm, r.nodata.unwrap_or(0.0), gt)?)
}

/// Write an orthomosaic as an RGB GeoTIFF plus, when present, a float DSM GeoTIFF.
pub fn write_orthomosaic(ortho: &Orthomosaic, rgb_path: &Path, dsm_path: Option<&Path>) -> Result<()> {
    let gt = ortho.geotransform();
    write_rgb(rgb_path, ortho.width(), ortho.height(), ortho.rgb(), Some(&gt), Some(ortho.nodata()))?;
    if let (Some(p), Some(d)) = (dsm_path, ortho.dsm()) {
        write_f32(p, ortho.width(), ortho.height(), d, Some(&gt), Some(ortho.nodata()))?;
    }
    Ok(())
}
