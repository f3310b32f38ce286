//! GeoTIFF reading and writing.
//!
//! Decoding goes through the `tiff` crate, so any layout and compression it
//! understands can be read. The writer emits 256×256 DEFLATE tiles, chunky
//! sample layout, and the GeoTIFF tags needed for an axis-aligned projected
//! raster: pixel scale, a single tiepoint and a minimal GeoKey directory.
//! Nodata and key/value metadata use the GDAL private tags so files stay
//! readable by GDAL-based tooling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use flate2::write::ZlibEncoder;
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::TiffEncoder;
use tiff::tags::Tag;
use tiff::TiffError;

use super::{
    metadata_keys, AffineTransform, ByteRaster, Grid, MultiSpectralImage, BAND_COUNT,
    DEFAULT_CRS, DEFAULT_NODATA,
};
use crate::error::{Error, Result};

const TAG_MODEL_PIXEL_SCALE: u16 = 33550;
const TAG_MODEL_TIEPOINT: u16 = 33922;
const TAG_MODEL_TRANSFORMATION: u16 = 34264;
const TAG_GEO_KEY_DIRECTORY: u16 = 34735;
const TAG_GDAL_METADATA: u16 = 42112;
const TAG_GDAL_NODATA: u16 = 42113;

const KEY_MODEL_TYPE: u16 = 1024;
const KEY_RASTER_TYPE: u16 = 1025;
const KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const KEY_PROJECTED_CS_TYPE: u16 = 3072;

const TILE_SIZE: usize = 256;

/// Decoded raster payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    Grid(Grid),
    Image(MultiSpectralImage),
    Bands(ByteRaster),
}

/// Borrowed raster handed to [`write_geotiff`].
#[derive(Debug, Clone, Copy)]
pub enum RasterRef<'a> {
    Grid(&'a Grid),
    Image(&'a MultiSpectralImage),
    Bands(&'a ByteRaster),
}

impl<'a> From<&'a Grid> for RasterRef<'a> {
    fn from(g: &'a Grid) -> Self {
        RasterRef::Grid(g)
    }
}

impl<'a> From<&'a MultiSpectralImage> for RasterRef<'a> {
    fn from(i: &'a MultiSpectralImage) -> Self {
        RasterRef::Image(i)
    }
}

impl<'a> From<&'a ByteRaster> for RasterRef<'a> {
    fn from(b: &'a ByteRaster) -> Self {
        RasterRef::Bands(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoTiff {
    pub raster: Raster,
    pub metadata: BTreeMap<String, String>,
}

impl GeoTiff {
    pub fn into_grid(self) -> Option<Grid> {
        match self.raster {
            Raster::Grid(g) => Some(g),
            _ => None,
        }
    }

    pub fn into_image(self) -> Option<MultiSpectralImage> {
        match self.raster {
            Raster::Image(i) => Some(i),
            _ => None,
        }
    }

    pub fn into_bands(self) -> Option<ByteRaster> {
        match self.raster {
            Raster::Bands(b) => Some(b),
            _ => None,
        }
    }

    /// Parses a numeric metadata entry.
    pub fn metadata_f64(&self, key: &str) -> Option<f64> {
        self.metadata.get(key).and_then(|v| v.trim().parse().ok())
    }
}

fn tiff_err(path: &Path, err: TiffError) -> Error {
    match err {
        TiffError::IoError(e) if e.kind() != std::io::ErrorKind::UnexpectedEof => Error::io(path, e),
        TiffError::UnsupportedError(e) => Error::unsupported(path, e),
        other => Error::malformed(path, other),
    }
}

pub fn read_geotiff(path: impl AsRef<Path>) -> Result<GeoTiff> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());

    let (width, height) = decoder.dimensions().map_err(|e| tiff_err(path, e))?;
    let (width, height) = (width as usize, height as usize);
    let samples: usize = decoder
        .find_tag_unsigned::<u16>(Tag::SamplesPerPixel)
        .map_err(|e| tiff_err(path, e))?
        .unwrap_or(1)
        .into();
    let planar = decoder
        .find_tag_unsigned::<u16>(Tag::PlanarConfiguration)
        .map_err(|e| tiff_err(path, e))?
        .unwrap_or(1);
    if samples > 1 && planar != 1 {
        return Err(Error::unsupported(path, "planar (band-separate) sample layout"));
    }

    let transform = read_transform(&mut decoder, path)?;
    let crs_code = read_crs(&mut decoder, path)?.unwrap_or(DEFAULT_CRS);
    let nodata = match decoder
        .find_tag(Tag::Unknown(TAG_GDAL_NODATA))
        .map_err(|e| tiff_err(path, e))?
    {
        Some(v) => {
            let text = v.into_string().map_err(|e| tiff_err(path, e))?;
            text.trim_matches(char::from(0))
                .trim()
                .parse::<f32>()
                .map_err(|_| Error::malformed(path, format!("bad nodata value {text:?}")))?
        }
        None => DEFAULT_NODATA,
    };
    let metadata = match decoder
        .find_tag(Tag::Unknown(TAG_GDAL_METADATA))
        .map_err(|e| tiff_err(path, e))?
    {
        Some(v) => parse_gdal_metadata(&v.into_string().map_err(|e| tiff_err(path, e))?),
        None => BTreeMap::new(),
    };

    let data = decoder.read_image().map_err(|e| tiff_err(path, e))?;
    let expected = width * height * samples;

    let raster = if samples == 1 {
        let values: Vec<f32> = match data {
            DecodingResult::F32(v) => v,
            DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
            DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
            _ => return Err(Error::unsupported(path, "unsupported sample type")),
        };
        if values.len() != expected {
            return Err(Error::malformed(path, "pixel count does not match dimensions"));
        }
        Raster::Grid(Grid::new(transform, width, height, values, nodata, crs_code)?)
    } else {
        let DecodingResult::U8(interleaved) = data else {
            return Err(Error::unsupported(
                path,
                "multi-band rasters must be unsigned 8-bit",
            ));
        };
        if interleaved.len() != expected {
            return Err(Error::malformed(path, "pixel count does not match dimensions"));
        }
        let mut bands = vec![Vec::with_capacity(width * height); samples];
        for pixel in interleaved.chunks_exact(samples) {
            for (band, &v) in bands.iter_mut().zip(pixel) {
                band.push(v);
            }
        }
        if samples == BAND_COUNT {
            let year = metadata
                .get(metadata_keys::ACQUISITION_YEAR)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::malformed(path, "5-band image without ACQUISITION_YEAR metadata")
                })?;
            Raster::Image(MultiSpectralImage::new(
                transform, width, height, crs_code, bands, year,
            )?)
        } else {
            Raster::Bands(ByteRaster::new(transform, width, height, crs_code, bands)?)
        }
    };

    Ok(GeoTiff { raster, metadata })
}

fn read_f64_tag<R: std::io::Read + std::io::Seek>(
    decoder: &mut Decoder<R>,
    tag: u16,
    path: &Path,
) -> Result<Option<Vec<f64>>> {
    decoder
        .find_tag(Tag::Unknown(tag))
        .map_err(|e| tiff_err(path, e))?
        .map(|v| v.into_f64_vec().map_err(|e| tiff_err(path, e)))
        .transpose()
}

fn read_transform<R: std::io::Read + std::io::Seek>(
    decoder: &mut Decoder<R>,
    path: &Path,
) -> Result<AffineTransform> {
    if let Some(m) = read_f64_tag(decoder, TAG_MODEL_TRANSFORMATION, path)? {
        if m.len() < 8 {
            return Err(Error::malformed(path, "short ModelTransformation tag"));
        }
        if m[1] != 0.0 || m[4] != 0.0 {
            return Err(Error::unsupported(path, "rotated or skewed transform"));
        }
        return AffineTransform::new(m[3], m[7], m[0], m[5])
            .map_err(|e| Error::unsupported(path, e));
    }
    let scale = read_f64_tag(decoder, TAG_MODEL_PIXEL_SCALE, path)?
        .ok_or_else(|| Error::malformed(path, "missing ModelPixelScale tag"))?;
    let tie = read_f64_tag(decoder, TAG_MODEL_TIEPOINT, path)?
        .ok_or_else(|| Error::malformed(path, "missing ModelTiepoint tag"))?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(Error::malformed(path, "short georeferencing tags"));
    }
    if tie.len() > 6 {
        return Err(Error::unsupported(path, "multiple tiepoints (warped raster)"));
    }
    let (sx, sy) = (scale[0], -scale[1]);
    let origin_x = tie[3] - tie[0] * sx;
    let origin_y = tie[4] - tie[1] * sy;
    AffineTransform::new(origin_x, origin_y, sx, sy).map_err(|e| Error::unsupported(path, e))
}

fn read_crs<R: std::io::Read + std::io::Seek>(
    decoder: &mut Decoder<R>,
    path: &Path,
) -> Result<Option<u32>> {
    let Some(keys) = decoder
        .find_tag(Tag::Unknown(TAG_GEO_KEY_DIRECTORY))
        .map_err(|e| tiff_err(path, e))?
    else {
        return Ok(None);
    };
    let keys = keys.into_u16_vec().map_err(|e| tiff_err(path, e))?;
    if keys.len() < 4 {
        return Err(Error::malformed(path, "short GeoKeyDirectory"));
    }
    let count = keys[3] as usize;
    let mut geographic = None;
    for entry in keys[4..].chunks_exact(4).take(count) {
        // Inline SHORT values only (location 0).
        if entry[1] != 0 {
            continue;
        }
        match entry[0] {
            KEY_PROJECTED_CS_TYPE => return Ok(Some(u32::from(entry[3]))),
            KEY_GEOGRAPHIC_TYPE => geographic = Some(u32::from(entry[3])),
            _ => {}
        }
    }
    Ok(geographic)
}

/// Writes `raster` with the given metadata. For multispectral images the
/// `ACQUISITION_YEAR` key is filled from the image unless supplied.
pub fn write_geotiff<'a>(
    raster: impl Into<RasterRef<'a>>,
    path: impl AsRef<Path>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let raster = raster.into();
    let mut metadata = metadata.clone();

    let (transform, width, height, crs_code) = match raster {
        RasterRef::Grid(g) => (g.transform, g.width, g.height, g.crs_code),
        RasterRef::Image(i) => {
            metadata
                .entry(metadata_keys::ACQUISITION_YEAR.to_string())
                .or_insert_with(|| format!("{:?}", i.acquisition_year));
            (i.transform, i.width, i.height, i.crs_code)
        }
        RasterRef::Bands(b) => (b.transform, b.width, b.height, b.crs_code),
    };
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("cannot write an empty raster".into()));
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let write_err = |e: TiffError| match e {
        TiffError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };

    let mut encoder = TiffEncoder::new(BufWriter::new(file)).map_err(write_err)?;
    let mut dir = encoder.image_directory().map_err(write_err)?;

    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut offsets = Vec::with_capacity(tiles_x * tiles_y);
    let mut counts = Vec::with_capacity(tiles_x * tiles_y);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let raw = encode_tile(raster, tx * TILE_SIZE, ty * TILE_SIZE);
            let mut z = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
            z.write_all(&raw).map_err(|e| Error::io(path, e))?;
            let compressed = z.finish().map_err(|e| Error::io(path, e))?;
            let offset = dir.write_data(compressed.as_slice()).map_err(write_err)?;
            offsets.push(u32::try_from(offset).map_err(|_| {
                Error::io(path, std::io::Error::other("raster exceeds classic TIFF size"))
            })?);
            counts.push(compressed.len() as u32);
        }
    }

    let (samples, bits, sample_format): (u16, u16, u16) = match raster {
        RasterRef::Grid(_) => (1, 32, 3),
        RasterRef::Image(_) => (BAND_COUNT as u16, 8, 1),
        RasterRef::Bands(b) => (b.bands.len() as u16, 8, 1),
    };

    let w = write_err;
    dir.write_tag(Tag::ImageWidth, width as u32).map_err(w)?;
    dir.write_tag(Tag::ImageLength, height as u32).map_err(w)?;
    dir.write_tag(Tag::BitsPerSample, vec![bits; samples as usize].as_slice())
        .map_err(w)?;
    // Adobe DEFLATE.
    dir.write_tag(Tag::Compression, 8u16).map_err(w)?;
    dir.write_tag(Tag::PhotometricInterpretation, 1u16).map_err(w)?;
    dir.write_tag(Tag::SamplesPerPixel, samples).map_err(w)?;
    dir.write_tag(Tag::PlanarConfiguration, 1u16).map_err(w)?;
    dir.write_tag(Tag::TileWidth, TILE_SIZE as u32).map_err(w)?;
    dir.write_tag(Tag::TileLength, TILE_SIZE as u32).map_err(w)?;
    dir.write_tag(Tag::TileOffsets, offsets.as_slice()).map_err(w)?;
    dir.write_tag(Tag::TileByteCounts, counts.as_slice()).map_err(w)?;
    if samples > 1 {
        dir.write_tag(Tag::ExtraSamples, vec![0u16; samples as usize - 1].as_slice())
            .map_err(w)?;
    }
    dir.write_tag(Tag::SampleFormat, vec![sample_format; samples as usize].as_slice())
        .map_err(w)?;

    let scale = [transform.pixel_size_x, -transform.pixel_size_y, 0.0];
    let tie = [0.0, 0.0, 0.0, transform.origin_x, transform.origin_y, 0.0];
    dir.write_tag(Tag::Unknown(TAG_MODEL_PIXEL_SCALE), &scale[..])
        .map_err(w)?;
    dir.write_tag(Tag::Unknown(TAG_MODEL_TIEPOINT), &tie[..])
        .map_err(w)?;
    let crs = u16::try_from(crs_code)
        .map_err(|_| Error::InvalidArgument(format!("EPSG code {crs_code} out of range")))?;
    let geokeys: [u16; 16] = [
        1, 1, 0, 3, //
        KEY_MODEL_TYPE, 0, 1, 1, // projected
        KEY_RASTER_TYPE, 0, 1, 1, // pixel-is-area
        KEY_PROJECTED_CS_TYPE, 0, 1, crs,
    ];
    dir.write_tag(Tag::Unknown(TAG_GEO_KEY_DIRECTORY), &geokeys[..])
        .map_err(w)?;
    if let RasterRef::Grid(g) = raster {
        dir.write_tag(Tag::Unknown(TAG_GDAL_NODATA), format!("{}", g.nodata).as_str())
            .map_err(w)?;
    }
    if !metadata.is_empty() {
        dir.write_tag(
            Tag::Unknown(TAG_GDAL_METADATA),
            format_gdal_metadata(&metadata).as_str(),
        )
        .map_err(w)?;
    }
    dir.finish().map_err(w)?;
    Ok(())
}

fn encode_tile(raster: RasterRef<'_>, x0: usize, y0: usize) -> Vec<u8> {
    match raster {
        RasterRef::Grid(g) => {
            let mut out = Vec::with_capacity(TILE_SIZE * TILE_SIZE * 4);
            let values = g.values();
            for r in 0..TILE_SIZE {
                for c in 0..TILE_SIZE {
                    let (row, col) = (y0 + r, x0 + c);
                    let v = if row < g.height && col < g.width {
                        values[row * g.width + col]
                    } else {
                        g.nodata
                    };
                    out.extend_from_slice(&v.to_ne_bytes());
                }
            }
            out
        }
        RasterRef::Image(i) => interleave(i.bands(), i.width, i.height, x0, y0),
        RasterRef::Bands(b) => interleave(&b.bands, b.width, b.height, x0, y0),
    }
}

fn interleave(bands: &[Vec<u8>], width: usize, height: usize, x0: usize, y0: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(TILE_SIZE * TILE_SIZE * bands.len());
    for r in 0..TILE_SIZE {
        for c in 0..TILE_SIZE {
            let (row, col) = (y0 + r, x0 + c);
            if row < height && col < width {
                out.extend(bands.iter().map(|b| b[row * width + col]));
            } else {
                out.extend(std::iter::repeat_n(0u8, bands.len()));
            }
        }
    }
    out
}

fn format_gdal_metadata(metadata: &BTreeMap<String, String>) -> String {
    let mut xml = String::from("<GDALMetadata>\n");
    for (k, v) in metadata {
        xml.push_str(&format!(
            "  <Item name=\"{}\">{}</Item>\n",
            xml_escape(k),
            xml_escape(v)
        ));
    }
    xml.push_str("</GDALMetadata>");
    xml
}

/// Dataset-level items only; per-band items (with a `sample` attribute) are skipped.
fn parse_gdal_metadata(xml: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut rest = xml;
    while let Some(start) = rest.find("<Item") {
        rest = &rest[start + 5..];
        let Some(tag_end) = rest.find('>') else { break };
        let attrs = &rest[..tag_end];
        let body_start = tag_end + 1;
        let Some(close) = rest[body_start..].find("</Item>") else { break };
        let body = &rest[body_start..body_start + close];
        rest = &rest[body_start + close + 7..];
        if attrs.contains("sample=") {
            continue;
        }
        if let Some(name) = attr_value(attrs, "name") {
            out.insert(xml_unescape(name), xml_unescape(body));
        }
    }
    out
}

fn attr_value<'a>(attrs: &'a str, name: &str) -> Option<&'a str> {
    let key = format!("{name}=\"");
    let start = attrs.find(&key)? + key.len();
    let len = attrs[start..].find('"')?;
    Some(&attrs[start..start + len])
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn xml_unescape(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}
