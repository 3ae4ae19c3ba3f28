//! Shot media containers.
//!
//! Two layouts are readable:
//! * `.srv` files: a 20-byte little-endian header (`b"SRV1"`, width `u32`,
//!   height `u32`, frame count `u32`, fps `f32`) followed by the frames as
//!   interleaved RGB8, one after another. Lossless; this is also what the
//!   editor writes.
//! * a directory of `frame_NNNNNN.png` images, numbered from zero.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::media::frame::FrameImage;

pub const SRV_MAGIC: &[u8; 4] = b"SRV1";
const SRV_HEADER: u64 = 20;

/// Random access to decoded RGB frames.
pub trait FrameSource: Send + Sync {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn frame_count(&self) -> u64;
    fn fps(&self) -> f64;
    /// Interleaved RGB8 pixels of frame `index`.
    fn read_rgb8(&self, index: u64) -> Result<Vec<u8>>;

    fn read_frame(&self, index: u64) -> Result<FrameImage> {
        FrameImage::from_rgb8(self.height(), self.width(), &self.read_rgb8(index)?)
    }
}

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::MediaUnreadable { uri: path.display().to_string(), reason: reason.to_string() }
}

/// Opens either container layout based on what `path` is.
pub fn open_media(path: impl AsRef<Path>) -> Result<Box<dyn FrameSource>> {
    let path = path.as_ref();
    if path.is_dir() {
        Ok(Box::new(PngDirSource::open(path)?))
    } else {
        Ok(Box::new(SrvSource::open(path)?))
    }
}

#[derive(Debug, Clone)]
pub struct SrvSource {
    path: PathBuf,
    width: usize,
    height: usize,
    count: u64,
    fps: f64,
}

impl SrvSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = File::open(path).map_err(|e| unreadable(path, e))?;
        let mut header = [0u8; SRV_HEADER as usize];
        f.read_exact(&mut header).map_err(|e| unreadable(path, format!("short header: {e}")))?;
        if &header[..4] != SRV_MAGIC {
            return Err(unreadable(path, "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let (width, height, count) = (u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as u64);
        let fps = f32::from_le_bytes(header[16..20].try_into().unwrap()) as f64;
        let len = f.metadata().map_err(|e| unreadable(path, e))?.len();
        let expected = SRV_HEADER + count * (width * height * 3) as u64;
        if len < expected || width == 0 || height == 0 {
            return Err(unreadable(path, format!("truncated: {len} bytes, expected {expected}")));
        }
        Ok(Self { path: path.to_path_buf(), width, height, count, fps })
    }
}

impl FrameSource for SrvSource {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn frame_count(&self) -> u64 {
        self.count
    }

    fn fps(&self) -> f64 {
        self.fps
    }

    fn read_rgb8(&self, index: u64) -> Result<Vec<u8>> {
        if index >= self.count {
            return Err(Error::IndexOutOfRange { index, start: 0, end: self.count });
        }
        let size = self.width * self.height * 3;
        let mut f = File::open(&self.path).map_err(|e| unreadable(&self.path, e))?;
        f.seek(SeekFrom::Start(SRV_HEADER + index * size as u64)).map_err(|e| unreadable(&self.path, e))?;
        let mut buf = vec![0u8; size];
        f.read_exact(&mut buf).map_err(|e| unreadable(&self.path, e))?;
        Ok(buf)
    }
}

/// Writes frames (interleaved RGB8, all `width x height`) as an `.srv` file.
pub fn write_srv<'a>(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    fps: f64,
    frames: impl IntoIterator<Item = &'a [u8]>,
) -> Result<u64> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut count: u32 = 0;
    let io = |e| Error::io(path, e);
    w.write_all(SRV_MAGIC).map_err(io)?;
    w.write_all(&(width as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(height as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&0u32.to_le_bytes()).map_err(io)?;
    w.write_all(&(fps as f32).to_le_bytes()).map_err(io)?;
    for frame in frames {
        if frame.len() != width * height * 3 {
            return Err(Error::dims(width * height * 3, frame.len()));
        }
        w.write_all(frame).map_err(io)?;
        count += 1;
    }
    w.seek(SeekFrom::Start(12)).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(count as u64)
}

#[derive(Debug, Clone)]
pub struct PngDirSource {
    dir: PathBuf,
    width: usize,
    height: usize,
    count: u64,
}

impl PngDirSource {
    pub fn frame_path(dir: &Path, index: u64) -> PathBuf {
        dir.join(format!("frame_{index:06}.png"))
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut count = 0;
        while Self::frame_path(dir, count).exists() {
            count += 1;
        }
        if count == 0 {
            return Err(unreadable(dir, "no frame_000000.png"));
        }
        let (width, height) =
            image::image_dimensions(Self::frame_path(dir, 0)).map_err(|e| unreadable(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), width: width as usize, height: height as usize, count })
    }
}

impl FrameSource for PngDirSource {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn frame_count(&self) -> u64 {
        self.count
    }

    /// PNG sequences carry no timing; callers use the manifest fps.
    fn fps(&self) -> f64 {
        0.0
    }

    fn read_rgb8(&self, index: u64) -> Result<Vec<u8>> {
        if index >= self.count {
            return Err(Error::IndexOutOfRange { index, start: 0, end: self.count });
        }
        let path = Self::frame_path(&self.dir, index);
        let img = image::open(&path).map_err(|e| unreadable(&path, e))?.to_rgb8();
        if (img.width() as usize, img.height() as usize) != (self.width, self.height) {
            return Err(unreadable(&path, "frame size differs from frame 0"));
        }
        Ok(img.into_raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srv_round_trip_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.srv");
        let frames: Vec<Vec<u8>> = (0..3u8).map(|i| vec![i * 10; 2 * 2 * 3]).collect();
        write_srv(&path, 2, 2, 25.0, frames.iter().map(Vec::as_slice)).unwrap();
        let src = open_media(&path).unwrap();
        assert_eq!((src.width(), src.height(), src.frame_count()), (2, 2, 3));
        assert_eq!(src.fps(), 25.0);
        assert_eq!(src.read_rgb8(2).unwrap(), frames[2]);
        assert!(matches!(src.read_rgb8(3), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn png_directory_source() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..2u8 {
            let img = image::RgbImage::from_pixel(3, 2, image::Rgb([i, 2 * i, 3 * i]));
            img.save(PngDirSource::frame_path(dir.path(), i as u64)).unwrap();
        }
        let src = open_media(dir.path()).unwrap();
        assert_eq!(src.frame_count(), 2);
        assert_eq!(&src.read_rgb8(1).unwrap()[..3], &[1, 2, 3]);
    }

    #[test]
    fn garbage_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.srv");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(open_media(&path), Err(Error::MediaUnreadable { .. })));
    }
}
