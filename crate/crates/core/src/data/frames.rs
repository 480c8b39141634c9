use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One RGB frame, 8 bits per channel, row-major `H×W×3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(Error::Shape {
                op: "frame",
                lhs: vec![height, width, 3],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Channel `c` of pixel `(y, x)`.
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

/// Frames of a set of videos, addressed by video id and frame index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameStore {
    videos: Vec<(String, Vec<Frame>)>,
    index: HashMap<String, usize>,
}

pub(crate) fn frame_path(root: &Path, video_id: &str, idx: usize) -> PathBuf {
    root.join(video_id).join(format!("{idx:08}.png"))
}

impl FrameStore {
    pub fn from_videos(videos: Vec<(String, Vec<Frame>)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (id, frames)) in videos.iter().enumerate() {
            if frames.is_empty() {
                return Err(Error::Data(format!("video {id} has no frames")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate video id {id}")));
            }
        }
        Ok(Self { videos, index })
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.videos.iter().map(|(id, _)| id.as_str())
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn video_len(&self, video_id: &str) -> Result<usize> {
        self.frames(video_id).map(<[Frame]>::len)
    }

    pub fn frames(&self, video_id: &str) -> Result<&[Frame]> {
        self.index
            .get(video_id)
            .map(|&i| self.videos[i].1.as_slice())
            .ok_or_else(|| Error::Data(format!("unknown video {video_id}")))
    }

    pub fn frame(&self, video_id: &str, idx: usize) -> Result<&Frame> {
        let frames = self.frames(video_id)?;
        frames.get(idx).ok_or(Error::Bounds {
            index: idx,
            len: frames.len(),
        })
    }

    /// Writes `<root>/<video_id>/<frame_idx:08>.png` for every frame.
    pub fn write_dir(&self, root: &Path) -> Result<()> {
        for (id, frames) in &self.videos {
            let dir = root.join(id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, f) in frames.iter().enumerate() {
                let path = frame_path(root, id, i);
                image::save_buffer(
                    &path,
                    &f.pixels,
                    f.width as u32,
                    f.height as u32,
                    image::ExtendedColorType::Rgb8,
                )
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            }
        }
        Ok(())
    }

    /// Loads frames `0..len` of each `(video_id, len)` from a frame directory.
    pub fn load_dir(root: &Path, videos: &[(String, usize)]) -> Result<Self> {
        let mut out = Vec::with_capacity(videos.len());
        for (id, len) in videos {
            let mut frames = Vec::with_capacity(*len);
            for i in 0..*len {
                let path = frame_path(root, id, i);
                let img = image::open(&path)
                    .map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(&path, io),
                        other => Error::io(&path, std::io::Error::other(other)),
                    })?
                    .into_rgb8();
                let (w, h) = img.dimensions();
                frames.push(Frame::new(h as usize, w as usize, img.into_raw())?);
            }
            out.push((id.clone(), frames));
        }
        Self::from_videos(out)
    }
}
