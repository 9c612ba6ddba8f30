//! Clip directories: `frame_%06d.ppm` plus `meta.txt` with `fps=` and
//! `label=` lines.

use std::path::Path;

use super::clip::VideoClip;
use super::pnm::{read_pnm, write_ppm};
use crate::error::{Error, Result};

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:06}.ppm")
}

pub fn write_frames_dir(clip: &VideoClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..clip.len() {
        write_ppm(dir.join(frame_name(t)), &clip.frame(t))?;
    }
    let mut meta = format!("fps={}\n", clip.fps);
    if let Some(label) = clip.label {
        meta.push_str(&format!("label={label}\n"));
    }
    let path = dir.join("meta.txt");
    std::fs::write(&path, meta).map_err(|e| Error::io(path, e))
}

pub fn read_frames_dir(dir: impl AsRef<Path>) -> Result<VideoClip> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name
            .strip_prefix("frame_")
            .and_then(|n| n.strip_suffix(".ppm"))
        {
            let t: usize = num
                .parse()
                .map_err(|_| Error::format(entry.path(), "frame file name is not numbered"))?;
            indices.push(t);
        }
    }
    if indices.is_empty() {
        return Err(Error::format(dir, "no frame_*.ppm files"));
    }
    indices.sort_unstable();
    if let Some(gap) = indices.iter().enumerate().find(|&(i, &t)| i != t) {
        return Err(Error::format(
            dir.join(frame_name(gap.0)),
            "frame missing from sequence",
        ));
    }

    let meta_path = dir.join("meta.txt");
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let (mut fps, mut label) = (None, None);
    for line in meta.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let bad = || Error::format(&meta_path, format!("bad line {line:?}"));
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "fps" => fps = Some(v.trim().parse::<f32>().map_err(|_| bad())?),
            "label" => label = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let fps = fps.ok_or_else(|| Error::format(&meta_path, "missing fps"))?;

    let frames = indices
        .iter()
        .map(|&t| {
            let path = dir.join(frame_name(t));
            let f = read_pnm(&path)?;
            if f.shape()[0] != 3 {
                return Err(Error::format(path, "expected a colour (P6) frame"));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(t) = frames.iter().position(|f| f.shape() != frames[0].shape()) {
        return Err(Error::format(
            dir.join(frame_name(t)),
            "frame size differs from frame 0",
        ));
    }
    VideoClip::from_frames(&frames, fps, label)
}
