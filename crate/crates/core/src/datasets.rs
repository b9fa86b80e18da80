//! LaSOT-style sequence directories and tracker result files.
//!
//! ```text
//! <seq>/img/00000001.jpg ...   frames, numeric names
//! <seq>/groundtruth.txt        x,y,w,h per line (pixels, top-left)
//! <seq>/nlp.txt                one-line caption (optional)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{GladError, Result};
use crate::geometry::{BoundingBox, Unit};
use crate::imaging::{load_image, save_image, Image};

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub name: String,
    pub frame_paths: Vec<PathBuf>,
    /// In-memory frames (synthetic sequences); when present they take precedence.
    pub frames: Option<Vec<Image>>,
    /// Pixel XYWH boxes; the first is required, later ones may be absent.
    pub gt_boxes: Vec<BoundingBox>,
    pub text: String,
    pub attributes: Vec<String>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        match &self.frames {
            Some(f) => f.len(),
            None => self.frame_paths.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, index: usize) -> Result<Image> {
        if let Some(frames) = &self.frames {
            return frames
                .get(index)
                .cloned()
                .ok_or_else(|| GladError::Index(format!("frame {index} of {}", frames.len())));
        }
        let path = self.frame_paths.get(index).ok_or_else(|| {
            GladError::Index(format!("frame {index} of {}", self.frame_paths.len()))
        })?;
        load_image(path)
    }

    pub fn first_box(&self) -> Result<BoundingBox> {
        self.gt_boxes
            .first()
            .copied()
            .ok_or_else(|| GladError::Input(format!("sequence {} has no initial box", self.name)))
    }

    /// Writes the sequence in the on-disk layout, frames as PNG.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("img");
        fs::create_dir_all(&img_dir).map_err(|e| GladError::io(&img_dir, e))?;
        for i in 0..self.len() {
            save_image(&self.frame(i)?, &img_dir.join(format!("{:08}.png", i + 1)))?;
        }
        write_results(&self.gt_boxes, &dir.join("groundtruth.txt"))?;
        let nlp = dir.join("nlp.txt");
        fs::write(&nlp, format!("{}\n", self.text)).map_err(|e| GladError::io(&nlp, e))?;
        Ok(())
    }
}

fn numeric_key(path: &Path) -> (u64, String) {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
    (digits.parse().unwrap_or(u64::MAX), stem.to_string())
}

/// Parses `x,y,w,h` lines (comma, tab or space separated). Blank lines are skipped.
pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| GladError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line
            .split([',', '\t', ' '])
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 values x,y,w,h, found {}",
                fields.len()
            )));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|_| parse_err(format!("`{f}` is not a number")))?;
        }
        let b = BoundingBox::try_new(v, crate::geometry::BoxFormat::XywhTopLeft, Unit::Pixel)
            .map_err(|e| parse_err(e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let img_dir = dir.join("img");
    let entries = fs::read_dir(&img_dir).map_err(|e| GladError::io(&img_dir, e))?;
    let mut frame_paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| GladError::io(&img_dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        if IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            frame_paths.push(path);
        }
    }
    frame_paths.sort_by_key(|p| numeric_key(p));
    if frame_paths.is_empty() {
        return Err(GladError::Input(format!(
            "{}: no frames",
            img_dir.display()
        )));
    }
    let gt_path = dir.join("groundtruth.txt");
    let gt_text = fs::read_to_string(&gt_path).map_err(|e| GladError::io(&gt_path, e))?;
    let gt_boxes = parse_boxes(&gt_text, &gt_path)?;
    if gt_boxes.is_empty() {
        return Err(GladError::Parse {
            path: gt_path,
            line: 1,
            msg: "the first frame's box is required".into(),
        });
    }
    if gt_boxes.len() > frame_paths.len() {
        return Err(GladError::Input(format!(
            "{}: {} boxes for {} frames",
            dir.display(),
            gt_boxes.len(),
            frame_paths.len()
        )));
    }
    let text = fs::read_to_string(dir.join("nlp.txt"))
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let attributes = fs::read_to_string(dir.join("attributes.txt"))
        .map(|s| {
            s.split([',', '\n'])
                .map(|a| a.trim().to_string())
                .filter(|a| !a.is_empty())
                .collect()
        })
        .unwrap_or_default();
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("sequence")
        .to_string();
    Ok(SequenceRecord {
        name,
        frame_paths,
        frames: None,
        gt_boxes,
        text,
        attributes,
    })
}

/// Every sequence directory (one containing `groundtruth.txt`) below `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<SequenceRecord>> {
    let entries = fs::read_dir(root).map_err(|e| GladError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(GladError::Input(format!(
            "{}: no sequences found",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// One `x,y,w,h` line per box, rounded to integers.
pub fn write_results(boxes: &[BoundingBox], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| GladError::io(parent, e))?;
        }
    }
    let mut out = String::with_capacity(boxes.len() * 16);
    for b in boxes {
        let [x, y, w, h] = b.as_xywh();
        out.push_str(&format!(
            "{},{},{},{}\n",
            x.round() as i64,
            y.round() as i64,
            w.round() as i64,
            h.round() as i64
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| GladError::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| GladError::io(path, e))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path).map_err(|e| GladError::io(path, e))?;
    parse_boxes(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_contract() {
        let p = Path::new("gt.txt");
        let b = parse_boxes("10,20,30,40\n", p).unwrap();
        assert_eq!(b[0].as_xywh(), [10.0, 20.0, 30.0, 40.0]);
        match parse_boxes("1,2,3,4\n10,20,30\n", p) {
            Err(GladError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn numeric_sort() {
        let mut v = [PathBuf::from("10.jpg"),
            PathBuf::from("9.jpg"),
            PathBuf::from("100.jpg")];
        v.sort_by_key(|p| numeric_key(p));
        assert_eq!(v[0], PathBuf::from("9.jpg"));
        assert_eq!(v[2], PathBuf::from("100.jpg"));
    }
}
