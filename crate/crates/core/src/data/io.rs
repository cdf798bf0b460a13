//! Plain-text box datasets on disk.
//!
//! Layout: `images/<stem>.png|jpg` with `labels/<stem>.txt` beside it, one
//! `class cx cy w h` line per box in normalized center format. A flat
//! directory holding both images and `.txt` files is accepted as well.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{BoundingBox, LabeledImage, Pixels};
use crate::error::{Error, IoContext, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Parses label text; `path` is only used for error messages.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Label {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: u32 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        let mut vals = [0.0f64; 4];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|_| err(format!("bad number {f:?}")))?;
        }
        let b = BoundingBox::new(class_id, vals[0], vals[1], vals[2], vals[3])
            .map_err(|e| err(e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn format_labels(boxes: &[BoundingBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!(
            "{} {:.8} {:.8} {:.8} {:.8}\n",
            b.class_id, b.cx, b.cy, b.w, b.h
        ));
    }
    s
}

/// Read access to a dataset where pixels and labels are fetched separately,
/// so that label reads can be audited or forbidden.
pub trait ImageSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image_id(&self, index: usize) -> &str;

    fn pixels(&self, index: usize) -> Result<Pixels>;

    fn labels(&self, index: usize) -> Result<Vec<BoundingBox>>;
}

/// Lazily reads a box dataset directory.
#[derive(Debug)]
pub struct DirSource {
    entries: Vec<(String, PathBuf, PathBuf)>,
    label_reads: AtomicUsize,
}

impl DirSource {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir.to_path_buf()));
        }
        let (image_dir, label_dir) = if dir.join("images").is_dir() {
            (dir.join("images"), dir.join("labels"))
        } else {
            (dir.to_path_buf(), dir.to_path_buf())
        };
        let mut entries = Vec::new();
        let listing = fs::read_dir(&image_dir).ctx(|| format!("listing {}", image_dir.display()))?;
        for entry in listing {
            let path = entry.ctx(|| format!("listing {}", image_dir.display()))?.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false);
            if !is_image {
                continue;
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let label = label_dir.join(format!("{stem}.txt"));
            entries.push((stem, path, label));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(DirSource {
            entries,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::SeqCst)
    }
}

impl ImageSource for DirSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn image_id(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    fn pixels(&self, index: usize) -> Result<Pixels> {
        let img = image::open(&self.entries[index].1)?;
        Pixels::from_dynamic(img)
    }

    fn labels(&self, index: usize) -> Result<Vec<BoundingBox>> {
        self.label_reads.fetch_add(1, Ordering::SeqCst);
        let path = &self.entries[index].2;
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        parse_labels(&text, path)
    }
}

/// In-memory dataset.
#[derive(Debug, Clone)]
pub struct MemorySource {
    images: Vec<LabeledImage>,
}

impl MemorySource {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        MemorySource { images }
    }
}

impl ImageSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image_id(&self, index: usize) -> &str {
        &self.images[index].source_id
    }

    fn pixels(&self, index: usize) -> Result<Pixels> {
        Ok(self.images[index].pixels.clone())
    }

    fn labels(&self, index: usize) -> Result<Vec<BoundingBox>> {
        Ok(self.images[index].boxes.clone())
    }
}

/// Wraps a source so that every label access fails with
/// [`Error::LabelLeak`] and is counted.
#[derive(Debug)]
pub struct GuardedSource<S> {
    inner: S,
    attempts: AtomicUsize,
}

impl<S: ImageSource> GuardedSource<S> {
    pub fn new(inner: S) -> Self {
        GuardedSource {
            inner,
            attempts: AtomicUsize::new(0),
        }
    }

    /// Number of label reads that were attempted (and refused).
    pub fn label_read_attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: ImageSource> ImageSource for GuardedSource<S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn image_id(&self, index: usize) -> &str {
        self.inner.image_id(index)
    }

    fn pixels(&self, index: usize) -> Result<Pixels> {
        self.inner.pixels(index)
    }

    fn labels(&self, index: usize) -> Result<Vec<BoundingBox>> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(Error::LabelLeak(self.inner.image_id(index).to_string()))
    }
}

/// Loads every image and its labels. Images without a label file get an
/// empty box list.
pub fn load_box_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let src = DirSource::open(dir)?;
    load_all(&src)
}

pub fn load_all(src: &dyn ImageSource) -> Result<Vec<LabeledImage>> {
    (0..src.len())
        .map(|i| {
            Ok(LabeledImage {
                pixels: src.pixels(i)?,
                boxes: src.labels(i)?,
                source_id: src.image_id(i).to_string(),
            })
        })
        .collect()
}

/// Writes `images/<id>.png` and `labels/<id>.txt` under `dir`.
pub fn write_box_dataset(dir: impl AsRef<Path>, images: &[LabeledImage]) -> Result<()> {
    let dir = dir.as_ref();
    let image_dir = dir.join("images");
    let label_dir = dir.join("labels");
    fs::create_dir_all(&image_dir).ctx(|| format!("creating {}", image_dir.display()))?;
    fs::create_dir_all(&label_dir).ctx(|| format!("creating {}", label_dir.display()))?;
    for img in images {
        let png = image_dir.join(format!("{}.png", img.source_id));
        img.pixels.to_dynamic().save(&png)?;
        let txt = label_dir.join(format!("{}.txt", img.source_id));
        fs::write(&txt, format_labels(&img.boxes)).ctx(|| format!("writing {}", txt.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_center_line() {
        let b = parse_labels("0 0.5 0.5 0.1 0.1\n", Path::new("x.txt")).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].cx, 0.5);
        assert_eq!(b[0].w, 0.1);
    }

    #[test]
    fn empty_file_has_no_boxes() {
        assert!(parse_labels("", Path::new("x.txt")).unwrap().is_empty());
        assert!(parse_labels("\n  \n", Path::new("x.txt")).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_center_names_line() {
        let err = parse_labels("0 0.5 0.5 0.1 0.1\n0 1.5 0.5 0.1 0.1\n", Path::new("a.txt"))
            .unwrap_err();
        match err {
            Error::Label { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_is_rejected() {
        assert!(parse_labels("0 0.5 0.5 0.1\n", Path::new("a.txt")).is_err());
        assert!(parse_labels("zero 0.5 0.5 0.1 0.1\n", Path::new("a.txt")).is_err());
    }

    #[test]
    fn missing_directory_is_fatal() {
        let err = load_box_dataset("/definitely/not/here").unwrap_err();
        assert!(matches!(err, Error::MissingDirectory(_)));
    }

    #[test]
    fn disk_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let px = Pixels::new(4, 3, 1, (0..12).collect()).unwrap();
        let boxes = vec![BoundingBox::crater(0.5, 0.5, 0.25, 0.5).unwrap()];
        let img = LabeledImage::new(px, boxes, "a").unwrap();
        let bare = LabeledImage::unlabeled(Pixels::filled(4, 3, 1, 7).unwrap(), "b");
        write_box_dataset(tmp.path(), &[img.clone(), bare]).unwrap();
        std::fs::remove_file(tmp.path().join("labels/b.txt")).unwrap();
        let loaded = load_box_dataset(tmp.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0], img);
        assert!(loaded[1].boxes.is_empty());
    }

    #[test]
    fn guarded_source_refuses_and_counts() {
        let img = LabeledImage::unlabeled(Pixels::filled(2, 2, 1, 0).unwrap(), "t0");
        let g = GuardedSource::new(MemorySource::new(vec![img]));
        assert!(g.pixels(0).is_ok());
        assert!(matches!(g.labels(0), Err(Error::LabelLeak(_))));
        assert_eq!(g.label_read_attempts(), 1);
    }
}
