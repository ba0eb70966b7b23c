//! Dataset layouts and indexing.
//!
//! Three on-disk layouts are understood:
//!
//! * **Traced** (EchoNet style): `FileList.csv` (`FileName,Split,...`),
//!   `VolumeTracings.csv` (`FileName,X1,Y1,X2,Y2,Frame`) and `Videos/`.
//! * **Sparse masks**: `FileList.csv`, `Videos/`, and `SparseLabels/<id>.lvt`
//!   mask stacks holding the two annotated frames. This is what the phantom
//!   exporter writes; `DenseLabels/<id>.lvt` may add full ground truth.
//! * **Dense**: `<id>.lvt` videos next to `<id>.masks.lvt` stacks with one
//!   mask per frame, and an optional `FileList.csv` for splits (default
//!   `TEST`).
//!
//! A video is either a `.lvt` container or a directory of PNG frames sorted
//! by file name. Single-channel sources are replicated to three channels.

mod dataset;
pub mod tracings;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, LoadedVideo, Normalization};
pub use tracings::{keypoints_to_mask, parse_tracings, Segment, TracingRecord};

use crate::error::{Error, Result};
use crate::parallel;
use crate::types::{BinaryMask, MaskStack, Phase, VideoTensor};

pub const VIDEO_EXT: &str = "lvt";
pub const FILE_LIST: &str = "FileList.csv";
pub const TRACINGS: &str = "VolumeTracings.csv";
pub const VIDEO_DIR: &str = "Videos";
pub const SPARSE_DIR: &str = "SparseLabels";
pub const DENSE_DIR: &str = "DenseLabels";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "TRAIN")]
    Train,
    #[serde(rename = "VAL")]
    Val,
    #[serde(rename = "TEST")]
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FileListEntry {
    pub video_id: String,
    pub split: Split,
}

/// Parse a file list with at least `FileName` and `Split` columns.
pub fn parse_file_list<R: Read>(reader: R) -> Result<Vec<FileListEntry>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (name_col, split_col) = (find("FileName")?, find("Split")?);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::MalformedRow {
            row: line,
            reason: e.to_string(),
        })?;
        let split = row
            .get(split_col)
            .unwrap_or("")
            .parse::<Split>()
            .map_err(|e| Error::MalformedRow {
                row: line,
                reason: e.to_string(),
            })?;
        let video_id = tracings::video_stem(row.get(name_col).unwrap_or("")).to_string();
        if video_id.is_empty() {
            return Err(Error::MalformedRow {
                row: line,
                reason: "empty FileName".into(),
            });
        }
        out.push(FileListEntry { video_id, split });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub frame: usize,
    pub phase: Phase,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub video_id: String,
    pub path: PathBuf,
    pub split: Split,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub annotated: Vec<AnnotatedFrame>,
    /// Full per-frame ground truth, when the layout provides it.
    pub dense_path: Option<PathBuf>,
}

impl IndexEntry {
    pub fn annotation_map(&self) -> BTreeMap<usize, BinaryMask> {
        self.annotated
            .iter()
            .map(|a| (a.frame, a.mask.clone()))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> Vec<&IndexEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Annotation source for [`build_index`].
pub enum Annotations<'a> {
    /// Keypoint tracings, rasterised against each video's frame size.
    Tracings {
        records: &'a BTreeMap<String, Vec<TracingRecord>>,
        include_long_axis: bool,
    },
    /// Masks already attached per video: `video_id -> (frame -> mask)`.
    Masks(&'a BTreeMap<String, BTreeMap<usize, BinaryMask>>),
}

/// Resolve `<root>/<id>.lvt`, falling back to a PNG frame directory
/// `<root>/<id>/`.
pub fn resolve_video(root: &Path, video_id: &str) -> Option<PathBuf> {
    let file = root.join(format!("{video_id}.{VIDEO_EXT}"));
    if file.is_file() {
        return Some(file);
    }
    let dir = root.join(video_id);
    dir.is_dir().then_some(dir)
}

/// Load a video from a container file or a directory of PNG frames.
pub fn load_video(path: &Path) -> Result<VideoTensor> {
    if path.is_dir() {
        return load_png_frames(path);
    }
    VideoTensor::load(path)
}

fn load_png_frames(dir: &Path) -> Result<VideoTensor> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!("{}: no PNG frames", dir.display())));
    }
    let mut dims = None;
    let mut pixels = Vec::new();
    for f in &files {
        let img = image::open(f).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if *dims.get_or_insert((h, w)) != (h, w) {
            return Err(Error::Format(format!("{}: frame size changes mid-video", f.display())));
        }
        if img.color().channel_count() == 1 {
            let g = img.to_luma8();
            let plane: Vec<f32> = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            for _ in 0..3 {
                pixels.extend_from_slice(&plane);
            }
        } else {
            let rgb = img.to_rgb8();
            let raw = rgb.as_raw();
            for c in 0..3 {
                pixels.extend(raw.iter().skip(c).step_by(3).map(|&v| v as f32 / 255.0));
            }
        }
    }
    let (h, w) = dims.unwrap();
    VideoTensor::new(h, w, pixels, (0..files.len()).map(crate::types::Slot::Frame).collect())
}

/// Phase labels for sparse two-frame annotations: the larger mask is ED,
/// the smaller ES (ties: earlier frame is ED).
fn sparse_phases(frames: &BTreeMap<usize, BinaryMask>) -> Vec<AnnotatedFrame> {
    let mut v: Vec<(usize, &BinaryMask)> = frames.iter().map(|(&f, m)| (f, m)).collect();
    v.sort_by_key(|(f, m)| (std::cmp::Reverse(m.area()), *f));
    v.into_iter()
        .enumerate()
        .map(|(i, (frame, mask))| AnnotatedFrame {
            frame,
            phase: if i == 0 { Phase::Ed } else { Phase::Es },
            mask: mask.clone(),
        })
        .collect()
}

/// Phase labels for a dense stack: area maximum ED, minimum ES, frame
/// `L/2` middle, all others `other`.
pub fn dense_phases(masks: &[BinaryMask]) -> Vec<Phase> {
    let n = masks.len();
    let mut phases = vec![Phase::Other; n];
    if n == 0 {
        return phases;
    }
    let areas: Vec<usize> = masks.iter().map(|m| m.area()).collect();
    let ed = (0..n).max_by_key(|&i| (areas[i], std::cmp::Reverse(i))).unwrap();
    let es = (0..n)
        .filter(|&i| i != ed)
        .min_by_key(|&i| (areas[i], i))
        .unwrap_or(ed);
    let mid = n / 2;
    if mid != ed && mid != es {
        phases[mid] = Phase::Middle;
    }
    phases[es] = Phase::Es;
    phases[ed] = Phase::Ed;
    phases
}

/// Build an index from a file list, annotations and a video directory.
/// Every listed video must exist and carry exactly two annotated frames.
pub fn build_index(
    file_list: &[FileListEntry],
    annotations: &Annotations<'_>,
    video_root: &Path,
) -> Result<DatasetIndex> {
    let mut seen = BTreeSet::new();
    for e in file_list {
        if !seen.insert(e.video_id.as_str()) {
            return Err(Error::invalid(format!("video `{}` listed twice", e.video_id)));
        }
    }
    let results = parallel::map_slice(file_list, |e| index_one(e, annotations, video_root));
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(DatasetIndex { entries })
}

fn index_one(e: &FileListEntry, annotations: &Annotations<'_>, video_root: &Path) -> Result<IndexEntry> {
    let path = resolve_video(video_root, &e.video_id).ok_or_else(|| Error::MissingVideo(e.video_id.clone()))?;
    let video = load_video(&path)?;
    let (h, w) = (video.height(), video.width());
    let frames: BTreeMap<usize, BinaryMask> = match annotations {
        Annotations::Tracings {
            records,
            include_long_axis,
        } => {
            let recs = records.get(&e.video_id).map(Vec::as_slice).unwrap_or(&[]);
            check_count(&e.video_id, recs.len())?;
            recs.iter()
                .map(|r| Ok((r.frame_index, keypoints_to_mask(r, h, w, *include_long_axis)?)))
                .collect::<Result<_>>()?
        }
        Annotations::Masks(map) => {
            let m = map.get(&e.video_id).cloned().unwrap_or_default();
            check_count(&e.video_id, m.len())?;
            m
        }
    };
    for (&f, m) in &frames {
        if f >= video.frames() {
            return Err(Error::invalid(format!(
                "video `{}`: annotated frame {f} beyond {} frames",
                e.video_id,
                video.frames()
            )));
        }
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                dim: "annotation mask",
                expected: h * w,
                actual: m.height() * m.width(),
            });
        }
    }
    Ok(IndexEntry {
        video_id: e.video_id.clone(),
        path,
        split: e.split,
        frames: video.frames(),
        height: h,
        width: w,
        annotated: sparse_phases(&frames),
        dense_path: None,
    })
}

fn check_count(video: &str, count: usize) -> Result<()> {
    if count != 2 {
        return Err(Error::AnnotationCount {
            video: video.to_string(),
            count,
            expected: 2,
        });
    }
    Ok(())
}

fn read_file_list(path: &Path) -> Result<Vec<FileListEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_file_list(f)
}

/// Open a traced or sparse-mask dataset root (see module docs).
pub fn open_sparse_dataset(root: &Path, include_long_axis: bool) -> Result<DatasetIndex> {
    let file_list = read_file_list(&root.join(FILE_LIST))?;
    let video_root = root.join(VIDEO_DIR);
    let tracing_path = root.join(TRACINGS);
    let mut index = if tracing_path.is_file() {
        let f = fs::File::open(&tracing_path).map_err(|e| Error::io(&tracing_path, e))?;
        let records = parse_tracings(f)?;
        build_index(
            &file_list,
            &Annotations::Tracings {
                records: &records,
                include_long_axis,
            },
            &video_root,
        )?
    } else {
        let sparse_root = root.join(SPARSE_DIR);
        let mut masks = BTreeMap::new();
        for e in &file_list {
            let p = sparse_root.join(format!("{}.{VIDEO_EXT}", e.video_id));
            let stack = if p.is_file() {
                MaskStack::load(&p)?
            } else {
                MaskStack {
                    frame_indices: vec![],
                    masks: vec![],
                }
            };
            masks.insert(
                e.video_id.clone(),
                stack.frame_indices.into_iter().zip(stack.masks).collect(),
            );
        }
        build_index(&file_list, &Annotations::Masks(&masks), &video_root)?
    };
    let dense_root = root.join(DENSE_DIR);
    for e in &mut index.entries {
        let p = dense_root.join(format!("{}.{VIDEO_EXT}", e.video_id));
        if p.is_file() {
            e.dense_path = Some(p);
        }
    }
    Ok(index)
}

/// Open a dense-label directory: every frame of every video annotated.
pub fn load_dense_dataset(dir: &Path) -> Result<DatasetIndex> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let stem = name.strip_suffix(&format!(".{VIDEO_EXT}"))?;
            (!stem.ends_with(".masks")).then(|| stem.to_string())
        })
        .collect();
    ids.sort();
    let list_path = dir.join(FILE_LIST);
    let splits: BTreeMap<String, Split> = if list_path.is_file() {
        read_file_list(&list_path)?
            .into_iter()
            .map(|e| (e.video_id, e.split))
            .collect()
    } else {
        BTreeMap::new()
    };
    let results = parallel::map_slice(&ids, |id| -> Result<IndexEntry> {
        let path = dir.join(format!("{id}.{VIDEO_EXT}"));
        let video = VideoTensor::load(&path)?;
        let mask_path = dir.join(format!("{id}.masks.{VIDEO_EXT}"));
        let stack = MaskStack::load(&mask_path)?;
        if stack.masks.len() != video.frames() {
            return Err(Error::FrameCountMismatch {
                video: id.clone(),
                frames: video.frames(),
                masks: stack.masks.len(),
            });
        }
        let phases = dense_phases(&stack.masks);
        let annotated = stack
            .frame_indices
            .iter()
            .zip(stack.masks)
            .zip(phases)
            .map(|((&frame, mask), phase)| AnnotatedFrame { frame, phase, mask })
            .collect();
        Ok(IndexEntry {
            video_id: id.clone(),
            path: path.clone(),
            split: splits.get(id).copied().unwrap_or(Split::Test),
            frames: video.frames(),
            height: video.height(),
            width: video.width(),
            annotated,
            dense_path: Some(mask_path),
        })
    });
    Ok(DatasetIndex {
        entries: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Detect the layout of `root` and index it.
pub fn open_dataset(root: &Path) -> Result<DatasetIndex> {
    if root.join(FILE_LIST).is_file() && root.join(VIDEO_DIR).is_dir() {
        open_sparse_dataset(root, false)
    } else if root.is_dir() {
        load_dense_dataset(root)
    } else {
        Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RandomSource;

    fn write_video(dir: &Path, id: &str, frames: usize) {
        let mut v = VideoTensor::zeros(16, 16, frames);
        let mut rng = RandomSource::new(frames as u64);
        v.pixels_mut().iter_mut().for_each(|p| *p = rng.uniform() as f32);
        v.save(&dir.join(format!("{id}.{VIDEO_EXT}"))).unwrap();
    }

    fn square(h: usize, lo: usize, hi: usize) -> BinaryMask {
        BinaryMask::from_fn(h, h, |y, x| (lo..hi).contains(&y) && (lo..hi).contains(&x))
    }

    #[test]
    fn split_parsing() {
        assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
        assert!("bogus".parse::<Split>().is_err());
        let t = "FileName,Split\na,TRAIN\nb,HOLDOUT\n";
        assert!(matches!(parse_file_list(t.as_bytes()), Err(Error::MalformedRow { row: 3, .. })));
    }

    #[test]
    fn index_three_complete_videos() {
        let dir = tempfile::tempdir().unwrap();
        let mut masks = BTreeMap::new();
        let mut list = vec![];
        for (i, id) in ["a", "b", "c"].iter().enumerate() {
            write_video(dir.path(), id, 10 + i);
            let mut m = BTreeMap::new();
            m.insert(1, square(16, 2, 12));
            m.insert(6, square(16, 4, 10));
            masks.insert(id.to_string(), m);
            list.push(FileListEntry {
                video_id: id.to_string(),
                split: Split::Train,
            });
        }
        let idx = build_index(&list, &Annotations::Masks(&masks), dir.path()).unwrap();
        assert_eq!(idx.len(), 3);
        let a = &idx.entries[0];
        assert_eq!(a.annotated[0].phase, Phase::Ed);
        assert_eq!(a.annotated[0].frame, 1);
        assert_eq!(a.annotated[1].phase, Phase::Es);
    }

    #[test]
    fn one_annotated_frame_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_video(dir.path(), "v1", 8);
        let mut masks = BTreeMap::new();
        masks.insert("v1".to_string(), BTreeMap::from([(2, square(16, 2, 8))]));
        let list = vec![FileListEntry {
            video_id: "v1".into(),
            split: Split::Val,
        }];
        match build_index(&list, &Annotations::Masks(&masks), dir.path()) {
            Err(Error::AnnotationCount { video, count, .. }) => assert_eq!((video.as_str(), count), ("v1", 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_video_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let list = vec![FileListEntry {
            video_id: "ghost".into(),
            split: Split::Test,
        }];
        let masks = BTreeMap::new();
        assert!(matches!(
            build_index(&list, &Annotations::Masks(&masks), dir.path()),
            Err(Error::MissingVideo(v)) if v == "ghost"
        ));
    }

    #[test]
    fn traced_layout_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let videos = dir.path().join(VIDEO_DIR);
        fs::create_dir(&videos).unwrap();
        write_video(&videos, "vid", 12);
        fs::write(dir.path().join(FILE_LIST), "FileName,EF,Split\nvid.avi,55.0,train\n").unwrap();
        let mut t = String::from("FileName,X1,Y1,X2,Y2,Frame\n");
        for (frame, half) in [(3, 6.0), (9, 3.0)] {
            t += &format!("vid.avi,8,1,8,14,{frame}\n");
            for y in [3.0, 7.0, 11.0] {
                t += &format!("vid.avi,{},{y},{},{y},{frame}\n", 8.0 - half, 8.0 + half);
            }
        }
        fs::write(dir.path().join(TRACINGS), t).unwrap();
        let idx = open_dataset(dir.path()).unwrap();
        let e = &idx.entries[0];
        assert_eq!(e.split, Split::Train);
        assert_eq!(e.annotated[0].frame, 3);
        assert_eq!(e.annotated[0].phase, Phase::Ed);
        assert_eq!(e.annotated[0].mask.area(), 13 * 9);
    }

    #[test]
    fn dense_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_video(dir.path(), "d", 20);
        let masks: Vec<BinaryMask> = (0..20).map(|i| square(16, 1, 4 + (i % 10))).collect();
        MaskStack {
            frame_indices: (0..20).collect(),
            masks,
        }
        .save(&dir.path().join("d.masks.lvt"))
        .unwrap();
        let idx = load_dense_dataset(dir.path()).unwrap();
        assert_eq!(idx.entries[0].annotated.len(), 20);
        assert_eq!(idx.entries[0].split, Split::Test);
        let phases: Vec<Phase> = idx.entries[0].annotated.iter().map(|a| a.phase).collect();
        assert_eq!(phases[9], Phase::Ed);
        assert_eq!(phases[0], Phase::Es);
        assert_eq!(phases[10], Phase::Middle);

        write_video(dir.path(), "e", 20);
        MaskStack {
            frame_indices: (0..19).collect(),
            masks: vec![BinaryMask::empty(16, 16); 19],
        }
        .save(&dir.path().join("e.masks.lvt"))
        .unwrap();
        assert!(matches!(
            load_dense_dataset(dir.path()),
            Err(Error::FrameCountMismatch { frames: 20, masks: 19, .. })
        ));
    }

    #[test]
    fn empty_dense_dir() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dense_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn png_frames_grayscale_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let vdir = dir.path().join("clip");
        fs::create_dir(&vdir).unwrap();
        for i in 0..3u8 {
            let img = image::GrayImage::from_pixel(5, 4, image::Luma([i * 100]));
            img.save(vdir.join(format!("{i:04}.png"))).unwrap();
        }
        let v = load_video(&vdir).unwrap();
        assert_eq!((v.frames(), v.height(), v.width()), (3, 4, 5));
        assert_eq!(v.at(2, 1, 0, 0), 200.0 / 255.0);
        assert_eq!(v.at(2, 2, 3, 4), v.at(2, 0, 3, 4));
    }
}
