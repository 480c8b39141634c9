use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth phase of one frame.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhaseAnnotation {
    pub video_id: String,
    pub frame_idx: usize,
    pub phase_id: usize,
}

/// Parses `video_id,frame_idx,phase_id` CSV (with header), validates phase
/// range and per-video contiguity from frame 0, and sorts by
/// `(video_id, frame_idx)`. Row numbers in errors count the header as row 1.
pub fn parse_annotations<R: Read>(reader: R, num_classes: usize) -> Result<Vec<PhaseAnnotation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format {
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["video_id", "frame_idx", "phase_id"] {
        return Err(Error::Format {
            row: 1,
            msg: format!("expected header video_id,frame_idx,phase_id, got {headers:?}"),
        });
    }
    let mut rows: Vec<(usize, PhaseAnnotation)> = Vec::new();
    for (i, rec) in rdr.deserialize::<PhaseAnnotation>().enumerate() {
        let row = i + 2;
        let a = rec.map_err(|e| Error::Format {
            row,
            msg: e.to_string(),
        })?;
        if a.phase_id >= num_classes {
            return Err(Error::Format {
                row,
                msg: format!("phase_id {} outside [0, {num_classes})", a.phase_id),
            });
        }
        rows.push((row, a));
    }
    rows.sort_by(|a, b| {
        a.1.video_id
            .cmp(&b.1.video_id)
            .then(a.1.frame_idx.cmp(&b.1.frame_idx))
    });

    let mut expected: Option<(&str, usize)> = None;
    for (row, a) in &rows {
        let want = match expected {
            Some((vid, next)) if vid == a.video_id => next,
            _ => 0,
        };
        if a.frame_idx != want {
            let what = if a.frame_idx < want {
                "duplicate"
            } else {
                "gap before"
            };
            return Err(Error::Format {
                row: *row,
                msg: format!("{what} frame {} of video {}", a.frame_idx, a.video_id),
            });
        }
        expected = Some((&a.video_id, want + 1));
    }
    Ok(rows.into_iter().map(|(_, a)| a).collect())
}

pub fn load_annotations(path: &Path, num_classes: usize) -> Result<Vec<PhaseAnnotation>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(f, num_classes)
}

pub fn write_annotations(path: &Path, anns: &[PhaseAnnotation]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::from("video_id,frame_idx,phase_id\n");
    for a in anns {
        buf.push_str(&format!("{},{},{}\n", a.video_id, a.frame_idx, a.phase_id));
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-video label sequences, ordered by video id.
pub fn labels_by_video(anns: &[PhaseAnnotation]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for a in anns {
        out.entry(a.video_id.clone()).or_default().push(a.phase_id);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<PhaseAnnotation>> {
        parse_annotations(s.as_bytes(), 4)
    }

    #[test]
    fn direct_parse() {
        let a = parse("video_id,frame_idx,phase_id\nv1,0,2\n").unwrap();
        assert_eq!(
            a,
            vec![PhaseAnnotation {
                video_id: "v1".into(),
                frame_idx: 0,
                phase_id: 2
            }]
        );
    }

    #[test]
    fn sorts_and_validates() {
        let a = parse("video_id,frame_idx,phase_id\nv2,0,1\nv1,1,0\nv1,0,0\n").unwrap();
        let keys: Vec<(&str, usize)> = a
            .iter()
            .map(|x| (x.video_id.as_str(), x.frame_idx))
            .collect();
        assert_eq!(keys, vec![("v1", 0), ("v1", 1), ("v2", 0)]);
    }

    #[test]
    fn rejects_out_of_range_with_row() {
        let err = parse("video_id,frame_idx,phase_id\nv1,0,0\nv1,1,4\n").unwrap_err();
        assert!(matches!(err, Error::Format { row: 3, .. }), "{err}");
    }

    #[test]
    fn rejects_gap_and_duplicate() {
        let gap = parse("video_id,frame_idx,phase_id\nv1,0,0\nv1,2,0\n").unwrap_err();
        assert!(matches!(gap, Error::Format { row: 3, .. }), "{gap}");
        let dup = parse("video_id,frame_idx,phase_id\nv1,0,0\nv1,0,1\n").unwrap_err();
        assert!(matches!(dup, Error::Format { .. }), "{dup}");
    }

    #[test]
    fn empty_after_header() {
        assert!(parse("video_id,frame_idx,phase_id\n").unwrap().is_empty());
    }

    #[test]
    fn write_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let src = "video_id,frame_idx,phase_id\nb,0,1\na,0,3\na,1,2\n";
        let anns = parse(src).unwrap();
        let p = dir.path().join("ann.csv");
        write_annotations(&p, &anns).unwrap();
        let first = std::fs::read(&p).unwrap();
        let again = load_annotations(&p, 4).unwrap();
        write_annotations(&p, &again).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        assert_eq!(
            String::from_utf8(first).unwrap(),
            "video_id,frame_idx,phase_id\na,0,3\na,1,2\nb,0,1\n"
        );
    }
}
