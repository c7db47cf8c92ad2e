use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation of one cell in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub frame: u32,
    pub cell_id: u32,
    pub x: f64,
    pub y: f64,
    pub area: f64,
    pub eccentricity: f64,
    pub brightness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mitosis: Option<u8>,
}

/// Image (or channel) extent in pixels; sector boundaries sit at its midlines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageBounds {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses from the extension; anything but `.jsonl`/`.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

pub const CSV_HEADER: &str = "frame,cell_id,x,y,area,eccentricity,brightness";

/// A trajectory that stopped early because of a missing frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gap {
    pub cell_id: u32,
    /// Last frame kept.
    pub last_frame: u32,
    /// First frame seen after the gap (dropped from the trajectory).
    pub resumed_at: u32,
}

/// Records indexed by cell and by frame.
///
/// `by_frame` holds every record and serves as environmental context;
/// `by_cell` holds per-cell trajectories, cut at the first missing frame.
#[derive(Debug, Clone)]
pub struct TrajectorySet {
    records: Vec<TrajectoryRecord>,
    pub bounds: ImageBounds,
    by_cell: BTreeMap<u32, Vec<usize>>,
    by_frame: BTreeMap<u32, Vec<usize>>,
    index: BTreeMap<(u32, u32), usize>,
    pub gaps: Vec<Gap>,
}

impl TrajectorySet {
    pub fn new(records: Vec<TrajectoryRecord>, bounds: Option<ImageBounds>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert((r.frame, r.cell_id), i).is_some() {
                return Err(Error::DuplicateKey {
                    frame: r.frame,
                    cell_id: r.cell_id,
                });
            }
        }
        let bounds = bounds.unwrap_or_else(|| infer_bounds(&records));

        let mut by_frame: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut all_by_cell: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (&(frame, cell), &i) in &index {
            by_frame.entry(frame).or_default().push(i);
            all_by_cell.entry(cell).or_default().push(i);
        }
        for ids in by_frame.values_mut() {
            ids.sort_by_key(|&i| records[i].cell_id);
        }

        let mut gaps = Vec::new();
        let mut by_cell = BTreeMap::new();
        for (cell, mut ids) in all_by_cell {
            ids.sort_by_key(|&i| records[i].frame);
            if let Some(k) = ids
                .windows(2)
                .position(|w| records[w[1]].frame != records[w[0]].frame + 1)
            {
                gaps.push(Gap {
                    cell_id: cell,
                    last_frame: records[ids[k]].frame,
                    resumed_at: records[ids[k + 1]].frame,
                });
                ids.truncate(k + 1);
            }
            by_cell.insert(cell, ids);
        }

        Ok(Self {
            records,
            bounds,
            by_cell,
            by_frame,
            index,
            gaps,
        })
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn cell_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_cell.keys().copied()
    }

    pub fn frames(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_frame.keys().copied()
    }

    /// Records of one cell in frame order, up to its first gap.
    pub fn trajectory(&self, cell_id: u32) -> Vec<&TrajectoryRecord> {
        self.by_cell
            .get(&cell_id)
            .map(|ids| ids.iter().map(|&i| &self.records[i]).collect())
            .unwrap_or_default()
    }

    pub fn trajectory_len(&self, cell_id: u32) -> usize {
        self.by_cell.get(&cell_id).map_or(0, Vec::len)
    }

    /// All records of one frame, ordered by cell id.
    pub fn frame(&self, frame: u32) -> Vec<&TrajectoryRecord> {
        self.by_frame
            .get(&frame)
            .map(|ids| ids.iter().map(|&i| &self.records[i]).collect())
            .unwrap_or_default()
    }

    pub fn get(&self, frame: u32, cell_id: u32) -> Option<&TrajectoryRecord> {
        self.index.get(&(frame, cell_id)).map(|&i| &self.records[i])
    }

    /// Displacement since the previous frame; `None` when the cell was not
    /// observed in the previous frame.
    pub fn velocity(&self, frame: u32, cell_id: u32) -> Option<(f64, f64)> {
        let prev = self.get(frame.checked_sub(1)?, cell_id)?;
        let cur = self.get(frame, cell_id)?;
        Some((cur.x - prev.x, cur.y - prev.y))
    }
}

fn infer_bounds(records: &[TrajectoryRecord]) -> ImageBounds {
    let width = records.iter().map(|r| r.x).fold(0.0, f64::max).ceil().max(1.0);
    let height = records.iter().map(|r| r.y).fold(0.0, f64::max).ceil().max(1.0);
    ImageBounds { width, height }
}

/// Reads a trajectory file. An optional leading `# width=W height=H` line
/// declares the image bounds; otherwise they are inferred from the data.
pub fn load_trajectories(path: &Path, format: Format) -> Result<TrajectorySet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (records, bounds) = match format {
        Format::Csv => parse_csv(&text, &path.display().to_string())?,
        Format::Jsonl => parse_jsonl(&text, &path.display().to_string())?,
    };
    TrajectorySet::new(records, bounds)
}

fn parse_meta(line: &str) -> Option<ImageBounds> {
    let mut width = None;
    let mut height = None;
    for tok in line.trim_start_matches('#').split_whitespace() {
        if let Some((k, v)) = tok.split_once('=') {
            match k {
                "width" => width = v.parse().ok(),
                "height" => height = v.parse().ok(),
                _ => {}
            }
        }
    }
    Some(ImageBounds {
        width: width?,
        height: height?,
    })
}

pub fn parse_csv(text: &str, source: &str) -> Result<(Vec<TrajectoryRecord>, Option<ImageBounds>)> {
    let perr = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut bounds = None;
    let mut lines = text.lines().enumerate().peekable();
    while let Some((_, l)) = lines.peek() {
        if let Some(meta) = l.strip_prefix('#') {
            bounds = bounds.or_else(|| parse_meta(meta));
            lines.next();
        } else {
            break;
        }
    }
    let Some((hline, header)) = lines.next() else {
        return Err(perr(1, "missing header".into()));
    };
    let with_label = match header.trim() {
        h if h == CSV_HEADER => false,
        h if h == format!("{CSV_HEADER},mitosis") => true,
        h => {
            return Err(perr(
                hline + 1,
                format!("unexpected header {h:?}, expected {CSV_HEADER:?}[,mitosis]"),
            ))
        }
    };
    let width = if with_label { 8 } else { 7 };

    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(perr(i + 1, format!("expected {width} fields, found {}", fields.len())));
        }
        let int = |k: usize| {
            fields[k]
                .trim()
                .parse::<u32>()
                .map_err(|e| perr(i + 1, format!("field {k}: {e}")))
        };
        let real = |k: usize| {
            fields[k]
                .trim()
                .parse::<f64>()
                .map_err(|e| perr(i + 1, format!("field {k}: {e}")))
        };
        let mitosis = if with_label {
            match fields[7].trim() {
                "" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => return Err(perr(i + 1, format!("mitosis label must be 0 or 1, got {other:?}"))),
            }
        } else {
            None
        };
        records.push(TrajectoryRecord {
            frame: int(0)?,
            cell_id: int(1)?,
            x: real(2)?,
            y: real(3)?,
            area: real(4)?,
            eccentricity: real(5)?,
            brightness: real(6)?,
            mitosis,
        });
    }
    Ok((records, bounds))
}

fn parse_jsonl(text: &str, source: &str) -> Result<(Vec<TrajectoryRecord>, Option<ImageBounds>)> {
    let mut bounds = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            bounds = bounds.or_else(|| parse_meta(meta));
            continue;
        }
        let r: TrajectoryRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    Ok((records, bounds))
}

/// Serializes records; floats use the shortest representation that parses
/// back to the same value.
pub fn to_csv(records: &[TrajectoryRecord], bounds: Option<ImageBounds>) -> String {
    let with_label = records.iter().any(|r| r.mitosis.is_some());
    let mut out = String::new();
    if let Some(b) = bounds {
        let _ = writeln!(out, "# width={} height={}", b.width, b.height);
    }
    out.push_str(CSV_HEADER);
    if with_label {
        out.push_str(",mitosis");
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.frame, r.cell_id, r.x, r.y, r.area, r.eccentricity, r.brightness
        );
        if with_label {
            match r.mitosis {
                Some(m) => {
                    let _ = write!(out, ",{m}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn to_jsonl(records: &[TrajectoryRecord], bounds: Option<ImageBounds>) -> String {
    let mut out = String::new();
    if let Some(b) = bounds {
        let _ = writeln!(out, "# width={} height={}", b.width, b.height);
    }
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_trajectories(
    path: &Path,
    records: &[TrajectoryRecord],
    bounds: Option<ImageBounds>,
    format: Format,
) -> Result<()> {
    let text = match format {
        Format::Csv => to_csv(records, bounds),
        Format::Jsonl => to_jsonl(records, bounds),
    };
    crate::write_atomic(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(frame: u32, cell_id: u32, x: f64, y: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            frame,
            cell_id,
            x,
            y,
            area: 78.5,
            eccentricity: 0.0,
            brightness: 128.0,
            mitosis: None,
        }
    }

    #[test]
    fn velocity_is_first_difference() {
        let set = TrajectorySet::new(vec![rec(0, 1, 0.0, 0.0), rec(1, 1, 3.0, 4.0)], None).unwrap();
        assert_eq!(set.velocity(1, 1), Some((3.0, 4.0)));
        assert_eq!(set.velocity(0, 1), None);
    }

    #[test]
    fn duplicate_key_is_named() {
        let err = TrajectorySet::new(vec![rec(2, 7, 0.0, 0.0), rec(2, 7, 1.0, 1.0)], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frame 2") && msg.contains("cell 7"), "{msg}");
    }

    #[test]
    fn gap_truncates_trajectory_but_keeps_context() {
        let set = TrajectorySet::new(
            vec![rec(0, 1, 0.0, 0.0), rec(1, 1, 1.0, 0.0), rec(3, 1, 3.0, 0.0)],
            None,
        )
        .unwrap();
        assert_eq!(set.trajectory_len(1), 2);
        assert_eq!(
            set.gaps,
            vec![Gap {
                cell_id: 1,
                last_frame: 1,
                resumed_at: 3
            }]
        );
        assert_eq!(set.frame(3).len(), 1);
    }

    #[test]
    fn csv_header_is_checked() {
        let err = parse_csv("frame,x,y\n0,1,2\n", "t.csv").unwrap_err();
        assert!(err.to_string().contains("unexpected header"), "{err}");
    }

    #[test]
    fn csv_with_labels_and_metadata() {
        let text = "# width=300 height=100\nframe,cell_id,x,y,area,eccentricity,brightness,mitosis\n\
                    0,1,1.5,2.5,78.5,0.1,120,0\n1,1,2,3,70,0.2,130,1\n";
        let (recs, bounds) = parse_csv(text, "t.csv").unwrap();
        assert_eq!(bounds, Some(ImageBounds { width: 300.0, height: 100.0 }));
        assert_eq!(recs[1].mitosis, Some(1));
        let back = parse_csv(&to_csv(&recs, bounds), "t.csv").unwrap();
        assert_eq!(back.0, recs);
    }

    #[test]
    fn jsonl_mirror_parses() {
        let recs = vec![rec(0, 3, 0.1, 0.2), rec(1, 3, 0.3, 0.4)];
        let text = to_jsonl(&recs, Some(ImageBounds { width: 10.0, height: 5.0 }));
        assert!(text.lines().nth(1).unwrap().contains("\"cell_id\":3"));
        let (back, bounds) = parse_jsonl(&text, "t.jsonl").unwrap();
        assert_eq!(back, recs);
        assert_eq!(bounds.unwrap().width, 10.0);
    }
}
