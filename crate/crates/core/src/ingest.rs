//! CSV stream parsing, validation and clock correction.
//!
//! Every stream file is a headed CSV whose first column is an integer
//! microsecond timestamp. Parsing is total: any malformed row fails the whole
//! stream with the offending line number; nothing is skipped silently.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::LabelRaster;
use crate::manifest::{StreamDecl, StreamKind};
use crate::model::{SampleSeries, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub lat: f64,
    pub lon: f64,
    pub h_acc_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlamPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
}

impl SlamPose {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub gx: f64,
    pub gy: f64,
    pub confidence: f64,
}

/// Scene-camera displacement over the interval ending at the sample time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadFlow {
    pub du: f64,
    pub dv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub gx: f64,
    pub gy: f64,
    pub gz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub px: f64,
    pub py: f64,
    pub confidence: f64,
}

/// All keypoints sharing one timestamp in the long-format skeleton stream.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SkeletonFrame {
    pub joints: Vec<Keypoint>,
}

impl SkeletonFrame {
    pub fn joint(&self, name: &str) -> Option<&Keypoint> {
        self.joints.iter().find(|k| k.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkwayEdges {
    pub left_px: f64,
    pub right_px: f64,
    pub foot_row_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterRef {
    pub grid_path: String,
    pub legend_id: i64,
}

/// Fixed-schema record types.
pub trait CsvRecord: Sized {
    const COLUMNS: &'static [&'static str];
    fn from_fields(fields: &[f64]) -> std::result::Result<Self, String>;
    fn to_fields(&self) -> Vec<f64>;
}

fn check_unit_range(name: &str, v: f64) -> std::result::Result<(), String> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} = {v} outside [0, 1]"))
    }
}

impl CsvRecord for GpsFix {
    const COLUMNS: &'static [&'static str] = &["t_us", "lat_deg", "lon_deg", "h_acc_m"];
    fn from_fields(f: &[f64]) -> std::result::Result<Self, String> {
        let fix = GpsFix {
            lat: f[0],
            lon: f[1],
            h_acc_m: f[2],
        };
        if !(-90.0..=90.0).contains(&fix.lat) {
            return Err(format!("latitude {} outside [-90, 90]", fix.lat));
        }
        if !(-180.0..=180.0).contains(&fix.lon) {
            return Err(format!("longitude {} outside [-180, 180]", fix.lon));
        }
        if fix.h_acc_m <= 0.0 {
            return Err(format!("h_acc_m {} must be positive", fix.h_acc_m));
        }
        Ok(fix)
    }
    fn to_fields(&self) -> Vec<f64> {
        vec![self.lat, self.lon, self.h_acc_m]
    }
}

impl CsvRecord for SlamPose {
    const COLUMNS: &'static [&'static str] = &["t_us", "x_m", "y_m", "z_m", "qx", "qy", "qz", "qw"];
    fn from_fields(f: &[f64]) -> std::result::Result<Self, String> {
        let p = SlamPose {
            x: f[0],
            y: f[1],
            z: f[2],
            qx: f[3],
            qy: f[4],
            qz: f[5],
            qw: f[6],
        };
        let norm = (p.qx * p.qx + p.qy * p.qy + p.qz * p.qz + p.qw * p.qw).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(format!("quaternion norm {norm} not unit"));
        }
        Ok(p)
    }
    fn to_fields(&self) -> Vec<f64> {
        vec![self.x, self.y, self.z, self.qx, self.qy, self.qz, self.qw]
    }
}

impl CsvRecord for GazeSample {
    const COLUMNS: &'static [&'static str] = &["t_us", "gx_norm", "gy_norm", "confidence"];
    fn from_fields(f: &[f64]) -> std::result::Result<Self, String> {
        check_unit_range("gx_norm", f[0])?;
        check_unit_range("gy_norm", f[1])?;
        check_unit_range("confidence", f[2])?;
        Ok(GazeSample {
            gx: f[0],
            gy: f[1],
            confidence: f[2],
        })
    }
    fn to_fields(&self) -> Vec<f64> {
        vec![self.gx, self.gy, self.confidence]
    }
}

impl CsvRecord for HeadFlow {
    const COLUMNS: &'static [&'static str] = &["t_us", "du_norm", "dv_norm"];
    fn from_fields(f: &[f64]) -> std::result::Result<Self, String> {
        Ok(HeadFlow { du: f[0], dv: f[1] })
    }
    fn to_fields(&self) -> Vec<f64> {
        vec![self.du, self.dv]
    }
}

impl CsvRecord for ImuSample {
    const COLUMNS: &'static [&'static str] = &["t_us", "ax", "ay", "az", "gx", "gy", "gz"];
    fn from_fields(f: &[f64]) -> std::result::Result<Self, String> {
        Ok(ImuSample {
            ax: f[0],
            ay: f[1],
            az: f[2],
            gx: f[3],
            gy: f[4],
            gz: f[5],
        })
    }
    fn to_fields(&self) -> Vec<f64> {
        vec![self.ax, self.ay, self.az, self.gx, self.gy, self.gz]
    }
}

impl CsvRecord for WalkwayEdges {
    const COLUMNS: &'static [&'static str] = &["t_us", "left_px", "right_px", "foot_row_px"];
    fn from_fields(f: &[f64]) -> std::result::Result<Self, String> {
        Ok(WalkwayEdges {
            left_px: f[0],
            right_px: f[1],
            foot_row_px: f[2],
        })
    }
    fn to_fields(&self) -> Vec<f64> {
        vec![self.left_px, self.right_px, self.foot_row_px]
    }
}

/// Scalar streams (`eda`, `ibi`) carry one value column.
pub struct Scalar;

impl Scalar {
    pub fn columns(kind: StreamKind) -> &'static [&'static str] {
        match kind {
            StreamKind::Ibi => &["t_us", "ibi_ms"],
            _ => &["t_us", "eda_us"],
        }
    }
}

pub const SKELETON_COLUMNS: &[&str] = &["t_us", "joint_name", "px", "py", "confidence"];
pub const RASTER_INDEX_COLUMNS: &[&str] = &["t_us", "grid_path", "legend_id"];

/// A parsed stream of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyStream {
    Gps(SampleSeries<GpsFix>),
    SlamPose(SampleSeries<SlamPose>),
    Gaze(SampleSeries<GazeSample>),
    HeadFlow(SampleSeries<HeadFlow>),
    LabelRaster(SampleSeries<RasterRef>),
    Eda(SampleSeries<f64>),
    Ibi(SampleSeries<f64>),
    ImuFootLeft(SampleSeries<ImuSample>),
    ImuFootRight(SampleSeries<ImuSample>),
    Skeleton(SampleSeries<SkeletonFrame>),
    WalkwayEdges(SampleSeries<WalkwayEdges>),
    MaterialEmbedding(SampleSeries<Vec<f64>>),
}

impl AnyStream {
    pub fn kind(&self) -> StreamKind {
        match self {
            AnyStream::Gps(_) => StreamKind::Gps,
            AnyStream::SlamPose(_) => StreamKind::SlamPose,
            AnyStream::Gaze(_) => StreamKind::Gaze,
            AnyStream::HeadFlow(_) => StreamKind::HeadFlow,
            AnyStream::LabelRaster(_) => StreamKind::LabelRaster,
            AnyStream::Eda(_) => StreamKind::Eda,
            AnyStream::Ibi(_) => StreamKind::Ibi,
            AnyStream::ImuFootLeft(_) => StreamKind::ImuFootLeft,
            AnyStream::ImuFootRight(_) => StreamKind::ImuFootRight,
            AnyStream::Skeleton(_) => StreamKind::Skeleton,
            AnyStream::WalkwayEdges(_) => StreamKind::WalkwayEdges,
            AnyStream::MaterialEmbedding(_) => StreamKind::MaterialEmbedding,
        }
    }

    /// Sample count and time range, for reports.
    pub fn summary(&self) -> (usize, Option<Timestamp>, Option<Timestamp>) {
        fn s<V>(x: &SampleSeries<V>) -> (usize, Option<Timestamp>, Option<Timestamp>) {
            (x.len(), x.first_time(), x.last_time())
        }
        match self {
            AnyStream::Gps(x) => s(x),
            AnyStream::SlamPose(x) => s(x),
            AnyStream::Gaze(x) => s(x),
            AnyStream::HeadFlow(x) => s(x),
            AnyStream::LabelRaster(x) => s(x),
            AnyStream::Eda(x) | AnyStream::Ibi(x) => s(x),
            AnyStream::ImuFootLeft(x) | AnyStream::ImuFootRight(x) => s(x),
            AnyStream::Skeleton(x) => s(x),
            AnyStream::WalkwayEdges(x) => s(x),
            AnyStream::MaterialEmbedding(x) => s(x),
        }
    }
}

/// Parses one declared stream, applying its clock offset.
pub fn parse_stream(decl: &StreamDecl, base_dir: &Path) -> Result<AnyStream> {
    let path = base_dir.join(&decl.path);
    let off = decl.clock_offset_us;
    Ok(match decl.kind {
        StreamKind::Gps => AnyStream::Gps(read_records(&path, off)?),
        StreamKind::SlamPose => AnyStream::SlamPose(read_records(&path, off)?),
        StreamKind::Gaze => AnyStream::Gaze(read_records(&path, off)?),
        StreamKind::HeadFlow => AnyStream::HeadFlow(read_records(&path, off)?),
        StreamKind::ImuFootLeft => AnyStream::ImuFootLeft(read_records(&path, off)?),
        StreamKind::ImuFootRight => AnyStream::ImuFootRight(read_records(&path, off)?),
        StreamKind::WalkwayEdges => AnyStream::WalkwayEdges(read_records(&path, off)?),
        StreamKind::Eda => AnyStream::Eda(read_scalar(&path, StreamKind::Eda, off)?),
        StreamKind::Ibi => AnyStream::Ibi(read_scalar(&path, StreamKind::Ibi, off)?),
        StreamKind::Skeleton => AnyStream::Skeleton(read_skeleton(&path, off)?),
        StreamKind::MaterialEmbedding => AnyStream::MaterialEmbedding(read_embeddings(&path, off)?),
        StreamKind::LabelRaster => AnyStream::LabelRaster(read_raster_index(&path, off)?),
    })
}

struct Rows {
    file: String,
    reader: csv::Reader<std::fs::File>,
}

impl Rows {
    fn open(path: &Path) -> Result<(Self, Vec<String>)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(file);
        let name = path.display().to_string();
        let mut header = csv::StringRecord::new();
        let ok = reader
            .read_record(&mut header)
            .map_err(|e| Error::parse(&name, 1, e.to_string()))?;
        if !ok {
            return Err(Error::parse(&name, 1, "missing header row"));
        }
        let header = header.iter().map(str::to_string).collect();
        Ok((Rows { file: name, reader }, header))
    }

    /// Next data row and its 1-based line number.
    fn next(&mut self, record: &mut csv::StringRecord) -> Result<Option<u64>> {
        match self.reader.read_record(record) {
            Ok(true) => Ok(Some(record.position().map_or(0, |p| p.line()))),
            Ok(false) => Ok(None),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                Err(Error::parse(&self.file, line, e.to_string()))
            }
        }
    }
}

fn expect_header(file: &str, header: &[String], expected: &[&str]) -> Result<()> {
    if header.iter().map(String::as_str).ne(expected.iter().copied()) {
        return Err(Error::parse(
            file,
            1,
            format!("header `{}` does not match `{}`", header.join(","), expected.join(",")),
        ));
    }
    Ok(())
}

fn parse_ts(file: &str, line: u64, raw: &str, offset: i64) -> Result<Timestamp> {
    let t: i64 = raw
        .parse()
        .map_err(|_| Error::parse(file, line, format!("timestamp `{raw}` is not an integer")))?;
    t.checked_add(offset)
        .map(Timestamp)
        .ok_or_else(|| Error::parse(file, line, "timestamp overflow after clock offset"))
}

fn parse_real(file: &str, line: u64, raw: &str) -> Result<f64> {
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::parse(file, line, format!("`{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(file, line, format!("non-finite value `{raw}`")));
    }
    Ok(v)
}

fn check_order(file: &str, line: u64, prev: Option<Timestamp>, t: Timestamp) -> Result<()> {
    match prev {
        Some(p) if t <= p => Err(Error::StreamOrder {
            file: file.to_string(),
            line,
        }),
        _ => Ok(()),
    }
}

fn check_width(file: &str, line: u64, rec: &csv::StringRecord, width: usize) -> Result<()> {
    if rec.len() != width {
        return Err(Error::parse(
            file,
            line,
            format!("expected {width} columns, found {}", rec.len()),
        ));
    }
    Ok(())
}

/// Reads a fixed-schema stream.
pub fn read_records<V: CsvRecord>(path: &Path, offset: i64) -> Result<SampleSeries<V>> {
    let (mut rows, header) = Rows::open(path)?;
    let file = rows.file.clone();
    expect_header(&file, &header, V::COLUMNS)?;
    let width = V::COLUMNS.len();
    let mut ts = Vec::new();
    let mut vals = Vec::new();
    let mut rec = csv::StringRecord::new();
    let mut fields = vec![0.0; width - 1];
    while let Some(line) = rows.next(&mut rec)? {
        check_width(&file, line, &rec, width)?;
        let t = parse_ts(&file, line, &rec[0], offset)?;
        check_order(&file, line, ts.last().copied(), t)?;
        for (slot, raw) in fields.iter_mut().zip(rec.iter().skip(1)) {
            *slot = parse_real(&file, line, raw)?;
        }
        let v = V::from_fields(&fields).map_err(|m| Error::parse(&file, line, m))?;
        ts.push(t);
        vals.push(v);
    }
    SampleSeries::new(ts, vals)
}

pub fn read_scalar(path: &Path, kind: StreamKind, offset: i64) -> Result<SampleSeries<f64>> {
    let (mut rows, header) = Rows::open(path)?;
    let file = rows.file.clone();
    expect_header(&file, &header, Scalar::columns(kind))?;
    let mut ts = Vec::new();
    let mut vals = Vec::new();
    let mut rec = csv::StringRecord::new();
    while let Some(line) = rows.next(&mut rec)? {
        check_width(&file, line, &rec, 2)?;
        let t = parse_ts(&file, line, &rec[0], offset)?;
        check_order(&file, line, ts.last().copied(), t)?;
        let v = parse_real(&file, line, &rec[1])?;
        if kind == StreamKind::Eda && v < 0.0 {
            return Err(Error::parse(&file, line, format!("negative conductance {v}")));
        }
        if kind == StreamKind::Ibi && v <= 0.0 {
            return Err(Error::parse(&file, line, format!("non-positive interval {v}")));
        }
        ts.push(t);
        vals.push(v);
    }
    SampleSeries::new(ts, vals)
}

/// Long-format keypoints; consecutive rows with equal timestamps form one
/// frame, and a timestamp may not reappear once a later one has been seen.
pub fn read_skeleton(path: &Path, offset: i64) -> Result<SampleSeries<SkeletonFrame>> {
    let (mut rows, header) = Rows::open(path)?;
    let file = rows.file.clone();
    expect_header(&file, &header, SKELETON_COLUMNS)?;
    let mut ts: Vec<Timestamp> = Vec::new();
    let mut frames: Vec<SkeletonFrame> = Vec::new();
    let mut rec = csv::StringRecord::new();
    while let Some(line) = rows.next(&mut rec)? {
        check_width(&file, line, &rec, 5)?;
        let t = parse_ts(&file, line, &rec[0], offset)?;
        let kp = Keypoint {
            name: rec[1].to_string(),
            px: parse_real(&file, line, &rec[2])?,
            py: parse_real(&file, line, &rec[3])?,
            confidence: parse_real(&file, line, &rec[4])?,
        };
        if kp.name.is_empty() {
            return Err(Error::parse(&file, line, "empty joint name"));
        }
        match ts.last() {
            Some(&last) if last == t => {
                let frame = frames.last_mut().expect("frame for timestamp");
                if frame.joint(&kp.name).is_some() {
                    return Err(Error::parse(&file, line, format!("duplicate joint `{}`", kp.name)));
                }
                frame.joints.push(kp);
            }
            prev => {
                check_order(&file, line, prev.copied(), t)?;
                ts.push(t);
                frames.push(SkeletonFrame { joints: vec![kp] });
            }
        }
    }
    SampleSeries::new(ts, frames)
}

/// Embedding stream; the dimension is the header width minus one and the
/// columns must be named `e0..e{d-1}`.
pub fn read_embeddings(path: &Path, offset: i64) -> Result<SampleSeries<Vec<f64>>> {
    let (mut rows, header) = Rows::open(path)?;
    let file = rows.file.clone();
    if header.len() < 2 || header[0] != "t_us" {
        return Err(Error::parse(&file, 1, "embedding header must be t_us,e0..e{d-1}"));
    }
    for (i, h) in header.iter().enumerate().skip(1) {
        if *h != format!("e{}", i - 1) {
            return Err(Error::parse(&file, 1, format!("unexpected column `{h}`")));
        }
    }
    let width = header.len();
    let mut ts = Vec::new();
    let mut vals = Vec::new();
    let mut rec = csv::StringRecord::new();
    while let Some(line) = rows.next(&mut rec)? {
        check_width(&file, line, &rec, width)?;
        let t = parse_ts(&file, line, &rec[0], offset)?;
        check_order(&file, line, ts.last().copied(), t)?;
        let v = rec
            .iter()
            .skip(1)
            .map(|raw| parse_real(&file, line, raw))
            .collect::<Result<Vec<_>>>()?;
        ts.push(t);
        vals.push(v);
    }
    SampleSeries::new(ts, vals)
}

pub fn read_raster_index(path: &Path, offset: i64) -> Result<SampleSeries<RasterRef>> {
    let (mut rows, header) = Rows::open(path)?;
    let file = rows.file.clone();
    expect_header(&file, &header, RASTER_INDEX_COLUMNS)?;
    let mut ts = Vec::new();
    let mut vals = Vec::new();
    let mut rec = csv::StringRecord::new();
    while let Some(line) = rows.next(&mut rec)? {
        check_width(&file, line, &rec, 3)?;
        let t = parse_ts(&file, line, &rec[0], offset)?;
        check_order(&file, line, ts.last().copied(), t)?;
        let legend_id: i64 = rec[2]
            .parse()
            .map_err(|_| Error::parse(&file, line, format!("legend id `{}` is not an integer", &rec[2])))?;
        ts.push(t);
        vals.push(RasterRef {
            grid_path: rec[1].to_string(),
            legend_id,
        });
    }
    SampleSeries::new(ts, vals)
}

/// Legend file for a raster index: `legend_<id>.csv` beside the index.
pub fn legend_path(index_dir: &Path, legend_id: i64) -> PathBuf {
    index_dir.join(format!("legend_{legend_id}.csv"))
}

pub fn read_legend(path: &Path) -> Result<BTreeMap<i64, String>> {
    let (mut rows, header) = Rows::open(path)?;
    let file = rows.file.clone();
    expect_header(&file, &header, &["id", "class_name"])?;
    let mut legend = BTreeMap::new();
    let mut rec = csv::StringRecord::new();
    while let Some(line) = rows.next(&mut rec)? {
        check_width(&file, line, &rec, 2)?;
        let id: i64 = rec[0]
            .parse()
            .map_err(|_| Error::parse(&file, line, format!("class id `{}` is not an integer", &rec[0])))?;
        if legend.insert(id, rec[1].to_string()).is_some() {
            return Err(Error::parse(&file, line, format!("duplicate class id {id}")));
        }
    }
    Ok(legend)
}

/// Grid file: first line `W H`, then `W*H` whitespace-separated integer ids
/// in row-major order.
pub fn read_grid(path: &Path) -> Result<(usize, usize, Vec<i64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, head) = lines
        .next()
        .ok_or_else(|| Error::parse(&name, 1, "missing `W H` header"))?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::parse(&name, 1, format!("bad dimension `{s}`"))))
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(Error::parse(&name, 1, "header must be `W H`"));
    };
    if w == 0 || h == 0 {
        return Err(Error::parse(&name, 1, "grid dimensions must be positive"));
    }
    let mut cells = Vec::with_capacity(w * h);
    for (i, line) in lines {
        for tok in line.split_whitespace() {
            let id = tok
                .parse()
                .map_err(|_| Error::parse(&name, i as u64 + 1, format!("bad class id `{tok}`")))?;
            cells.push(id);
        }
    }
    if cells.len() != w * h {
        return Err(Error::parse(
            &name,
            1,
            format!("expected {} cells, found {}", w * h, cells.len()),
        ));
    }
    Ok((w, h, cells))
}

/// Loads every raster referenced by an index, validating ids against legends.
pub fn load_label_rasters(index: &SampleSeries<RasterRef>, index_dir: &Path) -> Result<Vec<LabelRaster>> {
    let mut legends: BTreeMap<i64, BTreeMap<i64, String>> = BTreeMap::new();
    let mut grids: BTreeMap<String, (usize, usize, Vec<i64>)> = BTreeMap::new();
    let mut out = Vec::with_capacity(index.len());
    for (t, r) in index.iter() {
        if let std::collections::btree_map::Entry::Vacant(e) = legends.entry(r.legend_id) {
            let legend = read_legend(&legend_path(index_dir, r.legend_id))?;
            e.insert(legend);
        }
        let legend = &legends[&r.legend_id];
        let grid_path = index_dir.join(&r.grid_path);
        if !grids.contains_key(&r.grid_path) {
            grids.insert(r.grid_path.clone(), read_grid(&grid_path)?);
        }
        let (width, height, classes) = grids[&r.grid_path].clone();
        if let Some(bad) = classes.iter().find(|id| !legend.contains_key(id)) {
            return Err(Error::parse(
                &grid_path.display().to_string(),
                1,
                format!("class id {bad} not in legend {}", r.legend_id),
            ));
        }
        out.push(LabelRaster {
            t,
            width,
            height,
            classes,
            legend: legend.clone(),
        });
    }
    Ok(out)
}

fn fmt_real(v: f64) -> String {
    // Display prints the shortest string that parses back to the same bits.
    format!("{v}")
}

/// Serializes a fixed-schema series back to its CSV form.
pub fn write_records<V: CsvRecord>(out: &mut impl Write, series: &SampleSeries<V>) -> std::io::Result<()> {
    writeln!(out, "{}", V::COLUMNS.join(","))?;
    for (t, v) in series.iter() {
        write!(out, "{}", t.0)?;
        for f in v.to_fields() {
            write!(out, ",{}", fmt_real(f))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_scalar(out: &mut impl Write, kind: StreamKind, series: &SampleSeries<f64>) -> std::io::Result<()> {
    writeln!(out, "{}", Scalar::columns(kind).join(","))?;
    for (t, v) in series.iter() {
        writeln!(out, "{},{}", t.0, fmt_real(*v))?;
    }
    Ok(())
}

pub fn write_skeleton(out: &mut impl Write, series: &SampleSeries<SkeletonFrame>) -> std::io::Result<()> {
    writeln!(out, "{}", SKELETON_COLUMNS.join(","))?;
    for (t, frame) in series.iter() {
        for k in &frame.joints {
            writeln!(
                out,
                "{},{},{},{},{}",
                t.0,
                k.name,
                fmt_real(k.px),
                fmt_real(k.py),
                fmt_real(k.confidence)
            )?;
        }
    }
    Ok(())
}

pub fn write_embeddings(out: &mut impl Write, dim: usize, series: &SampleSeries<Vec<f64>>) -> std::io::Result<()> {
    write!(out, "t_us")?;
    for i in 0..dim {
        write!(out, ",e{i}")?;
    }
    writeln!(out)?;
    for (t, v) in series.iter() {
        write!(out, "{}", t.0)?;
        for x in v {
            write!(out, ",{}", fmt_real(*x))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_raster_index(out: &mut impl Write, series: &SampleSeries<RasterRef>) -> std::io::Result<()> {
    writeln!(out, "{}", RASTER_INDEX_COLUMNS.join(","))?;
    for (t, r) in series.iter() {
        writeln!(out, "{},{},{}", t.0, r.grid_path, r.legend_id)?;
    }
    Ok(())
}

/// Linear interpolation onto a uniform grid spanning `[first, last]`.
///
/// Grid point `k` sits at `first + round(k * 1e6 / rate_hz)` µs; the grid
/// stops at the last point not after the final sample (no extrapolation).
pub fn resample_uniform(series: &SampleSeries<f64>, rate_hz: f64) -> Result<SampleSeries<f64>> {
    if series.len() < 2 {
        return Err(Error::EmptyStream);
    }
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(Error::InvalidRange { t0: 0, t1: 0 });
    }
    let ts = series.timestamps();
    let vs = series.values();
    let first = ts[0].0;
    let last = ts[ts.len() - 1].0;
    let period = 1e6 / rate_hz;
    let mut out_t = Vec::new();
    let mut out_v = Vec::new();
    let mut j = 0usize;
    let mut k = 0u64;
    loop {
        let t = first + (k as f64 * period).round() as i64;
        if t > last {
            break;
        }
        while j + 2 < ts.len() && ts[j + 1].0 <= t {
            j += 1;
        }
        let (t0, t1) = (ts[j].0, ts[j + 1].0);
        let v = if t == t0 {
            vs[j]
        } else if t >= t1 {
            vs[j + 1]
        } else {
            let a = (t - t0) as f64 / (t1 - t0) as f64;
            vs[j] + a * (vs[j + 1] - vs[j])
        };
        if out_t.last().is_some_and(|&p: &Timestamp| p.0 >= t) {
            // rate above 1 MHz collapses grid points onto the same microsecond
            k += 1;
            continue;
        }
        out_t.push(Timestamp(t));
        out_v.push(v);
        k += 1;
    }
    SampleSeries::new(out_t, out_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn decl(kind: StreamKind, path: &str, off: i64) -> StreamDecl {
        StreamDecl {
            kind,
            path: path.into(),
            clock_offset_us: off,
            nominal_rate_hz: None,
        }
    }

    #[test]
    fn gps_row_parses() {
        let d = tempfile::tempdir().unwrap();
        write_file(
            d.path(),
            "gps.csv",
            "t_us,lat_deg,lon_deg,h_acc_m\n1700000000000000,1.3521,103.8198,4.2\n",
        );
        let AnyStream::Gps(s) = parse_stream(&decl(StreamKind::Gps, "gps.csv", 0), d.path()).unwrap() else {
            panic!("wrong kind");
        };
        assert_eq!(s.timestamps(), &[Timestamp(1_700_000_000_000_000)]);
        assert_eq!(
            s.values()[0],
            GpsFix {
                lat: 1.3521,
                lon: 103.8198,
                h_acc_m: 4.2
            }
        );
    }

    #[test]
    fn repeated_timestamp_is_order_error() {
        let d = tempfile::tempdir().unwrap();
        write_file(d.path(), "eda.csv", "t_us,eda_us\n10,0.3\n10,0.4\n");
        let err = parse_stream(&decl(StreamKind::Eda, "eda.csv", 0), d.path()).unwrap_err();
        assert!(matches!(err, Error::StreamOrder { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn clock_offset_is_additive() {
        let d = tempfile::tempdir().unwrap();
        write_file(d.path(), "ibi.csv", "t_us,ibi_ms\n1000000,800\n");
        let AnyStream::Ibi(s) = parse_stream(&decl(StreamKind::Ibi, "ibi.csv", 500_000), d.path()).unwrap() else {
            panic!()
        };
        assert_eq!(s.timestamps(), &[Timestamp(1_500_000)]);
    }

    #[test]
    fn errors_name_lines() {
        let d = tempfile::tempdir().unwrap();
        write_file(d.path(), "g.csv", "t_us,gx_norm,gy_norm,confidence\n1,0.5,0.5,1\n2,0.5,0.5\n");
        let err = parse_stream(&decl(StreamKind::Gaze, "g.csv", 0), d.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");

        write_file(d.path(), "g2.csv", "t_us,gx_norm,gy_norm,confidence\n1,0.5,NaN,1\n");
        let err = parse_stream(&decl(StreamKind::Gaze, "g2.csv", 0), d.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");

        write_file(d.path(), "g3.csv", "t_us,gx_norm,gy_norm,confidence\n1,1.2,0.5,1\n");
        let err = parse_stream(&decl(StreamKind::Gaze, "g3.csv", 0), d.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");

        write_file(d.path(), "bad_header.csv", "t,lat,lon,acc\n");
        let err = parse_stream(&decl(StreamKind::Gps, "bad_header.csv", 0), d.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err:?}");

        write_file(d.path(), "q.csv", "t_us,x_m,y_m,z_m,qx,qy,qz,qw\n1,0,0,0,0,0,0,0.9\n");
        let err = parse_stream(&decl(StreamKind::SlamPose, "q.csv", 0), d.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn skeleton_groups_frames() {
        let d = tempfile::tempdir().unwrap();
        write_file(
            d.path(),
            "sk.csv",
            "t_us,joint_name,px,py,confidence\n1,head,10,20,0.9\n1,left_ankle,10,300,0.9\n2,head,11,21,0.8\n",
        );
        let AnyStream::Skeleton(s) = parse_stream(&decl(StreamKind::Skeleton, "sk.csv", 0), d.path()).unwrap() else {
            panic!()
        };
        assert_eq!(s.len(), 2);
        assert_eq!(s.values()[0].joints.len(), 2);
        write_file(
            d.path(),
            "sk2.csv",
            "t_us,joint_name,px,py,confidence\n1,head,10,20,0.9\n2,head,11,21,0.8\n1,neck,1,1,1\n",
        );
        let err = parse_stream(&decl(StreamKind::Skeleton, "sk2.csv", 0), d.path()).unwrap_err();
        assert!(matches!(err, Error::StreamOrder { line: 4, .. }));
    }

    #[test]
    fn embeddings_infer_dimension() {
        let d = tempfile::tempdir().unwrap();
        write_file(d.path(), "e.csv", "t_us,e0,e1,e2\n1,0.1,0.2,0.3\n2,1,2,3\n");
        let AnyStream::MaterialEmbedding(s) =
            parse_stream(&decl(StreamKind::MaterialEmbedding, "e.csv", 0), d.path()).unwrap()
        else {
            panic!()
        };
        assert_eq!(s.values()[1], vec![1.0, 2.0, 3.0]);
        write_file(d.path(), "e2.csv", "t_us,e0,e2\n");
        assert!(parse_stream(&decl(StreamKind::MaterialEmbedding, "e2.csv", 0), d.path()).is_err());
    }

    #[test]
    fn rasters_load_and_validate_legend() {
        let d = tempfile::tempdir().unwrap();
        write_file(d.path(), "legend_3.csv", "id,class_name\n0,sidewalk\n1,vegetation\n");
        write_file(d.path(), "r0.grid", "2 2\n0 1\n1 0\n");
        write_file(d.path(), "r1.grid", "2 2\n0 1\n1 7\n");
        write_file(d.path(), "index.csv", "t_us,grid_path,legend_id\n5,r0.grid,3\n");
        let AnyStream::LabelRaster(idx) =
            parse_stream(&decl(StreamKind::LabelRaster, "index.csv", 0), d.path()).unwrap()
        else {
            panic!()
        };
        let rasters = load_label_rasters(&idx, d.path()).unwrap();
        assert_eq!(rasters[0].classes, vec![0, 1, 1, 0]);
        assert_eq!(rasters[0].legend[&1], "vegetation");
        write_file(d.path(), "index2.csv", "t_us,grid_path,legend_id\n5,r1.grid,3\n");
        let idx = read_raster_index(&d.path().join("index2.csv"), 0).unwrap();
        assert!(load_label_rasters(&idx, d.path()).is_err());
    }

    #[test]
    fn resample_examples() {
        let s = SampleSeries::new(vec![Timestamp(0), Timestamp(2_000_000)], vec![0.0, 2.0]).unwrap();
        let r = resample_uniform(&s, 1.0).unwrap();
        assert_eq!(r.timestamps(), &[Timestamp(0), Timestamp(1_000_000), Timestamp(2_000_000)]);
        assert_eq!(r.values(), &[0.0, 1.0, 2.0]);

        let u = SampleSeries::new(
            (0..50).map(|i| Timestamp(i * 250_000)).collect(),
            (0..50).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let r = resample_uniform(&u, 4.0).unwrap();
        assert_eq!(r.timestamps(), u.timestamps());
        for (a, b) in r.values().iter().zip(u.values()) {
            assert!((a - b).abs() <= 1e-12);
        }

        let one = SampleSeries::new(vec![Timestamp(0)], vec![1.0]).unwrap();
        assert!(matches!(resample_uniform(&one, 1.0), Err(Error::EmptyStream)));
    }

    proptest! {
        #[test]
        fn resample_reproduces_linear_signals(
            gaps in proptest::collection::vec(1i64..400_000, 2..40),
            slope in -5.0f64..5.0,
            intercept in -10.0f64..10.0,
            rate in 0.5f64..50.0,
        ) {
            let mut t = 0i64;
            let mut ts = vec![Timestamp(0)];
            for g in gaps { t += g; ts.push(Timestamp(t)); }
            let f = |t: i64| intercept + slope * t as f64 * 1e-6;
            let vals = ts.iter().map(|t| f(t.0)).collect();
            let s = SampleSeries::new(ts, vals).unwrap();
            let r = resample_uniform(&s, rate).unwrap();
            for (t, v) in r.iter() {
                let want = f(t.0);
                prop_assert!((v - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }

        #[test]
        fn gaze_csv_round_trips_bit_identically(
            rows in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..50),
        ) {
            let d = tempfile::tempdir().unwrap();
            let s = SampleSeries::new(
                (0..rows.len()).map(|i| Timestamp(i as i64 * 5000 + 17)).collect(),
                rows.iter().map(|&(gx, gy, confidence)| GazeSample { gx, gy, confidence }).collect(),
            ).unwrap();
            let p = d.path().join("g.csv");
            let mut buf = Vec::new();
            write_records(&mut buf, &s).unwrap();
            std::fs::write(&p, &buf).unwrap();
            let back: SampleSeries<GazeSample> = read_records(&p, 0).unwrap();
            prop_assert_eq!(&back, &s);
            let mut again = Vec::new();
            write_records(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }

        #[test]
        fn imu_csv_round_trips(vals in proptest::collection::vec(proptest::array::uniform6(-1e3f64..1e3), 1..30)) {
            let d = tempfile::tempdir().unwrap();
            let s = SampleSeries::new(
                (0..vals.len()).map(|i| Timestamp(i as i64 * 10_000)).collect(),
                vals.iter().map(|v| ImuSample { ax: v[0], ay: v[1], az: v[2], gx: v[3], gy: v[4], gz: v[5] }).collect(),
            ).unwrap();
            let p = d.path().join("imu.csv");
            let mut buf = Vec::new();
            write_records(&mut buf, &s).unwrap();
            std::fs::write(&p, &buf).unwrap();
            let back: SampleSeries<ImuSample> = read_records(&p, 0).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
