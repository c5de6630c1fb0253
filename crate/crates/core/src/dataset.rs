//! TUM RGB-D layout: `rgb.txt`, `depth.txt`, `groundtruth.txt`, `rgb/`,
//! `depth/`, plus a `camera.txt` sidecar holding
//! `fx fy cx cy width height depth_scale exposure`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::lie::{ExposureTrajectory, PoseSE3, UnitQuaternion};

pub const DEFAULT_ASSOC_TOLERANCE: f64 = 0.02;
pub const CAMERA_FILE: &str = "camera.txt";

/// One captured frame: color in `[0, 1]` and metric depth (0 where invalid).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub color: ImageBuffer,
    pub depth: ImageBuffer,
    /// Start of the exposure, seconds.
    pub timestamp: f64,
    pub intrinsics: Intrinsics,
    /// Exposure time, seconds.
    pub exposure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub timestamp: f64,
    pub rgb: PathBuf,
    pub depth: PathBuf,
}

/// Anything that yields an ordered sequence of frames.
pub trait FrameProvider {
    fn len(&self) -> usize;
    fn frame(&self, index: usize) -> Result<RgbdFrame>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameProvider for [RgbdFrame] {
    fn len(&self) -> usize {
        <[RgbdFrame]>::len(self)
    }

    fn frame(&self, index: usize) -> Result<RgbdFrame> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("frame {index} out of range")))
    }
}

impl FrameProvider for Vec<RgbdFrame> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn frame(&self, index: usize) -> Result<RgbdFrame> {
        self.as_slice().frame(index)
    }
}

/// An associated on-disk sequence; images are decoded on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSource {
    pub root: PathBuf,
    pub entries: Vec<FrameEntry>,
    pub intrinsics: Intrinsics,
    pub exposure: f64,
    /// Color frames without a depth match inside the tolerance.
    pub dropped: usize,
}

impl FrameProvider for FrameSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn frame(&self, index: usize) -> Result<RgbdFrame> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("frame {index} out of range")))?;
        let color = read_color_png(&self.root.join(&e.rgb))?;
        let depth = read_depth_png(&self.root.join(&e.depth), self.intrinsics.depth_scale)?;
        if color.width() != depth.width() || color.height() != depth.height() {
            return Err(Error::ShapeMismatch(format!(
                "{}: depth is {}×{}, color is {}×{}",
                e.depth.display(),
                depth.width(),
                depth.height(),
                color.width(),
                color.height()
            )));
        }
        Ok(RgbdFrame {
            color,
            depth,
            timestamp: e.timestamp,
            intrinsics: self.intrinsics,
            exposure: self.exposure,
        })
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path: path.into() }
        } else {
            Error::io(path, e)
        }
    })
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::MalformedLine {
        path: path.into(),
        line,
        message: message.into(),
    }
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| malformed(path, line, format!("expected a number, got {tok:?}")))
}

/// Parses a `timestamp filename` list.
pub fn read_file_list(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in data_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(malformed(path, n, "expected \"timestamp filename\""));
        }
        out.push((parse_f64(path, n, toks[0])?, PathBuf::from(toks[1])));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Reads the camera sidecar. A missing exposure field yields `None`.
pub fn read_camera_file(path: &Path) -> Result<(Intrinsics, Option<f64>)> {
    let text = read_to_string(path)?;
    let (n, line) = data_lines(&text)
        .next()
        .ok_or_else(|| malformed(path, 1, "empty camera file"))?;
    let toks: Vec<&str> = line.split_whitespace().collect();
    if !(6..=8).contains(&toks.len()) {
        return Err(malformed(
            path,
            n,
            "expected \"fx fy cx cy width height [depth_scale [exposure]]\"",
        ));
    }
    let v: Vec<f64> = toks
        .iter()
        .map(|t| parse_f64(path, n, t))
        .collect::<Result<_>>()?;
    let dim = |x: f64| -> Result<usize> {
        if x >= 1.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(malformed(path, n, "image size must be a positive integer"))
        }
    };
    let mut k = Intrinsics::new(v[0], v[1], v[2], v[3], dim(v[4])?, dim(v[5])?);
    if let Some(&s) = v.get(6) {
        k.depth_scale = s;
    }
    k.validate().map_err(|e| malformed(path, n, e.to_string()))?;
    let exposure = v.get(7).copied();
    if exposure.is_some_and(|e| e < 0.0) {
        return Err(malformed(path, n, "exposure must be non-negative"));
    }
    Ok((k, exposure))
}

pub fn write_camera_file(path: &Path, k: &Intrinsics, exposure: f64) -> Result<()> {
    let text = format!(
        "# fx fy cx cy width height depth_scale exposure\n{} {} {} {} {} {} {} {}\n",
        fmt_g9(k.fx),
        fmt_g9(k.fy),
        fmt_g9(k.cx),
        fmt_g9(k.cy),
        k.width,
        k.height,
        fmt_g9(k.depth_scale),
        fmt_g9(exposure)
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Nearest-timestamp association of each color frame with a depth frame.
///
/// Returns the matched pairs and the number of unmatched color frames.
pub fn associate(
    rgb: &[(f64, PathBuf)],
    depth: &[(f64, PathBuf)],
    tolerance: f64,
) -> (Vec<FrameEntry>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    for (t, rgb_path) in rgb {
        let i = depth.partition_point(|d| d.0 < *t);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < depth.len())
            .min_by(|&a, &b| (depth[a].0 - t).abs().total_cmp(&(depth[b].0 - t).abs()));
        match best {
            Some(j) if (depth[j].0 - t).abs() <= tolerance => out.push(FrameEntry {
                timestamp: *t,
                rgb: rgb_path.clone(),
                depth: depth[j].1.clone(),
            }),
            _ => dropped += 1,
        }
    }
    (out, dropped)
}

/// Loads a TUM-layout dataset.
///
/// Without an exposure field in the camera file, the exposure defaults to
/// half the median inter-frame interval.
pub fn load_tum_dataset(root: &Path, assoc_tolerance: f64) -> Result<FrameSource> {
    if !root.is_dir() {
        return Err(Error::MissingFile { path: root.into() });
    }
    let rgb = read_file_list(&root.join("rgb.txt"))?;
    let depth = read_file_list(&root.join("depth.txt"))?;
    let (intrinsics, exposure) = read_camera_file(&root.join(CAMERA_FILE))?;
    let (mut entries, dropped) = associate(&rgb, &depth, assoc_tolerance);
    entries.dedup_by(|b, a| a.timestamp == b.timestamp);
    if entries.is_empty() {
        return Err(Error::NoAssociations {
            tolerance: assoc_tolerance,
        });
    }
    if dropped > 0 {
        log::warn!("{dropped} color frames had no depth within {assoc_tolerance} s");
    }
    let exposure = exposure.unwrap_or_else(|| 0.5 * median_interval(&entries));
    Ok(FrameSource {
        root: root.into(),
        entries,
        intrinsics,
        exposure,
        dropped,
    })
}

fn median_interval(entries: &[FrameEntry]) -> f64 {
    let mut d: Vec<f64> = entries
        .windows(2)
        .map(|w| w[1].timestamp - w[0].timestamp)
        .collect();
    if d.is_empty() {
        return 1.0 / 30.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Parses a TUM trajectory (`timestamp tx ty tz qx qy qz qw`), renormalizing
/// quaternions and sorting by time.
pub fn load_groundtruth(path: &Path) -> Result<Vec<(f64, PoseSE3)>> {
    let text = read_to_string(path)?;
    parse_trajectory(&text, path)
}

/// As [`load_groundtruth`], from text; `path` only labels errors.
pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<(f64, PoseSE3)>> {
    let mut out = Vec::new();
    for (n, line) in data_lines(text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(malformed(path, n, format!("expected 8 fields, got {}", toks.len())));
        }
        let v: Vec<f64> = toks
            .iter()
            .map(|t| parse_f64(path, n, t))
            .collect::<Result<_>>()?;
        let norm = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if norm == 0.0 {
            return Err(malformed(path, n, "zero quaternion"));
        }
        if (norm - 1.0).abs() > 1e-3 {
            log::warn!("{}:{n}: quaternion norm {norm} renormalized", path.display());
        }
        let pose = PoseSE3::new(
            UnitQuaternion::from_components(v[4], v[5], v[6], v[7]),
            Vector3::new(v[1], v[2], v[3]),
        );
        out.push((v[0], pose));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Which pose of an exposure to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoseSelect {
    Start,
    #[default]
    Mid,
    End,
}

impl PoseSelect {
    /// `(timestamp, pose)` for an exposure starting at `start_time`.
    pub fn pick(self, start_time: f64, traj: &ExposureTrajectory) -> (f64, PoseSE3) {
        match self {
            PoseSelect::Start => (start_time, traj.start),
            PoseSelect::Mid => (start_time + traj.exposure / 2.0, traj.mid()),
            PoseSelect::End => (start_time + traj.exposure, traj.end),
        }
    }
}

impl std::str::FromStr for PoseSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(PoseSelect::Start),
            "mid" => Ok(PoseSelect::Mid),
            "end" => Ok(PoseSelect::End),
            _ => Err(Error::InvalidArgument(format!(
                "expected start, mid or end, got {s:?}"
            ))),
        }
    }
}

/// `%.9g`-style formatting: nine significant digits, no trailing zeros.
pub fn fmt_g9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.into()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// One TUM trajectory line.
pub fn format_pose_line(timestamp: f64, pose: &PoseSE3) -> String {
    let q = pose.rotation.coords();
    let t = pose.translation;
    let mut s = format!("{timestamp:.9}");
    for v in [t.x, t.y, t.z, q[0], q[1], q[2], q[3]] {
        let _ = write!(s, " {}", fmt_g9(v));
    }
    s
}

pub fn format_trajectory(poses: &[(f64, PoseSE3)]) -> String {
    let mut sorted: Vec<&(f64, PoseSE3)> = poses.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = String::new();
    for (t, p) in sorted {
        out.push_str(&format_pose_line(*t, p));
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: &Path, poses: &[(f64, PoseSE3)]) -> Result<()> {
    fs::write(path, format_trajectory(poses)).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB (or gray, replicated) image in `[0, 1]` as 8-bit PNG.
pub fn write_color_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut buf = Vec::with_capacity(w * h * 3);
    for px in img.data().chunks(c) {
        for k in 0..3 {
            buf.push(to_u8(px[k.min(c - 1)]));
        }
    }
    let out = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    out.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

/// Writes metric depth as 16-bit PNG in units of `depth_scale` meters.
pub fn write_depth_png(path: &Path, depth: &ImageBuffer, depth_scale: f64) -> Result<()> {
    let buf: Vec<u16> = (0..depth.pixel_count())
        .map(|i| {
            let d = depth.data()[i * depth.channels()];
            if d.is_finite() && d > 0.0 {
                (d / depth_scale).round().clamp(0.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    let out = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        depth.width() as u32,
        depth.height() as u32,
        buf,
    )
    .expect("buffer size");
    out.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.into() });
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

pub fn read_color_png(path: &Path) -> Result<ImageBuffer> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    ImageBuffer::from_vec(w as usize, h as usize, 3, data)
}

/// Decodes a 16-bit depth PNG: stored value `v` becomes `v · depth_scale` meters.
pub fn read_depth_png(path: &Path, depth_scale: f64) -> Result<ImageBuffer> {
    let img = open_image(path)?;
    if img.color() != image::ColorType::L16 {
        return Err(Error::InvalidArgument(format!(
            "{}: depth must be a 16-bit grayscale PNG",
            path.display()
        )));
    }
    let img = img.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 * depth_scale).collect();
    ImageBuffer::from_vec(w as usize, h as usize, 1, data)
}

/// Writes frames in TUM layout under `root`, with an optional ground truth.
pub fn write_tum_dataset(
    root: &Path,
    frames: &[RgbdFrame],
    groundtruth: Option<&[(f64, PoseSE3)]>,
) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("no frames to write".into()))?;
    for dir in [root.to_path_buf(), root.join("rgb"), root.join("depth")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rgb_list = String::from("# timestamp filename\n");
    let mut depth_list = rgb_list.clone();
    for f in frames {
        let name = format!("{:.6}.png", f.timestamp);
        write_color_png(&root.join("rgb").join(&name), &f.color)?;
        write_depth_png(&root.join("depth").join(&name), &f.depth, f.intrinsics.depth_scale)?;
        let _ = writeln!(rgb_list, "{:.9} rgb/{name}", f.timestamp);
        let _ = writeln!(depth_list, "{:.9} depth/{name}", f.timestamp);
    }
    let write = |name: &str, text: &str| {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("rgb.txt", &rgb_list)?;
    write("depth.txt", &depth_list)?;
    write_camera_file(&root.join(CAMERA_FILE), &first.intrinsics, first.exposure)?;
    if let Some(gt) = groundtruth {
        write_trajectory(&root.join("groundtruth.txt"), gt)?;
    }
    Ok(())
}
