//! Point clouds, per-point anomaly labels, and their text file formats.
//!
//! Supported inputs:
//! - ASCII XYZ: one whitespace-separated `a b c` triple per line, `#` comments.
//! - ASCII PLY: a `vertex` element whose only properties are float `x`, `y`, `z`.
//! - Labels: one `label` or `label region_id` pair of integers per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// An ordered set of 3D points. Index `j` is the point's identity everywhere downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::validation("point cloud has no points"));
        }
        if let Some(j) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::validation(format!("point {j} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for i in 0..3 {
                c[i] += p[i];
            }
        }
        c.map(|v| v / n)
    }

    /// Centre on the centroid and scale uniformly so the largest absolute
    /// coordinate is 1. Degenerate clouds (all points coincident) collapse to
    /// the origin.
    pub fn normalized(&self) -> PointCloud {
        let c = self.centroid();
        let mut points: Vec<Point3> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let max_abs = points
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > 0.0 {
            for p in &mut points {
                for v in p.iter_mut() {
                    *v /= max_abs;
                }
            }
        } else {
            points.iter_mut().for_each(|p| *p = [0.0; 3]);
        }
        PointCloud { points }
    }
}

/// Free-function form of [`PointCloud::normalized`].
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    cloud.normalized()
}

/// Binary per-point anomaly labels, optionally with instance region ids (0 = normal).
#[derive(Debug, Clone, PartialEq)]
pub struct PointLabels {
    labels: Vec<u8>,
    region_ids: Option<Vec<u32>>,
}

impl PointLabels {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some(j) = labels.iter().position(|&l| l > 1) {
            return Err(Error::validation(format!(
                "label {} at index {j} is outside {{0,1}}",
                labels[j]
            )));
        }
        Ok(Self {
            labels,
            region_ids: None,
        })
    }

    pub fn with_regions(labels: Vec<u8>, region_ids: Vec<u32>) -> Result<Self> {
        let mut out = Self::new(labels)?;
        if region_ids.len() != out.labels.len() {
            return Err(Error::validation(format!(
                "{} region ids for {} labels",
                region_ids.len(),
                out.labels.len()
            )));
        }
        if let Some(j) = out
            .labels
            .iter()
            .zip(&region_ids)
            .position(|(&l, &r)| (l == 1) != (r > 0))
        {
            return Err(Error::validation(format!(
                "index {j}: label {} inconsistent with region id {}",
                out.labels[j], region_ids[j]
            )));
        }
        out.region_ids = Some(region_ids);
        Ok(out)
    }

    /// All-normal labels for `n` points.
    pub fn zeros(n: usize) -> Self {
        Self {
            labels: vec![0; n],
            region_ids: None,
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn region_ids(&self) -> Option<&[u32]> {
        self.region_ids.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_anomalous(&self) -> bool {
        self.labels.contains(&1)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        message: format!("cannot parse '{tok}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.into(),
            line,
            message: format!("non-finite value '{tok}'"),
        });
    }
    Ok(v)
}

/// Load an ASCII XYZ or PLY point cloud; the format is detected from the first line.
pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let points = if text.trim_start().starts_with("ply") {
        parse_ply(path, &text)?
    } else {
        parse_xyz(path, &text)?
    };
    if points.is_empty() {
        return Err(Error::format(path, "file contains no points"));
    }
    PointCloud::new(points)
}

fn parse_xyz(path: &Path, text: &str) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("expected 3 columns, found {}", toks.len()),
            });
        }
        let mut p = [0.0; 3];
        for (c, tok) in p.iter_mut().zip(&toks) {
            *c = parse_f64(path, i + 1, tok)?;
        }
        points.push(p);
    }
    Ok(points)
}

fn parse_ply(path: &Path, text: &str) -> Result<Vec<Point3>> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;

    for (i, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(perr(i + 1, format!("unsupported PLY format '{other}'")))
            }
            ["element", "vertex", n] => {
                let n = n
                    .parse()
                    .map_err(|_| perr(i + 1, format!("bad vertex count '{n}'")))?;
                vertex_count = Some(n);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => {
                if !matches!(*ty, "float" | "float32" | "double" | "float64") {
                    return Err(perr(i + 1, format!("vertex property '{name}' is not a float")));
                }
                props.push(name.to_string());
            }
            ["property", ..] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(perr(i + 1, format!("unrecognized header line '{raw}'"))),
        }
    }
    if !header_done {
        return Err(Error::format(path, "PLY header has no end_header"));
    }
    let n = vertex_count.ok_or_else(|| Error::format(path, "PLY header has no vertex element"))?;
    if props != ["x", "y", "z"] {
        return Err(Error::format(
            path,
            format!("vertex properties must be exactly x y z, found {props:?}"),
        ));
    }

    let mut points = Vec::with_capacity(n);
    for (i, raw) in lines {
        if points.len() == n {
            break;
        }
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 3 {
            return Err(perr(i + 1, format!("expected 3 columns, found {}", toks.len())));
        }
        let mut p = [0.0; 3];
        for (c, tok) in p.iter_mut().zip(&toks) {
            *c = parse_f64(path, i + 1, tok)?;
        }
        points.push(p);
    }
    if points.len() != n {
        return Err(Error::format(
            path,
            format!("header declares {n} vertices, found {}", points.len()),
        ));
    }
    Ok(points)
}

/// Load labels for a cloud of `n` points.
pub fn load_labels(path: impl AsRef<Path>, n: usize) -> Result<PointLabels> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut labels = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    let mut with_regions: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() || toks.len() > 2 {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("expected 1 or 2 integers, found {}", toks.len()),
            });
        }
        let has_region = toks.len() == 2;
        if *with_regions.get_or_insert(has_region) != has_region {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                message: "region id column present on some lines only".into(),
            });
        }
        let parse_int = |tok: &str| -> Result<u32> {
            tok.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("cannot parse '{tok}' as a non-negative integer"),
            })
        };
        let label = parse_int(toks[0])?;
        if label > 1 {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("label {label} is outside {{0,1}}"),
            });
        }
        labels.push(label as u8);
        if has_region {
            regions.push(parse_int(toks[1])?);
        }
    }
    if labels.len() != n {
        return Err(Error::format(
            path,
            format!("expected {n} labels, found {}", labels.len()),
        ));
    }
    if with_regions == Some(true) {
        PointLabels::with_regions(labels, regions)
            .map_err(|e| Error::format(path, e.to_string()))
    } else {
        PointLabels::new(labels)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Write an ASCII XYZ file. Coordinates use shortest round-trip formatting,
/// so loading the result reproduces the cloud exactly.
pub fn save_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut text = String::with_capacity(cloud.len() * 32);
    for p in cloud.points() {
        text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    write_text(path.as_ref(), &text)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &PointLabels) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 4);
    match labels.region_ids() {
        Some(r) => {
            for (l, id) in labels.labels().iter().zip(r) {
                text.push_str(&format!("{l} {id}\n"));
            }
        }
        None => {
            for l in labels.labels() {
                text.push_str(&format!("{l}\n"));
            }
        }
    }
    write_text(path.as_ref(), &text)
}

pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::TempDir;

    fn write(dir: &TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn xyz_in_file_order() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "a.xyz", "# header\n0 0 0\n1 0 0\n\n0 1 0\n");
        let c = load_point_cloud(&p).unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn ply_cube() {
        let dir = TempDir::new().unwrap();
        let mut body = String::from(
            "ply\nformat ascii 1.0\ncomment cube\nelement vertex 8\nproperty float x\nproperty float y\nproperty float z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n",
        );
        for i in 0..8 {
            body.push_str(&format!("{} {} {}\n", i & 1, (i >> 1) & 1, (i >> 2) & 1));
        }
        let c = load_point_cloud(write(&dir, "cube.ply", &body)).unwrap();
        assert_eq!(c.len(), 8);
        assert_eq!(c.points()[5], [1.0, 0.0, 1.0]);
    }

    #[test]
    fn ply_rejects_extra_vertex_properties() {
        let dir = TempDir::new().unwrap();
        let body = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n0 0 0 1\n";
        assert!(load_point_cloud(write(&dir, "c.ply", body)).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = TempDir::new().unwrap();
        let err = load_point_cloud(write(&dir, "bad.xyz", "1 2\n")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        let dir = TempDir::new().unwrap();
        assert!(load_point_cloud(write(&dir, "e.xyz", "# nothing\n")).is_err());
        let err = load_point_cloud(write(&dir, "n.xyz", "0 0 0\n1 nan 0\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(load_point_cloud(write(&dir, "i.xyz", "inf 0 0\n")).is_err());
    }

    #[test]
    fn labels_plain_and_with_regions() {
        let dir = TempDir::new().unwrap();
        let l = load_labels(write(&dir, "l.txt", "0\n1\n0\n"), 3).unwrap();
        assert_eq!(l.labels(), &[0, 1, 0]);
        assert!(l.region_ids().is_none());

        let l = load_labels(write(&dir, "r.txt", "0 0\n1 3\n"), 2).unwrap();
        assert_eq!(l.labels(), &[0, 1]);
        assert_eq!(l.region_ids(), Some(&[0u32, 3][..]));
    }

    #[test]
    fn label_errors() {
        let dir = TempDir::new().unwrap();
        assert!(load_labels(write(&dir, "a.txt", "0\n1\n"), 3).is_err());
        assert!(load_labels(write(&dir, "b.txt", "0\n2\n"), 2).is_err());
        assert!(load_labels(write(&dir, "c.txt", "1 0\n"), 1).is_err());
        assert!(load_labels(write(&dir, "d.txt", "0 2\n"), 1).is_err());
    }

    #[test]
    fn normalize_cube() {
        let pts: Vec<Point3> = (0..8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        let n = PointCloud::new(pts).unwrap().normalized();
        for p in n.points() {
            for c in p {
                assert!((c.abs() - 1.0).abs() < 1e-15);
            }
        }
        let c = n.centroid();
        assert!(c.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn normalize_single_point() {
        let n = PointCloud::new(vec![[5.0, -2.0, 3.0]]).unwrap().normalized();
        assert_eq!(n.points(), &[[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn zero_points_is_an_error() {
        assert!(PointCloud::new(vec![]).is_err());
    }

    fn cloud_strategy() -> impl Strategy<Value = Vec<Point3>> {
        prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 4..40)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(pts in cloud_strategy()) {
            let once = PointCloud::new(pts).unwrap().normalized();
            let twice = once.normalized();
            for (a, b) in once.points().iter().zip(twice.points()) {
                for i in 0..3 {
                    prop_assert!((a[i] - b[i]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn normalize_preserves_distance_ratios(pts in cloud_strategy()) {
            let orig = PointCloud::new(pts).unwrap();
            let norm = orig.normalized();
            let d0 = dist2(&orig.points()[0], &orig.points()[1]).sqrt();
            prop_assume!(d0 > 1e-6);
            let n0 = dist2(&norm.points()[0], &norm.points()[1]).sqrt();
            for j in 2..orig.len() {
                let r_orig = dist2(&orig.points()[j], &orig.points()[j - 1]).sqrt() / d0;
                let r_norm = dist2(&norm.points()[j], &norm.points()[j - 1]).sqrt() / n0;
                prop_assert!((r_orig - r_norm).abs() < 1e-9);
            }
        }

        #[test]
        fn xyz_round_trip_exact(pts in cloud_strategy()) {
            let dir = TempDir::new().unwrap();
            let path = dir.path().join("c.xyz");
            let cloud = PointCloud::new(pts).unwrap();
            save_xyz(&path, &cloud).unwrap();
            prop_assert_eq!(load_point_cloud(&path).unwrap(), cloud);
        }
    }
}
