//! CSV track and IMU files, and key=value intrinsics files.
//!
//! Floats are written with 17 significant digits so that a write/read cycle
//! reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mean_vector, CameraIntrinsics, Track, TrackId, TrackObservation};

pub const TRACKS_HEADER: [&str; 4] = ["track_id", "t", "u", "v"];
pub const IMU_HEADER: [&str; 4] = ["t", "wx", "wy", "wz"];
pub const IMU_ACCEL_HEADER: [&str; 3] = ["ax", "ay", "az"];

/// `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| io_err(path, e))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| format!("line {}: ", p.line())).unwrap_or_default();
    Error::InvalidInput(format!("{line}{e}"))
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<usize> {
    let header = reader.headers().map_err(csv_err)?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::InvalidInput(format!(
            "header {:?} does not start with {:?}",
            got,
            expected.join(",")
        )));
    }
    Ok(got.len())
}

#[derive(Debug, Deserialize)]
struct TrackRecord {
    track_id: u64,
    t: f64,
    u: f64,
    v: f64,
}

/// Tracks ordered by id, each sorted by time.
pub fn read_tracks_from(reader: impl Read) -> Result<Vec<Track>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let width = check_header(&mut rdr, &TRACKS_HEADER)?;
    if width != TRACKS_HEADER.len() {
        return Err(Error::InvalidInput(format!("tracks file has {width} columns, expected 4")));
    }
    let mut groups: BTreeMap<u64, Vec<TrackObservation>> = BTreeMap::new();
    for rec in rdr.deserialize::<TrackRecord>() {
        let r = rec.map_err(csv_err)?;
        if ![r.t, r.u, r.v].iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value in track {}", r.track_id)));
        }
        groups.entry(r.track_id).or_default().push(TrackObservation::new(r.u, r.v, r.t));
    }
    Ok(groups
        .into_iter()
        .map(|(id, obs)| Track::new(TrackId(id), obs))
        .collect())
}

pub fn read_tracks(path: &Path) -> Result<Vec<Track>> {
    read_tracks_from(open(path)?).map_err(|e| match e {
        Error::InvalidInput(m) => io_err(path, m),
        e => e,
    })
}

pub fn write_tracks_to(mut w: impl Write, tracks: &[Track]) -> std::io::Result<()> {
    writeln!(w, "{}", TRACKS_HEADER.join(","))?;
    for tr in tracks {
        for o in &tr.observations {
            writeln!(w, "{},{},{},{}", tr.id, fmt_f64(o.t), fmt_f64(o.x.x), fmt_f64(o.x.y))?;
        }
    }
    Ok(())
}

pub fn write_tracks(path: &Path, tracks: &[Track]) -> Result<()> {
    write_tracks_to(create(path)?, tracks).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImuSample {
    pub t: f64,
    /// rad/s
    pub omega: Vector3<f64>,
    /// m/s^2
    pub accel: Option<Vector3<f64>>,
}

/// Samples with strictly increasing timestamps; accelerations present when
/// the file has the optional `ax,ay,az` columns.
pub fn read_imu_from(reader: impl Read) -> Result<Vec<ImuSample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let width = check_header(&mut rdr, &IMU_HEADER)?;
    let with_accel = match width {
        4 => false,
        7 => {
            let header = rdr.headers().map_err(csv_err)?;
            let tail: Vec<&str> = header.iter().skip(4).map(str::trim).collect();
            if tail != IMU_ACCEL_HEADER {
                return Err(Error::InvalidInput(format!("unexpected IMU columns {tail:?}")));
            }
            true
        }
        n => return Err(Error::InvalidInput(format!("IMU file has {n} columns, expected 4 or 7"))),
    };
    let mut out: Vec<ImuSample> = Vec::new();
    for rec in rdr.deserialize::<Vec<f64>>() {
        let r = rec.map_err(csv_err)?;
        if !r.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("non-finite IMU value".into()));
        }
        let s = ImuSample {
            t: r[0],
            omega: Vector3::new(r[1], r[2], r[3]),
            accel: with_accel.then(|| Vector3::new(r[4], r[5], r[6])),
        };
        if let Some(prev) = out.last() {
            if !(s.t > prev.t) {
                return Err(Error::InvalidInput(format!(
                    "IMU timestamps must increase strictly ({} after {})",
                    s.t, prev.t
                )));
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    read_imu_from(open(path)?).map_err(|e| match e {
        Error::InvalidInput(m) => io_err(path, m),
        e => e,
    })
}

pub fn write_imu_to(mut w: impl Write, samples: &[ImuSample]) -> std::io::Result<()> {
    let with_accel = samples.first().is_some_and(|s| s.accel.is_some());
    let mut header = IMU_HEADER.to_vec();
    if with_accel {
        header.extend(IMU_ACCEL_HEADER);
    }
    writeln!(w, "{}", header.join(","))?;
    for s in samples {
        let mut cols = vec![fmt_f64(s.t)];
        cols.extend(s.omega.iter().map(|&x| fmt_f64(x)));
        if with_accel {
            let a = s.accel.unwrap_or_else(Vector3::zeros);
            cols.extend(a.iter().map(|&x| fmt_f64(x)));
        }
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<()> {
    write_imu_to(create(path)?, samples).map_err(|e| io_err(path, e))
}

/// Mean angular rate, and mean acceleration when every sample has one, over
/// samples with `t0 <= t <= t1`.
pub fn average_imu(samples: &[ImuSample], t0: f64, t1: f64) -> Option<(Vector3<f64>, Option<Vector3<f64>>)> {
    let inside: Vec<&ImuSample> = samples.iter().filter(|s| s.t >= t0 && s.t <= t1).collect();
    let omegas: Vec<Vector3<f64>> = inside.iter().map(|s| s.omega).collect();
    let omega = mean_vector(&omegas)?;
    let accels: Option<Vec<Vector3<f64>>> = inside.iter().map(|s| s.accel).collect();
    Some((omega, accels.and_then(|a| mean_vector(&a))))
}

/// Parses `key = value` lines with keys `fx fy cx cy width height`. Blank
/// lines and `#` comments are ignored.
pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics> {
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("line {}: expected key=value", n + 1)))?;
        if map.insert(k.trim(), v.trim()).is_some() {
            return Err(Error::InvalidInput(format!("line {}: duplicate key {}", n + 1, k.trim())));
        }
    }
    let get = |k: &str| -> Result<&str> {
        map.get(k)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("missing intrinsics key {k}")))
    };
    let float = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|e| Error::InvalidInput(format!("intrinsics {k}: {e}")))
    };
    let int = |k: &str| -> Result<u32> {
        get(k)?
            .parse()
            .map_err(|e| Error::InvalidInput(format!("intrinsics {k}: {e}")))
    };
    if let Some(extra) = map
        .keys()
        .find(|k| !["fx", "fy", "cx", "cy", "width", "height"].contains(k))
    {
        return Err(Error::InvalidInput(format!("unknown intrinsics key {extra}")));
    }
    CameraIntrinsics::new(float("fx")?, float("fy")?, float("cx")?, float("cy")?, int("width")?, int("height")?)
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(|e| io_err(path, e))?;
    parse_intrinsics(&text).map_err(|e| match e {
        Error::InvalidInput(m) => io_err(path, m),
        e => e,
    })
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\n",
        fmt_f64(k.fx),
        fmt_f64(k.fy),
        fmt_f64(k.cx),
        fmt_f64(k.cy),
        k.width,
        k.height
    )
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    std::fs::write(path, format_intrinsics(k)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tracks_group_and_sort() {
        let text = "track_id,t,u,v\n2,0.5,1,2\n1,0.3,3,4\n2,0.1,5,6\n";
        let tracks = read_tracks_from(text.as_bytes()).unwrap();
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].id, TrackId(1));
        assert_eq!(tracks[1].observations[0].t, 0.1);
        assert_eq!(tracks[1].observations[1].x.x, 1.0);
    }

    #[test]
    fn bad_track_files_rejected() {
        assert!(read_tracks_from("id,t,u,v\n1,0,0,0\n".as_bytes()).is_err());
        assert!(read_tracks_from("track_id,t,u,v\n1,0,zero,0\n".as_bytes()).is_err());
        assert!(read_tracks_from("track_id,t,u,v\n1,NaN,0,0\n".as_bytes()).is_err());
    }

    #[test]
    fn imu_with_and_without_accel() {
        let a = read_imu_from("t,wx,wy,wz\n0,1,2,3\n1,4,5,6\n".as_bytes()).unwrap();
        assert_eq!(a[1].omega, Vector3::new(4.0, 5.0, 6.0));
        assert!(a[0].accel.is_none());
        let b = read_imu_from("t,wx,wy,wz,ax,ay,az\n0,1,2,3,0,0,9.8\n".as_bytes()).unwrap();
        assert_eq!(b[0].accel, Some(Vector3::new(0.0, 0.0, 9.8)));
        assert!(read_imu_from("t,wx,wy,wz\n1,0,0,0\n1,0,0,0\n".as_bytes()).is_err());
        assert!(read_imu_from("t,wx,wy\n1,0,0\n".as_bytes()).is_err());
    }

    #[test]
    fn imu_average_inside_window() {
        let s: Vec<ImuSample> = (0..5)
            .map(|i| ImuSample {
                t: i as f64,
                omega: Vector3::new(i as f64, 0.0, 0.0),
                accel: None,
            })
            .collect();
        let (w, a) = average_imu(&s, 1.0, 3.0).unwrap();
        assert_eq!(w.x, 2.0);
        assert!(a.is_none());
        assert!(average_imu(&s, 10.0, 11.0).is_none());
    }

    #[test]
    fn intrinsics_parse() {
        let k = parse_intrinsics("# cam\nfx=320\nfy = 321\ncx=319.5\ncy=239.5 # center\nwidth=640\nheight=480\n").unwrap();
        assert_eq!((k.fx, k.fy, k.width), (320.0, 321.0, 640));
        assert!(parse_intrinsics("fx=1\n").is_err());
        assert!(parse_intrinsics("fx=320\nfy=320\ncx=0\ncy=0\nwidth=1\nheight=1\nskew=0\n").is_err());
        let back = parse_intrinsics(&format_intrinsics(&k)).unwrap();
        assert_eq!(back, k);
    }

    proptest! {
        #[test]
        fn tracks_round_trip_bitwise(
            rows in proptest::collection::vec((0u64..5, -1e3f64..1e3, -1e4f64..1e4, -1e4f64..1e4), 1..40)
        ) {
            let mut groups: BTreeMap<u64, Vec<TrackObservation>> = BTreeMap::new();
            for (id, t, u, v) in rows {
                groups.entry(id).or_default().push(TrackObservation::new(u, v, t));
            }
            let tracks: Vec<Track> = groups.into_iter().map(|(id, o)| Track::new(TrackId(id), o)).collect();
            let mut buf = Vec::new();
            write_tracks_to(&mut buf, &tracks).unwrap();
            let back = read_tracks_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back, tracks);
        }

        #[test]
        fn imu_round_trip_bitwise(vals in proptest::collection::vec(proptest::array::uniform6(-1e3f64..1e3), 1..20)) {
            let samples: Vec<ImuSample> = vals
                .iter()
                .enumerate()
                .map(|(i, v)| ImuSample {
                    t: i as f64 * 0.001 + v[0] * 1e-9,
                    omega: Vector3::new(v[1], v[2], v[3]),
                    accel: Some(Vector3::new(v[4], v[5], v[0])),
                })
                .collect();
            let mut buf = Vec::new();
            write_imu_to(&mut buf, &samples).unwrap();
            prop_assert_eq!(read_imu_from(buf.as_slice()).unwrap(), samples);
        }
    }
}
