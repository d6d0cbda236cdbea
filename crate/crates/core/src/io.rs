//! On-disk dataset layout.
//!
//! ```text
//! <dir>/images/000.png       8-bit RGB
//! <dir>/depth/000.pfm        optional ground-truth along-ray depth (0 = invalid)
//! <dir>/poses_bounds.bin     17 little-endian f64 per view
//! <dir>/sparse_depth.csv     view,x,y,depth
//! <dir>/split.txt            "train i j ..." / "test k l ..."
//! ```
//!
//! Each pose record is a row-major 3x5 matrix `[R | t | (h, w, focal)]`
//! (camera-to-world, x right / y down / z forward) followed by `near, far`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use nalgebra::{Matrix3, Vector3};

use crate::camera::{CameraView, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::raster::{DepthMap, Image};
use crate::scene::{Dataset, SparsePoint};

const POSE_RECORD: usize = 17;

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let buf = ImageBuffer::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let p = image.get(x as usize, y as usize);
        Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img
        .pixels()
        .map(|p| p.0.map(|c| c as f64 / 255.0))
        .collect();
    Image::from_pixels(w, h, px)
}

/// Single-channel little-endian PFM; invalid depths are stored as 0.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    // PFM rows run bottom to top
    for y in (0..h).rev() {
        for x in 0..w {
            let v = depth.get(x, y).unwrap_or(0.0) as f32;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::new();
    let mut pos = 0;
    while header.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| data_err(path, "truncated PFM header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| data_err(path, "PFM header is not text"))?
            .trim()
            .to_string();
        pos += end + 1;
        if !line.is_empty() {
            header.push(line);
        }
    }
    if header[0] != "Pf" {
        return Err(data_err(path, format!("expected grayscale PFM, found {:?}", header[0])));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| data_err(path, "bad PFM size")))
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(data_err(path, "bad PFM size"));
    };
    let scale: f64 = header[2].parse().map_err(|_| data_err(path, "bad PFM scale"))?;
    let body = &bytes[pos..];
    if body.len() != 4 * w * h {
        return Err(data_err(path, format!("expected {} bytes of PFM data, got {}", 4 * w * h, body.len())));
    }
    let mut values = vec![0.0; w * h];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, y) = (i % w, h - 1 - i / w);
        values[y * w + x] = v as f64;
    }
    DepthMap::from_values(w, h, values)
}

fn pose_record(view: &CameraView, near: f64, far: f64) -> [f64; POSE_RECORD] {
    let r = view.pose.rotation();
    let t = view.pose.translation();
    let i = &view.intrinsics;
    let hwf = [i.height as f64, i.width as f64, i.fx];
    let mut rec = [0.0; POSE_RECORD];
    for row in 0..3 {
        rec[row * 5] = r[(row, 0)];
        rec[row * 5 + 1] = r[(row, 1)];
        rec[row * 5 + 2] = r[(row, 2)];
        rec[row * 5 + 3] = t[row];
        rec[row * 5 + 4] = hwf[row];
    }
    rec[15] = near;
    rec[16] = far;
    rec
}

/// Parses one pose record into intrinsics (centered principal point), pose and bounds.
fn parse_record(rec: &[f64], path: &Path, index: usize) -> Result<(Intrinsics, Pose, f64, f64)> {
    let m = |r: usize, c: usize| rec[r * 5 + c];
    let rot = Matrix3::new(m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2), m(2, 0), m(2, 1), m(2, 2));
    let t = Vector3::new(m(0, 3), m(1, 3), m(2, 3));
    let (h, w, f) = (m(0, 4), m(1, 4), m(2, 4));
    let bad = |e: Error| data_err(path, format!("view {index}: {e}"));
    let pose = Pose::new(rot, t).map_err(bad)?;
    if h.fract() != 0.0 || w.fract() != 0.0 || h < 1.0 || w < 1.0 {
        return Err(data_err(path, format!("view {index}: non-integer image size {w}x{h}")));
    }
    let intr = Intrinsics::centered(f, w as usize, h as usize).map_err(bad)?;
    Ok((intr, pose, rec[15], rec[16]))
}

pub fn write_poses_bounds(path: &Path, views: &[CameraView], near: f64, far: f64) -> Result<()> {
    let mut out = Vec::with_capacity(views.len() * POSE_RECORD * 8);
    for v in views {
        for x in pose_record(v, near, far) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_poses_bounds(path: &Path) -> Result<Vec<(Intrinsics, Pose, f64, f64)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % (POSE_RECORD * 8) != 0 {
        return Err(data_err(
            path,
            format!("size {} is not a multiple of {} bytes", bytes.len(), POSE_RECORD * 8),
        ));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    vals.chunks_exact(POSE_RECORD)
        .enumerate()
        .map(|(i, rec)| parse_record(rec, path, i))
        .collect()
}

pub fn write_sparse_depth(path: &Path, points: &[SparsePoint]) -> Result<()> {
    let mut out = String::from("view,x,y,depth\n");
    for p in points {
        out.push_str(&format!("{},{},{},{:e}\n", p.view, p.x, p.y, p.depth));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_sparse_depth(path: &Path) -> Result<Vec<SparsePoint>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if n == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || data_err(path, format!("line {}: expected view,x,y,depth", n + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(SparsePoint {
            view: f[0].parse().map_err(|_| bad())?,
            x: f[1].parse().map_err(|_| bad())?,
            y: f[2].parse().map_err(|_| bad())?,
            depth: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Reads a `train ...` / `test ...` split file.
pub fn read_split(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut train = None;
    let mut test = None;
    for line in text.lines() {
        let mut toks = line.split_whitespace();
        let Some(key) = toks.next() else { continue };
        let ids: Vec<usize> = toks
            .map(|t| t.parse().map_err(|_| data_err(path, format!("bad view index {t:?}"))))
            .collect::<Result<_>>()?;
        match key {
            "train" => train = Some(ids),
            "test" => test = Some(ids),
            other => return Err(data_err(path, format!("unknown split {other:?}"))),
        }
    }
    Ok((
        train.ok_or_else(|| data_err(path, "missing train line"))?,
        test.unwrap_or_default(),
    ))
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:03}.png"))
}

fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("depth").join(format!("{i:03}.pfm"))
}

/// Writes `dataset` under `dir`, creating it. Refuses to touch a non-empty
/// directory unless `force`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    for sub in ["images", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, v) in dataset.views.iter().enumerate() {
        write_png(&image_path(dir, i), &v.image)?;
        if let Some(d) = &v.depth {
            write_pfm(&depth_path(dir, i), d)?;
        }
    }
    write_poses_bounds(&dir.join("poses_bounds.bin"), &dataset.views, dataset.near, dataset.far)?;
    write_sparse_depth(&dir.join("sparse_depth.csv"), &dataset.sparse_depth)?;
    write_split(&dir.join("split.txt"), &dataset.train, &dataset.test)
}

pub fn write_split(path: &Path, train: &[usize], test: &[usize]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "train {}\ntest {}", join(train), join(test)).map_err(|e| Error::io(path, e))
}

/// Held-out every eighth frame; `n_train` views chosen evenly from the rest.
pub fn llff_split(count: usize, n_train: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let test: Vec<usize> = (0..count).step_by(8).collect();
    let pool: Vec<usize> = (0..count).filter(|i| i % 8 != 0).collect();
    if n_train == 0 || n_train > pool.len() {
        return Err(Error::Config(format!(
            "train.n_train = {n_train} must lie in 1..={} for {count} views",
            pool.len()
        )));
    }
    let train = (0..n_train)
        .map(|k| pool[((k as f64 + 0.5) * pool.len() as f64 / n_train as f64) as usize])
        .collect();
    Ok((train, test))
}

/// Loads a dataset directory. An explicit `split.txt` wins; otherwise the
/// every-eighth-frame held-out split is used with `n_train` training views.
pub fn load_dataset(dir: &Path, n_train: Option<usize>) -> Result<Dataset> {
    let poses = read_poses_bounds(&dir.join("poses_bounds.bin"))?;
    let images_dir = dir.join("images");
    let n_images = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .count();
    if n_images != poses.len() {
        return Err(data_err(
            &images_dir,
            format!("{n_images} images but {} poses in poses_bounds.bin", poses.len()),
        ));
    }
    let mut views = Vec::with_capacity(poses.len());
    let mut near = f64::INFINITY;
    let mut far = f64::NEG_INFINITY;
    for (i, (intr, pose, n, f)) in poses.into_iter().enumerate() {
        let path = image_path(dir, i);
        let image = read_png(&path)?;
        let mut view = CameraView::new(intr, pose, image).map_err(|e| data_err(&path, e))?;
        let dp = depth_path(dir, i);
        if dp.exists() {
            view.depth = Some(read_pfm(&dp)?);
        }
        views.push(view);
        near = near.min(n);
        far = far.max(f);
    }
    let split_path = dir.join("split.txt");
    let (mut train, test) = if split_path.exists() {
        read_split(&split_path)?
    } else {
        llff_split(views.len(), n_train.unwrap_or(3))?
    };
    if let Some(n) = n_train {
        if split_path.exists() {
            if n > train.len() {
                return Err(Error::Config(format!(
                    "train.n_train = {n} exceeds the {} training views listed in split.txt",
                    train.len()
                )));
            }
            train.truncate(n);
        }
    }
    let sparse_path = dir.join("sparse_depth.csv");
    let sparse_depth = if sparse_path.exists() {
        read_sparse_depth(&sparse_path)?
    } else {
        Vec::new()
    };
    let dataset = Dataset {
        views,
        sparse_depth,
        train,
        test,
        near,
        far,
    };
    dataset.validate()?;
    Ok(dataset)
}
