use std::fs;
use std::path::Path;

use super::IoError;
use crate::streamline::{Streamline, Tractogram};

// Track-file layout: ASCII header opened by the line `mrtrix tracks`,
// `key: value` lines including `datatype: Float32LE`, `count: <n>` and
// `file: . <offset>` (absolute byte position of the binary section), closed
// by `END\n`. The binary section is consecutive (x, y, z) f32-LE triplets;
// each streamline ends with a NaN triplet and the stream ends with a single
// Inf triplet. Coordinates are world millimeters.

const MAGIC: &str = "mrtrix tracks";

/// Writes a tractogram; streamline coordinates are converted from voxel
/// units to world millimeters via the voxel size.
pub fn write_tck(path: &Path, tractogram: &Tractogram, voxel_size: [f64; 3]) -> Result<(), IoError> {
    for sl in &tractogram.streamlines {
        for p in &sl.points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(IoError::Tck(format!("non-finite coordinate {p:?}")));
            }
        }
    }
    let head = |offset: usize| {
        format!(
            "{MAGIC}\ndatatype: Float32LE\ncount: {}\nfile: . {}\nEND\n",
            tractogram.len(),
            offset
        )
    };
    // The offset names the absolute start of binary data, which depends on
    // its own digit count; iterate to the fixed point.
    let mut offset = head(0).len();
    loop {
        let next = head(offset).len();
        if next == offset {
            break;
        }
        offset = next;
    }
    let header = head(offset);

    let mut bytes = Vec::new();
    bytes.extend_from_slice(header.as_bytes());
    let push = |x: f32, y: f32, z: f32, bytes: &mut Vec<u8>| {
        bytes.extend_from_slice(&x.to_le_bytes());
        bytes.extend_from_slice(&y.to_le_bytes());
        bytes.extend_from_slice(&z.to_le_bytes());
    };
    for sl in &tractogram.streamlines {
        for p in &sl.points {
            push(
                (p[0] * voxel_size[0]) as f32,
                (p[1] * voxel_size[1]) as f32,
                (p[2] * voxel_size[2]) as f32,
                &mut bytes,
            );
        }
        push(f32::NAN, f32::NAN, f32::NAN, &mut bytes);
    }
    push(f32::INFINITY, f32::INFINITY, f32::INFINITY, &mut bytes);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a track file, converting world millimeters back to voxel units.
pub fn read_tck(path: &Path, voxel_size: [f64; 3]) -> Result<Tractogram, IoError> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| IoError::Tck(msg.to_string());

    // Header is ASCII up to the END line.
    let mut line_start = 0usize;
    let mut first = true;
    let mut count: Option<usize> = None;
    let mut offset: Option<usize> = None;
    let mut datatype: Option<String> = None;
    let mut header_end = None;
    while line_start < bytes.len() {
        let rel = bytes[line_start..].iter().position(|&b| b == b'\n');
        let Some(rel) = rel else { break };
        let line = std::str::from_utf8(&bytes[line_start..line_start + rel])
            .map_err(|_| bad("non-UTF8 header line"))?;
        line_start += rel + 1;
        if first {
            if line != MAGIC {
                return Err(bad(&format!("missing magic line, got '{line}'")));
            }
            first = false;
            continue;
        }
        if line == "END" {
            header_end = Some(line_start);
            break;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(bad(&format!("malformed header line '{line}'")));
        };
        let value = value.trim();
        match key.trim() {
            "datatype" => datatype = Some(value.to_string()),
            "count" => {
                count =
                    Some(value.parse().map_err(|_| bad(&format!("bad count '{value}'")))?)
            }
            "file" => {
                let rest = value
                    .strip_prefix(". ")
                    .ok_or_else(|| bad(&format!("bad file field '{value}'")))?;
                offset =
                    Some(rest.parse().map_err(|_| bad(&format!("bad offset '{rest}'")))?)
            }
            _ => {} // unknown keys are allowed in the header
        }
    }
    if first {
        return Err(bad("empty file"));
    }
    header_end.ok_or_else(|| bad("header END line missing"))?;
    let datatype = datatype.ok_or_else(|| bad("datatype line missing"))?;
    if datatype != "Float32LE" {
        return Err(bad(&format!("unsupported datatype '{datatype}'")));
    }
    let count = count.ok_or_else(|| bad("count line missing"))?;
    let offset = offset.ok_or_else(|| bad("file offset line missing"))?;
    if offset > bytes.len() {
        return Err(bad("file offset beyond end of file"));
    }

    let payload = &bytes[offset..];
    if payload.len() % 12 != 0 {
        return Err(bad("binary section is not whole triplets"));
    }
    let mut streamlines = Vec::new();
    let mut current: Vec<[f64; 3]> = Vec::new();
    let mut terminated = false;
    for t in payload.chunks_exact(12) {
        let x = f32::from_le_bytes([t[0], t[1], t[2], t[3]]);
        let y = f32::from_le_bytes([t[4], t[5], t[6], t[7]]);
        let z = f32::from_le_bytes([t[8], t[9], t[10], t[11]]);
        if x.is_infinite() && y.is_infinite() && z.is_infinite() {
            if !current.is_empty() {
                return Err(bad("stream terminator inside an unterminated streamline"));
            }
            terminated = true;
            break;
        }
        if x.is_nan() && y.is_nan() && z.is_nan() {
            streamlines.push(Streamline::new(std::mem::take(&mut current)));
            continue;
        }
        current.push([
            x as f64 / voxel_size[0],
            y as f64 / voxel_size[1],
            z as f64 / voxel_size[2],
        ]);
    }
    if !terminated {
        return Err(bad("stream terminator (Inf triplet) missing"));
    }
    if streamlines.len() != count {
        return Err(bad(&format!(
            "header count {count} does not match {} streamlines in payload",
            streamlines.len()
        )));
    }
    Ok(Tractogram::new(streamlines))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use std::path::PathBuf;

    fn tmp(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ddtrack-tck-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{tag}.tck"))
    }

    #[test]
    fn empty_tractogram_layout() {
        let path = tmp("empty");
        write_tck(&path, &Tractogram::default(), [1.0; 3]).unwrap();
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("mrtrix tracks\n"));
        assert!(text.contains("count: 0\n"));
        // Lone Inf terminator after the header.
        let header_len = bytes.len() - 12;
        let inf = f32::from_le_bytes(bytes[header_len..header_len + 4].try_into().unwrap());
        assert!(inf.is_infinite());
        let back = read_tck(&path, [1.0; 3]).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn two_point_streamline_payload_is_twelve_values() {
        let path = tmp("two");
        let t = Tractogram::new(vec![Streamline::new(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])]);
        write_tck(&path, &t, [1.0; 3]).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_end = String::from_utf8_lossy(&bytes).find("END\n").unwrap() + 4;
        // 2 points + NaN triplet + Inf triplet = 4 triplets = 12 f32 values.
        assert_eq!(bytes.len() - header_end, 12 * 4);
    }

    #[test]
    fn offset_points_at_binary_start() {
        let path = tmp("offset");
        let t = Tractogram::new(vec![Streamline::new(vec![[1.5, 0.0, 0.0]])]);
        write_tck(&path, &t, [2.0, 2.0, 2.0]).unwrap();
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let line = text.lines().find(|l| l.starts_with("file:")).unwrap();
        let offset: usize = line.trim_start_matches("file: . ").parse().unwrap();
        let x = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        assert_eq!(x, 3.0); // 1.5 voxels * 2 mm
    }

    #[test]
    fn roundtrip_within_f32_quantization() {
        let path = tmp("rt");
        let mut rng = Prng::new(77);
        let mut streamlines = Vec::new();
        for _ in 0..100 {
            let n = 2 + rng.uniform_usize(30);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.uniform_in(0.0, 40.0), rng.uniform_in(0.0, 40.0), rng.uniform_in(0.0, 40.0)])
                .collect();
            streamlines.push(Streamline::new(pts));
        }
        let t = Tractogram::new(streamlines);
        let vs = [2.0, 2.0, 2.0];
        write_tck(&path, &t, vs).unwrap();
        let back = read_tck(&path, vs).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in t.streamlines.iter().zip(&back.streamlines) {
            assert_eq!(a.len(), b.len());
            for (p, q) in a.points.iter().zip(&b.points) {
                for i in 0..3 {
                    // One f32 quantization of the world coordinate.
                    let want = ((p[i] * vs[i]) as f32) as f64 / vs[i];
                    assert_eq!(q[i], want);
                }
            }
        }
    }

    #[test]
    fn malformed_files_rejected() {
        let path = tmp("bad");
        let t = Tractogram::new(vec![Streamline::new(vec![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])]);
        write_tck(&path, &t, [1.0; 3]).unwrap();
        let good = fs::read(&path).unwrap();
        // Patch only the ASCII header, keeping the binary section intact.
        let header_len = good.windows(4).position(|w| w == b"END\n").unwrap() + 4;
        let patch_header = |from: &str, to: &str| {
            let header = std::str::from_utf8(&good[..header_len]).unwrap().replace(from, to);
            let mut out = header.into_bytes();
            out.extend_from_slice(&good[header_len..]);
            out
        };

        // Missing magic.
        fs::write(&path, &good["mrtrix ".len()..]).unwrap();
        assert!(read_tck(&path, [1.0; 3]).is_err());

        // Missing END (offset still points at the old binary start).
        fs::write(&path, patch_header("END\n", "ENQ\n")).unwrap();
        assert!(read_tck(&path, [1.0; 3]).is_err());

        // Wrong datatype string.
        fs::write(&path, patch_header("Float32LE", "Float32BE")).unwrap();
        assert!(read_tck(&path, [1.0; 3]).is_err());

        // Missing stream terminator.
        fs::write(&path, &good[..good.len() - 12]).unwrap();
        assert!(read_tck(&path, [1.0; 3]).is_err());

        // Count mismatch (same digit count keeps the offset valid).
        fs::write(&path, patch_header("count: 1", "count: 3")).unwrap();
        let err = read_tck(&path, [1.0; 3]).unwrap_err();
        assert!(err.to_string().contains("count"), "{err}");
    }

    #[test]
    fn non_finite_coordinates_rejected_on_write() {
        let path = tmp("nan");
        let t = Tractogram::new(vec![Streamline::new(vec![[f64::NAN, 0.0, 0.0]])]);
        assert!(write_tck(&path, &t, [1.0; 3]).is_err());
    }
}
