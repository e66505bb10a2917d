//! Binary prediction-bundle file read by the `loss` command.
//!
//! All numbers little-endian. Layout:
//!
//! ```text
//! "RDLB"  u32 version (1)  u32 timesteps H  u32 flags (1 simg, 2 gimg, 4 occ)
//! H × { pred pose f64×6, pred gripper prob f64, target pose f64×6, target gripper f64 }
//! for simg then gimg, when flagged:
//!     u32 height, u32 width, u32 channels
//!     H × { pred f64×(h·w·c), target f64×(h·w·c) }
//! when occ is flagged:
//!     u32 cells
//!     H × { pred cell×{occupied f64 (0/1), pos f64×3, rgb f64×3}, target (same) }
//! ```

use std::io::{self, Read, Write};

use super::{ActionPrediction, ActionTarget, ImageTensor, OccupancyFrame, PredictionBundle};

const MAGIC: &[u8; 4] = b"RDLB";
const VERSION: u32 = 1;
const FLAG_SIMG: u32 = 1;
const FLAG_GIMG: u32 = 2;
const FLAG_OCC: u32 = 4;

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn len_u32(n: usize, what: &str) -> io::Result<u32> {
    u32::try_from(n).map_err(|_| bad(format!("{what} does not fit in u32")))
}

pub fn write_bundle<W: Write>(mut w: W, bundle: &PredictionBundle) -> io::Result<()> {
    let h = bundle.actions.len();
    if bundle.action_targets.len() != h {
        return Err(bad("prediction and target action counts differ"));
    }
    let mut flags = 0;
    if bundle.static_images.is_some() {
        flags |= FLAG_SIMG;
    }
    if bundle.wrist_images.is_some() {
        flags |= FLAG_GIMG;
    }
    if bundle.occupancy.is_some() {
        flags |= FLAG_OCC;
    }
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, len_u32(h, "timesteps")?)?;
    put_u32(&mut w, flags)?;
    for (p, t) in bundle.actions.iter().zip(&bundle.action_targets) {
        put_f64s(&mut w, &p.pose)?;
        put_f64s(&mut w, &[p.gripper_prob])?;
        put_f64s(&mut w, &t.pose)?;
        put_f64s(&mut w, &[t.gripper])?;
    }
    for (pred, target) in [&bundle.static_images, &bundle.wrist_images]
        .into_iter()
        .flatten()
    {
        if pred.len() != h || target.len() != h {
            return Err(bad("image frame count differs from timesteps"));
        }
        let shape = pred
            .first()
            .map(|f| (f.height, f.width, f.channels))
            .unwrap_or((0, 0, 0));
        put_u32(&mut w, len_u32(shape.0, "height")?)?;
        put_u32(&mut w, len_u32(shape.1, "width")?)?;
        put_u32(&mut w, len_u32(shape.2, "channels")?)?;
        for (p, t) in pred.iter().zip(target) {
            for f in [p, t] {
                if (f.height, f.width, f.channels) != shape || f.data.len() != shape.0 * shape.1 * shape.2 {
                    return Err(bad("image frames differ in shape"));
                }
                put_f64s(&mut w, &f.data)?;
            }
        }
    }
    if let Some((pred, target)) = &bundle.occupancy {
        if pred.len() != h || target.len() != h {
            return Err(bad("occupancy frame count differs from timesteps"));
        }
        let cells = pred.first().map(OccupancyFrame::len).unwrap_or(0);
        put_u32(&mut w, len_u32(cells, "cells")?)?;
        for (p, t) in pred.iter().zip(target) {
            for f in [p, t] {
                if f.occupied.len() != cells || f.pos.len() != cells || f.rgb.len() != cells {
                    return Err(bad("occupancy frames differ in cell count"));
                }
                for i in 0..cells {
                    put_f64s(&mut w, &[if f.occupied[i] { 1.0 } else { 0.0 }])?;
                    put_f64s(&mut w, &f.pos[i])?;
                    put_f64s(&mut w, &f.rgb[i])?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_bundle<R: Read>(mut r: R) -> io::Result<PredictionBundle> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a prediction bundle (bad magic)"));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported bundle version {version}")));
    }
    let h = get_u32(&mut r)? as usize;
    let flags = get_u32(&mut r)?;
    if flags & !(FLAG_SIMG | FLAG_GIMG | FLAG_OCC) != 0 {
        return Err(bad(format!("unknown flags {flags:#x}")));
    }
    let mut bundle = PredictionBundle::default();
    for _ in 0..h {
        let v = get_f64s(&mut r, 14)?;
        bundle.actions.push(ActionPrediction {
            pose: v[0..6].try_into().expect("6 values"),
            gripper_prob: v[6],
        });
        bundle.action_targets.push(ActionTarget {
            pose: v[7..13].try_into().expect("6 values"),
            gripper: v[13],
        });
    }
    let read_images = |r: &mut R| -> io::Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
        let (height, width, channels) = (get_u32(r)? as usize, get_u32(r)? as usize, get_u32(r)? as usize);
        let n = height * width * channels;
        let mut pred = Vec::with_capacity(h);
        let mut target = Vec::with_capacity(h);
        for _ in 0..h {
            pred.push(ImageTensor { height, width, channels, data: get_f64s(r, n)? });
            target.push(ImageTensor { height, width, channels, data: get_f64s(r, n)? });
        }
        Ok((pred, target))
    };
    if flags & FLAG_SIMG != 0 {
        bundle.static_images = Some(read_images(&mut r)?);
    }
    if flags & FLAG_GIMG != 0 {
        bundle.wrist_images = Some(read_images(&mut r)?);
    }
    if flags & FLAG_OCC != 0 {
        let cells = get_u32(&mut r)? as usize;
        let read_frame = |r: &mut R| -> io::Result<OccupancyFrame> {
            let v = get_f64s(r, cells * 7)?;
            let mut f = OccupancyFrame {
                occupied: Vec::with_capacity(cells),
                pos: Vec::with_capacity(cells),
                rgb: Vec::with_capacity(cells),
            };
            for c in v.chunks_exact(7) {
                f.occupied.push(match c[0] {
                    0.0 => false,
                    1.0 => true,
                    x => return Err(bad(format!("occupancy flag {x} is not 0 or 1"))),
                });
                f.pos.push([c[1], c[2], c[3]]);
                f.rgb.push([c[4], c[5], c[6]]);
            }
            Ok(f)
        };
        let mut pred = Vec::with_capacity(h);
        let mut target = Vec::with_capacity(h);
        for _ in 0..h {
            pred.push(read_frame(&mut r)?);
            target.push(read_frame(&mut r)?);
        }
        bundle.occupancy = Some((pred, target));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after bundle"));
    }
    Ok(bundle)
}
