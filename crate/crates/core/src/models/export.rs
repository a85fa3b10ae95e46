//! Little-endian binary dump of a [`DtiData`] set.
//!
//! Layout: five `u64` (`n1, n2, n3, N, has_truth`), then `f64` arrays for the
//! gradients (`3N`), `s₀` (`V`), `s` (`V·N`, voxel-major) and, if present,
//! the true tensor field (`6V`).

use std::io::{Read, Write};

use super::dti::{DtiData, Grid, TENSOR_DIM};
use crate::{Error, Result};

fn io_err(e: std::io::Error) -> Error {
    Error::Config(format!("dataset i/o: {e}"))
}

pub fn write_dataset<W: Write>(data: &DtiData, mut w: W) -> Result<()> {
    let has_truth = data.x_true.is_some() as u64;
    for h in [data.grid.dims[0], data.grid.dims[1], data.grid.dims[2], data.n_gradients()] {
        w.write_all(&(h as u64).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&has_truth.to_le_bytes()).map_err(io_err)?;
    let grads = data.gradients.iter().flatten();
    let truth = data.x_true.iter().flatten();
    for v in grads.chain(&data.s0).chain(&data.s).chain(truth) {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut b = [0u8; 8];
    (0..n)
        .map(|_| {
            r.read_exact(&mut b).map_err(io_err)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<DtiData> {
    let mut h = [0usize; 5];
    for v in &mut h {
        *v = usize::try_from(read_u64(&mut r)?)
            .map_err(|_| Error::Config("dataset header overflows usize".into()))?;
    }
    let grid = Grid { dims: [h[0], h[1], h[2]] };
    let nv = grid.n_voxels();
    let n = h[3];
    if h[4] > 1 {
        return Err(Error::Config(format!("bad truth flag {}", h[4])));
    }
    let g = read_f64s(&mut r, 3 * n)?;
    let gradients = g.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let s0 = read_f64s(&mut r, nv)?;
    let s = read_f64s(&mut r, nv * n)?;
    let x_true = if h[4] == 1 { Some(read_f64s(&mut r, TENSOR_DIM * nv)?) } else { None };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io_err)?;
    if !rest.is_empty() {
        return Err(Error::Config(format!("{} trailing bytes after dataset", rest.len())));
    }
    Ok(DtiData { grid, gradients, s0, s, x_true })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let d = DtiData::synthetic([3, 2, 2], 0.3, 5).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (5 + 18 + 12 + 72 + 72));
        assert_eq!(read_dataset(&buf[..]).unwrap(), d);
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
    }
}
