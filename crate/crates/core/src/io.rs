//! Flat binary and text formats.
//!
//! Kernel files (`PSF1`): little-endian magic, `u32 n_x, n_y, n_t`,
//! `f64 dx, dy, dt`, then `f64` values x-fastest.
//!
//! Tensor files (`TEN1`): magic, `u32 rank`, `u32` dims outermost first,
//! then `f64` values row-major (last axis fastest).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, IxDyn};

use crate::error::{Error, Result};
use crate::thermal::{Grid, PsfKernel};

pub const PSF_MAGIC: &[u8; 4] = b"PSF1";
pub const TENSOR_MAGIC: &[u8; 4] = b"TEN1";

pub(crate) struct Reader<R> {
    inner: R,
    path: std::path::PathBuf,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        Self { inner, path: path.to_path_buf() }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::format(&self.path, format!("truncated file: {e}")))
    }

    pub(crate) fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        self.fill(&mut m)?;
        if &m != want {
            return Err(Error::format(
                &self.path,
                format!("expected magic {:?}, found {:?}", String::from_utf8_lossy(want), String::from_utf8_lossy(&m)),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        self.fill(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(&self.path, "trailing bytes after payload")),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

pub(crate) fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(Reader::new(BufReader::new(f), path))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

pub(crate) fn write_all(w: &mut impl Write, bytes: &[u8], path: &Path) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_f64s(w: &mut impl Write, values: impl IntoIterator<Item = f64>, path: &Path) -> Result<()> {
    for v in values {
        write_all(w, &v.to_le_bytes(), path)?;
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidParameter(format!("{what} = {v} does not fit in u32")))
}

pub fn write_psf(path: &Path, psf: &PsfKernel) -> Result<()> {
    let g = psf.grid();
    let mut w = create(path)?;
    write_all(&mut w, PSF_MAGIC, path)?;
    for n in [g.n_x, g.n_y, g.n_t] {
        write_all(&mut w, &to_u32(n, "grid count")?.to_le_bytes(), path)?;
    }
    write_f64s(&mut w, [g.dx, g.dy, g.dt], path)?;
    write_f64s(&mut w, psf.values().iter().copied(), path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a kernel file. The pulse flag is not part of the format and is supplied by the caller.
pub fn read_psf(path: &Path, pulse_convolved: bool) -> Result<PsfKernel> {
    let mut r = open(path)?;
    r.magic(PSF_MAGIC)?;
    let (n_x, n_y, n_t) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let (dx, dy, dt) = (r.f64()?, r.f64()?, r.f64()?);
    let grid = Grid::new(n_x, n_y, n_t, dx, dy, dt)?;
    let values = r.f64s(grid.len())?;
    r.finish()?;
    PsfKernel::from_values(values, grid, pulse_convolved)
}

/// Inspection dump: one line per sample.
pub fn write_psf_csv(path: &Path, psf: &PsfKernel) -> Result<()> {
    let g = psf.grid();
    let mut w = create(path)?;
    let mut text = String::from("i,j,k,x_m,y_m,t_s,value\n");
    for k in 0..g.n_t {
        for j in 0..g.n_y {
            for i in 0..g.n_x {
                let x = (i as f64 - g.center_x() as f64) * g.dx;
                let y = (j as f64 - g.center_y() as f64) * g.dy;
                let t = (k + 1) as f64 * g.dt;
                text.push_str(&format!("{i},{j},{k},{x:e},{y:e},{t:e},{:e}\n", psf.get(i, j, k)));
            }
        }
    }
    write_all(&mut w, text.as_bytes(), path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, dims: &[usize], values: impl IntoIterator<Item = f64>) -> Result<()> {
    let mut w = create(path)?;
    write_all(&mut w, TENSOR_MAGIC, path)?;
    write_all(&mut w, &to_u32(dims.len(), "rank")?.to_le_bytes(), path)?;
    for d in dims {
        write_all(&mut w, &to_u32(*d, "dimension")?.to_le_bytes(), path)?;
    }
    write_f64s(&mut w, values, path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = open(path)?;
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(path, format!("unsupported rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let len = dims.iter().product();
    let values = r.f64s(len)?;
    r.finish()?;
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_array2(path: &Path, a: &Array2<f64>) -> Result<()> {
    write_tensor(path, &[a.nrows(), a.ncols()], a.iter().copied())
}

pub fn read_array2(path: &Path) -> Result<Array2<f64>> {
    read_tensor(path)?
        .into_dimensionality()
        .map_err(|_| Error::format(path, "expected a rank-2 tensor"))
}

pub fn write_array3(path: &Path, a: &Array3<f64>) -> Result<()> {
    let (p, q, r) = a.dim();
    write_tensor(path, &[p, q, r], a.iter().copied())
}

pub fn read_array3(path: &Path) -> Result<Array3<f64>> {
    let t = read_tensor(path)?;
    match t.ndim() {
        2 => {
            let a: Array2<f64> = t.into_dimensionality().unwrap();
            let (m, n) = a.dim();
            Ok(a.into_shape_with_order((m, 1, n)).unwrap())
        }
        3 => Ok(t.into_dimensionality().unwrap()),
        d => Err(Error::format(path, format!("expected rank 2 or 3, found {d}"))),
    }
}

/// Reads a numeric CSV. Blank lines and lines starting with `#` are skipped;
/// a first line that does not parse is treated as a header.
pub fn read_csv_matrix(path: &Path) -> Result<Array2<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(e) => return Err(Error::format(path, format!("line {}: {e}", lineno + 1))),
        }
    }
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::format(path, "no numeric rows"));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::format(path, format!("row {} has {} columns, expected {ncols}", bad + 1, rows[bad].len())));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite value"));
    }
    Ok(Array2::from_shape_vec((flat.len() / ncols, ncols), flat).unwrap())
}

pub fn write_csv_matrix(path: &Path, a: ArrayView2<f64>) -> Result<()> {
    let mut text = String::new();
    for row in a.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let mut w = create(path)?;
    write_all(&mut w, text.as_bytes(), path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Binary 16-bit PGM (P5), scaled so the image maximum maps to 65535.
/// Negative values are clipped to black. Rows of `image` are image rows.
pub fn write_pgm16(path: &Path, image: ArrayView2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let max = image.iter().copied().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let mut out = create(path)?;
    write_all(&mut out, format!("P5\n{w} {h}\n65535\n").as_bytes(), path)?;
    let mut bytes = Vec::with_capacity(w * h * 2);
    for v in image.iter() {
        let level = (v.max(0.0) * scale).round().min(65535.0) as u16;
        bytes.extend_from_slice(&level.to_be_bytes());
    }
    write_all(&mut out, &bytes, path)?;
    out.flush().map_err(|e| Error::io(path, e))
}
