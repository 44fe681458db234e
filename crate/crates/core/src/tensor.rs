//! Dense row-major f32 tensors and the `RDT1` binary snapshot format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &[u8; 4] = b"RDT1";

/// n-dimensional f32 array with an optional gradient buffer.
///
/// Values are stored row-major. The gradient buffer exists iff the tensor was
/// marked as requiring gradients, and always matches the value shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor, validating the shape/value-count invariant and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite value {} at flat index {bad}",
                values[bad]
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// The single value of a scalar (or 1-element) tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.values.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as a gradient leaf, allocating its buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.values.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Installs an externally computed gradient (e.g. out of a backward pass).
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.requires_grad = true;
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Writes the value buffer as an `RDT1` snapshot:
    /// magic `RDT1`, LE u32 rank, LE u32 extents, raw LE f32 values.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let err = |e| Error::io(path.display().to_string(), e);
        let mut w = BufWriter::new(File::create(path).map_err(err)?);
        self.write_snapshot_to(&mut w)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_snapshot_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&name, e))?;
        let mut r = CountingReader::new(BufReader::new(file));
        let t = Self::read_snapshot_from(&mut r, &name)?;
        Ok(t)
    }

    /// Reads one snapshot from a stream whose byte position is tracked by
    /// `CountingReader`, so truncation errors can name the offset.
    pub fn read_snapshot_from(r: &mut CountingReader<impl Read>, name: &str) -> Result<Self> {
        let mut magic = [0u8; 4];
        let at = r.position();
        r.read_exact_or(&mut magic, name)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::format(name, at, "bad tensor magic (want RDT1)"));
        }
        let rank = r.read_u32(name)? as usize;
        if rank > 8 {
            return Err(Error::format(
                name,
                r.position() - 4,
                format!("implausible rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = r.read_u32(name)? as usize;
            if e == 0 {
                return Err(Error::format(name, r.position() - 4, "zero extent"));
            }
            shape.push(e);
        }
        let n: usize = shape.iter().product();
        let mut values = vec![0.0f32; n];
        for v in &mut values {
            *v = f32::from_le_bytes(r.read_4(name)?);
        }
        Tensor::new(shape, values)
    }
}

/// Reader wrapper that tracks the current byte offset for diagnostics.
pub struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        CountingReader { inner, pos: 0 }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn read_exact_or(&mut self, buf: &mut [u8], name: &str) -> Result<()> {
        let at = self.pos;
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::format(name, at, format!("truncated: wanted {} bytes", buf.len())))?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    pub fn read_4(&mut self, name: &str) -> Result<[u8; 4]> {
        let mut b = [0u8; 4];
        self.read_exact_or(&mut b, name)?;
        Ok(b)
    }

    pub fn read_u32(&mut self, name: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.read_4(name)?))
    }
}
