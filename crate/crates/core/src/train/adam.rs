//! Adam optimiser and its `Q3DA` state file.
//!
//! `Q3DA` layout (little-endian):
//!
//! ```text
//! magic    b"Q3DA"
//! version  u16 (= 1)
//! step     u64
//! beta1, beta2, eps   f64 × 3
//! tensors  u32
//! per tensor: len u32, then len f32 first moments, then len f32 second moments
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::Cursor;
use crate::error::{dim_err, Error, Result};
use crate::net::Model;

pub const ADAM_MAGIC: &[u8; 4] = b"Q3DA";
pub const ADAM_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moments, one buffer per parameter tensor.
    pub m: Vec<Vec<f32>>,
    /// Second moments, same layout as `m`.
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Zeroed moments for tensors of the given lengths, default hyperparameters.
    pub fn new(layout: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: layout.iter().map(|&n| vec![0.0; n]).collect(),
            v: layout.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &Model<f32>) -> Self {
        AdamState::new(&model.tensors().iter().map(|t| t.len()).collect::<Vec<_>>())
    }

    pub fn layout(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One bias-corrected update. The arithmetic runs in f64.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f64) -> Result<()> {
        let layout = self.layout();
        if params.len() != layout.len() || grads.len() != layout.len() {
            return dim_err(format!(
                "optimiser tracks {} tensors, got {} params and {} grads",
                layout.len(),
                params.len(),
                grads.len()
            ));
        }
        for (k, n) in layout.iter().enumerate() {
            if params[k].len() != *n || grads[k].len() != *n {
                return dim_err(format!("tensor {k}: optimiser length {n}, param {}, grad {}", params[k].len(), grads[k].len()));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let g = grads[k][i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Apply one Adam step to every parameter tensor of `model`.
pub fn adam_step(state: &mut AdamState, model: &mut Model<f32>, grads: &[&[f32]], lr: f64) -> Result<()> {
    let mut params = model.tensors_mut();
    state.step(&mut params, grads, lr)
}

pub fn write_adam_to(w: &mut impl Write, state: &AdamState) -> Result<()> {
    w.write_all(ADAM_MAGIC)?;
    w.write_all(&ADAM_VERSION.to_le_bytes())?;
    w.write_all(&state.step.to_le_bytes())?;
    for v in [state.beta1, state.beta2, state.eps] {
        w.write_all(&v.to_le_bytes())?;
    }
    let n = u32::try_from(state.m.len()).map_err(|_| Error::Config("too many tensors".into()))?;
    w.write_all(&n.to_le_bytes())?;
    for (m, v) in state.m.iter().zip(&state.v) {
        let len = u32::try_from(m.len()).map_err(|_| Error::Config("tensor too large".into()))?;
        w.write_all(&len.to_le_bytes())?;
        for x in m.iter().chain(v) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_adam(path: impl AsRef<Path>, state: &AdamState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_adam_to(&mut w, state)?;
    w.flush()?;
    Ok(())
}

pub fn read_adam_from(r: impl Read) -> Result<AdamState> {
    let mut c = Cursor::new(r);
    let magic = c.bytes::<4>("magic")?;
    if &magic != ADAM_MAGIC {
        return c.fail(0, format!("bad magic {magic:?}, expected Q3DA"));
    }
    let version = c.u16("version")?;
    if version != ADAM_VERSION {
        return c.fail(4, format!("unsupported version {version}"));
    }
    let step = c.u64("step")?;
    let (beta1, beta2, eps) = (c.f64("beta1")?, c.f64("beta2")?, c.f64("eps")?);
    let n = c.u32("tensor count")? as usize;
    let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let len = c.u32("tensor length")? as usize;
        let mut read = |what: &str| (0..len).map(|_| c.f32(what)).collect::<Result<Vec<f32>>>();
        m.push(read("first moments")?);
        v.push(read("second moments")?);
    }
    if !c.at_end()? {
        return c.fail(c.offset, "trailing bytes after optimiser state".into());
    }
    Ok(AdamState { beta1, beta2, eps, step, m, v })
}

pub fn read_adam(path: impl AsRef<Path>) -> Result<AdamState> {
    read_adam_from(BufReader::new(File::open(path)?))
}
