//! `PPN1` checkpoints.
//!
//! Layout, little-endian: magic `PPN1`; `u32` depth `T`; `T` x `u32` widths;
//! `u32` kernel nodes, nominal nodes, input channels, output channels,
//! group size, layers per block, activation tag; `f64` norm epsilon; `u64`
//! parameter count; then the parameters as `f64` in
//! [`OperatorParams::for_each_slice`] order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{read_f64, read_f64_vec, read_magic, read_u32, write_f64_slice};
use crate::operator::{Activation, OperatorConfig, OperatorParams};
use crate::rng;

impl OperatorParams {
    pub fn write_ppn1(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(b"PPN1")?;
        w.write_all(&(c.depth() as u32).to_le_bytes())?;
        for &d in &c.widths {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in [c.kernel_nodes, c.nominal_nodes, c.in_channels, c.out_channels, c.group_size, c.layers_per_block] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&c.activation.tag().to_le_bytes())?;
        w.write_all(&c.eps.to_le_bytes())?;
        w.write_all(&(self.num_params() as u64).to_le_bytes())?;
        write_f64_slice(w, &self.to_flat())
    }

    pub fn to_ppn1_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_ppn1(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_ppn1(r: &mut impl Read) -> Result<Self> {
        read_magic(r, b"PPN1")?;
        let t = read_u32(r)? as usize;
        if !(2..=16).contains(&t) {
            return Err(Error::Format(format!("implausible depth {t}")));
        }
        let widths = (0..t).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut u = [0usize; 6];
        for v in u.iter_mut() {
            *v = read_u32(r)? as usize;
        }
        let activation = Activation::from_tag(read_u32(r)?)?;
        let eps = read_f64(r)?;
        let config = OperatorConfig {
            widths,
            kernel_nodes: u[0],
            nominal_nodes: u[1],
            in_channels: u[2],
            out_channels: u[3],
            group_size: u[4],
            layers_per_block: u[5],
            activation,
            eps,
        };
        config.validate().map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut params = OperatorParams::init(config, &mut rng::stream(0, 0))?;
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let n = u64::from_le_bytes(b) as usize;
        if n != params.num_params() {
            return Err(Error::Format(format!("checkpoint holds {n} parameters, header implies {}", params.num_params())));
        }
        let flat = read_f64_vec(r, n)?;
        params.set_flat(&flat)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppn1(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_ppn1(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
