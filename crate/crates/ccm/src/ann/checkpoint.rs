//! CCMW checkpoint format.
//!
//! Layout (all little-endian): magic "CCMW", version u32, the network spec
//! (input_size, depth, base_channels, dense_layers_per_block, kernel_size as
//! u32s, seed u64), then a tensor section for the parameters, then a u8 flag
//! and, when set, the optimizer scalars (t u64; alpha, beta1, beta2, epsilon
//! f64) followed by a tensor section of the first/second moments in the same
//! layout. A tensor section is a u32 count, then per tensor: name length u32
//! + name bytes, rank u32, dims u32 each, f32 data.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array4};

use super::adam::OptimizerState;
use super::net::{init_network, NetworkParams, NetworkSpec};
use crate::{Error, Result};

pub const CCMW_MAGIC: &[u8; 4] = b"CCMW";
pub const CCMW_VERSION: u32 = 1;

struct TensorRef<'a> {
    name: String,
    dims: Vec<usize>,
    data: Vec<&'a [f32]>,
}

fn write_tensor_section<W: Write>(w: &mut W, tensors: &[TensorRef<'_>]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for chunk in &t.data {
            let mut buf = Vec::with_capacity(chunk.len() * 4);
            for &v in *chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

fn layer_tensors<'a>(
    layers: impl Iterator<Item = (&'a String, &'a Array4<f32>, &'a Array1<f32>)>,
    suffix: &str,
) -> Vec<TensorRef<'a>> {
    let mut out = Vec::new();
    for (name, w, b) in layers {
        let (o, i, kh, kw) = w.dim();
        out.push(TensorRef {
            name: format!("{name}.weight{suffix}"),
            dims: vec![o, i, kh, kw],
            data: vec![w.as_slice().expect("contiguous")],
        });
        out.push(TensorRef {
            name: format!("{name}.bias{suffix}"),
            dims: vec![b.len()],
            data: vec![b.as_slice().expect("contiguous")],
        });
    }
    out
}

/// Saves parameters (and, when given, optimizer state) to a CCMW file.
pub fn save_checkpoint(
    path: &Path,
    params: &NetworkParams<f32>,
    state: Option<&OptimizerState<f32>>,
) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    w.write_all(CCMW_MAGIC)?;
    w.write_all(&CCMW_VERSION.to_le_bytes())?;
    let s = &params.spec;
    for v in [
        s.input_size as u32,
        s.depth as u32,
        s.base_channels as u32,
        s.dense_layers_per_block as u32,
        s.kernel_size as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&s.seed.to_le_bytes())?;

    let tensors = layer_tensors(
        params.layers.iter().map(|l| (&l.name, &l.weight, &l.bias)),
        "",
    );
    write_tensor_section(&mut w, &tensors)?;

    match state {
        None => w.write_all(&[0u8])?,
        Some(st) => {
            w.write_all(&[1u8])?;
            w.write_all(&st.t.to_le_bytes())?;
            for v in [st.alpha, st.beta1, st.beta2, st.epsilon] {
                w.write_all(&v.to_le_bytes())?;
            }
            let names: Vec<&String> = params.layers.iter().map(|l| &l.name).collect();
            let mut tensors = Vec::new();
            for ((name, (mw, mb)), (vw, vb)) in
                names.iter().zip(&st.m).zip(&st.v)
            {
                tensors.extend(layer_tensors(
                    std::iter::once((*name, mw, mb)),
                    ".m",
                ));
                tensors.extend(layer_tensors(
                    std::iter::once((*name, vw, vb)),
                    ".v",
                ));
            }
            write_tensor_section(&mut w, &tensors)?;
        }
    }
    Ok(())
}

struct Reader<R> {
    r: R,
    name: String,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::format(&self.name, "truncated"))?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::format(&self.name, "truncated"))?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = self.u32()? as usize;
        if name_len > 4096 {
            return Err(Error::format(&self.name, "unreasonable tensor name length"));
        }
        let mut nb = vec![0u8; name_len];
        self.r
            .read_exact(&mut nb)
            .map_err(|_| Error::format(&self.name, "truncated"))?;
        let name = String::from_utf8(nb)
            .map_err(|_| Error::format(&self.name, "tensor name not utf-8"))?;
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; n * 4];
        self.r
            .read_exact(&mut payload)
            .map_err(|_| Error::format(&self.name, "truncated tensor payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, dims, data))
    }
}

fn read_into_layers<R: Read>(
    rd: &mut Reader<R>,
    layers: &mut [(String, Array4<f32>, Array1<f32>)],
    suffix: &str,
) -> Result<()> {
    let count = rd.u32()? as usize;
    if count != layers.len() * 2 {
        return Err(Error::format(
            &rd.name,
            format!("expected {} tensors, found {count}", layers.len() * 2),
        ));
    }
    for (lname, w, b) in layers.iter_mut() {
        let (name, dims, data) = rd.tensor()?;
        let want = format!("{lname}.weight{suffix}");
        if name != want {
            return Err(Error::format(&rd.name, format!("expected {want}, found {name}")));
        }
        if dims != [w.dim().0, w.dim().1, w.dim().2, w.dim().3] {
            return Err(Error::format(&rd.name, format!("bad dims for {name}")));
        }
        *w = Array4::from_shape_vec(w.dim(), data).expect("validated dims");
        let (name, dims, data) = rd.tensor()?;
        let want = format!("{lname}.bias{suffix}");
        if name != want {
            return Err(Error::format(&rd.name, format!("expected {want}, found {name}")));
        }
        if dims != [b.len()] {
            return Err(Error::format(&rd.name, format!("bad dims for {name}")));
        }
        *b = Array1::from_vec(data);
    }
    Ok(())
}

/// Loads a CCMW checkpoint: parameters plus the optimizer state when the
/// file carries one.
pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams<f32>, Option<OptimizerState<f32>>)> {
    let f = std::fs::File::open(path)?;
    let mut rd = Reader {
        r: std::io::BufReader::new(f),
        name: path.display().to_string(),
    };
    let mut magic = [0u8; 4];
    rd.r
        .read_exact(&mut magic)
        .map_err(|_| Error::format(&rd.name, "truncated header"))?;
    if &magic != CCMW_MAGIC {
        return Err(Error::format(&rd.name, "bad magic (not a CCMW file)"));
    }
    let version = rd.u32()?;
    if version != CCMW_VERSION {
        return Err(Error::format(&rd.name, format!("unsupported version {version}")));
    }
    let spec = NetworkSpec {
        input_size: rd.u32()? as usize,
        depth: rd.u32()? as usize,
        base_channels: rd.u32()? as usize,
        dense_layers_per_block: rd.u32()? as usize,
        kernel_size: rd.u32()? as usize,
        seed: rd.u64()?,
    };
    let mut params = init_network::<f32>(&spec)?;
    let mut staging: Vec<(String, Array4<f32>, Array1<f32>)> = params
        .layers
        .iter()
        .map(|l| (l.name.clone(), l.weight.clone(), l.bias.clone()))
        .collect();
    read_into_layers(&mut rd, &mut staging, "")?;
    for (l, (_, w, b)) in params.layers.iter_mut().zip(staging.iter()) {
        l.weight = w.clone();
        l.bias = b.clone();
    }

    let mut flag = [0u8; 1];
    rd.r
        .read_exact(&mut flag)
        .map_err(|_| Error::format(&rd.name, "truncated optimizer flag"))?;
    let state = if flag[0] == 1 {
        let t = rd.u64()?;
        let alpha = rd.f64()?;
        let beta1 = rd.f64()?;
        let beta2 = rd.f64()?;
        let epsilon = rd.f64()?;
        let count = rd.u32()? as usize;
        if count != params.layers.len() * 4 {
            return Err(Error::format(
                &rd.name,
                format!("expected {} moment tensors, found {count}", params.layers.len() * 4),
            ));
        }
        let mut m = Vec::with_capacity(params.layers.len());
        let mut v = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            let mut read_pair = |suffix: &str| -> Result<(Array4<f32>, Array1<f32>)> {
                let (name, dims, data) = rd.tensor()?;
                let want = format!("{}.weight{suffix}", l.name);
                if name != want || dims != [l.weight.dim().0, l.weight.dim().1, l.weight.dim().2, l.weight.dim().3] {
                    return Err(Error::format(&rd.name, format!("bad moment tensor {name}")));
                }
                let w = Array4::from_shape_vec(l.weight.dim(), data).expect("validated");
                let (name, dims, data) = rd.tensor()?;
                let want = format!("{}.bias{suffix}", l.name);
                if name != want || dims != [l.bias.len()] {
                    return Err(Error::format(&rd.name, format!("bad moment tensor {name}")));
                }
                Ok((w, Array1::from_vec(data)))
            };
            m.push(read_pair(".m")?);
            v.push(read_pair(".v")?);
        }
        Some(OptimizerState {
            t,
            alpha,
            beta1,
            beta2,
            epsilon,
            m,
            v,
        })
    } else {
        None
    };
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{init_network, LossKind, OptimizerState, TrainConfig};

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let spec = NetworkSpec {
            input_size: 8,
            depth: 1,
            base_channels: 3,
            dense_layers_per_block: 2,
            kernel_size: 3,
            seed: 21,
        };
        let params = init_network::<f32>(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 0,
            loss: LossKind::PixelwiseCrossEntropy,
        };
        let mut state = OptimizerState::new(&params, &cfg);
        state.t = 17;
        state.m[0].0.fill(0.125);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ccmw");
        save_checkpoint(&path, &params, Some(&state)).unwrap();
        let (back, bstate) = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec, spec);
        for (a, b) in params.layers.iter().zip(&back.layers) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
        let bstate = bstate.unwrap();
        assert_eq!(bstate.t, 17);
        assert_eq!(bstate.m[0].0, state.m[0].0);

        // Saving twice produces identical bytes.
        let path2 = dir.path().join("net2.ccmw");
        save_checkpoint(&path2, &params, Some(&state)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_corrupt_files() {
        let spec = NetworkSpec {
            input_size: 8,
            depth: 1,
            base_channels: 2,
            dense_layers_per_block: 1,
            kernel_size: 3,
            seed: 0,
        };
        let params = init_network::<f32>(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ccmw");
        save_checkpoint(&path, &params, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.ccmw");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_checkpoint(&bad).is_err());

        let trunc = dir.path().join("trunc.ccmw");
        let orig = std::fs::read(&path).unwrap();
        std::fs::write(&trunc, &orig[..orig.len() - 10]).unwrap();
        assert!(load_checkpoint(&trunc).is_err());
    }
}
