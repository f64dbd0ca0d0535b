//! Binary weight files with a JSON manifest.
//!
//! Layout: magic `MRNW`, `u32` version, `u32` layer count, then per layer a
//! table row of `u8` stack id, `u8` kind, `u8` selu flag and six `u32`
//! values (kernel h, kernel w, in, out, stride, dilation), then all weights
//! and biases as little-endian `f32` in table order. Weights are stored in
//! CNN form; the manifest sits next to the file with a `.json` extension.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, LayerKind, LayerSpec};
use super::network::{Form, NetworkConfig, PolicyNetwork, Stack};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MRNW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub network: NetworkConfig,
    pub param_count: usize,
    pub layers: Vec<ManifestLayer>,
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub stack: String,
    pub spec: LayerSpec,
    pub weight_shape: [usize; 4],
}

const STACK_NAMES: [&str; 3] = ["encoder_fixed", "encoder_moving", "decoder"];

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(net: &PolicyNetwork, path: &Path, training: serde_json::Value) -> Result<()> {
    let cnn = net.to_cnn()?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let layers: Vec<(usize, &Conv2d)> = cnn
        .stacks()
        .into_iter()
        .enumerate()
        .flat_map(|(i, s)| s.layers.iter().map(move |l| (i, l)))
        .collect();
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for (stack, l) in &layers {
        let s = &l.spec;
        let kind = match s.kind {
            LayerKind::Conv => 0u8,
            LayerKind::FullyConnected => 1u8,
        };
        w.write_all(&[*stack as u8, kind, s.selu as u8])?;
        for v in [s.kernel[0], s.kernel[1], s.in_channels, s.out_channels, s.stride, s.dilation] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    for (_, l) in &layers {
        for v in l.weight.iter().chain(&l.bias) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    let manifest = Manifest {
        format_version: VERSION,
        network: cnn.config().clone(),
        param_count: cnn.param_count(),
        layers: layers
            .iter()
            .map(|(i, l)| ManifestLayer {
                stack: STACK_NAMES[*i].to_string(),
                spec: l.spec.clone(),
                weight_shape: [
                    l.spec.out_channels,
                    l.spec.in_channels,
                    l.spec.kernel[0],
                    l.spec.kernel[1],
                ],
            })
            .collect(),
        training,
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a checkpoint in CNN form together with its manifest.
pub fn load_checkpoint(path: &Path) -> Result<(PolicyNetwork, Manifest)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(manifest_path(path))
            .map_err(|e| Error::Checkpoint(format!("cannot read manifest: {e}")))?,
    )?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let template = PolicyNetwork::new(manifest.network.clone(), 0)?;
    let expected: Vec<(usize, &LayerSpec)> = template
        .stacks()
        .into_iter()
        .enumerate()
        .flat_map(|(i, s)| s.layers.iter().map(move |l| (i, &l.spec)))
        .collect();
    let n = r.u32()? as usize;
    if n != expected.len() {
        return Err(Error::Checkpoint(format!("expected {} layers, found {n}", expected.len())));
    }
    for (stack, spec) in &expected {
        let head = r.take(3)?.to_vec();
        let dims: Vec<usize> = (0..6).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let kind = match spec.kind {
            LayerKind::Conv => 0,
            LayerKind::FullyConnected => 1,
        };
        let want = [
            spec.kernel[0],
            spec.kernel[1],
            spec.in_channels,
            spec.out_channels,
            spec.stride,
            spec.dilation,
        ];
        if head != [*stack as u8, kind, spec.selu as u8] || dims != want {
            return Err(Error::Checkpoint(format!("layer table mismatch at {}", spec.name)));
        }
    }
    let mut stacks = Vec::new();
    for s in template.stacks() {
        let mut layers = Vec::new();
        for l in &s.layers {
            let mut c = Conv2d::zeros(l.spec.clone())?;
            for v in c.weight.iter_mut().chain(c.bias.iter_mut()) {
                *v = r.f32()? as f64;
            }
            layers.push(c);
        }
        stacks.push(Stack { layers });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let decoder = stacks.pop().expect("three stacks");
    let moving = stacks.pop().expect("three stacks");
    let fixed = stacks.pop().expect("three stacks");
    let net = PolicyNetwork::from_parts(manifest.network.clone(), Form::Cnn, fixed, moving, decoder);
    if !net.is_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::tests_support::tiny_config;

    #[test]
    fn roundtrip_preserves_weights_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = PolicyNetwork::new(tiny_config(), 5).unwrap();
        save_checkpoint(&net.to_dilated_fcn(), &path, serde_json::json!({"seed": 5})).unwrap();
        let (back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.param_count, net.param_count());
        assert_eq!(manifest.training["seed"], 5);
        assert_eq!(back.form(), Form::Cnn);
        for (a, b) in back.param_buffers().iter().zip(net.param_buffers()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn missing_or_corrupt_files_are_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        let net = PolicyNetwork::new(tiny_config(), 5).unwrap();
        save_checkpoint(&net, &path, serde_json::Value::Null).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
