//! Versioned named-tensor container for model parameters.
//!
//! Layout: `b"RPLT"`, `u32` format version, `u64` manifest length, the JSON
//! manifest, then the little-endian payload. Entry offsets are byte offsets
//! into the payload.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rpl::{build_rpl, RplConfig, RplModule, GROUP_PROJ};
use crate::segnet::{build_segnet, ArchConfig, SegNet};

pub const MAGIC: &[u8; 4] = b"RPLT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub group: String,
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `"segnet"` or `"rpl"`.
    pub kind: String,
    /// Architecture of the model the tensors belong to.
    pub arch: ArchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpl: Option<RplConfig>,
    /// Checksum of the frozen closed-set model (for an adapter: the model it
    /// was trained against).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_checksum: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

/// A parsed container.
#[derive(Clone, Debug)]
pub struct Container {
    pub manifest: Manifest,
    payload: Vec<u8>,
}

impl Container {
    pub fn groups(&self) -> BTreeSet<String> {
        self.manifest.tensors.iter().map(|t| t.group.clone()).collect()
    }

    pub fn tensor(&self, name: &str) -> Result<Vec<f64>> {
        let e = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let start = e.offset as usize;
        let end = start + e.len as usize * e.dtype.width();
        let bytes = self
            .payload
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("tensor {name} runs past the payload")))?;
        Ok(match e.dtype {
            Dtype::F64 => bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
        })
    }

    /// Copies every stored tensor into the same-named buffer of `params`.
    /// Buffers in `skip_groups` are left untouched.
    fn fill(&self, params: &mut dyn ParamSet, group_of: fn(&str) -> &'static str, skip: &[&str]) -> Result<()> {
        let mut err = None;
        params.visit_mut("", &mut |name, buf| {
            if err.is_some() || skip.contains(&group_of(&name)) {
                return;
            }
            match self.tensor(&name) {
                Ok(v) if v.len() == buf.len() => buf.copy_from_slice(&v),
                Ok(v) => err = Some(Error::Format(format!("{name}: {} values for {} slots", v.len(), buf.len()))),
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

pub fn encode(
    manifest_base: Manifest,
    params: &dyn ParamSet,
    group_of: fn(&str) -> &'static str,
    dtype: Dtype,
) -> Result<Vec<u8>> {
    let mut manifest = Manifest { tensors: Vec::new(), ..manifest_base };
    let mut shapes = Vec::new();
    params.visit_shapes("", &mut |name, shape| shapes.push((name, shape)));
    let mut payload = Vec::new();
    let mut i = 0;
    params.visit("", &mut |name, values| {
        let (shape_name, shape) = &shapes[i];
        debug_assert_eq!(shape_name, &name);
        i += 1;
        manifest.tensors.push(TensorEntry {
            group: group_of(&name).to_string(),
            name,
            shape: shape.clone(),
            dtype,
            offset: payload.len() as u64,
            len: values.len() as u64,
        });
        for v in values {
            match dtype {
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => payload.extend_from_slice(&(*v as f32).to_le_bytes()),
            }
        }
    });
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a parameter container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    Ok(Container { manifest, payload: bytes[16 + len..].to_vec() })
}

pub fn read(path: &Path) -> Result<Container> {
    decode(&fs::read(path)?)
}

/// Saves a frozen closed-set model.
pub fn save_segnet(path: &Path, seg: &SegNet, dtype: Dtype) -> Result<()> {
    let base = Manifest {
        format_version: FORMAT_VERSION,
        kind: "segnet".into(),
        arch: seg.arch.clone(),
        rpl: None,
        frozen_checksum: seg.frozen_checksum.clone(),
        tensors: Vec::new(),
    };
    fs::write(path, encode(base, seg, SegNet::group_of, dtype)?)?;
    Ok(())
}

/// Loads a closed-set model. A model saved frozen at full precision must
/// reproduce its recorded checksum.
pub fn load_segnet(path: &Path) -> Result<SegNet> {
    segnet_from(&read(path)?)
}

pub fn segnet_from(c: &Container) -> Result<SegNet> {
    if c.manifest.kind != "segnet" {
        return Err(Error::Format(format!("expected a segnet container, found {}", c.manifest.kind)));
    }
    let mut seg = build_segnet(&c.manifest.arch)?;
    c.fill(&mut seg, SegNet::group_of, &[])?;
    let full_precision = c.manifest.tensors.iter().all(|t| t.dtype == Dtype::F64);
    match &c.manifest.frozen_checksum {
        Some(sum) if full_precision => {
            seg.frozen_checksum = Some(sum.clone());
            seg.verify_frozen()?;
        }
        Some(_) => seg.freeze(),
        None => {}
    }
    Ok(seg)
}

/// Saves adapter parameters; the projector group is written only when
/// present on the module.
pub fn save_rpl(path: &Path, rpl: &RplModule, seg: &SegNet, dtype: Dtype) -> Result<()> {
    let base = Manifest {
        format_version: FORMAT_VERSION,
        kind: "rpl".into(),
        arch: seg.arch.clone(),
        rpl: Some(rpl.config.clone()),
        frozen_checksum: seg.frozen_checksum.clone(),
        tensors: Vec::new(),
    };
    fs::write(path, encode(base, rpl, RplModule::group_of, dtype)?)?;
    Ok(())
}

/// Loads adapter parameters. The projector is restored only when it was
/// stored and `with_projector` is set.
pub fn load_rpl(path: &Path, with_projector: bool) -> Result<(RplModule, Option<String>)> {
    rpl_from(&read(path)?, with_projector)
}

pub fn rpl_from(c: &Container, with_projector: bool) -> Result<(RplModule, Option<String>)> {
    let m = &c.manifest;
    if m.kind != "rpl" {
        return Err(Error::Format(format!("expected an rpl container, found {}", m.kind)));
    }
    let cfg = m.rpl.clone().ok_or_else(|| Error::Format("rpl container without config".into()))?;
    let mut rpl = build_rpl(&build_segnet(&m.arch)?, &cfg)?;
    let keep = with_projector && c.groups().contains(GROUP_PROJ);
    if !keep {
        rpl.discard_projector();
    }
    c.fill(&mut rpl, RplModule::group_of, &[])?;
    Ok((rpl, m.frozen_checksum.clone()))
}
