//! Checkpoint persistence.
//!
//! Binary layout, all integers little-endian:
//!   magic "WXNN" | u32 version=1 | u32 tensor count
//!   per tensor: u16 name length | name | u8 dtype (0=f32, 1=f64)
//!               | u8 rank | rank×u64 dims | row-major payload
//!   u32 metadata length | metadata text (key=value lines)
//!   u32 CRC32 (IEEE) over all tensor payload bytes in order
//!
//! Round trips are bitwise; a single flipped payload byte fails the
//! trailing checksum.

use crate::attention::AttentionParams;
use crate::backbone::{BackboneConfig, BackboneParams, ConvLayer};
use crate::cells::{ConvLstmParams, GATES, GATE_NAMES};
use crate::error::{Error, Result};
use crate::model::{HeadMode, HeadParams, LabelOrder, WeatherModel};
use crate::tensor::{DType, Tensor};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"WXNN";
pub const VERSION: u32 = 1;

/// Payload-typed tensor for dtype-erased storage.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => t.to_le_bytes(),
            AnyTensor::F64(t) => t.to_le_bytes(),
        }
    }

    pub fn as_f32(&self) -> Result<&Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::F64(_) => Err(Error::Checkpoint("tensor stored as f64, wanted f32".into())),
        }
    }
}

/// Named tensor table plus key=value metadata.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, AnyTensor)>,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&AnyTensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key '{key}'")))
    }
}

/// CRC32 (IEEE 802.3, reflected, poly 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(ckpt.tensors.len()).map_err(|_| {
        Error::Checkpoint("too many tensors".into())
    })?.to_le_bytes());

    let mut payload_all = Vec::new();
    for (name, tensor) in &ckpt.tensors {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name '{name}' too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.dtype().code());
        let shape = tensor.shape();
        out.push(
            u8::try_from(shape.len())
                .map_err(|_| Error::Checkpoint(format!("tensor '{name}' rank too large")))?,
        );
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let payload = tensor.payload();
        payload_all.extend_from_slice(&payload);
        out.extend_from_slice(&payload);
    }

    let meta_text: String = ckpt
        .meta
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    let meta_bytes = meta_text.as_bytes();
    out.extend_from_slice(&u32::try_from(meta_bytes.len()).map_err(|_| {
        Error::Checkpoint("metadata too large".into())
    })?.to_le_bytes());
    out.extend_from_slice(meta_bytes);
    out.extend_from_slice(&crc32(&payload_all).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("tensor count")? as usize;

    let mut tensors = Vec::with_capacity(count);
    let mut payload_all = Vec::new();
    for i in 0..count {
        let name_len = r.u16(&format!("name length of tensor {i}"))? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?;
        let dtype = DType::from_code(r.u8(&format!("dtype of '{name}'"))?)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' has unknown dtype")))?;
        let rank = r.u8(&format!("rank of '{name}'"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for d in 0..rank {
            let dim = r.u64(&format!("dim {d} of '{name}'"))?;
            let dim = usize::try_from(dim)
                .map_err(|_| Error::Checkpoint(format!("tensor '{name}' dim overflow")))?;
            len = len
                .checked_mul(dim)
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' dim overflow")))?;
            shape.push(dim);
        }
        let payload_len = len
            .checked_mul(dtype.size_of())
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' dim overflow")))?;
        let payload = r.take(payload_len, &format!("payload of '{name}'"))?;
        payload_all.extend_from_slice(payload);
        let tensor = match dtype {
            DType::F32 => AnyTensor::F32(
                Tensor::from_le_bytes(shape, payload)
                    .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?,
            ),
            DType::F64 => AnyTensor::F64(
                Tensor::from_le_bytes(shape, payload)
                    .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?,
            ),
        };
        tensors.push((name, tensor));
    }

    let meta_len = r.u32("metadata length")? as usize;
    let meta_text = String::from_utf8(r.take(meta_len, "metadata")?.to_vec())
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let meta = meta_text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line '{l}'")))
        })
        .collect::<Result<Vec<_>>>()?;

    let stored = r.u32("checksum")?;
    let computed = crc32(&payload_all);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    Ok(Checkpoint { tensors, meta })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes)
}

// ---------------------------------------------------------------------------
// model <-> checkpoint

fn config_hash(meta: &[(String, String)]) -> u32 {
    let text: String = meta
        .iter()
        .filter(|(k, _)| k != "config_hash")
        .map(|(k, v)| format!("{k}={v};"))
        .collect();
    crc32(text.as_bytes())
}

/// Stage-1 output: backbone weights plus enough metadata to resume.
pub fn backbone_to_checkpoint(
    params: &BackboneParams<f32>,
    cfg: &BackboneConfig,
    classes: &[String],
) -> Checkpoint {
    let mut named = Vec::new();
    params.visit("backbone", &mut named);
    let tensors = named
        .into_iter()
        .map(|(name, t, _)| (name, AnyTensor::F32(t.clone())))
        .collect();
    let mut meta = vec![
        ("stage".to_string(), "1".to_string()),
        ("classes".to_string(), classes.join(",")),
        ("input_size".to_string(), cfg.input_size.to_string()),
        ("pre_size".to_string(), cfg.pre_size.to_string()),
        ("in_channels".to_string(), cfg.in_channels.to_string()),
        ("groups".to_string(), cfg.groups_string()),
    ];
    let hash = config_hash(&meta);
    meta.push(("config_hash".to_string(), format!("{hash:08x}")));
    Checkpoint { tensors, meta }
}

/// Read the backbone out of a stage-1 or full checkpoint.
pub fn backbone_from_checkpoint(
    ckpt: &Checkpoint,
) -> Result<(BackboneParams<f32>, BackboneConfig, Vec<String>)> {
    let classes: Vec<String> = ckpt
        .meta_value("classes")?
        .split(',')
        .map(str::to_string)
        .collect();
    let parse_usize = |key: &str| -> Result<usize> {
        ckpt.meta_value(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata value for '{key}'")))
    };
    let cfg = BackboneConfig {
        input_size: parse_usize("input_size")?,
        pre_size: parse_usize("pre_size")?,
        in_channels: parse_usize("in_channels")?,
        groups: BackboneConfig::parse_groups(ckpt.meta_value("groups")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut params = BackboneParams::<f32>::zeros(&cfg, classes.len());
    let shapes: Vec<(Vec<usize>, Vec<usize>)> = params
        .convs
        .iter()
        .map(|l| (l.kernels.shape().to_vec(), l.bias.shape().to_vec()))
        .collect();
    let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = ckpt.tensor(name)?.as_f32()?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    };
    let mut convs = Vec::new();
    for (i, (ks, bs)) in shapes.iter().enumerate() {
        convs.push(ConvLayer {
            kernels: fetch(&format!("backbone.conv{i}.kernels"), ks)?,
            bias: fetch(&format!("backbone.conv{i}.bias"), bs)?,
        });
    }
    params.convs = convs;
    params.head_w = fetch("backbone.head.w", &[cfg.feature_len(), classes.len()])?;
    params.head_b = fetch("backbone.head.b", &[classes.len()])?;
    Ok((params, cfg, classes))
}

pub fn model_to_checkpoint(model: &WeatherModel<f32>) -> Checkpoint {
    let mut named = Vec::new();
    model.visit_all(&mut named);
    let tensors = named
        .into_iter()
        .map(|(name, t, _)| (name, AnyTensor::F32(t.clone())))
        .collect();
    let cfg = &model.backbone_cfg;
    let mut meta = vec![
        ("stage".to_string(), "2".to_string()),
        ("classes".to_string(), model.class_names.join(",")),
        (
            "order".to_string(),
            model
                .order
                .as_slice()
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("head_mode".to_string(), model.head_mode.as_str().to_string()),
        ("kernel".to_string(), model.kernel.to_string()),
        (
            "attention_mid".to_string(),
            model.attention.w1.shape()[1].to_string(),
        ),
        ("input_size".to_string(), cfg.input_size.to_string()),
        ("pre_size".to_string(), cfg.pre_size.to_string()),
        ("in_channels".to_string(), cfg.in_channels.to_string()),
        ("groups".to_string(), cfg.groups_string()),
    ];
    let hash = config_hash(&meta);
    meta.push(("config_hash".to_string(), format!("{hash:08x}")));
    Checkpoint {
        tensors,
        meta,
    }
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<WeatherModel<f32>> {
    let expected_hash = format!("{:08x}", config_hash(&ckpt.meta));
    if ckpt.meta_value("config_hash")? != expected_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }

    let classes: Vec<String> = ckpt
        .meta_value("classes")?
        .split(',')
        .map(str::to_string)
        .collect();
    let order = LabelOrder::new(
        ckpt.meta_value("order")?
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad order index '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    let head_mode = HeadMode::parse(ckpt.meta_value("head_mode")?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let parse_usize = |key: &str| -> Result<usize> {
        ckpt.meta_value(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata value for '{key}'")))
    };
    let cfg = BackboneConfig {
        input_size: parse_usize("input_size")?,
        pre_size: parse_usize("pre_size")?,
        in_channels: parse_usize("in_channels")?,
        groups: BackboneConfig::parse_groups(ckpt.meta_value("groups")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let kernel = parse_usize("kernel")?;

    let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = ckpt.tensor(name)?.as_f32()?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    };

    let mut backbone = BackboneParams::<f32>::zeros(&cfg, classes.len());
    let layer_shapes: Vec<(Vec<usize>, Vec<usize>)> = backbone
        .convs
        .iter()
        .map(|l| (l.kernels.shape().to_vec(), l.bias.shape().to_vec()))
        .collect();
    let mut convs = Vec::new();
    for (i, (ks, bs)) in layer_shapes.iter().enumerate() {
        convs.push(ConvLayer {
            kernels: fetch(&format!("backbone.conv{i}.kernels"), ks)?,
            bias: fetch(&format!("backbone.conv{i}.bias"), bs)?,
        });
    }
    backbone.convs = convs;
    backbone.head_w = fetch("backbone.head.w", &[cfg.feature_len(), classes.len()])?;
    backbone.head_b = fetch("backbone.head.b", &[classes.len()])?;

    let c = cfg.feature_channels();
    let mid = parse_usize("attention_mid")?;
    let attention = AttentionParams {
        w1: fetch("attention.w1", &[2 * c, mid])?,
        b1: fetch("attention.b1", &[mid])?,
        w2: fetch("attention.w2", &[mid, c])?,
        b2: fetch("attention.b2", &[c])?,
    };

    let mut cell = ConvLstmParams::<f32>::zeros(c, c, kernel);
    for g in 0..GATES {
        cell.w[g] = fetch(&format!("cell.w_{}", GATE_NAMES[g]), &[c, c, kernel, kernel])?;
        cell.u[g] = fetch(&format!("cell.u_{}", GATE_NAMES[g]), &[c, c, kernel, kernel])?;
        cell.b[g] = fetch(&format!("cell.b_{}", GATE_NAMES[g]), &[c])?;
    }

    let head_count = match head_mode {
        HeadMode::PerStep => classes.len(),
        HeadMode::Shared => 1,
    };
    let head_in = cfg.feature_len();
    let mut heads = Vec::with_capacity(head_count);
    for i in 0..head_count {
        heads.push(HeadParams {
            w: fetch(&format!("head{i}.w"), &[head_in, 1])?,
            b: fetch(&format!("head{i}.b"), &[1])?,
        });
    }

    Ok(WeatherModel {
        backbone_cfg: cfg,
        kernel,
        head_mode,
        class_names: classes,
        order,
        backbone,
        attention,
        cell,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
        assert_eq!(crc32(b""), 0);
    }

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                (
                    "a".to_string(),
                    AnyTensor::F32(Tensor::new(vec![2, 2], vec![1.0, -0.5, 3.25, 0.0]).unwrap()),
                ),
                (
                    "b.weights".to_string(),
                    AnyTensor::F64(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
                ),
            ],
            meta: vec![
                ("classes".to_string(), "x,y".to_string()),
                ("note".to_string(), "hello".to_string()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = sample_checkpoint();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensors[0], ckpt.tensors[0]);
        assert_eq!(back.tensors[1], ckpt.tensors[1]);
        // and byte-identical on re-encode
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn single_byte_corruption_is_detected() {
        let ckpt = sample_checkpoint();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        // flip one bit inside the first tensor's payload
        let payload_offset = 4 + 4 + 4 + 2 + 1 + 1 + 1 + 2 * 8;
        let mut corrupted = bytes.clone();
        corrupted[payload_offset] ^= 0x01;
        let err = decode_checkpoint(&corrupted).unwrap_err();
        assert!(err.to_string().contains("checksum"), "got: {err}");
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let ckpt = Checkpoint::default();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert!(back.tensors.is_empty());
        assert!(back.meta.is_empty());
    }

    #[test]
    fn structural_errors_are_specific() {
        let ok = encode_checkpoint(&sample_checkpoint()).unwrap();

        let mut bad_magic = ok.clone();
        bad_magic[0] = b'X';
        assert!(decode_checkpoint(&bad_magic)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let mut bad_version = ok.clone();
        bad_version[4] = 9;
        assert!(decode_checkpoint(&bad_version)
            .unwrap_err()
            .to_string()
            .contains("version"));

        let truncated = &ok[..ok.len() - 6];
        assert!(decode_checkpoint(truncated)
            .unwrap_err()
            .to_string()
            .contains("truncated"));

        // dim overflow: huge u64 dim on tensor 'a'
        let mut overflow = ok;
        let dim_offset = 4 + 4 + 4 + 2 + 1 + 1 + 1;
        for b in &mut overflow[dim_offset..dim_offset + 8] {
            *b = 0xFF;
        }
        let err = decode_checkpoint(&overflow).unwrap_err().to_string();
        assert!(err.contains("'a'"), "got: {err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.tensors, ckpt.tensors);
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        use crate::backbone::GroupSpec;
        use crate::model::HeadInit;
        use rand::SeedableRng;

        let cfg = BackboneConfig {
            input_size: 16,
            pre_size: 18,
            in_channels: 3,
            groups: vec![GroupSpec { convs: 1, channels: 4 }, GroupSpec { convs: 1, channels: 6 }],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let backbone = BackboneParams::<f32>::init(&cfg, 3, &mut rng);
        let model = WeatherModel::new(
            cfg,
            backbone,
            vec!["a".into(), "b".into(), "c".into()],
            LabelOrder::new(vec![2, 0, 1]).unwrap(),
            3,
            6,
            HeadMode::PerStep,
            HeadInit::Xavier,
            &mut rng,
        )
        .unwrap();

        let ckpt = model_to_checkpoint(&model);
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = model_from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();

        assert_eq!(back.class_names, model.class_names);
        assert_eq!(back.order, model.order);
        assert_eq!(back.head_mode, model.head_mode);
        let bits = |m: &WeatherModel<f32>| -> Vec<u32> {
            let mut named = Vec::new();
            m.visit_all(&mut named);
            named
                .iter()
                .flat_map(|(_, t, _)| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&back), bits(&model));

        // backbone extraction also works from the full checkpoint
        let (bb, bb_cfg, classes) =
            backbone_from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(bb_cfg, model.backbone_cfg);
        assert_eq!(classes, model.class_names);
        assert_eq!(bb.head_w.data(), model.backbone.head_w.data());
    }
}
