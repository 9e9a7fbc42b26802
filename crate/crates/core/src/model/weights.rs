//! Weight layout, seeded initialization and the binary weight file.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "TPFNWTS\0"
//! version      u8       1
//! d_model      u32
//! num_heads    u32
//! num_layers   u32
//! mlp_hidden   u32
//! num_classes  u32      0 for a regression head
//! seed         u64
//! array_count  u32
//! per array:
//!   name_len   u16, name (utf-8)
//!   ndim       u8, dims u32 * ndim
//!   data       f32 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, OutputKind};
use crate::tensor::{Elementwise, Seed, Shape, Tensor};

const MAGIC: &[u8; 8] = b"TPFNWTS\0";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
}

/// Query, key, value and output projections, each `[d_model, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor<f32>,
    pub wk: Tensor<f32>,
    pub wv: Tensor<f32>,
    pub wo: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub feature_norm: Norm,
    pub feature_attn: AttentionWeights,
    /// Shared by train self-attention and train-to-test cross-attention.
    pub sample_norm: Norm,
    pub sample_attn: AttentionWeights,
    pub mlp_norm: Norm,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedWeights {
    /// Shared by every feature column: `token = x * feature_w + feature_b`.
    pub feature_w: Tensor<f32>,
    pub feature_b: Tensor<f32>,
    /// `[num_classes, d_model]` table, or `[2, d_model]` rows `(w, b)` applied as `y * w + b`.
    pub label: Tensor<f32>,
    pub missing_label: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub norm: Norm,
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub config: ModelConfig,
    pub embed: EmbedWeights,
    pub layers: Vec<LayerWeights>,
    pub head: HeadWeights,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Ones,
    Zeros,
    Normal,
}

fn vector(d: usize) -> Shape {
    [1, 1, 1, d]
}

fn matrix(r: usize, c: usize) -> Shape {
    [1, 1, r, c]
}

/// Every array in file order with its shape and initializer.
fn layout(config: &ModelConfig) -> Vec<(String, Shape, Init)> {
    let d = config.d_model;
    let mut out = vec![
        ("embed.feature_w".to_string(), vector(d), Init::Normal),
        ("embed.feature_b".to_string(), vector(d), Init::Normal),
        (
            "embed.label".to_string(),
            match config.output {
                OutputKind::Classification { num_classes } => matrix(num_classes, d),
                OutputKind::Regression => matrix(2, d),
            },
            Init::Normal,
        ),
        ("embed.missing_label".to_string(), vector(d), Init::Normal),
    ];
    let norm = |out: &mut Vec<_>, prefix: &str| {
        out.push((format!("{prefix}.gamma"), vector(d), Init::Ones));
        out.push((format!("{prefix}.beta"), vector(d), Init::Zeros));
    };
    let attn = |out: &mut Vec<_>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), matrix(d, d), Init::Normal));
        }
    };
    for i in 0..config.num_layers {
        let p = format!("layers.{i}");
        norm(&mut out, &format!("{p}.feature_norm"));
        attn(&mut out, &format!("{p}.feature_attn"));
        norm(&mut out, &format!("{p}.sample_norm"));
        attn(&mut out, &format!("{p}.sample_attn"));
        norm(&mut out, &format!("{p}.mlp_norm"));
        out.push((format!("{p}.mlp.w1"), matrix(d, config.mlp_hidden), Init::Normal));
        out.push((format!("{p}.mlp.b1"), vector(config.mlp_hidden), Init::Zeros));
        out.push((format!("{p}.mlp.w2"), matrix(config.mlp_hidden, d), Init::Normal));
        out.push((format!("{p}.mlp.b2"), vector(d), Init::Zeros));
    }
    norm(&mut out, "head.norm");
    out.push(("head.w".to_string(), matrix(d, config.output.width()), Init::Normal));
    out.push(("head.b".to_string(), vector(config.output.width()), Init::Zeros));
    out
}

struct Arrays(BTreeMap<String, Tensor<f32>>);

impl Arrays {
    fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        self.0.remove(name).ok_or_else(|| Error::Format {
            field: name.to_string(),
            detail: "array missing".into(),
        })
    }

    fn norm(&mut self, prefix: &str) -> Result<Norm> {
        Ok(Norm {
            gamma: self.take(&format!("{prefix}.gamma"))?,
            beta: self.take(&format!("{prefix}.beta"))?,
        })
    }

    fn attn(&mut self, prefix: &str) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            wq: self.take(&format!("{prefix}.wq"))?,
            wk: self.take(&format!("{prefix}.wk"))?,
            wv: self.take(&format!("{prefix}.wv"))?,
            wo: self.take(&format!("{prefix}.wo"))?,
        })
    }

    fn assemble(mut self, config: ModelConfig) -> Result<WeightSet> {
        let embed = EmbedWeights {
            feature_w: self.take("embed.feature_w")?,
            feature_b: self.take("embed.feature_b")?,
            label: self.take("embed.label")?,
            missing_label: self.take("embed.missing_label")?,
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("layers.{i}");
            layers.push(LayerWeights {
                feature_norm: self.norm(&format!("{p}.feature_norm"))?,
                feature_attn: self.attn(&format!("{p}.feature_attn"))?,
                sample_norm: self.norm(&format!("{p}.sample_norm"))?,
                sample_attn: self.attn(&format!("{p}.sample_attn"))?,
                mlp_norm: self.norm(&format!("{p}.mlp_norm"))?,
                mlp: MlpWeights {
                    w1: self.take(&format!("{p}.mlp.w1"))?,
                    b1: self.take(&format!("{p}.mlp.b1"))?,
                    w2: self.take(&format!("{p}.mlp.w2"))?,
                    b2: self.take(&format!("{p}.mlp.b2"))?,
                },
            });
        }
        let head = HeadWeights {
            norm: self.norm("head.norm")?,
            w: self.take("head.w")?,
            b: self.take("head.b")?,
        };
        if let Some(extra) = self.0.keys().next() {
            return Err(Error::Format {
                field: extra.clone(),
                detail: "unexpected array".into(),
            });
        }
        Ok(WeightSet {
            config,
            embed,
            layers,
            head,
        })
    }
}

impl WeightSet {
    /// Seeded scaled-normal init: matrices and embeddings draw N(0, 1/d_model),
    /// norm gains start at 1 and biases at 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let scale = 1.0 / (config.d_model as f32).sqrt();
        let arrays = layout(config)
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape, init))| {
                let t = match init {
                    Init::Ones => Tensor::full(shape, 1.0),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Normal => {
                        Tensor::randn(shape, config.seed.derive(i as u64)).apply(Elementwise::Scale(scale))?
                    }
                };
                Ok((name, t))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Arrays(arrays).assemble(*config)
    }

    /// Norm gains at 1, every other array zero.
    pub(crate) fn blank(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let arrays = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let fill = if init == Init::Ones { 1.0 } else { 0.0 };
                (name, Tensor::full(shape, fill))
            })
            .collect();
        Arrays(arrays).assemble(*config)
    }

    /// All arrays in file order.
    pub fn named_arrays(&self) -> Vec<(String, &Tensor<f32>)> {
        fn norm<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, p: &str, n: &'a Norm) {
            out.push((format!("{p}.gamma"), &n.gamma));
            out.push((format!("{p}.beta"), &n.beta));
        }
        fn attn<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, p: &str, a: &'a AttentionWeights) {
            for (name, t) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                out.push((format!("{p}.{name}"), t));
            }
        }
        let mut out: Vec<(String, &Tensor<f32>)> = vec![
            ("embed.feature_w".into(), &self.embed.feature_w),
            ("embed.feature_b".into(), &self.embed.feature_b),
            ("embed.label".into(), &self.embed.label),
            ("embed.missing_label".into(), &self.embed.missing_label),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            norm(&mut out, &format!("{p}.feature_norm"), &layer.feature_norm);
            attn(&mut out, &format!("{p}.feature_attn"), &layer.feature_attn);
            norm(&mut out, &format!("{p}.sample_norm"), &layer.sample_norm);
            attn(&mut out, &format!("{p}.sample_attn"), &layer.sample_attn);
            norm(&mut out, &format!("{p}.mlp_norm"), &layer.mlp_norm);
            out.push((format!("{p}.mlp.w1"), &layer.mlp.w1));
            out.push((format!("{p}.mlp.b1"), &layer.mlp.b1));
            out.push((format!("{p}.mlp.w2"), &layer.mlp.w2));
            out.push((format!("{p}.mlp.b2"), &layer.mlp.b2));
        }
        norm(&mut out, "head.norm", &self.head.norm);
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        for v in [
            c.d_model,
            c.num_heads,
            c.num_layers,
            c.mlp_hidden,
            c.output.num_classes(),
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&c.seed.0.to_le_bytes());
        let arrays = self.named_arrays();
        buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(4);
            for d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format {
                field: "magic".into(),
                detail: "not a weight file".into(),
            });
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(Error::Format {
                field: "version".into(),
                detail: format!("unsupported version {version}"),
            });
        }
        let d_model = r.u32("config.d_model")? as usize;
        let num_heads = r.u32("config.num_heads")? as usize;
        let num_layers = r.u32("config.num_layers")? as usize;
        let mlp_hidden = r.u32("config.mlp_hidden")? as usize;
        let num_classes = r.u32("config.num_classes")? as usize;
        let seed = Seed(u64::from_le_bytes(r.take(8, "config.seed")?.try_into().unwrap()));
        let config = ModelConfig {
            d_model,
            num_heads,
            num_layers,
            mlp_hidden,
            output: if num_classes == 0 {
                OutputKind::Regression
            } else {
                OutputKind::Classification { num_classes }
            },
            seed,
        };
        config.validate().map_err(|e| Error::Format {
            field: "config".into(),
            detail: e.to_string(),
        })?;

        let expected: BTreeMap<String, Shape> = layout(&config).into_iter().map(|(n, s, _)| (n, s)).collect();
        let count = r.u32("array_count")? as usize;
        if count != expected.len() {
            return Err(Error::Format {
                field: "array_count".into(),
                detail: format!("expected {} arrays, found {count}", expected.len()),
            });
        }
        let mut arrays = BTreeMap::new();
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, &format!("array[{i}].name_len"))?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("array[{i}].name"))?)
                .map_err(|_| Error::Format {
                    field: format!("array[{i}].name"),
                    detail: "not utf-8".into(),
                })?
                .to_string();
            let ndim = r.take(1, &format!("{name}.ndim"))?[0] as usize;
            if ndim == 0 || ndim > 4 {
                return Err(Error::Format {
                    field: format!("{name}.ndim"),
                    detail: format!("rank {ndim} not in 1..=4"),
                });
            }
            let mut shape = [1usize; 4];
            for slot in shape[4 - ndim..].iter_mut() {
                *slot = r.u32(&format!("{name}.shape"))? as usize;
            }
            let want = expected.get(&name).ok_or_else(|| Error::Format {
                field: name.clone(),
                detail: "unexpected array".into(),
            })?;
            if *want != shape {
                return Err(Error::Format {
                    field: name.clone(),
                    detail: format!("shape {shape:?} does not match config shape {want:?}"),
                });
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &format!("{name}.data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if arrays.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
                return Err(Error::Format {
                    field: name,
                    detail: "duplicate array".into(),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                field: "trailer".into(),
                detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            });
        }
        Arrays(arrays).assemble(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format {
                field: field.to_string(),
                detail: format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_hidden: 16,
            output: OutputKind::Classification { num_classes: 3 },
            seed: Seed(7),
        }
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(WeightSet::init(&config()).unwrap(), WeightSet::init(&config()).unwrap());
        let other = WeightSet::init(&ModelConfig {
            seed: Seed(8),
            ..config()
        })
        .unwrap();
        assert_ne!(WeightSet::init(&config()).unwrap(), other);
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        for cfg in [
            config(),
            ModelConfig {
                output: OutputKind::Regression,
                ..config()
            },
        ] {
            let w = WeightSet::init(&cfg).unwrap();
            w.save(&path).unwrap();
            let back = WeightSet::load(&path).unwrap();
            assert_eq!(w.to_bytes(), back.to_bytes());
            assert_eq!(w, back);
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = WeightSet::init(&config()).unwrap().to_bytes();
        for cut in [3, 20, 40, bytes.len() - 1] {
            match WeightSet::from_bytes(&bytes[..cut]) {
                Err(Error::Format { detail, .. }) => assert!(detail.contains("truncated") || cut < 9, "{detail}"),
                other => panic!("cut {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn shape_mismatch_names_array() {
        let mut bytes = WeightSet::init(&config()).unwrap().to_bytes();
        // First array's first dim sits after header (8+1+20+8+4), name_len (2), name, ndim (1).
        let name = b"embed.feature_w";
        let dim0 = 8 + 1 + 20 + 8 + 4 + 2 + name.len() + 1;
        bytes[dim0] = 2;
        match WeightSet::from_bytes(&bytes) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "embed.feature_w"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = WeightSet::init(&config()).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(WeightSet::from_bytes(&bytes), Err(Error::Format { field, .. }) if field == "magic"));
    }

    #[test]
    fn layout_matches_named_arrays() {
        let w = WeightSet::init(&config()).unwrap();
        let names: Vec<String> = w.named_arrays().into_iter().map(|(n, _)| n).collect();
        let expected: Vec<String> = layout(&config()).into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, expected);
    }
}
