//! Model persistence with bit-exact round trips.
//!
//! Binary layout: magic `MMX1`, format version u32, a length-prefixed UTF-8
//! metadata block (model dimensions, ordered modality grammar with drop
//! probabilities, ordinal normalization statistics), then every parameter in
//! canonical traversal order as: name length u32, name bytes, rank u32,
//! dims u32 x rank, little-endian f32 payload. All integers little-endian.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MixerModel, ModalityKind, ModalitySpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMX1";
pub const VERSION: u32 = 1;

// ── Save ────────────────────────────────────────────────────────────────────

pub fn save(model: &MixerModel<f32>, path: &Path) -> Result<()> {
    let mut meta = String::new();
    meta.push_str(&format!("d = {}\n", model.d()));
    meta.push_str(&format!("h = {}\n", model.h()));
    meta.push_str(&format!("scale_full_dim = {}\n", model.scale_full_dim()));
    let widths: Vec<String> = model.channel_widths().iter().map(|w| w.to_string()).collect();
    meta.push_str(&format!("channel_widths = {}\n", widths.join(",")));
    meta.push_str(&format!("encoder_layers = {}\n", model.encoder_layers()));
    let mods: Vec<String> = model.specs().iter().map(spec_token).collect();
    meta.push_str(&format!("modalities = {}\n", mods.join(", ")));
    for spec in model.specs() {
        if matches!(spec.kind, ModalityKind::Ordinal) {
            if let Some((mean, std)) = model.ordinal_stats(&spec.name)? {
                // f64 Display round-trips exactly, so stats survive bitwise.
                meta.push_str(&format!("stats.{} = {},{}\n", spec.name, mean, std));
            }
        }
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    model.visit_params(&mut |name, t| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// `name:kind[:args][:p=prob]`, e.g. `scan:image:16x16x16:p=0.5`.
fn spec_token(spec: &ModalitySpec) -> String {
    let kind = match spec.kind {
        ModalityKind::Ordinal => "ordinal".to_string(),
        ModalityKind::Categorical { vocab } => format!("categorical:{}", vocab),
        ModalityKind::Image { dims } => format!("image:{}x{}x{}", dims.0, dims.1, dims.2),
    };
    format!("{}:{}:p={}", spec.name, kind, spec.p_drop)
}

/// Parse one modality token of the grammar written by [`spec_token`].
pub fn parse_spec_token(token: &str) -> Result<ModalitySpec> {
    let parts: Vec<&str> = token.trim().split(':').collect();
    if parts.len() < 2 {
        return Err(Error::config(format!(
            "modality '{}' must look like name:kind[:args][:p=prob]",
            token.trim()
        )));
    }
    let name = parts[0];
    let mut rest = &parts[2..];
    let kind = match parts[1] {
        "ordinal" => ModalityKind::Ordinal,
        "categorical" => {
            let vocab_str = rest.first().ok_or_else(|| {
                Error::config(format!("modality '{}': categorical needs a vocab size", name))
            })?;
            let vocab = vocab_str.parse().map_err(|_| {
                Error::config(format!("modality '{}': bad vocab size '{}'", name, vocab_str))
            })?;
            rest = &rest[1..];
            ModalityKind::Categorical { vocab }
        }
        "image" => {
            let dims_str = rest.first().ok_or_else(|| {
                Error::config(format!("modality '{}': image needs dims like 16x16x16", name))
            })?;
            let dims: Vec<usize> = dims_str
                .split('x')
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    Error::config(format!("modality '{}': bad image dims '{}'", name, dims_str))
                })?;
            if dims.len() != 3 {
                return Err(Error::config(format!(
                    "modality '{}': image dims '{}' must have three axes",
                    name, dims_str
                )));
            }
            rest = &rest[1..];
            ModalityKind::Image { dims: (dims[0], dims[1], dims[2]) }
        }
        other => {
            return Err(Error::config(format!(
                "modality '{}': unknown kind '{}', expected ordinal, categorical, or image",
                name, other
            )))
        }
    };
    let mut spec = ModalitySpec::new(name, kind);
    match rest {
        [] => {}
        [p] if p.starts_with("p=") => {
            let prob: f64 = p[2..]
                .parse()
                .map_err(|_| Error::config(format!("modality '{}': bad probability '{}'", name, p)))?;
            spec = spec.with_p_drop(prob);
        }
        [extra, ..] => {
            return Err(Error::config(format!(
                "modality '{}': unexpected trailing part '{}'",
                name, extra
            )))
        }
    }
    Ok(spec)
}

// ── Load ────────────────────────────────────────────────────────────────────

pub fn load(path: &Path) -> Result<MixerModel<f32>> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };

    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, not a model checkpoint",
            path.display(),
            magic
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {}, expected {}",
            path.display(),
            version,
            VERSION
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta = std::str::from_utf8(cur.take(meta_len)?)
        .map_err(|_| Error::format(format!("{}: metadata is not UTF-8", path.display())))?
        .to_string();

    let fields = parse_metadata(path, &meta)?;
    let d = field_parse(path, &fields, "d")?;
    let h = field_parse(path, &fields, "h")?;
    let scale_full_dim = field_parse(path, &fields, "scale_full_dim")?;
    let encoder_layers = field_parse(path, &fields, "encoder_layers")?;
    let widths: Vec<usize> = field(path, &fields, "channel_widths")?
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(format!("{}: bad channel_widths", path.display())))?;
    let specs: Vec<ModalitySpec> = field(path, &fields, "modalities")?
        .split(", ")
        .map(parse_spec_token)
        .collect::<Result<_>>()?;

    let mut model = MixerModel::<f32>::new(specs, d, h, scale_full_dim, &widths, encoder_layers, 0)?;
    for (key, value) in &fields {
        if let Some(name) = key.strip_prefix("stats.") {
            let (mean, std) = value.split_once(',').ok_or_else(|| {
                Error::format(format!("{}: stats for '{}' need mean,std", path.display(), name))
            })?;
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::format(format!("{}: bad stats number '{}'", path.display(), s))
                })
            };
            model.set_ordinal_stats(name, parse(mean)?, parse(std)?)?;
        }
    }

    let mut params: HashMap<String, Tensor<f32>> = HashMap::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format(format!("{}: parameter name is not UTF-8", path.display())))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::format(format!(
                "{}: duplicate parameter '{}'",
                path.display(),
                name
            )));
        }
    }

    let mut missing = Vec::new();
    let mut shape_err = None;
    model.visit_params_mut(&mut |name, t| {
        match params.remove(&name) {
            Some(saved) if saved.shape() == t.shape() => {
                t.set_data(saved.to_vec()).expect("untracked fresh parameter");
            }
            Some(saved) if shape_err.is_none() => {
                shape_err = Some(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    name,
                    saved.shape(),
                    t.shape()
                ));
            }
            Some(_) => {}
            None => missing.push(name),
        }
    });
    if let Some(msg) = shape_err {
        return Err(Error::format(format!("{}: {}", path.display(), msg)));
    }
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "{}: missing parameters: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::format(format!(
            "{}: unknown parameter '{}'",
            path.display(),
            extra
        )));
    }
    Ok(model)
}

fn parse_metadata<'a>(path: &Path, meta: &'a str) -> Result<Vec<(&'a str, &'a str)>> {
    let mut out = Vec::new();
    for line in meta.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once(" = ").ok_or_else(|| {
            Error::format(format!("{}: malformed metadata line '{}'", path.display(), line))
        })?;
        out.push((k, v));
    }
    Ok(out)
}

fn field<'a>(path: &Path, fields: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::format(format!("{}: metadata is missing '{}'", path.display(), key)))
}

fn field_parse<T: std::str::FromStr>(
    path: &Path,
    fields: &[(&str, &str)],
    key: &str,
) -> Result<T> {
    let raw = field(path, fields, key)?;
    raw.parse().map_err(|_| {
        Error::format(format!("{}: bad metadata value '{}' for '{}'", path.display(), raw, key))
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "{}: truncated checkpoint (wanted {} bytes at offset {}, have {})",
                self.path.display(),
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cell, ModalityBatch, Value};

    fn small_model() -> MixerModel<f32> {
        let specs = vec![
            ModalitySpec::new("age", ModalityKind::Ordinal).with_p_drop(0.25),
            ModalitySpec::new("site", ModalityKind::Categorical { vocab: 3 }),
        ];
        let mut m = MixerModel::new(specs, 16, 2, false, &[4, 8, 16, 16], 1, 7).unwrap();
        m.set_ordinal_stats("age", 71.25, 9.5).unwrap();
        m
    }

    fn probe_batch() -> ModalityBatch {
        ModalityBatch {
            cells: vec![
                vec![Cell::present(Value::Ordinal(63.0)), Cell::present(Value::Categorical(2))],
                vec![Cell::missing(), Cell::present(Value::Categorical(0))],
            ],
        }
    }

    #[test]
    fn roundtrip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model();
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();

        let mut orig = Vec::new();
        model.visit_params(&mut |n, t| orig.push((n, t.shape().to_vec(), t.to_vec())));
        let mut back = Vec::new();
        loaded.visit_params(&mut |n, t| back.push((n, t.shape().to_vec(), t.to_vec())));
        assert_eq!(orig.len(), back.len());
        for (a, b) in orig.iter().zip(&back) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
            assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(loaded.ordinal_stats("age").unwrap(), Some((71.25, 9.5)));
        assert_eq!(loaded.specs()[0].p_drop, 0.25);
        assert_eq!(loaded.specs()[1].kind, ModalityKind::Categorical { vocab: 3 });
    }

    #[test]
    fn roundtrip_preserves_eval_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model();
        let batch = probe_batch();
        let before = model.predict(&batch).unwrap();
        save(&model, &path).unwrap();
        let after = load(&path).unwrap().predict(&batch).unwrap();
        for (a, b) in before.probs.iter().zip(&after.probs) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
        assert_eq!(before.labels, after.labels);
    }

    #[test]
    fn image_specs_survive_the_grammar() {
        let spec = ModalitySpec::new("scan", ModalityKind::Image { dims: (16, 20, 24) })
            .with_p_drop(0.75);
        let token = spec_token(&spec);
        assert_eq!(token, "scan:image:16x20x24:p=0.75");
        let back = parse_spec_token(&token).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn spec_grammar_rejects_malformed_tokens() {
        assert!(parse_spec_token("lonely").is_err());
        assert!(parse_spec_token("x:categorical").is_err());
        assert!(parse_spec_token("x:categorical:abc").is_err());
        assert!(parse_spec_token("x:image:16x16").is_err());
        assert!(parse_spec_token("x:ordinal:p=huh").is_err());
        assert!(parse_spec_token("x:ordinal:stray").is_err());
        assert!(parse_spec_token("x:laser").is_err());
        assert!(parse_spec_token("x:ordinal:p=0.5:more").is_err());
    }

    #[test]
    fn default_p_drop_roundtrips_without_stats() {
        let spec = parse_spec_token("mmse:ordinal").unwrap();
        assert_eq!(spec.p_drop, crate::model::DEFAULT_P_DROP);
        let spec = parse_spec_token("mmse:ordinal:p=0").unwrap();
        assert_eq!(spec.p_drop, 0.0);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model();
        save(&model, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        std::fs::write(&path, bad_magic).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));

        let bad_version = {
            let mut b = good.clone();
            b[4] = 9;
            b
        };
        std::fs::write(&path, bad_version).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn unfitted_ordinal_stays_unfitted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let specs = vec![ModalitySpec::new("age", ModalityKind::Ordinal)];
        let model = MixerModel::<f32>::new(specs, 8, 2, false, &[4, 8, 16, 16], 1, 0).unwrap();
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.ordinal_stats("age").unwrap(), None);
    }
}
