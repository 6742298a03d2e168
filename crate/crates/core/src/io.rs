//! Saving and loading network parameters.
//!
//! Two encodings share one header. The text form is line based:
//!
//! ```text
//! fisher-ngd-params 1
//! activation tanh
//! seed 42
//! widths 4 5 3
//! sigma_w2 1.5e0 1.5e0
//! sigma_b2 1e-1 1e-1
//! residual 1e0 7e-1          (residual nets only: sigma_v2 alpha)
//! weights 0 5 4              (layer rows cols, then one line per row)
//! ...
//! biases 0 5                 (layer len, then one line)
//! ...
//! mixer 0 5 5                (residual nets only)
//! ...
//! ```
//!
//! Numbers use the shortest representation that parses back to the same
//! bits, so a save/load cycle is exact. The binary form is the magic
//! `FNGDBIN1`, a little-endian `u64` header length, the header lines above
//! (no values), then every array in the same order as little-endian `f64`.

use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::nets::{Model, NetConfig, NetworkParams, ResNet, ResNetConfig};

const TEXT_MAGIC: &str = "fisher-ngd-params 1";
const BINARY_MAGIC: &[u8; 8] = b"FNGDBIN1";

fn fmt_values<'a>(out: &mut String, values: impl IntoIterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v:e}").expect("write to string");
    }
    out.push('\n');
}

fn header(model: &Model) -> String {
    let cfg = &model.params().config;
    let mut h = String::new();
    writeln!(h, "{TEXT_MAGIC}").unwrap();
    writeln!(h, "activation {}", cfg.activation).unwrap();
    writeln!(h, "seed {}", cfg.seed).unwrap();
    let widths: Vec<String> = cfg.layer_widths.iter().map(|w| w.to_string()).collect();
    writeln!(h, "widths {}", widths.join(" ")).unwrap();
    h.push_str("sigma_w2 ");
    fmt_values(&mut h, &cfg.sigma_w2);
    h.push_str("sigma_b2 ");
    fmt_values(&mut h, &cfg.sigma_b2);
    if let Model::Residual(r) = model {
        writeln!(h, "residual {:e} {:e}", r.config.sigma_v2, r.config.alpha).unwrap();
    }
    h
}

/// Arrays in storage order with their section labels.
fn sections(model: &Model) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let p = model.params();
    let mut out = Vec::new();
    for (k, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
        out.push((format!("weights {k} {} {}", w.nrows(), w.ncols()), vec![w.nrows(), w.ncols()], w.iter().copied().collect()));
        out.push((format!("biases {k} {}", b.len()), vec![b.len()], b.to_vec()));
    }
    if let Model::Residual(r) = model {
        for (k, v) in r.mixers.iter().enumerate() {
            out.push((format!("mixer {k} {} {}", v.nrows(), v.ncols()), vec![v.nrows(), v.ncols()], v.iter().copied().collect()));
        }
    }
    out
}

pub fn to_text(model: &Model) -> String {
    let mut s = header(model);
    for (label, shape, data) in sections(model) {
        s.push_str(&label);
        s.push('\n');
        let cols = *shape.last().unwrap_or(&1);
        for row in data.chunks(cols.max(1)) {
            fmt_values(&mut s, row);
        }
    }
    s
}

pub fn to_binary(model: &Model) -> Vec<u8> {
    let mut h = header(model);
    let secs = sections(model);
    for (label, _, _) in &secs {
        h.push_str(label);
        h.push('\n');
    }
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(h.as_bytes());
    for (_, _, data) in secs {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Header {
    activation: ActivationKind,
    seed: u64,
    widths: Vec<usize>,
    sigma_w2: Vec<f64>,
    sigma_b2: Vec<f64>,
    residual: Option<(f64, f64)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_f64s(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number '{t}'")))).collect()
}

fn field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| bad(format!("missing '{key}' line")))?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' ').or(if rest.is_empty() { Some("") } else { None }))
        .ok_or_else(|| bad(format!("expected '{key}', found '{line}'")))
}

fn parse_header<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Header> {
    if lines.next() != Some(TEXT_MAGIC) {
        return Err(bad("missing format line"));
    }
    let activation = field(lines.next(), "activation")?.parse()?;
    let seed = field(lines.next(), "seed")?.trim().parse().map_err(|_| bad("bad seed"))?;
    let widths = field(lines.next(), "widths")?
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| bad("bad width")))
        .collect::<Result<Vec<_>>>()?;
    let sigma_w2 = parse_f64s(field(lines.next(), "sigma_w2")?)?;
    let sigma_b2 = parse_f64s(field(lines.next(), "sigma_b2")?)?;
    Ok(Header { activation, seed, widths, sigma_w2, sigma_b2, residual: None })
}

fn expect_section(line: Option<&str>, expected: &str) -> Result<()> {
    match line {
        Some(l) if l == expected => Ok(()),
        Some(l) => Err(bad(format!("expected section '{expected}', found '{l}'"))),
        None => Err(bad(format!("missing section '{expected}'"))),
    }
}

fn build(h: Header, mut next_array: impl FnMut(&str, usize) -> Result<Vec<f64>>) -> Result<Model> {
    let config = NetConfig::with_layer_variances(h.widths.clone(), h.sigma_w2, h.sigma_b2, h.activation, h.seed)?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for k in 0..config.num_layers() {
        let (r, c) = (h.widths[k + 1], h.widths[k]);
        let w = next_array(&format!("weights {k} {r} {c}"), r * c)?;
        weights.push(Array2::from_shape_vec((r, c), w).expect("length checked"));
        biases.push(Array1::from(next_array(&format!("biases {k} {r}"), r)?));
    }
    let params = NetworkParams { weights, biases, config: config.clone() };
    params.validate()?;
    match h.residual {
        None => Ok(Model::Plain(params)),
        Some((sigma_v2, alpha)) => {
            let rc = ResNetConfig::new(config, sigma_v2, alpha)?;
            let n = rc.width();
            let mut mixers = Vec::new();
            for k in 0..params.num_layers() {
                let v = next_array(&format!("mixer {k} {n} {n}"), n * n)?;
                mixers.push(Array2::from_shape_vec((n, n), v).expect("length checked"));
            }
            Ok(Model::Residual(ResNet::new(params, mixers, rc)?))
        }
    }
}

fn parse_residual<'a>(lines: &mut std::iter::Peekable<impl Iterator<Item = &'a str>>, h: &mut Header) -> Result<()> {
    if let Some(rest) = lines.peek().and_then(|l| l.strip_prefix("residual ")) {
        let v = parse_f64s(rest)?;
        if v.len() != 2 {
            return Err(bad("residual line needs sigma_v2 and alpha"));
        }
        h.residual = Some((v[0], v[1]));
        lines.next();
    }
    Ok(())
}

pub fn from_text(text: &str) -> Result<Model> {
    let mut lines = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).peekable();
    let mut h = parse_header(&mut lines)?;
    parse_residual(&mut lines, &mut h)?;
    build(h, |label, len| {
        expect_section(lines.next(), label)?;
        let cols: usize = label.split(' ').next_back().and_then(|t| t.parse().ok()).unwrap_or(1);
        let rows = if cols == 0 { 0 } else { len / cols };
        let mut data = Vec::with_capacity(len);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| bad(format!("truncated section '{label}'")))?;
            let vals = parse_f64s(line)?;
            if vals.len() != cols {
                return Err(bad(format!("row of '{label}' has {} values, expected {cols}", vals.len())));
            }
            data.extend(vals);
        }
        Ok(data)
    })
}

pub fn from_binary(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 || &bytes[..8] != BINARY_MAGIC {
        return Err(bad("not a binary parameter file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let hdr = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let hdr = std::str::from_utf8(hdr).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = hdr.lines().peekable();
    let mut h = parse_header(&mut lines)?;
    parse_residual(&mut lines, &mut h)?;
    let mut pos = 16 + hlen;
    build(h, |label, len| {
        expect_section(lines.next(), label)?;
        let end = pos + 8 * len;
        let chunk = bytes.get(pos..end).ok_or_else(|| bad(format!("truncated data for '{label}'")))?;
        pos = end;
        Ok(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    })
}

pub fn save_text(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(to_text(model).as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn save_binary(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_binary(model))?;
    Ok(())
}

/// Loads either encoding, detected from the first bytes.
pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let starts_binary = f.fill_buf()?.starts_with(BINARY_MAGIC);
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if starts_binary {
        from_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| bad("text parameter file is not UTF-8"))?;
        from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_random;
    use proptest::prelude::*;

    fn bits(m: &Model) -> Vec<u64> {
        let mut v: Vec<u64> = m.params().to_flat().iter().map(|x| x.to_bits()).collect();
        if let Model::Residual(r) = m {
            v.extend(r.mixers.iter().flat_map(|a| a.iter().map(|x| x.to_bits())));
        }
        v
    }

    #[test]
    fn resnet_round_trips_both_encodings() {
        let base = NetConfig::new(vec![5, 5, 5], 1.3, 0.2, ActivationKind::Relu, 3).unwrap();
        let m = Model::Residual(ResNet::init_random(&ResNetConfig::new(base, 0.9, 0.6).unwrap()).unwrap());
        assert_eq!(from_text(&to_text(&m)).unwrap(), m);
        assert_eq!(from_binary(&to_binary(&m)).unwrap(), m);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let cfg = NetConfig::new(vec![2, 3], 1.0, 0.0, ActivationKind::Tanh, 0).unwrap();
        let m = Model::Plain(init_random(&cfg).unwrap());
        let text = to_text(&m).replace("weights 0 3 2", "weights 0 3 3");
        assert!(matches!(from_text(&text), Err(Error::Format(_))));
        assert!(from_binary(b"nonsense-bytes-here").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn text_and_binary_are_bit_exact(
            seed in any::<u64>(),
            widths in proptest::collection::vec(1usize..6, 2..5),
            scale in prop_oneof![Just(1e-300), Just(1.0), Just(1e300)],
        ) {
            let cfg = NetConfig::new(widths, 1.7, 0.3, ActivationKind::Sigmoid, seed).unwrap();
            let mut p = init_random(&cfg).unwrap();
            let flat: Vec<f64> = p.to_flat().iter().map(|v| v * scale).collect();
            p.set_flat(&flat).unwrap();
            let m = Model::Plain(p);
            prop_assert_eq!(bits(&from_text(&to_text(&m)).unwrap()), bits(&m));
            prop_assert_eq!(bits(&from_binary(&to_binary(&m)).unwrap()), bits(&m));
        }
    }
}
