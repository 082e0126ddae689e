//! Text tensor format for [`NetworkParams`].
//!
//! ```text
//! cirl-seqnet v1
//! cell gru
//! input_dim <I>
//! hidden_dim <H>
//! output_dim <O>
//! params <count>
//! <value>        one line per parameter, flat layout order, 17 significant digits
//! end
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{NetDims, NetworkParams};
use crate::error::{CirlError, Result};

pub const PARAMS_MAGIC: &str = "cirl-seqnet v1";

pub fn write_params<W: Write>(params: &NetworkParams, mut out: W) -> Result<()> {
    let d = params.dims();
    writeln!(out, "{PARAMS_MAGIC}")?;
    writeln!(out, "cell gru")?;
    writeln!(out, "input_dim {}", d.input)?;
    writeln!(out, "hidden_dim {}", d.hidden)?;
    writeln!(out, "output_dim {}", d.output)?;
    writeln!(out, "params {}", d.param_count())?;
    for v in params.as_slice() {
        writeln!(out, "{v:.16e}")?;
    }
    writeln!(out, "end")?;
    Ok(())
}

pub fn read_params<R: Read>(input: R, source_name: &str) -> Result<NetworkParams> {
    let mut lines = BufReader::new(input).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(CirlError::parse(source_name, i + 1, e.to_string())),
            None => Err(CirlError::parse(
                source_name,
                0,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    };

    let (_, magic) = next("header")?;
    if magic.trim() != PARAMS_MAGIC {
        if magic.starts_with("cirl-seqnet") {
            return Err(CirlError::FormatVersion {
                found: magic.trim().to_string(),
                expected: PARAMS_MAGIC.to_string(),
            });
        }
        return Err(CirlError::parse(source_name, 1, "not a seqnet parameter file"));
    }
    let mut field = |key: &str| -> Result<String> {
        let (ln, l) = next(key)?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(CirlError::parse(source_name, ln, format!("expected `{key} <value>`"))),
        }
    };
    let cell = field("cell")?;
    if cell != "gru" {
        return Err(CirlError::parse(source_name, 2, format!("unsupported cell `{cell}`")));
    }
    let num = |s: String, line: usize| -> Result<usize> {
        s.parse()
            .map_err(|_| CirlError::parse(source_name, line, format!("bad integer `{s}`")))
    };
    let input = num(field("input_dim")?, 3)?;
    let hidden = num(field("hidden_dim")?, 4)?;
    let output = num(field("output_dim")?, 5)?;
    let count = num(field("params")?, 6)?;
    let dims = NetDims::new(input, hidden, output).map_err(|e| CirlError::parse(source_name, 5, e.to_string()))?;
    if count != dims.param_count() {
        return Err(CirlError::parse(
            source_name,
            6,
            format!("params {count} inconsistent with dims ({})", dims.param_count()),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, l) = next("parameter value")?;
        let v: f64 = l
            .trim()
            .parse()
            .map_err(|_| CirlError::parse(source_name, ln, format!("bad real `{}`", l.trim())))?;
        data.push(v);
    }
    let (ln, end) = next("end")?;
    if end.trim() != "end" {
        return Err(CirlError::parse(source_name, ln, "expected `end`"));
    }
    NetworkParams::from_vec(dims, data).map_err(|e| CirlError::parse(source_name, 0, e.to_string()))
}

pub fn save_params(params: &NetworkParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_params(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let f = fs::File::open(path)?;
    read_params(f, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqnet::init_network;

    #[test]
    fn round_trip_is_exact() {
        let p = init_network(11, 4, 6, 3).unwrap();
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        let q = read_params(&buf[..], "mem").unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let p = init_network(11, 2, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            read_params(cut.as_bytes(), "mem"),
            Err(CirlError::Parse { .. })
        ));
    }

    #[test]
    fn wrong_version_is_reported() {
        let err = read_params("cirl-seqnet v9\n".as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, CirlError::FormatVersion { .. }));
    }
}
