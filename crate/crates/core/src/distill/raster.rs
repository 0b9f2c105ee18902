//! Plain-text rasters of weight maps.
//!
//! Each map is a header line followed by `rows` lines of `cols` comma-separated values:
//!
//! ```text
//! level 0 stride 8 rows 12 cols 12 field i_vlr
//! 0,0,0.71,...
//! ```
//!
//! Maps appear in level order, `i_main` before `i_vlr`.

use std::fmt::Write;

use super::{DistillWeights, LevelWeights};
use crate::error::{Error, Result};

pub fn write_weight_raster(w: &DistillWeights) -> String {
    let mut out = String::new();
    for (l, lw) in w.levels.iter().enumerate() {
        for (field, values) in [("i_main", &lw.i_main), ("i_vlr", &lw.i_vlr)] {
            let _ = writeln!(
                out,
                "level {l} stride {} rows {} cols {} field {field}",
                lw.stride, lw.height, lw.width
            );
            for row in values.chunks(lw.width.max(1)) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
    }
    out
}

fn malformed(line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        line,
        column: 1,
        message: message.into(),
    }
}

pub fn parse_weight_raster(text: &str) -> Result<DistillWeights> {
    let lines: Vec<&str> = text.lines().collect();
    let mut levels: Vec<LevelWeights> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let tok: Vec<&str> = lines[i].split_whitespace().collect();
        if tok.len() != 10 || tok[0] != "level" || tok[2] != "stride" || tok[4] != "rows" || tok[6] != "cols" || tok[8] != "field" {
            return Err(malformed(i + 1, "expected a raster header"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| malformed(i + 1, format!("bad integer {s:?}")));
        let (level, stride, rows, cols) = (num(tok[1])?, num(tok[3])?, num(tok[5])?, num(tok[7])?);
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let ln = i + 1 + r;
            let line = lines.get(ln).ok_or_else(|| malformed(ln + 1, "missing raster row"))?;
            for v in line.split(',') {
                values.push(v.trim().parse::<f32>().map_err(|_| malformed(ln + 1, format!("bad value {v:?}")))?);
            }
        }
        if values.len() != rows * cols {
            return Err(malformed(i + 1, "row lengths do not match cols"));
        }
        if level == levels.len() {
            levels.push(LevelWeights {
                stride,
                height: rows,
                width: cols,
                i_main: Vec::new(),
                i_vlr: Vec::new(),
            });
        } else if level + 1 != levels.len() {
            return Err(malformed(i + 1, "levels out of order"));
        }
        let lw = levels.last_mut().expect("level pushed");
        match tok[9] {
            "i_main" => lw.i_main = values,
            "i_vlr" => lw.i_vlr = values,
            other => return Err(malformed(i + 1, format!("unknown field {other:?}"))),
        }
        i += 1 + rows;
    }
    Ok(DistillWeights { levels })
}
