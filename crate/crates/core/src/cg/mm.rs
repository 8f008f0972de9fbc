//! MatrixMarket coordinate format (real, integer or pattern; general or symmetric).

use std::fmt::Write as _;
use std::path::Path;

use super::csr::CsrMatrix;
use crate::error::{Error, Result};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_matrix_market(text: &str) -> Result<CsrMatrix> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let h: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if h.len() != 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" {
        return Err(parse_err(
            1,
            "expected `%%MatrixMarket matrix coordinate <field> <symmetry>`",
        ));
    }
    if h[2] != "coordinate" {
        return Err(parse_err(
            1,
            format!("only coordinate storage is supported, not `{}`", h[2]),
        ));
    }
    let pattern = match h[3].as_str() {
        "real" | "integer" | "double" => false,
        "pattern" => true,
        f => return Err(parse_err(1, format!("unsupported field `{f}`"))),
    };
    let symmetric = match h[4].as_str() {
        "general" => false,
        "symmetric" => true,
        s => return Err(parse_err(1, format!("unsupported symmetry `{s}`"))),
    };

    let mut body = lines.filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('%'));
    let (size_line, size) = body.next().ok_or_else(|| parse_err(1, "missing size line"))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| parse_err(size_line, format!("`{t}` is not a count")))
        })
        .collect::<Result<_>>()?;
    let [rows, cols, count] = dims[..] else {
        return Err(parse_err(size_line, "size line needs rows, columns and entry count"));
    };
    if symmetric && rows != cols {
        return Err(parse_err(size_line, "a symmetric matrix must be square"));
    }

    let mut entries = Vec::with_capacity(if symmetric { 2 * count } else { count });
    let mut seen = 0;
    for (ln, line) in body {
        let t: Vec<&str> = line.split_whitespace().collect();
        let want = if pattern { 2 } else { 3 };
        if t.len() != want {
            return Err(parse_err(ln, format!("expected {want} fields, found {}", t.len())));
        }
        let index = |s: &str, n: usize| -> Result<usize> {
            let v: usize = s.parse().map_err(|_| parse_err(ln, format!("`{s}` is not an index")))?;
            if v == 0 || v > n {
                return Err(parse_err(ln, format!("index {v} outside 1..={n}")));
            }
            Ok(v - 1)
        };
        let (i, j) = (index(t[0], rows)?, index(t[1], cols)?);
        let v = if pattern {
            1.0
        } else {
            t[2].parse::<f64>()
                .map_err(|_| parse_err(ln, format!("`{}` is not a number", t[2])))?
        };
        entries.push((i, j, v));
        if symmetric && i != j {
            entries.push((j, i, v));
        }
        seen += 1;
        if seen > count {
            return Err(parse_err(ln, format!("more than the {count} declared entries")));
        }
    }
    if seen != count {
        return Err(parse_err(
            text.lines().count(),
            format!("{seen} entries, {count} declared"),
        ));
    }
    CsrMatrix::from_triplets(rows, cols, entries)
}

pub fn load_matrix_market(path: &Path) -> Result<CsrMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_market(&text)
}

/// Writes a symmetric matrix as its lower triangle, or any matrix as `general`.
pub fn to_matrix_market(mat: &CsrMatrix, symmetric: bool) -> String {
    let mut out = String::new();
    let kind = if symmetric { "symmetric" } else { "general" };
    let mut body = String::new();
    let mut count = 0;
    for r in 0..mat.n_rows() {
        let (cols, vals) = mat.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            if symmetric && c > r {
                continue;
            }
            count += 1;
            let _ = writeln!(body, "{} {} {v:e}", r + 1, c + 1);
        }
    }
    let _ = writeln!(out, "%%MatrixMarket matrix coordinate real {kind}");
    let _ = writeln!(out, "{} {} {count}", mat.n_rows(), mat.n_cols());
    out + &body
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_expansion() {
        let text = "%%MatrixMarket matrix coordinate real symmetric\n% comment\n2 2 3\n1 1 4\n2 1 1\n2 2 3\n";
        let m = parse_matrix_market(text).unwrap();
        assert_eq!(m.to_dense(), vec![vec![4.0, 1.0], vec![1.0, 3.0]]);
    }

    #[test]
    fn round_trip() {
        let m = CsrMatrix::trefethen(33);
        assert_eq!(parse_matrix_market(&to_matrix_market(&m, true)).unwrap(), m);
        let g = CsrMatrix::from_dense(&[vec![1.5, 0.0, -2.0]]).unwrap();
        assert_eq!(parse_matrix_market(&to_matrix_market(&g, false)).unwrap(), g);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n3 1 2.0\n";
        match parse_matrix_market(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let bad = "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 x\n";
        assert!(matches!(parse_matrix_market(bad), Err(Error::Parse { line: 3, .. })));
        let short = "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1\n";
        assert!(matches!(parse_matrix_market(short), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_matrix_market("hello"),
            Err(Error::Parse { line: 1, .. })
        ));
        let pat = "%%MatrixMarket matrix coordinate pattern general\n1 2 1\n1 2\n";
        assert_eq!(parse_matrix_market(pat).unwrap().get(0, 1), 1.0);
    }
}
