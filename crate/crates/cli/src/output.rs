//! Deterministic JSON and CSV emission.

use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;

use crate::CliError;

/// Significant digits kept for every floating-point value.
pub const DIGITS: usize = 12;

pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0.0".into()
    } else {
        format!("{:.*e}", DIGITS - 1, v)
    }
}

/// Pretty printer writing floats in fixed-precision exponent form.
struct FixedFormatter<'a>(PrettyFormatter<'a>);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*);)*) => {
        $(fn $name<W: ?Sized + io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl Formatter for FixedFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(fmt_f64(v).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }

    delegate! {
        begin_array();
        end_array();
        begin_array_value(first: bool);
        end_array_value();
        begin_object();
        end_object();
        begin_object_key(first: bool);
        end_object_key();
        begin_object_value();
        end_object_value();
    }
}

/// Canonical text of a value: sorted keys, fixed-precision floats, trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    // round-trip through `Value` so map keys come out sorted
    let v: Value = serde_json::to_value(value).expect("serializable report");
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFormatter(PrettyFormatter::new()));
    v.serialize(&mut ser).expect("in-memory write");
    buf.push(b'\n');
    String::from_utf8(buf).expect("utf-8 json")
}

pub struct OutDir {
    pub path: PathBuf,
    pub written: Vec<String>,
}

impl OutDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(OutDir {
            path: path.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        self.write(name, &to_json(value))
    }
}

/// CSV with a header row and fixed-precision cells.
pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_f64).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_fixed_precision() {
        let s = to_json(&serde_json::json!({"b": 0.1, "a": [1.0, 2, -3.5e-20]}));
        assert_eq!(
            s,
            "{\n  \"a\": [\n    1.00000000000e0,\n    2,\n    -3.50000000000e-20\n  ],\n  \"b\": 1.00000000000e-1\n}\n"
        );
    }

    #[test]
    fn zero_and_nonfinite() {
        assert_eq!(fmt_f64(0.0), "0.0");
        assert_eq!(to_json(&f64::NAN), "null\n");
    }
}
