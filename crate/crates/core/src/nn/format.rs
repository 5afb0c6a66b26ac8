//! Plain-text controller files.
//!
//! ```text
//! mftc-controller 1
//! layers 3
//! layer 3 2 linear
//! layer 2 2 tanh
//! layer 2 2 linear
//! scaling none
//! weights 0
//! <out rows of in values>
//! bias 0
//! <out values>
//! ...
//! end
//! ```
//!
//! Numbers are written in Rust's shortest round-trip decimal form, so parse
//! followed by serialize is bit-exact. Blank lines and `#` comments are
//! ignored on input.

use std::fmt::Write as _;
use std::path::Path;

use super::{ActivationKind, InputScaling, LayerSpec, MlpParams};
use crate::error::{Error, Result};

const MAGIC: &str = "mftc-controller";
const VERSION: u32 = 1;

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:?}").expect("writing to a String");
    }
    s
}

pub fn serialize_controller(params: &MlpParams) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "{MAGIC} {VERSION}");
    let _ = writeln!(w, "layers {}", params.layers().len());
    for l in params.layers() {
        let _ = writeln!(w, "layer {} {} {}", l.in_dim, l.out_dim, l.activation.name());
    }
    match params.input_scaling() {
        None => {
            let _ = writeln!(w, "scaling none");
        }
        Some(s) => {
            let _ = writeln!(w, "scaling affine");
            let _ = writeln!(w, "{}", join(&s.shift));
            let _ = writeln!(w, "{}", join(&s.scale));
        }
    }
    for (j, l) in params.layers().iter().enumerate() {
        let (wm, b) = params.layer_params(j);
        let _ = writeln!(w, "weights {j}");
        for r in 0..l.out_dim {
            let _ = writeln!(w, "{}", join(&wm[r * l.in_dim..(r + 1) * l.in_dim]));
        }
        let _ = writeln!(w, "bias {j}");
        let _ = writeln!(w, "{}", join(b));
    }
    let _ = writeln!(w, "end");
    out
}

struct Lines<'a> {
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
                .filter(|(_, l)| !l.is_empty()),
        );
        Self {
            inner: it.peekable(),
            last: 0,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((n, l)) => {
                self.last = n;
                Ok(l)
            }
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, reason: impl std::fmt::Display) -> Error {
        Error::Parse {
            what: "controller file",
            reason: format!("line {}: {reason}", self.last),
        }
    }

    fn keyword(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        Ok(parts.collect())
    }

    fn keyword_usize(&mut self, key: &str) -> Result<usize> {
        let f = self.keyword(key)?;
        parse_usize(self, f.first())
    }

    fn numbers(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| self.err(format!("`{t}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != expected {
            return Err(self.err(format!("expected {expected} values, found {}", vals.len())));
        }
        Ok(vals)
    }
}

fn parse_usize(lines: &Lines<'_>, tok: Option<&&str>) -> Result<usize> {
    tok.ok_or_else(|| lines.err("missing integer"))?
        .parse::<usize>()
        .map_err(|e| lines.err(e))
}

pub fn parse_controller(text: &str) -> Result<MlpParams> {
    let mut lines = Lines::new(text);
    let head = lines.keyword(MAGIC)?;
    let version = parse_usize(&lines, head.first())?;
    if version != VERSION as usize {
        return Err(lines.err(format!("unsupported version {version}")));
    }
    let count = lines.keyword_usize("layers")?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let f = lines.keyword("layer")?;
        let in_dim = parse_usize(&lines, f.first())?;
        let out_dim = parse_usize(&lines, f.get(1))?;
        let name = f.get(2).ok_or_else(|| lines.err("missing activation"))?;
        let activation =
            ActivationKind::from_name(name).ok_or_else(|| lines.err(format!("activation `{name}`")))?;
        layers.push(LayerSpec {
            in_dim,
            out_dim,
            activation,
        });
    }
    if layers.is_empty() {
        return Err(lines.err("no layers"));
    }
    let scaling = match lines.keyword("scaling")?.first().copied() {
        Some("none") => None,
        Some("affine") => {
            let d = layers[0].in_dim;
            let shift = lines.numbers(d)?;
            let scale = lines.numbers(d)?;
            Some(InputScaling { shift, scale })
        }
        _ => return Err(lines.err("scaling must be `none` or `affine`")),
    };
    let mut params = Vec::new();
    for (j, l) in layers.iter().enumerate() {
        let idx = lines.keyword_usize("weights")?;
        if idx != j {
            return Err(lines.err(format!("expected weights {j}")));
        }
        for _ in 0..l.out_dim {
            params.extend(lines.numbers(l.in_dim)?);
        }
        let idx = lines.keyword_usize("bias")?;
        if idx != j {
            return Err(lines.err(format!("expected bias {j}")));
        }
        params.extend(lines.numbers(l.out_dim)?);
    }
    lines.keyword("end")?;
    let net = MlpParams::new(layers, params)?;
    match scaling {
        Some(s) => net.with_input_scaling(s),
        None => Ok(net),
    }
}

pub fn write_controller(params: &MlpParams, path: &Path) -> Result<()> {
    std::fs::write(path, serialize_controller(params)).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_controller(path: &Path) -> Result<MlpParams> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_controller(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, InitScheme};
    use proptest::prelude::*;

    #[test]
    fn round_trip_with_scaling() {
        let net = Architecture::Nn2
            .build(InitScheme::GlorotUniform, 11)
            .unwrap()
            .with_input_scaling(InputScaling {
                shift: vec![0.0, 1e-300, -3.25],
                scale: vec![1.0 / 3.0, 2.0, 1e10],
            })
            .unwrap();
        let text = serialize_controller(&net);
        let back = parse_controller(&text).unwrap();
        assert_eq!(back, net);
        assert_eq!(serialize_controller(&back), text);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let net = Architecture::Nn1.build(InitScheme::GlorotUniform, 2).unwrap();
        let text = serialize_controller(&net).replace("layer 2 2 tanh", "\n# hidden\nlayer 2 2 tanh # mid");
        assert_eq!(parse_controller(&text).unwrap(), net);
    }

    #[test]
    fn malformed_files_name_the_line() {
        let net = Architecture::Nn1.build(InitScheme::Zeros, 0).unwrap();
        let text = serialize_controller(&net).replace("layer 2 2 tanh", "layer 2 2 relu");
        let err = parse_controller(&text).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        assert!(parse_controller("mftc-controller 9\n").is_err());
        let truncated: String = serialize_controller(&net).lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(parse_controller(&truncated).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_finite_params_round_trip(values in proptest::collection::vec(
            any::<f64>().prop_filter("finite", |v| v.is_finite()), 20)) {
            let net = MlpParams::new(
                Architecture::Nn1.build(InitScheme::Zeros, 0).unwrap().layers().to_vec(),
                values,
            ).unwrap();
            let back = parse_controller(&serialize_controller(&net)).unwrap();
            prop_assert_eq!(back.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            net.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
