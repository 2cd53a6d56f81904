use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::lattice::site::Dim;
use crate::lattice::walk::WalkPath;

/// Writes a walk snapshot: header line `d N start_coords`, then the N
/// direction codes, whitespace-separated. The format round-trips bit-exactly.
pub fn write_snapshot(walk: &WalkPath, mut w: impl Write) -> Result<()> {
    let start = walk.start_coords();
    let mut header = format!("{} {}", walk.dim().get(), walk.n_steps());
    for c in start {
        header.push(' ');
        header.push_str(&c.to_string());
    }
    writeln!(w, "{header}")?;
    let codes: Vec<String> = walk.step_codes().iter().map(|c| c.to_string()).collect();
    writeln!(w, "{}", codes.join(" "))?;
    Ok(())
}

/// Reads a walk snapshot produced by [`write_snapshot`].
pub fn read_snapshot(r: impl BufRead) -> Result<WalkPath> {
    let mut tokens = Vec::new();
    for line in r.lines() {
        let line = line?;
        tokens.extend(line.split_whitespace().map(|t| t.to_string()));
    }
    let mut it = tokens.iter();
    let d: usize = next_token(&mut it, "dimension")?;
    let n: usize = next_token(&mut it, "step count")?;
    let dim = Dim::new(d)?;
    let mut start = Vec::with_capacity(d);
    for _ in 0..d {
        start.push(next_token(&mut it, "start coordinate")?);
    }
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        steps.push(next_token::<u8>(&mut it, "direction code")?);
    }
    if it.next().is_some() {
        return Err(Error::Parse("trailing tokens in walk snapshot".into()));
    }
    WalkPath::build(dim, &start, steps)
}

fn next_token<'a, T: std::str::FromStr>(
    it: &mut impl Iterator<Item = &'a String>,
    what: &str,
) -> Result<T> {
    let tok = it
        .next()
        .ok_or_else(|| Error::Parse(format!("missing {what} in walk snapshot")))?;
    tok.parse()
        .map_err(|_| Error::Parse(format!("bad {what} `{tok}` in walk snapshot")))
}
