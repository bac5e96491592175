//! Plain-text checkpoints of both predictor networks and their Adam state.
//!
//! ```text
//! depthvo-checkpoint 1
//! epoch <completed epochs>
//! section depth <n>        followed by params, then Adam m, then Adam v
//! adam <step> <lr> <beta1> <beta2> <eps>
//! <3n values, one per line>
//! section pose <n>
//! ...
//! ```
//!
//! Values are written with Rust's shortest round-trip `{:e}` form, so loading
//! restores every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use depthvo_core::nets::{AdamState, LayerStack};
use depthvo_core::solver::Predictors;

use crate::error::{self, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "depthvo-checkpoint";

pub fn encode_checkpoint(p: &Predictors) -> String {
    let mut s = format!("{MAGIC} {CHECKPOINT_VERSION}\nepoch {}\n", p.epoch);
    for (name, net, adam) in [("depth", &p.depth, &p.depth_adam), ("pose", &p.pose, &p.pose_adam)] {
        writeln!(s, "section {name} {}", net.param_count()).unwrap();
        writeln!(s, "adam {} {:e} {:e} {:e} {:e}", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps).unwrap();
        for v in net.params().iter().chain(&adam.m).chain(&adam.v) {
            writeln!(s, "{v:e}").unwrap();
        }
    }
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    origin: &'a Path,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let (i, l) = self
            .inner
            .next()
            .ok_or_else(|| Error::parse(self.origin, self.line + 1, "unexpected end of checkpoint"))?;
        self.line = i + 1;
        Ok(l.trim())
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.origin, self.line, msg)
    }

    fn fields(&mut self, key: &str, n: usize) -> Result<Vec<&'a str>> {
        let l = self.next()?;
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return Err(self.err(format!("expected `{key}` line")));
        }
        let rest: Vec<&str> = it.collect();
        if rest.len() != n {
            return Err(self.err(format!("`{key}` needs {n} fields")));
        }
        Ok(rest)
    }

    fn parse<T: std::str::FromStr>(&self, t: &str) -> Result<T> {
        t.parse().map_err(|_| self.err(format!("invalid value {t:?}")))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                let t = self.next()?;
                let v: f64 = self.parse(t)?;
                if v.is_finite() { Ok(v) } else { Err(self.err("non-finite value")) }
            })
            .collect()
    }
}

fn read_section(lines: &mut Lines<'_>, name: &str, net: &mut LayerStack, adam: &mut AdamState) -> Result<()> {
    let head = lines.fields("section", 2)?;
    if head[0] != name {
        return Err(lines.err(format!("expected section {name}")));
    }
    let n: usize = lines.parse(head[1])?;
    if n != net.param_count() {
        return Err(lines.err(format!("{name} network has {} parameters, checkpoint has {n}", net.param_count())));
    }
    let a = lines.fields("adam", 5)?;
    adam.step = lines.parse(a[0])?;
    adam.lr = lines.parse(a[1])?;
    adam.beta1 = lines.parse(a[2])?;
    adam.beta2 = lines.parse(a[3])?;
    adam.eps = lines.parse(a[4])?;
    net.set_params(lines.values(n)?)?;
    adam.m = lines.values(n)?;
    adam.v = lines.values(n)?;
    Ok(())
}

pub fn decode_checkpoint(text: &str, origin: &Path) -> Result<Predictors> {
    let mut lines = Lines { inner: text.lines().enumerate(), origin, line: 0 };
    let version = lines.fields(MAGIC, 1)?;
    if version[0] != CHECKPOINT_VERSION.to_string() {
        return Err(lines.err(format!("unsupported checkpoint version {}", version[0])));
    }
    let epoch = lines.fields("epoch", 1)?;
    let mut p = Predictors::new(0, 1e-3)?;
    p.epoch = lines.parse(epoch[0])?;
    read_section(&mut lines, "depth", &mut p.depth, &mut p.depth_adam)?;
    read_section(&mut lines, "pose", &mut p.pose, &mut p.pose_adam)?;
    Ok(p)
}

pub fn save_checkpoint(path: &Path, p: &Predictors) -> Result<()> {
    error::write(path, encode_checkpoint(p))
}

pub fn load_checkpoint(path: &Path) -> Result<Predictors> {
    decode_checkpoint(&error::read_text(path)?, path)
}
