//! Text graph format.
//!
//! ```text
//! GNNOOD 1
//! N d c E
//! label env f_1 ... f_d        (N lines)
//! EDGES m
//! i j                          (m lines, i < j, each undirected edge once)
//! SPLIT train <ids...>
//! SPLIT iid_val <ids...>
//! SPLIT iid_test <ids...>
//! SPLIT ood_val <ids...>
//! SPLIT ood_test <ids...>
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so
//! `parse_graph(write_graph(g)) == g` bit for bit.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{Graph, SplitMasks};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

const MAGIC: &str = "GNNOOD";
const VERSION: &str = "1";

pub fn write_graph(g: &Graph) -> String {
    let mut s = String::new();
    let n = g.num_nodes();
    writeln!(s, "{MAGIC} {VERSION}").unwrap();
    writeln!(s, "{} {} {} {}", n, g.feature_dim(), g.classes(), g.envs()).unwrap();
    for v in 0..n {
        write!(s, "{} {}", g.labels()[v], g.env_id()[v]).unwrap();
        for x in g.features().row(v) {
            write!(s, " {x:?}").unwrap();
        }
        s.push('\n');
    }
    let edges = g.undirected_edges();
    writeln!(s, "EDGES {}", edges.len()).unwrap();
    for (i, j) in edges {
        writeln!(s, "{i} {j}").unwrap();
    }
    for name in SplitMasks::NAMES {
        write!(s, "SPLIT {name}").unwrap();
        for v in g.splits().by_name(name).expect("known mask") {
            write!(s, " {v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn save_graph(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_graph(g))?;
    Ok(())
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let text = std::fs::read_to_string(path)?;
    parse_graph(&text)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l.split_whitespace().collect()))
            }
            None => Err(Error::Parse {
                line: self.last + 1,
                msg: format!("unexpected end of file, expected {what}"),
            }),
        }
    }
}

fn field<T: FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {what} from {tok:?}"),
    })
}

fn expect_len(toks: &[&str], n: usize, line: usize, what: &str) -> Result<()> {
    if toks.len() != n {
        return Err(Error::Parse {
            line,
            msg: format!("{what}: expected {n} fields, found {}", toks.len()),
        });
    }
    Ok(())
}

pub fn parse_graph(text: &str) -> Result<Graph> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };

    let (ln, toks) = lines.next_line("header")?;
    if toks != [MAGIC, VERSION] {
        return Err(Error::Parse {
            line: ln,
            msg: format!("bad header {:?}, expected \"{MAGIC} {VERSION}\"", toks.join(" ")),
        });
    }
    let (ln, toks) = lines.next_line("size line")?;
    expect_len(&toks, 4, ln, "size line `N d c E`")?;
    let n: usize = field(toks[0], ln, "node count")?;
    let d: usize = field(toks[1], ln, "feature dimension")?;
    let c: usize = field(toks[2], ln, "class count")?;
    let e: usize = field(toks[3], ln, "environment count")?;

    let mut labels = Vec::with_capacity(n);
    let mut env_id = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * d);
    for _ in 0..n {
        let (ln, toks) = lines.next_line("node line")?;
        expect_len(&toks, d + 2, ln, "node line")?;
        let y: usize = field(toks[0], ln, "label")?;
        let env: usize = field(toks[1], ln, "environment")?;
        if y >= c {
            return Err(Error::Parse {
                line: ln,
                msg: format!("label {y} out of range for {c} classes"),
            });
        }
        if env >= e {
            return Err(Error::Parse {
                line: ln,
                msg: format!("environment {env} out of range for {e} environments"),
            });
        }
        labels.push(y);
        env_id.push(env);
        for t in &toks[2..] {
            let x: f64 = field(t, ln, "feature")?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("non-finite feature {t}"),
                });
            }
            feats.push(x);
        }
    }

    let (ln, toks) = lines.next_line("EDGES line")?;
    if toks.len() != 2 || toks[0] != "EDGES" {
        return Err(Error::Parse {
            line: ln,
            msg: "expected `EDGES m`".into(),
        });
    }
    let m: usize = field(toks[1], ln, "edge count")?;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let (ln, toks) = lines.next_line("edge line")?;
        expect_len(&toks, 2, ln, "edge line")?;
        let i: usize = field(toks[0], ln, "edge endpoint")?;
        let j: usize = field(toks[1], ln, "edge endpoint")?;
        if i >= n || j >= n {
            return Err(Error::Parse {
                line: ln,
                msg: format!("edge ({i}, {j}) references a node outside 0..{n}"),
            });
        }
        if i >= j {
            return Err(Error::Parse {
                line: ln,
                msg: format!("edge ({i}, {j}) must be listed once with i < j"),
            });
        }
        edges.push((i, j));
    }

    let mut splits = SplitMasks::default();
    let mut seen = [false; 5];
    for _ in 0..5 {
        let (ln, toks) = lines.next_line("SPLIT line")?;
        if toks.len() < 2 || toks[0] != "SPLIT" {
            return Err(Error::Parse {
                line: ln,
                msg: "expected `SPLIT <name> <ids...>`".into(),
            });
        }
        let Some(slot) = SplitMasks::NAMES.iter().position(|&nm| nm == toks[1]) else {
            return Err(Error::Parse {
                line: ln,
                msg: format!("unknown split {:?}", toks[1]),
            });
        };
        if seen[slot] {
            return Err(Error::Parse {
                line: ln,
                msg: format!("split {} listed twice", toks[1]),
            });
        }
        seen[slot] = true;
        let mask = splits.by_name_mut(toks[1]).expect("known mask");
        for t in &toks[2..] {
            let v: usize = field(t, ln, "node id")?;
            if v >= n {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("node {v} outside 0..{n}"),
                });
            }
            mask.push(v);
        }
    }
    for (ln, l) in lines.inner {
        if !l.trim().is_empty() {
            return Err(Error::Parse {
                line: ln + 1,
                msg: "trailing content after splits".into(),
            });
        }
    }

    let features = DenseMatrix::from_vec(n, d, feats)?;
    let adjacency = Graph::adjacency_from_undirected(n, &edges)?;
    Graph::new(features, adjacency, labels, c, env_id, e, splits)
}
