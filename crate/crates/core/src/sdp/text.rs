//! Line-oriented text format for [`ConeProgram`], used for dumping and
//! reloading relaxations.
//!
//! ```text
//! risloc-sdp 1
//! block <name> <sym|herm> <dim>
//! atom <block> <re_0> <im_0> ... <re_{d-1}> <im_{d-1}>
//! objective
//! term <block> <coef_re> <coef_im> <left> <right>
//! equality <rhs>
//! term ...
//! lmi <dim>
//! const <i> <j> <value>
//! entry <i> <j>
//! term ...
//! ```
//!
//! `term` lines attach to the most recent `objective`, `equality` or
//! `entry` header. Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::{BlockKind, ConeProgram, LinearForm, Lmi, LmiEntry};
use crate::error::{Error, Result};
use crate::signal::C64;

const HEADER: &str = "risloc-sdp 1";

fn write_form(out: &mut String, f: &LinearForm) {
    for t in &f.terms {
        let _ = writeln!(out, "term {} {:e} {:e} {} {}", t.block, t.coef.re, t.coef.im, t.left, t.right);
    }
}

pub fn to_text(prog: &ConeProgram) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for b in &prog.blocks {
        let kind = match b.kind {
            BlockKind::Symmetric => "sym",
            BlockKind::Hermitian => "herm",
        };
        let _ = writeln!(out, "block {} {} {}", b.name, kind, b.dim);
    }
    for (k, b) in prog.blocks.iter().enumerate() {
        for a in &b.atoms {
            let _ = write!(out, "atom {k}");
            for c in a.iter() {
                let _ = write!(out, " {:e} {:e}", c.re, c.im);
            }
            out.push('\n');
        }
    }
    out.push_str("objective\n");
    write_form(&mut out, &prog.objective);
    for (f, rhs) in &prog.equalities {
        let _ = writeln!(out, "equality {rhs:e}");
        write_form(&mut out, f);
    }
    for lmi in &prog.lmis {
        let _ = writeln!(out, "lmi {}", lmi.dim);
        for j in 0..lmi.dim {
            for i in 0..=j {
                let v = lmi.constant[(i, j)];
                if v != 0.0 {
                    let _ = writeln!(out, "const {i} {j} {v:e}");
                }
            }
        }
        for e in &lmi.entries {
            let _ = writeln!(out, "entry {} {}", e.row, e.col);
            write_form(&mut out, &e.form);
        }
    }
    out
}

enum Target {
    None,
    Objective,
    Equality,
    Entry,
}

pub fn from_text(s: &str) -> Result<ConeProgram> {
    let mut prog = ConeProgram::new();
    let mut target = Target::None;
    let mut seen_header = false;
    for (idx, raw) in s.lines().enumerate() {
        let line_no = idx + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != HEADER {
                return Err(err(format!("expected header `{HEADER}`")));
            }
            seen_header = true;
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default();
        let rest: Vec<&str> = it.collect();
        let num = |i: usize| -> Result<f64> {
            rest.get(i)
                .ok_or_else(|| err(format!("missing field {}", i + 1)))?
                .parse::<f64>()
                .map_err(|e| err(e.to_string()))
        };
        let idx_at = |i: usize| -> Result<usize> {
            rest.get(i)
                .ok_or_else(|| err(format!("missing field {}", i + 1)))?
                .parse::<usize>()
                .map_err(|e| err(e.to_string()))
        };
        match key {
            "block" => {
                if rest.len() != 3 {
                    return Err(err("block needs name, kind and dimension".into()));
                }
                let kind = match rest[1] {
                    "sym" => BlockKind::Symmetric,
                    "herm" => BlockKind::Hermitian,
                    k => return Err(err(format!("unknown block kind `{k}`"))),
                };
                prog.add_block(rest[0], idx_at(2)?, kind);
            }
            "atom" => {
                let k = idx_at(0)?;
                let dim = prog.blocks.get(k).ok_or_else(|| err(format!("unknown block {k}")))?.dim;
                if rest.len() != 1 + 2 * dim {
                    return Err(err(format!("atom of block {k} needs {} numbers", 2 * dim)));
                }
                let mut v = DVector::zeros(dim);
                for i in 0..dim {
                    v[i] = C64::new(num(1 + 2 * i)?, num(2 + 2 * i)?);
                }
                prog.add_atom(k, v);
            }
            "objective" => target = Target::Objective,
            "equality" => {
                prog.add_equality(LinearForm::new(), num(0)?);
                target = Target::Equality;
            }
            "lmi" => {
                let d = idx_at(0)?;
                if d == 0 {
                    return Err(err("LMI dimension must be positive".into()));
                }
                prog.add_lmi(Lmi::new(DMatrix::zeros(d, d)));
                target = Target::None;
            }
            "const" => {
                let lmi = prog.lmis.last_mut().ok_or_else(|| err("`const` before any `lmi`".into()))?;
                let (i, j, v) = (idx_at(0)?, idx_at(1)?, num(2)?);
                if i >= lmi.dim || j >= lmi.dim {
                    return Err(err(format!("position ({i}, {j}) out of range")));
                }
                lmi.constant[(i, j)] = v;
                lmi.constant[(j, i)] = v;
            }
            "entry" => {
                let (i, j) = (idx_at(0)?, idx_at(1)?);
                let lmi = prog.lmis.last_mut().ok_or_else(|| err("`entry` before any `lmi`".into()))?;
                if i >= lmi.dim || j >= lmi.dim {
                    return Err(err(format!("position ({i}, {j}) out of range")));
                }
                lmi.entries.push(LmiEntry { row: i.min(j), col: i.max(j), form: LinearForm::new() });
                target = Target::Entry;
            }
            "term" => {
                if rest.len() != 5 {
                    return Err(err("term needs block, coefficient (re, im), left and right".into()));
                }
                let (block, coef, l, r) = (idx_at(0)?, C64::new(num(1)?, num(2)?), idx_at(3)?, idx_at(4)?);
                let form = match target {
                    Target::Objective => &mut prog.objective,
                    Target::Equality => &mut prog.equalities.last_mut().expect("pushed").0,
                    Target::Entry => &mut prog.lmis.last_mut().expect("pushed").entries.last_mut().expect("pushed").form,
                    Target::None => return Err(err("`term` outside a form".into())),
                };
                form.push(block, coef, l, r);
            }
            k => return Err(err(format!("unknown keyword `{k}`"))),
        }
    }
    if !seen_header {
        return Err(Error::Parse { line: 0, msg: "empty input".into() });
    }
    prog.validate()?;
    Ok(prog)
}
