//! Lowering of a [`ConeProgram`] to an all-real program and lifting of
//! real solutions back.
//!
//! A Hermitian block of size `d` becomes a real symmetric block of size
//! `2d`. A complex atom `u` yields the two real atoms `[Re u; Im u]` and
//! `[-Im u; Re u]` (the embedding of `u` and of `j u`), and each term is
//! split so that it is invariant under the embedding's rotation symmetry.
//! Atoms are normalized to unit length with the scale moved into the
//! coefficients.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{unembed_hermitian, Assignment, BlockKind, ConeProgram, LinearForm};

/// `coef * V[:, p]^T X V[:, q]`, contributing to constraint row `row`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RealTerm {
    pub row: usize,
    pub coef: f64,
    pub p: usize,
    pub q: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct RealBlock {
    pub dim: usize,
    pub atoms: DMatrix<f64>,
    /// Terms of all constraint rows that touch this block.
    pub terms: Vec<RealTerm>,
    /// Dense objective matrix for this block.
    pub c: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct RealLmi {
    pub dim: usize,
    pub constant: DMatrix<f64>,
    /// Upper-triangular positions; entry `i` is constraint row `row_start + i`.
    pub entries: Vec<(usize, usize)>,
    pub row_start: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct RealProgram {
    pub blocks: Vec<RealBlock>,
    pub lmis: Vec<RealLmi>,
    /// Number of LMI rows; equality rows follow them.
    pub n_lmi_rows: usize,
    pub b: DVector<f64>,
}

impl RealProgram {
    pub fn n_eq(&self) -> usize {
        self.b.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_lmi_rows + self.n_eq()
    }
}

/// Iterate in the solver's real space, already divided by `tau`.
#[derive(Debug, Clone)]
pub(crate) struct RealPoint {
    pub x: Vec<DMatrix<f64>>,
    /// Equality multipliers in the solver's sign convention.
    pub y: DVector<f64>,
    pub z_lmi: Vec<DMatrix<f64>>,
}

struct AtomMap {
    /// For each user atom: real atom indices `(plain, rotated)` and their scales.
    plain: Vec<Option<(usize, f64)>>,
    rotated: Vec<Option<(usize, f64)>>,
}

pub(crate) fn lower(prog: &ConeProgram) -> RealProgram {
    let mut maps = Vec::new();
    let mut blocks = Vec::new();
    for b in &prog.blocks {
        let herm = b.kind == BlockKind::Hermitian;
        let rdim = if herm { 2 * b.dim } else { b.dim };
        let mut cols: Vec<DVector<f64>> = Vec::new();
        let mut plain = Vec::new();
        let mut rotated = Vec::new();
        let push = |v: DVector<f64>, cols: &mut Vec<DVector<f64>>| -> Option<(usize, f64)> {
            let n = v.norm();
            if n == 0.0 {
                return None;
            }
            cols.push(v / n);
            Some((cols.len() - 1, n))
        };
        for u in &b.atoms {
            if herm {
                let d = b.dim;
                let hat = DVector::from_fn(rdim, |i, _| if i < d { u[i].re } else { u[i - d].im });
                let rot = DVector::from_fn(rdim, |i, _| if i < d { -u[i].im } else { u[i - d].re });
                plain.push(push(hat, &mut cols));
                rotated.push(push(rot, &mut cols));
            } else {
                plain.push(push(u.map(|c| c.re), &mut cols));
                rotated.push(None);
            }
        }
        let atoms = if cols.is_empty() { DMatrix::zeros(rdim, 0) } else { DMatrix::from_columns(&cols) };
        blocks.push(RealBlock { dim: rdim, atoms, terms: Vec::new(), c: DMatrix::zeros(rdim, rdim) });
        maps.push(AtomMap { plain, rotated });
    }

    let emit = |form: &LinearForm, row: usize, out: &mut Vec<Vec<RealTerm>>| {
        for t in &form.terms {
            let m = &maps[t.block];
            let herm = prog.blocks[t.block].kind == BlockKind::Hermitian;
            let mut add = |coef: f64, a: Option<(usize, f64)>, b: Option<(usize, f64)>| {
                if let (Some((p, sp)), Some((q, sq))) = (a, b) {
                    let c = coef * sp * sq;
                    if c != 0.0 {
                        out[t.block].push(RealTerm { row, coef: c, p, q });
                    }
                }
            };
            let (l, r) = (t.left, t.right);
            if herm {
                let (cr, ci) = (t.coef.re, t.coef.im);
                if cr != 0.0 {
                    add(0.5 * cr, m.plain[l], m.plain[r]);
                    add(0.5 * cr, m.rotated[l], m.rotated[r]);
                }
                if ci != 0.0 {
                    add(-0.5 * ci, m.rotated[l], m.plain[r]);
                    add(0.5 * ci, m.plain[l], m.rotated[r]);
                }
            } else {
                add(t.coef.re, m.plain[l], m.plain[r]);
            }
        }
    };

    let mut terms: Vec<Vec<RealTerm>> = vec![Vec::new(); blocks.len()];
    let mut lmis = Vec::new();
    let mut row = 0;
    for lmi in &prog.lmis {
        // merge repeated positions so that rows are distinct
        let mut merged: BTreeMap<(usize, usize), LinearForm> = BTreeMap::new();
        for e in &lmi.entries {
            let key = (e.row.min(e.col), e.row.max(e.col));
            merged.entry(key).or_default().extend(&e.form);
        }
        let row_start = row;
        let mut entries = Vec::new();
        for (pos, form) in merged {
            let before: usize = terms.iter().map(|t| t.len()).sum();
            emit(&form, row, &mut terms);
            let after: usize = terms.iter().map(|t| t.len()).sum();
            if after > before {
                entries.push(pos);
                row += 1;
            }
        }
        lmis.push(RealLmi { dim: lmi.dim, constant: lmi.constant.clone(), entries, row_start });
    }
    let n_lmi_rows = row;
    for (f, _) in &prog.equalities {
        emit(f, row, &mut terms);
        row += 1;
    }
    let b = DVector::from_iterator(prog.n_eq(), prog.equalities.iter().map(|(_, r)| *r));

    let mut obj_terms: Vec<Vec<RealTerm>> = vec![Vec::new(); blocks.len()];
    emit(&prog.objective, 0, &mut obj_terms);
    for (k, blk) in blocks.iter_mut().enumerate() {
        blk.terms = std::mem::take(&mut terms[k]);
        let mut c = DMatrix::zeros(blk.dim, blk.dim);
        for t in &obj_terms[k] {
            let p = blk.atoms.column(t.p);
            let q = blk.atoms.column(t.q);
            c += (p * q.transpose()) * (0.5 * t.coef);
            c += (q * p.transpose()) * (0.5 * t.coef);
        }
        blk.c = c;
    }
    RealProgram { blocks, lmis, n_lmi_rows, b }
}

pub(crate) fn lift(prog: &ConeProgram, _real: &RealProgram, pt: &RealPoint) -> Assignment {
    let blocks = prog
        .blocks
        .iter()
        .zip(&pt.x)
        .map(|(b, x)| match b.kind {
            BlockKind::Hermitian => unembed_hermitian(x),
            BlockKind::Symmetric => {
                let s = (x + x.transpose()) * 0.5;
                s.map(|v| nalgebra::Complex::new(v, 0.0))
            }
        })
        .collect();
    Assignment { blocks, eq_duals: -&pt.y, lmi_duals: pt.z_lmi.clone() }
}
