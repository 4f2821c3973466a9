//! Dense semidefinite programs over real symmetric and complex Hermitian
//! matrix blocks.
//!
//! Every variable block `X_k` is constrained PSD. Linear functionals are
//! sums of terms `Re(coef * u^H X_k v)` over per-block *atoms* `u, v`; a
//! dense coefficient matrix is expressible with unit-vector atoms, while
//! low-rank data stays factored, which is what makes the interior-point
//! iterations cheap for the RIS relaxation.
//!
//! Problem form:
//!
//! ```text
//! minimize    f_0(X)
//! subject to  f_i(X) = b_i                       (equalities)
//!             C_l + sum_(i,j) f_lij(X) E_ij >= 0 (LMIs, symmetric placement)
//!             X_k >= 0
//! ```

mod dense;
mod ipm;
mod lower;
pub mod text;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::signal::C64;

pub use ipm::SolverSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Symmetric,
    Hermitian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dim: usize,
    pub kind: BlockKind,
    pub atoms: Vec<DVector<C64>>,
}

/// `Re(coef * atoms[left]^H X_block atoms[right])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub block: usize,
    pub coef: C64,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearForm {
    pub terms: Vec<Term>,
}

impl LinearForm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, block: usize, coef: C64, left: usize, right: usize) {
        self.terms.push(Term { block, coef, left, right });
    }

    pub fn extend(&mut self, other: &LinearForm) {
        self.terms.extend_from_slice(&other.terms);
    }

    pub fn scaled(&self, k: f64) -> LinearForm {
        LinearForm {
            terms: self.terms.iter().map(|t| Term { coef: t.coef * k, ..*t }).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiEntry {
    pub row: usize,
    pub col: usize,
    pub form: LinearForm,
}

/// `constant + sum entries` must be PSD; an entry at `(i, j)` contributes
/// to both `(i, j)` and `(j, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lmi {
    pub dim: usize,
    pub constant: DMatrix<f64>,
    pub entries: Vec<LmiEntry>,
}

impl Lmi {
    pub fn new(constant: DMatrix<f64>) -> Self {
        Self { dim: constant.nrows(), constant, entries: Vec::new() }
    }

    pub fn add_entry(&mut self, row: usize, col: usize, form: LinearForm) {
        self.entries.push(LmiEntry { row: row.min(col), col: row.max(col), form });
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConeProgram {
    pub blocks: Vec<Block>,
    pub objective: LinearForm,
    pub equalities: Vec<(LinearForm, f64)>,
    pub lmis: Vec<Lmi>,
    unit_atoms: HashMap<(usize, usize), usize>,
}

impl ConeProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, name: impl Into<String>, dim: usize, kind: BlockKind) -> usize {
        self.blocks.push(Block { name: name.into(), dim, kind, atoms: Vec::new() });
        self.blocks.len() - 1
    }

    pub fn add_atom(&mut self, block: usize, v: DVector<C64>) -> usize {
        let b = &mut self.blocks[block];
        b.atoms.push(v);
        b.atoms.len() - 1
    }

    /// Atom `e_i` of the given block, created once and reused.
    pub fn unit_atom(&mut self, block: usize, i: usize) -> usize {
        if let Some(&a) = self.unit_atoms.get(&(block, i)) {
            return a;
        }
        let dim = self.blocks[block].dim;
        let mut v = DVector::zeros(dim);
        v[i] = C64::new(1.0, 0.0);
        let a = self.add_atom(block, v);
        self.unit_atoms.insert((block, i), a);
        a
    }

    /// `Re(coef * X[i, j])`.
    pub fn entry_form(&mut self, block: usize, i: usize, j: usize, coef: C64) -> LinearForm {
        let l = self.unit_atom(block, i);
        let r = self.unit_atom(block, j);
        let mut f = LinearForm::new();
        f.push(block, coef, l, r);
        f
    }

    pub fn trace_form(&mut self, block: usize, coef: f64) -> LinearForm {
        let mut f = LinearForm::new();
        for i in 0..self.blocks[block].dim {
            f.extend(&self.entry_form(block, i, i, C64::new(coef, 0.0)));
        }
        f
    }

    pub fn set_objective(&mut self, f: LinearForm) {
        self.objective = f;
    }

    pub fn add_equality(&mut self, f: LinearForm, rhs: f64) {
        self.equalities.push((f, rhs));
    }

    pub fn add_lmi(&mut self, lmi: Lmi) {
        self.lmis.push(lmi);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        for (k, b) in self.blocks.iter().enumerate() {
            if b.dim == 0 {
                return bad(format!("block {k} has dimension zero"));
            }
            for (a, v) in b.atoms.iter().enumerate() {
                if v.len() != b.dim {
                    return bad(format!("atom {a} of block {k} has length {}", v.len()));
                }
                if b.kind == BlockKind::Symmetric && v.iter().any(|c| c.im != 0.0) {
                    return bad(format!("atom {a} of symmetric block {k} is complex"));
                }
                if v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                    return bad(format!("atom {a} of block {k} is not finite"));
                }
            }
        }
        let check_form = |f: &LinearForm| -> Result<()> {
            for t in &f.terms {
                let Some(b) = self.blocks.get(t.block) else {
                    return bad(format!("term references missing block {}", t.block));
                };
                if t.left >= b.atoms.len() || t.right >= b.atoms.len() {
                    return bad(format!("term references missing atom in block {}", t.block));
                }
                if b.kind == BlockKind::Symmetric && t.coef.im != 0.0 {
                    return bad(format!("complex coefficient on symmetric block {}", t.block));
                }
                if !t.coef.re.is_finite() || !t.coef.im.is_finite() {
                    return bad("non-finite coefficient".into());
                }
            }
            Ok(())
        };
        check_form(&self.objective)?;
        for (f, rhs) in &self.equalities {
            check_form(f)?;
            if !rhs.is_finite() {
                return bad("non-finite equality right-hand side".into());
            }
        }
        for (l, lmi) in self.lmis.iter().enumerate() {
            if lmi.constant.nrows() != lmi.dim || lmi.constant.ncols() != lmi.dim || lmi.dim == 0 {
                return bad(format!("LMI {l} constant has wrong shape"));
            }
            if (&lmi.constant - lmi.constant.transpose()).abs().max() > 1e-12 * (1.0 + lmi.constant.abs().max()) {
                return bad(format!("LMI {l} constant is not symmetric"));
            }
            for e in &lmi.entries {
                if e.row >= lmi.dim || e.col >= lmi.dim {
                    return bad(format!("LMI {l} entry ({}, {}) out of range", e.row, e.col));
                }
                check_form(&e.form)?;
            }
        }
        Ok(())
    }

    /// Value of a linear form at the given block values.
    pub fn eval_form(&self, f: &LinearForm, blocks: &[DMatrix<C64>]) -> f64 {
        f.terms
            .iter()
            .map(|t| {
                let b = &self.blocks[t.block];
                let u = &b.atoms[t.left];
                let v = &b.atoms[t.right];
                (t.coef * u.dotc(&(&blocks[t.block] * v))).re
            })
            .sum()
    }

    /// Hermitian (or real symmetric) representer `K` of `f` on one block,
    /// so that `f(X) = Re tr(K X)` for Hermitian `X`.
    pub fn form_matrix(&self, f: &LinearForm, block: usize) -> DMatrix<C64> {
        let b = &self.blocks[block];
        let mut k = DMatrix::zeros(b.dim, b.dim);
        for t in f.terms.iter().filter(|t| t.block == block) {
            let u = &b.atoms[t.left];
            let v = &b.atoms[t.right];
            k += v * u.adjoint() * t.coef;
        }
        (&k + k.adjoint()) * C64::new(0.5, 0.0)
    }

    /// Value of LMI `l` at the given block values.
    pub fn eval_lmi(&self, l: usize, blocks: &[DMatrix<C64>]) -> DMatrix<f64> {
        let lmi = &self.lmis[l];
        let mut m = lmi.constant.clone();
        for e in &lmi.entries {
            let v = self.eval_form(&e.form, blocks);
            m[(e.row, e.col)] += v;
            if e.row != e.col {
                m[(e.col, e.row)] += v;
            }
        }
        m
    }

    pub fn n_eq(&self) -> usize {
        self.equalities.len()
    }
}

/// Primal block values plus dual multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// One matrix per block (real blocks carry zero imaginary parts).
    pub blocks: Vec<DMatrix<C64>>,
    /// Multipliers `y` of the equalities (Lagrangian sign `- y (f(X) - b)`).
    pub eq_duals: DVector<f64>,
    /// PSD multipliers of the LMIs.
    pub lmi_duals: Vec<DMatrix<f64>>,
}

impl Assignment {
    pub fn zeros(prog: &ConeProgram) -> Self {
        Self {
            blocks: prog.blocks.iter().map(|b| DMatrix::zeros(b.dim, b.dim)).collect(),
            eq_duals: DVector::zeros(prog.n_eq()),
            lmi_duals: prog.lmis.iter().map(|l| DMatrix::zeros(l.dim, l.dim)).collect(),
        }
    }

    pub fn real_block(&self, k: usize) -> DMatrix<f64> {
        self.blocks[k].map(|v| v.re)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// The iteration stalled with every residual below the looser
    /// `inexact_tol`, but not below `tol`.
    NearOptimal,
    MaxIter,
    Infeasible,
    Unbounded,
    NumericalError,
}

/// Residual norms of the conic optimality conditions.
///
/// * `primal`: `||f(X) - b|| / (1 + ||b||)` together with the Frobenius norm
///   of the negative eigenvalue parts of every `X_k` and every LMI value,
///   each relative to `1 + ||C_l||`.
/// * `dual`: negative eigenvalue parts of the dual slack
///   `S_k = C_k - sum y_i A_ik - sum L_lk*(Z_l)` and of each `Z_l`, relative
///   to `1 + ||objective||`.
/// * `gap`: `|p - d| / (1 + |p| + |d|)` with `d = b'y - sum <C_l, Z_l>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub status: SolveStatus,
    pub objective: f64,
    pub dual_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterations: usize,
}

fn neg_part_norm_real(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.min(0.0).powi(2)).sum::<f64>().sqrt()
}

fn neg_part_norm_complex(m: &DMatrix<C64>) -> f64 {
    let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
    SymmetricEigen::new(herm).eigenvalues.iter().map(|v| v.min(0.0).powi(2)).sum::<f64>().sqrt()
}

pub fn min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
    SymmetricEigen::new(herm).eigenvalues.min()
}

/// Residuals computed directly from the user-level program, independent of
/// the solver's internal representation.
pub fn kkt_residuals(prog: &ConeProgram, a: &Assignment) -> Result<KktResiduals> {
    if a.blocks.len() != prog.blocks.len()
        || a.eq_duals.len() != prog.n_eq()
        || a.lmi_duals.len() != prog.lmis.len()
    {
        return Err(Error::InvalidParameter("assignment does not match program".into()));
    }
    for (k, b) in prog.blocks.iter().enumerate() {
        if a.blocks[k].shape() != (b.dim, b.dim) {
            return Err(Error::InvalidParameter(format!("block {k} has wrong shape")));
        }
    }
    for (l, lmi) in prog.lmis.iter().enumerate() {
        if a.lmi_duals[l].shape() != (lmi.dim, lmi.dim) {
            return Err(Error::InvalidParameter(format!("LMI dual {l} has wrong shape")));
        }
    }

    // primal
    let b = DVector::from_iterator(prog.n_eq(), prog.equalities.iter().map(|(_, r)| *r));
    let fx = DVector::from_iterator(prog.n_eq(), prog.equalities.iter().map(|(f, _)| prog.eval_form(f, &a.blocks)));
    let mut primal = (&fx - &b).norm() / (1.0 + b.norm());
    let mut cone = 0.0f64;
    for x in &a.blocks {
        cone = cone.hypot(neg_part_norm_complex(x));
    }
    primal = primal.max(cone);
    for (l, lmi) in prog.lmis.iter().enumerate() {
        let v = prog.eval_lmi(l, &a.blocks);
        primal = primal.max(neg_part_norm_real(&v) / (1.0 + lmi.constant.norm()));
    }

    // dual slack per block
    let mut obj_norm = 0.0f64;
    let mut dual = 0.0f64;
    for k in 0..prog.blocks.len() {
        let c = prog.form_matrix(&prog.objective, k);
        obj_norm = obj_norm.hypot(c.norm());
        let mut s = c;
        for (i, (f, _)) in prog.equalities.iter().enumerate() {
            if a.eq_duals[i] != 0.0 && f.terms.iter().any(|t| t.block == k) {
                s -= prog.form_matrix(f, k) * C64::new(a.eq_duals[i], 0.0);
            }
        }
        for (l, lmi) in prog.lmis.iter().enumerate() {
            let z = &a.lmi_duals[l];
            for e in &lmi.entries {
                if !e.form.terms.iter().any(|t| t.block == k) {
                    continue;
                }
                let beta = if e.row == e.col { z[(e.row, e.col)] } else { z[(e.row, e.col)] + z[(e.col, e.row)] };
                if beta != 0.0 {
                    s -= prog.form_matrix(&e.form, k) * C64::new(beta, 0.0);
                }
            }
        }
        dual = dual.hypot(neg_part_norm_complex(&s));
    }
    for z in &a.lmi_duals {
        dual = dual.hypot(neg_part_norm_real(z));
    }
    dual /= 1.0 + obj_norm;

    let p = prog.eval_form(&prog.objective, &a.blocks);
    let d = dual_objective(prog, a);
    let gap = (p - d).abs() / (1.0 + p.abs() + d.abs());
    Ok(KktResiduals { primal, dual, gap })
}

pub fn dual_objective(prog: &ConeProgram, a: &Assignment) -> f64 {
    let by: f64 = prog.equalities.iter().zip(a.eq_duals.iter()).map(|((_, r), y)| r * y).sum();
    let cz: f64 = prog.lmis.iter().zip(&a.lmi_duals).map(|(l, z)| l.constant.component_mul(z).sum()).sum();
    by - cz
}

/// Solves with default settings apart from `tol` and `max_iter`.
pub fn solve(prog: &ConeProgram, tol: f64, max_iter: usize) -> Result<(Assignment, SolverReport)> {
    solve_with(prog, &SolverSettings { tol, max_iter, ..SolverSettings::default() })
}

pub fn solve_with(prog: &ConeProgram, settings: &SolverSettings) -> Result<(Assignment, SolverReport)> {
    prog.validate()?;
    let real = lower::lower(prog);
    let mut accept = |cand: &lower::RealPoint| -> (bool, KktResiduals) {
        let a = lower::lift(prog, &real, cand);
        match kkt_residuals(prog, &a) {
            Ok(r) => (r.max() <= settings.tol, r),
            Err(_) => (false, KktResiduals { primal: f64::INFINITY, dual: f64::INFINITY, gap: f64::INFINITY }),
        }
    };
    let out = ipm::run(&real, settings, &mut accept);
    let a = lower::lift(prog, &real, &out.point);
    let res = kkt_residuals(prog, &a)?;
    let status = match out.status {
        SolveStatus::Optimal if res.max() > settings.tol => SolveStatus::NumericalError,
        SolveStatus::NumericalError | SolveStatus::MaxIter if res.max() <= settings.inexact_tol => {
            SolveStatus::NearOptimal
        }
        s => s,
    };
    let report = SolverReport {
        status,
        objective: prog.eval_form(&prog.objective, &a.blocks),
        dual_objective: dual_objective(prog, &a),
        primal_residual: res.primal,
        dual_residual: res.dual,
        gap: res.gap,
        iterations: out.iterations,
    };
    Ok((a, report))
}

/// Real symmetric embedding `[[Re H, -Im H], [Im H, Re H]]`.
pub fn embed_hermitian(h: &DMatrix<C64>) -> DMatrix<f64> {
    let d = h.nrows();
    let mut x = DMatrix::zeros(2 * d, 2 * d);
    for j in 0..d {
        for i in 0..d {
            let v = h[(i, j)];
            x[(i, j)] = v.re;
            x[(i + d, j + d)] = v.re;
            x[(i + d, j)] = v.im;
            x[(i, j + d)] = -v.im;
        }
    }
    x
}

/// Inverse of [`embed_hermitian`], averaging the redundant copies.
pub fn unembed_hermitian(x: &DMatrix<f64>) -> DMatrix<C64> {
    let d = x.nrows() / 2;
    DMatrix::from_fn(d, d, |i, j| {
        C64::new(
            0.5 * (x[(i, j)] + x[(i + d, j + d)]),
            0.5 * (x[(i + d, j)] - x[(i, j + d)]),
        )
    })
}
