//! Homogeneous self-dual primal-dual interior-point method with
//! Nesterov-Todd scaling and Mehrotra predictor-corrector steps.
//!
//! Conic form used internally (cones: every variable block, then every LMI):
//!
//! ```text
//! min <c, x>  s.t.  A x = b,  G x + s = h,  s >= 0
//! G x = (-X_k ..., -L_l(X) ...),  h = (0 ..., C_l ...)
//! ```
//!
//! Newton systems are solved in NT-scaled block coordinates, where the
//! block part of the reduced operator is the identity and the LMI rows add
//! a low-rank term `F' H F`. The Woodbury identity then only needs Gram
//! matrices `Gamma = V' R R' V` over each block's atom dictionary.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use super::dense::{gemm, Chol};

use super::lower::{RealLmi, RealPoint, RealProgram};
use super::{KktResiduals, SolveStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Bound on the primal, dual and relative-gap residuals.
    pub tol: f64,
    /// Residual bound under which a stalled run is still reported as
    /// near-optimal.
    pub inexact_tol: f64,
    pub max_iter: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_factor: f64,
    /// Iterative refinement sweeps per linear solve.
    pub refinement_steps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-7, inexact_tol: 1e-5, max_iter: 200, step_factor: 0.99, refinement_steps: 4 }
    }
}

pub(crate) struct IpmOutput {
    pub point: RealPoint,
    pub status: SolveStatus,
    pub iterations: usize,
}

type Blocks = Vec<DMatrix<f64>>;

fn bdot(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn bnorm(a: &[DMatrix<f64>]) -> f64 {
    bdot(a, a).sqrt()
}

fn baxpy(y: &mut [DMatrix<f64>], alpha: f64, x: &[DMatrix<f64>]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        maxpy(yi, alpha, xi);
    }
}

/// `y += alpha * x` in place.
fn maxpy(y: &mut DMatrix<f64>, alpha: f64, x: &DMatrix<f64>) {
    for (a, b) in y.iter_mut().zip(x.iter()) {
        *a += alpha * b;
    }
}

fn bscale(a: &[DMatrix<f64>], k: f64) -> Blocks {
    a.iter().map(|m| m * k).collect()
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// `T X T` for symmetric `T`.
fn congruence(t: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    sym(t * x * t)
}

struct Ops<'a> {
    prob: &'a RealProgram,
    atoms: Blocks,
    nb: usize,
}

impl<'a> Ops<'a> {
    fn new(prob: &'a RealProgram) -> Self {
        Self { atoms: prob.blocks.iter().map(|b| b.atoms.clone()).collect(), nb: prob.blocks.len(), prob }
    }

    fn n_f(&self) -> usize {
        self.prob.n_lmi_rows
    }

    /// Values of every constraint row at `x`.
    fn eval_rows(&self, x: &[DMatrix<f64>]) -> DVector<f64> {
        self.eval_with(&self.atoms, x)
    }

    /// Row values with the atom dictionaries replaced by `atoms`.
    fn eval_with(&self, atoms: &[DMatrix<f64>], x: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.prob.n_rows());
        for (k, blk) in self.prob.blocks.iter().enumerate() {
            if blk.terms.is_empty() {
                continue;
            }
            let v = &atoms[k];
            let xv = gemm(&x[k], false, v, false);
            for t in &blk.terms {
                out[t.row] += t.coef * v.column(t.p).dot(&xv.column(t.q));
            }
        }
        out
    }

    /// `sum_rows coeff[row] * K_row`, one symmetric matrix per block.
    fn adjoint_rows(&self, coeff: &DVector<f64>) -> Blocks {
        self.adjoint_with(&self.atoms, coeff)
    }

    fn adjoint_with(&self, atoms: &[DMatrix<f64>], coeff: &DVector<f64>) -> Blocks {
        self.prob
            .blocks
            .iter()
            .zip(atoms)
            .map(|(blk, v)| {
                let mut tmp = DMatrix::zeros(blk.dim, v.ncols());
                let mut any = false;
                for t in &blk.terms {
                    let w = t.coef * coeff[t.row];
                    if w != 0.0 {
                        any = true;
                        tmp.column_mut(t.q).axpy(w, &v.column(t.p), 1.0);
                    }
                }
                if any {
                    sym(gemm(&tmp, false, v, true))
                } else {
                    DMatrix::zeros(blk.dim, blk.dim)
                }
            })
            .collect()
    }

    /// Places LMI row values into the symmetric matrix `L_l(x)`.
    fn lmi_matrix(lmi: &RealLmi, rows: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(lmi.dim, lmi.dim);
        for (i, &(r, c)) in lmi.entries.iter().enumerate() {
            let v = rows[lmi.row_start + i];
            m[(r, c)] += v;
            if r != c {
                m[(c, r)] += v;
            }
        }
        m
    }

    /// Writes `L_l^*(m)` into the row coefficient vector.
    fn lmi_adjoint_into(lmi: &RealLmi, m: &DMatrix<f64>, coeff: &mut DVector<f64>, k: f64) {
        for (i, &(r, c)) in lmi.entries.iter().enumerate() {
            let v = if r == c { m[(r, c)] } else { m[(r, c)] + m[(c, r)] };
            coeff[lmi.row_start + i] += k * v;
        }
    }

    /// `A' y + G' z`.
    fn at_y_gt_z(&self, y: &DVector<f64>, z: &[DMatrix<f64>]) -> Blocks {
        let mut coeff = DVector::zeros(self.prob.n_rows());
        for (l, lmi) in self.prob.lmis.iter().enumerate() {
            Self::lmi_adjoint_into(lmi, &z[self.nb + l], &mut coeff, -1.0);
        }
        coeff.rows_mut(self.n_f(), self.prob.n_eq()).copy_from(y);
        let mut out = self.adjoint_rows(&coeff);
        for (o, zk) in out.iter_mut().zip(z) {
            *o -= zk;
        }
        out
    }

    /// `(A x, G x)` from a single pass over the rows.
    fn a_and_g(&self, x: &[DMatrix<f64>]) -> (DVector<f64>, Blocks) {
        let rows = self.eval_rows(x);
        let ax = rows.rows(self.n_f(), self.prob.n_eq()).into_owned();
        let mut gx: Blocks = x.iter().map(|m| -m).collect();
        for lmi in &self.prob.lmis {
            gx.push(-Self::lmi_matrix(lmi, &rows));
        }
        (ax, gx)
    }

    fn c(&self) -> Blocks {
        self.prob.blocks.iter().map(|b| b.c.clone()).collect()
    }

    fn h(&self) -> Blocks {
        let mut h: Blocks = self.prob.blocks.iter().map(|b| DMatrix::zeros(b.dim, b.dim)).collect();
        for lmi in &self.prob.lmis {
            h.push(lmi.constant.clone());
        }
        h
    }

    fn cone_dims(&self) -> Vec<usize> {
        self.prob
            .blocks
            .iter()
            .map(|b| b.dim)
            .chain(self.prob.lmis.iter().map(|l| l.dim))
            .collect()
    }
}

/// NT scaling of one cone: `R' z R = Diag(lambda) = R^{-1} s R^{-T}`;
/// `rti = R^{-T}`.
struct Scaling {
    r: DMatrix<f64>,
    rti: DMatrix<f64>,
    lambda: DVector<f64>,
}

impl Scaling {
    fn identity(n: usize) -> Self {
        Self { r: DMatrix::identity(n, n), rti: DMatrix::identity(n, n), lambda: DVector::from_element(n, 1.0) }
    }

    fn nt(s: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<Self> {
        let ls = Cholesky::new(sym(s.clone()))?.unpack();
        let lz = Cholesky::new(sym(z.clone()))?.unpack();
        let m = lz.transpose() * &ls;
        let svd = m.svd(true, true);
        let u = svd.u?;
        let vt = svd.v_t?;
        let lam = svd.singular_values;
        if lam.iter().any(|v| !(*v > 0.0)) {
            return None;
        }
        let isq = lam.map(|v| 1.0 / v.sqrt());
        let mut r = ls * vt.transpose();
        let mut rti = lz * u;
        for j in 0..lam.len() {
            r.column_mut(j).scale_mut(isq[j]);
            rti.column_mut(j).scale_mut(isq[j]);
        }
        Some(Self { r, rti, lambda: lam })
    }

    /// `W z = R' z R`.
    fn apply_w(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        sym(self.r.transpose() * z * &self.r)
    }

    /// `W' v = R v R'`.
    fn apply_wt(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        sym(&self.r * v * self.r.transpose())
    }

    /// `W'^{-1} v = R^{-1} v R^{-T}`.
    fn apply_w_inv_t(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        sym(self.rti.transpose() * v * &self.rti)
    }

    fn t(&self) -> DMatrix<f64> {
        sym(&self.rti * self.rti.transpose())
    }
}

/// `M (x) M` on symmetric matrices in LMI row coordinates, where a row at
/// `(i, j)` stands for both mirrored entries.
fn kron_rows(entries: &[(usize, usize)], m: &DMatrix<f64>) -> DMatrix<f64> {
    let comps = |&(i, j): &(usize, usize)| -> Vec<(usize, usize)> {
        if i == j {
            vec![(i, i)]
        } else {
            vec![(i, j), (j, i)]
        }
    };
    let cs: Vec<Vec<(usize, usize)>> = entries.iter().map(comps).collect();
    let n = cs.len();
    DMatrix::from_fn(n, n, |a, b| {
        let mut v = 0.0;
        for &(i, j) in &cs[a] {
            for &(k, l) in &cs[b] {
                v += m[(i, k)] * m[(l, j)];
            }
        }
        v
    })
}

/// Krylov vector of the reduced system: one matrix per block plus the
/// equality multipliers.
#[derive(Clone)]
struct KVec {
    x: Blocks,
    y: DVector<f64>,
}

impl KVec {
    fn dot(&self, o: &KVec) -> f64 {
        bdot(&self.x, &o.x) + self.y.dot(&o.y)
    }

    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn axpy(&mut self, a: f64, o: &KVec) {
        baxpy(&mut self.x, a, &o.x);
        self.y.axpy(a, &o.y, 1.0);
    }

    fn scaled(&self, a: f64) -> KVec {
        KVec { x: bscale(&self.x, a), y: &self.y * a }
    }
}

const GMRES_SPAN: usize = 40;

/// `L' m` with `L` block diagonal over the LMI row segments.
fn apply_lt_mat(lmis: &[RealLmi], lfac: &[DMatrix<f64>], m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (l, lmi) in lmis.iter().enumerate() {
        let (s, n) = (lmi.row_start, lmi.entries.len());
        if n > 0 {
            let seg = m.rows(s, n).into_owned();
            out.rows_mut(s, n).copy_from(&gemm(&lfac[l], true, &seg, false));
        }
    }
    out
}

fn apply_l(lmis: &[RealLmi], lfac: &[DMatrix<f64>], v: &DVector<f64>, transpose: bool) -> DVector<f64> {
    let mut out = v.clone();
    for (l, lmi) in lmis.iter().enumerate() {
        let (s, n) = (lmi.row_start, lmi.entries.len());
        if n > 0 {
            let seg = v.rows(s, n);
            let prod = if transpose { lfac[l].tr_mul(&seg) } else { &lfac[l] * seg };
            out.rows_mut(s, n).copy_from(&prod);
        }
    }
    out
}

/// Largest step keeping `Diag(lambda) + a * d` PSD.
fn max_step(lambda: &DVector<f64>, d: &DMatrix<f64>) -> f64 {
    let n = lambda.len();
    let isq = lambda.map(|v| 1.0 / v.sqrt());
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (d[(i, j)] + d[(j, i)]) * isq[i] * isq[j]);
    let min = SymmetricEigen::new(m).eigenvalues.min();
    if min >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / min
    }
}

/// `(Lambda X + X Lambda) / 2 = M` solved for `X`.
fn lambda_div(lambda: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = lambda.len();
    DMatrix::from_fn(n, n, |i, j| 2.0 * m[(i, j)] / (lambda[i] + lambda[j]))
}

fn jordan(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    (a * b + b * a) * 0.5
}

/// Newton system solver. Variable blocks are handled in NT-scaled
/// coordinates `x = R x~ R'`, where the block scaling becomes the identity
/// and only the scaled atoms `R' V` enter. The remaining term `F' H F` from
/// the LMIs is inverted with the Woodbury identity, and the equalities
/// through a Schur complement.
struct Kkt<'o, 'p> {
    ops: &'o Ops<'p>,
    r: Blocks,
    rti: Blocks,
    /// Scaled atom dictionaries `R_k' V_k`.
    vt: Blocks,
    /// `T = R^{-T} R^{-1}` of each LMI cone.
    tl: Blocks,
    direct: Direct,
    refinement: usize,
}

/// Factorization behind the direct solve of the reduced system.
enum Direct {
    /// Woodbury over the LMI rows; cheap when there are fewer rows than
    /// scaled block coordinates.
    Rows {
        lfac: Vec<DMatrix<f64>>,
        omega: Option<Chol>,
        g_fe: DMatrix<f64>,
        schur: Option<Chol>,
    },
    /// Explicit `I + F'HF` in svec coordinates, backward stable and used
    /// whenever the blocks are small.
    Dense {
        offsets: Vec<usize>,
        k_e: DMatrix<f64>,
        p: Chol,
        /// `P^{-1} K_E'`.
        pk: DMatrix<f64>,
        schur: Option<Chol>,
    },
}

/// Largest number of svec coordinates for which the dense path is used.
const DENSE_LIMIT: usize = 6000;

fn svec_len(d: usize) -> usize {
    d * (d + 1) / 2
}

fn svec_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let d = m.nrows();
    let mut k = 0;
    for j in 0..d {
        for i in 0..=j {
            out[k] = if i == j { m[(i, i)] } else { std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]) };
            k += 1;
        }
    }
}

fn smat(v: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for j in 0..d {
        for i in 0..=j {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] * std::f64::consts::FRAC_1_SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
    m
}

impl<'o, 'p> Kkt<'o, 'p> {
    fn factor(ops: &'o Ops<'p>, scalings: &[Scaling], refinement: usize) -> Option<Self> {
        let prob = ops.prob;
        let nb = ops.nb;
        let r: Blocks = scalings[..nb].iter().map(|s| s.r.clone()).collect();
        let rti: Blocks = scalings[..nb].iter().map(|s| s.rti.clone()).collect();
        let tl: Blocks = scalings[nb..].iter().map(|s| s.t()).collect();
        let vt: Blocks = r.iter().zip(&ops.atoms).map(|(rk, v)| gemm(rk, true, v, false)).collect();
        let n_x: usize = prob.blocks.iter().map(|b| svec_len(b.dim)).sum();
        let clock = std::time::Instant::now();
        let direct = if n_x <= DENSE_LIMIT && n_x <= prob.n_lmi_rows.max(prob.n_eq()) {
            Self::factor_dense(ops, &vt, &tl)?
        } else {
            Self::factor_rows(ops, &vt, &tl)?
        };
        log::trace!("factor {:.3}s", clock.elapsed().as_secs_f64());
        Some(Kkt { ops, r, rti, vt, tl, direct, refinement })
    }

    fn factor_dense(ops: &Ops<'_>, vt: &[DMatrix<f64>], tl: &[DMatrix<f64>]) -> Option<Direct> {
        let prob = ops.prob;
        let nr = prob.n_rows();
        let nf = prob.n_lmi_rows;
        let ne = prob.n_eq();
        let mut offsets = Vec::with_capacity(prob.blocks.len() + 1);
        let mut n_x = 0;
        for b in &prob.blocks {
            offsets.push(n_x);
            n_x += svec_len(b.dim);
        }
        offsets.push(n_x);
        // row functionals in svec coordinates, stored transposed (n_x x rows)
        let mut kt = DMatrix::<f64>::zeros(n_x, nr);
        let s2 = std::f64::consts::SQRT_2 * 0.5;
        for (k, blk) in prob.blocks.iter().enumerate() {
            let v = &vt[k];
            let d = blk.dim;
            for t in &blk.terms {
                let (vp, vq) = (v.column(t.p), v.column(t.q));
                let mut col = kt.column_mut(t.row);
                let mut idx = offsets[k];
                for j in 0..d {
                    for i in 0..=j {
                        let w = if i == j { vp[i] * vq[i] } else { s2 * (vp[i] * vq[j] + vp[j] * vq[i]) };
                        col[idx] += t.coef * w;
                        idx += 1;
                    }
                }
            }
        }
        // H K_F, LMI by LMI
        let mut hk = DMatrix::<f64>::zeros(n_x, nf);
        for (l, lmi) in prob.lmis.iter().enumerate() {
            let (s, n) = (lmi.row_start, lmi.entries.len());
            if n == 0 {
                continue;
            }
            let h = kron_rows(&lmi.entries, &tl[l]);
            let seg = kt.columns(s, n).into_owned();
            hk.columns_mut(s, n).copy_from(&gemm(&seg, false, &h, false));
        }
        let kf = kt.columns(0, nf).into_owned();
        let mut pm = gemm(&hk, false, &kf, true);
        for i in 0..n_x {
            pm[(i, i)] += 1.0;
        }
        let p = Chol::regularized(&sym(pm))?;
        let k_et = kt.columns(nf, ne).into_owned();
        let pk = p.solve_mat(&k_et);
        let schur = if ne > 0 { Some(Chol::regularized(&sym(gemm(&k_et, true, &pk, false)))?) } else { None };
        log::trace!(
            "dense kkt of order {n_x}, pivot spread {:.1e}, schur {:.1e}",
            p.pivot_spread(),
            schur.as_ref().map_or(0.0, |c| c.pivot_spread())
        );
        Some(Direct::Dense { offsets, k_e: k_et.transpose(), p, pk, schur })
    }

    fn factor_rows(ops: &Ops<'_>, vt: &[DMatrix<f64>], tl: &[DMatrix<f64>]) -> Option<Direct> {
        let prob = ops.prob;
        let nr = prob.n_rows();
        let nf = prob.n_lmi_rows;
        let ne = prob.n_eq();

        // Gram of all row functionals in scaled coordinates.
        let mut acc = vec![0.0; nr * nr];
        let mut selfacc = vec![0.0; nr];
        for (k, blk) in prob.blocks.iter().enumerate() {
            if blk.terms.is_empty() {
                continue;
            }
            let gam = gemm(&vt[k], true, &vt[k], false);
            let m = gam.nrows();
            let gd = gam.as_slice();
            let terms = &blk.terms;
            for (i, t1) in terms.iter().enumerate() {
                let cp = &gd[t1.p * m..(t1.p + 1) * m];
                let cq = &gd[t1.q * m..(t1.q + 1) * m];
                let col = &mut acc[t1.row * nr..(t1.row + 1) * nr];
                let c1 = 0.5 * t1.coef;
                selfacc[t1.row] += c1 * t1.coef * (cp[t1.p] * cq[t1.q] + cp[t1.q] * cq[t1.p]);
                for t2 in &terms[i..] {
                    col[t2.row] += c1 * t2.coef * (cp[t2.p] * cq[t2.q] + cp[t2.q] * cq[t2.p]);
                }
            }
        }
        let a = DMatrix::from_vec(nr, nr, acc);
        let mut gram = &a + a.transpose();
        for i in 0..nr {
            gram[(i, i)] -= selfacc[i];
        }

        // Restriction of T (x) T to the used positions of each LMI, factored.
        let mut lfac = Vec::with_capacity(prob.lmis.len());
        for (l, lmi) in prob.lmis.iter().enumerate() {
            lfac.push(Chol::regularized(&sym(kron_rows(&lmi.entries, &tl[l])))?.l());
        }
        let lt = |m: &DMatrix<f64>| apply_lt_mat(&prob.lmis, &lfac, m);
        let omega = if nf > 0 {
            let gff = gram.view((0, 0), (nf, nf)).into_owned();
            let m1 = lt(&gff);
            let mut om = lt(&m1.transpose());
            for i in 0..nf {
                om[(i, i)] += 1.0;
            }
            Some(Chol::regularized(&sym(om))?)
        } else {
            None
        };
        let g_fe = gram.view((0, nf), (nf, ne)).into_owned();
        let schur = if ne > 0 {
            let gee = gram.view((nf, nf), (ne, ne)).into_owned();
            let s = match &omega {
                Some(om) => {
                    let lt_gfe = lt(&g_fe);
                    gee - gemm(&lt_gfe, true, &om.solve_mat(&lt_gfe), false)
                }
                None => gee,
            };
            Some(Chol::regularized(&sym(s))?)
        } else {
            None
        };
        log::trace!(
            "row kkt of order {nf}, pivot spread {:.1e}, schur {:.1e}",
            omega.as_ref().map_or(0.0, |c| c.pivot_spread()),
            schur.as_ref().map_or(0.0, |c| c.pivot_spread())
        );
        Some(Direct::Rows { lfac, omega, g_fe, schur })
    }

    fn rows_coeff(&self, f: &DVector<f64>, e: &DVector<f64>) -> DVector<f64> {
        let nf = self.ops.n_f();
        let mut coeff = DVector::zeros(nf + e.len());
        coeff.rows_mut(0, nf).copy_from(f);
        coeff.rows_mut(nf, e.len()).copy_from(e);
        coeff
    }

    /// Solves `(I + F'HF) x + E' uy = r`, `E x = by` in scaled coordinates.
    fn solve_reduced(&self, r: &[DMatrix<f64>], by: &DVector<f64>) -> (Blocks, DVector<f64>) {
        let nf = self.ops.n_f();
        let ne = self.ops.prob.n_eq();
        match &self.direct {
            Direct::Dense { offsets, k_e, p, pk, schur } => {
                let mut rv = DVector::zeros(offsets[offsets.len() - 1]);
                for (k, m) in r.iter().enumerate() {
                    svec_into(m, &mut rv.as_mut_slice()[offsets[k]..offsets[k + 1]]);
                }
                let mut x = p.solve(&rv);
                let uy = match schur {
                    Some(sc) => {
                        let uy = sc.solve(&(k_e * &x - by));
                        x -= pk * &uy;
                        uy
                    }
                    None => DVector::zeros(ne),
                };
                let xs = r
                    .iter()
                    .enumerate()
                    .map(|(k, m)| smat(&x.as_slice()[offsets[k]..offsets[k + 1]], m.nrows()))
                    .collect();
                (xs, uy)
            }
            Direct::Rows { lfac, omega, g_fe, schur } => {
                let lol = |v: &DVector<f64>| match omega {
                    Some(om) => {
                        let w = om.solve(&apply_l(&self.ops.prob.lmis, lfac, v, true));
                        apply_l(&self.ops.prob.lmis, lfac, &w, false)
                    }
                    None => v.clone(),
                };
                let rows = self.ops.eval_with(&self.vt, r);
                let f = rows.rows(0, nf).into_owned();
                let uy = match schur {
                    Some(sc) => {
                        let e = rows.rows(nf, ne).into_owned();
                        let ep = e - g_fe.tr_mul(&lol(&f));
                        sc.solve(&(ep - by))
                    }
                    None => DVector::zeros(ne),
                };
                let beta = lol(&(f - g_fe * &uy));
                let adj = self.ops.adjoint_with(&self.vt, &self.rows_coeff(&beta, &uy));
                (r.iter().zip(&adj).map(|(a, b)| a - b).collect(), uy)
            }
        }
    }

    /// `(H F x)` as row coefficients, from the LMI row values of `x`.
    fn lmi_weighted(&self, rows: &DVector<f64>) -> DVector<f64> {
        let mut coeff = DVector::zeros(self.ops.n_f());
        for (l, lmi) in self.ops.prob.lmis.iter().enumerate() {
            let m = Ops::lmi_matrix(lmi, rows);
            Ops::lmi_adjoint_into(lmi, &congruence(&self.tl[l], &m), &mut coeff, 1.0);
        }
        coeff
    }

    /// `((I + F'HF) x + E' uy, E x)` in scaled coordinates.
    fn apply_reduced(&self, x: &[DMatrix<f64>], uy: &DVector<f64>) -> (Blocks, DVector<f64>) {
        let nf = self.ops.n_f();
        let ne = self.ops.prob.n_eq();
        let rows = self.ops.eval_with(&self.vt, x);
        let adj = self.ops.adjoint_with(&self.vt, &self.rows_coeff(&self.lmi_weighted(&rows), uy));
        (x.iter().zip(&adj).map(|(a, b)| a + b).collect(), rows.rows(nf, ne).into_owned())
    }

    /// Solves the reduced system with GMRES, right-preconditioned by the
    /// direct solve. Near the optimum the direct solve loses accuracy in a
    /// few directions only, which the Krylov space captures quickly.
    fn refine(&self, r: &[DMatrix<f64>], by: &DVector<f64>) -> (Blocks, DVector<f64>) {
        let (x0, y0) = self.solve_reduced(r, by);
        let mut sol = KVec { x: x0, y: y0 };
        let rhs = KVec { x: r.to_vec(), y: by.clone() };
        let rn = rhs.norm().max(1e-300);
        let residual = |s: &KVec| {
            let (px, ey) = self.apply_reduced(&s.x, &s.y);
            let mut res = rhs.clone();
            baxpy(&mut res.x, -1.0, &px);
            res.y -= ey;
            res
        };
        let precond = |v: &KVec| {
            let (x, y) = self.solve_reduced(&v.x, &v.y);
            KVec { x, y }
        };
        let tol = 1e-13;
        let mut res = residual(&sol);
        for _ in 0..=self.refinement {
            let beta = res.norm();
            log::trace!("refine residual {:.3e} (x {:.3e}, y {:.3e})", beta / rn, bnorm(&res.x) / rn, res.y.norm() / rn);
            if beta / rn <= tol {
                break;
            }
            let m = GMRES_SPAN;
            let mut basis = vec![res.scaled(1.0 / beta)];
            let mut hess = DMatrix::<f64>::zeros(m + 1, m);
            let mut g = DVector::<f64>::zeros(m + 1);
            g[0] = beta;
            let mut rot: Vec<(f64, f64)> = Vec::with_capacity(m);
            let mut k = 0;
            while k < m {
                let z = precond(&basis[k]);
                let (px, ey) = self.apply_reduced(&z.x, &z.y);
                let mut w = KVec { x: px, y: ey };
                for (i, v) in basis.iter().enumerate() {
                    let hik = w.dot(v);
                    hess[(i, k)] = hik;
                    w.axpy(-hik, v);
                }
                let hn = w.norm();
                hess[(k + 1, k)] = hn;
                for (i, &(c, s)) in rot.iter().enumerate() {
                    let (a, b) = (hess[(i, k)], hess[(i + 1, k)]);
                    hess[(i, k)] = c * a + s * b;
                    hess[(i + 1, k)] = -s * a + c * b;
                }
                let (a, b) = (hess[(k, k)], hess[(k + 1, k)]);
                let d = a.hypot(b).max(1e-300);
                let (c, s) = (a / d, b / d);
                rot.push((c, s));
                hess[(k, k)] = d;
                hess[(k + 1, k)] = 0.0;
                g[k + 1] = -s * g[k];
                g[k] *= c;
                k += 1;
                if g[k].abs() / rn <= tol || !(hn > 1e-300) {
                    break;
                }
                basis.push(w.scaled(1.0 / hn));
            }
            // back substitution on the triangular Hessenberg part
            let mut coef = DVector::<f64>::zeros(k);
            for i in (0..k).rev() {
                let mut v = g[i];
                for j in i + 1..k {
                    v -= hess[(i, j)] * coef[j];
                }
                coef[i] = v / hess[(i, i)];
            }
            let mut comb = basis[0].scaled(coef[0]);
            for i in 1..k {
                comb.axpy(coef[i], &basis[i]);
            }
            let upd = precond(&comb);
            let mut trial = sol.clone();
            trial.axpy(1.0, &upd);
            let tres = residual(&trial);
            if !(tres.norm() < beta) {
                break;
            }
            sol = trial;
            res = tres;
        }
        (sol.x, sol.y)
    }

    /// Solves the scaled KKT system
    /// `A' uy + G' uz = bx`, `A ux = by`, `G ux - W'W uz = bz`.
    fn solve(&self, bx: &[DMatrix<f64>], by: &DVector<f64>, bz: &[DMatrix<f64>]) -> (Blocks, DVector<f64>, Blocks) {
        let nb = self.ops.nb;
        let nf = self.ops.n_f();
        let ne = self.ops.prob.n_eq();
        // scaled right-hand side R' (bx + G' H bz) R
        let mut coeff = DVector::zeros(nf + ne);
        for (l, lmi) in self.ops.prob.lmis.iter().enumerate() {
            Ops::lmi_adjoint_into(lmi, &congruence(&self.tl[l], &bz[nb + l]), &mut coeff, -1.0);
        }
        let adj = self.ops.adjoint_with(&self.vt, &coeff);
        let r: Blocks = (0..nb)
            .map(|k| {
                let rk = &self.r[k];
                let ti = &self.rti[k];
                sym(rk.transpose() * &bx[k] * rk) - sym(ti.transpose() * &bz[k] * ti) + &adj[k]
            })
            .collect();

        let (xs, uy) = self.refine(&r, by);

        let rows = self.ops.eval_with(&self.vt, &xs);
        let ux: Blocks = xs.iter().zip(&self.r).map(|(x, rk)| sym(rk * x * rk.transpose())).collect();
        let mut uz: Blocks = Vec::with_capacity(bz.len());
        let mut coeff = DVector::zeros(nf + ne);
        let mut uz_lmi = Vec::with_capacity(self.tl.len());
        for (l, lmi) in self.ops.prob.lmis.iter().enumerate() {
            let m = -Ops::lmi_matrix(lmi, &rows) - &bz[nb + l];
            let z = congruence(&self.tl[l], &m);
            Ops::lmi_adjoint_into(lmi, &z, &mut coeff, -1.0);
            uz_lmi.push(z);
        }
        coeff.rows_mut(nf, ne).copy_from(&uy);
        // block duals from the dual equation, which then holds exactly
        let adj = self.ops.adjoint_rows(&coeff);
        uz.extend(adj.into_iter().zip(bx).map(|(a, b)| a - b));
        uz.extend(uz_lmi);
        (ux, uy, uz)
    }
}

fn shift_into_cone(m: &mut DMatrix<f64>) {
    let min = SymmetricEigen::new(sym(m.clone())).eigenvalues.min();
    let nrm = m.norm().max(1.0);
    if min <= 1e-8 * nrm {
        let a = 1.0 + (-min).max(0.0);
        for i in 0..m.nrows() {
            m[(i, i)] += a;
        }
    }
}

pub(crate) fn run(
    prob: &RealProgram,
    settings: &SolverSettings,
    accept: &mut dyn FnMut(&RealPoint) -> (bool, KktResiduals),
) -> IpmOutput {
    let ops = Ops::new(prob);
    let nb = ops.nb;
    let dims = ops.cone_dims();
    let nu: f64 = dims.iter().sum::<usize>() as f64;
    let c = ops.c();
    let h = ops.h();
    let b = prob.b.clone();
    let ne = prob.n_eq();
    let nrm_c = bnorm(&c).max(1.0);
    let nrm_h = bnorm(&h).max(1.0);
    let nrm_b = b.norm().max(1.0);

    let make_point = |x: &Blocks, y: &DVector<f64>, z: &Blocks, tau: f64| RealPoint {
        x: bscale(x, 1.0 / tau),
        y: y / tau,
        z_lmi: z[nb..].iter().map(|m| m / tau).collect(),
    };

    // Least-squares starting point under identity scaling.
    let ident: Vec<Scaling> = dims.iter().map(|&d| Scaling::identity(d)).collect();
    let Some(kkt0) = Kkt::factor(&ops, &ident, settings.refinement_steps) else {
        let zero: Blocks = prob.blocks.iter().map(|b| DMatrix::zeros(b.dim, b.dim)).collect();
        return IpmOutput {
            point: RealPoint { x: zero, y: DVector::zeros(ne), z_lmi: prob.lmis.iter().map(|l| DMatrix::zeros(l.dim, l.dim)).collect() },
            status: SolveStatus::NumericalError,
            iterations: 0,
        };
    };
    let zeros_x: Blocks = prob.blocks.iter().map(|b| DMatrix::zeros(b.dim, b.dim)).collect();
    let zeros_z: Blocks = dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
    let (mut x, _, zp) = kkt0.solve(&zeros_x, &b, &h);
    let mut s: Blocks = zp.iter().map(|m| -m).collect();
    let neg_c: Blocks = bscale(&c, -1.0);
    let (_, mut y, mut z) = kkt0.solve(&neg_c, &DVector::zeros(ne), &zeros_z);
    drop(kkt0);
    for m in s.iter_mut().chain(z.iter_mut()) {
        shift_into_cone(m);
    }
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut stalls = 0;
    for iter in 0..=settings.max_iter {
        // residuals
        let aty_gtz = ops.at_y_gt_z(&y, &z);
        let (ax, gx) = ops.a_and_g(&x);
        let rx: Blocks = aty_gtz.iter().zip(&c).map(|(a, ci)| a + ci * tau).collect();
        let ry = -&ax + &b * tau;
        let rz: Blocks = (0..dims.len()).map(|i| &s[i] + &gx[i] - &h[i] * tau).collect();
        let cx = bdot(&c, &x);
        let by = b.dot(&y);
        let hz = bdot(&h, &z);
        let rt = kappa + cx + by + hz;
        let gap = bdot(&s, &z);
        let mu = (gap + tau * kappa) / (nu + 1.0);

        let pcost = cx / tau;
        let dcost = -(by + hz) / tau;
        let pres = (ry.norm() / tau / nrm_b).max(bnorm(&rz) / tau / nrm_h);
        let dres = bnorm(&rx) / tau / nrm_c;
        let denom = 1.0 + pcost.abs() + dcost.abs();
        let relgap = ((pcost - dcost).abs().max(gap / (tau * tau))) / denom;
        log::debug!(
            "ipm {iter:3}: pcost {pcost:.6e} dcost {dcost:.6e} pres {pres:.2e} dres {dres:.2e} gap {relgap:.2e} tau {tau:.2e} kappa {kappa:.2e}"
        );

        if pres <= settings.tol && dres <= settings.tol && relgap <= settings.tol {
            let pt = make_point(&x, &y, &z, tau);
            let (ok, res) = accept(&pt);
            log::debug!("ipm {iter:3}: independent check {res:?}");
            if ok {
                return IpmOutput { point: pt, status: SolveStatus::Optimal, iterations: iter };
            }
        }
        // infeasibility certificates
        let hresx = bnorm(&aty_gtz);
        if by + hz < 0.0 && hresx / nrm_c / (-(by + hz)) <= settings.tol {
            return IpmOutput { point: make_point(&x, &y, &z, tau), status: SolveStatus::Infeasible, iterations: iter };
        }
        if cx < 0.0 {
            let xs: Blocks = gx.iter().zip(&s).map(|(g, si)| g + si).collect();
            let dinf = (ax.norm() / nrm_b).max(bnorm(&xs) / nrm_h) / (-cx);
            if dinf <= settings.tol {
                return IpmOutput { point: make_point(&x, &y, &z, tau), status: SolveStatus::Unbounded, iterations: iter };
            }
        }
        if iter == settings.max_iter {
            break;
        }

        // scaling and factorization
        let scalings: Option<Vec<Scaling>> = s.iter().zip(&z).map(|(si, zi)| Scaling::nt(si, zi)).collect();
        let Some(scalings) = scalings else {
            return IpmOutput { point: make_point(&x, &y, &z, tau), status: SolveStatus::NumericalError, iterations: iter };
        };
        let Some(kkt) = Kkt::factor(&ops, &scalings, settings.refinement_steps) else {
            return IpmOutput { point: make_point(&x, &y, &z, tau), status: SolveStatus::NumericalError, iterations: iter };
        };
        let (x1, y1, z1) = kkt.solve(&neg_c, &b, &h);
        let denom_tau = bdot(&c, &x1) + b.dot(&y1) + bdot(&h, &z1) - kappa / tau;

        // One Newton direction for target (eta, rs, rk).
        let direction = |eta: f64, rs: &Blocks, rk: f64| {
            let bx = bscale(&rx, -eta);
            let byv = &ry * eta;
            let bz: Blocks = (0..dims.len()).map(|i| &rz[i] * (-eta) - scalings[i].apply_wt(&rs[i])).collect();
            let (x2, y2, z2) = kkt.solve(&bx, &byv, &bz);
            let num = -eta * rt - rk / tau - (bdot(&c, &x2) + b.dot(&y2) + bdot(&h, &z2));
            let dtau = num / denom_tau;
            let mut dx = x2;
            baxpy(&mut dx, dtau, &x1);
            let dy = y2 + &y1 * dtau;
            let mut dz = z2;
            baxpy(&mut dz, dtau, &z1);
            let dkappa = (rk - kappa * dtau) / tau;
            // ds from the linear constraint itself so that G x + s - h tau
            // cannot drift through inaccuracies of the scaling inverse
            let (_, gdx) = ops.a_and_g(&dx);
            let ds: Blocks = (0..dims.len()).map(|i| &rz[i] * (-eta) - &gdx[i] + &h[i] * dtau).collect();
            let dzt: Blocks = (0..dims.len()).map(|i| scalings[i].apply_w(&dz[i])).collect();
            let dst: Blocks = (0..dims.len()).map(|i| scalings[i].apply_w_inv_t(&ds[i])).collect();
            (dx, dy, dz, ds, dtau, dkappa, dst, dzt)
        };
        let step_len = |dst: &Blocks, dzt: &Blocks, dtau: f64, dkappa: f64| {
            let mut a = f64::INFINITY;
            for i in 0..dims.len() {
                a = a.min(max_step(&scalings[i].lambda, &dst[i]));
                a = a.min(max_step(&scalings[i].lambda, &dzt[i]));
            }
            if dtau < 0.0 {
                a = a.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                a = a.min(-kappa / dkappa);
            }
            a
        };

        // predictor
        let rs_aff: Blocks = scalings.iter().map(|sc| DMatrix::from_diagonal(&(-&sc.lambda))).collect();
        let (_, _, _, _, dtau_a, dkappa_a, dst_a, dzt_a) = direction(1.0, &rs_aff, -tau * kappa);
        let alpha_a = step_len(&dst_a, &dzt_a, dtau_a, dkappa_a).min(1.0);
        let sigma = (1.0 - alpha_a).powi(3).clamp(0.0, 1.0);

        // corrector
        let rs: Blocks = (0..dims.len())
            .map(|i| {
                let lam = &scalings[i].lambda;
                let mut m = -DMatrix::from_diagonal(&lam.map(|v| v * v));
                for j in 0..lam.len() {
                    m[(j, j)] += sigma * mu;
                }
                m -= jordan(&dst_a[i], &dzt_a[i]);
                lambda_div(lam, &m)
            })
            .collect();
        let rk = -tau * kappa + sigma * mu - dtau_a * dkappa_a;
        let (dx, dy, dz, ds, dtau, dkappa, dst, dzt) = direction(1.0 - sigma, &rs, rk);
        let alpha = (settings.step_factor * step_len(&dst, &dzt, dtau, dkappa)).min(1.0);

        if alpha < 1e-10 {
            stalls += 1;
            if stalls >= 3 {
                return IpmOutput { point: make_point(&x, &y, &z, tau), status: SolveStatus::NumericalError, iterations: iter };
            }
        } else {
            stalls = 0;
        }

        baxpy(&mut x, alpha, &dx);
        y += &dy * alpha;
        for i in 0..dims.len() {
            maxpy(&mut s[i], alpha, &ds[i]);
            maxpy(&mut z[i], alpha, &dz[i]);
            s[i] = sym(std::mem::replace(&mut s[i], DMatrix::zeros(0, 0)));
            z[i] = sym(std::mem::replace(&mut z[i], DMatrix::zeros(0, 0)));
        }
        tau += alpha * dtau;
        kappa += alpha * dkappa;
    }
    IpmOutput { point: make_point(&x, &y, &z, tau), status: SolveStatus::MaxIter, iterations: settings.max_iter }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_rows_inverse_pair() {
        // on the full symmetric space, (M (x) M)^{-1} = Q^{-1} (M^{-1} (x) M^{-1}) Q^{-1}
        // where Q weighs off-diagonal rows by two
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let mi = m.clone().try_inverse().unwrap();
        let entries: Vec<(usize, usize)> = (0..3).flat_map(|j| (0..=j).map(move |i| (i, j))).collect();
        let q = DMatrix::from_diagonal(&DVector::from_iterator(
            entries.len(),
            entries.iter().map(|&(i, j)| if i == j { 1.0 } else { 0.5 }),
        ));
        let prod = kron_rows(&entries, &m) * &q * kron_rows(&entries, &mi) * &q;
        assert!((prod - DMatrix::<f64>::identity(entries.len(), entries.len())).norm() < 1e-12);
    }
}
