//! Fixed-size 8×8 complex kernel and the operators of the three-qubit bit-flip code.
//!
//! Basis ordering is `|q1 q2 q3>` with flat index `4*q1 + 2*q2 + q3`, and
//! `σ_z|0> = +|0>`. All syndromes are products `Z_a Z_b`, so the opposite sign
//! convention gives identical syndrome operators and projectors.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use nalgebra::{Complex, SMatrix};
use num_complex::Complex64;

use crate::error::SimError;

/// Dimension of the three-qubit register.
pub const DIM: usize = 8;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Eigenvalues below this are clipped during repair; a Cholesky factorisation
/// of `ρ + PSD_SLACK·I` succeeding proves `λ_min ≥ -PSD_SLACK`.
pub const PSD_SLACK: f64 = 1e-13;

/// Entries smaller than this in magnitude are flushed to zero during repair.
/// Exponentially decaying populations would otherwise drift into subnormal
/// range, which is orders of magnitude slower on most hardware.
pub const FLUSH_THRESHOLD: f64 = 1e-250;

/// Trace below which repair reports an integrator blow-up.
pub const MIN_TRACE: f64 = 1e-8;

#[derive(Clone, Copy, PartialEq)]
pub struct ComplexMatrix8(pub [[Complex64; DIM]; DIM]);

impl Default for ComplexMatrix8 {
    fn default() -> Self {
        Self::zeros()
    }
}

impl fmt::Debug for ComplexMatrix8 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix8 [")?;
        for row in &self.0 {
            write!(f, "  ")?;
            for z in row {
                write!(f, "{:+.4e}{:+.4e}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl ComplexMatrix8 {
    pub const fn zeros() -> Self {
        Self([[ZERO; DIM]; DIM])
    }

    pub fn identity() -> Self {
        let mut m = Self::zeros();
        for i in 0..DIM {
            m.0[i][i] = ONE;
        }
        m
    }

    pub fn from_real_diagonal(diag: [f64; DIM]) -> Self {
        let mut m = Self::zeros();
        for (i, d) in diag.into_iter().enumerate() {
            m.0[i][i] = Complex64::new(d, 0.0);
        }
        m
    }

    /// `|i><j|`
    pub fn basis_outer(i: usize, j: usize) -> Self {
        let mut m = Self::zeros();
        m.0[i][j] = ONE;
        m
    }

    /// `|ψ><φ|`
    pub fn outer(psi: &[Complex64; DIM], phi: &[Complex64; DIM]) -> Self {
        let mut m = Self::zeros();
        for i in 0..DIM {
            for j in 0..DIM {
                m.0[i][j] = psi[i] * phi[j].conj();
            }
        }
        m
    }

    /// Kronecker product of three 2×2 matrices, first factor on qubit 1.
    pub fn kron3(a: &[[Complex64; 2]; 2], b: &[[Complex64; 2]; 2], c: &[[Complex64; 2]; 2]) -> Self {
        let mut m = Self::zeros();
        for i in 0..DIM {
            let (i1, i2, i3) = (i >> 2 & 1, i >> 1 & 1, i & 1);
            for j in 0..DIM {
                let (j1, j2, j3) = (j >> 2 & 1, j >> 1 & 1, j & 1);
                m.0[i][j] = a[i1][j1] * b[i2][j2] * c[i3][j3];
            }
        }
        m
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::zeros();
        for i in 0..DIM {
            for j in 0..DIM {
                m.0[j][i] = self.0[i][j].conj();
            }
        }
        m
    }

    pub fn trace(&self) -> Complex64 {
        (0..DIM).map(|i| self.0[i][i]).sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = *self;
        m.0.iter_mut().flatten().for_each(|z| *z *= s);
        m
    }

    pub fn scale_complex(&self, s: Complex64) -> Self {
        let mut m = *self;
        m.0.iter_mut().flatten().for_each(|z| *z *= s);
        m
    }

    /// `[A, B] = AB - BA`
    pub fn commutator(&self, other: &Self) -> Self {
        *self * *other - *other * *self
    }

    /// `(A + A†)/2`
    pub fn hermitian_part(&self) -> Self {
        let mut m = Self::zeros();
        for i in 0..DIM {
            m.0[i][i] = Complex64::new(self.0[i][i].re, 0.0);
            for j in (i + 1)..DIM {
                let z = (self.0[i][j] + self.0[j][i].conj()) * 0.5;
                m.0[i][j] = z;
                m.0[j][i] = z.conj();
            }
        }
        m
    }

    /// Largest entrywise modulus.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (*self - *other).max_abs()
    }

    /// `‖A - A†‖_max`
    pub fn hermiticity_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for i in 0..DIM {
            for j in i..DIM {
                err = err.max((self.0[i][j] - self.0[j][i].conj()).norm());
            }
        }
        err
    }

    /// `tr(A B)` without forming the product.
    pub fn trace_product(&self, other: &Self) -> Complex64 {
        let mut acc = ZERO;
        for i in 0..DIM {
            for k in 0..DIM {
                acc += self.0[i][k] * other.0[k][i];
            }
        }
        acc
    }

    pub fn mul_vec(&self, v: &[Complex64; DIM]) -> [Complex64; DIM] {
        let mut out = [ZERO; DIM];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..DIM).map(|k| self.0[i][k] * v[k]).sum();
        }
        out
    }

    /// Eigenvalues in ascending order, assuming the matrix is Hermitian.
    pub fn hermitian_eigenvalues(&self) -> [f64; DIM] {
        let eig = self.to_nalgebra().symmetric_eigen();
        let mut vals = [0.0; DIM];
        vals.copy_from_slice(eig.eigenvalues.as_slice());
        vals.sort_by(f64::total_cmp);
        vals
    }

    /// Cholesky attempt on `A + shift·I`; `true` when every pivot is positive.
    pub fn is_positive_definite_shifted(&self, shift: f64) -> bool {
        let mut l = [[ZERO; DIM]; DIM];
        for j in 0..DIM {
            let mut d = self.0[j][j].re + shift;
            for k in 0..j {
                d -= l[j][k].norm_sqr();
            }
            if !(d > 0.0) {
                return false;
            }
            let ljj = d.sqrt();
            l[j][j] = Complex64::new(ljj, 0.0);
            let inv = 1.0 / ljj;
            for i in (j + 1)..DIM {
                let mut s = self.0[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k].conj();
                }
                l[i][j] = s * inv;
            }
        }
        true
    }

    pub fn to_nalgebra(&self) -> SMatrix<Complex<f64>, DIM, DIM> {
        SMatrix::from_fn(|i, j| self.0[i][j])
    }

    pub fn from_nalgebra(m: &SMatrix<Complex<f64>, DIM, DIM>) -> Self {
        let mut out = Self::zeros();
        for i in 0..DIM {
            for j in 0..DIM {
                out.0[i][j] = m[(i, j)];
            }
        }
        out
    }
}

impl Index<(usize, usize)> for ComplexMatrix8 {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.0[i][j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix8 {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.0[i][j]
    }
}

impl Add for ComplexMatrix8 {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for ComplexMatrix8 {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.0.iter_mut().flatten().zip(rhs.0.iter().flatten()) {
            *a += *b;
        }
    }
}

impl Sub for ComplexMatrix8 {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self -= rhs;
        self
    }
}

impl SubAssign for ComplexMatrix8 {
    fn sub_assign(&mut self, rhs: Self) {
        for (a, b) in self.0.iter_mut().flatten().zip(rhs.0.iter().flatten()) {
            *a -= *b;
        }
    }
}

impl Neg for ComplexMatrix8 {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul for ComplexMatrix8 {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::zeros();
        for i in 0..DIM {
            for k in 0..DIM {
                let a = self.0[i][k];
                if a == ZERO {
                    continue;
                }
                for j in 0..DIM {
                    out.0[i][j] += a * rhs.0[k][j];
                }
            }
        }
        out
    }
}

impl Mul<f64> for ComplexMatrix8 {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.scale(rhs)
    }
}

/// A density matrix of the register: Hermitian, unit trace, PSD up to tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMatrix(ComplexMatrix8);

impl DensityMatrix {
    pub const HERMITICITY_TOL: f64 = 1e-12;
    pub const TRACE_TOL: f64 = 1e-12;
    pub const EIGENVALUE_TOL: f64 = 1e-10;

    /// Validates all three invariants.
    pub fn new(matrix: ComplexMatrix8) -> Result<Self, SimError> {
        let herm = matrix.hermiticity_error();
        if !(herm <= Self::HERMITICITY_TOL) {
            return Err(SimError::InvalidState(format!("hermiticity error {herm:e}")));
        }
        let tr = matrix.trace();
        if !((tr.re - 1.0).abs() <= Self::TRACE_TOL && tr.im.abs() <= Self::TRACE_TOL) {
            return Err(SimError::InvalidState(format!("trace {tr} is not 1")));
        }
        let lmin = matrix.hermitian_part().hermitian_eigenvalues()[0];
        if lmin < -Self::EIGENVALUE_TOL {
            return Err(SimError::InvalidState(format!("negative eigenvalue {lmin:e}")));
        }
        Ok(Self(matrix))
    }

    /// Wraps a matrix the caller already knows is valid.
    pub(crate) fn new_unchecked(matrix: ComplexMatrix8) -> Self {
        Self(matrix)
    }

    /// Pure basis state `|b1 b2 b3><b1 b2 b3|`, index `4*b1 + 2*b2 + b3`.
    pub fn basis_state(index: usize) -> Self {
        assert!(index < DIM, "basis index {index} out of range");
        Self(ComplexMatrix8::basis_outer(index, index))
    }

    /// Pure state from a (not necessarily normalised) vector.
    pub fn pure(psi: &[Complex64; DIM]) -> Result<Self, SimError> {
        let norm_sq: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if !(norm_sq > 0.0) {
            return Err(SimError::InvalidState("zero state vector".into()));
        }
        let scale = 1.0 / norm_sq.sqrt();
        let v = psi.map(|z| z * scale);
        Ok(Self(ComplexMatrix8::outer(&v, &v)))
    }

    pub fn maximally_mixed() -> Self {
        Self(ComplexMatrix8::identity().scale(1.0 / DIM as f64))
    }

    /// Diagonal state with weights `(pC, p1, p2, p3)` on `|000>, |100>, |010>, |001>`.
    pub fn syndrome_diagonal(populations: [f64; 4]) -> Result<Self, SimError> {
        if populations.iter().any(|p| !(*p >= 0.0)) {
            return Err(SimError::InvalidState(format!(
                "populations {populations:?} must be non-negative"
            )));
        }
        let total: f64 = populations.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SimError::InvalidState(format!(
                "populations {populations:?} sum to {total}, expected 1"
            )));
        }
        let mut diag = [0.0; DIM];
        diag[0b000] = populations[0];
        diag[0b100] = populations[1];
        diag[0b010] = populations[2];
        diag[0b001] = populations[3];
        Ok(Self(ComplexMatrix8::from_real_diagonal(diag)))
    }

    pub fn matrix(&self) -> &ComplexMatrix8 {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix8 {
        self.0
    }

    /// `tr(ρ²)`
    pub fn purity(&self) -> f64 {
        self.0.trace_product(&self.0).re
    }

    /// `tr(A ρ)` for Hermitian `A`.
    pub fn expectation(&self, op: &ComplexMatrix8) -> f64 {
        op.trace_product(&self.0).re
    }

    /// `<i|ρ|i>`
    pub fn diagonal(&self, i: usize) -> f64 {
        self.0 .0[i][i].re
    }
}

/// Syndrome subspace label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subspace {
    Code,
    Flip(usize),
}

/// Population of each syndrome subspace, in the order `(pC, p1, p2, p3)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Populations {
    pub code: f64,
    pub flipped: [f64; 3],
}

impl Populations {
    pub fn as_array(&self) -> [f64; 4] {
        [self.code, self.flipped[0], self.flipped[1], self.flipped[2]]
    }

    pub fn from_array(p: [f64; 4]) -> Self {
        Self { code: p[0], flipped: [p[1], p[2], p[3]] }
    }

    pub fn get(&self, k: Subspace) -> f64 {
        match k {
            Subspace::Code => self.code,
            Subspace::Flip(j) => self.flipped[j],
        }
    }

    /// `p1 + p2 + p3`
    pub fn flipped_total(&self) -> f64 {
        self.flipped.iter().sum()
    }
}

/// The fixed operators of the code, as dense matrices and as lookup tables.
///
/// `S_k` is diagonal with entries `syndrome_signs[k][i]`; `X_j` maps `|i>` to
/// `|flip_index[j][i]>`. The stepping kernels use the tables, everything else
/// uses the dense matrices.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    pub syndromes: [ComplexMatrix8; 3],
    pub flips: [ComplexMatrix8; 3],
    pub code_projector: ComplexMatrix8,
    pub flip_projectors: [ComplexMatrix8; 3],
    pub identity: ComplexMatrix8,
    pub syndrome_signs: [[f64; DIM]; 3],
    pub flip_index: [[usize; DIM]; 3],
    /// Subspace label of each basis state.
    pub subspace_of: [Subspace; DIM],
}

fn pauli_i() -> [[Complex64; 2]; 2] {
    [[ONE, ZERO], [ZERO, ONE]]
}

fn pauli_x() -> [[Complex64; 2]; 2] {
    [[ZERO, ONE], [ONE, ZERO]]
}

fn pauli_z() -> [[Complex64; 2]; 2] {
    [[ONE, ZERO], [ZERO, -ONE]]
}

/// Bit mask of qubit `j` (0-based) in the flat index.
pub const fn qubit_mask(j: usize) -> usize {
    4 >> j
}

/// Qubit pair measured by syndrome `k` (0-based): `S1 = Z2Z3, S2 = Z1Z3, S3 = Z1Z2`.
pub const fn syndrome_qubits(k: usize) -> (usize, usize) {
    match k {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

pub fn build_operators() -> OperatorSet {
    let (i2, x, z) = (pauli_i(), pauli_x(), pauli_z());
    let local = |j: usize, p: &[[Complex64; 2]; 2]| {
        let f = |q: usize| if q == j { *p } else { i2 };
        ComplexMatrix8::kron3(&f(0), &f(1), &f(2))
    };
    let zs = [local(0, &z), local(1, &z), local(2, &z)];
    let flips = [local(0, &x), local(1, &x), local(2, &x)];
    let syndromes = [0, 1, 2].map(|k| {
        let (a, b) = syndrome_qubits(k);
        zs[a] * zs[b]
    });
    let identity = ComplexMatrix8::identity();
    let code_projector =
        (identity + syndromes[0] + syndromes[1] + syndromes[2]).scale(0.25);
    let flip_projectors = flips.map(|x| x * code_projector * x);

    let syndrome_signs = [0, 1, 2].map(|k| {
        let (a, b) = syndrome_qubits(k);
        let mut s = [0.0; DIM];
        for (i, v) in s.iter_mut().enumerate() {
            let parity = ((i & qubit_mask(a)) != 0) ^ ((i & qubit_mask(b)) != 0);
            *v = if parity { -1.0 } else { 1.0 };
        }
        s
    });
    let flip_index = [0, 1, 2].map(|j| {
        let mut t = [0; DIM];
        for (i, v) in t.iter_mut().enumerate() {
            *v = i ^ qubit_mask(j);
        }
        t
    });
    let subspace_of = std::array::from_fn(|i| {
        let signs = [syndrome_signs[0][i], syndrome_signs[1][i], syndrome_signs[2][i]];
        match signs {
            [s1, s2, s3] if s1 > 0.0 && s2 > 0.0 && s3 > 0.0 => Subspace::Code,
            [s1, _, _] if s1 > 0.0 => Subspace::Flip(0),
            [_, s2, _] if s2 > 0.0 => Subspace::Flip(1),
            _ => Subspace::Flip(2),
        }
    });

    OperatorSet {
        syndromes,
        flips,
        code_projector,
        flip_projectors,
        identity,
        syndrome_signs,
        flip_index,
        subspace_of,
    }
}

impl OperatorSet {
    /// Populations read from the diagonal, which is exact since every projector
    /// is diagonal in the computational basis.
    pub fn populations_fast(&self, rho: &ComplexMatrix8) -> Populations {
        let mut raw = [0.0; 4];
        for i in 0..DIM {
            let slot = match self.subspace_of[i] {
                Subspace::Code => 0,
                Subspace::Flip(j) => j + 1,
            };
            raw[slot] += rho.0[i][i].re;
        }
        Populations::from_array(raw.map(|p| p.clamp(0.0, 1.0)))
    }

    /// `tr(S_k ρ)` for each syndrome.
    pub fn syndrome_expectations(&self, rho: &ComplexMatrix8) -> [f64; 3] {
        self.syndrome_signs
            .map(|s| (0..DIM).map(|i| s[i] * rho.0[i][i].re).sum())
    }
}

/// `p_k = tr(Π_k ρ)` for `k ∈ {C,1,2,3}`, clipped to `[0,1]`.
pub fn populations(rho: &DensityMatrix, ops: &OperatorSet) -> Populations {
    let p = |proj: &ComplexMatrix8| rho.expectation(proj).clamp(0.0, 1.0);
    Populations {
        code: p(&ops.code_projector),
        flipped: [
            p(&ops.flip_projectors[0]),
            p(&ops.flip_projectors[1]),
            p(&ops.flip_projectors[2]),
        ],
    }
}

/// Outcome of [`repair`].
#[derive(Clone, Copy, Debug)]
pub struct RepairReport {
    /// Whether eigenvalues had to be clipped.
    pub clipped: bool,
    /// Trace before rescaling.
    pub trace_before: f64,
}

/// Projects an approximately valid matrix back onto the density matrices:
/// Hermitian part, eigenvalues clipped at zero, trace rescaled to one.
///
/// The eigendecomposition only runs when a shifted Cholesky test cannot prove
/// `λ_min ≥ -PSD_SLACK`; otherwise clipping would not move the matrix by more
/// than that slack. Entries below [`FLUSH_THRESHOLD`] are flushed to zero.
pub fn repair(matrix: &ComplexMatrix8) -> Result<(DensityMatrix, RepairReport), SimError> {
    let mut h = matrix.hermitian_part();
    let trace_before = h.trace().re;
    if !trace_before.is_finite() || h.0.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(SimError::Blowup { trace: trace_before });
    }
    if trace_before <= MIN_TRACE {
        return Err(SimError::Blowup { trace: trace_before });
    }
    let mut clipped = false;
    if !h.is_positive_definite_shifted(PSD_SLACK) {
        let eig = h.to_nalgebra().symmetric_eigen();
        let vals = eig.eigenvalues.map(|v| v.max(0.0));
        let u = eig.eigenvectors;
        let d = SMatrix::<Complex<f64>, DIM, DIM>::from_diagonal(&vals.map(|v| Complex::new(v, 0.0)));
        h = ComplexMatrix8::from_nalgebra(&(u * d * u.adjoint())).hermitian_part();
        clipped = true;
    }
    let tr = h.trace().re;
    if tr <= MIN_TRACE {
        return Err(SimError::Blowup { trace: tr });
    }
    let inv = 1.0 / tr;
    for z in h.0.iter_mut().flatten() {
        z.re = if z.re.abs() < FLUSH_THRESHOLD { 0.0 } else { z.re * inv };
        z.im = if z.im.abs() < FLUSH_THRESHOLD { 0.0 } else { z.im * inv };
    }
    Ok((DensityMatrix::new_unchecked(h), RepairReport { clipped, trace_before }))
}

/// [`repair`] without the diagnostics.
pub fn renormalize(matrix: &ComplexMatrix8) -> Result<DensityMatrix, SimError> {
    repair(matrix).map(|(rho, _)| rho)
}
