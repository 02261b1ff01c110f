//! Two-qubit polarization states, waveplates and Born-rule statistics.
//!
//! Basis order is `{HH, HV, VH, VV}` with photon 1 the left factor. The target
//! state distributed by the source is `|ψ⟩ = (|HV⟩ + |VH⟩)/√2`.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, FRAC_PI_8, PI};

use nalgebra::{Complex, Matrix2, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex<f64>;
/// 2×2 Jones / single-qubit operator.
pub type Jones = Matrix2<C64>;

pub const HERMITICITY_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-10;
pub const UNITARITY_TOL: f64 = 1e-12;

/// Operator distance (up to global phase) accepted by [`solve_compensation`].
pub const COMPENSATION_TOL: f64 = 1e-6;
/// Levenberg–Marquardt iterations per start in [`solve_compensation`].
pub const COMPENSATION_MAX_ITERATIONS: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum QuantumError {
    #[error("fidelity {0} outside [0.25, 1]")]
    FidelityOutOfRange(f64),
    #[error("density matrix is not Hermitian (deviation {0:e})")]
    NotHermitian(f64),
    #[error("density matrix trace {0} differs from 1")]
    BadTrace(f64),
    #[error("density matrix has eigenvalue {0:e} below zero")]
    NotPositive(f64),
    #[error("operator is not unitary (deviation {0:e})")]
    NotUnitary(f64),
    #[error("waveplate solve did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Density matrix of two polarization qubits.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoQubitState {
    rho: Matrix4<C64>,
}

impl TwoQubitState {
    /// Wraps `rho` after checking Hermiticity, unit trace and positivity.
    pub fn from_density(rho: Matrix4<C64>) -> Result<Self, QuantumError> {
        let state = TwoQubitState { rho };
        state.validate()?;
        Ok(state)
    }

    pub fn pure(amplitudes: &Vector4<C64>) -> Self {
        let v = amplitudes / C64::from(amplitudes.norm());
        TwoQubitState { rho: v * v.adjoint() }
    }

    /// `|ψ⟩⟨ψ|` with `|ψ⟩ = (|HV⟩ + |VH⟩)/√2`.
    pub fn target() -> Self {
        Self::pure(&target_vector())
    }

    pub fn maximally_mixed() -> Self {
        TwoQubitState {
            rho: Matrix4::identity() * c(0.25, 0.0),
        }
    }

    pub fn rho(&self) -> &Matrix4<C64> {
        &self.rho
    }

    pub fn validate(&self) -> Result<(), QuantumError> {
        let herm = (self.rho - self.rho.adjoint()).norm();
        if herm > HERMITICITY_TOL {
            return Err(QuantumError::NotHermitian(herm));
        }
        let tr = self.rho.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(QuantumError::BadTrace(tr.re));
        }
        let min = self.min_eigenvalue();
        if min < -PSD_TOL {
            return Err(QuantumError::NotPositive(min));
        }
        Ok(())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (self.rho + self.rho.adjoint()) * c(0.5, 0.0);
        herm.symmetric_eigenvalues().min()
    }

    /// Diagonal `(HH, HV, VH, VV)`.
    pub fn populations(&self) -> [f64; 4] {
        [0, 1, 2, 3].map(|k| self.rho[(k, k)].re)
    }

    fn symmetrized(rho: Matrix4<C64>) -> Self {
        TwoQubitState {
            rho: (rho + rho.adjoint()) * c(0.5, 0.0),
        }
    }
}

pub fn target_vector() -> Vector4<C64> {
    Vector4::new(c(0.0, 0.0), c(FRAC_1_SQRT_2, 0.0), c(FRAC_1_SQRT_2, 0.0), c(0.0, 0.0))
}

/// Shape of the noise mixed into the target state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    /// Isotropic white noise (Werner state).
    #[default]
    White,
    /// Phase noise: mixture with `(|HV⟩ − |VH⟩)/√2`.
    Dephasing,
}

/// Werner state `p|ψ⟩⟨ψ| + (1−p)I/4` with `p = (4F−1)/3`, so that its
/// fidelity with `|ψ⟩` is exactly `F`.
pub fn make_werner(fidelity: f64) -> Result<TwoQubitState, QuantumError> {
    if !(0.25..=1.0).contains(&fidelity) {
        return Err(QuantumError::FidelityOutOfRange(fidelity));
    }
    let p = (4.0 * fidelity - 1.0) / 3.0;
    let rho = TwoQubitState::target().rho * c(p, 0.0) + Matrix4::identity() * c((1.0 - p) / 4.0, 0.0);
    Ok(TwoQubitState { rho })
}

/// State with fidelity `F` to `|ψ⟩` under the chosen noise model.
pub fn make_noisy(model: NoiseModel, fidelity: f64) -> Result<TwoQubitState, QuantumError> {
    match model {
        NoiseModel::White => make_werner(fidelity),
        NoiseModel::Dephasing => {
            if !(0.25..=1.0).contains(&fidelity) {
                return Err(QuantumError::FidelityOutOfRange(fidelity));
            }
            let minus = Vector4::new(c(0.0, 0.0), c(FRAC_1_SQRT_2, 0.0), c(-FRAC_1_SQRT_2, 0.0), c(0.0, 0.0));
            let rho = TwoQubitState::target().rho * c(fidelity, 0.0) + TwoQubitState::pure(&minus).rho * c(1.0 - fidelity, 0.0);
            Ok(TwoQubitState { rho })
        }
    }
}

/// `⟨ψ|ρ|ψ⟩`.
pub fn exact_fidelity(state: &TwoQubitState) -> f64 {
    let v = target_vector();
    (v.adjoint() * state.rho * v)[(0, 0)].re
}

pub fn unitarity_deviation(u: &Jones) -> f64 {
    (u.adjoint() * u - Jones::identity()).norm()
}

/// `(U1⊗U2) ρ (U1⊗U2)†`.
pub fn apply_local_unitaries(state: &TwoQubitState, u1: &Jones, u2: &Jones) -> Result<TwoQubitState, QuantumError> {
    for u in [u1, u2] {
        let dev = unitarity_deviation(u);
        if dev > UNITARITY_TOL {
            return Err(QuantumError::NotUnitary(dev));
        }
    }
    let u = u1.kronecker(u2);
    Ok(TwoQubitState::symmetrized(u * state.rho * u.adjoint()))
}

/// Phase-flip channel with probability `q` on one arm (`arm` 0 or 1).
pub fn apply_dephasing(state: &TwoQubitState, arm: usize, q: f64) -> Result<TwoQubitState, QuantumError> {
    if !(0.0..=1.0).contains(&q) || arm > 1 {
        return Err(QuantumError::InvalidArgument(format!("dephasing q = {q} on arm {arm}")));
    }
    let z = Jones::new(c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0));
    let id = Jones::identity();
    let flip = if arm == 0 { z.kronecker(&id) } else { id.kronecker(&z) };
    let rho = state.rho * c(1.0 - q, 0.0) + flip * state.rho * flip * c(q, 0.0);
    Ok(TwoQubitState::symmetrized(rho))
}

/// Real rotation of linear polarization by `angle`: `H → cos|H⟩ + sin|V⟩`.
pub fn rotation(angle_rad: f64) -> Jones {
    let (s, co) = angle_rad.sin_cos();
    Jones::new(c(co, 0.0), c(-s, 0.0), c(s, 0.0), c(co, 0.0))
}

/// Linear retarder with fast axis at `fast_axis_rad` from horizontal.
pub fn retarder(fast_axis_rad: f64, retardance_rad: f64) -> Jones {
    let diag = Jones::new(c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), C64::from_polar(1.0, retardance_rad));
    rotation(fast_axis_rad) * diag * rotation(-fast_axis_rad)
}

pub fn quarter_wave_plate(fast_axis_rad: f64) -> Jones {
    retarder(fast_axis_rad, FRAC_PI_2)
}

pub fn half_wave_plate(fast_axis_rad: f64) -> Jones {
    retarder(fast_axis_rad, PI)
}

/// Fast-axis angles of the QWP–HWP–QWP compensator, light passing `qwp1`
/// first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveplateSetting {
    pub qwp1_rad: f64,
    pub hwp_rad: f64,
    pub qwp2_rad: f64,
}

impl WaveplateSetting {
    fn wrapped(self) -> Self {
        let w = |a: f64| a.rem_euclid(PI);
        WaveplateSetting {
            qwp1_rad: w(self.qwp1_rad),
            hwp_rad: w(self.hwp_rad),
            qwp2_rad: w(self.qwp2_rad),
        }
    }
}

/// `QWP(q2)·HWP(h)·QWP(q1)`.
pub fn waveplate_unitary(setting: &WaveplateSetting) -> Jones {
    quarter_wave_plate(setting.qwp2_rad) * half_wave_plate(setting.hwp_rad) * quarter_wave_plate(setting.qwp1_rad)
}

/// Frobenius distance between two unitaries after optimising the global
/// phase: `min_φ ‖A − e^{iφ}B‖ = sqrt(4 − 2|tr(A†B)|)`.
pub fn phase_distance(a: &Jones, b: &Jones) -> f64 {
    let overlap = (a.adjoint() * b).trace().norm();
    (4.0 - 2.0 * overlap).max(0.0).sqrt()
}

/// Waveplate setting that undoes `channel` up to a global phase.
///
/// Multi-start Levenberg–Marquardt over the three fast-axis angles; the
/// residual is the phase-aligned difference between the compensated operator
/// and the identity.
pub fn solve_compensation(channel: &Jones) -> Result<WaveplateSetting, QuantumError> {
    let dev = unitarity_deviation(channel);
    if dev > UNITARITY_TOL * 1e3 {
        return Err(QuantumError::NotUnitary(dev));
    }
    let residuals = |x: &Vector3<f64>| -> nalgebra::SVector<f64, 8> {
        let w = waveplate_unitary(&WaveplateSetting {
            qwp1_rad: x[0],
            hwp_rad: x[1],
            qwp2_rad: x[2],
        });
        let m = w * channel;
        let tr = m.trace();
        let phase = if tr.norm() > 1e-300 { tr.conj() / tr.norm() } else { c(1.0, 0.0) };
        let d = m * phase - Jones::identity();
        nalgebra::SVector::<f64, 8>::from_iterator(d.iter().flat_map(|z| [z.re, z.im]))
    };
    let distance = |x: &Vector3<f64>| {
        let w = waveplate_unitary(&WaveplateSetting {
            qwp1_rad: x[0],
            hwp_rad: x[1],
            qwp2_rad: x[2],
        });
        phase_distance(&(w * channel), &Jones::identity())
    };

    let starts = [0.0, PI / 3.0, 2.0 * PI / 3.0];
    let hwp_starts = [0.0, FRAC_PI_8, FRAC_PI_4, 3.0 * FRAC_PI_8, FRAC_PI_2, 3.0 * FRAC_PI_4];
    let mut best = (f64::INFINITY, Vector3::zeros());
    let mut iterations = 0;
    for &q1 in &starts {
        for &h in &hwp_starts {
            for &q2 in &starts {
                let mut x = Vector3::new(q1, h, q2);
                let mut lambda = 1e-3;
                let mut r = residuals(&x);
                for _ in 0..COMPENSATION_MAX_ITERATIONS {
                    iterations += 1;
                    if r.norm() < 1e-13 {
                        break;
                    }
                    let step = 1e-7;
                    let mut jac = nalgebra::SMatrix::<f64, 8, 3>::zeros();
                    for k in 0..3 {
                        let mut xp = x;
                        let mut xm = x;
                        xp[k] += step;
                        xm[k] -= step;
                        jac.set_column(k, &((residuals(&xp) - residuals(&xm)) / (2.0 * step)));
                    }
                    let jtj = jac.transpose() * jac;
                    let g = jac.transpose() * r;
                    let damped: Matrix3<f64> = jtj + Matrix3::from_diagonal(&jtj.diagonal()) * lambda;
                    let Some(inv) = damped.try_inverse() else {
                        lambda *= 10.0;
                        continue;
                    };
                    let candidate = x - inv * g;
                    let rc = residuals(&candidate);
                    if rc.norm() < r.norm() {
                        x = candidate;
                        r = rc;
                        lambda = (lambda * 0.3).max(1e-12);
                    } else {
                        lambda *= 10.0;
                        if lambda > 1e12 {
                            break;
                        }
                    }
                }
                let d = distance(&x);
                if d < best.0 {
                    best = (d, x);
                }
                if best.0 <= COMPENSATION_TOL * 1e-3 {
                    return Ok(setting_from(&best.1));
                }
            }
        }
    }
    if best.0 <= COMPENSATION_TOL {
        Ok(setting_from(&best.1))
    } else {
        Err(QuantumError::NoConvergence {
            residual: best.0,
            iterations,
        })
    }
}

fn setting_from(x: &Vector3<f64>) -> WaveplateSetting {
    WaveplateSetting {
        qwp1_rad: x[0],
        hwp_rad: x[1],
        qwp2_rad: x[2],
    }
    .wrapped()
}

/// Residual linear rotation whose single-arm extinction equals `contrast:1`
/// (`tan²ε = 1/contrast`).
pub fn residual_from_contrast(contrast: f64) -> f64 {
    (1.0 / contrast.sqrt()).atan()
}

/// Phase-flip probability giving the same `contrast:1` as a dephasing-like
/// residual: coherence `1 − 2q = (C−1)/(C+1)`.
pub fn dephasing_from_contrast(contrast: f64) -> f64 {
    1.0 / (contrast + 1.0)
}

/// How the imperfect polarization compensation degrades the state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualModel {
    /// Compensation treated as perfect.
    #[default]
    None,
    /// A linear rotation of [`residual_from_contrast`] on each arm.
    Rotation,
    /// A phase flip of [`dephasing_from_contrast`] on each arm.
    Dephasing,
}

pub fn apply_residual(state: &TwoQubitState, model: ResidualModel, contrast: f64) -> Result<TwoQubitState, QuantumError> {
    if !(contrast > 1.0) {
        return Err(QuantumError::InvalidArgument(format!("contrast {contrast} must exceed 1")));
    }
    match model {
        ResidualModel::None => Ok(state.clone()),
        ResidualModel::Rotation => {
            let r = rotation(residual_from_contrast(contrast));
            apply_local_unitaries(state, &r, &r)
        }
        ResidualModel::Dephasing => {
            let q = dephasing_from_contrast(contrast);
            apply_dephasing(&apply_dephasing(state, 0, q)?, 1, q)
        }
    }
}

/// Orientation convention of an analyzer frame relative to the source frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Handedness {
    #[default]
    Direct,
    Mirrored,
}

impl Handedness {
    pub fn sign(self) -> f64 {
        match self {
            Handedness::Direct => 1.0,
            Handedness::Mirrored => -1.0,
        }
    }
}

/// Polarization analyzer: outcome `+` projects on `cosθ|H⟩ + sinθ|V⟩`,
/// outcome `−` on the orthogonal state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSetting {
    pub angle_rad: f64,
    pub handedness: Handedness,
}

impl AnalyzerSetting {
    pub fn new(angle_rad: f64) -> Self {
        AnalyzerSetting {
            angle_rad,
            handedness: Handedness::Direct,
        }
    }

    pub fn with_handedness(angle_rad: f64, handedness: Handedness) -> Self {
        AnalyzerSetting { angle_rad, handedness }
    }

    /// Setting whose `+` outcome projects on the physical angle `phi`.
    pub fn for_physical_angle(phi: f64, handedness: Handedness) -> Self {
        AnalyzerSetting {
            angle_rad: (handedness.sign() * phi).rem_euclid(PI),
            handedness,
        }
    }

    pub fn physical_angle(&self) -> f64 {
        self.handedness.sign() * self.angle_rad
    }

    fn kets(&self) -> [Vector2<C64>; 2] {
        let (s, co) = self.physical_angle().sin_cos();
        [Vector2::new(c(co, 0.0), c(s, 0.0)), Vector2::new(c(-s, 0.0), c(co, 0.0))]
    }
}

/// Joint outcome probabilities of two analyzers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProbabilities {
    pub pp: f64,
    pub pm: f64,
    pub mp: f64,
    pub mm: f64,
}

impl OutcomeProbabilities {
    /// `P++ + P−− − P+− − P−+`.
    pub fn correlation(&self) -> f64 {
        self.pp + self.mm - self.pm - self.mp
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.pp, self.pm, self.mp, self.mm]
    }

    pub fn first_plus(&self) -> f64 {
        self.pp + self.pm
    }

    pub fn second_plus(&self) -> f64 {
        self.pp + self.mp
    }

    pub fn total(&self) -> f64 {
        self.pp + self.pm + self.mp + self.mm
    }
}

pub fn measurement_probabilities(state: &TwoQubitState, a: &AnalyzerSetting, b: &AnalyzerSetting) -> OutcomeProbabilities {
    let ka = a.kets();
    let kb = b.kets();
    let p = |i: usize, j: usize| {
        let v = ka[i].kronecker(&kb[j]);
        (v.adjoint() * state.rho * v)[(0, 0)].re.clamp(0.0, 1.0)
    };
    OutcomeProbabilities {
        pp: p(0, 0),
        pm: p(0, 1),
        mp: p(1, 0),
        mm: p(1, 1),
    }
}

/// `|E(a,b) − E(a,b′) + E(a′,b) + E(a′,b′)|` from exact probabilities.
pub fn chsh_value(state: &TwoQubitState, first: [AnalyzerSetting; 2], second: [AnalyzerSetting; 2]) -> f64 {
    let e = |a: &AnalyzerSetting, b: &AnalyzerSetting| measurement_probabilities(state, a, b).correlation();
    (e(&first[0], &second[0]) - e(&first[0], &second[1]) + e(&first[1], &second[0]) + e(&first[1], &second[1])).abs()
}

/// Picks the station-2 handedness that maximises the ideal CHSH value of the
/// target state for the given nominal angles.
pub fn calibrate_handedness(first_angles: [f64; 2], second_angles: [f64; 2]) -> Handedness {
    let target = TwoQubitState::target();
    let first = first_angles.map(AnalyzerSetting::new);
    let score = |h: Handedness| chsh_value(&target, first, second_angles.map(|a| AnalyzerSetting::with_handedness(a, h)));
    let (direct, mirrored) = (score(Handedness::Direct), score(Handedness::Mirrored));
    let chosen = if mirrored > direct {
        Handedness::Mirrored
    } else {
        Handedness::Direct
    };
    log::info!("analyzer handedness calibration: direct S = {direct:.6}, mirrored S = {mirrored:.6}; using {chosen:?}");
    chosen
}

/// Source brightness and quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceParams {
    pub pair_rate_hz: f64,
    pub target_fidelity: f64,
    pub onboard_sampling_fraction_per_arm: f64,
    #[serde(default)]
    pub noise_model: NoiseModel,
}

impl SourceParams {
    pub fn validate(&self) -> Result<(), QuantumError> {
        if !(self.pair_rate_hz > 0.0 && self.pair_rate_hz.is_finite()) {
            return Err(QuantumError::InvalidArgument(format!("pair_rate_hz = {}", self.pair_rate_hz)));
        }
        if !(0.25..=1.0).contains(&self.target_fidelity) {
            return Err(QuantumError::FidelityOutOfRange(self.target_fidelity));
        }
        let f = self.onboard_sampling_fraction_per_arm;
        if !(f > 0.0 && f <= 1.0) {
            return Err(QuantumError::InvalidArgument(format!("onboard_sampling_fraction_per_arm = {f}")));
        }
        Ok(())
    }

    pub fn state(&self) -> Result<TwoQubitState, QuantumError> {
        make_noisy(self.noise_model, self.target_fidelity)
    }
}

/// Coincidence rate of the on-board monitor that taps a fraction of each arm.
pub fn onboard_sampling_rate(source: &SourceParams) -> f64 {
    source.pair_rate_hz * source.onboard_sampling_fraction_per_arm.powi(2)
}

/// Haar-random single-qubit unitary.
pub fn haar_unitary<R: Rng + ?Sized>(rng: &mut R) -> Jones {
    let mut q: [f64; 4] = [0.0; 4];
    for x in q.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let a = c(q[0] / n, q[1] / n);
    let b = c(q[2] / n, q[3] / n);
    let phase = C64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI));
    Jones::new(a, -b.conj(), b, a.conj()) * phase
}

/// Random mixed state from the Ginibre ensemble (`GG†/tr`).
pub fn random_state<R: Rng + ?Sized>(rng: &mut R) -> TwoQubitState {
    let g = Matrix4::from_fn(|_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let rho = g * g.adjoint();
    let tr = rho.trace();
    TwoQubitState::symmetrized(rho / tr)
}
