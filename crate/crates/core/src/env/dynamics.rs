//! Planar floating-base dynamics of the two-legged walker.
//!
//! Generalised coordinates are `[x, z, pitch, hip_f, knee_f, hip_h, knee_h]`.
//! Each body is a point mass plus rotational inertia; the equations of motion
//! are assembled from body Jacobians,
//!
//! ```text
//! M(q) q̈ = τ + Σ Jᵀ m g + Σ J_footᵀ F_contact − Σ m Jᵀ (J̇ q̇)
//! ```
//!
//! and integrated with semi-implicit Euler. In the plane every angular
//! Jacobian is constant, so the velocity-product term only collects the
//! centripetal accelerations `−ω² r` of each rotating segment.

use serde::{Deserialize, Serialize};

use super::terrain::Terrain;

pub const NDOF: usize = 7;
pub const NJ: usize = 4;

pub type Vec7 = [f64; NDOF];
type Mat7 = [[f64; NDOF]; NDOF];

/// Link geometry and inertia.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyParams {
    pub torso_mass: f64,
    pub torso_length: f64,
    pub torso_height: f64,
    /// Horizontal distance from torso centre to each hip (m).
    pub hip_offset: f64,
    pub thigh_mass: f64,
    pub thigh_length: f64,
    pub shank_mass: f64,
    pub shank_length: f64,
}

impl Default for BodyParams {
    fn default() -> Self {
        Self {
            torso_mass: 1.6,
            torso_length: 0.4,
            torso_height: 0.08,
            hip_offset: 0.15,
            thigh_mass: 0.4,
            thigh_length: 0.16,
            shank_mass: 0.3,
            shank_length: 0.16,
        }
    }
}

impl BodyParams {
    pub fn total_mass(&self) -> f64 {
        self.torso_mass + 2.0 * (self.thigh_mass + self.shank_mass)
    }

    fn torso_inertia(&self) -> f64 {
        self.torso_mass * (self.torso_length.powi(2) + self.torso_height.powi(2)) / 12.0
    }

    fn rod_inertia(m: f64, l: f64) -> f64 {
        m * l * l / 12.0
    }

    /// Vertical hip-to-foot distance for joint angles `(hip, knee)` with the
    /// torso level.
    pub fn leg_height(&self, hip: f64, knee: f64) -> f64 {
        self.thigh_length * hip.cos() + self.shank_length * (hip + knee).cos()
    }
}

/// Spring-damper ground contact parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactParams {
    pub normal_stiffness: f64,
    pub normal_damping: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            normal_stiffness: 1.0e4,
            normal_damping: 100.0,
            tangential_stiffness: 5.0e3,
            tangential_damping: 50.0,
        }
    }
}

#[inline]
fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

#[inline]
fn dir(angle: f64) -> [f64; 2] {
    [angle.sin(), -angle.cos()]
}

/// A point on the mechanism: position, linear Jacobian and the
/// velocity-product acceleration `J̇ q̇`.
#[derive(Debug, Clone, Copy)]
pub struct PointKin {
    pub pos: [f64; 2],
    pub jac: [[f64; NDOF]; 2],
    pub bias: [f64; 2],
}

impl PointKin {
    pub fn velocity(&self, qd: &Vec7) -> [f64; 2] {
        let mut v = [0.0; 2];
        for r in 0..2 {
            for c in 0..NDOF {
                v[r] += self.jac[r][c] * qd[c];
            }
        }
        v
    }
}

struct BodyKin {
    mass: f64,
    inertia: f64,
    point: PointKin,
    /// Angular Jacobian (0/1 entries).
    ang: Vec7,
}

/// Kinematics of one configuration.
pub struct Kinematics {
    bodies: Vec<BodyKin>,
    /// Feet: index 0 front, 1 hind.
    pub feet: [PointKin; 2],
    pub knees: [[f64; 2]; 2],
    pub hips: [[f64; 2]; 2],
}

pub fn kinematics(body: &BodyParams, q: &Vec7, qd: &Vec7) -> Kinematics {
    let base = [q[0], q[1]];
    let (th, thd) = (q[2], qd[2]);
    let (s, c) = th.sin_cos();

    let mut torso_jac = [[0.0; NDOF]; 2];
    torso_jac[0][0] = 1.0;
    torso_jac[1][1] = 1.0;
    let mut torso_ang = [0.0; NDOF];
    torso_ang[2] = 1.0;
    let mut bodies = vec![BodyKin {
        mass: body.torso_mass,
        inertia: body.torso_inertia(),
        point: PointKin {
            pos: base,
            jac: torso_jac,
            bias: [0.0; 2],
        },
        ang: torso_ang,
    }];

    let mut feet = [PointKin {
        pos: [0.0; 2],
        jac: [[0.0; NDOF]; 2],
        bias: [0.0; 2],
    }; 2];
    let mut knees = [[0.0; 2]; 2];
    let mut hips = [[0.0; 2]; 2];

    for (leg, hx) in [body.hip_offset, -body.hip_offset].into_iter().enumerate() {
        let hi = 3 + 2 * leg;
        let ki = hi + 1;
        let rh = [hx * c, hx * s];
        let phi1 = th + q[hi];
        let phi2 = phi1 + q[ki];
        let w1 = thd + qd[hi];
        let w2 = w1 + qd[ki];
        let v1 = {
            let d = dir(phi1);
            [body.thigh_length * d[0], body.thigh_length * d[1]]
        };
        let v2 = {
            let d = dir(phi2);
            [body.shank_length * d[0], body.shank_length * d[1]]
        };
        let (prh, pv1, pv2) = (perp(rh), perp(v1), perp(v2));
        let hip = [base[0] + rh[0], base[1] + rh[1]];
        let knee = [hip[0] + v1[0], hip[1] + v1[1]];
        hips[leg] = hip;
        knees[leg] = knee;

        // point at fractions (a of thigh, b of shank) along the leg
        let point = |a: f64, b: f64| -> PointKin {
            let mut jac = [[0.0; NDOF]; 2];
            for r in 0..2 {
                jac[r][r] = 1.0;
                jac[r][2] = prh[r] + a * pv1[r] + b * pv2[r];
                jac[r][hi] = a * pv1[r] + b * pv2[r];
                jac[r][ki] = b * pv2[r];
            }
            let bias = [
                -thd * thd * rh[0] - w1 * w1 * a * v1[0] - w2 * w2 * b * v2[0],
                -thd * thd * rh[1] - w1 * w1 * a * v1[1] - w2 * w2 * b * v2[1],
            ];
            PointKin {
                pos: [
                    hip[0] + a * v1[0] + b * v2[0],
                    hip[1] + a * v1[1] + b * v2[1],
                ],
                jac,
                bias,
            }
        };

        let mut thigh_ang = [0.0; NDOF];
        thigh_ang[2] = 1.0;
        thigh_ang[hi] = 1.0;
        let mut shank_ang = thigh_ang;
        shank_ang[ki] = 1.0;
        bodies.push(BodyKin {
            mass: body.thigh_mass,
            inertia: BodyParams::rod_inertia(body.thigh_mass, body.thigh_length),
            point: point(0.5, 0.0),
            ang: thigh_ang,
        });
        bodies.push(BodyKin {
            mass: body.shank_mass,
            inertia: BodyParams::rod_inertia(body.shank_mass, body.shank_length),
            point: point(1.0, 0.5),
            ang: shank_ang,
        });
        feet[leg] = point(1.0, 1.0);
    }

    Kinematics {
        bodies,
        feet,
        knees,
        hips,
    }
}

impl Kinematics {
    pub fn mass_matrix(&self) -> Mat7 {
        let mut m = [[0.0; NDOF]; NDOF];
        for b in &self.bodies {
            for i in 0..NDOF {
                for j in i..NDOF {
                    let lin = b.point.jac[0][i] * b.point.jac[0][j]
                        + b.point.jac[1][i] * b.point.jac[1][j];
                    let v = b.mass * lin + b.inertia * b.ang[i] * b.ang[j];
                    m[i][j] += v;
                }
            }
        }
        for i in 0..NDOF {
            for j in 0..i {
                m[i][j] = m[j][i];
            }
        }
        m
    }

    /// Generalised gravity force minus velocity-product terms.
    pub fn passive_force(&self, gravity: f64) -> Vec7 {
        let mut f = [0.0; NDOF];
        for b in &self.bodies {
            let acc = [-b.point.bias[0], gravity - b.point.bias[1]];
            for c in 0..NDOF {
                f[c] += b.mass * (b.point.jac[0][c] * acc[0] + b.point.jac[1][c] * acc[1]);
            }
        }
        f
    }

    /// Kinetic plus potential energy (potential zero at z = 0).
    pub fn energy(&self, qd: &Vec7, gravity: f64) -> f64 {
        let m = self.mass_matrix();
        let mut ke = 0.0;
        for i in 0..NDOF {
            for j in 0..NDOF {
                ke += 0.5 * qd[i] * m[i][j] * qd[j];
            }
        }
        let pe: f64 = self
            .bodies
            .iter()
            .map(|b| -b.mass * gravity * b.point.pos[1])
            .sum();
        ke + pe
    }

    /// Torso rectangle corners in world coordinates.
    pub fn torso_corners(&self, body: &BodyParams, pitch: f64) -> [[f64; 2]; 4] {
        let base = self.bodies[0].point.pos;
        let (s, c) = pitch.sin_cos();
        let (hl, hh) = (0.5 * body.torso_length, 0.5 * body.torso_height);
        let mut out = [[0.0; 2]; 4];
        for (k, (a, b)) in [(hl, hh), (hl, -hh), (-hl, hh), (-hl, -hh)].into_iter().enumerate() {
            out[k] = [base[0] + a * c - b * s, base[1] + a * s + b * c];
        }
        out
    }
}

/// Cholesky factor of a symmetric positive definite 7x7 matrix.
pub struct Cholesky {
    l: Mat7,
}

impl Cholesky {
    pub fn factor(m: &Mat7) -> Option<Self> {
        let mut l = [[0.0; NDOF]; NDOF];
        for i in 0..NDOF {
            for j in 0..=i {
                let mut sum = m[i][j];
                for k in 0..j {
                    sum -= l[i][k] * l[j][k];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return None;
                    }
                    l[i][i] = sum.sqrt();
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
        Some(Self { l })
    }

    pub fn solve(&self, b: &Vec7) -> Vec7 {
        let l = &self.l;
        let mut y = [0.0; NDOF];
        for i in 0..NDOF {
            let mut sum = b[i];
            for k in 0..i {
                sum -= l[i][k] * y[k];
            }
            y[i] = sum / l[i][i];
        }
        let mut x = [0.0; NDOF];
        for i in (0..NDOF).rev() {
            let mut sum = y[i];
            for k in i + 1..NDOF {
                sum -= l[k][i] * x[k];
            }
            x[i] = sum / l[i][i];
        }
        x
    }
}

/// Solve `M x = b` for symmetric positive definite `M`.
pub fn solve_spd(m: &Mat7, b: &Vec7) -> Option<Vec7> {
    Cholesky::factor(m).map(|c| c.solve(b))
}

/// Force on one foot after the contact solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactForce {
    /// World-frame force on the foot.
    pub force: [f64; 2],
    /// Force along the terrain normal (never negative).
    pub normal: f64,
    /// Signed force along the terrain tangent.
    pub tangential: f64,
    /// Stick anchor; `None` when the foot is not touching.
    pub anchor: Option<[f64; 2]>,
}

impl ContactForce {
    const NONE: ContactForce = ContactForce {
        force: [0.0; 2],
        normal: 0.0,
        tangential: 0.0,
        anchor: None,
    };
}

struct ContactRow {
    foot: usize,
    jac: Vec7,
    /// Spring extension (negative when compressed).
    gap: f64,
    stiffness: f64,
    damping: f64,
}

fn solve_small(a: &mut [[f64; 4]; 4], b: &mut [f64; 4], n: usize) -> bool {
    // Gaussian elimination with partial pivoting on the leading n x n block.
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-300 {
            return false;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in r + 1..n {
            s -= a[r][c] * b[c];
        }
        b[r] = s / a[r][r];
    }
    true
}

/// Penalty contact forces for both feet.
///
/// Each touching foot gets a spring-damper along the terrain normal and an
/// anchored spring-damper along the tangent. Forces are evaluated at the
/// end-of-substep velocity `v' = v_free + dt J M⁻¹ Jᵀ F` (linearly implicit),
/// coupling both feet through the body's inverse inertia. A foot whose
/// normal force would pull is released and the rest re-solved; tangential
/// forces are then clamped to the Coulomb cone and the anchor slides so the
/// spring matches the clamp.
#[allow(clippy::too_many_arguments)]
pub fn contact_forces(
    kin: &Kinematics,
    chol: &Cholesky,
    free_force: &Vec7,
    qd: &Vec7,
    dt: f64,
    terrain: &Terrain,
    params: &ContactParams,
    mu: f64,
    anchors: &[Option<[f64; 2]>; 2],
) -> [ContactForce; 2] {
    let mut out = [ContactForce::NONE; 2];
    let mut frames = [([0.0; 2], [0.0; 2], [0.0; 2]); 2];
    let mut touching = [false; 2];
    for leg in 0..2 {
        let pos = kin.feet[leg].pos;
        let slope = terrain.slope(pos[0]);
        let inv = 1.0 / (1.0 + slope * slope).sqrt();
        let depth = (terrain.height(pos[0]) - pos[1]) * inv;
        if depth > 0.0 {
            touching[leg] = true;
            let anchor = anchors[leg].unwrap_or(pos);
            frames[leg] = ([-slope * inv, inv], [inv, slope * inv], anchor);
        }
    }

    let mut qd_free = [0.0; NDOF];
    let acc_free = chol.solve(free_force);
    for k in 0..NDOF {
        qd_free[k] = qd[k] + dt * acc_free[k];
    }

    let mut active = touching;
    let mut forces = [[0.0f64; 2]; 2];
    for _attempt in 0..3 {
        let mut rows: Vec<ContactRow> = Vec::with_capacity(4);
        for leg in 0..2 {
            if !active[leg] {
                continue;
            }
            let (n, t, anchor) = frames[leg];
            let pos = kin.feet[leg].pos;
            let inv = n[1];
            let depth = (terrain.height(pos[0]) - pos[1]) * inv;
            let slip = (pos[0] - anchor[0]) * t[0] + (pos[1] - anchor[1]) * t[1];
            for (dirv, gap, k, d) in [
                (n, -depth, params.normal_stiffness, params.normal_damping),
                (t, slip, params.tangential_stiffness, params.tangential_damping),
            ] {
                let mut jac = [0.0; NDOF];
                for c in 0..NDOF {
                    jac[c] = dirv[0] * kin.feet[leg].jac[0][c] + dirv[1] * kin.feet[leg].jac[1][c];
                }
                rows.push(ContactRow {
                    foot: leg,
                    jac,
                    gap,
                    stiffness: k,
                    damping: d,
                });
            }
        }
        let n = rows.len();
        if n == 0 {
            break;
        }
        let minv_jt: Vec<Vec7> = rows.iter().map(|r| chol.solve(&r.jac)).collect();
        let mut a = [[0.0; 4]; 4];
        let mut b = [0.0; 4];
        for i in 0..n {
            let gain = rows[i].stiffness * dt + rows[i].damping;
            let v_free: f64 = (0..NDOF).map(|c| rows[i].jac[c] * qd_free[c]).sum();
            for j in 0..n {
                let aij: f64 = (0..NDOF).map(|c| rows[i].jac[c] * minv_jt[j][c]).sum();
                a[i][j] = gain * dt * aij;
            }
            a[i][i] += 1.0;
            b[i] = -rows[i].stiffness * rows[i].gap - gain * v_free;
        }
        if !solve_small(&mut a, &mut b, n) {
            break;
        }
        forces = [[0.0; 2]; 2];
        let mut released = false;
        for (i, pair) in rows.chunks(2).enumerate() {
            let leg = pair[0].foot;
            let (fn_, ft) = (b[2 * i], b[2 * i + 1]);
            if fn_ < 0.0 {
                active[leg] = false;
                released = true;
            }
            forces[leg] = [fn_, ft];
        }
        if !released {
            break;
        }
    }

    for leg in 0..2 {
        if !touching[leg] {
            continue;
        }
        let (n, t, anchor) = frames[leg];
        let pos = kin.feet[leg].pos;
        if !active[leg] {
            // touching but separating: no force, keep the anchor
            out[leg] = ContactForce {
                anchor: Some(anchor),
                ..ContactForce::NONE
            };
            continue;
        }
        let fn_ = forces[leg][0].max(0.0);
        let mut ft = forces[leg][1];
        let mut new_anchor = anchor;
        let limit = mu * fn_;
        if ft.abs() > limit {
            ft = limit * ft.signum();
            let s = -ft / params.tangential_stiffness;
            new_anchor = [pos[0] - s * t[0], pos[1] - s * t[1]];
        }
        out[leg] = ContactForce {
            force: [fn_ * n[0] + ft * t[0], fn_ * n[1] + ft * t[1]],
            normal: fn_,
            tangential: ft,
            anchor: Some(new_anchor),
        };
    }
    out
}
