//! Skeletons, motion clips, the 6D rotation codec, forward kinematics and
//! yaw canonicalization.
//!
//! Conventions: +Y is up, lengths are meters, coordinates are right-handed
//! and a character with zero yaw faces +Z.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Rot = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
/// `[frame][joint]` positions.
pub type Positions = Vec<Vec<Vec3>>;

const ORTHO_TOL: f64 = 1e-6;

/// Fixed joint tree in depth-first order (`parent[j] < j`).
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    parents: Vec<Option<usize>>,
    names: Vec<String>,
}

impl Topology {
    pub fn new(parents: Vec<Option<usize>>, names: Vec<String>) -> Result<Self> {
        if parents.is_empty() {
            return Err(Error::Topology("empty joint list".into()));
        }
        if parents.len() != names.len() {
            return Err(Error::Topology(format!(
                "{} parents but {} names",
                parents.len(),
                names.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::Topology("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => return Err(Error::Topology(format!("second root at joint {j}"))),
                Some(p) if *p >= j => {
                    return Err(Error::Topology(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { parents, names })
    }

    /// Builds from `-1`-rooted parent indices.
    pub fn from_parent_indices(parents: &[i64], names: &[&str]) -> Result<Self> {
        let parents = parents
            .iter()
            .map(|&p| usize::try_from(p).ok())
            .collect();
        Self::new(parents, names.iter().map(|s| s.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(j))
            .map(|(c, _)| c)
    }

    /// Same parent structure (names may differ).
    pub fn same_structure(&self, other: &Topology) -> bool {
        self.parents == other.parents
    }
}

/// Topology plus T-pose offsets; `offsets[0]` is the rest-pose root position.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    topology: Topology,
    offsets: Vec<Vec3>,
    height: f64,
}

impl Skeleton {
    pub fn new(topology: Topology, offsets: Vec<Vec3>) -> Result<Self> {
        if offsets.len() != topology.len() {
            return Err(Error::Topology(format!(
                "{} offsets for {} joints",
                offsets.len(),
                topology.len()
            )));
        }
        for (j, o) in offsets.iter().enumerate().skip(1) {
            if !(o.norm() > 0.0) || !o.iter().all(|v| v.is_finite()) {
                return Err(Error::Topology(format!(
                    "joint {j} (`{}`) has a zero-length or non-finite bone",
                    topology.name(j)
                )));
            }
        }
        let rest = rest_positions(&topology, &offsets);
        let (lo, hi) = rest
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.y), hi.max(p.y))
            });
        let height = hi - lo;
        if !(height > 0.0) {
            return Err(Error::Topology("skeleton has zero vertical extent".into()));
        }
        Ok(Self {
            topology,
            offsets,
            height,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn joints(&self) -> usize {
        self.topology.len()
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    pub fn offset(&self, j: usize) -> Vec3 {
        self.offsets[j]
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn bone_length(&self, j: usize) -> f64 {
        self.offsets[j].norm()
    }

    /// Joint positions under identity rotations.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        rest_positions(&self.topology, &self.offsets)
    }

    /// Every offset (root included) multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(
            self.topology.clone(),
            self.offsets.iter().map(|o| o * s).collect(),
        )
    }

    pub fn check_compatible(&self, clip: &MotionClip) -> Result<()> {
        if clip.joints() != self.joints() {
            return Err(Error::Topology(format!(
                "clip has {} joints, skeleton has {}",
                clip.joints(),
                self.joints()
            )));
        }
        Ok(())
    }
}

fn rest_positions(topology: &Topology, offsets: &[Vec3]) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = Vec::with_capacity(offsets.len());
    for (j, o) in offsets.iter().enumerate() {
        let p = match topology.parent(j) {
            Some(p) => out[p] + o,
            None => *o,
        };
        out.push(p);
    }
    out
}

/// Root trajectory plus parent-relative joint rotations at a fixed rate.
/// `local_rot[t][0]` is the world rotation of the root.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    fps: f64,
    root_pos: Vec<Vec3>,
    local_rot: Vec<Vec<Rot>>,
}

pub fn is_rotation(r: &Rot, tol: f64) -> bool {
    let err = (r.transpose() * r - Rot::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol && r.iter().all(|v| v.is_finite())
}

impl MotionClip {
    pub fn new(fps: f64, root_pos: Vec<Vec3>, local_rot: Vec<Vec<Rot>>) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if root_pos.len() < 2 {
            return Err(Error::invalid("a clip needs at least 2 frames"));
        }
        if root_pos.len() != local_rot.len() {
            return Err(Error::invalid(format!(
                "{} root positions but {} rotation frames",
                root_pos.len(),
                local_rot.len()
            )));
        }
        let joints = local_rot[0].len();
        if joints == 0 {
            return Err(Error::invalid("a clip needs at least one joint"));
        }
        for (t, frame) in local_rot.iter().enumerate() {
            if frame.len() != joints {
                return Err(Error::invalid(format!(
                    "frame {t} has {} joints, expected {joints}",
                    frame.len()
                )));
            }
            if let Some(j) = frame.iter().position(|r| !is_rotation(r, ORTHO_TOL)) {
                return Err(Error::InvalidRotation(format!(
                    "frame {t}, joint {j} is not a proper rotation"
                )));
            }
        }
        if root_pos.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::non_finite("clip root trajectory"));
        }
        Ok(Self {
            fps,
            root_pos,
            local_rot,
        })
    }

    /// Static T-pose at the skeleton's rest root position.
    pub fn rest_pose(skel: &Skeleton, frames: usize, fps: f64) -> Result<Self> {
        Self::new(
            fps,
            vec![skel.offset(0); frames],
            vec![vec![Rot::identity(); skel.joints()]; frames],
        )
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.root_pos.len()
    }

    pub fn joints(&self) -> usize {
        self.local_rot[0].len()
    }

    pub fn root_pos(&self) -> &[Vec3] {
        &self.root_pos
    }

    pub fn root_rot(&self, t: usize) -> Rot {
        self.local_rot[t][0]
    }

    pub fn local_rot(&self) -> &[Vec<Rot>] {
        &self.local_rot
    }

    pub fn rotation(&self, t: usize, j: usize) -> Rot {
        self.local_rot[t][j]
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() {
            return Err(Error::invalid(format!(
                "window [{start}, {}) exceeds {} frames",
                start + len,
                self.frames()
            )));
        }
        Self::new(
            self.fps,
            self.root_pos[start..start + len].to_vec(),
            self.local_rot[start..start + len].to_vec(),
        )
    }

    pub fn translated(&self, delta: Vec3) -> Self {
        Self {
            fps: self.fps,
            root_pos: self.root_pos.iter().map(|p| p + delta).collect(),
            local_rot: self.local_rot.clone(),
        }
    }

    /// Applies a world-space yaw about the origin (root rotation and trajectory).
    pub fn yawed(&self, yaw: f64) -> Self {
        let ry = yaw_matrix(yaw);
        let mut local_rot = self.local_rot.clone();
        for frame in &mut local_rot {
            frame[0] = ry * frame[0];
        }
        Self {
            fps: self.fps,
            root_pos: self.root_pos.iter().map(|p| ry * p).collect(),
            local_rot,
        }
    }
}

/// Rotation about +Y.
pub fn yaw_matrix(yaw: f64) -> Rot {
    *Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).matrix()
}

pub fn axis_angle(axis: Vec3, angle: f64) -> Rot {
    *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}

/// Twist angle about +Y of a rotation (swing-twist decomposition), in (−π, π].
pub fn yaw_of(r: &Rot) -> f64 {
    let q = UnitQuaternion::from_matrix(r);
    let (w, y) = (q.w, q.j);
    if w.abs() < 1e-15 && y.abs() < 1e-15 {
        return 0.0;
    }
    wrap_angle(2.0 * y.atan2(w))
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// First two columns of `r`, concatenated.
pub fn rot6d_encode(r: &Rot) -> Result<[f64; 6]> {
    if !is_rotation(r, 1e-4) {
        return Err(Error::InvalidRotation(format!(
            "6D encode needs an orthonormal matrix with det +1, got {r}"
        )));
    }
    Ok([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
}

/// Gram–Schmidt reconstruction; always returns a proper rotation.
pub fn rot6d_decode(v: &[f64]) -> Result<Rot> {
    if v.len() != 6 {
        return Err(Error::InvalidRotation(format!("6D code has {} values", v.len())));
    }
    let a = Vec3::new(v[0], v[1], v[2]);
    let b = Vec3::new(v[3], v[4], v[5]);
    let na = a.norm();
    if !(na > 1e-8) {
        return Err(Error::InvalidRotation("first 6D column is degenerate".into()));
    }
    let b1 = a / na;
    let ortho = b - b1 * b1.dot(&b);
    let nb = ortho.norm();
    if !(nb > 1e-8 * b.norm().max(1.0)) {
        return Err(Error::InvalidRotation("6D columns are parallel".into()));
    }
    let b2 = ortho / nb;
    let b3 = b1.cross(&b2);
    Ok(Rot::from_columns(&[b1, b2, b3]))
}

/// [`rot6d_decode`] with the failure located at `(frame, joint)`.
pub fn rot6d_decode_at(v: &[f64], frame: usize, joint: usize) -> Result<Rot> {
    rot6d_decode(v).map_err(|_| Error::DegenerateRotation { frame, joint })
}

/// Geodesic angle between two rotations.
pub fn geodesic_angle(a: &Rot, b: &Rot) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Global joint positions and world rotations per frame.
pub fn forward_kinematics_full(skel: &Skeleton, clip: &MotionClip) -> Result<(Positions, Vec<Vec<Rot>>)> {
    skel.check_compatible(clip)?;
    let topo = skel.topology();
    let j_count = skel.joints();
    let mut positions = Vec::with_capacity(clip.frames());
    let mut globals = Vec::with_capacity(clip.frames());
    for t in 0..clip.frames() {
        let mut pos = Vec::with_capacity(j_count);
        let mut glob: Vec<Rot> = Vec::with_capacity(j_count);
        for j in 0..j_count {
            match topo.parent(j) {
                None => {
                    pos.push(clip.root_pos[t]);
                    glob.push(clip.local_rot[t][j]);
                }
                Some(p) => {
                    pos.push(pos[p] + glob[p] * skel.offset(j));
                    glob.push(glob[p] * clip.local_rot[t][j]);
                }
            }
        }
        positions.push(pos);
        globals.push(glob);
    }
    Ok((positions, globals))
}

pub fn forward_kinematics(skel: &Skeleton, clip: &MotionClip) -> Result<Positions> {
    Ok(forward_kinematics_full(skel, clip)?.0)
}

/// Removed per-frame root transform: yaw about +Y and the full root position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RootTransform {
    pub yaw: f64,
    /// `(x, height, z)` of the root.
    pub translation: Vec3,
}

impl RootTransform {
    pub const IDENTITY: RootTransform = RootTransform {
        yaw: 0.0,
        translation: Vec3::new(0.0, 0.0, 0.0),
    };

    pub fn height(&self) -> f64 {
        self.translation.y
    }

    pub fn planar(&self) -> (f64, f64) {
        (self.translation.x, self.translation.z)
    }

    pub fn apply(&self, local: &Vec3) -> Vec3 {
        yaw_matrix(self.yaw) * local + self.translation
    }

    pub fn remove(&self, global: &Vec3) -> Vec3 {
        yaw_matrix(-self.yaw) * (global - self.translation)
    }
}

/// Root-relative, yaw-free positions plus the removed transforms.
pub fn canonicalize(clip: &MotionClip, skel: &Skeleton) -> Result<(Positions, Vec<RootTransform>)> {
    let global = forward_kinematics(skel, clip)?;
    let transforms: Vec<RootTransform> = (0..clip.frames())
        .map(|t| RootTransform {
            yaw: yaw_of(&clip.root_rot(t)),
            translation: clip.root_pos[t],
        })
        .collect();
    let local = global
        .iter()
        .zip(&transforms)
        .map(|(frame, tr)| frame.iter().map(|p| tr.remove(p)).collect())
        .collect();
    Ok((local, transforms))
}

/// Inverse of [`canonicalize`].
pub fn uncanonicalize(local: &Positions, transforms: &[RootTransform]) -> Result<Positions> {
    if local.len() != transforms.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} root transforms",
            local.len(),
            transforms.len()
        )));
    }
    Ok(local
        .iter()
        .zip(transforms)
        .map(|(frame, tr)| frame.iter().map(|p| tr.apply(p)).collect())
        .collect())
}

/// Forward differences scaled by `fps`; the last frame repeats the previous velocity.
pub fn finite_velocity(pos: &Positions, fps: f64) -> Result<Positions> {
    let t_count = pos.len();
    if t_count < 2 {
        return Err(Error::invalid("velocity needs at least 2 frames"));
    }
    let mut out: Positions = (0..t_count - 1)
        .map(|t| {
            pos[t + 1]
                .iter()
                .zip(&pos[t])
                .map(|(a, b)| (a - b) * fps)
                .collect()
        })
        .collect();
    out.push(out[t_count - 2].clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_rotation(rng: &mut impl Rng) -> Rot {
        let q = nalgebra::Quaternion::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
    }

    fn chain(offsets: &[[f64; 3]]) -> Skeleton {
        let n = offsets.len();
        let parents = (0..n).map(|j| j.checked_sub(1)).collect();
        let names = (0..n).map(|j| format!("j{j}")).collect();
        Skeleton::new(
            Topology::new(parents, names).unwrap(),
            offsets.iter().map(|o| Vec3::new(o[0], o[1], o[2])).collect(),
        )
        .unwrap()
    }

    fn random_clip(skel: &Skeleton, frames: usize, rng: &mut impl Rng) -> MotionClip {
        let root = (0..frames)
            .map(|_| Vec3::new(rng.random::<f64>(), 1.0 + rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let rots = (0..frames)
            .map(|_| (0..skel.joints()).map(|_| random_rotation(rng)).collect())
            .collect();
        MotionClip::new(30.0, root, rots).unwrap()
    }

    #[test]
    fn topology_rejects_bad_orders() {
        assert!(Topology::from_parent_indices(&[-1, 0, 1], &["a", "b", "c"]).is_ok());
        assert!(Topology::from_parent_indices(&[-1, 2, 0], &["a", "b", "c"]).is_err());
        assert!(Topology::from_parent_indices(&[-1, -1], &["a", "b"]).is_err());
        assert!(Topology::from_parent_indices(&[0, 0], &["a", "b"]).is_err());
    }

    #[test]
    fn skeleton_rejects_zero_bones_and_reports_height() {
        let topo = Topology::from_parent_indices(&[-1, 0], &["a", "b"]).unwrap();
        assert!(Skeleton::new(topo.clone(), vec![Vec3::zeros(), Vec3::zeros()]).is_err());
        let s = Skeleton::new(topo, vec![Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.5, 0.0)]).unwrap();
        assert!((s.height() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rot6d_examples() {
        assert_eq!(rot6d_encode(&Rot::identity()).unwrap(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let rz = axis_angle(Vec3::z(), FRAC_PI_2);
        let code = rot6d_encode(&rz).unwrap();
        let want = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in code.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(rot6d_decode(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), Rot::identity());
        assert_eq!(rot6d_decode(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), Rot::identity());
        assert!(rot6d_encode(&(Rot::identity() * 1.01)).is_err());
    }

    #[test]
    fn rot6d_round_trip_over_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let back = rot6d_decode(&rot6d_encode(&r).unwrap()).unwrap();
            assert!((back - r).abs().max() < 1e-9);
        }
    }

    #[test]
    fn rot6d_decode_tolerates_noise() {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            let mut code = rot6d_encode(&r).unwrap();
            for c in code.iter_mut() {
                *c += 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
            let back = rot6d_decode(&code).unwrap();
            assert!(is_rotation(&back, 1e-9));
            assert!(geodesic_angle(&back, &r) < 0.05);
        }
    }

    #[test]
    fn rot6d_decode_rejects_degenerate_input() {
        assert!(rot6d_decode(&[0.0; 6]).is_err());
        assert!(rot6d_decode(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
        assert!(matches!(
            rot6d_decode_at(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0], 7, 3),
            Err(Error::DegenerateRotation { frame: 7, joint: 3 })
        ));
    }

    #[test]
    fn fk_rest_pose_is_cumulative_offsets() {
        let skel = chain(&[[0.0, 1.0, 0.0], [0.0, 0.5, 0.0], [0.3, 0.0, 0.0]]);
        let clip = MotionClip::new(
            30.0,
            vec![Vec3::zeros(); 2],
            vec![vec![Rot::identity(); 3]; 2],
        )
        .unwrap();
        let pos = forward_kinematics(&skel, &clip).unwrap();
        assert_eq!(pos[1][2], Vec3::new(0.3, 0.5, 0.0));
    }

    #[test]
    fn fk_single_bone_under_yaw() {
        let skel = chain(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let rz = axis_angle(Vec3::z(), FRAC_PI_2);
        let clip = MotionClip::new(
            30.0,
            vec![Vec3::zeros(); 2],
            vec![vec![rz, Rot::identity()]; 2],
        )
        .unwrap();
        let pos = forward_kinematics(&skel, &clip).unwrap();
        assert!((pos[0][1] - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn fk_translation_equivariance_and_bone_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let skel = chain(&[[0.0, 1.0, 0.0], [0.0, 0.4, 0.1], [0.2, 0.3, 0.0], [0.0, -0.2, 0.25]]);
        let clip = random_clip(&skel, 6, &mut rng);
        let a = forward_kinematics(&skel, &clip).unwrap();
        let b = forward_kinematics(&skel, &clip.translated(Vec3::new(5.0, 0.0, 0.0))).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            for (pa, pb) in fa.iter().zip(fb) {
                assert!((pb - pa - Vec3::new(5.0, 0.0, 0.0)).norm() < 1e-12);
            }
            for j in 1..skel.joints() {
                let p = skel.topology().parent(j).unwrap();
                assert!(((fa[j] - fa[p]).norm() - skel.bone_length(j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fk_rejects_topology_mismatch() {
        let skel = chain(&[[0.0, 1.0, 0.0], [0.0, 0.5, 0.0]]);
        let clip = MotionClip::new(30.0, vec![Vec3::zeros(); 2], vec![vec![Rot::identity(); 3]; 2]).unwrap();
        assert!(matches!(forward_kinematics(&skel, &clip), Err(Error::Topology(_))));
    }

    #[test]
    fn canonicalize_identity_case() {
        let skel = chain(&[[0.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.2, 0.0, 0.1]]);
        let clip = MotionClip::new(30.0, vec![Vec3::zeros(); 3], vec![vec![Rot::identity(); 3]; 3]).unwrap();
        let (local, tr) = canonicalize(&clip, &skel).unwrap();
        let global = forward_kinematics(&skel, &clip).unwrap();
        assert_eq!(local, global);
        assert!(tr.iter().all(|t| *t == RootTransform::IDENTITY));
    }

    #[test]
    fn canonicalize_removes_rigid_yaw_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let skel = chain(&[[0.0, 1.0, 0.0], [0.0, 0.4, 0.1], [0.2, 0.3, 0.0]]);
        // root rotations without yaw so the rigid transform is the only yaw source
        let mut clip = random_clip(&skel, 5, &mut rng);
        let frames: Vec<Vec<Rot>> = clip
            .local_rot()
            .iter()
            .map(|f| {
                let mut f = f.clone();
                f[0] = yaw_matrix(-yaw_of(&f[0])) * f[0];
                f
            })
            .collect();
        clip = MotionClip::new(30.0, clip.root_pos().to_vec(), frames).unwrap();
        let moved = clip.yawed(FRAC_PI_2).translated(Vec3::new(3.0, 0.0, 4.0));
        let (a, _) = canonicalize(&clip, &skel).unwrap();
        let (b, tr) = canonicalize(&moved, &skel).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            for (pa, pb) in fa.iter().zip(fb) {
                assert!((pa - pb).norm() < 1e-12);
            }
        }
        assert!(tr.iter().all(|t| (t.yaw - FRAC_PI_2).abs() < 1e-12));
        let global = forward_kinematics(&skel, &moved).unwrap();
        let back = uncanonicalize(&b, &tr).unwrap();
        for (fa, fb) in global.iter().zip(&back) {
            for (pa, pb) in fa.iter().zip(fb) {
                assert!((pa - pb).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn yaw_extraction_ignores_pitch_and_roll() {
        let r = yaw_matrix(0.7) * axis_angle(Vec3::x(), 0.3);
        assert!((yaw_of(&r) - 0.7).abs() < 1e-12);
        assert!((yaw_of(&yaw_matrix(-2.5)) + 2.5).abs() < 1e-12);
    }

    #[test]
    fn finite_velocity_examples() {
        let fps = 30.0;
        let constant: Positions = vec![vec![Vec3::new(1.0, 2.0, 3.0)]; 4];
        assert!(finite_velocity(&constant, fps).unwrap().iter().all(|f| f[0] == Vec3::zeros()));
        let uniform: Positions = (0..5).map(|t| vec![Vec3::new(t as f64 / fps, 0.0, 0.0)]).collect();
        for f in finite_velocity(&uniform, fps).unwrap() {
            assert!((f[0] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        }
        let quad: Positions = (0..4).map(|t| vec![Vec3::new((t * t) as f64, 0.0, 0.0)]).collect();
        let v = finite_velocity(&quad, 1.0).unwrap();
        let xs: Vec<f64> = v.iter().map(|f| f[0].x).collect();
        assert_eq!(xs, vec![1.0, 3.0, 5.0, 5.0]);
        assert!(finite_velocity(&quad[..1].to_vec(), 1.0).is_err());
    }

    #[test]
    fn clip_validation() {
        let bad = Rot::identity() * 2.0;
        assert!(MotionClip::new(30.0, vec![Vec3::zeros(); 2], vec![vec![bad]; 2]).is_err());
        assert!(MotionClip::new(30.0, vec![Vec3::zeros(); 1], vec![vec![Rot::identity()]; 1]).is_err());
        assert!(MotionClip::new(0.0, vec![Vec3::zeros(); 2], vec![vec![Rot::identity()]; 2]).is_err());
    }
}
