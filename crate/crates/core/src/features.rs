//! Mapping between motion clips and the flat per-frame feature matrix the
//! flow model operates on, plus the skeleton condition vector and dataset
//! normalization.
//!
//! A frame is `[gen ; ret]`. The gen block holds root yaw velocity, planar
//! root velocity in the facing frame, root height, four foot contacts, local
//! 6D rotations, positions and velocities in the facing frame. The ret block
//! holds, per joint, `[p ; r6d ; v]` with root-relative yaw-free positions,
//! 6D rotations (absolute in the root slot, local elsewhere) and
//! finite-difference velocities of `p`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::kinematics::{
    forward_kinematics_full, rot6d_decode_at, rot6d_encode, wrap_angle, yaw_matrix, yaw_of, MotionClip,
    Positions, Rot, Skeleton, Vec3,
};
use crate::numerics::Tensor;

pub const GEN_ROOT_CHANNELS: usize = 8;
pub const RET_JOINT_CHANNELS: usize = 12;
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
const STD_FLOOR: f64 = 1e-6;

/// Channel ranges of a `T × D` feature matrix for `J` joints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    joints: usize,
}

impl FeatureLayout {
    pub fn new(joints: usize) -> Result<Self> {
        if joints == 0 {
            return Err(Error::invalid("feature layout needs at least one joint"));
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn d_gen(&self) -> usize {
        GEN_ROOT_CHANNELS + 12 * self.joints
    }

    pub fn d_ret(&self) -> usize {
        RET_JOINT_CHANNELS * self.joints
    }

    pub fn dim(&self) -> usize {
        self.d_gen() + self.d_ret()
    }

    pub fn root_yaw_vel(&self) -> Range<usize> {
        0..1
    }

    pub fn root_planar_vel(&self) -> Range<usize> {
        1..3
    }

    pub fn root_height(&self) -> Range<usize> {
        3..4
    }

    pub fn contacts(&self) -> Range<usize> {
        4..8
    }

    pub fn gen_rot6d(&self) -> Range<usize> {
        8..8 + 6 * self.joints
    }

    pub fn gen_pos(&self) -> Range<usize> {
        let s = self.gen_rot6d().end;
        s..s + 3 * self.joints
    }

    pub fn gen_vel(&self) -> Range<usize> {
        let s = self.gen_pos().end;
        s..s + 3 * self.joints
    }

    pub fn ret(&self) -> Range<usize> {
        self.d_gen()..self.dim()
    }

    /// Start of joint `j`'s 12-channel slot in the ret block.
    pub fn ret_joint(&self, j: usize) -> usize {
        self.d_gen() + RET_JOINT_CHANNELS * j
    }

    pub fn ret_pos(&self, j: usize) -> Range<usize> {
        let s = self.ret_joint(j);
        s..s + 3
    }

    pub fn ret_rot6d(&self, j: usize) -> Range<usize> {
        let s = self.ret_joint(j) + 3;
        s..s + 6
    }

    pub fn ret_vel(&self, j: usize) -> Range<usize> {
        let s = self.ret_joint(j) + 9;
        s..s + 3
    }

    /// All named ranges in channel order; the per-joint ret ranges are
    /// interleaved so the list tiles `[0, D)`.
    pub fn named_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("root_yaw_vel".to_string(), self.root_yaw_vel()),
            ("root_planar_vel".to_string(), self.root_planar_vel()),
            ("root_height".to_string(), self.root_height()),
            ("contacts".to_string(), self.contacts()),
            ("gen_rot6d".to_string(), self.gen_rot6d()),
            ("gen_pos".to_string(), self.gen_pos()),
            ("gen_vel".to_string(), self.gen_vel()),
        ];
        for j in 0..self.joints {
            out.push((format!("ret_pos[{j}]"), self.ret_pos(j)));
            out.push((format!("ret_rot6d[{j}]"), self.ret_rot6d(j)));
            out.push((format!("ret_vel[{j}]"), self.ret_vel(j)));
        }
        out
    }

    fn check_seq(&self, feat: &Tensor) -> Result<usize> {
        if feat.rank() != 2 || feat.shape()[1] != self.dim() {
            return Err(Error::shape(
                "features",
                format!("expected [T, {}], got {:?}", self.dim(), feat.shape()),
            ));
        }
        if feat.shape()[0] < 2 {
            return Err(Error::invalid("feature sequence needs at least 2 frames"));
        }
        Ok(feat.shape()[0])
    }
}

/// A point on the foot used for contact labels: joint position plus a
/// forward offset in the joint's frame (zero when a real toe joint exists).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactPoint {
    pub joint: usize,
    pub forward: f64,
}

/// Contact points in channel order (left heel, left toe, right heel, right toe)
/// and the thresholds that label a point as grounded.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactConfig {
    pub points: [ContactPoint; 4],
    /// m/s
    pub speed_threshold: f64,
    /// m
    pub height_threshold: f64,
}

impl ContactConfig {
    pub fn new(points: [ContactPoint; 4]) -> Self {
        Self {
            points,
            speed_threshold: 0.15,
            height_threshold: 0.08,
        }
    }
}

/// Encoder/decoder for one topology at one frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCodec {
    layout: FeatureLayout,
    contacts: ContactConfig,
    fps: f64,
}

fn put(row: &mut [f64], start: usize, v: &Vec3) {
    row[start..start + 3].copy_from_slice(v.as_slice());
}

fn get3(row: &[f64], start: usize) -> Vec3 {
    Vec3::new(row[start], row[start + 1], row[start + 2])
}

impl FeatureCodec {
    pub fn new(layout: FeatureLayout, contacts: ContactConfig, fps: f64) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if let Some(p) = contacts.points.iter().find(|p| p.joint >= layout.joints()) {
            return Err(Error::invalid(format!(
                "contact joint {} out of range for {} joints",
                p.joint,
                layout.joints()
            )));
        }
        Ok(Self { layout, contacts, fps })
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn contacts(&self) -> &ContactConfig {
        &self.contacts
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// `T × D` features of `clip` on `skel`.
    pub fn encode(&self, clip: &MotionClip, skel: &Skeleton) -> Result<Tensor> {
        skel.check_compatible(clip)?;
        let l = &self.layout;
        if skel.joints() != l.joints() {
            return Err(Error::Topology(format!(
                "codec expects {} joints, skeleton has {}",
                l.joints(),
                skel.joints()
            )));
        }
        if (clip.fps() - self.fps).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "clip runs at {} fps, codec at {}",
                clip.fps(),
                self.fps
            )));
        }
        let (global, grot) = forward_kinematics_full(skel, clip)?;
        let t_count = clip.frames();
        let j_count = l.joints();
        let fps = self.fps;
        let root = clip.root_pos();
        let yaw: Vec<f64> = (0..t_count).map(|t| yaw_of(&clip.root_rot(t))).collect();
        let unyaw: Vec<Rot> = yaw.iter().map(|&y| yaw_matrix(-y)).collect();

        let contact_pts: Vec<[Vec3; 4]> = (0..t_count)
            .map(|t| {
                self.contacts.points.map(|c| {
                    global[t][c.joint] + grot[t][c.joint] * Vec3::new(0.0, 0.0, c.forward)
                })
            })
            .collect();

        // row for frame `t`; differences use frame t+1 (the last frame reuses t-1)
        let mut data = Vec::with_capacity(t_count * l.dim());
        for t in 0..t_count {
            let (a, b) = if t + 1 < t_count { (t, t + 1) } else { (t - 1, t) };
            let mut row = vec![0.0; l.dim()];
            row[0] = wrap_angle(yaw[b] - yaw[a]) * fps;
            let d = root[b] - root[a];
            let planar = unyaw[a] * Vec3::new(d.x, 0.0, d.z) * fps;
            row[1] = planar.x;
            row[2] = planar.z;
            row[3] = root[t].y;
            for (k, pts) in (0..4).map(|k| (k, (contact_pts[a][k], contact_pts[b][k]))) {
                let speed = (pts.1 - pts.0).norm() * fps;
                let height = contact_pts[t][k].y;
                let grounded =
                    speed < self.contacts.speed_threshold && height < self.contacts.height_threshold;
                row[l.contacts().start + k] = if grounded { 1.0 } else { 0.0 };
            }
            let planar_root = Vec3::new(root[t].x, 0.0, root[t].z);
            for j in 0..j_count {
                let local = if j == 0 {
                    unyaw[t] * clip.rotation(t, 0)
                } else {
                    clip.rotation(t, j)
                };
                let code = rot6d_encode(&local)?;
                let s = l.gen_rot6d().start + 6 * j;
                row[s..s + 6].copy_from_slice(&code);
                put(&mut row, l.gen_pos().start + 3 * j, &(unyaw[t] * (global[t][j] - planar_root)));
                put(
                    &mut row,
                    l.gen_vel().start + 3 * j,
                    &(unyaw[a] * (global[b][j] - global[a][j]) * fps),
                );

                let ret = |tt: usize| unyaw[tt] * (global[tt][j] - root[tt]);
                put(&mut row, l.ret_pos(j).start, &ret(t));
                let abs_or_local = clip.rotation(t, j);
                row[l.ret_rot6d(j)].copy_from_slice(&rot6d_encode(&abs_or_local)?);
                put(&mut row, l.ret_vel(j).start, &((ret(b) - ret(a)) * fps));
            }
            data.extend(row);
        }
        let out = Tensor::new(vec![t_count, l.dim()], data)?;
        out.check_finite(|| "feature encode".to_string())?;
        Ok(out)
    }

    /// Root rotation, yaw and position per frame, rebuilt from the ret root
    /// rotation, the gen planar velocity (integrated from the planar origin)
    /// and the gen root height.
    pub fn root_trajectory(&self, feat: &Tensor) -> Result<(Vec<Rot>, Vec<Vec3>)> {
        let l = &self.layout;
        let t_count = l.check_seq(feat)?;
        let mut rots = Vec::with_capacity(t_count);
        let mut pos = Vec::with_capacity(t_count);
        let (mut x, mut z) = (0.0, 0.0);
        for t in 0..t_count {
            let row = feat.row(t);
            let r = rot6d_decode_at(&row[l.ret_rot6d(0)], t, 0)?;
            let step = yaw_matrix(yaw_of(&r)) * Vec3::new(row[1], 0.0, row[2]) / self.fps;
            pos.push(Vec3::new(x, row[3], z));
            rots.push(r);
            x += step.x;
            z += step.z;
        }
        Ok((rots, pos))
    }

    /// Global joint positions from the ret-block position channels.
    pub fn decode_direct(&self, feat: &Tensor) -> Result<Positions> {
        let l = &self.layout;
        let (rots, root) = self.root_trajectory(feat)?;
        Ok((0..root.len())
            .map(|t| {
                let row = feat.row(t);
                let ry = yaw_matrix(yaw_of(&rots[t]));
                (0..l.joints())
                    .map(|j| ry * get3(row, l.ret_pos(j).start) + root[t])
                    .collect()
            })
            .collect())
    }

    /// Clip rebuilt from the ret-block rotations on `skel`.
    pub fn decode_fk(&self, feat: &Tensor, skel: &Skeleton) -> Result<MotionClip> {
        let l = &self.layout;
        if skel.joints() != l.joints() {
            return Err(Error::Topology(format!(
                "codec expects {} joints, skeleton has {}",
                l.joints(),
                skel.joints()
            )));
        }
        let (root_rots, root) = self.root_trajectory(feat)?;
        let mut local = Vec::with_capacity(root.len());
        for (t, root_rot) in root_rots.into_iter().enumerate() {
            let row = feat.row(t);
            let mut frame = Vec::with_capacity(l.joints());
            frame.push(root_rot);
            for j in 1..l.joints() {
                frame.push(rot6d_decode_at(&row[l.ret_rot6d(j)], t, j)?);
            }
            local.push(frame);
        }
        MotionClip::new(self.fps, root, local)
    }

    /// Skeleton condition `S` (length `D_ret`).
    pub fn skeleton_condition(&self, skel: &Skeleton) -> Result<Tensor> {
        build_skeleton_condition(&self.layout, skel)
    }
}

/// T-pose root-relative joint positions, identity rotations, zero velocities.
pub fn build_skeleton_condition(layout: &FeatureLayout, skel: &Skeleton) -> Result<Tensor> {
    if skel.joints() != layout.joints() {
        return Err(Error::Topology(format!(
            "layout expects {} joints, skeleton has {}",
            layout.joints(),
            skel.joints()
        )));
    }
    let rest = skel.rest_positions();
    let mut s = vec![0.0; layout.d_ret()];
    for (j, p) in rest.iter().enumerate() {
        let base = RET_JOINT_CHANNELS * j;
        put(&mut s, base, &(p - rest[0]));
        s[base + 3..base + 9].copy_from_slice(&IDENTITY_6D);
    }
    Tensor::new(vec![layout.d_ret()], s)
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    mean: Tensor,
    std: Tensor,
}

impl NormStats {
    pub const MEAN_KEY: &'static str = "norm.mean";
    pub const STD_KEY: &'static str = "norm.std";

    /// Fits over every frame of `seqs`. Contact channels get mean 0, std 1.
    pub fn fit(seqs: &[Tensor], layout: &FeatureLayout) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("cannot fit normalization on an empty dataset"));
        }
        let d = layout.dim();
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for s in seqs {
            let t = layout.check_seq(s)?;
            for r in 0..t {
                for (acc, v) in sum.iter_mut().zip(s.row(r)) {
                    *acc += v;
                }
            }
            count += t;
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut var = vec![0.0; d];
        for s in seqs {
            for r in 0..s.shape()[0] {
                for ((acc, v), m) in var.iter_mut().zip(s.row(r)).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let mut std: Vec<f64> = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        let mut mean = mean;
        for c in layout.contacts() {
            mean[c] = 0.0;
            std[c] = 1.0;
        }
        Ok(Self {
            mean: Tensor::new(vec![d], mean)?,
            std: Tensor::new(vec![d], std)?,
        })
    }

    pub fn from_tensors(mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.rank() != 1 || mean.shape() != std.shape() {
            return Err(Error::shape(
                "NormStats",
                format!("mean {:?} vs std {:?}", mean.shape(), std.shape()),
            ));
        }
        if std.data().iter().any(|&s| !(s >= STD_FLOOR)) {
            return Err(Error::invalid("normalization std below floor"));
        }
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn std(&self) -> &Tensor {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, feat: &Tensor) -> Result<()> {
        if feat.rank() != 2 || feat.shape()[1] != self.dim() {
            return Err(Error::shape(
                "NormStats",
                format!("expected [T, {}], got {:?}", self.dim(), feat.shape()),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, feat: &Tensor) -> Result<Tensor> {
        self.check(feat)?;
        let (m, s) = (self.mean.data(), self.std.data());
        let d = self.dim();
        let mut out = feat.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - m[c]) / s[c];
        }
        Ok(out)
    }

    pub fn invert(&self, feat: &Tensor) -> Result<Tensor> {
        self.check(feat)?;
        let (m, s) = (self.mean.data(), self.std.data());
        let d = self.dim();
        let mut out = feat.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = *v * s[c] + m[c];
        }
        Ok(out)
    }

    /// Normalizes the position channels of a skeleton condition with the
    /// ret-block position statistics; rotation and velocity channels pass through.
    pub fn apply_condition(&self, layout: &FeatureLayout, cond: &Tensor) -> Result<Tensor> {
        if cond.shape() != [layout.d_ret()] || self.dim() != layout.dim() {
            return Err(Error::shape(
                "NormStats::apply_condition",
                format!("condition {:?} for layout D_ret = {}", cond.shape(), layout.d_ret()),
            ));
        }
        let (m, s) = (self.mean.data(), self.std.data());
        let mut out = cond.clone();
        for j in 0..layout.joints() {
            for c in layout.ret_pos(j) {
                let i = c - layout.d_gen();
                out.data_mut()[i] = (cond.data()[i] - m[c]) / s[c];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{axis_angle, forward_kinematics, Topology};

    fn skeleton(arm: f64) -> Skeleton {
        // root, spine, head, arm, hand, leg, foot
        let topo = Topology::from_parent_indices(
            &[-1, 0, 1, 1, 3, 0, 5],
            &["root", "spine", "head", "arm", "hand", "leg", "foot"],
        )
        .unwrap();
        let o = [
            [0.0, 0.9, 0.0],
            [0.0, 0.3, 0.0],
            [0.0, 0.3, 0.0],
            [0.2 * arm, 0.2, 0.0],
            [0.3 * arm, 0.0, 0.0],
            [0.1, -0.45, 0.0],
            [0.0, -0.4, 0.0],
        ];
        Skeleton::new(topo, o.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect()).unwrap()
    }

    fn codec() -> FeatureCodec {
        let p = |joint| ContactPoint { joint, forward: 0.1 };
        FeatureCodec::new(
            FeatureLayout::new(7).unwrap(),
            ContactConfig::new([p(6), p(6), p(4), p(4)]),
            30.0,
        )
        .unwrap()
    }

    fn wiggle(skel: &Skeleton, frames: usize) -> MotionClip {
        let root = (0..frames)
            .map(|t| {
                let s = t as f64 / 30.0;
                Vec3::new(0.8 * s, 0.9 + 0.05 * (3.0 * s).sin(), 0.3 * s * s)
            })
            .collect();
        let rots = (0..frames)
            .map(|t| {
                let s = t as f64 / 30.0;
                (0..skel.joints())
                    .map(|j| {
                        if j == 0 {
                            yaw_matrix(0.4 + 1.3 * s) * axis_angle(Vec3::x(), 0.1 * s.sin())
                        } else {
                            axis_angle(Vec3::new(1.0, 0.3 * j as f64, -0.2), 0.5 * (2.0 * s + j as f64).sin())
                        }
                    })
                    .collect()
            })
            .collect();
        MotionClip::new(30.0, root, rots).unwrap()
    }

    fn origin_clip(clip: &MotionClip) -> MotionClip {
        let r0 = clip.root_pos()[0];
        clip.translated(Vec3::new(-r0.x, 0.0, -r0.z))
    }

    #[test]
    fn layout_tiles_channel_space() {
        for j in [1, 7, 16, 24] {
            let l = FeatureLayout::new(j).unwrap();
            let mut next = 0;
            for (_, r) in l.named_ranges() {
                assert_eq!(r.start, next);
                next = r.end;
            }
            assert_eq!(next, l.dim());
            assert_eq!(l.dim(), 8 + 24 * j);
        }
        let full = FeatureLayout::new(24).unwrap();
        assert_eq!((full.d_gen(), full.d_ret(), full.dim()), (296, 288, 584));
    }

    #[test]
    fn static_t_pose_features() {
        let skel = skeleton(1.0);
        let c = codec();
        let clip = MotionClip::rest_pose(&skel, 5, 30.0).unwrap();
        let f = c.encode(&clip, &skel).unwrap();
        let l = c.layout();
        let s = c.skeleton_condition(&skel).unwrap();
        for t in 0..5 {
            let row = f.row(t);
            assert_eq!(&row[0..3], &[0.0, 0.0, 0.0]);
            assert_eq!(row[3], 0.9);
            assert_eq!(&row[l.ret()], s.data());
        }
    }

    #[test]
    fn planar_translation_only_changes_nothing_but_integrates() {
        let skel = skeleton(1.0);
        let c = codec();
        let clip = wiggle(&skel, 12);
        let a = c.encode(&clip, &skel).unwrap();
        let b = c.encode(&clip.translated(Vec3::new(2.5, 0.0, -1.0)), &skel).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        let da = c.decode_direct(&a).unwrap();
        let fk = forward_kinematics(&skel, &origin_clip(&clip)).unwrap();
        for (x, y) in da.iter().zip(&fk) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn decode_direct_round_trip() {
        let skel = skeleton(1.0);
        let c = codec();
        let clip = origin_clip(&wiggle(&skel, 40));
        let f = c.encode(&clip, &skel).unwrap();
        let pos = c.decode_direct(&f).unwrap();
        let fk = forward_kinematics(&skel, &clip).unwrap();
        for (x, y) in pos.iter().zip(&fk) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs().max() < 1e-6);
            }
        }
    }

    #[test]
    fn decode_direct_ignores_non_root_rotations() {
        let skel = skeleton(1.0);
        let c = codec();
        let l = *c.layout();
        let f = c.encode(&origin_clip(&wiggle(&skel, 10)), &skel).unwrap();
        let mut g = f.clone();
        for t in 0..10 {
            let row = g.row_mut(t);
            for j in 1..7 {
                for ch in l.ret_rot6d(j) {
                    row[ch] += 0.7;
                }
            }
            for ch in l.gen_rot6d() {
                row[ch] -= 0.3;
            }
        }
        assert_eq!(c.decode_direct(&f).unwrap(), c.decode_direct(&g).unwrap());
    }

    #[test]
    fn decode_fk_round_trip_and_scaling() {
        let skel = skeleton(1.0);
        let c = codec();
        let clip = origin_clip(&wiggle(&skel, 30));
        let f = c.encode(&clip, &skel).unwrap();
        let back = c.decode_fk(&f, &skel).unwrap();
        let a = forward_kinematics(&skel, &clip).unwrap();
        let b = forward_kinematics(&skel, &back).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs().max() < 1e-6);
            }
        }
        let big = skel.scaled(1.1).unwrap();
        let scaled = forward_kinematics(&big, &c.decode_fk(&f, &big).unwrap()).unwrap();
        for frame in &scaled {
            for j in 1..7 {
                let p = big.topology().parent(j).unwrap();
                let len = (frame[j] - frame[p]).norm();
                assert!((len - 1.1 * skel.bone_length(j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_rotation_features_give_t_pose() {
        let skel = skeleton(1.0);
        let c = codec();
        let l = *c.layout();
        let mut f = Tensor::zeros(vec![4, l.dim()]);
        for t in 0..4 {
            for j in 0..7 {
                f.row_mut(t)[l.ret_rot6d(j)].copy_from_slice(&IDENTITY_6D);
            }
            f.row_mut(t)[3] = 0.9;
        }
        let clip = c.decode_fk(&f, &skel).unwrap();
        let rest = MotionClip::rest_pose(&skel, 4, 30.0).unwrap();
        assert_eq!(clip, rest);
    }

    #[test]
    fn decode_fk_reports_degenerate_rotation_location() {
        let skel = skeleton(1.0);
        let c = codec();
        let l = *c.layout();
        let mut f = c.encode(&origin_clip(&wiggle(&skel, 6)), &skel).unwrap();
        f.row_mut(3)[l.ret_rot6d(5)].copy_from_slice(&[0.0; 6]);
        assert!(matches!(
            c.decode_fk(&f, &skel),
            Err(Error::DegenerateRotation { frame: 3, joint: 5 })
        ));
    }

    #[test]
    fn encode_rejects_mismatched_topology() {
        let skel = skeleton(1.0);
        let c = FeatureCodec::new(
            FeatureLayout::new(8).unwrap(),
            ContactConfig::new([ContactPoint { joint: 0, forward: 0.0 }; 4]),
            30.0,
        )
        .unwrap();
        let clip = MotionClip::rest_pose(&skel, 3, 30.0).unwrap();
        assert!(matches!(c.encode(&clip, &skel), Err(Error::Topology(_))));
    }

    #[test]
    fn skeleton_condition_differs_only_on_arm_chain() {
        let c = codec();
        let l = *c.layout();
        let a = c.skeleton_condition(&skeleton(1.0)).unwrap();
        let b = c.skeleton_condition(&skeleton(1.2)).unwrap();
        for i in 0..l.d_ret() {
            let joint = i / RET_JOINT_CHANNELS;
            let differs = a.data()[i] != b.data()[i];
            if differs {
                assert!(joint == 3 || joint == 4, "channel {i} (joint {joint})");
                assert!(i % RET_JOINT_CHANNELS < 3);
            }
        }
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
        for j in 0..7 {
            assert_eq!(&a.data()[12 * j + 3..12 * j + 9], &IDENTITY_6D);
            assert_eq!(&a.data()[12 * j + 9..12 * j + 12], &[0.0; 3]);
        }
    }

    #[test]
    fn contacts_fire_for_planted_low_feet() {
        let skel = skeleton(1.0);
        let clip = MotionClip::rest_pose(&skel, 4, 30.0).unwrap();
        let c = codec();
        let f = c.encode(&clip, &skel).unwrap();
        // foot height 0.9 - 0.45 - 0.4 = 0.05; hand is high
        assert_eq!(&f.row(0)[4..8], &[1.0, 1.0, 0.0, 0.0]);
        let moving = MotionClip::new(
            30.0,
            (0..4).map(|t| Vec3::new(0.0, 0.9, 0.1 * t as f64)).collect(),
            vec![vec![Rot::identity(); 7]; 4],
        )
        .unwrap();
        let f = c.encode(&moving, &skel).unwrap();
        assert_eq!(&f.row(0)[4..8], &[0.0; 4]);
    }

    #[test]
    fn norm_stats_examples() {
        let l = FeatureLayout::new(1).unwrap();
        let d = l.dim();
        let mut a = Tensor::full(vec![2, d], 3.0);
        a.row_mut(0)[10] = -1.0;
        a.row_mut(1)[10] = 1.0;
        a.row_mut(0)[5] = 1.0;
        let stats = NormStats::fit(&[a.clone()], &l).unwrap();
        assert_eq!(stats.mean().data()[10], 0.0);
        assert_eq!(stats.std().data()[10], 1.0);
        assert_eq!(stats.std().data()[0], 1e-6);
        assert_eq!((stats.mean().data()[5], stats.std().data()[5]), (0.0, 1.0));
        let n = stats.apply(&a).unwrap();
        assert_eq!(n.row(0)[0], 0.0);
        assert_eq!(n.row(0)[5], 1.0);
        assert!(stats.invert(&n).unwrap().max_abs_diff(&a).unwrap() < 1e-12);
        assert!(NormStats::fit(&[], &l).is_err());
    }

    #[test]
    fn condition_normalization_touches_positions_only() {
        let skel = skeleton(1.0);
        let c = codec();
        let l = *c.layout();
        let clip = origin_clip(&wiggle(&skel, 20));
        let stats = NormStats::fit(&[c.encode(&clip, &skel).unwrap()], &l).unwrap();
        let s = c.skeleton_condition(&skel).unwrap();
        let n = stats.apply_condition(&l, &s).unwrap();
        for j in 0..7 {
            assert_eq!(&n.data()[12 * j + 3..12 * j + 12], &s.data()[12 * j + 3..12 * j + 12]);
        }
    }
}
