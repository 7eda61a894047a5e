//! Retargeting metrics: height-normalized position error, bone-length
//! conformity and the copy baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureCodec;
use crate::kinematics::{forward_kinematics, yaw_matrix, yaw_of, MotionClip, Positions, Skeleton, Vec3};
use crate::numerics::Tensor;

/// Scale applied to reported errors.
pub const MSE_SCALE: f64 = 1e3;

fn check_same_shape(a: &Positions, b: &Positions) -> Result<()> {
    let same = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
    if !same || a.is_empty() {
        return Err(Error::shape(
            "height_normalized_mse",
            format!("{} vs {} frames (or joint counts differ)", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// Mean of `((pred − gt)/height)²` over frames, joints and axes, times 10³.
pub fn height_normalized_mse(pred: &Positions, gt: &Positions, height: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if !(height > 0.0) {
        return Err(Error::invalid(format!("height must be positive, got {height}")));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fp, fg) in pred.iter().zip(gt) {
        for (p, g) in fp.iter().zip(fg) {
            sum += ((p - g) / height).norm_squared();
            n += 3;
        }
    }
    Ok(MSE_SCALE * sum / n as f64)
}

/// Expresses positions relative to a first-frame root heading and planar position.
pub fn align_positions(pos: &Positions, yaw: f64, origin: Vec3) -> Positions {
    let r = yaw_matrix(-yaw);
    let o = Vec3::new(origin.x, 0.0, origin.z);
    pos.iter()
        .map(|f| f.iter().map(|p| r * (p - o)).collect())
        .collect()
}

/// FK positions of `clip`, aligned to its own first frame.
pub fn aligned_clip_positions(clip: &MotionClip, skel: &Skeleton) -> Result<Positions> {
    let pos = forward_kinematics(skel, clip)?;
    Ok(align_positions(&pos, yaw_of(&clip.root_rot(0)), clip.root_pos()[0]))
}

/// Direct-decoded positions of `feat` (denormalized), aligned to the first frame.
pub fn aligned_direct_positions(codec: &FeatureCodec, feat: &Tensor) -> Result<Positions> {
    let pos = codec.decode_direct(feat)?;
    let (rots, root) = codec.root_trajectory(feat)?;
    Ok(align_positions(&pos, yaw_of(&rots[0]), root[0]))
}

/// Source rotations and root translation reused verbatim on the target skeleton.
pub fn copy_baseline(clip: &MotionClip, skel_src: &Skeleton, skel_tgt: &Skeleton) -> Result<MotionClip> {
    if !skel_src.topology().same_structure(skel_tgt.topology()) {
        return Err(Error::Topology("copy baseline needs identical joint trees".into()));
    }
    skel_tgt.check_compatible(clip)?;
    Ok(clip.clone())
}

/// Mean over frames and bones of `| ‖p_j − p_parent‖ − L_j | / L_j`.
pub fn bone_length_error(pos: &Positions, skel: &Skeleton) -> Result<f64> {
    let topo = skel.topology();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, frame) in pos.iter().enumerate() {
        if frame.len() != skel.joints() {
            return Err(Error::shape(
                "bone_length_error",
                format!("frame {t} has {} joints, skeleton {}", frame.len(), skel.joints()),
            ));
        }
        for j in 0..skel.joints() {
            if let Some(p) = topo.parent(j) {
                let rest = skel.bone_length(j);
                sum += ((frame[j] - frame[p]).norm() - rest).abs() / rest;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("bone length error needs at least one bone and frame"));
    }
    Ok(sum / n as f64)
}

/// Metrics for one source/target pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub id: String,
    pub start_step: usize,
    pub mse_direct: f64,
    pub mse_fk: f64,
    pub mse_copy: f64,
    pub bone_len_err_direct: f64,
    pub bone_len_err_fk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetReport {
    pub mse_direct: f64,
    pub mse_fk: f64,
    pub mse_copy: f64,
    pub bone_len_err_direct: f64,
    pub bone_len_err_fk: f64,
    pub pairs: Vec<PairReport>,
}

impl RetargetReport {
    pub fn from_pairs(pairs: Vec<PairReport>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("report needs at least one pair"));
        }
        let n = pairs.len() as f64;
        let avg = |f: fn(&PairReport) -> f64| pairs.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mse_direct: avg(|p| p.mse_direct),
            mse_fk: avg(|p| p.mse_fk),
            mse_copy: avg(|p| p.mse_copy),
            bone_len_err_direct: avg(|p| p.bone_len_err_direct),
            bone_len_err_fk: avg(|p| p.bone_len_err_fk),
            pairs,
        })
    }

    /// Share of pairs whose FK-path error is strictly below the copy baseline.
    pub fn fraction_beating_copy(&self) -> f64 {
        let wins = self.pairs.iter().filter(|p| p.mse_fk < p.mse_copy).count();
        wins as f64 / self.pairs.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,start_step,mse_direct,mse_fk,mse_copy,bone_len_err_direct,bone_len_err_fk\n");
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                p.id, p.start_step, p.mse_direct, p.mse_fk, p.mse_copy, p.bone_len_err_direct, p.bone_len_err_fk
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "pairs {}: mse x1e3 direct {:.3}, fk {:.3}, copy {:.3}; bone length error direct {:.4}, fk {:.2e}; fk beats copy on {:.0}%",
            self.pairs.len(),
            self.mse_direct,
            self.mse_fk,
            self.mse_copy,
            self.bone_len_err_direct,
            self.bone_len_err_fk,
            100.0 * self.fraction_beating_copy()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{make_skeleton, synth_motion, MotionFamily, MotionParams, SkeletonParams, SkeletonPreset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn walk() -> MotionParams {
        MotionParams {
            family: MotionFamily::Walk,
            amplitude: 0.8,
            frequency: 1.0,
            speed: 1.0,
            duration: 2.0,
            phase: 0.1,
        }
    }

    fn skel(legs: f64) -> Skeleton {
        make_skeleton(&SkeletonParams {
            legs,
            ..SkeletonParams::canonical(SkeletonPreset::Humanoid16)
        })
        .unwrap()
    }

    #[test]
    fn mse_examples() {
        let a: Positions = vec![vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.5, 2.0)]; 3];
        assert_eq!(height_normalized_mse(&a, &a, 1.7).unwrap(), 0.0);
        let h = 1.7;
        let b: Positions = a
            .iter()
            .map(|f| f.iter().map(|p| p + Vec3::repeat(0.1 * h)).collect())
            .collect();
        assert!((height_normalized_mse(&b, &a, h).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(height_normalized_mse(&a, &b, h).unwrap(), height_normalized_mse(&b, &a, h).unwrap());
        assert!(height_normalized_mse(&a, &b, 0.0).is_err());
        assert!(height_normalized_mse(&a, &b[..2].to_vec(), h).is_err());
    }

    #[test]
    fn alignment_removes_heading_and_planar_offset() {
        let s = skel(1.0);
        let clip = synth_motion(&s, &walk(), 30.0).unwrap();
        let moved = clip.yawed(0.9).translated(Vec3::new(3.0, 0.0, -2.0));
        let a = aligned_clip_positions(&clip, &s).unwrap();
        let b = aligned_clip_positions(&moved, &s).unwrap();
        assert!(height_normalized_mse(&a, &b, s.height()).unwrap() < 1e-20);
    }

    #[test]
    fn bone_error_examples() {
        let s = skel(1.2);
        let clip = synth_motion(&s, &walk(), 30.0).unwrap();
        let pos = forward_kinematics(&s, &clip).unwrap();
        assert!(bone_length_error(&pos, &s).unwrap() < 1e-9);
        let scaled: Positions = pos.iter().map(|f| f.iter().map(|p| p * 1.1).collect()).collect();
        assert!((bone_length_error(&scaled, &s).unwrap() - 0.1).abs() < 1e-9);
    }

    #[test]
    fn bone_error_of_noisy_unit_bones_matches_half_normal_mean() {
        // a straight chain of unit bones
        let n = 12;
        let parents: Vec<i64> = (0..n as i64).map(|j| j - 1).collect();
        let names: Vec<String> = (0..n).map(|j| format!("j{j}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let topo = crate::kinematics::Topology::from_parent_indices(&parents, &names).unwrap();
        let offsets = (0..n).map(|j| if j == 0 { Vec3::zeros() } else { Vec3::new(0.0, 1.0, 0.0) }).collect();
        let s = Skeleton::new(topo, offsets).unwrap();
        let rest = s.rest_positions();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let pos: Positions = (0..2000)
            .map(|_| {
                rest.iter()
                    .map(|p| p + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
                    .collect()
            })
            .collect();
        // difference of two noisy endpoints has σ = 0.01·√2 along the bone
        let expect = 0.01 * 2f64.sqrt() * (2.0 / std::f64::consts::PI).sqrt();
        let got = bone_length_error(&pos, &s).unwrap();
        assert!((got - expect).abs() < 5e-4, "{got} vs {expect}");
    }

    #[test]
    fn copy_baseline_properties() {
        let src = skel(1.0);
        let tgt = skel(1.2);
        let mp = walk();
        let clip = synth_motion(&src, &mp, 30.0).unwrap();
        let same = copy_baseline(&clip, &src, &src).unwrap();
        assert_eq!(forward_kinematics(&src, &same).unwrap(), forward_kinematics(&src, &clip).unwrap());
        let copied = copy_baseline(&clip, &src, &tgt).unwrap();
        let pos = forward_kinematics(&tgt, &copied).unwrap();
        assert!(bone_length_error(&pos, &tgt).unwrap() < 1e-12);
        let gt = synth_motion(&tgt, &mp, 30.0).unwrap();
        let e = height_normalized_mse(
            &aligned_clip_positions(&copied, &tgt).unwrap(),
            &aligned_clip_positions(&gt, &tgt).unwrap(),
            tgt.height(),
        )
        .unwrap();
        assert!(e > 0.0);
        let other = make_skeleton(&SkeletonParams::canonical(SkeletonPreset::Humanoid24)).unwrap();
        assert!(matches!(copy_baseline(&clip, &src, &other), Err(Error::Topology(_))));
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let p = |id: &str, fk: f64, copy: f64| PairReport {
            id: id.into(),
            start_step: 10,
            mse_direct: 2.0,
            mse_fk: fk,
            mse_copy: copy,
            bone_len_err_direct: 0.02,
            bone_len_err_fk: 0.0,
        };
        let r = RetargetReport::from_pairs(vec![p("a", 1.0, 3.0), p("b", 4.0, 3.0)]).unwrap();
        assert_eq!(r.mse_fk, 2.5);
        assert_eq!(r.fraction_beating_copy(), 0.5);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("a,10,2,1,3,"));
        assert!(r.summary().contains("50%"));
        assert!(RetargetReport::from_pairs(vec![]).is_err());
    }
}
