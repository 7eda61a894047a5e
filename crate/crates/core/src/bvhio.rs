//! BVH reading and writing.
//!
//! Reading accepts any of the six Euler orders and converts to meters, +Y up.
//! Writing always emits `Zrotation Yrotation Xrotation` with six decimals.
//! The root translation is `OFFSET + position channels`; position channels on
//! non-root joints are parsed and ignored.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{axis_angle, MotionClip, Rot, Skeleton, Topology, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Xposition,
    Yposition,
    Zposition,
    Xrotation,
    Yrotation,
    Zrotation,
}

impl Channel {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Xposition" => Channel::Xposition,
            "Yposition" => Channel::Yposition,
            "Zposition" => Channel::Zposition,
            "Xrotation" => Channel::Xrotation,
            "Yrotation" => Channel::Yrotation,
            "Zrotation" => Channel::Zrotation,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Channel::Xposition => "Xposition",
            Channel::Yposition => "Yposition",
            Channel::Zposition => "Zposition",
            Channel::Xrotation => "Xrotation",
            Channel::Yrotation => "Yrotation",
            Channel::Zrotation => "Zrotation",
        }
    }
}

/// Parsed document, already converted to meters.
#[derive(Clone, Debug, PartialEq)]
pub struct BvhDocument {
    pub skeleton: Skeleton,
    /// Declared channels per joint, in skeleton order.
    pub channels: Vec<Vec<Channel>>,
    pub clip: MotionClip,
    /// seconds
    pub frame_time: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BvhReadOptions {
    /// Multiplier from file units to meters; `None` guesses from the median
    /// bone length (above 10 means centimeters).
    pub unit_scale: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BvhWriteOptions {
    /// Multiplier from meters to file units.
    pub unit_scale: f64,
}

impl Default for BvhWriteOptions {
    fn default() -> Self {
        Self { unit_scale: 1.0 }
    }
}

struct Token<'a> {
    line: usize,
    text: &'a str,
}

struct Parser<'a> {
    tokens: Vec<Token<'a>>,
    pos: usize,
    last_line: usize,
}

struct RawJoint {
    name: String,
    parent: Option<usize>,
    offset: Vec3,
    offset_line: usize,
    channels: Vec<Channel>,
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Bvh {
        line,
        message: message.into(),
    }
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let tokens: Vec<Token<'a>> = text
            .lines()
            .enumerate()
            .flat_map(|(i, l)| l.split_whitespace().map(move |t| Token { line: i + 1, text: t }))
            .collect();
        let last_line = text.lines().count().max(1);
        Self {
            tokens,
            pos: 0,
            last_line,
        }
    }

    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.pos)
    }

    fn line(&self) -> usize {
        self.peek().map_or(self.last_line, |t| t.line)
    }

    fn next(&mut self, what: &str) -> Result<&Token<'a>> {
        let line = self.line();
        let t = self
            .tokens
            .get(self.pos)
            .ok_or_else(|| err(line, format!("unexpected end of file, expected {what}")))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, word: &str) -> Result<usize> {
        let t = self.next(&format!("`{word}`"))?;
        if t.text != word {
            return Err(err(t.line, format!("expected `{word}`, found `{}`", t.text)));
        }
        Ok(t.line)
    }

    fn number(&mut self, what: &str) -> Result<f64> {
        let t = self.next(what)?;
        let v: f64 = t
            .text
            .parse()
            .map_err(|_| err(t.line, format!("expected {what}, found non-numeric `{}`", t.text)))?;
        if !v.is_finite() {
            return Err(err(t.line, format!("non-finite {what}")));
        }
        Ok(v)
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let t = self.next(what)?;
        t.text
            .parse()
            .map_err(|_| err(t.line, format!("expected {what}, found `{}`", t.text)))
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(
            self.number("offset x")?,
            self.number("offset y")?,
            self.number("offset z")?,
        ))
    }

    /// Body of a ROOT/JOINT after its name, starting at `{`.
    fn joint(&mut self, name: String, parent: Option<usize>, out: &mut Vec<RawJoint>) -> Result<()> {
        self.expect("{")?;
        let offset_line = self.expect("OFFSET")?;
        let offset = self.vec3()?;
        let ch_line = self.expect("CHANNELS")?;
        let n = self.count("channel count")?;
        if n > 6 {
            return Err(err(ch_line, format!("{n} channels declared; at most 6 are supported")));
        }
        let mut channels = Vec::with_capacity(n);
        for _ in 0..n {
            let t = self.next("channel name")?;
            let c = Channel::parse(t.text).ok_or_else(|| err(t.line, format!("unknown channel `{}`", t.text)))?;
            channels.push(c);
        }
        let index = out.len();
        out.push(RawJoint {
            name,
            parent,
            offset,
            offset_line,
            channels,
        });
        loop {
            let t = self.next("`JOINT`, `End` or `}`")?;
            match t.text {
                "JOINT" => {
                    let name = self.next("joint name")?.text.to_string();
                    self.joint(name, Some(index), out)?;
                }
                "End" => {
                    self.expect("Site")?;
                    self.expect("{")?;
                    self.expect("OFFSET")?;
                    self.vec3()?;
                    self.expect("}")?;
                }
                "}" => return Ok(()),
                other => return Err(err(t.line, format!("unexpected `{other}` inside joint block"))),
            }
        }
    }
}

fn euler_to_rot(channels: &[Channel], values: &[f64]) -> Rot {
    let mut r = Rot::identity();
    for (c, v) in channels.iter().zip(values) {
        let axis = match c {
            Channel::Xrotation => Vec3::x(),
            Channel::Yrotation => Vec3::y(),
            Channel::Zrotation => Vec3::z(),
            _ => continue,
        };
        r *= axis_angle(axis, v.to_radians());
    }
    r
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn parse_bvh(text: &str, opts: &BvhReadOptions) -> Result<BvhDocument> {
    let mut p = Parser::new(text);
    p.expect("HIERARCHY")?;
    p.expect("ROOT")?;
    let root_name = p.next("root name")?.text.to_string();
    let mut raw = Vec::new();
    p.joint(root_name, None, &mut raw)?;
    let motion_line = match p.next("`MOTION`")? {
        t if t.text == "MOTION" => t.line,
        t => return Err(err(t.line, format!("expected `MOTION`, found `{}` (unbalanced braces?)", t.text))),
    };
    p.expect("Frames:")?;
    let frames = p.count("frame count")?;
    p.expect("Frame")?;
    p.expect("Time:")?;
    let ft_line = p.line();
    let frame_time = p.number("frame time")?;
    if !(frame_time > 0.0) {
        return Err(err(ft_line, "frame time must be positive"));
    }

    let n_channels: usize = raw.iter().map(|j| j.channels.len()).sum();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut row_line = 0;
    let mut current: Vec<f64> = Vec::new();
    while let Some(t) = p.peek() {
        if t.line != row_line {
            if !current.is_empty() {
                if current.len() != n_channels {
                    return Err(err(
                        row_line,
                        format!("frame row has {} values, expected {n_channels}", current.len()),
                    ));
                }
                rows.push(std::mem::take(&mut current));
            }
            row_line = t.line;
        }
        current.push(p.number("channel value")?);
    }
    if !current.is_empty() {
        if current.len() != n_channels {
            return Err(err(
                row_line,
                format!("frame row has {} values, expected {n_channels}", current.len()),
            ));
        }
        rows.push(current);
    }
    if rows.len() != frames {
        return Err(err(
            motion_line,
            format!("MOTION section declares {frames} frames but contains {} rows", rows.len()),
        ));
    }
    if frames < 2 {
        return Err(err(motion_line, "MOTION section needs at least 2 frames"));
    }

    let scale = match opts.unit_scale {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(Error::invalid(format!("unit scale must be positive, got {s}"))),
        None => {
            let m = median(raw.iter().skip(1).map(|j| j.offset.norm()).collect());
            if m > 10.0 {
                0.01
            } else {
                1.0
            }
        }
    };

    let mut names = HashSet::new();
    for j in &raw {
        if !names.insert(j.name.as_str()) {
            return Err(err(j.offset_line, format!("duplicate joint name `{}`", j.name)));
        }
    }
    for j in raw.iter().skip(1) {
        if !(j.offset.norm() > 0.0) {
            return Err(err(j.offset_line, format!("joint `{}` has a zero-length bone", j.name)));
        }
    }
    let topology = Topology::new(
        raw.iter().map(|j| j.parent).collect(),
        raw.iter().map(|j| j.name.clone()).collect(),
    )?;
    let skeleton = Skeleton::new(topology, raw.iter().map(|j| j.offset * scale).collect())?;

    let mut root_pos = Vec::with_capacity(frames);
    let mut local = Vec::with_capacity(frames);
    for row in &rows {
        let mut k = 0;
        let mut frame = Vec::with_capacity(raw.len());
        let mut root = Vec3::zeros();
        for (ji, j) in raw.iter().enumerate() {
            let vals = &row[k..k + j.channels.len()];
            k += j.channels.len();
            if ji == 0 {
                let mut t = j.offset;
                for (c, v) in j.channels.iter().zip(vals) {
                    match c {
                        Channel::Xposition => t.x += v,
                        Channel::Yposition => t.y += v,
                        Channel::Zposition => t.z += v,
                        _ => {}
                    }
                }
                root = t * scale;
            }
            frame.push(euler_to_rot(&j.channels, vals));
        }
        root_pos.push(root);
        local.push(frame);
    }
    let clip = MotionClip::new(1.0 / frame_time, root_pos, local)?;
    Ok(BvhDocument {
        skeleton,
        channels: raw.into_iter().map(|j| j.channels).collect(),
        clip,
        frame_time,
    })
}

pub const ROOT_CHANNELS: [Channel; 6] = [
    Channel::Xposition,
    Channel::Yposition,
    Channel::Zposition,
    Channel::Zrotation,
    Channel::Yrotation,
    Channel::Xrotation,
];
pub const JOINT_CHANNELS: [Channel; 3] = [Channel::Zrotation, Channel::Yrotation, Channel::Xrotation];

fn fmt6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// `[z, y, x]` degrees with `R = Rz·Ry·Rx`.
fn zyx_degrees(r: &Rot) -> [f64; 3] {
    let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(*r).euler_angles();
    [yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees()]
}

pub fn write_bvh(skel: &Skeleton, clip: &MotionClip, opts: &BvhWriteOptions) -> Result<String> {
    skel.check_compatible(clip)?;
    let topo = skel.topology();
    let s = opts.unit_scale;
    let mut out = String::from("HIERARCHY\n");
    fn emit(out: &mut String, skel: &Skeleton, j: usize, depth: usize, s: f64) {
        let topo = skel.topology();
        let pad = "  ".repeat(depth);
        let kw = if j == 0 { "ROOT" } else { "JOINT" };
        let o = skel.offset(j) * s;
        let _ = writeln!(out, "{pad}{kw} {}", topo.name(j));
        let _ = writeln!(out, "{pad}{{");
        let _ = writeln!(out, "{pad}  OFFSET {} {} {}", fmt6(o.x), fmt6(o.y), fmt6(o.z));
        let chans: &[Channel] = if j == 0 { &ROOT_CHANNELS } else { &JOINT_CHANNELS };
        let names: Vec<&str> = chans.iter().map(|c| c.name()).collect();
        let _ = writeln!(out, "{pad}  CHANNELS {} {}", chans.len(), names.join(" "));
        let children: Vec<usize> = topo.children(j).collect();
        if children.is_empty() {
            let _ = writeln!(out, "{pad}  End Site");
            let _ = writeln!(out, "{pad}  {{");
            let _ = writeln!(out, "{pad}    OFFSET 0.000000 0.000000 0.000000");
            let _ = writeln!(out, "{pad}  }}");
        }
        for c in children {
            emit(out, skel, c, depth + 1, s);
        }
        let _ = writeln!(out, "{pad}}}");
    }
    emit(&mut out, skel, 0, 0, s);
    // the writer walks the tree depth-first; parsing yields that order, so
    // frames are emitted in the same order
    let order = dfs_order(topo);
    let _ = writeln!(out, "MOTION");
    let _ = writeln!(out, "Frames: {}", clip.frames());
    let _ = writeln!(out, "Frame Time: {}", 1.0 / clip.fps());
    for t in 0..clip.frames() {
        let mut vals = Vec::with_capacity(3 + 3 * skel.joints());
        let root = (clip.root_pos()[t] - skel.offset(0)) * s;
        vals.extend([root.x, root.y, root.z]);
        for &j in &order {
            vals.extend(zyx_degrees(&clip.rotation(t, j)));
        }
        let line: Vec<String> = vals.into_iter().map(fmt6).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

/// Depth-first pre-order with children visited in index order.
fn dfs_order(topo: &Topology) -> Vec<usize> {
    let mut order = Vec::with_capacity(topo.len());
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        order.push(j);
        let mut kids: Vec<usize> = topo.children(j).collect();
        kids.reverse();
        stack.extend(kids);
    }
    order
}

/// Canonical joint names and the source joint each one comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMapping {
    pub joints: Vec<MappedJoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappedJoint {
    pub name: String,
    pub source: String,
}

impl JointMapping {
    /// Maps every joint of `topo` to itself.
    pub fn identity(topo: &Topology) -> Self {
        Self {
            joints: topo
                .names()
                .iter()
                .map(|n| MappedJoint {
                    name: n.clone(),
                    source: n.clone(),
                })
                .collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("joint mapping: {e}")))
    }
}

/// Prunes unmapped joints, reorders to the mapping's order and scales the
/// character to unit height.
pub fn standardize(doc: &BvhDocument, mapping: &JointMapping) -> Result<(Skeleton, MotionClip)> {
    let src_topo = doc.skeleton.topology();
    let missing: Vec<&str> = mapping
        .joints
        .iter()
        .filter(|m| src_topo.index_of(&m.source).is_none())
        .map(|m| m.source.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Topology(format!(
            "mapping references absent joints: {}",
            missing.join(", ")
        )));
    }
    if mapping.joints.is_empty() {
        return Err(Error::invalid("empty joint mapping"));
    }
    let src_index: Vec<usize> = mapping
        .joints
        .iter()
        .map(|m| src_topo.index_of(&m.source).unwrap())
        .collect();
    let slot: HashMap<usize, usize> = src_index.iter().enumerate().map(|(k, &s)| (s, k)).collect();
    if slot.len() != src_index.len() {
        return Err(Error::invalid("mapping uses a source joint twice"));
    }

    // nearest retained ancestor and the pruned joints in between (top-down)
    let mut parents = Vec::with_capacity(src_index.len());
    let mut between: Vec<Vec<usize>> = Vec::with_capacity(src_index.len());
    for &s in &src_index {
        let mut chain = Vec::new();
        let mut cur = src_topo.parent(s);
        let parent = loop {
            match cur {
                None => break None,
                Some(a) => match slot.get(&a) {
                    Some(&k) => break Some(k),
                    None => {
                        chain.push(a);
                        cur = src_topo.parent(a);
                    }
                },
            }
        };
        chain.reverse();
        parents.push(parent);
        between.push(chain);
    }
    let topo = Topology::new(parents, mapping.joints.iter().map(|m| m.name.clone()).collect())?;

    let rest = doc.skeleton.rest_positions();
    let offsets: Vec<Vec3> = src_index
        .iter()
        .enumerate()
        .map(|(k, &s)| match topo.parent(k) {
            None => rest[s],
            Some(p) => rest[s] - rest[src_index[p]],
        })
        .collect();
    let raw = Skeleton::new(topo.clone(), offsets)?;
    let inv_h = 1.0 / raw.height();
    let skel = raw.scaled(inv_h)?;

    let clip = &doc.clip;
    let mut local = Vec::with_capacity(clip.frames());
    let mut root_pos = Vec::with_capacity(clip.frames());
    for t in 0..clip.frames() {
        // global rotations of the source so a pruned root chain still composes
        let mut glob: Vec<Rot> = Vec::with_capacity(src_topo.len());
        let mut gpos: Vec<Vec3> = Vec::with_capacity(src_topo.len());
        for j in 0..src_topo.len() {
            match src_topo.parent(j) {
                None => {
                    glob.push(clip.rotation(t, j));
                    gpos.push(clip.root_pos()[t]);
                }
                Some(p) => {
                    gpos.push(gpos[p] + glob[p] * doc.skeleton.offset(j));
                    glob.push(glob[p] * clip.rotation(t, j));
                }
            }
        }
        let frame: Vec<Rot> = src_index
            .iter()
            .enumerate()
            .map(|(k, &s)| match topo.parent(k) {
                None => glob[s],
                Some(_) => between[k]
                    .iter()
                    .fold(Rot::identity(), |acc, &b| acc * clip.rotation(t, b))
                    * clip.rotation(t, s),
            })
            .collect();
        local.push(frame);
        root_pos.push(gpos[src_index[0]] * inv_h);
    }
    Ok((skel, MotionClip::new(clip.fps(), root_pos, local)?))
}
