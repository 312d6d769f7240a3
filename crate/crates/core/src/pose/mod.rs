//! Pedestrian pose streaming: 33-keypoint frames, avatar bone mapping and
//! leg-tracker locomotion.
//!
//! A frame on the `pedestrian.pose` topic looks like
//!
//! ```json
//! {
//!   "tick": 42,
//!   "keypoints": [
//!     {"name": "nose", "position": [0.0, 1.62, 0.08],
//!      "orientation": {"w": 1.0, "x": 0.0, "y": 0.0, "z": 0.0}},
//!     ...
//!   ]
//! }
//! ```
//!
//! Positions are meters in the tracking frame; orientations are unit
//! quaternions. Unknown fields are ignored.

mod locomotion;

use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use locomotion::{
    detect_locomotion, LocomotionDetector, LocomotionError, LocomotionParams, LocomotionState,
    TrackerSample,
};

pub const KEYPOINT_COUNT: usize = 33;
/// Allowed deviation of a quaternion's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

const BLAZEPOSE_NAMES: &str = include_str!("../../data/blazepose_33.txt");

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("malformed pose frame: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("expected {expected} keypoints, found {found}")]
    KeypointCount { expected: usize, found: usize },
    #[error("duplicate keypoint name {0:?}")]
    DuplicateName(String),
    #[error("keypoint {name:?} has a non-unit orientation (norm {norm})")]
    NonUnitQuaternion { name: String, norm: f64 },
    #[error("skeleton bone {bone:?} references absent keypoint {keypoint:?}")]
    MissingKeypoint { bone: String, keypoint: String },
}

/// Keypoint name list, in landmark index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    names: Vec<String>,
}

impl Topology {
    /// Parses one name per line; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Topology {
        let names = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect();
        Topology { names }
    }

    pub fn blazepose() -> &'static Topology {
        static TOPOLOGY: OnceLock<Topology> = OnceLock::new();
        TOPOLOGY.get_or_init(|| Topology::from_text(BLAZEPOSE_NAMES))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub position: [f64; 3],
    pub orientation: Quaternion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub tick: u64,
    pub keypoints: Vec<Keypoint>,
}

impl KeypointFrame {
    pub fn validate(&self) -> Result<(), PoseError> {
        if self.keypoints.len() != KEYPOINT_COUNT {
            return Err(PoseError::KeypointCount {
                expected: KEYPOINT_COUNT,
                found: self.keypoints.len(),
            });
        }
        let mut seen = HashSet::with_capacity(KEYPOINT_COUNT);
        for kp in &self.keypoints {
            if !seen.insert(kp.name.as_str()) {
                return Err(PoseError::DuplicateName(kp.name.clone()));
            }
            let norm = kp.orientation.norm();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(PoseError::NonUnitQuaternion {
                    name: kp.name.clone(),
                    norm,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }

    pub fn keypoint(&self, name: &str) -> Option<&Keypoint> {
        self.keypoints.iter().find(|k| k.name == name)
    }
}

pub fn parse_keypoint_frame(bytes: &[u8]) -> Result<KeypointFrame, PoseError> {
    let frame: KeypointFrame = serde_json::from_slice(bytes)?;
    frame.validate()?;
    Ok(frame)
}

/// Which keypoint drives an avatar bone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoneBinding {
    pub bone: String,
    pub keypoint: String,
    #[serde(default)]
    pub optional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneTransform {
    pub bone: String,
    pub position: [f64; 3],
    pub orientation: Quaternion,
}

impl BoneTransform {
    pub fn identity(bone: impl Into<String>) -> Self {
        BoneTransform {
            bone: bone.into(),
            position: [0.0; 3],
            orientation: Quaternion::IDENTITY,
        }
    }
}

/// Every keypoint of the topology as a required bone of the same name.
pub fn skeleton_from_topology(topology: &Topology) -> Vec<BoneBinding> {
    topology
        .names()
        .iter()
        .map(|n| BoneBinding {
            bone: n.clone(),
            keypoint: n.clone(),
            optional: false,
        })
        .collect()
}

/// Copies each bound keypoint's transform onto its bone, in skeleton order.
/// Optional bones whose keypoint is absent stay at identity.
pub fn map_to_avatar(frame: &KeypointFrame, skeleton: &[BoneBinding]) -> Result<Vec<BoneTransform>, PoseError> {
    skeleton
        .iter()
        .map(|b| match frame.keypoint(&b.keypoint) {
            Some(kp) => Ok(BoneTransform {
                bone: b.bone.clone(),
                position: kp.position,
                orientation: kp.orientation,
            }),
            None if b.optional => Ok(BoneTransform::identity(&b.bone)),
            None => Err(PoseError::MissingKeypoint {
                bone: b.bone.clone(),
                keypoint: b.keypoint.clone(),
            }),
        })
        .collect()
}

/// Payload of the `pedestrian.pose` topic: an optional body frame plus any
/// leg-tracker samples gathered since the previous message.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseMessage {
    #[serde(default)]
    pub frame: Option<KeypointFrame>,
    #[serde(default)]
    pub tracker: Vec<TrackerSample>,
}

/// Per-pedestrian pose pipeline: latest avatar pose and locomotion state.
#[derive(Debug, Clone)]
pub struct PoseBridge {
    skeleton: Vec<BoneBinding>,
    detector: LocomotionDetector,
    bones: Vec<BoneTransform>,
    locomotion: Option<LocomotionState>,
}

impl PoseBridge {
    pub fn new(skeleton: Vec<BoneBinding>, params: LocomotionParams) -> Self {
        PoseBridge {
            skeleton,
            detector: LocomotionDetector::new(params),
            bones: Vec::new(),
            locomotion: None,
        }
    }

    pub fn ingest(&mut self, msg: &PoseMessage) -> Result<(), PoseIngestError> {
        if let Some(frame) = &msg.frame {
            frame.validate()?;
            self.bones = map_to_avatar(frame, &self.skeleton)?;
        }
        for s in &msg.tracker {
            if let Some(state) = self.detector.push(*s)? {
                self.locomotion = Some(state);
            }
        }
        Ok(())
    }

    pub fn bones(&self) -> &[BoneTransform] {
        &self.bones
    }

    /// Latest locomotion estimate, once a full window has been seen.
    pub fn locomotion(&self) -> Option<LocomotionState> {
        self.locomotion
    }
}

impl Default for PoseBridge {
    fn default() -> Self {
        PoseBridge::new(
            skeleton_from_topology(Topology::blazepose()),
            LocomotionParams::default(),
        )
    }
}

#[derive(Debug, Error)]
pub enum PoseIngestError {
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Locomotion(#[from] LocomotionError),
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn frame_with(f: impl Fn(usize, &str) -> Keypoint) -> KeypointFrame {
        KeypointFrame {
            tick: 1,
            keypoints: Topology::blazepose()
                .names()
                .iter()
                .enumerate()
                .map(|(i, n)| f(i, n))
                .collect(),
        }
    }

    fn identity_frame() -> KeypointFrame {
        frame_with(|_, n| Keypoint {
            name: n.into(),
            position: [0.0; 3],
            orientation: Quaternion::IDENTITY,
        })
    }

    #[test]
    fn topology_has_33_unique_names() {
        let t = Topology::blazepose();
        assert_eq!(t.len(), KEYPOINT_COUNT);
        let unique: HashSet<_> = t.names().iter().collect();
        assert_eq!(unique.len(), KEYPOINT_COUNT);
        assert_eq!(t.names()[0], "nose");
        assert_eq!(t.names()[32], "right_foot_index");
    }

    #[test]
    fn parses_well_formed_frame_and_ignores_extras() {
        let mut v = serde_json::to_value(identity_frame()).unwrap();
        v["source"] = "mediapipe".into();
        v["keypoints"][0]["visibility"] = 0.9.into();
        let frame = parse_keypoint_frame(v.to_string().as_bytes()).unwrap();
        assert_eq!(frame, identity_frame());
    }

    #[test]
    fn distinct_error_kinds() {
        let mut short = identity_frame();
        short.keypoints.pop();
        assert!(matches!(
            parse_keypoint_frame(short.to_json().as_bytes()),
            Err(PoseError::KeypointCount { found: 32, .. })
        ));

        let mut dup = identity_frame();
        dup.keypoints[5].name = "nose".into();
        assert!(matches!(
            parse_keypoint_frame(dup.to_json().as_bytes()),
            Err(PoseError::DuplicateName(n)) if n == "nose"
        ));

        let mut skew = identity_frame();
        skew.keypoints[3].orientation.w = 1.01;
        assert!(matches!(
            parse_keypoint_frame(skew.to_json().as_bytes()),
            Err(PoseError::NonUnitQuaternion { .. })
        ));

        assert!(matches!(
            parse_keypoint_frame(b"{\"tick\": 1, \"keypoints\": ["),
            Err(PoseError::Malformed(_))
        ));
    }

    #[test]
    fn identity_pose_maps_to_identity_bones() {
        let skel = skeleton_from_topology(Topology::blazepose());
        let bones = map_to_avatar(&identity_frame(), &skel).unwrap();
        assert_eq!(bones.len(), KEYPOINT_COUNT);
        for (b, name) in bones.iter().zip(Topology::blazepose().names()) {
            assert_eq!(*b, BoneTransform::identity(name.as_str()));
        }
    }

    #[test]
    fn renamed_keypoint_is_reported() {
        let mut frame = identity_frame();
        frame.keypoints[0].name = "snout".into();
        let skel = skeleton_from_topology(Topology::blazepose());
        assert!(matches!(
            map_to_avatar(&frame, &skel),
            Err(PoseError::MissingKeypoint { keypoint, .. }) if keypoint == "nose"
        ));
    }

    #[test]
    fn optional_bone_falls_back_to_identity() {
        let skel = vec![
            BoneBinding {
                bone: "head".into(),
                keypoint: "nose".into(),
                optional: false,
            },
            BoneBinding {
                bone: "tail".into(),
                keypoint: "tail_tip".into(),
                optional: true,
            },
        ];
        let frame = frame_with(|i, n| Keypoint {
            name: n.into(),
            position: [i as f64, 1.0, 2.0],
            orientation: Quaternion::IDENTITY,
        });
        let bones = map_to_avatar(&frame, &skel).unwrap();
        assert_eq!(bones[0].position, [0.0, 1.0, 2.0]);
        assert_eq!(bones[0].bone, "head");
        assert_eq!(bones[1], BoneTransform::identity("tail"));
    }
}
