use crate::error::{Error, Result};
use crate::geom3d::Vec3;

/// One model joint as declared in a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDef {
    pub name: String,
    pub parent: Option<usize>,
    pub position: Vec3,
}

/// One keypoint of the regressor skeleton and the model joint it drives.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointDef {
    pub name: String,
    pub parent: Option<usize>,
    pub joint: Option<usize>,
}

/// Joint hierarchy of the body model together with the keypoint skeleton and
/// the keypoint→joint map that reorders keypoint rotations into model joints.
#[derive(Debug, Clone)]
pub struct KinematicTree {
    joint_names: Vec<String>,
    joint_parents: Vec<Option<usize>>,
    joint_children: Vec<Vec<usize>>,
    rest_joints: Vec<Vec3>,
    keypoint_names: Vec<String>,
    keypoint_parents: Vec<Option<usize>>,
    keypoint_children: Vec<Vec<usize>>,
    keypoint_order: Vec<usize>,
    keypoint_joint: Vec<Option<usize>>,
    joint_keypoint: Vec<Option<usize>>,
}

fn children_of(parents: &[Option<usize>]) -> Vec<Vec<usize>> {
    let mut children = vec![Vec::new(); parents.len()];
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }
    children
}

/// Orders nodes so that every parent precedes its children. Fails on cycles,
/// on out-of-range parents, and on anything but exactly one root.
pub(crate) fn topological_order(parents: &[Option<usize>], what: &str) -> Result<Vec<usize>> {
    let n = parents.len();
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            if *p >= n {
                return Err(Error::InvalidSpec(format!("{what} {i} has out-of-range parent {p}")));
            }
            if *p == i {
                return Err(Error::InvalidSpec(format!("{what} {i} is its own parent")));
            }
        }
    }
    let roots: Vec<usize> = (0..n).filter(|i| parents[*i].is_none()).collect();
    if roots.len() != 1 {
        return Err(Error::InvalidSpec(format!(
            "{what} hierarchy needs exactly one root, found {}",
            roots.len()
        )));
    }
    let children = children_of(parents);
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![roots[0]];
    while let Some(i) = stack.pop() {
        order.push(i);
        stack.extend(children[i].iter().rev());
    }
    if order.len() != n {
        return Err(Error::InvalidSpec(format!(
            "{what} hierarchy contains a cycle or is disconnected"
        )));
    }
    Ok(order)
}

impl KinematicTree {
    pub fn new(joints: Vec<JointDef>, keypoints: Vec<KeypointDef>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidSpec("model has no joints".into()));
        }
        let joint_parents: Vec<Option<usize>> = joints.iter().map(|j| j.parent).collect();
        topological_order(&joint_parents, "joint")?;
        for (i, p) in joint_parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= i {
                    return Err(Error::InvalidSpec(format!(
                        "joint {i} ({}) must come after its parent {p}",
                        joints[i].name
                    )));
                }
            }
        }
        if joints.iter().any(|j| !j.position.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidSpec("non-finite joint position".into()));
        }

        if keypoints.is_empty() {
            return Err(Error::InvalidSpec("model has no keypoints".into()));
        }
        let keypoint_parents: Vec<Option<usize>> = keypoints.iter().map(|k| k.parent).collect();
        let keypoint_order = topological_order(&keypoint_parents, "keypoint")?;
        let mut joint_keypoint = vec![None; joints.len()];
        for (k, kp) in keypoints.iter().enumerate() {
            if let Some(j) = kp.joint {
                if j >= joints.len() {
                    return Err(Error::InvalidSpec(format!(
                        "keypoint {} maps to missing joint {j}",
                        kp.name
                    )));
                }
                if let Some(other) = joint_keypoint[j] {
                    return Err(Error::InvalidSpec(format!(
                        "joint {} is mapped by both keypoint {other} and keypoint {k}",
                        joints[j].name
                    )));
                }
                joint_keypoint[j] = Some(k);
            }
        }
        check_unique_names(joints.iter().map(|j| j.name.as_str()), "joint")?;
        check_unique_names(keypoints.iter().map(|k| k.name.as_str()), "keypoint")?;

        Ok(Self {
            joint_children: children_of(&joint_parents),
            joint_names: joints.iter().map(|j| j.name.clone()).collect(),
            rest_joints: joints.iter().map(|j| j.position).collect(),
            joint_parents,
            keypoint_children: children_of(&keypoint_parents),
            keypoint_names: keypoints.iter().map(|k| k.name.clone()).collect(),
            keypoint_joint: keypoints.iter().map(|k| k.joint).collect(),
            keypoint_parents,
            keypoint_order,
            joint_keypoint,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_name(&self, j: usize) -> &str {
        &self.joint_names[j]
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_parent(&self, j: usize) -> Option<usize> {
        self.joint_parents[j]
    }

    pub fn joint_children(&self, j: usize) -> &[usize] {
        &self.joint_children[j]
    }

    pub fn rest_joint(&self, j: usize) -> Vec3 {
        self.rest_joints[j]
    }

    pub fn rest_joints(&self) -> &[Vec3] {
        &self.rest_joints
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn keypoint_name(&self, k: usize) -> &str {
        &self.keypoint_names[k]
    }

    pub fn keypoint_names(&self) -> &[String] {
        &self.keypoint_names
    }

    pub fn keypoint_index(&self, name: &str) -> Option<usize> {
        self.keypoint_names.iter().position(|n| n == name)
    }

    pub fn keypoint_parent(&self, k: usize) -> Option<usize> {
        self.keypoint_parents[k]
    }

    pub fn keypoint_children(&self, k: usize) -> &[usize] {
        &self.keypoint_children[k]
    }

    /// Keypoints ordered so that parents precede their children.
    pub fn keypoint_order(&self) -> &[usize] {
        &self.keypoint_order
    }

    pub fn keypoint_root(&self) -> usize {
        self.keypoint_order[0]
    }

    /// Model joint driven by keypoint `k`, if any.
    pub fn keypoint_joint(&self, k: usize) -> Option<usize> {
        self.keypoint_joint[k]
    }

    /// Keypoint driving model joint `j`, if any.
    pub fn joint_keypoint(&self, j: usize) -> Option<usize> {
        self.joint_keypoint[j]
    }

    /// The keypoint→joint map as ordered `(keypoint, joint)` pairs.
    pub fn keypoint_map(&self) -> Vec<(usize, Option<usize>)> {
        self.keypoint_joint.iter().copied().enumerate().collect()
    }

    pub(crate) fn joint_defs(&self) -> Vec<JointDef> {
        (0..self.joint_count())
            .map(|j| JointDef {
                name: self.joint_names[j].clone(),
                parent: self.joint_parents[j],
                position: self.rest_joints[j],
            })
            .collect()
    }

    pub(crate) fn keypoint_defs(&self) -> Vec<KeypointDef> {
        (0..self.keypoint_count())
            .map(|k| KeypointDef {
                name: self.keypoint_names[k].clone(),
                parent: self.keypoint_parents[k],
                joint: self.keypoint_joint[k],
            })
            .collect()
    }
}

fn check_unique_names<'a>(names: impl Iterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::InvalidSpec(format!("duplicate {what} name `{n}`")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint(name: &str, parent: Option<usize>) -> JointDef {
        JointDef {
            name: name.into(),
            parent,
            position: Vec3::zeros(),
        }
    }

    fn kp(name: &str, parent: Option<usize>, joint: Option<usize>) -> KeypointDef {
        KeypointDef {
            name: name.into(),
            parent,
            joint,
        }
    }

    #[test]
    fn builds_small_tree() {
        let tree = KinematicTree::new(
            vec![joint("root", None), joint("a", Some(0)), joint("b", Some(1))],
            vec![kp("k0", None, Some(0)), kp("k2", Some(2), None), kp("k1", Some(0), Some(1))],
        )
        .unwrap();
        assert_eq!(tree.joint_children(0), &[1]);
        assert_eq!(tree.keypoint_children(2), &[1]);
        let order = tree.keypoint_order();
        let pos = |k| order.iter().position(|x| *x == k).unwrap();
        assert!(pos(2) < pos(1));
        assert_eq!(tree.joint_keypoint(1), Some(2));
        assert_eq!(tree.joint_keypoint(2), None);
    }

    #[test]
    fn rejects_cycles_and_bad_roots() {
        let r = KinematicTree::new(
            vec![joint("root", None)],
            vec![kp("a", None, None), kp("b", Some(2), None), kp("c", Some(1), None)],
        );
        assert!(matches!(r, Err(Error::InvalidSpec(_))));
        let r = KinematicTree::new(vec![joint("a", None), joint("b", None)], vec![kp("k", None, None)]);
        assert!(matches!(r, Err(Error::InvalidSpec(_))));
        let r = KinematicTree::new(vec![joint("a", Some(1)), joint("b", None)], vec![kp("k", None, None)]);
        assert!(matches!(r, Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn rejects_non_injective_map() {
        let r = KinematicTree::new(
            vec![joint("root", None)],
            vec![kp("a", None, Some(0)), kp("b", Some(0), Some(0))],
        );
        assert!(matches!(r, Err(Error::InvalidSpec(_))));
    }
}
