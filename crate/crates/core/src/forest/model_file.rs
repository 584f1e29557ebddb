//! Versioned binary model container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "NFPT" | version u32 | n_trees u32 | mtry u32 | min_leaf u32
//! | max_depth u32 (0 = unlimited) | bootstrap_fraction f64 | seed u64
//! | n_labels u32 | n_labels × (len u32, UTF-8 bytes)
//! | n_trees × (node_count u32, node_count × node)
//! | FNV-1a 64 checksum of every preceding byte
//!
//! node = 0x01 feature u8 threshold f64      (split; preorder, left child next)
//!      | 0x02 n u32 n × (class u32, count u32) (leaf)
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{DecisionTree, ForestParams, RandomForest, TreeNode, N_FEATURES};

pub const MAGIC: [u8; 4] = *b"NFPT";
pub const FORMAT_VERSION: u32 = 1;

const TAG_SPLIT: u8 = 0x01;
const TAG_LEAF: u8 = 0x02;
const MIN_NODE_BYTES: usize = 10;

#[derive(Debug, Error)]
pub enum ModelFormatError {
    #[error("model file is empty")]
    Empty,
    #[error("model file is truncated")]
    Truncated,
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("model checksum mismatch: file is corrupted")]
    ChecksumMismatch,
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn encode_model(forest: &RandomForest) -> Vec<u8> {
    let mut out = Vec::new();
    let p = &forest.params;
    out.extend_from_slice(&MAGIC);
    for v in [
        FORMAT_VERSION,
        p.n_trees,
        p.mtry,
        p.min_leaf,
        p.max_depth.unwrap_or(0),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&p.bootstrap_fraction.to_bits().to_le_bytes());
    out.extend_from_slice(&forest.seed.to_le_bytes());
    out.extend_from_slice(&(forest.labels.len() as u32).to_le_bytes());
    for label in &forest.labels {
        out.extend_from_slice(&(label.len() as u32).to_le_bytes());
        out.extend_from_slice(label.as_bytes());
    }
    for tree in &forest.trees {
        out.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
        for node in &tree.nodes {
            match node {
                TreeNode::Split {
                    feature, threshold, ..
                } => {
                    out.push(TAG_SPLIT);
                    out.push(*feature);
                    out.extend_from_slice(&threshold.to_bits().to_le_bytes());
                }
                TreeNode::Leaf { counts } => {
                    out.push(TAG_LEAF);
                    out.extend_from_slice(&(counts.len() as u32).to_le_bytes());
                    for (class, n) in counts {
                        out.extend_from_slice(&class.to_le_bytes());
                        out.extend_from_slice(&n.to_le_bytes());
                    }
                }
            }
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFormatError> {
        let end = self.pos.checked_add(n).ok_or(ModelFormatError::Truncated)?;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or(ModelFormatError::Truncated)?;
        self.pos = end;
        Ok(bytes)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, ModelFormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelFormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelFormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A count of items at least `item_bytes` long each, checked against the
    /// bytes left so corrupt counts cannot trigger huge allocations.
    fn count(&mut self, item_bytes: usize) -> Result<usize, ModelFormatError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(item_bytes) > self.remaining() {
            return Err(ModelFormatError::Truncated);
        }
        Ok(n)
    }
}

/// Recovers `right` child links of a preorder node sequence from the
/// split/leaf pattern alone. `None` if the sequence is not exactly one tree.
fn preorder_right_links(is_split: &[bool]) -> Option<Vec<Option<u32>>> {
    let mut right = vec![None; is_split.len()];
    let mut pending: Vec<usize> = Vec::new();
    for (i, &split) in is_split.iter().enumerate() {
        if i > 0 && !is_split[i - 1] {
            let parent = pending.pop()?;
            right[parent] = Some(i as u32);
        }
        if split {
            pending.push(i);
        }
    }
    let ends_in_leaf = is_split.last().is_some_and(|s| !s);
    (pending.is_empty() && ends_in_leaf).then_some(right)
}

pub(crate) fn tree_is_well_formed(tree: &DecisionTree, n_labels: usize, min_leaf: u32) -> bool {
    let kinds: Vec<bool> = tree
        .nodes
        .iter()
        .map(|n| matches!(n, TreeNode::Split { .. }))
        .collect();
    let Some(rights) = preorder_right_links(&kinds) else {
        return false;
    };
    tree.nodes
        .iter()
        .zip(rights)
        .enumerate()
        .all(|(i, (node, r))| match node {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                (*feature as usize) < N_FEATURES
                    && !threshold.is_nan()
                    && *left as usize == i + 1
                    && Some(*right) == r
            }
            TreeNode::Leaf { counts } => {
                !counts.is_empty()
                    && counts.windows(2).all(|w| w[0].0 < w[1].0)
                    && counts
                        .iter()
                        .all(|&(c, n)| (c as usize) < n_labels && n > 0)
                    && counts.iter().map(|&(_, n)| u64::from(n)).sum::<u64>() >= u64::from(min_leaf)
            }
        })
}

fn decode_tree(cur: &mut Cursor<'_>) -> Result<DecisionTree, ModelFormatError> {
    let n_nodes = cur.count(MIN_NODE_BYTES)?;
    if n_nodes == 0 {
        return Err(ModelFormatError::Invalid("tree with no nodes".into()));
    }
    let mut nodes = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let node = match cur.u8()? {
            TAG_SPLIT => {
                let feature = cur.u8()?;
                let threshold = f64::from_bits(cur.u64()?);
                TreeNode::Split {
                    feature,
                    threshold,
                    left: i as u32 + 1,
                    right: u32::MAX,
                }
            }
            TAG_LEAF => {
                let n = cur.count(8)?;
                let counts = (0..n)
                    .map(|_| Ok((cur.u32()?, cur.u32()?)))
                    .collect::<Result<_, ModelFormatError>>()?;
                TreeNode::Leaf { counts }
            }
            tag => {
                return Err(ModelFormatError::Invalid(format!(
                    "unknown node tag {tag:#04x}"
                )))
            }
        };
        nodes.push(node);
    }
    let kinds: Vec<bool> = nodes
        .iter()
        .map(|n| matches!(n, TreeNode::Split { .. }))
        .collect();
    let rights = preorder_right_links(&kinds)
        .ok_or_else(|| ModelFormatError::Invalid("node list is not a preorder tree".into()))?;
    for (node, r) in nodes.iter_mut().zip(rights) {
        if let (TreeNode::Split { right, .. }, Some(r)) = (node, r) {
            *right = r;
        }
    }
    Ok(DecisionTree { nodes })
}

pub fn decode_model(bytes: &[u8]) -> Result<RandomForest, ModelFormatError> {
    if bytes.is_empty() {
        return Err(ModelFormatError::Empty);
    }
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelFormatError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(ModelFormatError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(ModelFormatError::ChecksumMismatch);
    }
    let mut cur = Cursor {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelFormatError::VersionMismatch { found: version });
    }
    let n_trees = cur.u32()?;
    let mtry = cur.u32()?;
    let min_leaf = cur.u32()?;
    let max_depth = match cur.u32()? {
        0 => None,
        d => Some(d),
    };
    let bootstrap_fraction = f64::from_bits(cur.u64()?);
    let seed = cur.u64()?;
    let params = ForestParams {
        n_trees,
        mtry,
        min_leaf,
        max_depth,
        bootstrap_fraction,
    };

    let n_labels = cur.count(4)?;
    let mut labels = Vec::with_capacity(n_labels);
    for _ in 0..n_labels {
        let len = cur.count(1)?;
        let text = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| ModelFormatError::Invalid("label is not UTF-8".into()))?;
        if text.is_empty() {
            return Err(ModelFormatError::Invalid("empty label".into()));
        }
        labels.push(text.to_owned());
    }

    if (n_trees as usize).saturating_mul(4 + MIN_NODE_BYTES) > cur.remaining() {
        return Err(ModelFormatError::Truncated);
    }
    let trees = (0..n_trees)
        .map(|_| decode_tree(&mut cur))
        .collect::<Result<Vec<_>, _>>()?;
    if cur.remaining() != 0 {
        return Err(ModelFormatError::Invalid(format!(
            "{} unexpected trailing bytes",
            cur.remaining()
        )));
    }
    RandomForest::from_parts(params, seed, labels, trees)
        .map_err(|e| ModelFormatError::Invalid(e.to_string()))
}

pub fn save_model(forest: &RandomForest, path: impl AsRef<Path>) -> Result<(), ModelFormatError> {
    fs::write(path, encode_model(forest))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RandomForest, ModelFormatError> {
    decode_model(&fs::read(path)?)
}
