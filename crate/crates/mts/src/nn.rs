//! Network components: two MLP feature extractors, the shared multi-binary
//! classifier, the plain and extended classifiers, the domain discriminator,
//! the domain-separating heads, and the momentum-SGD optimizer.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, ParamId};
use crate::error::{MtsError, Result};
use crate::matrix::Matrix;

/// The seven trainable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    F1,
    Y1,
    C,
    F2,
    Y2,
    D,
    Ds,
}

impl GroupId {
    pub const ALL: [GroupId; 7] = [
        GroupId::F1,
        GroupId::Y1,
        GroupId::C,
        GroupId::F2,
        GroupId::Y2,
        GroupId::D,
        GroupId::Ds,
    ];

    fn index(self) -> u32 {
        match self {
            GroupId::F1 => 0,
            GroupId::Y1 => 1,
            GroupId::C => 2,
            GroupId::F2 => 3,
            GroupId::Y2 => 4,
            GroupId::D => 5,
            GroupId::Ds => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupId::F1 => "f1",
            GroupId::Y1 => "y1",
            GroupId::C => "c",
            GroupId::F2 => "f2",
            GroupId::Y2 => "y2",
            GroupId::D => "d",
            GroupId::Ds => "ds",
        }
    }

    pub fn from_name(s: &str) -> Result<GroupId> {
        Ok(match s {
            "f1" => GroupId::F1,
            "y1" => GroupId::Y1,
            "c" => GroupId::C,
            "f2" => GroupId::F2,
            "y2" => GroupId::Y2,
            "d" => GroupId::D,
            "ds" => GroupId::Ds,
            _ => return Err(MtsError::Data(format!("unknown group id {s:?}"))),
        })
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamPart {
    Weight,
    Bias,
}

pub fn param_id(group: GroupId, layer: usize, part: ParamPart) -> ParamId {
    let p = match part {
        ParamPart::Weight => 0,
        ParamPart::Bias => 1,
    };
    ParamId(group.index() * 64 + (layer as u32) * 2 + p)
}

/// One affine layer plus its momentum velocity buffers.
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Matrix,
    pub b: Matrix,
    pub vw: Matrix,
    pub vb: Matrix,
}

impl Layer {
    fn new(w: Matrix, b: Matrix) -> Layer {
        let vw = Matrix::zeros(w.rows(), w.cols());
        let vb = Matrix::zeros(b.rows(), b.cols());
        Layer { w, b, vw, vb }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub id: GroupId,
    pub layers: Vec<Layer>,
}

/// Weighting mode for the unknown-class term of the extended classifier loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownWeightMode {
    /// Multiply the unknown CE by w_j, as the loss formula literally reads.
    LiteralW,
    /// Multiply by 1 - w_j, emphasising the most dissimilar sample.
    OneMinusW,
}

impl UnknownWeightMode {
    pub fn name(self) -> &'static str {
        match self {
            UnknownWeightMode::LiteralW => "literal_w",
            UnknownWeightMode::OneMinusW => "one_minus_w",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "literal_w" => UnknownWeightMode::LiteralW,
            "one_minus_w" => UnknownWeightMode::OneMinusW,
            _ => return Err(MtsError::Config(format!("unknown_weight_mode {s:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub unknown_weight_mode: UnknownWeightMode,
    /// Multiply lr by 0.1 at epochs 150 and 225 when set.
    pub lr_decay: bool,
    /// Max-probability threshold used by the source-only baseline.
    pub tau: f64,
    /// Extractor hidden width.
    pub hidden_dim: usize,
    /// Extractor output width m.
    pub feat_dim: usize,
    /// Discriminator hidden width.
    pub disc_hidden_dim: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 0.8,
            beta: 0.5,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 300,
            seed: 7,
            unknown_weight_mode: UnknownWeightMode::OneMinusW,
            lr_decay: false,
            tau: 0.5,
            hidden_dim: 32,
            feat_dim: 16,
            disc_hidden_dim: 16,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        // `< 0 || NaN` so that NaN fails validation too.
        if self.alpha < 0.0 || self.alpha.is_nan() {
            return Err(MtsError::Config("alpha must be >= 0".into()));
        }
        if self.beta < 0.0 || self.beta.is_nan() {
            return Err(MtsError::Config("beta must be >= 0".into()));
        }
        if self.lr < 0.0 || self.lr.is_nan() {
            return Err(MtsError::Config("lr must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(MtsError::Config("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Layer widths of the bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetDims {
    /// Input feature dimension d.
    pub input: usize,
    /// Extractor hidden width.
    pub hidden: usize,
    /// Extractor output width m.
    pub feat: usize,
    /// Discriminator hidden width.
    pub disc_hidden: usize,
    /// Number of known classes K.
    pub k: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        NetDims { input: 2, hidden: 32, feat: 16, disc_hidden: 16, k: 3 }
    }
}

/// All trainable parameters. The multi-binary classifier `c` is one physical
/// group used on features from either extractor. With `shared_extractor` set
/// (the "w/o s" ablation), `F2` aliases the `F1` storage.
#[derive(Debug, Clone)]
pub struct NetworkBundle {
    pub dims: NetDims,
    f1: ParamGroup,
    y1: ParamGroup,
    c: ParamGroup,
    f2: ParamGroup,
    y2: ParamGroup,
    d: ParamGroup,
    ds: ParamGroup,
    pub shared_extractor: bool,
}

fn glorot_layer(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Layer {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut w = Matrix::zeros(fan_in, fan_out);
    for i in 0..fan_in {
        for j in 0..fan_out {
            w.set(i, j, rng.gen_range(-bound..bound));
        }
    }
    Layer::new(w, Matrix::zeros(1, fan_out))
}

impl NetworkBundle {
    pub fn new(dims: NetDims, seed: u64) -> NetworkBundle {
        Self::with_sharing(dims, seed, false)
    }

    pub fn with_sharing(dims: NetDims, seed: u64, shared_extractor: bool) -> NetworkBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = |rng: &mut ChaCha8Rng, id: GroupId| ParamGroup {
            id,
            layers: vec![
                glorot_layer(rng, dims.input, dims.hidden),
                glorot_layer(rng, dims.hidden, dims.feat),
            ],
        };
        let head = |rng: &mut ChaCha8Rng, id: GroupId, out: usize| ParamGroup {
            id,
            layers: vec![glorot_layer(rng, dims.feat, out)],
        };
        let f1 = extractor(&mut rng, GroupId::F1);
        let y1 = head(&mut rng, GroupId::Y1, dims.k);
        let c = head(&mut rng, GroupId::C, dims.k);
        let f2 = extractor(&mut rng, GroupId::F2);
        let y2 = head(&mut rng, GroupId::Y2, dims.k + 1);
        let d = ParamGroup {
            id: GroupId::D,
            layers: vec![
                glorot_layer(&mut rng, dims.feat, dims.disc_hidden),
                glorot_layer(&mut rng, dims.disc_hidden, 1),
            ],
        };
        let ds = head(&mut rng, GroupId::Ds, 3);
        NetworkBundle { dims, f1, y1, c, f2, y2, d, ds, shared_extractor }
    }

    /// Zero-parameter bundle; handy for hand-value tests.
    pub fn zeroed(dims: NetDims) -> NetworkBundle {
        let mut b = NetworkBundle::new(dims, 0);
        for gid in GroupId::ALL {
            for layer in &mut b.group_storage_mut(gid).layers {
                layer.w = Matrix::zeros(layer.w.rows(), layer.w.cols());
                layer.b = Matrix::zeros(layer.b.rows(), layer.b.cols());
            }
        }
        b
    }

    /// Resolves F2 to F1 when the extractors are one shared group.
    pub fn effective_group(&self, id: GroupId) -> GroupId {
        if self.shared_extractor && id == GroupId::F2 {
            GroupId::F1
        } else {
            id
        }
    }

    fn group_storage(&self, id: GroupId) -> &ParamGroup {
        match id {
            GroupId::F1 => &self.f1,
            GroupId::Y1 => &self.y1,
            GroupId::C => &self.c,
            GroupId::F2 => &self.f2,
            GroupId::Y2 => &self.y2,
            GroupId::D => &self.d,
            GroupId::Ds => &self.ds,
        }
    }

    fn group_storage_mut(&mut self, id: GroupId) -> &mut ParamGroup {
        match id {
            GroupId::F1 => &mut self.f1,
            GroupId::Y1 => &mut self.y1,
            GroupId::C => &mut self.c,
            GroupId::F2 => &mut self.f2,
            GroupId::Y2 => &mut self.y2,
            GroupId::D => &mut self.d,
            GroupId::Ds => &mut self.ds,
        }
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup {
        self.group_storage(self.effective_group(id))
    }

    pub fn group_mut(&mut self, id: GroupId) -> &mut ParamGroup {
        let eff = self.effective_group(id);
        self.group_storage_mut(eff)
    }

    /// FNV-1a hash of a group's parameter bits; update-isolation oracle.
    pub fn group_hash(&self, id: GroupId) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for layer in &self.group(id).layers {
            for &v in layer.w.as_slice() {
                eat(v);
            }
            for &v in layer.b.as_slice() {
                eat(v);
            }
        }
        h
    }

    /// Gradient-free extractor forward: relu(x W1 + b1) W2 + b2 through relu.
    pub fn features(&self, extractor: GroupId, x: &Matrix) -> Result<Matrix> {
        if extractor != GroupId::F1 && extractor != GroupId::F2 {
            return Err(MtsError::Contract(format!("{extractor} is not an extractor")));
        }
        if x.cols() != self.dims.input {
            return Err(MtsError::Dimension(format!(
                "features: input width {} expected {}",
                x.cols(),
                self.dims.input
            )));
        }
        let mut h = x.clone();
        for layer in &self.group(extractor).layers {
            h = h.matmul(&layer.w)?.add_row_broadcast(&layer.b)?.map(|v| v.max(0.0));
        }
        Ok(h)
    }

    /// Gradient-free head forward yielding probabilities.
    pub fn head_forward(&self, head: GroupId, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.dims.feat {
            return Err(MtsError::Dimension(format!(
                "head_forward: feature width {} expected {}",
                features.cols(),
                self.dims.feat
            )));
        }
        let group = self.group(head);
        match head {
            GroupId::Y1 | GroupId::Y2 => {
                let l = &group.layers[0];
                let z = features.matmul(&l.w)?.add_row_broadcast(&l.b)?;
                let mut out = Matrix::zeros(z.rows(), z.cols());
                for i in 0..z.rows() {
                    let row = z.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        out.set(i, j, e / sum);
                    }
                }
                Ok(out)
            }
            GroupId::C | GroupId::Ds => {
                let l = &group.layers[0];
                let z = features.matmul(&l.w)?.add_row_broadcast(&l.b)?;
                Ok(z.map(crate::autograd::sigmoid_scalar))
            }
            GroupId::D => {
                let mut h = features.clone();
                let n = group.layers.len();
                for (i, layer) in group.layers.iter().enumerate() {
                    h = h.matmul(&layer.w)?.add_row_broadcast(&layer.b)?;
                    if i + 1 < n {
                        h = h.map(|v| v.max(0.0));
                    }
                }
                Ok(h.map(crate::autograd::sigmoid_scalar))
            }
            GroupId::F1 | GroupId::F2 => {
                Err(MtsError::Contract(format!("{head} is not a head")))
            }
        }
    }

    /// Inserts a group's parameters into a graph and returns per-layer
    /// (weight node, bias node) pairs. Shared groups get their effective key
    /// so gradients from every use site accumulate into one parameter.
    fn param_nodes(&self, g: &mut Graph, id: GroupId) -> Vec<(NodeId, NodeId)> {
        let eff = self.effective_group(id);
        self.group(id)
            .layers
            .iter()
            .enumerate()
            .map(|(li, layer)| {
                let w = g.param(layer.w.clone(), param_id(eff, li, ParamPart::Weight));
                let b = g.param(layer.b.clone(), param_id(eff, li, ParamPart::Bias));
                (w, b)
            })
            .collect()
    }

    /// Graph extractor forward; values bitwise-match `features`.
    pub fn features_graph(&self, g: &mut Graph, extractor: GroupId, x: NodeId) -> Result<NodeId> {
        if extractor != GroupId::F1 && extractor != GroupId::F2 {
            return Err(MtsError::Contract(format!("{extractor} is not an extractor")));
        }
        let params = self.param_nodes(g, extractor);
        let mut h = x;
        for (w, b) in params {
            let z = g.matmul(h, w)?;
            let zb = g.add_row_broadcast(z, b)?;
            h = g.relu(zb);
        }
        Ok(h)
    }

    /// Graph head forward returning logits (pre-sigmoid / pre-softmax).
    pub fn head_logits_graph(&self, g: &mut Graph, head: GroupId, features: NodeId) -> Result<NodeId> {
        let params = self.param_nodes(g, head);
        match head {
            GroupId::Y1 | GroupId::Y2 | GroupId::C | GroupId::Ds => {
                let (w, b) = params[0];
                let z = g.matmul(features, w)?;
                g.add_row_broadcast(z, b)
            }
            GroupId::D => {
                let mut h = features;
                let n = params.len();
                for (i, (w, b)) in params.into_iter().enumerate() {
                    let z = g.matmul(h, w)?;
                    h = g.add_row_broadcast(z, b)?;
                    if i + 1 < n {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
            GroupId::F1 | GroupId::F2 => {
                Err(MtsError::Contract(format!("{head} is not a head")))
            }
        }
    }

    /// Parameter ids covered by a set of groups, for `backward`'s wrt set.
    pub fn param_ids(&self, groups: &[GroupId]) -> std::collections::HashSet<ParamId> {
        let mut out = std::collections::HashSet::new();
        for &gid in groups {
            let eff = self.effective_group(gid);
            for li in 0..self.group(gid).layers.len() {
                out.insert(param_id(eff, li, ParamPart::Weight));
                out.insert(param_id(eff, li, ParamPart::Bias));
            }
        }
        out
    }

    /// One momentum-SGD step over exactly `groups`:
    /// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    pub fn sgd_momentum_step(
        &mut self,
        groups: &[GroupId],
        grads: &HashMap<ParamId, Matrix>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let mut done = std::collections::HashSet::new();
        for &gid in groups {
            let eff = self.effective_group(gid);
            if !done.insert(eff) {
                continue;
            }
            let nlayers = self.group(gid).layers.len();
            for li in 0..nlayers {
                for part in [ParamPart::Weight, ParamPart::Bias] {
                    let pid = param_id(eff, li, part);
                    let layer = &mut self.group_storage_mut(eff).layers[li];
                    let (p, v) = match part {
                        ParamPart::Weight => (&mut layer.w, &mut layer.vw),
                        ParamPart::Bias => (&mut layer.b, &mut layer.vb),
                    };
                    let zero;
                    let grad = match grads.get(&pid) {
                        Some(m) => {
                            if m.shape() != p.shape() {
                                return Err(MtsError::Dimension(format!(
                                    "sgd step: grad {:?} vs param {:?} for {}",
                                    m.shape(),
                                    p.shape(),
                                    pid.0
                                )));
                            }
                            m
                        }
                        None => {
                            zero = Matrix::zeros(p.rows(), p.cols());
                            &zero
                        }
                    };
                    let decayed = grad.add(&p.scale(weight_decay))?;
                    *v = v.scale(momentum).add(&decayed)?;
                    *p = p.sub(&v.scale(lr))?;
                }
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("mts-checkpoint v1\n");
        out.push_str(&format!(
            "dims {} {} {} {} {} shared {}\n",
            self.dims.input,
            self.dims.hidden,
            self.dims.feat,
            self.dims.disc_hidden,
            self.dims.k,
            self.shared_extractor as u8
        ));
        for gid in GroupId::ALL {
            for (li, layer) in self.group_storage(gid).layers.iter().enumerate() {
                for (tag, m) in [("w", &layer.w), ("b", &layer.b)] {
                    out.push_str(&format!("{} {} {} {} {}", gid, li, tag, m.rows(), m.cols()));
                    for &v in m.as_slice() {
                        out.push(' ');
                        // Display for f64 is shortest round-trip; exact reload.
                        out.push_str(&format!("{v}"));
                    }
                    out.push('\n');
                }
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<NetworkBundle> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines
            .next()
            .ok_or_else(|| MtsError::Data("empty checkpoint".into()))?;
        if magic.trim() != "mts-checkpoint v1" {
            return Err(MtsError::Data("bad checkpoint magic".into()));
        }
        let (_, dims_line) = lines
            .next()
            .ok_or_else(|| MtsError::Data("missing dims line".into()))?;
        let tok: Vec<&str> = dims_line.split_whitespace().collect();
        if tok.len() != 8 || tok[0] != "dims" || tok[6] != "shared" {
            return Err(MtsError::Data("malformed dims line".into()));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| MtsError::Data(format!("bad integer {s:?}")))
        };
        let dims = NetDims {
            input: parse(tok[1])?,
            hidden: parse(tok[2])?,
            feat: parse(tok[3])?,
            disc_hidden: parse(tok[4])?,
            k: parse(tok[5])?,
        };
        let shared = tok[7] == "1";
        let mut bundle = NetworkBundle::with_sharing(dims, 0, shared);
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < 5 {
                return Err(MtsError::Data(format!("line {}: malformed entry", lineno + 1)));
            }
            let gid = GroupId::from_name(tok[0])?;
            let li = parse(tok[1])?;
            let rows = parse(tok[3])?;
            let cols = parse(tok[4])?;
            let vals: Vec<f64> = tok[5..]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| MtsError::Data(format!("line {}: bad value {s:?}", lineno + 1)))
                })
                .collect::<Result<_>>()?;
            let m = Matrix::from_vec(rows, cols, vals)
                .map_err(|e| MtsError::Data(format!("line {}: {e}", lineno + 1)))?;
            let group = bundle.group_storage_mut(gid);
            let layer = group
                .layers
                .get_mut(li)
                .ok_or_else(|| MtsError::Data(format!("line {}: layer {li} out of range", lineno + 1)))?;
            match tok[2] {
                "w" => layer.w = m,
                "b" => layer.b = m,
                other => return Err(MtsError::Data(format!("line {}: bad part {other:?}", lineno + 1))),
            }
        }
        // velocities reset on load
        for gid in GroupId::ALL {
            for layer in &mut bundle.group_storage_mut(gid).layers {
                layer.vw = Matrix::zeros(layer.w.rows(), layer.w.cols());
                layer.vb = Matrix::zeros(layer.b.rows(), layer.b.cols());
            }
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> NetDims {
        NetDims { input: 2, hidden: 4, feat: 3, disc_hidden: 4, k: 3 }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let b = NetworkBundle::zeroed(dims());
        let x = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let f = b.features(GroupId::F1, &x).unwrap();
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_identity_layer() {
        let mut b = NetworkBundle::zeroed(NetDims { input: 2, hidden: 2, feat: 2, disc_hidden: 2, k: 2 });
        {
            let g = b.group_mut(GroupId::F1);
            // identity first layer, identity second layer
            for layer in &mut g.layers {
                let mut w = Matrix::zeros(2, 2);
                w.set(0, 0, 1.0);
                w.set(1, 1, 1.0);
                layer.w = w;
            }
        }
        let x = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let f = b.features(GroupId::F1, &x).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_param_heads_are_uniform() {
        let b = NetworkBundle::zeroed(dims());
        let feats = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let y1 = b.head_forward(GroupId::Y1, &feats).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((y1.get(i, j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let d = b.head_forward(GroupId::D, &feats).unwrap();
        assert!(d.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn probability_outputs_in_open_interval() {
        let b = NetworkBundle::new(dims(), 3);
        let feats = Matrix::from_vec(2, 3, vec![10.0, -4.0, 2.0, 0.0, 7.0, -1.0]).unwrap();
        for head in [GroupId::Y1, GroupId::Y2, GroupId::C, GroupId::D, GroupId::Ds] {
            let p = b.head_forward(head, &feats).unwrap();
            assert!(p.as_slice().iter().all(|&v| v > 0.0 && v < 1.0), "{head}");
        }
        let y2 = b.head_forward(GroupId::Y2, &feats).unwrap();
        for i in 0..2 {
            let s: f64 = y2.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sgd_plain_step() {
        let mut b = NetworkBundle::zeroed(dims());
        b.group_mut(GroupId::Y1).layers[0].w.set(0, 0, 1.0);
        let mut grads = HashMap::new();
        let mut gm = Matrix::zeros(3, 3);
        gm.set(0, 0, 0.5);
        grads.insert(param_id(GroupId::Y1, 0, ParamPart::Weight), gm);
        b.sgd_momentum_step(&[GroupId::Y1], &grads, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(b.group(GroupId::Y1).layers[0].w.get(0, 0), 0.5);
    }

    #[test]
    fn sgd_zero_grad_zero_wd_is_identity() {
        let mut b = NetworkBundle::new(dims(), 5);
        let before = b.group_hash(GroupId::Y1);
        let grads = HashMap::new();
        b.sgd_momentum_step(&[GroupId::Y1], &grads, 0.1, 0.9, 0.0).unwrap();
        b.sgd_momentum_step(&[GroupId::Y1], &grads, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(b.group_hash(GroupId::Y1), before);
        assert!(b.group(GroupId::Y1).layers[0].vw.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_momentum_two_step_expansion() {
        // constant grad g, momentum 0.9: delta after two steps = lr*(1+1.9)*g
        let mut b = NetworkBundle::zeroed(dims());
        let lr = 0.1;
        let g = 2.0;
        let mut grads = HashMap::new();
        let mut gm = Matrix::zeros(3, 3);
        gm.set(0, 0, g);
        grads.insert(param_id(GroupId::Y1, 0, ParamPart::Weight), gm);
        b.sgd_momentum_step(&[GroupId::Y1], &grads, lr, 0.9, 0.0).unwrap();
        b.sgd_momentum_step(&[GroupId::Y1], &grads, lr, 0.9, 0.0).unwrap();
        let got = b.group(GroupId::Y1).layers[0].w.get(0, 0);
        assert!((got + lr * (1.0 + 1.9) * g).abs() < 1e-12);
    }

    #[test]
    fn update_isolation() {
        let mut b = NetworkBundle::new(dims(), 11);
        let untouched: Vec<u64> = [GroupId::F2, GroupId::Y2, GroupId::D, GroupId::Ds]
            .iter()
            .map(|&g| b.group_hash(g))
            .collect();
        let mut grads = HashMap::new();
        grads.insert(
            param_id(GroupId::F1, 0, ParamPart::Weight),
            Matrix::zeros(2, 4).map(|_| 0.3),
        );
        b.sgd_momentum_step(&[GroupId::F1, GroupId::Y1, GroupId::C], &grads, 0.1, 0.9, 5e-4)
            .unwrap();
        let after: Vec<u64> = [GroupId::F2, GroupId::Y2, GroupId::D, GroupId::Ds]
            .iter()
            .map(|&g| b.group_hash(g))
            .collect();
        assert_eq!(untouched, after);
    }

    #[test]
    fn shared_c_aliasing() {
        let mut b = NetworkBundle::new(dims(), 13);
        let x = Matrix::from_vec(1, 2, vec![0.7, -0.2]).unwrap();
        let f2 = b.features(GroupId::F2, &x).unwrap();
        let before = b.head_forward(GroupId::C, &f2).unwrap();
        // mutate theta_c "via the SSN view" (there is only one instance)
        b.group_mut(GroupId::C).layers[0].b.set(0, 0, 9.0);
        let after = b.head_forward(GroupId::C, &f2).unwrap();
        assert_ne!(before, after);
        // and the DMN view sees exactly the same parameters
        let again = b.head_forward(GroupId::C, &f2).unwrap();
        assert_eq!(after, again);
    }

    #[test]
    fn shared_extractor_ablation_aliases_f2_to_f1() {
        let b = NetworkBundle::with_sharing(dims(), 17, true);
        let x = Matrix::from_vec(1, 2, vec![0.3, 0.9]).unwrap();
        let a = b.features(GroupId::F1, &x).unwrap();
        let c = b.features(GroupId::F2, &x).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn graph_forward_matches_nograd_forward() {
        let b = NetworkBundle::new(dims(), 23);
        let x = Matrix::from_vec(2, 2, vec![0.2, -1.4, 3.0, 0.7]).unwrap();
        let plain = b.features(GroupId::F1, &x).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x);
        let fe = b.features_graph(&mut g, GroupId::F1, xn).unwrap();
        assert_eq!(plain.as_slice(), g.value(fe).as_slice());
    }

    #[test]
    fn checkpoint_roundtrip_exact() {
        let b = NetworkBundle::new(dims(), 29);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        b.save_checkpoint(&path).unwrap();
        let loaded = NetworkBundle::load_checkpoint(&path).unwrap();
        for gid in GroupId::ALL {
            assert_eq!(b.group_hash(gid), loaded.group_hash(gid), "{gid}");
        }
    }
}
