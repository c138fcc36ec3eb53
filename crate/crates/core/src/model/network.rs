//! Topology builder and forward evaluation.

use std::collections::BTreeMap;

use super::config::{Attention, Family, TopologyConfig};
use super::params::{Group, ParamId, ParamStore};
use super::tcl::{self, AttnVars, Fusion, QueryKey, TclVars};
use super::ModelError;
use crate::autograd::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockIds {
    pub up: Option<ConvIds>,
    pub c1: ConvIds,
    pub c2: ConvIds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TclIds {
    pub bottleneck: ConvIds,
    pub conv_a: ConvIds,
    pub conv_b: ConvIds,
    /// Query/key projections for the private and public masks.
    pub attention: Option<[ConvIds; 4]>,
}

/// Initialized parameters plus the wiring of one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    cfg: TopologyConfig,
    pub store: ParamStore,
    shared: Vec<Option<BlockIds>>,
    branch: [Vec<Option<BlockIds>>; 2],
    tcl: Vec<Option<TclIds>>,
    tops: [Option<BlockIds>; 2],
    graph: Vec<String>,
}

/// Graph values of one fusion level.
#[derive(Debug, Clone, Copy)]
pub struct TripleVars {
    pub level: usize,
    pub seg: Var,
    pub cont: Var,
    pub tcl: Var,
    /// Branch features after feedback.
    pub fed_seg: Var,
    pub fed_cont: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub seg_logits: Var,
    pub contour: Option<Var>,
    pub triples: Vec<TripleVars>,
}

/// Concrete feature maps of one fusion level, each `[B, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTriple {
    pub level: usize,
    pub seg: Tensor<f32>,
    pub cont: Tensor<f32>,
    pub tcl: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Foreground probability, `[B, H, W]`.
    pub probs: Tensor<f32>,
    /// Regressed contour heatmap, `[B, H, W]`.
    pub contour: Option<Tensor<f32>>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn conv(&mut self, group: Group, prefix: &str, layer: &str, cin: usize, cout: usize, k: usize) -> ConvIds {
        let w = self.store.add(format!("{prefix}.{layer}.weight"), group, &[cout, cin, k, k], cin * k * k, self.seed);
        let b = self.store.add(format!("{prefix}.{layer}.bias"), group, &[cout], 0, self.seed);
        ConvIds { w, b, pad: k / 2 }
    }

    fn up(&mut self, group: Group, prefix: &str, cin: usize, cout: usize) -> ConvIds {
        let w = self.store.add(format!("{prefix}.up.weight"), group, &[cin, cout, 2, 2], cin, self.seed);
        let b = self.store.add(format!("{prefix}.up.bias"), group, &[cout], 0, self.seed);
        ConvIds { w, b, pad: 0 }
    }

    fn block(&mut self, cfg: &TopologyConfig, group: Group, level: usize) -> BlockIds {
        let d = cfg.depth;
        let prefix = format!("{}.{}", group.tag(), cfg.level_name(level));
        let cout = cfg.width(level);
        if level <= d {
            let cin = if level == 0 { cfg.in_slices } else { cfg.width(level - 1) };
            BlockIds {
                up: None,
                c1: self.conv(group, &prefix, "conv1", cin, cout, 3),
                c2: self.conv(group, &prefix, "conv2", cout, cout, 3),
            }
        } else {
            let prev = cfg.width(level - 1);
            BlockIds {
                up: Some(self.up(group, &prefix, prev, cout)),
                c1: self.conv(group, &prefix, "conv1", 2 * cout, cout, 3),
                c2: self.conv(group, &prefix, "conv2", cout, cout, 3),
            }
        }
    }

    /// Output head; the final 1x1 layer starts at zero so initial outputs
    /// are neutral.
    fn top(&mut self, group: Group, cin: usize, cout: usize) -> BlockIds {
        let prefix = format!("{}.top", group.tag());
        let c1 = self.conv(group, &prefix, "conv1", cin, cin, 3);
        let w = self.store.add(format!("{prefix}.conv2.weight"), group, &[cout, cin, 1, 1], 0, self.seed);
        let b = self.store.add(format!("{prefix}.conv2.bias"), group, &[cout], 0, self.seed);
        BlockIds { up: None, c1, c2: ConvIds { w, b, pad: 0 } }
    }

    fn tcl(&mut self, cfg: &TopologyConfig, level: usize) -> TclIds {
        let c = cfg.width(level);
        let prefix = format!("tcl.{}", cfg.level_name(level));
        let g = Group::Tcl;
        let attention = matches!(cfg.attention, Attention::Position | Attention::Dual).then(|| {
            let r = (c / 8).max(1);
            [
                self.conv(g, &prefix, "query_priv", c, r, 1),
                self.conv(g, &prefix, "key_priv", c, r, 1),
                self.conv(g, &prefix, "query_pub", c, r, 1),
                self.conv(g, &prefix, "key_pub", c, r, 1),
            ]
        });
        TclIds {
            bottleneck: self.conv(g, &prefix, "bottleneck", c, c, 1),
            conv_a: self.conv(g, &prefix, "conv_a", c, c, 3),
            conv_b: self.conv(g, &prefix, "conv_b", c, c, 3),
            attention,
        }
    }
}

/// Builds and initializes a topology. Parameter draws depend on `seed` and
/// parameter names only.
pub fn build_topology(cfg: &TopologyConfig, seed: u64) -> Result<ModelState, ModelError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut b = Builder { store: &mut store, seed };
    let levels = cfg.levels();
    let split = cfg.split_level();
    let two = cfg.has_contour_branch();
    let mut shared = vec![None; levels];
    let mut branch = [vec![None; levels], vec![None; levels]];
    let mut tcl_ids = vec![None; levels];
    let mut graph = Vec::new();
    for l in 0..levels {
        let name = cfg.level_name(l);
        let cin = if l == 0 {
            cfg.in_slices
        } else if l <= cfg.depth {
            cfg.width(l - 1)
        } else {
            2 * cfg.width(l)
        };
        let body = if l < cfg.depth {
            format!("conv3x3 {cin}->{w}, conv3x3 {w}->{w}, maxpool2", w = cfg.width(l))
        } else if l == cfg.depth {
            format!("conv3x3 {cin}->{w}, conv3x3 {w}->{w}", w = cfg.width(l))
        } else {
            format!("upconv2 {}->{w}, concat skip {}, conv3x3 {cin}->{w}, conv3x3 {w}->{w}", cfg.width(l - 1), cfg.level_name(2 * cfg.depth - l), w = cfg.width(l))
        };
        if l < split {
            shared[l] = Some(b.block(cfg, Group::Shared, l));
            graph.push(format!("{name} [shared] {body}"));
        } else {
            branch[0][l] = Some(b.block(cfg, Group::SegBranch, l));
            branch[1][l] = Some(b.block(cfg, Group::ContourBranch, l));
            graph.push(format!("{name} [seg | cont] {body}"));
        }
        if cfg.tcl_at(l) {
            tcl_ids[l] = Some(b.tcl(cfg, l));
            graph.push(format!("{name} [tcl] sum, conv1x1 bottleneck, conv3x3 x2, feedback {}", fusion_label(cfg)));
        }
    }
    let last = cfg.width(levels - 1);
    let seg_top = b.top(Group::SegBranch, last, cfg.classes);
    graph.push(format!("top [seg] conv3x3 {last}->{last}, conv1x1 {last}->{}", cfg.classes));
    let cont_top = two.then(|| {
        graph.push(format!("top [cont] conv3x3 {last}->{last}, conv1x1 {last}->1"));
        b.top(Group::ContourBranch, last, 1)
    });
    if !two {
        branch[1] = vec![None; levels];
    }
    Ok(ModelState { cfg: cfg.clone(), store, shared, branch, tcl: tcl_ids, tops: [Some(seg_top), cont_top], graph })
}

fn fusion_label(cfg: &TopologyConfig) -> String {
    match cfg.attention {
        Attention::None => format!("weighted alpha={}", cfg.alpha),
        a => format!("attention {a}{}", if cfg.attention_averaged { " averaged" } else { "" }),
    }
}

fn fusion(cfg: &TopologyConfig) -> Fusion {
    let (channel, position) = match cfg.attention {
        Attention::None => return Fusion::Weighted { alpha: cfg.alpha },
        Attention::Channel => (true, false),
        Attention::Position => (false, true),
        Attention::Dual => (true, true),
    };
    Fusion::Attention { channel, position, averaged: cfg.attention_averaged }
}

fn conv<T: Real>(t: &mut Tape<T>, pv: &[Var], c: ConvIds, x: Var) -> Result<Var, ModelError> {
    Ok(t.conv2d(x, pv[c.w], Some(pv[c.b]), c.pad)?)
}

fn conv_relu<T: Real>(t: &mut Tape<T>, pv: &[Var], c: ConvIds, x: Var) -> Result<Var, ModelError> {
    let y = conv(t, pv, c, x)?;
    Ok(t.relu(y))
}

fn run_block<T: Real>(t: &mut Tape<T>, pv: &[Var], b: &BlockIds, x: Var, skip: Option<Var>) -> Result<Var, ModelError> {
    let mut h = x;
    if let Some(up) = b.up {
        let u = t.conv_transpose2(x, pv[up.w], Some(pv[up.b]))?;
        h = t.concat_channels(u, skip.expect("decoder block has a skip"))?;
    }
    let h = conv_relu(t, pv, b.c1, h)?;
    conv_relu(t, pv, b.c2, h)
}

fn pair(pv: &[Var], c: ConvIds) -> (Var, Var) {
    (pv[c.w], pv[c.b])
}

impl ModelState {
    pub fn config(&self) -> &TopologyConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &[String] {
        &self.graph
    }

    pub fn param_counts(&self) -> BTreeMap<Group, usize> {
        Group::ALL.iter().map(|&g| (g, self.store.count(g))).collect()
    }

    pub fn tcl_levels(&self) -> Vec<usize> {
        (0..self.cfg.levels()).filter(|&l| self.tcl[l].is_some()).collect()
    }

    /// Places every parameter on the tape; `trainable` decides which groups
    /// receive gradients.
    pub fn bind<T: Real>(&self, t: &mut Tape<T>, trainable: impl Fn(Group) -> bool) -> Vec<Var> {
        self.store.iter().map(|p| t.leaf(p.value.cast(), trainable(p.group))).collect()
    }

    /// Middle-slice predictions for a `[B, in_slices, H, W]` batch.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, pv: &[Var], x: Var) -> Result<ForwardOut, ModelError> {
        let cfg = &self.cfg;
        let [_, c, h, w] = t.value(x).dims4("forward")?;
        let m = 1usize << cfg.depth;
        if c != cfg.in_slices || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(ModelError::Input(format!(
                "batch [_, {c}, {h}, {w}] needs {} slices and sides divisible by {m}",
                cfg.in_slices
            )));
        }
        let d = cfg.depth;
        let fuse = fusion(cfg);
        let mut cur = [x, x];
        let mut skips: Vec<[Var; 2]> = Vec::with_capacity(d);
        let mut triples = Vec::new();
        for l in 0..cfg.levels() {
            let input = if l == 0 || l > d {
                cur
            } else {
                let p0 = t.max_pool2(cur[0])?;
                let p1 = if cur[1] == cur[0] { p0 } else { t.max_pool2(cur[1])? };
                [p0, p1]
            };
            let skip = |b: usize| (l > d).then(|| skips[2 * d - l][b]);
            if let Some(blk) = &self.shared[l] {
                let o = run_block(t, pv, blk, input[0], skip(0))?;
                cur = [o, o];
            } else {
                let s = run_block(t, pv, self.branch[0][l].as_ref().expect("seg block"), input[0], skip(0))?;
                let k = run_block(t, pv, self.branch[1][l].as_ref().expect("contour block"), input[1], skip(1))?;
                cur = [s, k];
                if let Some(ids) = &self.tcl[l] {
                    let vars = TclVars {
                        bottleneck: pair(pv, ids.bottleneck),
                        conv_a: pair(pv, ids.conv_a),
                        conv_b: pair(pv, ids.conv_b),
                        attention: ids.attention.map(|a| AttnVars {
                            private: QueryKey { q: pair(pv, a[0]), k: pair(pv, a[1]) },
                            public: QueryKey { q: pair(pv, a[2]), k: pair(pv, a[3]) },
                        }),
                    };
                    let out = tcl::tcl_block(t, s, k, &vars, fuse)?;
                    triples.push(TripleVars { level: l, seg: s, cont: k, tcl: out.public, fed_seg: out.seg, fed_cont: out.cont });
                    cur = [out.seg, out.cont];
                }
            }
            if l < d {
                skips.push(cur);
            }
        }
        let seg_top = self.tops[0].as_ref().expect("segmentation top");
        let seg_logits = run_top(t, pv, seg_top, cur[0])?;
        let contour = match &self.tops[1] {
            Some(top) => Some(run_top(t, pv, top, cur[1])?),
            None => None,
        };
        Ok(ForwardOut { seg_logits, contour, triples })
    }

    /// Gradient-free evaluation of a batch.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Prediction, ModelError> {
        let mut t = Tape::<f32>::new();
        let pv = self.bind(&mut t, |_| false);
        let xv = t.constant(x.clone());
        let out = self.forward(&mut t, &pv, xv)?;
        let sm = t.softmax_channels(out.seg_logits)?;
        let probs = t.select_channel(sm, 1)?;
        let contour = match out.contour {
            Some(c) => Some(t.select_channel(c, 0)?),
            None => None,
        };
        Ok(Prediction { probs: t.value(probs).clone(), contour: contour.map(|c| t.value(c).clone()) })
    }

    pub fn feature_triples(&self, x: &Tensor<f32>) -> Result<Vec<FeatureTriple>, ModelError> {
        let mut t = Tape::<f32>::new();
        let pv = self.bind(&mut t, |_| false);
        let xv = t.constant(x.clone());
        let out = self.forward(&mut t, &pv, xv)?;
        Ok(out
            .triples
            .iter()
            .map(|tr| FeatureTriple {
                level: tr.level,
                seg: t.value(tr.seg).clone(),
                cont: t.value(tr.cont).clone(),
                tcl: t.value(tr.tcl).clone(),
            })
            .collect())
    }

    /// Copies every segmentation-branch parameter onto its contour-branch
    /// counterpart of equal shape.
    pub fn mirror_branches(&mut self) -> usize {
        let mut copied = 0;
        let pairs: Vec<(ParamId, ParamId)> = self
            .store
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group == Group::SegBranch)
            .filter_map(|(i, p)| {
                let twin = format!("{}{}", Group::ContourBranch.tag(), &p.name[Group::SegBranch.tag().len()..]);
                self.store.find(&twin).filter(|&j| self.store.get(j).value.shape() == p.value.shape()).map(|j| (i, j))
            })
            .collect();
        for (i, j) in pairs {
            let v = self.store.get(i).value.clone();
            self.store.get_mut(j).value = v;
            copied += 1;
        }
        copied
    }

    pub fn family(&self) -> Family {
        self.cfg.family
    }

    /// Rebuilds a model around a loaded store after checking that it has the
    /// same names, groups and shapes as a fresh build of `cfg`.
    pub fn with_store(cfg: &TopologyConfig, store: ParamStore) -> Result<Self, ModelError> {
        let mut m = build_topology(cfg, 0)?;
        if m.store.len() != store.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter count {} does not match topology ({})",
                store.len(),
                m.store.len()
            )));
        }
        for (a, b) in m.store.iter().zip(store.iter()) {
            if a.name != b.name || a.group != b.group || a.value.shape() != b.value.shape() {
                return Err(ModelError::Checkpoint(format!("parameter {} does not match topology ({})", b.name, a.name)));
            }
        }
        m.store = store;
        Ok(m)
    }
}

fn run_top<T: Real>(t: &mut Tape<T>, pv: &[Var], b: &BlockIds, x: Var) -> Result<Var, ModelError> {
    let h = conv_relu(t, pv, b.c1, x)?;
    conv(t, pv, b.c2, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize, p: usize) -> Tensor<f32> {
        Tensor::from_fn(&[b, 3, p, p], |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0)
    }

    #[test]
    fn shapes_for_every_family() {
        for name in ["unet", "eb", "lb", "hf-1", "hf-2", "hf-3", "hf-6"] {
            let cfg = TopologyConfig::named(name).unwrap();
            let m = build_topology(&cfg, 1).unwrap();
            let mut t = Tape::<f32>::new();
            let pv = m.bind(&mut t, |_| false);
            let x = t.constant(batch(2, 16));
            let out = m.forward(&mut t, &pv, x).unwrap();
            assert_eq!(t.shape(out.seg_logits), [2, 2, 16, 16], "{name}");
            assert_eq!(out.contour.map(|c| t.shape(c).to_vec()), cfg.has_contour_branch().then(|| vec![2, 1, 16, 16]));
            assert_eq!(out.triples.len(), cfg.tcl_count, "{name}");
        }
    }

    #[test]
    fn group_partition() {
        let unet = build_topology(&TopologyConfig::named("unet").unwrap(), 0).unwrap();
        let c = unet.param_counts();
        assert!(c[&Group::Shared] > 0);
        assert_eq!(c[&Group::SegBranch], 8 * 8 * 9 + 8 + 8 * 2 + 2);
        assert_eq!(c[&Group::ContourBranch] + c[&Group::Tcl], 0);
        let lb = build_topology(&TopologyConfig::named("lb").unwrap(), 0).unwrap();
        assert!(lb.store.iter().filter(|p| p.group != Group::Shared).all(|p| p.name.contains(".top.")));
        let h1 = build_topology(&TopologyConfig::named("hf-1").unwrap(), 0).unwrap();
        let h6 = build_topology(&TopologyConfig::named("hf-6").unwrap(), 0).unwrap();
        assert!(h6.store.total() > h1.store.total());
        assert_eq!(h6.param_counts().values().sum::<usize>(), h6.store.total());
    }

    #[test]
    fn hf6_levels_shrink_then_grow() {
        let m = build_topology(&TopologyConfig::named("hf-6").unwrap(), 3).unwrap();
        let f = m.feature_triples(&batch(1, 16)).unwrap();
        let sides: Vec<usize> = f.iter().map(|t| t.seg.shape()[2]).collect();
        assert_eq!(sides, [8, 4, 2, 4, 8, 16]);
        assert_eq!(m.tcl_levels(), [1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_wrong_input() {
        let m = build_topology(&TopologyConfig::named("unet").unwrap(), 0).unwrap();
        let mut t = Tape::<f32>::new();
        let pv = m.bind(&mut t, |_| false);
        let x = t.constant(Tensor::zeros(&[1, 3, 12, 12]));
        assert!(matches!(m.forward(&mut t, &pv, x), Err(ModelError::Input(_))));
    }
}
