//! Which layers must share a channel permutation.
//!
//! Permuting the output channels of a layer (a *parent*) is harmless as long
//! as every consumer of those channels (a *child*) permutes its input
//! channels the same way. Residual additions tie the outputs of several
//! parents together, pass-through ops forward the constraint, and reshapes
//! require channels to move in contiguous blocks. A concatenation stacks
//! independent channel ranges, so layers behind it join one group per
//! source with an offset. The constraints are solved with union-find over
//! per-layer channel slots.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::finetune::ToyNetwork;
use crate::tensor_io::{LayerKind, LayerMeta, ModelCheckpoint, TensorRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotSide {
    Input,
    Output,
}

/// One channel dimension attached to a layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermSlot {
    pub id: usize,
    pub side: SlotSide,
    pub owner: String,
    pub channels: usize,
    pub fixed: bool,
    pub channel_block: usize,
}

/// The run of a member's channel axis that a group permutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ChannelSpan {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PermutationGroup {
    /// Layers whose output channels are permuted, including batchnorms
    /// whose vectors move with them. Sorted by name.
    pub parents: Vec<String>,
    /// Layers whose input channels are permuted. Sorted by name.
    pub children: Vec<String>,
    pub channels: usize,
    /// Permutations must move runs of this many contiguous channels.
    pub channel_block: usize,
    /// `parent_spans[i]` locates the group on `parents[i]`'s output axis;
    /// it covers the whole axis unless the parent feeds a concat.
    pub parent_spans: Vec<ChannelSpan>,
    pub child_spans: Vec<ChannelSpan>,
}

impl PermutationGroup {
    fn empty(channels: usize, channel_block: usize) -> Self {
        Self {
            parents: Vec::new(),
            children: Vec::new(),
            channels,
            channel_block,
            parent_spans: Vec::new(),
            child_spans: Vec::new(),
        }
    }

    pub fn parent_members(&self) -> impl Iterator<Item = (&str, ChannelSpan)> {
        self.parents.iter().map(String::as_str).zip(self.parent_spans.iter().copied())
    }

    pub fn child_members(&self) -> impl Iterator<Item = (&str, ChannelSpan)> {
        self.children.iter().map(String::as_str).zip(self.child_spans.iter().copied())
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new() -> Self {
        Self { parent: Vec::new(), rank: Vec::new() }
    }

    fn push(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.rank.push(0);
        self.parent.len() - 1
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        let (hi, lo) = if self.rank[ra] >= self.rank[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[lo] = hi;
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        hi
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Slots of every layer plus the union-find over them.
pub struct SlotGraph {
    pub slots: Vec<PermSlot>,
    input_slot: HashMap<String, usize>,
    output_slot: HashMap<String, usize>,
    uf: UnionFind,
    fixed: Vec<bool>,
    block: Vec<usize>,
    /// Concat output slots with their producers' output slots, in order.
    concats: Vec<(usize, Vec<usize>)>,
}

impl SlotGraph {
    fn slot(&mut self, owner: &str, side: SlotSide, channels: usize) -> usize {
        let id = self.uf.push();
        self.slots.push(PermSlot { id, side, owner: owner.to_string(), channels, fixed: false, channel_block: 1 });
        self.fixed.push(false);
        self.block.push(1);
        id
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.uf.find(a), self.uf.find(b));
        if ra == rb {
            return;
        }
        let fixed = self.fixed[ra] || self.fixed[rb];
        let block = lcm(self.block[ra], self.block[rb]);
        let root = self.uf.union(ra, rb);
        self.fixed[root] = fixed;
        self.block[root] = block;
    }

    fn fix(&mut self, a: usize) {
        let r = self.uf.find(a);
        self.fixed[r] = true;
    }

    fn require_block(&mut self, a: usize, f: usize) {
        let r = self.uf.find(a);
        self.block[r] = lcm(self.block[r], f);
    }

    pub fn root(&mut self, slot: usize) -> usize {
        self.uf.find(slot)
    }

    pub fn input_slot(&self, layer: &str) -> Option<usize> {
        self.input_slot.get(layer).copied()
    }

    pub fn output_slot(&self, layer: &str) -> Option<usize> {
        self.output_slot.get(layer).copied()
    }
}

fn single_producer<'a>(arch: &'a ModelCheckpoint, layer: &'a LayerMeta) -> Result<&'a str> {
    let mut it = arch.producers(&layer.name);
    match (it.next(), it.next()) {
        (Some(p), None) => Ok(p),
        _ => Err(Error::InvalidGraph(format!("`{}` needs exactly one producer", layer.name))),
    }
}

/// Builds the slot graph and applies the unification rules.
pub fn build_slot_graph(arch: &ModelCheckpoint) -> Result<SlotGraph> {
    arch.validate_graph()?;
    let mut g = SlotGraph {
        slots: Vec::new(),
        input_slot: HashMap::new(),
        output_slot: HashMap::new(),
        uf: UnionFind::new(),
        fixed: Vec::new(),
        block: Vec::new(),
        concats: Vec::new(),
    };
    for l in &arch.layers {
        let out_channels = match l.kind {
            LayerKind::Output => l.c_in,
            _ => l.c_out,
        };
        let out = g.slot(&l.name, SlotSide::Output, out_channels);
        g.output_slot.insert(l.name.clone(), out);
        if l.kind.has_weight_matrix() {
            let inp = g.slot(&l.name, SlotSide::Input, l.c_in);
            g.input_slot.insert(l.name.clone(), inp);
        }
    }
    let outputs = g.output_slot.clone();
    for l in &arch.layers {
        let out = outputs[&l.name];
        match l.kind {
            LayerKind::Input => g.fix(out),
            LayerKind::Output => {
                let p = single_producer(arch, l)?;
                g.union(out, outputs[p]);
                g.fix(out);
            }
            LayerKind::Conv | LayerKind::Deconv | LayerKind::Fc => {
                let p = single_producer(arch, l)?;
                let inp = g.input_slot[&l.name];
                g.union(inp, outputs[p]);
            }
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Pool => {
                let p = single_producer(arch, l)?;
                g.union(out, outputs[p]);
            }
            LayerKind::Add => {
                for p in arch.producers(&l.name) {
                    g.union(out, outputs[p]);
                }
            }
            LayerKind::Reshape => {
                let p = single_producer(arch, l)?;
                if l.c_in == 0 || l.c_out % l.c_in != 0 {
                    return Err(Error::InconsistentChannelCounts {
                        layer: l.name.clone(),
                        expected: l.c_in,
                        actual: l.c_out,
                    });
                }
                g.union(out, outputs[p]);
                g.require_block(out, l.c_out / l.c_in);
            }
            LayerKind::Concat => {
                let sources: Vec<usize> = arch.producers(&l.name).map(|p| outputs[p]).collect();
                let total: usize = sources.iter().map(|&s| g.slots[s].channels).sum();
                if total != l.c_out {
                    return Err(Error::InconsistentChannelCounts {
                        layer: l.name.clone(),
                        expected: l.c_out,
                        actual: total,
                    });
                }
                g.concats.push((out, sources));
            }
        }
    }
    resolve_concats(&mut g)?;
    for id in 0..g.slots.len() {
        let r = g.uf.find(id);
        g.slots[id].fixed = g.fixed[r];
        g.slots[id].channel_block = g.block[r];
    }
    Ok(g)
}

/// A channel range of a class that belongs to another (source) class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Segment {
    root: usize,
    offset: usize,
    len: usize,
}

impl SlotGraph {
    /// Source segments of concat output `slot`, flattening nested concats.
    fn flatten_concat(&mut self, slot: usize, visiting: &mut Vec<usize>) -> Result<Vec<Segment>> {
        let root = self.uf.find(slot);
        if visiting.contains(&root) {
            return Err(Error::UnsupportedLayerKind(format!(
                "concat `{}` feeds back into its own channels",
                self.slots[slot].owner
            )));
        }
        visiting.push(root);
        let sources = self.concats.iter().find(|(o, _)| *o == slot).unwrap().1.clone();
        let mut out = Vec::new();
        let mut offset = 0;
        for src in sources {
            let r = self.uf.find(src);
            let len = self.slots[src].channels;
            let inner = self.concats.iter().map(|c| c.0).find(|&o| self.uf.find(o) == r);
            match inner {
                Some(o) => {
                    for seg in self.flatten_concat(o, visiting)? {
                        out.push(Segment { offset: offset + seg.offset, ..seg });
                    }
                }
                None => out.push(Segment { root: r, offset, len }),
            }
            offset += len;
        }
        visiting.pop();
        Ok(out)
    }

    /// Segments of the class `root` as seen by a member with `channels`.
    fn segments(&mut self, root: usize, channels: usize) -> Result<Vec<Segment>> {
        match self.concats.iter().map(|c| c.0).find(|&o| self.uf.find(o) == root) {
            Some(o) => self.flatten_concat(o, &mut Vec::new()),
            None => Ok(vec![Segment { root, offset: 0, len: channels }]),
        }
    }
}

/// Ties concat classes to their sources: concats merged into one class must
/// split their channels at the same points (their sources then unify), and
/// a fixed concat fixes all of its sources.
fn resolve_concats(g: &mut SlotGraph) -> Result<()> {
    for i in 0..g.concats.len() {
        let (out, _) = g.concats[i];
        let root = g.uf.find(out);
        let total = g.slots[out].channels;
        for id in 0..g.slots.len() {
            if g.uf.find(id) == root && g.slots[id].channels != total {
                return Err(Error::UnsupportedLayerKind(format!(
                    "`{}` changes the channel count of concat `{}`",
                    g.slots[id].owner, g.slots[out].owner
                )));
            }
        }
        if g.block[root] != 1 {
            return Err(Error::UnsupportedLayerKind(format!("reshape after concat `{}`", g.slots[out].owner)));
        }
    }
    loop {
        let mut changed = false;
        for i in 0..g.concats.len() {
            let out = g.concats[i].0;
            let root = g.uf.find(out);
            let mine = g.flatten_concat(out, &mut Vec::new())?;
            let reference = g.segments(root, 0)?;
            let lens = |v: &[Segment]| v.iter().map(|s| (s.offset, s.len)).collect::<Vec<_>>();
            if lens(&mine) != lens(&reference) {
                return Err(Error::UnsupportedLayerKind(format!(
                    "concats merged with `{}` split channels at different points",
                    g.slots[out].owner
                )));
            }
            for (a, b) in mine.iter().zip(&reference) {
                if g.uf.find(a.root) != g.uf.find(b.root) {
                    g.union(a.root, b.root);
                    changed = true;
                }
            }
            if g.fixed[g.uf.find(out)] {
                for seg in &mine {
                    let r = g.uf.find(seg.root);
                    if !g.fixed[r] {
                        g.fixed[r] = true;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return Ok(());
        }
    }
}

/// Resolves the permutation groups of an architecture.
///
/// Groups touching the network input or output are fixed and dropped, as
/// are groups without both parents and children. Members are sorted by
/// name and groups by their first parent.
pub fn resolve_groups(arch: &ModelCheckpoint) -> Result<Vec<PermutationGroup>> {
    let mut g = build_slot_graph(arch)?;

    // channel-count consistency per class
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for id in 0..g.slots.len() {
        let r = g.root(id);
        classes.entry(r).or_default().push(id);
    }
    let mut channels_of = HashMap::new();
    for (&root, members) in &classes {
        let channels = members.iter().map(|&s| g.slots[s].channels).max().unwrap_or(0);
        let block = g.block[root];
        for &s in members {
            let c = g.slots[s].channels;
            if c == 0 || channels % c != 0 || block % (channels / c) != 0 {
                return Err(Error::InconsistentChannelCounts {
                    layer: g.slots[s].owner.clone(),
                    expected: channels,
                    actual: c,
                });
            }
        }
        channels_of.insert(root, channels);
    }

    let mut groups: BTreeMap<usize, PermutationGroup> = BTreeMap::new();
    for l in &arch.layers {
        let mut memberships = Vec::new();
        if l.kind.has_weight_matrix() || l.kind == LayerKind::BatchNorm {
            memberships.push((true, g.output_slot[&l.name]));
        }
        if let Some(inp) = g.input_slot(&l.name) {
            memberships.push((false, inp));
        }
        for (is_parent, slot) in memberships {
            let root = g.root(slot);
            for seg in g.segments(root, g.slots[slot].channels)? {
                let r = g.root(seg.root);
                if g.fixed[r] {
                    continue;
                }
                let grp = groups.entry(r).or_insert_with(|| PermutationGroup::empty(channels_of[&r], g.block[r]));
                let span = ChannelSpan { offset: seg.offset, len: seg.len };
                if is_parent {
                    grp.parents.push(l.name.clone());
                    grp.parent_spans.push(span);
                } else {
                    grp.children.push(l.name.clone());
                    grp.child_spans.push(span);
                }
            }
        }
    }
    fn sort_members(names: &mut Vec<String>, spans: &mut Vec<ChannelSpan>) {
        let mut both: Vec<_> = names.drain(..).zip(spans.drain(..)).collect();
        both.sort();
        (*names, *spans) = both.into_iter().unzip();
    }
    let mut out: Vec<PermutationGroup> = groups
        .into_iter()
        .filter(|(_, grp)| !grp.parents.is_empty() && !grp.children.is_empty())
        .map(|(_, mut grp)| {
            sort_members(&mut grp.parents, &mut grp.parent_spans);
            sort_members(&mut grp.children, &mut grp.child_spans);
            grp
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Renders groups in the `permutations:` listing layout. Members that the
/// group covers only partly (behind a concat) print as `name@offset+len`.
pub fn format_groups(arch: &ModelCheckpoint, groups: &[PermutationGroup]) -> String {
    let show = |members: Vec<(&str, ChannelSpan)>, parent: bool| -> String {
        members
            .into_iter()
            .map(|(name, span)| {
                let axis = arch.layer(name).map(|l| if parent { l.c_out } else { l.c_in });
                if span.offset == 0 && axis == Some(span.len) {
                    name.to_string()
                } else {
                    format!("{name}@{}+{}", span.offset, span.len)
                }
            })
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mut s = String::from("permutations:\n");
    for g in groups {
        s.push_str("    -\n");
        s.push_str(&format!("      - parents:  [{}]\n", show(g.parent_members().collect(), true)));
        s.push_str(&format!("      - children: [{}]\n", show(g.child_members().collect(), false)));
    }
    s
}

/// Parses the listing layout produced by [`format_groups`] into member
/// names (span annotations are dropped); list items may wrap across lines.
pub fn parse_groups(text: &str) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let mut out = Vec::new();
    let mut parents: Option<Vec<String>> = None;
    let mut pending: Option<(bool, String)> = None;
    let mut finish = |is_parent: bool, body: &str, parents: &mut Option<Vec<String>>| -> Result<()> {
        let names: Vec<String> =
            body.split(',').map(|s| s.split('@').next().unwrap().trim().to_string()).filter(|s| !s.is_empty()).collect();
        if is_parent {
            *parents = Some(names);
        } else {
            let p = parents
                .take()
                .ok_or_else(|| Error::MalformedFile("children listed before parents".into()))?;
            out.push((p, names));
        }
        Ok(())
    };
    for line in text.lines() {
        let t = line.trim();
        if let Some((is_parent, mut acc)) = pending.take() {
            if let Some(end) = t.find(']') {
                acc.push_str(&t[..end]);
                finish(is_parent, &acc, &mut parents)?;
            } else {
                acc.push_str(t);
                acc.push(' ');
                pending = Some((is_parent, acc));
            }
            continue;
        }
        let (is_parent, rest) = if let Some(r) = t.strip_prefix("- parents:") {
            (true, r)
        } else if let Some(r) = t.strip_prefix("- children:") {
            (false, r)
        } else {
            continue;
        };
        let rest = rest.trim().trim_start_matches('[');
        if let Some(end) = rest.find(']') {
            finish(is_parent, &rest[..end], &mut parents)?;
        } else {
            pending = Some((is_parent, format!("{rest} ")));
        }
    }
    Ok(out)
}

/// Per-member channel gather order derived from the group order `perm`.
fn member_order(perm: &[usize], member_channels: usize) -> Vec<usize> {
    let ratio = perm.len() / member_channels;
    (0..member_channels).map(|c| perm[c * ratio] / ratio).collect()
}

/// Gathers `axis` of a row-major tensor: `out[.., i, ..] = in[.., order[i], ..]`.
fn permute_axis(t: &TensorRecord, axis: usize, order: &[usize]) -> Result<TensorRecord> {
    if t.shape.get(axis) != Some(&order.len()) {
        return Err(Error::ShapeMismatch(format!(
            "`{}` axis {axis} has size {:?}, permutation has {}",
            t.name,
            t.shape.get(axis),
            order.len()
        )));
    }
    let width = t.dtype.width();
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product::<usize>() * width;
    let len = order.len();
    let mut data = vec![0u8; t.data.len()];
    for o in 0..outer {
        for (i, &src) in order.iter().enumerate() {
            let d = (o * len + i) * inner;
            let s = (o * len + src) * inner;
            data[d..d + inner].copy_from_slice(&t.data[s..s + inner]);
        }
    }
    Ok(TensorRecord { data, ..t.clone() })
}

fn permute_tensor(ckpt: &mut ModelCheckpoint, name: &str, axis: usize, order: &[usize]) -> Result<()> {
    if let Some(t) = ckpt.tensor_mut(name) {
        *t = permute_axis(t, axis, order)?;
    }
    Ok(())
}

/// Checks that `perm` is a bijection moving whole runs of `block` channels.
pub fn check_block_permutation(perm: &[usize], block: usize) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        match seen.get_mut(p) {
            Some(s) if !*s => *s = true,
            _ => return Err(Error::InvalidArgument(format!("not a permutation: index {p}"))),
        }
    }
    if block == 0 || !perm.len().is_multiple_of(block) {
        return Err(Error::BlockViolation(0));
    }
    for (b, run) in perm.chunks_exact(block).enumerate() {
        if run[0] % block != 0 || run.iter().enumerate().any(|(r, &v)| v != run[0] + r) {
            return Err(Error::BlockViolation(b * block));
        }
    }
    Ok(())
}

/// Applies a shared channel permutation to every member of `group`.
///
/// Parents gather their output axis (plus bias and batchnorm vectors),
/// children gather their input axis. The result computes the same function.
pub fn apply_group_permutation(
    ckpt: &ModelCheckpoint,
    group: &PermutationGroup,
    perm: &[usize],
) -> Result<ModelCheckpoint> {
    if perm.len() != group.channels {
        return Err(Error::ShapeMismatch(format!(
            "permutation over {} channels for a group of {}",
            perm.len(),
            group.channels
        )));
    }
    check_block_permutation(perm, group.channel_block)?;
    let mut out = ckpt.clone();
    let meta = |name: &str| ckpt.layer(name).cloned().ok_or_else(|| Error::DanglingEdge(name.to_string()));
    for (name, span) in group.parent_members() {
        let l = meta(name)?;
        let order = span_order(perm, span, l.c_out)?;
        match l.kind {
            LayerKind::Conv => permute_tensor(&mut out, &l.weight_name(), 1, &order)?,
            LayerKind::Deconv => permute_tensor(&mut out, &l.weight_name(), 0, &order)?,
            LayerKind::Fc => permute_tensor(&mut out, &l.weight_name(), 1, &order)?,
            LayerKind::BatchNorm => permute_tensor(&mut out, &l.weight_name(), 0, &order)?,
            other => return Err(Error::UnsupportedLayerKind(format!("{other} as parent"))),
        }
        permute_tensor(&mut out, &l.bias_name(), 0, &order)?;
    }
    for (name, span) in group.child_members() {
        let l = meta(name)?;
        let order = span_order(perm, span, l.c_in)?;
        match l.kind {
            LayerKind::Conv | LayerKind::Fc => permute_tensor(&mut out, &l.weight_name(), 0, &order)?,
            LayerKind::Deconv => permute_tensor(&mut out, &l.weight_name(), 1, &order)?,
            other => return Err(Error::UnsupportedLayerKind(format!("{other} as child"))),
        }
    }
    Ok(out)
}

/// Gather order over a member axis of `axis_len`: identity outside `span`,
/// the group order scaled to the span inside it.
pub fn span_order(perm: &[usize], span: ChannelSpan, axis_len: usize) -> Result<Vec<usize>> {
    if span.len == 0 || span.offset + span.len > axis_len || !perm.len().is_multiple_of(span.len) {
        return Err(Error::ShapeMismatch(format!(
            "span {}..{} of an axis of {axis_len} for a group of {}",
            span.offset,
            span.offset + span.len,
            perm.len()
        )));
    }
    let mut order: Vec<usize> = (0..axis_len).collect();
    for (c, src) in member_order(perm, span.len).into_iter().enumerate() {
        order[span.offset + c] = span.offset + src;
    }
    Ok(order)
}

/// Max absolute difference between the outputs of two checkpoints over a
/// set of flattened `(C, H, W)` probe inputs.
pub fn verify_equivalence(a: &ModelCheckpoint, b: &ModelCheckpoint, probes: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = probes.first() else {
        return Ok(0.0);
    };
    let side_of = |ckpt: &ModelCheckpoint| -> Result<usize> {
        let input = ckpt
            .layers
            .iter()
            .find(|l| l.kind == LayerKind::Input)
            .ok_or_else(|| Error::InvalidGraph("no input node".into()))?;
        let area = first.len() / input.c_out.max(1);
        let side = (area as f64).sqrt().round() as usize;
        if side * side * input.c_out != first.len() {
            return Err(Error::ShapeMismatch(format!(
                "probe of length {} does not fit {} square channels",
                first.len(),
                input.c_out
            )));
        }
        Ok(side)
    };
    let (sa, sb) = (side_of(a)?, side_of(b)?);
    let na = ToyNetwork::from_checkpoint(a, sa)?;
    let nb = ToyNetwork::from_checkpoint(b, sb)?;
    if na.output_width() != nb.output_width() {
        return Err(Error::ShapeMismatch("networks disagree on output width".into()));
    }
    let batch = ndarray::Array2::from_shape_fn((probes.len(), first.len()), |(i, j)| probes[i][j]);
    let ya = na.predict(&batch)?;
    let yb = nb.predict(&batch)?;
    Ok(ya.iter().zip(yb.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}
