//! Per-layer encodings and whole-model compression.
//!
//! An encoding stores the row permutation applied to the reshaped weight,
//! the codebook and one code per subvector. Decoding rebuilds the permuted
//! matrix from centroids and undoes the permutation, so every decoded
//! weight has its original layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use half::f16;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::resolve_groups;
use crate::layout::{merge_subvectors, reshape_record, split_subvectors, unreshape_weight, Geometry, ReshapedWeight, SubvectorMatrix};
use crate::permsearch::{optimize_group_permutation, subvector_covariance, CovarianceStats, GroupChild, Permutation};
use crate::quantize::{clamp_codebook_size, kmeans, reconstruction_error, src, Codebook, Codes, SrcConfig};
use crate::rng::derive_seed;
use crate::tensor_io::{code_bits, CompressedEntry, CompressedModel, EncodedLayer, LayerKind, LayerMeta, ModelCheckpoint, TensorRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Small,
    Large,
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Regime::Small),
            "large" => Ok(Regime::Large),
            other => Err(Error::InvalidArgument(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantizer {
    Src,
    Kmeans,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOverride {
    pub d: Option<usize>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCompressionConfig {
    pub regime: Regime,
    /// Requested codebook size for conv layers.
    pub k: usize,
    /// Requested codebook size for fully-connected layers.
    pub k_fc: usize,
    pub d_pw: usize,
    pub d_fc: usize,
    pub overrides: BTreeMap<String, LayerOverride>,
    pub skip: BTreeSet<String>,
    /// Leave the first conv/fc layer (in topological order) uncompressed.
    pub skip_first: bool,
    pub quantizer: Quantizer,
    /// Quantizer iterations (SR-C runs exactly this many, k-means at most).
    pub iterations: usize,
    pub gamma: f64,
    pub use_permutation: bool,
    pub perm_iters: usize,
    pub seed: u64,
}

impl Default for LayerCompressionConfig {
    fn default() -> Self {
        Self::new(Regime::Small)
    }
}

impl LayerCompressionConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            k: 256,
            k_fc: 2048,
            d_pw: 4,
            d_fc: 4,
            overrides: BTreeMap::new(),
            skip: BTreeSet::new(),
            skip_first: true,
            quantizer: Quantizer::Src,
            iterations: 1000,
            gamma: 0.5,
            use_permutation: true,
            perm_iters: 1000,
            seed: 0,
        }
    }

    pub fn subvector_size(&self, meta: &LayerMeta) -> usize {
        if let Some(d) = self.overrides.get(&meta.name).and_then(|o| o.d) {
            return d;
        }
        match meta.kind {
            LayerKind::Fc => self.d_fc,
            _ if meta.kernel <= 1 => self.d_pw,
            _ => {
                let area = meta.kernel * meta.kernel;
                match self.regime {
                    Regime::Small => area,
                    Regime::Large => 2 * area,
                }
            }
        }
    }

    /// Requested codebook size before clamping.
    pub fn codebook_size(&self, meta: &LayerMeta) -> usize {
        if let Some(k) = self.overrides.get(&meta.name).and_then(|o| o.k) {
            return k;
        }
        match meta.kind {
            LayerKind::Fc => self.k_fc,
            _ => self.k,
        }
    }

    pub fn src_config(&self, seed: u64) -> SrcConfig {
        SrcConfig { iterations: self.iterations, gamma: self.gamma, seed }
    }

    /// Names of the layers whose weights get quantized.
    pub fn compressible_layers(&self, arch: &ModelCheckpoint) -> Result<BTreeSet<String>> {
        let order = arch.topological_order()?;
        let mut out = BTreeSet::new();
        let mut first = self.skip_first;
        for i in order {
            let l = &arch.layers[i];
            if !l.kind.has_weight_matrix() {
                continue;
            }
            if first {
                first = false;
                continue;
            }
            if !self.skip.contains(&l.name) {
                out.insert(l.name.clone());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEncoding {
    pub name: String,
    pub geometry: Geometry,
    pub d: usize,
    /// Row gather order applied to the reshaped weight before splitting.
    pub permutation: Permutation,
    pub codebook: Codebook,
    pub codes: Codes,
    /// Mean squared subvector error at encoding time.
    pub error: f64,
}

impl LayerEncoding {
    pub fn k_eff(&self) -> usize {
        self.codebook.len()
    }

    pub fn meta(&self) -> LayerMeta {
        let g = self.geometry;
        LayerMeta::new(self.name.clone(), g.kind, g.kernel, g.c_in, g.c_out)
    }

    /// Reconstruction in permuted row order.
    pub fn decode_permuted(&self) -> Array2<f64> {
        let mut data = Vec::with_capacity(self.codes.assignments.len() * self.d);
        for &c in &self.codes.assignments {
            data.extend_from_slice(self.codebook.centroid(c as usize));
        }
        let s = SubvectorMatrix { d: self.d, m_hat: self.codes.m_hat, n: self.codes.n, data, geometry: self.geometry };
        merge_subvectors(&s).matrix
    }

    /// Reconstructed reshaped weight in the original row order.
    pub fn decode_matrix(&self) -> Array2<f64> {
        self.permutation.unapply_rows(&self.decode_permuted())
    }

    /// Reconstructed weight tensor in its stored axis order.
    pub fn decode_layer(&self) -> TensorRecord {
        let w = ReshapedWeight::from_matrix(self.decode_matrix(), self.geometry);
        let meta = self.meta();
        TensorRecord::from_f64(meta.weight_name(), meta.weight_shape(), &unreshape_weight(&w))
    }

    pub fn to_stored(&self) -> EncodedLayer {
        let g = self.geometry;
        EncodedLayer {
            name: self.name.clone(),
            kind: g.kind,
            kernel: g.kernel,
            c_in: g.c_in,
            c_out: g.c_out,
            d: self.d,
            k_eff: self.k_eff(),
            codebook: self.codebook.centroids.iter().map(|&v| f16::from_f64(v).to_bits()).collect(),
            codes: self.codes.assignments.clone(),
            permutation: self.permutation.indices().iter().map(|&i| i as u32).collect(),
            perm_block: self.permutation.block(),
        }
    }

    /// Rebuilds an encoding from its stored form; centroids come back at
    /// half precision and the error field is left at zero.
    pub fn from_stored(e: &EncodedLayer) -> Result<Self> {
        let geometry = Geometry { kind: e.kind, kernel: e.kernel, c_in: e.c_in, c_out: e.c_out };
        let centroids = Array2::from_shape_vec(
            (e.k_eff, e.d),
            e.codebook.iter().map(|&b| f16::from_bits(b).to_f64()).collect(),
        )
        .map_err(|err| Error::MalformedFile(format!("codebook of `{}`: {err}", e.name)))?;
        let permutation =
            Permutation::new(e.permutation.iter().map(|&i| i as usize).collect(), e.perm_block.max(1))?;
        let m_hat = geometry.rows() / e.d;
        Ok(Self {
            name: e.name.clone(),
            geometry,
            d: e.d,
            permutation,
            codebook: Codebook { centroids },
            codes: Codes { assignments: e.codes.clone(), m_hat, n: e.c_out },
            error: 0.0,
        })
    }
}

/// Encodes one layer: reshape, permute rows by `perm`, split, quantize.
pub fn encode_layer(
    weight: &TensorRecord,
    meta: &LayerMeta,
    cfg: &LayerCompressionConfig,
    perm: &Permutation,
    seed: u64,
) -> Result<LayerEncoding> {
    let w = reshape_record(weight, meta)?;
    let geometry = w.geometry;
    if perm.len() != geometry.rows() {
        return Err(Error::ShapeMismatch(format!(
            "`{}`: permutation over {} rows, weight has {}",
            meta.name,
            perm.len(),
            geometry.rows()
        )));
    }
    let area = geometry.kernel_area();
    if !perm.block().is_multiple_of(area) {
        return Err(Error::BlockViolation(0));
    }
    let d = cfg.subvector_size(meta);
    let permuted = ReshapedWeight { matrix: perm.apply_rows(&w.matrix), geometry };
    let s = split_subvectors(&permuted, d)?;
    let k_eff = clamp_codebook_size(cfg.codebook_size(meta), s.len());
    let q = match cfg.quantizer {
        Quantizer::Kmeans => kmeans(&s, k_eff, cfg.iterations, seed),
        Quantizer::Src => {
            let stats = if s.len() >= 2 { subvector_covariance(&s)? } else { CovarianceStats::zeros(d) };
            src(&s, &stats, k_eff, &cfg.src_config(seed))?
        }
    };
    Ok(LayerEncoding {
        name: meta.name.clone(),
        geometry,
        d,
        permutation: perm.clone(),
        codebook: q.codebook,
        codes: q.codes,
        error: q.error,
    })
}

/// `‖Ŵ_r − P W_r‖² / (m̂ n)` for the weight `weight` under `enc`.
pub fn quantization_error(weight: &TensorRecord, enc: &LayerEncoding) -> Result<f64> {
    let w = reshape_record(weight, &enc.meta())?;
    let permuted = ReshapedWeight { matrix: enc.permutation.apply_rows(&w.matrix), geometry: w.geometry };
    let s = split_subvectors(&permuted, enc.d)?;
    Ok(reconstruction_error(&s, &enc.codes, &enc.codebook))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub layer_type: &'static str,
    pub shape: Vec<usize>,
    pub dtype: &'static str,
    pub bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompressionReport {
    pub rows: Vec<ReportRow>,
    /// Parameters of the uncompressed model (weights, biases, batchnorm vectors).
    pub param_count: u64,
}

fn layer_type(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv => "Conv2d",
        LayerKind::Deconv => "ConvTranspose2d",
        LayerKind::Fc => "Linear",
        LayerKind::BatchNorm => "BatchNorm2d",
        _ => "",
    }
}

fn codes_dtype(bits: u32) -> &'static str {
    match bits {
        0..=8 => "uint8",
        9..=16 => "int16",
        _ => "int32",
    }
}

/// Weight shape as the reference framework prints it.
fn display_shape(meta: &LayerMeta) -> Vec<usize> {
    let (k, ci, co) = (meta.kernel, meta.c_in, meta.c_out);
    match meta.kind {
        LayerKind::Conv => vec![co, ci, k, k],
        LayerKind::Deconv => vec![ci, co, k, k],
        LayerKind::Fc => vec![co, ci],
        _ => vec![co],
    }
}

fn shape_text(shape: &[usize]) -> String {
    match shape {
        [one] => format!("({one},)"),
        _ => format!("({})", shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")),
    }
}

impl CompressionReport {
    pub fn total_bits(&self) -> u64 {
        self.rows.iter().map(|r| r.bits).sum()
    }

    pub fn total_bytes(&self) -> f64 {
        self.total_bits() as f64 / 8.0
    }

    pub fn total_kb(&self) -> f64 {
        self.total_bytes() / 1024.0
    }

    pub fn total_mb(&self) -> f64 {
        self.total_kb() / 1024.0
    }

    /// Size of the 32-bit model over the compressed size.
    pub fn ratio(&self) -> f64 {
        let bits = self.total_bits();
        if bits == 0 {
            return 1.0;
        }
        32.0 * self.param_count as f64 / bits as f64
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    fn totals(&self) -> [(&'static str, String); 5] {
        let bytes = self.total_bytes();
        [
            ("compression_ratio", format!("{:.2}", self.ratio())),
            ("total_bits", self.total_bits().to_string()),
            ("total_bytes", if bytes.fract() == 0.0 { format!("{bytes:.0}") } else { format!("{bytes}") }),
            ("total_KB", format!("{:.2}", self.total_kb())),
            ("total_MB", format!("{:.2}", self.total_mb())),
        ]
    }

    /// Aligned table; the final line is `total_MB <value>`.
    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let shapes: Vec<String> = self.rows.iter().map(|r| shape_text(&r.shape)).collect();
        let shape_w = shapes.iter().map(|s| s.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<name_w$}  {:<15}  {:<shape_w$}  {:<8}  {:>10}", "name", "layer_type", "shape", "dtype", "bits");
        for (r, shape) in self.rows.iter().zip(&shapes) {
            let _ = writeln!(s, "{:<name_w$}  {:<15}  {:<shape_w$}  {:<8}  {:>10}", r.name, r.layer_type, shape, r.dtype, r.bits);
        }
        for (k, v) in self.totals() {
            let _ = writeln!(s, "{k} {v}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,layer_type,shape,dtype,bits\n");
        for r in &self.rows {
            let shape = r.shape.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.layer_type, shape, r.dtype, r.bits);
        }
        for (k, v) in self.totals() {
            let _ = writeln!(s, "{k},,,,{v}");
        }
        s
    }
}

fn has_bias(arch: &ModelCheckpoint, meta: &LayerMeta) -> bool {
    if arch.tensors.is_empty() {
        meta.kind == LayerKind::Fc
    } else {
        arch.tensor(&meta.bias_name()).is_some()
    }
}

fn vector_row(name: String, kind: LayerKind, len: usize) -> ReportRow {
    ReportRow { name, layer_type: layer_type(kind), shape: vec![len], dtype: "float32", bits: 32 * len as u64 }
}

fn encoded_rows(meta: &LayerMeta, d: usize, k_eff: usize, rows: &mut Vec<ReportRow>) {
    let geometry = Geometry::of(meta);
    let m_hat = geometry.rows() / d;
    let bits = code_bits(k_eff);
    rows.push(ReportRow {
        name: format!("{}.codebook", meta.name),
        layer_type: layer_type(meta.kind),
        shape: vec![k_eff, d],
        dtype: "float16",
        bits: 16 * (k_eff * d) as u64,
    });
    rows.push(ReportRow {
        name: format!("{}.codes_matrix", meta.name),
        layer_type: layer_type(meta.kind),
        shape: vec![meta.c_out, m_hat],
        dtype: codes_dtype(bits),
        bits: bits as u64 * (m_hat * meta.c_out) as u64,
    });
}

fn param_count(arch: &ModelCheckpoint) -> u64 {
    arch.layers
        .iter()
        .map(|l| {
            let g = Geometry::of(l);
            let bias = if has_bias(arch, l) { l.c_out } else { 0 };
            (match l.kind {
                k if k.has_weight_matrix() => g.rows() * l.c_out + bias,
                LayerKind::BatchNorm => 2 * l.c_out,
                _ => 0,
            }) as u64
        })
        .sum()
}

/// Bit accounting from architecture geometry alone.
///
/// Skipped weights and all biases are 32-bit, batchnorms are two 32-bit
/// vectors, codebooks are 16-bit, and codes use `ceil(log2 k_eff)` bits
/// with `k_eff` already clamped.
pub fn bit_report(arch: &ModelCheckpoint, cfg: &LayerCompressionConfig) -> Result<CompressionReport> {
    let compressible = cfg.compressible_layers(arch)?;
    let mut rows = Vec::new();
    for l in &arch.layers {
        match l.kind {
            LayerKind::BatchNorm => {
                rows.push(vector_row(l.weight_name(), l.kind, l.c_out));
                rows.push(vector_row(l.bias_name(), l.kind, l.c_out));
            }
            k if k.has_weight_matrix() => {
                let bias = has_bias(arch, l).then(|| vector_row(l.bias_name(), l.kind, l.c_out));
                if compressible.contains(&l.name) {
                    let d = cfg.subvector_size(l);
                    let g = Geometry::of(l);
                    if d == 0 || !g.rows().is_multiple_of(d) {
                        return Err(Error::IndivisibleBlockSize { rows: g.rows(), d, block: g.kernel_area() });
                    }
                    let k_eff = clamp_codebook_size(cfg.codebook_size(l), g.rows() / d * l.c_out);
                    rows.extend(bias);
                    encoded_rows(l, d, k_eff, &mut rows);
                } else {
                    let shape = display_shape(l);
                    let bits = 32 * shape.iter().product::<usize>() as u64;
                    rows.push(ReportRow { name: l.weight_name(), layer_type: layer_type(l.kind), shape, dtype: "float32", bits });
                    rows.extend(bias);
                }
            }
            _ => {}
        }
    }
    Ok(CompressionReport { rows, param_count: param_count(arch) })
}

/// Bit accounting of an actual compressed model, in the same row order as
/// [`bit_report`].
pub fn report_of(model: &CompressedModel) -> CompressionReport {
    let by_name: BTreeMap<&str, &CompressedEntry> = model.entries.iter().map(|e| (e.name(), e)).collect();
    let mut used = BTreeSet::new();
    let mut rows = Vec::new();
    let mut params = 0u64;
    let mut encoded_params = 0u64;
    let mut raw = |name: String, kind: LayerKind, shape: Option<Vec<usize>>, rows: &mut Vec<ReportRow>, used: &mut BTreeSet<String>| {
        if let Some(CompressedEntry::Uncompressed(t)) = by_name.get(name.as_str()) {
            params += t.numel() as u64;
            rows.push(ReportRow {
                name: t.name.clone(),
                layer_type: layer_type(kind),
                shape: shape.unwrap_or_else(|| t.shape.clone()),
                dtype: "float32",
                bits: 32 * t.numel() as u64,
            });
            used.insert(name);
        }
    };
    for l in &model.layers {
        match l.kind {
            LayerKind::BatchNorm => {
                raw(l.weight_name(), l.kind, None, &mut rows, &mut used);
                raw(l.bias_name(), l.kind, None, &mut rows, &mut used);
            }
            k if k.has_weight_matrix() => match by_name.get(l.name.as_str()) {
                Some(CompressedEntry::Encoded(enc)) => {
                    raw(l.bias_name(), l.kind, None, &mut rows, &mut used);
                    encoded_params += (enc.rows() * enc.c_out) as u64;
                    encoded_rows(&enc.meta(), enc.d, enc.k_eff, &mut rows);
                    used.insert(l.name.clone());
                }
                _ => {
                    raw(l.weight_name(), l.kind, Some(display_shape(l)), &mut rows, &mut used);
                    raw(l.bias_name(), l.kind, None, &mut rows, &mut used);
                }
            },
            _ => {}
        }
    }
    for e in &model.entries {
        if !used.contains(e.name()) {
            raw(e.name().to_string(), LayerKind::Input, None, &mut rows, &mut used);
        }
    }
    CompressionReport { rows, param_count: params + encoded_params }
}

#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    pub model: CompressedModel,
    pub report: CompressionReport,
    pub encodings: Vec<LayerEncoding>,
    /// Per-layer quantization error, in declaration order.
    pub errors: Vec<(String, f64)>,
}

impl CompressionOutcome {
    pub fn summed_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| e).sum()
    }
}

/// Row permutations for every compressible layer, searched per group.
///
/// A layer behind a concat belongs to several groups; each one orders its
/// own run of rows. Runs that do not start and end on a subvector boundary
/// still receive the group order but do not count towards its objective.
fn search_permutations(
    ckpt: &ModelCheckpoint,
    cfg: &LayerCompressionConfig,
    compressible: &BTreeSet<String>,
    matrices: &BTreeMap<String, ReshapedWeight>,
) -> Result<BTreeMap<String, Permutation>> {
    let mut perms = BTreeMap::new();
    if !cfg.use_permutation {
        return Ok(perms);
    }
    let groups = resolve_groups(ckpt)?;
    type Runs = Vec<(String, usize, Vec<usize>)>;
    let found: Vec<Result<Runs>> = groups
        .par_iter()
        .enumerate()
        .map(|(gi, group)| {
            let units = group.channels / group.channel_block;
            let members: Vec<(&str, usize, usize)> = group
                .child_members()
                .filter(|(c, _)| compressible.contains(*c))
                .map(|(name, span)| {
                    let per_channel = matrices[name].rows() / ckpt.layer(name).unwrap().c_in;
                    (name, span.offset * per_channel, span.len * per_channel)
                })
                .collect();
            if members.is_empty() || units < 2 {
                return Ok(Vec::new());
            }
            let slices: Vec<(Array2<f64>, usize, usize)> = members
                .iter()
                .filter_map(|&(name, start, len)| {
                    let d = cfg.subvector_size(ckpt.layer(name).unwrap());
                    let rows = matrices[name].matrix.slice(ndarray::s![start..start + len, ..]);
                    (d > 0 && start % d == 0 && len % d == 0).then(|| (rows.to_owned(), d, len / units))
                })
                .collect();
            if slices.is_empty() {
                return Ok(Vec::new());
            }
            let children: Vec<GroupChild<'_>> =
                slices.iter().map(|(m, d, per_unit)| GroupChild { matrix: m, d: *d, rows_per_channel: *per_unit }).collect();
            let order = optimize_group_permutation(&children, cfg.perm_iters, derive_seed(cfg.seed, gi as u64))?;
            Ok(members
                .iter()
                .map(|&(name, start, len)| {
                    (name.to_string(), start, Permutation::from_groups(order.indices(), len / units).indices().to_vec())
                })
                .collect())
        })
        .collect();
    let mut rows: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for runs in found {
        for (name, start, order) in runs? {
            let all = rows.entry(name.clone()).or_insert_with(|| (0..matrices[&name].rows()).collect());
            for (i, o) in order.into_iter().enumerate() {
                all[start + i] = start + o;
            }
        }
    }
    for (name, indices) in rows {
        let block = Geometry::of(ckpt.layer(&name).unwrap()).kernel_area();
        perms.insert(name, Permutation::new(indices, block)?);
    }
    Ok(perms)
}

/// Resolves groups, searches permutations, quantizes every compressible
/// layer and assembles the container. Deterministic given `cfg.seed`.
pub fn compress_model(ckpt: &ModelCheckpoint, cfg: &LayerCompressionConfig) -> Result<CompressionOutcome> {
    ckpt.validate()?;
    let compressible = cfg.compressible_layers(ckpt)?;
    let mut matrices = BTreeMap::new();
    for name in &compressible {
        let meta = ckpt.layer(name).unwrap();
        let t = ckpt.tensor(&meta.weight_name()).ok_or_else(|| Error::MissingTensor(meta.weight_name()))?;
        matrices.insert(name.clone(), reshape_record(t, meta)?);
    }
    let perms = search_permutations(ckpt, cfg, &compressible, &matrices)?;

    let jobs: Vec<(usize, &LayerMeta)> =
        ckpt.layers.iter().enumerate().filter(|(_, l)| compressible.contains(&l.name)).collect();
    let encodings: Vec<LayerEncoding> = jobs
        .par_iter()
        .map(|&(index, meta)| {
            let g = Geometry::of(meta);
            let perm = perms.get(&meta.name).cloned().unwrap_or_else(|| Permutation::identity(g.rows(), g.kernel_area()));
            let t = ckpt.tensor(&meta.weight_name()).unwrap();
            encode_layer(t, meta, cfg, &perm, derive_seed(cfg.seed, (1 << 32) + index as u64))
        })
        .collect::<Result<_>>()?;

    let by_weight: BTreeMap<String, &LayerEncoding> =
        encodings.iter().map(|e| (format!("{}.weight", e.name), e)).collect();
    let entries = ckpt
        .tensors
        .iter()
        .map(|t| match by_weight.get(&t.name) {
            Some(e) => CompressedEntry::Encoded(e.to_stored()),
            None => CompressedEntry::Uncompressed(t.clone()),
        })
        .collect();
    let model = CompressedModel { layers: ckpt.layers.clone(), edges: ckpt.edges.clone(), entries };
    let report = report_of(&model);
    let errors = encodings.iter().map(|e| (e.name.clone(), e.error)).collect();
    Ok(CompressionOutcome { model, report, encodings, errors })
}

/// Expands a compressed model back into a dense checkpoint using the
/// stored half-precision centroids.
pub fn decompress(model: &CompressedModel) -> Result<ModelCheckpoint> {
    let tensors = model
        .entries
        .iter()
        .map(|e| match e {
            CompressedEntry::Uncompressed(t) => Ok(t.clone()),
            CompressedEntry::Encoded(enc) => {
                let layer = LayerEncoding::from_stored(enc)?;
                let mut t = layer.decode_layer();
                t.name = format!("{}.weight", enc.name);
                Ok(t)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let ckpt = ModelCheckpoint { tensors, layers: model.layers.clone(), edges: model.edges.clone() };
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{reshape_weight, split_matrix};
    use crate::rng::{seeded, Gaussian};
    use crate::tensor_io::parse_arch;

    /// Gaussian values already rounded to the f32 storage precision.
    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let mut g = Gaussian::new();
        (0..n).map(|_| g.sample(&mut rng) as f32 as f64).collect()
    }

    fn kmeans_cfg() -> LayerCompressionConfig {
        LayerCompressionConfig { quantizer: Quantizer::Kmeans, iterations: 50, ..Default::default() }
    }

    #[test]
    fn fc_encoding_matches_direct_kmeans() {
        let meta = LayerMeta::new("fc", LayerKind::Fc, 1, 8, 4);
        let values = random(32, 3);
        let t = TensorRecord::from_f64("fc.weight", vec![8, 4], &values);
        let cfg = LayerCompressionConfig { k_fc: 2, ..kmeans_cfg() };
        let enc = encode_layer(&t, &meta, &cfg, &Permutation::identity(8, 1), 11).unwrap();
        let w = reshape_weight(&values, Geometry::fc(8, 4)).unwrap();
        let s = split_matrix(&w.matrix, 4, w.geometry).unwrap();
        assert_eq!(s.len(), 8);
        let direct = kmeans(&s, 2, 50, 11);
        assert_eq!(enc.codes, direct.codes);
        assert_eq!(enc.codebook, direct.codebook);
        assert_eq!(enc.error, direct.error);
    }

    #[test]
    fn identical_subvectors_encode_exactly() {
        let meta = LayerMeta::new("fc", LayerKind::Fc, 1, 4, 8);
        let col = [0.5, -1.0, 2.0, 0.25];
        let values: Vec<f64> = (0..4).flat_map(|r| std::iter::repeat_n(col[r], 8)).collect();
        let t = TensorRecord::from_f64("fc.weight", vec![4, 8], &values);
        let enc = encode_layer(&t, &meta, &LayerCompressionConfig::default(), &Permutation::identity(4, 1), 0).unwrap();
        assert_eq!(enc.k_eff(), 2);
        assert_eq!(enc.error, 0.0);
        assert_eq!(enc.decode_layer().to_f64(), values);
    }

    #[test]
    fn large_blocks_enforce_filter_permutations() {
        let meta = LayerMeta::new("c", LayerKind::Conv, 3, 4, 8);
        let cfg = LayerCompressionConfig::new(Regime::Large);
        assert_eq!(cfg.subvector_size(&meta), 18);
        let t = TensorRecord::from_f64("c.weight", vec![4, 8, 3, 3], &random(288, 1));
        let row_swap = Permutation::new((0..36).map(|r| if r < 2 { 1 - r } else { r }).collect(), 1).unwrap();
        assert!(matches!(encode_layer(&t, &meta, &cfg, &row_swap, 0), Err(Error::BlockViolation(_))));
        let by_filter = Permutation::from_groups(&[2, 0, 3, 1], 9);
        let enc = encode_layer(&t, &meta, &cfg, &by_filter, 0).unwrap();
        assert_eq!(enc.permutation.block(), 9);
        assert_eq!(enc.codes.m_hat, 2);
    }

    #[test]
    fn decoded_error_matches_reported() {
        let meta = LayerMeta::new("c", LayerKind::Conv, 3, 8, 16);
        let values = random(8 * 16 * 9, 5);
        let t = TensorRecord::from_f64("c.weight", vec![8, 16, 3, 3], &values);
        let perm = Permutation::from_groups(&[3, 1, 7, 0, 2, 6, 5, 4], 9);
        let cfg = LayerCompressionConfig { k: 8, iterations: 40, ..Default::default() };
        let enc = encode_layer(&t, &meta, &cfg, &perm, 9).unwrap();
        let decoded = unreshape_weight(&ReshapedWeight::from_matrix(enc.decode_matrix(), enc.geometry));
        let direct: f64 = decoded.iter().zip(&values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (8.0 * 16.0);
        assert!((direct - enc.error).abs() < 1e-10);
        assert!((quantization_error(&t, &enc).unwrap() - enc.error).abs() < 1e-10);
    }

    #[test]
    fn single_centroid_fills_every_block() {
        let meta = LayerMeta::new("fc", LayerKind::Fc, 1, 8, 2);
        let values = random(16, 8);
        let t = TensorRecord::from_f64("fc.weight", vec![8, 2], &values);
        let perm = Permutation::new(vec![7, 6, 5, 4, 3, 2, 1, 0], 1).unwrap();
        let enc = encode_layer(&t, &meta, &kmeans_cfg(), &perm, 0).unwrap();
        assert_eq!(enc.k_eff(), 1);
        let permuted = enc.decode_permuted();
        let c = enc.codebook.centroid(0);
        for j in 0..2 {
            for r in 0..8 {
                assert_eq!(permuted[[r, j]], c[r % 4]);
            }
        }
        assert_eq!(enc.decode_matrix(), enc.permutation.unapply_rows(&permuted));
    }

    #[test]
    fn stored_form_round_trips_at_half_precision() {
        let meta = LayerMeta::new("fc", LayerKind::Fc, 1, 8, 16);
        let t = TensorRecord::from_f64("fc.weight", vec![8, 16], &random(128, 2));
        let cfg = LayerCompressionConfig { k_fc: 4, ..kmeans_cfg() };
        let enc = encode_layer(&t, &meta, &cfg, &Permutation::identity(8, 1), 0).unwrap();
        let back = LayerEncoding::from_stored(&enc.to_stored()).unwrap();
        assert_eq!(back.codes, enc.codes);
        assert_eq!(back.permutation, enc.permutation);
        for (a, b) in back.codebook.centroids.iter().zip(enc.codebook.centroids.iter()) {
            assert!((a - b).abs() <= b.abs() * 1e-3 + 1e-7);
        }
    }

    const MLP: &str = "\
input input 0 8 8
fc1 fc 1 8 16
relu relu 1 16 16
fc2 fc 1 16 4
output output 0 4 0
edge input fc1
edge fc1 relu
edge relu fc2
edge fc2 output
";

    fn mlp_checkpoint(seed: u64) -> ModelCheckpoint {
        let mut ckpt = parse_arch(MLP).unwrap();
        for (i, l) in ckpt.layers.clone().iter().filter(|l| l.kind == LayerKind::Fc).enumerate() {
            let n = l.c_in * l.c_out;
            ckpt.tensors.push(TensorRecord::from_f64(l.weight_name(), l.weight_shape(), &random(n, seed + i as u64)));
            ckpt.tensors.push(TensorRecord::from_f64(l.bias_name(), vec![l.c_out], &random(l.c_out, seed + 10)));
        }
        ckpt
    }

    #[test]
    fn mlp_compress_is_decodable_and_consistent() {
        let ckpt = mlp_checkpoint(1);
        let cfg = LayerCompressionConfig { skip_first: false, k_fc: 8, iterations: 30, perm_iters: 50, ..Default::default() };
        let out = compress_model(&ckpt, &cfg).unwrap();
        assert_eq!(out.report, bit_report(&ckpt, &cfg).unwrap());
        let back = decompress(&out.model).unwrap();
        assert_eq!(back.tensors.len(), ckpt.tensors.len());
        let again = compress_model(&ckpt, &cfg).unwrap();
        assert_eq!(again.model, out.model);
    }

    #[test]
    fn skipping_everything_keeps_checkpoint() {
        let ckpt = mlp_checkpoint(2);
        let mut cfg = LayerCompressionConfig::default();
        cfg.skip.extend(["fc1".to_string(), "fc2".to_string()]);
        let out = compress_model(&ckpt, &cfg).unwrap();
        assert!((out.report.ratio() - 1.0).abs() < 1e-12);
        assert_eq!(decompress(&out.model).unwrap(), ckpt);
    }

    #[test]
    fn report_totals_and_formatting() {
        let arch = parse_arch(MLP).unwrap();
        let cfg = LayerCompressionConfig { k_fc: 8, ..Default::default() };
        let r = bit_report(&arch, &cfg).unwrap();
        let names: Vec<&str> = r.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["fc1.weight", "fc1.bias", "fc2.bias", "fc2.codebook", "fc2.codes_matrix"]);
        assert_eq!(r.row("fc1.weight").unwrap().shape, vec![16, 8]);
        // 16*4/4 = 16 subvectors clamp k to 4, so 2-bit codes
        assert_eq!(r.row("fc2.codes_matrix").unwrap().bits, 2 * 4 * 4);
        assert_eq!(r.total_bits(), r.rows.iter().map(|r| r.bits).sum::<u64>());
        assert!(r.to_text().trim_end().ends_with(&format!("total_MB {:.2}", r.total_mb())));
        assert_eq!(r.to_csv().lines().count(), 1 + r.rows.len() + 5);
    }

    #[test]
    fn concat_children_get_one_run_per_group() {
        let ckpt = crate::finetune::concat_net(4).to_checkpoint();
        let cfg = LayerCompressionConfig { k: 4, k_fc: 4, iterations: 20, perm_iters: 200, ..Default::default() };
        let outcome = compress_model(&ckpt, &cfg).unwrap();
        let perm = |name: &str| outcome.encodings.iter().find(|e| e.name == name).unwrap().permutation.clone();
        // c reads 4 channels from a and 2 from b, 9 rows each
        let c = perm("c");
        assert!(c.indices()[..36].iter().all(|&i| i < 36));
        assert!(c.indices()[36..].iter().all(|&i| (36..54).contains(&i)));
        assert!(!c.is_identity());
        // d reads 6 channels from c and 2 fixed input channels
        let d = perm("d");
        assert_eq!(&d.indices()[6..], &[6, 7]);
        for enc in &outcome.encodings {
            let meta = ckpt.layer(&enc.name).unwrap();
            let err = quantization_error(ckpt.tensor(&meta.weight_name()).unwrap(), enc).unwrap();
            assert!((err - enc.error).abs() < 1e-12);
        }
    }
}
