//! Shared backbone, per-factor subspace heads, and the auxiliary heads the
//! baseline objectives need.
//!
//! The backbone is a ReLU MLP `p → hidden… → h`. Each of the `K` heads is a
//! linear map `h → d`, and the latent is the literal sum of the head outputs:
//! `z = Σ_k W_k·u + b_k`. Every method (including the baselines) uses the
//! same backbone and heads, so all of them expose components to the metrics;
//! the baselines differ only in their objective and one auxiliary head.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub subspaces: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![64, 64],
            latent_dim: 32,
            subspaces: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subspaces < 2 {
            return Err(Error::config(format!("need K >= 2 subspaces, got {}", self.subspaces)));
        }
        if self.latent_dim < self.subspaces {
            return Err(Error::config(format!(
                "latent dim {} must be at least K = {}",
                self.latent_dim, self.subspaces
            )));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        Ok(())
    }

    /// Width of the backbone output `u`.
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

/// The one extra head a baseline objective trains alongside the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxHead {
    None,
    /// `d → p` reconstruction of the input (masked autoencoding).
    Decoder,
    /// `d → d` projection for the contrastive loss.
    Projection,
    /// `d → C` prototype logits for self-distillation.
    Prototypes(usize),
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `g`, as parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// EMA teacher for self-distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub params: ParamStore,
    pub ema_rate: f64,
    pub center: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: EncoderConfig,
    pub aux: AuxHead,
    pub params: ParamStore,
    pub teacher: Option<Teacher>,
}

fn layer_shapes(cfg: &EncoderConfig, aux: AuxHead) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let mut fan_in = cfg.input_dim;
    for (l, &h) in cfg.hidden.iter().enumerate() {
        shapes.push((format!("backbone.{l}.weight"), vec![fan_in, h]));
        shapes.push((format!("backbone.{l}.bias"), vec![h]));
        fan_in = h;
    }
    let d = cfg.latent_dim;
    for k in 0..cfg.subspaces {
        shapes.push((format!("head.{k}.weight"), vec![fan_in, d]));
        shapes.push((format!("head.{k}.bias"), vec![d]));
    }
    let out = match aux {
        AuxHead::None => None,
        AuxHead::Decoder => Some(("decoder", cfg.input_dim)),
        AuxHead::Projection => Some(("projection", d)),
        AuxHead::Prototypes(c) => Some(("prototypes", c)),
    };
    if let Some((name, width)) = out {
        shapes.push((format!("{name}.weight"), vec![d, width]));
        shapes.push((format!("{name}.bias"), vec![width]));
    }
    shapes
}

impl ModelBundle {
    /// Random initialization: He-normal backbone weights, `1/fan_in`-variance
    /// heads and auxiliary head, zero biases.
    pub fn init(cfg: &EncoderConfig, aux: AuxHead, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in layer_shapes(cfg, aux) {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[0] as f64;
                let gain = if name.starts_with("backbone") { 2.0 } else { 1.0 };
                let sd = (gain / fan_in).sqrt();
                let n = shape.iter().product();
                Tensor::new(shape, rng.normals(n).into_iter().map(|v| v * sd).collect())?
            };
            params.push(name, t);
        }
        Ok(Self::assemble(cfg.clone(), aux, params))
    }

    /// All-zero parameters.
    pub fn zeros(cfg: &EncoderConfig, aux: AuxHead) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in layer_shapes(cfg, aux) {
            params.push(name, Tensor::zeros(&shape));
        }
        Ok(Self::assemble(cfg.clone(), aux, params))
    }

    fn assemble(config: EncoderConfig, aux: AuxHead, params: ParamStore) -> Self {
        Self {
            config,
            aux,
            params,
            teacher: None,
        }
    }

    /// Adds an EMA teacher initialized as a copy of the student.
    pub fn with_teacher(mut self, ema_rate: f64) -> Result<Self> {
        let AuxHead::Prototypes(c) = self.aux else {
            return Err(Error::contract("a teacher needs a prototype head"));
        };
        self.teacher = Some(Teacher {
            params: self.params.clone(),
            ema_rate,
            center: Tensor::zeros(&[c]),
        });
        Ok(self)
    }

    /// Trainable scalar count of the student (teacher excluded).
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn head_offset(&self) -> usize {
        2 * self.config.hidden.len()
    }

    fn aux_offset(&self) -> usize {
        self.head_offset() + 2 * self.config.subspaces
    }

    /// Encoder forward pass on `x` (`[B×p]`) with parameters `vars`, which must
    /// come from [`ParamStore::bind`] on a store with this bundle's layout.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<EmbeddingVars> {
        let mut h = x;
        for l in 0..self.config.hidden.len() {
            let a = g.matmul(h, vars[2 * l])?;
            let a = g.add_row(a, vars[2 * l + 1])?;
            h = g.relu(a)?;
        }
        let off = self.head_offset();
        let mut components = Vec::with_capacity(self.config.subspaces);
        for k in 0..self.config.subspaces {
            let c = g.matmul(h, vars[off + 2 * k])?;
            components.push(g.add_row(c, vars[off + 2 * k + 1])?);
        }
        let mut z = components[0];
        for &c in &components[1..] {
            z = g.add(z, c)?;
        }
        Ok(EmbeddingVars { z, components })
    }

    /// Applies the auxiliary head to `z`.
    pub fn aux_forward(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<Var> {
        if self.aux == AuxHead::None {
            return Err(Error::contract("bundle has no auxiliary head"));
        }
        let off = self.aux_offset();
        let y = g.matmul(z, vars[off])?;
        g.add_row(y, vars[off + 1])
    }
}

/// Graph handles for a forward pass.
#[derive(Clone, Debug)]
pub struct EmbeddingVars {
    pub z: Var,
    pub components: Vec<Var>,
}

/// One record's decomposed latent. `components` are ordered (phys, int, obs, ctx).
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceEmbedding {
    pub z: Tensor,
    pub components: Vec<Tensor>,
}

/// Batch form: `z` and every component are `[B×d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbedding {
    pub z: Tensor,
    pub components: Vec<Tensor>,
}

pub fn encode_batch(bundle: &ModelBundle, x: &Tensor) -> Result<BatchEmbedding> {
    let (_, p) = x.require_matrix("encode_batch")?;
    if p != bundle.config.input_dim {
        return Err(Error::Dimension {
            op: "encode_batch",
            left: x.shape().to_vec(),
            right: vec![bundle.config.input_dim],
        });
    }
    let mut g = Graph::new();
    let vars = bundle.params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = bundle.forward(&mut g, &vars, xv)?;
    Ok(BatchEmbedding {
        z: g.value(out.z).clone(),
        components: out.components.iter().map(|&c| g.value(c).clone()).collect(),
    })
}

pub fn encode(bundle: &ModelBundle, x: &Tensor) -> Result<SubspaceEmbedding> {
    let row = Tensor::matrix(1, x.len(), x.data().to_vec())?;
    let b = encode_batch(bundle, &row)?;
    let d = bundle.config.latent_dim;
    Ok(SubspaceEmbedding {
        z: b.z.reshape(vec![d])?,
        components: b
            .components
            .into_iter()
            .map(|c| c.reshape(vec![d]))
            .collect::<Result<_>>()?,
    })
}

/// `teacher ← rate·teacher + (1 − rate)·student`, elementwise.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!("EMA rate must lie in [0, 1], got {rate}")));
    }
    if teacher.len() != student.len() {
        return Err(Error::contract("teacher and student have different layouts"));
    }
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        if t.shape() != s.shape() {
            return Err(Error::Dimension {
                op: "ema_update",
                left: t.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = rate * *tv + (1.0 - rate) * sv;
        }
    }
    Ok(())
}

/// `max/min − 1` over parameter counts; 0 means identical budgets.
pub fn budget_spread(counts: &[usize]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let min = counts.iter().copied().min().unwrap_or(0) as f64;
    if min == 0.0 {
        return f64::INFINITY;
    }
    max / min - 1.0
}

// ── checkpoint file ──────────────────────────────────────────────────────
//
// magic "AURM", u16 version, u32 entry count, then per entry:
// u32 name length, name bytes, u32 rank, u64 per dim, f64 payload;
// all little-endian, followed by a CRC32 of everything before it.

const CKPT_MAGIC: &[u8; 4] = b"AURM";
const CKPT_VERSION: u16 = 1;

pub fn write_checkpoint(out: &mut impl Write, bundle: &ModelBundle) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = bundle
        .params
        .names
        .iter()
        .cloned()
        .zip(&bundle.params.tensors)
        .collect();
    let rate;
    if let Some(t) = &bundle.teacher {
        for (n, p) in t.params.names.iter().zip(&t.params.tensors) {
            entries.push((format!("teacher.{n}"), p));
        }
        entries.push(("teacher.center".into(), &t.center));
        rate = Tensor::scalar(t.ema_rate);
        entries.push(("teacher.ema_rate".into(), &rate));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&buf)?;
    Ok(())
}

pub(crate) struct Cursor<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Splits off and verifies the CRC32 trailer.
pub(crate) fn checked_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::format("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::format("checksum mismatch"));
    }
    Ok(body)
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let body = checked_body(&bytes)?;
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != CKPT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = c.u16()?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::format("entry name is not UTF-8"))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::format("bad shape"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?));
    }
    if c.pos != body.len() {
        return Err(Error::format("trailing bytes after checkpoint entries"));
    }
    bundle_from_entries(entries)
}

fn bundle_from_entries(entries: Vec<(String, Tensor)>) -> Result<ModelBundle> {
    let mut student = ParamStore::new();
    let mut teacher = ParamStore::new();
    let mut center = None;
    let mut rate = None;
    for (name, t) in entries {
        match name.strip_prefix("teacher.") {
            Some("center") => center = Some(t),
            Some("ema_rate") => rate = Some(t.item()?),
            Some(rest) => teacher.push(rest.to_string(), t),
            None => student.push(name, t),
        }
    }
    let shape_of = |n: &str| -> Result<Vec<usize>> {
        student
            .get(n)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| Error::format(format!("checkpoint lacks `{n}`")))
    };
    let mut hidden = Vec::new();
    while let Some(t) = student.get(&format!("backbone.{}.weight", hidden.len())) {
        hidden.push(t.shape()[1]);
    }
    let input_dim = if hidden.is_empty() {
        shape_of("head.0.weight")?[0]
    } else {
        shape_of("backbone.0.weight")?[0]
    };
    let mut subspaces = 0;
    while student.get(&format!("head.{subspaces}.weight")).is_some() {
        subspaces += 1;
    }
    let latent_dim = shape_of("head.0.weight")?[1];
    let config = EncoderConfig {
        input_dim,
        hidden,
        latent_dim,
        subspaces,
    };
    let aux = if student.get("decoder.weight").is_some() {
        AuxHead::Decoder
    } else if student.get("projection.weight").is_some() {
        AuxHead::Projection
    } else if let Some(t) = student.get("prototypes.weight") {
        AuxHead::Prototypes(t.shape()[1])
    } else {
        AuxHead::None
    };
    let expected = layer_shapes(&config, aux);
    if expected.len() != student.len()
        || expected
            .iter()
            .zip(student.names.iter().zip(&student.tensors))
            .any(|((en, es), (n, t))| en != n || es.as_slice() != t.shape())
    {
        return Err(Error::format("checkpoint entries do not form a valid encoder layout"));
    }
    let teacher = match (teacher.is_empty(), center, rate) {
        (true, None, None) => None,
        (false, Some(center), Some(ema_rate)) => {
            if teacher.names != student.names
                || teacher.tensors.iter().zip(&student.tensors).any(|(a, b)| a.shape() != b.shape())
            {
                return Err(Error::format("teacher layout differs from student"));
            }
            Some(Teacher {
                params: teacher,
                ema_rate,
                center,
            })
        }
        _ => return Err(Error::format("incomplete teacher entries")),
    };
    Ok(ModelBundle {
        config,
        aux,
        params: student,
        teacher,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_dim: 6,
            hidden: vec![5, 4],
            latent_dim: 3,
            subspaces: 2,
        }
    }

    fn random_input(seed: u64, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, Rng::new(seed).normals(rows * cols)).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_latent() {
        let b = ModelBundle::zeros(&small(), AuxHead::None).unwrap();
        let e = encode(&b, &Tensor::vector(vec![1.0; 6]).unwrap()).unwrap();
        assert!(e.z.data().iter().all(|&v| v == 0.0));
        assert!(e.components.iter().all(|c| c.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_second_head_leaves_first() {
        let mut b = ModelBundle::init(&small(), AuxHead::None, &mut Rng::new(1)).unwrap();
        for name in ["head.1.weight", "head.1.bias"] {
            let i = b.params.names.iter().position(|n| n == name).unwrap();
            let shape = b.params.tensors[i].shape().to_vec();
            b.params.tensors[i] = Tensor::zeros(&shape);
        }
        let x = random_input(2, 1, 6);
        let e = encode(&b, &Tensor::vector(x.data().to_vec()).unwrap()).unwrap();
        assert_eq!(e.z, e.components[0]);
    }

    #[test]
    fn latent_is_sum_of_components() {
        let b = ModelBundle::init(&EncoderConfig::default(), AuxHead::None, &mut Rng::new(3)).unwrap();
        let x = random_input(4, 256, 32);
        let e = encode_batch(&b, &x).unwrap();
        let mut worst = 0.0f64;
        for i in 0..e.z.len() {
            let s: f64 = e.components.iter().map(|c| c.data()[i]).sum();
            worst = worst.max((e.z.data()[i] - s).abs());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn batch_rows_match_single_encode() {
        let b = ModelBundle::init(&small(), AuxHead::None, &mut Rng::new(5)).unwrap();
        let x = random_input(6, 4, 6);
        let batch = encode_batch(&b, &x).unwrap();
        for i in 0..4 {
            let single = encode(&b, &Tensor::vector(x.row(i).to_vec()).unwrap()).unwrap();
            assert_eq!(single.z.data(), batch.z.row(i));
        }
        // permuted rows and duplicated rows
        let perm = [2, 0, 3, 1, 2];
        let px = x.select_rows(&perm).unwrap();
        let pb = encode_batch(&b, &px).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(pb.z.row(r), batch.z.row(i));
        }
        assert_eq!(pb.z.row(0), pb.z.row(4));
    }

    #[test]
    fn encode_is_bitwise_deterministic() {
        let b = ModelBundle::init(&small(), AuxHead::None, &mut Rng::new(7)).unwrap();
        let x = random_input(8, 10, 6);
        assert_eq!(encode_batch(&b, &x).unwrap(), encode_batch(&b, &x).unwrap());
    }

    #[test]
    fn ema_rates() {
        let student = ModelBundle::init(&small(), AuxHead::None, &mut Rng::new(1)).unwrap().params;
        let original = ModelBundle::init(&small(), AuxHead::None, &mut Rng::new(2)).unwrap().params;

        let mut t = original.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, original);

        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t, student);

        let mut zero = ModelBundle::zeros(&small(), AuxHead::None).unwrap().params;
        let mut twos = zero.clone();
        twos.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(2.0));
        ema_update(&mut zero, &twos, 0.5).unwrap();
        assert!(zero.tensors().iter().all(|t| t.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn ema_shape_mismatch() {
        let a = ModelBundle::zeros(&small(), AuxHead::None).unwrap().params;
        let other = EncoderConfig { latent_dim: 4, ..small() };
        let mut b = ModelBundle::zeros(&other, AuxHead::None).unwrap().params;
        assert!(ema_update(&mut b, &a, 0.5).is_err());
    }

    #[test]
    fn invalid_encoder_config() {
        assert!(EncoderConfig { subspaces: 1, ..small() }.validate().is_err());
        assert!(EncoderConfig { latent_dim: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn default_budgets_within_ten_percent() {
        let cfg = EncoderConfig::default();
        let counts: Vec<usize> = [
            AuxHead::None,
            AuxHead::Decoder,
            AuxHead::Projection,
            AuxHead::Prototypes(32),
        ]
        .into_iter()
        .map(|a| ModelBundle::zeros(&cfg, a).unwrap().param_count())
        .collect();
        assert!(budget_spread(&counts) <= 0.10, "{counts:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        for aux in [AuxHead::None, AuxHead::Decoder, AuxHead::Prototypes(5)] {
            let mut b = ModelBundle::init(&small(), aux, &mut Rng::new(9)).unwrap();
            if let AuxHead::Prototypes(_) = aux {
                b = b.with_teacher(0.99).unwrap();
            }
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &b).unwrap();
            let back = read_checkpoint(&mut &bytes[..]).unwrap();
            assert_eq!(back, b);
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back).unwrap();
            assert_eq!(bytes, again);
        }
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let b = ModelBundle::init(&small(), AuxHead::None, &mut Rng::new(9)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &b).unwrap();
        assert_eq!(&bytes[..4], b"AURM");
        bytes[40] ^= 1;
        assert!(matches!(read_checkpoint(&mut &bytes[..]), Err(Error::Format(_))));
    }
}
