//! Flat binary weight snapshots.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "PFRG" version n_layers d_model n_heads d_ff vocab seq_len target_mask
//! tensor_count { name_len name_bytes ndims dims… f64-le values… }*
//! ```
//!
//! Base weights and every attached adapter are stored as named tensors, so a
//! model round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::adapters::{BoftForm, BoftState, ButterflyLevel, HybridState, LoraAdapter, UnitaryParam};
use crate::error::{Error, Result};
use crate::model::{Adapter, BaseWeights, LayerBase, Model, ModelConfig, Target};
use crate::numerics::{CMatrix, Matrix, C64};

const MAGIC: &[u8; 4] = b"PFRG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn scalar(v: f64) -> Self {
        Self { dims: vec![], data: vec![v] }
    }

    fn vector(v: &[f64]) -> Self {
        Self { dims: vec![v.len()], data: v.to_vec() }
    }

    fn matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    fn complex(v: &[C64]) -> Self {
        Self {
            dims: vec![v.len(), 2],
            data: v.iter().flat_map(|z| [z.re, z.im]).collect(),
        }
    }

    fn cmatrix(m: &CMatrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols(), 2],
            data: m.as_slice().iter().flat_map(|z| [z.re, z.im]).collect(),
        }
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_snapshot(
    w: &mut impl Write,
    cfg: &ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    for v in [cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab, cfg.seq_len] {
        put_u32(w, v)?;
    }
    put_u32(w, cfg.target_mask() as usize)?;
    put_u32(w, tensors.len())?;
    for (name, t) in tensors {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.dims.len())?;
        for &d in &t.dims {
            put_u32(w, d)?;
        }
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::Format(format!("tensor {name}: dims disagree with data")));
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_snapshot(r: &mut impl Read) -> Result<(ModelConfig, BTreeMap<String, Tensor>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 6];
    for v in &mut f {
        *v = get_u32(r)?;
    }
    let mask = get_u32(r)? as u32;
    let cfg = ModelConfig {
        n_layers: f[0],
        d_model: f[1],
        n_heads: f[2],
        d_ff: f[3],
        vocab: f[4],
        seq_len: f[5],
        adapter_targets: ModelConfig::targets_from_mask(mask),
    };
    let count = get_u32(r)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndims = get_u32(r)?;
        let dims = (0..ndims).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.insert(name, Tensor { dims, data });
    }
    Ok((cfg, tensors))
}

/// Write `model` to `path` through a temporary file and a rename.
pub fn save_snapshot(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    write_snapshot(&mut buf, &model.cfg, &model.to_tensors())?;
    crate::report::write_atomic(path, &buf)
}

pub fn load_snapshot(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    let (cfg, tensors) = read_snapshot(&mut bytes.as_slice())?;
    Model::from_tensors(cfg, &tensors)
}

struct Reader<'a> {
    map: &'a BTreeMap<String, Tensor>,
}

impl Reader<'_> {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if !t.dims.is_empty() {
            return Err(Error::Format(format!("{name} is not a scalar")));
        }
        Ok(t.data[0])
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.dims.len() != 1 {
            return Err(Error::Format(format!("{name} is not a vector")));
        }
        Ok(t.data.clone())
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        if t.dims.len() != 2 {
            return Err(Error::Format(format!("{name} is not a matrix")));
        }
        Matrix::from_vec(t.dims[0], t.dims[1], t.data.clone())
    }

    fn complex(&self, name: &str) -> Result<Vec<C64>> {
        let t = self.get(name)?;
        if t.dims.len() != 2 || t.dims[1] != 2 {
            return Err(Error::Format(format!("{name} is not a complex vector")));
        }
        Ok(t.data.chunks(2).map(|c| C64::new(c[0], c[1])).collect())
    }

    fn cmatrix(&self, name: &str) -> Result<CMatrix> {
        let t = self.get(name)?;
        if t.dims.len() != 3 || t.dims[2] != 2 {
            return Err(Error::Format(format!("{name} is not a complex matrix")));
        }
        let data = t.data.chunks(2).map(|c| C64::new(c[0], c[1])).collect();
        CMatrix::from_vec(t.dims[0], t.dims[1], data)
    }

    fn lora(&self, p: &str) -> Result<LoraAdapter> {
        let clamp = if self.has(&format!("{p}.clamp")) {
            Some(self.scalar(&format!("{p}.clamp"))?)
        } else {
            None
        };
        let mut ad = LoraAdapter::new(
            self.matrix(&format!("{p}.a"))?,
            self.matrix(&format!("{p}.b"))?,
            self.scalar(&format!("{p}.alpha"))?,
            clamp,
        )?;
        if self.has(&format!("{p}.anchor")) {
            ad.anchor = Some(self.matrix(&format!("{p}.anchor"))?);
        }
        Ok(ad)
    }

    fn cayley(&self, p: &str, dim: usize) -> Result<BoftState> {
        let mut st = BoftState::cayley(dim, self.scalar(&format!("{p}.eta"))?)?;
        st.set_generator(&self.vector(&format!("{p}.generator"))?)?;
        Ok(st)
    }
}

fn put_lora(out: &mut BTreeMap<String, Tensor>, p: &str, l: &LoraAdapter) {
    out.insert(format!("{p}.a"), Tensor::matrix(&l.a));
    out.insert(format!("{p}.b"), Tensor::matrix(&l.b));
    out.insert(format!("{p}.alpha"), Tensor::scalar(l.alpha));
    if let Some(c) = l.clamp_lambda {
        out.insert(format!("{p}.clamp"), Tensor::scalar(c));
    }
    if let Some(a) = &l.anchor {
        out.insert(format!("{p}.anchor"), Tensor::matrix(a));
    }
}

fn put_cayley(out: &mut BTreeMap<String, Tensor>, p: &str, st: &BoftState) {
    out.insert(format!("{p}.eta"), Tensor::scalar(st.eta_boft));
    out.insert(format!("{p}.generator"), Tensor::vector(st.generator()));
}

impl Model {
    /// Named tensors for every base weight and adapter parameter.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("tok_emb".into(), Tensor::matrix(&self.base.tok_emb));
        out.insert("pos_emb".into(), Tensor::matrix(&self.base.pos_emb));
        out.insert("head".into(), Tensor::matrix(&self.base.head));
        for (l, lb) in self.base.layers.iter().enumerate() {
            for t in Target::ALL {
                out.insert(format!("layer{l}.{t}"), Tensor::matrix(lb.get(t)));
            }
            out.insert(format!("layer{l}.b1"), Tensor::vector(&lb.b1));
            out.insert(format!("layer{l}.b2"), Tensor::vector(&lb.b2));
        }
        for (l, adapters) in self.adapters.iter().enumerate() {
            for (t, ad) in adapters {
                let p = format!("layer{l}.{t}");
                match ad {
                    Adapter::Lora(lora) => put_lora(&mut out, &format!("{p}.lora"), lora),
                    Adapter::Boft(st) if st.form == BoftForm::Cayley => {
                        put_cayley(&mut out, &format!("{p}.cayley"), st)
                    }
                    Adapter::Boft(st) => {
                        for lv in &st.levels {
                            out.insert(
                                format!("{p}.butterfly.level{}", lv.level_index),
                                Tensor::vector(&lv.angles),
                            );
                        }
                    }
                    Adapter::Hybrid(h) => {
                        let hp = format!("{p}.hybrid");
                        put_lora(&mut out, &format!("{hp}.lora"), &h.lora);
                        put_cayley(&mut out, &format!("{hp}.cayley"), &h.boft);
                        out.insert(format!("{hp}.lambda"), Tensor::scalar(h.lambda_last));
                        out.insert(format!("{hp}.eta_lora"), Tensor::scalar(h.eta_lora));
                        out.insert(format!("{hp}.eta_boft"), Tensor::scalar(h.eta_boft));
                        if let Some(e) = h.lambda_ema {
                            out.insert(format!("{hp}.ema"), Tensor::scalar(e));
                        }
                    }
                    Adapter::Unitary { param, structured } => {
                        let up = format!("{p}.unitary");
                        out.insert(format!("{up}.d1"), Tensor::vector(&param.d1));
                        out.insert(format!("{up}.d2"), Tensor::vector(&param.d2));
                        out.insert(format!("{up}.d3"), Tensor::vector(&param.d3));
                        out.insert(format!("{up}.r1"), Tensor::complex(&param.r1));
                        out.insert(format!("{up}.r2"), Tensor::complex(&param.r2));
                        let perm: Vec<f64> = param.perm.iter().map(|&i| i as f64).collect();
                        out.insert(format!("{up}.perm"), Tensor::vector(&perm));
                        out.insert(format!("{up}.u"), Tensor::cmatrix(param.u()));
                        out.insert(
                            format!("{up}.structured"),
                            Tensor::scalar(if *structured { 1.0 } else { 0.0 }),
                        );
                    }
                }
            }
        }
        out
    }

    pub fn from_tensors(cfg: ModelConfig, map: &BTreeMap<String, Tensor>) -> Result<Model> {
        let rd = Reader { map };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                Ok(LayerBase {
                    wq: rd.matrix(&format!("layer{l}.attn_q"))?,
                    wk: rd.matrix(&format!("layer{l}.attn_k"))?,
                    wv: rd.matrix(&format!("layer{l}.attn_v"))?,
                    wo: rd.matrix(&format!("layer{l}.attn_o"))?,
                    w1: rd.matrix(&format!("layer{l}.ff_in"))?,
                    b1: rd.vector(&format!("layer{l}.b1"))?,
                    w2: rd.matrix(&format!("layer{l}.ff_out"))?,
                    b2: rd.vector(&format!("layer{l}.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let base = BaseWeights {
            tok_emb: rd.matrix("tok_emb")?,
            pos_emb: rd.matrix("pos_emb")?,
            layers,
            head: rd.matrix("head")?,
        };
        let mut model = Model::new(cfg, base)?;
        for l in 0..model.cfg.n_layers {
            for t in Target::ALL {
                let p = format!("layer{l}.{t}");
                let (d_out, _) = model.cfg.target_shape(t);
                let adapter = if rd.has(&format!("{p}.lora.a")) {
                    Some(Adapter::Lora(rd.lora(&format!("{p}.lora"))?))
                } else if rd.has(&format!("{p}.cayley.eta")) {
                    Some(Adapter::Boft(rd.cayley(&format!("{p}.cayley"), d_out)?))
                } else if rd.has(&format!("{p}.butterfly.level0")) {
                    let mut levels = Vec::new();
                    while rd.has(&format!("{p}.butterfly.level{}", levels.len())) {
                        let i = levels.len();
                        levels.push(ButterflyLevel {
                            level_index: i,
                            angles: rd.vector(&format!("{p}.butterfly.level{i}"))?,
                        });
                    }
                    let mut st = BoftState::butterfly(d_out, levels.len())?;
                    if levels.iter().any(|lv| lv.angles.len() != d_out / 2) {
                        return Err(Error::Format(format!("{p}: butterfly level length")));
                    }
                    st.levels = levels;
                    Some(Adapter::Boft(st))
                } else if rd.has(&format!("{p}.hybrid.lambda")) {
                    let hp = format!("{p}.hybrid");
                    let ema = if rd.has(&format!("{hp}.ema")) {
                        Some(rd.scalar(&format!("{hp}.ema"))?)
                    } else {
                        None
                    };
                    let mut h = HybridState::new(
                        rd.lora(&format!("{hp}.lora"))?,
                        rd.cayley(&format!("{hp}.cayley"), d_out)?,
                        rd.scalar(&format!("{hp}.eta_lora"))?,
                        rd.scalar(&format!("{hp}.eta_boft"))?,
                        ema,
                    )?;
                    h.lambda_last = rd.scalar(&format!("{hp}.lambda"))?;
                    Some(Adapter::Hybrid(h))
                } else if rd.has(&format!("{p}.unitary.u")) {
                    let up = format!("{p}.unitary");
                    let perm = rd
                        .vector(&format!("{up}.perm"))?
                        .into_iter()
                        .map(|v| v as usize)
                        .collect();
                    let mut param = UnitaryParam::new(
                        rd.vector(&format!("{up}.d1"))?,
                        rd.vector(&format!("{up}.d2"))?,
                        rd.vector(&format!("{up}.d3"))?,
                        rd.complex(&format!("{up}.r1"))?,
                        rd.complex(&format!("{up}.r2"))?,
                        perm,
                    )?;
                    param.set_u(rd.cmatrix(&format!("{up}.u"))?)?;
                    let structured = rd.scalar(&format!("{up}.structured"))? != 0.0;
                    Some(Adapter::Unitary { param, structured })
                } else {
                    None
                };
                if let Some(a) = adapter {
                    model.attach(l, t, a)?;
                }
            }
        }
        Ok(model)
    }
}
