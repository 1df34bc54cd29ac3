//! Binary model checkpoints.
//!
//! Little-endian layout: magic `CNMM`, format version, topology, training
//! variant and batch-norm settings, then every named parameter tensor, every
//! free transition entry `(t, l, pruned, logit)` and every batch-norm layer's
//! running statistics. Values are stored as raw `f64`, so a round trip is
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{Activation, Cnmm, Topology, Variant};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CNMM";
const VERSION: u32 = 1;

type Le = LittleEndian;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_u32::<Le>(v)?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    Ok(r.read_u32::<Le>()? as usize)
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)?;
    if n > 1 << 16 {
        return Err(Error::Format(format!("name of {n} bytes")));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("name is not UTF-8".into()))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<Le>(&mut v)?;
    Ok(v)
}

pub fn write_checkpoint<W: Write>(model: &Cnmm, mut w: W) -> Result<()> {
    let topo = &model.topology;
    w.write_all(MAGIC)?;
    w.write_u32::<Le>(VERSION)?;
    for v in [
        topo.steps,
        topo.num_classes,
        topo.input_channels,
        topo.embed_dim,
    ] {
        put_u32(&mut w, v)?;
    }
    w.write_u8(match topo.activation {
        Activation::Relu => 0,
        Activation::Identity => 1,
    })?;
    w.write_u8(match model.variant {
        Variant::Sampled => 0,
        Variant::Expectations => 1,
        Variant::DeterministicSum => 2,
    })?;
    w.write_f64::<Le>(model.bn_momentum)?;
    w.write_f64::<Le>(model.bn_eps)?;
    for t in 0..=topo.steps {
        put_u32(&mut w, topo.channels[t])?;
        put_u32(&mut w, topo.resolution[t].0)?;
        put_u32(&mut w, topo.resolution[t].1)?;
    }
    put_u32(&mut w, topo.exits.len())?;
    for &e in &topo.exits {
        put_u32(&mut w, e)?;
    }

    put_u32(&mut w, model.params.len())?;
    for (_, p) in model.params.iter() {
        put_str(&mut w, &p.name)?;
        put_u32(&mut w, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut w, d)?;
        }
        for &v in p.value.data() {
            w.write_f64::<Le>(v)?;
        }
    }

    let table = &model.table;
    put_u32(&mut w, table.num_free())?;
    for (t, l) in table.free_entries() {
        put_u32(&mut w, t)?;
        put_u32(&mut w, l)?;
        w.write_u8(u8::from(table.is_pruned(t, l)))?;
        w.write_f64::<Le>(table.logit(t, l)?)?;
    }

    put_u32(&mut w, model.norms.len())?;
    for layer in &model.norms {
        put_str(&mut w, &layer.name)?;
        put_u32(&mut w, layer.stats.channels())?;
        for &v in layer.stats.mean.iter().chain(&layer.stats.var) {
            w.write_f64::<Le>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Cnmm> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = r.read_u32::<Le>()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let steps = get_u32(&mut r)?;
    let num_classes = get_u32(&mut r)?;
    let input_channels = get_u32(&mut r)?;
    let embed_dim = get_u32(&mut r)?;
    if steps == 0 || steps > 1 << 10 {
        return Err(Error::Format(format!("implausible chain length {steps}")));
    }
    let activation = match r.read_u8()? {
        0 => Activation::Relu,
        1 => Activation::Identity,
        a => return Err(Error::Format(format!("bad activation tag {a}"))),
    };
    let variant = match r.read_u8()? {
        0 => Variant::Sampled,
        1 => Variant::Expectations,
        2 => Variant::DeterministicSum,
        v => return Err(Error::Format(format!("bad variant tag {v}"))),
    };
    let bn_momentum = r.read_f64::<Le>()?;
    let bn_eps = r.read_f64::<Le>()?;
    let mut channels = Vec::with_capacity(steps + 1);
    let mut resolution = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        channels.push(get_u32(&mut r)?);
        resolution.push((get_u32(&mut r)?, get_u32(&mut r)?));
    }
    let n_exits = get_u32(&mut r)?;
    if n_exits > steps {
        return Err(Error::Format(format!("{n_exits} exits for {steps} steps")));
    }
    let exits = (0..n_exits)
        .map(|_| get_u32(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let topology = Topology {
        steps,
        channels,
        resolution,
        exits,
        num_classes,
        input_channels,
        embed_dim,
        activation,
    };
    let mut model = Cnmm::new(topology, 0).map_err(|e| Error::Format(format!("topology: {e}")))?;
    model.variant = variant;
    model.bn_momentum = bn_momentum;
    model.bn_eps = bn_eps;

    let n_params = get_u32(&mut r)?;
    if n_params != model.params.len() {
        return Err(Error::Format(format!(
            "{n_params} parameters stored, topology has {}",
            model.params.len()
        )));
    }
    for _ in 0..n_params {
        let name = get_str(&mut r)?;
        let rank = get_u32(&mut r)?;
        if rank > 4 {
            return Err(Error::Format(format!("parameter {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| get_u32(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let p = model.params.get_mut(id);
        if p.value.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                p.value.shape()
            )));
        }
        let data = get_f64s(&mut r, p.value.len())?;
        p.value = Tensor::new(shape, data)?;
    }

    let n_free = get_u32(&mut r)?;
    if n_free != model.table.num_free() {
        return Err(Error::Format(format!(
            "{n_free} table entries stored, expected {}",
            model.table.num_free()
        )));
    }
    for _ in 0..n_free {
        let t = get_u32(&mut r)?;
        let l = get_u32(&mut r)?;
        let pruned = r.read_u8()? != 0;
        let logit = r.read_f64::<Le>()?;
        model.table.set_logit(t, l, logit)?;
        if pruned {
            model.table.prune(t, l)?;
        }
    }

    let n_norms = get_u32(&mut r)?;
    if n_norms != model.norms.len() {
        return Err(Error::Format(format!(
            "{n_norms} batch-norm layers stored, expected {}",
            model.norms.len()
        )));
    }
    for _ in 0..n_norms {
        let name = get_str(&mut r)?;
        let c = get_u32(&mut r)?;
        let layer = model
            .norms
            .iter_mut()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::Format(format!("unknown batch-norm layer {name}")))?;
        if layer.stats.channels() != c {
            return Err(Error::Format(format!("layer {name} has {c} channels")));
        }
        layer.stats.mean = get_f64s(&mut r, c)?;
        layer.stats.var = get_f64s(&mut r, c)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn save(model: &Cnmm, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Cnmm> {
    let bytes = fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
