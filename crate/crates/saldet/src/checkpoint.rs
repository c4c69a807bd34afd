//! Binary serialization of the full training state.
//!
//! Wire layout, all integers and floats little-endian: the magic "HYFN",
//! a u32 format version, and a u32 tensor count; then per tensor a u16
//! name length, the UTF-8 name, a u8 dtype tag (0 = 64-bit real, 1 =
//! 32-bit real), a u8 rank, the dims as u32s, and the raw payload. After
//! the last tensor: a u32 config length, the config JSON, and a u64 step
//! counter. Nothing may follow.
//!
//! Writing always uses the 64-bit tag, so a load(save(x)) round trip is
//! bit-exact; 32-bit payloads are accepted on read and widened.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::config::Config;
use crate::error::PipelineError;
use crate::model::Model;
use crate::objective::Sgd;

pub const VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"HYFN";
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Self {
        NamedTensor { name: name.into(), dims, values }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config_json: String,
    pub step: u64,
}

impl Checkpoint {
    pub fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>, PipelineError> {
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| PipelineError::invalid("too many tensors for the format"))?;
        let config_len = u32::try_from(self.config_json.len())
            .map_err(|_| PipelineError::invalid("config JSON too long for the format"))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len()).map_err(|_| {
                PipelineError::invalid(format!("tensor name {:?} too long", t.name))
            })?;
            let rank = u8::try_from(t.dims.len()).map_err(|_| {
                PipelineError::invalid(format!("tensor {} rank too high", t.name))
            })?;
            let numel: usize = t.dims.iter().product();
            if numel != t.values.len() {
                return Err(PipelineError::invalid(format!(
                    "tensor {} has {} values for dims {:?}",
                    t.name,
                    t.values.len(),
                    t.dims
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(rank);
            for &d in &t.dims {
                let d = u32::try_from(d).map_err(|_| {
                    PipelineError::invalid(format!("tensor {} dim too large", t.name))
                })?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&config_len.to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    /// Strict decode; `origin` names the source in errors.
    pub fn decode(bytes: &[u8], origin: &str) -> Result<Checkpoint, PipelineError> {
        let mut r = Reader { bytes, pos: 0, origin };
        let magic_at = r.pos;
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail_at(magic_at, "bad magic, want \"HYFN\""));
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail_at(version_at, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.fail_at(name_at, format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let dtype_at = r.pos;
            let dtype = r.u8("dtype tag")?;
            if dtype != DTYPE_F64 && dtype != DTYPE_F32 {
                return Err(r.fail_at(dtype_at, format!("unknown dtype tag {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let dims_at = r.pos;
                let d = r.u32("dim")? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| r.fail_at(dims_at, format!("tensor {name} too large")))?;
                dims.push(d);
            }
            let width = if dtype == DTYPE_F64 { 8 } else { 4 };
            let payload_len = numel
                .checked_mul(width)
                .ok_or_else(|| r.fail_at(r.pos, format!("tensor {name} too large")))?;
            let payload = r.take(payload_len, "tensor payload")?;
            let values: Vec<f64> = if dtype == DTYPE_F64 {
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect()
            } else {
                payload
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
                    .collect()
            };
            tensors.push(NamedTensor { name, dims, values });
        }
        let config_len = r.u32("config length")? as usize;
        let config_at = r.pos;
        let config_json = std::str::from_utf8(r.take(config_len, "config JSON")?)
            .map_err(|_| r.fail_at(config_at, "config JSON is not UTF-8"))?
            .to_string();
        let step = r.u64("step")?;
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors, config_json, step })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes)
            .map_err(|e| PipelineError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, PipelineError> {
        let name = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| PipelineError::io(&name, e))?;
        Checkpoint::decode(&bytes, &name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, what: impl Into<String>) -> PipelineError {
        PipelineError::format(self.origin, offset, what)
    }

    /// Truncation points at the end of what exists.
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], PipelineError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail_at(
                self.bytes.len(),
                format!("truncated {what}, need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, PipelineError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, PipelineError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

// ── Training state ──────────────────────────────────────────────────────

/// Everything needed to resume or run inference: the model with its norm
/// statistics, the optimizer (current lr and velocity), the dataset mean,
/// and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub opt: Sgd,
    pub mean: [f64; 3],
    pub step: u64,
}

/// Collects model parameters, norm running statistics, optimizer velocity
/// (named velocity.<param>), the dataset mean, and the current learning
/// rate into one checkpoint.
pub fn pack(model: &Model, opt: &Sgd, mean: [f64; 3], step: u64) -> Checkpoint {
    let mut tensors = Vec::new();
    let mut param_names = Vec::new();
    model.visit(&mut |name, t| {
        param_names.push(name.clone());
        tensors.push(NamedTensor::new(name, t.dims().to_vec(), t.values().to_vec()));
    });
    model.visit_buffers(&mut |name, buf| {
        tensors.push(NamedTensor::new(name, vec![buf.len()], buf.to_vec()));
    });
    for (name, v) in param_names.iter().zip(opt.velocity()) {
        tensors.push(NamedTensor::new(format!("velocity.{name}"), vec![v.len()], v.clone()));
    }
    tensors.push(NamedTensor::new("data.mean", vec![3], mean.to_vec()));
    tensors.push(NamedTensor::new("opt.lr", vec![1], vec![opt.lr]));
    Checkpoint { tensors, config_json: model.config.to_json(), step }
}

/// Rebuilds the training state from a checkpoint. Every model tensor must
/// be present with matching dims, velocity is all-or-nothing, and stray
/// tensors are rejected.
pub fn unpack(ckpt: &Checkpoint) -> Result<TrainState, PipelineError> {
    let config = Config::from_json(&ckpt.config_json)?;
    let mut model = Model::init(&config)?;
    let by_name: HashMap<&str, &NamedTensor> =
        ckpt.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if by_name.len() != ckpt.tensors.len() {
        return Err(PipelineError::invalid("duplicate tensor names in checkpoint"));
    }
    let mut consumed: HashSet<&str> = HashSet::new();
    let mut problem: Option<String> = None;

    model.visit_mut(&mut |name, t| {
        if problem.is_some() {
            return;
        }
        match by_name.get(name.as_str()) {
            Some(saved) if saved.dims == t.dims() && saved.values.len() == t.len() => {
                consumed.insert(saved.name.as_str());
                t.values_mut().copy_from_slice(&saved.values);
            }
            Some(saved) => {
                problem = Some(format!(
                    "tensor {name} has dims {:?}, model expects {:?}",
                    saved.dims,
                    t.dims()
                ));
            }
            None => problem = Some(format!("missing tensor {name}")),
        }
    });
    model.visit_buffers_mut(&mut |name, buf| {
        if problem.is_some() {
            return;
        }
        match by_name.get(name.as_str()) {
            Some(saved) if saved.dims == [buf.len()] && saved.values.len() == buf.len() => {
                consumed.insert(saved.name.as_str());
                buf.copy_from_slice(&saved.values);
            }
            Some(saved) => {
                problem = Some(format!(
                    "statistic {name} has dims {:?}, model expects [{}]",
                    saved.dims,
                    buf.len()
                ));
            }
            None => problem = Some(format!("missing statistic {name}")),
        }
    });
    if let Some(what) = problem {
        return Err(PipelineError::invalid(what));
    }

    let lr_tensor = ckpt
        .find("opt.lr")
        .ok_or_else(|| PipelineError::invalid("missing tensor opt.lr"))?;
    if lr_tensor.values.len() != 1 {
        return Err(PipelineError::invalid("opt.lr must hold one value"));
    }
    consumed.insert("opt.lr");
    let mut opt = Sgd::new(lr_tensor.values[0], config.momentum, config.weight_decay);

    let has_velocity = ckpt.tensors.iter().any(|t| t.name.starts_with("velocity."));
    if has_velocity {
        let mut velocity = Vec::new();
        let mut sizes = Vec::new();
        model.visit(&mut |name, t| sizes.push((name, t.len())));
        for (name, len) in sizes {
            let key = format!("velocity.{name}");
            let saved = by_name
                .get(key.as_str())
                .ok_or_else(|| PipelineError::invalid(format!("missing tensor {key}")))?;
            if saved.values.len() != len {
                return Err(PipelineError::invalid(format!(
                    "{key} holds {} values, parameter has {len}",
                    saved.values.len()
                )));
            }
            consumed.insert(saved.name.as_str());
            velocity.push(saved.values.clone());
        }
        opt.set_velocity(velocity);
    }

    let mean_tensor = ckpt
        .find("data.mean")
        .ok_or_else(|| PipelineError::invalid("missing tensor data.mean"))?;
    if mean_tensor.values.len() != 3 {
        return Err(PipelineError::invalid("data.mean must hold three values"));
    }
    consumed.insert("data.mean");
    let mean = [mean_tensor.values[0], mean_tensor.values[1], mean_tensor.values[2]];

    for t in &ckpt.tensors {
        if !consumed.contains(t.name.as_str()) {
            return Err(PipelineError::invalid(format!("unexpected tensor {}", t.name)));
        }
    }
    Ok(TrainState { model, opt, mean, step: ckpt.step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::fusion::FusionVariant;
    use crate::gradcheck;
    use crate::model::stack_batch;
    use crate::rng;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::Rng;

    fn bits(values: &[f64]) -> Vec<u64> {
        values.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let ckpt = Checkpoint::default();
        let bytes = ckpt.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes, "mem").unwrap(), ckpt);
    }

    #[test]
    fn encoding_matches_the_documented_byte_layout() {
        let ckpt = Checkpoint {
            tensors: vec![NamedTensor::new("w", vec![2], vec![1.0, -2.5])],
            config_json: "{}".to_string(),
            step: 7,
        };
        let mut want: Vec<u8> = Vec::new();
        want.extend_from_slice(b"HYFN");
        want.extend_from_slice(&1u32.to_le_bytes()); // version
        want.extend_from_slice(&1u32.to_le_bytes()); // tensor count
        want.extend_from_slice(&1u16.to_le_bytes()); // name length
        want.push(b'w');
        want.push(0); // dtype f64
        want.push(1); // rank
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.5f64).to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes()); // config length
        want.extend_from_slice(b"{}");
        want.extend_from_slice(&7u64.to_le_bytes());
        assert_eq!(ckpt.encode().unwrap(), want);
    }

    #[test]
    fn thirty_two_bit_payloads_are_widened_on_read() {
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"HYFN");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(1); // dtype f32
        bytes.push(1);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-1.25f32).to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        let ckpt = Checkpoint::decode(&bytes, "mem").unwrap();
        assert_eq!(ckpt.tensors[0].values, vec![0.5, -1.25]);
    }

    #[test]
    fn thousand_random_tensors_round_trip_bit_exactly() {
        let mut r = rng::seeded(0xC0FFEE);
        let mut tensors = Vec::with_capacity(1000);
        for i in 0..1000 {
            let rank = r.random_range(0..=4usize);
            let dims: Vec<usize> = (0..rank).map(|_| r.random_range(1..=4usize)).collect();
            let numel: usize = dims.iter().product();
            let values: Vec<f64> = (0..numel)
                .map(|k| match k % 7 {
                    0 => 0.0,
                    1 => -0.0,
                    2 => f64::MIN_POSITIVE,
                    3 => f64::INFINITY,
                    4 => f64::NAN,
                    _ => rng::uniform(&mut r, -1e9, 1e9),
                })
                .collect();
            tensors.push(NamedTensor::new(format!("tensor.{i}"), dims, values));
        }
        let ckpt = Checkpoint {
            tensors,
            config_json: Config::default().to_json(),
            step: u64::MAX - 3,
        };
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes, "mem").unwrap();
        assert_eq!(back.tensors.len(), ckpt.tensors.len());
        for (a, b) in ckpt.tensors.iter().zip(&back.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            assert_eq!(bits(&a.values), bits(&b.values));
        }
        assert_eq!(back.config_json, ckpt.config_json);
        assert_eq!(back.step, ckpt.step);
        // And the bytes themselves are reproduced exactly.
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let dir = std::env::temp_dir().join("saldet-checkpoint-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.ckpt");
        let ckpt = Checkpoint {
            tensors: vec![NamedTensor::new("a.b", vec![2, 3], (0..6).map(f64::from).collect())],
            config_json: Config::default().to_json(),
            step: 42,
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(std::fs::read(&path).unwrap(), ckpt.encode().unwrap());
    }

    fn valid_bytes() -> Vec<u8> {
        Checkpoint {
            tensors: vec![NamedTensor::new("w", vec![2], vec![1.0, 2.0])],
            config_json: "{}".to_string(),
            step: 1,
        }
        .encode()
        .unwrap()
    }

    #[test]
    fn malformed_files_are_rejected_with_offsets() {
        let check = |bytes: &[u8], needle: &str| {
            let err = Checkpoint::decode(bytes, "mem").unwrap_err().to_string();
            assert!(
                err.contains(needle) && err.contains("at byte"),
                "wanted {needle:?} in {err:?}"
            );
        };

        check(b"", "truncated magic");
        check(b"HYFM\x01\x00\x00\x00", "bad magic");
        let mut v = valid_bytes();
        v[4] = 9;
        check(&v, "unsupported version 9");

        // dtype tag lives right after the 1-byte name.
        let mut v = valid_bytes();
        v[15] = 2;
        check(&v, "unknown dtype tag 2");

        // Truncating the payload reports the shortfall.
        let v = valid_bytes();
        check(&v[..v.len() - 20], "truncated");

        // Oversized dims overflow the element count before allocating.
        let mut v = valid_bytes();
        v[16] = 8; // rank 8
        check(&v, "truncated");

        // Non-UTF-8 name.
        let mut v = valid_bytes();
        v[14] = 0xFF;
        check(&v, "not UTF-8");

        // Trailing garbage after the step counter.
        let mut v = valid_bytes();
        v.push(0);
        check(&v, "trailing");
    }

    #[test]
    fn truncation_offset_is_the_file_end() {
        let v = valid_bytes();
        let cut = &v[..v.len() - 4];
        let err = Checkpoint::decode(cut, "mem").unwrap_err();
        match err {
            PipelineError::Format { offset, .. } => assert_eq!(offset, cut.len()),
            other => panic!("wrong error {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&bytes, "fuzz");
        }

        #[test]
        fn decode_never_panics_on_mutated_valid_files(
            idx in 0usize..64,
            byte in any::<u8>(),
        ) {
            let mut v = valid_bytes();
            let i = idx % v.len();
            v[i] = byte;
            let _ = Checkpoint::decode(&v, "fuzz");
        }
    }

    fn trained_toy_state() -> TrainState {
        let config = Config {
            input_size: 8,
            blocks: vec![(1, 3), (1, 4)],
            head_channels: 3,
            fusion_variant: FusionVariant::Hyper,
            ..Config::default()
        };
        let mut model = Model::init(&config).unwrap();
        let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
        let mut r = rng::substream(config.seed, "ckpt-test");
        for _ in 0..2 {
            let mut tape = Tape::new();
            let (bound, binding) = model.register(&mut tape);
            let imgs: Vec<_> =
                (0..2).map(|_| gradcheck::random_tensor(&[3, 8, 8], &mut r)).collect();
            let batch = stack_batch(&imgs).unwrap();
            let x_t = tape.constant(batch.clone());
            let x_r = tape.constant(batch);
            let sal = model.forward(&mut tape, &bound, x_t, x_r, true).unwrap();
            let sq = tape.mul(sal, sal).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            tape.backward(loss).unwrap();
            opt.step(&tape, &binding, &mut |f| model.visit_mut(f)).unwrap();
        }
        TrainState { model, opt, mean: [0.25, 0.5, 0.125], step: 2 }
    }

    #[test]
    fn training_state_survives_pack_encode_decode_unpack() {
        let state = trained_toy_state();
        let ckpt = pack(&state.model, &state.opt, state.mean, state.step);
        let bytes = ckpt.encode().unwrap();
        let back = unpack(&Checkpoint::decode(&bytes, "mem").unwrap()).unwrap();

        let collect = |m: &Model| {
            let mut v = Vec::new();
            m.visit(&mut |name, t| v.push((name, bits(t.values()))));
            m.visit_buffers(&mut |name, buf| v.push((name, bits(buf))));
            v
        };
        assert_eq!(collect(&state.model), collect(&back.model));
        assert_eq!(state.opt.velocity().len(), back.opt.velocity().len());
        for (a, b) in state.opt.velocity().iter().zip(back.opt.velocity()) {
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(state.opt.lr.to_bits(), back.opt.lr.to_bits());
        assert_eq!(bits(&state.mean), bits(&back.mean));
        assert_eq!(back.step, 2);
        // Re-packing the restored state reproduces the identical bytes.
        assert_eq!(pack(&back.model, &back.opt, back.mean, back.step).encode().unwrap(), bytes);
    }

    #[test]
    fn unpack_rejects_mismatches_and_strays() {
        let state = trained_toy_state();
        let good = pack(&state.model, &state.opt, state.mean, state.step);

        let mut reshaped = good.clone();
        let idx = reshaped.tensors.iter().position(|t| t.name == "fuse.head.kernel").unwrap();
        reshaped.tensors[idx].dims.swap(0, 1);
        let err = unpack(&reshaped).unwrap_err().to_string();
        assert!(err.contains("fuse.head.kernel"), "{err}");

        let mut stray = good.clone();
        stray.tensors.push(NamedTensor::new("mystery", vec![1], vec![0.0]));
        let err = unpack(&stray).unwrap_err().to_string();
        assert!(err.contains("unexpected tensor mystery"), "{err}");

        let mut missing = good.clone();
        missing.tensors.retain(|t| t.name != "data.mean");
        let err = unpack(&missing).unwrap_err().to_string();
        assert!(err.contains("data.mean"), "{err}");

        let mut dropped = good;
        dropped.tensors.remove(0);
        assert!(unpack(&dropped).is_err());
    }
}
