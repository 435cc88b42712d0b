//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `NNCQ`, `u32` version, `u8` scalar width, config text,
//! encoder spec, step counters, parameters, batch-norm statistics, momentum
//! shadow, optimizer buffers, queue state and sampler RNG state. All reals
//! are stored as `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigDoc;
use crate::error::{Error, Result};
use crate::layers::{BatchNormState, ParamKind};
use crate::model::{EncoderSpec, Model, MomentumEncoder};
use crate::numerics::Matrix;
use crate::optim::{OptimConfig, OptimState, Schedule};
use crate::scalar::Scalar;
use crate::support_set::{Replacement, SupportSet, SupportSetState};
use crate::train::Trainer;

pub const MAGIC: &[u8; 4] = b"NNCQ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn reals<T: Scalar>(&mut self, v: &[T]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(x.as_f64()));
    }
    fn matrix<T: Scalar>(&mut self, m: &Matrix<T>) {
        self.usize(m.rows());
        self.usize(m.cols());
        m.as_slice().iter().for_each(|x| self.f64(x.as_f64()));
    }
    fn rng(&mut self, rng: &ChaCha8Rng) {
        self.buf.extend_from_slice(&rng.get_seed());
        self.u64(rng.get_stream());
        self.u128(rng.get_word_pos());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::CorruptCheckpoint(what.to_string())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }
    /// A length prefix that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(corrupt("length prefix exceeds file"));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }
    fn reals<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64().map(T::lit)).collect()
    }
    fn matrix<T: Scalar>(&mut self) -> Result<Matrix<T>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| corrupt("shape overflow"))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(corrupt("matrix exceeds file"));
        }
        let data = (0..n)
            .map(|_| self.f64().map(T::lit))
            .collect::<Result<_>>()?;
        Matrix::from_vec(rows, cols, data)
    }
    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.array()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.u64()?);
        rng.set_word_pos(self.u128()?);
        Ok(rng)
    }
}

/// Fixed-size prefix of a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Byte width of the scalar type the run trained with.
    pub scalar_bytes: u8,
    pub config_text: String,
}

/// A restored run: the config text it was started with and its full state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config_text: String,
    pub trainer: Trainer<T>,
}

fn write_spec(w: &mut Writer, s: &EncoderSpec) {
    w.usize(s.input_dim);
    w.usize(s.backbone_dims.len());
    s.backbone_dims.iter().for_each(|&d| w.usize(d));
    w.usize(s.feature_dim);
    s.projection_dims.iter().for_each(|&d| w.usize(d));
    s.prediction_dims.iter().for_each(|&d| w.usize(d));
    w.u8(s.use_prediction_head as u8);
}

fn read_spec(r: &mut Reader) -> Result<EncoderSpec> {
    let input_dim = r.usize()?;
    let n = r.len(8)?;
    let backbone_dims = (0..n).map(|_| r.usize()).collect::<Result<_>>()?;
    let feature_dim = r.usize()?;
    let projection_dims = [r.usize()?, r.usize()?, r.usize()?];
    let prediction_dims = [r.usize()?, r.usize()?];
    let use_prediction_head = r.u8()? != 0;
    Ok(EncoderSpec {
        input_dim,
        backbone_dims,
        feature_dim,
        projection_dims,
        prediction_dims,
        use_prediction_head,
    })
}

fn write_bn<T: Scalar>(w: &mut Writer, s: &BatchNormState<T>) {
    w.reals(&s.running_mean);
    w.reals(&s.running_var);
    w.f64(s.momentum.as_f64());
    w.f64(s.eps.as_f64());
}

fn read_bn<T: Scalar>(r: &mut Reader) -> Result<BatchNormState<T>> {
    Ok(BatchNormState {
        running_mean: r.reals()?,
        running_var: r.reals()?,
        momentum: T::lit(r.f64()?),
        eps: T::lit(r.f64()?),
    })
}

/// Serializes a trainer; `config_text` is stored verbatim.
pub fn encode_checkpoint<T: Scalar>(config_text: &str, t: &Trainer<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(T::BYTES as u8);
    w.str(config_text);
    write_spec(&mut w, &t.model.spec);
    w.u64(t.step);
    w.u64(t.steps_per_epoch);

    let params: Vec<_> = t.model.params().collect();
    w.usize(params.len());
    for p in params {
        w.str(&p.name);
        w.u8(p.kind.tag());
        w.matrix(&p.values);
    }
    let bns: Vec<_> = t.model.batch_norms().collect();
    w.usize(bns.len());
    bns.iter().for_each(|bn| write_bn(&mut w, &bn.state));

    match &t.model.momentum {
        None => w.u8(0),
        Some(mom) => {
            w.u8(1);
            w.f64(mom.m.as_f64());
            let ps: Vec<_> = mom.shadow.params().collect();
            w.usize(ps.len());
            ps.iter().for_each(|p| w.matrix(&p.values));
            let bns: Vec<_> = mom.shadow.batch_norms().collect();
            w.usize(bns.len());
            bns.iter().for_each(|bn| write_bn(&mut w, &bn.state));
        }
    }

    let c = &t.optim.config;
    for v in [c.momentum, c.weight_decay, c.lars_eps, c.trust_coefficient] {
        w.f64(v);
    }
    w.usize(t.optim.buffers.len());
    t.optim.buffers.iter().for_each(|b| w.matrix(b));

    match &t.queue {
        None => w.u8(0),
        Some(q) => {
            w.u8(1);
            let s = q.state();
            w.matrix(&s.buffer);
            match &s.labels {
                None => w.u8(0),
                Some(l) => {
                    w.u8(1);
                    w.usize(l.len());
                    l.iter().for_each(|&x| w.usize(x));
                }
            }
            w.usize(s.cursor);
            w.u64(s.pushed);
            w.u8((s.replacement == Replacement::Random) as u8);
            w.buf.extend_from_slice(&s.rng_seed);
            w.u64(s.rng_stream);
            w.u128(s.rng_word_pos);
        }
    }
    w.rng(&t.sampler_rng);
    w.buf
}

fn read_header(r: &mut Reader) -> Result<CheckpointHeader> {
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let scalar_bytes = r.u8()?;
    if scalar_bytes != 4 && scalar_bytes != 8 {
        return Err(corrupt("unknown scalar width"));
    }
    Ok(CheckpointHeader {
        version,
        scalar_bytes,
        config_text: r.str()?,
    })
}

pub fn decode_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    read_header(&mut Reader { buf: bytes, pos: 0 })
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = read_header(&mut r)?;
    let run = ConfigDoc::parse(&header.config_text)
        .and_then(|d| d.build())
        .map_err(|e| corrupt(&format!("embedded config: {e}")))?;
    let spec = read_spec(&mut r)?;
    spec.validate().map_err(|e| corrupt(&e.to_string()))?;
    let step = r.u64()?;
    let steps_per_epoch = r.u64()?;
    if steps_per_epoch == 0 {
        return Err(corrupt("zero steps per epoch"));
    }

    // Shapes come from the spec; values are overwritten below.
    let mut model = Model::<T>::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n = r.usize()?;
    if n != model.params().count() {
        return Err(corrupt("parameter count"));
    }
    for p in model.params_mut() {
        let name = r.str()?;
        let kind = ParamKind::from_tag(r.u8()?);
        let values = r.matrix()?;
        if name != p.name || kind != Some(p.kind) || values.shape() != p.values.shape() {
            return Err(corrupt(&format!(
                "parameter {name} does not match {}",
                p.name
            )));
        }
        p.values = values;
    }
    let n = r.usize()?;
    if n != model.batch_norms().count() {
        return Err(corrupt("batch-norm count"));
    }
    for bn in model.batch_norms_mut() {
        let s = read_bn(&mut r)?;
        if s.running_mean.len() != bn.dim() || s.running_var.len() != bn.dim() {
            return Err(corrupt("batch-norm width"));
        }
        bn.state = s;
    }

    if r.u8()? == 1 {
        let m = T::lit(r.f64()?);
        let mut mom = MomentumEncoder::new(&model.encoder, m)?;
        let n = r.usize()?;
        if n != mom.shadow.params().count() {
            return Err(corrupt("shadow parameter count"));
        }
        for p in mom.shadow.params_mut() {
            let values = r.matrix()?;
            if values.shape() != p.values.shape() {
                return Err(corrupt("shadow parameter shape"));
            }
            p.values = values;
        }
        let n = r.usize()?;
        if n != mom.shadow.batch_norms().count() {
            return Err(corrupt("shadow batch-norm count"));
        }
        for bn in mom.shadow.batch_norms_mut() {
            bn.state = read_bn(&mut r)?;
        }
        model.momentum = Some(mom);
    }

    let config = OptimConfig {
        momentum: r.f64()?,
        weight_decay: r.f64()?,
        lars_eps: r.f64()?,
        trust_coefficient: r.f64()?,
    };
    let n = r.len(16)?;
    let buffers: Vec<Matrix<T>> = (0..n).map(|_| r.matrix()).collect::<Result<_>>()?;
    if !buffers.is_empty()
        && (buffers.len() != model.params().count()
            || buffers
                .iter()
                .zip(model.params())
                .any(|(b, p)| b.shape() != p.values.shape()))
    {
        return Err(corrupt("optimizer buffers"));
    }

    let queue = if r.u8()? == 1 {
        let buffer = r.matrix()?;
        let labels = if r.u8()? == 1 {
            let n = r.len(8)?;
            Some((0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let state = SupportSetState {
            buffer,
            labels,
            cursor: r.usize()?,
            pushed: r.u64()?,
            replacement: if r.u8()? == 1 {
                Replacement::Random
            } else {
                Replacement::Fifo
            },
            rng_seed: r.array()?,
            rng_stream: r.u64()?,
            rng_word_pos: r.u128()?,
        };
        Some(SupportSet::from_state(state)?)
    } else {
        None
    };
    let sampler_rng = r.rng()?;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }

    let train = run.train;
    let schedule = Schedule::new(
        train.effective_lr(),
        train.warmup_epochs * steps_per_epoch,
        train.epochs * steps_per_epoch,
    )
    .map_err(|e| corrupt(&e.to_string()))?;
    Ok(Checkpoint {
        config_text: header.config_text,
        trainer: Trainer {
            config: train,
            model,
            optim: OptimState { config, buffers },
            queue,
            schedule,
            step,
            steps_per_epoch,
            sampler_rng,
        },
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint<T: Scalar>(path: &Path, config_text: &str, t: &Trainer<T>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(config_text, t))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::CheckpointMissing(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&read_file(path)?)
}

pub fn load_header(path: &Path) -> Result<CheckpointHeader> {
    decode_header(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigDoc;
    use crate::data::{gen_blobs, BlobSpec, Split};
    use crate::train::pretrain;

    const CONFIG: &str = "objective = nnclr
queue_size = 64
batch_size = 16
epochs = 2
encoder.backbone_dims = 8
encoder.feature_dim = 8
encoder.projection_hidden = 8,8
encoder.prediction_hidden = 8
encoder.embed_dim = 4
momentum_encoder.enabled = true
optim.base_lr = 0.5
";

    fn trained() -> Trainer<f64> {
        let run = ConfigDoc::parse(CONFIG).unwrap().build().unwrap();
        let data = gen_blobs::<f64>(
            &BlobSpec {
                num_classes: 3,
                samples_per_class: 16,
                ambient_dim: 4,
                cluster_std: 0.1,
                seed: 0,
            },
            Split::Train,
        )
        .unwrap();
        pretrain(&run.train, &data, Some(&data.labels))
            .unwrap()
            .trainer
    }

    #[test]
    fn round_trip_is_exact() {
        let t = trained();
        let bytes = encode_checkpoint(CONFIG, &t);
        let back = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(back.config_text, CONFIG);
        let mut orig_model = t.model.clone();
        orig_model.zero_grad();
        assert_eq!(back.trainer.model, orig_model);
        assert_eq!(back.trainer.optim, t.optim);
        assert_eq!(
            back.trainer.queue.unwrap().state(),
            t.queue.unwrap().state()
        );
        assert_eq!(back.trainer.sampler_rng, t.sampler_rng);
        assert_eq!(back.trainer.step, t.step);
        assert_eq!(
            encode_checkpoint(CONFIG, &decode_checkpoint::<f64>(&bytes).unwrap().trainer),
            bytes
        );
    }

    #[test]
    fn header_errors() {
        let bytes = encode_checkpoint(CONFIG, &trained());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f64>(&bad),
            Err(Error::BadMagic)
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint::<f64>(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]),
            Err(Error::CorruptCheckpoint(_))
        ));
        assert!(matches!(
            load_checkpoint::<f64>(Path::new("/nonexistent/run.nncq")),
            Err(Error::CheckpointMissing(_))
        ));
    }
}
