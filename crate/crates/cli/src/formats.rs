//! On-disk formats: `SIPW` weights, `SIPH` hidden states and plain-text
//! prompt corpora. All numbers are little-endian.

use sipit_core::model::{Activation, ModelConfig, ModelParams};
use sipit_core::numerics::Matrix;

use crate::error::CliError;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SIPW";
pub const STATES_MAGIC: &[u8; 4] = b"SIPH";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CliError::Input(format!("{} file truncated at byte {}", self.what, self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), CliError> {
        if self.take(4)? != magic {
            return Err(CliError::Input(format!("not a {} file (bad magic)", self.what)));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(CliError::Input(format!(
                "unsupported {} version {version}",
                self.what
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), CliError> {
        if self.pos != self.buf.len() {
            return Err(CliError::Input(format!(
                "{} file has {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CliError> {
    let v = u32::try_from(v).map_err(|_| CliError::Input(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Byte size of the weights header for `cfg`.
pub fn weights_header_len(cfg: &ModelConfig) -> usize {
    4 + 4 + 6 * 4 + 4 + 4 * cfg.mlp_dims.len() + 4 + 8
}

pub fn encode_weights(params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<u8>, CliError> {
    params.check_shapes(cfg)?;
    let mut out = Vec::with_capacity(weights_header_len(cfg) + 8 * params.param_count());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.vocab_size,
        cfg.context,
        cfg.width,
        cfg.heads,
        cfg.head_dim,
        cfg.blocks,
    ] {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, cfg.mlp_dims.len())?;
    for &m in &cfg.mlp_dims {
        put_u32(&mut out, m)?;
    }
    out.extend_from_slice(&cfg.activation.code().to_le_bytes());
    out.extend_from_slice(&cfg.ln_epsilon.to_le_bytes());
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_weights(buf: &[u8]) -> Result<(ModelConfig, ModelParams), CliError> {
    let mut r = Reader::new(buf, "weights");
    r.header(WEIGHTS_MAGIC)?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let n_mlp = r.u32()? as usize;
    let mlp_dims = (0..n_mlp)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let activation = Activation::from_code(r.u32()?)?;
    let ln_epsilon = r.f64()?;
    let cfg = ModelConfig {
        vocab_size: dims[0],
        context: dims[1],
        width: dims[2],
        heads: dims[3],
        head_dim: dims[4],
        blocks: dims[5],
        mlp_dims,
        activation,
        ln_epsilon,
    };
    cfg.validate()?;
    let p = cfg.param_count();
    let flat = (0..p).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    let params = ModelParams::from_flat(&cfg, &flat)?;
    Ok((cfg, params))
}

/// Hidden states of one prompt at one layer, with the prompt echoed.
#[derive(Clone, Debug, PartialEq)]
pub struct StateRecord {
    pub layer: usize,
    pub ids: Vec<usize>,
    pub states: Matrix,
}

/// `SIPH`, version, record count, then per record: layer, `T`, `d`, `T`
/// token ids (u32), `T x d` f64 row-major.
pub fn encode_states(records: &[StateRecord]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    out.extend_from_slice(STATES_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, records.len())?;
    for rec in records {
        if rec.ids.len() != rec.states.rows() {
            return Err(CliError::Input(
                "state record rows differ from its prompt length".into(),
            ));
        }
        put_u32(&mut out, rec.layer)?;
        put_u32(&mut out, rec.states.rows())?;
        put_u32(&mut out, rec.states.cols())?;
        for &id in &rec.ids {
            put_u32(&mut out, id)?;
        }
        for v in rec.states.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_states(buf: &[u8]) -> Result<Vec<StateRecord>, CliError> {
    let mut r = Reader::new(buf, "states");
    r.header(STATES_MAGIC)?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let layer = r.u32()? as usize;
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let ids = (0..t)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let data = (0..t * d).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let states = Matrix::new(t, d, data)?;
        records.push(StateRecord { layer, ids, states });
    }
    r.finish()?;
    Ok(records)
}

/// One prompt per line, whitespace-separated decimal ids. Blank lines and
/// lines starting with `#` are skipped. Returns `(line number, ids)`.
pub fn parse_prompts(text: &str, cfg: &ModelConfig) -> Result<Vec<(usize, Vec<usize>)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| CliError::Input(format!("line {line_no}: bad token id {tok:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if ids.len() > cfg.context {
            return Err(CliError::Input(format!(
                "line {line_no}: prompt of length {} exceeds context {}",
                ids.len(),
                cfg.context
            )));
        }
        if let Some(bad) = ids.iter().find(|&&v| v >= cfg.vocab_size) {
            return Err(CliError::Input(format!(
                "line {line_no}: token {bad} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        out.push((line_no, ids));
    }
    Ok(out)
}
