//! Binary corpus files.
//!
//! ```text
//! "SVLB" | version u32 | record count u64
//! record: id u64 | speaker u32 | D u32 | T u32 | T_v u32 | tokens u32
//!         | mel D×T f32 | face 8×T_v f32 | lip 8×T_v f32 | prosody T f32
//!         | tokens u16… | crc32 of the record bytes before it
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use syncvoice_core::datamodel::{MelGrid, Sample, TextSequence, VisualTrack, FACE_CHANNELS, LIP_CHANNELS};
use syncvoice_core::numcore::Grid;

use crate::bytes::{len_u32, put_f32s, put_u32, put_u64, Reader};
use crate::error::{io_err, AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"SVLB";
pub const VERSION: u32 = 1;

fn encode_record(s: &Sample, out: &mut Vec<u8>) -> AppResult<()> {
    let (face, lip) = (s.visual.face(), s.visual.lip());
    if face.rows() != FACE_CHANNELS || lip.rows() != LIP_CHANNELS {
        return Err(AppError::Format(format!(
            "sample {}: the format stores {FACE_CHANNELS} face and {LIP_CHANNELS} lip channels, got {} and {}",
            s.id,
            face.rows(),
            lip.rows()
        )));
    }
    let start = out.len();
    put_u64(out, s.id);
    put_u32(out, s.speaker_id);
    put_u32(out, len_u32(s.mel.bins(), "mel bins")?);
    put_u32(out, len_u32(s.mel.frames(), "mel frames")?);
    put_u32(out, len_u32(s.visual.frames(), "video frames")?);
    put_u32(out, len_u32(s.text.len(), "token count")?);
    put_f32s(out, s.mel.grid().data());
    put_f32s(out, face.data());
    put_f32s(out, lip.data());
    put_f32s(out, &s.latent_prosody);
    for t in s.text.tokens() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    put_u32(out, crc);
    Ok(())
}

pub fn encode_corpus(samples: &[Sample]) -> AppResult<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, samples.len() as u64);
    for s in samples {
        encode_record(s, &mut out)?;
    }
    Ok(out)
}

fn grid(shape: [usize; 2], data: Vec<f64>) -> AppResult<Grid> {
    Ok(Grid::new(shape.to_vec(), data)?)
}

fn decode_record(r: &mut Reader<'_>, index: u64) -> AppResult<Sample> {
    let start = r.pos();
    let id = r.u64()?;
    let speaker_id = r.u32()?;
    let d = r.u32()? as usize;
    let t = r.u32()? as usize;
    let tv = r.u32()? as usize;
    let n_tok = r.u32()? as usize;
    if d == 0 || t == 0 || tv == 0 || n_tok == 0 {
        return Err(AppError::Corruption(format!(
            "record {index}: zero-sized field (D={d}, T={t}, T_v={tv}, tokens={n_tok})"
        )));
    }
    let mel = r.f32s(d * t)?;
    let face = r.f32s(FACE_CHANNELS * tv)?;
    let lip = r.f32s(LIP_CHANNELS * tv)?;
    let prosody = r.f32s(t)?;
    let tokens = (0..n_tok).map(|_| r.u16()).collect::<AppResult<Vec<u16>>>()?;
    let body = r.crc_span(start);
    let stored = r.u32()?;
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(AppError::Corruption(format!(
            "record {index} (id {id}): CRC32 {actual:08x} does not match stored {stored:08x}"
        )));
    }
    let invalid = |e: syncvoice_core::Error| AppError::Corruption(format!("record {index} (id {id}): {e}"));
    Ok(Sample {
        id,
        speaker_id,
        mel: MelGrid::new(grid([d, t], mel)?).map_err(invalid)?,
        visual: VisualTrack::new(grid([FACE_CHANNELS, tv], face)?, grid([LIP_CHANNELS, tv], lip)?).map_err(invalid)?,
        text: TextSequence::new(tokens).map_err(invalid)?,
        latent_prosody: prosody,
    })
}

pub fn decode_corpus(bytes: &[u8]) -> AppResult<Vec<Sample>> {
    let mut r = Reader::new(bytes, "corpus file");
    if r.remaining() < 4 || r.take(4)? != MAGIC {
        return Err(AppError::Format("not a corpus file (missing SVLB magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(AppError::Format(format!(
            "corpus format version {version} is not supported (expected {VERSION})"
        )));
    }
    let count = r.u64()?;
    let mut samples = Vec::new();
    for i in 0..count {
        samples.push(decode_record(&mut r, i)?);
    }
    if r.remaining() != 0 {
        return Err(AppError::Corruption(format!(
            "{} trailing bytes after {count} records",
            r.remaining()
        )));
    }
    Ok(samples)
}

pub fn write_corpus(path: &Path, samples: &[Sample]) -> AppResult<()> {
    std::fs::write(path, encode_corpus(samples)?).map_err(io_err(path))
}

pub fn read_corpus(path: &Path) -> AppResult<Vec<Sample>> {
    decode_corpus(&std::fs::read(path).map_err(io_err(path))?)
}
