//! Classical separated baseline: JPEG source coding, rate-2/3 LDPC channel
//! coding, Gray 16-QAM over AWGN. Exhibits the cliff effect the learned JSCC
//! schemes avoid.

pub mod jpeg;
pub mod ldpc;
pub mod qam;

use thiserror::Error;

use crate::channel::{awgn, normalize_power, ChannelError, ChannelSpec};
use crate::image::Image;
use crate::metrics::{cbr, psnr, LinkReport};
use crate::rng::RngStream;

pub use jpeg::{jpeg_decode, jpeg_encode, JpegDecodeFailure, JpegError, JPEG_ENCODER_ID};
pub use ldpc::{peg_construct, LdpcCode, LdpcError};
pub use qam::{hard_decision, qam16_demod_llr, qam16_mod, QAM16_SCALE};

/// Decoder iteration cap for the shipped chain.
pub const LDPC_MAX_ITERS: usize = 50;

/// Bits carried by one 16-QAM symbol.
pub const QAM16_BITS_PER_SYMBOL: usize = 4;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Jpeg(#[from] JpegError),
    #[error(transparent)]
    Ldpc(#[from] LdpcError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Converts Eb/N0 (energy per information bit) to the channel Es/N0 in dB:
/// each 16-QAM symbol carries `4 * rate` information bits.
pub fn esn0_db_from_ebn0(ebn0_db: f64, code_rate: f64) -> f64 {
    ebn0_db + 10.0 * (code_rate * QAM16_BITS_PER_SYMBOL as f64).log10()
}

/// Channel symbols the chain transmits for a payload of `payload_bits`:
/// ceil to whole LDPC blocks, then 4 coded bits per symbol. Depends only on
/// the bitstream length and the code, never on noise.
pub fn chain_symbols(payload_bits: usize, code: &LdpcCode) -> usize {
    let blocks = payload_bits.div_ceil(code.k());
    (blocks * code.n).div_ceil(QAM16_BITS_PER_SYMBOL)
}

/// Outcome of one classic-chain transmission.
#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub reconstruction: Image,
    pub report: LinkReport,
    /// False when any LDPC block failed parity or the JPEG stream did not
    /// decode; the reconstruction is then uniform mid-gray (128).
    pub success: bool,
    pub blocks: usize,
    pub jpeg_bytes: usize,
    pub encoder_id: &'static str,
}

fn bytes_to_bits(bytes: &[u8]) -> Vec<u8> {
    let mut bits = Vec::with_capacity(bytes.len() * 8);
    for &b in bytes {
        for k in (0..8).rev() {
            bits.push((b >> k) & 1);
        }
    }
    bits
}

fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|chunk| {
            chunk
                .iter()
                .fold(0u8, |acc, &b| (acc << 1) | (b & 1))
        })
        .collect()
}

/// JPEG + LDPC + 16-QAM over AWGN, with mid-gray failure semantics.
pub fn classic_chain(
    img: &Image,
    quality: u8,
    spec: &ChannelSpec,
    code: &LdpcCode,
    rng: &RngStream,
) -> Result<ChainOutcome, BaselineError> {
    let jpeg_bytes = jpeg_encode(img, quality)?;
    let payload_bits = bytes_to_bits(&jpeg_bytes);
    let k = code.k();
    let blocks = payload_bits.len().div_ceil(k);

    // Block, pad, encode.
    let mut coded_bits: Vec<u8> = Vec::with_capacity(blocks * code.n);
    for b in 0..blocks {
        let start = b * k;
        let end = ((b + 1) * k).min(payload_bits.len());
        let mut msg = payload_bits[start..end].to_vec();
        msg.resize(k, 0);
        coded_bits.extend(code.encode(&msg)?);
    }
    // Pad to whole symbols (n = 1536 is already a multiple of 4).
    while coded_bits.len() % QAM16_BITS_PER_SYMBOL != 0 {
        coded_bits.push(0);
    }

    let tx = normalize_power(&qam16_mod(&coded_bits))?;
    let total_symbols = tx.len();
    let rx = awgn(&tx, spec, rng);
    let llrs = qam16_demod_llr(&rx, spec.noise_variance());

    // Per-block decoding.
    let mut decoded_bits: Vec<u8> = Vec::with_capacity(blocks * k);
    let mut all_ok = true;
    for b in 0..blocks {
        let llr_block = &llrs[b * code.n..(b + 1) * code.n];
        let (msg, ok, _iters) = code.decode(llr_block, LDPC_MAX_ITERS)?;
        all_ok &= ok;
        decoded_bits.extend(msg);
    }
    decoded_bits.truncate(payload_bits.len());

    let (reconstruction, success) = if all_ok {
        match jpeg_decode(&bits_to_bytes(&decoded_bits)) {
            Ok(decoded) if decoded.same_shape(img) => (decoded, true),
            _ => (Image::filled(img.height(), img.width(), 128), false),
        }
    } else {
        (Image::filled(img.height(), img.width(), 128), false)
    };

    let report = LinkReport {
        scheme: "jpeg_ldpc".to_string(),
        snr_db: spec.snr_db,
        cbr: cbr(total_symbols, 0, img),
        psnr_db: psnr(img, &reconstruction).expect("same shape"),
        n_images: 1,
        seed: rng.root_seed(),
    };
    Ok(ChainOutcome {
        reconstruction,
        report,
        success,
        blocks,
        jpeg_bytes: jpeg_bytes.len(),
        encoder_id: JPEG_ENCODER_ID,
    })
}

/// Monte Carlo coded BER of the chain's LDPC + 16-QAM inner link.
///
/// `ebn0_db` is energy per coded channel bit over N0; at least
/// `message_bits` random message bits are pushed through whole blocks.
pub fn ldpc_qam_ber(
    code: &LdpcCode,
    ebn0_db: f64,
    message_bits: usize,
    rng: &RngStream,
) -> Result<f64, BaselineError> {
    use rand::Rng;
    let spec = ChannelSpec::awgn(esn0_db_from_ebn0(ebn0_db, code.rate()));
    let blocks = message_bits.div_ceil(code.k());
    let mut errors = 0usize;
    let mut total = 0usize;
    let mut msg_rng = rng.child(0).rng();
    for b in 0..blocks {
        let msg: Vec<u8> = (0..code.k()).map(|_| msg_rng.random_range(0..2u8)).collect();
        let coded = code.encode(&msg)?;
        let tx = qam16_mod(&coded);
        let rx = awgn(&tx, &spec, &rng.child(1 + b as u64));
        let llrs = qam16_demod_llr(&rx, spec.noise_variance());
        let (decoded, _ok, _) = code.decode(&llrs, LDPC_MAX_ITERS)?;
        errors += decoded
            .iter()
            .zip(&msg)
            .filter(|(a, b)| a != b)
            .count();
        total += code.k();
    }
    Ok(errors as f64 / total as f64)
}

/// Path of the shipped rate-2/3 fixture relative to the crate root.
pub fn shipped_fixture_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/ldpc_n1536_r23.alist")
}
