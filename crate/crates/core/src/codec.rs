//! Learned analysis/synthesis transforms and the variable-rate JSCC codec.
//!
//! The analysis transform maps an RGB image to a token grid; a per-token
//! encoder (conditioned on the retrieved knowledge-base vector through
//! feature-wise modulation) emits a real vector per token that is truncated to
//! the token's symbol budget and packed into complex channel symbols. The
//! decoder mirrors this with zero-filled missing dimensions, conditioned on
//! the same vector and on the channel SNR, and the synthesis transform
//! restores the image. Variable rate is mask-based: one parameter set serves
//! every budget in the rate set.

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{awgn, normalize_power, ChannelError, ChannelSpec, SymbolBlock};
use crate::entropy::{
    entropy_map_with_grads, rate_loss, rate_preset_map, EntropyError, EntropyModel, EntropyMap,
    GaussianParams, RateIndexMap, RateSet,
};
use crate::image::Image;
use crate::nn::{
    leaky_relu, leaky_relu_backward, Adam, Conv2d, Conv2dCache, Film, FilmCache, GradSet, Linear,
    ParamSet, Upsample2x,
};
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("image {h}x{w} not divisible by reduction factor {r}")]
    IndivisibleDims { h: usize, w: usize, r: usize },
    #[error("feature map contains non-finite values")]
    NonFiniteFeatures,
    #[error("feature grid must be non-empty")]
    EmptyGrid,
    #[error("rate index {idx} out of range for a rate set of {len} entries")]
    RateIndexOutOfRange { idx: usize, len: usize },
    #[error("rate map grid {rm_h}x{rm_w} does not match token grid {f_h}x{f_w}")]
    GridMismatch {
        rm_h: usize,
        rm_w: usize,
        f_h: usize,
        f_w: usize,
    },
    #[error("conditioning vector has dimension {got}, expected {expected}")]
    ConditioningDim { got: usize, expected: usize },
    #[error("payload length {got} inconsistent with rate map total {expected}")]
    PayloadLength { got: usize, expected: usize },
    #[error("token_dim {token_dim} must be at least twice the maximum rate {max_rate}")]
    TokenDimTooSmall { token_dim: usize, max_rate: u32 },
    #[error("reduction factor {0} unsupported; expected 4, 8 or 16")]
    BadReduction(usize),
    #[error("backbone {0:?} is not available in this build; use \"conv\"")]
    UnsupportedBackbone(Backbone),
    #[error("training produced a non-finite loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

/// Latent token grid produced by the analysis transform.
///
/// Tokens are stored row-major as `[grid_h * grid_w, depth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub depth: usize,
    pub tokens: Array2<f64>,
}

impl FeatureMap {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        depth: usize,
        tokens: Array2<f64>,
    ) -> Result<Self, CodecError> {
        if grid_h * grid_w == 0 {
            return Err(CodecError::EmptyGrid);
        }
        debug_assert_eq!(tokens.dim(), (grid_h * grid_w, depth));
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::NonFiniteFeatures);
        }
        Ok(Self {
            grid_h,
            grid_w,
            depth,
            tokens,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Conv,
    WindowAttention,
}

/// Architecture and interface dimensions of the codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub backbone: Backbone,
    /// Channels per latent token.
    pub token_dim: usize,
    /// Pixels per token edge; must divide the input height and width.
    pub reduction: usize,
    /// Widths of the two analysis stages (mirrored by synthesis).
    pub width1: usize,
    pub width2: usize,
    /// Hidden width of the JSCC encoder/decoder token networks.
    pub hidden: usize,
    /// Hidden width of the entropy model.
    pub entropy_hidden: usize,
    /// Dimension of the knowledge-base conditioning interface.
    pub conditioning_dim: usize,
    /// Fixed gain applied to analysis output so integer bins are populated.
    pub feature_gain: f64,
    /// Centre and scale for the decoder's SNR conditioning input.
    pub snr_norm_center_db: f64,
    pub snr_norm_scale_db: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Conv,
            token_dim: 64,
            reduction: 16,
            width1: 32,
            width2: 64,
            hidden: 128,
            entropy_hidden: 96,
            conditioning_dim: 512,
            feature_gain: 8.0,
            snr_norm_center_db: 10.0,
            snr_norm_scale_db: 20.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self, rate_set: &RateSet) -> Result<(), CodecError> {
        if !matches!(self.reduction, 4 | 8 | 16) {
            return Err(CodecError::BadReduction(self.reduction));
        }
        if self.backbone != Backbone::Conv {
            return Err(CodecError::UnsupportedBackbone(self.backbone));
        }
        // Truncation keeps the first 2*rate reals of a token vector, so the
        // vector must be long enough for the largest budget.
        if self.token_dim < 2 * rate_set.max_rate() as usize {
            return Err(CodecError::TokenDimTooSmall {
                token_dim: self.token_dim,
                max_rate: rate_set.max_rate(),
            });
        }
        Ok(())
    }

    fn analysis_strides(&self) -> [usize; 3] {
        match self.reduction {
            4 => [4, 1, 1],
            8 => [4, 2, 1],
            _ => [4, 2, 2],
        }
    }

    fn synthesis_ups(&self) -> usize {
        match self.reduction {
            4 => 2,
            8 => 3,
            _ => 4,
        }
    }

    fn synthesis_widths(&self) -> Vec<usize> {
        // width2 tapering to 3 output channels across the upsampling stages.
        let ups = self.synthesis_ups();
        let mut widths = vec![self.width2];
        for i in 1..ups {
            widths.push((self.width2 >> i).max(12));
        }
        widths.push(3);
        widths
    }
}

/// One encoded transmission unit: payload symbols plus side information.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    pub payload: SymbolBlock,
    pub rate_map: RateIndexMap,
    /// Knowledge-base index bits delivered by the genie side channel.
    pub side_bits: Vec<bool>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl SymbolFrame {
    /// Side symbols for the KB index, charged at 2 bits per symbol.
    pub fn kb_side_symbols(&self) -> usize {
        self.side_bits.len().div_ceil(2)
    }

    /// Side symbols for announcing the rate map, at 2 bits per symbol.
    pub fn rate_map_side_symbols(&self, rates: &RateSet) -> usize {
        self.rate_map.side_symbols(rates)
    }

    pub fn total_side_symbols(&self, rates: &RateSet) -> usize {
        self.kb_side_symbols() + self.rate_map_side_symbols(rates)
    }
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct AnalysisNet {
    convs: [Conv2d; 3],
}

#[derive(Debug, Clone)]
struct AnalysisCache {
    caches: [Conv2dCache; 3],
    pre: [Array3<f64>; 2],
    grid: (usize, usize),
}

impl AnalysisNet {
    fn new(ps: &mut ParamSet, cfg: &CodecConfig, rng: &mut ChaCha12Rng) -> Self {
        let [s1, s2, s3] = cfg.analysis_strides();
        let convs = [
            Conv2d::new(ps, "analysis.c1", 3, cfg.width1, 5, s1, 2, rng),
            Conv2d::new(ps, "analysis.c2", cfg.width1, cfg.width2, 3, s2, 1, rng),
            Conv2d::new(ps, "analysis.c3", cfg.width2, cfg.token_dim, 3, s3, 1, rng),
        ];
        Self { convs }
    }

    fn forward(&self, ps: &ParamSet, x: &Array3<f64>, gain: f64) -> (Array2<f64>, AnalysisCache) {
        let (y1, c1) = self.convs[0].forward(ps, x);
        let a1 = leaky_relu(&y1);
        let (y2, c2) = self.convs[1].forward(ps, &a1);
        let a2 = leaky_relu(&y2);
        let (y3, c3) = self.convs[2].forward(ps, &a2);
        let (d, gh, gw) = y3.dim();
        let tokens = grid_to_tokens(&y3.mapv(|v| v * gain));
        let _ = d;
        (
            tokens,
            AnalysisCache {
                caches: [c1, c2, c3],
                pre: [y1, y2],
                grid: (gh, gw),
            },
        )
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &AnalysisCache,
        g_tokens: &Array2<f64>,
        gain: f64,
        grads: &mut GradSet,
    ) {
        let g3 = tokens_to_grid(&g_tokens.mapv(|v| v * gain), cache.grid);
        let ga2 = self.convs[2].backward(ps, &cache.caches[2], &g3, grads);
        let g2 = leaky_relu_backward(&cache.pre[1], &ga2);
        let ga1 = self.convs[1].backward(ps, &cache.caches[1], &g2, grads);
        let g1 = leaky_relu_backward(&cache.pre[0], &ga1);
        let _ = self.convs[0].backward(ps, &cache.caches[0], &g1, grads);
    }
}

#[derive(Debug, Clone)]
struct SynthesisNet {
    convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
struct SynthesisCache {
    caches: Vec<Conv2dCache>,
    pre: Vec<Array3<f64>>,
}

impl SynthesisNet {
    fn new(ps: &mut ParamSet, cfg: &CodecConfig, rng: &mut ChaCha12Rng) -> Self {
        let widths = cfg.synthesis_widths();
        let mut convs = Vec::with_capacity(widths.len());
        let mut in_ch = cfg.token_dim;
        for (i, &out_ch) in widths.iter().enumerate() {
            convs.push(Conv2d::new(
                ps,
                &format!("synthesis.c{i}"),
                in_ch,
                out_ch,
                3,
                1,
                1,
                rng,
            ));
            in_ch = out_ch;
        }
        Self { convs }
    }

    /// Tokens on the grid in, continuous `[3, H, W]` out.
    fn forward(
        &self,
        ps: &ParamSet,
        tokens: &Array2<f64>,
        grid: (usize, usize),
    ) -> (Array3<f64>, SynthesisCache) {
        let mut x = tokens_to_grid(tokens, grid);
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, c) = conv.forward(ps, &x);
            caches.push(c);
            if i == last {
                x = y;
            } else {
                pre.push(y.clone());
                x = Upsample2x.forward(&leaky_relu(&y));
            }
        }
        (x, SynthesisCache { caches, pre })
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &SynthesisCache,
        g_out: &Array3<f64>,
        grads: &mut GradSet,
    ) -> Array2<f64> {
        let last = self.convs.len() - 1;
        let mut g = self.convs[last].backward(ps, &cache.caches[last], g_out, grads);
        for i in (0..last).rev() {
            let g_act = Upsample2x.backward(&g);
            let g_pre = leaky_relu_backward(&cache.pre[i], &g_act);
            g = self.convs[i].backward(ps, &cache.caches[i], &g_pre, grads);
        }
        let (_, gh, gw) = g.dim();
        grid_to_tokens_grad(&g, (gh, gw))
    }
}

#[derive(Debug, Clone)]
struct TokenMlp {
    l1: Linear,
    film_cond: Film,
    film_snr: Option<Film>,
    l2: Linear,
}

#[derive(Debug, Clone)]
struct TokenMlpCache {
    x: Array2<f64>,
    pre1: Array2<f64>,
    film_cond: FilmCache,
    film_snr: Option<FilmCache>,
    h_mod: Array2<f64>,
}

impl TokenMlp {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        cond_dim: usize,
        with_snr: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let l1 = Linear::new(ps, &format!("{name}.l1"), in_dim, hidden, false, rng);
        let film_cond = Film::new(ps, &format!("{name}.film_cond"), hidden, cond_dim, rng);
        let film_snr = with_snr.then(|| Film::new(ps, &format!("{name}.film_snr"), hidden, 1, rng));
        let l2 = Linear::new(ps, &format!("{name}.l2"), hidden, out_dim, false, rng);
        Self {
            l1,
            film_cond,
            film_snr,
            l2,
        }
    }

    fn forward(
        &self,
        ps: &ParamSet,
        x: &Array2<f64>,
        cond: &Array1<f64>,
        snr_norm: Option<f64>,
    ) -> (Array2<f64>, TokenMlpCache) {
        let pre1 = self.l1.forward(ps, x);
        let h = leaky_relu(&pre1);
        let (h_cond, film_cond) = self.film_cond.forward(ps, &h, cond);
        let (h_mod, film_snr) = match (&self.film_snr, snr_norm) {
            (Some(film), Some(s)) => {
                let snr_vec = Array1::from(vec![s]);
                let (hm, c) = film.forward(ps, &h_cond, &snr_vec);
                (hm, Some(c))
            }
            _ => (h_cond, None),
        };
        let y = self.l2.forward(ps, &h_mod);
        (
            y,
            TokenMlpCache {
                x: x.clone(),
                pre1,
                film_cond,
                film_snr,
                h_mod,
            },
        )
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &TokenMlpCache,
        gy: &Array2<f64>,
        grads: &mut GradSet,
    ) -> Array2<f64> {
        let g_hmod = self.l2.backward(ps, &cache.h_mod, gy, grads);
        let g_hcond = match (&self.film_snr, &cache.film_snr) {
            (Some(film), Some(c)) => film.backward(c, &g_hmod, grads),
            _ => g_hmod,
        };
        let g_h = self.film_cond.backward(&cache.film_cond, &g_hcond, grads);
        let g_pre1 = leaky_relu_backward(&cache.pre1, &g_h);
        self.l1.backward(ps, &cache.x, &g_pre1, grads)
    }
}

fn grid_to_tokens(x: &Array3<f64>) -> Array2<f64> {
    let (d, gh, gw) = x.dim();
    let mut tokens = Array2::zeros((gh * gw, d));
    for c in 0..d {
        for i in 0..gh {
            for j in 0..gw {
                tokens[[i * gw + j, c]] = x[[c, i, j]];
            }
        }
    }
    tokens
}

fn tokens_to_grid(tokens: &Array2<f64>, grid: (usize, usize)) -> Array3<f64> {
    let (gh, gw) = grid;
    let (_, d) = tokens.dim();
    let mut x = Array3::zeros((d, gh, gw));
    for c in 0..d {
        for i in 0..gh {
            for j in 0..gw {
                x[[c, i, j]] = tokens[[i * gw + j, c]];
            }
        }
    }
    x
}

fn grid_to_tokens_grad(g: &Array3<f64>, grid: (usize, usize)) -> Array2<f64> {
    // Adjoint of tokens_to_grid is grid_to_tokens (a permutation).
    let _ = grid;
    grid_to_tokens(g)
}

// ---------------------------------------------------------------------------
// Codec model
// ---------------------------------------------------------------------------

/// Complete learned codec: transforms, JSCC token networks, entropy model,
/// the rate set, and the parameters that drive them.
#[derive(Debug, Clone)]
pub struct CodecModel {
    pub params: ParamSet,
    pub config: CodecConfig,
    pub rate_set: RateSet,
    pub eta: f64,
    pub train_snr_db: f64,
    pub root_seed: u64,
    analysis: AnalysisNet,
    synthesis: SynthesisNet,
    encoder: TokenMlp,
    decoder: TokenMlp,
    pub entropy_model: EntropyModel,
}

impl CodecModel {
    pub fn new(
        config: CodecConfig,
        rate_set: RateSet,
        eta: f64,
        train_snr_db: f64,
        root_seed: u64,
    ) -> Result<Self, CodecError> {
        config.validate(&rate_set)?;
        let mut rng = RngStream::derive_for_model(root_seed);
        let mut ps = ParamSet::new();
        let analysis = AnalysisNet::new(&mut ps, &config, &mut rng);
        let synthesis = SynthesisNet::new(&mut ps, &config, &mut rng);
        let encoder = TokenMlp::new(
            &mut ps,
            "jscc.enc",
            config.token_dim,
            config.hidden,
            config.token_dim,
            config.conditioning_dim,
            false,
            &mut rng,
        );
        let decoder = TokenMlp::new(
            &mut ps,
            "jscc.dec",
            config.token_dim,
            config.hidden,
            config.token_dim,
            config.conditioning_dim,
            true,
            &mut rng,
        );
        let entropy_model =
            EntropyModel::new(&mut ps, config.token_dim, config.entropy_hidden, &mut rng);
        Ok(Self {
            params: ps,
            config,
            rate_set,
            eta,
            train_snr_db,
            root_seed,
            analysis,
            synthesis,
            encoder,
            decoder,
            entropy_model,
        })
    }

    pub fn grid_for(&self, img: &Image) -> Result<(usize, usize), CodecError> {
        let r = self.config.reduction;
        if img.height() % r != 0 || img.width() % r != 0 {
            return Err(CodecError::IndivisibleDims {
                h: img.height(),
                w: img.width(),
                r,
            });
        }
        Ok((img.height() / r, img.width() / r))
    }

    /// Semantic extractor: image to latent token grid.
    pub fn analysis(&self, img: &Image) -> Result<FeatureMap, CodecError> {
        self.analysis_with(&self.params, img).map(|(f, _)| f)
    }

    fn analysis_with(
        &self,
        ps: &ParamSet,
        img: &Image,
    ) -> Result<(FeatureMap, AnalysisCache), CodecError> {
        let (gh, gw) = self.grid_for(img)?;
        let x = image_to_unit(img);
        let (tokens, cache) = self.analysis.forward(ps, &x, self.config.feature_gain);
        let f = FeatureMap::new(gh, gw, self.config.token_dim, tokens)?;
        Ok((f, cache))
    }

    /// Semantic restorer: tokens back to an 8-bit image.
    pub fn synthesis(&self, f: &FeatureMap) -> Image {
        let (x, _) = self
            .synthesis
            .forward(&self.params, &f.tokens, (f.grid_h, f.grid_w));
        unit_to_image(&x)
    }

    /// Predicted Gaussian parameters and entropy map for a feature map.
    pub fn entropy_map_for(&self, f: &FeatureMap) -> Result<(GaussianParams, EntropyMap), CodecError> {
        let (gp, _) = self.entropy_model.predict(&self.params, &f.tokens)?;
        let eval = entropy_map_with_grads(f, &gp)?;
        Ok((gp, eval.map))
    }

    /// Rate preset map from the entropy map at this model's `eta`.
    pub fn rate_map_for(&self, f: &FeatureMap) -> Result<RateIndexMap, CodecError> {
        let (_, e) = self.entropy_map_for(f)?;
        Ok(rate_preset_map(&e, &self.rate_set, self.eta)?)
    }

    /// Variable-length JSCC encoding of a feature map under a rate map.
    pub fn jscc_encode(
        &self,
        f: &FeatureMap,
        rm: &RateIndexMap,
        cond: &Array1<f64>,
        side_bits: Vec<bool>,
    ) -> Result<SymbolFrame, CodecError> {
        self.jscc_encode_with(&self.params, f, rm, cond, side_bits)
            .map(|(frame, _, _)| frame)
    }

    fn check_cond(&self, cond: &Array1<f64>) -> Result<(), CodecError> {
        if cond.len() != self.config.conditioning_dim {
            return Err(CodecError::ConditioningDim {
                got: cond.len(),
                expected: self.config.conditioning_dim,
            });
        }
        Ok(())
    }

    fn check_rate_map(&self, f: &FeatureMap, rm: &RateIndexMap) -> Result<(), CodecError> {
        let (rm_h, rm_w) = rm.grid();
        if (rm_h, rm_w) != (f.grid_h, f.grid_w) {
            return Err(CodecError::GridMismatch {
                rm_h,
                rm_w,
                f_h: f.grid_h,
                f_w: f.grid_w,
            });
        }
        if let Some(&idx) = rm.idx.iter().find(|&&i| i >= self.rate_set.len()) {
            return Err(CodecError::RateIndexOutOfRange {
                idx,
                len: self.rate_set.len(),
            });
        }
        Ok(())
    }

    fn jscc_encode_with(
        &self,
        ps: &ParamSet,
        f: &FeatureMap,
        rm: &RateIndexMap,
        cond: &Array1<f64>,
        side_bits: Vec<bool>,
    ) -> Result<(SymbolFrame, TokenMlpCache, NormCache), CodecError> {
        self.check_cond(cond)?;
        self.check_rate_map(f, rm)?;
        let (z, cache) = self.encoder.forward(ps, &f.tokens, cond, None);
        // Truncate each token to its first 2*rate reals and pack complex pairs.
        let mut reals: Vec<f64> = Vec::new();
        for tok in 0..f.n_tokens() {
            let rate = self.rate_set.rate(rm.idx[[tok / f.grid_w, tok % f.grid_w]]) as usize;
            for k in 0..2 * rate {
                reals.push(z[[tok, k]]);
            }
        }
        let (payload, norm) = if reals.is_empty() {
            (
                SymbolBlock(vec![]),
                NormCache {
                    reals: vec![],
                    power: 0.0,
                },
            )
        } else {
            let symbols: Vec<Complex64> = reals
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect();
            let block = SymbolBlock(symbols);
            let normalized = normalize_power(&block)?;
            let power = block.mean_power();
            (
                normalized,
                NormCache {
                    reals,
                    power,
                },
            )
        };
        Ok((
            SymbolFrame {
                payload,
                rate_map: rm.clone(),
                side_bits,
                grid_h: f.grid_h,
                grid_w: f.grid_w,
            },
            cache,
            norm,
        ))
    }

    /// Decodes a received frame into a feature map for synthesis.
    pub fn jscc_decode(
        &self,
        frame: &SymbolFrame,
        spec: &ChannelSpec,
        cond: &Array1<f64>,
    ) -> Result<FeatureMap, CodecError> {
        self.jscc_decode_with(&self.params, frame, spec, cond)
            .map(|(f, _)| f)
    }

    fn snr_norm(&self, snr_db: f64) -> f64 {
        (snr_db - self.config.snr_norm_center_db) / self.config.snr_norm_scale_db
    }

    fn jscc_decode_with(
        &self,
        ps: &ParamSet,
        frame: &SymbolFrame,
        spec: &ChannelSpec,
        cond: &Array1<f64>,
    ) -> Result<(FeatureMap, TokenMlpCache), CodecError> {
        self.check_cond(cond)?;
        let d = self.config.token_dim;
        let n = frame.grid_h * frame.grid_w;
        let expected = frame.rate_map.total_symbols(&self.rate_set);
        if frame.payload.len() != expected {
            return Err(CodecError::PayloadLength {
                got: frame.payload.len(),
                expected,
            });
        }
        let mut u = Array2::zeros((n, d));
        let mut cursor = 0usize;
        for tok in 0..n {
            let rate =
                self.rate_set
                    .rate(frame.rate_map.idx[[tok / frame.grid_w, tok % frame.grid_w]])
                    as usize;
            for k in 0..rate {
                let s = frame.payload.0[cursor + k];
                u[[tok, 2 * k]] = s.re;
                u[[tok, 2 * k + 1]] = s.im;
            }
            cursor += rate;
        }
        let (tokens, cache) = self
            .decoder
            .forward(ps, &u, cond, Some(self.snr_norm(spec.snr_db)));
        let f = FeatureMap::new(frame.grid_h, frame.grid_w, d, tokens)?;
        Ok((f, cache))
    }

    /// Transmit one image end to end (encode, channel, decode, synthesis).
    ///
    /// Returns the reconstruction and the frame that crossed the channel.
    pub fn transmit(
        &self,
        img: &Image,
        rm: &RateIndexMap,
        cond: &Array1<f64>,
        side_bits: Vec<bool>,
        spec: &ChannelSpec,
        rng: &RngStream,
    ) -> Result<(Image, SymbolFrame), CodecError> {
        let f = self.analysis(img)?;
        let frame = self.jscc_encode(&f, rm, cond, side_bits)?;
        let received = SymbolFrame {
            payload: awgn(&frame.payload, spec, rng),
            ..frame.clone()
        };
        let decoded = self.jscc_decode(&received, spec, cond)?;
        Ok((self.synthesis(&decoded), frame))
    }

    pub fn zero_cond(&self) -> Array1<f64> {
        Array1::zeros(self.config.conditioning_dim)
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    reals: Vec<f64>,
    power: f64,
}

fn image_to_unit(img: &Image) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    let mut x = Array3::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                x[[c, i, j]] = img.get(i, j, c) as f64 / 255.0;
            }
        }
    }
    x
}

fn unit_to_image(x: &Array3<f64>) -> Image {
    let (_, h, w) = x.dim();
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let v = (x[[c, i, j]] * 255.0).round().clamp(0.0, 255.0);
                data.push(v as u8);
            }
        }
    }
    Image::from_raw(h, w, data).expect("synthesis dimensions are valid")
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Per-step loss statistics: distortion is MSE in the unit intensity scale,
/// rate is mean bits per token, total = distortion + lambda_rd * rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub distortion: f64,
    pub rate_bits: f64,
    pub total: f64,
}

/// How the training step picks each image's rate map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatePolicy {
    /// Entropy-driven preset map at the model's eta (variable-rate scheme).
    EntropyPreset,
    /// Uniform map at a fixed index (fixed-rate comparison scheme).
    Uniform(usize),
}

impl CodecModel {
    /// One Adam step on `distortion + lambda_rd * rate` over a batch, with the
    /// channel simulated inside the step.
    ///
    /// The rate map is treated as a constant within the step; gradients reach
    /// the rate through the Gaussian likelihoods (straight-through over bin
    /// rounding) and reach the transforms through the payload path.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        batch: &[&Image],
        spec: &ChannelSpec,
        lambda_rd: f64,
        conds: &[Array1<f64>],
        rate_policy: RatePolicy,
        rng: &RngStream,
        opt: &mut Adam,
    ) -> Result<TrainStats, CodecError> {
        assert!(!batch.is_empty(), "empty training batch");
        assert_eq!(batch.len(), conds.len(), "one conditioning vector per image");
        let mut grads = self.params.zeros_like();
        let mut distortion_sum = 0.0;
        let mut rate_sum = 0.0;
        for (i, (img, cond)) in batch.iter().zip(conds).enumerate() {
            let noise_rng = rng.child(i as u64);
            let (d, r) = self.accumulate_example(
                &self.params.clone(),
                img,
                cond,
                spec,
                lambda_rd,
                rate_policy,
                Some(&noise_rng),
                &mut grads,
            )?;
            distortion_sum += d;
            rate_sum += r;
        }
        let b = batch.len() as f64;
        grads.scale(1.0 / b);
        let distortion = distortion_sum / b;
        let rate_bits = rate_sum / b;
        let total = distortion + lambda_rd * rate_bits;
        if !total.is_finite() {
            return Err(CodecError::NonFiniteLoss);
        }
        opt.step(&mut self.params, &grads);
        Ok(TrainStats {
            distortion,
            rate_bits,
            total,
        })
    }

    /// Forward + backward for one image; adds unscaled gradients into `grads`
    /// and returns (distortion, rate_bits). Exposed shape for the end-to-end
    /// finite-difference check: with `noise_rng = None` the channel is clean.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grads_single(
        &self,
        ps: &ParamSet,
        img: &Image,
        cond: &Array1<f64>,
        spec: &ChannelSpec,
        lambda_rd: f64,
        rate_policy: RatePolicy,
        noise_rng: Option<&RngStream>,
        grads: &mut GradSet,
    ) -> Result<TrainStats, CodecError> {
        let (d, r) = self.accumulate_example(
            ps,
            img,
            cond,
            spec,
            lambda_rd,
            rate_policy,
            noise_rng,
            grads,
        )?;
        Ok(TrainStats {
            distortion: d,
            rate_bits: r,
            total: d + lambda_rd * r,
        })
    }

    /// Loss only, for finite-difference probing.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_single(
        &self,
        ps: &ParamSet,
        img: &Image,
        cond: &Array1<f64>,
        spec: &ChannelSpec,
        lambda_rd: f64,
        rate_policy: RatePolicy,
        noise_rng: Option<&RngStream>,
    ) -> Result<f64, CodecError> {
        let mut scratch = ps.zeros_like();
        let stats = self.loss_and_grads_single(
            ps,
            img,
            cond,
            spec,
            lambda_rd,
            rate_policy,
            noise_rng,
            &mut scratch,
        )?;
        Ok(stats.total)
    }

    #[allow(clippy::too_many_arguments)]
    fn accumulate_example(
        &self,
        ps: &ParamSet,
        img: &Image,
        cond: &Array1<f64>,
        spec: &ChannelSpec,
        lambda_rd: f64,
        rate_policy: RatePolicy,
        noise_rng: Option<&RngStream>,
        grads: &mut GradSet,
    ) -> Result<(f64, f64), CodecError> {
        self.check_cond(cond)?;
        let (gh, gw) = self.grid_for(img)?;
        let x = image_to_unit(img);
        let (tokens, analysis_cache) = self.analysis.forward(ps, &x, self.config.feature_gain);
        let f = FeatureMap::new(gh, gw, self.config.token_dim, tokens)?;

        // Entropy branch.
        let (gp, ent_cache) = self.entropy_model.predict(ps, &f.tokens)?;
        let eval = entropy_map_with_grads(&f, &gp)?;
        let rate_bits = rate_loss(&eval.map);
        let rm = match rate_policy {
            RatePolicy::EntropyPreset => rate_preset_map(&eval.map, &self.rate_set, self.eta)?,
            RatePolicy::Uniform(idx) => {
                if idx >= self.rate_set.len() {
                    return Err(CodecError::RateIndexOutOfRange {
                        idx,
                        len: self.rate_set.len(),
                    });
                }
                RateIndexMap::uniform(gh, gw, idx)
            }
        };

        // Payload branch.
        let (frame, enc_cache, norm) =
            self.jscc_encode_with(ps, &f, &rm, cond, Vec::new())?;
        let received = match noise_rng {
            Some(stream) if !frame.payload.is_empty() => SymbolFrame {
                payload: awgn(&frame.payload, spec, stream),
                ..frame.clone()
            },
            _ => frame.clone(),
        };
        let (decoded, dec_cache) = self.jscc_decode_with(ps, &received, spec, cond)?;
        let (recon, syn_cache) = self
            .synthesis
            .forward(ps, &decoded.tokens, (decoded.grid_h, decoded.grid_w));

        let n_pix = recon.len() as f64;
        let diff = &recon - &x;
        let distortion = diff.iter().map(|v| v * v).sum::<f64>() / n_pix;
        if !distortion.is_finite() || !rate_bits.is_finite() {
            return Err(CodecError::NonFiniteLoss);
        }

        // Backward: distortion path.
        let g_recon = diff.mapv(|v| 2.0 * v / n_pix);
        let g_dec_tokens = self.synthesis.backward(ps, &syn_cache, &g_recon, grads);
        let g_u = self.decoder.backward(ps, &dec_cache, &g_dec_tokens, grads);

        // Unpack adjoint: received gradients land on the kept dimensions.
        let n = gh * gw;
        let total_symbols = frame.payload.len();
        let mut g_payload_reals = vec![0.0; 2 * total_symbols];
        let mut cursor = 0usize;
        for tok in 0..n {
            let rate = self.rate_set.rate(rm.idx[[tok / gw, tok % gw]]) as usize;
            for k in 0..rate {
                g_payload_reals[2 * (cursor + k)] = g_u[[tok, 2 * k]];
                g_payload_reals[2 * (cursor + k) + 1] = g_u[[tok, 2 * k + 1]];
            }
            cursor += rate;
        }

        // Channel is additive, so gradients pass through to the normalized
        // payload; undo the power normalization analytically.
        let mut g_z = Array2::zeros((n, self.config.token_dim));
        if total_symbols > 0 {
            let l = total_symbols as f64;
            let p = norm.power;
            let sqrt_p = p.sqrt();
            let dot: f64 = g_payload_reals
                .iter()
                .zip(&norm.reals)
                .map(|(g, x)| g * x)
                .sum();
            let coef = dot / (l * p * sqrt_p);
            let g_reals: Vec<f64> = g_payload_reals
                .iter()
                .zip(&norm.reals)
                .map(|(g, x)| g / sqrt_p - x * coef)
                .collect();
            // Truncation adjoint: scatter back into token vectors.
            let mut cursor_r = 0usize;
            for tok in 0..n {
                let rate = self.rate_set.rate(rm.idx[[tok / gw, tok % gw]]) as usize;
                for k in 0..2 * rate {
                    g_z[[tok, k]] = g_reals[cursor_r + k];
                }
                cursor_r += 2 * rate;
            }
        }
        let g_tokens_payload = self.encoder.backward(ps, &enc_cache, &g_z, grads);

        // Rate path: lambda_rd * mean token bits.
        let n_tokens = n as f64;
        let scale = lambda_rd / n_tokens;
        let g_mu = eval.d_mu.mapv(|v| v * scale);
        let g_sigma = eval.d_sigma.mapv(|v| v * scale);
        let g_tokens_entropy_in =
            self.entropy_model
                .backward(ps, &ent_cache, &g_mu, &g_sigma, grads);
        let g_tokens_entropy_st = eval.d_y.mapv(|v| v * scale);

        let g_tokens_total = &g_tokens_payload + &g_tokens_entropy_in + &g_tokens_entropy_st;
        self.analysis
            .backward(ps, &analysis_cache, &g_tokens_total, self.config.feature_gain, grads);

        Ok((distortion, rate_bits))
    }
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

mod checkpoint {
    use super::*;
    use std::io::{Read, Write};
    use std::path::Path;

    const MAGIC: &[u8; 4] = b"AKBC";
    const VERSION: u32 = 1;

    #[derive(Serialize, Deserialize)]
    struct TensorMeta {
        name: String,
        shape: Vec<usize>,
    }

    #[derive(Serialize, Deserialize)]
    struct Header {
        config: CodecConfig,
        rate_set: RateSet,
        eta: f64,
        train_snr_db: f64,
        root_seed: u64,
        tensors: Vec<TensorMeta>,
    }

    impl CodecModel {
        /// Writes the checkpoint: magic, version, JSON header with the full
        /// reproducibility context, then raw little-endian f64 tensor data.
        pub fn save(&self, path: &Path) -> Result<(), CodecError> {
            let header = Header {
                config: self.config.clone(),
                rate_set: self.rate_set.clone(),
                eta: self.eta,
                train_snr_db: self.train_snr_db,
                root_seed: self.root_seed,
                tensors: self
                    .params
                    .iter()
                    .map(|(name, t)| TensorMeta {
                        name: name.to_string(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            };
            let header_json = serde_json::to_vec(&header)
                .map_err(|e| CodecError::CheckpointFormat(e.to_string()))?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(header_json.len() as u32).to_le_bytes())?;
            w.write_all(&header_json)?;
            for (_, t) in self.params.iter() {
                for &v in t.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
            Ok(())
        }

        pub fn load(path: &Path) -> Result<Self, CodecError> {
            let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
            let mut magic = [0u8; 4];
            r.read_exact(&mut magic)?;
            if &magic != MAGIC {
                return Err(CodecError::CheckpointFormat(format!(
                    "bad magic {magic:?} at offset 0"
                )));
            }
            let mut word = [0u8; 4];
            r.read_exact(&mut word)?;
            let version = u32::from_le_bytes(word);
            if version != VERSION {
                return Err(CodecError::CheckpointFormat(format!(
                    "unsupported version {version}"
                )));
            }
            r.read_exact(&mut word)?;
            let header_len = u32::from_le_bytes(word) as usize;
            let mut header_bytes = vec![0u8; header_len];
            r.read_exact(&mut header_bytes)?;
            let header: Header = serde_json::from_slice(&header_bytes)
                .map_err(|e| CodecError::CheckpointFormat(format!("header json: {e}")))?;
            let mut model = CodecModel::new(
                header.config,
                header.rate_set,
                header.eta,
                header.train_snr_db,
                header.root_seed,
            )?;
            for meta in &header.tensors {
                let len: usize = meta.shape.iter().product();
                let mut buf = vec![0u8; len * 8];
                r.read_exact(&mut buf).map_err(|e| {
                    CodecError::CheckpointFormat(format!(
                        "truncated tensor data for {}: {e}",
                        meta.name
                    ))
                })?;
                let values: Vec<f64> = buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                let tensor = ndarray::ArrayD::from_shape_vec(meta.shape.clone(), values)
                    .map_err(|e| CodecError::CheckpointFormat(e.to_string()))?;
                model
                    .params
                    .load_named(&meta.name, tensor)
                    .map_err(CodecError::CheckpointFormat)?;
            }
            Ok(model)
        }
    }
}

impl RngStream {
    fn derive_for_model(root_seed: u64) -> ChaCha12Rng {
        crate::rng::rng_derive(root_seed, &[u64::from_le_bytes(*b"codecini")]).rng()
    }
}
