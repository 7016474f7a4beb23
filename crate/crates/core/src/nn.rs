//! Small residual CNN encoder with a designated tap point.
//!
//! Layout: a stride-2 3x3 stem, then one stage per entry of
//! `block_channels`. Stage 0 is a residual block of two 3x3 convs at the
//! stem resolution followed by a 2x2 average-pool downsample — the block
//! runs before the spatial reduction so each tap location keeps a small
//! receptive field. Later stages are a stride-2 3x3 transition conv
//! followed by the same residual block shape. Residual branches are scaled
//! by a learned scalar (no batch normalization, so the forward pass is
//! batch independent). The configured tap emits that stage's output as the
//! local feature grid; the representation is the spatial mean of the final
//! stage.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_channels: usize,
    /// Square input side length.
    pub input_size: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    /// Which stage's output is the local feature grid.
    pub tap_index: usize,
    /// Pooled representation width; must equal the final stage's channels.
    pub repr_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_channels: 3,
            input_size: 32,
            stem_channels: 16,
            block_channels: vec![16, 32, 64],
            tap_index: 0,
            repr_dim: 64,
        }
    }
}

/// Ceiling halving, the spatial effect of one stride-2 3x3 conv with pad 1.
fn half(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.tap_index >= self.block_channels.len() {
            return Err(Error::Config(format!(
                "tap_index {} out of range for {} blocks",
                self.tap_index,
                self.block_channels.len()
            )));
        }
        if self.repr_dim != *self.block_channels.last().unwrap() {
            return Err(Error::Config(format!(
                "repr_dim {} must equal final block channels {}",
                self.repr_dim,
                self.block_channels.last().unwrap()
            )));
        }
        if self.input_channels == 0 || self.stem_channels == 0 || self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.block_channels[0] != self.stem_channels {
            return Err(Error::Config(format!(
                "stage 0 runs at the stem width: block_channels[0] {} must equal stem_channels {}",
                self.block_channels[0], self.stem_channels
            )));
        }
        let (h, _) = self.final_grid();
        if h == 0 || self.input_size < 4 {
            return Err(Error::Config(format!("input size {} too small for {} stages", self.input_size, self.block_channels.len())));
        }
        Ok(())
    }

    /// Spatial side of stage `i`'s output.
    pub fn stage_grid(&self, i: usize) -> usize {
        let mut s = half(self.input_size); // stem conv, ceil halving
        s /= 2; // stage 0 average pool, floor halving
        for _ in 1..=i {
            s = half(s); // later transitions, ceil halving
        }
        s
    }

    /// Side length of the tap-layer grid (`h == w`).
    pub fn tap_grid(&self) -> (usize, usize) {
        let s = self.stage_grid(self.tap_index);
        (s, s)
    }

    pub fn tap_channels(&self) -> usize {
        self.block_channels[self.tap_index]
    }

    pub fn final_grid(&self) -> (usize, usize) {
        let s = self.stage_grid(self.block_channels.len() - 1);
        (s, s)
    }

    /// Total scalar parameter count, closed form.
    pub fn param_count(&self) -> usize {
        let mut n = self.stem_channels * self.input_channels * 9 + self.stem_channels;
        let mut prev = self.stem_channels;
        for (i, &c) in self.block_channels.iter().enumerate() {
            if i > 0 {
                n += c * prev * 9 + c; // transition conv
            }
            n += 2 * (c * c * 9 + c); // residual branch convs
            n += 1; // branch scale
            prev = c;
        }
        n
    }
}

/// Parameter tensors in declaration order (the checkpoint order).
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<Tensor>,
}

/// Tape handles for one registration of the encoder parameters.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    vars: Vec<Var>,
}

impl EncoderVars {
    pub fn as_slice(&self) -> &[Var] {
        &self.vars
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Var> {
        self.vars.iter()
    }
}

/// Tap grid, final-stage features and pooled representation on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderForward {
    pub tap: Var,
    pub final_features: Var,
    pub representation: Var,
}

/// Plain-value forward output.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Local feature grid `[B, C_tap, h, w]`.
    pub local_features: Tensor,
    /// Pooled representation `[B, repr_dim]`.
    pub representation: Tensor,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 * a - a)
}

/// Build an encoder with deterministic fan-in scaled uniform init and zero
/// biases. The same seed always yields bit-identical parameters.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let c0 = config.stem_channels;
    params.push(uniform_tensor(&mut rng, vec![c0, config.input_channels, 3, 3], config.input_channels * 9));
    params.push(Tensor::zeros(vec![c0]));
    let mut prev = c0;
    for (i, &c) in config.block_channels.iter().enumerate() {
        if i > 0 {
            params.push(uniform_tensor(&mut rng, vec![c, prev, 3, 3], prev * 9));
            params.push(Tensor::zeros(vec![c]));
        }
        params.push(uniform_tensor(&mut rng, vec![c, c, 3, 3], c * 9));
        params.push(Tensor::zeros(vec![c]));
        params.push(uniform_tensor(&mut rng, vec![c, c, 3, 3], c * 9));
        params.push(Tensor::zeros(vec![c]));
        params.push(Tensor::scalar(0.5));
        prev = c;
    }
    for p in &mut params {
        p.set_requires_grad(true);
    }
    Ok(Encoder { config: config.clone(), params })
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Put every parameter on the tape; trainable parameters receive
    /// gradients in backward, constants do not.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.input(p.clone().with_requires_grad(false))
                }
            })
            .collect();
        EncoderVars { vars }
    }

    fn conv(&self, tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, w, stride, 1)?;
        let c = tape.shape(y)[1];
        let bias = tape.reshape(b, vec![1, c, 1, 1])?;
        tape.add(y, bias)
    }

    /// Parameter offset of stage `i`: stage 0 has no transition conv.
    fn stage_base(&self, i: usize) -> usize {
        if i == 0 {
            2
        } else {
            2 + 5 + 7 * (i - 1)
        }
    }

    fn residual_block(&self, tape: &mut Tape, vars: &EncoderVars, x: Var, base: usize) -> Result<Var> {
        let h = self.conv(tape, x, vars.vars[base], vars.vars[base + 1], 1)?;
        let h = tape.relu(h)?;
        let h = self.conv(tape, h, vars.vars[base + 2], vars.vars[base + 3], 1)?;
        let scaled = tape.mul(h, vars.vars[base + 4])?;
        let sum = tape.add(x, scaled)?;
        tape.relu(sum)
    }

    fn stage(&self, tape: &mut Tape, vars: &EncoderVars, x: Var, i: usize) -> Result<Var> {
        let base = self.stage_base(i);
        if i == 0 {
            // Block at stem resolution, then the 2x2 average-pool
            // downsample, so tap locations keep a small receptive field.
            let b = self.residual_block(tape, vars, x, base)?;
            tape.avgpool2d(b, (2, 2), 2)
        } else {
            let t = self.conv(tape, x, vars.vars[base], vars.vars[base + 1], 2)?;
            let t = tape.relu(t)?;
            self.residual_block(tape, vars, t, base + 2)
        }
    }

    /// Stem and stages up to (and including) the tap.
    pub fn forward_to_tap(&self, tape: &mut Tape, vars: &EncoderVars, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.config.input_channels || s[2] != self.config.input_size || s[3] != self.config.input_size {
            return Err(Error::Dimension(format!(
                "encoder expects [B, {}, {}, {}] images, got {s:?}",
                self.config.input_channels, self.config.input_size, self.config.input_size
            )));
        }
        let x = self.conv(tape, images, vars.vars[0], vars.vars[1], 2)?;
        let mut x = tape.relu(x)?;
        for i in 0..=self.config.tap_index {
            x = self.stage(tape, vars, x, i)?;
        }
        Ok(x)
    }

    /// The frozen remainder: stages after the tap, then global average
    /// pooling into the representation.
    pub fn forward_from_tap(&self, tape: &mut Tape, vars: &EncoderVars, tap: Var) -> Result<(Var, Var)> {
        let mut x = tap;
        for i in self.config.tap_index + 1..self.config.block_channels.len() {
            x = self.stage(tape, vars, x, i)?;
        }
        let shape = tape.shape(x).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let pooled = tape.avgpool2d(x, (h, w), 1)?;
        let repr = tape.reshape(pooled, vec![b, c])?;
        Ok((x, repr))
    }

    /// Full forward pass; by construction identical, bit for bit, to
    /// `forward_to_tap` composed with `forward_from_tap`.
    pub fn forward(&self, tape: &mut Tape, vars: &EncoderVars, images: Var) -> Result<EncoderForward> {
        let tap = self.forward_to_tap(tape, vars, images)?;
        let (final_features, representation) = self.forward_from_tap(tape, vars, tap)?;
        Ok(EncoderForward { tap, final_features, representation })
    }

    /// Plain-value forward for a batch of images `[B, C, H, W]`.
    pub fn encoder_forward(&self, images: &Tensor) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let imgs = tape.input(images.clone());
        let out = self.forward(&mut tape, &vars, imgs)?;
        Ok(EncoderOutput {
            local_features: tape.value(out.tap).clone(),
            representation: tape.value(out.representation).clone(),
        })
    }

    /// Plain-value forward that also returns the final-stage feature grid.
    pub fn encoder_forward_detailed(&self, images: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let imgs = tape.input(images.clone());
        let out = self.forward(&mut tape, &vars, imgs)?;
        Ok((
            tape.value(out.tap).clone(),
            tape.value(out.final_features).clone(),
            tape.value(out.representation).clone(),
        ))
    }

    pub fn freeze(mut self) -> FrozenEncoder {
        for p in &mut self.params {
            p.set_requires_grad(false);
        }
        FrozenEncoder { inner: self }
    }

    // ── checkpoint io ───────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [
            self.config.input_channels,
            self.config.input_size,
            self.config.stem_channels,
            self.config.block_channels.len(),
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &c in &self.config.block_channels {
            buf.extend_from_slice(&(c as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.config.tap_index as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.repr_dim as u32).to_le_bytes());
        let total: usize = self.params.iter().map(|p| p.numel()).sum();
        buf.extend_from_slice(&(total as u64).to_le_bytes());
        for p in &self.params {
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Encoder> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&bytes, path);
        r.expect_magic(MAGIC)?;
        let input_channels = r.u32()? as usize;
        let input_size = r.u32()? as usize;
        let stem_channels = r.u32()? as usize;
        let n_blocks = r.u32()? as usize;
        if n_blocks > 64 {
            return Err(r.bad("implausible block count"));
        }
        let mut block_channels = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            block_channels.push(r.u32()? as usize);
        }
        let tap_index = r.u32()? as usize;
        let repr_dim = r.u32()? as usize;
        let config = EncoderConfig { input_channels, input_size, stem_channels, block_channels, tap_index, repr_dim };
        config.validate()?;
        let total = r.u64()? as usize;
        if total != config.param_count() {
            return Err(r.bad(&format!("parameter count {total} does not match config {}", config.param_count())));
        }
        // Rebuild with the right shapes, then overwrite values.
        let mut encoder = build_encoder(&config, 0)?;
        for p in encoder.params_mut() {
            for v in p.data_mut() {
                *v = r.f64()?;
            }
        }
        r.expect_eof()?;
        Ok(encoder)
    }
}

/// Encoder whose parameters can no longer be trained; forward passes are
/// identical to the unfrozen encoder's.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    inner: Encoder,
}

impl FrozenEncoder {
    pub fn encoder(&self) -> &Encoder {
        &self.inner
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.inner.config
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        self.inner.register(tape, false)
    }

    pub fn forward_to_tap(&self, tape: &mut Tape, vars: &EncoderVars, images: Var) -> Result<Var> {
        self.inner.forward_to_tap(tape, vars, images)
    }

    pub fn forward_from_tap(&self, tape: &mut Tape, vars: &EncoderVars, tap: Var) -> Result<(Var, Var)> {
        self.inner.forward_from_tap(tape, vars, tap)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &EncoderVars, images: Var) -> Result<EncoderForward> {
        self.inner.forward(tape, vars, images)
    }

    pub fn encoder_forward(&self, images: &Tensor) -> Result<EncoderOutput> {
        self.inner.encoder_forward(images)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.inner.save(path)
    }

    pub fn load(path: &Path) -> Result<FrozenEncoder> {
        Ok(Encoder::load(path)?.freeze())
    }
}

const MAGIC: &[u8; 8] = b"IMENC001";

/// Cursor over a little-endian byte buffer with path-aware errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader { bytes, pos: 0, path }
    }

    pub fn bad(&self, reason: &str) -> Error {
        Error::Format { path: self.path.to_path_buf(), reason: reason.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.bad("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len())? != magic {
            return Err(self.bad("bad magic"));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn expect_eof(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.bad("trailing bytes"));
        }
        Ok(())
    }
}

/// Shared helper for writing checkpoints.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
