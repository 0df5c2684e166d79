//! A desk-scale recurrent masked autoencoder trained with exact
//! backpropagation through time.
//!
//! Per patch `p` and stage `i`:
//!
//! ```text
//! f_p = We x_p + be                         patch embedding
//! g_p = [f_up, f_down, f_left, f_right]     neighbour embeddings, zero off-grid
//! h_p = tanh(Wc [c_p, f_p, g_p] + bc)       feature F_i, and new memory c_p
//! y_p = Wd h_p + bd                         decoded P x P pixels
//! ```
//!
//! Memory starts at zero for every sequence and is only carried forward
//! when the model is recurrent. The loss is the stage-averaged masked MSE
//! against patch-normalized targets.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_mismatch, Error, Result};
use crate::event::{build_histogram, flatten_histogram, segment_stream, SegmentConfig};
use crate::intensity::{run_sequence, IntensityConfig};
use crate::simulator::{simulate_events, NoiseSpec, SceneSpec};
use crate::masking::{normalize_patches, PatchGrid, TubeMask, DEFAULT_NORM_EPSILON};

const PARAM_MAGIC: &[u8; 4] = b"TOYM";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ToyModelConfig {
    pub patch: usize,
    pub embed_dim: usize,
    pub recurrent: bool,
    /// Feed the embeddings of the 4 neighbouring patches into the cell.
    pub neighbor_context: bool,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            embed_dim: 16,
            recurrent: true,
            neighbor_context: true,
            seed: 0,
        }
    }
}

/// Offsets of the parameter groups inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub cell_input: usize,
    pub patch_pixels: usize,
}

impl ParamLayout {
    fn new(config: &ToyModelConfig, in_channels: usize) -> Self {
        let d = config.embed_dim;
        Self {
            input_dim: in_channels * config.patch * config.patch,
            embed_dim: d,
            cell_input: if config.neighbor_context { 6 * d } else { 2 * d },
            patch_pixels: config.patch * config.patch,
        }
    }

    /// `(name, range, fan_in)` for each group, in storage order.
    pub fn groups(&self) -> [(&'static str, std::ops::Range<usize>, usize); 6] {
        let d = self.embed_dim;
        let sizes = [
            ("embed_w", self.input_dim * d, self.input_dim),
            ("embed_b", d, self.input_dim),
            ("cell_w", d * self.cell_input, self.cell_input),
            ("cell_b", d, self.cell_input),
            ("dec_w", self.patch_pixels * d, d),
            ("dec_b", self.patch_pixels, d),
        ];
        let mut start = 0;
        sizes.map(|(name, len, fan_in)| {
            let range = start..start + len;
            start += len;
            (name, range, fan_in)
        })
    }

    pub fn total(&self) -> usize {
        self.groups()[5].1.end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub in_channels: usize,
    pub grid: PatchGrid,
    layout: ParamLayout,
    params: Vec<f64>,
    grads: Vec<f64>,
    memory: Vec<f64>,
}

/// Activations of one stage kept for the backward pass.
struct StageCache {
    x: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    c_prev: Vec<f64>,
    h: Vec<f64>,
    y: Vec<f64>,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig, in_channels: usize, grid: PatchGrid) -> Result<Self> {
        if config.embed_dim == 0 || in_channels == 0 {
            return Err(Error::InvalidConfig("toy model needs D >= 1 and at least one channel".into()));
        }
        if config.patch != grid.patch {
            return Err(Error::InvalidConfig(format!(
                "model patch {} differs from grid patch {}",
                config.patch, grid.patch
            )));
        }
        let layout = ParamLayout::new(&config, in_channels);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.total()];
        for (_, range, fan_in) in layout.groups() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[range] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(Self {
            config,
            in_channels,
            grid,
            layout,
            grads: vec![0.0; params.len()],
            params,
            memory: vec![0.0; grid.num_patches() * config.embed_dim],
        })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn memory(&self) -> &[f64] {
        &self.memory
    }

    pub fn reset_memory(&mut self) {
        self.memory.fill(0.0);
    }

    fn check_input(&self, input: &Array3<f64>) -> Result<()> {
        let expected = (self.in_channels, self.grid.height, self.grid.width);
        if input.dim() != expected {
            return Err(shape_mismatch(format!("{expected:?}"), format!("{:?}", input.dim())));
        }
        Ok(())
    }

    /// Up, down, left and right neighbours of patch `p`.
    fn neighbours(&self, p: usize) -> [Option<usize>; 4] {
        let (gh, gw) = (self.grid.grid_h, self.grid.grid_w);
        let (gy, gx) = (p / gw, p % gw);
        [
            (gy > 0).then(|| p - gw),
            (gy + 1 < gh).then(|| p + gw),
            (gx > 0).then(|| p - 1),
            (gx + 1 < gw).then(|| p + 1),
        ]
    }

    fn stage(&self, input: &Array3<f64>, c_prev: &[f64]) -> StageCache {
        let l = self.layout;
        let (d, din, kc, pp) = (l.embed_dim, l.input_dim, l.cell_input, l.patch_pixels);
        let np = self.grid.num_patches();
        let p = self.grid.patch;
        let gw = self.grid.grid_w;
        let [we, be, wc, bc, wd, bd] = self.layout.groups().map(|(_, r, _)| &self.params[r]);

        let mut x = vec![0.0; np * din];
        for patch in 0..np {
            let (rows, cols) = self.grid.patch_bounds(patch / gw, patch % gw);
            let xp = &mut x[patch * din..(patch + 1) * din];
            for ch in 0..self.in_channels {
                for y in rows.clone() {
                    for xx in cols.clone() {
                        let r = y - rows.start;
                        let s = xx - cols.start;
                        xp[ch * pp + r * p + s] = input[[ch, y, xx]];
                    }
                }
            }
        }

        // Embedding; inputs are sparse so iterate over nonzero entries.
        let mut f = vec![0.0; np * d];
        for patch in 0..np {
            let fp = &mut f[patch * d..(patch + 1) * d];
            fp.copy_from_slice(be);
            for (j, &xv) in x[patch * din..(patch + 1) * din].iter().enumerate() {
                if xv != 0.0 {
                    for (fk, &w) in fp.iter_mut().zip(&we[j * d..(j + 1) * d]) {
                        *fk += xv * w;
                    }
                }
            }
        }

        let mut g = vec![0.0; if self.config.neighbor_context { np * 4 * d } else { 0 }];
        if self.config.neighbor_context {
            for patch in 0..np {
                for (slot, q) in self.neighbours(patch).into_iter().enumerate() {
                    if let Some(q) = q {
                        let o = (patch * 4 + slot) * d;
                        g[o..o + d].copy_from_slice(&f[q * d..(q + 1) * d]);
                    }
                }
            }
        }

        let mut h = vec![0.0; np * d];
        let mut u = vec![0.0; kc];
        for patch in 0..np {
            u[..d].copy_from_slice(&c_prev[patch * d..(patch + 1) * d]);
            u[d..2 * d].copy_from_slice(&f[patch * d..(patch + 1) * d]);
            if self.config.neighbor_context {
                u[2 * d..].copy_from_slice(&g[patch * 4 * d..(patch + 1) * 4 * d]);
            }
            for k in 0..d {
                let row = &wc[k * kc..(k + 1) * kc];
                let z = bc[k] + row.iter().zip(&u).map(|(w, v)| w * v).sum::<f64>();
                h[patch * d + k] = z.tanh();
            }
        }

        let mut y = vec![0.0; np * pp];
        for patch in 0..np {
            let hp = &h[patch * d..(patch + 1) * d];
            for q in 0..pp {
                let row = &wd[q * d..(q + 1) * d];
                y[patch * pp + q] = bd[q] + row.iter().zip(hp).map(|(w, v)| w * v).sum::<f64>();
            }
        }

        StageCache {
            x,
            f,
            g,
            c_prev: c_prev.to_vec(),
            h,
            y,
        }
    }

    /// Patch-major decoder output to an image, cropping the padding.
    fn assemble(&self, y: &[f64]) -> Array2<f64> {
        let p = self.grid.patch;
        let pp = p * p;
        let gw = self.grid.grid_w;
        Array2::from_shape_fn((self.grid.height, self.grid.width), |(r, c)| {
            let patch = (r / p) * gw + c / p;
            y[patch * pp + (r % p) * p + c % p]
        })
    }

    /// Runs one stage on a masked `(2B + 1, H, W)` input, updating memory.
    pub fn forward_stage(&mut self, masked_input: &Array3<f64>) -> Result<Array2<f64>> {
        self.check_input(masked_input)?;
        let cache = self.stage(masked_input, &self.memory);
        if self.config.recurrent {
            self.memory = cache.h;
        }
        Ok(self.assemble(&cache.y))
    }

    /// Predictions for a whole sequence, starting from zero memory.
    pub fn predict_sequence(&mut self, inputs: &[Array3<f64>]) -> Result<Vec<Array2<f64>>> {
        self.reset_memory();
        inputs.iter().map(|x| self.forward_stage(x)).collect()
    }

    /// Forward pass, loss and exact gradients (into [`ToyModel::grads`]) for
    /// one masked sequence. Memory is reset before and left at the final stage.
    pub fn backward_sequence(
        &mut self,
        inputs: &[Array3<f64>],
        targets: &[Array2<f64>],
        mask: &TubeMask,
    ) -> Result<f64> {
        let m = inputs.len();
        if m == 0 || targets.len() != m {
            return Err(shape_mismatch(format!("{m} targets"), format!("{}", targets.len())));
        }
        let pixel_mask = mask.pixel_mask(&self.grid)?;
        let masked_pixels = pixel_mask.iter().filter(|&&v| v).count();
        if masked_pixels == 0 {
            return Err(Error::EmptyMask);
        }
        for (x, t) in inputs.iter().zip(targets) {
            self.check_input(x)?;
            if t.dim() != (self.grid.height, self.grid.width) {
                return Err(shape_mismatch(
                    format!("{}x{} target", self.grid.height, self.grid.width),
                    format!("{:?}", t.dim()),
                ));
            }
        }

        let l = self.layout;
        let (d, din, kc, pp) = (l.embed_dim, l.input_dim, l.cell_input, l.patch_pixels);
        let np = self.grid.num_patches();
        let p = self.grid.patch;
        let gw = self.grid.grid_w;

        self.reset_memory();
        let mut caches = Vec::with_capacity(m);
        for x in inputs {
            let cache = self.stage(x, &self.memory);
            if self.config.recurrent {
                self.memory.copy_from_slice(&cache.h);
            }
            caches.push(cache);
        }

        // Per-stage loss and the gradient w.r.t. each decoded pixel.
        let scale = 1.0 / (masked_pixels as f64 * m as f64);
        let mut loss = 0.0;
        let mut dys = Vec::with_capacity(m);
        for (cache, target) in caches.iter().zip(targets) {
            let normalized = normalize_patches(target, &self.grid, DEFAULT_NORM_EPSILON)?;
            let mut dy = vec![0.0; np * pp];
            let mut stage_sum = 0.0;
            for ((r, c), &masked) in pixel_mask.indexed_iter() {
                if !masked {
                    continue;
                }
                let idx = ((r / p) * gw + c / p) * pp + (r % p) * p + c % p;
                let diff = cache.y[idx] - normalized[[r, c]];
                stage_sum += diff * diff;
                dy[idx] = 2.0 * diff * scale;
            }
            loss += stage_sum / masked_pixels as f64;
            dys.push(dy);
        }
        loss /= m as f64;

        let ranges = self.layout.groups().map(|(_, r, _)| r);
        let params = &self.params;
        let wc = &params[ranges[2].clone()];
        let wd = &params[ranges[4].clone()];
        let mut grads = vec![0.0; params.len()];
        let (g_we, rest) = grads.split_at_mut(ranges[1].start);
        let (g_be, rest) = rest.split_at_mut(d);
        let (g_wc, rest) = rest.split_at_mut(d * kc);
        let (g_bc, rest) = rest.split_at_mut(d);
        let (g_wd, g_bd) = rest.split_at_mut(pp * d);

        let mut dc_next = vec![0.0; np * d];
        let mut dh = vec![0.0; d];
        let mut dz = vec![0.0; d];
        let mut u = vec![0.0; kc];
        for (cache, dy) in caches.iter().zip(&dys).rev() {
            let mut df = vec![0.0; np * d];
            let mut dc_prev = vec![0.0; np * d];
            for patch in 0..np {
                let hp = &cache.h[patch * d..(patch + 1) * d];
                let dyp = &dy[patch * pp..(patch + 1) * pp];

                // decoder
                dh.fill(0.0);
                for (q, &gy) in dyp.iter().enumerate() {
                    if gy == 0.0 {
                        continue;
                    }
                    g_bd[q] += gy;
                    for k in 0..d {
                        g_wd[q * d + k] += gy * hp[k];
                        dh[k] += gy * wd[q * d + k];
                    }
                }
                if self.config.recurrent {
                    for k in 0..d {
                        dh[k] += dc_next[patch * d + k];
                    }
                }

                // recurrent cell
                u[..d].copy_from_slice(&cache.c_prev[patch * d..(patch + 1) * d]);
                u[d..2 * d].copy_from_slice(&cache.f[patch * d..(patch + 1) * d]);
                if self.config.neighbor_context {
                    u[2 * d..].copy_from_slice(&cache.g[patch * 4 * d..(patch + 1) * 4 * d]);
                }
                for k in 0..d {
                    dz[k] = dh[k] * (1.0 - hp[k] * hp[k]);
                    g_bc[k] += dz[k];
                }
                for k in 0..d {
                    if dz[k] == 0.0 {
                        continue;
                    }
                    let row = &wc[k * kc..(k + 1) * kc];
                    let grow = &mut g_wc[k * kc..(k + 1) * kc];
                    for j in 0..kc {
                        grow[j] += dz[k] * u[j];
                    }
                    for j in 0..d {
                        dc_prev[patch * d + j] += row[j] * dz[k];
                        df[patch * d + j] += row[d + j] * dz[k];
                    }
                }
                if self.config.neighbor_context {
                    for (slot, q) in self.neighbours(patch).into_iter().enumerate() {
                        let Some(q) = q else { continue };
                        let col = (2 + slot) * d;
                        for j in 0..d {
                            let dg: f64 = (0..d).map(|k| wc[k * kc + col + j] * dz[k]).sum();
                            df[q * d + j] += dg;
                        }
                    }
                }
            }

            // embedding
            for patch in 0..np {
                let dfp = &df[patch * d..(patch + 1) * d];
                for k in 0..d {
                    g_be[k] += dfp[k];
                }
                for (j, &xv) in cache.x[patch * din..(patch + 1) * din].iter().enumerate() {
                    if xv != 0.0 {
                        for (gw_, &dfk) in g_we[j * d..(j + 1) * d].iter_mut().zip(dfp) {
                            *gw_ += xv * dfk;
                        }
                    }
                }
            }

            dc_next = if self.config.recurrent { dc_prev } else { vec![0.0; np * d] };
        }

        self.grads = grads;
        Ok(loss)
    }

    /// Euclidean norm of the gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Plain gradient-descent step using the current gradient buffers.
    pub fn apply_gradients(&mut self, lr: f64) {
        for (p, g) in self.params.iter_mut().zip(&self.grads) {
            *p -= lr * g;
        }
    }

    /// `TOYM`, u16 patch, u16 embed dim, u16 data channels (2B), u8
    /// recurrent, u8 neighbour context, u32 grid_w, u32 grid_h, u32
    /// parameter count, then the f64 parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.params.len() * 8);
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&(self.config.patch as u16).to_le_bytes());
        out.extend_from_slice(&(self.config.embed_dim as u16).to_le_bytes());
        out.extend_from_slice(&((self.in_channels - 1) as u16).to_le_bytes());
        out.push(u8::from(self.config.recurrent));
        out.push(u8::from(self.config.neighbor_context));
        out.extend_from_slice(&(self.grid.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format { kind: "TOYM", reason };
        if bytes.len() < 26 || &bytes[..4] != PARAM_MAGIC {
            return Err(bad("missing TOYM header".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let config = ToyModelConfig {
            patch: u16_at(4),
            embed_dim: u16_at(6),
            recurrent: bytes[10] == 1,
            neighbor_context: bytes[11] == 1,
            seed: 0,
        };
        let data_channels = u16_at(8);
        let grid = PatchGrid::new(u32_at(16), u32_at(12), config.patch)
            .map_err(|e| bad(e.to_string()))?;
        let count = u32_at(20);
        let mut model = ToyModel::new(config, data_channels + 1, grid).map_err(|e| bad(e.to_string()))?;
        if count != model.params.len() || bytes.len() != 24 + count * 8 {
            return Err(bad(format!(
                "expected {} parameters, header says {count} with {} payload bytes",
                model.params.len(),
                bytes.len() - 24
            )));
        }
        for (i, v) in model.params.iter_mut().enumerate() {
            let o = 24 + i * 8;
            *v = f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        }
        Ok(model)
    }
}

/// Unmasked model inputs and intensity targets of one simulated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSequence {
    pub grid: PatchGrid,
    /// `(2B, H, W)` clipped histograms, one per stage.
    pub inputs: Vec<Array3<f64>>,
    /// Intensity snapshots at the stage boundaries.
    pub targets: Vec<Array2<f64>>,
}

impl TrainingSequence {
    pub fn stages(&self) -> usize {
        self.inputs.len()
    }

    pub fn data_channels(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.dim().0)
    }

    /// Inputs with `mask` applied, ready for the model.
    pub fn masked_inputs(&self, mask: &TubeMask) -> Result<Vec<Array3<f64>>> {
        self.inputs
            .iter()
            .map(|x| {
                let x32 = x.mapv(|v| v as f32);
                Ok(crate::masking::apply_mask(&x32, mask, &self.grid)?.mapv(f64::from))
            })
            .collect()
    }
}

/// How a simulated scene becomes a training sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceSpec {
    pub segment: SegmentConfig,
    pub intensity: IntensityConfig,
    pub clip_max: Option<u32>,
    pub patch: usize,
}

/// Simulates `scene`, builds one clipped histogram per segment and the
/// matching intensity snapshots. The scene duration is cut into whole segments.
pub fn prepare_sequence(
    scene: &SceneSpec,
    noise: Option<&NoiseSpec>,
    spec: &SequenceSpec,
) -> Result<TrainingSequence> {
    let stages = (scene.duration_us / spec.segment.segment_us) as usize;
    if stages == 0 {
        return Err(Error::InvalidConfig(format!(
            "scene of {}us is shorter than one {}us segment",
            scene.duration_us, spec.segment.segment_us
        )));
    }
    let geometry = scene.geometry;
    let events = simulate_events(scene, noise)?;
    let segmentation = segment_stream(&events, geometry, spec.segment, stages)?;
    let inputs = segmentation
        .segments
        .iter()
        .map(|seg| {
            let hist = build_histogram(seg, geometry, spec.segment).with_clip(spec.clip_max);
            flatten_histogram(&hist).mapv(f64::from)
        })
        .collect();
    let run = run_sequence(&events, geometry, spec.segment, spec.intensity, None, stages)?;
    let targets = run.frames.iter().map(|f| f.mapv(f64::from)).collect();
    Ok(TrainingSequence {
        grid: PatchGrid::new(geometry.height(), geometry.width(), spec.patch)?,
        inputs,
        targets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Steps whose gradient norm exceeds this are shortened to this length.
    pub clip_norm: Option<f64>,
    pub mask_ratio: f64,
    /// Training step `k` uses mask seed `mask_seed + k`.
    pub mask_seed: u32,
    /// Fixed mask used for the evaluation curve.
    pub eval_mask_seed: u32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 0.5,
            clip_norm: Some(0.5),
            mask_ratio: 0.5,
            mask_seed: 1,
            eval_mask_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    /// Loss on each step's own fresh mask, before the update.
    pub train: Vec<f64>,
    /// Loss on the fixed evaluation mask, before each update.
    pub eval: Vec<f64>,
}

impl TrainingCurve {
    pub fn to_lines(&self) -> String {
        self.train
            .iter()
            .zip(&self.eval)
            .enumerate()
            .map(|(i, (t, e))| format!("{} {t:.9e} {e:.9e}\n", i + 1))
            .collect()
    }
}

/// Gradient descent with a fresh tube mask per step and optional norm clipping.
pub fn train_toy(model: &mut ToyModel, seq: &TrainingSequence, opts: &TrainOptions) -> Result<TrainingCurve> {
    if opts.steps == 0 {
        return Err(Error::InvalidConfig("training needs at least one step".into()));
    }
    let eval_mask = crate::masking::sample_tube_mask(&seq.grid, opts.mask_ratio, opts.eval_mask_seed)?;
    let eval_inputs = seq.masked_inputs(&eval_mask)?;
    let mut curve = TrainingCurve::default();
    for step in 0..opts.steps {
        let eval = {
            let preds = model.predict_sequence(&eval_inputs)?;
            crate::metrics::sequence_loss(&preds, &seq.targets, &eval_mask, &seq.grid)?.loss
        };
        let mask = crate::masking::sample_tube_mask(
            &seq.grid,
            opts.mask_ratio,
            opts.mask_seed.wrapping_add(step as u32),
        )?;
        let inputs = seq.masked_inputs(&mask)?;
        let loss = model.backward_sequence(&inputs, &seq.targets, &mask)?;
        if !loss.is_finite() || !eval.is_finite() {
            return Err(Error::Diverged { step });
        }
        curve.train.push(loss);
        curve.eval.push(eval);
        let norm = model.grad_norm();
        let lr = match opts.clip_norm {
            Some(max) if norm > max => opts.lr * max / norm,
            _ => opts.lr,
        };
        model.apply_gradients(lr);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_tube_mask;

    fn tiny(recurrent: bool) -> ToyModel {
        let grid = PatchGrid::new(4, 4, 2).unwrap();
        let cfg = ToyModelConfig {
            patch: 2,
            embed_dim: 3,
            recurrent,
            neighbor_context: true,
            seed: 5,
        };
        ToyModel::new(cfg, 3, grid).unwrap()
    }

    fn input(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_and_input_predict_zero() {
        let mut m = tiny(true);
        m.params_mut().fill(0.0);
        let out = m.forward_stage(&Array3::zeros((3, 4, 4))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feedforward_ignores_history() {
        let mut m = tiny(false);
        m.forward_stage(&input(1)).unwrap();
        let a = m.forward_stage(&input(3)).unwrap();
        m.forward_stage(&input(2)).unwrap();
        let b = m.forward_stage(&input(3)).unwrap();
        assert_eq!(a, b);

        let mut r = tiny(true);
        r.forward_stage(&input(1)).unwrap();
        let a = r.forward_stage(&input(3)).unwrap();
        r.reset_memory();
        r.forward_stage(&input(2)).unwrap();
        let b = r.forward_stage(&input(3)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn hand_evaluated_single_patch() {
        // One 1x1-pixel patch, one channel, D = 1.
        let grid = PatchGrid::new(1, 1, 1).unwrap();
        let cfg = ToyModelConfig {
            patch: 1,
            embed_dim: 1,
            recurrent: true,
            neighbor_context: false,
            seed: 0,
        };
        let mut m = ToyModel::new(cfg, 1, grid).unwrap();
        // embed_w, embed_b, cell_w (c, f), cell_b, dec_w, dec_b
        m.params_mut().copy_from_slice(&[0.5, 0.1, 0.3, -0.7, 0.2, 2.0, -0.25]);
        let x = Array3::from_elem((1, 1, 1), 0.8);
        let f: f64 = 0.5 * 0.8 + 0.1;
        let h1 = (0.3 * 0.0 - 0.7 * f + 0.2).tanh();
        let y1 = 2.0 * h1 - 0.25;
        assert!((m.forward_stage(&x).unwrap()[[0, 0]] - y1).abs() < 1e-12);
        let h2 = (0.3 * h1 - 0.7 * f + 0.2).tanh();
        let y2 = 2.0 * h2 - 0.25;
        assert!((m.forward_stage(&x).unwrap()[[0, 0]] - y2).abs() < 1e-12);
    }

    #[test]
    fn reported_loss_matches_forward_recomputation() {
        let mut m = tiny(true);
        let grid = m.grid;
        let inputs: Vec<_> = (0..3).map(input).collect();
        let targets: Vec<_> = (0..3)
            .map(|s| input(10 + s).index_axis(ndarray::Axis(0), 0).to_owned())
            .collect();
        let mask = sample_tube_mask(&grid, 0.5, 9).unwrap();
        let loss = m.backward_sequence(&inputs, &targets, &mask).unwrap();
        let preds = m.predict_sequence(&inputs).unwrap();
        let report = crate::metrics::sequence_loss(&preds, &targets, &mask, &grid).unwrap();
        assert!((loss - report.loss).abs() < 1e-12);
    }

    #[test]
    fn matched_prediction_has_zero_gradient() {
        let mut m = tiny(true);
        m.params_mut().fill(0.0);
        let grid = m.grid;
        let inputs = vec![Array3::zeros((3, 4, 4)); 2];
        let targets = vec![Array2::zeros((4, 4)); 2];
        let loss = m.backward_sequence(&inputs, &targets, &TubeMask::full(&grid)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(m.grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn memory_resets_between_sequences() {
        let mut m = tiny(true);
        let a: Vec<_> = (0..2).map(input).collect();
        let b: Vec<_> = (5..8).map(input).collect();
        let fresh_b = m.predict_sequence(&b).unwrap();
        m.predict_sequence(&a).unwrap();
        assert_eq!(m.predict_sequence(&b).unwrap(), fresh_b);
    }

    #[test]
    fn parameter_blob_round_trip() {
        let m = tiny(false);
        let back = ToyModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config.recurrent, false);
        assert_eq!(back.in_channels, 3);
        assert!(ToyModel::from_bytes(&m.to_bytes()[..30]).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut m = tiny(true);
        assert!(m.forward_stage(&Array3::zeros((2, 4, 4))).is_err());
        let grid = PatchGrid::new(4, 4, 4).unwrap();
        assert!(ToyModel::new(ToyModelConfig { patch: 2, ..Default::default() }, 3, grid).is_err());
    }
}
