//! Variational representation learning for the forcing stage.
//!
//! A Laplace-prior autoencoder recovers exogenous forcing noise: the encoder
//! outputs a per-dimension (location, scale) posterior, reparameterized with
//! the inverse-CDF transform of a uniform draw, and the decoder maps noise
//! back to forcings. The runoff generator turns forcings into runoff
//! embeddings, either with one shared network or with per-station parameters
//! emitted by a hypernetwork from learned station embeddings.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Act, Mlp, MlpBound, MlpTrace};
use crate::rng::{stream_rng, Stream};

/// Floor added to the softplus scale head so posteriors never degenerate.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Encoder/decoder pair for the forcing noise model.
#[derive(Debug, Clone)]
pub struct ForcingCodec {
    pub dim: usize,
    /// Trunk emitting [location offset, raw scale] per dimension.
    pub encoder: Mlp,
    /// Mixing function (noise -> forcings), residual so the Jacobian starts
    /// at the identity and its diagonal stays usable for inversion.
    pub decoder: Mlp,
}

/// Tape handles for one step.
pub struct CodecBound {
    pub encoder: MlpBound,
    pub decoder: MlpBound,
}

/// Posterior sample with its parameters (tape form).
pub struct LatentVars {
    pub loc: Var,
    pub scale: Var,
    pub sample: Var,
}

/// Inferred exogenous noise for a batch (plain arrays).
#[derive(Debug, Clone)]
pub struct LatentNoiseSample {
    pub values: Array2<f64>,
    pub loc: Array2<f64>,
    pub scale: Array2<f64>,
}

impl LatentNoiseSample {
    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("latent sample contains non-finite values".into()));
        }
        if self.scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::Numerical("posterior scale must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse-CDF reparameterization draw g(u) for u in (-1/2, 1/2):
/// sample = loc - scale * sign(u) * ln(1 - 2|u|).
pub fn laplace_reparam(u: f64) -> f64 {
    -u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Uniform draws on (-1/2, 1/2) for the reparameterization.
pub fn reparam_draws(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        // keep strictly inside the open interval
        let u: f64 = rng.random::<f64>() - 0.5;
        u.clamp(-0.5 + 1e-12, 0.5 - 1e-12)
    })
}

impl ForcingCodec {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        // small output gain: the location head starts near the identity map
        // and the decoder near the identity mixing
        let encoder = Mlp::with_gain(vec![dim, hidden, hidden, 2 * dim], Act::Tanh, false, 0.2, rng);
        let decoder = Mlp::with_gain(vec![dim, hidden, hidden, dim], Act::Tanh, true, 0.2, rng);
        Self { dim, encoder, decoder }
    }

    pub fn bind(&self, tape: &mut Tape) -> CodecBound {
        CodecBound { encoder: self.encoder.bind(tape), decoder: self.decoder.bind(tape) }
    }

    /// Posterior parameters and a reparameterized sample for a (B, d) batch.
    /// `u` must be (B, d) uniform draws from [`reparam_draws`].
    pub fn encode_vars(&self, tape: &mut Tape, bound: &CodecBound, x: Var, u: &Array2<f64>) -> LatentVars {
        let head = self.encoder.forward(tape, &bound.encoder, x);
        let loc_off = tape.slice_cols(head, 0, self.dim);
        let loc = tape.add(x, loc_off);
        let raw = tape.slice_cols(head, self.dim, 2 * self.dim);
        let sp = tape.softplus_op(raw);
        let scale = tape.add_scalar(sp, SCALE_FLOOR);
        let g = tape.leaf(u.mapv(laplace_reparam));
        let noise = tape.mul(scale, g);
        let sample = tape.add(loc, noise);
        LatentVars { loc, scale, sample }
    }

    pub fn decode_vars(&self, tape: &mut Tape, bound: &CodecBound, noise: Var) -> Var {
        self.decoder.forward(tape, &bound.decoder, noise)
    }

    pub fn decode_traced(&self, tape: &mut Tape, bound: &CodecBound, noise: Var) -> MlpTrace {
        self.decoder.forward_traced(tape, &bound.decoder, noise)
    }

    /// Reparameterized posterior sampling on plain arrays.
    pub fn encode(&self, forcings: &Array2<f64>, seed: u64) -> Result<LatentNoiseSample> {
        if forcings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("encode received non-finite forcings".into()));
        }
        if forcings.ncols() != self.dim {
            return Err(Error::Schema(format!(
                "encode expects {} columns, got {}",
                self.dim,
                forcings.ncols()
            )));
        }
        let mut rng = stream_rng(seed, Stream::Posterior);
        let u = reparam_draws(&mut rng, forcings.nrows(), self.dim);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(forcings.clone());
        let lat = self.encode_vars(&mut tape, &bound, x, &u);
        let out = LatentNoiseSample {
            values: tape.value(lat.sample).clone(),
            loc: tape.value(lat.loc).clone(),
            scale: tape.value(lat.scale).clone(),
        };
        out.validate()?;
        Ok(out)
    }

    /// Reconstruction of forcings from noise on plain arrays.
    pub fn decode(&self, noise: &Array2<f64>) -> Result<Array2<f64>> {
        if noise.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("decode received non-finite noise".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = tape.leaf(noise.clone());
        let y = self.decode_vars(&mut tape, &bound, z);
        Ok(tape.value(y).clone())
    }

    pub fn param_refs(&self) -> Vec<&Array2<f64>> {
        let mut p = self.encoder.param_refs();
        p.extend(self.decoder.param_refs());
        p
    }

    pub fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.encoder.param_refs_mut();
        p.extend(self.decoder.param_refs_mut());
        p
    }

    pub fn bound_vars(bound: &CodecBound) -> Vec<Var> {
        let mut v = Mlp::bound_vars(&bound.encoder);
        v.extend(Mlp::bound_vars(&bound.decoder));
        v
    }
}

/// ELBO loss terms (negated ELBO up to constants; minimize the total).
pub struct ElboVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub latents: LatentVars,
}

/// recon + KL on the tape. Reconstruction is the squared error summed over
/// dimensions and averaged over the batch; the KL against the unit Laplace
/// prior is closed form: |m| + s*exp(-|m|/s) - 1 - ln s per dimension.
pub fn elbo_loss_vars(
    codec: &ForcingCodec,
    tape: &mut Tape,
    bound: &CodecBound,
    x: Var,
    u: &Array2<f64>,
) -> ElboVars {
    let batch = tape.value(x).nrows() as f64;
    let latents = codec.encode_vars(tape, bound, x, u);
    let recon_x = codec.decode_vars(tape, bound, latents.sample);
    let diff = tape.sub(recon_x, x);
    let sq = tape.mul(diff, diff);
    let sum_sq = tape.sum_all(sq);
    let recon = tape.scale(sum_sq, 1.0 / batch);

    let abs_m = tape.abs(latents.loc);
    let neg_ratio = {
        let r = tape.div(abs_m, latents.scale);
        tape.scale(r, -1.0)
    };
    let e = tape.exp(neg_ratio);
    let se = tape.mul(latents.scale, e);
    let ln_s = tape.ln(latents.scale);
    let t1 = tape.add(abs_m, se);
    let t2 = tape.add_scalar(t1, -1.0);
    let per_dim = tape.sub(t2, ln_s);
    let kl_sum = tape.sum_all(per_dim);
    let kl = tape.scale(kl_sum, 1.0 / batch);

    let total = tape.add(recon, kl);
    ElboVars { total, recon, kl, latents }
}

/// Scalar ELBO decomposition on plain arrays; deterministic given `seed`.
pub fn elbo_loss(codec: &ForcingCodec, forcings: &Array2<f64>, seed: u64) -> Result<(f64, f64, f64)> {
    if forcings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("elbo received non-finite forcings".into()));
    }
    let mut rng = stream_rng(seed, Stream::Posterior);
    let u = reparam_draws(&mut rng, forcings.nrows(), codec.dim);
    let mut tape = Tape::new();
    let bound = codec.bind(&mut tape);
    let x = tape.leaf(forcings.clone());
    let elbo = elbo_loss_vars(codec, &mut tape, &bound, x, &u);
    Ok((
        tape.scalar_value(elbo.total),
        tape.scalar_value(elbo.recon),
        tape.scalar_value(elbo.kl),
    ))
}

/// Closed-form KL( Laplace(m, s) || Laplace(0, 1) ) for one dimension.
pub fn laplace_kl(m: f64, s: f64) -> f64 {
    m.abs() + s * (-m.abs() / s).exp() - 1.0 - s.ln()
}

// ---------------------------------------------------------------------------
// Runoff generation
// ---------------------------------------------------------------------------

/// Whether the runoff map is shared across stations or emitted per station
/// by a hypernetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunoffMode {
    Shared,
    Local,
}

/// Runoff embedding generator r = f_r(F).
#[derive(Debug, Clone)]
pub struct RunoffGenerator {
    pub mode: RunoffMode,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Hidden width of the (shared or generated) core MLP.
    pub core_hidden: usize,
    pub n_stations: usize,
    /// Shared mode only.
    pub shared: Option<Mlp>,
    /// Local mode only: (N, d_e) station embeddings.
    pub embeddings: Option<Array2<f64>>,
    /// Local mode only: d_e -> flattened core parameter vector.
    pub hyper: Option<Mlp>,
}

pub struct RunoffBound {
    pub shared: Option<MlpBound>,
    pub embeddings: Option<Var>,
    pub hyper: Option<MlpBound>,
}

/// Station embedding width for the hypernetwork input.
pub const EMBED_DIM: usize = 8;

impl RunoffGenerator {
    pub fn core_param_len(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        in_dim * hidden + hidden + hidden * out_dim + out_dim
    }

    pub fn new_shared(
        in_dim: usize,
        out_dim: usize,
        core_hidden: usize,
        n_stations: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            mode: RunoffMode::Shared,
            in_dim,
            out_dim,
            core_hidden,
            n_stations,
            shared: Some(Mlp::new(vec![in_dim, core_hidden, out_dim], Act::Tanh, false, rng)),
            embeddings: None,
            hyper: None,
        }
    }

    pub fn new_local(
        in_dim: usize,
        out_dim: usize,
        core_hidden: usize,
        n_stations: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let p = Self::core_param_len(in_dim, core_hidden, out_dim);
        let embeddings = crate::nn::xavier(rng, n_stations, EMBED_DIM);
        // small gain keeps generated cores well-scaled at init
        let hyper = Mlp::with_gain(vec![EMBED_DIM, 32, p], Act::Tanh, false, 0.5, rng);
        Self {
            mode: RunoffMode::Local,
            in_dim,
            out_dim,
            core_hidden,
            n_stations,
            shared: None,
            embeddings: Some(embeddings),
            hyper: Some(hyper),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> RunoffBound {
        RunoffBound {
            shared: self.shared.as_ref().map(|m| m.bind(tape)),
            embeddings: self.embeddings.as_ref().map(|e| tape.leaf(e.clone())),
            hyper: self.hyper.as_ref().map(|m| m.bind(tape)),
        }
    }

    /// Apply a generated parameter row (1, P) to an input block (rows, d_f).
    fn apply_core(&self, tape: &mut Tape, params: Var, x: Var) -> Var {
        let (df, h, dr) = (self.in_dim, self.core_hidden, self.out_dim);
        let mut at = 0;
        let w1 = tape.slice_cols(params, at, at + df * h);
        let w1 = tape.reshape(w1, df, h);
        at += df * h;
        let b1 = tape.slice_cols(params, at, at + h);
        at += h;
        let w2 = tape.slice_cols(params, at, at + h * dr);
        let w2 = tape.reshape(w2, h, dr);
        at += h * dr;
        let b2 = tape.slice_cols(params, at, at + dr);
        let z = tape.matmul(x, w1);
        let z = tape.add_row_broadcast(z, b1);
        let a = tape.tanh(z);
        let y = tape.matmul(a, w2);
        tape.add_row_broadcast(y, b2)
    }

    /// Tape forward over station-major rows: the input must hold, for each
    /// station k in order, a contiguous block of `rows_per_station` rows.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        bound: &RunoffBound,
        x: Var,
        rows_per_station: usize,
    ) -> Result<Var> {
        let rows = tape.value(x).nrows();
        match self.mode {
            RunoffMode::Shared => {
                let mlp = self.shared.as_ref().unwrap();
                Ok(mlp.forward(tape, bound.shared.as_ref().unwrap(), x))
            }
            RunoffMode::Local => {
                if rows != self.n_stations * rows_per_station {
                    return Err(Error::Config(format!(
                        "local runoff forward: {} rows are not {} stations x {} rows",
                        rows, self.n_stations, rows_per_station
                    )));
                }
                let emb = bound.embeddings.unwrap();
                let hyper = self.hyper.as_ref().unwrap();
                let params = hyper.forward(tape, bound.hyper.as_ref().unwrap(), emb);
                let mut outs = Vec::with_capacity(self.n_stations);
                for k in 0..self.n_stations {
                    let row = tape.slice_rows(params, k, k + 1);
                    let block = tape.slice_rows(x, k * rows_per_station, (k + 1) * rows_per_station);
                    outs.push(self.apply_core(tape, row, block));
                }
                Ok(tape.concat_rows(&outs))
            }
        }
    }

    /// Runoff embeddings for a (B, N, d_f) forcing batch -> (B, N, d_r).
    pub fn generate(&self, forcings: &ndarray::Array3<f64>) -> Result<ndarray::Array3<f64>> {
        let (b, n, df) = forcings.dim();
        if df != self.in_dim {
            return Err(Error::Schema(format!(
                "runoff generator expects {} forcings, got {df}",
                self.in_dim
            )));
        }
        if self.mode == RunoffMode::Local && n != self.n_stations {
            return Err(Error::Config(format!(
                "runoff generator built for {} stations, input has {n}",
                self.n_stations
            )));
        }
        // station-major rows (k, b)
        let x = Array2::from_shape_fn((n * b, df), |(row, c)| forcings[[row % b, row / b, c]]);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x);
        let y = self.forward_vars(&mut tape, &bound, xv, b)?;
        let yv = tape.value(y);
        Ok(ndarray::Array3::from_shape_fn((b, n, self.out_dim), |(bi, k, c)| {
            yv[[k * b + bi, c]]
        }))
    }

    pub fn param_refs(&self) -> Vec<&Array2<f64>> {
        match self.mode {
            RunoffMode::Shared => self.shared.as_ref().unwrap().param_refs(),
            RunoffMode::Local => {
                let mut p = vec![self.embeddings.as_ref().unwrap()];
                p.extend(self.hyper.as_ref().unwrap().param_refs());
                p
            }
        }
    }

    pub fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match self.mode {
            RunoffMode::Shared => self.shared.as_mut().unwrap().param_refs_mut(),
            RunoffMode::Local => {
                let mut p: Vec<&mut Array2<f64>> = vec![self.embeddings.as_mut().unwrap()];
                p.extend(self.hyper.as_mut().unwrap().param_refs_mut());
                p
            }
        }
    }

    pub fn bound_vars(&self, bound: &RunoffBound) -> Vec<Var> {
        match self.mode {
            RunoffMode::Shared => Mlp::bound_vars(bound.shared.as_ref().unwrap()),
            RunoffMode::Local => {
                let mut v = vec![bound.embeddings.unwrap()];
                v.extend(Mlp::bound_vars(bound.hyper.as_ref().unwrap()));
                v
            }
        }
    }

    /// Shared-mode generator holding the parameters the hypernetwork emits
    /// for one station; used to check the tied-embedding invariant.
    pub fn materialize_station_core(&self, station: usize) -> Result<Mlp> {
        if self.mode != RunoffMode::Local {
            return Err(Error::Config("materialize_station_core needs local mode".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let emb = bound.embeddings.unwrap();
        let hyper = self.hyper.as_ref().unwrap();
        let params = hyper.forward(&mut tape, bound.hyper.as_ref().unwrap(), emb);
        let row = tape.value(params).row(station).to_owned();
        let (df, h, dr) = (self.in_dim, self.core_hidden, self.out_dim);
        let mut at = 0;
        let w1 = Array2::from_shape_fn((df, h), |(i, j)| row[at + i * h + j]);
        at += df * h;
        let b1 = Array2::from_shape_fn((1, h), |(_, j)| row[at + j]);
        at += h;
        let w2 = Array2::from_shape_fn((h, dr), |(i, j)| row[at + i * dr + j]);
        at += h * dr;
        let b2 = Array2::from_shape_fn((1, dr), |(_, j)| row[at + j]);
        Ok(Mlp {
            sizes: vec![df, h, dr],
            act: Act::Tanh,
            residual: false,
            ws: vec![w1, w2],
            bs: vec![b1, b2],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn codec(seed: u64) -> ForcingCodec {
        let mut rng = stream_rng(seed, Stream::ModelInit);
        ForcingCodec::new(3, 16, &mut rng)
    }

    #[test]
    fn reparam_median_is_location() {
        assert_eq!(laplace_reparam(0.0), 0.0);
        // u = 0 means the sample equals the location exactly
        let c = codec(1);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.2);
        let u = Array2::zeros((4, 3));
        let mut tape = Tape::new();
        let bound = c.bind(&mut tape);
        let xv = tape.leaf(x);
        let lat = c.encode_vars(&mut tape, &bound, xv, &u);
        assert_eq!(tape.value(lat.sample), tape.value(lat.loc));
    }

    #[test]
    fn encode_is_deterministic_and_scale_positive() {
        let c = codec(2);
        let x = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let a = c.encode(&x, 99).unwrap();
        let b = c.encode(&x, 99).unwrap();
        assert_eq!(a.values, b.values);
        a.validate().unwrap();
        assert!(a.scale.iter().all(|s| *s >= SCALE_FLOOR));
        let other = c.encode(&x, 100).unwrap();
        assert_ne!(a.values, other.values);
    }

    #[test]
    fn encoder_near_deterministic_limit_tracks_input() {
        // encoder with identity location and tiny scale: samples ~ inputs
        let mut c = codec(3);
        // zero the trunk so loc = x and raw scale = 0 -> softplus(0)+floor
        for w in c.encoder.ws.iter_mut() {
            w.fill(0.0);
        }
        for b in c.encoder.bs.iter_mut() {
            b.fill(0.0);
        }
        // push raw scale strongly negative via the output bias
        let dim = c.dim;
        c.encoder.bs.last_mut().unwrap().slice_mut(ndarray::s![.., dim..]).fill(-30.0);
        let x = Array2::from_shape_fn((16, 3), |(i, j)| ((i + j) as f64 * 0.11).cos());
        let s = c.encode(&x, 5).unwrap();
        let max_dev = (&s.values - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev < 1e-2, "max deviation {max_dev}");
    }

    #[test]
    fn identity_decoder_reproduces_noise() {
        let mut c = codec(4);
        for w in c.decoder.ws.iter_mut() {
            w.fill(0.0);
        }
        for b in c.decoder.bs.iter_mut() {
            b.fill(0.0);
        }
        let z = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64) * 0.3 - (j as f64) * 0.7);
        assert_eq!(c.decode(&z).unwrap(), z);
    }

    #[test]
    fn decode_batch_rows_are_independent() {
        let c = codec(5);
        let z = Array2::from_shape_fn((64, 3), |(i, j)| ((i * 7 + j) as f64 * 0.05).sin());
        let all = c.decode(&z).unwrap();
        let one = c.decode(&z.slice(ndarray::s![10..11, ..]).to_owned()).unwrap();
        for j in 0..3 {
            assert_eq!(all[[10, j]], one[[0, j]]);
        }
    }

    #[test]
    fn elbo_decomposes_and_kl_matches_closed_form() {
        let c = codec(6);
        let x = Array2::from_shape_fn((12, 3), |(i, j)| ((i + 2 * j) as f64 * 0.21).sin());
        let (total, recon, kl) = elbo_loss(&c, &x, 7).unwrap();
        assert!((total - (recon + kl)).abs() < 1e-12);
        assert!(kl >= 0.0);

        // prior posterior: loc 0 scale 1 -> kl = 0
        assert!(laplace_kl(0.0, 1.0).abs() < 1e-15);
        // unit-scale posterior at location m
        for m in [-1.7f64, -0.3, 0.0, 0.9, 2.4] {
            let want = m.abs() + (-m.abs()).exp() - 1.0;
            assert!((laplace_kl(m, 1.0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_kl_matches_numerical_integration() {
        // direct quadrature of KL(p||q) over a wide grid
        let cases = [(0.7, 0.5), (-1.2, 1.4), (0.0, 2.0), (2.0, 0.3)];
        for (m, s) in cases {
            let mut acc = 0.0;
            let (lo, hi, n) = (-40.0, 40.0, 400_000);
            let h = (hi - lo) / n as f64;
            for i in 0..n {
                let x = lo + (i as f64 + 0.5) * h;
                let p = (-(x - m as f64).abs() / s).exp() / (2.0 * s);
                let q = (-x.abs()).exp() / 2.0;
                if p > 0.0 {
                    acc += p * (p / q).ln() * h;
                }
            }
            let cf = laplace_kl(m, s);
            assert!((acc - cf).abs() < 1e-6, "m={m} s={s}: quad {acc} vs closed form {cf}");
        }
    }

    #[test]
    fn perfect_autoencoder_has_zero_recon() {
        let mut c = codec(7);
        // identity encoder with tiny scale, identity decoder
        for w in c.encoder.ws.iter_mut() {
            w.fill(0.0);
        }
        for b in c.encoder.bs.iter_mut() {
            b.fill(0.0);
        }
        c.encoder.bs.last_mut().unwrap().slice_mut(ndarray::s![.., 3..]).fill(-300.0);
        for w in c.decoder.ws.iter_mut() {
            w.fill(0.0);
        }
        for b in c.decoder.bs.iter_mut() {
            b.fill(0.0);
        }
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i + j) as f64 * 0.1);
        let (_, recon, _) = elbo_loss(&c, &x, 3).unwrap();
        assert!(recon < 1e-6, "recon {recon}");
    }

    fn forcing_batch(b: usize, n: usize, df: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, n, df), |(i, k, j)| ((i * 5 + k * 3 + j) as f64 * 0.17).sin())
    }

    #[test]
    fn shared_mode_is_station_agnostic_and_permutation_equivariant() {
        let mut rng = stream_rng(8, Stream::ModelInit);
        let g = RunoffGenerator::new_shared(4, 2, 16, 3, &mut rng);
        let f = forcing_batch(6, 3, 4);
        let r = g.generate(&f).unwrap();

        // same forcing vector at two stations gives identical runoff
        let mut f2 = f.clone();
        for j in 0..4 {
            f2[[0, 2, j]] = f2[[0, 0, j]];
        }
        let r2 = g.generate(&f2).unwrap();
        for c in 0..2 {
            assert_eq!(r2[[0, 0, c]], r2[[0, 2, c]]);
        }

        // permuting stations permutes outputs
        let perm = [2usize, 0, 1];
        let fp = Array3::from_shape_fn((6, 3, 4), |(i, k, j)| f[[i, perm[k], j]]);
        let rp = g.generate(&fp).unwrap();
        for i in 0..6 {
            for k in 0..3 {
                for c in 0..2 {
                    assert!((rp[[i, k, c]] - r[[i, perm[k], c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn local_mode_with_tied_embeddings_matches_materialized_shared_core() {
        let mut rng = stream_rng(9, Stream::ModelInit);
        let mut g = RunoffGenerator::new_local(4, 2, 8, 3, &mut rng);
        // tie all station embeddings to station 0's
        let row0 = g.embeddings.as_ref().unwrap().row(0).to_owned();
        for k in 1..3 {
            g.embeddings.as_mut().unwrap().row_mut(k).assign(&row0);
        }
        let f = forcing_batch(5, 3, 4);
        let r = g.generate(&f).unwrap();

        // identical embeddings produce identical runoff functions
        for i in 0..5 {
            let mut fk = f.clone();
            for j in 0..4 {
                fk[[i, 1, j]] = f[[i, 0, j]];
                fk[[i, 2, j]] = f[[i, 0, j]];
            }
            let rk = g.generate(&fk).unwrap();
            for c in 0..2 {
                assert!((rk[[i, 0, c]] - rk[[i, 1, c]]).abs() < 1e-6);
                assert!((rk[[i, 0, c]] - rk[[i, 2, c]]).abs() < 1e-6);
            }
        }

        // and match a shared-mode core holding the generated parameters
        let core = g.materialize_station_core(0).unwrap();
        let shared = RunoffGenerator {
            mode: RunoffMode::Shared,
            in_dim: 4,
            out_dim: 2,
            core_hidden: 8,
            n_stations: 3,
            shared: Some(core),
            embeddings: None,
            hyper: None,
        };
        let rs = shared.generate(&f).unwrap();
        let max_dev = (&rs - &r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev < 1e-6, "deviation {max_dev}");
    }

    #[test]
    fn station_count_mismatch_is_a_configuration_error() {
        let mut rng = stream_rng(10, Stream::ModelInit);
        let g = RunoffGenerator::new_local(4, 2, 8, 3, &mut rng);
        let f = forcing_batch(2, 5, 4);
        assert!(matches!(g.generate(&f), Err(Error::Config(_))));
    }
}
