use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::encoding::one_blob_into;
use super::grid::{Aabb, FeatureGrid, MAX_DIM};
use super::mlp::{Activation, Mlp, MlpTape, OutputMap};
use super::params::{ParamLayout, ParamVector, Segment, SegmentKind};
use crate::error::{MapError, Result};
use crate::rng::Rng;

pub const COLOR_CHANNELS: usize = 3;

pub type Rgb = [f64; COLOR_CHANNELS];

/// Shape of both decoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub latent_dim: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            hidden_layers: 1,
            activation: Activation::Softplus,
            latent_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
    pub levels: usize,
    pub base_resolution: usize,
    pub growth: f64,
    pub features_per_level: usize,
    /// Spatial-hash table size per level; `None` keeps every level dense.
    pub hash_table_size: Option<usize>,
    pub encoding_bins: usize,
    pub decoder: DecoderSpec,
    /// Half-width of the uniform distribution used for grid features.
    pub grid_init_scale: f64,
    /// Initial bias of the SDF output.
    pub sdf_init_bias: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            domain_lo: vec![0.0, 0.0],
            domain_hi: vec![1.0, 1.0],
            levels: 4,
            base_resolution: 8,
            growth: 2.0,
            features_per_level: 2,
            hash_table_size: None,
            encoding_bins: 16,
            decoder: DecoderSpec::default(),
            grid_init_scale: 1e-4,
            sdf_init_bias: 0.0,
        }
    }
}

impl FieldConfig {
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|l| (self.base_resolution as f64 * self.growth.powi(l as i32)).round() as usize)
            .collect()
    }

    pub fn domain(&self) -> Result<Aabb> {
        Aabb::new(self.domain_lo.clone(), self.domain_hi.clone())
    }
}

/// Immutable structure of a field model: where every tensor lives in the
/// flat parameter vector and how the pieces connect.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldArch {
    pub config: FieldConfig,
    pub grid: FeatureGrid,
    pub geometry: Mlp,
    pub color: Mlp,
    pub layout: Arc<ParamLayout>,
}

impl FieldArch {
    pub fn new(config: FieldConfig) -> Result<Self> {
        let domain = config.domain()?;
        if config.encoding_bins < 2 {
            return Err(MapError::Config("encoding needs at least 2 bins".into()));
        }
        if config.decoder.hidden_width == 0 || config.decoder.latent_dim == 0 {
            return Err(MapError::Config("decoder widths must be positive".into()));
        }
        if !(config.growth > 1.0) {
            return Err(MapError::Config("grid growth factor must exceed 1".into()));
        }
        let dim = domain.dim();
        let grid = FeatureGrid::new(
            domain,
            &config.resolutions(),
            config.features_per_level,
            config.hash_table_size,
            0,
        )?;
        let enc_len = dim * config.encoding_bins;
        let spec = &config.decoder;
        let hidden = vec![spec.hidden_width; spec.hidden_layers];

        let mut geo_sizes = vec![enc_len + grid.output_len()];
        geo_sizes.extend(&hidden);
        geo_sizes.push(spec.latent_dim + 1);
        let geo_offset = grid.param_len();
        let geometry = Mlp::new(geo_sizes, geo_offset, spec.activation, OutputMap::Linear);

        let mut color_sizes = vec![enc_len + spec.latent_dim];
        color_sizes.extend(&hidden);
        color_sizes.push(COLOR_CHANNELS);
        let color_offset = geo_offset + geometry.param_len();
        let color = Mlp::new(
            color_sizes,
            color_offset,
            spec.activation,
            OutputMap::Sigmoid,
        );

        let mut segments = Vec::new();
        for (l, lvl) in grid.levels.iter().enumerate() {
            segments.push(Segment {
                name: format!("grid.level{l}"),
                kind: SegmentKind::Grid { level: l },
                start: lvl.offset,
                len: lvl.entries * grid.features,
            });
        }
        for (name, kind, mlp) in [
            ("geometry", SegmentKind::GeometryDecoder, &geometry),
            ("color", SegmentKind::ColorDecoder, &color),
        ] {
            for k in 0..mlp.layers() {
                let (w, b) = mlp.layer_offsets(k);
                let (nin, nout) = (mlp.sizes[k], mlp.sizes[k + 1]);
                segments.push(Segment {
                    name: format!("{name}.layer{k}.weight"),
                    kind,
                    start: w,
                    len: nin * nout,
                });
                segments.push(Segment {
                    name: format!("{name}.layer{k}.bias"),
                    kind,
                    start: b,
                    len: nout,
                });
            }
        }
        let layout = Arc::new(ParamLayout::new(segments)?);
        Ok(Self {
            config,
            grid,
            geometry,
            color,
            layout,
        })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn encoding_len(&self) -> usize {
        self.dim() * self.config.encoding_bins
    }

    pub fn latent_dim(&self) -> usize {
        self.config.decoder.latent_dim
    }

    /// Index of the SDF-output bias in the flat vector.
    pub fn sdf_bias_index(&self) -> usize {
        self.geometry.layer_offsets(self.geometry.layers() - 1).1
    }
}

/// Cached forward pass of one point.
#[derive(Debug, Clone, Default)]
pub struct PointTape {
    corners: Vec<(usize, f64)>,
    geo_input: Vec<f64>,
    color_input: Vec<f64>,
    geo: MlpTape,
    color: MlpTape,
}

impl PointTape {
    pub fn sdf(&self) -> f64 {
        self.geo.output[0]
    }

    pub fn color(&self) -> Rgb {
        let c = &self.color.output;
        [c[0], c[1], c[2]]
    }
}

/// The neural implicit map: architecture plus current parameters.
#[derive(Debug, Clone)]
pub struct FieldModel {
    arch: Arc<FieldArch>,
    params: ParamVector,
}

impl FieldModel {
    /// Random initialization: grid features uniform in `±grid_init_scale`,
    /// decoder weights Glorot-uniform, biases zero except the SDF bias.
    pub fn new(config: FieldConfig, rng: &mut Rng) -> Result<Self> {
        let arch = Arc::new(FieldArch::new(config)?);
        let mut params = ParamVector::zeros(arch.layout.clone());
        let v = params.values_mut();
        let scale = arch.config.grid_init_scale;
        for x in &mut v[arch.layout.grid_range()] {
            *x = rng.random_range(-1.0..=1.0) * scale;
        }
        for mlp in [&arch.geometry, &arch.color] {
            for k in 0..mlp.layers() {
                let (w, b) = mlp.layer_offsets(k);
                let (nin, nout) = (mlp.sizes[k], mlp.sizes[k + 1]);
                let bound = (6.0 / (nin + nout) as f64).sqrt();
                for x in &mut v[w..b] {
                    *x = rng.random_range(-bound..=bound);
                }
            }
        }
        v[arch.sdf_bias_index()] = arch.config.sdf_init_bias;
        Ok(Self { arch, params })
    }

    /// Model with every parameter set to zero.
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        let arch = Arc::new(FieldArch::new(config)?);
        let params = ParamVector::zeros(arch.layout.clone());
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: Arc<FieldArch>, params: ParamVector) -> Result<Self> {
        if params.layout().as_ref() != arch.layout.as_ref() {
            return Err(MapError::Dimension(
                "parameter layout does not match architecture".into(),
            ));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arc<FieldArch> {
        &self.arch
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.arch.layout
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.layout().as_ref() != self.arch.layout.as_ref() {
            return Err(MapError::Dimension(
                "parameter layout does not match model".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    pub fn domain(&self) -> &Aabb {
        &self.arch.grid.domain
    }

    pub fn dim(&self) -> usize {
        self.arch.dim()
    }

    fn encode(&self, x: &[f64], enc: &mut [f64]) -> [f64; MAX_DIM] {
        let mut u = [0.0; MAX_DIM];
        let dim = self.dim();
        self.arch.grid.domain.normalize_into(x, &mut u);
        one_blob_into(&u[..dim], self.arch.config.encoding_bins, enc);
        u
    }

    /// Full forward pass at `x`, keeping intermediates for [`Self::backward_point`].
    pub fn forward_point(&self, x: &[f64], tape: &mut PointTape) {
        let arch = &*self.arch;
        let p = self.params.values();
        let enc_len = arch.encoding_len();
        let feat_len = arch.grid.output_len();

        tape.geo_input.resize(enc_len + feat_len, 0.0);
        let u = self.encode(x, &mut tape.geo_input[..enc_len]);
        arch.grid.corners_into(&u[..self.dim()], &mut tape.corners);
        arch.grid
            .gather(p, &tape.corners, &mut tape.geo_input[enc_len..]);
        arch.geometry
            .forward_into(p, &tape.geo_input, &mut tape.geo);

        tape.color_input.clear();
        tape.color_input
            .extend_from_slice(&tape.geo_input[..enc_len]);
        tape.color_input.extend_from_slice(&tape.geo.output[1..]);
        arch.color
            .forward_into(p, &tape.color_input, &mut tape.color);
    }

    /// Backpropagates adjoints of `s` and `c` at a taped point into `grad`.
    pub fn backward_point(&self, tape: &PointTape, d_s: f64, d_c: &Rgb, grad: &mut [f64]) {
        let arch = &*self.arch;
        let p = self.params.values();
        let enc_len = arch.encoding_len();
        let latent = arch.latent_dim();

        let mut d_geo_out = vec![0.0; latent + 1];
        d_geo_out[0] = d_s;
        if d_c.iter().any(|&d| d != 0.0) {
            let mut d_color_in = vec![0.0; enc_len + latent];
            arch.color
                .backward(p, &tape.color, d_c, grad, Some(&mut d_color_in));
            d_geo_out[1..].copy_from_slice(&d_color_in[enc_len..]);
        }
        if d_geo_out.iter().all(|&d| d == 0.0) {
            return;
        }
        let mut d_geo_in = vec![0.0; tape.geo_input.len()];
        arch.geometry
            .backward(p, &tape.geo, &d_geo_out, grad, Some(&mut d_geo_in));
        arch.grid
            .scatter_grad(&tape.corners, &d_geo_in[enc_len..], grad);
    }

    /// SDF value and colour at world point `x`.
    pub fn eval_point(&self, x: &[f64]) -> (f64, Rgb) {
        let mut tape = PointTape::default();
        self.forward_point(x, &mut tape);
        (tape.sdf(), tape.color())
    }

    /// SDF only; skips the colour decoder.
    pub fn eval_sdf(&self, x: &[f64], tape: &mut PointTape) -> f64 {
        let arch = &*self.arch;
        let p = self.params.values();
        let enc_len = arch.encoding_len();
        tape.geo_input.resize(enc_len + arch.grid.output_len(), 0.0);
        let u = self.encode(x, &mut tape.geo_input[..enc_len]);
        arch.grid.corners_into(&u[..self.dim()], &mut tape.corners);
        arch.grid
            .gather(p, &tape.corners, &mut tape.geo_input[enc_len..]);
        arch.geometry
            .forward_into(p, &tape.geo_input, &mut tape.geo);
        tape.sdf()
    }

    pub fn grid_interpolate(&self, x: &[f64]) -> Vec<f64> {
        self.arch.grid.interpolate(self.params.values(), x)
    }

    /// Geometry decoder on explicit inputs: returns `(h, s)`.
    pub fn decode_geometry(&self, enc: &[f64], feat: &[f64]) -> Result<(Vec<f64>, f64)> {
        let arch = &*self.arch;
        if enc.len() != arch.encoding_len() || feat.len() != arch.grid.output_len() {
            return Err(MapError::Dimension(format!(
                "geometry decoder expects {}+{} inputs, got {}+{}",
                arch.encoding_len(),
                arch.grid.output_len(),
                enc.len(),
                feat.len()
            )));
        }
        let input: Vec<f64> = enc.iter().chain(feat).copied().collect();
        let out = arch.geometry.forward(self.params.values(), &input);
        Ok((out[1..].to_vec(), out[0]))
    }

    /// Colour decoder on explicit inputs.
    pub fn decode_color(&self, enc: &[f64], h: &[f64]) -> Result<Rgb> {
        let arch = &*self.arch;
        if enc.len() != arch.encoding_len() || h.len() != arch.latent_dim() {
            return Err(MapError::Dimension(format!(
                "colour decoder expects {}+{} inputs, got {}+{}",
                arch.encoding_len(),
                arch.latent_dim(),
                enc.len(),
                h.len()
            )));
        }
        let input: Vec<f64> = enc.iter().chain(h).copied().collect();
        let out = arch.color.forward(self.params.values(), &input);
        Ok([out[0], out[1], out[2]])
    }

    /// One-blob encoding of a world point under this model's domain.
    pub fn encode_point(&self, x: &[f64]) -> Vec<f64> {
        let mut enc = vec![0.0; self.arch.encoding_len()];
        self.encode(x, &mut enc);
        enc
    }
}
