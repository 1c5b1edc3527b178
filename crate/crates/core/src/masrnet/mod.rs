//! MASR-Net: a 4-level encoder-decoder feature extractor, DNS over a direct
//! and a dilated 6-neighbourhood, and a squeeze head producing the deep
//! structural image representation (DSIR).

mod dns;

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::{Dims, FeatureField, Volume};

pub use dns::{descriptor_from_distances, dns, dns_dual, LayoutKind, NeighbourhoodLayout, SIGMA_FLOOR};

/// Descriptor channels produced by the dual-layout DNS.
pub const DNS_CHANNELS: usize = 24;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct NetConfig {
    /// Encoder widths per level, coarsest last.
    pub widths: [usize; 4],
    /// Feature channels `C_h` of the map fed to DNS.
    pub feature_channels: usize,
    /// DSIR channels `C_d`.
    pub descriptor_channels: usize,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { widths: [8, 16, 32, 64], feature_channels: 16, descriptor_channels: 24, leaky_slope: 0.2 }
    }
}

impl NetConfig {
    /// Narrow network for desk-scale experiments.
    pub fn desk() -> Self {
        NetConfig { widths: [4, 8, 16, 32], feature_channels: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.feature_channels == 0 || self.descriptor_channels == 0 {
            return Err(Error::InvalidArgument(alloc::format!("zero width in network config {self:?}")));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidArgument(alloc::format!("leaky slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [w0, w1, w2, w3] = self.widths;
        let k3 = |o: usize, i: usize| vec![o, i, 3, 3, 3];
        let mut out = Vec::new();
        let mut conv = |name: &str, shape: Vec<usize>| {
            let c = shape[0];
            out.push((alloc::format!("{name}.weight"), shape));
            out.push((alloc::format!("{name}.bias"), vec![c]));
        };
        conv("enc0", k3(w0, 1));
        conv("enc1", k3(w1, w0));
        conv("enc2", k3(w2, w1));
        conv("enc3", k3(w3, w2));
        conv("dec2", k3(w2, w3 + w2));
        conv("dec1", k3(w1, w2 + w1));
        conv("dec0", k3(w0, w1 + w0));
        conv("out", vec![self.feature_channels, w0, 1, 1, 1]);
        conv("squeeze", vec![1, self.feature_channels]);
        conv("head0", k3(DNS_CHANNELS, DNS_CHANNELS));
        conv("head1", k3(self.descriptor_channels, DNS_CHANNELS));
        out
    }
}

/// Rejects grids the three stride-2 poolings cannot halve exactly.
pub fn check_dims(dims: Dims) -> Result<()> {
    if dims.0.iter().any(|&n| n == 0 || n % 8 != 0) {
        return Err(Error::InvalidDims { dims, reason: "every extent must be a positive multiple of 8" });
    }
    Ok(())
}

/// Network parameters bound as leaves on a graph.
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Leaves in parameter-store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.get(&alloc::format!("{name}.weight"))?;
        let b = self.get(&alloc::format!("{name}.bias"))?;
        g.conv3d(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MasrNet {
    config: NetConfig,
    params: ParamStore,
}

impl MasrNet {
    /// He-uniform kernels, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = libm::sqrt(6.0 / fan_in as f64);
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(&name, Tensor::new(&shape, data)?);
        }
        Ok(MasrNet { config, params })
    }

    /// Wraps existing parameters after checking every expected name and shape.
    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::ShapeMismatch {
                op: "MasrNet::from_params",
                detail: alloc::format!("{} tensors, expected {}", params.len(), expected.len()),
            });
        }
        let mut ordered = ParamStore::new();
        for (name, shape) in expected {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "MasrNet::from_params",
                    detail: alloc::format!("{name}: {:?}, expected {shape:?}", t.shape()),
                });
            }
            ordered.insert(&name, t.clone());
        }
        Ok(MasrNet { config, params: ordered })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut names = Vec::with_capacity(self.params.len());
        let mut vars = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            names.push(name.to_string());
            vars.push(g.leaf(t.clone(), trainable));
        }
        Bound { names, vars }
    }

    /// Puts a normalized volume on the graph as a `[1,H,W,D]` constant.
    pub fn input(g: &mut Graph, v: &Volume) -> Result<Var> {
        check_dims(v.dims)?;
        if !v.is_unit_range() {
            return Err(Error::InvalidArgument("network input must be normalized to [0, 1]".into()));
        }
        let [h, w, d] = v.dims.0;
        Ok(g.constant(Tensor::new(&[1, h, w, d], v.data.clone())?))
    }

    /// Encoder-decoder feature map `[C_h,H,W,D]`.
    pub fn features_on(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let slope = self.config.leaky_slope;
        let act = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let y = p.conv(g, x, name)?;
            g.leaky_relu(y, slope)
        };
        let e0 = act(g, image, "enc0")?;
        let x = g.blurpool3d(e0)?;
        let e1 = act(g, x, "enc1")?;
        let x = g.blurpool3d(e1)?;
        let e2 = act(g, x, "enc2")?;
        let x = g.blurpool3d(e2)?;
        let mut x = act(g, x, "enc3")?;
        for (skip, name) in [(e2, "dec2"), (e1, "dec1"), (e0, "dec0")] {
            let s = g.shape(skip);
            let up = g.trilinear_resize(x, Dims([s[1], s[2], s[3]]))?;
            let cat = g.concat(&[up, skip], 0)?;
            x = act(g, cat, name)?;
        }
        p.conv(g, x, "out")
    }

    /// Compact structural embedding `h^c`: `[C_h,H,W,D,24] -> [24,H,W,D]`.
    pub fn squeeze_linear_on(&self, g: &mut Graph, p: &Bound, dns: Var) -> Result<Var> {
        g.squeeze_channels(dns, p.get("squeeze.weight")?, p.get("squeeze.bias")?)
    }

    /// Compact structural embedding straight from the feature map:
    /// `[C_h,H,W,D] -> [24,H,W,D]`, fusing DNS and the squeeze.
    pub fn embed_on(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        g.dns_squeeze(h, p.get("squeeze.weight")?, p.get("squeeze.bias")?)
    }

    /// Dense convolution head: `[24,H,W,D] -> [C_d,H,W,D]`.
    pub fn head_on(&self, g: &mut Graph, p: &Bound, hc: Var) -> Result<Var> {
        let y = p.conv(g, hc, "head0")?;
        let y = g.leaky_relu(y, self.config.leaky_slope)?;
        p.conv(g, y, "head1")
    }

    /// The head evaluated only at `samples` (flat voxel indices): `[C_d,P]`.
    /// The first layer runs on the samples' 3x3x3 neighbourhoods only, which
    /// is exactly what the second layer reads.
    pub fn head_at(&self, g: &mut Graph, p: &Bound, hc: Var, samples: &[usize]) -> Result<Var> {
        let s = g.shape(hc);
        let dims = Dims([s[1], s[2], s[3]]);
        let support = neighbourhood_support(dims, samples);
        let w0 = p.get("head0.weight")?;
        let b0 = p.get("head0.bias")?;
        let y = g.conv3d_at(hc, w0, b0, &support)?;
        let y = g.leaky_relu(y, self.config.leaky_slope)?;
        let dense = g.scatter(y, &support, dims)?;
        let w1 = p.get("head1.weight")?;
        let b1 = p.get("head1.bias")?;
        g.conv3d_at(dense, w1, b1, samples)
    }

    /// Full dense forward pass on a graph: DSIR as `[C_d,H,W,D]`.
    pub fn forward_on(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let h = self.features_on(g, p, image)?;
        let hc = self.embed_on(g, p, h)?;
        self.head_on(g, p, hc)
    }

    /// Feature map of a normalized volume, `[C_h,H,W,D]`.
    pub fn extract_features(&self, v: &Volume) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = Self::input(&mut g, v)?;
        let h = self.features_on(&mut g, &p, x)?;
        Ok(g.value(h).clone())
    }

    /// DSIR of a normalized volume, channels last.
    pub fn forward(&self, v: &Volume) -> Result<FeatureField> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = Self::input(&mut g, v)?;
        let d = self.forward_on(&mut g, &p, x)?;
        FeatureField::from_channel_first(v.dims, self.config.descriptor_channels, g.value(d).data())
    }
}

/// Sorted, de-duplicated in-bounds voxels within one step of any sample.
pub fn neighbourhood_support(dims: Dims, samples: &[usize]) -> Vec<usize> {
    let mut mark = vec![false; dims.len()];
    for &s in samples {
        let c = dims.coords(s);
        for a in -1isize..=1 {
            for b in -1isize..=1 {
                for e in -1isize..=1 {
                    let p = [c[0] as isize + a, c[1] as isize + b, c[2] as isize + e];
                    if p.iter().zip(dims.0).all(|(&x, n)| x >= 0 && (x as usize) < n) {
                        mark[dims.index(p[0] as usize, p[1] as usize, p[2] as usize)] = true;
                    }
                }
            }
        }
    }
    mark.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
}
