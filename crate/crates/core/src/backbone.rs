//! PointNet-style segmentation trunk: a shared per-point MLP, a max-pooled
//! global feature, and a per-point head over the whole part vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Smallest cloud the encoder accepts.
pub const MIN_POINTS: usize = 16;
const NORMALIZATION_TOL: f64 = 1e-6;

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A centred, unit-sphere-normalized point set.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Tensor,
    pub sample_id: String,
}

impl PointCloud {
    pub fn new(points: Tensor, sample_id: impl Into<String>) -> Result<Self> {
        let cloud = Self {
            points,
            sample_id: sample_id.into(),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    /// Centres the points on their centroid and scales the farthest point to
    /// norm 1.
    pub fn normalized(mut points: Vec<[f64; 3]>, sample_id: impl Into<String>) -> Result<Self> {
        normalize_points(&mut points)?;
        let flat = points.iter().flatten().copied().collect();
        Self::new(Tensor::new(vec![points.len(), 3], flat)?, sample_id)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.points.shape();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::InputContract(format!(
                "cloud `{}` must be N×3, got {shape:?}",
                self.sample_id
            )));
        }
        let n = shape[0];
        if n < MIN_POINTS {
            return Err(Error::InputContract(format!(
                "cloud `{}` has {n} points, need at least {MIN_POINTS}",
                self.sample_id
            )));
        }
        let mut centroid = [0.0; 3];
        let mut max_norm: f64 = 0.0;
        for r in 0..n {
            let p = self.points.row(r);
            for d in 0..3 {
                centroid[d] += p[d];
            }
            max_norm = max_norm.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
        }
        let off = centroid.iter().map(|c| (c / n as f64).abs()).fold(0.0, f64::max);
        if off > NORMALIZATION_TOL || (max_norm - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InputContract(format!(
                "cloud `{}` is not normalized (centroid offset {off:e}, max norm {max_norm})",
                self.sample_id
            )));
        }
        Ok(())
    }

    /// The same cloud with rows reordered: row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: self.points.select_rows(perm),
            sample_id: self.sample_id.clone(),
        }
    }
}

pub fn normalize_points(points: &mut [[f64; 3]]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::EmptySet("normalize_points"));
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let mut max_norm: f64 = 0.0;
    for p in points.iter_mut() {
        for d in 0..3 {
            p[d] -= c[d];
        }
        max_norm = max_norm.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if max_norm <= 0.0 {
        return Err(Error::InputContract("all points coincide".into()));
    }
    for p in points.iter_mut() {
        for v in p.iter_mut() {
            *v /= max_norm;
        }
    }
    Ok(())
}

/// Layer widths of the trunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub point_layers: Vec<usize>,
    pub global: usize,
    pub seg_hidden: usize,
}

impl Default for BackboneDims {
    fn default() -> Self {
        Self {
            point_layers: vec![64, 128, 256],
            global: 512,
            seg_hidden: 256,
        }
    }
}

impl BackboneDims {
    pub fn local(&self) -> usize {
        *self.point_layers.last().expect("at least one point layer")
    }

    /// Width M of the pointwise feature handed to part pooling.
    pub fn pointwise(&self) -> usize {
        self.local() + self.global
    }
}

/// Uniform Glorot initialisation in ±sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, rows: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, fan_out], data).expect("shape matches data")
}

/// The trunk's weights W.
///
/// The first segmentation layer acts on `[local | global]` and is stored as
/// its two row blocks so the global half is applied once per cloud instead
/// of once per point.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub dims: BackboneDims,
    pub num_parts: usize,
    pub set: ParamSet,
}

impl BackboneParams {
    pub fn init(dims: &BackboneDims, num_parts: usize, seed: u64) -> Result<Self> {
        if dims.point_layers.is_empty() || num_parts == 0 {
            return Err(Error::Config("backbone needs point layers and parts".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let mut fan_in = 3;
        for (i, &w) in dims.point_layers.iter().enumerate() {
            set.insert(format!("point.{i}.weight"), glorot(&mut rng, fan_in, w, fan_in));
            set.insert(format!("point.{i}.bias"), Tensor::zeros(&[w]));
            fan_in = w;
        }
        let local = dims.local();
        set.insert("global.weight", glorot(&mut rng, local, dims.global, local));
        set.insert("global.bias", Tensor::zeros(&[dims.global]));

        let m = dims.pointwise();
        let h = dims.seg_hidden;
        let w0 = glorot(&mut rng, m, h, m);
        set.insert("seg.0.weight_local", Tensor::new(vec![local, h], w0.data()[..local * h].to_vec())?);
        set.insert("seg.0.weight_global", Tensor::new(vec![dims.global, h], w0.data()[local * h..].to_vec())?);
        set.insert("seg.0.bias", Tensor::zeros(&[h]));
        set.insert("seg.1.weight", glorot(&mut rng, h, num_parts, h));
        set.insert("seg.1.bias", Tensor::zeros(&[num_parts]));
        Ok(Self {
            dims: dims.clone(),
            num_parts,
            set,
        })
    }

    /// Checks that the stored arrays chain into a valid trunk.
    pub fn validate(&self) -> Result<()> {
        let mut fan_in = 3;
        let expect = |name: String, shape: &[usize]| -> Result<()> {
            let t = self.set.get(&name)?;
            if t.shape() != shape {
                return Err(Error::Dimension {
                    op: "backbone params",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(Error::Contract(format!("parameter `{name}` is not finite")));
            }
            Ok(())
        };
        for (i, &w) in self.dims.point_layers.iter().enumerate() {
            expect(format!("point.{i}.weight"), &[fan_in, w])?;
            expect(format!("point.{i}.bias"), &[w])?;
            fan_in = w;
        }
        let (l, g, h) = (self.dims.local(), self.dims.global, self.dims.seg_hidden);
        expect("global.weight".into(), &[l, g])?;
        expect("global.bias".into(), &[g])?;
        expect("seg.0.weight_local".into(), &[l, h])?;
        expect("seg.0.weight_global".into(), &[g, h])?;
        expect("seg.0.bias".into(), &[h])?;
        expect("seg.1.weight".into(), &[h, self.num_parts])?;
        expect("seg.1.bias".into(), &[self.num_parts])?;
        Ok(())
    }

    /// Wraps vars already on a tape, in [`ParamSet`] order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundBackbone {
        BoundBackbone {
            layers: self.dims.point_layers.len(),
            vars,
        }
    }

    /// Puts the weights on a tape; `trainable` decides whether they collect
    /// gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBackbone {
        let vars = if trainable {
            self.set.bind(tape)
        } else {
            self.set.bind_frozen(tape)
        };
        BoundBackbone {
            layers: self.dims.point_layers.len(),
            vars,
        }
    }
}

/// Backbone weights recorded on a tape, in [`ParamSet`] order.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    layers: usize,
    pub vars: Vec<Var>,
}

impl BoundBackbone {
    fn point(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn global(&self) -> (Var, Var) {
        (self.vars[2 * self.layers], self.vars[2 * self.layers + 1])
    }

    fn seg0(&self) -> (Var, Var, Var) {
        let o = 2 * self.layers + 2;
        (self.vars[o], self.vars[o + 1], self.vars[o + 2])
    }

    fn seg1(&self) -> (Var, Var) {
        let o = 2 * self.layers + 5;
        (self.vars[o], self.vars[o + 1])
    }
}

/// Per-point features of one cloud, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PointFeatures {
    /// N × local, output of the shared point MLP.
    pub local: Var,
    /// Global feature, max-pooled over points.
    pub global: Var,
    /// N × (local + global): local features with the global one appended to
    /// every row. This is the Y that part pooling reads.
    pub pointwise: Var,
    pub num_points: usize,
}

/// Runs the shared point MLP and the global max-pool.
pub fn encode(tape: &mut Tape, cloud: &PointCloud, params: &BoundBackbone) -> Result<PointFeatures> {
    cloud.validate()?;
    let n = cloud.len();
    let mut h = tape.constant(cloud.points.clone());
    for i in 0..params.layers {
        let (w, b) = params.point(i);
        let z = tape.linear(h, w, b)?;
        h = tape.relu(z);
    }
    let local = h;
    let (gw, gb) = params.global();
    let g = tape.linear(local, gw, gb)?;
    let g = tape.relu(g);
    let (global, _) = tape.max_pool_rows(g)?;
    let broadcast = tape.broadcast_rows(global, n)?;
    let pointwise = tape.concat_cols(local, broadcast)?;
    Ok(PointFeatures {
        local,
        global,
        pointwise,
        num_points: n,
    })
}

/// Per-point logits over the full part vocabulary; no softmax.
pub fn part_logits(tape: &mut Tape, feats: &PointFeatures, params: &BoundBackbone) -> Result<Var> {
    let (w_local, w_global, b) = params.seg0();
    let a = tape.linear(feats.local, w_local, b)?;
    let g_len = tape.value(feats.global).len();
    let g_row = tape.reshape(feats.global, &[1, g_len])?;
    let g_proj = tape.matmul(g_row, w_global)?;
    let h_len = tape.value(g_proj).len();
    let g_proj = tape.reshape(g_proj, &[h_len])?;
    let h = tape.add_row_broadcast(a, g_proj)?;
    let h = tape.relu(h);
    let (w1, b1) = params.seg1();
    tape.linear(h, w1, b1)
}
