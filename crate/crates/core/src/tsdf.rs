//! Truncated signed distance volumes: depth integration, losses, marching
//! cubes and ray-marched depth rendering.
//!
//! Values are positive in free space and negative behind surfaces, in units
//! of the truncation distance. Unobserved voxels hold value 1 with weight 0.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Vec3, VoxelGridSpec};
use crate::raster::DepthMap;
use crate::volume::SceneVolume;

pub const MAX_WEIGHT: f64 = 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    pub spec: VoxelGridSpec,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub truncation: f64,
}

impl TsdfVolume {
    pub fn new(spec: VoxelGridSpec, truncation: f64) -> Result<Self> {
        if !(truncation > 0.0) || !truncation.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "truncation must be positive, got {truncation}"
            )));
        }
        let n = spec.num_voxels();
        Ok(Self {
            spec,
            values: vec![1.0; n],
            weights: vec![0.0; n],
            truncation,
        })
    }

    /// Fully observed volume sampled from a signed distance function in meters.
    pub fn from_sdf(
        spec: VoxelGridSpec,
        truncation: f64,
        sdf: impl Fn(&Vec3) -> f64 + Sync,
    ) -> Result<Self> {
        let mut vol = Self::new(spec, truncation)?;
        vol.values = (0..spec.num_voxels())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = spec.unravel(idx);
                (sdf(&spec.voxel_center(i, j, k)) / truncation).clamp(-1.0, 1.0)
            })
            .collect();
        vol.weights.iter_mut().for_each(|w| *w = 1.0);
        Ok(vol)
    }

    pub fn observed(&self, idx: usize) -> bool {
        self.weights[idx] > 0.0
    }

    pub fn observed_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn same_spec(&self, other: &TsdfVolume) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::ShapeMismatch(format!(
                "TSDF grids differ: {:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        Ok(())
    }

    /// Projective update with one depth map.
    pub fn integrate(&mut self, depth: &DepthMap, cam: &Camera) -> Result<()> {
        let k = &cam.intrinsics;
        if k.width != depth.width || k.height != depth.height {
            return Err(Error::ShapeMismatch(format!(
                "camera is {}x{}, depth map is {}x{}",
                k.width, k.height, depth.width, depth.height
            )));
        }
        let spec = self.spec;
        let mu = self.truncation;
        let slab = spec.dims[1] * spec.dims[2];
        self.values
            .par_chunks_mut(slab)
            .zip(self.weights.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(i, (vals, wts))| {
                for (r, (val, wt)) in vals.iter_mut().zip(wts.iter_mut()).enumerate() {
                    let (j, kk) = (r / spec.dims[2], r % spec.dims[2]);
                    let Ok(p) = cam.project_world(&spec.voxel_center(i, j, kk)) else {
                        continue;
                    };
                    let Some((u, v)) = k.nearest_pixel(p.u, p.v) else {
                        continue;
                    };
                    let Some(z) = depth.get(u, v) else { continue };
                    let sdf = z - p.z;
                    if sdf < -mu {
                        continue;
                    }
                    let t = (sdf / mu).clamp(-1.0, 1.0);
                    *val = (*val * *wt + t) / (*wt + 1.0);
                    *wt = (*wt + 1.0).min(MAX_WEIGHT);
                }
            });
        Ok(())
    }

    /// Trilinear value at continuous voxel coordinates; `None` outside the
    /// grid or when any of the 8 neighbors is unobserved.
    pub fn sample_voxel(&self, x: &Vec3) -> Option<f64> {
        let d = self.spec.dims;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if !(x[a] >= 0.0 && x[a] <= (d[a] - 1) as f64) {
                return None;
            }
            let f = x[a].floor();
            let b = (f as usize).min(d[a].saturating_sub(2));
            base[a] = b;
            frac[a] = x[a] - b as f64;
        }
        let mut acc = 0.0;
        for c in 0..8 {
            let off = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut w = 1.0;
            let mut ijk = [0usize; 3];
            for a in 0..3 {
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                ijk[a] = (base[a] + off[a]).min(d[a] - 1);
            }
            let idx = self.spec.linear_index(ijk[0], ijk[1], ijk[2]);
            if !self.observed(idx) {
                return None;
            }
            acc += w * self.values[idx];
        }
        Some(acc)
    }

    pub fn sample_world(&self, p: &Vec3) -> Option<f64> {
        self.sample_voxel(&self.spec.world_to_voxel(p))
    }

    /// Two-channel container: values, then weights.
    pub fn to_volume(&self) -> SceneVolume {
        let mut data = self.values.clone();
        data.extend_from_slice(&self.weights);
        SceneVolume {
            spec: self.spec,
            channels: 2,
            data,
        }
    }

    pub fn from_volume(v: SceneVolume, truncation: f64) -> Result<Self> {
        if v.channels != 2 {
            return Err(Error::ShapeMismatch(format!(
                "TSDF container needs 2 channels, got {}",
                v.channels
            )));
        }
        let n = v.voxels();
        let mut vol = Self::new(v.spec, truncation)?;
        vol.values = v.data[..n].to_vec();
        vol.weights = v.data[n..].to_vec();
        if vol.values.iter().any(|x| x.abs() > 1.0) || vol.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument(
                "TSDF values must lie in [-1, 1] with non-negative weights".into(),
            ));
        }
        Ok(vol)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_volume().save(path)
    }

    pub fn load(path: &Path, truncation: f64) -> Result<Self> {
        Self::from_volume(SceneVolume::load(path)?, truncation)
            .map_err(|e| Error::format("TSDF volume", path, e.to_string()))
    }
}

pub fn integrate_depth(vol: &TsdfVolume, depth: &DepthMap, cam: &Camera) -> Result<TsdfVolume> {
    let mut out = vol.clone();
    out.integrate(depth, cam)?;
    Ok(out)
}

/// L1 distance over voxels observed in `gt`.
pub fn tsdf_loss(pred: &TsdfVolume, gt: &TsdfVolume) -> Result<f64> {
    pred.same_spec(gt)?;
    Ok((0..gt.values.len())
        .filter(|&i| gt.observed(i))
        .map(|i| (pred.values[i] - gt.values[i]).abs())
        .sum())
}

/// Gradient of [`tsdf_loss`] with respect to `pred.values`.
pub fn tsdf_loss_grad(pred: &TsdfVolume, gt: &TsdfVolume) -> Result<Vec<f64>> {
    pred.same_spec(gt)?;
    Ok((0..gt.values.len())
        .map(|i| {
            let d = pred.values[i] - gt.values[i];
            if gt.observed(i) && d != 0.0 {
                d.signum()
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub depth: f64,
    pub overlap: f64,
    pub tsdf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            overlap: 0.5,
            tsdf: 2.0,
        }
    }
}

pub fn total_loss(l_depth: f64, l_overlap: f64, l_tsdf: f64, w: &LossWeights) -> Result<f64> {
    if ![l_depth, l_overlap, l_tsdf].iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("loss terms"));
    }
    Ok(w.depth * l_depth + w.overlap * l_overlap + w.tsdf * l_tsdf)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let mut body = Vec::with_capacity(12 * self.vertices.len() + 13 * self.faces.len());
        for v in &self.vertices {
            for x in v {
                body.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        for f in &self.faces {
            body.push(3u8);
            for i in f {
                body.extend_from_slice(&i.to_le_bytes());
            }
        }
        let header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar uint vertex_indices\nend_header\n",
            self.vertices.len(),
            self.faces.len()
        );
        w.write_all(header.as_bytes())
            .and_then(|_| w.write_all(&body))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads the layout written by [`write_ply`](Self::write_ply); the face
    /// element may be absent for point clouds.
    pub fn read_ply(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let bad = |r: &str| Error::format("PLY mesh", path, r);
        let mut rd = BufReader::new(f);
        let mut lines = Vec::new();
        loop {
            let mut line = String::new();
            if rd.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
                return Err(bad("header not terminated"));
            }
            let line = line.trim().to_string();
            if line == "end_header" {
                break;
            }
            lines.push(line);
        }
        if lines.first().map(String::as_str) != Some("ply") {
            return Err(bad("missing ply magic"));
        }
        if !lines.iter().any(|l| l == "format binary_little_endian 1.0") {
            return Err(bad("only binary little-endian PLY is supported"));
        }
        let (mut nv, mut nf) = (None, 0usize);
        let mut vprops = Vec::new();
        let mut current = "";
        for l in &lines[1..] {
            let t: Vec<&str> = l.split_whitespace().collect();
            match t.as_slice() {
                ["element", "vertex", n] => {
                    nv = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                    current = "vertex";
                }
                ["element", "face", n] => {
                    nf = n.parse().map_err(|_| bad("bad face count"))?;
                    current = "face";
                }
                ["element", ..] => return Err(bad("unsupported element")),
                ["property", "float", name] if current == "vertex" => vprops.push(*name),
                ["property", "list", "uchar", "uint" | "int", _] if current == "face" => {}
                ["property", ..] => return Err(bad("unsupported property")),
                _ => {}
            }
        }
        let nv = nv.ok_or_else(|| bad("no vertex element"))?;
        if vprops != ["x", "y", "z"] {
            return Err(bad("vertex properties must be float x, y, z"));
        }
        let mut body = Vec::new();
        rd.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        if body.len() < 12 * nv {
            return Err(bad("truncated vertex data"));
        }
        let f32_at = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64;
        let vertices = (0..nv)
            .map(|i| [f32_at(12 * i), f32_at(12 * i + 4), f32_at(12 * i + 8)])
            .collect();
        let mut faces = Vec::with_capacity(nf);
        let mut o = 12 * nv;
        for _ in 0..nf {
            if body.len() < o + 13 || body[o] != 3 {
                return Err(bad("faces must be triangles"));
            }
            let idx = |k: usize| {
                u32::from_le_bytes(body[o + 1 + 4 * k..o + 5 + 4 * k].try_into().unwrap())
            };
            let face = [idx(0), idx(1), idx(2)];
            if face.iter().any(|&i| i as usize >= nv) {
                return Err(bad("face index out of range"));
            }
            faces.push(face);
            o += 13;
        }
        if o != body.len() {
            return Err(bad("trailing bytes after face data"));
        }
        Ok(Self { vertices, faces })
    }
}

/// Cube corner `c` sits at offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
const fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

struct McTables {
    /// Cube edges as (corner, corner, axis), the first corner being the lower one.
    edges: [(usize, usize, usize); 12],
    /// Triangles as edge triples, per corner sign configuration (bit c set
    /// when corner c is negative).
    cases: Vec<Vec<[usize; 3]>>,
}

/// Builds the 256-case table by tracing the surface boundary on each cube
/// face. Walking a face counter-clockwise seen from outside, every crossing
/// into the negative region is joined to the next crossing out of it, which
/// keeps negative corners apart on ambiguous faces. Each crossing edge is
/// shared by two faces with opposite walking directions, so the segments
/// chain into closed loops that are fanned into triangles facing the
/// positive side.
fn mc_tables() -> &'static McTables {
    static TABLES: OnceLock<McTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut edges = [(0, 0, 0); 12];
        let mut edge_of = [[usize::MAX; 8]; 8];
        let mut n = 0;
        for axis in 0..3 {
            for c in 0..8 {
                if c >> axis & 1 == 0 {
                    let d = c | 1 << axis;
                    edges[n] = (c, d, axis);
                    edge_of[c][d] = n;
                    edge_of[d][c] = n;
                    n += 1;
                }
            }
        }
        let mut faces = Vec::with_capacity(6);
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            for s in 0..2 {
                let mut ring: Vec<usize> = [(0, 0), (1, 0), (1, 1), (0, 1)]
                    .iter()
                    .map(|&(x, y)| s << a | x << b | y << c)
                    .collect();
                if s == 0 {
                    ring.reverse();
                }
                faces.push(ring);
            }
        }
        let cases = (0..256usize)
            .map(|case| {
                let neg = |c: usize| case >> c & 1 == 1;
                let mut next = [usize::MAX; 12];
                for ring in &faces {
                    let crossings: Vec<(usize, bool)> = (0..4)
                        .filter_map(|t| {
                            let (p, q) = (ring[t], ring[(t + 1) % 4]);
                            (neg(p) != neg(q)).then(|| (edge_of[p][q], neg(q)))
                        })
                        .collect();
                    for (i, &(e, entering)) in crossings.iter().enumerate() {
                        if entering {
                            next[e] = crossings[(i + 1) % crossings.len()].0;
                        }
                    }
                }
                let mut seen = [false; 12];
                let mut tris = Vec::new();
                for start in 0..12 {
                    if next[start] == usize::MAX || seen[start] {
                        continue;
                    }
                    let mut ring = vec![start];
                    seen[start] = true;
                    let mut e = next[start];
                    while e != start {
                        seen[e] = true;
                        ring.push(e);
                        e = next[e];
                    }
                    for t in 1..ring.len() - 1 {
                        tris.push([ring[0], ring[t], ring[t + 1]]);
                    }
                }
                tris
            })
            .collect();
        McTables { edges, cases }
    })
}

/// Marching cubes at level 0 over cubes whose 8 corners are observed.
pub fn extract_mesh(vol: &TsdfVolume) -> TriangleMesh {
    let spec = vol.spec;
    let [nx, ny, nz] = spec.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return TriangleMesh::default();
    }
    let tables = mc_tables();
    // per x-slab: triangles as global edge keys, plus the vertex position of each key
    let slabs: Vec<Vec<[(usize, usize, [f64; 3]); 3]>> = (0..nx - 1)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::new();
            for j in 0..ny - 1 {
                for k in 0..nz - 1 {
                    let mut idx = [0usize; 8];
                    let mut val = [0.0; 8];
                    let mut case = 0usize;
                    let mut ok = true;
                    for c in 0..8 {
                        let o = corner_offset(c);
                        idx[c] = spec.linear_index(i + o[0], j + o[1], k + o[2]);
                        if !vol.observed(idx[c]) {
                            ok = false;
                            break;
                        }
                        val[c] = vol.values[idx[c]];
                        if val[c] < 0.0 {
                            case |= 1 << c;
                        }
                    }
                    if !ok || case == 0 || case == 255 {
                        continue;
                    }
                    for tri in &tables.cases[case] {
                        out.push(tri.map(|e| {
                            let (c0, c1, axis) = tables.edges[e];
                            let t = val[c0] / (val[c0] - val[c1]);
                            let p0 = spec.voxel_center(
                                i + corner_offset(c0)[0],
                                j + corner_offset(c0)[1],
                                k + corner_offset(c0)[2],
                            );
                            let p = p0
                                + Vec3::from_fn(
                                    |a, _| if a == axis { t * spec.pitch } else { 0.0 },
                                );
                            (idx[c0], axis, [p.x, p.y, p.z])
                        }));
                    }
                }
            }
            out
        })
        .collect();
    let mut mesh = TriangleMesh::default();
    let mut ids: HashMap<(usize, usize), u32> = HashMap::new();
    for tri in slabs.into_iter().flatten() {
        let face = tri.map(|(v, axis, p)| {
            *ids.entry((v, axis)).or_insert_with(|| {
                mesh.vertices.push(p);
                (mesh.vertices.len() - 1) as u32
            })
        });
        if face[0] != face[1] && face[1] != face[2] && face[0] != face[2] {
            mesh.faces.push(face);
        }
    }
    mesh
}

/// Ray-marched depth of the first front-to-back zero crossing per pixel.
pub fn render_depth(vol: &TsdfVolume, cam: &Camera) -> Result<DepthMap> {
    let k = &cam.intrinsics;
    let kinv = k.inverse_matrix()?;
    let wfc = cam.world_from_cam();
    let center = cam.center();
    let (lo, hi) = vol.spec.bounds();
    let step_len = vol.truncation / 2.0;
    let rows: Vec<Vec<Option<f64>>> = (0..k.height)
        .into_par_iter()
        .map(|v| {
            (0..k.width)
                .map(|u| {
                    let dir = wfc.rotation() * (kinv * Vec3::new(u as f64, v as f64, 1.0));
                    march(vol, &center, &dir, &lo, &hi, step_len / dir.norm())
                })
                .collect()
        })
        .collect();
    let mut out = DepthMap::invalid(k.width, k.height);
    for (v, row) in rows.into_iter().enumerate() {
        for (u, z) in row.into_iter().enumerate() {
            out.set(u, v, z);
        }
    }
    Ok(out)
}

/// Marches `origin + z * dir` with `z` the camera depth.
fn march(
    vol: &TsdfVolume,
    origin: &Vec3,
    dir: &Vec3,
    lo: &Vec3,
    hi: &Vec3,
    dz: f64,
) -> Option<f64> {
    let (mut t0, mut t1) = (1e-6, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = f64::max(t0, ta);
        t1 = f64::min(t1, tb);
    }
    if !(t0 <= t1) {
        return None;
    }
    let mut prev: Option<(f64, f64)> = None;
    let steps = ((t1 - t0) / dz).floor() as usize;
    for s in 0..=steps {
        let z = t0 + s as f64 * dz;
        let cur = vol.sample_world(&(origin + dir * z));
        if let (Some((zp, fp)), Some(fc)) = (prev, cur) {
            if fp > 0.0 && fc <= 0.0 {
                return Some(zp + (z - zp) * fp / (fp - fc));
            }
        }
        prev = cur.map(|f| (z, f));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use proptest::prelude::*;

    fn wall_setup(z_wall: f64) -> (TsdfVolume, Camera, DepthMap) {
        let k = Intrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap();
        let cam = Camera::new(k, Pose::identity());
        let spec = VoxelGridSpec::new([-0.3, -0.3, 0.5], 0.04, [16, 16, 30]).unwrap();
        let vol = TsdfVolume::new(spec, 0.12).unwrap();
        (vol, cam, DepthMap::constant(32, 24, z_wall))
    }

    #[test]
    fn wall_values() {
        let k = Intrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap();
        let cam = Camera::new(k, Pose::identity());
        let spec = VoxelGridSpec::new([0.0, 0.0, 0.96], 0.02, [1, 1, 6]).unwrap();
        let mut vol = TsdfVolume::new(spec, 0.12).unwrap();
        vol.integrate(&DepthMap::constant(32, 24, 1.0), &cam)
            .unwrap();
        let at = |z: f64| vol.values[((z - 0.96) / 0.02).round() as usize];
        assert!((at(0.96) - 1.0 / 3.0).abs() < 1e-9);
        assert!(at(1.0).abs() < 1e-9);
        assert!((at(1.06) + 0.5).abs() < 1e-9);
    }

    #[test]
    fn far_behind_surface_untouched() {
        let (mut vol, cam, d) = wall_setup(0.8);
        vol.integrate(&d, &cam).unwrap();
        let idx = vol.spec.linear_index(8, 8, 29); // z = 1.66
        assert_eq!((vol.values[idx], vol.weights[idx]), (1.0, 0.0));
    }

    #[test]
    fn repeated_integration_keeps_values() {
        let (mut vol, cam, d) = wall_setup(1.0);
        vol.integrate(&d, &cam).unwrap();
        let once = vol.clone();
        vol.integrate(&d, &cam).unwrap();
        for i in 0..vol.values.len() {
            assert!((vol.values[i] - once.values[i]).abs() < 1e-12);
            assert_eq!(vol.weights[i], 2.0 * once.weights[i]);
        }
    }

    #[test]
    fn weights_saturate() {
        let (mut vol, cam, d) = wall_setup(1.0);
        for _ in 0..260 {
            vol.integrate(&d, &cam).unwrap();
        }
        assert!(vol.weights.iter().all(|&w| w <= MAX_WEIGHT));
        assert!(vol.weights.iter().any(|&w| w == MAX_WEIGHT));
    }

    #[test]
    fn loss_examples() {
        let spec = VoxelGridSpec::new([0.0; 3], 0.1, [10, 10, 10]).unwrap();
        let gt = TsdfVolume::from_sdf(spec, 0.3, |p| p.x - 0.5).unwrap();
        assert_eq!(tsdf_loss(&gt, &gt).unwrap(), 0.0);
        let mut pred = gt.clone();
        pred.values.iter_mut().for_each(|v| *v -= 0.1);
        assert!((tsdf_loss(&pred, &gt).unwrap() - 100.0).abs() < 1e-9);
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w).unwrap(), 3.5);
        assert_eq!(total_loss(2.0, 4.0, 1.0, &w).unwrap(), 6.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
        let other =
            TsdfVolume::new(VoxelGridSpec::new([0.0; 3], 0.1, [4, 4, 4]).unwrap(), 0.3).unwrap();
        assert!(tsdf_loss(&other, &gt).is_err());
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let spec = VoxelGridSpec::new([0.0; 3], 0.1, [4, 4, 4]).unwrap();
        let gt = TsdfVolume::from_sdf(spec, 0.2, |p| p.y - 0.15).unwrap();
        let mut pred =
            TsdfVolume::from_sdf(spec, 0.2, |p| 0.7 * (p.x - 0.12) + 0.01 * p.z).unwrap();
        pred.weights[3] = 0.0;
        let g = tsdf_loss_grad(&pred, &gt).unwrap();
        let h = 1e-6;
        for i in 0..pred.values.len() {
            let mut a = pred.clone();
            let mut b = pred.clone();
            a.values[i] += h;
            b.values[i] -= h;
            let fd = (tsdf_loss(&a, &gt).unwrap() - tsdf_loss(&b, &gt).unwrap()) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1.0),
                "voxel {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn table_is_closed_and_consistent() {
        let t = mc_tables();
        assert_eq!(t.cases[0].len(), 0);
        assert_eq!(t.cases[255].len(), 0);
        assert_eq!(t.cases[1].len(), 1);
        for (case, tris) in t.cases.iter().enumerate() {
            let crossing: Vec<usize> = (0..12)
                .filter(|&e| {
                    let (c0, c1, _) = t.edges[e];
                    (case >> c0 & 1) != (case >> c1 & 1)
                })
                .collect();
            let used: std::collections::BTreeSet<usize> = tris.iter().flatten().copied().collect();
            assert_eq!(
                used.into_iter().collect::<Vec<_>>(),
                crossing,
                "case {case}"
            );
            // each loop of m crossings yields m - 2 triangles
            let loops = crossing.len() as isize - tris.len() as isize;
            assert!(loops >= 1 || crossing.is_empty(), "case {case}");
        }
    }

    fn sphere_volume(pitch: f64) -> (TsdfVolume, Vec3, f64) {
        let c = Vec3::new(0.03, -0.01, 0.02);
        let r = 0.5;
        let n = (1.4 / pitch).ceil() as usize;
        let spec = VoxelGridSpec::new([-0.7, -0.7, -0.7], pitch, [n, n, n]).unwrap();
        (
            TsdfVolume::from_sdf(spec, 3.0 * pitch, |p| (p - c).norm() - r).unwrap(),
            c,
            r,
        )
    }

    #[test]
    fn sphere_mesh_is_accurate_watertight_and_outward() {
        let (vol, c, r) = sphere_volume(0.02);
        let mesh = extract_mesh(&vol);
        assert!(mesh.faces.len() > 1000);
        for v in &mesh.vertices {
            let d = (Vec3::from(*v) - c).norm() - r;
            assert!(d.abs() < 0.02, "vertex off by {d}");
        }
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        let mut outward = 0usize;
        for f in &mesh.faces {
            for s in 0..3 {
                let (a, b) = (f[s], f[(s + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += if a < b { 1 } else { -1 };
            }
            let p = f.map(|i| Vec3::from(mesh.vertices[i as usize]));
            let nrm = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let mid = (p[0] + p[1] + p[2]) / 3.0;
            if nrm.dot(&(mid - c)) > 0.0 {
                outward += 1;
            }
        }
        assert!(
            edges.values().all(|&n| n == 0),
            "mesh has boundary or inconsistent edges"
        );
        assert_eq!(outward, mesh.faces.len());
    }

    #[test]
    fn vertices_resample_to_zero() {
        let (vol, _, _) = sphere_volume(0.04);
        for v in extract_mesh(&vol).vertices {
            let f = vol.sample_world(&Vec3::from(v)).unwrap();
            assert!(f.abs() < 0.05, "{f}");
        }
    }

    #[test]
    fn midpoint_vertex_and_empty_cases() {
        let spec = VoxelGridSpec::new([0.0; 3], 1.0, [2, 2, 2]).unwrap();
        let mut vol = TsdfVolume::new(spec, 1.0).unwrap();
        vol.weights.iter_mut().for_each(|w| *w = 1.0);
        vol.values = vec![0.5; 8];
        assert!(extract_mesh(&vol).is_empty());
        vol.values[0] = -0.5;
        let mesh = extract_mesh(&vol);
        assert_eq!(mesh.faces.len(), 1);
        let mut vs = mesh.vertices.clone();
        vs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(vs, vec![[0.0, 0.0, 0.5], [0.0, 0.5, 0.0], [0.5, 0.0, 0.0]]);
        vol.weights[7] = 0.0;
        assert!(extract_mesh(&vol).is_empty());
    }

    #[test]
    fn ply_round_trip() {
        let (vol, _, _) = sphere_volume(0.1);
        let mesh = extract_mesh(&vol);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        mesh.write_ply(&p).unwrap();
        let back = TriangleMesh::read_ply(&p).unwrap();
        assert_eq!(back.faces, mesh.faces);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
        std::fs::write(&p, b"ply\nformat ascii 1.0\nend_header\n").unwrap();
        assert!(TriangleMesh::read_ply(&p).is_err());
    }

    #[test]
    fn tsdf_file_round_trip() {
        let (mut vol, cam, d) = wall_setup(1.0);
        vol.integrate(&d, &cam).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vol");
        vol.save(&p).unwrap();
        let back = TsdfVolume::load(&p, vol.truncation).unwrap();
        assert_eq!(back.weights, vol.weights);
        for (a, b) in back.values.iter().zip(&vol.values) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn render_wall_on_axis() {
        let (mut vol, cam, d) = wall_setup(1.0);
        vol.integrate(&d, &cam).unwrap();
        let r = render_depth(&vol, &cam).unwrap();
        let z = r.get(16, 12).unwrap();
        assert!((z - 1.0).abs() <= 0.02, "{z}");
        let empty = TsdfVolume::new(vol.spec, 0.12).unwrap();
        assert_eq!(render_depth(&empty, &cam).unwrap().valid_count(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]
        #[test]
        fn wall_zero_crossing_within_half_pitch(z in 0.7f64..1.5) {
            let (mut vol, cam, d) = wall_setup(z);
            vol.integrate(&d, &cam).unwrap();
            let (i, j) = (8, 8);
            let k = (0..vol.spec.dims[2] - 1)
                .find(|&k| {
                    let (a, b) = (vol.spec.linear_index(i, j, k), vol.spec.linear_index(i, j, k + 1));
                    vol.observed(a) && vol.observed(b) && vol.values[a] > 0.0 && vol.values[b] <= 0.0
                })
                .unwrap();
            let (a, b) = (vol.spec.linear_index(i, j, k), vol.spec.linear_index(i, j, k + 1));
            let t = vol.values[a] / (vol.values[a] - vol.values[b]);
            let zc = vol.spec.voxel_center(i, j, k).z + t * vol.spec.pitch;
            prop_assert!((zc - z).abs() <= vol.spec.pitch / 2.0);
        }

        #[test]
        fn integration_is_order_free(z1 in 0.7f64..1.4, z2 in 0.7f64..1.4, z3 in 0.7f64..1.4) {
            let (vol, cam, _) = wall_setup(1.0);
            let ds: Vec<DepthMap> = [z1, z2, z3].iter().map(|&z| DepthMap::constant(32, 24, z)).collect();
            let run = |order: [usize; 3]| {
                let mut v = vol.clone();
                for i in order {
                    v.integrate(&ds[i], &cam).unwrap();
                }
                v
            };
            let a = run([0, 1, 2]);
            let b = run([2, 0, 1]);
            for i in 0..a.values.len() {
                prop_assert!((a.values[i] - b.values[i]).abs() < 1e-6);
            }
            prop_assert_eq!(a.weights, b.weights);
        }

        #[test]
        fn loss_nonnegative(off in -0.5f64..0.5) {
            let spec = VoxelGridSpec::new([0.0; 3], 0.1, [4, 4, 4]).unwrap();
            let gt = TsdfVolume::from_sdf(spec, 0.2, |p| p.z - 0.2).unwrap();
            let pred = TsdfVolume::from_sdf(spec, 0.2, |p| p.z - 0.2 + off).unwrap();
            let l = tsdf_loss(&pred, &gt).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, pred.values == gt.values);
        }
    }
}
