//! Binary checkpoint container.
//!
//! Layout (all little-endian): container magic `VXCK`, version, the config
//! as length-prefixed JSON, stage/iteration/batching state, then the phase
//! payload. Grids embed as self-describing blobs: magic `VXRF`, version,
//! dims, channels, bbox as 6 float64, then float32 values in channel-major,
//! z-fastest order. Network weights and optimizer moments store at full
//! float64. Saving, loading and saving again produces identical bytes.

use super::{ColorModel, Phase, PipelineState, SdfPhase, SearchPhase, Stage, TrainConfig};
use crate::field::{ColorInputLayout, DualColor, Head, Mlp, SceneField};
use crate::grid::DenseGrid;
use crate::math::{Aabb, Vec3};
use crate::optim::{AdamState, GroupMoments};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const CONTAINER_MAGIC: &[u8; 4] = b"VXCK";
const GRID_MAGIC: &[u8; 4] = b"VXRF";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

// --- primitive writers/readers ---------------------------------------------

fn w_u8(w: &mut dyn Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

fn w_u32(w: &mut dyn Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64(w: &mut dyn Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(w: &mut dyn Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_bytes(w: &mut dyn Write, b: &[u8]) -> Result<()> {
    w_u64(w, b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn w_f64s(w: &mut dyn Write, vs: &[f64]) -> Result<()> {
    w_u64(w, vs.len() as u64)?;
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn r_u8(r: &mut dyn Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn r_u32(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut dyn Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut dyn Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn r_bytes(r: &mut dyn Read) -> Result<Vec<u8>> {
    let n = r_u64(r)? as usize;
    if n > 1 << 34 {
        return Err(bad("unreasonable blob length"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn r_f64s(r: &mut dyn Read) -> Result<Vec<f64>> {
    let n = r_u64(r)? as usize;
    if n > 1 << 31 {
        return Err(bad("unreasonable array length"));
    }
    let mut out = vec![0.0; n];
    let mut b = [0u8; 8];
    for v in &mut out {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(out)
}

// --- grid blob ---------------------------------------------------------------

pub(crate) fn write_grid(w: &mut dyn Write, g: &DenseGrid) -> Result<()> {
    w.write_all(GRID_MAGIC)?;
    w_u32(w, VERSION)?;
    for d in g.dims() {
        w_u32(w, d as u32)?;
    }
    w_u32(w, g.channels() as u32)?;
    let bb = g.bbox();
    for v in [bb.min.x, bb.min.y, bb.min.z, bb.max.x, bb.max.y, bb.max.z] {
        w_f64(w, v)?;
    }
    for v in &g.values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_grid(r: &mut dyn Read) -> Result<DenseGrid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(bad("grid blob has wrong magic"));
    }
    let version = r_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported grid version {version}")));
    }
    let dims = [r_u32(r)? as usize, r_u32(r)? as usize, r_u32(r)? as usize];
    let channels = r_u32(r)? as usize;
    let min = Vec3::new(r_f64(r)?, r_f64(r)?, r_f64(r)?);
    let max = Vec3::new(r_f64(r)?, r_f64(r)?, r_f64(r)?);
    let n = channels
        .checked_mul(dims[0])
        .and_then(|v| v.checked_mul(dims[1]))
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| bad("grid dims overflow"))?;
    let mut values = vec![0.0f64; n];
    let mut b = [0u8; 4];
    for v in &mut values {
        r.read_exact(&mut b)?;
        *v = f32::from_le_bytes(b) as f64;
    }
    DenseGrid::from_values(dims, channels, Aabb::new(min, max), values)
}

// --- network and optimizer blobs ----------------------------------------------

fn write_mlp(w: &mut dyn Write, m: &Mlp) -> Result<()> {
    w_bytes(w, m.name.as_bytes())?;
    w_u8(w, match m.head {
        Head::Sigmoid => 0,
        Head::Linear => 1,
    })?;
    w_u32(w, m.layers.len() as u32)?;
    for l in &m.layers {
        w_u32(w, l.in_dim as u32)?;
        w_u32(w, l.out_dim as u32)?;
        w_f64s(w, &l.w)?;
        w_f64s(w, &l.b)?;
    }
    Ok(())
}

fn read_mlp(r: &mut dyn Read) -> Result<Mlp> {
    let name = String::from_utf8(r_bytes(r)?).map_err(|_| bad("network name is not UTF-8"))?;
    let head = match r_u8(r)? {
        0 => Head::Sigmoid,
        1 => Head::Linear,
        other => return Err(bad(format!("unknown head code {other}"))),
    };
    let n_layers = r_u32(r)? as usize;
    let mut dims = Vec::with_capacity(n_layers + 1);
    let mut weights = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let in_dim = r_u32(r)? as usize;
        let out_dim = r_u32(r)? as usize;
        let w = r_f64s(r)?;
        let b = r_f64s(r)?;
        if w.len() != in_dim * out_dim || b.len() != out_dim {
            return Err(bad(format!("layer {li} has inconsistent shapes")));
        }
        if li == 0 {
            dims.push(in_dim);
        } else if dims[li] != in_dim {
            return Err(bad(format!("layer {li} input does not chain")));
        }
        dims.push(out_dim);
        weights.push((w, b));
    }
    // rebuild through the constructor to regain names/grads, then overwrite
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut mlp = Mlp::new(&name, &dims, head, &mut rng);
    for (l, (w, b)) in mlp.layers.iter_mut().zip(weights) {
        l.w = w;
        l.b = b;
    }
    Ok(mlp)
}

fn write_adam(w: &mut dyn Write, a: &AdamState) -> Result<()> {
    w_f64(w, a.beta1)?;
    w_f64(w, a.beta2)?;
    w_f64(w, a.eps)?;
    w_u64(w, a.t)?;
    w_u32(w, a.moments.len() as u32)?;
    for m in &a.moments {
        w_bytes(w, m.name.as_bytes())?;
        w_f64s(w, &m.m)?;
        w_f64s(w, &m.v)?;
    }
    Ok(())
}

fn read_adam(r: &mut dyn Read) -> Result<AdamState> {
    let beta1 = r_f64(r)?;
    let beta2 = r_f64(r)?;
    let eps = r_f64(r)?;
    let t = r_u64(r)?;
    let n = r_u32(r)? as usize;
    let mut moments = Vec::with_capacity(n);
    for _ in 0..n {
        let name =
            String::from_utf8(r_bytes(r)?).map_err(|_| bad("group name is not UTF-8"))?;
        let m = r_f64s(r)?;
        let v = r_f64s(r)?;
        if m.len() != v.len() {
            return Err(bad(format!("moment arrays of `{name}` differ in length")));
        }
        moments.push(GroupMoments { name, m, v });
    }
    Ok(AdamState {
        beta1,
        beta2,
        eps,
        t,
        moments,
    })
}

// --- container -----------------------------------------------------------------

/// Serialize the full pipeline state.
pub fn save_checkpoint_bytes(state: &PipelineState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let w: &mut dyn Write = &mut out;
    w.write_all(CONTAINER_MAGIC)?;
    w_u32(w, VERSION)?;
    w_bytes(w, serde_json::to_string(&state.cfg)?.as_bytes())?;
    w_u8(w, state.stage.code())?;
    w_u64(w, state.iter)?;
    w_u64(w, state.epoch)?;
    w_u64(w, state.batch_pos)?;
    match &state.phase {
        Phase::Search(p) => {
            w_u8(w, 0)?;
            w_f64(w, p.shift)?;
            write_grid(w, &p.density)?;
            write_grid(w, &p.feat)?;
            write_mlp(w, &p.mlp)?;
            write_adam(w, &p.adam)?;
        }
        Phase::Sdf(p) => {
            w_u8(w, 1)?;
            w_u8(w, p.upscaled as u8)?;
            write_grid(w, &p.occupancy)?;
            write_grid(w, &p.field.sdf)?;
            write_grid(w, &p.field.feat)?;
            match &p.color {
                ColorModel::Single { mlp, use_feat, .. } => {
                    w_u8(w, 0)?;
                    w_u8(w, *use_feat as u8)?;
                    write_mlp(w, mlp)?;
                }
                ColorModel::Dual(d) => {
                    w_u8(w, 1)?;
                    w_u8(w, d.residual as u8)?;
                    w_u8(w, d.detach as u8)?;
                    write_mlp(w, &d.g0)?;
                    write_mlp(w, &d.g1)?;
                }
            }
            write_adam(w, &p.adam)?;
        }
    }
    Ok(out)
}

pub fn save_checkpoint(state: &PipelineState, path: &Path) -> Result<()> {
    let bytes = save_checkpoint_bytes(state)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Deserialize a pipeline state saved by [`save_checkpoint_bytes`].
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<PipelineState> {
    let mut cur = bytes;
    let r: &mut dyn Read = &mut cur;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = r_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let cfg_json = r_bytes(r)?;
    let cfg: TrainConfig = serde_json::from_slice(&cfg_json)?;
    let stage = Stage::from_code(r_u8(r)?)?;
    let iter = r_u64(r)?;
    let epoch = r_u64(r)?;
    let batch_pos = r_u64(r)?;
    let phase = match r_u8(r)? {
        0 => {
            let shift = r_f64(r)?;
            let density = read_grid(r)?;
            let feat = read_grid(r)?;
            let mlp = read_mlp(r)?;
            let adam = read_adam(r)?;
            let layout = ColorInputLayout::new(
                cfg.pos_freqs,
                cfg.view_freqs,
                0,
                feat.channels(),
                false,
            );
            if mlp.in_dim() != layout.total {
                return Err(bad("search network does not match the configuration"));
            }
            let (nd, nf) = (density.len(), feat.len());
            Phase::Search(SearchPhase {
                density,
                feat,
                mlp,
                layout,
                shift,
                adam,
                density_grad: vec![0.0; nd],
                feat_grad: vec![0.0; nf],
            })
        }
        1 => {
            let upscaled = r_u8(r)? != 0;
            let occupancy = read_grid(r)?;
            let sdf = read_grid(r)?;
            let feat = read_grid(r)?;
            let feat_channels = feat.channels();
            let color = match r_u8(r)? {
                0 => {
                    let use_feat = r_u8(r)? != 0;
                    let mlp = read_mlp(r)?;
                    let geo_dim = if stage == Stage::Coarse {
                        super::step::stage_geo_spec(&cfg, Stage::Coarse).dim()
                    } else {
                        super::step::stage_geo_spec(&cfg, Stage::Fine).dim()
                    };
                    let layout = ColorInputLayout::new(
                        cfg.pos_freqs,
                        cfg.view_freqs,
                        geo_dim,
                        if use_feat { feat_channels } else { 0 },
                        false,
                    );
                    if mlp.in_dim() != layout.total {
                        return Err(bad("color network does not match the configuration"));
                    }
                    ColorModel::Single {
                        mlp,
                        layout,
                        use_feat,
                    }
                }
                1 => {
                    let residual = r_u8(r)? != 0;
                    let detach = r_u8(r)? != 0;
                    let g0 = read_mlp(r)?;
                    let g1 = read_mlp(r)?;
                    let geo_dim = super::step::stage_geo_spec(&cfg, Stage::Fine).dim();
                    let layout0 =
                        ColorInputLayout::new(cfg.pos_freqs, cfg.view_freqs, geo_dim, 0, false);
                    let layout1 = ColorInputLayout::new(
                        cfg.pos_freqs,
                        cfg.view_freqs,
                        geo_dim,
                        feat_channels,
                        true,
                    );
                    if g0.in_dim() != layout0.total || g1.in_dim() != layout1.total {
                        return Err(bad("dual color network does not match the configuration"));
                    }
                    ColorModel::Dual(DualColor {
                        g0,
                        g1,
                        layout0,
                        layout1,
                        residual,
                        detach,
                    })
                }
                other => return Err(bad(format!("unknown color model code {other}"))),
            };
            let field = SceneField::new(sdf, feat, cfg.kernel()?);
            let adam = read_adam(r)?;
            let (ns, nf) = (field.sdf.len(), field.feat.len());
            Phase::Sdf(SdfPhase {
                field,
                color,
                occupancy,
                adam,
                upscaled,
                sdf_grad: vec![0.0; ns],
                feat_grad: vec![0.0; nf],
            })
        }
        other => return Err(bad(format!("unknown phase code {other}"))),
    };
    Ok(PipelineState {
        cfg,
        stage,
        iter,
        epoch,
        batch_pos,
        phase,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<PipelineState> {
    let bytes = std::fs::read(path)
        .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    load_checkpoint_bytes(&bytes)
}
