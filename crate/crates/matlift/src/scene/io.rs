//! Scene persistence: a versioned JSON manifest referencing a binary
//! Gaussian block, float32 rasters for HDR data, and PNG material maps.
//!
//! The round trip is bit-exact for every field: Gaussian attributes are
//! stored as little-endian f64, rasters as f32, and material maps re-encode
//! to the same 8-bit codes they were decoded from.

use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{self, PngTransfer};
use crate::scene::{
    Camera, EnvironmentMap, GaussianPrimitive, MaterialMaps, MaterialSample, PerViewMaterials,
    SceneBundle,
};

pub const MANIFEST_FORMAT: &str = "matlift-scene";
pub const MANIFEST_VERSION: u32 = 1;
pub const GAUSSIAN_MAGIC: &[u8; 4] = b"MLGB";
pub const GAUSSIAN_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCamera {
    focal: [f64; 2],
    principal_point: [f64; 2],
    width: u32,
    height: u32,
    /// 3x4 world-from-camera pose, rows of [R | t].
    world_from_camera: [[f64; 4]; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    cameras: Vec<ManifestCamera>,
    gaussians: String,
    images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    material_maps: Option<String>,
    environment: String,
}

/// Conventional file layout inside a scene directory.
pub struct ScenePaths;

impl ScenePaths {
    pub fn manifest(dir: &Path) -> PathBuf {
        dir.join("scene.json")
    }
    pub fn gaussians(dir: &Path) -> PathBuf {
        dir.join("gaussians.bin")
    }
    pub fn environment(dir: &Path) -> PathBuf {
        dir.join("env.f32")
    }
    pub fn image(dir: &Path, view: usize) -> PathBuf {
        dir.join(format!("images/view_{view:04}.f32"))
    }
    pub fn map_basecolor(maps_dir: &Path, view: usize) -> PathBuf {
        maps_dir.join(format!("view_{view:04}_basecolor.png"))
    }
    pub fn map_roughness(maps_dir: &Path, view: usize) -> PathBuf {
        maps_dir.join(format!("view_{view:04}_roughness.png"))
    }
    pub fn map_metallic(maps_dir: &Path, view: usize) -> PathBuf {
        maps_dir.join(format!("view_{view:04}_metallic.png"))
    }
}

fn byte_offset(content: &str, line: usize, column: usize) -> usize {
    // serde_json reports 1-based line/column.
    let mut offset = 0;
    for (i, l) in content.lines().enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;

    write_gaussian_block(&bundle.gaussians, &ScenePaths::gaussians(dir))?;
    img::save_f32r(&bundle.env.to_raster(), &ScenePaths::environment(dir))?;

    let mut images = Vec::new();
    for (i, image) in bundle.images.iter().enumerate() {
        let path = ScenePaths::image(dir, i);
        img::save_f32r(image, &path)?;
        images.push(format!("images/view_{i:04}.f32"));
    }

    let material_maps = if let Some(maps) = &bundle.material_maps {
        let maps_dir = dir.join("maps");
        std::fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
        for (i, m) in maps.iter().enumerate() {
            img::save_png(&m.basecolor, &ScenePaths::map_basecolor(&maps_dir, i), PngTransfer::Srgb)?;
            img::save_png(&m.roughness, &ScenePaths::map_roughness(&maps_dir, i), PngTransfer::Linear)?;
            img::save_png(&m.metallic, &ScenePaths::map_metallic(&maps_dir, i), PngTransfer::Linear)?;
        }
        Some("maps".to_string())
    } else {
        None
    };

    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        cameras: bundle.cameras.iter().map(camera_to_manifest).collect(),
        gaussians: "gaussians.bin".to_string(),
        images,
        material_maps,
        environment: "env.f32".to_string(),
    };

    let path = ScenePaths::manifest(dir);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::validation(format!("manifest encode: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let path = ScenePaths::manifest(dir);
    let content = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&content).map_err(|e| Error::Parse {
        path: path.clone(),
        offset: byte_offset(&content, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Parse {
            path: path.clone(),
            offset: 0,
            message: format!("unknown format tag {:?}", manifest.format),
        });
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            path,
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }

    let cameras: Vec<Camera> = manifest
        .cameras
        .iter()
        .map(camera_from_manifest)
        .collect::<Result<_>>()?;

    let gaussians = read_gaussian_block(&dir.join(&manifest.gaussians))?;
    let env = EnvironmentMap::from_raster(&img::load_f32r(&dir.join(&manifest.environment))?)?;

    let mut images = Vec::new();
    for rel in &manifest.images {
        images.push(img::load_f32r(&dir.join(rel))?);
    }

    let material_maps = match &manifest.material_maps {
        Some(rel) => {
            let maps_dir = dir.join(rel);
            let mut maps = Vec::new();
            for i in 0..cameras.len() {
                maps.push(load_material_maps(&maps_dir, i)?);
            }
            Some(maps)
        }
        None => None,
    };

    let bundle = SceneBundle {
        gaussians,
        cameras,
        images,
        material_maps,
        env,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Loads one view's material map triple, listing any missing files.
pub fn load_material_maps(maps_dir: &Path, view: usize) -> Result<MaterialMaps> {
    let paths = [
        ScenePaths::map_basecolor(maps_dir, view),
        ScenePaths::map_roughness(maps_dir, view),
        ScenePaths::map_metallic(maps_dir, view),
    ];
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "missing material maps: {}",
            missing.join(", ")
        )));
    }
    Ok(MaterialMaps {
        basecolor: img::load_png(&paths[0], PngTransfer::Srgb)?,
        roughness: img::load_png(&paths[1], PngTransfer::Linear)?,
        metallic: img::load_png(&paths[2], PngTransfer::Linear)?,
    })
}

fn camera_to_manifest(c: &Camera) -> ManifestCamera {
    let r = &c.rotation;
    let t = &c.translation;
    ManifestCamera {
        focal: c.focal,
        principal_point: c.principal_point,
        width: c.width,
        height: c.height,
        world_from_camera: [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
        ],
    }
}

fn camera_from_manifest(mc: &ManifestCamera) -> Result<Camera> {
    let p = &mc.world_from_camera;
    let rotation = Matrix3::new(
        p[0][0], p[0][1], p[0][2], p[1][0], p[1][1], p[1][2], p[2][0], p[2][1], p[2][2],
    );
    let translation = Vector3::new(p[0][3], p[1][3], p[2][3]);
    Camera::new(
        mc.focal,
        mc.principal_point,
        mc.width,
        mc.height,
        rotation,
        translation,
    )
}

/// Standalone camera list (held-out evaluation views).
pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    let list: Vec<ManifestCamera> = cameras.iter().map(camera_to_manifest).collect();
    let text = serde_json::to_string_pretty(&list)
        .map_err(|e| Error::validation(format!("camera encode: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let list: Vec<ManifestCamera> = serde_json::from_str(&content).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(&content, e.line(), e.column()),
        message: e.to_string(),
    })?;
    list.iter().map(camera_from_manifest).collect()
}

// ---------------------------------------------------------------------------
// Binary Gaussian block
// ---------------------------------------------------------------------------

const FLAG_PER_VIEW: u8 = 1;
const FLAG_MERGED: u8 = 2;

pub fn write_gaussian_block(gaussians: &[GaussianPrimitive], path: &Path) -> Result<()> {
    let has_per_view = gaussians.iter().any(|g| g.per_view_materials.is_some());
    let has_merged = gaussians.iter().any(|g| g.merged_material.is_some());
    // The block is homogeneous: either every record carries an attribute or
    // none does.
    if has_per_view && gaussians.iter().any(|g| g.per_view_materials.is_none()) {
        return Err(Error::validation(
            "per-view materials must be present on all Gaussians or none",
        ));
    }
    if has_merged && gaussians.iter().any(|g| g.merged_material.is_none()) {
        return Err(Error::validation(
            "merged materials must be present on all Gaussians or none",
        ));
    }
    let views = gaussians
        .first()
        .and_then(|g| g.per_view_materials.as_ref())
        .map(|pv| pv.views())
        .unwrap_or(0);

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(GAUSSIAN_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(GAUSSIAN_VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(gaussians.len() as u64).map_err(io)?;
    w.write_u32::<LittleEndian>(views as u32).map_err(io)?;
    let mut flags = 0u8;
    if has_per_view {
        flags |= FLAG_PER_VIEW;
    }
    if has_merged {
        flags |= FLAG_MERGED;
    }
    w.write_u8(flags).map_err(io)?;

    let write_v3 = |w: &mut std::io::BufWriter<std::fs::File>, v: &Vector3<f64>| -> Result<()> {
        for c in v.iter() {
            w.write_f64::<LittleEndian>(*c).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    };
    let write_mat = |w: &mut std::io::BufWriter<std::fs::File>, m: &MaterialSample| -> Result<()> {
        for i in 0..5 {
            w.write_f64::<LittleEndian>(m.channel(i)).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    };

    for g in gaussians {
        write_v3(&mut w, &g.mean)?;
        write_v3(&mut w, &g.scale)?;
        let q = g.rotation.as_ref();
        for c in [q.w, q.i, q.j, q.k] {
            w.write_f64::<LittleEndian>(c).map_err(io)?;
        }
        w.write_f64::<LittleEndian>(g.opacity).map_err(io)?;
        write_v3(&mut w, &g.normal)?;
        if has_per_view {
            let pv = g.per_view_materials.as_ref().unwrap();
            if pv.views() != views {
                return Err(Error::validation("inconsistent per-view slot counts"));
            }
            for v in 0..views {
                write_mat(&mut w, &pv.samples[v])?;
                w.write_u8(pv.seen[v] as u8).map_err(io)?;
            }
        }
        if has_merged {
            write_mat(&mut w, g.merged_material.as_ref().unwrap())?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_gaussian_block(path: &Path) -> Result<Vec<GaussianPrimitive>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(&bytes);
    let parse = |r: &Cursor<&Vec<u8>>, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: r.position() as usize,
        message: message.to_string(),
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| parse(&r, "truncated header"))?;
    if &magic != GAUSSIAN_MAGIC {
        return Err(parse(&r, "bad magic, not a Gaussian block"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| parse(&r, "truncated header"))?;
    if version != GAUSSIAN_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: GAUSSIAN_VERSION,
        });
    }
    let count = r.read_u64::<LittleEndian>().map_err(|_| parse(&r, "truncated header"))? as usize;
    let views = r.read_u32::<LittleEndian>().map_err(|_| parse(&r, "truncated header"))? as usize;
    let flags = r.read_u8().map_err(|_| parse(&r, "truncated header"))?;
    let has_per_view = flags & FLAG_PER_VIEW != 0;
    let has_merged = flags & FLAG_MERGED != 0;

    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let f = |r: &mut Cursor<&Vec<u8>>| -> Result<f64> {
            r.read_f64::<LittleEndian>()
                .map_err(|_| parse(r, "truncated record"))
        };
        let mean = Vector3::new(f(&mut r)?, f(&mut r)?, f(&mut r)?);
        let scale = Vector3::new(f(&mut r)?, f(&mut r)?, f(&mut r)?);
        let (qw, qx, qy, qz) = (f(&mut r)?, f(&mut r)?, f(&mut r)?, f(&mut r)?);
        let opacity = f(&mut r)?;
        let normal = Vector3::new(f(&mut r)?, f(&mut r)?, f(&mut r)?);
        // Stored quaternions are already unit; wrap without renormalizing so
        // the round trip stays bit-exact.
        let rotation = UnitQuaternion::new_unchecked(Quaternion::new(qw, qx, qy, qz));
        let mut g = GaussianPrimitive::new(mean, scale, rotation, opacity, normal)?;
        if has_per_view {
            let mut samples = Vec::with_capacity(views);
            let mut seen = Vec::with_capacity(views);
            for _ in 0..views {
                let mut ch = [0.0; 5];
                for c in ch.iter_mut() {
                    *c = f(&mut r)?;
                }
                samples.push(MaterialSample {
                    basecolor: [ch[0], ch[1], ch[2]],
                    roughness: ch[3],
                    metallic: ch[4],
                });
                seen.push(r.read_u8().map_err(|_| parse(&r, "truncated record"))? != 0);
            }
            g.per_view_materials = Some(PerViewMaterials { samples, seen });
        }
        if has_merged {
            let mut ch = [0.0; 5];
            for c in ch.iter_mut() {
                *c = f(&mut r)?;
            }
            g.merged_material = Some(MaterialSample {
                basecolor: [ch[0], ch[1], ch[2]],
                roughness: ch[3],
                metallic: ch[4],
            });
        }
        gaussians.push(g);
    }
    Ok(gaussians)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::Raster;

    fn tiny_bundle() -> SceneBundle {
        let rot = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(0.3, 1.0, -0.2)),
            0.71,
        );
        let mut g0 = GaussianPrimitive::new(
            Vector3::new(0.1, -0.2, 0.3),
            Vector3::new(0.5, 0.25, 0.125),
            rot,
            0.8,
            Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        g0.per_view_materials = Some(PerViewMaterials {
            samples: vec![
                MaterialSample::new([0.1, 0.2, 0.3], 0.4, 0.5),
                MaterialSample::new([0.9, 0.8, 0.7], 0.6, 0.0),
            ],
            seen: vec![true, false],
        });
        g0.merged_material = Some(MaterialSample::new([0.5, 0.5, 0.5], 0.5, 0.1));
        let mut g1 = g0.clone();
        g1.mean = Vector3::new(-1.0, 0.5, 2.0);

        let cam0 = Camera::look_at(
            [30.0, 30.0],
            16,
            12,
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::y(),
        )
        .unwrap();
        let cam1 = Camera::look_at(
            [30.0, 30.0],
            16,
            12,
            Vector3::new(3.0, 1.0, -2.0),
            Vector3::zeros(),
            Vector3::y(),
        )
        .unwrap();

        let img0 = Raster::from_fn(16, 12, 3, |x, y, c| (x + y * 3 + c) as f32 * 0.01);
        let img1 = Raster::from_fn(16, 12, 3, |x, y, c| (x * 2 + y + c) as f32 * 0.013);

        let maps = |k: usize| MaterialMaps {
            basecolor: Raster::from_fn(16, 12, 3, |x, y, c| {
                crate::img::srgb_u8_to_linear(((x * 13 + y * 5 + c * 31 + k * 7) % 256) as u8)
            }),
            roughness: Raster::from_fn(16, 12, 1, |x, y, _| {
                crate::img::unit_u8_to_f32(((x + y + k) % 256) as u8)
            }),
            metallic: Raster::from_fn(16, 12, 1, |x, y, _| {
                crate::img::unit_u8_to_f32(((x * y + k) % 256) as u8)
            }),
        };

        SceneBundle {
            gaussians: vec![g0, g1],
            cameras: vec![cam0, cam1],
            images: vec![img0, img1],
            material_maps: Some(vec![maps(0), maps(1)]),
            env: EnvironmentMap::constant(8, 4, [0.25, 0.5, 1.0]),
        }
    }

    #[test]
    fn roundtrip_is_field_identical() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle();
        save_scene(&bundle, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(bundle, back);
    }

    #[test]
    fn truncated_gaussian_block_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle();
        save_scene(&bundle, dir.path()).unwrap();
        let gpath = ScenePaths::gaussians(dir.path());
        let bytes = std::fs::read(&gpath).unwrap();
        std::fs::write(&gpath, &bytes[..bytes.len() / 2]).unwrap();
        match load_scene(dir.path()) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle();
        save_scene(&bundle, dir.path()).unwrap();
        let mpath = ScenePaths::manifest(dir.path());
        let text = std::fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&mpath, text).unwrap();
        match load_scene(dir.path()) {
            Err(Error::VersionMismatch { found: 99, .. }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn zero_camera_bundle_fails_validation() {
        let mut bundle = tiny_bundle();
        bundle.cameras.clear();
        bundle.images.clear();
        bundle.material_maps = None;
        assert!(bundle.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(save_scene(&bundle, dir.path()).is_err());
    }

    #[test]
    fn malformed_manifest_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle();
        save_scene(&bundle, dir.path()).unwrap();
        let mpath = ScenePaths::manifest(dir.path());
        let mut text = std::fs::read_to_string(&mpath).unwrap();
        text.truncate(text.len() - 5);
        std::fs::write(&mpath, text).unwrap();
        match load_scene(dir.path()) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
