//! On-disk sample format and synthetic dataset generation.
//!
//! A sample directory holds a `manifest.txt` (UTF-8, LF, `key = value`) plus
//! little-endian binaries: `x_bd.f32`, `id.u8`, `phi0.f32`, `x_q.f32`,
//! `phi.f32`, all row-major. Arrays are stored as f32; all computation is f64.
//!
//! The generators produce fields from closed-form solutions of the inviscid
//! flow equations, so continuity and momentum residuals of the ground truth
//! vanish analytically and any finite-difference residual measured on them is
//! pure stencil truncation error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const FORMAT_VERSION: u32 = 1;

/// Fixed channel order for generated packs. Consumers resolve channels by
/// name, never by position.
pub const CHANNELS: [&str; 4] = ["u_x", "u_y", "p", "rho"];

/// Identifier values: 0 = boundary point, 1 = interior point. Additional
/// categories may use further values.
pub const ID_BOUNDARY: u8 = 0;
pub const ID_DOMAIN: u8 = 1;

/// One sample: input points with initial field, query points with target
/// field series.
///
/// Time convention: `phi0` is the field at t = 0; `phi` row `s` holds the
/// field at t = (s + 1) * dt.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldPack {
    pub d: usize,
    pub n_bd: usize,
    pub n_q: usize,
    pub t: usize,
    pub n_phi: usize,
    pub dt: f64,
    /// `[n_bd x d]`
    pub x_bd: Vec<f64>,
    /// `[n_bd]`
    pub id: Vec<u8>,
    /// `[n_bd x n_phi]`
    pub phi0: Vec<f64>,
    /// `[n_q x d]`
    pub x_q: Vec<f64>,
    /// `[t x n_q x n_phi]`
    pub phi: Vec<f64>,
    pub channel_names: Vec<String>,
}

impl FieldPack {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.x_bd.len(), self.n_bd * self.d, "x_bd"),
            (self.id.len(), self.n_bd, "id"),
            (self.phi0.len(), self.n_bd * self.n_phi, "phi0"),
            (self.x_q.len(), self.n_q * self.d, "x_q"),
            (self.phi.len(), self.t * self.n_q * self.n_phi, "phi"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::Validation(format!(
                    "{name} has {got} values, expected {want}"
                )));
            }
        }
        if self.t < 1 {
            return Err(Error::Validation("t must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Validation(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.channel_names.len() != self.n_phi {
            return Err(Error::Validation(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.n_phi
            )));
        }
        for (i, a) in self.channel_names.iter().enumerate() {
            for b in &self.channel_names[i + 1..] {
                if a == b {
                    return Err(Error::Validation(format!("duplicate channel name {a}")));
                }
            }
        }
        for v in self.x_bd.iter().chain(&self.x_q) {
            if !v.is_finite() {
                return Err(Error::Validation("non-finite coordinate".into()));
            }
        }
        Ok(())
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c == name)
    }

    /// Coordinates of query point `q`.
    pub fn query(&self, q: usize) -> &[f64] {
        &self.x_q[q * self.d..(q + 1) * self.d]
    }

    /// Bounding-box diagonal of all coordinates, used for relative FD steps.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = vec![f64::INFINITY; self.d];
        let mut hi = vec![f64::NEG_INFINITY; self.d];
        for row in self.x_bd.chunks(self.d).chain(self.x_q.chunks(self.d)) {
            for (a, &v) in row.iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        lo.iter()
            .zip(&hi)
            .map(|(l, h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt()
    }
}

// -- serialization ----------------------------------------------------------

const MANIFEST: &str = "manifest.txt";

const FILES: [(&str, &str); 5] = [
    ("x_bd", "x_bd.f32"),
    ("id", "id.u8"),
    ("phi0", "phi0.f32"),
    ("x_q", "x_q.f32"),
    ("phi", "phi.f32"),
];

fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() != expected * 4 {
        return Err(Error::LengthMismatch {
            file: path.to_path_buf(),
            expected: expected as u64 * 4,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_sibling(dir: &Path) -> PathBuf {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = format!(
        ".{}.tmp-{}-{}",
        dir.file_name().and_then(|s| s.to_str()).unwrap_or("pack"),
        std::process::id(),
        n
    );
    dir.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

/// Write a sample directory atomically (temp dir + rename). An existing
/// directory at `dir` is replaced.
pub fn write_fieldpack(pack: &FieldPack, dir: &Path) -> Result<()> {
    pack.validate()?;
    if let Some(parent) = dir.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = temp_sibling(dir);
    let result = write_contents(pack, &tmp);
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
        return result;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_contents(pack: &FieldPack, tmp: &Path) -> Result<()> {
    fs::create_dir_all(tmp).map_err(|e| Error::io(tmp, e))?;
    write_f32(&tmp.join("x_bd.f32"), &pack.x_bd)?;
    let id_path = tmp.join("id.u8");
    fs::write(&id_path, &pack.id).map_err(|e| Error::io(&id_path, e))?;
    write_f32(&tmp.join("phi0.f32"), &pack.phi0)?;
    write_f32(&tmp.join("x_q.f32"), &pack.x_q)?;
    write_f32(&tmp.join("phi.f32"), &pack.phi)?;

    let mut m = String::new();
    m.push_str(&format!("format_version = {FORMAT_VERSION}\n"));
    m.push_str(&format!("d = {}\n", pack.d));
    m.push_str(&format!("n_bd = {}\n", pack.n_bd));
    m.push_str(&format!("n_q = {}\n", pack.n_q));
    m.push_str(&format!("t = {}\n", pack.t));
    m.push_str(&format!("n_phi = {}\n", pack.n_phi));
    m.push_str(&format!("dt = {}\n", pack.dt));
    m.push_str(&format!("channel_names = {}\n", pack.channel_names.join(",")));
    for (key, file) in FILES {
        m.push_str(&format!("file.{key} = {file}\n"));
    }
    let man_path = tmp.join(MANIFEST);
    let mut f = fs::File::create(&man_path).map_err(|e| Error::io(&man_path, e))?;
    f.write_all(m.as_bytes()).map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

/// Read and validate a sample directory.
pub fn read_fieldpack(dir: &Path) -> Result<FieldPack> {
    let man_path = dir.join(MANIFEST);
    let text = match fs::read_to_string(&man_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(man_path))
        }
        Err(e) => return Err(Error::io(&man_path, e)),
    };

    let mut keys: Vec<(String, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Malformed {
                path: man_path.clone(),
                msg: format!("line {}: expected `key = value`", lineno + 1),
            });
        };
        keys.push((k.trim().to_string(), v.trim().to_string()));
    }
    let get = |name: &str| -> Result<&str> {
        keys.iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Malformed {
                path: man_path.clone(),
                msg: format!("missing key {name}"),
            })
    };
    let parse_usize = |name: &str| -> Result<usize> {
        get(name)?.parse().map_err(|_| Error::Malformed {
            path: man_path.clone(),
            msg: format!("key {name} is not an integer"),
        })
    };

    let version: u32 = get("format_version")?.parse().map_err(|_| Error::Malformed {
        path: man_path.clone(),
        msg: "format_version is not an integer".into(),
    })?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }

    let known = [
        "format_version",
        "d",
        "n_bd",
        "n_q",
        "t",
        "n_phi",
        "dt",
        "channel_names",
    ];
    for (k, _) in &keys {
        if !known.contains(&k.as_str()) && !k.starts_with("file.") {
            return Err(Error::Malformed {
                path: man_path.clone(),
                msg: format!("unknown key {k}"),
            });
        }
    }

    let d = parse_usize("d")?;
    let n_bd = parse_usize("n_bd")?;
    let n_q = parse_usize("n_q")?;
    let t = parse_usize("t")?;
    let n_phi = parse_usize("n_phi")?;
    let dt: f64 = get("dt")?.parse().map_err(|_| Error::Malformed {
        path: man_path.clone(),
        msg: "dt is not a number".into(),
    })?;
    let channel_names: Vec<String> = get("channel_names")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();

    let file_of = |key: &str| -> Result<PathBuf> {
        Ok(dir.join(get(&format!("file.{key}"))?))
    };

    let x_bd = read_f32(&file_of("x_bd")?, n_bd * d)?;
    let id_path = file_of("id")?;
    let id = match fs::read(&id_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(id_path))
        }
        Err(e) => return Err(Error::io(&id_path, e)),
    };
    if id.len() != n_bd {
        return Err(Error::LengthMismatch {
            file: id_path,
            expected: n_bd as u64,
            actual: id.len() as u64,
        });
    }
    let phi0 = read_f32(&file_of("phi0")?, n_bd * n_phi)?;
    let x_q = read_f32(&file_of("x_q")?, n_q * d)?;
    let phi = read_f32(&file_of("phi")?, t * n_q * n_phi)?;

    let pack = FieldPack {
        d,
        n_bd,
        n_q,
        t,
        n_phi,
        dt,
        x_bd,
        id,
        phi0,
        x_q,
        phi,
        channel_names,
    };
    pack.validate()?;
    Ok(pack)
}

// -- analytic solutions -------------------------------------------------------

/// Closed-form flow fields that satisfy the inviscid continuity and momentum
/// equations exactly. Evaluated anywhere in space-time; the generators sample
/// them onto point sets, and convergence tests query them directly.
#[derive(Clone, Copy, Debug)]
pub enum AnalyticCase {
    /// Constant state: every derivative vanishes.
    UniformFlow { u: [f64; 2], p: f64, rho: f64 },
    /// Passive density bump advected by a constant velocity field:
    /// rho = exp(-|x - x0 - u0 t|^2 / (2 sigma^2)), u = u0, p constant.
    AdvectingGaussian {
        x0: [f64; 2],
        u0: [f64; 2],
        sigma: f64,
        p0: f64,
    },
    /// Compressible vortex in a uniform free stream, isentropic (p = rho^gamma).
    /// The core of radius `radius` advects with the free stream.
    IsentropicVortex {
        x0: [f64; 2],
        u_inf: [f64; 2],
        strength: f64,
        radius: f64,
        gamma: f64,
    },
}

impl AnalyticCase {
    /// Field values `(u_x, u_y, p, rho)` at position `x`, time `t`.
    pub fn eval(&self, x: &[f64], t: f64) -> [f64; 4] {
        match *self {
            AnalyticCase::UniformFlow { u, p, rho } => [u[0], u[1], p, rho],
            AnalyticCase::AdvectingGaussian { x0, u0, sigma, p0 } => {
                let dx = x[0] - x0[0] - u0[0] * t;
                let dy = x[1] - x0[1] - u0[1] * t;
                let rho = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                [u0[0], u0[1], p0, rho]
            }
            AnalyticCase::IsentropicVortex {
                x0,
                u_inf,
                strength,
                radius,
                gamma,
            } => {
                let dx = (x[0] - x0[0] - u_inf[0] * t) / radius;
                let dy = (x[1] - x0[1] - u_inf[1] * t) / radius;
                let xi2 = dx * dx + dy * dy;
                let phi = ((1.0 - xi2) / 2.0).exp();
                let u = u_inf[0] - strength * phi * dy;
                let v = u_inf[1] + strength * phi * dx;
                let temp =
                    1.0 - (gamma - 1.0) * strength * strength / (2.0 * gamma) * (1.0 - xi2).exp();
                let rho = temp.powf(1.0 / (gamma - 1.0));
                let p = rho.powf(gamma);
                [u, v, p, rho]
            }
        }
    }
}

// -- generators ---------------------------------------------------------------

fn sample_points(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..2 * n).map(|_| rng.uniform()).collect()
}

/// Snap the first `n_b` points onto the unit-square edges, cycling the four
/// sides, and return the identifier vector.
fn assign_boundary(x_bd: &mut [f64], n_bd: usize) -> Vec<u8> {
    let n_b = (4 * (n_bd as f64).sqrt().ceil() as usize).min(n_bd);
    let mut id = vec![ID_DOMAIN; n_bd];
    for i in 0..n_b {
        let along = x_bd[2 * i]; // reuse the sampled abscissa as edge position
        let (x, y) = match i % 4 {
            0 => (along, 0.0),
            1 => (1.0, along),
            2 => (along, 1.0),
            _ => (0.0, along),
        };
        x_bd[2 * i] = x;
        x_bd[2 * i + 1] = y;
        id[i] = ID_BOUNDARY;
    }
    id
}

fn build_pack(
    case: AnalyticCase,
    n_bd: usize,
    n_q: usize,
    t_steps: usize,
    dt: f64,
    seed: u64,
) -> FieldPack {
    assert!(n_bd >= 1 && n_q >= 1 && t_steps >= 1, "counts must be >= 1");
    assert!(dt > 0.0, "dt must be positive");
    let mut rng = Rng::new(seed);
    let mut x_bd = sample_points(&mut rng, n_bd);
    let id = assign_boundary(&mut x_bd, n_bd);
    let x_q = sample_points(&mut rng, n_q);

    let mut phi0 = Vec::with_capacity(n_bd * 4);
    for p in x_bd.chunks(2) {
        phi0.extend_from_slice(&case.eval(p, 0.0));
    }
    let mut phi = Vec::with_capacity(t_steps * n_q * 4);
    for s in 0..t_steps {
        let t = (s + 1) as f64 * dt;
        for q in x_q.chunks(2) {
            phi.extend_from_slice(&case.eval(q, t));
        }
    }
    FieldPack {
        d: 2,
        n_bd,
        n_q,
        t: t_steps,
        n_phi: 4,
        dt,
        x_bd,
        id,
        phi0,
        x_q,
        phi,
        channel_names: CHANNELS.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn uniform_flow_case() -> AnalyticCase {
    AnalyticCase::UniformFlow {
        u: [0.4, -0.3],
        p: 1.0,
        rho: 1.0,
    }
}

pub fn gen_uniform_flow(n_bd: usize, n_q: usize, t_steps: usize, dt: f64, seed: u64) -> FieldPack {
    build_pack(uniform_flow_case(), n_bd, n_q, t_steps, dt, seed)
}

pub fn gaussian_case(u0: [f64; 2], sigma: f64) -> AnalyticCase {
    AnalyticCase::AdvectingGaussian {
        x0: [0.5, 0.5],
        u0,
        sigma,
        p0: 1.0,
    }
}

pub fn gen_advecting_gaussian(
    n_bd: usize,
    n_q: usize,
    t_steps: usize,
    dt: f64,
    u0: [f64; 2],
    sigma: f64,
    seed: u64,
) -> FieldPack {
    assert!(sigma > 0.0, "sigma must be positive");
    build_pack(gaussian_case(u0, sigma), n_bd, n_q, t_steps, dt, seed)
}

pub fn vortex_case(strength: f64, gamma: f64) -> AnalyticCase {
    AnalyticCase::IsentropicVortex {
        x0: [0.4, 0.4],
        u_inf: [0.5, 0.25],
        strength,
        radius: 0.1,
        gamma,
    }
}

pub fn gen_isentropic_vortex(
    n_bd: usize,
    n_q: usize,
    t_steps: usize,
    dt: f64,
    strength: f64,
    gamma: f64,
    seed: u64,
) -> FieldPack {
    assert!(strength > 0.0, "strength must be positive");
    assert!(gamma > 1.0, "gamma must exceed 1");
    build_pack(vortex_case(strength, gamma), n_bd, n_q, t_steps, dt, seed)
}
