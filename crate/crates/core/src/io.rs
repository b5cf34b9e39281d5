//! File formats: dataset CSV with a TOML metadata sidecar, and JSON
//! documents for networks, flows, eigenfunction libraries, and LTI models.
//!
//! Floats are written with 17 significant digits, so every round trip is
//! bit-exact. All writes go through a temp-file-then-rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffeo::{Diffeomorphism, IdentityDiffeo};
use crate::dynamics::{DomainBox, ExactDiffeoEx1, Trajectory, TrajectoryDataset, VectorFieldSpec};
use crate::eigen::{BoxScaling, EigenfunctionLibrary, MultiIndexLibrary, PrincipalEigenpairs};
use crate::error::{Error, Result};
use crate::flow::{CouplingLayer, FlowModel};
use crate::kefmd::LiftedLTIModel;
use crate::net::{Activation, DenseNet};
use crate::Scalar;

/// Full-precision float formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write bytes via a temporary file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().expect("scalar converts to f64")
}

fn from_f64<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 converts to scalar")
}

fn vec_to_f64<T: Scalar>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|x| to_f64(*x)).collect()
}

fn vec_from_f64<T: Scalar>(v: &[f64]) -> DVector<T> {
    DVector::from_iterator(v.len(), v.iter().map(|x| from_f64(*x)))
}

fn mat_to_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| to_f64(m[(r, c)])).collect())
        .collect()
}

fn mat_from_rows<T: Scalar>(rows: &[Vec<f64>]) -> Result<DMatrix<T>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| from_f64(rows[r][c])))
}

// ---------------------------------------------------------------------------
// dataset

/// Sidecar metadata describing how a dataset was produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub dt: f64,
    pub seed: u64,
    pub n_trajectories: usize,
    pub n_pairs: usize,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub system: SystemDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemDoc {
    pub name: String,
    pub dim: usize,
    pub params: BTreeMap<String, f64>,
}

impl SystemDoc {
    pub fn from_spec<T: Scalar>(spec: &VectorFieldSpec<T>) -> Self {
        Self {
            name: spec.name.clone(),
            dim: spec.dim,
            params: spec
                .params
                .iter()
                .map(|(k, v)| (k.clone(), to_f64(*v)))
                .collect(),
        }
    }

    pub fn to_spec<T: Scalar>(&self) -> Result<VectorFieldSpec<T>> {
        let params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), from_f64(*v)))
            .collect();
        VectorFieldSpec::new(&self.name, params)
    }
}

/// Write `<base>.csv` and `<base>.meta.toml`.
pub fn write_dataset<T: Scalar>(
    base: &Path,
    dataset: &TrajectoryDataset<T>,
    seed: u64,
) -> Result<(PathBuf, PathBuf)> {
    let d = dataset.system.dim;
    let csv_path = base.with_extension("csv");
    let meta_path = base.with_extension("meta.toml");

    let mut out = String::new();
    out.push_str("traj_id,step,t");
    for j in 1..=d {
        out.push_str(&format!(",x_{j}"));
    }
    for j in 1..=d {
        out.push_str(&format!(",xdot_{j}"));
    }
    out.push('\n');
    for (ti, traj) in dataset.trajectories.iter().enumerate() {
        let dt = to_f64(traj.dt);
        for (k, (x, xd)) in traj.states.iter().zip(traj.derivs.iter()).enumerate() {
            out.push_str(&format!("{ti},{k},{}", fmt_f64(dt * k as f64)));
            for v in x.iter() {
                out.push_str(&format!(",{}", fmt_f64(to_f64(*v))));
            }
            for v in xd.iter() {
                out.push_str(&format!(",{}", fmt_f64(to_f64(*v))));
            }
            out.push('\n');
        }
    }
    atomic_write(&csv_path, out.as_bytes())?;

    let meta = DatasetMeta {
        dt: dataset
            .trajectories
            .first()
            .map(|t| to_f64(t.dt))
            .unwrap_or(0.0),
        seed,
        n_trajectories: dataset.trajectories.len(),
        n_pairs: dataset.n_pairs(),
        box_lo: vec_to_f64(&dataset.box_.lo),
        box_hi: vec_to_f64(&dataset.box_.hi),
        system: SystemDoc::from_spec(&dataset.system),
    };
    let toml = toml::to_string_pretty(&meta)
        .map_err(|e| Error::parse(&meta_path, e.to_string()))?;
    atomic_write(&meta_path, toml.as_bytes())?;
    Ok((csv_path, meta_path))
}

/// Load a dataset written by [`write_dataset`]; bit-exact for full-precision
/// values.
pub fn load_dataset<T: Scalar>(base: &Path) -> Result<(TrajectoryDataset<T>, DatasetMeta)> {
    let csv_path = base.with_extension("csv");
    let meta_path = base.with_extension("meta.toml");
    let meta: DatasetMeta = toml::from_str(&read_to_string(&meta_path)?)
        .map_err(|e| Error::parse(&meta_path, e.to_string()))?;
    let system: VectorFieldSpec<T> = meta.system.to_spec()?;
    let d = system.dim;
    let box_ = DomainBox::new(vec_from_f64(&meta.box_lo), vec_from_f64(&meta.box_hi))?;

    let text = read_to_string(&csv_path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(&csv_path, "empty file"))?;
    let expect_cols = 3 + 2 * d;
    if header.split(',').count() != expect_cols {
        return Err(Error::parse(
            &csv_path,
            format!("expected {expect_cols} columns, got header `{header}`"),
        ));
    }

    let mut trajectories: Vec<Trajectory<T>> = Vec::new();
    let mut cur_id: Option<usize> = None;
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != expect_cols {
            return Err(Error::parse(&csv_path, format!("row {} malformed", ln + 2)));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::parse(&csv_path, format!("row {}: {e}", ln + 2)))
        };
        let traj_id: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(&csv_path, format!("row {}: bad traj_id", ln + 2)))?;
        if cur_id != Some(traj_id) {
            trajectories.push(Trajectory {
                dt: from_f64(meta.dt),
                states: Vec::new(),
                derivs: Vec::new(),
            });
            cur_id = Some(traj_id);
        }
        let mut x = DVector::zeros(d);
        let mut xd = DVector::zeros(d);
        for j in 0..d {
            x[j] = from_f64(parse_f(fields[3 + j])?);
            xd[j] = from_f64(parse_f(fields[3 + d + j])?);
        }
        let traj = trajectories.last_mut().unwrap();
        traj.states.push(x);
        traj.derivs.push(xd);
    }

    Ok((
        TrajectoryDataset {
            trajectories,
            system,
            box_,
        },
        meta,
    ))
}

// ---------------------------------------------------------------------------
// networks and flows

/// Serialized dense network: row-major weights, full precision.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetDoc {
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetDoc {
    pub fn from_net<T: Scalar>(net: &DenseNet<T>) -> Self {
        Self {
            layer_dims: net.layer_dims.clone(),
            activation: net.activation.name().to_string(),
            weights: net
                .weights
                .iter()
                .map(|w| {
                    let mut flat = Vec::with_capacity(w.len());
                    for r in 0..w.nrows() {
                        for c in 0..w.ncols() {
                            flat.push(to_f64(w[(r, c)]));
                        }
                    }
                    flat
                })
                .collect(),
            biases: net.biases.iter().map(|b| vec_to_f64(b)).collect(),
        }
    }

    pub fn to_net<T: Scalar>(&self) -> Result<DenseNet<T>> {
        let activation = Activation::from_name(&self.activation)?;
        let mut net = DenseNet::zeros(&self.layer_dims, activation);
        if self.weights.len() != net.weights.len() || self.biases.len() != net.biases.len() {
            return Err(Error::Config("network document layer count mismatch".into()));
        }
        for (l, flat) in self.weights.iter().enumerate() {
            let w = &mut net.weights[l];
            if flat.len() != w.len() {
                return Err(Error::Config(format!("layer {l} weight size mismatch")));
            }
            let ncols = w.ncols();
            for (i, v) in flat.iter().enumerate() {
                w[(i / ncols, i % ncols)] = from_f64(*v);
            }
        }
        for (l, flat) in self.biases.iter().enumerate() {
            if flat.len() != net.biases[l].len() {
                return Err(Error::Config(format!("layer {l} bias size mismatch")));
            }
            net.biases[l] = vec_from_f64(flat);
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CouplingLayerDoc {
    pub mask: Vec<bool>,
    pub s_clamp: f64,
    pub s_net: NetDoc,
    pub t_net: NetDoc,
}

/// Serialized flow: ordered list of coupling-layer records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FlowDoc {
    pub layers: Vec<CouplingLayerDoc>,
}

impl FlowDoc {
    pub fn from_flow<T: Scalar>(flow: &FlowModel<T>) -> Self {
        Self {
            layers: flow
                .layers
                .iter()
                .map(|l| CouplingLayerDoc {
                    mask: l.mask.clone(),
                    s_clamp: to_f64(l.s_clamp),
                    s_net: NetDoc::from_net(&l.s_net),
                    t_net: NetDoc::from_net(&l.t_net),
                })
                .collect(),
        }
    }

    pub fn to_flow<T: Scalar>(&self) -> Result<FlowModel<T>> {
        let layers = self
            .layers
            .iter()
            .map(|doc| {
                CouplingLayer::new(
                    doc.mask.clone(),
                    doc.s_net.to_net()?,
                    doc.t_net.to_net()?,
                    from_f64(doc.s_clamp),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        FlowModel::from_layers(layers)
    }
}

pub fn save_flow<T: Scalar>(path: &Path, flow: &FlowModel<T>) -> Result<()> {
    let doc = FlowDoc::from_flow(flow);
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    atomic_write(path, json.as_bytes())
}

pub fn load_flow<T: Scalar>(path: &Path) -> Result<FlowModel<T>> {
    let doc: FlowDoc = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    doc.to_flow()
}

// ---------------------------------------------------------------------------
// eigenfunction library and LTI model

/// Reference to the diffeomorphism backing a library.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffeoRef {
    /// A flow checkpoint file, path relative to the referencing document.
    Flow { path: String },
    Identity { dim: usize },
    ExactEx1 { mu: f64, lambda: f64 },
}

impl DiffeoRef {
    pub fn resolve<T: Scalar>(&self, base_dir: &Path) -> Result<Arc<dyn Diffeomorphism<T>>> {
        Ok(match self {
            DiffeoRef::Flow { path } => Arc::new(load_flow::<T>(&base_dir.join(path))?),
            DiffeoRef::Identity { dim } => Arc::new(IdentityDiffeo::new(*dim)),
            DiffeoRef::ExactEx1 { mu, lambda } => {
                Arc::new(ExactDiffeoEx1::new(from_f64::<T>(*mu), from_f64::<T>(*lambda))?)
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LibraryDoc {
    pub a: Vec<Vec<f64>>,
    pub lambdas_p: Vec<f64>,
    pub right_eigvecs: Vec<Vec<f64>>,
    pub adjoint_basis: Vec<Vec<f64>>,
    pub max_powers: Vec<usize>,
    pub radii: Vec<f64>,
    pub diffeo: DiffeoRef,
}

impl LibraryDoc {
    pub fn from_library<T: Scalar>(
        lib: &EigenfunctionLibrary<T>,
        a: &DMatrix<T>,
        diffeo: DiffeoRef,
    ) -> Self {
        Self {
            a: mat_to_rows(a),
            lambdas_p: lib.principal.lambdas.iter().map(|l| to_f64(*l)).collect(),
            right_eigvecs: mat_to_rows(&lib.principal.right_eigvecs),
            adjoint_basis: mat_to_rows(&lib.principal.adjoint_basis),
            max_powers: lib.library.max_powers.clone(),
            radii: vec_to_f64(&lib.scaling.radius),
            diffeo,
        }
    }

    pub fn to_library<T: Scalar>(&self, base_dir: &Path) -> Result<EigenfunctionLibrary<T>> {
        let principal = PrincipalEigenpairs {
            lambdas: self.lambdas_p.iter().map(|l| from_f64(*l)).collect(),
            right_eigvecs: mat_from_rows(&self.right_eigvecs)?,
            adjoint_basis: mat_from_rows(&self.adjoint_basis)?,
        };
        let library: MultiIndexLibrary<T> =
            crate::eigen::enumerate_library(&principal.lambdas, &self.max_powers);
        let scaling = BoxScaling {
            radius: vec_from_f64(&self.radii),
        };
        let diffeo = self.diffeo.resolve(base_dir)?;
        Ok(EigenfunctionLibrary::from_parts(
            principal, library, scaling, diffeo,
        ))
    }
}

pub fn save_library(path: &Path, doc: &LibraryDoc) -> Result<()> {
    let json = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    atomic_write(path, json.as_bytes())
}

pub fn load_library<T: Scalar>(path: &Path) -> Result<(EigenfunctionLibrary<T>, LibraryDoc)> {
    let doc: LibraryDoc = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok((doc.to_library(base)?, doc))
}

/// Serialized lifted LTI model: spectrum diagonal, time step, reconstruction
/// matrix (row-major), and the library file it lifts with.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelDoc {
    pub dt: f64,
    pub lambda: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    /// Library document path, relative to this file.
    pub library: String,
}

impl ModelDoc {
    pub fn from_model<T: Scalar>(model: &LiftedLTIModel<T>, library_path: &str) -> Self {
        Self {
            dt: to_f64(model.dt),
            lambda: vec_to_f64(&model.lambdas),
            v: mat_to_rows(&model.v),
            library: library_path.to_string(),
        }
    }
}

pub fn save_model(path: &Path, doc: &ModelDoc) -> Result<()> {
    let json = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    atomic_write(path, json.as_bytes())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<LiftedLTIModel<T>> {
    let doc: ModelDoc = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let (library, _) = load_library::<T>(&base.join(&doc.library))?;
    let lambdas = vec_from_f64::<T>(&doc.lambda);
    let dt = from_f64::<T>(doc.dt);
    let lambda_d = crate::kefmd::discretize(lambdas.as_slice(), dt);
    Ok(LiftedLTIModel {
        lambdas,
        lambda_d,
        v: mat_from_rows(&doc.v)?,
        library: Arc::new(library),
        dt,
    })
}

// ---------------------------------------------------------------------------
// EDMD baselines

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DictionaryDoc {
    Monomial { dim: usize, max_degree: usize },
    Rbf { centers: Vec<Vec<f64>>, gamma: f64 },
}

impl DictionaryDoc {
    pub fn from_dict<T: Scalar>(dict: &crate::edmd::Dictionary<T>) -> Self {
        match dict {
            crate::edmd::Dictionary::Monomial { dim, max_degree } => DictionaryDoc::Monomial {
                dim: *dim,
                max_degree: *max_degree,
            },
            crate::edmd::Dictionary::Rbf { centers, gamma } => DictionaryDoc::Rbf {
                centers: centers.iter().map(|c| vec_to_f64(c)).collect(),
                gamma: to_f64(*gamma),
            },
        }
    }

    pub fn to_dict<T: Scalar>(&self) -> crate::edmd::Dictionary<T> {
        match self {
            DictionaryDoc::Monomial { dim, max_degree } => crate::edmd::Dictionary::Monomial {
                dim: *dim,
                max_degree: *max_degree,
            },
            DictionaryDoc::Rbf { centers, gamma } => crate::edmd::Dictionary::Rbf {
                centers: centers.iter().map(|c| vec_from_f64(c)).collect(),
                gamma: from_f64(*gamma),
            },
        }
    }
}

/// Serialized generator-EDMD model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EdmdModelDoc {
    pub dict: DictionaryDoc,
    pub l: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl EdmdModelDoc {
    pub fn from_model<T: Scalar>(model: &crate::edmd::GeneratorEDMDModel<T>) -> Self {
        Self {
            dict: DictionaryDoc::from_dict(&model.dict),
            l: mat_to_rows(&model.l),
            c: mat_to_rows(&model.c),
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<crate::edmd::GeneratorEDMDModel<T>> {
        Ok(crate::edmd::GeneratorEDMDModel {
            l: mat_from_rows(&self.l)?,
            c: mat_from_rows(&self.c)?,
            dict: self.dict.to_dict(),
        })
    }
}

pub fn save_edmd_model(path: &Path, doc: &EdmdModelDoc) -> Result<()> {
    let json = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    atomic_write(path, json.as_bytes())
}

pub fn load_edmd_model<T: Scalar>(path: &Path) -> Result<crate::edmd::GeneratorEDMDModel<T>> {
    let doc: EdmdModelDoc = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    doc.to_model()
}

// ---------------------------------------------------------------------------
// training log and prediction CSVs

/// Write the per-epoch loss log: `epoch, conjugacy, jac0, orig0, total`.
pub fn write_train_log<T: Scalar>(
    path: &Path,
    history: &[crate::train::EpochStats<T>],
) -> Result<()> {
    let mut out = String::from("epoch,conjugacy,jac0,orig0,total\n");
    for s in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.epoch,
            fmt_f64(to_f64(s.conjugacy)),
            fmt_f64(to_f64(s.jac0)),
            fmt_f64(to_f64(s.orig0)),
            fmt_f64(to_f64(s.total)),
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// Write trajectories as `traj_id, k, t, <prefix>_1..<prefix>_d`; predicted
/// trajectories use the `xhat` prefix.
pub fn write_trajectories<T: Scalar>(
    path: &Path,
    trajectories: &[Vec<DVector<T>>],
    dt: f64,
    prefix: &str,
) -> Result<()> {
    let d = trajectories
        .first()
        .and_then(|t| t.first())
        .map(|x| x.len())
        .unwrap_or(0);
    let mut out = String::from("traj_id,k,t");
    for j in 1..=d {
        out.push_str(&format!(",{prefix}_{j}"));
    }
    out.push('\n');
    for (ti, traj) in trajectories.iter().enumerate() {
        for (k, x) in traj.iter().enumerate() {
            out.push_str(&format!("{ti},{k},{}", fmt_f64(dt * k as f64)));
            for v in x.iter() {
                out.push_str(&format!(",{}", fmt_f64(to_f64(*v))));
            }
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Write predicted trajectories: `traj_id, k, t, xhat_1..xhat_d`.
pub fn write_predictions<T: Scalar>(
    path: &Path,
    trajectories: &[Vec<DVector<T>>],
    dt: f64,
) -> Result<()> {
    write_trajectories(path, trajectories, dt, "xhat")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{boundary_starts, generate_dataset};
    use crate::flow::DEFAULT_S_CLAMP;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let sys = VectorFieldSpec::ex1(-0.7f64, -0.3);
        let box_ = DomainBox::centered(5.0, 2);
        let starts = boundary_starts(&box_, 4, 11);
        let ds = generate_dataset(&sys, &box_, &starts, 0.065, 9).unwrap();
        let dir = tmpdir();
        let base = dir.path().join("train");
        write_dataset(&base, &ds, 11).unwrap();
        let (loaded, meta) = load_dataset::<f64>(&base).unwrap();
        assert_eq!(meta.seed, 11);
        assert_eq!(meta.n_pairs, 40);
        assert_eq!(loaded.system.name, "ex1");
        assert_eq!(loaded.trajectories.len(), ds.trajectories.len());
        for (a, b) in loaded.trajectories.iter().zip(ds.trajectories.iter()) {
            assert_eq!(a.dt, b.dt);
            for (x, y) in a.states.iter().zip(b.states.iter()) {
                assert_eq!(x, y, "states must round-trip bit-exactly");
            }
            for (x, y) in a.derivs.iter().zip(b.derivs.iter()) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn rewriting_a_dataset_is_byte_identical() {
        let sys = VectorFieldSpec::ex1(-0.7f64, -0.3);
        let box_ = DomainBox::centered(5.0, 2);
        let starts = boundary_starts(&box_, 3, 5);
        let ds = generate_dataset(&sys, &box_, &starts, 0.065, 5).unwrap();
        let dir = tmpdir();
        let b1 = dir.path().join("a");
        let b2 = dir.path().join("b");
        write_dataset(&b1, &ds, 5).unwrap();
        write_dataset(&b2, &ds, 5).unwrap();
        let c1 = fs::read(b1.with_extension("csv")).unwrap();
        let c2 = fs::read(b2.with_extension("csv")).unwrap();
        assert_eq!(c1, c2);
        let m1 = fs::read(b1.with_extension("meta.toml")).unwrap();
        let m2 = fs::read(b2.with_extension("meta.toml")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn flow_document_round_trips_parameters_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut flow = FlowModel::<f64>::new(2, 3, &[6, 6], 5.0, &mut rng).unwrap();
        let mut p = Vec::new();
        flow.write_params(&mut p);
        for v in p.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        flow.read_params(&p);

        let dir = tmpdir();
        let path = dir.path().join("flow.json");
        save_flow(&path, &flow).unwrap();
        let loaded = load_flow::<f64>(&path).unwrap();
        assert_eq!(loaded, flow);
    }

    #[test]
    fn library_document_round_trips_through_flow_reference() {
        let sys = VectorFieldSpec::ex1(-0.7f64, -0.3);
        let box_ = DomainBox::centered(5.0, 2);
        let starts = boundary_starts(&box_, 6, 7);
        let ds = generate_dataset(&sys, &box_, &starts, 0.065, 20).unwrap();
        let a = sys.jacobian_linearization().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let flow = FlowModel::<f64>::new(2, 2, &[6], DEFAULT_S_CLAMP, &mut rng).unwrap();
        let dir = tmpdir();
        save_flow(&dir.path().join("flow.json"), &flow).unwrap();

        let lib = EigenfunctionLibrary::build(&a, &[3, 3], Arc::new(flow), &ds).unwrap();
        let doc = LibraryDoc::from_library(
            &lib,
            &a,
            DiffeoRef::Flow {
                path: "flow.json".into(),
            },
        );
        let path = dir.path().join("library.json");
        save_library(&path, &doc).unwrap();

        let (loaded, doc2) = load_library::<f64>(&path).unwrap();
        assert_eq!(doc, doc2);
        assert_eq!(loaded.lambdas(), lib.lambdas());
        assert_eq!(loaded.scaling.radius, lib.scaling.radius);
        let x = DVector::from_vec(vec![1.2, -0.4]);
        assert_eq!(loaded.lift(&x), lib.lift(&x));
    }

    #[test]
    fn model_document_round_trips_prediction() {
        let sys = VectorFieldSpec::ex1(-0.7f64, -0.3);
        let box_ = DomainBox::centered(5.0, 2);
        let starts = boundary_starts(&box_, 6, 7);
        let ds = generate_dataset(&sys, &box_, &starts, 0.065, 20).unwrap();
        let a = sys.jacobian_linearization().unwrap();
        let oracle = Arc::new(ExactDiffeoEx1::new(-0.7, -0.3).unwrap());
        let lib = Arc::new(EigenfunctionLibrary::build(&a, &[4, 4], oracle, &ds).unwrap());
        let (xs, _) = ds.to_matrices();
        let (model, _) = LiftedLTIModel::fit(lib, &xs, 0.065, None).unwrap();

        let dir = tmpdir();
        let lib_doc = LibraryDoc::from_library(
            &model.library,
            &a,
            DiffeoRef::ExactEx1 {
                mu: -0.7,
                lambda: -0.3,
            },
        );
        save_library(&dir.path().join("library.json"), &lib_doc).unwrap();
        let model_doc = ModelDoc::from_model(&model, "library.json");
        save_model(&dir.path().join("model.json"), &model_doc).unwrap();

        let loaded = load_model::<f64>(&dir.path().join("model.json")).unwrap();
        let x0 = DVector::from_vec(vec![2.0, 1.0]);
        let p1 = model.predict_trajectory(&x0, 20);
        let p2 = loaded.predict_trajectory(&x0, 20);
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a, b, "prediction must survive serialization bit-exactly");
        }
    }

    #[test]
    fn full_precision_format_survives_parse() {
        let values = [0.1, -5.5, 1.0 / 3.0, 2.0f64.powi(-40), 6.02e23];
        for v in values {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{s}");
        }
    }
}
