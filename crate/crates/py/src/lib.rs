//! Python bindings. Points cross the boundary as lists of `[x, y, z]`,
//! rotations as nested row lists.

#[pyo3::pymodule]
mod rigidreg_py {
    use nalgebra::{Matrix3, Vector3};
    use pyo3::exceptions::{PyIOError, PyValueError};
    use pyo3::prelude::*;
    use pyo3::types::PyDict;

    use rigidreg::data::{self, GenConfig};
    use rigidreg::estimators::{self, WeightVector};
    use rigidreg::geom3d;
    use rigidreg::harness::{self, EvalOptions, Method, TrainConfig};
    use rigidreg::regnet::NetGraph;

    fn err(e: rigidreg::Error) -> PyErr {
        match e {
            rigidreg::Error::Io(io) => PyIOError::new_err(io.to_string()),
            other => PyValueError::new_err(other.to_string()),
        }
    }

    fn points(v: Vec<[f64; 3]>) -> Vec<Vector3<f64>> {
        v.into_iter().map(Vector3::from).collect()
    }

    fn lists(v: &[Vector3<f64>]) -> Vec<[f64; 3]> {
        v.iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    #[pyclass(from_py_object)]
    #[derive(Clone, Copy)]
    struct RigidTransform {
        inner: geom3d::RigidTransform,
    }

    #[pymethods]
    impl RigidTransform {
        #[new]
        fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
            let r = Matrix3::from_fn(|i, j| rotation[i][j]);
            let inner = geom3d::RigidTransform::new(r, Vector3::from(translation)).map_err(err)?;
            Ok(Self { inner })
        }

        #[staticmethod]
        fn identity() -> Self {
            Self {
                inner: geom3d::RigidTransform::identity(),
            }
        }

        /// Rotation by the axis-angle vector `omega` (radians), then translation.
        #[staticmethod]
        fn from_axis_angle(omega: [f64; 3], translation: [f64; 3]) -> Self {
            Self {
                inner: geom3d::RigidTransform::from_axis_angle(Vector3::from(omega), Vector3::from(translation)),
            }
        }

        #[getter]
        fn rotation(&self) -> [[f64; 3]; 3] {
            std::array::from_fn(|i| std::array::from_fn(|j| self.inner.rotation[(i, j)]))
        }

        #[getter]
        fn translation(&self) -> [f64; 3] {
            self.inner.translation.into()
        }

        fn apply(&self, p: [f64; 3]) -> [f64; 3] {
            self.inner.apply(&Vector3::from(p)).into()
        }

        fn inverse(&self) -> Self {
            Self {
                inner: self.inner.inverse(),
            }
        }

        /// `self ∘ first`.
        fn compose(&self, first: &RigidTransform) -> Self {
            Self {
                inner: geom3d::compose(&self.inner, &first.inner),
            }
        }

        fn __repr__(&self) -> String {
            format!("RigidTransform(rotation={:?}, translation={:?})", self.rotation(), self.translation())
        }
    }

    #[pyclass(from_py_object)]
    #[derive(Clone)]
    struct CorrespondenceSet {
        inner: estimators::CorrespondenceSet,
    }

    #[pymethods]
    impl CorrespondenceSet {
        #[new]
        #[pyo3(signature = (p, q, labels=None, gt=None, pair_id=0))]
        fn new(
            p: Vec<[f64; 3]>,
            q: Vec<[f64; 3]>,
            labels: Option<Vec<bool>>,
            gt: Option<RigidTransform>,
            pair_id: u64,
        ) -> PyResult<Self> {
            let mut inner = estimators::CorrespondenceSet::new(pair_id, points(p), points(q)).map_err(err)?;
            if let Some(l) = labels {
                inner = inner.with_labels(l).map_err(err)?;
            }
            if let Some(t) = gt {
                inner = inner.with_gt(t.inner);
            }
            Ok(Self { inner })
        }

        #[getter]
        fn pair_id(&self) -> u64 {
            self.inner.pair_id
        }
        #[getter]
        fn p(&self) -> Vec<[f64; 3]> {
            lists(&self.inner.p)
        }
        #[getter]
        fn q(&self) -> Vec<[f64; 3]> {
            lists(&self.inner.q)
        }
        #[getter]
        fn labels(&self) -> Option<Vec<bool>> {
            self.inner.labels.clone()
        }
        #[getter]
        fn gt(&self) -> Option<RigidTransform> {
            self.inner.gt.map(|inner| RigidTransform { inner })
        }

        fn __len__(&self) -> usize {
            self.inner.len()
        }
    }

    fn unwrap_sets(sets: &[CorrespondenceSet]) -> Vec<estimators::CorrespondenceSet> {
        sets.iter().map(|s| s.inner.clone()).collect()
    }

    fn wrap_sets(sets: Vec<estimators::CorrespondenceSet>) -> Vec<CorrespondenceSet> {
        sets.into_iter().map(|inner| CorrespondenceSet { inner }).collect()
    }

    /// Synthetic pairs; keyword arguments override the generator defaults
    /// (pairs, n, outlier_fraction, max_rotation_deg, max_translation,
    /// noise_sigma, outlier_displacement, label_threshold, seed).
    #[pyfunction]
    #[pyo3(signature = (**kwargs))]
    fn gen_synthetic(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<CorrespondenceSet>> {
        let cfg: GenConfig = from_kwargs(kwargs)?;
        Ok(wrap_sets(data::gen_synthetic(&cfg).map_err(err)?))
    }

    /// Builds a serde config from keyword arguments by way of JSON.
    fn from_kwargs<T: serde::de::DeserializeOwned + Default>(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
        let Some(kw) = kwargs else {
            return Ok(T::default());
        };
        let json = kw.py().import("json")?.call_method1("dumps", (kw,))?.extract::<String>()?;
        serde_json::from_str(&json).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[pyfunction]
    fn read_dataset(path: &str) -> PyResult<Vec<CorrespondenceSet>> {
        Ok(wrap_sets(data::read_dataset(path).map_err(err)?))
    }

    #[pyfunction]
    fn write_dataset(path: &str, sets: Vec<CorrespondenceSet>) -> PyResult<()> {
        data::write_dataset(path, &unwrap_sets(&sets)).map_err(err)
    }

    #[pyfunction]
    fn rot_error(a: &RigidTransform, b: &RigidTransform) -> f64 {
        geom3d::rot_error(&a.inner.rotation, &b.inner.rotation)
    }

    #[pyfunction]
    fn trans_error(a: &RigidTransform, b: &RigidTransform) -> f64 {
        geom3d::trans_error(&a.inner.translation, &b.inner.translation)
    }

    #[pyfunction]
    fn chain(pairwise: Vec<RigidTransform>) -> PyResult<Vec<RigidTransform>> {
        let ts: Vec<_> = pairwise.iter().map(|t| t.inner).collect();
        Ok(geom3d::chain(&ts)
            .map_err(err)?
            .into_iter()
            .map(|inner| RigidTransform { inner })
            .collect())
    }

    #[pyfunction]
    fn procrustes(corrs: &CorrespondenceSet, weights: Vec<f64>) -> PyResult<RigidTransform> {
        let w = WeightVector::new(weights).map_err(err)?;
        let inner = estimators::procrustes(&corrs.inner, &w).map_err(err)?;
        Ok(RigidTransform { inner })
    }

    #[pyfunction]
    fn umeyama(corrs: &CorrespondenceSet, mask: Vec<bool>) -> PyResult<RigidTransform> {
        let inner = estimators::umeyama(&corrs.inner, &mask).map_err(err)?;
        Ok(RigidTransform { inner })
    }

    /// Returns `(transform, inlier mask)`.
    #[pyfunction]
    #[pyo3(signature = (corrs, threshold=0.05, iters=1000, seed=0))]
    fn ransac(corrs: &CorrespondenceSet, threshold: f64, iters: usize, seed: u64) -> PyResult<(RigidTransform, Vec<bool>)> {
        let (inner, mask) = estimators::ransac(&corrs.inner, threshold, iters, seed).map_err(err)?;
        Ok((RigidTransform { inner }, mask))
    }

    /// Returns `(transform, iterations, mean closest-point residual)`.
    #[pyfunction]
    #[pyo3(signature = (source, target, init=None, max_iters=50, tol=1e-6))]
    fn icp(
        source: Vec<[f64; 3]>,
        target: Vec<[f64; 3]>,
        init: Option<RigidTransform>,
        max_iters: usize,
        tol: f64,
    ) -> PyResult<(RigidTransform, usize, f64)> {
        let start = init.map_or(geom3d::RigidTransform::identity(), |t| t.inner);
        let out = estimators::icp(&points(source), &points(target), &start, max_iters, tol).map_err(err)?;
        Ok((RigidTransform { inner: out.transform }, out.iterations, out.mean_residual))
    }

    #[pyfunction]
    fn curriculum_theta(tau: f64, theta_max: f64) -> f64 {
        data::curriculum_theta(tau, theta_max)
    }

    #[pyclass]
    struct Checkpoint {
        inner: harness::Checkpoint,
    }

    #[pymethods]
    impl Checkpoint {
        #[staticmethod]
        fn load(path: &str) -> PyResult<Self> {
            Ok(Self {
                inner: harness::load_checkpoint(path).map_err(err)?,
            })
        }

        fn save(&self, path: &str) -> PyResult<()> {
            harness::save_checkpoint(path, &self.inner).map_err(err)
        }

        #[getter]
        fn stages(&self) -> usize {
            self.inner.networks.len()
        }

        #[getter]
        fn parameter_count(&self) -> usize {
            self.inner.params.count()
        }

        /// Returns `(stage-1 weights, composed transform)`.
        fn forward(&self, corrs: &CorrespondenceSet) -> PyResult<(Vec<f64>, RigidTransform)> {
            let net = NetGraph::new(&self.inner.networks, None).map_err(err)?;
            let mut out = net.forward(&self.inner.params, &corrs.inner).map_err(err)?;
            Ok((out.weights.swap_remove(0), RigidTransform { inner: out.transform }))
        }
    }

    /// Trains with a configuration given as keyword arguments (nested tables
    /// as dicts). Returns `(checkpoint, per-epoch log as list of dicts)`.
    #[pyfunction]
    #[pyo3(signature = (train_set, val_set, **kwargs))]
    fn train<'py>(
        py: Python<'py>,
        train_set: Vec<CorrespondenceSet>,
        val_set: Vec<CorrespondenceSet>,
        kwargs: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<(Checkpoint, Vec<Bound<'py, PyDict>>)> {
        let cfg: TrainConfig = from_kwargs(kwargs)?;
        let (tr, va) = (unwrap_sets(&train_set), unwrap_sets(&val_set));
        let out = py.detach(|| harness::train(&cfg, &tr, &va, |_| {})).map_err(err)?;
        let log = out
            .log
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("epoch", e.epoch)?;
                d.set_item("train_loss", e.train_loss)?;
                d.set_item("val_loss", e.val_loss)?;
                d.set_item("val_accuracy", e.val_accuracy)?;
                d.set_item("val_rot_mean", e.val_rot_mean)?;
                d.set_item("val_trans_mean", e.val_trans_mean)?;
                Ok(d)
            })
            .collect::<PyResult<_>>()?;
        Ok((
            Checkpoint {
                inner: harness::Checkpoint::new(cfg.networks, out.best),
            },
            log,
        ))
    }

    /// One dict per method with means, medians, timing and accuracy.
    #[pyfunction]
    #[pyo3(signature = (sets, methods, checkpoint=None, seed=0))]
    fn evaluate<'py>(
        py: Python<'py>,
        sets: Vec<CorrespondenceSet>,
        methods: Vec<String>,
        checkpoint: Option<&Checkpoint>,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let methods = methods
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let opts = EvalOptions {
            methods,
            ransac_seed: seed,
            ..EvalOptions::default()
        };
        let sets = unwrap_sets(&sets);
        let ckpt = checkpoint.map(|c| &c.inner);
        let report = py.detach(|| harness::evaluate(ckpt, &sets, &opts)).map_err(err)?;
        report
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("method", r.method.name())?;
                d.set_item("rot_mean", r.rot_mean)?;
                d.set_item("rot_median", r.rot_median)?;
                d.set_item("trans_mean", r.trans_mean)?;
                d.set_item("trans_median", r.trans_median)?;
                d.set_item("time_mean", r.time_mean)?;
                d.set_item("accuracy", r.accuracy)?;
                d.set_item("rot_errors", r.rot_errors.clone())?;
                Ok(d)
            })
            .collect()
    }
}
