"""scikit-learn style wrappers around the field sampler and the chaos statistics.

Both estimators take their sites (or atoms) as the ``X`` argument of ``fit``
and keep every constructor argument as a plain attribute, so ``get_params``,
``set_params`` and ``clone`` work as usual.  Fitted state ends in ``_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .envelope import PowerEnvelope
from .errors import ValidationError
from .field import IncrementFactorizer, ScaleGrid, simulate_ensemble
from .gmc import TruncationParams, ensemble_moments, run_ensemble
from .kernel import StarScaleKernel
from .measures import ReferenceMeasure

__all__ = ["ScaleFieldSampler", "CriticalChaos"]


def _sites(X):
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] not in (1, 2):
        raise ValidationError("sites must have 1 or 2 columns")
    return X


class ScaleFieldSampler(BaseEstimator):
    """Sample the scale-truncated field ``Xbar_t`` on fixed sites.

    Parameters
    ----------
    eta1, eta2 : float
        Kernel parameters.
    checkpoints : sequence of float
        Scales at which values are recorded.
    dt : float
        Sub-step used for the running maxima.
    seed : int
        Master seed.
    """

    def __init__(self, eta1=0.5, eta2=1.0, checkpoints=(1.0, 2.0, 4.0), dt=0.05, seed=0):
        self.eta1 = eta1
        self.eta2 = eta2
        self.checkpoints = checkpoints
        self.dt = dt
        self.seed = seed

    def fit(self, X, y=None):
        X = _sites(X)
        self.kernel_ = StarScaleKernel(self.eta1, self.eta2, X.shape[1])
        self.grid_ = ScaleGrid(self.checkpoints, self.dt)
        self.sites_ = X
        self.factorizer_ = IncrementFactorizer(self.kernel_, X)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, n_replicas=1, replica_offset=0):
        """Return an ``EnsembleRecord`` of ``n_replicas`` paths."""
        check_is_fitted(self, "factorizer_")
        return simulate_ensemble(
            self.kernel_, self.grid_, self.sites_, n_replicas, self.seed,
            replica_offset=replica_offset, factorizer=self.factorizer_,
        )


class CriticalChaos(BaseEstimator):
    """Critical chaos statistics of a weighted point set.

    ``fit(X, sample_weight)`` treats the rows of ``X`` as atoms with masses
    ``sample_weight`` (unit masses by default), samples ``n_replicas``
    fields and stores the snapshots and their moments.

    Parameters
    ----------
    q, r : float
        Truncation levels.
    gamma : float
        Exponent of the power envelope ``u^gamma``.
    eta1, eta2 : float
        Kernel parameters.
    checkpoints : sequence of float
    n_replicas : int
    dt : float
    seed : int
    """

    def __init__(self, q=3.0, r=3.0, gamma=0.3, eta1=0.5, eta2=1.0, checkpoints=(1.0, 2.0, 4.0),
                 n_replicas=200, dt=0.05, seed=0):
        self.q = q
        self.r = r
        self.gamma = gamma
        self.eta1 = eta1
        self.eta2 = eta2
        self.checkpoints = checkpoints
        self.n_replicas = n_replicas
        self.dt = dt
        self.seed = seed

    def fit(self, X, y=None, sample_weight=None):
        X = _sites(X)
        w = np.ones(X.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        box = np.stack([X.min(axis=0), X.max(axis=0)], axis=1)
        self.measure_ = ReferenceMeasure(X, w, box, "points")
        self.params_ = TruncationParams(self.q, self.r, PowerEnvelope(self.gamma))
        k = StarScaleKernel(self.eta1, self.eta2, X.shape[1])
        self.snapshots_ = run_ensemble(
            k, self.measure_, self.params_, self.checkpoints, self.n_replicas, self.seed, dt=self.dt
        )["all"]
        self.n_features_in_ = X.shape[1]
        return self

    def moments(self, statistics=("M", "Dq", "Dqr"), scaled=False):
        check_is_fitted(self, "snapshots_")
        return ensemble_moments(self.snapshots_, statistics, scaled=scaled)

    def transform(self, X=None):
        """Per-replica ``Dqr`` at each checkpoint, shape ``(n_replicas, n_checkpoints)``."""
        check_is_fitted(self, "snapshots_")
        return np.stack([s.values["Dqr"] for s in self.snapshots_[1:]], axis=1)
