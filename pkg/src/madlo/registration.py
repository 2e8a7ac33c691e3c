"""Scan-to-model alignment between kd-trees of planar patches.

Each scan leaf centroid is pushed through the current pose estimate, dropped
down every model tree, and paired with the leaf it lands in. A pair
contributes a point-to-plane residual e = n_l . (X mu_q - mu_l) when the
landing leaf has a usable normal and lies within an adaptive gate

    r = b_max + ||mu_q|| * b_ratio

that widens with range, where angular leaf footprints grow. Accumulation is
Huber-reweighted Gauss-Newton on SE(3) with a left-multiplied increment; the
6x6 system matrix doubles as the information matrix of the estimate and is
what keyframe selection consumes downstream.

Model trees are processed independently and reduced in tree order, so the
result is reproducible bit for bit under any worker count.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import Isometry3, exp_se3
from .madtree import KdNode, KdTree, search_leaf

# increment norm below which the solve has converged
CONVERGENCE_EPSILON = 1e-6
# information-matrix condition number beyond which the solve is declared
# unobservable (flat or feature-starved geometry)
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class RegistrationParams:
    b_ratio: float = 0.02        # gate growth per meter of range
    rho_ker: float = 0.1         # Huber kernel width, meters
    max_iterations: int | None = 15
    time_budget: float | None = None  # seconds, anytime cutoff
    damping: float = 1e-6        # Levenberg term, scaled by trace(H)/6

    def __post_init__(self):
        if self.b_ratio <= 0.0 or self.rho_ker <= 0.0 or self.damping < 0.0:
            raise ValueError("b_ratio and rho_ker must be positive, damping non-negative")
        if self.max_iterations is None and self.time_budget is None:
            raise ValueError("need max_iterations or time_budget to terminate")


@dataclass
class RegistrationResult:
    pose: Isometry3
    information: np.ndarray          # weighted system matrix of the last pass
    matched_fraction: float          # valid scan leaves with >= 1 accepted match
    iterations: int
    mean_error: float                # mean |e| over accepted pairs, last pass
    cost_history: list = field(default_factory=list)


class DegenerateRegistrationError(Exception):
    """Raised when H is rank-deficient; carries the partial result."""

    def __init__(self, result: RegistrationResult):
        super().__init__(
            f"registration information matrix is rank deficient "
            f"(matched fraction {result.matched_fraction:.3f})"
        )
        self.result = result


@dataclass(frozen=True)
class MatchPair:
    query: KdNode
    model: KdNode
    accepted: bool


def gate_radius(mu_q: np.ndarray, b_max: float, b_ratio: float) -> float:
    """Acceptance radius around a scan leaf with sensor-frame centroid mu_q."""
    return b_max + float(np.linalg.norm(mu_q)) * b_ratio


def huber_weight(e, rho_ker: float):
    """IRLS weight: 1 inside the kernel, rho_ker/|e| outside."""
    a = np.abs(e)
    return np.where(a <= rho_ker, 1.0, rho_ker / np.maximum(a, 1e-300))


def huber_cost(e, rho_ker: float):
    a = np.abs(e)
    return np.where(a <= rho_ker, 0.5 * a * a, rho_ker * (a - 0.5 * rho_ker))


def associate(query_leaf: KdNode, model_tree: KdTree, pose: Isometry3,
              params: RegistrationParams = RegistrationParams()) -> MatchPair:
    """Pair one scan leaf against one model tree under the given pose."""
    wq = pose.apply(query_leaf.mu)
    found = search_leaf(model_tree, wq)
    r = gate_radius(query_leaf.mu, query_leaf.tree.params.b_max, params.b_ratio)
    accepted = found.valid_normal and float(np.linalg.norm(found.mu - wq)) <= r
    return MatchPair(query_leaf, found, accepted)


def point_to_plane_residual(pair: MatchPair, pose: Isometry3) -> tuple[float, np.ndarray]:
    """Residual e = n_l . (X mu_q - mu_l) and its 6-row Jacobian.

    Differentiating e(xi) = n_l . (exp(xi) X mu_q - mu_l) at xi = 0 gives
    n_l for the translational columns and cross(X mu_q, n_l) for the
    rotational ones.
    """
    wq = pose.apply(pair.query.mu)
    n_l = pair.model.normal
    e = float(np.dot(n_l, wq - pair.model.mu))
    jac = np.concatenate([n_l, np.cross(wq, n_l)])
    return e, jac


def _associate_batch(tree: KdTree, wq: np.ndarray, radii: np.ndarray):
    """Gated association of all query centroids against one model tree."""
    ids = tree.descend(wq)
    mu_l = tree.mus[ids]
    diff = wq - mu_l
    dist = np.sqrt(np.einsum("ni,ni->n", diff, diff))
    acc = (dist <= radii) & tree.valid[ids]
    return acc, mu_l, tree.normals[ids]


def _accumulate(tree: KdTree, wq: np.ndarray, radii: np.ndarray, rho_ker: float):
    acc, mu_l, n_l = _associate_batch(tree, wq, radii)
    wqa, mua, na = wq[acc], mu_l[acc], n_l[acc]
    e = np.einsum("ni,ni->n", na, wqa - mua)
    w = huber_weight(e, rho_ker)
    jac = np.hstack([na, np.cross(wqa, na)])
    h = np.einsum("ki,kj->ij", jac * w[:, None], jac)
    b = np.einsum("ki,k->i", jac, w * e)
    cost = float(huber_cost(e, rho_ker).sum())
    abs_sum = float(np.abs(e).sum())
    return h, b, acc, cost, abs_sum, int(acc.sum())


def icp(model: "list[KdTree]", scan: KdTree, guess: Isometry3,
        params: RegistrationParams = RegistrationParams(),
        workers: int = 1) -> RegistrationResult:
    """Align a scan tree against the model forest starting from ``guess``.

    Anytime: stops on convergence, iteration cap, or time budget, whichever
    comes first, and reports the state of the last completed pass. Raises
    DegenerateRegistrationError (carrying the partial result) when the final
    system matrix is rank deficient.
    """
    model = list(model)
    if not model:
        raise ValueError("model forest is empty")
    if scan.num_leaves == 0:
        raise ValueError("scan tree has no leaves")

    q_valid = scan.leaf_valid()
    mus_q = scan.leaf_mus()[q_valid]
    n_queries = mus_q.shape[0]
    radii = scan.params.b_max + np.linalg.norm(mus_q, axis=1) * params.b_ratio

    pose = guess
    h_final = np.zeros((6, 6))
    matched = np.zeros(n_queries, dtype=bool)
    mean_error = 0.0
    iterations = 0
    cost_history: list[float] = []
    start = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 and len(model) > 1 else None

    try:
        while True:
            if params.max_iterations is not None and iterations >= params.max_iterations:
                break
            if params.time_budget is not None and time.perf_counter() - start >= params.time_budget:
                break

            wq = pose.apply(mus_q) if n_queries else mus_q
            work = lambda t: _accumulate(t, wq, radii, params.rho_ker)  # noqa: E731
            parts = list(pool.map(work, model)) if pool else [work(t) for t in model]

            h = np.zeros((6, 6))
            b = np.zeros(6)
            matched = np.zeros(n_queries, dtype=bool)
            cost = 0.0
            abs_sum = 0.0
            n_acc = 0
            for ht, bt, acc, ct, at, na in parts:  # fixed tree order: deterministic
                h += ht
                b += bt
                matched |= acc
                cost += ct
                abs_sum += at
                n_acc += na

            h_final = h
            mean_error = abs_sum / n_acc if n_acc else 0.0
            cost_history.append(cost)
            iterations += 1

            trace = float(np.trace(h))
            if trace <= 0.0:
                break
            xi = np.linalg.solve(h + (params.damping * trace / 6.0) * np.eye(6), -b)
            pose = exp_se3(xi) @ pose
            if float(np.linalg.norm(xi)) < CONVERGENCE_EPSILON:
                break
    finally:
        if pool:
            pool.shutdown(wait=False)

    p = float(matched.sum()) / n_queries if n_queries else 0.0
    result = RegistrationResult(
        pose=pose,
        information=h_final,
        matched_fraction=p,
        iterations=iterations,
        mean_error=mean_error,
        cost_history=cost_history,
    )
    eigvals = np.linalg.eigvalsh(h_final)
    if eigvals[-1] <= 0.0 or eigvals[-1] > CONDITION_LIMIT * eigvals[0]:
        raise DegenerateRegistrationError(result)
    return result
