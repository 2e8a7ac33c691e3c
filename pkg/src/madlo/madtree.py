"""PCA kd-tree whose leaves are small planar surface patches.

Every node carries the centroid, the covariance eigenbasis (smallest-spread
axis = surface normal, largest-spread axis = splitting direction) and the
oriented bounding-box extents of its point subset. Splitting recurses until
the largest extent drops below ``b_max``; very flat ancestors (smallest
extent below ``b_min``) push their normal down to all descendant leaves,
which rescues leaves too sparse to estimate one themselves.

The build is level-synchronous: each pass partitions an index array in place
and computes statistics for every node of one depth with batched array ops,
so cost stays near O(N log N) with small constants.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Isometry3, PointCloud, eig_sym3_batch

# nodes with fewer points than this cannot estimate a covariance plane and
# terminate as leaves with an invalid normal unless an ancestor donated one
MIN_SPLIT_POINTS = 3


@dataclass(frozen=True)
class TreeParams:
    """Leaf sizing (meters). b_max bounds leaf extent, b_min marks flatness."""

    b_max: float = 0.2
    b_min: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.b_min and 0.0 < self.b_max):
            raise ValueError("b_min and b_max must be positive")
        if self.b_min >= self.b_max:
            raise ValueError(f"b_min ({self.b_min}) must be below b_max ({self.b_max})")


class KdNode:
    """Read-only view of one tree node; cheap to create, compares by identity."""

    __slots__ = ("tree", "index")

    def __init__(self, tree: "KdTree", index: int):
        self.tree = tree
        self.index = int(index)

    @property
    def mu(self) -> np.ndarray:
        return self.tree.mus[self.index]

    @property
    def normal(self) -> np.ndarray:
        return self.tree.normals[self.index]

    @property
    def direction(self) -> np.ndarray:
        return self.tree.directions[self.index]

    @property
    def bbox(self) -> np.ndarray:
        return self.tree.bboxes[self.index]

    @property
    def num_points(self) -> int:
        return int(self.tree.counts[self.index])

    @property
    def valid_normal(self) -> bool:
        return bool(self.tree.valid[self.index])

    @property
    def is_leaf(self) -> bool:
        return self.tree.left[self.index] < 0

    @property
    def left(self) -> "KdNode | None":
        i = self.tree.left[self.index]
        return None if i < 0 else KdNode(self.tree, i)

    @property
    def right(self) -> "KdNode | None":
        i = self.tree.right[self.index]
        return None if i < 0 else KdNode(self.tree, i)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, KdNode)
            and other.tree is self.tree
            and other.index == self.index
        )

    def __hash__(self) -> int:
        return hash((id(self.tree), self.index))

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf else "node"
        return f"KdNode({kind} #{self.index}, n_pts={self.num_points})"


class KdTree:
    """Struct-of-arrays tree storage; nodes are indexed, root is index 0.

    ``point_order`` is the build permutation of the input cloud: node i owns
    the contiguous slice ``point_order[starts[i] : starts[i] + counts[i]]``.
    Leaves keep only statistics, never the raw points.
    """

    __slots__ = (
        "params", "pose_applied", "mus", "normals", "directions", "bboxes",
        "counts", "starts", "valid", "left", "right",
        "point_order", "leaf_ids", "depth",
    )

    def __init__(self):
        self.params: TreeParams | None = None
        self.pose_applied = Isometry3.identity()

    @property
    def num_nodes(self) -> int:
        return self.mus.shape[0]

    @property
    def num_leaves(self) -> int:
        return self.leaf_ids.shape[0]

    @property
    def root(self) -> KdNode:
        return KdNode(self, 0)

    def leaf_point_indices(self, index: int) -> np.ndarray:
        """Input-cloud row indices owned by node ``index``."""
        s = int(self.starts[index])
        return self.point_order[s : s + int(self.counts[index])]

    # leaf statistics as flat arrays, in left-to-right leaf order
    def leaf_mus(self) -> np.ndarray:
        return self.mus[self.leaf_ids]

    def leaf_normals(self) -> np.ndarray:
        return self.normals[self.leaf_ids]

    def leaf_valid(self) -> np.ndarray:
        return self.valid[self.leaf_ids]

    def descend(self, queries: np.ndarray) -> np.ndarray:
        """Vectorized root-to-leaf descent; returns a node index per query."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        cur = np.zeros(q.shape[0], dtype=np.int64)
        while True:
            li = self.left[cur]
            act = li >= 0
            if not act.any():
                return cur
            ca = cur[act]
            proj = np.einsum("ni,ni->n", self.directions[ca], q[act] - self.mus[ca])
            cur[act] = np.where(proj > 0.0, self.right[ca], li[act])


def build_tree(cloud, params: TreeParams = TreeParams()) -> KdTree:
    """Build the tree over a PointCloud or an (N, 3) array."""
    if isinstance(cloud, PointCloud):
        pts = cloud.points
    else:
        pts = np.ascontiguousarray(np.asarray(cloud, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain NaN/Inf")
    n = pts.shape[0]
    if n == 0:
        raise ValueError("cannot build a tree over an empty cloud")

    idx = np.arange(n, dtype=np.int64)

    # frontier state for the current level
    lo = np.array([0], dtype=np.int64)
    hi = np.array([n], dtype=np.int64)
    inherits = np.array([False])
    inh_n = np.zeros((1, 3))

    mus_l, normals_l, dirs_l, bbox_l = [], [], [], []
    counts_l, starts_l, valid_l, left_l, right_l = [], [], [], [], []
    allocated = 1
    depth = 0

    while lo.size:
        f = lo.size
        lengths = hi - lo
        csum = np.concatenate([[0], np.cumsum(lengths)])
        starts = csum[:-1]
        n_act = int(csum[-1])
        within = np.arange(n_act, dtype=np.int64) - np.repeat(starts, lengths)
        pos = np.repeat(lo, lengths) + within
        act_idx = idx[pos]
        p = pts[act_idx]
        seg = np.repeat(np.arange(f, dtype=np.int64), lengths)

        sums = np.add.reduceat(p, starts, axis=0)
        mu = sums / lengths[:, None]
        d = p - mu[seg]
        outer = (d[:, :, None] * d[:, None, :]).reshape(n_act, 9)
        cov = (np.add.reduceat(outer, starts, axis=0) / lengths[:, None]).reshape(f, 3, 3)
        cov = 0.5 * (cov + cov.transpose(0, 2, 1))
        _, vecs = eig_sym3_batch(cov)
        normal_pca = np.ascontiguousarray(vecs[:, :, 0])
        direction = np.ascontiguousarray(vecs[:, :, 2])

        y = np.einsum("ni,nij->nj", d, vecs[seg])
        ext = np.maximum.reduceat(y, starts, axis=0) - np.minimum.reduceat(y, starts, axis=0)
        bbox = np.sort(ext, axis=1)

        is_leaf = (bbox[:, 2] < params.b_max) | (lengths < MIN_SPLIT_POINTS)

        proj = np.einsum("ni,ni->n", d, direction[seg])
        go_right = proj > 0.0
        nr = np.add.reduceat(go_right.astype(np.int64), starts)
        # a split that moves nothing (numerically coincident points) ends here
        is_leaf |= (nr == 0) | (nr == lengths)
        interior = ~is_leaf

        normal = normal_pca.copy()
        take = is_leaf & inherits
        normal[take] = inh_n[take]
        valid = interior | inherits | (lengths >= MIN_SPLIT_POINTS)

        # stable in-place partition of interior segments, left side first
        key = seg * 2 + np.where(np.repeat(is_leaf, lengths), False, go_right)
        order = np.argsort(key, kind="stable")
        idx[pos] = act_idx[order]

        n_int = int(interior.sum())
        left_ids = np.full(f, -1, dtype=np.int64)
        right_ids = np.full(f, -1, dtype=np.int64)
        if n_int:
            base = allocated
            child = base + 2 * np.arange(n_int, dtype=np.int64)
            left_ids[interior] = child
            right_ids[interior] = child + 1
            allocated += 2 * n_int

        mus_l.append(mu)
        normals_l.append(normal)
        dirs_l.append(direction)
        bbox_l.append(bbox)
        counts_l.append(lengths)
        starts_l.append(lo)
        valid_l.append(valid)
        left_l.append(left_ids)
        right_l.append(right_ids)

        if n_int == 0:
            break
        # next frontier: interleave (left, right) children per interior node
        ilo, ihi, inl = lo[interior], hi[interior], (lengths - nr)[interior]
        lo = np.empty(2 * n_int, dtype=np.int64)
        hi = np.empty(2 * n_int, dtype=np.int64)
        lo[0::2], hi[0::2] = ilo, ilo + inl
        lo[1::2], hi[1::2] = ilo + inl, ihi

        child_inherits = inherits[interior] | (bbox[interior, 0] < params.b_min)
        child_n = np.where(inherits[interior, None], inh_n[interior], normal_pca[interior])
        inherits = np.repeat(child_inherits, 2)
        inh_n = np.repeat(child_n, 2, axis=0)
        depth += 1

    tree = KdTree()
    tree.params = params
    tree.mus = np.concatenate(mus_l)
    tree.normals = np.concatenate(normals_l)
    tree.directions = np.concatenate(dirs_l)
    tree.bboxes = np.concatenate(bbox_l)
    tree.counts = np.concatenate(counts_l)
    tree.starts = np.concatenate(starts_l)
    tree.valid = np.concatenate(valid_l)
    tree.left = np.concatenate(left_l)
    tree.right = np.concatenate(right_l)
    tree.point_order = idx
    tree.depth = depth
    leaf_mask = tree.left < 0
    leaf_ids = np.flatnonzero(leaf_mask)
    tree.leaf_ids = leaf_ids[np.argsort(tree.starts[leaf_ids], kind="stable")]
    return tree


def search_leaf(tree: KdTree, query: np.ndarray) -> KdNode:
    """Single root-to-leaf descent: right child iff d . (q - mu) > 0."""
    q = np.asarray(query, dtype=float).reshape(3)
    i = 0
    left, right = tree.left, tree.right
    mus, dirs = tree.mus, tree.directions
    while left[i] >= 0:
        dq = q - mus[i]
        dvec = dirs[i]
        proj = dvec[0] * dq[0] + dvec[1] * dq[1] + dvec[2] * dq[2]
        i = right[i] if proj > 0.0 else left[i]
    return KdNode(tree, i)


def transform_tree(tree: KdTree, x: Isometry3) -> None:
    """Rigidly move every node in place; extents are invariant, no rebuild."""
    rt = x.rotation.T
    tree.mus = tree.mus @ rt + x.translation
    tree.normals = tree.normals @ rt
    tree.directions = tree.directions @ rt
    tree.pose_applied = x @ tree.pose_applied


def collect_leaves(tree: KdTree) -> list[KdNode]:
    """All leaves, left-to-right."""
    return [KdNode(tree, i) for i in tree.leaf_ids]


def dump_leaves_csv(tree: KdTree, path) -> None:
    """Debug dump: one row per leaf with centroid, normal and point count."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mu_x", "mu_y", "mu_z", "n_x", "n_y", "n_z", "num_points"])
        for i in tree.leaf_ids:
            mu, nrm = tree.mus[i], tree.normals[i]
            w.writerow([repr(float(v)) for v in (*mu, *nrm)] + [int(tree.counts[i])])
