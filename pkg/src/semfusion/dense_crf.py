"""Fully-connected CRF over surfels, solved by mean-field message passing.

Each surfel is a node whose unary is the negative log of its stored label
distribution. Pairs interact through a Potts penalty weighted by two
Gaussian kernels: an appearance kernel over position and colour and a
smoothness kernel over position and normal.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import EmptyMap, LengthMismatch, TooLarge
from .semantics_core import normalize_rows

logger = logging.getLogger(__name__)


@dataclass
class CrfParams:
    theta_alpha: float = 0.05  # metres
    theta_beta: float = 20.0  # RGB units
    theta_gamma: float = 0.1  # chord distance between unit normals
    w1: float = 10.0
    w2: float = 3.0
    iterations: int = 10
    max_exact_nodes: int = 20000
    # "exact" (dense all-pairs), "cutoff" (neighbours within cutoff_sigmas*theta_alpha) or "auto".
    # Dense surfel maps have many neighbours in the 3-5 sigma shell, so 6 sigma is
    # needed to keep cutoff marginals within 2% of exact ones.
    mode: str = "auto"
    cutoff_sigmas: float = 6.0
    auto_exact_limit: int = 2048
    blend: float = 1.0
    # Q <- (1 - relax) Q + relax * step(Q); 1.0 is the plain synchronous update,
    # which can flip-flop on strongly coupled node pairs.
    relax: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("kernel weights must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.mode not in ("auto", "exact", "cutoff"):
            raise ValueError(f"unknown CRF mode {self.mode!r}")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")
        if not 0.0 < self.relax <= 1.0:
            raise ValueError("relax must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class CrfFeatures:
    p: np.ndarray
    c: np.ndarray
    n: np.ndarray


@dataclass(eq=False)
class CrfGraph:
    ids: np.ndarray
    positions: np.ndarray
    colours: np.ndarray
    normals: np.ndarray
    unary: np.ndarray  # (nodes, labels)

    @property
    def size(self) -> int:
        return self.ids.size

    @property
    def label_count(self) -> int:
        return self.unary.shape[1]

    def features(self, i: int) -> CrfFeatures:
        return CrfFeatures(self.positions[i], self.colours[i], self.normals[i])


@dataclass
class InferenceReport:
    nodes: int
    iterations: int
    wall_time: float
    energy_before: float
    energy_after: float
    mode: str
    subsampled: bool = False
    vanished: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def build_graph(smap, params: CrfParams | None = None, ids=None) -> CrfGraph:
    if len(smap) == 0:
        raise EmptyMap("cannot build a CRF graph from an empty map")
    smap.check_integrity()
    if ids is None:
        rows = np.arange(len(smap))
    else:
        rows = smap.rows(ids)
    probs = smap.table.probs[rows]
    return CrfGraph(
        ids=smap.ids[rows].copy(),
        positions=smap.position[rows].copy(),
        colours=smap.colour[rows].copy(),
        normals=smap.normal[rows].copy(),
        unary=-np.log(probs),
    )


def kernel_appearance(f1: CrfFeatures, f2: CrfFeatures, params: CrfParams) -> float:
    dp = np.sum((np.asarray(f1.p, float) - np.asarray(f2.p, float)) ** 2)
    dc = np.sum((np.asarray(f1.c, float) - np.asarray(f2.c, float)) ** 2)
    return math.exp(-dp / (2 * params.theta_alpha**2) - dc / (2 * params.theta_beta**2))


def kernel_smoothness(f1: CrfFeatures, f2: CrfFeatures, params: CrfParams) -> float:
    dp = np.sum((np.asarray(f1.p, float) - np.asarray(f2.p, float)) ** 2)
    dn = np.sum((np.asarray(f1.n, float) - np.asarray(f2.n, float)) ** 2)
    return math.exp(-dp / (2 * params.theta_alpha**2) - dn / (2 * params.theta_gamma**2))


def _pair_weights(graph: CrfGraph, i: np.ndarray, j: np.ndarray, params: CrfParams) -> np.ndarray:
    """w1*k1 + w2*k2 for node index pairs (i, j)."""
    dp = np.sum((graph.positions[i] - graph.positions[j]) ** 2, axis=-1)
    dc = np.sum((graph.colours[i] - graph.colours[j]) ** 2, axis=-1)
    dn = np.sum((graph.normals[i] - graph.normals[j]) ** 2, axis=-1)
    sp = dp / (2 * params.theta_alpha**2)
    k1 = np.exp(-sp - dc / (2 * params.theta_beta**2))
    k2 = np.exp(-sp - dn / (2 * params.theta_gamma**2))
    return params.w1 * k1 + params.w2 * k2


def resolve_mode(graph: CrfGraph, params: CrfParams) -> str:
    if params.mode != "auto":
        return params.mode
    return "exact" if graph.size <= params.auto_exact_limit else "cutoff"


def pairwise_matrix(graph: CrfGraph, params: CrfParams, mode: str | None = None):
    """Symmetric node-by-node weight matrix with zero diagonal.

    Dense ndarray in exact mode, CSR in cutoff mode.
    """
    mode = mode or resolve_mode(graph, params)
    n = graph.size
    if params.w1 == 0 and params.w2 == 0:
        return sparse.csr_matrix((n, n))
    if mode == "exact":
        i, j = np.triu_indices(n, k=1)
        w = np.zeros((n, n))
        w[i, j] = _pair_weights(graph, i, j, params)
        return w + w.T
    tree = cKDTree(graph.positions)
    pairs = tree.query_pairs(params.cutoff_sigmas * params.theta_alpha, output_type="ndarray")
    if pairs.size == 0:
        return sparse.csr_matrix((n, n))
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    i, j = pairs[:, 0], pairs[:, 1]
    vals = _pair_weights(graph, i, j, params)
    m = sparse.coo_matrix((np.concatenate([vals, vals]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    return m.tocsr()


def _softmax_neg(energy: np.ndarray) -> np.ndarray:
    e = -energy
    e -= e.max(axis=1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=1, keepdims=True)
    return e


def mean_field_step(graph: CrfGraph, q: np.ndarray, params: CrfParams, pairwise=None) -> np.ndarray:
    """One synchronous mean-field update of all node marginals."""
    if pairwise is None:
        pairwise = pairwise_matrix(graph, params)
    msg = pairwise @ (1.0 - np.asarray(q, dtype=np.float64))
    return _softmax_neg(graph.unary + np.asarray(msg))


def gibbs_energy(graph: CrfGraph, labeling, params: CrfParams, pairwise=None) -> float:
    lab = np.asarray(labeling, dtype=np.int64)
    if lab.shape != (graph.size,):
        raise LengthMismatch(f"labeling has {lab.size} entries, graph has {graph.size} nodes")
    unary = float(graph.unary[np.arange(graph.size), lab].sum())
    if pairwise is None:
        pairwise = pairwise_matrix(graph, params)
    if sparse.issparse(pairwise):
        coo = sparse.triu(pairwise, k=1).tocoo()
        pair = float(np.sum(coo.data[lab[coo.row] != lab[coo.col]]))
    else:
        diff = lab[:, None] != lab[None, :]
        pair = float(np.sum(np.triu(pairwise * diff, k=1)))
    return unary + pair


def brute_force_map(graph: CrfGraph, params: CrfParams, limit: int = 10**7):
    """Exhaustive minimiser of the Gibbs energy (lexicographically first on ties)."""
    n, L = graph.size, graph.label_count
    if L**n > limit:
        raise TooLarge(f"{L}^{n} labelings exceeds {limit}")
    w = pairwise_matrix(graph, params, mode="exact")
    w = w.toarray() if sparse.issparse(w) else w
    iu, ju = np.triu_indices(n, k=1)
    wij = w[iu, ju]
    best_e, best_lab = math.inf, None
    chunk = 1 << 16
    it = itertools.product(range(L), repeat=n)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=np.int64).reshape(-1, n)
        if block.shape[0] == 0:
            break
        e = graph.unary[np.arange(n)[None, :], block].sum(axis=1)
        if iu.size:
            e = e + ((block[:, iu] != block[:, ju]) * wij).sum(axis=1)
        k = int(np.argmin(e))
        if e[k] < best_e:
            best_e, best_lab = float(e[k]), block[k].copy()
    return best_lab, best_e


@dataclass(eq=False)
class CrfResult:
    """Marginals computed on a snapshot, ready to be written back."""

    ids: np.ndarray
    marginals: np.ndarray
    report: InferenceReport


def infer(source, params: CrfParams | None = None, selection=None) -> CrfResult:
    """Mean-field inference on ``source`` without touching any map.

    Each iteration applies :func:`mean_field_step` to all nodes at once and
    mixes the result with the previous marginals by ``params.relax``.
    """
    params = params or CrfParams()
    if len(source) == 0:
        raise EmptyMap("cannot run inference on an empty map")
    t0 = time.perf_counter()

    ids = source.ids if selection is None else np.asarray(selection, dtype=np.int64)
    subsampled = False
    if ids.size > params.max_exact_nodes:
        rng = np.random.default_rng(params.seed)
        ids = np.sort(rng.choice(ids, size=params.max_exact_nodes, replace=False))
        subsampled = True
        logger.info("CRF restricted to %d of %d surfels", ids.size, source.ids.size)

    graph = build_graph(source, params, ids)
    mode = resolve_mode(graph, params)
    pairwise = pairwise_matrix(graph, params, mode)
    q0 = np.exp(-graph.unary)
    q = q0
    for _ in range(params.iterations):
        step = mean_field_step(graph, q, params, pairwise)
        q = step if params.relax == 1.0 else (1.0 - params.relax) * q + params.relax * step

    report = InferenceReport(
        nodes=graph.size,
        iterations=params.iterations,
        wall_time=0.0,
        energy_before=gibbs_energy(graph, np.argmax(q0, axis=1), params, pairwise),
        energy_after=gibbs_energy(graph, np.argmax(q, axis=1), params, pairwise),
        mode=mode,
        subsampled=subsampled,
    )
    report.wall_time = time.perf_counter() - t0
    return CrfResult(graph.ids, q, report)


def write_back(smap, result: CrfResult, blend: float = 1.0) -> int:
    """Replace (or blend into) stored distributions; returns how many ids had vanished."""
    alive = np.isin(result.ids, smap.ids)
    rows = smap.table.rows(result.ids[alive])
    mixed = (1.0 - blend) * smap.table.probs[rows] + blend * result.marginals[alive]
    smap.table.probs[rows] = normalize_rows(mixed)
    vanished = int((~alive).sum())
    result.report.vanished = vanished
    return vanished


def run_inference(smap, params: CrfParams | None = None, selection=None, snapshot=None) -> InferenceReport:
    """Regularise surfel distributions with mean-field inference.

    The graph is built from ``snapshot`` (or from ``smap`` itself) and the
    final marginals are written back into ``smap``; surfels removed since
    the snapshot are skipped and counted.
    """
    params = params or CrfParams()
    result = infer(smap if snapshot is None else snapshot, params, selection)
    t0 = time.perf_counter()
    write_back(smap, result, params.blend)
    result.report.wall_time += time.perf_counter() - t0
    return result.report
