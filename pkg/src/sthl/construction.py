"""Learnable hyperedge construction.

Every channel at the current timestamp is a master node. Its spatial
hyperedge draws slaves from the other current-timestamp channels; its
temporal hyperedge draws from all previous-timestamp channels. A candidate
becomes a slave when its learned reconstruction coefficient is strictly
positive.

Node layout in a snapshot: rows ``0..N-1`` are channels at ``t``, rows
``N..2N-1`` channels at ``t-1``. Edge layout: columns ``0..N-1`` are the
spatial edges of masters ``0..N-1``, columns ``N..2N-1`` their temporal edges.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SPATIAL = "spatial"
TEMPORAL = "temporal"
DEFAULT_LAMBDA = 0.01
DEFAULT_GAMMA = 0.2


@dataclass
class ConstructionParams:
    theta_spa: np.ndarray  # (d, d)
    theta_tem: np.ndarray  # (d, d)
    p_spa: np.ndarray  # (N, N-1), row i over spatial_candidates(i, N)
    p_tem: np.ndarray  # (N, N), row i over all previous channels

    @property
    def N(self):
        return self.p_tem.shape[0]

    @property
    def d(self):
        return self.theta_spa.shape[0]

    def check(self, N=None, d=None):
        N = self.N if N is None else N
        d = self.d if d is None else d
        expect = {"theta_spa": (d, d), "theta_tem": (d, d),
                  "p_spa": (N, N - 1), "p_tem": (N, N)}
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")


@dataclass(frozen=True)
class NodeId:
    step: str  # "t" or "t-1"
    channel: int

    def __str__(self):
        return f"{self.step}:{self.channel}"


@dataclass
class Hyperedge:
    kind: str
    master: NodeId
    slaves: list  # [(NodeId, coefficient)]

    @property
    def name(self):
        return f"{self.kind[:3]}:{self.master.channel}"


@dataclass
class HypergraphSnapshot:
    nodes: list
    edges: list
    incidence: np.ndarray  # (2N, 2N), row = node, column = edge

    @property
    def N(self):
        return len(self.nodes) // 2

    def node_index(self, node):
        return node.channel if node.step == "t" else self.N + node.channel

    def edge_index(self, kind, master_channel):
        return master_channel if kind == SPATIAL else self.N + master_channel


def spatial_candidates(master_channel, N):
    if not 0 <= master_channel < N:
        raise IndexError(f"master channel {master_channel} out of range for N={N}")
    return [j for j in range(N) if j != master_channel]


@lru_cache(maxsize=None)
def candidate_table(N):
    """(N, N-1) int64 table; row i lists ``spatial_candidates(i, N)``."""
    table = np.array([spatial_candidates(i, N) for i in range(N)], dtype=np.int64)
    table = table.reshape(N, N - 1)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def temporal_table(N):
    table = np.tile(np.arange(N, dtype=np.int64), (N, 1))
    table.setflags(write=False)
    return table


def reconstruction_error(master_feat, candidate_feats, theta, p):
    """``|| master_feat @ theta - p @ candidate_feats ||_2``."""
    master_feat = np.asarray(master_feat, dtype=np.float64)
    candidate_feats = np.asarray(candidate_feats, dtype=np.float64).reshape(len(p), -1)
    theta = np.asarray(theta, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if theta.shape != (master_feat.shape[0], master_feat.shape[0]):
        raise ValueError(f"theta shape {theta.shape} incompatible with d={master_feat.shape[0]}")
    if candidate_feats.shape[1] != master_feat.shape[0]:
        raise ValueError(
            f"candidate features have width {candidate_feats.shape[1]}, "
            f"master has {master_feat.shape[0]}")
    return float(np.linalg.norm(master_feat @ theta - p @ candidate_feats))


def select_slaves(candidates, p_row):
    if len(candidates) != len(p_row):
        raise ValueError(f"{len(candidates)} candidates but {len(p_row)} coefficients")
    return [(c, float(w)) for c, w in zip(candidates, p_row) if w > 0]


def incidence_matrix(p_spa, p_tem):
    """Dense 2N x 2N incidence built from the coefficient banks alone.

    The coefficients are shared across timestamps, so every sample sees the
    same incidence matrix.
    """
    N = p_tem.shape[0]
    cand = candidate_table(N)
    H = np.zeros((2 * N, 2 * N))
    rows = np.arange(N)
    H[rows, rows] = 1.0
    H[rows, N + rows] = 1.0
    gs = np.where(p_spa > 0, p_spa, 0.0)
    gt = np.where(p_tem > 0, p_tem, 0.0)
    H[cand, rows[:, None]] = gs
    H[N:, N:] += gt.T
    return H


def incidence_backward(dH, p_spa, p_tem):
    """Map an incidence gradient back onto the coefficients that populate it.

    Unselected coefficients (<= 0) receive nothing from this path.
    """
    N = p_tem.shape[0]
    cand = candidate_table(N)
    rows = np.arange(N)
    dps = np.where(p_spa > 0, dH[cand, rows[:, None]], 0.0)
    dpt = np.where(p_tem > 0, dH[N:, N:].T, 0.0)
    return dps, dpt


def build_snapshot(pair, params):
    N, d = pair.current.shape
    params.check(N, d)
    nodes = [NodeId("t", i) for i in range(N)] + [NodeId("t-1", i) for i in range(N)]
    spa, tem = [], []
    for i in range(N):
        cands = [NodeId("t", j) for j in spatial_candidates(i, N)]
        spa.append(Hyperedge(SPATIAL, nodes[i], select_slaves(cands, params.p_spa[i])))
        prev = [NodeId("t-1", j) for j in range(N)]
        tem.append(Hyperedge(TEMPORAL, nodes[i], select_slaves(prev, params.p_tem[i])))
    return HypergraphSnapshot(nodes, spa + tem, incidence_matrix(params.p_spa, params.p_tem))


def coefficient_regularizer(p_spa, p_tem, gamma):
    return float(np.abs(p_spa).sum() + np.abs(p_tem).sum()
                 + gamma * (np.linalg.norm(p_spa, axis=1).sum()
                            + np.linalg.norm(p_tem, axis=1).sum()))


def reconstruction_loss(pair, params, lam=DEFAULT_LAMBDA, gamma=DEFAULT_GAMMA):
    """Per-timestamp construction loss: weighted reconstruction errors plus
    l1 and gamma-weighted l2 penalties on every coefficient row."""
    if lam < 0 or gamma < 0:
        raise ValueError("lambda and gamma must be nonnegative")
    X, Xp = pair.current, pair.previous
    N, d = X.shape
    params.check(N, d)
    total = 0.0
    for i in range(N):
        cands = spatial_candidates(i, N)
        c_spa = reconstruction_error(X[i], X[cands], params.theta_spa, params.p_spa[i])
        c_tem = reconstruction_error(X[i], Xp, params.theta_tem, params.p_tem[i])
        total += lam * (c_spa + c_tem)
    return total + coefficient_regularizer(params.p_spa, params.p_tem, gamma)


def incidence_csv_rows(snapshot):
    """Header plus one row per node, for the debug dump."""
    header = ["node"] + [e.name for e in snapshot.edges]
    rows = [[str(n)] + [repr(float(v)) for v in snapshot.incidence[k]]
            for k, n in enumerate(snapshot.nodes)]
    return [header] + rows
