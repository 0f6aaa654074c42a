"""Collaborative item embeddings from the interaction graph.

The model propagates free user/item embeddings over the symmetrically
normalized user-item bipartite adjacency (entries 1/sqrt(deg_u * deg_i)),
with no feature transform and no nonlinearity, and averages the layer
outputs.  Training minimizes the pairwise ranking loss

    mean over (u, i+, i-) of  -log sigmoid(<e_u, e_i+> - <e_u, e_i->)

plus an L2 term on the free (layer-0) embeddings of the triple, by plain SGD
on hand-computed gradients.  Because the propagation operator is linear and
symmetric, the gradient with respect to the free embeddings is the same
operator applied to the gradient at the propagated output.

Everything is seeded and single-threaded, so a fixed config reproduces
bit-identical embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .corpus import InteractionLog
from .errors import ContractError, TrainingError


class BipartiteGraph:
    """Normalized adjacency over user rows [0, n_users) and item rows after."""

    def __init__(self, adjacency: sp.csr_matrix, user_degrees: np.ndarray,
                 item_degrees: np.ndarray):
        self.adjacency = adjacency
        self.user_degrees = user_degrees
        self.item_degrees = item_degrees
        self.n_users = len(user_degrees)
        self.n_items = len(item_degrees)

    @staticmethod
    def from_log(log: InteractionLog) -> "BipartiteGraph":
        """Build the graph from the distinct (user, item) pairs of a log."""
        if log.n_interactions == 0:
            raise ContractError("cannot build a graph from an empty log")
        pairs = sorted({(log.user_index[i.user_id], log.item_index[i.item_id])
                        for i in log.interactions})
        users = np.array([p[0] for p in pairs], dtype=np.int64)
        items = np.array([p[1] for p in pairs], dtype=np.int64)
        deg_u = np.bincount(users, minlength=log.n_users).astype(np.float64)
        deg_i = np.bincount(items, minlength=log.n_items).astype(np.float64)
        if np.any(deg_u == 0) or np.any(deg_i == 0):
            raise ContractError("graph has zero-degree nodes")
        weights = 1.0 / np.sqrt(deg_u[users] * deg_i[items])
        n = log.n_users + log.n_items
        rows = np.concatenate([users, log.n_users + items])
        cols = np.concatenate([log.n_users + items, users])
        data = np.concatenate([weights, weights])
        adjacency = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
        return BipartiteGraph(adjacency, deg_u, deg_i)


def propagate(emb0: np.ndarray, graph: BipartiteGraph, layers: int) -> np.ndarray:
    """Mean over layers 0..L of repeated multiplication by the adjacency."""
    if layers < 0:
        raise ContractError(f"layers must be >= 0, got {layers}")
    n = graph.n_users + graph.n_items
    if emb0.shape[0] != n:
        raise ContractError(f"embedding rows {emb0.shape[0]} != graph nodes {n}")
    acc = emb0.astype(np.float64, copy=True)
    current = acc.copy()
    for _ in range(layers):
        current = graph.adjacency @ current
        acc += current
    return acc / (layers + 1)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bpr_loss_and_grad(
    emb0: np.ndarray,
    users: np.ndarray,
    pos_items: np.ndarray,
    neg_items: np.ndarray,
    n_users: int,
    reg: float = 0.0,
    propagator: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[float, np.ndarray]:
    """Loss and gradient w.r.t. the free embeddings for one triple batch.

    ``propagator``, when given, must be a linear symmetric operator (the
    layer-averaged propagation is); scores are taken on its output and the
    chain rule reduces to applying it once more to the output gradient.  The
    L2 term regularizes the free embeddings of each triple row, counted with
    multiplicity, scaled by reg / (2B).
    """
    users = np.asarray(users, dtype=np.int64)
    pos_rows = n_users + np.asarray(pos_items, dtype=np.int64)
    neg_rows = n_users + np.asarray(neg_items, dtype=np.int64)
    batch = len(users)
    if batch == 0:
        raise ContractError("empty triple batch")
    final = propagator(emb0) if propagator is not None else emb0
    e_u = final[users]
    e_p = final[pos_rows]
    e_n = final[neg_rows]
    margin = np.sum(e_u * (e_p - e_n), axis=1)
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    coeff = -_sigmoid(-margin) / batch
    grad_final = np.zeros_like(final)
    np.add.at(grad_final, users, coeff[:, None] * (e_p - e_n))
    np.add.at(grad_final, pos_rows, coeff[:, None] * e_u)
    np.add.at(grad_final, neg_rows, -coeff[:, None] * e_u)
    grad = propagator(grad_final) if propagator is not None else grad_final
    if reg:
        all_rows = np.concatenate([users, pos_rows, neg_rows])
        loss += reg * float(np.sum(emb0[all_rows] ** 2)) / (2 * batch)
        np.add.at(grad, all_rows, (reg / batch) * emb0[all_rows])
    return loss, grad


def bpr_step(
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    emb0: np.ndarray,
    n_users: int,
    lr: float,
    reg: float = 0.0,
    propagator: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, float]:
    """Apply one SGD step on a (users, pos_items, neg_items) batch."""
    if lr <= 0:
        raise ContractError(f"lr must be > 0, got {lr}")
    users, pos_items, neg_items = batch
    loss, grad = bpr_loss_and_grad(emb0, users, pos_items, neg_items, n_users,
                                   reg=reg, propagator=propagator)
    return emb0 - lr * grad, loss


@dataclass(frozen=True)
class CollaTrainConfig:
    dim: int = 64
    layers: int = 2
    lr: float = 1e-3
    reg: float = 1e-4
    epochs: int = 50
    batch_size: int = 1024
    neg_per_pos: int = 1
    seed: int = 0
    init_std: float = 0.01
    optimizer: str = "sgd"  # or "adam"


@dataclass
class CollaEmbeddings:
    user_matrix: np.ndarray
    item_matrix: np.ndarray
    layers: int
    metadata: dict = field(default_factory=dict)


def _sample_negatives(rng: np.random.Generator, users: np.ndarray,
                      interacted: list[set[int]], n_items: int) -> np.ndarray:
    negs = np.empty(len(users), dtype=np.int64)
    for idx, u in enumerate(users):
        forbidden = interacted[u]
        while True:
            cand = int(rng.integers(0, n_items))
            if cand not in forbidden:
                negs[idx] = cand
                break
    return negs


def train_lightgcn(log: InteractionLog, config: CollaTrainConfig) -> CollaEmbeddings:
    """Train free embeddings with BPR over propagated scores.

    Deterministic for a fixed seed.  With epochs=0 the propagated random
    initialization is returned unchanged.  Raises TrainingError naming the
    epoch if the loss goes non-finite.
    """
    graph = BipartiteGraph.from_log(log)
    n_users, n_items = graph.n_users, graph.n_items
    rng = np.random.default_rng(config.seed)
    emb0 = rng.normal(0.0, config.init_std, size=(n_users + n_items, config.dim))

    pairs = sorted({(log.user_index[i.user_id], log.item_index[i.item_id])
                    for i in log.interactions})
    edge_users = np.array([p[0] for p in pairs], dtype=np.int64)
    edge_items = np.array([p[1] for p in pairs], dtype=np.int64)
    interacted: list[set[int]] = [set() for _ in range(n_users)]
    for u, i in pairs:
        interacted[u].add(i)
    if np.all([len(s) >= n_items for s in interacted]) and config.epochs > 0:
        raise ContractError("every user interacted with every item; no negatives exist")

    def propagator(matrix: np.ndarray) -> np.ndarray:
        return propagate(matrix, graph, config.layers)

    adam_m = np.zeros_like(emb0)
    adam_v = np.zeros_like(emb0)
    adam_t = 0

    loss_per_epoch: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        epoch_losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            users = np.repeat(edge_users[chunk], config.neg_per_pos)
            pos = np.repeat(edge_items[chunk], config.neg_per_pos)
            neg = _sample_negatives(rng, users, interacted, n_items)
            loss, grad = bpr_loss_and_grad(emb0, users, pos, neg, n_users,
                                           reg=config.reg, propagator=propagator)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            if config.optimizer == "adam":
                adam_t += 1
                adam_m = 0.9 * adam_m + 0.1 * grad
                adam_v = 0.999 * adam_v + 0.001 * grad**2
                m_hat = adam_m / (1 - 0.9**adam_t)
                v_hat = adam_v / (1 - 0.999**adam_t)
                emb0 -= config.lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            else:
                emb0 -= config.lr * grad
            epoch_losses.append(loss)
        loss_per_epoch.append(float(np.mean(epoch_losses)))

    final = propagate(emb0, graph, config.layers)
    metadata = {
        "seed": config.seed,
        "epochs": config.epochs,
        "final_loss": loss_per_epoch[-1] if loss_per_epoch else None,
        "loss_per_epoch": loss_per_epoch,
    }
    return CollaEmbeddings(
        user_matrix=final[:n_users],
        item_matrix=final[n_users:],
        layers=config.layers,
        metadata=metadata,
    )
