"""Q-index sparse attention over a shared chunk cache plus a per-request exclusive page.

Only the rows listed in the Q index are computed: recomputed (critical) tokens of
the shared context and the new input tokens. The shared cache is read-only; stale
rows of critical tokens are skipped and their fresh K/V is read from the exclusive
page instead. Storage layout of one request::

    [ shared rows 0..n_shared-1 | exclusive slots (critical, then new tokens) ]

Visibility is decided by RoPE position values carried alongside every row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class QIndexPlan:
    n_shared: int
    critical: np.ndarray  # sorted shared rows to recompute
    n_new: int
    exclusive_page: dict = field(default=None)  # critical row -> slot

    def __post_init__(self) -> None:
        crit = np.asarray(self.critical, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "critical", crit)
        if self.exclusive_page is None:
            object.__setattr__(self, "exclusive_page", {int(c): i for i, c in enumerate(crit)})
        self.validate()

    @property
    def n_critical(self) -> int:
        return len(self.critical)

    @property
    def q_indices(self) -> np.ndarray:
        """Critical rows followed by the storage rows of the new tokens (strictly increasing)."""
        start = self.n_shared + self.n_critical
        return np.concatenate([self.critical, np.arange(start, start + self.n_new, dtype=np.int64)])

    @property
    def stale_positions(self) -> np.ndarray:
        return self.critical

    def validate(self) -> None:
        crit = self.critical
        if self.n_new < 0 or self.n_shared < 0:
            raise ValueError("negative sizes in plan")
        if len(crit) and (np.any(np.diff(crit) <= 0)):
            raise ValueError("critical rows must be strictly increasing")
        if len(crit) and (crit[0] < 0 or crit[-1] >= self.n_shared):
            raise ValueError("plan references rows beyond the shared cache")
        if set(self.exclusive_page) != set(int(c) for c in crit):
            raise ValueError("exclusive page keys must equal the critical rows")
        slots = list(self.exclusive_page.values())
        if len(set(slots)) != len(slots):
            raise ValueError("overlapping exclusive-page slots")
        if slots and (min(slots) < 0 or max(slots) >= self.n_critical):
            raise ValueError("exclusive-page slot out of range")


@dataclass
class ExclusivePage:
    """Fresh K/V for one request at one layer: ``n_critical + n_new`` slots."""

    k: np.ndarray
    v: np.ndarray
    positions: np.ndarray

    @classmethod
    def allocate(cls, plan: QIndexPlan, heads: int, head_dim: int) -> "ExclusivePage":
        n = plan.n_critical + plan.n_new
        return cls(np.zeros((n, heads, head_dim), np.float32), np.zeros((n, heads, head_dim), np.float32),
                   np.full(n, -1, np.int64))


@dataclass
class KernelStats:
    flops: int = 0
    calls: int = 0


def _slot_order(plan: QIndexPlan) -> np.ndarray:
    """Exclusive slot for each row of the Q index."""
    crit_slots = [plan.exclusive_page[int(c)] for c in plan.critical]
    new_slots = list(range(plan.n_critical, plan.n_critical + plan.n_new))
    return np.asarray(crit_slots + new_slots, dtype=np.int64)


def q_sparse_attn(q, k_new, v_new, shared_k, shared_v, shared_pos, q_positions, plan: QIndexPlan,
                  page: ExclusivePage, tile: int = 64, stats: KernelStats | None = None) -> np.ndarray:
    """Attention outputs for the Q-index rows; fresh K/V are written into ``page``.

    ``q``, ``k_new``, ``v_new``: (len(q_indices), heads, d), post-RoPE, in Q-index order.
    ``shared_k``/``shared_v``: (n_shared, heads, d); never written.
    """
    plan.validate()
    nq = plan.n_critical + plan.n_new
    if q.shape[0] != nq or k_new.shape[0] != nq or len(q_positions) != nq:
        raise ValueError("query rows do not match the plan")
    if shared_k.shape[0] != plan.n_shared or len(shared_pos) != plan.n_shared:
        raise ValueError("shared cache length does not match the plan")
    q_positions = np.asarray(q_positions, dtype=np.int64)
    shared_pos = np.asarray(shared_pos, dtype=np.int64)
    if plan.n_critical and not np.array_equal(q_positions[: plan.n_critical], shared_pos[plan.critical]):
        raise ValueError("critical tokens must keep their shared-cache positions")

    slots = _slot_order(plan)
    page.k[slots] = k_new
    page.v[slots] = v_new
    page.positions[slots] = q_positions

    keep = np.ones(plan.n_shared, dtype=bool)
    keep[plan.critical] = False
    keys = np.concatenate([shared_k[keep], page.k])
    vals = np.concatenate([shared_v[keep], page.v])
    kpos = np.concatenate([shared_pos[keep], page.positions])
    order = np.argsort(kpos, kind="stable")
    keys, vals, kpos = keys[order], vals[order], kpos[order]

    d = q.shape[-1]
    scale = np.float32(1.0 / np.sqrt(d))
    out = np.zeros_like(q, dtype=np.float32)
    qorder = np.argsort(q_positions, kind="stable")
    for start in range(0, nq, tile):
        rows = qorder[start:start + tile]
        qp = q_positions[rows]
        # keys sorted by position: only the prefix up to the tile's last query is ever visible
        n_vis = int(np.searchsorted(kpos, qp.max(), side="right"))
        if n_vis == 0:
            raise ValueError("query with no visible keys")
        kk, vv, kp = keys[:n_vis], vals[:n_vis], kpos[:n_vis]
        s = np.matmul(q[rows].transpose(1, 0, 2), kk.transpose(1, 2, 0)) * scale
        visible = kp[None, :] <= qp[:, None]
        if not visible.any(axis=1).all():
            raise ValueError("query with no visible keys")
        s = np.where(visible[None], s, np.float32(-np.inf))
        s -= s.max(axis=-1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=-1, keepdims=True)
        out[rows] = np.matmul(w, vv.transpose(1, 0, 2)).transpose(1, 0, 2)
        if stats is not None:
            stats.flops += 4 * len(rows) * n_vis * d * q.shape[1]
    if stats is not None:
        stats.calls += 1
    return out


def build_equivalent_mask(plan: QIndexPlan, shared_pos, q_positions) -> np.ndarray:
    """Dense mask over ``[shared rows | exclusive slots]`` with the kernel's visibility rules.

    Rows follow Q-index order. Used by tests as the dense-attention oracle.
    """
    shared_pos = np.asarray(shared_pos, dtype=np.int64)
    q_positions = np.asarray(q_positions, dtype=np.int64)
    nq = plan.n_critical + plan.n_new
    if nq == 0:
        return np.zeros((0, plan.n_shared + nq), dtype=bool)
    slot_pos = np.empty(nq, np.int64)
    slot_pos[_slot_order(plan)] = q_positions
    key_pos = np.concatenate([shared_pos, slot_pos])
    mask = key_pos[None, :] <= q_positions[:, None]
    mask[:, plan.critical] = False
    return mask
