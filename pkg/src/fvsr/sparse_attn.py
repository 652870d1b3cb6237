"""Block-sparse attention: (t, h, w) block partition, pooled coarse scoring, top-k
block selection, and exact attention over the selected block pairs.

The executor visits selected key blocks one at a time and merges them with a
running max / running sum (online softmax), so results do not depend on the
visitation order beyond float reassociation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRowError, DimensionError
from .grid import TokenGrid, as_positions
from .tensor_core import F32, as_mask, avg_pool_blocks

DEFAULT_BLOCK = (2, 8, 8)
# multiply-adds for q·k and α·v plus scale, exp and normalise, per token pair
FLOPS_PER_PAIR_EXTRA = 3


@dataclass(frozen=True)
class BlockPartition:
    """Assignment of tokens to non-overlapping (t, h, w) blocks.

    ``members[b]`` lists block ``b``'s token indices in token order, padded
    with ``-1`` up to ``tokens_per_block``; padded slots are the padding
    tokens and take part in no mask.
    """

    block_shape: tuple[int, int, int]
    assignment: np.ndarray  # [L] block id per real token
    members: np.ndarray  # [block_num × tokens_per_block]
    coords: np.ndarray  # [block_num × 3] block coordinates (t, h, w) // block_shape

    @property
    def tokens_per_block(self) -> int:
        return int(np.prod(self.block_shape))

    @property
    def block_num(self) -> int:
        return self.members.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.assignment.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.members >= 0

    @property
    def padded_len(self) -> int:
        return self.block_num * self.tokens_per_block

    @property
    def padding(self) -> int:
        return self.padded_len - self.n_tokens

    def block_frames(self) -> list[np.ndarray]:
        """Absolute frame indices covered by each block (from coords)."""
        bt = self.block_shape[0]
        return [np.arange(c * bt, (c + 1) * bt) for c in self.coords[:, 0]]


def partition_positions(positions, block_shape=DEFAULT_BLOCK) -> BlockPartition:
    """Partition arbitrary tokens by the block their (t, h, w) position falls into.

    Blocks are numbered in lexicographic order of their block coordinates.
    """
    pos = as_positions(positions)
    bs = np.asarray(block_shape, dtype=np.int64)
    if bs.shape != (3,) or (bs < 1).any():
        raise ValueError(f"invalid block shape {block_shape}")
    coords_tok = pos // bs
    coords, assignment = np.unique(coords_tok, axis=0, return_inverse=True)
    assignment = assignment.reshape(-1)
    tpb = int(bs.prod())
    counts = np.bincount(assignment, minlength=len(coords))
    if counts.max(initial=0) > tpb:
        raise ValueError("duplicate positions within a block")
    order = np.argsort(assignment, kind="stable")
    slot = np.arange(len(order)) - np.repeat(np.cumsum(counts) - counts, counts)
    members = np.full((len(coords), tpb), -1, dtype=np.int64)
    members[assignment[order], slot] = order
    return BlockPartition(tuple(int(b) for b in bs), assignment, members, coords)


def partition_blocks(grid: TokenGrid, block_shape=DEFAULT_BLOCK) -> BlockPartition:
    """Tile ``grid`` by ``block_shape``; ragged edges become flagged padding."""
    return partition_positions(grid.positions(), block_shape)


@dataclass
class SparsePlan:
    selected: list[np.ndarray]  # per query block, sorted key-block ids
    topk: int
    coarse_scores: np.ndarray  # [nq × nk] float32
    coarse_allowed: np.ndarray  # [nq × nk] bool
    pair_counts: np.ndarray  # [nq × nk] allowed token pairs per block pair
    q_part: BlockPartition
    k_part: BlockPartition
    head_dim: int
    diagonal: np.ndarray = field(default=None)  # [nq] own key block or -1

    @property
    def max_selected(self) -> int:
        return max((len(s) for s in self.selected), default=0)

    def selection_matrix(self) -> np.ndarray:
        """Padded ``[nq × max_selected]`` key-block ids, ``-1`` where a row is short."""
        out = np.full((len(self.selected), max(self.max_selected, 1)), -1, dtype=np.int64)
        for i, s in enumerate(self.selected):
            out[i, : len(s)] = s
        return out

    def selected_mask(self) -> np.ndarray:
        m = np.zeros(self.coarse_allowed.shape, dtype=bool)
        for i, s in enumerate(self.selected):
            m[i, s] = True
        return m

    def token_pair_mask(self) -> np.ndarray:
        """Token-level ``[Lq × Lk]`` indicator of pairs lying in a selected block pair."""
        sel = self.selected_mask()
        return sel[self.q_part.assignment[:, None], self.k_part.assignment[None, :]]

    def coarse_attention(self) -> np.ndarray:
        """Row softmax of the coarse scores over coarse-allowed key blocks (importance map)."""
        s = np.where(self.coarse_allowed, self.coarse_scores.astype(np.float64), -np.inf)
        mx = s.max(axis=1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.exp(s - mx)
        tot = e.sum(axis=1, keepdims=True)
        return (e / np.where(tot > 0, tot, 1.0)).astype(F32)


def block_pair_counts(mask, q_part: BlockPartition, k_part: BlockPartition) -> np.ndarray:
    """Number of allowed real token pairs per (query block, key block)."""
    qv = q_part.valid.sum(axis=1)
    kv = k_part.valid.sum(axis=1)
    if mask is None:
        return np.outer(qv, kv).astype(np.int64)
    mpad = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=bool)
    mpad[:-1, :-1] = mask
    qi = q_part.members.reshape(-1)
    ki = k_part.members.reshape(-1)
    qi = np.where(qi < 0, mask.shape[0], qi)
    ki = np.where(ki < 0, mask.shape[1], ki)
    sub = mpad[np.ix_(qi, ki)]
    nq, tq = q_part.members.shape
    nk, tk = k_part.members.shape
    row = sub.reshape(nq, tq, nk * tk).sum(axis=1, dtype=np.int64)
    return row.reshape(nq, nk, tk).sum(axis=2)


def select_blocks(coarse_scores, allowed, topk: int, diagonal=None) -> list[np.ndarray]:
    """Per row, the ``topk`` highest-scoring allowed columns.

    The diagonal column (when given, ``>= 0`` and allowed) is always chosen
    and counts toward ``topk``. Ties go to the lower column id. Rows with
    fewer allowed columns than ``topk`` saturate.
    """
    if topk < 1:
        raise ValueError("topk must be >= 1")
    scores = np.asarray(coarse_scores, dtype=np.float64)
    allowed = np.asarray(allowed, dtype=bool)
    out = []
    for i in range(scores.shape[0]):
        cand = np.flatnonzero(allowed[i])
        d = -1 if diagonal is None else int(diagonal[i])
        chosen = []
        if d >= 0 and allowed[i, d]:
            chosen.append(d)
            cand = cand[cand != d]
        # lexsort: last key is primary; descending score, then ascending id
        order = np.lexsort((cand, -scores[i, cand]))
        chosen.extend(cand[order[: max(topk - len(chosen), 0)]].tolist())
        out.append(np.sort(np.asarray(chosen, dtype=np.int64)))
    return out


def _diagonal(q_part: BlockPartition, k_part: BlockPartition) -> np.ndarray:
    lookup = {tuple(c): j for j, c in enumerate(k_part.coords.tolist())}
    return np.array([lookup.get(tuple(c), -1) for c in q_part.coords.tolist()], dtype=np.int64)


def plan_sparse(q, k, part: BlockPartition, mask=None, topk: int = 1, key_part: BlockPartition | None = None,
                scale: float | None = None) -> SparsePlan:
    """Pool q and k per block, score block pairs, and keep the top-k key blocks per query block.

    A block pair is coarse-allowed iff any of its token pairs is allowed by
    ``mask``; disallowed pairs are filtered out before selection.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    key_part = part if key_part is None else key_part
    if q.shape[0] != part.n_tokens or k.shape[0] != key_part.n_tokens or q.shape[1] != k.shape[1]:
        raise DimensionError(f"q {q.shape} / k {k.shape} inconsistent with partitions")
    mask = as_mask(mask, q.shape[0], k.shape[0])
    d = q.shape[1]
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    pq = avg_pool_blocks(q, part.assignment, part.block_num).astype(np.float64)
    pk = avg_pool_blocks(k, key_part.assignment, key_part.block_num).astype(np.float64)
    coarse = (pq @ pk.T) * scale
    counts = block_pair_counts(mask, part, key_part)
    allowed = counts > 0
    diag = _diagonal(part, key_part)
    selected = select_blocks(coarse, allowed, topk, diag)
    return SparsePlan(selected, topk, coarse.astype(F32), allowed, counts, part, key_part, d, diag)


def sparse_attention_exec(q, k, v, plan: SparsePlan, token_mask=None, scale: float | None = None,
                          slot_order=None, slot_chunk: int = 4) -> np.ndarray:
    """Exact attention restricted to the plan's block pairs and ``token_mask``.

    ``slot_order`` optionally permutes the visiting order of each query
    block's selected key blocks: either one permutation shared by all rows
    or a ``[nq × max_selected]`` array of per-row permutations. Key blocks
    are merged into the running softmax ``slot_chunk`` at a time.
    """
    q, k, v = (np.asarray(t, dtype=F32) for t in (q, k, v))
    qp, kp = plan.q_part, plan.k_part
    if q.shape[0] != qp.n_tokens or k.shape[0] != kp.n_tokens or v.shape[0] != k.shape[0]:
        raise DimensionError("inputs inconsistent with plan partitions")
    Lq, Lk, d = q.shape[0], k.shape[0], q.shape[1]
    mask = as_mask(token_mask, Lq, Lk)
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    scale = F32(scale)

    sel = plan.selection_matrix()
    if slot_order is not None:
        order = np.asarray(slot_order, dtype=np.int64)
        if order.ndim == 1:
            order = np.broadcast_to(order, sel.shape)
        sel = np.take_along_axis(sel, order, axis=1)

    qm = np.where(qp.members < 0, Lq, qp.members)
    # extra sentinel block of pure padding for short selection rows
    km_all = np.vstack([np.where(kp.members < 0, Lk, kp.members), np.full((1, kp.members.shape[1]), Lk)])
    q_pad = np.vstack([q, np.zeros((1, d), F32)])
    k_pad = np.vstack([k, np.zeros((1, d), F32)])
    v_pad = np.vstack([v, np.zeros((1, v.shape[1]), F32)])
    qg = q_pad[qm] * scale  # [nq, Tq, d], pre-scaled
    q_valid = qp.members >= 0

    no_padding = mask is None and q_valid.all() and (kp.members >= 0).all() and (sel >= 0).all()
    if mask is not None:
        mpad = np.zeros((Lq + 1, Lk + 1), dtype=bool)
        mpad[:Lq, :Lk] = mask

    nq, tq = qm.shape
    if slot_chunk < 1:
        raise ValueError("slot_chunk must be >= 1")
    k_blocks = np.ascontiguousarray(k_pad[km_all].transpose(0, 2, 1))  # [nk+1, d, tk]
    v_blocks = v_pad[km_all]  # [nk+1, tk, dv]
    tk = km_all.shape[1]
    run_max = np.full((nq, tq, 1), -np.inf, F32)
    run_sum = np.zeros((nq, tq, 1), F32)
    acc = np.zeros((nq, tq, v.shape[1]), F32)
    n_slots = sel.shape[1]
    buf = np.empty((nq, tq, min(slot_chunk, max(n_slots, 1)) * tk), F32)
    for s0 in range(0, n_slots, slot_chunk):
        slots = range(s0, min(s0 + slot_chunk, n_slots))
        scores = buf[:, :, : len(slots) * tk]
        for j, s in enumerate(slots):
            part = scores[:, :, j * tk : (j + 1) * tk]
            np.matmul(qg, k_blocks[sel[:, s]], out=part)  # sentinel block where sel == -1
            if not no_padding:
                kidx = km_all[sel[:, s]]
                if mask is None:
                    allowed = q_valid[:, :, None] & (kidx < Lk)[:, None, :]
                else:
                    allowed = mpad[qm[:, :, None], kidx[:, None, :]]
                part[~allowed] = -np.inf
        blk_max = scores.max(axis=2, keepdims=True)
        new_max = np.maximum(run_max, blk_max)
        safe = np.where(np.isneginf(new_max), F32(0), new_max)
        np.subtract(scores, safe, out=scores)
        np.exp(scores, out=scores)
        alpha = np.exp(run_max - safe)
        run_sum = run_sum * alpha + scores.sum(axis=2, keepdims=True)
        acc *= alpha
        for j, s in enumerate(slots):
            acc += np.matmul(scores[:, :, j * tk : (j + 1) * tk], v_blocks[sel[:, s]])
        run_max = new_max

    dead = q_valid & (run_sum[:, :, 0] <= 0)
    if dead.any():
        raise DegenerateRowError(np.sort(qm[dead]).tolist())
    out = np.empty((Lq, v.shape[1]), F32)
    res = acc / np.where(run_sum > 0, run_sum, F32(1))
    out[qm[q_valid]] = res[q_valid]
    return out


@dataclass(frozen=True)
class SparsityReport:
    density: float
    executed_flops: int
    dense_flops: int
    selected_pairs: int
    allowed_pairs: int

    @property
    def ratio(self) -> float:
        return self.executed_flops / self.dense_flops if self.dense_flops else 0.0


def flops_per_pair(head_dim: int) -> int:
    return 4 * head_dim + FLOPS_PER_PAIR_EXTRA


def sparsity_report(plan: SparsePlan) -> SparsityReport:
    """Block-pair density and exact executed vs dense-masked attention FLOPs."""
    sel = plan.selected_mask()
    allowed_pairs = int(plan.coarse_allowed.sum())
    selected_pairs = int(sel.sum())
    fpp = flops_per_pair(plan.head_dim)
    executed = int(plan.pair_counts[sel].sum()) * fpp
    dense = int(plan.pair_counts.sum()) * fpp
    density = selected_pairs / allowed_pairs if allowed_pairs else 0.0
    return SparsityReport(density, executed, dense, selected_pairs, allowed_pairs)


def topk_for_density(density: float, n_key_blocks: int) -> int:
    """Blocks per query row needed to reach ``density`` of an all-allowed block map."""
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    return max(1, math.ceil(density * n_key_blocks - 1e-9))


SPARSITY_CSV_COLUMNS = ("k", "density", "flop_ratio", "max_abs_err_vs_dense")


def sparsity_csv(rows) -> str:
    """Serialise ``(k, SparsityReport, max_abs_err)`` triples as CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPARSITY_CSV_COLUMNS)
    for k, rep, err in rows:
        w.writerow([k, f"{rep.density:.6f}", f"{rep.ratio:.6f}", f"{err:.3e}"])
    return buf.getvalue()
