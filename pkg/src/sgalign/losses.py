"""Contrastive (ICL), distillation (IAL) and uncertainty-weighted total loss."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics.layers import Module, param
from .scenegraph import MODALITIES

TEMPERATURE = 0.1


class UncertaintyParams(Module):
    """Log-variances: row 0 for the per-modality ICL terms, row 1 for IAL."""

    def __init__(self, n_modalities: int = len(MODALITIES)):
        self.log_var = param(np.zeros((2, n_modalities)))

    def __len__(self) -> int:
        return self.log_var.size


def _check_pairs(a, b, what: str) -> None:
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"{what}: expected equal (m, D) inputs, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ValueError(f"{what}: need at least 2 pairs for in-batch negatives, got {a.shape[0]}")


def _diag_ce(logits: nx.Tensor) -> nx.Tensor:
    m = logits.shape[0]
    ls = nx.log_softmax(logits, axis=1)
    return -nx.mean_reduce(nx.index(ls, (np.arange(m), np.arange(m))))


def icl_loss(anchors, positives, temperature: float = TEMPERATURE) -> nx.Tensor:
    """Symmetric InfoNCE with in-batch negatives."""
    a, p = nx.as_tensor(anchors), nx.as_tensor(positives)
    _check_pairs(a, p, "icl_loss")
    logits = nx.matmul(a, nx.transpose(p)) * (1.0 / temperature)
    return (_diag_ce(logits) + _diag_ce(nx.transpose(logits))) * 0.5


def _row_kl(teacher_logits: nx.Tensor, student_logits: nx.Tensor) -> nx.Tensor:
    lp = nx.log_softmax(teacher_logits, axis=1)
    lq = nx.log_softmax(student_logits, axis=1)
    kl = nx.sum_reduce(nx.exp(lp) * (lp - lq), axis=1)
    return nx.mean_reduce(kl)


def ial_loss(
    joint_a,
    joint_b,
    uni_a,
    uni_b,
    temperature_joint: float = TEMPERATURE,
    temperature_uni: float = TEMPERATURE,
) -> nx.Tensor:
    """KL from the joint similarity distribution to the unimodal one, both directions.

    The teacher side is not detached, so the joint embeddings also move
    toward each modality's similarity structure.
    """
    ja, jb, ua, ub = (nx.as_tensor(x) for x in (joint_a, joint_b, uni_a, uni_b))
    _check_pairs(ja, jb, "ial_loss")
    _check_pairs(ua, ub, "ial_loss")
    if ja.shape[0] != ua.shape[0]:
        raise ValueError(f"ial_loss: {ja.shape[0]} joint pairs vs {ua.shape[0]} unimodal pairs")
    j = nx.matmul(ja, nx.transpose(jb)) * (1.0 / temperature_joint)
    u = nx.matmul(ua, nx.transpose(ub)) * (1.0 / temperature_uni)
    return (_row_kl(j, u) + _row_kl(nx.transpose(j), nx.transpose(u))) * 0.5


@dataclass
class Batch:
    """Matched node pairs gathered from the forward pass of both scene sides.

    ``uni_a``/``uni_b`` are (m, K, D) with zero rows for absent modalities and
    ``present[i, k]`` is true iff modality k exists on both sides of pair i.
    """

    joint_a: nx.Tensor
    joint_b: nx.Tensor
    uni_a: nx.Tensor
    uni_b: nx.Tensor
    present: np.ndarray

    def __len__(self) -> int:
        return self.joint_a.shape[0]

    @classmethod
    def gather(cls, out_a, out_b, rows_a, rows_b) -> "Batch":
        """Build from two ForwardOutputs and aligned row indices."""
        rows_a, rows_b = np.asarray(rows_a, dtype=int), np.asarray(rows_b, dtype=int)
        return cls(
            joint_a=nx.take_rows(out_a.joint, rows_a),
            joint_b=nx.take_rows(out_b.joint, rows_b),
            uni_a=nx.take_rows(out_a.stacked, rows_a),
            uni_b=nx.take_rows(out_b.stacked, rows_b),
            present=out_a.mask[rows_a] & out_b.mask[rows_b],
        )


@dataclass(frozen=True)
class LossTerm:
    name: str
    raw: float
    weight: float
    weighted: float


def total_loss(
    batch: Batch,
    uncertainty: UncertaintyParams,
    temperature: float = TEMPERATURE,
) -> tuple[nx.Tensor, list[LossTerm]]:
    if len(batch) == 0:
        raise ValueError("total_loss: empty batch")
    base = icl_loss(batch.joint_a, batch.joint_b, temperature)
    terms = [LossTerm("icl_joint", base.item(), 1.0, base.item())]
    total = base
    for k in MODALITIES:
        rows = np.flatnonzero(batch.present[:, k])
        if len(rows) < 2:
            continue
        ua = nx.index(batch.uni_a, (rows, int(k)))
        ub = nx.index(batch.uni_b, (rows, int(k)))
        ja = nx.take_rows(batch.joint_a, rows)
        jb = nx.take_rows(batch.joint_b, rows)
        for r, (name, raw) in enumerate((
            ("icl", icl_loss(ua, ub, temperature)),
            ("ial", ial_loss(ja, jb, ua, ub, temperature, temperature)),
        )):
            s = nx.index(uncertainty.log_var, (r, int(k)))
            w = nx.exp(-s) * 0.5
            term = w * raw + s * 0.5
            total = total + term
            terms.append(LossTerm(f"{name}_{k.name}", raw.item(), w.item(), term.item()))
    return total, terms


REPORT_HEADER = ["epoch", "term", "raw", "weight", "weighted"]


def write_loss_report(path: str | Path, rows: list[tuple[int, LossTerm]]) -> None:
    """Per-epoch loss breakdown; ``rows`` are (epoch, mean term over the epoch)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for epoch, t in rows:
            w.writerow([epoch, t.name, f"{t.raw:.6f}", f"{t.weight:.6f}", f"{t.weighted:.6f}"])


def average_terms(history: list[list[LossTerm]]) -> list[LossTerm]:
    """Mean of each named term across steps (terms missing from a step are skipped)."""
    acc: dict[str, list[LossTerm]] = {}
    for step in history:
        for t in step:
            acc.setdefault(t.name, []).append(t)
    out = []
    for name, ts in acc.items():
        out.append(LossTerm(name, float(np.mean([t.raw for t in ts])), float(np.mean([t.weight for t in ts])),
                            float(np.mean([t.weighted for t in ts]))))
    return out
