"""Adapter bookkeeping across clients: assemble, aggregate, split, persist.

Every client owns the adapters for its lower layers while the server keeps
the matching upper-layer adapters, one set per client. Aggregation runs on
whole per-client adapter sets and averages the A and B factors separately,
weighted by local dataset size:

    A_bar_l = sum_u (n_u / n) A_l^u        (B likewise)

Averaging the factors is not the same as averaging the dense products
B @ A; the products of the mean factors generally differ from the mean of
the products, and tests pin that distinction. Summation always runs in
ascending client id order so the result is bit-identical no matter how the
caller ordered the views.

Checkpoints are JSON: a small header (layer count, hidden dim, rank) plus
row-major flattened A and B payloads per layer. Python's JSON float
round-trips exactly, so save/load is lossless.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from sflsim.model_core import LoraAdapter

__all__ = [
    "ClientAdapterView",
    "assemble_full",
    "aggregate",
    "split_adapters",
    "save_adapters",
    "load_adapters",
]

CHECKPOINT_FORMAT = "sflsim-adapters-v1"


@dataclass
class ClientAdapterView:
    """One client's adapter state: its own lower slice plus the server-held
    upper slice, and the local dataset size used as aggregation weight."""

    client_id: int
    cut: int
    client_side: list[LoraAdapter]
    server_side: list[LoraAdapter]
    data_size: int


def assemble_full(view: ClientAdapterView) -> list[LoraAdapter]:
    """Concatenate client and server slices into one ordered 1..N set.

    Raises if the two slices do not partition the layer range exactly.
    """
    merged = sorted(
        list(view.client_side) + list(view.server_side), key=lambda a: a.layer_index
    )
    layers = [a.layer_index for a in merged]
    if layers != list(range(1, len(merged) + 1)):
        raise ValueError(
            f"client {view.client_id}: slices cover layers {layers}, "
            f"expected 1..{len(merged)} exactly once"
        )
    client_layers = sorted(a.layer_index for a in view.client_side)
    if client_layers != list(range(1, view.cut + 1)):
        raise ValueError(
            f"client {view.client_id}: client slice {client_layers} does not "
            f"match cut {view.cut}"
        )
    return merged


def aggregate(views: list[ClientAdapterView]) -> list[LoraAdapter]:
    """Dataset-size-weighted mean of every client's full adapter set.

    A and B factors are averaged separately, layer by layer. Views are
    processed in ascending client id order regardless of input order.
    """
    if not views:
        raise ValueError("nothing to aggregate")
    ordered = sorted(views, key=lambda v: v.client_id)
    ids = [v.client_id for v in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in aggregation: {ids}")
    total = float(sum(v.data_size for v in ordered))
    if total <= 0:
        raise ValueError("total data size must be positive")

    fulls = [assemble_full(v) for v in ordered]
    n_layers = len(fulls[0])
    shapes = [(a.A.shape, a.B.shape) for a in fulls[0]]
    for v, full in zip(ordered, fulls):
        if len(full) != n_layers or [(a.A.shape, a.B.shape) for a in full] != shapes:
            raise ValueError(f"client {v.client_id}: adapter shapes differ")

    out: list[LoraAdapter] = []
    for l in range(n_layers):
        a_sum = np.zeros_like(fulls[0][l].A)
        b_sum = np.zeros_like(fulls[0][l].B)
        for v, full in zip(ordered, fulls):
            w = v.data_size / total
            a_sum += w * full[l].A
            b_sum += w * full[l].B
        out.append(LoraAdapter(layer_index=l + 1, A=a_sum, B=b_sum))
    return out


def split_adapters(
    full: list[LoraAdapter], cut: int
) -> tuple[list[LoraAdapter], list[LoraAdapter]]:
    """Copy a full set into (layers 1..cut, layers cut+1..N).

    Copies keep post-split training on one side from aliasing the other,
    and let several clients be re-seeded from one aggregated set.
    """
    n = len(full)
    if not 0 <= cut <= n:
        raise ValueError(f"cut {cut} outside 0..{n}")
    layers = sorted(a.layer_index for a in full)
    if layers != list(range(1, n + 1)):
        raise ValueError(f"full set covers layers {layers}, expected 1..{n}")
    ordered = sorted(full, key=lambda a: a.layer_index)
    client = [
        LoraAdapter(a.layer_index, a.A.copy(), a.B.copy())
        for a in ordered[:cut]
    ]
    server = [
        LoraAdapter(a.layer_index, a.A.copy(), a.B.copy())
        for a in ordered[cut:]
    ]
    return client, server


def save_adapters(path: str, adapters: list[LoraAdapter]) -> None:
    """Write a full adapter set as a JSON checkpoint (atomic replace)."""
    ordered = sorted(adapters, key=lambda a: a.layer_index)
    if not ordered:
        raise ValueError("empty adapter set")
    r, m = ordered[0].A.shape
    doc = {
        "format": CHECKPOINT_FORMAT,
        "num_layers": len(ordered),
        "hidden_dim": m,
        "rank": r,
        "layers": [
            {
                "layer": a.layer_index,
                "A": a.A.ravel(order="C").tolist(),
                "B": a.B.ravel(order="C").tolist(),
            }
            for a in ordered
        ],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, sort_keys=True)
    os.replace(tmp, path)


def load_adapters(path: str) -> list[LoraAdapter]:
    """Read a checkpoint back; validates header against payload shapes."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format: {doc.get('format')!r}")
    n, m, r = doc["num_layers"], doc["hidden_dim"], doc["rank"]
    if len(doc["layers"]) != n:
        raise ValueError(f"header says {n} layers, payload has {len(doc['layers'])}")
    adapters = []
    for entry in doc["layers"]:
        a_flat = np.asarray(entry["A"], dtype=np.float64)
        b_flat = np.asarray(entry["B"], dtype=np.float64)
        if a_flat.size != r * m or b_flat.size != m * r:
            raise ValueError(
                f"layer {entry['layer']}: payload size does not match "
                f"rank {r} x hidden {m}"
            )
        adapters.append(
            LoraAdapter(
                layer_index=int(entry["layer"]),
                A=a_flat.reshape(r, m),
                B=b_flat.reshape(m, r),
            )
        )
    layers = [a.layer_index for a in adapters]
    if sorted(layers) != list(range(1, n + 1)):
        raise ValueError(f"checkpoint covers layers {layers}, expected 1..{n}")
    return sorted(adapters, key=lambda a: a.layer_index)
