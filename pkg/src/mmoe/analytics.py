"""Routing traces and the diagnostics computed from them.

A trace holds one record per (layer, token): the token's global position
in the probe set, its modality (0 text, 1 new modality) and the K selected
experts. Everything below is a pure function of a trace.

Trace file::

    b"RTRC"  u16 version  u16 N  u16 K  u16 n_layers  u32 meta_len  meta JSON
    records: u16 layer, u32 position, u8 modality, K x u16 experts (packed, LE)
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RTRC"
VERSION = 1


class TraceError(ValueError):
    pass


def _record_dtype(K: int) -> np.dtype:
    return np.dtype([("layer", "<u2"), ("position", "<u4"), ("modality", "u1"), ("experts", "<u2", (K,))])


@dataclass
class RoutingTrace:
    n_experts: int
    top_k: int
    n_layers: int
    layer: np.ndarray       # (R,)
    position: np.ndarray    # (R,)
    modality: np.ndarray    # (R,) 0 text, 1 new modality
    experts: np.ndarray     # (R, K)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer = np.asarray(self.layer, dtype=np.int64)
        self.position = np.asarray(self.position, dtype=np.int64)
        self.modality = np.asarray(self.modality, dtype=np.int64)
        self.experts = np.asarray(self.experts, dtype=np.int64).reshape(-1, self.top_k)
        R = len(self.layer)
        if not (len(self.position) == len(self.modality) == len(self.experts) == R):
            raise TraceError("trace columns have different lengths")
        if R:
            if self.experts.min() < 0 or self.experts.max() >= self.n_experts:
                raise TraceError(f"expert id outside [0, {self.n_experts})")
            srt = np.sort(self.experts, axis=1)
            if np.any(srt[:, 1:] == srt[:, :-1]):
                raise TraceError("a record selects the same expert twice")
            if self.layer.max() >= self.n_layers:
                raise TraceError(f"layer id outside [0, {self.n_layers})")

    def __len__(self) -> int:
        return len(self.layer)

    def select(self, layer: int, modality: int | None = None) -> np.ndarray:
        keep = self.layer == layer
        if modality is not None:
            keep &= self.modality == modality
        return self.experts[keep]


def save_trace(trace: RoutingTrace, path: str | Path) -> None:
    meta = json.dumps(trace.meta, sort_keys=True).encode("utf-8")
    rec = np.zeros(len(trace), dtype=_record_dtype(trace.top_k))
    rec["layer"], rec["position"], rec["modality"] = trace.layer, trace.position, trace.modality
    rec["experts"] = trace.experts
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HHHHI", VERSION, trace.n_experts, trace.top_k,
                                     trace.n_layers, len(meta)) + meta)
        fh.write(rec.tobytes())


def load_trace(path: str | Path) -> RoutingTrace:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TraceError(f"{path}: not a routing trace (bad magic)")
    version, N, K, L, mlen = struct.unpack("<HHHHI", raw[4:16])
    if version != VERSION:
        raise TraceError(f"{path}: unsupported trace version {version}")
    meta = json.loads(raw[16:16 + mlen].decode("utf-8"))
    body = raw[16 + mlen:]
    dt = _record_dtype(K)
    if len(body) % dt.itemsize:
        raise TraceError(f"{path}: truncated record section")
    rec = np.frombuffer(body, dtype=dt)
    return RoutingTrace(N, K, L, rec["layer"], rec["position"], rec["modality"], rec["experts"], meta)


def collect_trace(model, sequences, batch_size: int = 16, meta: dict | None = None) -> RoutingTrace:
    """Eval-mode routing of every token of ``sequences`` through every MoE layer."""
    from .model import LayerRouting, decoder_forward

    if not model.is_moe:
        raise TraceError("routing traces need an MoE model")
    Vt = model.config.vocab_text
    layers, positions, modality, experts = [], [], [], []
    offset = 0
    for start in range(0, len(sequences), batch_size):
        chunk = [np.asarray(s, dtype=np.int64) for s in sequences[start:start + batch_size]]
        L = max(len(s) for s in chunk)
        ids = np.zeros((len(chunk), L), dtype=np.int64)
        valid = np.zeros((len(chunk), L), dtype=bool)
        for r, s in enumerate(chunk):
            ids[r, :len(s)] = s
            valid[r, :len(s)] = True
        routing: list[LayerRouting] = []
        decoder_forward(model, ids, routing=routing, valid=valid)
        flat_valid = valid.reshape(-1)
        # global position of each valid token: running index in probe order
        global_pos = np.full(flat_valid.size, -1, dtype=np.int64)
        global_pos[flat_valid] = offset + np.arange(int(flat_valid.sum()))
        offset += int(flat_valid.sum())
        flat_ids = ids.reshape(-1)
        for lr in routing:
            layers.append(np.full(len(lr.token_index), lr.layer))
            positions.append(global_pos[lr.token_index])
            modality.append((flat_ids[lr.token_index] >= Vt).astype(np.int64))
            experts.append(lr.decision.experts)
    K = model.moe.top_k
    info = {"model_id": "", "dataset_id": "", "N": model.moe.n_experts, "K": K}
    info.update(meta or {})
    # records grouped by layer, then by position
    lay = np.concatenate(layers)
    pos = np.concatenate(positions)
    order = np.lexsort((pos, lay))
    return RoutingTrace(model.moe.n_experts, K, model.config.n_layers, lay[order], pos[order],
                        np.concatenate(modality)[order], np.concatenate(experts)[order], info)


# -- co-activation --------------------------------------------------------------

@dataclass
class ECAMatrix:
    layer: int
    eca: np.ndarray          # (N, N), NaN rows where undefined
    activations: np.ndarray  # N_{E_i}
    pairs: np.ndarray        # N_{E_i E_j} (symmetric, diagonal = N_{E_i})

    @property
    def defined(self) -> np.ndarray:
        return self.activations > 0


def expert_coactivation(trace: RoutingTrace, layer: int) -> ECAMatrix:
    """``ECA(i, j) = N_{E_i E_j} / N_{E_i}``, counted per token record."""
    if len(trace) == 0:
        raise TraceError("empty trace")
    sel = trace.select(layer)
    if len(sel) == 0:
        raise TraceError(f"trace has no records for layer {layer}")
    N = trace.n_experts
    onehot = np.zeros((len(sel), N), dtype=np.int64)
    np.put_along_axis(onehot, sel, 1, axis=1)
    pairs = onehot.T @ onehot
    act = np.diag(pairs).copy()
    eca = np.full((N, N), np.nan)
    rows = act > 0
    eca[rows] = pairs[rows] / act[rows, None]
    return ECAMatrix(layer, eca, act, pairs)


def average_layer_redundancy(eca: ECAMatrix) -> float:
    """Mean of the defined off-diagonal ECA entries.

    Because each record contributes ``K - 1`` partners to every expert it
    selects, a defined row always sums to ``(K - 1) N_i`` off the diagonal;
    this mean is therefore ``(K - 1) / (N - 1)`` for every trace.
    """
    N = eca.eca.shape[0]
    off = ~np.eye(N, dtype=bool)
    mask = off[eca.defined]
    vals = eca.eca[eca.defined][mask]
    return float(np.mean(vals)) if vals.size else float("nan")


def top_partner_redundancy(eca: ECAMatrix) -> float:
    """Mean over defined rows of the largest off-diagonal ECA (strongest partner)."""
    N = eca.eca.shape[0]
    m = eca.eca.copy()
    m[np.eye(N, dtype=bool)] = -np.inf
    rows = m[eca.defined]
    return float(np.mean(rows.max(axis=1))) if rows.size else float("nan")


def routing_preference_histogram(trace: RoutingTrace, layer: int, modality: int) -> np.ndarray:
    if len(trace) == 0:
        raise TraceError("empty trace")
    return np.bincount(trace.select(layer, modality).reshape(-1), minlength=trace.n_experts)


def top_m_experts(hist: np.ndarray, m: int) -> np.ndarray:
    """The ``m`` most-used experts; ties go to the lower index."""
    return np.argsort(-np.asarray(hist), kind="stable")[:m]


def exclusivity_score(hist_image: np.ndarray, hist_text: np.ndarray, top_m: int) -> float:
    """``1 - |top_m(image) & top_m(text)| / top_m``; 1 means disjoint pathways."""
    hist_image, hist_text = np.asarray(hist_image), np.asarray(hist_text)
    N = len(hist_image)
    if not 1 <= top_m <= N:
        raise ValueError(f"top_m={top_m} outside [1, {N}]")
    if hist_image.sum() == 0 or hist_text.sum() == 0:
        raise ValueError("both histograms must be nonzero")
    shared = set(top_m_experts(hist_image, top_m).tolist()) & set(top_m_experts(hist_text, top_m).tolist())
    return 1.0 - len(shared) / top_m


def layer_exclusivity(trace: RoutingTrace, top_m: int | None = None) -> list[float]:
    m = top_m or trace.top_k
    return [exclusivity_score(routing_preference_histogram(trace, l, 1),
                              routing_preference_histogram(trace, l, 0), m)
            for l in range(trace.n_layers)]


# -- reports ----------------------------------------------------------------------

@dataclass
class RedundancyRow:
    layer: int
    before: float
    after: float

    @property
    def delta(self) -> float:
        return self.after - self.before


def _check_compatible(a: RoutingTrace, b: RoutingTrace) -> None:
    if (a.n_experts, a.top_k) != (b.n_experts, b.top_k):
        raise TraceError(f"traces differ in N/K: {(a.n_experts, a.top_k)} vs {(b.n_experts, b.top_k)}")
    if a.n_layers != b.n_layers:
        raise TraceError(f"traces cover {a.n_layers} vs {b.n_layers} layers")


def redundancy_delta_report(before: RoutingTrace, after: RoutingTrace,
                            out_dir: str | Path | None = None,
                            statistic=average_layer_redundancy) -> list[RedundancyRow]:
    """Per-layer redundancy before and after; writes CSV and SVG when ``out_dir`` is set."""
    _check_compatible(before, after)
    rows = [RedundancyRow(l, statistic(expert_coactivation(before, l)),
                          statistic(expert_coactivation(after, l)))
            for l in range(before.n_layers)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "redundancy.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "before", "after", "delta"])
            for r in rows:
                w.writerow([r.layer, repr(r.before), repr(r.after), repr(r.delta)])
        line_chart_svg(out / "redundancy.svg", [r.layer for r in rows],
                       {"before": [r.before for r in rows], "after": [r.after for r in rows]},
                       xlabel="layer", ylabel="average ECA")
    return rows


def first_quartile_layers(n_layers: int) -> list[int]:
    return list(range(max(1, n_layers // 4)))


def write_eca_csv(trace: RoutingTrace, path: str | Path) -> None:
    """Rows ``layer,expert_i,expert_j,eca``; undefined rows are left out."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "expert_i", "expert_j", "eca"])
        for l in range(trace.n_layers):
            e = expert_coactivation(trace, l)
            for i in np.flatnonzero(e.defined):
                for j in range(trace.n_experts):
                    w.writerow([l, int(i), j, repr(float(e.eca[i, j]))])


def write_histogram_csv(trace: RoutingTrace, path: str | Path) -> None:
    """Rows ``layer,expert,modality,count`` with modality ``text`` or ``image``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "expert", "modality", "count"])
        for l in range(trace.n_layers):
            for mod, label in ((1, "image"), (0, "text")):
                h = routing_preference_histogram(trace, l, mod)
                for e, c in enumerate(h):
                    w.writerow([l, e, label, int(c)])


def line_chart_svg(path: str | Path, x, series: dict[str, list[float]], *,
                   xlabel: str = "", ylabel: str = "") -> None:
    """Small deterministic line chart (no timestamps, fixed element ids)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "mmoe", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for label, ys in series.items():
            ax.plot(x, ys, marker="o", label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def histogram_svg(path: str | Path, trace: RoutingTrace, layer: int) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    N = trace.n_experts
    with matplotlib.rc_context({"svg.hashsalt": "mmoe", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(2, 1, figsize=(5, 4), sharex=True)
        for ax, (mod, label) in zip(axes, ((1, "image"), (0, "text"))):
            ax.bar(np.arange(N), routing_preference_histogram(trace, layer, mod))
            ax.set_ylabel(f"{label} tokens")
        axes[-1].set_xlabel("expert")
        axes[0].set_title(f"layer {layer}")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
