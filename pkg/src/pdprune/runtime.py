"""Two-node prefill/decode execution with a real KV transfer between them.

The prefill node runs the prompt through its view with the full cache and
ships a manifest (see :mod:`pdprune.wire`) holding only what the decode view
needs. The decode node checks the manifest against its own view and decodes
greedily, appending its own entries unpruned. :func:`reference_unified_run`
does the same work in one process with no serialization; both paths must
produce identical transcripts.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError
from .kvprune import KVSelectionPlan, retention_indices
from .model import KVCache, TransformerModel, decode_step, forward_prefill, softmax
from .plan import StagePlan, as_stage_plan, stage_views
from .wire import build_manifest, decode_manifest, encode_manifest

log = logging.getLogger(__name__)

_ENVELOPE = struct.Struct("<IQ")   # first token, manifest length


@dataclass
class PrefillResult:
    manifest: bytes
    first_token: int
    N: int
    prefill_seconds: float = 0.0


@dataclass
class RunResult:
    transcript: list[int]
    manifest: bytes = b""
    received: bytes = b""
    timings: dict = field(default_factory=dict)

    @property
    def payload_bytes(self) -> int:
        return decode_manifest(self.manifest).payload_bytes if self.manifest else 0


def run_prefill_node(prefill_view: TransformerModel, decode_view: TransformerModel, prompt,
                     kv_plan: KVSelectionPlan | None = None, dtype=None) -> PrefillResult:
    """Prefill ``prompt`` with the full cache and build the transfer manifest.

    Pruning happens only when the manifest is built, so prefill attention
    itself is never affected by the KV plan.
    """
    prompt = np.asarray(prompt)
    if prompt.ndim != 1 or prompt.size < 2:
        raise ValueError("prompt must be a 1-D sequence of at least 2 tokens")
    t0 = time.perf_counter()
    out = forward_prefill(prefill_view, prompt)
    first = int(np.argmax(out.logits[-1]))
    man = build_manifest(out.kv, kv_plan, model_hash=decode_view.fingerprint(), dtype=dtype,
                         decode_layers=decode_view.layer_ids)
    return PrefillResult(encode_manifest(man), first, len(prompt), time.perf_counter() - t0)


def load_manifest_for(decode_view: TransformerModel, manifest: bytes) -> KVCache:
    """Decode ``manifest`` and check it belongs to ``decode_view``."""
    man = decode_manifest(manifest)
    if man.model_hash != decode_view.fingerprint():
        raise ConsistencyError("manifest was produced for a different decode view")
    ids = [layer.layer_id for layer in man.layers]
    if sorted(ids) != sorted(decode_view.layer_ids):
        raise ConsistencyError(f"manifest layers {ids} do not match decode layers {list(decode_view.layer_ids)}")
    return man.to_cache(decode_view.config.np_dtype)


def decode_loop(decode_view: TransformerModel, kv: KVCache, first_token: int, steps: int,
                temperature: float = 0.0, rng: np.random.Generator | None = None) -> list[int]:
    """Greedy by default; ``temperature > 0`` samples (never used for verification)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if kv.next_position + steps - 1 > decode_view.config.max_seq:
        raise ValueError("decoding would exceed max_seq")
    token = int(first_token)
    transcript = [token]
    for _ in range(steps - 1):
        logits, kv = decode_step(decode_view, token, kv)
        if temperature > 0:
            rng = rng if rng is not None else np.random.default_rng(0)
            token = int(rng.choice(len(logits), p=softmax(logits / temperature)))
        else:
            token = int(np.argmax(logits))
        transcript.append(token)
    return transcript


def run_decode_node(decode_view: TransformerModel, manifest: bytes, first_token: int,
                    steps: int, temperature: float = 0.0, rng=None) -> list[int]:
    """Transcript of ``steps`` tokens, the first one produced by prefill."""
    return decode_loop(decode_view, load_manifest_for(decode_view, manifest), first_token, steps,
                       temperature, rng)


def reference_unified_run(model: TransformerModel, stage_plan, kv_plan: KVSelectionPlan | None,
                          prompt, steps: int, merged=None) -> list[int]:
    """Single-process run of the same plans with no serialization."""
    plan = as_stage_plan(stage_plan)
    plan.check()
    prefill_view, decode_view = stage_views(model, plan, merged)
    out = forward_prefill(prefill_view, np.asarray(prompt))
    kv = out.kv
    missing = [lid for lid in decode_view.layer_ids if lid not in kv.layers]
    if missing:
        raise ConsistencyError(f"prefill view does not produce layers {missing}")
    kv = KVCache({lid: kv.layers[lid] for lid in decode_view.layer_ids}, kv.n_prefill, kv.next_position)
    if kv_plan is not None and kv_plan.selected_layers:
        idx = retention_indices(kv.n_prefill, kv_plan.p)
        kv = kv.prune({lid: idx for lid in kv_plan.selected_layers if lid in kv.layers})
    return decode_loop(decode_view, kv, int(np.argmax(out.logits[-1])), steps)


# ---------------------------------------------------------------------------
# loopback transport


def _recv_exact(conn: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = conn.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError(f"peer closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def send_envelope(sock: socket.socket, first_token: int, manifest: bytes) -> None:
    sock.sendall(_ENVELOPE.pack(first_token, len(manifest)) + manifest)


def recv_envelope(conn: socket.socket) -> tuple[int, bytes]:
    first, n = _ENVELOPE.unpack(_recv_exact(conn, _ENVELOPE.size))
    return first, _recv_exact(conn, n)


def run_two_node(model: TransformerModel, stage_plan, kv_plan: KVSelectionPlan | None, prompt,
                 steps: int, merged=None, transport: str = "socket", host: str = "127.0.0.1",
                 timeout: float = 30.0) -> RunResult:
    """Prefill in this thread, decode in another, KV shipped over ``transport``.

    ``transport`` is ``"socket"`` (loopback TCP) or ``"inproc"`` (bytes handed
    over directly, for tests that only care about the format).
    """
    plan: StagePlan = as_stage_plan(stage_plan)
    plan.check()
    prefill_view, decode_view = stage_views(model, plan, merged)
    timings: dict[str, float] = {}

    if transport == "inproc":
        pre = run_prefill_node(prefill_view, decode_view, prompt, kv_plan)
        timings["prefill_s"] = pre.prefill_seconds
        t0 = time.perf_counter()
        transcript = run_decode_node(decode_view, pre.manifest, pre.first_token, steps)
        timings["decode_s"] = time.perf_counter() - t0
        return RunResult(transcript, pre.manifest, pre.manifest, timings)
    if transport != "socket":
        raise ValueError(f"unknown transport {transport!r}")

    server = socket.create_server((host, 0))
    server.settimeout(timeout)
    port = server.getsockname()[1]
    box: dict = {}

    def decode_node():
        try:
            conn, _ = server.accept()
            with conn:
                conn.settimeout(timeout)
                t0 = time.perf_counter()
                first, payload = recv_envelope(conn)
                box["transfer_s"] = time.perf_counter() - t0
                box["received"] = payload
                t1 = time.perf_counter()
                box["transcript"] = run_decode_node(decode_view, payload, first, steps)
                box["decode_s"] = time.perf_counter() - t1
        except BaseException as exc:   # surfaced in the calling thread
            box["error"] = exc

    worker = threading.Thread(target=decode_node, name="pdprune-decode", daemon=True)
    worker.start()
    try:
        pre = run_prefill_node(prefill_view, decode_view, prompt, kv_plan)
        timings["prefill_s"] = pre.prefill_seconds
        with socket.create_connection((host, port), timeout=timeout) as sock:
            send_envelope(sock, pre.first_token, pre.manifest)
        worker.join(timeout)
    finally:
        server.close()
    if worker.is_alive():
        raise TimeoutError("decode node did not finish")
    if "error" in box:
        raise box["error"]
    timings.update({k: box[k] for k in ("transfer_s", "decode_s")})
    log.debug("two-node run: %d manifest bytes, %s", len(pre.manifest), timings)
    return RunResult(box["transcript"], pre.manifest, box["received"], timings)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class TransferMetrics:
    volume_bytes: int
    payload_bytes: int
    seconds: float

    def to_dict(self) -> dict:
        return {"volume_bytes": self.volume_bytes, "payload_bytes": self.payload_bytes,
                "seconds": self.seconds}


def transfer_time(n_bytes: int, bandwidth_bytes_per_s: float, latency_s: float = 0.0) -> float:
    if bandwidth_bytes_per_s <= 0:
        raise ValueError("bandwidth must be positive")
    if latency_s < 0:
        raise ValueError("latency must be non-negative")
    return latency_s + n_bytes / bandwidth_bytes_per_s


def transfer_metrics(manifest: bytes, bandwidth_bytes_per_s: float, latency_s: float = 0.0) -> TransferMetrics:
    """Wire size, K/V payload size and modeled link time of a manifest."""
    payload = decode_manifest(manifest).payload_bytes
    return TransferMetrics(len(manifest), payload, transfer_time(len(manifest), bandwidth_bytes_per_s, latency_s))


def logit_drift(model: TransformerModel, stage_plan, kv_plan: KVSelectionPlan | None, prompt,
                continuation, merged=None) -> np.ndarray:
    """Per-step L2 distance between pruned and unpruned decode logits.

    Both runs are teacher-forced on ``continuation`` so the distances show
    how the error evolves over decode steps rather than diverging tokens.
    """
    plan = as_stage_plan(stage_plan)
    prefill_view, decode_view = stage_views(model, plan, merged)
    ref = forward_prefill(model, np.asarray(prompt)).kv
    out = forward_prefill(prefill_view, np.asarray(prompt)).kv
    out = KVCache({lid: out.layers[lid] for lid in decode_view.layer_ids}, out.n_prefill, out.next_position)
    if kv_plan is not None and kv_plan.selected_layers:
        idx = retention_indices(out.n_prefill, kv_plan.p)
        out = out.prune({lid: idx for lid in kv_plan.selected_layers if lid in out.layers})
    drift = []
    for tok in continuation:
        a, ref = decode_step(model, int(tok), ref)
        b, out = decode_step(decode_view, int(tok), out)
        drift.append(float(np.linalg.norm(a - b)))
    return np.asarray(drift)
