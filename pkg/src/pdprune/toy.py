"""The shipped toy instance: model, calibration data and end-to-end scenarios.

The trained checkpoint ``toy.pdtk`` is rebuilt with ``python -m pdprune.toy``;
every number below is what that build used.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import partition, redundancy_profile
from .checkpoint import MergedRecord, dumps, load, loads
from .data import generate_calibration
from .distill import DEFAULT_LR, DEFAULT_STEPS, distill_pair, make_job
from .kvprune import KVSelectionPlan
from .model import ModelConfig, TransformerModel, build_model, collect_trace
from .plan import RemovalElement, StagePlan
from .train import train_model

log = logging.getLogger(__name__)

CONFIG = ModelConfig(n_blocks=10, d_model=32, n_heads=4, vocab=64, max_seq=64, dtype="f64")
MODEL_SEED = 7
TRAIN_SEED, TRAIN_SAMPLES, TRAIN_EPOCHS, TRAIN_LR = 100, 512, 3, 1e-2
CALIB_SEED, CALIB_SAMPLES, SEQ_LEN = 1, 32, 32
K = 3
D_T = 0.95

CHECKPOINT = "toy.pdtk"
SCENARIOS = ("toy-full", "toy-kv", "toy-staged")


def calibration(n_samples: int = CALIB_SAMPLES, seed: int = CALIB_SEED) -> np.ndarray:
    return generate_calibration(seed, n_samples, SEQ_LEN, CONFIG.vocab)


def train_toy_model() -> TransformerModel:
    data = generate_calibration(TRAIN_SEED, TRAIN_SAMPLES, SEQ_LEN, CONFIG.vocab)
    return train_model(build_model(CONFIG, MODEL_SEED), data, TRAIN_EPOCHS, lr=TRAIN_LR)


def build_checkpoint(steps: int = DEFAULT_STEPS) -> bytes:
    """Train the toy model and distill every pair of its distillation set."""
    model = train_toy_model()
    cal = calibration()
    profile = redundancy_profile(collect_trace(model, cal))
    part = partition(profile, K, D_T)
    merged = [distill_pair(make_job(model, cal, pair, profile.r, lr=DEFAULT_LR, epochs=steps))
              for pair in part.distillation]
    return dumps(model, merged)


def _data_path(name: str):
    return resources.files("pdprune").joinpath("assets").joinpath(name)


def load_toy() -> tuple[TransformerModel, list[MergedRecord]]:
    """The shipped trained toy model and its distilled pairs."""
    return loads(_data_path(CHECKPOINT).read_bytes())


@dataclass
class RunScenario:
    """One end-to-end run: plans, prompt and decode length."""

    name: str
    prompt_seed: int
    prompt_len: int
    steps: int
    prefill_removed: tuple[RemovalElement, ...] = ()
    decode_removed: tuple[RemovalElement, ...] = ()
    kv: dict = field(default_factory=dict)
    checkpoint: str = CHECKPOINT

    def prompt(self, vocab: int = CONFIG.vocab) -> np.ndarray:
        return generate_calibration(self.prompt_seed, 1, self.prompt_len, vocab)[0]

    def stage_plan(self) -> StagePlan:
        return StagePlan(self.prefill_removed, self.decode_removed)

    def kv_plan(self) -> KVSelectionPlan | None:
        if not self.kv or not self.kv.get("selected_layers"):
            return None
        layers = tuple(self.kv["selected_layers"])
        return KVSelectionPlan(self.kv["p"], self.kv.get("gamma", 0.75), len(layers), layers, self.prompt_len)

    @classmethod
    def from_json(cls, text: str) -> "RunScenario":
        doc = json.loads(text)
        if doc.get("format_version") != 1:
            raise ValueError(f"unsupported scenario format_version {doc.get('format_version')}")
        el = lambda xs: tuple(RemovalElement.from_json(x) for x in xs)  # noqa: E731
        return cls(doc["name"], doc["prompt"]["seed"], doc["prompt"]["length"], doc["steps"],
                   el(doc.get("prefill_removed", ())), el(doc.get("decode_removed", ())),
                   doc.get("kv", {}), doc.get("checkpoint", CHECKPOINT))


def load_scenario(name_or_path) -> RunScenario:
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        return RunScenario.from_json(p.read_text())
    text = resources.files("pdprune").joinpath("scenarios").joinpath(f"{name_or_path}.json").read_text()
    return RunScenario.from_json(text)


def scenario_model(sc: RunScenario, base: Path | None = None):
    """Model and merged blocks named by a scenario's checkpoint field."""
    if sc.checkpoint == CHECKPOINT:
        return load_toy()
    path = Path(sc.checkpoint)
    return load(path if path.is_absolute() or base is None else base / path)


def main() -> None:
    out = Path(__file__).with_name("assets") / CHECKPOINT
    out.parent.mkdir(exist_ok=True)
    out.write_bytes(build_checkpoint())
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
